//! Linearized implicit Euler: `A dv = b + h Haᵀ λa + h Hcᵀ λc` with
//! `A = M + hD + h²K`, `b = -h²Kv + h(P - f(x))`, `D = αM + βK`, followed by
//! the semi-explicit position update `x_f = x + h v_f`.
//!
//! Fixed DOFs are handled by projection: `A_p = Π A Π + (I - Π)` and the right
//! hand side is multiplied by `Π`, so fixed velocities are exactly zero.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::constitutive::{self, Materials};
use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, DVec, SparseCholesky, Triplets, Vec3};
use crate::mesh::{DofMask, TetMesh};

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub x: DVec,
    pub v: DVec,
    pub t: f64,
}

impl State {
    pub fn at_rest(mesh: &TetMesh) -> Self {
        Self {
            x: mesh.rest_vector(),
            v: DVec::zeros(mesh.dof_count()),
            t: 0.0,
        }
    }

    pub fn validate(&self, mesh: &TetMesh) -> Result<()> {
        for (what, vec) in [("positions", &self.x), ("velocities", &self.v)] {
            if vec.len() != mesh.dof_count() {
                return Err(Error::DimensionMismatch { what, expected: mesh.dof_count(), found: vec.len() });
            }
            if vec.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidParameter(alloc::format!("non-finite {what}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    /// time step (s)
    pub h: f64,
    /// m/s²
    pub gravity: Vec3,
    /// constant nodal loads (N), 3n; gravity is added on top
    pub loads: Option<DVec>,
    pub dof_mask: DofMask,
}

impl SimParams {
    pub fn new(h: f64) -> Self {
        Self {
            h,
            gravity: Vec3::zeros(),
            loads: None,
            dof_mask: DofMask::none(),
        }
    }

    pub fn validate(&self, mesh: &TetMesh) -> Result<()> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::InvalidParameter(alloc::format!("time step must be positive, got {}", self.h)));
        }
        if let Some(l) = &self.loads {
            if l.len() != mesh.dof_count() {
                return Err(Error::DimensionMismatch { what: "loads", expected: mesh.dof_count(), found: l.len() });
            }
        }
        if let Some(i) = self.dof_mask.fixed_nodes().find(|&i| i >= mesh.node_count()) {
            return Err(Error::IndexOutOfRange { index: i, len: mesh.node_count() });
        }
        Ok(())
    }
}

/// Lumped mass: `ρ_e V_e / 4` per incident node, repeated over the 3 DOFs.
pub fn lumped_mass(mesh: &TetMesh, mats: &Materials) -> DVec {
    let mut m = DVec::zeros(mesh.dof_count());
    for (e, tet) in mesh.tets().iter().enumerate() {
        let share = mats.of_tet(e).density * mesh.volumes()[e] / 4.0;
        for &i in tet {
            for c in 0..3 {
                m[3 * i + c] += share;
            }
        }
    }
    m
}

/// External forces `P`: gravity on the lumped mass plus constant loads.
pub fn external_forces(mass: &DVec, sim: &SimParams) -> DVec {
    let mut p = DVec::from_fn(mass.len(), |i, _| mass[i] * sim.gravity[i % 3]);
    if let Some(l) = &sim.loads {
        p += l;
    }
    p
}

/// Per-tet weights of `K` in `A`: `h β_e + h²`.
pub fn stiffness_weights(mats: &Materials, h: f64) -> Vec<f64> {
    mats.tet_material
        .iter()
        .map(|&m| h * mats.params[m].rayleigh_stiffness + h * h)
        .collect()
}

/// Per-DOF diagonal of the mass part of `A`: `(1 + h α_e) M_e` summed.
fn mass_diagonal(mesh: &TetMesh, mats: &Materials, h: f64) -> DVec {
    let mut m = DVec::zeros(mesh.dof_count());
    for (e, tet) in mesh.tets().iter().enumerate() {
        let p = mats.of_tet(e);
        let share = (1.0 + h * p.rayleigh_mass) * p.density * mesh.volumes()[e] / 4.0;
        for &i in tet {
            for c in 0..3 {
                m[3 * i + c] += share;
            }
        }
    }
    m
}

fn uniform_weight(w: &[f64]) -> Option<f64> {
    let first = *w.first()?;
    w.iter().all(|&x| x == first).then_some(first)
}

fn diagonal(d: &DVec) -> CsrMatrix {
    let mut t = Triplets::with_capacity(d.len(), d.len(), d.len());
    for (i, &v) in d.iter().enumerate() {
        t.push(i, i, v);
    }
    t.to_csr()
}

/// Assembled and factorized linear system of one step.
#[derive(Debug, Clone)]
pub struct SystemAssembly {
    pub h: f64,
    /// lumped mass diagonal (kg), 3n
    pub mass: DVec,
    pub stiffness: CsrMatrix,
    pub damping: CsrMatrix,
    /// unprojected `M + hD + h²K`
    pub system: CsrMatrix,
    /// projected system matrix `A_p`
    pub projected: CsrMatrix,
    /// unprojected right-hand side `b`
    pub rhs: DVec,
    pub internal_forces: DVec,
    pub external_forces: DVec,
    /// `true` on fixed DOFs
    pub fixed: Vec<bool>,
    pub stiffness_weights: Vec<f64>,
    factor: SparseCholesky,
}

impl SystemAssembly {
    /// `Π r`
    pub fn project(&self, r: &DVec) -> DVec {
        let mut out = r.clone();
        for (o, &f) in out.iter_mut().zip(&self.fixed) {
            if f {
                *o = 0.0;
            }
        }
        out
    }

    /// `A_p⁻¹ Π r`
    pub fn solve(&self, r: &DVec) -> DVec {
        let pr = self.project(r);
        if pr.iter().all(|&c| c == 0.0) {
            return pr;
        }
        let mut u = self.factor.solve_refined(&self.projected, &pr);
        for (o, &f) in u.iter_mut().zip(&self.fixed) {
            if f {
                *o = 0.0;
            }
        }
        u
    }

    pub fn dof_count(&self) -> usize {
        self.mass.len()
    }
}

pub fn assemble(mesh: &TetMesh, mats: &Materials, state: &State, sim: &SimParams) -> Result<SystemAssembly> {
    state.validate(mesh)?;
    sim.validate(mesh)?;
    mats.validate(mesh)?;
    let h = sim.h;
    let mass = lumped_mass(mesh, mats);
    let k = constitutive::stiffness(mesh, mats, &state.x)?;
    let weights = stiffness_weights(mats, h);
    let betas: Vec<f64> = mats.tet_material.iter().map(|&m| mats.params[m].rayleigh_stiffness).collect();
    let alphas_m = {
        let mut d = DVec::zeros(mass.len());
        for (e, tet) in mesh.tets().iter().enumerate() {
            let p = mats.of_tet(e);
            let share = p.rayleigh_mass * p.density * mesh.volumes()[e] / 4.0;
            for &i in tet {
                for c in 0..3 {
                    d[3 * i + c] += share;
                }
            }
        }
        d
    };
    let k_beta = match uniform_weight(&betas) {
        Some(b) => k.scale(b),
        None => constitutive::stiffness_weighted(mesh, mats, &state.x, &betas)?,
    };
    let k_weighted = match uniform_weight(&weights) {
        Some(w) => k.scale(w),
        None => constitutive::stiffness_weighted(mesh, mats, &state.x, &weights)?,
    };
    let damping = diagonal(&alphas_m).linear_combination(1.0, &k_beta, 1.0);
    let system = diagonal(&mass_diagonal(mesh, mats, h)).linear_combination(1.0, &k_weighted, 1.0);
    let fixed = sim.dof_mask.dof_flags(mesh.node_count());
    let projected = system.project_identity(&fixed);
    let factor = SparseCholesky::factor(&projected)?;
    let f = constitutive::internal_forces(mesh, mats, &state.x)?;
    let p = external_forces(&mass, sim);
    let rhs = k.mul_vec(&state.v) * (-h * h) + (&p - &f) * h;
    Ok(SystemAssembly {
        h,
        mass,
        stiffness: k,
        damping,
        system,
        projected,
        rhs,
        internal_forces: f,
        external_forces: p,
        fixed,
        stiffness_weights: weights,
        factor,
    })
}

/// `v_free = v + A⁻¹ b`, zero on fixed DOFs.
pub fn free_velocity(asm: &SystemAssembly, state: &State) -> DVec {
    asm.project(&state.v) + asm.solve(&asm.rhs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub v_free: DVec,
    pub delta_a: DVec,
    pub delta_c: DVec,
    pub v_f: DVec,
    pub x_f: DVec,
}

/// `h A⁻¹ Hᵀ λ`
pub fn correction(asm: &SystemAssembly, jacobian: &CsrMatrix, lambda: &DVec, what: &'static str) -> Result<DVec> {
    if jacobian.nrows() != lambda.len() {
        return Err(Error::DimensionMismatch { what, expected: jacobian.nrows(), found: lambda.len() });
    }
    if jacobian.ncols() != asm.dof_count() {
        return Err(Error::DimensionMismatch { what, expected: asm.dof_count(), found: jacobian.ncols() });
    }
    Ok(asm.solve(&(jacobian.tr_mul_vec(lambda) * asm.h)))
}

pub fn apply_corrections(
    asm: &SystemAssembly,
    x: &DVec,
    v_free: &DVec,
    h_a: &CsrMatrix,
    lambda_a: &DVec,
    h_c: &CsrMatrix,
    lambda_c: &DVec,
) -> Result<StepResult> {
    let delta_a = correction(asm, h_a, lambda_a, "actuation forces")?;
    let delta_c = correction(asm, h_c, lambda_c, "contact forces")?;
    Ok(finish(asm, x, v_free.clone(), delta_a, delta_c))
}

pub(crate) fn finish(asm: &SystemAssembly, x: &DVec, v_free: DVec, delta_a: DVec, delta_c: DVec) -> StepResult {
    let v_f = &v_free + &delta_a + &delta_c;
    let x_f = x + &v_f * asm.h;
    StepResult { v_free, delta_a, delta_c, v_f, x_f }
}

/// Kinetic plus stored elastic energy.
pub fn mechanical_energy(mesh: &TetMesh, mats: &Materials, state: &State) -> Result<f64> {
    let m = lumped_mass(mesh, mats);
    let kinetic = 0.5 * state.v.iter().zip(m.iter()).map(|(v, m)| m * v * v).sum::<f64>();
    Ok(kinetic + constitutive::total_energy(mesh, mats, &state.x)?)
}
