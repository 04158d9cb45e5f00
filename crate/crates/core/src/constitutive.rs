//! Constitutive laws and their element-level derivatives.
//!
//! Internal forces follow `f_{e,i} = V_e F_e S_e ∇N_i` (single-point quadrature of
//! a linear tet), i.e. `f = ∂W/∂x` for the stored energy `W = Σ V_e Ψ_e`, and the
//! stiffness is `K = ∂f/∂x`. The sign convention matches the implicit system:
//! `b = -h²Kv + h(P - f)`.
//!
//! Every law is linear in the Lamé pair `(λ, μ)`, which makes material
//! derivatives exact: `∂f/∂λ` and `∂f/∂μ` are forces evaluated with unit moduli.

use alloc::vec::Vec;

use nalgebra::SVD;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::{skew, CsrMatrix, DVec, Mat3, Triplets, Vec3};
use crate::mesh::TetMesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Law {
    Corotational,
    StVK,
    NeoHookean,
}

/// Differentiable material parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaterialParameter {
    Young,
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams {
    pub law: Law,
    /// Young's modulus (Pa)
    pub young: f64,
    pub poisson: f64,
    /// kg/m³
    pub density: f64,
    /// Rayleigh mass coefficient α (1/s)
    pub rayleigh_mass: f64,
    /// Rayleigh stiffness coefficient β (s)
    pub rayleigh_stiffness: f64,
}

impl MaterialParams {
    pub fn new(law: Law, young: f64, poisson: f64, density: f64) -> Self {
        Self {
            law,
            young,
            poisson,
            density,
            rayleigh_mass: 0.0,
            rayleigh_stiffness: 0.0,
        }
    }

    pub fn with_damping(mut self, alpha: f64, beta: f64) -> Self {
        self.rayleigh_mass = alpha;
        self.rayleigh_stiffness = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.young > 0.0
            && self.poisson > -1.0
            && self.poisson < 0.5
            && self.density > 0.0
            && self.rayleigh_mass >= 0.0
            && self.rayleigh_stiffness >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(alloc::format!(
                "material out of range: E={} nu={} rho={} alpha={} beta={}",
                self.young,
                self.poisson,
                self.density,
                self.rayleigh_mass,
                self.rayleigh_stiffness
            )))
        }
    }

    pub fn lame(&self) -> Lame {
        let (lambda, mu) = lame_from_young_poisson(self.young, self.poisson);
        Lame { lambda, mu }
    }

    /// `(∂λ/∂p, ∂μ/∂p)`
    pub fn lame_derivative(&self, p: MaterialParameter) -> (f64, f64) {
        let (e, nu) = (self.young, self.poisson);
        match p {
            MaterialParameter::Young => {
                let l = self.lame();
                (l.lambda / e, l.mu / e)
            }
            MaterialParameter::Poisson => {
                let d = (1.0 + nu) * (1.0 - 2.0 * nu);
                // d/dν [Eν/((1+ν)(1-2ν))] = E(1 + 2ν²)/d²
                let dlambda = e * (1.0 + 2.0 * nu * nu) / (d * d);
                let dmu = -e / (2.0 * (1.0 + nu) * (1.0 + nu));
                (dlambda, dmu)
            }
        }
    }

    pub fn get(&self, p: MaterialParameter) -> f64 {
        match p {
            MaterialParameter::Young => self.young,
            MaterialParameter::Poisson => self.poisson,
        }
    }

    pub fn set(&mut self, p: MaterialParameter, value: f64) {
        match p {
            MaterialParameter::Young => self.young = value,
            MaterialParameter::Poisson => self.poisson = value,
        }
    }
}

/// `(λ_L, μ_L)` from Young's modulus and Poisson's ratio. Requires `-1 < ν < 0.5`.
pub fn lame_from_young_poisson(young: f64, poisson: f64) -> (f64, f64) {
    let lambda = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson));
    let mu = young / (2.0 * (1.0 + poisson));
    (lambda, mu)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lame {
    pub lambda: f64,
    pub mu: f64,
}

/// Per-tet material assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Materials {
    pub params: Vec<MaterialParams>,
    pub tet_material: Vec<usize>,
}

impl Materials {
    pub fn uniform(params: MaterialParams, tet_count: usize) -> Self {
        Self {
            params: alloc::vec![params],
            tet_material: alloc::vec![0; tet_count],
        }
    }

    /// One material per body of `mesh`.
    pub fn per_body(params: Vec<MaterialParams>, mesh: &TetMesh) -> Result<Self> {
        if let Some(&b) = mesh.tet_body().iter().find(|&&b| b >= params.len()) {
            return Err(Error::IndexOutOfRange { index: b, len: params.len() });
        }
        Ok(Self {
            params,
            tet_material: mesh.tet_body().to_vec(),
        })
    }

    pub fn validate(&self, mesh: &TetMesh) -> Result<()> {
        if self.tet_material.len() != mesh.tet_count() {
            return Err(Error::DimensionMismatch {
                what: "tet material ids",
                expected: mesh.tet_count(),
                found: self.tet_material.len(),
            });
        }
        if let Some(&m) = self.tet_material.iter().find(|&&m| m >= self.params.len()) {
            return Err(Error::IndexOutOfRange { index: m, len: self.params.len() });
        }
        self.params.iter().try_for_each(|p| p.validate())
    }

    pub fn of_tet(&self, e: usize) -> &MaterialParams {
        &self.params[self.tet_material[e]]
    }
}

/// Deformation measures of one element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementKinematics {
    pub f: Mat3,
    /// Green-Lagrange strain `(C - I)/2`
    pub strain: Mat3,
    /// Right Cauchy-Green tensor `FᵀF`
    pub c: Mat3,
}

/// `F = Σ x_i ⊗ ∇N_i`
pub fn deformation_gradient(grads: &[Vec3; 4], x: &[Vec3; 4]) -> ElementKinematics {
    let mut f = Mat3::zeros();
    for i in 0..4 {
        f += x[i] * grads[i].transpose();
    }
    let c = f.transpose() * f;
    ElementKinematics {
        f,
        strain: (c - Mat3::identity()) * 0.5,
        c,
    }
}

/// Second Piola-Kirchhoff stress. The corotational law is defined at force level;
/// its value here is `Rᵀ P` expressed in the rest frame (`σ(S - I)` with `F = RS`).
pub fn pk2_stress(law: Law, kin: &ElementKinematics, lame: Lame) -> Result<Mat3> {
    let Lame { lambda, mu } = lame;
    let id = Mat3::identity();
    match law {
        Law::StVK => Ok(id * (lambda * kin.strain.trace()) + kin.strain * (2.0 * mu)),
        Law::NeoHookean => {
            let det = kin.f.determinant();
            if det <= 0.0 {
                return Err(Error::InvertedElement { tet: 0, det });
            }
            let ci = kin.c.try_inverse().ok_or(Error::InvertedElement { tet: 0, det })?;
            Ok((id - ci) * mu + ci * (lambda * det.ln()))
        }
        Law::Corotational => {
            let (_, s) = polar_decomposition(&kin.f);
            Ok(linear_stress(&(s - id), lame))
        }
    }
}

/// Stored energy density `Ψ(F)`.
pub fn energy_density(law: Law, f: &Mat3, lame: Lame) -> Result<f64> {
    let Lame { lambda, mu } = lame;
    let c = f.transpose() * f;
    Ok(match law {
        Law::StVK => {
            let e = (c - Mat3::identity()) * 0.5;
            0.5 * lambda * e.trace().powi(2) + mu * (e * e).trace()
        }
        Law::NeoHookean => {
            let det = f.determinant();
            if det <= 0.0 {
                return Err(Error::InvertedElement { tet: 0, det });
            }
            let lj = det.ln();
            0.5 * mu * (c.trace() - 3.0) - mu * lj + 0.5 * lambda * lj * lj
        }
        Law::Corotational => {
            let (_, s) = polar_decomposition(f);
            let eps = s - Mat3::identity();
            mu * eps.norm_squared() + 0.5 * lambda * eps.trace().powi(2)
        }
    })
}

fn linear_stress(eps: &Mat3, lame: Lame) -> Mat3 {
    Mat3::identity() * (lame.lambda * eps.trace()) + eps * (2.0 * lame.mu)
}

fn sym(a: &Mat3) -> Mat3 {
    (a + a.transpose()) * 0.5
}

/// Polar decomposition `F = R S` with `R ∈ SO(3)`, from an SVD with the sign of
/// the smallest singular direction flipped when `det F < 0`.
pub fn polar_decomposition(f: &Mat3) -> (Mat3, Mat3) {
    let svd = SVD::new(*f, true, true);
    let mut u = svd.u.expect("u requested");
    let mut v_t = svd.v_t.expect("v_t requested");
    let mut sigma = svd.singular_values;
    if u.determinant() < 0.0 {
        let k = sigma.imin();
        u.column_mut(k).neg_mut();
        sigma[k] = -sigma[k];
    }
    if v_t.determinant() < 0.0 {
        let k = sigma.iamin();
        v_t.row_mut(k).neg_mut();
        sigma[k] = -sigma[k];
    }
    let r = u * v_t;
    let s = v_t.transpose() * Mat3::from_diagonal(&sigma) * v_t;
    (r, sym(&s))
}

/// Directional derivative of the polar rotation: `dR = R [ω]×` with
/// `(tr(S) I - S) ω = axial(Rᵀ dF - dFᵀ R)`.
pub fn polar_rotation_derivative(r: &Mat3, s: &Mat3, df: &Mat3) -> Mat3 {
    let w = r.transpose() * df - df.transpose() * r;
    let axial = Vec3::new(w[(2, 1)], w[(0, 2)], w[(1, 0)]);
    let m = Mat3::identity() * s.trace() - s;
    let omega = m.lu().solve(&axial).unwrap_or_else(Vec3::zeros);
    r * skew(&omega)
}

/// Cached per-element quantities for stress and derivative evaluation.
#[derive(Debug, Clone)]
pub struct ElementState {
    law: Law,
    lame: Lame,
    f: Mat3,
    stress2: Mat3,
    // NeoHookean
    c_inv: Mat3,
    log_j: f64,
    // Corotational
    rot: Mat3,
    stretch: Mat3,
}

impl ElementState {
    pub fn new(law: Law, f: Mat3, lame: Lame) -> Result<Self> {
        let id = Mat3::identity();
        let mut st = Self {
            law,
            lame,
            f,
            stress2: Mat3::zeros(),
            c_inv: id,
            log_j: 0.0,
            rot: id,
            stretch: id,
        };
        match law {
            Law::StVK => {
                let e = (f.transpose() * f - id) * 0.5;
                st.stress2 = linear_stress(&e, lame);
            }
            Law::NeoHookean => {
                let det = f.determinant();
                if det <= 0.0 {
                    return Err(Error::InvertedElement { tet: 0, det });
                }
                let c = f.transpose() * f;
                st.c_inv = c.try_inverse().ok_or(Error::InvertedElement { tet: 0, det })?;
                st.log_j = det.ln();
                st.stress2 = (id - st.c_inv) * lame.mu + st.c_inv * (lame.lambda * st.log_j);
            }
            Law::Corotational => {
                let (r, s) = polar_decomposition(&f);
                st.rot = r;
                st.stretch = s;
                st.stress2 = linear_stress(&(s - id), lame);
            }
        }
        Ok(st)
    }

    /// First Piola-Kirchhoff stress `P`.
    pub fn pk1(&self) -> Mat3 {
        match self.law {
            Law::Corotational => self.rot * self.stress2,
            _ => self.f * self.stress2,
        }
    }

    fn ds(&self, dc: &Mat3) -> Mat3 {
        let Lame { lambda, mu } = self.lame;
        match self.law {
            Law::StVK => Mat3::identity() * (0.5 * lambda * dc.trace()) + dc * mu,
            Law::NeoHookean => {
                let ci = &self.c_inv;
                let x = ci * dc * ci;
                x * (mu - lambda * self.log_j) + ci * (0.5 * lambda * (ci * dc).trace())
            }
            Law::Corotational => unreachable!("corotational tangent is handled at force level"),
        }
    }

    /// Tangent used to build the system stiffness `K`. Exact for the hyperelastic
    /// laws; holds `R` fixed for the corotational law.
    pub fn tangent(&self, a: &Mat3) -> Mat3 {
        match self.law {
            Law::Corotational => self.rot * linear_stress(&sym(&(self.rot.transpose() * a)), self.lame),
            _ => {
                let dc = a.transpose() * self.f + self.f.transpose() * a;
                a * self.stress2 + self.f * self.ds(&dc)
            }
        }
    }

    /// Exact `dP[a]`, including the rotation derivative for the corotational law.
    pub fn exact_tangent(&self, a: &Mat3) -> Mat3 {
        match self.law {
            Law::Corotational => {
                let dr = polar_rotation_derivative(&self.rot, &self.stretch, a);
                let deps = sym(&(dr.transpose() * self.f + self.rot.transpose() * a));
                dr * self.stress2 + self.rot * linear_stress(&deps, self.lame)
            }
            _ => self.tangent(a),
        }
    }

    /// Derivative of `tangent(F)[a]` along `dF = b`.
    pub fn tangent_derivative(&self, a: &Mat3, b: &Mat3) -> Mat3 {
        let Lame { lambda, mu } = self.lame;
        match self.law {
            Law::Corotational => {
                let dr = polar_rotation_derivative(&self.rot, &self.stretch, b);
                dr * linear_stress(&sym(&(self.rot.transpose() * a)), self.lame)
                    + self.rot * linear_stress(&sym(&(dr.transpose() * a)), self.lame)
            }
            Law::StVK => {
                let f = &self.f;
                let dc_a = a.transpose() * f + f.transpose() * a;
                let dc_b = b.transpose() * f + f.transpose() * b;
                let d2c = a.transpose() * b + b.transpose() * a;
                a * self.ds(&dc_b) + b * self.ds(&dc_a) + f * self.ds(&d2c)
            }
            Law::NeoHookean => {
                let f = &self.f;
                let ci = &self.c_inv;
                let dc_a = a.transpose() * f + f.transpose() * a;
                let dc_b = b.transpose() * f + f.transpose() * b;
                let d2c = a.transpose() * b + b.transpose() * a;
                let dlj_a = 0.5 * (ci * dc_a).trace();
                let dlj_b = 0.5 * (ci * dc_b).trace();
                let xa = ci * dc_a * ci;
                let xb = ci * dc_b * ci;
                let coef = mu - lambda * self.log_j;
                let d2s = xa * (-lambda * dlj_b)
                    + (-(xb * dc_a * ci) - xa * dc_b * ci + ci * d2c * ci) * coef
                    + ci * (0.5 * lambda * ((ci * d2c).trace() - (xb * dc_a).trace()))
                    - xb * (lambda * dlj_a);
                a * self.ds(&dc_b) + b * self.ds(&dc_a) + f * d2s
            }
        }
    }
}

fn element_positions(x: &DVec, tet: &[usize; 4]) -> [Vec3; 4] {
    tet.map(|i| Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]))
}

fn element_state(mesh: &TetMesh, mats: &Materials, x: &DVec, e: usize, lame: Lame) -> Result<ElementState> {
    let tet = &mesh.tets()[e];
    let kin = deformation_gradient(&mesh.gradients()[e], &element_positions(x, tet));
    ElementState::new(mats.of_tet(e).law, kin.f, lame).map_err(|err| match err {
        Error::InvertedElement { det, .. } => Error::InvertedElement { tet: e, det },
        other => other,
    })
}

/// Lamé pair used when evaluating element `e`.
#[derive(Debug, Clone, Copy)]
enum LameChoice {
    Actual,
    /// derivative of a force-level quantity with respect to a material parameter
    Derivative(MaterialParameter),
}

fn lame_for(mats: &Materials, e: usize, choice: LameChoice) -> Lame {
    let p = mats.of_tet(e);
    match choice {
        LameChoice::Actual => p.lame(),
        LameChoice::Derivative(which) => {
            let (lambda, mu) = p.lame_derivative(which);
            Lame { lambda, mu }
        }
    }
}

/// Stored elastic energy `Σ V_e Ψ_e`.
pub fn total_energy(mesh: &TetMesh, mats: &Materials, x: &DVec) -> Result<f64> {
    let mut w = 0.0;
    for (e, tet) in mesh.tets().iter().enumerate() {
        let kin = deformation_gradient(&mesh.gradients()[e], &element_positions(x, tet));
        let p = mats.of_tet(e);
        w += mesh.volumes()[e]
            * energy_density(p.law, &kin.f, p.lame()).map_err(|err| match err {
                Error::InvertedElement { det, .. } => Error::InvertedElement { tet: e, det },
                other => other,
            })?;
    }
    Ok(w)
}

fn scatter_force(f: &mut DVec, tet: &[usize; 4], grads: &[Vec3; 4], p: &Mat3, weight: f64) {
    for k in 0..4 {
        let fi = p * grads[k] * weight;
        for c in 0..3 {
            f[3 * tet[k] + c] += fi[c];
        }
    }
}

/// Internal forces `f_i = Σ_e V_e P_e ∇N_i` (3n).
pub fn internal_forces(mesh: &TetMesh, mats: &Materials, x: &DVec) -> Result<DVec> {
    forces_with(mesh, mats, x, LameChoice::Actual, None)
}

/// `∂f/∂p` for material `material` and parameter `which`.
pub fn internal_forces_material_derivative(
    mesh: &TetMesh,
    mats: &Materials,
    x: &DVec,
    material: usize,
    which: MaterialParameter,
) -> Result<DVec> {
    forces_with(mesh, mats, x, LameChoice::Derivative(which), Some(material))
}

fn forces_with(
    mesh: &TetMesh,
    mats: &Materials,
    x: &DVec,
    choice: LameChoice,
    only: Option<usize>,
) -> Result<DVec> {
    let mut f = DVec::zeros(mesh.dof_count());
    for (e, tet) in mesh.tets().iter().enumerate() {
        if only.is_some_and(|m| mats.tet_material[e] != m) {
            continue;
        }
        let st = element_state(mesh, mats, x, e, lame_for(mats, e, choice))?;
        scatter_force(&mut f, tet, &mesh.gradients()[e], &st.pk1(), mesh.volumes()[e]);
    }
    Ok(f)
}

/// Unit-direction matrix `e_c ∇N_jᵀ`.
#[inline]
fn unit_df(grad: &Vec3, c: usize) -> Mat3 {
    let mut a = Mat3::zeros();
    a.set_row(c, &grad.transpose());
    a
}

#[derive(Debug, Clone, Copy)]
enum TangentKind {
    System,
    Exact,
}

fn assemble_tangent(
    mesh: &TetMesh,
    mats: &Materials,
    x: &DVec,
    weights: Option<&[f64]>,
    kind: TangentKind,
    choice: LameChoice,
    only: Option<usize>,
) -> Result<CsrMatrix> {
    let n = mesh.dof_count();
    let mut t = Triplets::with_capacity(n, n, 144 * mesh.tet_count());
    for (e, tet) in mesh.tets().iter().enumerate() {
        if only.is_some_and(|m| mats.tet_material[e] != m) {
            continue;
        }
        let w = mesh.volumes()[e] * weights.map_or(1.0, |w| w[e]);
        if w == 0.0 {
            continue;
        }
        let st = element_state(mesh, mats, x, e, lame_for(mats, e, choice))?;
        let g = &mesh.gradients()[e];
        for j in 0..4 {
            for c in 0..3 {
                let a = unit_df(&g[j], c);
                let dp = match kind {
                    TangentKind::System => st.tangent(&a),
                    TangentKind::Exact => st.exact_tangent(&a),
                };
                for i in 0..4 {
                    let col = dp * g[i] * w;
                    for r in 0..3 {
                        t.push(3 * tet[i] + r, 3 * tet[j] + c, col[r]);
                    }
                }
            }
        }
    }
    Ok(t.to_csr())
}

/// System stiffness `K` (3n×3n). Symmetric for StVK and NeoHookean; the
/// corotational law holds the element rotations fixed.
pub fn stiffness(mesh: &TetMesh, mats: &Materials, x: &DVec) -> Result<CsrMatrix> {
    assemble_tangent(mesh, mats, x, None, TangentKind::System, LameChoice::Actual, None)
}

/// `Σ_e w_e K_e`
pub fn stiffness_weighted(mesh: &TetMesh, mats: &Materials, x: &DVec, weights: &[f64]) -> Result<CsrMatrix> {
    assemble_tangent(mesh, mats, x, Some(weights), TangentKind::System, LameChoice::Actual, None)
}

/// Exact `∂f/∂x`; equal to [`stiffness`] except for the corotational law.
pub fn force_jacobian(mesh: &TetMesh, mats: &Materials, x: &DVec) -> Result<CsrMatrix> {
    assemble_tangent(mesh, mats, x, None, TangentKind::Exact, LameChoice::Actual, None)
}

/// `∂(K_w V)/∂p` for one material parameter, where `K_w = Σ_e w_e K_e`.
pub fn dkv_dmaterial(
    mesh: &TetMesh,
    mats: &Materials,
    x: &DVec,
    v: &DVec,
    weights: Option<&[f64]>,
    material: usize,
    which: MaterialParameter,
) -> Result<DVec> {
    let k = assemble_tangent(
        mesh,
        mats,
        x,
        weights,
        TangentKind::System,
        LameChoice::Derivative(which),
        Some(material),
    )?;
    Ok(k.mul_vec(v))
}

/// `∂(K_w(x) V)/∂x` as a sparse 3n×3n matrix, built from per-tet 12×12 blocks.
pub fn dkv_dx(mesh: &TetMesh, mats: &Materials, x: &DVec, v: &DVec, weights: Option<&[f64]>) -> Result<CsrMatrix> {
    let n = mesh.dof_count();
    let mut t = Triplets::with_capacity(n, n, 144 * mesh.tet_count());
    for (e, tet) in mesh.tets().iter().enumerate() {
        let w = mesh.volumes()[e] * weights.map_or(1.0, |w| w[e]);
        if w == 0.0 {
            continue;
        }
        let g = &mesh.gradients()[e];
        let mut av = Mat3::zeros();
        for k in 0..4 {
            av += Vec3::new(v[3 * tet[k]], v[3 * tet[k] + 1], v[3 * tet[k] + 2]) * g[k].transpose();
        }
        if av.iter().all(|&c| c == 0.0) {
            continue;
        }
        let st = element_state(mesh, mats, x, e, mats.of_tet(e).lame())?;
        for j in 0..4 {
            for c in 0..3 {
                let d = st.tangent_derivative(&av, &unit_df(&g[j], c));
                for i in 0..4 {
                    let col = d * g[i] * w;
                    for r in 0..3 {
                        t.push(3 * tet[i] + r, 3 * tet[j] + c, col[r]);
                    }
                }
            }
        }
    }
    Ok(t.to_csr())
}
