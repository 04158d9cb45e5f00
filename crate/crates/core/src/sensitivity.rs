//! Forward-mode derivatives of one step and of multi-step rollouts.
//!
//! A [`Tangent`] is an input perturbation `(dx, dv, dλ_a, dp)`. Pushing it
//! through a step gives
//!
//! ```text
//! dv_free = Π dv + A⁻¹Π(db − dA u),           u = A⁻¹Π b
//! dδ_a    = A⁻¹Π(h d(H_aᵀλ_a) − dA δ_a)
//! dδ_c    = A⁻¹Π(−dA δ_c) + hA⁻¹Π ∂(H_cᵀλ_c)/∂x dx + hA⁻¹Π H_cᵀ dλ_c
//! dv_f    = dv_free + dδ_a + dδ_c,            dx_f = dx + h dv_f
//! ```
//!
//! where `dA = Σ_e (hβ_e + h²) dK_e` and
//! `db = −h²(dK v + K dv) − h(∂f/∂x dx + ∂f/∂p dp)`.
//!
//! The contact forces change according to the fixed-mode linearization of the
//! NCP. With `dσ = G dλ + r`, `r = dσ|_{λ fixed}`, each contact contributes
//! three rows:
//!
//! * breaking: `dλ = 0`
//! * sticking: `dσ = 0`
//! * sliding:  `dσ_N = 0` and
//!   `dλ_T + μ t dλ_N + (μλ_N/‖σ_T‖)(I − ttᵀ) dσ_T = 0` with `t = σ_T/‖σ_T‖`
//!   (for `μ = 0` simply `dλ_T = 0`).
//!
//! Rows are stacked into `Ā dλ = −B̄ r` and solved by QR.

use alloc::vec;
use alloc::vec::Vec;

use crate::actuation::{self, DerivativeSide};
use crate::constitutive::{self, MaterialParameter};
use crate::contact::{ContactMode, DelassusProblem, NcpSolution};
use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, DMat, DVec};
use crate::scene::{Scene, StepRecord};
#[allow(unused_imports)]
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffKind {
    InitialPosition,
    InitialVelocity,
    Actuation,
    Material { material: usize, param: MaterialParameter },
}

/// A block of differentiation variables. For positions and velocities the
/// indices are DOF indices, for actuation actuator indices; a material
/// variable has a single column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffVariable {
    pub kind: DiffKind,
    pub indices: Vec<usize>,
}

impl DiffVariable {
    pub fn positions(indices: Vec<usize>) -> Self {
        Self { kind: DiffKind::InitialPosition, indices }
    }

    pub fn velocities(indices: Vec<usize>) -> Self {
        Self { kind: DiffKind::InitialVelocity, indices }
    }

    pub fn actuation(indices: Vec<usize>) -> Self {
        Self { kind: DiffKind::Actuation, indices }
    }

    pub fn material(material: usize, param: MaterialParameter) -> Self {
        Self { kind: DiffKind::Material { material, param }, indices: vec![0] }
    }

    pub fn columns(&self) -> usize {
        self.indices.len()
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            DiffKind::InitialPosition => "x",
            DiffKind::InitialVelocity => "v",
            DiffKind::Actuation => "lambda_a",
            DiffKind::Material { param: MaterialParameter::Young, .. } => "E",
            DiffKind::Material { param: MaterialParameter::Poisson, .. } => "nu",
        }
    }

    pub fn validate(&self, scene: &Scene) -> Result<()> {
        let len = match self.kind {
            DiffKind::InitialPosition | DiffKind::InitialVelocity => scene.mesh.dof_count(),
            DiffKind::Actuation => scene.actuator_count(),
            DiffKind::Material { material, .. } => {
                if material >= scene.materials.params.len() {
                    return Err(Error::IndexOutOfRange { index: material, len: scene.materials.params.len() });
                }
                1
            }
        };
        match self.indices.iter().find(|&&i| i >= len) {
            Some(&i) => Err(Error::IndexOutOfRange { index: i, len }),
            None => Ok(()),
        }
    }

    /// Unit tangent of column `col`.
    pub fn tangent(&self, col: usize, ndof: usize, n_act: usize) -> Tangent {
        let mut t = Tangent::zeros(ndof, n_act);
        let i = self.indices[col];
        match self.kind {
            DiffKind::InitialPosition => t.dx[i] = 1.0,
            DiffKind::InitialVelocity => t.dv[i] = 1.0,
            DiffKind::Actuation => t.dla[i] = 1.0,
            DiffKind::Material { material, param } => t.dp.push((material, param, 1.0)),
        }
        t
    }
}

/// Input perturbation of a step.
#[derive(Debug, Clone, PartialEq)]
pub struct Tangent {
    pub dx: DVec,
    pub dv: DVec,
    pub dla: DVec,
    pub dp: Vec<(usize, MaterialParameter, f64)>,
}

impl Tangent {
    pub fn zeros(ndof: usize, n_act: usize) -> Self {
        Self { dx: DVec::zeros(ndof), dv: DVec::zeros(ndof), dla: DVec::zeros(n_act), dp: Vec::new() }
    }
}

/// Output of pushing one tangent through a step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTangent {
    pub dv_free: DVec,
    pub ddelta_a: DVec,
    /// the three terms of `dδ_c`: through `A`, through `H_c`, through `λ_c`
    pub ddelta_c_terms: [DVec; 3],
    pub ddelta_c: DVec,
    pub dlambda_c: DVec,
    pub dv_f: DVec,
    pub dx_f: DVec,
}

/// Fixed-mode linearization of a solved NCP.
#[derive(Debug, Clone)]
pub struct NcpLinearization {
    qr: Option<nalgebra::QR<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    b_bar: DMat,
    pub modes: Vec<ContactMode>,
    /// a contact was ambiguous or sliding with vanishing slip velocity
    pub mode_boundary: bool,
}

const RANK_TOLERANCE: f64 = 1e-11;

impl NcpLinearization {
    pub fn new(problem: &DelassusProblem, solution: &NcpSolution) -> Result<Self> {
        let nc = problem.contact_count();
        let n = 3 * nc;
        let g = &problem.g_mat;
        let scale = problem.scale();
        let mut a = DMat::zeros(n, n);
        let mut b = DMat::zeros(n, n);
        let mut boundary = solution.ambiguous.iter().any(|&x| x);
        for k in 0..nc {
            let r0 = 3 * k;
            let mu = problem.mu[k];
            let sigma_t = nalgebra::Vector2::new(solution.sigma[r0], solution.sigma[r0 + 1]);
            let slip = sigma_t.norm();
            let mut mode = solution.modes[k];
            if mode == ContactMode::Sliding && mu > 0.0 && slip <= crate::contact::DEFAULT_MODE_EPSILON * scale.sigma {
                // sliding force with no slip: stick-slip boundary
                boundary = true;
                mode = ContactMode::Sticking;
            }
            match mode {
                ContactMode::Breaking => {
                    for i in 0..3 {
                        a[(r0 + i, r0 + i)] = 1.0;
                    }
                }
                ContactMode::Sticking => {
                    for i in 0..3 {
                        a.row_mut(r0 + i).copy_from(&g.row(r0 + i));
                        b[(r0 + i, r0 + i)] = 1.0;
                    }
                }
                ContactMode::Sliding => {
                    a.row_mut(r0 + 2).copy_from(&g.row(r0 + 2));
                    b[(r0 + 2, r0 + 2)] = 1.0;
                    if mu == 0.0 {
                        a[(r0, r0)] = 1.0;
                        a[(r0 + 1, r0 + 1)] = 1.0;
                    } else {
                        let t = sigma_t / slip;
                        let c = mu * solution.lambda[r0 + 2] / slip;
                        let p = nalgebra::Matrix2::identity() - t * t.transpose();
                        for i in 0..2 {
                            for j in 0..2 {
                                let pij = c * p[(i, j)];
                                if pij != 0.0 {
                                    let grow = g.row(r0 + j).clone_owned() * pij;
                                    let mut row = a.row_mut(r0 + i);
                                    row += grow;
                                    b[(r0 + i, r0 + j)] = pij;
                                }
                            }
                            a[(r0 + i, r0 + i)] += 1.0;
                            a[(r0 + i, r0 + 2)] += mu * t[i];
                        }
                    }
                }
            }
        }
        // balance row scales before the rank test
        for i in 0..n {
            let s = a.row(i).amax();
            if s > 0.0 {
                a.row_mut(i).scale_mut(1.0 / s);
                b.row_mut(i).scale_mut(1.0 / s);
            }
        }
        let qr = if n == 0 {
            None
        } else {
            let qr = a.qr();
            let r = qr.r();
            let dmax = (0..n).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
            let dmin = (0..n).map(|i| r[(i, i)].abs()).fold(f64::INFINITY, f64::min);
            if !(dmin > RANK_TOLERANCE * dmax) {
                return Err(Error::SingularAtModeBoundary);
            }
            Some(qr)
        };
        Ok(Self { qr, b_bar: b, modes: solution.modes.clone(), mode_boundary: boundary })
    }

    /// `dλ` for `r = dσ|_{λ fixed}`.
    pub fn solve(&self, r: &DVec) -> DVec {
        match &self.qr {
            None => DVec::zeros(0),
            Some(qr) => {
                let rhs = -(&self.b_bar * r);
                qr.solve(&rhs).unwrap_or_else(|| DVec::zeros(r.len()))
            }
        }
    }
}

/// `dλ_c` for each column of `rhs`, where column j holds `dσ|_{λ fixed}`
/// (equivalently `dG λ + dg`) for the j-th variable.
pub fn ncp_sensitivity(problem: &DelassusProblem, solution: &NcpSolution, rhs: &DMat) -> Result<DMat> {
    let lin = NcpLinearization::new(problem, solution)?;
    let mut out = DMat::zeros(rhs.nrows(), rhs.ncols());
    for j in 0..rhs.ncols() {
        out.set_column(j, &lin.solve(&rhs.column(j).clone_owned()));
    }
    Ok(out)
}

/// Everything about one step that does not depend on the tangent.
#[derive(Debug, Clone)]
pub struct StepLinearization<'a> {
    pub scene: &'a Scene,
    pub record: &'a StepRecord,
    /// `A⁻¹Π b`
    u: DVec,
    dkv_u: CsrMatrix,
    dkv_delta_a: CsrMatrix,
    dkv_delta_c: CsrMatrix,
    /// unweighted `∂(K v)/∂x`
    dkv_v: CsrMatrix,
    force_jacobian: CsrMatrix,
    dha_t: CsrMatrix,
    dhc_v: CsrMatrix,
    dhc_t: CsrMatrix,
    pub ncp: NcpLinearization,
}

impl<'a> StepLinearization<'a> {
    pub fn new(scene: &'a Scene, record: &'a StepRecord) -> Result<Self> {
        let (mesh, mats) = (&scene.mesh, &scene.materials);
        let asm = &record.assembly;
        let x = &record.state.x;
        let w = Some(asm.stiffness_weights.as_slice());
        let u = asm.solve(&asm.rhs);
        let res = &record.result;
        Ok(Self {
            scene,
            record,
            dkv_u: constitutive::dkv_dx(mesh, mats, x, &u, w)?,
            dkv_delta_a: constitutive::dkv_dx(mesh, mats, x, &res.delta_a, w)?,
            dkv_delta_c: constitutive::dkv_dx(mesh, mats, x, &res.delta_c, w)?,
            dkv_v: constitutive::dkv_dx(mesh, mats, x, &record.state.v, None)?,
            force_jacobian: constitutive::force_jacobian(mesh, mats, x)?,
            dha_t: actuation::actuation_jacobian_vec_derivative(
                &scene.actuators,
                x,
                &record.lambda_a,
                DerivativeSide::TransposeTimesLambda,
            )?,
            dhc_v: record.contacts.jacobian_vec_derivative(&res.v_f),
            dhc_t: record.contacts.jacobian_transpose_vec_derivative(&record.ncp.lambda),
            ncp: NcpLinearization::new(&record.problem, &record.ncp)?,
            u,
        })
    }

    fn material_dkv(&self, v: &DVec, weighted: bool, dp: &[(usize, MaterialParameter, f64)]) -> Result<DVec> {
        let asm = &self.record.assembly;
        let w = if weighted { Some(asm.stiffness_weights.as_slice()) } else { None };
        let mut out = DVec::zeros(v.len());
        for &(m, p, s) in dp {
            if s != 0.0 {
                let d = constitutive::dkv_dmaterial(&self.scene.mesh, &self.scene.materials, &self.record.state.x, v, w, m, p)?;
                out.axpy(s, &d, 1.0);
            }
        }
        Ok(out)
    }

    /// `dA·y` for the given tangent, where `dkv_y = ∂(K_w y)/∂x`.
    fn da_times(&self, y: &DVec, dkv_y: &CsrMatrix, t: &Tangent) -> Result<DVec> {
        Ok(dkv_y.mul_vec(&t.dx) + self.material_dkv(y, true, &t.dp)?)
    }

    /// `dv_free` for a tangent.
    pub fn free_velocity_jvp(&self, t: &Tangent) -> Result<DVec> {
        let asm = &self.record.assembly;
        let h = asm.h;
        let (mesh, mats, x) = (&self.scene.mesh, &self.scene.materials, &self.record.state.x);
        let mut df = self.force_jacobian.mul_vec(&t.dx);
        for &(m, p, s) in &t.dp {
            if s != 0.0 {
                df.axpy(s, &constitutive::internal_forces_material_derivative(mesh, mats, x, m, p)?, 1.0);
            }
        }
        let dkv = self.dkv_v.mul_vec(&t.dx) + asm.stiffness.mul_vec(&t.dv) + self.material_dkv(&self.record.state.v, false, &t.dp)?;
        let db = dkv * (-h * h) - df * h;
        let da_u = self.da_times(&self.u, &self.dkv_u, t)?;
        Ok(asm.project(&t.dv) + asm.solve(&(db - da_u)))
    }

    pub fn actuation_correction_jvp(&self, t: &Tangent) -> Result<DVec> {
        let asm = &self.record.assembly;
        let dr = self.dha_t.mul_vec(&t.dx) + self.record.h_a.tr_mul_vec(&t.dla);
        let da = self.da_times(&self.record.result.delta_a, &self.dkv_delta_a, t)?;
        Ok(asm.solve(&(dr * asm.h - da)))
    }

    /// The three terms of `dδ_c` and `dλ_c`, given `dv_free + dδ_a`.
    pub fn contact_correction_jvp(&self, t: &Tangent, dv_pre: &DVec) -> Result<([DVec; 3], DVec)> {
        let asm = &self.record.assembly;
        let h_c = &self.record.contacts.jacobian;
        let term1 = -asm.solve(&self.da_times(&self.record.result.delta_c, &self.dkv_delta_c, t)?);
        let term2 = asm.solve(&(self.dhc_t.mul_vec(&t.dx) * asm.h));
        let r = self.dhc_v.mul_vec(&t.dx) + h_c.mul_vec(&(dv_pre + &term1 + &term2));
        let dlambda = self.ncp.solve(&r);
        let term3 = asm.solve(&(h_c.tr_mul_vec(&dlambda) * asm.h));
        Ok(([term1, term2, term3], dlambda))
    }

    pub fn jvp(&self, t: &Tangent) -> Result<StepTangent> {
        let h = self.record.assembly.h;
        let dv_free = self.free_velocity_jvp(t)?;
        let ddelta_a = self.actuation_correction_jvp(t)?;
        let (terms, dlambda_c) = self.contact_correction_jvp(t, &(&dv_free + &ddelta_a))?;
        let ddelta_c = &terms[0] + &terms[1] + &terms[2];
        let dv_f = &dv_free + &ddelta_a + &ddelta_c;
        let dx_f = &t.dx + &dv_f * h;
        Ok(StepTangent { dv_free, ddelta_a, ddelta_c_terms: terms, ddelta_c, dlambda_c, dv_f, dx_f })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityResult {
    pub dv_f: DMat,
    pub dx_f: DMat,
    pub dlambda_c: DMat,
    pub dv_free: DMat,
    pub ddelta_a: DMat,
    pub ddelta_c: DMat,
    pub ddelta_c_terms: [DMat; 3],
    pub modes: Vec<ContactMode>,
    pub mode_boundary: bool,
}

fn columns_of(vars: &[DiffVariable], scene: &Scene) -> Result<Vec<Tangent>> {
    let (ndof, na) = (scene.mesh.dof_count(), scene.actuator_count());
    let mut out = Vec::new();
    for v in vars {
        v.validate(scene)?;
        for c in 0..v.columns() {
            out.push(v.tangent(c, ndof, na));
        }
    }
    Ok(out)
}

/// Jacobians of one recorded step with respect to `vars` (columns in order).
pub fn step_sensitivity(scene: &Scene, record: &StepRecord, vars: &[DiffVariable]) -> Result<SensitivityResult> {
    let lin = StepLinearization::new(scene, record)?;
    let tangents = columns_of(vars, scene)?;
    let (n, m) = (scene.mesh.dof_count(), tangents.len());
    let nc3 = 3 * record.contacts.len();
    let z = || DMat::zeros(n, m);
    let mut out = SensitivityResult {
        dv_f: z(),
        dx_f: z(),
        dlambda_c: DMat::zeros(nc3, m),
        dv_free: z(),
        ddelta_a: z(),
        ddelta_c: z(),
        ddelta_c_terms: [z(), z(), z()],
        modes: lin.ncp.modes.clone(),
        mode_boundary: lin.ncp.mode_boundary,
    };
    for (j, t) in tangents.iter().enumerate() {
        let s = lin.jvp(t)?;
        out.dv_f.set_column(j, &s.dv_f);
        out.dx_f.set_column(j, &s.dx_f);
        out.dlambda_c.set_column(j, &s.dlambda_c);
        out.dv_free.set_column(j, &s.dv_free);
        out.ddelta_a.set_column(j, &s.ddelta_a);
        out.ddelta_c.set_column(j, &s.ddelta_c);
        for k in 0..3 {
            out.ddelta_c_terms[k].set_column(j, &s.ddelta_c_terms[k]);
        }
    }
    Ok(out)
}

/// Derivatives of a multi-step rollout with constant actuation.
#[derive(Debug, Clone)]
pub struct RolloutSensitivity {
    pub final_state: State,
    pub dx: DMat,
    pub dv: DMat,
    /// `dλ_c` of the last step
    pub dlambda_c: DMat,
    /// `λ_c` of the last step
    pub lambda_c: DVec,
    /// nodal contact forces `H_cᵀλ_c` of the last step and their derivative
    pub contact_forces: DVec,
    pub dcontact_forces: DMat,
    pub mode_boundary: bool,
    /// the last step's record
    pub last: Option<StepRecord>,
}

/// Runs `steps` steps and chains per-step tangents forward: the outputs
/// `(dx_f, dv_f)` of one step become the `(dx, dv)` of the next, while
/// `dλ_a` and `dp` are carried unchanged.
pub fn rollout_sensitivity(
    scene: &Scene,
    state: &State,
    lambda_a: &DVec,
    steps: usize,
    vars: &[DiffVariable],
) -> Result<RolloutSensitivity> {
    let mut tangents = columns_of(vars, scene)?;
    let n = scene.mesh.dof_count();
    let m = tangents.len();
    let mut s = state.clone();
    let mut boundary = false;
    let mut last: Option<StepRecord> = None;
    let mut dlambda = DMat::zeros(0, m);
    let mut dforces = DMat::zeros(n, m);
    for _ in 0..steps {
        let record = scene.step(&s, lambda_a)?;
        {
            let lin = StepLinearization::new(scene, &record)?;
            boundary |= lin.ncp.mode_boundary;
            dlambda = DMat::zeros(3 * record.contacts.len(), m);
            for (j, t) in tangents.iter_mut().enumerate() {
                let st = lin.jvp(t)?;
                // d(H_cᵀλ_c) = ∂(H_cᵀλ)/∂x dx + H_cᵀ dλ
                let df = lin.dhc_t.mul_vec(&t.dx) + record.contacts.jacobian.tr_mul_vec(&st.dlambda_c);
                dforces.set_column(j, &df);
                dlambda.set_column(j, &st.dlambda_c);
                t.dx = st.dx_f;
                t.dv = st.dv_f;
            }
        }
        s = record.next_state();
        last = Some(record);
    }
    let mut dx = DMat::zeros(n, m);
    let mut dv = DMat::zeros(n, m);
    for (j, t) in tangents.iter().enumerate() {
        dx.set_column(j, &t.dx);
        dv.set_column(j, &t.dv);
    }
    let (lambda_c, contact_forces) = match &last {
        Some(r) => (r.ncp.lambda.clone(), r.contact_nodal_forces()),
        None => (DVec::zeros(0), DVec::zeros(n)),
    };
    Ok(RolloutSensitivity {
        final_state: s,
        dx,
        dv,
        dlambda_c: dlambda,
        lambda_c,
        contact_forces,
        dcontact_forces: dforces,
        mode_boundary: boundary,
        last,
    })
}

/// Central finite-difference column with a mode-change flag.
#[derive(Debug, Clone, PartialEq)]
pub struct FdColumn {
    pub dx_f: DVec,
    pub dv_f: DVec,
    /// `dλ_c` of the last step when the contact set is unchanged
    pub dlambda_c: Option<DVec>,
    pub step: f64,
    /// the contact-mode pattern differs between the + and − runs, or from the
    /// nominal run
    pub mode_changed: bool,
}

/// Default FD step for a variable at value `theta`.
pub fn default_fd_step(kind: DiffKind, theta: f64) -> f64 {
    match kind {
        DiffKind::Material { .. } => 1e-4 * theta.abs().max(1e-12),
        // velocities reach x_f scaled by h, so they take a larger step
        DiffKind::InitialVelocity => 1e-5 * theta.abs().max(1.0),
        _ => 1e-7 * theta.abs().max(1.0),
    }
}

fn perturbed(scene: &Scene, state: &State, lambda_a: &DVec, kind: DiffKind, i: usize, d: f64) -> Result<(Scene, State, DVec)> {
    let mut sc = scene.clone();
    let mut st = state.clone();
    let mut la = lambda_a.clone();
    match kind {
        DiffKind::InitialPosition => st.x[i] += d,
        DiffKind::InitialVelocity => st.v[i] += d,
        DiffKind::Actuation => la[i] += d,
        DiffKind::Material { material, param } => {
            let p = &mut sc.materials.params[material];
            let v = p.get(param);
            p.set(param, v + d);
            p.validate()?;
        }
    }
    Ok((sc, st, la))
}

fn theta(scene: &Scene, state: &State, lambda_a: &DVec, kind: DiffKind, i: usize) -> f64 {
    match kind {
        DiffKind::InitialPosition => state.x[i],
        DiffKind::InitialVelocity => state.v[i],
        DiffKind::Actuation => lambda_a[i],
        DiffKind::Material { material, param } => scene.materials.params[material].get(param),
    }
}

type Pattern = Vec<Vec<(crate::collision::ContactKey, ContactMode)>>;

fn run(scene: &Scene, state: &State, lambda_a: &DVec, steps: usize) -> Result<(State, Pattern, Option<StepRecord>)> {
    let mut s = state.clone();
    let mut pattern = Vec::with_capacity(steps);
    let mut last = None;
    for _ in 0..steps {
        let r = scene.step(&s, lambda_a)?;
        pattern.push(r.mode_pattern());
        s = r.next_state();
        last = Some(r);
    }
    Ok((s, pattern, last))
}

/// Central differences of the `steps`-step rollout for every column of `var`.
/// `step` overrides the default per-column step size.
pub fn fd_oracle(
    scene: &Scene,
    state: &State,
    lambda_a: &DVec,
    steps: usize,
    var: &DiffVariable,
    step: Option<f64>,
) -> Result<Vec<FdColumn>> {
    var.validate(scene)?;
    if let Some(s) = step {
        if !(s > 0.0) {
            return Err(Error::InvalidParameter(alloc::format!("FD step must be positive, got {s}")));
        }
    }
    let (_, nominal, _) = run(scene, state, lambda_a, steps)?;
    let mut out = Vec::with_capacity(var.columns());
    for &i in &var.indices {
        let d = step.unwrap_or_else(|| default_fd_step(var.kind, theta(scene, state, lambda_a, var.kind, i)));
        let (sp, xp, lp) = perturbed(scene, state, lambda_a, var.kind, i, d)?;
        let (sm, xm, lm) = perturbed(scene, state, lambda_a, var.kind, i, -d)?;
        let (fp, pp, rp) = run(&sp, &xp, &lp, steps)?;
        let (fm, pm, rm) = run(&sm, &xm, &lm, steps)?;
        let mode_changed = pp != pm || pp != nominal;
        let dlambda_c = match (&rp, &rm) {
            (Some(a), Some(b)) if a.contacts.keys() == b.contacts.keys() => {
                Some((&a.ncp.lambda - &b.ncp.lambda) / (2.0 * d))
            }
            _ => None,
        };
        out.push(FdColumn {
            dx_f: (&fp.x - &fm.x) / (2.0 * d),
            dv_f: (&fp.v - &fm.v) / (2.0 * d),
            dlambda_c,
            step: d,
            mode_changed,
        });
    }
    Ok(out)
}

/// `‖a − f‖∞ / max(‖a‖∞, ‖f‖∞, floor)`.
pub fn relative_error(analytic: &DVec, fd: &DVec, floor: f64) -> f64 {
    let d = (analytic - fd).amax();
    if d == 0.0 {
        return 0.0;
    }
    d / analytic.amax().max(fd.amax()).max(floor)
}
