//! Optimization and control tasks built on the step sensitivities: material
//! identification by Levenberg-Marquardt, QP inverse dynamics, and grip force
//! limiting.

use alloc::vec::Vec;

use crate::constitutive::MaterialParameter;
use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::linalg::{dense_solve, skew, DMat, DVec, Mat3, Vec3};
use crate::scene::{Scene, StepRecord};
use crate::sensitivity::{rollout_sensitivity, step_sensitivity, DiffVariable};
#[allow(unused_imports)]
use num_traits::Float;

/// `min ½ λᵀQλ + qᵀλ` subject to `lower ≤ λ ≤ upper` (bounds may be infinite).
#[derive(Debug, Clone, PartialEq)]
pub struct BoxQp {
    pub q_mat: DMat,
    pub q: DVec,
    pub lower: DVec,
    pub upper: DVec,
}

impl BoxQp {
    pub fn new(q_mat: DMat, q: DVec, lower: DVec, upper: DVec) -> Result<Self> {
        let n = q.len();
        if q_mat.nrows() != n || q_mat.ncols() != n || lower.len() != n || upper.len() != n {
            return Err(Error::DimensionMismatch { what: "box QP", expected: n, found: q_mat.nrows() });
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidParameter("QP bounds must satisfy lower <= upper".into()));
        }
        Ok(Self { q_mat, q, lower, upper })
    }

    pub fn objective(&self, x: &DVec) -> f64 {
        0.5 * x.dot(&(&self.q_mat * x)) + self.q.dot(x)
    }

    pub fn clamp(&self, x: &DVec) -> DVec {
        DVec::from_fn(x.len(), |i, _| x[i].max(self.lower[i]).min(self.upper[i]))
    }

    /// `‖x − clamp(x − ∇f)‖∞`, zero exactly at KKT points.
    pub fn kkt_residual(&self, x: &DVec) -> f64 {
        let g = &self.q_mat * x + &self.q;
        (x - self.clamp(&(x - g))).amax()
    }
}

/// Primal active-set method. The returned point always satisfies the bounds.
pub fn solve_box_qp(p: &BoxQp, tol: f64, max_iter: usize) -> Result<DVec> {
    let n = p.q.len();
    let scale = p.q_mat.amax().max(p.q.amax()).max(1e-300);
    let start = DVec::from_fn(n, |i, _| {
        if p.lower[i] > 0.0 || p.upper[i] < 0.0 {
            if p.lower[i].is_finite() { p.lower[i] } else { p.upper[i] }
        } else {
            0.0
        }
    });
    let mut x = start;
    // -1 at lower, +1 at upper, 0 free
    let mut active: Vec<i8> = (0..n)
        .map(|i| if x[i] == p.lower[i] { -1 } else if x[i] == p.upper[i] { 1 } else { 0 })
        .collect();
    let mut best = (f64::INFINITY, x.clone());
    for _ in 0..max_iter {
        let g = &p.q_mat * &x + &p.q;
        let free: Vec<usize> = (0..n).filter(|&i| active[i] == 0).collect();
        let mut step = DVec::zeros(n);
        if !free.is_empty() {
            let qff = DMat::from_fn(free.len(), free.len(), |a, b| p.q_mat[(free[a], free[b])]);
            let gf = DVec::from_fn(free.len(), |a, _| -g[free[a]]);
            let sol = dense_solve(&qff, &gf).or_else(|| {
                let reg = &qff + DMat::identity(free.len(), free.len()) * (1e-12 * scale);
                dense_solve(&reg, &gf)
            });
            let sol = sol.ok_or(Error::SingularSystem("box QP free block"))?;
            for (a, &i) in free.iter().enumerate() {
                step[i] = sol[a];
            }
        }
        let res = p.kkt_residual(&x);
        if res < best.0 {
            best = (res, x.clone());
        }
        if step.amax() <= 1e-14 * (1.0 + x.amax()) {
            if res <= tol {
                return Ok(x);
            }
            // release the bound with the most wrong-signed multiplier
            let mut worst = None;
            let mut wv = 0.0;
            for i in 0..n {
                let v = match active[i] {
                    -1 => -g[i],
                    1 => g[i],
                    _ => 0.0,
                };
                if v > wv {
                    wv = v;
                    worst = Some(i);
                }
            }
            match worst {
                Some(i) => active[i] = 0,
                None => return Ok(x),
            }
            continue;
        }
        let mut alpha = 1.0;
        let mut block = None;
        for i in 0..n {
            if step[i] < 0.0 && p.lower[i].is_finite() {
                let a = (p.lower[i] - x[i]) / step[i];
                if a < alpha {
                    alpha = a;
                    block = Some((i, -1));
                }
            } else if step[i] > 0.0 && p.upper[i].is_finite() {
                let a = (p.upper[i] - x[i]) / step[i];
                if a < alpha {
                    alpha = a;
                    block = Some((i, 1));
                }
            }
        }
        x = p.clamp(&(&x + &step * alpha.max(0.0)));
        if let Some((i, side)) = block {
            x[i] = if side < 0 { p.lower[i] } else { p.upper[i] };
            active[i] = side;
        }
    }
    let res = p.kkt_residual(&x);
    if res <= tol {
        return Ok(x);
    }
    if res < best.0 {
        best = (res, x);
    }
    Err(Error::NoConvergence { iterations: max_iter, residual: best.0, best: best.1.iter().copied().collect() })
}

pub const QP_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub material: usize,
    pub param: MaterialParameter,
    /// initial damping, relative to `JᵀJ`
    pub damping: f64,
    pub increase: f64,
    pub decrease: f64,
    pub max_iter: usize,
    /// consecutive rejected steps before giving up
    pub max_reject: usize,
    /// stop when an accepted step has `|Δp|/|p|` below this
    pub param_tol: f64,
    /// stop when the cost falls below this (m²)
    pub cost_tol: f64,
}

impl LmConfig {
    pub fn new(material: usize, param: MaterialParameter) -> Self {
        Self {
            material,
            param,
            damping: 1e-3,
            increase: 10.0,
            decrease: 10.0,
            max_iter: 30,
            max_reject: 8,
            param_tol: 1e-6,
            cost_tol: 1e-24,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.increase > 1.0 && self.decrease > 1.0) {
            return Err(Error::InvalidParameter("damping factors must exceed 1".into()));
        }
        if !(self.param_tol > 0.0 && self.cost_tol > 0.0 && self.damping >= 0.0) {
            return Err(Error::InvalidParameter("LM tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmIterate {
    pub iteration: usize,
    pub param: f64,
    pub cost: f64,
    pub damping: f64,
    pub accepted: bool,
    pub mode_boundary: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmOutcome {
    pub estimate: f64,
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<LmIterate>,
}

/// Simulation setup shared by the identification runs.
#[derive(Debug, Clone)]
pub struct Experiment<'a> {
    pub scene: &'a Scene,
    pub initial: &'a State,
    pub lambda_a: &'a DVec,
    pub steps: usize,
}

impl Experiment<'_> {
    fn with_param(&self, cfg: &LmConfig, p: f64) -> Result<Scene> {
        let mut sc = self.scene.clone();
        let m = sc.materials.params.get_mut(cfg.material).ok_or(Error::IndexOutOfRange {
            index: cfg.material,
            len: self.scene.materials.params.len(),
        })?;
        m.set(cfg.param, p);
        m.validate()?;
        Ok(sc)
    }

    /// Final positions for parameter value `p`.
    pub fn simulate(&self, cfg: &LmConfig, p: f64) -> Result<DVec> {
        Ok(self.with_param(cfg, p)?.rollout(self.initial, self.lambda_a, self.steps)?.x)
    }
}

/// Fits one material parameter so that the final positions match `target`.
/// Each iteration takes `p ← p + Jᵀ(x* − x(p)) / ((1 + λ_LM) JᵀJ)`; a step
/// that raises the cost (or leaves the admissible range) is rejected and the
/// damping raised.
pub fn identify_material(exp: &Experiment, target: &DVec, p0: f64, cfg: &LmConfig) -> Result<LmOutcome> {
    cfg.validate()?;
    let var = [DiffVariable::material(cfg.material, cfg.param)];
    let mut p = p0;
    let mut damping = cfg.damping;
    let mut trace = Vec::new();
    let eval = |p: f64| -> Result<(DVec, DVec, bool)> {
        let sc = exp.with_param(cfg, p)?;
        let r = rollout_sensitivity(&sc, exp.initial, exp.lambda_a, exp.steps, &var)?;
        Ok((r.final_state.x, r.dx.column(0).clone_owned(), r.mode_boundary))
    };
    let (mut x, mut jac, mut boundary) = eval(p)?;
    let mut cost = 0.5 * (&x - target).norm_squared();
    trace.push(LmIterate { iteration: 0, param: p, cost, damping, accepted: true, mode_boundary: boundary });
    let mut rejects = 0;
    for it in 1..=cfg.max_iter {
        if cost <= cfg.cost_tol {
            return Ok(LmOutcome { estimate: p, cost, converged: true, iterations: it - 1, trace });
        }
        let jtj = jac.norm_squared();
        if jtj == 0.0 {
            return Ok(LmOutcome { estimate: p, cost, converged: false, iterations: it - 1, trace });
        }
        let dp = jac.dot(&(target - &x)) / (jtj * (1.0 + damping));
        let candidate = p + dp;
        let trial = exp.with_param(cfg, candidate).and_then(|_| eval(candidate));
        match trial {
            Ok((xn, jn, bn)) if 0.5 * (&xn - target).norm_squared() <= cost => {
                p = candidate;
                x = xn;
                jac = jn;
                boundary = bn;
                cost = 0.5 * (&x - target).norm_squared();
                damping /= cfg.decrease;
                rejects = 0;
                trace.push(LmIterate { iteration: it, param: p, cost, damping, accepted: true, mode_boundary: boundary });
                if (dp / p).abs() <= cfg.param_tol {
                    return Ok(LmOutcome { estimate: p, cost, converged: true, iterations: it, trace });
                }
            }
            Ok(_) | Err(Error::InvalidParameter(_)) => {
                damping = (damping * cfg.increase).max(1e-6);
                rejects += 1;
                trace.push(LmIterate { iteration: it, param: p, cost, damping, accepted: false, mode_boundary: boundary });
                if rejects >= cfg.max_reject {
                    return Err(Error::Diverged { rejections: rejects });
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(LmOutcome { estimate: p, cost, converged: false, iterations: cfg.max_iter, trace })
}

/// End effector: the mean of a node set, with a mask of controlled axes.
#[derive(Debug, Clone, PartialEq)]
pub struct EndEffector {
    pub nodes: Vec<usize>,
    pub axes: [bool; 3],
}

impl EndEffector {
    pub fn new(nodes: Vec<usize>) -> Self {
        Self { nodes, axes: [true; 3] }
    }

    pub fn position(&self, x: &DVec) -> Vec3 {
        let mut p = Vec3::zeros();
        for &i in &self.nodes {
            p += Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]);
        }
        p / self.nodes.len() as f64
    }

    /// Rows of the selected axes of `position(x) − goal`.
    pub fn residual(&self, x: &DVec, goal: &Vec3) -> DVec {
        let d = self.position(x) - goal;
        DVec::from_iterator(self.dims(), (0..3).filter(|&c| self.axes[c]).map(|c| d[c]))
    }

    pub fn dims(&self) -> usize {
        self.axes.iter().filter(|&&a| a).count()
    }

    /// Selected rows of `∂X_e/∂θ` given `∂x/∂θ` (3n × m).
    pub fn jacobian(&self, dx: &DMat) -> DMat {
        let axes: Vec<usize> = (0..3).filter(|&c| self.axes[c]).collect();
        let w = 1.0 / self.nodes.len() as f64;
        DMat::from_fn(axes.len(), dx.ncols(), |r, j| self.nodes.iter().map(|&i| dx[(3 * i + axes[r], j)]).sum::<f64>() * w)
    }

    pub fn validate(&self, node_count: usize) -> Result<()> {
        if self.nodes.is_empty() || self.dims() == 0 {
            return Err(Error::InvalidParameter("end effector needs nodes and at least one axis".into()));
        }
        match self.nodes.iter().find(|&&i| i >= node_count) {
            Some(&i) => Err(Error::IndexOutOfRange { index: i, len: node_count }),
            None => Ok(()),
        }
    }
}

fn actuation_qp(q_mat: DMat, q: DVec, lambda_a: &DVec, scene: &Scene, trust: Option<f64>) -> Result<DVec> {
    let n = lambda_a.len();
    let mut lower = DVec::from_fn(n, |i, _| scene.actuators[i].bounds.0 - lambda_a[i]);
    let mut upper = DVec::from_fn(n, |i, _| scene.actuators[i].bounds.1 - lambda_a[i]);
    if let Some(t) = trust {
        for i in 0..n {
            lower[i] = lower[i].max(-t);
            upper[i] = upper[i].min(t);
        }
    }
    // numerical safety when λ_a sits outside its box by round-off
    for i in 0..n {
        if lower[i] > upper[i] {
            lower[i] = upper[i];
        }
    }
    let scale = (0..n).map(|i| q_mat[(i, i)]).fold(0.0, f64::max);
    let q_mat = q_mat + DMat::identity(n, n) * (1e-10 * scale);
    let tol = QP_TOLERANCE * q.amax().max(1e-300);
    solve_box_qp(&BoxQp::new(q_mat, q, lower, upper)?, tol, 200)
}

/// One Gauss-Newton QP step toward `goal`. `record` is the step taken with the
/// current actuation from the current state; its end-effector prediction and
/// `∂x_f/∂λ_a` (which include contact) linearize the next position.
pub fn inverse_dynamics_step(
    scene: &Scene,
    record: &StepRecord,
    effector: &EndEffector,
    goal: &Vec3,
    trust: Option<f64>,
) -> Result<DVec> {
    effector.validate(scene.mesh.node_count())?;
    let n_a = scene.actuator_count();
    let sens = step_sensitivity(scene, record, &[DiffVariable::actuation((0..n_a).collect())])?;
    let j = effector.jacobian(&sens.dx_f);
    let r = effector.residual(&record.result.x_f, goal);
    actuation_qp(j.transpose() * &j, j.transpose() * r, &record.lambda_a, scene, trust)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlIterate {
    pub iteration: usize,
    pub distance: f64,
    pub lambda_a: DVec,
    pub contact_force: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutcome {
    pub trace: Vec<ControlIterate>,
    pub final_state: State,
    pub lambda_a: DVec,
}

/// Closed-loop inverse dynamics: each iteration steps the system with the
/// current actuation, then updates it by [`inverse_dynamics_step`].
pub fn run_inverse_dynamics(
    scene: &Scene,
    state: &State,
    lambda_a: &DVec,
    effector: &EndEffector,
    goal: &Vec3,
    iterations: usize,
    trust: Option<f64>,
) -> Result<ControlOutcome> {
    let mut s = state.clone();
    let mut la = lambda_a.clone();
    let mut trace = Vec::with_capacity(iterations + 1);
    for it in 0..iterations {
        let rec = scene.step(&s, &la)?;
        if it == 0 {
            trace.push(ControlIterate {
                iteration: 0,
                distance: effector.residual(&s.x, goal).norm(),
                lambda_a: la.clone(),
                contact_force: 0.0,
            });
        }
        let d = inverse_dynamics_step(scene, &rec, effector, goal, trust)?;
        s = rec.next_state();
        la += d;
        trace.push(ControlIterate {
            iteration: it + 1,
            distance: effector.residual(&s.x, goal).norm(),
            lambda_a: la.clone(),
            contact_force: rec.contact_nodal_forces().norm(),
        });
    }
    Ok(ControlOutcome { trace, final_state: s, lambda_a: la })
}

/// Weights of the grip objective `α‖X_e‖² + β‖λ_c,nodes‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GripWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for GripWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 10.0 }
    }
}

/// Nodal contact forces restricted to `nodes` (3 per node) and their
/// derivative with respect to `λ_a`.
fn finger_forces(record: &StepRecord, dlambda: &DMat, nodes: &[usize]) -> (DVec, DMat) {
    let f = record.contact_nodal_forces();
    let h_c = &record.contacts.jacobian;
    let mut df = DMat::zeros(f.len(), dlambda.ncols());
    for j in 0..dlambda.ncols() {
        df.set_column(j, &h_c.tr_mul_vec(&dlambda.column(j).clone_owned()));
    }
    let rows: Vec<usize> = nodes.iter().flat_map(|&i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
    (
        DVec::from_iterator(rows.len(), rows.iter().map(|&r| f[r])),
        DMat::from_fn(rows.len(), df.ncols(), |r, j| df[(rows[r], j)]),
    )
}

/// Stacked closure residual of several end effectors and its Jacobian.
fn closure(targets: &[(EndEffector, Vec3)], x: &DVec, dx: &DMat) -> (DVec, DMat) {
    let rows: usize = targets.iter().map(|(e, _)| e.dims()).sum();
    let mut r = DVec::zeros(rows);
    let mut j = DMat::zeros(rows, dx.ncols());
    let mut at = 0;
    for (e, g) in targets {
        let k = e.dims();
        r.rows_mut(at, k).copy_from(&e.residual(x, g));
        if dx.ncols() > 0 {
            j.view_mut((at, 0), (k, dx.ncols())).copy_from(&e.jacobian(dx));
        }
        at += k;
    }
    (r, j)
}

/// One Gauss-Newton QP step of the grip objective. `targets` pairs each
/// finger's end effector with its goal; forces are those of `record` (the step
/// taken with the current actuation) and their derivative with respect to
/// `λ_a` comes from the NCP sensitivity.
pub fn grip_force_control_step(
    scene: &Scene,
    record: &StepRecord,
    targets: &[(EndEffector, Vec3)],
    finger_nodes: &[usize],
    weights: GripWeights,
    trust: Option<f64>,
) -> Result<DVec> {
    for (e, _) in targets {
        e.validate(scene.mesh.node_count())?;
    }
    let n_a = scene.actuator_count();
    let sens = step_sensitivity(scene, record, &[DiffVariable::actuation((0..n_a).collect())])?;
    let (rx, jx) = closure(targets, &record.result.x_f, &sens.dx_f);
    let (f, jf) = finger_forces(record, &sens.dlambda_c, finger_nodes);
    let q_mat = jx.transpose() * &jx * weights.alpha + jf.transpose() * &jf * weights.beta;
    let q = jx.transpose() * rx * weights.alpha + jf.transpose() * f * weights.beta;
    actuation_qp(q_mat, q, &record.lambda_a, scene, trust)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GripIterate {
    pub iteration: usize,
    pub closure: f64,
    pub force: f64,
    pub lambda_a: DVec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GripOutcome {
    pub trace: Vec<GripIterate>,
    pub final_closure: f64,
    pub final_force: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GripController {
    /// every actuator held at its upper bound
    ConstantMax,
    Optimized,
}

/// Runs the grip task. `closure` is the norm of the stacked end-effector
/// residuals and `force` the norm of the finger-node contact forces after
/// each step.
#[allow(clippy::too_many_arguments)]
pub fn run_grip(
    scene: &Scene,
    state: &State,
    targets: &[(EndEffector, Vec3)],
    finger_nodes: &[usize],
    controller: GripController,
    weights: GripWeights,
    iterations: usize,
    trust: Option<f64>,
) -> Result<GripOutcome> {
    let n_a = scene.actuator_count();
    let mut la = match controller {
        GripController::ConstantMax => DVec::from_fn(n_a, |i, _| scene.actuators[i].bounds.1),
        GripController::Optimized => DVec::from_fn(n_a, |i, _| scene.actuators[i].bounds.0.max(0.0)),
    };
    let mut s = state.clone();
    let mut trace = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let rec = scene.step(&s, &la)?;
        let force = finger_forces(&rec, &DMat::zeros(rec.ncp.lambda.len(), 0), finger_nodes).0.norm();
        let (r, _) = closure(targets, &rec.result.x_f, &DMat::zeros(0, 0));
        trace.push(GripIterate { iteration: it + 1, closure: r.norm(), force, lambda_a: la.clone() });
        if controller == GripController::Optimized {
            la += grip_force_control_step(scene, &rec, targets, finger_nodes, weights, trust)?;
        }
        s = rec.next_state();
    }
    let last = trace.last().cloned();
    Ok(GripOutcome {
        final_closure: last.as_ref().map_or(0.0, |t| t.closure),
        final_force: last.as_ref().map_or(0.0, |t| t.force),
        trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacementOutcome {
    /// final vertices of the moving tet
    pub vertices: Vec<Vec3>,
    /// distance between the designated vertex and the contact point, per iteration
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Rotates tet `a` about its centroid by gradient descent so that vertex
/// `vertex` becomes the contact point of `a` against the fixed shape `b`.
/// The hard contact point is piecewise constant in the vertices when it sits
/// on a vertex, so the descent uses the smoothed contact point
/// `Σ softmax_i a_i` (temperature `tau` times the tet size) and its witness
/// derivative. `trace` reports the exact GJK distance.
pub fn place_contact_vertex(
    a: &[Vec3; 4],
    b: &[Vec3],
    vertex: usize,
    tau: f64,
    tol: f64,
    max_iter: usize,
) -> Result<PlacementOutcome> {
    use crate::collision::gjk::{gjk, witness_derivative, DEFAULT_TOLERANCE};
    use crate::collision::smoothing::{smoothed_support_weights, smoothed_witness_derivative};
    if vertex >= 4 {
        return Err(Error::IndexOutOfRange { index: vertex, len: 4 });
    }
    let mut pts: Vec<Vec3> = a.to_vec();
    let size = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| (pts[i] - pts[j]).norm()).fold(0.0, f64::max);
    let temp = tau * size;
    let rate = 0.5 / (size * size);
    let mut trace = Vec::new();
    for _ in 0..max_iter {
        let wit = gjk(&pts, b, DEFAULT_TOLERANCE)?;
        if wit.colliding {
            return Err(Error::InvalidParameter("placement shapes overlap".into()));
        }
        let dist = (pts[vertex] - wit.p1).norm();
        trace.push(dist);
        if dist < tol {
            return Ok(PlacementOutcome { vertices: pts, trace, converged: true });
        }
        let d = match witness_derivative(&pts, b, &wit) {
            Ok(d) => d,
            Err(Error::SingularSystem(_)) => smoothed_witness_derivative(&pts, b, &wit, temp)?,
            Err(e) => return Err(e),
        };
        let len = wit.separation.norm();
        let n = wit.separation / len;
        let w = smoothed_support_weights(&pts, &n, temp);
        let p1: Vec3 = pts.iter().zip(&w).map(|(p, &wi)| p * wi).sum();
        let r = pts[vertex] - p1;
        let c = pts.iter().fold(Vec3::zeros(), |acc, p| acc + p) / 4.0;
        // d a_i / dω = −[a_i − c]×
        let da: Vec<Mat3> = pts.iter().map(|p| -skew(&(p - c))).collect();
        let mut dsep = Mat3::zeros();
        for k in 0..4 {
            dsep += d.separation.fixed_view::<3, 3>(0, 3 * k) * da[k];
        }
        let dn = (Mat3::identity() - n * n.transpose()) * dsep / len;
        // s_i = n·a_i, w = softmax(−s/T)
        let ds: Vec<nalgebra::RowVector3<f64>> = (0..4).map(|i| n.transpose() * da[i] + pts[i].transpose() * dn).collect();
        let mean: nalgebra::RowVector3<f64> = (0..4).map(|i| ds[i] * w[i]).sum();
        let mut dp1 = Mat3::zeros();
        for i in 0..4 {
            dp1 += da[i] * w[i] + pts[i] * ((mean - ds[i]) * (w[i] / temp));
        }
        let grad = (da[vertex] - dp1).transpose() * r;
        let rot = nalgebra::Rotation3::new(-grad * rate);
        for p in pts.iter_mut() {
            *p = c + rot * (*p - c);
        }
    }
    Ok(PlacementOutcome { vertices: pts, trace, converged: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn qp(q: &[f64], c: &[f64], lo: &[f64], hi: &[f64]) -> BoxQp {
        let n = c.len();
        BoxQp::new(
            DMat::from_row_slice(n, n, q),
            DVec::from_row_slice(c),
            DVec::from_row_slice(lo),
            DVec::from_row_slice(hi),
        )
        .unwrap()
    }

    #[test]
    fn unconstrained_and_clamped() {
        let inf = f64::INFINITY;
        let p = qp(&[1.0, 0.0, 0.0, 1.0], &[-3.0, 2.0], &[-inf, -inf], &[inf, inf]);
        let x = solve_box_qp(&p, 1e-12, 50).unwrap();
        assert!((x - DVec::from_vec(vec![3.0, -2.0])).amax() < 1e-12);
        let p = qp(&[1.0], &[-5.0], &[0.0], &[2.0]);
        assert_eq!(solve_box_qp(&p, 1e-12, 50).unwrap()[0], 2.0);
    }

    #[test]
    fn random_qps_satisfy_kkt_and_bounds() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.gen_range(1..=6);
            let b = DMat::from_fn(n, n, |_, _| rng.gen::<f64>() - 0.5);
            let q_mat = &b * b.transpose() + DMat::identity(n, n) * 0.05;
            let q = DVec::from_fn(n, |_, _| 2.0 * rng.gen::<f64>() - 1.0);
            let lo = DVec::from_fn(n, |_, _| -rng.gen::<f64>());
            let hi = DVec::from_fn(n, |_, _| rng.gen::<f64>());
            let p = BoxQp::new(q_mat, q, lo.clone(), hi.clone()).unwrap();
            let x = solve_box_qp(&p, 1e-12, 100).unwrap();
            assert!(p.kkt_residual(&x) <= 1e-12);
            assert!((0..n).all(|i| x[i] >= lo[i] && x[i] <= hi[i]));
        }
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(BoxQp::new(DMat::identity(1, 1), DVec::zeros(1), DVec::from_element(1, 1.0), DVec::zeros(1)).is_err());
    }

    #[test]
    fn placement_makes_designated_vertex_the_contact_point() {
        let a = [
            Vec3::new(0.0, 0.0, 0.01),
            Vec3::new(0.01, 0.0, 0.012),
            Vec3::new(0.0, 0.01, 0.013),
            Vec3::new(0.003, 0.003, 0.02),
        ];
        let b = [
            Vec3::new(-0.02, -0.02, 0.0),
            Vec3::new(0.03, -0.02, 0.0),
            Vec3::new(0.0, 0.03, 0.0),
            Vec3::new(0.0, 0.0, -0.01),
        ];
        let out = place_contact_vertex(&a, &b, 3, 0.2, 1e-4, 500).unwrap();
        assert!(out.converged, "{:?}", &out.trace[out.trace.len().saturating_sub(5)..]);
        assert!(out.trace[0] > 1e-3);
    }
}
