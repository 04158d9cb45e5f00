//! Frictional contact as a second-order-cone complementarity problem.
//!
//! With `σ = Gλ + g` and the De Saxcé correction `Γ(σ) = (0, 0, μ‖σ_T‖)`, a
//! solution satisfies `K_μ ∋ λ ⊥ σ + Γ(σ) ∈ K_μ*` per contact, where
//! `K_μ = {‖λ_T‖ ≤ μ λ_N}` and `K_μ* = {μ‖y_T‖ ≤ y_N}`. Each contact block is
//! ordered `(t1, t2, n)`. `λ` carries force units; `G = h H_c A⁻¹ H_cᵀ`.

use alloc::vec::Vec;

use crate::dynamics::SystemAssembly;
use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, DMat, DVec, Vec3};
#[allow(unused_imports)]
use num_traits::Float;

#[derive(Debug, Clone, PartialEq)]
pub struct DelassusProblem {
    /// 3n_c × 3n_c, symmetric PSD
    pub g_mat: DMat,
    /// free contact velocity (m/s)
    pub g: DVec,
    pub mu: Vec<f64>,
}

impl DelassusProblem {
    pub fn new(g_mat: DMat, g: DVec, mu: Vec<f64>) -> Result<Self> {
        let n = 3 * mu.len();
        if g_mat.nrows() != n || g_mat.ncols() != n || g.len() != n {
            return Err(Error::DimensionMismatch { what: "Delassus problem", expected: n, found: g.len() });
        }
        if mu.iter().any(|&m| !(m >= 0.0)) {
            return Err(Error::InvalidParameter("friction coefficients must be non-negative".into()));
        }
        Ok(Self { g_mat, g, mu })
    }

    pub fn contact_count(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self, lambda: &DVec) -> DVec {
        &self.g_mat * lambda + &self.g
    }

    pub fn scale(&self) -> ResidualScale {
        let sigma = self.g.amax().max(1e-12);
        let dmax = (0..self.g_mat.nrows()).map(|i| self.g_mat[(i, i)]).fold(0.0, f64::max);
        let lambda = if dmax > 0.0 { sigma / dmax } else { 1.0 };
        ResidualScale { sigma, lambda }
    }
}

/// `G = h H_c A_p⁻¹ Π H_cᵀ`, `g = H_c (v_free + δ_a)`.
pub fn build_delassus(
    asm: &SystemAssembly,
    h_c: &CsrMatrix,
    mu: &[f64],
    v_free: &DVec,
    delta_a: &DVec,
) -> Result<DelassusProblem> {
    let m = h_c.nrows();
    if m != 3 * mu.len() {
        return Err(Error::DimensionMismatch { what: "contact Jacobian rows", expected: 3 * mu.len(), found: m });
    }
    let mut g_mat = DMat::zeros(m, m);
    for r in 0..m {
        // the r-th row of H_c as a column vector
        let mut e = DVec::zeros(asm.dof_count());
        for (c, v) in h_c.row(r) {
            e[c] = v;
        }
        let u = asm.solve(&e);
        g_mat.set_column(r, &(h_c.mul_vec(&u) * asm.h));
    }
    let g_mat = (&g_mat + g_mat.transpose()) * 0.5;
    let g = h_c.mul_vec(&(v_free + delta_a));
    DelassusProblem::new(g_mat, g, mu.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualScale {
    /// velocity scale (m/s)
    pub sigma: f64,
    /// force scale (N)
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ContactMode {
    Breaking,
    Sticking,
    Sliding,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualParts {
    pub cone: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl ResidualParts {
    pub fn max(&self) -> f64 {
        self.cone.max(self.dual).max(self.complementarity)
    }
}

fn block(v: &DVec, k: usize) -> Vec3 {
    Vec3::new(v[3 * k], v[3 * k + 1], v[3 * k + 2])
}

/// `σ + Γ_μ(σ)` for one contact.
pub fn de_saxce(sigma: &Vec3, mu: f64) -> Vec3 {
    Vec3::new(sigma.x, sigma.y, sigma.z + mu * sigma.xy().norm())
}

/// Projection onto `K_μ = {‖λ_T‖ ≤ μ λ_N}`.
pub fn project_cone(l: &Vec3, mu: f64) -> Vec3 {
    let t = l.xy().norm();
    let n = l.z;
    if t <= mu * n {
        return *l;
    }
    if mu * t <= -n {
        return Vec3::zeros();
    }
    let nn = (mu * t + n) / (1.0 + mu * mu);
    if t == 0.0 {
        return Vec3::new(0.0, 0.0, nn.max(0.0));
    }
    let s = mu * nn / t;
    Vec3::new(l.x * s, l.y * s, nn)
}

fn parts(lambda: &DVec, sigma: &DVec, mu: &[f64]) -> Vec<ResidualParts> {
    mu.iter()
        .enumerate()
        .map(|(k, &m)| {
            let l = block(lambda, k);
            let y = de_saxce(&block(sigma, k), m);
            ResidualParts {
                cone: (l.xy().norm() - m * l.z).max(-l.z).max(0.0),
                dual: (m * y.xy().norm() - y.z).max(0.0),
                complementarity: l.dot(&y).abs(),
            }
        })
        .collect()
}

/// Unscaled residual: max over contacts of cone infeasibility of `λ`, dual-cone
/// infeasibility of `σ + Γ(σ)`, and `|λ·(σ + Γ(σ))|`.
pub fn ncp_residual(lambda: &DVec, sigma: &DVec, mu: &[f64]) -> f64 {
    parts(lambda, sigma, mu).iter().map(|p| p.max()).fold(0.0, f64::max)
}

/// Residual with forces divided by `scale.lambda` and velocities by `scale.sigma`.
pub fn scaled_residual(lambda: &DVec, sigma: &DVec, mu: &[f64], scale: ResidualScale) -> f64 {
    parts(lambda, sigma, mu)
        .iter()
        .map(|p| {
            (p.cone / scale.lambda)
                .max(p.dual / scale.sigma)
                .max(p.complementarity / (scale.lambda * scale.sigma))
        })
        .fold(0.0, f64::max)
}

pub const DEFAULT_MODE_EPSILON: f64 = 1e-6;

/// Per-contact modes; the flag is set when a contact fits no bucket (it is then
/// reported as sliding).
pub fn classify_modes(lambda: &DVec, mu: &[f64], eps: f64, force_scale: f64) -> (Vec<ContactMode>, Vec<bool>) {
    let mut modes = Vec::with_capacity(mu.len());
    let mut ambiguous = Vec::with_capacity(mu.len());
    for (k, &m) in mu.iter().enumerate() {
        let l = block(lambda, k);
        let t = l.xy().norm();
        if l.z <= eps * force_scale {
            modes.push(ContactMode::Breaking);
            ambiguous.push(false);
        } else if t < m * l.z * (1.0 - eps) {
            modes.push(ContactMode::Sticking);
            ambiguous.push(false);
        } else {
            modes.push(ContactMode::Sliding);
            ambiguous.push(t > m * l.z * (1.0 + eps));
        }
    }
    (modes, ambiguous)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Pgs,
    Admm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub kind: SolverKind,
    /// scaled residual tolerance
    pub tol: f64,
    pub max_iter: usize,
    /// initial ADMM penalty relative to the geometric mean of the extreme
    /// eigenvalues of G
    pub rho: f64,
    pub mode_epsilon: f64,
    /// a best iterate at or below this scaled residual is accepted when
    /// `max_iter` runs out before `tol` is met
    pub accept: f64,
}

impl SolverSettings {
    pub fn pgs() -> Self {
        Self { kind: SolverKind::Pgs, tol: 1e-10, max_iter: 2000, rho: 1.0, mode_epsilon: DEFAULT_MODE_EPSILON, accept: 1e-8 }
    }

    pub fn admm() -> Self {
        Self { kind: SolverKind::Admm, tol: 1e-10, max_iter: 2000, rho: 1.0, mode_epsilon: DEFAULT_MODE_EPSILON, accept: 1e-8 }
    }
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self::admm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NcpSolution {
    pub lambda: DVec,
    pub sigma: DVec,
    pub modes: Vec<ContactMode>,
    /// contacts that fit no mode bucket
    pub ambiguous: Vec<bool>,
    /// scaled residual
    pub residual: f64,
    pub iterations: usize,
}

fn finish(problem: &DelassusProblem, lambda: DVec, iterations: usize, eps: f64) -> NcpSolution {
    let sigma = problem.sigma(&lambda);
    let scale = problem.scale();
    let residual = scaled_residual(&lambda, &sigma, &problem.mu, scale);
    let (modes, ambiguous) = classify_modes(&lambda, &problem.mu, eps, scale.lambda);
    NcpSolution { lambda, sigma, modes, ambiguous, residual, iterations }
}

pub fn solve(problem: &DelassusProblem, settings: &SolverSettings) -> Result<NcpSolution> {
    let out = match settings.kind {
        SolverKind::Pgs => solve_pgs(problem, settings.tol, settings.max_iter, settings.mode_epsilon),
        SolverKind::Admm => solve_admm(problem, settings.tol, settings.max_iter, settings.rho, settings.mode_epsilon),
    };
    match out {
        Err(Error::NoConvergence { iterations, residual, best }) if residual <= settings.accept => {
            Ok(finish(problem, DVec::from_vec(best), iterations, settings.mode_epsilon))
        }
        other => other,
    }
}

fn check_settings(tol: f64) -> Result<()> {
    if tol > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(alloc::format!("solver tolerance must be positive, got {tol}")))
    }
}

/// Projected Gauss-Seidel with a per-contact inner loop: normal update, then a
/// scalar-step tangential update projected onto the friction disk.
pub fn solve_pgs(problem: &DelassusProblem, tol: f64, max_iter: usize, eps: f64) -> Result<NcpSolution> {
    check_settings(tol)?;
    let nc = problem.contact_count();
    if nc == 0 {
        return Ok(finish(problem, DVec::zeros(0), 0, eps));
    }
    let gm = &problem.g_mat;
    let scale = problem.scale();
    let mut lambda = DVec::zeros(3 * nc);
    let mut sigma = problem.g.clone();
    let mut best = (f64::INFINITY, lambda.clone());
    let tangent_gain: Vec<f64> = (0..nc)
        .map(|k| {
            let (a, b, c) = (gm[(3 * k, 3 * k)], gm[(3 * k + 1, 3 * k + 1)], gm[(3 * k, 3 * k + 1)]);
            // largest eigenvalue of the 2×2 tangential block
            0.5 * (a + b) + (0.25 * (a - b) * (a - b) + c * c).sqrt()
        })
        .collect();
    for it in 1..=max_iter {
        for k in 0..nc {
            let mu = problem.mu[k];
            let gnn = gm[(3 * k + 2, 3 * k + 2)];
            for _ in 0..4 {
                let old = block(&lambda, k);
                let s = block(&sigma, k);
                let mut new = old;
                if gnn > 0.0 {
                    new.z = (old.z - s.z / gnn).max(0.0);
                } else {
                    new.z = if s.z < 0.0 { old.z } else { 0.0 };
                }
                let delta_n = new.z - old.z;
                let st = s.xy() + Vec3::new(gm[(3 * k, 3 * k + 2)], gm[(3 * k + 1, 3 * k + 2)], 0.0).xy() * delta_n;
                let gt = tangent_gain[k];
                let mut lt = if gt > 0.0 { old.xy() - st / gt } else { old.xy() };
                let radius = mu * new.z;
                let nt = lt.norm();
                if nt > radius {
                    lt *= if nt > 0.0 { radius / nt } else { 0.0 };
                }
                new.x = lt.x;
                new.y = lt.y;
                let d = new - old;
                if d.norm_squared() == 0.0 {
                    break;
                }
                for r in 0..3 {
                    lambda[3 * k + r] = new[r];
                }
                for c in 0..3 {
                    if d[c] != 0.0 {
                        sigma.axpy(d[c], &gm.column(3 * k + c), 1.0);
                    }
                }
            }
        }
        if it % 4 == 0 || it == max_iter {
            sigma = problem.sigma(&lambda);
            let r = scaled_residual(&lambda, &sigma, &problem.mu, scale);
            if r < best.0 {
                best = (r, lambda.clone());
            }
            if r <= tol {
                return Ok(finish(problem, lambda, it, eps));
            }
        }
    }
    Err(Error::NoConvergence { iterations: max_iter, residual: best.0, best: best.1.iter().copied().collect() })
}

/// ADMM on `min ½λᵀGλ + (g + s)ᵀλ, λ ∈ K_μ` with the De Saxcé term
/// `s = Γ(Gz + g)` refreshed every iteration and residual-balanced penalty.
pub fn solve_admm(problem: &DelassusProblem, tol: f64, max_iter: usize, rho0: f64, eps: f64) -> Result<NcpSolution> {
    check_settings(tol)?;
    let nc = problem.contact_count();
    let n = 3 * nc;
    if nc == 0 {
        return Ok(finish(problem, DVec::zeros(0), 0, eps));
    }
    let gm = &problem.g_mat;
    let scale = problem.scale();
    let dmax = (0..n).map(|i| gm[(i, i)]).fold(0.0, f64::max).max(1e-300);
    let eig = gm.clone().symmetric_eigenvalues();
    let (emin, emax) = (eig.min().max(1e-12 * eig.max()), eig.max().max(1e-300));
    // geometric mean of the extreme eigenvalues of G
    let mut rho = rho0 * (emin * emax).sqrt();
    let factor = |rho: f64| -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        (gm + DMat::identity(n, n) * rho)
            .cholesky()
            .ok_or(Error::SingularSystem("ADMM system"))
    };
    let mut chol = factor(rho)?;
    let mut lambda = DVec::zeros(n);
    let mut z = DVec::zeros(n);
    let mut y = DVec::zeros(n);
    let mut best = (f64::INFINITY, z.clone());
    for it in 1..=max_iter {
        // De Saxce correction from the latest unconstrained iterate
        let sigma_x = problem.sigma(&lambda);
        let mut s = DVec::zeros(n);
        for k in 0..nc {
            s[3 * k + 2] = problem.mu[k] * block(&sigma_x, k).xy().norm();
        }
        let rhs = &z * rho - &y - &problem.g - &s;
        lambda = chol.solve(&rhs);
        let z_prev = z.clone();
        let v = &lambda + &y / rho;
        for k in 0..nc {
            let p = project_cone(&block(&v, k), problem.mu[k]);
            for r in 0..3 {
                z[3 * k + r] = p[r];
            }
        }
        y += (&lambda - &z) * rho;
        let sigma = problem.sigma(&z);
        let res = scaled_residual(&z, &sigma, &problem.mu, scale);
        if res < best.0 {
            best = (res, z.clone());
        }
        if res <= tol {
            return Ok(finish(problem, z, it, eps));
        }
        if it % 10 != 0 {
            continue;
        }
        let primal = (&lambda - &z).norm();
        let dual = (&z - &z_prev).norm() * rho;
        let ratio = (primal / dual.max(1e-300)).sqrt().clamp(0.1, 10.0);
        let new_rho = rho * ratio;
        if !(0.5..=2.0).contains(&ratio) && new_rho > 1e-10 * dmax && new_rho < 1e10 * dmax {
            // y is the unscaled multiplier, so it carries over unchanged
            rho = new_rho;
            chol = factor(rho)?;
        }
    }
    Err(Error::NoConvergence { iterations: max_iter, residual: best.0, best: best.1.iter().copied().collect() })
}

/// Friction power `λ_T·σ_T` per contact (non-positive for admissible solutions).
pub fn friction_power(lambda: &DVec, sigma: &DVec) -> Vec<f64> {
    (0..lambda.len() / 3)
        .map(|k| block(lambda, k).xy().dot(&block(sigma, k).xy()))
        .collect()
}
