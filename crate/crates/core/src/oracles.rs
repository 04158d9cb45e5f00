//! Brute-force references for tests. Nothing here calls into the main
//! simulation path: geometry, element forces, the step system and the contact
//! problem are recomputed from scratch with dense linear algebra. The contact
//! and actuation Jacobians of a step record are taken as data.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;

use crate::constitutive::Law;
use crate::contact::ContactMode;
use crate::error::{Error, Result};
use crate::linalg::{DMat, DVec, Mat3, Vec3};
use crate::scene::{Scene, StepRecord};

const FACES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
const EDGES: [[usize; 2]; 6] = [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]];

#[derive(Debug, Clone, PartialEq)]
pub struct OracleDistance {
    pub distance: f64,
    pub p1: Vec3,
    pub p2: Vec3,
    pub overlapping: bool,
}

fn closest_on_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> Vec3 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return *a;
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

fn closest_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let n = (b - a).cross(&(c - a));
    let nn = n.norm_squared();
    if nn > 0.0 {
        let q = p - n * ((p - a).dot(&n) / nn);
        let wa = (b - q).cross(&(c - q)).dot(&n) / nn;
        let wb = (c - q).cross(&(a - q)).dot(&n) / nn;
        if wa >= 0.0 && wb >= 0.0 && wa + wb <= 1.0 {
            return q;
        }
    }
    [closest_on_segment(p, a, b), closest_on_segment(p, b, c), closest_on_segment(p, c, a)]
        .into_iter()
        .min_by(|u, v| (u - p).norm().total_cmp(&(v - p).norm()))
        .unwrap_or(*a)
}

fn closest_segments(a0: &Vec3, a1: &Vec3, b0: &Vec3, b1: &Vec3) -> (Vec3, Vec3) {
    let mut cands = Vec::with_capacity(5);
    cands.push((*a0, closest_on_segment(a0, b0, b1)));
    cands.push((*a1, closest_on_segment(a1, b0, b1)));
    cands.push((closest_on_segment(b0, a0, a1), *b0));
    cands.push((closest_on_segment(b1, a0, a1), *b1));
    let (d1, d2, r) = (a1 - a0, b1 - b0, a0 - b0);
    let (a, e, b) = (d1.dot(&d1), d2.dot(&d2), d1.dot(&d2));
    let (c, f) = (d1.dot(&r), d2.dot(&r));
    let den = a * e - b * b;
    if den > 1e-14 * a * e {
        let s = (b * f - c * e) / den;
        let t = (a * f - b * c) / den;
        if (0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&t) {
            cands.push((a0 + d1 * s, b0 + d2 * t));
        }
    }
    cands.into_iter().min_by(|u, v| (u.0 - u.1).norm().total_cmp(&(v.0 - v.1).norm())).unwrap()
}

/// Barycentric coordinates of `p` in tet `t` (the weight of `t[0]` first).
fn barycentric(p: &Vec3, t: &[Vec3; 4]) -> Option<[f64; 4]> {
    let m = Mat3::from_columns(&[t[1] - t[0], t[2] - t[0], t[3] - t[0]]);
    let w = m.lu().solve(&(p - t[0]))?;
    Some([1.0 - w.sum(), w[0], w[1], w[2]])
}

fn inside(p: &Vec3, t: &[Vec3; 4], eps: f64) -> bool {
    barycentric(p, t).is_some_and(|w| w.iter().all(|&x| x >= -eps))
}

fn segment_crosses_triangle(p0: &Vec3, p1: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> bool {
    let n = (b - a).cross(&(c - a));
    let (d0, d1) = (n.dot(&(p0 - a)), n.dot(&(p1 - a)));
    if d0 * d1 > 0.0 || d0 == d1 {
        return false;
    }
    let q = p0 + (p1 - p0) * (d0 / (d0 - d1));
    let nn = n.norm_squared();
    let wa = (b - q).cross(&(c - q)).dot(&n) / nn;
    let wb = (c - q).cross(&(a - q)).dot(&n) / nn;
    let eps = 1e-12;
    wa >= -eps && wb >= -eps && wa + wb <= 1.0 + eps
}

/// Whether two tets intersect: a vertex of one lies in the other, or an edge
/// of one crosses a face of the other.
pub fn oracle_tets_overlap(t1: &[Vec3; 4], t2: &[Vec3; 4]) -> bool {
    let eps = 1e-12;
    if t1.iter().any(|p| inside(p, t2, eps)) || t2.iter().any(|p| inside(p, t1, eps)) {
        return true;
    }
    let crosses = |a: &[Vec3; 4], b: &[Vec3; 4]| {
        EDGES.iter().any(|e| FACES.iter().any(|f| segment_crosses_triangle(&a[e[0]], &a[e[1]], &b[f[0]], &b[f[1]], &b[f[2]])))
    };
    crosses(t1, t2) || crosses(t2, t1)
}

/// Distance between two tets by exhaustive enumeration of feature pairs.
pub fn oracle_tet_distance(t1: &[Vec3; 4], t2: &[Vec3; 4]) -> OracleDistance {
    if oracle_tets_overlap(t1, t2) {
        let c = t1.iter().fold(Vec3::zeros(), |s, p| s + p) / 4.0;
        return OracleDistance { distance: 0.0, p1: c, p2: c, overlapping: true };
    }
    let mut best = (f64::INFINITY, Vec3::zeros(), Vec3::zeros());
    let mut offer = |p1: Vec3, p2: Vec3| {
        let d = (p1 - p2).norm();
        if d < best.0 {
            best = (d, p1, p2);
        }
    };
    for p in t1 {
        for q in t2 {
            offer(*p, *q);
        }
        for e in EDGES {
            offer(*p, closest_on_segment(p, &t2[e[0]], &t2[e[1]]));
        }
        for f in FACES {
            offer(*p, closest_on_triangle(p, &t2[f[0]], &t2[f[1]], &t2[f[2]]));
        }
    }
    for q in t2 {
        for e in EDGES {
            offer(closest_on_segment(q, &t1[e[0]], &t1[e[1]]), *q);
        }
        for f in FACES {
            offer(closest_on_triangle(q, &t1[f[0]], &t1[f[1]], &t1[f[2]]), *q);
        }
    }
    for ea in EDGES {
        for eb in EDGES {
            let (p, q) = closest_segments(&t1[ea[0]], &t1[ea[1]], &t2[eb[0]], &t2[eb[1]]);
            offer(p, q);
        }
    }
    OracleDistance { distance: best.0, p1: best.1, p2: best.2, overlapping: false }
}

/// Monte-Carlo overlap test: samples uniform points of `t1` and reports
/// whether any lies inside `t2`. `uniform` must return numbers in (0, 1].
pub fn monte_carlo_overlap(t1: &[Vec3; 4], t2: &[Vec3; 4], samples: usize, mut uniform: impl FnMut() -> f64) -> bool {
    for _ in 0..samples {
        // normalized exponentials are uniform on the simplex
        let e: [f64; 4] = core::array::from_fn(|_| -uniform().max(f64::MIN_POSITIVE).ln());
        let total: f64 = e.iter().sum();
        let p = t1.iter().zip(e.iter()).fold(Vec3::zeros(), |s, (v, w)| s + v * (w / total));
        if inside(&p, t2, 0.0) {
            return true;
        }
    }
    false
}

fn lame(young: f64, poisson: f64) -> (f64, f64) {
    (young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson)), young / (2.0 * (1.0 + poisson)))
}

/// Rotation of `F = R S` by the Newton iteration `R ← (R + R⁻ᵀ)/2`.
fn polar_rotation(f: &Mat3) -> Mat3 {
    let mut r = *f;
    for _ in 0..100 {
        let Some(inv) = r.try_inverse() else { break };
        let next = (r + inv.transpose()) * 0.5;
        let done = (next - r).norm() < 1e-15 * r.norm();
        r = next;
        if done {
            break;
        }
    }
    r
}

fn first_piola(law: Law, f: &Mat3, l: f64, m: f64) -> Result<Mat3> {
    let id = Mat3::identity();
    Ok(match law {
        Law::StVK => {
            let e = (f.transpose() * f - id) * 0.5;
            f * (id * (l * e.trace()) + e * (2.0 * m))
        }
        Law::NeoHookean => {
            let j = f.determinant();
            let fit = f.try_inverse().filter(|_| j > 0.0).ok_or(Error::InvertedElement { tet: 0, det: j })?.transpose();
            (f - fit) * m + fit * (l * j.ln())
        }
        Law::Corotational => {
            let r = polar_rotation(f);
            let eps = r.transpose() * f - id;
            let eps = (eps + eps.transpose()) * 0.5;
            r * (id * (l * eps.trace()) + eps * (2.0 * m))
        }
    })
}

/// `dP[dF]`. The corotational tangent keeps `R` fixed, as in the simulator's
/// system matrix.
fn piola_differential(law: Law, f: &Mat3, df: &Mat3, l: f64, m: f64) -> Mat3 {
    let id = Mat3::identity();
    match law {
        Law::StVK => {
            let e = (f.transpose() * f - id) * 0.5;
            let de = (f.transpose() * df + df.transpose() * f) * 0.5;
            df * (id * (l * e.trace()) + e * (2.0 * m)) + f * (id * (l * de.trace()) + de * (2.0 * m))
        }
        Law::NeoHookean => {
            let fi = f.try_inverse().unwrap_or(id);
            let fit = fi.transpose();
            df * m + fit * df.transpose() * fit * (m - l * f.determinant().ln()) + fit * (l * (fi * df).trace())
        }
        Law::Corotational => {
            let r = polar_rotation(f);
            let de = r.transpose() * df;
            let de = (de + de.transpose()) * 0.5;
            r * (id * (l * de.trace()) + de * (2.0 * m))
        }
    }
}

struct Element {
    dm_inv: Mat3,
    volume: f64,
}

impl Element {
    fn new(rest: &[Vec3; 4]) -> Result<Self> {
        let dm = Mat3::from_columns(&[rest[1] - rest[0], rest[2] - rest[0], rest[3] - rest[0]]);
        let volume = dm.determinant().abs() / 6.0;
        let dm_inv = dm.try_inverse().filter(|_| volume > 0.0).ok_or(Error::DegenerateElement { tet: 0, volume })?;
        Ok(Self { dm_inv, volume })
    }

    fn deformation(&self, x: &[Vec3; 4]) -> Mat3 {
        Mat3::from_columns(&[x[1] - x[0], x[2] - x[0], x[3] - x[0]]) * self.dm_inv
    }

    /// Nodal gradients of `V Ψ` for a given `P`.
    fn nodal(&self, p: &Mat3) -> [Vec3; 4] {
        let h = p * self.dm_inv.transpose() * self.volume;
        let (a, b, c) = (h.column(0).into_owned(), h.column(1).into_owned(), h.column(2).into_owned());
        [-(a + b + c), a, b, c]
    }

    fn df(&self, node: usize, comp: usize) -> Mat3 {
        let mut ds = Mat3::zeros();
        if node == 0 {
            for k in 0..3 {
                ds[(comp, k)] = -1.0;
            }
        } else {
            ds[(comp, node - 1)] = 1.0;
        }
        ds * self.dm_inv
    }
}

/// Gradient of the stored energy of one tet with respect to its vertices
/// (the simulator's internal force `f = ∂W/∂x`).
pub fn oracle_element_forces(law: Law, young: f64, poisson: f64, rest: &[Vec3; 4], x: &[Vec3; 4]) -> Result<[Vec3; 4]> {
    let el = Element::new(rest)?;
    let (l, m) = lame(young, poisson);
    Ok(el.nodal(&first_piola(law, &el.deformation(x), l, m)?))
}

/// 12×12 element stiffness `∂f/∂x`.
pub fn oracle_element_stiffness(law: Law, young: f64, poisson: f64, rest: &[Vec3; 4], x: &[Vec3; 4]) -> Result<DMat> {
    let el = Element::new(rest)?;
    let (l, m) = lame(young, poisson);
    let f = el.deformation(x);
    let mut k = DMat::zeros(12, 12);
    for j in 0..4 {
        for c in 0..3 {
            let col = el.nodal(&piola_differential(law, &f, &el.df(j, c), l, m));
            for i in 0..4 {
                for r in 0..3 {
                    k[(3 * i + r, 3 * j + c)] = col[i][r];
                }
            }
        }
    }
    Ok(k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleNcpSolution {
    pub lambda: DVec,
    pub sigma: DVec,
    pub modes: Vec<ContactMode>,
}

struct Pattern<'a> {
    g_mat: &'a DMat,
    g: &'a DVec,
    mu: &'a [f64],
    modes: Vec<ContactMode>,
}

struct Candidate {
    lambda: DVec,
    sigma: DVec,
    /// slip speed of each sliding contact, in pattern order
    slip: Vec<f64>,
    /// `u⊥·σ_T` of each sliding contact
    perp: Vec<f64>,
}

impl Pattern<'_> {
    fn sliding(&self) -> Vec<usize> {
        (0..self.modes.len()).filter(|&i| self.modes[i] == ContactMode::Sliding).collect()
    }

    /// Solves the square system of the pattern for fixed slip angles.
    fn solve(&self, angles: &[f64]) -> Option<Candidate> {
        let nc = self.modes.len();
        let mut offsets = Vec::with_capacity(nc);
        let mut m = 0;
        for mode in &self.modes {
            offsets.push(m);
            m += match mode {
                ContactMode::Breaking => 0,
                ContactMode::Sticking => 3,
                ContactMode::Sliding => 2,
            };
        }
        let mut dirs = Vec::with_capacity(nc);
        let mut k = 0;
        for mode in &self.modes {
            if *mode == ContactMode::Sliding {
                dirs.push(Vec3::new(angles[k].cos(), angles[k].sin(), 0.0));
                k += 1;
            } else {
                dirs.push(Vec3::zeros());
            }
        }
        // λ = L z
        let mut lmap = DMat::zeros(3 * nc, m);
        for i in 0..nc {
            let o = offsets[i];
            match self.modes[i] {
                ContactMode::Breaking => {}
                ContactMode::Sticking => {
                    for c in 0..3 {
                        lmap[(3 * i + c, o + c)] = 1.0;
                    }
                }
                ContactMode::Sliding => {
                    lmap[(3 * i, o)] = -self.mu[i] * dirs[i][0];
                    lmap[(3 * i + 1, o)] = -self.mu[i] * dirs[i][1];
                    lmap[(3 * i + 2, o)] = 1.0;
                }
            }
        }
        let gl = self.g_mat * &lmap;
        let mut a = DMat::zeros(m, m);
        let mut rhs = DVec::zeros(m);
        for i in 0..nc {
            let o = offsets[i];
            match self.modes[i] {
                ContactMode::Breaking => {}
                ContactMode::Sticking => {
                    for c in 0..3 {
                        a.row_mut(o + c).copy_from(&gl.row(3 * i + c));
                        rhs[o + c] = -self.g[3 * i + c];
                    }
                }
                ContactMode::Sliding => {
                    a.row_mut(o).copy_from(&gl.row(3 * i + 2));
                    rhs[o] = -self.g[3 * i + 2];
                    let u = dirs[i];
                    let row = gl.row(3 * i) * u[0] + gl.row(3 * i + 1) * u[1];
                    a.row_mut(o + 1).copy_from(&row);
                    a[(o + 1, o + 1)] -= 1.0;
                    rhs[o + 1] = -(self.g[3 * i] * u[0] + self.g[3 * i + 1] * u[1]);
                }
            }
        }
        let z = if m == 0 {
            DVec::zeros(0)
        } else {
            let lu = a.clone().full_piv_lu();
            let z = lu.solve(&rhs)?;
            if !z.iter().all(|v| v.is_finite()) || (&a * &z - &rhs).amax() > 1e-9 * (rhs.amax() + a.amax() * z.amax()) {
                return None;
            }
            z
        };
        let lambda = &lmap * &z;
        let sigma = self.g_mat * &lambda + self.g;
        let mut slip = Vec::new();
        let mut perp = Vec::new();
        for i in 0..nc {
            if self.modes[i] == ContactMode::Sliding {
                slip.push(z[offsets[i] + 1]);
                perp.push(-dirs[i][1] * sigma[3 * i] + dirs[i][0] * sigma[3 * i + 1]);
            }
        }
        Some(Candidate { lambda, sigma, slip, perp })
    }
}

fn cone_projection(l: &Vec3, mu: f64) -> Vec3 {
    let t = (l[0] * l[0] + l[1] * l[1]).sqrt();
    let n = l[2];
    if t <= mu * n {
        return *l;
    }
    if mu * t <= -n {
        return Vec3::zeros();
    }
    let nn = (mu * t + n) / (mu * mu + 1.0);
    if t == 0.0 {
        return Vec3::new(0.0, 0.0, nn.max(0.0));
    }
    Vec3::new(l[0] / t * mu * nn, l[1] / t * mu * nn, nn)
}

/// Natural-map residual `‖λ − P_K(λ − σ − Γ(σ))‖∞` per contact, maximized.
pub fn oracle_ncp_residual(lambda: &DVec, sigma: &DVec, mu: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, &m) in mu.iter().enumerate() {
        let l = Vec3::new(lambda[3 * i], lambda[3 * i + 1], lambda[3 * i + 2]);
        let s = Vec3::new(sigma[3 * i], sigma[3 * i + 1], sigma[3 * i + 2]);
        let st = (s[0] * s[0] + s[1] * s[1]).sqrt();
        let corrected = s + Vec3::new(0.0, 0.0, m * st);
        worst = worst.max((l - cone_projection(&(l - corrected), m)).amax());
    }
    worst
}

fn bisect(p: &Pattern, mut lo: f64, mut hi: f64, mut flo: f64) -> Option<f64> {
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let fm = p.solve(&[mid])?.perp[0];
        if fm == 0.0 {
            return Some(mid);
        }
        if (fm > 0.0) == (flo > 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

fn newton_angles(p: &Pattern, mut th: Vec<f64>, tol: f64) -> Option<Vec<f64>> {
    let n = th.len();
    let residual = |t: &[f64]| p.solve(t).map(|c| DVec::from_vec(c.perp));
    let mut r = residual(&th)?;
    for _ in 0..60 {
        if r.amax() < tol {
            return Some(th);
        }
        let mut j = DMat::zeros(n, n);
        for k in 0..n {
            let mut t2 = th.clone();
            t2[k] += 1e-7;
            let r2 = residual(&t2)?;
            j.set_column(k, &((r2 - &r) / 1e-7));
        }
        let step = j.lu().solve(&(-&r))?;
        let mut alpha = 1.0;
        loop {
            let trial: Vec<f64> = th.iter().zip(step.iter()).map(|(a, b)| a + alpha * b).collect();
            if let Some(rt) = residual(&trial) {
                if rt.norm() < r.norm() {
                    th = trial;
                    r = rt;
                    break;
                }
            }
            alpha *= 0.5;
            if alpha < 1e-6 {
                return None;
            }
        }
    }
    (r.amax() < tol).then_some(th)
}

/// Every contact-mode pattern that yields a solution of the frictional NCP,
/// by enumeration of the 3^n_c patterns. Sliding directions are screened on
/// a 16-angle grid per contact (12 when more than three contacts slide), then
/// polished: bisection on the perpendicular slip residual for one sliding
/// contact, Newton on the angles for several.
pub fn oracle_ncp(g_mat: &DMat, g: &DVec, mu: &[f64]) -> Result<Vec<OracleNcpSolution>> {
    let nc = mu.len();
    if g_mat.nrows() != 3 * nc || g_mat.ncols() != 3 * nc || g.len() != 3 * nc {
        return Err(Error::DimensionMismatch { what: "oracle NCP", expected: 3 * nc, found: g.len() });
    }
    let s_scale = g.amax().max(1e-12);
    let dmax = (0..3 * nc).map(|i| g_mat[(i, i)]).fold(0.0, f64::max);
    let l_scale = if dmax > 0.0 { s_scale / dmax } else { 1.0 };
    let feas = 1e-9;
    let mut out: Vec<OracleNcpSolution> = Vec::new();
    let total = 3usize.pow(nc as u32);
    for code in 0..total {
        let mut c = code;
        let modes: Vec<ContactMode> = (0..nc)
            .map(|_| {
                let m = [ContactMode::Breaking, ContactMode::Sticking, ContactMode::Sliding][c % 3];
                c /= 3;
                m
            })
            .collect();
        let p = Pattern { g_mat, g, mu, modes };
        let sl = p.sliding();
        let mut cands: Vec<Candidate> = Vec::new();
        if sl.is_empty() {
            cands.extend(p.solve(&[]));
        } else if sl.len() == 1 {
            let grid: Vec<f64> = (0..=16).map(|k| 2.0 * PI * k as f64 / 16.0).collect();
            let vals: Vec<Option<f64>> = grid.iter().map(|&t| p.solve(&[t]).map(|c| c.perp[0])).collect();
            for k in 0..16 {
                if let (Some(a), Some(b)) = (vals[k], vals[k + 1]) {
                    let root = if a == 0.0 {
                        Some(grid[k])
                    } else if (a > 0.0) != (b > 0.0) {
                        bisect(&p, grid[k], grid[k + 1], a)
                    } else {
                        None
                    };
                    cands.extend(root.and_then(|t| p.solve(&[t])));
                }
            }
        } else {
            let per: usize = if sl.len() > 3 { 12 } else { 16 };
            let count = per.pow(sl.len() as u32);
            let mut seeds: Vec<(f64, Vec<f64>)> = Vec::new();
            for idx in 0..count {
                let mut rem = idx;
                let th: Vec<f64> = (0..sl.len())
                    .map(|_| {
                        let t = 2.0 * PI * (rem % per) as f64 / per as f64;
                        rem /= per;
                        t
                    })
                    .collect();
                if let Some(c) = p.solve(&th) {
                    if c.lambda.iter().enumerate().all(|(i, &v)| i % 3 != 2 || v >= -0.1 * l_scale) {
                        seeds.push((c.perp.iter().map(|v| v.abs()).fold(0.0, f64::max), th));
                    }
                }
            }
            seeds.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (_, th) in seeds.into_iter().take(128) {
                if let Some(t) = newton_angles(&p, th, 1e-12 * s_scale) {
                    cands.extend(p.solve(&t));
                }
            }
        }
        for cand in cands {
            let ok = (0..nc).all(|i| {
                let ln = cand.lambda[3 * i + 2];
                let lt = (cand.lambda[3 * i].powi(2) + cand.lambda[3 * i + 1].powi(2)).sqrt();
                match p.modes[i] {
                    ContactMode::Breaking => cand.sigma[3 * i + 2] >= -feas * s_scale,
                    ContactMode::Sticking => ln >= -feas * l_scale && lt <= mu[i] * ln + feas * l_scale,
                    ContactMode::Sliding => ln >= -feas * l_scale,
                }
            }) && cand.slip.iter().all(|&s| s >= -feas * s_scale)
                && cand.perp.iter().all(|&r| r.abs() <= feas * s_scale);
            if !ok || oracle_ncp_residual(&cand.lambda, &cand.sigma, mu) > 1e-7 * s_scale.max(l_scale) {
                continue;
            }
            let dup = out.iter().any(|o| (&o.lambda - &cand.lambda).amax() <= 1e-9 * l_scale && (&o.sigma - &cand.sigma).amax() <= 1e-9 * s_scale);
            if !dup {
                out.push(OracleNcpSolution { lambda: cand.lambda, sigma: cand.sigma, modes: p.modes.clone() });
            }
        }
    }
    if out.is_empty() {
        Err(Error::NoFeasiblePattern)
    } else {
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleStep {
    pub v_free: DVec,
    pub delta_a: DVec,
    pub v_f: DVec,
    pub x_f: DVec,
    pub lambda_c: DVec,
    pub sigma: DVec,
    pub modes: Vec<ContactMode>,
    /// number of distinct NCP solutions found
    pub solutions: usize,
}

/// Dense recomputation of one step of `record`: dense element forces and
/// stiffness, dense system solve, enumerated NCP. The contact Jacobian,
/// friction coefficients and actuation Jacobian are read from the record.
pub fn oracle_dense_step(scene: &Scene, record: &StepRecord) -> Result<OracleStep> {
    let mesh = &scene.mesh;
    let n = mesh.dof_count();
    if n > 600 || record.contacts.len() > 6 {
        return Err(Error::InvalidParameter(alloc::format!(
            "oracle step limited to 200 nodes and 6 contacts, got {} nodes and {} contacts",
            mesh.node_count(),
            record.contacts.len()
        )));
    }
    let h = scene.sim.h;
    let x = &record.state.x;
    let v = &record.state.v;
    let node = |i: usize| Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]);
    let rest = mesh.rest_positions();
    let mut mass = DVec::zeros(n);
    let mut a = DMat::zeros(n, n);
    let mut k = DMat::zeros(n, n);
    let mut f = DVec::zeros(n);
    for (e, tet) in mesh.tets().iter().enumerate() {
        let mat = scene.materials.of_tet(e);
        let r: [Vec3; 4] = tet.map(|i| rest[i]);
        let xs: [Vec3; 4] = tet.map(node);
        let fe = oracle_element_forces(mat.law, mat.young, mat.poisson, &r, &xs)?;
        let ke = oracle_element_stiffness(mat.law, mat.young, mat.poisson, &r, &xs)?;
        let me = mat.density * Element::new(&r)?.volume / 4.0;
        let w = h * mat.rayleigh_stiffness + h * h;
        for (li, &gi) in tet.iter().enumerate() {
            for c in 0..3 {
                mass[3 * gi + c] += me;
                a[(3 * gi + c, 3 * gi + c)] += (1.0 + h * mat.rayleigh_mass) * me;
                f[3 * gi + c] += fe[li][c];
                for (lj, &gj) in tet.iter().enumerate() {
                    for d in 0..3 {
                        let kv = ke[(3 * li + c, 3 * lj + d)];
                        k[(3 * gi + c, 3 * gj + d)] += kv;
                        a[(3 * gi + c, 3 * gj + d)] += w * kv;
                    }
                }
            }
        }
    }
    let mut p = DVec::from_fn(n, |i, _| mass[i] * scene.sim.gravity[i % 3]);
    if let Some(l) = &scene.sim.loads {
        p += l;
    }
    let b = -(&k * v) * (h * h) + (p - f) * h;
    let fixed: Vec<bool> = (0..n).map(|i| scene.sim.dof_mask.is_fixed(i / 3)).collect();
    for i in 0..n {
        if fixed[i] {
            for j in 0..n {
                a[(i, j)] = 0.0;
                a[(j, i)] = 0.0;
            }
            a[(i, i)] = 1.0;
        }
    }
    let project = |r: &DVec| DVec::from_fn(n, |i, _| if fixed[i] { 0.0 } else { r[i] });
    let lu = a.lu();
    let solve = |r: &DVec| lu.solve(&project(r)).ok_or(Error::SingularSystem("oracle system matrix"));
    let v_free = project(v) + solve(&b)?;
    let ha = record.h_a.to_dense();
    let delta_a = solve(&(ha.transpose() * &record.lambda_a * h))?;
    let hc = record.contacts.jacobian.to_dense();
    let mu = record.contacts.frictions();
    let nc = mu.len();
    let mut a_inv_hct = DMat::zeros(n, 3 * nc);
    for j in 0..3 * nc {
        a_inv_hct.set_column(j, &solve(&hc.row(j).transpose())?);
    }
    let g_mat = {
        let g = &hc * &a_inv_hct * h;
        (&g + g.transpose()) * 0.5
    };
    let g = &hc * (&v_free + &delta_a);
    let (lambda_c, sigma, modes, solutions) = if nc == 0 {
        (DVec::zeros(0), DVec::zeros(0), Vec::new(), 1)
    } else {
        let sols = oracle_ncp(&g_mat, &g, &mu)?;
        let count = sols.len();
        let s = sols.into_iter().next().unwrap();
        (s.lambda, s.sigma, s.modes, count)
    };
    let v_f = &v_free + &delta_a + &a_inv_hct * &lambda_c * h;
    let x_f = x + &v_f * h;
    Ok(OracleStep { v_free, delta_a, v_f, x_f, lambda_c, sigma, modes, solutions })
}

/// Box-constrained QP `min ½xᵀQx + qᵀx, lo ≤ x ≤ hi` by enumeration of the
/// 3^n active sets (n ≤ 12).
pub fn oracle_box_qp(q_mat: &DMat, q: &DVec, lower: &DVec, upper: &DVec) -> Result<DVec> {
    let n = q.len();
    if n > 12 {
        return Err(Error::InvalidParameter(alloc::format!("box QP oracle limited to 12 variables, got {n}")));
    }
    let tol = 1e-9 * (1.0 + q.amax() + q_mat.amax());
    let mut best: Option<(f64, DVec)> = None;
    'sets: for code in 0..3usize.pow(n as u32) {
        let mut c = code;
        let state: Vec<usize> = (0..n)
            .map(|_| {
                let s = c % 3;
                c /= 3;
                s
            })
            .collect();
        let mut x = DVec::zeros(n);
        for i in 0..n {
            match state[i] {
                1 if lower[i].is_finite() => x[i] = lower[i],
                2 if upper[i].is_finite() => x[i] = upper[i],
                0 => {}
                _ => continue 'sets,
            }
        }
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 0).collect();
        if !free.is_empty() {
            let qff = DMat::from_fn(free.len(), free.len(), |r, c| q_mat[(free[r], free[c])]);
            let rhs = DVec::from_fn(free.len(), |r, _| -(q[free[r]] + (0..n).filter(|&j| state[j] != 0).map(|j| q_mat[(free[r], j)] * x[j]).sum::<f64>()));
            let Some(xf) = qff.lu().solve(&rhs) else { continue };
            for (r, &i) in free.iter().enumerate() {
                x[i] = xf[r];
            }
        }
        let grad = q_mat * &x + q;
        let feasible = (0..n).all(|i| match state[i] {
            0 => x[i] >= lower[i] - tol && x[i] <= upper[i] + tol,
            1 => grad[i] >= -tol,
            _ => grad[i] <= tol,
        });
        if feasible {
            let obj = 0.5 * x.dot(&(q_mat * &x)) + q.dot(&x);
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, x));
            }
        }
    }
    best.map(|(_, x)| x).ok_or(Error::NoFeasiblePattern)
}

/// One row of an oracle comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub case: String,
    pub reference: Vec<f64>,
    pub candidate: Vec<f64>,
    pub metric: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    pub const CSV_HEADER: &'static str = "case,metric,tolerance,pass,reference,candidate";

    pub fn new(case: impl Into<String>, reference: Vec<f64>, candidate: Vec<f64>, metric: f64, tolerance: f64) -> Self {
        Self { case: case.into(), reference, candidate, metric, tolerance, pass: metric <= tolerance }
    }

    /// Report with the max-abs difference as metric.
    pub fn max_abs(case: impl Into<String>, reference: &[f64], candidate: &[f64], tolerance: f64) -> Self {
        let metric = if reference.len() == candidate.len() {
            reference.iter().zip(candidate).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        Self::new(case, reference.to_vec(), candidate.to_vec(), metric, tolerance)
    }

    pub fn csv_row(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| alloc::format!("{x:e}")).collect::<Vec<_>>().join(";");
        alloc::format!(
            "{},{:e},{:e},{},{},{}",
            self.case,
            self.metric,
            self.tolerance,
            self.pass,
            join(&self.reference),
            join(&self.candidate)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::gjk::gjk;
    use crate::constitutive::{internal_forces, stiffness, MaterialParams, Materials};
    use crate::mesh::TetMesh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference_tet() -> [Vec3; 4] {
        [Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()]
    }

    fn random_tet(rng: &mut ChaCha8Rng, center: Vec3, size: f64) -> [Vec3; 4] {
        loop {
            let t: [Vec3; 4] = core::array::from_fn(|_| {
                center + Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * size
            });
            let vol = (t[1] - t[0]).cross(&(t[2] - t[0])).dot(&(t[3] - t[0])) / 6.0;
            if vol.abs() > 0.02 * size.powi(3) {
                return t;
            }
        }
    }

    #[test]
    fn reference_pair_distance() {
        let a = reference_tet();
        let b = a.map(|p| p + Vec3::new(3.0, 0.0, 0.0));
        let d = oracle_tet_distance(&a, &b);
        assert!((d.distance - 2.0).abs() < 1e-15);
        assert_eq!(d.p1, Vec3::x());
        assert_eq!(d.p2, Vec3::new(3.0, 0.0, 0.0));
        assert!(oracle_tet_distance(&a, &a).overlapping);
    }

    #[test]
    fn distance_is_a_metric_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = random_tet(&mut rng, Vec3::zeros(), 1.0);
            let cb = Vec3::new(rng.gen_range(-3.0..3.0), 0.0, 0.0);
            let b = random_tet(&mut rng, cb, 1.0);
            let cc = Vec3::new(0.0, rng.gen_range(-3.0..3.0), 0.0);
            let c = random_tet(&mut rng, cc, 1.0);
            let ab = oracle_tet_distance(&a, &b);
            let ba = oracle_tet_distance(&b, &a);
            assert!((ab.distance - ba.distance).abs() < 1e-12);
            assert!(((ab.p1 - ab.p2).norm() - ab.distance).abs() < 1e-12);
            // set distance obeys d(A,B) ≤ d(A,C) + diam(C) + d(C,B)
            let diam = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| (c[i] - c[j]).norm()).fold(0.0, f64::max);
            let ac = oracle_tet_distance(&a, &c).distance;
            let cb = oracle_tet_distance(&c, &b).distance;
            assert!(ab.distance <= ac + diam + cb + 1e-12);
        }
    }

    #[test]
    fn overlap_agrees_with_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut agree = 0;
        let mut checked = 0;
        while checked < 100 {
            let a = random_tet(&mut rng, Vec3::zeros(), 1.0);
            let cb = Vec3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), 0.0);
            let b = random_tet(&mut rng, cb, 1.0);
            let exact = oracle_tets_overlap(&a, &b);
            let gap = oracle_tet_distance(&a, &b).distance;
            if !exact && gap < 1e-3 {
                continue;
            }
            let sampled = monte_carlo_overlap(&a, &b, 100_000, || 1.0 - rng.gen::<f64>());
            checked += 1;
            // sampling only misses overlaps of tiny volume
            if sampled == exact {
                agree += 1;
            } else {
                assert!(exact && !sampled);
            }
        }
        assert!(agree >= 97, "{agree}");
    }

    #[test]
    fn gjk_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let a = random_tet(&mut rng, Vec3::zeros(), 1.0);
            let cb = Vec3::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), 0.0);
            let b = random_tet(&mut rng, cb, 1.0);
            let o = oracle_tet_distance(&a, &b);
            let w = gjk(&a, &b, 1e-12).unwrap();
            assert_eq!(o.overlapping, w.colliding);
            assert!((o.distance - w.distance()).abs() < 1e-9);
        }
    }

    #[test]
    fn element_forces_and_stiffness_match_simulator() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rest = reference_tet().map(|p| p * 0.01);
        let mesh = TetMesh::new(rest.to_vec(), alloc::vec![[0, 1, 2, 3]]).unwrap();
        for law in [Law::StVK, Law::NeoHookean, Law::Corotational] {
            let x: [Vec3; 4] = rest.map(|p| p + Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * 1e-3);
            let mats = Materials::uniform(MaterialParams::new(law, 1e5, 0.3, 1000.0), 1);
            let xv = DVec::from_iterator(12, x.iter().flat_map(|p| p.iter().copied()));
            let f = internal_forces(&mesh, &mats, &xv).unwrap();
            let fo = oracle_element_forces(law, 1e5, 0.3, &rest, &x).unwrap();
            let fo = DVec::from_iterator(12, fo.iter().flat_map(|p| p.iter().copied()));
            assert!((&f - &fo).amax() < 1e-10 * fo.amax(), "{law:?}");
            let k = stiffness(&mesh, &mats, &xv).unwrap().to_dense();
            let ko = oracle_element_stiffness(law, 1e5, 0.3, &rest, &x).unwrap();
            assert!((&k - &ko).amax() < 1e-9 * ko.amax(), "{law:?}");
        }
    }

    #[test]
    fn frictionless_single_contact_closed_form() {
        let g_mat = DMat::from_row_slice(3, 3, &[2.0, 0.1, 0.2, 0.1, 1.5, 0.3, 0.2, 0.3, 3.0]);
        let g = DVec::from_vec(alloc::vec![0.4, -0.2, -0.6]);
        let sols = oracle_ncp(&g_mat, &g, &[0.0]).unwrap();
        let l = &sols[0].lambda;
        assert!(l[0].abs() < 1e-14 && l[1].abs() < 1e-14);
        assert!((l[2] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn box_qp_enumeration() {
        let q_mat = DMat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let q = DVec::from_vec(alloc::vec![-4.0, 1.0]);
        let x = oracle_box_qp(&q_mat, &q, &DVec::from_vec(alloc::vec![-1.0, 0.0]), &DVec::from_vec(alloc::vec![1.0, 1.0])).unwrap();
        assert_eq!(x, DVec::from_vec(alloc::vec![1.0, 0.0]));
    }

    #[test]
    fn report_row() {
        let r = OracleReport::max_abs("case", &[1.0, 2.0], &[1.0, 2.5], 1e-3);
        assert!(!r.pass);
        assert_eq!(r.csv_row(), "case,5e-1,1e-3,false,1e0;2e0,1e0;2.5e0");
    }
}
