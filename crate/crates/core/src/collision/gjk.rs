//! GJK distance between convex hulls of small point sets, with exact
//! sub-simplex selection and implicit differentiation of the result.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::Vec3;

pub const DEFAULT_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_MAX_ITERATIONS: usize = 128;

/// Point of the Minkowski difference `a[i] - b[j]` with its barycentric weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexVertex {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    /// `x* = p1 - p2`, the min-norm point of the Minkowski difference
    pub separation: Vec3,
    pub p1: Vec3,
    pub p2: Vec3,
    pub colliding: bool,
    pub simplex: Vec<SimplexVertex>,
}

impl Witness {
    pub fn distance(&self) -> f64 {
        if self.colliding {
            0.0
        } else {
            self.separation.norm()
        }
    }

    /// Accumulated weight of each vertex of the first shape.
    pub fn weights_a(&self, n: usize) -> Vec<f64> {
        let mut w = alloc::vec![0.0; n];
        for s in &self.simplex {
            w[s.i] += s.weight;
        }
        w
    }

    pub fn weights_b(&self, n: usize) -> Vec<f64> {
        let mut w = alloc::vec![0.0; n];
        for s in &self.simplex {
            w[s.j] += s.weight;
        }
        w
    }
}

/// Min-norm point of the convex hull of `pts` restricted to a sub-simplex:
/// returns `(weights, point)` when the affine projection lies inside.
fn affine_min_norm(pts: &[Vec3]) -> Option<(Vec<f64>, Vec3)> {
    let k = pts.len();
    if k == 1 {
        return Some((alloc::vec![1.0], pts[0]));
    }
    let m = k - 1;
    let mut gram = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for r in 0..m {
        let er = pts[r + 1] - pts[0];
        rhs[r] = -er.dot(&pts[0]);
        for c in 0..m {
            gram[(r, c)] = er.dot(&(pts[c + 1] - pts[0]));
        }
    }
    let scale = (0..m).map(|r| gram[(r, r)]).fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    let det = gram.determinant();
    // relative volume test: reject nearly flat sub-simplices
    if det.abs() <= 1e-24 * scale.powi(m as i32) {
        return None;
    }
    let mu = gram.lu().solve(&rhs)?;
    let mut w = alloc::vec![0.0; k];
    w[0] = 1.0 - mu.sum();
    let mut p = pts[0];
    for r in 0..m {
        w[r + 1] = mu[r];
        p += (pts[r + 1] - pts[0]) * mu[r];
    }
    Some((w, p))
}

/// Closest point of the hull of up to four points. Enumerates all sub-simplices
/// and keeps the smallest-norm projection with non-negative weights, preferring
/// fewer vertices on ties.
pub(crate) fn simplex_closest(pts: &[Vec3]) -> (Vec<usize>, Vec<f64>, Vec3) {
    let k = pts.len();
    let mut best: Option<(Vec<usize>, Vec<f64>, Vec3, f64)> = None;
    for mask in 1u32..(1 << k) {
        let idx: Vec<usize> = (0..k).filter(|&b| mask & (1 << b) != 0).collect();
        let sub: Vec<Vec3> = idx.iter().map(|&b| pts[b]).collect();
        let Some((w, p)) = affine_min_norm(&sub) else { continue };
        if w.iter().any(|&x| x < -1e-12) {
            continue;
        }
        let nn = p.norm_squared();
        let better = match &best {
            None => true,
            Some((bi, _, _, bn)) => {
                let tol = 1e-14 * (1.0 + nn.max(*bn));
                nn < *bn - tol || (nn <= *bn + tol && idx.len() < bi.len())
            }
        };
        if better {
            best = Some((idx, w, p, nn));
        }
    }
    let (idx, mut w, p, _) = best.expect("single vertices are always admissible");
    for x in &mut w {
        *x = x.max(0.0);
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    (idx, w, p)
}

fn support_min(pts: &[Vec3], d: &Vec3) -> usize {
    let mut best = 0;
    for (i, p) in pts.iter().enumerate().skip(1) {
        if p.dot(d) < pts[best].dot(d) {
            best = i;
        }
    }
    best
}

fn support_max(pts: &[Vec3], d: &Vec3) -> usize {
    let mut best = 0;
    for (i, p) in pts.iter().enumerate().skip(1) {
        if p.dot(d) > pts[best].dot(d) {
            best = i;
        }
    }
    best
}

/// Distance between `conv(a)` and `conv(b)`. `tol` bounds the distance error (m).
pub fn gjk(a: &[Vec3], b: &[Vec3], tol: f64) -> Result<Witness> {
    gjk_with_limit(a, b, tol, DEFAULT_MAX_ITERATIONS)
}

pub fn gjk_with_limit(a: &[Vec3], b: &[Vec3], tol: f64, max_iterations: usize) -> Result<Witness> {
    assert!(!a.is_empty() && !b.is_empty(), "gjk needs non-empty point sets");
    let scale = a
        .iter()
        .chain(b.iter())
        .map(|p| p.amax())
        .fold(0.0, f64::max)
        .max(1e-300);
    let mut pairs: Vec<(usize, usize)> = alloc::vec![(0, 0)];
    let mut weights: Vec<f64> = alloc::vec![1.0];
    let mut x = a[0] - b[0];
    for _ in 0..max_iterations {
        let xx = x.norm_squared();
        if xx <= (1e-14 * scale).powi(2) {
            return Ok(colliding(a, b, pairs, weights));
        }
        let i = support_min(a, &x);
        let j = support_max(b, &x);
        let w = a[i] - b[j];
        let gap = xx - x.dot(&w);
        if gap <= tol * xx.sqrt() || pairs.contains(&(i, j)) {
            return Ok(finish(a, b, pairs, weights));
        }
        pairs.push((i, j));
        let pts: Vec<Vec3> = pairs.iter().map(|&(i, j)| a[i] - b[j]).collect();
        let (idx, w_sub, p) = simplex_closest(&pts);
        if idx.len() == 4 {
            return Ok(colliding(a, b, idx.iter().map(|&k| pairs[k]).collect(), w_sub));
        }
        let last = pairs.len() - 1;
        if !idx.contains(&last) || p.norm_squared() >= xx * (1.0 - 1e-15) {
            // no progress
            return Ok(finish(a, b, idx.iter().map(|&k| pairs[k]).collect(), w_sub));
        }
        pairs = idx.iter().map(|&k| pairs[k]).collect();
        weights = w_sub;
        x = p;
    }
    Err(Error::MaxIterations { iterations: max_iterations })
}

fn witness_points(a: &[Vec3], b: &[Vec3], pairs: &[(usize, usize)], weights: &[f64]) -> (Vec3, Vec3) {
    let mut p1 = Vec3::zeros();
    let mut p2 = Vec3::zeros();
    for (&(i, j), &w) in pairs.iter().zip(weights) {
        p1 += a[i] * w;
        p2 += b[j] * w;
    }
    (p1, p2)
}

fn to_simplex(pairs: Vec<(usize, usize)>, weights: Vec<f64>) -> Vec<SimplexVertex> {
    pairs
        .into_iter()
        .zip(weights)
        .map(|((i, j), weight)| SimplexVertex { i, j, weight })
        .collect()
}

fn finish(a: &[Vec3], b: &[Vec3], pairs: Vec<(usize, usize)>, weights: Vec<f64>) -> Witness {
    let (p1, p2) = witness_points(a, b, &pairs, &weights);
    Witness {
        separation: p1 - p2,
        p1,
        p2,
        colliding: false,
        simplex: to_simplex(pairs, weights),
    }
}

fn colliding(a: &[Vec3], b: &[Vec3], pairs: Vec<(usize, usize)>, weights: Vec<f64>) -> Witness {
    let (p1, p2) = witness_points(a, b, &pairs, &weights);
    Witness {
        separation: Vec3::zeros(),
        p1,
        p2,
        colliding: true,
        simplex: to_simplex(pairs, weights),
    }
}

/// First-order sensitivity of a witness with respect to the vertices of both
/// shapes. Column `3k + c` perturbs coordinate `c` of vertex `k` of `a` for
/// `k < a.len()`, and of vertex `k - a.len()` of `b` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct WitnessDerivative {
    /// 3 × 3(na+nb)
    pub separation: DMatrix<f64>,
    /// per-vertex weights of `a`: na × 3(na+nb)
    pub weights_a: DMatrix<f64>,
    /// nb × 3(na+nb)
    pub weights_b: DMatrix<f64>,
}

/// Implicit differentiation of the optimality conditions of the active
/// sub-simplex: `Σw = 1` and `(m_r - m_0)·x* = 0` with `x* = Σ w_l m_l`.
pub fn witness_derivative(a: &[Vec3], b: &[Vec3], wit: &Witness) -> Result<WitnessDerivative> {
    if wit.colliding {
        return Err(Error::SingularSystem("witness of overlapping shapes"));
    }
    let (na, nb) = (a.len(), b.len());
    let ncol = 3 * (na + nb);
    let k = wit.simplex.len();
    let m: Vec<Vec3> = wit.simplex.iter().map(|s| a[s.i] - b[s.j]).collect();
    let w: Vec<f64> = wit.simplex.iter().map(|s| s.weight).collect();
    let x = wit.separation;
    let mut mat = DMatrix::<f64>::zeros(k, k);
    for l in 0..k {
        mat[(0, l)] = 1.0;
    }
    for r in 1..k {
        for l in 0..k {
            mat[(r, l)] = (m[r] - m[0]).dot(&m[l]);
        }
    }
    let lu = mat.clone().lu();
    let scale = mat.amax().max(1e-300);
    let det = lu.determinant();
    if !(det.abs() > 1e-13 * scale.powi(k as i32 - 1)) {
        return Err(Error::SingularSystem("degenerate GJK simplex"));
    }
    let mut ds = DMatrix::zeros(3, ncol);
    let mut dwa = DMatrix::zeros(na, ncol);
    let mut dwb = DMatrix::zeros(nb, ncol);
    for col in 0..ncol {
        let (vertex, c) = (col / 3, col % 3);
        let e = Vec3::ith(c, 1.0);
        let dm: Vec<Vec3> = wit
            .simplex
            .iter()
            .map(|s| {
                if vertex < na {
                    if s.i == vertex { e } else { Vec3::zeros() }
                } else if s.j == vertex - na {
                    -e
                } else {
                    Vec3::zeros()
                }
            })
            .collect();
        if dm.iter().all(|d| d.norm_squared() == 0.0) {
            continue;
        }
        let wdm: Vec3 = dm.iter().zip(&w).map(|(d, &wl)| d * wl).sum();
        let mut rhs = DVector::zeros(k);
        for r in 1..k {
            rhs[r] = -((dm[r] - dm[0]).dot(&x) + (m[r] - m[0]).dot(&wdm));
        }
        let dw = lu.solve(&rhs).ok_or(Error::SingularSystem("degenerate GJK simplex"))?;
        let mut dx = wdm;
        for l in 0..k {
            dx += m[l] * dw[l];
        }
        ds.set_column(col, &dx);
        for (l, s) in wit.simplex.iter().enumerate() {
            dwa[(s.i, col)] += dw[l];
            dwb[(s.j, col)] += dw[l];
        }
    }
    Ok(WitnessDerivative { separation: ds, weights_a: dwa, weights_b: dwb })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference() -> Vec<Vec3> {
        vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()]
    }

    fn random_tet(rng: &mut ChaCha8Rng, center: Vec3) -> Vec<Vec3> {
        (0..4)
            .map(|_| center + Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
            .collect()
    }

    #[test]
    fn reference_simplex_translated() {
        let a = reference();
        let b: Vec<Vec3> = a.iter().map(|p| p + Vec3::new(3.0, 0.0, 0.0)).collect();
        let w = gjk(&a, &b, DEFAULT_TOLERANCE).unwrap();
        assert!(!w.colliding);
        assert!((w.distance() - 2.0).abs() < 1e-12);
        assert!((w.p1 - Vec3::x()).norm() < 1e-12);
        assert!((w.p2 - Vec3::new(3.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn overlapping_identical_tets_collide() {
        let a = reference();
        assert!(gjk(&a, &a, DEFAULT_TOLERANCE).unwrap().colliding);
        let b: Vec<Vec3> = a.iter().map(|p| p * 0.5 + Vec3::repeat(0.1)).collect();
        assert!(gjk(&a, &b, DEFAULT_TOLERANCE).unwrap().colliding);
    }

    #[test]
    fn symmetric_and_rigidly_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, 1.2, -0.4).into_inner();
        let t = Vec3::new(0.4, -2.0, 1.0);
        for _ in 0..100 {
            let a = random_tet(&mut rng, Vec3::zeros());
            let b = random_tet(&mut rng, Vec3::new(1.2, 0.3, 0.0));
            let d = gjk(&a, &b, DEFAULT_TOLERANCE).unwrap().distance();
            let d2 = gjk(&b, &a, DEFAULT_TOLERANCE).unwrap().distance();
            assert!((d - d2).abs() < 1e-12);
            let ra: Vec<Vec3> = a.iter().map(|p| rot * p + t).collect();
            let rb: Vec<Vec3> = b.iter().map(|p| rot * p + t).collect();
            let d3 = gjk(&ra, &rb, DEFAULT_TOLERANCE).unwrap().distance();
            assert!((d - d3).abs() < 1e-10);
        }
    }

    #[test]
    fn witness_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let a = random_tet(&mut rng, Vec3::zeros());
            let b = random_tet(&mut rng, Vec3::new(0.0, 1.5, 0.3));
            let w = gjk(&a, &b, DEFAULT_TOLERANCE).unwrap();
            if w.colliding {
                continue;
            }
            let s: f64 = w.simplex.iter().map(|s| s.weight).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(w.simplex.iter().all(|s| (0.0..=1.0).contains(&s.weight)));
            assert!((w.p1 - w.p2 - w.separation).norm() < 1e-15);
            // support optimality: no point of the difference is below the plane
            let x = w.separation;
            for p in &a {
                for q in &b {
                    assert!((p - q).dot(&x) >= x.norm_squared() - 1e-10 * x.norm());
                }
            }
        }
    }

    #[test]
    fn point_against_box_corners() {
        let corners: Vec<Vec3> = (0..8)
            .map(|k| Vec3::new((k & 1) as f64, ((k >> 1) & 1) as f64, ((k >> 2) & 1) as f64))
            .collect();
        let w = gjk(&[Vec3::new(0.5, 0.5, 2.0)], &corners, DEFAULT_TOLERANCE).unwrap();
        assert!((w.distance() - 1.0).abs() < 1e-12);
        assert!((w.separation - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        let w = gjk(&[Vec3::new(2.0, 2.0, 0.5)], &corners, DEFAULT_TOLERANCE).unwrap();
        assert!((w.distance() - 2f64.sqrt()).abs() < 1e-12);
    }

    fn fd_check(a: &[Vec3], b: &[Vec3]) -> f64 {
        let w = gjk(a, b, 1e-14).unwrap();
        let d = witness_derivative(a, b, &w).unwrap();
        let h = 1e-7;
        let mut err: f64 = 0.0;
        let na = a.len();
        for col in 0..3 * (a.len() + b.len()) {
            let (v, c) = (col / 3, col % 3);
            let eval = |s: f64| {
                let (mut aa, mut bb) = (a.to_vec(), b.to_vec());
                if v < na {
                    aa[v][c] += s;
                } else {
                    bb[v - na][c] += s;
                }
                gjk(&aa, &bb, 1e-14).unwrap().separation
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            err = err.max((fd - d.separation.column(col)).amax());
        }
        err
    }

    #[test]
    fn separation_derivative_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        for _ in 0..50 {
            let a = random_tet(&mut rng, Vec3::zeros());
            let b = random_tet(&mut rng, Vec3::new(1.3, 0.2, -0.1));
            if gjk(&a, &b, 1e-14).unwrap().colliding {
                continue;
            }
            assert!(fd_check(&a, &b) < 1e-6);
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn vertex_face_normal_derivative() {
        // vertex of b above the face z=0 of a: d‖x*‖/dz(vertex) = -1
        let a = reference();
        let b = vec![
            Vec3::new(0.2, 0.2, -0.5),
            Vec3::new(0.2, 0.3, -1.5),
            Vec3::new(0.9, 0.2, -1.4),
            Vec3::new(0.1, 0.8, -1.3),
        ];
        let w = gjk(&a, &b, 1e-14).unwrap();
        let d = witness_derivative(&a, &b, &w).unwrap();
        let n = w.separation.normalize();
        let col = 3 * 4 + 2; // z of b[0]
        let dnorm = n.dot(&d.separation.column(col).into_owned());
        assert!((dnorm + 1.0).abs() < 1e-10);
        assert!(fd_check(&a, &b) < 1e-6);
    }

    #[test]
    fn rigid_pair_translation_has_zero_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = random_tet(&mut rng, Vec3::zeros());
        let b = random_tet(&mut rng, Vec3::new(1.5, 0.0, 0.0));
        let w = gjk(&a, &b, 1e-14).unwrap();
        let d = witness_derivative(&a, &b, &w).unwrap();
        for c in 0..3 {
            let mut total = Vec3::zeros();
            for v in 0..8 {
                total += d.separation.column(3 * v + c);
            }
            assert!(total.amax() < 1e-12);
        }
    }
}
