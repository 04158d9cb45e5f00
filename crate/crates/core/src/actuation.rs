//! Actuation Jacobians `H_a` (n_a × 3n) and their directional derivatives.
//!
//! Cable rows hold the tension direction at each path node, pneumatic rows the
//! lumped oriented cavity area, servo rows a constant unit direction.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{skew, CsrMatrix, DVec, Mat3, Triplets, Vec3};
#[allow(unused_imports)]
use num_traits::Float;

const MIN_SEGMENT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum ActuatorKind {
    /// Polyline through mesh nodes. With an anchor, the first node is also
    /// pulled toward that fixed world point.
    Cable { path: Vec<usize>, anchor: Option<Vec3> },
    /// Cavity boundary triangles; the row is `λ · area / 3` per vertex.
    Pneumatic { triangles: Vec<[usize; 3]> },
    Servo { node: usize, direction: Vec3 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorSpec {
    pub kind: ActuatorKind,
    /// (λ_min, λ_max), N for cables and servos, Pa for cavities
    pub bounds: (f64, f64),
}

impl ActuatorSpec {
    pub fn cable(path: Vec<usize>, bounds: (f64, f64)) -> Self {
        Self { kind: ActuatorKind::Cable { path, anchor: None }, bounds }
    }

    pub fn anchored_cable(anchor: Vec3, path: Vec<usize>, bounds: (f64, f64)) -> Self {
        Self { kind: ActuatorKind::Cable { path, anchor: Some(anchor) }, bounds }
    }

    pub fn pneumatic(triangles: Vec<[usize; 3]>, bounds: (f64, f64)) -> Self {
        Self { kind: ActuatorKind::Pneumatic { triangles }, bounds }
    }

    pub fn servo(node: usize, direction: Vec3, bounds: (f64, f64)) -> Self {
        Self { kind: ActuatorKind::Servo { node, direction }, bounds }
    }

    pub fn validate(&self, node_count: usize) -> Result<()> {
        let check = |i: usize| {
            if i < node_count {
                Ok(())
            } else {
                Err(Error::IndexOutOfRange { index: i, len: node_count })
            }
        };
        if !(self.bounds.0 <= self.bounds.1) {
            return Err(Error::InvalidParameter(alloc::format!(
                "actuator bounds must satisfy min <= max, got {:?}",
                self.bounds
            )));
        }
        match &self.kind {
            ActuatorKind::Cable { path, anchor } => {
                let needed = if anchor.is_some() { 1 } else { 2 };
                if path.len() < needed {
                    return Err(Error::InvalidParameter("cable path needs at least 2 points".into()));
                }
                path.iter().try_for_each(|&i| check(i))
            }
            ActuatorKind::Pneumatic { triangles } => {
                if triangles.is_empty() {
                    return Err(Error::InvalidParameter("pneumatic cavity has no triangles".into()));
                }
                triangles.iter().flatten().try_for_each(|&i| check(i))
            }
            ActuatorKind::Servo { node, direction } => {
                if (direction.norm() - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidParameter("servo direction must be unit length".into()));
                }
                check(*node)
            }
        }
    }
}

pub fn validate_all(specs: &[ActuatorSpec], node_count: usize) -> Result<()> {
    specs.iter().try_for_each(|s| s.validate(node_count))
}

pub fn bounds(specs: &[ActuatorSpec]) -> (DVec, DVec) {
    (
        DVec::from_iterator(specs.len(), specs.iter().map(|s| s.bounds.0)),
        DVec::from_iterator(specs.len(), specs.iter().map(|s| s.bounds.1)),
    )
}

fn node(x: &DVec, i: usize) -> Vec3 {
    Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2])
}

/// A cable segment from `from` toward `to`. `None` marks the fixed anchor.
struct Segment {
    from: Option<usize>,
    to: usize,
    /// unit vector from `from` to `to`
    u: Vec3,
    len: f64,
}

fn segments(actuator: usize, path: &[usize], anchor: &Option<Vec3>, x: &DVec) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    let mut push = |from: Option<usize>, a: Vec3, to: usize, segment: usize| {
        let d = node(x, to) - a;
        let len = d.norm();
        if !(len > MIN_SEGMENT) {
            return Err(Error::DegenerateSegment { actuator, segment });
        }
        out.push(Segment { from, to, u: d / len, len });
        Ok(())
    };
    let mut s = 0;
    if let Some(p) = anchor {
        push(None, *p, path[0], s)?;
        s += 1;
    }
    for w in path.windows(2) {
        push(Some(w[0]), node(x, w[0]), w[1], s)?;
        s += 1;
    }
    Ok(out)
}

/// Per-triangle oriented area `½ (b − a) × (c − a)`.
pub fn oriented_area(a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    (b - a).cross(&(c - a)) * 0.5
}

/// `∂(area)/∂(vertex k)` for `k = 0, 1, 2`.
pub fn oriented_area_derivative(p: [Vec3; 3]) -> [Mat3; 3] {
    [
        skew(&(p[2] - p[1])) * 0.5,
        skew(&(p[0] - p[2])) * 0.5,
        skew(&(p[1] - p[0])) * 0.5,
    ]
}

pub fn actuation_jacobian(specs: &[ActuatorSpec], x: &DVec) -> Result<CsrMatrix> {
    let ndof = x.len();
    let mut t = Triplets::new(specs.len(), ndof);
    for (a, spec) in specs.iter().enumerate() {
        spec.validate(ndof / 3)?;
        match &spec.kind {
            ActuatorKind::Cable { path, anchor } => {
                for s in segments(a, path, anchor, x)? {
                    // tension pulls the segment ends toward each other
                    for c in 0..3 {
                        t.push(a, 3 * s.to + c, -s.u[c]);
                        if let Some(f) = s.from {
                            t.push(a, 3 * f + c, s.u[c]);
                        }
                    }
                }
            }
            ActuatorKind::Pneumatic { triangles } => {
                for tri in triangles {
                    let ar = oriented_area(&node(x, tri[0]), &node(x, tri[1]), &node(x, tri[2])) / 3.0;
                    for &i in tri {
                        for c in 0..3 {
                            t.push(a, 3 * i + c, ar[c]);
                        }
                    }
                }
            }
            ActuatorKind::Servo { node, direction } => {
                for c in 0..3 {
                    t.push(a, 3 * node + c, direction[c]);
                }
            }
        }
    }
    Ok(t.to_csr())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeSide {
    /// `∂(H_aᵀ λ)/∂x`, 3n × 3n; the vector is λ (length n_a)
    TransposeTimesLambda,
    /// `∂(H_a v)/∂x`, n_a × 3n; the vector is v (length 3n)
    TimesVector,
}

pub fn actuation_jacobian_vec_derivative(
    specs: &[ActuatorSpec],
    x: &DVec,
    vec: &DVec,
    side: DerivativeSide,
) -> Result<CsrMatrix> {
    let ndof = x.len();
    let (rows, expected) = match side {
        DerivativeSide::TransposeTimesLambda => (ndof, specs.len()),
        DerivativeSide::TimesVector => (specs.len(), ndof),
    };
    if vec.len() != expected {
        return Err(Error::DimensionMismatch { what: "actuation derivative vector", expected, found: vec.len() });
    }
    let mut t = Triplets::new(rows, ndof);
    for (a, spec) in specs.iter().enumerate() {
        spec.validate(ndof / 3)?;
        match &spec.kind {
            ActuatorKind::Cable { path, anchor } => {
                for s in segments(a, path, anchor, x)? {
                    // du/dx_to = P/L, du/dx_from = -P/L
                    let p = (Mat3::identity() - s.u * s.u.transpose()) / s.len;
                    match side {
                        DerivativeSide::TransposeTimesLambda => {
                            let b = p * vec[a];
                            t.push_block(s.to, s.to, &-b);
                            if let Some(f) = s.from {
                                t.push_block(s.to, f, &b);
                                t.push_block(f, s.to, &b);
                                t.push_block(f, f, &-b);
                            }
                        }
                        DerivativeSide::TimesVector => {
                            // row value u·(v_from − v_to)
                            let dv = s.from.map(|f| node(vec, f)).unwrap_or_else(Vec3::zeros) - node(vec, s.to);
                            let g = p.transpose() * dv;
                            for c in 0..3 {
                                t.push(a, 3 * s.to + c, g[c]);
                                if let Some(f) = s.from {
                                    t.push(a, 3 * f + c, -g[c]);
                                }
                            }
                        }
                    }
                }
            }
            ActuatorKind::Pneumatic { triangles } => {
                for tri in triangles {
                    let p = [node(x, tri[0]), node(x, tri[1]), node(x, tri[2])];
                    let d = oriented_area_derivative(p);
                    match side {
                        DerivativeSide::TransposeTimesLambda => {
                            for k in 0..3 {
                                let b = d[k] * (vec[a] / 3.0);
                                for &i in tri {
                                    t.push_block(i, tri[k], &b);
                                }
                            }
                        }
                        DerivativeSide::TimesVector => {
                            let w = (node(vec, tri[0]) + node(vec, tri[1]) + node(vec, tri[2])) / 3.0;
                            for k in 0..3 {
                                let g = d[k].transpose() * w;
                                for c in 0..3 {
                                    t.push(a, 3 * tri[k] + c, g[c]);
                                }
                            }
                        }
                    }
                }
            }
            ActuatorKind::Servo { .. } => {}
        }
    }
    Ok(t.to_csr())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(p: &[[f64; 3]]) -> DVec {
        DVec::from_iterator(3 * p.len(), p.iter().flatten().copied())
    }

    fn fd_check(specs: &[ActuatorSpec], x: &DVec, vec: &DVec, side: DerivativeSide) {
        let d = actuation_jacobian_vec_derivative(specs, x, vec, side).unwrap().to_dense();
        let eval = |x: &DVec| {
            let h = actuation_jacobian(specs, x).unwrap();
            match side {
                DerivativeSide::TransposeTimesLambda => h.tr_mul_vec(vec),
                DerivativeSide::TimesVector => h.mul_vec(vec),
            }
        };
        for j in 0..x.len() {
            let e = 1e-6;
            let mut xp = x.clone();
            xp[j] += e;
            let mut xm = x.clone();
            xm[j] -= e;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * e);
            let err = (&fd - d.column(j)).amax();
            assert!(err <= 1e-6 * fd.amax().max(1.0), "col {j}: {err}");
        }
    }

    #[test]
    fn two_node_cable_row() {
        let x = pts(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let h = actuation_jacobian(&[ActuatorSpec::cable(vec![0, 1], (0.0, 1.0))], &x).unwrap().to_dense();
        assert_eq!(h.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn cable_rows_balance_and_are_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DVec::from_fn(15, |_, _| rng.gen::<f64>());
        let specs = [ActuatorSpec::cable(vec![0, 2, 4, 1], (0.0, 1.0))];
        let h = actuation_jacobian(&specs, &x).unwrap();
        let f = h.tr_mul_vec(&DVec::from_element(1, 1.0));
        for c in 0..3 {
            let total: f64 = (0..5).map(|i| f[3 * i + c]).sum();
            assert!(total.abs() < 1e-14);
        }
        let h2 = actuation_jacobian(&specs, &(&x * 7.5)).unwrap();
        assert!((h2.to_dense() - h.to_dense()).amax() < 1e-14);
    }

    #[test]
    fn closed_cavity_rows_sum_to_zero() {
        // unit cube split into 12 outward triangles
        let mut corners = Vec::new();
        for i in 0..8 {
            corners.push([(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]);
        }
        let x = pts(&corners);
        let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
        let tris: Vec<[usize; 3]> = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
        let h = actuation_jacobian(&[ActuatorSpec::pneumatic(tris.clone(), (0.0, 1e5))], &x).unwrap().to_dense();
        for c in 0..3 {
            let total: f64 = (0..8).map(|i| h[(0, 3 * i + c)]).sum();
            assert!(total.abs() < 1e-14);
        }
        // per-node oracle: one third of the incident triangle areas
        for i in 0..8 {
            let mut expect = Vec3::zeros();
            for t in tris.iter().filter(|t| t.contains(&i)) {
                let p: Vec<Vec3> = t.iter().map(|&k| Vec3::from(corners[k])).collect();
                let n = (p[1] - p[0]).cross(&(p[2] - p[0]));
                expect += n / 6.0;
            }
            for c in 0..3 {
                assert!((h[(0, 3 * i + c)] - expect[c]).abs() < 1e-14);
            }
        }
        // outward orientation: node 7 = (1,1,1) is pushed outward
        assert!(h[(0, 21)] > 0.0 && h[(0, 22)] > 0.0 && h[(0, 23)] > 0.0);
    }

    #[test]
    fn servo_derivative_is_zero() {
        let x = pts(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let s = [ActuatorSpec::servo(1, Vec3::z(), (-1.0, 1.0))];
        let d = actuation_jacobian_vec_derivative(&s, &x, &DVec::from_element(1, 2.0), DerivativeSide::TransposeTimesLambda)
            .unwrap();
        assert_eq!(d.max_abs(), 0.0);
        let h = actuation_jacobian(&s, &x).unwrap();
        assert_eq!(h.get(0, 5), 1.0);
    }

    #[test]
    fn derivatives_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DVec::from_fn(18, |_, _| rng.gen::<f64>());
        let specs = vec![
            ActuatorSpec::cable(vec![0, 1], (0.0, 1.0)),
            ActuatorSpec::anchored_cable(Vec3::new(-1.0, 0.2, 0.1), vec![2, 3, 5], (0.0, 1.0)),
            ActuatorSpec::pneumatic(vec![[0, 1, 2], [1, 3, 4], [2, 4, 5]], (0.0, 1.0)),
            ActuatorSpec::servo(4, Vec3::new(0.6, 0.0, 0.8), (0.0, 1.0)),
        ];
        let lam = DVec::from_vec(vec![0.7, -1.3, 2.1, 0.4]);
        fd_check(&specs, &x, &lam, DerivativeSide::TransposeTimesLambda);
        let v = DVec::from_fn(18, |_, _| rng.gen::<f64>() - 0.5);
        fd_check(&specs, &x, &v, DerivativeSide::TimesVector);
    }

    #[test]
    fn triangle_area_derivative_matches_fd() {
        let p = [Vec3::new(0.1, 0.2, 0.0), Vec3::new(1.0, 0.3, 0.2), Vec3::new(0.4, 1.1, -0.3)];
        let d = oriented_area_derivative(p);
        for k in 0..3 {
            for c in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[k][c] += 1e-6;
                pm[k][c] -= 1e-6;
                let fd = (oriented_area(&pp[0], &pp[1], &pp[2]) - oriented_area(&pm[0], &pm[1], &pm[2])) / 2e-6;
                assert!((fd - d[k].column(c)).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_and_invalid_specs() {
        let x = pts(&[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert!(matches!(
            actuation_jacobian(&[ActuatorSpec::cable(vec![0, 1], (0.0, 1.0))], &x),
            Err(Error::DegenerateSegment { actuator: 0, segment: 0 })
        ));
        assert!(ActuatorSpec::cable(vec![0], (0.0, 1.0)).validate(2).is_err());
        assert!(ActuatorSpec::cable(vec![0, 1], (1.0, 0.0)).validate(2).is_err());
        assert!(ActuatorSpec::servo(0, Vec3::new(1.0, 1.0, 0.0), (0.0, 1.0)).validate(2).is_err());
        assert!(ActuatorSpec::cable(vec![0, 5], (0.0, 1.0)).validate(2).is_err());
    }
}
