//! Contact detection between tetrahedral bodies and static convex obstacles,
//! contact frames, the contact Jacobian `H_c`, and its derivatives.
//!
//! Narrowphase runs GJK between surface tets and obstacles (or surface tets of
//! other bodies). A pair closer than `margin` yields one contact at its witness
//! point. When both sides present parallel features (face/edge against
//! face/edge) the witness is not unique, so the contact is replaced by one
//! node contact per supporting vertex of the first side.
//!
//! Box obstacles are rounded: GJK runs against a core box shrunk by the
//! rounding radius and the radius is subtracted from the distance, which keeps
//! a valid witness for penetrations shallower than the radius.

pub mod gjk;
pub mod smoothing;

use alloc::vec::Vec;
use core::cmp::Ordering;

use nalgebra::DMatrix;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, DVec, Mat3, Triplets, Vec3};
use crate::mesh::TetMesh;
use gjk::{witness_derivative, Witness, WitnessDerivative};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// half-space below the plane through the origin with normal `+z` (local frame)
    Plane,
    /// rounded box; `rounding` is the corner radius (m)
    Box { half_extents: Vec3, rounding: f64 },
    Sphere { radius: f64 },
}

/// Static convex obstacle posed by `rotation` and `translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub shape: Shape,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub friction: f64,
}

impl Obstacle {
    pub fn plane(point: Vec3, normal: Vec3, friction: f64) -> Self {
        let n = normal.normalize();
        let z = Vec3::z();
        let axis = z.cross(&n);
        let rotation = if axis.norm() < 1e-15 {
            if n.z > 0.0 { Mat3::identity() } else { Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0)) }
        } else {
            nalgebra::Rotation3::rotation_between(&z, &n).expect("non-parallel").into_inner()
        };
        Self { shape: Shape::Plane, rotation, translation: point, friction }
    }

    /// Axis-aligned box with default rounding of a quarter of the smallest half extent.
    pub fn cuboid(center: Vec3, half_extents: Vec3, friction: f64) -> Self {
        Self {
            shape: Shape::Box { half_extents, rounding: 0.25 * half_extents.min() },
            rotation: Mat3::identity(),
            translation: center,
            friction,
        }
    }

    pub fn sphere(center: Vec3, radius: f64, friction: f64) -> Self {
        Self { shape: Shape::Sphere { radius }, rotation: Mat3::identity(), translation: center, friction }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.shape {
            Shape::Plane => true,
            Shape::Box { half_extents, rounding } => {
                half_extents.min() > 0.0 && rounding >= 0.0 && rounding <= half_extents.min()
            }
            Shape::Sphere { radius } => radius > 0.0,
        };
        let rot_ok = (self.rotation.transpose() * self.rotation - Mat3::identity()).amax() < 1e-9
            && self.rotation.determinant() > 0.0;
        if ok && rot_ok && self.friction >= 0.0 && self.translation.iter().all(|c| c.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(alloc::format!("invalid obstacle {self:?}")))
        }
    }

    pub fn plane_normal(&self) -> Vec3 {
        self.rotation * Vec3::z()
    }

    /// Core point set and skin radius used by GJK.
    pub fn core(&self) -> (Vec<Vec3>, f64) {
        match self.shape {
            Shape::Plane => (Vec::new(), 0.0),
            Shape::Sphere { radius } => (alloc::vec![self.translation], radius),
            Shape::Box { half_extents, rounding } => {
                let h = half_extents - Vec3::repeat(rounding);
                let pts = (0..8)
                    .map(|k| {
                        let s = Vec3::new(
                            if k & 1 == 0 { -1.0 } else { 1.0 },
                            if k & 2 == 0 { -1.0 } else { 1.0 },
                            if k & 4 == 0 { -1.0 } else { 1.0 },
                        );
                        self.translation + self.rotation * h.component_mul(&s)
                    })
                    .collect();
                (pts, rounding)
            }
        }
    }

    fn aabb(&self) -> Option<(Vec3, Vec3)> {
        match self.shape {
            Shape::Plane => None,
            _ => {
                let (pts, skin) = self.core();
                Some(bounds(&pts, skin))
            }
        }
    }

    /// Signed distance from a point to the obstacle surface.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        match self.shape {
            Shape::Plane => self.plane_normal().dot(&(p - self.translation)),
            Shape::Sphere { radius } => (p - self.translation).norm() - radius,
            Shape::Box { half_extents, rounding } => {
                let local = self.rotation.transpose() * (p - self.translation);
                let q = local.abs() - (half_extents - Vec3::repeat(rounding));
                let outside = q.map(|c| c.max(0.0)).norm();
                let inside = q.max().min(0.0);
                outside + inside - rounding
            }
        }
    }
}

fn bounds(pts: &[Vec3], pad: f64) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo - Vec3::repeat(pad), hi + Vec3::repeat(pad))
}

fn overlaps(a: &(Vec3, Vec3), b: &(Vec3, Vec3)) -> bool {
    (0..3).all(|c| a.0[c] <= b.1[c] && b.0[c] <= a.1[c])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionParams {
    /// contacts are created for gaps up to this distance (m)
    pub margin: f64,
    /// friction between bodies
    pub body_friction: f64,
    pub self_collision: bool,
    /// Gumbel temperature relative to the pair diameter
    pub smoothing: f64,
    /// relative tolerance for tied support vertices
    pub tie_tolerance: f64,
    pub gjk_tolerance: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            margin: 1e-3,
            body_friction: 0.5,
            self_collision: false,
            smoothing: 1e-4,
            tie_tolerance: 1e-3,
            gjk_tolerance: gjk::DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Counterpart {
    Obstacle(usize),
    Body(usize),
}

/// Discrete identity of a contact, used to detect contact-set changes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContactKey {
    pub body: usize,
    pub other: Counterpart,
    pub nodes_a: Vec<usize>,
    pub nodes_b: Vec<usize>,
}

/// Derivative of a contact's geometry with respect to the involved nodes.
#[derive(Debug, Clone, PartialEq)]
struct ContactDerivative {
    nodes: Vec<usize>,
    /// ∂x*/∂(nodes): 3 × 3·len
    separation: DMatrix<f64>,
    separation_norm: f64,
    fixed_normal: bool,
    /// rows aligned with `attach_a`
    weights_a: DMatrix<f64>,
    weights_b: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactPoint {
    pub body: usize,
    pub other: Counterpart,
    /// point on the first side (m)
    pub point: Vec3,
    /// unit normal pointing from the counterpart towards `body`
    pub normal: Vec3,
    /// columns `(t1, t2, n)`
    pub frame: Mat3,
    /// signed gap (m)
    pub gap: f64,
    pub friction: f64,
    pub attach_a: Vec<(usize, f64)>,
    pub attach_b: Vec<(usize, f64)>,
    /// derivative computed from smoothed supports
    pub smoothed: bool,
    pub key: ContactKey,
    attach_positions: Vec<Vec3>,
    derivative: ContactDerivative,
}

/// Deterministic tangent basis: `t1 ∥ a × n` with `a` the axis of the
/// smallest normal component, `t2 = n × t1`.
pub fn contact_frame(n: &Vec3) -> Mat3 {
    let a = Vec3::ith(n.iamin(), 1.0);
    let t1 = a.cross(n).normalize();
    let t2 = n.cross(&t1);
    Mat3::from_columns(&[t1, t2, *n])
}

/// `(dt1, dt2)` for a normal perturbation `dn` (the axis choice is locally constant).
pub fn frame_derivative(n: &Vec3, dn: &Vec3) -> (Vec3, Vec3) {
    let a = Vec3::ith(n.iamin(), 1.0);
    let q = a.cross(n);
    let qn = q.norm();
    let t1 = q / qn;
    let dq = a.cross(dn);
    let dt1 = (dq - t1 * t1.dot(&dq)) / qn;
    let dt2 = dn.cross(&t1) + n.cross(&dt1);
    (dt1, dt2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactSet {
    pub contacts: Vec<ContactPoint>,
    pub jacobian: CsrMatrix,
    /// colliding pairs without a witness (penetration deeper than the skin)
    pub overlaps: usize,
}

impl ContactSet {
    pub fn empty(dof_count: usize) -> Self {
        Self { contacts: Vec::new(), jacobian: CsrMatrix::zeros(0, dof_count), overlaps: 0 }
    }

    pub fn len(&self) -> usize {
        self.contacts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contacts.is_empty()
    }

    pub fn frictions(&self) -> Vec<f64> {
        self.contacts.iter().map(|c| c.friction).collect()
    }

    pub fn keys(&self) -> Vec<ContactKey> {
        self.contacts.iter().map(|c| c.key.clone()).collect()
    }

    pub fn dof_count(&self) -> usize {
        self.jacobian.ncols()
    }

    /// Contact forces mapped to nodes, `H_cᵀ λ` (3n).
    pub fn nodal_forces(&self, lambda: &DVec) -> DVec {
        self.jacobian.tr_mul_vec(lambda)
    }

    /// `∂(H_c v)/∂x`, 3n_c × 3n.
    pub fn jacobian_vec_derivative(&self, v: &DVec) -> CsrMatrix {
        let n = self.dof_count();
        let mut t = Triplets::new(3 * self.len(), n);
        for (k, c) in self.contacts.iter().enumerate() {
            let d = &c.derivative;
            let node_v = |i: usize| Vec3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
            let mut u = Vec3::zeros();
            for &(i, w) in &c.attach_a {
                u += node_v(i) * w;
            }
            for &(i, w) in &c.attach_b {
                u -= node_v(i) * w;
            }
            for (slot, &node) in d.nodes.iter().enumerate() {
                for comp in 0..3 {
                    let col = 3 * slot + comp;
                    let (dt1, dt2, dn) = c.frame_perturbation(col);
                    let mut du = Vec3::zeros();
                    for (r, &(i, _)) in c.attach_a.iter().enumerate() {
                        du += node_v(i) * d.weights_a[(r, col)];
                    }
                    for (r, &(i, _)) in c.attach_b.iter().enumerate() {
                        du -= node_v(i) * d.weights_b[(r, col)];
                    }
                    let axes = [c.frame.column(0).into_owned(), c.frame.column(1).into_owned(), c.normal];
                    for (r, de) in [dt1, dt2, dn].iter().enumerate() {
                        let val = de.dot(&u) + axes[r].dot(&du);
                        if val != 0.0 {
                            t.push(3 * k + r, 3 * node + comp, val);
                        }
                    }
                }
            }
        }
        t.to_csr()
    }

    /// `∂(H_cᵀ λ)/∂x`, 3n × 3n.
    pub fn jacobian_transpose_vec_derivative(&self, lambda: &DVec) -> CsrMatrix {
        let n = self.dof_count();
        let mut t = Triplets::new(n, n);
        for (k, c) in self.contacts.iter().enumerate() {
            let l = Vec3::new(lambda[3 * k], lambda[3 * k + 1], lambda[3 * k + 2]);
            if l.norm_squared() == 0.0 {
                continue;
            }
            let f = c.frame * l;
            let d = &c.derivative;
            for (slot, &node) in d.nodes.iter().enumerate() {
                for comp in 0..3 {
                    let col = 3 * slot + comp;
                    let (dt1, dt2, dn) = c.frame_perturbation(col);
                    let df = dt1 * l.x + dt2 * l.y + dn * l.z;
                    for (r, &(i, w)) in c.attach_a.iter().enumerate() {
                        let val = f * d.weights_a[(r, col)] + df * w;
                        for row in 0..3 {
                            t.push(3 * i + row, 3 * node + comp, val[row]);
                        }
                    }
                    for (r, &(i, w)) in c.attach_b.iter().enumerate() {
                        let val = -(f * d.weights_b[(r, col)] + df * w);
                        for row in 0..3 {
                            t.push(3 * i + row, 3 * node + comp, val[row]);
                        }
                    }
                }
            }
        }
        t.to_csr()
    }
}

impl ContactPoint {
    fn frame_perturbation(&self, col: usize) -> (Vec3, Vec3, Vec3) {
        let d = &self.derivative;
        if d.fixed_normal {
            return (Vec3::zeros(), Vec3::zeros(), Vec3::zeros());
        }
        let dx: Vec3 = d.separation.column(col).into_owned().fixed_rows::<3>(0).into_owned();
        let n = self.normal;
        let dn = (dx - n * n.dot(&dx)) / d.separation_norm;
        let (dt1, dt2) = frame_derivative(&n, &dn);
        (dt1, dt2, dn)
    }

    /// Derivative of the contact point and normal with respect to the involved
    /// nodes: `(nodes, ∂c, ∂n)` with 3 × 3·len matrices.
    pub fn geometry_derivative(&self) -> (Vec<usize>, DMatrix<f64>, DMatrix<f64>) {
        let d = &self.derivative;
        let ncol = 3 * d.nodes.len();
        let mut dc = DMatrix::zeros(3, ncol);
        let mut dn = DMatrix::zeros(3, ncol);
        for col in 0..ncol {
            let (slot, comp) = (col / 3, col % 3);
            let mut v = Vec3::zeros();
            // contact point c = Σ w_i x_i over the first side
            for (r, &(i, w)) in self.attach_a.iter().enumerate() {
                v += self.attach_positions[r] * d.weights_a[(r, col)];
                if i == d.nodes[slot] {
                    v[comp] += w;
                }
            }
            dc.set_column(col, &v);
            dn.set_column(col, &self.frame_perturbation(col).2);
        }
        (d.nodes.clone(), dc, dn)
    }
}

fn tet_points(x: &DVec, tet: &[usize; 4]) -> [Vec3; 4] {
    tet.map(|i| node(x, i))
}

fn node(x: &DVec, i: usize) -> Vec3 {
    Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2])
}

fn max_edge(p: &[Vec3]) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            m = m.max((p[i] - p[j]).norm());
        }
    }
    m
}

fn tied_min(pts: &[Vec3], n: &Vec3, tol: f64) -> Vec<usize> {
    let s: Vec<f64> = pts.iter().map(|p| p.dot(n)).collect();
    let min = s.iter().copied().fold(f64::INFINITY, f64::min);
    (0..pts.len()).filter(|&k| s[k] <= min + tol).collect()
}

/// One shape of a narrowphase query: positions plus the global node of each
/// vertex (`None` for static obstacle vertices).
struct Side<'a> {
    points: &'a [Vec3],
    nodes: Vec<Option<usize>>,
}

fn build_contact(
    a: &Side,
    b: &Side,
    wit: &Witness,
    skin: f64,
    body: usize,
    other: Counterpart,
    friction: f64,
    params: &DetectionParams,
) -> Result<ContactPoint> {
    let dist = wit.separation.norm();
    let normal = wit.separation / dist;
    let deriv = match witness_derivative(a.points, b.points, wit) {
        Ok(d) => (d, false),
        Err(Error::SingularSystem(_)) => {
            let all: Vec<Vec3> = a.points.iter().chain(b.points.iter()).copied().collect();
            let tau = params.smoothing * max_edge(&all).max(1e-12);
            (smoothing::smoothed_witness_derivative(a.points, b.points, wit, tau)?, true)
        }
        Err(e) => return Err(e),
    };
    let (wd, smoothed): (WitnessDerivative, bool) = deriv;
    let wa = wit.weights_a(a.points.len());
    let wb = wit.weights_b(b.points.len());
    // involved nodes: every dynamic vertex of either side
    let mut nodes: Vec<usize> = Vec::new();
    let mut col_of_vertex: Vec<Option<usize>> = Vec::new();
    for nd in a.nodes.iter().chain(b.nodes.iter()) {
        match nd {
            Some(g) => {
                let slot = nodes.iter().position(|x| x == g).unwrap_or_else(|| {
                    nodes.push(*g);
                    nodes.len() - 1
                });
                col_of_vertex.push(Some(slot));
            }
            None => col_of_vertex.push(None),
        }
    }
    let ncol = 3 * nodes.len();
    let remap = |src: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(src.nrows(), ncol);
        for (v, slot) in col_of_vertex.iter().enumerate() {
            if let Some(s) = slot {
                for c in 0..3 {
                    for r in 0..src.nrows() {
                        out[(r, 3 * s + c)] += src[(r, 3 * v + c)];
                    }
                }
            }
        }
        out
    };
    let sep = remap(&wd.separation);
    let dwa_all = remap(&wd.weights_a);
    let dwb_all = remap(&wd.weights_b);
    let keep = |w: &[f64], dw: &DMatrix<f64>, side: &Side| -> (Vec<(usize, f64)>, Vec<usize>) {
        let mut att = Vec::new();
        let mut rows = Vec::new();
        for (k, nd) in side.nodes.iter().enumerate() {
            let Some(g) = nd else { continue };
            if w[k] > 1e-14 || dw.row(k).amax() > 0.0 {
                att.push((*g, w[k]));
                rows.push(k);
            }
        }
        (att, rows)
    };
    let (attach_a, rows_a) = keep(&wa, &dwa_all, a);
    let (attach_b, rows_b) = keep(&wb, &dwb_all, b);
    let weights_a = DMatrix::from_fn(rows_a.len(), ncol, |r, c| dwa_all[(rows_a[r], c)]);
    let weights_b = DMatrix::from_fn(rows_b.len(), ncol, |r, c| dwb_all[(rows_b[r], c)]);
    let support = |w: &[f64], side: &Side| -> Vec<usize> {
        let mut v: Vec<usize> = (0..w.len())
            .filter(|&k| w[k] > 1e-12)
            .filter_map(|k| side.nodes[k])
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let key = ContactKey {
        body,
        other,
        nodes_a: support(&wa, a),
        nodes_b: support(&wb, b),
    };
    let attach_positions = attach_a.iter().map(|&(g, _)| {
        let k = a.nodes.iter().position(|n| *n == Some(g)).expect("attached node on side a");
        a.points[k]
    });
    Ok(ContactPoint {
        body,
        other,
        point: wit.p1,
        normal,
        frame: contact_frame(&normal),
        gap: dist - skin,
        friction,
        attach_positions: attach_positions.collect(),
        attach_a,
        attach_b,
        smoothed,
        key,
        derivative: ContactDerivative {
            nodes,
            separation: sep,
            separation_norm: dist,
            fixed_normal: false,
            weights_a,
            weights_b,
        },
    })
}

fn plane_contact(ob: &Obstacle, index: usize, node_id: usize, body: usize, p: Vec3) -> ContactPoint {
    let n = ob.plane_normal();
    let gap = n.dot(&(p - ob.translation));
    ContactPoint {
        body,
        other: Counterpart::Obstacle(index),
        point: p,
        normal: n,
        frame: contact_frame(&n),
        gap,
        friction: ob.friction,
        attach_a: alloc::vec![(node_id, 1.0)],
        attach_b: Vec::new(),
        smoothed: false,
        key: ContactKey {
            body,
            other: Counterpart::Obstacle(index),
            nodes_a: alloc::vec![node_id],
            nodes_b: Vec::new(),
        },
        attach_positions: alloc::vec![p],
        derivative: ContactDerivative {
            nodes: alloc::vec![node_id],
            separation: DMatrix::from_fn(3, 3, |r, c| n[r] * n[c]),
            separation_norm: gap.abs().max(f64::MIN_POSITIVE),
            fixed_normal: true,
            weights_a: DMatrix::zeros(1, 3),
            weights_b: DMatrix::zeros(0, 3),
        },
    }
}

struct Detector<'a> {
    mesh: &'a TetMesh,
    x: &'a DVec,
    params: &'a DetectionParams,
    node_body: Vec<usize>,
    found: alloc::collections::BTreeMap<ContactKey, ContactPoint>,
    overlaps: usize,
}

impl Detector<'_> {
    fn push(&mut self, c: ContactPoint) {
        if c.gap > self.params.margin {
            return;
        }
        match self.found.get(&c.key) {
            Some(old) if old.gap.partial_cmp(&c.gap) != Some(Ordering::Greater) => {}
            _ => {
                self.found.insert(c.key.clone(), c);
            }
        }
    }

    fn node_side(&self, i: usize) -> ([Vec3; 1], Vec<Option<usize>>) {
        ([node(self.x, i)], alloc::vec![Some(i)])
    }

    fn point_vs_obstacle(&mut self, i: usize, index: usize, ob: &Obstacle, core: &[Vec3], skin: f64) -> Result<()> {
        let (pts, nodes) = self.node_side(i);
        let wit = gjk::gjk(&pts, core, self.params.gjk_tolerance)?;
        if wit.colliding {
            self.overlaps += 1;
            return Ok(());
        }
        if wit.separation.norm() - skin > self.params.margin {
            return Ok(());
        }
        let a = Side { points: &pts, nodes };
        let b = Side { points: core, nodes: alloc::vec![None; core.len()] };
        let c = build_contact(&a, &b, &wit, skin, self.node_body[i], Counterpart::Obstacle(index), ob.friction, self.params)?;
        self.push(c);
        Ok(())
    }

    fn tet_vs_obstacle(&mut self, e: usize, index: usize, ob: &Obstacle, core: &[Vec3], skin: f64) -> Result<()> {
        let tet = self.mesh.tets()[e];
        let pts = tet_points(self.x, &tet);
        let wit = gjk::gjk(&pts, core, self.params.gjk_tolerance)?;
        if wit.colliding {
            self.overlaps += 1;
            return Ok(());
        }
        let dist = wit.separation.norm();
        if dist - skin > self.params.margin {
            return Ok(());
        }
        let n = wit.separation / dist;
        let tol = self.params.tie_tolerance * max_edge(&pts);
        let tied_a = tied_min(&pts, &n, tol);
        let tied_b = tied_min(core, &-n, tol);
        if tied_a.len() >= 2 && tied_b.len() >= 2 {
            for k in tied_a {
                self.point_vs_obstacle(tet[k], index, ob, core, skin)?;
            }
            return Ok(());
        }
        let a = Side { points: &pts, nodes: tet.iter().map(|&i| Some(i)).collect() };
        let b = Side { points: core, nodes: alloc::vec![None; core.len()] };
        let body = self.mesh.tet_body()[e];
        let c = build_contact(&a, &b, &wit, skin, body, Counterpart::Obstacle(index), ob.friction, self.params)?;
        self.push(c);
        Ok(())
    }

    fn tet_vs_tet(&mut self, ea: usize, eb: usize) -> Result<()> {
        let (ta, tb) = (self.mesh.tets()[ea], self.mesh.tets()[eb]);
        let (pa, pb) = (tet_points(self.x, &ta), tet_points(self.x, &tb));
        let wit = gjk::gjk(&pa, &pb, self.params.gjk_tolerance)?;
        if wit.colliding {
            self.overlaps += 1;
            return Ok(());
        }
        let dist = wit.separation.norm();
        if dist > self.params.margin {
            return Ok(());
        }
        let (body_a, body_b) = (self.mesh.tet_body()[ea], self.mesh.tet_body()[eb]);
        let n = wit.separation / dist;
        let tol = self.params.tie_tolerance * max_edge(&pa).max(max_edge(&pb));
        let tied_a = tied_min(&pa, &n, tol);
        let tied_b = tied_min(&pb, &-n, tol);
        let b = Side { points: &pb, nodes: tb.iter().map(|&i| Some(i)).collect() };
        let friction = self.params.body_friction;
        if tied_a.len() >= 2 && tied_b.len() >= 2 {
            for k in tied_a {
                let (pts, nodes) = self.node_side(ta[k]);
                let w = gjk::gjk(&pts, &pb, self.params.gjk_tolerance)?;
                if w.colliding || w.separation.norm() > self.params.margin {
                    continue;
                }
                let a = Side { points: &pts, nodes };
                let c = build_contact(&a, &b, &w, 0.0, body_a, Counterpart::Body(body_b), friction, self.params)?;
                self.push(c);
            }
            return Ok(());
        }
        let a = Side { points: &pa, nodes: ta.iter().map(|&i| Some(i)).collect() };
        let c = build_contact(&a, &b, &wit, 0.0, body_a, Counterpart::Body(body_b), friction, self.params)?;
        self.push(c);
        Ok(())
    }
}

/// Tets owning at least one boundary face.
pub fn surface_tets(mesh: &TetMesh) -> Vec<usize> {
    let mut faces = alloc::collections::BTreeSet::new();
    for f in mesh.boundary_triangles() {
        let mut k = *f;
        k.sort_unstable();
        faces.insert(k);
    }
    const FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]];
    (0..mesh.tet_count())
        .filter(|&e| {
            let t = mesh.tets()[e];
            FACES.iter().any(|f| {
                let mut k = [t[f[0]], t[f[1]], t[f[2]]];
                k.sort_unstable();
                faces.contains(&k)
            })
        })
        .collect()
}

/// Contacts of `mesh` at positions `x` against `obstacles` and between bodies.
pub fn detect(mesh: &TetMesh, x: &DVec, obstacles: &[Obstacle], params: &DetectionParams) -> Result<ContactSet> {
    if !(params.margin >= 0.0) || !(params.smoothing > 0.0) || !(params.tie_tolerance >= 0.0) {
        return Err(Error::InvalidParameter(alloc::format!("invalid detection parameters {params:?}")));
    }
    if x.len() != mesh.dof_count() {
        return Err(Error::DimensionMismatch { what: "positions", expected: mesh.dof_count(), found: x.len() });
    }
    let mut node_body = alloc::vec![0; mesh.node_count()];
    for (e, t) in mesh.tets().iter().enumerate() {
        for &i in t {
            node_body[i] = mesh.tet_body()[e];
        }
    }
    let mut det = Detector {
        mesh,
        x,
        params,
        node_body,
        found: alloc::collections::BTreeMap::new(),
        overlaps: 0,
    };
    let surface = mesh.surface_nodes();
    let stets = surface_tets(mesh);
    let margin = params.margin;
    let tet_boxes: Vec<(Vec3, Vec3)> = stets
        .iter()
        .map(|&e| bounds(&tet_points(x, &mesh.tets()[e]), margin))
        .collect();
    for (index, ob) in obstacles.iter().enumerate() {
        ob.validate()?;
        match ob.shape {
            Shape::Plane => {
                for i in (0..mesh.node_count()).filter(|&i| surface[i]) {
                    let c = plane_contact(ob, index, i, det.node_body[i], node(x, i));
                    det.push(c);
                }
            }
            _ => {
                let (core, skin) = ob.core();
                let ob_box = ob.aabb().expect("bounded obstacle");
                for (k, &e) in stets.iter().enumerate() {
                    if overlaps(&tet_boxes[k], &ob_box) {
                        det.tet_vs_obstacle(e, index, ob, &core, skin)?;
                    }
                }
            }
        }
    }
    for (ka, &ea) in stets.iter().enumerate() {
        for (kb, &eb) in stets.iter().enumerate().skip(ka + 1) {
            let (ba, bb) = (mesh.tet_body()[ea], mesh.tet_body()[eb]);
            if !overlaps(&tet_boxes[ka], &tet_boxes[kb]) {
                continue;
            }
            if ba != bb {
                let (first, second) = if ba < bb { (ea, eb) } else { (eb, ea) };
                det.tet_vs_tet(first, second)?;
            } else if params.self_collision {
                let (ta, tb) = (mesh.tets()[ea], mesh.tets()[eb]);
                if ta.iter().any(|i| tb.contains(i)) {
                    continue;
                }
                det.tet_vs_tet(ea, eb)?;
            }
        }
    }
    let overlaps = det.overlaps;
    let contacts: Vec<ContactPoint> = det.found.into_values().collect();
    let jacobian = contact_jacobian(&contacts, mesh.dof_count());
    Ok(ContactSet { contacts, jacobian, overlaps })
}

/// `H_c`: rows `(t1, t2, n)` per contact, weighted by the attachments
/// (positive on the first side, negative on the counterpart).
pub fn contact_jacobian(contacts: &[ContactPoint], dof_count: usize) -> CsrMatrix {
    let mut t = Triplets::with_capacity(3 * contacts.len(), dof_count, 9 * 8 * contacts.len());
    for (k, c) in contacts.iter().enumerate() {
        for r in 0..3 {
            let axis = c.frame.column(r);
            for &(i, w) in &c.attach_a {
                for comp in 0..3 {
                    t.push(3 * k + r, 3 * i + comp, w * axis[comp]);
                }
            }
            for &(i, w) in &c.attach_b {
                for comp in 0..3 {
                    t.push(3 * k + r, 3 * i + comp, -w * axis[comp]);
                }
            }
        }
    }
    t.to_csr()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_beam, transformed};
    use alloc::vec;

    fn beam_at(offset: Vec3) -> TetMesh {
        let m = generate_beam(Vec3::new(0.2, 0.05, 0.05), [4, 1, 1]).unwrap();
        transformed(&m, &Mat3::identity(), &offset).unwrap()
    }

    fn params() -> DetectionParams {
        DetectionParams { margin: 2e-3, ..Default::default() }
    }

    #[test]
    fn far_apart_is_empty() {
        let mesh = beam_at(Vec3::new(0.0, 0.0, 1.0));
        let obs = [Obstacle::cuboid(Vec3::zeros(), Vec3::repeat(0.1), 0.5), Obstacle::sphere(Vec3::new(2.0, 0.0, 0.0), 0.1, 0.3)];
        let set = detect(&mesh, &mesh.rest_vector(), &obs, &params()).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.jacobian.nrows(), 0);
    }

    #[test]
    fn beam_on_plane_has_bottom_node_contacts() {
        let mesh = beam_at(Vec3::zeros());
        let obs = [Obstacle::plane(Vec3::zeros(), Vec3::z(), 0.5)];
        let set = detect(&mesh, &mesh.rest_vector(), &obs, &params()).unwrap();
        let bottom = mesh.rest_positions().iter().filter(|p| p.z == 0.0).count();
        assert_eq!(set.len(), bottom);
        for c in &set.contacts {
            assert!((c.frame.column(2) - Vec3::z()).norm() < 1e-15);
            assert_eq!(c.gap, 0.0);
        }
    }

    #[test]
    fn frames_are_orthonormal() {
        for n in [Vec3::z(), Vec3::new(0.3, -0.2, 0.9).normalize(), Vec3::new(-1.0, 1e-9, 0.0), Vec3::new(0.5, 0.5, 0.5).normalize()] {
            let f = contact_frame(&n);
            assert!((f.transpose() * f - Mat3::identity()).amax() < 1e-12);
            assert!((f.determinant() - 1.0).abs() < 1e-12);
            assert!((f.column(2) - n).norm() < 1e-15);
        }
    }

    #[test]
    fn frame_derivative_matches_fd() {
        let n = Vec3::new(0.3, -0.2, 0.9).normalize();
        let dn0 = Vec3::new(0.1, 0.4, -0.2);
        let dn = dn0 - n * n.dot(&dn0);
        let h = 1e-7;
        let fp = contact_frame(&(n + dn * h).normalize());
        let fm = contact_frame(&(n - dn * h).normalize());
        let (dt1, dt2) = frame_derivative(&n, &dn);
        assert!(((fp.column(0) - fm.column(0)) / (2.0 * h) - dt1).amax() < 1e-7);
        assert!(((fp.column(1) - fm.column(1)) / (2.0 * h) - dt2).amax() < 1e-7);
    }

    fn two_body_scene() -> (TetMesh, Vec<Obstacle>) {
        let a = beam_at(Vec3::new(0.0, 0.0, 0.0515));
        let b = generate_beam(Vec3::new(0.1, 0.1, 0.05), [2, 2, 1]).unwrap();
        let b = transformed(&b, &nalgebra::Rotation3::from_euler_angles(0.0, 0.0, 0.3).into_inner(), &Vec3::new(0.05, -0.02, 0.0))
            .unwrap();
        let mesh = TetMesh::concat(&[a, b]).unwrap();
        (mesh, vec![Obstacle::sphere(Vec3::new(0.12, 0.025, 0.13), 0.0295, 0.4)])
    }

    #[test]
    fn rigid_translation_maps_to_frame_components() {
        let (mesh, obs) = two_body_scene();
        let set = detect(&mesh, &mesh.rest_vector(), &obs, &params()).unwrap();
        assert!(set.len() > 2, "{}", set.len());
        let w = Vec3::new(0.3, -0.7, 0.2);
        let mut v = DVec::zeros(mesh.dof_count());
        let body0_nodes = mesh.tets().iter().zip(mesh.tet_body()).filter(|(_, &b)| b == 0).flat_map(|(t, _)| t.iter().copied());
        for i in body0_nodes {
            for c in 0..3 {
                v[3 * i + c] = w[c];
            }
        }
        let hv = set.jacobian.mul_vec(&v);
        for (k, c) in set.contacts.iter().enumerate() {
            let sign = if c.body == 0 { 1.0 } else if c.other == Counterpart::Body(0) { -1.0 } else { 0.0 };
            let expect = c.frame.transpose() * w * sign;
            for r in 0..3 {
                assert!((hv[3 * k + r] - expect[r]).abs() < 1e-12);
            }
        }
    }

    fn fd_check_derivatives(mesh: &TetMesh, x: &DVec, obs: &[Obstacle], p: &DetectionParams) {
        let set = detect(mesh, x, obs, p).unwrap();
        assert!(!set.is_empty());
        let n = mesh.dof_count();
        let v = DVec::from_fn(n, |i, _| ((i * 7 % 11) as f64 - 5.0) * 0.1);
        let lam = DVec::from_fn(3 * set.len(), |i, _| ((i * 5 % 7) as f64 - 3.0) * 0.2);
        let dhv = set.jacobian_vec_derivative(&v).to_dense();
        let dhl = set.jacobian_transpose_vec_derivative(&lam).to_dense();
        let h = 1e-7;
        let mut checked = 0;
        for j in 0..n {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += h;
            xm[j] -= h;
            let (sp, sm) = (detect(mesh, &xp, obs, p).unwrap(), detect(mesh, &xm, obs, p).unwrap());
            if sp.keys() != set.keys() || sm.keys() != set.keys() {
                continue;
            }
            checked += 1;
            let fd_hv = (sp.jacobian.mul_vec(&v) - sm.jacobian.mul_vec(&v)) / (2.0 * h);
            let fd_hl = (sp.jacobian.tr_mul_vec(&lam) - sm.jacobian.tr_mul_vec(&lam)) / (2.0 * h);
            assert!((fd_hv - dhv.column(j)).amax() < 1e-5 * (1.0 + dhv.amax()), "column {j}");
            assert!((fd_hl - dhl.column(j)).amax() < 1e-5 * (1.0 + dhl.amax()), "column {j}");
        }
        assert!(checked > n / 2);
    }

    #[test]
    fn jacobian_derivatives_match_fd_for_sphere_and_bodies() {
        let (mesh, obs) = two_body_scene();
        let mut x = mesh.rest_vector();
        for i in 0..x.len() {
            x[i] += 1e-4 * ((i as f64) * 0.37).sin();
        }
        fd_check_derivatives(&mesh, &x, &obs, &params());
    }

    #[test]
    fn jacobian_derivatives_match_fd_for_box() {
        let mesh = beam_at(Vec3::new(-0.05, 0.0, 0.1005));
        let rot = nalgebra::Rotation3::from_euler_angles(0.2, 0.1, 0.4).into_inner();
        let mut ob = Obstacle::cuboid(Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.1, 0.1, 0.1), 0.5);
        ob.rotation = rot;
        let x = mesh.rest_vector();
        let obs = [ob];
        let set = detect(&mesh, &x, &obs, &params()).unwrap();
        if set.is_empty() {
            // lower the beam onto the tilted box
            let shift = mesh.rest_positions().iter().map(|p| ob.signed_distance(p)).fold(f64::INFINITY, f64::min);
            let mut x2 = x.clone();
            for i in 0..mesh.node_count() {
                x2[3 * i + 2] -= shift - 1e-3;
            }
            fd_check_derivatives(&mesh, &x2, &obs, &params());
        } else {
            fd_check_derivatives(&mesh, &x, &obs, &params());
        }
    }

    #[test]
    fn zero_lambda_and_plane_give_zero_derivative() {
        let mesh = beam_at(Vec3::zeros());
        let obs = [Obstacle::plane(Vec3::zeros(), Vec3::z(), 0.5)];
        let set = detect(&mesh, &mesh.rest_vector(), &obs, &params()).unwrap();
        let lam = DVec::from_element(3 * set.len(), 1.0);
        assert_eq!(set.jacobian_transpose_vec_derivative(&lam).max_abs(), 0.0);
        assert_eq!(set.jacobian_vec_derivative(&DVec::from_element(mesh.dof_count(), 1.0)).max_abs(), 0.0);
        let (mesh, obs) = two_body_scene();
        let set = detect(&mesh, &mesh.rest_vector(), &obs, &params()).unwrap();
        assert_eq!(set.jacobian_transpose_vec_derivative(&DVec::zeros(3 * set.len())).max_abs(), 0.0);
    }

    #[test]
    fn signed_distance_of_rounded_box() {
        let ob = Obstacle::cuboid(Vec3::zeros(), Vec3::new(1.0, 2.0, 3.0), 0.0);
        assert!((ob.signed_distance(&Vec3::new(2.0, 0.0, 0.0)) - 1.0).abs() < 1e-14);
        assert!((ob.signed_distance(&Vec3::new(0.0, 0.0, 0.0)) + 1.0).abs() < 1e-14);
    }
}
