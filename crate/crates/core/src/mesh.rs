//! Tetrahedral meshes and their per-element rest-state geometry.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;


#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::{Mat3, Vec3};

/// Elements with `|V_e|` below this are rejected instead of regularized.
pub const DEGENERATE_VOLUME: f64 = 1e-18;

/// Rest geometry of a linear tetrahedral mesh. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TetMesh {
    rest_positions: Vec<Vec3>,
    tets: Vec<[usize; 4]>,
    volumes: Vec<f64>,
    gradients: Vec<[Vec3; 4]>,
    boundary: Vec<[usize; 3]>,
    tet_body: Vec<usize>,
}

/// Signed volume of the tetrahedron `(p0, p1, p2, p3)`.
pub fn signed_volume(p: &[Vec3; 4]) -> f64 {
    (p[1] - p[0]).dot(&(p[2] - p[0]).cross(&(p[3] - p[0]))) / 6.0
}

/// Shape-function gradients `∇N_i` of a linear tetrahedron and its signed volume.
///
/// The gradients are the rows of the inverse edge matrix `[p1-p0, p2-p0, p3-p0]`
/// for nodes 1..3, and `∇N_0 = -(∇N_1 + ∇N_2 + ∇N_3)`.
pub fn shape_gradients(p: &[Vec3; 4]) -> Result<([Vec3; 4], f64)> {
    let volume = signed_volume(p);
    if volume.abs() < DEGENERATE_VOLUME {
        return Err(Error::DegenerateElement { tet: 0, volume });
    }
    let dm = Mat3::from_columns(&[p[1] - p[0], p[2] - p[0], p[3] - p[0]]);
    let inv = dm
        .try_inverse()
        .ok_or(Error::DegenerateElement { tet: 0, volume })?;
    let g1: Vec3 = inv.row(0).transpose();
    let g2: Vec3 = inv.row(1).transpose();
    let g3: Vec3 = inv.row(2).transpose();
    Ok(([-(g1 + g2 + g3), g1, g2, g3], volume))
}

impl TetMesh {
    /// Validates and preprocesses a mesh. Negatively oriented elements are
    /// reordered (last two vertices swapped) so that every `V_e > 0`.
    pub fn new(rest_positions: Vec<Vec3>, tets: Vec<[usize; 4]>) -> Result<Self> {
        let body = vec![0; tets.len()];
        Self::with_bodies(rest_positions, tets, body)
    }

    pub fn with_bodies(
        rest_positions: Vec<Vec3>,
        mut tets: Vec<[usize; 4]>,
        tet_body: Vec<usize>,
    ) -> Result<Self> {
        if tets.is_empty() {
            return Err(Error::Parse("mesh has no tetrahedra".into()));
        }
        if tet_body.len() != tets.len() {
            return Err(Error::DimensionMismatch {
                what: "tet body ids",
                expected: tets.len(),
                found: tet_body.len(),
            });
        }
        let n = rest_positions.len();
        if let Some(p) = rest_positions.iter().find(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Parse(alloc::format!("non-finite node position {p:?}")));
        }
        let mut volumes = Vec::with_capacity(tets.len());
        let mut gradients = Vec::with_capacity(tets.len());
        for (e, tet) in tets.iter_mut().enumerate() {
            for &i in tet.iter() {
                if i >= n {
                    return Err(Error::IndexOutOfRange { index: i, len: n });
                }
            }
            let mut p = tet.map(|i| rest_positions[i]);
            if signed_volume(&p) < 0.0 {
                tet.swap(2, 3);
                p.swap(2, 3);
            }
            let (g, v) = shape_gradients(&p).map_err(|err| match err {
                Error::DegenerateElement { volume, .. } => Error::DegenerateElement { tet: e, volume },
                other => other,
            })?;
            volumes.push(v);
            gradients.push(g);
        }
        let boundary = boundary_faces(&rest_positions, &tets);
        Ok(Self {
            rest_positions,
            tets,
            volumes,
            gradients,
            boundary,
            tet_body,
        })
    }

    /// Concatenates meshes into one system; tets keep the index of their source mesh as body id.
    pub fn concat(parts: &[TetMesh]) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut tets = Vec::new();
        let mut body = Vec::new();
        for (b, m) in parts.iter().enumerate() {
            let off = nodes.len();
            nodes.extend_from_slice(&m.rest_positions);
            tets.extend(m.tets.iter().map(|t| t.map(|i| i + off)));
            body.extend(core::iter::repeat_n(b, m.tets.len()));
        }
        Self::with_bodies(nodes, tets, body)
    }

    pub fn node_count(&self) -> usize {
        self.rest_positions.len()
    }

    pub fn dof_count(&self) -> usize {
        3 * self.rest_positions.len()
    }

    pub fn tet_count(&self) -> usize {
        self.tets.len()
    }

    pub fn rest_positions(&self) -> &[Vec3] {
        &self.rest_positions
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn gradients(&self) -> &[[Vec3; 4]] {
        &self.gradients
    }

    pub fn boundary_triangles(&self) -> &[[usize; 3]] {
        &self.boundary
    }

    pub fn tet_body(&self) -> &[usize] {
        &self.tet_body
    }

    pub fn body_count(&self) -> usize {
        self.tet_body.iter().max().map_or(0, |b| b + 1)
    }

    pub fn total_volume(&self) -> f64 {
        self.volumes.iter().sum()
    }

    /// Volume enclosed by the boundary surface, by the divergence theorem.
    pub fn enclosed_volume(&self) -> f64 {
        self.boundary
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.rest_positions[i]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Flattened rest positions (3n).
    pub fn rest_vector(&self) -> crate::linalg::DVec {
        crate::linalg::DVec::from_iterator(
            self.dof_count(),
            self.rest_positions.iter().flat_map(|p| p.iter().copied()),
        )
    }

    /// Nodes lying on the boundary surface.
    pub fn surface_nodes(&self) -> Vec<bool> {
        let mut on = vec![false; self.node_count()];
        for f in &self.boundary {
            for &i in f {
                on[i] = true;
            }
        }
        on
    }

    /// Largest rest-state bounding-box diagonal over the bodies.
    pub fn diameter(&self) -> f64 {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.rest_positions {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (hi - lo).norm()
    }
}

fn boundary_faces(x: &[Vec3], tets: &[[usize; 4]]) -> Vec<[usize; 3]> {
    const FACES: [([usize; 3], usize); 4] = [([1, 2, 3], 0), ([0, 2, 3], 1), ([0, 1, 3], 2), ([0, 1, 2], 3)];
    let mut seen: BTreeMap<[usize; 3], (usize, [usize; 3], usize)> = BTreeMap::new();
    for tet in tets {
        for (face, opp) in FACES {
            let f = face.map(|k| tet[k]);
            let mut key = f;
            key.sort_unstable();
            seen.entry(key)
                .and_modify(|e| e.0 += 1)
                .or_insert((1, f, tet[opp]));
        }
    }
    seen.into_values()
        .filter(|e| e.0 == 1)
        .map(|(_, [a, b, c], d)| {
            let normal = (x[b] - x[a]).cross(&(x[c] - x[a]));
            if normal.dot(&(x[d] - x[a])) > 0.0 {
                [a, c, b]
            } else {
                [a, b, c]
            }
        })
        .collect()
}

/// Nodes whose three DOFs are held fixed by projection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DofMask {
    fixed: BTreeSet<usize>,
}

impl DofMask {
    pub fn new(fixed: impl IntoIterator<Item = usize>, node_count: usize) -> Result<Self> {
        let fixed: BTreeSet<usize> = fixed.into_iter().collect();
        if let Some(&i) = fixed.iter().find(|&&i| i >= node_count) {
            return Err(Error::IndexOutOfRange { index: i, len: node_count });
        }
        Ok(Self { fixed })
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn fixed_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.fixed.iter().copied()
    }

    pub fn is_fixed(&self, node: usize) -> bool {
        self.fixed.contains(&node)
    }

    /// Per-DOF flags (3n), `true` where the DOF is fixed.
    pub fn dof_flags(&self, node_count: usize) -> Vec<bool> {
        let mut flags = vec![false; 3 * node_count];
        for &i in &self.fixed {
            flags[3 * i..3 * i + 3].fill(true);
        }
        flags
    }
}

/// Axis-aligned box beam from the origin to `dimensions`, with every grid cell
/// split into five tetrahedra. Cell parities alternate so faces stay conforming.
/// Nodes are ordered with x slowest and z fastest.
pub fn generate_beam(dimensions: Vec3, resolution: [usize; 3]) -> Result<TetMesh> {
    if resolution.contains(&0) {
        return Err(Error::InvalidParameter("beam resolution must be >= 1 per axis".into()));
    }
    if dimensions.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::InvalidParameter("beam dimensions must be positive".into()));
    }
    let [nx, ny, nz] = resolution;
    let node = |i: usize, j: usize, k: usize| (i * (ny + 1) + j) * (nz + 1) + k;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for i in 0..=nx {
        for j in 0..=ny {
            for k in 0..=nz {
                nodes.push(Vec3::new(
                    dimensions.x * i as f64 / nx as f64,
                    dimensions.y * j as f64 / ny as f64,
                    dimensions.z * k as f64 / nz as f64,
                ));
            }
        }
    }
    // corner c = dx + 2 dy + 4 dz
    const EVEN: [[usize; 4]; 5] = [[1, 2, 4, 7], [0, 1, 2, 4], [3, 1, 2, 7], [5, 1, 4, 7], [6, 2, 4, 7]];
    const ODD: [[usize; 4]; 5] = [[0, 3, 5, 6], [1, 0, 3, 5], [2, 0, 3, 6], [4, 0, 5, 6], [7, 3, 5, 6]];
    let mut tets = Vec::with_capacity(5 * nx * ny * nz);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let corner = |c: usize| node(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                let split = if (i + j + k) % 2 == 0 { &EVEN } else { &ODD };
                tets.extend(split.iter().map(|t| t.map(corner)));
            }
        }
    }
    TetMesh::new(nodes, tets)
}

/// Closed-form node and tet counts of [`generate_beam`].
pub fn beam_counts(resolution: [usize; 3]) -> (usize, usize) {
    let [nx, ny, nz] = resolution;
    ((nx + 1) * (ny + 1) * (nz + 1), 5 * nx * ny * nz)
}

/// Rigidly transforms every rest position: `p ↦ rotation * p + translation`.
pub fn transformed(mesh: &TetMesh, rotation: &Mat3, translation: &Vec3) -> Result<TetMesh> {
    let nodes = mesh
        .rest_positions
        .iter()
        .map(|p| rotation * p + translation)
        .collect();
    TetMesh::with_bodies(nodes, mesh.tets.clone(), mesh.tet_body.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference() -> [Vec3; 4] {
        [Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()]
    }

    #[test]
    fn reference_simplex() {
        let mesh = TetMesh::new(reference().to_vec(), vec![[0, 1, 2, 3]]).unwrap();
        assert!((mesh.volumes()[0] - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(mesh.boundary_triangles().len(), 4);
        let g = mesh.gradients()[0];
        assert_eq!(g[0], Vec3::new(-1.0, -1.0, -1.0));
        assert_eq!(g[1], Vec3::x());
        assert_eq!(g[2], Vec3::y());
        assert_eq!(g[3], Vec3::z());
        assert!((mesh.enclosed_volume() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn swapped_vertices_are_reoriented() {
        let mesh = TetMesh::new(reference().to_vec(), vec![[0, 2, 1, 3]]).unwrap();
        assert!((mesh.volumes()[0] - 1.0 / 6.0).abs() < 1e-15);
        let sum: Vec3 = mesh.gradients()[0].iter().sum();
        assert!(sum.norm() < 1e-12);
    }

    #[test]
    fn degenerate_and_out_of_range() {
        let flat = vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::new(1.0, 1.0, 0.0)];
        assert!(matches!(
            TetMesh::new(flat, vec![[0, 1, 2, 3]]),
            Err(Error::DegenerateElement { tet: 0, .. })
        ));
        assert!(matches!(
            TetMesh::new(reference().to_vec(), vec![[0, 1, 2, 4]]),
            Err(Error::IndexOutOfRange { index: 4, len: 4 })
        ));
        assert!(TetMesh::new(reference().to_vec(), vec![]).is_err());
    }

    #[test]
    fn scaled_tet_gradients_and_volume() {
        let s = 2.5;
        let p = reference().map(|v| v * s);
        let (g, v) = shape_gradients(&p).unwrap();
        assert!((v - s * s * s / 6.0).abs() < 1e-14);
        assert!((g[1] - Vec3::x() / s).norm() < 1e-15);
    }

    #[test]
    fn gradients_match_fd_of_barycentric_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p: [Vec3; 4] = core::array::from_fn(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()));
            if signed_volume(&p).abs() < 1e-3 {
                continue;
            }
            let (g, _) = shape_gradients(&p).unwrap();
            // barycentric coordinates of q solve [p1-p0 p2-p0 p3-p0] w = q - p0
            let bary = |q: Vec3| {
                let dm = Mat3::from_columns(&[p[1] - p[0], p[2] - p[0], p[3] - p[0]]);
                let w = dm.lu().solve(&(q - p[0])).unwrap();
                [1.0 - w.sum(), w.x, w.y, w.z]
            };
            let q = Vec3::new(0.3, 0.2, 0.4);
            let h = 1e-6;
            for axis in 0..3 {
                let mut dq = Vec3::zeros();
                dq[axis] = h;
                let (a, b) = (bary(q + dq), bary(q - dq));
                for i in 0..4 {
                    let fd = (a[i] - b[i]) / (2.0 * h);
                    assert!((fd - g[i][axis]).abs() < 1e-8, "{fd} vs {}", g[i][axis]);
                }
            }
        }
    }

    #[test]
    fn translation_invariant_gradients() {
        let p = [Vec3::new(0.1, 0.0, 0.0), Vec3::new(1.0, 0.2, 0.0), Vec3::new(0.0, 1.0, 0.3), Vec3::new(0.2, 0.1, 1.0)];
        let t = Vec3::new(3.0, -2.0, 7.0);
        let (g0, _) = shape_gradients(&p).unwrap();
        let (g1, _) = shape_gradients(&p.map(|v| v + t)).unwrap();
        for i in 0..4 {
            assert!((g0[i] - g1[i]).amax() < 1e-14);
        }
    }

    #[test]
    fn beam_counts_and_volume() {
        for res in [[1, 1, 1], [2, 1, 1], [10, 1, 1], [3, 2, 2]] {
            let dims = Vec3::new(1.0, 0.1, 0.1);
            let mesh = generate_beam(dims, res).unwrap();
            let (n, t) = beam_counts(res);
            assert_eq!(mesh.node_count(), n);
            assert_eq!(mesh.tet_count(), t);
            assert!((mesh.total_volume() - 0.01).abs() < 1e-12);
            assert!((mesh.enclosed_volume() - mesh.total_volume()).abs() < 1e-10 * mesh.total_volume());
            // conforming split: each boundary face is a cell-face half
            let [nx, ny, nz] = res;
            assert_eq!(mesh.boundary_triangles().len(), 4 * (nx * ny + ny * nz + nx * nz));
        }
    }

    #[test]
    fn beam_rejects_zero_resolution() {
        assert!(generate_beam(Vec3::new(1.0, 1.0, 1.0), [0, 1, 1]).is_err());
    }

    #[test]
    fn dof_mask_flags() {
        let m = DofMask::new([1], 3).unwrap();
        assert_eq!(m.dof_flags(3), vec![false, false, false, true, true, true, false, false, false]);
        assert!(DofMask::new([3], 3).is_err());
    }
}
