//! Mesh files: the native JSON document `{nodes, tets}` and legacy ASCII VTK
//! unstructured grids (tetrahedra only).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use softdiff_core::mesh::TetMesh;
use softdiff_core::{DVec, Error, Vec3};

use crate::error::{CliError, Result};

const VTK_TETRA: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshFormat {
    Json,
    Vtk,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "json" => Some(Self::Json),
            "vtk" => Some(Self::Vtk),
            _ => None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeshDoc {
    nodes: Vec<[f64; 3]>,
    tets: Vec<[usize; 4]>,
}

fn build(nodes: Vec<[f64; 3]>, tets: Vec<[usize; 4]>, scale: f64) -> std::result::Result<TetMesh, Error> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParameter(format!("unit scale must be positive, got {scale}")));
    }
    let rest = nodes.iter().map(|p| Vec3::new(p[0], p[1], p[2]) * scale).collect();
    TetMesh::new(rest, tets)
}

/// Parses a native JSON mesh; positions are multiplied by `scale`.
pub fn parse_mesh_json(text: &str, scale: f64) -> std::result::Result<TetMesh, Error> {
    let doc: MeshDoc = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    build(doc.nodes, doc.tets, scale)
}

pub fn mesh_to_json(mesh: &TetMesh) -> String {
    let doc = MeshDoc {
        nodes: mesh.rest_positions().iter().map(|p| [p.x, p.y, p.z]).collect(),
        tets: mesh.tets().to_vec(),
    };
    serde_json::to_string_pretty(&doc).expect("mesh document serializes")
}

struct Tokens<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    pending: std::vec::IntoIter<&'a str>,
    line: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        Self { lines: text.lines().enumerate().peekable(), pending: Vec::new().into_iter(), line: 0 }
    }

    fn next(&mut self) -> Option<&'a str> {
        loop {
            if let Some(t) = self.pending.next() {
                return Some(t);
            }
            let (n, l) = self.lines.next()?;
            self.line = n + 1;
            self.pending = l.split_whitespace().collect::<Vec<_>>().into_iter();
        }
    }

    /// Rest of the current line as one string (titles).
    fn rest_of_line(&mut self) -> Option<&'a str> {
        let (n, l) = self.lines.next()?;
        self.line = n + 1;
        self.pending = Vec::new().into_iter();
        Some(l)
    }

    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::Parse(format!("line {}: {msg}", self.line))
    }

    fn expect(&mut self, what: &str) -> std::result::Result<&'a str, Error> {
        self.next().ok_or_else(|| self.err(format!("unexpected end of file, expected {what}")))
    }

    fn keyword(&mut self, kw: &str) -> std::result::Result<(), Error> {
        let t = self.expect(kw)?;
        if t.eq_ignore_ascii_case(kw) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{kw}`, found `{t}`")))
        }
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> std::result::Result<T, Error> {
        let t = self.expect(what)?;
        t.parse().map_err(|_| self.err(format!("invalid {what} `{t}`")))
    }
}

/// Parses a legacy ASCII VTK unstructured grid. Every cell must be a
/// tetrahedron; data sections after the cells are ignored.
pub fn parse_vtk(text: &str, scale: f64) -> std::result::Result<TetMesh, Error> {
    let mut tk = Tokens::new(text);
    let header = tk.rest_of_line().ok_or_else(|| tk.err("empty file"))?;
    if !header.starts_with("# vtk DataFile") {
        return Err(tk.err("missing `# vtk DataFile` header"));
    }
    tk.rest_of_line().ok_or_else(|| tk.err("missing title line"))?;
    tk.keyword("ASCII")?;
    tk.keyword("DATASET")?;
    tk.keyword("UNSTRUCTURED_GRID")?;
    tk.keyword("POINTS")?;
    let n: usize = tk.number("point count")?;
    tk.expect("point data type")?;
    let mut nodes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p = [0.0f64; 3];
        for c in &mut p {
            *c = tk.number("coordinate")?;
            if !c.is_finite() {
                return Err(tk.err("non-finite coordinate"));
            }
        }
        nodes.push(p);
    }
    tk.keyword("CELLS")?;
    let m: usize = tk.number("cell count")?;
    let _size: usize = tk.number("cell list size")?;
    let mut cells = Vec::with_capacity(m);
    for _ in 0..m {
        let k: usize = tk.number("cell size")?;
        if k != 4 {
            return Err(tk.err(format!("only tetrahedra are supported, found a cell with {k} points")));
        }
        let mut t = [0usize; 4];
        for i in &mut t {
            *i = tk.number("point index")?;
        }
        cells.push(t);
    }
    tk.keyword("CELL_TYPES")?;
    let mt: usize = tk.number("cell type count")?;
    if mt != m {
        return Err(tk.err(format!("CELL_TYPES has {mt} entries for {m} cells")));
    }
    for _ in 0..m {
        let ty: usize = tk.number("cell type")?;
        if ty != VTK_TETRA {
            return Err(tk.err(format!("unsupported cell type {ty}, only tetrahedra (10) are read")));
        }
    }
    build(nodes, cells, scale)
}

/// Legacy ASCII VTK of the mesh at positions `x` (rest positions if `None`)
/// with the displacement from rest as point data.
pub fn mesh_to_vtk(mesh: &TetMesh, x: Option<&DVec>, title: &str) -> String {
    let rest = mesh.rest_vector();
    let x = x.unwrap_or(&rest);
    let n = mesh.node_count();
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "{}", title.lines().next().unwrap_or(""));
    let _ = writeln!(s, "ASCII\nDATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {n} double");
    for i in 0..n {
        let _ = writeln!(s, "{} {} {}", x[3 * i], x[3 * i + 1], x[3 * i + 2]);
    }
    let m = mesh.tet_count();
    let _ = writeln!(s, "CELLS {m} {}", 5 * m);
    for t in mesh.tets() {
        let _ = writeln!(s, "4 {} {} {} {}", t[0], t[1], t[2], t[3]);
    }
    let _ = writeln!(s, "CELL_TYPES {m}");
    for _ in 0..m {
        let _ = writeln!(s, "{VTK_TETRA}");
    }
    let _ = writeln!(s, "POINT_DATA {n}\nVECTORS displacement double");
    for i in 0..n {
        let _ = writeln!(s, "{} {} {}", x[3 * i] - rest[3 * i], x[3 * i + 1] - rest[3 * i + 1], x[3 * i + 2] - rest[3 * i + 2]);
    }
    s
}

/// Loads a mesh file. The format defaults to the file extension.
pub fn load_mesh(path: &Path, format: Option<MeshFormat>, scale: f64) -> Result<TetMesh> {
    let format = match format.or_else(|| MeshFormat::from_path(path)) {
        Some(f) => f,
        None => {
            return Err(CliError::File {
                path: path.to_owned(),
                message: "cannot infer the mesh format from the extension; set `format`".into(),
            })
        }
    };
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_owned(), source })?;
    let parsed = match format {
        MeshFormat::Json => parse_mesh_json(&text, scale),
        MeshFormat::Vtk => parse_vtk(&text, scale),
    };
    parsed.map_err(|e| CliError::File { path: path.to_owned(), message: e.to_string() })
}

pub fn save_mesh(path: &Path, mesh: &TetMesh, format: MeshFormat) -> Result<()> {
    let text = match format {
        MeshFormat::Json => mesh_to_json(mesh),
        MeshFormat::Vtk => mesh_to_vtk(mesh, None, "softdiff mesh"),
    };
    std::fs::write(path, text).map_err(|source| CliError::Io { path: path.to_owned(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use softdiff_core::mesh::generate_beam;

    #[test]
    fn json_round_trip_is_exact() {
        let mesh = generate_beam(Vec3::new(0.1, 0.013, 0.017), [3, 2, 1]).unwrap();
        let back = parse_mesh_json(&mesh_to_json(&mesh), 1.0).unwrap();
        assert_eq!(back.rest_positions(), mesh.rest_positions());
        assert_eq!(back.tets(), mesh.tets());
    }

    #[test]
    fn vtk_round_trip() {
        let mesh = generate_beam(Vec3::new(0.1, 0.01, 0.01), [2, 1, 1]).unwrap();
        let back = parse_vtk(&mesh_to_vtk(&mesh, None, "t"), 1.0).unwrap();
        assert_eq!(back.rest_positions(), mesh.rest_positions());
        assert_eq!(back.tets(), mesh.tets());
    }

    #[test]
    fn scale_converts_millimetres() {
        let text = r#"{"nodes": [[0,0,0],[10,0,0],[0,10,0],[0,0,10]], "tets": [[0,1,2,3]]}"#;
        let m = parse_mesh_json(text, 1e-3).unwrap();
        assert!((m.volumes()[0] - 1e-6 / 6.0).abs() < 1e-20);
    }

    #[test]
    fn vtk_errors_carry_line_numbers() {
        let text = "# vtk DataFile Version 3.0\nt\nASCII\nDATASET UNSTRUCTURED_GRID\nPOINTS 4 double\n0 0 0\n1 0 0\n0 1 0\n0 0 1\nCELLS 1 4\n3 0 1 2\n";
        let err = parse_vtk(text, 1.0).unwrap_err().to_string();
        assert!(err.contains("line 11"), "{err}");
    }

    #[test]
    fn vtk_rejects_other_cell_types() {
        let text = "# vtk DataFile Version 3.0\nt\nASCII\nDATASET UNSTRUCTURED_GRID\nPOINTS 4 double\n0 0 0 1 0 0 0 1 0 0 0 1\nCELLS 1 5\n4 0 1 2 3\nCELL_TYPES 1\n9\n";
        assert!(parse_vtk(text, 1.0).is_err());
    }

    #[test]
    fn degenerate_tet_is_rejected() {
        let text = r#"{"nodes": [[0,0,0],[1,0,0],[0,1,0],[1,1,0]], "tets": [[0,1,2,3]]}"#;
        assert!(matches!(parse_mesh_json(text, 1.0), Err(Error::DegenerateElement { .. })));
    }
}
