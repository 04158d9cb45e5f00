//! JSON scenario files.
//!
//! A scenario lists bodies (generated beams or mesh files), materials,
//! time-stepping parameters, actuators, obstacles, contact settings and an
//! optional task. Unknown fields are rejected. Every value problem is
//! reported with the JSON path of the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use softdiff_core::actuation::ActuatorSpec;
use softdiff_core::collision::Obstacle;
use softdiff_core::constitutive::{Law, MaterialParameter, MaterialParams, Materials};
use softdiff_core::contact::SolverSettings;
use softdiff_core::dynamics::SimParams;
use softdiff_core::mesh::{generate_beam, transformed, DofMask, TetMesh};
use softdiff_core::scene::Scene;
use softdiff_core::{DVec, Mat3, Vec3};

use crate::error::{CliError, Result};
use crate::io::{load_mesh, MeshFormat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub bodies: Vec<BodyConfig>,
    pub materials: Vec<MaterialConfig>,
    pub sim: SimConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub actuators: Vec<ActuatorConfig>,
    /// constant actuation used by `simulate` and `gradcheck`; zeros if absent
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actuation: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub obstacles: Vec<ObstacleConfig>,
    #[serde(default)]
    pub contact: ContactConfig,
    /// Gumbel temperature of the smoothed witness points
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothing: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyConfig {
    pub mesh: MeshSource,
    #[serde(default)]
    pub translation: [f64; 3],
    /// index into `materials`
    #[serde(default)]
    pub material: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshSource {
    Beam(BeamSource),
    File(FileSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamSource {
    /// m
    pub dimensions: [f64; 3],
    pub resolution: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSource {
    /// relative paths are resolved against the scenario file's directory
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<MeshFormat>,
    /// multiplies file coordinates, e.g. 0.001 for millimetres
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawConfig {
    Corotational,
    Stvk,
    NeoHookean,
}

impl From<LawConfig> for Law {
    fn from(l: LawConfig) -> Self {
        match l {
            LawConfig::Corotational => Law::Corotational,
            LawConfig::Stvk => Law::StVK,
            LawConfig::NeoHookean => Law::NeoHookean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    pub law: LawConfig,
    /// Pa
    pub young: f64,
    pub poisson: f64,
    /// kg/m³
    pub density: f64,
    /// Rayleigh coefficients (mass, stiffness)
    #[serde(default)]
    pub rayleigh: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// s
    pub h: f64,
    #[serde(default)]
    pub gravity: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed: Option<NodeSet>,
    /// default step count of `simulate`
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_steps() -> usize {
    100
}

/// A set of mesh nodes, by index or by an axis-aligned box on the assembled
/// rest positions (m).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NodeSet {
    All,
    Nodes(Vec<usize>),
    Box { min: [f64; 3], max: [f64; 3] },
}

impl NodeSet {
    pub fn resolve(&self, mesh: &TetMesh) -> Vec<usize> {
        let n = mesh.node_count();
        match self {
            NodeSet::All => (0..n).collect(),
            NodeSet::Nodes(v) => v.clone(),
            NodeSet::Box { min, max } => {
                let tol = 1e-9 * mesh.diameter().max(1.0);
                (0..n)
                    .filter(|&i| {
                        let p = mesh.rest_positions()[i];
                        (0..3).all(|c| p[c] >= min[c] - tol && p[c] <= max[c] + tol)
                    })
                    .collect()
            }
        }
    }

    fn check(&self, field: &str, mesh: &TetMesh) -> Result<Vec<usize>> {
        if let NodeSet::Box { min, max } = self {
            if (0..3).any(|c| min[c] > max[c]) {
                return Err(CliError::config(field, "box min exceeds max"));
            }
        }
        let nodes = self.resolve(mesh);
        if let Some(&i) = nodes.iter().find(|&&i| i >= mesh.node_count()) {
            return Err(CliError::config(field, format!("node {i} out of range ({} nodes)", mesh.node_count())));
        }
        if nodes.is_empty() {
            return Err(CliError::config(field, "selects no nodes"));
        }
        Ok(nodes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    #[serde(rename = "x")]
    X,
    #[serde(rename = "y")]
    Y,
    #[serde(rename = "z")]
    Z,
    #[serde(rename = "-x")]
    NegX,
    #[serde(rename = "-y")]
    NegY,
    #[serde(rename = "-z")]
    NegZ,
}

impl Axis {
    fn key(self, p: &Vec3) -> f64 {
        match self {
            Axis::X => p.x,
            Axis::Y => p.y,
            Axis::Z => p.z,
            Axis::NegX => -p.x,
            Axis::NegY => -p.y,
            Axis::NegZ => -p.z,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuatorConfig {
    pub kind: ActuatorKindConfig,
    /// (λ_min, λ_max)
    pub bounds: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ActuatorKindConfig {
    Cable(CableConfig),
    Pneumatic(PneumaticConfig),
    Servo(ServoConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CableConfig {
    pub nodes: NodeSet,
    /// the path visits the nodes sorted along this axis; the first node is
    /// the anchored end
    pub order: Axis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PneumaticConfig {
    /// boundary triangles with all three nodes in this set form the chamber
    pub nodes: NodeSet,
    /// flip the outward boundary orientation, for walls of an internal cavity
    #[serde(default)]
    pub reverse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServoConfig {
    pub node: usize,
    pub direction: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleConfig {
    pub shape: ShapeConfig,
    pub friction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeConfig {
    Plane { point: [f64; 3], normal: [f64; 3] },
    Cuboid { center: [f64; 3], half_extents: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    Pgs,
    #[default]
    Admm,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactConfig {
    #[serde(default)]
    pub solver: SolverChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accept: Option<f64>,
    /// m
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_friction: Option<f64>,
    #[serde(default)]
    pub self_collision: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// relative to the working directory
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    /// nodes written to the trajectory CSV
    #[serde(default = "all_nodes")]
    pub nodes: NodeSet,
    /// write a VTK frame every this many steps
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vtk_every: Option<usize>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn all_nodes() -> NodeSet {
    NodeSet::All
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_out(), nodes: NodeSet::All, vtk_every: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    Gradcheck(GradcheckTask),
    Identify(IdentifyTask),
    Control(ControlTask),
    Grip(GripTask),
}

impl TaskConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::Gradcheck(_) => "gradcheck",
            TaskConfig::Identify(_) => "identify",
            TaskConfig::Control(_) => "control",
            TaskConfig::Grip(_) => "grip",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum VariableConfig {
    /// initial positions of the selected nodes (all three DOFs each)
    Position { nodes: NodeSet },
    Velocity { nodes: NodeSet },
    /// all actuators if `indices` is absent
    Actuation {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        indices: Option<Vec<usize>>,
    },
    Young { material: usize },
    Poisson { material: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckTask {
    pub variables: Vec<VariableConfig>,
    /// steps taken from rest before the checked rollout starts
    #[serde(default)]
    pub warmup: usize,
    /// length of the differentiated rollout
    #[serde(default = "one_step")]
    pub steps: usize,
    #[serde(default = "default_grad_tol")]
    pub tolerance: f64,
    /// overrides the per-variable default FD step
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd_step: Option<f64>,
    /// check a seeded random subset of this many columns per variable
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
}

fn one_step() -> usize {
    1
}

fn default_grad_tol() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParameterConfig {
    Young,
    Poisson,
}

impl From<ParameterConfig> for MaterialParameter {
    fn from(p: ParameterConfig) -> Self {
        match p {
            ParameterConfig::Young => MaterialParameter::Young,
            ParameterConfig::Poisson => MaterialParameter::Poisson,
        }
    }
}

/// Synthetic identification: the target is the final state of a rollout with
/// the material parameter set to `truth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifyTask {
    pub material: usize,
    pub parameter: ParameterConfig,
    pub initial: f64,
    pub truth: f64,
    pub steps: usize,
    #[serde(default = "default_lm_iter")]
    pub max_iter: usize,
    /// required relative accuracy of the estimate
    #[serde(default = "default_id_tol")]
    pub tolerance: f64,
}

fn default_lm_iter() -> usize {
    30
}

fn default_id_tol() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GoalConfig {
    Point([f64; 3]),
    /// end-effector position after `steps` steps with constant `actuation`
    Rollout { actuation: Vec<f64>, steps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlTask {
    pub effector: NodeSet,
    #[serde(default = "all_axes")]
    pub axes: [bool; 3],
    pub goal: GoalConfig,
    #[serde(default = "default_control_iter")]
    pub iterations: usize,
    /// max actuation change per iteration
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trust: Option<f64>,
    /// success when the final distance is below this fraction of the initial
    #[serde(default = "default_success")]
    pub success_ratio: f64,
}

fn all_axes() -> [bool; 3] {
    [true; 3]
}

fn default_control_iter() -> usize {
    100
}

fn default_success() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FingerConfig {
    pub tip: NodeSet,
    #[serde(default = "all_axes")]
    pub axes: [bool; 3],
    pub goal: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    pub alpha: f64,
    pub beta: f64,
}

/// Runs the constant-max-actuation heuristic and the optimized controller
/// and compares their final closure and contact force.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GripTask {
    pub fingers: Vec<FingerConfig>,
    /// nodes whose contact forces enter the objective
    pub finger_nodes: NodeSet,
    pub weights: WeightsConfig,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trust: Option<f64>,
    /// pass requires optimized force ≤ this × heuristic force
    #[serde(default = "default_force_ratio")]
    pub force_ratio: f64,
    /// pass requires the closures to agree to this relative tolerance
    #[serde(default = "default_closure_tol")]
    pub closure_tolerance: f64,
}

fn default_force_ratio() -> f64 {
    0.2
}

fn default_closure_tol() -> f64 {
    0.1
}

/// A parsed scenario together with the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub base_dir: PathBuf,
}

/// The simulation a scenario describes.
#[derive(Debug, Clone)]
pub struct Built {
    pub scene: Scene,
    pub actuation: DVec,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_owned(), source })?;
        let base = path.parent().map(Path::to_owned).unwrap_or_default();
        Self::parse(&text, base).map_err(|e| match e {
            CliError::Config { field, message } => {
                CliError::Config { field: format!("{}: {field}", path.display()), message }
            }
            other => other,
        })
    }

    pub fn parse(text: &str, base_dir: PathBuf) -> Result<Self> {
        let config: ScenarioConfig = serde_json::from_str(text)
            .map_err(|e| CliError::config(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        let s = Self { config, base_dir };
        s.build()?;
        Ok(s)
    }

    pub fn build(&self) -> Result<Built> {
        self.config.build(&self.base_dir)
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::config(field, format!("must be positive and finite, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::config(field, format!("must be non-negative and finite, got {v}")))
    }
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn core_err(field: &str) -> impl Fn(softdiff_core::Error) -> CliError + '_ {
    move |e| CliError::config(field, e.to_string())
}

impl ScenarioConfig {
    fn build_mesh(&self, base: &Path) -> Result<TetMesh> {
        if self.bodies.is_empty() {
            return Err(CliError::config("bodies", "at least one body is required"));
        }
        let mut parts = Vec::with_capacity(self.bodies.len());
        for (b, body) in self.bodies.iter().enumerate() {
            let f = format!("bodies[{b}]");
            let mesh = match &body.mesh {
                MeshSource::Beam(beam) => {
                    for (c, &d) in beam.dimensions.iter().enumerate() {
                        positive(&format!("{f}.mesh.beam.dimensions[{c}]"), d)?;
                    }
                    if beam.resolution.contains(&0) {
                        return Err(CliError::config(format!("{f}.mesh.beam.resolution"), "entries must be at least 1"));
                    }
                    generate_beam(v3(beam.dimensions), beam.resolution).map_err(core_err(&f))?
                }
                MeshSource::File(file) => {
                    positive(&format!("{f}.mesh.file.scale"), file.scale)?;
                    let path = base.join(&file.path);
                    if !path.is_file() {
                        return Err(CliError::config(
                            format!("{f}.mesh.file.path"),
                            format!("{} does not exist", path.display()),
                        ));
                    }
                    load_mesh(&path, file.format, file.scale)
                        .map_err(|e| CliError::config(format!("{f}.mesh.file"), e.to_string()))?
                }
            };
            if body.translation.iter().any(|t| !t.is_finite()) {
                return Err(CliError::config(format!("{f}.translation"), "must be finite"));
            }
            if body.material >= self.materials.len() {
                return Err(CliError::config(
                    format!("{f}.material"),
                    format!("index {} out of range ({} materials)", body.material, self.materials.len()),
                ));
            }
            parts.push(transformed(&mesh, &Mat3::identity(), &v3(body.translation)).map_err(core_err(&f))?);
        }
        if parts.len() == 1 {
            Ok(parts.pop().unwrap())
        } else {
            TetMesh::concat(&parts).map_err(core_err("bodies"))
        }
    }

    fn build_materials(&self, mesh: &TetMesh) -> Result<Materials> {
        if self.materials.is_empty() {
            return Err(CliError::config("materials", "at least one material is required"));
        }
        let mut params = Vec::with_capacity(self.materials.len());
        for (i, m) in self.materials.iter().enumerate() {
            let f = format!("materials[{i}]");
            positive(&format!("{f}.young"), m.young)?;
            positive(&format!("{f}.density"), m.density)?;
            if !(m.poisson > -1.0 && m.poisson < 0.5) {
                return Err(CliError::config(format!("{f}.poisson"), format!("must lie in (-1, 0.5), got {}", m.poisson)));
            }
            non_negative(&format!("{f}.rayleigh[0]"), m.rayleigh[0])?;
            non_negative(&format!("{f}.rayleigh[1]"), m.rayleigh[1])?;
            let p = MaterialParams::new(m.law.into(), m.young, m.poisson, m.density).with_damping(m.rayleigh[0], m.rayleigh[1]);
            p.validate().map_err(core_err(&f))?;
            params.push(p);
        }
        let tet_material = mesh.tet_body().iter().map(|&b| self.bodies[b].material).collect();
        let materials = Materials { params, tet_material };
        materials.validate(mesh).map_err(core_err("materials"))?;
        Ok(materials)
    }

    fn build_actuators(&self, mesh: &TetMesh) -> Result<Vec<ActuatorSpec>> {
        let mut out = Vec::with_capacity(self.actuators.len());
        for (a, act) in self.actuators.iter().enumerate() {
            let f = format!("actuators[{a}]");
            let [lo, hi] = act.bounds;
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(CliError::config(format!("{f}.bounds"), format!("need finite lo <= hi, got [{lo}, {hi}]")));
            }
            let spec = match &act.kind {
                ActuatorKindConfig::Cable(c) => {
                    let mut path = c.nodes.check(&format!("{f}.kind.cable.nodes"), mesh)?;
                    if path.len() < 2 && c.anchor.is_none() {
                        return Err(CliError::config(format!("{f}.kind.cable.nodes"), "an unanchored cable needs two nodes"));
                    }
                    let x = mesh.rest_positions();
                    path.sort_by(|&i, &j| c.order.key(&x[i]).total_cmp(&c.order.key(&x[j])).then(i.cmp(&j)));
                    match c.anchor {
                        Some(p) => ActuatorSpec::anchored_cable(v3(p), path, (lo, hi)),
                        None => ActuatorSpec::cable(path, (lo, hi)),
                    }
                }
                ActuatorKindConfig::Pneumatic(p) => {
                    let field = format!("{f}.kind.pneumatic.nodes");
                    let mut inside = vec![false; mesh.node_count()];
                    for i in p.nodes.check(&field, mesh)? {
                        inside[i] = true;
                    }
                    let tris: Vec<[usize; 3]> = mesh
                        .boundary_triangles()
                        .iter()
                        .filter(|t| t.iter().all(|&i| inside[i]))
                        .map(|&[a, b, c]| if p.reverse { [a, c, b] } else { [a, b, c] })
                        .collect();
                    if tris.is_empty() {
                        return Err(CliError::config(field, "contains no boundary triangle"));
                    }
                    ActuatorSpec::pneumatic(tris, (lo, hi))
                }
                ActuatorKindConfig::Servo(s) => {
                    if s.node >= mesh.node_count() {
                        return Err(CliError::config(format!("{f}.kind.servo.node"), "out of range"));
                    }
                    let d = v3(s.direction);
                    if !(d.norm() > 0.0 && d.norm().is_finite()) {
                        return Err(CliError::config(format!("{f}.kind.servo.direction"), "must be a non-zero vector"));
                    }
                    ActuatorSpec::servo(s.node, d.normalize(), (lo, hi))
                }
            };
            spec.validate(mesh.node_count()).map_err(core_err(&f))?;
            out.push(spec);
        }
        Ok(out)
    }

    fn build_obstacles(&self) -> Result<Vec<Obstacle>> {
        let mut out = Vec::with_capacity(self.obstacles.len());
        for (i, o) in self.obstacles.iter().enumerate() {
            let f = format!("obstacles[{i}]");
            non_negative(&format!("{f}.friction"), o.friction)?;
            let ob = match &o.shape {
                ShapeConfig::Plane { point, normal } => {
                    if !(v3(*normal).norm() > 0.0) {
                        return Err(CliError::config(format!("{f}.shape.plane.normal"), "must be non-zero"));
                    }
                    Obstacle::plane(v3(*point), v3(*normal), o.friction)
                }
                ShapeConfig::Cuboid { center, half_extents } => {
                    for (c, &e) in half_extents.iter().enumerate() {
                        positive(&format!("{f}.shape.cuboid.half_extents[{c}]"), e)?;
                    }
                    Obstacle::cuboid(v3(*center), v3(*half_extents), o.friction)
                }
                ShapeConfig::Sphere { center, radius } => {
                    positive(&format!("{f}.shape.sphere.radius"), *radius)?;
                    Obstacle::sphere(v3(*center), *radius, o.friction)
                }
            };
            ob.validate().map_err(core_err(&f))?;
            out.push(ob);
        }
        Ok(out)
    }

    fn solver(&self) -> Result<SolverSettings> {
        let c = &self.contact;
        let mut s = match c.solver {
            SolverChoice::Pgs => SolverSettings::pgs(),
            SolverChoice::Admm => SolverSettings::admm(),
        };
        if let Some(t) = c.tol {
            positive("contact.tol", t)?;
            s.tol = t;
        }
        if let Some(m) = c.max_iter {
            if m == 0 {
                return Err(CliError::config("contact.max_iter", "must be at least 1"));
            }
            s.max_iter = m;
        }
        if let Some(r) = c.rho {
            positive("contact.rho", r)?;
            s.rho = r;
        }
        if let Some(a) = c.accept {
            positive("contact.accept", a)?;
            s.accept = a;
        }
        Ok(s)
    }

    /// Builds and validates the scene.
    pub fn build(&self, base: &Path) -> Result<Built> {
        let mesh = self.build_mesh(base)?;
        let materials = self.build_materials(&mesh)?;
        positive("sim.h", self.sim.h)?;
        if self.sim.gravity.iter().any(|g| !g.is_finite()) {
            return Err(CliError::config("sim.gravity", "must be finite"));
        }
        let mut sim = SimParams::new(self.sim.h);
        sim.gravity = v3(self.sim.gravity);
        if let Some(fixed) = &self.sim.fixed {
            let nodes = fixed.check("sim.fixed", &mesh)?;
            sim.dof_mask = DofMask::new(nodes, mesh.node_count()).map_err(core_err("sim.fixed"))?;
        }
        let mut scene = Scene::new(mesh, materials, sim);
        scene.actuators = self.build_actuators(&scene.mesh)?;
        scene.obstacles = self.build_obstacles()?;
        scene.solver = self.solver()?;
        if let Some(m) = self.contact.margin {
            positive("contact.margin", m)?;
            scene.detection.margin = m;
        }
        if let Some(mu) = self.contact.body_friction {
            non_negative("contact.body_friction", mu)?;
            scene.detection.body_friction = mu;
        }
        scene.detection.self_collision = self.contact.self_collision;
        if let Some(t) = self.smoothing {
            positive("smoothing", t)?;
            scene.detection.smoothing = t;
        }
        scene.validate().map_err(core_err("scenario"))?;
        let actuation = match &self.actuation {
            None => DVec::zeros(scene.actuator_count()),
            Some(a) => {
                if a.len() != scene.actuator_count() {
                    return Err(CliError::config(
                        "actuation",
                        format!("has {} entries for {} actuators", a.len(), scene.actuator_count()),
                    ));
                }
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(CliError::config("actuation", "must be finite"));
                }
                DVec::from_column_slice(a)
            }
        };
        self.output.nodes.check("output.nodes", &scene.mesh)?;
        if self.output.vtk_every == Some(0) {
            return Err(CliError::config("output.vtk_every", "must be at least 1"));
        }
        if let Some(task) = &self.task {
            self.check_task(task, &scene)?;
        }
        Ok(Built { scene, actuation })
    }

    fn check_task(&self, task: &TaskConfig, scene: &Scene) -> Result<()> {
        let n_mat = scene.materials.params.len();
        let n_act = scene.actuator_count();
        let mesh = &scene.mesh;
        match task {
            TaskConfig::Gradcheck(g) => {
                if g.variables.is_empty() {
                    return Err(CliError::config("task.gradcheck.variables", "is empty"));
                }
                if g.steps == 0 {
                    return Err(CliError::config("task.gradcheck.steps", "must be at least 1"));
                }
                positive("task.gradcheck.tolerance", g.tolerance)?;
                if let Some(s) = g.fd_step {
                    positive("task.gradcheck.fd_step", s)?;
                }
                if g.sample == Some(0) {
                    return Err(CliError::config("task.gradcheck.sample", "must be at least 1"));
                }
                for (i, v) in g.variables.iter().enumerate() {
                    let f = format!("task.gradcheck.variables[{i}]");
                    match v {
                        VariableConfig::Position { nodes } | VariableConfig::Velocity { nodes } => {
                            nodes.check(&f, mesh)?;
                        }
                        VariableConfig::Actuation { indices } => {
                            if n_act == 0 {
                                return Err(CliError::config(f, "scenario has no actuators"));
                            }
                            if let Some(&k) = indices.iter().flatten().find(|&&k| k >= n_act) {
                                return Err(CliError::config(f, format!("actuator {k} out of range ({n_act})")));
                            }
                        }
                        VariableConfig::Young { material } | VariableConfig::Poisson { material } => {
                            if *material >= n_mat {
                                return Err(CliError::config(f, format!("material {material} out of range ({n_mat})")));
                            }
                        }
                    }
                }
            }
            TaskConfig::Identify(t) => {
                if t.material >= n_mat {
                    return Err(CliError::config("task.identify.material", format!("out of range ({n_mat})")));
                }
                if t.steps == 0 {
                    return Err(CliError::config("task.identify.steps", "must be at least 1"));
                }
                for (name, v) in [("initial", t.initial), ("truth", t.truth)] {
                    let f = format!("task.identify.{name}");
                    match t.parameter {
                        ParameterConfig::Young => positive(&f, v)?,
                        ParameterConfig::Poisson if !(v > -1.0 && v < 0.5) => {
                            return Err(CliError::config(f, format!("must lie in (-1, 0.5), got {v}")))
                        }
                        ParameterConfig::Poisson => {}
                    }
                }
                positive("task.identify.tolerance", t.tolerance)?;
            }
            TaskConfig::Control(c) => {
                c.effector.check("task.control.effector", mesh)?;
                if !c.axes.iter().any(|&a| a) {
                    return Err(CliError::config("task.control.axes", "select at least one axis"));
                }
                if n_act == 0 {
                    return Err(CliError::config("actuators", "control needs at least one actuator"));
                }
                match &c.goal {
                    GoalConfig::Point(p) if p.iter().any(|v| !v.is_finite()) => {
                        return Err(CliError::config("task.control.goal.point", "must be finite"))
                    }
                    GoalConfig::Rollout { actuation, .. } if actuation.len() != n_act => {
                        return Err(CliError::config(
                            "task.control.goal.rollout.actuation",
                            format!("has {} entries for {n_act} actuators", actuation.len()),
                        ))
                    }
                    _ => {}
                }
                if let Some(t) = c.trust {
                    positive("task.control.trust", t)?;
                }
                positive("task.control.success_ratio", c.success_ratio)?;
            }
            TaskConfig::Grip(g) => {
                if g.fingers.is_empty() {
                    return Err(CliError::config("task.grip.fingers", "is empty"));
                }
                for (i, fc) in g.fingers.iter().enumerate() {
                    fc.tip.check(&format!("task.grip.fingers[{i}].tip"), mesh)?;
                    if !fc.axes.iter().any(|&a| a) {
                        return Err(CliError::config(format!("task.grip.fingers[{i}].axes"), "select at least one axis"));
                    }
                }
                g.finger_nodes.check("task.grip.finger_nodes", mesh)?;
                non_negative("task.grip.weights.alpha", g.weights.alpha)?;
                non_negative("task.grip.weights.beta", g.weights.beta)?;
                if g.iterations == 0 {
                    return Err(CliError::config("task.grip.iterations", "must be at least 1"));
                }
                if n_act == 0 {
                    return Err(CliError::config("actuators", "grip needs at least one actuator"));
                }
                if let Some(t) = g.trust {
                    positive("task.grip.trust", t)?;
                }
                positive("task.grip.force_ratio", g.force_ratio)?;
                positive("task.grip.closure_tolerance", g.closure_tolerance)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "bodies": [{"mesh": {"beam": {"dimensions": [0.1, 0.01, 0.01], "resolution": [4, 1, 1]}}}],
        "materials": [{"law": "neo_hookean", "young": 1e5, "poisson": 0.3, "density": 1000}],
        "sim": {"h": 0.01, "gravity": [0, 0, -9.81], "fixed": {"box": {"min": [0, -1, -1], "max": [0, 1, 1]}}}
    }"#;

    fn parse(text: &str) -> Result<Scenario> {
        Scenario::parse(text, PathBuf::from("."))
    }

    #[test]
    fn minimal_scenario_builds() {
        let s = parse(MINIMAL).unwrap();
        let b = s.build().unwrap();
        assert_eq!(b.scene.mesh.tet_count(), 4 * 5);
        assert_eq!(b.scene.sim.dof_mask.fixed_nodes().count(), 4);
    }

    #[test]
    fn unknown_field_is_reported_with_position() {
        let text = MINIMAL.replace("\"density\"", "\"densty\"");
        match parse(&text) {
            Err(CliError::Config { field, message }) => {
                assert!(field.starts_with("line 3"), "{field}");
                assert!(message.contains("densty"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_name_the_field() {
        let cases = [
            (MINIMAL.replace("\"poisson\": 0.3", "\"poisson\": 0.5"), "materials[0].poisson"),
            (MINIMAL.replace("\"h\": 0.01", "\"h\": 0"), "sim.h"),
            (MINIMAL.replace("[4, 1, 1]", "[4, 0, 1]"), "bodies[0].mesh.beam.resolution"),
            (MINIMAL.replace("\"min\": [0, -1, -1]", "\"min\": [5, -1, -1]"), "sim.fixed"),
        ];
        for (text, want) in cases {
            match parse(&text) {
                Err(CliError::Config { field, .. }) => assert_eq!(field, want),
                other => panic!("{want}: {other:?}"),
            }
        }
    }

    #[test]
    fn missing_mesh_file_is_a_config_error() {
        let text = MINIMAL.replace(
            r#"{"beam": {"dimensions": [0.1, 0.01, 0.01], "resolution": [4, 1, 1]}}"#,
            r#"{"file": {"path": "no/such/mesh.json"}}"#,
        );
        match parse(&text) {
            Err(CliError::Config { field, .. }) => assert_eq!(field, "bodies[0].mesh.file.path"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cable_path_follows_the_order_axis() {
        let text = MINIMAL.replace(
            "\"sim\"",
            r#""actuators": [{"kind": {"cable": {"nodes": {"box": {"min": [0, 0, 0], "max": [1, 0, 0]}}, "order": "-x"}}, "bounds": [0, 1]}],
               "sim""#,
        );
        let b = parse(&text).unwrap().build().unwrap();
        let softdiff_core::actuation::ActuatorKind::Cable { path, .. } = &b.scene.actuators[0].kind else { panic!() };
        let xs: Vec<f64> = path.iter().map(|&i| b.scene.mesh.rest_positions()[i].x).collect();
        assert_eq!(xs.len(), 5);
        assert!(xs.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn config_round_trips_through_json() {
        let s = parse(MINIMAL).unwrap();
        let text = serde_json::to_string(&s.config).unwrap();
        assert_eq!(parse(&text).unwrap().config, s.config);
    }
}
