//! The CLI commands. Each runs a scenario, writes CSV files into the output
//! directory and returns a typed outcome; [`Report`] condenses an outcome
//! into a pass flag and a one-line summary.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use softdiff_core::dynamics::State;
use softdiff_core::scene::Scene;
use softdiff_core::sensitivity::{fd_oracle, relative_error, rollout_sensitivity, DiffVariable, FdColumn};
use softdiff_core::tasks::{
    identify_material, run_grip, run_inverse_dynamics, ControlOutcome, EndEffector, Experiment, GripController,
    GripOutcome, GripWeights, LmConfig, LmOutcome,
};
use softdiff_core::{DMat, DVec, Error, Vec3};

use crate::config::{
    ControlTask, GoalConfig, GradcheckTask, GripTask, IdentifyTask, NodeSet, Scenario, TaskConfig, VariableConfig,
};
use crate::error::{CliError, Result};
use crate::io::mesh_to_vtk;

/// Absolute relative-error floor of gradient checks.
pub const REL_ERR_FLOOR: f64 = 1e-12;
/// Columns are also compared against this fraction of the largest column of
/// their variable block: central differences cannot resolve columns many
/// orders below their block, and exactly-zero columns would otherwise compare
/// roundoff with roundoff.
pub const BLOCK_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Gradcheck,
    Identify,
    Control,
    Grip,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub passed: bool,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

struct Output {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Output {
    fn new(scenario: &Scenario, opts: &RunOptions) -> Result<Self> {
        let dir = opts.out.clone().unwrap_or_else(|| scenario.config.output.dir.clone());
        std::fs::create_dir_all(&dir).map_err(|source| CliError::Io { path: dir.clone(), source })?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let path = self.dir.join(name);
        let fail = |e: csv::Error| CliError::File { path: path.clone(), message: e.to_string() };
        let mut w = csv::Writer::from_path(&path).map_err(fail)?;
        w.write_record(header).map_err(fail)?;
        for r in rows {
            w.write_record(r).map_err(fail)?;
        }
        w.flush().map_err(|source| CliError::Io { path: path.clone(), source })?;
        self.files.push(path);
        Ok(())
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| CliError::Io { path: parent.to_owned(), source })?;
        }
        std::fs::write(&path, text).map_err(|source| CliError::Io { path: path.clone(), source })?;
        self.files.push(path);
        Ok(())
    }
}

fn s(v: f64) -> String {
    format!("{v}")
}

fn header(fixed: &[&str], extra: impl IntoIterator<Item = String>) -> Vec<String> {
    fixed.iter().map(|h| h.to_string()).chain(extra).collect()
}

fn lambda_header(n: usize) -> impl Iterator<Item = String> {
    (0..n).map(|i| format!("lambda_a{i}"))
}

/// Worker pool for embarrassingly parallel loops, capped by SOFTDIFF_THREADS.
pub fn thread_pool() -> rayon::ThreadPool {
    let n = std::env::var("SOFTDIFF_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
    rayon::ThreadPoolBuilder::new().num_threads(n).build().expect("thread pool")
}

pub fn run(command: Command, scenario: &Scenario, opts: &RunOptions) -> Result<Report> {
    let task = scenario.config.task.as_ref();
    let wrong = |want: &str| {
        CliError::config("task", format!("`{want}` needs a `{want}` task block, found {}", task.map_or("none", |t| t.name())))
    };
    match command {
        Command::Simulate => simulate(scenario, opts).map(|o| o.report()),
        Command::Gradcheck => match task {
            Some(TaskConfig::Gradcheck(t)) => gradcheck(scenario, t, opts).map(|o| o.report()),
            _ => Err(wrong("gradcheck")),
        },
        Command::Identify => match task {
            Some(TaskConfig::Identify(t)) => identify(scenario, t, opts).map(|o| o.report()),
            _ => Err(wrong("identify")),
        },
        Command::Control => match task {
            Some(TaskConfig::Control(t)) => control(scenario, t, opts).map(|o| o.report()),
            _ => Err(wrong("control")),
        },
        Command::Grip => match task {
            Some(TaskConfig::Grip(t)) => grip(scenario, t, opts).map(|o| o.report()),
            _ => Err(wrong("grip")),
        },
    }
}

#[derive(Debug, Clone)]
pub struct SimulateOutcome {
    pub steps: usize,
    pub final_state: State,
    /// Σ λ_N of the last step (N)
    pub final_normal_force: f64,
    /// |g| times the total mass (N)
    pub weight: f64,
    /// smallest contact gap of the last step, +∞ without contacts (m)
    pub min_gap: f64,
    pub max_speed: f64,
    pub files: Vec<PathBuf>,
}

impl SimulateOutcome {
    pub fn report(&self) -> Report {
        Report {
            passed: true,
            summary: format!(
                "simulated {} steps; last step normal force {:.6e} N (weight {:.6e} N), max speed {:.3e} m/s",
                self.steps, self.final_normal_force, self.weight, self.max_speed
            ),
            files: self.files.clone(),
        }
    }
}

fn positions_row<'a>(x: &'a DVec, nodes: &'a [usize]) -> impl Iterator<Item = String> + 'a {
    nodes.iter().flat_map(move |&i| (0..3).map(move |c| s(x[3 * i + c])))
}

pub fn simulate(scenario: &Scenario, opts: &RunOptions) -> Result<SimulateOutcome> {
    let cfg = &scenario.config;
    let built = scenario.build()?;
    let scene = &built.scene;
    let steps = opts.steps.unwrap_or(cfg.sim.steps);
    let nodes = cfg.output.nodes.resolve(&scene.mesh);
    let mut out = Output::new(scenario, opts)?;
    let head = header(
        &["step", "t", "contacts", "lambda_norm", "normal_force"],
        nodes.iter().flat_map(|i| ["x", "y", "z"].map(|c| format!("{c}{i}"))),
    );
    let mut state = scene.rest_state();
    let mut rows = Vec::with_capacity(steps + 1);
    rows.push(["0", "0", "0", "0", "0"].map(String::from).into_iter().chain(positions_row(&state.x, &nodes)).collect());
    let vtk = |out: &mut Output, k: usize, x: &DVec| out.text(&format!("vtk/frame_{k:05}.vtk"), &mesh_to_vtk(&scene.mesh, Some(x), "softdiff"));
    if cfg.output.vtk_every.is_some() {
        vtk(&mut out, 0, &state.x)?;
    }
    let mut last = None;
    for k in 1..=steps {
        let rec = scene.step(&state, &built.actuation)?;
        state = rec.next_state();
        let mut row = vec![
            k.to_string(),
            s(state.t),
            rec.contacts.len().to_string(),
            s(rec.ncp.lambda.norm()),
            s(rec.total_normal_force()),
        ];
        row.extend(positions_row(&state.x, &nodes));
        rows.push(row);
        if cfg.output.vtk_every.is_some_and(|e| k % e == 0) {
            vtk(&mut out, k, &state.x)?;
        }
        last = Some(rec);
    }
    out.csv("trajectory.csv", &head, &rows)?;
    let (final_normal_force, min_gap, weight) = match &last {
        Some(r) => (
            r.total_normal_force(),
            r.contacts.contacts.iter().map(|c| c.gap).fold(f64::INFINITY, f64::min),
            r.assembly.mass.sum() / 3.0 * scene.sim.gravity.norm(),
        ),
        None => (0.0, f64::INFINITY, 0.0),
    };
    Ok(SimulateOutcome {
        steps,
        max_speed: state.v.amax(),
        final_state: state,
        final_normal_force,
        weight,
        min_gap,
        files: out.files,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnFlag {
    Stable,
    /// the FD runs saw a different contact-mode pattern
    ModeChanged,
    /// the analytic rollout hit a mode boundary
    Boundary,
}

impl ColumnFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            ColumnFlag::Stable => "stable",
            ColumnFlag::ModeChanged => "mode_changed",
            ColumnFlag::Boundary => "boundary",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradColumn {
    pub variable: &'static str,
    pub index: usize,
    pub rel_err_x: f64,
    pub rel_err_v: f64,
    pub fd_step: f64,
    pub flag: ColumnFlag,
}

impl GradColumn {
    pub fn rel_err(&self) -> f64 {
        self.rel_err_x.max(self.rel_err_v)
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    pub columns: Vec<GradColumn>,
    pub tolerance: f64,
    pub contacts: usize,
    pub files: Vec<PathBuf>,
}

impl GradcheckOutcome {
    pub fn stable(&self) -> impl Iterator<Item = &GradColumn> {
        self.columns.iter().filter(|c| c.flag == ColumnFlag::Stable)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.stable().map(GradColumn::rel_err).fold(0.0, f64::max)
    }

    /// Every stable column within tolerance, and at least one stable column.
    pub fn passed(&self) -> bool {
        self.stable().count() > 0 && self.stable().all(|c| c.rel_err() <= self.tolerance)
    }

    pub fn report(&self) -> Report {
        let excluded: Vec<String> = self
            .columns
            .iter()
            .filter(|c| c.flag != ColumnFlag::Stable)
            .map(|c| format!("{}[{}]", c.variable, c.index))
            .collect();
        let mut summary = format!(
            "{} columns, {} stable, max rel err {:.3e} (tol {:e}), {} contacts",
            self.columns.len(),
            self.stable().count(),
            self.max_rel_err(),
            self.tolerance,
            self.contacts
        );
        if !excluded.is_empty() {
            summary += &format!("; excluded: {}", excluded.join(" "));
        }
        Report { passed: self.passed(), summary, files: self.files.clone() }
    }
}

fn diff_variables(task: &GradcheckTask, scene: &Scene, seed: u64) -> Vec<DiffVariable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dofs = |nodes: &NodeSet| -> Vec<usize> {
        nodes.resolve(&scene.mesh).into_iter().flat_map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect()
    };
    task.variables
        .iter()
        .map(|v| {
            let var = match v {
                VariableConfig::Position { nodes } => DiffVariable::positions(dofs(nodes)),
                VariableConfig::Velocity { nodes } => DiffVariable::velocities(dofs(nodes)),
                VariableConfig::Actuation { indices } => {
                    DiffVariable::actuation(indices.clone().unwrap_or_else(|| (0..scene.actuator_count()).collect()))
                }
                VariableConfig::Young { material } => {
                    DiffVariable::material(*material, softdiff_core::constitutive::MaterialParameter::Young)
                }
                VariableConfig::Poisson { material } => {
                    DiffVariable::material(*material, softdiff_core::constitutive::MaterialParameter::Poisson)
                }
            };
            match task.sample {
                Some(k) if k < var.indices.len() => {
                    let mut pick = rand::seq::index::sample(&mut rng, var.indices.len(), k).into_vec();
                    pick.sort_unstable();
                    DiffVariable { kind: var.kind, indices: pick.into_iter().map(|p| var.indices[p]).collect() }
                }
                _ => var,
            }
        })
        .collect()
}

/// Central-difference columns of every variable, in order, spread over the
/// worker pool.
fn fd_columns(
    scene: &Scene,
    state: &State,
    lambda_a: &DVec,
    steps: usize,
    vars: &[DiffVariable],
    fd_step: Option<f64>,
) -> Result<Vec<FdColumn>> {
    let pool = thread_pool();
    let chunk = vars.iter().map(|v| v.indices.len()).sum::<usize>().div_ceil(pool.current_num_threads()).max(1);
    let jobs: Vec<DiffVariable> = vars
        .iter()
        .flat_map(|v| v.indices.chunks(chunk).map(|c| DiffVariable { kind: v.kind, indices: c.to_vec() }))
        .collect();
    let results: Vec<std::result::Result<Vec<FdColumn>, Error>> =
        pool.install(|| jobs.par_iter().map(|j| fd_oracle(scene, state, lambda_a, steps, j, fd_step)).collect());
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

pub fn gradcheck(scenario: &Scenario, task: &GradcheckTask, opts: &RunOptions) -> Result<GradcheckOutcome> {
    let built = scenario.build()?;
    let scene = &built.scene;
    let la = &built.actuation;
    let seed = opts.seed.unwrap_or(scenario.config.seed);
    let warm = scene.rollout(&scene.rest_state(), la, task.warmup)?;
    let steps = opts.steps.unwrap_or(task.steps);
    let vars = diff_variables(task, scene, seed);
    let analytic = rollout_sensitivity(scene, &warm, la, steps, &vars)?;
    let fd = fd_columns(scene, &warm, la, steps, &vars, task.fd_step)?;
    let mut columns = Vec::with_capacity(fd.len());
    let mut j = 0;
    for v in &vars {
        let block = j..j + v.indices.len();
        let scale = |m: &DMat, pick: fn(&FdColumn) -> &DVec| {
            block.clone().map(|k| m.column(k).amax().max(pick(&fd[k]).amax())).fold(0.0, f64::max)
        };
        let floor_x = (BLOCK_FLOOR * scale(&analytic.dx, |f| &f.dx_f)).max(REL_ERR_FLOOR);
        let floor_v = (BLOCK_FLOOR * scale(&analytic.dv, |f| &f.dv_f)).max(REL_ERR_FLOOR);
        for &index in &v.indices {
            let f = &fd[j];
            let ax = analytic.dx.column(j).clone_owned();
            let av = analytic.dv.column(j).clone_owned();
            let flag = if f.mode_changed {
                ColumnFlag::ModeChanged
            } else if analytic.mode_boundary {
                ColumnFlag::Boundary
            } else {
                ColumnFlag::Stable
            };
            columns.push(GradColumn {
                variable: v.name(),
                index,
                rel_err_x: relative_error(&ax, &f.dx_f, floor_x),
                rel_err_v: relative_error(&av, &f.dv_f, floor_v),
                fd_step: f.step,
                flag,
            });
            j += 1;
        }
    }
    let outcome = GradcheckOutcome {
        columns,
        tolerance: task.tolerance,
        contacts: analytic.last.as_ref().map_or(0, |r| r.contacts.len()),
        files: Vec::new(),
    };
    let mut out = Output::new(scenario, opts)?;
    let rows: Vec<Vec<String>> = outcome
        .columns
        .iter()
        .map(|c| {
            let pass = c.flag != ColumnFlag::Stable || c.rel_err() <= task.tolerance;
            vec![
                c.variable.to_string(),
                c.index.to_string(),
                s(c.rel_err_x),
                s(c.rel_err_v),
                s(c.fd_step),
                c.flag.as_str().to_string(),
                pass.to_string(),
            ]
        })
        .collect();
    out.csv(
        "gradcheck.csv",
        &header(&["variable", "index", "rel_err_x", "rel_err_v", "fd_step", "flag", "pass"], []),
        &rows,
    )?;
    Ok(GradcheckOutcome { files: out.files, ..outcome })
}

#[derive(Debug, Clone)]
pub struct IdentifyOutcome {
    /// `None` when LM gave up after repeated rejections
    pub lm: Option<LmOutcome>,
    pub truth: f64,
    pub tolerance: f64,
    pub files: Vec<PathBuf>,
}

impl IdentifyOutcome {
    pub fn relative_error(&self) -> Option<f64> {
        self.lm.as_ref().map(|o| (o.estimate - self.truth).abs() / self.truth.abs())
    }

    pub fn passed(&self) -> bool {
        matches!((&self.lm, self.relative_error()), (Some(o), Some(e)) if o.converged && e <= self.tolerance)
    }

    pub fn report(&self) -> Report {
        let summary = match &self.lm {
            Some(o) => format!(
                "estimate {:.6e} (truth {:.6e}, rel err {:.3e}), {} after {} iterations",
                o.estimate,
                self.truth,
                self.relative_error().unwrap_or(f64::NAN),
                if o.converged { "converged" } else { "not converged" },
                o.iterations
            ),
            None => "not converged: too many rejected steps".to_string(),
        };
        Report { passed: self.passed(), summary, files: self.files.clone() }
    }
}

pub fn identify(scenario: &Scenario, task: &IdentifyTask, opts: &RunOptions) -> Result<IdentifyOutcome> {
    let built = scenario.build()?;
    let scene = &built.scene;
    let initial = scene.rest_state();
    let steps = opts.steps.unwrap_or(task.steps);
    let cfg = LmConfig { max_iter: task.max_iter, ..LmConfig::new(task.material, task.parameter.into()) };
    let exp = Experiment { scene, initial: &initial, lambda_a: &built.actuation, steps };
    let target = exp.simulate(&cfg, task.truth)?;
    let lm = match identify_material(&exp, &target, task.initial, &cfg) {
        Ok(o) => Some(o),
        Err(Error::Diverged { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    let mut out = Output::new(scenario, opts)?;
    let rows: Vec<Vec<String>> = lm
        .iter()
        .flat_map(|o| &o.trace)
        .map(|t| {
            vec![
                t.iteration.to_string(),
                s(t.param),
                s(t.cost),
                s(t.damping),
                t.accepted.to_string(),
                t.mode_boundary.to_string(),
            ]
        })
        .collect();
    out.csv(
        "identify_trace.csv",
        &header(&["iteration", "param", "cost", "damping", "accepted", "mode_boundary"], []),
        &rows,
    )?;
    Ok(IdentifyOutcome { lm, truth: task.truth, tolerance: task.tolerance, files: out.files })
}

#[derive(Debug, Clone)]
pub struct ControlRun {
    pub outcome: ControlOutcome,
    pub goal: Vec3,
    pub success_ratio: f64,
    /// every iterate lies within the actuator bounds
    pub bounds_respected: bool,
    pub files: Vec<PathBuf>,
}

impl ControlRun {
    pub fn ratios(&self) -> Vec<f64> {
        let d0 = self.outcome.trace[0].distance.max(f64::MIN_POSITIVE);
        self.outcome.trace.iter().map(|t| t.distance / d0).collect()
    }

    /// First iteration whose distance ratio is at or below the success ratio.
    pub fn reached_at(&self) -> Option<usize> {
        self.ratios().iter().position(|&r| r <= self.success_ratio)
    }

    pub fn final_ratio(&self) -> f64 {
        self.ratios().last().copied().unwrap_or(1.0)
    }

    pub fn passed(&self) -> bool {
        self.bounds_respected && self.final_ratio() <= self.success_ratio
    }

    pub fn report(&self) -> Report {
        let r = self.ratios();
        let summary = format!(
            "final distance ratio {:.4e} (best {:.4e}, target {}), {}; bounds {}",
            self.final_ratio(),
            r.iter().copied().fold(f64::INFINITY, f64::min),
            self.success_ratio,
            match self.reached_at() {
                Some(k) => format!("first reached at iteration {k}"),
                None => "not reached".into(),
            },
            if self.bounds_respected { "respected" } else { "violated" }
        );
        Report { passed: self.passed(), summary, files: self.files.clone() }
    }
}

fn effector(scene: &Scene, nodes: &NodeSet, axes: [bool; 3]) -> EndEffector {
    let mut e = EndEffector::new(nodes.resolve(&scene.mesh));
    e.axes = axes;
    e
}

fn within_bounds(scene: &Scene, la: &DVec) -> bool {
    scene.actuators.iter().zip(la.iter()).all(|(a, &v)| {
        let tol = 1e-9 * a.bounds.0.abs().max(a.bounds.1.abs()).max(1e-12);
        v >= a.bounds.0 - tol && v <= a.bounds.1 + tol
    })
}

pub fn control(scenario: &Scenario, task: &ControlTask, opts: &RunOptions) -> Result<ControlRun> {
    let built = scenario.build()?;
    let scene = &built.scene;
    let ee = effector(scene, &task.effector, task.axes);
    let rest = scene.rest_state();
    let goal = match &task.goal {
        GoalConfig::Point(p) => Vec3::new(p[0], p[1], p[2]),
        GoalConfig::Rollout { actuation, steps } => {
            ee.position(&scene.rollout(&rest, &DVec::from_column_slice(actuation), *steps)?.x)
        }
    };
    let iterations = opts.steps.unwrap_or(task.iterations);
    let outcome = run_inverse_dynamics(scene, &rest, &built.actuation, &ee, &goal, iterations, task.trust)?;
    let bounds_respected = outcome.trace.iter().skip(1).all(|t| within_bounds(scene, &t.lambda_a));
    let mut run = ControlRun { outcome, goal, success_ratio: task.success_ratio, bounds_respected, files: Vec::new() };
    let mut out = Output::new(scenario, opts)?;
    let ratios = run.ratios();
    let rows: Vec<Vec<String>> = run
        .outcome
        .trace
        .iter()
        .zip(&ratios)
        .map(|(t, &r)| {
            let mut row = vec![t.iteration.to_string(), s(t.distance), s(r), s(t.contact_force)];
            row.extend(t.lambda_a.iter().map(|&v| s(v)));
            row
        })
        .collect();
    out.csv(
        "control_trace.csv",
        &header(&["iteration", "distance", "ratio", "contact_force"], lambda_header(scene.actuator_count())),
        &rows,
    )?;
    run.files = out.files;
    Ok(run)
}

#[derive(Debug, Clone)]
pub struct GripRun {
    pub heuristic: GripOutcome,
    pub optimized: GripOutcome,
    pub force_ratio: f64,
    pub closure_tolerance: f64,
    pub files: Vec<PathBuf>,
}

impl GripRun {
    pub fn force_reduction(&self) -> f64 {
        self.optimized.final_force / self.heuristic.final_force.max(f64::MIN_POSITIVE)
    }

    pub fn closure_change(&self) -> f64 {
        (self.optimized.final_closure - self.heuristic.final_closure).abs() / self.heuristic.final_closure.max(f64::MIN_POSITIVE)
    }

    pub fn passed(&self) -> bool {
        self.force_reduction() <= self.force_ratio && self.closure_change() <= self.closure_tolerance
    }

    pub fn report(&self) -> Report {
        Report {
            passed: self.passed(),
            summary: format!(
                "heuristic closure {:.5e} force {:.5e}; optimized closure {:.5e} force {:.5e}; force ratio {:.4} (max {}), closure change {:.4} (max {})",
                self.heuristic.final_closure,
                self.heuristic.final_force,
                self.optimized.final_closure,
                self.optimized.final_force,
                self.force_reduction(),
                self.force_ratio,
                self.closure_change(),
                self.closure_tolerance
            ),
            files: self.files.clone(),
        }
    }
}

pub fn grip(scenario: &Scenario, task: &GripTask, opts: &RunOptions) -> Result<GripRun> {
    let built = scenario.build()?;
    let scene = &built.scene;
    let targets: Vec<(EndEffector, Vec3)> = task
        .fingers
        .iter()
        .map(|f| (effector(scene, &f.tip, f.axes), Vec3::new(f.goal[0], f.goal[1], f.goal[2])))
        .collect();
    let nodes = task.finger_nodes.resolve(&scene.mesh);
    let weights = GripWeights { alpha: task.weights.alpha, beta: task.weights.beta };
    let iterations = opts.steps.unwrap_or(task.iterations);
    let rest = scene.rest_state();
    let pool = thread_pool();
    let (heuristic, optimized) = pool.install(|| {
        rayon::join(
            || run_grip(scene, &rest, &targets, &nodes, GripController::ConstantMax, weights, iterations, None),
            || run_grip(scene, &rest, &targets, &nodes, GripController::Optimized, weights, iterations, task.trust),
        )
    });
    let (heuristic, optimized) = (heuristic?, optimized?);
    let mut out = Output::new(scenario, opts)?;
    let rows: Vec<Vec<String>> = [("heuristic", &heuristic), ("optimized", &optimized)]
        .into_iter()
        .flat_map(|(name, o)| {
            o.trace.iter().map(move |t| {
                let mut row = vec![name.to_string(), t.iteration.to_string(), s(t.closure), s(t.force)];
                row.extend(t.lambda_a.iter().map(|&v| s(v)));
                row
            })
        })
        .collect();
    out.csv(
        "grip_trace.csv",
        &header(&["controller", "iteration", "closure", "force"], lambda_header(scene.actuator_count())),
        &rows,
    )?;
    Ok(GripRun {
        heuristic,
        optimized,
        force_ratio: task.force_ratio,
        closure_tolerance: task.closure_tolerance,
        files: out.files,
    })
}
