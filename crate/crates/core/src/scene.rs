//! A full simulation step: assembly, free motion, actuation, collision
//! detection, contact NCP, corrections. Every intermediate is kept on the
//! returned [`StepRecord`] so sensitivities can be evaluated afterwards.

use alloc::vec::Vec;

use crate::actuation::{self, ActuatorSpec};
use crate::collision::{self, ContactKey, ContactSet, DetectionParams, Obstacle};
use crate::constitutive::Materials;
use crate::contact::{self, ContactMode, DelassusProblem, NcpSolution, SolverSettings};
use crate::dynamics::{self, SimParams, State, StepResult, SystemAssembly};
use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, DVec};
use crate::mesh::TetMesh;

#[derive(Debug, Clone)]
pub struct Scene {
    pub mesh: TetMesh,
    pub materials: Materials,
    pub sim: SimParams,
    pub actuators: Vec<ActuatorSpec>,
    pub obstacles: Vec<Obstacle>,
    pub detection: DetectionParams,
    pub solver: SolverSettings,
}

impl Scene {
    pub fn new(mesh: TetMesh, materials: Materials, sim: SimParams) -> Self {
        Self {
            mesh,
            materials,
            sim,
            actuators: Vec::new(),
            obstacles: Vec::new(),
            detection: DetectionParams::default(),
            solver: SolverSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.materials.validate(&self.mesh)?;
        self.sim.validate(&self.mesh)?;
        actuation::validate_all(&self.actuators, self.mesh.node_count())?;
        self.obstacles.iter().try_for_each(|o| o.validate())
    }

    pub fn actuator_count(&self) -> usize {
        self.actuators.len()
    }

    pub fn rest_state(&self) -> State {
        State::at_rest(&self.mesh)
    }

    /// One step from `state` with actuation `lambda_a`.
    pub fn step(&self, state: &State, lambda_a: &DVec) -> Result<StepRecord> {
        if lambda_a.len() != self.actuators.len() {
            return Err(Error::DimensionMismatch {
                what: "actuation vector",
                expected: self.actuators.len(),
                found: lambda_a.len(),
            });
        }
        let assembly = dynamics::assemble(&self.mesh, &self.materials, state, &self.sim)?;
        let v_free = dynamics::free_velocity(&assembly, state);
        let h_a = actuation::actuation_jacobian(&self.actuators, &state.x)?;
        let delta_a = dynamics::correction(&assembly, &h_a, lambda_a, "actuation forces")?;
        let contacts = collision::detect(&self.mesh, &state.x, &self.obstacles, &self.detection)?;
        let problem = contact::build_delassus(&assembly, &contacts.jacobian, &contacts.frictions(), &v_free, &delta_a)?;
        let ncp = contact::solve(&problem, &self.solver)?;
        let delta_c = dynamics::correction(&assembly, &contacts.jacobian, &ncp.lambda, "contact forces")?;
        let result = dynamics::finish(&assembly, &state.x, v_free, delta_a, delta_c);
        Ok(StepRecord { state: state.clone(), lambda_a: lambda_a.clone(), assembly, h_a, contacts, problem, ncp, result })
    }

    /// Runs `steps` steps with constant actuation and returns every record.
    pub fn simulate(&self, state: &State, lambda_a: &DVec, steps: usize) -> Result<Vec<StepRecord>> {
        let mut out: Vec<StepRecord> = Vec::with_capacity(steps);
        let mut s = state.clone();
        for _ in 0..steps {
            let r = self.step(&s, lambda_a)?;
            s = r.next_state();
            out.push(r);
        }
        Ok(out)
    }

    /// Final state after `steps` steps with constant actuation.
    pub fn rollout(&self, state: &State, lambda_a: &DVec, steps: usize) -> Result<State> {
        let mut s = state.clone();
        for _ in 0..steps {
            s = self.step(&s, lambda_a)?.next_state();
        }
        Ok(s)
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    /// state at the start of the step
    pub state: State,
    pub lambda_a: DVec,
    pub assembly: SystemAssembly,
    pub h_a: CsrMatrix,
    pub contacts: ContactSet,
    pub problem: DelassusProblem,
    pub ncp: NcpSolution,
    pub result: StepResult,
}

impl StepRecord {
    pub fn next_state(&self) -> State {
        State { x: self.result.x_f.clone(), v: self.result.v_f.clone(), t: self.state.t + self.assembly.h }
    }

    pub fn lambda_c(&self) -> &DVec {
        &self.ncp.lambda
    }

    /// Contact keys paired with their modes, sorted; equal patterns mean the
    /// same set of contacts in the same modes.
    pub fn mode_pattern(&self) -> Vec<(ContactKey, ContactMode)> {
        let mut p: Vec<_> = self.contacts.keys().into_iter().zip(self.ncp.modes.iter().copied()).collect();
        p.sort();
        p
    }

    pub fn has_ambiguous_mode(&self) -> bool {
        self.ncp.ambiguous.iter().any(|&a| a)
    }

    /// Nodal contact forces `H_cᵀ λ_c` (N).
    pub fn contact_nodal_forces(&self) -> DVec {
        self.contacts.nodal_forces(&self.ncp.lambda)
    }

    /// Sum of normal contact force components (N).
    pub fn total_normal_force(&self) -> f64 {
        (0..self.contacts.len()).fold(0.0, |acc, k| acc + self.ncp.lambda[3 * k + 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::{Law, MaterialParams};
    use crate::linalg::Vec3;
    use crate::mesh::generate_beam;

    fn beam_scene() -> Scene {
        let mesh = generate_beam(Vec3::new(0.1, 0.02, 0.02), [5, 1, 1]).unwrap();
        let mat = MaterialParams::new(Law::NeoHookean, 1e5, 0.3, 1000.0).with_damping(0.0, 0.01);
        let mut sim = SimParams::new(0.01);
        sim.gravity = Vec3::new(0.0, 0.0, -9.81);
        let mut scene = Scene::new(mesh.clone(), Materials::uniform(mat, mesh.tet_count()), sim);
        scene.obstacles.push(Obstacle::plane(Vec3::new(0.0, 0.0, -5e-4), Vec3::z(), 0.5));
        scene
    }

    #[test]
    fn resting_beam_does_not_penetrate_and_step_is_consistent() {
        let scene = beam_scene();
        let mut s = scene.rest_state();
        for _ in 0..5 {
            let r = scene.step(&s, &DVec::zeros(0)).unwrap();
            assert!(!r.contacts.is_empty());
            // σ reproduced by the full system
            let sigma = r.contacts.jacobian.mul_vec(&r.result.v_f);
            assert!((&sigma - &r.ncp.sigma).amax() < 1e-8);
            let xf = &r.state.x + &r.result.v_f * r.assembly.h;
            assert_eq!(xf, r.result.x_f);
            s = r.next_state();
        }
        for i in 0..scene.mesh.node_count() {
            assert!(s.x[3 * i + 2] > -5e-4 - 1e-9);
        }
    }
}
