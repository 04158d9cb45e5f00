use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softdiff_core::collision::Obstacle;
use softdiff_core::constitutive::{Law, MaterialParams, Materials};
use softdiff_core::contact::{solve, DelassusProblem, SolverSettings};
use softdiff_core::dynamics::SimParams;
use softdiff_core::mesh::generate_beam;
use softdiff_core::oracles::{oracle_box_qp, oracle_dense_step, oracle_ncp};
use softdiff_core::scene::Scene;
use softdiff_core::tasks::{solve_box_qp, BoxQp};
use softdiff_core::{DMat, DVec, Vec3};

fn random_problem(rng: &mut ChaCha8Rng, nc: usize) -> DelassusProblem {
    let n = 3 * nc;
    let b = DMat::from_fn(n, n + 2, |_, _| rng.gen::<f64>() - 0.5);
    let g_mat = &b * b.transpose() + DMat::identity(n, n) * 1e-3;
    let g = DVec::from_fn(n, |_, _| rng.gen::<f64>() - 0.6);
    let mu = (0..nc).map(|_| rng.gen::<f64>()).collect();
    DelassusProblem::new(g_mat, g, mu).unwrap()
}

#[test]
fn solvers_match_mode_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..60 {
        let p = random_problem(&mut rng, 1 + trial % 4);
        let sols = oracle_ncp(&p.g_mat, &p.g, &p.mu).unwrap();
        for settings in [SolverSettings::pgs(), SolverSettings::admm()] {
            let s = solve(&p, &settings).unwrap();
            let err = sols.iter().map(|o| (&o.sigma - &s.sigma).amax()).fold(f64::INFINITY, f64::min);
            assert!(err <= 1e-6, "trial {trial} {:?}: {err:e} ({} oracle solutions)", settings.kind, sols.len());
        }
    }
}

fn beam_on_plane(law: Law, mu: f64) -> Scene {
    let mesh = generate_beam(Vec3::new(0.04, 0.01, 0.01), [2, 1, 1]).unwrap();
    let mat = MaterialParams::new(law, 1e5, 0.3, 1000.0);
    let mut sim = SimParams::new(0.01);
    sim.gravity = Vec3::new(1.0, 0.5, -9.81);
    let mut s = Scene::new(mesh.clone(), Materials::uniform(mat, mesh.tet_count()), sim);
    // tilted so that only one end touches
    s.obstacles.push(Obstacle::plane(Vec3::new(0.0, 0.0, -2e-4), Vec3::new(0.3, 0.0, 1.0).normalize(), mu));
    s
}

#[test]
fn dense_step_matches_simulator() {
    for (law, mu) in [(Law::NeoHookean, 0.5), (Law::StVK, 0.1), (Law::Corotational, 0.0)] {
        let scene = beam_on_plane(law, mu);
        let mut state = scene.rest_state();
        for step in 0..4 {
            let rec = scene.step(&state, &DVec::zeros(0)).unwrap();
            let o = oracle_dense_step(&scene, &rec).unwrap();
            assert!(rec.contacts.len() <= 4);
            let vscale = o.v_free.amax().max(1e-12);
            assert!((&o.v_free - &rec.result.v_free).amax() <= 1e-8 * vscale, "{law:?} step {step}");
            assert!((&o.v_f - &rec.result.v_f).amax() <= 1e-6 * vscale, "{law:?} step {step}");
            assert!((&o.sigma - &rec.ncp.sigma).amax() <= 1e-6 * rec.problem.g.amax().max(1e-12), "{law:?} step {step}");
            state = rec.next_state();
        }
    }
}

#[test]
fn box_qp_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let n = rng.gen_range(1..=6);
        let b = DMat::from_fn(n, n, |_, _| rng.gen::<f64>() - 0.5);
        let q_mat = &b * b.transpose() + DMat::identity(n, n) * 0.1;
        let q = DVec::from_fn(n, |_, _| 2.0 * rng.gen::<f64>() - 1.0);
        let lower = DVec::from_fn(n, |_, _| -rng.gen::<f64>());
        let upper = DVec::from_fn(n, |_, _| rng.gen::<f64>());
        let reference = oracle_box_qp(&q_mat, &q, &lower, &upper).unwrap();
        let x = solve_box_qp(&BoxQp::new(q_mat, q, lower, upper).unwrap(), 1e-12, 200).unwrap();
        assert!((&x - &reference).amax() < 1e-8);
    }
}

