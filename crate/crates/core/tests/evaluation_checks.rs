mod common;

use common::*;
use ctrldelay::evaluation::{self, discretization_allowance, fundamental_identity_residual, lq_riccati_oracle};
use ctrldelay::{hjb, CostSpec, HamiltonianKind, Model, ModelParams, Policy, Selection, SimConfig, SpatialFn};

/// Relative oracle tolerance for the closed-loop cost of the quadratic problem.
const LQ_REL: f64 = 0.02;

#[test]
fn identity_holds_trivially_without_control_influence() {
    let model = Model::new(ModelParams::scalar(-0.3, 0.0, 0.5, |_| 0.0, 0.5, 1.0, 101)).unwrap();
    let cost = CostSpec {
        terminal: SpatialFn::GaussianWell {
            center: vec![0.5],
            width: 0.5,
            depth: 1.0,
            offset: 1.0,
        },
        running: Default::default(),
        hamiltonian: HamiltonianKind::QuadraticBox {
            theta: 0.5,
            lo: vec![-1.0],
            hi: vec![1.0],
        },
        growth: Default::default(),
    };
    let grids = ctrldelay::SolverGrids::new(32, vec![201], ctrldelay::QuadratureRule::gauss_hermite(20))
        .with_box(vec![-3.0], vec![3.0]);
    let vf = hjb::solve(&model, &cost, &grids).unwrap();
    let sel = Selection::new(cost.hamiltonian.clone());
    let init = ctrldelay::InitialState::constant(&model, vec![0.2], &[0.0], 0.0, model.grid_step()).unwrap();
    let cfg = SimConfig {
        record_paths: false,
        ..SimConfig::new(0.005, 4000, 17)
    };
    let allowance = discretization_allowance(evaluation::ALLOWANCE_COEFFICIENT, 1.0, 32, cfg.dt, &vf.grid);
    for policy in [Policy::Constant(vec![0.7]), Policy::Constant(vec![-1.0]), Policy::Feedback(ctrldelay::Closure { vf: &vf, sel: &sel })] {
        let r = fundamental_identity_residual(&vf, &sel, &model, &cost, &policy, &init, &cfg).unwrap();
        assert!(r.residual.abs() < 3.0 * r.stderr + allowance, "{r:?}");
        // the control only adds its own running cost, which the gap cancels exactly
        if let Policy::Constant(u) = &policy {
            let control_cost = 0.5 * 0.5 * u[0] * u[0];
            assert!((r.gap - control_cost).abs() < 1e-9, "gap {} vs {control_cost}", r.gap);
        }
    }
}

#[test]
fn feedback_cost_matches_riccati_value_on_quadratic_problem() {
    let cfg = load_config("lq.toml");
    let model = cfg.build_model().unwrap();
    let vf = hjb::solve(&model, &cfg.cost, &cfg.grids).unwrap();
    let sel = Selection::new(cfg.cost.hamiltonian.clone());
    let riccati = lq_riccati_oracle(&model, &cfg.cost, cfg.oracle.riccati_steps).unwrap();
    let init = cfg.initial_state(&model).unwrap();
    let sim = SimConfig {
        n_paths: 4000,
        record_paths: false,
        ..cfg.sim_config(&model)
    };
    let bundle = ctrldelay::simulator::simulate(
        &model,
        &cfg.cost,
        &Policy::Feedback(ctrldelay::Closure { vf: &vf, sel: &sel }),
        &init,
        &sim,
    )
    .unwrap();
    let est = evaluation::evaluate_cost(&bundle);
    let exact = riccati.value(0.0, &init.y0);
    assert!(
        (est.mean - exact).abs() < 3.0 * est.stderr + LQ_REL * exact.abs(),
        "J = {} ± {} vs {exact}",
        est.mean,
        est.stderr
    );
}

#[test]
fn finite_control_sets_are_flagged_outside_the_hypotheses() {
    let model = Model::new(ModelParams::scalar(-0.3, 0.5, 0.5, |_| 1.0, 0.5, 1.0, 101)).unwrap();
    let cost = CostSpec {
        terminal: SpatialFn::Cosine {
            freq: vec![1.0],
            amplitude: 1.0,
            phase: 0.0,
        },
        running: Default::default(),
        hamiltonian: HamiltonianKind::FiniteSet {
            controls: vec![vec![-1.0], vec![0.0], vec![1.0]],
            costs: vec![0.25, 0.0, 0.25],
        },
        growth: Default::default(),
    };
    let grids = ctrldelay::SolverGrids::new(16, vec![101], ctrldelay::QuadratureRule::gauss_hermite(20))
        .with_box(vec![-3.0], vec![3.0]);
    let vf = hjb::solve(&model, &cost, &grids).unwrap();
    let sel = Selection::new(cost.hamiltonian.clone());
    let init = ctrldelay::InitialState::constant(&model, vec![0.0], &[0.0], 0.0, model.grid_step()).unwrap();
    let cfg = SimConfig {
        record_paths: false,
        ..SimConfig::new(0.01, 500, 2)
    };
    let probes = evaluation::constant_probes(&cost.hamiltonian, 3);
    assert_eq!(probes.len(), 3);
    let report = evaluation::verify_optimality(&vf, &sel, &model, &cost, &init, &cfg, &probes, 0.05).unwrap();
    assert!(report.outside_hypotheses);
    assert!(report.to_text().contains("outside_hypotheses: true"));
}
