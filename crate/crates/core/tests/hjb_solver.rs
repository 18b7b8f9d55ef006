mod common;

use ctrldelay::gaussian::covariance;
use ctrldelay::hjb::{self, eval_grad_b, eval_value};
use ctrldelay::{
    ControlPath, CostSpec, Growth, HamiltonianKind, LiftedVector, Model, ModelParams, QuadratureRule, RunningCost,
    SolverGrids, SpatialFn, TimeProfile,
};
use nalgebra::DVector;

const RATIO_RANGE: (f64, f64) = (1.5, 4.5);
const FD_STEP: f64 = 1e-4;
const FD_REL: f64 = 1e-2;

fn delayed_model() -> Model {
    Model::new(ModelParams::scalar(-0.3, 0.5, 0.5, |_| 1.0, 0.5, 1.0, 101)).unwrap()
}

fn cost(terminal: SpatialFn) -> CostSpec {
    CostSpec {
        terminal,
        running: RunningCost {
            spatial: SpatialFn::Constant { value: 0.0 },
            time: TimeProfile::Harmonic {
                mean: 0.2,
                amplitude: 0.1,
                frequency: std::f64::consts::PI,
            },
        },
        hamiltonian: HamiltonianKind::QuadraticBox {
            theta: 0.5,
            lo: vec![-1.0],
            hi: vec![1.0],
        },
        growth: Growth::Bounded,
    }
}

fn well() -> SpatialFn {
    SpatialFn::GaussianWell {
        center: vec![1.0],
        width: 0.5,
        depth: 1.0,
        offset: 1.0,
    }
}

fn grids(levels: usize, nodes: usize) -> SolverGrids {
    SolverGrids::new(levels, vec![nodes], QuadratureRule::gauss_hermite(20)).with_box(vec![-3.0], vec![3.0])
}

fn sample_state(model: &Model) -> LiftedVector {
    let path = ControlPath::from_fn(-0.5, 0.0, 0.005, |s| vec![(4.0 * s).cos()]).unwrap();
    model.lift(&DVector::from_element(1, 0.2), &path, 0.0).unwrap()
}

#[test]
fn terminal_condition_is_exact_at_nodes() {
    let model = delayed_model();
    let c = cost(well());
    let vf = hjb::solve(&model, &c, &grids(16, 101)).unwrap();
    for (p, v) in vf.level_values(0).iter().enumerate() {
        assert_eq!(*v, c.terminal.eval(&vf.grid.point(p)));
    }
}

#[test]
fn refinement_differences_shrink_at_first_order() {
    let model = delayed_model();
    let c = cost(well());
    let probes = [-1.0, 0.0, 0.5, 1.0, 2.0];
    let values: Vec<Vec<f64>> = [(16, 51), (32, 101), (64, 201), (128, 401)]
        .iter()
        .map(|&(k, nodes)| {
            let vf = hjb::solve(&model, &c, &grids(k, nodes)).unwrap();
            probes.iter().map(|&y| vf.value_at_head(1.0, &[y]).value).collect()
        })
        .collect();
    let diff = |a: usize| -> f64 {
        values[a].iter().zip(&values[a + 1]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    for a in 0..2 {
        let ratio = diff(a) / diff(a + 1);
        assert!(ratio >= RATIO_RANGE.0 && ratio <= RATIO_RANGE.1, "ratio {ratio} at refinement {a}");
    }
}

#[test]
fn control_gradient_matches_finite_difference() {
    let model = delayed_model();
    // the interpolant's cell slopes differ from nodal central differences at first order in the step
    let vf = hjb::solve(&model, &cost(well()), &grids(64, 801)).unwrap();
    let x = sample_state(&model);
    let dir = model.apply_b(&DVector::from_element(1, 1.0)).unwrap();
    for &t in &[0.0, 0.3, 0.7, 0.95] {
        let grad = eval_grad_b(&vf, &model, t, &x).unwrap()[0];
        let v = |eps: f64| eval_value(&vf, &model, t, &x.axpy(eps, &dir)).unwrap().value;
        let fd = (v(FD_STEP) - v(-FD_STEP)) / (2.0 * FD_STEP);
        assert!((grad - fd).abs() / fd.abs().max(1e-3) < FD_REL, "t={t}: {grad} vs {fd}");
    }
}

#[test]
fn smooth_terminal_keeps_gradients_bounded() {
    let model = delayed_model();
    let c = cost(well());
    let vf = hjb::solve(&model, &c, &grids(64, 401)).unwrap();
    let terminal_sup = vf
        .grid
        .gradient_table(vf.level_values(0))
        .iter()
        .fold(0.0_f64, |a, g| a.max(g.abs()));
    let sup = vf.gradients.iter().fold(0.0_f64, |a, g| a.max(g.abs()));
    assert!(sup <= 2.0 * terminal_sup, "{sup} vs terminal {terminal_sup}");
}

#[test]
fn step_terminal_gradient_blows_up_at_most_like_inverse_square_root() {
    let model = delayed_model();
    let c = cost(SpatialFn::Step {
        direction: vec![1.0],
        shift: 0.5,
        amplitude: 1.0,
    });
    let vf = hjb::solve(&model, &c, &grids(64, 401)).unwrap();
    let sup = vf.sup_grad_b();
    // smoothing constant sup_τ √τ·|Q_τ^{-1/2} G(τ)| of the uncontrolled kernel
    let mut smoothing: f64 = 0.0;
    let mut scaled: f64 = 0.0;
    for (j, &level_sup) in sup.iter().enumerate().skip(1) {
        let tau = vf.tau[j];
        let cov = covariance(&model, tau).unwrap();
        let g = vf.level_head_b(j);
        let w = cov.chol.solve_lower_triangular(&g).unwrap();
        smoothing = smoothing.max(tau.sqrt() * w.norm());
        scaled = scaled.max(tau.sqrt() * level_sup);
    }
    assert!(scaled <= 2.0 * smoothing, "{scaled} vs {smoothing}");
}
