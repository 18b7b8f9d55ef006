//! Acceptance suite: one line per criterion, non-zero exit if any fails.

mod common;

use std::time::{Duration, Instant};

use common::*;
use ctrldelay::evaluation::{self, lq_riccati_oracle};
use ctrldelay::gaussian::{self, covariance};
use ctrldelay::io::{self, PolicyChoice, RunConfig};
use ctrldelay::simulator::{self, initial_history, lift_current_state};
use ctrldelay::{hjb, Model, ModelParams, Policy, QuadratureRule, Selection, SimConfig};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OPERATOR_CASES: usize = 128;
const OPERATOR_BUDGET: Duration = Duration::from_secs(10);
const COVARIANCE_CASES: usize = 30;
const SMOOTHING_CASES: usize = 30;
const ORACLE_POINTS: [f64; 3] = [-1.0, 0.0, 1.0];
const ORACLE_REL: f64 = 0.02;
const ORACLE_BUDGET: Duration = Duration::from_secs(120);
const MC_PATHS: usize = 10_000;
const MC_DT: f64 = 1.0 / 200.0;
const IDENTITY_PROBES: usize = 5;
const IDENTITY_BUDGET: Duration = Duration::from_secs(300);
const VERIFICATION_PROBES: usize = 12;
const MEAN_SE: f64 = 3.0;
const DETERMINISM_PATHS: usize = 1000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn operator_algebra() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut sg, mut du, mut ba, mut hb) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
    let mut pass = true;
    for case in 0..OPERATOR_CASES {
        let (n, m, k) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
        let d = rng.random_range(0.2..1.5);
        let seed = rng.random::<u64>();
        let model = random_model(n, m, k, d, seed);
        let (t, s) = (rng.random_range(0.0..2.0) * d, rng.random_range(0.0..2.0) * d);
        let h = model.grid_step();
        let x = fourier_vector(&model, seed ^ 1);
        let z = fourier_vector(&model, seed ^ 2);

        let once = model.apply_semigroup(t + s, &x).unwrap();
        let twice = model.apply_semigroup(t, &model.apply_semigroup(s, &x).unwrap()).unwrap();
        let r = l1_distance(&model, &once, &twice) / (h * (1.0 + model.norm(&x)));
        sg = sg.max(r);
        pass &= r <= SEMIGROUP_C;

        let lhs = model.inner(&model.apply_semigroup(t, &x).unwrap(), &z);
        let rhs = model.inner(&x, &model.apply_semigroup_adjoint(t, &z).unwrap());
        let r = (lhs - rhs).abs() / (h * h * model.norm(&x) * model.norm(&z));
        du = du.max(r);
        pass &= r <= DUALITY_C;

        let u = DVector::from_fn(m, |i, _| 0.3 + 0.2 * i as f64 - 0.1 * case as f64 / OPERATOR_CASES as f64);
        let lhs = model.inner(&model.apply_b(&u).unwrap(), &x);
        let rhs = model.apply_bstar(&x).unwrap().dot(&u);
        let r = (lhs - rhs).abs() / (1.0 + lhs.abs());
        ba = ba.max(r);
        pass &= r <= CONTROL_ADJOINT_REL;

        let direct = model.head_of_semigroup_b(t).unwrap();
        for j in 0..m {
            let e = DVector::from_fn(m, |i, _| if i == j { 1.0 } else { 0.0 });
            let col = model.apply_semigroup(t, &model.apply_b(&e).unwrap()).unwrap().head;
            let reference = direct.column(j).into_owned();
            let r = (&col - &reference).norm() / reference.norm().max(1e-12);
            hb = hb.max(r);
            pass &= r < HEAD_B_REL;
        }
    }
    let elapsed = start.elapsed();
    pass &= elapsed < OPERATOR_BUDGET;
    outcome(
        pass,
        format!(
            "{OPERATOR_CASES} cases, M = {}; semigroup {sg:.3}·h (≤ {SEMIGROUP_C}), duality {du:.3}·h² (≤ {DUALITY_C}), B/B* {ba:.1e}, head_of_semigroup_B {hb:.1e} (< {HEAD_B_REL:e}); {:.2}s",
            POINTS - 1,
            elapsed.as_secs_f64()
        ),
    )
}

fn covariance_checks() -> Outcome {
    let mut worst_closed: f64 = 0.0;
    for &(a, s) in &[(-1.3, 0.7), (-0.3, 0.5), (0.4, 1.2), (2.0, 0.1)] {
        let model = Model::new(ModelParams::scalar(a, 1.0, s, |_| 0.0, 0.5, 1.0, 11)).unwrap();
        for &t in &[1e-3, 0.1, 0.5, 1.0, 2.0] {
            let q = covariance(&model, t).unwrap().q[(0, 0)];
            worst_closed = worst_closed.max(rel_err(q, s * s * ((2.0 * a * t).exp() - 1.0) / (2.0 * a)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_quad: f64 = 0.0;
    for _ in 0..COVARIANCE_CASES {
        let model = stable_model(rng.random_range(1..=3), rng.random());
        let t = rng.random_range(0.01..2.0);
        let q = covariance(&model, t).unwrap().q;
        worst_quad = worst_quad.max(matrix_rel_err(&q, &covariance_by_quadrature(&model, t, 2000)));
    }
    outcome(
        worst_closed < CLOSED_FORM_REL && worst_quad < QUADRATURE_REL,
        format!(
            "closed form {worst_closed:.1e} (< {CLOSED_FORM_REL:e}); quadrature, {COVARIANCE_CASES} stable drifts n ≤ 3, {worst_quad:.1e} (< {QUADRATURE_REL:e})"
        ),
    )
}

fn partial_smoothing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..SMOOTHING_CASES {
        let (n, m) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let seed = rng.random::<u64>();
        let t = rng.random_range(0.05..1.0);
        let model = random_model(n, m, n, 0.5, seed);
        let x = fourier_vector(&model, seed ^ 9);
        let rule = rule_for(n);
        let y = model.projected_head(t, &x).unwrap();
        let grad = gaussian::ou_grad_b(&model, t, smooth_bounded, y.as_slice(), &rule).unwrap();
        for kdir in 0..m {
            let e = DVector::from_fn(m, |i, _| if i == kdir { 1.0 } else { 0.0 });
            let dir = model.apply_b(&e).unwrap();
            let value_at = |eps: f64| {
                let head = model.projected_head(t, &x.axpy(eps, &dir)).unwrap();
                gaussian::ou_apply(&model, t, smooth_bounded, head.as_slice(), &rule).unwrap()
            };
            let fd = (value_at(FD_STEP) - value_at(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max((grad[kdir] - fd).abs() / fd.abs().max(grad[kdir].abs()).max(1e-3));
        }
    }
    let model = Model::new(ModelParams::scalar(-0.3, 0.5, 0.5, |_| 1.0, 0.5, 1.0, 101)).unwrap();
    let step = |z: &[f64]| if z[0] >= 0.0 { 1.0 } else { 0.0 };
    let times: Vec<f64> = (0..=12).map(|i| 1e-3 * 10f64.powf(i as f64 / 4.0)).collect();
    let slope = gaussian::gradb_rate_probe(&model, step, &[0.0], &times, &QuadratureRule::gauss_hermite(40))
        .unwrap()
        .slope;
    let slope_ok = slope.is_some_and(|s| s >= SLOPE_RANGE.0 && s <= SLOPE_RANGE.1);
    outcome(
        worst < FD_REL && slope_ok,
        format!(
            "finite differences {worst:.1e} (< {FD_REL:e}) over {SMOOTHING_CASES} cases; step-data slope {} in [{}, {}]",
            slope.map_or("none".into(), |s| format!("{s:.4}")),
            SLOPE_RANGE.0,
            SLOPE_RANGE.1
        ),
    )
}

fn riccati_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = load_config("lq.toml");
    let model = cfg.build_model().unwrap();
    let vf = hjb::solve(&model, &cfg.cost, &cfg.grids).unwrap();
    let ric = lq_riccati_oracle(&model, &cfg.cost, cfg.oracle.riccati_steps).unwrap();
    let history = ctrldelay::ControlPath::constant(-model.delay(), 0.0, model.grid_step(), &[0.0]).unwrap();
    let mut worst: f64 = 0.0;
    for &y0 in &ORACLE_POINTS {
        let x0 = model.lift_initial_datum(&DVector::from_element(1, y0), &history).unwrap();
        let solved = hjb::eval_value(&vf, &model, 0.0, &x0).unwrap().value;
        worst = worst.max(rel_err(solved, ric.value(0.0, &[y0])));
    }
    let elapsed = start.elapsed();
    outcome(
        worst < ORACLE_REL && elapsed < ORACLE_BUDGET,
        format!(
            "K = {}, {} nodes, GH {:?}: max relative error {worst:.4} (< {ORACLE_REL}); {:.1}s",
            cfg.grids.tau_levels,
            cfg.grids.spatial.nodes[0],
            cfg.grids.quadrature.scheme,
            elapsed.as_secs_f64()
        ),
    )
}

struct Delayed {
    cfg: RunConfig,
    model: Model,
    vf: ctrldelay::ReducedValueFunction,
    sel: Selection,
    sim: SimConfig,
    allowance: f64,
}

fn delayed_setup() -> Delayed {
    let cfg = load_config("delayed.toml");
    let model = cfg.build_model().unwrap();
    let vf = hjb::solve(&model, &cfg.cost, &cfg.grids).unwrap();
    let sel = Selection::new(cfg.cost.hamiltonian.clone());
    let sim = SimConfig {
        dt: MC_DT,
        n_paths: MC_PATHS,
        record_paths: false,
        ..cfg.sim_config(&model)
    };
    let allowance = evaluation::discretization_allowance(
        cfg.verification.allowance_coefficient,
        model.horizon(),
        cfg.grids.tau_levels,
        MC_DT,
        &vf.grid,
    );
    Delayed {
        cfg,
        model,
        vf,
        sel,
        sim,
        allowance,
    }
}

fn fundamental_identity(s: &Delayed) -> Outcome {
    let start = Instant::now();
    let ver = &s.cfg.verification;
    let init = s.cfg.initial_state(&s.model).unwrap();
    let probes = evaluation::random_piecewise_probes(
        &s.cfg.cost.hamiltonian,
        0.0,
        s.model.horizon(),
        ver.piecewise_cells,
        IDENTITY_PROBES,
        ver.probe_seed,
    )
    .unwrap();
    let mut pass = probes.len() == IDENTITY_PROBES;
    let mut worst: f64 = 0.0;
    for (_, policy) in &probes {
        let r = evaluation::fundamental_identity_residual(&s.vf, &s.sel, &s.model, &s.cfg.cost, policy, &init, &s.sim)
            .unwrap();
        let bound = 3.0 * r.stderr + s.allowance;
        worst = worst.max(r.residual.abs() / bound);
        pass &= r.residual.abs() < bound;
    }
    let elapsed = start.elapsed();
    pass &= elapsed < IDENTITY_BUDGET;
    outcome(
        pass,
        format!(
            "{IDENTITY_PROBES} piecewise probes, {MC_PATHS} paths, dt = 1/200: max |R| / (3·se + {:.6}) = {worst:.3}; {:.1}s",
            s.allowance,
            elapsed.as_secs_f64()
        ),
    )
}

fn verification(s: &Delayed) -> Outcome {
    let ver = &s.cfg.verification;
    let kind = &s.cfg.cost.hamiltonian;
    let init = s.cfg.initial_state(&s.model).unwrap();
    let mut probes = evaluation::constant_probes(kind, ver.constants_per_axis);
    probes.extend(
        evaluation::bang_bang_probes(kind, 0.0, s.model.horizon(), ver.bang_bang_cells, ver.bang_bang, ver.probe_seed + 1)
            .unwrap(),
    );
    let rep = evaluation::verify_optimality(&s.vf, &s.sel, &s.model, &s.cfg.cost, &init, &s.sim, &probes, s.allowance)
        .unwrap();
    let lower = rep.probes.iter().all(|p| p.lower_bound_holds);
    let nearest = rep.probes.iter().map(|p| p.cost.mean).fold(f64::INFINITY, f64::min);
    outcome(
        probes.len() == VERIFICATION_PROBES && lower && rep.feedback_matches && rep.feedback_is_minimum,
        format!(
            "v = {:.5}, J(feedback) = {:.5} ± {:.5}, cheapest probe {nearest:.5}; {} probes, lower bounds {}, feedback match {}, feedback minimum {}",
            rep.value,
            rep.feedback.mean,
            rep.feedback.stderr,
            probes.len(),
            lower,
            rep.feedback_matches,
            rep.feedback_is_minimum
        ),
    )
}

fn lift_consistency(s: &Delayed) -> Outcome {
    let init = s.cfg.initial_state(&s.model).unwrap();
    let bundle = simulator::simulate(
        &s.model,
        &s.cfg.cost,
        &Policy::Constant(vec![0.0]),
        &init,
        &s.sim,
    )
    .unwrap();
    let samples: Vec<f64> = (0..bundle.n_paths).map(|p| bundle.terminal_state(p)[0]).collect();
    let est = evaluation::CostEstimate::from_samples(&samples);
    let y0 = DVector::from_vec(init.y0.clone());
    let x0 = s.model.lift_initial_datum(&y0, &init.u0).unwrap();
    let expected = s.model.projected_head(s.model.horizon(), &x0).unwrap()[0];
    let mean_ok = (est.mean - expected).abs() < MEAN_SE * est.stderr;
    let ring = initial_history(&s.model, &init.u0, 0.0, s.model.grid_step()).unwrap();
    let lifted = lift_current_state(&s.model, &y0, &ring, 0.0).unwrap();
    let exact = lifted == x0;
    outcome(
        mean_ok && exact,
        format!(
            "E[y(T)] = {:.5} ± {:.5} vs (e^(TA)x0)_0 = {expected:.5}; lift at t = 0 bit-identical: {exact}",
            est.mean, est.stderr
        ),
    )
}

fn files_of(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn determinism() -> Outcome {
    let mut cfg = load_config("delayed.toml");
    cfg.simulation.n_paths = DETERMINISM_PATHS;
    let root = tempfile::tempdir().unwrap();
    let run = |threads: usize| {
        let dir = root.path().join(format!("t{threads}"));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            io::cmd_check(&cfg, &dir.join("check")).unwrap();
            io::cmd_solve(&cfg, &dir.join("solve")).unwrap();
            let sol = dir.join("solve").join(io::commands::SOLUTION_FILE);
            io::cmd_simulate(&cfg, Some(&sol), &PolicyChoice::Feedback, &dir.join("simulate")).unwrap();
            io::cmd_verify(&cfg, &sol, &dir.join("verify")).unwrap();
        });
        ["check", "solve", "simulate", "verify"].map(|c| files_of(&dir.join(c)))
    };
    let (a, b, c) = (run(1), run(3), run(1));
    let count: usize = a.iter().map(|f| f.len()).sum();
    let same = a == b && a == c;
    outcome(
        same,
        format!("check/solve/simulate/verify on 1, 3 and 1 threads: {count} files each, bit-identical: {same}"),
    )
}

fn main() {
    let mut all = true;
    let mut report = |id: usize, name: &str, o: Outcome| {
        all &= o.pass;
        println!("criterion {id} {name}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    report(1, "operator algebra", operator_algebra());
    report(2, "covariance", covariance_checks());
    report(3, "partial smoothing", partial_smoothing());
    report(4, "value vs Riccati oracle", riccati_oracle());
    let delayed = delayed_setup();
    report(5, "fundamental identity", fundamental_identity(&delayed));
    report(6, "verification theorem", verification(&delayed));
    report(7, "structure and lift consistency", lift_consistency(&delayed));
    report(8, "determinism", determinism());
    if !all {
        std::process::exit(1);
    }
}
