//! The five batch commands. Each writes its artifacts under an output directory and returns
//! the `key: value` report it also saved there.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::digest::{self, Digest};
use crate::error::{Error, Result};
use crate::evaluation::{self, IdentityResidual};
use crate::feedback::Selection;
use crate::gaussian;
use crate::hjb::{self, ReducedValueFunction};
use crate::io::config::RunConfig;
use crate::io::solution;
use crate::simulator::{self, Closure, Policy};

pub const SOLUTION_FILE: &str = "solution.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    pub report: String,
    pub files: Vec<PathBuf>,
    pub success: bool,
}

/// Control law for `simulate`.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyChoice {
    Feedback,
    Zero,
    Constant(Vec<f64>),
}

impl std::str::FromStr for PolicyChoice {
    type Err = Error;

    /// `feedback`, `zero`, or `constant:v1,v2,…`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feedback" => Ok(PolicyChoice::Feedback),
            "zero" => Ok(PolicyChoice::Zero),
            _ => {
                let values = s
                    .strip_prefix("constant:")
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown policy `{s}`")))?;
                values
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::InvalidArgument(format!("bad control value `{v}`")))
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(PolicyChoice::Constant)
            }
        }
    }
}

fn save(dir: &Path, name: &str, contents: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    files.push(path);
    Ok(())
}

fn header(cfg_hash: &Digest, command: &str) -> String {
    format!("command: {command}\nconfig_hash: {}\n", digest::to_hex(cfg_hash))
}

/// Structure hypotheses and invertibility of the noise covariance.
pub fn cmd_check(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let model = cfg.build_model()?;
    let setup = cfg.setup_hash()?;
    let samples: Vec<f64> = (1..=16).map(|i| model.horizon() * i as f64 / 16.0).collect();
    let report = model.check_structure_hypotheses(&samples)?;
    let tau = hjb::graded_mesh(model.horizon(), cfg.grids.tau_levels);
    let cov = gaussian::covariance(&model, tau[1])?;
    let invertible = cov.require_invertible().is_ok();
    let mut s = header(&setup, "check");
    let _ = writeln!(s, "n: {}\nm: {}\nk: {}", model.n(), model.m(), model.k());
    let _ = writeln!(s, "b1_residual: {:.6e}", report.b1_residual);
    let _ = writeln!(s, "max_regular_residual: {:.6e}", report.max_regular_residual);
    let _ = writeln!(s, "max_combined_residual: {:.6e}", report.max_combined_residual);
    let _ = writeln!(s, "regular_structure: {}", report.regular_holds);
    let _ = writeln!(s, "combined_structure: {}", report.combined_holds);
    let _ = writeln!(s, "covariance_condition_first_level: {:.6e}", cov.condition());
    let _ = writeln!(s, "covariance_invertible: {invertible}");
    let _ = writeln!(s, "lipschitz_warning: {}", cfg.cost.hamiltonian.lipschitz_warning());
    let success = report.passed() && invertible;
    let _ = writeln!(s, "passed: {success}");
    let mut files = Vec::new();
    save(out, "check_report.txt", &s, &mut files)?;
    Ok(CommandOutput {
        report: s,
        files,
        success,
    })
}

/// Solves the value recursion; writes the tables plus plotting slices.
pub fn cmd_solve(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let model = cfg.build_model()?;
    let setup = cfg.setup_hash()?;
    let (vf, rep) = hjb::solve_with_report(&model, &cfg.cost, &cfg.grids)?;
    let mut files = Vec::new();
    std::fs::create_dir_all(out)?;
    let sol_path = out.join(SOLUTION_FILE);
    solution::write(&sol_path, &vf, &setup)?;
    files.push(sol_path);

    let n = vf.n;
    let cols: Vec<String> = (1..=n).map(|i| format!("y{i}")).collect();
    let mut slices = format!("tau,{},value\n", cols.join(","));
    for j in 0..vf.levels() {
        for (p, v) in vf.level_values(j).iter().enumerate() {
            let y = vf.grid.point(p);
            let ys: Vec<String> = y.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(slices, "{},{},{}", vf.tau[j], ys.join(","), v);
        }
    }
    save(out, "value_slices.csv", &slices, &mut files)?;
    let mut sup = String::from("tau,sup_grad_b\n");
    for (t, g) in vf.tau.iter().zip(&rep.sup_grad_b) {
        let _ = writeln!(sup, "{t},{g}");
    }
    save(out, "grad_b_sup.csv", &sup, &mut files)?;

    let init = cfg.initial_state(&model)?;
    let v0 = evaluation::initial_value(&vf, &model, &init, cfg.simulation.t0)?;
    let mut s = header(&setup, "solve");
    let _ = writeln!(s, "model_hash: {}", digest::to_hex(&vf.model_hash));
    let _ = writeln!(s, "cost_hash: {}", digest::to_hex(&vf.cost_hash));
    let _ = writeln!(s, "tau_levels: {}", vf.levels() - 1);
    let _ = writeln!(s, "spatial_nodes: {:?}", vf.grid.nodes);
    let _ = writeln!(s, "box_lo: {:?}", vf.grid.lo);
    let _ = writeln!(s, "box_hi: {:?}", vf.grid.hi);
    let _ = writeln!(s, "sup_value: {:.10}", rep.sup_value);
    let _ = writeln!(s, "value_bound: {:.10}", rep.value_bound);
    let _ = writeln!(s, "max_sup_grad_b: {:.10}", rep.sup_grad_b.iter().fold(0.0_f64, |a, b| a.max(*b)));
    let _ = writeln!(s, "terminal_smooth: {}", vf.flags.terminal_smooth);
    let _ = writeln!(s, "running_cost_exact: {}", vf.flags.running_cost_exact);
    let _ = writeln!(s, "polynomial_growth: {}", vf.flags.polynomial_growth);
    let _ = writeln!(s, "lipschitz_warning: {}", vf.flags.lipschitz_warning);
    let _ = writeln!(s, "value_at_initial_datum: {v0:.10}");
    let _ = writeln!(s, "passed: true");
    save(out, "solve_report.txt", &s, &mut files)?;
    Ok(CommandOutput {
        report: s,
        files,
        success: true,
    })
}

fn load_solution(cfg: &RunConfig, path: &Path) -> Result<ReducedValueFunction> {
    solution::read_for(path, &cfg.setup_hash()?)
}

/// Simulates one policy; feedback needs a solution solved for the same configuration.
pub fn cmd_simulate(cfg: &RunConfig, solution_path: Option<&Path>, policy: &PolicyChoice, out: &Path) -> Result<CommandOutput> {
    let model = cfg.build_model()?;
    let setup = cfg.setup_hash()?;
    let init = cfg.initial_state(&model)?;
    let sim = cfg.sim_config(&model);
    let sel = Selection::new(cfg.cost.hamiltonian.clone());
    let vf = match solution_path {
        Some(p) => Some(load_solution(cfg, p)?),
        None => None,
    };
    let pol = match policy {
        PolicyChoice::Feedback => {
            let vf = vf
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("feedback policy needs a solution file".into()))?;
            Policy::Feedback(Closure { vf, sel: &sel })
        }
        PolicyChoice::Zero => Policy::Constant(vec![0.0; model.m()]),
        PolicyChoice::Constant(u) => Policy::Constant(u.clone()),
    };
    let bundle = simulator::simulate(&model, &cfg.cost, &pol, &init, &sim)?;
    bundle.write_csv(out, &[("config_hash", digest::to_hex(&setup))])?;
    let bin = out.join("paths.bin");
    bundle.write_binary(&bin)?;
    let est = evaluation::evaluate_cost(&bundle);
    let mut s = header(&setup, "simulate");
    let _ = writeln!(s, "run_hash: {}", digest::to_hex(&bundle.config_hash));
    let _ = writeln!(s, "seed: {}", sim.seed);
    let _ = writeln!(s, "dt: {}", sim.dt);
    let _ = writeln!(s, "n_paths: {}", sim.n_paths);
    let _ = writeln!(s, "cost_mean: {:.10}", est.mean);
    let _ = writeln!(s, "cost_stderr: {:.10}", est.stderr);
    let _ = writeln!(s, "extrapolated_steps: {}", bundle.extrapolated_steps);
    let _ = writeln!(s, "outside_hypotheses: {}", bundle.outside_hypotheses);
    let _ = writeln!(s, "passed: true");
    let mut files: Vec<PathBuf> = ["run_meta.txt", "costs.csv", "terminal.csv", "states.csv", "controls.csv"]
        .iter()
        .map(|f| out.join(f))
        .collect();
    files.push(bin);
    save(out, "simulate_report.txt", &s, &mut files)?;
    Ok(CommandOutput {
        report: s,
        files,
        success: true,
    })
}

/// Identity residuals over random piecewise probes and the feedback, then the two-sided
/// verification against constants and bang-bang controls.
pub fn cmd_verify(cfg: &RunConfig, solution_path: &Path, out: &Path) -> Result<CommandOutput> {
    let model = cfg.build_model()?;
    let setup = cfg.setup_hash()?;
    let vf = load_solution(cfg, solution_path)?;
    let init = cfg.initial_state(&model)?;
    let sim = simulator::SimConfig {
        record_paths: false,
        ..cfg.sim_config(&model)
    };
    let sel = Selection::new(cfg.cost.hamiltonian.clone());
    let kind = &cfg.cost.hamiltonian;
    let ver = &cfg.verification;
    let horizon = model.horizon();
    let allowance = evaluation::discretization_allowance(
        ver.allowance_coefficient,
        horizon,
        vf.levels() - 1,
        sim.dt,
        &vf.grid,
    );

    let mut identity_probes =
        evaluation::random_piecewise_probes(kind, sim.t0, horizon, ver.piecewise_cells, ver.random_piecewise, ver.probe_seed)?;
    identity_probes.insert(0, ("feedback".into(), Policy::Feedback(Closure { vf: &vf, sel: &sel })));
    let mut residuals: Vec<(String, IdentityResidual)> = Vec::new();
    for (name, pol) in &identity_probes {
        let r = evaluation::fundamental_identity_residual(&vf, &sel, &model, &cfg.cost, pol, &init, &sim)?;
        residuals.push((name.clone(), r));
    }

    let mut probes = evaluation::constant_probes(kind, ver.constants_per_axis);
    probes.extend(evaluation::bang_bang_probes(
        kind,
        sim.t0,
        horizon,
        ver.bang_bang_cells,
        ver.bang_bang,
        ver.probe_seed.wrapping_add(1),
    )?);
    let rep = evaluation::verify_optimality(&vf, &sel, &model, &cfg.cost, &init, &sim, &probes, allowance)?;

    let mut s = header(&setup, "verify");
    let _ = writeln!(s, "seed: {}", sim.seed);
    let _ = writeln!(s, "n_paths: {}", sim.n_paths);
    let _ = writeln!(s, "dt: {}", sim.dt);
    let mut identity_ok = true;
    let mut csv = String::from("probe,value,cost,cost_stderr,gap,residual,stderr,bound,pass\n");
    for (name, r) in &residuals {
        let bound = 3.0 * r.stderr + allowance;
        let pass = r.residual.abs() <= bound;
        identity_ok &= pass;
        let _ = writeln!(
            s,
            "identity.{name}: residual={:.10} stderr={:.10} bound={:.10} gap={:.10} result={}",
            r.residual,
            r.stderr,
            bound,
            r.gap,
            if pass { "pass" } else { "fail" }
        );
        let _ = writeln!(
            csv,
            "{name},{},{},{},{},{},{},{bound},{pass}",
            r.value, r.cost.mean, r.cost.stderr, r.gap, r.residual, r.stderr
        );
    }
    s.push_str(&rep.to_text().replace("passed: ", "verification_passed: "));
    let success = identity_ok && rep.passed();
    let _ = writeln!(s, "identity_passed: {identity_ok}");
    let _ = writeln!(s, "passed: {success}");
    let mut files = Vec::new();
    save(out, "verify_report.txt", &s, &mut files)?;
    save(out, "identity.csv", &csv, &mut files)?;
    save(out, "verify_margins.csv", &rep.to_csv(), &mut files)?;
    Ok(CommandOutput {
        report: s,
        files,
        success,
    })
}

/// Compares the solved value with the Riccati value for delay-free quadratic problems.
pub fn cmd_oracle(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let model = cfg.build_model()?;
    let setup = cfg.setup_hash()?;
    let ric = evaluation::lq_riccati_oracle(&model, &cfg.cost, cfg.oracle.riccati_steps)?;
    let vf = hjb::solve(&model, &cfg.cost, &cfg.grids)?;
    let horizon = model.horizon();
    let mut s = header(&setup, "oracle");
    let mut csv = String::from("point,solver,riccati,relative_error\n");
    let mut worst = 0.0_f64;
    for (i, y) in cfg.oracle_points(model.n()).iter().enumerate() {
        if y.len() != model.n() {
            return Err(Error::config("oracle.points", format!("expected {} entries per point", model.n())));
        }
        let solver = vf.value_at_head(horizon, y).value;
        let exact = ric.value(0.0, y);
        let rel = (solver - exact).abs() / exact.abs().max(1e-300);
        worst = worst.max(rel);
        let _ = writeln!(s, "point.{i}: y={y:?} solver={solver:.10} riccati={exact:.10} relative_error={rel:.6e}");
        let _ = writeln!(csv, "{i},{solver},{exact},{rel}");
    }
    let success = worst < cfg.oracle.tolerance;
    let _ = writeln!(s, "max_relative_error: {worst:.6e}");
    let _ = writeln!(s, "tolerance: {}", cfg.oracle.tolerance);
    let _ = writeln!(s, "lipschitz_warning: {}", cfg.cost.hamiltonian.lipschitz_warning());
    let _ = writeln!(s, "passed: {success}");
    let mut files = Vec::new();
    save(out, "oracle_report.txt", &s, &mut files)?;
    save(out, "oracle.csv", &csv, &mut files)?;
    Ok(CommandOutput {
        report: s,
        files,
        success,
    })
}
