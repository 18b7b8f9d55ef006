//! Shared fixtures for the benchmarks.

use ctrldelay::{hjb, Model, ReducedValueFunction, RunConfig, Selection};

/// The bundled delayed example, with the solver grid scaled by `levels` and `nodes`.
pub fn delayed(levels: usize, nodes: usize) -> (RunConfig, Model) {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/delayed.toml");
    let mut cfg = RunConfig::load(&path).expect("bundled config");
    cfg.grids.tau_levels = levels;
    cfg.grids.spatial.nodes = vec![nodes];
    let model = cfg.build_model().expect("bundled model");
    (cfg, model)
}

pub fn solved(levels: usize, nodes: usize) -> (RunConfig, Model, ReducedValueFunction, Selection) {
    let (cfg, model) = delayed(levels, nodes);
    let vf = hjb::solve(&model, &cfg.cost, &cfg.grids).expect("solve");
    let sel = Selection::new(cfg.cost.hamiltonian.clone());
    (cfg, model, vf, sel)
}
