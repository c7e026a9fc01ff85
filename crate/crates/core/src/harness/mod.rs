//! Scene configuration and the workflows behind the `posedist` binary.

pub mod commands;
pub mod config;
pub mod scene;
pub mod viz;

pub use commands::{
    cmd_bench, cmd_eval, cmd_grid, cmd_score, cmd_sweep, cmd_synth, cmd_viz, BenchReport,
    EvalSummary, SweepRow,
};
pub use config::{NoiseConfig, SceneConfig};
pub use scene::Scene;
pub use viz::VizRecord;
