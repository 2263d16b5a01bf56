//! Experiment orchestration: configuration, the two pruning pipelines,
//! checkpoints, reports and run comparison.

mod alloc;
mod checkpoint;
mod compare;
mod config;
mod history;
mod pipeline;
mod reports;
mod svg;

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use compare::{
    compare_runs, compare_summaries, load_run_summary, Comparison, ExitSnapshot, LevelRow, RunSummary,
    ACCURACY_LEVELS, CLOSE_ACCURACY, COMPARISON_CSV, COMPARISON_SVG, ENVELOPES_CSV, EXITS_COMPARISON_CSV, SUMMARY_TXT,
};
pub use config::{parse_backbone, render_backbone, Approach, DataSource, ExperimentConfig};
pub use history::{EvalRecord, Phase, RoundLog, RunHistory};
pub use pipeline::{
    evaluate, global_sparsity, load_data, run, run_approach1, run_approach2, RunArtifacts, RunOptions, RunState,
    Splits, CHECKPOINT_FILE,
};
pub use reports::{
    curve_csv, emit_reports, exits_csv, hull_csv, rounds_csv, sparsity_csv, CONFIG_ECHO, CSV_FILES, CURVE_CSV,
    EXITS_CSV, HULL_CSV, ROUNDS_CSV, SPARSITY_CSV, TRADEOFF_SVG,
};
pub use svg::{render, render_tradeoff, Series};
