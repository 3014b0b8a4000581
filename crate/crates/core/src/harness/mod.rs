//! Experiment configuration, deterministic job seeding, the staged run
//! and report emission.

mod config;
mod emit;
mod report;
mod run;
mod seed;

pub use config::{
    parse_sweep, AttributionConfig, DatasetConfig, ExperimentConfig, Format, IgBaselineKind, IngestSource,
    McDropoutConfig, ModelEntry, RobustnessConfig, TtaConfig, UncertaintyConfig, CONFIG_VERSION, DEFAULT_OUT_DIR,
};
pub use emit::{emit, num, tables, Table, REPORT_FILE};
pub use report::{
    AttributionRecord, AttributionRow, BaselineRecord, EvaluationReport, Failure, PairContext, RobustnessRecord,
    RunMetadata, StatRecord, UncertaintyRecord, UncertaintyRow, CLEAN, REPORT_VERSION,
};
pub use run::{load_dataset, planned_stages, run, run_partial};
pub use seed::seed_stream;
