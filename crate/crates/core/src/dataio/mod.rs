//! Basin dataset schema, CSV ingestion, synthetic generation,
//! normalization and train/test splitting.

mod ingest;
pub mod interp;
mod normalize;
mod schema;
mod split;
pub mod synth;

pub use ingest::{ingest_csv, write_csv, IngestOptions};
pub use normalize::{
    dynamic_method, fit_normalizer, static_method, target_method, ColumnStats, NormMethod, NormStats,
    NormalizedData, LOG_OFFSET_EPS,
};
pub use schema::{
    classify_land_use, coverage, reference_date, time_feature_defs, time_features, AttrGroup, BasinDataset,
    BasinRecord, DynamicFeature, FeatureGroup, LandUse, FILL_VALUE,
};
pub use split::{split, RowSet, Split, SplitPlan, DEFAULT_TEST_YEARS};
pub use synth::{synthesize, SimplicityTruth, SynthConfig, SynthOutput, VariableRecipe};
