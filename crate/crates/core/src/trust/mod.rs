//! Trustworthiness protocols: robustness sweeps, predictive uncertainty
//! and feature-group attribution.

mod attribution;
mod robustness;
mod uncertainty;

pub use attribution::{
    ablation_from_scores, ablation_importance, ig_baseline, ig_group_scores, integrated_gradients, normalize_shares,
    subset_masks, traverse_from_scores, traverse_importance, AttributionMethod, AttributionResult, GroupScore,
    IgResult, DEFAULT_IG_STEPS,
};
pub use robustness::{
    corrupted_scores, percent_changes, robustness_curve, RobustnessCurve, SweepContext, DEGRADATION_UNIT,
};
pub use uncertainty::{
    mc_dropout_uncertainty, regressor_predict, sample_sd, tta_columns, tta_uncertainty, PairSd, TtaScope,
    UncertaintyMethod, UncertaintyResult, DEFAULT_RUNS,
};
