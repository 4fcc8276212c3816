//! Per-dimension statistics of traced hidden states, massive-activation
//! detection, and the layer, timestep, condition and gate profiles built on them.

mod profiles;
mod stats;

pub use profiles::{
    alpha_profile, condition_invariance, layer_profile, ma_profile, timestep_sweep, AlphaRow,
    ConditionReport, LayerRow, MaProfile, Probe,
};
pub use stats::{detect_ma, median, ActivationStats, DetectParams, KAPPA_TOK};
