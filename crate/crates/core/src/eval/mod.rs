//! Frozen-feature probes: k-NN, linear and patch localization.

mod features;
mod probes;

pub use features::{extract_features, patch_features, FeatureBank, FeatureSource, ExtractConfig};
pub use probes::{
    knn_probe, linear_probe, localization_probe, patch_probe, LinearModel, LinearProbeConfig, LocalizationConfig, ProbeResult,
};
