//! Architecture metadata: layer descriptors whose parameter counts can be
//! computed without allocating any weights.

use serde::{Deserialize, Serialize};

use super::layers::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Flatten,
    Unflatten,
    Dense { in_features: u64, out_features: u64, activation: Activation },
    /// Parameter-free mean/variance normalization.
    Normalize { size: u64 },
    LayerNorm { size: u64 },
    /// Skip connection; adds no parameters.
    Residual,
}

impl LayerSpec {
    pub fn parameter_count(&self) -> u64 {
        match *self {
            LayerSpec::Dense { in_features, out_features, .. } => {
                in_features * out_features + out_features
            }
            LayerSpec::LayerNorm { size } => 2 * size,
            LayerSpec::Flatten
            | LayerSpec::Unflatten
            | LayerSpec::Normalize { .. }
            | LayerSpec::Residual => 0,
        }
    }

    /// One-line description in the familiar `Linear(in_features=.., ..)` form.
    pub fn describe(&self) -> String {
        match *self {
            LayerSpec::Flatten => "Flatten".into(),
            LayerSpec::Unflatten => "Unflatten".into(),
            LayerSpec::Residual => "Residual".into(),
            LayerSpec::Dense { in_features, out_features, activation } => {
                let kind = match activation {
                    Activation::None => "Linear",
                    Activation::Relu => "Relu",
                    Activation::Tanh => "Tanh",
                };
                format!("{kind}(in_features={in_features}, out_features={out_features})")
            }
            LayerSpec::Normalize { size } => format!("Normalize(in_features={size})"),
            LayerSpec::LayerNorm { size } => format!("LayerNorm({size}, eps=1e-06)"),
        }
    }
}

/// Sum of layer parameter counts.
pub fn parameter_count(layers: &[LayerSpec]) -> u64 {
    layers.iter().map(LayerSpec::parameter_count).sum()
}
