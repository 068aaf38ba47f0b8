//! Parameter management and the small set of network building blocks shared
//! by the generators, discriminators and the semantic extractor.
//!
//! Tensors and reverse-mode autodiff come from candle; everything above that
//! level (layers, initialization, the attention primitive, the optimizer) is
//! defined here so that weight creation, updates and serialization stay fully
//! deterministic and under our control.

mod adam;
mod attention;
pub mod gradcheck;
mod layers;
mod params;

pub use adam::{Adam, AdamCfg};
pub use attention::{
    bilinear_resize, multi_head_attention, to_spatial, to_tokens, upsample_nearest_x2,
};
pub use layers::{
    leaky_relu, BatchNorm2d, Conv2d, GroupNorm, LayerNorm, Linear, SpectralConv2d,
};
pub use params::{Init, Params};

/// Activation tap collector. Forward passes record named intermediate tensors
/// here when a collector is supplied, for instrumentation and feature export.
#[derive(Debug, Default)]
pub struct Taps(pub std::collections::BTreeMap<String, candle_core::Tensor>);

impl Taps {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn record(&mut self, name: &str, t: &candle_core::Tensor) {
        self.0.insert(name.to_string(), t.clone());
    }
    pub fn get(&self, name: &str) -> Option<&candle_core::Tensor> {
        self.0.get(name)
    }
}
