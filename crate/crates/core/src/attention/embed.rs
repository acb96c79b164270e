use rand::Rng;

use crate::error::{config_err, Result};
use crate::ops::{conv2d, ConvParams};
use crate::tensor::FeatureMap;

/// The two 1x1 embeddings applied before affinities are taken: `g` on the
/// target side, `f` on the source side. They never share parameters. An
/// embedding of `None` passes features through unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPair {
    pub f: Option<ConvParams>,
    pub g: Option<ConvParams>,
}

impl EmbeddingPair {
    pub fn new(f: ConvParams, g: ConvParams) -> Result<Self> {
        if f.kernel_size != 1 || g.kernel_size != 1 {
            return Err(config_err("embeddings must be 1x1 convolutions"));
        }
        if f.out_channels != g.out_channels {
            return Err(config_err(format!(
                "embedding widths differ: f has {}, g has {}",
                f.out_channels, g.out_channels
            )));
        }
        if f.in_channels != g.in_channels {
            return Err(config_err("embeddings must read the same feature width"));
        }
        Ok(Self { f: Some(f), g: Some(g) })
    }

    /// Raw features are compared directly.
    pub fn identity() -> Self {
        Self { f: None, g: None }
    }

    /// Independently initialized `f` and `g`. `embed_channels == 0` yields
    /// the identity pair.
    pub fn init<R: Rng>(in_channels: usize, embed_channels: usize, bias: bool, rng: &mut R) -> Self {
        if embed_channels == 0 {
            return Self::identity();
        }
        let f = ConvParams::init_uniform(1, in_channels, embed_channels, bias, rng);
        let g = ConvParams::init_uniform(1, in_channels, embed_channels, bias, rng);
        Self { f: Some(f), g: Some(g) }
    }

    pub fn is_identity(&self) -> bool {
        self.f.is_none() && self.g.is_none()
    }

    pub fn embed_target(&self, target: &FeatureMap) -> Result<FeatureMap> {
        match &self.g {
            Some(g) => conv2d(target, g, 0),
            None => Ok(target.clone()),
        }
    }

    pub fn embed_source(&self, source: &FeatureMap) -> Result<FeatureMap> {
        match &self.f {
            Some(f) => conv2d(source, f, 0),
            None => Ok(source.clone()),
        }
    }

    pub fn embed_channels(&self, feature_channels: usize) -> usize {
        self.f.as_ref().map_or(feature_channels, |f| f.out_channels)
    }

    pub fn param_count(&self) -> usize {
        self.f.as_ref().map_or(0, ConvParams::param_count) + self.g.as_ref().map_or(0, ConvParams::param_count)
    }
}
