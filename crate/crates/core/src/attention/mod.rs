//! Feature alignment operators.
//!
//! Every operator matches each target cell against a set of source cells,
//! turns the affinities into weights and gathers the source features with
//! those weights. The variants differ only in which cells are considered
//! and how the affinities are normalized:
//!
//! | variant      | positions               | normalization            |
//! |--------------|-------------------------|--------------------------|
//! | `Psla`       | progressive sparse rings| masked softmax           |
//! | `Dense`      | full `(2d+1)^2` window  | masked softmax           |
//! | `MatchTrans` | full `(2d+1)^2` window  | clamp at zero, sum-normalize |
//! | `Nonlocal`   | every position          | softmax                  |

mod embed;
mod global;
mod graph;
mod local;
pub mod oracle;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use embed::EmbeddingPair;
pub use graph::{EmbeddingVars, TapeAligner};
pub use global::{
    global_affinities, global_affinities_backward, global_aggregate, global_aggregate_backward,
    nonlocal_align, softmax_rows, softmax_rows_backward, GlobalWeights,
};
pub use local::{
    aggregate, aggregate_backward, compute_affinities, compute_affinities_backward, matchtrans_backward,
    normalize_matchtrans, normalize_psla, normalize_psla_with_temperature, psla_align, psla_align_with,
    softmax_k_backward, AttentionWeights,
};

use crate::error::Result;
use crate::neighborhood::{NeighborhoodSpec, Offset};
use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Psla,
    Dense,
    #[serde(rename = "matchtrans")]
    MatchTrans,
    Nonlocal,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Psla, Variant::Dense, Variant::MatchTrans, Variant::Nonlocal];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Psla => "psla",
            Variant::Dense => "dense",
            Variant::MatchTrans => "matchtrans",
            Variant::Nonlocal => "nonlocal",
        }
    }

    /// The local offset set this variant attends over, if it is local.
    pub fn spec(self, d: usize) -> Result<Option<NeighborhoodSpec>> {
        Ok(match self {
            Variant::Psla => Some(NeighborhoodSpec::progressive(d)?),
            Variant::Dense | Variant::MatchTrans => Some(NeighborhoodSpec::dense(d)?),
            Variant::Nonlocal => None,
        })
    }

    /// Number of source positions each target cell touches.
    pub fn positions(self, d: usize, height: usize, width: usize) -> usize {
        match self {
            Variant::Psla => 1 + 8 * d,
            Variant::Dense | Variant::MatchTrans => (2 * d + 1) * (2 * d + 1),
            Variant::Nonlocal => height * width,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psla" => Ok(Variant::Psla),
            "dense" => Ok(Variant::Dense),
            "matchtrans" => Ok(Variant::MatchTrans),
            "nonlocal" => Ok(Variant::Nonlocal),
            other => Err(crate::Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Multiply-accumulates per target location for affinity plus aggregation.
pub fn macs_per_location(positions: usize, embed_channels: usize, feat_channels: usize) -> usize {
    positions * (embed_channels + feat_channels)
}

/// Weights produced by an alignment, local or global.
#[derive(Clone, Debug)]
pub enum Correspondence {
    Local(AttentionWeights),
    Global(GlobalWeights),
}

impl Correspondence {
    /// Per-location offset of the largest weight, row-major over the target.
    pub fn argmax_offsets(&self, spec: Option<&NeighborhoodSpec>) -> Vec<Offset> {
        match (self, spec) {
            (Correspondence::Local(w), Some(spec)) => w.argmax_offsets(spec),
            (Correspondence::Global(g), _) => g.argmax_offsets(),
            (Correspondence::Local(_), None) => panic!("local weights need their neighborhood spec"),
        }
    }
}

/// Output of [`align`].
#[derive(Clone, Debug)]
pub struct Alignment {
    pub output: FeatureMap,
    pub weights: Correspondence,
    pub spec: Option<NeighborhoodSpec>,
}

impl Alignment {
    pub fn argmax_offsets(&self) -> Vec<Offset> {
        self.weights.argmax_offsets(self.spec.as_ref())
    }
}

/// Aligns `source` onto `target` with the chosen variant.
pub fn align(
    variant: Variant,
    d: usize,
    target: &FeatureMap,
    source: &FeatureMap,
    emb: &EmbeddingPair,
) -> Result<Alignment> {
    let spec = variant.spec(d)?;
    let t = emb.embed_target(target)?;
    let s = emb.embed_source(source)?;
    attend(variant, spec, &t, &s, source)
}

/// The attention stage alone: affinities between already embedded maps,
/// normalization and aggregation of `source`. `spec` must be `Some` for
/// the local variants.
pub fn attend(
    variant: Variant,
    spec: Option<NeighborhoodSpec>,
    target_emb: &FeatureMap,
    source_emb: &FeatureMap,
    source: &FeatureMap,
) -> Result<Alignment> {
    if target_emb.height() != source.height() || target_emb.width() != source.width() {
        return Err(crate::error::config_err("embedded maps and source differ in size"));
    }
    match (variant, spec) {
        (Variant::Nonlocal, _) => {
            let (h, w) = (source.height(), source.width());
            let raw = global_affinities(target_emb, source_emb)?;
            let data = softmax_rows(&raw, h * w);
            let output = global_aggregate(source, &data);
            Ok(Alignment { output, weights: Correspondence::Global(GlobalWeights { height: h, width: w, data }), spec: None })
        }
        (_, Some(spec)) => {
            let raw = compute_affinities(target_emb, source_emb, &spec)?;
            let weights = if variant == Variant::MatchTrans { normalize_matchtrans(raw) } else { normalize_psla(raw) };
            let output = aggregate(source, &weights, &spec)?;
            Ok(Alignment { output, weights: Correspondence::Local(weights), spec: Some(spec) })
        }
        (_, None) => Err(crate::error::config_err(format!("{variant} needs a neighborhood"))),
    }
}
