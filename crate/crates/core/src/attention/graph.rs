//! Alignment recorded on a gradient tape.

use std::sync::Arc;

use super::{EmbeddingPair, Variant};
use crate::autograd::{ConvVars, Tape, Var};
use crate::error::{config_err, Result};
use crate::neighborhood::NeighborhoodSpec;

/// An [`EmbeddingPair`] whose parameters live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingVars {
    pub f: Option<ConvVars>,
    pub g: Option<ConvVars>,
}

impl EmbeddingPair {
    pub fn register(&self, tape: &mut Tape) -> EmbeddingVars {
        EmbeddingVars { f: self.f.as_ref().map(|p| tape.param(p)), g: self.g.as_ref().map(|p| tape.param(p)) }
    }
}

impl EmbeddingVars {
    pub fn read(&self, tape: &Tape) -> EmbeddingPair {
        EmbeddingPair { f: self.f.map(|p| tape.conv_params(&p)), g: self.g.map(|p| tape.conv_params(&p)) }
    }

    pub fn embed_target(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match &self.g {
            Some(g) => tape.conv(x, g),
            None => Ok(x),
        }
    }

    pub fn embed_source(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match &self.f {
            Some(f) => tape.conv(x, f),
            None => Ok(x),
        }
    }
}

/// Records any alignment variant on a tape.
#[derive(Clone, Debug)]
pub struct TapeAligner {
    pub variant: Variant,
    pub spec: Option<Arc<NeighborhoodSpec>>,
    pub temperature: f32,
}

impl TapeAligner {
    pub fn new(variant: Variant, d: usize) -> Result<Self> {
        Ok(Self { variant, spec: variant.spec(d)?.map(Arc::new), temperature: 1.0 })
    }

    /// Softmax attention over an explicit offset set.
    pub fn with_spec(spec: NeighborhoodSpec) -> Self {
        Self { variant: Variant::Psla, spec: Some(Arc::new(spec)), temperature: 1.0 }
    }

    /// Returns `(aligned, weights)`.
    pub fn align(&self, tape: &mut Tape, target: Var, source: Var, emb: &EmbeddingVars) -> Result<(Var, Var)> {
        if tape.value(target).shape != tape.value(source).shape {
            return Err(config_err(format!(
                "alignment inputs differ: {:?} vs {:?}",
                tape.value(target).shape,
                tape.value(source).shape
            )));
        }
        let t = emb.embed_target(tape, target)?;
        let s = emb.embed_source(tape, source)?;
        match (&self.spec, self.variant) {
            (Some(spec), Variant::MatchTrans) => {
                let raw = tape.affinity(t, s, spec)?;
                let w = tape.matchtrans_local(raw)?;
                Ok((tape.aggregate(source, w, spec)?, w))
            }
            (Some(spec), _) => {
                let raw = tape.affinity(t, s, spec)?;
                let w = tape.softmax_local(raw, self.temperature)?;
                Ok((tape.aggregate(source, w, spec)?, w))
            }
            (None, _) => {
                let raw = tape.global_affinity(t, s)?;
                let w = tape.softmax_rows(raw)?;
                Ok((tape.global_aggregate(source, w)?, w))
            }
        }
    }
}
