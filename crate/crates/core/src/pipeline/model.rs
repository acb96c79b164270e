use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend, Alignment, EmbeddingPair, Variant};
use crate::checkpoint::{self, Manifest};
use crate::config::{Channels, RunConfig};
use crate::error::{config_err, Error, Result};
use crate::neighborhood::NeighborhoodSpec;
use crate::nets::{ParamLedger, TransformNet, TwoStreamFusionNet};
use crate::ops::ConvParams;
use crate::tensor::FeatureMap;

use super::StageTimes;

/// Every trainable part of the propagation pipeline plus the toy task head.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationModel {
    pub variant: Variant,
    pub d: usize,
    pub emb: EmbeddingPair,
    pub update: TwoStreamFusionNet,
    pub quality: TwoStreamFusionNet,
    pub transform: TransformNet,
    /// 1x1 conv from features to a one-channel heatmap.
    pub head: ConvParams,
}

impl PropagationModel {
    /// Random init. The two embeddings start from the same values (they are
    /// trained independently) so that initial affinities already favour
    /// matching content.
    pub fn init<R: Rng>(cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let Channels { low, feat, embed } = cfg.channels;
        let w = cfg.widths;
        // embed = 0 compares raw features
        let mut emb = if embed == 0 { EmbeddingPair::identity() } else { EmbeddingPair::init(feat, embed, true, rng) };
        emb.g = emb.f.clone();
        Ok(Self {
            variant: cfg.variant,
            d: cfg.d,
            emb,
            update: TwoStreamFusionNet::init(feat, w.fusion_reduce, w.fusion_hidden, rng),
            quality: TwoStreamFusionNet::init(feat, w.fusion_reduce, w.fusion_hidden, rng),
            transform: TransformNet::init(low, w.bottleneck, w.transform_mid, feat, rng),
            head: ConvParams::init_uniform(1, feat, 1, true, rng),
        })
    }

    /// Raw-feature affinities, a pass-through transform net and even
    /// fusion; needs `low == feat` channels.
    pub fn identity(variant: Variant, d: usize, feat_channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Self {
            variant,
            d,
            emb: EmbeddingPair::identity(),
            update: TwoStreamFusionNet::init(feat_channels, 8, 4, &mut rng),
            quality: TwoStreamFusionNet::init(feat_channels, 8, 4, &mut rng),
            transform: TransformNet::identity(feat_channels),
            head: ConvParams::zeros(1, feat_channels, 1, true),
        }
    }

    pub fn spec(&self) -> Result<Option<NeighborhoodSpec>> {
        self.variant.spec(self.d)
    }

    pub fn aligner(&self) -> Result<Aligner<'_>> {
        Ok(Aligner { variant: self.variant, spec: self.spec()?, emb: &self.emb })
    }

    /// Propagation machinery only; the task head is not counted.
    pub fn ledger(&self) -> ParamLedger {
        ParamLedger::new(&self.emb, &self.update, &self.quality, &self.transform)
    }

    pub fn named_layers(&self) -> Vec<(String, &ConvParams)> {
        let mut out = Vec::new();
        if let Some(f) = &self.emb.f {
            out.push(("emb_f".to_string(), f));
        }
        if let Some(g) = &self.emb.g {
            out.push(("emb_g".to_string(), g));
        }
        for (prefix, net) in [("update", &self.update), ("quality", &self.quality)] {
            for (name, p) in ["reduce", "hidden", "head"].iter().zip(net.layers()) {
                out.push((format!("{prefix}_{name}"), p));
            }
        }
        for (name, p) in ["reduce", "mid", "out"].iter().zip(self.transform.layers()) {
            out.push((format!("transform_{name}"), p));
        }
        out.push(("task_head".to_string(), &self.head));
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Manifest> {
        checkpoint::save(dir, &self.named_layers())
    }

    pub fn load(dir: impl AsRef<Path>, variant: Variant, d: usize) -> Result<Self> {
        let mut layers: HashMap<String, ConvParams> = checkpoint::load(dir)?.into_iter().collect();
        let mut take = |name: &str| {
            layers.remove(name).ok_or_else(|| Error::Format(format!("checkpoint is missing layer {name}")))
        };
        let emb = match (take("emb_f"), take("emb_g")) {
            (Ok(f), Ok(g)) => EmbeddingPair::new(f, g)?,
            (Err(_), Err(_)) => EmbeddingPair::identity(),
            _ => return Err(Error::Format("checkpoint has only one embedding".into())),
        };
        let update = TwoStreamFusionNet::new(take("update_reduce")?, take("update_hidden")?, take("update_head")?)?;
        let quality = TwoStreamFusionNet::new(take("quality_reduce")?, take("quality_hidden")?, take("quality_head")?)?;
        let transform = TransformNet::new(take("transform_reduce")?, take("transform_mid")?, take("transform_out")?)?;
        let head = take("task_head")?;
        let model = Self { variant, d, emb, update, quality, transform, head };
        model.check()?;
        Ok(model)
    }

    /// Channel consistency between the parts.
    pub fn check(&self) -> Result<()> {
        let feat = self.transform.feat_channels();
        if self.update.feat_channels() != feat || self.quality.feat_channels() != feat || self.head.in_channels != feat {
            return Err(config_err("model parts disagree on the feature width"));
        }
        if let Some(f) = &self.emb.f {
            if f.in_channels != feat {
                return Err(config_err("embeddings do not read the feature width"));
            }
        }
        Ok(())
    }
}

/// Alignment with a fixed variant, neighborhood and embedding pair.
#[derive(Clone, Debug)]
pub struct Aligner<'a> {
    pub variant: Variant,
    pub spec: Option<NeighborhoodSpec>,
    pub emb: &'a EmbeddingPair,
}

impl Aligner<'_> {
    /// Aligns `source` onto `target`, timing the `embed` and `attention` stages.
    pub fn align(&self, target: &FeatureMap, source: &FeatureMap, times: &mut StageTimes) -> Result<Alignment> {
        if !target.same_dims(source) {
            return Err(config_err(format!(
                "alignment inputs differ: {:?} vs {:?}",
                target.dims(),
                source.dims()
            )));
        }
        let start = Instant::now();
        let t = self.emb.embed_target(target)?;
        let s = self.emb.embed_source(source)?;
        times.add("embed", start);
        let start = Instant::now();
        let out = attend(self.variant, self.spec.clone(), &t, &s, source)?;
        times.add("attention", start);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;

    #[test]
    fn checkpoint_round_trip() {
        let cfg = RunConfig::small(Variant::Psla, Mode::F, 2, 5);
        let m = PropagationModel::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(m.emb.f, m.emb.g);
        let dir = tempfile::tempdir().unwrap();
        let manifest = m.save(dir.path()).unwrap();
        assert_eq!(manifest.layers.len(), 12);
        let back = PropagationModel::load(dir.path(), Variant::Psla, 2).unwrap();
        assert_eq!(back, m);

        let id = PropagationModel::identity(Variant::Dense, 1, 3);
        id.save(dir.path().join("id")).unwrap();
        assert_eq!(PropagationModel::load(dir.path().join("id"), Variant::Dense, 1).unwrap(), id);
    }

    #[test]
    fn aligner_rejects_mismatch() {
        let m = PropagationModel::identity(Variant::Psla, 2, 3);
        let a = m.aligner().unwrap();
        let mut t = StageTimes::default();
        let err = a.align(&FeatureMap::zeros(3, 4, 4), &FeatureMap::zeros(3, 4, 5), &mut t);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
