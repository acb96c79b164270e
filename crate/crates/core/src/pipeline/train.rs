//! End-to-end training on the toy heatmap task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PropagationModel, SyntheticVideo, VideoDims};
use crate::attention::{EmbeddingVars, TapeAligner};
use crate::autograd::{ConvVars, Tape, Var};
use crate::config::{Channels, Mode, RunConfig, VideoParams, Widths};
use crate::error::{Error, Result};
use crate::nets::{FusionNetVars, TransformNetVars};
use crate::ops::ConvParams;

/// Frames used for one training sample: `k1` initializes the temporal
/// feature, `k2` updates it and `i` is the supervised frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingTriplet {
    pub k1: usize,
    pub k2: usize,
    pub i: usize,
}

/// `k1` uniform in `[i - l, i - l/2]`, `k2` uniform in `[i - l/2, i + l/2]`,
/// both windows clamped to `[0, total)`. `l/2` rounds down.
pub fn sample_triplet<R: Rng>(i: usize, l: usize, total: usize, rng: &mut R) -> TrainingTriplet {
    let (i, l, last) = (i as i64, l as i64, total.max(1) as i64 - 1);
    let h = l / 2;
    let mut window = |lo: i64, hi: i64| {
        let (lo, hi) = (lo.clamp(0, last), hi.clamp(0, last));
        rng.gen_range(lo..=hi) as usize
    };
    let k1 = window(i - l, i - h);
    let k2 = window(i - h, i + h);
    TrainingTriplet { k1, k2, i: i as usize }
}

/// What the toy model is trained to do.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// Recursive updating with `k1`, `k2`, then transform, propagate and
    /// quality fusion on frame `i`.
    Full,
    /// Transform and propagate the `k2` key feature onto frame `i`.
    PropagateOnly,
    /// The task head reads the encoded low-level feature of frame `i` only.
    LowOnly,
}

impl From<Mode> for Objective {
    fn from(m: Mode) -> Self {
        match m {
            Mode::F => Objective::Full,
            Mode::S => Objective::PropagateOnly,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub run: RunConfig,
    pub objective: Objective,
    pub seed: u64,
    pub steps: usize,
    pub lr: f32,
    /// Rescale the step when the global gradient norm exceeds this.
    pub clip_norm: Option<f32>,
    pub train_videos: usize,
    /// Triplets drawn afresh for every step.
    pub batch_size: usize,
    /// Size of the fixed batch the loss curve is measured on.
    pub monitor_size: usize,
    pub heldout_videos: usize,
    pub heldout_triplets_per_video: usize,
}

impl TrainConfig {
    /// Small default setup that trains in seconds.
    pub fn toy(objective: Objective, seed: u64) -> Self {
        Self {
            run: RunConfig {
                variant: crate::attention::Variant::Psla,
                mode: Mode::F,
                d: 2,
                interval: 6,
                channels: Channels { low: 8, feat: 8, embed: 8 },
                height: 12,
                width: 12,
                frames: 16,
                widths: Widths::small(),
                video: VideoParams {
                    motion_prob: 0.3,
                    max_displacement: 2,
                    texture_scale: 1.0,
                    blob_gain: 1.0,
                    blob_sigma: 1.5,
                    high_noise: 0.5,
                    low_noise: 1.0,
                    low_blob_gain: 0.3,
                    low_copies_high: false,
                },
            },
            objective,
            seed,
            steps: 500,
            lr: 0.6,
            clip_norm: Some(1.0),
            train_videos: 16,
            batch_size: 8,
            monitor_size: 8,
            heldout_videos: 4,
            heldout_triplets_per_video: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Loss on the fixed monitor batch before each update.
    pub losses: Vec<f64>,
    pub heldout_loss: f64,
    pub model: PropagationModel,
}

impl TrainReport {
    fn window_mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Mean of the first `n` recorded losses.
    pub fn initial_loss(&self, n: usize) -> f64 {
        Self::window_mean(&self.losses[..n.min(self.losses.len())])
    }

    /// Mean of the last `n` recorded losses.
    pub fn final_loss(&self, n: usize) -> f64 {
        Self::window_mean(&self.losses[self.losses.len().saturating_sub(n)..])
    }
}

struct ModelVars {
    emb: EmbeddingVars,
    update: FusionNetVars,
    quality: FusionNetVars,
    transform: TransformNetVars,
    head: ConvVars,
}

impl ModelVars {
    fn register(model: &PropagationModel, tape: &mut Tape) -> Self {
        Self {
            emb: model.emb.register(tape),
            update: model.update.register(tape),
            quality: model.quality.register(tape),
            transform: model.transform.register(tape),
            head: tape.param(&model.head),
        }
    }

    /// Same order as [`params_mut`].
    fn conv_vars(&self) -> Vec<ConvVars> {
        let mut v: Vec<ConvVars> = self.emb.f.iter().chain(self.emb.g.iter()).copied().collect();
        v.extend(self.update.params());
        v.extend(self.quality.params());
        v.extend(self.transform.params());
        v.push(self.head);
        v
    }
}

fn params_mut(model: &mut PropagationModel) -> Vec<&mut ConvParams> {
    let mut v: Vec<&mut ConvParams> = model.emb.f.iter_mut().chain(model.emb.g.iter_mut()).collect();
    let u = &mut model.update;
    v.extend([&mut u.reduce, &mut u.hidden, &mut u.head]);
    let q = &mut model.quality;
    v.extend([&mut q.reduce, &mut q.hidden, &mut q.head]);
    let t = &mut model.transform;
    v.extend([&mut t.reduce, &mut t.mid, &mut t.out]);
    v.push(&mut model.head);
    v
}

/// Records the objective for one triplet and returns the loss node.
fn record_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    aligner: &TapeAligner,
    video: &SyntheticVideo,
    trip: TrainingTriplet,
    objective: Objective,
) -> Result<Var> {
    let low = tape.leaf_map(&video.low[trip.i]);
    let encoded = vars.transform.forward(tape, low)?;
    let feature = match objective {
        Objective::LowOnly => encoded,
        Objective::PropagateOnly => {
            let key = tape.leaf_map(&video.high[trip.k2]);
            aligner.align(tape, encoded, key, &vars.emb)?.0
        }
        Objective::Full => {
            let f_t = tape.leaf_map(&video.high[trip.k1]);
            let key = tape.leaf_map(&video.high[trip.k2]);
            let (aligned, _) = aligner.align(tape, key, f_t, &vars.emb)?;
            let f_t = vars.update.fuse(tape, aligned, key)?;
            let (propagated, _) = aligner.align(tape, encoded, f_t, &vars.emb)?;
            vars.quality.fuse(tape, propagated, encoded)?
        }
    };
    let pred = tape.conv(feature, &vars.head)?;
    let target = tape.leaf_map(&video.heatmaps[trip.i]);
    tape.mse(pred, target)
}

/// Loss and per-parameter gradients for one triplet.
fn loss_and_grads(
    model: &PropagationModel,
    aligner: &TapeAligner,
    video: &SyntheticVideo,
    trip: TrainingTriplet,
    objective: Objective,
    with_grads: bool,
) -> Result<(f64, Vec<Option<Vec<f32>>>)> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(model, &mut tape);
    let loss = record_loss(&mut tape, &vars, aligner, video, trip, objective)?;
    let value = tape.scalar(loss)?;
    if !with_grads {
        return Ok((value, Vec::new()));
    }
    let g = tape.backward(loss)?;
    let mut out = Vec::new();
    for cv in vars.conv_vars() {
        out.push(g.get(cv.weight).map(|t| t.data.clone()));
        out.push(cv.bias.and_then(|b| g.get(b)).map(|t| t.data.clone()));
    }
    Ok((value, out))
}

fn derived_seed(seed: u64, tag: u64, j: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (tag << 32) ^ j as u64
}

fn make_videos(cfg: &TrainConfig, tag: u64, count: usize) -> Result<Vec<SyntheticVideo>> {
    let r = &cfg.run;
    let dims = VideoDims { low_channels: r.channels.low, feat_channels: r.channels.feat, height: r.height, width: r.width };
    (0..count).map(|j| SyntheticVideo::generate(derived_seed(cfg.seed, tag, j), r.frames, dims, &r.video)).collect()
}

fn sample_batch<R: Rng>(videos: &[SyntheticVideo], n: usize, interval: usize, rng: &mut R) -> Vec<(usize, TrainingTriplet)> {
    (0..n)
        .map(|_| {
            let v = rng.gen_range(0..videos.len());
            let i = rng.gen_range(0..videos[v].len());
            (v, sample_triplet(i, interval, videos[v].len(), rng))
        })
        .collect()
}

fn make_triplets(videos: &[SyntheticVideo], per_video: usize, interval: usize, seed: u64) -> Vec<(usize, TrainingTriplet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (v, video) in videos.iter().enumerate() {
        for _ in 0..per_video {
            let i = rng.gen_range(0..video.len());
            out.push((v, sample_triplet(i, interval, video.len(), &mut rng)));
        }
    }
    out
}

/// Mean loss of `model` on fixed triplets.
pub fn evaluate(
    model: &PropagationModel,
    objective: Objective,
    videos: &[SyntheticVideo],
    triplets: &[(usize, TrainingTriplet)],
) -> Result<f64> {
    let aligner = TapeAligner::new(model.variant, model.d)?;
    let losses: Vec<f64> = triplets
        .par_iter()
        .map(|&(v, t)| loss_and_grads(model, &aligner, &videos[v], t, objective, false).map(|r| r.0))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Trains the model from its seeded initialization with minibatch gradient
/// steps; the step size drops tenfold after two thirds of the steps. The
/// recorded curve is measured on a fixed batch so it depends only on the
/// parameters.
pub fn train_toy(cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.run.validate()?;
    let mut model = PropagationModel::init(&cfg.run, &mut ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, 1, 0)))?;
    let train = make_videos(cfg, 2, cfg.train_videos)?;
    if train.is_empty() || cfg.batch_size == 0 || cfg.monitor_size == 0 {
        return Err(crate::error::config_err("training needs videos and non-empty batches"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, 3, 0));
    let monitor = sample_batch(&train, cfg.monitor_size, cfg.run.interval, &mut rng);
    let aligner = TapeAligner::new(model.variant, model.d)?;
    let drop_at = cfg.steps * 2 / 3;

    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let loss = evaluate(&model, cfg.objective, &train, &monitor)?;
        let batch = sample_batch(&train, cfg.batch_size, cfg.run.interval, &mut rng);
        let results: Vec<(f64, Vec<Option<Vec<f32>>>)> = batch
            .par_iter()
            .map(|&(v, t)| loss_and_grads(&model, &aligner, &train[v], t, cfg.objective, true))
            .collect::<Result<_>>()?;
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        losses.push(loss);

        let lr = if step < drop_at { cfg.lr } else { cfg.lr * 0.1 };
        let n = results.len().max(1) as f32;
        let mut scale = lr / n;
        if let Some(max) = cfg.clip_norm {
            let mut sq = 0.0f64;
            for slot in 0..results[0].1.len() {
                let mut acc: Vec<f64> = Vec::new();
                for r in &results {
                    if let Some(g) = &r.1[slot] {
                        acc.resize(g.len(), 0.0);
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += *v as f64;
                        }
                    }
                }
                sq += acc.iter().map(|a| (a / n as f64).powi(2)).sum::<f64>();
            }
            let norm = sq.sqrt() as f32;
            if norm > max {
                scale *= max / norm;
            }
        }
        for (pi, p) in params_mut(&mut model).into_iter().enumerate() {
            // summed in pool order, so the update is deterministic
            for r in &results {
                if let Some(g) = &r.1[2 * pi] {
                    for (w, gv) in p.weights.iter_mut().zip(g) {
                        *w -= scale * gv;
                    }
                }
                if let (Some(b), Some(g)) = (p.bias.as_mut(), &r.1[2 * pi + 1]) {
                    for (w, gv) in b.iter_mut().zip(g) {
                        *w -= scale * gv;
                    }
                }
            }
        }
    }

    let held = make_videos(cfg, 4, cfg.heldout_videos)?;
    let held_triplets = make_triplets(&held, cfg.heldout_triplets_per_video, cfg.run.interval, derived_seed(cfg.seed, 5, 0));
    let heldout_loss = evaluate(&model, cfg.objective, &held, &held_triplets)?;
    Ok(TrainReport { losses, heldout_loss, model })
}
