//! Video-level orchestration: key-frame scheduling, recursive updating of
//! a temporal feature on key frames and dense feature transforming on the
//! frames in between.

mod model;
mod train;
mod video;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use model::{Aligner, PropagationModel};
pub use train::{
    evaluate, sample_triplet, train_toy, Objective, TrainConfig, TrainReport, TrainingTriplet,
};
pub use video::{correspondence_accuracy, interior, translate, SyntheticVideo, VideoDims};

use crate::attention::Alignment;
use crate::config::{Mode, RunConfig};
use crate::error::{config_err, Error, Result};
use crate::nets::{fuse, quality_net_forward, transform_net_forward, update_net_forward, FusionWeights, TransformNet, TwoStreamFusionNet};
use crate::ops::{conv2d, ConvParams};
use crate::tensor::FeatureMap;

/// Wall time per named stage, in milliseconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes(pub BTreeMap<String, f64>);

impl StageTimes {
    pub fn add(&mut self, stage: &str, since: Instant) {
        let ms = since.elapsed().as_secs_f64() * 1e3;
        *self.0.entry(stage.to_string()).or_insert(0.0) += ms;
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.add(stage, start);
        out
    }

    pub fn get(&self, stage: &str) -> f64 {
        self.0.get(stage).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }
}

/// Fixed key-frame schedule: contiguous segments of `interval` frames (the
/// last may be shorter), each keyed at its middle frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FrameSchedule {
    pub total_frames: usize,
    pub interval: usize,
    pub key_indices: Vec<usize>,
}

/// Schedule for `total` frames; an interval of 0 is treated as 1.
pub fn schedule(total: usize, interval: usize) -> FrameSchedule {
    let l = interval.max(1);
    let key_indices = (0..total).step_by(l).map(|start| start + (l.min(total - start)) / 2).collect();
    FrameSchedule { total_frames: total, interval: l, key_indices }
}

impl FrameSchedule {
    pub fn segment_of(&self, frame: usize) -> usize {
        frame / self.interval
    }

    pub fn is_key(&self, frame: usize) -> bool {
        self.key_indices.get(self.segment_of(frame)) == Some(&frame)
    }

    /// Nearest key frame at or before `frame`; frames ahead of the first
    /// key frame use the first one.
    pub fn key_for(&self, frame: usize) -> usize {
        let seg = self.segment_of(frame);
        let k = self.key_indices[seg];
        if k <= frame || seg == 0 {
            k
        } else {
            self.key_indices[seg - 1]
        }
    }
}

/// The temporal feature maintained across key frames.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TemporalState {
    pub f_t: Option<FeatureMap>,
    pub last_key_index: Option<usize>,
    pub update_count: usize,
}

impl TemporalState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// What one recursive update did.
#[derive(Clone, Debug)]
pub struct RfuTrace {
    /// `None` on the first key frame, which only initializes the state.
    pub alignment: Option<Alignment>,
    pub weights: Option<FusionWeights>,
}

/// Aligns the temporal feature to the new key frame and fuses the two.
/// The updated feature also serves as the key frame's own output.
pub fn rfu_step(
    state: &mut TemporalState,
    key_index: usize,
    f_h_key: &FeatureMap,
    aligner: &Aligner,
    update_net: &TwoStreamFusionNet,
    times: &mut StageTimes,
) -> Result<RfuTrace> {
    let trace = match &state.f_t {
        None => {
            state.f_t = Some(f_h_key.clone());
            RfuTrace { alignment: None, weights: None }
        }
        Some(f_t) => {
            if !f_t.same_dims(f_h_key) {
                return Err(config_err(format!(
                    "key feature {:?} does not match the temporal feature {:?}",
                    f_h_key.dims(),
                    f_t.dims()
                )));
            }
            let aligned = aligner.align(f_h_key, f_t, times)?;
            let w = times.time("update_net", || update_net_forward(&aligned.output, f_h_key, update_net))?;
            let fused = times.time("fuse", || fuse(&w, &aligned.output, f_h_key))?;
            state.f_t = Some(fused);
            RfuTrace { alignment: Some(aligned), weights: Some(w) }
        }
    };
    state.last_key_index = Some(key_index);
    state.update_count += 1;
    Ok(trace)
}

#[derive(Clone, Debug)]
pub struct DenseFtOutput {
    pub output: FeatureMap,
    pub encoded: FeatureMap,
    pub alignment: Alignment,
}

/// Encodes low-level features, propagates the temporal feature onto them
/// and fuses detail back in.
pub fn denseft_step(
    state: &TemporalState,
    f_l: &FeatureMap,
    transform: &TransformNet,
    aligner: &Aligner,
    quality: &TwoStreamFusionNet,
    times: &mut StageTimes,
) -> Result<DenseFtOutput> {
    let f_t = state.f_t.as_ref().ok_or_else(|| Error::Usage("temporal state has not been initialized".into()))?;
    let encoded = times.time("transform", || transform_net_forward(f_l, transform))?;
    let alignment = aligner.align(&encoded, f_t, times)?;
    let output = times.time("quality_net", || quality_net_forward(&alignment.output, &encoded, quality))?;
    Ok(DenseFtOutput { output, encoded, alignment })
}

/// Propagation without recursive updating or quality fusion: the key
/// frame's own feature is aligned onto the encoded low-level feature.
pub fn propagate_step(
    key_feature: &FeatureMap,
    f_l: &FeatureMap,
    transform: &TransformNet,
    aligner: &Aligner,
    times: &mut StageTimes,
) -> Result<DenseFtOutput> {
    let encoded = times.time("transform", || transform_net_forward(f_l, transform))?;
    let alignment = aligner.align(&encoded, key_feature, times)?;
    Ok(DenseFtOutput { output: alignment.output.clone(), encoded, alignment })
}

/// Stand-in for feature extraction cost: a cheap network for every frame
/// and a much deeper one on top of it for key frames. Outputs are discarded.
#[derive(Clone, Debug)]
pub struct BackboneStub {
    pub low: ConvParams,
    pub high: Vec<ConvParams>,
}

pub const BACKBONE_DEPTH: usize = 6;

impl BackboneStub {
    pub fn new(low_channels: usize, feat_channels: usize, depth: usize) -> Self {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0xbacb);
        let low = ConvParams::init_uniform(3, 3, low_channels, true, &mut rng);
        let mut high = vec![ConvParams::init_uniform(3, low_channels, feat_channels, true, &mut rng)];
        for _ in 1..depth {
            high.push(ConvParams::init_uniform(3, feat_channels, feat_channels, true, &mut rng));
        }
        Self { low, high }
    }

    pub fn run(&self, key: bool, height: usize, width: usize) -> Result<()> {
        let image = FeatureMap::filled(3, height, width, 0.5);
        let mut x = conv2d(&image, &self.low, 1)?;
        if key {
            for p in &self.high {
                x = conv2d(&x, p, 1)?;
            }
        }
        std::hint::black_box(&x);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub frame: usize,
    pub is_key: bool,
    pub stage_times_ms: BTreeMap<String, f64>,
    pub correspondence_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub frames: Vec<FrameStats>,
    pub fps_equivalent: f64,
    pub params_total: usize,
}

impl RunStats {
    /// Mean accuracy over the frames where it is defined.
    pub fn mean_accuracy(&self) -> Option<f64> {
        let v: Vec<f64> = self.frames.iter().filter_map(|f| f.correspondence_accuracy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub mode: Mode,
    pub interval: usize,
    /// Run the backbone stub so timings include feature extraction.
    pub simulate_backbone: bool,
    /// Keep every frame's alignment in the output.
    pub keep_alignments: bool,
}

impl RunOptions {
    pub fn new(mode: Mode, interval: usize) -> Self {
        Self { mode, interval, simulate_backbone: false, keep_alignments: false }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self::new(cfg.mode, cfg.interval)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub schedule: FrameSchedule,
    /// Task feature of every frame.
    pub outputs: Vec<FeatureMap>,
    /// Alignment that produced each frame, when kept and when there was one.
    pub alignments: Vec<Option<Alignment>>,
    pub stats: RunStats,
}

fn frame_accuracy(video: &SyntheticVideo, alignment: &Alignment, target: usize, source: usize, band: usize) -> Option<f64> {
    let truth = video.gt_offset(target, source);
    if let Some(spec) = &alignment.spec {
        spec.index_of(truth)?;
    }
    let (h, w) = (alignment.output.height(), alignment.output.width());
    correspondence_accuracy(&alignment.argmax_offsets(), h, w, band, truth)
}

/// Runs the whole video in frame order.
///
/// Frames ahead of the first key frame are served from it; everything else
/// uses only the current frame and earlier key frames.
pub fn run_video(video: &SyntheticVideo, model: &PropagationModel, opts: RunOptions) -> Result<RunOutput> {
    model.check()?;
    let dims = video.dims();
    if dims.feat_channels != model.transform.feat_channels() || dims.low_channels != model.transform.low_channels() {
        return Err(config_err(format!(
            "video channels (low {}, feat {}) do not match the model (low {}, feat {})",
            dims.low_channels,
            dims.feat_channels,
            model.transform.low_channels(),
            model.transform.feat_channels()
        )));
    }
    let n = video.len();
    let sched = schedule(n, opts.interval);
    let aligner = model.aligner()?;
    let backbone = opts.simulate_backbone.then(|| BackboneStub::new(dims.low_channels, dims.feat_channels, BACKBONE_DEPTH));
    let band = model.d;

    let mut state = TemporalState::new();
    // key frame -> its task feature (mode F: the updated temporal feature)
    let mut key_output: Option<(usize, FeatureMap, Option<Alignment>, StageTimes)> = None;
    let mut outputs = Vec::with_capacity(n);
    let mut alignments = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n);

    let process_key = |k: usize, state: &mut TemporalState| -> Result<(FeatureMap, Option<Alignment>, StageTimes, Option<usize>)> {
        let mut times = StageTimes::default();
        if let Some(b) = &backbone {
            times.time("backbone", || b.run(true, dims.height, dims.width))?;
        }
        let prev = state.last_key_index;
        match opts.mode {
            Mode::F => {
                let trace = rfu_step(state, k, &video.high[k], &aligner, &model.update, &mut times)?;
                let out = state.f_t.clone().expect("state initialized by the update");
                Ok((out, trace.alignment, times, prev))
            }
            Mode::S => {
                state.last_key_index = Some(k);
                state.update_count += 1;
                Ok((video.high[k].clone(), None, times, None))
            }
        }
    };

    for i in 0..n {
        let k = sched.key_for(i);
        let needs_key = key_output.as_ref().map(|(kk, ..)| *kk) != Some(k);
        if needs_key {
            let (out, al, times, prev) = process_key(k, &mut state)?;
            let acc = match (&al, prev) {
                (Some(a), Some(p)) => frame_accuracy(video, a, k, p, band),
                _ => None,
            };
            frames.push(FrameStats { frame: k, is_key: true, stage_times_ms: times.0.clone(), correspondence_accuracy: acc });
            key_output = Some((k, out, al, times));
        }
        let (_, key_feat, key_al, _) = key_output.as_ref().expect("key frame processed");
        if i == k {
            outputs.push(key_feat.clone());
            alignments.push(if opts.keep_alignments { key_al.clone() } else { None });
            continue;
        }
        let mut times = StageTimes::default();
        if let Some(b) = &backbone {
            times.time("backbone", || b.run(false, dims.height, dims.width))?;
        }
        let step = match opts.mode {
            Mode::F => denseft_step(&state, &video.low[i], &model.transform, &aligner, &model.quality, &mut times)?,
            Mode::S => propagate_step(&video.high[k], &video.low[i], &model.transform, &aligner, &mut times)?,
        };
        let acc = frame_accuracy(video, &step.alignment, i, k, band);
        frames.push(FrameStats { frame: i, is_key: false, stage_times_ms: times.0, correspondence_accuracy: acc });
        outputs.push(step.output);
        alignments.push(opts.keep_alignments.then_some(step.alignment));
    }
    frames.sort_by_key(|f| f.frame);

    let total_ms: f64 = frames.iter().map(|f| f.stage_times_ms.values().sum::<f64>()).sum();
    let fps_equivalent = if total_ms > 0.0 { n as f64 * 1e3 / total_ms } else { f64::INFINITY };
    let stats = RunStats { frames, fps_equivalent, params_total: model.ledger().total };
    Ok(RunOutput { schedule: sched, outputs, alignments, stats })
}

/// Helper for building a model and video from one configuration cell.
pub fn setup(cfg: &RunConfig, seed: u64) -> Result<(SyntheticVideo, PropagationModel)> {
    cfg.validate()?;
    let dims = VideoDims {
        low_channels: cfg.channels.low,
        feat_channels: cfg.channels.feat,
        height: cfg.height,
        width: cfg.width,
    };
    let video = SyntheticVideo::generate(seed, cfg.frames, dims, &cfg.video)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed.wrapping_add(1));
    let model = PropagationModel::init(cfg, &mut rng)?;
    Ok((video, model))
}
