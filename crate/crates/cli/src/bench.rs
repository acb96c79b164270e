//! Timing sweep over a config grid.
//!
//! Each cell is set up (video, model, embedded maps) outside the timed
//! region. The CSV row of a cell reports the attention stage alone:
//! affinities, normalization and aggregation on pre-embedded maps. The JSON
//! report adds per-stage medians of whole key and non-key frames and the
//! fps they imply at the cell's interval.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use psla_core::attention::{attend, macs_per_location, Variant};
use psla_core::config::{GridConfig, Mode, RunConfig};
use psla_core::pipeline::{
    denseft_step, propagate_step, rfu_step, run_video, setup, BackboneStub, PropagationModel, RunOptions, StageTimes,
    SyntheticVideo, TemporalState, BACKBONE_DEPTH,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CliError, Result};

pub const CSV_HEADER: &str = "variant,mode,d,interval,C,H,W,stage,median_ms,p90_ms,macs,params,corr_acc";
pub const DEFAULT_REPEAT: usize = 11;
pub const WARMUP: usize = 2;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct BenchRow {
    pub variant: String,
    pub mode: String,
    pub d: usize,
    pub interval: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub stage: String,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub macs: u64,
    pub params: usize,
    pub corr_acc: Option<f64>,
}

#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct Timing {
    pub median_ms: f64,
    pub p90_ms: f64,
}

impl Timing {
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n == 0 {
            return Self { median_ms: f64::NAN, p90_ms: f64::NAN };
        }
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        // nearest rank
        let rank = ((0.9 * n as f64).ceil() as usize).clamp(1, n);
        Self { median_ms: median, p90_ms: s[rank - 1] }
    }
}

/// Runs `f` `warmup + repeat` times and summarizes the last `repeat` wall times.
pub fn measure<T>(repeat: usize, warmup: usize, mut f: impl FnMut() -> Result<T>) -> Result<Timing> {
    for _ in 0..warmup {
        std::hint::black_box(f()?);
    }
    let mut samples = Vec::with_capacity(repeat);
    for _ in 0..repeat {
        let start = Instant::now();
        std::hint::black_box(f()?);
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Timing::from_samples(&samples))
}

/// Whole-frame costs of one (variant, mode, d) setting.
#[derive(Clone, Debug, Serialize)]
pub struct FrameCosts {
    pub key: Timing,
    pub non_key: Timing,
    /// Median of every stage, prefixed with `key.` or `non_key.`.
    pub stages: BTreeMap<String, f64>,
}

impl FrameCosts {
    /// Frames per second when every `interval`-th frame is a key frame.
    pub fn fps(&self, interval: usize) -> f64 {
        let l = interval as f64;
        1e3 * l / (self.key.median_ms + (l - 1.0) * self.non_key.median_ms)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CellReport {
    #[serde(flatten)]
    pub row: BenchRow,
    pub frame_costs: FrameCosts,
    pub fps_equivalent: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub repeat: usize,
    pub warmup: usize,
    pub seed: u64,
    pub cells: Vec<CellReport>,
}

/// Median time of the attention stage on maps of `cfg`'s size.
pub fn attention_timing(cfg: &RunConfig, video: &SyntheticVideo, model: &PropagationModel, repeat: usize) -> Result<Timing> {
    let spec = cfg.variant.spec(cfg.d)?;
    let source = &video.high[0];
    let target = &video.high[video.len() - 1];
    let t = model.emb.embed_target(target)?;
    let s = model.emb.embed_source(source)?;
    measure(repeat, WARMUP, || Ok(attend(cfg.variant, spec.clone(), &t, &s, source)?))
}

fn stage_medians(prefix: &str, runs: &[StageTimes], out: &mut BTreeMap<String, f64>) {
    let mut by_stage: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in runs {
        for (k, v) in &r.0 {
            by_stage.entry(k).or_default().push(*v);
        }
    }
    for (k, v) in by_stage {
        out.insert(format!("{prefix}.{k}"), Timing::from_samples(&v).median_ms);
    }
}

/// Times a key frame (backbone stub plus recursive update in mode F) and a
/// non-key frame (cheap backbone plus dense transform or plain propagation).
pub fn frame_costs(cfg: &RunConfig, video: &SyntheticVideo, model: &PropagationModel, repeat: usize) -> Result<FrameCosts> {
    let aligner = model.aligner()?;
    let dims = video.dims();
    let backbone = BackboneStub::new(dims.low_channels, dims.feat_channels, BACKBONE_DEPTH);
    let last = video.len() - 1;
    let mut state = TemporalState::new();
    rfu_step(&mut state, 0, &video.high[0], &aligner, &model.update, &mut StageTimes::default())?;

    let mut key_runs = Vec::new();
    let key = measure(repeat, WARMUP, || {
        let mut times = StageTimes::default();
        times.time("backbone", || backbone.run(true, dims.height, dims.width))?;
        if cfg.mode == Mode::F {
            let mut st = state.clone();
            rfu_step(&mut st, last, &video.high[last], &aligner, &model.update, &mut times)?;
        }
        key_runs.push(times);
        Ok(())
    })?;
    let mut non_key_runs = Vec::new();
    let non_key = measure(repeat, WARMUP, || {
        let mut times = StageTimes::default();
        times.time("backbone", || backbone.run(false, dims.height, dims.width))?;
        let out = match cfg.mode {
            Mode::F => denseft_step(&state, &video.low[last], &model.transform, &aligner, &model.quality, &mut times)?,
            Mode::S => propagate_step(&video.high[0], &video.low[last], &model.transform, &aligner, &mut times)?,
        };
        non_key_runs.push(times);
        Ok(out)
    })?;
    let mut stages = BTreeMap::new();
    stage_medians("key", &key_runs[WARMUP..], &mut stages);
    stage_medians("non_key", &non_key_runs[WARMUP..], &mut stages);
    Ok(FrameCosts { key, non_key, stages })
}

/// Rayon pool sized by `PSLA_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("PSLA_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("PSLA_THREADS must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

/// Runs every cell of the grid. Accuracy runs go in parallel; timed
/// sections run one cell at a time.
pub fn run_bench(grid: &GridConfig, seed: u64, repeat: usize) -> Result<BenchReport> {
    if repeat < 5 {
        return Err(CliError::Config(format!("--repeat must be at least 5, got {repeat}")));
    }
    let cells = grid.cells()?;
    let prepared: Vec<(RunConfig, SyntheticVideo, PropagationModel, Option<f64>)> = cells
        .into_par_iter()
        .map(|cfg| {
            let (video, model) = setup(&cfg, seed)?;
            let acc = run_video(&video, &model, RunOptions::from_config(&cfg))?.stats.mean_accuracy();
            Ok((cfg, video, model, acc))
        })
        .collect::<Result<_>>()?;

    let mut costs: HashMap<(Variant, Mode, usize), FrameCosts> = HashMap::new();
    let mut attention: HashMap<(Variant, usize), Timing> = HashMap::new();
    let mut out = Vec::with_capacity(prepared.len());
    for (cfg, video, model, acc) in &prepared {
        let att = match attention.get(&(cfg.variant, cfg.d)) {
            Some(t) => *t,
            None => *attention.entry((cfg.variant, cfg.d)).or_insert(attention_timing(cfg, video, model, repeat)?),
        };
        let fc = match costs.get(&(cfg.variant, cfg.mode, cfg.d)) {
            Some(c) => c.clone(),
            None => costs.entry((cfg.variant, cfg.mode, cfg.d)).or_insert(frame_costs(cfg, video, model, repeat)?).clone(),
        };
        let embed = model.emb.embed_channels(cfg.channels.feat);
        let positions = cfg.variant.positions(cfg.d, cfg.height, cfg.width);
        let macs = (macs_per_location(positions, embed, cfg.channels.feat) * cfg.height * cfg.width) as u64;
        let row = BenchRow {
            variant: cfg.variant.to_string(),
            mode: cfg.mode.to_string(),
            d: cfg.d,
            interval: cfg.interval,
            c: cfg.channels.feat,
            h: cfg.height,
            w: cfg.width,
            stage: "attention".into(),
            median_ms: att.median_ms,
            p90_ms: att.p90_ms,
            macs,
            params: model.ledger().total,
            corr_acc: *acc,
        };
        let fps_equivalent = fc.fps(cfg.interval);
        out.push(CellReport { row, frame_costs: fc, fps_equivalent });
    }
    Ok(BenchReport { repeat, warmup: WARMUP, seed, cells: out })
}

pub fn write_csv<W: std::io::Write>(rows: impl IntoIterator<Item = BenchRow>, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut any = false;
    for r in rows {
        wr.serialize(r)?;
        any = true;
    }
    if !any {
        wr.write_record(CSV_HEADER.split(','))?;
    }
    wr.flush().map_err(|e| CliError::io("csv output", e))?;
    Ok(())
}

/// Writes `<out>.csv` and `<out>.json` (any extension on `out` is replaced).
pub fn write_report(report: &BenchReport, out: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let csv_path = out.with_extension("csv");
    let json_path = out.with_extension("json");
    let f = std::fs::File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    write_csv(report.cells.iter().map(|c| c.row.clone()), f)?;
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(&json_path, text).map_err(|e| CliError::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timing_summary() {
        let t = Timing::from_samples(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(t.median_ms, 3.0);
        assert_eq!(t.p90_ms, 5.0);
        let t = Timing::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.median_ms, 2.5);
        let t = Timing::from_samples(&(1..=11).map(f64::from).collect::<Vec<_>>());
        assert_eq!((t.median_ms, t.p90_ms), (6.0, 10.0));
    }

    #[test]
    fn fps_from_costs() {
        let c = FrameCosts {
            key: Timing { median_ms: 10.0, p90_ms: 10.0 },
            non_key: Timing { median_ms: 2.0, p90_ms: 2.0 },
            stages: BTreeMap::new(),
        };
        assert_eq!(c.fps(1), 100.0);
        assert!((c.fps(5) - 5e3 / 18.0).abs() < 1e-9);
    }

    #[test]
    fn empty_csv_still_has_header() {
        let mut buf = Vec::new();
        write_csv(Vec::new(), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), CSV_HEADER);
    }
}
