//! Tensor and JSON dumps of one synthetic run.
//!
//! Layout of the output directory:
//! - `frame_NNN.output.bin`: task feature of every frame, (C, H, W)
//! - `frame_NNN.<stage>.weights.bin`: normalized attention, (H, W, K) with K
//!   innermost; `<stage>` is `rfu` on key frames, `denseft` or `propagate`
//!   on the others
//! - `frame_NNN.<stage>.aligned.bin`: the aligned map
//! - `frame_NNN.<stage>.json`: `{"d": .., "variant": ..}`
//! - `stats.json`: run statistics (wall times, so not reproducible)
//! - `tensors.json`: SHA-256 of every `.bin` file

use std::collections::BTreeMap;
use std::path::Path;

use psla_core::attention::{Alignment, Correspondence};
use psla_core::config::{Mode, RunConfig};
use psla_core::pipeline::{run_video, setup, RunOptions, RunStats};
use psla_core::Tensor;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "tensors.json";

#[derive(Clone, Debug, Serialize)]
pub struct DemoSummary {
    /// File name to SHA-256 hex digest, for every tensor written.
    pub tensors: BTreeMap<String, String>,
    pub stats: RunStats,
}

fn weights_tensor(a: &Alignment) -> Tensor {
    match &a.weights {
        Correspondence::Local(w) => w.normalized_tensor(),
        Correspondence::Global(g) => {
            Tensor::new(vec![g.height, g.width, g.height * g.width], g.data.clone()).expect("global weights are square")
        }
    }
}

struct Writer<'a> {
    dir: &'a Path,
    hashes: BTreeMap<String, String>,
}

impl Writer<'_> {
    fn tensor(&mut self, name: String, t: &Tensor) -> Result<()> {
        let bytes = t.to_bytes()?;
        let path = self.dir.join(&name);
        std::fs::write(&path, &bytes).map_err(|e| CliError::io(&path, e))?;
        let digest = Sha256::digest(&bytes);
        self.hashes.insert(name, digest.iter().map(|b| format!("{b:02x}")).collect());
        Ok(())
    }

    fn json(&self, name: &str, v: &impl Serialize) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, serde_json::to_string_pretty(v)?).map_err(|e| CliError::io(&path, e))
    }
}

pub fn run_demo(cfg: &RunConfig, seed: u64, out: &Path) -> Result<DemoSummary> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let (video, model) = setup(cfg, seed)?;
    let opts = RunOptions { keep_alignments: true, ..RunOptions::from_config(cfg) };
    let run = run_video(&video, &model, opts)?;
    let mut w = Writer { dir: out, hashes: BTreeMap::new() };
    for (i, feat) in run.outputs.iter().enumerate() {
        w.tensor(format!("frame_{i:03}.output.bin"), &feat.to_tensor())?;
        let Some(a) = &run.alignments[i] else { continue };
        let stage = match (run.schedule.is_key(i), cfg.mode) {
            (true, _) => "rfu",
            (false, Mode::F) => "denseft",
            (false, Mode::S) => "propagate",
        };
        w.tensor(format!("frame_{i:03}.{stage}.weights.bin"), &weights_tensor(a))?;
        w.tensor(format!("frame_{i:03}.{stage}.aligned.bin"), &a.output.to_tensor())?;
        w.json(&format!("frame_{i:03}.{stage}.json"), &serde_json::json!({ "d": cfg.d, "variant": cfg.variant.as_str() }))?;
    }
    w.json("stats.json", &run.stats)?;
    w.json(MANIFEST, &w.hashes)?;
    Ok(DemoSummary { tensors: w.hashes, stats: run.stats })
}
