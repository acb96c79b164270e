//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::collections::HashSet;
use std::time::Instant;

use psla_cli::bench::measure;
use psla_cli::demo::run_demo;
use psla_cli::gradcheck::{run_suite, TOLERANCE as GRAD_TOL};
use psla_core::attention::oracle::{brute_force_align, PositionSet};
use psla_core::attention::{align, attend, psla_align, EmbeddingPair, Variant};
use psla_core::config::{GridConfig, Mode, VideoParams};
use psla_core::neighborhood::NeighborhoodSpec;
use psla_core::nets::{ParamLedger, TwoStreamFusionNet};
use psla_core::ops::ConvParams;
use psla_core::pipeline::{
    correspondence_accuracy, run_video, train_toy, translate, Objective, PropagationModel, RunOptions, SyntheticVideo,
    TrainConfig, VideoDims,
};
use psla_core::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f32 = 1e-5;
const ORACLE_CASES: u64 = 60;
const GRAD_BUDGET_S: f64 = 60.0;
const MAX_LAW_D: usize = 16;
const SPEED_RATIO: f64 = 0.7;
const SPEED_REPS: usize = 11;
const SHIFT_ACC: f64 = 0.9;
const STATIC_ACC: f64 = 0.99;
const SIMPLEX_TOL: f32 = 1e-6;
const SIMPLEX_NETS: u64 = 100;
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];
const PARAM_LIMIT: usize = 8_000_000;

type Outcome = (bool, String);

fn oracle_equivalence() -> Outcome {
    let mut worst = 0.0f32;
    let mut ds = HashSet::new();
    for seed in 0..ORACLE_CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 1 + (seed as usize % 5);
        ds.insert(d);
        let (c, h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=12), rng.gen_range(1..=12));
        let t = FeatureMap::random_uniform(c, h, w, -1.0, 1.0, &mut rng);
        let s = FeatureMap::random_uniform(c, h, w, -1.0, 1.0, &mut rng);
        let emb = if seed % 3 == 0 { EmbeddingPair::identity() } else { EmbeddingPair::init(c, rng.gen_range(1..=6), true, &mut rng) };
        let spec = NeighborhoodSpec::progressive(d).unwrap();
        let (out, _) = psla_align(&t, &s, &emb, &spec).unwrap();
        let o = brute_force_align(&t, &s, &emb, &PositionSet::Offsets(spec.offsets.clone()));
        worst = worst.max(out.max_abs_diff(&o));
    }
    // the largest map, every cell (borders included)
    let mut rng = ChaCha8Rng::seed_from_u64(999);
    let t = FeatureMap::random_uniform(8, 12, 12, -1.0, 1.0, &mut rng);
    let s = FeatureMap::random_uniform(8, 12, 12, -1.0, 1.0, &mut rng);
    let emb = EmbeddingPair::init(8, 4, true, &mut rng);
    for d in 1..=5 {
        let spec = NeighborhoodSpec::progressive(d).unwrap();
        let (out, _) = psla_align(&t, &s, &emb, &spec).unwrap();
        worst = worst.max(out.max_abs_diff(&brute_force_align(&t, &s, &emb, &PositionSet::Offsets(spec.offsets.clone()))));
    }
    let ok = worst < ORACLE_TOL && ds.len() == 5;
    (ok, format!("cases={} d=1..5 max_abs_err={worst:.2e} tol={ORACLE_TOL:.0e}", ORACLE_CASES + 5))
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let rows = match run_suite(0, false) {
        Ok(r) => r,
        Err(e) => return (false, e.to_string()),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = rows.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failed: Vec<_> = rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    let ok = failed.is_empty() && secs < GRAD_BUDGET_S;
    (
        ok,
        format!(
            "checks={} worst={} {:.2e} tol={GRAD_TOL:.0e} time={secs:.2}s failed={failed:?}",
            rows.len(),
            worst.name,
            worst.max_rel_error
        ),
    )
}

fn neighborhood_law() -> Outcome {
    let mut bad = Vec::new();
    for d in 1..=MAX_LAW_D {
        let p = NeighborhoodSpec::progressive(d).unwrap();
        let dense = NeighborhoodSpec::dense(d).unwrap();
        if p.len() != 1 + 8 * d || p.offset_set().len() != p.len() || !p.offset_set().is_subset(&dense.offset_set()) {
            bad.push(d);
        }
    }
    let one = NeighborhoodSpec::progressive(1).unwrap().offset_set() == NeighborhoodSpec::dense(1).unwrap().offset_set();
    (bad.is_empty() && one, format!("d=1..{MAX_LAW_D} violations={bad:?} phi(1)==3x3:{one}"))
}

fn sparse_vs_dense_speed() -> Outcome {
    let (c, h, w, d) = (256, 38, 38, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = FeatureMap::random_uniform(c, h, w, -1.0, 1.0, &mut rng);
    let s = FeatureMap::random_uniform(c, h, w, -1.0, 1.0, &mut rng);
    let time = |v: Variant| {
        let spec = v.spec(d).unwrap();
        measure(SPEED_REPS, 2, || Ok(attend(v, spec.clone(), &t, &s, &s)?)).unwrap()
    };
    let (sparse, dense) = (time(Variant::Psla), time(Variant::Dense));
    let ratio = sparse.median_ms / dense.median_ms;
    (
        ratio <= SPEED_RATIO,
        format!(
            "{c}x{h}x{w} d={d} reps={SPEED_REPS} sparse={:.2}ms dense={:.2}ms ratio={ratio:.3} (offsets 33/81=0.407) limit={SPEED_RATIO}",
            sparse.median_ms, dense.median_ms
        ),
    )
}

fn shift_recovery() -> Outcome {
    let crisp = VideoParams { texture_scale: 3.0, high_noise: 0.0, low_noise: 0.0, low_copies_high: true, ..VideoParams::default() };
    let dims = |hw| VideoDims { low_channels: 32, feat_channels: 32, height: hw, width: hw };
    let mut min_shift = f64::INFINITY;

    // single translated pairs, offsets spread over every ring
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = NeighborhoodSpec::progressive(4).unwrap();
    for (i, &shift) in spec.offsets.iter().enumerate() {
        let tex = FeatureMap::random_uniform(32, 20, 20, -3.0, 3.0, &mut rng);
        let src = translate(&tex, shift);
        let v = if i % 2 == 0 { Variant::Psla } else { Variant::Dense };
        let a = align(v, 4, &tex, &src, &EmbeddingPair::identity()).unwrap();
        min_shift = min_shift.min(correspondence_accuracy(&a.argmax_offsets(), 20, 20, 4, shift).unwrap());
    }
    // drifting videos through the whole pipeline
    let drift = VideoParams { motion_prob: 0.5, max_displacement: 2, high_noise: 0.05, ..crisp };
    let mut min_video = f64::INFINITY;
    for seed in [21, 22, 23] {
        let video = SyntheticVideo::generate(seed, 40, dims(16), &drift).unwrap();
        let model = PropagationModel::identity(Variant::Psla, 4, 32);
        for mode in [Mode::S, Mode::F] {
            let acc = run_video(&video, &model, RunOptions::new(mode, 5)).unwrap().stats.mean_accuracy().unwrap();
            min_video = min_video.min(acc);
        }
    }
    let still = SyntheticVideo::with_displacements(8, vec![(0, 0); 30], dims(12), &crisp).unwrap();
    let mut min_static = f64::INFINITY;
    for v in Variant::ALL {
        let model = PropagationModel::identity(v, 3, 32);
        let acc = run_video(&still, &model, RunOptions::new(Mode::F, 5)).unwrap().stats.mean_accuracy().unwrap();
        min_static = min_static.min(acc);
    }
    let ok = min_shift >= SHIFT_ACC && min_video >= SHIFT_ACC && min_static >= STATIC_ACC;
    (
        ok,
        format!("pairs_min={min_shift:.3} videos_min={min_video:.3} (>= {SHIFT_ACC}) static_min={min_static:.3} (>= {STATIC_ACC})"),
    )
}

fn fusion_simplex() -> Outcome {
    let mut worst = 0.0f32;
    let mut out_of_range = 0usize;
    for seed in 0..SIMPLEX_NETS {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let c = r.gen_range(1..=6);
        let (h, w) = (r.gen_range(1..=8), r.gen_range(1..=8));
        let mut net = TwoStreamFusionNet::init(c, r.gen_range(1..=8), r.gen_range(1..=4), &mut r);
        let hidden = net.hidden.out_channels;
        net.head = ConvParams::init_uniform(3, hidden, 2, true, &mut r);
        let gain = r.gen_range(0.1f32..30.0);
        net.head.weights.iter_mut().for_each(|x| *x *= gain);
        let a = FeatureMap::random_uniform(c, h, w, -3.0, 3.0, &mut r);
        let b = FeatureMap::random_uniform(c, h, w, -3.0, 3.0, &mut r);
        let fw = net.weights(&a, &b).unwrap();
        for (x, y) in fw.w_hat.iter().zip(&fw.w) {
            worst = worst.max((x + y - 1.0).abs());
            if !(0.0..=1.0).contains(x) || !(0.0..=1.0).contains(y) {
                out_of_range += 1;
            }
        }
    }
    (
        worst <= SIMPLEX_TOL && out_of_range == 0,
        format!("nets={SIMPLEX_NETS} max|w_hat+w-1|={worst:.1e} tol={SIMPLEX_TOL:.0e} out_of_range={out_of_range}"),
    )
}

fn ablation_direction() -> Outcome {
    let mut agree = 0;
    let mut detail = Vec::new();
    for seed in ABLATION_SEEDS {
        let loss = |o: Objective| train_toy(&TrainConfig::toy(o, seed)).map(|r| r.heldout_loss);
        match (loss(Objective::Full), loss(Objective::PropagateOnly), loss(Objective::LowOnly)) {
            (Ok(f), Ok(s), Ok(l)) => {
                if f < s && s < l {
                    agree += 1;
                }
                detail.push(format!("seed{seed}: F={f:.4} S={s:.4} low={l:.4}"));
            }
            (f, s, l) => detail.push(format!("seed{seed}: error {:?}", [f.err(), s.err(), l.err()])),
        }
    }
    let need = ABLATION_SEEDS.len() / 2 + 1;
    (agree >= need, format!("agree={agree}/{} (need {need}) {}", ABLATION_SEEDS.len(), detail.join(" ")))
}

fn parameter_ledger() -> Outcome {
    let closed = ParamLedger::closed_form(1024, 1024, 256);
    let cfg = GridConfig::from_json(
        r#"{"channels": {"low": 1024, "feat": 1024, "embed": 256},
            "widths": {"fusion_reduce": 256, "fusion_hidden": 16, "bottleneck": 256, "transform_mid": 256}}"#,
    )
    .unwrap()
    .cells()
    .unwrap()
    .remove(0);
    let allocated = psla_cli::params_ledger(&cfg).unwrap();
    let ok = closed.total < PARAM_LIMIT && closed == allocated;
    (
        ok,
        format!(
            "total={} (emb {} update {} quality {} transform {}) limit={PARAM_LIMIT} allocated_matches={}",
            closed.total,
            closed.embeddings,
            closed.update_net,
            closed.quality_net,
            closed.transform_net,
            closed == allocated
        ),
    )
}

fn demo_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GridConfig::default().cells().unwrap().remove(0);
    let a = run_demo(&cfg, 42, &dir.path().join("a")).unwrap();
    let b = run_demo(&cfg, 42, &dir.path().join("b")).unwrap();
    let mut differing = 0;
    for name in a.tensors.keys() {
        let x = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(name)).unwrap();
        if x != y {
            differing += 1;
        }
    }
    let ok = differing == 0 && a.tensors == b.tensors && !a.tensors.is_empty();
    (ok, format!("tensors={} differing={differing}", a.tensors.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("oracle equivalence", oracle_equivalence),
        ("gradient integrity", gradient_integrity),
        ("neighborhood law", neighborhood_law),
        ("sparse vs dense stage time", sparse_vs_dense_speed),
        ("shift recovery", shift_recovery),
        ("fusion simplex", fusion_simplex),
        ("ablation direction", ablation_direction),
        ("parameter ledger", parameter_ledger),
        ("demo determinism", demo_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = f();
        if !ok {
            failed += 1;
        }
        println!(
            "{} {} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
