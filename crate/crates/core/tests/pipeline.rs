use psla_core::attention::Variant;
use psla_core::config::{Mode, RunConfig, VideoParams};
use psla_core::pipeline::{
    run_video, sample_triplet, setup, train_toy, Objective, PropagationModel, RunOptions, SyntheticVideo, TrainConfig,
    VideoDims,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dims(c: usize, hw: usize) -> VideoDims {
    VideoDims { low_channels: c, feat_channels: c, height: hw, width: hw }
}

fn crisp() -> VideoParams {
    VideoParams { texture_scale: 3.0, high_noise: 0.0, low_noise: 0.0, low_copies_high: true, ..VideoParams::default() }
}

#[test]
fn runs_are_deterministic() {
    let cfg = RunConfig::small(Variant::Psla, Mode::F, 2, 5);
    let (video, model) = setup(&cfg, 3).unwrap();
    let a = run_video(&video, &model, RunOptions::from_config(&cfg)).unwrap();
    let b = run_video(&video, &model, RunOptions::from_config(&cfg)).unwrap();
    assert_eq!(a.outputs, b.outputs);
}

#[test]
fn outputs_ignore_future_frames() {
    let cfg = RunConfig::small(Variant::Psla, Mode::F, 2, 5);
    let (video, model) = setup(&cfg, 4).unwrap();
    let (other, _) = setup(&cfg, 5).unwrap();
    let opts = RunOptions::from_config(&cfg);
    let base = run_video(&video, &model, opts).unwrap();
    let first_key = base.schedule.key_indices[0];
    for j in [first_key, 9, 12, 18] {
        let mut mixed = video.clone();
        for t in j + 1..video.len() {
            mixed.high[t] = other.high[t].clone();
            mixed.low[t] = other.low[t].clone();
        }
        let out = run_video(&mixed, &model, opts).unwrap();
        for t in 0..=j {
            assert_eq!(out.outputs[t], base.outputs[t], "frame {t} changed when frames after {j} did");
        }
        assert_ne!(out.outputs[video.len() - 1], base.outputs[video.len() - 1]);
    }
}

#[test]
fn static_video_reaches_a_fixed_point() {
    let frames = 100;
    let video = SyntheticVideo::with_displacements(8, vec![(0, 0); frames], dims(32, 12), &crisp()).unwrap();
    for variant in Variant::ALL {
        let model = PropagationModel::identity(variant, 3, 32);
        let out = run_video(&video, &model, RunOptions::new(Mode::F, 10)).unwrap();
        let keys = &out.schedule.key_indices;
        assert_eq!(keys.len(), 10);
        let steps: Vec<f32> = keys.windows(2).map(|w| out.outputs[w[1]].max_abs_diff(&out.outputs[w[0]])).collect();
        let acc = out.stats.mean_accuracy().unwrap();
        assert!(acc >= 0.99, "{variant}: centre accuracy {acc}");
        if variant == Variant::MatchTrans {
            // linear weights spread mass over every positive match, so the
            // update only contracts towards its fixed point
            assert!(steps.windows(2).all(|s| s[1] <= s[0]), "{variant}: {steps:?}");
            continue;
        }
        for (n, s) in steps.iter().enumerate().skip(4) {
            assert!(*s < 1e-5, "{variant}: update {} moved by {s}", n + 2);
        }
        for t in 0..frames {
            let k = out.schedule.key_for(t);
            assert!(out.outputs[t].max_abs_diff(&out.outputs[k]) < 1e-4, "{variant}: frame {t}");
        }
    }
}

#[test]
fn drifting_video_is_tracked() {
    let params = VideoParams { motion_prob: 0.5, max_displacement: 2, high_noise: 0.05, ..crisp() };
    let video = SyntheticVideo::generate(21, 40, dims(32, 16), &params).unwrap();
    for variant in [Variant::Psla, Variant::Dense] {
        let model = PropagationModel::identity(variant, 4, 32);
        for mode in [Mode::S, Mode::F] {
            let out = run_video(&video, &model, RunOptions::new(mode, 5)).unwrap();
            let acc = out.stats.mean_accuracy().unwrap();
            assert!(acc > 0.9, "{variant} {mode}: {acc}");
        }
    }
}

#[test]
fn triplet_windows_are_uniform() {
    // chi-square against uniform, critical values at p = 0.001
    let (i, l, total, n) = (10, 6, 30, 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut k1 = [0usize; 4];
    let mut k2 = [0usize; 7];
    for _ in 0..n {
        let t = sample_triplet(i, l, total, &mut rng);
        k1[t.k1 - 4] += 1;
        k2[t.k2 - 7] += 1;
    }
    let chi2 = |counts: &[usize]| {
        let e = n as f64 / counts.len() as f64;
        counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum::<f64>()
    };
    assert!(chi2(&k1) < 16.27, "k1 {k1:?}");
    assert!(chi2(&k2) < 22.46, "k2 {k2:?}");
}

#[test]
fn toy_training_learns_and_beats_low_level_only() {
    let full = train_toy(&TrainConfig::toy(Objective::Full, 1)).unwrap();
    assert!(full.final_loss(20) < 0.5 * full.initial_loss(20), "{} vs {}", full.final_loss(20), full.initial_loss(20));
    let low = train_toy(&TrainConfig::toy(Objective::LowOnly, 1)).unwrap();
    assert!(full.heldout_loss < low.heldout_loss, "{} vs {}", full.heldout_loss, low.heldout_loss);
}
