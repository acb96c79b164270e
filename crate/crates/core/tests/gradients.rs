//! Central-difference checks of every differentiable operator and of the
//! composed update and transform paths.

use std::sync::Arc;

use psla_core::attention::{EmbeddingPair, TapeAligner, Variant};
use psla_core::autograd::{ConvVars, Tape, Var};
use psla_core::gradcheck::grad_check;
use psla_core::neighborhood::NeighborhoodSpec;
use psla_core::nets::{TransformNet, TwoStreamFusionNet};
use psla_core::ops::{conv2d, relu, ConvParams};
use psla_core::{FeatureMap, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;
const EPS: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn map(c: usize, h: usize, w: usize, lo: f32, hi: f32, r: &mut ChaCha8Rng) -> Tensor {
    FeatureMap::random_uniform(c, h, w, lo, hi, r).into_tensor()
}

fn conv_inputs(p: &ConvParams) -> Vec<Tensor> {
    let mut v = vec![p.weight_tensor()];
    v.extend(p.bias_tensor());
    v
}

fn conv_vars(v: &[Var], kernel: usize) -> ConvVars {
    ConvVars { weight: v[0], bias: v.get(1).copied(), kernel }
}

fn check(name: &str, build: impl Fn(&mut Tape, &[Var]) -> psla_core::Result<Var>, inputs: &[Tensor]) {
    let r = grad_check(build, inputs, EPS).unwrap();
    assert!(r.max_rel_error < TOL, "{name}: {r:?}");
    assert!(r.entries_checked > 0);
}

#[test]
fn affinity_softmax_aggregate() {
    let mut r = rng(1);
    let spec = Arc::new(NeighborhoodSpec::progressive(2).unwrap());
    let t = map(4, 6, 6, -1.0, 1.0, &mut r);
    let s = map(4, 6, 6, -1.0, 1.0, &mut r);
    check("affinity", |tp, v| tp.affinity(v[0], v[1], &spec), &[t.clone(), s.clone()]);
    for temp in [1.0, 0.5] {
        check(
            "softmax_local",
            |tp, v| {
                let raw = tp.affinity(v[0], v[1], &spec)?;
                tp.softmax_local(raw, temp)
            },
            &[t.clone(), s.clone()],
        );
    }
    check(
        "aggregate",
        |tp, v| {
            let raw = tp.affinity(v[0], v[1], &spec)?;
            let w = tp.softmax_local(raw, 1.0)?;
            tp.aggregate(v[2], w, &spec)
        },
        &[t, s.clone(), s],
    );
}

#[test]
fn psla_with_embeddings_4x6x6() {
    let mut r = rng(2);
    let emb = EmbeddingPair::init(4, 3, true, &mut r);
    let aligner = TapeAligner::new(Variant::Psla, 2).unwrap();
    let mut inputs = vec![map(4, 6, 6, -1.0, 1.0, &mut r), map(4, 6, 6, -1.0, 1.0, &mut r)];
    inputs.extend(conv_inputs(emb.f.as_ref().unwrap()));
    inputs.extend(conv_inputs(emb.g.as_ref().unwrap()));
    check(
        "psla",
        |tp, v| {
            let ev = psla_core::attention::EmbeddingVars { f: Some(conv_vars(&v[2..4], 1)), g: Some(conv_vars(&v[4..6], 1)) };
            Ok(aligner.align(tp, v[0], v[1], &ev)?.0)
        },
        &inputs,
    );
}

#[test]
fn matchtrans_away_from_the_clamp() {
    // positive features keep every affinity clear of the clamp at zero
    let mut r = rng(3);
    let aligner = TapeAligner::new(Variant::MatchTrans, 1).unwrap();
    let inputs = [map(3, 5, 5, 0.2, 1.0, &mut r), map(3, 5, 5, 0.2, 1.0, &mut r)];
    let id = psla_core::attention::EmbeddingVars { f: None, g: None };
    check("matchtrans", |tp, v| Ok(aligner.align(tp, v[0], v[1], &id)?.0), &inputs);
}

#[test]
fn nonlocal_ops() {
    let mut r = rng(4);
    let aligner = TapeAligner::new(Variant::Nonlocal, 1).unwrap();
    let inputs = [map(3, 4, 5, -1.0, 1.0, &mut r), map(3, 4, 5, -1.0, 1.0, &mut r)];
    let id = psla_core::attention::EmbeddingVars { f: None, g: None };
    check("nonlocal", |tp, v| Ok(aligner.align(tp, v[0], v[1], &id)?.0), &inputs);
    check("global_affinity", |tp, v| tp.global_affinity(v[0], v[1]), &inputs);
}

#[test]
fn elementwise_and_conv_ops() {
    let mut r = rng(5);
    let a = map(3, 4, 4, -1.0, 1.0, &mut r);
    let b = map(3, 4, 4, -1.0, 1.0, &mut r);
    let p = ConvParams::init_uniform(3, 3, 2, true, &mut r);
    let mut inputs = vec![a.clone()];
    inputs.extend(conv_inputs(&p));
    check("conv3x3", |tp, v| tp.conv(v[0], &conv_vars(&v[1..], 3)), &inputs);
    check("concat", |tp, v| tp.concat(v[0], v[1]), &[a.clone(), b.clone()]);
    check("channel_softmax", |tp, v| tp.channel_softmax(v[0]), &[a.clone()]);
    let w = map(2, 4, 4, -1.0, 1.0, &mut r);
    check(
        "fuse",
        |tp, v| {
            let w = tp.channel_softmax(v[0])?;
            tp.fuse(w, v[1], v[2])
        },
        &[w, a.clone(), b.clone()],
    );
    check("mse", |tp, v| tp.mse(v[0], v[1]), &[a.clone(), b]);
    // relu away from its kink
    let pos = map(2, 3, 3, 0.1, 1.0, &mut r);
    let neg = map(2, 3, 3, -1.0, -0.1, &mut r);
    check("relu", |tp, v| tp.relu(v[0]), &[pos]);
    check("relu_neg", |tp, v| tp.relu(v[0]), &[neg]);
}

fn fusion_inputs(net: &TwoStreamFusionNet) -> Vec<Tensor> {
    net.layers().iter().flat_map(|p| conv_inputs(p)).collect()
}

fn fusion_vars(v: &[Var]) -> psla_core::nets::FusionNetVars {
    psla_core::nets::FusionNetVars { reduce: conv_vars(&v[0..2], 1), hidden: conv_vars(&v[2..4], 3), head: conv_vars(&v[4..6], 3) }
}

fn small_fusion(c: usize, r: &mut ChaCha8Rng) -> TwoStreamFusionNet {
    let mut net = TwoStreamFusionNet::init(c, 5, 3, r);
    net.head = ConvParams::init_uniform(3, 3, 2, true, r);
    net
}

#[test]
fn update_and_quality_nets() {
    let mut r = rng(6);
    let net = small_fusion(2, &mut r);
    let mut inputs = vec![map(2, 4, 4, -1.0, 1.0, &mut r), map(2, 4, 4, -1.0, 1.0, &mut r)];
    inputs.extend(fusion_inputs(&net));
    check("update_net", |tp, v| fusion_vars(&v[2..]).weights(tp, v[0], v[1]), &inputs);
    check("quality_net", |tp, v| fusion_vars(&v[2..]).fuse(tp, v[0], v[1]), &inputs);
}

fn min_abs(f: &FeatureMap) -> f32 {
    f.data().iter().map(|v| v.abs()).fold(f32::MAX, f32::min)
}

#[test]
fn transform_net_stack() {
    // a pre-activation within one step of zero makes central differences
    // straddle the relu kink, so draw until every one is clear of it
    let (tn, x) = (7..)
        .map(|seed| {
            let mut r = rng(seed);
            let tn = TransformNet::init(3, 4, 3, 2, &mut r);
            (tn, FeatureMap::random_uniform(3, 4, 4, -1.0, 1.0, &mut r))
        })
        .find(|(tn, x)| {
            let a = conv2d(x, &tn.reduce, 0).unwrap();
            let b = conv2d(&relu(&a), &tn.mid, 1).unwrap();
            min_abs(&a).min(min_abs(&b)) > 4.0 * EPS as f32
        })
        .unwrap();
    let mut inputs = vec![x.into_tensor()];
    inputs.extend(tn.layers().iter().flat_map(|p| conv_inputs(p)));
    check(
        "transform_net",
        |tp, v| {
            let tv = psla_core::nets::TransformNetVars {
                reduce: conv_vars(&v[1..3], 1),
                mid: conv_vars(&v[3..5], 3),
                out: conv_vars(&v[5..7], 3),
                stop_gradient: false,
            };
            tv.forward(tp, v[0])
        },
        &inputs,
    );
}

#[test]
fn full_denseft_path() {
    // temporal feature update, transform, propagation and quality fusion
    let mut r = rng(8);
    let (c, h, w) = (2, 5, 5);
    let update = small_fusion(c, &mut r);
    let quality = small_fusion(c, &mut r);
    let tn = TransformNet::init(3, 3, 3, c, &mut r);
    let aligner = TapeAligner::new(Variant::Psla, 1).unwrap();
    let mut inputs = vec![
        map(c, h, w, -1.0, 1.0, &mut r),
        map(c, h, w, -1.0, 1.0, &mut r),
        map(3, h, w, -1.0, 1.0, &mut r),
    ];
    inputs.extend(fusion_inputs(&update));
    inputs.extend(fusion_inputs(&quality));
    inputs.extend(tn.layers().iter().flat_map(|p| conv_inputs(p)));
    check(
        "denseft",
        |tp, v| {
            let id = psla_core::attention::EmbeddingVars { f: None, g: None };
            let (aligned, _) = aligner.align(tp, v[1], v[0], &id)?;
            let f_t = fusion_vars(&v[3..9]).fuse(tp, aligned, v[1])?;
            let tv = psla_core::nets::TransformNetVars {
                reduce: conv_vars(&v[15..17], 1),
                mid: conv_vars(&v[17..19], 3),
                out: conv_vars(&v[19..21], 3),
                stop_gradient: false,
            };
            let enc = tv.forward(tp, v[2])?;
            let (prop, _) = aligner.align(tp, enc, f_t, &id)?;
            fusion_vars(&v[9..15]).fuse(tp, prop, enc)
        },
        &inputs,
    );
}
