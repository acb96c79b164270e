//! Seeded gradient checks of every differentiable operator and of the
//! composed update, transform and propagation paths.

use std::sync::Arc;

use psla_core::attention::{EmbeddingPair, EmbeddingVars, TapeAligner, Variant};
use psla_core::autograd::{ConvVars, Tape, Var};
use psla_core::gradcheck::grad_check;
use psla_core::neighborhood::NeighborhoodSpec;
use psla_core::nets::{FusionNetVars, TransformNet, TransformNetVars, TwoStreamFusionNet};
use psla_core::ops::ConvParams;
use psla_core::{FeatureMap, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CliError, Result};

pub const TOLERANCE: f64 = 1e-3;
pub const EPSILON: f64 = 1e-3;
/// Inputs are redrawn until every relu or clamp input is this many steps from zero.
const KINK_STEPS: f32 = 2.0;
const MAX_DRAWS: u64 = 1000;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> psla_core::Result<Var> + Sync>;
type Draw = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor> + Sync>;

pub struct Check {
    pub name: &'static str,
    draw: Draw,
    build: Build,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
    /// Index of the input draw that cleared every kink.
    pub draw: u64,
    pub pass: bool,
}

fn map(c: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> Tensor {
    FeatureMap::random_uniform(c, h, w, -1.0, 1.0, r).into_tensor()
}

fn conv_tensors(p: &ConvParams) -> Vec<Tensor> {
    let mut v = vec![p.weight_tensor()];
    v.extend(p.bias_tensor());
    v
}

fn conv_vars(v: &[Var], kernel: usize) -> ConvVars {
    ConvVars { weight: v[0], bias: Some(v[1]), kernel }
}

fn fusion_net(c: usize, reduce: usize, hidden: usize, r: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut net = TwoStreamFusionNet::init(c, reduce, hidden, r);
    // a random head so the checked gradients are not trivially zero
    net.head = ConvParams::init_uniform(3, hidden, 2, true, r);
    net.layers().iter().flat_map(|p| conv_tensors(p)).collect()
}

fn fusion_vars(v: &[Var]) -> FusionNetVars {
    FusionNetVars { reduce: conv_vars(&v[0..2], 1), hidden: conv_vars(&v[2..4], 3), head: conv_vars(&v[4..6], 3) }
}

fn transform_net(low: usize, bottleneck: usize, mid: usize, feat: usize, r: &mut ChaCha8Rng) -> Vec<Tensor> {
    TransformNet::init(low, bottleneck, mid, feat, r).layers().iter().flat_map(|p| conv_tensors(p)).collect()
}

fn transform_vars(v: &[Var]) -> TransformNetVars {
    TransformNetVars {
        reduce: conv_vars(&v[0..2], 1),
        mid: conv_vars(&v[2..4], 3),
        out: conv_vars(&v[4..6], 3),
        stop_gradient: false,
    }
}

fn embedding(c: usize, r: &mut ChaCha8Rng) -> Vec<Tensor> {
    let e = EmbeddingPair::init(c, 3, true, r);
    let mut v = conv_tensors(e.f.as_ref().expect("learned"));
    v.extend(conv_tensors(e.g.as_ref().expect("learned")));
    v
}

fn emb_vars(v: &[Var]) -> EmbeddingVars {
    EmbeddingVars { f: Some(conv_vars(&v[0..2], 1)), g: Some(conv_vars(&v[2..4], 1)) }
}

fn check(name: &'static str, draw: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + Sync + 'static, build: impl Fn(&mut Tape, &[Var]) -> psla_core::Result<Var> + Sync + 'static) -> Check {
    Check { name, draw: Box::new(draw), build: Box::new(build) }
}

fn aligner_check(name: &'static str, variant: Variant, d: usize) -> Check {
    let a = TapeAligner::new(variant, d).expect("valid d");
    check(
        name,
        |r| {
            let mut v = vec![map(4, 6, 6, r), map(4, 6, 6, r)];
            v.extend(embedding(4, r));
            v
        },
        move |t, v| Ok(a.align(t, v[0], v[1], &emb_vars(&v[2..6]))?.0),
    )
}

/// Every check in the suite. `corrupt` appends a negative control whose
/// backward is deliberately wrong.
pub fn checks(corrupt: bool) -> Vec<Check> {
    let spec = Arc::new(NeighborhoodSpec::progressive(2).expect("d = 2"));
    let (s1, s2, s3) = (spec.clone(), spec.clone(), spec);
    let mut v = vec![
        check(
            "conv1x1",
            |r| {
                let p = ConvParams::init_uniform(1, 3, 4, true, r);
                let mut v = vec![map(3, 4, 5, r)];
                v.extend(conv_tensors(&p));
                v
            },
            |t, v| t.conv(v[0], &conv_vars(&v[1..3], 1)),
        ),
        check(
            "conv3x3",
            |r| {
                let p = ConvParams::init_uniform(3, 3, 2, true, r);
                let mut v = vec![map(3, 4, 5, r)];
                v.extend(conv_tensors(&p));
                v
            },
            |t, v| t.conv(v[0], &conv_vars(&v[1..3], 3)),
        ),
        check("relu", |r| vec![map(3, 4, 4, r)], |t, v| t.relu(v[0])),
        check("concat", |r| vec![map(2, 3, 4, r), map(3, 3, 4, r)], |t, v| t.concat(v[0], v[1])),
        check("affinity", |r| vec![map(4, 6, 6, r), map(4, 6, 6, r)], move |t, v| t.affinity(v[0], v[1], &s1)),
        check(
            "softmax_local",
            |r| vec![map(4, 6, 6, r), map(4, 6, 6, r)],
            move |t, v| {
                let raw = t.affinity(v[0], v[1], &s2)?;
                t.softmax_local(raw, 1.0)
            },
        ),
        check(
            "aggregate",
            |r| vec![map(4, 6, 6, r), map(4, 6, 6, r), map(3, 6, 6, r)],
            move |t, v| {
                let raw = t.affinity(v[0], v[1], &s3)?;
                let w = t.softmax_local(raw, 1.0)?;
                t.aggregate(v[2], w, &s3)
            },
        ),
        aligner_check("psla_align", Variant::Psla, 2),
        aligner_check("dense_align", Variant::Dense, 1),
        aligner_check("matchtrans_align", Variant::MatchTrans, 1),
        check("global_affinity", |r| vec![map(3, 4, 5, r), map(3, 4, 5, r)], |t, v| t.global_affinity(v[0], v[1])),
        aligner_check("nonlocal_align", Variant::Nonlocal, 1),
        check("channel_softmax", |r| vec![map(2, 4, 4, r)], |t, v| t.channel_softmax(v[0])),
        check(
            "fuse",
            |r| vec![map(2, 4, 4, r), map(3, 4, 4, r), map(3, 4, 4, r)],
            |t, v| {
                let w = t.channel_softmax(v[0])?;
                t.fuse(w, v[1], v[2])
            },
        ),
        check("mse", |r| vec![map(2, 3, 3, r), map(2, 3, 3, r)], |t, v| t.mse(v[0], v[1])),
        check(
            "update_net",
            |r| {
                let mut v = vec![map(2, 4, 4, r), map(2, 4, 4, r)];
                v.extend(fusion_net(2, 5, 3, r));
                v
            },
            |t, v| fusion_vars(&v[2..8]).fuse(t, v[0], v[1]),
        ),
        check(
            "quality_net",
            |r| {
                let mut v = vec![map(2, 4, 4, r), map(2, 4, 4, r)];
                v.extend(fusion_net(2, 5, 3, r));
                v
            },
            |t, v| fusion_vars(&v[2..8]).weights(t, v[0], v[1]),
        ),
        check(
            "transform_net",
            |r| {
                let mut v = vec![map(3, 4, 4, r)];
                v.extend(transform_net(3, 4, 3, 2, r));
                v
            },
            |t, v| transform_vars(&v[1..7]).forward(t, v[0]),
        ),
        recursive_update(),
        dense_transform(),
    ];
    if corrupt {
        v.push(check("corrupted_square", |r| vec![map(1, 2, 3, r)], |t, v| {
            let x = t.value(v[0]).clone();
            let y = Tensor::new(x.shape.clone(), x.data.iter().map(|a| a * a).collect())?;
            let out = t.custom(
                &[v[0]],
                y,
                // the true derivative is 2x
                Box::new(|ins, _, g| {
                    vec![Tensor { shape: g.shape.clone(), data: ins[0].data.iter().zip(&g.data).map(|(x, g)| 3.0 * x * g).collect() }]
                }),
            );
            t.sum(out)
        }));
    }
    v
}

/// Temporal state aligned onto a key feature and fused with it.
fn recursive_update() -> Check {
    let a = TapeAligner::new(Variant::Psla, 1).expect("d = 1");
    check(
        "rfu_path",
        |r| {
            let mut v = vec![map(2, 5, 5, r), map(2, 5, 5, r)];
            v.extend(embedding(2, r));
            v.extend(fusion_net(2, 3, 2, r));
            v
        },
        move |t, v| {
            let (aligned, _) = a.align(t, v[1], v[0], &emb_vars(&v[2..6]))?;
            fusion_vars(&v[6..12]).fuse(t, aligned, v[1])
        },
    )
}

/// Update, transform, propagation and quality fusion on one non-key frame.
fn dense_transform() -> Check {
    let a = TapeAligner::new(Variant::Psla, 1).expect("d = 1");
    check(
        "denseft_path",
        |r| {
            let mut v = vec![map(2, 4, 4, r), map(2, 4, 4, r), map(3, 4, 4, r)];
            v.extend(embedding(2, r));
            v.extend(fusion_net(2, 3, 2, r));
            v.extend(fusion_net(2, 3, 2, r));
            v.extend(transform_net(3, 3, 2, 2, r));
            v
        },
        move |t, v| {
            let emb = emb_vars(&v[3..7]);
            let (aligned, _) = a.align(t, v[1], v[0], &emb)?;
            let f_t = fusion_vars(&v[7..13]).fuse(t, aligned, v[1])?;
            let encoded = transform_vars(&v[19..25]).forward(t, v[2])?;
            let (prop, _) = a.align(t, encoded, f_t, &emb)?;
            fusion_vars(&v[13..19]).fuse(t, prop, encoded)
        },
    )
}

fn clear_of_kinks(c: &Check, inputs: &[Tensor]) -> Result<bool> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    (c.build)(&mut tape, &vars)?;
    Ok(tape.kink_margin().is_none_or(|m| m > KINK_STEPS * EPSILON as f32))
}

pub fn run_check(c: &Check, seed: u64) -> Result<CheckRow> {
    let salt = c.name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    for draw in 0..MAX_DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_add(draw));
        let inputs = (c.draw)(&mut rng);
        if !clear_of_kinks(c, &inputs)? {
            continue;
        }
        let r = grad_check(&c.build, &inputs, EPSILON)?;
        return Ok(CheckRow {
            name: c.name.to_string(),
            max_rel_error: r.max_rel_error,
            entries: r.entries_checked,
            draw,
            pass: r.max_rel_error < TOLERANCE,
        });
    }
    Err(CliError::Config(format!("{}: no input draw cleared every kink in {MAX_DRAWS} tries", c.name)))
}

pub fn run_suite(seed: u64, corrupt: bool) -> Result<Vec<CheckRow>> {
    checks(corrupt).iter().map(|c| run_check(c, seed)).collect()
}

pub fn format_table(rows: &[CheckRow]) -> String {
    let mut s = format!("{:<18} {:>12} {:>8} {:>5}  result\n", "check", "max_rel_err", "entries", "draw");
    for r in rows {
        s += &format!(
            "{:<18} {:>12.3e} {:>8} {:>5}  {}\n",
            r.name,
            r.max_rel_error,
            r.entries,
            r.draw,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    s
}
