//! Reference alignment for small maps: plain loops in `f64`, sharing no code
//! with the optimized kernels. Used as a test oracle.

use super::EmbeddingPair;
use crate::neighborhood::Offset;
use crate::ops::ConvParams;
use crate::tensor::FeatureMap;

/// Which source positions each target cell is compared with.
#[derive(Clone, Debug)]
pub enum PositionSet {
    /// Relative displacements; those falling outside the map are skipped.
    Offsets(Vec<Offset>),
    /// Every position of the source map.
    All,
}

fn embed(map: &FeatureMap, p: Option<&ConvParams>) -> Vec<Vec<Vec<f64>>> {
    let (c, h, w) = map.dims();
    let mut out = Vec::with_capacity(h);
    for y in 0..h {
        let mut row = Vec::with_capacity(w);
        for x in 0..w {
            let cell: Vec<f64> = match p {
                None => (0..c).map(|ch| map.get(ch, y, x) as f64).collect(),
                Some(p) => (0..p.out_channels)
                    .map(|o| {
                        let mut acc = p.bias.as_ref().map_or(0.0, |b| b[o] as f64);
                        for i in 0..c {
                            acc += p.weights[o * p.in_channels + i] as f64 * map.get(i, y, x) as f64;
                        }
                        acc
                    })
                    .collect(),
            };
            row.push(cell);
        }
        out.push(row);
    }
    out
}

/// Affinity, softmax and weighted gather, spelled out position by position.
/// Intended for maps up to 16x16.
pub fn brute_force_align(
    target: &FeatureMap,
    source: &FeatureMap,
    emb: &EmbeddingPair,
    positions: &PositionSet,
) -> FeatureMap {
    let (c, h, w) = source.dims();
    assert!(h <= 16 && w <= 16, "oracle is meant for small maps");
    let te = embed(target, emb.g.as_ref());
    let se = embed(source, emb.f.as_ref());
    let mut out = FeatureMap::zeros(c, h, w);
    for y in 0..h {
        for x in 0..w {
            let mut cands: Vec<(usize, usize)> = Vec::new();
            match positions {
                PositionSet::All => {
                    for sy in 0..h {
                        for sx in 0..w {
                            cands.push((sy, sx));
                        }
                    }
                }
                PositionSet::Offsets(offs) => {
                    for &(dy, dx) in offs {
                        let sy = y as i64 + dy as i64;
                        let sx = x as i64 + dx as i64;
                        if sy >= 0 && sx >= 0 && sy < h as i64 && sx < w as i64 {
                            cands.push((sy as usize, sx as usize));
                        }
                    }
                }
            }
            let scores: Vec<f64> = cands
                .iter()
                .map(|&(sy, sx)| te[y][x].iter().zip(&se[sy][sx]).map(|(a, b)| a * b).sum())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for ch in 0..c {
                let mut acc = 0.0f64;
                for (&(sy, sx), e) in cands.iter().zip(&exps) {
                    acc += e / z * source.get(ch, sy, sx) as f64;
                }
                out.set(ch, y, x, acc as f32);
            }
        }
    }
    out
}
