use rayon::prelude::*;

use super::EmbeddingPair;
use crate::error::{config_err, Result};
use crate::neighborhood::Offset;
use crate::ops::{softmax_masked_backward_into, softmax_masked_into};
use crate::tensor::FeatureMap;

/// Dense `(H*W) x (H*W)` attention matrix; row `p` holds the weights that
/// target cell `p` puts on every source cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalWeights {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl GlobalWeights {
    pub fn row(&self, p: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[p * n..(p + 1) * n]
    }

    pub fn argmax_offsets(&self) -> Vec<Offset> {
        let n = self.height * self.width;
        (0..n)
            .map(|p| {
                let row = self.row(p);
                // prefer the cell itself on ties, then the lowest index
                let mut best = p;
                for (q, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = q;
                    }
                }
                let (py, px) = ((p / self.width) as i32, (p % self.width) as i32);
                let (qy, qx) = ((best / self.width) as i32, (best % self.width) as i32);
                (qy - py, qx - px)
            })
            .collect()
    }
}

/// `A[p, q] = <target[:, p], source[:, q]>` for every pair of positions.
pub fn global_affinities(target_emb: &FeatureMap, source_emb: &FeatureMap) -> Result<Vec<f32>> {
    if !target_emb.same_dims(source_emb) {
        return Err(config_err(format!(
            "affinity inputs differ: {:?} vs {:?}",
            target_emb.dims(),
            source_emb.dims()
        )));
    }
    let c = target_emb.channels();
    let n = target_emb.plane();
    let t = target_emb.to_hwc();
    let s = source_emb.to_hwc();
    let mut a = vec![0.0f32; n * n];
    a.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        let tp = &t[p * c..(p + 1) * c];
        for (q, o) in row.iter_mut().enumerate() {
            *o = tp.iter().zip(&s[q * c..(q + 1) * c]).map(|(a, b)| a * b).sum();
        }
    });
    Ok(a)
}

pub fn global_affinities_backward(
    target_emb: &FeatureMap,
    source_emb: &FeatureMap,
    grad: &[f32],
) -> (FeatureMap, FeatureMap) {
    let (c, h, w) = target_emb.dims();
    let n = h * w;
    let t = target_emb.to_hwc();
    let s = source_emb.to_hwc();
    let mut dt = vec![0.0f32; n * c];
    dt.par_chunks_mut(c.max(1)).enumerate().for_each(|(p, out)| {
        for q in 0..n {
            let g = grad[p * n + q];
            for (o, v) in out.iter_mut().zip(&s[q * c..(q + 1) * c]) {
                *o += g * v;
            }
        }
    });
    let mut ds = vec![0.0f32; n * c];
    ds.par_chunks_mut(c.max(1)).enumerate().for_each(|(q, out)| {
        for p in 0..n {
            let g = grad[p * n + q];
            for (o, v) in out.iter_mut().zip(&t[p * c..(p + 1) * c]) {
                *o += g * v;
            }
        }
    });
    (FeatureMap::from_hwc(c, h, w, &dt), FeatureMap::from_hwc(c, h, w, &ds))
}

/// Row-wise softmax of an `n x n` matrix.
pub fn softmax_rows(a: &[f32], n: usize) -> Vec<f32> {
    let mask = vec![true; n];
    let mut out = vec![0.0f32; a.len()];
    out.par_chunks_mut(n).zip(a.par_chunks(n)).for_each(|(o, r)| {
        softmax_masked_into(r, &mask, 1.0, o);
    });
    out
}

pub fn softmax_rows_backward(y: &[f32], grad: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; y.len()];
    out.par_chunks_mut(n)
        .zip(y.par_chunks(n))
        .zip(grad.par_chunks(n))
        .for_each(|((o, yr), gr)| softmax_masked_backward_into(yr, gr, 1.0, o));
    out
}

/// `out[:, p] = sum_q W[p, q] * source[:, q]`.
pub fn global_aggregate(source: &FeatureMap, weights: &[f32]) -> FeatureMap {
    let (c, h, w) = source.dims();
    let n = h * w;
    let s = source.to_hwc();
    let mut out = vec![0.0f32; n * c];
    out.par_chunks_mut(c.max(1)).enumerate().for_each(|(p, dst)| {
        for q in 0..n {
            let a = weights[p * n + q];
            for (d, v) in dst.iter_mut().zip(&s[q * c..(q + 1) * c]) {
                *d += a * v;
            }
        }
    });
    FeatureMap::from_hwc(c, h, w, &out)
}

/// Gradients of [`global_aggregate`]: `(d_source, d_weights)`.
pub fn global_aggregate_backward(source: &FeatureMap, weights: &[f32], grad_out: &FeatureMap) -> (FeatureMap, Vec<f32>) {
    let (c, h, w) = source.dims();
    let n = h * w;
    let s = source.to_hwc();
    let g = grad_out.to_hwc();
    let mut dw = vec![0.0f32; n * n];
    dw.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        let gp = &g[p * c..(p + 1) * c];
        for (q, o) in row.iter_mut().enumerate() {
            *o = gp.iter().zip(&s[q * c..(q + 1) * c]).map(|(a, b)| a * b).sum();
        }
    });
    let mut ds = vec![0.0f32; n * c];
    ds.par_chunks_mut(c.max(1)).enumerate().for_each(|(q, dst)| {
        for p in 0..n {
            let a = weights[p * n + q];
            for (d, v) in dst.iter_mut().zip(&g[p * c..(p + 1) * c]) {
                *d += a * v;
            }
        }
    });
    (FeatureMap::from_hwc(c, h, w, &ds), dw)
}

/// Softmax attention of every target cell over every source cell
/// (embedded dot-product form).
pub fn nonlocal_align(target: &FeatureMap, source: &FeatureMap, emb: &EmbeddingPair) -> Result<(FeatureMap, GlobalWeights)> {
    if !target.same_dims(source) {
        return Err(config_err(format!(
            "alignment inputs differ: {:?} vs {:?}",
            target.dims(),
            source.dims()
        )));
    }
    let t = emb.embed_target(target)?;
    let s = emb.embed_source(source)?;
    let n = target.plane();
    let w = softmax_rows(&global_affinities(&t, &s)?, n);
    let out = global_aggregate(source, &w);
    Ok((out, GlobalWeights { height: target.height(), width: target.width(), data: w }))
}
