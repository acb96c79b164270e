use rayon::prelude::*;

use super::EmbeddingPair;
use crate::error::{config_err, Result};
use crate::neighborhood::{NeighborhoodSpec, Offset, ValidityMask};
use crate::ops::{softmax_masked_backward_into, softmax_masked_into};
use crate::tensor::{FeatureMap, Tensor};

/// Per-location affinities and weights over a neighborhood, laid out
/// `(H, W, K)` with `K` innermost.
///
/// Invalid (out-of-map) entries hold `0.0` in `raw`; they are excluded by
/// `mask`, never by a stored infinity.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub raw: Vec<f32>,
    pub normalized: Option<Vec<f32>>,
    pub mask: ValidityMask,
}

impl AttentionWeights {
    pub fn raw_at(&self, y: usize, x: usize) -> &[f32] {
        let b = (y * self.width + x) * self.k;
        &self.raw[b..b + self.k]
    }

    pub fn normalized_at(&self, y: usize, x: usize) -> &[f32] {
        let b = (y * self.width + x) * self.k;
        &self.normalized.as_ref().expect("weights not normalized")[b..b + self.k]
    }

    /// Offset with the largest normalized weight per location; ties go to
    /// the lowest index (the centre comes first).
    pub fn argmax_offsets(&self, spec: &NeighborhoodSpec) -> Vec<Offset> {
        let w = self.normalized.as_ref().expect("weights not normalized");
        w.chunks(self.k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                spec.offsets[best]
            })
            .collect()
    }

    /// The normalized plane as an `(H, W, K)` tensor.
    pub fn normalized_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.height, self.width, self.k],
            data: self.normalized.clone().expect("weights not normalized"),
        }
    }
}

#[inline]
fn shifted(y: usize, x: usize, (dy, dx): Offset, h: usize, w: usize) -> Option<usize> {
    let sy = y as isize + dy as isize;
    let sx = x as isize + dx as isize;
    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
        None
    } else {
        Some(sy as usize * w + sx as usize)
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Inner products between each target cell and the source cells at every
/// neighborhood offset.
pub fn compute_affinities(
    target_emb: &FeatureMap,
    source_emb: &FeatureMap,
    spec: &NeighborhoodSpec,
) -> Result<AttentionWeights> {
    if !target_emb.same_dims(source_emb) {
        return Err(config_err(format!(
            "affinity inputs differ: {:?} vs {:?}",
            target_emb.dims(),
            source_emb.dims()
        )));
    }
    let (c, h, w) = target_emb.dims();
    let k = spec.len();
    let mask = spec.make_mask(h, w);
    let t = target_emb.to_hwc();
    let s = source_emb.to_hwc();
    let mut raw = vec![0.0f32; h * w * k];
    raw.par_chunks_mut(w * k).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let tc = &t[(y * w + x) * c..(y * w + x + 1) * c];
            let out = &mut row[x * k..(x + 1) * k];
            for (o, &off) in out.iter_mut().zip(&spec.offsets) {
                if let Some(q) = shifted(y, x, off, h, w) {
                    *o = dot(tc, &s[q * c..(q + 1) * c]);
                }
            }
        }
    });
    Ok(AttentionWeights { height: h, width: w, k, raw, normalized: None, mask })
}

/// Gradients of [`compute_affinities`] w.r.t. both embedded maps.
pub fn compute_affinities_backward(
    target_emb: &FeatureMap,
    source_emb: &FeatureMap,
    spec: &NeighborhoodSpec,
    grad_raw: &[f32],
) -> (FeatureMap, FeatureMap) {
    let (c, h, w) = target_emb.dims();
    let k = spec.len();
    let t = target_emb.to_hwc();
    let s = source_emb.to_hwc();

    let mut dt = vec![0.0f32; h * w * c];
    dt.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let g = &grad_raw[(y * w + x) * k..(y * w + x + 1) * k];
            let out = &mut row[x * c..(x + 1) * c];
            for (&gk, &off) in g.iter().zip(&spec.offsets) {
                if let Some(q) = shifted(y, x, off, h, w) {
                    axpy(gk, &s[q * c..(q + 1) * c], out);
                }
            }
        }
    });

    // source cell q received from target p = q - off
    let mut ds = vec![0.0f32; h * w * c];
    ds.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let out = &mut row[x * c..(x + 1) * c];
            for (ki, &(dy, dx)) in spec.offsets.iter().enumerate() {
                if let Some(p) = shifted(y, x, (-dy, -dx), h, w) {
                    axpy(grad_raw[p * k + ki], &t[p * c..(p + 1) * c], out);
                }
            }
        }
    });
    (FeatureMap::from_hwc(c, h, w, &dt), FeatureMap::from_hwc(c, h, w, &ds))
}

/// Masked softmax over the offset axis at every location.
pub fn normalize_psla(weights: AttentionWeights) -> AttentionWeights {
    normalize_psla_with_temperature(weights, 1.0)
}

/// Softmax of `raw / temperature`. A temperature of 1 is the plain softmax.
pub fn normalize_psla_with_temperature(mut weights: AttentionWeights, temperature: f32) -> AttentionWeights {
    let k = weights.k;
    let scale = 1.0 / temperature;
    let mut out = vec![0.0f32; weights.raw.len()];
    out.par_chunks_mut(k)
        .zip(weights.raw.par_chunks(k))
        .zip(weights.mask.valid.par_chunks(k))
        .for_each(|((o, r), m)| {
            // the centre offset is always valid, so this cannot fail
            let ok = softmax_masked_into(r, m, scale, o);
            debug_assert!(ok);
        });
    weights.normalized = Some(out);
    weights
}

/// Gradient of the per-location softmax w.r.t. the raw affinities.
pub fn softmax_k_backward(normalized: &[f32], grad: &[f32], k: usize, scale: f32) -> Vec<f32> {
    let mut out = vec![0.0f32; normalized.len()];
    out.par_chunks_mut(k)
        .zip(normalized.par_chunks(k))
        .zip(grad.par_chunks(k))
        .for_each(|((o, y), g)| softmax_masked_backward_into(y, g, scale, o));
    out
}

/// Sum-normalized positive affinities ("MatchTrans-style"). Affinities are
/// clamped at zero; a location whose clamped affinities are all zero puts
/// all of its weight on the centre offset.
pub fn normalize_matchtrans(mut weights: AttentionWeights) -> AttentionWeights {
    let k = weights.k;
    let mut out = vec![0.0f32; weights.raw.len()];
    out.par_chunks_mut(k)
        .zip(weights.raw.par_chunks(k))
        .zip(weights.mask.valid.par_chunks(k))
        .for_each(|((o, r), m)| {
            let sum: f64 = r.iter().zip(m).filter(|(_, &v)| v).map(|(&a, _)| a.max(0.0) as f64).sum();
            if sum > 0.0 {
                let inv = (1.0 / sum) as f32;
                for ((oi, &ri), &mi) in o.iter_mut().zip(r).zip(m) {
                    *oi = if mi { ri.max(0.0) * inv } else { 0.0 };
                }
            } else {
                o.fill(0.0);
                o[0] = 1.0;
            }
        });
    weights.normalized = Some(out);
    weights
}

/// Gradient of [`normalize_matchtrans`] w.r.t. the raw affinities. The
/// centre fallback is locally constant and passes no gradient.
pub fn matchtrans_backward(raw: &[f32], mask: &[bool], normalized: &[f32], grad: &[f32], k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; raw.len()];
    out.par_chunks_mut(k)
        .zip(raw.par_chunks(k))
        .zip(mask.par_chunks(k))
        .zip(normalized.par_chunks(k).zip(grad.par_chunks(k)))
        .for_each(|(((o, r), m), (y, g))| {
            let sum: f64 = r.iter().zip(m).filter(|(_, &v)| v).map(|(&a, _)| a.max(0.0) as f64).sum();
            if sum <= 0.0 {
                return;
            }
            let dotyg: f32 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            let inv = (1.0 / sum) as f32;
            for i in 0..o.len() {
                if m[i] && r[i] > 0.0 {
                    o[i] = (g[i] - dotyg) * inv;
                }
            }
        });
    out
}

/// Weighted gather of source cells: `out[:, p] = sum_k w[p, k] * source[:, p + off_k]`.
pub fn aggregate(source: &FeatureMap, weights: &AttentionWeights, spec: &NeighborhoodSpec) -> Result<FeatureMap> {
    let (c, h, w) = source.dims();
    if (h, w) != (weights.height, weights.width) || weights.k != spec.len() {
        return Err(config_err(format!(
            "source {h}x{w} does not match weights {}x{}x{}",
            weights.height, weights.width, weights.k
        )));
    }
    let wn = weights
        .normalized
        .as_ref()
        .ok_or_else(|| crate::Error::Usage("aggregate needs normalized weights".into()))?;
    let k = weights.k;
    let s = source.to_hwc();
    let mut out = vec![0.0f32; h * w * c];
    out.par_chunks_mut((w * c).max(1)).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let wk = &wn[(y * w + x) * k..(y * w + x + 1) * k];
            let dst = &mut row[x * c..(x + 1) * c];
            for (&a, &off) in wk.iter().zip(&spec.offsets) {
                if a == 0.0 {
                    continue;
                }
                if let Some(q) = shifted(y, x, off, h, w) {
                    axpy(a, &s[q * c..(q + 1) * c], dst);
                }
            }
        }
    });
    Ok(FeatureMap::from_hwc(c, h, w, &out))
}

/// Gradients of [`aggregate`]: `(d_source, d_normalized)`.
pub fn aggregate_backward(
    source: &FeatureMap,
    normalized: &[f32],
    spec: &NeighborhoodSpec,
    grad_out: &FeatureMap,
) -> (FeatureMap, Vec<f32>) {
    let (c, h, w) = source.dims();
    let k = spec.len();
    let s = source.to_hwc();
    let g = grad_out.to_hwc();

    let mut dw = vec![0.0f32; h * w * k];
    dw.par_chunks_mut(w * k).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let gp = &g[(y * w + x) * c..(y * w + x + 1) * c];
            for (ki, &off) in spec.offsets.iter().enumerate() {
                if let Some(q) = shifted(y, x, off, h, w) {
                    row[x * k + ki] = dot(gp, &s[q * c..(q + 1) * c]);
                }
            }
        }
    });

    let mut ds = vec![0.0f32; h * w * c];
    ds.par_chunks_mut((w * c).max(1)).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let dst = &mut row[x * c..(x + 1) * c];
            for (ki, &(dy, dx)) in spec.offsets.iter().enumerate() {
                if let Some(p) = shifted(y, x, (-dy, -dx), h, w) {
                    axpy(normalized[p * k + ki], &g[p * c..(p + 1) * c], dst);
                }
            }
        }
    });
    (FeatureMap::from_hwc(c, h, w, &ds), dw)
}

/// Embed, match, softmax-normalize and gather: aligns `source` onto `target`.
pub fn psla_align(
    target: &FeatureMap,
    source: &FeatureMap,
    emb: &EmbeddingPair,
    spec: &NeighborhoodSpec,
) -> Result<(FeatureMap, AttentionWeights)> {
    psla_align_with(target, source, emb, spec, 1.0)
}

pub fn psla_align_with(
    target: &FeatureMap,
    source: &FeatureMap,
    emb: &EmbeddingPair,
    spec: &NeighborhoodSpec,
    temperature: f32,
) -> Result<(FeatureMap, AttentionWeights)> {
    if !target.same_dims(source) {
        return Err(config_err(format!(
            "alignment inputs differ: {:?} vs {:?}",
            target.dims(),
            source.dims()
        )));
    }
    let t = emb.embed_target(target)?;
    let s = emb.embed_source(source)?;
    let weights = normalize_psla_with_temperature(compute_affinities(&t, &s, spec)?, temperature);
    let out = aggregate(source, &weights, spec)?;
    Ok((out, weights))
}
