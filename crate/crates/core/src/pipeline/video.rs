//! Synthetic feature streams with known motion.
//!
//! Frame 0 holds an i.i.d. texture plus a Gaussian blob in a channel of its
//! own (the last one; with a single channel it is added to the texture).
//! Every later frame
//! is frame 0 translated by a cumulative integer displacement (edges are
//! replicated), with independent noise added per frame. The blob heatmap
//! is the regression target of the toy task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::VideoParams;
use crate::error::{config_err, Result};
use crate::neighborhood::Offset;
use crate::tensor::FeatureMap;

/// Zero-mean uniform sample with standard deviation `std`.
fn centered<R: Rng>(rng: &mut R, std: f32) -> f32 {
    if std == 0.0 {
        return 0.0;
    }
    let a = std * 3f32.sqrt();
    rng.gen_range(-a..a)
}

/// Content moves by `shift`: `out(y, x) = map(y - dy, x - dx)`, clamped to the edge.
pub fn translate(map: &FeatureMap, shift: Offset) -> FeatureMap {
    let (c, h, w) = map.dims();
    FeatureMap::from_fn(c, h, w, |ch, y, x| {
        let sy = (y as i32 - shift.0).clamp(0, h as i32 - 1) as usize;
        let sx = (x as i32 - shift.1).clamp(0, w as i32 - 1) as usize;
        map.get(ch, sy, sx)
    })
}

#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub seed: u64,
    /// Cumulative displacement of every frame relative to frame 0.
    pub displacements: Vec<Offset>,
    pub high: Vec<FeatureMap>,
    pub low: Vec<FeatureMap>,
    pub heatmaps: Vec<FeatureMap>,
}

/// Shape of the generated features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VideoDims {
    pub low_channels: usize,
    pub feat_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl SyntheticVideo {
    /// Random-walk motion bounded by `params.max_displacement`.
    pub fn generate(seed: u64, frames: usize, dims: VideoDims, params: &VideoParams) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000);
        let bound = params.max_displacement as i32;
        let mut disp = Vec::with_capacity(frames);
        let mut cur = (0i32, 0i32);
        for t in 0..frames {
            if t > 0 {
                for axis in [&mut cur.0, &mut cur.1] {
                    if rng.gen::<f32>() < params.motion_prob {
                        let step = if rng.gen::<bool>() { 1 } else { -1 };
                        // reflect at the bound
                        *axis = if (*axis + step).abs() > bound { *axis - step } else { *axis + step };
                        *axis = (*axis).clamp(-bound, bound);
                    }
                }
            }
            disp.push(cur);
        }
        Self::with_displacements(seed, disp, dims, params)
    }

    /// Video following an explicit displacement sequence.
    pub fn with_displacements(seed: u64, displacements: Vec<Offset>, dims: VideoDims, params: &VideoParams) -> Result<Self> {
        let VideoDims { low_channels, feat_channels, height, width } = dims;
        if displacements.is_empty() || height == 0 || width == 0 || low_channels == 0 || feat_channels == 0 {
            return Err(config_err("synthetic video needs frames, channels and spatial extent"));
        }
        if params.low_copies_high && low_channels != feat_channels {
            return Err(config_err("low_copies_high needs equal channel counts"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let texture = FeatureMap::from_fn(feat_channels, height, width, |_, _, _| centered(&mut rng, params.texture_scale));
        // blob centre away from the border so it stays visible under motion
        let margin = |n: usize| (n as f32 * 0.25).floor();
        let cy = rng.gen_range(margin(height)..=(height as f32 - 1.0 - margin(height)).max(margin(height)));
        let cx = rng.gen_range(margin(width)..=(width as f32 - 1.0 - margin(width)).max(margin(width)));

        let two_s2 = 2.0 * params.blob_sigma * params.blob_sigma;
        let mut high = Vec::with_capacity(displacements.len());
        let mut low = Vec::with_capacity(displacements.len());
        let mut heatmaps = Vec::with_capacity(displacements.len());
        for &(dy, dx) in &displacements {
            let (by, bx) = (cy + dy as f32, cx + dx as f32);
            let heat = FeatureMap::from_fn(1, height, width, |_, y, x| {
                let r2 = (y as f32 - by).powi(2) + (x as f32 - bx).powi(2);
                if two_s2 > 0.0 {
                    (-r2 / two_s2).exp()
                } else {
                    0.0
                }
            });
            let moved = translate(&texture, (dy, dx));
            let last = feat_channels - 1;
            let h = FeatureMap::from_fn(feat_channels, height, width, |c, y, x| {
                let base = if c == last && c > 0 { 0.0 } else { moved.get(c, y, x) };
                let blob = if c == last { params.blob_gain * heat.get(0, y, x) } else { 0.0 };
                base + blob + centered(&mut rng, params.high_noise)
            });
            let l = if params.low_copies_high {
                h.clone()
            } else {
                let last = low_channels - 1;
                let textures = (feat_channels - 1).max(1);
                FeatureMap::from_fn(low_channels, height, width, |c, y, x| {
                    let base = if c == last && c > 0 { 0.0 } else { moved.get(c % textures, y, x) };
                    let blob = if c == last { params.low_blob_gain * heat.get(0, y, x) } else { 0.0 };
                    base + blob + centered(&mut rng, params.low_noise)
                })
            };
            high.push(h);
            low.push(l);
            heatmaps.push(heat);
        }
        Ok(Self { seed, displacements, high, low, heatmaps })
    }

    pub fn len(&self) -> usize {
        self.high.len()
    }

    pub fn is_empty(&self) -> bool {
        self.high.is_empty()
    }

    pub fn dims(&self) -> VideoDims {
        let (f, h, w) = self.high[0].dims();
        VideoDims { low_channels: self.low[0].channels(), feat_channels: f, height: h, width: w }
    }

    /// Offset from a cell of `target` to the cell of `source` showing the same content.
    pub fn gt_offset(&self, target: usize, source: usize) -> Offset {
        let (t, s) = (self.displacements[target], self.displacements[source]);
        (s.0 - t.0, s.1 - t.1)
    }
}

/// Cells at least `band` away from every border.
pub fn interior(height: usize, width: usize, band: usize) -> impl Iterator<Item = (usize, usize)> {
    let ys = band..height.saturating_sub(band);
    ys.flat_map(move |y| (band..width.saturating_sub(band)).map(move |x| (y, x)))
}

/// Fraction of interior cells whose argmax offset equals `truth`; `None`
/// if there is no interior.
pub fn correspondence_accuracy(argmax: &[Offset], height: usize, width: usize, band: usize, truth: Offset) -> Option<f64> {
    let mut n = 0usize;
    let mut hit = 0usize;
    for (y, x) in interior(height, width, band) {
        n += 1;
        if argmax[y * width + x] == truth {
            hit += 1;
        }
    }
    (n > 0).then(|| hit as f64 / n as f64)
}
