//! Offset sets that say which source cells each target cell attends to.
//!
//! The progressive sparse set is the centre plus, for each stride
//! `s = 1..=d`, the eight cells of the axis-aligned ring `{-s, 0, s}^2`.
//! Enumeration order is frozen: ascending stride, and within a stride a
//! row-major scan over `{-s, 0, s}^2` with the centre skipped. Weight tensors
//! index their innermost axis in this order.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `(dy, dx)` displacement from the target cell to a source cell.
pub type Offset = (i32, i32);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodSpec {
    /// Maximum displacement along either axis.
    pub d: usize,
    pub offsets: Vec<Offset>,
    /// Ring label per offset: `max(|dy|, |dx|)`, zero for the centre.
    pub strides: Vec<usize>,
}

impl NeighborhoodSpec {
    /// Centre plus the 8-cell ring at every stride in `1..=d`.
    pub fn progressive(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidInput(
                "max displacement must be at least 1; use identity alignment for d = 0".into(),
            ));
        }
        Self::with_strides(&(1..=d).collect::<Vec<_>>())
    }

    /// Centre plus one 8-cell ring per listed stride. Strides must be
    /// positive and strictly increasing.
    pub fn with_strides(strides: &[usize]) -> Result<Self> {
        if strides.is_empty() || strides[0] == 0 {
            return Err(Error::InvalidInput("strides must be a non-empty list of positive integers".into()));
        }
        if strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(format!("strides must strictly increase: {strides:?}")));
        }
        let mut offsets = vec![(0, 0)];
        let mut labels = vec![0];
        for &s in strides {
            let s = s as i32;
            for a in [-s, 0, s] {
                for b in [-s, 0, s] {
                    if (a, b) != (0, 0) {
                        offsets.push((a, b));
                        labels.push(s as usize);
                    }
                }
            }
        }
        Ok(Self { d: *strides.last().unwrap(), offsets, strides: labels })
    }

    /// Every offset of the `(2d+1)^2` window, row-major, with the centre moved
    /// to the front.
    pub fn dense(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidInput(
                "max displacement must be at least 1; use identity alignment for d = 0".into(),
            ));
        }
        let r = d as i32;
        let mut offsets = vec![(0, 0)];
        let mut labels = vec![0];
        for a in -r..=r {
            for b in -r..=r {
                if (a, b) != (0, 0) {
                    offsets.push((a, b));
                    labels.push(a.unsigned_abs().max(b.unsigned_abs()) as usize);
                }
            }
        }
        Ok(Self { d, offsets, strides: labels })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offset_set(&self) -> HashSet<Offset> {
        self.offsets.iter().copied().collect()
    }

    pub fn index_of(&self, off: Offset) -> Option<usize> {
        self.offsets.iter().position(|&o| o == off)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn make_mask(&self, height: usize, width: usize) -> ValidityMask {
        ValidityMask::new(self, height, width)
    }
}

/// Which offsets land inside the map, per location. Layout `(H, W, K)` with
/// `K` innermost.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub valid: Vec<bool>,
}

impl ValidityMask {
    pub fn new(spec: &NeighborhoodSpec, height: usize, width: usize) -> Self {
        let k = spec.len();
        let mut valid = Vec::with_capacity(height * width * k);
        for y in 0..height as i32 {
            for x in 0..width as i32 {
                for &(dy, dx) in &spec.offsets {
                    let (sy, sx) = (y + dy, x + dx);
                    valid.push(sy >= 0 && sx >= 0 && sy < height as i32 && sx < width as i32);
                }
            }
        }
        Self { height, width, k, valid }
    }

    pub fn at(&self, y: usize, x: usize) -> &[bool] {
        let base = (y * self.width + x) * self.k;
        &self.valid[base..base + self.k]
    }

    pub fn count_valid(&self, y: usize, x: usize) -> usize {
        self.at(y, x).iter().filter(|&&v| v).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ring(s: i32) -> HashSet<Offset> {
        let mut out = HashSet::new();
        for a in [-s, 0, s] {
            for b in [-s, 0, s] {
                if (a, b) != (0, 0) {
                    out.insert((a, b));
                }
            }
        }
        out
    }

    #[test]
    fn d1_is_the_3x3_window() {
        let p = NeighborhoodSpec::progressive(1).unwrap();
        assert_eq!(p.len(), 9);
        assert_eq!(p.offsets[0], (0, 0));
        let mut all: HashSet<Offset> = HashSet::new();
        for a in -1..=1 {
            for b in -1..=1 {
                all.insert((a, b));
            }
        }
        assert_eq!(p.offset_set(), all);
        let dense = NeighborhoodSpec::dense(1).unwrap();
        assert_eq!(p.offsets, dense.offsets, "d = 1 enumerations coincide exactly");
    }

    #[test]
    fn d2_stride2_subset() {
        let p = NeighborhoodSpec::progressive(2).unwrap();
        assert_eq!(p.len(), 17);
        let s2: Vec<Offset> = p
            .offsets
            .iter()
            .zip(&p.strides)
            .filter(|(_, &s)| s == 2)
            .map(|(o, _)| *o)
            .collect();
        assert_eq!(s2, vec![(-2, -2), (-2, 0), (-2, 2), (0, -2), (0, 2), (2, -2), (2, 0), (2, 2)]);
    }

    #[test]
    fn counts_at_d4() {
        assert_eq!(NeighborhoodSpec::progressive(4).unwrap().len(), 33);
        assert_eq!(NeighborhoodSpec::dense(4).unwrap().len(), 81);
        assert_eq!(NeighborhoodSpec::dense(2).unwrap().len(), 25);
    }

    #[test]
    fn d0_rejected() {
        assert!(matches!(NeighborhoodSpec::progressive(0), Err(Error::InvalidInput(_))));
        assert!(matches!(NeighborhoodSpec::dense(0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn custom_strides() {
        let s = NeighborhoodSpec::with_strides(&[1, 3]).unwrap();
        assert_eq!(s.len(), 17);
        assert_eq!(s.d, 3);
        assert!(s.index_of((0, 2)).is_none());
        assert!(s.index_of((3, -3)).is_some());
        assert!(NeighborhoodSpec::with_strides(&[2, 1]).is_err());
        assert!(NeighborhoodSpec::with_strides(&[]).is_err());
    }

    #[test]
    fn corner_mask_d1() {
        let spec = NeighborhoodSpec::progressive(1).unwrap();
        let m = spec.make_mask(5, 5);
        let valid: HashSet<Offset> = spec
            .offsets
            .iter()
            .zip(m.at(0, 0))
            .filter(|(_, &v)| v)
            .map(|(o, _)| *o)
            .collect();
        assert_eq!(valid, [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().collect());
    }

    #[test]
    fn single_cell_map_only_centre() {
        for d in 1..6 {
            let spec = NeighborhoodSpec::progressive(d).unwrap();
            let m = spec.make_mask(1, 1);
            assert!(m.at(0, 0)[0]);
            assert_eq!(m.count_valid(0, 0), 1);
        }
    }

    #[test]
    fn interior_all_valid() {
        let spec = NeighborhoodSpec::progressive(2).unwrap();
        let m = spec.make_mask(7, 8);
        for y in 2..5 {
            for x in 2..6 {
                assert_eq!(m.count_valid(y, x), 17);
            }
        }
    }

    #[test]
    fn json_shape() {
        let v: serde_json::Value =
            serde_json::from_str(&NeighborhoodSpec::progressive(1).unwrap().to_json()).unwrap();
        assert_eq!(v["d"], 1);
        assert_eq!(v["offsets"][0], serde_json::json!([0, 0]));
        assert_eq!(v["offsets"][1], serde_json::json!([-1, -1]));
        assert_eq!(v["strides"].as_array().unwrap().len(), 9);
    }

    proptest! {
        #[test]
        fn progressive_laws(d in 1usize..=16) {
            let p = NeighborhoodSpec::progressive(d).unwrap();
            prop_assert_eq!(p.len(), 1 + 8 * d);
            prop_assert_eq!(p.offset_set().len(), p.len());
            prop_assert_eq!(p.offsets[0], (0, 0));
            let dense = NeighborhoodSpec::dense(d).unwrap().offset_set();
            prop_assert!(p.offset_set().is_subset(&dense));
            for (&(a, b), &s) in p.offsets.iter().zip(&p.strides).skip(1) {
                let s = s as i32;
                prop_assert!([-s, 0, s].contains(&a) && [-s, 0, s].contains(&b));
                prop_assert_eq!(a.abs().max(b.abs()), s);
                prop_assert!(ring(s).contains(&(a, b)));
            }
            for &(a, b) in &p.offsets {
                prop_assert!(p.offset_set().contains(&(-a, -b)));
            }
        }

        #[test]
        fn dense_symmetric(d in 1usize..=8) {
            let s = NeighborhoodSpec::dense(d).unwrap();
            prop_assert_eq!(s.len(), (2 * d + 1) * (2 * d + 1));
            let set = s.offset_set();
            for &(a, b) in &s.offsets {
                prop_assert!(set.contains(&(-a, -b)));
            }
        }

        #[test]
        fn mask_matches_bounds(h in 1usize..=9, w in 1usize..=9, d in 1usize..=4, dense in any::<bool>()) {
            let spec = if dense { NeighborhoodSpec::dense(d) } else { NeighborhoodSpec::progressive(d) }.unwrap();
            let m = spec.make_mask(h, w);
            for y in 0..h {
                for x in 0..w {
                    let row = m.at(y, x);
                    prop_assert!(row[0]);
                    for (k, &(dy, dx)) in spec.offsets.iter().enumerate() {
                        let sy = y as i64 + dy as i64;
                        let sx = x as i64 + dx as i64;
                        let inside = (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx);
                        prop_assert_eq!(row[k], inside);
                    }
                }
            }
        }
    }
}
