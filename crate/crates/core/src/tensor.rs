//! Dense storage types and the `PSLA` binary tensor format.
//!
//! Layout of the binary format (all integers little-endian):
//!
//! ```text
//! "PSLA" | version: u16 | dtype: u8 (0 = f32) | rank: u8 | dims: rank x u32 | data
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{config_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"PSLA";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

/// A row-major tensor of arbitrary rank. This is what the gradient tape
/// stores; [`FeatureMap`] is the rank-3 view used by most of the API.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(config_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f32) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes the tensor in the binary format.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} too large", self.shape.len())));
        }
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[DTYPE_F32, self.shape.len() as u8])?;
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut v = [0u8; 2];
        r.read_exact(&mut v)?;
        let version = u16::from_le_bytes(v);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let mut hdr = [0u8; 2];
        r.read_exact(&mut hdr)?;
        if hdr[0] != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {}", hdr[0])));
        }
        let rank = hdr[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d = [0u8; 4];
            r.read_exact(&mut d)?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Dense (channels, height, width) map of `f32`, channel-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    /// Builds a map from flat data. A zero-channel map is allowed (it is the
    /// neutral element of channel concatenation) but spatial dims must be positive.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(config_err(format!("spatial dims must be positive, got {height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(config_err(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "spatial dims must be positive");
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, data }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn random_uniform<R: Rng>(
        channels: usize,
        height: usize,
        width: usize,
        lo: f32,
        hi: f32,
        rng: &mut R,
    ) -> Self {
        Self::from_fn(channels, height, width, |_, _, _| rng.gen_range(lo..hi))
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
    pub fn plane(&self) -> usize {
        self.height * self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn same_dims(&self, other: &FeatureMap) -> bool {
        self.dims() == other.dims()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f32 {
        assert!(self.same_dims(other), "dims differ: {:?} vs {:?}", self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Pixel-major copy: `out[(y*W + x)*C + c]`.
    pub fn to_hwc(&self) -> Vec<f32> {
        let (c, p) = (self.channels, self.plane());
        let mut out = vec![0.0; c * p];
        for ch in 0..c {
            let src = &self.data[ch * p..(ch + 1) * p];
            for (i, &v) in src.iter().enumerate() {
                out[i * c + ch] = v;
            }
        }
        out
    }

    pub fn from_hwc(channels: usize, height: usize, width: usize, hwc: &[f32]) -> Self {
        let p = height * width;
        let mut data = vec![0.0; channels * p];
        for i in 0..p {
            for ch in 0..channels {
                data[ch * p + i] = hwc[i * channels + ch];
            }
        }
        Self { channels, height, width, data }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor { shape: vec![self.channels, self.height, self.width], data: self.data.clone() }
    }

    pub fn into_tensor(self) -> Tensor {
        Tensor { shape: vec![self.channels, self.height, self.width], data: self.data }
    }
}

impl TryFrom<Tensor> for FeatureMap {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        match t.shape[..] {
            [c, h, w] => FeatureMap::from_vec(c, h, w, t.data),
            _ => Err(config_err(format!("expected rank-3 tensor, got shape {:?}", t.shape))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(FeatureMap::from_vec(2, 2, 2, vec![0.0; 7]).is_err());
        assert!(FeatureMap::from_vec(2, 0, 2, vec![]).is_err());
    }

    #[test]
    fn header_layout_is_pinned() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = t.to_bytes().unwrap();
        assert_eq!(&b[..4], b"PSLA");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 0);
        assert_eq!(b[7], 2);
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&b[20..24], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn bad_magic_and_dtype_rejected() {
        let t = Tensor::scalar(3.0);
        let mut b = t.to_bytes().unwrap();
        b[0] = b'X';
        assert!(matches!(Tensor::read_from(&b[..]), Err(Error::Format(_))));
        let mut b = t.to_bytes().unwrap();
        b[6] = 7;
        assert!(matches!(Tensor::read_from(&b[..]), Err(Error::Format(_))));
    }

    #[test]
    fn hwc_roundtrip() {
        let m = FeatureMap::from_fn(3, 2, 4, |c, y, x| (c * 100 + y * 10 + x) as f32);
        let hwc = m.to_hwc();
        assert_eq!(hwc[(1 * 4 + 2) * 3 + 1], 112.0);
        assert_eq!(FeatureMap::from_hwc(3, 2, 4, &hwc), m);
    }

    proptest! {
        #[test]
        fn binary_roundtrip_is_bit_exact(
            dims in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u32>(),
        ) {
            let n: usize = dims.iter().product();
            // raw bit patterns, including NaN payloads and subnormals
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503)))
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::read_from(&t.to_bytes().unwrap()[..]).unwrap();
            prop_assert_eq!(&back.shape, &t.shape);
            let a: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
