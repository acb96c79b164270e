//! The small convolutional nets used around the alignment operator: a
//! two-stream fusion net (used both to update the temporal feature and to
//! merge propagated features with encoded low-level ones) and the transform
//! net that lifts low-level features to the high-level width.

use rand::Rng;

use crate::autograd::{ConvVars, Tape, Var};
use crate::error::{config_err, Result};
use crate::ops::{channel_softmax, concat_channels, conv2d, relu, ConvParams};
use crate::tensor::FeatureMap;

pub const DEFAULT_REDUCE_WIDTH: usize = 256;
pub const DEFAULT_HIDDEN_WIDTH: usize = 16;
pub const DEFAULT_BOTTLENECK: usize = 256;
pub const DEFAULT_MID_WIDTH: usize = 256;

/// Anything made of convolution layers.
pub trait ParamCount {
    fn param_count(&self) -> usize;
}

impl ParamCount for ConvParams {
    fn param_count(&self) -> usize {
        ConvParams::param_count(self)
    }
}

impl ParamCount for [ConvParams] {
    fn param_count(&self) -> usize {
        self.iter().map(ConvParams::param_count).sum()
    }
}

impl ParamCount for crate::attention::EmbeddingPair {
    fn param_count(&self) -> usize {
        crate::attention::EmbeddingPair::param_count(self)
    }
}

pub fn param_count<N: ParamCount + ?Sized>(net: &N) -> usize {
    net.param_count()
}

fn forward_layer(x: &FeatureMap, p: &ConvParams) -> Result<FeatureMap> {
    conv2d(x, p, p.padding())
}

fn check_same(a: &FeatureMap, b: &FeatureMap, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(config_err(format!("{what}: stream dims differ, {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Per-location weights of the two streams; `w_hat + w = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    pub height: usize,
    pub width: usize,
    /// Weight of the first (aligned / propagated) stream.
    pub w_hat: Vec<f32>,
    /// Weight of the second (current / encoded) stream.
    pub w: Vec<f32>,
}

impl FusionWeights {
    pub fn constant(height: usize, width: usize, w_hat: f32) -> Self {
        let n = height * width;
        Self { height, width, w_hat: vec![w_hat; n], w: vec![1.0 - w_hat; n] }
    }

    fn from_softmax(p: FeatureMap) -> Self {
        let (_, h, w) = p.dims();
        Self { height: h, width: w, w_hat: p.channel(0).to_vec(), w: p.channel(1).to_vec() }
    }
}

/// concat -> 1x1 reduce -> relu -> 3x3 hidden -> relu -> 3x3 head (2 maps).
#[derive(Clone, Debug, PartialEq)]
pub struct TwoStreamFusionNet {
    pub reduce: ConvParams,
    pub hidden: ConvParams,
    pub head: ConvParams,
}

impl TwoStreamFusionNet {
    pub fn new(reduce: ConvParams, hidden: ConvParams, head: ConvParams) -> Result<Self> {
        if reduce.kernel_size != 1 || hidden.kernel_size != 3 || head.kernel_size != 3 {
            return Err(config_err("fusion net layers must be 1x1, 3x3, 3x3"));
        }
        if reduce.in_channels % 2 != 0 {
            return Err(config_err("fusion net input must be two equal-width streams"));
        }
        if hidden.in_channels != reduce.out_channels || head.in_channels != hidden.out_channels {
            return Err(config_err("fusion net layer widths do not chain"));
        }
        if head.out_channels != 2 {
            return Err(config_err(format!("fusion head must have 2 outputs, got {}", head.out_channels)));
        }
        Ok(Self { reduce, hidden, head })
    }

    /// Random hidden layers and a zero head, so fusion starts at 50/50.
    pub fn init<R: Rng>(feat_channels: usize, reduce_width: usize, hidden_width: usize, rng: &mut R) -> Self {
        Self {
            reduce: ConvParams::init_uniform(1, 2 * feat_channels, reduce_width, true, rng),
            hidden: ConvParams::init_uniform(3, reduce_width, hidden_width, true, rng),
            head: ConvParams::zeros(3, hidden_width, 2, true),
        }
    }

    pub fn init_default<R: Rng>(feat_channels: usize, rng: &mut R) -> Self {
        Self::init(feat_channels, DEFAULT_REDUCE_WIDTH, DEFAULT_HIDDEN_WIDTH, rng)
    }

    /// A net whose head ignores its input and emits the constant logits `(a, b)`.
    pub fn constant_logits<R: Rng>(feat_channels: usize, a: f32, b: f32, rng: &mut R) -> Self {
        let mut net = Self::init(feat_channels, 8, 4, rng);
        net.head.bias = Some(vec![a, b]);
        net
    }

    pub fn feat_channels(&self) -> usize {
        self.reduce.in_channels / 2
    }

    /// The same net with the roles of the two streams exchanged.
    pub fn swapped_streams(&self) -> Self {
        let mut out = self.clone();
        let c = self.feat_channels();
        let cin = self.reduce.in_channels;
        for o in 0..self.reduce.out_channels {
            let row = &mut out.reduce.weights[o * cin..(o + 1) * cin];
            let (a, b) = row.split_at_mut(c);
            a.swap_with_slice(b);
        }
        let per = self.head.in_channels * 9;
        let (h0, h1) = out.head.weights.split_at_mut(per);
        h0.swap_with_slice(h1);
        if let Some(b) = &mut out.head.bias {
            b.swap(0, 1);
        }
        out
    }

    /// Raw 2-channel logits.
    pub fn logits(&self, a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
        check_same(a, b, "fusion net")?;
        if a.channels() != self.feat_channels() {
            return Err(config_err(format!(
                "fusion net expects {} channels per stream, got {}",
                self.feat_channels(),
                a.channels()
            )));
        }
        let x = concat_channels(a, b)?;
        let x = relu(&forward_layer(&x, &self.reduce)?);
        let x = relu(&forward_layer(&x, &self.hidden)?);
        forward_layer(&x, &self.head)
    }

    pub fn weights(&self, a: &FeatureMap, b: &FeatureMap) -> Result<FusionWeights> {
        Ok(FusionWeights::from_softmax(channel_softmax(&self.logits(a, b)?)))
    }

    pub fn layers(&self) -> [&ConvParams; 3] {
        [&self.reduce, &self.hidden, &self.head]
    }

    pub fn register(&self, tape: &mut Tape) -> FusionNetVars {
        FusionNetVars { reduce: tape.param(&self.reduce), hidden: tape.param(&self.hidden), head: tape.param(&self.head) }
    }
}

impl ParamCount for TwoStreamFusionNet {
    fn param_count(&self) -> usize {
        self.layers().iter().map(|p| p.param_count()).sum()
    }
}

/// A [`TwoStreamFusionNet`] whose parameters live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FusionNetVars {
    pub reduce: ConvVars,
    pub hidden: ConvVars,
    pub head: ConvVars,
}

impl FusionNetVars {
    /// `(2, H, W)` weights: channel 0 for `a`, channel 1 for `b`.
    pub fn weights(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        if tape.value(a).shape != tape.value(b).shape {
            return Err(config_err("fusion net: stream dims differ"));
        }
        let x = tape.concat(a, b)?;
        let x = tape.conv(x, &self.reduce)?;
        let x = tape.relu(x)?;
        let x = tape.conv(x, &self.hidden)?;
        let x = tape.relu(x)?;
        let x = tape.conv(x, &self.head)?;
        tape.channel_softmax(x)
    }

    /// Weights followed by the fusion itself.
    pub fn fuse(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let w = self.weights(tape, a, b)?;
        tape.fuse(w, a, b)
    }

    pub fn read(&self, tape: &Tape) -> TwoStreamFusionNet {
        TwoStreamFusionNet {
            reduce: tape.conv_params(&self.reduce),
            hidden: tape.conv_params(&self.hidden),
            head: tape.conv_params(&self.head),
        }
    }

    pub fn params(&self) -> [ConvVars; 3] {
        [self.reduce, self.hidden, self.head]
    }
}

/// Update weights for the aligned temporal feature and the current key feature.
pub fn update_net_forward(
    aligned: &FeatureMap,
    current: &FeatureMap,
    net: &TwoStreamFusionNet,
) -> Result<FusionWeights> {
    net.weights(aligned, current)
}

/// `w_hat * aligned + w * current`, weights broadcast over channels.
pub fn fuse(weights: &FusionWeights, aligned: &FeatureMap, current: &FeatureMap) -> Result<FeatureMap> {
    check_same(aligned, current, "fuse")?;
    if (weights.height, weights.width) != (aligned.height(), aligned.width()) {
        return Err(config_err("fusion weights do not match the feature map size"));
    }
    Ok(crate::autograd::fuse_maps(&weights.w_hat, &weights.w, aligned, current))
}

/// Fuses a propagated feature with the encoded low-level feature.
pub fn quality_net_forward(
    propagated: &FeatureMap,
    encoded_low: &FeatureMap,
    net: &TwoStreamFusionNet,
) -> Result<FeatureMap> {
    let w = net.weights(propagated, encoded_low)?;
    fuse(&w, propagated, encoded_low)
}

/// 1x1 reduce -> relu -> 3x3 mid -> relu -> 3x3 out.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformNet {
    pub reduce: ConvParams,
    pub mid: ConvParams,
    pub out: ConvParams,
    /// Block gradients from flowing back into the low-level features.
    pub stop_gradient: bool,
}

impl TransformNet {
    pub fn new(reduce: ConvParams, mid: ConvParams, out: ConvParams) -> Result<Self> {
        if reduce.kernel_size != 1 || mid.kernel_size != 3 || out.kernel_size != 3 {
            return Err(config_err("transform net layers must be 1x1, 3x3, 3x3"));
        }
        if mid.in_channels != reduce.out_channels || out.in_channels != mid.out_channels {
            return Err(config_err("transform net layer widths do not chain"));
        }
        Ok(Self { reduce, mid, out, stop_gradient: false })
    }

    pub fn init<R: Rng>(low_channels: usize, bottleneck: usize, mid_width: usize, feat_channels: usize, rng: &mut R) -> Self {
        Self {
            reduce: ConvParams::init_uniform(1, low_channels, bottleneck, true, rng),
            mid: ConvParams::init_uniform(3, bottleneck, mid_width, true, rng),
            out: ConvParams::init_uniform(3, mid_width, feat_channels, true, rng),
            stop_gradient: false,
        }
    }

    pub fn init_default<R: Rng>(low_channels: usize, feat_channels: usize, rng: &mut R) -> Self {
        Self::init(low_channels, DEFAULT_BOTTLENECK, DEFAULT_MID_WIDTH, feat_channels, rng)
    }

    /// Exact pass-through for inputs of any sign: the first layer splits
    /// `x` into `relu(x)` and `relu(-x)`, the last layer subtracts them.
    pub fn identity(channels: usize) -> Self {
        let c = channels;
        let mut reduce = ConvParams::zeros(1, c, 2 * c, true);
        for i in 0..c {
            reduce.weights[i * c + i] = 1.0;
            reduce.weights[(c + i) * c + i] = -1.0;
        }
        let mut out = ConvParams::zeros(3, 2 * c, c, true);
        for i in 0..c {
            out.weights[(i * 2 * c + i) * 9 + 4] = 1.0;
            out.weights[(i * 2 * c + c + i) * 9 + 4] = -1.0;
        }
        Self { reduce, mid: ConvParams::identity(3, 2 * c), out, stop_gradient: false }
    }

    pub fn low_channels(&self) -> usize {
        self.reduce.in_channels
    }

    pub fn feat_channels(&self) -> usize {
        self.out.out_channels
    }

    pub fn layers(&self) -> [&ConvParams; 3] {
        [&self.reduce, &self.mid, &self.out]
    }

    pub fn register(&self, tape: &mut Tape) -> TransformNetVars {
        TransformNetVars {
            reduce: tape.param(&self.reduce),
            mid: tape.param(&self.mid),
            out: tape.param(&self.out),
            stop_gradient: self.stop_gradient,
        }
    }
}

impl ParamCount for TransformNet {
    fn param_count(&self) -> usize {
        self.layers().iter().map(|p| p.param_count()).sum()
    }
}

pub fn transform_net_forward(low: &FeatureMap, net: &TransformNet) -> Result<FeatureMap> {
    if low.channels() != net.low_channels() {
        return Err(config_err(format!(
            "transform net expects {} low-level channels, got {}",
            net.low_channels(),
            low.channels()
        )));
    }
    let x = relu(&forward_layer(low, &net.reduce)?);
    let x = relu(&forward_layer(&x, &net.mid)?);
    forward_layer(&x, &net.out)
}

/// A [`TransformNet`] whose parameters live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TransformNetVars {
    pub reduce: ConvVars,
    pub mid: ConvVars,
    pub out: ConvVars,
    pub stop_gradient: bool,
}

impl TransformNetVars {
    pub fn forward(&self, tape: &mut Tape, low: Var) -> Result<Var> {
        let x = if self.stop_gradient { tape.stop_gradient(low)? } else { low };
        let x = tape.conv(x, &self.reduce)?;
        let x = tape.relu(x)?;
        let x = tape.conv(x, &self.mid)?;
        let x = tape.relu(x)?;
        tape.conv(x, &self.out)
    }

    pub fn read(&self, tape: &Tape) -> TransformNet {
        TransformNet {
            reduce: tape.conv_params(&self.reduce),
            mid: tape.conv_params(&self.mid),
            out: tape.conv_params(&self.out),
            stop_gradient: self.stop_gradient,
        }
    }

    pub fn params(&self) -> [ConvVars; 3] {
        [self.reduce, self.mid, self.out]
    }
}

/// Parameter counts of the whole propagation machinery.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct ParamLedger {
    pub embeddings: usize,
    pub update_net: usize,
    pub quality_net: usize,
    pub transform_net: usize,
    pub total: usize,
}

impl ParamLedger {
    pub fn new(
        emb: &crate::attention::EmbeddingPair,
        update: &TwoStreamFusionNet,
        quality: &TwoStreamFusionNet,
        transform: &TransformNet,
    ) -> Self {
        let (e, u, q, t) = (emb.param_count(), update.param_count(), quality.param_count(), transform.param_count());
        Self { embeddings: e, update_net: u, quality_net: q, transform_net: t, total: e + u + q + t }
    }

    /// Counts at the default widths without allocating any weights.
    pub fn closed_form(low: usize, feat: usize, embed: usize) -> Self {
        let conv = |k: usize, i: usize, o: usize| o * i * k * k + o;
        let embeddings = if embed == 0 { 0 } else { 2 * conv(1, feat, embed) };
        let fusion = conv(1, 2 * feat, DEFAULT_REDUCE_WIDTH)
            + conv(3, DEFAULT_REDUCE_WIDTH, DEFAULT_HIDDEN_WIDTH)
            + conv(3, DEFAULT_HIDDEN_WIDTH, 2);
        let transform =
            conv(1, low, DEFAULT_BOTTLENECK) + conv(3, DEFAULT_BOTTLENECK, DEFAULT_MID_WIDTH) + conv(3, DEFAULT_MID_WIDTH, feat);
        Self {
            embeddings,
            update_net: fusion,
            quality_net: fusion,
            transform_net: transform,
            total: embeddings + 2 * fusion + transform,
        }
    }
}
