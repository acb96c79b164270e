//! A linear gradient tape.
//!
//! Every operation appends one node holding its output value and what it
//! needs for the backward rule. [`Tape::backward`] walks the nodes in
//! strict reverse order, so gradients accumulate in a fixed order and
//! repeated runs are bit-identical. One tape per training step; a tape is
//! never shared between concurrent steps.

use std::sync::Arc;

use crate::attention::{
    aggregate_backward, compute_affinities, compute_affinities_backward, global_affinities,
    global_affinities_backward, global_aggregate, global_aggregate_backward, matchtrans_backward,
    normalize_matchtrans, normalize_psla_with_temperature, softmax_k_backward, softmax_rows,
    softmax_rows_backward, AttentionWeights,
};
use crate::error::{config_err, Error, Result};
use crate::neighborhood::{NeighborhoodSpec, ValidityMask};
use crate::ops::{concat_channels, concat_channels_backward, conv2d, conv2d_backward, relu, relu_backward, ConvParams};
use crate::tensor::{FeatureMap, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a [`Tape::custom`] node: `(inputs, output, grad_output)`
/// to one gradient per input.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync>;

enum Op {
    Leaf,
    Conv { input: Var, weight: Var, bias: Option<Var>, kernel: usize },
    Relu(Var),
    Concat(Var, Var),
    Affinity { target: Var, source: Var, spec: Arc<NeighborhoodSpec>, mask: Arc<ValidityMask> },
    SoftmaxVec(Var),
    SoftmaxK { raw: Var, scale: f32 },
    MatchTrans { raw: Var, mask: Arc<ValidityMask> },
    Aggregate { source: Var, weights: Var, spec: Arc<NeighborhoodSpec> },
    GlobalAffinity { target: Var, source: Var },
    SoftmaxRows { raw: Var, n: usize },
    GlobalAggregate { source: Var, weights: Var },
    ChannelSoftmax(Var),
    Fuse { weights: Var, a: Var, b: Var },
    /// Passes its input's value through; gradients stop here.
    StopGrad,
    Mse { pred: Var, target: Var },
    WeightedSum { input: Var, coeffs: Vec<f32> },
    SumSquares(Var),
    Sum(Var),
    Custom { inputs: Vec<Var>, backward: BackwardFn },
}

struct Node {
    value: Tensor,
    op: Op,
    /// Reductions keep a 64-bit copy of their value.
    scalar: Option<f64>,
}

/// Parameters of one convolution registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Option<Var>,
    pub kernel: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed to it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape.clone()))
    }
}

fn fm(t: &Tensor) -> FeatureMap {
    FeatureMap::try_from(t.clone()).expect("tape value is a feature map")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op, scalar: None });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, v: f64, op: Op) -> Var {
        self.nodes.push(Node { value: Tensor::scalar(v as f32), op, scalar: Some(v) });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::Usage(format!("variable {} is not recorded on this tape", v.0)))
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_map(&mut self, value: &FeatureMap) -> Var {
        self.leaf(value.to_tensor())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn feature(&self, v: Var) -> Result<FeatureMap> {
        FeatureMap::try_from(self.node(v)?.value.clone())
    }

    /// Value of a one-element node, in 64 bits when the node is a reduction.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v)?;
        if n.value.numel() != 1 {
            return Err(Error::Usage(format!("node {} is not a scalar", v.0)));
        }
        Ok(n.scalar.unwrap_or(n.value.data[0] as f64))
    }

    /// Smallest `|x|` over the inputs of every non-smooth point recorded so
    /// far (relu inputs and the MatchTrans clamp), or `None` if there are none.
    /// Finite differences with a step below this never straddle a kink.
    pub fn kink_margin(&self) -> Option<f32> {
        let mut m: Option<f32> = None;
        let mut take = |x: f32| m = Some(m.map_or(x.abs(), |m| m.min(x.abs())));
        for n in &self.nodes {
            match &n.op {
                Op::Relu(x) => self.nodes[x.0].value.data.iter().for_each(|&v| take(v)),
                Op::MatchTrans { raw, mask } => {
                    let raw = &self.nodes[raw.0].value.data;
                    raw.iter().zip(&mask.valid).filter(|(_, &ok)| ok).for_each(|(&v, _)| take(v));
                }
                _ => {}
            }
        }
        m
    }

    fn map_of(&self, v: Var) -> Result<FeatureMap> {
        self.feature(v)
    }

    pub fn param(&mut self, p: &ConvParams) -> ConvVars {
        let weight = self.leaf(p.weight_tensor());
        let bias = p.bias_tensor().map(|b| self.leaf(b));
        ConvVars { weight, bias, kernel: p.kernel_size }
    }

    /// Rebuilds the [`ConvParams`] a set of tape variables currently holds.
    pub fn conv_params(&self, p: &ConvVars) -> ConvParams {
        let w = self.value(p.weight);
        ConvParams {
            kernel_size: p.kernel,
            in_channels: w.shape[1],
            out_channels: w.shape[0],
            weights: w.data.clone(),
            bias: p.bias.map(|b| self.value(b).data.clone()),
        }
    }

    pub fn conv(&mut self, input: Var, p: &ConvVars) -> Result<Var> {
        let params = self.conv_params(p);
        let out = conv2d(&self.map_of(input)?, &params, params.padding())?;
        Ok(self.push(out.into_tensor(), Op::Conv { input, weight: p.weight, bias: p.bias, kernel: p.kernel }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = relu(&self.map_of(x)?);
        Ok(self.push(out.into_tensor(), Op::Relu(x)))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = concat_channels(&self.map_of(a)?, &self.map_of(b)?)?;
        Ok(self.push(out.into_tensor(), Op::Concat(a, b)))
    }

    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let v = self.node(x)?.value.clone();
        Ok(self.push(v, Op::StopGrad))
    }

    /// Masked softmax over all elements of `x` taken as one vector.
    pub fn softmax_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.node(x)?.value.clone();
        let y = crate::ops::softmax_masked(&t.data, mask)?;
        Ok(self.push(Tensor { shape: t.shape, data: y }, Op::SoftmaxVec(x)))
    }

    /// Raw local affinities, shape `(H, W, K)`; invalid entries are zero.
    pub fn affinity(&mut self, target: Var, source: Var, spec: &Arc<NeighborhoodSpec>) -> Result<Var> {
        let w = compute_affinities(&self.map_of(target)?, &self.map_of(source)?, spec)?;
        let shape = vec![w.height, w.width, w.k];
        let mask = Arc::new(w.mask);
        Ok(self.push(
            Tensor { shape, data: w.raw },
            Op::Affinity { target, source, spec: spec.clone(), mask },
        ))
    }

    fn mask_of(&self, raw: Var) -> Result<Arc<ValidityMask>> {
        match &self.node(raw)?.op {
            Op::Affinity { mask, .. } => Ok(mask.clone()),
            _ => Err(Error::Usage("local normalization expects an affinity node".into())),
        }
    }

    fn weights_of(&self, raw: Var, mask: &Arc<ValidityMask>) -> AttentionWeights {
        let t = self.value(raw);
        AttentionWeights {
            height: t.shape[0],
            width: t.shape[1],
            k: t.shape[2],
            raw: t.data.clone(),
            normalized: None,
            mask: (**mask).clone(),
        }
    }

    /// Masked softmax over the offset axis of an affinity node.
    pub fn softmax_local(&mut self, raw: Var, temperature: f32) -> Result<Var> {
        let mask = self.mask_of(raw)?;
        let w = normalize_psla_with_temperature(self.weights_of(raw, &mask), temperature);
        let shape = self.value(raw).shape.clone();
        Ok(self.push(
            Tensor { shape, data: w.normalized.unwrap() },
            Op::SoftmaxK { raw, scale: 1.0 / temperature },
        ))
    }

    pub fn matchtrans_local(&mut self, raw: Var) -> Result<Var> {
        let mask = self.mask_of(raw)?;
        let w = normalize_matchtrans(self.weights_of(raw, &mask));
        let shape = self.value(raw).shape.clone();
        Ok(self.push(Tensor { shape, data: w.normalized.unwrap() }, Op::MatchTrans { raw, mask }))
    }

    pub fn aggregate(&mut self, source: Var, weights: Var, spec: &Arc<NeighborhoodSpec>) -> Result<Var> {
        let src = self.map_of(source)?;
        let wt = self.value(weights);
        if wt.shape != [src.height(), src.width(), spec.len()] {
            return Err(config_err(format!("weights {:?} do not fit source {:?}", wt.shape, src.dims())));
        }
        let aw = AttentionWeights {
            height: src.height(),
            width: src.width(),
            k: spec.len(),
            raw: Vec::new(),
            normalized: Some(wt.data.clone()),
            mask: spec.make_mask(src.height(), src.width()),
        };
        let out = crate::attention::aggregate(&src, &aw, spec)?;
        Ok(self.push(out.into_tensor(), Op::Aggregate { source, weights, spec: spec.clone() }))
    }

    pub fn global_affinity(&mut self, target: Var, source: Var) -> Result<Var> {
        let t = self.map_of(target)?;
        let a = global_affinities(&t, &self.map_of(source)?)?;
        let n = t.plane();
        Ok(self.push(Tensor { shape: vec![n, n], data: a }, Op::GlobalAffinity { target, source }))
    }

    pub fn softmax_rows(&mut self, raw: Var) -> Result<Var> {
        let t = self.node(raw)?.value.clone();
        if t.shape.len() != 2 || t.shape[0] != t.shape[1] {
            return Err(config_err("row softmax expects a square matrix"));
        }
        let n = t.shape[1];
        let y = softmax_rows(&t.data, n);
        Ok(self.push(Tensor { shape: t.shape, data: y }, Op::SoftmaxRows { raw, n }))
    }

    pub fn global_aggregate(&mut self, source: Var, weights: Var) -> Result<Var> {
        let src = self.map_of(source)?;
        let out = global_aggregate(&src, &self.value(weights).data);
        Ok(self.push(out.into_tensor(), Op::GlobalAggregate { source, weights }))
    }

    /// Softmax across channels at every location.
    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let out = crate::ops::channel_softmax(&self.map_of(x)?);
        Ok(self.push(out.into_tensor(), Op::ChannelSoftmax(x)))
    }

    /// `weights[0] * a + weights[1] * b`, with the `(2, H, W)` weights
    /// broadcast over channels.
    pub fn fuse(&mut self, weights: Var, a: Var, b: Var) -> Result<Var> {
        let wm = self.map_of(weights)?;
        let am = self.map_of(a)?;
        let bm = self.map_of(b)?;
        if wm.channels() != 2 || !am.same_dims(&bm) || (wm.height(), wm.width()) != (am.height(), am.width()) {
            return Err(config_err(format!(
                "fuse shapes incompatible: weights {:?}, streams {:?} and {:?}",
                wm.dims(),
                am.dims(),
                bm.dims()
            )));
        }
        let out = fuse_maps(wm.channel(0), wm.channel(1), &am, &bm);
        Ok(self.push(out.into_tensor(), Op::Fuse { weights, a, b }))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape != t.shape {
            return Err(config_err(format!("mse shapes differ: {:?} vs {:?}", p.shape, t.shape)));
        }
        let n = p.numel().max(1) as f64;
        let v = p.data.iter().zip(&t.data).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n;
        Ok(self.push_scalar(v, Op::Mse { pred, target }))
    }

    pub fn weighted_sum(&mut self, input: Var, coeffs: Vec<f32>) -> Result<Var> {
        let x = self.value(input);
        if coeffs.len() != x.numel() {
            return Err(config_err("weighted sum needs one coefficient per element"));
        }
        let v = x.data.iter().zip(&coeffs).map(|(&a, &c)| a as f64 * c as f64).sum();
        Ok(self.push_scalar(v, Op::WeightedSum { input, coeffs }))
    }

    pub fn sum_squares(&mut self, input: Var) -> Result<Var> {
        let v = self.node(input)?.value.data.iter().map(|&a| (a as f64).powi(2)).sum();
        Ok(self.push_scalar(v, Op::SumSquares(input)))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let v = self.node(input)?.value.data.iter().map(|&a| a as f64).sum();
        Ok(self.push_scalar(v, Op::Sum(input)))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, backward: BackwardFn) -> Var {
        self.push(output, Op::Custom { inputs: inputs.to_vec(), backward })
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(Error::Usage("backward starts from a scalar node".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv { input, weight, bias, kernel } => {
                    let params = self.conv_params(&ConvVars { weight: *weight, bias: *bias, kernel: *kernel });
                    let (di, dw, db) = conv2d_backward(&fm(val(*input)), &params, params.padding(), &fm(&g))?;
                    accumulate(&mut grads, *input, di.into_tensor());
                    accumulate(&mut grads, *weight, Tensor { shape: val(*weight).shape.clone(), data: dw });
                    if let (Some(b), Some(db)) = (bias, db) {
                        accumulate(&mut grads, *b, Tensor { shape: vec![db.len()], data: db });
                    }
                }
                Op::Relu(x) => {
                    accumulate(&mut grads, *x, relu_backward(&fm(val(*x)), &fm(&g)).into_tensor());
                }
                Op::Concat(a, b) => {
                    let (ga, gb) = concat_channels_backward(val(*a).shape[0], &fm(&g));
                    accumulate(&mut grads, *a, ga.into_tensor());
                    accumulate(&mut grads, *b, gb.into_tensor());
                }
                Op::Affinity { target, source, spec, .. } => {
                    let (dt, ds) = compute_affinities_backward(&fm(val(*target)), &fm(val(*source)), spec, &g.data);
                    accumulate(&mut grads, *target, dt.into_tensor());
                    accumulate(&mut grads, *source, ds.into_tensor());
                }
                Op::SoftmaxVec(x) => {
                    let d = crate::ops::softmax_masked_backward(&node.value.data, &g.data);
                    accumulate(&mut grads, *x, Tensor { shape: node.value.shape.clone(), data: d });
                }
                Op::SoftmaxK { raw, scale, .. } => {
                    let k = node.value.shape[2];
                    let d = softmax_k_backward(&node.value.data, &g.data, k, *scale);
                    accumulate(&mut grads, *raw, Tensor { shape: node.value.shape.clone(), data: d });
                }
                Op::MatchTrans { raw, mask } => {
                    let k = node.value.shape[2];
                    let d = matchtrans_backward(&val(*raw).data, &mask.valid, &node.value.data, &g.data, k);
                    accumulate(&mut grads, *raw, Tensor { shape: node.value.shape.clone(), data: d });
                }
                Op::Aggregate { source, weights, spec } => {
                    let (ds, dw) = aggregate_backward(&fm(val(*source)), &val(*weights).data, spec, &fm(&g));
                    accumulate(&mut grads, *source, ds.into_tensor());
                    accumulate(&mut grads, *weights, Tensor { shape: val(*weights).shape.clone(), data: dw });
                }
                Op::GlobalAffinity { target, source } => {
                    let (dt, ds) = global_affinities_backward(&fm(val(*target)), &fm(val(*source)), &g.data);
                    accumulate(&mut grads, *target, dt.into_tensor());
                    accumulate(&mut grads, *source, ds.into_tensor());
                }
                Op::SoftmaxRows { raw, n } => {
                    let d = softmax_rows_backward(&node.value.data, &g.data, *n);
                    accumulate(&mut grads, *raw, Tensor { shape: node.value.shape.clone(), data: d });
                }
                Op::GlobalAggregate { source, weights } => {
                    let (ds, dw) = global_aggregate_backward(&fm(val(*source)), &val(*weights).data, &fm(&g));
                    accumulate(&mut grads, *source, ds.into_tensor());
                    accumulate(&mut grads, *weights, Tensor { shape: val(*weights).shape.clone(), data: dw });
                }
                Op::ChannelSoftmax(x) => {
                    let (c, h, w) = (node.value.shape[0], node.value.shape[1], node.value.shape[2]);
                    let p = h * w;
                    let y = &node.value.data;
                    let mut d = vec![0.0f32; c * p];
                    for i in 0..p {
                        let dot: f32 = (0..c).map(|ch| y[ch * p + i] * g.data[ch * p + i]).sum();
                        for ch in 0..c {
                            d[ch * p + i] = y[ch * p + i] * (g.data[ch * p + i] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor { shape: node.value.shape.clone(), data: d });
                }
                Op::Fuse { weights, a, b } => {
                    let wm = fm(val(*weights));
                    let (am, bm) = (fm(val(*a)), fm(val(*b)));
                    let (c, h, w) = am.dims();
                    let p = h * w;
                    let (w0, w1) = (wm.channel(0), wm.channel(1));
                    let mut da = vec![0.0f32; c * p];
                    let mut db = vec![0.0f32; c * p];
                    let mut dw = vec![0.0f32; 2 * p];
                    for ch in 0..c {
                        for i in 0..p {
                            let j = ch * p + i;
                            da[j] = w0[i] * g.data[j];
                            db[j] = w1[i] * g.data[j];
                            dw[i] += g.data[j] * am.data()[j];
                            dw[p + i] += g.data[j] * bm.data()[j];
                        }
                    }
                    accumulate(&mut grads, *a, Tensor { shape: vec![c, h, w], data: da });
                    accumulate(&mut grads, *b, Tensor { shape: vec![c, h, w], data: db });
                    accumulate(&mut grads, *weights, Tensor { shape: vec![2, h, w], data: dw });
                }
                Op::StopGrad => {}
                Op::Mse { pred, target } => {
                    let (p, t) = (val(*pred), val(*target));
                    let scale = 2.0 * g.data[0] / p.numel().max(1) as f32;
                    let dp: Vec<f32> = p.data.iter().zip(&t.data).map(|(a, b)| scale * (a - b)).collect();
                    let dt: Vec<f32> = dp.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *pred, Tensor { shape: p.shape.clone(), data: dp });
                    accumulate(&mut grads, *target, Tensor { shape: t.shape.clone(), data: dt });
                }
                Op::WeightedSum { input, coeffs } => {
                    let d = coeffs.iter().map(|c| c * g.data[0]).collect();
                    accumulate(&mut grads, *input, Tensor { shape: val(*input).shape.clone(), data: d });
                }
                Op::SumSquares(x) => {
                    let d = val(*x).data.iter().map(|v| 2.0 * v * g.data[0]).collect();
                    accumulate(&mut grads, *x, Tensor { shape: val(*x).shape.clone(), data: d });
                }
                Op::Sum(x) => {
                    let d = vec![g.data[0]; val(*x).numel()];
                    accumulate(&mut grads, *x, Tensor { shape: val(*x).shape.clone(), data: d });
                }
                Op::Custom { inputs, backward } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                    let ds = backward(&ins, &node.value, &g);
                    if ds.len() != inputs.len() {
                        return Err(Error::Usage("custom backward returned the wrong number of gradients".into()));
                    }
                    for (v, d) in inputs.iter().zip(ds) {
                        accumulate(&mut grads, *v, d);
                    }
                }
            }
            // interior gradients are dropped once propagated; leaves keep theirs
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Per-location two-stream blend: `w0 * a + w1 * b` broadcast over channels.
pub(crate) fn fuse_maps(w0: &[f32], w1: &[f32], a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    let (c, h, w) = a.dims();
    let p = h * w;
    let mut out = vec![0.0f32; c * p];
    for ch in 0..c {
        for i in 0..p {
            let j = ch * p + i;
            out[j] = w0[i] * a.data()[j] + w1[i] * b.data()[j];
        }
    }
    FeatureMap::from_vec(c, h, w, out).expect("fuse keeps the stream shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_from_foreign_var_is_usage_error() {
        let tape = Tape::new();
        let other = {
            let mut t = Tape::new();
            let a = t.leaf(Tensor::scalar(1.0));
            t.sum(a).unwrap()
        };
        assert!(matches!(tape.backward(other), Err(Error::Usage(_))));
    }

    #[test]
    fn kink_margin_sees_relu_inputs() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 3], vec![0.5, -0.02, 3.0]).unwrap());
        assert_eq!(t.kink_margin(), None);
        t.relu(x).unwrap();
        assert_eq!(t.kink_margin(), Some(0.02));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(vec![1, 2, 2]));
        assert!(matches!(t.backward(a), Err(Error::Usage(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // L = sum(x) + sum(x^2) -> dL/dx = 1 + 2x
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let a = t.sum(x).unwrap();
        let b = t.sum_squares(x).unwrap();
        // join the two scalars through a custom node
        let va = t.value(a).data[0];
        let vb = t.value(b).data[0];
        let l = t.custom(
            &[a, b],
            Tensor::scalar(va + vb),
            Box::new(|_, _, g| vec![g.clone(), g.clone()]),
        );
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data, vec![3.0, -3.0, 2.0]);
    }

    #[test]
    fn reverse_order_is_strict() {
        use std::sync::{Arc, Mutex};
        let seen = Arc::new(Mutex::new(Vec::new()));
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        let mut cur = x;
        for i in 0..4 {
            let s = seen.clone();
            cur = t.custom(
                &[cur],
                Tensor::scalar(1.0),
                Box::new(move |_, _, g| {
                    s.lock().unwrap().push(i);
                    vec![g.clone()]
                }),
            );
        }
        t.backward(cur).unwrap();
        assert_eq!(*seen.lock().unwrap(), vec![3, 2, 1, 0]);
    }

    #[test]
    fn stop_gradient_blocks() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap());
        let s = t.stop_gradient(x).unwrap();
        let l = t.sum_squares(s).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn reductions_keep_64_bits() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![1e8, 1.0, -1e8]).unwrap());
        let s = t.sum(x).unwrap();
        assert_eq!(t.scalar(s).unwrap(), 1.0);
    }
}
