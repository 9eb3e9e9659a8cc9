use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grads::{bias_grad, conv_cols_backward, depthwise_cols_backward};
use crate::conv::{conv_raw, depthwise_raw, ConvGeometry};
use crate::doconv::{ComposeMode, DoConvParams, DoKind, ResidualInit};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{col2im, dot, im2col, DType, Scalar, Tensor};

/// Which stream the `residual` draws come from when `ResidualInit::Random`
/// is requested; kept apart from the `W` stream so both variants share `W`.
const RESIDUAL_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    Weight,
    Residual,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub role: ParamRole,
}

impl ParamId {
    pub fn new(layer: usize, role: ParamRole) -> Self {
        ParamId { layer, role }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let role = match self.role {
            ParamRole::Weight => "weight",
            ParamRole::Residual => "residual",
            ParamRole::Bias => "bias",
        };
        write!(f, "layer{}.{role}", self.layer)
    }
}

/// Gradient per parameter, each with the shape of its parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet<T = f64> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Default for GradSet<T> {
    fn default() -> Self {
        GradSet { grads: BTreeMap::new() }
    }
}

impl<T: Scalar> GradSet<T> {
    pub fn insert(&mut self, id: ParamId, grad: Tensor<T>) {
        self.grads.insert(id, grad);
    }

    pub fn get(&self, id: &ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id)
    }

    pub fn remove(&mut self, id: &ParamId) -> Option<Tensor<T>> {
        self.grads.remove(id)
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&ParamId) -> bool) {
        self.grads.retain(|id, _| keep(id));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|g| g.all_finite())
    }
}

/// Where a plain convolution layer came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvOrigin {
    Plain,
    /// requested as over-parameterized, but `M×N = 1` leaves no patch for `D`
    PointwiseSkipped(DoKind),
    /// produced by folding an over-parameterized layer
    Folded(DoKind),
}

/// Conventional or grouped convolution, kernel `[C_out, M×N, C_in/G]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T = f64> {
    pub geom: ConvGeometry,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub origin: ConvOrigin,
}

/// Depthwise convolution, kernel `[M×N, D_mul, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseLayer<T = f64> {
    pub geom: ConvGeometry,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub origin: ConvOrigin,
}

/// Fully connected layer, weight `[units, inputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T = f64> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T = f64> {
    Conv(ConvLayer<T>),
    Depthwise(DepthwiseLayer<T>),
    DoConv(DoConvParams<T>),
    Relu,
    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped
    MaxPool,
    Flatten,
    Dense(DenseLayer<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Depthwise(_) => "depthwise",
            Layer::DoConv(p) => match p.kind {
                DoKind::Conv => "doconv",
                DoKind::GroupConv => "dogconv",
                DoKind::DepthwiseConv => "dodconv",
            },
            Layer::Relu => "relu",
            Layer::MaxPool => "maxpool",
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
        }
    }

    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let map = |geom: &ConvGeometry| -> Result<Vec<usize>> {
            let &[h, w, c] = input else {
                return Err(shape_err!("convolution needs an [H, W, C] input, got {input:?}"));
            };
            if c != geom.in_channels {
                return Err(shape_err!("layer expects {} channels, got {c}", geom.in_channels));
            }
            let (oh, ow) = geom.output_size(h, w)?;
            Ok(vec![oh, ow, geom.out_channels])
        };
        match self {
            Layer::Conv(l) => map(&l.geom),
            Layer::Depthwise(l) => map(&l.geom),
            Layer::DoConv(p) => map(&p.geom),
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool => match *input {
                [h, w, c] if h >= 2 && w >= 2 => Ok(vec![h / 2, w / 2, c]),
                _ => Err(shape_err!("2×2 pooling needs an [H≥2, W≥2, C] input, got {input:?}")),
            },
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Dense(l) => {
                let &[inputs] = input else {
                    return Err(shape_err!("dense layer needs a flat input, got {input:?}"));
                };
                let &[units, expect] = l.weight.dims() else {
                    return Err(shape_err!("dense weight must be 2-D"));
                };
                if inputs != expect {
                    return Err(shape_err!("dense layer expects {expect} inputs, got {inputs}"));
                }
                Ok(vec![units])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// plain convolutions everywhere
    Baseline,
    /// every `conv`/`depthwise` layer with a spatial kernel is over-parameterized
    #[serde(rename = "doconv")]
    DoConv,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::DoConv => "doconv",
        })
    }
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub pad: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default = "yes")]
    pub bias: bool,
    /// `D_mul` when over-parameterized; defaults to `M×N`
    #[serde(default)]
    pub depth_multiplier: Option<usize>,
    #[serde(default)]
    pub residual_init: ResidualInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthwiseSpec {
    pub kernel: usize,
    /// outputs per input channel of the plain depthwise layer
    #[serde(default = "one")]
    pub multiplier: usize,
    #[serde(default)]
    pub pad: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "yes")]
    pub bias: bool,
    #[serde(default)]
    pub depth_multiplier: Option<usize>,
    #[serde(default)]
    pub residual_init: ResidualInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseSpec {
    pub units: usize,
    #[serde(default = "yes")]
    pub bias: bool,
}

/// One entry of a [`NetworkSpec`].
///
/// `conv` and `depthwise` follow the build [`Variant`]; `doconv` and
/// `dodconv` are over-parameterized in every variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv(ConvSpec),
    Depthwise(DepthwiseSpec),
    Doconv(ConvSpec),
    Dodconv(DepthwiseSpec),
    Relu,
    Maxpool,
    Flatten,
    Dense(DenseSpec),
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// `[H, W, C]` of one input sample
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// conv3×3(1→8) → relu → pool → conv3×3(8→16) → relu → pool → dense(10)
    pub fn reference() -> Self {
        let conv = |out_channels| {
            LayerSpec::Conv(ConvSpec {
                kernel: 3,
                out_channels,
                pad: 1,
                stride: 1,
                groups: 1,
                bias: true,
                depth_multiplier: None,
                residual_init: ResidualInit::Identity,
            })
        };
        NetworkSpec {
            input: [28, 28, 1],
            layers: vec![
                conv(8),
                LayerSpec::Relu,
                LayerSpec::Maxpool,
                conv(16),
                LayerSpec::Relu,
                LayerSpec::Maxpool,
                LayerSpec::Flatten,
                LayerSpec::Dense(DenseSpec { units: 10, bias: true }),
                LayerSpec::SoftmaxCrossEntropy,
            ],
        }
    }
}

/// A feed-forward CNN ending in logits; the softmax cross-entropy head is
/// applied by [`Network::loss_and_grads`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f64> {
    input: [usize; 3],
    layers: Vec<Layer<T>>,
    classes: usize,
}

/// A network of either precision, as loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyNetwork {
    F32(Network<f32>),
    F64(Network<f64>),
}

impl AnyNetwork {
    pub fn dtype(&self) -> DType {
        match self {
            AnyNetwork::F32(_) => DType::F32,
            AnyNetwork::F64(_) => DType::F64,
        }
    }
}

fn he_tensor<T: Scalar>(dims: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| Error::Numeric(e.to_string()))?;
    Tensor::from_fn(dims.to_vec(), |_| T::of(normal.sample(rng)))
}

fn opt_bias<T: Scalar>(enabled: bool, channels: usize) -> Result<Option<Tensor<T>>> {
    enabled.then(|| Tensor::zeros([channels])).transpose()
}

impl<T: Scalar> Network<T> {
    pub fn new(input: [usize; 3], layers: Vec<Layer<T>>) -> Result<Self> {
        let mut dims = input.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            dims = layer
                .output_dims(&dims)
                .map_err(|e| shape_err!("layer {i} ({}): {e}", layer.name()))?;
        }
        let &[classes] = dims.as_slice() else {
            return Err(shape_err!("network must end in a flat logit vector, ends in {dims:?}"));
        };
        Ok(Network { input, layers, classes })
    }

    /// Builds and initializes a network.
    ///
    /// Kernels are drawn from one He-normal stream seeded by `seed`, in layer
    /// order. For `D_mul = M×N` an over-parameterized `W` has the shape of the
    /// plain kernel, so both variants draw identical `W` values.
    pub fn from_spec(spec: &NetworkSpec, variant: Variant, seed: u64) -> Result<Self> {
        let mut w_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d_rng = ChaCha8Rng::seed_from_u64(seed ^ RESIDUAL_STREAM);
        let Some((LayerSpec::SoftmaxCrossEntropy, body)) = spec.layers.split_last() else {
            return Err(Error::Config("the last layer must be softmax_cross_entropy".into()));
        };
        let mut dims = spec.input.to_vec();
        let mut layers = Vec::with_capacity(body.len());
        for (i, ls) in body.iter().enumerate() {
            let layer = match ls {
                LayerSpec::SoftmaxCrossEntropy => {
                    return Err(Error::Config(format!("layer {i}: the loss head must come last")));
                }
                LayerSpec::Conv(cs) => conv_layer(cs, &dims, variant == Variant::DoConv, &mut w_rng, &mut d_rng)?,
                LayerSpec::Doconv(cs) => conv_layer(cs, &dims, true, &mut w_rng, &mut d_rng)?,
                LayerSpec::Depthwise(ds) => {
                    depthwise_layer(ds, &dims, variant == Variant::DoConv, &mut w_rng, &mut d_rng)?
                }
                LayerSpec::Dodconv(ds) => depthwise_layer(ds, &dims, true, &mut w_rng, &mut d_rng)?,
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Maxpool => Layer::MaxPool,
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Dense(ds) => {
                    let &[inputs] = dims.as_slice() else {
                        return Err(shape_err!("layer {i}: dense needs a flat input, got {dims:?} (add flatten)"));
                    };
                    Layer::Dense(DenseLayer {
                        weight: he_tensor(&[ds.units, inputs], inputs, &mut w_rng)?,
                        bias: opt_bias(ds.bias, ds.units)?,
                    })
                }
            };
            dims = layer
                .output_dims(&dims)
                .map_err(|e| shape_err!("layer {i} ({}): {e}", layer.name()))?;
            layers.push(layer);
        }
        Network::new(spec.input, layers)
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// Every trainable tensor, in layer order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (residual, weight, bias) = match layer {
                Layer::Conv(l) => (None, Some(&l.weight), l.bias.as_ref()),
                Layer::Depthwise(l) => (None, Some(&l.weight), l.bias.as_ref()),
                Layer::DoConv(p) => (p.residual.as_ref(), Some(&p.weight), p.bias.as_ref()),
                Layer::Dense(l) => (None, Some(&l.weight), l.bias.as_ref()),
                _ => (None, None, None),
            };
            if let Some(t) = residual {
                out.push((ParamId::new(i, ParamRole::Residual), t));
            }
            if let Some(t) = weight {
                out.push((ParamId::new(i, ParamRole::Weight), t));
            }
            if let Some(t) = bias {
                out.push((ParamId::new(i, ParamRole::Bias), t));
            }
        }
        out
    }

    pub fn param(&self, id: &ParamId) -> Option<&Tensor<T>> {
        self.params().into_iter().find(|(p, _)| p == id).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, id: &ParamId) -> Option<&mut Tensor<T>> {
        let layer = self.layers.get_mut(id.layer)?;
        match (layer, id.role) {
            (Layer::Conv(l), ParamRole::Weight) => Some(&mut l.weight),
            (Layer::Conv(l), ParamRole::Bias) => l.bias.as_mut(),
            (Layer::Depthwise(l), ParamRole::Weight) => Some(&mut l.weight),
            (Layer::Depthwise(l), ParamRole::Bias) => l.bias.as_mut(),
            (Layer::DoConv(p), ParamRole::Weight) => Some(&mut p.weight),
            (Layer::DoConv(p), ParamRole::Residual) => p.residual.as_mut(),
            (Layer::DoConv(p), ParamRole::Bias) => p.bias.as_mut(),
            (Layer::Dense(l), ParamRole::Weight) => Some(&mut l.weight),
            (Layer::Dense(l), ParamRole::Bias) => l.bias.as_mut(),
            _ => None,
        }
    }

    /// Replaces every over-parameterized layer by the single layer it folds to.
    pub fn folded(&self) -> Result<Self> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            layers.push(match layer {
                Layer::DoConv(p) => fold_layer(p)?,
                other => other.clone(),
            });
        }
        Network::new(self.input, layers)
    }

    pub fn is_folded(&self) -> bool {
        !self.layers.iter().any(|l| matches!(l, Layer::DoConv(_)))
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let cb = |b: &Option<Tensor<T>>| b.as_ref().map(|t| t.cast());
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(ConvLayer {
                    geom: c.geom,
                    weight: c.weight.cast(),
                    bias: cb(&c.bias),
                    origin: c.origin,
                }),
                Layer::Depthwise(c) => Layer::Depthwise(DepthwiseLayer {
                    geom: c.geom,
                    weight: c.weight.cast(),
                    bias: cb(&c.bias),
                    origin: c.origin,
                }),
                Layer::DoConv(p) => Layer::DoConv(DoConvParams {
                    kind: p.kind,
                    geom: p.geom,
                    residual: p.residual.as_ref().map(|t| t.cast()),
                    weight: p.weight.cast(),
                    bias: cb(&p.bias),
                }),
                Layer::Relu => Layer::Relu,
                Layer::MaxPool => Layer::MaxPool,
                Layer::Flatten => Layer::Flatten,
                Layer::Dense(d) => Layer::Dense(DenseLayer {
                    weight: d.weight.cast(),
                    bias: cb(&d.bias),
                }),
            })
            .collect();
        Network {
            input: self.input,
            layers,
            classes: self.classes,
        }
    }

    fn prepare(&self, mode: ComposeMode) -> Result<Vec<Option<Tensor<T>>>> {
        self.layers
            .iter()
            .map(|l| match (l, mode) {
                (Layer::DoConv(p), ComposeMode::Kernel) => Ok(Some(p.fold()?.into_weights())),
                _ => Ok(None),
            })
            .collect()
    }

    fn split_batch(&self, batch: &Tensor<T>) -> Result<(usize, usize)> {
        let [h, w, c] = self.input;
        match *batch.dims() {
            [b, bh, bw, bc] if [bh, bw, bc] == [h, w, c] => Ok((b, h * w * c)),
            _ => Err(shape_err!(
                "batch must be [B, {h}, {w}, {c}], got {}",
                batch.shape()
            )),
        }
    }

    /// Logits `[B, classes]` for a batch `[B, H, W, C]`.
    pub fn forward(&self, batch: &Tensor<T>, mode: ComposeMode) -> Result<Tensor<T>> {
        let (b, stride) = self.split_batch(batch)?;
        let prepared = self.prepare(mode)?;
        let rows: Vec<Vec<T>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let x = Tensor::from_vec(self.input.to_vec(), batch.data()[i * stride..(i + 1) * stride].to_vec())?;
                let mut act = x;
                for (layer, folded) in self.layers.iter().zip(&prepared) {
                    act = layer_forward(layer, folded.as_ref(), mode, &act)?;
                }
                Ok(act.into_vec())
            })
            .collect::<Result<_>>()?;
        Tensor::from_vec([b, self.classes], rows.concat())
    }

    /// Mean softmax cross-entropy over the batch, its gradients (kernel
    /// composition) and the logits.
    pub fn loss_and_grads(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<(f64, GradSet<T>, Tensor<T>)> {
        let (b, stride) = self.split_batch(batch)?;
        if labels.len() != b {
            return Err(shape_err!("{} labels for a batch of {b}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.classes) {
            return Err(shape_err!("label {bad} out of range for {} classes", self.classes));
        }
        let prepared = self.prepare(ComposeMode::Kernel)?;
        let scale = T::one() / T::of(b as f64);
        let per_sample: Vec<SampleResult<T>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let x = Tensor::from_vec(self.input.to_vec(), batch.data()[i * stride..(i + 1) * stride].to_vec())?;
                self.sample_pass(&prepared, x, labels[i], scale)
            })
            .collect::<Result<_>>()?;

        // fixed summation order: sample 0, 1, 2, …
        let mut acc: Vec<LayerGrad<T>> = vec![None; self.layers.len()];
        let mut loss = 0.0;
        let mut logits = Vec::with_capacity(b * self.classes);
        for s in per_sample {
            loss += s.loss;
            logits.extend_from_slice(&s.logits);
            for (slot, g) in acc.iter_mut().zip(s.grads) {
                let Some((gw, gb)) = g else { continue };
                match slot {
                    None => *slot = Some((gw, gb)),
                    Some((aw, ab)) => {
                        for (a, v) in aw.iter_mut().zip(&gw) {
                            *a = *a + *v;
                        }
                        if let (Some(ab), Some(gb)) = (ab.as_mut(), gb) {
                            for (a, v) in ab.iter_mut().zip(&gb) {
                                *a = *a + *v;
                            }
                        }
                    }
                }
            }
        }

        let mut grads = GradSet::default();
        for (i, (layer, slot)) in self.layers.iter().zip(acc).enumerate() {
            let Some((gw, gb)) = slot else { continue };
            let (weight_dims, bias_dims) = match layer {
                Layer::Conv(l) => (l.weight.dims().to_vec(), l.bias.as_ref().map(|t| t.dims().to_vec())),
                Layer::Depthwise(l) => (l.weight.dims().to_vec(), l.bias.as_ref().map(|t| t.dims().to_vec())),
                Layer::Dense(l) => (l.weight.dims().to_vec(), l.bias.as_ref().map(|t| t.dims().to_vec())),
                Layer::DoConv(p) => {
                    let folded_dims = prepared[i].as_ref().expect("folded in kernel mode").dims().to_vec();
                    (folded_dims, p.bias.as_ref().map(|t| t.dims().to_vec()))
                }
                _ => continue,
            };
            let gw = Tensor::from_vec(weight_dims, gw)?;
            if let Layer::DoConv(p) = layer {
                let (gd, gw) = p.fold_backward(&gw)?;
                if let Some(gd) = gd {
                    grads.insert(ParamId::new(i, ParamRole::Residual), gd);
                }
                grads.insert(ParamId::new(i, ParamRole::Weight), gw);
            } else {
                grads.insert(ParamId::new(i, ParamRole::Weight), gw);
            }
            if let (Some(dims), Some(gb)) = (bias_dims, gb) {
                grads.insert(ParamId::new(i, ParamRole::Bias), Tensor::from_vec(dims, gb)?);
            }
        }
        Ok((loss / b as f64, grads, Tensor::from_vec([b, self.classes], logits)?))
    }

    fn sample_pass(&self, prepared: &[Option<Tensor<T>>], x: Tensor<T>, label: usize, scale: T) -> Result<SampleResult<T>> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut act = x;
        for (layer, folded) in self.layers.iter().zip(prepared) {
            let next = layer_forward(layer, folded.as_ref(), ComposeMode::Kernel, &act)?;
            inputs.push(act);
            act = next;
        }
        let logits = act.into_vec();
        let (loss, mut upstream) = softmax_cross_entropy(&logits, label);
        upstream.iter_mut().for_each(|g| *g = *g * scale);

        let mut grads = vec![None; self.layers.len()];
        let mut up = upstream;
        for i in (0..self.layers.len()).rev() {
            let need_input = i > 0;
            let (gx, g) = layer_backward(&self.layers[i], prepared[i].as_ref(), &inputs[i], up, need_input)?;
            grads[i] = g;
            match gx {
                Some(gx) => up = gx,
                None => break,
            }
        }
        Ok(SampleResult {
            loss,
            logits,
            grads,
        })
    }
}

struct SampleResult<T> {
    loss: f64,
    logits: Vec<T>,
    /// per layer: (∂weight or ∂W′, ∂bias)
    grads: Vec<LayerGrad<T>>,
}

/// `(loss, ∂loss/∂logits)` for one sample, computed with a max shift.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> (f64, Vec<T>) {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let loss = (sum.ln() + max - logits[label]).as_f64();
    let mut grad: Vec<T> = exps.iter().map(|&e| e / sum).collect();
    grad[label] = grad[label] - T::one();
    (loss, grad)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn add_bias<T: Scalar>(out: &mut [T], bias: Option<&Tensor<T>>) {
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(b.len()) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v = *v + bv;
            }
        }
    }
}

fn layer_forward<T: Scalar>(
    layer: &Layer<T>,
    folded: Option<&Tensor<T>>,
    mode: ComposeMode,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let conv_like = |geom: &ConvGeometry, weight: &Tensor<T>, bias: Option<&Tensor<T>>, depthwise: bool| {
        let (h, w) = (x.dims()[0], x.dims()[1]);
        let (oh, ow) = geom.output_size(h, w)?;
        let out = if depthwise {
            let mut out = depthwise_raw(x.data(), h, w, geom, weight.data(), weight.dims()[1], oh, ow);
            add_bias(&mut out, bias);
            out
        } else {
            conv_raw(x.data(), h, w, geom, weight.data(), bias.map(|b| b.data()), oh, ow)
        };
        Tensor::from_vec([oh, ow, geom.out_channels], out)
    };
    match layer {
        Layer::Conv(l) => conv_like(&l.geom, &l.weight, l.bias.as_ref(), false),
        Layer::Depthwise(l) => conv_like(&l.geom, &l.weight, l.bias.as_ref(), true),
        Layer::DoConv(p) => match (mode, folded) {
            (ComposeMode::Kernel, Some(wf)) => conv_like(
                &p.folded_geometry(),
                wf,
                p.bias.as_ref(),
                p.kind == DoKind::DepthwiseConv,
            ),
            (ComposeMode::Kernel, None) => p.forward_kernel(x),
            (ComposeMode::Feature, _) => p.forward_feature(x),
        },
        Layer::Relu => Ok(x.map(|v| if v > T::zero() { v } else { T::zero() })),
        Layer::MaxPool => {
            let (h, w, c) = (x.dims()[0], x.dims()[1], x.dims()[2]);
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![T::zero(); oh * ow * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        out[(oy * ow + ox) * c + ch] = x.data()[pool_argmax(x.data(), w, c, oy, ox, ch)];
                    }
                }
            }
            Tensor::from_vec([oh, ow, c], out)
        }
        Layer::Flatten => x.reshape([x.len()]),
        Layer::Dense(l) => {
            let (units, inputs) = (l.weight.dims()[0], l.weight.dims()[1]);
            let mut out: Vec<T> = (0..units)
                .map(|u| dot(&l.weight.data()[u * inputs..(u + 1) * inputs], x.data()))
                .collect();
            add_bias(&mut out, l.bias.as_ref());
            Tensor::from_vec([units], out)
        }
    }
}

/// Flat index of the window maximum; the first maximum in scan order wins.
#[inline]
fn pool_argmax<T: Scalar>(x: &[T], w: usize, c: usize, oy: usize, ox: usize, ch: usize) -> usize {
    let mut best = ((2 * oy) * w + 2 * ox) * c + ch;
    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
        let i = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

type LayerGrad<T> = Option<(Vec<T>, Option<Vec<T>>)>;

fn layer_backward<T: Scalar>(
    layer: &Layer<T>,
    folded: Option<&Tensor<T>>,
    x: &Tensor<T>,
    up: Vec<T>,
    need_input: bool,
) -> Result<(Option<Vec<T>>, LayerGrad<T>)> {
    let conv_like = |geom: &ConvGeometry, weight: &Tensor<T>, has_bias: bool, depthwise: bool| {
        let (h, w, c) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let (oh, ow) = geom.output_size(h, w)?;
        let positions = oh * ow;
        let mut cols = vec![T::zero(); positions * geom.spatial() * c];
        im2col(x.data(), h, w, c, geom, oh, ow, &mut cols);
        let mut gk = vec![T::zero(); weight.len()];
        let mut gcols = need_input.then(|| vec![T::zero(); cols.len()]);
        if depthwise {
            depthwise_cols_backward(
                &cols,
                geom.spatial(),
                weight.dims()[1],
                c,
                weight.data(),
                &up,
                positions,
                &mut gk,
                gcols.as_deref_mut(),
            );
        } else {
            conv_cols_backward(&cols, geom, weight.data(), &up, positions, &mut gk, gcols.as_deref_mut());
        }
        let gx = gcols.map(|gc| {
            let mut gx = vec![T::zero(); x.len()];
            col2im(&gc, h, w, c, geom, oh, ow, &mut gx);
            gx
        });
        let gb = has_bias.then(|| bias_grad(&up, geom.out_channels));
        Ok::<_, Error>((gx, Some((gk, gb))))
    };
    match layer {
        Layer::Conv(l) => conv_like(&l.geom, &l.weight, l.bias.is_some(), false),
        Layer::Depthwise(l) => conv_like(&l.geom, &l.weight, l.bias.is_some(), true),
        Layer::DoConv(p) => {
            let wf = folded.ok_or_else(|| Error::Unsupported("backward runs in kernel composition".into()))?;
            conv_like(&p.folded_geometry(), wf, p.bias.is_some(), p.kind == DoKind::DepthwiseConv)
        }
        Layer::Relu => {
            let gx = up
                .iter()
                .zip(x.data())
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect();
            Ok((Some(gx), None))
        }
        Layer::MaxPool => {
            let (w, c) = (x.dims()[1], x.dims()[2]);
            let (oh, ow) = (x.dims()[0] / 2, w / 2);
            let mut gx = vec![T::zero(); x.len()];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let i = pool_argmax(x.data(), w, c, oy, ox, ch);
                        gx[i] = gx[i] + up[(oy * ow + ox) * c + ch];
                    }
                }
            }
            Ok((Some(gx), None))
        }
        Layer::Flatten => Ok((Some(up), None)),
        Layer::Dense(l) => {
            let (units, inputs) = (l.weight.dims()[0], l.weight.dims()[1]);
            let mut gw = vec![T::zero(); units * inputs];
            let mut gx = need_input.then(|| vec![T::zero(); inputs]);
            for (u, &g) in up.iter().enumerate() {
                crate::tensor::axpy(g, x.data(), &mut gw[u * inputs..(u + 1) * inputs]);
                if let Some(gx) = gx.as_mut() {
                    crate::tensor::axpy(g, &l.weight.data()[u * inputs..(u + 1) * inputs], gx);
                }
            }
            let gb = l.bias.as_ref().map(|_| up.clone());
            Ok((gx, Some((gw, gb))))
        }
    }
}

fn conv_layer<T: Scalar>(
    cs: &ConvSpec,
    dims: &[usize],
    over_parameterize: bool,
    w_rng: &mut ChaCha8Rng,
    d_rng: &mut ChaCha8Rng,
) -> Result<Layer<T>> {
    let &[_, _, c_in] = dims else {
        return Err(shape_err!("conv needs an [H, W, C] input, got {dims:?}"));
    };
    let geom = ConvGeometry::conv(cs.kernel, cs.kernel, c_in, cs.out_channels)?
        .with_padding(cs.pad)
        .with_stride(cs.stride)
        .with_groups(cs.groups);
    geom.validate()?;
    let bias = opt_bias(cs.bias, cs.out_channels)?;
    let kind = if cs.groups == 1 { DoKind::Conv } else { DoKind::GroupConv };
    if !over_parameterize || geom.spatial() == 1 {
        let weight = he_tensor(&geom.conv_kernel_dims(), geom.spatial() * geom.in_per_group(), w_rng)?;
        let origin = if over_parameterize {
            ConvOrigin::PointwiseSkipped(kind)
        } else {
            ConvOrigin::Plain
        };
        return Ok(Layer::Conv(ConvLayer {
            geom: geom.with_depth_multiplier(geom.spatial()),
            weight,
            bias,
            origin,
        }));
    }
    let geom = geom.with_depth_multiplier(cs.depth_multiplier.unwrap_or(geom.spatial()));
    let wdims = DoConvParams::<T>::weight_dims(kind, &geom);
    let weight = he_tensor(&wdims, geom.depth_multiplier * geom.in_per_group(), w_rng)?;
    Ok(Layer::DoConv(DoConvParams::init(kind, geom, weight, bias, cs.residual_init, d_rng)?))
}

fn depthwise_layer<T: Scalar>(
    ds: &DepthwiseSpec,
    dims: &[usize],
    over_parameterize: bool,
    w_rng: &mut ChaCha8Rng,
    d_rng: &mut ChaCha8Rng,
) -> Result<Layer<T>> {
    let &[_, _, c] = dims else {
        return Err(shape_err!("depthwise needs an [H, W, C] input, got {dims:?}"));
    };
    let geom = ConvGeometry::depthwise(ds.kernel, ds.kernel, c, ds.multiplier)?
        .with_padding(ds.pad)
        .with_stride(ds.stride);
    let bias = opt_bias(ds.bias, c * ds.multiplier)?;
    if !over_parameterize || geom.spatial() == 1 {
        let weight = he_tensor(&[geom.spatial(), ds.multiplier, c], geom.spatial(), w_rng)?;
        let origin = if over_parameterize {
            ConvOrigin::PointwiseSkipped(DoKind::DepthwiseConv)
        } else {
            ConvOrigin::Plain
        };
        return Ok(Layer::Depthwise(DepthwiseLayer {
            geom,
            weight,
            bias,
            origin,
        }));
    }
    let geom = geom.with_depth_multiplier(ds.depth_multiplier.unwrap_or(geom.spatial()));
    let wdims = DoConvParams::<T>::weight_dims(DoKind::DepthwiseConv, &geom);
    let weight = he_tensor(&wdims, geom.depth_multiplier, w_rng)?;
    Ok(Layer::DoConv(DoConvParams::init(
        DoKind::DepthwiseConv,
        geom,
        weight,
        bias,
        ds.residual_init,
        d_rng,
    )?))
}

fn fold_layer<T: Scalar>(p: &DoConvParams<T>) -> Result<Layer<T>> {
    let geom = p.folded_geometry();
    let weight = p.fold()?.into_weights();
    let origin = ConvOrigin::Folded(p.kind);
    Ok(match p.kind {
        DoKind::DepthwiseConv => Layer::Depthwise(DepthwiseLayer {
            geom,
            weight,
            bias: p.bias.clone(),
            origin,
        }),
        _ => Layer::Conv(ConvLayer {
            geom,
            weight,
            bias: p.bias.clone(),
            origin,
        }),
    })
}
