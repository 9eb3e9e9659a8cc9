//! Depthwise over-parameterized convolution layers.
//!
//! A layer holds a depthwise kernel `D` (`[M×N, D_mul, C_in]`) and a kernel
//! `W` that consumes the `D_mul`-dimensional features `D` produces. Three
//! flavours exist:
//!
//! | kind              | `W` shape                  | folded kernel `W′`         |
//! |-------------------|----------------------------|----------------------------|
//! | [`DoKind::Conv`]  | `[C_out, D_mul, C_in]`     | `[C_out, M×N, C_in]`       |
//! | [`DoKind::GroupConv`] | `[C_out, D_mul, C_in/G]` | `[C_out, M×N, C_in/G]`   |
//! | [`DoKind::DepthwiseConv`] | `[D_mul, Dʷ_mul, C_in]` | `[M×N, Dʷ_mul, C_in]` |
//!
//! `D` is never stored directly. The trainable tensor is the residual
//! `D′ = D − I`, where `I` is the block-identity fill from [`identity_fill`],
//! so weight decay pulls `D` towards identity rather than towards zero.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::{
    conv_cols, depthwise_patch, grouped_conv_forward, depthwise_forward, ConvGeometry, ConvKernel,
    DepthwiseKernel,
};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{feature_map_dims, im2col, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoKind {
    /// over-parameterized conventional convolution (DO-Conv)
    Conv,
    /// over-parameterized depthwise convolution (DO-DConv)
    DepthwiseConv,
    /// over-parameterized grouped convolution (DO-GConv)
    GroupConv,
}

impl fmt::Display for DoKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DoKind::Conv => "DO-Conv",
            DoKind::DepthwiseConv => "DO-DConv",
            DoKind::GroupConv => "DO-GConv",
        })
    }
}

/// How an over-parameterized layer is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComposeMode {
    /// `O = W ∗ (D ∘ P)`: transform every patch, then convolve.
    Feature,
    /// `O = (Dᵀ ∘ W) ∗ P`: fold once, then run a single convolution.
    #[default]
    Kernel,
}

impl fmt::Display for ComposeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ComposeMode::Feature => "feature",
            ComposeMode::Kernel => "kernel",
        })
    }
}

/// Initialization of the residual `D′`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualInit {
    /// `D′ = 0`, so `D` starts as the identity fill and `W′ = W`.
    #[default]
    Identity,
    /// `D` drawn from a zero-mean normal with variance `2 / (M×N)`.
    Random,
}

/// Block-identity fill `[M×N, D_mul, C_in]`.
///
/// Per channel the `(M×N)×D_mul` matrix is `[I | I | … | I₍partial₎]`: whole
/// identity blocks along the `D_mul` axis, then the leading
/// `D_mul mod (M×N)` columns of one more. When `D_mul < M×N` this is the
/// leading `D_mul` columns of a single identity.
pub fn identity_fill<T: Scalar>(spatial: usize, depth_multiplier: usize, channels: usize) -> Result<Tensor<T>> {
    if spatial == 0 || depth_multiplier == 0 || channels == 0 {
        return Err(shape_err!(
            "identity fill needs positive extents, got [{spatial}, {depth_multiplier}, {channels}]"
        ));
    }
    Tensor::from_fn([spatial, depth_multiplier, channels], |i| {
        if i[1] % spatial == i[0] {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Trainable state of one over-parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DoConvParams<T = f64> {
    pub kind: DoKind,
    pub geom: ConvGeometry,
    /// `D′ = D − I`; `None` for `M×N = 1`, where the layer is a plain convolution.
    pub residual: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> DoConvParams<T> {
    /// Validates shapes and the over-parameterization condition `D_mul ≥ M×N`.
    ///
    /// For `M×N = 1` pass `residual = None` and a `D_mul = 1` geometry.
    pub fn new(
        kind: DoKind,
        geom: ConvGeometry,
        residual: Option<Tensor<T>>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    ) -> Result<Self> {
        if geom.spatial() > 1 && geom.depth_multiplier < geom.spatial() {
            return Err(Error::Geometry(format!(
                "D_mul = {} is below M×N = {}; the composite kernel could not express every \
                 convolution (use DoConvParams::separable for that regime)",
                geom.depth_multiplier,
                geom.spatial()
            )));
        }
        Self::separable(kind, geom, residual, weight, bias)
    }

    /// Like [`DoConvParams::new`] but allows `D_mul < M×N`, the
    /// depthwise-separable regime.
    pub fn separable(
        kind: DoKind,
        geom: ConvGeometry,
        residual: Option<Tensor<T>>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    ) -> Result<Self> {
        geom.validate()?;
        let params = DoConvParams {
            kind,
            geom,
            residual,
            weight,
            bias,
        };
        params.check_shapes()?;
        Ok(params)
    }

    /// Builds a layer around a caller-supplied `W`. `M×N = 1` geometries
    /// become plain convolutions with `D_mul = 1` and no residual.
    pub fn init<R: Rng + ?Sized>(
        kind: DoKind,
        geom: ConvGeometry,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        residual_init: ResidualInit,
        rng: &mut R,
    ) -> Result<Self> {
        if geom.spatial() == 1 {
            let geom = geom.with_depth_multiplier(1);
            return Self::new(kind, geom, None, weight, bias);
        }
        let residual = match residual_init {
            ResidualInit::Identity => {
                Tensor::zeros([geom.spatial(), geom.depth_multiplier, geom.in_channels])?
            }
            ResidualInit::Random => random_residual(&geom, rng)?,
        };
        Self::separable(kind, geom, Some(residual), weight, bias)
    }

    /// Shape `W` must have for `kind` and `geom`.
    pub fn weight_dims(kind: DoKind, geom: &ConvGeometry) -> [usize; 3] {
        match kind {
            DoKind::Conv | DoKind::GroupConv => [geom.out_channels, geom.depth_multiplier, geom.in_per_group()],
            DoKind::DepthwiseConv => [
                geom.depth_multiplier,
                geom.out_channels / geom.in_channels,
                geom.in_channels,
            ],
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let g = &self.geom;
        match self.kind {
            DoKind::Conv if g.groups != 1 => {
                return Err(Error::Geometry(format!("DO-Conv needs groups = 1, got {}", g.groups)));
            }
            DoKind::DepthwiseConv if g.groups != g.in_channels || !g.out_channels.is_multiple_of(g.in_channels) => {
                return Err(Error::Geometry(format!(
                    "DO-DConv needs groups = C_in and C_out a multiple of C_in, got {}→{} in {} groups",
                    g.in_channels, g.out_channels, g.groups
                )));
            }
            _ => {}
        }
        match (&self.residual, g.spatial()) {
            (None, 1) if g.depth_multiplier != 1 => {
                return Err(Error::Geometry("a 1×1 layer without D must have D_mul = 1".into()));
            }
            (None, s) if s > 1 => {
                return Err(shape_err!("residual D′ is required for a {}×{} kernel", g.kernel_h, g.kernel_w));
            }
            (Some(r), _) => r.expect_dims(&[g.spatial(), g.depth_multiplier, g.in_channels], "residual D′")?,
            _ => {}
        }
        self.weight.expect_dims(&Self::weight_dims(self.kind, g), "W")?;
        if let Some(b) = &self.bias {
            b.expect_dims(&[g.out_channels], "bias")?;
        }
        Ok(())
    }

    /// `true` when `M×N = 1` and the layer is an ordinary convolution.
    pub fn is_pointwise(&self) -> bool {
        self.residual.is_none()
    }

    /// Effective depthwise kernel `D = D′ + I`.
    pub fn effective_d(&self) -> Result<Option<Tensor<T>>> {
        let Some(residual) = &self.residual else {
            return Ok(None);
        };
        let g = &self.geom;
        let fill = identity_fill::<T>(g.spatial(), g.depth_multiplier, g.in_channels)?;
        Ok(Some(residual.add(&fill)?))
    }

    /// Geometry of the single layer that replaces this one after folding.
    pub fn folded_geometry(&self) -> ConvGeometry {
        self.geom.with_depth_multiplier(match self.kind {
            DoKind::DepthwiseConv => self.geom.out_channels / self.geom.in_channels,
            _ => self.geom.spatial(),
        })
    }

    fn bias_slice(&self) -> Option<&[T]> {
        self.bias.as_ref().map(|b| b.data())
    }

    /// Folds `D` into `W`, producing the inference kernel `W′`.
    pub fn fold(&self) -> Result<FoldedKernel<T>> {
        let g = &self.geom;
        let Some(d) = self.effective_d()? else {
            return Ok(match self.kind {
                DoKind::DepthwiseConv => FoldedKernel::Depthwise(DepthwiseKernel {
                    weights: self.weight.clone(),
                }),
                _ => FoldedKernel::Conv(ConvKernel {
                    weights: self.weight.clone(),
                }),
            });
        };
        let (s, dm, c) = (g.spatial(), g.depth_multiplier, g.in_channels);
        let dd = d.data();
        let w = self.weight.data();
        match self.kind {
            DoKind::Conv | DoKind::GroupConv => {
                // W′[o,j,l] = Σ_k D[j,k,λ(o,l)]·W[o,k,l]
                let (c_out, cg, og) = (g.out_channels, g.in_per_group(), g.out_per_group());
                let mut out = vec![T::zero(); c_out * s * cg];
                for o in 0..c_out {
                    let base_ch = (o / og) * cg;
                    for j in 0..s {
                        for l in 0..cg {
                            let ch = base_ch + l;
                            let mut acc = T::zero();
                            for k in 0..dm {
                                acc = acc + dd[(j * dm + k) * c + ch] * w[(o * dm + k) * cg + l];
                            }
                            out[(o * s + j) * cg + l] = acc;
                        }
                    }
                }
                Ok(FoldedKernel::Conv(ConvKernel {
                    weights: Tensor::from_vec([c_out, s, cg], out)?,
                }))
            }
            DoKind::DepthwiseConv => {
                // W′[j,d,c] = Σ_k D[j,k,c]·W[k,d,c]
                let dw = g.out_channels / c;
                let mut out = vec![T::zero(); s * dw * c];
                for j in 0..s {
                    for d_out in 0..dw {
                        for ch in 0..c {
                            let mut acc = T::zero();
                            for k in 0..dm {
                                acc = acc + dd[(j * dm + k) * c + ch] * w[(k * dw + d_out) * c + ch];
                            }
                            out[(j * dw + d_out) * c + ch] = acc;
                        }
                    }
                }
                Ok(FoldedKernel::Depthwise(DepthwiseKernel {
                    weights: Tensor::from_vec([s, dw, c], out)?,
                }))
            }
        }
    }

    /// Pulls a gradient with respect to `W′` back onto `(D′, W)`.
    ///
    /// Returns `(∂D′, ∂W)`; `∂D′` is `None` for pointwise layers. Since the
    /// identity fill is constant, `∂D′ = ∂D`.
    pub fn fold_backward(&self, folded_grad: &Tensor<T>) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
        let g = &self.geom;
        let Some(d) = self.effective_d()? else {
            self.weight.expect_same_shape(folded_grad)?;
            return Ok((None, folded_grad.clone()));
        };
        let (s, dm, c) = (g.spatial(), g.depth_multiplier, g.in_channels);
        let dd = d.data();
        let w = self.weight.data();
        let gw = folded_grad.data();
        let mut grad_d = vec![T::zero(); s * dm * c];
        let mut grad_w = vec![T::zero(); self.weight.len()];
        match self.kind {
            DoKind::Conv | DoKind::GroupConv => {
                let (c_out, cg, og) = (g.out_channels, g.in_per_group(), g.out_per_group());
                folded_grad.expect_dims(&[c_out, s, cg], "∂W′")?;
                for o in 0..c_out {
                    let base_ch = (o / og) * cg;
                    for j in 0..s {
                        for l in 0..cg {
                            let ch = base_ch + l;
                            let up = gw[(o * s + j) * cg + l];
                            for k in 0..dm {
                                let di = (j * dm + k) * c + ch;
                                let wi = (o * dm + k) * cg + l;
                                grad_w[wi] = grad_w[wi] + up * dd[di];
                                grad_d[di] = grad_d[di] + up * w[wi];
                            }
                        }
                    }
                }
            }
            DoKind::DepthwiseConv => {
                let dw = g.out_channels / c;
                folded_grad.expect_dims(&[s, dw, c], "∂W′")?;
                for j in 0..s {
                    for d_out in 0..dw {
                        for ch in 0..c {
                            let up = gw[(j * dw + d_out) * c + ch];
                            for k in 0..dm {
                                let di = (j * dm + k) * c + ch;
                                let wi = (k * dw + d_out) * c + ch;
                                grad_w[wi] = grad_w[wi] + up * dd[di];
                                grad_d[di] = grad_d[di] + up * w[wi];
                            }
                        }
                    }
                }
            }
        }
        Ok((
            Some(Tensor::from_vec([s, dm, c], grad_d)?),
            Tensor::from_vec(self.weight.dims().to_vec(), grad_w)?,
        ))
    }

    pub fn forward(&self, x: &Tensor<T>, mode: ComposeMode) -> Result<Tensor<T>> {
        match mode {
            ComposeMode::Feature => self.forward_feature(x),
            ComposeMode::Kernel => self.forward_kernel(x),
        }
    }

    /// Kernel composition: fold once, then run the plain operator.
    pub fn forward_kernel(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let geom = self.folded_geometry();
        match self.fold()? {
            FoldedKernel::Conv(k) => grouped_conv_forward(x, &k, &geom, self.bias_slice()),
            FoldedKernel::Depthwise(k) => {
                let mut y = depthwise_forward(x, &k, &geom)?;
                add_channel_bias(&mut y, self.bias_slice());
                Ok(y)
            }
        }
    }

    /// Feature composition: `P′ = D ∘ P` for every patch, then `W` applied
    /// with the `D_mul` axis in place of the spatial patch axis.
    pub fn forward_feature(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = &self.geom;
        let (h, w, c) = feature_map_dims(x)?;
        if c != g.in_channels {
            return Err(shape_err!("input has {c} channels, layer expects {}", g.in_channels));
        }
        let Some(d) = self.effective_d()? else {
            return self.forward_kernel(x);
        };
        let (out_h, out_w) = g.output_size(h, w)?;
        let positions = out_h * out_w;
        let (s, dm) = (g.spatial(), g.depth_multiplier);

        let mut cols = vec![T::zero(); positions * s * c];
        im2col(x.data(), h, w, c, g, out_h, out_w, &mut cols);

        // P′ per position, laid out [D_mul, C_in] so W reads it like a patch
        let mut transformed = vec![T::zero(); positions * dm * c];
        let mut by_channel = vec![T::zero(); dm * c];
        for p in 0..positions {
            depthwise_patch(&cols[p * s * c..(p + 1) * s * c], d.data(), s, dm, c, &mut by_channel);
            let dst = &mut transformed[p * dm * c..(p + 1) * dm * c];
            for ch in 0..c {
                for k in 0..dm {
                    dst[k * c + ch] = by_channel[ch * dm + k];
                }
            }
        }

        let out = match self.kind {
            DoKind::Conv | DoKind::GroupConv => {
                let over_taps = ConvGeometry {
                    kernel_h: dm,
                    kernel_w: 1,
                    ..*g
                };
                conv_cols(&transformed, &over_taps, self.weight.data(), self.bias_slice(), positions)
            }
            DoKind::DepthwiseConv => {
                let dw = g.out_channels / c;
                let mut out = vec![T::zero(); positions * c * dw];
                for (p, row) in out.chunks_exact_mut(c * dw).enumerate() {
                    depthwise_patch(&transformed[p * dm * c..(p + 1) * dm * c], self.weight.data(), dm, dw, c, row);
                }
                if let Some(b) = self.bias_slice() {
                    for row in out.chunks_exact_mut(c * dw) {
                        for (v, &bv) in row.iter_mut().zip(b) {
                            *v = *v + bv;
                        }
                    }
                }
                out
            }
        };
        Tensor::from_vec([out_h, out_w, g.out_channels], out)
    }

    /// Per-channel fold matrix: column `k` of channel `c` is `D[:, k, c]`.
    ///
    /// For every output channel the fold applies this `(M×N)×D_mul` matrix to
    /// the `D_mul`-vector `W[o, :, l]`, so its rank bounds what `W′` can reach.
    pub fn fold_matrix(&self, channel: usize) -> Result<Tensor<T>> {
        let d = self
            .effective_d()?
            .ok_or_else(|| Error::Unsupported("a pointwise layer has no D".into()))?;
        let (s, dm, c) = (self.geom.spatial(), self.geom.depth_multiplier, self.geom.in_channels);
        if channel >= c {
            return Err(shape_err!("channel {channel} out of range for {c} channels"));
        }
        Tensor::from_fn([s, dm], |i| d.data()[(i[0] * dm + i[1]) * c + channel])
    }
}

fn add_channel_bias<T: Scalar>(y: &mut Tensor<T>, bias: Option<&[T]>) {
    if let Some(b) = bias {
        let c = b.len();
        for row in y.data_mut().chunks_exact_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v = *v + bv;
            }
        }
    }
}

fn random_residual<T: Scalar, R: Rng + ?Sized>(geom: &ConvGeometry, rng: &mut R) -> Result<Tensor<T>> {
    let (s, dm, c) = (geom.spatial(), geom.depth_multiplier, geom.in_channels);
    let std = (2.0 / s as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::Numeric(e.to_string()))?;
    let d: Tensor<T> = Tensor::from_fn([s, dm, c], |_| T::of(normal.sample(rng)))?;
    d.sub(&identity_fill(s, dm, c)?)
}

/// The single kernel an over-parameterized layer reduces to.
#[derive(Debug, Clone, PartialEq)]
pub enum FoldedKernel<T = f64> {
    /// `[C_out, M×N, C_in/G]` for DO-Conv and DO-GConv
    Conv(ConvKernel<T>),
    /// `[M×N, Dʷ_mul, C_in]` for DO-DConv
    Depthwise(DepthwiseKernel<T>),
}

impl<T: Scalar> FoldedKernel<T> {
    pub fn weights(&self) -> &Tensor<T> {
        match self {
            FoldedKernel::Conv(k) => &k.weights,
            FoldedKernel::Depthwise(k) => &k.weights,
        }
    }

    pub fn into_weights(self) -> Tensor<T> {
        match self {
            FoldedKernel::Conv(k) => k.weights,
            FoldedKernel::Depthwise(k) => k.weights,
        }
    }
}

/// `W′` for the given parameters.
pub fn fold_kernel<T: Scalar>(p: &DoConvParams<T>) -> Result<FoldedKernel<T>> {
    p.fold()
}

pub fn doconv_forward_feature<T: Scalar>(p: &DoConvParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    p.forward_feature(x)
}

pub fn doconv_forward_kernel<T: Scalar>(p: &DoConvParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    p.forward_kernel(x)
}

/// DO-DConv forward in either composition mode.
pub fn dodconv_forward<T: Scalar>(p: &DoConvParams<T>, x: &Tensor<T>, mode: ComposeMode) -> Result<Tensor<T>> {
    if p.kind != DoKind::DepthwiseConv {
        return Err(Error::Unsupported(format!("dodconv_forward called on a {} layer", p.kind)));
    }
    p.forward(x, mode)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaccStep {
    pub description: String,
    pub macc: u64,
}

/// Multiply-accumulate counts for one composition mode over a full feature map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaccReport {
    pub mode: ComposeMode,
    pub steps: Vec<MaccStep>,
    pub total: u64,
}

/// MACC cost of training-time evaluation on an `H×W` map with stride 1.
///
/// Feature composition: `D_mul·(M×N)·C_in·(H·W)` to transform every patch,
/// then `C_out·C_in·H·W·D_mul`. Kernel composition:
/// `D_mul·(M×N)·C_in·C_out` to fold, then `C_out·C_in·H·W·(M×N)`. For
/// grouped layers every `W`-side term uses `C_in/G` in place of `C_in`.
pub fn macc_estimate(geom: &ConvGeometry, mode: ComposeMode, h: usize, w: usize) -> Result<MaccReport> {
    geom.validate()?;
    if geom.stride != 1 {
        return Err(Error::Unsupported(format!(
            "MACC formulas assume stride 1, got stride {}",
            geom.stride
        )));
    }
    let (mn, dm) = (geom.spatial() as u64, geom.depth_multiplier as u64);
    let (c_in, c_out, cg) = (geom.in_channels as u64, geom.out_channels as u64, geom.in_per_group() as u64);
    let hw = (h as u64) * (w as u64);
    let steps = match mode {
        ComposeMode::Feature => vec![
            MaccStep {
                description: "P' = D o P".into(),
                macc: dm * mn * c_in * hw,
            },
            MaccStep {
                description: "O = W * P'".into(),
                macc: c_out * cg * hw * dm,
            },
        ],
        ComposeMode::Kernel => vec![
            MaccStep {
                description: "W' = D^T o W".into(),
                macc: dm * mn * cg * c_out,
            },
            MaccStep {
                description: "O = W' * P".into(),
                macc: c_out * cg * hw * mn,
            },
        ],
    };
    let total = steps.iter().map(|s| s.macc).sum();
    Ok(MaccReport { mode, steps, total })
}

/// Cost of a plain convolution with this geometry: `C_out·(C_in/G)·H·W·(M×N)`.
pub fn conv_macc(geom: &ConvGeometry, h: usize, w: usize) -> u64 {
    (geom.out_channels * geom.in_per_group() * geom.spatial()) as u64 * (h * w) as u64
}

/// Inference cost after folding: every element of `W′` is used once per
/// output position.
pub fn folded_inference_macc<T: Scalar>(p: &DoConvParams<T>, h: usize, w: usize) -> Result<u64> {
    Ok(p.fold()?.weights().len() as u64 * (h * w) as u64)
}

/// Accumulated absolute difference between `W′` and `W` at every spatial
/// position: `H[m,n] = Σ_{o,l} |W′[o, m·N+n, l] − W[o, m·N+n, l]|`.
pub fn kernel_delta_h<T: Scalar>(p: &DoConvParams<T>) -> Result<Tensor<T>> {
    if p.kind == DoKind::DepthwiseConv {
        return Err(Error::Unsupported("kernel delta is defined for DO-Conv layers".into()));
    }
    if p.geom.depth_multiplier != p.geom.spatial() {
        return Err(Error::Unsupported(format!(
            "kernel delta needs D_mul = M×N so W and W′ align, got D_mul = {} and M×N = {}",
            p.geom.depth_multiplier,
            p.geom.spatial()
        )));
    }
    let folded = p.fold()?.into_weights();
    let g = &p.geom;
    let (s, cg) = (g.spatial(), g.in_per_group());
    let mut h = vec![T::zero(); s];
    for o in 0..g.out_channels {
        for (j, hj) in h.iter_mut().enumerate() {
            for l in 0..cg {
                let i = (o * s + j) * cg + l;
                *hj = *hj + (folded.data()[i] - p.weight.data()[i]).abs();
            }
        }
    }
    Tensor::from_vec([g.kernel_h, g.kernel_w], h)
}

/// Numerical rank of a row-major `rows × cols` matrix by Gaussian
/// elimination with partial pivoting.
pub fn matrix_rank(m: &Tensor<f64>, tol: f64) -> Result<usize> {
    let &[rows, cols] = m.dims() else {
        return Err(shape_err!("rank needs a matrix, got {}", m.shape()));
    };
    let mut a = m.data().to_vec();
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let pivot = (rank..rows)
            .max_by(|&x, &y| a[x * cols + col].abs().total_cmp(&a[y * cols + col].abs()))
            .unwrap();
        if a[pivot * cols + col].abs() <= tol {
            continue;
        }
        for k in 0..cols {
            a.swap(rank * cols + k, pivot * cols + k);
        }
        for r in rank + 1..rows {
            let f = a[r * cols + col] / a[rank * cols + col];
            for k in col..cols {
                a[r * cols + k] -= f * a[rank * cols + k];
            }
        }
        rank += 1;
    }
    Ok(rank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv_forward;
    use crate::tensor::extract_patches;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn random_conv(
        geom: ConvGeometry,
        kind: DoKind,
        rng: &mut ChaCha8Rng,
    ) -> DoConvParams<f64> {
        let residual = rand_tensor(&[geom.spatial(), geom.depth_multiplier, geom.in_channels], rng);
        let weight = rand_tensor(&DoConvParams::<f64>::weight_dims(kind, &geom), rng);
        DoConvParams::separable(kind, geom, Some(residual), weight, None).unwrap()
    }

    #[test]
    fn identity_fill_square() {
        let d = identity_fill::<f64>(9, 9, 2).unwrap();
        for j in 0..9 {
            for k in 0..9 {
                for c in 0..2 {
                    assert_eq!(d.get(&[j, k, c]), if j == k { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn identity_fill_two_blocks() {
        let d = identity_fill::<f64>(4, 8, 1).unwrap();
        let expect = |j: usize, k: usize| if k % 4 == j { 1.0 } else { 0.0 };
        for j in 0..4 {
            for k in 0..8 {
                assert_eq!(d.get(&[j, k, 0]), expect(j, k));
            }
        }
    }

    #[test]
    fn identity_fill_partial_block_uses_leading_columns() {
        let d = identity_fill::<f64>(4, 6, 1).unwrap();
        let rows: Vec<Vec<f64>> = (0..4).map(|j| (0..6).map(|k| d.get(&[j, k, 0])).collect()).collect();
        assert_eq!(rows[0], [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(rows[1], [0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(rows[2], [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(rows[3], [0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_fill_rejects_zero() {
        assert!(identity_fill::<f64>(0, 3, 1).is_err());
    }

    #[test]
    fn identity_residual_folds_to_w_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let geom = ConvGeometry::conv(3, 3, 3, 4).unwrap();
        let w = rand_tensor(&[4, 9, 3], &mut rng);
        let p = DoConvParams::init(DoKind::Conv, geom, w.clone(), None, ResidualInit::Identity, &mut rng).unwrap();
        assert_eq!(p.fold().unwrap().weights(), &w);
    }

    #[test]
    fn fold_two_by_two_hand_value() {
        // D_{j,k} = [[1,2],[3,4]], W = [5,7] → W′_j = Σ_k D_{j,k} W_k = [19, 43]
        let geom = ConvGeometry::conv(1, 2, 1, 1).unwrap();
        let d = Tensor::from_vec([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let residual = d.sub(&identity_fill(2, 2, 1).unwrap()).unwrap();
        let w = Tensor::from_vec([1, 2, 1], vec![5.0, 7.0]).unwrap();
        let p = DoConvParams::new(DoKind::Conv, geom, Some(residual), w, None).unwrap();
        assert_eq!(p.fold().unwrap().weights().data(), &[19.0, 43.0]);
    }

    #[test]
    fn zero_w_folds_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let geom = ConvGeometry::conv(2, 2, 2, 3).unwrap().with_depth_multiplier(6);
        let mut p = random_conv(geom, DoKind::Conv, &mut rng);
        p.weight = Tensor::zeros(p.weight.dims().to_vec()).unwrap();
        assert!(p.fold().unwrap().weights().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn condition_enforced_unless_separable() {
        let geom = ConvGeometry::conv(2, 2, 1, 1).unwrap().with_depth_multiplier(3);
        let r = Tensor::<f64>::zeros([4, 3, 1]).unwrap();
        let w = Tensor::<f64>::zeros([1, 3, 1]).unwrap();
        assert!(matches!(
            DoConvParams::new(DoKind::Conv, geom, Some(r.clone()), w.clone(), None),
            Err(Error::Geometry(_))
        ));
        assert!(DoConvParams::separable(DoKind::Conv, geom, Some(r), w, None).is_ok());
    }

    #[test]
    fn pointwise_layer_skips_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geom = ConvGeometry::conv(1, 1, 3, 2).unwrap();
        let w = rand_tensor(&[2, 1, 3], &mut rng);
        let p = DoConvParams::init(DoKind::Conv, geom, w, None, ResidualInit::Identity, &mut rng).unwrap();
        assert!(p.is_pointwise());
        let x = rand_tensor(&[3, 3, 3], &mut rng);
        let plain = conv_forward(&x, &ConvKernel::new(p.weight.clone(), &geom).unwrap(), &geom, None).unwrap();
        assert_eq!(p.forward_feature(&x).unwrap(), plain);
        assert_eq!(p.forward_kernel(&x).unwrap(), plain);
    }

    #[test]
    fn identity_feature_path_matches_plain_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let geom = ConvGeometry::conv(3, 3, 2, 3).unwrap().with_padding(1);
        let w = rand_tensor(&[3, 9, 2], &mut rng);
        let p = DoConvParams::init(DoKind::Conv, geom, w.clone(), None, ResidualInit::Identity, &mut rng).unwrap();
        let x = rand_tensor(&[5, 5, 2], &mut rng);
        let plain = conv_forward(&x, &ConvKernel::new(w, &geom).unwrap(), &geom, None).unwrap();
        assert!(p.forward_feature(&x).unwrap().max_abs_diff(&plain).unwrap() <= 1e-12);
        assert_eq!(p.forward_kernel(&x).unwrap(), plain);
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_conv(ConvGeometry::conv(2, 2, 2, 2).unwrap(), DoKind::Conv, &mut rng);
        let x = Tensor::zeros([3, 3, 2]).unwrap();
        for mode in [ComposeMode::Feature, ComposeMode::Kernel] {
            assert!(p.forward(&x, mode).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn modes_agree_on_reference_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_conv(ConvGeometry::conv(3, 3, 4, 5).unwrap(), DoKind::Conv, &mut rng);
        let x = rand_tensor(&[6, 6, 4], &mut rng);
        let a = p.forward_feature(&x).unwrap();
        let b = p.forward_kernel(&x).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn single_patch_is_folded_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let geom = ConvGeometry::conv(2, 3, 2, 3).unwrap().with_depth_multiplier(8);
        let p = random_conv(geom, DoKind::Conv, &mut rng);
        let x = rand_tensor(&[2, 3, 2], &mut rng);
        let y = p.forward_kernel(&x).unwrap();
        let wf = p.fold().unwrap().into_weights();
        for c in 0..3 {
            let expect: f64 = (0..12).map(|i| wf.data()[c * 12 + i] * x.data()[i]).sum();
            assert!((y.data()[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn dodconv_identity_matches_depthwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let geom = ConvGeometry::depthwise(2, 2, 3, 1).unwrap().with_depth_multiplier(4);
        let w = rand_tensor(&[4, 1, 3], &mut rng);
        let p = DoConvParams::init(DoKind::DepthwiseConv, geom, w.clone(), None, ResidualInit::Identity, &mut rng).unwrap();
        let x = rand_tensor(&[4, 4, 3], &mut rng);
        let dw_geom = ConvGeometry::depthwise(2, 2, 3, 1).unwrap();
        let plain = depthwise_forward(&x, &DepthwiseKernel::new(w, &dw_geom).unwrap(), &dw_geom).unwrap();
        for mode in [ComposeMode::Feature, ComposeMode::Kernel] {
            assert!(dodconv_forward(&p, &x, mode).unwrap().max_abs_diff(&plain).unwrap() <= 1e-14);
        }
    }

    #[test]
    fn dodconv_modes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for dw in 1..=3 {
            let geom = ConvGeometry::depthwise(3, 2, 2, dw).unwrap().with_depth_multiplier(7).with_padding(1);
            let p = random_conv(geom, DoKind::DepthwiseConv, &mut rng);
            let x = rand_tensor(&[4, 5, 2], &mut rng);
            let a = dodconv_forward(&p, &x, ComposeMode::Feature).unwrap();
            let b = dodconv_forward(&p, &x, ComposeMode::Kernel).unwrap();
            assert_eq!(a.dims(), &[4, 6, 2 * dw]);
            assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn dodconv_rejects_other_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random_conv(ConvGeometry::conv(2, 2, 1, 1).unwrap(), DoKind::Conv, &mut rng);
        let x = rand_tensor(&[2, 2, 1], &mut rng);
        assert!(matches!(dodconv_forward(&p, &x, ComposeMode::Kernel), Err(Error::Unsupported(_))));
    }

    #[test]
    fn gconv_with_one_group_is_doconv() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let geom = ConvGeometry::conv(3, 3, 2, 3).unwrap().with_padding(1);
        let conv = random_conv(geom, DoKind::Conv, &mut rng);
        let gconv = DoConvParams {
            kind: DoKind::GroupConv,
            ..conv.clone()
        };
        let x = rand_tensor(&[4, 4, 2], &mut rng);
        for mode in [ComposeMode::Feature, ComposeMode::Kernel] {
            assert_eq!(conv.forward(&x, mode).unwrap(), gconv.forward(&x, mode).unwrap());
        }
    }

    #[test]
    fn fully_grouped_gconv_reproduces_dodconv() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (c, dw, dm) = (3, 2, 5);
        let d_geom = ConvGeometry::depthwise(2, 2, c, dw).unwrap().with_depth_multiplier(dm);
        let dconv = random_conv(d_geom, DoKind::DepthwiseConv, &mut rng);
        // W_g[c·Dʷ + d, k, 0] = W_d[k, d, c]
        let wg = Tensor::from_fn([c * dw, dm, 1], |i| dconv.weight.get(&[i[1], i[0] % dw, i[0] / dw])).unwrap();
        let g_geom = ConvGeometry::conv(2, 2, c, c * dw).unwrap().with_groups(c).with_depth_multiplier(dm);
        let gconv = DoConvParams::new(DoKind::GroupConv, g_geom, dconv.residual.clone(), wg, None).unwrap();
        let x = rand_tensor(&[3, 4, c], &mut rng);
        for mode in [ComposeMode::Feature, ComposeMode::Kernel] {
            let a = dconv.forward(&x, mode).unwrap();
            let b = gconv.forward(&x, mode).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn random_init_changes_d_but_not_w() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let geom = ConvGeometry::conv(3, 3, 2, 2).unwrap();
        let w = rand_tensor(&[2, 9, 2], &mut rng);
        let p = DoConvParams::init(DoKind::Conv, geom, w.clone(), None, ResidualInit::Random, &mut rng).unwrap();
        assert_eq!(p.weight, w);
        let d = p.effective_d().unwrap().unwrap();
        let fill = identity_fill::<f64>(9, 9, 2).unwrap();
        assert!(d.max_abs_diff(&fill).unwrap() > 0.1);
    }

    #[test]
    fn macc_reference_geometry() {
        let geom = ConvGeometry::conv(3, 3, 16, 32).unwrap();
        let f = macc_estimate(&geom, ComposeMode::Feature, 8, 8).unwrap();
        let k = macc_estimate(&geom, ComposeMode::Kernel, 8, 8).unwrap();
        assert_eq!(f.steps[0].macc, 82_944);
        assert_eq!(f.steps[1].macc, 294_912);
        assert_eq!(k.steps[0].macc, 41_472);
        assert_eq!(k.steps[1].macc, 294_912);
        assert_eq!(f.total, 377_856);
        assert_eq!(k.total, 336_384);
        assert!(k.total < f.total);
        assert_eq!(conv_macc(&geom, 8, 8), 294_912);
    }

    #[test]
    fn macc_totals_coincide_in_symmetric_case() {
        // step costs swap H·W for C_out and D_mul for M×N
        for (h, w, c_out) in [(1, 1, 1), (2, 2, 4), (3, 2, 6)] {
            let geom = ConvGeometry::conv(2, 2, 3, c_out).unwrap();
            let f = macc_estimate(&geom, ComposeMode::Feature, h, w).unwrap();
            let k = macc_estimate(&geom, ComposeMode::Kernel, h, w).unwrap();
            assert_eq!(f.total, k.total);
        }
        let geom = ConvGeometry::conv(2, 2, 3, 4).unwrap();
        let f = macc_estimate(&geom, ComposeMode::Feature, 1, 1).unwrap();
        let k = macc_estimate(&geom, ComposeMode::Kernel, 1, 1).unwrap();
        assert_eq!((f.total, k.total), (96, 240));
    }

    #[test]
    fn macc_rejects_stride() {
        let geom = ConvGeometry::conv(3, 3, 1, 1).unwrap().with_stride(2);
        assert!(matches!(macc_estimate(&geom, ComposeMode::Kernel, 8, 8), Err(Error::Unsupported(_))));
    }

    #[test]
    fn folded_cost_equals_plain_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let geom = ConvGeometry::conv(3, 3, 4, 6).unwrap().with_depth_multiplier(11);
        let p = random_conv(geom, DoKind::Conv, &mut rng);
        assert_eq!(folded_inference_macc(&p, 7, 5).unwrap(), conv_macc(&geom, 7, 5));
    }

    #[test]
    fn delta_is_zero_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let geom = ConvGeometry::conv(3, 3, 2, 2).unwrap();
        let w = rand_tensor(&[2, 9, 2], &mut rng);
        let p = DoConvParams::init(DoKind::Conv, geom, w, None, ResidualInit::Identity, &mut rng).unwrap();
        let h = kernel_delta_h(&p).unwrap();
        assert_eq!(h.dims(), &[3, 3]);
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_hand_value() {
        // W = [1,1], D = [[1,1],[0,1]] → W′ = [2,1], H = [1,0]
        let geom = ConvGeometry::conv(1, 2, 1, 1).unwrap();
        let d = Tensor::from_vec([2, 2, 1], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let residual = d.sub(&identity_fill(2, 2, 1).unwrap()).unwrap();
        let w = Tensor::from_vec([1, 2, 1], vec![1.0, 1.0]).unwrap();
        let p = DoConvParams::new(DoKind::Conv, geom, Some(residual), w, None).unwrap();
        assert_eq!(p.fold().unwrap().weights().data(), &[2.0, 1.0]);
        assert_eq!(kernel_delta_h(&p).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn delta_needs_square_multiplier() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let p = random_conv(ConvGeometry::conv(2, 2, 1, 1).unwrap().with_depth_multiplier(5), DoKind::Conv, &mut rng);
        assert!(matches!(kernel_delta_h(&p), Err(Error::Unsupported(_))));
        let p = random_conv(ConvGeometry::conv(2, 2, 1, 1).unwrap(), DoKind::Conv, &mut rng);
        assert!(kernel_delta_h(&p).unwrap().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rank_of_known_matrices() {
        let id = Tensor::from_fn([4, 4], |i| if i[0] == i[1] { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(matrix_rank(&id, 1e-10).unwrap(), 4);
        let r1 = Tensor::from_fn([3, 3], |i| ((i[0] + 1) * (i[1] + 1)) as f64).unwrap();
        assert_eq!(matrix_rank(&r1, 1e-10).unwrap(), 1);
        let wide = Tensor::from_fn([4, 3], |i| if i[0] == i[1] { 2.0 } else { 0.0 }).unwrap();
        assert_eq!(matrix_rank(&wide, 1e-10).unwrap(), 3);
    }

    #[test]
    fn receptive_field_is_kernel_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = random_conv(ConvGeometry::conv(3, 3, 1, 2).unwrap(), DoKind::Conv, &mut rng);
        let x = rand_tensor(&[5, 5, 1], &mut rng);
        let patches = extract_patches(&x, &p.geom).unwrap();
        assert_eq!(patches.count(), 9);
        for mode in [ComposeMode::Feature, ComposeMode::Kernel] {
            let base = p.forward(&x, mode).unwrap();
            let mut xp = x.clone();
            xp.set(&[4, 4, 0], 50.0);
            let y = p.forward(&xp, mode).unwrap();
            // output (0,0) reads rows/cols 0..3 only
            assert_eq!(y.get(&[0, 0, 0]), base.get(&[0, 0, 0]));
            assert_ne!(y.get(&[2, 2, 0]), base.get(&[2, 2, 0]));
        }
    }
}
