//! Reference conventional, depthwise and grouped convolution.
//!
//! All operators work on channels-last feature maps `[H, W, C]` and evaluate
//! each output as a dot product over one `[(M×N), C]` patch, summing in a
//! fixed order so results are reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{dot, feature_map_dims, im2col, output_extent, Scalar, Tensor};

/// Layer shape parameters: kernel extents `M×N`, channel counts, stride,
/// zero padding, groups and depth multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub depth_multiplier: usize,
}

impl ConvGeometry {
    /// Ungrouped convolution, stride 1, no padding, `D_mul = M×N`.
    pub fn conv(kernel_h: usize, kernel_w: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        let geom = ConvGeometry {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
            stride: 1,
            pad: 0,
            groups: 1,
            depth_multiplier: kernel_h * kernel_w,
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Depthwise convolution producing `depth_multiplier` outputs per input channel.
    pub fn depthwise(kernel_h: usize, kernel_w: usize, channels: usize, depth_multiplier: usize) -> Result<Self> {
        let geom = ConvGeometry {
            kernel_h,
            kernel_w,
            in_channels: channels,
            out_channels: channels * depth_multiplier,
            stride: 1,
            pad: 0,
            groups: channels,
            depth_multiplier,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn with_padding(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_depth_multiplier(mut self, depth_multiplier: usize) -> Self {
        self.depth_multiplier = depth_multiplier;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("stride", self.stride),
            ("groups", self.groups),
            ("depth_multiplier", self.depth_multiplier),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Geometry(format!("{name} must be at least 1")));
            }
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::Geometry(format!(
                "channels {}→{} are not divisible by {} groups",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    /// `M×N`, the number of spatial taps in one patch.
    pub fn spatial(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Output grid `(H′, W′)` for an `H×W` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (
            output_extent(h, self.kernel_h, self.stride, self.pad),
            output_extent(w, self.kernel_w, self.stride, self.pad),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::Geometry(format!(
                "{}×{} kernel (pad {}, stride {}) does not fit a {h}×{w} input",
                self.kernel_h, self.kernel_w, self.pad, self.stride
            ))),
        }
    }

    /// Shape of the conventional kernel, `[C_out, M×N, C_in/G]`.
    pub fn conv_kernel_dims(&self) -> [usize; 3] {
        [self.out_channels, self.spatial(), self.in_per_group()]
    }
}

/// Conventional (optionally grouped) kernel `[C_out, M×N, C_in/G]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T = f64> {
    pub weights: Tensor<T>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(weights: Tensor<T>, geom: &ConvGeometry) -> Result<Self> {
        weights.expect_dims(&geom.conv_kernel_dims(), "conv kernel")?;
        Ok(ConvKernel { weights })
    }
}

/// Depthwise kernel `[M×N, D_mul, C_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseKernel<T = f64> {
    pub weights: Tensor<T>,
}

impl<T: Scalar> DepthwiseKernel<T> {
    pub fn new(weights: Tensor<T>, geom: &ConvGeometry) -> Result<Self> {
        weights.expect_dims(
            &[geom.spatial(), geom.depth_multiplier, geom.in_channels],
            "depthwise kernel",
        )?;
        Ok(DepthwiseKernel { weights })
    }

    pub fn depth_multiplier(&self) -> usize {
        self.weights.dims()[1]
    }
}

fn check_bias<T: Scalar>(bias: Option<&[T]>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(shape_err!(
            "bias has {} entries for {channels} output channels",
            b.len()
        )),
        _ => Ok(()),
    }
}

/// Conventional convolution `O_c = Σᵢ W_{c,i} P_i` with `G = 1`.
pub fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    k: &ConvKernel<T>,
    geom: &ConvGeometry,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    if geom.groups != 1 {
        return Err(Error::Geometry(format!(
            "conv_forward is the ungrouped path, got {} groups",
            geom.groups
        )));
    }
    grouped_conv_forward(x, k, geom, bias)
}

/// Grouped convolution. Input and output channels split into `G` contiguous
/// groups; group `g` applies a conventional convolution to its own slice.
pub fn grouped_conv_forward<T: Scalar>(
    x: &Tensor<T>,
    k: &ConvKernel<T>,
    geom: &ConvGeometry,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    geom.validate()?;
    let (h, w, c) = feature_map_dims(x)?;
    if c != geom.in_channels {
        return Err(shape_err!("input has {c} channels, geometry expects {}", geom.in_channels));
    }
    k.weights.expect_dims(&geom.conv_kernel_dims(), "conv kernel")?;
    check_bias(bias, geom.out_channels)?;
    let (out_h, out_w) = geom.output_size(h, w)?;
    let out = conv_raw(x.data(), h, w, geom, k.weights.data(), bias, out_h, out_w);
    Tensor::from_vec([out_h, out_w, geom.out_channels], out)
}

/// Core of the conventional convolution on raw slices. Shapes are trusted.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_raw<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    geom: &ConvGeometry,
    weights: &[T],
    bias: Option<&[T]>,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let c = geom.in_channels;
    let positions = out_h * out_w;
    let patch_len = geom.spatial() * c;
    let mut cols = vec![T::zero(); positions * patch_len];
    im2col(x, h, w, c, geom, out_h, out_w, &mut cols);
    conv_cols(&cols, geom, weights, bias, positions)
}

/// Applies the kernel to an already extracted patch matrix.
pub(crate) fn conv_cols<T: Scalar>(
    cols: &[T],
    geom: &ConvGeometry,
    weights: &[T],
    bias: Option<&[T]>,
    positions: usize,
) -> Vec<T> {
    let c_out = geom.out_channels;
    let spatial = geom.spatial();
    let patch_len = spatial * geom.in_channels;
    let row_len = spatial * geom.in_per_group();
    let mut out = vec![T::zero(); positions * c_out];
    if geom.groups == 1 {
        for (p, o_row) in out.chunks_exact_mut(c_out).enumerate() {
            let patch = &cols[p * patch_len..(p + 1) * patch_len];
            for (o, slot) in o_row.iter_mut().enumerate() {
                *slot = dot(&weights[o * row_len..(o + 1) * row_len], patch);
            }
        }
    } else {
        let cg = geom.in_per_group();
        let og = geom.out_per_group();
        let mut sub = vec![T::zero(); row_len];
        for (p, o_row) in out.chunks_exact_mut(c_out).enumerate() {
            let patch = &cols[p * patch_len..(p + 1) * patch_len];
            for g in 0..geom.groups {
                gather_group(patch, spatial, geom.in_channels, g * cg, cg, &mut sub);
                for o in g * og..(g + 1) * og {
                    o_row[o] = dot(&weights[o * row_len..(o + 1) * row_len], &sub);
                }
            }
        }
    }
    if let Some(b) = bias {
        for o_row in out.chunks_exact_mut(c_out) {
            for (v, &bv) in o_row.iter_mut().zip(b) {
                *v = *v + bv;
            }
        }
    }
    out
}

/// Copies channels `[start, start+len)` of every tap of a `[(M×N), C]` patch.
#[inline]
pub(crate) fn gather_group<T: Scalar>(
    patch: &[T],
    spatial: usize,
    channels: usize,
    start: usize,
    len: usize,
    out: &mut [T],
) {
    for j in 0..spatial {
        out[j * len..(j + 1) * len].copy_from_slice(&patch[j * channels + start..j * channels + start + len]);
    }
}

/// Depthwise convolution `O_{d,c} = Σᵢ W_{i,d,c} P_{i,c}`.
///
/// Output channel `c·D_mul + d` holds multiplier `d` of input channel `c`.
pub fn depthwise_forward<T: Scalar>(
    x: &Tensor<T>,
    k: &DepthwiseKernel<T>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let (h, w, c) = feature_map_dims(x)?;
    if c != geom.in_channels {
        return Err(shape_err!("input has {c} channels, geometry expects {}", geom.in_channels));
    }
    let &[spatial, dmul, kc] = k.weights.dims() else {
        return Err(shape_err!("depthwise kernel must be 3-D, got {}", k.weights.shape()));
    };
    if spatial != geom.spatial() || kc != c {
        return Err(shape_err!(
            "depthwise kernel {} does not match {}×{} taps over {c} channels",
            k.weights.shape(),
            geom.kernel_h,
            geom.kernel_w
        ));
    }
    let (out_h, out_w) = geom.output_size(h, w)?;
    let out = depthwise_raw(x.data(), h, w, geom, k.weights.data(), dmul, out_h, out_w);
    Tensor::from_vec([out_h, out_w, c * dmul], out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_raw<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    geom: &ConvGeometry,
    weights: &[T],
    dmul: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let c = geom.in_channels;
    let spatial = geom.spatial();
    let patch_len = spatial * c;
    let positions = out_h * out_w;
    let mut cols = vec![T::zero(); positions * patch_len];
    im2col(x, h, w, c, geom, out_h, out_w, &mut cols);
    let mut out = vec![T::zero(); positions * c * dmul];
    for (p, o_row) in out.chunks_exact_mut(c * dmul).enumerate() {
        let patch = &cols[p * patch_len..(p + 1) * patch_len];
        depthwise_patch(patch, weights, spatial, dmul, c, o_row);
    }
    out
}

/// One patch through a depthwise kernel: `out[c·D + d] = Σ_j W[j,d,c]·P[j,c]`.
#[inline]
pub(crate) fn depthwise_patch<T: Scalar>(
    patch: &[T],
    weights: &[T],
    spatial: usize,
    dmul: usize,
    channels: usize,
    out: &mut [T],
) {
    for ch in 0..channels {
        for d in 0..dmul {
            let mut acc = T::zero();
            for j in 0..spatial {
                acc = acc + weights[(j * dmul + d) * channels + ch] * patch[j * channels + ch];
            }
            out[ch * dmul + d] = acc;
        }
    }
}
