//! Dense row-major tensors.
//!
//! The last axis varies fastest. Feature maps are stored channels-last as
//! `[H, W, C]`, and a patch is laid out as `[(M×N), C]` with the in-patch
//! spatial offset `(m, n)` flattened to `m·N + n`.

use std::fmt::{self, Debug};
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::conv::ConvGeometry;
use crate::error::{shape_err, Result};

/// Element type tag, also used as the dtype byte of the model format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Floating point element type. `f64` is what every exactness property is
/// stated against; `f32` exists for faster training runs.
pub trait Scalar:
    Float + Sum + Default + Debug + Send + Sync + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the front of `bytes`, which must be long enough.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Dot product with a fixed summation order.
///
/// Eight independent partial sums are combined pairwise at the end, which
/// lets the compiler vectorize while keeping results reproducible.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for lane in 0..8 {
            acc[lane] = acc[lane] + ca[lane] * cb[lane];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(shape_err!("a shape needs at least one axis"));
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(shape_err!("extent of axis {axis} is zero in {dims:?}"));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for axis in (0..self.0.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.0[axis + 1];
        }
        strides
    }
}

impl Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(shape_err!(
                "shape {shape} holds {} elements, got {}",
                shape.numel(),
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![T::zero(); shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor by evaluating `f` at every multi-index, in row-major order.
    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let mut index = vec![0; shape.rank()];
        let mut data = Vec::with_capacity(shape.numel());
        for _ in 0..shape.numel() {
            data.push(f(&index));
            for axis in (0..index.len()).rev() {
                index[axis] += 1;
                if index[axis] < shape.dims()[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.rank());
        let dims = self.shape.dims();
        let mut off = 0;
        for (axis, &i) in index.iter().enumerate() {
            debug_assert!(i < dims[axis], "index {index:?} out of bounds for {dims:?}");
            off = off * dims[axis] + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        self.clone().into_reshape(dims)
    }

    pub fn into_reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {} into {shape}: {} ≠ {} elements",
                self.shape,
                self.data.len(),
                shape.numel()
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Swaps the first two axes of a 3-D tensor: `[A, B, C] → [B, A, C]`.
    pub fn transpose_first_two(&self) -> Result<Self> {
        let &[a, b, c] = self.dims() else {
            return Err(shape_err!(
                "transpose_first_two needs a 3-D tensor, got {}",
                self.shape
            ));
        };
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..b {
            for i in 0..a {
                let row = (i * b + j) * c;
                data.extend_from_slice(&self.data[row..row + c]);
            }
        }
        Tensor::from_vec([b, a, c], data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("shape {} ≠ {}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn expect_dims(&self, dims: &[usize], what: &str) -> Result<()> {
        if self.dims() != dims {
            return Err(shape_err!("{what}: expected {dims:?}, got {}", self.shape));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// Largest elementwise absolute difference, in `f64`.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

/// All patches of a feature map, one `[(M×N), C_in]` block per output position.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch<T = f64> {
    pub out_h: usize,
    pub out_w: usize,
    pub spatial: usize,
    pub channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> PatchBatch<T> {
    pub fn count(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn patch_len(&self) -> usize {
        self.spatial * self.channels
    }

    /// Patch at output position `(oy, ox)`, flattened as `[(M×N), C_in]`.
    pub fn patch(&self, oy: usize, ox: usize) -> &[T] {
        let len = self.patch_len();
        let start = (oy * self.out_w + ox) * len;
        &self.data[start..start + len]
    }

    /// Patch number `p` in row-major output order.
    pub fn patch_at(&self, p: usize) -> &[T] {
        let len = self.patch_len();
        &self.data[p * len..(p + 1) * len]
    }

    pub fn as_matrix(&self) -> &[T] {
        &self.data
    }

    pub fn to_tensor(&self, oy: usize, ox: usize) -> Tensor<T> {
        Tensor::from_vec([self.spatial, self.channels], self.patch(oy, ox).to_vec())
            .expect("patch dims are positive")
    }
}

/// Output grid size for a given input size along one axis.
pub(crate) fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) fn feature_map_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.dims() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(shape_err!("feature map must be [H, W, C], got {}", x.shape())),
    }
}

/// Sliding-window patch view of `x` (`[H, W, C_in]`) with zero padding.
pub fn extract_patches<T: Scalar>(x: &Tensor<T>, geom: &ConvGeometry) -> Result<PatchBatch<T>> {
    let (h, w, c) = feature_map_dims(x)?;
    if c != geom.in_channels {
        return Err(shape_err!(
            "feature map has {c} channels, geometry expects {}",
            geom.in_channels
        ));
    }
    let (out_h, out_w) = geom.output_size(h, w)?;
    let spatial = geom.spatial();
    let mut data = vec![T::zero(); out_h * out_w * spatial * c];
    im2col(x.data(), h, w, c, geom, out_h, out_w, &mut data);
    Ok(PatchBatch {
        out_h,
        out_w,
        spatial,
        channels: c,
        data,
    })
}

/// Fills `cols` (`[out_h·out_w, (M×N)·C]`, pre-zeroed) from a `[H, W, C]` slice.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    c: usize,
    geom: &ConvGeometry,
    out_h: usize,
    out_w: usize,
    cols: &mut [T],
) {
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let patch_len = kh * kw * c;
    for oy in 0..out_h {
        for ox in 0..out_w {
            let patch = &mut cols[(oy * out_w + ox) * patch_len..][..patch_len];
            for m in 0..kh {
                let iy = (oy * geom.stride + m) as isize - geom.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for n in 0..kw {
                    let ix = (ox * geom.stride + n) as isize - geom.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = (m * kw + n) * c;
                    patch[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the map.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    h: usize,
    w: usize,
    c: usize,
    geom: &ConvGeometry,
    out_h: usize,
    out_w: usize,
    x_grad: &mut [T],
) {
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let patch_len = kh * kw * c;
    for oy in 0..out_h {
        for ox in 0..out_w {
            let patch = &cols[(oy * out_w + ox) * patch_len..][..patch_len];
            for m in 0..kh {
                let iy = (oy * geom.stride + m) as isize - geom.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for n in 0..kw {
                    let ix = (ox * geom.stride + n) as isize - geom.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = (m * kw + n) * c;
                    for (g, &v) in x_grad[dst..dst + c].iter_mut().zip(&patch[src..src + c]) {
                        *g = *g + v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    fn iota(dims: &[usize]) -> Tensor<f64> {
        let n: usize = dims.iter().product();
        Tensor::from_vec(dims.to_vec(), (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn reshape_keeps_row_major_order() {
        let t = iota(&[2, 3, 4]);
        let r = t.reshape([2, 12]).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(t.get(&[i, j, k]), r.get(&[i, j * 4 + k]));
                }
            }
        }
        let v = iota(&[6]).reshape([2, 3]).unwrap();
        assert_eq!(v.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn reshape_count_mismatch() {
        let err = iota(&[2, 3]).reshape([4, 2]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Shape::new([2, 0]).is_err());
        assert!(Tensor::<f64>::zeros([3, 0, 1]).is_err());
    }

    #[test]
    fn transpose_moves_single_element() {
        let mut t = Tensor::<f64>::zeros([2, 3, 1]).unwrap();
        t.set(&[0, 1, 0], 5.0);
        let tt = t.transpose_first_two().unwrap();
        assert_eq!(tt.dims(), &[3, 2, 1]);
        assert_eq!(tt.get(&[1, 0, 0]), 5.0);
        assert_eq!(tt.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn transpose_of_stacked_identity_is_unchanged() {
        let t = Tensor::<f64>::from_fn([4, 4, 3], |i| if i[0] == i[1] { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(t.transpose_first_two().unwrap(), t);
    }

    #[test]
    fn transpose_rejects_non_3d() {
        assert!(iota(&[2, 3]).transpose_first_two().is_err());
    }

    #[test]
    fn transpose_is_involution_on_large_tensor() {
        let t = Tensor::<f64>::from_fn([4, 9, 16], |i| ((i[0] * 31 + i[1] * 7 + i[2]) as f64).sin()).unwrap();
        let back = t.transpose_first_two().unwrap().transpose_first_two().unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn single_patch_equals_input() {
        let x = iota(&[2, 2, 3]);
        let geom = ConvGeometry::conv(2, 2, 3, 1).unwrap();
        let p = extract_patches(&x, &geom).unwrap();
        assert_eq!(p.count(), 1);
        assert_eq!(p.patch(0, 0), x.data());
    }

    #[test]
    fn top_left_patch_of_3x3() {
        let x = iota(&[3, 3, 1]);
        let geom = ConvGeometry::conv(2, 2, 1, 1).unwrap();
        let p = extract_patches(&x, &geom).unwrap();
        assert_eq!((p.out_h, p.out_w), (2, 2));
        assert_eq!(p.patch(0, 0), &[0.0, 1.0, 3.0, 4.0]);
        assert_eq!(p.patch(1, 1), &[4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn padded_corner_patches_hold_five_zeros_per_channel() {
        // strictly positive input so every zero comes from padding
        let x = Tensor::<f64>::from_fn([4, 4, 2], |i| 1.0 + (i[0] * 8 + i[1] * 2 + i[2]) as f64).unwrap();
        let geom = ConvGeometry::conv(3, 3, 2, 1).unwrap().with_padding(1);
        let p = extract_patches(&x, &geom).unwrap();
        assert_eq!((p.out_h, p.out_w), (4, 4));
        for (oy, ox) in [(0, 0), (0, 3), (3, 0), (3, 3)] {
            let patch = p.patch(oy, ox);
            for ch in 0..2 {
                let zeros = (0..9).filter(|&j| patch[j * 2 + ch] == 0.0).count();
                assert_eq!(zeros, 5, "corner ({oy},{ox}) channel {ch}");
            }
        }
        // an edge (non-corner) patch only loses one row
        let edge = p.patch(0, 1);
        assert_eq!((0..9).filter(|&j| edge[j * 2] == 0.0).count(), 3);
    }

    #[test]
    fn geometry_too_small_for_kernel() {
        let x = iota(&[2, 2, 1]);
        let geom = ConvGeometry::conv(3, 3, 1, 1).unwrap();
        assert!(matches!(extract_patches(&x, &geom), Err(Error::Geometry(_))));
    }

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..37).map(|v| v as f64 * 0.5).collect();
        let b: Vec<f64> = (0..37).map(|v| 3.0 - v as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn reshape_round_trip(a in 1usize..5, b in 1usize..5, c in 1usize..5) {
            let t = Tensor::<f64>::from_fn([a, b, c], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64).unwrap();
            let back = t.reshape([a * b * c]).unwrap().reshape([a, b, c]).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn unpadded_patches_copy_input(
            h in 1usize..6, w in 1usize..6, c in 1usize..3, m in 1usize..4, n in 1usize..4,
        ) {
            prop_assume!(m <= h && n <= w);
            let x = Tensor::<f64>::from_fn([h, w, c], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64).unwrap();
            let geom = ConvGeometry::conv(m, n, c, 1).unwrap();
            let p = extract_patches(&x, &geom).unwrap();
            prop_assert_eq!(p.count(), (h - m + 1) * (w - n + 1));
            for oy in 0..p.out_h {
                for ox in 0..p.out_w {
                    let patch = p.patch(oy, ox);
                    for dm in 0..m {
                        for dn in 0..n {
                            for ch in 0..c {
                                prop_assert_eq!(patch[(dm * n + dn) * c + ch], x.get(&[oy + dm, ox + dn, ch]));
                            }
                        }
                    }
                }
            }
        }
    }
}
