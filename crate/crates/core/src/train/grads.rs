use crate::conv::{gather_group, ConvGeometry, ConvKernel, DepthwiseKernel};
use crate::doconv::{DoConvParams, DoKind, FoldedKernel};
use crate::error::{shape_err, Result};
use crate::tensor::{axpy, col2im, feature_map_dims, im2col, Scalar, Tensor};

/// Gradients of a plain (conventional, grouped or depthwise) convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T = f64> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of an over-parameterized layer. `residual` is `∂D′`, which
/// equals `∂D` because the identity fill is constant.
#[derive(Debug, Clone, PartialEq)]
pub struct DoConvGrads<T = f64> {
    pub residual: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub input: Tensor<T>,
}

/// Accumulates `∂K += Σ_p up_p ⊗ P_p` and, if requested, `∂P = up · K`.
pub(crate) fn conv_cols_backward<T: Scalar>(
    cols: &[T],
    geom: &ConvGeometry,
    weights: &[T],
    upstream: &[T],
    positions: usize,
    grad_k: &mut [T],
    mut grad_cols: Option<&mut [T]>,
) {
    let c_out = geom.out_channels;
    let spatial = geom.spatial();
    let c = geom.in_channels;
    let patch_len = spatial * c;
    let row_len = spatial * geom.in_per_group();
    if geom.groups == 1 {
        for p in 0..positions {
            let patch = &cols[p * patch_len..(p + 1) * patch_len];
            let up = &upstream[p * c_out..(p + 1) * c_out];
            for (o, &u) in up.iter().enumerate() {
                if u == T::zero() {
                    continue;
                }
                axpy(u, patch, &mut grad_k[o * row_len..(o + 1) * row_len]);
                if let Some(gc) = grad_cols.as_deref_mut() {
                    axpy(u, &weights[o * row_len..(o + 1) * row_len], &mut gc[p * patch_len..(p + 1) * patch_len]);
                }
            }
        }
        return;
    }
    let cg = geom.in_per_group();
    let og = geom.out_per_group();
    let mut sub = vec![T::zero(); row_len];
    let mut grad_sub = vec![T::zero(); row_len];
    for p in 0..positions {
        let patch = &cols[p * patch_len..(p + 1) * patch_len];
        let up = &upstream[p * c_out..(p + 1) * c_out];
        for g in 0..geom.groups {
            gather_group(patch, spatial, c, g * cg, cg, &mut sub);
            grad_sub.iter_mut().for_each(|v| *v = T::zero());
            for o in g * og..(g + 1) * og {
                let u = up[o];
                axpy(u, &sub, &mut grad_k[o * row_len..(o + 1) * row_len]);
                axpy(u, &weights[o * row_len..(o + 1) * row_len], &mut grad_sub);
            }
            if let Some(gc) = grad_cols.as_deref_mut() {
                let dst = &mut gc[p * patch_len..(p + 1) * patch_len];
                for j in 0..spatial {
                    for l in 0..cg {
                        let i = j * c + g * cg + l;
                        dst[i] = dst[i] + grad_sub[j * cg + l];
                    }
                }
            }
        }
    }
}

/// Depthwise analogue of [`conv_cols_backward`] for a `[M×N, D, C]` kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_cols_backward<T: Scalar>(
    cols: &[T],
    spatial: usize,
    dmul: usize,
    c: usize,
    weights: &[T],
    upstream: &[T],
    positions: usize,
    grad_k: &mut [T],
    mut grad_cols: Option<&mut [T]>,
) {
    let patch_len = spatial * c;
    for p in 0..positions {
        let patch = &cols[p * patch_len..(p + 1) * patch_len];
        let up = &upstream[p * c * dmul..(p + 1) * c * dmul];
        for ch in 0..c {
            for d in 0..dmul {
                let u = up[ch * dmul + d];
                for j in 0..spatial {
                    let wi = (j * dmul + d) * c + ch;
                    grad_k[wi] = grad_k[wi] + u * patch[j * c + ch];
                }
                if let Some(gc) = grad_cols.as_deref_mut() {
                    for j in 0..spatial {
                        let pi = p * patch_len + j * c + ch;
                        gc[pi] = gc[pi] + u * weights[(j * dmul + d) * c + ch];
                    }
                }
            }
        }
    }
}

pub(crate) fn bias_grad<T: Scalar>(upstream: &[T], channels: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); channels];
    for row in upstream.chunks_exact(channels) {
        for (g, &u) in gb.iter_mut().zip(row) {
            *g = *g + u;
        }
    }
    gb
}

fn check_upstream<T: Scalar>(upstream: &Tensor<T>, dims: [usize; 3]) -> Result<()> {
    if upstream.dims() != dims {
        return Err(shape_err!(
            "upstream gradient {} does not match forward output {dims:?}",
            upstream.shape()
        ));
    }
    Ok(())
}

/// Adjoint of [`crate::conv::grouped_conv_forward`] (covers the ungrouped case).
pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &ConvKernel<T>,
    geom: &ConvGeometry,
    upstream: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    geom.validate()?;
    let (h, w, c) = feature_map_dims(x)?;
    if c != geom.in_channels {
        return Err(shape_err!("input has {c} channels, geometry expects {}", geom.in_channels));
    }
    k.weights.expect_dims(&geom.conv_kernel_dims(), "conv kernel")?;
    let (out_h, out_w) = geom.output_size(h, w)?;
    check_upstream(upstream, [out_h, out_w, geom.out_channels])?;
    let positions = out_h * out_w;
    let patch_len = geom.spatial() * c;
    let mut cols = vec![T::zero(); positions * patch_len];
    im2col(x.data(), h, w, c, geom, out_h, out_w, &mut cols);
    let mut grad_k = vec![T::zero(); k.weights.len()];
    let mut grad_cols = vec![T::zero(); cols.len()];
    conv_cols_backward(&cols, geom, k.weights.data(), upstream.data(), positions, &mut grad_k, Some(&mut grad_cols));
    let mut grad_x = vec![T::zero(); x.len()];
    col2im(&grad_cols, h, w, c, geom, out_h, out_w, &mut grad_x);
    Ok(ConvGrads {
        input: Tensor::from_vec(x.dims().to_vec(), grad_x)?,
        kernel: Tensor::from_vec(k.weights.dims().to_vec(), grad_k)?,
        bias: Tensor::from_vec([geom.out_channels], bias_grad(upstream.data(), geom.out_channels))?,
    })
}

/// Adjoint of [`crate::conv::depthwise_forward`].
pub fn depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &DepthwiseKernel<T>,
    geom: &ConvGeometry,
    upstream: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (h, w, c) = feature_map_dims(x)?;
    let &[spatial, dmul, kc] = k.weights.dims() else {
        return Err(shape_err!("depthwise kernel must be 3-D, got {}", k.weights.shape()));
    };
    if c != geom.in_channels || kc != c || spatial != geom.spatial() {
        return Err(shape_err!(
            "depthwise kernel {} does not fit input {} under {}×{} taps",
            k.weights.shape(),
            x.shape(),
            geom.kernel_h,
            geom.kernel_w
        ));
    }
    let (out_h, out_w) = geom.output_size(h, w)?;
    check_upstream(upstream, [out_h, out_w, c * dmul])?;
    let positions = out_h * out_w;
    let mut cols = vec![T::zero(); positions * spatial * c];
    im2col(x.data(), h, w, c, geom, out_h, out_w, &mut cols);
    let mut grad_k = vec![T::zero(); k.weights.len()];
    let mut grad_cols = vec![T::zero(); cols.len()];
    depthwise_cols_backward(
        &cols,
        spatial,
        dmul,
        c,
        k.weights.data(),
        upstream.data(),
        positions,
        &mut grad_k,
        Some(&mut grad_cols),
    );
    let mut grad_x = vec![T::zero(); x.len()];
    col2im(&grad_cols, h, w, c, geom, out_h, out_w, &mut grad_x);
    Ok(ConvGrads {
        input: Tensor::from_vec(x.dims().to_vec(), grad_x)?,
        kernel: Tensor::from_vec(k.weights.dims().to_vec(), grad_k)?,
        bias: Tensor::from_vec([c * dmul], bias_grad(upstream.data(), c * dmul))?,
    })
}

/// Gradients of an over-parameterized layer, evaluated through the folded
/// kernel: the plain adjoint gives `∂W′`, and the fold's own adjoint
/// distributes it onto `D′` and `W`.
pub fn doconv_backward<T: Scalar>(
    p: &DoConvParams<T>,
    x: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<DoConvGrads<T>> {
    let geom = p.folded_geometry();
    let plain = match p.fold()? {
        FoldedKernel::Conv(k) => conv_backward(x, &k, &geom, upstream)?,
        FoldedKernel::Depthwise(k) => {
            debug_assert_eq!(p.kind, DoKind::DepthwiseConv);
            depthwise_backward(x, &k, &geom, upstream)?
        }
    };
    let (residual, weight) = p.fold_backward(&plain.kernel)?;
    Ok(DoConvGrads {
        residual,
        weight,
        bias: plain.bias,
        input: plain.input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{depthwise_forward, grouped_conv_forward};
    use crate::doconv::ResidualInit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    }

    /// Central differences of `L(t) = Σ r ⊙ f(t)` at every element.
    fn numeric(t: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let eps = 1e-5;
        let mut g = t.clone();
        let mut probe = t.clone();
        for i in 0..t.len() {
            let v = t.data()[i];
            probe.data_mut()[i] = v + eps;
            let fp = f(&probe);
            probe.data_mut()[i] = v - eps;
            let fm = f(&probe);
            probe.data_mut()[i] = v;
            g.data_mut()[i] = (fp - fm) / (2.0 * eps);
        }
        g
    }

    fn max_rel(a: &Tensor<f64>, n: &Tensor<f64>) -> f64 {
        a.data()
            .iter()
            .zip(n.data())
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let geom = ConvGeometry::conv(3, 3, 2, 3).unwrap().with_padding(1);
        let x = rand_tensor(&[4, 4, 2], &mut rng);
        let k = ConvKernel::new(rand_tensor(&[3, 9, 2], &mut rng), &geom).unwrap();
        let g = conv_backward(&x, &k, &geom, &Tensor::zeros([4, 4, 3]).unwrap()).unwrap();
        assert!(g.input.data().iter().chain(g.kernel.data()).chain(g.bias.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_patch_kernel_grad_is_scaled_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let geom = ConvGeometry::conv(2, 2, 3, 1).unwrap();
        let x = rand_tensor(&[2, 2, 3], &mut rng);
        let k = ConvKernel::new(rand_tensor(&[1, 4, 3], &mut rng), &geom).unwrap();
        let up = Tensor::from_vec([1, 1, 1], vec![2.5]).unwrap();
        let g = conv_backward(&x, &k, &geom, &up).unwrap();
        assert_eq!(g.kernel.data(), x.scale(2.5).data());
    }

    #[test]
    fn upstream_shape_checked() {
        let geom = ConvGeometry::conv(2, 2, 1, 1).unwrap();
        let x = Tensor::<f64>::zeros([3, 3, 1]).unwrap();
        let k = ConvKernel::new(Tensor::zeros([1, 4, 1]).unwrap(), &geom).unwrap();
        assert!(conv_backward(&x, &k, &geom, &Tensor::zeros([3, 3, 1]).unwrap()).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for groups in [1, 2] {
                let geom = ConvGeometry::conv(3, 2, 4, 2).unwrap().with_padding(1).with_stride(1 + (seed as usize % 2)).with_groups(groups);
                let x = rand_tensor(&[4, 5, 4], &mut rng);
                let wk = rand_tensor(&geom.conv_kernel_dims(), &mut rng);
                let b = rand_tensor(&[2], &mut rng);
                let k = ConvKernel::new(wk.clone(), &geom).unwrap();
                let y = grouped_conv_forward(&x, &k, &geom, Some(b.data())).unwrap();
                let r = rand_tensor(y.dims(), &mut rng);
                let g = conv_backward(&x, &k, &geom, &r).unwrap();

                let nx = numeric(&x, |t| weighted_sum(&grouped_conv_forward(t, &k, &geom, Some(b.data())).unwrap(), &r));
                let nk = numeric(&wk, |t| {
                    let kk = ConvKernel::new(t.clone(), &geom).unwrap();
                    weighted_sum(&grouped_conv_forward(&x, &kk, &geom, Some(b.data())).unwrap(), &r)
                });
                let nb = numeric(&b, |t| weighted_sum(&grouped_conv_forward(&x, &k, &geom, Some(t.data())).unwrap(), &r));
                assert!(max_rel(&g.input, &nx) <= 1e-6, "seed {seed} input");
                assert!(max_rel(&g.kernel, &nk) <= 1e-6, "seed {seed} kernel");
                assert!(max_rel(&g.bias, &nb) <= 1e-6, "seed {seed} bias");
            }
        }
    }

    #[test]
    fn depthwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geom = ConvGeometry::depthwise(2, 3, 3, 2).unwrap().with_padding(1);
        let x = rand_tensor(&[3, 4, 3], &mut rng);
        let wk = rand_tensor(&[6, 2, 3], &mut rng);
        let k = DepthwiseKernel::new(wk.clone(), &geom).unwrap();
        let y = depthwise_forward(&x, &k, &geom).unwrap();
        let r = rand_tensor(y.dims(), &mut rng);
        let g = depthwise_backward(&x, &k, &geom, &r).unwrap();
        let nx = numeric(&x, |t| weighted_sum(&depthwise_forward(t, &k, &geom).unwrap(), &r));
        let nk = numeric(&wk, |t| {
            weighted_sum(&depthwise_forward(&x, &DepthwiseKernel::new(t.clone(), &geom).unwrap(), &geom).unwrap(), &r)
        });
        assert!(max_rel(&g.input, &nx) <= 1e-6);
        assert!(max_rel(&g.kernel, &nk) <= 1e-6);
    }

    fn check_doconv(p: &DoConvParams<f64>, x: &Tensor<f64>, rng: &mut ChaCha8Rng) {
        let y = p.forward_kernel(x).unwrap();
        let r = rand_tensor(y.dims(), rng);
        let g = doconv_backward(p, x, &r).unwrap();
        let loss = |q: &DoConvParams<f64>, t: &Tensor<f64>| weighted_sum(&q.forward_feature(t).unwrap(), &r);

        let nx = numeric(x, |t| loss(p, t));
        assert!(max_rel(&g.input, &nx) <= 1e-6);
        let nw = numeric(&p.weight, |t| {
            let mut q = p.clone();
            q.weight = t.clone();
            loss(&q, x)
        });
        assert!(max_rel(&g.weight, &nw) <= 1e-6);
        if let Some(res) = &p.residual {
            let nd = numeric(res, |t| {
                let mut q = p.clone();
                q.residual = Some(t.clone());
                loss(&q, x)
            });
            assert!(max_rel(g.residual.as_ref().unwrap(), &nd) <= 1e-6);
        }
        if let Some(b) = &p.bias {
            let nb = numeric(b, |t| {
                let mut q = p.clone();
                q.bias = Some(t.clone());
                loss(&q, x)
            });
            assert!(max_rel(&g.bias, &nb) <= 1e-6);
        }
    }

    #[test]
    fn doconv_gradients_match_finite_differences() {
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let cases = [
                (DoKind::Conv, ConvGeometry::conv(2, 2, 2, 3).unwrap().with_depth_multiplier(6).with_padding(1)),
                (DoKind::GroupConv, ConvGeometry::conv(2, 2, 4, 2).unwrap().with_groups(2)),
                (DoKind::DepthwiseConv, ConvGeometry::depthwise(2, 2, 2, 2).unwrap().with_depth_multiplier(5)),
            ];
            for (kind, geom) in cases {
                let residual = rand_tensor(&[geom.spatial(), geom.depth_multiplier, geom.in_channels], &mut rng);
                let weight = rand_tensor(&DoConvParams::<f64>::weight_dims(kind, &geom), &mut rng);
                let bias = rand_tensor(&[geom.out_channels], &mut rng);
                let p = DoConvParams::new(kind, geom, Some(residual), weight, Some(bias)).unwrap();
                let x = rand_tensor(&[3, 3, geom.in_channels], &mut rng);
                check_doconv(&p, &x, &mut rng);
            }
        }
    }

    #[test]
    fn identity_chain_matches_plain_kernel_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let geom = ConvGeometry::conv(3, 3, 2, 3).unwrap().with_padding(1);
        let w = rand_tensor(&[3, 9, 2], &mut rng);
        let p = DoConvParams::init(DoKind::Conv, geom, w.clone(), None, ResidualInit::Identity, &mut rng).unwrap();
        let x = rand_tensor(&[4, 4, 2], &mut rng);
        let up = rand_tensor(&[4, 4, 3], &mut rng);
        let g = doconv_backward(&p, &x, &up).unwrap();
        let plain = conv_backward(&x, &ConvKernel::new(w, &geom).unwrap(), &geom, &up).unwrap();
        assert_eq!(g.weight, plain.kernel);
        assert_eq!(g.input, plain.input);
    }

    #[test]
    fn zero_w_gives_zero_residual_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let geom = ConvGeometry::conv(2, 2, 2, 2).unwrap();
        let residual = rand_tensor(&[4, 4, 2], &mut rng);
        let p = DoConvParams::new(DoKind::Conv, geom, Some(residual), Tensor::zeros([2, 4, 2]).unwrap(), None).unwrap();
        let x = rand_tensor(&[3, 3, 2], &mut rng);
        let up = rand_tensor(&[2, 2, 2], &mut rng);
        let g = doconv_backward(&p, &x, &up).unwrap();
        assert!(g.residual.unwrap().data().iter().all(|&v| v == 0.0));
    }
}
