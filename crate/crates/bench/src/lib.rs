//! Fixtures shared by the benchmarks.

use doconv_core::{ConvGeometry, DoConvParams, DoKind, ResidualInit, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A layer with random `W` and `D′`, plus a matching random input.
pub fn layer_and_input(
    geom: ConvGeometry,
    h: usize,
    w: usize,
    seed: u64,
) -> (DoConvParams<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = DoConvParams::<f32>::weight_dims(DoKind::Conv, &geom);
    let weight = Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(-1.0..1.0)).expect("weight dims");
    let p = DoConvParams::init(DoKind::Conv, geom, weight, None, ResidualInit::Random, &mut rng)
        .expect("valid geometry");
    let x = Tensor::from_fn(vec![h, w, geom.in_channels], |_| rng.gen_range(-1.0..1.0)).expect("input dims");
    (p, x)
}
