//! The invariant suite behind `doconv check`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use doconv_core::io::{decode_model, encode_model};
use doconv_core::train::{
    finite_diff_check, AnyNetwork, FdOptions, Network, NetworkSpec, OptimizerState, ParamRole, SgdConfig,
    Variant,
};
use doconv_core::{ComposeMode, ConvGeometry, DoConvParams, DoKind, Result, Tensor};

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// worst observed value of the checked quantity
    pub worst: f64,
    pub threshold: f64,
    pub cases: usize,
}

fn outcome(name: &'static str, worst: f64, threshold: f64, cases: usize) -> CheckOutcome {
    CheckOutcome {
        name,
        passed: worst <= threshold,
        worst,
        threshold,
        cases,
    }
}

fn normal_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// A layer with every tensor random, including `D′`.
pub fn random_layer(
    kind: DoKind,
    geom: ConvGeometry,
    rng: &mut ChaCha8Rng,
) -> Result<DoConvParams<f64>> {
    let residual = normal_tensor(&[geom.spatial(), geom.depth_multiplier, geom.in_channels], rng)?;
    let weight = normal_tensor(&DoConvParams::<f64>::weight_dims(kind, &geom), rng)?;
    let bias = normal_tensor(&[geom.out_channels], rng)?;
    DoConvParams::separable(kind, geom, Some(residual), weight, Some(bias))
}

/// Every `(M, N, D_mul, G)` combination, `rounds` times with random channels.
pub fn equivalence(seed: u64, rounds: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut cases) = (0.0f64, 0);
    for _ in 0..rounds {
        for m in 1..=3 {
            for n in 1..=3 {
                let mn = m * n;
                let mut dmuls = vec![mn, mn + 2, 2 * mn];
                if mn > 1 {
                    dmuls.push(mn - 1);
                }
                for dm in dmuls {
                    for grouped in [false, true] {
                        let c_in = rng.gen_range(1..=4);
                        let (kind, geom) = if grouped {
                            let c_out = c_in * rng.gen_range(1..=2);
                            let g = ConvGeometry::conv(m, n, c_in, c_out)?.with_groups(c_in);
                            let kind = if c_in == 1 { DoKind::Conv } else { DoKind::GroupConv };
                            (kind, g)
                        } else {
                            (DoKind::Conv, ConvGeometry::conv(m, n, c_in, rng.gen_range(1..=4))?)
                        };
                        let geom = geom.with_depth_multiplier(dm).with_padding(rng.gen_range(0..=1));
                        let p = random_layer(kind, geom, &mut rng)?;
                        let x = normal_tensor(&[rng.gen_range(3..=6), rng.gen_range(3..=6), c_in], &mut rng)?;
                        let a = p.forward_feature(&x)?;
                        let b = p.forward_kernel(&x)?;
                        worst = worst.max(a.max_abs_diff(&b)?);
                        cases += 1;
                    }
                }
            }
        }
    }
    Ok(outcome("feature/kernel composition agree", worst, 1e-10, cases))
}

fn tiny_spec() -> NetworkSpec {
    serde_json::from_str(
        r#"{"input":[6,6,2],"layers":[
            {"type":"conv","kernel":3,"out_channels":3,"pad":1},
            {"type":"relu"},
            {"type":"maxpool"},
            {"type":"dodconv","kernel":2,"multiplier":2},
            {"type":"flatten"},
            {"type":"dense","units":3},
            {"type":"softmax_cross_entropy"}]}"#,
    )
    .expect("static spec")
}

fn random_batch(input: [usize; 3], classes: usize, b: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<f64>, Vec<usize>)> {
    let [h, w, c] = input;
    let x = normal_tensor(&[b, h, w, c], rng)?;
    Ok((x, (0..b).map(|_| rng.gen_range(0..classes)).collect()))
}

/// Train a few steps, fold, and compare logits; then round-trip the folded
/// model through its byte encoding.
pub fn fold(seed: u64, steps: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::<f64>::from_spec(&tiny_spec(), Variant::DoConv, seed)?;
    let mut opt = OptimizerState::new(SgdConfig {
        learning_rate: 0.05,
        momentum: 0.9,
        weight_decay: 1e-4,
    });
    for _ in 0..steps {
        let (x, y) = random_batch(net.input_dims(), net.classes(), 8, &mut rng)?;
        let (_, grads, _) = net.loss_and_grads(&x, &y)?;
        opt.step(&mut net, &grads)?;
    }
    let folded = net.folded()?;
    let (x, _) = random_batch(net.input_dims(), net.classes(), 32, &mut rng)?;
    let trained = net.forward(&x, ComposeMode::Feature)?;
    let inference = folded.forward(&x, ComposeMode::Kernel)?;
    let mut worst = trained.max_abs_diff(&inference)?;
    let any = AnyNetwork::F64(folded);
    if decode_model(&encode_model(&any))? != any {
        worst = f64::INFINITY;
    }
    Ok(outcome("folded model reproduces training-mode logits", worst, 1e-10, 32))
}

/// Every parameter of a small net against central differences.
pub fn gradients(seeds: usize) -> Result<CheckOutcome> {
    let (mut worst, mut cases) = (0.0f64, 0);
    let mut spec = tiny_spec();
    if let doconv_core::train::LayerSpec::Conv(c) = &mut spec.layers[0] {
        c.residual_init = doconv_core::ResidualInit::Random;
    }
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut net = Network::<f64>::from_spec(&spec, Variant::DoConv, seed)?;
        let ids: Vec<_> = net.params().iter().map(|(id, _)| *id).collect();
        for id in &ids {
            if id.role != ParamRole::Weight {
                let p = net.param_mut(id).expect("listed parameter");
                p.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
            }
        }
        let (x, y) = random_batch(net.input_dims(), net.classes(), 2, &mut rng)?;
        let (_, grads, _) = net.loss_and_grads(&x, &y)?;
        for id in &ids {
            let at = net.param(id).expect("listed parameter").clone();
            let analytic = grads.get(id).expect("gradient for every parameter");
            let f = |t: &Tensor<f64>| {
                let mut probe = net.clone();
                *probe.param_mut(id).expect("listed parameter") = t.clone();
                probe.loss_and_grads(&x, &y).map(|r| r.0).unwrap_or(f64::NAN)
            };
            let opts = FdOptions { seed, ..FdOptions::default() };
            worst = worst.max(finite_diff_check(f, &at, analytic, opts)?.max_rel_error);
            cases += 1;
        }
    }
    Ok(outcome("analytic gradients match finite differences", worst, 1e-5, cases))
}

/// Perturbing any pixel outside an output's window leaves that output unchanged.
pub fn receptive_field(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = ConvGeometry::conv(3, 3, 2, 2)?;
    let p = random_layer(DoKind::Conv, geom, &mut rng)?;
    let x = normal_tensor(&[6, 6, 2], &mut rng)?;
    let (mut worst, mut cases) = (0.0f64, 0);
    for mode in [ComposeMode::Feature, ComposeMode::Kernel] {
        let base = p.forward(&x, mode)?;
        for py in 0..6 {
            for px in 0..6 {
                for ch in 0..2 {
                    let mut bumped = x.clone();
                    bumped.set(&[py, px, ch], x.get(&[py, px, ch]) + 1.0);
                    let out = p.forward(&bumped, mode)?;
                    for oy in 0..4 {
                        for ox in 0..4 {
                            let inside = (oy..oy + 3).contains(&py) && (ox..ox + 3).contains(&px);
                            if inside {
                                continue;
                            }
                            for o in 0..2 {
                                let d = (out.get(&[oy, ox, o]) - base.get(&[oy, ox, o])).abs();
                                worst = worst.max(d);
                                cases += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(outcome("outputs ignore pixels outside their window", worst, 0.0, cases))
}

/// With `D′ = 0` the over-parameterized net equals the plain one.
pub fn identity_neutrality(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Network::<f64>::from_spec(&tiny_spec(), Variant::Baseline, seed)?;
    let over = Network::<f64>::from_spec(&tiny_spec(), Variant::DoConv, seed)?;
    let (x, y) = random_batch(base.input_dims(), base.classes(), 4, &mut rng)?;
    let mut worst = 0.0f64;
    for mode in [ComposeMode::Feature, ComposeMode::Kernel] {
        worst = worst.max(base.forward(&x, mode)?.max_abs_diff(&over.forward(&x, mode)?)?);
    }
    let (_, gb, _) = base.loss_and_grads(&x, &y)?;
    let (_, go, _) = over.loss_and_grads(&x, &y)?;
    for (id, g) in gb.iter() {
        match go.get(id) {
            Some(o) => worst = worst.max(g.max_abs_diff(o)?),
            None => worst = f64::INFINITY,
        }
    }
    Ok(outcome("identity-initialized layers change nothing", worst, 1e-12, 1))
}

pub fn run_all(seeds: usize) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        equivalence(7, 3)?,
        fold(11, 20)?,
        gradients(seeds)?,
        receptive_field(13)?,
        identity_neutrality(17)?,
    ])
}
