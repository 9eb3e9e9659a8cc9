use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{argmax, AnyNetwork, Network, NetworkSpec, ParamRole, Variant};
use super::optim::{OptimizerState, SgdConfig};
use crate::doconv::ComposeMode;
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::tensor::{DType, Scalar};

/// Offset that separates the shuffling stream from the init streams.
const SHUFFLE_STREAM: u64 = 0x5EED_0F5A_u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// half-cosine decay to zero over all steps
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => 0.5 * base * (1.0 + (PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

fn d_lr() -> f64 {
    0.05
}
fn d_momentum() -> f64 {
    0.9
}
fn d_wd() -> f64 {
    1e-4
}
fn d_batch() -> usize {
    64
}
fn d_epochs() -> usize {
    10
}
fn d_dtype() -> DType {
    DType::F32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default = "d_dtype")]
    pub dtype: DType,
    /// keep `D′` at its initial value
    #[serde(default)]
    pub freeze_residual: bool,
    /// use only the first N training samples
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        Ok(())
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// wall time; left out of JSON so reports from identical runs compare equal
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Option<Variant>,
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_accuracy)
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Mean loss and accuracy over `data`.
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    data: &Dataset,
    batch_size: usize,
    mode: ComposeMode,
) -> Result<EvalStats> {
    let batch_size = batch_size.max(1);
    let indices: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in indices.chunks(batch_size) {
        let (x, labels) = data.batch::<T>(chunk)?;
        let logits = net.forward(&x, mode)?;
        for (row, &label) in logits.data().chunks_exact(net.classes()).zip(&labels) {
            loss += super::net::softmax_cross_entropy(row, label).0;
            correct += (argmax(row) == label) as usize;
        }
    }
    let n = data.len().max(1) as f64;
    Ok(EvalStats {
        loss: loss / n,
        accuracy: correct as f64 / n,
        samples: data.len(),
    })
}

/// Trains `net` in place with SGD and momentum.
///
/// Sample order depends only on `seed`, so two networks trained with the same
/// seed see identical batches. `on_epoch` runs after each epoch.
pub fn train_network<T: Scalar>(
    net: &mut Network<T>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.dims() != net.input_dims() {
        return Err(Error::Shape(format!(
            "dataset samples are {:?}, network expects {:?}",
            train.dims(),
            net.input_dims()
        )));
    }
    let train = match cfg.train_limit {
        Some(n) => train.take(n),
        None => train.clone(),
    };
    let test = test.map(|t| match cfg.test_limit {
        Some(n) => t.take(n),
        None => t.clone(),
    });
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(SHUFFLE_STREAM));
    let mut opt = OptimizerState::<T>::new(cfg.sgd());
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport {
        variant: None,
        seed,
        config: cfg.clone(),
        epochs: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = train.batch::<T>(chunk)?;
            let (loss, mut grads, logits) = net.loss_and_grads(&x, &labels)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            if cfg.freeze_residual {
                grads.retain(|id| id.role != ParamRole::Residual);
            }
            opt.config.learning_rate =
                cfg.schedule.rate(cfg.learning_rate, epoch * steps_per_epoch + step, total_steps);
            opt.step(net, &grads).map_err(|e| match e {
                Error::Numeric(_) => Error::Diverged { epoch, step, loss },
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
            correct += logits
                .data()
                .chunks_exact(net.classes())
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
        }
        let eval = test
            .as_ref()
            .map(|t| evaluate(net, t, cfg.batch_size.max(256), ComposeMode::Kernel))
            .transpose()?;
        let stats = EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            test_loss: eval.map(|e| e.loss),
            test_accuracy: eval.map(|e| e.accuracy),
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    Ok(report)
}

/// Builds a network from `spec` and trains it in the configured precision.
pub fn train_run(
    spec: &NetworkSpec,
    variant: Variant,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(TrainReport, AnyNetwork)> {
    let (mut report, net) = match cfg.dtype {
        DType::F32 => {
            let mut net = Network::<f32>::from_spec(spec, variant, seed)?;
            let r = train_network(&mut net, train, test, cfg, seed, on_epoch)?;
            (r, AnyNetwork::F32(net))
        }
        DType::F64 => {
            let mut net = Network::<f64>::from_spec(spec, variant, seed)?;
            let r = train_network(&mut net, train, test, cfg, seed, on_epoch)?;
            (r, AnyNetwork::F64(net))
        }
    };
    report.variant = Some(variant);
    Ok((report, net))
}
