use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub eps: f64,
    /// Tensors larger than this are checked on a random subset of this many
    /// elements. Never below 64.
    pub max_elements: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            eps: 1e-5,
            max_elements: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// flat index of the worst element
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `analytic` with central differences of `f` around `at`.
///
/// Relative error per element is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    at: &Tensor<f64>,
    analytic: &Tensor<f64>,
    opts: FdOptions,
) -> Result<FdReport> {
    at.expect_same_shape(analytic)
        .map_err(|_| shape_err!("gradient {} does not match parameter {}", analytic.shape(), at.shape()))?;
    let limit = opts.max_elements.max(64);
    let indices: Vec<usize> = if at.len() <= limit {
        (0..at.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked = sample(&mut rng, at.len(), limit).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut probe = at.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: indices.len(),
    };
    for &i in &indices {
        let v = at.data()[i];
        probe.data_mut()[i] = v + opts.eps;
        let plus = f(&probe);
        probe.data_mut()[i] = v - opts.eps;
        let minus = f(&probe);
        probe.data_mut()[i] = v;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite around element {i} ({plus}, {minus})"
            )));
        }
        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}
