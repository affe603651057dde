//! Central finite-difference verification of the analytic gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::SplitBundle;
use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::model::{Hyperparams, ModelParams, ModelShape};

use super::backward::{GradientSet, Objective};
use super::loss::{regularization_terms, Batch, LossKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub step: f64,
    /// Coordinates checked per tensor; tensors at most this large are
    /// checked exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tolerance: 1e-4,
            step: 1e-5,
            samples_per_tensor: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: &'static str,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Worst coordinates first.
    pub worst: Vec<CoordinateError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error <= self.tolerance)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.tensors
            .iter()
            .filter(|t| t.max_rel_error > self.tolerance)
            .map(|t| t.name)
            .collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    /// `Err(GradientCheck)` listing the worst coordinates of every failing
    /// tensor.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let detail: Vec<String> = self
            .tensors
            .iter()
            .filter(|t| t.max_rel_error > self.tolerance)
            .map(|t| {
                let coords: Vec<String> = t
                    .worst
                    .iter()
                    .map(|c| format!("[{}] analytic {:.6e} numeric {:.6e}", c.index, c.analytic, c.numeric))
                    .collect();
                format!(
                    "{} (max rel error {:.3e}): {}",
                    t.name,
                    t.max_rel_error,
                    coords.join(", ")
                )
            })
            .collect();
        Err(Error::GradientCheck(detail.join("; ")))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            let status = if t.max_rel_error <= self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            writeln!(
                f,
                "{:<18} {:>5} coords  max rel error {:.3e}  {status}",
                t.name, t.checked, t.max_rel_error
            )?;
        }
        Ok(())
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `objective` around
/// `params` on a seeded subsample of every tensor.
///
/// `objective` returns the objective as a list of additive terms. The
/// difference is taken term by term before summing, which keeps rounding
/// noise proportional to the individual terms rather than to the total.
pub fn compare_gradients<F>(
    params: &ModelParams,
    analytic: &GradientSet,
    objective: F,
    options: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&ModelParams) -> Result<Vec<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut probe = params.clone();
    let grads = analytic.0.tensors();
    let layout: Vec<(&'static str, usize)> = params.tensors().iter().map(|t| (t.name, t.data.len())).collect();
    if grads.len() != layout.len() {
        return Err(Error::Precondition("gradient layout does not match parameters".into()));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, len), g) in layout.into_iter().zip(&grads) {
        let indices: Vec<usize> = if len <= options.samples_per_tensor {
            (0..len).collect()
        } else {
            // Half the budget on coordinates the batch actually moves, the
            // rest uniform so that spurious zeros are caught too.
            let active: Vec<usize> = (0..len).filter(|&i| g.data[i] != 0.0).collect();
            let want_active = (options.samples_per_tensor / 2).min(active.len());
            let mut picked: Vec<usize> = sample(&mut rng, active.len(), want_active)
                .into_iter()
                .map(|k| active[k])
                .collect();
            let rest = options.samples_per_tensor - want_active;
            picked.extend(sample(&mut rng, len, rest));
            picked.sort_unstable();
            picked.dedup();
            picked
        };
        let mut errors = Vec::with_capacity(indices.len());
        for index in indices {
            let original = params
                .tensors()
                .iter()
                .find(|t| t.name == name)
                .expect("tensor exists")
                .data[index];
            let set = |p: &mut ModelParams, v: f64| p.tensor_mut(name).expect("tensor exists")[index] = v;
            set(&mut probe, original + options.step);
            let plus = objective(&probe)?;
            set(&mut probe, original - options.step);
            let minus = objective(&probe)?;
            set(&mut probe, original);
            if plus.len() != minus.len() {
                return Err(Error::Precondition(
                    "objective returned a varying number of terms".into(),
                ));
            }
            let diff: f64 = plus.iter().zip(&minus).map(|(p, m)| p - m).sum();
            let numeric = diff / (2.0 * options.step);
            let a = g.data[index];
            errors.push(CoordinateError {
                index,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
        errors.sort_by(|x, y| y.rel_error.total_cmp(&x.rel_error));
        tensors.push(TensorCheck {
            name,
            checked: errors.len(),
            max_rel_error: errors.first().map_or(0.0, |e| e.rel_error),
            worst: errors.into_iter().take(3).collect(),
        });
    }
    Ok(GradCheckReport {
        tolerance: options.tolerance,
        tensors,
    })
}

/// Checks `backward` for `loss` on `batch` against central differences.
/// Use smooth activations (see `Hyperparams::smooth`) so the objective is
/// differentiable everywhere.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check(
    params: &ModelParams,
    hp: &Hyperparams,
    batch: Batch<'_>,
    loss: LossKind,
    split: &SplitBundle,
    store: Option<&FeatureStore>,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let objective = Objective::new(loss);
    let (_, analytic) = objective.gradient(batch, params, hp, split, store)?;
    compare_gradients(
        params,
        &analytic,
        |p| {
            let mut terms = objective.evaluate(batch, p, hp, split, store)?.terms;
            terms.extend(regularization_terms(p, hp));
            Ok(terms)
        },
        options,
    )
}

/// Freshly initialised parameters with Gaussian jitter of `scale` added to
/// every entry, biases included. Checking at such a point exercises every
/// term of the gradient with a magnitude well above finite-difference
/// noise, which the small initial embeddings would not.
pub fn probe_parameters(shape: ModelShape, seed: u64, scale: f64) -> ModelParams {
    let mut params = super::init::initialize(shape, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, scale).expect("valid scale");
    for (_, data) in params.tensors_mut() {
        data.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
    }
    params
}
