//! Utility, loss-based membership inference and NoMUS.
//!
//! - Utility `U`: test-split accuracy.
//! - MIA accuracy `M`: a one-feature logistic regression on per-sample
//!   cross-entropy separates forget (label 1) from unseen (label 0) samples;
//!   `M` is its accuracy on the same pooled data it was fitted on.
//! - Forgetting `F = |M - 0.5|`.
//! - `NoMUS = U * lambda + (1 - 2F) * (1 - lambda)`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, ImageRecord};
use crate::error::{Error, Result};
use crate::nn::{accuracy, forward, per_sample_cross_entropy, ModelState};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.5;
/// Full-batch gradient steps for the MIA classifier.
pub const MIA_ITERATIONS: usize = 500;
/// Step size on the mean logistic loss over standardised inputs.
pub const MIA_STEP: f64 = 1.0;

/// Per-sample cross-entropy, in record order.
pub fn collect_losses(model: &ModelState, records: &[ImageRecord]) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::contract("cannot collect losses of an empty record set"));
    }
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(256) {
        let batch = Tensor::stack(chunk.iter().map(|r| &r.image))?;
        let labels: Vec<usize> = chunk.iter().map(|r| r.label).collect();
        out.extend(per_sample_cross_entropy(&forward(model, &batch)?, &labels)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaResult {
    pub forget_losses: Vec<f64>,
    pub unseen_losses: Vec<f64>,
    /// Coefficient on the standardised loss.
    pub weight: f64,
    pub bias: f64,
    /// Pooled mean and standard deviation used for standardisation.
    pub feature_mean: f64,
    pub feature_std: f64,
    /// Accuracy `M` on the pooled data.
    pub accuracy: f64,
    /// Share of the larger class in the pooled data.
    pub majority_prior: f64,
    /// True when every loss was identical and no classifier could be fitted.
    pub degenerate: bool,
}

impl MiaResult {
    /// Whether the fitted classifier calls a raw loss value "forget".
    pub fn predicts_forget(&self, loss: f64) -> bool {
        if self.degenerate {
            return self.forget_losses.len() >= self.unseen_losses.len();
        }
        let z = (loss - self.feature_mean) / self.feature_std;
        self.weight * z + self.bias >= 0.0
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Fits the membership classifier `psi(loss)`.
///
/// Inputs are standardised by the pooled mean and population standard
/// deviation, parameters start at zero, and [`MIA_ITERATIONS`] full-batch
/// gradient steps of size [`MIA_STEP`] are taken on the mean logistic loss.
/// A sample is predicted "forget" when `psi >= 0.5`.
pub fn fit_mia(forget_losses: &[f64], unseen_losses: &[f64]) -> Result<MiaResult> {
    if forget_losses.is_empty() || unseen_losses.is_empty() {
        return Err(Error::contract("MIA needs non-empty forget and unseen losses"));
    }
    if forget_losses.iter().chain(unseen_losses).any(|v| !v.is_finite()) {
        return Err(Error::contract("MIA losses must be finite"));
    }
    let (nf, nu) = (forget_losses.len(), unseen_losses.len());
    let n = (nf + nu) as f64;
    let majority_prior = nf.max(nu) as f64 / n;
    let pooled = || forget_losses.iter().map(|&v| (v, 1.0)).chain(unseen_losses.iter().map(|&v| (v, 0.0)));

    let mean = pooled().map(|(v, _)| v).sum::<f64>() / n;
    let var = pooled().map(|(v, _)| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let mut result = MiaResult {
        forget_losses: forget_losses.to_vec(),
        unseen_losses: unseen_losses.to_vec(),
        weight: 0.0,
        bias: 0.0,
        feature_mean: mean,
        feature_std: std,
        accuracy: majority_prior,
        majority_prior,
        degenerate: false,
    };
    if !(std > 0.0) {
        warn!("all MIA losses are identical; reporting the majority class prior as accuracy");
        result.degenerate = true;
        return Ok(result);
    }

    let data: Vec<(f64, f64)> = pooled().map(|(v, y)| ((v - mean) / std, y)).collect();
    let (mut w, mut b) = (0.0, 0.0);
    for _ in 0..MIA_ITERATIONS {
        let (mut gw, mut gb) = (0.0, 0.0);
        for &(z, y) in &data {
            let r = sigmoid(w * z + b) - y;
            gw += r * z;
            gb += r;
        }
        w -= MIA_STEP * gw / n;
        b -= MIA_STEP * gb / n;
    }
    result.weight = w;
    result.bias = b;
    let correct = data
        .iter()
        .filter(|&&(z, y)| (w * z + b >= 0.0) == (y == 1.0))
        .count();
    result.accuracy = correct as f64 / n;
    Ok(result)
}

/// `F = |M - 0.5|`.
pub fn forgetting_score(mia_accuracy: f64) -> f64 {
    (mia_accuracy - 0.5).abs()
}

/// `U * lambda + (1 - 2F) * (1 - lambda)`.
pub fn nomus(utility: f64, forgetting: f64, lambda: f64) -> f64 {
    utility * lambda + (1.0 - forgetting * 2.0) * (1.0 - lambda)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub utility: f64,
    pub forgetting: f64,
    pub nomus: f64,
    pub mia_accuracy: f64,
    pub lambda: f64,
}

impl Metrics {
    pub fn from_parts(utility: f64, mia_accuracy: f64, lambda: f64) -> Self {
        let forgetting = forgetting_score(mia_accuracy);
        Self {
            utility,
            forgetting,
            nomus: nomus(utility, forgetting, lambda),
            mia_accuracy,
            lambda,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub mia: MiaResult,
}

/// Utility on `test`, MIA on `forget` vs `unseen`, and NoMUS.
pub fn evaluate(model: &ModelState, bundle: &DatasetBundle, lambda: f64) -> Result<Evaluation> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let utility = accuracy(model, &bundle.test)?;
    let mia = fit_mia(
        &collect_losses(model, &bundle.forget)?,
        &collect_losses(model, &bundle.unseen)?,
    )?;
    Ok(Evaluation {
        metrics: Metrics::from_parts(utility, mia.accuracy, lambda),
        mia,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forgetting_examples() {
        assert_eq!(forgetting_score(0.5), 0.0);
        assert_eq!(forgetting_score(1.0), 0.5);
        assert!((forgetting_score(0.473) - 0.027).abs() < 1e-12);
    }

    #[test]
    fn nomus_examples() {
        assert!((nomus(0.5925, 0.0061, 0.5) - 0.79015).abs() < 1e-12);
        assert!((nomus(0.5913, 0.1852, 0.5) - 0.61045).abs() < 1e-12);
        assert_eq!(nomus(1.0, 0.0, 0.5), 1.0);
    }

    #[test]
    fn separated_losses_are_detected() {
        let f: Vec<f64> = (0..50).map(|i| 0.01 * i as f64).collect();
        let u: Vec<f64> = (0..50).map(|i| 2.0 + 0.01 * i as f64).collect();
        let r = fit_mia(&f, &u).unwrap();
        assert!(r.accuracy >= 0.99, "{}", r.accuracy);
        assert!(r.weight < 0.0, "low loss should mean forget");
        assert!(r.predicts_forget(0.1) && !r.predicts_forget(2.3));
    }

    #[test]
    fn identical_lists_are_chance() {
        let f: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let r = fit_mia(&f, &f).unwrap();
        assert!((r.accuracy - r.majority_prior).abs() <= 0.02);
    }

    #[test]
    fn degenerate_input_reports_prior() {
        let r = fit_mia(&[1.0; 3], &[1.0; 5]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.accuracy, 5.0 / 8.0);
    }

    #[test]
    fn empty_or_bad_input_rejected() {
        assert!(fit_mia(&[], &[1.0]).is_err());
        assert!(fit_mia(&[f64::NAN], &[1.0]).is_err());
    }
}
