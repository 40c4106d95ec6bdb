//! Sample-wise adversarial noise for the forget set.
//!
//! Multi-step projected sign-gradient ascent on the cross-entropy:
//!
//! ```text
//! x'_0     = x
//! x'_{t+1} = Clip_{x,eps}( x'_t + alpha * sign(grad_x CE(theta, x'_t, y)) )
//! delta    = x'_T - x
//! ```
//!
//! `Clip_{x,eps}` projects onto the l-infinity ball of radius `eps` around `x`
//! and then onto the pixel bounds. There is no random start, and
//! `sign(0) = 0`, so the attack is a pure function of its inputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_png, DatasetBundle, ImageRecord};
use crate::error::{Error, Result};
use crate::nn::{loss_and_grads, ModelState, Reduction};
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvConfig {
    pub steps: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub pixel_min: f64,
    pub pixel_max: f64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            steps: 7,
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            pixel_min: 0.0,
            pixel_max: 1.0,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("attack needs at least one step"));
        }
        self.validate_budget()
    }

    /// Checks everything but the step count (the noise ablation allows zero).
    pub(crate) fn validate_budget(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= self.epsilon) {
            return Err(Error::config(format!(
                "need 0 < alpha <= epsilon, got alpha={} epsilon={}",
                self.alpha, self.epsilon
            )));
        }
        if !(self.pixel_min < self.pixel_max) {
            return Err(Error::config("pixel_min must be below pixel_max"));
        }
        Ok(())
    }
}

/// Noise for one forget record.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePair {
    /// Position of the record in the forget split.
    pub index: usize,
    /// `delta`, same shape as the image.
    pub noise: Tensor,
}

impl NoisePair {
    pub fn linf(&self) -> f32 {
        self.noise.max_abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Direction {
    /// Increase the loss (adversarial noise).
    Ascent,
    /// Decrease the loss (error-minimising noise).
    Descent,
}

fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// Projected sign-gradient steps on `delta`, starting from `init` (zero when
/// absent). Per step: add `±alpha * sign(g)`, clamp to `[-eps, eps]`, then
/// clamp so `x + delta` stays inside the pixel bounds.
pub(crate) fn projected_sign_steps<S: Scalar>(
    model: &ModelState<S>,
    x: &Tensor<S>,
    y: &[usize],
    cfg: &AdvConfig,
    direction: Direction,
    init: Option<Tensor<S>>,
) -> Result<Tensor<S>> {
    let (lo, hi): (S, S) = (lit(cfg.pixel_min), lit(cfg.pixel_max));
    if x.data().iter().any(|&v| !(v >= lo && v <= hi)) {
        return Err(Error::contract("attack input outside pixel bounds"));
    }
    let (eps, alpha): (S, S) = (lit(cfg.epsilon), lit(cfg.alpha));
    let step = match direction {
        Direction::Ascent => alpha,
        Direction::Descent => -alpha,
    };
    let project = |delta: &mut [S]| {
        for (d, &xv) in delta.iter_mut().zip(x.data()) {
            *d = d.max(-eps).min(eps);
            *d = d.max(lo - xv).min(hi - xv);
        }
    };
    let mut delta = match init {
        Some(d) => {
            if d.shape() != x.shape() {
                return Err(Error::contract("initial noise shape differs from input"));
            }
            d
        }
        None => Tensor::zeros(x.shape()),
    };
    project(delta.data_mut());
    for _ in 0..cfg.steps {
        let adv = Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(delta.data())
                .map(|(&xv, &d)| (xv + d).max(lo).min(hi))
                .collect(),
        )?;
        // Sum reduction: each row's gradient is its own sample gradient, so
        // the result does not depend on how the forget set is batched.
        let g = loss_and_grads(model, &adv, y, Reduction::Sum, false, true)?
            .input
            .expect("requested");
        for (d, &gv) in delta.data_mut().iter_mut().zip(g.data()) {
            *d += step * sign(gv);
        }
        project(delta.data_mut());
    }
    Ok(delta)
}

/// PGD noise for a batch `x` of shape `(B, C, H, W)` with labels `y`.
pub fn pgd_attack<S: Scalar>(
    model: &ModelState<S>,
    x: &Tensor<S>,
    y: &[usize],
    cfg: &AdvConfig,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    projected_sign_steps(model, x, y, cfg, Direction::Ascent, None)
}

/// Noise for every record, in order, computed `batch_size` records at a time.
pub fn attack_records(
    model: &ModelState,
    records: &[ImageRecord],
    cfg: &AdvConfig,
    batch_size: usize,
) -> Result<Vec<NoisePair>> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::config("no records to attack"));
    }
    let mut out = Vec::with_capacity(records.len());
    for (bi, chunk) in records.chunks(batch_size.max(1)).enumerate() {
        let (x, y) = crate::data::stack_records(chunk)?;
        let delta = pgd_attack(model, &x, &y, cfg)?;
        for i in 0..chunk.len() {
            out.push(NoisePair {
                index: bi * batch_size.max(1) + i,
                noise: delta.row_tensor(i),
            });
        }
    }
    Ok(out)
}

/// Records per attack batch.
pub const ATTACK_BATCH: usize = 64;

/// One noise per forget record, order preserved.
pub fn attack_forget_set(
    model: &ModelState,
    bundle: &DatasetBundle,
    cfg: &AdvConfig,
) -> Result<Vec<NoisePair>> {
    if bundle.forget.is_empty() {
        return Err(Error::config("forget set is empty"));
    }
    attack_records(model, &bundle.forget, cfg, ATTACK_BATCH)
}

#[derive(Serialize)]
struct RawNoise<'a> {
    index: usize,
    file: String,
    shape: &'a [usize],
    values: &'a [f32],
}

/// Writes `noise_XXXXX.png` per pair (`delta / (2 eps) + 0.5` mapped to 8 bits)
/// and the raw values to `noises.json`. Returns the number of PNGs written.
pub fn export_noises(pairs: &[NoisePair], epsilon: f64, dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scale = (0.5 / epsilon) as f32;
    let mut raw = Vec::with_capacity(pairs.len());
    for p in pairs {
        let file = format!("noise_{:05}.png", p.index);
        let vis = p.noise.map(|d| d * scale + 0.5);
        write_png(&vis, &dir.join(&file))?;
        raw.push(RawNoise {
            index: p.index,
            file,
            shape: p.noise.shape(),
            values: p.noise.data(),
        });
    }
    let path = dir.join("noises.json");
    let json = serde_json::to_vec(&raw).expect("noise serialises");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(pairs.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, LayerSpec};

    fn zero_conv_model() -> ModelState {
        let mut m = build_model(3, [1, 8, 8], 0).unwrap();
        for l in &mut m.layers {
            if matches!(l.spec, LayerSpec::Conv(_)) {
                l.weight.data_mut().fill(0.0);
            }
        }
        m
    }

    #[test]
    fn zero_gradient_gives_zero_noise() {
        let m = zero_conv_model();
        let x = Tensor::filled(&[2, 1, 8, 8], 0.4f32);
        let d = pgd_attack(&m, &x, &[0, 2], &AdvConfig::default()).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_moves_by_alpha_along_gradient_sign() {
        let m = build_model(3, [1, 8, 8], 1).unwrap();
        let x = Tensor::filled(&[1, 1, 8, 8], 0.5f32);
        let cfg = AdvConfig {
            steps: 1,
            ..AdvConfig::default()
        };
        let g = crate::nn::grad_wrt_input(&m, &x, &[1]).unwrap();
        let d = pgd_attack(&m, &x, &[1], &cfg).unwrap();
        let alpha = (2.0 / 255.0) as f32;
        for (&dv, &gv) in d.data().iter().zip(g.data()) {
            let want = if gv > 0.0 { alpha } else if gv < 0.0 { -alpha } else { 0.0 };
            assert_eq!(dv, want);
        }
    }

    #[test]
    fn pixel_bounds_clip_the_step() {
        let m = build_model(3, [1, 8, 8], 1).unwrap();
        let x = Tensor::filled(&[1, 1, 8, 8], 1.0f32);
        let d = pgd_attack(&m, &x, &[1], &AdvConfig::default()).unwrap();
        assert!(d.data().iter().all(|&v| v <= 0.0 && v >= -(8.0 / 255.0) as f32));
    }

    #[test]
    fn config_validation() {
        assert!(AdvConfig::default().validate().is_ok());
        assert!(AdvConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(AdvConfig { alpha: 0.1, ..Default::default() }.validate().is_err());
        assert!(AdvConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn out_of_bounds_input_rejected() {
        let m = build_model(3, [1, 8, 8], 1).unwrap();
        let x = Tensor::filled(&[1, 1, 8, 8], 1.5f32);
        assert!(matches!(pgd_attack(&m, &x, &[0], &AdvConfig::default()), Err(Error::Contract(_))));
    }
}
