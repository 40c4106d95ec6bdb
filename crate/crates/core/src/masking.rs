//! Filter-level masks: scoring, selection, re-initialisation.
//!
//! The attack-guided score of output filter `f` in a conv layer is
//!
//! ```text
//! score_f = mean over (in_channels x kH x kW) of | G_noise - G_img |
//! ```
//!
//! where `G_img` is the forget-set mean weight gradient on the raw images and
//! `G_noise` the same gradient with each image replaced by its noise, shifted
//! by +0.5 into the pixel range. Within every conv layer the filters whose
//! score falls below the layer median are reset.

use std::fmt::Write as _;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::attack::{projected_sign_steps, AdvConfig, Direction, NoisePair};
use crate::data::{stack_records, ImageRecord};
use crate::error::{Error, Result};
use crate::nn::{loss_and_grads, LayerSpec, ModelState, Reduction};
use crate::seed::{self, streams};
use crate::tensor::Tensor;

/// Offset that centres a noise in `[-eps, eps]` inside `[0, 1]`.
pub const NOISE_INPUT_OFFSET: f32 = 0.5;

const SCORE_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    /// Conv layer id, e.g. `conv2`.
    pub id: String,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterScores {
    pub layers: Vec<LayerScores>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    pub id: String,
    /// `true` = reset this output filter.
    pub bits: Vec<bool>,
}

impl LayerMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn masked(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterMask {
    pub layers: Vec<LayerMask>,
}

impl FilterMask {
    /// All-false mask shaped like the model's conv layers.
    pub fn empty(model: &ModelState) -> Self {
        Self {
            layers: conv_ids(model)
                .into_iter()
                .map(|(_, id, n)| LayerMask {
                    id,
                    bits: vec![false; n],
                })
                .collect(),
        }
    }

    pub fn total_masked(&self) -> usize {
        self.layers.iter().map(LayerMask::count).sum()
    }

    /// One line per layer: `<layer-id> <bitstring>`, bit `i` = filter `i`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            let bits: String = l.bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
            writeln!(s, "{} {}", l.id, bits).expect("write to string");
        }
        s
    }

    /// Parses [`FilterMask::to_text`] output. Blank lines and `#` comments are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |n: usize, m: &str| Error::Format {
            what: "mask file",
            message: format!("line {n}: {m}"),
        };
        let mut layers = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(id), Some(bits), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(i + 1, "expected `<layer-id> <bits>`"));
            };
            let bits = bits
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    _ => Err(bad(i + 1, "bits must be 0 or 1")),
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerMask { id: id.to_string(), bits });
        }
        Ok(Self { layers })
    }

    pub fn checksum(&self) -> String {
        crate::checksum::sha256_hex(self.to_text().as_bytes())
    }
}

/// `(layer index, id, out_filters)` for every conv layer.
fn conv_ids(model: &ModelState) -> Vec<(usize, String, usize)> {
    let ids = model.layer_ids();
    model
        .conv_layers()
        .map(|(i, c)| (i, ids[i].clone(), c.out_filters))
        .collect()
}

/// Forget-set mean weight gradient of every conv layer, accumulated in f64.
fn mean_conv_grads(model: &ModelState, images: &[Tensor], labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    let convs = conv_ids(model);
    let mut acc: Vec<Vec<f64>> = convs.iter().map(|&(i, _, _)| vec![0.0; model.layers[i].weight.len()]).collect();
    for (imgs, ys) in images.chunks(SCORE_BATCH).zip(labels.chunks(SCORE_BATCH)) {
        let batch = Tensor::stack(imgs)?;
        let g = loss_and_grads(model, &batch, ys, Reduction::Sum, true, false)?
            .params
            .expect("requested");
        for (a, &(li, _, _)) in acc.iter_mut().zip(&convs) {
            for (s, v) in a.iter_mut().zip(g.layers[li].weight.data()) {
                *s += *v as f64;
            }
        }
    }
    let n = images.len() as f64;
    for a in &mut acc {
        a.iter_mut().for_each(|v| *v /= n);
    }
    Ok(acc)
}

fn per_filter_mean(model: &ModelState, values: Vec<Vec<f64>>) -> FilterScores {
    FilterScores {
        layers: conv_ids(model)
            .into_iter()
            .zip(values)
            .map(|((_, id, n), v)| {
                let per = v.len() / n;
                LayerScores {
                    id,
                    scores: v.chunks(per).map(|c| c.iter().sum::<f64>() / per as f64).collect(),
                }
            })
            .collect(),
    }
}

/// Noise shifted into the pixel range, as fed to the model for scoring.
pub fn noise_input(noise: &Tensor) -> Tensor {
    noise.map(|d| (d + NOISE_INPUT_OFFSET).clamp(0.0, 1.0))
}

/// Per-filter mean of `|G_noise - G_img|` for every conv layer.
pub fn gradient_discrepancy_scores(
    model: &ModelState,
    forget: &[ImageRecord],
    noises: &[NoisePair],
) -> Result<FilterScores> {
    if forget.is_empty() {
        return Err(Error::config("forget set is empty"));
    }
    if noises.len() != forget.len() {
        return Err(Error::contract(format!(
            "{} noises for {} forget records",
            noises.len(),
            forget.len()
        )));
    }
    for (i, (p, r)) in noises.iter().zip(forget).enumerate() {
        if p.index != i || p.noise.shape() != r.image.shape() {
            return Err(Error::contract(format!("noise {i} is not aligned with forget record {i}")));
        }
    }
    let labels: Vec<usize> = forget.iter().map(|r| r.label).collect();
    let raw: Vec<Tensor> = forget.iter().map(|r| r.image.clone()).collect();
    let noisy: Vec<Tensor> = noises.iter().map(|p| noise_input(&p.noise)).collect();
    let g_img = mean_conv_grads(model, &raw, &labels)?;
    let g_noise = mean_conv_grads(model, &noisy, &labels)?;
    let diff = g_img
        .into_iter()
        .zip(g_noise)
        .map(|(a, b)| a.iter().zip(&b).map(|(x, y)| (y - x).abs()).collect())
        .collect();
    Ok(per_filter_mean(model, diff))
}

/// Per-filter mean of `|G_img|` on the forget set.
pub fn forget_gradient_scores(model: &ModelState, forget: &[ImageRecord]) -> Result<FilterScores> {
    if forget.is_empty() {
        return Err(Error::config("forget set is empty"));
    }
    let labels: Vec<usize> = forget.iter().map(|r| r.label).collect();
    let raw: Vec<Tensor> = forget.iter().map(|r| r.image.clone()).collect();
    let g = mean_conv_grads(model, &raw, &labels)?;
    Ok(per_filter_mean(
        model,
        g.into_iter().map(|v| v.into_iter().map(f64::abs).collect()).collect(),
    ))
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!("mask ratio must be in [0, 1), got {ratio}")));
    }
    Ok(())
}

/// Number of filters masked per layer: `floor(ratio * out_filters)`.
pub fn mask_count(ratio: f64, out_filters: usize) -> usize {
    (ratio * out_filters as f64).floor() as usize
}

/// Marks exactly `floor(ratio * n)` filters per layer, taking the lowest
/// (`lowest = true`) or highest scores; equal scores go to lower indices first.
fn select(scores: &FilterScores, ratio: f64, lowest: bool) -> Result<FilterMask> {
    check_ratio(ratio)?;
    let mut layers = Vec::with_capacity(scores.layers.len());
    for l in &scores.layers {
        let n = l.scores.len();
        if n < 2 {
            return Err(Error::config(format!("layer {} has fewer than 2 filters", l.id)));
        }
        if l.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::contract(format!("layer {} has non-finite scores", l.id)));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let ord = l.scores[a].total_cmp(&l.scores[b]);
            let ord = if lowest { ord } else { ord.reverse() };
            ord.then(a.cmp(&b))
        });
        let mut bits = vec![false; n];
        for &f in &order[..mask_count(ratio, n)] {
            bits[f] = true;
        }
        layers.push(LayerMask { id: l.id.clone(), bits });
    }
    Ok(FilterMask { layers })
}

/// Masks the filters below the per-layer `ratio`-quantile (the median at 0.5).
pub fn build_mask(scores: &FilterScores, ratio: f64) -> Result<FilterMask> {
    select(scores, ratio, true)
}

/// Masks the `ratio` fraction of filters with the largest forget-set gradient.
pub fn top_gradient_mask(model: &ModelState, forget: &[ImageRecord], ratio: f64) -> Result<FilterMask> {
    check_ratio(ratio)?;
    select(&forget_gradient_scores(model, forget)?, ratio, false)
}

/// Uniformly random `floor(ratio * n)` filters per layer.
pub fn random_mask(model: &ModelState, ratio: f64, seed: u64) -> Result<FilterMask> {
    check_ratio(ratio)?;
    let mut layers = Vec::new();
    for (li, id, n) in conv_ids(model) {
        if n < 2 {
            return Err(Error::config(format!("layer {id} has fewer than 2 filters")));
        }
        let mut rng = seed::rng_for(seed::derive(seed, streams::RANDOM_MASK), li as u64);
        let mut bits = vec![false; n];
        for f in index::sample(&mut rng, n, mask_count(ratio, n)) {
            bits[f] = true;
        }
        layers.push(LayerMask { id, bits });
    }
    Ok(FilterMask { layers })
}

/// Error-minimising noise ablation: noise starts uniform in `[-eps, eps]`,
/// takes `cfg.steps` projected sign-gradient *descent* steps on the forget
/// cross-entropy, and is then scored and masked like the adversarial noise.
/// Returns the mask and the optimised noise.
pub fn random_noise_mask(
    model: &ModelState,
    forget: &[ImageRecord],
    cfg: &AdvConfig,
    ratio: f64,
    seed: u64,
) -> Result<(FilterMask, Vec<NoisePair>)> {
    check_ratio(ratio)?;
    cfg.validate_budget()?;
    if forget.is_empty() {
        return Err(Error::config("forget set is empty"));
    }
    let noises = error_minimizing_noise(model, forget, cfg, seed)?;
    let scores = gradient_discrepancy_scores(model, forget, &noises)?;
    Ok((build_mask(&scores, ratio)?, noises))
}

/// The optimised noise used by [`random_noise_mask`].
pub fn error_minimizing_noise(
    model: &ModelState,
    forget: &[ImageRecord],
    cfg: &AdvConfig,
    seed: u64,
) -> Result<Vec<NoisePair>> {
    use rand::Rng;
    let mut rng = seed::rng_for(seed, streams::RANDOM_NOISE);
    let mut out = Vec::with_capacity(forget.len());
    for (bi, chunk) in forget.chunks(SCORE_BATCH).enumerate() {
        let (x, y) = stack_records(chunk)?;
        let init: Vec<f32> = (0..x.len())
            .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * cfg.epsilon) as f32)
            .collect();
        let init = Tensor::new(x.shape().to_vec(), init)?;
        let delta = projected_sign_steps(model, &x, &y, cfg, Direction::Descent, Some(init))?;
        for i in 0..chunk.len() {
            out.push(NoisePair {
                index: bi * SCORE_BATCH + i,
                noise: delta.row_tensor(i),
            });
        }
    }
    Ok(out)
}

/// Re-draws the weights of every masked filter from its layer's recorded
/// init distribution. Everything else (unmasked filters, all biases, dense
/// layers) is left bit-identical.
pub fn reset_filters(model: &ModelState, mask: &FilterMask, seed: u64) -> Result<ModelState> {
    let ids = model.layer_ids();
    let mut out = model.clone();
    for lm in &mask.layers {
        let li = ids
            .iter()
            .position(|id| id == &lm.id)
            .ok_or_else(|| Error::contract(format!("mask layer {} not in model", lm.id)))?;
        let layer = &mut out.layers[li];
        let LayerSpec::Conv(spec) = &layer.spec else {
            return Err(Error::contract(format!("mask layer {} is not convolutional", lm.id)));
        };
        if lm.bits.len() != spec.out_filters {
            return Err(Error::contract(format!(
                "mask for {} has {} bits, layer has {} filters",
                lm.id,
                lm.bits.len(),
                spec.out_filters
            )));
        }
        let per = spec.filter_len();
        let mut rng = seed::rng_for(seed::derive(seed, streams::RESET), li as u64);
        let init = layer.init.clone();
        let w = layer.weight.data_mut();
        for f in lm.masked() {
            for v in &mut w[f * per..(f + 1) * per] {
                *v = init.sample(&mut rng) as f32;
            }
        }
    }
    Ok(out)
}
