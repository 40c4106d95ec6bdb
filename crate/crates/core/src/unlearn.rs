//! Unlearning methods behind one registry.
//!
//! `aru` runs attack -> score -> mask -> reset -> fine-tune. The baselines
//! are retraining from scratch, plain fine-tuning, gradient ascent on the
//! forget set (`neggrad`), joint descent/ascent (`advneggrad`), fine-tuning
//! only the last k layers (`cf_k`), and three masking ablations that replace
//! the attack-guided mask with a random, top-gradient or error-minimising
//! noise mask.
//!
//! Every run carries an access audit recording which split each consumed
//! sample came from and in which stage.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{attack_forget_set, AdvConfig};
use crate::data::{batch_iterator, DatasetBundle, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::masking::{
    build_mask, gradient_discrepancy_scores, random_mask, random_noise_mask, reset_filters,
    top_gradient_mask, FilterMask,
};
use crate::nn::{
    build_model_with, loss_and_grads, sgd_train, ArchConfig, EpochLog, ModelState, Reduction, Sgd,
    TrainConfig, Trainable,
};
use crate::seed::{self, streams};
use crate::tensor::lit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Aru,
    Retrain,
    Finetune,
    #[serde(rename = "neggrad")]
    NegGrad,
    #[serde(rename = "advneggrad")]
    AdvNegGrad,
    CfK,
    RandomMask,
    TopGradMask,
    RandomNoiseMask,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Aru,
        Method::Retrain,
        Method::Finetune,
        Method::NegGrad,
        Method::AdvNegGrad,
        Method::CfK,
        Method::RandomMask,
        Method::TopGradMask,
        Method::RandomNoiseMask,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Aru => "aru",
            Method::Retrain => "retrain",
            Method::Finetune => "finetune",
            Method::NegGrad => "neggrad",
            Method::AdvNegGrad => "advneggrad",
            Method::CfK => "cf_k",
            Method::RandomMask => "random_mask",
            Method::TopGradMask => "top_grad_mask",
            Method::RandomNoiseMask => "random_noise_mask",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Method::ALL.iter().map(|m| m.id()).collect();
                Error::config(format!("unknown method {s:?}; known: {}", known.join(", ")))
            })
    }
}

/// Mask strategies for [`masked_variant`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Attack-guided gradient discrepancy (what `aru` uses).
    Adversarial,
    Random,
    TopGradient,
    RandomNoise,
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "aru" | "adversarial" => MaskStrategy::Adversarial,
            "random" => MaskStrategy::Random,
            "top_grad" | "top_gradient" => MaskStrategy::TopGradient,
            "random_noise" => MaskStrategy::RandomNoise,
            _ => {
                return Err(Error::config(format!(
                    "unknown mask strategy {s:?}; known: aru, random, top_grad, random_noise"
                )))
            }
        })
    }
}

/// Hyperparameters shared by all methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodParams {
    /// Fraction of filters reset per conv layer.
    pub ratio: f64,
    /// Number of trailing parameterised layers `cf_k` trains.
    pub k: usize,
    pub adv: AdvConfig,
    /// Used for every fine-tuning phase and for the ascent baselines.
    pub finetune: TrainConfig,
    /// Used by `retrain`.
    pub retrain: TrainConfig,
    /// Weight on the forget-set term of `advneggrad`.
    pub forget_weight: f64,
    /// Epoch override for `neggrad` / `advneggrad` (early stop).
    pub ascent_epochs: Option<usize>,
}

impl Default for MethodParams {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            k: 3,
            adv: AdvConfig::default(),
            finetune: TrainConfig::finetune(),
            retrain: TrainConfig::original(),
            forget_weight: 1.0,
            ascent_epochs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRequest {
    pub method: Method,
    pub params: MethodParams,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Noise generation (adversarial or error-minimising).
    Attack,
    /// Gradient passes used only to score filters.
    Scoring,
    /// Gradient steps that update parameters.
    Training,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub stage: Stage,
    pub split: Split,
    /// Sample reads, counting repeats across epochs/steps.
    pub samples: usize,
    pub identities: BTreeSet<u64>,
}

/// Which split each consumed sample came from, per stage.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<AccessRecord>", from = "Vec<AccessRecord>")]
pub struct AccessAudit {
    entries: BTreeMap<(Stage, Split), (usize, BTreeSet<u64>)>,
}

impl AccessAudit {
    pub fn record<'a>(&mut self, stage: Stage, split: Split, records: impl IntoIterator<Item = &'a ImageRecord>) {
        let e = self.entries.entry((stage, split)).or_default();
        for r in records {
            e.0 += 1;
            e.1.insert(r.identity);
        }
    }

    /// Sample reads from `split` in `stage`.
    pub fn count(&self, stage: Stage, split: Split) -> usize {
        self.entries.get(&(stage, split)).map_or(0, |e| e.0)
    }

    /// Sample reads from `split` across all stages.
    pub fn split_total(&self, split: Split) -> usize {
        self.entries.iter().filter(|((_, s), _)| *s == split).map(|(_, e)| e.0).sum()
    }

    pub fn identities(&self, stage: Stage, split: Split) -> BTreeSet<u64> {
        self.entries.get(&(stage, split)).map(|e| e.1.clone()).unwrap_or_default()
    }

    pub fn records(&self) -> Vec<AccessRecord> {
        self.entries
            .iter()
            .map(|(&(stage, split), (n, ids))| AccessRecord {
                stage,
                split,
                samples: *n,
                identities: ids.clone(),
            })
            .collect()
    }
}

impl From<AccessAudit> for Vec<AccessRecord> {
    fn from(a: AccessAudit) -> Self {
        a.records()
    }
}

impl From<Vec<AccessRecord>> for AccessAudit {
    fn from(records: Vec<AccessRecord>) -> Self {
        let mut a = AccessAudit::default();
        for r in records {
            let e = a.entries.entry((r.stage, r.split)).or_default();
            e.0 += r.samples;
            e.1.extend(r.identities);
        }
        a
    }
}

/// One `advneggrad` step: `total = retain - forget_weight * forget`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub retain: f64,
    pub forget: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub request: UnlearnRequest,
    pub original_checksum: String,
    pub model_checksum: String,
    /// Excluded from equality-sensitive outputs; varies run to run.
    pub wall_clock_s: f64,
    pub epoch_logs: Vec<EpochLog>,
    pub step_losses: Vec<StepLoss>,
    pub mask: Option<FilterMask>,
    pub mask_checksum: Option<String>,
    pub audit: AccessAudit,
}

#[derive(Clone, Debug)]
pub struct UnlearnedModel {
    pub model: ModelState,
    pub provenance: Provenance,
}

/// Mutable state threaded through one method run.
struct Run {
    audit: AccessAudit,
    epoch_logs: Vec<EpochLog>,
    step_losses: Vec<StepLoss>,
    mask: Option<FilterMask>,
}

impl Run {
    fn new() -> Self {
        Self {
            audit: AccessAudit::default(),
            epoch_logs: Vec::new(),
            step_losses: Vec::new(),
            mask: None,
        }
    }

    fn train(
        &mut self,
        model: &ModelState,
        data: &[ImageRecord],
        split: Split,
        cfg: &TrainConfig,
        trainable: &Trainable,
    ) -> Result<ModelState> {
        let (m, logs) = sgd_train(model, data, cfg, trainable)?;
        for _ in 0..cfg.epochs {
            self.audit.record(Stage::Training, split, data);
        }
        self.epoch_logs.extend(logs);
        Ok(m)
    }

    fn finish(self, request: &UnlearnRequest, original: Option<&ModelState>, model: ModelState, started: Instant) -> UnlearnedModel {
        UnlearnedModel {
            provenance: Provenance {
                request: request.clone(),
                original_checksum: original.map(ModelState::checksum).unwrap_or_default(),
                model_checksum: model.checksum(),
                wall_clock_s: started.elapsed().as_secs_f64(),
                epoch_logs: self.epoch_logs,
                step_losses: self.step_losses,
                mask_checksum: self.mask.as_ref().map(FilterMask::checksum),
                mask: self.mask,
                audit: self.audit,
            },
            model,
        }
    }
}

fn require(records: &[ImageRecord], split: Split) -> Result<()> {
    if records.is_empty() {
        return Err(Error::config(format!("{split} split is empty")));
    }
    Ok(())
}

/// Dispatches `request` to its method.
pub fn run_unlearning(request: &UnlearnRequest, original: &ModelState, bundle: &DatasetBundle) -> Result<UnlearnedModel> {
    let p = &request.params;
    let s = request.seed;
    match request.method {
        Method::Aru => aru(original, bundle, p, s),
        Method::Retrain => retrain_scratch(bundle, &original.arch(), p, s),
        Method::Finetune => finetune(original, bundle, p, s),
        Method::NegGrad => neg_grad(original, bundle, p, s),
        Method::AdvNegGrad => adv_neg_grad(original, bundle, p, s),
        Method::CfK => cf_k(original, bundle, p, s),
        Method::RandomMask => masked_variant(original, bundle, MaskStrategy::Random, p, s),
        Method::TopGradMask => masked_variant(original, bundle, MaskStrategy::TopGradient, p, s),
        Method::RandomNoiseMask => masked_variant(original, bundle, MaskStrategy::RandomNoise, p, s),
    }
}

fn request(method: Method, params: &MethodParams, seed: u64) -> UnlearnRequest {
    UnlearnRequest {
        method,
        params: params.clone(),
        seed,
    }
}

/// The fine-tuning recipe with the run seed driving the shuffles.
fn ft_cfg(params: &MethodParams, seed: u64) -> TrainConfig {
    params.finetune.clone().with_seed(seed)
}

/// The mask `strategy` would reset for `theta`, without resetting or training.
pub fn strategy_mask(
    theta: &ModelState,
    bundle: &DatasetBundle,
    strategy: MaskStrategy,
    params: &MethodParams,
    seed: u64,
) -> Result<FilterMask> {
    make_mask(theta, bundle, strategy, params, seed, &mut Run::new())
}

/// Builds the mask for `strategy`, logging forget-set reads.
fn make_mask(
    theta: &ModelState,
    bundle: &DatasetBundle,
    strategy: MaskStrategy,
    params: &MethodParams,
    seed: u64,
    run: &mut Run,
) -> Result<FilterMask> {
    match strategy {
        MaskStrategy::Adversarial => {
            let noises = attack_forget_set(theta, bundle, &params.adv)?;
            for _ in 0..params.adv.steps {
                run.audit.record(Stage::Attack, Split::Forget, &bundle.forget);
            }
            let scores = gradient_discrepancy_scores(theta, &bundle.forget, &noises)?;
            run.audit.record(Stage::Scoring, Split::Forget, &bundle.forget);
            build_mask(&scores, params.ratio)
        }
        MaskStrategy::Random => random_mask(theta, params.ratio, seed),
        MaskStrategy::TopGradient => {
            let m = top_gradient_mask(theta, &bundle.forget, params.ratio)?;
            run.audit.record(Stage::Scoring, Split::Forget, &bundle.forget);
            Ok(m)
        }
        MaskStrategy::RandomNoise => {
            let (m, _) = random_noise_mask(theta, &bundle.forget, &params.adv, params.ratio, seed)?;
            for _ in 0..params.adv.steps {
                run.audit.record(Stage::Attack, Split::Forget, &bundle.forget);
            }
            run.audit.record(Stage::Scoring, Split::Forget, &bundle.forget);
            Ok(m)
        }
    }
}

fn mask_reset_finetune(
    theta: &ModelState,
    bundle: &DatasetBundle,
    strategy: MaskStrategy,
    method: Method,
    params: &MethodParams,
    seed: u64,
) -> Result<UnlearnedModel> {
    let started = Instant::now();
    require(&bundle.retain, Split::Retain)?;
    let mut run = Run::new();
    let mask = make_mask(theta, bundle, strategy, params, seed, &mut run)?;
    let reset = reset_filters(theta, &mask, seed)?;
    run.mask = Some(mask);
    let model = run.train(&reset, &bundle.retain, Split::Retain, &ft_cfg(params, seed), &Trainable::All)?;
    Ok(run.finish(&request(method, params, seed), Some(theta), model, started))
}

/// Attack the forget set, reset the filters whose gradient barely changes
/// between image and noise, then fine-tune on the retain set.
pub fn aru(theta: &ModelState, bundle: &DatasetBundle, params: &MethodParams, seed: u64) -> Result<UnlearnedModel> {
    mask_reset_finetune(theta, bundle, MaskStrategy::Adversarial, Method::Aru, params, seed)
}

/// Reset with a non-adversarial mask strategy, then fine-tune exactly as `aru` does.
pub fn masked_variant(
    theta: &ModelState,
    bundle: &DatasetBundle,
    strategy: MaskStrategy,
    params: &MethodParams,
    seed: u64,
) -> Result<UnlearnedModel> {
    let method = match strategy {
        MaskStrategy::Adversarial => Method::Aru,
        MaskStrategy::Random => Method::RandomMask,
        MaskStrategy::TopGradient => Method::TopGradMask,
        MaskStrategy::RandomNoise => Method::RandomNoiseMask,
    };
    mask_reset_finetune(theta, bundle, strategy, method, params, seed)
}

/// A freshly initialised model trained on the retain split only.
pub fn retrain_scratch(
    bundle: &DatasetBundle,
    arch: &ArchConfig,
    params: &MethodParams,
    seed: u64,
) -> Result<UnlearnedModel> {
    let started = Instant::now();
    require(&bundle.retain, Split::Retain)?;
    let fresh = build_model_with(
        arch,
        bundle.num_classes,
        bundle.image_shape,
        seed::derive(seed, streams::RETRAIN_INIT),
    )?;
    let mut run = Run::new();
    let cfg = params.retrain.clone().with_seed(seed);
    let model = run.train(&fresh, &bundle.retain, Split::Retain, &cfg, &Trainable::All)?;
    Ok(run.finish(&request(Method::Retrain, params, seed), None, model, started))
}

pub fn finetune(theta: &ModelState, bundle: &DatasetBundle, params: &MethodParams, seed: u64) -> Result<UnlearnedModel> {
    let started = Instant::now();
    require(&bundle.retain, Split::Retain)?;
    let mut run = Run::new();
    let model = run.train(theta, &bundle.retain, Split::Retain, &ft_cfg(params, seed), &Trainable::All)?;
    Ok(run.finish(&request(Method::Finetune, params, seed), Some(theta), model, started))
}

/// Fine-tunes only the last `params.k` parameterised layers.
pub fn cf_k(theta: &ModelState, bundle: &DatasetBundle, params: &MethodParams, seed: u64) -> Result<UnlearnedModel> {
    let started = Instant::now();
    require(&bundle.retain, Split::Retain)?;
    let n = theta.layers.len();
    if params.k == 0 || params.k > n {
        return Err(Error::config(format!("cf_k needs 1 <= k <= {n}, got {}", params.k)));
    }
    let mut run = Run::new();
    let model = run.train(
        theta,
        &bundle.retain,
        Split::Retain,
        &ft_cfg(params, seed),
        &Trainable::LastK(params.k),
    )?;
    Ok(run.finish(&request(Method::CfK, params, seed), Some(theta), model, started))
}

fn ascent_cfg(params: &MethodParams, seed: u64) -> Result<TrainConfig> {
    let mut cfg = ft_cfg(params, seed);
    if let Some(e) = params.ascent_epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Gradient ascent on the forget-set cross-entropy.
pub fn neg_grad(theta: &ModelState, bundle: &DatasetBundle, params: &MethodParams, seed: u64) -> Result<UnlearnedModel> {
    let started = Instant::now();
    require(&bundle.forget, Split::Forget)?;
    let cfg = ascent_cfg(params, seed)?;
    let mut run = Run::new();
    let mut model = theta.clone();
    let mut opt = Sgd::new(&cfg, Trainable::All, &model);
    let forget = &bundle.forget;
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut correct) = (0.0, 0);
        for batch in batch_iterator(forget, cfg.batch_size, Some(cfg.epoch_seed(epoch)))? {
            run.audit.record(Stage::Training, Split::Forget, batch.indices.iter().map(|&i| &forget[i]));
            let out = loss_and_grads(&model, &batch.images, &batch.labels, Reduction::Mean, true, false)?;
            loss_sum += out.mean_loss * batch.labels.len() as f64;
            correct += out.correct;
            let mut g = out.params.expect("requested");
            g.negate();
            opt.step(&mut model, &g);
        }
        if !model.all_finite() {
            return Err(Error::config(format!("gradient ascent diverged in epoch {epoch}")));
        }
        run.epoch_logs.push(EpochLog {
            epoch,
            loss: loss_sum / forget.len() as f64,
            accuracy: correct as f64 / forget.len() as f64,
        });
    }
    Ok(run.finish(&request(Method::NegGrad, params, seed), Some(theta), model, started))
}

/// Per step: descend on a retain batch and ascend on a forget batch,
/// `loss = CE(retain) - forget_weight * CE(forget)`. The epoch walks the
/// retain set; forget batches are drawn from a reshuffled cycle over the
/// forget set. A zero weight skips the forget term entirely.
pub fn adv_neg_grad(
    theta: &ModelState,
    bundle: &DatasetBundle,
    params: &MethodParams,
    seed: u64,
) -> Result<UnlearnedModel> {
    let started = Instant::now();
    require(&bundle.retain, Split::Retain)?;
    require(&bundle.forget, Split::Forget)?;
    if !params.forget_weight.is_finite() || params.forget_weight < 0.0 {
        return Err(Error::config("forget_weight must be finite and >= 0"));
    }
    let cfg = ascent_cfg(params, seed)?;
    let (retain, forget) = (&bundle.retain, &bundle.forget);
    let use_forget = params.forget_weight > 0.0;
    let mut run = Run::new();
    let mut model = theta.clone();
    let mut opt = Sgd::new(&cfg, Trainable::All, &model);

    let cycle_seed = |cycle: u64| seed::derive(seed::derive(seed, streams::FORGET_CYCLE), cycle);
    let mut cycle = 0u64;
    let mut forget_batches = batch_iterator(forget, cfg.batch_size, Some(cycle_seed(cycle)))?;

    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut correct) = (0.0, 0);
        for batch in batch_iterator(retain, cfg.batch_size, Some(cfg.epoch_seed(epoch)))? {
            run.audit.record(Stage::Training, Split::Retain, batch.indices.iter().map(|&i| &retain[i]));
            let out = loss_and_grads(&model, &batch.images, &batch.labels, Reduction::Mean, true, false)?;
            loss_sum += out.mean_loss * batch.labels.len() as f64;
            correct += out.correct;
            let mut g = out.params.expect("requested");
            let mut forget_loss = 0.0;
            if use_forget {
                let fb = match forget_batches.next() {
                    Some(b) => b,
                    None => {
                        cycle += 1;
                        forget_batches = batch_iterator(forget, cfg.batch_size, Some(cycle_seed(cycle)))?;
                        forget_batches.next().expect("forget set is non-empty")
                    }
                };
                run.audit.record(Stage::Training, Split::Forget, fb.indices.iter().map(|&i| &forget[i]));
                let fo = loss_and_grads(&model, &fb.images, &fb.labels, Reduction::Mean, true, false)?;
                forget_loss = fo.mean_loss;
                g.add_scaled(fo.params.as_ref().expect("requested"), lit(-params.forget_weight));
            }
            run.step_losses.push(StepLoss {
                retain: out.mean_loss,
                forget: forget_loss,
                total: out.mean_loss - params.forget_weight * forget_loss,
            });
            opt.step(&mut model, &g);
        }
        if !model.all_finite() {
            return Err(Error::config(format!("advneggrad diverged in epoch {epoch}")));
        }
        run.epoch_logs.push(EpochLog {
            epoch,
            loss: loss_sum / retain.len() as f64,
            accuracy: correct as f64 / retain.len() as f64,
        });
    }
    Ok(run.finish(&request(Method::AdvNegGrad, params, seed), Some(theta), model, started))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_ids_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.id().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.id()));
        }
        assert!(matches!("scrub".parse::<Method>(), Err(Error::Config(_))));
    }

    #[test]
    fn mask_strategy_parse() {
        assert_eq!("random".parse::<MaskStrategy>().unwrap(), MaskStrategy::Random);
        assert_eq!("top_grad".parse::<MaskStrategy>().unwrap(), MaskStrategy::TopGradient);
        assert!("fisher".parse::<MaskStrategy>().is_err());
    }

    #[test]
    fn audit_counts_and_identities() {
        let rec = |id| ImageRecord {
            image: crate::tensor::Tensor::zeros(&[1, 1, 1]),
            label: 0,
            identity: id,
        };
        let rs = vec![rec(1), rec(2), rec(2)];
        let mut a = AccessAudit::default();
        a.record(Stage::Training, Split::Retain, &rs);
        a.record(Stage::Training, Split::Retain, &rs[..1]);
        assert_eq!(a.count(Stage::Training, Split::Retain), 4);
        assert_eq!(a.count(Stage::Training, Split::Forget), 0);
        assert_eq!(a.identities(Stage::Training, Split::Retain), BTreeSet::from([1, 2]));
        assert_eq!(a.records().len(), 1);
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<AccessAudit>(&json).unwrap(), a);
    }
}
