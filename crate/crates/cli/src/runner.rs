//! Multi-seed orchestration.
//!
//! The dataset is fixed by the dataset config (its own seed). Each run seed
//! drives the original model's init and shuffles and is passed on as the
//! unlearning seed.

use std::env;
use std::path::{Path, PathBuf};
use std::time::Instant;

use aru_core::attack::{attack_forget_set, export_noises};
use aru_core::data::DatasetBundle;
use aru_core::eval::evaluate;
use aru_core::nn::{accuracy, build_model_with, persist, sgd_train, ModelState, Trainable};
use aru_core::unlearn::{run_unlearning, Method, UnlearnRequest, UnlearnedModel};
use aru_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::report::{aggregate, DatasetSummary, OriginalRow, ResultRow, RunReport, SCHEMA_VERSION};

/// Overrides the original-model cache location (default `<output_dir>/cache`).
pub const CACHE_ENV: &str = "ARU_CACHE_DIR";

pub fn cache_dir(cfg: &ExperimentConfig) -> PathBuf {
    match env::var_os(CACHE_ENV) {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => cfg.output_dir.join("cache"),
    }
}

pub fn summarize(bundle: &DatasetBundle) -> DatasetSummary {
    DatasetSummary {
        checksum: bundle.checksum(),
        num_classes: bundle.num_classes,
        image_shape: bundle.image_shape,
        train: bundle.train.len(),
        forget: bundle.forget.len(),
        retain: bundle.retain.len(),
        test: bundle.test.len(),
        unseen: bundle.unseen.len(),
    }
}

/// Trains the original model on the full train split, or loads it from
/// `cache` when an earlier run used the same dataset, architecture, recipe
/// and seed.
pub fn train_original(
    cfg: &ExperimentConfig,
    bundle: &DatasetBundle,
    seed: u64,
    cache: Option<&Path>,
) -> Result<ModelState> {
    let key = cfg.original_key(&bundle.checksum());
    let path = cache.map(|d| d.join(format!("original_{}_seed{seed}.bin", &key[..16])));
    if let Some(p) = path.as_deref().filter(|p| p.exists()) {
        match persist::load(p) {
            Ok(m) => {
                log::info!("seed {seed}: original model from cache {}", p.display());
                return Ok(m);
            }
            Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", p.display()),
        }
    }
    log::info!("seed {seed}: training original model");
    let init = build_model_with(&cfg.arch, bundle.num_classes, bundle.image_shape, seed)?;
    let recipe = cfg.original.clone().with_seed(seed);
    let (model, logs) = sgd_train(&init, &bundle.train, &recipe, &Trainable::All)?;
    if let Some(last) = logs.last() {
        log::info!("seed {seed}: original train loss {:.4}, accuracy {:.4}", last.loss, last.accuracy);
    }
    if let Some(p) = &path {
        persist::save(&model, p)?;
    }
    Ok(model)
}

fn strip_wall_clock(r: &UnlearnedModel) -> serde_json::Value {
    let mut v = serde_json::to_value(&r.provenance).expect("provenance serialises");
    if let Some(o) = v.as_object_mut() {
        o.remove("wall_clock_s");
    }
    v
}

/// Runs every configured method for every seed and writes the reports.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let methods = cfg.resolve_methods()?;
    let bundle = cfg.dataset.load()?;
    log::info!(
        "dataset: {} train ({} forget / {} retain), {} test, {} unseen",
        bundle.train.len(),
        bundle.forget.len(),
        bundle.retain.len(),
        bundle.test.len(),
        bundle.unseen.len()
    );
    let cache = cache_dir(cfg);
    let mut originals = Vec::new();
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let theta = train_original(cfg, &bundle, seed, Some(&cache))?;
        let ev = evaluate(&theta, &bundle, cfg.lambda)?;
        originals.push(OriginalRow {
            seed,
            model_checksum: theta.checksum(),
            train_accuracy: accuracy(&theta, &bundle.train)?,
            metrics: ev.metrics,
        });
        for m in &methods {
            let started = Instant::now();
            let request = UnlearnRequest {
                method: m.method,
                params: m.params.clone(),
                seed,
            };
            let out = run_unlearning(&request, &theta, &bundle)?;
            let ev = evaluate(&out.model, &bundle, cfg.lambda)?;
            let wall = started.elapsed().as_secs_f64();
            log::info!(
                "seed {seed} {}: U {:.4} F {:.4} NoMUS {:.4} ({wall:.1}s)",
                m.label,
                ev.metrics.utility,
                ev.metrics.forgetting,
                ev.metrics.nomus
            );
            if cfg.export_artifacts && m.method == Method::Aru {
                let dir = cfg.output_dir.join("artifacts").join(format!("{}_seed{seed}", m.label));
                export_aru_artifacts(&theta, &bundle, &out, &m.params.adv, &dir)?;
            }
            results.push(ResultRow {
                method: m.label.clone(),
                seed,
                metrics: ev.metrics,
                mia_majority_prior: ev.mia.majority_prior,
                provenance: strip_wall_clock(&out),
                wall_clock_s: wall,
            });
        }
    }
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        dataset: summarize(&bundle),
        originals,
        aggregates: aggregate(&results),
        results,
    };
    report.write(&cfg.output_dir)?;
    Ok(report)
}

/// Writes `mask.txt` and the forget-set noise (one PNG per sample plus
/// `noises.json`) for one ARU run. The noise is recomputed from the original
/// model; the attack is deterministic so it matches what the run used.
pub fn export_aru_artifacts(
    theta: &ModelState,
    bundle: &DatasetBundle,
    out: &UnlearnedModel,
    adv: &aru_core::attack::AdvConfig,
    dir: &Path,
) -> Result<()> {
    let mask = out
        .provenance
        .mask
        .as_ref()
        .ok_or_else(|| Error::contract("ARU run carries no mask"))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("mask.txt");
    std::fs::write(&p, mask.to_text()).map_err(|e| Error::io(&p, e))?;
    let noises = attack_forget_set(theta, bundle, adv)?;
    export_noises(&noises, adv.epsilon, &dir.join("noise"))?;
    Ok(())
}
