//! Experiment configuration (TOML).
//!
//! A user file is merged over [`ExperimentConfig::default`], so every key is
//! optional. Tables merge key by key; arrays and scalars replace. Each entry
//! of `methods` is either a method id or a table with `id` plus overrides of
//! the `[defaults]` parameters for that method only; a `label` key names the
//! entry in reports (default: the id). Relative paths resolve against the
//! config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use aru_core::data::{generate_synthetic, load_directory_dataset, DatasetBundle, SyntheticConfig};
use aru_core::nn::{ArchConfig, TrainConfig};
use aru_core::unlearn::{Method, MethodParams};
use aru_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticConfig),
    Directory {
        path: PathBuf,
        /// Defaults to `<path>/labels.csv`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<PathBuf>,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<DatasetBundle> {
        match self {
            DatasetSpec::Synthetic(cfg) => generate_synthetic(cfg),
            DatasetSpec::Directory { path, labels } => load_directory_dataset(path, labels.as_deref()),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            DatasetSpec::Synthetic(_) => "synthetic",
            DatasetSpec::Directory { .. } => "directory",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MethodEntry {
    Id(String),
    Table {
        id: String,
        #[serde(flatten)]
        overrides: toml::Table,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub lambda: f64,
    /// Write masks and noise images for every `aru` run.
    pub export_artifacts: bool,
    pub dataset: DatasetSpec,
    pub arch: ArchConfig,
    /// Recipe for the original model.
    pub original: TrainConfig,
    /// Parameters shared by every method; `seed` fields inside the recipes
    /// are replaced by the run seed.
    pub defaults: MethodParams,
    pub methods: Vec<MethodEntry>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("aru-out"),
            seeds: (0..10).collect(),
            lambda: aru_core::eval::DEFAULT_LAMBDA,
            export_artifacts: false,
            dataset: DatasetSpec::Synthetic(SyntheticConfig::default()),
            arch: ArchConfig::default(),
            original: TrainConfig::original(),
            defaults: MethodParams::default(),
            methods: Method::ALL.iter().map(|m| MethodEntry::Id(m.id().to_string())).collect(),
        }
    }
}

/// A method with its fully merged parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedMethod {
    pub label: String,
    pub method: Method,
    pub params: MethodParams,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn to_value<T: Serialize>(v: &T) -> toml::Value {
    toml::Value::try_from(v).expect("config types serialise to TOML")
}

impl ExperimentConfig {
    /// Parses `text` over the defaults. `base_dir` anchors relative paths.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Format {
            what: "config",
            message: e.to_string(),
        })?;
        let mut merged = to_value(&Self::default());
        let mut user = toml::Value::Table(user);
        // A different dataset kind replaces the default dataset table outright.
        if let Some(ds) = user.get("dataset").and_then(|d| d.get("kind")).and_then(|k| k.as_str()) {
            if ds != Self::default().dataset.kind() {
                let t = merged.as_table_mut().expect("table");
                t.remove("dataset");
            }
        }
        if let Some(ds) = user.as_table_mut().and_then(|t| t.get_mut("dataset")).and_then(|d| d.as_table_mut()) {
            if !ds.contains_key("kind") {
                ds.insert("kind".into(), "synthetic".into());
            }
        }
        merge(&mut merged, user);
        let mut cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Format {
            what: "config",
            message: e.to_string(),
        })?;
        cfg.anchor(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, dir)
    }

    fn anchor(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let DatasetSpec::Directory { path, labels } = &mut self.dataset {
            fix(path);
            if let Some(l) = labels {
                fix(l);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("at least one method is required"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        self.original.validate()?;
        self.resolve_methods()?;
        Ok(())
    }

    /// Method ids parsed and their parameters merged over `defaults`.
    pub fn resolve_methods(&self) -> Result<Vec<ResolvedMethod>> {
        self.methods
            .iter()
            .map(|entry| {
                let (id, overrides) = match entry {
                    MethodEntry::Id(id) => (id, None),
                    MethodEntry::Table { id, overrides } => (id, Some(overrides)),
                };
                let method: Method = id.parse()?;
                let mut label = id.clone();
                let mut params = to_value(&self.defaults);
                if let Some(o) = overrides {
                    let mut o = o.clone();
                    match o.remove("label") {
                        Some(toml::Value::String(l)) => label = l,
                        Some(other) => return Err(Error::config(format!("method {id}: label must be a string, got {other}"))),
                        None => {}
                    }
                    merge(&mut params, toml::Value::Table(o));
                }
                let params: MethodParams = params.try_into().map_err(|e: toml::de::Error| Error::Format {
                    what: "config",
                    message: format!("method {id}: {e}"),
                })?;
                params.finetune.validate()?;
                params.retrain.validate()?;
                Ok(ResolvedMethod { label, method, params })
            })
            .collect::<Result<Vec<_>>>()
            .and_then(|all| {
                let mut seen = std::collections::BTreeSet::new();
                match all.iter().find(|r| !seen.insert(r.label.as_str())) {
                    Some(dup) => Err(Error::config(format!(
                        "method label {:?} appears twice; add distinct `label` keys",
                        dup.label
                    ))),
                    None => Ok(all),
                }
            })
    }

    /// The defaults as a commented TOML document.
    pub fn default_toml() -> String {
        let body = toml::to_string_pretty(&Self::default()).expect("defaults serialise");
        format!(
            "# ARU experiment configuration. Every key is optional; omitted keys keep these values.\n\
             # Relative paths resolve against this file's directory.\n\n{body}"
        )
    }

    /// Stable hash of everything that determines the original model.
    pub fn original_key(&self, bundle_fingerprint: &str) -> String {
        let key = serde_json::json!({
            "dataset": self.dataset,
            "bundle": bundle_fingerprint,
            "arch": self.arch,
            "original": self.original,
        });
        aru_core::checksum::sha256_hex(key.to_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml("", Path::new("/base")).unwrap();
        let mut want = ExperimentConfig::default();
        want.output_dir = PathBuf::from("/base/aru-out");
        assert_eq!(c, want);
        assert_eq!(c.resolve_methods().unwrap().len(), 9);
    }

    #[test]
    fn defaults_round_trip_through_text() {
        let text = ExperimentConfig::default_toml();
        let c = ExperimentConfig::from_toml(&text, Path::new("/b")).unwrap();
        assert_eq!(c.defaults, MethodParams::default());
        assert_eq!(c.seeds, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn nested_override_keeps_siblings() {
        let c = ExperimentConfig::from_toml(
            "seeds = [3]\n[defaults.finetune]\nepochs = 2\n[dataset]\nnum_identities = 30\n",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(c.defaults.finetune.epochs, 2);
        assert_eq!(c.defaults.finetune.learning_rate, 0.001);
        let DatasetSpec::Synthetic(s) = &c.dataset else { panic!() };
        assert_eq!(s.num_identities, 30);
        assert_eq!(s.images_per_identity, SyntheticConfig::default().images_per_identity);
    }

    #[test]
    fn per_method_overrides_apply_to_that_method_only() {
        let c = ExperimentConfig::from_toml(
            "methods = [\"aru\", { id = \"cf_k\", k = 2 }, { id = \"aru\", label = \"aru_25\", ratio = 0.25, adv = { steps = 3 } }]",
            Path::new("."),
        )
        .unwrap();
        let r = c.resolve_methods().unwrap();
        assert_eq!(r[0].params, MethodParams::default());
        assert_eq!((r[1].method, r[1].params.k), (Method::CfK, 2));
        assert_eq!(r[2].label, "aru_25");
        assert_eq!(r[2].params.ratio, 0.25);
        assert_eq!(r[2].params.adv.steps, 3);
        assert_eq!(r[2].params.adv.epsilon, 8.0 / 255.0);
    }

    #[test]
    fn directory_dataset_replaces_synthetic_table() {
        let c = ExperimentConfig::from_toml("[dataset]\nkind = \"directory\"\npath = \"data\"\n", Path::new("/x")).unwrap();
        assert_eq!(
            c.dataset,
            DatasetSpec::Directory {
                path: PathBuf::from("/x/data"),
                labels: None
            }
        );
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            "methods = [\"scrub\"]",
            "methods = []",
            "seeds = []",
            "lambda = 2.0",
            "typo_key = 1",
            "[defaults]\nratoi = 0.5",
            "[defaults.finetune]\nlearning_rate = -1.0",
            "methods = [{ id = \"aru\", bogus = 1 }]",
            "methods = [\"aru\", { id = \"aru\", ratio = 0.3 }]",
            "not toml at all [",
        ] {
            let e = ExperimentConfig::from_toml(text, Path::new(".")).unwrap_err();
            assert!(e.is_config(), "{text:?} gave {e}");
        }
    }
}
