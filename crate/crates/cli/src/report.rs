//! `report.json` / `report.csv`.
//!
//! The JSON report is a pure function of the config: wall-clock times go to
//! the CSV only, so reruns give byte-identical JSON.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use aru_core::eval::Metrics;
use aru_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const SCHEMA_VERSION: u32 = 1;
pub const JSON_FILE: &str = "report.json";
pub const CSV_FILE: &str = "report.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub checksum: String,
    pub num_classes: usize,
    pub image_shape: [usize; 3],
    pub train: usize,
    pub forget: usize,
    pub retain: usize,
    pub test: usize,
    pub unseen: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginalRow {
    pub seed: u64,
    pub model_checksum: String,
    pub train_accuracy: f64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub seed: u64,
    pub metrics: Metrics,
    /// Share of the larger class among forget + unseen, the MIA's trivial baseline.
    pub mia_majority_prior: f64,
    /// Run provenance without its wall-clock field.
    pub provenance: serde_json::Value,
    #[serde(skip)]
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single seed.
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub seeds: usize,
    pub utility: Stat,
    pub forgetting: Stat,
    pub nomus: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub dataset: DatasetSummary,
    pub originals: Vec<OriginalRow>,
    pub results: Vec<ResultRow>,
    pub aggregates: Vec<Aggregate>,
}

/// One aggregate per method label, in first-appearance order.
pub fn aggregate(rows: &[ResultRow]) -> Vec<Aggregate> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&Metrics>> = BTreeMap::new();
    for r in rows {
        if !groups.contains_key(r.method.as_str()) {
            order.push(r.method.as_str());
        }
        groups.entry(&r.method).or_default().push(&r.metrics);
    }
    order
        .into_iter()
        .map(|m| {
            let ms = &groups[m];
            let col = |f: fn(&Metrics) -> f64| Stat::of(&ms.iter().map(|x| f(x)).collect::<Vec<_>>());
            Aggregate {
                method: m.to_string(),
                seeds: ms.len(),
                utility: col(|x| x.utility),
                forgetting: col(|x| x.forgetting),
                nomus: col(|x| x.nomus),
            }
        })
        .collect()
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "seed", "utility", "forgetting", "nomus", "wall_clock_s"])
            .expect("in-memory csv");
        for r in &self.results {
            w.write_record([
                r.method.clone(),
                r.seed.to_string(),
                r.metrics.utility.to_string(),
                r.metrics.forgetting.to_string(),
                r.metrics.nomus.to_string(),
                format!("{:.3}", r.wall_clock_s),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [(JSON_FILE, self.to_json()), (CSV_FILE, self.to_csv())] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(JSON_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let r: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "report",
            message: e.to_string(),
        })?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Format {
                what: "report",
                message: format!("schema_version {} (expected {SCHEMA_VERSION})", r.schema_version),
            });
        }
        Ok(r)
    }

    /// Largest difference between the stored aggregates and ones recomputed from the rows.
    pub fn aggregate_drift(&self) -> f64 {
        let fresh = aggregate(&self.results);
        if fresh.len() != self.aggregates.len() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for (a, b) in fresh.iter().zip(&self.aggregates) {
            if a.method != b.method || a.seeds != b.seeds {
                return f64::INFINITY;
            }
            for (x, y) in [(&a.utility, &b.utility), (&a.forgetting, &b.forgetting), (&a.nomus, &b.nomus)] {
                worst = worst.max((x.mean - y.mean).abs()).max((x.std - y.std).abs());
            }
        }
        worst
    }

    /// Table of mean ± std in percent, one line per method.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<20} {:>5} {:>16} {:>16} {:>16}\n",
            "method", "seeds", "utility %", "forgetting %", "NoMUS %"
        );
        let pct = |st: &Stat| format!("{:.2} ± {:.2}", st.mean * 100.0, st.std * 100.0);
        for a in &self.aggregates {
            writeln!(
                s,
                "{:<20} {:>5} {:>16} {:>16} {:>16}",
                a.method,
                a.seeds,
                pct(&a.utility),
                pct(&a.forgetting),
                pct(&a.nomus)
            )
            .unwrap();
        }
        s
    }
}
