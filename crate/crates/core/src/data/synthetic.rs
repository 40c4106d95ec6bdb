//! Synthetic cohort-structured images.
//!
//! Every identity (a stand-in for one person) belongs to a single class and
//! carries a fixed random patch at a fixed location. Every image of that
//! identity is `0.5 + class pattern + identity patch + pixel noise`, clamped to
//! `[0, 1]`. The class pattern is shared across identities, so the task is
//! learnable from the retain split alone; the identity patch is shared only
//! within a cohort, so a model trained on a cohort fits it measurably better
//! than an unseen cohort.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::seed::{self, streams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub image_shape: [usize; 3],
    /// Fraction of identities whose images form the forget split.
    pub forget_identity_fraction: f64,
    /// Fraction of identities held out as the unseen split.
    pub unseen_identity_fraction: f64,
    /// Fraction of identities held out as the test split.
    pub test_identity_fraction: f64,
    pub noise_std: f64,
    /// Amplitude of the class pattern.
    pub class_strength: f64,
    /// Amplitude of the identity patch.
    pub identity_strength: f64,
    /// Side length of the square identity patch.
    pub patch_size: usize,
    /// Side length of the coarse grid the class pattern is drawn on.
    pub class_grid: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            num_identities: 80,
            images_per_identity: 20,
            image_shape: [3, 16, 16],
            forget_identity_fraction: 0.2,
            unseen_identity_fraction: 0.2,
            test_identity_fraction: 0.2,
            noise_std: 0.3,
            class_strength: 0.06,
            identity_strength: 0.5,
            patch_size: 6,
            class_grid: 4,
            seed: 0,
        }
    }
}

struct SplitCounts {
    forget: usize,
    unseen: usize,
    test: usize,
}

impl SyntheticConfig {
    fn counts(&self) -> Result<SplitCounts> {
        let [c, h, w] = self.image_shape;
        if self.num_classes < 2 || self.num_identities == 0 || self.images_per_identity == 0 {
            return Err(Error::config(
                "need >= 2 classes, >= 1 identity and >= 1 image per identity",
            ));
        }
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config("image dimensions must be positive"));
        }
        if self.patch_size == 0 || self.patch_size > h.min(w) {
            return Err(Error::config("patch_size must be in 1..=min(H, W)"));
        }
        if self.class_grid == 0 || self.class_grid > h.min(w) {
            return Err(Error::config("class_grid must be in 1..=min(H, W)"));
        }
        for (name, f) in [
            ("forget_identity_fraction", self.forget_identity_fraction),
            ("unseen_identity_fraction", self.unseen_identity_fraction),
            ("test_identity_fraction", self.test_identity_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config(format!("{name} must be in (0, 1), got {f}")));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be >= 0"));
        }
        let n = self.num_identities as f64;
        let counts = SplitCounts {
            forget: (self.forget_identity_fraction * n).round() as usize,
            unseen: (self.unseen_identity_fraction * n).round() as usize,
            test: (self.test_identity_fraction * n).round() as usize,
        };
        if counts.forget == 0 || counts.unseen == 0 || counts.test == 0 {
            return Err(Error::config(format!(
                "{} identities leave an empty forget, unseen or test split",
                self.num_identities
            )));
        }
        if counts.forget + counts.unseen + counts.test >= self.num_identities {
            return Err(Error::config("split fractions leave no retain identities"));
        }
        Ok(counts)
    }
}

/// Standard normal draw (Box-Muller).
fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

struct Identity {
    class: usize,
    patch: Vec<f64>,
    at: (usize, usize),
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<DatasetBundle> {
    let counts = cfg.counts()?;
    let [c, h, w] = cfg.image_shape;
    let k = cfg.num_classes;
    let p = cfg.patch_size;
    let g = cfg.class_grid;

    let mut trng = seed::rng_for(cfg.seed, streams::SYNTH_TEMPLATES);
    let class_templates: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let coarse: Vec<f64> = (0..c * g * g)
                .map(|_| if trng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            let mut full = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        full[(ch * h + y) * w + x] = coarse[(ch * g + y * g / h) * g + x * g / w];
                    }
                }
            }
            full
        })
        .collect();
    let identities: Vec<Identity> = (0..cfg.num_identities)
        .map(|i| Identity {
            class: i % k,
            patch: (0..c * p * p).map(|_| trng.random::<f64>() * 2.0 - 1.0).collect(),
            at: (trng.random_range(0..=h - p), trng.random_range(0..=w - p)),
        })
        .collect();

    // Round-robin over classes so forget, unseen and test share one class mix.
    let mut queues: Vec<Vec<usize>> = (0..k)
        .map(|cls| (0..cfg.num_identities).filter(|i| i % k == cls).collect())
        .collect();
    let mut srng = seed::rng_for(cfg.seed, streams::SYNTH_SPLIT);
    for q in &mut queues {
        use rand::seq::SliceRandom;
        q.shuffle(&mut srng);
    }
    let mut split_of = vec![Split::Retain; cfg.num_identities];
    for (split, n) in [
        (Split::Forget, counts.forget),
        (Split::Unseen, counts.unseen),
        (Split::Test, counts.test),
    ] {
        for j in 0..n {
            let id = queues[j % k].pop().ok_or_else(|| {
                Error::config(format!(
                    "not enough identities of class {} to fill the {split} split",
                    j % k
                ))
            })?;
            split_of[id] = split;
        }
    }

    let mut irng = seed::rng_for(cfg.seed, streams::SYNTH_IMAGES);
    let mut tagged = Vec::with_capacity(cfg.num_identities * cfg.images_per_identity);
    for (id, ident) in identities.iter().enumerate() {
        let tpl = &class_templates[ident.class];
        for _ in 0..cfg.images_per_identity {
            let mut px = vec![0f32; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let i = (ch * h + y) * w + x;
                        let mut v = 0.5 + cfg.class_strength * tpl[i];
                        let (py, pxo) = ident.at;
                        if (py..py + p).contains(&y) && (pxo..pxo + p).contains(&x) {
                            v += cfg.identity_strength * ident.patch[(ch * p + y - py) * p + x - pxo];
                        }
                        v += cfg.noise_std * normal(&mut irng);
                        px[i] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
            let record = ImageRecord {
                image: Tensor::new(vec![c, h, w], px)?,
                label: ident.class,
                identity: id as u64,
            };
            tagged.push((split_of[id], record));
        }
    }
    DatasetBundle::assemble(k, cfg.image_shape, tagged)
}
