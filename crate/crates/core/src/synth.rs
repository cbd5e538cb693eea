//! Synthetic prediction dumps with a planted accuracy/invariance relation.
//!
//! Each simulated unit (a model, or a test set of one model) gets a target
//! accuracy `a` drawn uniformly from the configured range and a target EI
//! solving `logit(a) = slope·EI + intercept + ε`, `ε ~ N(0, noise_sd)`. The
//! target EI is split into a consistency `c` (probability that the transformed
//! prediction keeps the original class) and a confidence level, and labelled
//! dumps realising those targets are emitted:
//!
//! - original rows predict the label with probability `a`, otherwise a
//!   uniformly chosen wrong class;
//! - transformed rows keep the original class with probability `c`, otherwise
//!   switch to a uniformly chosen other class;
//! - every row puts mass `p` on its predicted class and spreads `1 − p`
//!   uniformly over the rest; `√p` is Beta-distributed with mean
//!   `√confidence`, so `E[√(p̂·p̂ₜ)] = confidence` exactly and the expected EI is
//!   `c · confidence`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{ModelRecord, TestSetEntry};
use crate::metrics::{self, MeasureKind, MeasureOptions};
use crate::par;
use crate::predstore::{self, pair, FormatError, PredictionHeader, PredictionSet, TransformTag};
use crate::stats::{logit_scale, resample_rng};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unit {unit}: infeasible target ({reason})")]
    Infeasible { unit: usize, reason: String },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which identifier varies across the generated units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitAxis {
    /// Many models on one dataset (model-centric studies).
    #[default]
    Models,
    /// One model on many test sets (dataset-centric studies).
    TestSets,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvarianceLink {
    pub slope: f64,
    pub intercept: f64,
}

fn default_transform() -> TransformTag {
    TransformTag::Rot90
}
fn default_concentration() -> f64 {
    40.0
}
fn default_hard_confidence() -> (f64, f64) {
    (0.2, 0.6)
}
fn default_max_entries() -> usize {
    50_000_000
}
fn default_dataset_id() -> String {
    "synthetic".into()
}
fn default_model_id() -> String {
    "synthetic_model".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub num_models: usize,
    pub num_samples: usize,
    pub num_classes: usize,
    pub accuracy_range: (f64, f64),
    pub invariance_link: InvarianceLink,
    pub noise_sd: f64,
    pub seed: u64,
    /// Flattens softmaxes: confidences are drawn from `hard_confidence_range`
    /// independently of accuracy.
    #[serde(default)]
    pub hard_set: bool,
    #[serde(default = "default_hard_confidence")]
    pub hard_confidence_range: (f64, f64),
    #[serde(default)]
    pub axis: UnitAxis,
    #[serde(default = "default_transform")]
    pub transform: TransformTag,
    /// Beta concentration of the per-row root-confidence.
    #[serde(default = "default_concentration")]
    pub confidence_concentration: f64,
    /// Upper bound on `num_samples · num_classes` per dump.
    #[serde(default = "default_max_entries")]
    pub max_entries: usize,
    /// Dataset id for model populations.
    #[serde(default = "default_dataset_id")]
    pub dataset_id: String,
    /// Model id for test-set suites.
    #[serde(default = "default_model_id")]
    pub model_id: String,
    /// Assigned round-robin to models; empty means `standard`.
    #[serde(default)]
    pub group_tags: Vec<String>,
}

impl PopulationConfig {
    pub fn new(num_models: usize, num_samples: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            num_models,
            num_samples,
            num_classes,
            accuracy_range: (0.55, 0.9),
            invariance_link: InvarianceLink {
                slope: 6.0,
                intercept: -2.5,
            },
            noise_sd: 0.0,
            seed,
            hard_set: false,
            hard_confidence_range: default_hard_confidence(),
            axis: UnitAxis::Models,
            transform: default_transform(),
            confidence_concentration: default_concentration(),
            max_entries: default_max_entries(),
            dataset_id: default_dataset_id(),
            model_id: default_model_id(),
            group_tags: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::Config(m));
        let (lo, hi) = self.accuracy_range;
        if self.num_models < 1 {
            return err("num_models must be at least 1".into());
        }
        if self.num_samples < 1 || self.num_classes < 2 {
            return err("need num_samples >= 1 and num_classes >= 2".into());
        }
        if self.num_samples.checked_mul(self.num_classes).is_none_or(|e| e > self.max_entries) {
            return err(format!(
                "{}x{} exceeds the memory budget of {} entries",
                self.num_samples, self.num_classes, self.max_entries
            ));
        }
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return err(format!("accuracy_range ({lo}, {hi}) must satisfy 0 <= low < high <= 1"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return err(format!("noise_sd must be finite and >= 0, got {}", self.noise_sd));
        }
        let link = self.invariance_link;
        if !(link.slope.is_finite() && link.slope != 0.0 && link.intercept.is_finite()) {
            return err("invariance_link needs a finite non-zero slope".into());
        }
        if self.transform == TransformTag::Identity {
            return err("transform must not be identity".into());
        }
        if self.confidence_concentration.is_nan() || self.confidence_concentration <= 0.0 {
            return err("confidence_concentration must be positive".into());
        }
        if self.hard_set {
            let (a, b) = self.hard_confidence_range;
            if !(confidence_floor(self.num_classes) <= a && a <= b && b <= 1.0) {
                return err(format!(
                    "hard_confidence_range ({a}, {b}) must lie within [{}, 1]",
                    confidence_floor(self.num_classes)
                ));
            }
        }
        Ok(())
    }
}

/// Smallest confidence the generator emits; keeps the argmax unique.
pub fn confidence_floor(num_classes: usize) -> f64 {
    1.0 / num_classes as f64 + 0.01
}

/// Expected EI of a generated pair with consistency `c` and confidence levels
/// `conf_orig`, `conf_trans` (independent root-confidences).
pub fn expected_ei(consistency: f64, conf_orig: f64, conf_trans: f64) -> f64 {
    consistency * (conf_orig * conf_trans).sqrt()
}

/// Per-unit targets realised by [`generate_pair`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitTargets {
    pub accuracy: f64,
    pub consistency: f64,
    pub conf_original: f64,
    pub conf_transformed: f64,
}

/// Ground truth recorded for one generated unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub model_id: String,
    pub dataset_id: String,
    pub group_tag: String,
    pub accuracy: f64,
    pub expected_ei: f64,
    pub consistency: f64,
    pub confidence: f64,
    pub noise: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticUnit {
    pub original: PredictionSet,
    pub transformed: PredictionSet,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone)]
pub struct Population {
    pub config: PopulationConfig,
    pub units: Vec<SyntheticUnit>,
}

struct RootConfidence {
    floor_root: f64,
    beta: Option<Beta<f64>>,
    fixed: f64,
}

impl RootConfidence {
    fn new(confidence: f64, floor: f64, concentration: f64) -> Self {
        let floor_root = floor.sqrt();
        let mu = ((confidence.sqrt() - floor_root) / (1.0 - floor_root)).clamp(0.0, 1.0);
        let beta = (1e-9..1.0 - 1e-9)
            .contains(&mu)
            .then(|| Beta::new(mu * concentration, (1.0 - mu) * concentration).expect("positive shape"));
        Self {
            floor_root,
            beta,
            fixed: mu,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let b = self.beta.as_ref().map_or(self.fixed, |d| d.sample(rng));
        let root = self.floor_root + (1.0 - self.floor_root) * b;
        root * root
    }
}

fn other_class(rng: &mut ChaCha8Rng, k: usize, not: usize) -> usize {
    let c = rng.random_range(0..k - 1);
    if c >= not {
        c + 1
    } else {
        c
    }
}

fn push_row(probs: &mut Vec<f32>, k: usize, class: usize, p: f64) {
    let rest = ((1.0 - p) / (k - 1) as f64) as f32;
    probs.extend((0..k).map(|j| if j == class { p as f32 } else { rest }));
}

/// Generates one labelled (identity, transformed) pair realising `targets`.
#[allow(clippy::too_many_arguments)]
pub fn generate_pair(
    targets: UnitTargets,
    num_samples: usize,
    num_classes: usize,
    concentration: f64,
    transform: TransformTag,
    model_id: &str,
    dataset_id: &str,
    rng: &mut ChaCha8Rng,
) -> (PredictionSet, PredictionSet) {
    let k = num_classes;
    let floor = confidence_floor(k);
    let conf_o = RootConfidence::new(targets.conf_original, floor, concentration);
    let conf_t = RootConfidence::new(targets.conf_transformed, floor, concentration);
    let mut labels = Vec::with_capacity(num_samples);
    let mut orig = Vec::with_capacity(num_samples * k);
    let mut trans = Vec::with_capacity(num_samples * k);
    for _ in 0..num_samples {
        let label = rng.random_range(0..k);
        let pred = if rng.random_bool(targets.accuracy) {
            label
        } else {
            other_class(rng, k, label)
        };
        let pred_t = if rng.random_bool(targets.consistency) {
            pred
        } else {
            other_class(rng, k, pred)
        };
        push_row(&mut orig, k, pred, conf_o.sample(rng));
        push_row(&mut trans, k, pred_t, conf_t.sample(rng));
        labels.push(label as u32);
    }
    let make = |tag, probs| {
        PredictionSet::new(
            PredictionHeader::new(model_id, dataset_id, tag, num_samples, k, true),
            probs,
            Some(labels.clone()),
        )
        .expect("generator emits valid rows")
    };
    (make(TransformTag::Identity, orig), make(transform, trans))
}

/// Splits a target EI into (consistency, confidence).
fn split_target(cfg: &PopulationConfig, unit: usize, ei: f64, rng: &mut ChaCha8Rng) -> Result<(f64, f64), SynthError> {
    let infeasible = |reason: String| SynthError::Infeasible { unit, reason };
    if !(0.0..=1.0).contains(&ei) {
        return Err(infeasible(format!("required EI {ei:.4} outside [0, 1]")));
    }
    let floor = confidence_floor(cfg.num_classes);
    let conf = if cfg.hard_set {
        let (a, b) = cfg.hard_confidence_range;
        rng.random_range(a..=b)
    } else {
        ei.sqrt().clamp(floor, 1.0)
    };
    let consistency = ei / conf;
    if consistency > 1.0 {
        return Err(infeasible(format!(
            "required EI {ei:.4} exceeds confidence {conf:.4}; widen the hard confidence range or lower the link"
        )));
    }
    Ok((consistency, conf))
}

fn unit_ids(cfg: &PopulationConfig, i: usize) -> (String, String) {
    let width = cfg.num_models.saturating_sub(1).to_string().len().max(3);
    match cfg.axis {
        UnitAxis::Models => (format!("model_{i:0width$}"), cfg.dataset_id.clone()),
        UnitAxis::TestSets => (cfg.model_id.clone(), format!("set_{i:0width$}")),
    }
}

fn group_tag(cfg: &PopulationConfig, i: usize) -> String {
    if cfg.group_tags.is_empty() {
        "standard".into()
    } else {
        cfg.group_tags[i % cfg.group_tags.len()].clone()
    }
}

fn generate_unit(cfg: &PopulationConfig, i: usize) -> Result<SyntheticUnit, SynthError> {
    let mut rng = resample_rng(cfg.seed, i as u64);
    let (lo, hi) = cfg.accuracy_range;
    let accuracy = lo + (hi - lo) * rng.random::<f64>();
    let noise = if cfg.noise_sd > 0.0 {
        Normal::new(0.0, cfg.noise_sd).expect("validated sd").sample(&mut rng)
    } else {
        0.0
    };
    let link = cfg.invariance_link;
    let ei = (logit_scale(accuracy) - link.intercept - noise) / link.slope;
    let (consistency, confidence) = split_target(cfg, i, ei, &mut rng)?;
    let (model_id, dataset_id) = unit_ids(cfg, i);
    let targets = UnitTargets {
        accuracy,
        consistency,
        conf_original: confidence,
        conf_transformed: confidence,
    };
    let (original, transformed) = generate_pair(
        targets,
        cfg.num_samples,
        cfg.num_classes,
        cfg.confidence_concentration,
        cfg.transform,
        &model_id,
        &dataset_id,
        &mut rng,
    );
    Ok(SyntheticUnit {
        original,
        transformed,
        truth: GroundTruth {
            model_id,
            dataset_id,
            group_tag: group_tag(cfg, i),
            accuracy,
            expected_ei: expected_ei(consistency, confidence, confidence),
            consistency,
            confidence,
            noise,
        },
    })
}

/// Generates every unit of the population; deterministic given the seed.
pub fn generate_population(cfg: &PopulationConfig) -> Result<Population, SynthError> {
    cfg.validate()?;
    let units = par::try_map_indexed(cfg.num_models, |i| generate_unit(cfg, i))?;
    Ok(Population {
        config: cfg.clone(),
        units,
    })
}

/// Measures every unit under every measure and gathers the scores into
/// [`ModelRecord`]s, one per model.
pub fn build_records(pop: &Population) -> Result<Vec<ModelRecord>, SynthError> {
    let entries = par::try_map_indexed(pop.units.len(), |i| {
        let unit = &pop.units[i];
        let pp = pair(&unit.original, &unit.transformed).map_err(metrics::MetricError::from)?;
        let mut scores = BTreeMap::new();
        for kind in MeasureKind::ALL {
            scores.insert(kind, metrics::measure(&pp, kind, MeasureOptions::default())?.score);
        }
        Ok::<_, SynthError>((
            unit.truth.model_id.clone(),
            unit.truth.group_tag.clone(),
            TestSetEntry {
                dataset_id: unit.truth.dataset_id.clone(),
                accuracy: Some(metrics::accuracy(&unit.original)?),
                scores,
            },
        ))
    })?;
    let mut by_model: BTreeMap<String, ModelRecord> = BTreeMap::new();
    for (model_id, group_tag, entry) in entries {
        by_model
            .entry(model_id.clone())
            .or_insert_with(|| ModelRecord {
                model_id,
                group_tag,
                entries: Vec::new(),
            })
            .entries
            .push(entry);
    }
    Ok(by_model.into_values().collect())
}

/// Ground-truth table as CSV.
pub fn ground_truth_csv(pop: &Population) -> String {
    let mut out = String::from("model_id,dataset_id,group_tag,accuracy,expected_ei,consistency,confidence,noise\n");
    for u in &pop.units {
        let t = &u.truth;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            t.model_id, t.dataset_id, t.group_tag, t.accuracy, t.expected_ei, t.consistency, t.confidence, t.noise
        )
        .expect("writing to a String");
    }
    out
}

/// Writes `preds/*.pred`, `records/*.json` and `ground_truth.csv` under `dir`.
pub fn write_population(pop: &Population, dir: &Path) -> Result<usize, SynthError> {
    let preds = dir.join("preds");
    let records_dir = dir.join("records");
    fs::create_dir_all(&preds)?;
    fs::create_dir_all(&records_dir)?;
    let mut files = 0;
    for u in &pop.units {
        for set in [&u.original, &u.transformed] {
            let h = &set.header;
            let name = format!("{}__{}__{}.pred", h.model_id, h.dataset_id, h.transform);
            predstore::save(set, &preds.join(name))?;
            files += 1;
        }
    }
    for record in build_records(pop)? {
        let json = serde_json::to_string_pretty(&record).expect("records serialise");
        fs::write(records_dir.join(format!("{}.json", record.model_id)), json + "\n")?;
    }
    fs::write(dir.join("ground_truth.csv"), ground_truth_csv(pop))?;
    Ok(files)
}
