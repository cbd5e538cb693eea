//! Correlation studies between invariance and accuracy, model ranking and
//! label-free accuracy prediction.
//!
//! A model-centric study takes one point per model on a fixed test set; a
//! dataset-centric study takes one point per test set for a fixed model. Both
//! logit-scale accuracy, then report Pearson/Spearman, a Huber line fit and
//! a percentile bootstrap band of that fit.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{InvarianceRecord, MeasureKind};
use crate::stats::{
    self, bootstrap_band, correlate, huber_fit, inverse_logit, logit_scale, BootstrapBand, CorrelationStats,
    LinearFit, SampleXY, StatsError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("{context}: need at least {needed} points, got {got}")]
    TooFewPoints {
        context: String,
        needed: usize,
        got: usize,
    },
    #[error("{0}")]
    InvalidRecord(String),
    #[error("{id}: no accuracy available")]
    MissingAccuracy { id: String },
    #[error("{id}: no `{measure}` score for dataset `{dataset_id}`")]
    MissingEntry {
        id: String,
        dataset_id: String,
        measure: MeasureKind,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Scores and accuracy of one model on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSetEntry {
    pub dataset_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub scores: BTreeMap<MeasureKind, f64>,
}

/// Everything known about one model across test sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: String,
    #[serde(default = "default_group")]
    pub group_tag: String,
    pub entries: Vec<TestSetEntry>,
}

fn default_group() -> String {
    "untagged".into()
}

impl ModelRecord {
    pub fn entry(&self, dataset_id: &str) -> Option<&TestSetEntry> {
        self.entries.iter().find(|e| e.dataset_id == dataset_id)
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |m: String| Err(AnalysisError::InvalidRecord(format!("{}: {m}", self.model_id)));
        if self.model_id.is_empty() {
            return bad("empty model_id".into());
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.dataset_id.as_str()) {
                return bad(format!("dataset `{}` appears more than once", e.dataset_id));
            }
            if let Some(a) = e.accuracy {
                if !(0.0..=1.0).contains(&a) {
                    return bad(format!("accuracy {a} on `{}` outside [0, 1]", e.dataset_id));
                }
            }
            if let Some((k, v)) = e.scores.iter().find(|(_, v)| !v.is_finite()) {
                return bad(format!("non-finite {k} score {v} on `{}`", e.dataset_id));
            }
        }
        Ok(())
    }
}

/// Groups flat invariance records into one [`ModelRecord`] per model. Records
/// measured under different transforms for the same (model, dataset, measure)
/// are rejected as duplicates.
pub fn collect_records(records: &[InvarianceRecord], group_tag: &str) -> Result<Vec<ModelRecord>, AnalysisError> {
    let mut by_model: BTreeMap<&str, BTreeMap<&str, TestSetEntry>> = BTreeMap::new();
    for r in records {
        let entry = by_model
            .entry(&r.model_id)
            .or_default()
            .entry(&r.dataset_id)
            .or_insert_with(|| TestSetEntry {
                dataset_id: r.dataset_id.clone(),
                accuracy: None,
                scores: BTreeMap::new(),
            });
        if entry.scores.insert(r.measure, r.score).is_some() {
            return Err(AnalysisError::InvalidRecord(format!(
                "{}: duplicate `{}` score on `{}`",
                r.model_id, r.measure, r.dataset_id
            )));
        }
        entry.accuracy = entry.accuracy.or(r.accuracy);
    }
    let out: Vec<ModelRecord> = by_model
        .into_iter()
        .map(|(model_id, entries)| ModelRecord {
            model_id: model_id.to_owned(),
            group_tag: group_tag.to_owned(),
            entries: entries.into_values().collect(),
        })
        .collect();
    for r in &out {
        r.validate()?;
    }
    Ok(out)
}

/// Merges records that share a `model_id` (entries are concatenated).
pub fn merge_records(records: Vec<ModelRecord>) -> Result<Vec<ModelRecord>, AnalysisError> {
    let mut by_model: BTreeMap<String, ModelRecord> = BTreeMap::new();
    for r in records {
        match by_model.get_mut(&r.model_id) {
            Some(existing) => existing.entries.extend(r.entries),
            None => {
                by_model.insert(r.model_id.clone(), r);
            }
        }
    }
    let out: Vec<ModelRecord> = by_model.into_values().collect();
    for r in &out {
        r.validate()?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyAxis {
    ModelCentric,
    DatasetCentric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPoint {
    /// Model id (model-centric) or dataset id (dataset-centric).
    pub id: String,
    pub group_tag: String,
    pub invariance: f64,
    pub accuracy: f64,
    pub logit_accuracy: f64,
    /// Logit-space residual against the Huber line.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group_tag: String,
    pub n: usize,
    /// Absent for groups with fewer than three points or no spread.
    pub stats: Option<CorrelationStats>,
    pub fit: Option<LinearFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub axis: StudyAxis,
    pub measure: MeasureKind,
    /// The fixed test set (model-centric) or model (dataset-centric).
    pub subject: String,
    pub points: Vec<StudyPoint>,
    /// Computed on logit-scaled accuracy.
    pub stats: CorrelationStats,
    /// Spearman ρ on unscaled accuracy; equal to `stats.spearman_rho` unless
    /// the logit clamp merged distinct accuracies.
    pub spearman_rho_unscaled: f64,
    pub fit: LinearFit,
    pub band: BootstrapBand,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupSummary>,
}

impl StudyReport {
    /// Plot-ready CSV of the points.
    pub fn points_csv(&self) -> String {
        let mut out = String::from("id,group_tag,invariance,accuracy,logit_accuracy,residual\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.id, p.group_tag, p.invariance, p.accuracy, p.logit_accuracy, p.residual
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
    pub group_by_tag: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            level: 0.95,
            seed: 0,
            group_by_tag: false,
        }
    }
}

struct RawPoint {
    id: String,
    group_tag: String,
    invariance: f64,
    accuracy: f64,
}

fn logit_collisions(acc: &[f64]) -> bool {
    let clamped = |a: f64| a <= stats::LOGIT_EPS || a >= 1.0 - stats::LOGIT_EPS;
    acc.iter().filter(|&&a| clamped(a) && a < 0.5).count() > 1 || acc.iter().filter(|&&a| clamped(a) && a > 0.5).count() > 1
}

fn run_study(
    axis: StudyAxis,
    measure: MeasureKind,
    subject: &str,
    mut raw: Vec<RawPoint>,
    cfg: &StudyConfig,
) -> Result<StudyReport, AnalysisError> {
    if raw.len() < SampleXY::MIN_POINTS {
        return Err(AnalysisError::TooFewPoints {
            context: format!("{axis:?} study of `{subject}`"),
            needed: SampleXY::MIN_POINTS,
            got: raw.len(),
        });
    }
    // canonical order makes the report independent of input order
    raw.sort_by(|a, b| a.id.cmp(&b.id));
    let x: Vec<f64> = raw.iter().map(|p| p.invariance).collect();
    let acc: Vec<f64> = raw.iter().map(|p| p.accuracy).collect();
    let y: Vec<f64> = acc.iter().map(|&a| logit_scale(a)).collect();
    let sample = SampleXY::new(x.clone(), y.clone())?;
    let stats = correlate(&sample)?;
    let spearman_rho_unscaled = stats::spearman(&SampleXY::new(x, acc.clone())?)?;
    if !logit_collisions(&acc) {
        debug_assert!(
            (spearman_rho_unscaled - stats.spearman_rho).abs() < 1e-12,
            "logit scaling changed a rank correlation"
        );
    }
    let fit = huber_fit(&sample)?;
    let band = bootstrap_band(&sample, cfg.resamples, cfg.level, cfg.seed)?;

    let points: Vec<StudyPoint> = raw
        .into_iter()
        .zip(&y)
        .map(|(p, &ly)| StudyPoint {
            residual: ly - fit.predict(p.invariance),
            logit_accuracy: ly,
            id: p.id,
            group_tag: p.group_tag,
            invariance: p.invariance,
            accuracy: p.accuracy,
        })
        .collect();
    let groups = if cfg.group_by_tag { group_summaries(&points) } else { Vec::new() };
    Ok(StudyReport {
        axis,
        measure,
        subject: subject.to_owned(),
        points,
        stats,
        spearman_rho_unscaled,
        fit,
        band,
        groups,
    })
}

fn group_summaries(points: &[StudyPoint]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for p in points {
        let g = groups.entry(&p.group_tag).or_default();
        g.0.push(p.invariance);
        g.1.push(p.logit_accuracy);
    }
    groups
        .into_iter()
        .map(|(tag, (x, y))| {
            let n = x.len();
            let sample = SampleXY::new(x, y).ok();
            GroupSummary {
                group_tag: tag.to_owned(),
                n,
                stats: sample.as_ref().and_then(|s| correlate(s).ok()),
                fit: sample.as_ref().and_then(|s| huber_fit(s).ok()),
            }
        })
        .collect()
}

fn scored_entry<'a>(
    record: &'a ModelRecord,
    dataset_id: &str,
    measure: MeasureKind,
) -> Result<(&'a TestSetEntry, f64), AnalysisError> {
    let missing = || AnalysisError::MissingEntry {
        id: record.model_id.clone(),
        dataset_id: dataset_id.to_owned(),
        measure,
    };
    let entry = record.entry(dataset_id).ok_or_else(missing)?;
    let score = *entry.scores.get(&measure).ok_or_else(missing)?;
    Ok((entry, score))
}

/// One point per model carrying `measure` on `dataset_id`; models without
/// that entry are left out.
pub fn model_centric_study(
    records: &[ModelRecord],
    dataset_id: &str,
    measure: MeasureKind,
    cfg: &StudyConfig,
) -> Result<StudyReport, AnalysisError> {
    let mut raw = Vec::new();
    for r in records {
        r.validate()?;
        let Ok((entry, score)) = scored_entry(r, dataset_id, measure) else {
            continue;
        };
        let accuracy = entry.accuracy.ok_or_else(|| AnalysisError::MissingAccuracy {
            id: r.model_id.clone(),
        })?;
        raw.push(RawPoint {
            id: r.model_id.clone(),
            group_tag: r.group_tag.clone(),
            invariance: score,
            accuracy,
        });
    }
    run_study(StudyAxis::ModelCentric, measure, dataset_id, raw, cfg)
}

fn dataset_points(record: &ModelRecord, measure: MeasureKind, only: Option<&[String]>) -> Result<Vec<RawPoint>, AnalysisError> {
    record.validate()?;
    let mut raw = Vec::new();
    for e in &record.entries {
        if only.is_some_and(|ids| !ids.contains(&e.dataset_id)) {
            continue;
        }
        let Some(&score) = e.scores.get(&measure) else {
            continue;
        };
        let accuracy = e.accuracy.ok_or_else(|| AnalysisError::MissingAccuracy {
            id: format!("{}/{}", record.model_id, e.dataset_id),
        })?;
        raw.push(RawPoint {
            id: e.dataset_id.clone(),
            group_tag: record.group_tag.clone(),
            invariance: score,
            accuracy,
        });
    }
    Ok(raw)
}

/// One point per test set of a single model.
pub fn dataset_centric_study(record: &ModelRecord, measure: MeasureKind, cfg: &StudyConfig) -> Result<StudyReport, AnalysisError> {
    let raw = dataset_points(record, measure, None)?;
    run_study(StudyAxis::DatasetCentric, measure, &record.model_id, raw, cfg)
}

fn training_sample(record: &ModelRecord, measure: MeasureKind, train: &[String]) -> Result<SampleXY, AnalysisError> {
    for id in train {
        scored_entry(record, id, measure)?;
    }
    let raw = dataset_points(record, measure, Some(train))?;
    if raw.len() < SampleXY::MIN_POINTS {
        return Err(AnalysisError::TooFewPoints {
            context: format!("accuracy predictor for `{}`", record.model_id),
            needed: SampleXY::MIN_POINTS,
            got: raw.len(),
        });
    }
    Ok(SampleXY::new(
        raw.iter().map(|p| p.invariance).collect(),
        raw.iter().map(|p| logit_scale(p.accuracy)).collect(),
    )?)
}

/// Huber fit of logit-accuracy on the measure over the training test sets.
pub fn fit_accuracy_predictor(record: &ModelRecord, measure: MeasureKind, train: &[String]) -> Result<LinearFit, AnalysisError> {
    Ok(huber_fit(&training_sample(record, measure, train)?)?)
}

/// Line fit plus bootstrap band, ready for [`predict_accuracy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPredictor {
    pub model_id: String,
    pub measure: MeasureKind,
    pub train: Vec<String>,
    pub fit: LinearFit,
    pub band: BootstrapBand,
}

pub fn train_accuracy_predictor(
    record: &ModelRecord,
    measure: MeasureKind,
    train: &[String],
    cfg: &StudyConfig,
) -> Result<AccuracyPredictor, AnalysisError> {
    let sample = training_sample(record, measure, train)?;
    Ok(AccuracyPredictor {
        model_id: record.model_id.clone(),
        measure,
        train: train.to_vec(),
        fit: huber_fit(&sample)?,
        band: bootstrap_band(&sample, cfg.resamples, cfg.level, cfg.seed)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPrediction {
    pub dataset_id: String,
    pub invariance: f64,
    pub predicted_accuracy: f64,
    /// `(lower, upper)` accuracy bounds from the inverse-logit of the band.
    pub interval: (f64, f64),
    /// The invariance lies outside the range the band was fitted on.
    pub extrapolated: bool,
}

/// Inverse-logit of the fitted line at `invariance`, with the band at the same
/// point as the interval. The interval is widened if needed so that it always
/// contains the point prediction.
pub fn predict_accuracy(
    fit: &LinearFit,
    band: &BootstrapBand,
    dataset_id: &str,
    invariance: f64,
) -> Result<AccuracyPrediction, AnalysisError> {
    if !invariance.is_finite() {
        return Err(AnalysisError::Argument(format!("invariance {invariance} is not finite")));
    }
    let predicted = inverse_logit(fit.predict(invariance));
    let (lo, hi, extrapolated) = band.interval_at(invariance);
    let (lo, hi) = (inverse_logit(lo), inverse_logit(hi));
    Ok(AccuracyPrediction {
        dataset_id: dataset_id.to_owned(),
        invariance,
        predicted_accuracy: predicted,
        interval: (lo.min(predicted), hi.max(predicted)),
        extrapolated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub rank: usize,
    pub model_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub dataset_id: String,
    pub measure: MeasureKind,
    pub entries: Vec<RankEntry>,
    /// Spearman ρ between invariance and accuracy when every ranked model has
    /// an accuracy (and there are at least three).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spearman_vs_accuracy: Option<f64>,
}

/// Orders models from most to least invariant on `dataset_id`. Distance-like
/// measures rank smaller values first; ties break on `model_id`.
pub fn rank_models(records: &[ModelRecord], dataset_id: &str, measure: MeasureKind) -> Result<Ranking, AnalysisError> {
    let mut scored: Vec<(f64, &ModelRecord, &TestSetEntry, f64)> = Vec::new();
    for r in records {
        r.validate()?;
        if let Ok((entry, score)) = scored_entry(r, dataset_id, measure) {
            scored.push((measure.invariance_orientation(score), r, entry, score));
        }
    }
    if scored.len() < 2 {
        return Err(AnalysisError::TooFewPoints {
            context: format!("ranking on `{dataset_id}`"),
            needed: 2,
            got: scored.len(),
        });
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.model_id.cmp(&b.1.model_id)));

    let spearman_vs_accuracy = if scored.iter().all(|s| s.2.accuracy.is_some()) {
        SampleXY::new(
            scored.iter().map(|s| s.0).collect(),
            scored.iter().map(|s| s.2.accuracy.unwrap_or_default()).collect(),
        )
        .ok()
        .and_then(|s| stats::spearman(&s).ok())
    } else {
        None
    };
    Ok(Ranking {
        dataset_id: dataset_id.to_owned(),
        measure,
        entries: scored
            .into_iter()
            .enumerate()
            .map(|(i, (_, r, e, score))| RankEntry {
                rank: i + 1,
                model_id: r.model_id.clone(),
                score,
                accuracy: e.accuracy,
            })
            .collect(),
        spearman_vs_accuracy,
    })
}
