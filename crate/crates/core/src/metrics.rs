//! Invariance measures over paired softmax predictions.
//!
//! Effective Invariance (EI) scores a sample `√(p̂·p̂ₜ)` when the original and
//! transformed predictions agree on the class and `0` otherwise; a test set's
//! EI is the mean over samples. The baselines are JS divergence, ℓ2 distance,
//! accuracy difference, confidence only, consistency only, and consistency
//! with confidence difference.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::predstore::{pair, PairError, PairedPredictions, PredictionSet, TransformTag};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("empty softmax row")]
    EmptyRow,
    #[error("dimension mismatch: {left} vs {right} classes")]
    DimensionMismatch { left: usize, right: usize },
    #[error("{role} set has no labels")]
    MissingLabels { role: &'static str },
    #[error("expected a {expected} dump at this position, got {found}")]
    RotationTag {
        expected: TransformTag,
        found: TransformTag,
    },
    #[error(transparent)]
    Pair(#[from] PairError),
}

/// Predicted class and its probability for one softmax row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TopPrediction {
    pub class_index: usize,
    pub confidence: f64,
}

/// Argmax and max of a row; ties go to the lowest index.
pub fn top_prediction(row: &[f32]) -> Result<TopPrediction, MetricError> {
    let (first, rest) = row.split_first().ok_or(MetricError::EmptyRow)?;
    let mut best = (0, *first);
    for (i, &v) in rest.iter().enumerate() {
        if v > best.1 {
            best = (i + 1, v);
        }
    }
    Ok(TopPrediction {
        class_index: best.0,
        confidence: f64::from(best.1),
    })
}

fn check_dims(p: &[f32], q: &[f32]) -> Result<(), MetricError> {
    if p.len() != q.len() {
        return Err(MetricError::DimensionMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    if p.is_empty() {
        return Err(MetricError::EmptyRow);
    }
    Ok(())
}

/// How the two confidences of an agreeing pair are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EiMean {
    #[default]
    Geometric,
    Arithmetic,
}

impl EiMean {
    fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            EiMean::Geometric => (a * b).sqrt(),
            EiMean::Arithmetic => 0.5 * (a + b),
        }
    }
}

/// Per-sample EI with the geometric mean.
pub fn ei_sample(orig: &[f32], trans: &[f32]) -> Result<f64, MetricError> {
    ei_sample_with(orig, trans, EiMean::Geometric)
}

pub fn ei_sample_with(orig: &[f32], trans: &[f32], mean: EiMean) -> Result<f64, MetricError> {
    check_dims(orig, trans)?;
    let (o, t) = (top_prediction(orig)?, top_prediction(trans)?);
    Ok(if o.class_index == t.class_index {
        mean.combine(o.confidence, t.confidence)
    } else {
        0.0
    })
}

fn xlog2_ratio(x: f64, m: f64) -> f64 {
    if x > 0.0 {
        x * (x / m).log2()
    } else {
        0.0
    }
}

/// Jensen-Shannon divergence in bits, in `[0, 1]`.
pub fn js_divergence(p: &[f32], q: &[f32]) -> Result<f64, MetricError> {
    check_dims(p, q)?;
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (f64::from(a), f64::from(b));
        let m = 0.5 * (a + b);
        total += 0.5 * (xlog2_ratio(a, m) + xlog2_ratio(b, m));
    }
    Ok(total.clamp(0.0, 1.0))
}

pub fn l2_distance(p: &[f32], q: &[f32]) -> Result<f64, MetricError> {
    check_dims(p, q)?;
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

fn same_class_conf(orig: &[f32], trans: &[f32]) -> Result<Option<(f64, f64)>, MetricError> {
    check_dims(orig, trans)?;
    let (o, t) = (top_prediction(orig)?, top_prediction(trans)?);
    Ok((o.class_index == t.class_index).then_some((o.confidence, t.confidence)))
}

/// Fraction of rows whose predicted class matches the label.
pub fn accuracy(set: &PredictionSet) -> Result<f64, MetricError> {
    accuracy_as(set, "prediction")
}

fn accuracy_as(set: &PredictionSet, role: &'static str) -> Result<f64, MetricError> {
    let labels = set.labels.as_ref().ok_or(MetricError::MissingLabels { role })?;
    let hits = par::try_map_indexed(set.num_samples(), |i| {
        Ok::<_, MetricError>(
            if top_prediction(set.row(i))?.class_index == labels[i] as usize {
                1.0
            } else {
                0.0
            },
        )
    })?;
    Ok(par::pairwise_mean(&hits))
}

/// `accuracy(original) − accuracy(transformed)`.
pub fn accuracy_difference(pp: &PairedPredictions<'_>) -> Result<f64, MetricError> {
    Ok(accuracy_as(pp.original(), "original")? - accuracy_as(pp.transformed(), "transformed")?)
}

/// Mean top-class probability.
pub fn confidence_only(set: &PredictionSet) -> f64 {
    let conf = par::map_indexed(set.num_samples(), |i| {
        top_prediction(set.row(i)).map_or(f64::NAN, |t| t.confidence)
    });
    par::pairwise_mean(&conf)
}

fn per_sample_mean<F>(pp: &PairedPredictions<'_>, score: F) -> Result<f64, MetricError>
where
    F: Fn(&[f32], &[f32]) -> Result<f64, MetricError> + Sync + Send,
{
    let values = par::try_map_indexed(pp.num_samples(), |i| {
        let (o, t) = pp.rows(i);
        score(o, t)
    })?;
    Ok(par::pairwise_mean(&values))
}

pub fn consistency_only(pp: &PairedPredictions<'_>) -> Result<f64, MetricError> {
    per_sample_mean(pp, |o, t| Ok(same_class_conf(o, t)?.map_or(0.0, |_| 1.0)))
}

/// Per sample `1 − |p̂ₜ − p̂|` when classes agree, else `0`; averaged.
pub fn consistency_conf_diff(pp: &PairedPredictions<'_>) -> Result<f64, MetricError> {
    per_sample_mean(pp, |o, t| {
        Ok(same_class_conf(o, t)?.map_or(0.0, |(a, b)| 1.0 - (b - a).abs()))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureKind {
    Ei,
    Js,
    L2,
    AccDiff,
    ConfidenceOnly,
    ConsistencyOnly,
    ConsistencyConfDiff,
}

impl MeasureKind {
    pub const ALL: [MeasureKind; 7] = [
        MeasureKind::Ei,
        MeasureKind::Js,
        MeasureKind::L2,
        MeasureKind::AccDiff,
        MeasureKind::ConfidenceOnly,
        MeasureKind::ConsistencyOnly,
        MeasureKind::ConsistencyConfDiff,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MeasureKind::Ei => "ei",
            MeasureKind::Js => "js",
            MeasureKind::L2 => "l2",
            MeasureKind::AccDiff => "acc_diff",
            MeasureKind::ConfidenceOnly => "confidence_only",
            MeasureKind::ConsistencyOnly => "consistency_only",
            MeasureKind::ConsistencyConfDiff => "consistency_conf_diff",
        }
    }

    /// Maps a raw score to an orientation where larger means more invariant:
    /// distances are negated and accuracy difference is taken in absolute value
    /// before negation.
    pub fn invariance_orientation(self, score: f64) -> f64 {
        match self {
            MeasureKind::Js | MeasureKind::L2 => -score,
            MeasureKind::AccDiff => -score.abs(),
            _ => score,
        }
    }

    pub fn needs_labels(self) -> bool {
        self == MeasureKind::AccDiff
    }
}

impl fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown measure `{0}`")]
pub struct UnknownMeasure(pub String);

impl FromStr for MeasureKind {
    type Err = UnknownMeasure;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MeasureKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| UnknownMeasure(s.to_owned()))
    }
}

/// Transform a record was measured under; `rotation_avg` is the mean over the
/// three quarter-turn rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordTransform {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    Grayscale,
    RotationAvg,
}

impl From<TransformTag> for RecordTransform {
    fn from(tag: TransformTag) -> Self {
        match tag {
            TransformTag::Identity => RecordTransform::Identity,
            TransformTag::Rot90 => RecordTransform::Rot90,
            TransformTag::Rot180 => RecordTransform::Rot180,
            TransformTag::Rot270 => RecordTransform::Rot270,
            TransformTag::Grayscale => RecordTransform::Grayscale,
        }
    }
}

/// One model's aggregate score under one measure on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceRecord {
    pub model_id: String,
    pub dataset_id: String,
    pub transform: RecordTransform,
    pub measure: MeasureKind,
    pub score: f64,
    /// Accuracy of the original predictions, when labels are available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceSource {
    Original,
    #[default]
    Transformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MeasureOptions {
    pub mean: EiMean,
    /// Which side `confidence_only` is computed on.
    pub confidence_source: ConfidenceSource,
}

fn record(pp: &PairedPredictions<'_>, transform: RecordTransform, kind: MeasureKind, score: f64) -> InvarianceRecord {
    let original = pp.original();
    InvarianceRecord {
        model_id: original.header.model_id.clone(),
        dataset_id: original.header.dataset_id.clone(),
        transform,
        measure: kind,
        score,
        accuracy: original.labels.as_ref().and_then(|_| accuracy(original).ok()),
        n: pp.num_samples(),
    }
}

/// Mean per-sample EI over a paired test set.
pub fn ei_aggregate(pp: &PairedPredictions<'_>, mean: EiMean) -> Result<InvarianceRecord, MetricError> {
    measure(
        pp,
        MeasureKind::Ei,
        MeasureOptions {
            mean,
            ..Default::default()
        },
    )
}

fn score(pp: &PairedPredictions<'_>, kind: MeasureKind, opts: MeasureOptions) -> Result<f64, MetricError> {
    match kind {
        MeasureKind::Ei => per_sample_mean(pp, |o, t| ei_sample_with(o, t, opts.mean)),
        MeasureKind::Js => per_sample_mean(pp, js_divergence),
        MeasureKind::L2 => per_sample_mean(pp, l2_distance),
        MeasureKind::AccDiff => accuracy_difference(pp),
        MeasureKind::ConfidenceOnly => Ok(confidence_only(match opts.confidence_source {
            ConfidenceSource::Original => pp.original(),
            ConfidenceSource::Transformed => pp.transformed(),
        })),
        MeasureKind::ConsistencyOnly => consistency_only(pp),
        MeasureKind::ConsistencyConfDiff => consistency_conf_diff(pp),
    }
}

/// Aggregate score of `kind` on a pair. Distance-like kinds average per sample.
pub fn measure(pp: &PairedPredictions<'_>, kind: MeasureKind, opts: MeasureOptions) -> Result<InvarianceRecord, MetricError> {
    let s = score(pp, kind, opts)?;
    Ok(record(pp, pp.transformed().header.transform.into(), kind, s))
}

/// Unweighted mean of the per-angle aggregates over the rot90/rot180/rot270
/// dumps, in that order.
pub fn measure_rotation(
    original: &PredictionSet,
    rotated: [&PredictionSet; 3],
    kind: MeasureKind,
    opts: MeasureOptions,
) -> Result<InvarianceRecord, MetricError> {
    let expected = [TransformTag::Rot90, TransformTag::Rot180, TransformTag::Rot270];
    let mut per_angle = [0.0; 3];
    for ((set, tag), slot) in rotated.iter().zip(expected).zip(&mut per_angle) {
        if set.header.transform != tag {
            return Err(MetricError::RotationTag {
                expected: tag,
                found: set.header.transform,
            });
        }
        *slot = score(&pair(original, set)?, kind, opts)?;
    }
    let pp = pair(original, rotated[0])?;
    Ok(record(&pp, RecordTransform::RotationAvg, kind, per_angle.iter().sum::<f64>() / 3.0))
}

pub fn rotation_ei(
    original: &PredictionSet,
    r90: &PredictionSet,
    r180: &PredictionSet,
    r270: &PredictionSet,
) -> Result<InvarianceRecord, MetricError> {
    measure_rotation(original, [r90, r180, r270], MeasureKind::Ei, MeasureOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predstore::PredictionHeader;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn set(tag: TransformTag, rows: &[&[f32]], labels: Option<Vec<u32>>) -> PredictionSet {
        let k = rows[0].len();
        PredictionSet::new(
            PredictionHeader::new("m", "d", tag, rows.len(), k, labels.is_some()),
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
            labels,
        )
        .unwrap()
    }

    #[test]
    fn top_prediction_cases() {
        let t = top_prediction(&[0.1, 0.7, 0.2]).unwrap();
        assert_eq!(t.class_index, 1);
        assert_abs_diff_eq!(t.confidence, 0.7, epsilon = 1e-7);
        assert_eq!(top_prediction(&[0.5, 0.5]).unwrap().class_index, 0);
        assert_eq!(top_prediction(&[1.0, 0.0, 0.0]).unwrap(), TopPrediction { class_index: 0, confidence: 1.0 });
        assert_eq!(top_prediction(&[]), Err(MetricError::EmptyRow));
    }

    #[test]
    fn ei_sample_cases() {
        assert_eq!(ei_sample(&[0.9, 0.1], &[0.4, 0.6]).unwrap(), 0.0);
        assert_abs_diff_eq!(ei_sample(&[0.9, 0.1], &[0.64, 0.36]).unwrap(), 0.7589, epsilon = 1e-4);
        assert_eq!(ei_sample(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(ei_sample(&[1.0, 0.0], &[1.0, 0.0, 0.0]), Err(MetricError::DimensionMismatch { .. })));
        assert_abs_diff_eq!(
            ei_sample_with(&[0.9, 0.1], &[0.6, 0.4], EiMean::Arithmetic).unwrap(),
            0.75,
            epsilon = 1e-6
        );
    }

    #[test]
    fn js_and_l2_cases() {
        let p = [0.2f32, 0.3, 0.5];
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        assert_abs_diff_eq!(js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0, epsilon = 1e-12);
        let q = [0.6f32, 0.1, 0.3];
        assert_eq!(js_divergence(&p, &q).unwrap(), js_divergence(&q, &p).unwrap());
        assert_eq!(l2_distance(&p, &p).unwrap(), 0.0);
        assert_abs_diff_eq!(l2_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(l2_distance(&p, &q).unwrap(), l2_distance(&q, &p).unwrap());
    }

    #[test]
    fn aggregates() {
        let o = set(TransformTag::Identity, &[&[1.0, 0.0], &[1.0, 0.0]], Some(vec![0, 1]));
        let t = set(TransformTag::Rot90, &[&[1.0, 0.0], &[0.0, 1.0]], Some(vec![0, 1]));
        let pp = pair(&o, &t).unwrap();
        let r = ei_aggregate(&pp, EiMean::Geometric).unwrap();
        assert_eq!(r.score, 0.5);
        assert_eq!(r.accuracy, Some(0.5));
        assert_eq!(r.transform, RecordTransform::Rot90);
        assert_eq!(consistency_only(&pp).unwrap(), 0.5);
        assert_eq!(accuracy_difference(&pp).unwrap(), 0.5 - 1.0);

        let same = set(TransformTag::Grayscale, &[&[1.0, 0.0], &[1.0, 0.0]], Some(vec![0, 1]));
        let pp = pair(&o, &same).unwrap();
        assert_eq!(ei_aggregate(&pp, EiMean::Geometric).unwrap().score, 1.0);
        assert_eq!(measure(&pp, MeasureKind::Js, MeasureOptions::default()).unwrap().score, 0.0);
        assert_eq!(accuracy_difference(&pp).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_cases() {
        let s = set(TransformTag::Identity, &[&[0.9, 0.1], &[0.2, 0.8], &[0.6, 0.4], &[0.3, 0.7]], Some(vec![0, 1, 0, 0]));
        assert_eq!(accuracy(&s).unwrap(), 0.75);
        let unlabelled = set(TransformTag::Identity, &[&[0.9, 0.1]], None);
        assert!(matches!(accuracy(&unlabelled), Err(MetricError::MissingLabels { .. })));
    }

    #[test]
    fn acc_diff_sign_flips_with_roles() {
        let a = set(TransformTag::Identity, &[&[0.9, 0.1], &[0.2, 0.8]], Some(vec![0, 1]));
        let b = set(TransformTag::Rot90, &[&[0.9, 0.1], &[0.8, 0.2]], Some(vec![0, 1]));
        let mut a_rot = a.clone();
        a_rot.header.transform = TransformTag::Rot90;
        let mut b_id = b.clone();
        b_id.header.transform = TransformTag::Identity;
        let fwd = accuracy_difference(&pair(&a, &b).unwrap()).unwrap();
        let rev = accuracy_difference(&pair(&b_id, &a_rot).unwrap()).unwrap();
        assert_eq!(fwd, 0.5);
        assert_eq!(rev, -fwd);
    }

    #[test]
    fn acc_diff_needs_labels() {
        let o = set(TransformTag::Identity, &[&[0.9, 0.1]], None);
        let t = set(TransformTag::Rot90, &[&[0.9, 0.1]], None);
        let pp = pair(&o, &t).unwrap();
        assert!(matches!(measure(&pp, MeasureKind::AccDiff, MeasureOptions::default()), Err(MetricError::MissingLabels { .. })));
    }

    #[test]
    fn confidence_only_cases() {
        let s = set(TransformTag::Identity, &[&[0.6, 0.4], &[0.8, 0.2]], None);
        assert_abs_diff_eq!(confidence_only(&s), 0.7, epsilon = 1e-7);
        let s = set(TransformTag::Identity, &[&[0.5, 0.5], &[0.5, 0.5]], None);
        assert_eq!(confidence_only(&s), 0.5);
        let s = set(TransformTag::Identity, &[&[0.0, 1.0], &[1.0, 0.0]], None);
        assert_eq!(confidence_only(&s), 1.0);
    }

    #[test]
    fn consistency_conf_diff_cases() {
        let o = set(TransformTag::Identity, &[&[0.3, 0.25, 0.25, 0.2], &[0.9, 0.1, 0.0, 0.0], &[0.9, 0.1, 0.0, 0.0]], None);
        let t = set(TransformTag::Rot90, &[&[0.3, 0.25, 0.25, 0.2], &[0.6, 0.4, 0.0, 0.0], &[0.1, 0.9, 0.0, 0.0]], None);
        let pp = pair(&o, &t).unwrap();
        let per = [1.0, 0.7, 0.0];
        assert_abs_diff_eq!(consistency_conf_diff(&pp).unwrap(), per.iter().sum::<f64>() / 3.0, epsilon = 1e-7);
        // EI is confidence-aware where this measure is not
        assert_abs_diff_eq!(ei_sample(o.row(0), t.row(0)).unwrap(), 0.3, epsilon = 1e-7);
    }

    #[test]
    fn rotation_average() {
        let o = set(TransformTag::Identity, &[&[1.0, 0.0]], None);
        let make = |tag, row: &[f32]| set(tag, &[row], None);
        let r90 = make(TransformTag::Rot90, &[0.09, 0.91]);
        let r180 = make(TransformTag::Rot180, &[0.36, 0.64]);
        let r270 = make(TransformTag::Rot270, &[0.81, 0.19]);
        // per-angle EI: 0, 0 (0.36 < 0.64), 0.9
        let r = rotation_ei(&o, &r90, &r180, &r270).unwrap();
        assert_abs_diff_eq!(r.score, 0.3, epsilon = 1e-7);
        assert_eq!(r.transform, RecordTransform::RotationAvg);
        assert!(matches!(rotation_ei(&o, &r180, &r90, &r270), Err(MetricError::RotationTag { .. })));
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["transform"], "rotation_avg");
        assert!(json.get("accuracy").is_none());
    }

    #[test]
    fn measure_kind_parse() {
        for k in MeasureKind::ALL {
            assert_eq!(k.as_str().parse::<MeasureKind>().unwrap(), k);
            assert_eq!(serde_json::to_value(k).unwrap(), k.as_str());
        }
        assert!("kl".parse::<MeasureKind>().is_err());
    }

    fn arb_row(k: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(0.0f64..1.0, k).prop_filter_map("positive mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-3).then(|| v.iter().map(|x| (x / s) as f32).collect())
        })
    }

    proptest! {
        #[test]
        fn ei_sample_bounds_and_symmetry((p, q) in (2usize..12).prop_flat_map(|k| (arb_row(k), arb_row(k)))) {
            let e = ei_sample(&p, &q).unwrap();
            let (tp, tq) = (top_prediction(&p).unwrap(), top_prediction(&q).unwrap());
            prop_assert!(e >= 0.0);
            prop_assert!(e <= 1.0);
            if e > 0.0 {
                // a geometric mean sits between its two arguments
                prop_assert!(e >= tp.confidence.min(tq.confidence) - 1e-12);
                prop_assert!(e <= tp.confidence.max(tq.confidence) + 1e-12);
            }
            prop_assert_eq!(e == 0.0, tp.class_index != tq.class_index);
            prop_assert_eq!(e, ei_sample(&q, &p).unwrap());
            let js = js_divergence(&p, &q).unwrap();
            prop_assert!((0.0..=1.0).contains(&js));
            prop_assert_eq!(js, js_divergence(&q, &p).unwrap());
        }
    }
}
