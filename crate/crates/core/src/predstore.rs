//! Softmax prediction dumps: the `EIPRED1` container, validation and pairing.
//!
//! Layout of an `EIPRED1` stream (all integers little-endian, no padding):
//!
//! | bytes            | content                                          |
//! |------------------|--------------------------------------------------|
//! | `0..8`           | magic `EIPRED1\n`                                |
//! | `8..12`          | `u32` header length `H`                          |
//! | `12..12+H`       | UTF-8 JSON [`PredictionHeader`]                  |
//! | next `4·N`       | `u32` labels, only when `has_labels`             |
//! | next `4·N·K`     | `f32` probabilities, row-major                   |

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"EIPRED1\n";
pub const FORMAT_VERSION: u32 = 1;
/// Allowed deviation of a row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Transformation applied to the test set a dump was produced from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformTag {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    Grayscale,
}

impl TransformTag {
    pub const ALL: [TransformTag; 5] = [
        TransformTag::Identity,
        TransformTag::Rot90,
        TransformTag::Rot180,
        TransformTag::Rot270,
        TransformTag::Grayscale,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TransformTag::Identity => "identity",
            TransformTag::Rot90 => "rot90",
            TransformTag::Rot180 => "rot180",
            TransformTag::Rot270 => "rot270",
            TransformTag::Grayscale => "grayscale",
        }
    }

    /// Number of counter-clockwise quarter turns, for rotation tags.
    pub fn quarter_turns(self) -> Option<u8> {
        match self {
            TransformTag::Rot90 => Some(1),
            TransformTag::Rot180 => Some(2),
            TransformTag::Rot270 => Some(3),
            _ => None,
        }
    }
}

impl fmt::Display for TransformTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown transform tag `{0}` (expected identity, rot90, rot180, rot270 or grayscale)")]
pub struct UnknownTag(pub String);

impl FromStr for TransformTag {
    type Err = UnknownTag;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TransformTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| UnknownTag(s.to_owned()))
    }
}

/// JSON header of a dump. Field names are part of the file format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionHeader {
    pub format_version: u32,
    pub model_id: String,
    pub dataset_id: String,
    pub transform: TransformTag,
    pub num_samples: usize,
    pub num_classes: usize,
    pub has_labels: bool,
}

impl PredictionHeader {
    pub fn new(
        model_id: impl Into<String>,
        dataset_id: impl Into<String>,
        transform: TransformTag,
        num_samples: usize,
        num_classes: usize,
        has_labels: bool,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_id: model_id.into(),
            dataset_id: dataset_id.into(),
            transform,
            num_samples,
            num_classes,
            has_labels,
        }
    }
}

/// An `N×K` softmax matrix for one (model, dataset, transform) triple.
///
/// Fields are public so that malformed sets can be represented and reported by
/// [`validate`]; [`PredictionSet::new`] and [`read_predictions`] only ever hand
/// out valid sets.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub header: PredictionHeader,
    /// Row-major, `num_samples * num_classes` entries.
    pub probs: Vec<f32>,
    pub labels: Option<Vec<u32>>,
}

impl PredictionSet {
    pub fn new(
        header: PredictionHeader,
        probs: Vec<f32>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self, ValidationReport> {
        let set = Self {
            header,
            probs,
            labels,
        };
        set.validate().into_result()?;
        Ok(set)
    }

    pub fn num_samples(&self) -> usize {
        self.header.num_samples
    }

    pub fn num_classes(&self) -> usize {
        self.header.num_classes
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let k = self.header.num_classes;
        &self.probs[i * k..(i + 1) * k]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.probs.chunks_exact(self.header.num_classes)
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }
}

/// One violated invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    UnsupportedVersion { format_version: u32 },
    EmptyModelId,
    EmptyDatasetId,
    TooFewSamples { num_samples: usize },
    TooFewClasses { num_classes: usize },
    ShapeMismatch { expected: usize, actual: usize },
    LabelsPresence { has_labels: bool, labels_present: bool },
    LabelCount { expected: usize, actual: usize },
    NonFinite { row: usize, col: usize },
    OutOfRange { row: usize, col: usize, value: f32 },
    RowSum { row: usize, sum: f64 },
    LabelOutOfRange { row: usize, label: u32 },
}

impl Violation {
    /// Row the violation refers to, if it is row-local.
    pub fn row(&self) -> Option<usize> {
        match *self {
            Violation::NonFinite { row, .. }
            | Violation::OutOfRange { row, .. }
            | Violation::RowSum { row, .. }
            | Violation::LabelOutOfRange { row, .. } => Some(row),
            _ => None,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnsupportedVersion { format_version } => {
                write!(f, "format_version {format_version} is not supported (expected {FORMAT_VERSION})")
            }
            Violation::EmptyModelId => f.write_str("model_id is empty"),
            Violation::EmptyDatasetId => f.write_str("dataset_id is empty"),
            Violation::TooFewSamples { num_samples } => {
                write!(f, "num_samples is {num_samples}, need at least 1")
            }
            Violation::TooFewClasses { num_classes } => {
                write!(f, "num_classes is {num_classes}, need at least 2")
            }
            Violation::ShapeMismatch { expected, actual } => {
                write!(f, "probability matrix holds {actual} entries, header implies {expected}")
            }
            Violation::LabelsPresence {
                has_labels,
                labels_present,
            } => write!(f, "has_labels is {has_labels} but labels present is {labels_present}"),
            Violation::LabelCount { expected, actual } => {
                write!(f, "{actual} labels for {expected} samples")
            }
            Violation::NonFinite { row, col } => {
                write!(f, "row {row}: non-finite probability in column {col}")
            }
            Violation::OutOfRange { row, col, value } => {
                write!(f, "row {row}: probability {value} in column {col} outside [0, 1]")
            }
            Violation::RowSum { row, sum } => {
                write!(f, "row {row}: probabilities sum to {sum}")
            }
            Violation::LabelOutOfRange { row, label } => {
                write!(f, "row {row}: label {label} outside [0, num_classes)")
            }
        }
    }
}

/// Every invariant a [`PredictionSet`] violates; empty iff the set is valid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<(), ValidationReport> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(self)
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.violations.first() {
            None => f.write_str("valid"),
            Some(first) if self.violations.len() == 1 => write!(f, "{first}"),
            Some(first) => write!(f, "{first} (and {} more)", self.violations.len() - 1),
        }
    }
}

impl std::error::Error for ValidationReport {}

/// Checks every invariant and reports all violations. Never fails.
///
/// Row sums are only checked for rows whose entries are all finite, so a
/// single planted `NaN` yields exactly one violation.
pub fn validate(set: &PredictionSet) -> ValidationReport {
    let h = &set.header;
    let mut out = Vec::new();
    if h.format_version != FORMAT_VERSION {
        out.push(Violation::UnsupportedVersion {
            format_version: h.format_version,
        });
    }
    if h.model_id.is_empty() {
        out.push(Violation::EmptyModelId);
    }
    if h.dataset_id.is_empty() {
        out.push(Violation::EmptyDatasetId);
    }
    if h.num_samples < 1 {
        out.push(Violation::TooFewSamples {
            num_samples: h.num_samples,
        });
    }
    if h.num_classes < 2 {
        out.push(Violation::TooFewClasses {
            num_classes: h.num_classes,
        });
    }
    let expected = h.num_samples.checked_mul(h.num_classes);
    let shape_ok = expected == Some(set.probs.len());
    if !shape_ok {
        out.push(Violation::ShapeMismatch {
            expected: expected.unwrap_or(usize::MAX),
            actual: set.probs.len(),
        });
    }
    if h.has_labels != set.labels.is_some() {
        out.push(Violation::LabelsPresence {
            has_labels: h.has_labels,
            labels_present: set.labels.is_some(),
        });
    }
    if let Some(labels) = &set.labels {
        if labels.len() != h.num_samples {
            out.push(Violation::LabelCount {
                expected: h.num_samples,
                actual: labels.len(),
            });
        }
    }

    if shape_ok && h.num_classes > 0 {
        for (row, values) in set.probs.chunks_exact(h.num_classes).enumerate() {
            let mut finite = true;
            for (col, &v) in values.iter().enumerate() {
                if !v.is_finite() {
                    finite = false;
                    out.push(Violation::NonFinite { row, col });
                } else if !(0.0..=1.0).contains(&v) {
                    out.push(Violation::OutOfRange { row, col, value: v });
                }
            }
            if finite {
                let sum: f64 = values.iter().map(|&v| f64::from(v)).sum();
                if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    out.push(Violation::RowSum { row, sum });
                }
            }
        }
    }
    if let Some(labels) = &set.labels {
        for (row, &label) in labels.iter().enumerate() {
            if label as usize >= h.num_classes {
                out.push(Violation::LabelOutOfRange { row, label });
            }
        }
    }
    ValidationReport { violations: out }
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: stream does not start with `EIPRED1\\n`")]
    BadMagic,
    #[error("truncated {section}: need {expected} bytes, {available} available")]
    Truncated {
        section: &'static str,
        expected: usize,
        available: usize,
    },
    #[error("size mismatch: header implies {expected} bytes after the header, stream holds {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("invalid prediction set: {0}")]
    Invalid(ValidationReport),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Serialises a valid set as `EIPRED1`.
pub fn write_predictions<W: Write>(set: &PredictionSet, mut out: W) -> Result<(), FormatError> {
    out.write_all(&to_bytes(set)?)?;
    Ok(())
}

pub fn to_bytes(set: &PredictionSet) -> Result<Vec<u8>, FormatError> {
    validate(set).into_result().map_err(FormatError::Invalid)?;
    let header = serde_json::to_vec(&set.header).map_err(|e| FormatError::Header(e.to_string()))?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| FormatError::Header("header longer than u32::MAX bytes".into()))?;
    let label_bytes = set.labels.as_ref().map_or(0, |l| l.len() * 4);
    let mut buf = Vec::with_capacity(12 + header.len() + label_bytes + set.probs.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&header_len.to_le_bytes());
    buf.extend_from_slice(&header);
    if let Some(labels) = &set.labels {
        for &l in labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    for &p in &set.probs {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    Ok(buf)
}

fn take<'a>(
    bytes: &'a [u8],
    pos: &mut usize,
    len: usize,
    section: &'static str,
) -> Result<&'a [u8], FormatError> {
    let available = bytes.len() - *pos;
    if available < len {
        return Err(FormatError::Truncated {
            section,
            expected: len,
            available,
        });
    }
    let out = &bytes[*pos..*pos + len];
    *pos += len;
    Ok(out)
}

/// Parses an `EIPRED1` stream. The returned set is always valid.
pub fn read_predictions(bytes: &[u8]) -> Result<PredictionSet, FormatError> {
    if bytes.len() < MAGIC.len() {
        return if MAGIC.starts_with(bytes) {
            Err(FormatError::Truncated {
                section: "magic",
                expected: MAGIC.len(),
                available: bytes.len(),
            })
        } else {
            Err(FormatError::BadMagic)
        };
    }
    if &bytes[..8] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let mut pos = 8;
    let len_bytes = take(bytes, &mut pos, 4, "header length")?;
    let header_len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    let header_bytes = take(bytes, &mut pos, header_len, "header")?;
    let header: PredictionHeader =
        serde_json::from_slice(header_bytes).map_err(|e| FormatError::Header(e.to_string()))?;

    let label_len = if header.has_labels {
        header.num_samples.checked_mul(4)
    } else {
        Some(0)
    };
    let prob_len = header
        .num_samples
        .checked_mul(header.num_classes)
        .and_then(|n| n.checked_mul(4));
    let (Some(label_len), Some(prob_len)) = (label_len, prob_len) else {
        return Err(FormatError::Header("declared dimensions overflow".into()));
    };
    let remaining = bytes.len() - pos;
    if remaining > label_len + prob_len {
        return Err(FormatError::SizeMismatch {
            expected: label_len + prob_len,
            actual: remaining,
        });
    }

    let labels = if header.has_labels {
        let raw = take(bytes, &mut pos, label_len, "labels")?;
        Some(
            raw.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        )
    } else {
        None
    };
    let raw = take(bytes, &mut pos, prob_len, "probabilities")?;
    let probs = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();

    PredictionSet::new(header, probs, labels).map_err(FormatError::Invalid)
}

/// Metadata for CSV fixtures, which carry no header of their own.
#[derive(Debug, Clone)]
pub struct CsvMeta {
    pub model_id: String,
    pub dataset_id: String,
    pub transform: TransformTag,
}

/// Reads the plain-CSV fixture format: a first row `n,k`, then `n` rows of
/// `k` probabilities with an optional trailing integer label column.
pub fn read_csv(text: &str, meta: &CsvMeta) -> Result<PredictionSet, FormatError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let csv_err = |line: usize, message: String| FormatError::Csv { line, message };

    let (line, dims) = lines
        .next()
        .ok_or_else(|| csv_err(1, "missing `n,k` row".into()))?;
    let dims: Vec<&str> = dims.split(',').map(str::trim).collect();
    let [n, k] = dims[..] else {
        return Err(csv_err(line, "first row must be `n,k`".into()));
    };
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| csv_err(line, format!("bad dimension `{s}`: {e}")))
    };
    let (n, k) = (parse_dim(n)?, parse_dim(k)?);

    let mut probs = Vec::with_capacity(n.saturating_mul(k));
    let mut labels: Vec<u32> = Vec::new();
    let mut with_labels = None;
    let mut rows = 0;
    for (line, row) in lines {
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        let labelled = match fields.len() {
            len if len == k => false,
            len if len == k + 1 => true,
            len => {
                return Err(csv_err(line, format!("expected {k} or {} fields, found {len}", k + 1)))
            }
        };
        if *with_labels.get_or_insert(labelled) != labelled {
            return Err(csv_err(line, "label column present on some rows only".into()));
        }
        for f in &fields[..k] {
            probs.push(
                f.parse::<f32>()
                    .map_err(|e| csv_err(line, format!("bad probability `{f}`: {e}")))?,
            );
        }
        if labelled {
            let f = fields[k];
            labels.push(
                f.parse::<u32>()
                    .map_err(|e| csv_err(line, format!("bad label `{f}`: {e}")))?,
            );
        }
        rows += 1;
    }
    if rows != n {
        return Err(csv_err(line, format!("declared {n} rows, found {rows}")));
    }
    let has_labels = with_labels.unwrap_or(false);
    let header = PredictionHeader::new(
        meta.model_id.clone(),
        meta.dataset_id.clone(),
        meta.transform,
        n,
        k,
        has_labels,
    );
    PredictionSet::new(header, probs, has_labels.then_some(labels)).map_err(FormatError::Invalid)
}

pub fn load(path: &Path) -> Result<PredictionSet, FormatError> {
    read_predictions(&fs::read(path)?)
}

pub fn save(set: &PredictionSet, path: &Path) -> Result<(), FormatError> {
    fs::write(path, to_bytes(set)?)?;
    Ok(())
}

/// Which field made a pairing fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PairField {
    NumSamples,
    NumClasses,
    ModelId,
    DatasetId,
}

impl fmt::Display for PairField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairField::NumSamples => "num_samples",
            PairField::NumClasses => "num_classes",
            PairField::ModelId => "model_id",
            PairField::DatasetId => "dataset_id",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PairError {
    #[error("{role} set is invalid: {report}")]
    Invalid {
        role: &'static str,
        report: ValidationReport,
    },
    #[error("{field} differs: original {original}, transformed {transformed}")]
    Mismatch {
        field: PairField,
        original: String,
        transformed: String,
    },
    #[error("transform tags: original must be identity and transformed must not be (got {original} / {transformed})")]
    Tag {
        original: TransformTag,
        transformed: TransformTag,
    },
}

/// Row-aligned original/transformed predictions of one model on one dataset.
#[derive(Debug, Clone, Copy)]
pub struct PairedPredictions<'a> {
    original: &'a PredictionSet,
    transformed: &'a PredictionSet,
}

impl<'a> PairedPredictions<'a> {
    pub fn original(&self) -> &'a PredictionSet {
        self.original
    }

    pub fn transformed(&self) -> &'a PredictionSet {
        self.transformed
    }

    pub fn num_samples(&self) -> usize {
        self.original.num_samples()
    }

    pub fn num_classes(&self) -> usize {
        self.original.num_classes()
    }

    /// `(original row, transformed row)` for sample `i`.
    pub fn rows(&self, i: usize) -> (&'a [f32], &'a [f32]) {
        (self.original.row(i), self.transformed.row(i))
    }
}

/// Pairs an identity dump with a transformed dump of the same model and
/// dataset. Samples are aligned by row index.
pub fn pair<'a>(
    original: &'a PredictionSet,
    transformed: &'a PredictionSet,
) -> Result<PairedPredictions<'a>, PairError> {
    for (role, set) in [("original", original), ("transformed", transformed)] {
        let report = validate(set);
        if !report.is_valid() {
            return Err(PairError::Invalid { role, report });
        }
    }
    let (o, t) = (&original.header, &transformed.header);
    let mismatch = |field, a: &dyn fmt::Display, b: &dyn fmt::Display| PairError::Mismatch {
        field,
        original: a.to_string(),
        transformed: b.to_string(),
    };
    if o.num_samples != t.num_samples {
        return Err(mismatch(PairField::NumSamples, &o.num_samples, &t.num_samples));
    }
    if o.num_classes != t.num_classes {
        return Err(mismatch(PairField::NumClasses, &o.num_classes, &t.num_classes));
    }
    if o.model_id != t.model_id {
        return Err(mismatch(PairField::ModelId, &o.model_id, &t.model_id));
    }
    if o.dataset_id != t.dataset_id {
        return Err(mismatch(PairField::DatasetId, &o.dataset_id, &t.dataset_id));
    }
    if o.transform != TransformTag::Identity || t.transform == TransformTag::Identity {
        return Err(PairError::Tag {
            original: o.transform,
            transformed: t.transform,
        });
    }
    Ok(PairedPredictions {
        original,
        transformed,
    })
}
