use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use eibench_core::analysis::{
    self, collect_records, merge_records, AccuracyPrediction, ModelRecord, Ranking, StudyConfig,
};
use eibench_core::imgxform::{self, OnError};
use eibench_core::metrics::{self, EiMean, InvarianceRecord, MeasureKind, MeasureOptions};
use eibench_core::predstore::{self, CsvMeta, FormatError, PredictionSet, TransformTag};
use eibench_core::stats::LinearFit;
use eibench_core::synth::{self, PopulationConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::{
    BandArgs, Command, CorrelateArgs, Format, GroupBy, MeasureArgs, PredictArgs, RankArgs, SynthArgs,
    TransformArgs, ValidateArgs,
};

pub fn run(command: Command, format: Format) -> Result<String, CliError> {
    match command {
        Command::Transform(a) => transform(a, format),
        Command::Measure(a) => measure(a, format),
        Command::Correlate(a) => correlate(a, format),
        Command::Predict(a) => predict(a, format),
        Command::Rank(a) => rank(a, format),
        Command::Synth(a) => synth(a, format),
        Command::Validate(a) => validate(a, format),
    }
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialise") + "\n"
}

fn transform(a: TransformArgs, format: Format) -> Result<String, CliError> {
    if !a.input.is_dir() {
        return Err(CliError::io(&a.input, "not a readable directory"));
    }
    let on_error = if a.fail_fast { OnError::FailFast } else { OnError::Skip };
    let summary = imgxform::transform_dataset(&a.input, a.tag, &a.output, on_error)?;
    for s in &summary.skipped {
        eprintln!("skipped {}: {}", s.path.display(), s.reason);
    }
    Ok(match format {
        Format::Json => json(&summary),
        Format::Csv => format!("written,skipped\n{},{}\n", summary.written, summary.skipped.len()),
    })
}

fn tag_from_name(path: &Path) -> Option<TransformTag> {
    let stem = path.file_stem()?.to_str()?.to_ascii_lowercase();
    ["rot180", "rot270", "rot90", "grayscale", "identity"]
        .into_iter()
        .find(|t| stem.contains(t))
        .and_then(|t| t.parse().ok())
}

/// Loads an `EIPRED1` dump, or a CSV fixture when the extension is `.csv`.
fn load_predictions(path: &Path, csv_meta: impl FnOnce() -> CsvMeta) -> Result<PredictionSet, CliError> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        predstore::read_csv(&text, &csv_meta()).map_err(|e| CliError::format(path, e))
    } else {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        predstore::read_predictions(&bytes).map_err(|e| CliError::format(path, e))
    }
}

fn measure(a: MeasureArgs, format: Format) -> Result<String, CliError> {
    let meta = |transform| CsvMeta {
        model_id: a.model_id.clone(),
        dataset_id: a.dataset_id.clone(),
        transform,
    };
    let opts = MeasureOptions {
        mean: if a.arithmetic_mean { EiMean::Arithmetic } else { EiMean::Geometric },
        confidence_source: a.confidence_source.into(),
    };
    let original = load_predictions(&a.orig, || meta(TransformTag::Identity))?;
    let record = match a.trans.as_slice() {
        [one] => {
            let tag = tag_from_name(one).unwrap_or(TransformTag::Rot90);
            let transformed = load_predictions(one, || meta(tag))?;
            let pp = predstore::pair(&original, &transformed)?;
            metrics::measure(&pp, a.kind, opts)?
        }
        [r90, r180, r270] => {
            let r90 = load_predictions(r90, || meta(TransformTag::Rot90))?;
            let r180 = load_predictions(r180, || meta(TransformTag::Rot180))?;
            let r270 = load_predictions(r270, || meta(TransformTag::Rot270))?;
            metrics::measure_rotation(&original, [&r90, &r180, &r270], a.kind, opts)?
        }
        other => {
            return Err(CliError::Usage(format!(
                "--trans takes one file or three (rot90,rot180,rot270), got {}",
                other.len()
            )))
        }
    };
    Ok(match format {
        Format::Json => json(&record),
        Format::Csv => records_csv(std::slice::from_ref(&record)),
    })
}

fn records_csv(records: &[InvarianceRecord]) -> String {
    let mut out = String::from("model_id,dataset_id,transform,measure,score,accuracy,n\n");
    for r in records {
        let transform = serde_json::to_value(r.transform).expect("serialises");
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.model_id,
            r.dataset_id,
            transform.as_str().unwrap_or_default(),
            r.measure,
            r.score,
            acc,
            r.n
        );
    }
    out
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RecordFile {
    Model(ModelRecord),
    Models(Vec<ModelRecord>),
    Single(InvarianceRecord),
    Many(Vec<InvarianceRecord>),
}

/// Reads every `*.json` under `dir` (sorted by name). Files may hold model
/// records or flat invariance records, singly or as arrays.
fn load_records(dir: &Path) -> Result<Vec<ModelRecord>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::io(dir, "no *.json records found"));
    }
    let mut models = Vec::new();
    let mut flat = Vec::new();
    for path in &paths {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let parsed: RecordFile = serde_json::from_str(&text)
            .map_err(|e| CliError::io(path, format!("not a record file: {e}")))?;
        match parsed {
            RecordFile::Model(m) => models.push(m),
            RecordFile::Models(ms) => models.extend(ms),
            RecordFile::Single(r) => flat.push(r),
            RecordFile::Many(rs) => flat.extend(rs),
        }
    }
    models.extend(collect_records(&flat, "untagged")?);
    Ok(merge_records(models)?)
}

fn study_config(band: &BandArgs, group_by_tag: bool) -> Result<StudyConfig, CliError> {
    if !(band.level > 0.0 && band.level < 1.0) {
        return Err(CliError::Usage(format!("--level must lie in (0, 1), got {}", band.level)));
    }
    Ok(StudyConfig {
        resamples: band.resamples,
        level: band.level,
        seed: band.seed,
        group_by_tag,
    })
}

fn correlate(a: CorrelateArgs, format: Format) -> Result<String, CliError> {
    let records = load_records(&a.records)?;
    let cfg = study_config(&a.band, a.group_by == Some(GroupBy::Tag))?;
    let report = match (&a.dataset, &a.model) {
        (Some(dataset), None) => analysis::model_centric_study(&records, dataset, a.measure, &cfg)?,
        (None, Some(model)) => {
            let record = records
                .iter()
                .find(|r| &r.model_id == model)
                .ok_or_else(|| CliError::Invalid(format!("no record for model `{model}`")))?;
            analysis::dataset_centric_study(record, a.measure, &cfg)?
        }
        _ => return Err(CliError::Usage("pass exactly one of --dataset or --model".into())),
    };
    let report_json = json(&report);
    if let Some(out) = &a.out {
        fs::write(out, &report_json).map_err(|e| CliError::io(out, e))?;
        let csv_path = out.with_extension("csv");
        fs::write(&csv_path, report.points_csv()).map_err(|e| CliError::io(&csv_path, e))?;
    }
    Ok(match format {
        Format::Json => report_json,
        Format::Csv => report.points_csv(),
    })
}

#[derive(Serialize)]
struct ModelPredictions {
    model_id: String,
    measure: MeasureKind,
    train: Vec<String>,
    fit: LinearFit,
    predictions: Vec<AccuracyPrediction>,
}

fn predict(a: PredictArgs, format: Format) -> Result<String, CliError> {
    let records = load_records(&a.records)?;
    let cfg = study_config(&a.band, false)?;
    let selected: Vec<&ModelRecord> = match &a.model {
        Some(id) => {
            let r = records
                .iter()
                .find(|r| &r.model_id == id)
                .ok_or_else(|| CliError::Invalid(format!("no record for model `{id}`")))?;
            vec![r]
        }
        None => records.iter().collect(),
    };
    let mut out = Vec::new();
    for record in selected {
        let predictor = analysis::train_accuracy_predictor(record, a.measure, &a.train, &cfg)?;
        let mut predictions = Vec::new();
        for target in &a.target {
            let score = record
                .entry(target)
                .and_then(|e| e.scores.get(&a.measure))
                .ok_or_else(|| {
                    CliError::Invalid(format!(
                        "{}: no `{}` score for dataset `{target}`",
                        record.model_id, a.measure
                    ))
                })?;
            let p = analysis::predict_accuracy(&predictor.fit, &predictor.band, target, *score)?;
            if p.extrapolated {
                eprintln!(
                    "warning: {}/{target}: invariance {} lies outside the training range",
                    record.model_id, p.invariance
                );
            }
            predictions.push(p);
        }
        out.push(ModelPredictions {
            model_id: predictor.model_id,
            measure: predictor.measure,
            train: predictor.train,
            fit: predictor.fit,
            predictions,
        });
    }
    Ok(match format {
        Format::Json => json(&out),
        Format::Csv => {
            let mut s = String::from("model_id,dataset_id,invariance,predicted_accuracy,lower,upper,extrapolated\n");
            for m in &out {
                for p in &m.predictions {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{}",
                        m.model_id, p.dataset_id, p.invariance, p.predicted_accuracy, p.interval.0, p.interval.1, p.extrapolated
                    );
                }
            }
            s
        }
    })
}

fn rank(a: RankArgs, format: Format) -> Result<String, CliError> {
    let records = load_records(&a.records)?;
    let ranking: Ranking = analysis::rank_models(&records, &a.dataset, a.measure)?;
    Ok(match format {
        Format::Json => json(&ranking),
        Format::Csv => {
            let mut s = String::from("rank,model_id,score,accuracy\n");
            for e in &ranking.entries {
                let acc = e.accuracy.map(|a| a.to_string()).unwrap_or_default();
                let _ = writeln!(s, "{},{},{},{}", e.rank, e.model_id, e.score, acc);
            }
            s
        }
    })
}

#[derive(Serialize)]
struct SynthSummary {
    units: usize,
    files: usize,
    out: PathBuf,
}

fn synth(a: SynthArgs, format: Format) -> Result<String, CliError> {
    let text = fs::read_to_string(&a.config).map_err(|e| CliError::io(&a.config, e))?;
    let cfg: PopulationConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", a.config.display())))?;
    let population = synth::generate_population(&cfg)?;
    let files = synth::write_population(&population, &a.out)?;
    let summary = SynthSummary {
        units: population.units.len(),
        files,
        out: a.out,
    };
    Ok(match format {
        Format::Json => json(&summary),
        Format::Csv => format!("units,files,out\n{},{},{}\n", summary.units, summary.files, summary.out.display()),
    })
}

#[derive(Serialize)]
struct FileCheck {
    file: PathBuf,
    valid: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    violations: Vec<predstore::Violation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn validate(a: ValidateArgs, format: Format) -> Result<String, CliError> {
    let mut checks = Vec::new();
    let mut io_failure = None;
    for path in &a.files {
        let check = match fs::read(path) {
            Err(e) => {
                io_failure.get_or_insert_with(|| CliError::io(path, e));
                continue;
            }
            Ok(bytes) => match predstore::read_predictions(&bytes) {
                Ok(_) => FileCheck {
                    file: path.clone(),
                    valid: true,
                    violations: Vec::new(),
                    error: None,
                },
                Err(FormatError::Invalid(report)) => FileCheck {
                    file: path.clone(),
                    valid: false,
                    violations: report.violations,
                    error: None,
                },
                Err(e) => FileCheck {
                    file: path.clone(),
                    valid: false,
                    violations: Vec::new(),
                    error: Some(e.to_string()),
                },
            },
        };
        checks.push(check);
    }
    let payload = match format {
        Format::Json => json(&checks),
        Format::Csv => {
            let mut s = String::from("file,valid,violations,error\n");
            for c in &checks {
                let _ = writeln!(
                    s,
                    "{},{},{},{}",
                    c.file.display(),
                    c.valid,
                    c.violations.len(),
                    c.error.as_deref().unwrap_or("").replace(',', ";")
                );
            }
            s
        }
    };
    if let Some(e) = io_failure {
        print!("{payload}");
        return Err(e);
    }
    let invalid: Vec<&FileCheck> = checks.iter().filter(|c| !c.valid).collect();
    if invalid.is_empty() {
        return Ok(payload);
    }
    print!("{payload}");
    for c in &invalid {
        for v in &c.violations {
            eprintln!("{}: {v}", c.file.display());
        }
        if let Some(e) = &c.error {
            eprintln!("{}: {e}", c.file.display());
        }
    }
    let names: Vec<String> = invalid.iter().map(|c| c.file.display().to_string()).collect();
    let message = format!("{} of {} files invalid: {}", invalid.len(), checks.len(), names.join(", "));
    if invalid.iter().any(|c| c.error.is_some()) {
        Err(CliError::Io(message))
    } else {
        Err(CliError::Invalid(message))
    }
}
