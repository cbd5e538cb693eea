use std::collections::BTreeMap;
use std::fs;

use eibench_core::analysis::{self, ModelRecord, StudyConfig};
use eibench_core::metrics::{self, MeasureKind, MeasureOptions};
use eibench_core::predstore::{self, pair};
use eibench_core::synth::{self, PopulationConfig};

fn population() -> synth::Population {
    let mut cfg = PopulationConfig::new(12, 800, 10, 21);
    cfg.noise_sd = 0.1;
    synth::generate_population(&cfg).unwrap()
}

#[test]
fn written_population_reloads_and_rescores() {
    let pop = population();
    let dir = tempfile::tempdir().unwrap();
    let files = synth::write_population(&pop, dir.path()).unwrap();
    assert_eq!(files, 24);

    let mut from_disk: BTreeMap<String, f64> = BTreeMap::new();
    for unit in &pop.units {
        let id = &unit.truth.model_id;
        let o = predstore::load(&dir.path().join(format!("preds/{id}__synthetic__identity.pred"))).unwrap();
        let t = predstore::load(&dir.path().join(format!("preds/{id}__synthetic__rot90.pred"))).unwrap();
        assert_eq!(o, unit.original);
        assert_eq!(t, unit.transformed);
        let ei = metrics::measure(&pair(&o, &t).unwrap(), MeasureKind::Ei, MeasureOptions::default()).unwrap();
        from_disk.insert(id.clone(), ei.score);
    }

    for record in synth::build_records(&pop).unwrap() {
        let text = fs::read_to_string(dir.path().join(format!("records/{}.json", record.model_id))).unwrap();
        let parsed: ModelRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, record);
        assert_eq!(record.entries[0].scores[&MeasureKind::Ei], from_disk[&record.model_id]);
    }

    let truth = fs::read_to_string(dir.path().join("ground_truth.csv")).unwrap();
    assert_eq!(truth.lines().count(), 13);
}

#[test]
fn flat_records_give_the_same_study() {
    let pop = population();
    let records = synth::build_records(&pop).unwrap();
    let mut flat = Vec::new();
    for unit in &pop.units {
        let pp = pair(&unit.original, &unit.transformed).unwrap();
        for kind in MeasureKind::ALL {
            flat.push(metrics::measure(&pp, kind, MeasureOptions::default()).unwrap());
        }
    }
    let collected = analysis::collect_records(&flat, "standard").unwrap();
    let cfg = StudyConfig {
        resamples: 200,
        seed: 5,
        ..StudyConfig::default()
    };
    let a = analysis::model_centric_study(&records, "synthetic", MeasureKind::Ei, &cfg).unwrap();
    let b = analysis::model_centric_study(&collected, "synthetic", MeasureKind::Ei, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn study_is_seed_deterministic_and_seed_sensitive() {
    let records = synth::build_records(&population()).unwrap();
    let cfg = |seed| StudyConfig {
        resamples: 300,
        seed,
        ..StudyConfig::default()
    };
    let a = analysis::model_centric_study(&records, "synthetic", MeasureKind::Js, &cfg(1)).unwrap();
    let b = analysis::model_centric_study(&records, "synthetic", MeasureKind::Js, &cfg(1)).unwrap();
    let c = analysis::model_centric_study(&records, "synthetic", MeasureKind::Js, &cfg(2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.fit, c.fit);
    assert_ne!(a.band, c.band);
}

#[test]
fn ei_study_beats_js_on_flat_softmaxes() {
    let mut cfg = PopulationConfig::new(60, 2000, 10, 4);
    cfg.hard_set = true;
    cfg.hard_confidence_range = (0.3, 0.65);
    cfg.accuracy_range = (0.05, 0.45);
    cfg.invariance_link.slope = 18.0;
    cfg.invariance_link.intercept = -3.9;
    cfg.noise_sd = 0.1;
    let records = synth::build_records(&synth::generate_population(&cfg).unwrap()).unwrap();
    let study = StudyConfig {
        resamples: 100,
        ..StudyConfig::default()
    };
    let ei = analysis::model_centric_study(&records, "synthetic", MeasureKind::Ei, &study).unwrap();
    let js = analysis::model_centric_study(&records, "synthetic", MeasureKind::Js, &study).unwrap();
    assert!(ei.stats.pearson_r > 0.8, "{}", ei.stats.pearson_r);
    assert!(js.stats.pearson_r.abs() < ei.stats.pearson_r - 0.3);
}
