use std::fs;

use umm::archive::{encode_archive, load_archive, save_archive};
use umm::checkpoint::{load_checkpoint, save_checkpoint, INDEX};
use umm::config::{RunConfig, CONFIG_VERSION};
use umm::corpus_io::{load_corpus, save_corpus, MANIFEST};
use umm::report::{cmc_csv, load_report, load_train_log, save_report, save_train_log};
use umm::UmmError;
use umm_core::datamodel::generate_corpus;
use umm_core::retrieval::{evaluate, EmbeddingRecord, EvalProtocol};
use umm_core::training::{EpochRecord, TrainLog};
use umm_core::{ModalityKind, ModalitySet, UmmModel};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.corpus.num_identities = 4;
    cfg.corpus.views_per_identity = 2;
    cfg.seed = 3;
    cfg
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn records() -> Vec<EmbeddingRecord> {
    (0..6)
        .map(|i| EmbeddingRecord {
            sample_id: format!("{:05}_{:02}", i / 2, i % 2),
            identity_id: i / 2,
            view_index: i % 2,
            modalities: ModalitySet::from_kinds(&[ModalityKind::S, ModalityKind::T]),
            vector: unit(&[1.0 + i as f64, 0.3 * i as f64 - 0.7, 0.1, -0.25]),
        })
        .collect()
}

#[test]
fn corpus_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&small_config().corpus_spec()).unwrap();
    save_corpus(&corpus, dir.path()).unwrap();
    assert!(dir.path().join("00000_00_R.bin").is_file());
    let back = load_corpus(dir.path()).unwrap();
    assert_eq!(back, corpus);
}

#[test]
fn corpus_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_corpus(dir.path()), Err(UmmError::MissingManifest(_))));
    assert!(matches!(load_corpus(&dir.path().join("absent")), Err(UmmError::MissingInput(_))));

    let corpus = generate_corpus(&small_config().corpus_spec()).unwrap();
    save_corpus(&corpus, dir.path()).unwrap();
    fs::write(dir.path().join("00001_01_S.bin"), [0u8; 12]).unwrap();
    assert!(matches!(load_corpus(dir.path()), Err(UmmError::RasterLengthMismatch { expected: 1024, got: 3, .. })));
}

#[test]
fn no_temp_files_are_left_behind() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&small_config().corpus_spec()).unwrap();
    save_corpus(&corpus, dir.path()).unwrap();
    for e in fs::read_dir(dir.path()).unwrap() {
        let name = e.unwrap().file_name().into_string().unwrap();
        assert!(!name.starts_with('.'), "{name}");
    }
    assert!(dir.path().join(MANIFEST).is_file());
}

#[test]
fn archive_round_trip_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.jsonl");
    let recs = records();
    save_archive(&recs, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header, serde_json::json!({"version": 1, "dim": 4, "count": 6}));
    let line: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    assert_eq!(line["modalities"], serde_json::json!(["S", "T"]));
    assert_eq!(load_archive(&path).unwrap(), recs);
}

#[test]
fn archive_rejects_bad_norm_and_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.jsonl");
    let mut recs = records();
    recs[2].vector[0] += 1e-3;
    fs::write(&path, encode_archive(&recs)).unwrap();
    assert!(matches!(load_archive(&path), Err(UmmError::InvalidArchive { .. })));

    let mut recs = records();
    recs[3].sample_id = recs[1].sample_id.clone();
    fs::write(&path, encode_archive(&recs)).unwrap();
    assert!(matches!(load_archive(&path), Err(UmmError::InvalidArchive { .. })));

    let mut recs = records();
    recs[0].vector[1] += 5e-6;
    fs::write(&path, encode_archive(&recs)).unwrap();
    assert!(load_archive(&path).is_ok());
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let model = UmmModel::new(&cfg.model, 21).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    save_checkpoint(&a, &cfg, 7, &model).unwrap();
    let ck = load_checkpoint(&a).unwrap();
    assert_eq!(ck.config, cfg);
    assert_eq!(ck.epoch, 7);
    assert_eq!(ck.model.store, model.store);
    save_checkpoint(&b, &ck.config, ck.epoch, &ck.model).unwrap();
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), model.store.len() + 1);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn checkpoint_version_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    save_checkpoint(dir.path(), &cfg, 0, &UmmModel::new(&cfg.model, 1).unwrap()).unwrap();
    let p = dir.path().join(INDEX);
    let text = fs::read_to_string(&p).unwrap();
    fs::write(&p, text.replacen(&format!("\"config_version\": {CONFIG_VERSION}"), "\"config_version\": 99", 1)).unwrap();
    assert!(matches!(
        load_checkpoint(dir.path()),
        Err(UmmError::VersionMismatch { what: "config", expected: CONFIG_VERSION, found: 99 })
    ));
}

#[test]
fn checkpoint_blob_truncation_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    save_checkpoint(dir.path(), &cfg, 0, &UmmModel::new(&cfg.model, 1).unwrap()).unwrap();
    fs::write(dir.path().join("readout.bias.bin"), [0u8; 8]).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(UmmError::RasterLengthMismatch { got: 2, .. })));
}

#[test]
fn config_echo_reparses_equal() {
    let mut cfg = small_config();
    cfg.train.lambda_syn = 0.25;
    cfg.apply_seed(Some(44), None).unwrap();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(RunConfig::parse("x.json".as_ref(), &text).unwrap(), cfg);
}

#[test]
fn config_rejects_unknown_keys_and_versions() {
    let p = std::path::Path::new("c.json");
    let nested = r#"{"config_version":1,"model":{"encoder":{"depth":2,"widht":3}}}"#;
    assert!(matches!(RunConfig::parse(p, nested), Err(UmmError::ConfigParse { .. })));
    assert!(matches!(RunConfig::parse(p, r#"{"config_version":2}"#), Err(UmmError::VersionMismatch { .. })));
    assert!(matches!(RunConfig::parse(p, r#"{"seed":1}"#), Err(UmmError::ConfigParse { .. })));
    let bad = r#"{"config_version":1,"corpus":{"image_size":48}}"#;
    assert!(matches!(RunConfig::parse(p, bad), Err(UmmError::ConfigParse { .. })));
    let ok = RunConfig::parse(p, r#"{"config_version":1}"#).unwrap();
    assert_eq!(ok, RunConfig::default());
}

#[test]
fn seed_precedence() {
    let mut cfg = RunConfig { seed: 5, ..RunConfig::default() };
    cfg.apply_seed(Some(9), Some("7")).unwrap();
    assert_eq!((cfg.seed, cfg.train_config().seed, cfg.corpus_spec().seed), (9, 9, 9));
    cfg.seed = 5;
    cfg.apply_seed(None, Some("7")).unwrap();
    assert_eq!(cfg.seed, 7);
    cfg.seed = 5;
    cfg.apply_seed(None, None).unwrap();
    assert_eq!(cfg.seed, 5);
    assert!(cfg.apply_seed(None, Some("x")).is_err());
}

#[test]
fn report_and_log_files() {
    let dir = tempfile::tempdir().unwrap();
    let recs = records();
    let p = EvalProtocol::named("st2r", false).unwrap();
    let report = evaluate(&recs, &recs, &p).unwrap();
    let cfg = small_config();
    save_report(dir.path(), "r", Some(&cfg), &report).unwrap();
    let back = load_report(&dir.path().join("r.json")).unwrap();
    assert_eq!(back.report, report);
    assert_eq!(back.config.unwrap(), cfg);
    let csv = fs::read_to_string(dir.path().join("r_cmc.csv")).unwrap();
    assert_eq!(csv, cmc_csv(&report));
    assert!(csv.starts_with("k,cmc\n1,"));
    assert_eq!(csv.lines().count(), report.cmc.len() + 1);

    let log = TrainLog {
        records: (0..3)
            .map(|e| EpochRecord {
                epoch: e,
                phase: 1 + (e >= 2) as u8,
                steps: 4,
                loss_total: 1.0 / (e as f64 + 1.0),
                loss_contrastive: 0.1,
                loss_synthesis: 0.2,
                probe_triplet_satisfaction: if e == 0 { None } else { Some(0.5) },
            })
            .collect(),
    };
    let lp = dir.path().join("log.jsonl");
    save_train_log(&lp, &log).unwrap();
    assert_eq!(fs::read_to_string(&lp).unwrap().lines().count(), 3);
    assert_eq!(load_train_log(&lp).unwrap(), log);
}

#[test]
fn error_lines_are_single_line_json() {
    let e = UmmError::MissingInput("a\nb".into());
    let line = e.to_json_line();
    assert!(!line.contains('\n'));
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["error"], "MissingInput");
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

    #[test]
    fn archive_round_trip_is_exact_for_any_unit_vectors(
        raw in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 5), 1..12),
        mask in 1u8..16,
    ) {
        proptest::prop_assume!(raw.iter().all(|v| v.iter().any(|x| x.abs() > 1e-3)));
        let kinds: Vec<ModalityKind> = ModalityKind::ALL.into_iter().filter(|k| mask & (1 << k.index()) != 0).collect();
        let recs: Vec<EmbeddingRecord> = raw
            .iter()
            .enumerate()
            .map(|(i, v)| EmbeddingRecord {
                sample_id: format!("{i:05}_00"),
                identity_id: i as u32,
                view_index: 0,
                modalities: ModalitySet::from_kinds(&kinds),
                vector: unit(v),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        save_archive(&recs, &path).unwrap();
        proptest::prop_assert_eq!(load_archive(&path).unwrap(), recs);
    }
}
