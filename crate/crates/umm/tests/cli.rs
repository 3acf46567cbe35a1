use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_umm");

fn umm(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(dir).env_remove("UMM_SEED").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn error_kind(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    v["error"].as_str().unwrap().to_string()
}

const TINY: &str = r#"{
  "config_version": 1,
  "seed": 4,
  "corpus": {"num_identities": 4, "views_per_identity": 3},
  "model": {"encoder": {"depth": 1, "heads": 2, "embed_dim": 16, "final_dim": 16},
            "tokenizer": {"embed_dim": 16, "stem_channels": 4}},
  "train": {"phase1_epochs": 1, "phase2_epochs": 1, "batch_size": 4},
  "eval": {"protocol": "i2r"}
}"#;

fn dir_bytes(d: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(d)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn end_to_end_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("run.json"), TINY).unwrap();
    ok(&umm(&["gen-corpus", "--config", "run.json", "--out", "corpus"], d));
    ok(&umm(&["train", "--config", "run.json", "--corpus", "corpus", "--out", "t1"], d));
    ok(&umm(&["train", "--config", "run.json", "--corpus", "corpus", "--out", "t2"], d));
    assert_eq!(dir_bytes(&d.join("t1/checkpoint")), dir_bytes(&d.join("t2/checkpoint")));
    assert_eq!(fs::read(d.join("t1/train_log.jsonl")).unwrap(), fs::read(d.join("t2/train_log.jsonl")).unwrap());
    assert_eq!(fs::read_to_string(d.join("t1/train_log.jsonl")).unwrap().lines().count(), 2);

    for gs in ["on", "off"] {
        ok(&umm(
            &["eval", "--checkpoint", "t1/checkpoint", "--corpus", "corpus", "--gallery-synthesis", gs, "--out", "rep"],
            d,
        ));
    }
    let on: serde_json::Value = serde_json::from_slice(&fs::read(d.join("rep/eval_i2r_gs_on.json")).unwrap()).unwrap();
    let off: serde_json::Value = serde_json::from_slice(&fs::read(d.join("rep/eval_i2r_gs_off.json")).unwrap()).unwrap();
    assert_eq!(on["report"]["protocol"]["gallery_synthesis"], true);
    assert_eq!(off["report"]["protocol"]["gallery_synthesis"], false);
    assert_eq!(on["report"]["query_count"], 4);
    assert_eq!(on["report"]["gallery_count"], 12);
    assert!(d.join("rep/eval_i2r_gs_on_cmc.csv").is_file());

    ok(&umm(&["embed", "--checkpoint", "t1/checkpoint", "--corpus", "corpus", "--modalities", "S,T", "--views", "2", "--out", "q.jsonl"], d));
    ok(&umm(&["embed", "--checkpoint", "t1/checkpoint", "--corpus", "corpus", "--out", "g.jsonl"], d));
    let q = fs::read_to_string(d.join("q.jsonl")).unwrap();
    assert!(q.starts_with(r#"{"version":1,"dim":16,"count":4}"#));
    ok(&umm(&["eval", "--query", "q.jsonl", "--gallery", "g.jsonl", "--protocol", "st2r", "--out", "rep2"], d));
    let st: serde_json::Value = serde_json::from_slice(&fs::read(d.join("rep2/eval_st2r_gs_off.json")).unwrap()).unwrap();
    assert_eq!(st["report"]["query_count"], 4);
    assert!(st.get("config").is_none());

    let from_ckpt = umm(&["eval", "--checkpoint", "t1/checkpoint", "--corpus", "corpus", "--protocol", "st2r", "--out", "rep3"], d);
    ok(&from_ckpt);
    let a: serde_json::Value = serde_json::from_slice(&fs::read(d.join("rep3/eval_st2r_gs_off.json")).unwrap()).unwrap();
    assert_eq!(a["report"], st["report"]);
}

#[test]
fn seed_flag_and_env_select_the_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("run.json"), TINY).unwrap();
    ok(&umm(&["gen-corpus", "--config", "run.json", "--seed", "9", "--out", "a"], d));
    let env = Command::new(BIN)
        .args(["gen-corpus", "--config", "run.json", "--out", "b"])
        .current_dir(d)
        .env("UMM_SEED", "9")
        .output()
        .unwrap();
    ok(&env);
    let both = Command::new(BIN)
        .args(["gen-corpus", "--config", "run.json", "--seed", "4", "--out", "c"])
        .current_dir(d)
        .env("UMM_SEED", "9")
        .output()
        .unwrap();
    ok(&both);
    ok(&umm(&["gen-corpus", "--config", "run.json", "--out", "e"], d));
    assert_eq!(dir_bytes(&d.join("a")), dir_bytes(&d.join("b")));
    assert_eq!(dir_bytes(&d.join("c")), dir_bytes(&d.join("e")));
    assert_ne!(dir_bytes(&d.join("a")), dir_bytes(&d.join("e")));
}

#[test]
fn failures_print_one_json_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(error_kind(&umm(&["train", "--corpus", "missing", "--out", "x"], d)), "MissingInput");
    fs::write(d.join("bad.json"), r#"{"config_version":1,"trian":{}}"#).unwrap();
    assert_eq!(error_kind(&umm(&["gen-corpus", "--config", "bad.json", "--out", "x"], d)), "ConfigParse");
    fs::write(d.join("old.json"), r#"{"config_version":0}"#).unwrap();
    assert_eq!(error_kind(&umm(&["gen-corpus", "--config", "old.json", "--out", "x"], d)), "VersionMismatch");
    fs::create_dir(d.join("empty")).unwrap();
    assert_eq!(error_kind(&umm(&["train", "--corpus", "empty", "--out", "x"], d)), "MissingManifest");
    assert_eq!(error_kind(&umm(&["eval", "--out", "x", "--gallery-synthesis", "maybe"], d)), "Usage");
    assert!(!d.join("x").exists());
}
