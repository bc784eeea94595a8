use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rahp<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rahp"))
        .args(args)
        .env_remove("RAHP_LLM_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn ok<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[S]) -> Output {
    let out = rahp(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// The one-line JSON error a failing command prints.
fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "stderr: {stderr}");
    serde_json::from_str(stderr.trim_end()).unwrap()
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

macro_rules! args {
    ($($x:expr),* $(,)?) => { [$(String::from($x)),*] };
}

/// Runs synth -> cluster -> prompts -> score -> infer -> eval in `dir`.
fn pipeline(dir: &Path, threads: &str) -> PathBuf {
    let p = |name: &str| dir.join(name);
    let common = args!["--threads", threads, "--seed", "7", "--num-super", "6"];
    let run = |a: &[String]| ok(&[&common[..], a].concat());
    run(&args!["synth", "vocab", "--dim", "24", "--vocab-out", s(&p("vocab.json")), "--entities-out", s(&p("entities.bin"))]);
    run(&args!["cluster", "--entities", s(&p("entities.bin")), "--vocab", s(&p("vocab.json")), "--out", s(&p("map.json"))]);
    run(&args!["synth", "regions", "--vocab", s(&p("vocab.json")), "--map", s(&p("map.json")), "--out", s(&p("regions.json"))]);
    run(&args![
        "prompts", "--vocab", s(&p("vocab.json")), "--map", s(&p("map.json")),
        "--regions", s(&p("regions.json")), "--out", s(&p("prompts.json")),
    ]);
    run(&args!["synth", "encode", "--prompts", s(&p("prompts.json")), "--dim", "24", "--out", s(&p("text.bin"))]);
    run(&args![
        "synth", "corpus", "--vocab", s(&p("vocab.json")), "--map", s(&p("map.json")),
        "--regions", s(&p("regions.json")), "--text", s(&p("text.bin")), "--images", "8",
        "--entities-per-image", "6", "--proposals-per-image", "20", "--gt-per-image", "5",
        "--out-dir", s(&p("corpus")),
    ]);
    run(&args![
        "score", "--proposals", s(&p("corpus/proposals.json")), "--relation", s(&p("corpus/relation.bin")),
        "--union", s(&p("corpus/union.bin")), "--text", s(&p("text.bin")), "--vocab", s(&p("vocab.json")),
        "--map", s(&p("map.json")), "--regions", s(&p("regions.json")), "--out", s(&p("scores.json")),
        "--audit", s(&p("audit.json")),
    ]);
    run(&args!["infer", "--proposals", s(&p("corpus/proposals.json")), "--scores", s(&p("scores.json")), "--out", s(&p("graphs.json"))]);
    run(&args![
        "eval", "--pred", s(&p("graphs.json")), "--gt", s(&p("corpus/gt.json")), "--protocol", "predcls",
        "--splits", s(&p("vocab.json")), "--iou", "0.5", "--out", s(&p("report.json")),
    ]);
    p("report.json")
}

const ARTIFACTS: [&str; 14] = [
    "vocab.json",
    "entities.bin",
    "map.json",
    "regions.json",
    "prompts.json",
    "text.bin",
    "corpus/proposals.json",
    "corpus/relation.bin",
    "corpus/union.bin",
    "corpus/gt.json",
    "scores.json",
    "audit.json",
    "graphs.json",
    "report.json",
];

#[test]
fn selftest_passes() {
    let out = ok(&args!["selftest"]);
    let results: Vec<serde_json::Value> = serde_json::from_slice(&out.stdout).unwrap();
    assert!(results.len() >= 10);
    assert!(results.iter().all(|r| r["passed"] == true));
}

#[test]
fn pipeline_report_has_every_split() {
    let dir = tempfile::tempdir().unwrap();
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(pipeline(dir.path(), "2")).unwrap()).unwrap();
    assert_eq!(report["protocol"], "predcls");
    assert_eq!(report["num_images"], 8);
    for split in ["total", "base", "novel"] {
        for field in ["recall_at_50", "recall_at_100", "mean_recall_at_50", "mean_recall_at_100", "per_predicate"] {
            assert!(report[split].get(field).is_some(), "{split}.{field} missing");
        }
    }
    assert_eq!(report["total"]["gt_relations"], 40);
    let r = report["total"]["recall_at_100"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r));
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "1");
    pipeline(b.path(), "4");
    for name in ARTIFACTS {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn score_rejects_mismatched_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "2");
    let p = |name: &str| dir.path().join(name);
    ok(&args!["synth", "encode", "--prompts", s(&p("prompts.json")), "--dim", "12", "--out", s(&p("text12.bin"))]);
    let out = rahp(&args![
        "--num-super", "6", "score", "--proposals", s(&p("corpus/proposals.json")),
        "--relation", s(&p("corpus/relation.bin")), "--union", s(&p("corpus/union.bin")),
        "--text", s(&p("text12.bin")), "--vocab", s(&p("vocab.json")), "--map", s(&p("map.json")),
        "--regions", s(&p("regions.json")), "--out", s(&p("bad.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    assert_eq!(err["error"], "DimensionMismatch");
    assert!(err["message"].as_str().unwrap().contains("12"));
    assert!(!p("bad.json").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [&["frobnicate"][..], &["eval", "--protocol", "sgdet"], &["score", "--k", "many"], &[]] {
        let out = rahp(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(error_line(&out)["error"], "UsageError");
    }
    let out = rahp(&args!["mine", "regions", "--triplets", "t.json", "--out", "o.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_is_not_an_error() {
    let out = ok(&args!["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["cluster", "prompts", "mine", "score", "infer", "eval", "loss-check", "selftest", "sweep"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "2");
    let p = |name: &str| dir.path().join(name);
    std::fs::write(p("zero.toml"), "alpha = 0.0\nnum_super = 6\n").unwrap();
    std::fs::write(p("one.toml"), "alpha = 1.0\nnum_super = 6\n").unwrap();
    let score = |extra: &[String], out: &str| {
        let base = args![
            "score", "--proposals", s(&p("corpus/proposals.json")), "--relation", s(&p("corpus/relation.bin")),
            "--union", s(&p("corpus/union.bin")), "--text", s(&p("text.bin")), "--vocab", s(&p("vocab.json")),
            "--map", s(&p("map.json")), "--regions", s(&p("regions.json")), "--out",
        ];
        ok(&[extra, &base[..], &[s(&p(out))]].concat());
        std::fs::read(p(out)).unwrap()
    };
    let zero = score(&args!["--config", s(&p("zero.toml"))], "a.json");
    let one = score(&args!["--config", s(&p("one.toml"))], "b.json");
    let overridden = score(&args!["--config", s(&p("one.toml")), "--alpha", "0"], "c.json");
    assert_ne!(zero, one);
    assert_eq!(zero, overridden);

    std::fs::write(p("typo.toml"), "alhpa = 0.5\n").unwrap();
    let out = rahp(&args!["--config", s(&p("typo.toml")), "selftest"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "InvalidConfig");
}

#[test]
fn sweep_tags_each_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "2");
    let p = |name: &str| dir.path().join(name);
    ok(&args![
        "--num-super", "6", "sweep", "--proposals", s(&p("corpus/proposals.json")),
        "--relation", s(&p("corpus/relation.bin")), "--union", s(&p("corpus/union.bin")),
        "--text", s(&p("text.bin")), "--vocab", s(&p("vocab.json")), "--map", s(&p("map.json")),
        "--regions", s(&p("regions.json")), "--gt", s(&p("corpus/gt.json")),
        "--alphas", "0,0.25", "--ks", "1,3", "--out", s(&p("sweep.json")),
    ]);
    let reports: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(p("sweep.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 4);
    assert_eq!(reports[1]["metadata"]["override"], serde_json::json!({ "alpha": 0.0, "k": 3 }));
    // the default run uses alpha 0.25, k 3
    let default: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("report.json")).unwrap()).unwrap();
    assert_eq!(reports[3]["total"], default["total"]);
}

#[test]
fn mining_from_fixtures_never_needs_the_network() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/mining");
    let triplets = dir.path().join("triplets.json");
    std::fs::write(&triplets, r#"["human|holding|wild animal", "vegetable|in|container"]"#).unwrap();
    let out = dir.path().join("regions.json");
    ok(&args!["mine", "regions", "--triplets", s(&triplets), "--fixtures", s(&fixtures), "--out", s(&out)]);
    let mined: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(mined["human|holding|wild animal"].as_array().unwrap().len(), 11);
    assert_eq!(mined["vegetable|in|container"].as_array().unwrap().len(), 5);

    std::fs::write(&triplets, r#"["male|riding|ground transport"]"#).unwrap();
    let failed = rahp(&args!["mine", "regions", "--triplets", s(&triplets), "--fixtures", s(&fixtures), "--out", s(&out)]);
    assert_eq!(failed.status.code(), Some(1));
    assert_eq!(error_line(&failed)["error"], "UnparseableResponse");
}

#[test]
fn loss_check_reports_every_loss() {
    let out = ok(&args!["loss-check", "--points", "25"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for loss in ["bbox", "entity_ce", "predicate_focal", "distill_l1"] {
        assert_eq!(report["losses"][loss]["points_tested"], 25, "{loss}");
        assert_eq!(report["losses"][loss]["passed"], true, "{loss}");
    }
}
