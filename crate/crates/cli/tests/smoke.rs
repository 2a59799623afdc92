//! End-to-end smoke tests driving the compiled binary: every subcommand
//! runs against a micro synthetic corpus, artifacts land where the
//! manifests say, and repeated evaluations produce identical metrics.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_promptrec");
const MICRO_SYNTH: &str = "synth:users=14,items=8,seq-min=5,seq-max=6,reviews=2";

fn run_in(home: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("PROMPTREC_HOME", home)
        .output()
        .expect("binary should launch")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap()
}

/// One pretrained checkpoint shared by the evaluate/transfer/report tests.
fn pretrain_fixture() -> &'static (tempfile::TempDir, PathBuf) {
    static FIXTURE: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let home = tempfile::tempdir().unwrap();
        let out_dir = home.path().join("pretrain-fixture");
        let out = run_in(
            home.path(),
            &[
                "pretrain",
                "--dataset",
                MICRO_SYNTH,
                "--seed",
                "7",
                "--vocab-size",
                "280",
                "--d-model",
                "16",
                "--heads",
                "2",
                "--d-ff",
                "32",
                "--enc-layers",
                "1",
                "--dec-layers",
                "1",
                "--max-len",
                "96",
                "--epochs",
                "1",
                "--batch-size",
                "16",
                "--out",
                out_dir.to_str().unwrap(),
            ],
        );
        assert_ok(&out);
        (home, out_dir)
    })
}

#[test]
fn ingest_writes_dataset_and_manifest_under_the_home_root() {
    let home = tempfile::tempdir().unwrap();
    let out = run_in(
        home.path(),
        &["ingest", "--dataset", MICRO_SYNTH, "--seed", "3"],
    );
    assert_ok(&out);

    // without --out the run dir is named by the config hash under the root
    let text = stdout(&out);
    let line = text
        .lines()
        .find(|l| l.starts_with("run directory:"))
        .expect("run directory line");
    let run_dir = PathBuf::from(line.trim_start_matches("run directory:").trim());
    assert!(run_dir.starts_with(home.path()));
    assert!(run_dir
        .file_name()
        .unwrap()
        .to_string_lossy()
        .starts_with("ingest-"));

    let manifest = read_json(&run_dir.join("manifest.json"));
    assert_eq!(manifest["command"], "ingest");
    assert_eq!(manifest["seeds"]["dataset"], 3);
    assert!(manifest["versions"]["promptrec-core"].is_string());
    let stats = read_json(&run_dir.join("stats.json"));
    assert_eq!(stats["users"], 14);
    assert_eq!(stats["items"], 8);

    // the persisted dataset is itself ingestible and identical
    let dataset_path = run_dir.join("dataset.json");
    let reingest_out = home.path().join("reingest");
    let out2 = run_in(
        home.path(),
        &[
            "ingest",
            "--dataset",
            dataset_path.to_str().unwrap(),
            "--out",
            reingest_out.to_str().unwrap(),
        ],
    );
    assert_ok(&out2);
    assert_eq!(
        read_json(&reingest_out.join("stats.json")),
        read_json(&run_dir.join("stats.json"))
    );
}

#[test]
fn same_config_reuses_the_same_run_directory_name() {
    let home = tempfile::tempdir().unwrap();
    let a = stdout(&run_in(
        home.path(),
        &["ingest", "--dataset", MICRO_SYNTH, "--seed", "3"],
    ));
    let b = stdout(&run_in(
        home.path(),
        &["ingest", "--dataset", MICRO_SYNTH, "--seed", "3"],
    ));
    let c = stdout(&run_in(
        home.path(),
        &["ingest", "--dataset", MICRO_SYNTH, "--seed", "4"],
    ));
    let dir = |s: &str| {
        s.lines()
            .find(|l| l.starts_with("run directory:"))
            .unwrap()
            .to_string()
    };
    assert_eq!(dir(&a), dir(&b));
    assert_ne!(dir(&a), dir(&c));
}

#[test]
fn build_corpus_and_train_vocab_write_their_artifacts() {
    let home = tempfile::tempdir().unwrap();
    let corpus_dir = home.path().join("corpus");
    let out = run_in(
        home.path(),
        &[
            "build-corpus",
            "--dataset",
            MICRO_SYNTH,
            "--seed",
            "5",
            "--out",
            corpus_dir.to_str().unwrap(),
        ],
    );
    assert_ok(&out);
    let summary = read_json(&corpus_dir.join("corpus_summary.json"));
    assert!(summary["pairs"].as_u64().unwrap() > 0);
    // default holdout keeps the last template of each family out
    let zeroshot = summary["zeroshot_prompts"].as_array().unwrap();
    assert_eq!(zeroshot.len(), 5);
    let pairs = read_json(&corpus_dir.join("pairs.json"));
    assert_eq!(
        pairs.as_array().unwrap().len() as u64,
        summary["pairs"].as_u64().unwrap()
    );

    let vocab_dir = home.path().join("vocab");
    let out = run_in(
        home.path(),
        &[
            "train-vocab",
            "--dataset",
            MICRO_SYNTH,
            "--seed",
            "5",
            "--vocab-size",
            "280",
            "--out",
            vocab_dir.to_str().unwrap(),
        ],
    );
    assert_ok(&out);
    let summary = read_json(&vocab_dir.join("vocab_summary.json"));
    assert!(summary["size"].as_u64().unwrap() <= 280);
    assert!(vocab_dir.join("vocab.json").is_file());
}

#[test]
fn pretrain_then_evaluate_then_report_round_trip() {
    let (home, pretrain_dir) = pretrain_fixture();
    for file in [
        "manifest.json",
        "dataset.json",
        "registry.toml",
        "pipeline.json",
        "vocab.json",
        "train_report.json",
        "pair_summary.json",
    ] {
        assert!(pretrain_dir.join(file).is_file(), "missing {file}");
    }
    assert!(pretrain_dir.join("checkpoint/latest.json").is_file());

    let eval_dir = home.path().join("eval-a");
    let out = run_in(
        home.path(),
        &[
            "evaluate",
            "--checkpoint",
            pretrain_dir.to_str().unwrap(),
            "--prompt",
            "2-1,2-13",
            "--setting",
            "all-item",
            "--beam",
            "12",
            "--out",
            eval_dir.to_str().unwrap(),
        ],
    );
    assert_ok(&out);
    let reports = read_json(&eval_dir.join("eval_report.json"));
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["prompt_id"], "2-1");
    assert_eq!(reports[0]["seen"], true);
    assert_eq!(reports[1]["prompt_id"], "2-13");
    assert_eq!(reports[1]["seen"], false);
    for report in reports {
        for metric in ["hr@5", "hr@10", "ndcg@5", "ndcg@10", "chance_hr@5"] {
            assert!(report["metrics"][metric].is_f64(), "missing {metric}");
        }
    }

    // a second identical evaluation reproduces every metric bit for bit
    let eval_dir_b = home.path().join("eval-b");
    let out = run_in(
        home.path(),
        &[
            "evaluate",
            "--checkpoint",
            pretrain_dir.to_str().unwrap(),
            "--prompt",
            "2-1,2-13",
            "--setting",
            "all-item",
            "--beam",
            "12",
            "--out",
            eval_dir_b.to_str().unwrap(),
        ],
    );
    assert_ok(&out);
    let again = read_json(&eval_dir_b.join("eval_report.json"));
    let again = again.as_array().unwrap();
    for (a, b) in reports.iter().zip(again) {
        assert_eq!(a["metrics"], b["metrics"]);
        assert_eq!(a["counts"], b["counts"]);
    }

    // report prints the manifest identity and the metrics
    let out = run_in(home.path(), &["report", eval_dir.to_str().unwrap()]);
    assert_ok(&out);
    let text = stdout(&out);
    assert!(text.contains("command:     evaluate"));
    assert!(text.contains("hr@5"));
}

#[test]
fn evaluate_rejects_mismatched_setting_and_respects_failure_exit() {
    let (home, pretrain_dir) = pretrain_fixture();
    let out = run_in(
        home.path(),
        &[
            "evaluate",
            "--checkpoint",
            pretrain_dir.to_str().unwrap(),
            "--prompt",
            "2-1",
            "--setting",
            "scalar",
            "--out",
            home.path().join("bad-eval").to_str().unwrap(),
        ],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("setting"), "stderr: {err}");
}

#[test]
fn transfer_runs_against_a_disjoint_catalog_domain() {
    let (home, pretrain_dir) = pretrain_fixture();
    let transfer_dir = home.path().join("transfer");
    // same user population (same prefix and count), disjoint item catalog
    let out = run_in(
        home.path(),
        &[
            "transfer",
            "--checkpoint",
            pretrain_dir.to_str().unwrap(),
            "--dataset",
            "synth:users=14,items=8,seq-min=5,seq-max=6,reviews=2,offset=100",
            "--beam",
            "8",
            "--max-new-tokens",
            "12",
            "--out",
            transfer_dir.to_str().unwrap(),
        ],
    );
    assert_ok(&out);
    let report = read_json(&transfer_dir.join("transfer_report.json"));
    assert_eq!(report["stats"]["shared_users"], 14);
    assert!(report["like"]["metrics"]["accuracy"].is_f64());
    assert!(report["rating"]["metrics"]["mae"].is_f64());
}

#[test]
fn ablate_writes_side_by_side_variants() {
    let home = tempfile::tempdir().unwrap();
    let ablate_dir = home.path().join("ablate");
    let out = run_in(
        home.path(),
        &[
            "ablate",
            "--kind",
            "model_size",
            "--dataset",
            MICRO_SYNTH,
            "--seed",
            "7",
            "--vocab-size",
            "280",
            "--d-model",
            "16",
            "--heads",
            "2",
            "--d-ff",
            "32",
            "--enc-layers",
            "1",
            "--dec-layers",
            "1",
            "--max-len",
            "96",
            "--epochs",
            "1",
            "--batch-size",
            "16",
            "--beam",
            "12",
            "--out",
            ablate_dir.to_str().unwrap(),
        ],
    );
    assert_ok(&out);
    let report = read_json(&ablate_dir.join("ablation_report.json"));
    assert_eq!(report["kind"], "model_size");
    assert!(report["aborted"].is_null());
    let variants = report["variants"].as_array().unwrap();
    assert_eq!(variants.len(), 2);
    assert!(
        variants[1]["param_count"].as_u64().unwrap()
            > variants[0]["param_count"].as_u64().unwrap()
    );
}
