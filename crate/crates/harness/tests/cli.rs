// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end runs of the `beliefscope` binary on the bundled example data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use beliefscope_harness::report::Manifest;
use beliefscope_harness::run::{ExperimentReport, QueryRecord, QUERY_RECORDS};
use sha2::{Digest, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_beliefscope");

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn cli(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "error").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap().trim().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Corpus of both tasks plus a demo mock, in `dir`.
fn workspace(dir: &Path) -> (PathBuf, PathBuf) {
    let fk = dir.join("fk.jsonl");
    let ws = dir.join("ws.jsonl");
    let excl = data("exclusions.txt");
    ok(&[
        "build-corpus", "--task", "fk",
        "--input", s(&data("triplets.jsonl")),
        "--templates", s(&data("templates.json")),
        "--exclusions", s(&excl),
        "--out", s(&fk),
    ]);
    ok(&["build-corpus", "--task", "ws", "--input", s(&data("ws.jsonl")), "--exclusions", s(&excl), "--out", s(&ws)]);
    let corpus = dir.join("corpus.jsonl");
    fs::write(&corpus, fs::read_to_string(&fk).unwrap() + &fs::read_to_string(&ws).unwrap()).unwrap();
    let mock = dir.join("mock.json");
    ok(&["init-mock", "--corpus", s(&corpus), "--out", s(&mock)]);
    (corpus, mock)
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn effects_config(dir: &Path, out: &str, model: &str) -> PathBuf {
    write_config(
        dir,
        &format!("{out}.toml"),
        &format!(
            "experiment = \"manipulation-effects\"\nmodel = {model:?}\nmodel_path = \"mock.json\"\n\
             corpus = \"corpus.jsonl\"\noutput_dir = {out:?}\n\n[sample]\ngroups_per_task = 6\nbatch_size = 4\n"
        ),
    )
}

fn records(run: &Path) -> Vec<QueryRecord> {
    fs::read_to_string(run.join(QUERY_RECORDS))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn report(run: &Path) -> ExperimentReport {
    serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn check_manifest(run: &Path) -> Manifest {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    for e in &manifest.files {
        let bytes = fs::read(run.join(&e.path)).unwrap();
        assert_eq!(bytes.len() as u64, e.bytes, "{}", e.path);
        assert_eq!(hex::encode(Sha256::digest(&bytes)), e.sha256, "{}", e.path);
    }
    manifest
}

#[test]
fn corpus_build_reports_exclusions() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&[
        "build-corpus", "--task", "ws",
        "--input", s(&data("ws.jsonl")),
        "--exclusions", s(&data("exclusions.txt")),
        "--out", s(&dir.path().join("ws.jsonl")),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sentences kept 11, dropped 1"));
    let lines = fs::read_to_string(dir.path().join("ws.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 11 * 5);
}

#[test]
fn effects_run_is_deterministic_and_consistent_with_records() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path());
    let a = PathBuf::from(ok(&["run", "--config", s(&effects_config(dir.path(), "a", "mock"))]));
    let b = PathBuf::from(ok(&["run", "--config", s(&effects_config(dir.path(), "b", "mock"))]));
    assert_eq!(a.file_name(), b.file_name(), "run dir is named by content hash");
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
    assert_eq!(fs::read(a.join(QUERY_RECORDS)).unwrap(), fs::read(b.join(QUERY_RECORDS)).unwrap());

    let rep = report(&a);
    let recs = records(&a);
    assert_eq!(recs.len(), rep.corpus.queries_selected);
    assert!(!rep.medians.is_empty());
    for row in &rep.medians {
        let values: Vec<f64> = recs
            .iter()
            .filter(|r| r.task == row.task && r.manipulation == row.manipulation)
            .filter_map(|r| r.bd_diff_value)
            .collect();
        assert_eq!(values.len(), row.n);
        match (median(values), row.median) {
            (Some(want), Some(got)) => assert!((want - got).abs() < 1e-12, "{} {:?}", row.task, row.manipulation),
            (want, got) => assert_eq!(want, got),
        }
    }

    let manifest = check_manifest(&a);
    for want in ["report.json", "meta.json", "tables/bddiff_medians.csv", "tables/bddiff_medians.txt", "plots/bddiff_medians.svg"] {
        assert!(manifest.files.iter().any(|f| f.path == want), "{want} missing from manifest");
    }
}

#[test]
fn report_subcommand_reemits_requested_formats() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path());
    let run = PathBuf::from(ok(&["run", "--config", s(&effects_config(dir.path(), "r", "mock"))]));
    ok(&["report", "--run", s(&run), "--formats", "delimited-values"]);
    let manifest = check_manifest(&run);
    assert!(manifest.files.iter().any(|f| f.path.ends_with(".csv")));
    assert!(manifest.files.iter().any(|f| f.path.ends_with(".txt")), "other formats are kept");

    let bad = cli(&["report", "--run", s(&run), "--formats", "pdf"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn bad_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = write_config(dir.path(), "m.toml", "experiment = \"steering\"\ncorpus = \"nope.jsonl\"\n");
    assert_eq!(cli(&["run", "--config", s(&missing)]).status.code(), Some(2));
    let unknown = write_config(dir.path(), "u.toml", "experiment = \"sideways\"\ncorpus = \"c.jsonl\"\n");
    assert_eq!(cli(&["run", "--config", s(&unknown)]).status.code(), Some(2));
    workspace(dir.path());
    let no_section = write_config(
        dir.path(),
        "s.toml",
        "experiment = \"steering\"\nmodel_path = \"mock.json\"\ncorpus = \"corpus.jsonl\"\n",
    );
    let out = cli(&["run", "--config", s(&no_section)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[steering]"));
}

#[test]
fn bridge_over_stdio_matches_in_process_model() {
    let dir = tempfile::tempdir().unwrap();
    let (_, mock) = workspace(dir.path());
    let local = PathBuf::from(ok(&["run", "--config", s(&effects_config(dir.path(), "local", "mock"))]));
    let endpoint = format!("bridge:stdio:{BIN} serve --model mock --model-path {}", s(&mock));
    let remote = PathBuf::from(ok(&["run", "--config", s(&effects_config(dir.path(), "remote", &endpoint))]));
    assert_eq!(fs::read(local.join(QUERY_RECORDS)).unwrap(), fs::read(remote.join(QUERY_RECORDS)).unwrap());
    let (l, r) = (report(&local), report(&remote));
    assert_eq!(r.model, "bridge");
    assert_eq!(l.medians, r.medians);
    assert_eq!(l.paired_tests, r.paired_tests);
}

#[test]
fn other_experiments_complete_on_the_demo_mock() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path());
    let head = "model_path = \"mock.json\"\ncorpus = \"corpus.jsonl\"\noutput_dir = \"runs\"\nseeds = [0, 1]\n";
    let cases = [
        ("action-split", "[sample]\nper_action_cell = 20\nmin_cell = 3\n", "tables/action_split.csv"),
        ("steering", "[sample]\ngroups_per_task = 2\n\n[steering]\nstride = 1\n", "tables/steering.csv"),
        ("neurofeedback", "[neuro]\nexemplars_per_class = 2\n", "tables/neuro_accuracy.csv"),
        ("neuro-probe", "[neuro]\nexemplars_per_class = 2\n", "tables/probe_shares.csv"),
    ];
    for (experiment, tail, table) in cases {
        let cfg = write_config(
            dir.path(),
            &format!("{experiment}.toml"),
            &format!("experiment = \"{experiment}\"\n{head}\n{tail}"),
        );
        let run = PathBuf::from(ok(&["run", "--config", s(&cfg)]));
        assert!(run.join(table).is_file(), "{experiment}: {table}");
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("meta.json")).unwrap()).unwrap();
        assert_eq!(meta["status"], "ok");
        check_manifest(&run);
    }
    let steer = report(&dir.path().join("runs").read_dir().unwrap().map(|e| e.unwrap().path()).find(|p| {
        report(p).steering.is_some()
    }).unwrap());
    let summary = steer.steering.unwrap();
    assert!(summary.toward_counter.total + summary.toward_base.total > 0, "some queries were steered");
}

#[test]
fn tiny_model_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, _) = workspace(dir.path());
    let model = dir.path().join("tiny.json");
    ok(&["init-tiny", "--corpus", s(&corpus), "--out", s(&model), "--layers", "2", "--dim", "16", "--heads", "2"]);
    let cfg = write_config(
        dir.path(),
        "tiny.toml",
        "experiment = \"manipulation-effects\"\nmodel = \"tiny\"\nmodel_path = \"tiny.json\"\n\
         corpus = \"corpus.jsonl\"\noutput_dir = \"runs\"\n\n[sample]\ngroups_per_task = 1\nfilter_known = false\n\
         max_new_tokens = 24\n\n[metric]\ntarget_stride = 1\n",
    );
    let run = PathBuf::from(ok(&["run", "--config", s(&cfg)]));
    assert_eq!(records(&run).len(), report(&run).corpus.queries_selected);
    check_manifest(&run);
}
