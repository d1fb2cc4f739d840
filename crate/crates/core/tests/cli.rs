use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_deep-alm");

const SMALL: [&str; 6] = [
    "scenarios.train_count=48",
    "scenarios.validation_count=16",
    "scenarios.eval_count=40",
    "optimizer.epochs=2",
    "optimizer.batch_size=16",
    "output.histogram_bins=8",
];

fn run(out: &Path, extra: &[&str], args: &[&str]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.env("RUST_LOG", "warn");
    cmd.arg("--set").arg(format!("output.dir={}", out.display()));
    for s in SMALL.iter().chain(extra) {
        cmd.arg("--set").arg(s);
    }
    cmd.args(args).output().unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn run_dir(out: &Path) -> PathBuf {
    let mut dirs: Vec<_> = std::fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1);
    dirs.pop().unwrap()
}

fn csv_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv" || x == "svg") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn pipeline_is_byte_identical_across_worker_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let stdout = ok(&run(a.path(), &[], &["--workers", "1", "pipeline"]));
    assert!(stdout.contains("compare: trained vs benchmark"));
    ok(&run(b.path(), &[], &["--workers", "3", "pipeline"]));
    let (da, db) = (run_dir(a.path()), run_dir(b.path()));
    assert_eq!(da.file_name(), db.file_name(), "run directory is named by the config hash");
    let (fa, fb) = (csv_files(&da), csv_files(&db));
    for name in [
        "params.csv",
        "setup.csv",
        "training_loss.csv",
        "eval/trained_outcomes.csv",
        "eval/benchmark_outcomes.csv",
        "eval/summary.csv",
        "compare/paired_outcomes.csv",
        "compare/summary.csv",
        "compare/comparison.csv",
        "compare/histogram.csv",
        "compare/histogram.svg",
    ] {
        assert!(fa.contains_key(Path::new(name)), "missing {name}");
    }
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{} differs between worker counts", k.display());
    }
    for bin in ["scenarios_train.bin", "scenarios_eval.bin", "policy.bin"] {
        assert_eq!(std::fs::read(da.join(bin)).unwrap(), std::fs::read(db.join(bin)).unwrap(), "{bin}");
    }
}

#[test]
fn identical_strategies_have_zero_excess() {
    let out = tempfile::tempdir().unwrap();
    for step in ["ingest", "calibrate", "simulate"] {
        ok(&run(out.path(), &[], &[step]));
    }
    ok(&run(out.path(), &[], &["compare", "--a", "benchmark", "--b", "benchmark"]));
    let text = std::fs::read_to_string(run_dir(out.path()).join("compare/comparison.csv")).unwrap();
    assert!(text.lines().any(|l| l == "excess_roe,0.0"), "{text}");
    assert!(text.lines().any(|l| l == "p_value,1.0"), "{text}");
}

#[test]
fn refuses_seed_collisions() {
    let out = tempfile::tempdir().unwrap();
    let o = run(out.path(), &["scenarios.validation_seed=1"], &["ingest"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("seeds must differ"));
}

#[test]
fn requires_earlier_artifacts() {
    let out = tempfile::tempdir().unwrap();
    let o = run(out.path(), &[], &["train"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing input"));
    let o = run(out.path(), &[], &["evaluate"]);
    assert!(!o.status.success());
}

#[test]
fn ingest_twice_gives_the_same_store() {
    let out = tempfile::tempdir().unwrap();
    ok(&run(out.path(), &[], &["ingest"]));
    let first = std::fs::read(run_dir(out.path()).join("params.csv")).unwrap();
    // re-ingest the normalised store itself
    let store = out.path().join("store.csv");
    std::fs::write(&store, &first).unwrap();
    let again = tempfile::tempdir().unwrap();
    let src = format!("data.ecb_csv=\"{}\"", store.display());
    ok(&run(again.path(), &[&src], &["ingest"]));
    assert_eq!(std::fs::read(run_dir(again.path()).join("params.csv")).unwrap(), first);
}

#[test]
fn resume_from_checkpoint_is_a_no_op_once_done() {
    let out = tempfile::tempdir().unwrap();
    for step in ["ingest", "calibrate", "simulate", "train"] {
        ok(&run(out.path(), &[], &[step]));
    }
    let dir = run_dir(out.path());
    let policy = std::fs::read(dir.join("policy.bin")).unwrap();
    let loss = std::fs::read(dir.join("training_loss.csv")).unwrap();
    ok(&run(out.path(), &[], &["train", "--resume"]));
    assert_eq!(std::fs::read(dir.join("policy.bin")).unwrap(), policy);
    assert_eq!(std::fs::read(dir.join("training_loss.csv")).unwrap(), loss);
}

#[test]
fn fixture_generator_reproduces_the_bundled_file() {
    let out = tempfile::tempdir().unwrap();
    let path = out.path().join("fixture.csv");
    let o = Command::new(BIN).args(["make-fixture", "--out"]).arg(&path).output().unwrap();
    ok(&o);
    let bundled = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/synthetic_ecb.csv");
    assert_eq!(std::fs::read(path).unwrap(), std::fs::read(bundled).unwrap());
}
