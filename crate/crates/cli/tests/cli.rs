use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn imcv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imcv")).args(args).output().expect("spawn imcv")
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn oned_gauss_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = imcv(&["oned-gauss", "--sigma2", "1.5", "--n", "300", "--replicas", "4", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read(&dir.path().join("summary.csv"));
    assert!(summary.lines().any(|l| l.contains("sigma2=1.5,IMCV,x0")));
    assert!(summary.lines().any(|l| l.contains(",bound,")));
    assert_eq!(read(&dir.path().join("replicas.jsonl")).lines().count(), 4);
    assert!(dir.path().join("config.json").exists());
    assert!(String::from_utf8_lossy(&o.stdout).contains("[sigma2=1.5]"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\nreplicas = 3\nn = 200\nsigma2 = 2.0\n").unwrap();
    let out = dir.path().join("out");
    let o = imcv(&[
        "oned-gauss",
        "--config",
        cfg.to_str().unwrap(),
        "--sigma2",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read(&out.join("summary.csv"));
    assert!(summary.contains("sigma2=3,"));
    assert!(!summary.contains("sigma2=2,"));
    assert_eq!(read(&out.join("replicas.jsonl")).lines().count(), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(imcv(&["gauss-d", "--replicas", "1", "--out", out]).status.code(), Some(2));
    assert_eq!(imcv(&["gauss-d", "--set", "nonsense=1", "--out", out]).status.code(), Some(2));
    let missing = dir.path().join("missing.csv");
    let o = imcv(&["logreg", "--dataset", missing.to_str().unwrap(), "--replicas", "2", "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "a,y\n1,oops\n").unwrap();
    let o = imcv(&["logreg", "--dataset", bad.to_str().unwrap(), "--replicas", "2", "--out", out]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn summary_is_identical_across_thread_counts() {
    let run = |threads: &str| {
        let dir = tempfile::tempdir().unwrap();
        let o = imcv(&[
            "logreg",
            "--dataset",
            data("ripley.csv").to_str().unwrap(),
            "--replicas",
            "4",
            "--seed",
            "11",
            "--threads",
            threads,
            "--set",
            "burn_in=50",
            "--set",
            "n=200",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (read(&dir.path().join("summary.csv")), read(&dir.path().join("replicas.jsonl")))
    };
    let one = run("1");
    assert_eq!(one, run("8"));
    assert_eq!(one, run("1"));
}

#[test]
fn bounds_command() {
    let dir = tempfile::tempdir().unwrap();
    let o = imcv(&[
        "bounds",
        "--sigma2",
        "1,1.5",
        "--nu",
        "5",
        "--bound-mc",
        "20000",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&dir.path().join("bounds.csv"));
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(1).unwrap().starts_with("normal,1.0,0.0,"));
}
