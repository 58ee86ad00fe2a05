use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn linmix(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_linmix"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL_VERIFY: &str = "duality_instances = 50\nkronecker_instances = 50\nper_channel_instances = 20\ninstances = 10\nshard_partitions = 4\npayload_tokens = 16, 64\n";

const TINY_DISTILL: &str = "\
height = 4
width = 4
dim = 8
depth = 2
heads = 2
rank = 2
dataset_size = 8
heldout_size = 2
teacher_max_steps = 10
teacher_eval_every = 5
steps = 6
eval_every = 3
";

#[test]
fn verify_passes_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("v.conf"), SMALL_VERIFY).unwrap();
    let a = linmix(&["verify", "--config", "v.conf", "--seed", "7", "--out", "a"], tmp.path());
    let b = linmix(&["verify", "--config", "v.conf", "--seed", "7", "--out", "b"], tmp.path());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("all 10 suites passed"));
    let csv = fs::read_to_string(tmp.path().join("a/verify.csv")).unwrap();
    let comment = csv.lines().next().unwrap();
    assert!(comment.starts_with("# config_sha256=") && comment.ends_with("seed=7"));
    assert_eq!(csv.lines().nth(1), Some("suite,instances,max_err,tolerance,passed"));
    let config = fs::read_to_string(tmp.path().join("a/config.txt")).unwrap();
    assert!(config.contains("seed = 7"));
    assert!(config.contains("duality_instances = 50"));
}

#[test]
fn broken_normalization_fails_the_named_suite() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("v.conf"), SMALL_VERIFY).unwrap();
    let o = linmix(
        &["verify", "--config", "v.conf", "--set", "break_normalization=true", "--out", "x"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("normalization row-sum"));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(linmix(&["verify", "--set", "bogus=1"], tmp.path()).status.code(), Some(2));
    fs::write(tmp.path().join("bad.conf"), "seed 3\n").unwrap();
    assert_eq!(linmix(&["verify", "--config", "bad.conf"], tmp.path()).status.code(), Some(2));
    assert_eq!(linmix(&["bench", "--set", "repeats=2"], tmp.path()).status.code(), Some(2));
    assert_eq!(linmix(&["distill", "--variant", "nope"], tmp.path()).status.code(), Some(2));
    assert_eq!(linmix(&["frobnicate"], tmp.path()).status.code(), Some(2));
}

#[test]
fn shard_demo_payload_is_constant() {
    let tmp = tempfile::tempdir().unwrap();
    let o = linmix(&["shard-demo", "--set", "tokens=64,256,1024", "--out", "s"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("s/shard.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(2).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[1] == rows[0][1]));
    let baseline: Vec<u64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(baseline[1], 4 * baseline[0]);
    assert!(rows.iter().all(|r| r[3].parse::<f64>().unwrap() <= 1e-12));
    assert!(tmp.path().join("s/shard.svg").exists());
}

#[test]
fn bench_marks_oversized_softmax() {
    let tmp = tempfile::tempdir().unwrap();
    let o = linmix(
        &[
            "bench",
            "--set", "softmax_n=32,64,128,256",
            "--set", "linfusion_n=64,128",
            "--set", "scan_n=64",
            "--set", "aux_budget_bytes=65536",
            "--out", "b",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("b/bench.csv")).unwrap();
    assert_eq!(csv.lines().nth(1), Some("mixer,n,wall_time_s,peak_extra_bytes,status"));
    // 8·128² bytes exceeds the budget; 256 is skipped
    assert!(csv.contains("softmax,128,,131072,oom"));
    assert!(!csv.contains("softmax,256"));
    assert_eq!(csv.lines().filter(|l| l.starts_with("linfusion,")).count(), 2);
    assert!(tmp.path().join("b/bench.svg").exists());
}

#[test]
fn distill_is_deterministic_and_reuses_the_teacher() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("d.conf"), TINY_DISTILL).unwrap();
    let a = linmix(&["distill", "--config", "d.conf", "--out", "a"], tmp.path());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = linmix(&["distill", "--config", "d.conf", "--out", "b"], tmp.path());
    assert!(b.status.success());
    for f in ["teacher.lmx", "student.lmx"] {
        let bytes = fs::read(tmp.path().join("a").join(f)).unwrap();
        assert_eq!(&bytes[..4], b"LMX1");
        assert_eq!(bytes, fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
    let again = linmix(&["distill", "--config", "d.conf", "--out", "a"], tmp.path());
    assert!(stdout(&again).contains("teacher: loaded"));
    assert_eq!(
        fs::read(tmp.path().join("a/student.lmx")).unwrap(),
        fs::read(tmp.path().join("b/student.lmx")).unwrap()
    );
    let metrics = fs::read_to_string(tmp.path().join("a/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2 + 1 + 6);
    assert!(fs::read_to_string(tmp.path().join("a/summary.txt")).unwrap().contains("held-out kd"));
}

#[test]
fn distill_variant_flag_selects_the_student() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("d.conf"), TINY_DISTILL).unwrap();
    let o = linmix(&["distill", "--config", "d.conf", "--variant", "unnormalized", "--out", "u"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(tmp.path().join("u/summary.txt")).unwrap();
    assert!(summary.starts_with("variant unnormalized"));
    assert!(summary.contains("with normalization on"));
    assert!(fs::read_to_string(tmp.path().join("u/config.txt")).unwrap().contains("variant = unnormalized"));
}
