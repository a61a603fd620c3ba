use std::path::Path;
use std::process::{Command, Output};

fn tool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tissue-track")).args(args).env_remove("ENDO_TTAP_SEED").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tool(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn metric(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key)?.trim_start().strip_prefix('=')?.trim().parse().ok())
        .unwrap_or_else(|| panic!("no {key} in {report}"))
}

const SPEC: &str = "seed = 7\nheight = 48\nwidth = 48\nframes = 5\ntexture = blobs\noccluder = rect\noccluder.entry = 1\n";

const CONFIG: &str = "seed = 7\nstage1.iterations = 3\nstage2.total = 4\nstage2.block_iterations = 2\n";

#[test]
fn missing_flag_is_a_usage_error() {
    assert_eq!(tool(&["eval", "--pred", "x.csv"]).status.code(), Some(2));
    assert_eq!(tool(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_one_with_the_message() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.txt");
    std::fs::write(&spec, "amplitude = 40\n").unwrap();
    let out = tool(&["synth-gen", "--spec", p(&spec), "--out", p(&dir.path().join("v"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp amplitude"));
}

#[test]
fn eval_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    std::fs::write(&spec, SPEC).unwrap();
    let video = dir.path().join("v");
    ok(&["synth-gen", "--spec", p(&spec), "--out", p(&video)]);
    let gt = video.join("tracks.csv");
    let report = dir.path().join("report.txt");
    let text = ok(&["eval", "--pred", p(&gt), "--gt", p(&gt), "--report", p(&report)]);
    assert_eq!(metric(&text, "epe2d"), 0.0);
    assert_eq!(metric(&text, "acc2d"), 1.0);
    assert!(report.with_file_name("report.txt.manifest.txt").is_file());
}

#[test]
fn seed_variable_overrides_the_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    std::fs::write(&spec, SPEC).unwrap();
    let out = dir.path().join("v");
    let status = Command::new(env!("CARGO_BIN_EXE_tissue-track"))
        .args(["synth-gen", "--spec", p(&spec), "--out", p(&out)])
        .env("ENDO_TTAP_SEED", "31")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(std::fs::read_to_string(out.join("spec.txt")).unwrap().contains("seed = 31"));
    assert!(std::fs::read_to_string(out.join("manifest.txt")).unwrap().contains("seed = 31"));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.txt"), SPEC).unwrap();
    std::fs::write(d.join("train.txt"), CONFIG).unwrap();
    let video = d.join("v");
    let s1 = d.join("s1.ckpt");
    let s2 = d.join("s2.ckpt");
    let tracks = d.join("pred.csv");
    let overlay = d.join("overlay");

    ok(&["synth-gen", "--spec", p(&d.join("spec.txt")), "--out", p(&video)]);
    ok(&["train", "--stage", "1", "--config", p(&d.join("train.txt")), "--data", p(&video), "--out", p(&s1)]);
    ok(&["plg-generate", "--in", p(&video), "--out", p(&video.join("pseudo.csv")), "--teachers", "oracle"]);
    ok(&["train", "--stage", "2", "--config", p(&d.join("train.txt")), "--init", p(&s1), "--data", p(&video), "--out", p(&s2)]);
    ok(&[
        "track",
        "--video",
        p(&video),
        "--queries",
        p(&video.join("tracks.csv")),
        "--checkpoint",
        p(&s2),
        "--out",
        p(&tracks),
        "--render",
        p(&overlay),
    ]);
    let report = ok(&["eval", "--pred", p(&tracks), "--gt", p(&video.join("tracks.csv"))]);
    assert!(report.contains("epe2d"));

    for f in [
        video.join("frames/000000.png"),
        video.join("flows/fwd_000000.flo"),
        video.join("flows/bwd_000003.flo"),
        video.join("labels.csv"),
        video.join("manifest.txt"),
        video.join("pseudo.csv.manifest.txt"),
        s1.clone(),
        d.join("s1.loss.csv"),
        s1.with_file_name("s1.ckpt.manifest.txt"),
        s2.clone(),
        tracks.clone(),
        tracks.with_file_name("pred.csv.manifest.txt"),
        overlay.join("000004.png"),
    ] {
        assert!(f.is_file(), "missing {}", f.display());
    }
    let log = std::fs::read_to_string(d.join("s2.loss.csv")).unwrap();
    assert!(log.starts_with("step,component,value"));
}
