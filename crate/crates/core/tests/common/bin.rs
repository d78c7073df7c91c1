//! Helpers that drive the `skipgs` binary and read back what it wrote.

use std::path::Path;
use std::process::{Command, Output};

use skipgs::trainer::TrainReport;

pub fn skipgs<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_skipgs"))
        .args(args)
        .output()
        .expect("spawn skipgs")
}

/// Runs the binary and panics with its stderr unless it exits 0.
pub fn skipgs_ok<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let out = skipgs(args);
    assert!(
        out.status.success(),
        "skipgs exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn gen_scene(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen-scene".to_string(), "--out".into(), dir.display().to_string()];
    args.extend(extra.iter().map(|s| s.to_string()));
    skipgs_ok(args);
}

pub struct Run {
    pub report: TrainReport,
    pub train_log: String,
}

pub fn train(scene: &Path, out: &Path, extra: &[&str]) -> Run {
    let mut args = vec![
        "train".to_string(),
        "--scene".into(),
        scene.display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    skipgs_ok(args);
    read_run(out)
}

pub fn read_run(out: &Path) -> Run {
    let report = std::fs::read_to_string(out.join("report.json")).expect("report.json");
    Run {
        report: serde_json::from_str(&report).expect("parse report.json"),
        train_log: std::fs::read_to_string(out.join("train_log.csv")).expect("train_log.csv"),
    }
}

/// Header plus rows of a CSV without quoting.
pub fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

pub fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

/// The CSV with every timing column removed, rejoined line by line.
pub fn non_timing_columns(text: &str) -> String {
    let (header, rows) = parse_csv(text);
    let keep: Vec<usize> = (0..header.len()).filter(|&i| !header[i].ends_with("_us")).collect();
    let pick = |r: &[String]| keep.iter().map(|&i| r[i].as_str()).collect::<Vec<_>>().join(",");
    std::iter::once(pick(&header))
        .chain(rows.iter().map(|r| pick(r)))
        .collect::<Vec<_>>()
        .join("\n")
}
