//! Command-line front end: `gen-scene`, `train` and `compare`.
//!
//! Exit codes are 0 on success, 1 on usage errors and 2 on runtime failures.

use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::scene::{generate_scene, init_training_scene, target_file_name, write_ppm, InitMode, SceneDir, SceneSpec};
use crate::trainer::{ext_float, train, write_eval_log, write_train_log, TrainConfig, TrainReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Environment variable read when `--threads` is not given.
pub const THREADS_ENV: &str = "SKIPGS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "skipgs", version, about = "Backward-gated Gaussian splatting trainer")]
pub struct Cli {
    /// Renderer worker threads [env: SKIPGS_THREADS]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with self-rendered targets.
    GenScene(GenSceneArgs),
    /// Train on a generated scene.
    Train(TrainArgs),
    /// Compare two training reports.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn get(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    PerturbedGt,
    RandomVolume,
}

fn parse_size(s: &str) -> Result<[usize; 2], String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let p = |v: &str| v.parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok([p(w)?, p(h)?])
}

#[derive(Debug, Args)]
pub struct GenSceneArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON scene spec; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub gaussians: Option<usize>,
    #[arg(long)]
    pub cams: Option<usize>,
    /// Image size as WxH.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<[usize; 2]>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub extent: Option<f64>,
    #[arg(long)]
    pub ring_radius: Option<f64>,
    /// Ring elevation in radians.
    #[arg(long)]
    pub elevation: Option<f64>,
    #[arg(long)]
    pub fov: Option<f64>,
    #[arg(long, value_enum)]
    pub init_mode: Option<InitArg>,
    #[arg(long)]
    pub init_count: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `gen-scene`.
    #[arg(long)]
    pub scene: PathBuf,
    /// Output directory; defaults to `<scene>/<arm>_seed<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub skipgs: Option<Switch>,
    #[arg(long, value_enum)]
    pub budget: Option<Switch>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub td: Option<u64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Reference report (file or run directory).
    pub reference: PathBuf,
    /// Candidate report (file or run directory); deltas are candidate minus reference.
    pub candidate: PathBuf,
    /// Directory for compare.json and the plotting script.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn scene_spec_from(args: &GenSceneArgs) -> anyhow::Result<SceneSpec> {
    let mut spec = match &args.config {
        Some(p) => read_json(p)?,
        None => SceneSpec::default(),
    };
    if let Some(v) = args.gaussians {
        spec.num_gt_gaussians = v;
        if args.init_count.is_none() && spec.init_mode == InitMode::PerturbedGt {
            spec.init_count = v;
        }
    }
    if let Some(v) = args.cams {
        spec.num_cams = v;
    }
    if let Some(v) = args.size {
        spec.image_size = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.extent {
        spec.extent = v;
    }
    if let Some(v) = args.ring_radius {
        spec.ring_radius = v;
    }
    if let Some(v) = args.elevation {
        spec.ring_elevation = v;
    }
    if let Some(v) = args.fov {
        spec.fov_deg = v;
    }
    if let Some(v) = args.init_mode {
        spec.init_mode = match v {
            InitArg::PerturbedGt => InitMode::PerturbedGt,
            InitArg::RandomVolume => InitMode::RandomVolume,
        };
    }
    if let Some(v) = args.init_count {
        spec.init_count = v;
    }
    if let Some(v) = args.noise_sigma {
        spec.noise_sigma = v;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn train_config_from(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.skipgs {
        cfg.skipgs_enabled = v.get();
    }
    if let Some(v) = args.budget {
        cfg.gating.budget_enabled = v.get();
    }
    if let Some(v) = args.iters {
        cfg.total_iters = v;
    }
    if let Some(v) = args.td {
        cfg.densify_end = v;
    }
    if let Some(v) = args.warmup {
        cfg.gating.warmup_len = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    cfg.densify.t_d = cfg.densify_end;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gen_scene(args: &GenSceneArgs) -> anyhow::Result<()> {
    let spec = scene_spec_from(args)?;
    let generated = generate_scene(&spec)?;
    SceneDir::write(&args.out, &spec, &generated)?;
    println!(
        "wrote {} gaussians, {} views of {}x{} to {}",
        generated.gt.len(),
        generated.cams.len(),
        spec.image_size[0],
        spec.image_size[1],
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = train_config_from(args)?;
    let dir = SceneDir::read(&args.scene).with_context(|| format!("loading scene {}", args.scene.display()))?;
    let init = init_training_scene(&dir.spec, &dir.doc.scene())?;
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| args.scene.join(format!("{}_seed{}", cfg.arm(), cfg.seed)));
    fs::create_dir_all(&out_dir)?;

    let outcome = train(&init, &dir.doc.cameras, &dir.targets, &cfg)?;
    let mut report = outcome.report;
    report.scene_hash = dir.hash();

    write_train_log(&report.records, BufWriter::new(fs::File::create(out_dir.join("train_log.csv"))?))?;
    write_eval_log(&report.eval_history, BufWriter::new(fs::File::create(out_dir.join("eval_log.csv"))?))?;
    write_json(&out_dir.join("report.json"), &report)?;
    write_json(&out_dir.join("checkpoint.json"), &outcome.checkpoint)?;
    for (m, img) in report.final_metrics.iter().zip(&outcome.eval_renders) {
        write_ppm(&out_dir.join(format!("eval_{}", target_file_name(m.view_id))), img)?;
    }
    let a = &report.aggregates;
    println!(
        "{}: psnr {:.3} dB, ssim {:.4}, backward ratio post {:.4}, t_post {:.2} s, gaussians {} -> {}, written to {}",
        report.arm,
        a.final_psnr,
        a.final_ssim,
        a.backward_ratio_post,
        a.t_post_s,
        init.len(),
        a.final_gaussian_count,
        out_dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: String,
    pub candidate: String,
    pub reference_arm: String,
    pub candidate_arm: String,
    #[serde(with = "ext_float")]
    pub delta_psnr: f64,
    pub delta_ssim: f64,
    pub delta_t_post_s: f64,
    pub delta_backward_count: i64,
    pub incomparable: bool,
    pub warnings: Vec<String>,
}

/// Candidate minus reference.
pub fn compare_reports(reference: &TrainReport, candidate: &TrainReport) -> Comparison {
    let (a, b) = (&reference.aggregates, &candidate.aggregates);
    let mut warnings = Vec::new();
    let incomparable = reference.scene_hash != candidate.scene_hash;
    if incomparable {
        warnings.push(format!(
            "scene hashes differ: {} vs {}",
            reference.scene_hash, candidate.scene_hash
        ));
    }
    if reference.config.seed != candidate.config.seed {
        warnings.push(format!(
            "seeds differ: {} vs {}",
            reference.config.seed, candidate.config.seed
        ));
    }
    let (ra, ca) = (&reference.config, &candidate.config);
    if (ra.total_iters, ra.densify_end) != (ca.total_iters, ca.densify_end) {
        warnings.push("iteration schedules differ".to_string());
    }
    // inf - inf is NaN; identical perfect reconstructions differ by zero.
    let delta_psnr = if a.final_psnr == b.final_psnr {
        0.0
    } else {
        b.final_psnr - a.final_psnr
    };
    Comparison {
        reference: String::new(),
        candidate: String::new(),
        reference_arm: reference.arm.clone(),
        candidate_arm: candidate.arm.clone(),
        delta_psnr,
        delta_ssim: b.final_ssim - a.final_ssim,
        delta_t_post_s: b.t_post_s - a.t_post_s,
        delta_backward_count: b.backward_executed_post as i64 - a.backward_executed_post as i64,
        incomparable,
        warnings,
    }
}

fn report_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("report.json")
    } else {
        p.to_path_buf()
    }
}

pub const PLOT_SCRIPT: &str = r#"#!/usr/bin/env python3
"""PSNR-vs-time and backward-ratio-vs-iteration curves for two runs."""
import csv
import json
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))
with open(os.path.join(HERE, "compare.json")) as f:
    CMP = json.load(f)


def rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def run_dir(report):
    return os.path.dirname(os.path.abspath(report))


fig, (ax_psnr, ax_ratio) = plt.subplots(1, 2, figsize=(11, 4))
for key in ("reference", "candidate"):
    d = run_dir(CMP[key])
    label = CMP[key + "_arm"]
    ev = rows(os.path.join(d, "eval_log.csv"))
    ax_psnr.plot([float(r["train_time_s"]) for r in ev], [float(r["psnr"]) for r in ev], marker="o", label=label)
    log = rows(os.path.join(d, "train_log.csv"))
    post = [r for r in log if r["phase"] != "densify"]
    done, xs, ys = 0, [], []
    for i, r in enumerate(post, 1):
        done += int(r["executed"])
        xs.append(int(r["t"]))
        ys.append(done / i)
    ax_ratio.plot(xs, ys, label=label)
ax_psnr.set_xlabel("training time [s]")
ax_psnr.set_ylabel("held-out PSNR [dB]")
ax_ratio.set_xlabel("iteration")
ax_ratio.set_ylabel("executed backward ratio (post-densification)")
for ax in (ax_psnr, ax_ratio):
    ax.grid(alpha=0.3)
    ax.legend()
fig.tight_layout()
out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(HERE, "compare.png")
fig.savefig(out, dpi=120)
print(out)
"#;

fn cmd_compare(args: &CompareArgs) -> anyhow::Result<()> {
    let (rp, cp) = (report_path(&args.reference), report_path(&args.candidate));
    let reference: TrainReport = read_json(&rp)?;
    let candidate: TrainReport = read_json(&cp)?;
    let mut cmp = compare_reports(&reference, &candidate);
    let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string();
    cmp.reference = abs(&rp);
    cmp.candidate = abs(&cp);
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("compare.json"), &cmp)?;
    fs::write(args.out.join("plot_compare.py"), PLOT_SCRIPT)?;
    for w in &cmp.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{} vs {}: dPSNR {:+.3} dB, dSSIM {:+.4}, dT_post {:+.2} s, dBackward {:+}{}",
        cmp.candidate_arm,
        cmp.reference_arm,
        cmp.delta_psnr,
        cmp.delta_ssim,
        cmp.delta_t_post_s,
        cmp.delta_backward_count,
        if cmp.incomparable { " (incomparable)" } else { "" }
    );
    Ok(())
}

fn thread_count(flag: Option<usize>) -> anyhow::Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => bail!("{THREADS_ENV}={v:?} is not a positive integer"),
        },
        Err(_) => Ok(None),
    }
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            bail!("--threads must be positive");
        }
        // A pool built earlier in the same process keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::GenScene(a) => cmd_gen_scene(a),
        Command::Train(a) => cmd_train(a),
        Command::Compare(a) => cmd_compare(a),
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
