//! Command-line front end: teacher pretraining, student fine-tuning,
//! grid sweeps, report emission, soft-label analytics, and checkpoint
//! inspection.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use quantkd::config::{load_config, resolve_dataset_root, RunConfig};
use quantkd::data::DataPair;
use quantkd::distill::{
    soft_label_stats, write_histogram_csv, write_summary_csv, Teacher, TeacherMode,
};
use quantkd::harness::report::report as emit_report;
use quantkd::harness::{
    cache_teacher_logits, ensure_hard_checkpoint, quantized_model, sweep, CellInfo,
    ResultsStore, RunRecord, RunStatus, StudentDistill, StudentRun, SweepOptions, TeacherSource,
};
use quantkd::harness::train_student_kd;
use quantkd::models::{describe_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta};

#[derive(Parser)]
#[command(
    name = "quantkd",
    version,
    about = "Train low-bit quantized classifiers with knowledge distillation"
)]
struct Cli {
    /// Root for dataset paths; falls back to QUANTKD_DATASET_ROOT.
    #[arg(long, global = true)]
    dataset_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hard-label full-precision training: teacher zoos and the pretrained
    /// students that fine-tuning starts from.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoints and the run store land here.
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated seeds overriding the config's list.
        #[arg(long)]
        seed_list: Option<String>,
        /// Comma-separated width factors; defaults to the config's width.
        #[arg(long)]
        width_list: Option<String>,
        #[arg(long)]
        force_rerun: bool,
    },
    /// Quantization-aware fine-tuning with distillation, per the config's
    /// [quantizer], [distill], [teacher], and [init] sections.
    TrainStudent {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed_list: Option<String>,
        #[arg(long)]
        force_rerun: bool,
    },
    /// Run the (lambda policy x tau x teacher width x seed) grid from the
    /// config's [sweep] section, resumably.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed_list: Option<String>,
        /// Parallel cells; 0 picks the machine's parallelism.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long)]
        force_rerun: bool,
        /// Stop after this many cells (resume with a later invocation).
        #[arg(long)]
        max_cells: Option<usize>,
    },
    /// Emit csv, svg, or markdown tables from a run store.
    Report {
        /// The sweep's --out-dir (store directory).
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Where artifacts go; defaults to <out-dir>/reports.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Export tempered soft-label statistics of a teacher over the train
    /// split: per-example histograms and a per-tau summary.
    AnalyzeSoftlabels {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config supplying the [dataset] section.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "1,2,5,10")]
        tau_list: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print a checkpoint's header, spec, and tensor directory.
    InspectCheckpoint { path: PathBuf },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let root = resolve_dataset_root(cli.dataset_root.as_deref());
    match cli.command {
        Command::TrainTeacher { config, out_dir, seed_list, width_list, force_rerun } => {
            let mut cfg = load_config(&config)?;
            apply_seed_list(&mut cfg, seed_list.as_deref())?;
            let widths = match width_list.as_deref() {
                Some(list) => parse_f64_list(list)?,
                None => vec![cfg.model.width_factor],
            };
            let data: Arc<DataPair<f32>> = Arc::new(cfg.dataset.load(&root)?);
            let mut store = ResultsStore::open(&out_dir)?;
            let seeds = cfg.seeds.clone();
            for &width in &widths {
                for &seed in &seeds {
                    let t0 = Instant::now();
                    let path = ensure_hard_checkpoint(
                        &cfg,
                        &data,
                        width,
                        seed,
                        &out_dir,
                        Some(&mut store),
                        force_rerun,
                    )?;
                    let ckpt = load_checkpoint(&path)?;
                    println!(
                        "width {width} seed {seed}: train {:.4} test {:.4} -> {} [{:.1}s]",
                        ckpt.meta.final_train_acc,
                        ckpt.meta.final_test_acc,
                        path.display(),
                        t0.elapsed().as_secs_f64()
                    );
                }
            }
        }
        Command::TrainStudent { config, out_dir, seed_list, force_rerun } => {
            let mut cfg = load_config(&config)?;
            apply_seed_list(&mut cfg, seed_list.as_deref())?;
            train_student_cmd(&cfg, &root, &out_dir, force_rerun)?;
        }
        Command::Sweep { config, out_dir, seed_list, workers, force_rerun, max_cells } => {
            let mut cfg = load_config(&config)?;
            apply_seed_list(&mut cfg, seed_list.as_deref())?;
            let data: Arc<DataPair<f32>> = Arc::new(cfg.dataset.load(&root)?);
            let mut store = ResultsStore::open(&out_dir)?;
            let opts = SweepOptions { workers, force: force_rerun, max_cells };
            let outcome = sweep(&cfg, &data, &mut store, &opts)?;
            println!(
                "sweep: {} planned, {} executed, {} skipped, {} failed",
                outcome.planned, outcome.executed, outcome.skipped, outcome.failed
            );
        }
        Command::Report { out_dir, format, dest } => {
            let store = ResultsStore::open(&out_dir)?;
            let fmt = format.parse()?;
            let dest = dest.unwrap_or_else(|| out_dir.join("reports"));
            for path in emit_report(&store, fmt, &dest)? {
                println!("wrote {}", path.display());
            }
        }
        Command::AnalyzeSoftlabels { checkpoint, config, tau_list, out_dir } => {
            let cfg = load_config(&config)?;
            let taus = parse_f64_list(&tau_list)?;
            if taus.is_empty() {
                bail!("tau list is empty");
            }
            let data: DataPair<f32> = cfg.dataset.load(&root)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let teacher: Teacher<f32> = Teacher::from_checkpoint(&ckpt, TeacherMode::Float)?;
            let logits = cache_teacher_logits(&teacher, &data.train)?;
            std::fs::create_dir_all(&out_dir)?;
            let mut summary = Vec::new();
            for &tau in &taus {
                let stats = soft_label_stats(&logits, tau)?;
                summary.push((tau, stats.mean_entropy, stats.mean_peak));
                let path = out_dir.join(format!("softlabels_tau{tau}.csv"));
                write_histogram_csv(&path, &logits, tau)?;
                println!(
                    "tau {tau}: mean entropy {:.4} nats, mean peak {:.4} -> {}",
                    stats.mean_entropy,
                    stats.mean_peak,
                    path.display()
                );
            }
            let spath = out_dir.join("softlabels_summary.csv");
            write_summary_csv(&spath, &summary)?;
            println!("wrote {}", spath.display());
        }
        Command::InspectCheckpoint { path } => {
            let ckpt = load_checkpoint(&path)?;
            print!("{}", describe_checkpoint(&ckpt));
        }
    }
    Ok(())
}

fn train_student_cmd(cfg: &RunConfig, root: &Path, out_dir: &Path, force: bool) -> Result<()> {
    let teacher_cfg = cfg.teacher.as_ref();
    let init_cfg = cfg
        .init
        .as_ref()
        .context("student training needs an [init] section with a pretrained checkpoint")?;
    if cfg.distill.is_some() && teacher_cfg.is_none() {
        bail!("[distill] is set but no [teacher] checkpoint is configured");
    }
    let data: Arc<DataPair<f32>> = Arc::new(cfg.dataset.load(root)?);
    let spec = cfg.model.to_spec(data.train.num_classes, data.train.input_shape())?;
    let mut store = ResultsStore::open(out_dir)?;
    let hash = cfg.fingerprint();
    store.record_config(CellInfo {
        hash: hash.clone(),
        kind: if cfg.distill.is_some() { "student" } else { "hd" }.to_string(),
        tau: cfg.distill.as_ref().map(|d| d.tau),
        width_factor: None,
        policy: cfg
            .distill
            .as_ref()
            .map(|d| quantkd::harness::policy_label(&d.lambda))
            .or_else(|| Some("hd".to_string())),
        bits: cfg.quantizer.as_ref().map(|q| q.bits),
        config: serde_json::to_value(cfg)?,
    })?;
    let init = load_checkpoint(&init_cfg.student_checkpoint)?;
    let teacher_logits = match (teacher_cfg, &cfg.distill) {
        (Some(t), Some(_)) => {
            let ckpt = load_checkpoint(&t.checkpoint)?;
            let teacher: Teacher<f32> = Teacher::from_checkpoint(&ckpt, t.eval)?;
            Some(Arc::new(cache_teacher_logits(&teacher, &data.train)?))
        }
        _ => None,
    };
    for &seed in &cfg.seeds {
        if store.contains(&hash, seed) && !force {
            println!("seed {seed}: already recorded ({hash}), skipping");
            continue;
        }
        let t0 = Instant::now();
        let distill = match (&cfg.distill, &teacher_logits) {
            (Some(d), Some(logits)) => Some(StudentDistill {
                config: d.clone(),
                teacher: TeacherSource::Cached(Arc::clone(logits)),
            }),
            _ => None,
        };
        let (model, out) = train_student_kd(StudentRun {
            spec: &spec,
            data: &data,
            optim: &cfg.optim,
            seed,
            quantizer: cfg.quantizer.as_ref(),
            distill,
            init: &init,
            augment: cfg.dataset.augment(),
        })?;
        let soft_labels = match (&cfg.distill, &teacher_logits) {
            (Some(d), Some(logits)) => {
                let stats = soft_label_stats(logits.as_ref(), d.tau)?;
                Some(quantkd::harness::SoftLabelSnapshot {
                    tau: d.tau,
                    mean_entropy: stats.mean_entropy,
                    mean_peak: stats.mean_peak,
                })
            }
            _ => None,
        };
        let completed = matches!(out.status, RunStatus::Completed);
        store.append(RunRecord {
            config_hash: hash.clone(),
            seed,
            status: out.status,
            epochs: out.epochs,
            final_train_acc: out.final_train_acc,
            final_test_acc: out.final_test_acc,
            wall_time_s: t0.elapsed().as_secs_f64(),
            soft_labels,
        })?;
        if completed {
            // Persist the quantized student (or the fine-tuned weights when
            // running full precision).
            let final_model = match cfg.quantizer.as_ref() {
                Some(q) => quantized_model(&model, q)?,
                None => model,
            };
            let meta = CheckpointMeta {
                spec: spec.clone(),
                seed,
                epochs: cfg.optim.epochs,
                final_train_acc: out.final_train_acc,
                final_test_acc: out.final_test_acc,
            };
            let path = out_dir.join(format!("student_{hash}_s{seed}.ckpt"));
            save_checkpoint(&final_model, &meta, &path)?;
            println!(
                "seed {seed}: test {:.4} -> {} [{:.1}s]",
                out.final_test_acc,
                path.display(),
                t0.elapsed().as_secs_f64()
            );
        } else {
            println!("seed {seed}: FAILED (recorded)");
        }
    }
    Ok(())
}

fn apply_seed_list(cfg: &mut RunConfig, list: Option<&str>) -> Result<()> {
    if let Some(list) = list {
        let seeds: Vec<u64> = list
            .split(',')
            .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed {s:?}")))
            .collect::<Result<_>>()?;
        if seeds.is_empty() {
            bail!("--seed-list is empty");
        }
        cfg.seeds = seeds;
    }
    Ok(())
}

fn parse_f64_list(list: &str) -> Result<Vec<f64>> {
    list.split(',')
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad number {s:?}")))
        .collect()
}
