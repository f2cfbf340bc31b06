use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use bflab::checkpoint;
use bflab::config::LabConfig;
use bflab::data::{generate_dataset, LongTailDataset};
use bflab::gradsuite::{run_suite, SuiteOptions};
use bflab::loss::Loss;
use bflab::metrics::Metrics;
use bflab::probe::{
    frequency_ranks, per_class_gradient_report, ProbeBranch, ProbeOptions, ProbeSite,
};
use bflab::rng::{substream, Stream};
use bflab::train::{evaluate, train as run_training, TrainError};

use crate::manifest::RunManifest;
use crate::{CliError, ConfigArgs};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).map_err(|e| CliError::Failure(e.to_string()))?;
    std::fs::write(path, json + "\n")
        .map_err(|e| CliError::Failure(format!("writing {}: {e}", path.display())))
}

pub fn resolve_config(args: &ConfigArgs) -> Result<LabConfig, CliError> {
    let mut c = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            LabConfig::parse(&text)?
        }
        None => LabConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        c.apply(k.trim(), v)?;
    }
    if let Some(s) = args.seed {
        c.set_seed(s);
    }
    if let Some(b) = args.batchformer {
        c.train.batchformer = b.on();
    }
    if let Some(e) = args.epochs {
        c.train.epochs = e;
    }
    c.validate()?;
    Ok(c)
}

/// Trains into `out` and returns the final metrics.
fn train_into(
    config: &LabConfig,
    ds: &LongTailDataset,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<Metrics, CliError> {
    std::fs::write(out.join("config.cfg"), config.to_kv_string())
        .map_err(|e| CliError::Failure(e.to_string()))?;
    manifest.output("config.cfg");
    match run_training(config, ds) {
        Ok(outcome) => {
            let mut record = outcome.record;
            checkpoint::save(&outcome.model, Some(config), &out.join("checkpoint.json"))?;
            record.checkpoint = Some("checkpoint.json".into());
            let metrics = record.final_metrics().clone();
            write_json(&out.join("metrics.json"), &metrics)?;
            write_json(&out.join("run_record.json"), &record)?;
            for f in ["checkpoint.json", "metrics.json", "run_record.json"] {
                manifest.output(f);
            }
            Ok(metrics)
        }
        Err(TrainError::Diverged(d)) => {
            write_json(&out.join("divergence.json"), &d)?;
            manifest.output("divergence.json");
            Err(CliError::Failure(format!(
                "training diverged at epoch {} step {} (lr {}): {}",
                d.epoch, d.step, d.lr, d.message
            )))
        }
        Err(TrainError::Lab(e)) => Err(e.into()),
    }
}

pub fn train(args: &ConfigArgs, out: &Path) -> Result<(), CliError> {
    let config = resolve_config(args)?;
    let mut manifest =
        RunManifest::begin(out, Some(config.to_kv_string()), vec![config.train.seed])?;
    let result = generate_dataset(&config.data)
        .map_err(CliError::from)
        .and_then(|ds| train_into(&config, &ds, out, &mut manifest));
    if let Ok(m) = &result {
        println!(
            "all={:.4} many={:.4} medium={:.4} few={:.4} n_eval={}",
            m.all, m.many, m.medium, m.few, m.n_eval
        );
    }
    manifest.finish(result.map(|_| ()))
}

fn load_checkpoint(path: &Path) -> Result<(bflab::BatchFormerModel, LabConfig), CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint {} not found",
            path.display()
        )));
    }
    let (model, config) =
        checkpoint::load(path).map_err(|e| CliError::Usage(format!("bad checkpoint: {e}")))?;
    let config =
        config.ok_or_else(|| CliError::Usage("checkpoint carries no run config".into()))?;
    Ok((model, config))
}

pub fn eval(ckpt: &Path, out: &Path) -> Result<(), CliError> {
    let (model, config) = load_checkpoint(ckpt)?;
    let mut manifest =
        RunManifest::begin(out, Some(config.to_kv_string()), vec![config.train.seed])?;
    let result = (|| {
        let ds = generate_dataset(&config.data)?;
        let m = evaluate(&model, &ds, config.group_rule, config.train.eval_batch_size)?;
        write_json(&out.join("metrics.json"), &m)?;
        manifest.output("metrics.json");
        println!(
            "all={:.4} many={:.4} medium={:.4} few={:.4}",
            m.all, m.many, m.medium, m.few
        );
        Ok(())
    })();
    manifest.finish(result)
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Branch {
    Pre,
    Post,
    Sum,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Site {
    Features,
    Inputs,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset CSV; regenerated from the checkpoint's config when absent
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub batches: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Probe sampling seed; defaults to the run seed
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Branch::Post)]
    pub branch: Branch,
    #[arg(long, value_enum, default_value_t = Site::Features)]
    pub site: Site,
    /// Score each sample on `classifier(X)` only, without the encoder
    #[arg(long)]
    pub no_batchformer_loss: bool,
    /// Also write (class_rank, grad_norm) pairs
    #[arg(long)]
    pub emit_plot_data: bool,
}

#[derive(Serialize)]
struct ProbeSummary {
    spearman: Option<f64>,
    classes_reported: usize,
    missing_classes: Vec<usize>,
    mean_cross_grad_norm: f64,
    n_batches: usize,
    batch_size: usize,
    seed: u64,
    options: ProbeOptions,
}

pub fn probe(a: &ProbeArgs) -> Result<(), CliError> {
    let (model, config) = load_checkpoint(&a.checkpoint)?;
    let seed = a.seed.unwrap_or(config.train.seed);
    let mut manifest = RunManifest::begin(&a.out, Some(config.to_kv_string()), vec![seed])?;
    let result = (|| {
        let ds = match &a.data {
            Some(p) => LongTailDataset::load_csv(p)
                .map_err(|e| CliError::Usage(format!("bad dataset: {e}")))?,
            None => generate_dataset(&config.data)?,
        };
        let opts = ProbeOptions {
            branch: match a.branch {
                Branch::Pre => ProbeBranch::Pre,
                Branch::Post => ProbeBranch::Post,
                Branch::Sum => ProbeBranch::Sum,
            },
            site: match a.site {
                Site::Features => ProbeSite::Features,
                Site::Inputs => ProbeSite::Inputs,
            },
            batchformer_loss: !a.no_batchformer_loss,
        };
        let loss = Loss::new(config.train.loss, &ds.counts);
        let mut rng = substream(seed, Stream::Probe);
        let report =
            per_class_gradient_report(&model, &ds, a.batches, a.batch_size, &mut rng, &loss, &opts)
                .map_err(|e| match e {
                    bflab::LabError::Contract(m) => CliError::Usage(m),
                    e => e.into(),
                })?;
        report.write_csv(&a.out.join("grad_report.csv"))?;
        manifest.output("grad_report.csv");
        let obs: usize = report.rows.iter().map(|r| r.n_observations).sum();
        let summary = ProbeSummary {
            spearman: report.spearman,
            classes_reported: report.rows.len(),
            missing_classes: report.missing_classes.clone(),
            mean_cross_grad_norm: if obs == 0 {
                0.0
            } else {
                report
                    .rows
                    .iter()
                    .map(|r| r.mean_cross_grad_norm * r.n_observations as f64)
                    .sum::<f64>()
                    / obs as f64
            },
            n_batches: a.batches,
            batch_size: a.batch_size,
            seed,
            options: opts,
        };
        write_json(&a.out.join("probe_summary.json"), &summary)?;
        manifest.output("probe_summary.json");
        if a.emit_plot_data {
            let mut text = String::from("class_rank,grad_norm\n");
            for (r, g) in report.plot_points(&frequency_ranks(&ds)) {
                text.push_str(&format!("{r},{g:?}\n"));
            }
            std::fs::write(a.out.join("plot_data.csv"), text)
                .map_err(|e| CliError::Failure(e.to_string()))?;
            manifest.output("plot_data.csv");
        }
        match summary.spearman {
            Some(s) => println!("spearman={s:.4} classes={}", summary.classes_reported),
            None => println!("spearman=undefined classes={}", summary.classes_reported),
        }
        Ok(())
    })();
    manifest.finish(result)
}

pub const SWEEP_AXES: &[&str] = &["batch_size", "encoder_layers", "bf_lr_mult"];

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// One of batch_size, encoder_layers, bf_lr_mult
    #[arg(long)]
    pub axis: String,
    /// Comma-separated axis values
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub values: Vec<String>,
    /// Comma-separated seeds
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct SweepRow {
    axis: String,
    value: String,
    seed: u64,
    batchformer: bool,
    status: String,
    all: f64,
    many: f64,
    medium: f64,
    few: f64,
}

fn env_threads() -> Result<Option<usize>, CliError> {
    match std::env::var("BF_LAB_THREADS") {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!(
                "BF_LAB_THREADS must be a positive integer, got {s:?}"
            ))),
        },
    }
}

pub fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    if !SWEEP_AXES.contains(&a.axis.as_str()) {
        return Err(CliError::Usage(format!(
            "unknown axis {:?}; expected one of {}",
            a.axis,
            SWEEP_AXES.join(", ")
        )));
    }
    let values: Vec<String> = a
        .values
        .iter()
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(CliError::Usage("--values is empty".into()));
    }
    if a.seeds.is_empty() {
        return Err(CliError::Usage("--seeds is empty".into()));
    }
    let base = resolve_config(&a.config)?;
    let mut cells = Vec::new();
    for v in &values {
        for &s in &a.seeds {
            let mut c = base.clone();
            c.apply(&a.axis, v)?;
            c.set_seed(s);
            c.validate()?;
            cells.push((v.clone(), s, c));
        }
    }
    let threads = env_threads()?;
    let mut manifest = RunManifest::begin(&a.out, Some(base.to_kv_string()), a.seeds.clone())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Failure(e.to_string()))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|(value, seed, config)| {
                let dir = a
                    .out
                    .join(format!("{}={value}", a.axis))
                    .join(format!("seed{seed}"));
                let outcome = (|| {
                    let mut cell_manifest =
                        RunManifest::begin(&dir, Some(config.to_kv_string()), vec![*seed])?;
                    let r = generate_dataset(&config.data)
                        .map_err(CliError::from)
                        .and_then(|ds| train_into(config, &ds, &dir, &mut cell_manifest));
                    cell_manifest.finish(r)
                })();
                let (status, m) = match outcome {
                    Ok(m) => ("ok".to_string(), Some(m)),
                    Err(e) => (format!("failed: {e}"), None),
                };
                let get = |f: fn(&Metrics) -> f64| m.as_ref().map_or(f64::NAN, f);
                SweepRow {
                    axis: a.axis.clone(),
                    value: value.clone(),
                    seed: *seed,
                    batchformer: config.train.batchformer,
                    status,
                    all: get(|m| m.all),
                    many: get(|m| m.many),
                    medium: get(|m| m.medium),
                    few: get(|m| m.few),
                }
            })
            .collect()
    });
    let result = (|| {
        let path = a.out.join("sweep.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Failure(e.to_string()))?;
        for r in &rows {
            w.serialize(r)
                .map_err(|e| CliError::Failure(e.to_string()))?;
        }
        w.flush().map_err(|e| CliError::Failure(e.to_string()))?;
        manifest.output("sweep.csv");
        for r in &rows {
            println!(
                "{}={} seed={} {} all={:.4} few={:.4}",
                r.axis, r.value, r.seed, r.status, r.all, r.few
            );
        }
        let failed = rows.iter().filter(|r| r.status != "ok").count();
        if failed > 0 {
            return Err(CliError::Failure(format!(
                "{failed} of {} cells failed",
                rows.len()
            )));
        }
        Ok(())
    })();
    manifest.finish(result)
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run only this op's checks
    #[arg(long)]
    pub op: Option<String>,
    /// Random instances per op
    #[arg(long, default_value_t = 10)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs/gradcheck")]
    pub out: PathBuf,
    /// Negate analytic gradients, to confirm the checker notices
    #[arg(long, hide = true)]
    pub inject_wrong_sign: bool,
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    if let Some(op) = &a.op {
        if !bflab::gradsuite::OPS.contains(&op.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown op {op:?}; known: {}",
                bflab::gradsuite::OPS.join(", ")
            )));
        }
    }
    let mut manifest = RunManifest::begin(&a.out, None, vec![a.seed])?;
    let result = (|| {
        let opts = SuiteOptions {
            instances: a.instances,
            seed: a.seed,
            filter: a.op.clone(),
            inject_wrong_sign: a.inject_wrong_sign,
            ..SuiteOptions::default()
        };
        let started = std::time::Instant::now();
        let report = run_suite(&opts)?;
        for o in &report.ops {
            println!(
                "{:<18} {} instances={:<3} checked={:<6} max_rel_error={:.3e}",
                o.op,
                if o.passed() { "ok  " } else { "FAIL" },
                o.instances,
                o.checked,
                o.max_rel_error
            );
        }
        println!(
            "{} instances, max_rel_error={:.3e}, {:.1}s",
            report.instances(),
            report.max_rel_error(),
            started.elapsed().as_secs_f64()
        );
        write_json(&a.out.join("gradcheck.json"), &report)?;
        manifest.output("gradcheck.json");
        if report.passed() {
            Ok(())
        } else {
            let bad: Vec<&str> = report
                .ops
                .iter()
                .filter(|o| !o.passed())
                .map(|o| o.op)
                .collect();
            Err(CliError::Failure(format!(
                "gradient check failed for {}",
                bad.join(", ")
            )))
        }
    })();
    manifest.finish(result)
}

pub fn dataset(args: &ConfigArgs, out: &Path) -> Result<(), CliError> {
    let config = resolve_config(args)?;
    let ds = generate_dataset(&config.data)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    ds.save_csv(out)?;
    println!(
        "train={} test={} counts={:?}",
        ds.train_len(),
        ds.test_len(),
        ds.counts.as_slice()
    );
    Ok(())
}
