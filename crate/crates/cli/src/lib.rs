//! Command-line driver: dataset generation, training, evaluation, rendered
//! predictions and the ablation grid.

pub mod config;
pub mod render;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use thiserror::Error;
use tsvit::checkpoint::load_model;
use tsvit::data::{
    generate_synthetic_dataset, make_classification_sample, SitsRecord, Split, SynthConfig,
};
use tsvit::embedding::{DayIndex, PatchSize};
use tsvit::model::{
    ClsInteractions, ClsMode, Factorization, InputNorm, PeMode, Task, TsvitConfig, TsvitModel,
};
use tsvit::training::{evaluate, train_loop, EvalReport, Example, Trainer};

pub use config::{Dataset, RunConfig};
pub use render::{render_class_map, write_class_map, PALETTE};

/// Environment variable read for the log filter, e.g. `TSVIT_LOG=debug`.
pub const LOG_ENV: &str = "TSVIT_LOG";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while running; exit code 1.
    #[error(transparent)]
    Run(#[from] tsvit::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tsvit",
    version,
    about = "Temporo-spatial vision transformer for satellite image time series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phenology dataset.
    Generate(GenerateArgs),
    /// Train a model from a run configuration.
    Train(RunArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Render per-pixel predictions as PPM images.
    Predict(PredictArgs),
    /// Train every ablation variant on one dataset and tabulate mIoU.
    Ablate(RunArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Fewest acquisitions per sample.
    #[arg(long)]
    pub t_min: Option<usize>,
    /// Most acquisitions per sample.
    #[arg(long)]
    pub t_max: Option<usize>,
    /// Days between candidate acquisitions.
    #[arg(long)]
    pub revisit: Option<u16>,
    #[arg(long)]
    pub margin: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub cloud_prob: Option<f64>,
    /// Add a per-class season-long level to the last channel.
    #[arg(long)]
    pub level_cue: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` settings applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Also write the confusion matrix here.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Directory for the rendered maps.
    #[arg(long)]
    pub out: PathBuf,
    /// Render at most this many samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn generate(a: GenerateArgs) -> Result<(), CliError> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        num_classes: a.classes.unwrap_or(d.num_classes),
        channels: a.channels.unwrap_or(d.channels),
        height: a.height.unwrap_or(d.height),
        width: a.width.unwrap_or(d.width),
        t_min: a.t_min.unwrap_or(d.t_min),
        t_max: a.t_max.unwrap_or(d.t_max),
        revisit: a.revisit.unwrap_or(d.revisit),
        margin: a.margin.unwrap_or(d.margin),
        noise_std: a.noise_std.unwrap_or(d.noise_std),
        cloud_prob: a.cloud_prob.unwrap_or(d.cloud_prob),
        level_cue: a.level_cue,
        seed: a.seed,
        ..d
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let m = generate_synthetic_dataset(&a.out, &cfg, a.samples, a.val_fraction, a.test_fraction)?;
    for s in Split::ALL {
        info!("{s}: {} samples", m.split(s).count());
    }
    println!("wrote {} samples to {}", m.entries.len(), a.out.display());
    Ok(())
}

fn load_run_config(a: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    for pair in &a.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = a.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &a.out {
        cfg.set("out_dir", &out.display().to_string())?;
    }
    Ok(cfg)
}

/// Training-ready examples for `task`. Classification keeps the samples
/// that reduce to a single object class.
pub fn to_examples(
    records: &[SitsRecord],
    task: Task,
    background: usize,
) -> Result<Vec<Example>, CliError> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        match task {
            Task::Segmentation => out.push(r.to_example()),
            Task::Classification => {
                let bg = u16::try_from(background)
                    .map_err(|_| CliError::Usage("too many classes".into()))?;
                if let Some(c) = make_classification_sample(r, bg)? {
                    out.push(c.to_example());
                }
            }
        }
    }
    Ok(out)
}

fn observed_days(examples: &[Example]) -> Vec<DayIndex> {
    let mut days: Vec<DayIndex> = examples
        .iter()
        .flat_map(|e| e.sits.dates().iter().copied())
        .collect();
    days.sort_unstable();
    days.dedup();
    days
}

/// Fresh model whose date table covers the training acquisitions and whose
/// input statistics come from the training series.
fn fresh_model(cfg: TsvitConfig, train: &[Example], seed: u64) -> Result<TsvitModel, CliError> {
    let mut model = TsvitModel::new(cfg, &observed_days(train), seed)?;
    model.set_input_norm(Some(InputNorm::fit(train.iter().map(|e| &e.sits))?))?;
    Ok(model)
}

fn train(a: RunArgs) -> Result<(), CliError> {
    let mut cfg = load_run_config(&a)?;
    let data = cfg.resolve_dataset()?;
    let out = cfg.require_out_dir()?;
    fs::create_dir_all(&out).map_err(tsvit::Error::from)?;
    let resolved = cfg.to_text();
    fs::write(run_config_path(&out), &resolved).map_err(tsvit::Error::from)?;
    info!("resolved configuration:\n{resolved}");

    let bg = data.manifest.ignore_label();
    let task = cfg.model.task;
    let train = to_examples(&data.train, task, bg)?;
    let val = to_examples(&data.val, task, bg)?;
    if train.is_empty() {
        return Err(CliError::Usage(
            "dataset: no usable training samples".into(),
        ));
    }
    let model = fresh_model(cfg.model.clone(), &train, cfg.seed())?;
    info!(
        "{} parameters, {} training and {} validation samples",
        model.count_parameters(),
        train.len(),
        val.len()
    );
    let (_, log) = train_loop(model, &train, &val, &cfg.train, &out)?;
    if let Some(last) = log.last() {
        println!(
            "epoch {}: loss {:.4} OA {:.4} mIoU {:.4}",
            last.epoch, last.loss, last.overall_accuracy, last.mean_iou
        );
    }
    println!("run directory: {}", out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let model = load_model(&a.checkpoint)?;
    let data = Dataset::load(&a.dataset)?;
    let examples = to_examples(
        data.split(a.split),
        model.config().task,
        data.manifest.ignore_label(),
    )?;
    let report = evaluate(&model, &examples, a.batch_size)?;
    print!("{}", format_report(&report, &data.manifest.class_names));
    if let Some(path) = &a.confusion {
        fs::write(path, report.confusion.to_text()).map_err(tsvit::Error::from)?;
    }
    Ok(())
}

fn format_report(r: &EvalReport, names: &[String]) -> String {
    let m = &r.metrics;
    let mut s = format!(
        "OA {:.4}\nmIoU {:.4}\nmAcc {:.4}\n",
        m.overall_accuracy, m.mean_iou, m.mean_accuracy
    );
    for (k, iou) in m.iou.iter().enumerate() {
        let name = names.get(k).map(String::as_str).unwrap_or("?");
        match iou {
            Some(v) => writeln!(s, "  {name}: IoU {v:.4}").unwrap(),
            None => writeln!(s, "  {name}: IoU undefined").unwrap(),
        }
    }
    s
}

fn predict(a: PredictArgs) -> Result<(), CliError> {
    let model = load_model(&a.checkpoint)?;
    let cfg = model.config();
    if cfg.task != Task::Segmentation {
        return Err(CliError::Usage(
            "predict renders segmentation checkpoints only".into(),
        ));
    }
    let k = cfg.num_classes;
    let data = Dataset::load(&a.dataset)?;
    fs::create_dir_all(&a.out).map_err(tsvit::Error::from)?;
    let entries: Vec<_> = data.manifest.split(a.split).collect();
    let limit = a.limit.unwrap_or(usize::MAX);
    let mut written = 0;
    for (entry, record) in entries.iter().zip(data.split(a.split)).take(limit) {
        let (_, h, w, _) = record.sits.dims();
        let logits = model.predict(&[&record.sits])?;
        let mut pred = logits.argmax_last();
        let stem = entry
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("sample_{written}"));
        if let tsvit::data::Labels::Pixels(truth) = &record.labels {
            // paint reference background black, as in the ground truth
            for (p, &t) in pred.iter_mut().zip(truth) {
                if t as usize >= k {
                    *p = k;
                }
            }
            let truth: Vec<usize> = truth.iter().map(|&t| t as usize).collect();
            write_class_map(
                &a.out.join(format!("{stem}_truth.ppm")),
                &truth,
                h,
                w,
                &PALETTE,
                k,
            )?;
        }
        write_class_map(
            &a.out.join(format!("{stem}_pred.ppm")),
            &pred,
            h,
            w,
            &PALETTE,
            k,
        )?;
        written += 1;
    }
    println!("rendered {written} samples to {}", a.out.display());
    Ok(())
}

/// One row of the ablation table.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub axis: &'static str,
    pub setting: String,
    pub config: TsvitConfig,
}

/// Variants of `base` that change one design axis at a time: factorization
/// order, class-token count, position encodings, class-token interactions
/// and each of `patch_sizes` (square).
pub fn ablation_grid(base: &TsvitConfig, patch_sizes: &[usize]) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    let mut push = |axis, setting: &str, config| {
        rows.push(AblationRow {
            axis,
            setting: setting.to_string(),
            config,
        })
    };
    for &f in Factorization::ALL {
        push(
            "factorization order",
            f.as_str(),
            TsvitConfig {
                factorization: f,
                ..base.clone()
            },
        );
    }
    for &c in ClsMode::ALL {
        push(
            "cls tokens",
            c.as_str(),
            TsvitConfig {
                cls_mode: c,
                ..base.clone()
            },
        );
    }
    for &p in PeMode::ALL {
        push(
            "position encodings",
            p.as_str(),
            TsvitConfig {
                pe_mode: p,
                ..base.clone()
            },
        );
    }
    for &i in ClsInteractions::ALL {
        push(
            "cls interactions",
            i.as_str(),
            TsvitConfig {
                cls_interactions: i,
                ..base.clone()
            },
        );
    }
    for &s in patch_sizes {
        let patch = PatchSize {
            t: base.patch.t,
            h: s,
            w: s,
        };
        push(
            "patch size",
            &format!("{s}x{s}"),
            TsvitConfig {
                patch,
                ..base.clone()
            },
        );
    }
    rows
}

/// Mean test mIoU and OA of `config` over `seeds` trainings.
fn score_variant(
    config: &TsvitConfig,
    run: &RunConfig,
    train: &[Example],
    test: &[Example],
) -> Result<(f64, f64, usize), CliError> {
    let (mut miou, mut oa, mut params) = (0.0, 0.0, 0);
    for s in 0..run.ablate_seeds as u64 {
        let seed = run.seed() + s;
        let model = fresh_model(config.clone(), train, seed)?;
        params = model.count_parameters();
        let tc = tsvit::training::TrainConfig {
            seed,
            ..run.train.clone()
        };
        let mut t = Trainer::new(model, tc, train.len())?;
        while !t.is_finished() {
            t.run_epoch(train, &[])?;
        }
        let m = evaluate(t.model(), test, run.train.batch_size)?.metrics;
        miou += m.mean_iou;
        oa += m.overall_accuracy;
    }
    let n = run.ablate_seeds.max(1) as f64;
    Ok((miou / n, oa / n, params))
}

fn ablate(a: RunArgs) -> Result<(), CliError> {
    let mut cfg = load_run_config(&a)?;
    let data = cfg.resolve_dataset()?;
    let out = cfg.require_out_dir()?;
    if cfg.ablate_seeds == 0 {
        return Err(CliError::Usage("ablate_seeds must be at least 1".into()));
    }
    let grid = ablation_grid(&cfg.model, &cfg.ablate_patch_sizes);
    for row in &grid {
        row.config
            .validate()
            .map_err(|e| CliError::Usage(format!("{} {}: {e}", row.axis, row.setting)))?;
    }
    fs::create_dir_all(&out).map_err(tsvit::Error::from)?;
    let resolved = cfg.to_text();
    fs::write(run_config_path(&out), &resolved).map_err(tsvit::Error::from)?;
    info!("resolved configuration:\n{resolved}");

    let bg = data.manifest.ignore_label();
    let task = cfg.model.task;
    let train = to_examples(&data.train, task, bg)?;
    let held_out = [&data.test, &data.val, &data.train]
        .into_iter()
        .find(|s| !s.is_empty())
        .unwrap();
    let test = to_examples(held_out, task, bg)?;

    let table = ablation_table(&grid, &cfg, &train, &test)?;
    fs::write(out.join("ablation.md"), &table).map_err(tsvit::Error::from)?;
    print!("{table}");
    Ok(())
}

fn ablation_table(
    grid: &[AblationRow],
    cfg: &RunConfig,
    train: &[Example],
    test: &[Example],
) -> Result<String, CliError> {
    // the baseline recurs on every axis; train each distinct variant once
    let mut done: HashMap<String, (f64, f64, usize)> = HashMap::new();
    let mut table =
        String::from("| axis | setting | params | OA | mIoU |\n|---|---|---|---|---|\n");
    for row in grid {
        let key: String = row
            .config
            .to_kv()
            .iter()
            .map(|(k, v)| format!("{k}={v};"))
            .collect();
        let (miou, oa, params) = match done.get(&key) {
            Some(&r) => r,
            None => {
                info!("training {} = {}", row.axis, row.setting);
                let r = score_variant(&row.config, cfg, train, test)?;
                done.insert(key, r);
                r
            }
        };
        writeln!(
            table,
            "| {} | {} | {params} | {oa:.4} | {miou:.4} |",
            row.axis, row.setting
        )
        .unwrap();
    }
    Ok(table)
}

/// Output directory convention shared by commands that write a run.
pub fn run_config_path(out: &Path) -> PathBuf {
    out.join("run.cfg")
}
