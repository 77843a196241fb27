//! `vgpeft`: synthetic data, PEFT training, evaluation, placement sweeps and
//! LoRA merging.
//!
//! Exit codes: 0 on success, 1 when training diverges, 2 on configuration,
//! input or state errors.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vgpeft::checkpoint::{apply_delta, load_checkpoint, params_checksum, save_checkpoint, save_delta};
use vgpeft::data::{
    generate_synthetic, load_annotations, write_annotations, write_predictions, PredictionRecord, SyntheticSpec,
};
use vgpeft::metrics::report;
use vgpeft::model::GroundingModel;
use vgpeft::peft::{
    ablation_placements, inject, merge_lora, param_report, parse_placement, placement_sweep, render_sweep,
    PeftMethod,
};
use vgpeft::train::{evaluate, predict_all, train_with_eval};
use vgpeft::{Error, Result};

use config::{load_synth_spec, Method, RunConfig};

#[derive(Parser)]
#[command(name = "vgpeft", version, about = "Parameter-efficient fine-tuning for visual grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic referring-expression annotation file.
    Synth(SynthArgs),
    /// Fine-tune a model and write a run directory.
    Train(TrainArgs),
    /// Predict boxes for an annotation file and write metric reports.
    Eval(EvalArgs),
    /// Print parameter efficiency for each placement.
    Sweep(SweepArgs),
    /// Fold a LoRA delta into its base checkpoint.
    Merge(MergeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with synthetic-spec fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    min_distractors: Option<usize>,
    #[arg(long)]
    max_distractors: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Comma-separated modules: text, image, decoder.
    #[arg(long)]
    place: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    bottleneck: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    base_checkpoint: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Full checkpoint, or the base when `--delta` is given.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    delta: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    pred_out: PathBuf,
    /// Report path prefix; `.json` and `.txt` are appended.
    #[arg(long)]
    report_out: PathBuf,
    /// Use the ground-truth boxes as predictions.
    #[arg(long, conflicts_with_all = ["checkpoint", "delta"])]
    oracle: bool,
    /// Row label in the printed table.
    #[arg(long, default_value = "model")]
    label: String,
}

#[derive(Args)]
struct SweepArgs {
    /// Semicolon-separated placements, e.g. `image;decoder;image,decoder`.
    /// Defaults to the four ablation placements.
    #[arg(long)]
    placements: Option<String>,
    #[arg(long, value_enum, default_value_t = Method::Lora)]
    method: Method,
    #[arg(long, default_value_t = vgpeft::peft::DEFAULT_LORA_RANK)]
    rank: usize,
    #[arg(long, default_value_t = 8)]
    bottleneck: usize,
    /// Model section taken from this run config.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    /// Base checkpoint the delta was trained from.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    delta: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Merge(a) => merge(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Diverged { .. } => 1,
                _ => 2,
            })
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => load_synth_spec(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(n) = a.n {
        spec.n_samples = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(g) = a.grid {
        spec.grid = g;
    }
    if let Some(k) = a.min_distractors {
        spec.min_distractors = k;
    }
    if let Some(k) = a.max_distractors {
        spec.max_distractors = k;
    }
    let records = generate_synthetic(&spec)?;
    write_annotations(&a.out, &records)?;
    println!("wrote {} samples (seed {}) to {}", records.len(), spec.seed, a.out.display());
    Ok(())
}

fn effective_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($flag:expr => $field:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(a.method => cfg.peft.method);
    set!(a.place => cfg.peft.placement);
    set!(a.rank => cfg.peft.rank);
    set!(a.alpha => cfg.peft.alpha);
    set!(a.bottleneck => cfg.peft.bottleneck);
    set!(a.steps => cfg.train.steps);
    set!(a.batch_size => cfg.train.batch_size);
    set!(a.lr => cfg.train.lr);
    set!(a.seed => cfg.train.seed);
    set!(a.eval_every => cfg.train.eval_every);
    if a.train_data.is_some() {
        cfg.data.train = a.train_data.clone();
    }
    if a.eval_data.is_some() {
        cfg.data.eval = a.eval_data.clone();
    }
    if a.base_checkpoint.is_some() {
        cfg.data.base_checkpoint = a.base_checkpoint.clone();
    }
    cfg.train.full_finetune = cfg.peft.method == Method::Fft;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = effective_config(&a)?;
    let spec = cfg.peft.spec()?;
    cfg.train.validate()?;
    let train_path = cfg
        .data
        .train
        .clone()
        .ok_or_else(|| Error::Config { field: "data.train", reason: "no training data given".into() })?;
    let train_data = load_annotations(&train_path)?;
    let eval_data = cfg.data.eval.as_ref().map(load_annotations).transpose()?;

    let base = match &cfg.data.base_checkpoint {
        Some(p) => {
            let m = load_checkpoint(p)?;
            if m.peft_spec().is_some() {
                return Err(Error::State("base checkpoint already carries PEFT structure".into()));
            }
            m
        }
        None => GroundingModel::build(&cfg.model)?,
    };
    let mut model = base.clone();
    if let Some(spec) = &spec {
        inject(&mut model, spec)?;
    }

    let out = &a.out_dir;
    fs::create_dir_all(out)?;
    let mut echoed = cfg.clone();
    echoed.model = base.config().clone();
    fs::write(out.join("config.toml"), echoed.to_toml()?)?;
    save_checkpoint(out.join("base.ckpt"), &base)?;

    let log = train_with_eval(&mut model, &train_data, eval_data.as_deref(), &cfg.train)?;
    write_json(&out.join("train_log.json"), &log)?;
    let mut summary = log.summary();
    if let Some(eval) = &eval_data {
        let rep = evaluate(&model, eval)?;
        write_json(&out.join("eval_report.json"), &rep)?;
        summary.push('\n');
        summary.push_str(&rep.render_table(&cfg.peft.method.to_string()));
    }
    fs::write(out.join("summary.txt"), &summary)?;
    let params = param_report(&model);
    fs::write(out.join("param_report.txt"), params.to_string())?;
    write_json(&out.join("param_report.json"), &params)?;
    save_checkpoint(out.join("final.ckpt"), &model)?;
    if spec.is_some() {
        save_delta(out.join("delta.ckpt"), &model, &params_checksum(base.params()))?;
    }
    print!("{summary}");
    println!("efficiency: {}", params.efficiency_str());
    println!("run directory: {}", out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let data = load_annotations(&a.data)?;
    let preds: Vec<PredictionRecord> = if a.oracle {
        data.iter().map(|r| PredictionRecord { pair_id: r.pair_id.clone(), bbox: r.bbox }).collect()
    } else {
        let ckpt = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config { field: "checkpoint", reason: "pass --checkpoint or --oracle".into() })?;
        let model = match &a.delta {
            Some(d) => apply_delta(&load_checkpoint(ckpt)?, d)?,
            None => load_checkpoint(ckpt)?,
        };
        predict_all(&model, &data)?
    };
    write_predictions(&a.pred_out, &preds)?;
    let loaded = vgpeft::data::load_predictions(&a.pred_out)?;
    let rep = report(&vgpeft::data::join(&data, &loaded)?)?;
    let table = rep.render_table(&a.label);
    write_json(&with_suffix(&a.report_out, "json"), &rep)?;
    fs::write(with_suffix(&a.report_out, "txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn sweep(a: SweepArgs) -> Result<()> {
    let model_cfg = match &a.config {
        Some(p) => RunConfig::load(p)?.model,
        None => Default::default(),
    };
    let placements = match &a.placements {
        Some(s) => s.split(';').filter(|p| !p.trim().is_empty()).map(parse_placement).collect::<Result<Vec<_>>>()?,
        None => ablation_placements(),
    };
    let method = match a.method {
        Method::Lora => PeftMethod::Lora { rank: a.rank, alpha: 1.0 },
        Method::Adapter => PeftMethod::Adapter { bottleneck: a.bottleneck },
        Method::Bitfit => PeftMethod::BitFit,
        Method::Fft => {
            return Err(Error::Config { field: "method", reason: "sweep needs a PEFT method".into() })
        }
    };
    let model = GroundingModel::build(&model_cfg)?;
    let reports = placement_sweep(&model, &method, &placements)?;
    print!("{}", render_sweep(&placements, &reports));
    Ok(())
}

fn merge(a: MergeArgs) -> Result<()> {
    let base = load_checkpoint(&a.checkpoint)?;
    let mut model = apply_delta(&base, &a.delta)?;
    merge_lora(&mut model)?;
    save_checkpoint(&a.out, &model)?;
    println!("merged {} into {}", a.delta.display(), a.out.display());
    Ok(())
}
