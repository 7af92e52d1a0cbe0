//! `unidense`: data generation, training, inference, evaluation, self-checks
//! and width sweeps.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use unidense::autograd::Fault;
use unidense::evalkit::{self, format_table, write_jsonl, write_report, PredLine};
use unidense::model::{load_checkpoint, resize_for_model, DecodeMode, DecodeOptions, Decoder, Model, ResizeMode, Temperatures};
use unidense::selfcheck;
use unidense::synthdata::{self, emit_dataset, load_examples, SceneSpec};
use unidense::training::{self, mup_lr_transfer, resume_or_new, RunOptions, TrainConfig, Trainer};

use config::{apply_overrides, CliError};

/// Environment variable naming the default run directory.
const OUT_ENV: &str = "UNIDENSE_OUT";

#[derive(Parser, Debug)]
#[command(name = "unidense", version, about = "Unified dense-transformer perception toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run directory; defaults to $UNIDENSE_OUT, then `runs/default`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// TOML or JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted `key=value` override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker cap. The library runs single-threaded, so values above 1 have
    /// no effect.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic dataset.
    GenData(GenDataArgs),
    /// Run the staged training recipe.
    Train(TrainArgs),
    /// Decode prompts and write prediction JSONL.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Gradient, partition, packing and matcher checks.
    Selfcheck(SelfcheckArgs),
    /// Width sweep with transferred learning rates.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Also emit crowded scenes.
    #[arg(long)]
    dense: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset root written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated stage numbers to run.
    #[arg(long, value_delimiter = ',')]
    stages: Vec<u8>,
    /// Validate the configuration and exit.
    #[arg(long)]
    dry_run: bool,
    /// Continue from `<out>/checkpoint.ckpt` when present.
    #[arg(long)]
    resume: bool,
    /// Use the desk-scale recipe as the base config.
    #[arg(long)]
    toy: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Greedy,
    Sample,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ResizeArg {
    Fixed,
    Adaptive,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split directory containing `gt.jsonl` and `images/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "greedy")]
    mode: ModeArg,
    /// Candidate sets per record.
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 0.7)]
    temp_lang: f64,
    #[arg(long, default_value_t = 0.7)]
    temp_coord: f64,
    #[arg(long, default_value_t = 0.7)]
    temp_size: f64,
    /// Skip the upsampler and emit boxes only.
    #[arg(long)]
    boxes_only: bool,
    #[arg(long)]
    upsample_factor: Option<usize>,
    #[arg(long, value_enum, default_value = "fixed")]
    resize: ResizeArg,
    #[arg(long, default_value_t = 100)]
    max_instances: usize,
    /// Write mask-overlay PNGs for candidate 0.
    #[arg(long)]
    overlays: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 1)]
    pass_at_k: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    DiceGradSign,
    FocalGradSign,
    GramGradSign,
    CrossEntropyGradSign,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    /// Corrupt one analytic gradient to demonstrate detection.
    #[arg(long, value_enum)]
    inject: Option<FaultArg>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated model widths.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    widths: Vec<usize>,
    /// Width at which the base learning rates were tuned.
    #[arg(long, default_value_t = 64)]
    width_ref: usize,
    /// Training steps per width.
    #[arg(long, default_value_t = 50)]
    steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    seed: u64,
    scenes: usize,
    dense_scenes: usize,
    val_percent: u64,
    max_per_level: usize,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self { seed: 0, scenes: 2000, dense_scenes: 200, val_percent: 10, max_per_level: 2 }
    }
}

fn out_dir(c: &Common) -> PathBuf {
    c.out.clone().or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("runs/default"))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))? + "\n")?;
    Ok(())
}

/// Reads an optional config file into JSON, applies overrides, and
/// deserializes with unknown keys rejected.
fn effective<T: Serialize + for<'de> Deserialize<'de>>(base: T, c: &Common) -> Result<T, CliError> {
    let mut v = serde_json::to_value(&base).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(p) = &c.config {
        let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        let file: serde_json::Value = if p.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        } else {
            let t: toml::Value = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            serde_json::to_value(t).map_err(|e| CliError::Usage(e.to_string()))?
        };
        config::merge(&mut v, file, "")?;
    }
    apply_overrides(&mut v, &c.overrides)?;
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("config: {e}")))
}

/// Records the command and produced files under the run directory.
fn write_manifest(out: &Path, command: &str, seed: Option<u64>, files: &[&str]) -> Result<(), CliError> {
    write_json(&out.join("run_manifest.json"), &json!({ "command": command, "seed": seed, "files": files, "version": env!("CARGO_PKG_VERSION") }))
}

fn cmd_gen_data(c: &Common, a: &GenDataArgs) -> Result<(), CliError> {
    let mut cfg = effective(GenDataConfig::default(), c)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if !a.dense {
        cfg.dense_scenes = 0;
    }
    let out = out_dir(c);
    fs::create_dir_all(&out)?;
    let mut specs: Vec<SceneSpec> = (0..cfg.scenes as u64).map(|i| SceneSpec::regular(cfg.seed.wrapping_mul(1_000_003).wrapping_add(i))).collect();
    specs.extend((0..cfg.dense_scenes as u64).map(|i| SceneSpec::dense(cfg.seed.wrapping_mul(1_000_003).wrapping_add(1 << 40).wrapping_add(i))));
    let m = emit_dataset(&specs, &out, cfg.val_percent, cfg.max_per_level).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_json(&out.join("gen_config.json"), &cfg)?;
    write_manifest(&out, "gen-data", Some(cfg.seed), &["manifest.json", "gen_config.json", "train/gt.jsonl", "val/gt.jsonl"])?;
    for (s, sm) in &m.splits {
        println!("{s}: {} images, {} queries ({} positive), {} instances", sm.images, sm.queries, sm.positives, sm.instances);
    }
    Ok(())
}

fn split_examples(data: &Path, split: synthdata::Split) -> Result<(Vec<synthdata::Example>, Vec<synthdata::Example>), CliError> {
    let dir = synthdata::split_dir(data, split);
    let all = load_examples(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    Ok(all.into_iter().partition(|e| !e.queries.iter().any(|q| q.split == "dense")))
}

fn cmd_train(c: &Common, a: &TrainArgs) -> Result<(), CliError> {
    let base = if a.toy { TrainConfig::toy() } else { TrainConfig::default() };
    let mut cfg = effective(base, c)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if !a.stages.is_empty() {
        if let Some(bad) = a.stages.iter().find(|s| !cfg.stages.iter().any(|st| st.stage == **s)) {
            return Err(CliError::Usage(format!("--stages: stage {bad} is not configured")));
        }
        cfg.stages.retain(|s| a.stages.contains(&s.stage));
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let out = out_dir(c);
    fs::create_dir_all(&out)?;
    write_json(&out.join("config.json"), &cfg)?;
    println!("{}", serde_json::to_string_pretty(&cfg).unwrap_or_default());
    if a.dry_run {
        println!("dry run: config valid, {} stages, {} steps", cfg.stages.len(), cfg.stages.iter().map(|s| s.steps).sum::<usize>());
        return Ok(());
    }
    let data = a.data.as_ref().ok_or_else(|| CliError::Usage("--data is required unless --dry-run".into()))?;
    let (regular, dense) = split_examples(data, synthdata::Split::Train)?;
    let mut trainer = if a.resume { resume_or_new(cfg.clone(), &out).map_err(|e| CliError::Runtime(e.to_string()))? } else { Trainer::new(cfg.clone()).map_err(|e| CliError::Usage(e.to_string()))? };
    if trainer.step > 0 {
        log::info!("resuming at step {}", trainer.step);
    }
    training::run(&mut trainer, &regular, &dense, &RunOptions { out_dir: Some(out.clone()), ..Default::default() }).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_manifest(&out, "train", Some(cfg.seed), &["config.json", "checkpoint.ckpt", "train_log.csv"])?;
    if let Some(last) = trainer.log.last() {
        println!("finished at step {} (stage {}), total loss {:.4}", trainer.step, last.stage, last.total);
    }
    Ok(())
}

fn cmd_infer(c: &Common, a: &InferArgs) -> Result<(), CliError> {
    if a.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let ck = load_checkpoint(&a.checkpoint).map_err(|e| CliError::Runtime(e.to_string()))?;
    let model = Model::<f32>::from_checkpoint(&ck).map_err(|e| CliError::Runtime(e.to_string()))?;
    let examples = load_examples(&a.data).map_err(|e| CliError::Runtime(format!("{}: {e}", a.data.display())))?;
    let out = out_dir(c);
    fs::create_dir_all(&out)?;
    let opts = DecodeOptions {
        mode: match a.mode {
            ModeArg::Greedy => DecodeMode::Greedy,
            ModeArg::Sample => DecodeMode::Sample,
        },
        temps: Temperatures { lang: a.temp_lang, coord: a.temp_coord, size: a.temp_size },
        max_instances: a.max_instances,
        boxes_only: a.boxes_only,
        upsample_factor: a.upsample_factor.unwrap_or(model.cfg.upsample_factor),
        seed: c.seed.unwrap_or(0),
    };
    let resize = match a.resize {
        ResizeArg::Fixed => ResizeMode::Fixed,
        ResizeArg::Adaptive => ResizeMode::Adaptive,
    };
    write_json(&out.join("infer_config.json"), &json!({ "checkpoint": a.checkpoint, "data": a.data, "k": a.k, "options": &opts, "resize": format!("{:?}", a.resize) }))?;
    let mut dec = Decoder::new(&model);
    let mut lines: Vec<PredLine> = Vec::new();
    if a.overlays {
        fs::create_dir_all(out.join("overlays"))?;
    }
    for (i, ex) in examples.iter().enumerate() {
        let img = resize_for_model(&ex.image, resize, model.cfg.image_size, model.cfg.patch);
        let prompts: Vec<&str> = ex.queries.iter().map(|q| q.prompt.as_str()).collect();
        let o = DecodeOptions { seed: opts.seed.wrapping_add(1_000_003 * i as u64), ..opts.clone() };
        let mut got = dec.predict_lines(&ex.id, &img, &prompts, &o, a.k - 1).map_err(|e| CliError::Runtime(e.to_string()))?;
        rescale_masks(&mut got, ex.image.height, ex.image.width)?;
        if a.overlays {
            overlay(&out.join("overlays").join(format!("{}.png", ex.id)), &ex.image, &got)?;
        }
        lines.extend(got);
    }
    write_jsonl(&out.join("pred.jsonl"), &lines).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_manifest(&out, "infer", c.seed, &["infer_config.json", "pred.jsonl"])?;
    println!("wrote {} prediction lines to {}", lines.len(), out.join("pred.jsonl").display());
    Ok(())
}

/// Maps decoded masks back to the source resolution.
fn rescale_masks(lines: &mut [PredLine], h: usize, w: usize) -> Result<(), CliError> {
    for l in lines {
        for inst in &mut l.instances {
            if let Some(rle) = &inst.mask {
                if rle.size != [h, w] {
                    let m = unidense::geometry::rle_decode(rle).map_err(|e| CliError::Runtime(e.to_string()))?;
                    inst.mask = Some(unidense::geometry::rle_encode(&unidense::model::resize_mask(&m, h, w)));
                }
            }
        }
    }
    Ok(())
}

fn overlay(path: &Path, image: &unidense::geometry::RgbImage, lines: &[PredLine]) -> Result<(), CliError> {
    let mut img = image.clone();
    for (k, inst) in lines.iter().filter(|l| l.candidate == 0).flat_map(|l| &l.instances).enumerate() {
        let Some(rle) = &inst.mask else { continue };
        let m = unidense::geometry::rle_decode(rle).map_err(|e| CliError::Runtime(e.to_string()))?;
        let tint = [[255u8, 64, 64], [64, 255, 64], [64, 64, 255], [255, 255, 64]][k % 4];
        for r in 0..m.height().min(img.height) {
            for col in 0..m.width().min(img.width) {
                if m.get(r, col) {
                    let p = img.pixel(r, col);
                    img.put(r, col, std::array::from_fn(|ch| ((p[ch] as u16 + tint[ch] as u16) / 2) as u8));
                }
            }
        }
    }
    synthdata::write_png(path, &img).map_err(|e| CliError::Runtime(e.to_string()))
}

fn cmd_eval(c: &Common, a: &EvalArgs) -> Result<(), CliError> {
    if a.pass_at_k == 0 {
        return Err(CliError::Usage("--pass-at-k must be at least 1".into()));
    }
    let records = evalkit::load_records(&a.pred, &a.gt).map_err(|e| match e {
        evalkit::EvalError::Io(_) => CliError::Runtime(e.to_string()),
        _ => CliError::Usage(e.to_string()),
    })?;
    let reports = evalkit::evaluate_splits(&records, a.pass_at_k).map_err(|e| CliError::Runtime(e.to_string()))?;
    let out = out_dir(c);
    fs::create_dir_all(&out)?;
    write_report(&reports, &out.join("report.json")).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_manifest(&out, "eval", c.seed, &["report.json"])?;
    print!("{}", format_table(&reports));
    Ok(())
}

fn cmd_selfcheck(a: &SelfcheckArgs) -> Result<(), CliError> {
    let fault = a.inject.map(|f| match f {
        FaultArg::DiceGradSign => Fault::DiceGradSign,
        FaultArg::FocalGradSign => Fault::FocalGradSign,
        FaultArg::GramGradSign => Fault::GramGradSign,
        FaultArg::CrossEntropyGradSign => Fault::CrossEntropyGradSign,
    });
    let results = selfcheck::run_all(fault);
    let mut failed = Vec::new();
    for r in &results {
        println!("[{}] {:<16} {:.3e} (tol {:.0e})", if r.passed { "ok" } else { "FAIL" }, r.name, r.value, r.tolerance);
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        println!("selfcheck passed");
        Ok(())
    } else {
        Err(CliError::Runtime(format!("selfcheck failed: {}", failed.join(", "))))
    }
}

#[derive(Debug, Serialize)]
struct SweepRow {
    width: usize,
    heads: usize,
    lr_stage1: f64,
    final_loss: f64,
    params: usize,
}

fn cmd_sweep(c: &Common, a: &SweepArgs) -> Result<(), CliError> {
    if a.widths.is_empty() || a.widths.contains(&0) {
        return Err(CliError::Usage("--widths needs at least one positive width".into()));
    }
    let mut base = effective(TrainConfig::toy(), c)?;
    if let Some(s) = c.seed {
        base.seed = s;
    }
    let examples: Vec<synthdata::Example> = match &a.data {
        Some(d) => split_examples(d, synthdata::Split::Train)?.0,
        None => (0..64).map(|s| synthdata::make_example(&SceneSpec::regular(base.seed.wrapping_add(s)), &synthdata::TRAIN_LEVELS, 2).map_err(|e| CliError::Runtime(e.to_string()))).collect::<Result<_, _>>()?,
    };
    let mut rows = Vec::new();
    for &w in &a.widths {
        let mut cfg = base.clone();
        let head_dim = (base.model.width / base.model.heads).max(4);
        cfg.model.width = w;
        cfg.model.heads = (w / head_dim).max(1);
        cfg.stages.truncate(1);
        cfg.stages[0].steps = a.steps;
        cfg.stages[0].lr_start = mup_lr_transfer(base.stages[0].lr_start, a.width_ref, w);
        cfg.stages[0].lr_end = mup_lr_transfer(base.stages[0].lr_end, a.width_ref, w);
        cfg.validate().map_err(|e| CliError::Usage(format!("width {w}: {e}")))?;
        let mut t = Trainer::new(cfg.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
        training::run(&mut t, &examples, &[], &RunOptions::default()).map_err(|e| CliError::Runtime(e.to_string()))?;
        let tail = &t.log[t.log.len().saturating_sub(10)..];
        let final_loss = tail.iter().map(|r| r.total).sum::<f64>() / tail.len().max(1) as f64;
        rows.push(SweepRow { width: w, heads: cfg.model.heads, lr_stage1: cfg.stages[0].lr_start, final_loss, params: t.model.num_params() });
    }
    rows.sort_by(|x, y| x.final_loss.total_cmp(&y.final_loss));
    let out = out_dir(c);
    fs::create_dir_all(&out)?;
    write_json(&out.join("sweep.json"), &rows)?;
    write_manifest(&out, "sweep", Some(base.seed), &["sweep.json"])?;
    println!("{:>6} {:>6} {:>12} {:>10} {:>10}", "width", "heads", "lr", "loss", "params");
    for r in &rows {
        println!("{:>6} {:>6} {:>12.4e} {:>10.4} {:>10}", r.width, r.heads, r.lr_stage1, r.final_loss, r.params);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if cli.common.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    let r = match &cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(&cli.common, a),
        Cmd::Train(a) => cmd_train(&cli.common, a),
        Cmd::Infer(a) => cmd_infer(&cli.common, a),
        Cmd::Eval(a) => cmd_eval(&cli.common, a),
        Cmd::Selfcheck(a) => cmd_selfcheck(a),
        Cmd::Sweep(a) => cmd_sweep(&cli.common, a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
