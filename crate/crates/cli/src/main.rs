mod manifest;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use segt::checkpoint::Checkpoint;
use segt::config::TrainConfig;
use segt::data::{self, LoadOptions, MaskPolicy};
use segt::metrics::evaluate;
use segt::train::{predict, write_prediction, StepRecord, Trainer};

use manifest::RunManifest;

/// Exit code for usage and input errors.
const EXIT_INPUT: u8 = 2;
/// Exit code for numerical failures such as a non-finite loss.
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "segt", version = manifest::VERSION, about = "Edge-guided polyp segmentation: train, evaluate, predict")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its checkpoint and per-step loss log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset (`images/` and `masks/` under the root).
    Eval(EvalArgs),
    /// Write probability map, binary mask and boundary overlay for one image.
    Predict(PredictArgs),
    /// Write the edge ground truth of every mask to `<root>/edges/`.
    PrepareEdges(PrepareEdgesArgs),
    /// Generate a synthetic dataset of blob lesions.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct Overrides {
    /// Override one config key, e.g. `--set train.seed=3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut TrainConfig) -> anyhow::Result<()> {
        for item in &self.set {
            let (key, value) =
                item.split_once('=').ok_or_else(|| anyhow!("override `{item}` is not of the form KEY=VALUE"))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run configuration; `data.root` is resolved against its directory.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root holding `images/` and `masks/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct PrepareEdgesArgs {
    /// Dataset root; edges and the run manifest are written inside it.
    #[arg(long)]
    data: PathBuf,
    /// Threshold masks at 128 instead of rejecting non-binary values.
    #[arg(long)]
    lenient_masks: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Predict(_) => "predict",
            Command::PrepareEdges(_) => "prepare-edges",
            Command::Synth(_) => "synth",
        }
    }

    fn out_dir(&self) -> &Path {
        match self {
            Command::Train(a) => &a.out_dir,
            Command::Eval(a) => &a.out_dir,
            Command::Predict(a) => &a.out_dir,
            Command::PrepareEdges(a) => &a.data,
            Command::Synth(a) => &a.out_dir,
        }
    }
}

/// What a command resolved its configuration to, for the manifest.
#[derive(Default)]
struct Resolved {
    config_path: Option<PathBuf>,
    toml: String,
}

impl Resolved {
    fn config(&mut self, path: Option<&Path>, cfg: &TrainConfig) {
        self.config_path = path.map(Path::to_path_buf);
        self.toml = cfg.to_toml_string();
    }
}

fn config_help() -> String {
    let mut text = String::from("Config keys (default):\n");
    for (key, default) in TrainConfig::documented_keys() {
        text.push_str(&format!("  {key:<26} {default}\n"));
    }
    text
}

fn mask_policy(cfg: &TrainConfig) -> MaskPolicy {
    if cfg.data.strict_masks {
        MaskPolicy::Strict
    } else {
        MaskPolicy::Threshold
    }
}

fn load_split(cfg: &TrainConfig, root: &Path) -> anyhow::Result<data::DatasetSplit> {
    let side = cfg.train.base_size;
    let opts = LoadOptions { resize_to: (side, side), mask_policy: mask_policy(cfg), seen: true };
    let split = data::load_dataset_with(root, &opts).with_context(|| format!("loading dataset {}", root.display()))?;
    Ok(split)
}

fn cmd_train(a: &TrainArgs, resolved: &mut Resolved) -> anyhow::Result<()> {
    resolved.config_path = Some(a.config.clone());
    let mut cfg = TrainConfig::from_file(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    if cfg.data.root.is_relative() {
        let base = a.config.parent().unwrap_or(Path::new("."));
        cfg.data.root = base.join(&cfg.data.root);
    }
    if let Some(m) = cfg.data.manifest.as_mut().filter(|m| m.is_relative()) {
        *m = a.config.parent().unwrap_or(Path::new(".")).join(&*m);
    }
    a.overrides.apply(&mut cfg)?;
    resolved.config(Some(&a.config), &cfg);

    let mut split = load_split(&cfg, &cfg.data.root)?;
    if let Some(path) = &cfg.data.manifest {
        let ids = data::read_manifest(path)?;
        split = split.subset(split.name.clone(), &ids)?;
    }
    log::info!("training on {} images from {}", split.len(), cfg.data.root.display());

    let log_path = a.out_dir.join("loss_log.csv");
    let mut log_file = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log_file, "{}", StepRecord::CSV_HEADER)?;
    let mut write_error = None;
    let mut trainer = Trainer::new(cfg)?;
    let outcome = trainer.run(&split, &mut |r| {
        if r.step % 10 == 1 {
            log::info!("step {} epoch {} side {} loss {:.5}", r.step, r.epoch, r.side, r.loss.total);
        }
        if let Err(e) = writeln!(log_file, "{}", r.csv_row()) {
            write_error.get_or_insert(e);
        }
    });
    log_file.flush()?;
    if let Some(e) = write_error {
        return Err(e).context("writing the loss log");
    }
    outcome?;
    let ck_path = a.out_dir.join("checkpoint.segt");
    trainer.checkpoint().save(&ck_path)?;
    log::info!("wrote {} after {} steps", ck_path.display(), trainer.step);
    Ok(())
}

fn load_checkpoint(path: &Path, overrides: &Overrides) -> anyhow::Result<(Checkpoint, TrainConfig)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mut cfg = ck.config.clone();
    overrides.apply(&mut cfg)?;
    Ok((ck, cfg))
}

fn cmd_eval(a: &EvalArgs, resolved: &mut Resolved) -> anyhow::Result<()> {
    let (ck, cfg) = load_checkpoint(&a.checkpoint, &a.overrides)?;
    resolved.config(None, &cfg);
    let model = ck.restore_model()?;
    let split = load_split(&cfg, &a.data)?;
    if split.is_empty() {
        bail!("dataset {} has no images", a.data.display());
    }
    let report = evaluate(&model, &split, cfg.eval.threshold)?;
    report.write_csv(&a.out_dir.join("metrics.csv"))?;
    let summary = report.summary();
    std::fs::write(a.out_dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_predict(a: &PredictArgs, resolved: &mut Resolved) -> anyhow::Result<()> {
    let (ck, cfg) = load_checkpoint(&a.checkpoint, &a.overrides)?;
    resolved.config(None, &cfg);
    let model = ck.restore_model()?;
    let image = data::read_rgb(&a.image)?;
    let pred = predict(&model, &image, cfg.eval.threshold)?;
    let stem = a.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    for path in write_prediction(&pred, &a.out_dir, stem)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_prepare_edges(a: &PrepareEdgesArgs, resolved: &mut Resolved) -> anyhow::Result<()> {
    let mut params = toml::Table::new();
    params.insert("data".into(), a.data.display().to_string().into());
    params.insert("lenient_masks".into(), a.lenient_masks.into());
    resolved.toml = toml::to_string(&params)?;
    let policy = if a.lenient_masks { MaskPolicy::Threshold } else { MaskPolicy::Strict };
    let n = data::prepare_edges(&a.data, policy)?;
    println!("wrote {n} edge maps to {}", a.data.join("edges").display());
    Ok(())
}

fn cmd_synth(a: &SynthArgs, resolved: &mut Resolved) -> anyhow::Result<()> {
    let mut params = toml::Table::new();
    params.insert("count".into(), (a.count as i64).into());
    params.insert("size".into(), (a.size as i64).into());
    params.insert("seed".into(), (a.seed as i64).into());
    resolved.toml = toml::to_string(&params)?;
    let split = segt::synthetic::write_dataset(&a.out_dir, a.count, a.size, a.seed)?;
    println!("wrote {} image/mask pairs to {}", split.len(), a.out_dir.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<segt::Error>()) {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

fn execute(command: &Command) -> u8 {
    let started = manifest::now();
    let out_dir = command.out_dir();
    if let Err(e) = std::fs::create_dir_all(out_dir) {
        eprintln!("error: cannot create {}: {e}", out_dir.display());
        return EXIT_INPUT;
    }
    let mut resolved = Resolved::default();
    let result = match command {
        Command::Train(a) => cmd_train(a, &mut resolved),
        Command::Eval(a) => cmd_eval(a, &mut resolved),
        Command::Predict(a) => cmd_predict(a, &mut resolved),
        Command::PrepareEdges(a) => cmd_prepare_edges(a, &mut resolved),
        Command::Synth(a) => cmd_synth(a, &mut resolved),
    };
    let (code, message) = match &result {
        Ok(()) => (0, None),
        Err(e) => {
            eprintln!("error: {e:#}");
            (exit_code(e), Some(format!("{e:#}")))
        }
    };
    let manifest =
        RunManifest::new(command.name(), resolved.config_path.as_deref(), &resolved.toml, out_dir, started);
    if let Err(e) = manifest.write(code.into(), message) {
        eprintln!("error: cannot write run manifest: {e}");
        return if code == 0 { EXIT_INPUT } else { code };
    }
    code
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let help = config_help();
    let mut command = Cli::command().after_help(help.clone());
    for name in ["train", "eval", "predict"] {
        command = command.mut_subcommand(name, |c| c.after_help(help.clone()));
    }
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    ExitCode::from(execute(&cli.command))
}
