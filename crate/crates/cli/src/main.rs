use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kanoclip::client::{DescriptionClient, FixtureClient, ImageRef};
use kanoclip::config::RunConfig;
use kanoclip::data::{load_dataset, make_synthetic_dataset, Layout, Sample, SynthConfig};
use kanoclip::image_io::save_map_png;
use kanoclip::kb::{build_kb, load_kb, save_kb, VqaSource};
use kanoclip::model::Model;
use kanoclip::pipeline::{check_overlap, emit_report, evaluate, infer_samples, sha256_hex, ImageAucMode, PixelAucMode};
use kanoclip::trainer::{train, write_log, Checkpoint, DatasetRef};
use kanoclip::{Error, Result};

#[derive(Parser)]
#[command(name = "kanoclip", version, about = "Zero-shot anomaly detection")]
struct Cli {
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Allows evaluating on the auxiliary training dataset.
    #[arg(long, global = true)]
    allow_overlap: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Builds the knowledge base for the auxiliary classes.
    BuildKb(BuildKbArgs),
    /// Trains the prompts, fusion head and adapter.
    Train(TrainArgs),
    /// Scores individual images.
    Infer(InferArgs),
    /// Evaluates a checkpoint on target datasets.
    Eval(EvalArgs),
    /// Writes a synthetic texture dataset.
    MakeSynth(SynthArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct BuildKbArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Fixture file; overrides the config.
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// Output file; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Auxiliary dataset root; overrides the config.
    #[arg(long)]
    auxiliary: Option<PathBuf>,
    #[arg(long, default_value = "mvtec")]
    layout: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value = "checkpoint.kck")]
    out: PathBuf,
    #[arg(long, default_value = "train_log.csv")]
    log: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    class: String,
    /// Directory for heatmaps.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target dataset root; overrides the config targets.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long, default_value = "mvtec")]
    layout: String,
    #[arg(long, default_value = "eval_out")]
    out: PathBuf,
    /// One image AUC over all classes instead of the per-class mean.
    #[arg(long)]
    pooled_image_auc: bool,
    /// Mean of per-image pixel AUCs instead of pooling pixels.
    #[arg(long)]
    per_image_pixel_auc: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of test images.
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value = "synthetic")]
    class: String,
    /// Number of normal training images (default: count/4, at least 4).
    #[arg(long)]
    train_count: Option<usize>,
}

fn load_config(arg: &ConfigArg, cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &arg.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

fn auxiliary(cfg: &RunConfig) -> Result<&DatasetRef> {
    cfg.train.auxiliary.as_ref().ok_or_else(|| {
        Error::InvalidConfig("no auxiliary dataset configured ([train.auxiliary] or --auxiliary)".into())
    })
}

fn make_client(cfg: &RunConfig, fixture: Option<&Path>) -> Result<Box<dyn DescriptionClient>> {
    if let Some(path) = fixture.or(cfg.kb.fixture.as_deref()) {
        return Ok(Box::new(FixtureClient::from_file(path)?));
    }
    live_client(cfg)
}

#[cfg(feature = "live")]
fn live_client(cfg: &RunConfig) -> Result<Box<dyn DescriptionClient>> {
    let live =
        cfg.kb.live.as_ref().ok_or_else(|| Error::InvalidConfig("no fixture or live client configured".into()))?;
    let key = live.api_key_env.as_ref().and_then(|v| std::env::var(v).ok());
    Ok(Box::new(kanoclip::client::LiveClient::new(&live.endpoint, &live.model, key)))
}

#[cfg(not(feature = "live"))]
fn live_client(cfg: &RunConfig) -> Result<Box<dyn DescriptionClient>> {
    if cfg.kb.live.is_some() {
        return Err(Error::InvalidConfig("live client requested but built without the `live` feature".into()));
    }
    Err(Error::InvalidConfig("no knowledge fixture configured (kb.fixture or --fixture)".into()))
}

fn build_kb_cmd(cli: &Cli, args: &BuildKbArgs) -> Result<()> {
    let cfg = load_config(&args.config, cli)?;
    let aux = auxiliary(&cfg)?;
    let samples = load_dataset(&aux.root, aux.layout)?;
    let mut requests: BTreeMap<String, Vec<ImageRef>> = BTreeMap::new();
    for s in &samples {
        let images = requests.entry(s.class.clone()).or_default();
        if s.label || cfg.kb.templates.vqa_source == VqaSource::All {
            images.push(ImageRef::new(s.id.clone(), s.image.clone()));
        }
    }
    let client = make_client(&cfg, args.fixture.as_deref())?;
    let kb = build_kb(client.as_ref(), &cfg.kb.templates, &requests)?;
    let out = args.out.clone().or(cfg.kb.path.clone()).unwrap_or_else(|| PathBuf::from("kb.json"));
    save_kb(&kb, &out)?;
    println!("wrote {} ({} classes)", out.display(), kb.classes.len());
    Ok(())
}

fn train_cmd(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config, cli)?;
    if let Some(root) = &args.auxiliary {
        cfg.train.auxiliary = Some(DatasetRef { root: root.clone(), layout: args.layout.parse()? });
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let aux = auxiliary(&cfg)?.clone();
    let samples = load_dataset(&aux.root, aux.layout)?;
    let kb_path = args.kb.clone().or(cfg.kb.path.clone()).unwrap_or_else(|| PathBuf::from("kb.json"));
    let kb = if cfg.train.loss_weights.alpha > 0.0 { load_kb(&kb_path)? } else { Default::default() };
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let outcome = train(&mut model, &kb, &samples, &cfg.train)?;
    outcome.checkpoint.save(&args.out)?;
    write_log(&outcome.log, &args.log)?;
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!("steps {}: l_total {:.4} -> {:.4}", outcome.log.len(), first.l_total, last.l_total);
    }
    println!("checkpoint {} sha256 {}", args.out.display(), outcome.checkpoint.hash);
    Ok(())
}

fn infer_cmd(args: &InferArgs) -> Result<()> {
    let model = Checkpoint::load(&args.checkpoint)?.into_model()?;
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    for image in &args.images {
        let (map, score) = model.infer(image, &args.class)?;
        if let Some(out) = &args.out {
            let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            save_map_png(&map, &out.join(format!("{stem}.png")))?;
        }
        let line = serde_json::json!({"image": image, "score": score});
        println!("{line}");
    }
    Ok(())
}

fn eval_cmd(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let cfg = load_config(&args.config, cli)?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let targets = match &args.target {
        Some(root) => vec![DatasetRef { root: root.clone(), layout: args.layout.parse::<Layout>()? }],
        None => cfg.eval.targets.clone(),
    };
    if targets.is_empty() {
        return Err(Error::InvalidConfig("no target dataset (--target or [[eval.targets]])".into()));
    }
    let aux = checkpoint.train.as_ref().and_then(|t| t.auxiliary.clone()).or(cfg.train.auxiliary.clone());
    for t in &targets {
        if let Some(a) = &aux {
            check_overlap(&a.root, &t.root, cli.allow_overlap)?;
        }
    }
    let mut options = cfg.eval.options;
    if args.pooled_image_auc {
        options.image_auc = ImageAucMode::Pooled;
    }
    if args.per_image_pixel_auc {
        options.pixel_auc = PixelAucMode::PerImage;
    }
    let hash = checkpoint.hash.clone();
    let model = checkpoint.into_model()?;
    let config_json = serde_json::to_value(&cfg).expect("config serializes");
    let config_hash = sha256_hex(cfg.to_toml_string().as_bytes());
    for (i, t) in targets.iter().enumerate() {
        let samples: Vec<Sample> = load_dataset(&t.root, t.layout)?;
        let scored = infer_samples(&model, &samples)?;
        let mut report = evaluate(&scored, options, &t.root.display().to_string(), config_json.clone())?;
        report.provenance.insert("checkpoint_sha256".into(), hash.clone());
        report.provenance.insert("config_sha256".into(), config_hash.clone());
        let out = if targets.len() == 1 { args.out.clone() } else { args.out.join(format!("target_{i}")) };
        let path = emit_report(&report, &scored, model.config.sigma, &out)?;
        match report.pixel_auc {
            Some(p) => println!("{}: image_auc {:.4} pixel_auc {:.4}", report.dataset, report.image_auc, p),
            None => println!("{}: image_auc {:.4}", report.dataset, report.image_auc),
        }
        println!("report {}", path.display());
    }
    Ok(())
}

fn synth_cmd(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::new(&args.class, args.count, cli.seed.unwrap_or(0));
    if let Some(n) = args.train_count {
        cfg.train_count = n;
    }
    let s = make_synthetic_dataset(&args.out, &cfg)?;
    println!("wrote {}: {} normal + {} anomalous test images", s.class_dir.display(), s.test_normal, s.test_anomalous);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if cli.device != "cpu" {
        return Err(Error::InvalidConfig(format!("device `{}` is not available; use cpu", cli.device)));
    }
    match &cli.command {
        Command::BuildKb(a) => build_kb_cmd(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::MakeSynth(a) => synth_cmd(cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
