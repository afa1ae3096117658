use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textmask::data::{generate_shapeworld, tensor_to_rgb, Dataset, DatasetMeta, ShapeWorldConfig};
use textmask::eval::{ablation_table, evaluate, run_ablation, AttributeClassifier, ClassifierTraining, EvalConfig};
use textmask::model::Model;
use textmask::train::{fit, parse_key_values, resume, TrainConfig};
use textmask::SegmentationMask;

type Scalar = f32;

#[derive(Parser, Debug)]
#[command(name = "textmask", version, about = "Text- and mask-guided image generation")]
struct Cli {
    /// Random seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic shapes dataset.
    MakeDataset(MakeDatasetArgs),
    /// Train a model, or continue a run with --resume.
    Train(TrainArgs),
    /// Render a grid of every stage's output for captions and masks.
    Sample(SampleArgs),
    /// Compute metrics and probes and write a JSON report.
    Eval(EvalArgs),
    /// Train and evaluate the full model and its four ablations.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct MakeDatasetArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    side: Option<usize>,
    /// Samples per colour, shape and background combination.
    #[arg(long)]
    per_combination: Option<usize>,
    /// Put every combination in the training split.
    #[arg(long)]
    no_hold_out: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Training checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One row per caption.
    #[arg(long, required = true)]
    caption: Vec<String>,
    /// One mask per caption, or a single mask shared by all rows.
    #[arg(long, required = true)]
    mask: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Pixel repetition applied to the finest resolution.
    #[arg(long, default_value_t = 4)]
    scale: u32,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Cached attribute classifier; trained and written when missing.
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    pool: Option<usize>,
    #[arg(long)]
    splits: Option<usize>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn read_pairs(path: Option<&Path>) -> Result<Vec<(String, String)>> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(parse_key_values(&text)?)
        }
        None => Ok(Vec::new()),
    }
}

fn split_overrides(items: &[String]) -> Result<Vec<(String, String)>> {
    items
        .iter()
        .map(|s| match s.split_once('=') {
            Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
            None => bail!("override {s:?} is not KEY=VALUE"),
        })
        .collect()
}

const EVAL_KEYS: [&str; 5] = ["seed", "is_splits", "pool", "r_precision_splits", "disentanglement_pairs"];

fn set_eval(config: &mut EvalConfig, key: &str, value: &str) -> Result<()> {
    let n: u64 = value.parse().with_context(|| format!("{key}: cannot parse {value:?}"))?;
    match key {
        "seed" => config.seed = n,
        "is_splits" => config.is_splits = n as usize,
        "pool" => config.pool = n as usize,
        "r_precision_splits" => config.r_precision_splits = n as usize,
        "disentanglement_pairs" => config.disentanglement_pairs = n as usize,
        _ => bail!("unknown evaluation key {key:?}"),
    }
    Ok(())
}

fn make_dataset(cli: &Cli, args: &MakeDatasetArgs) -> Result<()> {
    let mut config = ShapeWorldConfig::default();
    for (k, v) in read_pairs(cli.config.as_deref())? {
        match k.as_str() {
            "side" => config.side = v.parse().context("side")?,
            "per_combination" => config.per_combination = v.parse().context("per_combination")?,
            "hold_out" => config.hold_out = v.parse().context("hold_out")?,
            "seed" => config.seed = v.parse().context("seed")?,
            _ => bail!("unknown dataset key {k:?}"),
        }
    }
    if let Some(s) = args.side {
        config.side = s;
    }
    if let Some(n) = args.per_combination {
        config.per_combination = n;
    }
    if args.no_hold_out {
        config.hold_out = false;
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let summary = generate_shapeworld(&config, &args.out)?;
    println!(
        "wrote {} samples ({} train, {} test) to {}",
        summary.total,
        summary.train,
        summary.test,
        args.out.display()
    );
    Ok(())
}

fn train_config(cli: &Cli, overrides: &[String], out: Option<&Path>) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    config.apply(&read_pairs(cli.config.as_deref())?)?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = out {
        config.out_dir = o.to_path_buf();
    }
    config.apply(&split_overrides(overrides)?)?;
    Ok(config)
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(e) = args.epochs {
        extra.push(format!("epochs={e}"));
    }
    if let Some(m) = args.max_steps {
        extra.push(format!("max_steps={m}"));
    }
    extra.extend(args.overrides.iter().cloned());
    let path = if let Some(ckpt) = &args.resume {
        let mut pairs = split_overrides(&extra)?;
        if let Some(o) = &args.out {
            pairs.push(("out_dir".into(), o.display().to_string()));
        }
        let side = Model::<Scalar>::load(ckpt)?.plan().finest();
        let dataset = Dataset::load(&args.dataset, side)?;
        resume::<Scalar>(ckpt, &dataset, &pairs)?
    } else {
        let config = train_config(cli, &extra, args.out.as_deref())?;
        config.validate()?;
        let dataset = Dataset::load(&args.dataset, config.stage_plan()?.finest())?;
        fit::<Scalar>(&config, &dataset)?
    };
    println!("checkpoint written to {}", path.display());
    Ok(())
}

fn sample(cli: &Cli, args: &SampleArgs) -> Result<()> {
    if args.mask.len() != 1 && args.mask.len() != args.caption.len() {
        bail!("give one mask per caption or a single shared mask");
    }
    let model = Model::<Scalar>::load(&args.checkpoint)?;
    let finest = model.plan().finest();
    let masks = args.mask.iter().map(|p| SegmentationMask::load(p, finest)).collect::<Result<Vec<_>, _>>()?;
    let masks: Vec<SegmentationMask> = (0..args.caption.len()).map(|i| masks[i.min(masks.len() - 1)].clone()).collect();
    let ids = args.caption.iter().map(|c| Ok(model.caption(c)?.ids)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
    let noise = model.noise(ids.len(), &mut rng);
    let stages = model.generate(&noise, &ids, &masks)?;
    let cell = finest as u32 * args.scale.max(1);
    let gap = 2;
    let k = stages.len() as u32;
    let rows = ids.len() as u32;
    let mut grid =
        image::RgbImage::from_pixel(k * (cell + gap) + gap, rows * (cell + gap) + gap, image::Rgb([255, 255, 255]));
    for (si, stage) in stages.iter().enumerate() {
        for r in 0..ids.len() {
            let img = tensor_to_rgb(&stage.select0(r));
            let img = image::imageops::resize(&img, cell, cell, image::imageops::FilterType::Nearest);
            let x = gap + si as u32 * (cell + gap);
            let y = gap + r as u32 * (cell + gap);
            image::imageops::replace(&mut grid, &img, x as i64, y as i64);
        }
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    grid.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} ({} rows x {} stages)", args.out.display(), rows, k);
    Ok(())
}

fn eval_config(
    cli: &Cli,
    pool: Option<usize>,
    splits: Option<usize>,
    pairs: &[(String, String)],
) -> Result<EvalConfig> {
    let mut config = EvalConfig::default();
    for (k, v) in pairs {
        set_eval(&mut config, k, v)?;
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(p) = pool {
        config.pool = p;
    }
    if let Some(s) = splits {
        config.is_splits = s;
    }
    Ok(config)
}

fn load_classifier(path: Option<&Path>, dataset: &Dataset, meta: &DatasetMeta) -> Result<AttributeClassifier<Scalar>> {
    let default = dataset.root.join(format!("classifier-{}.safetensors", dataset.side));
    let path = path.unwrap_or(&default);
    Ok(AttributeClassifier::load_or_train(path, dataset, meta, &ClassifierTraining::default())?)
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let config = eval_config(cli, args.pool, args.splits, &read_pairs(cli.config.as_deref())?)?;
    let model = Model::<Scalar>::load(&args.checkpoint)?;
    let dataset = Dataset::load(&args.dataset, model.plan().finest())?;
    let meta = DatasetMeta::read(&args.dataset)?;
    let classifier = load_classifier(args.classifier.as_deref(), &dataset, &meta)?;
    let report = evaluate(&model, &dataset, &meta, &classifier, &config, Some(&args.checkpoint))?;
    if let Some(dir) = args.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&args.report, serde_json::to_string_pretty(&report)?)?;
    println!(
        "IS {:.3} ± {:.3}  R-precision {:.2}% ± {:.2}  controllability {:.1}%  background change {:.4} (foreground {:.4})",
        report.inception_score.mean,
        report.inception_score.std,
        report.r_precision.mean,
        report.r_precision.std,
        report.controllability.hit_rate,
        report.disentanglement.background_change,
        report.disentanglement.foreground_change
    );
    Ok(())
}

fn ablate(cli: &Cli, args: &AblateArgs) -> Result<()> {
    let (eval_pairs, train_pairs): (Vec<_>, Vec<_>) = read_pairs(cli.config.as_deref())?
        .into_iter()
        .partition(|(k, _)| EVAL_KEYS.contains(&k.as_str()) && k != "seed");
    let mut base = TrainConfig::default();
    base.apply(&train_pairs)?;
    if let Some(s) = cli.seed {
        base.seed = s;
    }
    base.out_dir = args.out.clone();
    if let Some(e) = args.epochs {
        base.epochs = e;
    }
    if let Some(m) = args.max_steps {
        base.max_steps = m;
    }
    base.apply(&split_overrides(&args.overrides)?)?;
    base.validate()?;
    let config = eval_config(cli, None, None, &eval_pairs)?;
    let dataset = Dataset::load(&args.dataset, base.stage_plan()?.finest())?;
    let meta = DatasetMeta::read(&args.dataset)?;
    let classifier = load_classifier(args.classifier.as_deref(), &dataset, &meta)?;
    let rows = run_ablation::<Scalar>(&base, &dataset, &meta, &classifier, &config)?;
    let table = ablation_table(&rows);
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    fs::write(args.out.join("ablation.md"), &table)?;
    print!("{table}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::MakeDataset(a) => make_dataset(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Sample(a) => sample(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Ablate(a) => ablate(cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
