//! `saoosc`: synthetic data, two-stage training, transmission and method
//! comparison from one TOML config.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use saoosc_core::importance::{
    agreement, fetch_remote_annotation, object_to_patch, parse_annotation, read_patch_csv,
    rule_annotate, serialize_annotation, write_patch_csv, LabelSet, RemoteOptions,
};
use saoosc_core::metrics::{write_csv, write_heatmap};
use saoosc_core::pipeline::{
    self, channel_rng, load_split, read_sample, rule_thresholds, summarize, summary_csv,
    synthetic_sample, transmit, write_split,
};
use saoosc_core::scene::io::{read_objects_jsonl, read_ppm, write_ppm};
use saoosc_core::scene::tokenize;
use saoosc_core::{ExperimentConfig, Method, Snr, Split, TrainedSystem};

const SEED_ENV: &str = "SAOOSC_SEED";

#[derive(Parser)]
#[command(
    name = "saoosc",
    version,
    about = "Importance-aware semantic image transmission over simulated AWGN channels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Config override such as `training.lr=0.001`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Global seed; beats the config and the SAOOSC_SEED fallback.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes with objects and rule-based patch labels.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        split: SplitArg,
    },
    /// Label the objects of every `<stem>.ppm` + `<stem>.objects.jsonl` in a directory.
    Annotate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Annotation service URL; without it the distance/lane rule is used.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Pretrain the hyperprior codecs over a noiseless channel.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train each method end to end from its pretrained codec.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Send one labeled image through a trained system.
    Transmit {
        #[command(flatten)]
        common: Common,
        /// `<stem>.ppm`; `<stem>.labels.csv` must sit next to it.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "sa_oosc")]
        method: Method,
        /// Channel SNR in dB, or `inf`.
        #[arg(long, default_value = "10", value_parser = parse_snr)]
        snr: Snr,
        /// Checkpoint directory; defaults to `<out>/checkpoints`.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Compare all configured methods over the test split and SNR list.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to `<out>/checkpoints`.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Train first unless matching checkpoints already exist.
        #[arg(long)]
        train: bool,
    },
    /// Per-category agreement of predicted labels with reference labels.
    EvaluateLabels {
        /// Label file or directory (`*.json` object mappings or `*.labels.csv` patch grids).
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Also write `agreement.csv` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_snr(s: &str) -> std::result::Result<Snr, String> {
    Snr::parse(s).map_err(|e| e.to_string())
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| {
            format!("{SEED_ENV}={v:?} is not an unsigned integer")
        })?)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => bail!("{SEED_ENV}: {e}"),
    }
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(&self.config)
            .with_context(|| format!("reading config {}", self.config.display()))?;
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        let mut cfg = ExperimentConfig::from_toml_with(&text, &overrides, env_seed()?)
            .with_context(|| format!("invalid config {}", self.config.display()))?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

fn ckpt_dir(cfg: &ExperimentConfig, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.checkpoint_dir())
}

fn write_config(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let path = cfg.out_dir.join("config.toml");
    fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(cfg: &ExperimentConfig, split: SplitArg) -> Result<()> {
    let splits: &[Split] = match split {
        SplitArg::Train => &[Split::Train],
        SplitArg::Test => &[Split::Test],
        SplitArg::Both => &[Split::Train, Split::Test],
    };
    let mut rendered = Vec::new();
    for &s in splits {
        let n = match s {
            Split::Train => cfg.data.train_scenes,
            Split::Test => cfg.data.test_scenes,
        };
        let samples = (0..n)
            .map(|i| synthetic_sample(cfg, s, i))
            .collect::<saoosc_core::Result<Vec<_>>>()?;
        rendered.push((s, samples));
    }
    write_config(cfg)?;
    for (s, samples) in rendered {
        let dir = cfg.out_dir.join(s.dir_name());
        write_split(&samples, &dir)?;
        println!(
            "{}: {} scenes in {}",
            s.dir_name(),
            samples.len(),
            dir.display()
        );
    }
    Ok(())
}

fn annotate(cfg: &ExperimentConfig, input: &Path, endpoint: Option<&str>) -> Result<()> {
    let mut stems: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("listing {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    stems.sort();
    if stems.is_empty() {
        bail!("no .ppm files in {}", input.display());
    }
    let mut out = Vec::new();
    for ppm in &stems {
        let stem = ppm
            .file_stem()
            .and_then(|s| s.to_str())
            .context("non-UTF-8 file name")?
            .to_string();
        let image = read_ppm(ppm)?;
        let objects = read_objects_jsonl(&input.join(format!("{stem}.objects.jsonl")))?;
        let labels = match endpoint {
            Some(url) => fetch_remote_annotation(&image, &objects, &RemoteOptions::new(url))?,
            None => rule_annotate(&objects, rule_thresholds(&cfg.data))?,
        };
        let grid = tokenize(&image, cfg.hv.patch_size)?.shape();
        let patches = object_to_patch(&labels, &objects, grid)?;
        out.push((stem, serialize_annotation(&labels), patches, grid));
    }
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    for (stem, json, patches, grid) in &out {
        let path = cfg.out_dir.join(format!("{stem}.json"));
        fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        write_patch_csv(
            patches,
            *grid,
            &cfg.out_dir.join(format!("{stem}.labels.csv")),
        )?;
    }
    println!(
        "annotated {} images into {}",
        out.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn run_transmit(
    cfg: &ExperimentConfig,
    image: &Path,
    method: Method,
    snr: Snr,
    checkpoints: &Path,
) -> Result<()> {
    let sys = TrainedSystem::load(
        cfg,
        method,
        &pipeline::system_checkpoint(checkpoints, method),
    )?;
    let sample = read_sample(image, cfg)?;
    let mut rng = channel_rng(cfg.channel.seed, &sample.id, snr);
    let t = transmit(
        &sys,
        &sample,
        snr,
        &mut rng,
        cfg.channel.side_channel_counted_in_cbr,
        &cfg.fingerprint(),
    )?;
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let base = format!("{}_{method}_{snr}", sample.id);
    write_ppm(
        &t.reconstruction.quantized(),
        &cfg.out_dir.join(format!("{base}.ppm")),
    )?;
    write_csv(
        std::slice::from_ref(&t.report),
        &cfg.out_dir.join(format!("{base}.csv")),
    )?;
    write_heatmap(
        &t.report,
        cfg.jscc.rate.max_k(),
        cfg.hv.patch_size,
        &cfg.out_dir.join(format!("{base}_k.pgm")),
    )?;
    println!(
        "{}: cbr {:.6}, sad {:.3} dB -> {}",
        sample.id,
        t.report.cbr,
        t.report.sad_db,
        cfg.out_dir.display()
    );
    Ok(())
}

fn run_benchmark(cfg: &ExperimentConfig, checkpoints: &Path, train: bool) -> Result<()> {
    if train && pipeline::ensure_trained(cfg, checkpoints)? {
        println!("trained checkpoints in {}", checkpoints.display());
    }
    let reports = pipeline::run_benchmark(cfg, checkpoints, &cfg.out_dir)?;
    print!("{}", summary_csv(&summarize(&reports)));
    Ok(())
}

fn read_labels(path: &Path) -> Result<LabelSet> {
    let name = path.to_string_lossy();
    if name.ends_with(".json") {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(LabelSet::objects(
            &parse_annotation(&text).with_context(|| format!("parsing {}", path.display()))?,
        ))
    } else if name.ends_with(".csv") {
        Ok(LabelSet::patches(&read_patch_csv(path)?))
    } else {
        bail!(
            "{}: expected a .json object mapping or a .csv patch grid",
            path.display()
        )
    }
}

fn label_pairs(pred: &Path, reference: &Path) -> Result<Vec<(LabelSet, LabelSet)>> {
    if !reference.is_dir() {
        return Ok(vec![(read_labels(pred)?, read_labels(reference)?)]);
    }
    let mut names: Vec<String> = fs::read_dir(reference)
        .with_context(|| format!("listing {}", reference.display()))?
        .filter_map(|e| e.ok().and_then(|e| e.file_name().into_string().ok()))
        .filter(|n| n.ends_with(".json") || n.ends_with(".labels.csv"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no label files in {}", reference.display());
    }
    names
        .iter()
        .map(|n| {
            let p = pred.join(n);
            if !p.exists() {
                bail!("{} has no prediction {}", n, p.display());
            }
            Ok((read_labels(&p)?, read_labels(&reference.join(n))?))
        })
        .collect()
}

fn evaluate_labels(pred: &Path, reference: &Path, out: Option<&Path>) -> Result<()> {
    let report = agreement(&label_pairs(pred, reference)?)?;
    print!("{report}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("agreement.csv");
        fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, split } => gen_data(&common.load()?, split),
        Command::Annotate {
            common,
            input,
            endpoint,
        } => annotate(&common.load()?, &input, endpoint.as_deref()),
        Command::Pretrain { common } => {
            let cfg = common.load()?;
            let train = load_split(&cfg, Split::Train, None)?;
            pipeline::pretrain_all(&cfg, &cfg.benchmark.methods, &train, &cfg.checkpoint_dir())?;
            println!("pretrained codecs in {}", cfg.checkpoint_dir().display());
            Ok(())
        }
        Command::Train { common } => {
            let cfg = common.load()?;
            let train = load_split(&cfg, Split::Train, None)?;
            pipeline::train_all(&cfg, &cfg.benchmark.methods, &train, &cfg.checkpoint_dir())?;
            println!("trained systems in {}", cfg.checkpoint_dir().display());
            Ok(())
        }
        Command::Transmit {
            common,
            image,
            method,
            snr,
            checkpoints,
        } => {
            let cfg = common.load()?;
            let dir = ckpt_dir(&cfg, &checkpoints);
            run_transmit(&cfg, &image, method, snr, &dir)
        }
        Command::Benchmark {
            common,
            checkpoints,
            train,
        } => {
            let cfg = common.load()?;
            let dir = ckpt_dir(&cfg, &checkpoints);
            run_benchmark(&cfg, &dir, train)
        }
        Command::EvaluateLabels {
            pred,
            reference,
            out,
        } => evaluate_labels(&pred, &reference, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
