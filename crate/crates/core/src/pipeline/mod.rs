//! Two-stage training, end-to-end transmission and method comparison.

mod config;
mod data;
mod summary;
mod train;
mod transmit;

pub use config::{
    BenchmarkConfig, DataConfig, DataSource, ExperimentConfig, Method, TrainingConfig,
};
pub use data::{
    label_scene, load_split, read_dir_samples, read_sample, rule_thresholds, synthetic_sample,
    write_split, Sample, Split,
};
pub use summary::{summarize, summary_csv, CellSummary};
pub use train::{
    calibrate_eta, entropies, evaluate_hv_loss, evaluate_joint_loss, pretrain_hv, train_joint,
    write_loss_curve, LossPoint, TrainedSystem,
};
pub use transmit::{channel_rng, transmit, Transmission};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hv_codec::HvModel;
use crate::metrics::{write_csv, write_heatmap, RunReport};
use crate::numkit::checkpoint;

const FINGERPRINT_FILE: &str = "training.fingerprint";

pub fn system_checkpoint(dir: &Path, method: Method) -> PathBuf {
    dir.join(format!("{method}.ckpt"))
}

pub fn hv_checkpoint(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("hv_{key}.ckpt"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Pretrains one hyperprior codec per distinct weighting among `methods`.
pub fn pretrain_all(
    cfg: &ExperimentConfig,
    methods: &[Method],
    train: &[Sample],
    ckpt_dir: &Path,
) -> Result<()> {
    create_dir(ckpt_dir)?;
    let mut done = Vec::new();
    for &m in methods {
        if done.contains(&m.hv_key()) {
            continue;
        }
        let (_, curve) = pretrain_hv(cfg, m, train, Some(&hv_checkpoint(ckpt_dir, m.hv_key())))?;
        write_loss_curve(
            &curve,
            &ckpt_dir.join(format!("loss_pretrain_{}.csv", m.hv_key())),
        )?;
        done.push(m.hv_key());
    }
    Ok(())
}

/// Loads the pretrained codec a method builds on.
pub fn load_pretrained(cfg: &ExperimentConfig, method: Method, ckpt_dir: &Path) -> Result<HvModel> {
    let path = hv_checkpoint(ckpt_dir, method.hv_key());
    if !path.exists() {
        return Err(Error::MissingCheckpoint(format!(
            "pretrained codec for {method}: {}",
            path.display()
        )));
    }
    HvModel::from_store(cfg.hv.clone(), &checkpoint::load(&path)?)
}

/// Joint training for each method from its pretrained codec.
pub fn train_all(
    cfg: &ExperimentConfig,
    methods: &[Method],
    train: &[Sample],
    ckpt_dir: &Path,
) -> Result<()> {
    create_dir(ckpt_dir)?;
    for &m in methods {
        let hv = load_pretrained(cfg, m, ckpt_dir)?;
        let (_, curve) = train_joint(cfg, m, hv, train, Some(&system_checkpoint(ckpt_dir, m)))?;
        write_loss_curve(&curve, &ckpt_dir.join(format!("loss_joint_{m}.csv")))?;
    }
    Ok(())
}

/// Runs both training stages unless `ckpt_dir` already holds checkpoints
/// produced from the same training settings. Returns whether training ran.
pub fn ensure_trained(cfg: &ExperimentConfig, ckpt_dir: &Path) -> Result<bool> {
    let methods = &cfg.benchmark.methods;
    let stamp = ckpt_dir.join(FINGERPRINT_FILE);
    let fp = cfg.training_fingerprint();
    let cached = fs::read_to_string(&stamp)
        .map(|s| s.trim() == fp)
        .unwrap_or(false)
        && methods
            .iter()
            .all(|&m| system_checkpoint(ckpt_dir, m).exists());
    if cached {
        return Ok(false);
    }
    let train = load_split(cfg, Split::Train, None)?;
    pretrain_all(cfg, methods, &train, ckpt_dir)?;
    train_all(cfg, methods, &train, ckpt_dir)?;
    fs::write(&stamp, &fp).map_err(|e| Error::io(&stamp, e))?;
    Ok(true)
}

/// Loads a system checkpoint per method, failing on the first missing one.
pub fn load_systems(
    cfg: &ExperimentConfig,
    methods: &[Method],
    ckpt_dir: &Path,
) -> Result<BTreeMap<Method, TrainedSystem>> {
    methods
        .iter()
        .map(|&m| {
            Ok((
                m,
                TrainedSystem::load(cfg, m, &system_checkpoint(ckpt_dir, m))?,
            ))
        })
        .collect()
}

/// Transmits every benchmark image with every method and SNR. Rows are
/// ordered by image, then method, then SNR.
pub fn evaluate(
    cfg: &ExperimentConfig,
    systems: &BTreeMap<Method, TrainedSystem>,
    test: &[Sample],
) -> Result<Vec<RunReport>> {
    let fp = cfg.fingerprint();
    let per_image: Vec<Result<Vec<RunReport>>> = test
        .par_iter()
        .map(|s| {
            let mut rows = Vec::new();
            for m in &cfg.benchmark.methods {
                let sys = systems
                    .get(m)
                    .ok_or_else(|| Error::MissingCheckpoint(m.to_string()))?;
                for &snr in &cfg.benchmark.snr_db {
                    let mut rng = channel_rng(cfg.channel.seed, &s.id, snr);
                    rows.push(
                        transmit(
                            sys,
                            s,
                            snr,
                            &mut rng,
                            cfg.channel.side_channel_counted_in_cbr,
                            &fp,
                        )?
                        .report,
                    );
                }
            }
            Ok(rows)
        })
        .collect();
    let mut out = Vec::new();
    for r in per_image {
        out.extend(r?);
    }
    Ok(out)
}

/// Loads checkpoints from `ckpt_dir`, evaluates the test split and writes
/// `benchmark.csv` plus `heatmaps/<method>_<image>_<snr>.pgm` under `out_dir`.
pub fn run_benchmark(
    cfg: &ExperimentConfig,
    ckpt_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<RunReport>> {
    let systems = load_systems(cfg, &cfg.benchmark.methods, ckpt_dir)?;
    let test = load_split(cfg, Split::Test, Some(cfg.benchmark.images))?;
    let reports = evaluate(cfg, &systems, &test)?;
    create_dir(out_dir)?;
    write_csv(&reports, &out_dir.join("benchmark.csv"))?;
    let summary_path = out_dir.join("summary.csv");
    fs::write(&summary_path, summary_csv(&summarize(&reports)))
        .map_err(|e| Error::io(&summary_path, e))?;
    let heat_dir = out_dir.join("heatmaps");
    create_dir(&heat_dir)?;
    let k_max = cfg.jscc.rate.max_k();
    let shown: Vec<&str> = test
        .iter()
        .take(cfg.benchmark.heatmap_images)
        .map(|s| s.id.as_str())
        .collect();
    for r in reports
        .iter()
        .filter(|r| shown.contains(&r.image_id.as_str()))
    {
        write_heatmap(
            r,
            k_max,
            cfg.hv.patch_size,
            &heat_dir.join(format!("{}_{}_{}.pgm", r.method, r.image_id, r.snr_db)),
        )?;
    }
    Ok(reports)
}
