use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{ChannelConfig, Snr};
use crate::error::{Error, Result};
use crate::hv_codec::HvConfig;
use crate::importance::PatchImportance;
use crate::jscc_codec::JsccConfig;
use crate::scene::SceneSpec;

/// Transmission scheme under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SaOosc,
    OoscUniform,
    NtsccEntropyOnly,
    FixedRate,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::SaOosc,
        Method::OoscUniform,
        Method::NtsccEntropyOnly,
        Method::FixedRate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SaOosc => "sa_oosc",
            Method::OoscUniform => "oosc_uniform",
            Method::NtsccEntropyOnly => "ntscc_entropy_only",
            Method::FixedRate => "fixed_rate",
        }
    }

    /// Labels the method trains and allocates with: true labels, every
    /// object promoted to level 3, or no importance at all.
    pub fn view(self, levels: &PatchImportance) -> PatchImportance {
        match self {
            Method::SaOosc => levels.clone(),
            Method::OoscUniform => levels.promote_objects(),
            Method::NtsccEntropyOnly | Method::FixedRate => {
                PatchImportance::background(levels.len())
            }
        }
    }

    /// Methods that share a pretrained hyperprior codec get the same key.
    pub fn hv_key(self) -> &'static str {
        match self {
            Method::SaOosc => "importance",
            Method::OoscUniform => "promoted",
            Method::NtsccEntropyOnly | Method::FixedRate => "uniform",
        }
    }

    pub fn adaptive(self) -> bool {
        self != Method::FixedRate
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected one of sa_oosc, oosc_uniform, ntscc_entropy_only, fixed_rate)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Scenes rendered on the fly from seeds.
    Synthetic,
    /// `<dir>/train` and `<dir>/test` holding `*.ppm` with `*.labels.csv`.
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene: SceneSpec,
    /// Rule annotator thresholds as fractions of the image height.
    pub near_frac: f64,
    pub mid_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            train_scenes: 2000,
            test_scenes: 200,
            scene: SceneSpec::default(),
            near_frac: 0.25,
            mid_frac: 0.40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Anneal the learning rate to zero along a half cosine within each stage.
    pub cosine_decay: bool,
    /// Cap on a batch gradient's norm, as a multiple of its running average; 0 disables.
    pub clip_factor: f64,
    /// Learning-rate multiplier for the hyperprior codec during joint training.
    pub hv_finetune_lr_scale: f64,
    pub finetune_hv: bool,
    pub freeze_entropy_model: bool,
    pub lambda_joint: f64,
    pub train_snr_db: Snr,
    /// Symbols per patch of `fixed_rate`, and the mean the adaptive methods
    /// are calibrated to.
    pub fixed_k: u32,
    pub calibrate_eta: bool,
    pub calibration_scenes: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            pretrain_epochs: 20,
            joint_epochs: 20,
            batch_size: 16,
            lr: 3e-3,
            cosine_decay: true,
            clip_factor: 2.0,
            hv_finetune_lr_scale: 0.1,
            finetune_hv: true,
            freeze_entropy_model: true,
            lambda_joint: 1e-3,
            train_snr_db: Snr(10.0),
            fixed_k: 8,
            calibrate_eta: true,
            calibration_scenes: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub methods: Vec<Method>,
    pub snr_db: Vec<Snr>,
    /// Test scenes evaluated (at most `data.test_scenes`).
    pub images: usize,
    /// Heatmaps are written for the first this many test scenes.
    pub heatmap_images: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            methods: Method::ALL.to_vec(),
            snr_db: [0.0, 5.0, 10.0, 15.0, 20.0].into_iter().map(Snr).collect(),
            images: 200,
            heatmap_images: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub hv: HvConfig,
    pub jscc: JsccConfig,
    pub channel: ChannelConfig,
    pub training: TrainingConfig,
    pub benchmark: BenchmarkConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            hv: HvConfig::default(),
            jscc: JsccConfig::default(),
            channel: ChannelConfig::default(),
            training: TrainingConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Builds a config from TOML text, then applies `section.key=value`
    /// overrides (values in TOML syntax, bare words taken as strings). When
    /// neither the text nor the overrides set `seed`, `fallback_seed` is used.
    pub fn from_toml_with(
        text: &str,
        overrides: &[String],
        fallback_seed: Option<u64>,
    ) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if let (Some(seed), false) = (fallback_seed, table.contains_key("seed")) {
            let seed = i64::try_from(seed)
                .map_err(|_| Error::Config(format!("seed {seed} does not fit a TOML integer")))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form, with
    /// `out_dir` left out so moving a run does not change its reports.
    pub fn fingerprint(&self) -> String {
        let canonical = ExperimentConfig {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Hash of only the settings that shape trained weights.
    pub fn training_fingerprint(&self) -> String {
        let relevant = (self.seed, &self.data, &self.hv, &self.jscc, &self.training);
        let text = toml::to_string(&TrainingView { relevant }).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    pub fn validate(&self) -> Result<()> {
        self.hv.validate()?;
        self.jscc.validate()?;
        if self.jscc.latent_scale != self.hv.latent_scale {
            return Err(Error::Config(
                "jscc.latent_scale must equal hv.latent_scale".into(),
            ));
        }
        if self.jscc.c != self.hv.c || self.jscc.patches != self.hv.patches() {
            return Err(Error::Config(format!(
                "jscc expects {} patches of dimension {}, the hyperprior codec produces {} of {}",
                self.jscc.patches,
                self.jscc.c,
                self.hv.patches(),
                self.hv.c
            )));
        }
        let s = &self.data.scene;
        if s.height != self.hv.rows * self.hv.patch_size
            || s.width != self.hv.cols * self.hv.patch_size
        {
            return Err(Error::Config(format!(
                "scenes are {}x{} but the codec grid covers {}x{}",
                s.width,
                s.height,
                self.hv.cols * self.hv.patch_size,
                self.hv.rows * self.hv.patch_size
            )));
        }
        let t = &self.training;
        if t.batch_size == 0
            || !(t.lr > 0.0)
            || !(t.hv_finetune_lr_scale >= 0.0)
            || !(t.lambda_joint >= 0.0)
            || !(t.clip_factor >= 0.0)
        {
            return Err(Error::Config(
                "training: batch_size, lr must be positive; scales non-negative".into(),
            ));
        }
        self.jscc.rate.index_of(t.fixed_k).map_err(|_| {
            Error::Config(format!(
                "training.fixed_k = {} is not in V {:?}",
                t.fixed_k, self.jscc.rate.v
            ))
        })?;
        if self.data.train_scenes == 0 {
            return Err(Error::Config("data.train_scenes must be positive".into()));
        }
        if !(0.0 < self.data.near_frac && self.data.near_frac <= self.data.mid_frac) {
            return Err(Error::Config("data: need 0 < near_frac <= mid_frac".into()));
        }
        if self.benchmark.methods.is_empty() || self.benchmark.snr_db.is_empty() {
            return Err(Error::Config(
                "benchmark needs at least one method and one SNR".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct TrainingView<'a> {
    relevant: (
        u64,
        &'a DataConfig,
        &'a HvConfig,
        &'a JsccConfig,
        &'a TrainingConfig,
    ),
}

fn parse_value(text: &str) -> toml::Value {
    let t = text.trim();
    toml::from_str::<toml::Table>(&format!("v = {t}"))
        .ok()
        .and_then(|mut m| m.remove("v"))
        .unwrap_or_else(|| toml::Value::String(t.to_string()))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override {spec:?} has an empty key")));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {spec:?}: {k} is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(value));
    Ok(())
}
