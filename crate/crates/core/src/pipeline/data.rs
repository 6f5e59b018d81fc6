use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::importance::{
    object_to_patch, read_patch_csv, rule_annotate, write_patch_csv, PatchImportance,
    RuleThresholds,
};
use crate::numkit::RngStream;
use crate::scene::io::{read_objects_jsonl, read_ppm, write_objects_jsonl, write_ppm};
use crate::scene::{generate_scene, tokenize, GridShape, Image, PatchGrid, SceneObject};

use super::config::{DataConfig, DataSource, ExperimentConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One labeled scene ready for the codecs.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub grid: PatchGrid,
    pub levels: PatchImportance,
    pub objects: Vec<SceneObject>,
}

pub fn rule_thresholds(data: &DataConfig) -> RuleThresholds {
    let h = data.scene.height as f64;
    RuleThresholds {
        near: data.near_frac * h,
        mid: data.mid_frac * h,
    }
}

/// Patch labels from the rule annotator.
pub fn label_scene(
    objects: &[SceneObject],
    data: &DataConfig,
    grid: GridShape,
) -> Result<PatchImportance> {
    let labels = rule_annotate(objects, rule_thresholds(data))?;
    object_to_patch(&labels, objects, grid)
}

fn scene_seed(seed: u64, split: Split, index: usize) -> u64 {
    let mut r = RngStream::new(seed)
        .fork_named(split.dir_name())
        .fork(index as u64);
    rand::RngCore::next_u64(&mut r)
}

pub fn synthetic_sample(cfg: &ExperimentConfig, split: Split, index: usize) -> Result<Sample> {
    let (image, objects) = generate_scene(scene_seed(cfg.seed, split, index), &cfg.data.scene)?;
    let grid = tokenize(&image, cfg.hv.patch_size)?;
    let levels = label_scene(&objects, &cfg.data, grid.shape())?;
    Ok(Sample {
        id: format!("{}_{index:05}", split.dir_name()),
        image,
        grid,
        levels,
        objects,
    })
}

fn split_len(cfg: &ExperimentConfig, split: Split) -> usize {
    match split {
        Split::Train => cfg.data.train_scenes,
        Split::Test => cfg.data.test_scenes,
    }
}

/// Loads (or renders) up to `limit` scenes of a split.
pub fn load_split(
    cfg: &ExperimentConfig,
    split: Split,
    limit: Option<usize>,
) -> Result<Vec<Sample>> {
    let n = limit.map_or(split_len(cfg, split), |l| l.min(split_len(cfg, split)));
    match &cfg.data.source {
        DataSource::Synthetic => (0..n).map(|i| synthetic_sample(cfg, split, i)).collect(),
        DataSource::Directory(dir) => {
            let d = dir.join(split.dir_name());
            let mut samples = read_dir_samples(&d, cfg)?;
            samples.truncate(n);
            Ok(samples)
        }
    }
}

fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads `<stem>.ppm` with `<stem>.labels.csv` from a directory, in name
/// order. Objects are optional and default to none.
pub fn read_dir_samples(dir: &Path, cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    ppm_files(dir)?
        .iter()
        .map(|p| read_sample(p, cfg))
        .collect()
}

/// Reads one scene from `<stem>.ppm` and the `<stem>.labels.csv` (and, if
/// present, `<stem>.objects.jsonl`) next to it.
pub fn read_sample(path: &Path, cfg: &ExperimentConfig) -> Result<Sample> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    let image = read_ppm(path)?;
    let grid = tokenize(&image, cfg.hv.patch_size)?;
    if grid.shape() != cfg.hv.grid() {
        return Err(Error::Scene(format!(
            "{}: grid {:?} does not match the codec grid {:?}",
            path.display(),
            grid.shape(),
            cfg.hv.grid()
        )));
    }
    let levels = read_patch_csv(&dir.join(format!("{stem}.labels.csv")))?;
    if levels.len() != grid.len() {
        return Err(Error::Scene(format!(
            "{stem}: {} labels for {} patches",
            levels.len(),
            grid.len()
        )));
    }
    let obj_path = dir.join(format!("{stem}.objects.jsonl"));
    let objects = if obj_path.exists() {
        read_objects_jsonl(&obj_path)?
    } else {
        Vec::new()
    };
    Ok(Sample {
        id: stem,
        image,
        grid,
        levels,
        objects,
    })
}

/// Writes a split as `<stem>.ppm`, `<stem>.objects.jsonl` and `<stem>.labels.csv`.
pub fn write_split(samples: &[Sample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        write_ppm(&s.image, &dir.join(format!("{}.ppm", s.id)))?;
        write_objects_jsonl(&s.objects, &dir.join(format!("{}.objects.jsonl", s.id)))?;
        write_patch_csv(
            &s.levels,
            s.grid.shape(),
            &dir.join(format!("{}.labels.csv", s.id)),
        )?;
    }
    Ok(())
}
