//! Object- and patch-level importance labels.
//!
//! Levels: 3 high, 2 medium, 1 low for detected objects; patches that touch
//! no labeled object are background (0).

mod agreement;
mod annotation;
mod remote;

pub use agreement::{agreement, AgreementReport, CategoryAccuracy, Granularity, LabelSet};
pub use annotation::{
    parse_annotation, read_patch_csv, rule_annotate, serialize_annotation, write_patch_csv,
    RuleThresholds,
};
pub use remote::{fetch_remote_annotation, RemoteOptions};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{GridShape, SceneObject};

pub const MAX_LEVEL: u8 = 3;

/// Importance assigned to one detected object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectImportance {
    pub object_id: i64,
    pub level: u8,
}

impl ObjectImportance {
    pub fn new(object_id: i64, level: u8) -> Result<Self> {
        if !(1..=MAX_LEVEL).contains(&level) {
            return Err(Error::Annotation {
                object_id,
                reason: format!("level {level} is not one of 1, 2, 3"),
            });
        }
        Ok(ObjectImportance { object_id, level })
    }
}

/// Per-patch levels in raster order, each in `0..=3`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchImportance(Vec<u8>);

impl PatchImportance {
    pub fn new(levels: Vec<u8>) -> Result<Self> {
        if let Some((i, l)) = levels.iter().enumerate().find(|(_, &l)| l > MAX_LEVEL) {
            return Err(Error::contract(format!(
                "patch {i} has importance level {l} (max 3)"
            )));
        }
        Ok(PatchImportance(levels))
    }

    pub fn background(len: usize) -> Self {
        PatchImportance(vec![0; len])
    }

    pub fn levels(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Every non-background patch raised to level 3.
    pub fn promote_objects(&self) -> Self {
        PatchImportance(
            self.0
                .iter()
                .map(|&l| if l > 0 { MAX_LEVEL } else { 0 })
                .collect(),
        )
    }
}

/// Normalized exponential patch weights, `w_i = 2^{I_i} / Σ_j 2^{I_j}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceWeights(Vec<f64>);

impl ImportanceWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn uniform(len: usize) -> Self {
        ImportanceWeights(vec![1.0 / len as f64; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn importance_weights(levels: &PatchImportance) -> ImportanceWeights {
    let raw: Vec<f64> = levels
        .levels()
        .iter()
        .map(|&l| f64::from(1u32 << l))
        .collect();
    let total: f64 = raw.iter().sum();
    ImportanceWeights(raw.into_iter().map(|r| r / total).collect())
}

/// Converts object labels to patch labels: each patch takes the highest level
/// among labeled objects whose box overlaps it with positive area, else 0.
///
/// Objects without a label are ignored; a label naming an unknown object is
/// a contract violation.
pub fn object_to_patch(
    labels: &[ObjectImportance],
    objects: &[SceneObject],
    grid: GridShape,
) -> Result<PatchImportance> {
    let mut levels = vec![0u8; grid.len()];
    for label in labels {
        let obj = objects
            .iter()
            .find(|o| o.track_id == label.object_id)
            .ok_or_else(|| {
                Error::contract(format!("label for unknown object {}", label.object_id))
            })?;
        obj.bbox.validate(grid.height(), grid.width())?;
        let ps = grid.patch_size as f64;
        let b = obj.bbox;
        // Only patches whose index range can intersect the box are visited.
        let c0 = (b.x1 / ps).floor() as usize;
        let c1 = ((b.x2 / ps).ceil() as usize).min(grid.cols);
        let r0 = (b.y1 / ps).floor() as usize;
        let r1 = ((b.y2 / ps).ceil() as usize).min(grid.rows);
        for r in r0..r1 {
            for c in c0..c1 {
                let (x0, y0) = (c as f64 * ps, r as f64 * ps);
                if b.overlaps_rect(x0, y0, x0 + ps, y0 + ps) {
                    let slot = &mut levels[r * grid.cols + c];
                    *slot = (*slot).max(label.level);
                }
            }
        }
    }
    PatchImportance::new(levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::BoundingBox;

    fn obj(id: i64, x1: f64, y1: f64, x2: f64, y2: f64) -> SceneObject {
        SceneObject {
            track_id: id,
            name: "car".into(),
            class: 2,
            confidence: 1.0,
            bbox: BoundingBox { x1, y1, x2, y2 },
            ego_distance: None,
            in_path: None,
        }
    }

    const GRID: GridShape = GridShape {
        patch_size: 4,
        rows: 2,
        cols: 2,
    };

    #[test]
    fn single_multiple_and_background_patches() {
        let objects = vec![
            obj(1, 0.0, 0.0, 3.0, 3.0),
            obj(2, 5.0, 0.0, 8.0, 6.0),
            obj(3, 6.0, 1.0, 7.0, 2.0),
        ];
        let labels = vec![
            ObjectImportance::new(1, 2).unwrap(),
            ObjectImportance::new(2, 1).unwrap(),
            ObjectImportance::new(3, 3).unwrap(),
        ];
        let p = object_to_patch(&labels, &objects, GRID).unwrap();
        assert_eq!(p.levels(), &[2, 3, 0, 1]);
    }

    #[test]
    fn touching_edges_do_not_count() {
        let objects = vec![obj(1, 0.0, 0.0, 4.0, 4.0)];
        let p = object_to_patch(&[ObjectImportance::new(1, 3).unwrap()], &objects, GRID).unwrap();
        assert_eq!(p.levels(), &[3, 0, 0, 0]);
    }

    #[test]
    fn no_objects_is_all_background() {
        assert_eq!(
            object_to_patch(&[], &[], GRID).unwrap().levels(),
            &[0, 0, 0, 0]
        );
    }

    #[test]
    fn weights_reference_values() {
        let w = importance_weights(&PatchImportance::new(vec![0, 3]).unwrap());
        assert_eq!(w.as_slice(), &[1.0 / 9.0, 8.0 / 9.0]);
        let w = importance_weights(&PatchImportance::new(vec![2; 5]).unwrap());
        assert!(w.as_slice().iter().all(|&x| x == 0.2));
    }

    #[test]
    fn invalid_levels_rejected() {
        assert!(PatchImportance::new(vec![0, 4]).is_err());
        assert!(ObjectImportance::new(1, 0).is_err());
        assert!(ObjectImportance::new(1, 4).is_err());
    }
}
