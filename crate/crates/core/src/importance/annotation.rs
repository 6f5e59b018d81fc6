use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{ObjectImportance, PatchImportance};
use crate::scene::{GridShape, SceneObject};

/// Keeps every key/value pair in document order, duplicates included.
struct OrderedPairs(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for OrderedPairs {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = OrderedPairs;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object mapping object ids to importance levels")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<OrderedPairs, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    out.push((k, v));
                }
                Ok(OrderedPairs(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// Parses the `{"<object_id>": <level>, ...}` annotation mapping.
pub fn parse_annotation(text: &str) -> Result<Vec<ObjectImportance>> {
    let pairs: OrderedPairs =
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let mut out: Vec<ObjectImportance> = Vec::with_capacity(pairs.0.len());
    for (key, value) in pairs.0 {
        let object_id: i64 = key
            .trim()
            .parse()
            .map_err(|_| Error::Schema(format!("object id {key:?} is not an integer")))?;
        if out.iter().any(|o| o.object_id == object_id) {
            return Err(Error::Annotation {
                object_id,
                reason: "duplicate object id".into(),
            });
        }
        let level = value
            .as_u64()
            .filter(|&l| l <= u8::MAX as u64)
            .ok_or_else(|| Error::Annotation {
                object_id,
                reason: format!("level {value} is not an integer in 1..=3"),
            })?;
        out.push(ObjectImportance::new(object_id, level as u8)?);
    }
    Ok(out)
}

pub fn serialize_annotation(labels: &[ObjectImportance]) -> String {
    let body: Vec<String> = labels
        .iter()
        .map(|l| format!("\"{}\":{}", l.object_id, l.level))
        .collect();
    format!("{{{}}}", body.join(","))
}

/// Writes patch levels as CSV, one grid row per line.
pub fn write_patch_csv(levels: &PatchImportance, grid: GridShape, path: &Path) -> Result<()> {
    if levels.len() != grid.len() {
        return Err(Error::contract(format!(
            "{} levels for a {}-patch grid",
            levels.len(),
            grid.len()
        )));
    }
    let mut text = String::new();
    for row in levels.levels().chunks(grid.cols) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads patch levels in raster order regardless of line layout.
pub fn read_patch_csv(path: &Path) -> Result<PatchImportance> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let levels = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<u8>().map_err(|_| {
                Error::format(
                    "patch label csv",
                    format!("{}: bad level {t:?}", path.display()),
                )
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PatchImportance::new(levels)
}

/// Distance thresholds of the rule annotator, in pixels above the ego region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleThresholds {
    pub near: f64,
    pub mid: f64,
}

impl RuleThresholds {
    /// `near` = 25% and `mid` = 40% of the image height.
    pub fn for_height(height: usize) -> Self {
        RuleThresholds {
            near: 0.25 * height as f64,
            mid: 0.40 * height as f64,
        }
    }
}

/// Deterministic rule labeler for synthetic scenes.
///
/// Very close objects are high regardless of lane; in-lane objects are high
/// within `mid` and medium beyond it; everything else is low.
pub fn rule_annotate(
    objects: &[SceneObject],
    thresholds: RuleThresholds,
) -> Result<Vec<ObjectImportance>> {
    objects
        .iter()
        .map(|o| {
            let (Some(d), Some(in_path)) = (o.ego_distance, o.in_path) else {
                return Err(Error::Annotation {
                    object_id: o.track_id,
                    reason: "rule annotation needs synthetic ego_distance and in_path".into(),
                });
            };
            let level = if d < thresholds.near || (in_path && d < thresholds.mid) {
                3
            } else if in_path {
                2
            } else {
                1
            };
            ObjectImportance::new(o.track_id, level)
        })
        .collect()
}
