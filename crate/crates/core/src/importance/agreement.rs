use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::importance::{ObjectImportance, PatchImportance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Object,
    Patch,
}

/// Labels keyed by object id or patch index.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    pub granularity: Granularity,
    pub labels: BTreeMap<i64, u8>,
}

impl LabelSet {
    pub fn objects(labels: &[ObjectImportance]) -> Self {
        LabelSet {
            granularity: Granularity::Object,
            labels: labels.iter().map(|l| (l.object_id, l.level)).collect(),
        }
    }

    pub fn patches(levels: &PatchImportance) -> Self {
        LabelSet {
            granularity: Granularity::Patch,
            labels: levels
                .levels()
                .iter()
                .enumerate()
                .map(|(i, &l)| (i as i64, l))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Default)]
pub struct CategoryAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl CategoryAccuracy {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Per-category and overall agreement with a reference labeling.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AgreementReport {
    pub granularity: Granularity,
    /// Indexed by level: 0 background, 1 low, 2 medium, 3 high. `None` when
    /// the reference has no item of that level.
    pub per_level: [Option<CategoryAccuracy>; 4],
    pub overall: CategoryAccuracy,
}

const CATEGORY_NAMES: [&str; 4] = ["background", "low", "medium", "high"];

impl AgreementReport {
    /// Table rows `(category, correct, total, accuracy or "N/A")`, high first.
    pub fn rows(&self) -> Vec<(String, String, String, String)> {
        let mut rows = Vec::new();
        for level in (0..4).rev() {
            let name = CATEGORY_NAMES[level].to_string();
            rows.push(match self.per_level[level] {
                Some(c) => (
                    name,
                    c.correct.to_string(),
                    c.total.to_string(),
                    format!("{:.2}%", 100.0 * c.accuracy()),
                ),
                None => (name, "0".into(), "0".into(), "N/A".into()),
            });
        }
        rows.push((
            "overall".into(),
            self.overall.correct.to_string(),
            self.overall.total.to_string(),
            format!("{:.2}%", 100.0 * self.overall.accuracy()),
        ));
        rows
    }

    pub fn to_csv(&self) -> String {
        let g = match self.granularity {
            Granularity::Object => "object",
            Granularity::Patch => "patch",
        };
        let mut s = String::from("granularity,category,correct,total,accuracy\n");
        for (c, k, t, a) in self.rows() {
            s.push_str(&format!("{g},{c},{k},{t},{a}\n"));
        }
        s
    }
}

impl fmt::Display for AgreementReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>8} {:>8} {:>10}   ({:?}-level)",
            "category", "correct", "total", "accuracy", self.granularity
        )?;
        for (c, k, t, a) in self.rows() {
            writeln!(f, "{c:<12} {k:>8} {t:>8} {a:>10}")?;
        }
        Ok(())
    }
}

/// Accumulates agreement counts over one or more labeled items.
#[derive(Clone, Debug, Default)]
struct Tally {
    per_level: [CategoryAccuracy; 4],
}

impl Tally {
    fn add(&mut self, pred: &LabelSet, reference: &LabelSet) -> Result<()> {
        if pred.granularity != reference.granularity {
            return Err(Error::contract(
                "cannot compare object-level with patch-level labels",
            ));
        }
        if reference.labels.is_empty() {
            return Ok(());
        }
        match reference.granularity {
            Granularity::Patch if pred.labels.len() != reference.labels.len() => {
                return Err(Error::contract(format!(
                    "patch label counts differ: {} predicted vs {} reference",
                    pred.labels.len(),
                    reference.labels.len()
                )))
            }
            _ => {}
        }
        if !pred.labels.is_empty() && !reference.labels.keys().any(|k| pred.labels.contains_key(k))
        {
            return Err(Error::contract(
                "predicted and reference labels share no ids",
            ));
        }
        for (id, &r) in &reference.labels {
            if r > 3 {
                return Err(Error::contract(format!("reference level {r} for id {id}")));
            }
            // An object the prediction never labeled counts as predicted background.
            let p = pred.labels.get(id).copied().unwrap_or(0);
            let slot = &mut self.per_level[r as usize];
            slot.total += 1;
            slot.correct += usize::from(p == r);
        }
        Ok(())
    }

    fn report(&self, granularity: Granularity) -> AgreementReport {
        let per_level = self.per_level.map(|c| (c.total > 0).then_some(c));
        let overall = self
            .per_level
            .iter()
            .fold(CategoryAccuracy::default(), |acc, c| CategoryAccuracy {
                correct: acc.correct + c.correct,
                total: acc.total + c.total,
            });
        AgreementReport {
            granularity,
            per_level,
            overall,
        }
    }
}

/// Compares predicted labels with reference labels across a set of images.
///
/// Categories are the reference levels; an empty reference category is
/// reported as `None` and contributes nothing to the overall figure.
pub fn agreement(pairs: &[(LabelSet, LabelSet)]) -> Result<AgreementReport> {
    let granularity = pairs
        .first()
        .map(|p| p.1.granularity)
        .ok_or_else(|| Error::contract("no label pairs to compare"))?;
    let mut tally = Tally::default();
    for (pred, reference) in pairs {
        tally.add(pred, reference)?;
    }
    if tally.per_level.iter().all(|c| c.total == 0) {
        return Err(Error::contract("reference labels are empty"));
    }
    Ok(tally.report(granularity))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn objs(pairs: &[(i64, u8)]) -> LabelSet {
        LabelSet {
            granularity: Granularity::Object,
            labels: pairs.iter().cloned().collect(),
        }
    }

    #[test]
    fn identical_labels_agree_fully() {
        let x = objs(&[(1, 3), (2, 2), (3, 1), (4, 3)]);
        let r = agreement(&[(x.clone(), x)]).unwrap();
        for c in r.per_level[1..].iter() {
            assert_eq!(c.unwrap().accuracy(), 1.0);
        }
        assert!(r.per_level[0].is_none());
        assert_eq!(r.overall.accuracy(), 1.0);
    }

    #[test]
    fn three_of_four_high() {
        let reference = objs(&[(1, 3), (2, 3), (3, 3), (4, 3), (5, 1)]);
        let pred = objs(&[(1, 3), (2, 3), (3, 3), (4, 2), (5, 2)]);
        let r = agreement(&[(pred, reference)]).unwrap();
        assert_eq!(
            r.per_level[3].unwrap(),
            CategoryAccuracy {
                correct: 3,
                total: 4
            }
        );
        assert_eq!(r.per_level[3].unwrap().accuracy(), 0.75);
        assert_eq!(r.per_level[1].unwrap().accuracy(), 0.0);
        assert!(r.per_level[2].is_none());
        assert_eq!(
            r.overall,
            CategoryAccuracy {
                correct: 3,
                total: 5
            }
        );
        assert!(r.to_csv().contains("object,medium,0,0,N/A"));
    }

    #[test]
    fn missing_prediction_is_background() {
        let reference = objs(&[(1, 2), (2, 2)]);
        let pred = objs(&[(1, 2)]);
        let r = agreement(&[(pred, reference)]).unwrap();
        assert_eq!(
            r.per_level[2].unwrap(),
            CategoryAccuracy {
                correct: 1,
                total: 2
            }
        );
    }

    #[test]
    fn disjoint_ids_rejected() {
        assert!(agreement(&[(objs(&[(9, 1)]), objs(&[(1, 1)]))]).is_err());
        let p = LabelSet::patches(&PatchImportance::new(vec![0, 1]).unwrap());
        let q = LabelSet::patches(&PatchImportance::new(vec![0, 1, 2]).unwrap());
        assert!(agreement(&[(p, q)]).is_err());
    }
}
