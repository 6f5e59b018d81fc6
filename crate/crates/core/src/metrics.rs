//! Bandwidth ratio, importance-weighted PSNR, per-category PSNR and report files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{ImportanceWeights, PatchImportance};
use crate::scene::{cap_psnr, grid_psnr, io::write_pgm, PatchGrid};

/// Channel bandwidth ratio `Σk / (3·h·w)`.
pub fn cbr(k: &[u32], height: usize, width: usize) -> Result<f64> {
    if height == 0 || width == 0 {
        return Err(Error::contract("cbr of an empty image"));
    }
    let total: u64 = k.iter().map(|&v| u64::from(v)).sum();
    if total == 0 {
        log::warn!("cbr: no channel symbols allocated");
    }
    Ok(total as f64 / (3 * height * width) as f64)
}

/// Capped per-patch PSNR between two grids.
pub fn patch_psnrs(s: &PatchGrid, s_hat: &PatchGrid) -> Result<Vec<f64>> {
    Ok(grid_psnr(s, s_hat)?.into_iter().map(cap_psnr).collect())
}

/// `Σ w_i · PSNR_i` for already-capped PSNR values.
pub fn weighted_psnr(psnr: &[f64], weights: &ImportanceWeights) -> Result<f64> {
    if psnr.len() != weights.len() {
        return Err(Error::contract(format!(
            "{} PSNR values for {} weights",
            psnr.len(),
            weights.len()
        )));
    }
    Ok(psnr
        .iter()
        .zip(weights.as_slice())
        .map(|(p, w)| p * w)
        .sum())
}

/// `Σ 2^{I_i} PSNR_i / Σ 2^{I_i}`; the same value as [`weighted_psnr`] with
/// normalized weights, but the division happens once so integer-valued
/// inputs stay exact.
pub fn sad_from_psnr(psnr: &[f64], levels: &PatchImportance) -> Result<f64> {
    if psnr.len() != levels.len() || psnr.is_empty() {
        return Err(Error::contract(format!(
            "{} PSNR values for {} labels",
            psnr.len(),
            levels.len()
        )));
    }
    let (num, den) = psnr
        .iter()
        .zip(levels.levels())
        .fold((0.0, 0.0), |(n, d), (p, &l)| {
            let w = f64::from(1u32 << l);
            (n + w * p, d + w)
        });
    Ok(num / den)
}

/// Importance-weighted PSNR in dB.
pub fn sad(s: &PatchGrid, s_hat: &PatchGrid, levels: &PatchImportance) -> Result<f64> {
    sad_from_psnr(&patch_psnrs(s, s_hat)?, levels)
}

/// Mean PSNR per importance level; `None` where a level has no patch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryPsnr {
    /// Indexed by level: 0 background … 3 high.
    pub by_level: [Option<f64>; 4],
    /// Mean over every patch of levels 1–3.
    pub nonbackground: Option<f64>,
}

pub fn category_psnr_from(psnr: &[f64], levels: &PatchImportance) -> Result<CategoryPsnr> {
    if psnr.len() != levels.len() {
        return Err(Error::contract(format!(
            "{} PSNR values for {} labels",
            psnr.len(),
            levels.len()
        )));
    }
    let mean_where = |keep: &dyn Fn(u8) -> bool| {
        let vals: Vec<f64> = psnr
            .iter()
            .zip(levels.levels())
            .filter(|(_, &l)| keep(l))
            .map(|(p, _)| *p)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let by_level = [0u8, 1, 2, 3].map(|lv| mean_where(&|l| l == lv));
    Ok(CategoryPsnr {
        by_level,
        nonbackground: mean_where(&|l| l > 0),
    })
}

pub fn category_psnr(
    s: &PatchGrid,
    s_hat: &PatchGrid,
    levels: &PatchImportance,
) -> Result<CategoryPsnr> {
    category_psnr_from(&patch_psnrs(s, s_hat)?, levels)
}

/// Outcome of transmitting one image with one method at one SNR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub image_id: String,
    pub method: String,
    pub snr_db: String,
    pub cbr: f64,
    pub sad_db: f64,
    pub psnr: CategoryPsnr,
    /// Symbols per patch in raster order.
    pub k: Vec<u32>,
    pub rows: usize,
    pub cols: usize,
    /// Per-patch (capped) PSNR, raster order.
    pub patch_psnr: Vec<f64>,
    pub levels: Vec<u8>,
    pub config_fingerprint: String,
}

pub const CSV_HEADER: [&str; 10] = [
    "image_id",
    "method",
    "snr_db",
    "cbr",
    "sad_db",
    "psnr_high",
    "psnr_med",
    "psnr_low",
    "psnr_bg",
    "psnr_nonbg",
];

const NA: &str = "NA";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| x.to_string())
}

/// One CSV line of a report, as written by [`write_csv`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub image_id: String,
    pub method: String,
    pub snr_db: String,
    pub cbr: f64,
    pub sad_db: f64,
    pub psnr: CategoryPsnr,
}

impl From<&RunReport> for ReportRow {
    fn from(r: &RunReport) -> Self {
        ReportRow {
            image_id: r.image_id.clone(),
            method: r.method.clone(),
            snr_db: r.snr_db.clone(),
            cbr: r.cbr,
            sad_db: r.sad_db,
            psnr: r.psnr,
        }
    }
}

pub fn write_csv(reports: &[RunReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::format("report csv", e.to_string());
    w.write_record(CSV_HEADER).map_err(io_err)?;
    for r in reports {
        let p = r.psnr.by_level;
        w.write_record([
            r.image_id.clone(),
            r.method.clone(),
            r.snr_db.clone(),
            r.cbr.to_string(),
            r.sad_db.to_string(),
            fmt_opt(p[3]),
            fmt_opt(p[2]),
            fmt_opt(p[1]),
            fmt_opt(p[0]),
            fmt_opt(r.psnr.nonbackground),
        ])
        .map_err(io_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format("report csv", e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::format("report csv", format!("{}: {e}", path.display())))?;
    let bad = |d: String| Error::format("report csv", format!("{}: {d}", path.display()));
    let header: Vec<String> = r
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != CSV_HEADER {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| bad(format!("bad number {s:?}")))
    };
    let opt = |s: &str| if s == NA { Ok(None) } else { num(s).map(Some) };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let f: Vec<&str> = rec.iter().collect();
        out.push(ReportRow {
            image_id: f[0].into(),
            method: f[1].into(),
            snr_db: f[2].into(),
            cbr: num(f[3])?,
            sad_db: num(f[4])?,
            psnr: CategoryPsnr {
                by_level: [opt(f[8])?, opt(f[7])?, opt(f[6])?, opt(f[5])?],
                nonbackground: opt(f[9])?,
            },
        });
    }
    Ok(out)
}

/// Gray level per patch, `round(255 · k / k_max)`, upscaled by `scale` pixels.
pub fn heatmap(k: &[u32], rows: usize, cols: usize, k_max: u32, scale: usize) -> Result<Vec<u8>> {
    if k.len() != rows * cols || k_max == 0 || scale == 0 {
        return Err(Error::contract(format!(
            "heatmap of {} values for a {rows}x{cols} grid",
            k.len()
        )));
    }
    let (h, w) = (rows * scale, cols * scale);
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = f64::from(k[(y / scale) * cols + x / scale]) / f64::from(k_max);
            out[y * w + x] = (255.0 * v).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

pub fn write_heatmap(report: &RunReport, k_max: u32, scale: usize, path: &Path) -> Result<()> {
    let g = heatmap(&report.k, report.rows, report.cols, k_max, scale)?;
    write_pgm(&g, report.rows * scale, report.cols * scale, path)
}
