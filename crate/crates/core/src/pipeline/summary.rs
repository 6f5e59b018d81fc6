use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::metrics::RunReport;

/// Aggregates of one `(method, snr)` cell, pooled over images and patches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CellSummary {
    pub images: usize,
    pub mean_cbr: f64,
    pub mean_sad: f64,
    /// Mean symbols per patch at each true importance level.
    pub mean_k: [Option<f64>; 4],
    /// Mean patch PSNR at each true importance level.
    pub mean_psnr: [Option<f64>; 4],
}

#[derive(Default)]
struct Sums {
    images: usize,
    cbr: f64,
    sad: f64,
    k: [(f64, usize); 4],
    psnr: [(f64, usize); 4],
}

fn mean(pair: (f64, usize)) -> Option<f64> {
    (pair.1 > 0).then(|| pair.0 / pair.1 as f64)
}

/// Groups reports by `(method, snr)`.
pub fn summarize(reports: &[RunReport]) -> BTreeMap<(String, String), CellSummary> {
    let mut acc: BTreeMap<(String, String), Sums> = BTreeMap::new();
    for r in reports {
        let s = acc.entry((r.method.clone(), r.snr_db.clone())).or_default();
        s.images += 1;
        s.cbr += r.cbr;
        s.sad += r.sad_db;
        for ((&l, &k), &p) in r.levels.iter().zip(&r.k).zip(&r.patch_psnr) {
            let l = l as usize;
            s.k[l].0 += f64::from(k);
            s.k[l].1 += 1;
            s.psnr[l].0 += p;
            s.psnr[l].1 += 1;
        }
    }
    acc.into_iter()
        .map(|(key, s)| {
            let n = s.images as f64;
            let cell = CellSummary {
                images: s.images,
                mean_cbr: s.cbr / n,
                mean_sad: s.sad / n,
                mean_k: s.k.map(mean),
                mean_psnr: s.psnr.map(mean),
            };
            (key, cell)
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

/// CSV with one row per `(method, snr)`.
pub fn summary_csv(cells: &BTreeMap<(String, String), CellSummary>) -> String {
    let mut out = String::from("method,snr_db,images,mean_cbr,mean_sad,k_bg,k_low,k_med,k_high,psnr_bg,psnr_low,psnr_med,psnr_high\n");
    for ((m, snr), c) in cells {
        let _ = write!(
            out,
            "{m},{snr},{},{:.6},{:.4}",
            c.images, c.mean_cbr, c.mean_sad
        );
        for v in c.mean_k.iter().chain(&c.mean_psnr) {
            let _ = write!(out, ",{}", opt(*v));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::CategoryPsnr;

    fn report(method: &str, k: Vec<u32>, psnr: Vec<f64>, levels: Vec<u8>, sad: f64) -> RunReport {
        RunReport {
            image_id: "a".into(),
            method: method.into(),
            snr_db: "10".into(),
            cbr: 0.5,
            sad_db: sad,
            psnr: CategoryPsnr {
                by_level: [None; 4],
                nonbackground: None,
            },
            k,
            rows: 1,
            cols: 2,
            patch_psnr: psnr,
            levels,
            config_fingerprint: String::new(),
        }
    }

    #[test]
    fn pools_patches_across_images() {
        let r = vec![
            report("x", vec![2, 8], vec![20.0, 30.0], vec![0, 3], 28.0),
            report("x", vec![4, 4], vec![22.0, 10.0], vec![0, 1], 16.0),
        ];
        let s = summarize(&r);
        let c = &s[&("x".to_string(), "10".to_string())];
        assert_eq!(c.images, 2);
        assert_eq!(c.mean_sad, 22.0);
        assert_eq!(c.mean_k, [Some(3.0), Some(4.0), None, Some(8.0)]);
        assert_eq!(c.mean_psnr[0], Some(21.0));
        assert!(summary_csv(&s)
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("x,10,2,0.500000,22.0000,3.0000,4.0000,NA,8.0000"));
    }
}
