use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rate allocation parameters: `k_i = Q0[η·e_i + C2(I_i)]` over the set `V`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateConfig {
    /// Symbols per bit of estimated entropy.
    pub eta: f64,
    /// Importance offset, in symbols.
    pub alpha: f64,
    /// Allowed per-patch symbol counts, strictly increasing.
    pub v: Vec<u32>,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig::toy()
    }
}

impl RateConfig {
    /// `V = {2, 4, …, 16}`, α one step.
    pub fn toy() -> Self {
        RateConfig {
            eta: 0.05,
            alpha: 2.0,
            v: (1..=8).map(|i| 2 * i).collect(),
        }
    }

    /// `V = {16, 32, …, 256}`, α one step.
    pub fn full_scale() -> Self {
        RateConfig {
            eta: 1.0,
            alpha: 16.0,
            v: (1..=16).map(|i| 16 * i).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.v.is_empty() || self.v[0] == 0 {
            return Err(Error::Config(
                "rate set V must be non-empty and positive".into(),
            ));
        }
        if self.v.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "rate set V {:?} is not strictly increasing",
                self.v
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        let span = f64::from(self.max_k() - self.min_k());
        if !(self.alpha >= 0.0 && self.alpha <= span) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, {span}]",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn min_k(&self) -> u32 {
        self.v[0]
    }

    pub fn max_k(&self) -> u32 {
        *self.v.last().expect("validated non-empty")
    }

    /// Position of `k` in `V`.
    pub fn index_of(&self, k: u32) -> Result<usize> {
        self.v
            .binary_search(&k)
            .map_err(|_| Error::contract(format!("rate {k} is not in V {:?}", self.v)))
    }
}

pub fn c1(e: f64, eta: f64) -> f64 {
    eta * e
}

pub fn c2(level: u8, alpha: f64) -> Result<f64> {
    match level {
        3 => Ok(alpha),
        2 | 0 => Ok(0.0),
        1 => Ok(-alpha),
        _ => Err(Error::contract(format!(
            "importance level {level} is not in 0..=3"
        ))),
    }
}

/// Nearest element of `v` (sorted), clamping at both ends; exact midpoints
/// go to the smaller element.
pub fn quantize_rate(r: f64, v: &[u32]) -> u32 {
    let idx = v.partition_point(|&x| f64::from(x) < r);
    if idx == 0 {
        return v[0];
    }
    if idx == v.len() {
        return v[v.len() - 1];
    }
    let (lo, hi) = (v[idx - 1], v[idx]);
    if hi as f64 - r < r - lo as f64 {
        hi
    } else {
        lo
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    pub k: Vec<u32>,
    /// Pre-quantization rates `C1 + C2`.
    pub continuous: Vec<f64>,
}

pub fn allocate(e: &[f64], levels: &[u8], cfg: &RateConfig) -> Result<Allocation> {
    if e.len() != levels.len() {
        return Err(Error::contract(format!(
            "{} entropies for {} importance levels",
            e.len(),
            levels.len()
        )));
    }
    let continuous = e
        .iter()
        .zip(levels)
        .map(|(&ei, &l)| Ok(c1(ei, cfg.eta) + c2(l, cfg.alpha)?))
        .collect::<Result<Vec<f64>>>()?;
    let k = continuous
        .iter()
        .map(|&r| quantize_rate(r, &cfg.v))
        .collect();
    Ok(Allocation { k, continuous })
}
