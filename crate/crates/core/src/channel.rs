//! Power normalization, AWGN and the error-free side channel for `k`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::jscc_codec::SymbolStream;
use crate::numkit::{RngStream, Tape, Tensor, Var};

/// Channel SNR in dB; `inf` means a noiseless channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Snr(pub f64);

impl Snr {
    pub const NOISELESS: Snr = Snr(f64::INFINITY);

    /// Per-complex-symbol noise power under unit signal power.
    pub fn noise_variance(self) -> f64 {
        if self.0.is_infinite() && self.0 > 0.0 {
            0.0
        } else {
            10f64.powf(-self.0 / 10.0)
        }
    }

    pub fn parse(text: &str) -> Result<Snr> {
        let t = text.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("+inf") {
            return Ok(Snr::NOISELESS);
        }
        match t.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Snr(v)),
            _ => Err(Error::Config(format!(
                "SNR {text:?} is neither a number nor \"inf\""
            ))),
        }
    }
}

impl std::fmt::Display for Snr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Snr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Snr(v)),
            Raw::Text(t) => Snr::parse(&t).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub snr_db: Snr,
    pub seed: u64,
    pub side_channel_counted_in_cbr: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            snr_db: Snr(10.0),
            seed: 0,
            side_channel_counted_in_cbr: false,
        }
    }
}

/// Scales every symbol by `sqrt(Σk / Σ‖y‖²)` so the average symbol power is 1.
pub fn normalize_power(y: &SymbolStream) -> Result<SymbolStream> {
    let energy = y.energy();
    if !(energy > 0.0) || !energy.is_finite() {
        return Err(Error::contract(format!(
            "cannot normalize a symbol stream with energy {energy}"
        )));
    }
    let s = (y.total_symbols() as f64 / energy).sqrt();
    Ok(y.map_symbols(|[a, b]| [a * s, b * s]))
}

/// Circularly-symmetric complex Gaussian noise, `σ²/2` per real component.
pub fn awgn(y: &SymbolStream, snr: Snr, rng: &mut RngStream) -> SymbolStream {
    let std = (snr.noise_variance() / 2.0).sqrt();
    if std == 0.0 {
        return y.clone();
    }
    y.map_symbols(|[a, b]| {
        let na: f64 = StandardNormal.sample(rng);
        let nb: f64 = StandardNormal.sample(rng);
        [a + std * na, b + std * nb]
    })
}

/// What the receiver learns about `k`, and what it cost.
#[derive(Clone, Debug, PartialEq)]
pub struct SideChannel {
    pub k: Vec<u32>,
    pub overhead_bits: f64,
}

/// Delivers `k` unchanged; the cost is `L · log2 |V|` bits.
pub fn side_channel(k: &[u32], v_len: usize) -> SideChannel {
    SideChannel {
        k: k.to_vec(),
        overhead_bits: k.len() as f64 * (v_len as f64).log2(),
    }
}

/// Differentiable power normalization of masked `[L, 2·max V]` rows.
pub fn normalize_power_tape(tape: &mut Tape, y: Var, total_symbols: u64) -> Result<Var> {
    let sq = tape.mul(y, y)?;
    let energy = tape.sum(sq);
    if !(tape.value(energy).item() > 0.0) {
        return Err(Error::Training(
            "encoder produced an all-zero symbol stream".into(),
        ));
    }
    let log_e = tape.log(energy)?;
    let log_s = tape.scale(log_e, -0.5);
    let log_s = tape.add_scalar(log_s, 0.5 * (total_symbols as f64).ln());
    let s = tape.exp(log_s);
    tape.mul_scalar_var(y, s)
}

/// Noise for masked rows: zero where `mask` is zero.
pub fn noise_tensor(mask: &Tensor, snr: Snr, rng: &mut RngStream) -> Tensor {
    let std = (snr.noise_variance() / 2.0).sqrt();
    let data = mask
        .data()
        .iter()
        .map(|&m| {
            if m == 0.0 || std == 0.0 {
                0.0
            } else {
                let n: f64 = StandardNormal.sample(rng);
                std * n
            }
        })
        .collect();
    Tensor::new(mask.shape().to_vec(), data).expect("same shape as mask")
}
