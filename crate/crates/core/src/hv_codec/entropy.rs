use crate::error::{Error, Result};
use crate::numkit::{gaussian_cdf, Bound, ParamId, ParamStore, RngStream, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Additive uniform noise stands in for rounding.
    Train,
    /// Hard rounding; fully deterministic.
    Infer,
}

/// Uniform-noise relaxation in training, round-half-away-from-zero otherwise.
pub fn relax_quantize(v: &[f64], mode: Mode, rng: &mut RngStream) -> Vec<f64> {
    match mode {
        Mode::Train => v.iter().map(|x| x + rng.uniform() - 0.5).collect(),
        Mode::Infer => v.iter().map(|x| x.round()).collect(),
    }
}

/// Mass of the unit bin centred at `x` under `N(mu, sigma²)`.
///
/// Evaluated on the lower tail (`|x − mu|` folded) so that far-out bins do not
/// cancel to zero; floored at `p_min`.
pub fn conditional_bin_prob(x: f64, mu: f64, sigma: f64, p_min: f64) -> f64 {
    let d = (x - mu).abs();
    let p = gaussian_cdf((0.5 - d) / sigma) - gaussian_cdf((-0.5 - d) / sigma);
    p.max(p_min)
}

/// Per-patch information content in bits: `e_i = Σ_j −log2 p_ij` over the
/// `c` consecutive probabilities of patch `i`.
pub fn sa_entropy(probs: &[f64], c: usize) -> Result<Vec<f64>> {
    if c == 0 || !probs.len().is_multiple_of(c) {
        return Err(Error::contract(format!(
            "{} probabilities do not split into patches of {c}",
            probs.len()
        )));
    }
    Ok(probs
        .chunks(c)
        .map(|p| p.iter().map(|&q| -q.log2()).sum::<f64>().max(0.0))
        .collect())
}

/// Tape version of [`conditional_bin_prob`] returning `−log2 p` elementwise.
pub fn gaussian_bits(tape: &mut Tape, x: Var, mu: Var, sigma: Var, p_min: f64) -> Result<Var> {
    let d = tape.sub(x, mu)?;
    let d = tape.abs(d);
    let inv = tape.log(sigma)?;
    let inv = tape.scale(inv, -1.0);
    let inv = tape.exp(inv);
    let nd = tape.scale(d, -1.0);
    let up = tape.add_scalar(nd, 0.5);
    let up = tape.mul(up, inv)?;
    let lo = tape.add_scalar(nd, -0.5);
    let lo = tape.mul(lo, inv)?;
    let up = tape.normal_cdf(up);
    let lo = tape.normal_cdf(lo);
    let p = tape.sub(up, lo)?;
    let p = tape.clamp_min(p, p_min);
    let l = tape.log(p)?;
    Ok(tape.scale(l, -1.0 / std::f64::consts::LN_2))
}

/// Per-channel learned CDF built from monotone layers: each layer is an affine
/// map with softplus-positive matrix followed by `x + tanh(a)·tanh(x)`, and a
/// final sigmoid.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    pub channels: usize,
    layers: Vec<Vec<PriorLayer>>,
}

#[derive(Clone, Debug)]
struct PriorLayer {
    matrix: ParamId,
    bias: ParamId,
    factor: Option<ParamId>,
}

impl FactorizedPrior {
    /// `filters` are the hidden widths, e.g. `[3, 3, 3]`; `init_scale` sets the
    /// initial spread of the density.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        filters: &[usize],
        init_scale: f64,
        rng: &mut RngStream,
    ) -> Self {
        let mut widths = vec![1];
        widths.extend_from_slice(filters);
        widths.push(1);
        let n = widths.len() - 1;
        let scale = init_scale.powf(1.0 / n as f64);
        let mut layers = Vec::with_capacity(channels);
        for ch in 0..channels {
            let mut per = Vec::with_capacity(n);
            for l in 0..n {
                let (din, dout) = (widths[l], widths[l + 1]);
                let init = (1.0 / scale / dout as f64).exp_m1().ln();
                let matrix = store.insert(
                    format!("{name}.c{ch}.l{l}.matrix"),
                    Tensor::full(&[din, dout], init),
                );
                let bias = store.normal(format!("{name}.c{ch}.l{l}.bias"), &[dout], 0.5, rng);
                let factor =
                    (l + 1 < n).then(|| store.zeros(format!("{name}.c{ch}.l{l}.factor"), &[dout]));
                per.push(PriorLayer {
                    matrix,
                    bias,
                    factor,
                });
            }
            layers.push(per);
        }
        FactorizedPrior { channels, layers }
    }

    fn logits_value(&self, store: &ParamStore, ch: usize, x: f64) -> f64 {
        let mut h = vec![x];
        for layer in &self.layers[ch] {
            let m = store.get(layer.matrix);
            let (din, dout) = m.dims2().expect("prior matrix is 2-d");
            let b = store.get(layer.bias).data();
            let mut out = b.to_vec();
            for (i, hi) in h.iter().enumerate().take(din) {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += hi * softplus(m.data()[i * dout + j]);
                }
            }
            if let Some(f) = layer.factor {
                for (o, a) in out.iter_mut().zip(store.get(f).data()) {
                    *o += a.tanh() * o.tanh();
                }
            }
            h = out;
        }
        h[0]
    }

    /// Learned CDF of channel `ch` at `x`.
    pub fn cdf(&self, store: &ParamStore, ch: usize, x: f64) -> f64 {
        sigmoid(self.logits_value(store, ch, x))
    }

    /// Bin masses for `z` laid out `[channels, n]`, floored at `p_min`.
    pub fn probs(&self, store: &ParamStore, z: &[f64], p_min: f64) -> Result<Vec<f64>> {
        let n = self.per_channel(z.len())?;
        let mut out = Vec::with_capacity(z.len());
        for (i, &v) in z.iter().enumerate() {
            let ch = i / n;
            let mass = self.cdf(store, ch, v + 0.5) - self.cdf(store, ch, v - 0.5);
            if mass < 0.0 {
                return Err(Error::Training(format!(
                    "entropy model CDF of channel {ch} is not monotone at {v}"
                )));
            }
            out.push(mass.max(p_min));
        }
        Ok(out)
    }

    fn per_channel(&self, len: usize) -> Result<usize> {
        if !len.is_multiple_of(self.channels) {
            return Err(Error::contract(format!(
                "{len} hyper-latents for {} channels",
                self.channels
            )));
        }
        Ok(len / self.channels)
    }

    fn logits_tape(&self, tape: &mut Tape, p: &Bound, ch: usize, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers[ch] {
            let m = tape.softplus(p.var(layer.matrix));
            h = tape.matmul(h, m)?;
            h = tape.add_bias(h, p.var(layer.bias))?;
            if let Some(f) = layer.factor {
                let a = tape.tanh(p.var(f));
                let t = tape.tanh(h);
                let t = tape.mul_row(t, a)?;
                h = tape.add(h, t)?;
            }
        }
        Ok(h)
    }

    /// Total `−log2 p(z)` over a `[channels, n]` tensor.
    pub fn bits(&self, tape: &mut Tape, p: &Bound, z: Var, p_min: f64) -> Result<Var> {
        let total = tape.value(z).len();
        let n = self.per_channel(total)?;
        let z = tape.reshape(z, &[total, 1])?;
        let z = tape.transpose(z)?;
        let mut sum: Option<Var> = None;
        for ch in 0..self.channels {
            let zc = tape.slice_cols(z, ch * n, (ch + 1) * n)?;
            let zc = tape.transpose(zc)?;
            let up = tape.add_scalar(zc, 0.5);
            let lo = tape.add_scalar(zc, -0.5);
            let up = self.logits_tape(tape, p, ch, up)?;
            let lo = self.logits_tape(tape, p, ch, lo)?;
            let up = tape.sigmoid(up);
            let lo = tape.sigmoid(lo);
            let mass = tape.sub(up, lo)?;
            let mass = tape.clamp_min(mass, p_min);
            let l = tape.log(mass)?;
            let l = tape.sum(l);
            sum = Some(match sum {
                None => l,
                Some(s) => tape.add(s, l)?,
            });
        }
        let s = sum.ok_or_else(|| Error::contract("prior with zero channels"))?;
        Ok(tape.scale(s, -1.0 / std::f64::consts::LN_2))
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
