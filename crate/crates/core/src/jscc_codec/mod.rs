//! Variable-length JSCC: entropy- and importance-driven rate allocation and a
//! rate-token-conditioned encoder/decoder pair.

mod rate;
mod stream;

pub use rate::{allocate, c1, c2, quantize_rate, Allocation, RateConfig};
pub use stream::{Complex, SymbolStream};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hv_codec::weighted_distortion;
use crate::importance::ImportanceWeights;
use crate::numkit::nn::{LayerNorm, Linear, TransformerBlock};
use crate::numkit::{Bound, ParamId, ParamStore, RngStream, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JsccConfig {
    /// Number of patches per image.
    pub patches: usize,
    /// Latent dimension per patch (matches the hyperprior codec).
    pub c: usize,
    pub c_tok: usize,
    pub c_fixed: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub n_e: usize,
    pub n_d: usize,
    pub lambda_jscc: f64,
    /// Gain of the latents this pair carries; inputs are divided by it and
    /// outputs multiplied, so the networks work at unit scale.
    pub latent_scale: f64,
    pub rate: RateConfig,
}

impl Default for JsccConfig {
    fn default() -> Self {
        JsccConfig {
            patches: 36,
            c: 16,
            c_tok: 8,
            c_fixed: 32,
            embed_dim: 32,
            heads: 2,
            n_e: 1,
            n_d: 1,
            lambda_jscc: 1e-3,
            latent_scale: 16.0,
            rate: RateConfig::toy(),
        }
    }
}

impl JsccConfig {
    pub fn validate(&self) -> Result<()> {
        self.rate.validate()?;
        if [
            self.patches,
            self.c,
            self.c_tok,
            self.c_fixed,
            self.embed_dim,
        ]
        .contains(&0)
        {
            return Err(Error::Config("jscc: zero-width layer".into()));
        }
        if !(self.lambda_jscc >= 0.0) {
            return Err(Error::Config(
                "jscc: lambda_jscc must be non-negative".into(),
            ));
        }
        if !(self.latent_scale > 0.0 && self.latent_scale.is_finite()) {
            return Err(Error::Config("jscc: latent_scale must be positive".into()));
        }
        Ok(())
    }

    /// Reals emitted per patch before masking.
    pub fn head_width(&self) -> usize {
        2 * self.rate.max_k() as usize
    }
}

/// One learnable embedding per element of `V`.
#[derive(Clone, Debug)]
pub struct RateTokenBank {
    pub table: ParamId,
    values: Vec<u32>,
}

impl RateTokenBank {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rate: &RateConfig,
        dim: usize,
        rng: &mut RngStream,
    ) -> Self {
        RateTokenBank {
            table: store.normal(format!("{name}.tokens"), &[rate.v.len(), dim], 1.0, rng),
            values: rate.v.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Table rows for each `k_i`; unknown rates are rejected.
    pub fn indices(&self, k: &[u32]) -> Result<Vec<usize>> {
        k.iter()
            .map(|&ki| {
                self.values
                    .binary_search(&ki)
                    .map_err(|_| Error::contract(format!("no rate token for k = {ki}")))
            })
            .collect()
    }

    pub fn gather(&self, tape: &mut Tape, p: &Bound, k: &[u32]) -> Result<Var> {
        let idx = self.indices(k)?;
        tape.gather_rows(p.var(self.table), &idx)
    }
}

#[derive(Clone, Debug)]
struct Trunk {
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl Trunk {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &JsccConfig,
        depth: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|b| {
                TransformerBlock::new(
                    store,
                    &format!("{name}.block{b}"),
                    cfg.embed_dim,
                    cfg.heads,
                    2,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trunk {
            pos: store.normal(
                format!("{name}.pos"),
                &[cfg.patches, cfg.embed_dim],
                0.02,
                rng,
            ),
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.embed_dim),
        })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
        let mut h = tape.add(h, p.var(self.pos))?;
        for b in &self.blocks {
            h = b.forward(tape, p, h)?;
        }
        self.norm.forward(tape, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct JsccModel {
    pub cfg: JsccConfig,
    pub store: ParamStore,
    enc_tokens: RateTokenBank,
    enc_in: Linear,
    enc_trunk: Trunk,
    enc_head: Linear,
    dec_fixed: Linear,
    dec_tokens: RateTokenBank,
    dec_in: Linear,
    dec_trunk: Trunk,
    dec_out: Linear,
}

impl JsccModel {
    pub fn new(cfg: JsccConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (d, hw) = (cfg.embed_dim, cfg.head_width());
        let enc_tokens = RateTokenBank::new(s, "jscc.enc", &cfg.rate, cfg.c_tok, rng);
        let enc_in = Linear::new(s, "jscc.enc.in", cfg.c + cfg.c_tok, d, rng);
        let enc_trunk = Trunk::new(s, "jscc.enc", &cfg, cfg.n_e, rng)?;
        let enc_head = Linear::new(s, "jscc.enc.head", d, hw, rng);
        let dec_fixed = Linear::new(s, "jscc.dec.fixed", hw, cfg.c_fixed, rng);
        let dec_tokens = RateTokenBank::new(s, "jscc.dec", &cfg.rate, cfg.c_tok, rng);
        let dec_in = Linear::new(s, "jscc.dec.in", cfg.c_fixed + cfg.c_tok, d, rng);
        let dec_trunk = Trunk::new(s, "jscc.dec", &cfg, cfg.n_d, rng)?;
        let dec_out = Linear::new(s, "jscc.dec.out", d, cfg.c, rng);
        Ok(JsccModel {
            cfg,
            store,
            enc_tokens,
            enc_in,
            enc_trunk,
            enc_head,
            dec_fixed,
            dec_tokens,
            dec_in,
            dec_trunk,
            dec_out,
        })
    }

    pub fn from_store(cfg: JsccConfig, saved: &ParamStore) -> Result<Self> {
        let mut m = JsccModel::new(cfg, &mut RngStream::new(0))?;
        let loaded = m.store.load_from(saved)?;
        if loaded != m.store.len() {
            return Err(Error::contract(format!(
                "jscc checkpoint provides {loaded} of {} parameters",
                m.store.len()
            )));
        }
        Ok(m)
    }

    pub fn token_bank(&self) -> &RateTokenBank {
        &self.enc_tokens
    }

    /// `[L, 2·max V]` mask keeping the first `2·k_i` entries of row `i`.
    pub fn mask(&self, k: &[u32]) -> Result<Tensor> {
        self.check_k(k)?;
        let hw = self.cfg.head_width();
        let mut m = vec![0.0; k.len() * hw];
        for (i, &ki) in k.iter().enumerate() {
            m[i * hw..i * hw + 2 * ki as usize]
                .iter_mut()
                .for_each(|v| *v = 1.0);
        }
        Tensor::matrix(k.len(), hw, m)
    }

    fn check_k(&self, k: &[u32]) -> Result<()> {
        if k.len() != self.cfg.patches {
            return Err(Error::contract(format!(
                "{} rates for {} patches",
                k.len(),
                self.cfg.patches
            )));
        }
        self.enc_tokens.indices(k).map(|_| ())
    }

    /// Masked channel input `[L, 2·max V]`; entries past `2·k_i` are zero.
    pub fn encode_tape(&self, tape: &mut Tape, p: &Bound, x: Var, k: &[u32]) -> Result<Var> {
        let mask = tape.constant(self.mask(k)?);
        let tok = self.enc_tokens.gather(tape, p, k)?;
        let x = tape.scale(x, 1.0 / self.cfg.latent_scale);
        let h = tape.concat_cols(x, tok)?;
        let h = self.enc_in.forward(tape, p, h)?;
        let h = self.enc_trunk.forward(tape, p, h)?;
        let y = self.enc_head.forward(tape, p, h)?;
        tape.mul(y, mask)
    }

    /// Latent estimate `[L, c]` from masked received symbols.
    pub fn decode_tape(&self, tape: &mut Tape, p: &Bound, y_hat: Var, k: &[u32]) -> Result<Var> {
        self.check_k(k)?;
        let h = self.dec_fixed.forward(tape, p, y_hat)?;
        let tok = self.dec_tokens.gather(tape, p, k)?;
        let h = tape.concat_cols(h, tok)?;
        let h = self.dec_in.forward(tape, p, h)?;
        let h = self.dec_trunk.forward(tape, p, h)?;
        let x = self.dec_out.forward(tape, p, h)?;
        Ok(tape.scale(x, self.cfg.latent_scale))
    }

    pub fn encode(&self, x: &Tensor, k: &[u32]) -> Result<SymbolStream> {
        if x.shape() != [self.cfg.patches, self.cfg.c] {
            return Err(Error::contract(format!(
                "latent shape {:?}, expected [{}, {}]",
                x.shape(),
                self.cfg.patches,
                self.cfg.c
            )));
        }
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.encode_tape(&mut tape, &p, xv, k)?;
        Ok(unpack(tape.value(y), k, self.cfg.head_width()))
    }

    pub fn decode(&self, y_hat: &SymbolStream) -> Result<Tensor> {
        let k = y_hat.k();
        let packed = pack(y_hat, self.cfg.head_width());
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let yv = tape.constant(packed?);
        let x = self.decode_tape(&mut tape, &p, yv, k)?;
        Ok(tape.value(x).clone())
    }
}

/// Masked `[L, 2·max V]` rows to a symbol stream.
pub fn unpack(y: &Tensor, k: &[u32], width: usize) -> SymbolStream {
    let symbols = k
        .iter()
        .enumerate()
        .map(|(i, &ki)| {
            (0..ki as usize)
                .map(|j| [y.data()[i * width + 2 * j], y.data()[i * width + 2 * j + 1]])
                .collect()
        })
        .collect();
    SymbolStream::new(k.to_vec(), symbols).expect("lengths follow k")
}

/// Symbol stream to zero-padded `[L, width]` rows.
pub fn pack(s: &SymbolStream, width: usize) -> Result<Tensor> {
    let l = s.patches();
    let mut data = vec![0.0; l * width];
    for (i, row) in s.symbols().iter().enumerate() {
        if 2 * row.len() > width {
            return Err(Error::contract(format!(
                "patch {i} carries {} symbols, more than {}",
                row.len(),
                width / 2
            )));
        }
        for (j, [re, im]) in row.iter().enumerate() {
            data[i * width + 2 * j] = *re;
            data[i * width + 2 * j + 1] = *im;
        }
    }
    Tensor::matrix(l, width, data)
}

/// `λ · Σ continuous rates + D_SA(S, Ŝ)`; `rate_sum` is a scalar tape value.
pub fn jscc_loss(
    tape: &mut Tape,
    s: Var,
    s_hat: Var,
    rate_sum: Var,
    lambda: f64,
    weights: &ImportanceWeights,
) -> Result<Var> {
    let d = weighted_distortion(tape, s, s_hat, weights)?;
    let r = tape.scale(rate_sum, lambda);
    tape.add(r, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> JsccConfig {
        JsccConfig {
            patches: 4,
            c: 3,
            c_tok: 2,
            c_fixed: 5,
            embed_dim: 4,
            heads: 1,
            ..Default::default()
        }
    }

    fn latent(seed: u64, cfg: &JsccConfig) -> Tensor {
        let mut rng = RngStream::new(seed);
        Tensor::matrix(
            cfg.patches,
            cfg.c,
            (0..cfg.patches * cfg.c)
                .map(|_| rng.uniform() * 4.0 - 2.0)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn lengths_follow_k() {
        let cfg = small();
        let m = JsccModel::new(cfg.clone(), &mut RngStream::new(1)).unwrap();
        let x = latent(2, &cfg);
        let a = m.encode(&x, &[2, 4, 16, 8]).unwrap();
        assert_eq!(
            a.symbols().iter().map(Vec::len).collect::<Vec<_>>(),
            vec![2, 4, 16, 8]
        );
        let b = m.encode(&x, &[2, 4, 14, 8]).unwrap();
        assert_eq!(b.symbols()[2].len(), 14);
        for i in [0, 1, 3] {
            assert_eq!(a.symbols()[i].len(), b.symbols()[i].len());
        }
        assert_eq!(a, m.encode(&x, &[2, 4, 16, 8]).unwrap());
        assert!(m.encode(&x, &[2, 4, 5, 8]).is_err());
        let xh = m.decode(&a).unwrap();
        assert_eq!(xh.shape(), &[4, 3]);
        assert_eq!(xh, m.decode(&a).unwrap());
    }

    #[test]
    fn token_bank_has_distinct_rows() {
        let m = JsccModel::new(small(), &mut RngStream::new(3)).unwrap();
        let bank = m.token_bank();
        assert_eq!(bank.len(), 8);
        let idx = bank.indices(&[2, 4, 6, 8, 10, 12, 14, 16]).unwrap();
        assert_eq!(idx, (0..8).collect::<Vec<_>>());
        let t = m.store.get(bank.table);
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(t.row(i), t.row(j));
            }
        }
    }

    #[test]
    fn loss_terms() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
        let k = Tensor::from_vec(vec![16.0, 32.0]);
        let l1: f64 = k.data().iter().map(|v| v.abs()).sum();
        assert_eq!(l1, 48.0);
        let r = tape.constant(Tensor::scalar(l1));
        let w = ImportanceWeights::uniform(1);
        let loss = jscc_loss(&mut tape, s, s, r, 0.5, &w).unwrap();
        assert_eq!(tape.value(loss).item(), 24.0);
        let r2 = tape.constant(Tensor::scalar(l1 + 8.0));
        let loss2 = jscc_loss(&mut tape, s, s, r2, 1.0, &w).unwrap();
        let loss1 = jscc_loss(&mut tape, s, s, r, 1.0, &w).unwrap();
        assert_eq!(tape.value(loss2).item() - tape.value(loss1).item(), 8.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_shapes(idx in proptest::collection::vec(0usize..8, 4)) {
            let cfg = small();
            let m = JsccModel::new(cfg.clone(), &mut RngStream::new(5)).unwrap();
            let k: Vec<u32> = idx.iter().map(|&i| cfg.rate.v[i]).collect();
            let y = m.encode(&latent(1, &cfg), &k).unwrap();
            prop_assert_eq!(y.k(), &k[..]);
            prop_assert!(y.symbols().iter().zip(&k).all(|(s, &ki)| s.len() == ki as usize));
            let xh = m.decode(&y).unwrap();
            prop_assert_eq!(xh.shape(), &[4, 3]);
        }
    }
}
