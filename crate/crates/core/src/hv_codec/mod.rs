//! Hyperprior vectorization: per-patch latents, a scale/mean hyperprior and
//! the per-patch entropy estimate that drives rate allocation.

mod entropy;

pub use entropy::{
    conditional_bin_prob, gaussian_bits, relax_quantize, sa_entropy, FactorizedPrior, Mode,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceWeights;
use crate::numkit::nn::{Conv2d, LayerNorm, Linear, TransformerBlock};
use crate::numkit::{Bound, ParamId, ParamStore, RngStream, Tape, Tensor, Var};
use crate::scene::{GridShape, PatchGrid, MAX_PIXEL};

/// Name prefix of the factorized-prior parameters inside an [`HvModel`] store.
pub const PRIOR_PREFIX: &str = "hv.prior";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HvConfig {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub n1_blocks: usize,
    /// Latent dimension per patch.
    pub c: usize,
    pub hyper_channels: usize,
    pub prior_filters: Vec<usize>,
    pub sigma_min: f64,
    pub p_min: f64,
    pub lambda_hv: f64,
    pub quantize_around_mean: bool,
    /// Fixed gain between the analysis output and the quantized latent, so
    /// the unit quantization step is fine relative to the signal from the
    /// first update on.
    pub latent_scale: f64,
}

impl Default for HvConfig {
    fn default() -> Self {
        HvConfig {
            patch_size: 8,
            rows: 6,
            cols: 6,
            embed_dim: 32,
            heads: 2,
            n1_blocks: 1,
            c: 16,
            hyper_channels: 8,
            prior_filters: vec![3, 3, 3],
            sigma_min: 1e-2,
            p_min: 1e-9,
            lambda_hv: 0.01,
            quantize_around_mean: true,
            latent_scale: 16.0,
        }
    }
}

impl HvConfig {
    pub fn grid(&self) -> GridShape {
        GridShape {
            patch_size: self.patch_size,
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("hv: empty patch grid".into()));
        }
        if !self.rows.is_multiple_of(2) || !self.cols.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "hv: the hyperprior halves the {}x{} patch grid; both sides must be even",
                self.rows, self.cols
            )));
        }
        if self.c == 0 || self.hyper_channels == 0 || self.embed_dim == 0 {
            return Err(Error::Config("hv: zero-width layer".into()));
        }
        if !(self.sigma_min > 0.0 && self.p_min > 0.0 && self.p_min < 1.0) {
            return Err(Error::Config(
                "hv: sigma_min and p_min must be positive (p_min < 1)".into(),
            ));
        }
        if !(self.lambda_hv >= 0.0) {
            return Err(Error::Config("hv: lambda_hv must be non-negative".into()));
        }
        if !(self.latent_scale > 0.0 && self.latent_scale.is_finite()) {
            return Err(Error::Config("hv: latent_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Values produced by [`HvModel::vectorize`], all `[L, c]` unless noted.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub x: Tensor,
    pub x_tilde: Tensor,
    /// `[hyper_channels, rows/2, cols/2]`.
    pub z: Tensor,
    pub z_tilde: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
    /// Per-patch information content in bits.
    pub e: Vec<f64>,
    pub hyper_bits: f64,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct HvPass {
    pub x: Var,
    pub x_tilde: Var,
    pub z: Var,
    pub z_tilde: Var,
    pub mu: Var,
    pub sigma: Var,
    /// `[L]` per-patch bits.
    pub e: Var,
    pub rate_x: Var,
    pub rate_z: Var,
}

#[derive(Clone, Debug)]
struct Stack {
    input: Linear,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    output: Linear,
}

impl Stack {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        cfg: &HvConfig,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let d = cfg.embed_dim;
        let blocks = (0..cfg.n1_blocks)
            .map(|b| {
                TransformerBlock::new(store, &format!("{name}.block{b}"), d, cfg.heads, 2, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Stack {
            input: Linear::new(store, &format!("{name}.in"), din, d, rng),
            pos: store.normal(format!("{name}.pos"), &[cfg.patches(), d], 0.02, rng),
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            output: Linear::new(store, &format!("{name}.out"), d, dout, rng),
        })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.input.forward(tape, p, x)?;
        let mut h = tape.add(h, p.var(self.pos))?;
        for b in &self.blocks {
            h = b.forward(tape, p, h)?;
        }
        let h = self.norm.forward(tape, p, h)?;
        self.output.forward(tape, p, h)
    }
}

/// Analysis/synthesis transforms, hyper-analysis/synthesis and the
/// factorized prior, all held in one parameter store.
#[derive(Clone, Debug)]
pub struct HvModel {
    pub cfg: HvConfig,
    pub store: ParamStore,
    fe: Stack,
    fd: Stack,
    he: [Conv2d; 2],
    hd: [Conv2d; 2],
    prior: FactorizedPrior,
}

impl HvModel {
    pub fn new(cfg: HvConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let (c, cz) = (cfg.c, cfg.hyper_channels);
        let fe = Stack::new(&mut store, "hv.fe", cfg.patch_dim(), c, &cfg, rng)?;
        let fd = Stack::new(&mut store, "hv.fd", c, cfg.patch_dim(), &cfg, rng)?;
        let he = [
            Conv2d::new(&mut store, "hv.he0", c, cz, 3, 1, 1, rng),
            Conv2d::new(&mut store, "hv.he1", cz, cz, 3, 2, 1, rng),
        ];
        let hd = [
            Conv2d::new(&mut store, "hv.hd0", cz, cz, 3, 1, 1, rng),
            Conv2d::new(&mut store, "hv.hd1", cz, 2 * c, 3, 1, 1, rng),
        ];
        let prior =
            FactorizedPrior::new(&mut store, PRIOR_PREFIX, cz, &cfg.prior_filters, 10.0, rng);
        Ok(HvModel {
            cfg,
            store,
            fe,
            fd,
            he,
            hd,
            prior,
        })
    }

    /// Rebuilds a model from its config and a checkpointed store; every
    /// parameter must be present with a matching shape.
    pub fn from_store(cfg: HvConfig, saved: &ParamStore) -> Result<Self> {
        let mut m = HvModel::new(cfg, &mut RngStream::new(0))?;
        let loaded = m.store.load_from(saved)?;
        if loaded != m.store.len() {
            return Err(Error::contract(format!(
                "hv checkpoint provides {loaded} of {} parameters",
                m.store.len()
            )));
        }
        Ok(m)
    }

    pub fn prior(&self) -> &FactorizedPrior {
        &self.prior
    }

    /// Patches as a `[L, 3p²]` tensor scaled to `[0, 1]`.
    pub fn patch_tensor(&self, grid: &PatchGrid) -> Result<Tensor> {
        if grid.shape() != self.cfg.grid() {
            return Err(Error::contract(format!(
                "patch grid {:?} does not match model grid {:?}",
                grid.shape(),
                self.cfg.grid()
            )));
        }
        let data = grid
            .patches
            .iter()
            .flatten()
            .map(|v| v / MAX_PIXEL)
            .collect();
        Tensor::new(vec![grid.len(), self.cfg.patch_dim()], data)
    }

    /// Latent `x = f_e(P)` for a `[L, 3p²]` input in `[0, 1]`.
    pub fn encode_latent(&self, tape: &mut Tape, p: &Bound, patches: Var) -> Result<Var> {
        let centered = tape.add_scalar(patches, -0.5);
        let x = self.fe.forward(tape, p, centered)?;
        Ok(tape.scale(x, self.cfg.latent_scale))
    }

    /// `f_d(x)` in `[0, 1]` pixel units (unclamped).
    pub fn decode_latent(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let x = tape.scale(x, 1.0 / self.cfg.latent_scale);
        let y = self.fd.forward(tape, p, x)?;
        Ok(tape.add_scalar(y, 0.5))
    }

    fn relax(
        &self,
        tape: &mut Tape,
        v: Var,
        center: Option<Var>,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<Var> {
        let vals = tape.value(v).clone();
        let offset = match mode {
            Mode::Train => relax_quantize(&vec![0.0; vals.len()], Mode::Train, rng),
            Mode::Infer => {
                let c = center
                    .map(|c| tape.value(c).data().to_vec())
                    .unwrap_or_else(|| vec![0.0; vals.len()]);
                vals.data()
                    .iter()
                    .zip(&c)
                    .map(|(x, m)| (x - m).round() + m - x)
                    .collect()
            }
        };
        let offset = tape.constant(Tensor::new(vals.shape().to_vec(), offset)?);
        tape.add(v, offset)
    }

    /// Full hyperprior pass on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        patches: Var,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<HvPass> {
        let cfg = &self.cfg;
        let (l, c) = (cfg.patches(), cfg.c);
        if tape.shape(patches) != [l, cfg.patch_dim()] {
            return Err(Error::contract(format!(
                "hv input {:?}, expected [{l}, {}]",
                tape.shape(patches),
                cfg.patch_dim()
            )));
        }
        let x = self.encode_latent(tape, p, patches)?;

        let xt = tape.transpose(x)?;
        let map = tape.reshape(xt, &[c, cfg.rows, cfg.cols])?;
        let h = self.he[0].forward(tape, p, map)?;
        let h = tape.relu(h);
        let z = self.he[1].forward(tape, p, h)?;
        let z_tilde = self.relax(tape, z, None, mode, rng)?;
        let rate_z = self.prior.bits(tape, p, z_tilde, cfg.p_min)?;

        let h = tape.upsample2(z_tilde)?;
        let h = self.hd[0].forward(tape, p, h)?;
        let h = tape.relu(h);
        let h = self.hd[1].forward(tape, p, h)?;
        let h = tape.reshape(h, &[2 * c, l])?;
        let h = tape.transpose(h)?;
        let mu = tape.slice_cols(h, 0, c)?;
        let s = tape.slice_cols(h, c, 2 * c)?;
        let s = tape.softplus(s);
        let sigma = tape.clamp_min(s, cfg.sigma_min);

        let center = cfg.quantize_around_mean.then_some(mu);
        let x_tilde = self.relax(tape, x, center, mode, rng)?;
        let bits = entropy::gaussian_bits(tape, x_tilde, mu, sigma, cfg.p_min)?;
        let e = tape.sum_rows(bits)?;
        let rate_x = tape.sum(e);
        Ok(HvPass {
            x,
            x_tilde,
            z,
            z_tilde,
            mu,
            sigma,
            e,
            rate_x,
            rate_z,
        })
    }

    /// `{x, e} = F_e(P)` with values copied off the tape.
    pub fn vectorize(
        &self,
        grid: &PatchGrid,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<LatentState> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let input = tape.constant(self.patch_tensor(grid)?);
        let pass = self.forward(&mut tape, &p, input, mode, rng)?;
        Ok(LatentState {
            x: tape.value(pass.x).clone(),
            x_tilde: tape.value(pass.x_tilde).clone(),
            z: tape.value(pass.z).clone(),
            z_tilde: tape.value(pass.z_tilde).clone(),
            mu: tape.value(pass.mu).clone(),
            sigma: tape.value(pass.sigma).clone(),
            e: tape.value(pass.e).data().to_vec(),
            hyper_bits: tape.value(pass.rate_z).item(),
        })
    }

    /// Reconstructed patches from latents `[L, c]`, clamped to the valid range.
    pub fn inverse_vectorize(&self, x_hat: &Tensor) -> Result<PatchGrid> {
        let cfg = &self.cfg;
        if x_hat.shape() != [cfg.patches(), cfg.c] {
            return Err(Error::contract(format!(
                "latent shape {:?}, expected [{}, {}]",
                x_hat.shape(),
                cfg.patches(),
                cfg.c
            )));
        }
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let x = tape.constant(x_hat.clone());
        let y = self.decode_latent(&mut tape, &p, x)?;
        Ok(self.to_grid(tape.value(y)))
    }

    /// Converts a `[L, 3p²]` tensor in `[0, 1]` units to a clamped pixel grid.
    pub fn to_grid(&self, t: &Tensor) -> PatchGrid {
        let d = self.cfg.patch_dim();
        PatchGrid {
            patch_size: self.cfg.patch_size,
            rows: self.cfg.rows,
            cols: self.cfg.cols,
            patches: t
                .data()
                .chunks(d)
                .map(|c| c.iter().map(|v| v.clamp(0.0, 1.0) * MAX_PIXEL).collect())
                .collect(),
        }
    }
}

/// `Σ_i w_i · MSE_i` on the 0–255 pixel scale for `[L, D]` tensors in `[0, 1]`.
pub fn weighted_distortion(
    tape: &mut Tape,
    s: Var,
    s_hat: Var,
    weights: &ImportanceWeights,
) -> Result<Var> {
    let (l, _) = tape.value(s).dims2()?;
    if weights.len() != l {
        return Err(Error::contract(format!(
            "{} weights for {l} patches",
            weights.len()
        )));
    }
    let diff = tape.sub(s, s_hat)?;
    let sq = tape.mul(diff, diff)?;
    let per_patch = tape.mean_rows(sq)?;
    let w = tape.constant(Tensor::from_vec(
        weights
            .as_slice()
            .iter()
            .map(|w| w * MAX_PIXEL * MAX_PIXEL)
            .collect(),
    ));
    let weighted = tape.mul(per_patch, w)?;
    Ok(tape.sum(weighted))
}

/// `λ_hv · (rate bits) + D_SA(S, Ŝ_hv)`.
pub fn hv_loss(
    tape: &mut Tape,
    s: Var,
    s_hat: Var,
    rate_bits: Var,
    lambda_hv: f64,
    weights: &ImportanceWeights,
) -> Result<Var> {
    let d = weighted_distortion(tape, s, s_hat, weights)?;
    let r = tape.scale(rate_bits, lambda_hv);
    tape.add(r, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::{importance_weights, PatchImportance};
    use crate::scene::{generate_scene, tokenize, SceneSpec};

    fn small() -> HvConfig {
        HvConfig {
            rows: 4,
            cols: 4,
            patch_size: 4,
            embed_dim: 8,
            c: 4,
            hyper_channels: 2,
            prior_filters: vec![3],
            ..Default::default()
        }
    }

    fn grid(cfg: &HvConfig, seed: u64) -> PatchGrid {
        let spec = SceneSpec {
            height: cfg.rows * cfg.patch_size,
            width: cfg.cols * cfg.patch_size,
            min_objects: 0,
            max_objects: 0,
            ..Default::default()
        };
        let (img, _) = generate_scene(seed, &spec).unwrap();
        tokenize(&img, cfg.patch_size).unwrap()
    }

    #[test]
    fn infer_is_deterministic_and_entropy_nonnegative() {
        let cfg = HvConfig::default();
        let model = HvModel::new(cfg.clone(), &mut RngStream::new(1)).unwrap();
        let zero = PatchGrid {
            patch_size: 8,
            rows: 6,
            cols: 6,
            patches: vec![vec![0.0; 192]; 36],
        };
        let a = model
            .vectorize(&zero, Mode::Infer, &mut RngStream::new(5))
            .unwrap();
        let b = model
            .vectorize(&zero, Mode::Infer, &mut RngStream::new(6))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.x.shape(), &[36, 16]);
        assert_eq!(a.z.shape(), &[8, 3, 3]);
        let g = grid(&cfg, 2);
        let s = model
            .vectorize(&g, Mode::Train, &mut RngStream::new(3))
            .unwrap();
        assert!(s.e.iter().all(|&e| e >= 0.0));
        assert!(s.sigma.data().iter().all(|&v| v >= cfg.sigma_min));
        let t = model
            .vectorize(&g, Mode::Train, &mut RngStream::new(3))
            .unwrap();
        assert_eq!(s, t);
        let r = model.inverse_vectorize(&a.x_tilde).unwrap();
        assert!(r
            .patches
            .iter()
            .flatten()
            .all(|v| (0.0..=255.0).contains(v)));
        assert_eq!(r, model.inverse_vectorize(&a.x_tilde).unwrap());
    }

    #[test]
    fn infer_latents_sit_on_shifted_integer_grid() {
        let cfg = small();
        let model = HvModel::new(cfg.clone(), &mut RngStream::new(2)).unwrap();
        let s = model
            .vectorize(&grid(&cfg, 1), Mode::Infer, &mut RngStream::new(0))
            .unwrap();
        for (xt, mu) in s.x_tilde.data().iter().zip(s.mu.data()) {
            let r = xt - mu;
            assert!((r - r.round()).abs() < 1e-9);
        }
        assert!(s.z_tilde.data().iter().all(|v| v.fract() == 0.0));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let model = HvModel::new(small(), &mut RngStream::new(2)).unwrap();
        let wrong = PatchGrid {
            patch_size: 4,
            rows: 2,
            cols: 3,
            patches: vec![vec![0.0; 48]; 6],
        };
        assert!(matches!(
            model.vectorize(&wrong, Mode::Infer, &mut RngStream::new(0)),
            Err(Error::Contract(_))
        ));
        assert!(model.inverse_vectorize(&Tensor::zeros(&[4, 5])).is_err());
        assert!(HvConfig { rows: 3, ..small() }.validate().is_err());
    }

    #[test]
    fn loss_components() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        let h = tape.constant(Tensor::matrix(2, 2, vec![0.1, 0.1, 1.0, 1.0]).unwrap());
        let r = tape.constant(Tensor::scalar(100.0));
        let w = importance_weights(&PatchImportance::new(vec![0, 3]).unwrap());
        let loss = hv_loss(&mut tape, s, h, r, 0.0, &w).unwrap();
        let d = tape.value(loss).item();
        assert!((d - 255.0f64.powi(2) * 0.01 / 9.0).abs() < 1e-9);
        let perfect = hv_loss(&mut tape, s, s, r, 0.5, &w).unwrap();
        assert_eq!(tape.value(perfect).item(), 50.0);
        let shifted = importance_weights(&PatchImportance::new(vec![1, 3]).unwrap());
        let base = importance_weights(&PatchImportance::new(vec![0, 2]).unwrap());
        let a = hv_loss(&mut tape, s, h, r, 0.0, &shifted).unwrap();
        let b = hv_loss(&mut tape, s, h, r, 0.0, &base).unwrap();
        assert_eq!(tape.value(a).item(), tape.value(b).item());
    }

    #[test]
    fn checkpoint_round_trip_restores_outputs() {
        let cfg = small();
        let m = HvModel::new(cfg.clone(), &mut RngStream::new(7)).unwrap();
        let bytes = crate::numkit::checkpoint::encode(&m.store);
        let back = HvModel::from_store(
            cfg.clone(),
            &crate::numkit::checkpoint::decode(&bytes).unwrap(),
        )
        .unwrap();
        let g = grid(&cfg, 4);
        let a = m
            .vectorize(&g, Mode::Infer, &mut RngStream::new(0))
            .unwrap();
        let b = back
            .vectorize(&g, Mode::Infer, &mut RngStream::new(0))
            .unwrap();
        assert_eq!(a, b);
        let other = HvConfig { c: 6, ..cfg };
        assert!(HvModel::from_store(other, &m.store).is_err());
    }
}
