use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::channel::{noise_tensor, normalize_power_tape, Snr};
use crate::error::{Error, Result};
use crate::hv_codec::{hv_loss, weighted_distortion, HvModel, Mode, PRIOR_PREFIX};
use crate::importance::{importance_weights, ImportanceWeights, PatchImportance};
use crate::jscc_codec::{allocate, c2, JsccModel, RateConfig};
use crate::numkit::{
    checkpoint, collect_grads, AdamState, Bound, ParamStore, RngStream, Tape, Tensor,
};

use super::config::{ExperimentConfig, Method, TrainingConfig};
use super::data::Sample;

/// One optimizer step's mean loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossPoint {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub fn write_loss_curve(points: &[LossPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::format("loss curve", e.to_string());
    w.write_record(["stage", "epoch", "step", "loss"])
        .map_err(err)?;
    for p in points {
        w.write_record([
            p.stage.clone(),
            p.epoch.to_string(),
            p.step.to_string(),
            p.loss.to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format("loss curve", e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Gradient accumulator over a mini-batch.
struct Accum {
    sum: Vec<Option<Vec<f64>>>,
    count: usize,
    loss: f64,
}

impl Accum {
    fn new(n: usize) -> Self {
        Accum {
            sum: vec![None; n],
            count: 0,
            loss: 0.0,
        }
    }

    fn add(&mut self, grads: Vec<Option<Vec<f64>>>, loss: f64) {
        for (acc, g) in self.sum.iter_mut().zip(grads) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.iter_mut().zip(g).for_each(|(a, g)| *a += g),
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
        self.count += 1;
        self.loss += loss;
    }

    fn take_mean(&mut self) -> (Vec<Option<Vec<f64>>>, f64) {
        let n = self.count.max(1) as f64;
        let len = self.sum.len();
        let mut out = std::mem::replace(&mut self.sum, vec![None; len]);
        for g in out.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v /= n);
        }
        let loss = self.loss / n;
        self.count = 0;
        self.loss = 0.0;
        (out, loss)
    }
}

/// Caps each batch gradient's global norm at `factor` times a running
/// average of recent (capped) norms, so one bad batch cannot throw Adam off.
struct NormClip {
    factor: f64,
    average: Option<f64>,
}

impl NormClip {
    fn new(factor: f64) -> Self {
        NormClip {
            factor,
            average: None,
        }
    }

    fn apply(&mut self, grads: &mut [Option<Vec<f64>>]) {
        if self.factor <= 0.0 {
            return;
        }
        let norm = grads
            .iter()
            .flatten()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let kept = match self.average {
            Some(avg) if norm > self.factor * avg => {
                let s = self.factor * avg / norm;
                grads
                    .iter_mut()
                    .flatten()
                    .for_each(|g| g.iter_mut().for_each(|v| *v *= s));
                self.factor * avg
            }
            _ => norm,
        };
        self.average = Some(self.average.map_or(kept, |a| 0.98 * a + 0.02 * kept));
    }
}

fn check_finite(loss: f64, stage: &str, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!(
            "{stage}: loss became {loss} at epoch {epoch}, step {step}"
        )))
    }
}

/// Learning rate for `step` of `total` under the configured schedule.
fn scheduled_lr(t: &TrainingConfig, base: f64, step: usize, total: usize) -> f64 {
    if !t.cosine_decay || total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

fn batches(n: usize, batch: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Saves `store` next to `path` as `<path>.lastgood` and wraps the error.
fn abort_with_last_good(err: Error, store: &ParamStore, path: Option<&Path>) -> Error {
    if let Some(p) = path {
        let lg = p.with_extension("lastgood.ckpt");
        if let Err(e) = checkpoint::save(store, &lg) {
            log::error!("could not write last-good checkpoint {}: {e}", lg.display());
        } else {
            log::error!("training aborted, last-good weights in {}", lg.display());
        }
    }
    err
}

/// Loss of one image through the hyperprior codec alone.
fn hv_image_loss(
    hv: &HvModel,
    tape: &mut Tape,
    p: &Bound,
    s: &Tensor,
    w: &ImportanceWeights,
    rng: &mut RngStream,
) -> Result<crate::numkit::Var> {
    let input = tape.constant(s.clone());
    let pass = hv.forward(tape, p, input, Mode::Train, rng)?;
    let s_hat = hv.decode_latent(tape, p, pass.x_tilde)?;
    let rate = tape.add(pass.rate_x, pass.rate_z)?;
    hv_loss(tape, input, s_hat, rate, hv.cfg.lambda_hv, w)
}

/// Noiseless rate-distortion pretraining of the hyperprior codec with the
/// importance weighting of `method`.
pub fn pretrain_hv(
    cfg: &ExperimentConfig,
    method: Method,
    train: &[Sample],
    ckpt: Option<&Path>,
) -> Result<(HvModel, Vec<LossPoint>)> {
    if train.is_empty() {
        return Err(Error::Training("no training scenes".into()));
    }
    let root = RngStream::new(cfg.seed)
        .fork_named("pretrain")
        .fork_named(method.hv_key());
    let mut hv = HvModel::new(cfg.hv.clone(), &mut root.fork_named("init"))?;
    let mut adam = AdamState::new(&hv.store, cfg.training.lr);
    let inputs: Vec<(Tensor, ImportanceWeights)> = train
        .iter()
        .map(|s| {
            Ok((
                hv.patch_tensor(&s.grid)?,
                importance_weights(&method.view(&s.levels)),
            ))
        })
        .collect::<Result<_>>()?;
    let stage = format!("pretrain_{}", method.hv_key());
    let mut curve = Vec::new();
    let mut step = 0;
    let mut acc = Accum::new(hv.store.len());
    let mut clip = NormClip::new(cfg.training.clip_factor);
    let total = cfg.training.pretrain_epochs * inputs.len().div_ceil(cfg.training.batch_size);
    for epoch in 0..cfg.training.pretrain_epochs {
        let mut erng = root.fork_named("epoch").fork(epoch as u64);
        for batch in batches(inputs.len(), cfg.training.batch_size, &mut erng) {
            for &i in &batch {
                let mut noise = erng.fork(i as u64);
                let mut tape = Tape::new();
                let p = hv.store.bind_all(&mut tape);
                let loss =
                    hv_image_loss(&hv, &mut tape, &p, &inputs[i].0, &inputs[i].1, &mut noise)?;
                let lv = tape.value(loss).item();
                check_finite(lv, &stage, epoch, step)
                    .map_err(|e| abort_with_last_good(e, &hv.store, ckpt))?;
                let mut g = tape.backward(loss)?;
                acc.add(collect_grads(&mut g, &p), lv);
            }
            let (mut g, loss) = acc.take_mean();
            clip.apply(&mut g);
            let before = hv.store.clone();
            adam.lr = scheduled_lr(&cfg.training, cfg.training.lr, step, total);
            adam.step(&mut hv.store, &g)
                .map_err(|e| abort_with_last_good(e, &before, ckpt))?;
            curve.push(LossPoint {
                stage: stage.clone(),
                epoch,
                step,
                loss,
            });
            step += 1;
        }
        log::info!(
            "{stage} epoch {epoch}: loss {:.4}",
            curve.last().map_or(f64::NAN, |p| p.loss)
        );
    }
    if let Some(p) = ckpt {
        checkpoint::save(&hv.store, p)?;
    }
    Ok((hv, curve))
}

/// Mean hyperprior-codec loss over `samples` in inference mode.
pub fn evaluate_hv_loss(hv: &HvModel, method: Method, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let mut tape = Tape::new();
        let p = hv.store.bind_frozen(&mut tape);
        let w = importance_weights(&method.view(&s.levels));
        let input = hv.patch_tensor(&s.grid)?;
        let loss = hv_image_loss(hv, &mut tape, &p, &input, &w, &mut RngStream::new(0))?;
        total += tape.value(loss).item();
    }
    Ok(total / samples.len().max(1) as f64)
}

/// A trained end-to-end system for one method.
#[derive(Clone, Debug)]
pub struct TrainedSystem {
    pub method: Method,
    pub hv: HvModel,
    pub jscc: JsccModel,
    /// Constant `k` for `fixed_rate`; ignored otherwise.
    pub fixed_k: u32,
}

impl TrainedSystem {
    pub fn rate(&self) -> &RateConfig {
        &self.jscc.cfg.rate
    }

    /// Per-patch symbol counts for entropies `e` and the method's labels.
    pub fn allocate(&self, e: &[f64], levels: &PatchImportance) -> Result<Vec<u32>> {
        if self.method.adaptive() {
            Ok(allocate(e, self.method.view(levels).levels(), self.rate())?.k)
        } else {
            Ok(vec![self.fixed_k; e.len()])
        }
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (_, name, t) in self.hv.store.iter().chain(self.jscc.store.iter()) {
            s.insert(name, t.clone());
        }
        s.insert("meta.eta", Tensor::from_vec(vec![self.rate().eta]));
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        checkpoint::save(&self.to_store(), path)
    }

    pub fn from_store(cfg: &ExperimentConfig, method: Method, saved: &ParamStore) -> Result<Self> {
        let hv = HvModel::from_store(cfg.hv.clone(), saved)?;
        let mut jcfg = cfg.jscc.clone();
        let eta = saved
            .id("meta.eta")
            .map(|id| saved.get(id).item())
            .ok_or_else(|| Error::contract("system checkpoint lacks meta.eta"))?;
        jcfg.rate.eta = eta;
        let jscc = JsccModel::from_store(jcfg, saved)?;
        Ok(TrainedSystem {
            method,
            hv,
            jscc,
            fixed_k: cfg.training.fixed_k,
        })
    }

    pub fn load(cfg: &ExperimentConfig, method: Method, path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(format!(
                "{method}: {}",
                path.display()
            )));
        }
        Self::from_store(cfg, method, &checkpoint::load(path)?)
    }
}

/// Per-patch entropies in inference mode.
pub fn entropies(hv: &HvModel, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let mut rng = RngStream::new(0);
    samples
        .iter()
        .map(|s| Ok(hv.vectorize(&s.grid, Mode::Infer, &mut rng)?.e))
        .collect()
}

/// Finds `η` so the mean allocated `k` over `samples` is as close as possible
/// to `target`. Returns `(η, achieved mean)`.
pub fn calibrate_eta(
    e: &[Vec<f64>],
    levels: &[PatchImportance],
    rate: &RateConfig,
    target: f64,
) -> Result<(f64, f64)> {
    let mean_k = |eta: f64| -> Result<f64> {
        let r = RateConfig {
            eta,
            ..rate.clone()
        };
        let mut total = 0u64;
        let mut n = 0usize;
        for (ei, li) in e.iter().zip(levels) {
            total += allocate(ei, li.levels(), &r)?
                .k
                .iter()
                .map(|&k| u64::from(k))
                .sum::<u64>();
            n += ei.len();
        }
        Ok(total as f64 / n.max(1) as f64)
    };
    let (mut lo, mut hi) = (0.0f64, 1e-3f64);
    while mean_k(hi)? < target && hi < 1e6 {
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mean_k(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (ml, mh) = (mean_k(lo)?, mean_k(hi)?);
    Ok(if (ml - target).abs() < (mh - target).abs() {
        (lo, ml)
    } else {
        (hi, mh)
    })
}

fn calibrate(
    system: &mut TrainedSystem,
    cfg: &ExperimentConfig,
    calib: &[Sample],
    when: &str,
) -> Result<()> {
    if !system.method.adaptive() || !cfg.training.calibrate_eta || calib.is_empty() {
        return Ok(());
    }
    let e = entropies(&system.hv, calib)?;
    let levels: Vec<PatchImportance> = calib
        .iter()
        .map(|s| system.method.view(&s.levels))
        .collect();
    let (eta, mean) = calibrate_eta(&e, &levels, system.rate(), f64::from(cfg.training.fixed_k))?;
    log::info!(
        "{} {when}: eta = {eta:.5}, mean k = {mean:.3}",
        system.method
    );
    system.jscc.cfg.rate.eta = eta;
    Ok(())
}

/// Joint training of the JSCC pair with the channel in the loop; the
/// hyperprior codec is fine-tuned at a reduced learning rate.
pub fn train_joint(
    cfg: &ExperimentConfig,
    method: Method,
    hv: HvModel,
    train: &[Sample],
    ckpt: Option<&Path>,
) -> Result<(TrainedSystem, Vec<LossPoint>)> {
    if train.is_empty() {
        return Err(Error::Training("no training scenes".into()));
    }
    if hv.cfg != cfg.hv {
        return Err(Error::contract(
            "pretrained hyperprior codec does not match the configured one",
        ));
    }
    let t = &cfg.training;
    let root = RngStream::new(cfg.seed)
        .fork_named("joint")
        .fork_named(method.name());
    let jscc = JsccModel::new(cfg.jscc.clone(), &mut root.fork_named("init"))?;
    let mut sys = TrainedSystem {
        method,
        hv,
        jscc,
        fixed_k: t.fixed_k,
    };
    let calib = &train[..t.calibration_scenes.min(train.len())];
    calibrate(&mut sys, cfg, calib, "before joint training")?;

    let hv_trainable =
        |name: &str| t.finetune_hv && !(t.freeze_entropy_model && name.starts_with(PRIOR_PREFIX));
    let mut hv_adam = AdamState::new(&sys.hv.store, t.lr * t.hv_finetune_lr_scale);
    for (id, name, _) in sys.hv.store.iter() {
        if !hv_trainable(name) {
            hv_adam.set_lr_scale(id, 0.0);
        }
    }
    let mut jscc_adam = AdamState::new(&sys.jscc.store, t.lr);

    let prepared: Vec<(Tensor, PatchImportance, ImportanceWeights)> = train
        .iter()
        .map(|s| {
            let view = method.view(&s.levels);
            Ok((
                sys.hv.patch_tensor(&s.grid)?,
                view.clone(),
                importance_weights(&view),
            ))
        })
        .collect::<Result<_>>()?;

    let stage = format!("joint_{method}");
    let mut curve = Vec::new();
    let mut step = 0;
    let mut hv_acc = Accum::new(sys.hv.store.len());
    let mut jscc_acc = Accum::new(sys.jscc.store.len());
    let (mut hv_clip, mut jscc_clip) = (NormClip::new(t.clip_factor), NormClip::new(t.clip_factor));
    let total = t.joint_epochs * prepared.len().div_ceil(t.batch_size);
    for epoch in 0..t.joint_epochs {
        let mut erng = root.fork_named("epoch").fork(epoch as u64);
        for batch in batches(prepared.len(), t.batch_size, &mut erng) {
            for &i in &batch {
                let (s, view, w) = &prepared[i];
                let mut noise = erng.fork(i as u64);
                let mut tape = Tape::new();
                let hp = sys.hv.store.bind(&mut tape, |_, n| hv_trainable(n));
                let jp = sys.jscc.store.bind_all(&mut tape);
                let loss = joint_image_loss(
                    &sys,
                    &mut tape,
                    &hp,
                    &jp,
                    s,
                    view,
                    w,
                    t.lambda_joint,
                    t.train_snr_db,
                    &mut noise,
                )?;
                let lv = tape.value(loss).item();
                check_finite(lv, &stage, epoch, step)
                    .map_err(|e| abort_with_last_good(e, &sys.to_store(), ckpt))?;
                let mut g = tape.backward(loss)?;
                hv_acc.add(collect_grads(&mut g, &hp), lv);
                jscc_acc.add(collect_grads(&mut g, &jp), lv);
            }
            let (mut hg, _) = hv_acc.take_mean();
            let (mut jg, loss) = jscc_acc.take_mean();
            hv_clip.apply(&mut hg);
            jscc_clip.apply(&mut jg);
            let last_good = sys.to_store();
            hv_adam.lr = scheduled_lr(t, t.lr * t.hv_finetune_lr_scale, step, total);
            jscc_adam.lr = scheduled_lr(t, t.lr, step, total);
            hv_adam
                .step(&mut sys.hv.store, &hg)
                .map_err(|e| abort_with_last_good(e, &last_good, ckpt))?;
            jscc_adam
                .step(&mut sys.jscc.store, &jg)
                .map_err(|e| abort_with_last_good(e, &last_good, ckpt))?;
            curve.push(LossPoint {
                stage: stage.clone(),
                epoch,
                step,
                loss,
            });
            step += 1;
        }
        log::info!(
            "{stage} epoch {epoch}: loss {:.4}",
            curve.last().map_or(f64::NAN, |p| p.loss)
        );
    }
    calibrate(&mut sys, cfg, calib, "after joint training")?;
    if let Some(p) = ckpt {
        sys.save(p)?;
    }
    Ok((sys, curve))
}

/// `λ·Σ(C1 + C2) + D_SA(S, Ŝ) + D_SA(S, Ŝ_hv)` for one image.
#[allow(clippy::too_many_arguments)]
fn joint_image_loss(
    sys: &TrainedSystem,
    tape: &mut Tape,
    hp: &Bound,
    jp: &Bound,
    s: &Tensor,
    view: &PatchImportance,
    w: &ImportanceWeights,
    lambda: f64,
    snr: Snr,
    rng: &mut RngStream,
) -> Result<crate::numkit::Var> {
    let input = tape.constant(s.clone());
    let pass = sys.hv.forward(tape, hp, input, Mode::Train, rng)?;
    let recon_hv = sys.hv.decode_latent(tape, hp, pass.x_tilde)?;
    let e = tape.value(pass.e).data().to_vec();
    let k = sys.allocate(&e, view)?;
    let rate = sys.rate();
    let rate_sum = if sys.method.adaptive() {
        let total_e = tape.sum(pass.e);
        let c2_total = view
            .levels()
            .iter()
            .map(|&l| c2(l, rate.alpha))
            .sum::<Result<f64>>()?;
        let scaled = tape.scale(total_e, rate.eta);
        tape.add_scalar(scaled, c2_total)
    } else {
        tape.constant(Tensor::scalar(f64::from(sys.fixed_k) * k.len() as f64))
    };
    let y = sys.jscc.encode_tape(tape, jp, pass.x, &k)?;
    let total: u64 = k.iter().map(|&v| u64::from(v)).sum();
    let y = normalize_power_tape(tape, y, total)?;
    let mask = sys.jscc.mask(&k)?;
    let n = tape.constant(noise_tensor(&mask, snr, rng));
    let y_hat = tape.add(y, n)?;
    let x_hat = sys.jscc.decode_tape(tape, jp, y_hat, &k)?;
    let s_hat = sys.hv.decode_latent(tape, hp, x_hat)?;
    let d = weighted_distortion(tape, input, s_hat, w)?;
    let d_hv = weighted_distortion(tape, input, recon_hv, w)?;
    let r = tape.scale(rate_sum, lambda);
    let sum = tape.add(d, d_hv)?;
    tape.add(sum, r)
}

/// Mean joint loss over `samples` with a fixed noise seed.
pub fn evaluate_joint_loss(
    sys: &TrainedSystem,
    cfg: &ExperimentConfig,
    samples: &[Sample],
) -> Result<f64> {
    let mut total = 0.0;
    for (i, smp) in samples.iter().enumerate() {
        let view = sys.method.view(&smp.levels);
        let w = importance_weights(&view);
        let s = sys.hv.patch_tensor(&smp.grid)?;
        let mut tape = Tape::new();
        let hp = sys.hv.store.bind_frozen(&mut tape);
        let jp = sys.jscc.store.bind_frozen(&mut tape);
        let mut rng = RngStream::new(cfg.seed).fork_named("eval").fork(i as u64);
        let loss = joint_image_loss(
            sys,
            &mut tape,
            &hp,
            &jp,
            &s,
            &view,
            &w,
            cfg.training.lambda_joint,
            cfg.training.train_snr_db,
            &mut rng,
        )?;
        total += tape.value(loss).item();
    }
    Ok(total / samples.len().max(1) as f64)
}
