//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! Criteria 8, 9 and 11 need trained systems. They are trained once with the
//! default config and cached under the cargo target directory; later runs
//! reuse the checkpoints while the training settings are unchanged.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use saoosc_core::channel::{awgn, normalize_power, normalize_power_tape, Snr};
use saoosc_core::hv_codec::{
    conditional_bin_prob, gaussian_bits, hv_loss, sa_entropy, weighted_distortion, FactorizedPrior,
    Mode,
};
use saoosc_core::importance::{
    agreement, importance_weights, object_to_patch, rule_annotate, CategoryAccuracy, Granularity,
    LabelSet, ObjectImportance, RuleThresholds,
};
use saoosc_core::jscc_codec::{allocate, quantize_rate, RateConfig, RateTokenBank};
use saoosc_core::metrics::sad_from_psnr;
use saoosc_core::numkit::nn::{Conv2d, LayerNorm, Linear, SelfAttention, TransformerBlock};
use saoosc_core::numkit::{collect_grads, Bound, ParamStore, RngStream, Tape, Tensor, Var};
use saoosc_core::pipeline::{
    ensure_trained, evaluate, load_split, load_systems, run_benchmark, summarize, CellSummary,
};
use saoosc_core::scene::{generate_scene, GridShape, SceneSpec};
use saoosc_core::{
    ExperimentConfig, HvConfig, HvModel, JsccConfig, JsccModel, Method, PatchImportance, Split,
    SymbolStream,
};

type Outcome = Result<String, String>;
type Criterion = (u8, &'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.2} s, limit {limit_s} s", elapsed.as_secs_f64())
    })
}

fn random_stream(rng: &mut RngStream, v: &[u32]) -> SymbolStream {
    let l = rng.gen_range(1..40);
    let k: Vec<u32> = (0..l).map(|_| v[rng.gen_range(0..v.len())]).collect();
    let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
    let y = k
        .iter()
        .map(|&ki| {
            (0..ki)
                .map(|_| {
                    [
                        scale * rng.gen_range(-1.0..1.0),
                        scale * rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect()
        })
        .collect();
    SymbolStream::new(k, y).unwrap()
}

fn power_constraint() -> Outcome {
    let t = Instant::now();
    let mut rng = RngStream::new(1);
    let v = RateConfig::full_scale().v;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let y = normalize_power(&random_stream(&mut rng, &v)).map_err(|e| e.to_string())?;
        worst = worst.max((y.energy() / y.total_symbols() as f64 - 1.0).abs());
    }
    ensure(worst < 1e-12, || format!("max deviation {worst:e}"))?;
    within(t.elapsed(), 1.0)?;
    Ok(format!(
        "max |P - 1| = {worst:.1e} over 1000 streams in {:.3} s",
        t.elapsed().as_secs_f64()
    ))
}

fn awgn_statistics() -> Outcome {
    let t = Instant::now();
    let n = 1_000_000usize;
    let zeros = SymbolStream::new(vec![n as u32], vec![vec![[0.0, 0.0]; n]]).unwrap();
    let noise = awgn(&zeros, Snr(10.0), &mut RngStream::new(2));
    let s = &noise.symbols()[0];
    let power = s.iter().map(|[a, b]| a * a + b * b).sum::<f64>() / n as f64;
    let (mut sre, mut sim, mut sre2, mut sim2, mut sx) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for [a, b] in s {
        sre += a;
        sim += b;
        sre2 += a * a;
        sim2 += b * b;
        sx += a * b;
    }
    let nf = n as f64;
    let cov = sx / nf - (sre / nf) * (sim / nf);
    let corr =
        cov / ((sre2 / nf - (sre / nf).powi(2)).sqrt() * (sim2 / nf - (sim / nf).powi(2)).sqrt());
    let bound = 3.0 / nf.sqrt();
    ensure((0.098..=0.102).contains(&power), || {
        format!("noise power {power}")
    })?;
    ensure(corr.abs() <= bound, || {
        format!("re/im correlation {corr:.2e} beyond 3 sigma {bound:.2e}")
    })?;
    within(t.elapsed(), 5.0)?;
    Ok(format!(
        "noise power {power:.5}, re/im correlation {corr:.1e} (3 sigma {bound:.1e})"
    ))
}

/// Nearest element of `v`; ties resolve to the smaller one.
fn quantizer_oracle(r: f64, v: &[u32]) -> u32 {
    let mut best = v[0];
    for &x in v {
        if (f64::from(x) - r).abs() < (f64::from(best) - r).abs() {
            best = x;
        }
    }
    best
}

fn rate_allocation() -> Outcome {
    let mut rng = RngStream::new(3);
    let mut compared = 0;
    for cfg in [RateConfig::toy(), RateConfig::full_scale()] {
        let (lo, hi) = (f64::from(cfg.min_k()) - 10.0, f64::from(cfg.max_k()) + 10.0);
        for _ in 0..100_000 {
            // Half the draws land exactly on midpoints between neighbours.
            let r = if rng.gen_bool(0.5) {
                let i = rng.gen_range(0..cfg.v.len() - 1);
                f64::from(cfg.v[i] + cfg.v[i + 1]) / 2.0
            } else {
                rng.gen_range(lo..hi)
            };
            let (got, want) = (quantize_rate(r, &cfg.v), quantizer_oracle(r, &cfg.v));
            ensure(got == want, || {
                format!("quantize({r}) = {got}, oracle {want}")
            })?;
            compared += 1;
        }
        let e_scale = f64::from(cfg.max_k()) / cfg.eta;
        for _ in 0..200 {
            let mut e: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.2 * e_scale)).collect();
            e.sort_by(f64::total_cmp);
            for level in 0..4u8 {
                let a = allocate(&e, &vec![level; e.len()], &cfg).map_err(|x| x.to_string())?;
                ensure(a.k.iter().all(|k| cfg.v.contains(k)), || {
                    "k outside V".into()
                })?;
                ensure(a.k.windows(2).all(|w| w[0] <= w[1]), || {
                    format!("k not monotone in e at level {level}")
                })?;
            }
            let ei = e[rng.gen_range(0..e.len())];
            let k: Vec<u32> = (0..4u8)
                .map(|l| allocate(&[ei], &[l], &cfg).unwrap().k[0])
                .collect();
            ensure(k[3] >= k[2] && k[2] == k[0] && k[0] >= k[1], || {
                format!("level order violated at e={ei}: {k:?}")
            })?;
        }
    }
    Ok(format!("{compared} quantizer draws match the oracle; membership, monotonicity and level order hold"))
}

fn entropy_model() -> Outcome {
    let mut report = Vec::new();
    for sigma in [0.1, 1.0, 10.0] {
        for mu in [0.0, 0.37, -2.6] {
            let total: f64 = (-200..=200)
                .map(|x| conditional_bin_prob(f64::from(x), mu, sigma, 1e-12))
                .sum();
            ensure((total - 1.0).abs() <= 1e-3, || {
                format!("sigma {sigma}, mu {mu}: mass {total}")
            })?;
        }
        report.push(format!("sigma {sigma} ok"));
    }
    let p = conditional_bin_prob(0.0, 0.0, 1.0, 1e-9);
    let oracle = libm::erf(0.5 / std::f64::consts::SQRT_2);
    ensure(
        (p - 0.38292).abs() <= 1e-4 && (p - oracle).abs() <= 1e-4,
        || format!("P(0;0,1) = {p}, erf oracle {oracle}"),
    )?;
    let e = sa_entropy(&[0.5; 4], 4).map_err(|x| x.to_string())?;
    ensure(e == vec![4.0], || {
        format!("uniform 0.5 over 4 elements gives {e:?} bits")
    })?;
    Ok(format!(
        "{}; P(0;0,1) = {p:.5} (erf {oracle:.5}); 4 x p=0.5 -> 4 bits",
        report.join(", ")
    ))
}

fn weights_and_sad() -> Outcome {
    let mut rng = RngStream::new(5);
    for _ in 0..100 {
        let levels = PatchImportance::new((0..36).map(|_| rng.gen_range(0..4)).collect()).unwrap();
        let w = importance_weights(&levels);
        let s: f64 = w.as_slice().iter().sum();
        ensure((s - 1.0).abs() < 1e-12, || format!("weights sum to {s}"))?;
        for (i, &li) in levels.levels().iter().enumerate() {
            for (j, &lj) in levels.levels().iter().enumerate() {
                if lj == li + 1 {
                    let ratio = w.as_slice()[j] / w.as_slice()[i];
                    ensure(ratio == 2.0, || format!("ratio across one level {ratio}"))?;
                }
            }
        }
        let psnr: Vec<f64> = (0..36).map(|_| rng.gen_range(5.0..100.0)).collect();
        let sad = sad_from_psnr(&psnr, &levels).unwrap();
        let (lo, hi) = psnr
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), &p| (a.min(p), b.max(p)));
        ensure(lo <= sad && sad <= hi, || {
            format!("SAD {sad} outside [{lo}, {hi}]")
        })?;
    }
    let hand = sad_from_psnr(&[0.0, 36.0], &PatchImportance::new(vec![0, 3]).unwrap()).unwrap();
    ensure(hand == 32.0, || format!("hand case SAD {hand}"))?;
    Ok("sum w = 1, one-level ratio 2, hand case 32 dB, 100 random cases bounded".into())
}

fn patch_labeling() -> Outcome {
    let spec = SceneSpec::default();
    let grid = GridShape {
        rows: 6,
        cols: 6,
        patch_size: 8,
    };
    let mut rng = RngStream::new(6);
    let (mut patches, mut objects) = (0, 0);
    for seed in 0..200u64 {
        let (_, objs) = generate_scene(seed, &spec).map_err(|e| e.to_string())?;
        let mut labels = rule_annotate(&objs, RuleThresholds::for_height(spec.height)).unwrap();
        if seed % 2 == 1 {
            labels = labels
                .iter()
                .map(|l| ObjectImportance::new(l.object_id, rng.gen_range(1..4)).unwrap())
                .collect();
        }
        let got = object_to_patch(&labels, &objs, grid).map_err(|e| e.to_string())?;
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let (x0, y0, x1, y1) = (
                    (c * 8) as f64,
                    (r * 8) as f64,
                    (c * 8 + 8) as f64,
                    (r * 8 + 8) as f64,
                );
                let want = labels
                    .iter()
                    .filter(|l| {
                        let b = objs
                            .iter()
                            .find(|o| o.track_id == l.object_id)
                            .unwrap()
                            .bbox;
                        let area = (b.x2.min(x1) - b.x1.max(x0)).max(0.0)
                            * (b.y2.min(y1) - b.y1.max(y0)).max(0.0);
                        area > 0.0
                    })
                    .map(|l| l.level)
                    .max()
                    .unwrap_or(0);
                let have = got.levels()[r * grid.cols + c];
                ensure(have == want, || {
                    format!("scene {seed} patch ({r},{c}): {have} vs oracle {want}")
                })?;
                patches += 1;
            }
        }
        objects += objs.len();
    }
    Ok(format!(
        "200 scenes, {objects} objects, {patches} patches, zero mismatches"
    ))
}

/// Directional finite-difference check of the gradient of `f` with respect to
/// every parameter in `stores` and every tensor in `inputs`. Returns the
/// relative error over `dirs` random unit directions.
fn directional_check<F>(
    name: &str,
    stores: &[&ParamStore],
    inputs: &[Tensor],
    seed: u64,
    dirs: usize,
    f: F,
) -> Result<f64, String>
where
    F: Fn(&mut Tape, &[Bound], &[Var]) -> saoosc_core::Result<Var>,
{
    let err = |e: saoosc_core::Error| format!("{name}: {e}");
    let mut tape = Tape::new();
    let bound: Vec<Bound> = stores.iter().map(|s| s.bind_all(&mut tape)).collect();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &bound, &vars).map_err(err)?;
    let mut grads = tape.backward(loss).map_err(err)?;
    let input_grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();
    let param_grads: Vec<Option<Vec<f64>>> = bound
        .iter()
        .flat_map(|b| collect_grads(&mut grads, b))
        .collect();

    let eval = |ss: &[ParamStore], xs: &[Tensor]| -> Result<f64, String> {
        let mut tape = Tape::new();
        let b: Vec<Bound> = ss.iter().map(|s| s.bind_frozen(&mut tape)).collect();
        let vs: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let l = f(&mut tape, &b, &vs).map_err(err)?;
        Ok(tape.value(l).item())
    };
    let sizes: Vec<usize> = stores
        .iter()
        .flat_map(|s| s.iter().map(|(_, _, t)| t.len()))
        .collect();
    let mut rng = RngStream::new(seed).fork_named("directions");
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let h = 1e-5;
    for _ in 0..dirs {
        let pd: Vec<Vec<f64>> = sizes
            .iter()
            .map(|&n| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let xd: Vec<Vec<f64>> = inputs
            .iter()
            .map(|t| {
                (0..t.len())
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect();
        let norm = pd
            .iter()
            .chain(&xd)
            .flatten()
            .map(|v: &f64| v * v)
            .sum::<f64>()
            .sqrt();
        let mut dot = 0.0;
        for (g, d) in param_grads.iter().zip(&pd) {
            if let Some(g) = g {
                dot += g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        for (g, d) in input_grads.iter().zip(&xd) {
            dot += g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
        }
        let shifted = |sign: f64| -> Result<f64, String> {
            let mut dirs = pd.iter();
            let ss: Vec<ParamStore> = stores
                .iter()
                .map(|store| {
                    let mut s = (*store).clone();
                    for (id, _, _) in store.iter() {
                        let d = dirs.next().unwrap();
                        for (v, dv) in s.get_mut(id).data_mut().iter_mut().zip(d) {
                            *v += sign * h * dv / norm;
                        }
                    }
                    s
                })
                .collect();
            let xs: Vec<Tensor> = inputs
                .iter()
                .zip(&xd)
                .map(|(t, d)| {
                    let mut t = t.clone();
                    t.data_mut()
                        .iter_mut()
                        .zip(d)
                        .for_each(|(v, dv)| *v += sign * h * dv / norm);
                    t
                })
                .collect();
            eval(&ss, &xs)
        };
        analytic.push(dot / norm);
        numeric.push((shifted(1.0)? - shifted(-1.0)?) / (2.0 * h));
    }
    let diff = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    Ok(diff / scale.max(1e-12))
}

fn rand_tensor(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn probe(tape: &mut Tape, y: Var) -> saoosc_core::Result<Var> {
    let n = tape.value(y).len();
    let w = Tensor::new(
        tape.shape(y).to_vec(),
        (0..n).map(|i| ((i * 7 % 5) as f64 - 1.7) * 0.3).collect(),
    )?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn small_hv() -> HvConfig {
    HvConfig {
        patch_size: 4,
        rows: 2,
        cols: 2,
        embed_dim: 8,
        heads: 2,
        c: 4,
        hyper_channels: 2,
        prior_filters: vec![3, 3],
        ..HvConfig::default()
    }
}

fn small_jscc() -> JsccConfig {
    JsccConfig {
        patches: 4,
        c: 4,
        c_tok: 4,
        c_fixed: 8,
        embed_dim: 8,
        heads: 2,
        ..JsccConfig::default()
    }
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let mut worst_block: (f64, &str) = (0.0, "");
    let mut worst_net: (f64, &str) = (0.0, "");
    for seed in 0..10u64 {
        let root = RngStream::new(seed).fork_named("gradcheck");
        let mut blocks: Vec<(&str, f64)> = Vec::new();
        let mut rng = root.fork_named("init");
        let mut data = root.fork_named("data");
        let rows = data.gen_range(2..6);

        let mut s = ParamStore::new();
        let lin = Linear::new(&mut s, "lin", 5, 3, &mut rng);
        let x = rand_tensor(&mut data, &[rows, 5], -1.0, 1.0);
        blocks.push((
            "linear",
            directional_check("linear", &[&s], &[x], seed, 6, |t, p, v| {
                let y = lin.forward(t, &p[0], v[0])?;
                probe(t, y)
            })?,
        ));

        let mut s = ParamStore::new();
        let ln = LayerNorm::new(&mut s, "ln", 6);
        let x = rand_tensor(&mut data, &[rows, 6], -2.0, 2.0);
        blocks.push((
            "layer_norm",
            directional_check("layer_norm", &[&s], &[x], seed, 6, |t, p, v| {
                let y = ln.forward(t, &p[0], v[0])?;
                probe(t, y)
            })?,
        ));

        let mut s = ParamStore::new();
        let att = SelfAttention::new(&mut s, "att", 8, 2, &mut rng).unwrap();
        let x = rand_tensor(&mut data, &[rows, 8], -1.0, 1.0);
        blocks.push((
            "attention",
            directional_check("attention", &[&s], &[x], seed, 6, |t, p, v| {
                let y = att.forward(t, &p[0], v[0])?;
                probe(t, y)
            })?,
        ));

        let mut s = ParamStore::new();
        let tb = TransformerBlock::new(&mut s, "tb", 8, 2, 2, &mut rng).unwrap();
        let x = rand_tensor(&mut data, &[rows, 8], -1.0, 1.0);
        blocks.push((
            "transformer_block",
            directional_check("transformer_block", &[&s], &[x], seed, 6, |t, p, v| {
                let y = tb.forward(t, &p[0], v[0])?;
                probe(t, y)
            })?,
        ));

        let mut s = ParamStore::new();
        let conv = Conv2d::new(
            &mut s,
            "conv",
            2,
            3,
            3,
            1 + (seed as usize % 2),
            1,
            &mut rng,
        );
        let x = rand_tensor(&mut data, &[2, 4, 4], -1.0, 1.0);
        blocks.push((
            "conv2d",
            directional_check("conv2d", &[&s], &[x], seed, 6, |t, p, v| {
                let y = conv.forward(t, &p[0], v[0])?;
                probe(t, y)
            })?,
        ));

        let mut s = ParamStore::new();
        let prior = FactorizedPrior::new(&mut s, "prior", 2, &[3, 3], 10.0, &mut rng);
        let z = rand_tensor(&mut data, &[2, 1, 2], -3.0, 3.0);
        blocks.push((
            "factorized_prior",
            directional_check("factorized_prior", &[&s], &[z], seed, 6, |t, p, v| {
                prior.bits(t, &p[0], v[0], 1e-9)
            })?,
        ));

        let s = ParamStore::new();
        let x = rand_tensor(&mut data, &[rows, 3], -2.0, 2.0);
        let mu = rand_tensor(&mut data, &[rows, 3], -2.0, 2.0);
        let sigma = rand_tensor(&mut data, &[rows, 3], 0.3, 3.0);
        blocks.push((
            "gaussian_bits",
            directional_check(
                "gaussian_bits",
                &[&s],
                &[x, mu, sigma],
                seed,
                6,
                |t, _, v| {
                    let b = gaussian_bits(t, v[0], v[1], v[2], 1e-9)?;
                    probe(t, b)
                },
            )?,
        ));

        let rate = RateConfig::toy();
        let mut s = ParamStore::new();
        let bank = RateTokenBank::new(&mut s, "tok", &rate, 4, &mut rng);
        let k: Vec<u32> = (0..rows)
            .map(|_| rate.v[data.gen_range(0..rate.v.len())])
            .collect();
        blocks.push((
            "rate_tokens",
            directional_check("rate_tokens", &[&s], &[], seed, 6, |t, p, _| {
                let y = bank.gather(t, &p[0], &k)?;
                probe(t, y)
            })?,
        ));

        let s = ParamStore::new();
        let y = rand_tensor(&mut data, &[rows, 6], -1.0, 1.0);
        blocks.push((
            "power_normalization",
            directional_check("power_normalization", &[&s], &[y], seed, 6, |t, _, v| {
                let n = normalize_power_tape(t, v[0], 3 * rows as u64)?;
                probe(t, n)
            })?,
        ));

        let hv = HvModel::new(small_hv(), &mut rng).unwrap();
        let patches = rand_tensor(&mut data, &[4, 48], 0.0, 1.0);
        blocks.push((
            "hv_analysis",
            directional_check(
                "hv_analysis",
                &[&hv.store],
                std::slice::from_ref(&patches),
                seed,
                6,
                |t, p, v| {
                    let y = hv.encode_latent(t, &p[0], v[0])?;
                    probe(t, y)
                },
            )?,
        ));
        let latent = rand_tensor(&mut data, &[4, 4], -20.0, 20.0);
        blocks.push((
            "hv_synthesis",
            directional_check(
                "hv_synthesis",
                &[&hv.store],
                std::slice::from_ref(&latent),
                seed,
                6,
                |t, p, v| {
                    let y = hv.decode_latent(t, &p[0], v[0])?;
                    probe(t, y)
                },
            )?,
        ));

        let jscc = JsccModel::new(small_jscc(), &mut rng).unwrap();
        let k: Vec<u32> = (0..4)
            .map(|_| jscc.cfg.rate.v[data.gen_range(0..jscc.cfg.rate.v.len())])
            .collect();
        blocks.push((
            "jscc_encoder",
            directional_check(
                "jscc_encoder",
                &[&jscc.store],
                std::slice::from_ref(&latent),
                seed,
                6,
                |t, p, v| {
                    let y = jscc.encode_tape(t, &p[0], v[0], &k)?;
                    probe(t, y)
                },
            )?,
        ));
        let y_hat = rand_tensor(
            &mut data,
            &[4, 2 * jscc.cfg.rate.max_k() as usize],
            -1.0,
            1.0,
        );
        blocks.push((
            "jscc_decoder",
            directional_check(
                "jscc_decoder",
                &[&jscc.store],
                &[y_hat],
                seed,
                6,
                |t, p, v| {
                    let x = jscc.decode_tape(t, &p[0], v[0], &k)?;
                    probe(t, x)
                },
            )?,
        ));

        for (name, e) in &blocks {
            if *e >= 1e-4 {
                return Err(format!("block {name}, seed {seed}: relative error {e:.2e}"));
            }
            if *e > worst_block.0 {
                worst_block = (*e, name);
            }
        }

        // Network level: the full codec loss and the full joint loss.
        let levels = PatchImportance::new((0..4).map(|_| data.gen_range(0..4)).collect()).unwrap();
        let w = importance_weights(&levels);
        let noise_seed = seed.wrapping_mul(31);
        let lambda = hv.cfg.lambda_hv;
        let hv_err = directional_check("hv_loss", &[&hv.store], &[], seed, 8, |t, p, _| {
            let input = t.constant(patches.clone());
            let pass = hv.forward(
                t,
                &p[0],
                input,
                Mode::Train,
                &mut RngStream::new(noise_seed),
            )?;
            let s_hat = hv.decode_latent(t, &p[0], pass.x_tilde)?;
            let rate = t.add(pass.rate_x, pass.rate_z)?;
            hv_loss(t, input, s_hat, rate, lambda, &w)
        })?;
        let noise = rand_tensor(
            &mut data,
            &[4, 2 * jscc.cfg.rate.max_k() as usize],
            -0.3,
            0.3,
        );
        let mask = jscc.mask(&k).unwrap();
        let joint_err = directional_check(
            "joint_loss",
            &[&hv.store, &jscc.store],
            &[],
            seed,
            8,
            |t, p, _| {
                let input = t.constant(patches.clone());
                let pass = hv.forward(
                    t,
                    &p[0],
                    input,
                    Mode::Train,
                    &mut RngStream::new(noise_seed),
                )?;
                let recon_hv = hv.decode_latent(t, &p[0], pass.x_tilde)?;
                let y = jscc.encode_tape(t, &p[1], pass.x, &k)?;
                let total = k.iter().map(|&v| u64::from(v)).sum();
                let y = normalize_power_tape(t, y, total)?;
                let n = Tensor::new(
                    mask.shape().to_vec(),
                    mask.data()
                        .iter()
                        .zip(noise.data())
                        .map(|(m, z)| m * z)
                        .collect(),
                )?;
                let n = t.constant(n);
                let y = t.add(y, n)?;
                let x_hat = jscc.decode_tape(t, &p[1], y, &k)?;
                let s_hat = hv.decode_latent(t, &p[0], x_hat)?;
                let d = weighted_distortion(t, input, s_hat, &w)?;
                let d_hv = weighted_distortion(t, input, recon_hv, &w)?;
                let r = t.scale(pass.rate_x, 1e-3);
                let sum = t.add(d, d_hv)?;
                t.add(sum, r)
            },
        )?;
        for (name, e) in [("hv_loss", hv_err), ("joint_loss", joint_err)] {
            if e >= 1e-3 {
                return Err(format!(
                    "network {name}, seed {seed}: relative error {e:.2e}"
                ));
            }
            if e > worst_net.0 {
                worst_net = (e, name);
            }
        }
    }
    within(t.elapsed(), 120.0)?;
    Ok(format!(
        "10 seeds; worst block {} {:.1e}, worst network {} {:.1e}; {:.1} s",
        worst_block.1,
        worst_block.0,
        worst_net.1,
        worst_net.0,
        t.elapsed().as_secs_f64()
    ))
}

fn trained_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join("checkpoints")
}

fn trained_config() -> Result<ExperimentConfig, String> {
    let cfg = ExperimentConfig::default();
    let t = Instant::now();
    if ensure_trained(&cfg, &trained_dir()).map_err(|e| e.to_string())? {
        eprintln!(
            "trained the default regimen in {:.0} s",
            t.elapsed().as_secs_f64()
        );
    }
    Ok(cfg)
}

fn cells() -> Result<BTreeMap<(String, String), CellSummary>, String> {
    let cfg = trained_config()?;
    let systems =
        load_systems(&cfg, &cfg.benchmark.methods, &trained_dir()).map_err(|e| e.to_string())?;
    let test =
        load_split(&cfg, Split::Test, Some(cfg.benchmark.images)).map_err(|e| e.to_string())?;
    let reports = evaluate(&cfg, &systems, &test).map_err(|e| e.to_string())?;
    Ok(summarize(&reports))
}

fn cell<'a>(
    c: &'a BTreeMap<(String, String), CellSummary>,
    m: Method,
    snr: &str,
) -> Result<&'a CellSummary, String> {
    c.get(&(m.name().to_string(), snr.to_string()))
        .ok_or_else(|| format!("no results for {m} at {snr} dB"))
}

fn level(v: Option<f64>, what: &str) -> Result<f64, String> {
    v.ok_or_else(|| format!("no {what} patches in the test split"))
}

fn end_to_end_ordering() -> Outcome {
    let c = cells()?;
    let sa = cell(&c, Method::SaOosc, "10")?;
    let nt = cell(&c, Method::NtsccEntropyOnly, "10")?;
    let fixed = cell(&c, Method::FixedRate, "10")?;
    let mut failures = Vec::new();

    let (k3, k1) = (
        level(sa.mean_k[3], "level-3")?,
        level(sa.mean_k[1], "level-1")?,
    );
    let a = k3 > k1;
    let gap = level(sa.mean_psnr[3], "level-3")? - level(sa.mean_psnr[0], "background")?;
    let b = gap >= 3.0;
    let matched =
        |x: &CellSummary, y: &CellSummary| (x.mean_cbr - y.mean_cbr).abs() <= 0.05 * y.mean_cbr;
    let c_ok = matched(sa, nt) && sa.mean_sad >= nt.mean_sad;
    let mut lowest = true;
    let mut sads = Vec::new();
    for m in Method::ALL {
        let x = cell(&c, m, "10")?;
        sads.push(format!("{m} {:.3} dB @ cbr {:.4}", x.mean_sad, x.mean_cbr));
        if m != Method::FixedRate && (!matched(x, fixed) || x.mean_sad <= fixed.mean_sad) {
            lowest = false;
        }
    }
    for (ok, label) in [
        (a, format!("(a) k level-3 {k3:.2} vs level-1 {k1:.2}")),
        (b, format!("(b) PSNR level-3 minus background {gap:.2} dB")),
        (
            c_ok,
            format!(
                "(c) sa_oosc SAD {:.3} vs ntscc_entropy_only {:.3}",
                sa.mean_sad, nt.mean_sad
            ),
        ),
        (lowest, "(d) fixed_rate lowest SAD".to_string()),
    ] {
        if !ok {
            failures.push(label);
        }
    }
    let detail = format!(
        "k3 {k3:.2} / k1 {k1:.2}; gap {gap:.2} dB; {}",
        sads.join(", ")
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("failed {}; {detail}", failures.join("; ")))
    }
}

fn snr_sweep() -> Outcome {
    let c = cells()?;
    let mut psnr = Vec::new();
    for snr in ["0", "5", "10", "15", "20"] {
        psnr.push(level(
            cell(&c, Method::SaOosc, snr)?.mean_psnr[3],
            "level-3",
        )?);
    }
    let text = psnr
        .iter()
        .map(|p| format!("{p:.3}"))
        .collect::<Vec<_>>()
        .join(" <= ");
    ensure(psnr.windows(2).all(|w| w[1] >= w[0]), || {
        format!("level-3 PSNR over 0..20 dB: {text}")
    })?;
    Ok(format!("level-3 PSNR {text}"))
}

fn objects(pairs: &[(i64, u8)]) -> LabelSet {
    LabelSet {
        granularity: Granularity::Object,
        labels: pairs.iter().copied().collect(),
    }
}

fn agreement_evaluator() -> Outcome {
    let acc = |c: Option<CategoryAccuracy>| c.map(|c| (c.correct, c.total));
    // high: 3 of 4, medium: 1 of 2, low: 2 of 2 -> overall 6 of 8
    let reference = objects(&[
        (1, 3),
        (2, 3),
        (3, 3),
        (4, 3),
        (5, 2),
        (6, 2),
        (7, 1),
        (8, 1),
    ]);
    let pred = objects(&[
        (1, 3),
        (2, 3),
        (3, 3),
        (4, 2),
        (5, 2),
        (6, 1),
        (7, 1),
        (8, 1),
    ]);
    let r = agreement(&[(pred, reference.clone())]).map_err(|e| e.to_string())?;
    ensure(
        acc(r.per_level[3]) == Some((3, 4)) && r.per_level[3].unwrap().accuracy() == 0.75,
        || format!("{:?}", r.per_level[3]),
    )?;
    ensure(
        acc(r.per_level[2]) == Some((1, 2)) && r.per_level[2].unwrap().accuracy() == 0.5,
        || format!("{:?}", r.per_level[2]),
    )?;
    ensure(acc(r.per_level[1]) == Some((2, 2)), || {
        format!("{:?}", r.per_level[1])
    })?;
    ensure(r.per_level[0].is_none(), || {
        "background category should be empty".into()
    })?;
    ensure(
        r.overall.correct == 6 && r.overall.total == 8 && r.overall.accuracy() == 0.75,
        || format!("{:?}", r.overall),
    )?;

    // patch level over two images: background 2/3, high 1/2, low 0/1 -> 3/6
    let p1 = PatchImportance::new(vec![0, 0, 3, 1]).unwrap();
    let r1 = PatchImportance::new(vec![0, 3, 3, 0]).unwrap();
    let p2 = PatchImportance::new(vec![0, 2]).unwrap();
    let r2 = PatchImportance::new(vec![0, 1]).unwrap();
    let r = agreement(&[
        (LabelSet::patches(&p1), LabelSet::patches(&r1)),
        (LabelSet::patches(&p2), LabelSet::patches(&r2)),
    ])
    .map_err(|e| e.to_string())?;
    ensure(acc(r.per_level[0]) == Some((2, 3)), || {
        format!("background {:?}", r.per_level[0])
    })?;
    ensure(acc(r.per_level[3]) == Some((1, 2)), || {
        format!("high {:?}", r.per_level[3])
    })?;
    ensure(acc(r.per_level[1]) == Some((0, 1)), || {
        format!("low {:?}", r.per_level[1])
    })?;
    ensure(r.overall.accuracy() == 0.5, || {
        format!("overall {:?}", r.overall)
    })?;

    for x in [reference, LabelSet::patches(&r1)] {
        let same = agreement(&[(x.clone(), x)]).map_err(|e| e.to_string())?;
        ensure(same.overall.accuracy() == 1.0, || {
            "agreement(x, x) below 100%".into()
        })?;
    }
    Ok("object and patch hand cases exact; agreement(x, x) = 100%".into())
}

fn determinism() -> Outcome {
    let cfg = trained_config()?;
    let base = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut outputs = Vec::new();
    for run in ["bench_a", "bench_b"] {
        let out = base.join(run);
        let _ = fs::remove_dir_all(&out);
        run_benchmark(&cfg, &trained_dir(), &out).map_err(|e| e.to_string())?;
        let read = |f: &str| fs::read(out.join(f)).map_err(|e| format!("{f}: {e}"));
        outputs.push((read("benchmark.csv")?, read("summary.csv")?));
    }
    ensure(outputs[0] == outputs[1], || {
        "benchmark CSVs differ between runs".into()
    })?;
    Ok(format!(
        "two runs, {} bytes of benchmark.csv identical",
        outputs[0].0.len()
    ))
}

fn main() -> ExitCode {
    // cargo passes harness flags such as `--nocapture`; a bare word filters criteria.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [Criterion; 11] = [
        (1, "power constraint", power_constraint),
        (2, "AWGN statistics", awgn_statistics),
        (3, "rate allocation", rate_allocation),
        (4, "entropy model", entropy_model),
        (5, "weights and SAD", weights_and_sad),
        (6, "patch labeling", patch_labeling),
        (7, "gradient correctness", gradient_correctness),
        (8, "end-to-end ordering", end_to_end_ordering),
        (9, "SNR sweep", snr_sweep),
        (10, "agreement evaluator", agreement_evaluator),
        (11, "determinism", determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if filter
            .as_deref()
            .is_some_and(|f| !name.contains(f) && f != id.to_string())
        {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
