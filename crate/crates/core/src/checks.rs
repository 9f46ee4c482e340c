//! Numerical checks of the model's defining properties, shared by the
//! acceptance suite and the `selftest` command.
//!
//! Each check runs at a fixed scale and reports whether its tolerance held
//! together with the measured numbers.

use std::time::Instant;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{gaussian_sampling_report, mmd, sample_brwp, sample_mean_cov, second_moment};
use crate::datasets::{linear_gaussian_problem, sample_base, sample_benchmark, DatasetId};
use crate::diffeng::Tensor;
use crate::dynamics::{hjb_residuals, Flow, FlowOptions, TimeGrid};
use crate::error::Result;
use crate::layer::{approx_score, rwpo_kernel_1d, soft_threshold, sparse_attention_step, KernelForm, RwpoParams, TokenBatch};
use crate::objective::BayesProblem;
use crate::potential::{AnalyticField, DriftPotential, FieldValues};
use crate::trainer::{
    base_samples, evaluate_generative, generative_step, smoothed, split_validation, train, Mode, TrainConfig, TrainData,
    TrainOutcome,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("{tag} {} ({:.1}s): {}", self.name, self.seconds, self.detail)
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Check { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Total-loss gradients against central differences on a tiny instance.
pub fn gradient_check() -> Check {
    timed("gradient correctness", || {
        let cfg = TrainConfig { width: 8, depth: 2, steps: 4, lambda_init: 0.5, beta_init: 1.0, batch_size: 8, ..Default::default() };
        let grid = cfg.grid()?;
        let mut potential = DriftPotential::new(2, cfg.width, cfg.depth, 3)?;
        // move the quadratic part off zero so every tensor matters
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in [&mut potential.quad_a, &mut potential.lin_b] {
            let noise = sample_base(t.nrows(), t.ncols(), rand::Rng::gen(&mut rng));
            *t = &*t + &(noise * 0.3);
        }
        let rwpo = cfg.rwpo_params()?;
        let x = sample_benchmark(DatasetId::Moons, 8, 5)?;
        let (_, grads) = generative_step(&potential, &rwpo, grid, &x, &cfg)?;
        let loss = |p: &DriftPotential, r: &RwpoParams| evaluate_generative(p, r, grid, &x, &cfg).map(|l| l.total);
        let step = 1e-5;
        let names: Vec<String> = potential.params().into_iter().map(|(n, _)| n).collect();
        let mut worst = (0.0f64, String::new());
        for (k, name) in names.iter().enumerate() {
            let shape = potential.params()[k].1.dim();
            let mut fd = Vec::with_capacity(shape.0 * shape.1);
            for idx in 0..shape.0 * shape.1 {
                let at = (idx / shape.1, idx % shape.1);
                let mut p = potential.clone();
                p.params_mut()[k][at] += step;
                let up = loss(&p, &rwpo)?;
                p.params_mut()[k][at] -= 2.0 * step;
                let down = loss(&p, &rwpo)?;
                fd.push((up - down) / (2.0 * step));
            }
            let e = rel_err(grads[k].as_slice().expect("standard layout"), &fd);
            if e >= worst.0 {
                worst = (e, name.clone());
            }
        }
        let raw: [(&str, fn(&RwpoParams) -> f64, fn(&mut RwpoParams, f64)); 2] = [
            ("raw_lambda", RwpoParams::raw_lambda, RwpoParams::set_raw_lambda),
            ("raw_beta", RwpoParams::raw_beta, RwpoParams::set_raw_beta),
        ];
        for (i, (name, get, set)) in raw.into_iter().enumerate() {
            let mut r = rwpo.clone();
            let v = get(&r);
            set(&mut r, v + step);
            let up = loss(&potential, &r)?;
            set(&mut r, v - step);
            let down = loss(&potential, &r)?;
            let fd = (up - down) / (2.0 * step);
            let e = rel_err(&[grads[names.len() + i][[0, 0]]], &[fd]);
            if e >= worst.0 {
                worst = (e, name.to_string());
            }
        }
        Ok((worst.0 < 1e-4, format!("worst relative error {:.2e} on {} (tolerance 1e-4)", worst.0, worst.1)))
    })
}

/// Max-over-grid error of the attention score against the quadrature oracle
/// for each step size.
pub fn score_errors(hs: &[f64]) -> Result<Vec<f64>> {
    let samples = sample_base(32, 1, 11);
    let keys = samples.clone();
    let ys: Vec<f64> = samples.column(0).to_vec();
    let grid = Array2::from_shape_fn((41, 1), |(i, _)| -2.0 + 0.1 * i as f64);
    hs.iter()
        .map(|&h| {
            let p = RwpoParams::new(1.0, 1.0, h)?;
            let approx = approx_score(&grid, &keys, &p)?;
            let mut worst = 0.0f64;
            for (i, &x) in grid.column(0).iter().enumerate() {
                let (_, oracle) = rwpo_kernel_1d(&ys, x, &p)?;
                worst = worst.max((approx[[i, 0]] - oracle).abs());
            }
            Ok(worst)
        })
        .collect()
}

pub fn score_consistency() -> Check {
    timed("score consistency", || {
        let hs = [0.2, 0.1, 0.05, 0.025];
        let e = score_errors(&hs)?;
        let monotone = e.windows(2).all(|w| w[1] < w[0]);
        let halved = e[3] < 0.5 * e[0];
        Ok((monotone && halved, format!("max errors {:.4} {:.4} {:.4} {:.4} for h = 0.2 .. 0.025", e[0], e[1], e[2], e[3])))
    })
}

/// Backward integration of `φ = ½xᵀdiag(a)x` against the exact log-det of the
/// discrete affine map, single tokens with attention on and `λ = 0`.
pub fn affine_logdet_errors(ms: &[usize]) -> Result<Vec<f64>> {
    let a: [f64; 2] = [0.7, 0.3];
    let mut p = DriftPotential::zero(2, 3, 1);
    p.quad_a = Tensor::from_shape_fn((3, 3), |(i, j)| if i == j && i < 2 { a[i].sqrt() } else { 0.0 });
    let starts = [[0.3, -0.2], [1.5, 0.8], [-2.0, 0.1]];
    ms.iter()
        .map(|&m| {
            let grid = TimeGrid::new(1.0, m)?;
            let rp = RwpoParams::new(0.0, 1.0, grid.h())?;
            let flow = Flow::new(&p, &rp, grid)?;
            // per step the map is diag(1 − a_i h)
            let exact: f64 = a.iter().map(|ai| m as f64 * (1.0 - ai * grid.h()).ln()).sum();
            let mut worst = 0.0f64;
            for x in starts {
                let traj = flow.backward(&TokenBatch::new(ndarray::arr2(&[x]), m)?)?;
                let change = traj.logdet_accum().expect("tracked")[0];
                // log ρ_T(x) − log ρ_0(x⁰) is −C by the scheme and log|det| by the map
                worst = worst.max((-change - exact).abs());
            }
            Ok(worst)
        })
        .collect()
}

pub fn affine_logdet() -> Check {
    timed("affine log-density", || {
        let e = affine_logdet_errors(&[16, 32, 64])?;
        let halves = e.windows(2).all(|w| w[1] <= 0.5 * w[0]);
        Ok((halves && e[2] < 5e-2, format!("max errors {:.3e} {:.3e} {:.3e} for M = 16, 32, 64", e[0], e[1], e[2])))
    })
}

/// Inviscid Burgers value function `a x²/(2(1 − a(T − t)))`.
pub fn hjb_exact_solution() -> Check {
    timed("HJB residual on exact solution", || {
        let (a, horizon) = (0.9, 1.0);
        let field = AnalyticField::new(1, move |x: &Array2<f64>, t: f64| {
            let den = 1.0 - a * (horizon - t);
            FieldValues {
                grad_x: x.mapv(|v| a * v / den),
                dt: x.column(0).iter().map(|v| -a * a * v * v / (2.0 * den * den)).collect(),
                laplacian: vec![a / den; x.nrows()],
            }
        });
        let x = Array2::from_shape_fn((81, 1), |(i, _)| -4.0 + 0.1 * i as f64);
        let mut worst = 0.0f64;
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            let r = hjb_residuals(&field, 0.0, 0.0, &x, t, 1.0)?;
            worst = r.iter().fold(worst, |m, v| m.max(v.abs()));
        }
        Ok((worst <= 1e-10, format!("max |R| = {worst:.2e} over x in [-4, 4], t in [0, 1], a = 0.9")))
    })
}

/// Moment-matched KL under BRWP sampling toward `N(0, 1)` from `N(0, 4)`
/// against the decay bound, for `λ ∈ {0, 1, 2}`.
pub fn kl_bound(n: usize, m: usize) -> Check {
    timed("KL decay bound", || {
        let grid = TimeGrid::new(1.0, m)?;
        let x0 = TokenBatch::new(sample_base(n, 1, 21) * 2.0, 0)?;
        let lambdas = [0.0, 1.0, 2.0];
        let reports = crate::par::map_indices(lambdas.len(), |i| {
            let rp = RwpoParams::new(lambdas[i], 1.0, grid.h())?;
            gaussian_sampling_report(1.0, &rp, grid, &x0, 50, 31)
        });
        let reports = reports.into_iter().collect::<Result<Vec<_>>>()?;
        let mut ok = true;
        let mut parts = Vec::new();
        for (lam, rep) in lambdas.iter().zip(&reports) {
            let bad: Vec<usize> = (0..rep.rows.len())
                .filter(|&k| rep.rows[k].kl_est > rep.rows[k].kl_bound + 3.0 * rep.kl_std_err[k])
                .collect();
            ok &= bad.is_empty();
            let last = rep.rows.last().expect("steps");
            let first_bad = bad.first().map_or("none".to_string(), |&k| format!("{:.3}", rep.rows[k].t));
            parts.push(format!(
                "λ={lam}: KL(T)={:.4} bound(T)={:.4}, {} of {} steps above, first at t={first_bad}",
                last.kl_est,
                last.kl_bound,
                bad.len(),
                rep.rows.len()
            ));
        }
        let (r0, r2) = (&reports[0], &reports[2]);
        let above = (0..r0.rows.len())
            .filter(|&k| {
                let slack = 3.0 * (r0.kl_std_err[k].powi(2) + r2.kl_std_err[k].powi(2)).sqrt();
                r2.rows[k].kl_est > r0.rows[k].kl_est + slack
            })
            .count();
        ok &= above == 0;
        parts.push(format!("λ=2 above λ=0 at {above} steps"));
        Ok((ok, parts.join("; ")))
    })
}

/// Second moments under `∇φ = −x` with `λ = 2` and `λ = 0` from shared tokens.
pub fn moment_ordering() -> Check {
    timed("second-moment ordering", || {
        let (n, d) = (1000, 2);
        let grid = TimeGrid::new(1.0, 32)?;
        let x0 = TokenBatch::new(sample_base(n, d, 41) * 2.0, 0)?;
        let drift = |x: &[f64], _t: f64| x.iter().map(|v| -v).collect::<Vec<f64>>();
        let run = |lam: f64| -> Result<_> {
            let rp = RwpoParams::new(lam, 1.0, grid.h())?;
            sample_brwp(drift, &rp, grid, &x0)
        };
        let (with, without) = (run(2.0)?, run(0.0)?);
        let (m_with, m_without) = (second_moment(&with), second_moment(&without));
        let mut worst = f64::NEG_INFINITY;
        let mut ok = true;
        for (k, (a, b)) in with.batches.iter().zip(&without.batches).enumerate() {
            // paired per-token differences under the shared start
            let diff: Array1<f64> = a
                .points
                .rows()
                .into_iter()
                .zip(b.points.rows())
                .map(|(r, q)| r.dot(&r) - q.dot(&q))
                .collect();
            let se = diff.std(1.0) / (n as f64).sqrt();
            let gap = m_with[k].value - m_without[k].value;
            ok &= gap <= 3.0 * se;
            worst = worst.max(gap / se.max(1e-300));
        }
        let last = m_with.len() - 1;
        Ok((
            ok,
            format!(
                "M2(T) = {:.4} (λ=2) vs {:.4} (λ=0); largest gap {:.2} paired std errors",
                m_with[last].value, m_without[last].value, worst
            ),
        ))
    })
}

/// Configuration of the moons benchmark runs.
pub fn moons_config(attention: bool) -> TrainConfig {
    TrainConfig {
        dataset: "moons".into(),
        n_iters: 1500,
        batch_size: 512,
        width: 48,
        steps: 16,
        lr_start: 1e-2,
        lr_end: 1e-6,
        valid_fraction: 0.2,
        valid_every: 50,
        checkpoint_every: 0,
        attention,
        ..Default::default()
    }
}

/// One moons training run with its generated and held-out samples.
pub struct MoonsRun {
    pub outcome: TrainOutcome,
    pub generated: Array2<f64>,
    pub held_out: Array2<f64>,
    pub seconds: f64,
}

pub fn moons_run(attention: bool) -> Result<MoonsRun> {
    let cfg = moons_config(attention);
    let start = Instant::now();
    let x = sample_benchmark(DatasetId::Moons, 2500, 7)?;
    let outcome = train(&cfg, &TrainData::Samples(x.clone()))?;
    let (_, held_out) = split_validation(&x, cfg.valid_fraction, cfg.seed);
    let z = base_samples(held_out.nrows(), 2, &mut ChaCha8Rng::seed_from_u64(123));
    let opts = FlowOptions { track_density: false, ..cfg.flow_options() };
    let traj = Flow::new(&outcome.potential, &outcome.rwpo, outcome.grid)?.options(opts).forward(&TokenBatch::new(z, 0)?)?;
    let generated = traj.terminal().points.clone();
    Ok(MoonsRun { outcome, generated, held_out, seconds: start.elapsed().as_secs_f64() })
}

pub fn moons_benchmark(run: &Result<MoonsRun>) -> Check {
    timed("moons benchmark", || {
        let run = run.as_ref().map_err(clone_err)?;
        let gen = mmd(&run.generated, &run.held_out, None)?;
        let half = run.held_out.nrows() / 2;
        let a = run.held_out.slice(s![..half, ..]).to_owned();
        let b = run.held_out.slice(s![half.., ..]).to_owned();
        let halves = mmd(&a, &b, Some(gen.bandwidth))?;
        let ok = gen.mmd2 < 0.05 && gen.mmd2 < 1.5 * halves.mmd2 && run.seconds < 900.0;
        Ok((
            ok,
            format!(
                "MMD² {:.5} ± {:.5} (bandwidth {:.3}), held-out halves {:.5}, training {:.0}s",
                gen.mmd2, gen.std_err, gen.bandwidth, halves.mmd2, run.seconds
            ),
        ))
    })
}

fn clone_err(e: &crate::Error) -> crate::Error {
    crate::Error::InvalidParameter(format!("run failed: {e}"))
}

/// Final smoothed validation loss with the layer enabled against the plain
/// neural ODE.
pub fn validation_ordering(with: &Result<MoonsRun>, without: &Result<MoonsRun>) -> Check {
    timed("validation-loss ordering", || {
        let final_loss = |r: &MoonsRun| {
            let v: Vec<f64> = r.outcome.validation.iter().map(|v| v.loss.total).collect();
            *smoothed(&v, 5).last().expect("validation records")
        };
        let on = final_loss(with.as_ref().map_err(clone_err)?);
        let off = final_loss(without.as_ref().map_err(clone_err)?);
        Ok((on <= off + 0.05 * off.abs(), format!("smoothed validation loss {on:.4} with the layer, {off:.4} without")))
    })
}

/// Conditional flow for one measurement of a 2D linear-Gaussian model
/// against the conjugate posterior.
pub fn bayes_conjugate() -> Check {
    timed("conjugate posterior", || {
        let model = linear_gaussian_problem(2, 2, 5)?;
        let (_, ys) = model.sample_pairs(1, 6)?;
        let y = ys.row(0).to_owned();
        let (mean, cov) = model.posterior(&y)?;
        let problem = BayesProblem::new(y, Box::new(model.forward()), model.sigma, model.prior()?)?;
        let cfg = TrainConfig {
            mode: Mode::Bayesian,
            dataset: "linear_gaussian".into(),
            n_iters: 1000,
            batch_size: 256,
            width: 32,
            steps: 16,
            lr_start: 1e-2,
            lr_end: 1e-4,
            // the posterior minimises the likelihood term alone
            w_transport: 0.0,
            c_hjb: 0.0,
            valid_fraction: 0.0,
            valid_every: 0,
            checkpoint_every: 0,
            ..Default::default()
        };
        let out = train(&cfg, &TrainData::Conditional { problem, targets: None })?;
        let z = base_samples(4000, 2, &mut ChaCha8Rng::seed_from_u64(8));
        let traj = Flow::new(&out.potential, &out.rwpo, out.grid)?
            .options(FlowOptions { track_density: false, ..cfg.flow_options() })
            .forward(&TokenBatch::new(z, 0)?)?;
        let (m, c) = sample_mean_cov(&traj.terminal().points)?;
        let mean_err = (&m - &mean).mapv(|v| v * v).sum().sqrt() / mean.mapv(|v| v * v).sum().sqrt();
        let cov_err = (&c - &cov).mapv(|v| v * v).sum().sqrt() / cov.mapv(|v| v * v).sum().sqrt();
        Ok((
            mean_err < 0.1 && cov_err < 0.2,
            format!("mean relative error {mean_err:.3} (tolerance 0.1), covariance Frobenius relative error {cov_err:.3} (tolerance 0.2)"),
        ))
    })
}

fn within_ulps(a: f64, b: f64) -> bool {
    (a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(b.abs()).max(1.0)
}

/// Limits in which the layer collapses to simpler maps.
pub fn reductions() -> Check {
    timed("reductions", || {
        let mut failures = Vec::new();
        let pts = sample_base(1, 3, 51);
        for kernel in [KernelForm::Laplace, KernelForm::Printed] {
            let p = RwpoParams::new(0.0, 1.3, 0.05)?.with_kernel(kernel);
            let out = sparse_attention_step(&TokenBatch::new(pts.clone(), 0)?, &p)?;
            if out.points != pts {
                failures.push(format!("single token moved ({})", kernel.name()));
            }
        }
        let pts = sample_base(9, 2, 52);
        let p = RwpoParams::new(0.0, 2.0, 0.1)?.with_kernel(KernelForm::Printed);
        let out = sparse_attention_step(&TokenBatch::new(pts.clone(), 0)?, &p)?;
        let mean = pts.mean_axis(Axis(0)).expect("non-empty");
        let want = &pts + &((&pts - &mean) * 0.5);
        if !out.points.iter().zip(want.iter()).all(|(a, b)| within_ulps(*a, *b)) {
            failures.push("λ = 0 layer differs from the uniform-attention map".into());
        }
        let v: Vec<f64> = sample_base(50, 1, 53).column(0).to_vec();
        if soft_threshold(&v, 0.0)? != v {
            failures.push("soft threshold at 0 is not the identity".into());
        }
        let detail = if failures.is_empty() { "all exact".to_string() } else { failures.join("; ") };
        Ok((failures.is_empty(), detail))
    })
}

/// The quick checks: everything except the training runs.
pub fn quick_suite() -> Vec<Check> {
    vec![
        gradient_check(),
        score_consistency(),
        affine_logdet(),
        hjb_exact_solution(),
        kl_bound(2000, 128),
        moment_ordering(),
        reductions(),
    ]
}
