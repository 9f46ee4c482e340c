//! Diagnostics for the theory: moments, KL proxies and bounds, KDE, MMD, and
//! a sampler driven by a known drift.

use std::f64::consts::{FRAC_2_PI, PI};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{Flow, FlowOptions, TimeGrid, Trajectory};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, CsvWriter};
use crate::layer::{RwpoParams, TokenBatch};
use crate::par;
use crate::potential::{AnalyticField, FieldValues};

/// Constants entering the KL decay bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryParams {
    pub gamma: f64,
    pub c_ls: f64,
    pub lambda: f64,
}

impl TheoryParams {
    pub fn new(gamma: f64, c_ls: f64, lambda: f64) -> Result<Self> {
        if !(gamma >= 0.0) || !(c_ls > 0.0) || !(lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need γ ≥ 0, C_LS > 0, λ ≥ 0; got γ={gamma}, C_LS={c_ls}, λ={lambda}"
            )));
        }
        Ok(TheoryParams { gamma, c_ls, lambda })
    }

    /// Target `N(0, σ²)`: `C_LS = 2σ²` and `γ = √(2/π)`.
    pub fn gaussian(sigma2: f64, lambda: f64) -> Result<Self> {
        Self::new(FRAC_2_PI.sqrt(), 2.0 * sigma2, lambda)
    }

    pub fn a(&self) -> f64 {
        2.0 / self.c_ls
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    /// Current law `(a/2)e^{−a|x|}`, target `(b/2)e^{−b|x|}`.
    Laplace { a: f64, b: f64 },
    /// Current law `N(0, τ²)`, target `N(0, σ²)`.
    Gaussian { tau2: f64, sigma2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Consistency {
    pub d: f64,
    pub fisher: f64,
    /// `D/√I`, absent when `I = 0`.
    pub gamma_effective: Option<f64>,
}

/// Directional dissipation `D` and relative Fisher information `I` of a 1D
/// family in closed form.
pub fn directional_consistency(family: Family) -> Result<Consistency> {
    let (d, fisher) = match family {
        Family::Laplace { a, b } => {
            if !(a > 0.0 && b > 0.0) {
                return Err(Error::InvalidParameter(format!("Laplace rates must be positive, got a={a}, b={b}")));
            }
            (b - a, (a - b) * (a - b))
        }
        Family::Gaussian { tau2, sigma2 } => {
            if !(tau2 > 0.0 && sigma2 > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "variances must be positive, got τ²={tau2}, σ²={sigma2}"
                )));
            }
            let c = 1.0 / sigma2 - 1.0 / tau2;
            let tau = tau2.sqrt();
            (FRAC_2_PI.sqrt() * c * tau, c * c * tau2)
        }
    };
    let gamma_effective = (fisher > 0.0).then(|| d / fisher.sqrt());
    Ok(Consistency { d, fisher, gamma_effective })
}

/// `((√y0 + λγ/√a)e^{−at/2} − λγ/√a)₊²`.
pub fn kl_upper_bound(y0: f64, t: f64, p: &TheoryParams) -> Result<f64> {
    if !(y0 >= 0.0) || !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!("need y0 ≥ 0 and t ≥ 0, got y0={y0}, t={t}")));
    }
    let a = p.a();
    let shift = p.lambda * p.gamma / a.sqrt();
    let z = (y0.sqrt() + shift) * (-0.5 * a * t).exp() - shift;
    Ok(z.max(0.0).powi(2))
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

fn mean_and_stderr(v: ArrayView1<'_, f64>) -> Estimate {
    let n = v.len() as f64;
    let value = v.sum() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - value).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Estimate { value, std_err: (var / n).sqrt() }
}

fn per_step(traj: &Trajectory, f: impl Fn(ArrayView1<'_, f64>) -> f64) -> Vec<Estimate> {
    traj.batches
        .iter()
        .map(|b| {
            let vals: Array1<f64> = b.points.rows().into_iter().map(&f).collect();
            mean_and_stderr(vals.view())
        })
        .collect()
}

/// `E‖x‖²` at each recorded step.
pub fn second_moment(traj: &Trajectory) -> Vec<Estimate> {
    per_step(traj, |r| r.dot(&r))
}

/// `E‖x‖₁` at each recorded step.
pub fn l1_moment(traj: &Trajectory) -> Vec<Estimate> {
    per_step(traj, |r| r.iter().map(|x| x.abs()).sum())
}

/// Sample mean and (unbiased) covariance.
pub fn sample_mean_cov(x: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 samples, got {n}")));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let c = x - &mean;
    let cov = c.t().dot(&c) / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn to_na(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// `KL(N(m₁, S₁) ‖ N(m₂, S₂))`.
pub fn gaussian_kl(m1: &Array1<f64>, s1: &Array2<f64>, m2: &Array1<f64>, s2: &Array2<f64>) -> Result<f64> {
    let d = m1.len();
    let bad = || Error::InvalidParameter("covariance is not positive definite".into());
    let l1 = to_na(s1).cholesky().ok_or_else(bad)?;
    let l2 = to_na(s2).cholesky().ok_or_else(bad)?;
    let logdet = |l: &nalgebra::Cholesky<f64, nalgebra::Dyn>| 2.0 * l.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let tr = l2.solve(&to_na(s1)).trace();
    let dm = DVector::from_iterator(d, m2.iter().zip(m1).map(|(a, b)| a - b));
    let quad = dm.dot(&l2.solve(&dm));
    Ok(0.5 * (tr + quad - d as f64 + logdet(&l2) - logdet(&l1)))
}

/// KL from the moment-matched Gaussian fit of `x` to `N(mean, cov)`.
pub fn gaussian_fit_kl(x: &Array2<f64>, mean: &Array1<f64>, cov: &Array2<f64>) -> Result<f64> {
    let (m, s) = sample_mean_cov(x)?;
    gaussian_kl(&m, &s, mean, cov)
}

/// [`gaussian_fit_kl`] with a bootstrap standard error.
pub fn gaussian_fit_kl_bootstrap(
    x: &Array2<f64>,
    mean: &Array1<f64>,
    cov: &Array2<f64>,
    n_boot: usize,
    seed: u64,
) -> Result<Estimate> {
    let value = gaussian_fit_kl(x, mean, cov)?;
    let n = x.nrows();
    let reps = par::map_indices(n_boot, |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        gaussian_fit_kl(&x.select(Axis(0), &idx), mean, cov)
    });
    let reps: Vec<f64> = reps.into_iter().collect::<Result<_>>()?;
    let std_err = if reps.len() > 1 { mean_and_stderr(Array1::from(reps.clone()).view()).std_err * (reps.len() as f64).sqrt() } else { 0.0 };
    Ok(Estimate { value, std_err })
}

/// Forward BRWP stepping with a known drift `∇φ(x, t)` in place of the learned
/// potential. Density is not tracked.
pub fn sample_brwp<G>(grad: G, rp: &RwpoParams, grid: TimeGrid, x0: &TokenBatch) -> Result<Trajectory>
where
    G: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    let d = x0.dim();
    let field = AnalyticField::new(d, |x: &Array2<f64>, t: f64| {
        let mut grad_x = Array2::zeros(x.raw_dim());
        for (mut out, row) in grad_x.rows_mut().into_iter().zip(x.rows()) {
            let g = grad(row.as_slice().expect("standard layout"), t);
            out.assign(&ArrayView1::from(&g[..]));
        }
        FieldValues { grad_x, dt: vec![0.0; x.nrows()], laplacian: vec![0.0; x.nrows()] }
    });
    Flow::new(&field, rp, grid)?
        .options(FlowOptions { track_density: false, ..FlowOptions::default() })
        .forward(x0)
}

/// `β⁻¹∇log N(x; 0, σ²I)`, the drift whose λ = 0 flow leaves that Gaussian
/// invariant.
pub fn gaussian_target_drift(sigma2: f64, beta: f64) -> impl Fn(&[f64], f64) -> Vec<f64> + Sync {
    move |x: &[f64], _t: f64| x.iter().map(|v| -v / (sigma2 * beta)).collect()
}

/// Regular 2D evaluation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Grid2 {
    pub fn regular(x_range: (f64, f64), y_range: (f64, f64), nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidParameter(format!("grid needs at least 2 nodes per axis, got {nx}x{ny}")));
        }
        let axis = |(lo, hi): (f64, f64), n: usize| -> Vec<f64> {
            (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
        };
        Ok(Grid2 { xs: axis(x_range, nx), ys: axis(y_range, ny) })
    }

    pub fn cell_area(&self) -> f64 {
        (self.xs[1] - self.xs[0]) * (self.ys[1] - self.ys[0])
    }
}

/// Gaussian-kernel density estimate; entry `[i, j]` is the density at
/// `(xs[i], ys[j])`.
pub fn kde_2d(samples: &Array2<f64>, bandwidth: f64, grid: &Grid2) -> Result<Array2<f64>> {
    if samples.ncols() != 2 {
        return Err(Error::dims(format!("kde_2d needs 2D samples, got {} columns", samples.ncols())));
    }
    if samples.nrows() == 0 {
        return Err(Error::InvalidParameter("kde_2d needs at least one sample".into()));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let norm = 1.0 / (2.0 * PI * bandwidth * bandwidth * samples.nrows() as f64);
    let inv = 0.5 / (bandwidth * bandwidth);
    let rows = par::map_indices(grid.xs.len(), |i| {
        let gx = grid.xs[i];
        grid.ys
            .iter()
            .map(|&gy| {
                samples
                    .rows()
                    .into_iter()
                    .map(|s| (-((s[0] - gx).powi(2) + (s[1] - gy).powi(2)) * inv).exp())
                    .sum::<f64>()
                    * norm
            })
            .collect::<Vec<f64>>()
    });
    Ok(Array2::from_shape_fn((grid.xs.len(), grid.ys.len()), |(i, j)| rows[i][j]))
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Points used for the median heuristic, at most this many per set.
const MEDIAN_SUBSAMPLE: usize = 1000;

/// Median pairwise distance over the pooled samples.
pub fn median_heuristic(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let pick = |x: &Array2<f64>| -> Vec<usize> {
        let stride = x.nrows().div_ceil(MEDIAN_SUBSAMPLE).max(1);
        (0..x.nrows()).step_by(stride).collect()
    };
    let pooled = ndarray::concatenate(Axis(0), &[a.select(Axis(0), &pick(a)).view(), b.select(Axis(0), &pick(b)).view()])
        .map_err(|e| Error::dims(e.to_string()))?;
    let n = pooled.nrows();
    let mut dists: Vec<f64> = par::map_indices(n, |i| {
        ((i + 1)..n).map(|j| sq_dist(pooled.row(i), pooled.row(j)).sqrt()).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    if dists.is_empty() {
        return Err(Error::InvalidParameter("median heuristic needs at least two points".into()));
    }
    let mid = dists.len() / 2;
    let (_, m, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(*m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmdEstimate {
    pub mmd2: f64,
    pub std_err: f64,
    pub bandwidth: f64,
}

/// Unbiased RBF-kernel MMD² with kernel `exp(−‖x−y‖²/(2σ²))`; `σ` defaults
/// to the median heuristic.
///
/// Equal sizes use the paired U-statistic over `h(zᵢ, zⱼ)`; otherwise the
/// cross term averages over all pairs. The standard error combines the first
/// and second order terms of the U-statistic variance.
pub fn mmd(a: &Array2<f64>, b: &Array2<f64>, bandwidth: Option<f64>) -> Result<MmdEstimate> {
    let (m, n) = (a.nrows(), b.nrows());
    if m < 2 || n < 2 {
        return Err(Error::InvalidParameter(format!("mmd needs at least 2 samples per set, got {m} and {n}")));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::dims(format!("sample sets in ℝ^{} and ℝ^{}", a.ncols(), b.ncols())));
    }
    let sigma = match bandwidth {
        Some(s) => s,
        None => median_heuristic(a, b)?,
    };
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("degenerate bandwidth {sigma}")));
    }
    let inv = 0.5 / (sigma * sigma);
    let k = |x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>| (-sq_dist(x, y) * inv).exp();

    if m == n {
        // per row: (Σ_{j≠i} h_ij, Σ_{j≠i} h_ij²)
        let rows = par::map_indices(n, |i| {
            let (mut s, mut s2) = (0.0, 0.0);
            for j in (0..n).filter(|&j| j != i) {
                let h = k(a.row(i), a.row(j)) + k(b.row(i), b.row(j)) - k(a.row(i), b.row(j)) - k(a.row(j), b.row(i));
                s += h;
                s2 += h * h;
            }
            (s, s2)
        });
        let nf = n as f64;
        let pairs = nf * (nf - 1.0);
        let mmd2 = rows.iter().map(|r| r.0).sum::<f64>() / pairs;
        let row_means: Vec<f64> = rows.iter().map(|r| r.0 / (nf - 1.0)).collect();
        let zeta1 = row_means.iter().map(|g| (g - mmd2).powi(2)).sum::<f64>() / nf;
        let zeta2 = (rows.iter().map(|r| r.1).sum::<f64>() / pairs - mmd2 * mmd2).max(0.0);
        let var = 4.0 * (nf - 2.0) / pairs * zeta1 + 2.0 / pairs * zeta2;
        return Ok(MmdEstimate { mmd2, std_err: var.max(0.0).sqrt(), bandwidth: sigma });
    }

    // per point: (mean within-set kernel, mean cross kernel)
    let within = |x: &Array2<f64>, y: &Array2<f64>| {
        let nx = x.nrows();
        par::map_indices(nx, |i| {
            let w = (0..nx).filter(|&j| j != i).map(|j| k(x.row(i), x.row(j))).sum::<f64>() / (nx - 1) as f64;
            let c = y.rows().into_iter().map(|r| k(x.row(i), r)).sum::<f64>() / y.nrows() as f64;
            (w, c)
        })
    };
    let ga = within(a, b);
    let gb = within(b, a);
    let kxx = ga.iter().map(|g| g.0).sum::<f64>() / m as f64;
    let kyy = gb.iter().map(|g| g.0).sum::<f64>() / n as f64;
    let kxy = ga.iter().map(|g| g.1).sum::<f64>() / m as f64;
    let mmd2 = kxx + kyy - 2.0 * kxy;
    let proj_var = |g: &[(f64, f64)]| {
        let v: Vec<f64> = g.iter().map(|(w, c)| w - c).collect();
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let var = 4.0 * (proj_var(&ga) / m as f64 + proj_var(&gb) / n as f64);
    Ok(MmdEstimate { mmd2, std_err: var.sqrt(), bandwidth: sigma })
}

pub const THEORY_HEADER: [&str; 5] = ["t", "M2", "L1_moment", "KL_est", "KL_bound"];
pub const MMD_HEADER: [&str; 3] = ["dataset", "MMD2", "bandwidth"];

/// One row of the theory metrics table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryRow {
    pub t: f64,
    pub m2: f64,
    pub l1: f64,
    pub kl_est: f64,
    pub kl_bound: f64,
}

pub fn write_theory_metrics(path: &Path, rows: &[TheoryRow]) -> Result<()> {
    let mut w = CsvWriter::create(path, &THEORY_HEADER)?;
    for r in rows {
        w.row(&[fmt_f64(r.t), fmt_f64(r.m2), fmt_f64(r.l1), fmt_f64(r.kl_est), fmt_f64(r.kl_bound)])?;
    }
    w.finish()
}

pub fn write_mmd_metrics(path: &Path, rows: &[(String, MmdEstimate)]) -> Result<()> {
    let mut w = CsvWriter::create(path, &MMD_HEADER)?;
    for (name, e) in rows {
        w.row(&[name.clone(), fmt_f64(e.mmd2), fmt_f64(e.bandwidth)])?;
    }
    w.finish()
}

/// Everything recorded by one sampling run against a Gaussian target.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingReport {
    pub rows: Vec<TheoryRow>,
    /// Bootstrap standard error of each `KL_est`.
    pub kl_std_err: Vec<f64>,
    pub m2_std_err: Vec<f64>,
}

/// Runs [`sample_brwp`] toward `N(0, σ²I)` from `x0` and tabulates moments,
/// the moment-matched KL and its bound at every step.
pub fn gaussian_sampling_report(
    sigma2: f64,
    rp: &RwpoParams,
    grid: TimeGrid,
    x0: &TokenBatch,
    n_boot: usize,
    seed: u64,
) -> Result<SamplingReport> {
    let d = x0.dim();
    let traj = sample_brwp(gaussian_target_drift(sigma2, rp.beta()), rp, grid, x0)?;
    let mean = Array1::zeros(d);
    let cov = Array2::eye(d) * sigma2;
    let theory = TheoryParams::gaussian(sigma2, rp.lambda())?;
    let m2 = second_moment(&traj);
    let l1 = l1_moment(&traj);
    let kls = traj
        .batches
        .iter()
        .enumerate()
        .map(|(k, b)| gaussian_fit_kl_bootstrap(&b.points, &mean, &cov, n_boot, seed.wrapping_add(k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let y0 = kls[0].value.max(0.0);
    let mut rows = Vec::with_capacity(kls.len());
    for k in 0..kls.len() {
        let t = grid.t(k);
        rows.push(TheoryRow { t, m2: m2[k].value, l1: l1[k].value, kl_est: kls[k].value, kl_bound: kl_upper_bound(y0, t, &theory)? });
    }
    Ok(SamplingReport {
        rows,
        kl_std_err: kls.iter().map(|e| e.std_err).collect(),
        m2_std_err: m2.iter().map(|e| e.std_err).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::integrate_with_breaks;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(n: usize, d: usize, scale: f64, shift: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            shift + scale * z
        })
    }

    /// `D` and `I` by quadrature of their defining integrals.
    fn integrals(log_ratio_grad: impl Fn(f64) -> f64, rho: impl Fn(f64) -> f64, lim: f64) -> (f64, f64) {
        let d = integrate_with_breaks(|x| log_ratio_grad(x) * x.signum() * rho(x), -lim, lim, &[0.0], 1e-12).unwrap();
        let i = integrate_with_breaks(|x| log_ratio_grad(x).powi(2) * rho(x), -lim, lim, &[0.0], 1e-12).unwrap();
        (d, i)
    }

    #[test]
    fn laplace_family() {
        let same = directional_consistency(Family::Laplace { a: 1.5, b: 1.5 }).unwrap();
        assert_eq!((same.d, same.fisher, same.gamma_effective), (0.0, 0.0, None));
        let c = directional_consistency(Family::Laplace { a: 1.0, b: 2.0 }).unwrap();
        assert_eq!((c.d, c.fisher, c.gamma_effective), (1.0, 1.0, Some(1.0)));
        let (a, b) = (0.7, 1.9);
        let (d, i) = integrals(|x| (b - a) * x.signum(), |x| 0.5 * a * (-a * x.abs()).exp(), 80.0);
        let c = directional_consistency(Family::Laplace { a, b }).unwrap();
        assert!((c.d - d).abs() < 1e-9 && (c.fisher - i).abs() < 1e-9);
        // rate decreasing toward the target flips the sign
        assert_eq!(directional_consistency(Family::Laplace { a: 2.0, b: 1.0 }).unwrap().gamma_effective, Some(-1.0));
    }

    #[test]
    fn gaussian_family() {
        let c = directional_consistency(Family::Gaussian { tau2: 4.0, sigma2: 1.0 }).unwrap();
        assert!((c.d - 1.196_826_841_204_298).abs() < 1e-12);
        assert!((c.fisher - 2.25).abs() < 1e-15);
        assert!((c.gamma_effective.unwrap() - FRAC_2_PI.sqrt()).abs() < 1e-15);
        let (tau2, sigma2) = (4.0f64, 1.0);
        let cc = 1.0 / sigma2 - 1.0 / tau2;
        let rho = |x: f64| (-0.5 * x * x / tau2).exp() / (2.0 * PI * tau2).sqrt();
        let (d, i) = integrals(|x| cc * x, rho, 40.0);
        assert!((c.d - d).abs() < 1e-9 && (c.fisher - i).abs() < 1e-9);
        assert!(directional_consistency(Family::Gaussian { tau2: 0.0, sigma2: 1.0 }).is_err());
    }

    #[test]
    fn bound_reductions_and_zero_crossing() {
        let p0 = TheoryParams::new(0.5, 1.0, 0.0).unwrap();
        for t in [0.0, 0.3, 2.0] {
            assert!((kl_upper_bound(0.8, t, &p0).unwrap() - 0.8 * (-p0.a() * t).exp()).abs() < 1e-15);
        }
        let p = TheoryParams::new(1.0, 1.0, 1.0).unwrap();
        assert_eq!(kl_upper_bound(1.0, 0.0, &p).unwrap(), 1.0);
        let t_star = (1.0 + 2f64.sqrt()).ln();
        assert!(kl_upper_bound(1.0, t_star - 1e-6, &p).unwrap() > 0.0);
        assert!(kl_upper_bound(1.0, t_star - 1e-6, &p).unwrap() < 1e-11);
        assert_eq!(kl_upper_bound(1.0, t_star + 1e-9, &p).unwrap(), 0.0);
        assert_eq!(kl_upper_bound(1.0, 5.0, &p).unwrap(), 0.0);
        assert!(kl_upper_bound(-1.0, 0.0, &p).is_err());
        assert!(kl_upper_bound(1.0, -0.1, &p).is_err());
        assert!(TheoryParams::new(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn moments_of_gaussian_samples() {
        let (tau, d) = (1.5, 3);
        let x = normal(20_000, d, tau, 0.0, 1);
        let traj = Trajectory {
            batches: vec![TokenBatch::new(x, 0).unwrap()],
            logdet_steps: None,
            direction: crate::dynamics::Direction::Forward,
            drift_points: vec![],
            h: 0.1,
        };
        let m2 = second_moment(&traj)[0];
        let l1 = l1_moment(&traj)[0];
        assert!((m2.value - d as f64 * tau * tau).abs() < 4.0 * m2.std_err);
        assert!((l1.value - d as f64 * tau * FRAC_2_PI.sqrt()).abs() < 4.0 * l1.std_err);

        let origin = Trajectory {
            batches: vec![TokenBatch::new(Array2::zeros((1, 2)), 0).unwrap()],
            ..traj
        };
        assert_eq!(second_moment(&origin)[0].value, 0.0);
    }

    #[test]
    fn gaussian_kl_matches_closed_form() {
        let m1 = Array1::from(vec![0.5]);
        let s1 = Array2::from_elem((1, 1), 4.0);
        let m2 = Array1::zeros(1);
        let s2 = Array2::eye(1);
        let want = 0.5 * (4.0 + 0.25 - 1.0 - 4f64.ln());
        assert!((gaussian_kl(&m1, &s1, &m2, &s2).unwrap() - want).abs() < 1e-14);
        assert_eq!(gaussian_kl(&m2, &s2, &m2, &s2).unwrap(), 0.0);
        let x = normal(4000, 2, 2.0, 0.0, 3);
        let e = gaussian_fit_kl_bootstrap(&x, &Array1::zeros(2), &Array2::eye(2), 100, 9).unwrap();
        let exact = 2.0 * 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((e.value - exact).abs() < 4.0 * e.std_err, "{e:?} vs {exact}");
        assert!(e.std_err > 0.0 && e.std_err < 0.2);
    }

    #[test]
    fn kde_single_point_and_mass() {
        let grid = Grid2::regular((-3.0, 3.0), (-3.0, 3.0), 121, 121).unwrap();
        let s = Array2::from_shape_vec((1, 2), vec![0.0, 0.0]).unwrap();
        let k = kde_2d(&s, 0.5, &grid).unwrap();
        assert!((k[[60, 60]] - 1.0 / (2.0 * PI * 0.25)).abs() < 1e-12);
        assert!((k[[70, 60]] - k[[50, 60]]).abs() < 1e-15);
        let x = normal(200, 2, 0.3, 0.0, 4);
        let grid = Grid2::regular((-4.0, 4.0), (-4.0, 4.0), 161, 161).unwrap();
        let mass = kde_2d(&x, 0.3, &grid).unwrap().sum() * grid.cell_area();
        assert!((mass - 1.0).abs() < 0.01, "{mass}");
        assert!(kde_2d(&x, 0.0, &grid).is_err());
    }

    #[test]
    fn mmd_behaviour() {
        let a = normal(500, 1, 1.0, 0.0, 5);
        let same = mmd(&a, &a, None).unwrap();
        assert!(same.mmd2.abs() <= 3.0 * same.std_err + 1e-15);
        let b = normal(500, 1, 1.0, 3.0, 6);
        assert!(mmd(&a, &b, None).unwrap().mmd2 > 0.1);
        let c = normal(500, 1, 1.0, 0.0, 7);
        let null = mmd(&a, &c, None).unwrap();
        assert!(null.mmd2.abs() < 3.0 * null.std_err, "{null:?}");
        // unequal sizes
        let c = normal(300, 1, 1.0, 0.0, 8);
        let null = mmd(&a, &c, Some(1.0)).unwrap();
        assert!(null.mmd2.abs() < 0.02, "{null:?}");
        assert!(mmd(&a, &b, Some(0.0)).is_err());
    }

    #[test]
    fn unequal_size_matches_direct_sum() {
        let a = normal(7, 2, 1.0, 0.0, 10);
        let b = normal(5, 2, 1.0, 0.5, 11);
        let s = 0.8;
        let k = |x: ArrayView1<f64>, y: ArrayView1<f64>| (-sq_dist(x, y) / (2.0 * s * s)).exp();
        let mut kxx = 0.0;
        for i in 0..7 {
            for j in 0..7 {
                if i != j {
                    kxx += k(a.row(i), a.row(j));
                }
            }
        }
        let mut kyy = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    kyy += k(b.row(i), b.row(j));
                }
            }
        }
        let mut kxy = 0.0;
        for i in 0..7 {
            for j in 0..5 {
                kxy += k(a.row(i), b.row(j));
            }
        }
        let want = kxx / 42.0 + kyy / 20.0 - 2.0 * kxy / 35.0;
        assert!((mmd(&a, &b, Some(s)).unwrap().mmd2 - want).abs() < 1e-14);
    }

    #[test]
    fn stationary_gaussian_keeps_its_second_moment() {
        let (n, d) = (1000, 2);
        let x0 = TokenBatch::new(normal(n, d, 1.0, 0.0, 12), 0).unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let rp = RwpoParams::new(0.0, 1.0, grid.h()).unwrap();
        let traj = sample_brwp(gaussian_target_drift(1.0, 1.0), &rp, grid, &x0).unwrap();
        let m2 = second_moment(&traj);
        let last = m2.last().unwrap();
        assert!((last.value - d as f64).abs() < 0.15 * d as f64, "{last:?}");
    }

    #[test]
    fn kl_decreases_from_a_wide_start() {
        let x0 = TokenBatch::new(normal(2000, 1, 2.0, 0.0, 13), 0).unwrap();
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let rp = RwpoParams::new(0.0, 1.0, grid.h()).unwrap();
        let rep = gaussian_sampling_report(1.0, &rp, grid, &x0, 20, 1).unwrap();
        let kl: Vec<f64> = rep.rows.iter().map(|r| r.kl_est).collect();
        for w in kl.windows(4).step_by(4) {
            assert!(w[3] < w[0], "{kl:?}");
        }
        assert!(kl.last().unwrap() < &(0.5 * kl[0]));
    }

    #[test]
    fn metrics_csv_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("theory.csv");
        write_theory_metrics(&p, &[TheoryRow { t: 0.0, m2: 1.0, l1: 0.5, kl_est: 0.1, kl_bound: 0.2 }]).unwrap();
        let t = crate::io::read_table(&p).unwrap();
        assert_eq!(t.column("KL_bound").unwrap(), vec![0.2]);
        let p = dir.path().join("mmd.csv");
        write_mmd_metrics(&p, &[("moons".into(), MmdEstimate { mmd2: 0.01, std_err: 0.0, bandwidth: 0.7 })]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("dataset,MMD2,bandwidth\nmoons,"));
    }
}
