//! Benchmark samplers, the Lorenz-63 observation model and a linear-Gaussian
//! inverse problem with a closed-form posterior.
//!
//! Every generator is a pure function of its arguments and seed.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{concatenate, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, read_table, CsvWriter};
use crate::objective::{ForwardModel, LinearForward, Prior};

/// Jitter added to the benchmark constructions.
pub const JITTER: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetId {
    Moons,
    Rings,
    TwoSpirals,
    EightGaussians,
    Checkerboard,
    Lorenz63,
    LinearGaussian,
}

impl DatasetId {
    pub const BENCHMARKS: [DatasetId; 5] =
        [DatasetId::Moons, DatasetId::Rings, DatasetId::TwoSpirals, DatasetId::EightGaussians, DatasetId::Checkerboard];

    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Moons => "moons",
            DatasetId::Rings => "rings",
            DatasetId::TwoSpirals => "two_spirals",
            DatasetId::EightGaussians => "eight_gaussians",
            DatasetId::Checkerboard => "checkerboard",
            DatasetId::Lorenz63 => "lorenz63",
            DatasetId::LinearGaussian => "linear_gaussian",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [DatasetId::Lorenz63, DatasetId::LinearGaussian]
            .into_iter()
            .chain(Self::BENCHMARKS)
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::UnknownDataset(s.to_string()))
    }

    pub fn is_benchmark(self) -> bool {
        Self::BENCHMARKS.contains(&self)
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn jitter(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    std * z
}

fn moons_point(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let t = rng.gen_range(0.0..PI);
    // two interleaved half circles, centred and scaled by 2
    let (x, y) = if rng.gen_bool(0.5) { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
    [2.0 * (x - 0.5) + jitter(rng, JITTER), 2.0 * (y - 0.25) + jitter(rng, JITTER)]
}

/// Ring radii.
pub const RING_RADII: [f64; 4] = [0.75, 1.5, 2.25, 3.0];

fn rings_point(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let r = RING_RADII[rng.gen_range(0..RING_RADII.len())];
    let a = rng.gen_range(0.0..2.0 * PI);
    [r * a.cos() + jitter(rng, JITTER), r * a.sin() + jitter(rng, JITTER)]
}

fn spirals_point(rng: &mut ChaCha8Rng) -> [f64; 2] {
    // 540 degrees of arc, radius proportional to angle
    let n = rng.gen::<f64>().sqrt() * 3.0 * PI;
    let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    [s * (-n.cos() * n) / 3.0 + jitter(rng, JITTER), s * (n.sin() * n) / 3.0 + jitter(rng, JITTER)]
}

fn eight_gaussians_point(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let k = rng.gen_range(0..8) as f64;
    let a = k * PI / 4.0;
    [4.0 * a.cos() + jitter(rng, 0.2), 4.0 * a.sin() + jitter(rng, 0.2)]
}

/// Uniform on the squares of a 4×4 board over `[−4, 4]²` whose index sum
/// is even. No jitter, so the support stays exact.
fn checkerboard_point(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let cell = rng.gen_range(0..8usize);
    let i = cell / 2;
    let j = 2 * (cell % 2) + (i % 2);
    let x = -4.0 + 2.0 * i as f64 + rng.gen_range(0.0..2.0);
    let y = -4.0 + 2.0 * j as f64 + rng.gen_range(0.0..2.0);
    [x, y]
}

/// Whether `(x, y)` lies on a permitted checkerboard square.
pub fn checkerboard_permitted(x: f64, y: f64) -> bool {
    if !(-4.0..4.0).contains(&x) || !(-4.0..4.0).contains(&y) {
        return false;
    }
    let i = ((x + 4.0) / 2.0).floor() as i64;
    let j = ((y + 4.0) / 2.0).floor() as i64;
    (i + j) % 2 == 0
}

/// `n` i.i.d. draws from a 2D benchmark law.
pub fn sample_benchmark(id: DatasetId, n: usize, seed: u64) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::InvalidParameter("sample count must be >= 1".into()));
    }
    let draw: fn(&mut ChaCha8Rng) -> [f64; 2] = match id {
        DatasetId::Moons => moons_point,
        DatasetId::Rings => rings_point,
        DatasetId::TwoSpirals => spirals_point,
        DatasetId::EightGaussians => eight_gaussians_point,
        DatasetId::Checkerboard => checkerboard_point,
        other => return Err(Error::UnknownDataset(format!("{} is not a 2D benchmark", other.name()))),
    };
    let mut rng = rng_for(seed);
    let mut out = Array2::zeros((n, 2));
    for mut row in out.rows_mut() {
        let p = draw(&mut rng);
        row[0] = p[0];
        row[1] = p[1];
    }
    Ok(out)
}

/// Appends `N(0, 0.1²)` nuisance coordinates up to dimension `dim`.
pub fn pad_dims(x: &Array2<f64>, dim: usize, seed: u64) -> Result<Array2<f64>> {
    if dim < x.ncols() {
        return Err(Error::dims(format!("cannot pad {} columns down to {dim}", x.ncols())));
    }
    let mut rng = rng_for(seed ^ 0x9e37_79b9_7f4a_7c15);
    let extra = Array2::from_shape_simple_fn((x.nrows(), dim - x.ncols()), || jitter(&mut rng, 0.1));
    Ok(concatenate(Axis(1), &[x.view(), extra.view()]).expect("same row count"))
}

/// `n×d` draws from `N(0, I)`.
pub fn sample_base(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_for(seed);
    Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng))
}

/// Lorenz-63 parameters `(σ, r, β)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorenzParams {
    pub sigma: f64,
    pub r: f64,
    pub beta: f64,
}

impl LorenzParams {
    pub const CANONICAL: LorenzParams = LorenzParams { sigma: 10.0, r: 28.0, beta: 8.0 / 3.0 };

    fn rhs(&self, s: [f64; 3]) -> [f64; 3] {
        [self.sigma * (s[1] - s[0]), s[0] * (self.r - s[2]) - s[1], s[0] * s[1] - self.beta * s[2]]
    }
}

/// Observation window settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorenzSetup {
    pub t_spin: f64,
    pub t_ob: f64,
    pub n_mea: usize,
    pub noise_std: f64,
}

impl Default for LorenzSetup {
    fn default() -> Self {
        LorenzSetup { t_spin: 10.0, t_ob: 1.0, n_mea: 3, noise_std: 1e-2 }
    }
}

pub const LORENZ_STEP: f64 = 1e-3;

fn rk4(p: &LorenzParams, s: [f64; 3], dt: f64) -> [f64; 3] {
    let add = |a: [f64; 3], b: [f64; 3], c: f64| [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2]];
    let k1 = p.rhs(s);
    let k2 = p.rhs(add(s, k1, dt / 2.0));
    let k3 = p.rhs(add(s, k2, dt / 2.0));
    let k4 = p.rhs(add(s, k3, dt));
    [
        s[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        s[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        s[2] + dt / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
    ]
}

/// Integrates from `(1, 1, 1)` for `duration`, returning states every step.
pub fn lorenz_trajectory(p: &LorenzParams, duration: f64) -> Result<Vec<[f64; 3]>> {
    let steps = (duration / LORENZ_STEP).round() as usize;
    let mut s = [1.0, 1.0, 1.0];
    let mut out = Vec::with_capacity(steps + 1);
    out.push(s);
    for k in 0..steps {
        s = rk4(p, s, LORENZ_STEP);
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "Lorenz integration".into(), step: k + 1 });
        }
        out.push(s);
    }
    Ok(out)
}

/// Noise-free window averages: `y[3j + i]` is the mean of coordinate `i`
/// over window `j`, by the trapezoid rule on the RK4 grid.
pub fn lorenz_averages(p: &LorenzParams, setup: &LorenzSetup) -> Result<Vec<f64>> {
    if !(setup.t_spin > 0.0 && setup.t_ob > 0.0) || setup.n_mea == 0 {
        return Err(Error::InvalidParameter("need t_spin, t_ob > 0 and n_mea >= 1".into()));
    }
    let spin = (setup.t_spin / LORENZ_STEP).round() as usize;
    let win = (setup.t_ob / LORENZ_STEP).round() as usize;
    let traj = lorenz_trajectory(p, (spin + win * setup.n_mea) as f64 * LORENZ_STEP)?;
    let mut y = Vec::with_capacity(3 * setup.n_mea);
    for j in 0..setup.n_mea {
        let a = spin + j * win;
        for i in 0..3 {
            let inner: f64 = (a + 1..a + win).map(|k| traj[k][i]).sum();
            y.push((0.5 * (traj[a][i] + traj[a + win][i]) + inner) / win as f64);
        }
    }
    Ok(y)
}

/// Window averages plus i.i.d. `N(0, noise_std²)` noise.
pub fn lorenz_observe(p: &LorenzParams, setup: &LorenzSetup, seed: u64) -> Result<Vec<f64>> {
    let mut y = lorenz_averages(p, setup)?;
    if setup.noise_std > 0.0 {
        let mut rng = rng_for(seed);
        y.iter_mut().for_each(|v| *v += jitter(&mut rng, setup.noise_std));
    }
    Ok(y)
}

/// `(σ, r, β) ↦` noise-free window averages, with a central-difference
/// Jacobian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorenzForward {
    pub setup: LorenzSetup,
    pub fd_step: f64,
}

impl LorenzForward {
    pub fn new(setup: LorenzSetup) -> Self {
        LorenzForward { setup, fd_step: 1e-4 }
    }
}

impl ForwardModel for LorenzForward {
    fn input_dim(&self) -> usize {
        3
    }

    fn output_dim(&self) -> usize {
        3 * self.setup.n_mea
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != 3 {
            return Err(Error::dims(format!("Lorenz parameters have length 3, got {}", x.len())));
        }
        lorenz_averages(&LorenzParams { sigma: x[0], r: x[1], beta: x[2] }, &self.setup)
    }

    fn jacobian(&self, x: &[f64]) -> Result<Array2<f64>> {
        let mut jac = Array2::zeros((self.output_dim(), 3));
        for k in 0..3 {
            let step = self.fd_step * x[k].abs().max(1.0);
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += step;
            xm[k] -= step;
            let (fp, fm) = (self.apply(&xp)?, self.apply(&xm)?);
            for i in 0..fp.len() {
                jac[[i, k]] = (fp[i] - fm[i]) / (2.0 * step);
            }
        }
        Ok(jac)
    }
}

/// Spread of the Lorenz parameter draws around the canonical values.
pub const LORENZ_PARAM_STD: [f64; 3] = [1.0, 2.0, 0.2];

/// Paired `(σ, r, β)` draws and their noisy observations.
pub fn lorenz_pairs(n: usize, setup: &LorenzSetup, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut rng = rng_for(seed);
    let c = LorenzParams::CANONICAL;
    let mean = [c.sigma, c.r, c.beta];
    let x = Array2::from_shape_fn((n, 3), |(_, k)| mean[k] + jitter(&mut rng, LORENZ_PARAM_STD[k]));
    let mut y = Array2::zeros((n, 3 * setup.n_mea));
    for i in 0..n {
        let p = LorenzParams { sigma: x[[i, 0]], r: x[[i, 1]], beta: x[[i, 2]] };
        let obs = lorenz_observe(&p, setup, seed.wrapping_add(1 + i as u64))?;
        y.row_mut(i).assign(&Array1::from(obs));
    }
    Ok((x, y))
}

/// `y = F x + N(0, σ² I)` with prior `N(μ₀, Σ₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussian {
    pub f: Array2<f64>,
    pub prior_mean: Array1<f64>,
    pub prior_cov: Array2<f64>,
    pub sigma: f64,
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    // fix column signs so the draw is Haar distributed
    let mut q = q;
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

impl LinearGaussian {
    /// Conjugate posterior `(mean, cov)` for measurement `y`.
    pub fn posterior(&self, y: &Array1<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let f = to_na(&self.f);
        let p0 = to_na(&self.prior_cov)
            .try_inverse()
            .ok_or_else(|| Error::InvalidParameter("singular prior covariance".into()))?;
        let s2 = self.sigma * self.sigma;
        let prec = &p0 + f.transpose() * &f / s2;
        let cov = prec.try_inverse().ok_or_else(|| Error::InvalidParameter("singular posterior precision".into()))?;
        let mu0 = nalgebra::DVector::from_iterator(self.prior_mean.len(), self.prior_mean.iter().copied());
        let yv = nalgebra::DVector::from_iterator(y.len(), y.iter().copied());
        let mean = &cov * (p0 * mu0 + f.transpose() * yv / s2);
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok((Array1::from_iter(mean.iter().copied()), from_na(&cov)))
    }

    pub fn forward(&self) -> LinearForward {
        LinearForward { matrix: self.f.clone() }
    }

    pub fn prior(&self) -> Result<Prior> {
        Prior::gaussian(self.prior_mean.clone(), self.prior_cov.clone())
    }

    /// `x ~ prior`, `y = F x + noise`.
    pub fn sample_pairs(&self, n: usize, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
        let d = self.prior_mean.len();
        let chol = to_na(&self.prior_cov)
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("prior covariance is not positive definite".into()))?;
        let l = from_na(&chol.l());
        let z = sample_base(n, d, seed);
        let x = z.dot(&l.t()) + &self.prior_mean;
        let noise = Normal::new(0.0, self.sigma).expect("sigma > 0");
        let mut rng = rng_for(seed.wrapping_add(1));
        let y = x.dot(&self.f.t()) + Array2::from_shape_simple_fn((n, self.f.nrows()), || noise.sample(&mut rng));
        Ok((x, y))
    }
}

/// Random well-conditioned `F = U diag(s) Vᵀ` with singular values in
/// `[0.5, 1.5]`, prior `N(0, I)` and noise `σ = 0.5`.
pub fn linear_gaussian_problem(d: usize, m: usize, seed: u64) -> Result<LinearGaussian> {
    if d == 0 || m == 0 {
        return Err(Error::InvalidParameter("dimensions must be >= 1".into()));
    }
    let mut rng = rng_for(seed);
    let u = random_orthogonal(m, &mut rng);
    let v = random_orthogonal(d, &mut rng);
    let mut s = DMatrix::zeros(m, d);
    for k in 0..m.min(d) {
        s[(k, k)] = rng.gen_range(0.5..1.5);
    }
    Ok(LinearGaussian {
        f: from_na(&(u * s * v.transpose())),
        prior_mean: Array1::zeros(d),
        prior_cov: Array2::eye(d),
        sigma: 0.5,
    })
}

/// Writes `sample_id, x_1..x_d[, y_1..y_m]`.
pub fn write_dataset(path: &Path, x: &Array2<f64>, y: Option<&Array2<f64>>) -> Result<()> {
    if let Some(y) = y {
        if y.nrows() != x.nrows() {
            return Err(Error::dims("paired arrays differ in row count"));
        }
    }
    let mut header = vec!["sample_id".to_string()];
    header.extend((1..=x.ncols()).map(|i| format!("x_{i}")));
    if let Some(y) = y {
        header.extend((1..=y.ncols()).map(|i| format!("y_{i}")));
    }
    let mut w = CsvWriter::create(path, &header)?;
    for i in 0..x.nrows() {
        let mut row = vec![i.to_string()];
        row.extend(x.row(i).iter().map(|&v| fmt_f64(v)));
        if let Some(y) = y {
            row.extend(y.row(i).iter().map(|&v| fmt_f64(v)));
        }
        w.row(&row)?;
    }
    w.finish()
}

/// Reads a file written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    let t = read_table(path)?;
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
    if t.header.first().map(String::as_str) != Some("sample_id") {
        return Err(bad("first column must be sample_id"));
    }
    let xs: Vec<usize> = (0..t.header.len()).filter(|&j| t.header[j].starts_with("x_")).collect();
    let ys: Vec<usize> = (0..t.header.len()).filter(|&j| t.header[j].starts_with("y_")).collect();
    if xs.is_empty() || xs.len() + ys.len() + 1 != t.header.len() {
        return Err(bad("expected columns x_1..x_d and optional y_1..y_m"));
    }
    if t.rows.is_empty() {
        return Err(bad("no samples"));
    }
    let pick = |cols: &[usize]| Array2::from_shape_fn((t.rows.len(), cols.len()), |(i, j)| t.rows[i][cols[j]]);
    let y = (!ys.is_empty()).then(|| pick(&ys));
    Ok((pick(&xs), y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ids_round_trip() {
        for id in DatasetId::BENCHMARKS.into_iter().chain([DatasetId::Lorenz63, DatasetId::LinearGaussian]) {
            assert_eq!(DatasetId::parse(id.name()).unwrap(), id);
        }
        assert!(matches!(DatasetId::parse("swiss_roll"), Err(Error::UnknownDataset(_))));
        assert!(sample_benchmark(DatasetId::Lorenz63, 4, 0).is_err());
    }

    #[test]
    fn eight_gaussians_mean_vanishes() {
        let x = sample_benchmark(DatasetId::EightGaussians, 40_000, 3).unwrap();
        let m = x.mean_axis(Axis(0)).unwrap();
        // per-coordinate std is about 2.8, so the standard error is 0.014
        assert!(m.iter().all(|v| v.abs() < 0.06), "{m}");
    }

    #[test]
    fn checkerboard_support() {
        let x = sample_benchmark(DatasetId::Checkerboard, 5000, 1).unwrap();
        assert!(x.rows().into_iter().all(|r| checkerboard_permitted(r[0], r[1])));
        assert!(!checkerboard_permitted(-3.0, -1.0));
        assert!(checkerboard_permitted(-3.0, -3.0));
    }

    #[test]
    fn rings_sit_on_their_radii() {
        let x = sample_benchmark(DatasetId::Rings, 2000, 2).unwrap();
        for r in x.rows() {
            let rad = r[0].hypot(r[1]);
            let gap = RING_RADII.iter().map(|&c| (c - rad).abs()).fold(f64::INFINITY, f64::min);
            assert!(gap < 6.0 * JITTER * 1.5);
        }
    }

    #[test]
    fn generators_are_pure() {
        for id in DatasetId::BENCHMARKS {
            assert_eq!(sample_benchmark(id, 64, 9).unwrap(), sample_benchmark(id, 64, 9).unwrap());
            assert_ne!(sample_benchmark(id, 64, 9).unwrap(), sample_benchmark(id, 64, 10).unwrap());
            assert!(sample_benchmark(id, 64, 9).unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn padding_adds_small_nuisance_columns() {
        let x = sample_benchmark(DatasetId::Moons, 4000, 0).unwrap();
        let p = pad_dims(&x, 4, 0).unwrap();
        assert_eq!(p.ncols(), 4);
        assert_eq!(p.slice(ndarray::s![.., 0..2]), x);
        let extra = p.slice(ndarray::s![.., 2..]).to_owned();
        assert!((extra.std(0.0) - 0.1).abs() < 0.005);
        assert!(pad_dims(&x, 1, 0).is_err());
    }

    #[test]
    fn lorenz_is_deterministic_without_noise() {
        let setup = LorenzSetup { noise_std: 0.0, t_spin: 1.0, ..Default::default() };
        let p = LorenzParams::CANONICAL;
        assert_eq!(lorenz_observe(&p, &setup, 1).unwrap(), lorenz_observe(&p, &setup, 2).unwrap());
        let noisy = LorenzSetup { noise_std: 0.01, ..setup };
        assert_eq!(lorenz_observe(&p, &noisy, 5).unwrap(), lorenz_observe(&p, &noisy, 5).unwrap());
        assert_eq!(lorenz_observe(&p, &noisy, 5).unwrap().len(), 9);
    }

    #[test]
    fn lorenz_long_average_of_height() {
        // the attractor's mean height is close to r − 1
        let setup = LorenzSetup { t_spin: 10.0, t_ob: 40.0, n_mea: 1, noise_std: 0.0 };
        let y = lorenz_averages(&LorenzParams::CANONICAL, &setup).unwrap();
        assert!((y[2] - 27.0).abs() < 0.15 * 27.0, "{y:?}");
    }

    #[test]
    fn lorenz_stable_origin() {
        let p = LorenzParams { r: 0.0, ..LorenzParams::CANONICAL };
        let setup = LorenzSetup { t_spin: 20.0, t_ob: 1.0, n_mea: 2, noise_std: 0.0 };
        assert!(lorenz_averages(&p, &setup).unwrap().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn lorenz_stays_bounded() {
        let traj = lorenz_trajectory(&LorenzParams::CANONICAL, 50.0).unwrap();
        assert!(traj.iter().all(|s| s.iter().all(|v| v.abs() < 100.0)));
    }

    #[test]
    fn lorenz_jacobian_matches_its_own_differences() {
        let fwd = LorenzForward::new(LorenzSetup { t_spin: 0.5, t_ob: 0.5, n_mea: 1, noise_std: 0.0 });
        let x = [10.0, 28.0, 8.0 / 3.0];
        let j = fwd.jacobian(&x).unwrap();
        let mut xp = x;
        xp[1] += 1e-3;
        let (fp, f0) = (fwd.apply(&xp).unwrap(), fwd.apply(&x).unwrap());
        for i in 0..3 {
            assert_relative_eq!(j[[i, 1]], (fp[i] - f0[i]) / 1e-3, max_relative = 1e-2, epsilon = 1e-3);
        }
    }

    #[test]
    fn conjugate_identity_cases() {
        let mut lg = LinearGaussian { f: Array2::eye(2), prior_mean: Array1::zeros(2), prior_cov: Array2::eye(2), sigma: 1.0 };
        let y = ndarray::array![1.0, -3.0];
        let (m, c) = lg.posterior(&y).unwrap();
        assert_relative_eq!(m[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(m[1], -1.5, epsilon = 1e-14);
        assert_relative_eq!(c[[0, 0]], 0.5, epsilon = 1e-14);
        assert_relative_eq!(c[[0, 1]], 0.0, epsilon = 1e-14);
        lg.sigma = 1e-6;
        let (m, _) = lg.posterior(&y).unwrap();
        assert_relative_eq!(m[1], -3.0, epsilon = 1e-9);
    }

    #[test]
    fn random_problem_posterior_is_spd_and_matches_regression() {
        let lg = linear_gaussian_problem(2, 3, 4).unwrap();
        let s = DMatrix::from_fn(3, 2, |i, j| lg.f[[i, j]]).svd(false, false).singular_values;
        assert!(s.iter().all(|&v| (0.5..1.5).contains(&v)), "{s}");
        let y = ndarray::array![0.3, -0.2, 1.0];
        let (m, c) = lg.posterior(&y).unwrap();
        assert_relative_eq!(c[[0, 1]], c[[1, 0]]);
        let e = DMatrix::from_fn(2, 2, |i, j| c[[i, j]]).symmetric_eigenvalues();
        assert!(e.iter().all(|&v| v > 0.0));
        // the posterior mean minimises ‖y − Fx‖²/σ² + ‖x‖²
        let obj = |x: &Array1<f64>| (&y - &lg.f.dot(x)).mapv(|v| v * v).sum() / 0.25 + x.dot(x);
        for k in 0..2 {
            let mut xp = m.clone();
            xp[k] += 1e-4;
            assert!(obj(&xp) > obj(&m));
        }
    }

    #[test]
    fn dataset_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let lg = linear_gaussian_problem(2, 2, 0).unwrap();
        let (x, y) = lg.sample_pairs(5, 1).unwrap();
        write_dataset(&path, &x, Some(&y)).unwrap();
        let (xb, yb) = read_dataset(&path).unwrap();
        assert_eq!(xb, x);
        assert_eq!(yb.unwrap(), y);
        let x2 = sample_benchmark(DatasetId::Moons, 3, 0).unwrap();
        write_dataset(&path, &x2, None).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), (x2, None));
    }
}
