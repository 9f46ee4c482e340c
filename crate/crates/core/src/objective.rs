//! Training objectives: negative log-likelihood with transport and HJB
//! regularizers, and the conditional loss for Bayesian inverse problems.
//!
//! Transport and HJB Riemann sums run over the states where the drift was
//! evaluated: half-step states `(x^{k−1/2}, t_{k−1/2})` for the backward
//! pass, whole steps `(x^k, t_k)` for the forward pass.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};

use crate::diffeng::{Tensor, Var};
use crate::dynamics::{base_log_density, base_log_density_var, huber_prior, Direction, HuberWidth, RecordedFlow, Trajectory};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, CsvWriter};
use crate::layer::{BoundRwpo, RwpoParams};
use crate::potential::PotentialField;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub c_hjb: f64,
    pub w_transport: f64,
    pub w_supervised: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { c_hjb: 0.1, w_transport: 1.0, w_supervised: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c_hjb", self.c_hjb), ("w_transport", self.w_transport), ("w_supervised", self.w_supervised)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub nll: f64,
    pub transport: f64,
    pub hjb: f64,
    pub supervised: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn assemble(nll: f64, transport: f64, hjb: f64, supervised: Option<f64>, w: &LossWeights) -> Self {
        let total = nll + w.w_transport * transport + w.c_hjb * hjb + w.w_supervised * supervised.unwrap_or(0.0);
        LossBreakdown { nll, transport, hjb, supervised, total }
    }

    pub fn is_finite(&self) -> bool {
        [self.nll, self.transport, self.hjb, self.total, self.supervised.unwrap_or(0.0)]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "nll={} transport={} hjb={}", self.nll, self.transport, self.hjb)?;
        if let Some(s) = self.supervised {
            write!(f, " supervised={s}")?;
        }
        write!(f, " total={}", self.total)
    }
}

fn accumulators(traj: &Trajectory) -> Result<&Array1<f64>> {
    traj.logdet_accum()
        .ok_or_else(|| Error::InvalidParameter("trajectory carries no log-density accumulators".into()))
}

/// `−(1/N) Σ_j [log ρ_0(x_j^0) − C_j]` for a backward trajectory.
pub fn nll_term(traj: &Trajectory) -> Result<f64> {
    if traj.direction != Direction::Backward {
        return Err(Error::InvalidParameter("likelihood needs a backward trajectory".into()));
    }
    let c = accumulators(traj)?;
    let base = base_log_density(&traj.initial().points);
    Ok(-(base - c).mean().expect("non-empty"))
}

/// `(h/2N) Σ_k Σ_j ‖∇φ − ∇ψ_μ‖²` over the drift evaluation states.
pub fn transport_term(traj: &Trajectory, p: &dyn PotentialField, rp: &RwpoParams, huber: HuberWidth) -> Result<f64> {
    let n = traj.initial().len() as f64;
    let mu = huber.resolve(rp.lambda(), traj.h);
    let mut sum = 0.0;
    for dp in &traj.drift_points {
        let f = p.field(&dp.points, dp.time)?;
        let (gpsi, _) = huber_prior(&dp.points, rp.lambda(), mu);
        sum += (&f.grad_x - &gpsi).mapv(|v| v * v).sum();
    }
    Ok(traj.h / (2.0 * n) * sum)
}

/// `(h/N) Σ_k Σ_j R_HJB²` over the drift evaluation states.
pub fn hjb_term(traj: &Trajectory, p: &dyn PotentialField, rp: &RwpoParams, huber: HuberWidth) -> Result<f64> {
    let n = traj.initial().len() as f64;
    let mu = huber.resolve(rp.lambda(), traj.h);
    let mu = if rp.lambda() == 0.0 { 1.0 } else { mu };
    let mut sum = 0.0;
    for dp in &traj.drift_points {
        let r = crate::dynamics::hjb_residuals(p, rp.lambda(), 1.0 / rp.beta(), &dp.points, dp.time, mu)?;
        sum += r.mapv(|v| v * v).sum();
    }
    Ok(traj.h / n * sum)
}

/// Measurement operator `F` of an inverse problem.
pub trait ForwardModel: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// `output_dim × input_dim`
    fn jacobian(&self, x: &[f64]) -> Result<Array2<f64>>;
}

/// `F(x) = M x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearForward {
    pub matrix: Array2<f64>,
}

impl ForwardModel for LinearForward {
    fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dims(format!("forward map takes ℝ^{}, got ℝ^{}", self.input_dim(), x.len())));
        }
        Ok(self.matrix.dot(&Array1::from(x.to_vec())).to_vec())
    }

    fn jacobian(&self, _x: &[f64]) -> Result<Array2<f64>> {
        Ok(self.matrix.clone())
    }
}

/// `F(shift + scale ∘ z)`: the inner model in standardized coordinates.
pub struct Standardized<F> {
    pub inner: F,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl<F: ForwardModel> Standardized<F> {
    pub fn new(inner: F, shift: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if shift.len() != inner.input_dim() || scale.len() != inner.input_dim() {
            return Err(Error::dims("shift and scale must match the forward model's input"));
        }
        Ok(Standardized { inner, shift, scale })
    }

    pub fn unstandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.shift).zip(&self.scale).map(|((z, m), s)| m + s * z).collect()
    }
}

impl<F: ForwardModel> ForwardModel for Standardized<F> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(Error::dims(format!("forward map takes ℝ^{}, got ℝ^{}", self.input_dim(), z.len())));
        }
        self.inner.apply(&self.unstandardize(z))
    }

    fn jacobian(&self, z: &[f64]) -> Result<Array2<f64>> {
        let mut j = self.inner.jacobian(&self.unstandardize(z))?;
        for (mut col, s) in j.columns_mut().into_iter().zip(&self.scale) {
            col *= *s;
        }
        Ok(j)
    }
}

/// Prior density `p(x)` of an inverse problem.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    /// Improper constant density.
    Flat,
    Gaussian { mean: Array1<f64>, precision: Array2<f64>, log_norm: f64 },
    /// `p(x) ∝ exp(−λ‖x‖₁)`, normalized.
    Laplace { lambda: f64 },
}

impl Prior {
    pub fn gaussian(mean: Array1<f64>, cov: Array2<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.dim() != (d, d) {
            return Err(Error::dims(format!("prior covariance {:?} for mean of length {d}", cov.dim())));
        }
        let m = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("prior covariance is not positive definite".into()))?;
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let inv = chol.inverse();
        let precision = Array2::from_shape_fn((d, d), |(i, j)| inv[(i, j)]);
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Prior::Gaussian { mean, precision, log_norm })
    }

    pub fn laplace(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidParameter(format!("Laplace prior needs lambda > 0, got {lambda}")));
        }
        Ok(Prior::Laplace { lambda })
    }

    /// `log p(x)` per row.
    pub fn log_density(&self, x: &Array2<f64>) -> Array1<f64> {
        let d = x.ncols() as f64;
        match self {
            Prior::Flat => Array1::zeros(x.nrows()),
            Prior::Gaussian { mean, precision, log_norm } => {
                let c = x - mean;
                let pc = c.dot(precision);
                (&c * &pc).sum_axis(Axis(1)) * -0.5 + *log_norm
            }
            Prior::Laplace { lambda } => {
                x.map_axis(Axis(1), |r| -lambda * r.iter().map(|v| v.abs()).sum::<f64>() + d * (lambda / 2.0).ln())
            }
        }
    }

    /// `−log p(x)` per row as an `N×1` node.
    pub fn neg_log_density_var<'t>(&self, x: Var<'t>) -> Var<'t> {
        let tape = x.tape();
        let (n, d) = x.shape();
        match self {
            Prior::Flat => tape.leaf(Tensor::zeros((n, 1))),
            Prior::Gaussian { mean, precision, log_norm } => {
                let mean = tape.leaf(mean.clone().insert_axis(Axis(0)));
                let c = x - mean;
                let pc = c.matmul(tape.leaf(precision.clone()));
                (c * pc).sum_rows().scale(0.5) - *log_norm
            }
            Prior::Laplace { lambda } => x.abs().sum_rows().scale(*lambda) - d as f64 * (lambda / 2.0).ln(),
        }
    }
}

/// A measurement `y = F(x) + noise` with Gaussian noise of std `sigma`.
pub struct BayesProblem {
    pub y: Array1<f64>,
    pub forward: Box<dyn ForwardModel>,
    pub sigma: f64,
    pub prior: Prior,
}

impl BayesProblem {
    pub fn new(y: Array1<f64>, forward: Box<dyn ForwardModel>, sigma: f64, prior: Prior) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("noise std must be > 0, got {sigma}")));
        }
        if y.len() != forward.output_dim() {
            return Err(Error::dims(format!("measurement of length {} for ℝ^{} output", y.len(), forward.output_dim())));
        }
        Ok(BayesProblem { y, forward, sigma, prior })
    }

    pub fn dim(&self) -> usize {
        self.forward.input_dim()
    }

    fn apply_rows(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let m = self.forward.output_dim();
        let mut out = Array2::zeros((x.nrows(), m));
        for (i, row) in x.rows().into_iter().enumerate() {
            let fx = self.forward.apply(&row.to_vec())?;
            out.row_mut(i).assign(&Array1::from(fx));
        }
        Ok(out)
    }

    /// `‖y − F(x)‖² / 2σ²` per row.
    pub fn misfit(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        let fx = self.apply_rows(x)?;
        let r = &fx - &self.y;
        Ok(r.map_axis(Axis(1), |row| row.dot(&row)) / (2.0 * self.sigma * self.sigma))
    }

    /// Misfit per row on the tape, differentiating `F` through its Jacobian.
    pub fn misfit_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let xv = x.value();
        let fx = self.apply_rows(&xv)?;
        let jac = xv
            .rows()
            .into_iter()
            .map(|r| self.forward.jacobian(&r.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let mapped = x.row_map(fx, jac);
        let y = x.tape().leaf(self.y.clone().insert_axis(Axis(0)));
        Ok((mapped - y).square().sum_rows().scale(1.0 / (2.0 * self.sigma * self.sigma)))
    }
}

/// Conditional loss `(1/N) Σ [log ρ_T(x_i) + ‖y − F(x_i)‖²/2σ² − log p(x_i)]`
/// on a forward trajectory with density tracking, plus the supervised term
/// when targets are given. Transport and HJB terms are reported as zero;
/// add them with [`transport_term`] and [`hjb_term`].
pub fn bayesian_loss(
    traj: &Trajectory,
    problem: &BayesProblem,
    paired_x: Option<&Array2<f64>>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if traj.direction != Direction::Forward {
        return Err(Error::InvalidParameter("conditional loss needs a forward trajectory".into()));
    }
    let c = accumulators(traj)?;
    let x_t = &traj.terminal().points;
    let log_rho_t = base_log_density(&traj.initial().points) - c;
    let data = &log_rho_t + &problem.misfit(x_t)? - &problem.prior.log_density(x_t);
    let supervised = match paired_x {
        Some(target) => {
            if target.dim() != x_t.dim() {
                return Err(Error::dims("supervision targets do not match the token batch"));
            }
            Some((x_t - target).mapv(|v| v * v).sum() / x_t.nrows() as f64)
        }
        None => None,
    };
    Ok(LossBreakdown::assemble(data.mean().expect("non-empty"), 0.0, 0.0, supervised, weights))
}

/// Loss terms as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossVars<'t> {
    pub nll: Var<'t>,
    pub transport: Var<'t>,
    pub hjb: Var<'t>,
    pub supervised: Option<Var<'t>>,
    pub total: Var<'t>,
}

impl<'t> LossVars<'t> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            nll: self.nll.item(),
            transport: self.transport.item(),
            hjb: self.hjb.item(),
            supervised: self.supervised.map(|s| s.item()),
            total: self.total.item(),
        }
    }
}

/// `∇ψ_μ` and `Δψ_μ` on the tape, `None` when `λ = 0`.
fn huber_var<'t>(x: Var<'t>, rw: &BoundRwpo<'t>, huber: HuberWidth) -> Option<(Var<'t>, Var<'t>)> {
    if rw.lambda_value() == 0.0 {
        return None;
    }
    let tape = x.tape();
    let mu = match huber {
        HuberWidth::Auto => rw.lambda * rw.h,
        HuberWidth::Fixed(m) => tape.scalar(m),
    };
    let mu_val = mu.item();
    let grad = (x / mu).clamp(-1.0, 1.0) * rw.lambda;
    let counts = x.value().map_axis(Axis(1), |r| r.iter().filter(|v| v.abs() <= mu_val).count() as f64);
    let lap = tape.leaf(counts.insert_axis(Axis(1))) * (rw.lambda / mu);
    Some((grad, lap))
}

/// Transport and HJB sums over the recorded drift evaluations.
fn regularizers<'t>(flow: &RecordedFlow<'t>, rw: &BoundRwpo<'t>, huber: HuberWidth, h: f64) -> Result<(Var<'t>, Var<'t>)> {
    let n = flow.states[0].shape().0 as f64;
    let mut transport: Option<Var<'t>> = None;
    let mut hjb: Option<Var<'t>> = None;
    for ev in &flow.drift {
        let lap = ev
            .derivs
            .laplacian
            .ok_or_else(|| Error::InvalidParameter("HJB term needs the drift Laplacian".into()))?;
        let (g, l) = match huber_var(ev.points, rw, huber) {
            Some((gpsi, lpsi)) => (ev.derivs.grad_x - gpsi, lap - lpsi),
            None => (ev.derivs.grad_x, lap),
        };
        let kinetic = g.square().sum_rows();
        let resid = ev.derivs.dt + kinetic.scale(0.5) + l / rw.beta;
        let tr = kinetic.sum();
        let hj = resid.square().sum();
        transport = Some(transport.map_or(tr, |a| a + tr));
        hjb = Some(hjb.map_or(hj, |a| a + hj));
    }
    let (tr, hj) = (transport.expect("at least one step"), hjb.expect("at least one step"));
    Ok((tr.scale(h / (2.0 * n)), hj.scale(h / n)))
}

fn total<'t>(nll: Var<'t>, tr: Var<'t>, hj: Var<'t>, sup: Option<Var<'t>>, w: &LossWeights) -> Var<'t> {
    let mut t = nll + tr.scale(w.w_transport) + hj.scale(w.c_hjb);
    if let Some(s) = sup {
        t = t + s.scale(w.w_supervised);
    }
    t
}

/// Generative loss on a recorded backward flow.
pub fn generative_loss<'t>(
    flow: &RecordedFlow<'t>,
    rw: &BoundRwpo<'t>,
    weights: &LossWeights,
    huber: HuberWidth,
    h: f64,
) -> Result<LossVars<'t>> {
    let change = flow.change.ok_or_else(|| Error::InvalidParameter("flow was recorded without density".into()))?;
    let nll = -(base_log_density_var(flow.states[0]) - change).mean();
    let (transport, hjb) = regularizers(flow, rw, huber, h)?;
    let total = total(nll, transport, hjb, None, weights);
    Ok(LossVars { nll, transport, hjb, supervised: None, total })
}

/// Conditional loss on a recorded forward flow.
pub fn conditional_loss<'t>(
    flow: &RecordedFlow<'t>,
    rw: &BoundRwpo<'t>,
    problem: &BayesProblem,
    paired_x: Option<&Array2<f64>>,
    weights: &LossWeights,
    huber: HuberWidth,
    h: f64,
) -> Result<LossVars<'t>> {
    let change = flow.change.ok_or_else(|| Error::InvalidParameter("flow was recorded without density".into()))?;
    let x0 = flow.states[0];
    let x_t = *flow.states.last().expect("non-empty");
    let log_rho_t = base_log_density_var(x0) - change;
    let nll = (log_rho_t + problem.misfit_var(x_t)? + problem.prior.neg_log_density_var(x_t)).mean();
    let supervised = match paired_x {
        Some(target) => {
            let tv = x_t.tape().leaf(target.clone());
            Some((x_t - tv).square().sum_rows().mean())
        }
        None => None,
    };
    let (transport, hjb) = regularizers(flow, rw, huber, h)?;
    let total = total(nll, transport, hjb, supervised, weights);
    Ok(LossVars { nll, transport, hjb, supervised, total })
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub lambda: f64,
    pub beta: f64,
    pub lr: f64,
}

pub const LOSS_HISTORY_HEADER: [&str; 9] =
    ["iteration", "nll", "transport", "hjb", "supervised", "total", "lambda", "beta", "lr"];

pub fn write_loss_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut w = CsvWriter::create(path, &LOSS_HISTORY_HEADER)?;
    for r in history {
        w.row(&[
            r.iteration.to_string(),
            fmt_f64(r.loss.nll),
            fmt_f64(r.loss.transport),
            fmt_f64(r.loss.hjb),
            r.loss.supervised.map(fmt_f64).unwrap_or_else(|| fmt_f64(0.0)),
            fmt_f64(r.loss.total),
            fmt_f64(r.lambda),
            fmt_f64(r.beta),
            fmt_f64(r.lr),
        ])?;
    }
    w.finish()
}
