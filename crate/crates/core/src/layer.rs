//! The sparse-transformer layer built from the regularized Wasserstein
//! proximal operator of `ψ(x) = λ‖x‖₁`.
//!
//! One attention half-step moves every token by
//!
//! ```text
//! x_j ← x_j + ½ [ S_{λh}(x_j) − Σ_ℓ softmax_ℓ(U(x_j, X)) x_ℓ ]
//! ```
//!
//! where `S_{λh}` is soft-thresholding and `U` the interaction kernel. Two
//! kernels are available, see [`KernelForm`].

use ndarray::{Array1, Array2, Axis};

use crate::diffeng::{softplus, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::quadrature;

/// Bound applied to kernel logits before the softmax.
pub const LOGIT_CLIP: f64 = 700.0;

/// Which interaction kernel the attention step uses.
///
/// `Printed`: `U(x,y) = −β/2 [(‖x−y‖² − ‖S(x)−y‖²)/(2h) − λ‖S(y)‖₁]`.
/// Its logits are affine in `y`, so at `λ = 0` the weights are uniform.
///
/// `Laplace`: `U(x,y) = −β/2 [(‖x−y‖² − ‖S(y)−y‖²)/(2h) − λ‖S(y)‖₁]`,
/// the Laplace-method weights of the proximal kernel integral. At `λ = 0`
/// it is the Gaussian heat kernel of width `2h/β`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelForm {
    #[default]
    Laplace,
    Printed,
}

impl KernelForm {
    pub fn name(self) -> &'static str {
        match self {
            KernelForm::Laplace => "laplace",
            KernelForm::Printed => "printed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "laplace" => Ok(KernelForm::Laplace),
            "printed" => Ok(KernelForm::Printed),
            other => Err(Error::InvalidParameter(format!("unknown kernel form `{other}`"))),
        }
    }
}

/// Ensemble of `N` tokens in `ℝᵈ` at time index `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub points: Array2<f64>,
    pub time_index: usize,
    pub log_density: Option<Array1<f64>>,
}

impl TokenBatch {
    pub fn new(points: Array2<f64>, time_index: usize) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::dims(format!("token batch must be non-empty, got {:?}", points.dim())));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "token batch".into(), step: time_index });
        }
        Ok(TokenBatch { points, time_index, log_density: None })
    }

    pub fn with_log_density(mut self, log_density: Array1<f64>) -> Result<Self> {
        if log_density.len() != self.len() {
            return Err(Error::dims(format!(
                "log density has {} entries for {} tokens",
                log_density.len(),
                self.len()
            )));
        }
        if log_density.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "log density".into(), step: self.time_index });
        }
        self.log_density = Some(log_density);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

/// Inverse of softplus.
pub(crate) fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Prior strength `λ`, inverse temperature `β` and step `h`.
///
/// Trainable `λ` and `β` live as unconstrained raw values mapped through
/// softplus.
#[derive(Debug, Clone, PartialEq)]
pub struct RwpoParams {
    lambda: f64,
    beta: f64,
    h: f64,
    raw_lambda: f64,
    raw_beta: f64,
    pub trainable_lambda: bool,
    pub trainable_beta: bool,
    pub kernel: KernelForm,
}

impl RwpoParams {
    pub fn new(lambda: f64, beta: f64, h: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {lambda}")));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta must be > 0, got {beta}")));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidParameter(format!("step h must be > 0, got {h}")));
        }
        Ok(RwpoParams {
            lambda,
            beta,
            h,
            raw_lambda: softplus_inv(lambda),
            raw_beta: softplus_inv(beta),
            trainable_lambda: false,
            trainable_beta: false,
            kernel: KernelForm::default(),
        })
    }

    pub fn with_kernel(mut self, kernel: KernelForm) -> Self {
        self.kernel = kernel;
        self
    }

    /// Marks `λ` and `β` trainable. A trainable `λ` must start positive.
    pub fn trainable(mut self, lambda: bool, beta: bool) -> Result<Self> {
        if lambda && self.lambda <= 0.0 {
            return Err(Error::InvalidParameter("trainable lambda must start > 0".into()));
        }
        self.trainable_lambda = lambda;
        self.trainable_beta = beta;
        Ok(self)
    }

    /// Same parameters with a different step.
    pub fn with_step(&self, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidParameter(format!("step h must be > 0, got {h}")));
        }
        Ok(RwpoParams { h, ..self.clone() })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Soft-threshold level `λh`.
    pub fn tau(&self) -> f64 {
        self.lambda * self.h
    }

    pub fn raw_lambda(&self) -> f64 {
        self.raw_lambda
    }

    pub fn raw_beta(&self) -> f64 {
        self.raw_beta
    }

    pub fn set_raw_lambda(&mut self, raw: f64) {
        self.raw_lambda = raw;
        self.lambda = softplus(raw);
    }

    pub fn set_raw_beta(&mut self, raw: f64) {
        self.raw_beta = raw;
        self.beta = softplus(raw);
    }

    /// Records `λ` and `β` on `tape`. Trainable values become softplus
    /// images of raw leaves, the rest constant leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundRwpo<'t> {
        let (raw_lambda, lambda) = if self.trainable_lambda {
            let raw = tape.scalar(self.raw_lambda);
            (Some(raw), raw.softplus())
        } else {
            (None, tape.scalar(self.lambda))
        };
        let (raw_beta, beta) = if self.trainable_beta {
            let raw = tape.scalar(self.raw_beta);
            (Some(raw), raw.softplus())
        } else {
            (None, tape.scalar(self.beta))
        };
        BoundRwpo {
            lambda,
            beta,
            raw_lambda,
            raw_beta,
            h: self.h,
            kernel: self.kernel,
            lambda_val: lambda.item(),
            beta_val: beta.item(),
        }
    }

    /// Records `λ` and `β` as constants regardless of the trainable flags.
    pub fn bind_const<'t>(&self, tape: &'t Tape) -> BoundRwpo<'t> {
        RwpoParams { trainable_lambda: false, trainable_beta: false, ..self.clone() }.bind(tape)
    }
}

/// `λ`, `β` recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundRwpo<'t> {
    pub lambda: Var<'t>,
    pub beta: Var<'t>,
    pub raw_lambda: Option<Var<'t>>,
    pub raw_beta: Option<Var<'t>>,
    pub h: f64,
    pub kernel: KernelForm,
    lambda_val: f64,
    beta_val: f64,
}

impl<'t> BoundRwpo<'t> {
    pub fn lambda_value(&self) -> f64 {
        self.lambda_val
    }

    pub fn beta_value(&self) -> f64 {
        self.beta_val
    }

    pub fn tau_value(&self) -> f64 {
        self.lambda_val * self.h
    }

    /// Constant copy, cutting gradients into `λ` and `β`.
    pub fn detach(&self) -> BoundRwpo<'t> {
        BoundRwpo {
            lambda: self.lambda.detach(),
            beta: self.beta.detach(),
            raw_lambda: None,
            raw_beta: None,
            ..*self
        }
    }
}

/// Token displacement and its divergence, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput<'t> {
    /// `N×d` displacement `½[S(x_j) − x̄_j]`.
    pub displacement: Var<'t>,
    /// `N×1` trace of `∂ displacement_j / ∂ x_j`.
    pub divergence: Option<Var<'t>>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `sign(x_i)·max(|x_i| − τ, 0)` componentwise.
pub fn soft_threshold(x: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidParameter(format!("threshold must be >= 0, got {tau}")));
    }
    Ok(x.iter().map(|&v| sign(v) * (v.abs() - tau).max(0.0)).collect())
}

pub(crate) fn soft_threshold_array(x: &Array2<f64>, tau: f64) -> Array2<f64> {
    x.mapv(|v| sign(v) * (v.abs() - tau).max(0.0))
}

/// Soft-thresholding on the tape; `tau` is a `1×1` node.
pub fn soft_threshold_var<'t>(x: Var<'t>, tau: Var<'t>) -> Var<'t> {
    let signs = x.value().mapv(sign);
    (x.abs() - tau).relu().mask(signs)
}

/// Interaction kernel `U(x, y)` for a single pair.
pub fn kernel_u(x: &[f64], y: &[f64], p: &RwpoParams) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dims(format!("kernel arguments have dimensions {} and {}", x.len(), y.len())));
    }
    let tau = p.tau();
    let sy = soft_threshold(y, tau)?;
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
    let second = match p.kernel {
        KernelForm::Printed => dist2(&soft_threshold(x, tau)?, y),
        KernelForm::Laplace => dist2(&sy, y),
    };
    let l1: f64 = sy.iter().map(|v| v.abs()).sum();
    Ok(-0.5 * p.beta() * ((dist2(x, y) - second) / (2.0 * p.h()) - p.lambda() * l1))
}

/// Clipped kernel logits `U(q_j, y_ℓ)`, `n_q × N`.
pub fn kernel_logits<'t>(queries: Var<'t>, keys: Var<'t>, rw: &BoundRwpo<'t>) -> Var<'t> {
    let tau = rw.lambda * rw.h;
    let sk = soft_threshold_var(keys, tau);
    let penalty = sk.abs().sum_rows().transpose() * rw.lambda;
    let q2 = queries.square().sum_rows();
    let cross = match rw.kernel {
        KernelForm::Laplace => {
            let k2 = keys.square().sum_rows().transpose();
            let envelope = (sk - keys).square().sum_rows().transpose();
            q2 + k2 - queries.matmul_t(keys).scale(2.0) - envelope
        }
        KernelForm::Printed => {
            let sq = soft_threshold_var(queries, tau);
            let resid = queries - sq;
            q2 - sq.square().sum_rows() - resid.matmul_t(keys).scale(2.0)
        }
    };
    let inner = cross.scale(1.0 / (2.0 * rw.h)) - penalty;
    (inner * rw.beta).scale(-0.5).clamp(-LOGIT_CLIP, LOGIT_CLIP)
}

/// Displacement `½[S(q_j) − Σ_ℓ w_jℓ y_ℓ]` for queries against keys, with
/// the attention weights.
pub fn query_displacement<'t>(queries: Var<'t>, keys: Var<'t>, rw: &BoundRwpo<'t>) -> (Var<'t>, Var<'t>) {
    let tau = rw.lambda * rw.h;
    let w = kernel_logits(queries, keys, rw).softmax_rows();
    let disp = (soft_threshold_var(queries, tau) - w.matmul(keys)).scale(0.5);
    (disp, w)
}

/// The attention half-step on an ensemble, with the closed-form divergence
/// of each token's displacement when requested.
pub fn attention<'t>(x: Var<'t>, rw: &BoundRwpo<'t>, with_divergence: bool) -> AttentionOutput<'t> {
    let tape = x.tape();
    let tau = rw.lambda * rw.h;
    let tau_val = rw.tau_value();
    let w = kernel_logits(x, x, rw).softmax_rows();
    let xbar = w.matmul(x);
    let sx = soft_threshold_var(x, tau);
    let displacement = (sx - xbar).scale(0.5);
    if !with_divergence {
        return AttentionOutput { displacement, divergence: None };
    }

    let xv = x.value();
    let (n, d) = xv.dim();
    let active = xv.mapv(|v| if v.abs() > tau_val { 1.0 } else { 0.0 });
    let n_active = tape.leaf(active.sum_axis(Axis(1)).insert_axis(Axis(1)));
    let wjj = w.diag();
    let coef = rw.beta.scale(1.0 / (2.0 * rw.h));
    let centered = x - xbar;
    let resid = x - sx;
    let (spread, self_grad) = match rw.kernel {
        KernelForm::Laplace => {
            let second = w.matmul(x.square().sum_rows());
            let spread = second - xbar.square().sum_rows();
            (spread, resid)
        }
        KernelForm::Printed => {
            let inactive = active.mapv(|a| 1.0 - a);
            let spread = (w.matmul(x.square()) - xbar.square()).mask(inactive).sum_rows();
            let signs = Tensor::from_shape_fn((n, d), |(i, k)| sign(xv[[i, k]]) * active[[i, k]]);
            let shifted = tape.leaf(signs) * rw.lambda * rw.h;
            (spread, resid + shifted)
        }
    };
    let self_term = wjj * (centered * self_grad).sum_rows();
    let trace = wjj.scale(d as f64) + coef * (spread + self_term);
    let divergence = (n_active - trace).scale(0.5);
    AttentionOutput { displacement, divergence: Some(divergence) }
}

fn check_finite(points: &Array2<f64>, context: &str, step: usize) -> Result<()> {
    if points.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context: context.into(), step })
    }
}

/// Displacement and (optionally) divergence of the attention step computed
/// row by row without a tape. Agrees with [`attention`] to rounding.
pub fn attention_direct(x: &Array2<f64>, p: &RwpoParams, with_divergence: bool) -> (Array2<f64>, Option<Array1<f64>>) {
    let (n, d) = x.dim();
    let (lambda, beta, h) = (p.lambda(), p.beta(), p.h());
    let tau = p.tau();
    let sx = soft_threshold_array(x, tau);
    let penalty: Vec<f64> = sx.rows().into_iter().map(|r| lambda * r.iter().map(|v| v.abs()).sum::<f64>()).collect();
    let sq_norm: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
    let envelope: Vec<f64> = (&sx - x).rows().into_iter().map(|r| r.dot(&r)).collect();
    let inv2h = 1.0 / (2.0 * h);
    let coef = beta * inv2h;

    let rows = par::map_indices(n, |i| {
        let xi = x.row(i);
        let mut logits = vec![0.0; n];
        let resid_q: Vec<f64> = (0..d).map(|k| x[[i, k]] - sx[[i, k]]).collect();
        let sq_q: f64 = sx.row(i).dot(&sx.row(i));
        let mut max = f64::NEG_INFINITY;
        for (j, l) in logits.iter_mut().enumerate() {
            let xj = x.row(j);
            let cross = match p.kernel {
                KernelForm::Laplace => sq_norm[i] + sq_norm[j] - 2.0 * xi.dot(&xj) - envelope[j],
                KernelForm::Printed => {
                    let dot: f64 = resid_q.iter().zip(xj.iter()).map(|(a, b)| a * b).sum();
                    sq_norm[i] - sq_q - 2.0 * dot
                }
            };
            *l = (-0.5 * beta * (cross * inv2h - penalty[j])).clamp(-LOGIT_CLIP, LOGIT_CLIP);
            max = max.max(*l);
        }
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            z += *l;
        }
        let mut xbar = vec![0.0; d];
        let mut second = vec![0.0; d];
        for (j, l) in logits.iter_mut().enumerate() {
            *l /= z;
            for k in 0..d {
                let v = x[[j, k]];
                xbar[k] += *l * v;
                second[k] += *l * v * v;
            }
        }
        let disp: Vec<f64> = (0..d).map(|k| 0.5 * (sx[[i, k]] - xbar[k])).collect();
        let div = with_divergence.then(|| {
            let wjj = logits[i];
            let mut n_active = 0.0;
            let mut spread = 0.0;
            let mut self_term = 0.0;
            for k in 0..d {
                let v = x[[i, k]];
                let active = v.abs() > tau;
                if active {
                    n_active += 1.0;
                }
                let centered = v - xbar[k];
                let grad = match p.kernel {
                    KernelForm::Laplace => {
                        spread += second[k] - xbar[k] * xbar[k];
                        v - sx[[i, k]]
                    }
                    KernelForm::Printed => {
                        if active {
                            v - sx[[i, k]] + lambda * h * sign(v)
                        } else {
                            spread += second[k] - xbar[k] * xbar[k];
                            v - sx[[i, k]]
                        }
                    }
                };
                self_term += centered * grad;
            }
            let trace = wjj * d as f64 + coef * (spread + wjj * self_term);
            0.5 * (n_active - trace)
        });
        (disp, div)
    });
    let disp = Array2::from_shape_fn((n, d), |(i, k)| rows[i].0[k]);
    let div = with_divergence.then(|| rows.iter().map(|r| r.1.expect("requested")).collect());
    (disp, div)
}

/// One attention half-step on a batch.
pub fn sparse_attention_step(batch: &TokenBatch, p: &RwpoParams) -> Result<TokenBatch> {
    let (disp, _) = attention_direct(&batch.points, p, false);
    let next = &batch.points + &disp;
    check_finite(&next, "attention step", batch.time_index)?;
    Ok(TokenBatch { points: next, time_index: batch.time_index, log_density: None })
}

/// Closed-form divergences of every token's displacement.
pub fn attention_divergences(batch: &TokenBatch, p: &RwpoParams) -> Result<Array1<f64>> {
    let div = attention_direct(&batch.points, p, true).1.expect("requested");
    if div.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "attention divergence".into(), step: batch.time_index });
    }
    Ok(div)
}

/// Divergence of token `j`'s displacement with the other tokens held fixed,
/// by `d` forward tangent sweeps through the recorded update.
pub fn sparse_attention_divergence(batch: &TokenBatch, p: &RwpoParams, j: usize) -> Result<f64> {
    let (n, d) = batch.points.dim();
    if j >= n {
        return Err(Error::dims(format!("token index {j} out of range for {n} tokens")));
    }
    check_finite(&batch.points, "attention divergence", batch.time_index)?;
    let tape = Tape::new();
    let rw = p.bind_const(&tape);
    let xj = tape.row(batch.points.row(j).as_slice().expect("standard layout row").as_ref());
    let mut others = batch.points.clone();
    others.row_mut(j).fill(0.0);
    let mut onehot = Tensor::zeros((n, 1));
    onehot[[j, 0]] = 1.0;
    let keys = tape.leaf(others) + tape.leaf(onehot).matmul(xj);
    let (disp, _) = query_displacement(xj, keys, &rw);
    let mut total = 0.0;
    for i in 0..d {
        let mut e = Tensor::zeros((1, d));
        e[[0, i]] = 1.0;
        total += tape.jvp(&[(xj, e)])?.wrt(disp)[[0, i]];
    }
    Ok(total)
}

/// Attention weights of `queries` against `keys`.
pub fn attention_weights(queries: &Array2<f64>, keys: &Array2<f64>, p: &RwpoParams) -> Result<Array2<f64>> {
    if queries.ncols() != keys.ncols() {
        return Err(Error::dims("queries and keys differ in dimension"));
    }
    let tape = Tape::new();
    let rw = p.bind_const(&tape);
    let w = kernel_logits(tape.leaf(queries.clone()), tape.leaf(keys.clone()), &rw).softmax_rows();
    Ok(w.value())
}

/// Attention-form score `−β/2 [(x − S(x))/h + (x − x̄)/h]` at each query.
pub fn approx_score(queries: &Array2<f64>, keys: &Array2<f64>, p: &RwpoParams) -> Result<Array2<f64>> {
    let w = attention_weights(queries, keys, p)?;
    let xbar = w.dot(keys);
    let sx = soft_threshold_array(queries, p.tau());
    let scale = -0.5 * p.beta() / p.h();
    Ok((queries - &sx + queries - &xbar) * scale)
}

/// Dot-product attention block `x_j + h Σ_ℓ softmax(Qx_j · KX)_ℓ V x_ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineAttention {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub h: f64,
}

impl BaselineAttention {
    pub fn new(q: Array2<f64>, k: Array2<f64>, v: Array2<f64>, h: f64) -> Result<Self> {
        let d = q.ncols();
        if k.dim() != q.dim() || v.dim() != (d, d) {
            return Err(Error::dims(format!(
                "Q {:?}, K {:?}, V {:?} do not conform",
                q.dim(),
                k.dim(),
                v.dim()
            )));
        }
        Ok(BaselineAttention { q, k, v, h })
    }
}

pub fn baseline_attention_step(batch: &TokenBatch, a: &BaselineAttention) -> Result<TokenBatch> {
    let x = &batch.points;
    if x.ncols() != a.q.ncols() {
        return Err(Error::dims(format!("tokens in ℝ^{} but Q acts on ℝ^{}", x.ncols(), a.q.ncols())));
    }
    let mut logits = x.dot(&a.q.t()).dot(&x.dot(&a.k.t()).t());
    for mut row in logits.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    let next = x + &(logits.dot(&x.dot(&a.v.t())) * a.h);
    check_finite(&next, "baseline attention", batch.time_index)?;
    Ok(TokenBatch { points: next, time_index: batch.time_index, log_density: None })
}

/// Log of the proximal kernel `K^h_ψ ρ(x)` in 1D for the empirical measure
/// of `samples`, by quadrature of the normalizing integrals.
fn rwpo_log_kernel_1d(samples: &[f64], x: f64, envelopes: &[(f64, f64)], p: &RwpoParams) -> f64 {
    let (lambda, beta, h) = (p.lambda(), p.beta(), p.h());
    let terms: Vec<f64> = samples
        .iter()
        .zip(envelopes)
        .map(|(&y, &(e_min, log_z))| {
            -0.5 * beta * (lambda * x.abs() + (x - y).powi(2) / (2.0 * h) - e_min) - log_z
        })
        .collect();
    let m = terms.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln() - (samples.len() as f64).ln()
}

/// Density and score of the proximal kernel applied to an empirical 1D
/// measure, evaluated by adaptive quadrature (absolute tolerance 1e-10) and
/// a central difference of step 1e-6.
pub fn rwpo_kernel_1d(samples: &[f64], x: f64, p: &RwpoParams) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::dims("empirical measure needs at least one sample"));
    }
    let (lambda, beta, h) = (p.lambda(), p.beta(), p.h());
    let half_width = 10.0 * (2.0 * h / beta).sqrt();
    let mut envelopes = Vec::with_capacity(samples.len());
    for &y in samples {
        // exponent minimum sits at the prox point; scale it out
        let s = sign(y) * (y.abs() - lambda * h).max(0.0);
        let e_min = lambda * s.abs() + (s - y).powi(2) / (2.0 * h);
        let integrand = |z: f64| (-0.5 * beta * (lambda * z.abs() + (z - y).powi(2) / (2.0 * h) - e_min)).exp();
        let z = quadrature::integrate_with_breaks(integrand, y - half_width, y + half_width, &[0.0], 1e-10)?;
        if !(z > 0.0) {
            return Err(Error::Quadrature(format!("normalizer vanished for sample {y}")));
        }
        envelopes.push((e_min, z.ln()));
    }
    let step = 1e-6;
    let log_k = rwpo_log_kernel_1d(samples, x, &envelopes, p);
    let plus = rwpo_log_kernel_1d(samples, x + step, &envelopes, p);
    let minus = rwpo_log_kernel_1d(samples, x - step, &envelopes, p);
    Ok((log_k.exp(), (plus - minus) / (2.0 * step)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(lambda: f64, beta: f64, h: f64, kernel: KernelForm) -> RwpoParams {
        RwpoParams::new(lambda, beta, h).unwrap().with_kernel(kernel)
    }

    fn batch(points: Array2<f64>) -> TokenBatch {
        TokenBatch::new(points, 0).unwrap()
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(&[1.2, 0.3, -1.0], 0.5).unwrap(), vec![1.2 - 0.5, 0.0, -0.5]);
        assert_eq!(soft_threshold(&[0.5], 0.5).unwrap(), vec![0.0]);
        let x = [0.1, -3.0, 0.0, 7.5];
        assert_eq!(soft_threshold(&x, 0.0).unwrap(), x.to_vec());
        assert!(matches!(soft_threshold(&x, -0.1), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn kernel_vanishes_at_origin() {
        for kernel in [KernelForm::Laplace, KernelForm::Printed] {
            let p = params(1.3, 0.7, 0.2, kernel);
            assert_eq!(kernel_u(&[0.0, 0.0], &[0.0, 0.0], &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn printed_kernel_is_zero_without_prior() {
        let p = params(0.0, 2.0, 0.1, KernelForm::Printed);
        assert_eq!(kernel_u(&[1.0, -2.0], &[0.3, 0.4], &p).unwrap(), 0.0);
    }

    #[test]
    fn kernel_hand_values() {
        // x=1, y=0, λ=1, β=2, h=0.25: S(x)=0.75, S(y)=0
        let printed = params(1.0, 2.0, 0.25, KernelForm::Printed);
        let want = -(1.0 - 0.5625) / 0.5;
        assert_relative_eq!(kernel_u(&[1.0], &[0.0], &printed).unwrap(), want, epsilon = 1e-15);
        let laplace = params(1.0, 2.0, 0.25, KernelForm::Laplace);
        assert_relative_eq!(kernel_u(&[1.0], &[0.0], &laplace).unwrap(), -2.0, epsilon = 1e-15);
        assert!(matches!(kernel_u(&[1.0], &[0.0, 1.0], &laplace), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn single_token_without_prior_is_fixed() {
        for kernel in [KernelForm::Laplace, KernelForm::Printed] {
            let b = batch(array![[0.3, -1.7, 2.2]]);
            let out = sparse_attention_step(&b, &params(0.0, 1.0, 0.1, kernel)).unwrap();
            assert_eq!(out.points, b.points);
        }
    }

    #[test]
    fn printed_kernel_without_prior_is_uniform_contraction() {
        let pts = array![[1.0], [-1.0]];
        let out = sparse_attention_step(&batch(pts), &params(0.0, 1.0, 0.1, KernelForm::Printed)).unwrap();
        assert_eq!(out.points, array![[1.5], [-1.5]]);

        let pts = array![[0.3, 1.0], [2.0, -0.5], [-1.1, 0.25], [0.0, 4.0]];
        let mean = pts.mean_axis(Axis(0)).unwrap();
        let want = &pts + &((&pts - &mean) * 0.5);
        let out = sparse_attention_step(&batch(pts), &params(0.0, 3.0, 0.05, KernelForm::Printed)).unwrap();
        for (a, b) in out.points.iter().zip(want.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn three_token_step_matches_direct_evaluation() {
        let xs = [0.35, -0.8, 1.4];
        for kernel in [KernelForm::Laplace, KernelForm::Printed] {
            let p = params(1.0, 1.0, 0.1, kernel);
            let out = sparse_attention_step(&batch(array![[xs[0]], [xs[1]], [xs[2]]]), &p).unwrap();
            for (j, &x) in xs.iter().enumerate() {
                let u: Vec<f64> = xs.iter().map(|&y| kernel_u(&[x], &[y], &p).unwrap()).collect();
                let z: f64 = u.iter().map(|v| v.exp()).sum();
                let mean: f64 = u.iter().zip(&xs).map(|(v, y)| v.exp() / z * y).sum();
                let s = soft_threshold(&[x], 0.1).unwrap()[0];
                assert_relative_eq!(out.points[[j, 0]], x + 0.5 * (s - mean), epsilon = 1e-14);
            }
        }
    }

    fn fd_divergence(b: &TokenBatch, p: &RwpoParams, j: usize) -> f64 {
        let step = 1e-5;
        let d = b.dim();
        (0..d)
            .map(|i| {
                let disp = |delta: f64| {
                    let mut pts = b.points.clone();
                    pts[[j, i]] += delta;
                    let next = sparse_attention_step(&batch(pts.clone()), p).unwrap();
                    next.points[[j, i]] - pts[[j, i]]
                };
                (disp(step) - disp(-step)) / (2.0 * step)
            })
            .sum()
    }

    fn random_batch(n: usize, d: usize, seed: u64) -> TokenBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        batch(Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.5..1.5)))
    }

    fn clear_of_kinks(b: &TokenBatch, tau: f64) -> bool {
        b.points.iter().all(|v| (v.abs() - tau).abs() > 1e-3)
    }

    #[test]
    fn divergence_without_prior_matches_finite_differences() {
        for kernel in [KernelForm::Laplace, KernelForm::Printed] {
            let b = random_batch(5, 3, 11);
            let p = params(0.0, 1.0, 0.2, kernel);
            let closed = attention_divergences(&b, &p).unwrap();
            for j in 0..5 {
                let fd = fd_divergence(&b, &p, j);
                let fwd = sparse_attention_divergence(&b, &p, j).unwrap();
                assert!((fd - fwd).abs() < 1e-6, "{kernel:?} token {j}: fd {fd} jvp {fwd}");
                assert!((closed[j] - fwd).abs() < 1e-10, "{kernel:?} token {j}: closed {} jvp {fwd}", closed[j]);
            }
        }
    }

    #[test]
    fn single_token_divergence_is_zero_without_prior() {
        let b = batch(array![[0.4, -0.2]]);
        let p = params(0.0, 1.0, 0.1, KernelForm::Laplace);
        assert_eq!(sparse_attention_divergence(&b, &p, 0).unwrap(), 0.0);
    }

    #[test]
    fn printed_uniform_divergence() {
        // uniform weights: ½ d (1 − 1/N) from the contraction, no weight term
        let b = random_batch(4, 2, 5);
        let p = params(0.0, 1.0, 0.1, KernelForm::Printed);
        let div = sparse_attention_divergence(&b, &p, 2).unwrap();
        assert_relative_eq!(div, 0.5 * 2.0 * (1.0 - 0.25), epsilon = 1e-12);
    }

    #[test]
    fn fully_active_tokens_divergence() {
        for kernel in [KernelForm::Laplace, KernelForm::Printed] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let pts = Array2::from_shape_fn((6, 2), |_| {
                let m: f64 = rng.gen_range(0.3..1.5);
                if rng.gen_bool(0.5) { m } else { -m }
            });
            let b = batch(pts);
            let p = params(1.0, 1.0, 0.1, kernel);
            let closed = attention_divergences(&b, &p).unwrap();
            for j in 0..6 {
                let fd = fd_divergence(&b, &p, j);
                let fwd = sparse_attention_divergence(&b, &p, j).unwrap();
                assert!((fd - fwd).abs() < 1e-6, "{kernel:?} token {j}: fd {fd} jvp {fwd}");
                assert!((closed[j] - fwd).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn baseline_reductions() {
        let pts = array![[1.0, 2.0], [-0.5, 0.5], [3.0, -1.0]];
        let zero = Array2::zeros((3, 2));
        let v = array![[0.5, -1.0], [2.0, 0.25]];
        let a = BaselineAttention::new(zero.clone(), zero.clone(), v.clone(), 0.1).unwrap();
        let out = baseline_attention_step(&batch(pts.clone()), &a).unwrap();
        let mean = pts.mean_axis(Axis(0)).unwrap();
        let shift = v.dot(&mean) * 0.1;
        for j in 0..3 {
            for i in 0..2 {
                assert_relative_eq!(out.points[[j, i]], pts[[j, i]] + shift[i], epsilon = 1e-14);
            }
        }
        let q = array![[1.0, 0.3], [0.2, -0.7], [0.5, 0.5]];
        let a = BaselineAttention::new(q.clone(), q, Array2::zeros((2, 2)), 0.1).unwrap();
        assert_eq!(baseline_attention_step(&batch(pts.clone()), &a).unwrap().points, pts);
        assert!(BaselineAttention::new(zero.clone(), zero, Array2::zeros((3, 3)), 0.1).is_err());
    }

    #[test]
    fn baseline_random_instance() {
        let pts = array![[0.2, -1.0], [1.5, 0.3]];
        let q = array![[0.4, -0.2], [1.1, 0.6]];
        let k = array![[-0.3, 0.8], [0.5, 0.1]];
        let v = array![[0.9, 0.2], [-0.4, 1.3]];
        let h = 0.3;
        let a = BaselineAttention::new(q.clone(), k.clone(), v.clone(), h).unwrap();
        let out = baseline_attention_step(&batch(pts.clone()), &a).unwrap();
        let mv = |m: &Array2<f64>, x: [f64; 2]| [m[[0, 0]] * x[0] + m[[0, 1]] * x[1], m[[1, 0]] * x[0] + m[[1, 1]] * x[1]];
        let rows = [[0.2, -1.0], [1.5, 0.3]];
        for j in 0..2 {
            let qx = mv(&q, rows[j]);
            let s: Vec<f64> = rows
                .iter()
                .map(|&y| {
                    let ky = mv(&k, y);
                    qx[0] * ky[0] + qx[1] * ky[1]
                })
                .collect();
            let z = s[0].exp() + s[1].exp();
            for i in 0..2 {
                let upd: f64 = (0..2).map(|l| s[l].exp() / z * mv(&v, rows[l])[i]).sum();
                assert_relative_eq!(out.points[[j, i]], rows[j][i] + h * upd, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn oracle_gaussian_smoothing_without_prior() {
        let (beta, h) = (2.0, 0.1);
        let p = params(0.0, beta, h, KernelForm::Laplace);
        for &x in &[-0.7, 0.0, 0.25, 1.0] {
            let (dens, score) = rwpo_kernel_1d(&[0.0], x, &p).unwrap();
            let var = 2.0 * h / beta;
            let want = (-x * x / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
            assert_relative_eq!(dens, want, max_relative = 1e-9);
            assert!((score + beta * x / (2.0 * h)).abs() < 1e-6);
        }
    }

    #[test]
    fn oracle_symmetric_score_at_origin() {
        let p = params(1.0, 1.0, 0.1, KernelForm::Laplace);
        let (_, score) = rwpo_kernel_1d(&[0.0], 0.0, &p).unwrap();
        assert!(score.abs() < 1e-8);
    }

    #[test]
    fn params_validation_and_softplus_roundtrip() {
        assert!(RwpoParams::new(-1.0, 1.0, 0.1).is_err());
        assert!(RwpoParams::new(1.0, 0.0, 0.1).is_err());
        assert!(RwpoParams::new(1.0, 1.0, 0.0).is_err());
        assert!(RwpoParams::new(0.0, 1.0, 0.1).unwrap().trainable(true, false).is_err());
        let mut p = RwpoParams::new(2.0, 1.0, 0.1).unwrap().trainable(true, true).unwrap();
        assert_relative_eq!(softplus(p.raw_lambda()), 2.0, epsilon = 1e-14);
        p.set_raw_beta(-40.0);
        assert!(p.beta() > 0.0);
    }

    proptest! {
        #[test]
        fn weights_are_a_distribution(seed in 0u64..500, lambda in 0.0f64..2.0) {
            let b = random_batch(7, 2, seed);
            let p = params(lambda, 1.0, 0.05, KernelForm::Laplace);
            let w = attention_weights(&b.points, &b.points, &p).unwrap();
            for row in w.rows() {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn step_is_permutation_equivariant(seed in 0u64..500, lambda in 0.0f64..2.0) {
            let b = random_batch(6, 2, seed);
            let perm = [3usize, 0, 5, 1, 4, 2];
            let permuted = Array2::from_shape_fn((6, 2), |(i, k)| b.points[[perm[i], k]]);
            for kernel in [KernelForm::Laplace, KernelForm::Printed] {
                let p = params(lambda, 1.3, 0.1, kernel);
                let out = sparse_attention_step(&b, &p).unwrap();
                let out_p = sparse_attention_step(&batch(permuted.clone()), &p).unwrap();
                for i in 0..6 {
                    for k in 0..2 {
                        prop_assert!((out_p.points[[i, k]] - out.points[[perm[i], k]]).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn kernel_shift_invariant_without_prior(
            x in proptest::collection::vec(-2.0f64..2.0, 2),
            y in proptest::collection::vec(-2.0f64..2.0, 2),
            s in proptest::collection::vec(-3.0f64..3.0, 2),
        ) {
            let p = params(0.0, 1.0, 0.1, KernelForm::Laplace);
            let xs: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a + b).collect();
            let ys: Vec<f64> = y.iter().zip(&s).map(|(a, b)| a + b).collect();
            let u = kernel_u(&x, &y, &p).unwrap();
            let us = kernel_u(&xs, &ys, &p).unwrap();
            prop_assert!((u - us).abs() <= 1e-10 * (1.0 + u.abs()));
        }

        #[test]
        fn closed_form_divergence_matches_tangent_sweeps(seed in 0u64..200, lambda in 0.0f64..2.0) {
            let b = random_batch(5, 2, seed);
            for kernel in [KernelForm::Laplace, KernelForm::Printed] {
                let p = params(lambda, 0.8, 0.1, kernel);
                prop_assume!(clear_of_kinks(&b, p.tau()));
                let closed = attention_divergences(&b, &p).unwrap();
                for j in 0..5 {
                    let fwd = sparse_attention_divergence(&b, &p, j).unwrap();
                    prop_assert!((closed[j] - fwd).abs() <= 1e-9 * (1.0 + fwd.abs()));
                }
            }
        }

        #[test]
        fn direct_and_recorded_attention_agree(seed in 0u64..200, lambda in 0.0f64..2.0, n in 1usize..12) {
            let b = random_batch(n, 3, seed);
            for kernel in [KernelForm::Laplace, KernelForm::Printed] {
                let p = params(lambda, 1.3, 0.07, kernel);
                let tape = Tape::new();
                let out = attention(tape.leaf(b.points.clone()), &p.bind_const(&tape), true);
                let (disp, div) = attention_direct(&b.points, &p, true);
                let div = div.unwrap();
                let tdisp = out.displacement.value();
                let tdiv = out.divergence.unwrap().value();
                for (a, t) in disp.iter().zip(tdisp.iter()) {
                    prop_assert!((a - t).abs() <= 1e-12 * (1.0 + t.abs()));
                }
                for (a, t) in div.iter().zip(tdiv.column(0)) {
                    prop_assert!((a - t).abs() <= 1e-11 * (1.0 + t.abs()));
                }
            }
        }
    }
}
