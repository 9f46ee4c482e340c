//! Time integration of the flow with log-density tracking.
//!
//! A forward step from `t_k` is a drift half-step followed by the attention
//! half-step:
//!
//! ```text
//! x^{k+1/2} = x^k + h ∇φ(x^k, t_k)
//! x^{k+1}   = x^{k+1/2} + disp(x^{k+1/2})
//! ```
//!
//! The backward pass undoes the two half-steps in reverse order, evaluating
//! the drift at the half-step stamp `t_{k−1/2}`:
//!
//! ```text
//! x^{k−1/2} = x^k − disp(x^k)
//! x^{k−1}   = x^{k−1/2} − h ∇φ(x^{k−1/2}, t_{k−1/2})
//! ```
//!
//! In both directions the per-token change `C` collects `div disp` and
//! `h Δφ` at the evaluation states, and `log ρ_T = log ρ_0 − C`.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::diffeng::{Tensor, Var};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, CsvWriter};
use crate::layer::{attention, attention_direct, AttentionOutput, BoundRwpo, RwpoParams, TokenBatch};
use crate::potential::{BoundPotential, Derivatives, DriftPotential, PotentialField};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Uniform grid `t_k = k·h`, `h = T/M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter("time grid needs at least one step".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!("horizon must be > 0, got {horizon}")));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn h(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.h()
    }

    /// `t_{k−1/2}`
    pub fn t_half(&self, k: usize) -> f64 {
        (k as f64 - 0.5) * self.h()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// States where the drift was evaluated, with their time stamp.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftPoint {
    pub points: Array2<f64>,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Whole-step batches indexed by time, `0..=M`.
    pub batches: Vec<TokenBatch>,
    /// Accumulated change in integration order at each time index.
    pub logdet_steps: Option<Vec<Array1<f64>>>,
    pub direction: Direction,
    /// Drift evaluation states in integration order.
    pub drift_points: Vec<DriftPoint>,
    pub h: f64,
}

impl Trajectory {
    /// Total change `C` per token.
    pub fn logdet_accum(&self) -> Option<&Array1<f64>> {
        let steps = self.logdet_steps.as_ref()?;
        match self.direction {
            Direction::Forward => steps.last(),
            Direction::Backward => steps.first(),
        }
    }

    pub fn initial(&self) -> &TokenBatch {
        &self.batches[0]
    }

    pub fn terminal(&self) -> &TokenBatch {
        self.batches.last().expect("non-empty trajectory")
    }

    /// Rows `(step, token_id, x_1..x_d, logdet_accum)`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.batches[0].dim();
        let mut header = vec!["step".to_string(), "token_id".to_string()];
        header.extend((1..=d).map(|i| format!("x_{i}")));
        header.push("logdet_accum".into());
        let mut w = CsvWriter::create(path, &header)?;
        for (k, b) in self.batches.iter().enumerate() {
            for (j, row) in b.points.rows().into_iter().enumerate() {
                let mut fields = vec![k.to_string(), j.to_string()];
                fields.extend(row.iter().map(|&v| fmt_f64(v)));
                fields.push(match &self.logdet_steps {
                    Some(steps) => fmt_f64(steps[k][j]),
                    None => String::new(),
                });
                w.row(&fields)?;
            }
        }
        w.finish()
    }
}

/// `log N(x; 0, I)` per row.
pub fn base_log_density(x: &Array2<f64>) -> Array1<f64> {
    let d = x.ncols() as f64;
    x.map_axis(Axis(1), |r| -0.5 * r.dot(&r) - 0.5 * d * LN_2PI)
}

pub fn base_log_density_var<'t>(x: Var<'t>) -> Var<'t> {
    let d = x.shape().1 as f64;
    x.square().sum_rows().scale(-0.5) - 0.5 * d * LN_2PI
}

/// Switches for the integrator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowOptions {
    /// Apply the attention half-step; off gives a plain neural ODE.
    pub attention: bool,
    /// Treat the attention displacement and divergence as constants when
    /// differentiating.
    pub detach_attention: bool,
    /// Track the log-density change.
    pub track_density: bool,
    pub backward_attention: BackwardAttention,
}

/// How the backward pass treats the attention half-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardAttention {
    /// Apply the attention step again, `x + disp(x)`, with change `−div`:
    /// the backward pass is its own map and `log ρ_T` follows from its
    /// change of variables.
    Repeat,
    /// First-order inverse of the forward step, `x − disp(x)`, change `+div`.
    Invert,
}

impl BackwardAttention {
    pub fn name(self) -> &'static str {
        match self {
            BackwardAttention::Repeat => "repeat",
            BackwardAttention::Invert => "invert",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "repeat" => Ok(BackwardAttention::Repeat),
            "invert" => Ok(BackwardAttention::Invert),
            _ => Err(Error::Config(format!("backward attention must be `repeat` or `invert`, got `{s}`"))),
        }
    }

    fn sign(self) -> f64 {
        match self {
            BackwardAttention::Repeat => 1.0,
            BackwardAttention::Invert => -1.0,
        }
    }
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            attention: true,
            detach_attention: false,
            track_density: true,
            backward_attention: BackwardAttention::Repeat,
        }
    }
}

fn check_finite(v: &Array2<f64>, context: &str, step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context: context.into(), step })
    }
}

fn attention_values(x: &Array2<f64>, rp: &RwpoParams, with_div: bool) -> (Array2<f64>, Option<Array1<f64>>) {
    attention_direct(x, rp, with_div)
}

/// Integrator over a potential field.
pub struct Flow<'a> {
    field: &'a dyn PotentialField,
    rwpo: RwpoParams,
    grid: TimeGrid,
    options: FlowOptions,
}

impl<'a> Flow<'a> {
    /// The attention step uses `h` of the grid.
    pub fn new(field: &'a dyn PotentialField, rp: &RwpoParams, grid: TimeGrid) -> Result<Self> {
        Ok(Flow { field, rwpo: rp.with_step(grid.h())?, grid, options: FlowOptions::default() })
    }

    pub fn options(mut self, options: FlowOptions) -> Self {
        self.options = options;
        self
    }

    fn check_batch(&self, b: &TokenBatch) -> Result<()> {
        if b.dim() != self.field.dim() {
            return Err(Error::dims(format!("tokens in ℝ^{} but potential acts on ℝ^{}", b.dim(), self.field.dim())));
        }
        Ok(())
    }

    fn batch(points: Array2<f64>, k: usize) -> TokenBatch {
        TokenBatch { points, time_index: k, log_density: None }
    }

    /// Integrates from `t = 0` to `T`.
    pub fn forward(&self, x0: &TokenBatch) -> Result<Trajectory> {
        self.check_batch(x0)?;
        let (h, m) = (self.grid.h(), self.grid.steps());
        let track = self.options.track_density;
        let n = x0.len();
        let mut x = x0.points.clone();
        let mut batches = vec![Self::batch(x.clone(), 0)];
        let mut drift_points = Vec::with_capacity(m);
        let mut accum = Array1::zeros(n);
        let mut steps = vec![accum.clone()];
        for k in 0..m {
            let t = self.grid.t(k);
            let f = self.field.field(&x, t)?;
            drift_points.push(DriftPoint { points: x.clone(), time: t });
            x += &(f.grad_x * h);
            if track {
                accum += &(Array1::from(f.laplacian) * h);
            }
            if self.options.attention {
                let (disp, div) = attention_values(&x, &self.rwpo, track);
                x += &disp;
                if let Some(div) = div {
                    accum += &div;
                }
            }
            check_finite(&x, "forward integration", k + 1)?;
            batches.push(Self::batch(x.clone(), k + 1));
            steps.push(accum.clone());
        }
        let mut traj = Trajectory {
            batches,
            logdet_steps: track.then_some(steps),
            direction: Direction::Forward,
            drift_points,
            h,
        };
        if track {
            set_log_densities(&mut traj);
        }
        Ok(traj)
    }

    /// Integrates from `t = T` back to `0`.
    pub fn backward(&self, x_t: &TokenBatch) -> Result<Trajectory> {
        self.check_batch(x_t)?;
        let (h, m) = (self.grid.h(), self.grid.steps());
        let track = self.options.track_density;
        let n = x_t.len();
        let mut x = x_t.points.clone();
        let mut batches = vec![Self::batch(x.clone(), m)];
        let mut drift_points = Vec::with_capacity(m);
        let mut accum = Array1::zeros(n);
        let mut steps = vec![accum.clone()];
        for k in (1..=m).rev() {
            if self.options.attention {
                let sign = self.options.backward_attention.sign();
                let (disp, div) = attention_values(&x, &self.rwpo, track);
                x += &(disp * sign);
                if let Some(div) = div {
                    accum -= &(div * sign);
                }
            }
            let t = self.grid.t_half(k);
            let f = self.field.field(&x, t)?;
            drift_points.push(DriftPoint { points: x.clone(), time: t });
            x -= &(f.grad_x * h);
            if track {
                accum += &(Array1::from(f.laplacian) * h);
            }
            check_finite(&x, "backward integration", k - 1)?;
            batches.push(Self::batch(x.clone(), k - 1));
            steps.push(accum.clone());
        }
        batches.reverse();
        steps.reverse();
        let mut traj = Trajectory {
            batches,
            logdet_steps: track.then_some(steps),
            direction: Direction::Backward,
            drift_points,
            h,
        };
        if track {
            set_log_densities(&mut traj);
        }
        Ok(traj)
    }
}

/// Fills `log ρ_{t_k}(x^k)` from the base density and the accumulators.
fn set_log_densities(traj: &mut Trajectory) {
    let steps = traj.logdet_steps.as_ref().expect("tracked");
    let base = base_log_density(&traj.batches[0].points);
    let dir = traj.direction;
    let total = match dir {
        Direction::Forward => steps.last().cloned(),
        Direction::Backward => steps.first().cloned(),
    }
    .expect("non-empty");
    for (k, b) in traj.batches.iter_mut().enumerate() {
        // change between time 0 and t_k
        let upto = match dir {
            Direction::Forward => steps[k].clone(),
            Direction::Backward => &total - &steps[k],
        };
        b.log_density = Some(&base - &upto);
    }
}

/// Forward generation without density tracking.
pub fn generate(p: &DriftPotential, rp: &RwpoParams, grid: TimeGrid, x0: &TokenBatch) -> Result<Trajectory> {
    let opts = FlowOptions { track_density: false, ..FlowOptions::default() };
    Flow::new(p, rp, grid)?.options(opts).forward(x0)
}

/// Forward generation with `log ρ_T` at the generated tokens.
pub fn generate_with_density(
    p: &DriftPotential,
    rp: &RwpoParams,
    grid: TimeGrid,
    x0: &TokenBatch,
) -> Result<Trajectory> {
    Flow::new(p, rp, grid)?.forward(x0)
}

/// Backward integration from data tokens to the base, tracking the change
/// in log density.
pub fn backward_integrate(p: &DriftPotential, rp: &RwpoParams, grid: TimeGrid, x_t: &TokenBatch) -> Result<Trajectory> {
    Flow::new(p, rp, grid)?.backward(x_t)
}

/// Width of the Huber smoothing of `λ‖x‖₁`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum HuberWidth {
    /// `μ = λh`
    #[default]
    Auto,
    Fixed(f64),
}

impl HuberWidth {
    pub fn resolve(self, lambda: f64, h: f64) -> f64 {
        match self {
            HuberWidth::Auto => lambda * h,
            HuberWidth::Fixed(mu) => mu,
        }
    }
}

/// `∇ψ_μ(x)_i = λ clamp(x_i/μ, −1, 1)` and `Δψ_μ(x) = (λ/μ) #{|x_i| ≤ μ}`.
pub fn huber_prior(x: &Array2<f64>, lambda: f64, mu: f64) -> (Array2<f64>, Array1<f64>) {
    if lambda == 0.0 {
        return (Array2::zeros(x.raw_dim()), Array1::zeros(x.nrows()));
    }
    let grad = x.mapv(|v| lambda * (v / mu).clamp(-1.0, 1.0));
    let lap = x.map_axis(Axis(1), |r| lambda / mu * r.iter().filter(|v| v.abs() <= mu).count() as f64);
    (grad, lap)
}

/// HJB residuals `∂_tφ + ½‖∇φ − ∇ψ_μ‖² + β⁻¹(Δφ − Δψ_μ)` for each row of
/// `x`, with the inverse temperature given directly.
pub fn hjb_residuals(
    field: &dyn PotentialField,
    lambda: f64,
    inv_beta: f64,
    x: &Array2<f64>,
    t: f64,
    mu: f64,
) -> Result<Array1<f64>> {
    if !(mu > 0.0) {
        return Err(Error::InvalidParameter(format!("Huber width must be > 0, got {mu}")));
    }
    let f = field.field(x, t)?;
    let (gpsi, lpsi) = huber_prior(x, lambda, mu);
    let diff = &f.grad_x - &gpsi;
    let kinetic = diff.map_axis(Axis(1), |r| 0.5 * r.dot(&r));
    let lap = Array1::from(f.laplacian) - &lpsi;
    Ok(Array1::from(f.dt) + &kinetic + &(lap * inv_beta))
}

pub fn hjb_residual(p: &DriftPotential, rp: &RwpoParams, x: &[f64], t: f64, mu: f64) -> Result<f64> {
    let pts = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
    Ok(hjb_residuals(p, rp.lambda(), 1.0 / rp.beta(), &pts, t, mu)?[0])
}

/// Drift derivatives recorded at one evaluation state.
#[derive(Debug, Clone, Copy)]
pub struct DriftEval<'t> {
    pub points: Var<'t>,
    pub time: f64,
    pub derivs: Derivatives<'t>,
}

/// A flow recorded on a tape.
#[derive(Debug, Clone)]
pub struct RecordedFlow<'t> {
    /// Whole-step states indexed by time, `0..=M`.
    pub states: Vec<Var<'t>>,
    /// `N×1` total change `C`.
    pub change: Option<Var<'t>>,
    /// Drift evaluations in integration order.
    pub drift: Vec<DriftEval<'t>>,
}

fn attention_half<'t>(x: Var<'t>, rw: &BoundRwpo<'t>, opts: FlowOptions) -> AttentionOutput<'t> {
    if opts.detach_attention {
        let out = attention(x.detach(), &rw.detach(), opts.track_density);
        AttentionOutput { displacement: out.displacement.detach(), divergence: out.divergence.map(Var::detach) }
    } else {
        attention(x, rw, opts.track_density)
    }
}

fn add_change<'t>(acc: Option<Var<'t>>, inc: Var<'t>) -> Option<Var<'t>> {
    Some(match acc {
        Some(a) => a + inc,
        None => inc,
    })
}

fn check_step(rw: &BoundRwpo<'_>, grid: &TimeGrid) -> Result<()> {
    if (rw.h - grid.h()).abs() > 1e-12 * grid.h() {
        return Err(Error::InvalidParameter(format!("layer step {} differs from grid step {}", rw.h, grid.h())));
    }
    Ok(())
}

fn check_var(v: Var<'_>, context: &str, step: usize) -> Result<()> {
    let tape = v.tape();
    let ok = tape.value(v).iter().all(|x| x.is_finite());
    if ok {
        Ok(())
    } else {
        Err(Error::NonFinite { context: context.into(), step })
    }
}

/// Records the backward pass from `x_t` on the tape of its inputs.
pub fn record_backward<'t>(
    pot: &BoundPotential<'t>,
    rw: &BoundRwpo<'t>,
    grid: &TimeGrid,
    x_t: Var<'t>,
    opts: FlowOptions,
) -> Result<RecordedFlow<'t>> {
    check_step(rw, grid)?;
    let h = grid.h();
    let mut x = x_t;
    let mut states = vec![x];
    let mut change = None;
    let mut drift = Vec::with_capacity(grid.steps());
    for k in (1..=grid.steps()).rev() {
        if opts.attention {
            let sign = opts.backward_attention.sign();
            let out = attention_half(x, rw, opts);
            x = x + out.displacement.scale(sign);
            if let Some(div) = out.divergence {
                change = add_change(change, div.scale(-sign));
            }
        }
        let t = grid.t_half(k);
        let derivs = pot.derivatives(x, t, opts.track_density);
        drift.push(DriftEval { points: x, time: t, derivs });
        x = x - derivs.grad_x * h;
        if let Some(lap) = derivs.laplacian {
            change = add_change(change, lap * h);
        }
        check_var(x, "backward integration", k - 1)?;
        states.push(x);
    }
    states.reverse();
    Ok(RecordedFlow { states, change, drift })
}

/// Records the forward pass from `x0` on the tape of its inputs.
pub fn record_forward<'t>(
    pot: &BoundPotential<'t>,
    rw: &BoundRwpo<'t>,
    grid: &TimeGrid,
    x0: Var<'t>,
    opts: FlowOptions,
) -> Result<RecordedFlow<'t>> {
    check_step(rw, grid)?;
    let h = grid.h();
    let mut x = x0;
    let mut states = vec![x];
    let mut change = None;
    let mut drift = Vec::with_capacity(grid.steps());
    for k in 0..grid.steps() {
        let t = grid.t(k);
        let derivs = pot.derivatives(x, t, opts.track_density);
        drift.push(DriftEval { points: x, time: t, derivs });
        x = x + derivs.grad_x * h;
        if let Some(lap) = derivs.laplacian {
            change = add_change(change, lap * h);
        }
        if opts.attention {
            let out = attention_half(x, rw, opts);
            x = x + out.displacement;
            if let Some(div) = out.divergence {
                change = add_change(change, div);
            }
        }
        check_var(x, "forward integration", k + 1)?;
        states.push(x);
    }
    if opts.track_density && change.is_none() {
        let n = x0.shape().0;
        change = Some(x0.tape().leaf(Tensor::zeros((n, 1))));
    }
    Ok(RecordedFlow { states, change, drift })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffeng::Tape;
    use crate::layer::KernelForm;
    use crate::potential::{AnalyticField, FieldValues};
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(points: Array2<f64>) -> TokenBatch {
        TokenBatch::new(points, 0).unwrap()
    }

    fn quadratic(dim: usize, a: f64) -> DriftPotential {
        let mut p = DriftPotential::zero(dim, 3, 1);
        p.quad_a = Tensor::from_shape_fn((dim + 1, dim + 1), |(i, j)| if i == j && i < dim { a.sqrt() } else { 0.0 });
        p
    }

    fn random_points(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn grid_basics() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.h(), 0.25);
        assert_eq!(g.t_half(1), 0.125);
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(0.0, 3).is_err());
    }

    #[test]
    fn zero_flow_single_token_is_constant() {
        let p = DriftPotential::zero(2, 4, 2);
        let rp = RwpoParams::new(0.0, 1.0, 0.1).unwrap();
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let x0 = batch(array![[0.4, -1.1]]);
        let fwd = generate(&p, &rp, grid, &x0).unwrap();
        assert!(fwd.batches.iter().all(|b| b.points == x0.points));
        let bwd = backward_integrate(&p, &rp, grid, &x0).unwrap();
        assert!(bwd.batches.iter().all(|b| b.points == x0.points));
        assert_eq!(bwd.logdet_accum().unwrap()[0], 0.0);
        let want = base_log_density(&x0.points)[0];
        assert_eq!(bwd.terminal().log_density.as_ref().unwrap()[0], want);
    }

    #[test]
    fn printed_kernel_two_tokens_spread() {
        let p = DriftPotential::zero(1, 2, 1);
        let rp = RwpoParams::new(0.0, 1.0, 1.0).unwrap().with_kernel(KernelForm::Printed);
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let traj = generate(&p, &rp, grid, &batch(array![[1.0], [-1.0]])).unwrap();
        assert_eq!(traj.terminal().points, array![[1.5], [-1.5]]);
    }

    #[test]
    fn repeated_backward_attention_spreads() {
        let p = DriftPotential::zero(1, 2, 1);
        let rp = RwpoParams::new(0.0, 1.0, 1.0).unwrap().with_kernel(KernelForm::Printed);
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let x = batch(array![[1.0], [-1.0]]);
        let traj = Flow::new(&p, &rp, grid).unwrap().backward(&x).unwrap();
        assert_eq!(traj.initial().points, array![[1.5], [-1.5]]);
        // div of ½(x − mean) is ½(1 − 1/N) per token
        assert_eq!(traj.logdet_accum().unwrap(), array![-0.25, -0.25]);
        let inv = FlowOptions { backward_attention: BackwardAttention::Invert, ..Default::default() };
        let traj = Flow::new(&p, &rp, grid).unwrap().options(inv).backward(&x).unwrap();
        assert_eq!(traj.initial().points, array![[0.5], [-0.5]]);
        assert_eq!(traj.logdet_accum().unwrap(), array![0.25, 0.25]);
    }

    #[test]
    fn linear_drift_logdet() {
        let (a, d, m) = (0.7, 2, 20);
        let p = quadratic(d, a);
        let rp = RwpoParams::new(0.0, 1.0, 0.1).unwrap();
        let grid = TimeGrid::new(1.0, m).unwrap();
        let flow = Flow::new(&p, &rp, grid).unwrap().options(FlowOptions { attention: false, ..Default::default() });
        let traj = flow.backward(&batch(array![[0.3, -0.2]])).unwrap();
        assert_relative_eq!(traj.logdet_accum().unwrap()[0], a * d as f64, epsilon = 1e-12);
        // x^0 = x^M (1 − a h)^M
        let shrink = (1.0 - a * grid.h()).powi(m as i32);
        assert_relative_eq!(traj.initial().points[[0, 0]], 0.3 * shrink, epsilon = 1e-14);
    }

    #[test]
    fn round_trip_error_is_first_order() {
        let mut p = crate::potential::DriftPotential::new(2, 6, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in p.params_mut() {
            t.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        let rp = RwpoParams::new(0.5, 1.0, 0.1).unwrap();
        let x0 = batch(random_points(8, 2, 3));
        let invert = FlowOptions { backward_attention: BackwardAttention::Invert, ..Default::default() };
        let err = |m: usize| {
            let grid = TimeGrid::new(0.5, m).unwrap();
            let fwd = Flow::new(&p, &rp, grid).unwrap().forward(&x0).unwrap();
            let bwd = Flow::new(&p, &rp, grid).unwrap().options(invert).backward(fwd.terminal()).unwrap();
            let pos = (&bwd.initial().points - &x0.points).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let dens = (fwd.logdet_accum().unwrap() - bwd.logdet_accum().unwrap())
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            (pos, dens)
        };
        // first order once the kernel width sqrt(2h/β) is below the token spacing
        let errs: Vec<_> = [256, 512, 1024].into_iter().map(err).collect();
        for w in errs.windows(2) {
            assert!(w[1].0 <= 0.5 * w[0].0 * 1.01, "{errs:?}");
            assert!(w[1].1 < w[0].1, "{errs:?}");
        }

        // without attention the drift splitting alone is first order at any h
        let opts = FlowOptions { attention: false, ..Default::default() };
        let drift_err = |m: usize| {
            let grid = TimeGrid::new(0.5, m).unwrap();
            let fwd = Flow::new(&p, &rp, grid).unwrap().options(opts).forward(&x0).unwrap();
            let bwd = Flow::new(&p, &rp, grid).unwrap().options(opts).backward(fwd.terminal()).unwrap();
            (&bwd.initial().points - &x0.points).iter().fold(0.0f64, |a, v| a.max(v.abs()))
        };
        let (a, b) = (drift_err(16), drift_err(32));
        assert!(b <= 0.5 * a * 1.01, "{a} {b}");
    }

    #[test]
    fn recorded_and_pure_paths_agree() {
        let p = crate::potential::DriftPotential::new(2, 5, 2, 2).unwrap();
        let rp = RwpoParams::new(0.8, 1.2, 0.25).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let pts = random_points(6, 2, 1);
        for dir in [Direction::Forward, Direction::Backward] {
            let flow = Flow::new(&p, &rp, grid).unwrap();
            let pure = match dir {
                Direction::Forward => flow.forward(&batch(pts.clone())).unwrap(),
                Direction::Backward => flow.backward(&batch(pts.clone())).unwrap(),
            };
            let tape = Tape::new();
            let pot = p.bind(&tape);
            let rw = rp.bind(&tape);
            let x = tape.leaf(pts.clone());
            let rec = match dir {
                Direction::Forward => record_forward(&pot, &rw, &grid, x, FlowOptions::default()).unwrap(),
                Direction::Backward => record_backward(&pot, &rw, &grid, x, FlowOptions::default()).unwrap(),
            };
            for (b, s) in pure.batches.iter().zip(&rec.states) {
                for (u, v) in b.points.iter().zip(s.value().iter()) {
                    assert_relative_eq!(u, v, epsilon = 1e-12);
                }
            }
            let c = rec.change.unwrap().value();
            for (a, b) in pure.logdet_accum().unwrap().iter().zip(c.iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-13);
            }
            assert_eq!(pure.drift_points.len(), rec.drift.len());
        }
    }

    #[test]
    fn permuting_tokens_permutes_trajectories() {
        let p = crate::potential::DriftPotential::new(2, 5, 2, 6).unwrap();
        let rp = RwpoParams::new(1.0, 1.0, 0.1).unwrap();
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let pts = random_points(5, 2, 9);
        let perm = [4usize, 2, 0, 3, 1];
        let permuted = Array2::from_shape_fn((5, 2), |(i, k)| pts[[perm[i], k]]);
        let a = generate_with_density(&p, &rp, grid, &batch(pts)).unwrap();
        let b = generate_with_density(&p, &rp, grid, &batch(permuted)).unwrap();
        for i in 0..5 {
            for k in 0..2 {
                assert!((b.terminal().points[[i, k]] - a.terminal().points[[perm[i], k]]).abs() < 1e-12);
            }
            assert!((b.logdet_accum().unwrap()[i] - a.logdet_accum().unwrap()[perm[i]]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_potential_hjb_residual_vanishes() {
        let p = DriftPotential::zero(2, 3, 1);
        let rp = RwpoParams::new(0.0, 1.0, 0.1).unwrap();
        assert_eq!(hjb_residual(&p, &rp, &[0.3, 2.0], 0.4, 0.1).unwrap(), 0.0);
        assert!(hjb_residual(&p, &rp, &[0.3, 2.0], 0.4, 0.0).is_err());
    }

    #[test]
    fn inviscid_burgers_solution_has_zero_residual() {
        let (a, horizon) = (0.9, 1.0);
        let field = AnalyticField::new(1, move |x: &Array2<f64>, t: f64| {
            let den = 1.0 - a * (horizon - t);
            FieldValues {
                grad_x: x.mapv(|v| a * v / den),
                dt: x.column(0).iter().map(|v| -a * a * v * v / (2.0 * den * den)).collect(),
                laplacian: vec![a / den; x.nrows()],
            }
        });
        let x = Array2::from_shape_fn((41, 1), |(i, _)| -2.0 + 0.1 * i as f64);
        for t in [0.0, 0.3, 0.75, 1.0] {
            let r = hjb_residuals(&field, 0.0, 0.0, &x, t, 1.0).unwrap();
            assert!(r.iter().all(|v| v.abs() <= 1e-10));
        }
    }

    #[test]
    fn residual_matches_pointwise_assembly() {
        let p = crate::potential::DriftPotential::new(2, 5, 2, 12).unwrap();
        let rp = RwpoParams::new(1.5, 0.8, 0.1).unwrap();
        let mu = 0.3;
        for x in [[0.2, -0.9], [1.1, 0.05], [-0.25, 0.4]] {
            let g = crate::potential::spatial_grad(&p, &x, 0.6).unwrap();
            let dt = crate::potential::time_partial(&p, &x, 0.6).unwrap();
            let lap = crate::potential::spatial_laplacian(&p, &x, 0.6).unwrap();
            let mut want = dt;
            let mut lap_psi = 0.0;
            for i in 0..2 {
                let gp = 1.5 * (x[i] / mu).clamp(-1.0, 1.0);
                want += 0.5 * (g[i] - gp).powi(2);
                if x[i].abs() <= mu {
                    lap_psi += 1.5 / mu;
                }
            }
            want += (lap - lap_psi) / 0.8;
            assert_relative_eq!(hjb_residual(&p, &rp, &x, 0.6, mu).unwrap(), want, max_relative = 1e-10);
        }
    }

    #[test]
    fn trajectory_csv_layout() {
        let p = DriftPotential::zero(2, 3, 1);
        let rp = RwpoParams::new(0.0, 1.0, 0.1).unwrap();
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let traj = backward_integrate(&p, &rp, grid, &batch(array![[0.5, 1.0], [0.0, -1.0]])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        traj.write_csv(&path).unwrap();
        let t = crate::io::read_table(&path).unwrap();
        assert_eq!(t.header, vec!["step", "token_id", "x_1", "x_2", "logdet_accum"]);
        assert_eq!(t.rows.len(), 6);
    }
}
