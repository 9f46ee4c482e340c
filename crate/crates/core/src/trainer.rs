//! Training loop: Adam with geometric learning-rate decay over minibatches,
//! with `λ` and `β` optionally trained through their softplus parameters.

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::Checkpoint;
use crate::config::ConfigMap;
use crate::diffeng::{Tape, Tensor};
use crate::dynamics::{
    record_backward, record_forward, BackwardAttention, Flow, FlowOptions, HuberWidth, TimeGrid, Trajectory,
};
use crate::error::{Error, Result};
use crate::layer::{BoundRwpo, KernelForm, RwpoParams, TokenBatch};
use crate::objective::{
    bayesian_loss, conditional_loss, generative_loss, hjb_term, nll_term, transport_term, BayesProblem, LossBreakdown,
    LossRecord, LossVars, LossWeights,
};
use crate::potential::{BoundPotential, DriftPotential};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Generative,
    Bayesian,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Generative => "generative",
            Mode::Bayesian => "bayesian",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "generative" => Ok(Mode::Generative),
            "bayesian" => Ok(Mode::Bayesian),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

/// Defaults follow the benchmark row of the paper's parameter table where
/// it gives a value.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub dataset: String,
    pub n_iters: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub c_hjb: f64,
    pub w_transport: f64,
    pub w_supervised: f64,
    pub width: usize,
    pub depth: usize,
    /// number of time steps `M`
    pub steps: usize,
    pub horizon: f64,
    pub seed: u64,
    pub lambda_init: f64,
    pub beta_init: f64,
    pub train_lambda: bool,
    pub train_beta: bool,
    pub kernel: KernelForm,
    /// `false` drops the attention half-steps (plain neural ODE)
    pub attention: bool,
    pub detach_attention: bool,
    pub backward_attention: BackwardAttention,
    pub huber: HuberWidth,
    pub clip_norm: f64,
    pub valid_fraction: f64,
    pub valid_every: usize,
    /// 0 disables periodic checkpoints
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Generative,
            dataset: "moons".into(),
            n_iters: 6001,
            batch_size: 256,
            lr_start: 1e-2,
            lr_end: 1e-6,
            c_hjb: 0.1,
            w_transport: 1.0,
            w_supervised: 0.0,
            width: 48,
            depth: 2,
            steps: 48,
            horizon: 1.0,
            seed: 0,
            lambda_init: 2.0,
            beta_init: 1.0,
            train_lambda: true,
            train_beta: true,
            kernel: KernelForm::Laplace,
            attention: true,
            detach_attention: false,
            backward_attention: BackwardAttention::Repeat,
            huber: HuberWidth::Auto,
            clip_norm: 100.0,
            valid_fraction: 0.1,
            valid_every: 100,
            checkpoint_every: 1000,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return fail(format!("need lr_start >= lr_end > 0, got {} and {}", self.lr_start, self.lr_end));
        }
        if self.batch_size == 0 || self.width == 0 || self.steps == 0 {
            return fail("batch_size, width and steps must be positive".into());
        }
        if !(self.horizon > 0.0) {
            return fail(format!("horizon must be > 0, got {}", self.horizon));
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return fail(format!("valid_fraction must lie in [0, 1), got {}", self.valid_fraction));
        }
        if !(self.clip_norm > 0.0) {
            return fail(format!("clip_norm must be > 0, got {}", self.clip_norm));
        }
        if let HuberWidth::Fixed(mu) = self.huber {
            if !(mu > 0.0) {
                return fail(format!("huber_mu must be > 0, got {mu}"));
            }
        }
        self.weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.rwpo_params().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.steps)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { c_hjb: self.c_hjb, w_transport: self.w_transport, w_supervised: self.w_supervised }
    }

    pub fn flow_options(&self) -> FlowOptions {
        FlowOptions {
            attention: self.attention,
            detach_attention: self.detach_attention,
            track_density: true,
            backward_attention: self.backward_attention,
        }
    }

    /// Initial `λ`, `β` with the grid step.
    pub fn rwpo_params(&self) -> Result<RwpoParams> {
        RwpoParams::new(self.lambda_init, self.beta_init, self.horizon / self.steps as f64)?
            .with_kernel(self.kernel)
            .trainable(self.train_lambda && self.lambda_init > 0.0, self.train_beta)
    }

    /// Reads every known key from `map`, leaving unknown keys behind.
    pub fn from_map(map: &mut ConfigMap) -> Result<Self> {
        let d = TrainConfig::default();
        let mut b = |key: &str, default: bool| -> Result<bool> {
            match map.take_str(key) {
                Some(v) => parse_bool(key, &v),
                None => Ok(default),
            }
        };
        let train_lambda = b("train_lambda", d.train_lambda)?;
        let train_beta = b("train_beta", d.train_beta)?;
        let attention = b("attention", d.attention)?;
        let detach_attention = b("detach_attention", d.detach_attention)?;
        let mode = match map.take_str("mode") {
            Some(v) => Mode::parse(&v)?,
            None => d.mode,
        };
        let backward_attention = match map.take_str("backward_attention") {
            Some(v) => BackwardAttention::parse(&v)?,
            None => d.backward_attention,
        };
        let kernel = match map.take_str("kernel") {
            Some(v) => KernelForm::parse(&v).map_err(|e| Error::Config(e.to_string()))?,
            None => d.kernel,
        };
        let huber = match map.take_str("huber_mu").as_deref() {
            None | Some("auto") => HuberWidth::Auto,
            Some(v) => HuberWidth::Fixed(v.parse().map_err(|_| Error::Config(format!("`huber_mu`: cannot parse `{v}`")))?),
        };
        let cfg = TrainConfig {
            mode,
            dataset: map.take_str("dataset").unwrap_or(d.dataset),
            n_iters: map.take_or("n_iters", d.n_iters)?,
            batch_size: map.take_or("batch_size", d.batch_size)?,
            lr_start: map.take_or("lr_start", d.lr_start)?,
            lr_end: map.take_or("lr_end", d.lr_end)?,
            c_hjb: map.take_or("c_hjb", d.c_hjb)?,
            w_transport: map.take_or("w_transport", d.w_transport)?,
            w_supervised: map.take_or("w_supervised", d.w_supervised)?,
            width: map.take_or("width", d.width)?,
            depth: map.take_or("depth", d.depth)?,
            steps: map.take_or("steps", d.steps)?,
            horizon: map.take_or("horizon", d.horizon)?,
            seed: map.take_or("seed", d.seed)?,
            lambda_init: map.take_or("lambda", d.lambda_init)?,
            beta_init: map.take_or("beta", d.beta_init)?,
            train_lambda,
            train_beta,
            kernel,
            attention,
            detach_attention,
            backward_attention,
            huber,
            clip_norm: map.take_or("clip_norm", d.clip_norm)?,
            valid_fraction: map.take_or("valid_fraction", d.valid_fraction)?,
            valid_every: map.take_or("valid_every", d.valid_every)?,
            checkpoint_every: map.take_or("checkpoint_every", d.checkpoint_every)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field as `key = value` pairs readable by [`from_map`](Self::from_map).
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let huber = match self.huber {
            HuberWidth::Auto => "auto".to_string(),
            HuberWidth::Fixed(mu) => mu.to_string(),
        };
        [
            ("mode", self.mode.name().to_string()),
            ("dataset", self.dataset.clone()),
            ("n_iters", self.n_iters.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_start", self.lr_start.to_string()),
            ("lr_end", self.lr_end.to_string()),
            ("c_hjb", self.c_hjb.to_string()),
            ("w_transport", self.w_transport.to_string()),
            ("w_supervised", self.w_supervised.to_string()),
            ("width", self.width.to_string()),
            ("depth", self.depth.to_string()),
            ("steps", self.steps.to_string()),
            ("horizon", self.horizon.to_string()),
            ("seed", self.seed.to_string()),
            ("lambda", self.lambda_init.to_string()),
            ("beta", self.beta_init.to_string()),
            ("train_lambda", self.train_lambda.to_string()),
            ("train_beta", self.train_beta.to_string()),
            ("kernel", self.kernel.name().to_string()),
            ("attention", self.attention.to_string()),
            ("detach_attention", self.detach_attention.to_string()),
            ("backward_attention", self.backward_attention.name().to_string()),
            ("huber_mu", huber),
            ("clip_norm", self.clip_norm.to_string()),
            ("valid_fraction", self.valid_fraction.to_string()),
            ("valid_every", self.valid_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// `lr_start·(lr_end/lr_start)^{iter/(n_iters−1)}`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter >= cfg.n_iters {
        return Err(Error::InvalidParameter(format!("iteration {iter} outside 0..{}", cfg.n_iters)));
    }
    if cfg.n_iters == 1 {
        return Ok(cfg.lr_start);
    }
    let frac = iter as f64 / (cfg.n_iters - 1) as f64;
    Ok(cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(frac))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        AdamState {
            m: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut **p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Scales `grads` so their joint Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * s));
    }
    norm
}

/// Training data for either mode.
pub enum TrainData {
    /// samples of the target law, one per row
    Samples(Array2<f64>),
    /// one measurement; optional target parameters for the supervised term
    Conditional { problem: BayesProblem, targets: Option<Array2<f64>> },
}

impl TrainData {
    pub fn dim(&self) -> usize {
        match self {
            TrainData::Samples(x) => x.ncols(),
            TrainData::Conditional { problem, .. } => problem.dim(),
        }
    }

    fn mode(&self) -> Mode {
        match self {
            TrainData::Samples(_) => Mode::Generative,
            TrainData::Conditional { .. } => Mode::Bayesian,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationRecord {
    pub iteration: usize,
    pub loss: LossBreakdown,
}

pub enum TrainEvent<'a> {
    Step(&'a LossRecord),
    Validation(&'a ValidationRecord),
    Checkpoint(&'a Checkpoint),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub potential: DriftPotential,
    pub rwpo: RwpoParams,
    pub grid: TimeGrid,
    pub history: Vec<LossRecord>,
    pub validation: Vec<ValidationRecord>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            potential: self.potential.clone(),
            rwpo: self.rwpo.clone(),
            grid: self.grid,
            iteration: self.history.len(),
        }
    }
}

/// Rows of `x` selected by `idx`.
fn gather(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n×d` draws from the base law `N(0, I)`.
pub fn base_samples(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(rng))
}

/// Splits rows into (train, validation) after a seeded shuffle.
pub fn split_validation(x: &Array2<f64>, fraction: f64, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let n = x.nrows();
    let mut rng = rng_stream(seed, 2);
    let perm = index::sample(&mut rng, n, n).into_vec();
    let mut n_valid = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && n >= 2 {
        n_valid = n_valid.clamp(1, n - 1);
    }
    let (train, valid) = perm.split_at(n - n_valid);
    (gather(x, train), gather(x, valid))
}

/// Generative loss of `data` under the pure integrator, evaluated in
/// chunks of `batch_size` tokens and averaged with chunk weights.
pub fn evaluate_generative(
    potential: &DriftPotential,
    rwpo: &RwpoParams,
    grid: TimeGrid,
    data: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let n = data.nrows();
    let flow = Flow::new(potential, rwpo, grid)?.options(cfg.flow_options());
    let rp = rwpo.with_step(grid.h())?;
    let (mut nll, mut tr, mut hj) = (0.0, 0.0, 0.0);
    for start in (0..n).step_by(cfg.batch_size) {
        let end = (start + cfg.batch_size).min(n);
        let chunk = data.slice(ndarray::s![start..end, ..]).to_owned();
        let traj = flow.backward(&TokenBatch::new(chunk, grid.steps())?)?;
        let w = (end - start) as f64 / n as f64;
        nll += w * nll_term(&traj)?;
        tr += w * transport_term(&traj, potential, &rp, cfg.huber)?;
        hj += w * hjb_term(&traj, potential, &rp, cfg.huber)?;
    }
    Ok(LossBreakdown::assemble(nll, tr, hj, None, &cfg.weights()))
}

fn evaluate_conditional(
    potential: &DriftPotential,
    rwpo: &RwpoParams,
    grid: TimeGrid,
    x0: &Array2<f64>,
    problem: &BayesProblem,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let flow = Flow::new(potential, rwpo, grid)?.options(cfg.flow_options());
    let rp = rwpo.with_step(grid.h())?;
    let traj: Trajectory = flow.forward(&TokenBatch::new(x0.clone(), 0)?)?;
    let base = bayesian_loss(&traj, problem, None, &cfg.weights())?;
    let tr = transport_term(&traj, potential, &rp, cfg.huber)?;
    let hj = hjb_term(&traj, potential, &rp, cfg.huber)?;
    Ok(LossBreakdown::assemble(base.nll, tr, hj, None, &cfg.weights()))
}

fn abort(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { context, step } => {
            Error::NumericalAbort { iteration, breakdown: format!("non-finite tokens in {context} at step {step}") }
        }
        other => other,
    }
}

/// Trains a drift potential and `λ`, `β` on `data`.
pub fn train(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    train_with(cfg, data, |_| {})
}

/// Gradients of `loss` in the order potential leaves, raw `λ`, raw `β`.
fn gradients<'t>(pot: &BoundPotential<'t>, rw: &BoundRwpo<'t>, loss: &LossVars<'t>) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let breakdown = loss.breakdown();
    let all = loss.total.tape().backward(loss.total)?;
    let mut grads: Vec<Tensor> = pot.leaves().into_iter().map(|v| all.wrt(v)).collect();
    for raw in [rw.raw_lambda, rw.raw_beta] {
        grads.push(raw.map_or_else(|| Tensor::zeros((1, 1)), |v| all.wrt(v)));
    }
    Ok((breakdown, grads))
}

/// Loss and gradients on one batch of data points. Gradients are ordered as
/// the potential parameters, then raw `λ` and raw `β` (zero when frozen).
pub fn generative_step(
    potential: &DriftPotential,
    rwpo: &RwpoParams,
    grid: TimeGrid,
    x: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let tape = Tape::new();
    let pot = potential.bind(&tape);
    let rw = rwpo.bind(&tape);
    let flow = record_backward(&pot, &rw, &grid, tape.leaf(x.clone()), cfg.flow_options())?;
    let loss = generative_loss(&flow, &rw, &cfg.weights(), cfg.huber, grid.h())?;
    gradients(&pot, &rw, &loss)
}

/// [`generative_step`] for the conditional objective from base draws `x0`.
pub fn conditional_step(
    potential: &DriftPotential,
    rwpo: &RwpoParams,
    grid: TimeGrid,
    problem: &BayesProblem,
    x0: &Array2<f64>,
    paired: Option<&Array2<f64>>,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let tape = Tape::new();
    let pot = potential.bind(&tape);
    let rw = rwpo.bind(&tape);
    let flow = record_forward(&pot, &rw, &grid, tape.leaf(x0.clone()), cfg.flow_options())?;
    let loss = conditional_loss(&flow, &rw, problem, paired, &cfg.weights(), cfg.huber, grid.h())?;
    gradients(&pot, &rw, &loss)
}

/// [`train`] reporting every step, validation and checkpoint to `observer`.
pub fn train_with<F>(cfg: &TrainConfig, data: &TrainData, mut observer: F) -> Result<TrainOutcome>
where
    F: FnMut(TrainEvent<'_>),
{
    cfg.validate()?;
    if data.mode() != cfg.mode {
        return Err(Error::Config(format!("mode `{}` does not match the training data", cfg.mode.name())));
    }
    let grid = cfg.grid()?;
    let d = data.dim();
    let mut potential = DriftPotential::new(d, cfg.width, cfg.depth, cfg.seed)?;
    let mut rwpo = cfg.rwpo_params()?;
    let mut batch_rng = rng_stream(cfg.seed, 1);

    let (train_x, valid_x) = match data {
        TrainData::Samples(x) => {
            if x.nrows() == 0 {
                return Err(Error::InvalidParameter("empty training set".into()));
            }
            let (t, v) = split_validation(x, cfg.valid_fraction, cfg.seed);
            (Some(t), Some(v))
        }
        TrainData::Conditional { .. } => (None, None),
    };
    // fixed base draw for conditional validation
    let valid_base = match data {
        TrainData::Conditional { .. } if cfg.valid_fraction > 0.0 => {
            Some(base_samples(cfg.batch_size, d, &mut rng_stream(cfg.seed, 3)))
        }
        _ => None,
    };

    let shapes: Vec<(usize, usize)> = potential.params().iter().map(|(_, t)| t.dim()).chain([(1, 1), (1, 1)]).collect();
    let mut adam = AdamState::new(&shapes);
    let mut history = Vec::with_capacity(cfg.n_iters);
    let mut validation = Vec::new();

    for it in 0..cfg.n_iters {
        let lr = lr_at(it, cfg)?;
        let (breakdown, mut grads) = match data {
            TrainData::Samples(_) => {
                let x = train_x.as_ref().expect("generative split");
                let n = x.nrows();
                let idx = index::sample(&mut batch_rng, n, cfg.batch_size.min(n)).into_vec();
                generative_step(&potential, &rwpo, grid, &gather(x, &idx), cfg)
            }
            TrainData::Conditional { problem, targets } => {
                let x0 = base_samples(cfg.batch_size, d, &mut batch_rng);
                let paired = targets.as_ref().map(|t| {
                    let idx = index::sample(&mut batch_rng, t.nrows(), cfg.batch_size.min(t.nrows())).into_vec();
                    let mut rows = idx;
                    rows.resize(cfg.batch_size, rows[0]);
                    gather(t, &rows)
                });
                conditional_step(&potential, &rwpo, grid, problem, &x0, paired.as_ref(), cfg)
            }
        }
        .map_err(|e| abort(it, e))?;
        if !breakdown.is_finite() {
            return Err(Error::NumericalAbort { iteration: it, breakdown: breakdown.to_string() });
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NumericalAbort { iteration: it, breakdown: format!("non-finite gradient; {breakdown}") });
        }
        clip_grad_norm(&mut grads, cfg.clip_norm);

        let mut raw_l = Tensor::from_elem((1, 1), rwpo.raw_lambda());
        let mut raw_b = Tensor::from_elem((1, 1), rwpo.raw_beta());
        {
            let mut params = potential.params_mut();
            params.push(&mut raw_l);
            params.push(&mut raw_b);
            adam.update(&mut params, &grads, lr);
        }
        if rwpo.trainable_lambda {
            rwpo.set_raw_lambda(raw_l[[0, 0]]);
        }
        if rwpo.trainable_beta {
            rwpo.set_raw_beta(raw_b[[0, 0]]);
        }

        let record = LossRecord { iteration: it, loss: breakdown, lambda: rwpo.lambda(), beta: rwpo.beta(), lr };
        observer(TrainEvent::Step(&record));
        history.push(record);

        let last = it + 1 == cfg.n_iters;
        if cfg.valid_every > 0 && (it % cfg.valid_every == 0 || last) {
            let vloss = match (data, &valid_x, &valid_base) {
                (TrainData::Samples(_), Some(v), _) if v.nrows() > 0 => {
                    Some(evaluate_generative(&potential, &rwpo, grid, v, cfg).map_err(|e| abort(it, e))?)
                }
                (TrainData::Conditional { problem, .. }, _, Some(x0)) => {
                    Some(evaluate_conditional(&potential, &rwpo, grid, x0, problem, cfg).map_err(|e| abort(it, e))?)
                }
                _ => None,
            };
            if let Some(loss) = vloss {
                log::info!(
                    "iter {it}: train {:.4} valid {:.4} (nll {:.4}) lambda {:.3} beta {:.3}",
                    history.last().map_or(f64::NAN, |r| r.loss.total), loss.total, loss.nll, rwpo.lambda(), rwpo.beta()
                );
                let rec = ValidationRecord { iteration: it, loss };
                observer(TrainEvent::Validation(&rec));
                validation.push(rec);
            }
        }
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 && !last {
            let ck = Checkpoint { potential: potential.clone(), rwpo: rwpo.clone(), grid, iteration: it + 1 };
            observer(TrainEvent::Checkpoint(&ck));
        }
    }
    Ok(TrainOutcome { potential, rwpo, grid, history, validation })
}

/// Trailing moving average with the given window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

pub fn write_validation_history(path: &std::path::Path, records: &[ValidationRecord]) -> Result<()> {
    use crate::io::{fmt_f64, CsvWriter};
    let mut w = CsvWriter::create(path, &["iteration", "nll", "transport", "hjb", "total"])?;
    for r in records {
        w.row(&[
            r.iteration.to_string(),
            fmt_f64(r.loss.nll),
            fmt_f64(r.loss.transport),
            fmt_f64(r.loss.hjb),
            fmt_f64(r.loss.total),
        ])?;
    }
    w.finish()
}
