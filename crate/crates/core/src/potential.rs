//! Learnable drift potential
//!
//! ```text
//! φ(z) = zᵀN(z) + ½ zᵀAᵀA z + bᵀz + c,   z = [x, t]
//! ```
//!
//! with `N` a tanh ResNet `ℝ^{d+1} → ℝ^{d+1}`:
//! `u₀ = tanh(K₀z + b₀)`, `u_{i+1} = u_i + δ tanh(K_i u_i + b_i)`,
//! `N = K_out u_L + b_out`. Tokens are rows, so every product below is the
//! row-vector form of the column formulas.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffeng::{concat_cols, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DriftPotential {
    pub dim: usize,
    pub width: usize,
    pub residual_step: f64,
    /// `m×(d+1)`
    pub open_w: Tensor,
    /// `1×m`
    pub open_b: Tensor,
    /// `(m×m, 1×m)` per residual layer.
    pub layers: Vec<(Tensor, Tensor)>,
    /// `(d+1)×m`
    pub close_w: Tensor,
    /// `1×(d+1)`
    pub close_b: Tensor,
    /// `r×(d+1)`
    pub quad_a: Tensor,
    /// `1×(d+1)`
    pub lin_b: Tensor,
    /// `1×1`
    pub c: Tensor,
}

impl DriftPotential {
    /// Weights i.i.d. `N(0, 0.1²/m)`, biases and `A`, `b`, `c` zero,
    /// `r = d + 1`.
    pub fn new(dim: usize, width: usize, depth: usize, seed: u64) -> Result<Self> {
        if dim == 0 || width == 0 {
            return Err(Error::InvalidParameter(format!("dimension {dim} and width {width} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1 / (width as f64).sqrt()).expect("finite std");
        let mut draw = |r: usize, c: usize| Tensor::from_shape_fn((r, c), |_| normal.sample(&mut rng));
        let z = dim + 1;
        let open_w = draw(width, z);
        let layers = (0..depth).map(|_| (draw(width, width), Tensor::zeros((1, width)))).collect();
        let close_w = draw(z, width);
        Ok(DriftPotential {
            dim,
            width,
            residual_step: 1.0,
            open_w,
            open_b: Tensor::zeros((1, width)),
            layers,
            close_w,
            close_b: Tensor::zeros((1, z)),
            quad_a: Tensor::zeros((z, z)),
            lin_b: Tensor::zeros((1, z)),
            c: Tensor::zeros((1, 1)),
        })
    }

    /// Potential with every weight zero.
    pub fn zero(dim: usize, width: usize, depth: usize) -> Self {
        let mut p = DriftPotential::new(dim, width, depth, 0).expect("positive sizes");
        p.params_mut().into_iter().for_each(|t| t.fill(0.0));
        p
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Parameter tensors with stable names, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("open.weight".to_string(), &self.open_w), ("open.bias".to_string(), &self.open_b)];
        for (i, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("res.{i}.weight"), w));
            out.push((format!("res.{i}.bias"), b));
        }
        out.push(("close.weight".into(), &self.close_w));
        out.push(("close.bias".into(), &self.close_b));
        out.push(("quad.A".into(), &self.quad_a));
        out.push(("lin.b".into(), &self.lin_b));
        out.push(("const.c".into(), &self.c));
        out
    }

    /// Mutable parameter tensors in the order of [`params`](Self::params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.open_w, &mut self.open_b];
        for (w, b) in self.layers.iter_mut() {
            out.push(w);
            out.push(b);
        }
        out.extend([&mut self.close_w, &mut self.close_b, &mut self.quad_a, &mut self.lin_b, &mut self.c]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter tensor as a leaf of `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundPotential<'t> {
        BoundPotential {
            dim: self.dim,
            delta: self.residual_step,
            open_w: tape.leaf(self.open_w.clone()),
            open_b: tape.leaf(self.open_b.clone()),
            layers: self.layers.iter().map(|(w, b)| (tape.leaf(w.clone()), tape.leaf(b.clone()))).collect(),
            close_w: tape.leaf(self.close_w.clone()),
            close_b: tape.leaf(self.close_b.clone()),
            quad_a: tape.leaf(self.quad_a.clone()),
            lin_b: tape.leaf(self.lin_b.clone()),
            c: tape.leaf(self.c.clone()),
        }
    }
}

/// Parameters of a [`DriftPotential`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundPotential<'t> {
    pub dim: usize,
    delta: f64,
    pub open_w: Var<'t>,
    pub open_b: Var<'t>,
    pub layers: Vec<(Var<'t>, Var<'t>)>,
    pub close_w: Var<'t>,
    pub close_b: Var<'t>,
    pub quad_a: Var<'t>,
    pub lin_b: Var<'t>,
    pub c: Var<'t>,
}

/// `∇_x φ`, `∂_t φ` and optionally `Δ_x φ` for a batch of tokens.
#[derive(Debug, Clone, Copy)]
pub struct Derivatives<'t> {
    /// `N×d`
    pub grad_x: Var<'t>,
    /// `N×1`
    pub dt: Var<'t>,
    /// `N×1`
    pub laplacian: Option<Var<'t>>,
}

struct Forward<'t> {
    z: Var<'t>,
    u0: Var<'t>,
    /// tanh outputs of the residual layers
    acts: Vec<Var<'t>>,
    n: Var<'t>,
}

impl<'t> BoundPotential<'t> {
    /// Parameter leaves in the order of [`DriftPotential::params`].
    pub fn leaves(&self) -> Vec<Var<'t>> {
        let mut out = vec![self.open_w, self.open_b];
        for &(w, b) in &self.layers {
            out.push(w);
            out.push(b);
        }
        out.extend([self.close_w, self.close_b, self.quad_a, self.lin_b, self.c]);
        out
    }

    fn stack(&self, x: Var<'t>, t: f64) -> Var<'t> {
        let tape = x.tape();
        let rows = x.shape().0;
        concat_cols(&[x, tape.leaf(Tensor::from_elem((rows, 1), t))])
    }

    fn forward(&self, z: Var<'t>) -> Forward<'t> {
        let u0 = (z.matmul_t(self.open_w) + self.open_b).tanh();
        let mut u = u0;
        let mut acts = Vec::with_capacity(self.layers.len());
        for &(w, b) in &self.layers {
            let s = (u.matmul_t(w) + b).tanh();
            u = u + s * self.delta;
            acts.push(s);
        }
        let n = u.matmul_t(self.close_w) + self.close_b;
        Forward { z, u0, acts, n }
    }

    fn value_z(&self, z: Var<'t>) -> Var<'t> {
        let f = self.forward(z);
        let za = z.matmul_t(self.quad_a);
        (z * f.n).sum_rows() + za.square().sum_rows().scale(0.5) + z.matmul_t(self.lin_b) + self.c
    }

    /// `φ(x_j, t)` as an `N×1` node.
    pub fn value(&self, x: Var<'t>, t: f64) -> Var<'t> {
        self.value_z(self.stack(x, t))
    }

    /// `∇_z φ = N + J_Nᵀ z + AᵀA z + b` by an explicit reverse sweep.
    fn grad_z_from(&self, f: &Forward<'t>) -> (Var<'t>, Var<'t>) {
        let z = f.z;
        let g_out = z.matmul(self.close_w);
        let mut g = g_out;
        for (&(w, _), &s) in self.layers.iter().zip(&f.acts).rev() {
            let sp = -s.square() + 1.0;
            g = g + (sp * g).matmul(w) * self.delta;
        }
        let sp0 = -f.u0.square() + 1.0;
        let jtz = (sp0 * g).matmul(self.open_w);
        let quad = z.matmul_t(self.quad_a).matmul(self.quad_a);
        (f.n + jtz + quad + self.lin_b, g_out)
    }

    /// `∇_z φ` for rows of `z = [x, t]`.
    pub fn grad_z(&self, z: Var<'t>) -> Var<'t> {
        self.grad_z_from(&self.forward(z)).0
    }

    /// Closed-form spatial gradient, time partial and Laplacian.
    pub fn derivatives(&self, x: Var<'t>, t: f64, with_laplacian: bool) -> Derivatives<'t> {
        let d = self.dim;
        let f = self.forward(self.stack(x, t));
        let (gz, g_out) = self.grad_z_from(&f);
        let grad_x = gz.cols(0, d);
        let dt = gz.col(d);
        let laplacian = with_laplacian.then(|| self.laplacian(&f, g_out));
        Derivatives { grad_x, dt, laplacian }
    }

    /// `Σ_i ∂²φ/∂x_i²` by a second-order forward pass per direction.
    fn laplacian(&self, f: &Forward<'t>, g_out: Var<'t>) -> Var<'t> {
        let d = self.dim;
        let sp0 = -f.u0.square() + 1.0;
        let spp0 = (f.u0 * sp0).scale(-2.0);
        let derivs: Vec<(Var<'t>, Var<'t>)> = f
            .acts
            .iter()
            .map(|&s| {
                let sp = -s.square() + 1.0;
                (sp, (s * sp).scale(-2.0))
            })
            .collect();
        let mut total: Option<Var<'t>> = None;
        for i in 0..d {
            let a_dot = self.open_w.col(i).transpose();
            let mut u_dot = sp0 * a_dot;
            let mut u_ddot = spp0 * a_dot.square();
            for (&(w, _), &(sp, spp)) in self.layers.iter().zip(&derivs) {
                let ad = u_dot.matmul_t(w);
                let add = u_ddot.matmul_t(w);
                u_dot = u_dot + (sp * ad) * self.delta;
                u_ddot = u_ddot + (spp * ad.square() + sp * add) * self.delta;
            }
            let n_dot = u_dot.matmul_t(self.close_w).col(i);
            let term = n_dot.scale(2.0) + (u_ddot * g_out).sum_rows();
            total = Some(match total {
                Some(acc) => acc + term,
                None => term,
            });
        }
        let quad = self.quad_a.cols(0, d).square().sum();
        total.expect("dim >= 1") + quad
    }
}

fn check_point(p: &DriftPotential, x: &[f64], t: f64) -> Result<()> {
    if x.len() != p.dim {
        return Err(Error::dims(format!("point has {} coordinates, potential expects {}", x.len(), p.dim)));
    }
    if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "potential input".into(), step: 0 });
    }
    Ok(())
}

fn finite(v: f64, context: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { context: context.into(), step: 0 })
    }
}

pub fn potential_eval(p: &DriftPotential, x: &[f64], t: f64) -> Result<f64> {
    check_point(p, x, t)?;
    let tape = Tape::new();
    let v = p.bind(&tape).value(tape.row(x), t).item();
    finite(v, "potential value")
}

pub fn spatial_grad(p: &DriftPotential, x: &[f64], t: f64) -> Result<Vec<f64>> {
    check_point(p, x, t)?;
    let tape = Tape::new();
    let g = p.bind(&tape).derivatives(tape.row(x), t, false).grad_x.value();
    g.iter().map(|&v| finite(v, "potential gradient")).collect()
}

pub fn time_partial(p: &DriftPotential, x: &[f64], t: f64) -> Result<f64> {
    check_point(p, x, t)?;
    let tape = Tape::new();
    let v = p.bind(&tape).derivatives(tape.row(x), t, false).dt.item();
    finite(v, "potential time partial")
}

/// Trace of the spatial Hessian as `d` forward tangent sweeps through the
/// recorded gradient.
pub fn spatial_laplacian(p: &DriftPotential, x: &[f64], t: f64) -> Result<f64> {
    check_point(p, x, t)?;
    let tape = Tape::new();
    let bound = p.bind(&tape);
    let mut zrow = x.to_vec();
    zrow.push(t);
    let z = tape.row(&zrow);
    let g = bound.grad_z(z);
    let mut total = 0.0;
    for i in 0..p.dim {
        let mut e = Tensor::zeros((1, p.dim + 1));
        e[[0, i]] = 1.0;
        total += tape.jvp(&[(z, e)])?.wrt(g)[[0, i]];
    }
    finite(total, "potential laplacian")
}

/// Batched `∇_x φ`, `∂_t φ`, `Δ_x φ` at one time.
#[derive(Debug, Clone)]
pub struct FieldValues {
    pub grad_x: Array2<f64>,
    pub dt: Vec<f64>,
    pub laplacian: Vec<f64>,
}

pub fn evaluate_batch(p: &DriftPotential, x: &Array2<f64>, t: f64) -> Result<FieldValues> {
    if x.ncols() != p.dim {
        return Err(Error::dims(format!("tokens in ℝ^{} but potential expects ℝ^{}", x.ncols(), p.dim)));
    }
    let tape = Tape::new();
    let d = p.bind(&tape).derivatives(tape.leaf(x.clone()), t, true);
    let out = FieldValues {
        grad_x: d.grad_x.value(),
        dt: d.dt.value().iter().copied().collect(),
        laplacian: d.laplacian.expect("requested").value().iter().copied().collect(),
    };
    if out.grad_x.iter().chain(&out.dt).chain(&out.laplacian).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "potential derivatives".into(), step: 0 });
    }
    Ok(out)
}

/// Anything that supplies `∇_x φ`, `∂_t φ`, `Δ_x φ` for a batch of tokens.
pub trait PotentialField: Sync {
    fn dim(&self) -> usize;
    fn field(&self, x: &Array2<f64>, t: f64) -> Result<FieldValues>;
}

impl PotentialField for DriftPotential {
    fn dim(&self) -> usize {
        self.dim
    }

    fn field(&self, x: &Array2<f64>, t: f64) -> Result<FieldValues> {
        evaluate_batch(self, x, t)
    }
}

/// A potential given by closed-form derivatives.
pub struct AnalyticField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> AnalyticField<F>
where
    F: Fn(&Array2<f64>, f64) -> FieldValues + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        AnalyticField { dim, f }
    }
}

impl<F> PotentialField for AnalyticField<F>
where
    F: Fn(&Array2<f64>, f64) -> FieldValues + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn field(&self, x: &Array2<f64>, t: f64) -> Result<FieldValues> {
        if x.ncols() != self.dim {
            return Err(Error::dims(format!("tokens in ℝ^{} but field expects ℝ^{}", x.ncols(), self.dim)));
        }
        Ok((self.f)(x, t))
    }
}
