//! Vector-level Wengert tape.
//!
//! Every node holds a dense `rows × cols` matrix. Operations are recorded in
//! evaluation order, so record order is a topological order: the reverse
//! sweep visits nodes once from the seed down, and the forward tangent sweep
//! visits them once from the leaves up.
//!
//! Elementwise binary operations co-broadcast `1×1`, `1×c` and `r×1`
//! operands against the other side; their adjoints are summed back onto the
//! operand shape.
//!
//! Nonsmooth primitives use the subgradient 0 at the kink: `|x|' = sign(x)`
//! with `sign(0) = 0`, `relu'(0) = 0`, and `clamp` has derivative 0 on its
//! bounds.

use std::cell::{Ref, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};
use crate::par;

pub type Tensor = Array2<f64>;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Affine { a: usize, scale: f64 },
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Transpose(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Abs(usize),
    Relu(usize),
    Softplus(usize),
    Clamp { a: usize, lo: f64, hi: f64 },
    MaskMul { a: usize, mask: Tensor },
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    SoftmaxRows(usize),
    SliceCols { a: usize, start: usize, len: usize },
    ConcatCols(Vec<usize>),
    Diag(usize),
    /// Row-wise linearised map: row `i` of the output depends on row `i` of
    /// the input through the Jacobian `jac[i]` (out_cols × in_cols).
    RowMap { a: usize, jac: Vec<Tensor> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var(#{}, {}x{})", self.idx, r, c)
    }
}

/// Adjoints of every node reached by a reverse sweep. Only leaves keep
/// their adjoint after the sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros when `v` does not influence the seed.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.idx];
                Tensor::zeros((r, c))
            }
        }
    }
}

/// Tangents of every node from a forward sweep.
pub struct Tangents {
    tangents: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Tangents {
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match &self.tangents[v.idx] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[v.idx];
                Tensor::zeros((r, c))
            }
        }
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

fn shape_of(t: &Tensor) -> (usize, usize) {
    (t.nrows(), t.ncols())
}

fn expand(t: &Tensor, shape: (usize, usize)) -> Tensor {
    if shape_of(t) == shape {
        t.clone()
    } else {
        t.broadcast(shape).expect("checked broadcast").to_owned()
    }
}

/// Sums a broadcast adjoint back onto the operand shape.
fn reduce_to(g: Tensor, shape: (usize, usize)) -> Tensor {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
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

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let av = if ta { a.t() } else { a.view() };
    let bv = if tb { b.t() } else { b.view() };
    par::matmul(av, bv)
}

fn softmax_rows(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    /// Records an input or parameter.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.leaf(Tensor::from_elem((1, 1), x))
    }

    pub fn row(&self, xs: &[f64]) -> Var<'_> {
        self.leaf(Tensor::from_shape_vec((1, xs.len()), xs.to_vec()).expect("row shape"))
    }

    pub fn value(&self, v: Var<'_>) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.idx].value)
    }

    fn binary(&self, a: Var<'_>, b: Var<'_>, kind: u8) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.idx].value, &nodes[b.idx].value);
            let shape = broadcast_shape(shape_of(x), shape_of(y)).unwrap_or_else(|| {
                panic!("incompatible shapes {:?} and {:?}", x.shape(), y.shape())
            });
            let (x, y) = (expand(x, shape), expand(y, shape));
            match kind {
                0 => x + y,
                1 => x - y,
                2 => x * y,
                _ => x / y,
            }
        };
        let op = match kind {
            0 => Op::Add(a.idx, b.idx),
            1 => Op::Sub(a.idx, b.idx),
            2 => Op::Mul(a.idx, b.idx),
            _ => Op::Div(a.idx, b.idx),
        };
        self.push(value, op)
    }

    fn unary(&self, a: Var<'_>, f: impl Fn(f64) -> f64 + Sync + Send, op: Op) -> Var<'_> {
        let value = par::map(&self.nodes.borrow()[a.idx].value, f);
        self.push(value, op)
    }

    /// Reverse sweep from a `1×1` seed.
    pub fn backward(&self, seed: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let (r, c) = shape_of(&nodes[seed.idx].value);
        if (r, c) != (1, 1) {
            return Err(Error::NotScalar { rows: r, cols: c });
        }
        let shapes: Vec<_> = nodes.iter().map(|n| shape_of(&n.value)).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[seed.idx] = Some(Tensor::ones((1, 1)));

        fn acc(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
            match &mut grads[i] {
                Some(x) => *x += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=seed.idx).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |j: usize| &nodes[j].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, reduce_to(g.clone(), shapes[*a]));
                    acc(&mut grads, *b, reduce_to(g, shapes[*b]));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, reduce_to(g.clone(), shapes[*a]));
                    acc(&mut grads, *b, reduce_to(-g, shapes[*b]));
                }
                Op::Mul(a, b) => {
                    let shape = shape_of(&g);
                    let ga = &g * &expand(val(*b), shape);
                    let gb = &g * &expand(val(*a), shape);
                    acc(&mut grads, *a, reduce_to(ga, shapes[*a]));
                    acc(&mut grads, *b, reduce_to(gb, shapes[*b]));
                }
                Op::Div(a, b) => {
                    let shape = shape_of(&g);
                    let bv = expand(val(*b), shape);
                    let ga = &g / &bv;
                    let gb = -(&ga * &node.value);
                    acc(&mut grads, *a, reduce_to(ga, shapes[*a]));
                    acc(&mut grads, *b, reduce_to(gb, shapes[*b]));
                }
                Op::Neg(a) => acc(&mut grads, *a, -g),
                Op::Affine { a, scale } => acc(&mut grads, *a, g * *scale),
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (val(*a), val(*b));
                    // C = op(A) op(B)
                    let ga = match (ta, tb) {
                        (false, false) => gemm(&g, false, bv, true),
                        (false, true) => gemm(&g, false, bv, false),
                        (true, false) => gemm(bv, false, &g, true),
                        (true, true) => gemm(bv, true, &g, true),
                    };
                    let gb = match (ta, tb) {
                        (false, false) => gemm(av, true, &g, false),
                        (false, true) => gemm(&g, true, av, false),
                        (true, false) => gemm(av, false, &g, false),
                        (true, true) => gemm(&g, true, av, true),
                    };
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Tanh(a) => {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, g * d);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Log(a) => acc(&mut grads, *a, g / val(*a)),
                Op::Sqrt(a) => {
                    let d = node.value.mapv(|y| 0.5 / y);
                    acc(&mut grads, *a, g * d);
                }
                Op::Square(a) => acc(&mut grads, *a, g * val(*a) * 2.0),
                Op::Abs(a) => acc(&mut grads, *a, g * val(*a).mapv(sign)),
                Op::Relu(a) => {
                    acc(&mut grads, *a, g * val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }))
                }
                Op::Softplus(a) => acc(&mut grads, *a, g * val(*a).mapv(sigmoid)),
                Op::Clamp { a, lo, hi } => {
                    let mask = val(*a).mapv(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, g * mask);
                }
                Op::MaskMul { a, mask } => acc(&mut grads, *a, g * mask),
                Op::SumAll(a) => {
                    let s = g[[0, 0]];
                    acc(&mut grads, *a, Tensor::from_elem(shapes[*a], s));
                }
                Op::SumRows(a) => acc(&mut grads, *a, expand(&g, shapes[*a])),
                Op::SumCols(a) => acc(&mut grads, *a, expand(&g, shapes[*a])),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = gy - &(y * &dot);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols { a, start, len } => {
                    let mut full = Tensor::zeros(shapes[*a]);
                    full.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    acc(&mut grads, *a, full);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = shapes[p].1;
                        acc(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::Diag(a) => {
                    let mut full = Tensor::zeros(shapes[*a]);
                    for k in 0..g.nrows() {
                        full[[k, k]] = g[[k, 0]];
                    }
                    acc(&mut grads, *a, full);
                }
                Op::RowMap { a, jac } => {
                    let mut ga = Tensor::zeros(shapes[*a]);
                    for (k, j) in jac.iter().enumerate() {
                        let row = g.row(k).dot(j);
                        ga.row_mut(k).assign(&row);
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }

    /// Forward tangent sweep. Leaves listed in `seeds` carry the given
    /// tangent; every other leaf has tangent zero.
    pub fn jvp(&self, seeds: &[(Var<'_>, Tensor)]) -> Result<Tangents> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let shapes: Vec<_> = nodes.iter().map(|n| shape_of(&n.value)).collect();
        let mut tan: Vec<Option<Tensor>> = vec![None; nodes.len()];
        for (v, t) in seeds {
            if shape_of(t) != shapes[v.idx] {
                return Err(Error::dims(format!(
                    "tangent {:?} does not match node {:?}",
                    t.shape(),
                    shapes[v.idx]
                )));
            }
            tan[v.idx] = Some(t.clone());
        }
        for i in 0..nodes.len() {
            let node = &nodes[i];
            let out_shape = shapes[i];
            let val = |j: usize| &nodes[j].value;
            let t = |j: usize| tan[j].as_ref();
            let new = match &node.op {
                Op::Leaf => continue,
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let neg = matches!(node.op, Op::Sub(..));
                    match (t(*a), t(*b)) {
                        (None, None) => None,
                        (ta, tb) => {
                            let mut out = Tensor::zeros(out_shape);
                            if let Some(x) = ta {
                                out += &expand(x, out_shape);
                            }
                            if let Some(y) = tb {
                                if neg {
                                    out -= &expand(y, out_shape);
                                } else {
                                    out += &expand(y, out_shape);
                                }
                            }
                            Some(out)
                        }
                    }
                }
                Op::Mul(a, b) => match (t(*a), t(*b)) {
                    (None, None) => None,
                    (ta, tb) => {
                        let mut out = Tensor::zeros(out_shape);
                        if let Some(x) = ta {
                            out += &(expand(x, out_shape) * expand(val(*b), out_shape));
                        }
                        if let Some(y) = tb {
                            out += &(expand(y, out_shape) * expand(val(*a), out_shape));
                        }
                        Some(out)
                    }
                },
                Op::Div(a, b) => match (t(*a), t(*b)) {
                    (None, None) => None,
                    (ta, tb) => {
                        let bv = expand(val(*b), out_shape);
                        let mut out = Tensor::zeros(out_shape);
                        if let Some(x) = ta {
                            out += &(expand(x, out_shape) / &bv);
                        }
                        if let Some(y) = tb {
                            out -= &(expand(y, out_shape) * &node.value / &bv);
                        }
                        Some(out)
                    }
                },
                Op::Neg(a) => t(*a).map(|x| -x),
                Op::Affine { a, scale } => t(*a).map(|x| x * *scale),
                Op::MatMul { a, b, ta, tb } => match (t(*a), t(*b)) {
                    (None, None) => None,
                    (da, db) => {
                        let mut out = Tensor::zeros(out_shape);
                        if let Some(x) = da {
                            out += &gemm(x, *ta, val(*b), *tb);
                        }
                        if let Some(y) = db {
                            out += &gemm(val(*a), *ta, y, *tb);
                        }
                        Some(out)
                    }
                },
                Op::Transpose(a) => t(*a).map(|x| x.t().to_owned()),
                Op::Tanh(a) => t(*a).map(|x| x * &node.value.mapv(|y| 1.0 - y * y)),
                Op::Exp(a) => t(*a).map(|x| x * &node.value),
                Op::Log(a) => t(*a).map(|x| x / val(*a)),
                Op::Sqrt(a) => t(*a).map(|x| x * &node.value.mapv(|y| 0.5 / y)),
                Op::Square(a) => t(*a).map(|x| x * val(*a) * 2.0),
                Op::Abs(a) => t(*a).map(|x| x * &val(*a).mapv(sign)),
                Op::Relu(a) => {
                    t(*a).map(|x| x * &val(*a).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }))
                }
                Op::Softplus(a) => t(*a).map(|x| x * &val(*a).mapv(sigmoid)),
                Op::Clamp { a, lo, hi } => t(*a).map(|x| {
                    x * &val(*a).mapv(|v| if v > *lo && v < *hi { 1.0 } else { 0.0 })
                }),
                Op::MaskMul { a, mask } => t(*a).map(|x| x * mask),
                Op::SumAll(a) => t(*a).map(|x| Tensor::from_elem((1, 1), x.sum())),
                Op::SumRows(a) => t(*a).map(|x| x.sum_axis(Axis(1)).insert_axis(Axis(1))),
                Op::SumCols(a) => t(*a).map(|x| x.sum_axis(Axis(0)).insert_axis(Axis(0))),
                Op::SoftmaxRows(a) => t(*a).map(|x| {
                    let y = &node.value;
                    let yx = y * x;
                    let dot = yx.sum_axis(Axis(1)).insert_axis(Axis(1));
                    yx - &(y * &dot)
                }),
                Op::SliceCols { a, start, len } => {
                    t(*a).map(|x| x.slice(s![.., *start..*start + *len]).to_owned())
                }
                Op::ConcatCols(parts) => {
                    if parts.iter().all(|p| tan[*p].is_none()) {
                        None
                    } else {
                        let pieces: Vec<Tensor> = parts
                            .iter()
                            .map(|&p| {
                                tan[p].clone().unwrap_or_else(|| Tensor::zeros(shapes[p]))
                            })
                            .collect();
                        let views: Vec<_> = pieces.iter().map(|p| p.view()).collect();
                        Some(concatenate(Axis(1), &views).expect("concat shapes"))
                    }
                }
                Op::Diag(a) => t(*a).map(|x| {
                    Tensor::from_shape_fn((x.nrows(), 1), |(k, _)| x[[k, k]])
                }),
                Op::RowMap { a, jac } => t(*a).map(|x| {
                    let mut out = Tensor::zeros(out_shape);
                    for (k, j) in jac.iter().enumerate() {
                        out.row_mut(k).assign(&j.dot(&x.row(k)));
                    }
                    out
                }),
            };
            tan[i] = new;
        }
        Ok(Tangents { tangents: tan, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        shape_of(&self.tape.nodes.borrow()[self.idx].value)
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    /// Value of a `1×1` node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value[[0, 0]]
    }

    /// Copies the value into a fresh leaf, cutting the gradient path.
    pub fn detach(self) -> Var<'t> {
        self.tape.leaf(self.value())
    }

    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        let scaled = if scale == 1.0 {
            self
        } else {
            let v = self.tape.nodes.borrow()[self.idx].value.mapv(|x| x * scale);
            self.tape.push(v, Op::Affine { a: self.idx, scale })
        };
        if shift == 0.0 {
            scaled
        } else {
            scaled + self.tape.scalar(shift)
        }
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    fn matmul_impl(self, other: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[other.idx].value);
            let inner_a = if ta { a.nrows() } else { a.ncols() };
            let inner_b = if tb { b.ncols() } else { b.nrows() };
            assert_eq!(inner_a, inner_b, "matmul inner dimensions {:?} {:?}", a.shape(), b.shape());
            gemm(a, ta, b, tb)
        };
        self.tape.push(value, Op::MatMul { a: self.idx, b: other.idx, ta, tb })
    }

    /// `self · other`
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.matmul_impl(other, false, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(self, other: Var<'t>) -> Var<'t> {
        self.matmul_impl(other, false, true)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(self, other: Var<'t>) -> Var<'t> {
        self.matmul_impl(other, true, false)
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.value().t().to_owned();
        self.tape.push(v, Op::Transpose(self.idx))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self, f64::tanh, Op::Tanh(self.idx))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self, f64::exp, Op::Exp(self.idx))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self, f64::ln, Op::Log(self.idx))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(self, f64::sqrt, Op::Sqrt(self.idx))
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self, |x| x * x, Op::Square(self.idx))
    }

    pub fn abs(self) -> Var<'t> {
        self.tape.unary(self, f64::abs, Op::Abs(self.idx))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self, |x| x.max(0.0), Op::Relu(self.idx))
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.unary(self, softplus, Op::Softplus(self.idx))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape.unary(self, move |x| x.clamp(lo, hi), Op::Clamp { a: self.idx, lo, hi })
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mask(self, mask: Tensor) -> Var<'t> {
        assert_eq!(self.shape(), shape_of(&mask), "mask shape");
        let v = &self.tape.nodes.borrow()[self.idx].value * &mask;
        self.tape.push(v, Op::MaskMul { a: self.idx, mask })
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.tape.nodes.borrow()[self.idx].value.sum();
        self.tape.push(Tensor::from_elem((1, 1), s), Op::SumAll(self.idx))
    }

    pub fn mean(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum().scale(1.0 / (r * c) as f64)
    }

    /// Row sums: `r×c → r×1`.
    pub fn sum_rows(self) -> Var<'t> {
        let v = self.tape.nodes.borrow()[self.idx].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.tape.push(v, Op::SumRows(self.idx))
    }

    /// Column sums: `r×c → 1×c`.
    pub fn sum_cols(self) -> Var<'t> {
        let v = self.tape.nodes.borrow()[self.idx].value.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.tape.push(v, Op::SumCols(self.idx))
    }

    /// Softmax along each row with max-subtraction.
    pub fn softmax_rows(self) -> Var<'t> {
        let v = softmax_rows(&self.tape.nodes.borrow()[self.idx].value);
        self.tape.push(v, Op::SoftmaxRows(self.idx))
    }

    pub fn cols(self, start: usize, len: usize) -> Var<'t> {
        let v = self.tape.nodes.borrow()[self.idx].value.slice(s![.., start..start + len]).to_owned();
        self.tape.push(v, Op::SliceCols { a: self.idx, start, len })
    }

    pub fn col(self, j: usize) -> Var<'t> {
        self.cols(j, 1)
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(self) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            let m = &nodes[self.idx].value;
            assert_eq!(m.nrows(), m.ncols(), "diag of non-square");
            Tensor::from_shape_fn((m.nrows(), 1), |(k, _)| m[[k, k]])
        };
        self.tape.push(v, Op::Diag(self.idx))
    }

    /// Applies a row-wise map with known per-row value and Jacobian.
    pub fn row_map(self, value: Tensor, jac: Vec<Tensor>) -> Var<'t> {
        assert_eq!(value.nrows(), self.shape().0, "row_map rows");
        assert_eq!(jac.len(), value.nrows(), "row_map jacobians");
        self.tape.push(value, Op::RowMap { a: self.idx, jac })
    }
}

/// Concatenates nodes along columns.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let tape = parts[0].tape;
    let value = {
        let nodes = tape.nodes.borrow();
        let views: Vec<_> = parts.iter().map(|p| nodes[p.idx].value.view()).collect();
        concatenate(Axis(1), &views).expect("concat rows must agree")
    };
    tape.push(value, Op::ConcatCols(parts.iter().map(|p| p.idx).collect()))
}

macro_rules! binop {
    ($tr:ident, $m:ident, $kind:expr) => {
        impl<'t> $tr for Var<'t> {
            type Output = Var<'t>;
            fn $m(self, rhs: Var<'t>) -> Var<'t> {
                self.tape.binary(self, rhs, $kind)
            }
        }
    };
}

binop!(Add, add, 0);
binop!(Sub, sub, 1);
binop!(Mul, mul, 2);
binop!(Div, div, 3);

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.affine(1.0, rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.affine(1.0, -rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        let v = -&self.tape.nodes.borrow()[self.idx].value;
        self.tape.push(v, Op::Neg(self.idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.scalar(3.0);
        let y = x * x;
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x)[[0, 0]], 6.0);
    }

    #[test]
    fn tanh_times_y() {
        let tape = Tape::new();
        let x = tape.scalar(0.0);
        let y = tape.scalar(2.0);
        let f = x.tanh() * y;
        let g = tape.backward(f).unwrap();
        assert_eq!(g.wrt(x)[[0, 0]], 2.0);
        assert_eq!(g.wrt(y)[[0, 0]], 0.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.scalar(2.0);
        let y = x * x + x.scale(3.0) + x;
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x)[[0, 0]], 2.0 * 2.0 + 3.0 + 1.0);
    }

    #[test]
    fn seed_must_be_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0]]);
        assert!(matches!(tape.backward(x), Err(Error::NotScalar { rows: 1, cols: 2 })));
    }

    #[test]
    fn unreached_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.scalar(1.0);
        let unused = tape.leaf(array![[1.0, 2.0]]);
        let y = x.exp();
        let g = tape.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), array![[0.0, 0.0]]);
    }

    #[test]
    fn kinks_use_zero_subgradient() {
        let tape = Tape::new();
        let x = tape.leaf(array![[0.0, 1.0, -2.0]]);
        let y = (x.abs() + x.relu()).sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x), array![[0.0, 2.0, -1.0]]);
    }

    #[test]
    fn broadcast_adjoints_reduce_onto_operands() {
        let tape = Tape::new();
        let m = tape.leaf(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let r = tape.leaf(array![[10.0, 20.0]]);
        let c = tape.leaf(array![[1.0], [2.0], [3.0]]);
        let s = tape.scalar(2.0);
        let y = ((m + r) * c * s).sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(r), array![[12.0, 12.0]]);
        assert_eq!(g.wrt(c), array![[2.0 * 33.0], [2.0 * 37.0], [2.0 * 41.0]]);
        let total: f64 = (array![[11.0, 22.0], [13.0, 24.0], [15.0, 26.0]]
            * array![[1.0], [2.0], [3.0]])
        .sum();
        assert_eq!(g.wrt(s)[[0, 0]], total);
    }
}
