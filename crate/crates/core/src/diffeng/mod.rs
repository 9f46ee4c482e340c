//! Minimal differentiation engine: a vector-level reverse-mode tape with a
//! forward tangent sweep over the same record.

mod tape;

pub use tape::{concat_cols, Gradients, Tangents, Tape, Tensor, Var};
pub(crate) use tape::softplus;

use crate::error::{Error, Result};

/// A value together with its directional derivative along a seed direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DualVector {
    pub value: Vec<f64>,
    pub tangent: Vec<f64>,
}

/// `J_f(x) · v` for the map recorded by `f`, evaluated exactly by a forward
/// tangent sweep. `f` receives `x` as a `1×d` row and may return any shape;
/// the result is flattened row-major.
pub fn directional_derivative<F>(f: F, x: &[f64], v: &[f64]) -> Result<DualVector>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    if x.len() != v.len() {
        return Err(Error::dims(format!("point has {} coordinates, direction {}", x.len(), v.len())));
    }
    let tape = Tape::new();
    let input = tape.row(x);
    let out = f(&tape, input);
    let seed = Tensor::from_shape_vec((1, v.len()), v.to_vec()).expect("row");
    let tangents = tape.jvp(&[(input, seed)])?;
    Ok(DualVector {
        value: out.value().iter().copied().collect(),
        tangent: tangents.wrt(out).iter().copied().collect(),
    })
}

/// Gradient of a scalar map at `x` by a reverse sweep.
pub fn gradient<F>(f: F, x: &[f64]) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let input = tape.row(x);
    let out = f(&tape, input);
    let grads = tape.backward(out)?;
    Ok(grads.wrt(input).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_tangent_is_direction() {
        let dv = directional_derivative(|_, x| x, &[0.3, -1.0, 2.0], &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(dv.tangent, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn squared_norm_directional_derivative() {
        let dv = directional_derivative(|_, x| x.square().sum(), &[1.0, 2.0], &[1.0, 0.0]).unwrap();
        assert_eq!(dv.value, vec![5.0]);
        assert_eq!(dv.tangent, vec![2.0]);
    }

    #[test]
    fn mismatched_direction_is_rejected() {
        let err = directional_derivative(|_, x| x, &[1.0, 2.0], &[1.0]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    // Every primitive through one composite map; reverse and forward sweeps
    // must agree on <grad f, v>.
    fn composite<'t>(tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let w = tape.leaf(Tensor::from_shape_fn((3, 3), |(i, j)| 0.3 * (i as f64) - 0.2 * (j as f64) + 0.1));
        let y = x.matmul(w); // 1x3
        let z = concat_cols(&[y.tanh(), x.exp(), (x.square() + 1.0).sqrt()]);
        let s = z.softmax_rows();
        let a = (s * z).sum_rows();
        let b = (x.abs() + x.relu() + x.softplus() + x.clamp(-0.5, 0.5)).sum_rows();
        let c = (x.square() + 2.0).ln().sum_rows() / (b.square() + 1.0);
        let d = x.transpose().matmul(x).diag().sum() + x.cols(1, 2).sum_cols().sum();
        let e = x.mask(Tensor::from_shape_vec((1, 3), vec![1.0, -2.0, 0.5]).unwrap()).sum();
        (a + c - d + e + (-x).sum()).sum()
    }

    proptest! {
        #[test]
        fn reverse_and_forward_sweeps_agree(
            x in proptest::collection::vec(-2.0f64..2.0, 3),
            v in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            // keep clear of the nonsmooth points
            prop_assume!(x.iter().all(|xi| xi.abs() > 1e-3 && (xi.abs() - 0.5).abs() > 1e-3));
            let g = gradient(composite, &x).unwrap();
            let dv = directional_derivative(composite, &x, &v).unwrap();
            let dot: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
            prop_assert!((dot - dv.tangent[0]).abs() <= 1e-12 * (1.0 + dot.abs()));
        }

        #[test]
        fn reverse_sweep_matches_finite_differences(
            x in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            prop_assume!(x.iter().all(|xi| xi.abs() > 1e-3 && (xi.abs() - 0.5).abs() > 1e-3));
            let g = gradient(composite, &x).unwrap();
            let f = |p: &[f64]| {
                let tape = Tape::new();
                let v = tape.row(p);
                composite(&tape, v).item()
            };
            let step = 1e-5;
            for i in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += step;
                xm[i] -= step;
                let fd = (f(&xp) - f(&xm)) / (2.0 * step);
                prop_assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + g[i].abs()), "coord {} fd {} rev {}", i, fd, g[i]);
            }
        }
    }
}
