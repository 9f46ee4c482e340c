//! Data-parallel kernels with a sequential fallback.
//!
//! With the `parallel` feature the heavy kernels (row-blocked matrix
//! products, elementwise transcendental maps, independent Monte Carlo
//! chains) fan out over rayon. Every parallel kernel splits work by output
//! rows or by independent items only, so results are bitwise identical to
//! the sequential path. The switch can be flipped at runtime, which is what
//! the benchmark suite uses to compare both paths in one binary.

use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Below this many multiply-adds a product runs on the calling thread.
const MATMUL_PAR_THRESHOLD: usize = 1 << 16;
/// Below this many elements a map runs on the calling thread.
const MAP_PAR_THRESHOLD: usize = 1 << 14;

/// Enables or disables parallel execution. Has no effect without the
/// `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Parallel execution is on and there is more than one worker to fan out to.
fn fan_out() -> bool {
    #[cfg(feature = "parallel")]
    return parallel_enabled() && rayon::current_num_threads() > 1;
    #[cfg(not(feature = "parallel"))]
    false
}

/// Matrix product `a · b`.
pub fn matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let rows = a.nrows();
    let work = rows * a.ncols() * b.ncols();
    if !fan_out() || work < MATMUL_PAR_THRESHOLD || rows < 2 {
        return a.dot(&b);
    }
    par_matmul(a, b)
}

#[cfg(feature = "parallel")]
fn par_matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    use rayon::prelude::*;
    let rows = a.nrows();
    let chunk = rows.div_ceil(rayon::current_num_threads().max(1) * 4).max(16);
    let starts: Vec<usize> = (0..rows).step_by(chunk).collect();
    let blocks: Vec<Array2<f64>> = starts
        .par_iter()
        .map(|&r0| {
            let r1 = (r0 + chunk).min(rows);
            a.slice(s![r0..r1, ..]).dot(&b)
        })
        .collect();
    let views: Vec<_> = blocks.iter().map(|m| m.view()).collect();
    concatenate(Axis(0), &views).expect("row blocks share column count")
}

#[cfg(not(feature = "parallel"))]
fn par_matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    a.dot(&b)
}

/// Elementwise map.
pub fn map<F>(a: &Array2<f64>, f: F) -> Array2<f64>
where
    F: Fn(f64) -> f64 + Sync + Send,
{
    let mut out = Array2::zeros(a.raw_dim());
    let zip = Zip::from(&mut out).and(a);
    #[cfg(feature = "parallel")]
    if fan_out() && a.len() >= MAP_PAR_THRESHOLD {
        zip.par_for_each(|o, &x| *o = f(x));
        return out;
    }
    zip.for_each(|o, &x| *o = f(x));
    out
}

/// Runs `f` over `0..n`, collecting results in index order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if fan_out() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
