//! Parameter checkpoints.
//!
//! Text format, one item per line:
//!
//! ```text
//! rwpo-checkpoint v1
//! meta <key> <value>            # dim, width, depth, residual_step, horizon,
//!                               # steps, iteration, lambda, beta, raw_lambda,
//!                               # raw_beta, trainable_lambda, trainable_beta, kernel
//! tensor <name> <rows> <cols>
//! <rows lines of cols space-separated floats>
//! end
//! ```
//!
//! Tensors appear in the order of [`DriftPotential::params`]. Floats use 17
//! significant digits so a save/load cycle is bit exact.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::diffeng::Tensor;
use crate::dynamics::TimeGrid;
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::layer::{KernelForm, RwpoParams};
use crate::potential::DriftPotential;

pub const MAGIC: &str = "rwpo-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub potential: DriftPotential,
    pub rwpo: RwpoParams,
    pub grid: TimeGrid,
    pub iteration: usize,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let p = &self.potential;
        let r = &self.rwpo;
        let mut s = String::new();
        s.push_str(MAGIC);
        s.push('\n');
        let meta: [(&str, String); 14] = [
            ("dim", p.dim.to_string()),
            ("width", p.width.to_string()),
            ("depth", p.depth().to_string()),
            ("residual_step", fmt_f64(p.residual_step)),
            ("horizon", fmt_f64(self.grid.horizon())),
            ("steps", self.grid.steps().to_string()),
            ("iteration", self.iteration.to_string()),
            ("lambda", fmt_f64(r.lambda())),
            ("beta", fmt_f64(r.beta())),
            ("raw_lambda", fmt_f64(r.raw_lambda())),
            ("raw_beta", fmt_f64(r.raw_beta())),
            ("trainable_lambda", r.trainable_lambda.to_string()),
            ("trainable_beta", r.trainable_beta.to_string()),
            ("kernel", r.kernel.name().to_string()),
        ];
        for (k, v) in meta {
            let _ = writeln!(s, "meta {k} {v}");
        }
        for (name, t) in p.params() {
            let _ = writeln!(s, "tensor {name} {} {}", t.nrows(), t.ncols());
            for row in t.rows() {
                let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
                s.push_str(&line.join(" "));
                s.push('\n');
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let mut lines = text.lines().enumerate().peekable();
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            Some((_, l)) => return Err(bad(format!("expected `{MAGIC}`, found `{l}`"))),
            None => return Err(bad("empty file".into())),
        }
        let mut meta = HashMap::new();
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        let mut ended = false;
        while let Some((i, line)) = lines.next() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                [] => continue,
                ["end"] => {
                    ended = true;
                    break;
                }
                ["meta", k, v] => {
                    meta.insert(k.to_string(), v.to_string());
                }
                ["tensor", name, r, c] => {
                    let parse_dim = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("line {}: bad shape", i + 1)));
                    let (r, c) = (parse_dim(r)?, parse_dim(c)?);
                    let mut data = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        let (j, row) = lines.next().ok_or_else(|| bad(format!("tensor {name} truncated")))?;
                        for f in row.split_whitespace() {
                            data.push(f.parse::<f64>().map_err(|_| bad(format!("line {}: `{f}` is not a number", j + 1)))?);
                        }
                    }
                    let t = Tensor::from_shape_vec((r, c), data)
                        .map_err(|_| bad(format!("tensor {name}: expected {r}x{c} values")))?;
                    tensors.push((name.to_string(), t));
                }
                _ => return Err(bad(format!("line {}: unrecognized `{line}`", i + 1))),
            }
        }
        if !ended {
            return Err(bad("missing `end`".into()));
        }
        let get = |k: &str| meta.get(k).ok_or_else(|| bad(format!("missing meta `{k}`")));
        fn num<T: std::str::FromStr>(v: &str, k: &str, bad: &dyn Fn(String) -> Error) -> Result<T> {
            v.parse().map_err(|_| bad(format!("meta `{k}`: cannot parse `{v}`")))
        }
        let dim: usize = num(get("dim")?, "dim", &bad)?;
        let width: usize = num(get("width")?, "width", &bad)?;
        let depth: usize = num(get("depth")?, "depth", &bad)?;
        let mut potential = DriftPotential::zero(dim, width, depth);
        potential.residual_step = num(get("residual_step")?, "residual_step", &bad)?;
        {
            let names: Vec<String> = potential.params().into_iter().map(|(n, _)| n).collect();
            if names.len() != tensors.len() {
                return Err(bad(format!("expected {} tensors, found {}", names.len(), tensors.len())));
            }
            for ((want, slot), (name, t)) in names.iter().zip(potential.params_mut()).zip(tensors) {
                if *want != name {
                    return Err(bad(format!("expected tensor `{want}`, found `{name}`")));
                }
                if slot.dim() != t.dim() {
                    return Err(bad(format!("tensor `{name}` has shape {:?}, expected {:?}", t.dim(), slot.dim())));
                }
                *slot = t;
            }
        }
        let grid = TimeGrid::new(num(get("horizon")?, "horizon", &bad)?, num(get("steps")?, "steps", &bad)?)?;
        let lambda: f64 = num(get("lambda")?, "lambda", &bad)?;
        let beta: f64 = num(get("beta")?, "beta", &bad)?;
        let tl: bool = num(get("trainable_lambda")?, "trainable_lambda", &bad)?;
        let tb: bool = num(get("trainable_beta")?, "trainable_beta", &bad)?;
        let mut rwpo = RwpoParams::new(lambda, beta, grid.h())?.with_kernel(KernelForm::parse(get("kernel")?)?);
        rwpo.trainable_lambda = tl;
        rwpo.trainable_beta = tb;
        // trainable values are softplus images of the stored raw values
        if tl {
            rwpo.set_raw_lambda(num(get("raw_lambda")?, "raw_lambda", &bad)?);
        }
        if tb {
            rwpo.set_raw_beta(num(get("raw_beta")?, "raw_beta", &bad)?);
        }
        let iteration = num(get("iteration")?, "iteration", &bad)?;
        Ok(Checkpoint { potential, rwpo, grid, iteration })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}
