use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2};
use rwpo::analysis::{gaussian_sampling_report, kde_2d, mmd, sample_mean_cov, write_mmd_metrics, write_theory_metrics, Grid2};
use rwpo::checkpoint::Checkpoint;
use rwpo::config::{emit, ConfigMap};
use rwpo::datasets::{
    lorenz_observe, linear_gaussian_problem, sample_benchmark, write_dataset, DatasetId, LorenzForward, LorenzParams,
    LorenzSetup, LORENZ_PARAM_STD,
};
use rwpo::dynamics::{Flow, FlowOptions, TimeGrid};
use rwpo::io::{fmt_f64, CsvWriter};
use rwpo::layer::{RwpoParams, TokenBatch};
use rwpo::objective::{write_loss_history, BayesProblem, Prior, Standardized};
use rwpo::trainer::{base_samples, train_with, write_validation_history, Mode, TrainConfig, TrainData, TrainEvent};
use rwpo::{checks, Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "rwpo", version, about = "Sparse-transformer probability flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// key = value configuration file; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output directory, created if absent
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// number of time steps M
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// number of samples to generate or draw
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    detach_attention: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a flow to a benchmark dataset by maximum likelihood
    Train,
    /// Push base samples through a trained flow
    Generate,
    /// Sample a Gaussian target with the attention dynamics and track KL against its bound
    Sample {
        #[arg(long)]
        target: Option<String>,
    },
    /// Fit a conditional flow to a posterior (linear_gaussian or lorenz63)
    Bayes,
    /// Compare a trained flow's samples with fresh data: MMD and a KDE grid
    Analyze,
    /// Run the fast invariant checks
    Selftest,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NumericalAbort { .. } | Error::NonFinite { .. } | Error::Quadrature(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::NotScalar { .. } | Error::EmptyTape => 2,
        Error::Config(_) | Error::UnknownDataset(_) | Error::InvalidParameter(_) | Error::DimensionMismatch(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let mut map = match &cli.common.config {
        Some(p) => ConfigMap::load(p)?,
        None => ConfigMap::new(),
    };
    let c = &cli.common;
    let overrides: [(&str, Option<String>); 6] = [
        ("seed", c.seed.map(|v| v.to_string())),
        ("dataset", c.dataset.clone()),
        ("lambda", c.lambda.map(|v| v.to_string())),
        ("beta", c.beta.map(|v| v.to_string())),
        ("steps", c.steps.map(|v| v.to_string())),
        ("n", c.n.map(|v| v.to_string())),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            map.set(k, v);
        }
    }
    if c.detach_attention {
        map.set("detach_attention", "true");
    }
    if let Command::Sample { target: Some(t) } = &cli.command {
        map.set("target", t);
    }
    if matches!(cli.command, Command::Selftest) {
        return selftest();
    }
    fs::create_dir_all(&c.out).map_err(|e| Error::Io { path: c.out.clone(), source: e })?;
    let out = c.out.as_path();
    match cli.command {
        Command::Train => cmd_train(map, out),
        Command::Generate => cmd_generate(map, out, need_checkpoint(c)?),
        Command::Sample { .. } => cmd_sample(map, out),
        Command::Bayes => cmd_bayes(map, out),
        Command::Analyze => cmd_analyze(map, out, need_checkpoint(c)?),
        Command::Selftest => unreachable!(),
    }
    .map(|()| 0)
}

fn need_checkpoint(c: &Common) -> Result<&Path> {
    c.checkpoint.as_deref().ok_or_else(|| Error::Config("--checkpoint is required".into()))
}

/// Keys read by the command line itself, with defaults. Every training-based
/// subcommand accepts all of them so resolved configs are interchangeable.
const EXTRA_KEYS: [(&str, &str); 7] = [
    ("n", "1000"),
    ("n_data", "10000"),
    ("posterior_n", "4000"),
    ("problem_dim", "2"),
    ("obs_dim", "2"),
    ("kde_bandwidth", "0.1"),
    ("kde_cells", "64"),
];

/// Training config plus the keys that only the command line uses.
struct RunConfig {
    train: TrainConfig,
    extra: Vec<(String, String)>,
}

impl RunConfig {
    fn resolve(mut map: ConfigMap) -> Result<(Self, ConfigMap)> {
        let mut extra = Vec::new();
        for (k, d) in EXTRA_KEYS {
            extra.push((k.to_string(), map.take_str(k).unwrap_or_else(|| d.to_string())));
        }
        let train = TrainConfig::from_map(&mut map)?;
        Ok((RunConfig { train, extra }, map))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = &self.extra.iter().find(|(k, _)| k == key).expect("declared key").1;
        v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
    }

    fn write(&self, out: &Path) -> Result<()> {
        let mut pairs = self.train.to_pairs();
        pairs.extend(self.extra.iter().cloned());
        write_text(&out.join("resolved.cfg"), &emit(&pairs))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn push_forward(ck: &Checkpoint, cfg: &TrainConfig, n: usize, seed: u64) -> Result<Array2<f64>> {
    let z = base_samples(n, ck.potential.dim, &mut rng(seed, 7));
    let opts = FlowOptions { track_density: false, ..cfg.flow_options() };
    let traj = Flow::new(&ck.potential, &ck.rwpo, ck.grid)?.options(opts).forward(&TokenBatch::new(z, 0)?)?;
    Ok(traj.terminal().points.clone())
}

fn train_and_save(cfg: &TrainConfig, data: &TrainData, out: &Path) -> Result<Checkpoint> {
    let mut saved = Ok(());
    let outcome = train_with(cfg, data, |ev| {
        if let TrainEvent::Checkpoint(ck) = ev {
            if saved.is_ok() {
                saved = ck.save(&out.join(format!("checkpoint_{}.txt", ck.iteration)));
            }
        }
    })?;
    saved?;
    write_loss_history(&out.join("loss.csv"), &outcome.history)?;
    write_validation_history(&out.join("validation.csv"), &outcome.validation)?;
    let ck = outcome.checkpoint();
    ck.save(&out.join("checkpoint.txt"))?;
    Ok(ck)
}

fn cmd_train(map: ConfigMap, out: &Path) -> Result<()> {
    let (rc, rest) = RunConfig::resolve(map)?;
    rest.finish()?;
    let cfg = &rc.train;
    let id = DatasetId::parse(&cfg.dataset)?;
    if !id.is_benchmark() {
        return Err(Error::Config(format!("`train` needs a 2D benchmark dataset; use `bayes` for {}", id.name())));
    }
    if cfg.mode != Mode::Generative {
        return Err(Error::Config("`train` runs in generative mode".into()));
    }
    rc.write(out)?;
    let data = sample_benchmark(id, rc.get("n_data")?, cfg.seed)?;
    write_dataset(&out.join("data.csv"), &data, None)?;
    let ck = train_and_save(cfg, &TrainData::Samples(data), out)?;
    let samples = push_forward(&ck, cfg, rc.get("n")?, cfg.seed)?;
    write_dataset(&out.join("samples.csv"), &samples, None)
}

fn cmd_generate(map: ConfigMap, out: &Path, ck_path: &Path) -> Result<()> {
    let (rc, rest) = RunConfig::resolve(map)?;
    rest.finish()?;
    rc.write(out)?;
    let ck = Checkpoint::load(ck_path)?;
    let samples = push_forward(&ck, &rc.train, rc.get("n")?, rc.train.seed)?;
    write_dataset(&out.join("samples.csv"), &samples, None)
}

fn cmd_sample(mut map: ConfigMap, out: &Path) -> Result<()> {
    let target = map.take_str("target").unwrap_or_else(|| "gaussian".into());
    if target != "gaussian" {
        return Err(Error::Config(format!("unknown sampling target `{target}`; only `gaussian` is supported")));
    }
    let sigma2: f64 = map.take_or("sigma2", 1.0)?;
    let dim: usize = map.take_or("dim", 2)?;
    let n: usize = map.take_or("n", 1000)?;
    let steps: usize = map.take_or("steps", 64)?;
    let horizon: f64 = map.take_or("horizon", 1.0)?;
    let lambda: f64 = map.take_or("lambda", 1.0)?;
    let beta: f64 = map.take_or("beta", 1.0)?;
    let seed: u64 = map.take_or("seed", 0)?;
    let init_scale: f64 = map.take_or("init_scale", 2.0)?;
    let n_boot: usize = map.take_or("n_boot", 100)?;
    map.finish()?;
    let pairs: Vec<(String, String)> = [
        ("target", target),
        ("sigma2", sigma2.to_string()),
        ("dim", dim.to_string()),
        ("n", n.to_string()),
        ("steps", steps.to_string()),
        ("horizon", horizon.to_string()),
        ("lambda", lambda.to_string()),
        ("beta", beta.to_string()),
        ("seed", seed.to_string()),
        ("init_scale", init_scale.to_string()),
        ("n_boot", n_boot.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    write_text(&out.join("resolved.cfg"), &emit(&pairs))?;

    let grid = TimeGrid::new(horizon, steps)?;
    let rp = RwpoParams::new(lambda, beta, grid.h())?;
    let x0 = TokenBatch::new(base_samples(n, dim, &mut rng(seed, 1)) * init_scale, 0)?;
    let report = gaussian_sampling_report(sigma2, &rp, grid, &x0, n_boot, seed)?;
    write_theory_metrics(&out.join("theory_metrics.csv"), &report.rows)
}

fn cmd_bayes(map: ConfigMap, out: &Path) -> Result<()> {
    let mut map = map;
    if !map.contains("mode") {
        map.set("mode", "bayesian");
    }
    if !map.contains("dataset") {
        map.set("dataset", "linear_gaussian");
    }
    let (rc, rest) = RunConfig::resolve(map)?;
    rest.finish()?;
    let cfg = &rc.train;
    if cfg.mode != Mode::Bayesian {
        return Err(Error::Config("`bayes` runs in bayesian mode".into()));
    }
    let id = DatasetId::parse(&cfg.dataset)?;
    let mut exact = None;
    let mut unscale: Option<(Vec<f64>, Vec<f64>)> = None;
    let problem = match id {
        DatasetId::LinearGaussian => {
            let model = linear_gaussian_problem(rc.get("problem_dim")?, rc.get("obs_dim")?, cfg.seed)?;
            let (_, ys) = model.sample_pairs(1, cfg.seed.wrapping_add(1))?;
            let y = ys.row(0).to_owned();
            exact = Some(model.posterior(&y)?);
            BayesProblem::new(y, Box::new(model.forward()), model.sigma, model.prior()?)?
        }
        DatasetId::Lorenz63 => {
            // flow in standardized coordinates so the base law maps near the prior
            let setup = LorenzSetup::default();
            let c = LorenzParams::CANONICAL;
            let y = Array1::from(lorenz_observe(&c, &setup, cfg.seed)?);
            let shift = vec![c.sigma, c.r, c.beta];
            let scale = LORENZ_PARAM_STD.to_vec();
            unscale = Some((shift.clone(), scale.clone()));
            let forward = Standardized::new(LorenzForward::new(setup), shift, scale)?;
            let prior = Prior::gaussian(Array1::zeros(3), Array2::eye(3))?;
            BayesProblem::new(y, Box::new(forward), setup.noise_std, prior)?
        }
        other => return Err(Error::Config(format!("`bayes` needs linear_gaussian or lorenz63, got {}", other.name()))),
    };
    rc.write(out)?;
    let ck = train_and_save(cfg, &TrainData::Conditional { problem, targets: None }, out)?;
    let mut post = push_forward(&ck, cfg, rc.get("posterior_n")?, cfg.seed)?;
    if let Some((shift, scale)) = &unscale {
        for mut row in post.rows_mut() {
            for k in 0..row.len() {
                row[k] = shift[k] + scale[k] * row[k];
            }
        }
    }
    write_dataset(&out.join("posterior.csv"), &post, None)?;
    let (m, s) = sample_mean_cov(&post)?;
    let mut w = CsvWriter::create(&out.join("posterior_moments.csv"), &["source", "i", "j", "value"])?;
    let mut moments = vec![("sample", m, s)];
    if let Some((em, es)) = exact {
        moments.push(("exact", em, es));
    }
    for (src, mean, cov) in &moments {
        for i in 0..mean.len() {
            w.row(&[src.to_string(), i.to_string(), String::new(), fmt_f64(mean[i])])?;
            for j in 0..mean.len() {
                w.row(&[src.to_string(), i.to_string(), j.to_string(), fmt_f64(cov[[i, j]])])?;
            }
        }
    }
    w.finish()
}

fn cmd_analyze(map: ConfigMap, out: &Path, ck_path: &Path) -> Result<()> {
    let (rc, rest) = RunConfig::resolve(map)?;
    rest.finish()?;
    let cfg = &rc.train;
    let id = DatasetId::parse(&cfg.dataset)?;
    if !id.is_benchmark() {
        return Err(Error::Config(format!("`analyze` needs a 2D benchmark dataset, got {}", id.name())));
    }
    rc.write(out)?;
    let ck = Checkpoint::load(ck_path)?;
    let n: usize = rc.get("n")?;
    let generated = push_forward(&ck, cfg, n, cfg.seed)?;
    let reference = sample_benchmark(id, n, cfg.seed.wrapping_add(1))?;
    let est = mmd(&generated, &reference, None)?;
    log::info!("{}: MMD² {:.5} ± {:.5} (bandwidth {:.4})", id.name(), est.mmd2, est.std_err, est.bandwidth);
    write_mmd_metrics(&out.join("mmd_metrics.csv"), &[(id.name().to_string(), est)])?;

    let cells: usize = rc.get("kde_cells")?;
    let grid = Grid2::regular((-4.0, 4.0), (-4.0, 4.0), cells, cells)?;
    let density = kde_2d(&generated, rc.get("kde_bandwidth")?, &grid)?;
    let mut w = CsvWriter::create(&out.join("kde.csv"), &["x", "y", "density"])?;
    for (i, x) in grid.xs.iter().enumerate() {
        for (j, y) in grid.ys.iter().enumerate() {
            w.row(&[fmt_f64(*x), fmt_f64(*y), fmt_f64(density[[i, j]])])?;
        }
    }
    w.finish()?;
    write_dataset(&out.join("samples.csv"), &generated, None)
}

fn selftest() -> Result<u8> {
    let results = checks::quick_suite();
    for c in &results {
        println!("{}", c.line());
    }
    let failed = results.iter().filter(|c| !c.passed).count();
    println!("selftest: {} passed, {failed} failed", results.len() - failed);
    Ok(if failed == 0 { 0 } else { 4 })
}
