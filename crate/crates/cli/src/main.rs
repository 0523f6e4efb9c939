//! `hdfm`: invariant checks, the toy comparison, spectral diagnostics,
//! training and sampling from the command line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use hdfm_core::checks::{run_checks, write_report, CheckOptions};
use hdfm_core::diagnostics::{
    evaluate_transport, image_crops, ratio_curves_analytic, spiral_paths, straightness, straightness_of_paths,
    uniform_grid, RatioConfig, TextureSpec, Tracking,
};
use hdfm_core::io::{fmt_f64, read_tensor, write_csv, write_pnm, write_tensor, Tensor};
use hdfm_core::neural::{checkpoint_load, train, RowDataset, TrainConfig};
use hdfm_core::par::{exec_for_workers, with_workers};
use hdfm_core::path::TimeScheme;
use hdfm_core::sampler::{sample, sample_batch, sample_pure_blur, BetaMode, Oracle, TimeGrid, VelocitySource};
use hdfm_core::spectral::heat_endpoint;
use hdfm_core::toyverse::{
    evaluate_claims, make_embedding, run_toy_comparison, write_toy_report, DimBudget, SpiralSpec, ToyConfig,
};
use hdfm_core::{derive_seed, rng_from_seed, Exec, GridField, Head, HeatSchedule, MlpConfig, MlpModel, PathKind};
use hdfm_core::{SamplerConfig, Solver};
use ndarray::Array2;

/// A bad flag, config file or setting. Exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// `(key, default, help)`. An empty default means unset.
type Key = (&'static str, &'static str, &'static str);

const SHARED: &[Key] = &[
    ("seed", "", "base seed, required by experiment commands"),
    ("workers", "1", "worker threads; 1 runs sequentially"),
    ("out_dir", "out", "directory for every artifact"),
];

const CHECK: &[Key] = &[
    ("filter", "", "run one module only: spectral, path, neural or sampler"),
    ("inject_fault", "", "plant a known defect (eigen-sign)"),
];

const TOY: &[Key] = &[
    ("dims", "2,8,512", "ambient dimensions"),
    ("heads", "x,v", "prediction heads"),
    ("seeds", "", "cell seeds; default seed, seed+1, seed+2"),
    ("steps", "12000", "training steps"),
    ("batch", "256", "batch size"),
    ("large_dim_from", "64", "dimensions from here on use the large-D budget"),
    ("large_dim_steps", "4000", "training steps for large D"),
    ("large_dim_batch", "128", "batch size for large D"),
    ("lr", "0.006", "Adam learning rate"),
    ("cosine", "true", "cosine learning-rate decay"),
    ("hidden", "64", "hidden width"),
    ("layers", "5", "linear layers"),
    ("train_eps", "0.05", "denominator clamp used in training"),
    ("blur", "1.0", "blur strength r"),
    ("path", "hdfm", "path scheme"),
    ("n_samples", "2000", "generated points per cell"),
    ("sample_steps", "50", "Heun steps"),
    ("timing", "false", "record wall-clock seconds (breaks byte-identical reports)"),
];

const SPECTRUM: &[Key] = &[
    ("source", "textures", "'textures' or a directory of PGM/PPM images"),
    ("n_samples", "500", "samples averaged per curve"),
    ("crop", "32", "crop size for image directories"),
    ("grid_points", "40", "time grid size"),
    ("t_min", "0.01", "first grid time"),
    ("t_max", "0.99", "last grid time"),
    ("blur", "1.0", "blur strengths r"),
    ("schemes", "noise_fm,hdfm,pure_blur", "path schemes"),
    ("cutoff", "0.5", "low/high band edge as a fraction of Nyquist"),
    ("margin", "0.05", "one-sided margin for the ordering check"),
];

const TRAJ: &[Key] = &[
    ("particles", "100", "trajectories"),
    ("dim", "8", "ambient dimension of the embedded spiral"),
    ("points", "50", "states per analytic trajectory"),
    ("blur", "1.0", "blur strength r"),
    ("path", "hdfm", "path scheme of analytic trajectories"),
    ("track", "0,1", "coordinate pair, or 'full'"),
    ("checkpoint", "", "sample trajectories from this checkpoint instead"),
    ("sample_steps", "50", "sampler steps with a checkpoint"),
];

const TRAIN: &[Key] = &[
    ("data", "spiral", "'spiral' or an HDT1 tensor whose first axis indexes samples"),
    ("labels", "", "HDT1 tensor of integer class labels, one per sample"),
    ("dim", "2", "ambient dimension for spiral data"),
    ("head", "x", "prediction head: x, v or eps"),
    ("path", "hdfm", "path scheme"),
    ("hidden", "256", "hidden width"),
    ("layers", "5", "linear layers"),
    ("steps", "5000", "training steps"),
    ("batch", "256", "batch size"),
    ("lr", "0.001", "Adam learning rate"),
    ("cosine", "false", "cosine learning-rate decay"),
    ("blur", "1.0", "blur strength r"),
    ("train_eps", "0.05", "denominator clamp used in training"),
    ("layersync", "0", "LayerSync weight"),
    ("label_drop", "0.1", "probability of dropping a label to the null class"),
    ("log_every", "100", "loss logging interval"),
];

const SAMPLE: &[Key] = &[
    ("checkpoint", "", "checkpoint directory"),
    ("oracle", "", "HDT1 tensor of clean data used instead of a network"),
    ("path", "hdfm", "path scheme of the oracle"),
    ("n_samples", "16", "chains (an oracle with several rows sets its own)"),
    ("steps", "100", "integration steps"),
    ("solver", "heun", "euler or heun"),
    ("grid", "", "uniform or geometric; default depends on the path"),
    ("cfg_scale", "1.0", "guidance scale"),
    ("cfg_t_min", "0.1", "guidance interval start"),
    ("cfg_t_max", "0.9", "guidance interval end"),
    ("beta", "adaptive", "'adaptive' or a fixed beta"),
    ("class", "", "class label for conditional models"),
    ("blur", "1.0", "blur strength r"),
];

struct Spec {
    name: &'static str,
    about: &'static str,
    keys: &'static [Key],
    needs_seed: bool,
}

const COMMANDS: &[Spec] = &[
    Spec { name: "check", about: "Run the invariant suite", keys: CHECK, needs_seed: false },
    Spec { name: "toy", about: "Spiral-in-D comparison of x- and v-prediction", keys: TOY, needs_seed: true },
    Spec { name: "spectrum", about: "Frequency-ratio curves on analytic paths", keys: SPECTRUM, needs_seed: true },
    Spec { name: "traj", about: "Trajectory straightness in data and DCT space", keys: TRAJ, needs_seed: true },
    Spec { name: "train", about: "Train a model and write a checkpoint", keys: TRAIN, needs_seed: true },
    Spec { name: "sample", about: "Sample from a checkpoint or an oracle", keys: SAMPLE, needs_seed: true },
];

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn cli() -> Command {
    let mut cmd = Command::new("hdfm")
        .about("Heat dissipation flow matching workbench")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in COMMANDS {
        let mut sub = Command::new(spec.name).about(spec.about).arg(
            Arg::new("config").long("config").value_name("FILE").help("plain-text `key = value` settings"),
        );
        for (key, default, help) in SHARED.iter().chain(spec.keys) {
            let help = if default.is_empty() { help.to_string() } else { format!("{help} [default: {default}]") };
            sub = sub.arg(Arg::new(*key).long(flag(key)).value_name("VALUE").help(help).action(ArgAction::Set));
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Settings resolved from flags, then the config file, then defaults.
struct Settings {
    values: BTreeMap<&'static str, String>,
}

impl Settings {
    fn resolve(spec: &Spec, m: &ArgMatches) -> Result<Settings> {
        let keys: Vec<&Key> = SHARED.iter().chain(spec.keys).collect();
        let mut values = BTreeMap::new();
        for (key, default, _) in &keys {
            if !default.is_empty() {
                values.insert(*key, default.to_string());
            }
        }
        if let Some(path) = m.get_one::<String>("config") {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {path}: {e}")))?;
            for (k, v) in parse_config(&text)? {
                let key = keys
                    .iter()
                    .find(|(name, _, _)| *name == k)
                    .ok_or_else(|| usage(format!("unknown config key '{k}' for {}", spec.name)))?;
                values.insert(key.0, v);
            }
        }
        for (key, _, _) in &keys {
            if let Some(v) = m.get_one::<String>(key) {
                values.insert(*key, v.clone());
            }
        }
        Ok(Settings { values })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str()).filter(|s| !s.is_empty())
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key).ok_or_else(|| usage(format!("missing setting '{key}'")))?;
        raw.parse().map_err(|e| usage(format!("bad value '{raw}' for {key}: {e}")))
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.raw(key).map(|_| self.get(key)).transpose()
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key).unwrap_or("");
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| usage(format!("bad entry '{s}' in {key}: {e}"))))
            .collect()
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key).unwrap_or("false").to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" | "on" => Ok(true),
            "false" | "no" | "0" | "off" => Ok(false),
            other => Err(usage(format!("bad value '{other}' for {key}: expected true or false"))),
        }
    }
}

fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| usage(format!("config line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

/// Everything a command needs besides its own settings.
struct Ctx {
    seed: u64,
    out: PathBuf,
    exec: Exec,
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&matches) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(matches: &ArgMatches) -> Result<ExitCode> {
    let (name, sub) = matches.subcommand().ok_or_else(|| usage("missing command"))?;
    let spec = COMMANDS.iter().find(|s| s.name == name).ok_or_else(|| usage(format!("unknown command {name}")))?;
    let s = Settings::resolve(spec, sub)?;
    let seed = match s.opt::<u64>("seed")? {
        Some(v) => v,
        None if spec.needs_seed => return Err(usage(format!("{name} requires --seed"))),
        None => 0,
    };
    let workers: usize = s.get("workers")?;
    let out = PathBuf::from(s.get::<String>("out_dir")?);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ctx = Ctx { seed, out, exec: exec_for_workers(workers) };
    with_workers(workers, || match name {
        "check" => cmd_check(&s, &ctx),
        "toy" => cmd_toy(&s, &ctx),
        "spectrum" => cmd_spectrum(&s, &ctx),
        "traj" => cmd_traj(&s, &ctx),
        "train" => cmd_train(&s, &ctx),
        "sample" => cmd_sample(&s, &ctx),
        _ => Err(usage(format!("unknown command {name}"))),
    })
}

fn cmd_check(s: &Settings, ctx: &Ctx) -> Result<ExitCode> {
    let opts = CheckOptions {
        filter: s.opt("filter")?,
        fault: s.opt("inject_fault")?,
        seed: ctx.seed,
    };
    let results = run_checks(&opts).map_err(|e| usage(e.to_string()))?;
    for r in &results {
        println!("{r}");
    }
    write_report(&results, ctx.out.join("check_report.csv"))?;
    let failed: Vec<String> = results.iter().filter(|r| !r.passed()).map(|r| format!("{}::{}", r.module, r.name)).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{} of {} checks failed: {}", failed.len(), results.len(), failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn cmd_toy(s: &Settings, ctx: &Ctx) -> Result<ExitCode> {
    let base = ToyConfig::default();
    let seeds = match s.list::<u64>("seeds")? {
        v if v.is_empty() => (0..3).map(|i| ctx.seed + i).collect(),
        v => v,
    };
    let cfg = ToyConfig {
        dims: s.list("dims")?,
        heads: s.list("heads")?,
        seeds,
        blur_strength: s.get("blur")?,
        train_s_eps: s.get("train_eps")?,
        path: s.get("path")?,
        hidden: s.get("hidden")?,
        layers: s.get("layers")?,
        train: TrainConfig {
            steps: s.get("steps")?,
            batch_size: s.get("batch")?,
            lr: s.get("lr")?,
            cosine_decay: s.flag("cosine")?,
            ..base.train.clone()
        },
        dim_budgets: vec![DimBudget {
            min_dim: s.get("large_dim_from")?,
            steps: s.get("large_dim_steps")?,
            batch_size: s.get("large_dim_batch")?,
        }],
        sampler: SamplerConfig { steps: s.get("sample_steps")?, ..base.sampler.clone() },
        n_samples: s.get("n_samples")?,
        timing: s.flag("timing")?,
        exec: ctx.exec,
        ..base
    };
    let start = Instant::now();
    let rows = run_toy_comparison(&cfg)?;
    write_toy_report(&rows, &ctx.out)?;
    println!("{:>5} {:>4} {:>5} {:>14} {:>16}", "D", "head", "seed", "mean_offplane", "mean_spiral_dist");
    for r in &rows {
        println!(
            "{:>5} {:>4} {:>5} {:>14.4e} {:>16.4e}",
            r.dim, r.head, r.seed, r.metrics.mean_offplane, r.metrics.mean_spiral_dist
        );
    }
    let claims = evaluate_claims(&rows, cfg.spiral.jitter);
    let show = |name: &str, v: Option<String>| println!("{name}: {}", v.unwrap_or_else(|| "not evaluated".into()));
    show("low-D fit", claims.low_dim_fit.map(|(ok, x, v)| format!("{} (x {x:.4}, v {v:.4})", verdict(ok))));
    show("high-D x cleaner", claims.high_dim_x_cleaner.map(|(ok, x, v)| format!("{} (x {x:.4e}, v {v:.4e})", verdict(ok))));
    show("degradation", claims.degradation.map(|(ok, msg)| format!("{} ({msg})", verdict(ok))));
    println!("finished in {:.1}s; report in {}", start.elapsed().as_secs_f64(), ctx.out.display());
    Ok(ExitCode::SUCCESS)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "holds"
    } else {
        "does not hold"
    }
}

fn cmd_spectrum(s: &Settings, ctx: &Ctx) -> Result<ExitCode> {
    let n: usize = s.get("n_samples")?;
    let data = match s.get::<String>("source")?.as_str() {
        "textures" => TextureSpec::default().textures(derive_seed(ctx.seed, 0), n)?,
        dir => image_crops(dir, s.get("crop")?, n)?,
    };
    if data.is_empty() {
        bail!("no samples found");
    }
    let cfg = RatioConfig {
        schemes: s.list("schemes")?,
        blur_strengths: s.list("blur")?,
        times: uniform_grid(s.get("t_min")?, s.get("t_max")?, s.get("grid_points")?),
        cutoff: s.get("cutoff")?,
        seed: derive_seed(ctx.seed, 1),
        exec: ctx.exec,
        ..RatioConfig::default()
    };
    let curves = ratio_curves_analytic(&data, &cfg)?;
    for c in &curves {
        let path = ctx.out.join(c.file_name());
        c.write_csv(&path)?;
        println!("{} r={} start {:.4} end {:.4} -> {}", c.scheme, c.blur_strength, c.ratios[0], c.ratios[c.ratios.len() - 1], path.display());
    }
    if let Ok(claims) = evaluate_transport(&curves, s.get("margin")?) {
        println!(
            "ordering {}, start gap {:.2e}, r-sweep {}",
            verdict(claims.mid_ordering),
            claims.start_gap,
            verdict(claims.sweep_monotone)
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn tracking(s: &Settings) -> Result<Tracking> {
    let raw: String = s.get("track")?;
    if raw.eq_ignore_ascii_case("full") {
        return Ok(Tracking::Full);
    }
    match s.list::<usize>("track")?.as_slice() {
        [a, b] => Ok(Tracking::Pair(*a, *b)),
        _ => Err(usage(format!("track must be 'full' or two indices, got '{raw}'"))),
    }
}

fn cmd_traj(s: &Settings, ctx: &Ctx) -> Result<ExitCode> {
    let n: usize = s.get("particles")?;
    let track = tracking(s)?;
    let blur: f64 = s.get("blur")?;
    let report = match s.opt::<String>("checkpoint")? {
        None => {
            let dim: usize = s.get("dim")?;
            let sched = HeatSchedule::new(&[dim], blur)?;
            let times = uniform_grid(sched.t_floor(), 1.0, s.get("points")?);
            let paths = spiral_paths(n, dim, ctx.seed, &sched, s.get("path")?, &times)?;
            straightness_of_paths(&paths, track)?
        }
        Some(dir) => {
            let model = checkpoint_load(&dir).with_context(|| format!("loading checkpoint {dir}"))?;
            let sched = HeatSchedule::new(&model.config().shape, blur)?;
            let kind = model.config().path;
            let trajs = (0..n)
                .map(|i| {
                    let cfg = SamplerConfig {
                        steps: s.get("sample_steps")?,
                        cfg_scale: 1.0,
                        seed: derive_seed(ctx.seed, i as u64),
                        keep_states: true,
                        ..SamplerConfig::default()
                    };
                    Ok(sample(&model, &cfg, &sched, None, kind)?.1)
                })
                .collect::<Result<Vec<_>>>()?;
            straightness(&trajs, track)?
        }
    };
    let path = ctx.out.join("straightness.csv");
    report.write_csv(&path)?;
    println!("mean chord/arc: data {:.6}, dct {:.6} -> {}", report.mean_data, report.mean_dct, path.display());
    Ok(ExitCode::SUCCESS)
}

/// Splits a tensor whose first axis indexes samples into a field shape and rows.
fn tensor_rows(t: &Tensor) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let dims = t.dims();
    if dims.len() < 2 {
        bail!("expected a tensor of shape (samples, ...), got {dims:?}");
    }
    let shape = dims[1..].to_vec();
    let len: usize = shape.iter().product();
    let rows = t.to_f64().chunks(len.max(1)).map(|c| c.to_vec()).collect();
    Ok((shape, rows))
}

fn cmd_train(s: &Settings, ctx: &Ctx) -> Result<ExitCode> {
    let (shape, rows) = match s.get::<String>("data")?.as_str() {
        "spiral" => {
            let dim: usize = s.get("dim")?;
            let emb = make_embedding(dim, derive_seed(ctx.seed, 1))?;
            let x = emb.embed(&SpiralSpec::default().sample(&mut rng_from_seed(derive_seed(ctx.seed, 2))));
            (vec![dim], x.rows().into_iter().map(|r| r.to_vec()).collect())
        }
        file => tensor_rows(&read_tensor(file).with_context(|| format!("reading {file}"))?)?,
    };
    let labels: Option<Vec<usize>> = match s.opt::<String>("labels")? {
        None => None,
        Some(file) => {
            let t = read_tensor(&file).with_context(|| format!("reading {file}"))?;
            let l = t
                .to_f64()
                .iter()
                .map(|&v| if v >= 0.0 && v.fract() == 0.0 { Ok(v as usize) } else { Err(anyhow!("label {v} is not a class index")) })
                .collect::<Result<Vec<_>>>()?;
            Some(l)
        }
    };
    let classes = labels.as_ref().map_or(0, |l| l.iter().max().map_or(0, |m| m + 1));
    let data = RowDataset::new(&shape, rows_of(&rows), labels)?;
    let head: Head = s.get("head")?;
    let config = MlpConfig {
        hidden: s.get("hidden")?,
        layers: s.get("layers")?,
        num_classes: classes,
        path: s.get("path")?,
        ..MlpConfig::new(&shape, head)
    };
    let model = MlpModel::new(config, &mut rng_from_seed(derive_seed(ctx.seed, 5)))?;
    let sched = HeatSchedule::new(&shape, s.get("blur")?)?.with_s_eps(s.get("train_eps")?)?;
    let ckpt = ctx.out.join("checkpoint");
    let cfg = TrainConfig {
        steps: s.get("steps")?,
        batch_size: s.get("batch")?,
        lr: s.get("lr")?,
        cosine_decay: s.flag("cosine")?,
        layersync_weight: s.get("layersync")?,
        label_drop: s.get("label_drop")?,
        log_every: s.get("log_every")?,
        time_scheme: TimeScheme::uniform(sched.t_floor()),
        seed: derive_seed(ctx.seed, 6),
        exec: ctx.exec,
        checkpoint: Some(ckpt.clone()),
        ..TrainConfig::default()
    };
    if cfg.steps == 0 {
        return Err(usage("steps must be at least 1"));
    }
    let outcome = train(model, &data, &sched, &cfg)?;
    let curve: Vec<Vec<String>> = outcome
        .curve
        .iter()
        .map(|(step, r)| vec![step.to_string(), fmt_f64(r.velocity), fmt_f64(r.layersync), fmt_f64(r.total), fmt_f64(r.grad_norm)])
        .collect();
    write_csv(ctx.out.join("loss.csv"), &["step", "velocity", "layersync", "total", "grad_norm"], &curve)?;
    if let Some((step, r)) = outcome.curve.last() {
        println!("step {step}: loss {:.4e}", r.total);
    }
    println!("checkpoint written to {}", ckpt.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_sample(s: &Settings, ctx: &Ctx) -> Result<ExitCode> {
    let blur: f64 = s.get("blur")?;
    let class: Option<usize> = s.opt("class")?;
    let mut cfg = SamplerConfig {
        steps: s.get("steps")?,
        solver: s.get::<Solver>("solver")?,
        cfg_scale: s.get("cfg_scale")?,
        cfg_interval: (s.get("cfg_t_min")?, s.get("cfg_t_max")?),
        beta_mode: s.get::<BetaMode>("beta")?,
        seed: ctx.seed,
        grid: s.opt::<TimeGrid>("grid")?,
        ..SamplerConfig::default()
    };
    let (source, shape, kind, oracle_rows): (Box<dyn VelocitySource>, Vec<usize>, PathKind, Vec<Vec<f64>>) =
        match (s.opt::<String>("checkpoint")?, s.opt::<String>("oracle")?) {
            (Some(_), Some(_)) => return Err(usage("give either a checkpoint or an oracle, not both")),
            (Some(dir), None) => {
                let model = checkpoint_load(&dir).with_context(|| format!("loading checkpoint {dir}"))?;
                let shape = model.config().shape.clone();
                let kind = model.config().path;
                (Box::new(model), shape, kind, Vec::new())
            }
            (None, Some(file)) => {
                let (shape, rows) = tensor_rows(&read_tensor(&file).with_context(|| format!("reading {file}"))?)?;
                let kind: PathKind = s.get("path")?;
                let oracle = Oracle::from_rows(&shape, rows_of(&rows), kind)?;
                (Box::new(oracle), shape, kind, rows)
            }
            (None, None) => return Err(usage("sample requires --checkpoint (or --oracle FILE)")),
        };
    let sched = HeatSchedule::new(&shape, blur)?;
    let n = if oracle_rows.len() > 1 { oracle_rows.len() } else { s.get("n_samples")? };
    let (samples, traj) = if kind == PathKind::PureBlur {
        if oracle_rows.is_empty() {
            bail!("pure-blur sampling needs an oracle to provide the blurred start");
        }
        let mut out = Vec::with_capacity(oracle_rows.len());
        let mut first = None;
        for row in &oracle_rows {
            let x = GridField::new(shape.clone(), row.clone())?;
            let single = Oracle::new(&x, kind);
            let (start, _) = heat_endpoint(&x, sched.t_floor(), &sched)?;
            let (z, tr) = sample_pure_blur(&single, &cfg, &sched, &start)?;
            out.push(z.into_data());
            first.get_or_insert(tr);
        }
        (out, first.ok_or_else(|| anyhow!("no oracle rows"))?)
    } else {
        let y = vec![class; n];
        let rows = sample_batch(source.as_ref(), &cfg, &sched, &y, kind, ctx.exec)?;
        cfg.steps = cfg.steps.max(1);
        let first = if oracle_rows.len() > 1 {
            let x = GridField::new(shape.clone(), oracle_rows[0].clone())?;
            sample(&Oracle::new(&x, kind), &cfg, &sched, class, kind)?.1
        } else {
            sample(source.as_ref(), &cfg, &sched, class, kind)?.1
        };
        (rows.rows().into_iter().map(|r| r.to_vec()).collect(), first)
    };
    let mut dims = vec![samples.len()];
    dims.extend_from_slice(&shape);
    let flat: Vec<f64> = samples.iter().flatten().copied().collect();
    write_tensor(ctx.out.join("samples.hdt"), &Tensor::from_f64(dims, flat)?)?;
    traj.write_csv(ctx.out.join("trajectory.csv"))?;
    if matches!(shape.as_slice(), [_, _] | [_, _, 1] | [_, _, 3]) {
        let ext = if shape.get(2) == Some(&3) { "ppm" } else { "pgm" };
        let img_shape: Vec<usize> = if shape.get(2) == Some(&1) { shape[..2].to_vec() } else { shape.clone() };
        for (i, row) in samples.iter().enumerate() {
            let img = GridField::new(img_shape.clone(), row.iter().map(|v| 0.5 * (v + 1.0)).collect())?;
            write_pnm(ctx.out.join(format!("sample_{i:03}.{ext}")), &img)?;
        }
    }
    println!("{} samples of shape {shape:?} written to {}", samples.len(), ctx.out.display());
    Ok(ExitCode::SUCCESS)
}

fn rows_of(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}
