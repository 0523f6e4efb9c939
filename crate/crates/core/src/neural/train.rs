//! Velocity regression, LayerSync, Adam and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng as _;

use super::heads::{assemble_velocity_rows, output_vjp};
use super::{Head, Linear, MlpConfig, MlpModel, Params};
use crate::error::{invalid, Error, Result};
use crate::io::{read_tensor, write_tensor, Tensor};
use crate::par::Exec;
use crate::path::{draw_time, sample_path_batch, NoiseConfig, PathBatch, TimeScheme};
use crate::spectral::{HeatSchedule, DEFAULT_T_FLOOR};
use crate::{rng_from_seed, Rng};

/// Loss above which training is considered diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub velocity: f64,
    pub layersync: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Cosine decay of the learning rate to zero over `steps`.
    pub cosine_decay: bool,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub layersync_weight: f64,
    pub weak_layer: usize,
    pub strong_layer: usize,
    /// Probability of replacing a label by the null class.
    pub label_drop: f64,
    pub time_scheme: TimeScheme,
    pub noise: NoiseConfig,
    pub log_every: usize,
    pub seed: u64,
    pub exec: Exec,
    /// Directory to write the final checkpoint to.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            cosine_decay: false,
            batch_size: 256,
            steps: 5000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            layersync_weight: 0.0,
            weak_layer: 0,
            strong_layer: 2,
            label_drop: 0.1,
            time_scheme: TimeScheme::uniform(DEFAULT_T_FLOOR),
            noise: NoiseConfig::default(),
            log_every: 100,
            seed: 0,
            exec: Exec::Sequential,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(invalid("batch size and logging interval must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(invalid("Adam moments must lie in [0, 1) with a positive eps"));
        }
        if !(self.layersync_weight >= 0.0) {
            return Err(invalid("LayerSync weight must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.label_drop) {
            return Err(invalid("label drop probability must lie in [0, 1]"));
        }
        self.time_scheme.validate()
    }
}

/// `1 - mean_b cos(weak_b, P strong_b)` with the strong branch detached.
///
/// Returns the loss and its gradient with respect to `weak`. A `projection`
/// (`weak width x strong width`) is required when the widths differ.
pub fn layersync_loss(weak: &Array2<f64>, strong: &Array2<f64>, projection: Option<&Array2<f64>>) -> Result<(f64, Array2<f64>)> {
    if weak.nrows() != strong.nrows() || weak.nrows() == 0 {
        return Err(Error::ShapeMismatch { expected: vec![weak.nrows()], got: vec![strong.nrows()] });
    }
    let target = match projection {
        Some(p) if p.dim() == (weak.ncols(), strong.ncols()) => strong.dot(&p.t()),
        Some(p) => return Err(Error::ShapeMismatch { expected: vec![weak.ncols(), strong.ncols()], got: p.shape().to_vec() }),
        None if weak.ncols() == strong.ncols() => strong.clone(),
        None => return Err(invalid("LayerSync widths differ and no projection was given")),
    };
    let b = weak.nrows() as f64;
    let mut grad = Array2::zeros(weak.raw_dim());
    let mut cos_sum = 0.0;
    for ((a, s), mut g) in weak.outer_iter().zip(target.outer_iter()).zip(grad.outer_iter_mut()) {
        let na = a.dot(&a).sqrt();
        let ns = s.dot(&s).sqrt();
        if na == 0.0 || ns == 0.0 {
            continue;
        }
        let cos = a.dot(&s) / (na * ns);
        cos_sum += cos;
        // d cos / da = s / (|a||s|) - cos a / |a|²
        g.assign(&((&s / (na * ns) - &a * (cos / (na * na))) * (-1.0 / b)));
    }
    Ok((1.0 - cos_sum / b, grad))
}

/// LayerSync on cached hidden activations, `weak < strong`.
pub fn layersync_from_cache(cache: &super::ForwardCache, weak: usize, strong: usize) -> Result<(f64, Array2<f64>)> {
    if weak >= strong || strong >= cache.num_hidden() {
        return Err(invalid(format!(
            "LayerSync needs weak < strong < {} hidden layers, got ({weak}, {strong})",
            cache.num_hidden()
        )));
    }
    layersync_loss(cache.hidden(weak).expect("checked"), cache.hidden(strong).expect("checked"), None)
}

/// Mean squared velocity error over all entries, plus the LayerSync term.
pub fn loss_and_grad(model: &MlpModel, batch: &PathBatch, sched: &HeatSchedule, cfg: &TrainConfig) -> Result<(LossReport, Params)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    model.check_schedule(sched)?;
    // the null-class index stands for "no label"
    let classes = model.config().num_classes;
    let y: Vec<Option<usize>> = match &batch.labels {
        Some(l) if classes > 0 => l.iter().map(|&c| (c != classes).then_some(c)).collect(),
        _ => vec![None; batch.len()],
    };
    let cache = model.forward(&batch.z, &batch.t, &y)?;
    let cfgm = model.config();
    let v = assemble_velocity_rows(sched, cfgm.path, cfgm.head, &cache.output, &batch.z, &batch.t, cfg.exec)?;
    let resid = v - &batch.v_star;
    let count = resid.len() as f64;
    let velocity = resid.iter().map(|r| r * r).sum::<f64>() / count;
    if !velocity.is_finite() {
        return Err(Error::NonFinite("velocity loss".into()));
    }
    let grad_v = resid * (2.0 / count);
    let grad_raw = output_vjp(sched, cfgm.path, cfgm.head, &grad_v, &batch.t, cfg.exec)?;

    let mut extra: Vec<Option<Array2<f64>>> = vec![None; cache.num_hidden()];
    let mut layersync = 0.0;
    if cfg.layersync_weight > 0.0 {
        let (ls, g) = layersync_from_cache(&cache, cfg.weak_layer, cfg.strong_layer)?;
        layersync = ls;
        extra[cfg.weak_layer] = Some(g * cfg.layersync_weight);
    }
    let grads = model.backward(&cache, &grad_raw, &extra);
    let report = LossReport {
        velocity,
        layersync,
        total: velocity + cfg.layersync_weight * layersync,
        grad_norm: grads.norm_sq().sqrt(),
    };
    Ok((report, grads))
}

/// Largest relative gap between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub max_rel: f64,
    pub worst_block: String,
    pub coords_checked: usize,
}

fn labels_of(m: &MlpModel, b: &PathBatch) -> Vec<Option<usize>> {
    let n = m.config().num_classes;
    match &b.labels {
        Some(l) if n > 0 => l.iter().map(|&c| (c != n).then_some(c)).collect(),
        _ => vec![None; b.len()],
    }
}

/// The objective with the strong LayerSync branch frozen at `anchor`'s activations.
fn frozen_objective(m: &MlpModel, anchor: &MlpModel, b: &PathBatch, s: &HeatSchedule, c: &TrainConfig) -> Result<f64> {
    let velocity = loss_and_grad(m, b, s, &TrainConfig { layersync_weight: 0.0, ..c.clone() })?.0.velocity;
    if c.layersync_weight == 0.0 {
        return Ok(velocity);
    }
    let y = labels_of(m, b);
    let hidden = |model: &MlpModel, k: usize| -> Result<Array2<f64>> {
        let cache = model.forward(&b.z, &b.t, &y)?;
        cache.hidden(k).cloned().ok_or_else(|| invalid(format!("no hidden layer {k}")))
    };
    let strong = hidden(anchor, c.strong_layer)?;
    let weak = hidden(m, c.weak_layer)?;
    Ok(velocity + c.layersync_weight * layersync_loss(&weak, &strong, None)?.0)
}

/// Compares [`loss_and_grad`] with central differences (step `1e-5`) on up to
/// `per_block` seeded coordinates of every parameter block.
pub fn gradient_check(
    model: &MlpModel,
    batch: &PathBatch,
    sched: &HeatSchedule,
    cfg: &TrainConfig,
    per_block: usize,
    seed: u64,
) -> Result<GradientCheck> {
    let (_, grads) = loss_and_grad(model, batch, sched, cfg)?;
    let h = 1e-5;
    let mut rng = rng_from_seed(seed);
    let names: Vec<(String, usize)> = model.params().blocks().iter().map(|(n, _, v)| (n.clone(), v.len())).collect();
    let grad_blocks = grads.blocks();
    let mut out = GradientCheck { max_rel: 0.0, worst_block: String::new(), coords_checked: 0 };
    for (b, (name, len)) in names.iter().enumerate() {
        let coords: Vec<usize> = if *len <= per_block {
            (0..*len).collect()
        } else {
            (0..per_block).map(|_| rng.random_range(0..*len)).collect()
        };
        for &k in &coords {
            let mut plus = model.clone();
            plus.params_mut().blocks_mut()[b].1[k] += h;
            let mut minus = model.clone();
            minus.params_mut().blocks_mut()[b].1[k] -= h;
            let fd = (frozen_objective(&plus, model, batch, sched, cfg)? - frozen_objective(&minus, model, batch, sched, cfg)?) / (2.0 * h);
            let an = grad_blocks[b].2[k];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            if rel > out.max_rel || out.worst_block.is_empty() {
                out.max_rel = out.max_rel.max(rel);
                out.worst_block = name.clone();
            }
            out.coords_checked += 1;
        }
    }
    Ok(out)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Params,
    v: Params,
    step: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &Params, cfg: &TrainConfig) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn update(&mut self, params: &mut Params, grads: &Params) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let g_blocks = grads.blocks();
        for ((((_, p), (_, m)), (_, v)), (_, _, g)) in params
            .blocks_mut()
            .into_iter()
            .zip(self.m.blocks_mut())
            .zip(self.v.blocks_mut())
            .zip(g_blocks)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Source of clean training data.
pub trait Dataset {
    fn shape(&self) -> &[usize];

    /// `n` data rows and optional labels.
    fn sample_batch(&self, rng: &mut Rng, n: usize) -> (Array2<f64>, Option<Vec<usize>>);
}

/// Fixed rows drawn uniformly with replacement, with optional labels.
#[derive(Debug, Clone)]
pub struct RowDataset {
    shape: Vec<usize>,
    rows: Array2<f64>,
    labels: Option<Vec<usize>>,
}

impl RowDataset {
    pub fn new(shape: &[usize], rows: Array2<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch { expected: shape.to_vec(), got: vec![rows.nrows(), rows.ncols()] });
        }
        if labels.as_ref().is_some_and(|l| l.len() != rows.nrows()) {
            return Err(invalid("one label per row is required"));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training rows".into()));
        }
        Ok(RowDataset { shape: shape.to_vec(), rows, labels })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }
}

impl Dataset for RowDataset {
    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn sample_batch(&self, rng: &mut Rng, n: usize) -> (Array2<f64>, Option<Vec<usize>>) {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.rows.nrows())).collect();
        let mut x = Array2::zeros((n, self.rows.ncols()));
        for (mut row, &i) in x.rows_mut().into_iter().zip(&idx) {
            row.assign(&self.rows.row(i));
        }
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        (x, labels)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    /// `(step, report)` at every logging interval and the final step.
    pub curve: Vec<(usize, LossReport)>,
}

/// Draws one training batch from `data`.
pub fn draw_batch(
    data: &dyn Dataset,
    rng: &mut Rng,
    sched: &HeatSchedule,
    model: &MlpConfig,
    cfg: &TrainConfig,
) -> Result<PathBatch> {
    let (x, labels) = data.sample_batch(rng, cfg.batch_size);
    let t: Vec<f64> = (0..cfg.batch_size).map(|_| draw_time(rng, &cfg.time_scheme)).collect();
    let e = cfg.noise.draw_rows(rng, cfg.batch_size, x.ncols());
    let labels = match (labels, model.num_classes) {
        (Some(l), n) if n > 0 => Some(
            l.into_iter()
                .map(|c| if rng.random::<f64>() < cfg.label_drop { n } else { c })
                .collect(),
        ),
        _ => None,
    };
    sample_path_batch(&x, &t, &e, labels, sched, model.path, cfg.exec)
}

/// Runs `cfg.steps` Adam steps. Zero steps return the model untouched.
pub fn train(model: MlpModel, data: &dyn Dataset, sched: &HeatSchedule, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.check_schedule(sched)?;
    if data.shape() != model.config().shape.as_slice() {
        return Err(Error::ShapeMismatch { expected: model.config().shape.clone(), got: data.shape().to_vec() });
    }
    let mut model = model;
    let mut curve = Vec::new();
    let mut rng = rng_from_seed(cfg.seed);
    let mut adam = Adam::new(model.params(), cfg);
    for step in 0..cfg.steps {
        let batch = draw_batch(data, &mut rng, sched, model.config(), cfg)?;
        let (report, grads) = loss_and_grad(&model, &batch, sched, cfg)?;
        if !report.total.is_finite() || report.total > DIVERGENCE_LOSS {
            return Err(Error::Diverged { step, loss: report.total });
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push((step, report));
        }
        if cfg.cosine_decay {
            let frac = step as f64 / cfg.steps as f64;
            adam.set_lr(cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
        }
        adam.update(model.params_mut(), &grads);
    }
    if let Some(dir) = &cfg.checkpoint {
        checkpoint_save(&model, dir)?;
    }
    Ok(TrainOutcome { model, curve })
}

const MANIFEST: &str = "manifest.txt";

/// Writes `manifest.txt` plus one `HDT1` file per parameter block.
pub fn checkpoint_save(model: &MlpModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let c = model.config();
    let mut m = String::from("hdfm-checkpoint 1\n");
    let shape: Vec<String> = c.shape.iter().map(|d| d.to_string()).collect();
    let _ = writeln!(m, "shape {}", shape.join(" "));
    let _ = writeln!(m, "hidden {}\nlayers {}\ntime_dim {}", c.hidden, c.layers, c.time_dim);
    let _ = writeln!(m, "num_classes {}\nclass_dim {}", c.num_classes, c.class_dim);
    let _ = writeln!(m, "head {}\npath {}", c.head, c.path);
    for (name, dims, data) in model.params().blocks() {
        let dims_s: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(m, "block {name} {}", dims_s.join(" "));
        write_tensor(dir.join(format!("{name}.hdt")), &Tensor::from_f64(dims, data.to_vec())?)?;
    }
    fs::write(dir.join(MANIFEST), m)?;
    Ok(())
}

pub fn checkpoint_load(dir: impl AsRef<Path>) -> Result<MlpModel> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut lines = text.lines();
    if lines.next() != Some("hdfm-checkpoint 1") {
        return Err(Error::Format("not an hdfm checkpoint manifest".into()));
    }
    let mut config = MlpConfig::new(&[1], Head::X);
    let mut blocks: Vec<(String, Vec<usize>)> = Vec::new();
    let bad = |l: &str| Error::Format(format!("bad manifest line '{l}'"));
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let key = parts.next().ok_or_else(|| bad(line))?;
        let rest: Vec<&str> = parts.collect();
        let nums = |v: &[&str]| v.iter().map(|s| s.parse::<usize>().map_err(|_| bad(line))).collect::<Result<Vec<_>>>();
        let one = |v: &[&str]| -> Result<usize> {
            match nums(v)?.as_slice() {
                [n] => Ok(*n),
                _ => Err(bad(line)),
            }
        };
        match key {
            "shape" => config.shape = nums(&rest)?,
            "hidden" => config.hidden = one(&rest)?,
            "layers" => config.layers = one(&rest)?,
            "time_dim" => config.time_dim = one(&rest)?,
            "num_classes" => config.num_classes = one(&rest)?,
            "class_dim" => config.class_dim = one(&rest)?,
            "head" => config.head = rest.first().ok_or_else(|| bad(line))?.parse()?,
            "path" => config.path = rest.first().ok_or_else(|| bad(line))?.parse()?,
            "block" => {
                let (name, dims) = rest.split_first().ok_or_else(|| bad(line))?;
                blocks.push((name.to_string(), nums(dims)?));
            }
            _ => return Err(bad(line)),
        }
    }
    config.validate()?;
    let load = |name: &str, dims: &[usize]| -> Result<Vec<f64>> {
        let listed = blocks
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("manifest lacks block {name}")))?;
        let t = read_tensor(dir.join(format!("{name}.hdt")))?;
        if listed.1 != dims || t.dims() != dims {
            return Err(Error::ShapeMismatch { expected: dims.to_vec(), got: t.dims().to_vec() });
        }
        Ok(t.to_f64())
    };
    let mut layers = Vec::new();
    for (i, (fan_in, fan_out)) in config.layer_dims().into_iter().enumerate() {
        let w = load(&format!("layer{i}.w"), &[fan_out, fan_in])?;
        let b = load(&format!("layer{i}.b"), &[fan_out])?;
        layers.push(Linear {
            w: Array2::from_shape_vec((fan_out, fan_in), w).expect("checked shape"),
            b: Array1::from(b),
        });
    }
    let class_table = if config.num_classes > 0 {
        let dims = [config.num_classes + 1, config.class_dim];
        Some(Array2::from_shape_vec((dims[0], dims[1]), load("class_table", &dims)?).expect("checked shape"))
    } else {
        None
    };
    MlpModel::from_params(config, Params { layers, class_table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::{sample_path, PathKind, PathSample};

    struct Points {
        shape: Vec<usize>,
        rows: Vec<Vec<f64>>,
        labels: Option<Vec<usize>>,
    }

    impl Dataset for Points {
        fn shape(&self) -> &[usize] {
            &self.shape
        }

        fn sample_batch(&self, rng: &mut Rng, n: usize) -> (Array2<f64>, Option<Vec<usize>>) {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.rows.len())).collect();
            let d = self.shape.iter().product();
            let x = Array2::from_shape_fn((n, d), |(i, j)| self.rows[idx[i]][j]);
            let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
            (x, labels)
        }
    }

    fn spiral_points(n: usize, seed: u64) -> Points {
        let mut rng = rng_from_seed(seed);
        let rows = (0..n)
            .map(|_| {
                let th = rng.random_range(0.0..4.0 * std::f64::consts::PI);
                let r = 0.1 + 0.08 * th;
                vec![r * th.cos(), r * th.sin()]
            })
            .collect();
        Points { shape: vec![2], rows, labels: None }
    }

    fn small_model(shape: &[usize], head: Head, classes: usize, seed: u64) -> MlpModel {
        let cfg = MlpConfig { hidden: 16, layers: 3, time_dim: 8, num_classes: classes, class_dim: 3, ..MlpConfig::new(shape, head) };
        let mut m = MlpModel::new(cfg, &mut rng_from_seed(seed)).unwrap();
        // break the zero output layer so every block receives gradient
        let mut rng = rng_from_seed(seed + 1);
        m.params_mut().layers.last_mut().unwrap().w.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        m
    }

    fn batch_for(shape: &[usize], n: usize, kind: PathKind, classes: usize, seed: u64) -> (PathBatch, HeatSchedule) {
        let mut rng = rng_from_seed(seed);
        let sched = HeatSchedule::new(shape, 1.0).unwrap();
        let noise = NoiseConfig::default();
        let samples: Vec<PathSample> = (0..n)
            .map(|i| {
                let x = noise.draw(&mut rng, shape).unwrap().scale(0.5);
                let e = noise.draw(&mut rng, shape).unwrap();
                let t = 0.05 + 0.9 * rng.random::<f64>();
                let mut p = sample_path(&x, t, &e, &sched, kind).unwrap();
                p.label = (classes > 0).then_some(i % (classes + 1));
                p
            })
            .collect();
        (PathBatch::from_samples(&samples).unwrap(), sched)
    }

    fn check_gradients(model: &MlpModel, batch: &PathBatch, sched: &HeatSchedule, cfg: &TrainConfig, seed: u64) {
        let r = gradient_check(model, batch, sched, cfg, 50, seed).unwrap();
        assert!(r.max_rel < 1e-4, "{}: rel {}", r.worst_block, r.max_rel);
    }

    #[test]
    fn gradients_match_finite_differences_for_every_head() {
        for (i, head) in [Head::X, Head::V, Head::Eps].into_iter().enumerate() {
            let model = small_model(&[8], head, 0, 20 + i as u64);
            let (batch, sched) = batch_for(&[8], 6, PathKind::Hdfm, 0, 30 + i as u64);
            check_gradients(&model, &batch, &sched, &TrainConfig::default(), 40 + i as u64);
        }
    }

    #[test]
    fn gradients_with_classes_layersync_and_2d_fields() {
        let model = small_model(&[4, 3], Head::X, 3, 50);
        let (batch, sched) = batch_for(&[4, 3], 5, PathKind::Hdfm, 3, 51);
        let cfg = TrainConfig { layersync_weight: 0.7, weak_layer: 0, strong_layer: 1, ..TrainConfig::default() };
        check_gradients(&model, &batch, &sched, &cfg, 52);
    }

    #[test]
    fn pure_blur_gradients() {
        let mut model = small_model(&[6], Head::X, 0, 60);
        let mut cfg = model.config().clone();
        cfg.path = PathKind::PureBlur;
        model = MlpModel::from_params(cfg, model.params().clone()).unwrap();
        let (batch, sched) = batch_for(&[6], 4, PathKind::PureBlur, 0, 61);
        check_gradients(&model, &batch, &sched, &TrainConfig::default(), 62);
    }

    #[test]
    fn oracle_output_has_zero_loss_and_lambda_zero_gives_velocity_loss() {
        let model = small_model(&[8], Head::V, 0, 70);
        let (mut batch, sched) = batch_for(&[8], 4, PathKind::Hdfm, 0, 71);
        let out = model.forward(&batch.z, &batch.t, &[None; 4]).unwrap().output;
        batch.v_star = out;
        let (r, _) = loss_and_grad(&model, &batch, &sched, &TrainConfig::default()).unwrap();
        assert_eq!(r.velocity, 0.0);
        assert_eq!(r.total, r.velocity);
    }

    #[test]
    fn total_is_velocity_plus_weighted_layersync() {
        let model = small_model(&[8], Head::X, 0, 72);
        let (batch, sched) = batch_for(&[8], 4, PathKind::Hdfm, 0, 73);
        let cfg = TrainConfig { layersync_weight: 0.25, weak_layer: 0, strong_layer: 1, ..TrainConfig::default() };
        let (r, _) = loss_and_grad(&model, &batch, &sched, &cfg).unwrap();
        assert!(r.layersync > 0.0);
        assert_eq!(r.total, r.velocity + 0.25 * r.layersync);
    }

    #[test]
    fn layersync_examples() {
        let a = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
        let (l, _) = layersync_loss(&a, &a, None).unwrap();
        assert!(l.abs() < 1e-15);
        let u = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let v = Array2::from_shape_vec((1, 2), vec![0.0, 3.0]).unwrap();
        assert_eq!(layersync_loss(&u, &v, None).unwrap().0, 1.0);
        let wide = Array2::zeros((1, 5));
        assert!(layersync_loss(&u, &wide, None).is_err());
        let p = Array2::from_shape_fn((2, 5), |(i, j)| (i + j) as f64);
        assert!(layersync_loss(&u, &wide, Some(&p)).is_ok());
    }

    #[test]
    fn layersync_leaves_the_strong_branch_without_gradient() {
        let cfg = MlpConfig { hidden: 12, layers: 4, time_dim: 8, ..MlpConfig::new(&[8], Head::X) };
        let model = MlpModel::new(cfg, &mut rng_from_seed(80)).unwrap();
        let (batch, _) = batch_for(&[8], 5, PathKind::Hdfm, 0, 81);
        let cache = model.forward(&batch.z, &batch.t, &[None; 5]).unwrap();
        let (_, g) = layersync_from_cache(&cache, 0, 2).unwrap();
        let zero_out = Array2::zeros(cache.output.raw_dim());
        let grads = model.backward(&cache, &zero_out, &[Some(g), None, None]);
        // layers 1..=3 sit above the weak layer and see nothing from this term
        for l in &grads.layers[1..] {
            assert!(l.w.iter().all(|&v| v == 0.0) && l.b.iter().all(|&v| v == 0.0));
        }
        assert!(grads.layers[0].w.iter().any(|&v| v != 0.0));
        assert!(layersync_from_cache(&cache, 2, 1).is_err());
        assert!(layersync_from_cache(&cache, 0, 3).is_err());
    }

    #[test]
    fn zero_steps_leave_the_model_unchanged() {
        let data = spiral_points(100, 1);
        let cfg = MlpConfig { hidden: 16, layers: 3, ..MlpConfig::new(&[2], Head::X) };
        let model = MlpModel::new(cfg, &mut rng_from_seed(2)).unwrap();
        let sched = HeatSchedule::new(&[2], 1.0).unwrap();
        let out = train(model.clone(), &data, &sched, &TrainConfig { steps: 0, ..TrainConfig::default() }).unwrap();
        assert_eq!(out.model, model);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let data = spiral_points(200, 3);
        let cfg = MlpConfig { hidden: 16, layers: 3, ..MlpConfig::new(&[2], Head::V) };
        let sched = HeatSchedule::new(&[2], 1.0).unwrap();
        let tc = TrainConfig { steps: 20, batch_size: 16, log_every: 5, seed: 4, ..TrainConfig::default() };
        let run = || {
            let model = MlpModel::new(cfg.clone(), &mut rng_from_seed(5)).unwrap();
            train(model, &data, &sched, &tc).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model, b.model);
        assert_eq!(a.curve.len(), 5);
    }

    #[test]
    fn spiral_x_prediction_learns() {
        let data = spiral_points(10_000, 6);
        let cfg = MlpConfig { hidden: 64, layers: 4, ..MlpConfig::new(&[2], Head::X) };
        let sched = HeatSchedule::new(&[2], 1.0).unwrap();
        let model = MlpModel::new(cfg, &mut rng_from_seed(7)).unwrap();
        let tc = TrainConfig { steps: 5000, batch_size: 128, log_every: 1, seed: 8, ..TrainConfig::default() };
        let out = train(model.clone(), &data, &sched, &tc).unwrap();
        // the per-batch loss is heavy-tailed in 1/s(t), so compare on a fixed evaluation batch
        let mut rng = rng_from_seed(9);
        let eval = draw_batch(&data, &mut rng, &sched, model.config(), &TrainConfig { batch_size: 4096, ..tc.clone() }).unwrap();
        let before = loss_and_grad(&model, &eval, &sched, &tc).unwrap().0.velocity;
        let after = loss_and_grad(&out.model, &eval, &sched, &tc).unwrap().0.velocity;
        assert!(after < 0.1 * before, "before {before}, after {after}");
    }

    #[test]
    fn divergence_aborts() {
        let data = Points { shape: vec![2], rows: vec![vec![1e4, -1e4]], labels: None };
        let cfg = MlpConfig { hidden: 8, layers: 2, ..MlpConfig::new(&[2], Head::V) };
        let sched = HeatSchedule::new(&[2], 1.0).unwrap();
        let model = MlpModel::new(cfg, &mut rng_from_seed(1)).unwrap();
        let r = train(model, &data, &sched, &TrainConfig { steps: 3, batch_size: 4, ..TrainConfig::default() });
        assert!(matches!(r, Err(Error::Diverged { step: 0, .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model(&[3, 2], Head::Eps, 4, 90);
        checkpoint_save(&model, dir.path()).unwrap();
        let back = checkpoint_load(dir.path()).unwrap();
        assert_eq!(back, model);
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(manifest.contains("block layer0.w 16 17"));
        fs::write(dir.path().join("layer1.b.hdt"), b"HDT0").unwrap();
        assert!(checkpoint_load(dir.path()).is_err());
    }

    #[test]
    fn labels_are_dropped_to_the_null_class() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 * 0.01, 0.0]).collect();
        let data = Points { shape: vec![2], rows, labels: Some(vec![1; 50]) };
        let cfg = MlpConfig { hidden: 8, layers: 2, num_classes: 2, class_dim: 2, ..MlpConfig::new(&[2], Head::X) };
        let sched = HeatSchedule::new(&[2], 1.0).unwrap();
        let tc = TrainConfig { batch_size: 2000, label_drop: 0.1, ..TrainConfig::default() };
        let b = draw_batch(&data, &mut rng_from_seed(1), &sched, &cfg, &tc).unwrap();
        let nulls = b.labels.unwrap().iter().filter(|&&c| c == 2).count();
        assert!((140..260).contains(&nulls), "{nulls}");
    }
}
