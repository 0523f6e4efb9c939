//! A small ReLU MLP with time/class conditioning and hand-written gradients.
//!
//! Input to the first layer is `[z_t | sinusoidal(t) | class embedding]`. The
//! raw output is interpreted by the prediction [`Head`] and turned into a
//! velocity by [`heads`].

pub(crate) mod heads;
mod train;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::path::PathKind;
use crate::Rng;

pub use heads::{assemble_rows, assemble_velocity_rows, predict_velocity, HeadCoefficients};
pub use train::{
    checkpoint_load, checkpoint_save, draw_batch, gradient_check, layersync_from_cache, layersync_loss, loss_and_grad, train, Adam,
    Dataset, GradientCheck, LossReport, RowDataset, TrainConfig, TrainOutcome, DIVERGENCE_LOSS,
};

/// What the network's raw output means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    /// Clean data `x̂`.
    X,
    /// The velocity itself.
    V,
    /// The noise draw `ε̂`.
    Eps,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::X => "x",
            Head::V => "v",
            Head::Eps => "eps",
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" | "x_pred" | "xpred" => Ok(Head::X),
            "v" | "v_pred" | "vpred" => Ok(Head::V),
            "eps" | "e" | "eps_pred" | "epsilon" => Ok(Head::Eps),
            other => Err(invalid(format!("unknown head '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    /// Field shape the model consumes and emits.
    pub shape: Vec<usize>,
    pub hidden: usize,
    /// Number of linear layers, at least 2.
    pub layers: usize,
    /// Length of the sinusoidal time embedding, even.
    pub time_dim: usize,
    /// 0 disables class conditioning.
    pub num_classes: usize,
    pub class_dim: usize,
    pub head: Head,
    pub path: PathKind,
}

impl MlpConfig {
    pub fn new(shape: &[usize], head: Head) -> Self {
        MlpConfig {
            shape: shape.to_vec(),
            hidden: 256,
            layers: 5,
            time_dim: 32,
            num_classes: 0,
            class_dim: 16,
            head,
            path: PathKind::Hdfm,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn class_width(&self) -> usize {
        if self.num_classes > 0 {
            self.class_dim
        } else {
            0
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim() + self.time_dim + self.class_width()
    }

    /// `(fan_in, fan_out)` per linear layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|i| {
                let fan_in = if i == 0 { self.input_dim() } else { self.hidden };
                let fan_out = if i + 1 == self.layers { self.data_dim() } else { self.hidden };
                (fan_in, fan_out)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        let layers: usize = self.layer_dims().iter().map(|(i, o)| i * o + o).sum();
        let classes = if self.num_classes > 0 { (self.num_classes + 1) * self.class_dim } else { 0 };
        layers + classes
    }

    pub fn validate(&self) -> Result<()> {
        crate::field::Layout::from_shape(&self.shape)?;
        if self.layers < 2 || self.hidden == 0 {
            return Err(invalid("the MLP needs at least 2 layers and a nonzero width"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(invalid("time embedding size must be even and positive"));
        }
        if self.num_classes > 0 && self.class_dim == 0 {
            return Err(invalid("class embedding size must be positive"));
        }
        if self.path == PathKind::PureBlur && self.head == Head::Eps {
            return Err(Error::Unsupported("eps prediction has no noise to predict on the pure-blur path".into()));
        }
        Ok(())
    }
}

/// One affine layer, `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// All trainable tensors. Gradients use the same structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<Linear>,
    /// `(num_classes + 1) x class_dim`; the last row is the null class.
    pub class_table: Option<Array2<f64>>,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            layers: self
                .layers
                .iter()
                .map(|l| Linear { w: Array2::zeros(l.w.raw_dim()), b: Array1::zeros(l.b.len()) })
                .collect(),
            class_table: self.class_table.as_ref().map(|c| Array2::zeros(c.raw_dim())),
        }
    }

    /// Named parameter blocks in a fixed order, with their shapes.
    pub fn blocks(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.w"), l.w.shape().to_vec(), l.w.as_slice().expect("standard layout")));
            out.push((format!("layer{i}.b"), l.b.shape().to_vec(), l.b.as_slice().expect("standard layout")));
        }
        if let Some(c) = &self.class_table {
            out.push(("class_table".into(), c.shape().to_vec(), c.as_slice().expect("standard layout")));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.w"), l.w.as_slice_mut().expect("standard layout")));
            out.push((format!("layer{i}.b"), l.b.as_slice_mut().expect("standard layout")));
        }
        if let Some(c) = &mut self.class_table {
            out.push(("class_table".into(), c.as_slice_mut().expect("standard layout")));
        }
        out
    }

    pub fn norm_sq(&self) -> f64 {
        self.blocks().iter().map(|(_, _, v)| v.iter().map(|x| x * x).sum::<f64>()).sum()
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Layer inputs: `inputs[0]` is the conditioned input, `inputs[i]` the
    /// post-ReLU output of hidden layer `i - 1`.
    pub inputs: Vec<Array2<f64>>,
    pub output: Array2<f64>,
    class_ids: Option<Vec<usize>>,
}

impl ForwardCache {
    /// Post-ReLU activations of hidden layer `k` (0-based).
    pub fn hidden(&self, k: usize) -> Option<&Array2<f64>> {
        self.inputs.get(k + 1)
    }

    pub fn num_hidden(&self) -> usize {
        self.inputs.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    config: MlpConfig,
    params: Params,
}

/// `[sin(ω_k t), cos(ω_k t)]` with frequencies spaced geometrically in `[1, 1000]`.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
            (frac * 1000f64.ln()).exp()
        })
        .collect();
    out.extend(freqs.iter().map(|w| (w * t).sin()));
    out.extend(freqs.iter().map(|w| (w * t).cos()));
    out
}

impl MlpModel {
    /// He-normal hidden layers; the output layer starts at zero.
    pub fn new(config: MlpConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &(fan_in, fan_out))| {
                let std = if i == last { 0.0 } else { (2.0 / fan_in as f64).sqrt() };
                let w = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                    let n: f64 = StandardNormal.sample(rng);
                    std * n
                });
                Linear { w, b: Array1::zeros(fan_out) }
            })
            .collect();
        let class_table = (config.num_classes > 0).then(|| {
            Array2::from_shape_simple_fn((config.num_classes + 1, config.class_dim), || {
                let n: f64 = StandardNormal.sample(rng);
                n
            })
        });
        Ok(MlpModel { config, params: Params { layers, class_table } })
    }

    pub fn from_params(config: MlpConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if params.layers.len() != dims.len() {
            return Err(invalid(format!("expected {} layers, got {}", dims.len(), params.layers.len())));
        }
        for (l, &(fan_in, fan_out)) in params.layers.iter().zip(&dims) {
            if l.w.dim() != (fan_out, fan_in) || l.b.len() != fan_out {
                return Err(Error::ShapeMismatch { expected: vec![fan_out, fan_in], got: l.w.shape().to_vec() });
            }
        }
        match (&params.class_table, config.num_classes) {
            (None, 0) => {}
            (Some(c), n) if n > 0 && c.dim() == (n + 1, config.class_dim) => {}
            _ => return Err(invalid("class table does not match the configuration")),
        }
        Ok(MlpModel { config, params })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn head(&self) -> Head {
        self.config.head
    }

    /// Row index into the class table; `None` maps to the null class.
    pub fn class_index(&self, y: Option<usize>) -> Result<Option<usize>> {
        let n = self.config.num_classes;
        match (n, y) {
            (0, None) => Ok(None),
            (0, Some(id)) => Err(Error::UnknownClass { id, classes: 0 }),
            (_, None) => Ok(Some(n)),
            (_, Some(id)) if id < n => Ok(Some(id)),
            (_, Some(id)) => Err(Error::UnknownClass { id, classes: n }),
        }
    }

    /// Builds the conditioned input rows.
    pub fn build_input(&self, z: &Array2<f64>, t: &[f64], y: &[Option<usize>]) -> Result<(Array2<f64>, Option<Vec<usize>>)> {
        let d = self.config.data_dim();
        if z.ncols() != d {
            return Err(Error::ShapeMismatch { expected: vec![z.nrows(), d], got: vec![z.nrows(), z.ncols()] });
        }
        if t.len() != z.nrows() || y.len() != z.nrows() {
            return Err(Error::ShapeMismatch { expected: vec![z.nrows()], got: vec![t.len(), y.len()] });
        }
        let ids = y.iter().map(|&c| self.class_index(c)).collect::<Result<Vec<_>>>()?;
        let ids: Option<Vec<usize>> = ids.into_iter().collect();
        let td = self.config.time_dim;
        let mut input = Array2::zeros((z.nrows(), self.config.input_dim()));
        input.slice_mut(s![.., ..d]).assign(z);
        for (i, &ti) in t.iter().enumerate() {
            let emb = Array1::from(time_embedding(ti, td));
            input.slice_mut(s![i, d..d + td]).assign(&emb);
        }
        if let (Some(ids), Some(table)) = (&ids, &self.params.class_table) {
            for (i, &c) in ids.iter().enumerate() {
                input.slice_mut(s![i, d + td..]).assign(&table.row(c));
            }
        }
        Ok((input, ids))
    }

    /// Raw network output for a batch of states, keeping activations.
    pub fn forward(&self, z: &Array2<f64>, t: &[f64], y: &[Option<usize>]) -> Result<ForwardCache> {
        let (input, class_ids) = self.build_input(z, t, y)?;
        let n_layers = self.params.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        inputs.push(input);
        let mut output = None;
        for (i, layer) in self.params.layers.iter().enumerate() {
            let mut a = inputs[i].dot(&layer.w.t());
            a += &layer.b;
            if i + 1 == n_layers {
                output = Some(a);
            } else {
                a.mapv_inplace(|v| v.max(0.0));
                inputs.push(a);
            }
        }
        Ok(ForwardCache { inputs, output: output.expect("at least one layer"), class_ids })
    }

    /// Reverse pass. `extra_hidden[k]`, when present, is added to the gradient
    /// of hidden layer `k`'s post-ReLU activations.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Array2<f64>, extra_hidden: &[Option<Array2<f64>>]) -> Params {
        let mut grads = self.params.zeros_like();
        let n_layers = self.params.layers.len();
        let mut g = grad_out.clone();
        for i in (0..n_layers).rev() {
            let x = &cache.inputs[i];
            grads.layers[i].w = g.t().dot(x);
            grads.layers[i].b = g.sum_axis(Axis(0));
            if i == 0 && self.params.class_table.is_none() {
                break;
            }
            let mut gx = g.dot(&self.params.layers[i].w);
            if i == 0 {
                let start = self.config.data_dim() + self.config.time_dim;
                if let (Some(ids), Some(table)) = (&cache.class_ids, grads.class_table.as_mut()) {
                    for (r, &c) in ids.iter().enumerate() {
                        let mut row = table.row_mut(c);
                        row += &gx.slice(s![r, start..]);
                    }
                }
                break;
            }
            if let Some(Some(extra)) = extra_hidden.get(i - 1) {
                gx += extra;
            }
            // ReLU mask from the stored post-activation
            ndarray::Zip::from(&mut gx).and(x).for_each(|gv, &xv| {
                if xv <= 0.0 {
                    *gv = 0.0;
                }
            });
            g = gx;
        }
        grads
    }
}
