//! Time-conditioned MLP vector fields, Adam, and checkpoint files.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{swish, Tape, Var};
use crate::error::{Error, Result};
use crate::ode::{DivergenceField, VelocityField};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Swish,
    /// Linear network; only used to check the forward pass against hand arithmetic.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TimeEmbedding {
    /// No time input: a static map `x -> psi(x)`.
    None,
    /// Append `t` as one extra input column.
    Concat,
    /// Append `t, sin(pi m t), cos(pi m t)` for `m = 1..=n_freq`.
    Sinusoidal { n_freq: usize },
}

impl TimeEmbedding {
    pub fn width(&self) -> usize {
        match self {
            TimeEmbedding::None => 0,
            TimeEmbedding::Concat => 1,
            TimeEmbedding::Sinusoidal { n_freq } => 1 + 2 * n_freq,
        }
    }

    fn features(&self, t: &[f64]) -> Array2<f64> {
        let n = t.len();
        match *self {
            TimeEmbedding::None => Array2::zeros((n, 0)),
            TimeEmbedding::Concat => Array2::from_shape_fn((n, 1), |(i, _)| t[i]),
            TimeEmbedding::Sinusoidal { n_freq } => {
                Array2::from_shape_fn((n, 1 + 2 * n_freq), |(i, c)| {
                    if c == 0 {
                        return t[i];
                    }
                    let m = ((c - 1) % n_freq + 1) as f64;
                    let arg = std::f64::consts::PI * m * t[i];
                    if c <= n_freq {
                        arg.sin()
                    } else {
                        arg.cos()
                    }
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_embedding: TimeEmbedding,
}

/// Default parameter budgets: about 50K weights in 2-D and 800K from 32-D up.
pub fn default_param_budget(dim: usize) -> usize {
    if dim <= 2 {
        50_000
    } else if dim >= 32 {
        800_000
    } else {
        200_000
    }
}

impl NetSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, time_embedding: TimeEmbedding) -> Result<Self> {
        let spec = NetSpec {
            input_dim,
            hidden,
            activation: Activation::Swish,
            time_embedding,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("network input dimension must be positive".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one hidden layer".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        if let TimeEmbedding::Sinusoidal { n_freq: 0 } = self.time_embedding {
            return Err(Error::InvalidArgument("sinusoidal embedding needs n_freq >= 1".into()));
        }
        Ok(())
    }

    /// Time embedding by dimension: the raw scalar below 32-D, 8 frequencies from 32-D up.
    pub fn default_time_embedding(dim: usize) -> TimeEmbedding {
        if dim >= 32 {
            TimeEmbedding::Sinusoidal { n_freq: 8 }
        } else {
            TimeEmbedding::Concat
        }
    }

    /// `depth` equal hidden layers, as wide as possible within `budget` parameters.
    pub fn with_budget(
        input_dim: usize,
        depth: usize,
        budget: usize,
        time_embedding: TimeEmbedding,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidArgument("network needs at least one hidden layer".into()));
        }
        let count = |w: usize| {
            NetSpec {
                input_dim,
                hidden: vec![w; depth],
                activation: Activation::Swish,
                time_embedding,
            }
            .param_count()
        };
        let mut width = 1;
        while count(width + 1) <= budget {
            width += 1;
        }
        NetSpec::new(input_dim, vec![width; depth], time_embedding)
    }

    /// Three equal hidden layers sized by [`default_param_budget`].
    pub fn default_for_dim(dim: usize) -> Result<Self> {
        Self::with_budget(dim, 3, default_param_budget(dim), Self::default_time_embedding(dim))
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim + self.time_embedding.width();
        for &w in &self.hidden {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, self.input_dim));
        dims
    }

    /// Weights `(fan_in x fan_out)` row-major, then the bias, for each layer in order.
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorFieldModel {
    spec: NetSpec,
    params: Vec<f64>,
}

/// The model's parameters as tape variables (or constants).
pub struct ModelGraph<'a> {
    spec: &'a NetSpec,
    layers: Vec<(Var, Var)>,
}

impl ModelGraph<'_> {
    /// Records `v(t, x)` on the tape for a batch `x` (one row per point) and per-row times.
    pub fn apply(&self, tape: &mut Tape, x: Var, t: &[f64]) -> Result<Var> {
        let (n, d) = tape.value(x).dim();
        if d != self.spec.input_dim || t.len() != n {
            return Err(Error::Shape(format!(
                "model input {n}x{d} with {} times, expected dimension {}",
                t.len(),
                self.spec.input_dim
            )));
        }
        let mut h = if self.spec.time_embedding == TimeEmbedding::None {
            x
        } else {
            let emb = tape.constant(self.spec.time_embedding.features(t));
            tape.concat_cols(&[x, emb])?
        };
        let last = self.layers.len() - 1;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if l < last && self.spec.activation == Activation::Swish {
                h = tape.swish(h);
            }
        }
        Ok(h)
    }

    /// Parameter variables in layout order: `(weight, bias)` per layer.
    pub fn layers(&self) -> &[(Var, Var)] {
        &self.layers
    }
}

impl VectorFieldModel {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init(spec: NetSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::with_capacity(spec.param_count());
        for (fan_in, fan_out) in spec.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.uniform_range(-bound, bound)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(VectorFieldModel { spec, params })
    }

    pub fn from_params(spec: NetSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "spec needs {} parameters, got {}",
                spec.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameter".into()));
        }
        Ok(VectorFieldModel { spec, params })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_views(&self) -> Vec<(ArrayView2<'_, f64>, ArrayView1<'_, f64>)> {
        let mut offset = 0;
        self.spec
            .layer_dims()
            .into_iter()
            .map(|(i, o)| {
                let w = ArrayView2::from_shape((i, o), &self.params[offset..offset + i * o])
                    .expect("layout matches spec");
                offset += i * o;
                let b = ArrayView1::from(&self.params[offset..offset + o]);
                offset += o;
                (w, b)
            })
            .collect()
    }

    /// Loads the parameters onto a tape, as variables when `trainable`.
    pub fn graph(&self, tape: &mut Tape, trainable: bool) -> ModelGraph<'_> {
        let layers = self
            .layer_views()
            .into_iter()
            .map(|(w, b)| {
                let (w, b) = (w.to_owned(), b.to_owned().insert_axis(Axis(0)));
                if trainable {
                    (tape.variable(w), tape.variable(b))
                } else {
                    (tape.constant(w), tape.constant(b))
                }
            })
            .collect();
        ModelGraph {
            spec: &self.spec,
            layers,
        }
    }

    /// Batched forward pass: row `i` of the result is `v(t[i], x[i])`.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>, t: &[f64]) -> Result<Array2<f64>> {
        let (n, d) = x.dim();
        if d != self.spec.input_dim || t.len() != n {
            return Err(Error::Shape(format!(
                "model input {n}x{d} with {} times, expected dimension {}",
                t.len(),
                self.spec.input_dim
            )));
        }
        let mut h = if self.spec.time_embedding == TimeEmbedding::None {
            x.to_owned()
        } else {
            let emb = self.spec.time_embedding.features(t);
            ndarray::concatenate(Axis(1), &[x, emb.view()]).map_err(|e| Error::Shape(e.to_string()))?
        };
        let layers = self.layer_views();
        let last = layers.len() - 1;
        for (l, (w, b)) in layers.into_iter().enumerate() {
            h = h.dot(&w) + &b.insert_axis(Axis(0));
            if l < last && self.spec.activation == Activation::Swish {
                h.mapv_inplace(swish);
            }
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model output".into()));
        }
        Ok(h)
    }

    /// `v(t, x)` for a single point.
    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        let x = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward_batch(x, &[t])?.into_raw_vec_and_offset().0)
    }

    /// Runs `build` on a tape holding the parameters as variables and returns the
    /// scalar it produces together with its gradient in parameter layout.
    pub fn loss_and_grad<F>(&self, build: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&mut Tape, &ModelGraph<'_>) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let graph = self.graph(&mut tape, true);
        let loss = build(&mut tape, &graph)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {value}")));
        }
        let mut grads = tape.backward(loss)?;
        let mut flat = Vec::with_capacity(self.params.len());
        for (&(w, b), (fan_in, fan_out)) in graph.layers.iter().zip(self.spec.layer_dims()) {
            for (var, len) in [(w, fan_in * fan_out), (b, fan_out)] {
                match grads.take(var) {
                    Some(g) => flat.extend(g.iter()),
                    None => flat.extend(std::iter::repeat_n(0.0, len)),
                }
            }
        }
        Ok((value, flat))
    }

    /// Velocities and their exact divergences `sum_i dv_i/dx_i`, one reverse
    /// sweep per coordinate.
    pub fn velocity_and_divergence(
        &self,
        x: ArrayView2<'_, f64>,
        t: &[f64],
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let graph = self.graph(&mut tape, false);
        let xv = tape.variable(x.to_owned());
        let out = graph.apply(&mut tape, xv, t)?;
        let v = tape.value(out).clone();
        if v.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("model output".into()));
        }
        let (n, d) = v.dim();
        let mut div = vec![0.0; n];
        for i in 0..d {
            let mut seed = Array2::zeros((n, d));
            seed.column_mut(i).fill(1.0);
            let grads = tape.backward_seeded(out, seed)?;
            let gx = grads.get(xv).expect("input requires grad");
            for (acc, g) in div.iter_mut().zip(gx.column(i)) {
                *acc += g;
            }
        }
        Ok((v, div))
    }
}

impl VelocityField for VectorFieldModel {
    fn dim(&self) -> usize {
        self.spec.input_dim
    }

    fn velocity(&self, x: ArrayView2<'_, f64>, t: &[f64]) -> Result<Array2<f64>> {
        self.forward_batch(x, t)
    }
}

impl DivergenceField for VectorFieldModel {
    fn velocity_and_divergence(
        &self,
        x: ArrayView2<'_, f64>,
        t: &[f64],
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        VectorFieldModel::velocity_and_divergence(self, x, t)
    }
}

/// Central-difference gradient of `loss` with respect to the parameters,
/// with per-coordinate step `1e-5 * max(1, |theta_i|)`.
pub fn finite_difference_gradient<F>(model: &VectorFieldModel, loss: F) -> Result<Vec<f64>>
where
    F: Fn(&VectorFieldModel) -> Result<f64>,
{
    let mut probe = model.clone();
    let mut grad = Vec::with_capacity(model.params.len());
    for i in 0..model.params.len() {
        let theta = model.params[i];
        let h = 1e-5 * theta.abs().max(1.0);
        probe.params[i] = theta + h;
        let up = loss(&probe)?;
        probe.params[i] = theta - h;
        let down = loss(&probe)?;
        probe.params[i] = theta;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(model: &mut VectorFieldModel, state: &mut AdamState, grad: &[f64]) -> Result<()> {
    let n = model.params.len();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape(format!(
            "adam: {n} params, {} grads, {} moments",
            grad.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..n {
        let g = grad[i] + state.weight_decay * model.params[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        model.params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &str = "mfm-checkpoint 1";

/// A model plus optional optimizer state, as stored on disk.
///
/// The file is plain text. A magic line is followed by `key value` header
/// lines (`spec` holds the network spec as JSON), then sections introduced by
/// `params N`, and optionally `adam_m N` and `adam_v N`, each followed by `N`
/// values, one per line, written with the shortest decimal that round-trips.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: VectorFieldModel,
    pub adam: Option<AdamState>,
    pub seed: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let spec = serde_json::to_string(&self.model.spec).expect("spec serializes");
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "spec {spec}");
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "step {}", self.step);
        if let Some(a) = &self.adam {
            let _ = writeln!(
                out,
                "adam {:?} {:?} {:?} {:?} {:?} {}",
                a.lr, a.beta1, a.beta2, a.eps, a.weight_decay, a.step
            );
        }
        let mut section = |name: &str, values: &[f64]| {
            let _ = writeln!(out, "{name} {}", values.len());
            for v in values {
                let _ = writeln!(out, "{v:?}");
            }
        };
        section("params", &self.model.params);
        if let Some(a) = &self.adam {
            section("adam_m", &a.m);
            section("adam_v", &a.v);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing or unsupported version line".into()));
        }
        let mut spec: Option<NetSpec> = None;
        let (mut seed, mut step) = (0u64, 0u64);
        let mut adam_header: Option<Vec<String>> = None;
        let mut sections: Vec<(String, Vec<f64>)> = Vec::new();
        while let Some(line) = lines.next() {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "spec" => {
                    spec = Some(
                        serde_json::from_str(rest).map_err(|e| bad(format!("spec: {e}")))?,
                    )
                }
                "seed" => seed = rest.parse().map_err(|_| bad("bad seed".into()))?,
                "step" => step = rest.parse().map_err(|_| bad("bad step".into()))?,
                "adam" => adam_header = Some(rest.split(' ').map(str::to_string).collect()),
                "params" | "adam_m" | "adam_v" => {
                    let n: usize = rest.parse().map_err(|_| bad(format!("bad {key} count")))?;
                    let values = (0..n)
                        .map(|_| {
                            lines
                                .next()
                                .and_then(|l| l.parse::<f64>().ok())
                                .ok_or_else(|| bad(format!("truncated {key} section")))
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    sections.push((key.to_string(), values));
                }
                "" => {}
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        let spec = spec.ok_or_else(|| bad("missing spec".into()))?;
        let mut take = |name: &str| {
            sections
                .iter()
                .position(|(k, _)| k == name)
                .map(|i| sections.swap_remove(i).1)
        };
        let params = take("params").ok_or_else(|| bad("missing params".into()))?;
        let model = VectorFieldModel::from_params(spec, params)?;
        let adam = match adam_header {
            None => None,
            Some(h) => {
                if h.len() != 6 {
                    return Err(bad("adam header needs 6 fields".into()));
                }
                let f = |i: usize| h[i].parse::<f64>().map_err(|_| bad("bad adam field".into()));
                let (m, v) = (
                    take("adam_m").ok_or_else(|| bad("missing adam_m".into()))?,
                    take("adam_v").ok_or_else(|| bad("missing adam_v".into()))?,
                );
                if m.len() != model.params.len() || v.len() != model.params.len() {
                    return Err(Error::Shape("adam moments do not match params".into()));
                }
                Some(AdamState {
                    lr: f(0)?,
                    beta1: f(1)?,
                    beta2: f(2)?,
                    eps: f(3)?,
                    weight_decay: f(4)?,
                    step: h[5].parse().map_err(|_| bad("bad adam step".into()))?,
                    m,
                    v,
                })
            }
        };
        Ok(Checkpoint {
            model,
            adam,
            seed,
            step,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_text()).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; with `expected` set, the stored spec must match it.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&NetSpec>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::parse(&text)?;
    if let Some(spec) = expected {
        if spec != ckpt.model.spec() {
            return Err(Error::Shape(format!(
                "checkpoint spec {:?} does not match expected {:?}",
                ckpt.model.spec(),
                spec
            )));
        }
    }
    Ok(ckpt)
}
