//! Straight-line conditional paths and the regression losses built on them.

use ndarray::{Array2, ArrayView2, Zip};

use crate::coupling::{sample_training_pairs, Coupler, PairBatch};
use crate::data::Source;
use crate::error::{Error, Result};
use crate::nn::{TimeEmbedding, VectorFieldModel};
use crate::rng::Rng;
use crate::stats::Estimate;

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")))
    }
}

fn check_pair(x0: &[f64], x1: &[f64]) -> Result<()> {
    if x0.len() != x1.len() {
        return Err(Error::Shape(format!("endpoints of length {} and {}", x0.len(), x1.len())));
    }
    Ok(())
}

/// `(1 - t) x0 + t x1`.
pub fn cond_flow(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    check_time(t)?;
    check_pair(x0, x1)?;
    Ok(x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

/// `x1 - x0`, the velocity along [`cond_flow`] at every `t`.
pub fn cond_target_vf(x0: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
    check_pair(x0, x1)?;
    Ok(x0.iter().zip(x1).map(|(a, b)| b - a).collect())
}

/// Regression inputs for one training step, one row per pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSamples {
    pub t: Vec<f64>,
    pub xt: Array2<f64>,
    pub target: Array2<f64>,
}

impl TrainSamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Builds samples from explicit times.
    pub fn from_pairs(pairs: &PairBatch, t: Vec<f64>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyBatch("no pairs to build training samples from"));
        }
        if t.len() != pairs.len() {
            return Err(Error::Shape(format!("{} times for {} pairs", t.len(), pairs.len())));
        }
        for &ti in &t {
            check_time(ti)?;
        }
        let mut xt = pairs.x0().to_owned();
        for (mut row, (&ti, x1)) in xt.rows_mut().into_iter().zip(t.iter().zip(pairs.x1().rows())) {
            Zip::from(&mut row).and(&x1).for_each(|a, &b| *a = (1.0 - ti) * *a + ti * b);
        }
        let target = &pairs.x1() - &pairs.x0();
        Ok(TrainSamples { t, xt, target })
    }

    /// Reorders rows; the loss must not depend on the order.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let t = order.iter().map(|&i| self.t[i]).collect();
        let xt = self.xt.select(ndarray::Axis(0), order);
        let target = self.target.select(ndarray::Axis(0), order);
        TrainSamples { t, xt, target }
    }
}

/// One `t ~ U[0, 1]` per pair.
pub fn make_train_samples(pairs: &PairBatch, rng: &mut Rng) -> Result<TrainSamples> {
    let t = (0..pairs.len()).map(|_| rng.uniform()).collect();
    TrainSamples::from_pairs(pairs, t)
}

fn mean_sq_error_grad(
    model: &VectorFieldModel,
    x: ArrayView2<'_, f64>,
    t: &[f64],
    target: ArrayView2<'_, f64>,
) -> Result<(f64, Vec<f64>)> {
    let n = x.nrows() as f64;
    model.loss_and_grad(|tape, g| {
        let xv = tape.constant(x.to_owned());
        let v = g.apply(tape, xv, t)?;
        let u = tape.constant(target.to_owned());
        let diff = tape.sub(v, u)?;
        let ss = tape.sum_squares(diff);
        Ok(tape.scale(ss, 1.0 / n))
    })
}

fn mean_sq_error(pred: &Array2<f64>, target: ArrayView2<'_, f64>) -> f64 {
    let n = pred.nrows() as f64;
    Zip::from(pred)
        .and(&target)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b))
        / n
}

/// Mean of `|v(t, x_t) - (x1 - x0)|^2` and its parameter gradient.
pub fn jcfm_loss(model: &VectorFieldModel, samples: &TrainSamples) -> Result<(f64, Vec<f64>)> {
    check_model_dim(model, samples.xt.ncols())?;
    mean_sq_error_grad(model, samples.xt.view(), &samples.t, samples.target.view())
}

/// The loss of [`jcfm_loss`] without the backward pass.
pub fn jcfm_loss_value(model: &VectorFieldModel, samples: &TrainSamples) -> Result<f64> {
    check_model_dim(model, samples.xt.ncols())?;
    let v = model.forward_batch(samples.xt.view(), &samples.t)?;
    Ok(mean_sq_error(&v, samples.target.view()))
}

fn check_model_dim(model: &VectorFieldModel, d: usize) -> Result<()> {
    if model.dim() != d {
        return Err(Error::Shape(format!("model dimension {} vs data dimension {d}", model.dim())));
    }
    Ok(())
}

fn check_static(model: &VectorFieldModel, d: usize) -> Result<()> {
    check_model_dim(model, d)?;
    if model.spec().time_embedding != TimeEmbedding::None {
        return Err(Error::InvalidArgument("static map must not take a time input".into()));
    }
    Ok(())
}

/// Mean of `|psi(x0) - x1|^2` over coupled pairs for a static map `psi`.
pub fn barycentric_loss(model: &VectorFieldModel, pairs: &PairBatch) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch("no pairs"));
    }
    check_static(model, pairs.dim())?;
    let t = vec![0.0; pairs.len()];
    mean_sq_error_grad(model, pairs.x0(), &t, pairs.x1())
}

pub fn barycentric_loss_value(model: &VectorFieldModel, pairs: &PairBatch) -> Result<f64> {
    check_static(model, pairs.dim())?;
    let psi = model.forward_batch(pairs.x0(), &vec![0.0; pairs.len()])?;
    Ok(mean_sq_error(&psi, pairs.x1()))
}

/// Monte Carlo estimate of the joint flow-matching loss at fixed parameters.
///
/// Each of `n_batches` batches holds `batch_size` pairs coupled in blocks of
/// `k` and is drawn from `rng.split(b)`.
pub fn variance_proxy(
    model: &VectorFieldModel,
    coupler: &Coupler,
    q0: &Source,
    q1: &Source,
    k: usize,
    batch_size: usize,
    n_batches: usize,
    rng: &Rng,
) -> Result<Estimate> {
    if n_batches < 2 {
        return Err(Error::InvalidArgument("variance proxy needs at least 2 batches".into()));
    }
    let losses = (0..n_batches)
        .map(|b| {
            let mut sub = rng.split(b as u64);
            let pairs = sample_training_pairs(coupler, q0, q1, batch_size, k, &mut sub)?;
            let samples = make_train_samples(&pairs, &mut sub)?;
            jcfm_loss_value(model, &samples)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::from_samples(&losses))
}
