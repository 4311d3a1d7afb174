//! Monte Carlo evaluation of trained flows and static maps.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::cost::CostFn;
use crate::data::{log_sum_exp, Gmm, Source};
use crate::error::{Error, Result};
use crate::nn::{TimeEmbedding, VectorFieldModel};
use crate::ode::{flow_map, model_log_density, DivergenceField, Method, VelocityField};
use crate::rng::Rng;
use crate::stats::Estimate;

/// Rows are integrated in chunks of this size, so adaptive step control
/// only couples nearby draws.
pub const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl MetricReport {
    pub fn from_samples(name: impl Into<String>, xs: &[f64]) -> Self {
        Self::from_estimate(name, Estimate::from_samples(xs))
    }

    pub fn from_estimate(name: impl Into<String>, e: Estimate) -> Self {
        MetricReport {
            name: name.into(),
            value: e.mean,
            stderr: e.stderr,
            n: e.n,
            note: None,
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate {
            mean: self.value,
            stderr: self.stderr,
            n: self.n,
        }
    }
}

/// `z = (a - b) / sqrt(se_a^2 + se_b^2)` and whether `|z| >= 3`.
pub fn welch_compare(a: &MetricReport, b: &MetricReport) -> (f64, bool) {
    let z = a.estimate().z_versus(&b.estimate());
    (z, z.abs() >= 3.0)
}

fn need_draws(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument("metrics need at least 2 draws".into()));
    }
    Ok(())
}

fn chunked<F>(x: ArrayView2<'_, f64>, mut f: F) -> Result<Array2<f64>>
where
    F: FnMut(ArrayView2<'_, f64>) -> Result<Array2<f64>>,
{
    let parts = x
        .axis_chunks_iter(Axis(0), CHUNK)
        .map(&mut f)
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// `phi_1(x0)` for every row.
pub fn push_forward(field: &dyn VelocityField, x0: ArrayView2<'_, f64>, method: Method) -> Result<Array2<f64>> {
    chunked(x0, |c| flow_map(field, c, method, 0.0, 1.0))
}

/// `dy/ds = t_i v(s t_i, y)` for row `i`: its time-1 flow is `phi_{t_i}`.
struct Rescaled<'a> {
    field: &'a dyn VelocityField,
    t: &'a [f64],
}

impl VelocityField for Rescaled<'_> {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn velocity(&self, x: ArrayView2<'_, f64>, s: &[f64]) -> Result<Array2<f64>> {
        let times: Vec<f64> = s.iter().zip(self.t).map(|(s, t)| s * t).collect();
        let mut v = self.field.velocity(x, &times)?;
        for (mut row, &t) in v.rows_mut().into_iter().zip(self.t) {
            row *= t;
        }
        Ok(v)
    }
}

/// `phi_{t_i}(x0_i)` for per-row times.
pub fn flow_to_times(
    field: &dyn VelocityField,
    x0: ArrayView2<'_, f64>,
    t: &[f64],
    method: Method,
) -> Result<Array2<f64>> {
    if t.len() != x0.nrows() {
        return Err(Error::Shape(format!("{} times for {} points", t.len(), x0.nrows())));
    }
    let mut parts = Vec::new();
    for (c, tc) in x0.axis_chunks_iter(Axis(0), CHUNK).zip(t.chunks(CHUNK)) {
        parts.push(flow_map(&Rescaled { field, t: tc }, c, method, 0.0, 1.0)?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

fn sq_norm_rows(a: &Array2<f64>) -> Vec<f64> {
    a.rows().into_iter().map(|r| r.dot(&r)).collect()
}

/// Straightness `E[|v(t, phi_t(x0))|^2] - E[|phi_1(x0) - x0|^2]`, both terms
/// evaluated on the same `x0` draws with a fresh `t ~ U[0, 1]` per draw.
pub fn straightness(
    field: &dyn VelocityField,
    q0: &Source,
    n: usize,
    method: Method,
    rng: &mut Rng,
) -> Result<MetricReport> {
    need_draws(n)?;
    let x0 = q0.sample(rng, n)?.into_points();
    let t: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let x1 = push_forward(field, x0.view(), method)?;
    let xt = flow_to_times(field, x0.view(), &t, method)?;
    let u = field.velocity(xt.view(), &t)?;
    let speed = sq_norm_rows(&u);
    let disp = sq_norm_rows(&(&x1 - &x0));
    let per_draw: Vec<f64> = speed.iter().zip(&disp).map(|(a, b)| a - b).collect();
    Ok(MetricReport::from_samples("straightness", &per_draw))
}

fn pair_costs(x0: &Array2<f64>, x1: &Array2<f64>, cost: &CostFn) -> Result<Vec<f64>> {
    x0.rows()
        .into_iter()
        .zip(x1.rows())
        .map(|(a, b)| cost.eval(a, b))
        .collect()
}

/// `E[c(x0, phi_1(x0))]`.
pub fn flow_transport_cost(
    field: &dyn VelocityField,
    q0: &Source,
    n: usize,
    method: Method,
    rng: &mut Rng,
    cost: &CostFn,
) -> Result<MetricReport> {
    need_draws(n)?;
    let x0 = q0.sample(rng, n)?.into_points();
    let x1 = push_forward(field, x0.view(), method)?;
    Ok(MetricReport::from_samples("transport_cost", &pair_costs(&x0, &x1, cost)?))
}

fn apply_static(psi: &VectorFieldModel, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if psi.spec().time_embedding != TimeEmbedding::None {
        return Err(Error::InvalidArgument("static map must not take a time input".into()));
    }
    psi.forward_batch(x, &vec![0.0; x.nrows()])
}

/// `E[c(x0, psi(x0))]` for a static map.
pub fn static_transport_cost(
    psi: &VectorFieldModel,
    q0: &Source,
    n: usize,
    rng: &mut Rng,
    cost: &CostFn,
) -> Result<MetricReport> {
    need_draws(n)?;
    let x0 = q0.sample(rng, n)?.into_points();
    let x1 = apply_static(psi, x0.view())?;
    Ok(MetricReport::from_samples("transport_cost", &pair_costs(&x0, &x1, cost)?))
}

/// `KL(q1 || phi_1 # base)` by change of variables along the reversed flow.
pub fn kl_model(
    q1: &Gmm,
    field: &dyn DivergenceField,
    base: &Gmm,
    n: usize,
    method: Method,
    rng: &mut Rng,
) -> Result<MetricReport> {
    need_draws(n)?;
    let x = q1.sample(rng, n)?.into_points();
    let lq = q1.log_density_batch(x.view())?;
    let mut lp = Vec::with_capacity(n);
    for c in x.axis_chunks_iter(Axis(0), CHUNK) {
        lp.extend(model_log_density(field, base, c, method)?);
    }
    let per_draw: Vec<f64> = lq.iter().zip(&lp).map(|(a, b)| a - b).collect();
    Ok(MetricReport::from_samples("kl", &per_draw))
}

/// Gaussian kernel density estimate with a diagonal Scott's-rule bandwidth.
pub struct Kde {
    points: Array2<f64>,
    bandwidth: Vec<f64>,
    log_norm: f64,
}

impl Kde {
    /// Fails with a domain error when some coordinate has (near) zero spread.
    pub fn fit(points: Array2<f64>) -> Result<Self> {
        let (n, d) = points.dim();
        if n < 2 {
            return Err(Error::InvalidArgument("kernel density needs at least 2 points".into()));
        }
        let factor = (n as f64).powf(-1.0 / (d as f64 + 4.0));
        let mut bandwidth = Vec::with_capacity(d);
        for col in points.columns() {
            let xs: Vec<f64> = col.to_vec();
            let sd = crate::stats::variance(&xs).sqrt();
            let scale = xs.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
            if !(sd > 1e-12 * scale) {
                return Err(Error::Domain(format!(
                    "collapsed support: coordinate spread {sd:e}"
                )));
            }
            bandwidth.push(sd * factor);
        }
        let log_norm = -(n as f64).ln()
            - bandwidth
                .iter()
                .map(|h| (h * (2.0 * std::f64::consts::PI).sqrt()).ln())
                .sum::<f64>();
        Ok(Kde {
            points,
            bandwidth,
            log_norm,
        })
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn log_density(&self, y: &[f64]) -> f64 {
        let mut terms = Vec::with_capacity(self.points.nrows());
        for p in self.points.rows() {
            let mut e = 0.0;
            for ((a, b), h) in p.iter().zip(y).zip(&self.bandwidth) {
                let z = (a - b) / h;
                e -= 0.5 * z * z;
            }
            terms.push(e);
        }
        log_sum_exp(&terms) + self.log_norm
    }
}

/// `KL(q1 || psi # q0)` with the pushforward density replaced by a kernel
/// density fitted to `n_fit` pushed samples and evaluated at `n_eval` draws
/// from `q1`. A collapsed pushforward reports `+inf` with a note.
pub fn kl_static_samplebased(
    q1: &Gmm,
    psi: &VectorFieldModel,
    q0: &Source,
    n_fit: usize,
    n_eval: usize,
    rng: &mut Rng,
) -> Result<MetricReport> {
    need_draws(n_eval)?;
    let x0 = q0.sample(rng, n_fit)?.into_points();
    let pushed = apply_static(psi, x0.view())?;
    let kde = match Kde::fit(pushed) {
        Ok(k) => k,
        Err(Error::Domain(msg)) => {
            return Ok(MetricReport {
                name: "kl_static".into(),
                value: f64::INFINITY,
                stderr: f64::NAN,
                n: n_eval,
                note: Some(msg),
            })
        }
        Err(e) => return Err(e),
    };
    let y = q1.sample(rng, n_eval)?.into_points();
    let lq = q1.log_density_batch(y.view())?;
    let per_draw: Vec<f64> = y
        .rows()
        .into_iter()
        .zip(&lq)
        .map(|(row, l)| l - kde.log_density(row.as_slice().expect("standard layout")))
        .collect();
    Ok(MetricReport::from_samples("kl_static", &per_draw))
}

/// Per-coordinate squared gap between `m`-evaluation midpoint samples and a
/// tight adaptive reference, from shared initial points.
pub fn consistency(
    field: &dyn VelocityField,
    q0: &Source,
    m_values: &[usize],
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<MetricReport>> {
    need_draws(n)?;
    let x0 = q0.sample(rng, n)?.into_points();
    let d = x0.ncols() as f64;
    let reference = push_forward(field, x0.view(), Method::adaptive(1e-7))?;
    m_values
        .iter()
        .map(|&m| {
            let xm = push_forward(field, x0.view(), Method::Midpoint { nfe: m })?;
            let gaps: Vec<f64> = sq_norm_rows(&(&xm - &reference)).iter().map(|g| g / d).collect();
            Ok(MetricReport::from_samples(format!("consistency_m{m}"), &gaps))
        })
        .collect()
}
