//! Batched ODE integration: Euler, midpoint, RK4 and an adaptive Dormand-Prince 5(4) pair.
//!
//! All rows of a batch share one time grid. The adaptive controller scales
//! its step by the worst row, so every row meets the tolerance.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::data::{fmt_f64, Gmm};
use crate::error::{Error, Result};

/// A time-dependent vector field evaluated on a batch of points, one time per row.
pub trait VelocityField {
    fn dim(&self) -> usize;
    fn velocity(&self, x: ArrayView2<'_, f64>, t: &[f64]) -> Result<Array2<f64>>;
}

/// A field that can also report its exact divergence per row.
pub trait DivergenceField: VelocityField {
    fn velocity_and_divergence(
        &self,
        x: ArrayView2<'_, f64>,
        t: &[f64],
    ) -> Result<(Array2<f64>, Vec<f64>)>;
}

/// Wraps a closure `(x, t) -> v` as a [`VelocityField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(ArrayView2<'_, f64>, &[f64]) -> Array2<f64>,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f }
    }
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(ArrayView2<'_, f64>, &[f64]) -> Array2<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: ArrayView2<'_, f64>, t: &[f64]) -> Result<Array2<f64>> {
        Ok((self.f)(x, t))
    }
}

/// Wraps a closure `(x, t) -> (v, div v)` as a [`DivergenceField`].
pub struct FnDivField<F> {
    dim: usize,
    f: F,
}

impl<F> FnDivField<F>
where
    F: Fn(ArrayView2<'_, f64>, &[f64]) -> (Array2<f64>, Vec<f64>),
{
    pub fn new(dim: usize, f: F) -> Self {
        FnDivField { dim, f }
    }
}

impl<F> VelocityField for FnDivField<F>
where
    F: Fn(ArrayView2<'_, f64>, &[f64]) -> (Array2<f64>, Vec<f64>),
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: ArrayView2<'_, f64>, t: &[f64]) -> Result<Array2<f64>> {
        Ok((self.f)(x, t).0)
    }
}

impl<F> DivergenceField for FnDivField<F>
where
    F: Fn(ArrayView2<'_, f64>, &[f64]) -> (Array2<f64>, Vec<f64>),
{
    fn velocity_and_divergence(
        &self,
        x: ArrayView2<'_, f64>,
        t: &[f64],
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        Ok((self.f)(x, t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    /// `nfe` steps.
    Euler { nfe: usize },
    /// `nfe / 2` steps; `nfe` must be even.
    Midpoint { nfe: usize },
    /// `nfe / 4` steps; `nfe` must be divisible by 4.
    Rk4 { nfe: usize },
    Adaptive54 { atol: f64, rtol: f64 },
}

impl Method {
    pub fn adaptive(tol: f64) -> Self {
        Method::Adaptive54 { atol: tol, rtol: tol }
    }

    fn fixed_steps(&self) -> Result<Option<usize>> {
        let (nfe, per) = match *self {
            Method::Euler { nfe } => (nfe, 1),
            Method::Midpoint { nfe } => (nfe, 2),
            Method::Rk4 { nfe } => (nfe, 4),
            Method::Adaptive54 { atol, rtol } => {
                if !(atol > 0.0 && rtol >= 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "adaptive tolerances must be positive (atol={atol}, rtol={rtol})"
                    )));
                }
                return Ok(None);
            }
        };
        if nfe == 0 || nfe % per != 0 {
            return Err(Error::InvalidArgument(format!(
                "{self:?}: NFE must be a positive multiple of {per}"
            )));
        }
        Ok(Some(nfe / per))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegrateOpts {
    pub method: Method,
    pub t0: f64,
    pub t1: f64,
    pub record_trajectory: bool,
}

impl IntegrateOpts {
    /// From `t = 0` to `t = 1`.
    pub fn forward(method: Method) -> Self {
        IntegrateOpts {
            method,
            t0: 0.0,
            t1: 1.0,
            record_trajectory: false,
        }
    }

    /// From `t = 1` back to `t = 0`.
    pub fn backward(method: Method) -> Self {
        IntegrateOpts {
            method,
            t0: 1.0,
            t1: 0.0,
            record_trajectory: false,
        }
    }

    pub fn recording(mut self) -> Self {
        self.record_trajectory = true;
        self
    }
}

/// Solver output. Without recording only the initial and final states are kept.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// Monotone from `t0` to `t1`.
    pub times: Vec<f64>,
    pub states: Vec<Array2<f64>>,
    /// Number of batched field evaluations.
    pub nfe: usize,
    pub rejected_steps: usize,
}

impl Trajectory {
    pub fn final_state(&self) -> &Array2<f64> {
        self.states.last().expect("trajectory has an initial state")
    }

    pub fn into_final_state(mut self) -> Array2<f64> {
        self.states.pop().expect("trajectory has an initial state")
    }

    /// One row per (time, sample): `t, x_1, .., x_d`, ordered by time then sample.
    pub fn to_csv(&self) -> String {
        let d = self.states.first().map_or(0, |s| s.ncols());
        let mut out = String::from("# t");
        for i in 1..=d {
            let _ = write!(out, ",x{i}");
        }
        out.push('\n');
        for (t, state) in self.times.iter().zip(&self.states) {
            for row in state.rows() {
                out.push_str(&fmt_f64(*t));
                for v in row {
                    out.push(',');
                    out.push_str(&fmt_f64(*v));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Right-hand side `dy/dt = f(t, y)` on an `n x m` state.
trait System {
    fn rhs(&self, t: f64, y: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

struct Plain<'a>(&'a dyn VelocityField);

impl System for Plain<'_> {
    fn rhs(&self, t: f64, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let v = self.0.velocity(y, &vec![t; y.nrows()])?;
        if v.dim() != y.dim() {
            return Err(Error::Shape(format!("field returned {:?} for state {:?}", v.dim(), y.dim())));
        }
        Ok(v)
    }
}

/// State `[x, l]` with `dl/dt = -div v`.
struct WithLogdet<'a>(&'a dyn DivergenceField);

impl System for WithLogdet<'_> {
    fn rhs(&self, t: f64, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let d = y.ncols() - 1;
        let (v, div) = self.0.velocity_and_divergence(y.slice(s![.., ..d]), &vec![t; y.nrows()])?;
        if v.dim() != (y.nrows(), d) || div.len() != y.nrows() {
            return Err(Error::Shape("divergence field output does not match state".into()));
        }
        let mut out = Array2::zeros(y.dim());
        out.slice_mut(s![.., ..d]).assign(&v);
        for (o, dv) in out.column_mut(d).iter_mut().zip(div) {
            *o = -dv;
        }
        Ok(out)
    }
}

fn check_finite(a: &Array2<f64>, t: f64) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("vector field output at t={t}")))
    }
}

/// `y + h * sum_j c_j k_j`
fn combine(y: &Array2<f64>, h: f64, terms: &[(f64, &Array2<f64>)]) -> Array2<f64> {
    let mut out = y.clone();
    for &(c, k) in terms {
        if c != 0.0 {
            out.scaled_add(h * c, k);
        }
    }
    out
}

struct Recorder {
    record: bool,
    times: Vec<f64>,
    states: Vec<Array2<f64>>,
}

impl Recorder {
    fn new(record: bool, t0: f64, y0: Array2<f64>) -> Self {
        Recorder {
            record,
            times: vec![t0],
            states: vec![y0],
        }
    }

    fn push(&mut self, t: f64, y: &Array2<f64>) {
        if self.record || self.times.len() < 2 {
            self.times.push(t);
            self.states.push(y.clone());
        } else {
            *self.times.last_mut().unwrap() = t;
            *self.states.last_mut().unwrap() = y.clone();
        }
    }
}

fn solve(sys: &dyn System, y0: Array2<f64>, opts: &IntegrateOpts) -> Result<Trajectory> {
    if !opts.t0.is_finite() || !opts.t1.is_finite() {
        return Err(Error::InvalidArgument("non-finite time span".into()));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state".into()));
    }
    match opts.method.fixed_steps()? {
        Some(steps) => solve_fixed(sys, y0, opts, steps),
        None => match opts.method {
            Method::Adaptive54 { atol, rtol } => solve_dopri5(sys, y0, opts, atol, rtol),
            _ => unreachable!(),
        },
    }
}

fn solve_fixed(sys: &dyn System, y0: Array2<f64>, opts: &IntegrateOpts, steps: usize) -> Result<Trajectory> {
    let (t0, t1) = (opts.t0, opts.t1);
    let h = (t1 - t0) / steps as f64;
    let mut rec = Recorder::new(opts.record_trajectory, t0, y0.clone());
    let mut y = y0;
    let mut nfe = 0;
    let mut eval = |t: f64, y: &Array2<f64>| -> Result<Array2<f64>> {
        nfe += 1;
        let k = sys.rhs(t, y.view())?;
        check_finite(&k, t)?;
        Ok(k)
    };
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        y = match opts.method {
            Method::Euler { .. } => {
                let k1 = eval(t, &y)?;
                combine(&y, h, &[(1.0, &k1)])
            }
            Method::Midpoint { .. } => {
                let k1 = eval(t, &y)?;
                let mid = combine(&y, 0.5 * h, &[(1.0, &k1)]);
                let k2 = eval(t + 0.5 * h, &mid)?;
                combine(&y, h, &[(1.0, &k2)])
            }
            Method::Rk4 { .. } => {
                let k1 = eval(t, &y)?;
                let k2 = eval(t + 0.5 * h, &combine(&y, 0.5 * h, &[(1.0, &k1)]))?;
                let k3 = eval(t + 0.5 * h, &combine(&y, 0.5 * h, &[(1.0, &k2)]))?;
                let k4 = eval(t + h, &combine(&y, h, &[(1.0, &k3)]))?;
                combine(&y, h / 6.0, &[(1.0, &k1), (2.0, &k2), (2.0, &k3), (1.0, &k4)])
            }
            Method::Adaptive54 { .. } => unreachable!(),
        };
        let t_next = if i + 1 == steps { t1 } else { t0 + (i + 1) as f64 * h };
        rec.push(t_next, &y);
    }
    Ok(Trajectory {
        times: rec.times,
        states: rec.states,
        nfe,
        rejected_steps: 0,
    })
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 6] = [0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [0.2];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const B: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const MIN_STEP: f64 = 1e-12;
const SAFETY: f64 = 0.9;
const BETA: f64 = 0.04;
const MAX_GROW: f64 = 10.0;
const MAX_SHRINK: f64 = 0.2;

/// Max over rows of the RMS of `err / (atol + rtol * max(|y0|, |y1|))`.
fn error_norm(err: &Array2<f64>, y0: &Array2<f64>, y1: &Array2<f64>, atol: f64, rtol: f64) -> f64 {
    let m = err.ncols() as f64;
    let mut worst: f64 = 0.0;
    for ((e, a), b) in err.rows().into_iter().zip(y0.rows()).zip(y1.rows()) {
        let mut acc = 0.0;
        Zip::from(&e).and(&a).and(&b).for_each(|&e, &a, &b| {
            let sc = atol + rtol * a.abs().max(b.abs());
            acc += (e / sc) * (e / sc);
        });
        worst = worst.max((acc / m).sqrt());
    }
    worst
}

fn scaled_norm(v: &Array2<f64>, y: &Array2<f64>, atol: f64, rtol: f64) -> f64 {
    error_norm(v, y, y, atol, rtol)
}

fn solve_dopri5(
    sys: &dyn System,
    y0: Array2<f64>,
    opts: &IntegrateOpts,
    atol: f64,
    rtol: f64,
) -> Result<Trajectory> {
    let (t0, t1) = (opts.t0, opts.t1);
    let mut rec = Recorder::new(opts.record_trajectory, t0, y0.clone());
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(Trajectory {
            times: rec.times,
            states: rec.states,
            nfe: 0,
            rejected_steps: 0,
        });
    }
    let dir = span.signum();
    let mut nfe = 0;
    let mut eval = |t: f64, y: &Array2<f64>| -> Result<Array2<f64>> {
        nfe += 1;
        let k = sys.rhs(t, y.view())?;
        check_finite(&k, t)?;
        Ok(k)
    };

    let mut y = y0;
    let mut t = t0;
    let mut k1 = eval(t, &y)?;

    // Initial step selection (Hairer, Norsett & Wanner, II.4).
    let mut h = {
        let d0 = scaled_norm(&y, &y, atol, rtol);
        let d1 = scaled_norm(&k1, &y, atol, rtol);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let y1 = combine(&y, dir * h0, &[(1.0, &k1)]);
        let f1 = eval(t + dir * h0, &y1)?;
        let d2 = scaled_norm(&(&f1 - &k1), &y, atol, rtol) / h0;
        let dm = d1.max(d2);
        let h1 = if dm <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / dm).powf(0.2)
        };
        (100.0 * h0).min(h1).min(span.abs())
    };

    let mut fac_old: f64 = 1e-4;
    let mut rejected_steps = 0;
    let mut last_rejected = false;
    let expo = 0.2 - BETA * 0.75;
    loop {
        let remaining = (t1 - t) * dir;
        if remaining <= 0.0 {
            break;
        }
        let last = h >= remaining;
        let hs = if last { remaining } else { h } * dir;
        if hs.abs() < MIN_STEP {
            return Err(Error::StepUnderflow { t, dt: hs.abs() });
        }
        let k2 = eval(t + C[0] * hs, &combine(&y, hs, &[(A2[0], &k1)]))?;
        let k3 = eval(t + C[1] * hs, &combine(&y, hs, &[(A3[0], &k1), (A3[1], &k2)]))?;
        let k4 = eval(
            t + C[2] * hs,
            &combine(&y, hs, &[(A4[0], &k1), (A4[1], &k2), (A4[2], &k3)]),
        )?;
        let k5 = eval(
            t + C[3] * hs,
            &combine(&y, hs, &[(A5[0], &k1), (A5[1], &k2), (A5[2], &k3), (A5[3], &k4)]),
        )?;
        let k6 = eval(
            t + C[4] * hs,
            &combine(
                &y,
                hs,
                &[(A6[0], &k1), (A6[1], &k2), (A6[2], &k3), (A6[3], &k4), (A6[4], &k5)],
            ),
        )?;
        let y_new = combine(
            &y,
            hs,
            &[(B[0], &k1), (B[2], &k3), (B[3], &k4), (B[4], &k5), (B[5], &k6)],
        );
        let t_new = if last { t1 } else { t + hs };
        let k7 = eval(t + C[5] * hs, &y_new)?;
        let err = combine(
            &Array2::zeros(y.dim()),
            hs,
            &[(E[0], &k1), (E[2], &k3), (E[3], &k4), (E[4], &k5), (E[5], &k6), (E[6], &k7)],
        );
        let err_norm = error_norm(&err, &y, &y_new, atol, rtol);
        if !err_norm.is_finite() {
            return Err(Error::NonFinite(format!("error estimate at t={t}")));
        }
        if err_norm <= 1.0 {
            let mut fac = SAFETY * err_norm.max(1e-16).powf(-expo) * fac_old.powf(BETA);
            fac = fac.clamp(MAX_SHRINK, MAX_GROW);
            if last_rejected {
                fac = fac.min(1.0);
            }
            fac_old = err_norm.max(1e-4);
            t = t_new;
            y = y_new;
            k1 = k7;
            rec.push(t, &y);
            h = hs.abs() * fac;
            last_rejected = false;
        } else {
            rejected_steps += 1;
            let fac = (SAFETY * err_norm.powf(-expo)).max(MAX_SHRINK);
            h = hs.abs() * fac;
            last_rejected = true;
        }
    }
    Ok(Trajectory {
        times: rec.times,
        states: rec.states,
        nfe,
        rejected_steps,
    })
}

fn check_input(dim: usize, x: &ArrayView2<'_, f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::EmptyBatch("ode initial state"));
    }
    if x.ncols() != dim {
        return Err(Error::Shape(format!("state has {} columns, field dimension {dim}", x.ncols())));
    }
    Ok(())
}

/// Integrates `dx/dt = v(t, x)` for every row of `x0`.
pub fn integrate(field: &dyn VelocityField, x0: ArrayView2<'_, f64>, opts: &IntegrateOpts) -> Result<Trajectory> {
    check_input(field.dim(), &x0)?;
    solve(&Plain(field), x0.to_owned(), opts)
}

/// Endpoint of [`integrate`] without keeping the path.
pub fn flow_map(field: &dyn VelocityField, x0: ArrayView2<'_, f64>, method: Method, t0: f64, t1: f64) -> Result<Array2<f64>> {
    let opts = IntegrateOpts {
        method,
        t0,
        t1,
        record_trajectory: false,
    };
    Ok(integrate(field, x0, &opts)?.into_final_state())
}

#[derive(Clone, Debug)]
pub struct LogdetOutput {
    pub endpoint: Array2<f64>,
    /// `-integral of div v` from `t0` to `t1`, per row.
    pub delta_logp: Vec<f64>,
    pub nfe: usize,
}

/// Integrates the state together with `-div v`.
///
/// Forward from `t = 0` this gives `log p_1(x_1) = log p_0(x_0) + delta_logp`;
/// backward from `t = 1` it gives `log p_1(x) = log p_0(x_0) - delta_logp`.
pub fn integrate_with_logdet(
    field: &dyn DivergenceField,
    x: ArrayView2<'_, f64>,
    opts: &IntegrateOpts,
) -> Result<LogdetOutput> {
    check_input(field.dim(), &x)?;
    let (n, d) = x.dim();
    let mut y0 = Array2::zeros((n, d + 1));
    y0.slice_mut(s![.., ..d]).assign(&x);
    let traj = solve(&WithLogdet(field), y0, opts)?;
    let nfe = traj.nfe;
    let y = traj.into_final_state();
    Ok(LogdetOutput {
        endpoint: y.slice(s![.., ..d]).to_owned(),
        delta_logp: y.index_axis(Axis(1), d).to_vec(),
        nfe,
    })
}

/// Log-density of the time-1 pushforward of `base` under the flow of `field`.
pub fn model_log_density(
    field: &dyn DivergenceField,
    base: &Gmm,
    x: ArrayView2<'_, f64>,
    method: Method,
) -> Result<Vec<f64>> {
    if base.dim() != field.dim() {
        return Err(Error::Shape(format!(
            "base dimension {} vs field dimension {}",
            base.dim(),
            field.dim()
        )));
    }
    let out = integrate_with_logdet(field, x, &IntegrateOpts::backward(method))?;
    let base_lp = base.log_density_batch(out.endpoint.view())?;
    Ok(base_lp.iter().zip(&out.delta_logp).map(|(lp, dl)| lp - dl).collect())
}
