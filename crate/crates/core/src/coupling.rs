//! Multisample joint distributions: draw `k` points from each marginal,
//! couple the two batches, and emit pairs from the coupling.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::cost::{cost_matrix, CostFn, CostMatrix};
use crate::data::{Batch, Source};
use crate::error::{Error, Result};
use crate::matching::{
    count_blocking_pairs, heuristic_coupling_with_stats, rankings_from_cost,
    stable_coupling_with_stats,
};
use crate::ot::{
    assignment_cost, sinkhorn_with, solve_exact_assignment, DoublyStochastic, Permutation,
    SinkhornOpts,
};
use crate::rng::Rng;
use crate::stats::Estimate;

/// Entropic regularization strength.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Epsilon {
    Absolute(f64),
    /// Multiple of the mean entry of each batch's cost matrix.
    RelativeToMean(f64),
}

impl Epsilon {
    pub fn resolve(&self, c: &CostMatrix) -> f64 {
        match *self {
            Epsilon::Absolute(e) => e,
            Epsilon::RelativeToMean(s) => s * c.mean(),
        }
    }
}

impl Default for Epsilon {
    fn default() -> Self {
        Epsilon::RelativeToMean(0.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CouplerKind {
    /// Independent pairing (the plain conditional-OT flow matching baseline).
    Uniform,
    BatchOt,
    BatchEot {
        epsilon: Epsilon,
        max_iter: usize,
        tol: f64,
    },
    Stable,
    Heuristic,
}

impl CouplerKind {
    pub fn batch_eot(epsilon: Epsilon) -> Self {
        CouplerKind::BatchEot {
            epsilon,
            max_iter: 10_000,
            tol: 1e-6,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CouplerKind::Uniform => "uniform",
            CouplerKind::BatchOt => "batch_ot",
            CouplerKind::BatchEot { .. } => "batch_eot",
            CouplerKind::Stable => "stable",
            CouplerKind::Heuristic => "heuristic",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coupler {
    pub kind: CouplerKind,
    /// Ignored by [`CouplerKind::Uniform`].
    pub cost: CostFn,
}

impl Coupler {
    pub fn new(kind: CouplerKind, cost: CostFn) -> Result<Self> {
        if let CouplerKind::BatchEot { epsilon, tol, .. } = &kind {
            let e = match epsilon {
                Epsilon::Absolute(e) | Epsilon::RelativeToMean(e) => *e,
            };
            if !(e > 0.0) || !e.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "batch_eot epsilon must be positive, got {e}"
                )));
            }
            if !(*tol > 0.0) {
                return Err(Error::InvalidArgument("batch_eot tol must be positive".into()));
            }
        }
        Ok(Coupler { kind, cost })
    }

    pub fn uniform() -> Self {
        Coupler {
            kind: CouplerKind::Uniform,
            cost: CostFn::SquaredEuclidean,
        }
    }

    pub fn batch_ot(cost: CostFn) -> Self {
        Coupler {
            kind: CouplerKind::BatchOt,
            cost,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn is_permutation(&self) -> bool {
        !matches!(self.kind, CouplerKind::BatchEot { .. })
    }
}

/// Result of coupling one pair of batches.
#[derive(Clone, Debug)]
pub enum BatchCoupling {
    Permutation(Permutation),
    Plan(DoublyStochastic),
}

/// Solver diagnostics for one coupled batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CouplingDiagnostics {
    pub coupler: String,
    pub k: usize,
    /// Expected cost of a pair drawn from the coupling, under the coupler's cost.
    pub mean_cost: f64,
    pub total_cost: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proposals: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocking_pairs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sinkhorn_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sinkhorn_converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub marginal_violation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

fn check_batches(x0: &Batch, x1: &Batch) -> Result<()> {
    if x0.k() != x1.k() || x0.dim() != x1.dim() {
        return Err(Error::Shape(format!(
            "cannot couple batches of shape {}x{} and {}x{}",
            x0.k(),
            x0.dim(),
            x1.k(),
            x1.dim()
        )));
    }
    Ok(())
}

/// Couples two equal-size batches and reports solver diagnostics.
pub fn couple_batches(
    c: &Coupler,
    x0: &Batch,
    x1: &Batch,
) -> Result<(BatchCoupling, CouplingDiagnostics)> {
    check_batches(x0, x1)?;
    let k = x0.k();
    let mut diag = CouplingDiagnostics {
        coupler: c.name().to_string(),
        k,
        ..Default::default()
    };
    if let CouplerKind::Uniform = c.kind {
        let p = Permutation::identity(k);
        let cm = cost_matrix(x0, x1, &c.cost)?;
        // expected cost under the independent plan
        diag.mean_cost = cm.mean();
        diag.total_cost = diag.mean_cost * k as f64;
        return Ok((BatchCoupling::Permutation(p), diag));
    }
    let cm = cost_matrix(x0, x1, &c.cost)?;
    let coupling = match &c.kind {
        CouplerKind::Uniform => unreachable!(),
        CouplerKind::BatchOt => {
            let (p, total) = solve_exact_assignment(&cm)?;
            diag.total_cost = total;
            BatchCoupling::Permutation(p)
        }
        CouplerKind::Stable => {
            let r = rankings_from_cost(&cm);
            let (p, stats) = stable_coupling_with_stats(&r);
            diag.proposals = Some(stats.proposals);
            diag.blocking_pairs = Some(count_blocking_pairs(&p, &r)?);
            diag.total_cost = assignment_cost(&cm, &p)?;
            BatchCoupling::Permutation(p)
        }
        CouplerKind::Heuristic => {
            let r = rankings_from_cost(&cm);
            let (p, stats) = heuristic_coupling_with_stats(&r, &cm)?;
            diag.proposals = Some(stats.proposals);
            diag.total_cost = assignment_cost(&cm, &p)?;
            BatchCoupling::Permutation(p)
        }
        CouplerKind::BatchEot {
            epsilon,
            max_iter,
            tol,
        } => {
            let eps = epsilon.resolve(&cm);
            let out = sinkhorn_with(&cm, &SinkhornOpts::new(eps, *max_iter, *tol))?;
            diag.epsilon = Some(eps);
            diag.sinkhorn_iterations = Some(out.iterations);
            diag.sinkhorn_converged = Some(out.converged);
            diag.marginal_violation = Some(out.violation);
            diag.total_cost = out.pi.transport_cost(&cm) * k as f64;
            BatchCoupling::Plan(out.pi)
        }
    };
    diag.mean_cost = diag.total_cost / k as f64;
    Ok((coupling, diag))
}

/// The doubly stochastic matrix of a coupler on two batches (rows and columns sum to 1).
pub fn coupling_matrix(c: &Coupler, x0: &Batch, x1: &Batch) -> Result<DoublyStochastic> {
    check_batches(x0, x1)?;
    if let CouplerKind::Uniform = c.kind {
        return Ok(DoublyStochastic::uniform(x0.k()));
    }
    Ok(match couple_batches(c, x0, x1)?.0 {
        BatchCoupling::Permutation(p) => p.to_matrix(),
        BatchCoupling::Plan(pi) => pi,
    })
}

/// Coupled pairs, row `i` of `x0` paired with row `i` of `x1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    x0: Array2<f64>,
    x1: Array2<f64>,
}

impl PairBatch {
    pub fn new(x0: Array2<f64>, x1: Array2<f64>) -> Result<Self> {
        if x0.dim() != x1.dim() || x0.nrows() == 0 {
            return Err(Error::Shape(format!(
                "pair arrays must be nonempty with equal shape, got {:?} and {:?}",
                x0.dim(),
                x1.dim()
            )));
        }
        Ok(PairBatch { x0, x1 })
    }

    pub fn len(&self) -> usize {
        self.x0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x0.ncols()
    }

    pub fn x0(&self) -> ArrayView2<'_, f64> {
        self.x0.view()
    }

    pub fn x1(&self) -> ArrayView2<'_, f64> {
        self.x1.view()
    }

    pub fn pair(&self, i: usize) -> (ArrayView1<'_, f64>, ArrayView1<'_, f64>) {
        (self.x0.row(i), self.x1.row(i))
    }

    pub fn costs(&self, cost: &CostFn) -> Result<Vec<f64>> {
        (0..self.len())
            .map(|i| cost.eval(self.x0.row(i), self.x1.row(i)))
            .collect()
    }

    /// Concatenates pair batches of the same dimension.
    pub fn concat(parts: &[PairBatch]) -> Result<Self> {
        let views0: Vec<_> = parts.iter().map(|p| p.x0.view()).collect();
        let views1: Vec<_> = parts.iter().map(|p| p.x1.view()).collect();
        let x0 = ndarray::concatenate(ndarray::Axis(0), &views0)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let x1 = ndarray::concatenate(ndarray::Axis(0), &views1)
            .map_err(|e| Error::Shape(e.to_string()))?;
        PairBatch::new(x0, x1)
    }
}

/// Emits `k` pairs from one coupled batch.
///
/// Permutations emit the matched pairs; a plan draws `i` uniformly and then
/// `j ~ pi(i, .)`, `k` times with replacement.
pub fn emit_pairs(coupling: &BatchCoupling, x0: &Batch, x1: &Batch, rng: &mut Rng) -> PairBatch {
    let (k, d) = (x0.k(), x0.dim());
    let mut a = Array2::zeros((k, d));
    let mut b = Array2::zeros((k, d));
    match coupling {
        BatchCoupling::Permutation(p) => {
            for i in 0..k {
                a.row_mut(i).assign(&x0.row(i));
                b.row_mut(i).assign(&x1.row(p.target(i)));
            }
        }
        BatchCoupling::Plan(pi) => {
            let pv = pi.values();
            for n in 0..k {
                let i = rng.index(k);
                let row = pv.row(i);
                let j = rng.categorical(row.as_slice().expect("standard layout"));
                a.row_mut(n).assign(&x0.row(i));
                b.row_mut(n).assign(&x1.row(j));
            }
        }
    }
    PairBatch { x0: a, x1: b }
}

/// Couples one freshly drawn pair of `k`-batches.
pub fn sample_coupled_batch(
    c: &Coupler,
    q0: &Source,
    q1: &Source,
    k: usize,
    rng: &mut Rng,
) -> Result<(PairBatch, CouplingDiagnostics)> {
    if k == 0 {
        return Err(Error::InvalidArgument("coupling batch size must be positive".into()));
    }
    let x0 = q0.sample(rng, k)?;
    let x1 = q1.sample(rng, k)?;
    let (coupling, diag) = couple_batches(c, &x0, &x1)?;
    Ok((emit_pairs(&coupling, &x0, &x1, rng), diag))
}

/// Stream of coupled pairs: fresh `k`-batches are drawn and coupled until
/// `n_pairs` pairs have been emitted (the last batch may be truncated).
pub fn sample_joint(
    c: &Coupler,
    q0: &Source,
    q1: &Source,
    k: usize,
    n_pairs: usize,
    rng: &mut Rng,
) -> Result<PairBatch> {
    if n_pairs == 0 {
        return Err(Error::EmptyBatch("requested zero pairs"));
    }
    let mut parts = Vec::with_capacity(n_pairs.div_ceil(k.max(1)));
    let mut emitted = 0;
    while emitted < n_pairs {
        let (pairs, _) = sample_coupled_batch(c, q0, q1, k, rng)?;
        let take = (n_pairs - emitted).min(pairs.len());
        parts.push(if take == pairs.len() {
            pairs
        } else {
            PairBatch {
                x0: pairs.x0.slice(ndarray::s![..take, ..]).to_owned(),
                x1: pairs.x1.slice(ndarray::s![..take, ..]).to_owned(),
            }
        });
        emitted += take;
    }
    PairBatch::concat(&parts)
}

/// Draws `batch_size` pairs as `batch_size / k` independently coupled blocks of size `k`.
pub fn sample_training_pairs(
    c: &Coupler,
    q0: &Source,
    q1: &Source,
    batch_size: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<PairBatch> {
    if k == 0 || batch_size % k != 0 {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} is not a multiple of coupling size {k}"
        )));
    }
    let blocks = (0..batch_size / k)
        .map(|_| sample_coupled_batch(c, q0, q1, k, rng).map(|(p, _)| p))
        .collect::<Result<Vec<_>>>()?;
    PairBatch::concat(&blocks)
}

/// Mean pair cost of a coupler at batch size `k`, over `resamples` independent batches.
///
/// Each resample contributes the exact expected pair cost of its coupling
/// (for permutation couplers, the average over the `k` matched pairs), and
/// resample `r` draws from `rng.split(r)`.
pub fn mean_coupling_cost(
    c: &Coupler,
    q0: &Source,
    q1: &Source,
    k: usize,
    resamples: usize,
    rng: &Rng,
    cost: &CostFn,
) -> Result<Estimate> {
    if resamples < 2 {
        return Err(Error::InvalidArgument("need at least 2 resamples".into()));
    }
    let per_batch = (0..resamples)
        .map(|r| {
            let mut sub = rng.split(r as u64);
            let x0 = q0.sample(&mut sub, k)?;
            let x1 = q1.sample(&mut sub, k)?;
            let (coupling, _) = couple_batches(c, &x0, &x1)?;
            let eval_cm = cost_matrix(&x0, &x1, cost)?;
            Ok(match (&c.kind, coupling) {
                (CouplerKind::Uniform, _) => eval_cm.mean(),
                (_, BatchCoupling::Permutation(p)) => assignment_cost(&eval_cm, &p)? / k as f64,
                (_, BatchCoupling::Plan(pi)) => pi.transport_cost(&eval_cm),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::from_samples(&per_batch))
}
