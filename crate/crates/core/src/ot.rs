//! Exact (assignment) and entropic (Sinkhorn) couplings between two batches of
//! equal size, plus a brute-force reference solver.

use ndarray::{Array1, Array2, ArrayView2};

use crate::cost::CostMatrix;
use crate::error::{Error, Result};

/// Largest `k` accepted by [`brute_force_assignment`].
pub const BRUTE_FORCE_MAX_K: usize = 8;

/// A bijection of `0..k`; `sigma[i]` is the target matched to source `i`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Permutation {
    sigma: Vec<usize>,
}

impl Permutation {
    pub fn new(sigma: Vec<usize>) -> Result<Self> {
        let k = sigma.len();
        let mut seen = vec![false; k];
        for &j in &sigma {
            if j >= k || seen[j] {
                return Err(Error::InvalidArgument(format!(
                    "{sigma:?} is not a permutation of 0..{k}"
                )));
            }
            seen[j] = true;
        }
        Ok(Permutation { sigma })
    }

    pub fn identity(k: usize) -> Self {
        Permutation {
            sigma: (0..k).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.sigma
    }

    pub fn target(&self, i: usize) -> usize {
        self.sigma[i]
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.k()];
        for (i, &j) in self.sigma.iter().enumerate() {
            inv[j] = i;
        }
        Permutation { sigma: inv }
    }

    pub fn to_matrix(&self) -> DoublyStochastic {
        let k = self.k();
        let mut pi = Array2::zeros((k, k));
        for (i, &j) in self.sigma.iter().enumerate() {
            pi[[i, j]] = 1.0;
        }
        DoublyStochastic { pi }
    }
}

/// Nonnegative `k x k` matrix whose rows and columns each sum to 1.
///
/// This is `k` times a transport plan between two uniform empirical measures,
/// so permutation matrices are the special case with entries in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DoublyStochastic {
    pi: Array2<f64>,
}

impl DoublyStochastic {
    pub fn new(pi: Array2<f64>, tol: f64) -> Result<Self> {
        if !pi.is_square() || pi.nrows() == 0 {
            return Err(Error::Shape("coupling matrix must be square".into()));
        }
        if pi.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "coupling matrix entries must be finite and nonnegative".into(),
            ));
        }
        let ds = DoublyStochastic { pi };
        let err = ds.marginal_violation();
        if err > tol {
            return Err(Error::InvalidArgument(format!(
                "marginal violation {err:e} exceeds {tol:e}"
            )));
        }
        Ok(ds)
    }

    pub fn uniform(k: usize) -> Self {
        DoublyStochastic {
            pi: Array2::from_elem((k, k), 1.0 / k as f64),
        }
    }

    pub fn k(&self) -> usize {
        self.pi.nrows()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.pi.view()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pi[[i, j]]
    }

    /// Largest deviation of any row or column sum from 1.
    pub fn marginal_violation(&self) -> f64 {
        let rows = self.pi.sum_axis(ndarray::Axis(1));
        let cols = self.pi.sum_axis(ndarray::Axis(0));
        rows.iter()
            .chain(cols.iter())
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Expected cost `<pi / k, C>` of a pair drawn from the plan.
    pub fn transport_cost(&self, c: &CostMatrix) -> f64 {
        let k = self.k() as f64;
        (&self.pi * &c.values()).sum() / k
    }
}

/// `sum_i C[i][sigma(i)]`, accumulated in source order.
pub fn assignment_cost(c: &CostMatrix, p: &Permutation) -> Result<f64> {
    if c.k() != p.k() {
        return Err(Error::Shape(format!(
            "cost matrix is {0}x{0}, permutation has length {1}",
            c.k(),
            p.k()
        )));
    }
    Ok(p
        .sigma
        .iter()
        .enumerate()
        .map(|(i, &j)| c.get(i, j))
        .sum())
}

/// Rearranges `v` into the next lexicographic permutation; false after the last one.
fn next_permutation(v: &mut [usize]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Minimum-cost assignment by enumerating all `k!` permutations.
///
/// Ties go to the lexicographically smallest permutation.
pub fn brute_force_assignment(c: &CostMatrix) -> Result<(Permutation, f64)> {
    let k = c.k();
    if k > BRUTE_FORCE_MAX_K {
        return Err(Error::InvalidArgument(format!(
            "brute force limited to k <= {BRUTE_FORCE_MAX_K}, got {k}"
        )));
    }
    let mut current: Vec<usize> = (0..k).collect();
    let mut best = current.clone();
    let mut best_cost = f64::INFINITY;
    loop {
        let cost: f64 = current.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum();
        if cost < best_cost {
            best_cost = cost;
            best.copy_from_slice(&current);
        }
        if !next_permutation(&mut current) {
            break;
        }
    }
    Ok((Permutation { sigma: best }, best_cost))
}

/// Exact linear assignment in `O(k^3)`.
///
/// Shortest augmenting paths with dual potentials (the Hungarian method in
/// its Jonker-Volgenant form): rows are inserted one at a time and each
/// insertion runs a Dijkstra-like search over reduced costs.
pub fn solve_exact_assignment(c: &CostMatrix) -> Result<(Permutation, f64)> {
    let k = c.k();
    // 1-based bookkeeping; index 0 is a virtual column used as the search root.
    let mut u = vec![0.0f64; k + 1];
    let mut v = vec![0.0f64; k + 1];
    let mut col_owner = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    let mut min_to = vec![0.0f64; k + 1];
    let mut used = vec![false; k + 1];

    for row in 1..=k {
        col_owner[0] = row;
        let mut j0 = 0usize;
        min_to.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let reduced = c.get(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            if j1 == 0 {
                return Err(Error::NonFinite(
                    "assignment search found no augmenting column".into(),
                ));
            }
            for j in 0..=k {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        // augment along the alternating path back to the root
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut sigma = vec![0usize; k];
    for j in 1..=k {
        sigma[col_owner[j] - 1] = j - 1;
    }
    let p = Permutation::new(sigma)?;
    let cost = assignment_cost(c, &p)?;
    Ok((p, cost))
}

#[derive(Clone, Debug)]
pub struct SinkhornOpts {
    pub epsilon: f64,
    pub max_iter: usize,
    /// Stop once every row and column sum of the normalized plan is within `tol` of 1.
    pub tol: f64,
    /// Anneal epsilon geometrically from `max(C)` down to `epsilon`, warm-starting
    /// each stage from the previous potentials.
    pub eps_scaling: bool,
}

impl SinkhornOpts {
    pub fn new(epsilon: f64, max_iter: usize, tol: f64) -> Self {
        SinkhornOpts {
            epsilon,
            max_iter,
            tol,
            eps_scaling: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornOutput {
    pub pi: DoublyStochastic,
    pub converged: bool,
    /// Scaling iterations over all annealing stages.
    pub iterations: usize,
    /// Final largest row/column deviation from 1.
    pub violation: f64,
}

/// Entropic coupling, see [`sinkhorn_with`].
pub fn sinkhorn(c: &CostMatrix, epsilon: f64, max_iter: usize, tol: f64) -> Result<SinkhornOutput> {
    sinkhorn_with(c, &SinkhornOpts::new(epsilon, max_iter, tol))
}

/// Scaling values outside `exp(+-ABSORB_LOG)` are folded into the potentials.
const ABSORB_LOG: f64 = 30.0;
/// Kernel products below this trigger a log-domain re-centering.
const TINY: f64 = 1e-250;

struct LogSinkhorn<'a> {
    c: ArrayView2<'a, f64>,
    k: usize,
    log_marginal: f64,
    f: Array1<f64>,
    g: Array1<f64>,
    iterations: usize,
}

impl LogSinkhorn<'_> {
    /// One exact log-domain sweep: rows, then columns.
    fn log_sweep(&mut self, eps: f64) {
        let k = self.k;
        let mut buf = vec![0.0; k];
        for i in 0..k {
            for j in 0..k {
                buf[j] = (self.g[j] - self.c[[i, j]]) / eps;
            }
            self.f[i] = eps * (self.log_marginal - crate::data::log_sum_exp(&buf));
        }
        for j in 0..k {
            for i in 0..k {
                buf[i] = (self.f[i] - self.c[[i, j]]) / eps;
            }
            self.g[j] = eps * (self.log_marginal - crate::data::log_sum_exp(&buf));
        }
        self.iterations += 1;
    }

    fn kernel(&self, eps: f64) -> Array2<f64> {
        Array2::from_shape_fn((self.k, self.k), |(i, j)| {
            ((self.f[i] + self.g[j] - self.c[[i, j]]) / eps).exp()
        })
    }

    /// Row violation of the plan `exp((f + g - C) / eps)`; columns are exact after a sweep.
    fn violation(&self, eps: f64) -> f64 {
        let k = self.k as f64;
        let kern = self.kernel(eps);
        let rows = kern.sum_axis(ndarray::Axis(1));
        let cols = kern.sum_axis(ndarray::Axis(0));
        rows.iter()
            .chain(cols.iter())
            .map(|s| (s * k - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Runs stabilized scaling iterations at a fixed `eps`. Returns true on convergence.
    fn run_stage(&mut self, eps: f64, max_iter: usize, tol: f64) -> bool {
        let k = self.k;
        let a = 1.0 / k as f64;
        let budget_end = self.iterations + max_iter;
        loop {
            self.log_sweep(eps);
            if self.violation(eps) < tol {
                return true;
            }
            if self.iterations >= budget_end {
                return false;
            }
            let kern = self.kernel(eps);
            let mut u = Array1::<f64>::ones(k);
            let mut v = Array1::<f64>::ones(k);
            loop {
                let kv = kern.dot(&v);
                if kv.iter().any(|&s| !(s > TINY)) {
                    break;
                }
                let err = u
                    .iter()
                    .zip(kv.iter())
                    .map(|(ui, s)| (ui * s / a - 1.0).abs())
                    .fold(0.0, f64::max);
                if err < tol {
                    self.absorb(eps, &u, &v);
                    return true;
                }
                if self.iterations >= budget_end {
                    self.absorb(eps, &u, &v);
                    return false;
                }
                let u_new = kv.mapv(|s| a / s);
                let ktu = kern.t().dot(&u_new);
                if ktu.iter().any(|&s| !(s > TINY)) {
                    break;
                }
                u = u_new;
                v = ktu.mapv(|s| a / s);
                self.iterations += 1;
                let drift = u
                    .iter()
                    .chain(v.iter())
                    .map(|x| x.ln().abs())
                    .fold(0.0, f64::max);
                if drift > ABSORB_LOG {
                    break;
                }
            }
            self.absorb(eps, &u, &v);
        }
    }

    fn absorb(&mut self, eps: f64, u: &Array1<f64>, v: &Array1<f64>) {
        self.f.zip_mut_with(u, |f, &x| *f += eps * x.ln());
        self.g.zip_mut_with(v, |g, &x| *g += eps * x.ln());
    }
}

/// Entropy-regularized coupling computed in the log domain.
///
/// Iterates until the largest row/column violation of the normalized plan is
/// below `tol` or the iteration budget is spent; the returned matrix is always
/// a valid nonnegative matrix, with `converged` telling which case occurred.
pub fn sinkhorn_with(c: &CostMatrix, opts: &SinkhornOpts) -> Result<SinkhornOutput> {
    if !(opts.epsilon > 0.0) || !opts.epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sinkhorn epsilon must be positive, got {}",
            opts.epsilon
        )));
    }
    let k = c.k();
    if k == 1 {
        return Ok(SinkhornOutput {
            pi: DoublyStochastic {
                pi: Array2::ones((1, 1)),
            },
            converged: true,
            iterations: 0,
            violation: 0.0,
        });
    }
    let mut state = LogSinkhorn {
        c: c.values(),
        k,
        log_marginal: -(k as f64).ln(),
        f: Array1::zeros(k),
        g: Array1::zeros(k),
        iterations: 0,
    };

    let scale = c.max() - c.values().iter().copied().fold(f64::INFINITY, f64::min);
    let mut eps = if opts.eps_scaling && scale > opts.epsilon {
        scale
    } else {
        opts.epsilon
    };
    while eps > opts.epsilon {
        state.run_stage(eps, opts.max_iter, opts.tol.max(1e-3));
        eps = (eps * 0.5).max(opts.epsilon);
        if eps <= opts.epsilon * 1.0000001 {
            eps = opts.epsilon;
            break;
        }
    }
    state.run_stage(eps, opts.max_iter, opts.tol);

    let plan = state.kernel(eps).mapv(|x| x * k as f64);
    let pi = DoublyStochastic { pi: plan };
    let violation = pi.marginal_violation();
    if pi.pi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sinkhorn plan".into()));
    }
    Ok(SinkhornOutput {
        converged: violation < opts.tol,
        pi,
        iterations: state.iterations,
        violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{cost_matrix, CostFn};
    use crate::data::Gmm;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random_cost(k: usize, rng: &mut Rng) -> CostMatrix {
        CostMatrix::from_array(Array2::from_shape_simple_fn((k, k), || rng.uniform())).unwrap()
    }

    fn gaussian_cost(k: usize, seed: u64) -> CostMatrix {
        let mut rng = Rng::new(seed);
        let g = Gmm::standard_normal(2);
        let x0 = g.sample(&mut rng, k).unwrap();
        let x1 = g.sample(&mut rng, k).unwrap();
        cost_matrix(&x0, &x1, &CostFn::SquaredEuclidean).unwrap()
    }

    #[test]
    fn permutation_validation() {
        assert!(Permutation::new(vec![1, 0, 2]).is_ok());
        assert!(Permutation::new(vec![1, 1, 2]).is_err());
        assert!(Permutation::new(vec![0, 3]).is_err());
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        assert_eq!(p.inverse().as_slice(), &[1, 2, 0]);
    }

    #[test]
    fn brute_force_small_cases() {
        let c = CostMatrix::from_rows(&[vec![3.5]]).unwrap();
        let (p, cost) = brute_force_assignment(&c).unwrap();
        assert_eq!(p.as_slice(), &[0]);
        assert_eq!(cost, 3.5);

        let c = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let (p, cost) = brute_force_assignment(&c).unwrap();
        assert_eq!(p.as_slice(), &[0, 1]);
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn brute_force_ties_pick_lexicographic_first() {
        let c = CostMatrix::from_array(Array2::ones((3, 3))).unwrap();
        assert_eq!(brute_force_assignment(&c).unwrap().0.as_slice(), &[0, 1, 2]);
    }

    #[test]
    fn brute_force_is_minimal_over_all_permutations() {
        let mut rng = Rng::new(5);
        let c = random_cost(5, &mut rng);
        let (_, best) = brute_force_assignment(&c).unwrap();
        let mut perm: Vec<usize> = (0..5).collect();
        let mut count = 0;
        loop {
            let p = Permutation::new(perm.clone()).unwrap();
            assert!(assignment_cost(&c, &p).unwrap() >= best);
            count += 1;
            if !next_permutation(&mut perm) {
                break;
            }
        }
        assert_eq!(count, 120);
    }

    #[test]
    fn brute_force_rejects_large_k() {
        let c = CostMatrix::from_array(Array2::zeros((9, 9))).unwrap();
        assert!(brute_force_assignment(&c).is_err());
    }

    #[test]
    fn exact_solver_finds_hidden_zero_permutation() {
        let sigma = [3usize, 0, 4, 1, 2];
        let c = Array2::from_shape_fn((5, 5), |(i, j)| if sigma[i] == j { 0.0 } else { 1.0 + (i * j) as f64 });
        let (p, cost) = solve_exact_assignment(&CostMatrix::from_array(c).unwrap()).unwrap();
        assert_eq!(p.as_slice(), &sigma);
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn exact_solver_matches_brute_force() {
        let mut rng = Rng::new(17);
        for trial in 0..100 {
            let k = 1 + trial % 7;
            let c = random_cost(k, &mut rng);
            let (_, exact) = solve_exact_assignment(&c).unwrap();
            let (_, brute) = brute_force_assignment(&c).unwrap();
            assert!((exact - brute).abs() < 1e-9, "k={k}: {exact} vs {brute}");
        }
    }

    #[test]
    fn exact_solver_large_batch_beats_identity() {
        let c = gaussian_cost(512, 1);
        let (p, cost) = solve_exact_assignment(&c).unwrap();
        let identity = assignment_cost(&c, &Permutation::identity(512)).unwrap();
        assert_eq!(p.k(), 512);
        assert!(cost <= identity);
    }

    #[test]
    fn assignment_cost_examples() {
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(assignment_cost(&c, &Permutation::identity(2)).unwrap(), 0.0);
        let swap = Permutation::new(vec![1, 0]).unwrap();
        assert_eq!(assignment_cost(&c, &swap).unwrap(), 2.0);
        let (p, reported) = brute_force_assignment(&gaussian_cost(6, 3)).unwrap();
        assert_eq!(assignment_cost(&gaussian_cost(6, 3), &p).unwrap(), reported);
    }

    #[test]
    fn sinkhorn_large_epsilon_is_uniform() {
        let c = gaussian_cost(8, 2);
        let out = sinkhorn(&c, 1e3 * c.max(), 1000, 1e-9).unwrap();
        assert!(out.converged);
        for v in out.pi.values() {
            assert!((v - 1.0 / 8.0).abs() < 1e-3);
        }
    }

    #[test]
    fn sinkhorn_small_epsilon_recovers_exact_cost() {
        let c = gaussian_cost(16, 4);
        let out = sinkhorn(&c, 1e-3 * c.median(), 100_000, 1e-6).unwrap();
        let (_, exact) = solve_exact_assignment(&c).unwrap();
        let entropic = out.pi.transport_cost(&c);
        assert!((entropic - exact / 16.0).abs() < 0.01 * exact / 16.0, "{entropic} vs {}", exact / 16.0);
    }

    #[test]
    fn sinkhorn_single_point() {
        let c = CostMatrix::from_rows(&[vec![2.0]]).unwrap();
        for eps in [1e-6, 1.0, 1e6] {
            let out = sinkhorn(&c, eps, 10, 1e-9).unwrap();
            assert_eq!(out.pi.get(0, 0), 1.0);
        }
    }

    #[test]
    fn sinkhorn_rejects_nonpositive_epsilon() {
        let c = gaussian_cost(3, 0);
        assert!(sinkhorn(&c, 0.0, 10, 1e-6).is_err());
        assert!(sinkhorn(&c, -1.0, 10, 1e-6).is_err());
    }

    #[test]
    fn sinkhorn_reports_non_convergence() {
        let c = gaussian_cost(32, 6);
        let out = sinkhorn_with(
            &c,
            &SinkhornOpts {
                epsilon: 1e-3 * c.mean(),
                max_iter: 2,
                tol: 1e-12,
                eps_scaling: false,
            },
        )
        .unwrap();
        assert!(!out.converged);
        assert!(out.pi.values().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn sinkhorn_cost_decreases_with_epsilon() {
        for seed in 0..5 {
            let c = gaussian_cost(12, 100 + seed);
            let mean = c.mean();
            let costs: Vec<f64> = [10.0, 1.0, 0.1, 0.01]
                .iter()
                .map(|s| sinkhorn(&c, s * mean, 100_000, 1e-9).unwrap().pi.transport_cost(&c))
                .collect();
            for w in costs.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{costs:?}");
            }
        }
    }

    #[test]
    fn sinkhorn_tiny_epsilon_stays_finite() {
        let c = gaussian_cost(10, 8);
        let mut entries: Vec<f64> = c.values().iter().copied().collect();
        entries.sort_by(f64::total_cmp);
        let gap = entries
            .windows(2)
            .map(|w| w[1] - w[0])
            .filter(|&d| d > 0.0)
            .fold(f64::INFINITY, f64::min);
        let out = sinkhorn(&c, 1e-4 * gap, 2000, 1e-8).unwrap();
        assert!(out.pi.values().iter().all(|v| v.is_finite()));
        assert!(out.violation.is_finite());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn converged_plans_have_unit_marginals(seed in 0u64..10_000, k in 2usize..20, rel in 0.01f64..5.0) {
            let c = gaussian_cost(k, seed);
            let out = sinkhorn(&c, rel * c.mean(), 20_000, 1e-9).unwrap();
            if out.converged {
                prop_assert!(out.pi.marginal_violation() < 1e-9);
            }
        }

        #[test]
        fn exact_never_worse_than_sinkhorn(seed in 0u64..10_000, k in 2usize..24) {
            let c = gaussian_cost(k, seed);
            let (_, exact) = solve_exact_assignment(&c).unwrap();
            let out = sinkhorn(&c, 0.1 * c.mean(), 20_000, 1e-9).unwrap();
            prop_assert!(exact / k as f64 <= out.pi.transport_cost(&c) + 1e-9);
        }
    }
}
