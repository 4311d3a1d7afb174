//! Rank-based couplings: Gale-Shapley stable matching and its cost-aware
//! heuristic variant.
//!
//! Sources (`x0`) propose to targets (`x1`). Unmatched sources are always
//! served in increasing index order, and every preference tie is broken toward
//! the smaller index, so both algorithms are deterministic functions of the
//! cost matrix.

use std::collections::BTreeSet;

use crate::cost::CostMatrix;
use crate::error::{Error, Result};
use crate::ot::Permutation;

/// Preference tables derived from a cost matrix.
///
/// `by_source[i]` lists target indices from most to least preferred;
/// `target_rank[j][i]` is the rank of source `i` in target `j`'s preferences
/// (0 = most preferred).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rankings {
    by_source: Vec<Vec<usize>>,
    target_rank: Vec<Vec<usize>>,
    source_rank: Vec<Vec<usize>>,
}

fn sorted_by_cost(k: usize, cost: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..k).collect();
    // stable sort keeps equal costs in index order
    order.sort_by(|&a, &b| cost(a).total_cmp(&cost(b)));
    order
}

fn inverse(order: &[usize]) -> Vec<usize> {
    let mut rank = vec![0; order.len()];
    for (r, &x) in order.iter().enumerate() {
        rank[x] = r;
    }
    rank
}

impl Rankings {
    /// Builds rankings from explicit preference lists.
    ///
    /// `by_source[i]` and `by_target[j]` must each be permutations of `0..k`.
    pub fn new(by_source: Vec<Vec<usize>>, by_target: Vec<Vec<usize>>) -> Result<Self> {
        let k = by_source.len();
        if by_target.len() != k {
            return Err(Error::Shape("ranking tables differ in size".into()));
        }
        for list in by_source.iter().chain(&by_target) {
            Permutation::new(list.clone())?;
            if list.len() != k {
                return Err(Error::Shape("preference list has wrong length".into()));
            }
        }
        let target_rank = by_target.iter().map(|l| inverse(l)).collect();
        let source_rank = by_source.iter().map(|l| inverse(l)).collect();
        Ok(Rankings {
            by_source,
            target_rank,
            source_rank,
        })
    }

    pub fn k(&self) -> usize {
        self.by_source.len()
    }

    pub fn source_preferences(&self, i: usize) -> &[usize] {
        &self.by_source[i]
    }

    pub fn target_rank(&self, j: usize, i: usize) -> usize {
        self.target_rank[j][i]
    }

    pub fn source_rank(&self, i: usize, j: usize) -> usize {
        self.source_rank[i][j]
    }
}

/// Preferences in increasing cost order, ties toward the smaller index.
pub fn rankings_from_cost(c: &CostMatrix) -> Rankings {
    let k = c.k();
    let by_source: Vec<Vec<usize>> = (0..k).map(|i| sorted_by_cost(k, |j| c.get(i, j))).collect();
    let by_target: Vec<Vec<usize>> = (0..k).map(|j| sorted_by_cost(k, |i| c.get(i, j))).collect();
    Rankings {
        target_rank: by_target.iter().map(|l| inverse(l)).collect(),
        source_rank: by_source.iter().map(|l| inverse(l)).collect(),
        by_source,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MatchStats {
    /// Number of (source, target) proposals made.
    pub proposals: usize,
    /// Number of times a matched source was displaced.
    pub reassignments: usize,
}

struct Proposer {
    next: Vec<usize>,
    owner: Vec<Option<usize>>,
    matched: Vec<Option<usize>>,
    free: BTreeSet<usize>,
    stats: MatchStats,
}

impl Proposer {
    fn new(k: usize) -> Self {
        Proposer {
            next: vec![0; k],
            owner: vec![None; k],
            matched: vec![None; k],
            free: (0..k).collect(),
            stats: MatchStats::default(),
        }
    }

    /// The `nth` (0-based) target source `i` has not tried yet.
    fn untried(&self, r: &Rankings, i: usize, nth: usize) -> Option<usize> {
        r.by_source[i].get(self.next[i] + nth).copied()
    }

    fn assign(&mut self, i: usize, j: usize) {
        if let Some(prev) = self.owner[j] {
            self.matched[prev] = None;
            self.free.insert(prev);
            self.stats.reassignments += 1;
        }
        self.owner[j] = Some(i);
        self.matched[i] = Some(j);
        self.free.remove(&i);
    }

    fn finish(self) -> Result<(Permutation, MatchStats)> {
        let sigma = self
            .matched
            .into_iter()
            .map(|m| m.ok_or_else(|| Error::InvalidArgument("matching incomplete".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok((Permutation::new(sigma)?, self.stats))
    }

    /// Runs proposals until every source is matched. `accept(i, j, i_prime, state)`
    /// decides whether `i` displaces the current owner `i_prime` of `j`.
    fn run(
        mut self,
        r: &Rankings,
        mut accept: impl FnMut(&Self, usize, usize, usize) -> bool,
    ) -> Result<(Permutation, MatchStats)> {
        while let Some(&i) = self.free.iter().next() {
            let j = self.untried(r, i, 0).ok_or_else(|| {
                Error::InvalidArgument(format!("source {i} exhausted its preferences"))
            })?;
            self.next[i] += 1;
            self.stats.proposals += 1;
            match self.owner[j] {
                None => self.assign(i, j),
                Some(i_prime) => {
                    if accept(&self, i, j, i_prime) {
                        self.assign(i, j);
                    }
                }
            }
        }
        self.finish()
    }
}

/// Source-proposing Gale-Shapley; the result has no blocking pair.
pub fn stable_coupling(r: &Rankings) -> Permutation {
    stable_coupling_with_stats(r).0
}

pub fn stable_coupling_with_stats(r: &Rankings) -> (Permutation, MatchStats) {
    Proposer::new(r.k())
        .run(r, |_, i, j, i_prime| r.target_rank(j, i) < r.target_rank(j, i_prime))
        .expect("gale-shapley always completes")
}

/// Gale-Shapley with a cost-based reassignment test.
///
/// When source `i` proposes to a target `j` held by `i'`, the pair is
/// reassigned only if `C(i,j) + C(i',j') < C(i,l) + C(i',j)`, where `j'` is
/// the best target `i'` has not tried and `l` is the next target `i` would try
/// after `j`. A missing `j'` rejects the reassignment; a missing `l` accepts it.
pub fn heuristic_coupling(r: &Rankings, c: &CostMatrix) -> Result<Permutation> {
    heuristic_coupling_with_stats(r, c).map(|(p, _)| p)
}

pub fn heuristic_coupling_with_stats(
    r: &Rankings,
    c: &CostMatrix,
) -> Result<(Permutation, MatchStats)> {
    if r.k() != c.k() {
        return Err(Error::Shape(format!(
            "rankings for k={} but cost matrix is {}x{}",
            r.k(),
            c.k(),
            c.k()
        )));
    }
    Proposer::new(r.k()).run(r, |state, i, j, i_prime| {
        // `next[i]` already points past `j`, so `l` is the first untried entry.
        let Some(j_prime) = state.untried(r, i_prime, 0) else {
            return false;
        };
        let Some(l) = state.untried(r, i, 0) else {
            return true;
        };
        c.get(i, j) + c.get(i_prime, j_prime) < c.get(i, l) + c.get(i_prime, j)
    })
}

/// Number of `(i, j)` pairs that both prefer each other to their assigned partners.
pub fn count_blocking_pairs(p: &Permutation, r: &Rankings) -> Result<usize> {
    let k = r.k();
    if p.k() != k {
        return Err(Error::Shape("matching and rankings differ in size".into()));
    }
    let owner = p.inverse();
    let mut count = 0;
    for i in 0..k {
        let current = r.source_rank(i, p.target(i));
        for &j in &r.by_source[i][..current] {
            if r.target_rank(j, i) < r.target_rank(j, owner.target(j)) {
                count += 1;
            }
        }
    }
    Ok(count)
}
