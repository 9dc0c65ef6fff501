//! Pair scoring and uniform cost search for three-observation associations.
//!
//! Costs are classifier "no match" probabilities. For a base observation the
//! search grows chains `base -> x -> y`; adding a node costs the sum of its
//! no-match scores against every node already in the chain, so a complete
//! triplet costs the sum of its three pairwise scores. Nodes whose score
//! against the base exceeds the prune threshold are never expanded.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, HashSet};
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{base_params, BaseParams, FeatureStats, FeatureTable, STD_FLOOR};
use crate::neuralnet::{MlpModel, Mode};
use crate::orbitsim::{fmt_f64, ObsId, Observation};

/// Above this many observations the dense score matrix is not materialized.
pub const DENSE_LIMIT: usize = 20_000;
const SCORE_CHUNK: usize = 256;

/// A finalized classifier together with the feature pipeline it was trained on.
#[derive(Debug, Clone, Copy)]
pub struct PairScorer<'a> {
    model: &'a MlpModel,
    stats: &'a FeatureStats,
    table: &'a FeatureTable,
}

impl<'a> PairScorer<'a> {
    pub fn new(model: &'a MlpModel, stats: &'a FeatureStats, table: &'a FeatureTable) -> Result<Self> {
        if model.mode() != Mode::Eval {
            return Err(Error::State("scoring needs a finalized (eval-mode) model".into()));
        }
        let n = table.n_features();
        if stats.len() != n {
            return Err(Error::Shape {
                expected: n,
                found: stats.len(),
            });
        }
        if model.input_dim() != n {
            return Err(Error::Shape {
                expected: n,
                found: model.input_dim(),
            });
        }
        Ok(Self { model, stats, table })
    }

    pub fn table(&self) -> &FeatureTable {
        self.table
    }

    /// Match probability of each `(i, j)` index pair into `observations`.
    pub fn match_probs(&self, observations: &[Observation], pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        let params: Vec<Result<BaseParams>> = observations.iter().map(base_params).collect();
        let chunks: Vec<Vec<f64>> = pairs
            .par_chunks(SCORE_CHUNK)
            .map(|chunk| self.score_chunk(observations, &params, chunk))
            .collect::<Result<_>>()?;
        Ok(chunks.concat())
    }

    fn score_chunk(
        &self,
        observations: &[Observation],
        params: &[Result<BaseParams>],
        chunk: &[(usize, usize)],
    ) -> Result<Vec<f64>> {
        let n = self.table.n_features();
        let mut batch = Array2::zeros((chunk.len(), n));
        let inv: Vec<f64> = self.stats.std.iter().map(|s| s.max(STD_FLOOR)).collect();
        for (row, &(i, j)) in batch.rows_mut().into_iter().zip(chunk) {
            let (oi, oj) = (&observations[i], &observations[j]);
            let (ia, ib) = if (oj.epoch, oj.obs_id) < (oi.epoch, oi.obs_id) {
                (j, i)
            } else {
                (i, j)
            };
            let (pa, pb) = match (&params[ia], &params[ib]) {
                (Ok(pa), Ok(pb)) => (pa, pb),
                (Err(e), _) | (_, Err(e)) => {
                    return Err(Error::Pair {
                        context: format!(
                            "pair ({}, {})",
                            observations[ia].obs_id, observations[ib].obs_id
                        ),
                        source: Box::new(Error::InvalidInput(e.to_string())),
                    })
                }
            };
            let row = row.into_slice().expect("standard layout");
            self.table.write_ordered(pa, pb, row);
            for ((x, m), s) in row.iter_mut().zip(&self.stats.mean).zip(&inv) {
                *x = (*x - m) / s;
            }
        }
        self.model.predict_match_prob(batch.view())
    }
}

/// Source of pairwise no-match scores.
pub trait PairScores {
    fn n(&self) -> usize;
    fn score(&self, i: usize, j: usize) -> f64;
}

/// Dense symmetric matrix of no-match probabilities; the diagonal is NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    n: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    /// Build from a function evaluated once per unordered pair `i < j`.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = vec![f64::NAN; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = f(i, j);
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        Self { n, data }
    }

    fn from_upper(n: usize, upper: &[f64]) -> Self {
        let mut it = upper.iter();
        Self::from_fn(n, |_, _| *it.next().expect("one score per pair"))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// Off-diagonal entries of the upper triangle, row-major.
    pub fn upper(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| (i + 1..self.n).map(move |j| (i, j, self.get(i, j))))
    }
}

impl PairScores for ScoreMatrix {
    fn n(&self) -> usize {
        self.n
    }

    fn score(&self, i: usize, j: usize) -> f64 {
        self.get(i, j)
    }
}

fn upper_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// Score every unordered pair once; entries hold `1 - p_match`.
pub fn score_all_pairs(scorer: &PairScorer, observations: &[Observation]) -> Result<ScoreMatrix> {
    let n = observations.len();
    if n > DENSE_LIMIT {
        return Err(Error::InvalidInput(format!(
            "{n} observations exceed the dense score matrix limit of {DENSE_LIMIT}"
        )));
    }
    let probs = scorer.match_probs(observations, &upper_pairs(n))?;
    let no_match: Vec<f64> = probs.iter().map(|p| 1.0 - p).collect();
    Ok(ScoreMatrix::from_upper(n, &no_match))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Nodes whose no-match score against the base exceeds this are pruned.
    pub prune_threshold: f64,
    pub solutions_per_base: usize,
    pub chain_length: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            prune_threshold: 0.3,
            solutions_per_base: 1,
            chain_length: 3,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prune_threshold) {
            return Err(Error::Config(format!(
                "prune threshold {} outside [0, 1]",
                self.prune_threshold
            )));
        }
        if self.solutions_per_base == 0 {
            return Err(Error::Config("solutions per base must be at least 1".into()));
        }
        if self.chain_length != 3 {
            return Err(Error::Config("only chains of three observations are supported".into()));
        }
        Ok(())
    }
}

/// A triplet found by the search, as indices into the scored observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub base: usize,
    /// Sorted ascending, includes `base`.
    pub members: [usize; 3],
    pub cost: f64,
}

/// Cost of a member set, summed in a fixed order so every search path and
/// any enumeration agree bit for bit.
pub fn triplet_cost<S: PairScores + ?Sized>(scores: &S, members: [usize; 3]) -> f64 {
    let [a, b, c] = members;
    (scores.score(a, b) + scores.score(a, c)) + scores.score(b, c)
}

#[derive(Debug, Clone, Copy)]
struct Node {
    cost: f64,
    depth: usize,
    sorted: [usize; 3],
    chain: [usize; 3],
}

impl Node {
    fn key(&self) -> (usize, [usize; 3], [usize; 3]) {
        (self.depth, self.sorted, self.chain)
    }
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // cost first; at equal cost shallower nodes first so every goal of that
    // cost is queued before any is emitted, then member ids
    fn cmp(&self, other: &Self) -> Ordering {
        self.cost
            .total_cmp(&other.cost)
            .then_with(|| self.key().cmp(&other.key()))
    }
}

fn sorted_members(chain: &[usize]) -> [usize; 3] {
    let mut s = [usize::MAX; 3];
    s[..chain.len()].copy_from_slice(chain);
    s.sort_unstable();
    s
}

/// Uniform cost search for the cheapest triplets containing `base`.
///
/// Returns at most `cfg.solutions_per_base` distinct member sets with
/// non-decreasing cost; equal costs are ordered by sorted member indices.
pub fn ucs_triplets<S: PairScores + ?Sized>(base: usize, scores: &S, cfg: &SearchConfig) -> Result<Vec<Triplet>> {
    cfg.validate()?;
    let n = scores.n();
    if n < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 observations, got {n}")));
    }
    if base >= n {
        return Err(Error::InvalidInput(format!("base index {base} out of range")));
    }
    let admitted: Vec<usize> = (0..n)
        .filter(|&j| j != base && scores.score(base, j) <= cfg.prune_threshold)
        .collect();

    let mut frontier = BinaryHeap::new();
    frontier.push(Reverse(Node {
        cost: 0.0,
        depth: 1,
        sorted: sorted_members(&[base]),
        chain: [base, usize::MAX, usize::MAX],
    }));
    let mut emitted = HashSet::new();
    let mut out = Vec::new();

    while let Some(Reverse(node)) = frontier.pop() {
        if node.depth == 3 {
            if emitted.insert(node.sorted) {
                out.push(Triplet {
                    base,
                    members: node.sorted,
                    cost: node.cost,
                });
                if out.len() == cfg.solutions_per_base {
                    break;
                }
            }
            continue;
        }
        let chain = &node.chain[..node.depth];
        for &j in &admitted {
            if chain.contains(&j) {
                continue;
            }
            let mut next = node.chain;
            next[node.depth] = j;
            let sorted = sorted_members(&next[..node.depth + 1]);
            let cost = if node.depth + 1 == 3 {
                if emitted.contains(&sorted) {
                    continue;
                }
                triplet_cost(scores, sorted)
            } else {
                node.cost + chain.iter().map(|&m| scores.score(j, m)).sum::<f64>()
            };
            frontier.push(Reverse(Node {
                cost,
                depth: node.depth + 1,
                sorted,
                chain: next,
            }));
        }
    }
    Ok(out)
}

/// Exact binomial coefficient `n! / ((n - r)! r!)`.
pub fn unique_combinations(n: u64, r: u64) -> Result<u64> {
    if r > n {
        return Err(Error::Domain(format!("cannot choose {r} of {n}")));
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 1..=r as u128 {
        // acc * (n - r + i) is divisible by i at every step
        acc = acc
            .checked_mul(n as u128 - r as u128 + i)
            .ok_or_else(|| Error::Domain(format!("C({n}, {r}) overflows")))?
            / i;
    }
    u64::try_from(acc).map_err(|_| Error::Domain(format!("C({n}, {r}) overflows u64")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletCandidate {
    pub base_obs: ObsId,
    /// Position of this candidate in its base's cost-ordered list.
    pub rank: usize,
    pub members: [ObsId; 3],
    pub cost: f64,
    /// All three members share an rso id; `None` without truth.
    pub is_true: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationRun {
    pub candidates: Vec<TripletCandidate>,
    pub n_observations: usize,
    pub solutions_per_base: usize,
}

impl AssociationRun {
    /// Emitted candidates as a fraction of all `C(n, 3)` triplets.
    pub fn explored_fraction(&self) -> Result<f64> {
        explored_fraction(self.candidates.len(), self.n_observations)
    }

    /// Candidates the same search would have produced with a smaller `s`.
    pub fn truncated(&self, s: usize) -> Vec<&TripletCandidate> {
        self.candidates.iter().filter(|c| c.rank < s).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BufWriter::new(out);
        let io = |e| Error::io("candidate csv", e);
        writeln!(w, "base_obs,member1,member2,member3,cost,is_true").map_err(io)?;
        for c in &self.candidates {
            let truth = match c.is_true {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            writeln!(
                w,
                "{},{},{},{},{},{truth}",
                c.base_obs,
                c.members[0],
                c.members[1],
                c.members[2],
                fmt_f64(c.cost)
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn explored_fraction(n_candidates: usize, n_observations: usize) -> Result<f64> {
    let total = unique_combinations(n_observations as u64, 3)?;
    if total == 0 {
        return Err(Error::InvalidInput("fewer than 3 observations".into()));
    }
    Ok(n_candidates as f64 / total as f64)
}

fn to_candidates(observations: &[Observation], per_base: Vec<Vec<Triplet>>) -> Vec<TripletCandidate> {
    per_base
        .into_iter()
        .flat_map(|list| list.into_iter().enumerate())
        .map(|(rank, t)| {
            let members = t.members.map(|m| observations[m].obs_id);
            let [a, b, c] = t.members.map(|m| observations[m].rso_id);
            let is_true = match (a, b, c) {
                (Some(a), Some(b), Some(c)) => Some(a == b && b == c),
                _ => None,
            };
            TripletCandidate {
                base_obs: observations[t.base].obs_id,
                rank,
                members,
                cost: t.cost,
                is_true,
            }
        })
        .collect()
}

/// Search from every observation as base over a precomputed score matrix.
/// Results are concatenated in base order, without cross-base deduplication.
pub fn associate_with_scores(
    observations: &[Observation],
    scores: &ScoreMatrix,
    cfg: &SearchConfig,
) -> Result<AssociationRun> {
    cfg.validate()?;
    if scores.n() != observations.len() {
        return Err(Error::Shape {
            expected: observations.len(),
            found: scores.n(),
        });
    }
    let per_base = (0..observations.len())
        .into_par_iter()
        .map(|b| ucs_triplets(b, scores, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(AssociationRun {
        candidates: to_candidates(observations, per_base),
        n_observations: observations.len(),
        solutions_per_base: cfg.solutions_per_base,
    })
}

/// Local score table over a sorted subset of observations.
struct SubsetScores {
    n: usize,
    data: Vec<f64>,
}

impl PairScores for SubsetScores {
    fn n(&self) -> usize {
        self.n
    }

    fn score(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// Same search as [`associate_with_scores`] without an `n x n` matrix: each
/// base scores its own row, then only the pairs among its admitted nodes.
pub fn associate_streaming(
    observations: &[Observation],
    scorer: &PairScorer,
    cfg: &SearchConfig,
) -> Result<AssociationRun> {
    cfg.validate()?;
    let n = observations.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 observations, got {n}")));
    }
    let mut per_base = Vec::with_capacity(n);
    for base in 0..n {
        let row_pairs: Vec<(usize, usize)> = (0..n).filter(|&j| j != base).map(|j| (base, j)).collect();
        let probs = scorer.match_probs(observations, &row_pairs)?;
        let mut nodes: BTreeSet<usize> = row_pairs
            .iter()
            .zip(&probs)
            .filter(|(_, p)| 1.0 - **p <= cfg.prune_threshold)
            .map(|(&(_, j), _)| j)
            .collect();
        nodes.insert(base);
        let nodes: Vec<usize> = nodes.into_iter().collect();
        let m = nodes.len();
        if m < 3 {
            per_base.push(Vec::new());
            continue;
        }
        let local_pairs: Vec<(usize, usize)> = upper_pairs(m)
            .into_iter()
            .map(|(a, b)| (nodes[a], nodes[b]))
            .collect();
        let local_probs = scorer.match_probs(observations, &local_pairs)?;
        let mut data = vec![f64::NAN; m * m];
        for ((a, b), p) in upper_pairs(m).into_iter().zip(local_probs) {
            data[a * m + b] = 1.0 - p;
            data[b * m + a] = 1.0 - p;
        }
        let local = SubsetScores { n: m, data };
        let local_base = nodes.binary_search(&base).expect("base is a node");
        let found = ucs_triplets(local_base, &local, cfg)?;
        per_base.push(
            found
                .into_iter()
                .map(|t| Triplet {
                    base,
                    members: t.members.map(|k| nodes[k]),
                    cost: t.cost,
                })
                .collect(),
        );
    }
    Ok(AssociationRun {
        candidates: to_candidates(observations, per_base),
        n_observations: n,
        solutions_per_base: cfg.solutions_per_base,
    })
}

/// Score and search, materializing the score matrix when it fits.
pub fn run_association(
    observations: &[Observation],
    scorer: &PairScorer,
    cfg: &SearchConfig,
) -> Result<AssociationRun> {
    if observations.len() <= DENSE_LIMIT {
        if observations.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "need at least 3 observations, got {}",
                observations.len()
            )));
        }
        let scores = score_all_pairs(scorer, observations)?;
        associate_with_scores(observations, &scores, cfg)
    } else {
        associate_streaming(observations, scorer, cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub s: usize,
    pub n_candidates: usize,
    pub n_true: usize,
    pub n_rso_recovered: usize,
    pub explored_fraction: f64,
    pub n_unique_sets: usize,
    pub n_unique_true_sets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub rows: Vec<RecoveryRow>,
    /// Distinct objects among the searched observations.
    pub n_rso_represented: usize,
    /// Objects with at least three observations, i.e. those a triplet can recover.
    pub n_rso_recoverable: usize,
}

impl RecoveryReport {
    pub fn row(&self, s: usize) -> Option<&RecoveryRow> {
        self.rows.iter().find(|r| r.s == s)
    }

    /// The per-`s` series: `s,n_candidates,n_true,n_rso_recovered,explored_fraction`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BufWriter::new(out);
        let io = |e| Error::io("recovery csv", e);
        writeln!(w, "s,n_candidates,n_true,n_rso_recovered,explored_fraction").map_err(io)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.s,
                r.n_candidates,
                r.n_true,
                r.n_rso_recovered,
                fmt_f64(r.explored_fraction)
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Counts that do not fit the per-`s` series.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BufWriter::new(out);
        let io = |e| Error::io("recovery summary", e);
        writeln!(w, "key,value").map_err(io)?;
        writeln!(w, "n_rso_represented,{}", self.n_rso_represented).map_err(io)?;
        writeln!(w, "n_rso_recoverable,{}", self.n_rso_recoverable).map_err(io)?;
        for r in &self.rows {
            writeln!(w, "n_unique_sets_s{},{}", r.s, r.n_unique_sets).map_err(io)?;
            writeln!(w, "n_unique_true_sets_s{},{}", r.s, r.n_unique_true_sets).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Recovery statistics of a run for every `s` in `s_values` (each at most
/// the run's own `solutions_per_base`).
pub fn evaluate_recovery(
    run: &AssociationRun,
    observations: &[Observation],
    s_values: &[usize],
) -> Result<RecoveryReport> {
    use std::collections::HashMap;
    let mut rso_of = HashMap::with_capacity(observations.len());
    let mut per_rso: HashMap<_, usize> = HashMap::new();
    for o in observations {
        let rso = o.rso_id.ok_or_else(|| {
            Error::MissingLabels(format!("observation {} has no rso_id", o.obs_id))
        })?;
        rso_of.insert(o.obs_id, rso);
        *per_rso.entry(rso).or_default() += 1;
    }
    let mut rows = Vec::with_capacity(s_values.len());
    for &s in s_values {
        if s == 0 || s > run.solutions_per_base {
            return Err(Error::InvalidInput(format!(
                "s = {s} outside 1..={}",
                run.solutions_per_base
            )));
        }
        let chosen = run.truncated(s);
        let mut recovered = HashSet::new();
        let mut unique = HashSet::new();
        let mut unique_true = HashSet::new();
        let mut n_true = 0;
        for c in &chosen {
            let rsos = c
                .members
                .iter()
                .map(|m| {
                    rso_of.get(m).copied().ok_or_else(|| {
                        Error::MissingLabels(format!("no truth for candidate member {m}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            unique.insert(c.members);
            if rsos.iter().all(|r| *r == rsos[0]) {
                n_true += 1;
                recovered.insert(rsos[0]);
                unique_true.insert(c.members);
            }
        }
        rows.push(RecoveryRow {
            s,
            n_candidates: chosen.len(),
            n_true,
            n_rso_recovered: recovered.len(),
            explored_fraction: explored_fraction(chosen.len(), run.n_observations)?,
            n_unique_sets: unique.len(),
            n_unique_true_sets: unique_true.len(),
        });
    }
    Ok(RecoveryReport {
        rows,
        n_rso_represented: per_rso.len(),
        n_rso_recoverable: per_rso.values().filter(|&&k| k >= 3).count(),
    })
}
