//! Observation base parameters, ratio-augmented pair features, standardization
//! and balanced pair sampling.
//!
//! Pair vector layout: the 12 base parameters of the earlier observation, the
//! 12 of the later one, then one ratio per `(q, r, s)` triple of the
//! [`FeatureTable`], ordered lexicographically:
//!
//! ```text
//! (later[q] - earlier[r]) / (later[s] - earlier[s])
//! ```

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orbitsim::{fmt_f64, ObsId, Observation};

pub const N_BASE: usize = 12;
/// Length of the pair vector for the default feature table.
pub const N_FEATURES: usize = 416;
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseParam {
    Epoch,
    ObsUnitX,
    ObsUnitY,
    ObsUnitZ,
    ObsPosMagnitude,
    LosX,
    LosY,
    LosZ,
    LosrX,
    LosrY,
    LosrZ,
    StreakMagnitude,
}

impl BaseParam {
    pub const ALL: [BaseParam; N_BASE] = [
        BaseParam::Epoch,
        BaseParam::ObsUnitX,
        BaseParam::ObsUnitY,
        BaseParam::ObsUnitZ,
        BaseParam::ObsPosMagnitude,
        BaseParam::LosX,
        BaseParam::LosY,
        BaseParam::LosZ,
        BaseParam::LosrX,
        BaseParam::LosrY,
        BaseParam::LosrZ,
        BaseParam::StreakMagnitude,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// The 12 per-observation parameters, in [`BaseParam`] order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseParams(pub [f64; N_BASE]);

impl BaseParams {
    pub fn get(&self, p: BaseParam) -> f64 {
        self.0[p.index()]
    }

    pub fn epoch(&self) -> f64 {
        self.0[0]
    }
}

pub fn base_params(obs: &Observation) -> Result<BaseParams> {
    let magnitude = obs.observer_pos.norm();
    if !(magnitude > 0.0 && magnitude.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "observation {} has a degenerate observer position",
            obs.obs_id
        )));
    }
    let unit = obs.observer_pos / magnitude;
    let streak = obs.los_rate.norm() * obs.streak_duration;
    Ok(BaseParams([
        obs.epoch,
        unit.x,
        unit.y,
        unit.z,
        magnitude,
        obs.los.x,
        obs.los.y,
        obs.los.z,
        obs.los_rate.x,
        obs.los_rate.y,
        obs.los_rate.z,
        streak,
    ]))
}

/// Which base parameters enter the numerators (`q`, `r`) and denominators
/// (`s`) of the derived ratios, and how degenerate ratios are tamed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureTable {
    pub q: Vec<BaseParam>,
    pub r: Vec<BaseParam>,
    pub s: Vec<BaseParam>,
    /// Denominators smaller than this in magnitude are replaced by ±eps.
    pub eps_den: f64,
    /// Derived values are clamped to `[-overflow_cap, overflow_cap]`.
    pub overflow_cap: f64,
}

impl Default for FeatureTable {
    fn default() -> Self {
        use BaseParam::*;
        let los_geometry = vec![LosX, LosY, LosZ, LosrX, LosrY, LosrZ, StreakMagnitude];
        Self {
            q: los_geometry.clone(),
            r: los_geometry,
            s: vec![Epoch, ObsUnitX, ObsUnitY, ObsUnitZ, ObsPosMagnitude, LosrX, LosrY, LosrZ],
            eps_den: 1e-9,
            overflow_cap: 1e9,
        }
    }
}

impl FeatureTable {
    /// Only the 24 copied base parameters, no ratios.
    pub fn base_only() -> Self {
        Self {
            q: Vec::new(),
            r: Vec::new(),
            s: Vec::new(),
            ..Self::default()
        }
    }

    pub fn n_features(&self) -> usize {
        2 * N_BASE + self.q.len() * self.r.len() * self.s.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_den > 0.0) || !(self.overflow_cap > 0.0) {
            return Err(Error::Config("eps_den and overflow_cap must be positive".into()));
        }
        Ok(())
    }

    /// Write the features of an already ordered pair into `out`.
    pub fn write_ordered(&self, earlier: &BaseParams, later: &BaseParams, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_features());
        out[..N_BASE].copy_from_slice(&earlier.0);
        out[N_BASE..2 * N_BASE].copy_from_slice(&later.0);

        let dens: Vec<f64> = self
            .s
            .iter()
            .map(|&s| {
                let d = later.get(s) - earlier.get(s);
                if d.abs() < self.eps_den {
                    if d < 0.0 {
                        -self.eps_den
                    } else {
                        self.eps_den
                    }
                } else {
                    d
                }
            })
            .collect();
        let mut k = 2 * N_BASE;
        for &q in &self.q {
            for &r in &self.r {
                let num = later.get(q) - earlier.get(r);
                for &den in &dens {
                    out[k] = (num / den).clamp(-self.overflow_cap, self.overflow_cap);
                    k += 1;
                }
            }
        }
    }
}

/// Features of a pair, ordered so the earlier epoch comes first (ties keep
/// the argument order).
pub fn pair_features(a: &BaseParams, b: &BaseParams, table: &FeatureTable) -> Vec<f64> {
    let (first, second) = if b.epoch() < a.epoch() { (b, a) } else { (a, b) };
    let mut out = vec![0.0; table.n_features()];
    table.write_ordered(first, second, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    NoMatch = 0,
    Match = 1,
}

impl Label {
    pub fn class(self) -> usize {
        self as usize
    }

    pub fn from_class(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Label::NoMatch),
            1 => Ok(Label::Match),
            other => Err(Error::Domain(format!("label class {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairFeatures {
    pub features: Vec<f64>,
    pub label: Option<Label>,
    /// Canonical order: earlier observation first.
    pub obs_ids: (ObsId, ObsId),
}

/// Canonical ordering of two observations: by epoch, ties by obs id.
pub fn canonical<'a>(a: &'a Observation, b: &'a Observation) -> (&'a Observation, &'a Observation) {
    if (b.epoch, b.obs_id) < (a.epoch, a.obs_id) {
        (b, a)
    } else {
        (a, b)
    }
}

/// Featurize an observation pair in canonical order; labelled when both
/// observations carry truth.
pub fn featurize_pair(a: &Observation, b: &Observation, table: &FeatureTable) -> Result<PairFeatures> {
    let (first, second) = canonical(a, b);
    let mut features = vec![0.0; table.n_features()];
    table.write_ordered(&base_params(first)?, &base_params(second)?, &mut features);
    let label = first
        .same_object(second)
        .map(|same| if same { Label::Match } else { Label::NoMatch });
    Ok(PairFeatures {
        features,
        label,
        obs_ids: (first.obs_id, second.obs_id),
    })
}

/// Per-feature mean and (population) standard deviation of a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Column statistics of row-major `rows` (each of length `n_features`).
    pub fn from_rows<'a, I>(rows: I, n_features: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]> + Clone,
    {
        let mut count = 0usize;
        let mut sum = vec![0.0; n_features];
        let mut min = vec![f64::INFINITY; n_features];
        let mut max = vec![f64::NEG_INFINITY; n_features];
        for row in rows.clone() {
            if row.len() != n_features {
                return Err(Error::Shape {
                    expected: n_features,
                    found: row.len(),
                });
            }
            count += 1;
            for (k, &x) in row.iter().enumerate() {
                sum[k] += x;
                min[k] = min[k].min(x);
                max[k] = max[k].max(x);
            }
        }
        if count == 0 {
            return Err(Error::InvalidInput("no rows for feature statistics".into()));
        }
        let n = count as f64;
        let mut mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut sq = vec![0.0; n_features];
        let mut resid = vec![0.0; n_features];
        for row in rows {
            for (k, &x) in row.iter().enumerate() {
                let d = x - mean[k];
                sq[k] += d * d;
                resid[k] += d;
            }
        }
        let mut std = vec![0.0; n_features];
        for k in 0..n_features {
            if min[k] == max[k] {
                mean[k] = min[k];
                continue;
            }
            // two-pass correction
            let corr = resid[k] / n;
            mean[k] += corr;
            std[k] = (sq[k] / n - corr * corr).max(0.0).sqrt();
        }
        Ok(Self { mean, std })
    }

    pub fn from_pairs(pairs: &[PairFeatures]) -> Result<Self> {
        let n = pairs
            .first()
            .map(|p| p.features.len())
            .ok_or_else(|| Error::InvalidInput("no pairs for feature statistics".into()))?;
        Self::from_rows(pairs.iter().map(|p| p.features.as_slice()), n)
    }

    fn check(&self, len: usize) -> Result<()> {
        if self.mean.len() != len || self.std.len() != len {
            return Err(Error::Shape {
                expected: len,
                found: self.mean.len(),
            });
        }
        Ok(())
    }

    pub fn apply(&self, row: &mut [f64]) -> Result<()> {
        self.check(row.len())?;
        for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = (*x - m) / s.max(STD_FLOOR);
        }
        Ok(())
    }

    pub fn invert(&self, row: &mut [f64]) -> Result<()> {
        self.check(row.len())?;
        for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = *x * s.max(STD_FLOOR) + m;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BufWriter::new(out);
        let io = |e| Error::io("feature stats csv", e);
        writeln!(w, "index,mean,std").map_err(io)?;
        for (k, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            writeln!(w, "{k},{},{}", fmt_f64(*m), fmt_f64(*s)).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut lines = BufReader::new(input).lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "index,mean,std" => {}
            _ => return Err(Error::Format("feature stats header".into())),
        }
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for (k, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io("feature stats csv", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("feature stats row {k}"));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 || cols[0].trim().parse::<usize>().ok() != Some(k) {
                return Err(bad());
            }
            mean.push(cols[1].trim().parse().map_err(|_| bad())?);
            std.push(cols[2].trim().parse().map_err(|_| bad())?);
        }
        Ok(Self { mean, std })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Standardize every pair in place with training-split statistics.
pub fn standardize(pairs: &mut [PairFeatures], stats: &FeatureStats) -> Result<()> {
    pairs.iter_mut().try_for_each(|p| stats.apply(&mut p.features))
}

/// Draw `n_pairs / 2` same-object and `n_pairs / 2` different-object pairs,
/// with no unordered pair repeated, and return them shuffled.
pub fn sample_balanced_pairs<R: Rng + ?Sized>(
    observations: &[Observation],
    n_pairs: usize,
    table: &FeatureTable,
    rng: &mut R,
) -> Result<Vec<PairFeatures>> {
    if !n_pairs.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!("n_pairs must be even, got {n_pairs}")));
    }
    let half = n_pairs / 2;
    let mut groups: HashMap<_, Vec<usize>> = HashMap::new();
    for (i, o) in observations.iter().enumerate() {
        let rso = o.rso_id.ok_or_else(|| {
            Error::MissingLabels(format!("observation {} has no rso_id", o.obs_id))
        })?;
        groups.entry(rso).or_default().push(i);
    }
    let mut rso_keys: Vec<_> = groups.keys().copied().collect();
    rso_keys.sort();

    let mut matches = Vec::new();
    for key in &rso_keys {
        let members = &groups[key];
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                matches.push((i, j));
            }
        }
    }
    let n = observations.len();
    let total = n * n.saturating_sub(1) / 2;
    let available_mismatch = total - matches.len();
    if matches.len() < half {
        return Err(Error::SamplingExhausted {
            kind: "match",
            requested: half,
            available: matches.len(),
        });
    }
    if available_mismatch < half {
        return Err(Error::SamplingExhausted {
            kind: "no-match",
            requested: half,
            available: available_mismatch,
        });
    }

    let mut chosen: Vec<(usize, usize)> = index::sample(rng, matches.len(), half)
        .into_iter()
        .map(|k| matches[k])
        .collect();

    let same = |i: usize, j: usize| observations[i].rso_id == observations[j].rso_id;
    if available_mismatch <= 4 * half || n <= 2_000 {
        let mismatches: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| !same(i, j))
            .collect();
        chosen.extend(
            index::sample(rng, mismatches.len(), half)
                .into_iter()
                .map(|k| mismatches[k]),
        );
    } else {
        let mut seen = HashSet::with_capacity(half);
        let mut drawn = Vec::with_capacity(half);
        while drawn.len() < half {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i == j || same(i, j) {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if seen.insert(key) {
                drawn.push(key);
            }
        }
        chosen.extend(drawn);
    }
    chosen.shuffle(rng);

    chosen
        .into_iter()
        .map(|(i, j)| featurize_pair(&observations[i], &observations[j], table))
        .collect()
}

const CACHE_MAGIC: &[u8; 4] = b"UCOF";
const CACHE_VERSION: u32 = 1;

/// Write labelled pairs as a binary feature cache.
pub fn write_feature_cache<W: Write>(out: W, pairs: &[PairFeatures]) -> Result<()> {
    let n_features = pairs.first().map_or(N_FEATURES, |p| p.features.len());
    let mut w = BufWriter::new(out);
    let io = |e| Error::io("feature cache", e);
    w.write_all(CACHE_MAGIC).map_err(io)?;
    w.write_all(&CACHE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(pairs.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(n_features as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&[0u8; 8]).map_err(io)?;
    for p in pairs {
        if p.features.len() != n_features {
            return Err(Error::Shape {
                expected: n_features,
                found: p.features.len(),
            });
        }
        for x in &p.features {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    for p in pairs {
        let label = p
            .label
            .ok_or_else(|| Error::MissingLabels("feature cache rows must be labelled".into()))?;
        w.write_all(&[label as u8]).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Read a feature cache back into `(row-major features, n_features, labels)`.
pub fn read_feature_cache<R: Read>(mut input: R) -> Result<(Vec<f64>, usize, Vec<Label>)> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("feature cache", e))?;
    if bytes.len() < 32 || &bytes[..4] != CACHE_MAGIC {
        return Err(Error::Format("feature cache header".into()));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("feature cache version {version}")));
    }
    let rows = u64_at(8) as usize;
    let cols = u64_at(16) as usize;
    let body = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(32 + rows))
        .ok_or_else(|| Error::Format("feature cache dimensions overflow".into()))?;
    if bytes.len() != body {
        return Err(Error::Format(format!(
            "feature cache is {} bytes, expected {body}",
            bytes.len()
        )));
    }
    let data_end = 32 + rows * cols * 8;
    let features = bytes[32..data_end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = bytes[data_end..]
        .iter()
        .map(|&b| Label::from_class(b))
        .collect::<Result<_>>()?;
    Ok((features, cols, labels))
}
