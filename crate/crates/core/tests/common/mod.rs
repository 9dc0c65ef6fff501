#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use ucoassoc_core::associate::{ucs_triplets, unique_combinations, PairScores, ScoreMatrix, SearchConfig, Triplet};
use ucoassoc_core::featurize::{base_params, sample_balanced_pairs, FeatureTable, Label, N_FEATURES};
use ucoassoc_core::neuralnet::{read_model, write_model, MlpModel, Mode};
use ucoassoc_core::orbitsim::{
    build_scenario, elements_to_state, solve_kepler, ElementRanges, KeplerianElements, ObsId, Observation, RsoId,
    ScenarioConfig, Vec3, GM_EARTH,
};

/// Outcome of one acceptance check.
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("{tag} {}: {}", self.name, self.detail)
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Residual of Kepler's equation, folded into (-pi, pi].
pub fn kepler_residual(ecc_anomaly: f64, e: f64, mean_anomaly: f64) -> f64 {
    let r = (ecc_anomaly - e * ecc_anomaly.sin() - mean_anomaly).rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Largest Kepler residual over `n` random (M, e) with e in [0, 0.99].
pub fn max_kepler_residual(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let m = rng.random_range(-4.0 * PI..4.0 * PI);
            let e = rng.random_range(0.0..0.99);
            let ea = solve_kepler(m, e).expect("solver converges");
            kepler_residual(ea, e, m).abs()
        })
        .fold(0.0, f64::max)
}

pub fn energy(r: &Vec3, v: &Vec3) -> f64 {
    v.norm_squared() / 2.0 - GM_EARTH / r.norm()
}

/// Largest relative drift of specific energy and angular momentum over
/// `n_orbits` random orbits sampled at `n_times` epochs across one day;
/// energy is also compared against vis-viva `-mu / 2a`.
pub fn max_invariant_drift(n_orbits: usize, n_times: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranges = ElementRanges::default();
    let (mut de, mut dh) = (0.0f64, 0.0f64);
    for _ in 0..n_orbits {
        let el = KeplerianElements {
            semi_major_axis_km: rng.random_range(ranges.semi_major_axis_km.min..ranges.semi_major_axis_km.max),
            eccentricity: rng.random_range(0.0..ranges.eccentricity.max),
            inclination_deg: rng.random_range(0.0..ranges.inclination_deg.max),
            raan_deg: rng.random_range(0.0..360.0),
            arg_perigee_deg: rng.random_range(0.0..360.0),
            mean_anomaly_deg: rng.random_range(0.0..360.0),
            epoch_ref_s: 0.0,
        };
        let (r0, v0) = elements_to_state(&el, 0.0).unwrap();
        let e0 = -GM_EARTH / (2.0 * el.semi_major_axis_km);
        let h0 = r0.cross(&v0);
        for k in 0..n_times {
            let t = 86_400.0 * k as f64 / n_times as f64;
            let (r, v) = elements_to_state(&el, t).unwrap();
            de = de.max(((energy(&r, &v) - e0) / e0).abs());
            dh = dh.max((r.cross(&v) - h0).norm() / h0.norm());
        }
    }
    (de, dh)
}

/// Every triplet containing `base`, cost-sorted with ties broken by sorted
/// member indices.
pub fn brute_force_triplets(base: usize, m: &ScoreMatrix) -> Vec<Triplet> {
    let n = m.n();
    let mut out = Vec::new();
    for b in 0..n {
        for c in b + 1..n {
            if b == base || c == base {
                continue;
            }
            let mut members = [base, b, c];
            members.sort_unstable();
            let [x, y, z] = members;
            let cost = (m.get(x, y) + m.get(x, z)) + m.get(y, z);
            out.push(Triplet { base, members, cost });
        }
    }
    out.sort_by(|p, q| p.cost.total_cmp(&q.cost).then(p.members.cmp(&q.members)));
    out
}

pub fn random_score_matrix(n: usize, rng: &mut impl Rng, quantized: bool) -> ScoreMatrix {
    let mut upper = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = rng.random_range(0.0..1.0);
            // coarse values force many cost ties
            upper[i][j] = if quantized { (v * 4.0).floor() / 4.0 } else { v };
        }
    }
    ScoreMatrix::from_fn(n, |i, j| if i < j { upper[i][j] } else { upper[j][i] })
}

/// UCS with pruning disabled versus brute force on random matrices; returns
/// the number of (matrix, base) cases that disagree.
pub fn ucs_mismatches(n_matrices: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for k in 0..n_matrices {
        let n = rng.random_range(3..=30);
        let m = random_score_matrix(n, &mut rng, k % 2 == 1);
        let all = (n - 1) * (n - 2) / 2;
        let cfg = SearchConfig {
            prune_threshold: 1.0,
            solutions_per_base: all,
            chain_length: 3,
        };
        for base in 0..n {
            let got = ucs_triplets(base, &m, &cfg).unwrap();
            if got != brute_force_triplets(base, &m) {
                bad += 1;
            }
        }
    }
    bad
}

/// Binomial coefficients by Pascal's rule.
pub fn pascal(n: usize) -> Vec<Vec<u128>> {
    let mut rows: Vec<Vec<u128>> = vec![vec![1]];
    for i in 1..=n {
        let prev = &rows[i - 1];
        let mut row = vec![1u128; i + 1];
        for k in 1..i {
            row[k] = prev[k - 1] + prev[k];
        }
        rows.push(row);
    }
    rows
}

pub fn combinations_exact() -> Result<(), String> {
    if !matches!(unique_combinations(1000, 3), Ok(166_167_000)) {
        return Err("C(1000, 3) != 166167000".into());
    }
    let table = pascal(60);
    for n in 0..=60u64 {
        for r in 0..=n {
            let want = table[n as usize][r as usize];
            match unique_combinations(n, r) {
                Ok(v) if v as u128 == want => {}
                other => return Err(format!("C({n}, {r}) = {other:?}, want {want}")),
            }
        }
        if unique_combinations(n, n + 1).is_ok() {
            return Err(format!("C({n}, {}) should be a domain error", n + 1));
        }
    }
    if !matches!(unique_combinations(u64::MAX, 1), Ok(u64::MAX)) {
        return Err("C(max, 1) wrong".into());
    }
    if unique_combinations(200, 100).is_ok() {
        return Err("C(200, 100) must overflow".into());
    }
    Ok(())
}

/// Observations with random geometry, including exact duplicates, shared
/// epochs and shared observer positions.
pub fn adversarial_observations(n: usize, seed: u64) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let unit = |rng: &mut ChaCha8Rng| {
        let v = Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
        v / v.norm()
    };
    let mut out: Vec<Observation> = Vec::with_capacity(n);
    for i in 0..n {
        let o = match i % 5 {
            0 if i > 0 => {
                let mut o = out[i - 1].clone();
                o.obs_id = ObsId(i as u64);
                o
            }
            1 if i > 1 => {
                let mut o = out[i - 1].clone();
                o.obs_id = ObsId(i as u64);
                o.los = unit(&mut rng);
                o
            }
            _ => Observation {
                obs_id: ObsId(i as u64),
                rso_id: Some(RsoId(rng.random_range(0..n as u64 / 4 + 1))),
                epoch: (rng.random_range(0.0..43_200.0f64) / 60.0).floor() * 60.0,
                observer_pos: unit(&mut rng) * rng.random_range(6_000.0..7_000.0),
                los: unit(&mut rng),
                los_rate: unit(&mut rng) * rng.random_range(0.0..1e-3),
                streak_duration: 120.0,
            },
        };
        out.push(o);
    }
    out
}

/// Features of `n_pairs` random pairs drawn from a realistic scenario and an
/// adversarial set; returns (wrong lengths, non-finite values).
pub fn feature_sweep(n_pairs: usize, seed: u64) -> (usize, usize) {
    let table = FeatureTable::default();
    let cfg = ScenarioConfig {
        n_observations: 2_000,
        seed,
        ..ScenarioConfig::default()
    };
    let pools = [build_scenario(&cfg).unwrap(), adversarial_observations(2_000, seed)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row = vec![0.0; table.n_features()];
    let (mut bad_len, mut non_finite) = (0, 0);
    for pool in pools.iter() {
        let params: Vec<_> = pool.iter().map(|o| base_params(o).unwrap()).collect();
        for _ in 0..n_pairs / 2 {
            let i = rng.random_range(0..pool.len());
            let j = rng.random_range(0..pool.len());
            let (a, b) = if params[j].epoch() < params[i].epoch() { (j, i) } else { (i, j) };
            table.write_ordered(&params[a], &params[b], &mut row);
            if row.len() != N_FEATURES {
                bad_len += 1;
            }
            non_finite += row.iter().filter(|x| !x.is_finite()).count();
        }
    }
    (bad_len, non_finite)
}

/// Match fraction of balanced samples over several sizes; all must be exactly 0.5.
pub fn sampler_ratios(seed: u64) -> Vec<f64> {
    let obs = build_scenario(&ScenarioConfig {
        n_observations: 3_000,
        seed,
        ..ScenarioConfig::default()
    })
    .unwrap();
    let table = FeatureTable::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [2usize, 10, 500, 4_000]
        .iter()
        .map(|&n| {
            let pairs = sample_balanced_pairs(&obs, n, &table, &mut rng).unwrap();
            let m = pairs.iter().filter(|p| p.label == Some(Label::Match)).count();
            m as f64 / pairs.len() as f64
        })
        .collect()
}

/// Serialize and reload a random model; true when parameters and
/// predictions are bit-identical.
pub fn model_round_trip_exact(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = MlpModel::new(N_FEATURES, &[32, 32, 16, 16, 8, 8], &mut rng).unwrap();
    for n in &mut m.norms {
        n.running_mean.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        n.running_var.mapv_inplace(|_| rng.random_range(0.2..3.0));
    }
    m.set_mode(Mode::Eval);
    let mut buf = Vec::new();
    write_model(&mut buf, &m).unwrap();
    let back = read_model(buf.as_slice()).unwrap();
    let bits = |m: &MlpModel| -> Vec<u64> { m.parameters().iter().flat_map(|p| p.iter().map(|x| x.to_bits())).collect() };
    let x = Array2::from_shape_fn((64, N_FEATURES), |_| rng.random_range(-3.0..3.0));
    let p1 = m.predict_log_probs(x.view()).unwrap();
    let p2 = back.predict_log_probs(x.view()).unwrap();
    bits(&m) == bits(&back)
        && p1.iter().zip(p2.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
        && back.bn_eps.to_bits() == m.bn_eps.to_bits()
}

pub fn file_sha256(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of every deterministic artifact in an output directory. Timing
/// metrics and the accuracy table (which carries train time) are skipped.
pub fn artifact_hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in walk(dir) {
        let name = entry.strip_prefix(dir).unwrap().display().to_string();
        if name.starts_with("metrics_") || name == "accuracy.csv" {
            continue;
        }
        out.insert(name, file_sha256(&entry));
    }
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files.sort();
    files
}

/// Worst relative error of analytic against central-difference gradients:
/// every parameter in train mode (batch statistics), and every input feature
/// of a few rows in eval mode.
pub fn gradient_check(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut m = MlpModel::new(N_FEATURES, &[8, 8, 6, 6, 4, 4], &mut rng).unwrap();
    for n in &mut m.norms {
        n.gamma.mapv_inplace(|g| g + 0.3 * normal.sample(&mut rng));
        n.beta.mapv_inplace(|_| 0.3 * normal.sample(&mut rng));
        n.running_mean.mapv_inplace(|_| normal.sample(&mut rng).abs());
        n.running_var.mapv_inplace(|_| 0.5 + normal.sample(&mut rng).abs());
    }
    for d in &mut m.dense {
        d.bias.mapv_inplace(|_| 0.1 * normal.sample(&mut rng));
    }
    let x = Array2::from_shape_fn((10, N_FEATURES), |_| normal.sample(&mut rng));
    let y: Vec<Label> = (0..10).map(|i| if i % 3 == 0 { Label::Match } else { Label::NoMatch }).collect();
    let h = 1e-5;

    let (_, grads) = m.loss_and_gradients(x.view(), &y).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let mut probe = m.clone();
    let mut worst_param = 0.0f64;
    for (p, g) in analytic.iter().enumerate() {
        for k in 0..g.len() {
            let orig = probe.parameters()[p][k];
            probe.parameters_mut()[p][k] = orig + h;
            let lp = probe.loss_and_gradients(x.view(), &y).unwrap().0;
            probe.parameters_mut()[p][k] = orig - h;
            let lm = probe.loss_and_gradients(x.view(), &y).unwrap().0;
            probe.parameters_mut()[p][k] = orig;
            worst_param = worst_param.max(rel_err(g[k], (lp - lm) / (2.0 * h)));
        }
    }

    m.set_mode(Mode::Eval);
    let rows = x.slice(ndarray::s![..3, ..]).to_owned();
    let mut worst_input = 0.0f64;
    for class in 0..2 {
        let g = m.input_gradients(rows.view(), class).unwrap();
        for i in 0..rows.nrows() {
            for k in 0..N_FEATURES {
                let mut xp = rows.row(i).to_owned().insert_axis(ndarray::Axis(0));
                let mut xm = xp.clone();
                xp[[0, k]] += h;
                xm[[0, k]] -= h;
                let fp = m.predict_log_probs(xp.view()).unwrap()[[0, class]];
                let fm = m.predict_log_probs(xm.view()).unwrap()[[0, class]];
                worst_input = worst_input.max(rel_err(g[[i, k]], (fp - fm) / (2.0 * h)));
            }
        }
    }
    (worst_param, worst_input)
}
