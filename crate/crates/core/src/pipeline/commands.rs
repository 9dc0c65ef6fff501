use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Split};
use super::metrics::{write_accuracy_csv, AccuracyRow, CalibrationSummary, MetricsBundle, RunMetadata, ScoreHistogram};
use crate::associate::{evaluate_recovery, run_association, PairScorer};
use crate::error::{Error, Result};
use crate::explain::saliency_map;
use crate::featurize::{featurize_pair, sample_balanced_pairs, FeatureStats, FeatureTable, Label, PairFeatures, N_BASE};
use crate::neuralnet::{accuracy, load_model, save_model, train, Dataset, MlpModel, TrainConfig, TrainReport};
use crate::orbitsim::{build_scenario, fmt_f64, load_observations, save_observations, ObsId, Observation};

pub const MODEL_FILE: &str = "model.ucom";
pub const STATS_FILE: &str = "feature_stats.csv";
pub const BASE_MODEL_FILE: &str = "model_base.ucom";
pub const BASE_STATS_FILE: &str = "feature_stats_base.csv";
pub const SUBSET_FILE: &str = "subset_observations.csv";
pub const PAIR_SCORES_FILE: &str = "pair_scores.csv";

struct Run {
    meta: RunMetadata,
}

impl Run {
    fn start(command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            meta: RunMetadata {
                command: command.into(),
                master_seed: cfg.master_seed,
                config_sha256: cfg.hash()?,
                version: env!("CARGO_PKG_VERSION").into(),
                timings: BTreeMap::new(),
            },
        })
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        self.meta.timings.insert(stage.into(), t.elapsed().as_secs_f64());
        Ok(out)
    }

    fn finish(self, out: &Path, mut bundle: MetricsBundle) -> Result<MetricsBundle> {
        let path = out.join(format!("metrics_{}.toml", self.meta.command));
        bundle.metadata = self.meta;
        bundle.save(&path)?;
        Ok(bundle)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitProvenance {
    pub split: String,
    pub seed: u64,
    pub id_base: u64,
    pub n_observations: usize,
    pub n_rso: usize,
}

/// Sidecar written next to the simulated observation files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub master_seed: u64,
    pub config_sha256: String,
    pub version: String,
    pub splits: Vec<SplitProvenance>,
}

/// Generate the train, validation and test scenarios.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsBundle> {
    cfg.validate()?;
    ensure_dir(out)?;
    let mut run = Run::start("simulate", cfg)?;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let scen = cfg.scenario_for(split);
        let obs = run.time(&format!("simulate_{}", split.name()), || build_scenario(&scen))?;
        save_observations(&out.join(split.observations_file()), &obs, false)?;
        splits.push(SplitProvenance {
            split: split.name().into(),
            seed: scen.seed,
            id_base: scen.id_base,
            n_observations: obs.len(),
            n_rso: count_rso(&obs),
        });
    }
    let prov = Provenance {
        master_seed: cfg.master_seed,
        config_sha256: run.meta.config_sha256.clone(),
        version: run.meta.version.clone(),
        splits,
    };
    let path = out.join("provenance.toml");
    let text = toml::to_string(&prov).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    run.finish(out, MetricsBundle::default())
}

fn count_rso(obs: &[Observation]) -> usize {
    let mut ids: Vec<_> = obs.iter().filter_map(|o| o.rso_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.len()
}

/// `obs_a,obs_b,label` with the label column empty for unlabelled pairs.
pub fn write_pairs_csv<W: Write>(out: W, pairs: &[(ObsId, ObsId, Option<Label>)]) -> Result<()> {
    let mut w = BufWriter::new(out);
    let io = |e| Error::io("pairs csv", e);
    writeln!(w, "obs_a,obs_b,label").map_err(io)?;
    for (a, b, l) in pairs {
        let l = l.map_or(String::new(), |l| l.class().to_string());
        writeln!(w, "{a},{b},{l}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Read `obs_a,obs_b[,label]` rows.
pub fn read_pairs_csv<R: std::io::Read>(input: R) -> Result<Vec<(ObsId, ObsId, Option<Label>)>> {
    let mut lines = BufReader::new(input).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty pairs file".into()))?
        .map_err(|e| Error::io("pairs csv", e))?;
    if !header.trim().starts_with("obs_a,obs_b") {
        return Err(Error::Format(format!("unexpected pairs header `{}`", header.trim())));
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io("pairs csv", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("pairs line {}: {what}", k + 2));
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() < 2 || cols.len() > 3 {
            return Err(bad("wrong column count"));
        }
        let id = |s: &str| s.parse().map(ObsId).map_err(|_| bad("bad obs id"));
        let label = match cols.get(2) {
            None | Some(&"") => None,
            Some(c) => Some(Label::from_class(c.parse().map_err(|_| bad("bad label"))?)?),
        };
        out.push((id(cols[0])?, id(cols[1])?, label));
    }
    Ok(out)
}

fn load_pairs(path: &Path) -> Result<Vec<(ObsId, ObsId, Option<Label>)>> {
    read_pairs_csv(std::fs::File::open(path).map_err(|e| Error::io(path, e))?)
}

/// Featurize listed id pairs (unstandardized).
pub fn featurize_listed(
    observations: &[Observation],
    pairs: &[(ObsId, ObsId, Option<Label>)],
    table: &FeatureTable,
) -> Result<Vec<PairFeatures>> {
    let by_id: HashMap<ObsId, &Observation> = observations.iter().map(|o| (o.obs_id, o)).collect();
    pairs
        .iter()
        .map(|(a, b, _)| {
            let get = |id: &ObsId| {
                by_id
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::InvalidInput(format!("unknown observation id {id}")))
            };
            featurize_pair(get(a)?, get(b)?, table).map_err(|e| Error::Pair {
                context: format!("pair ({a}, {b})"),
                source: Box::new(e),
            })
        })
        .collect()
}

fn standardize_rows(data: &mut Dataset, stats: &FeatureStats) -> Result<()> {
    for mut row in data.features.rows_mut() {
        stats.apply(row.as_slice_mut().expect("standard layout"))?;
    }
    Ok(())
}

/// Raw datasets for the three splits, as listed in the pair files.
pub struct SplitData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SplitData {
    fn map(&self, f: impl Fn(&Dataset) -> Dataset) -> SplitData {
        SplitData {
            train: f(&self.train),
            val: f(&self.val),
            test: f(&self.test),
        }
    }
}

/// Train one model variant on already prepared data.
pub fn train_variant(
    variant: &str,
    data: &SplitData,
    standardized: bool,
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainReport, AccuracyRow)> {
    let t = Instant::now();
    let (model, mut report) = train(&data.train, &data.val, cfg)?;
    let train_seconds = t.elapsed().as_secs_f64();
    let test_acc = accuracy(&model, &data.test)?;
    report.test_acc = Some(test_acc);
    let row = AccuracyRow {
        variant: variant.into(),
        n_features: data.train.features.ncols(),
        standardized,
        epochs_run: report.epochs.len(),
        best_epoch: report.best_epoch,
        val_acc: report.best_val_acc,
        test_acc,
        train_seconds,
    };
    Ok((model, report, row))
}

/// Sample balanced pairs from each split, fit feature statistics, and train
/// the full model (plus the base-parameter ablation when enabled).
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsBundle> {
    cfg.validate()?;
    let mut run = Run::start("train", cfg)?;
    let mut raw = Vec::new();
    for split in Split::ALL {
        let obs = load_observations(&out.join(split.observations_file()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed(&format!("pairs/{}", split.name())));
        let pairs = run.time(&format!("sample_{}", split.name()), || {
            sample_balanced_pairs(&obs, cfg.splits.pairs(split), &cfg.features, &mut rng)
        })?;
        let listed: Vec<_> = pairs.iter().map(|p| (p.obs_ids.0, p.obs_ids.1, p.label)).collect();
        write_pairs_csv(create(&out.join(split.pairs_file()))?, &listed)?;
        raw.push(Dataset::from_pairs(&pairs)?);
    }
    let test = raw.pop().expect("three splits");
    let val = raw.pop().expect("three splits");
    let train_raw = raw.pop().expect("three splits");
    let data = SplitData {
        train: train_raw,
        val,
        test,
    };

    let mut bundle = MetricsBundle::default();
    if cfg.ablation.enabled {
        let mut base = data.map(|d| d.truncate_features(2 * N_BASE));
        let stats = if cfg.ablation.standardize {
            let s = FeatureStats::from_rows(base.train.features.rows().into_iter().map(|r| r.to_slice().expect("standard layout")), 2 * N_BASE)?;
            standardize_rows(&mut base.train, &s)?;
            standardize_rows(&mut base.val, &s)?;
            standardize_rows(&mut base.test, &s)?;
            s
        } else {
            FeatureStats::identity(2 * N_BASE)
        };
        let (model, report, row) = run.time("train_base", || {
            train_variant("base", &base, cfg.ablation.standardize, &cfg.train_config("base"))
        })?;
        save_model(&out.join(BASE_MODEL_FILE), &model)?;
        stats.save(&out.join(BASE_STATS_FILE))?;
        report.save_csv(&out.join("train_report_base.csv"))?;
        bundle.accuracy.push(row);
    }

    let n = cfg.features.n_features();
    let stats = FeatureStats::from_rows(
        data.train.features.rows().into_iter().map(|r| r.to_slice().expect("standard layout")),
        n,
    )?;
    let mut data = data;
    standardize_rows(&mut data.train, &stats)?;
    standardize_rows(&mut data.val, &stats)?;
    standardize_rows(&mut data.test, &stats)?;
    let (model, report, row) = run.time("train_full", || {
        train_variant("full", &data, true, &cfg.train_config("full"))
    })?;
    save_model(&out.join(MODEL_FILE), &model)?;
    stats.save(&out.join(STATS_FILE))?;
    report.save_csv(&out.join("train_report.csv"))?;
    bundle.accuracy.insert(0, row);
    write_accuracy_csv(create(&out.join("accuracy.csv"))?, &bundle.accuracy)?;
    run.finish(out, bundle)
}

/// Whole objects, drawn in seeded random order, until `size` observations
/// are collected; the last object drawn may be cut short to hit `size` exactly.
/// The subset keeps the input order.
pub fn select_subset(observations: &[Observation], size: usize, seed: u64) -> Result<Vec<Observation>> {
    if observations.len() < size {
        return Err(Error::SamplingExhausted {
            kind: "observation",
            requested: size,
            available: observations.len(),
        });
    }
    let mut groups: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for (i, o) in observations.iter().enumerate() {
        let rso = o
            .rso_id
            .ok_or_else(|| Error::MissingLabels(format!("observation {} has no rso_id", o.obs_id)))?;
        groups.entry(rso).or_default().push(i);
    }
    let mut order: Vec<Vec<usize>> = groups.into_values().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut chosen = Vec::with_capacity(size);
    let mut leftover = Vec::new();
    for g in order {
        if chosen.len() + g.len() <= size {
            chosen.extend(g);
        } else {
            leftover.push(g);
        }
        if chosen.len() == size {
            break;
        }
    }
    if chosen.len() < size {
        let g = &leftover[0];
        let need = size - chosen.len();
        chosen.extend_from_slice(&g[..need]);
    }
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| observations[i].clone()).collect())
}

fn load_scorer_parts(out: &Path, table: &FeatureTable) -> Result<(MlpModel, FeatureStats)> {
    let model = load_model(&out.join(MODEL_FILE))?;
    let stats = FeatureStats::load(&out.join(STATS_FILE))?;
    PairScorer::new(&model, &stats, table)?;
    Ok((model, stats))
}

/// Match probability of every unordered pair of `observations`, in
/// row-major upper-triangle order.
pub fn score_upper_pairs(scorer: &PairScorer, observations: &[Observation]) -> Result<(Vec<(usize, usize)>, Vec<f64>)> {
    let n = observations.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let probs = scorer.match_probs(observations, &pairs)?;
    Ok((pairs, probs))
}

/// Balanced test accuracy, the all-pairs score histogram and calibration on
/// a test subset.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsBundle> {
    cfg.validate()?;
    let mut run = Run::start("evaluate", cfg)?;
    let (model, stats) = load_scorer_parts(out, &cfg.features)?;
    let scorer = PairScorer::new(&model, &stats, &cfg.features)?;
    let test_obs = load_observations(&out.join(Split::Test.observations_file()))?;

    let listed = load_pairs(&out.join(Split::Test.pairs_file()))?;
    let test_acc = run.time("test_accuracy", || {
        let mut data = Dataset::from_pairs(&featurize_listed(&test_obs, &listed, &cfg.features)?)?;
        standardize_rows(&mut data, &stats)?;
        accuracy(&model, &data)
    })?;

    let subset = select_subset(&test_obs, cfg.evaluate.subset_size, cfg.seed("subset"))?;
    save_observations(&out.join(SUBSET_FILE), &subset, false)?;
    let (pairs, probs) = run.time("score_all_pairs", || score_upper_pairs(&scorer, &subset))?;
    let secs = run.meta.timings["score_all_pairs"];
    run.meta
        .timings
        .insert("pairs_per_second".into(), pairs.len() as f64 / secs.max(1e-12));

    let mut hist = ScoreHistogram::new(cfg.evaluate.histogram_bins);
    let mut w = BufWriter::new(create(&out.join(PAIR_SCORES_FILE))?);
    let io = |e| Error::io(PAIR_SCORES_FILE, e);
    writeln!(w, "obs_a,obs_b,match_prob,is_match").map_err(io)?;
    let (mut above, mut above_match, mut nm, mut nm_low) = (0u64, 0u64, 0u64, 0u64);
    for (&(i, j), &p) in pairs.iter().zip(&probs) {
        let is_match = subset[i].same_object(&subset[j]).expect("subset is labelled");
        hist.add(p, is_match);
        if p > 0.95 {
            above += 1;
            above_match += is_match as u64;
        }
        if !is_match {
            nm += 1;
            nm_low += (p < 0.2) as u64;
        }
        writeln!(w, "{},{},{},{}", subset[i].obs_id, subset[j].obs_id, fmt_f64(p), is_match as u8).map_err(io)?;
    }
    w.flush().map_err(io)?;
    hist.write_csv(create(&out.join("histogram.csv"))?)?;

    let n_pairs = pairs.len() as u64;
    let calibration = CalibrationSummary {
        balanced_test_acc: test_acc,
        n_observations: subset.len(),
        n_rso: count_rso(&subset),
        n_pairs,
        n_match_pairs: n_pairs - nm,
        base_rate: hist.base_rate(),
        n_above_095: above,
        match_rate_above_095: if above == 0 { 0.0 } else { above_match as f64 / above as f64 },
        no_match_below_02_fraction: if nm == 0 { 0.0 } else { nm_low as f64 / nm as f64 },
    };
    let bundle = MetricsBundle {
        calibration: Some(calibration),
        histogram: Some(hist),
        ..Default::default()
    };
    run.finish(out, bundle)
}

fn resolve(out: &Path, p: &Path) -> PathBuf {
    out.join(p)
}

/// Search for three-observation candidates and, when truth is available,
/// the recovery curve over the configured `s` values.
pub fn cmd_associate(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsBundle> {
    cfg.validate()?;
    let obs_path = resolve(out, &cfg.inputs.associate_observations);
    let observations = load_observations(&obs_path)?;
    if observations.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "{} holds {} observations; association needs at least 3",
            obs_path.display(),
            observations.len()
        )));
    }
    let mut run = Run::start("associate", cfg)?;
    let (model, stats) = load_scorer_parts(out, &cfg.features)?;
    let scorer = PairScorer::new(&model, &stats, &cfg.features)?;
    let search = cfg.search.search_config();
    let result = run.time("associate", || run_association(&observations, &scorer, &search))?;
    result.save_csv(&out.join("candidates.csv"))?;

    let mut bundle = MetricsBundle::default();
    if observations.iter().all(|o| o.rso_id.is_some()) {
        let mut s = cfg.search.s.clone();
        s.sort_unstable();
        s.dedup();
        let report = evaluate_recovery(&result, &observations, &s)?;
        report.write_csv(create(&out.join("recovery.csv"))?)?;
        report.write_summary_csv(create(&out.join("recovery_summary.csv"))?)?;
        bundle.recovery = Some(report);
    }
    run.finish(out, bundle)
}

/// Saliency maps for each listed pair, written under `out/saliency`.
pub fn cmd_saliency(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let listed = load_pairs(&resolve(out, &cfg.inputs.saliency_pairs))?;
    let observations = load_observations(&resolve(out, &cfg.inputs.saliency_observations))?;
    let (model, stats) = load_scorer_parts(out, &cfg.features)?;
    let mut pairs = featurize_listed(&observations, &listed, &cfg.features)?;
    let maps = pairs
        .iter_mut()
        .map(|p| {
            stats.apply(&mut p.features)?;
            saliency_map(&model, p)
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = out.join("saliency");
    ensure_dir(&dir)?;
    let mut written = Vec::with_capacity(2 * maps.len());
    for m in &maps {
        let (csv, pgm) = m.save(&dir)?;
        written.push(csv);
        written.push(pgm);
    }
    Ok(written)
}
