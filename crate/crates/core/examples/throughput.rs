//! Time featurize + eval-mode scoring of 10^6 pairs.
//!
//! `cargo run --release --example throughput -- 32,32,16,16,8,8`

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ucoassoc_core::associate::PairScorer;
use ucoassoc_core::featurize::{FeatureStats, FeatureTable};
use ucoassoc_core::neuralnet::{MlpModel, Mode};
use ucoassoc_core::orbitsim::{build_scenario, ScenarioConfig};

fn main() -> ucoassoc_core::Result<()> {
    let widths: Vec<usize> = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "32,32,16,16,8,8".into())
        .split(',')
        .map(|w| w.trim().parse().expect("width"))
        .collect();
    let cfg = ScenarioConfig {
        n_observations: 1415,
        seed: 1,
        ..ScenarioConfig::default()
    };
    let obs = build_scenario(&cfg)?;
    let table = FeatureTable::default();
    let mut model = MlpModel::new(table.n_features(), &widths, &mut ChaCha8Rng::seed_from_u64(2))?;
    model.set_mode(Mode::Eval);
    let stats = FeatureStats::identity(table.n_features());
    let scorer = PairScorer::new(&model, &stats, &table)?;

    let n = obs.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .take(1_000_000)
        .collect();
    let start = Instant::now();
    let probs = scorer.match_probs(&obs, &pairs)?;
    let secs = start.elapsed().as_secs_f64();
    println!("widths {widths:?}: {} pairs in {secs:.3} s", probs.len());
    Ok(())
}
