use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::associate::SearchConfig;
use crate::error::{Error, Result};
use crate::featurize::FeatureTable;
use crate::neuralnet::TrainConfig;
use crate::orbitsim::ScenarioConfig;

/// Id offset between the train, validation and test scenarios.
pub const SPLIT_ID_STRIDE: u64 = 1_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn id_base(self) -> u64 {
        SPLIT_ID_STRIDE
            * match self {
                Split::Train => 0,
                Split::Val => 1,
                Split::Test => 2,
            }
    }

    pub fn observations_file(self) -> String {
        format!("observations_{}.csv", self.name())
    }

    pub fn pairs_file(self) -> String {
        format!("pairs_{}.csv", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub prune_threshold: f64,
    /// Solutions per base observation to report; the search runs once at the largest.
    pub s: Vec<usize>,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            prune_threshold: 0.3,
            s: vec![1, 2, 5, 10, 20, 50, 100],
        }
    }
}

impl SearchSection {
    pub fn s_max(&self) -> usize {
        self.s.iter().copied().max().unwrap_or(0)
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            prune_threshold: self.prune_threshold,
            solutions_per_base: self.s_max(),
            chain_length: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train_pairs: 40_000,
            val_pairs: 4_000,
            test_pairs: 4_000,
        }
    }
}

impl SplitSizes {
    pub fn pairs(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_pairs,
            Split::Val => self.val_pairs,
            Split::Test => self.test_pairs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Observations in the all-pairs evaluation subset.
    pub subset_size: usize,
    pub histogram_bins: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            subset_size: 1000,
            histogram_bins: 20,
        }
    }
}

/// Second model trained on the 24 base parameters only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub enabled: bool,
    pub standardize: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            enabled: true,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputsSection {
    /// Observations searched by `associate`, relative to the output directory.
    pub associate_observations: PathBuf,
    /// `obs_a,obs_b` id pairs for `saliency`.
    pub saliency_pairs: PathBuf,
    pub saliency_observations: PathBuf,
}

impl Default for InputsSection {
    fn default() -> Self {
        Self {
            associate_observations: "subset_observations.csv".into(),
            saliency_pairs: "saliency_pairs.csv".into(),
            saliency_observations: "subset_observations.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub out_dir: PathBuf,
    /// Per-split seeds and id offsets are derived; values given here are ignored.
    pub scenario: ScenarioConfig,
    pub features: FeatureTable,
    pub train: TrainConfig,
    pub search: SearchSection,
    pub splits: SplitSizes,
    pub evaluate: EvaluateSection,
    pub ablation: AblationSection,
    pub inputs: InputsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 2020,
            out_dir: "out".into(),
            scenario: ScenarioConfig::default(),
            features: FeatureTable::default(),
            train: TrainConfig::default(),
            search: SearchSection::default(),
            splits: SplitSizes::default(),
            evaluate: EvaluateSection::default(),
            ablation: AblationSection::default(),
            inputs: InputsSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical serialization, with the output
    /// directory blanked so relocated runs hash the same.
    pub fn hash(&self) -> Result<String> {
        let located = Self {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        Ok(hex(&Sha256::digest(located.to_toml_string()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.scenario.n_observations as u64 >= SPLIT_ID_STRIDE {
            return Err(Error::Config(format!(
                "n_observations must be below {SPLIT_ID_STRIDE}"
            )));
        }
        self.features.validate()?;
        self.train.validate()?;
        if self.search.s.is_empty() || self.search.s.contains(&0) {
            return Err(Error::Config("search.s must be a non-empty list of positive counts".into()));
        }
        self.search.search_config().validate()?;
        for split in Split::ALL {
            let n = self.splits.pairs(split);
            if n < 2 || !n.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "{} pair count must be even and at least 2, got {n}",
                    split.name()
                )));
            }
        }
        if self.evaluate.subset_size < 3 {
            return Err(Error::Config("evaluation subset needs at least 3 observations".into()));
        }
        if self.evaluate.histogram_bins == 0 {
            return Err(Error::Config("histogram needs at least one bin".into()));
        }
        Ok(())
    }

    pub fn seed(&self, label: &str) -> u64 {
        derive_seed(self.master_seed, label)
    }

    pub fn scenario_for(&self, split: Split) -> ScenarioConfig {
        ScenarioConfig {
            seed: self.seed(&format!("scenario/{}", split.name())),
            id_base: split.id_base(),
            ..self.scenario.clone()
        }
    }

    pub fn train_config(&self, label: &str) -> TrainConfig {
        TrainConfig {
            seed: self.seed(&format!("train/{label}")),
            ..self.train.clone()
        }
    }
}

/// Seed for one named consumer, derived from the master seed by SHA-256.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(cfg.hash().unwrap().len(), 64);
        let moved = ExperimentConfig {
            out_dir: "elsewhere".into(),
            ..cfg.clone()
        };
        assert_eq!(moved.hash().unwrap(), cfg.hash().unwrap());
        let reseeded = ExperimentConfig {
            master_seed: 1,
            ..cfg.clone()
        };
        assert_ne!(reseeded.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "master_seed = 5\n[scenario]\nn_observations = 1000\n[search]\ns = [1, 3]\n",
        )
        .unwrap();
        assert_eq!(cfg.master_seed, 5);
        assert_eq!(cfg.scenario.n_observations, 1000);
        assert_eq!(cfg.scenario.window_s, 43_200.0);
        assert_eq!(cfg.search.s_max(), 3);
        assert_eq!(cfg.search.prune_threshold, 0.3);
        assert_eq!(cfg.splits.train_pairs, 40_000);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            "[search]\ns = []\n",
            "[search]\ns = [0]\n",
            "[search]\nprune_threshold = 1.5\n",
            "[splits]\ntrain_pairs = 3\n",
            "[evaluate]\nhistogram_bins = 0\n",
            "[scenario]\nn_observations = 0\n",
            "typo_key = 1\n",
            "master_seed = \"x\"\n",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        // sha256(le64(0)) starts 0xaf5570f5a1810b7a
        assert_eq!(derive_seed(0, ""), u64::from_le_bytes([0xaf, 0x55, 0x70, 0xf5, 0xa1, 0x81, 0x0b, 0x7a]));
    }

    #[test]
    fn splits_are_disjoint() {
        let cfg = ExperimentConfig::default();
        let scen: Vec<_> = Split::ALL.iter().map(|&s| cfg.scenario_for(s)).collect();
        assert_ne!(scen[0].seed, scen[1].seed);
        assert_ne!(scen[1].seed, scen[2].seed);
        for w in Split::ALL.windows(2) {
            assert!(w[1].id_base() - w[0].id_base() >= SPLIT_ID_STRIDE);
        }
    }
}
