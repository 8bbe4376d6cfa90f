//! Run configuration: a TOML file with the world source, the pipeline
//! hyperparameters, and per-command harness parameters. Unknown keys are
//! rejected everywhere, referenced files must exist at load time, and the
//! master seed and output directory must come from the file or the flags.

use std::path::{Path, PathBuf};

use geolevels_core::scaling::PipelineConfig;
use geolevels_core::synthworld::WorldSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Where the world comes from: generated from a spec or read from a dataset
/// file. Exactly one must be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSource {
    pub spec: Option<WorldSpec>,
    pub dataset: Option<PathBuf>,
    /// Generation seed for `spec` worlds; the master seed when absent.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateParams {
    pub train_fraction: f64,
    pub repetitions: usize,
    pub share_stage12: bool,
}

impl Default for EvaluateParams {
    fn default() -> Self {
        Self { train_fraction: 0.8, repetitions: 100, share_stage12: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessParams {
    /// Train fractions of the sweep; each runs with and without augmentation.
    pub fractions: Vec<f64>,
}

impl Default for RobustnessParams {
    fn default() -> Self {
        Self { fractions: vec![0.2, 0.4, 0.6, 0.8] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferParams {
    /// Seeds of the world grid; every ordered (source, target) pair is scored.
    pub world_seeds: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InequalityParams {
    /// Extra worlds to train and summarize; empty means just the configured
    /// world.
    pub world_seeds: Vec<u64>,
    /// Weight the factor Gini by tile count instead of one entry per district.
    pub factor_per_tile: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZipfTarget {
    /// District ground-truth labels of the configured indicator.
    Labels,
    /// Latent district factors.
    Factors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZipfParams {
    pub top_quantile: f64,
    pub target: ZipfTarget,
}

impl Default for ZipfParams {
    fn default() -> Self {
        Self { top_quantile: 1.0, target: ZipfTarget::Labels }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictParams {
    /// Trained model checkpoint to load.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldSource,
    pub indicator: String,
    pub pipeline: PipelineConfig,
    pub evaluate: EvaluateParams,
    pub robustness: RobustnessParams,
    pub transfer: TransferParams,
    pub inequality: InequalityParams,
    pub zipf: ZipfParams,
    pub predict: PredictParams,
    /// Master seed; may instead come from `--seed`.
    pub seed: Option<u64>,
    /// Output directory; may instead come from `--out`.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldSource::default(),
            indicator: "power".to_string(),
            pipeline: PipelineConfig::default(),
            evaluate: EvaluateParams::default(),
            robustness: RobustnessParams::default(),
            transfer: TransferParams::default(),
            inequality: InequalityParams::default(),
            zipf: ZipfParams::default(),
            predict: PredictParams::default(),
            seed: None,
            out: None,
        }
    }
}

/// A config with the seed and output directory settled from file and flags.
#[derive(Clone, Debug)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), CliError> {
        match (&self.world.spec, &self.world.dataset) {
            (None, None) => {
                return Err(CliError::Config(
                    "a world is required: set [world.spec] or world.dataset".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "[world.spec] and world.dataset are mutually exclusive".into(),
                ))
            }
            _ => {}
        }
        if let Some(spec) = &self.world.spec {
            spec.validate().map_err(CliError::from)?;
        }
        if let Some(dataset) = &self.world.dataset {
            require_file(dataset, "world.dataset")?;
        }
        if let Some(checkpoint) = &self.predict.checkpoint {
            require_file(checkpoint, "predict.checkpoint")?;
        }
        if self.indicator.is_empty() {
            return Err(CliError::Config("indicator must not be empty".into()));
        }
        self.pipeline.validate().map_err(CliError::from)?;
        Ok(())
    }

    /// Merges the command-line overrides; both the seed and the output
    /// directory are mandatory after the merge.
    pub fn resolve(
        mut self,
        seed: Option<u64>,
        out: Option<PathBuf>,
    ) -> Result<ResolvedConfig, CliError> {
        if let Some(seed) = seed {
            self.seed = Some(seed);
        }
        if let Some(out) = out {
            self.out = Some(out);
        }
        let seed = self
            .seed
            .ok_or_else(|| CliError::Config("a seed is required: set seed or pass --seed".into()))?;
        let out = self
            .out
            .clone()
            .ok_or_else(|| {
                CliError::Config("an output directory is required: set out or pass --out".into())
            })?;
        Ok(ResolvedConfig { config: self, seed, out })
    }
}

fn require_file(path: &Path, key: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{key} does not exist: {}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("run.toml");
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn minimal_config_loads_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[world.spec]\nn_districts = 10\n");
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.indicator, "power");
        assert_eq!(config.world.spec.as_ref().unwrap().n_districts, 10);
        assert_eq!(config.evaluate.repetitions, 100);
        let resolved = config.resolve(Some(7), Some(dir.path().join("out"))).unwrap();
        assert_eq!(resolved.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        let dir = tempfile::tempdir().unwrap();
        for text in [
            "[world.spec]\nn_districts = 10\nunknown_key = 1\n",
            "unknown_key = 1\n[world.spec]\nn_districts = 10\n",
            "[world.spec]\nn_districts = 10\n[pipeline]\nunknown_key = 1\n",
            "[world.spec]\nn_districts = 10\n[evaluate]\nunknown_key = 1\n",
        ] {
            let path = write_config(dir.path(), text);
            assert!(
                matches!(RunConfig::load(&path), Err(CliError::Config(_))),
                "accepted: {text}"
            );
        }
    }

    #[test]
    fn world_source_must_be_exactly_one_of_spec_and_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "indicator = \"power\"\n");
        assert!(matches!(RunConfig::load(&path), Err(CliError::Config(_))));

        std::fs::write(dir.path().join("world.jsonl"), "x").unwrap();
        let both = format!(
            "[world]\ndataset = {:?}\n[world.spec]\nn_districts = 10\n",
            dir.path().join("world.jsonl")
        );
        let path = write_config(dir.path(), &both);
        assert!(matches!(RunConfig::load(&path), Err(CliError::Config(_))));
    }

    #[test]
    fn referenced_files_must_exist_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("[world]\ndataset = {:?}\n", dir.path().join("missing.jsonl"));
        let path = write_config(dir.path(), &text);
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("world.dataset"), "{err}");

        let text = format!(
            "[world.spec]\nn_districts = 10\n[predict]\ncheckpoint = {:?}\n",
            dir.path().join("missing.ckpt")
        );
        let path = write_config(dir.path(), &text);
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("predict.checkpoint"), "{err}");
    }

    #[test]
    fn missing_seed_or_out_fails_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[world.spec]\nn_districts = 10\n");
        let config = RunConfig::load(&path).unwrap();
        assert!(matches!(
            config.clone().resolve(None, Some(dir.path().join("out"))),
            Err(CliError::Config(_))
        ));
        assert!(matches!(config.resolve(Some(1), None), Err(CliError::Config(_))));
    }

    #[test]
    fn pipeline_settings_round_trip_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let text = "\
[world.spec]
n_districts = 8
[pipeline]
surrogate_labels = 500
cluster_sizes = [0, 10]
ablation = \"no_ensemble\"
[pipeline.forest]
n_trees = 50
[zipf]
target = \"factors\"
top_quantile = 0.5
";
        let path = write_config(dir.path(), text);
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.pipeline.surrogate_labels, 500);
        assert_eq!(config.pipeline.cluster_sizes, vec![0, 10]);
        assert_eq!(config.pipeline.forest.n_trees, 50);
        assert_eq!(config.zipf.target, ZipfTarget::Factors);
        assert_eq!(config.zipf.top_quantile, 0.5);
    }
}
