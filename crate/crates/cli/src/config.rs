//! TOML run configuration. Every field has a default; command-line flags are
//! applied on top and the merged result is what manifests record.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use claimcheck::claims::PipelineConfig;
use claimcheck::finetune::BuildOptions;
use claimcheck::gateway::{Gateway, GatewayOptions, HttpBackend, HttpConfig, MockBackend};
use claimcheck::probe::{EmbeddingType, TrainConfig, WeightEncoding};
use claimcheck::SplitRatios;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Mock script; without one the mock answers from its seeded generator.
    pub mock_script: Option<PathBuf>,
    pub http: Option<HttpConfig>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            mock_script: None,
            http: None,
        }
    }
}

impl BackendConfig {
    pub fn gateway(&self, options: GatewayOptions) -> anyhow::Result<Gateway> {
        Ok(match self.kind {
            BackendKind::Mock => {
                let backend = match &self.mock_script {
                    Some(p) => MockBackend::from_script(p)?,
                    None => MockBackend::default(),
                };
                Gateway::new(backend, options)
            }
            BackendKind::Http => {
                let Some(http) = &self.http else {
                    bail!("backend kind http needs an [backend.http] section with base_url and model");
                };
                Gateway::new(HttpBackend::new(http.clone()), options)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EntityStrategy {
    Llm,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    pub detectors: Vec<String>,
    pub panel: bool,
    pub entity: EntityStrategy,
    pub probe_model: Option<PathBuf>,
    pub selfcheck_samples: usize,
    pub selfcheck_temperature: f64,
    pub normalize_label_probs: bool,
}

impl Default for ScoreSection {
    fn default() -> Self {
        ScoreSection {
            detectors: Vec::new(),
            panel: false,
            entity: EntityStrategy::Llm,
            probe_model: None,
            selfcheck_samples: 20,
            selfcheck_temperature: 1.0,
            normalize_label_probs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub embedding: EmbeddingType,
    pub search_embedding: bool,
    pub include_embedding_layer: bool,
    pub grad_check: bool,
    pub encoding: WeightEncoding,
    pub train: TrainConfig,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            embedding: EmbeddingType::Type4,
            search_embedding: false,
            include_embedding_layer: false,
            grad_check: false,
            encoding: WeightEncoding::Text,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Single,
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub ratios: SplitRatios,
    pub stratified: bool,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            ratios: SplitRatios::default(),
            stratified: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSection {
    pub mode: Mode,
    pub min_bacc: f64,
    pub subset: Subset,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        CalibrateSection {
            mode: Mode::Single,
            min_bacc: 0.70,
            subset: Subset::Validation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub subset: Subset,
    pub stratify_length: bool,
    pub length_low: usize,
    pub length_high: usize,
    pub histogram: bool,
    pub histogram_bins: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            subset: Subset::Test,
            stratify_length: false,
            length_low: 500,
            length_high: 1000,
            histogram: false,
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub backend: BackendConfig,
    /// Backend serving the fine-tuned detector model.
    pub finetuned_backend: Option<BackendConfig>,
    pub gateway: GatewayOptions,
    pub pipeline: PipelineConfig,
    pub split: SplitSection,
    pub score: ScoreSection,
    pub probe: ProbeSection,
    pub build: BuildOptions,
    pub calibrate: CalibrateSection,
    pub evaluate: EvaluateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            backend: BackendConfig::default(),
            finetuned_backend: None,
            gateway: GatewayOptions::default(),
            pipeline: PipelineConfig::default(),
            split: SplitSection::default(),
            score: ScoreSection::default(),
            probe: ProbeSection::default(),
            build: BuildOptions::default(),
            calibrate: CalibrateSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn gateway(&self) -> anyhow::Result<Gateway> {
        self.backend.gateway(self.gateway)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let c: RunConfig = toml::from_str(
            r#"
            seed = 5
            [backend]
            kind = "http"
            [backend.http]
            base_url = "http://localhost:8000/v1"
            model = "m"
            [probe.train]
            epochs = 7
            [calibrate]
            mode = "dual"
            "#,
        )
        .unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.backend.kind, BackendKind::Http);
        assert_eq!(c.probe.train.epochs, 7);
        assert_eq!(c.probe.train.hidden_width, 256);
        assert_eq!(c.calibrate.mode, Mode::Dual);
        assert_eq!(c.calibrate.min_bacc, 0.70);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[score]\ndetector = [\"x\"]").is_err());
    }
}
