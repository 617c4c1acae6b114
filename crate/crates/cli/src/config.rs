//! The TOML pipeline configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hardneg::context::{Decoding, StageEndpoints};
use hardneg::eval::{MetricSpec, DEFAULT_RERANK_K};
use hardneg::forge::DEFAULT_BATCH_GROUPS;
use hardneg::gateway::EndpointConfig;
use hardneg::generation::GenerationParams;
use hardneg::pipeline::{StageOptions, DEFAULT_CHUNK_SIZE};
use hardneg::prompts::{PromptSet, BUILTIN_VERSION};
use serde::{Deserialize, Serialize};

/// Endpoint id used when a mock or dry run has no endpoints configured.
pub const MOCK_ENDPOINT: &str = "mock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub endpoints: Vec<EndpointConfig>,
    /// Which endpoint serves each stage. May be omitted with one endpoint.
    #[serde(default)]
    pub stages: Option<StageEndpoints>,
    /// Directory holding `<version>/<template>.txt`; built-in prompts if unset.
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default = "default_prompts_version")]
    pub prompts_version: String,
    #[serde(default = "default_chunk_size")]
    pub chunk_size: usize,
    #[serde(default)]
    pub generation: GenerationParams,
    #[serde(default)]
    pub decoding: Decoding,
    #[serde(default)]
    pub verification: VerificationConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_prompts_version() -> String {
    BUILTIN_VERSION.to_string()
}

fn default_chunk_size() -> usize {
    DEFAULT_CHUNK_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerificationConfig {
    pub strict_ambiguous: bool,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self { strict_ambiguous: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub output_dir: PathBuf,
    pub rephrase_fraction: f64,
    pub seed: u64,
    pub batch_groups: usize,
    pub export_batches: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            rephrase_fraction: 0.5,
            seed: 0,
            batch_groups: DEFAULT_BATCH_GROUPS,
            export_batches: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_rerank: usize,
    pub metrics: Vec<MetricSpec>,
    /// Largest tolerated drop in any metric, as a fraction (0.01 = one point).
    pub regression_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_rerank: DEFAULT_RERANK_K,
            metrics: MetricSpec::defaults(),
            regression_threshold: 0.0,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            endpoints: Vec::new(),
            stages: None,
            prompts_dir: None,
            prompts_version: default_prompts_version(),
            chunk_size: DEFAULT_CHUNK_SIZE,
            generation: GenerationParams::default(),
            decoding: Decoding::default(),
            verification: VerificationConfig::default(),
            dataset: DatasetConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses and validates; relative `prompts_dir` and `dataset.output_dir`
    /// resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(dir) = &config.prompts_dir {
            config.prompts_dir = Some(base.join(dir));
        }
        config.dataset.output_dir = base.join(&config.dataset.output_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for e in &self.endpoints {
            e.validate()?;
            if !ids.insert(e.endpoint_id.as_str()) {
                bail!("duplicate endpoint `{}`", e.endpoint_id);
            }
        }
        if let Some(stages) = &self.stages {
            for id in stages.ids() {
                if !ids.contains(id) {
                    bail!("stage endpoint `{id}` is not defined in [[endpoints]]");
                }
            }
        } else if self.endpoints.len() > 1 {
            bail!("[stages] is required when more than one endpoint is configured");
        }
        self.generation.validate()?;
        if self.chunk_size == 0 {
            bail!("chunk_size must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.dataset.rephrase_fraction) {
            bail!("dataset.rephrase_fraction must be in [0, 1]");
        }
        if self.dataset.batch_groups == 0 {
            bail!("dataset.batch_groups must be >= 1");
        }
        let max_k = self.eval.metrics.iter().map(|m| m.k).max().unwrap_or(0);
        if self.eval.k_rerank < max_k {
            bail!(
                "eval.k_rerank ({}) must be >= the largest metric cutoff ({max_k})",
                self.eval.k_rerank
            );
        }
        if !self.eval.regression_threshold.is_finite() || self.eval.regression_threshold < 0.0 {
            bail!("eval.regression_threshold must be finite and >= 0");
        }
        Ok(())
    }

    /// Endpoints to register, adding a local placeholder when none are
    /// configured and `allow_placeholder` is set.
    pub fn endpoint_configs(&self, allow_placeholder: bool) -> Result<Vec<EndpointConfig>> {
        if self.endpoints.is_empty() {
            if allow_placeholder {
                return Ok(vec![EndpointConfig::local(MOCK_ENDPOINT, 4)]);
            }
            bail!("no [[endpoints]] configured");
        }
        Ok(self.endpoints.clone())
    }

    pub fn stage_endpoints(&self) -> StageEndpoints {
        match (&self.stages, self.endpoints.first()) {
            (Some(stages), _) => stages.clone(),
            (None, Some(e)) => StageEndpoints::single(&e.endpoint_id),
            (None, None) => StageEndpoints::single(MOCK_ENDPOINT),
        }
    }

    pub fn prompts(&self) -> Result<PromptSet> {
        match &self.prompts_dir {
            Some(dir) => PromptSet::load(dir, &self.prompts_version)
                .with_context(|| format!("loading prompts from {}", dir.display())),
            None if self.prompts_version == BUILTIN_VERSION => Ok(PromptSet::builtin()),
            None => bail!("prompts_version `{}` needs prompts_dir", self.prompts_version),
        }
    }

    pub fn stage_options(&self) -> StageOptions {
        StageOptions {
            strict_ambiguous: self.verification.strict_ambiguous,
            chunk_size: self.chunk_size,
        }
    }
}
