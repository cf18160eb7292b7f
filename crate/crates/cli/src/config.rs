//! The pipeline configuration file (TOML). Every section is optional; missing
//! fields take the defaults below. Relative paths resolve against the
//! directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rwrforge_core::corpus::Category;
use rwrforge_core::curation::{CurationPolicy, ExpansionConfig, DEFAULT_INSTRUCTION, DEFAULT_V_MIN};
use rwrforge_core::experiment::{Arm, ExperimentConfig, PretrainConfig, ARMS};
use rwrforge_core::model::SamplerConfig;
use rwrforge_core::rwr::RwrConfig;
use rwrforge_core::trainer::{EvalConfig, TrainConfig};
use rwrforge_gateway::{EndpointRole, ScorerEndpoint};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub expansion: Expansion,
    pub pretrain: PretrainConfig,
    pub sampling: Sampling,
    pub rewards: Rewards,
    pub curation: Curation,
    pub rwr: RwrConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: Ablation,
    pub endpoints: Endpoints,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            expansion: Expansion::default(),
            pretrain: PretrainConfig::default(),
            sampling: Sampling::default(),
            rewards: Rewards::default(),
            curation: Curation::default(),
            rwr: RwrConfig::default(),
            train: TrainConfig { total_steps: 600, warmup_steps: 60, learning_rate: 1e-3, ..TrainConfig::toy() },
            eval: EvalConfig { samples_per_prompt: 32, ..EvalConfig::default() },
            ablation: Ablation::default(),
            endpoints: Endpoints::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Corpus root holding every stage output.
    pub root: PathBuf,
    pub seed_prompts: PathBuf,
    /// Where `report` writes, relative to the corpus root.
    pub report_dir: PathBuf,
    /// Start from this checkpoint instead of pretraining a base model.
    pub base_checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            root: "run".into(),
            seed_prompts: "seeds.txt".into(),
            report_dir: "report".into(),
            base_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpanderBackend {
    /// Draws unseen prompts from the toy prompt family.
    #[default]
    Toy,
    /// A chat-completion endpoint (`RWRFORGE_EXPANSION_URL`).
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Expansion {
    pub backend: ExpanderBackend,
    /// New prompts wanted per category, on top of the seeds.
    pub targets: BTreeMap<Category, usize>,
    pub shots: usize,
    pub per_request: usize,
    pub max_rounds: usize,
    pub instruction: String,
    pub seed: u64,
}

impl Default for Expansion {
    fn default() -> Self {
        let e = ExpansionConfig::default();
        Self {
            backend: ExpanderBackend::Toy,
            targets: CurationPolicy::default().targets,
            shots: e.shots,
            per_request: e.per_request,
            max_rounds: e.max_rounds,
            instruction: DEFAULT_INSTRUCTION.into(),
            seed: 0,
        }
    }
}

impl Expansion {
    pub fn expansion_config(&self) -> ExpansionConfig {
        ExpansionConfig {
            shots: self.shots,
            per_request: self.per_request,
            max_rounds: self.max_rounds,
            instruction: self.instruction.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sampling {
    /// Samples per prompt (S); also the minimum a prompt needs to be curated.
    pub samples_per_prompt: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

impl Default for Sampling {
    fn default() -> Self {
        Self { samples_per_prompt: 32, seed: 7, sampler: SamplerConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rewards {
    /// Rewards computed by `label`: `oracle`, `jpeg`, `vqa`, `embedding`, `scalar`.
    pub names: Vec<String>,
    /// Template file for the `vqa` reward; the bundled ensemble when unset.
    pub vqa_templates: Option<PathBuf>,
}

impl Default for Rewards {
    fn default() -> Self {
        Self { names: vec!["oracle".into()], vqa_templates: None }
    }
}

pub const REWARD_NAMES: [&str; 5] = ["oracle", "jpeg", "vqa", "embedding", "scalar"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Curation {
    pub v_min: f64,
    pub min_extremal_mass: Option<f64>,
    pub held_out_fraction: f64,
    pub split_seed: u64,
}

impl Default for Curation {
    fn default() -> Self {
        Self { v_min: DEFAULT_V_MIN, min_extremal_mass: None, held_out_fraction: 0.5, split_seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub seeds: Vec<u64>,
    /// Fresh model samples per training prompt for every seed.
    pub train_samples: usize,
    /// Arm labels: `multimodal_rwr`, `text_rwr`, `image_rwr`, `sft`, `rejection`.
    pub arms: Vec<String>,
    /// Also compare variance-selected prompts against a random subset.
    pub data_ablation: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            train_samples: 32,
            arms: ARMS.iter().map(|a| a.label().to_string()).collect(),
            data_ablation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Endpoints {
    /// VQA and scalar scorers. Falls back to `RWRFORGE_SCORER_URL`.
    pub scorer: Option<ScorerEndpoint>,
    /// Falls back to `RWRFORGE_EMBEDDING_URL`.
    pub embedding: Option<ScorerEndpoint>,
    /// Falls back to `RWRFORGE_EXPANSION_URL`.
    pub expansion: Option<ScorerEndpoint>,
}

impl Endpoints {
    pub fn resolve(&self, role: EndpointRole) -> Result<ScorerEndpoint, CliError> {
        let configured = match role {
            EndpointRole::Scorer => &self.scorer,
            EndpointRole::Embedding => &self.embedding,
            EndpointRole::Expansion => &self.expansion,
        };
        match configured {
            Some(e) => Ok(e.clone()),
            None => ScorerEndpoint::from_env(role).map_err(|e| CliError::Remote(e.to_string())),
        }
    }
}

/// A parsed config plus the directory its relative paths hang off.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: PipelineConfig,
    pub base_dir: PathBuf,
}

impl Loaded {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let config: PipelineConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        validate(&config)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base_dir })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn root(&self) -> PathBuf {
        self.resolve(&self.config.paths.root)
    }
}

fn validate(c: &PipelineConfig) -> Result<(), CliError> {
    let bad = |m: String| Err(CliError::Config(m));
    for n in &c.rewards.names {
        if !REWARD_NAMES.contains(&n.as_str()) {
            return bad(format!("unknown reward {n:?}; expected one of {REWARD_NAMES:?}"));
        }
    }
    if !c.rewards.names.contains(&c.rwr.reward_name) {
        return bad(format!("rwr.reward_name {:?} is not among rewards.names", c.rwr.reward_name));
    }
    c.rwr.validate().map_err(|e| CliError::Config(e.to_string()))?;
    c.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
    c.pretrain.train.validate().map_err(|e| CliError::Config(format!("pretrain: {e}")))?;
    c.curation_policy().validate().map_err(|e| CliError::Config(e.to_string()))?;
    if !(0.0..1.0).contains(&c.curation.held_out_fraction) || c.curation.held_out_fraction == 0.0 {
        return bad("curation.held_out_fraction must lie in (0, 1)".into());
    }
    if c.eval.samples_per_prompt == 0 {
        return bad("eval.samples_per_prompt must be positive".into());
    }
    if c.ablation.seeds.is_empty() {
        return bad("ablation.seeds is empty".into());
    }
    c.arms()?;
    Ok(())
}

impl PipelineConfig {
    pub fn curation_policy(&self) -> CurationPolicy {
        CurationPolicy {
            targets: self.expansion.targets.clone(),
            v_min: self.curation.v_min,
            min_extremal_mass: self.curation.min_extremal_mass,
            samples_per_prompt: self.sampling.samples_per_prompt,
        }
    }

    pub fn arms(&self) -> Result<Vec<Arm>, CliError> {
        self.ablation
            .arms
            .iter()
            .map(|name| {
                ARMS.iter()
                    .find(|a| a.label() == name)
                    .copied()
                    .ok_or_else(|| CliError::Config(format!("unknown ablation arm {name:?}")))
            })
            .collect()
    }

    /// The experiment settings the ablation stage runs under.
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            pretrain: self.pretrain.clone(),
            sampler: self.sampling.sampler,
            probe_samples: self.sampling.samples_per_prompt,
            selection: self.curation_policy(),
            held_out_fraction: self.curation.held_out_fraction,
            train_samples: self.ablation.train_samples,
            rwr: self.rwr.clone(),
            finetune: self.train.clone(),
            eval: self.eval,
            seeds: self.ablation.seeds.clone(),
            split_seed: self.curation.split_seed,
        }
    }
}

/// Lowercase hex SHA-256 of the JSON encoding of `value`.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialize");
    hex::encode(Sha256::digest(bytes))
}
