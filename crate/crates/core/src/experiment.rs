//! The toy post-training loop end to end: pretrain a base model on teacher
//! samples, sample and grade it, pick weak prompts, fine-tune under each
//! weighting arm, and evaluate on held-out weak prompts.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::{summarize, DistributionSummary, DEFAULT_BINS};
use crate::corpus::{GenerationSample, ImagePayload, Origin, Prompt, RewardRecord};
use crate::curation::{category_slug, select_weak_prompts, CurationPolicy};
use crate::model::{sample_joint, ModelConfig, ModelParams, SamplerConfig};
use crate::reward::{normalize_rewards, oracle_score, RewardFunction};
use crate::rwr::{assign_weights, build_examples, ModalityMode, Rejection, RwrConfig, WeightedExample};
use crate::toy::{self, teacher, ToySpec, Vocabulary};
use crate::trainer::{
    pack, run_ablation, sample_rng, train, AblationCell, AblationTable, EvalConfig, StepMetrics, TrainConfig,
    TrainError,
};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Rwr(#[from] crate::rwr::RwrError),
    #[error(transparent)]
    Reward(#[from] crate::reward::RewardError),
    #[error(transparent)]
    Curation(#[from] crate::curation::CurationError),
    #[error(transparent)]
    Analytics(#[from] crate::analytics::AnalyticsError),
    #[error("prompt {0}: {1}")]
    Prompt(String, toy::ToyError),
    #[error("{0}")]
    Setup(String),
}

/// Prompt records for toy specifications, with ids `<family>-<index>`.
pub fn toy_prompts(specs: &[ToySpec]) -> Vec<Prompt> {
    let mut counters: HashMap<&str, usize> = HashMap::new();
    specs
        .iter()
        .map(|s| {
            let slug = category_slug(s.category());
            let n = counters.entry(slug).or_insert(0);
            *n += 1;
            Prompt { id: format!("{slug}-{:03}", *n), text: s.to_string(), category: s.category(), origin: Origin::Seed }
        })
        .collect()
}

fn parse(prompt: &Prompt) -> Result<ToySpec, ExperimentError> {
    toy::parse_toy_prompt(&prompt.text).map_err(|e| ExperimentError::Prompt(prompt.id.clone(), e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub teacher: teacher::TeacherConfig,
    pub samples_per_prompt: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            teacher: teacher::TeacherConfig::default(),
            samples_per_prompt: 64,
            train: TrainConfig { total_steps: 3_000, warmup_steps: 300, learning_rate: 3e-3, ..TrainConfig::toy() },
            seed: 0,
        }
    }
}

/// Unit-weight teacher demonstrations, `per_prompt` per prompt.
pub fn teacher_examples(
    prompts: &[Prompt],
    per_prompt: usize,
    cfg: &teacher::TeacherConfig,
    seed: u64,
) -> Result<Vec<WeightedExample>, ExperimentError> {
    let mut out = Vec::with_capacity(prompts.len() * per_prompt);
    for (pi, prompt) in prompts.iter().enumerate() {
        let spec = parse(prompt)?;
        for j in 0..per_prompt {
            let (reasoning, image) = teacher::teacher_sample(&spec, cfg, &mut sample_rng(seed, pi, j));
            let example = toy::tokenize(&prompt.text, &reasoning, Some(&image))
                .map_err(|e| ExperimentError::Prompt(prompt.id.clone(), e))?;
            out.push(WeightedExample { prompt_id: prompt.id.clone(), sample_index: j as u32, example, w_text: 1.0, w_image: 1.0 });
        }
    }
    Ok(out)
}

/// Fits a fresh model to teacher demonstrations.
pub fn pretrain_base(
    prompts: &[Prompt],
    cfg: &PretrainConfig,
) -> Result<(ModelParams, Vec<StepMetrics>), ExperimentError> {
    let examples = teacher_examples(prompts, cfg.samples_per_prompt, &cfg.teacher, cfg.seed)?;
    let init = ModelParams::init(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let data = pack(&examples, cfg.train.token_budget)?;
    Ok(train(&init, &data, &TrainConfig { seed: cfg.seed, ..cfg.train.clone() })?)
}

/// `per_prompt` model samples per prompt. Sample `j` of the prompt at
/// position `i` uses the generator `sample_rng(seed, i, j)`.
pub fn collect_samples(
    params: &ModelParams,
    prompts: &[Prompt],
    per_prompt: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<GenerationSample>, ExperimentError> {
    let vocab = Vocabulary::toy();
    let mut out = Vec::with_capacity(prompts.len() * per_prompt);
    for (pi, prompt) in prompts.iter().enumerate() {
        let tokens = vocab.encode(&prompt.text).map_err(|e| ExperimentError::Prompt(prompt.id.clone(), e))?;
        for j in 0..per_prompt {
            let s = sample_joint(params, &tokens, sampler, &mut sample_rng(seed, pi, j));
            let reasoning_text =
                vocab.decode(&s.reasoning).map_err(|e| ExperimentError::Prompt(prompt.id.clone(), e))?;
            out.push(GenerationSample {
                prompt_id: prompt.id.clone(),
                sample_index: j as u32,
                reasoning_text,
                switch_emitted: s.switch_emitted,
                image: s.image.map(|coords| ImagePayload::Toy { coords }),
                sampler_seed: seed,
            });
        }
    }
    Ok(out)
}

/// Raw oracle rewards, one record per sample.
pub fn oracle_rewards(samples: &[GenerationSample], prompts: &[Prompt]) -> Result<Vec<RewardRecord>, ExperimentError> {
    let by_id: HashMap<&str, &Prompt> = prompts.iter().map(|p| (p.id.as_str(), p)).collect();
    let f = RewardFunction::oracle();
    samples
        .iter()
        .map(|s| {
            let p = by_id
                .get(s.prompt_id.as_str())
                .ok_or_else(|| ExperimentError::Setup(format!("sample for unknown prompt {}", s.prompt_id)))?;
            Ok(RewardRecord {
                prompt_id: s.prompt_id.clone(),
                sample_index: s.sample_index,
                reward_name: f.name.clone(),
                scorer_version: f.version.clone(),
                raw: oracle_score(s, p)?,
                normalized: None,
            })
        })
        .collect()
}

/// Per-prompt summaries of normalized rewards.
pub fn summarize_prompts(
    rewards: &[RewardRecord],
) -> Result<BTreeMap<String, DistributionSummary>, ExperimentError> {
    let mut by_prompt: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rewards {
        let v = r.normalized.ok_or_else(|| ExperimentError::Setup(format!("{}#{} is not normalized", r.prompt_id, r.sample_index)))?;
        by_prompt.entry(r.prompt_id.clone()).or_default().push(v);
    }
    by_prompt
        .into_iter()
        .map(|(id, v)| Ok((id, summarize(&v, DEFAULT_BINS)?)))
        .collect()
}

/// A fine-tuning arm: RWR under one modality mode, or rejection sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Arm {
    Rwr(ModalityMode),
    Rejection { threshold: f64 },
}

impl Arm {
    pub fn label(&self) -> &'static str {
        match self {
            Arm::Rwr(m) => m.label(),
            Arm::Rejection { .. } => "rejection",
        }
    }

    pub fn rwr_config(&self, base: &RwrConfig) -> RwrConfig {
        match *self {
            Arm::Rwr(mode) => RwrConfig { modality_mode: mode, rejection: None, ..base.clone() },
            Arm::Rejection { threshold } => RwrConfig { rejection: Some(Rejection { threshold }), ..base.clone() },
        }
    }
}

/// Weighted training examples for one arm from graded samples.
pub fn arm_examples(
    samples: &[GenerationSample],
    rewards: &[RewardRecord],
    prompts: &[Prompt],
    arm: Arm,
    rwr: &RwrConfig,
) -> Result<Vec<WeightedExample>, ExperimentError> {
    let cfg = arm.rwr_config(rwr);
    let normalized = normalize_rewards(rewards, cfg.normalization)?;
    let weights = assign_weights(samples, &normalized, &cfg, "")?;
    Ok(build_examples(samples, prompts, &weights)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub pretrain: PretrainConfig,
    pub sampler: SamplerConfig,
    /// Samples per prompt used to measure intra-prompt variance.
    pub probe_samples: usize,
    pub selection: CurationPolicy,
    /// Fraction of the weak prompts kept out of training for evaluation.
    pub held_out_fraction: f64,
    /// Model samples per training prompt, drawn afresh for every seed.
    pub train_samples: usize,
    pub rwr: RwrConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub split_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            pretrain: PretrainConfig::default(),
            sampler: SamplerConfig::default(),
            probe_samples: 32,
            selection: CurationPolicy { samples_per_prompt: 32, ..CurationPolicy::default() },
            held_out_fraction: 0.5,
            train_samples: 32,
            rwr: RwrConfig::default(),
            finetune: TrainConfig { total_steps: 600, warmup_steps: 60, learning_rate: 1e-3, ..TrainConfig::toy() },
            eval: EvalConfig { samples_per_prompt: 32, ..EvalConfig::default() },
            seeds: vec![1, 2, 3, 4, 5],
            split_seed: 7,
        }
    }
}

/// Base model plus the prompt partition every arm shares.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub base: ModelParams,
    pub prompts: Vec<Prompt>,
    pub summaries: BTreeMap<String, DistributionSummary>,
    /// Weak prompts in selection order.
    pub weak: Vec<String>,
    pub train_weak: Vec<Prompt>,
    pub held_out: Vec<Prompt>,
}

impl Prepared {
    /// Prompts eligible for training: everything except held-out prompts.
    pub fn trainable(&self) -> Vec<Prompt> {
        let held: Vec<&str> = self.held_out.iter().map(|p| p.id.as_str()).collect();
        self.prompts.iter().filter(|p| !held.contains(&p.id.as_str())).cloned().collect()
    }
}

/// Pretrains the base model, probes every prompt, selects the weak set and
/// splits it into training and held-out halves.
pub fn prepare(prompts: Vec<Prompt>, cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    let (base, _) = pretrain_base(&prompts, &cfg.pretrain)?;
    prepare_with_base(base, prompts, cfg)
}

pub fn prepare_with_base(
    base: ModelParams,
    prompts: Vec<Prompt>,
    cfg: &ExperimentConfig,
) -> Result<Prepared, ExperimentError> {
    let probe = collect_samples(&base, &prompts, cfg.probe_samples, &cfg.sampler, cfg.split_seed)?;
    let rewards = normalize_rewards(&oracle_rewards(&probe, &prompts)?, cfg.rwr.normalization)?;
    let summaries = summarize_prompts(&rewards)?;
    let weak = select_weak_prompts(&summaries, &cfg.selection)?;
    let (train_weak, held_out) = split_weak(&weak, &prompts, cfg.held_out_fraction, cfg.split_seed)?;
    Ok(Prepared { base, prompts, summaries, weak, train_weak, held_out })
}

/// Splits weak prompt ids into `(train, held_out)` prompt lists. The ids are
/// sorted, then shuffled with `seed`; each side keeps at least one prompt and
/// follows the order of `prompts`.
pub fn split_weak(
    weak: &[String],
    prompts: &[Prompt],
    held_out_fraction: f64,
    seed: u64,
) -> Result<(Vec<Prompt>, Vec<Prompt>), ExperimentError> {
    if weak.len() < 2 {
        return Err(ExperimentError::Setup(format!("only {} weak prompts selected", weak.len())));
    }
    if !(0.0..=1.0).contains(&held_out_fraction) {
        return Err(ExperimentError::Setup(format!("held_out_fraction {held_out_fraction} outside [0, 1]")));
    }
    let mut order = weak.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_held = ((order.len() as f64 * held_out_fraction).round() as usize).clamp(1, order.len() - 1);
    let pick = |ids: &[String]| -> Vec<Prompt> { prompts.iter().filter(|p| ids.contains(&p.id)).cloned().collect() };
    Ok((pick(&order[n_held..]), pick(&order[..n_held])))
}

/// Graded model samples on `prompts`, cached per seed.
struct SampleCache<'a> {
    prep: &'a Prepared,
    cfg: &'a ExperimentConfig,
    cache: HashMap<(String, u64), (Vec<Prompt>, Vec<GenerationSample>, Vec<RewardRecord>)>,
}

impl<'a> SampleCache<'a> {
    fn get(
        &mut self,
        key: &str,
        prompts: impl FnOnce() -> Vec<Prompt>,
        seed: u64,
    ) -> Result<&(Vec<Prompt>, Vec<GenerationSample>, Vec<RewardRecord>), ExperimentError> {
        let k = (key.to_string(), seed);
        if !self.cache.contains_key(&k) {
            let prompts = prompts();
            let samples = collect_samples(&self.prep.base, &prompts, self.cfg.train_samples, &self.cfg.sampler, seed)?;
            let rewards = oracle_rewards(&samples, &prompts)?;
            self.cache.insert(k.clone(), (prompts, samples, rewards));
        }
        Ok(&self.cache[&k])
    }
}

fn ablation(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    cells: &[AblationCell],
    mut data: impl FnMut(&mut SampleCache, &str, u64) -> Result<Vec<WeightedExample>, ExperimentError>,
) -> Result<AblationTable, ExperimentError> {
    let mut cache = SampleCache { prep, cfg, cache: HashMap::new() };
    let mut failure = None;
    let table = run_ablation(&prep.base, cells, &cfg.seeds, &cfg.finetune, &cfg.eval, &prep.held_out, |cell, seed| {
        data(&mut cache, cell, seed).map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            TrainError::Data(msg)
        })
    });
    match (table, failure) {
        (Ok(t), _) => Ok(t),
        (Err(_), Some(e)) => Err(e),
        (Err(e), None) => Err(e.into()),
    }
}

pub const ARMS: [Arm; 5] = [
    Arm::Rwr(ModalityMode::Multimodal),
    Arm::Rwr(ModalityMode::TextOnly),
    Arm::Rwr(ModalityMode::ImageOnly),
    Arm::Rwr(ModalityMode::NoneSft),
    Arm::Rejection { threshold: crate::rwr::DEFAULT_REJECTION_THRESHOLD },
];

/// Every arm trained on the weak training prompts, evaluated on the
/// held-out weak prompts.
pub fn modality_ablation(prep: &Prepared, cfg: &ExperimentConfig, arms: &[Arm]) -> Result<AblationTable, ExperimentError> {
    let cells: Vec<AblationCell> = arms.iter().map(|a| AblationCell { name: a.label().to_string() }).collect();
    ablation(prep, cfg, &cells, |cache, cell, seed| {
        let arm = *arms.iter().find(|a| a.label() == cell).expect("cell names come from arms");
        let (prompts, samples, rewards) = cache.get("weak", || prep.train_weak.clone(), seed)?;
        arm_examples(samples, rewards, prompts, arm, &cfg.rwr)
    })
}

pub const WEAK_SELECTED: &str = "weak_selected";
pub const RANDOM_SUBSET: &str = "random_subset";

/// Multimodal RWR on the variance-selected training prompts against an
/// equally sized random draw from all non-held-out prompts.
pub fn data_ablation(prep: &Prepared, cfg: &ExperimentConfig) -> Result<AblationTable, ExperimentError> {
    let cells = [AblationCell { name: WEAK_SELECTED.into() }, AblationCell { name: RANDOM_SUBSET.into() }];
    let arm = Arm::Rwr(ModalityMode::Multimodal);
    let size = prep.train_weak.len();
    ablation(prep, cfg, &cells, |cache, cell, seed| {
        let (prompts, samples, rewards) = if cell == WEAK_SELECTED {
            cache.get(cell, || prep.train_weak.clone(), seed)?
        } else {
            cache.get(
                cell,
                || {
                    let mut pool = prep.trainable();
                    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                    pool.truncate(size);
                    pool
                },
                seed,
            )?
        };
        arm_examples(samples, rewards, prompts, arm, &cfg.rwr)
    })
}
