use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{pack, train, TrainConfig, TrainError};
use crate::corpus::{Category, Prompt};
use crate::model::{sample_joint, ModelParams, SamplerConfig};
use crate::rwr::WeightedExample;
use crate::toy::{self, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Samples drawn per prompt (E).
    pub samples_per_prompt: usize,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples_per_prompt: 16, sampler: SamplerConfig::default(), seed: 0 }
    }
}

/// Deterministic generator for sample `index` of the prompt at position
/// `prompt` in a run seeded with `seed`.
pub fn sample_rng(seed: u64, prompt: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((prompt as u64) << 32) | index as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub prompt_id: String,
    pub category: Category,
    pub sample_index: u32,
    pub switch_emitted: bool,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_reward: f64,
    pub switch_rate: f64,
    pub per_category: BTreeMap<Category, f64>,
    pub per_prompt: BTreeMap<String, f64>,
    pub samples: Vec<EvalSample>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

impl EvalReport {
    /// Aggregates per-sample scores in the order given.
    pub fn from_samples(samples: Vec<EvalSample>) -> Result<Self, TrainError> {
        if samples.is_empty() {
            return Err(TrainError::EmptyEvaluation);
        }
        let mut by_cat: BTreeMap<Category, Vec<f64>> = BTreeMap::new();
        let mut by_prompt: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in &samples {
            by_cat.entry(s.category).or_default().push(s.reward);
            by_prompt.entry(s.prompt_id.clone()).or_default().push(s.reward);
        }
        Ok(Self {
            mean_reward: mean(samples.iter().map(|s| s.reward)),
            switch_rate: mean(samples.iter().map(|s| f64::from(u8::from(s.switch_emitted)))),
            per_category: by_cat.into_iter().map(|(k, v)| (k, mean(v))).collect(),
            per_prompt: by_prompt.into_iter().map(|(k, v)| (k, mean(v))).collect(),
            samples,
        })
    }
}

/// Draws `samples_per_prompt` seeded samples per prompt and scores each
/// with the toy oracle. A sample without a scene scores 0.
pub fn evaluate(params: &ModelParams, prompts: &[Prompt], cfg: &EvalConfig) -> Result<EvalReport, TrainError> {
    if cfg.samples_per_prompt == 0 || prompts.is_empty() {
        return Err(TrainError::EmptyEvaluation);
    }
    let vocab = Vocabulary::toy();
    let mut samples = Vec::with_capacity(prompts.len() * cfg.samples_per_prompt);
    for (pi, prompt) in prompts.iter().enumerate() {
        let spec = toy::parse_toy_prompt(&prompt.text)
            .map_err(|e| TrainError::EvalPrompt(prompt.id.clone(), e.to_string()))?;
        let tokens = vocab.encode(&prompt.text).map_err(|e| TrainError::EvalPrompt(prompt.id.clone(), e.to_string()))?;
        for j in 0..cfg.samples_per_prompt {
            let s = sample_joint(params, &tokens, &cfg.sampler, &mut sample_rng(cfg.seed, pi, j));
            samples.push(EvalSample {
                prompt_id: prompt.id.clone(),
                category: prompt.category,
                sample_index: j as u32,
                switch_emitted: s.switch_emitted,
                reward: s.image.map_or(0.0, |img| toy::oracle(&spec, &img)),
            });
        }
    }
    EvalReport::from_samples(samples)
}

/// One row of an ablation table.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub name: String,
}

/// Mean eval reward per cell and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub cells: Vec<String>,
    pub seeds: Vec<u64>,
    /// `rewards[cell][seed]`
    pub rewards: Vec<Vec<f64>>,
}

impl AblationTable {
    pub fn mean(&self, cell: &str) -> Option<f64> {
        let i = self.cells.iter().position(|c| c == cell)?;
        Some(mean(self.rewards[i].iter().copied()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell");
        for s in &self.seeds {
            out.push_str(&format!(",seed_{s}"));
        }
        out.push_str(",mean\n");
        for (cell, row) in self.cells.iter().zip(&self.rewards) {
            out.push_str(cell);
            for r in row {
                out.push_str(&format!(",{r}"));
            }
            out.push_str(&format!(",{}\n", mean(row.iter().copied())));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_csv())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Trains one model per (cell, seed) from `base` and evaluates it on
/// `eval_prompts`. `data(cell, seed)` supplies the training examples.
///
/// Every cell of a seed column shares the training seed and the evaluation
/// seed, so cells differ only in their data and weights.
pub fn run_ablation<F>(
    base: &ModelParams,
    cells: &[AblationCell],
    seeds: &[u64],
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    eval_prompts: &[Prompt],
    mut data: F,
) -> Result<AblationTable, TrainError>
where
    F: FnMut(&str, u64) -> Result<Vec<WeightedExample>, TrainError>,
{
    let mut rewards = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut row = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let examples = data(&cell.name, seed)?;
            let packed = pack(&examples, train_cfg.token_budget)?;
            let cfg = TrainConfig { seed, ..train_cfg.clone() };
            let (trained, _) = train(base, &packed, &cfg)?;
            let ecfg = EvalConfig { seed: eval_cfg.seed.wrapping_add(seed), ..*eval_cfg };
            let report = evaluate(&trained, eval_prompts, &ecfg)?;
            log::info!("ablation {} seed {seed}: mean reward {:.4}", cell.name, report.mean_reward);
            row.push(report.mean_reward);
        }
        rewards.push(row);
    }
    Ok(AblationTable { cells: cells.iter().map(|c| c.name.clone()).collect(), seeds: seeds.to_vec(), rewards })
}
