//! Packed batching, Adam with linear warmup and norm clipping, the training
//! loop, evaluation and ablation tables.

mod eval;
mod pack;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use eval::{
    evaluate, run_ablation, sample_rng, AblationCell, AblationTable, EvalConfig, EvalReport, EvalSample,
};
pub use pack::{pack, sequence_len, PackedDataset, PackedRecord, PACK_MAGIC, PACK_VERSION};

use crate::model::{accumulate, FlowDraw, LossParts, LossScales, ModelError, ModelParams};
use crate::rwr::WeightedExample;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("sequence {prompt_id}#{sample_index} has {len} positions, over the budget of {budget}")]
    Oversized { prompt_id: String, sample_index: u32, len: usize, budget: usize },
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("malformed packed dataset: {0}")]
    Format(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} ({at})")]
    NonFinite { step: usize, at: String },
    #[error("empty evaluation")]
    EmptyEvaluation,
    #[error("evaluation prompt {0}: {1}")]
    EvalPrompt(String, String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub token_budget: usize,
    pub seed: u64,
    pub lr_decay: LrDecay,
    /// Reuse one flow draw per record for the whole run instead of drawing
    /// afresh each step. With it the image objective has an exact zero.
    pub fixed_flow_draw: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            total_steps: 5_500,
            warmup_steps: 1_000,
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-15,
            weight_decay: 0.0,
            grad_clip: 1.0,
            token_budget: 50_000,
            seed: 0,
            lr_decay: LrDecay::Constant,
            fixed_flow_draw: false,
        }
    }

    pub fn toy() -> Self {
        Self { total_steps: 2_000, warmup_steps: 200, token_budget: 2_048, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps exceeds total_steps");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) || self.weight_decay < 0.0 || !(self.grad_clip > 0.0) {
            return bad("epsilon and grad_clip must be positive, weight_decay non-negative");
        }
        if self.token_budget == 0 {
            return bad("token_budget must be positive");
        }
        Ok(())
    }

    /// Learning rate at 1-indexed `step`: linear warmup, then `lr_decay`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            return self.learning_rate * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let frac = (step - self.warmup_steps) as f64 / span;
        match self.lr_decay {
            LrDecay::Constant => self.learning_rate,
            LrDecay::Cosine => self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
        }
    }
}

/// Learning-rate shape after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to zero at `total_steps`.
    Cosine,
}

/// Scales `grad` so its L2 norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
}

impl Adam {
    pub fn new(len: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.epsilon) + self.weight_decay * params[i]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub group: usize,
    pub loss: f64,
    pub text_loss: f64,
    pub image_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

/// Normalizers for one update group: text targets for the CE term, image
/// coordinates for the velocity term.
fn group_scales(examples: &[WeightedExample], group: &[u32], image_dim: usize) -> LossScales {
    let mut text = 0usize;
    let mut image = 0usize;
    for &i in group {
        let ex = &examples[i as usize].example;
        text += ex.stream.text_targets();
        image += usize::from(ex.image.is_some()) * image_dim;
    }
    let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
    LossScales { text: inv(text), image: inv(image) }
}

/// Runs `cfg.total_steps` updates, one update group per step, visiting
/// groups in a fresh seeded order each epoch.
pub fn train(
    params: &ModelParams,
    data: &PackedDataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<StepMetrics>), TrainError> {
    cfg.validate()?;
    if data.groups.is_empty() {
        return Err(TrainError::Data("packed dataset has no update groups".into()));
    }
    if !params.is_finite() {
        return Err(TrainError::Data("initial parameters are not finite".into()));
    }
    let longest = data.records.iter().map(|r| r.length as usize).max().unwrap_or(0);
    if longest > cfg.token_budget {
        return Err(TrainError::Config(format!(
            "token_budget {} is below the longest sequence ({longest})",
            cfg.token_budget
        )));
    }
    let examples = data.unpack();
    let dim = params.config().image_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fixed: Option<Vec<FlowDraw>> =
        cfg.fixed_flow_draw.then(|| examples.iter().map(|_| FlowDraw::sample(dim, &mut rng)).collect());

    let mut params = params.clone();
    let mut adam = Adam::new(params.len(), cfg);
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..data.groups.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.total_steps);
    for step in 1..=cfg.total_steps {
        let k = (step - 1) % order.len();
        if k == 0 {
            order.shuffle(&mut rng);
        }
        let g = order[k];
        let group = &data.groups[g];
        let scales = group_scales(&examples, group, dim);
        grad.iter_mut().for_each(|v| *v = 0.0);
        let mut parts = LossParts::default();
        for &i in group {
            let i = i as usize;
            let fresh;
            let draw = match &fixed {
                Some(d) => &d[i],
                None => {
                    fresh = FlowDraw::sample(dim, &mut rng);
                    &fresh
                }
            };
            let p = accumulate(&params, &examples[i], draw, scales, Some(&mut grad), None).map_err(|e| match e {
                ModelError::NonFinite { prompt_id, sample_index } => {
                    TrainError::NonFinite { step, at: format!("{prompt_id}#{sample_index}") }
                }
                other => other.into(),
            })?;
            parts.text += p.text;
            parts.image += p.image;
        }
        let loss = parts.total();
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite { step, at: format!("update group {g}") });
        }
        let grad_norm = clip_grad_norm(&mut grad, cfg.grad_clip);
        let lr = cfg.lr_at(step);
        adam.step(params.as_mut_slice(), &grad, lr);
        metrics.push(StepMetrics { step, group: g, loss, text_loss: parts.text, image_loss: parts.image, grad_norm, lr });
    }
    Ok((params, metrics))
}

/// Total loss of the whole dataset under the per-group normalization, with
/// each record's draw taken from `seed` the way a fixed-draw run takes it.
pub fn dataset_loss(params: &ModelParams, data: &PackedDataset, seed: u64) -> Result<f64, TrainError> {
    let examples = data.unpack();
    let dim = params.config().image_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<FlowDraw> = examples.iter().map(|_| FlowDraw::sample(dim, &mut rng)).collect();
    let mut total = 0.0;
    for group in &data.groups {
        let scales = group_scales(&examples, group, dim);
        for &i in group {
            total += accumulate(params, &examples[i as usize], &draws[i as usize], scales, None, None)?.total();
        }
    }
    Ok(total)
}

pub fn write_metrics_csv(metrics: &[StepMetrics], path: &Path) -> Result<(), TrainError> {
    let csv_err = |source| TrainError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in metrics {
        w.serialize(m).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| TrainError::Io(e.into_error()))?;
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
