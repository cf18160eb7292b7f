//! Exponentiated reward weights, modality-selective application and the
//! rejection-sampling alternative.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{GenerationSample, ManifestRecord, Prompt, RewardRecord};
use crate::reward::NormalizationSpec;
use crate::toy::{self, ToyError, Tokenized};

pub const DEFAULT_BETA: f64 = 5.0;
pub const DEFAULT_REJECTION_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum RwrError {
    #[error("no normalized {reward} reward for {prompt_id}#{sample_index}")]
    MissingReward { prompt_id: String, sample_index: u32, reward: String },
    #[error("unknown prompt {0}")]
    UnknownPrompt(String),
    #[error("sample {0}#{1} cannot be tokenized: {2}")]
    Tokenize(String, u32, ToyError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModalityMode {
    TextOnly,
    ImageOnly,
    Multimodal,
    #[serde(rename = "NoneSFT")]
    NoneSft,
}

impl ModalityMode {
    pub const ALL: [ModalityMode; 4] = [Self::Multimodal, Self::TextOnly, Self::ImageOnly, Self::NoneSft];

    pub fn label(self) -> &'static str {
        match self {
            Self::TextOnly => "text_rwr",
            Self::ImageOnly => "image_rwr",
            Self::Multimodal => "multimodal_rwr",
            Self::NoneSft => "sft",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WeightRenorm {
    #[default]
    Off,
    MeanOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RwrConfig {
    pub beta: f64,
    pub normalization: NormalizationSpec,
    pub modality_mode: ModalityMode,
    /// When set, samples are filtered by reward and trained with unit weights
    /// instead of being weighted.
    pub rejection: Option<Rejection>,
    pub weight_renorm: WeightRenorm,
    /// Name of the reward the weights are derived from.
    pub reward_name: String,
}

impl Default for RwrConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            normalization: NormalizationSpec::default(),
            modality_mode: ModalityMode::Multimodal,
            rejection: None,
            weight_renorm: WeightRenorm::Off,
            reward_name: "oracle".into(),
        }
    }
}

impl RwrConfig {
    pub fn validate(&self) -> Result<(), RwrError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(RwrError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if let Some(r) = self.rejection {
            if !(0.0..=1.0).contains(&r.threshold) {
                return Err(RwrError::Config(format!("rejection threshold {} outside [0, 1]", r.threshold)));
            }
        }
        Ok(())
    }
}

pub fn rwr_weight(normalized_reward: f64, beta: f64) -> f64 {
    (beta * normalized_reward).exp()
}

/// One line of `weights.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeight {
    pub prompt_id: String,
    pub sample_index: u32,
    pub w_text: f64,
    pub w_image: f64,
    pub config_hash: String,
}

impl ManifestRecord for SampleWeight {}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedExample {
    pub prompt_id: String,
    pub sample_index: u32,
    pub example: Tokenized,
    pub w_text: f64,
    pub w_image: f64,
}

fn reward_lookup<'a>(rewards: &'a [RewardRecord], name: &str) -> HashMap<(&'a str, u32), f64> {
    rewards
        .iter()
        .filter(|r| r.reward_name == name)
        .filter_map(|r| r.normalized.map(|n| ((r.prompt_id.as_str(), r.sample_index), n)))
        .collect()
}

fn reward_of(lookup: &HashMap<(&str, u32), f64>, s: &GenerationSample, name: &str) -> Result<f64, RwrError> {
    lookup.get(&s.key()).copied().ok_or_else(|| RwrError::MissingReward {
        prompt_id: s.prompt_id.clone(),
        sample_index: s.sample_index,
        reward: name.to_string(),
    })
}

/// Per-sample `(w_text, w_image)` under the configured modality mode.
/// Rejection configs yield unit weights for the retained samples only.
pub fn assign_weights(
    samples: &[GenerationSample],
    rewards: &[RewardRecord],
    cfg: &RwrConfig,
    config_hash: &str,
) -> Result<Vec<SampleWeight>, RwrError> {
    cfg.validate()?;
    let lookup = reward_lookup(rewards, &cfg.reward_name);
    let scored: Vec<(&GenerationSample, f64)> = samples
        .iter()
        .map(|s| reward_of(&lookup, s, &cfg.reward_name).map(|r| (s, r)))
        .collect::<Result<_, _>>()?;

    let unit = |s: &GenerationSample| SampleWeight {
        prompt_id: s.prompt_id.clone(),
        sample_index: s.sample_index,
        w_text: 1.0,
        w_image: 1.0,
        config_hash: config_hash.to_string(),
    };

    if let Some(rej) = cfg.rejection {
        let outcome = rejection_filter(&scored, rej.threshold);
        if let Some(w) = &outcome.warning {
            log::warn!("{w}");
        }
        return Ok(outcome.retained.into_iter().map(|(s, _)| unit(s)).collect());
    }

    let mut out: Vec<SampleWeight> = scored
        .iter()
        .map(|&(s, r)| {
            let w = rwr_weight(r, cfg.beta);
            let (w_text, w_image) = match cfg.modality_mode {
                ModalityMode::Multimodal => (w, w),
                ModalityMode::TextOnly => (w, 1.0),
                ModalityMode::ImageOnly => (1.0, w),
                ModalityMode::NoneSft => (1.0, 1.0),
            };
            SampleWeight { w_text, w_image, ..unit(s) }
        })
        .collect();

    if cfg.weight_renorm == WeightRenorm::MeanOne && !out.is_empty() {
        let (text_active, image_active) = match cfg.modality_mode {
            ModalityMode::Multimodal => (true, true),
            ModalityMode::TextOnly => (true, false),
            ModalityMode::ImageOnly => (false, true),
            ModalityMode::NoneSft => (false, false),
        };
        let n = out.len() as f64;
        if text_active {
            let mean = out.iter().map(|w| w.w_text).sum::<f64>() / n;
            out.iter_mut().for_each(|w| w.w_text /= mean);
        }
        if image_active {
            let mean = out.iter().map(|w| w.w_image).sum::<f64>() / n;
            out.iter_mut().for_each(|w| w.w_image /= mean);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionOutcome<T> {
    pub retained: Vec<T>,
    /// Set when nothing survives the threshold.
    pub warning: Option<String>,
}

/// Keeps items whose reward is strictly above `threshold`.
pub fn rejection_filter<T: Clone>(scored: &[(T, f64)], threshold: f64) -> RejectionOutcome<(T, f64)> {
    let retained: Vec<(T, f64)> = scored.iter().filter(|(_, r)| *r > threshold).cloned().collect();
    let warning = retained
        .is_empty()
        .then(|| format!("rejection threshold {threshold} retained none of {} samples", scored.len()));
    RejectionOutcome { retained, warning }
}

/// Joins weights with their samples and tokenizes them for the toy model.
pub fn build_examples(
    samples: &[GenerationSample],
    prompts: &[Prompt],
    weights: &[SampleWeight],
) -> Result<Vec<WeightedExample>, RwrError> {
    let prompts: HashMap<&str, &Prompt> = prompts.iter().map(|p| (p.id.as_str(), p)).collect();
    let samples: BTreeMap<(&str, u32), &GenerationSample> = samples.iter().map(|s| (s.key(), s)).collect();
    weights
        .iter()
        .map(|w| {
            let s = samples.get(&(w.prompt_id.as_str(), w.sample_index)).ok_or_else(|| {
                RwrError::MissingReward {
                    prompt_id: w.prompt_id.clone(),
                    sample_index: w.sample_index,
                    reward: "sample".into(),
                }
            })?;
            let p = prompts.get(w.prompt_id.as_str()).ok_or_else(|| RwrError::UnknownPrompt(w.prompt_id.clone()))?;
            let example = toy::tokenize(&p.text, &s.reasoning_text, s.toy_image())
                .map_err(|e| RwrError::Tokenize(s.prompt_id.clone(), s.sample_index, e))?;
            Ok(WeightedExample {
                prompt_id: w.prompt_id.clone(),
                sample_index: w.sample_index,
                example,
                w_text: w.w_text,
                w_image: w.w_image,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ImagePayload;
    use crate::toy::ToyImage;

    fn sample(idx: u32) -> GenerationSample {
        GenerationSample {
            prompt_id: "p".into(),
            sample_index: idx,
            reasoning_text: "c c c c".into(),
            switch_emitted: true,
            image: Some(ImagePayload::Toy { coords: ToyImage::new(&[0.0; 8]).unwrap() }),
            sampler_seed: 0,
        }
    }

    fn reward(idx: u32, normalized: f64) -> RewardRecord {
        RewardRecord {
            prompt_id: "p".into(),
            sample_index: idx,
            reward_name: "oracle".into(),
            scorer_version: "t".into(),
            raw: normalized,
            normalized: Some(normalized),
        }
    }

    fn weights(mode: ModalityMode, renorm: WeightRenorm, rs: &[f64]) -> Vec<(f64, f64)> {
        let samples: Vec<_> = (0..rs.len() as u32).map(sample).collect();
        let rewards: Vec<_> = rs.iter().enumerate().map(|(i, &r)| reward(i as u32, r)).collect();
        let cfg = RwrConfig { modality_mode: mode, weight_renorm: renorm, ..RwrConfig::default() };
        assign_weights(&samples, &rewards, &cfg, "h")
            .unwrap()
            .iter()
            .map(|w| (w.w_text, w.w_image))
            .collect()
    }

    #[test]
    fn weight_law() {
        assert_eq!(rwr_weight(0.0, 5.0), 1.0);
        assert!((rwr_weight(1.0, 5.0) - 148.413_159_102_576_6).abs() < 1e-9);
    }

    #[test]
    fn modality_modes() {
        let e5 = 5f64.exp();
        assert_eq!(weights(ModalityMode::Multimodal, WeightRenorm::Off, &[1.0]), [(e5, e5)]);
        assert_eq!(weights(ModalityMode::TextOnly, WeightRenorm::Off, &[1.0]), [(e5, 1.0)]);
        assert_eq!(weights(ModalityMode::ImageOnly, WeightRenorm::Off, &[1.0]), [(1.0, e5)]);
        assert_eq!(weights(ModalityMode::NoneSft, WeightRenorm::Off, &[0.3, 1.0]), [(1.0, 1.0); 2]);
    }

    #[test]
    fn mean_one_divides_by_direct_mean() {
        let got = weights(ModalityMode::Multimodal, WeightRenorm::MeanOne, &[0.0, 0.5, 1.0]);
        let raw = [1.0, 2.5f64.exp(), 5f64.exp()];
        let mean = (raw[0] + raw[1] + raw[2]) / 3.0;
        for (g, r) in got.iter().zip(raw) {
            assert!((g.0 - r / mean).abs() < 1e-12 * (r / mean));
            assert_eq!(g.0, g.1);
        }
        let text_only = weights(ModalityMode::TextOnly, WeightRenorm::MeanOne, &[0.0, 1.0]);
        assert!(text_only.iter().all(|w| w.1 == 1.0));
    }

    #[test]
    fn rejection() {
        let scored: Vec<(u32, f64)> = vec![(0, 0.2), (1, 0.8), (2, 0.95)];
        let out = rejection_filter(&scored, 0.5);
        assert_eq!(out.retained.len(), 2);
        assert!(out.warning.is_none());
        assert!(rejection_filter(&scored, 1.0).warning.is_some());
        assert_eq!(rejection_filter(&scored, 0.0).retained.len(), 3);

        let samples: Vec<_> = (0..3).map(sample).collect();
        let rewards: Vec<_> = scored.iter().map(|&(i, r)| reward(i, r)).collect();
        let cfg = RwrConfig { rejection: Some(Rejection { threshold: 0.5 }), ..RwrConfig::default() };
        let w = assign_weights(&samples, &rewards, &cfg, "h").unwrap();
        assert_eq!(w.iter().map(|w| (w.sample_index, w.w_text, w.w_image)).collect::<Vec<_>>(), [(1, 1.0, 1.0), (2, 1.0, 1.0)]);
    }

    #[test]
    fn missing_reward_is_an_error() {
        let cfg = RwrConfig::default();
        let err = assign_weights(&[sample(0)], &[], &cfg, "h").unwrap_err();
        assert!(matches!(err, RwrError::MissingReward { .. }));
    }
}
