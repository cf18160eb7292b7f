//! Reward functions and global reward normalization.

use serde::{Deserialize, Serialize};

use crate::corpus::{GenerationSample, Prompt, RewardRecord};
use crate::toy::{self, ToyError};

/// Encoder settings for the JPEG incompressibility reward.
pub const JPEG_QUALITY: u8 = 75;
pub const JPEG_SUBSAMPLING: &str = "4:2:0";
pub const JPEG_SCORER_VERSION: &str = "jpeg-q75-420/1";
pub const ORACLE_SCORER_VERSION: &str = "toy-oracle/1";

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("undecodable image payload: {0}")]
    Decode(String),
    #[error("jpeg encoding failed: {0}")]
    Encode(String),
    #[error("prompt {0} is not a toy prompt: {1}")]
    ToyPrompt(String, ToyError),
    #[error("sample {0}#{1} carries no toy scene")]
    NoToyImage(String, u32),
    #[error("cannot normalize an empty reward set")]
    Empty,
    #[error("reward set mixes reward names {0:?} and {1:?}")]
    MixedNames(String, String),
    #[error("non-finite raw reward for {0}#{1}")]
    NonFinite(String, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardKind {
    Local,
    Remote,
    Oracle,
}

/// Descriptor of a reward function taking part in a labeling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardFunction {
    pub name: String,
    pub kind: RewardKind,
    pub version: String,
    pub min_hint: Option<f64>,
    pub max_hint: Option<f64>,
}

impl RewardFunction {
    pub fn jpeg() -> Self {
        Self {
            name: "jpeg".into(),
            kind: RewardKind::Local,
            version: JPEG_SCORER_VERSION.into(),
            min_hint: Some(0.0),
            max_hint: None,
        }
    }

    pub fn oracle() -> Self {
        Self {
            name: "oracle".into(),
            kind: RewardKind::Oracle,
            version: ORACLE_SCORER_VERSION.into(),
            min_hint: Some(0.0),
            max_hint: Some(1.0),
        }
    }
}

/// JPEG incompressibility: byte length of the image re-encoded at quality 75
/// with 4:2:0 chroma subsampling.
pub fn jpeg_score(image_bytes: &[u8]) -> Result<f64, RewardError> {
    let img = image::load_from_memory(image_bytes).map_err(|e| RewardError::Decode(e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let (w16, h16) = match (u16::try_from(w), u16::try_from(h)) {
        (Ok(w), Ok(h)) => (w, h),
        _ => return Err(RewardError::Encode(format!("{w}x{h} exceeds the JPEG size limit"))),
    };
    let mut out = Vec::new();
    let mut enc = jpeg_encoder::Encoder::new(&mut out, JPEG_QUALITY);
    enc.set_sampling_factor(jpeg_encoder::SamplingFactor::F_2_2);
    enc.encode(rgb.as_raw(), w16, h16, jpeg_encoder::ColorType::Rgb)
        .map_err(|e| RewardError::Encode(e.to_string()))?;
    Ok(out.len() as f64)
}

/// Toy prompt-alignment reward. A sample that never produced a scene scores 0.
pub fn oracle_score(sample: &GenerationSample, prompt: &Prompt) -> Result<f64, RewardError> {
    let spec = toy::parse_toy_prompt(&prompt.text)
        .map_err(|e| RewardError::ToyPrompt(prompt.id.clone(), e))?;
    match (&sample.image, sample.toy_image()) {
        (None, _) => Ok(0.0),
        (Some(_), Some(img)) => Ok(toy::oracle(&spec, img)),
        (Some(_), None) => Err(RewardError::NoToyImage(sample.prompt_id.clone(), sample.sample_index)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NormalizationMode {
    #[default]
    MinMaxGlobal,
    ZScoreClamped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NormalizationScope {
    #[default]
    AllSamples,
    PerPrompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizationSpec {
    pub mode: NormalizationMode,
    pub scope: NormalizationScope,
}

/// Affine map of a finite slice to `[0, 1]` under `mode`. All-equal input
/// maps to 0.5 in both modes.
fn normalize_group(raws: &[f64], mode: NormalizationMode) -> Vec<f64> {
    if raws.iter().all(|&r| r == raws[0]) {
        return vec![0.5; raws.len()];
    }
    match mode {
        NormalizationMode::MinMaxGlobal => {
            let lo = raws.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = raws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            raws.iter().map(|&r| ((r - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
        }
        NormalizationMode::ZScoreClamped => {
            let n = raws.len() as f64;
            let mean = raws.iter().sum::<f64>() / n;
            let var = raws.iter().map(|&r| (r - mean) * (r - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            raws.iter().map(|&r| ((r - mean) / (4.0 * sd) + 0.5).clamp(0.0, 1.0)).collect()
        }
    }
}

/// Sets `normalized` on every record of one reward function.
///
/// Records are reduced in `(prompt_id, sample_index)` order, so the result is
/// bit-identical under any permutation of the input.
pub fn normalize_rewards(
    records: &[RewardRecord],
    spec: NormalizationSpec,
) -> Result<Vec<RewardRecord>, RewardError> {
    let first = records.first().ok_or(RewardError::Empty)?;
    for r in records {
        if r.reward_name != first.reward_name {
            return Err(RewardError::MixedNames(first.reward_name.clone(), r.reward_name.clone()));
        }
        if !r.raw.is_finite() {
            return Err(RewardError::NonFinite(r.prompt_id.clone(), r.sample_index));
        }
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].key().cmp(&records[b].key()));

    let mut out = records.to_vec();
    let groups: Vec<Vec<usize>> = match spec.scope {
        NormalizationScope::AllSamples => vec![order],
        NormalizationScope::PerPrompt => {
            let mut groups: Vec<Vec<usize>> = Vec::new();
            for i in order {
                match groups.last_mut() {
                    Some(g) if records[g[0]].prompt_id == records[i].prompt_id => g.push(i),
                    _ => groups.push(vec![i]),
                }
            }
            groups
        }
    };
    for g in groups {
        let raws: Vec<f64> = g.iter().map(|&i| records[i].raw).collect();
        for (&i, v) in g.iter().zip(normalize_group(&raws, spec.mode)) {
            out[i].normalized = Some(v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Category, ImagePayload, Origin};
    use crate::toy::ToyImage;
    use proptest::prelude::*;

    fn rec(id: &str, idx: u32, raw: f64) -> RewardRecord {
        RewardRecord {
            prompt_id: id.into(),
            sample_index: idx,
            reward_name: "r".into(),
            scorer_version: "1".into(),
            raw,
            normalized: None,
        }
    }

    fn normalized(recs: &[RewardRecord]) -> Vec<f64> {
        recs.iter().map(|r| r.normalized.unwrap()).collect()
    }

    #[test]
    fn min_max_examples() {
        let recs = [rec("a", 0, 0.0), rec("a", 1, 5.0), rec("a", 2, 10.0)];
        assert_eq!(normalized(&normalize_rewards(&recs, Default::default()).unwrap()), [0.0, 0.5, 1.0]);
        let flat = [rec("a", 0, 3.0), rec("b", 0, 3.0), rec("c", 0, 3.0)];
        assert_eq!(normalized(&normalize_rewards(&flat, Default::default()).unwrap()), [0.5; 3]);
        assert!(matches!(normalize_rewards(&[], Default::default()), Err(RewardError::Empty)));
    }

    #[test]
    fn flat_input_is_half_in_both_modes() {
        // the mean of seven copies of 0.1 is not 0.1 in floating point
        let recs: Vec<RewardRecord> = (0..7).map(|i| rec("a", i, 0.1)).collect();
        for mode in [NormalizationMode::MinMaxGlobal, NormalizationMode::ZScoreClamped] {
            let spec = NormalizationSpec { mode, ..Default::default() };
            assert_eq!(normalized(&normalize_rewards(&recs, spec).unwrap()), [0.5; 7]);
        }
    }

    #[test]
    fn zscore_matches_single_pass_oracle() {
        // Welford single-pass mean/variance, independent of the two-pass path above.
        let raws = [1.0, 2.0, 4.0];
        let (mut n, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
        for &x in &raws {
            n += 1.0;
            let d = x - mean;
            mean += d / n;
            m2 += d * (x - mean);
        }
        let sd = (m2 / n).sqrt();
        let expected: Vec<f64> = raws.iter().map(|&x| ((x - mean) / (4.0 * sd) + 0.5).clamp(0.0, 1.0)).collect();
        let recs: Vec<RewardRecord> = raws.iter().enumerate().map(|(i, &r)| rec("a", i as u32, r)).collect();
        let spec = NormalizationSpec { mode: NormalizationMode::ZScoreClamped, scope: NormalizationScope::AllSamples };
        let got = normalized(&normalize_rewards(&recs, spec).unwrap());
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn per_prompt_scope() {
        let recs = [rec("a", 0, 0.0), rec("b", 0, 100.0), rec("a", 1, 2.0), rec("b", 1, 300.0)];
        let spec = NormalizationSpec { scope: NormalizationScope::PerPrompt, ..Default::default() };
        assert_eq!(normalized(&normalize_rewards(&recs, spec).unwrap()), [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn oracle_score_on_samples() {
        let prompt = Prompt { id: "p".into(), text: "CARD k=2".into(), category: Category::Cardinality, origin: Origin::Seed };
        let img = ToyImage::from_points([(1.0, 0.0), (1.0, 0.0), (-1.0, 0.0), (-1.0, 0.0)]).unwrap();
        let mut s = GenerationSample {
            prompt_id: "p".into(),
            sample_index: 0,
            reasoning_text: String::new(),
            switch_emitted: true,
            image: Some(ImagePayload::Toy { coords: img }),
            sampler_seed: 0,
        };
        assert_eq!(oracle_score(&s, &prompt).unwrap(), 1.0);
        assert_eq!(oracle_score(&s, &prompt).unwrap(), oracle_score(&s.clone(), &prompt.clone()).unwrap());
        let empty = ToyImage::from_points([(-1.0, 0.0); 4]).unwrap();
        s.image = Some(ImagePayload::Toy { coords: empty });
        assert_eq!(oracle_score(&s, &prompt).unwrap(), 0.5);
        let bad = Prompt { text: "a cat".into(), ..prompt };
        assert!(matches!(oracle_score(&s, &bad), Err(RewardError::ToyPrompt(..))));
    }

    proptest! {
        #[test]
        fn permutation_invariant(raws in prop::collection::vec(-50.0f64..50.0, 1..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let recs: Vec<RewardRecord> = raws.iter().enumerate()
                .map(|(i, &r)| rec(&format!("p{}", i % 7), i as u32, r)).collect();
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            for mode in [NormalizationMode::MinMaxGlobal, NormalizationMode::ZScoreClamped] {
                let spec = NormalizationSpec { mode, scope: NormalizationScope::AllSamples };
                let a = normalize_rewards(&recs, spec).unwrap();
                let b = normalize_rewards(&shuffled, spec).unwrap();
                for r in &a {
                    let twin = b.iter().find(|x| x.key() == r.key()).unwrap();
                    prop_assert_eq!(r.normalized.unwrap().to_bits(), twin.normalized.unwrap().to_bits());
                    prop_assert!((0.0..=1.0).contains(&r.normalized.unwrap()));
                }
                if mode == NormalizationMode::MinMaxGlobal && raws.iter().any(|&x| x != raws[0]) {
                    prop_assert!(a.iter().any(|r| r.normalized == Some(0.0)));
                    prop_assert!(a.iter().any(|r| r.normalized == Some(1.0)));
                }
            }
        }
    }
}
