use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::forward::{logits, rnn_step, velocity_forward};
use super::ModelParams;
use crate::toy::{TokenId, ToyImage, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// 0 means greedy decoding.
    pub temperature: f64,
    /// Generated text tokens allowed before giving up on the switch,
    /// VISION_START included.
    pub max_text_len: usize,
    pub euler_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { temperature: 1.0, max_text_len: 8, euler_steps: 16 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    /// Generated tokens before VISION_START.
    pub reasoning: Vec<TokenId>,
    pub switch_emitted: bool,
    pub image: Option<ToyImage>,
    /// Initial noise of the image ODE.
    pub noise: Option<Vec<f64>>,
}

fn pick<R: Rng + ?Sized>(z: &[f64], temperature: f64, rng: &mut R) -> TokenId {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = i;
            }
        }
        return best as TokenId;
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let probs: Vec<f64> = z.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, p) in probs.iter().enumerate() {
        u -= p;
        if u < 0.0 {
            return i as TokenId;
        }
    }
    (probs.len() - 1) as TokenId
}

/// Velocity field of the image head at `(x, t)` given conditioning `h`.
pub fn velocity(params: &ModelParams, x: &[f64], t: f64, h: &[f64]) -> Vec<f64> {
    velocity_forward(params.as_slice(), params.layout(), x, t, h).v
}

/// Samples text until VISION_START (or END, or the length limit), then
/// integrates the image ODE from noise with `euler_steps` Euler steps.
pub fn sample_joint<R: Rng + ?Sized>(
    params: &ModelParams,
    prompt: &[TokenId],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> JointSample {
    let vocab = Vocabulary::toy();
    let p = params.as_slice();
    let l = params.layout();
    let hd = params.config().hidden;
    let mut h1 = vec![0.0; hd];
    let mut h2 = vec![0.0; hd];
    let mut n1 = vec![0.0; hd];
    let mut n2 = vec![0.0; hd];
    let mut first = true;
    let mut feed = |token: TokenId, h1: &mut Vec<f64>, h2: &mut Vec<f64>| {
        let (p1, p2) = if first { (None, None) } else { (Some(h1.as_slice()), Some(h2.as_slice())) };
        rnn_step(p, l, token, p1, p2, &mut n1, &mut n2);
        first = false;
        std::mem::swap(h1, &mut n1);
        std::mem::swap(h2, &mut n2);
    };
    for &t in prompt {
        feed(t, &mut h1, &mut h2);
    }

    let mut reasoning = Vec::new();
    let mut switched = false;
    for _ in 0..cfg.max_text_len {
        let next = pick(&logits(p, l, &h2), cfg.temperature, rng);
        if next == vocab.end() {
            break;
        }
        feed(next, &mut h1, &mut h2);
        if next == vocab.vision_start() {
            switched = true;
            break;
        }
        reasoning.push(next);
    }
    if !switched {
        return JointSample { reasoning, switch_emitted: false, image: None, noise: None };
    }

    let dim = params.config().image_dim;
    let noise: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let mut x = noise.clone();
    let steps = cfg.euler_steps.max(1);
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let v = velocity(params, &x, i as f64 * dt, &h2);
        x.iter_mut().zip(&v).for_each(|(x, v)| *x += dt * v);
    }
    let image = ToyImage::new(&x).ok();
    JointSample { reasoning, switch_emitted: true, image, noise: Some(noise) }
}
