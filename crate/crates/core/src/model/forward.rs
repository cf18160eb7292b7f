use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Layout, ModelError, ModelParams};
use crate::rwr::WeightedExample;
use crate::toy::{TokenId, Vocabulary};

/// One flow-matching draw: time `t` and the noise endpoint of the path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDraw {
    pub t: f64,
    pub noise: Vec<f64>,
}

impl FlowDraw {
    pub fn sample<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let t = rng.random::<f64>();
        let noise = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        Self { t, noise }
    }
}

/// Weighted loss terms; `text + image` is what gets differentiated.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub text: f64,
    pub image: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.text + self.image
    }
}

/// Multipliers on the summed CE and summed squared velocity error. A single
/// example uses its own counts; the trainer uses counts of the whole group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossScales {
    pub text: f64,
    pub image: f64,
}

impl LossScales {
    pub fn per_example(ex: &WeightedExample, image_dim: usize) -> Self {
        let targets = ex.example.stream.text_targets();
        Self {
            text: if targets == 0 { 0.0 } else { 1.0 / targets as f64 },
            image: 1.0 / image_dim as f64,
        }
    }
}

/// Intermediates logged by a forward pass, enough to recompute the loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    pub logits: Vec<Vec<f64>>,
    pub targets: Vec<TokenId>,
    pub target_weights: Vec<f64>,
    pub velocity: Option<Vec<f64>>,
    pub target_velocity: Option<Vec<f64>>,
}

/// `out[r] += Σ_c w[r, c] · x[c]`
fn matvec_add(out: &mut [f64], w: &[f64], x: &[f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out[c] += Σ_r w[r, c] · y[r]`
fn matvec_t_add(out: &mut [f64], w: &[f64], y: &[f64]) {
    let cols = out.len();
    for (&yr, row) in y.iter().zip(w.chunks_exact(cols)) {
        if yr != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yr;
            }
        }
    }
}

/// `g[r, c] += y[r] · x[c]`
fn outer_add(g: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    for (&yr, row) in y.iter().zip(g.chunks_exact_mut(cols)) {
        if yr != 0.0 {
            for (o, b) in row.iter_mut().zip(x) {
                *o += yr * b;
            }
        }
    }
}

fn add_into(out: &mut [f64], x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += v;
    }
}

/// One recurrent step of both layers, writing the new hidden states.
pub(super) fn rnn_step(
    p: &[f64],
    l: &Layout,
    token: TokenId,
    h1_prev: Option<&[f64]>,
    h2_prev: Option<&[f64]>,
    h1: &mut [f64],
    h2: &mut [f64],
) {
    let h = h1.len();
    let tok = token as usize;
    h1.copy_from_slice(&p[l.l1_b.range()]);
    matvec_add(h1, &p[l.l1_wx.range()], &p[l.emb.offset + tok * h..l.emb.offset + (tok + 1) * h]);
    if let Some(prev) = h1_prev {
        matvec_add(h1, &p[l.l1_wh.range()], prev);
    }
    h1.iter_mut().for_each(|v| *v = v.tanh());
    h2.copy_from_slice(&p[l.l2_b.range()]);
    matvec_add(h2, &p[l.l2_wx.range()], h1);
    if let Some(prev) = h2_prev {
        matvec_add(h2, &p[l.l2_wh.range()], prev);
    }
    h2.iter_mut().for_each(|v| *v = v.tanh());
}

pub(super) fn logits(p: &[f64], l: &Layout, h2: &[f64]) -> Vec<f64> {
    let mut z = p[l.out_b.range()].to_vec();
    matvec_add(&mut z, &p[l.out_w.range()], h2);
    z
}

pub(super) struct MlpActivations {
    pub input: Vec<f64>,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub v: Vec<f64>,
}

pub(super) fn velocity_forward(p: &[f64], l: &Layout, x: &[f64], t: f64, h: &[f64]) -> MlpActivations {
    let mut input = Vec::with_capacity(x.len() + 1 + h.len());
    input.extend_from_slice(x);
    input.push(t);
    input.extend_from_slice(h);
    let mut g1 = p[l.m1_b.range()].to_vec();
    matvec_add(&mut g1, &p[l.m1_w.range()], &input);
    g1.iter_mut().for_each(|v| *v = v.tanh());
    let mut g2 = p[l.m2_b.range()].to_vec();
    matvec_add(&mut g2, &p[l.m2_w.range()], &g1);
    g2.iter_mut().for_each(|v| *v = v.tanh());
    let mut v = p[l.m3_b.range()].to_vec();
    matvec_add(&mut v, &p[l.m3_w.range()], &g2);
    MlpActivations { input, g1, g2, v }
}

fn malformed(ex: &WeightedExample, msg: &str) -> ModelError {
    ModelError::Malformed { prompt_id: ex.prompt_id.clone(), sample_index: ex.sample_index, msg: msg.into() }
}

/// Weighted loss of one example with gradients accumulated into `grad`.
pub(crate) fn accumulate(
    params: &ModelParams,
    ex: &WeightedExample,
    draw: &FlowDraw,
    scales: LossScales,
    mut grad: Option<&mut [f64]>,
    mut trace: Option<&mut ForwardTrace>,
) -> Result<LossParts, ModelError> {
    let cfg = params.config();
    let l = params.layout();
    let p = params.as_slice();
    let (hd, dim) = (cfg.hidden, cfg.image_dim);
    let stream = &ex.example.stream;
    let tokens = &stream.tokens;
    let n = tokens.len();
    let vs = Vocabulary::toy().vision_start();

    if !stream.is_valid() {
        return Err(malformed(ex, "invalid token stream"));
    }
    if stream.has_switch() != ex.example.image.is_some() {
        return Err(malformed(ex, "image target present iff VISION_START present"));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(malformed(ex, &format!("token {bad} outside vocabulary")));
    }
    if draw.noise.len() != dim {
        return Err(malformed(ex, "flow draw dimension mismatch"));
    }

    let mut h1 = vec![0.0; n * hd];
    let mut h2 = vec![0.0; n * hd];
    for t in 0..n {
        let (h1_done, h1_rest) = h1.split_at_mut(t * hd);
        let (h2_done, h2_rest) = h2.split_at_mut(t * hd);
        let prev1 = (t > 0).then(|| &h1_done[(t - 1) * hd..]);
        let prev2 = (t > 0).then(|| &h2_done[(t - 1) * hd..]);
        rnn_step(p, l, tokens[t], prev1, prev2, &mut h1_rest[..hd], &mut h2_rest[..hd]);
    }

    let want_grad = grad.is_some();
    let mut dh2 = if want_grad { vec![0.0; n * hd] } else { Vec::new() };
    let mut parts = LossParts::default();

    // Text head: position t predicts token t + 1.
    for t in stream.prompt_len.saturating_sub(1)..n.saturating_sub(1) {
        let target = tokens[t + 1];
        let w = if target == vs && !cfg.switch_uses_text_weight { 1.0 } else { ex.w_text };
        let h = &h2[t * hd..(t + 1) * hd];
        let z = logits(p, l, h);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let ce = lse - z[target as usize];
        parts.text += scales.text * w * ce;
        if let Some(g) = grad.as_deref_mut() {
            let s = scales.text * w;
            if s != 0.0 {
                let mut dz: Vec<f64> = z.iter().map(|v| s * (v - lse).exp()).collect();
                dz[target as usize] -= s;
                outer_add(&mut g[l.out_w.range()], &dz, h);
                add_into(&mut g[l.out_b.range()], &dz);
                matvec_t_add(&mut dh2[t * hd..(t + 1) * hd], &p[l.out_w.range()], &dz);
            }
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.logits.push(z);
            tr.targets.push(target);
            tr.target_weights.push(w);
        }
    }

    // Image head, conditioned on the hidden state after VISION_START.
    if let Some(image) = &ex.example.image {
        let data = image.to_f64();
        let h = &h2[(n - 1) * hd..n * hd];
        let x_t: Vec<f64> = draw.noise.iter().zip(&data).map(|(z, x)| (1.0 - draw.t) * z + draw.t * x).collect();
        let u: Vec<f64> = draw.noise.iter().zip(&data).map(|(z, x)| x - z).collect();
        let act = velocity_forward(p, l, &x_t, draw.t, h);
        let sq: f64 = act.v.iter().zip(&u).map(|(v, u)| (v - u) * (v - u)).sum();
        parts.image += scales.image * ex.w_image * sq;
        if let Some(g) = grad.as_deref_mut() {
            let s = scales.image * ex.w_image;
            if s != 0.0 {
                let dv: Vec<f64> = act.v.iter().zip(&u).map(|(v, u)| 2.0 * s * (v - u)).collect();
                outer_add(&mut g[l.m3_w.range()], &dv, &act.g2);
                add_into(&mut g[l.m3_b.range()], &dv);
                let mut dz2 = vec![0.0; act.g2.len()];
                matvec_t_add(&mut dz2, &p[l.m3_w.range()], &dv);
                dz2.iter_mut().zip(&act.g2).for_each(|(d, g)| *d *= 1.0 - g * g);
                outer_add(&mut g[l.m2_w.range()], &dz2, &act.g1);
                add_into(&mut g[l.m2_b.range()], &dz2);
                let mut dz1 = vec![0.0; act.g1.len()];
                matvec_t_add(&mut dz1, &p[l.m2_w.range()], &dz2);
                dz1.iter_mut().zip(&act.g1).for_each(|(d, g)| *d *= 1.0 - g * g);
                outer_add(&mut g[l.m1_w.range()], &dz1, &act.input);
                add_into(&mut g[l.m1_b.range()], &dz1);
                let mut dinput = vec![0.0; act.input.len()];
                matvec_t_add(&mut dinput, &p[l.m1_w.range()], &dz1);
                add_into(&mut dh2[(n - 1) * hd..], &dinput[dim + 1..]);
            }
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.velocity = Some(act.v);
            tr.target_velocity = Some(u);
        }
    }

    if !parts.total().is_finite() {
        return Err(ModelError::NonFinite { prompt_id: ex.prompt_id.clone(), sample_index: ex.sample_index });
    }

    // Backpropagation through time.
    if let Some(g) = grad {
        let mut carry1 = vec![0.0; hd];
        let mut carry2 = vec![0.0; hd];
        let mut da1 = vec![0.0; hd];
        let mut da2 = vec![0.0; hd];
        for t in (0..n).rev() {
            let h1t = &h1[t * hd..(t + 1) * hd];
            let h2t = &h2[t * hd..(t + 1) * hd];
            for i in 0..hd {
                da2[i] = (dh2[t * hd + i] + carry2[i]) * (1.0 - h2t[i] * h2t[i]);
            }
            outer_add(&mut g[l.l2_wx.range()], &da2, h1t);
            add_into(&mut g[l.l2_b.range()], &da2);
            carry2.iter_mut().for_each(|v| *v = 0.0);
            if t > 0 {
                outer_add(&mut g[l.l2_wh.range()], &da2, &h2[(t - 1) * hd..t * hd]);
                matvec_t_add(&mut carry2, &p[l.l2_wh.range()], &da2);
            }
            let mut dh1 = carry1.clone();
            matvec_t_add(&mut dh1, &p[l.l2_wx.range()], &da2);
            for i in 0..hd {
                da1[i] = dh1[i] * (1.0 - h1t[i] * h1t[i]);
            }
            let tok = tokens[t] as usize;
            let emb = &p[l.emb.offset + tok * hd..l.emb.offset + (tok + 1) * hd];
            outer_add(&mut g[l.l1_wx.range()], &da1, emb);
            add_into(&mut g[l.l1_b.range()], &da1);
            carry1.iter_mut().for_each(|v| *v = 0.0);
            if t > 0 {
                outer_add(&mut g[l.l1_wh.range()], &da1, &h1[(t - 1) * hd..t * hd]);
                matvec_t_add(&mut carry1, &p[l.l1_wh.range()], &da1);
            }
            let ge = &mut g[l.emb.offset + tok * hd..l.emb.offset + (tok + 1) * hd];
            matvec_t_add(ge, &p[l.l1_wx.range()], &da1);
        }
    }
    Ok(parts)
}

/// `w_text · mean CE + w_image · ‖v − u‖² / D` and its gradient.
pub fn forward_loss(
    params: &ModelParams,
    ex: &WeightedExample,
    draw: &FlowDraw,
) -> Result<(f64, Vec<f64>), ModelError> {
    let mut grad = vec![0.0; params.len()];
    let scales = LossScales::per_example(ex, params.config().image_dim);
    let parts = accumulate(params, ex, draw, scales, Some(&mut grad), None)?;
    Ok((parts.total(), grad))
}

/// Loss terms together with the logits and velocities that produced them.
pub fn forward_trace(
    params: &ModelParams,
    ex: &WeightedExample,
    draw: &FlowDraw,
) -> Result<(LossParts, ForwardTrace), ModelError> {
    let mut trace = ForwardTrace::default();
    let scales = LossScales::per_example(ex, params.config().image_dim);
    let parts = accumulate(params, ex, draw, scales, None, Some(&mut trace))?;
    Ok((parts, trace))
}
