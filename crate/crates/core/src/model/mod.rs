//! Desk-scale unified generator: a two-layer recurrent text head that
//! predicts the next token (VISION_START included) and a flow-matching MLP
//! that predicts image velocities conditioned on the hidden state at the
//! switch.

mod checkpoint;
mod forward;
mod gradcheck;
mod sampler;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::toy::{Vocabulary, IMAGE_DIM};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{forward_loss, forward_trace, FlowDraw, ForwardTrace, LossParts, LossScales};
pub(crate) use forward::accumulate;
pub use gradcheck::{grad_check, grad_check_against, GradCheckReport};
pub use sampler::{sample_joint, velocity, JointSample, SamplerConfig};

pub const MAX_PARAMS: usize = 100_000;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("non-finite loss on {prompt_id}#{sample_index}")]
    NonFinite { prompt_id: String, sample_index: u32 },
    #[error("malformed example {prompt_id}#{sample_index}: {msg}")]
    Malformed { prompt_id: String, sample_index: u32, msg: String },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub image_dim: usize,
    pub mlp_width: usize,
    /// The VISION_START target is a text token and by default carries
    /// `w_text`; when false it always carries weight 1.
    pub switch_uses_text_weight: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: Vocabulary::toy().len(),
            hidden: 32,
            image_dim: IMAGE_DIM,
            mlp_width: 64,
            switch_uses_text_weight: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab < 2 || self.hidden == 0 || self.image_dim == 0 || self.mlp_width == 0 {
            return Err(ModelError::Config(format!("degenerate shape {self:?}")));
        }
        let n = Layout::new(self).total;
        if n > MAX_PARAMS {
            return Err(ModelError::Config(format!("{n} parameters exceeds the {MAX_PARAMS} limit")));
        }
        Ok(())
    }
}

/// A named row-major matrix (or vector when `cols == 1`) inside the flat
/// parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub name: &'static str,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub emb: Block,
    pub l1_wx: Block,
    pub l1_wh: Block,
    pub l1_b: Block,
    pub l2_wx: Block,
    pub l2_wh: Block,
    pub l2_b: Block,
    pub out_w: Block,
    pub out_b: Block,
    pub m1_w: Block,
    pub m1_b: Block,
    pub m2_w: Block,
    pub m2_b: Block,
    pub m3_w: Block,
    pub m3_b: Block,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, h, d, w) = (cfg.vocab, cfg.hidden, cfg.image_dim, cfg.mlp_width);
        let mut offset = 0;
        let mut block = |name, rows, cols| {
            let b = Block { name, offset, rows, cols };
            offset += rows * cols;
            b
        };
        let emb = block("embedding", v, h);
        let l1_wx = block("rnn1.w_in", h, h);
        let l1_wh = block("rnn1.w_rec", h, h);
        let l1_b = block("rnn1.bias", h, 1);
        let l2_wx = block("rnn2.w_in", h, h);
        let l2_wh = block("rnn2.w_rec", h, h);
        let l2_b = block("rnn2.bias", h, 1);
        let out_w = block("text_out.w", v, h);
        let out_b = block("text_out.bias", v, 1);
        let m1_w = block("velocity1.w", w, d + 1 + h);
        let m1_b = block("velocity1.bias", w, 1);
        let m2_w = block("velocity2.w", w, w);
        let m2_b = block("velocity2.bias", w, 1);
        let m3_w = block("velocity3.w", d, w);
        let m3_b = block("velocity3.bias", d, 1);
        Layout {
            emb,
            l1_wx,
            l1_wh,
            l1_b,
            l2_wx,
            l2_wh,
            l2_b,
            out_w,
            out_b,
            m1_w,
            m1_b,
            m2_w,
            m2_b,
            m3_w,
            m3_b,
            total: offset,
        }
    }

    pub fn blocks(&self) -> [Block; 15] {
        [
            self.emb, self.l1_wx, self.l1_wh, self.l1_b, self.l2_wx, self.l2_wh, self.l2_b, self.out_w,
            self.out_b, self.m1_w, self.m1_b, self.m2_w, self.m2_b, self.m3_w, self.m3_b,
        ]
    }
}

/// Flat parameter vector plus the shape it is interpreted with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Layout,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let data = vec![0.0; layout.total];
        Ok(Self { config, layout, data })
    }

    /// Gaussian init scaled by fan-in; biases start at zero.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        let mut p = Self::zeros(config)?;
        let l = p.layout.clone();
        let scaled = |fan_in: usize, gain: f64| Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("positive scale");
        let plan = [
            (l.emb, scaled(1, 0.5)),
            (l.l1_wx, scaled(l.l1_wx.cols, 1.0)),
            (l.l1_wh, scaled(l.l1_wh.cols, 0.5)),
            (l.l2_wx, scaled(l.l2_wx.cols, 1.0)),
            (l.l2_wh, scaled(l.l2_wh.cols, 0.5)),
            (l.out_w, scaled(l.out_w.cols, 1.0)),
            (l.m1_w, scaled(l.m1_w.cols, 1.0)),
            (l.m2_w, scaled(l.m2_w.cols, 1.0)),
            (l.m3_w, scaled(l.m3_w.cols, 1.0)),
        ];
        for (block, dist) in plan {
            for v in &mut p.data[block.range()] {
                *v = dist.sample(rng);
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn blocks(&self) -> [Block; 15] {
        self.layout.blocks()
    }

    pub fn block(&self, name: &str) -> Option<Block> {
        self.blocks().into_iter().find(|b| b.name == name)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
