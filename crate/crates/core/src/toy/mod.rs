//! Desk-scale stand-in for text-to-image generation.
//!
//! A toy "image" is a scene of four points in the plane. Prompts are short
//! symbolic specifications over scenes, one family per weakness category, and
//! an oracle grades how well a scene satisfies its specification. The grammar
//! is documented in `docs/toy_grammar.md`.

mod spec;
pub mod teacher;
mod tokenizer;

pub use spec::{oracle, parse_toy_prompt, ToySpec, BOX_HALF_WIDTH};
pub use tokenizer::{
    detokenize, tokenize, Modality, TokenId, TokenStream, Tokenized, Vocabulary, END,
    VISION_START,
};

use serde::{Deserialize, Serialize};

/// Number of point slots in a scene.
pub const SLOTS: usize = 4;
/// Flattened scene dimension (`SLOTS` × 2).
pub const IMAGE_DIM: usize = SLOTS * 2;
/// Scene coordinates are clipped to `[-COORD_LIMIT, COORD_LIMIT]`.
pub const COORD_LIMIT: f64 = 2.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ToyError {
    #[error("toy prompt parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("parameter out of range: {0}")]
    Range(String),
    #[error("out-of-vocabulary word {word:?}")]
    OutOfVocabulary { word: String },
    #[error("non-finite scene coordinate at index {0}")]
    NonFinite(usize),
    #[error("scene must have exactly {IMAGE_DIM} coordinates, got {0}")]
    Dimension(usize),
}

/// A scene: `SLOTS` points stored as `[x0, y0, x1, y1, ...]`.
///
/// Coordinates are kept in `f32` so that every stored scene survives the
/// packed-dataset payload and JSON manifests bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct ToyImage([f32; IMAGE_DIM]);

impl ToyImage {
    /// Builds a scene, clipping every coordinate to the scene bounds.
    pub fn new(coords: &[f64]) -> Result<Self, ToyError> {
        if coords.len() != IMAGE_DIM {
            return Err(ToyError::Dimension(coords.len()));
        }
        let mut out = [0f32; IMAGE_DIM];
        for (i, (&c, o)) in coords.iter().zip(out.iter_mut()).enumerate() {
            if !c.is_finite() {
                return Err(ToyError::NonFinite(i));
            }
            *o = c.clamp(-COORD_LIMIT, COORD_LIMIT) as f32;
        }
        Ok(Self(out))
    }

    pub fn from_points(points: [(f64, f64); SLOTS]) -> Result<Self, ToyError> {
        let mut flat = [0f64; IMAGE_DIM];
        for (i, (x, y)) in points.iter().enumerate() {
            flat[2 * i] = *x;
            flat[2 * i + 1] = *y;
        }
        Self::new(&flat)
    }

    pub fn coords(&self) -> &[f32; IMAGE_DIM] {
        &self.0
    }

    pub fn to_f64(&self) -> [f64; IMAGE_DIM] {
        self.0.map(f64::from)
    }

    pub fn point(&self, slot: usize) -> (f64, f64) {
        (f64::from(self.0[2 * slot]), f64::from(self.0[2 * slot + 1]))
    }
}

impl TryFrom<Vec<f32>> for ToyImage {
    type Error = ToyError;

    fn try_from(v: Vec<f32>) -> Result<Self, Self::Error> {
        let as64: Vec<f64> = v.iter().map(|&c| f64::from(c)).collect();
        let img = Self::new(&as64)?;
        // Reject rather than silently clip values that were stored out of range.
        if img.0.iter().zip(&v).any(|(a, b)| a != b) {
            return Err(ToyError::Range("scene coordinate outside [-2, 2]".into()));
        }
        Ok(img)
    }
}

impl From<ToyImage> for Vec<f32> {
    fn from(img: ToyImage) -> Self {
        img.0.to_vec()
    }
}
