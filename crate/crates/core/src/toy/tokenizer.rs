use std::collections::HashMap;
use std::sync::OnceLock;

use super::{ToyError, ToyImage, IMAGE_DIM};

pub type TokenId = u32;

pub const END: &str = "<end>";
pub const VISION_START: &str = "<|vision_start|>";

/// Compass words used by reasoning traces, one per 3×3 grid cell.
pub const REGION_WORDS: [&str; 9] = ["nw", "n", "ne", "w", "c", "e", "sw", "s", "se"];

/// Closed toy vocabulary with whitespace tokenization.
#[derive(Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// The one vocabulary every toy component shares.
    pub fn toy() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut words: Vec<String> = vec![END.into(), VISION_START.into()];
            words.extend(["CARD", "RELPOS", "ORIENT", "STRUCT", "TEXT"].map(String::from));
            words.extend((0..=4).map(|k| format!("k={k}")));
            for a in 0..4 {
                for b in 0..4 {
                    if a != b {
                        words.push(format!("pair=({a},{b})"));
                    }
                }
            }
            words.extend(["0.1", "0.2", "0.3", "0.5"].map(|m| format!("m={m}")));
            words.extend((0..8).map(|i| format!("theta={}", i * 45)));
            words.extend([30, 45, 90].map(|t| format!("tau={t}")));
            words.extend(["0.05", "0.1", "0.2"].map(|e| format!("eps={e}")));
            for cy in [-1, 0, 1] {
                for cx in [-1, 0, 1] {
                    words.push(format!("box=({cx},{cy})"));
                }
            }
            words.extend(REGION_WORDS.map(String::from));
            let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as TokenId)).collect();
            Vocabulary { words, index }
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<TokenId, ToyError> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| ToyError::OutOfVocabulary { word: word.to_string() })
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn end(&self) -> TokenId {
        0
    }

    pub fn vision_start(&self) -> TokenId {
        1
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, ToyError> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, ToyError> {
        let words: Result<Vec<&str>, _> = ids
            .iter()
            .map(|&id| {
                self.word(id)
                    .ok_or_else(|| ToyError::OutOfVocabulary { word: format!("#{id}") })
            })
            .collect();
        Ok(words?.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Modality {
    TextTok,
    ImageTok,
}

/// `[prompt][reasoning][VISION_START]`, or `[prompt][reasoning]` for a
/// sample that never switched to image mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
}

impl TokenStream {
    pub fn vision_start_index(&self) -> Option<usize> {
        let vs = Vocabulary::toy().vision_start();
        self.tokens.iter().position(|&t| t == vs)
    }

    pub fn has_switch(&self) -> bool {
        self.vision_start_index().is_some()
    }

    /// Positions that carry a next-token cross-entropy target.
    pub fn text_targets(&self) -> usize {
        self.tokens.len().saturating_sub(self.prompt_len)
    }

    /// Text positions followed by `IMAGE_DIM` image positions when switched.
    pub fn modality_mask(&self) -> Vec<Modality> {
        let mut mask = vec![Modality::TextTok; self.tokens.len()];
        if self.has_switch() {
            mask.extend(std::iter::repeat_n(Modality::ImageTok, IMAGE_DIM));
        }
        mask
    }

    /// Total sequence positions, image targets included.
    pub fn len(&self) -> usize {
        self.tokens.len() + if self.has_switch() { IMAGE_DIM } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        let vs = Vocabulary::toy().vision_start();
        let switches = self.tokens.iter().filter(|&&t| t == vs).count();
        self.prompt_len >= 1
            && self.prompt_len <= self.tokens.len()
            && (switches == 0 || (switches == 1 && self.tokens.last() == Some(&vs)))
    }
}

/// Tokenized training example: text stream plus the continuous image target.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenized {
    pub stream: TokenStream,
    pub image: Option<ToyImage>,
}

pub fn tokenize(prompt: &str, reasoning: &str, image: Option<&ToyImage>) -> Result<Tokenized, ToyError> {
    let vocab = Vocabulary::toy();
    let mut tokens = vocab.encode(prompt)?;
    let prompt_len = tokens.len();
    if prompt_len == 0 {
        return Err(ToyError::Parse { pos: 0, msg: "empty prompt".into() });
    }
    let reasoning = vocab.encode(reasoning)?;
    if reasoning.iter().any(|&t| t == vocab.vision_start() || t == vocab.end()) {
        return Err(ToyError::Parse { pos: 0, msg: "control token inside reasoning".into() });
    }
    tokens.extend(reasoning);
    if image.is_some() {
        tokens.push(vocab.vision_start());
    }
    Ok(Tokenized { stream: TokenStream { tokens, prompt_len }, image: image.copied() })
}

/// Inverse of [`tokenize`]: `(prompt, reasoning, image)`.
pub fn detokenize(t: &Tokenized) -> Result<(String, String, Option<ToyImage>), ToyError> {
    let vocab = Vocabulary::toy();
    let s = &t.stream;
    let text_end = s.vision_start_index().unwrap_or(s.tokens.len());
    let prompt = vocab.decode(&s.tokens[..s.prompt_len])?;
    let reasoning = vocab.decode(&s.tokens[s.prompt_len..text_end])?;
    Ok((prompt, reasoning, t.image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocabulary_is_small_and_unique() {
        let v = Vocabulary::toy();
        assert!(v.len() <= 72, "{}", v.len());
        let mut seen = std::collections::HashSet::new();
        for i in 0..v.len() {
            assert!(seen.insert(v.word(i as TokenId).unwrap()));
        }
        assert_eq!(v.word(v.vision_start()), Some(VISION_START));
        assert_eq!(v.word(v.end()), Some(END));
    }

    #[test]
    fn empty_reasoning_is_prompt_then_switch() {
        let img = ToyImage::new(&[0.0; 8]).unwrap();
        let t = tokenize("CARD k=2", "", Some(&img)).unwrap();
        let v = Vocabulary::toy();
        assert_eq!(t.stream.tokens, vec![v.id("CARD").unwrap(), v.id("k=2").unwrap(), v.vision_start()]);
        assert_eq!(t.stream.len(), 3 + IMAGE_DIM);
        assert_eq!(t.stream.modality_mask()[3], Modality::ImageTok);
        assert!(t.stream.is_valid());
    }

    #[test]
    fn oov_is_rejected() {
        assert_eq!(
            tokenize("CARD k=2", "zebra", None),
            Err(ToyError::OutOfVocabulary { word: "zebra".into() })
        );
    }

    proptest! {
        #[test]
        fn round_trip(prompt_ids in prop::collection::vec(2u32..59, 1..6),
                      reasoning in prop::collection::vec(0usize..9, 0..8),
                      switched in any::<bool>(),
                      coords in prop::array::uniform8(-2.0f64..2.0)) {
            let v = Vocabulary::toy();
            let prompt = v.decode(&prompt_ids).unwrap();
            let reasoning: Vec<&str> = reasoning.iter().map(|&i| REGION_WORDS[i]).collect();
            let reasoning = reasoning.join(" ");
            let img = ToyImage::new(&coords).unwrap();
            let t = tokenize(&prompt, &reasoning, switched.then_some(&img)).unwrap();
            prop_assert!(t.stream.is_valid());
            let (p, r, i) = detokenize(&t).unwrap();
            prop_assert_eq!(p, prompt);
            prop_assert_eq!(r, reasoning);
            prop_assert_eq!(i, switched.then_some(img));
        }
    }
}
