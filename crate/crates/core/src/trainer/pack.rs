//! Packed dataset: sequences grouped first-fit-decreasing under a token
//! budget, with a little-endian binary form:
//!
//! ```text
//! magic "RWRP", version u32, token_width u32 (= 4), budget u64,
//! records u32, groups u32, positions u64
//! per record: id_len u32, id bytes, sample_index u32, offset u64, length u32,
//!             prompt_len u32, image_offset i64 (-1 when absent), w_text f64, w_image f64
//! per group:  count u32, record indices u32 × count
//! payload:    u32 × positions (token ids; f32 bits at image positions)
//! mask:       u8 × positions (0 text, 1 image)
//! ```

use std::fs;
use std::path::Path;

use super::TrainError;
use crate::rwr::WeightedExample;
use crate::toy::{Modality, TokenStream, Tokenized, ToyImage, IMAGE_DIM};

pub const PACK_MAGIC: &[u8; 4] = b"RWRP";
pub const PACK_VERSION: u32 = 1;
const TOKEN_WIDTH: u32 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct PackedRecord {
    pub prompt_id: String,
    pub sample_index: u32,
    pub offset: u64,
    pub length: u32,
    pub prompt_len: u32,
    pub image_offset: Option<u64>,
    pub w_text: f64,
    pub w_image: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedDataset {
    pub budget: u64,
    /// Records in input order.
    pub records: Vec<PackedRecord>,
    /// Update groups as indices into `records`.
    pub groups: Vec<Vec<u32>>,
    pub payload: Vec<u32>,
    pub mask: Vec<u8>,
}

/// Sequence length counted against the budget: text tokens plus image
/// positions.
pub fn sequence_len(ex: &WeightedExample) -> usize {
    ex.example.stream.len()
}

pub fn pack(examples: &[WeightedExample], budget: usize) -> Result<PackedDataset, TrainError> {
    let mut records = Vec::with_capacity(examples.len());
    let mut payload = Vec::new();
    let mut mask = Vec::new();
    for ex in examples {
        let len = sequence_len(ex);
        if len > budget {
            return Err(TrainError::Oversized {
                prompt_id: ex.prompt_id.clone(),
                sample_index: ex.sample_index,
                len,
                budget,
            });
        }
        let stream = &ex.example.stream;
        if stream.has_switch() != ex.example.image.is_some() {
            return Err(TrainError::Data(format!(
                "{}#{}: image target present iff VISION_START present",
                ex.prompt_id, ex.sample_index
            )));
        }
        let offset = payload.len() as u64;
        payload.extend_from_slice(&stream.tokens);
        let image_offset = ex.example.image.map(|img| {
            let at = payload.len() as u64;
            payload.extend(img.coords().iter().map(|c| c.to_bits()));
            at
        });
        mask.extend(stream.modality_mask().iter().map(|m| u8::from(*m == Modality::ImageTok)));
        records.push(PackedRecord {
            prompt_id: ex.prompt_id.clone(),
            sample_index: ex.sample_index,
            offset,
            length: len as u32,
            prompt_len: stream.prompt_len as u32,
            image_offset,
            w_text: ex.w_text,
            w_image: ex.w_image,
        });
    }

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&records[a], &records[b]);
        rb.length
            .cmp(&ra.length)
            .then_with(|| ra.prompt_id.cmp(&rb.prompt_id))
            .then_with(|| ra.sample_index.cmp(&rb.sample_index))
            .then_with(|| a.cmp(&b))
    });
    let mut groups: Vec<Vec<u32>> = Vec::new();
    let mut room: Vec<usize> = Vec::new();
    for i in order {
        let len = records[i].length as usize;
        match room.iter().position(|&r| r >= len) {
            Some(g) => {
                groups[g].push(i as u32);
                room[g] -= len;
            }
            None => {
                groups.push(vec![i as u32]);
                room.push(budget - len);
            }
        }
    }
    Ok(PackedDataset { budget: budget as u64, records, groups, payload, mask })
}

impl PackedDataset {
    pub fn group_tokens(&self, group: usize) -> u64 {
        self.groups[group].iter().map(|&i| u64::from(self.records[i as usize].length)).sum()
    }

    pub fn example(&self, index: usize) -> WeightedExample {
        let r = &self.records[index];
        let start = r.offset as usize;
        let text_len = r.length as usize - if r.image_offset.is_some() { IMAGE_DIM } else { 0 };
        let tokens = self.payload[start..start + text_len].to_vec();
        let image = r.image_offset.map(|at| {
            let at = at as usize;
            let coords: Vec<f64> =
                self.payload[at..at + IMAGE_DIM].iter().map(|&b| f64::from(f32::from_bits(b))).collect();
            ToyImage::new(&coords).expect("packed coordinates are in range")
        });
        WeightedExample {
            prompt_id: r.prompt_id.clone(),
            sample_index: r.sample_index,
            example: Tokenized { stream: TokenStream { tokens, prompt_len: r.prompt_len as usize }, image },
            w_text: r.w_text,
            w_image: r.w_image,
        }
    }

    /// Examples in their original input order.
    pub fn unpack(&self) -> Vec<WeightedExample> {
        (0..self.records.len()).map(|i| self.example(i)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PACK_MAGIC);
        out.extend_from_slice(&PACK_VERSION.to_le_bytes());
        out.extend_from_slice(&TOKEN_WIDTH.to_le_bytes());
        out.extend_from_slice(&self.budget.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.prompt_id.len() as u32).to_le_bytes());
            out.extend_from_slice(r.prompt_id.as_bytes());
            out.extend_from_slice(&r.sample_index.to_le_bytes());
            out.extend_from_slice(&r.offset.to_le_bytes());
            out.extend_from_slice(&r.length.to_le_bytes());
            out.extend_from_slice(&r.prompt_len.to_le_bytes());
            out.extend_from_slice(&r.image_offset.map_or(-1i64, |o| o as i64).to_le_bytes());
            out.extend_from_slice(&r.w_text.to_le_bytes());
            out.extend_from_slice(&r.w_image.to_le_bytes());
        }
        for g in &self.groups {
            out.extend_from_slice(&(g.len() as u32).to_le_bytes());
            for i in g {
                out.extend_from_slice(&i.to_le_bytes());
            }
        }
        for t in &self.payload {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.extend_from_slice(&self.mask);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != PACK_MAGIC {
            return Err(TrainError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != PACK_VERSION {
            return Err(TrainError::Format(format!("unsupported version {version}")));
        }
        let width = r.u32()?;
        if width != TOKEN_WIDTH {
            return Err(TrainError::Format(format!("unsupported token width {width}")));
        }
        let budget = r.u64()?;
        let n_records = r.u32()? as usize;
        let n_groups = r.u32()? as usize;
        let positions = r.u64()? as usize;
        let mut records = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            let id_len = r.u32()? as usize;
            let prompt_id = String::from_utf8(r.take(id_len)?.to_vec())
                .map_err(|_| TrainError::Format("prompt id is not utf-8".into()))?;
            let sample_index = r.u32()?;
            let offset = r.u64()?;
            let length = r.u32()?;
            let prompt_len = r.u32()?;
            let image_offset = r.u64()? as i64;
            let w_text = f64::from_bits(r.u64()?);
            let w_image = f64::from_bits(r.u64()?);
            if offset as usize + length as usize > positions {
                return Err(TrainError::Format(format!("record {prompt_id}#{sample_index} exceeds payload")));
            }
            records.push(PackedRecord {
                prompt_id,
                sample_index,
                offset,
                length,
                prompt_len,
                image_offset: (image_offset >= 0).then_some(image_offset as u64),
                w_text,
                w_image,
            });
        }
        let mut groups = Vec::with_capacity(n_groups);
        for _ in 0..n_groups {
            let count = r.u32()? as usize;
            let g: Vec<u32> = (0..count).map(|_| r.u32()).collect::<Result<_, _>>()?;
            if g.iter().any(|&i| i as usize >= n_records) {
                return Err(TrainError::Format("group references a missing record".into()));
            }
            groups.push(g);
        }
        let payload: Vec<u32> = (0..positions).map(|_| r.u32()).collect::<Result<_, _>>()?;
        let mask = r.take(positions)?.to_vec();
        if r.pos != bytes.len() {
            return Err(TrainError::Format("trailing bytes".into()));
        }
        Ok(Self { budget, records, groups, payload, mask })
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, TrainError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| TrainError::Format("truncated packed dataset".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
