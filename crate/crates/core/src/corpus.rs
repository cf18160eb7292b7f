//! Records shared by every pipeline stage and their on-disk forms: JSON-lines
//! manifests and a content-addressed blob store.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::toy::ToyImage;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}: not found")]
    NotFound(PathBuf),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("non-finite reward for {prompt_id}#{sample_index} ({reward_name})")]
    NonFiniteReward { prompt_id: String, sample_index: u32, reward_name: String },
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("blob hash mismatch: declared {declared}, content hashes to {actual}")]
    HashMismatch { declared: String, actual: String },
    #[error("unknown blob {0}")]
    UnknownBlob(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            CorpusError::NotFound(path.to_path_buf())
        } else {
            CorpusError::Io { path: path.to_path_buf(), source }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    RelativePositions,
    ObjectOrientation,
    Text,
    Cardinality,
    StructuralCharacteristics,
    Uncategorized,
}

impl Category {
    pub const WEAKNESSES: [Category; 5] = [
        Category::RelativePositions,
        Category::ObjectOrientation,
        Category::Text,
        Category::Cardinality,
        Category::StructuralCharacteristics,
    ];

    /// Human-readable heading, as used in seed files.
    pub fn heading(self) -> &'static str {
        match self {
            Category::RelativePositions => "Relative Positions",
            Category::ObjectOrientation => "Object Orientations",
            Category::Text => "Text",
            Category::Cardinality => "Cardinality",
            Category::StructuralCharacteristics => "Structural Characteristics",
            Category::Uncategorized => "Uncategorized",
        }
    }

    /// Accepts the seed-file heading, singular or plural.
    pub fn from_heading(heading: &str) -> Option<Category> {
        let h = heading.trim().to_ascii_lowercase();
        let h = h.strip_suffix('s').unwrap_or(&h);
        Some(match h {
            "relative position" => Category::RelativePositions,
            "object orientation" => Category::ObjectOrientation,
            "text" => Category::Text,
            "cardinality" => Category::Cardinality,
            "structural characteristic" => Category::StructuralCharacteristics,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Seed,
    Expanded,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
    pub category: Category,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ImagePayload {
    Toy { coords: ToyImage },
    Blob { blob_id: String, media_type: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSample {
    pub prompt_id: String,
    pub sample_index: u32,
    pub reasoning_text: String,
    pub switch_emitted: bool,
    pub image: Option<ImagePayload>,
    pub sampler_seed: u64,
}

impl GenerationSample {
    pub fn toy_image(&self) -> Option<&ToyImage> {
        match &self.image {
            Some(ImagePayload::Toy { coords }) => Some(coords),
            _ => None,
        }
    }

    pub fn key(&self) -> (&str, u32) {
        (&self.prompt_id, self.sample_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub prompt_id: String,
    pub sample_index: u32,
    pub reward_name: String,
    pub scorer_version: String,
    pub raw: f64,
    pub normalized: Option<f64>,
}

impl RewardRecord {
    pub fn key(&self) -> (&str, u32) {
        (&self.prompt_id, self.sample_index)
    }
}

/// A record type that can live in a manifest.
pub trait ManifestRecord: Serialize + DeserializeOwned {
    fn validate(&self) -> Result<(), CorpusError> {
        Ok(())
    }
}

impl ManifestRecord for Prompt {
    fn validate(&self) -> Result<(), CorpusError> {
        if self.text.trim().is_empty() {
            return Err(CorpusError::Invalid(format!("prompt {} has empty text", self.id)));
        }
        if self.origin == Origin::Seed && self.category == Category::Uncategorized {
            return Err(CorpusError::Invalid(format!("seed prompt {} is uncategorized", self.id)));
        }
        Ok(())
    }
}

impl ManifestRecord for GenerationSample {
    fn validate(&self) -> Result<(), CorpusError> {
        if self.image.is_some() && !self.switch_emitted {
            return Err(CorpusError::Invalid(format!(
                "sample {}#{} carries an image without a switch",
                self.prompt_id, self.sample_index
            )));
        }
        Ok(())
    }
}

impl ManifestRecord for RewardRecord {
    fn validate(&self) -> Result<(), CorpusError> {
        if !self.raw.is_finite() || self.normalized.is_some_and(|n| !n.is_finite()) {
            return Err(CorpusError::NonFiniteReward {
                prompt_id: self.prompt_id.clone(),
                sample_index: self.sample_index,
                reward_name: self.reward_name.clone(),
            });
        }
        if let Some(n) = self.normalized {
            if !(0.0..=1.0).contains(&n) {
                return Err(CorpusError::Invalid(format!(
                    "normalized reward {n} outside [0, 1] for {}#{}",
                    self.prompt_id, self.sample_index
                )));
            }
        }
        Ok(())
    }
}

/// Optional first line of a manifest identifying the stage that wrote it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub kind: String,
    pub config_hash: String,
    pub tool_version: String,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    manifest: ManifestHeader,
}

/// Writes one JSON object per line, in input order.
pub fn write_manifest<R: ManifestRecord>(records: &[R], path: &Path) -> Result<usize, CorpusError> {
    write_manifest_with_header(records, None, path)
}

pub fn write_manifest_with_header<R: ManifestRecord>(
    records: &[R],
    header: Option<&ManifestHeader>,
    path: &Path,
) -> Result<usize, CorpusError> {
    for r in records {
        r.validate()?;
    }
    let tmp = path.with_extension("partial");
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    let mut emit = |value: &dyn erased::Line| -> Result<(), CorpusError> {
        value.write_line(&mut w).map_err(io_err(&tmp))
    };
    if let Some(h) = header {
        emit(&HeaderLine { manifest: h.clone() })?;
    }
    for r in records {
        emit(r)?;
    }
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(records.len())
}

mod erased {
    use std::io::Write;

    pub trait Line {
        fn write_line(&self, w: &mut dyn Write) -> std::io::Result<()>;
    }

    impl<T: serde::Serialize> Line for T {
        fn write_line(&self, w: &mut dyn Write) -> std::io::Result<()> {
            serde_json::to_writer(&mut *w, self)?;
            w.write_all(b"\n")
        }
    }
}

/// Reads a manifest, skipping its header line if present.
pub fn read_manifest<R: ManifestRecord>(path: &Path) -> Result<Vec<R>, CorpusError> {
    Ok(read_manifest_with_header(path)?.1)
}

pub fn read_manifest_with_header<R: ManifestRecord>(
    path: &Path,
) -> Result<(Option<ManifestHeader>, Vec<R>), CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(h) = serde_json::from_str::<HeaderLine>(&line) {
                header = Some(h.manifest);
                continue;
            }
        }
        let parse = |msg: String| CorpusError::Parse { path: path.to_path_buf(), line: lineno, msg };
        let rec: R = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        rec.validate().map_err(|e| parse(e.to_string()))?;
        records.push(rec);
    }
    Ok((header, records))
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content-addressed files under `root/blobs/<first two hex>/<hash>`.
#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn path_of(&self, id: &str) -> Option<PathBuf> {
        let valid = id.len() == 64 && id.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        valid.then(|| self.root.join("blobs").join(&id[..2]).join(id))
    }

    /// Stores `bytes` under the declared hash after checking it.
    pub fn store(&self, bytes: &[u8], declared_hash: &str) -> Result<String, CorpusError> {
        let actual = content_hash(bytes);
        if actual != declared_hash {
            return Err(CorpusError::HashMismatch { declared: declared_hash.to_string(), actual });
        }
        let path = self.path_of(&actual).expect("sha256 hex is a valid id");
        if path.exists() {
            return Ok(actual);
        }
        let dir = path.parent().expect("blob path has a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = tempfile_path(dir, &actual);
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(actual)
    }

    pub fn put(&self, bytes: &[u8]) -> Result<String, CorpusError> {
        self.store(bytes, &content_hash(bytes))
    }

    pub fn load(&self, id: &str) -> Result<Vec<u8>, CorpusError> {
        let path = self.path_of(id).ok_or_else(|| CorpusError::UnknownBlob(id.to_string()))?;
        fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CorpusError::UnknownBlob(id.to_string()),
            _ => CorpusError::Io { path, source: e },
        })
    }
}

fn tempfile_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!(".{id}.{}.tmp", std::process::id()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn prompt(i: usize) -> Prompt {
        Prompt {
            id: format!("p{i:03}"),
            text: format!("CARD k={}", i % 5),
            category: Category::Cardinality,
            origin: Origin::Seed,
        }
    }

    fn reward(raw: f64) -> RewardRecord {
        RewardRecord {
            prompt_id: "p".into(),
            sample_index: 0,
            reward_name: "oracle".into(),
            scorer_version: "1".into(),
            raw,
            normalized: None,
        }
    }

    #[test]
    fn write_counts_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts.jsonl");
        let prompts: Vec<Prompt> = (0..3).map(prompt).collect();
        assert_eq!(write_manifest(&prompts, &path).unwrap(), 3);
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 3);
        assert_eq!(write_manifest::<Prompt>(&[], &path).unwrap(), 0);
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
    }

    #[test]
    fn nan_reward_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_manifest(&[reward(f64::NAN)], &dir.path().join("r.jsonl")).unwrap_err();
        assert!(err.to_string().contains("non-finite reward"), "{err}");
        assert!(!dir.path().join("r.jsonl").exists());
    }

    #[test]
    fn read_reports_line_number_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts.jsonl");
        let mut text = String::new();
        for i in 0..10 {
            if i == 6 {
                text.push_str("{not json\n");
            } else {
                text.push_str(&serde_json::to_string(&prompt(i)).unwrap());
                text.push('\n');
            }
        }
        fs::write(&path, text).unwrap();
        match read_manifest::<Prompt>(&path) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            read_manifest::<Prompt>(&dir.path().join("nope.jsonl")),
            Err(CorpusError::NotFound(_))
        ));
    }

    #[test]
    fn header_is_preserved_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts.jsonl");
        let header = ManifestHeader { kind: "prompts".into(), config_hash: "abc".into(), tool_version: "0.1.0".into() };
        write_manifest_with_header(&[prompt(1)], Some(&header), &path).unwrap();
        let (h, recs) = read_manifest_with_header::<Prompt>(&path).unwrap();
        assert_eq!(h, Some(header));
        assert_eq!(recs, vec![prompt(1)]);
    }

    #[test]
    fn seed_prompt_needs_category() {
        let mut p = prompt(0);
        p.category = Category::Uncategorized;
        assert!(p.validate().is_err());
        p.origin = Origin::Expanded;
        assert!(p.validate().is_ok());
    }

    #[test]
    fn blob_store_round_trip_and_dedup() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::new(dir.path());
        let bytes: Vec<u8> = (0..1024u32).map(|i| (i * 7 % 251) as u8).collect();
        let id = store.store(&bytes, &content_hash(&bytes)).unwrap();
        assert_eq!(store.load(&id).unwrap(), bytes);
        assert_eq!(store.put(&bytes).unwrap(), id);
        assert!(dir.path().join("blobs").join(&id[..2]).join(&id).exists());
        assert!(matches!(store.store(b"abc", &id), Err(CorpusError::HashMismatch { .. })));
        assert!(matches!(store.load(&"0".repeat(64)), Err(CorpusError::UnknownBlob(_))));
        assert!(matches!(store.load("../etc/passwd"), Err(CorpusError::UnknownBlob(_))));
    }

    fn arb_sample() -> impl Strategy<Value = GenerationSample> {
        (
            "[a-z0-9]{1,8}",
            0u32..200,
            "[a-z ]{0,20}",
            prop::option::of(prop::array::uniform8(-2.0f64..2.0)),
            any::<u64>(),
        )
            .prop_map(|(id, idx, reasoning, img, seed)| GenerationSample {
                prompt_id: id,
                sample_index: idx,
                reasoning_text: reasoning,
                switch_emitted: img.is_some(),
                image: img.map(|c| ImagePayload::Toy { coords: ToyImage::new(&c).unwrap() }),
                sampler_seed: seed,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn manifest_round_trip_is_identity(samples in prop::collection::vec(arb_sample(), 0..30),
                                           raws in prop::collection::vec(-1e6f64..1e6, 0..30)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("samples.jsonl");
            write_manifest(&samples, &path).unwrap();
            let first = fs::read(&path).unwrap();
            let back: Vec<GenerationSample> = read_manifest(&path).unwrap();
            prop_assert_eq!(&back, &samples);
            write_manifest(&back, &path).unwrap();
            prop_assert_eq!(fs::read(&path).unwrap(), first);

            let rewards: Vec<RewardRecord> = raws.iter().map(|&r| reward(r)).collect();
            let rpath = dir.path().join("rewards.jsonl");
            write_manifest(&rewards, &rpath).unwrap();
            prop_assert_eq!(read_manifest::<RewardRecord>(&rpath).unwrap(), rewards);
        }

        #[test]
        fn distinct_bytes_distinct_ids(a in prop::collection::vec(any::<u8>(), 0..64),
                                       b in prop::collection::vec(any::<u8>(), 0..64)) {
            prop_assert_eq!(content_hash(&a) == content_hash(&b), a == b);
        }
    }
}
