//! Weakness-targeted prompt sets: category-headed seed files, few-shot
//! expansion through a text generator, and variance-based selection.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::DistributionSummary;
use crate::corpus::{Category, Origin, Prompt};
use crate::toy::{self, teacher};

/// Minimum intra-prompt variance. A Bernoulli success rate anywhere in
/// [0.2, 0.8] has variance at least 0.16.
pub const DEFAULT_V_MIN: f64 = 0.16;

pub const DEFAULT_INSTRUCTION: &str = "You write prompts for a text-to-image model. \
Write {count} new prompts in the category \"{category}\". Each prompt must test the same \
kind of skill as the examples below but describe a different scene. Output one prompt per \
line, with no numbering and no commentary.\n\nExamples:\n{examples}";

#[derive(Debug, thiserror::Error)]
pub enum CurationError {
    #[error("{path}:{line}: unknown category header [{header}]")]
    UnknownCategory { path: PathBuf, line: usize, header: String },
    #[error("{path}: category [{header}] has no prompts")]
    EmptyCategory { path: PathBuf, header: String },
    #[error("{path}:{line}: prompt before the first category header")]
    MissingHeader { path: PathBuf, line: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("expansion endpoint failed: {0}")]
    Endpoint(String),
    #[error("expansion for {category:?} found {found} of {target} unique prompts after {rounds} rounds")]
    Starvation { category: Category, found: usize, target: usize, rounds: usize },
    #[error("expansion needs at least one seed prompt")]
    NoSeeds,
    #[error("no prompt has the required {0} scored samples")]
    NoCandidates(usize),
    #[error("invalid curation policy: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationPolicy {
    pub targets: BTreeMap<Category, usize>,
    pub v_min: f64,
    pub min_extremal_mass: Option<f64>,
    /// Scored samples each candidate needs (S).
    pub samples_per_prompt: usize,
}

impl Default for CurationPolicy {
    fn default() -> Self {
        let targets = Category::WEAKNESSES
            .iter()
            .map(|&c| (c, if c == Category::Text { 1000 } else { 500 }))
            .collect();
        Self { targets, v_min: DEFAULT_V_MIN, min_extremal_mass: None, samples_per_prompt: 100 }
    }
}

impl CurationPolicy {
    pub fn validate(&self) -> Result<(), CurationError> {
        let bad = |m: String| Err(CurationError::Policy(m));
        if let Some((c, _)) = self.targets.iter().find(|(_, &n)| n == 0) {
            return bad(format!("target for {c:?} must be positive"));
        }
        if !(self.v_min >= 0.0) {
            return bad("v_min must be non-negative".into());
        }
        if self.samples_per_prompt < 2 {
            return bad("samples_per_prompt must be at least 2".into());
        }
        if let Some(m) = self.min_extremal_mass {
            if !(0.0..=1.0).contains(&m) {
                return bad("min_extremal_mass must lie in [0, 1]".into());
            }
        }
        Ok(())
    }
}

pub fn category_slug(c: Category) -> &'static str {
    match c {
        Category::RelativePositions => "relpos",
        Category::ObjectOrientation => "orient",
        Category::Text => "text",
        Category::Cardinality => "card",
        Category::StructuralCharacteristics => "struct",
        Category::Uncategorized => "misc",
    }
}

/// Parses seed text: `[Category Name]` headers, one prompt per line. Blank
/// lines and lines starting with `#` are skipped.
pub fn parse_seed_prompts(text: &str, path: &Path) -> Result<Vec<Prompt>, CurationError> {
    let mut out = Vec::new();
    let mut current: Option<(Category, String, usize)> = None;
    let close = |cur: &Option<(Category, String, usize)>| match cur {
        Some((_, header, 0)) => Err(CurationError::EmptyCategory { path: path.to_path_buf(), header: header.clone() }),
        _ => Ok(()),
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            close(&current)?;
            let category = Category::from_heading(header).ok_or_else(|| CurationError::UnknownCategory {
                path: path.to_path_buf(),
                line: i + 1,
                header: header.to_string(),
            })?;
            current = Some((category, header.to_string(), 0));
            continue;
        }
        let Some((category, _, count)) = current.as_mut() else {
            return Err(CurationError::MissingHeader { path: path.to_path_buf(), line: i + 1 });
        };
        *count += 1;
        out.push(Prompt {
            id: format!("{}-s{:04}", category_slug(*category), *count),
            text: line.to_string(),
            category: *category,
            origin: Origin::Seed,
        });
    }
    close(&current)?;
    Ok(out)
}

pub fn load_seed_prompts(path: &Path) -> Result<Vec<Prompt>, CurationError> {
    let text = fs::read_to_string(path).map_err(|source| CurationError::Io { path: path.to_path_buf(), source })?;
    parse_seed_prompts(&text, path)
}

/// One few-shot generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRequest {
    pub category: Category,
    pub round: usize,
    pub exemplars: Vec<String>,
    pub count: usize,
    /// Instruction with `{count}`, `{category}` and `{examples}` filled in.
    pub message: String,
}

/// A text generator that proposes new prompts, one per returned line.
pub trait PromptExpander {
    fn generate(&mut self, request: &ExpansionRequest) -> Result<Vec<String>, CurationError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionConfig {
    /// Exemplars per request (K).
    pub shots: usize,
    pub per_request: usize,
    pub max_rounds: usize,
    pub instruction: String,
    pub seed: u64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self { shots: 8, per_request: 25, max_rounds: 200, instruction: DEFAULT_INSTRUCTION.into(), seed: 0 }
    }
}

/// Case-insensitive, whitespace-collapsed dedup key.
pub fn dedup_key(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn clean_line(line: &str) -> &str {
    let t = line.trim();
    let t = match t.find(|c: char| !c.is_ascii_digit()) {
        Some(i) if i > 0 && t[i..].starts_with(['.', ')']) => &t[i + 1..],
        _ => t.strip_prefix(['-', '*']).unwrap_or(t),
    };
    t.trim().trim_matches('"').trim()
}

pub fn render_instruction(template: &str, category: Category, count: usize, exemplars: &[String]) -> String {
    let examples: Vec<String> = exemplars.iter().map(|e| format!("- {e}")).collect();
    template
        .replace("{count}", &count.to_string())
        .replace("{category}", category.heading())
        .replace("{examples}", &examples.join("\n"))
}

/// Expands the seeds of one category to exactly `target` new prompts.
pub fn expand_prompts(
    seeds: &[Prompt],
    target: usize,
    expander: &mut dyn PromptExpander,
    cfg: &ExpansionConfig,
) -> Result<Vec<Prompt>, CurationError> {
    let first = seeds.first().ok_or(CurationError::NoSeeds)?;
    let category = first.category;
    let mut seen: HashSet<String> = seeds.iter().map(|p| dedup_key(&p.text)).collect();
    let seed_texts: Vec<String> = seeds.iter().map(|p| p.text.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(target);
    let mut round = 0;
    while out.len() < target {
        if round == cfg.max_rounds {
            return Err(CurationError::Starvation { category, found: out.len(), target, rounds: round });
        }
        let exemplars: Vec<String> = seed_texts.choose_multiple(&mut rng, cfg.shots).cloned().collect();
        let count = cfg.per_request.min(target - out.len()).max(1);
        let request = ExpansionRequest {
            category,
            round,
            message: render_instruction(&cfg.instruction, category, count, &exemplars),
            exemplars,
            count,
        };
        for line in expander.generate(&request)? {
            let text = clean_line(&line);
            if text.is_empty() || !seen.insert(dedup_key(text)) {
                continue;
            }
            out.push(Prompt {
                id: format!("{}-e{:04}", category_slug(category), out.len() + 1),
                text: text.to_string(),
                category,
                origin: Origin::Expanded,
            });
            if out.len() == target {
                break;
            }
        }
        round += 1;
    }
    Ok(out)
}

/// Expander over the closed toy prompt universe: each request returns
/// random prompts of the requested family.
#[derive(Debug)]
pub struct ToyExpander {
    rng: ChaCha8Rng,
}

impl ToyExpander {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl PromptExpander for ToyExpander {
    fn generate(&mut self, request: &ExpansionRequest) -> Result<Vec<String>, CurationError> {
        let pool: Vec<String> = teacher::universe()
            .into_iter()
            .filter(|s| s.category() == request.category)
            .map(|s| s.to_string())
            .collect();
        if pool.is_empty() {
            return Err(CurationError::Endpoint(format!("no toy prompts for {:?}", request.category)));
        }
        Ok((0..request.count).map(|_| pool.choose(&mut self.rng).expect("non-empty").clone()).collect())
    }
}

/// Number of distinct toy prompts in a category.
pub fn toy_category_size(category: Category) -> usize {
    teacher::universe().iter().filter(|s| s.category() == category).count()
}

/// Checks that every prompt parses as a toy specification of its category.
pub fn validate_toy_prompts(prompts: &[Prompt]) -> Result<(), CurationError> {
    for p in prompts {
        let spec = toy::parse_toy_prompt(&p.text)
            .map_err(|e| CurationError::Policy(format!("prompt {} is not a toy prompt: {e}", p.id)))?;
        if spec.category() != p.category {
            return Err(CurationError::Policy(format!("prompt {} is filed under {:?}", p.id, p.category)));
        }
    }
    Ok(())
}

/// Prompts whose reward spread marks them as weaknesses, ordered by
/// variance (descending) then id.
pub fn select_weak_prompts(
    summaries: &BTreeMap<String, DistributionSummary>,
    policy: &CurationPolicy,
) -> Result<Vec<String>, CurationError> {
    policy.validate()?;
    let candidates: Vec<(&String, &DistributionSummary)> =
        summaries.iter().filter(|(_, s)| s.n >= policy.samples_per_prompt).collect();
    if candidates.is_empty() {
        return Err(CurationError::NoCandidates(policy.samples_per_prompt));
    }
    let mut keep: Vec<(&String, f64)> = candidates
        .into_iter()
        .filter(|(_, s)| s.variance >= policy.v_min)
        .filter(|(_, s)| policy.min_extremal_mass.is_none_or(|m| s.extremal_mass >= m))
        .map(|(id, s)| (id, s.variance))
        .collect();
    keep.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(keep.into_iter().map(|(id, _)| id.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SEEDS: &str = "\
[Relative Positions]
A cat to the left of a dog
A cup above a saucer

[Object Orientations]
A motorcycle lying down

[Text]
A sign that says OPEN
";

    #[test]
    fn parses_headers_and_tags() {
        let p = parse_seed_prompts(SEEDS, Path::new("seeds.txt")).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p[2].text, "A motorcycle lying down");
        assert_eq!(p[2].category, Category::ObjectOrientation);
        assert!(p.iter().all(|q| q.origin == Origin::Seed));
        assert_eq!(p[0].id, "relpos-s0001");
        assert_eq!(p[1].id, "relpos-s0002");
    }

    #[test]
    fn header_errors() {
        let path = Path::new("s.txt");
        assert!(matches!(
            parse_seed_prompts("[Textures]\nbrick wall\n", path),
            Err(CurationError::UnknownCategory { line: 1, .. })
        ));
        assert!(matches!(
            parse_seed_prompts("[Text]\n[Cardinality]\nthree apples\n", path),
            Err(CurationError::EmptyCategory { .. })
        ));
        assert!(matches!(parse_seed_prompts("[Text]\n", path), Err(CurationError::EmptyCategory { .. })));
        assert!(matches!(parse_seed_prompts("orphan\n", path), Err(CurationError::MissingHeader { line: 1, .. })));
    }

    #[test]
    fn default_targets() {
        let p = CurationPolicy::default();
        assert_eq!(p.targets[&Category::Text], 1000);
        for c in Category::WEAKNESSES.iter().filter(|&&c| c != Category::Text) {
            assert_eq!(p.targets[c], 500);
        }
        assert!(CurationPolicy { samples_per_prompt: 1, ..p.clone() }.validate().is_err());
        assert!(CurationPolicy { v_min: -0.1, ..p }.validate().is_err());
    }

    #[test]
    fn instruction_placeholders() {
        let m = render_instruction(DEFAULT_INSTRUCTION, Category::Text, 3, &["a".into(), "b".into()]);
        assert!(m.contains("Write 3 new prompts in the category \"Text\""));
        assert!(m.ends_with("- a\n- b"));
    }

    #[test]
    fn cleans_list_markup() {
        assert_eq!(clean_line("  12. \"A red cube\" "), "A red cube");
        assert_eq!(clean_line("- A blue cone"), "A blue cone");
        assert_eq!(clean_line("3 apples on a table"), "3 apples on a table");
        assert_eq!(dedup_key("A  Red cube"), dedup_key("a red CUBE"));
    }
}
