//! Pipeline stages. Each reads and writes fixed files under the corpus root:
//!
//! | stage   | reads                                              | writes |
//! |---------|----------------------------------------------------|--------|
//! | seed    | seed prompt file                                   | seeds.jsonl |
//! | expand  | seeds.jsonl                                        | prompts.jsonl |
//! | sample  | prompts.jsonl                                      | base.ckpt, samples.jsonl, pretrain_metrics.csv |
//! | label   | prompts.jsonl, samples.jsonl                       | rewards.jsonl |
//! | analyze | rewards.jsonl                                      | analysis/ |
//! | curate  | prompts.jsonl, analysis/summaries.json             | weak_prompts.jsonl, held_out.jsonl, selection.csv |
//! | weight  | samples.jsonl, rewards.jsonl, weak_prompts.jsonl   | weights.jsonl |
//! | pack    | prompts.jsonl, samples.jsonl, weights.jsonl        | train.rwrp |
//! | train   | base.ckpt, train.rwrp                              | model.ckpt, train_metrics.csv |
//! | eval    | base.ckpt, model.ckpt, held_out.jsonl              | eval.csv, eval_samples.csv |
//! | ablate  | base.ckpt, prompts.jsonl, analysis/summaries.json, weak_prompts.jsonl, held_out.jsonl | ablation.csv, data_ablation.csv |
//! | report  | every manifest plus eval.csv and ablation.csv      | report/report.md |

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rwrforge_core::analytics::{emit_report, summarize, DistributionSummary, DEFAULT_BINS};
use rwrforge_core::corpus::{
    read_manifest, write_manifest_with_header, BlobStore, Category, GenerationSample, ImagePayload, ManifestHeader,
    ManifestRecord, Origin, Prompt, RewardRecord,
};
use rwrforge_core::curation::{
    category_slug, expand_prompts, load_seed_prompts, select_weak_prompts, validate_toy_prompts, PromptExpander,
    ToyExpander,
};
use rwrforge_core::experiment::{
    collect_samples, data_ablation, modality_ablation, oracle_rewards, pretrain_base, split_weak, Prepared,
};
use rwrforge_core::model::{load_checkpoint, save_checkpoint};
use rwrforge_core::reward::{jpeg_score, normalize_rewards, RewardFunction};
use rwrforge_core::rwr::{assign_weights, build_examples, SampleWeight};
use rwrforge_core::trainer::{evaluate, pack, train, write_metrics_csv, PackedDataset};
use rwrforge_gateway::{
    request_id, EndpointRole, HttpExpander, ImageBlob, RemoteKind, ScoreItem, ScorerClient, VqaTemplateEnsemble,
};
use serde_json::{json, Value};

use crate::config::{hash_json, ExpanderBackend, Loaded};
use crate::state::{file_hash, read_stamp, write_atomic, write_stamp, Stamp};
use crate::CliError;

pub const TOOL_VERSION: &str = concat!("rwrforge ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Seed,
    Expand,
    Sample,
    Label,
    Analyze,
    Curate,
    Weight,
    Pack,
    Train,
    Eval,
    Ablate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::Seed,
        Stage::Expand,
        Stage::Sample,
        Stage::Label,
        Stage::Analyze,
        Stage::Curate,
        Stage::Weight,
        Stage::Pack,
        Stage::Train,
        Stage::Eval,
        Stage::Ablate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Seed => "seed",
            Stage::Expand => "expand",
            Stage::Sample => "sample",
            Stage::Label => "label",
            Stage::Analyze => "analyze",
            Stage::Curate => "curate",
            Stage::Weight => "weight",
            Stage::Pack => "pack",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
            Stage::Report => "report",
        }
    }

    /// Files under the root this stage needs.
    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            Stage::Seed => &[],
            Stage::Expand => &["seeds.jsonl"],
            Stage::Sample => &["prompts.jsonl"],
            Stage::Label => &["prompts.jsonl", "samples.jsonl"],
            Stage::Analyze => &["rewards.jsonl"],
            Stage::Curate => &["prompts.jsonl", "analysis/summaries.json"],
            Stage::Weight => &["samples.jsonl", "rewards.jsonl", "weak_prompts.jsonl"],
            Stage::Pack => &["prompts.jsonl", "samples.jsonl", "weights.jsonl"],
            Stage::Train => &["base.ckpt", "train.rwrp"],
            Stage::Eval => &["base.ckpt", "model.ckpt", "held_out.jsonl"],
            Stage::Ablate => {
                &["base.ckpt", "prompts.jsonl", "analysis/summaries.json", "weak_prompts.jsonl", "held_out.jsonl"]
            }
            Stage::Report => &[
                "prompts.jsonl",
                "samples.jsonl",
                "rewards.jsonl",
                "weak_prompts.jsonl",
                "held_out.jsonl",
                "eval.csv",
                "ablation.csv",
            ],
        }
    }

    /// Files under the root other stages may depend on.
    pub fn products(self) -> &'static [&'static str] {
        match self {
            Stage::Seed => &["seeds.jsonl"],
            Stage::Expand => &["prompts.jsonl"],
            Stage::Sample => &["base.ckpt", "samples.jsonl"],
            Stage::Label => &["rewards.jsonl"],
            Stage::Analyze => &["analysis/summaries.json"],
            Stage::Curate => &["weak_prompts.jsonl", "held_out.jsonl"],
            Stage::Weight => &["weights.jsonl"],
            Stage::Pack => &["train.rwrp"],
            Stage::Train => &["model.ckpt"],
            Stage::Eval => &["eval.csv"],
            Stage::Ablate => &["ablation.csv"],
            Stage::Report => &[],
        }
    }

    pub fn producer_of(file: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.products().contains(&file))
    }

    /// The config sections this stage reads. Their hash keys its stamp.
    fn config_view(self, l: &Loaded) -> Value {
        let c = &l.config;
        match self {
            Stage::Seed => json!({"seed_prompts": c.paths.seed_prompts}),
            Stage::Expand => json!({"expansion": c.expansion, "endpoint": c.endpoints.expansion}),
            Stage::Sample => json!({"pretrain": c.pretrain, "sampling": c.sampling, "base": c.paths.base_checkpoint}),
            Stage::Label => json!({
                "rewards": c.rewards,
                "normalization": c.rwr.normalization,
                "scorer": c.endpoints.scorer,
                "embedding": c.endpoints.embedding,
            }),
            Stage::Analyze => json!({"reward": c.rwr.reward_name, "bins": DEFAULT_BINS}),
            Stage::Curate => json!({"policy": c.curation_policy(), "curation": c.curation}),
            Stage::Weight => json!({"rwr": c.rwr}),
            Stage::Pack => json!({"token_budget": c.train.token_budget}),
            Stage::Train => json!({"train": c.train}),
            Stage::Eval => json!({"eval": c.eval}),
            Stage::Ablate => json!({
                "ablation": c.ablation,
                "rwr": c.rwr,
                "train": c.train,
                "eval": c.eval,
                "sampler": c.sampling.sampler,
            }),
            Stage::Report => json!({"report_dir": c.paths.report_dir}),
        }
    }

    /// Files outside the root whose content feeds this stage.
    fn external_inputs(self, l: &Loaded) -> Vec<(String, PathBuf)> {
        let c = &l.config;
        let mut out = Vec::new();
        match self {
            Stage::Seed => out.push(("seed_prompts".into(), l.resolve(&c.paths.seed_prompts))),
            Stage::Sample => {
                if let Some(p) = &c.paths.base_checkpoint {
                    out.push(("base_checkpoint".into(), l.resolve(p)));
                }
            }
            Stage::Label => {
                if let Some(p) = &c.rewards.vqa_templates {
                    out.push(("vqa_templates".into(), l.resolve(p)));
                }
            }
            _ => {}
        }
        out
    }
}

/// How one stage invocation went.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
    WouldRun,
}

pub struct Runner<'a> {
    pub loaded: &'a Loaded,
    pub root: PathBuf,
    pub force: bool,
    pub dry_run: bool,
}

impl Runner<'_> {
    /// Inputs missing from disk, paired with the stage that writes them.
    /// `planned` lists stages that will run earlier in the same invocation.
    fn missing(&self, stage: Stage, planned: &[Stage]) -> Option<(String, Option<Stage>)> {
        for f in stage.inputs() {
            if !self.root.join(f).exists() {
                let producer = Stage::producer_of(f);
                if producer.is_some_and(|p| planned.contains(&p)) {
                    continue;
                }
                return Some((f.to_string(), producer));
            }
        }
        for (name, path) in stage.external_inputs(self.loaded) {
            if !path.exists() {
                return Some((format!("{name} ({})", path.display()), None));
            }
        }
        None
    }

    fn fingerprint(&self, stage: Stage) -> Result<(String, BTreeMap<String, String>), CliError> {
        let config_hash = hash_json(&stage.config_view(self.loaded));
        let mut inputs = BTreeMap::new();
        for f in stage.inputs() {
            inputs.insert(f.to_string(), file_hash(&self.root.join(f))?);
        }
        for (name, path) in stage.external_inputs(self.loaded) {
            inputs.insert(name, file_hash(&path)?);
        }
        Ok((config_hash, inputs))
    }

    fn outputs_intact(&self, stamp: &Stamp) -> bool {
        stamp.outputs.iter().all(|(f, h)| file_hash(&self.root.join(f)).is_ok_and(|a| &a == h))
    }

    /// Runs `stages` in order, skipping those whose stamp matches.
    pub fn run(&self, stages: &[Stage]) -> Result<Vec<(Stage, Outcome)>, CliError> {
        let mut results = Vec::new();
        for (i, &stage) in stages.iter().enumerate() {
            let earlier_pending: Vec<Stage> = results
                .iter()
                .filter(|(_, o)| *o == Outcome::WouldRun)
                .map(|(s, _)| *s)
                .chain(if self.dry_run { stages[..i].to_vec() } else { Vec::new() })
                .collect();
            if let Some((file, producer)) = self.missing(stage, &earlier_pending) {
                return Err(CliError::MissingDependency { stage: stage.name(), file, producer: producer.map(Stage::name) });
            }
            let upstream_pending = stage.inputs().iter().any(|f| !self.root.join(f).exists());
            if upstream_pending {
                println!("{:<8} would run after its inputs are built", stage.name());
                results.push((stage, Outcome::WouldRun));
                continue;
            }
            let (config_hash, inputs) = self.fingerprint(stage)?;
            if let Some(stamp) = read_stamp(&self.root, stage.name()) {
                if stamp.config_hash != config_hash && !self.force {
                    return Err(CliError::ConfigMismatch { stage: stage.name() });
                }
                let inputs_changed = stamp.inputs != inputs
                    || results.iter().any(|(s, o)| *o != Outcome::UpToDate && stage.inputs().iter().any(|f| s.products().contains(f)));
                if stamp.config_hash == config_hash && !inputs_changed && !self.force && self.outputs_intact(&stamp) {
                    println!("{:<8} up to date", stage.name());
                    results.push((stage, Outcome::UpToDate));
                    continue;
                }
            }
            if self.dry_run {
                let writes = self.planned_outputs(stage).join(", ");
                println!("{:<8} would run: reads [{}], writes [{writes}]", stage.name(), stage.inputs().join(", "));
                results.push((stage, Outcome::WouldRun));
                continue;
            }
            log::info!("running {}", stage.name());
            let header = ManifestHeader {
                kind: stage.name().into(),
                config_hash: config_hash.clone(),
                tool_version: TOOL_VERSION.into(),
            };
            let ctx = Ctx { l: self.loaded, root: &self.root, header };
            let written = run_stage(stage, &ctx)?;
            let mut outputs = BTreeMap::new();
            for f in written {
                outputs.insert(f.clone(), file_hash(&self.root.join(&f))?);
            }
            write_stamp(
                &self.root,
                &Stamp {
                    stage: stage.name().into(),
                    tool_version: TOOL_VERSION.into(),
                    config_hash,
                    inputs,
                    outputs,
                },
            )?;
            println!("{:<8} done", stage.name());
            results.push((stage, Outcome::Ran));
        }
        Ok(results)
    }

    fn planned_outputs(&self, stage: Stage) -> Vec<String> {
        match stage {
            Stage::Sample => vec!["base.ckpt".into(), "samples.jsonl".into(), "pretrain_metrics.csv".into()],
            Stage::Analyze => vec!["analysis/".into()],
            Stage::Curate => vec!["weak_prompts.jsonl".into(), "held_out.jsonl".into(), "selection.csv".into()],
            Stage::Train => vec!["model.ckpt".into(), "train_metrics.csv".into()],
            Stage::Eval => vec!["eval.csv".into(), "eval_samples.csv".into()],
            Stage::Ablate => vec!["ablation.csv".into(), "data_ablation.csv".into()],
            Stage::Report => vec![report_path(self.loaded)],
            s => s.products().iter().map(|f| f.to_string()).collect(),
        }
    }
}

fn report_path(l: &Loaded) -> String {
    l.config.paths.report_dir.join("report.md").to_string_lossy().into_owned()
}

struct Ctx<'a> {
    l: &'a Loaded,
    root: &'a Path,
    header: ManifestHeader,
}

impl Ctx<'_> {
    fn path(&self, f: &str) -> PathBuf {
        self.root.join(f)
    }

    fn read<R: ManifestRecord>(&self, f: &str) -> Result<Vec<R>, CliError> {
        Ok(read_manifest(&self.path(f))?)
    }

    fn write<R: ManifestRecord>(&self, records: &[R], f: &str) -> Result<String, CliError> {
        write_manifest_with_header(records, Some(&self.header), &self.path(f))?;
        Ok(f.to_string())
    }

    fn write_text(&self, f: &str, text: &str) -> Result<String, CliError> {
        write_atomic(&self.path(f), text.as_bytes())?;
        Ok(f.to_string())
    }
}

fn run_stage(stage: Stage, ctx: &Ctx) -> Result<Vec<String>, CliError> {
    match stage {
        Stage::Seed => seed(ctx),
        Stage::Expand => expand(ctx),
        Stage::Sample => sample(ctx),
        Stage::Label => label(ctx),
        Stage::Analyze => analyze(ctx),
        Stage::Curate => curate(ctx),
        Stage::Weight => weight(ctx),
        Stage::Pack => pack_stage(ctx),
        Stage::Train => train_stage(ctx),
        Stage::Eval => eval_stage(ctx),
        Stage::Ablate => ablate(ctx),
        Stage::Report => report(ctx),
    }
}

fn seed(ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let prompts = load_seed_prompts(&ctx.l.resolve(&ctx.l.config.paths.seed_prompts))?;
    log::info!("{} seed prompts", prompts.len());
    Ok(vec![ctx.write(&prompts, "seeds.jsonl")?])
}

fn expand(ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let c = &ctx.l.config.expansion;
    let seeds: Vec<Prompt> = ctx.read("seeds.jsonl")?;
    let mut expander: Box<dyn PromptExpander> = match c.backend {
        ExpanderBackend::Toy => Box::new(ToyExpander::new(c.seed)),
        ExpanderBackend::Http => {
            let ep = ctx.l.config.endpoints.resolve(EndpointRole::Expansion)?;
            Box::new(HttpExpander::new(ep)?)
        }
    };
    let cfg = c.expansion_config();
    let mut prompts = seeds.clone();
    for (&category, &target) in &c.targets {
        let of_cat: Vec<Prompt> = seeds.iter().filter(|p| p.category == category).cloned().collect();
        let new = expand_prompts(&of_cat, target, expander.as_mut(), &cfg)?;
        log::info!("{}: {} seeds, {} expanded", category_slug(category), of_cat.len(), new.len());
        prompts.extend(new);
    }
    if c.backend == ExpanderBackend::Toy {
        validate_toy_prompts(&prompts)?;
    }
    Ok(vec![ctx.write(&prompts, "prompts.jsonl")?])
}

fn sample(ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let c = &ctx.l.config;
    let prompts: Vec<Prompt> = ctx.read("prompts.jsonl")?;
    validate_toy_prompts(&prompts)?;
    let mut written = Vec::new();
    let base = match &c.paths.base_checkpoint {
        Some(p) => load_checkpoint(&ctx.l.resolve(p))?,
        None => {
            log::info!("pretraining the base model on {} prompts", prompts.len());
            let (base, metrics) = pretrain_base(&prompts, &c.pretrain)?;
            write_metrics_csv(&metrics, &ctx.path("pretrain_metrics.csv"))?;
            written.push("pretrain_metrics.csv".to_string());
            base
        }
    };
    save_checkpoint(&base, &ctx.path("base.ckpt"))?;
    written.push("base.ckpt".into());
    let samples = collect_samples(&base, &prompts, c.sampling.samples_per_prompt, &c.sampling.sampler, c.sampling.seed)?;
    written.push(ctx.write(&samples, "samples.jsonl")?);
    Ok(written)
}

fn remote_kind(ctx: &Ctx, name: &str) -> Result<(RemoteKind, EndpointRole), CliError> {
    Ok(match name {
        "vqa" => {
            let e = match &ctx.l.config.rewards.vqa_templates {
                Some(p) => VqaTemplateEnsemble::load(&ctx.l.resolve(p))?,
                None => VqaTemplateEnsemble::default(),
            };
            (RemoteKind::Vqa(e), EndpointRole::Scorer)
        }
        "embedding" => (RemoteKind::Embedding, EndpointRole::Embedding),
        _ => (RemoteKind::Scalar, EndpointRole::Scorer),
    })
}

/// Image bytes of a blob-backed sample.
fn blob_of(store: &BlobStore, s: &GenerationSample, reward: &str) -> Result<Option<ImageBlob>, CliError> {
    match &s.image {
        None => Ok(None),
        Some(ImagePayload::Blob { blob_id, media_type }) => {
            Ok(Some(ImageBlob { bytes: store.load(blob_id)?, media_type: media_type.clone() }))
        }
        Some(ImagePayload::Toy { .. }) => Err(CliError::Config(format!(
            "reward {reward} scores image files, but sample {}#{} holds toy coordinates",
            s.prompt_id, s.sample_index
        ))),
    }
}

fn label(ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let c = &ctx.l.config;
    let prompts: Vec<Prompt> = ctx.read("prompts.jsonl")?;
    let samples: Vec<GenerationSample> = ctx.read("samples.jsonl")?;
    let store = BlobStore::new(ctx.root);
    let texts: HashMap<&str, &str> = prompts.iter().map(|p| (p.id.as_str(), p.text.as_str())).collect();
    let mut all = Vec::new();
    for name in &c.rewards.names {
        let raw: Vec<RewardRecord> = match name.as_str() {
            "oracle" => oracle_rewards(&samples, &prompts)?,
            "jpeg" => {
                let f = RewardFunction::jpeg();
                let mut out = Vec::with_capacity(samples.len());
                for s in &samples {
                    let raw = match blob_of(&store, s, name)? {
                        Some(img) => jpeg_score(&img.bytes)?,
                        None => 0.0,
                    };
                    out.push(record(s, &f.name, &f.version, raw));
                }
                out
            }
            remote => {
                let (kind, role) = remote_kind(ctx, remote)?;
                let client = ScorerClient::new(c.endpoints.resolve(role)?)?;
                let mut items = Vec::new();
                let mut slots = Vec::new();
                for (i, s) in samples.iter().enumerate() {
                    if let Some(image) = blob_of(&store, s, name)? {
                        let prompt_text = texts
                            .get(s.prompt_id.as_str())
                            .ok_or_else(|| CliError::Failed(format!("sample for unknown prompt {}", s.prompt_id)))?;
                        items.push(ScoreItem {
                            request_id: request_id(remote, &s.prompt_id, s.sample_index),
                            prompt_text: prompt_text.to_string(),
                            image,
                        });
                        slots.push(i);
                    }
                }
                let mut raws = vec![0.0; samples.len()];
                for (slot, r) in slots.into_iter().zip(client.score_items(&kind, &items)) {
                    raws[slot] = r?;
                }
                let version = kind.version();
                samples.iter().zip(raws).map(|(s, raw)| record(s, remote, &version, raw)).collect()
            }
        };
        all.extend(normalize_rewards(&raw, c.rwr.normalization)?);
    }
    Ok(vec![ctx.write(&all, "rewards.jsonl")?])
}

fn record(s: &GenerationSample, name: &str, version: &str, raw: f64) -> RewardRecord {
    RewardRecord {
        prompt_id: s.prompt_id.clone(),
        sample_index: s.sample_index,
        reward_name: name.into(),
        scorer_version: version.into(),
        raw,
        normalized: None,
    }
}

fn analyze(ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let reward = &ctx.l.config.rwr.reward_name;
    let rewards: Vec<RewardRecord> = ctx.read("rewards.jsonl")?;
    let mut per_prompt: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut global: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &rewards {
        let Some(v) = r.normalized else {
            return Err(CliError::Failed(format!("{}#{} has no normalized reward", r.prompt_id, r.sample_index)));
        };
        global.entry(r.reward_name.clone()).or_default().push(v);
        if &r.reward_name == reward {
            per_prompt.entry(r.prompt_id.clone()).or_default().push(v);
        }
    }
    let summarize_all = |m: BTreeMap<String, Vec<f64>>| -> Result<BTreeMap<String, DistributionSummary>, CliError> {
        m.into_iter().map(|(k, v)| Ok((k, summarize(&v, DEFAULT_BINS)?))).collect()
    };
    let per_prompt = summarize_all(per_prompt)?;
    let global = summarize_all(global)?;
    let dir = ctx.path("analysis");
    let mut written: Vec<String> = emit_report(&per_prompt, &global, &dir)?
        .into_iter()
        .map(|p| p.strip_prefix(ctx.root).expect("written under the root").to_string_lossy().into_owned())
        .collect();
    let mut json = serde_json::to_string_pretty(&per_prompt).expect("summaries serialize");
    json.push('\n');
    written.push(ctx.write_text("analysis/summaries.json", &json)?);
    Ok(written)
}

fn read_summaries(ctx: &Ctx) -> Result<BTreeMap<String, DistributionSummary>, CliError> {
    let path = ctx.path("analysis/summaries.json");
    let text = fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn curate(ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let c = &ctx.l.config;
    let prompts: Vec<Prompt> = ctx.read("prompts.jsonl")?;
    let summaries = read_summaries(ctx)?;
    let weak = select_weak_prompts(&summaries, &c.curation_policy())?;
    log::info!("{} of {} prompts selected as weak", weak.len(), summaries.len());
    let (train_weak, held_out) =
        split_weak(&weak, &prompts, c.curation.held_out_fraction, c.curation.split_seed)?;
    let held: Vec<&str> = held_out.iter().map(|p| p.id.as_str()).collect();
    let mut csv = String::from("prompt_id,variance,dip,extremal_mass,split\n");
    for id in &weak {
        let s = &summaries[id];
        let split = if held.contains(&id.as_str()) { "held_out" } else { "train" };
        let _ = writeln!(csv, "{id},{},{},{},{split}", s.variance, s.dip, s.extremal_mass);
    }
    Ok(vec![
        ctx.write(&train_weak, "weak_prompts.jsonl")?,
        ctx.write(&held_out, "held_out.jsonl")?,
        ctx.write_text("selection.csv", &csv)?,
    ])
}

fn weight(ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let weak: Vec<Prompt> = ctx.read("weak_prompts.jsonl")?;
    let ids: Vec<&str> = weak.iter().map(|p| p.id.as_str()).collect();
    let samples: Vec<GenerationSample> =
        ctx.read::<GenerationSample>("samples.jsonl")?.into_iter().filter(|s| ids.contains(&s.prompt_id.as_str())).collect();
    let rewards: Vec<RewardRecord> = ctx.read("rewards.jsonl")?;
    let weights = assign_weights(&samples, &rewards, &ctx.l.config.rwr, &ctx.header.config_hash)?;
    log::info!("{} weighted samples from {} prompts", weights.len(), weak.len());
    Ok(vec![ctx.write(&weights, "weights.jsonl")?])
}

fn pack_stage(ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let prompts: Vec<Prompt> = ctx.read("prompts.jsonl")?;
    let samples: Vec<GenerationSample> = ctx.read("samples.jsonl")?;
    let weights: Vec<SampleWeight> = ctx.read("weights.jsonl")?;
    let examples = build_examples(&samples, &prompts, &weights)?;
    let data = pack(&examples, ctx.l.config.train.token_budget)?;
    log::info!("{} sequences in {} update groups", data.records.len(), data.groups.len());
    data.write(&ctx.path("train.rwrp"))?;
    Ok(vec!["train.rwrp".into()])
}

fn train_stage(ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let base = load_checkpoint(&ctx.path("base.ckpt"))?;
    let data = PackedDataset::read(&ctx.path("train.rwrp"))?;
    let (model, metrics) = train(&base, &data, &ctx.l.config.train)?;
    save_checkpoint(&model, &ctx.path("model.ckpt"))?;
    write_metrics_csv(&metrics, &ctx.path("train_metrics.csv"))?;
    Ok(vec!["model.ckpt".into(), "train_metrics.csv".into()])
}

fn eval_stage(ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let held: Vec<Prompt> = ctx.read("held_out.jsonl")?;
    let cfg = &ctx.l.config.eval;
    let reports = [
        ("base", evaluate(&load_checkpoint(&ctx.path("base.ckpt"))?, &held, cfg)?),
        ("trained", evaluate(&load_checkpoint(&ctx.path("model.ckpt"))?, &held, cfg)?),
    ];
    let mut summary = String::from("model,mean_reward,switch_rate");
    for c in Category::WEAKNESSES {
        let _ = write!(summary, ",{}", category_slug(c));
    }
    summary.push('\n');
    let mut detail = String::from("model,prompt_id,sample_index,switch_emitted,reward\n");
    for (name, r) in &reports {
        let _ = write!(summary, "{name},{},{}", r.mean_reward, r.switch_rate);
        for c in Category::WEAKNESSES {
            match r.per_category.get(&c) {
                Some(v) => {
                    let _ = write!(summary, ",{v}");
                }
                None => summary.push(','),
            }
        }
        summary.push('\n');
        for s in &r.samples {
            let _ = writeln!(detail, "{name},{},{},{},{}", s.prompt_id, s.sample_index, s.switch_emitted, s.reward);
        }
    }
    Ok(vec![ctx.write_text("eval.csv", &summary)?, ctx.write_text("eval_samples.csv", &detail)?])
}

fn ablate(ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let c = &ctx.l.config;
    let train_weak: Vec<Prompt> = ctx.read("weak_prompts.jsonl")?;
    let held_out: Vec<Prompt> = ctx.read("held_out.jsonl")?;
    let prep = Prepared {
        base: load_checkpoint(&ctx.path("base.ckpt"))?,
        prompts: ctx.read("prompts.jsonl")?,
        summaries: read_summaries(ctx)?,
        weak: train_weak.iter().chain(&held_out).map(|p| p.id.clone()).collect(),
        train_weak,
        held_out,
    };
    let exp = c.experiment();
    let table = modality_ablation(&prep, &exp, &c.arms()?)?;
    let mut written = vec![ctx.write_text("ablation.csv", &table.to_csv())?];
    if c.ablation.data_ablation {
        let data = data_ablation(&prep, &exp)?;
        written.push(ctx.write_text("data_ablation.csv", &data.to_csv())?);
    }
    Ok(written)
}

fn csv_to_markdown(csv: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        if i == 0 {
            let _ = writeln!(out, "|{}", "---|".repeat(cells.len()));
        }
    }
    out
}

fn report(ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let prompts: Vec<Prompt> = ctx.read("prompts.jsonl")?;
    let samples: Vec<GenerationSample> = ctx.read("samples.jsonl")?;
    let rewards: Vec<RewardRecord> = ctx.read("rewards.jsonl")?;
    let train_weak: Vec<Prompt> = ctx.read("weak_prompts.jsonl")?;
    let held_out: Vec<Prompt> = ctx.read("held_out.jsonl")?;
    let reward = &ctx.l.config.rwr.reward_name;
    let category: HashMap<&str, Category> = prompts.iter().map(|p| (p.id.as_str(), p.category)).collect();

    let mut md = String::from("# rwrforge report\n\n## Corpus\n\n");
    md.push_str("| category | seed prompts | expanded prompts | samples | switch rate | mean raw reward |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for c in Category::WEAKNESSES {
        let of = |o: Origin| prompts.iter().filter(|p| p.category == c && p.origin == o).count();
        let ss: Vec<&GenerationSample> = samples.iter().filter(|s| category.get(s.prompt_id.as_str()) == Some(&c)).collect();
        let rs: Vec<f64> = rewards
            .iter()
            .filter(|r| &r.reward_name == reward && category.get(r.prompt_id.as_str()) == Some(&c))
            .map(|r| r.raw)
            .collect();
        let rate = if ss.is_empty() { 0.0 } else { ss.iter().filter(|s| s.switch_emitted).count() as f64 / ss.len() as f64 };
        let mean = if rs.is_empty() { 0.0 } else { rs.iter().sum::<f64>() / rs.len() as f64 };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {rate:.4} | {mean:.4} |",
            c.heading(),
            of(Origin::Seed),
            of(Origin::Expanded),
            ss.len()
        );
    }
    let _ = write!(
        md,
        "\n## Curation\n\n{} weak prompts: {} for training, {} held out for evaluation.\n\n",
        train_weak.len() + held_out.len(),
        train_weak.len(),
        held_out.len()
    );
    if let Ok(sel) = fs::read_to_string(ctx.path("selection.csv")) {
        md.push_str(&csv_to_markdown(&sel));
    }
    md.push_str("\n## Held-out evaluation\n\n");
    md.push_str(&csv_to_markdown(&read_text(ctx, "eval.csv")?));
    md.push_str("\n## Weighting ablation (mean held-out reward)\n\n");
    md.push_str(&csv_to_markdown(&read_text(ctx, "ablation.csv")?));
    if let Ok(data) = fs::read_to_string(ctx.path("data_ablation.csv")) {
        md.push_str("\n## Prompt selection ablation\n\n");
        md.push_str(&csv_to_markdown(&data));
    }
    let path = report_path(ctx.l);
    Ok(vec![ctx.write_text(&path, &md)?])
}

fn read_text(ctx: &Ctx, f: &str) -> Result<String, CliError> {
    let p = ctx.path(f);
    fs::read_to_string(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
}
