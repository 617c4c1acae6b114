//! Dataset assembly: training examples grouped as one positive plus three
//! negatives, dataset mixes, batch packing, and the relevance/loss arithmetic
//! used by the external trainer.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::StageContext;
use crate::corpus::{
    DatasetManifest, InvariantError, JsonlError, ObservedCounts, QueryKind, QueryRecord, Record, SourceCount,
    TripletRecord, NEGATIVES_PER_TRIPLET,
};
use crate::gateway::ChatRequest;
use crate::generation::{parse_rephrase, rephrase_request, select_for_rephrasing, StageError};
use crate::stats::StageStats;

/// Groups per batch: 8 positives and 24 negatives make 32 examples.
pub const DEFAULT_BATCH_GROUPS: usize = 8;
pub const GROUP_SIZE: usize = 1 + NEGATIVES_PER_TRIPLET;
pub const DEFAULT_POSITIVE_WEIGHT: f64 = 3.0;
pub const DEFAULT_NEGATIVE_WEIGHT: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("group {group_id}: {message}")]
    Group { group_id: String, message: String },
    #[error("source {source_name}: requested {requested} positives, only {available} available")]
    InsufficientSource {
        source_name: String,
        requested: u64,
        available: u64,
    },
    #[error("logits must be finite, got ({l_true}, {l_false})")]
    NonFinite { l_true: f64, l_false: f64 },
    #[error("example {index}: probability {value} outside [0, 1]")]
    Probability { index: usize, value: f64 },
    #[error("expected {expected} probabilities, got {got}")]
    Length { expected: usize, got: usize },
    #[error("loss weights must be finite and positive")]
    Weights,
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error("recipe: {0}")]
    Recipe(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

/// One labeled (page, query) pair for the trainer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub page_id: String,
    pub query_text: String,
    pub label: Label,
    pub group_id: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
}

impl Record for TrainingExample {
    fn check(&self) -> Result<(), InvariantError> {
        for (field, value) in [
            ("page_id", &self.page_id),
            ("query_text", &self.query_text),
            ("group_id", &self.group_id),
        ] {
            if value.trim().is_empty() {
                return Err(InvariantError::new(field, "must be non-empty"));
            }
        }
        Ok(())
    }

    fn label(&self) -> String {
        format!("{}:{}", self.group_id, self.page_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingBatch {
    pub examples: Vec<TrainingExample>,
    pub groups: Vec<String>,
}

impl TrainingBatch {
    pub fn positives(&self) -> usize {
        self.examples.iter().filter(|e| e.label == Label::Positive).count()
    }

    pub fn negatives(&self) -> usize {
        self.examples.len() - self.positives()
    }
}

impl Record for TrainingBatch {
    fn check(&self) -> Result<(), InvariantError> {
        let groups = self.groups.len();
        if self.examples.len() != groups * GROUP_SIZE {
            return Err(InvariantError::new(
                "examples",
                format!("expected {}, found {}", groups * GROUP_SIZE, self.examples.len()),
            ));
        }
        if self.positives() != groups {
            return Err(InvariantError::new(
                "examples",
                format!("expected {groups} positives, found {}", self.positives()),
            ));
        }
        for (i, group_id) in self.groups.iter().enumerate() {
            let members = &self.examples[i * GROUP_SIZE..(i + 1) * GROUP_SIZE];
            if members.iter().any(|e| &e.group_id != group_id) {
                return Err(InvariantError::new(
                    "groups",
                    format!("members of {group_id} are not co-located"),
                ));
            }
            if members[0].label != Label::Positive {
                return Err(InvariantError::new(
                    "groups",
                    format!("{group_id} does not lead with its positive"),
                ));
            }
        }
        Ok(())
    }

    fn label(&self) -> String {
        self.groups.first().cloned().unwrap_or_default()
    }
}

/// Splits examples into groups (first-appearance order), each reordered to
/// lead with its positive. Every group must be exactly 1 positive + 3
/// negatives.
pub fn group_examples(examples: &[TrainingExample]) -> Result<Vec<Vec<TrainingExample>>, ForgeError> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_id: HashMap<&str, Vec<&TrainingExample>> = HashMap::new();
    for e in examples {
        by_id
            .entry(e.group_id.as_str())
            .or_insert_with(|| {
                order.push(e.group_id.as_str());
                Vec::new()
            })
            .push(e);
    }
    order
        .into_iter()
        .map(|id| {
            let members = &by_id[id];
            let positives = members.iter().filter(|e| e.label == Label::Positive).count();
            if members.len() != GROUP_SIZE || positives != 1 {
                return Err(ForgeError::Group {
                    group_id: id.to_string(),
                    message: format!(
                        "expected 1 positive + {NEGATIVES_PER_TRIPLET} negatives, found {positives} + {}",
                        members.len() - positives
                    ),
                });
            }
            let mut group: Vec<TrainingExample> = members.iter().map(|e| (*e).clone()).collect();
            group.sort_by_key(|e| e.label != Label::Positive);
            Ok(group)
        })
        .collect()
}

/// One row of the document-level hard negative interchange file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HnDocRow {
    #[serde(default)]
    pub query_id: Option<String>,
    pub query: String,
    pub positive: HnDocPage,
    pub negatives: Vec<HnDocPage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HnDocPage {
    pub page_id: String,
    #[serde(default)]
    pub image_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HnDocIngest {
    pub examples: Vec<TrainingExample>,
    pub groups: usize,
    pub skipped: usize,
}

/// Reads document-level hard negatives: one query, one positive page and
/// three negative pages per row. Each row becomes a group of four examples
/// that share the query and differ in page. Rows without exactly three
/// negatives are skipped; `limit` caps the number of groups taken.
pub fn ingest_hndoc(path: &Path, limit: Option<usize>, source: &str) -> Result<HnDocIngest, ForgeError> {
    let file = File::open(path).map_err(|e| JsonlError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = HnDocIngest {
        examples: Vec::new(),
        groups: 0,
        skipped: 0,
    };
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        if limit.is_some_and(|l| out.groups >= l) {
            break;
        }
        let line = line.map_err(|e| JsonlError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: HnDocRow = serde_json::from_str(&line).map_err(|e| JsonlError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            source: e,
        })?;
        if row.negatives.len() != NEGATIVES_PER_TRIPLET || row.query.trim().is_empty() {
            tracing::warn!(
                line = idx + 1,
                negatives = row.negatives.len(),
                "skipping hard negative row"
            );
            out.skipped += 1;
            continue;
        }
        let group_id = row.query_id.clone().unwrap_or_else(|| format!("{source}/{}", idx + 1));
        let example = |page: &HnDocPage, label| TrainingExample {
            page_id: page.page_id.clone(),
            query_text: row.query.clone(),
            label,
            group_id: group_id.clone(),
            source: source.to_string(),
            query_id: Some(group_id.clone()),
            image_path: page.image_path.clone(),
        };
        out.examples.push(example(&row.positive, Label::Positive));
        for neg in &row.negatives {
            out.examples.push(example(neg, Label::Negative));
        }
        out.groups += 1;
    }
    if out.skipped > 0 {
        tracing::warn!(
            skipped = out.skipped,
            "rows without exactly three negatives were skipped"
        );
    }
    Ok(out)
}

/// Flattens triplets into examples: the positive first, then its negatives,
/// all sharing the page and a group id built from page and positive id.
pub fn triplets_to_examples(triplets: &[TripletRecord], source: &str) -> Vec<TrainingExample> {
    let mut out = Vec::with_capacity(triplets.len() * GROUP_SIZE);
    for t in triplets {
        let group_id = format!("{}|{}", t.page_id, t.positive.query_id);
        let example = |q: &QueryRecord, label| TrainingExample {
            page_id: t.page_id.clone(),
            query_text: q.text.clone(),
            label,
            group_id: group_id.clone(),
            source: source.to_string(),
            query_id: Some(q.query_id.clone()),
            image_path: None,
        };
        out.push(example(&t.positive, Label::Positive));
        out.extend(t.negatives.iter().map(|n| example(n, Label::Negative)));
    }
    out
}

/// Fills `image_path` from a page lookup where missing.
pub fn attach_image_paths(examples: &mut [TrainingExample], pages: &HashMap<String, PathBuf>) {
    for e in examples.iter_mut().filter(|e| e.image_path.is_none()) {
        e.image_path = pages.get(&e.page_id).cloned();
    }
}

/// A source available to [`compose_mix`].
#[derive(Debug, Clone)]
pub struct MixSource {
    pub name: String,
    pub examples: Vec<TrainingExample>,
    pub positives: u64,
}

#[derive(Debug, Clone)]
pub struct Mix {
    pub manifest: DatasetManifest,
    pub examples: Vec<TrainingExample>,
}

/// Positive and total example counts, for checking against a manifest.
pub fn example_counts(examples: &[TrainingExample]) -> ObservedCounts {
    ObservedCounts {
        positives: examples.iter().filter(|e| e.label == Label::Positive).count() as u64,
        examples: examples.len() as u64,
    }
}

/// Stable 64-bit FNV-1a, used to derive per-source shuffle seeds.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn shuffled_groups(examples: &[TrainingExample], seed: u64) -> Result<Vec<Vec<TrainingExample>>, ForgeError> {
    let mut groups = group_examples(examples)?;
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(groups)
}

/// Takes the requested number of groups from each source after a seeded
/// shuffle and emits the concatenation with its manifest.
pub fn compose_mix(name: &str, sources: &[MixSource], seed: u64, rephrase_fraction: f64) -> Result<Mix, ForgeError> {
    let mut examples = Vec::new();
    let mut counts = Vec::with_capacity(sources.len());
    for source in sources {
        let groups = shuffled_groups(&source.examples, seed ^ fnv1a(&source.name))?;
        if (groups.len() as u64) < source.positives {
            return Err(ForgeError::InsufficientSource {
                source_name: source.name.clone(),
                requested: source.positives,
                available: groups.len() as u64,
            });
        }
        for group in groups.into_iter().take(source.positives as usize) {
            examples.extend(group);
        }
        counts.push(SourceCount {
            name: source.name.clone(),
            positives: source.positives,
        });
    }
    Ok(Mix {
        manifest: DatasetManifest::from_sources(name, counts, rephrase_fraction, seed),
        examples,
    })
}

/// On-disk layout of a recipe source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFormat {
    /// Document-level hard negatives, see [`ingest_hndoc`].
    Hndoc,
    /// `TripletRecord` JSONL.
    Triplets,
    /// `TrainingExample` JSONL.
    Examples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeSource {
    pub name: String,
    pub format: SourceFormat,
    pub path: PathBuf,
    pub positives: u64,
    /// Rephrase a fraction of this source's positives.
    #[serde(default)]
    pub rephrase: bool,
    /// Rows read from an `hndoc` file; all when unset.
    #[serde(default)]
    pub limit: Option<usize>,
}

/// A named dataset mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub name: String,
    pub sources: Vec<RecipeSource>,
    /// Overrides the configured rephrase fraction.
    #[serde(default)]
    pub rephrase_fraction: Option<f64>,
}

/// Reads one recipe source; relative paths resolve against `base_dir`.
pub fn load_source(source: &RecipeSource, base_dir: &Path) -> Result<MixSource, ForgeError> {
    let path = base_dir.join(&source.path);
    let examples = match source.format {
        SourceFormat::Hndoc => ingest_hndoc(&path, source.limit, &source.name)?.examples,
        SourceFormat::Triplets => {
            let triplets: Vec<TripletRecord> = crate::corpus::read_jsonl(&path)?;
            triplets_to_examples(&triplets, &source.name)
        }
        SourceFormat::Examples => {
            let mut examples: Vec<TrainingExample> = crate::corpus::read_jsonl(&path)?;
            for e in &mut examples {
                e.source = source.name.clone();
            }
            examples
        }
    };
    Ok(MixSource {
        name: source.name.clone(),
        examples,
        positives: source.positives,
    })
}

#[derive(Debug, Clone)]
pub struct BuiltDataset {
    pub manifest: DatasetManifest,
    pub examples: Vec<TrainingExample>,
    /// One record per rephrasing attempt.
    pub rephrased: Vec<QueryRecord>,
}

/// Loads every source, composes the mix, and rephrases the selected
/// fraction of positives in sources marked `rephrase`.
pub fn build_dataset(
    recipe: &Recipe,
    base_dir: &Path,
    ctx: Option<&StageContext<'_>>,
    default_fraction: f64,
    seed: u64,
    stats: &mut StageStats,
) -> Result<BuiltDataset, ForgeError> {
    let fraction = recipe.rephrase_fraction.unwrap_or(default_fraction);
    if !(0.0..=1.0).contains(&fraction) {
        return Err(ForgeError::Recipe(format!(
            "rephrase_fraction {fraction} outside [0, 1]"
        )));
    }
    let rephrasing = recipe.sources.iter().any(|s| s.rephrase) && fraction > 0.0;
    let sources = recipe
        .sources
        .iter()
        .map(|s| load_source(s, base_dir))
        .collect::<Result<Vec<_>, _>>()?;
    let mut mix = compose_mix(&recipe.name, &sources, seed, if rephrasing { fraction } else { 0.0 })?;
    let mut rephrased = Vec::new();
    if rephrasing {
        let ctx = ctx.ok_or_else(|| ForgeError::Recipe("rephrasing needs a gateway".into()))?;
        let mut out = Vec::with_capacity(mix.examples.len());
        let mut rest = mix.examples.as_slice();
        for source in &recipe.sources {
            let n = source.positives as usize * GROUP_SIZE;
            let (part, tail) = rest.split_at(n);
            rest = tail;
            if source.rephrase {
                let (examples, records) = rephrase_examples(ctx, part, fraction, seed ^ fnv1a(&source.name), stats)?;
                out.extend(examples);
                rephrased.extend(records);
            } else {
                out.extend_from_slice(part);
            }
        }
        mix.examples = out;
    }
    Ok(BuiltDataset {
        manifest: mix.manifest,
        examples: mix.examples,
        rephrased,
    })
}

#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub batches: Vec<TrainingBatch>,
    pub dropped_groups: usize,
}

/// Shuffles groups by seed and packs `batch_groups` groups per batch, members
/// adjacent and positive first. A trailing partial batch is dropped.
pub fn make_batches(examples: &[TrainingExample], batch_groups: usize, seed: u64) -> Result<BatchPlan, ForgeError> {
    let batch_groups = batch_groups.max(1);
    let groups = shuffled_groups(examples, seed)?;
    let full = groups.len() / batch_groups * batch_groups;
    let dropped_groups = groups.len() - full;
    if dropped_groups > 0 {
        tracing::warn!(dropped_groups, "trailing groups do not fill a batch and were dropped");
    }
    let batches = groups[..full]
        .chunks(batch_groups)
        .map(|chunk| TrainingBatch {
            groups: chunk.iter().map(|g| g[0].group_id.clone()).collect(),
            examples: chunk.iter().flatten().cloned().collect(),
        })
        .collect();
    Ok(BatchPlan {
        batches,
        dropped_groups,
    })
}

/// Logits of the "True" and "False" tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenLogits {
    pub l_true: f64,
    pub l_false: f64,
}

/// Two-way softmax probability of "True", `1 / (1 + exp(l_false - l_true))`.
pub fn relevance_score(logits: TokenLogits) -> Result<f64, ForgeError> {
    let TokenLogits { l_true, l_false } = logits;
    if !l_true.is_finite() || !l_false.is_finite() {
        return Err(ForgeError::NonFinite { l_true, l_false });
    }
    Ok(1.0 / (1.0 + (l_false - l_true).exp()))
}

/// Numerator and denominator of the weighted cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    /// Sum of `-w * ln(p_label)`.
    pub weighted_sum: f64,
    pub weight_total: f64,
}

impl LossParts {
    pub fn mean(&self) -> f64 {
        self.weighted_sum / self.weight_total
    }
}

/// Weighted cross-entropy terms. `p_label` is `p` for positives and `1 - p`
/// for negatives; a label probability of zero gives an infinite term.
pub fn weighted_loss_parts(labels: &[Label], probs: &[f64], w_pos: f64, w_neg: f64) -> Result<LossParts, ForgeError> {
    if labels.len() != probs.len() {
        return Err(ForgeError::Length {
            expected: labels.len(),
            got: probs.len(),
        });
    }
    if !(w_pos.is_finite() && w_neg.is_finite() && w_pos > 0.0 && w_neg > 0.0) {
        return Err(ForgeError::Weights);
    }
    let mut parts = LossParts {
        weighted_sum: 0.0,
        weight_total: 0.0,
    };
    for (index, (&label, &p)) in labels.iter().zip(probs).enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(ForgeError::Probability { index, value: p });
        }
        let (w, p_label) = match label {
            Label::Positive => (w_pos, p),
            Label::Negative => (w_neg, 1.0 - p),
        };
        parts.weighted_sum += -w * p_label.ln();
        parts.weight_total += w;
    }
    // -0.0 from perfect predictions
    parts.weighted_sum = parts.weighted_sum.max(0.0);
    Ok(parts)
}

/// Mean weighted cross-entropy of a batch (sum of weighted terms divided by
/// the sum of weights).
pub fn weighted_batch_loss(batch: &TrainingBatch, probs: &[f64], w_pos: f64, w_neg: f64) -> Result<f64, ForgeError> {
    let labels: Vec<Label> = batch.examples.iter().map(|e| e.label).collect();
    Ok(weighted_loss_parts(&labels, probs, w_pos, w_neg)?.mean())
}

/// Rephrases a deterministic fraction of group positives.
///
/// The positive's query text is replaced on every example in its group that
/// carries that same text: the positive alone for generated-negative groups,
/// all four examples for document-level groups where the query is shared.
/// Returns the updated examples and one record per rephrasing attempt
/// (rephrased records, or originals flagged as no-op or failed).
pub fn rephrase_examples(
    ctx: &StageContext<'_>,
    examples: &[TrainingExample],
    fraction: f64,
    seed: u64,
    stats: &mut StageStats,
) -> Result<(Vec<TrainingExample>, Vec<QueryRecord>), ForgeError> {
    let mut groups = group_examples(examples)?;
    let positives: Vec<QueryRecord> = groups
        .iter()
        .map(|g| {
            let p = &g[0];
            QueryRecord::imported(
                p.query_id.clone().unwrap_or_else(|| p.group_id.clone()),
                &p.page_id,
                &p.query_text,
            )
        })
        .collect();
    let index_of: HashMap<&str, usize> = positives
        .iter()
        .enumerate()
        .map(|(i, q)| (q.query_id.as_str(), i))
        .collect();
    let selected = select_for_rephrasing(&positives, fraction, seed);
    let requests: Vec<ChatRequest> = selected
        .iter()
        .map(|q| rephrase_request(ctx, q))
        .collect::<Result<_, _>>()?;
    let results = ctx.gateway.complete_many(&requests);
    let mut records = Vec::with_capacity(selected.len());
    for (original, result) in selected.iter().zip(results) {
        let record = parse_rephrase(original, result, stats);
        if record.kind == QueryKind::RephrasedPositive {
            let group = &mut groups[index_of[original.query_id.as_str()]];
            for e in group.iter_mut().filter(|e| e.query_text == original.text) {
                e.query_text = record.text.clone();
                if e.label == Label::Positive {
                    e.query_id = Some(record.query_id.clone());
                }
            }
        }
        records.push(record);
    }
    Ok((groups.into_iter().flatten().collect(), records))
}
