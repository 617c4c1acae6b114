//! Canonical records for pages, queries, triplets and dataset manifests, plus
//! their JSONL persistence.
//!
//! Every record type written by this crate goes through [`write_jsonl`] and
//! comes back through [`read_jsonl`], which re-checks the record's invariants
//! line by line. Field order in the emitted JSON follows struct declaration
//! order, so files are byte-stable for a given input.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Collapses every run of whitespace to a single space and trims both ends.
///
/// Query distinctness everywhere in the crate is exact string equality on
/// this normalized form.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// A broken record invariant, with a short path to the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {message}")]
pub struct InvariantError {
    pub field: String,
    pub message: String,
}

impl InvariantError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed JSON: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: record {record}: {error}")]
    Invariant {
        path: PathBuf,
        line: usize,
        record: String,
        error: InvariantError,
    },
    #[error("record {index} ({record}) rejected before writing: {error}")]
    Rejected {
        index: usize,
        record: String,
        error: InvariantError,
    },
    #[error("record {index} could not be serialized: {source}")]
    Serialize {
        index: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// A value that can be persisted as one JSONL line.
pub trait Record: Serialize + DeserializeOwned {
    /// Checks the record's own invariants.
    fn check(&self) -> Result<(), InvariantError>;

    /// Short identifier used in error messages.
    fn label(&self) -> String;
}

/// A document page image and its identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageRecord {
    pub page_id: String,
    pub image_path: PathBuf,
    pub corpus: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Record for PageRecord {
    fn check(&self) -> Result<(), InvariantError> {
        if self.page_id.trim().is_empty() {
            return Err(InvariantError::new("page_id", "must be non-empty"));
        }
        if self.image_path.as_os_str().is_empty() {
            return Err(InvariantError::new("image_path", "must be non-empty"));
        }
        Ok(())
    }

    fn label(&self) -> String {
        self.page_id.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

/// How a query came to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryKind {
    GeneratedPositive,
    GenericNegative,
    FinanceNegative,
    RephrasedPositive,
    Imported,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verification {
    Unverified,
    Kept,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptVariant {
    A,
    B,
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptVariant::A => f.write_str("A"),
            PromptVariant::B => f.write_str("B"),
        }
    }
}

/// The single attribute a finance hard negative changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinanceProperty {
    Year,
    CompanyName,
    NumericalValue,
    FinancialMetric,
    SubjectMetric,
    BusinessSegment,
}

impl FinanceProperty {
    pub const ALL: [FinanceProperty; 6] = [
        FinanceProperty::Year,
        FinanceProperty::CompanyName,
        FinanceProperty::NumericalValue,
        FinanceProperty::FinancialMetric,
        FinanceProperty::SubjectMetric,
        FinanceProperty::BusinessSegment,
    ];

    /// Serialized name, e.g. `company_name`.
    pub fn as_str(self) -> &'static str {
        match self {
            FinanceProperty::Year => "year",
            FinanceProperty::CompanyName => "company_name",
            FinanceProperty::NumericalValue => "numerical_value",
            FinanceProperty::FinancialMetric => "financial_metric",
            FinanceProperty::SubjectMetric => "subject_metric",
            FinanceProperty::BusinessSegment => "business_segment",
        }
    }

    /// Text bound to `{property_desc}` in the finance negative prompt.
    pub fn description(self) -> &'static str {
        match self {
            FinanceProperty::Year => "the year (e.g., 2022 -> 2024)",
            FinanceProperty::CompanyName => "the company name (e.g., Apple -> IBM)",
            FinanceProperty::NumericalValue => "a numerical value (e.g., a price, an amount, a percentage)",
            FinanceProperty::FinancialMetric => "the financial metric (e.g., revenue, sales, acquisitions)",
            FinanceProperty::SubjectMetric => "the subject metric (e.g., dividends, stocks, options)",
            FinanceProperty::BusinessSegment => "the business segment (e.g., cloud, software, manufacturing)",
        }
    }
}

impl fmt::Display for FinanceProperty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FinanceProperty {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FinanceProperty::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown finance property `{s}`"))
    }
}

/// One verifier answer recorded on a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictEntry {
    pub variant: PromptVariant,
    pub answerable: bool,
}

/// A query anchored to a page.
///
/// Imported queries (existing query/page pairs) enter as kept without
/// verdicts; every other kept query carries verdicts from both prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub page_id: String,
    pub text: String,
    pub polarity: Polarity,
    pub kind: QueryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub property: Option<FinanceProperty>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_query_id: Option<String>,
    pub verification: Verification,
    #[serde(default)]
    pub verdicts: Vec<VerdictEntry>,
    /// Free-form markers such as `rephrase-noop` or `ambiguous`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl QueryRecord {
    /// A fresh, unverified query with no lineage.
    pub fn new(
        query_id: impl Into<String>,
        page_id: impl Into<String>,
        text: impl Into<String>,
        polarity: Polarity,
        kind: QueryKind,
    ) -> Self {
        Self {
            query_id: query_id.into(),
            page_id: page_id.into(),
            text: text.into(),
            polarity,
            kind,
            property: None,
            parent_query_id: None,
            verification: Verification::Unverified,
            verdicts: Vec::new(),
            flags: Vec::new(),
        }
    }

    /// An existing query/page pair, trusted as a kept positive.
    pub fn imported(query_id: impl Into<String>, page_id: impl Into<String>, text: impl Into<String>) -> Self {
        let mut q = Self::new(query_id, page_id, text, Polarity::Positive, QueryKind::Imported);
        q.verification = Verification::Kept;
        q
    }

    pub fn normalized_text(&self) -> String {
        normalize_text(&self.text)
    }

    pub fn verdict(&self, variant: PromptVariant) -> Option<bool> {
        self.verdicts
            .iter()
            .find(|v| v.variant == variant)
            .map(|v| v.answerable)
    }

    /// Records (or replaces) the verdict for one prompt variant.
    pub fn set_verdict(&mut self, variant: PromptVariant, answerable: bool) {
        match self.verdicts.iter_mut().find(|v| v.variant == variant) {
            Some(v) => v.answerable = answerable,
            None => {
                self.verdicts.push(VerdictEntry { variant, answerable });
                self.verdicts.sort_by_key(|v| v.variant);
            }
        }
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }

    pub fn add_flag(&mut self, flag: &str) {
        if !self.has_flag(flag) {
            self.flags.push(flag.to_string());
        }
    }
}

impl Record for QueryRecord {
    fn check(&self) -> Result<(), InvariantError> {
        if self.query_id.is_empty() {
            return Err(InvariantError::new("query_id", "must be non-empty"));
        }
        if self.text.trim().is_empty() {
            return Err(InvariantError::new("text", "must be non-empty"));
        }
        match self.kind {
            QueryKind::GenericNegative | QueryKind::FinanceNegative => {
                if self.polarity != Polarity::Negative {
                    return Err(InvariantError::new(
                        "polarity",
                        "negative kinds require polarity negative",
                    ));
                }
                if self.parent_query_id.is_none() {
                    return Err(InvariantError::new(
                        "parent_query_id",
                        "negative kinds require a parent query",
                    ));
                }
            }
            QueryKind::RephrasedPositive => {
                if self.polarity != Polarity::Positive {
                    return Err(InvariantError::new(
                        "polarity",
                        "rephrased-positive requires polarity positive",
                    ));
                }
                if self.parent_query_id.is_none() {
                    return Err(InvariantError::new(
                        "parent_query_id",
                        "rephrased-positive requires a parent query",
                    ));
                }
            }
            QueryKind::GeneratedPositive | QueryKind::Imported => {}
        }
        let is_finance = self.kind == QueryKind::FinanceNegative;
        if is_finance != self.property.is_some() {
            return Err(InvariantError::new(
                "property",
                "set if and only if kind is finance-negative",
            ));
        }
        if self.verification == Verification::Kept
            && self.kind != QueryKind::Imported
            && (self.verdict(PromptVariant::A).is_none() || self.verdict(PromptVariant::B).is_none())
        {
            return Err(InvariantError::new(
                "verdicts",
                "kept queries need verdicts from both prompt variants",
            ));
        }
        Ok(())
    }

    fn label(&self) -> String {
        self.query_id.clone()
    }
}

/// One page, one kept positive, exactly three kept hard negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub page_id: String,
    pub positive: QueryRecord,
    pub negatives: Vec<QueryRecord>,
}

pub const NEGATIVES_PER_TRIPLET: usize = 3;

impl Record for TripletRecord {
    fn check(&self) -> Result<(), InvariantError> {
        if self.negatives.len() != NEGATIVES_PER_TRIPLET {
            return Err(InvariantError::new(
                "negatives",
                format!("expected {NEGATIVES_PER_TRIPLET}, found {}", self.negatives.len()),
            ));
        }
        let pos = &self.positive;
        pos.check()
            .map_err(|e| InvariantError::new(format!("positive.{}", e.field), e.message))?;
        if pos.polarity != Polarity::Positive {
            return Err(InvariantError::new("positive.polarity", "expected positive"));
        }
        if pos.verification != Verification::Kept {
            return Err(InvariantError::new("positive.verification", "expected kept"));
        }
        if pos.page_id != self.page_id {
            return Err(InvariantError::new(
                "positive.page_id",
                format!("expected {}, found {}", self.page_id, pos.page_id),
            ));
        }
        let mut seen = HashSet::new();
        seen.insert(pos.normalized_text());
        for (i, neg) in self.negatives.iter().enumerate() {
            let field = |f: &str| format!("negatives[{i}].{f}");
            neg.check()
                .map_err(|e| InvariantError::new(field(&e.field), e.message))?;
            if neg.polarity != Polarity::Negative {
                return Err(InvariantError::new(field("polarity"), "expected negative"));
            }
            if neg.verification != Verification::Kept {
                return Err(InvariantError::new(field("verification"), "expected kept"));
            }
            if neg.page_id != self.page_id {
                return Err(InvariantError::new(
                    field("page_id"),
                    format!("expected {}, found {}", self.page_id, neg.page_id),
                ));
            }
            if neg.parent_query_id.as_deref() != Some(pos.query_id.as_str()) {
                return Err(InvariantError::new(
                    field("parent_query_id"),
                    format!("expected {}", pos.query_id),
                ));
            }
            if !seen.insert(neg.normalized_text()) {
                return Err(InvariantError::new(
                    field("text"),
                    "duplicates the positive or another negative",
                ));
            }
        }
        Ok(())
    }

    fn label(&self) -> String {
        format!("{}/{}", self.page_id, self.positive.query_id)
    }
}

/// Declared composition of an emitted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub sources: Vec<SourceCount>,
    pub total_positives: u64,
    pub total_examples: u64,
    pub rephrase_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCount {
    pub name: String,
    pub positives: u64,
}

/// Examples per positive: the positive itself plus its three negatives.
pub const EXAMPLES_PER_POSITIVE: u64 = 1 + NEGATIVES_PER_TRIPLET as u64;

impl DatasetManifest {
    /// Builds a manifest whose totals follow from the per-source counts.
    pub fn from_sources(name: impl Into<String>, sources: Vec<SourceCount>, rephrase_fraction: f64, seed: u64) -> Self {
        let total_positives = sources.iter().map(|s| s.positives).sum();
        Self {
            name: name.into(),
            sources,
            total_positives,
            total_examples: total_positives * EXAMPLES_PER_POSITIVE,
            rephrase_fraction,
            seed,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), JsonlError> {
        let mut body =
            serde_json::to_string_pretty(self).map_err(|source| JsonlError::Serialize { index: 0, source })?;
        body.push('\n');
        fs::write(path, body).map_err(|source| JsonlError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, JsonlError> {
        let body = fs::read_to_string(path).map_err(|source| JsonlError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&body).map_err(|source| JsonlError::Parse {
            path: path.to_path_buf(),
            line: source.line(),
            source,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub field: String,
    pub declared: String,
    pub observed: String,
}

/// Result of [`validate_manifest`]; empty means consistent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestReport {
    pub mismatches: Vec<Mismatch>,
}

impl ManifestReport {
    pub fn is_consistent(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Observed positive/example counts of a dataset on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservedCounts {
    pub positives: u64,
    pub examples: u64,
}

/// Compares a manifest's declared counts against triplet records.
pub fn validate_manifest(manifest: &DatasetManifest, records: &[TripletRecord]) -> ManifestReport {
    let positives = records.len() as u64;
    let examples = records.iter().map(|t| 1 + t.negatives.len() as u64).sum();
    validate_counts(manifest, ObservedCounts { positives, examples })
}

/// Compares a manifest's declared counts against arbitrary observed counts.
pub fn validate_counts(manifest: &DatasetManifest, observed: ObservedCounts) -> ManifestReport {
    let mut mismatches = Vec::new();
    let mut push = |field: &str, declared: String, observed: String| {
        mismatches.push(Mismatch {
            field: field.to_string(),
            declared,
            observed,
        })
    };
    if manifest.total_examples != EXAMPLES_PER_POSITIVE * manifest.total_positives {
        push(
            "total_examples",
            manifest.total_examples.to_string(),
            format!(
                "{EXAMPLES_PER_POSITIVE} x total_positives = {}",
                EXAMPLES_PER_POSITIVE * manifest.total_positives
            ),
        );
    }
    if manifest.total_positives != observed.positives {
        push(
            "total_positives",
            manifest.total_positives.to_string(),
            observed.positives.to_string(),
        );
    }
    if manifest.total_examples != observed.examples {
        push(
            "total_examples (records)",
            manifest.total_examples.to_string(),
            observed.examples.to_string(),
        );
    }
    if !manifest.sources.is_empty() {
        let declared: u64 = manifest.sources.iter().map(|s| s.positives).sum();
        if declared != manifest.total_positives {
            push(
                "sources",
                format!("sum {declared}"),
                format!("total_positives {}", manifest.total_positives),
            );
        }
    }
    if !(0.0..=1.0).contains(&manifest.rephrase_fraction) {
        push(
            "rephrase_fraction",
            manifest.rephrase_fraction.to_string(),
            "a value in [0, 1]".to_string(),
        );
    }
    ManifestReport { mismatches }
}

/// Writes records as JSONL, returning the number of lines written.
///
/// Every record is checked and serialized before the file is touched. The
/// data goes to a sibling temporary file that is renamed into place, so an
/// I/O failure never leaves a partial file at `path`.
pub fn write_jsonl<T: Record>(records: &[T], path: &Path) -> Result<usize, JsonlError> {
    let mut lines = Vec::with_capacity(records.len());
    for (index, record) in records.iter().enumerate() {
        record.check().map_err(|error| JsonlError::Rejected {
            index,
            record: record.label(),
            error,
        })?;
        let line = serde_json::to_string(record).map_err(|source| JsonlError::Serialize { index, source })?;
        lines.push(line);
    }

    let io_err = |source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let tmp = path.with_file_name(format!(".{file_name}.partial"));
    let result = (|| {
        let mut out = BufWriter::new(File::create(&tmp)?);
        for line in &lines {
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")?;
        }
        out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(io_err(e));
    }
    Ok(lines.len())
}

/// Reads and invariant-checks a JSONL file. Blank lines are skipped.
pub fn read_jsonl<T: Record>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let file = File::open(path).map_err(|source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| JsonlError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|source| JsonlError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            source,
        })?;
        record.check().map_err(|error| JsonlError::Invariant {
            path: path.to_path_buf(),
            line: line_no,
            record: record.label(),
            error,
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Reads a page corpus and rejects duplicate page ids.
pub fn read_pages(path: &Path) -> Result<Vec<PageRecord>, JsonlError> {
    let pages: Vec<PageRecord> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for (i, page) in pages.iter().enumerate() {
        if !seen.insert(page.page_id.as_str()) {
            return Err(JsonlError::Invariant {
                path: path.to_path_buf(),
                line: i + 1,
                record: page.page_id.clone(),
                error: InvariantError::new("page_id", "duplicate within corpus file"),
            });
        }
    }
    Ok(pages)
}

/// Checks that every kept negative's parent resolves to a kept positive on the
/// same page. Returns the ids of negatives that fail.
pub fn unresolved_lineage(queries: &[QueryRecord]) -> Vec<String> {
    let kept_positives: std::collections::HashMap<&str, &str> = queries
        .iter()
        .filter(|q| q.polarity == Polarity::Positive && q.verification == Verification::Kept)
        .map(|q| (q.query_id.as_str(), q.page_id.as_str()))
        .collect();
    queries
        .iter()
        .filter(|q| q.polarity == Polarity::Negative && q.verification == Verification::Kept)
        .filter(|q| {
            let parent = q.parent_query_id.as_deref().unwrap_or("");
            kept_positives.get(parent) != Some(&q.page_id.as_str())
        })
        .map(|q| q.query_id.clone())
        .collect()
}
