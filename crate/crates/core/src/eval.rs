//! Reranking evaluation: TREC runs and qrels, top-k reranking by model
//! scores, NDCG@k and Recall@k, and baseline-vs-reranked delta reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::StageContext;
use crate::corpus::PageRecord;
use crate::forge::{relevance_score, TokenLogits};
use crate::gateway::{ChatRequest, Part};
use crate::generation::page_image;
use crate::prompts::TemplateId;

pub const DEFAULT_RERANK_K: usize = 20;
pub const RERANK_SUFFIX: &str = "+rerank";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate candidate ({query_id}, {page_id})")]
    Duplicate { query_id: String, page_id: String },
    #[error("score must be finite for ({query_id}, {page_id})")]
    NonFiniteScore { query_id: String, page_id: String },
    #[error("missing scores for {} pairs, first ({}, {})", .0.len(), .0[0].0, .0[0].1)]
    MissingScores(Vec<(String, String)>),
    #[error("query sets differ: only in baseline {only_baseline:?}, only in reranked {only_reranked:?}")]
    QuerySetMismatch {
        only_baseline: Vec<String>,
        only_reranked: Vec<String>,
    },
    #[error("invalid metric {0:?}, expected ndcg@k or recall@k with k >= 1")]
    Metric(String),
    #[error("no rerank endpoint configured")]
    NoRerankEndpoint,
    #[error(transparent)]
    Prompt(#[from] crate::prompts::PromptError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub page_id: String,
    pub score: f64,
}

fn sort_candidates(list: &mut [Candidate]) {
    list.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.page_id.cmp(&b.page_id)));
}

/// Ranked candidates per query, each list sorted by score descending with
/// ties broken by page id ascending.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankedRun {
    pub run_tag: String,
    queries: BTreeMap<String, Vec<Candidate>>,
}

impl RankedRun {
    pub fn new(run_tag: impl Into<String>) -> Self {
        Self {
            run_tag: run_tag.into(),
            queries: BTreeMap::new(),
        }
    }

    /// Adds one candidate, keeping the query's list sorted.
    pub fn push(&mut self, query_id: &str, page_id: &str, score: f64) -> Result<(), EvalError> {
        if !score.is_finite() {
            return Err(EvalError::NonFiniteScore {
                query_id: query_id.into(),
                page_id: page_id.into(),
            });
        }
        let list = self.queries.entry(query_id.to_string()).or_default();
        if list.iter().any(|c| c.page_id == page_id) {
            return Err(EvalError::Duplicate {
                query_id: query_id.into(),
                page_id: page_id.into(),
            });
        }
        let candidate = Candidate {
            page_id: page_id.into(),
            score,
        };
        let at = list.partition_point(|c| c.score > score || (c.score == score && c.page_id.as_str() < page_id));
        list.insert(at, candidate);
        Ok(())
    }

    pub fn from_lists<I, Q, P>(run_tag: &str, lists: I) -> Result<Self, EvalError>
    where
        I: IntoIterator<Item = (Q, Vec<(P, f64)>)>,
        Q: AsRef<str>,
        P: AsRef<str>,
    {
        let mut run = Self::new(run_tag);
        for (qid, list) in lists {
            for (pid, score) in list {
                run.push(qid.as_ref(), pid.as_ref(), score)?;
            }
        }
        Ok(run)
    }

    pub fn get(&self, query_id: &str) -> Option<&[Candidate]> {
        self.queries.get(query_id).map(Vec::as_slice)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.queries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Candidate])> {
        self.queries.iter().map(|(q, l)| (q.as_str(), l.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Serializes as `qid Q0 pageid rank score tag` lines.
    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (qid, list) in &self.queries {
            for (i, c) in list.iter().enumerate() {
                out.push_str(&format!(
                    "{qid} Q0 {} {} {} {}\n",
                    c.page_id,
                    i + 1,
                    c.score,
                    self.run_tag
                ));
            }
        }
        out
    }

    pub fn write_trec(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, self.to_trec()).map_err(io_err(path))
    }
}

fn fields<'a>(path: &Path, line_no: usize, line: &'a str, n: usize) -> Result<Vec<&'a str>, EvalError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != n {
        return Err(EvalError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("expected {n} fields, found {}", fields.len()),
        });
    }
    Ok(fields)
}

fn number<T: FromStr>(path: &Path, line_no: usize, field: &str, what: &str) -> Result<T, EvalError> {
    field.parse().map_err(|_| EvalError::Malformed {
        path: path.to_path_buf(),
        line: line_no,
        message: format!("invalid {what} {field:?}"),
    })
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn parse_trec_run_str(text: &str, path: &Path) -> Result<RankedRun, EvalError> {
    let mut run = RankedRun::default();
    for (line_no, line) in content_lines(text) {
        let f = fields(path, line_no, line, 6)?;
        number::<u64>(path, line_no, f[3], "rank")?;
        let score: f64 = number(path, line_no, f[4], "score")?;
        if run.run_tag.is_empty() {
            run.run_tag = f[5].to_string();
        }
        run.push(f[0], f[2], score).map_err(|e| EvalError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
    }
    Ok(run)
}

pub fn parse_trec_run(path: &Path) -> Result<RankedRun, EvalError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_trec_run_str(&text, path)
}

/// Binary relevance judgments. Queries judged with no relevant page are kept
/// with an empty set and excluded from metric means.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Qrels {
    queries: BTreeMap<String, BTreeSet<String>>,
}

impl Qrels {
    pub fn from_pairs<Q: AsRef<str>, P: AsRef<str>>(pairs: impl IntoIterator<Item = (Q, P)>) -> Self {
        let mut qrels = Self::default();
        for (q, p) in pairs {
            qrels.insert(q.as_ref(), p.as_ref());
        }
        qrels
    }

    pub fn insert(&mut self, query_id: &str, page_id: &str) {
        self.queries
            .entry(query_id.to_string())
            .or_default()
            .insert(page_id.to_string());
    }

    pub fn relevant(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.queries.get(query_id)
    }

    pub fn is_relevant(&self, query_id: &str, page_id: &str) -> bool {
        self.queries.get(query_id).is_some_and(|s| s.contains(page_id))
    }

    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (qid, pages) in &self.queries {
            for p in pages {
                out.push_str(&format!("{qid} 0 {p} 1\n"));
            }
        }
        out
    }
}

pub fn parse_qrels_str(text: &str, path: &Path) -> Result<Qrels, EvalError> {
    let mut qrels = Qrels::default();
    for (line_no, line) in content_lines(text) {
        let f = fields(path, line_no, line, 4)?;
        let rel: i64 = number(path, line_no, f[3], "relevance")?;
        if rel > 0 {
            qrels.insert(f[0], f[2]);
        } else {
            qrels.queries.entry(f[0].to_string()).or_default();
        }
    }
    Ok(qrels)
}

pub fn parse_qrels(path: &Path) -> Result<Qrels, EvalError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_qrels_str(&text, path)
}

/// Reranker relevance per (query, page).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    scores: BTreeMap<(String, String), f64>,
}

impl ScoreTable {
    pub fn insert(&mut self, query_id: &str, page_id: &str, score: f64) {
        self.scores.insert((query_id.to_string(), page_id.to_string()), score);
    }

    pub fn get(&self, query_id: &str, page_id: &str) -> Option<f64> {
        self.scores.get(&(query_id.to_string(), page_id.to_string())).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Scores equal to the run's own retrieval scores.
    pub fn from_run(run: &RankedRun) -> Self {
        let mut table = Self::default();
        for (q, list) in run.iter() {
            for c in list {
                table.insert(q, &c.page_id, c.score);
            }
        }
        table
    }

    /// `qid pageid score` lines.
    pub fn to_text(&self) -> String {
        self.scores.iter().map(|((q, p), s)| format!("{q} {p} {s}\n")).collect()
    }
}

pub fn parse_scores_str(text: &str, path: &Path) -> Result<ScoreTable, EvalError> {
    let mut table = ScoreTable::default();
    for (line_no, line) in content_lines(text) {
        let f = fields(path, line_no, line, 3)?;
        let score: f64 = number(path, line_no, f[2], "score")?;
        if !score.is_finite() {
            return Err(EvalError::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                message: "score must be finite".into(),
            });
        }
        if table.get(f[0], f[1]).is_some() {
            return Err(EvalError::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("duplicate score for ({}, {})", f[0], f[1]),
            });
        }
        table.insert(f[0], f[1], score);
    }
    Ok(table)
}

pub fn parse_scores(path: &Path) -> Result<ScoreTable, EvalError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_scores_str(&text, path)
}

/// What [`rerank`] does with top-k pairs that have no score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingPolicy {
    #[default]
    Error,
    /// Unscored candidates go after the scored ones, in original order.
    Demote,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reranked {
    pub run: RankedRun,
    pub missing: Vec<(String, String)>,
}

/// Reorders the top `k` candidates of every query by `scores`. Candidates
/// past `k` follow in their original order; they get synthetic scores below
/// the reranked block so the output remains score-sorted.
pub fn rerank(run: &RankedRun, scores: &ScoreTable, k: usize, policy: MissingPolicy) -> Result<Reranked, EvalError> {
    let mut missing = Vec::new();
    let mut out = RankedRun::new(format!("{}{RERANK_SUFFIX}", run.run_tag));
    for (qid, list) in run.iter() {
        let cut = k.min(list.len());
        let mut block = Vec::with_capacity(cut);
        let mut unscored = Vec::new();
        for c in &list[..cut] {
            match scores.get(qid, &c.page_id) {
                Some(score) => block.push(Candidate {
                    page_id: c.page_id.clone(),
                    score,
                }),
                None => {
                    missing.push((qid.to_string(), c.page_id.clone()));
                    unscored.push(c.page_id.clone());
                }
            }
        }
        sort_candidates(&mut block);
        let mut floor = block.iter().map(|c| c.score).fold(0.0_f64, f64::min);
        let mut tail_ids = unscored;
        tail_ids.extend(list[cut..].iter().map(|c| c.page_id.clone()));
        for page_id in tail_ids {
            floor -= 1.0;
            block.push(Candidate { page_id, score: floor });
        }
        out.queries.insert(qid.to_string(), block);
    }
    if policy == MissingPolicy::Error && !missing.is_empty() {
        return Err(EvalError::MissingScores(missing));
    }
    Ok(Reranked { run: out, missing })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ndcg,
    Recall,
}

/// A metric at a cutoff, written `ndcg@5` / `recall@1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MetricSpec {
    pub metric: Metric,
    pub k: usize,
}

impl MetricSpec {
    pub fn ndcg(k: usize) -> Self {
        Self {
            metric: Metric::Ndcg,
            k,
        }
    }

    pub fn recall(k: usize) -> Self {
        Self {
            metric: Metric::Recall,
            k,
        }
    }

    /// The default report: NDCG@5, NDCG@10, Recall@1, Recall@5.
    pub fn defaults() -> Vec<Self> {
        vec![Self::ndcg(5), Self::ndcg(10), Self::recall(1), Self::recall(5)]
    }

    pub fn evaluate(&self, run: &RankedRun, qrels: &Qrels) -> MetricResult {
        match self.metric {
            Metric::Ndcg => ndcg_at_k(run, qrels, self.k),
            Metric::Recall => recall_at_k(run, qrels, self.k),
        }
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.metric {
            Metric::Ndcg => "ndcg",
            Metric::Recall => "recall",
        };
        write!(f, "{name}@{}", self.k)
    }
}

impl FromStr for MetricSpec {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EvalError::Metric(s.to_string());
        let (name, k) = s.trim().split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        match name.to_ascii_lowercase().as_str() {
            "ndcg" => Ok(Self::ndcg(k)),
            "recall" => Ok(Self::recall(k)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for MetricSpec {
    type Error = EvalError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<MetricSpec> for String {
    fn from(m: MetricSpec) -> Self {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricResult {
    pub spec: MetricSpec,
    /// Mean over run queries with at least one relevant page.
    pub mean: f64,
    pub per_query: BTreeMap<String, f64>,
    /// Run queries absent from the qrels.
    pub unjudged: Vec<String>,
    /// Run queries judged with no relevant page.
    pub no_relevant: Vec<String>,
}

fn evaluate_with(
    run: &RankedRun,
    qrels: &Qrels,
    k: usize,
    spec: MetricSpec,
    f: impl Fn(&[Candidate], &BTreeSet<String>, usize) -> f64,
) -> MetricResult {
    let mut result = MetricResult {
        spec,
        mean: 0.0,
        per_query: BTreeMap::new(),
        unjudged: Vec::new(),
        no_relevant: Vec::new(),
    };
    for (qid, list) in run.iter() {
        match qrels.relevant(qid) {
            None => result.unjudged.push(qid.to_string()),
            Some(rel) if rel.is_empty() => result.no_relevant.push(qid.to_string()),
            Some(rel) => {
                result.per_query.insert(qid.to_string(), f(list, rel, k));
            }
        }
    }
    if !result.per_query.is_empty() {
        result.mean = result.per_query.values().sum::<f64>() / result.per_query.len() as f64;
    }
    result
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// Per-query NDCG@k with binary relevance and linear gain.
pub fn query_ndcg(list: &[Candidate], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let dcg: f64 = list
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, c)| relevant.contains(&c.page_id))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let idcg: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

pub fn query_recall(list: &[Candidate], relevant: &BTreeSet<String>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = list.iter().take(k).filter(|c| relevant.contains(&c.page_id)).count();
    hits as f64 / relevant.len() as f64
}

pub fn ndcg_at_k(run: &RankedRun, qrels: &Qrels, k: usize) -> MetricResult {
    evaluate_with(run, qrels, k, MetricSpec::ndcg(k), query_ndcg)
}

pub fn recall_at_k(run: &RankedRun, qrels: &Qrels, k: usize) -> MetricResult {
    evaluate_with(run, qrels, k, MetricSpec::recall(k), query_recall)
}

/// Unweighted mean of per-dataset means.
pub fn macro_average(means: &[f64]) -> Option<f64> {
    if means.is_empty() {
        None
    } else {
        Some(means.iter().sum::<f64>() / means.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub metric: MetricSpec,
    pub baseline: f64,
    pub reranked: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub baseline_tag: String,
    pub reranked_tag: String,
    pub queries: usize,
    pub rows: Vec<DeltaRow>,
}

impl DeltaReport {
    /// Aligned table with values scaled by 100 to one decimal.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<12}{:>10}{:>10}{:>8}\n", "metric", "baseline", "reranked", "delta");
        for row in &self.rows {
            let pct = |v: f64| format!("{:.1}", v * 100.0);
            let delta = row.delta * 100.0;
            let delta = if format!("{delta:.1}") == "-0.0" { 0.0 } else { delta };
            out.push_str(&format!(
                "{:<12}{:>10}{:>10}{:>8}\n",
                row.metric.to_string(),
                pct(row.baseline),
                pct(row.reranked),
                format!("{delta:+.1}"),
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Rows whose delta falls below `-threshold`.
    pub fn regressions(&self, threshold: f64) -> Vec<&DeltaRow> {
        self.rows.iter().filter(|r| r.delta < -threshold).collect()
    }
}

pub fn delta_report(
    baseline: &RankedRun,
    reranked: &RankedRun,
    qrels: &Qrels,
    metrics: &[MetricSpec],
) -> Result<DeltaReport, EvalError> {
    let a: BTreeSet<&str> = baseline.query_ids().collect();
    let b: BTreeSet<&str> = reranked.query_ids().collect();
    if a != b {
        return Err(EvalError::QuerySetMismatch {
            only_baseline: a.difference(&b).map(|s| s.to_string()).collect(),
            only_reranked: b.difference(&a).map(|s| s.to_string()).collect(),
        });
    }
    let rows = metrics
        .iter()
        .map(|m| {
            let base = m.evaluate(baseline, qrels).mean;
            let rer = m.evaluate(reranked, qrels).mean;
            DeltaRow {
                metric: *m,
                baseline: base,
                reranked: rer,
                delta: rer - base,
            }
        })
        .collect();
    Ok(DeltaReport {
        baseline_tag: baseline.run_tag.clone(),
        reranked_tag: reranked.run_tag.clone(),
        queries: a.len(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingScore {
    pub query_id: String,
    pub page_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct GatewayScores {
    pub table: ScoreTable,
    pub missing: Vec<MissingScore>,
    /// Pairs scored from the generated token because no True/False
    /// log-probabilities came back.
    pub hard_decisions: usize,
    pub calls: usize,
}

impl GatewayScores {
    pub fn hard_decision_mode(&self) -> bool {
        self.hard_decisions > 0
    }
}

const TOP_LOGPROBS: u8 = 5;

fn hard_decision(text: &str) -> Option<f64> {
    let word: String = text
        .split_whitespace()
        .next()?
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "true" => Some(1.0),
        "false" => Some(0.0),
        _ => None,
    }
}

/// Scores every top-`k` (query, page) pair of `run` with one reranker call
/// each. Two-way softmax over the "True"/"False" first-token log-probs gives
/// the score; without both log-probs the generated word decides 1.0 or 0.0.
pub fn score_with_gateway(
    ctx: &StageContext<'_>,
    run: &RankedRun,
    query_texts: &BTreeMap<String, String>,
    pages: &HashMap<String, PageRecord>,
    k: usize,
) -> Result<GatewayScores, EvalError> {
    let endpoint = ctx.endpoints.rerank.as_deref().ok_or(EvalError::NoRerankEndpoint)?;
    let template = ctx.prompts.get(TemplateId::Rerank);
    let mut out = GatewayScores::default();
    let mut images: HashMap<&str, Result<Part, String>> = HashMap::new();
    let mut pairs = Vec::new();
    let mut requests: Vec<ChatRequest> = Vec::new();
    for (qid, list) in run.iter() {
        for c in list.iter().take(k) {
            let miss = |reason: String| MissingScore {
                query_id: qid.to_string(),
                page_id: c.page_id.clone(),
                reason,
            };
            let Some(text) = query_texts.get(qid) else {
                out.missing.push(miss("no query text".into()));
                continue;
            };
            let image = images
                .entry(c.page_id.as_str())
                .or_insert_with(|| match pages.get(&c.page_id) {
                    Some(page) => page_image(page).map_err(|e| e.to_string()),
                    None => Err("page not in corpus".into()),
                });
            let image = match image {
                Ok(part) => part.clone(),
                Err(reason) => {
                    out.missing.push(miss(reason.clone()));
                    continue;
                }
            };
            let prompt = template.render(&[("query", text)])?;
            requests.push(
                ctx.greedy_request(endpoint, TemplateId::Rerank.as_str(), vec![image, Part::text(prompt)])
                    .with_logprobs(TOP_LOGPROBS),
            );
            pairs.push((qid.to_string(), c.page_id.clone()));
        }
    }
    out.calls = requests.len();
    for ((qid, pid), result) in pairs.into_iter().zip(ctx.gateway.complete_many_full(&requests)) {
        let completion = match result {
            Ok(c) => c,
            Err(e) => {
                out.missing.push(MissingScore {
                    query_id: qid,
                    page_id: pid,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let logits = completion
            .first_token_logprob("True")
            .zip(completion.first_token_logprob("False"));
        let score = match logits {
            Some((l_true, l_false)) => relevance_score(TokenLogits { l_true, l_false }).ok(),
            None => {
                let s = hard_decision(&completion.text);
                if s.is_some() {
                    out.hard_decisions += 1;
                }
                s
            }
        };
        match score {
            Some(s) => out.table.insert(&qid, &pid, s),
            None => out.missing.push(MissingScore {
                query_id: qid,
                page_id: pid,
                reason: format!("unreadable reranker output {:?}", completion.text),
            }),
        }
    }
    if out.hard_decision_mode() {
        tracing::warn!(
            pairs = out.hard_decisions,
            "no True/False logprobs returned; scored in hard-decision mode"
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path() -> &'static Path {
        Path::new("fixture")
    }

    fn run_of(list: &[(&str, f64)]) -> RankedRun {
        RankedRun::from_lists("bm25", [("q1", list.to_vec())]).unwrap()
    }

    #[test]
    fn parse_groups_and_sorts() {
        let run = parse_trec_run_str("q1 Q0 p2 2 0.4 bm25\nq1 Q0 p1 1 0.9 bm25\n", path()).unwrap();
        assert_eq!(run.len(), 1);
        let ids: Vec<_> = run.get("q1").unwrap().iter().map(|c| c.page_id.as_str()).collect();
        assert_eq!(ids, ["p1", "p2"]);
        assert_eq!(run.run_tag, "bm25");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dup = parse_trec_run_str("q1 Q0 p1 1 0.9 t\nq1 Q0 p1 2 0.3 t\n", path()).unwrap_err();
        assert!(matches!(dup, EvalError::Malformed { line: 2, .. }), "{dup}");
        let bad = parse_trec_run_str("q1 Q0 p1 1 0.9 t\n\nq1 Q0 p2 x 0.3 t\n", path()).unwrap_err();
        assert!(matches!(bad, EvalError::Malformed { line: 3, .. }), "{bad}");
        assert!(parse_trec_run_str("q1 Q0 p1 1\n", path()).is_err());
    }

    #[test]
    fn ties_break_by_page_id() {
        let run = run_of(&[("b", 1.0), ("a", 1.0), ("c", 2.0)]);
        let ids: Vec<_> = run.get("q1").unwrap().iter().map(|c| c.page_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn trec_round_trip() {
        let run = run_of(&[("p1", 0.25), ("p2", 0.125), ("p3", 1.0 / 3.0)]);
        assert_eq!(parse_trec_run_str(&run.to_trec(), path()).unwrap(), run);
        let qrels = Qrels::from_pairs([("q1", "p1"), ("q2", "p9")]);
        assert_eq!(parse_qrels_str(&qrels.to_trec(), path()).unwrap(), qrels);
    }

    #[test]
    fn worked_ndcg_values() {
        let qrels = Qrels::from_pairs([("q1", "rel")]);
        let at = |rank: usize| {
            let list: Vec<(String, f64)> = (1..=10)
                .map(|i| {
                    (
                        if i == rank {
                            "rel".to_string()
                        } else {
                            format!("p{i:02}")
                        },
                        -(i as f64),
                    )
                })
                .collect();
            RankedRun::from_lists("r", [("q1", list)]).unwrap()
        };
        assert_eq!(ndcg_at_k(&at(1), &qrels, 5).mean, 1.0);
        assert_eq!(ndcg_at_k(&at(3), &qrels, 5).mean, 0.5);
        assert_eq!(ndcg_at_k(&at(6), &qrels, 5).mean, 0.0);
        assert_eq!(recall_at_k(&at(1), &qrels, 1).mean, 1.0);
        assert_eq!(recall_at_k(&at(6), &qrels, 5).mean, 0.0);
    }

    #[test]
    fn recall_half() {
        let qrels = Qrels::from_pairs([("q1", "a"), ("q1", "z")]);
        let run = run_of(&[("a", 9.0), ("b", 8.0), ("c", 7.0), ("d", 6.0), ("e", 5.0), ("z", 1.0)]);
        assert_eq!(recall_at_k(&run, &qrels, 5).mean, 0.5);
    }

    #[test]
    fn unjudged_and_empty_queries_are_excluded() {
        let mut qrels = parse_qrels_str("q1 0 a 1\nq3 0 x 0\n", path()).unwrap();
        qrels.insert("q1", "a");
        let run = RankedRun::from_lists(
            "r",
            [
                ("q1", vec![("a", 1.0)]),
                ("q2", vec![("a", 1.0)]),
                ("q3", vec![("x", 1.0)]),
            ],
        )
        .unwrap();
        let r = ndcg_at_k(&run, &qrels, 5);
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.unjudged, ["q2"]);
        assert_eq!(r.no_relevant, ["q3"]);
    }

    #[test]
    fn identity_rerank_is_fixed_point() {
        let run = run_of(&[("a", 0.9), ("b", 0.5), ("c", 0.5), ("d", 0.1)]);
        let out = rerank(&run, &ScoreTable::from_run(&run), 20, MissingPolicy::Error).unwrap();
        assert_eq!(out.run.get("q1"), run.get("q1"));
        assert_eq!(out.run.run_tag, "bm25+rerank");
    }

    #[test]
    fn reversed_scores_reverse_block_and_keep_tail() {
        let list: Vec<(String, f64)> = (0..5).map(|i| (format!("p{i}"), 10.0 - i as f64)).collect();
        let run = RankedRun::from_lists("r", [("q1", list)]).unwrap();
        let mut scores = ScoreTable::default();
        for i in 0..3 {
            scores.insert("q1", &format!("p{i}"), i as f64 / 10.0);
        }
        let out = rerank(&run, &scores, 3, MissingPolicy::Error).unwrap().run;
        let ids: Vec<_> = out.get("q1").unwrap().iter().map(|c| c.page_id.as_str()).collect();
        assert_eq!(ids, ["p2", "p1", "p0", "p3", "p4"]);
        let again = rerank(&out, &scores, 3, MissingPolicy::Error).unwrap().run;
        assert_eq!(again.get("q1"), out.get("q1"));
    }

    #[test]
    fn missing_scores() {
        let run = run_of(&[("a", 0.9), ("b", 0.5), ("c", 0.1)]);
        let mut scores = ScoreTable::default();
        scores.insert("q1", "b", 0.8);
        scores.insert("q1", "c", 0.9);
        let err = rerank(&run, &scores, 20, MissingPolicy::Error).unwrap_err();
        assert!(matches!(&err, EvalError::MissingScores(m) if m == &[("q1".to_string(), "a".to_string())]));
        let out = rerank(&run, &scores, 20, MissingPolicy::Demote).unwrap();
        let ids: Vec<_> = out.run.get("q1").unwrap().iter().map(|c| c.page_id.as_str()).collect();
        assert_eq!(ids, ["c", "b", "a"]);
        assert_eq!(out.missing.len(), 1);
    }

    #[test]
    fn report_formats_and_gates() {
        let qrels = Qrels::from_pairs([("q1", "b")]);
        let base = run_of(&[("a", 0.9), ("b", 0.5)]);
        let mut scores = ScoreTable::default();
        scores.insert("q1", "a", 0.0);
        scores.insert("q1", "b", 1.0);
        let rer = rerank(&base, &scores, 20, MissingPolicy::Error).unwrap().run;
        let report = delta_report(&base, &rer, &qrels, &[MetricSpec::ndcg(5), MetricSpec::recall(1)]).unwrap();
        let text = report.to_text();
        assert!(text.contains("ndcg@5"), "{text}");
        assert!(text.contains("63.1"), "{text}");
        assert!(text.contains("+36.9"), "{text}");
        assert!(report.regressions(0.0).is_empty());
        let back = delta_report(&rer, &base, &qrels, &[MetricSpec::ndcg(5)]).unwrap();
        assert_eq!(back.regressions(0.1).len(), 1);
        let json: DeltaReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json, report);
    }

    #[test]
    fn report_rejects_query_mismatch() {
        let a = RankedRun::from_lists("a", [("q1", vec![("p", 1.0)]), ("q2", vec![("p", 1.0)])]).unwrap();
        let b = RankedRun::from_lists("b", [("q1", vec![("p", 1.0)]), ("q3", vec![("p", 1.0)])]).unwrap();
        match delta_report(&a, &b, &Qrels::default(), &MetricSpec::defaults()).unwrap_err() {
            EvalError::QuerySetMismatch {
                only_baseline,
                only_reranked,
            } => {
                assert_eq!(
                    (only_baseline, only_reranked),
                    (vec!["q2".to_string()], vec!["q3".to_string()])
                );
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn metric_spec_parsing() {
        assert_eq!("NDCG@5".parse::<MetricSpec>().unwrap(), MetricSpec::ndcg(5));
        assert_eq!("recall@1".parse::<MetricSpec>().unwrap().to_string(), "recall@1");
        assert!("ndcg@0".parse::<MetricSpec>().is_err());
        assert!("map@5".parse::<MetricSpec>().is_err());
    }

    #[test]
    fn score_file_parse() {
        let t = parse_scores_str("q1 a 0.5\n# comment\nq1 b 1\n", path()).unwrap();
        assert_eq!(t.get("q1", "b"), Some(1.0));
        assert!(parse_scores_str("q1 a 0.5\nq1 a 0.6\n", path()).is_err());
        assert!(parse_scores_str("q1 a NaN\n", path()).is_err());
    }

    #[test]
    fn macro_average_is_unweighted() {
        assert_eq!(macro_average(&[0.5, 1.0]), Some(0.75));
        assert_eq!(macro_average(&[]), None);
    }
}
