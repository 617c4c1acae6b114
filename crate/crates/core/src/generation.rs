//! Query generation stages: positive candidates per page, generic hard
//! negative variants, finance single-property variants, and rephrasing.
//!
//! Each stage is split into a request builder and a response parser so the
//! pipeline can batch requests across pages through
//! [`Gateway::complete_many`](crate::gateway::Gateway::complete_many). The
//! `generate_*` functions glue the two together for single-item use.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::StageContext;
use crate::corpus::{normalize_text, FinanceProperty, PageRecord, Polarity, QueryKind, QueryRecord, Verification};
use crate::gateway::{ChatRequest, GatewayError, Part};
use crate::prompts::{PromptError, TemplateId};
use crate::stats::StageStats;

pub const FLAG_REPHRASE_NOOP: &str = "rephrase-noop";
pub const FLAG_REPHRASE_EMPTY: &str = "rephrase-empty";
pub const FLAG_REPHRASE_FAILED: &str = "rephrase-failed";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub n_positive_candidates: usize,
    pub n_negative_variants: usize,
    pub finance_properties: Vec<FinanceProperty>,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            n_positive_candidates: 10,
            n_negative_variants: 12,
            finance_properties: FinanceProperty::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), StageError> {
        if self.n_positive_candidates == 0 {
            return Err(StageError::Params("n_positive_candidates must be >= 1".into()));
        }
        if self.n_negative_variants < 3 {
            return Err(StageError::Params("n_negative_variants must be >= 3".into()));
        }
        if self.finance_properties.is_empty() {
            return Err(StageError::Params("finance_properties must be non-empty".into()));
        }
        let unique: HashSet<_> = self.finance_properties.iter().collect();
        if unique.len() != self.finance_properties.len() {
            return Err(StageError::Params("finance_properties has duplicates".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error("{id}: {source}")]
    Gateway {
        id: String,
        #[source]
        source: GatewayError,
    },
    #[error("page {page_id}: cannot load image: {message}")]
    Image { page_id: String, message: String },
    #[error("{0}")]
    Precondition(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{query_id}: only {produced} finance variants produced, need 3")]
    InsufficientVariants { query_id: String, produced: usize },
    #[error("invalid generation params: {0}")]
    Params(String),
}

/// Extracts a list of queries from model output.
///
/// Tries, in order: a JSON array (strings, or objects with a `query` or
/// `question` field), numbered or bulleted lines, and finally lines that end
/// in a question mark. Never fails; unparseable text yields an empty list.
pub fn parse_query_list(completion_text: &str) -> Vec<String> {
    let clean = |s: &str| -> Option<String> {
        let t = s.trim().trim_matches(|c| c == '"' || c == '\'' || c == '`').trim();
        (!t.is_empty()).then(|| t.to_string())
    };

    if let Some(items) = json_array(completion_text) {
        return items.iter().filter_map(|s| clean(s)).collect();
    }

    let listed: Vec<String> = completion_text
        .lines()
        .filter_map(strip_list_marker)
        .filter_map(clean)
        .collect();
    if !listed.is_empty() {
        return listed;
    }

    completion_text
        .lines()
        .map(str::trim)
        .filter(|l| l.ends_with('?'))
        .filter_map(clean)
        .collect()
}

fn json_array(text: &str) -> Option<Vec<String>> {
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    if end <= start {
        return None;
    }
    let values: Vec<serde_json::Value> = serde_json::from_str(&text[start..=end]).ok()?;
    Some(
        values
            .into_iter()
            .filter_map(|v| match v {
                serde_json::Value::String(s) => Some(s),
                serde_json::Value::Object(map) => ["query", "question"]
                    .iter()
                    .find_map(|k| map.get(*k).and_then(|v| v.as_str()).map(str::to_string)),
                _ => None,
            })
            .collect(),
    )
}

/// Returns the text after a `1.`, `1)`, `-`, `*` or `•` marker, if present.
fn strip_list_marker(line: &str) -> Option<&str> {
    let line = line.trim_start();
    for bullet in ["- ", "* ", "• "] {
        if let Some(rest) = line.strip_prefix(bullet) {
            return Some(rest);
        }
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    rest.starts_with(char::is_whitespace).then_some(rest)
}

/// Removes normalized duplicates and anything equal to `exclude`, keeping
/// first occurrences. Returns (kept, duplicates dropped, equal-to-exclude dropped).
fn dedup(candidates: Vec<String>, exclude: Option<&str>, seen: &mut HashSet<String>) -> (Vec<String>, u64, u64) {
    let exclude = exclude.map(normalize_text);
    let (mut dup, mut same) = (0, 0);
    let mut kept = Vec::new();
    for c in candidates {
        let norm = normalize_text(&c);
        if exclude.as_deref() == Some(norm.as_str()) {
            same += 1;
        } else if !seen.insert(norm) {
            dup += 1;
        } else {
            kept.push(c);
        }
    }
    (kept, dup, same)
}

fn require_kept(positive: &QueryRecord) -> Result<(), StageError> {
    if positive.polarity != Polarity::Positive || positive.verification != Verification::Kept {
        return Err(StageError::Precondition(format!(
            "{}: expected a kept positive query",
            positive.query_id
        )));
    }
    Ok(())
}

fn gateway_err(id: &str) -> impl FnOnce(GatewayError) -> StageError + '_ {
    move |source| StageError::Gateway {
        id: id.to_string(),
        source,
    }
}

/// Loads a page image as a request part.
pub fn page_image(page: &PageRecord) -> Result<Part, StageError> {
    Part::image_file(&page.image_path).map_err(|e| StageError::Image {
        page_id: page.page_id.clone(),
        message: e.to_string(),
    })
}

pub fn positive_request(
    ctx: &StageContext<'_>,
    page: &PageRecord,
    params: &GenerationParams,
) -> Result<ChatRequest, StageError> {
    let n = params.n_positive_candidates.to_string();
    let text = ctx
        .prompts
        .get(TemplateId::PositiveGen)
        .render(&[("n_candidates", &n)])?;
    Ok(ctx.generation_request(
        &ctx.endpoints.positive_gen,
        TemplateId::PositiveGen.as_str(),
        vec![page_image(page)?, Part::text(text)],
    ))
}

/// Turns a positive-generation completion into unverified candidates.
pub fn parse_positive_candidates(
    page: &PageRecord,
    params: &GenerationParams,
    completion_text: &str,
    stats: &mut StageStats,
) -> Vec<QueryRecord> {
    let parsed = parse_query_list(completion_text);
    let (mut kept, dup, _) = dedup(parsed, None, &mut HashSet::new());
    stats.add("positive.duplicates_dropped", dup);
    if kept.len() > params.n_positive_candidates {
        stats.add(
            "positive.over_limit_dropped",
            (kept.len() - params.n_positive_candidates) as u64,
        );
        kept.truncate(params.n_positive_candidates);
    }
    if kept.is_empty() {
        tracing::warn!(page_id = %page.page_id, "no parseable positive queries");
        stats.bump("positive.pages_without_candidates");
    }
    stats.add("positive.candidates", kept.len() as u64);
    kept.into_iter()
        .enumerate()
        .map(|(i, text)| {
            QueryRecord::new(
                format!("{}/pos/{i}", page.page_id),
                &page.page_id,
                text,
                Polarity::Positive,
                QueryKind::GeneratedPositive,
            )
        })
        .collect()
}

pub fn generate_positive_candidates(
    ctx: &StageContext<'_>,
    page: &PageRecord,
    params: &GenerationParams,
    stats: &mut StageStats,
) -> Result<Vec<QueryRecord>, StageError> {
    let request = positive_request(ctx, page, params)?;
    let text = ctx.gateway.complete(&request).map_err(gateway_err(&page.page_id))?;
    Ok(parse_positive_candidates(page, params, &text, stats))
}

pub fn negative_request(
    ctx: &StageContext<'_>,
    positive: &QueryRecord,
    params: &GenerationParams,
) -> Result<ChatRequest, StageError> {
    require_kept(positive)?;
    let n = params.n_negative_variants.to_string();
    let text = ctx
        .prompts
        .get(TemplateId::NegativeGenGeneric)
        .render(&[("query", &positive.text), ("n_candidates", &n)])?;
    Ok(ctx.generation_request(
        &ctx.endpoints.negative_gen,
        TemplateId::NegativeGenGeneric.as_str(),
        vec![Part::text(text)],
    ))
}

pub fn parse_negative_variants(
    positive: &QueryRecord,
    params: &GenerationParams,
    completion_text: &str,
    stats: &mut StageStats,
) -> Vec<QueryRecord> {
    let parsed = parse_query_list(completion_text);
    if parsed.is_empty() {
        tracing::warn!(query_id = %positive.query_id, "empty negative generation response");
        stats.bump("generic.empty_responses");
    }
    let (mut kept, dup, same) = dedup(parsed, Some(&positive.text), &mut HashSet::new());
    stats.add("generic.duplicates_dropped", dup);
    stats.add("generic.equal_to_positive_dropped", same);
    kept.truncate(params.n_negative_variants);
    stats.add("generic.variants", kept.len() as u64);
    kept.into_iter()
        .enumerate()
        .map(|(i, text)| {
            let mut q = QueryRecord::new(
                format!("{}/neg/{i}", positive.query_id),
                &positive.page_id,
                text,
                Polarity::Negative,
                QueryKind::GenericNegative,
            );
            q.parent_query_id = Some(positive.query_id.clone());
            q
        })
        .collect()
}

pub fn generate_negative_variants(
    ctx: &StageContext<'_>,
    positive: &QueryRecord,
    params: &GenerationParams,
    stats: &mut StageStats,
) -> Result<Vec<QueryRecord>, StageError> {
    let request = negative_request(ctx, positive, params)?;
    let text = ctx
        .gateway
        .complete(&request)
        .map_err(gateway_err(&positive.query_id))?;
    Ok(parse_negative_variants(positive, params, &text, stats))
}

/// One request per configured finance property, in configuration order.
pub fn finance_requests(
    ctx: &StageContext<'_>,
    positive: &QueryRecord,
    params: &GenerationParams,
) -> Result<Vec<(FinanceProperty, ChatRequest)>, StageError> {
    require_kept(positive)?;
    let template = ctx.prompts.get(TemplateId::NegativeGenFinance);
    params
        .finance_properties
        .iter()
        .map(|&property| {
            let text = template.render(&[("query", &positive.text), ("property_desc", property.description())])?;
            Ok((
                property,
                ctx.generation_request(
                    &ctx.endpoints.negative_gen,
                    TemplateId::NegativeGenFinance.as_str(),
                    vec![Part::text(text)],
                ),
            ))
        })
        .collect()
}

/// Assembles finance variants from per-property results. Failed properties
/// are skipped; fewer than three variants overall is an error.
pub fn parse_finance_variants(
    positive: &QueryRecord,
    results: Vec<(FinanceProperty, Result<String, GatewayError>)>,
    stats: &mut StageStats,
) -> Result<Vec<QueryRecord>, StageError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (property, result) in results {
        let text = match result {
            Ok(t) => t,
            Err(e) => {
                tracing::warn!(query_id = %positive.query_id, %property, error = %e, "finance request failed");
                stats.bump("finance.failed_requests");
                continue;
            }
        };
        let (kept, dup, same) = dedup(parse_query_list(&text), Some(&positive.text), &mut seen);
        stats.add("finance.duplicates_dropped", dup);
        stats.add("finance.equal_to_positive_dropped", same);
        for (i, variant) in kept.into_iter().enumerate() {
            let mut q = QueryRecord::new(
                format!("{}/fin/{}/{i}", positive.query_id, property.as_str()),
                &positive.page_id,
                variant,
                Polarity::Negative,
                QueryKind::FinanceNegative,
            );
            q.parent_query_id = Some(positive.query_id.clone());
            q.property = Some(property);
            out.push(q);
        }
    }
    stats.add("finance.variants", out.len() as u64);
    if out.len() < 3 {
        return Err(StageError::InsufficientVariants {
            query_id: positive.query_id.clone(),
            produced: out.len(),
        });
    }
    Ok(out)
}

pub fn generate_finance_variants(
    ctx: &StageContext<'_>,
    positive: &QueryRecord,
    params: &GenerationParams,
    stats: &mut StageStats,
) -> Result<Vec<QueryRecord>, StageError> {
    let requests = finance_requests(ctx, positive, params)?;
    let reqs: Vec<ChatRequest> = requests.iter().map(|(_, r)| r.clone()).collect();
    let results = ctx.gateway.complete_many(&reqs);
    let paired = requests.into_iter().map(|(p, _)| p).zip(results).collect();
    parse_finance_variants(positive, paired, stats)
}

pub fn rephrase_request(ctx: &StageContext<'_>, positive: &QueryRecord) -> Result<ChatRequest, StageError> {
    require_kept(positive)?;
    let text = ctx
        .prompts
        .get(TemplateId::Rephrase)
        .render(&[("query", &positive.text)])?;
    Ok(ctx.generation_request(
        &ctx.endpoints.rephrase,
        TemplateId::Rephrase.as_str(),
        vec![Part::text(text)],
    ))
}

/// Builds the rephrased record, or returns the original with a flag when the
/// rephrasing is unusable (identical, empty, or the call failed).
pub fn parse_rephrase(
    positive: &QueryRecord,
    result: Result<String, GatewayError>,
    stats: &mut StageStats,
) -> QueryRecord {
    let flagged = |flag: &str, stats: &mut StageStats| {
        stats.bump(&format!("rephrase.{flag}"));
        let mut q = positive.clone();
        q.add_flag(flag);
        q
    };
    let text = match result {
        Ok(t) => t,
        Err(e) => {
            tracing::warn!(query_id = %positive.query_id, error = %e, "rephrase failed, keeping original");
            return flagged(FLAG_REPHRASE_FAILED, stats);
        }
    };
    let candidate = json_array(&text).and_then(|v| v.into_iter().next()).unwrap_or(text);
    let candidate = candidate
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("")
        .trim_matches(|c| c == '"' || c == '\'')
        .trim()
        .to_string();
    if candidate.is_empty() {
        tracing::warn!(query_id = %positive.query_id, "empty rephrase, keeping original");
        return flagged(FLAG_REPHRASE_EMPTY, stats);
    }
    if normalize_text(&candidate) == positive.normalized_text() {
        return flagged(FLAG_REPHRASE_NOOP, stats);
    }
    stats.bump("rephrase.rephrased");
    let mut q = QueryRecord::new(
        format!("{}/reph", positive.query_id),
        &positive.page_id,
        candidate,
        Polarity::Positive,
        QueryKind::RephrasedPositive,
    );
    q.parent_query_id = Some(positive.query_id.clone());
    q
}

pub fn rephrase_positive(
    ctx: &StageContext<'_>,
    positive: &QueryRecord,
    stats: &mut StageStats,
) -> Result<QueryRecord, StageError> {
    let request = rephrase_request(ctx, positive)?;
    Ok(parse_rephrase(positive, ctx.gateway.complete(&request), stats))
}

/// Positions (into `n` items sorted by id) picked for rephrasing.
///
/// Items are visited in id order starting at an offset derived from the seed;
/// position `r` is picked when `floor((r+1)·f) > floor(r·f)`. This spreads
/// picks evenly, takes every other item at `f = 0.5`, and always picks exactly
/// `floor(n·f)` items.
pub fn rephrase_positions(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let f = if fraction.is_nan() {
        0.0
    } else {
        fraction.clamp(0.0, 1.0)
    };
    let offset = (seed % n as u64) as usize;
    let floor_at = |r: usize| (r as f64 * f).floor() as u64;
    (0..n)
        .filter(|&i| {
            let r = (i + offset) % n;
            floor_at(r + 1) > floor_at(r)
        })
        .collect()
}

/// Deterministic subset of positives to rephrase, returned in id order.
pub fn select_for_rephrasing(positives: &[QueryRecord], fraction: f64, seed: u64) -> Vec<QueryRecord> {
    let mut sorted: Vec<&QueryRecord> = positives.iter().collect();
    sorted.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    rephrase_positions(sorted.len(), fraction, seed)
        .into_iter()
        .map(|i| sorted[i].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{Decoding, StageEndpoints};
    use crate::corpus::PromptVariant;
    use crate::gateway::{EndpointConfig, Gateway, MockResponse, MockRule, MockScript, ScriptedMock, MATCH_ANY};
    use crate::prompts::PromptSet;
    use std::sync::Arc;

    struct Fixture {
        gateway: Gateway,
        prompts: PromptSet,
        endpoints: StageEndpoints,
        decoding: Decoding,
        mock: Arc<ScriptedMock>,
    }

    impl Fixture {
        fn new(rules: Vec<MockRule>) -> Self {
            let mock = Arc::new(ScriptedMock::new(MockScript { rules, default: None }));
            Self {
                gateway: Gateway::new([EndpointConfig::local("ep", 4)], mock.clone()).unwrap(),
                prompts: PromptSet::builtin(),
                endpoints: StageEndpoints::single("ep"),
                decoding: Decoding::default(),
                mock,
            }
        }

        fn ctx(&self) -> StageContext<'_> {
            StageContext {
                gateway: &self.gateway,
                prompts: &self.prompts,
                endpoints: &self.endpoints,
                decoding: &self.decoding,
            }
        }
    }

    fn kept_positive(text: &str) -> QueryRecord {
        let mut q = QueryRecord::new("p1/pos/0", "p1", text, Polarity::Positive, QueryKind::GeneratedPositive);
        q.set_verdict(PromptVariant::A, true);
        q.set_verdict(PromptVariant::B, true);
        q.verification = Verification::Kept;
        q
    }

    fn page(dir: &std::path::Path) -> PageRecord {
        let path = dir.join("p1.png");
        std::fs::write(&path, [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A]).unwrap();
        PageRecord {
            page_id: "p1".into(),
            image_path: path,
            corpus: "test".into(),
            meta: Default::default(),
        }
    }

    #[test]
    fn parse_json_array() {
        assert_eq!(parse_query_list(r#"["a","b"]"#), vec!["a", "b"]);
        assert_eq!(
            parse_query_list("```json\n[\"a\", {\"question\": \"b\"}, 3, \"  \"]\n```"),
            vec!["a", "b"]
        );
    }

    #[test]
    fn parse_numbered_and_bulleted() {
        assert_eq!(parse_query_list("1. a\n2. b"), vec!["a", "b"]);
        assert_eq!(parse_query_list("- a\n* b\n• c"), vec!["a", "b", "c"]);
    }

    #[test]
    fn parse_nothing() {
        assert!(parse_query_list("no questions found").is_empty());
        assert!(parse_query_list("").is_empty());
    }

    #[test]
    fn parse_bare_question() {
        assert_eq!(
            parse_query_list("What was IBM's revenue in 2024?"),
            vec!["What was IBM's revenue in 2024?"]
        );
    }

    #[test]
    fn parse_prose_fixture() {
        let text = include_str!("../tests/fixtures/prose_numbered.txt");
        assert_eq!(
            parse_query_list(text),
            vec![
                "What was the total operating income reported by Contoso for fiscal year 2021?",
                "How did the share of cloud revenue change between 2019 and 2021?",
            ]
        );
    }

    #[test]
    fn positives_from_json_array() {
        let dir = tempfile::tempdir().unwrap();
        let list: Vec<String> = (0..10).map(|i| format!("question {i}?")).collect();
        let fx = Fixture::new(vec![MockRule::repeat(
            "positive_gen",
            MATCH_ANY,
            vec![MockResponse::text(serde_json::to_string(&list).unwrap())],
        )]);
        let mut stats = StageStats::new();
        let out = generate_positive_candidates(&fx.ctx(), &page(dir.path()), &GenerationParams::default(), &mut stats)
            .unwrap();
        assert_eq!(out.len(), 10);
        assert!(out
            .iter()
            .all(|q| q.verification == Verification::Unverified && q.page_id == "p1"));
        assert_eq!(out[3].query_id, "p1/pos/3");
        let sent = &fx.mock.requests()[0];
        assert!(sent.user_text().contains("Write 10 questions"));
        assert_eq!(sent.temperature, 0.7);
    }

    #[test]
    fn positives_collapse_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let mut list: Vec<String> = (0..8).map(|i| format!("question {i}?")).collect();
        list.push("question  1?".into());
        list.push(" question 5? ".into());
        let fx = Fixture::new(vec![MockRule::repeat(
            MATCH_ANY,
            MATCH_ANY,
            vec![MockResponse::text(serde_json::to_string(&list).unwrap())],
        )]);
        let mut stats = StageStats::new();
        let out = generate_positive_candidates(&fx.ctx(), &page(dir.path()), &GenerationParams::default(), &mut stats)
            .unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(stats.get("positive.duplicates_dropped"), 2);
    }

    #[test]
    fn missing_image_is_a_stage_error() {
        let fx = Fixture::new(vec![]);
        let p = PageRecord {
            page_id: "gone".into(),
            image_path: "/nonexistent/x.png".into(),
            corpus: "c".into(),
            meta: Default::default(),
        };
        let err = generate_positive_candidates(&fx.ctx(), &p, &GenerationParams::default(), &mut StageStats::new())
            .unwrap_err();
        assert!(matches!(err, StageError::Image { .. }));
        assert_eq!(fx.mock.calls(), 0);
    }

    #[test]
    fn twelve_generic_variants() {
        let pos = kept_positive("What was revenue in 2022?");
        let list: Vec<String> = (0..12).map(|i| format!("What was margin in {}?", 2000 + i)).collect();
        let fx = Fixture::new(vec![MockRule::repeat(
            "negative_gen_generic",
            MATCH_ANY,
            vec![MockResponse::text(serde_json::to_string(&list).unwrap())],
        )]);
        let mut stats = StageStats::new();
        let out = generate_negative_variants(&fx.ctx(), &pos, &GenerationParams::default(), &mut stats).unwrap();
        assert_eq!(out.len(), 12);
        for q in &out {
            assert_eq!(q.parent_query_id.as_deref(), Some("p1/pos/0"));
            assert_eq!(q.page_id, "p1");
            assert_eq!(q.kind, QueryKind::GenericNegative);
        }
        assert_eq!(fx.mock.calls(), 1);
        assert!(fx.mock.requests()[0].user_text().contains("Write 12 new questions"));
    }

    #[test]
    fn generic_variant_equal_to_positive_dropped() {
        let pos = kept_positive("What was revenue in 2022?");
        let mut list: Vec<String> = (0..11).map(|i| format!("What was margin in {}?", 2000 + i)).collect();
        list.insert(4, "What  was revenue in 2022?".into());
        let fx = Fixture::new(vec![MockRule::repeat(
            MATCH_ANY,
            MATCH_ANY,
            vec![MockResponse::text(serde_json::to_string(&list).unwrap())],
        )]);
        let mut stats = StageStats::new();
        let out = generate_negative_variants(&fx.ctx(), &pos, &GenerationParams::default(), &mut stats).unwrap();
        assert_eq!(out.len(), 11);
        assert_eq!(stats.get("generic.equal_to_positive_dropped"), 1);
    }

    #[test]
    fn empty_generic_response() {
        let pos = kept_positive("q?");
        let fx = Fixture::new(vec![MockRule::repeat(
            MATCH_ANY,
            MATCH_ANY,
            vec![MockResponse::text("")],
        )]);
        let mut stats = StageStats::new();
        let out = generate_negative_variants(&fx.ctx(), &pos, &GenerationParams::default(), &mut stats).unwrap();
        assert!(out.is_empty());
        assert_eq!(stats.get("generic.empty_responses"), 1);
    }

    #[test]
    fn negatives_require_kept_positive() {
        let mut pos = kept_positive("q?");
        pos.verification = Verification::Unverified;
        let fx = Fixture::new(vec![]);
        let err = generate_negative_variants(&fx.ctx(), &pos, &GenerationParams::default(), &mut StageStats::new())
            .unwrap_err();
        assert!(matches!(err, StageError::Precondition(_)));
    }

    #[test]
    fn finance_year_variant() {
        let pos = kept_positive("What was IBM's revenue in 2022?");
        let fx = Fixture::new(vec![
            MockRule::repeat(
                MATCH_ANY,
                "the year",
                vec![MockResponse::text("What was IBM's revenue in 2024?")],
            ),
            MockRule::repeat(
                MATCH_ANY,
                "company name",
                vec![MockResponse::text("What was Apple's revenue in 2022?")],
            ),
            MockRule::repeat(MATCH_ANY, MATCH_ANY, vec![MockResponse::text("[]")]),
        ]);
        let params = GenerationParams {
            finance_properties: vec![
                FinanceProperty::Year,
                FinanceProperty::CompanyName,
                FinanceProperty::NumericalValue,
            ],
            ..Default::default()
        };
        let mut stats = StageStats::new();
        let err = generate_finance_variants(&fx.ctx(), &pos, &params, &mut stats).unwrap_err();
        assert!(matches!(err, StageError::InsufficientVariants { produced: 2, .. }));

        let requests = finance_requests(&fx.ctx(), &pos, &params).unwrap();
        let results = vec![(FinanceProperty::Year, Ok("What was IBM's revenue in 2024?".to_string()))];
        let err = parse_finance_variants(&pos, results, &mut StageStats::new()).unwrap_err();
        assert!(matches!(err, StageError::InsufficientVariants { produced: 1, .. }));
        assert_eq!(requests.len(), 3);

        let mut stats = StageStats::new();
        let results = vec![
            (FinanceProperty::Year, Ok("What was IBM's revenue in 2024?".to_string())),
            (
                FinanceProperty::CompanyName,
                Ok("What was Apple's revenue in 2022?".to_string()),
            ),
            (
                FinanceProperty::FinancialMetric,
                Ok("What were IBM's sales in 2022?".to_string()),
            ),
        ];
        let out = parse_finance_variants(&pos, results, &mut stats).unwrap();
        assert_eq!(out[0].text, "What was IBM's revenue in 2024?");
        assert_eq!(out[0].property, Some(FinanceProperty::Year));
        assert_eq!(out[0].query_id, "p1/pos/0/fin/year/0");
    }

    #[test]
    fn finance_one_request_per_property_in_order() {
        let pos = kept_positive("What was IBM's revenue in 2022?");
        let rules = FinanceProperty::ALL
            .iter()
            .map(|p| {
                MockRule::repeat(
                    MATCH_ANY,
                    p.description(),
                    vec![MockResponse::text(format!("[\"variant for {}?\"]", p.as_str()))],
                )
            })
            .collect();
        let fx = Fixture::new(rules);
        let mut stats = StageStats::new();
        let out = generate_finance_variants(&fx.ctx(), &pos, &GenerationParams::default(), &mut stats).unwrap();
        assert_eq!(fx.mock.calls(), 6);
        let tags: Vec<_> = out.iter().map(|q| q.property.unwrap()).collect();
        assert_eq!(tags, FinanceProperty::ALL.to_vec());
        let sent = fx.mock.requests();
        for p in FinanceProperty::ALL {
            let hits = sent.iter().filter(|r| r.user_text().contains(p.description())).count();
            assert_eq!(hits, 1, "{p}");
        }
        assert!(sent.iter().all(|r| r.request_tag == "negative_gen_finance"));
    }

    #[test]
    fn finance_echo_dropped() {
        let pos = kept_positive("What was IBM's revenue in 2022?");
        let mut rules = vec![MockRule::repeat(
            MATCH_ANY,
            FinanceProperty::CompanyName.description(),
            vec![MockResponse::text("What was IBM's revenue in 2022?")],
        )];
        rules.push(MockRule::repeat(
            MATCH_ANY,
            "the year",
            vec![MockResponse::text("What was IBM's revenue in 2023?")],
        ));
        rules.push(MockRule::repeat(
            MATCH_ANY,
            "numerical",
            vec![MockResponse::text("What was IBM's revenue in 2022, in euros?")],
        ));
        rules.push(MockRule::repeat(
            MATCH_ANY,
            MATCH_ANY,
            vec![MockResponse::text("What was IBM's profit in 2022?")],
        ));
        let fx = Fixture::new(rules);
        let mut stats = StageStats::new();
        let out = generate_finance_variants(&fx.ctx(), &pos, &GenerationParams::default(), &mut stats).unwrap();
        assert!(out.iter().all(|q| q.property != Some(FinanceProperty::CompanyName)));
        assert_eq!(stats.get("finance.equal_to_positive_dropped"), 1);
        // the three catch-all properties produce the same text; only the first survives
        assert_eq!(out.len(), 3);
        assert_eq!(stats.get("finance.duplicates_dropped"), 2);
    }

    #[test]
    fn rephrase_outcomes() {
        let pos = kept_positive("What was revenue in 2022?");
        let mut stats = StageStats::new();
        let r = parse_rephrase(&pos, Ok("How much revenue was earned in 2022?".into()), &mut stats);
        assert_eq!(r.kind, QueryKind::RephrasedPositive);
        assert_eq!(r.parent_query_id.as_deref(), Some("p1/pos/0"));
        assert_eq!(r.verification, Verification::Unverified);
        assert_eq!(r.polarity, Polarity::Positive);

        let r = parse_rephrase(&pos, Ok(" What was revenue in 2022? ".into()), &mut stats);
        assert_eq!(r.query_id, pos.query_id);
        assert!(r.has_flag(FLAG_REPHRASE_NOOP));

        let r = parse_rephrase(&pos, Ok("".into()), &mut stats);
        assert_eq!(r.text, pos.text);
        assert!(r.has_flag(FLAG_REPHRASE_EMPTY));

        let r = parse_rephrase(&pos, Err(GatewayError::Offline), &mut stats);
        assert!(r.has_flag(FLAG_REPHRASE_FAILED));
    }

    #[test]
    fn rephrase_through_gateway() {
        let pos = kept_positive("What was revenue in 2022?");
        let fx = Fixture::new(vec![MockRule::repeat(
            "rephrase",
            MATCH_ANY,
            vec![MockResponse::text("\"How much revenue in 2022?\"")],
        )]);
        let r = rephrase_positive(&fx.ctx(), &pos, &mut StageStats::new()).unwrap();
        assert_eq!(r.text, "How much revenue in 2022?");
    }

    fn positives(n: usize) -> Vec<QueryRecord> {
        (0..n)
            .map(|i| kept_positive(&format!("q{i}?")))
            .enumerate()
            .map(|(i, mut q)| {
                q.query_id = format!("q{i:04}");
                q
            })
            .collect()
    }

    #[test]
    fn rephrase_half_of_four() {
        assert_eq!(select_for_rephrasing(&positives(4), 0.5, 0).len(), 2);
        assert!(select_for_rephrasing(&positives(4), 0.0, 3).is_empty());
        assert_eq!(select_for_rephrasing(&positives(4), 1.0, 3).len(), 4);
    }

    #[test]
    fn rephrase_selection_is_deterministic_and_order_free() {
        let ps = positives(37);
        let a = select_for_rephrasing(&ps, 0.5, 11);
        let mut shuffled = ps.clone();
        shuffled.reverse();
        let b = select_for_rephrasing(&shuffled, 0.5, 11);
        assert_eq!(a, b);
        assert_eq!(a.len(), 18);
    }

    #[test]
    fn rephrase_half_takes_every_other() {
        let picks = rephrase_positions(10, 0.5, 0);
        assert_eq!(picks, vec![1, 3, 5, 7, 9]);
        let shifted = rephrase_positions(10, 0.5, 1);
        assert_eq!(shifted, vec![0, 2, 4, 6, 8]);
    }

    proptest::proptest! {
        #[test]
        fn rephrase_count_is_floor(n in 0usize..500, f in 0.0f64..=1.0, seed in proptest::prelude::any::<u64>()) {
            let picks = rephrase_positions(n, f, seed);
            proptest::prop_assert_eq!(picks.len() as u64, (n as f64 * f).floor() as u64);
        }
    }
}
