//! Dual-prompt answerability verification and the keep/filter policies.
//!
//! Every query is judged against its page by two differently worded prompts
//! (variants A and B). Positives survive only when both say answerable;
//! negatives survive only when both say not answerable. Output the verifier
//! cannot be read resolves toward dropping the query.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::StageContext;
use crate::corpus::{PageRecord, Polarity, PromptVariant, QueryRecord, Verification};
use crate::gateway::{ChatRequest, GatewayError, Part};
use crate::generation::{page_image, StageError};
use crate::prompts::TemplateId;
use crate::stats::StageStats;

pub const FLAG_AMBIGUOUS: &str = "ambiguous";

/// One verifier answer, kept for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub query_id: String,
    pub prompt_variant: PromptVariant,
    pub answerable: bool,
    pub ambiguous: bool,
    pub raw_text: String,
}

impl crate::corpus::Record for Verdict {
    fn check(&self) -> Result<(), crate::corpus::InvariantError> {
        if self.query_id.is_empty() {
            return Err(crate::corpus::InvariantError::new("query_id", "must be non-empty"));
        }
        Ok(())
    }

    fn label(&self) -> String {
        format!("{}#{}", self.query_id, self.prompt_variant)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extracted {
    Answerable,
    NotAnswerable,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("missing verdict for prompt variant {0}")]
pub struct MissingVerdict(pub PromptVariant);

fn word_verdict(word: &str) -> Option<Extracted> {
    let w: String = word
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match w.as_str() {
        "yes" => Some(Extracted::Answerable),
        "no" => Some(Extracted::NotAnswerable),
        _ => None,
    }
}

/// Reads a yes/no verdict from the leading token, or failing that from the
/// first or last token of the final non-empty line. Case-insensitive.
pub fn extract_yes_no(raw_text: &str) -> Extracted {
    let text = raw_text.trim();
    if let Some(v) = text.split_whitespace().next().and_then(word_verdict) {
        return v;
    }
    if let Some(last_line) = text.lines().map(str::trim).rfind(|l| !l.is_empty()) {
        let words: Vec<&str> = last_line.split_whitespace().collect();
        if let Some(v) = words.last().and_then(|w| word_verdict(w)) {
            return v;
        }
        if let Some(v) = words.first().and_then(|w| word_verdict(w)) {
            return v;
        }
    }
    Extracted::Ambiguous
}

/// Lenient fallback: a verdict word anywhere, provided only one kind occurs.
fn extract_anywhere(raw_text: &str) -> Extracted {
    let mut found = None;
    for v in raw_text.split_whitespace().filter_map(word_verdict) {
        match found {
            None => found = Some(v),
            Some(prev) if prev != v => return Extracted::Ambiguous,
            _ => {}
        }
    }
    found.unwrap_or(Extracted::Ambiguous)
}

/// Positives are kept iff both prompts judge them answerable.
pub fn keep_positive(verdicts: (Option<bool>, Option<bool>)) -> Result<bool, MissingVerdict> {
    let (a, b) = require_both(verdicts)?;
    Ok(a && b)
}

/// Negatives are kept iff both prompts judge them unanswerable.
pub fn keep_negative(verdicts: (Option<bool>, Option<bool>)) -> Result<bool, MissingVerdict> {
    let (a, b) = require_both(verdicts)?;
    Ok(!a && !b)
}

fn require_both((a, b): (Option<bool>, Option<bool>)) -> Result<(bool, bool), MissingVerdict> {
    Ok((
        a.ok_or(MissingVerdict(PromptVariant::A))?,
        b.ok_or(MissingVerdict(PromptVariant::B))?,
    ))
}

fn template(variant: PromptVariant) -> TemplateId {
    match variant {
        PromptVariant::A => TemplateId::VerifyA,
        PromptVariant::B => TemplateId::VerifyB,
    }
}

pub fn verify_request(
    ctx: &StageContext<'_>,
    image: &Part,
    query: &QueryRecord,
    variant: PromptVariant,
) -> Result<ChatRequest, StageError> {
    let id = template(variant);
    let text = ctx.prompts.get(id).render(&[("query", &query.text)])?;
    Ok(ctx.greedy_request(
        &ctx.endpoints.verify,
        id.as_str(),
        vec![image.clone(), Part::text(text)],
    ))
}

/// Interprets a verifier completion for `query`.
///
/// With `strict` set, only the leading/final-line rule applies; otherwise a
/// single unambiguous yes/no anywhere in the text is also accepted.
/// Unreadable output counts as answerable for negatives and as not
/// answerable for positives, and is flagged ambiguous.
pub fn verdict_from_text(query: &QueryRecord, variant: PromptVariant, raw_text: String, strict: bool) -> Verdict {
    let mut extracted = extract_yes_no(&raw_text);
    if extracted == Extracted::Ambiguous && !strict {
        extracted = extract_anywhere(&raw_text);
    }
    let (answerable, ambiguous) = match extracted {
        Extracted::Answerable => (true, false),
        Extracted::NotAnswerable => (false, false),
        Extracted::Ambiguous => (query.polarity == Polarity::Negative, true),
    };
    Verdict {
        query_id: query.query_id.clone(),
        prompt_variant: variant,
        answerable,
        ambiguous,
        raw_text,
    }
}

pub fn judge_answerability(
    ctx: &StageContext<'_>,
    page: &PageRecord,
    query: &QueryRecord,
    variant: PromptVariant,
    strict: bool,
) -> Result<Verdict, StageError> {
    if query.page_id != page.page_id {
        return Err(StageError::Precondition(format!(
            "{} is anchored to {}, not {}",
            query.query_id, query.page_id, page.page_id
        )));
    }
    let request = verify_request(ctx, &page_image(page)?, query, variant)?;
    let raw = ctx.gateway.complete(&request).map_err(|source| StageError::Gateway {
        id: query.query_id.clone(),
        source,
    })?;
    Ok(verdict_from_text(query, variant, raw, strict))
}

/// Records verdicts on the query and applies the policy for its polarity.
/// Leaves the query unverified if either variant is missing.
pub fn apply_verdicts(query: &mut QueryRecord, verdicts: &[&Verdict]) {
    for v in verdicts {
        query.set_verdict(v.prompt_variant, v.answerable);
        if v.ambiguous {
            query.add_flag(FLAG_AMBIGUOUS);
        }
    }
    let pair = (query.verdict(PromptVariant::A), query.verdict(PromptVariant::B));
    let decision = match query.polarity {
        Polarity::Positive => keep_positive(pair),
        Polarity::Negative => keep_negative(pair),
    };
    query.verification = match decision {
        Ok(true) => Verification::Kept,
        Ok(false) => Verification::Rejected,
        Err(_) => Verification::Unverified,
    };
}

/// Verifies queries anchored to one page with both prompt variants, running
/// all requests through one bounded fan-out. Returns the audit verdicts;
/// queries whose requests failed stay unverified.
pub fn verify_page_queries(
    ctx: &StageContext<'_>,
    page: &PageRecord,
    queries: &mut [QueryRecord],
    strict: bool,
    stats: &mut StageStats,
) -> Result<Vec<Verdict>, StageError> {
    let image = page_image(page)?;
    let mut requests = Vec::with_capacity(queries.len() * 2);
    for q in queries.iter() {
        if q.page_id != page.page_id {
            return Err(StageError::Precondition(format!(
                "{} is anchored to {}, not {}",
                q.query_id, q.page_id, page.page_id
            )));
        }
        for variant in [PromptVariant::A, PromptVariant::B] {
            requests.push(verify_request(ctx, &image, q, variant)?);
        }
    }
    let results = ctx.gateway.complete_many(&requests);
    Ok(collect_verdicts(queries, results, strict, stats))
}

/// Pairs results (two per query, A then B) with their queries and applies the
/// keep policy.
pub fn collect_verdicts(
    queries: &mut [QueryRecord],
    results: Vec<Result<String, GatewayError>>,
    strict: bool,
    stats: &mut StageStats,
) -> Vec<Verdict> {
    assert_eq!(results.len(), queries.len() * 2, "two results per query");
    let mut audit = Vec::with_capacity(results.len());
    let mut results = results.into_iter();
    for q in queries.iter_mut() {
        let mut got = Vec::with_capacity(2);
        for variant in [PromptVariant::A, PromptVariant::B] {
            match results.next().expect("length checked") {
                Ok(raw) => got.push(verdict_from_text(q, variant, raw, strict)),
                Err(e) => {
                    tracing::warn!(query_id = %q.query_id, %variant, error = %e, "verification call failed");
                    stats.bump("verify.failed_requests");
                }
            }
        }
        stats.add("verify.ambiguous", got.iter().filter(|v| v.ambiguous).count() as u64);
        apply_verdicts(q, &got.iter().collect::<Vec<_>>());
        let key = match (q.polarity, q.verification) {
            (_, Verification::Unverified) => "verify.unverified",
            (Polarity::Positive, Verification::Kept) => "verify.positive_kept",
            (Polarity::Positive, Verification::Rejected) => "verify.positive_rejected",
            (Polarity::Negative, Verification::Kept) => "verify.negative_kept",
            (Polarity::Negative, Verification::Rejected) => "verify.negative_rejected",
        };
        stats.bump(key);
        audit.extend(got);
    }
    audit
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("only {kept} kept negatives, need {needed}")]
pub struct InsufficientNegatives {
    pub kept: usize,
    pub needed: usize,
}

/// Picks exactly `k` negatives for a triplet.
///
/// Generic negatives: the first `k` in generation order. Finance negatives:
/// round-robin over property tags in order of first appearance, so no tag
/// repeats while an unused one remains.
pub fn select_triplet_negatives(kept: &[QueryRecord], k: usize) -> Result<Vec<QueryRecord>, InsufficientNegatives> {
    if kept.len() < k {
        return Err(InsufficientNegatives {
            kept: kept.len(),
            needed: k,
        });
    }
    if kept.iter().all(|q| q.property.is_none()) {
        return Ok(kept[..k].to_vec());
    }
    let mut buckets: Vec<(Option<crate::corpus::FinanceProperty>, Vec<&QueryRecord>)> = Vec::new();
    for q in kept {
        match buckets.iter_mut().find(|(p, _)| *p == q.property) {
            Some((_, bucket)) => bucket.push(q),
            None => buckets.push((q.property, vec![q])),
        }
    }
    let mut picked = Vec::with_capacity(k);
    let mut round = 0;
    while picked.len() < k {
        for (_, bucket) in &buckets {
            if let Some(q) = bucket.get(round) {
                picked.push((*q).clone());
                if picked.len() == k {
                    break;
                }
            }
        }
        round += 1;
    }
    Ok(picked)
}
