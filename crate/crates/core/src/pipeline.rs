//! Stage drivers: positive generation with verification, and hard negative
//! generation with verification and triplet assembly. Work is processed in
//! chunks; within a chunk each phase goes out as one bounded fan-out.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::context::StageContext;
use crate::corpus::{PageRecord, PromptVariant, QueryRecord, TripletRecord, Verification, NEGATIVES_PER_TRIPLET};
use crate::gateway::{ChatRequest, GatewayError, Part};
use crate::generation::{
    finance_requests, negative_request, page_image, parse_finance_variants, parse_negative_variants,
    parse_positive_candidates, positive_request, GenerationParams, StageError,
};
use crate::stats::StageStats;
use crate::verification::{collect_verdicts, select_triplet_negatives, verify_request, Verdict};

pub const DEFAULT_CHUNK_SIZE: usize = 64;

/// Knobs shared by the stage drivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageOptions {
    /// Only the leading/final-line rule reads verifier output.
    pub strict_ambiguous: bool,
    pub chunk_size: usize,
}

impl Default for StageOptions {
    fn default() -> Self {
        Self {
            strict_ambiguous: true,
            chunk_size: DEFAULT_CHUNK_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeMode {
    Generic,
    Finance,
}

impl fmt::Display for NegativeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegativeMode::Generic => "generic",
            NegativeMode::Finance => "finance",
        })
    }
}

impl FromStr for NegativeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "generic" => Ok(NegativeMode::Generic),
            "finance" => Ok(NegativeMode::Finance),
            other => Err(format!("unknown mode `{other}`, expected generic or finance")),
        }
    }
}

/// A page or query left out of a stage's output, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

impl Skipped {
    fn new(id: &str, reason: impl fmt::Display) -> Self {
        Self {
            id: id.to_string(),
            reason: reason.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PositiveStage {
    /// One kept positive per page, in page order.
    pub positives: Vec<QueryRecord>,
    /// Every candidate with its verification outcome.
    pub candidates: Vec<QueryRecord>,
    pub verdicts: Vec<Verdict>,
    pub skipped: Vec<Skipped>,
}

#[derive(Debug, Clone, Default)]
pub struct NegativeStage {
    pub triplets: Vec<TripletRecord>,
    /// Every generated negative with its verification outcome.
    pub negatives: Vec<QueryRecord>,
    pub verdicts: Vec<Verdict>,
    pub excluded: Vec<Skipped>,
}

/// Verifies each group of queries against its page image. Returns the
/// verdicts; queries are updated in place.
fn verify_groups(
    ctx: &StageContext<'_>,
    groups: &mut [(&Part, Vec<QueryRecord>)],
    strict: bool,
    stats: &mut StageStats,
) -> Result<Vec<Verdict>, StageError> {
    let mut requests = Vec::new();
    for (image, queries) in groups.iter() {
        for q in queries {
            for variant in [PromptVariant::A, PromptVariant::B] {
                requests.push(verify_request(ctx, image, q, variant)?);
            }
        }
    }
    let mut results = ctx.gateway.complete_many(&requests).into_iter();
    let mut verdicts = Vec::with_capacity(requests.len());
    for (_, queries) in groups.iter_mut() {
        let slice: Vec<Result<String, GatewayError>> = results.by_ref().take(queries.len() * 2).collect();
        verdicts.extend(collect_verdicts(queries, slice, strict, stats));
    }
    Ok(verdicts)
}

/// Generates positive candidates for every page, verifies them with both
/// prompts, and keeps the first surviving candidate per page.
pub fn run_positive_stage(
    ctx: &StageContext<'_>,
    pages: &[PageRecord],
    params: &GenerationParams,
    options: StageOptions,
    stats: &mut StageStats,
) -> Result<PositiveStage, StageError> {
    params.validate()?;
    let mut out = PositiveStage::default();
    for chunk in pages.chunks(options.chunk_size.max(1)) {
        let mut ready = Vec::with_capacity(chunk.len());
        let mut requests = Vec::with_capacity(chunk.len());
        for page in chunk {
            stats.bump("positive.pages");
            match page_image(page).and_then(|img| Ok((img, positive_request(ctx, page, params)?))) {
                Ok((image, request)) => {
                    ready.push((page, image));
                    requests.push(request);
                }
                Err(StageError::Image { message, .. }) => {
                    tracing::warn!(page_id = %page.page_id, %message, "skipping page");
                    stats.bump("positive.pages_skipped_image");
                    out.skipped
                        .push(Skipped::new(&page.page_id, format!("image: {message}")));
                }
                Err(e) => return Err(e),
            }
        }
        let results = ctx.gateway.complete_many(&requests);
        let mut groups = Vec::with_capacity(ready.len());
        for ((page, image), result) in ready.iter().zip(results) {
            match result {
                Ok(text) => groups.push((image, parse_positive_candidates(page, params, &text, stats))),
                Err(e) => {
                    tracing::warn!(page_id = %page.page_id, error = %e, "positive generation failed");
                    stats.bump("positive.pages_failed");
                    out.skipped
                        .push(Skipped::new(&page.page_id, format!("generation: {e}")));
                }
            }
        }
        out.verdicts
            .extend(verify_groups(ctx, &mut groups, options.strict_ambiguous, stats)?);
        for (_, candidates) in groups {
            match candidates.iter().find(|q| q.verification == Verification::Kept) {
                Some(kept) => {
                    stats.bump("positive.pages_with_positive");
                    out.positives.push(kept.clone());
                }
                None if !candidates.is_empty() => {
                    let page_id = candidates[0].page_id.clone();
                    stats.bump("positive.pages_without_kept");
                    out.skipped
                        .push(Skipped::new(&page_id, "no candidate passed verification"));
                }
                None => {}
            }
            out.candidates.extend(candidates);
        }
    }
    Ok(out)
}

/// Generates hard negatives for each kept positive, verifies them against the
/// positive's page, and assembles one triplet per positive with at least
/// three surviving negatives.
pub fn run_negative_stage(
    ctx: &StageContext<'_>,
    pages: &[PageRecord],
    positives: &[QueryRecord],
    mode: NegativeMode,
    params: &GenerationParams,
    options: StageOptions,
    stats: &mut StageStats,
) -> Result<NegativeStage, StageError> {
    params.validate()?;
    let by_id: HashMap<&str, &PageRecord> = pages.iter().map(|p| (p.page_id.as_str(), p)).collect();
    let prefix = mode.to_string();
    let key = |name: &str| format!("{prefix}.{name}");
    let mut out = NegativeStage::default();
    for chunk in positives.chunks(options.chunk_size.max(1)) {
        let mut ready: Vec<(&QueryRecord, Part, usize)> = Vec::new();
        let mut requests: Vec<ChatRequest> = Vec::new();
        let mut properties = Vec::new();
        for positive in chunk {
            stats.bump(&key("positives"));
            let Some(page) = by_id.get(positive.page_id.as_str()) else {
                stats.bump(&key("positives_without_page"));
                out.excluded.push(Skipped::new(
                    &positive.query_id,
                    format!("page {} not in corpus", positive.page_id),
                ));
                continue;
            };
            let image = match page_image(page) {
                Ok(image) => image,
                Err(e) => {
                    stats.bump(&key("positives_skipped_image"));
                    out.excluded.push(Skipped::new(&positive.query_id, e));
                    continue;
                }
            };
            let built = match mode {
                NegativeMode::Generic => negative_request(ctx, positive, params).map(|r| vec![(None, r)]),
                NegativeMode::Finance => finance_requests(ctx, positive, params)
                    .map(|rs| rs.into_iter().map(|(p, r)| (Some(p), r)).collect()),
            };
            let built = match built {
                Ok(b) => b,
                Err(StageError::Precondition(message)) => {
                    out.excluded.push(Skipped::new(&positive.query_id, message));
                    continue;
                }
                Err(e) => return Err(e),
            };
            ready.push((positive, image, built.len()));
            for (property, request) in built {
                properties.push(property);
                requests.push(request);
            }
        }
        let mut results = ctx.gateway.complete_many(&requests).into_iter();
        let mut properties = properties.into_iter();
        let mut groups: Vec<(&Part, Vec<QueryRecord>)> = Vec::new();
        let mut owners: Vec<&QueryRecord> = Vec::new();
        for (positive, image, n) in &ready {
            let variants = match mode {
                NegativeMode::Generic => match results.next().expect("one result per request") {
                    Ok(text) => Ok(parse_negative_variants(positive, params, &text, stats)),
                    Err(e) => Err(e.to_string()),
                },
                NegativeMode::Finance => {
                    let paired = properties
                        .by_ref()
                        .take(*n)
                        .map(|p| p.expect("finance request has a property"))
                        .zip(results.by_ref().take(*n))
                        .collect();
                    parse_finance_variants(positive, paired, stats).map_err(|e| e.to_string())
                }
            };
            if mode == NegativeMode::Generic {
                properties.next();
            }
            match variants {
                Ok(v) => {
                    groups.push((image, v));
                    owners.push(positive);
                }
                Err(reason) => {
                    tracing::warn!(query_id = %positive.query_id, %reason, "negative generation failed");
                    stats.bump(&key("generation_failed"));
                    out.excluded
                        .push(Skipped::new(&positive.query_id, format!("generation: {reason}")));
                }
            }
        }
        out.verdicts
            .extend(verify_groups(ctx, &mut groups, options.strict_ambiguous, stats)?);
        for (positive, (_, variants)) in owners.into_iter().zip(groups) {
            let kept: Vec<QueryRecord> = variants
                .iter()
                .filter(|q| q.verification == Verification::Kept)
                .cloned()
                .collect();
            match select_triplet_negatives(&kept, NEGATIVES_PER_TRIPLET) {
                Ok(negatives) => {
                    stats.bump("triplets.built");
                    out.triplets.push(TripletRecord {
                        page_id: positive.page_id.clone(),
                        positive: positive.clone(),
                        negatives,
                    });
                }
                Err(e) => {
                    tracing::warn!(query_id = %positive.query_id, page_id = %positive.page_id, "{e}");
                    stats.bump("triplets.insufficient_negatives");
                    out.excluded.push(Skipped::new(&positive.query_id, e));
                }
            }
            out.negatives.extend(variants);
        }
    }
    Ok(out)
}

/// A request a stage would send, rendered but not sent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlannedRequest {
    pub request_tag: String,
    pub endpoint_id: String,
    pub prompt: String,
    pub images: usize,
}

impl PlannedRequest {
    pub fn from_request(request: &ChatRequest) -> Self {
        let images = request
            .messages
            .iter()
            .flat_map(|m| &m.parts)
            .filter(|p| matches!(p, Part::Image { .. }))
            .count();
        Self {
            request_tag: request.request_tag.clone(),
            endpoint_id: request.endpoint_id.clone(),
            prompt: request.user_text(),
            images,
        }
    }
}

/// The first phase of a stage, fully rendered, plus an estimate of the
/// verification calls that would follow (two per generated candidate).
#[derive(Debug, Clone, Default, Serialize)]
pub struct Plan {
    pub requests: Vec<PlannedRequest>,
    pub estimated_verification_calls: u64,
    pub skipped: Vec<Skipped>,
}

impl Plan {
    pub fn counts_by_tag(&self) -> BTreeMap<String, u64> {
        let mut counts = BTreeMap::new();
        for r in &self.requests {
            *counts.entry(r.request_tag.clone()).or_insert(0) += 1;
        }
        counts
    }
}

pub fn plan_positive_stage(
    ctx: &StageContext<'_>,
    pages: &[PageRecord],
    params: &GenerationParams,
) -> Result<Plan, StageError> {
    params.validate()?;
    let mut plan = Plan::default();
    for page in pages {
        match positive_request(ctx, page, params) {
            Ok(r) => {
                plan.requests.push(PlannedRequest::from_request(&r));
                plan.estimated_verification_calls += 2 * params.n_positive_candidates as u64;
            }
            Err(StageError::Image { message, .. }) => plan.skipped.push(Skipped::new(&page.page_id, message)),
            Err(e) => return Err(e),
        }
    }
    Ok(plan)
}

pub fn plan_negative_stage(
    ctx: &StageContext<'_>,
    positives: &[QueryRecord],
    mode: NegativeMode,
    params: &GenerationParams,
) -> Result<Plan, StageError> {
    params.validate()?;
    let mut plan = Plan::default();
    for positive in positives {
        let built = match mode {
            NegativeMode::Generic => negative_request(ctx, positive, params).map(|r| vec![r]),
            NegativeMode::Finance => {
                finance_requests(ctx, positive, params).map(|rs| rs.into_iter().map(|(_, r)| r).collect())
            }
        };
        match built {
            Ok(requests) => {
                plan.requests.extend(requests.iter().map(PlannedRequest::from_request));
                let bound = match mode {
                    NegativeMode::Generic => params.n_negative_variants,
                    NegativeMode::Finance => params.finance_properties.len() * params.n_negative_variants,
                };
                plan.estimated_verification_calls += 2 * bound as u64;
            }
            Err(StageError::Precondition(message)) => plan.skipped.push(Skipped::new(&positive.query_id, message)),
            Err(e) => return Err(e),
        }
    }
    Ok(plan)
}
