//! Small synthetic corpora for offline runs and tests.
//!
//! Page images are PNG signatures followed by a `page=<id>;` marker, enough
//! to pass image loading and to let a scripted mock tell pages apart.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::corpus::{write_jsonl, FinanceProperty, JsonlError, PageRecord};
use crate::gateway::{MockResponse, MockRule, MockScript};
use crate::prompts::TemplateId;

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

/// Marker embedded in the image bytes of a synthetic page.
pub fn page_marker(page_id: &str) -> String {
    format!("page={page_id};")
}

pub fn placeholder_png(page_id: &str) -> Vec<u8> {
    let mut bytes = PNG_SIGNATURE.to_vec();
    bytes.extend_from_slice(page_marker(page_id).as_bytes());
    bytes
}

/// Writes `n` pages named `{prefix}{i:03}` under `dir/pages/` plus
/// `dir/pages.jsonl`, and returns the records.
pub fn write_corpus(dir: &Path, corpus: &str, prefix: &str, n: usize) -> Result<Vec<PageRecord>, JsonlError> {
    let images = dir.join("pages");
    fs::create_dir_all(&images).map_err(|source| JsonlError::Io {
        path: images.clone(),
        source,
    })?;
    let mut pages = Vec::with_capacity(n);
    for i in 0..n {
        let page_id = format!("{prefix}{i:03}");
        let image_path = images.join(format!("{page_id}.png"));
        fs::write(&image_path, placeholder_png(&page_id)).map_err(|source| JsonlError::Io {
            path: image_path.clone(),
            source,
        })?;
        pages.push(PageRecord {
            page_id,
            image_path,
            corpus: corpus.to_string(),
            meta: BTreeMap::new(),
        });
    }
    write_jsonl(&pages, &dir.join("pages.jsonl"))?;
    Ok(pages)
}

/// Query markers the demo script's verifier keys on.
pub const SOLID: &str = "[solid]";
pub const WEAK: &str = "[weak]";
pub const HARD: &str = "[hard]";
pub const LEAKY: &str = "[leaky]";

fn class_marker(index: usize) -> &'static str {
    if index.is_multiple_of(2) {
        "(cls-a)"
    } else {
        "(cls-b)"
    }
}

/// Pages (by index) whose candidates all fail verification.
pub fn demo_has_no_positive(index: usize) -> bool {
    index % 7 == 5
}

/// Pages (by index) left with only two generic negatives after verification.
pub fn demo_is_restrictive(index: usize) -> bool {
    index % 11 == 3
}

/// A deterministic script for the whole pipeline over synthetic pages.
///
/// Every page yields one `[weak]` candidate (answerable by only one
/// verifier prompt) and, except for [`demo_has_no_positive`] pages, one
/// `[solid]` candidate. Generic negatives mix `[hard]` (kept) and `[leaky]`
/// (answerable by prompt B, dropped); [`demo_is_restrictive`] pages keep only
/// two. Finance variants leak for the first three properties on even pages,
/// so triplets across the corpus cover all six properties.
pub fn demo_script(page_ids: &[String]) -> MockScript {
    let mut rules = Vec::new();
    let text = |s: String| vec![MockResponse::text(s)];
    for (i, pid) in page_ids.iter().enumerate() {
        let cls = class_marker(i);
        let mut list = format!("1. {WEAK} Which chart on {pid} shows the margin trend?\n");
        if !demo_has_no_positive(i) {
            list.push_str(&format!(
                "2. {SOLID} What was the operating income reported on {pid} in 2022? {cls}\n"
            ));
        }
        rules.push(MockRule::repeat(
            TemplateId::PositiveGen.as_str(),
            &page_marker(pid),
            text(list),
        ));

        let hard = if demo_is_restrictive(i) { 2 } else { 4 };
        let negatives: Vec<String> = (0..5)
            .map(|j| {
                let marker = if j < hard { HARD } else { LEAKY };
                format!(
                    "{marker} What was the operating income reported on {pid} in {}?",
                    2010 + j
                )
            })
            .collect();
        rules.push(MockRule::repeat(
            TemplateId::NegativeGenGeneric.as_str(),
            &format!("on {pid} "),
            text(serde_json::to_string(&negatives).expect("strings serialize")),
        ));
        rules.push(MockRule::repeat(
            TemplateId::Rephrase.as_str(),
            &format!("on {pid} "),
            text(format!(
                "How much operating income did the filing on {pid} show for 2022?"
            )),
        ));
    }
    for (i, cls) in ["(cls-a)", "(cls-b)"].into_iter().enumerate() {
        for (k, property) in FinanceProperty::ALL.into_iter().enumerate() {
            let marker = if i == 0 && k < 3 { LEAKY } else { HARD };
            let variant = format!("{marker} What was the operating income with a changed {property} in 2022?");
            rules.push(
                MockRule::repeat(
                    TemplateId::NegativeGenFinance.as_str(),
                    property.description(),
                    text(serde_json::to_string(&[variant]).expect("strings serialize")),
                )
                .and_contains(cls),
            );
        }
    }
    for (marker, a, b) in [
        (SOLID, "Yes", "Yes"),
        (WEAK, "Yes", "No"),
        (HARD, "No", "No"),
        (LEAKY, "No", "Yes, the page shows it"),
    ] {
        rules.push(MockRule::repeat(TemplateId::VerifyA.as_str(), marker, text(a.into())));
        rules.push(MockRule::repeat(TemplateId::VerifyB.as_str(), marker, text(b.into())));
    }
    MockScript { rules, default: None }
}
