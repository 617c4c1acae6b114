//! Versioned prompt templates with `{placeholder}` substitution.
//!
//! Templates are plain-text files under `prompts/<version>/<template_id>.txt`.
//! A placeholder is `{name}` where `name` is lowercase ASCII letters and
//! underscores; `{{` and `}}` produce literal braces. Any other brace is
//! copied through unchanged, so JSON snippets in a prompt need no escaping
//! unless they happen to look like a placeholder.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version of the templates bundled into the binary.
pub const BUILTIN_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateId {
    #[serde(rename = "positive_gen")]
    PositiveGen,
    #[serde(rename = "negative_gen_generic")]
    NegativeGenGeneric,
    #[serde(rename = "negative_gen_finance")]
    NegativeGenFinance,
    #[serde(rename = "rephrase")]
    Rephrase,
    #[serde(rename = "verify_A")]
    VerifyA,
    #[serde(rename = "verify_B")]
    VerifyB,
    #[serde(rename = "rerank")]
    Rerank,
}

impl TemplateId {
    pub const ALL: [TemplateId; 7] = [
        TemplateId::PositiveGen,
        TemplateId::NegativeGenGeneric,
        TemplateId::NegativeGenFinance,
        TemplateId::Rephrase,
        TemplateId::VerifyA,
        TemplateId::VerifyB,
        TemplateId::Rerank,
    ];

    /// File stem and request tag for the template.
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::PositiveGen => "positive_gen",
            TemplateId::NegativeGenGeneric => "negative_gen_generic",
            TemplateId::NegativeGenFinance => "negative_gen_finance",
            TemplateId::Rephrase => "rephrase",
            TemplateId::VerifyA => "verify_A",
            TemplateId::VerifyB => "verify_B",
            TemplateId::Rerank => "rerank",
        }
    }

    /// Placeholders the stage binds; each must appear in the body.
    pub fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::PositiveGen => &["n_candidates"],
            TemplateId::NegativeGenGeneric => &["query", "n_candidates"],
            TemplateId::NegativeGenFinance => &["query", "property_desc"],
            TemplateId::Rephrase | TemplateId::VerifyA | TemplateId::VerifyB | TemplateId::Rerank => &["query"],
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("{template}: placeholder {{{name}}} is not bound")]
    Unbound { template: TemplateId, name: String },
    #[error("{template}: required placeholder {{{name}}} missing from body")]
    MissingPlaceholder { template: TemplateId, name: String },
    #[error("{template}: placeholder {{{name}}} is not one this stage binds")]
    UnknownPlaceholder { template: TemplateId, name: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub body: String,
    pub version: String,
}

enum Piece<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

fn is_placeholder_name(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b == b'_')
}

/// Splits a body into literal runs and placeholders. `{{`/`}}` are emitted as
/// single-brace literals.
fn tokenize(body: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let bytes = body.as_bytes();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' | b'}' if bytes.get(i + 1) == Some(&bytes[i]) => {
                pieces.push(Piece::Literal(&body[start..i + 1]));
                i += 2;
                start = i;
            }
            b'{' => {
                if let Some(len) = body[i + 1..].find('}') {
                    let name = &body[i + 1..i + 1 + len];
                    if is_placeholder_name(name) {
                        pieces.push(Piece::Literal(&body[start..i]));
                        pieces.push(Piece::Placeholder(name));
                        i += len + 2;
                        start = i;
                        continue;
                    }
                }
                i += 1;
            }
            _ => i += 1,
        }
    }
    pieces.push(Piece::Literal(&body[start..]));
    pieces
}

impl PromptTemplate {
    pub fn new(template_id: TemplateId, body: impl Into<String>, version: impl Into<String>) -> Self {
        Self {
            template_id,
            body: body.into(),
            version: version.into(),
        }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for piece in tokenize(&self.body) {
            if let Piece::Placeholder(name) = piece {
                if !names.contains(&name) {
                    names.push(name);
                }
            }
        }
        names
    }

    /// Checks that the body uses exactly the placeholders its stage binds.
    pub fn validate(&self) -> Result<(), PromptError> {
        let found = self.placeholders();
        let required = self.template_id.required_placeholders();
        if let Some(name) = required.iter().find(|n| !found.contains(n)) {
            return Err(PromptError::MissingPlaceholder {
                template: self.template_id,
                name: name.to_string(),
            });
        }
        if let Some(name) = found.iter().find(|n| !required.contains(n)) {
            return Err(PromptError::UnknownPlaceholder {
                template: self.template_id,
                name: name.to_string(),
            });
        }
        Ok(())
    }

    /// Substitutes every placeholder; an unbound one is an error.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len() + 64);
        for piece in tokenize(&self.body) {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Placeholder(name) => {
                    let value = bindings
                        .iter()
                        .find(|(k, _)| *k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| PromptError::Unbound {
                            template: self.template_id,
                            name: name.to_string(),
                        })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

/// All templates of one version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub version: String,
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl PromptSet {
    /// The templates shipped in `prompts/v1`, compiled in.
    pub fn builtin() -> Self {
        let body = |id: TemplateId| match id {
            TemplateId::PositiveGen => include_str!("../../../prompts/v1/positive_gen.txt"),
            TemplateId::NegativeGenGeneric => {
                include_str!("../../../prompts/v1/negative_gen_generic.txt")
            }
            TemplateId::NegativeGenFinance => {
                include_str!("../../../prompts/v1/negative_gen_finance.txt")
            }
            TemplateId::Rephrase => include_str!("../../../prompts/v1/rephrase.txt"),
            TemplateId::VerifyA => include_str!("../../../prompts/v1/verify_A.txt"),
            TemplateId::VerifyB => include_str!("../../../prompts/v1/verify_B.txt"),
            TemplateId::Rerank => include_str!("../../../prompts/v1/rerank.txt"),
        };
        let templates = TemplateId::ALL
            .into_iter()
            .map(|id| (id, PromptTemplate::new(id, body(id), BUILTIN_VERSION)))
            .collect();
        Self {
            version: BUILTIN_VERSION.to_string(),
            templates,
        }
    }

    /// Loads `<dir>/<version>/<template_id>.txt` for every template and
    /// validates each one.
    pub fn load(dir: &Path, version: &str) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        for id in TemplateId::ALL {
            let path = dir.join(version).join(format!("{}.txt", id.as_str()));
            let body = std::fs::read_to_string(&path).map_err(|e| PromptError::Io {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let template = PromptTemplate::new(id, body, version);
            template.validate()?;
            templates.insert(id, template);
        }
        Ok(Self {
            version: version.to_string(),
            templates,
        })
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.templates.insert(template.template_id, template);
        self
    }
}
