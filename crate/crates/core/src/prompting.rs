//! Prompt assembly for the five audit configurations and parsing of the
//! model's yes/no answer and verbalized confidence.
//!
//! Templates are plain UTF-8 files with `{NAME}` placeholders, substituted
//! in a single pass (placeholder-looking text inside a case fact is left
//! alone). The shipped set lives in `templates/`; a directory with the same
//! file names overrides it.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::text::words;

/// Starts every precedent section in a system prompt.
pub const PRECEDENT_DELIMITER: &str = "### Precedent ";

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Configuration {
    Audit,
    AuditRag,
    FtVanilla,
    FtVanillaRag,
    FtTypedRag,
}

impl Configuration {
    /// Report column order.
    pub const ALL: [Configuration; 5] = [
        Configuration::Audit,
        Configuration::AuditRag,
        Configuration::FtVanilla,
        Configuration::FtVanillaRag,
        Configuration::FtTypedRag,
    ];

    pub fn uses_rag(self) -> bool {
        matches!(
            self,
            Configuration::AuditRag | Configuration::FtVanillaRag | Configuration::FtTypedRag
        )
    }

    pub fn uses_typed_facts(self) -> bool {
        self == Configuration::FtTypedRag
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Configuration::Audit => "AUDIT",
            Configuration::AuditRag => "AUDIT_RAG",
            Configuration::FtVanilla => "FT_VANILLA",
            Configuration::FtVanillaRag => "FT_VANILLA_RAG",
            Configuration::FtTypedRag => "FT_TYPED_RAG",
        }
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            Configuration::Audit => "audit",
            Configuration::AuditRag => "audit-rag",
            Configuration::FtVanilla => "ft-vanilla",
            Configuration::FtVanillaRag => "ft-vanilla-rag",
            Configuration::FtTypedRag => "ft-typed-rag",
        }
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Configuration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Configuration::ALL
            .into_iter()
            .find(|c| c.cli_name() == s || c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown configuration `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    /// Image locator (file path, `http(s)://` or `data:` URL); `None` for
    /// text-only requests.
    pub image_ref: Option<String>,
    pub asks_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub system: String,
    pub system_rag: String,
    pub precedent: String,
    pub precedent_facts_only: String,
    pub user: String,
    pub question: String,
    pub confidence: String,
}

const TEMPLATE_FILES: [&str; 7] = [
    "system.txt",
    "system_rag.txt",
    "precedent.txt",
    "precedent_facts_only.txt",
    "user.txt",
    "question.txt",
    "confidence.txt",
];

fn clean(template: &str) -> String {
    template.trim_end_matches(['\n', '\r']).to_string()
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            system: clean(include_str!("../templates/system.txt")),
            system_rag: clean(include_str!("../templates/system_rag.txt")),
            precedent: clean(include_str!("../templates/precedent.txt")),
            precedent_facts_only: clean(include_str!("../templates/precedent_facts_only.txt")),
            user: clean(include_str!("../templates/user.txt")),
            question: clean(include_str!("../templates/question.txt")),
            confidence: clean(include_str!("../templates/confidence.txt")),
        }
    }
}

impl Templates {
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let path = dir.join(name);
            fs::read_to_string(&path)
                .map(|s| clean(&s))
                .map_err(|e| Error::io(path, e))
        };
        let templates = Templates {
            system: read(TEMPLATE_FILES[0])?,
            system_rag: read(TEMPLATE_FILES[1])?,
            precedent: read(TEMPLATE_FILES[2])?,
            precedent_facts_only: read(TEMPLATE_FILES[3])?,
            user: read(TEMPLATE_FILES[4])?,
            question: read(TEMPLATE_FILES[5])?,
            confidence: read(TEMPLATE_FILES[6])?,
        };
        templates.validate()?;
        Ok(templates)
    }

    pub fn validate(&self) -> Result<()> {
        let require = |name: &str, body: &str, placeholder: &str| {
            if body.contains(placeholder) {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "template `{name}` is missing the {placeholder} placeholder"
                )))
            }
        };
        require("system_rag.txt", &self.system_rag, "{PRECEDENTS}")?;
        require("user.txt", &self.user, "{CASE_FACT}")?;
        require("user.txt", &self.user, "{QUESTION}")?;
        for (name, body) in [
            ("precedent.txt", &self.precedent),
            ("precedent_facts_only.txt", &self.precedent_facts_only),
        ] {
            require(name, body, "{PRECEDENT_FACT}")?;
            if !body.starts_with(PRECEDENT_DELIMITER) {
                return Err(Error::Config(format!(
                    "template `{name}` must start with `{PRECEDENT_DELIMITER}`"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over every template, in a fixed order, with file names.
    pub fn sha256(&self) -> String {
        let bodies = [
            &self.system,
            &self.system_rag,
            &self.precedent,
            &self.precedent_facts_only,
            &self.user,
            &self.question,
            &self.confidence,
        ];
        let mut joined = String::new();
        for (name, body) in TEMPLATE_FILES.iter().zip(bodies) {
            joined.push_str(name);
            joined.push('\0');
            joined.push_str(body);
            joined.push('\0');
        }
        sha256_hex(joined)
    }

    /// The question block: binary question, then optionally the confidence ask.
    pub fn question_text(&self, asks_confidence: bool) -> String {
        if asks_confidence {
            format!("{} {}", self.question, self.confidence)
        } else {
            self.question.clone()
        }
    }

    pub fn user_turn(&self, fact_text: &str, asks_confidence: bool) -> String {
        render(
            &self.user,
            &[
                ("CASE_FACT", fact_text),
                ("QUESTION", &self.question_text(asks_confidence)),
            ],
        )
    }
}

/// Single-pass `{NAME}` substitution. Unknown placeholders stay verbatim.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                match values.iter().find(|(k, _)| *k == name) {
                    Some((_, value)) => out.push_str(value),
                    None => {
                        out.push('{');
                        out.push_str(name);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// A retrieved precedent ready for the prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Precedent {
    pub case_id: String,
    pub text: String,
    pub bail_granted: bool,
}

/// The query fact as the model sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryText<'a> {
    Fact(&'a str),
    /// A typed-fact's rendered text.
    Typed(&'a str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptOptions {
    pub asks_confidence: bool,
    /// Leave precedent outcomes out of the system prompt.
    pub precedent_facts_only: bool,
}

impl Default for PromptOptions {
    fn default() -> Self {
        PromptOptions {
            asks_confidence: true,
            precedent_facts_only: false,
        }
    }
}

pub fn precedent_block(precedents: &[Precedent], templates: &Templates, facts_only: bool) -> String {
    let template = if facts_only {
        &templates.precedent_facts_only
    } else {
        &templates.precedent
    };
    precedents
        .iter()
        .enumerate()
        .map(|(i, p)| {
            render(
                template,
                &[
                    ("RANK", &(i + 1).to_string()),
                    ("PRECEDENT_FACT", &p.text),
                    (
                        "OUTCOME",
                        if p.bail_granted {
                            "bail granted"
                        } else {
                            "bail denied"
                        },
                    ),
                ],
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn build_prompt(
    cfg: Configuration,
    query: QueryText<'_>,
    precedents: Option<&[Precedent]>,
    image_ref: Option<&str>,
    templates: &Templates,
    options: PromptOptions,
) -> Result<PromptBundle> {
    let fact_text = match (cfg.uses_typed_facts(), query) {
        (true, QueryText::Typed(text)) | (false, QueryText::Fact(text)) => text,
        (true, QueryText::Fact(_)) => {
            return Err(Error::Assembly(format!("{cfg} needs a typed-fact query")))
        }
        (false, QueryText::Typed(_)) => {
            return Err(Error::Assembly(format!("{cfg} takes a plain case fact")))
        }
    };
    let system_text = match (cfg.uses_rag(), precedents) {
        (true, Some(list)) if !list.is_empty() => render(
            &templates.system_rag,
            &[(
                "PRECEDENTS",
                &precedent_block(list, templates, options.precedent_facts_only),
            )],
        ),
        (true, _) => {
            return Err(Error::Assembly(format!("{cfg} requires retrieved precedents")))
        }
        (false, None) => templates.system.clone(),
        (false, Some(_)) => {
            return Err(Error::Assembly(format!("{cfg} does not take precedents")))
        }
    };
    Ok(PromptBundle {
        system_text,
        user_text: templates.user_turn(fact_text, options.asks_confidence),
        image_ref: image_ref.map(str::to_string),
        asks_confidence: options.asks_confidence,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Yes,
    No,
    Unparseable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    High,
    Medium,
    Low,
    Absent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RuleFile {
    version: String,
    rules: Vec<RuleSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RuleSpec {
    pattern: String,
    decision: Decision,
}

/// Ordered regex rules applied to the normalized response; first match wins.
#[derive(Debug, Clone)]
pub struct DecisionRules {
    version: String,
    source_sha256: String,
    rules: Vec<(Regex, Decision)>,
}

pub const DEFAULT_DECISION_RULES: &str = include_str!("../templates/decision_rules.json");

impl DecisionRules {
    pub fn parse(json: &str) -> Result<Self> {
        let file: RuleFile = serde_json::from_str(json)
            .map_err(|e| Error::Config(format!("decision rule file: {e}")))?;
        let mut rules = Vec::with_capacity(file.rules.len());
        for spec in file.rules {
            if spec.decision == Decision::Unparseable {
                return Err(Error::Config(
                    "decision rules may only map to yes or no".into(),
                ));
            }
            let regex = Regex::new(&spec.pattern)
                .map_err(|e| Error::Config(format!("rule `{}`: {e}", spec.pattern)))?;
            rules.push((regex, spec.decision));
        }
        Ok(DecisionRules {
            version: file.version,
            source_sha256: sha256_hex(json),
            rules,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&json)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn sha256(&self) -> &str {
        &self.source_sha256
    }

    pub fn parse_decision(&self, raw: &str) -> Decision {
        let normalized = normalize(raw);
        self.rules
            .iter()
            .find(|(re, _)| re.is_match(&normalized))
            .map_or(Decision::Unparseable, |(_, d)| *d)
    }
}

impl Default for DecisionRules {
    fn default() -> Self {
        DecisionRules::parse(DEFAULT_DECISION_RULES).expect("shipped rules parse")
    }
}

/// Lowercase, punctuation to spaces, whitespace collapsed.
pub fn normalize(raw: &str) -> String {
    let replaced: String = raw
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .to_lowercase();
    replaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn parse_decision(raw: &str) -> Decision {
    DecisionRules::default().parse_decision(raw)
}

fn leading_decision_word(text: &str) -> bool {
    matches!(words(text).first().map(String::as_str), Some("yes" | "no"))
}

/// First standalone high/medium/low after the decision sentence. A
/// single-sentence reply is searched after its leading yes/no word.
pub fn parse_confidence(raw: &str) -> Confidence {
    let sentences = crate::corpus::segment_sentences(raw, &['.', '?', '!', '\n']);
    let search: Vec<String> = match sentences.split_first() {
        Some((first, rest)) if !rest.is_empty() && leading_decision_word(first) => {
            rest.iter().flat_map(|s| words(s)).collect()
        }
        _ => {
            let mut all = words(raw);
            if matches!(all.first().map(String::as_str), Some("yes" | "no")) {
                all.remove(0);
            }
            all
        }
    };
    search
        .iter()
        .find_map(|w| match w.as_str() {
            "high" => Some(Confidence::High),
            "medium" => Some(Confidence::Medium),
            "low" => Some(Confidence::Low),
            _ => None,
        })
        .unwrap_or(Confidence::Absent)
}
