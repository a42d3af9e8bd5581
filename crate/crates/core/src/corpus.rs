//! Case ingestion: stopword removal, argument-sentence filtering, length
//! gating and the seeded train/test split.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::digest::{round_half_up, seeded_key};
use crate::error::{Error, Result};
use crate::text::{parse_word_list, words, Phrase, WordMatch};

pub const DEFAULT_LEGAL_STOPWORDS: &str = include_str!("../data/legal_stopwords.txt");
pub const DEFAULT_ARGUMENT_KEYWORDS: &str = include_str!("../data/argument_keywords.txt");
pub const DEFAULT_MIN_TOKEN_LENGTH: usize = 50;

/// One line of the raw input corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCase {
    pub case_id: String,
    pub facts_and_arguments: String,
    pub bail_granted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// A preprocessed case fact. `split` is `None` until [`split_corpus`] runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseFact {
    pub case_id: String,
    pub text: String,
    pub token_count: usize,
    pub bail_granted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Pluggable token counter for model-exact length checks.
pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;
    fn count_tokens(&self, text: &str) -> usize;
}

/// Named tokenizer configuration.
#[derive(Clone, Default)]
pub enum TokenizerSpec {
    /// Runs of non-whitespace characters.
    #[default]
    Whitespace,
    /// Runs of alphanumeric characters (punctuation never counts).
    UnicodeWords,
    Custom(Arc<dyn Tokenizer>),
}

impl fmt::Debug for TokenizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TokenizerSpec({})", self.name())
    }
}


impl TokenizerSpec {
    pub fn name(&self) -> &str {
        match self {
            TokenizerSpec::Whitespace => "whitespace",
            TokenizerSpec::UnicodeWords => "unicode-words",
            TokenizerSpec::Custom(t) => t.name(),
        }
    }
}

impl FromStr for TokenizerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" => Ok(TokenizerSpec::Whitespace),
            "unicode-words" => Ok(TokenizerSpec::UnicodeWords),
            other => Err(Error::Config(format!("unknown tokenizer `{other}`"))),
        }
    }
}

pub fn count_tokens(text: &str, tokenizer: &TokenizerSpec) -> usize {
    match tokenizer {
        TokenizerSpec::Whitespace => text.split_whitespace().count(),
        TokenizerSpec::UnicodeWords => words(text).len(),
        TokenizerSpec::Custom(t) => t.count_tokens(text),
    }
}

#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    pub legal_stopwords: Vec<String>,
    pub argument_keywords: Vec<String>,
    pub min_token_length: usize,
    pub tokenizer: TokenizerSpec,
    /// Characters that end a sentence when followed by whitespace.
    pub sentence_terminators: Vec<char>,
    /// Argument keywords also catch regular inflections ("oppose" removes
    /// a sentence containing "opposed").
    pub argument_match: WordMatch,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            legal_stopwords: parse_word_list(DEFAULT_LEGAL_STOPWORDS),
            argument_keywords: parse_word_list(DEFAULT_ARGUMENT_KEYWORDS),
            min_token_length: DEFAULT_MIN_TOKEN_LENGTH,
            tokenizer: TokenizerSpec::Whitespace,
            sentence_terminators: vec!['.', '?', '!'],
            argument_match: WordMatch::Inflected,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_token_length < 1 {
            return Err(Error::Config("min_token_length must be at least 1".into()));
        }
        if self.legal_stopwords.is_empty() {
            return Err(Error::Config("legal stopword list is empty".into()));
        }
        if self.argument_keywords.is_empty() {
            return Err(Error::Config("argument keyword list is empty".into()));
        }
        if self.sentence_terminators.is_empty() {
            return Err(Error::Config("no sentence terminators configured".into()));
        }
        Ok(())
    }

    /// Compiles the lexicons once for repeated [`Preprocessor::apply`] calls.
    pub fn compile(&self) -> Result<Preprocessor<'_>> {
        self.validate()?;
        Ok(Preprocessor {
            cfg: self,
            stopwords: self
                .legal_stopwords
                .iter()
                .map(|w| w.trim().to_lowercase())
                .collect(),
            keywords: self
                .argument_keywords
                .iter()
                .map(|k| Phrase::new(k))
                .filter(|p| !p.is_empty())
                .collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    TooShort,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Preprocessed {
    Kept(CaseFact),
    Dropped {
        case_id: String,
        reason: DropReason,
        token_count: usize,
    },
}

impl Preprocessed {
    pub fn kept(self) -> Option<CaseFact> {
        match self {
            Preprocessed::Kept(fact) => Some(fact),
            Preprocessed::Dropped { .. } => None,
        }
    }
}

pub struct Preprocessor<'a> {
    cfg: &'a PreprocessConfig,
    stopwords: HashSet<String>,
    keywords: Vec<Phrase>,
}

impl Preprocessor<'_> {
    pub fn apply(&self, raw: &RawCase) -> Result<Preprocessed> {
        if raw.case_id.trim().is_empty() {
            return Err(Error::Ingestion {
                case_id: raw.case_id.clone(),
                reason: "empty case_id".into(),
            });
        }
        if raw.facts_and_arguments.trim().is_empty() {
            return Err(Error::Ingestion {
                case_id: raw.case_id.clone(),
                reason: "empty facts_and_arguments".into(),
            });
        }

        let stripped = self.remove_stopwords(&raw.facts_and_arguments);
        let facts = self.remove_argument_sentences(&stripped);
        let token_count = count_tokens(&facts, &self.cfg.tokenizer);
        if token_count < self.cfg.min_token_length {
            return Ok(Preprocessed::Dropped {
                case_id: raw.case_id.clone(),
                reason: DropReason::TooShort,
                token_count,
            });
        }
        Ok(Preprocessed::Kept(CaseFact {
            case_id: raw.case_id.clone(),
            text: facts,
            token_count,
            bail_granted: raw.bail_granted,
            split: None,
        }))
    }

    /// Deletes stopword tokens. Sentence-ending punctuation attached to a
    /// deleted token moves onto the previous kept token so segmentation
    /// is unaffected.
    fn remove_stopwords(&self, text: &str) -> String {
        let mut kept: Vec<String> = Vec::new();
        for token in text.split_whitespace() {
            let core = token.trim_matches(|c: char| !c.is_alphanumeric());
            if core.is_empty() || !self.stopwords.contains(&core.to_lowercase()) {
                kept.push(token.to_string());
                continue;
            }
            let trailing = token.rsplit_once(core).map_or("", |(_, tail)| tail);
            if trailing.chars().any(|c| self.is_terminator(c)) {
                if let Some(prev) = kept.last_mut() {
                    if !prev.ends_with(|c: char| self.is_terminator(c)) {
                        prev.push_str(trailing);
                    }
                }
            }
        }
        kept.join(" ")
    }

    fn remove_argument_sentences(&self, text: &str) -> String {
        segment_sentences(text, &self.cfg.sentence_terminators)
            .into_iter()
            .filter(|sentence| !self.contains_argument_keyword(sentence))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn contains_argument_keyword(&self, sentence: &str) -> bool {
        let sentence_words = words(sentence);
        self.keywords
            .iter()
            .any(|k| k.occurs_in(&sentence_words, self.cfg.argument_match))
    }

    fn is_terminator(&self, c: char) -> bool {
        self.cfg.sentence_terminators.contains(&c)
    }
}

/// Splits after any terminator that is followed by whitespace (or ends the
/// text). Returned sentences are trimmed and never empty.
pub fn segment_sentences<'t>(text: &'t str, terminators: &[char]) -> Vec<&'t str> {
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((idx, c)) = chars.next() {
        if !terminators.contains(&c) {
            continue;
        }
        let at_boundary = match chars.peek() {
            None => true,
            Some((_, next)) => next.is_whitespace(),
        };
        if at_boundary {
            let end = idx + c.len_utf8();
            let sentence = text[start..end].trim();
            if !sentence.is_empty() {
                sentences.push(sentence);
            }
            start = end;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        sentences.push(tail);
    }
    sentences
}

pub fn preprocess_case(raw: &RawCase, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    cfg.compile()?.apply(raw)
}

/// Assigns splits. The `round(train_fraction · n)` facts with the smallest
/// seeded key (see [`seeded_key`]) go to train; input order is preserved.
pub fn split_corpus(
    mut facts: Vec<CaseFact>,
    train_fraction: f64,
    seed: u64,
) -> Result<Vec<CaseFact>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Split(format!(
            "train fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    if facts.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 facts to split, got {}",
            facts.len()
        )));
    }
    let n_train = round_half_up(train_fraction * facts.len() as f64).min(facts.len());

    let mut order: Vec<(u64, usize)> = facts
        .iter()
        .enumerate()
        .map(|(i, f)| (seeded_key(seed, &f.case_id), i))
        .collect();
    order.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then_with(|| facts[a.1].case_id.cmp(&facts[b.1].case_id))
    });
    for (rank, &(_, idx)) in order.iter().enumerate() {
        facts[idx].split = Some(if rank < n_train {
            Split::Train
        } else {
            Split::Test
        });
    }
    Ok(facts)
}

/// Reads raw cases from JSONL. Lines that are not valid UTF-8 or not valid
/// records fail with an ingestion error naming the case when it can be
/// recovered from the line.
pub fn read_raw_cases(path: &Path) -> Result<Vec<RawCase>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in bytes.split(|b| *b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let text = std::str::from_utf8(line).map_err(|_| Error::Ingestion {
            case_id: recover_case_id(line).unwrap_or_else(|| format!("<line {}>", idx + 1)),
            reason: "text is not valid UTF-8".into(),
        })?;
        let raw: RawCase = serde_json::from_str(text).map_err(|e| Error::Ingestion {
            case_id: recover_case_id(line).unwrap_or_else(|| format!("<line {}>", idx + 1)),
            reason: e.to_string(),
        })?;
        if !seen.insert(raw.case_id.clone()) {
            return Err(Error::Ingestion {
                case_id: raw.case_id,
                reason: "duplicate case_id".into(),
            });
        }
        out.push(raw);
    }
    Ok(out)
}

fn recover_case_id(line: &[u8]) -> Option<String> {
    let lossy = String::from_utf8_lossy(line);
    let after = lossy.split("\"case_id\"").nth(1)?;
    let value = after.trim_start().strip_prefix(':')?.trim_start();
    let value = value.strip_prefix('"')?;
    Some(value.split('"').next()?.to_string())
}

/// Loads a plain-text word list (one entry per line, `#` comments).
pub fn load_word_list(path: &Path) -> Result<Vec<String>> {
    let contents = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_word_list(&contents))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(text: &str) -> RawCase {
        RawCase {
            case_id: "c1".into(),
            facts_and_arguments: text.into(),
            bail_granted: true,
        }
    }

    fn cfg_with(keywords: &[&str], min: usize) -> PreprocessConfig {
        PreprocessConfig {
            argument_keywords: keywords.iter().map(|s| s.to_string()).collect(),
            min_token_length: min,
            ..PreprocessConfig::default()
        }
    }

    fn filler(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn count_tokens_cases() {
        assert_eq!(count_tokens("", &TokenizerSpec::Whitespace), 0);
        assert_eq!(count_tokens("bail", &TokenizerSpec::Whitespace), 1);
        assert_eq!(count_tokens("  a  b\tc\n", &TokenizerSpec::Whitespace), 3);
        assert_eq!(count_tokens("a, b.", &TokenizerSpec::UnicodeWords), 2);
        assert!("gpt-tokenizer".parse::<TokenizerSpec>().is_err());
    }

    #[test]
    fn opposed_sentence_removed() {
        let cfg = cfg_with(&["oppose"], 1);
        let out = preprocess_case(
            &raw("The bail was opposed by counsel. Two kilograms recovered."),
            &cfg,
        )
        .unwrap()
        .kept()
        .unwrap();
        assert_eq!(out.text, "Two kilograms recovered.");
        assert_eq!(out.token_count, 3);
    }

    #[test]
    fn five_sentence_fixture_exact() {
        // Hand-applied: stopwords "learned" and "hon'ble" go first, then the
        // sentences with "granted" / "rejected" / "oppose(s)" are removed.
        let text = "The accused was arrested on 3 March. The learned counsel submitted that bail be granted. \
                    Police recovered a knife from the Hon'ble premises! The prosecution opposes the plea? \
                    The earlier application was rejected.";
        let cfg = cfg_with(&["oppose", "granted", "rejected"], 1);
        let out = preprocess_case(&raw(text), &cfg).unwrap().kept().unwrap();
        assert_eq!(
            out.text,
            "The accused was arrested on 3 March. Police recovered a knife from the premises!"
        );
    }

    #[test]
    fn stopword_with_terminator_keeps_boundary() {
        let cfg = cfg_with(&["granted"], 1);
        let out = preprocess_case(&raw("He met Shri. Bail was granted. Done here."), &cfg)
            .unwrap()
            .kept()
            .unwrap();
        assert_eq!(out.text, "He met. Done here.");
    }

    #[test]
    fn length_gate() {
        let cfg = cfg_with(&["oppose"], 50);
        let short = preprocess_case(&raw(&filler(49)), &cfg).unwrap();
        assert_eq!(
            short,
            Preprocessed::Dropped {
                case_id: "c1".into(),
                reason: DropReason::TooShort,
                token_count: 49
            }
        );
        let ok = preprocess_case(&raw(&filler(50)), &cfg).unwrap();
        assert!(matches!(ok, Preprocessed::Kept(ref f) if f.token_count == 50));
    }

    #[test]
    fn identity_when_nothing_matches() {
        let cfg = cfg_with(&["oppose"], 50);
        let text = filler(200);
        let out = preprocess_case(&raw(&text), &cfg).unwrap().kept().unwrap();
        assert_eq!(out.text, text);
        assert_eq!(out.token_count, 200);
    }

    #[test]
    fn invalid_inputs() {
        let cfg = PreprocessConfig::default();
        assert!(matches!(
            preprocess_case(&raw("  "), &cfg),
            Err(Error::Ingestion { .. })
        ));
        let bad = PreprocessConfig {
            min_token_length: 0,
            ..PreprocessConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let empty = cfg_with(&[], 1);
        assert!(empty.validate().is_err());
    }

    #[test]
    fn segmentation() {
        let s = segment_sentences("A b. C d? E! No.split here. Tail", &['.', '?', '!']);
        assert_eq!(s, vec!["A b.", "C d?", "E!", "No.split here.", "Tail"]);
        assert!(segment_sentences("   ", &['.']).is_empty());
    }

    fn facts(n: usize) -> Vec<CaseFact> {
        (0..n)
            .map(|i| CaseFact {
                case_id: format!("case-{i:05}"),
                text: "x".into(),
                token_count: 1,
                bail_granted: i % 2 == 0,
                split: None,
            })
            .collect()
    }

    #[test]
    fn split_cardinality_and_determinism() {
        let a = split_corpus(facts(10), 0.8, 7).unwrap();
        let train = a.iter().filter(|f| f.split == Some(Split::Train)).count();
        assert_eq!(train, 8);
        assert_eq!(a.len() - train, 2);
        let b = split_corpus(facts(10), 0.8, 7).unwrap();
        assert_eq!(a, b);
        let c = split_corpus(facts(10), 0.8, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_rounding_at_scale() {
        let out = split_corpus(facts(16_104), 0.8, 0).unwrap();
        let train = out.iter().filter(|f| f.split == Some(Split::Train)).count();
        assert_eq!(train, 12_883);
        assert_eq!(out.len() - train, 3_221);
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split_corpus(facts(1), 0.8, 0), Err(Error::Split(_))));
        assert!(matches!(split_corpus(facts(4), 1.0, 0), Err(Error::Split(_))));
        assert!(matches!(split_corpus(facts(4), 0.0, 0), Err(Error::Split(_))));
    }

    #[test]
    fn raw_reader_reports_case_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.jsonl");
        let mut bytes = br#"{"case_id":"ok","facts_and_arguments":"a b","bail_granted":true}"#.to_vec();
        bytes.push(b'\n');
        bytes.extend_from_slice(b"{\"case_id\":\"bad-7\",\"facts_and_arguments\":\"\xff\xfe\",\"bail_granted\":false}\n");
        fs::write(&path, bytes).unwrap();
        match read_raw_cases(&path) {
            Err(Error::Ingestion { case_id, .. }) => assert_eq!(case_id, "bad-7"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn raw_reader_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.jsonl");
        let line = r#"{"case_id":"d","facts_and_arguments":"a b","bail_granted":true}"#;
        fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        assert!(matches!(read_raw_cases(&path), Err(Error::Ingestion { .. })));
    }
}
