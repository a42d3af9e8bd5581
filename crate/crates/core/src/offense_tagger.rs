//! Offense-type lexicons and typed-fact construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::backend::Backend;
use crate::corpus::{CaseFact, Split};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::prompting::PromptBundle;
use crate::text::{raw_words, words, Phrase, WordMatch};

pub const DEFAULT_OFFENSE_LEXICON: &str = include_str!("../data/offense_lexicon.txt");

/// Offense categories carried by the image roster metadata.
pub const ROSTER_OFFENSE_TYPES: [&str; 17] = [
    "weapons violation",
    "theft",
    "battery",
    "narcotics",
    "homicide",
    "burglary",
    "robbery",
    "motor vehicle theft",
    "intimidation",
    "stalking",
    "criminal trespass",
    "liquor law violation",
    "prostitution",
    "human trafficking",
    "public indecency",
    "assault",
    "public peace violation",
];

pub const ANNOTATION_PREFIX: &str = "Offense types: ";

/// Offense type → keyword set. Keys are kept sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OffenseLexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl OffenseLexicon {
    /// Parses the sectioned format: `[offense type]` headers, then one
    /// keyword per line. `#` starts a comment.
    pub fn parse(contents: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (idx, line) in contents.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('[') {
                let name = header
                    .strip_suffix(']')
                    .ok_or_else(|| {
                        Error::Config(format!("lexicon line {}: unterminated header", idx + 1))
                    })?
                    .trim()
                    .to_lowercase();
                if name.is_empty() {
                    return Err(Error::Config(format!("lexicon line {}: empty header", idx + 1)));
                }
                entries.entry(name.clone()).or_default();
                current = Some(name);
                continue;
            }
            let Some(offense) = current.as_ref() else {
                return Err(Error::Config(format!(
                    "lexicon line {}: keyword before any [offense type] header",
                    idx + 1
                )));
            };
            let keywords = entries.get_mut(offense).expect("header inserted");
            if !keywords.iter().any(|k| k.eq_ignore_ascii_case(line)) {
                keywords.push(line.to_string());
            }
        }
        let lexicon = OffenseLexicon { entries };
        lexicon.validate()?;
        Ok(lexicon)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let contents = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&contents)
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_OFFENSE_LEXICON).expect("shipped lexicon parses")
    }

    pub fn from_entries<I, S, K>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<K>)>,
        S: Into<String>,
        K: Into<String>,
    {
        let entries = entries
            .into_iter()
            .map(|(t, ks)| (t.into(), ks.into_iter().map(Into::into).collect()))
            .collect();
        let lexicon = OffenseLexicon { entries };
        lexicon.validate()?;
        Ok(lexicon)
    }

    fn validate(&self) -> Result<()> {
        for (offense, keywords) in &self.entries {
            if keywords.iter().all(|k| Phrase::new(k).is_empty()) {
                return Err(Error::Config(format!(
                    "offense type `{offense}` has no keywords"
                )));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<String>> {
        &self.entries
    }

    pub fn offense_types(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Offense types not in [`ROSTER_OFFENSE_TYPES`].
    pub fn extensions(&self) -> Vec<&str> {
        self.offense_types()
            .filter(|t| !ROSTER_OFFENSE_TYPES.contains(t))
            .collect()
    }

    /// Adds keywords to an offense type, creating it if needed.
    pub fn extend(&mut self, offense_type: &str, keywords: impl IntoIterator<Item = String>) {
        let entry = self.entries.entry(offense_type.to_lowercase()).or_default();
        for k in keywords {
            if !entry.iter().any(|e| e.eq_ignore_ascii_case(&k)) {
                entry.push(k);
            }
        }
    }

    /// Canonical rendering in the file format; stable across parse/render.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (offense, keywords) in &self.entries {
            out.push_str(&format!("[{offense}]\n"));
            for k in keywords {
                out.push_str(k);
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }

    pub fn sha256(&self) -> String {
        sha256_hex(self.to_text())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TagOptions {
    pub case_insensitive: bool,
    /// Also match regular inflections of each keyword word.
    pub stemming: bool,
}

impl Default for TagOptions {
    fn default() -> Self {
        TagOptions {
            case_insensitive: true,
            stemming: false,
        }
    }
}

/// A case fact annotated with its matched offense types.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypedFact {
    pub case_id: String,
    pub text: String,
    pub offense_types: Vec<String>,
    pub rendered_text: String,
    pub bail_granted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Appends the annotation line, or returns the text unchanged when no
/// offense type matched.
pub fn render_typed_text(text: &str, offense_types: &[String]) -> String {
    if offense_types.is_empty() {
        text.to_string()
    } else {
        format!("{text}\n{ANNOTATION_PREFIX}{}", offense_types.join(", "))
    }
}

/// Keywords of `lexicon` that witness each offense type in `text`.
pub fn witnesses<'l>(
    text: &str,
    lexicon: &'l OffenseLexicon,
    options: TagOptions,
) -> BTreeMap<&'l str, Vec<&'l str>> {
    let text_words: Vec<String> = if options.case_insensitive {
        words(text)
    } else {
        raw_words(text).map(str::to_string).collect()
    };
    let mode = if options.stemming {
        WordMatch::Inflected
    } else {
        WordMatch::Exact
    };
    let mut out = BTreeMap::new();
    for (offense, keywords) in lexicon.entries() {
        let hits: Vec<&str> = keywords
            .iter()
            .filter(|k| {
                let phrase = if options.case_insensitive {
                    Phrase::new(k)
                } else {
                    Phrase::new_case_sensitive(k)
                };
                phrase.occurs_in(&text_words, mode)
            })
            .map(String::as_str)
            .collect();
        if !hits.is_empty() {
            out.insert(offense.as_str(), hits);
        }
    }
    out
}

pub fn tag_case(fact: &CaseFact, lexicon: &OffenseLexicon, options: TagOptions) -> TypedFact {
    let offense_types: Vec<String> = witnesses(&fact.text, lexicon, options)
        .into_keys()
        .map(str::to_string)
        .collect();
    TypedFact {
        case_id: fact.case_id.clone(),
        rendered_text: render_typed_text(&fact.text, &offense_types),
        text: fact.text.clone(),
        offense_types,
        bail_granted: fact.bail_granted,
        split: fact.split,
    }
}

const EXPANSION_SYSTEM: &str = "You help build keyword lists for classifying criminal case reports.";

/// Asks a backend for keywords related to `offense_type`. The lexicon is
/// never modified; callers review the returned list before merging it.
pub fn expand_lexicon(backend: &dyn Backend, offense_type: &str, n: usize) -> Result<Vec<String>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let bundle = PromptBundle {
        system_text: EXPANSION_SYSTEM.to_string(),
        user_text: format!(
            "List up to {n} words or short phrases that indicate the offense type \
             \"{offense_type}\" in a police report. Reply with a comma-separated list only."
        ),
        image_ref: None,
        asks_confidence: false,
    };
    let completion = backend
        .complete(&bundle)
        .map_err(|e| Error::Expansion(format!("{offense_type}: {e}")))?;
    let keywords = parse_keyword_list(&completion.text, n);
    if keywords.is_empty() {
        warn!(offense_type, "could not parse any keyword from the expansion response");
    }
    Ok(keywords)
}

/// Splits a free-form list response into at most `n` distinct lowercase
/// keywords, in order of first appearance.
pub fn parse_keyword_list(response: &str, n: usize) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for item in response.split([',', ';', '\n']) {
        let cleaned = item
            .trim()
            .trim_start_matches(|c: char| c.is_ascii_digit() || "-*•.)".contains(c))
            .trim()
            .trim_matches(|c: char| "\"'`{}[]".contains(c))
            .trim_end_matches('.')
            .trim()
            .to_lowercase();
        if cleaned.is_empty() || words(&cleaned).is_empty() || cleaned.len() > 64 {
            continue;
        }
        if seen.insert(cleaned.clone()) {
            out.push(cleaned);
            if out.len() == n {
                break;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fact(text: &str) -> CaseFact {
        CaseFact {
            case_id: "c".into(),
            text: text.into(),
            token_count: 0,
            bail_granted: false,
            split: Some(Split::Test),
        }
    }

    fn sample_sets() -> OffenseLexicon {
        OffenseLexicon::from_entries([
            (
                "homicide",
                vec!["homicide", "murder", "manslaughter", "first-degree murder"],
            ),
            ("theft", vec!["theft", "grand theft", "shoplifting", "burglary"]),
            (
                "narcotics",
                vec!["controlled substance", "cocaine", "heroin", "marijuana"],
            ),
        ])
        .unwrap()
    }

    #[test]
    fn heroin_is_narcotics() {
        let typed = tag_case(
            &fact("Fifty grams of Heroin were seized."),
            &sample_sets(),
            TagOptions::default(),
        );
        assert_eq!(typed.offense_types, vec!["narcotics"]);
        assert_eq!(
            typed.rendered_text,
            "Fifty grams of Heroin were seized.\nOffense types: narcotics"
        );
    }

    #[test]
    fn no_match_leaves_text() {
        let typed = tag_case(&fact("A land dispute."), &sample_sets(), TagOptions::default());
        assert!(typed.offense_types.is_empty());
        assert_eq!(typed.rendered_text, "A land dispute.");
    }

    #[test]
    fn multiple_types_sorted() {
        let typed = tag_case(
            &fact("Charged with shoplifting and later manslaughter."),
            &sample_sets(),
            TagOptions::default(),
        );
        assert_eq!(typed.offense_types, vec!["homicide", "theft"]);
        assert!(typed.rendered_text.ends_with("Offense types: homicide, theft"));
    }

    #[test]
    fn case_and_stemming_flags() {
        let lex = OffenseLexicon::from_entries([("assault", vec!["assault"])]).unwrap();
        let f = fact("He assaulted the guard.");
        assert!(tag_case(&f, &lex, TagOptions::default()).offense_types.is_empty());
        let stem = TagOptions {
            stemming: true,
            ..TagOptions::default()
        };
        assert_eq!(tag_case(&f, &lex, stem).offense_types, vec!["assault"]);

        let f = fact("ASSAULT reported");
        let sensitive = TagOptions {
            case_insensitive: false,
            stemming: false,
        };
        assert!(tag_case(&f, &lex, sensitive).offense_types.is_empty());
        assert_eq!(
            tag_case(&f, &lex, TagOptions::default()).offense_types,
            vec!["assault"]
        );
    }

    #[test]
    fn lexicon_format() {
        let lex = OffenseLexicon::parse(
            "# comment\n[Homicide]\nmurder\nMurder\n\n[theft]\ntheft # trailing\n",
        )
        .unwrap();
        assert_eq!(lex.entries()["homicide"], vec!["murder"]);
        assert_eq!(lex.entries()["theft"], vec!["theft"]);
        assert_eq!(OffenseLexicon::parse(&lex.to_text()).unwrap(), lex);
        assert!(OffenseLexicon::parse("murder\n").is_err());
        assert!(OffenseLexicon::parse("[homicide]\n[theft]\ntheft\n").is_err());
        assert!(OffenseLexicon::parse("[homicide\nmurder\n").is_err());
    }

    #[test]
    fn builtin_covers_roster_categories() {
        let lex = OffenseLexicon::builtin();
        for t in ROSTER_OFFENSE_TYPES {
            assert!(lex.entries().contains_key(t), "{t}");
        }
        assert!(lex.extensions().is_empty());
    }

    #[test]
    fn keyword_list_parsing() {
        assert_eq!(
            parse_keyword_list("murder, manslaughter", 10),
            vec!["murder", "manslaughter"]
        );
        assert_eq!(
            parse_keyword_list("1. Murder\n2. killing\n- murder\n* Killing.", 10),
            vec!["murder", "killing"]
        );
        assert_eq!(parse_keyword_list("a, b, c", 2).len(), 2);
        assert!(parse_keyword_list("???", 5).is_empty());
    }
}
