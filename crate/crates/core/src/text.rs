//! Word-level helpers shared by preprocessing and offense tagging.

/// Lowercased alphanumeric runs of `text`. Everything else separates words,
/// so "first-degree" yields two words.
pub fn words(text: &str) -> Vec<String> {
    raw_words(text).map(str::to_lowercase).collect()
}

/// Alphanumeric runs of `text` with their original case.
pub fn raw_words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
}

const SUFFIXES: &[&str] = &["s", "es", "d", "ed", "ing", "er", "ers"];

/// True when `word` is `base` or one of its regular inflections
/// ("oppose" → "opposed", "opposing"; "assault" → "assaulted").
pub fn is_inflection_of(word: &str, base: &str) -> bool {
    if word == base {
        return true;
    }
    let stem_e = base.strip_suffix('e');
    SUFFIXES.iter().any(|suffix| {
        word.strip_suffix(suffix)
            .is_some_and(|head| head == base || Some(head) == stem_e)
    })
}

/// How a keyword's words are compared against text words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WordMatch {
    /// Whole-word equality after lowercasing.
    #[default]
    Exact,
    /// Whole-word equality, also accepting regular inflections of the keyword.
    Inflected,
}

impl WordMatch {
    fn matches(self, text_word: &str, keyword_word: &str) -> bool {
        match self {
            WordMatch::Exact => text_word == keyword_word,
            WordMatch::Inflected => is_inflection_of(text_word, keyword_word),
        }
    }
}

/// A keyword or multi-word phrase, pre-split into lowercase words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phrase {
    source: String,
    words: Vec<String>,
}

impl Phrase {
    pub fn new(source: &str) -> Self {
        Phrase {
            source: source.trim().to_string(),
            words: words(source),
        }
    }

    /// Keeps the keyword's case, for case-sensitive matching.
    pub fn new_case_sensitive(source: &str) -> Self {
        Phrase {
            source: source.trim().to_string(),
            words: raw_words(source).map(str::to_string).collect(),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Whether the phrase occurs as a contiguous run of whole words.
    pub fn occurs_in(&self, text_words: &[String], mode: WordMatch) -> bool {
        let n = self.words.len();
        if n == 0 || n > text_words.len() {
            return false;
        }
        text_words.windows(n).any(|window| {
            window
                .iter()
                .zip(&self.words)
                .all(|(t, k)| mode.matches(t, k))
        })
    }
}

/// Parses a one-entry-per-line list. Blank lines and `#` comments are skipped.
pub fn parse_word_list(contents: &str) -> Vec<String> {
    contents
        .lines()
        .map(|line| line.split('#').next().unwrap_or("").trim())
        .filter(|line| !line.is_empty())
        .map(str::to_string)
        .collect()
}
