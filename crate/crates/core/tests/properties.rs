//! Property tests over the preprocessing, pairing, tagging, prompting and
//! export invariants.

use std::collections::{BTreeSet, HashMap, HashSet};

use bailaudit_core::corpus::{
    count_tokens, preprocess_case, split_corpus, CaseFact, PreprocessConfig, Preprocessed,
    RawCase, Split, TokenizerSpec,
};
use bailaudit_core::offense_tagger::{tag_case, witnesses, OffenseLexicon, TagOptions};
use bailaudit_core::pairing::{generate_pairs, Gender, Group, ImageRecord, Race};
use bailaudit_core::prompting::{
    build_prompt, parse_confidence, parse_decision, Configuration, Precedent, PromptOptions,
    QueryText, Templates, PRECEDENT_DELIMITER,
};
use bailaudit_core::sft_export::{export_sft, ExportInputs, Scheme};
use bailaudit_core::text::{words, Phrase, WordMatch};
use proptest::prelude::*;

const VOCAB: &[&str] = &[
    "the", "accused", "was", "found", "near", "market", "with", "a", "bag", "police",
    "recovered", "heroin", "knife", "victim", "injured", "learned", "hon'ble", "oppose",
    "opposed", "counsel", "submitted", "granted", "theft", "of", "motorcycle", "murder",
    "Shri", "Viz", "at", "night", "ganja", "stolen", "property", "argues", "plea",
];

fn sentence() -> impl Strategy<Value = String> {
    (prop::collection::vec(prop::sample::select(VOCAB), 1..12), prop::sample::select(&[".", "!", "?"][..]))
        .prop_map(|(ws, end)| format!("{}{}", ws.join(" "), end))
}

fn document() -> impl Strategy<Value = String> {
    prop::collection::vec(sentence(), 1..10).prop_map(|s| s.join(" "))
}

fn lenient() -> PreprocessConfig {
    PreprocessConfig {
        min_token_length: 1,
        ..PreprocessConfig::default()
    }
}

fn run(text: &str, cfg: &PreprocessConfig) -> Option<CaseFact> {
    let raw = RawCase {
        case_id: "p".into(),
        facts_and_arguments: text.into(),
        bail_granted: true,
    };
    preprocess_case(&raw, cfg).unwrap().kept()
}

fn fact(i: usize, split: Split) -> CaseFact {
    CaseFact {
        case_id: format!("c{i:04}"),
        text: format!("fact number {i}"),
        token_count: 3,
        bail_granted: i % 2 == 1,
        split: Some(split),
    }
}

fn image(i: usize, group: Group) -> ImageRecord {
    let (race, gender) = match group {
        Group::WM => (Race::White, Gender::Male),
        Group::BM => (Race::Black, Gender::Male),
        Group::WF => (Race::White, Gender::Female),
        Group::BF => (Race::Black, Gender::Female),
    };
    ImageRecord {
        image_id: format!("img{i:03}"),
        uri: format!("img{i:03}.jpg"),
        race,
        gender,
        offense_types: vec![],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn preprocessing_is_idempotent_and_shrinks(doc in document()) {
        let cfg = lenient();
        let before = count_tokens(&doc, &cfg.tokenizer);
        if let Some(once) = run(&doc, &cfg) {
            prop_assert!(once.token_count <= before);
            let twice = run(&once.text, &cfg).expect("re-run keeps the fact");
            prop_assert_eq!(&twice.text, &once.text);

            let kw: Vec<Phrase> = cfg.argument_keywords.iter().map(|k| Phrase::new(k)).collect();
            let toks = words(&once.text);
            for k in &kw {
                prop_assert!(!k.occurs_in(&toks, WordMatch::Inflected), "{} survived in {}", k.as_str(), once.text);
            }
            let stop: HashSet<String> = cfg.legal_stopwords.iter().map(|s| s.to_lowercase()).collect();
            for t in once.text.split_whitespace() {
                let bare = t.trim_end_matches(['.', '!', '?']).to_lowercase();
                prop_assert!(!stop.contains(&bare), "stopword {bare} survived");
            }
        }
    }

    #[test]
    fn length_gate_is_exact(n in 1usize..120, min in 1usize..120) {
        let text = vec!["word"; n].join(" ") + ".";
        let cfg = PreprocessConfig { min_token_length: min, ..PreprocessConfig::default() };
        let raw = RawCase { case_id: "g".into(), facts_and_arguments: text, bail_granted: false };
        let kept = matches!(preprocess_case(&raw, &cfg).unwrap(), Preprocessed::Kept(_));
        prop_assert_eq!(kept, n >= min);
    }

    #[test]
    fn split_is_a_partition(n in 2usize..400, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let facts: Vec<CaseFact> = (0..n).map(|i| CaseFact { split: None, ..fact(i, Split::Train) }).collect();
        let out = split_corpus(facts.clone(), frac, seed).unwrap();
        prop_assert_eq!(out.len(), n);
        let train = out.iter().filter(|f| f.split == Some(Split::Train)).count();
        prop_assert_eq!(train, (frac * n as f64 + 0.5).floor() as usize);
        prop_assert!(out.iter().all(|f| f.split.is_some()));
        let ids: Vec<_> = out.iter().map(|f| &f.case_id).collect();
        let orig: Vec<_> = facts.iter().map(|f| &f.case_id).collect();
        prop_assert_eq!(ids, orig);
        prop_assert_eq!(split_corpus(facts, frac, seed).unwrap(), out);
    }

    #[test]
    fn pairs_are_the_full_product(
        groups in prop::collection::vec(0usize..4, 1..30),
        splits in prop::collection::vec(any::<bool>(), 1..30),
    ) {
        let roster: Vec<ImageRecord> = groups.iter().enumerate().map(|(i, g)| image(i, Group::ALL[*g])).collect();
        let facts: Vec<CaseFact> = splits.iter().enumerate()
            .map(|(i, t)| fact(i, if *t { Split::Train } else { Split::Test }))
            .collect();
        let set = generate_pairs(&roster, &facts).unwrap();
        prop_assert_eq!(set.len(), roster.len() * facts.len());
        let split_of: HashMap<_, _> = facts.iter().map(|f| (f.case_id.clone(), f.split.unwrap())).collect();
        let mut seen = HashSet::new();
        let mut per_group: HashMap<Group, usize> = HashMap::new();
        for p in set.iter() {
            prop_assert_eq!(p.split, split_of[&p.case_id]);
            prop_assert!(seen.insert((p.image_id.clone(), p.case_id.clone())));
            *per_group.entry(p.group).or_default() += 1;
        }
        for g in Group::ALL {
            let n = groups.iter().filter(|x| Group::ALL[**x] == g).count() * facts.len();
            prop_assert_eq!(per_group.get(&g).copied().unwrap_or(0), n);
        }
        let train = set.iter().filter(|p| p.split == Split::Train).count();
        prop_assert_eq!(train, roster.len() * splits.iter().filter(|t| **t).count());
    }

    #[test]
    fn tagging_is_sound_deterministic_and_monotone(doc in document(), extra in prop::sample::select(VOCAB)) {
        let lexicon = OffenseLexicon::builtin();
        let f = CaseFact { text: doc.clone(), ..fact(1, Split::Test) };
        let opts = TagOptions::default();
        let typed = tag_case(&f, &lexicon, opts);
        prop_assert_eq!(&typed, &tag_case(&f, &lexicon, opts));

        let w = witnesses(&doc, &lexicon, opts);
        let toks = words(&doc);
        for t in &typed.offense_types {
            let hits = &w[t.as_str()];
            prop_assert!(!hits.is_empty());
            for k in hits {
                prop_assert!(Phrase::new(k).occurs_in(&toks, WordMatch::Exact));
            }
        }
        let sorted: BTreeSet<_> = typed.offense_types.iter().cloned().collect();
        prop_assert_eq!(sorted.len(), typed.offense_types.len());

        let mut grown = lexicon.clone();
        grown.extend("theft", vec![extra.to_lowercase()]);
        let bigger = tag_case(&f, &grown, opts);
        let before: BTreeSet<_> = typed.offense_types.iter().collect();
        let after: BTreeSet<_> = bigger.offense_types.iter().collect();
        prop_assert!(before.is_subset(&after));
    }

    #[test]
    fn parsers_are_total(raw in ".{0,200}") {
        let _ = parse_decision(&raw);
        let _ = parse_confidence(&raw);
    }

    #[test]
    fn rag_prompt_has_one_delimiter_per_precedent(k in 1usize..8, doc in document()) {
        let precedents: Vec<Precedent> = (0..k)
            .map(|i| Precedent { case_id: format!("p{i}"), text: format!("precedent {i} text"), bail_granted: i % 2 == 0 })
            .collect();
        let bundle = build_prompt(
            Configuration::AuditRag,
            QueryText::Fact(&doc),
            Some(&precedents),
            Some("img.jpg"),
            &Templates::default(),
            PromptOptions::default(),
        ).unwrap();
        prop_assert_eq!(bundle.system_text.matches(PRECEDENT_DELIMITER).count(), k);
        prop_assert!(bundle.user_text.contains(&doc));
    }

    #[test]
    fn sft_export_is_deterministic(n in 1usize..40, seed in any::<u64>()) {
        let facts: Vec<CaseFact> = (0..n).map(|i| fact(i, Split::Train)).collect();
        let roster: Vec<ImageRecord> = (0..6).map(|i| image(i, Group::ALL[i % 4])).collect();
        let templates = Templates::default();
        let inputs = ExportInputs { facts: &facts, typed: None, roster: &roster, templates: &templates, lexicon_sha256: None };
        let a = export_sft(&inputs, Scheme::Vanilla, seed).unwrap();
        let b = export_sft(&inputs, Scheme::Vanilla, seed).unwrap();
        prop_assert_eq!(a.records_jsonl(), b.records_jsonl());
        prop_assert_eq!(a.records.len(), n);
        prop_assert_eq!(a.manifest.validation_count, (0.1 * n as f64 + 0.5).floor() as usize);
        prop_assert!(a.records.iter().all(|r| r.mask_image_attention));
    }
}

#[test]
fn word_count_matches_an_independent_split() {
    let text = (0..50).map(|i| format!("w{i}")).collect::<Vec<_>>().join("  \t ");
    assert_eq!(count_tokens(&text, &TokenizerSpec::Whitespace), text.split_ascii_whitespace().count());
    assert_eq!(count_tokens(&text, &TokenizerSpec::Whitespace), 50);
}
