use std::collections::HashMap;

use approx::assert_abs_diff_eq;
use bailaudit_core::backend::{ModelBackend, MockRule};
use bailaudit_core::corpus::{CaseFact, Split};
use bailaudit_core::offense_tagger::{expand_lexicon, parse_keyword_list};
use bailaudit_core::pairing::{sample_training_pair, Gender, ImageRecord, Race};

#[test]
fn training_pair_draws_are_uniform() {
    let roster: Vec<ImageRecord> = (0..4)
        .map(|i| ImageRecord {
            image_id: format!("img{i}"),
            uri: format!("img{i}.png"),
            race: if i % 2 == 0 { Race::White } else { Race::Black },
            gender: if i < 2 { Gender::Male } else { Gender::Female },
            offense_types: vec![],
        })
        .collect();
    let fact = CaseFact {
        case_id: "c1".into(),
        text: "t".into(),
        token_count: 1,
        bail_granted: true,
        split: Some(Split::Train),
    };
    let mut counts: HashMap<String, usize> = HashMap::new();
    for seed in 0..10_000u64 {
        let p = sample_training_pair(&fact, &roster, seed).unwrap();
        assert_eq!(p.case_id, "c1");
        *counts.entry(p.image_id).or_default() += 1;
    }
    assert_eq!(counts.len(), 4);
    for c in counts.values() {
        assert_abs_diff_eq!(*c as f64 / 10_000.0, 0.25, epsilon = 0.02);
    }
    // fixed seed is reproducible
    assert_eq!(
        sample_training_pair(&fact, &roster, 9).unwrap(),
        sample_training_pair(&fact, &roster, 9).unwrap()
    );
}

#[test]
fn sampling_rejects_test_facts_and_empty_rosters() {
    let fact = CaseFact {
        case_id: "c".into(),
        text: "t".into(),
        token_count: 1,
        bail_granted: false,
        split: Some(Split::Test),
    };
    assert!(sample_training_pair(&fact, &[], 1).is_err());
}

#[test]
fn expansion_dedupes_and_limits() {
    let backend = ModelBackend::mock(vec![MockRule::catch_all(
        "murder, Manslaughter, murder, 3. culpable homicide, killing",
    )])
    .unwrap();
    let got = expand_lexicon(&backend, "homicide", 2).unwrap();
    assert_eq!(got, vec!["murder", "manslaughter"]);
    let all = expand_lexicon(&backend, "homicide", 10).unwrap();
    assert_eq!(all, vec!["murder", "manslaughter", "culpable homicide", "killing"]);
    assert!(expand_lexicon(&backend, "homicide", 0).unwrap().is_empty());
    assert_eq!(parse_keyword_list("- a\n- b\n- a", 5), vec!["a", "b"]);
}
