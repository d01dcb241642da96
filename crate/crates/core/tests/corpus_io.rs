use std::collections::BTreeSet;
use std::path::PathBuf;

use spokenlm::corpus::{
    class_distribution, generate_synthetic_corpus, load_corpus, save_corpus, transition_counts, CorpusError,
    GeneratorSpec, Speaker, Split, Turn,
};
use spokenlm::speech::{load_frame_features, mean_pool};
use spokenlm::{Corpus, Dialogue, SentimentLabel};

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/two_turn")
}

#[test]
fn save_then_load_is_identity() {
    let corpus = generate_synthetic_corpus(&GeneratorSpec {
        n_dialogues: 25,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_corpus(&corpus, dir.path()).unwrap();
    let back = load_corpus(dir.path()).unwrap();
    assert_eq!(back, corpus);
}

#[test]
fn missing_feature_file_is_named() {
    let corpus = generate_synthetic_corpus(&GeneratorSpec {
        n_dialogues: 3,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_corpus(&corpus, dir.path()).unwrap();
    let victim = corpus.dialogues[1].turns[2].features_ref.clone();
    std::fs::remove_file(dir.path().join(&victim)).unwrap();
    match load_corpus(dir.path()) {
        Err(CorpusError::Features { features_ref, .. }) => assert_eq!(features_ref, victim),
        other => panic!("expected a feature error, got {other:?}"),
    }
}

#[test]
fn malformed_line_reports_its_locus() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(fixture_dir().join("corpus.jsonl"), dir.path().join("corpus.jsonl")).unwrap();
    let mut text = std::fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap();
    text.push_str("{\"id\": 3\n");
    std::fs::write(dir.path().join("corpus.jsonl"), text).unwrap();
    match load_corpus(dir.path()) {
        Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn hand_written_fixture_loads() {
    let corpus = load_corpus(fixture_dir()).unwrap();
    let expected = Dialogue {
        id: "fx".into(),
        split: Split::Test,
        turns: vec![
            Turn {
                speaker: Speaker::A,
                text: "not a bad game".into(),
                label: SentimentLabel::Positive,
                features_ref: "features/fx/a.plff".into(),
                frame_count: 2,
            },
            Turn {
                speaker: Speaker::B,
                text: "i see".into(),
                label: SentimentLabel::Neutral,
                features_ref: "features/fx/b.plff".into(),
                frame_count: 1,
            },
        ],
    };
    assert_eq!(corpus.dialogues, vec![expected]);
    let a = &corpus.features["features/fx/a.plff"];
    assert_eq!((a.frames(), a.dim()), (2, 3));
    assert_eq!(a.data(), &[1.0, 3.0, 0.5, 3.0, 1.0, -0.5]);
    assert_eq!(mean_pool(a), vec![2.0, 2.0, 0.0]);
    assert_eq!(corpus.feature_dim(), Some(3));
}

#[test]
fn generated_feature_files_match_recorded_frame_counts() {
    let corpus = generate_synthetic_corpus(&GeneratorSpec {
        n_dialogues: 6,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_corpus(&corpus, dir.path()).unwrap();
    for t in corpus.dialogues.iter().flat_map(|d| &d.turns) {
        let m = load_frame_features(dir.path().join(&t.features_ref)).unwrap();
        assert_eq!(m.frames(), t.frame_count);
        assert_eq!(m.dim(), 16);
    }
}

#[test]
fn generation_is_deterministic_and_splits_are_disjoint() {
    let spec = GeneratorSpec {
        n_dialogues: 40,
        seed: 7,
        ..Default::default()
    };
    let a = generate_synthetic_corpus(&spec).unwrap();
    assert_eq!(a, generate_synthetic_corpus(&spec).unwrap());
    let other = generate_synthetic_corpus(&GeneratorSpec { seed: 8, ..spec.clone() }).unwrap();
    assert_ne!(a, other);

    let mut seen = BTreeSet::new();
    for split in Split::ALL {
        for d in a.split(split) {
            assert!(seen.insert(d.id.clone()), "{} in two splits", d.id);
        }
    }
    assert_eq!(seen.len(), 40);
    let refs: BTreeSet<_> = a.dialogues.iter().flat_map(|d| &d.turns).map(|t| &t.features_ref).collect();
    assert_eq!(refs.len(), a.dialogues.iter().map(|d| d.turns.len()).sum::<usize>());
    for split in Split::ALL {
        assert_eq!(class_distribution(&a, split).total(), a.turn_count(split));
    }
}

#[test]
fn empirical_prior_matches_class_prior_under_a_prior_preserving_chain() {
    let mut spec = GeneratorSpec {
        n_dialogues: 1000,
        feature_dim: 3,
        frame_count: (1, 1),
        seed: 11,
        ..Default::default()
    };
    spec.markov_transition = spec.prior_preserving_transition(0.6);
    let corpus = generate_synthetic_corpus(&spec).unwrap();
    let counts = class_distribution(&corpus, Split::Train);
    for l in SentimentLabel::ALL {
        let share = counts.get(l) as f64 / counts.total() as f64;
        assert!((share - spec.class_prior[l.code()]).abs() < 0.03, "{l}: {share}");
    }
}

#[test]
fn first_turn_labels_follow_the_prior_under_the_default_chain() {
    let spec = GeneratorSpec {
        n_dialogues: 3000,
        feature_dim: 3,
        frame_count: (1, 1),
        turns_per_dialogue: (2, 2),
        seed: 12,
        ..Default::default()
    };
    let corpus = generate_synthetic_corpus(&spec).unwrap();
    let mut first = [0usize; 3];
    for d in &corpus.dialogues {
        first[d.turns[0].label.code()] += 1;
    }
    for (k, &c) in first.iter().enumerate() {
        let share = c as f64 / 3000.0;
        assert!((share - spec.class_prior[k]).abs() < 0.03, "{k}: {share}");
    }
}

#[test]
fn empirical_transitions_converge_to_the_chain() {
    let spec = GeneratorSpec {
        n_dialogues: 2500,
        feature_dim: 3,
        frame_count: (1, 1),
        seed: 13,
        ..Default::default()
    };
    let corpus = generate_synthetic_corpus(&spec).unwrap();
    let t = transition_counts(&corpus);
    let total: usize = t.iter().flatten().sum();
    assert!(total >= 10_000, "{total}");
    for i in 0..3 {
        let row: usize = t[i].iter().sum();
        for j in 0..3 {
            let p = t[i][j] as f64 / row as f64;
            assert!((p - spec.markov_transition[i][j]).abs() < 0.05, "({i},{j}): {p}");
        }
    }
}

#[test]
fn zero_sarcasm_keeps_text_on_the_true_label() {
    let spec = GeneratorSpec {
        n_dialogues: 30,
        sarcasm_rate: 0.0,
        ..Default::default()
    };
    let corpus = generate_synthetic_corpus(&spec).unwrap();
    for t in corpus.dialogues.iter().flat_map(|d| &d.turns) {
        assert!(spec.template_bank[t.label.code()].contains(&t.text));
    }
}

/// Nearest-centroid classifier: centroids estimated on train pooled
/// features, UA measured on test turns.
fn nearest_centroid_ua(corpus: &Corpus) -> f64 {
    let dim = corpus.feature_dim().unwrap();
    let mut sums = vec![vec![0.0; dim]; 3];
    let mut counts = [0usize; 3];
    for t in corpus.split(Split::Train).flat_map(|d| &d.turns) {
        let v = mean_pool(&corpus.features[&t.features_ref]);
        for (s, x) in sums[t.label.code()].iter_mut().zip(&v) {
            *s += x;
        }
        counts[t.label.code()] += 1;
    }
    let cents: Vec<Vec<f64>> = (0..3).map(|k| sums[k].iter().map(|s| s / counts[k] as f64).collect()).collect();
    let mut hit = [0usize; 3];
    let mut support = [0usize; 3];
    for t in corpus.split(Split::Test).flat_map(|d| &d.turns) {
        let v = mean_pool(&corpus.features[&t.features_ref]);
        let dist = |c: &Vec<f64>| c.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let pred = (0..3).min_by(|&a, &b| dist(&cents[a]).total_cmp(&dist(&cents[b]))).unwrap();
        support[t.label.code()] += 1;
        hit[t.label.code()] += (pred == t.label.code()) as usize;
    }
    let recalls: Vec<f64> = (0..3).filter(|&k| support[k] > 0).map(|k| hit[k] as f64 / support[k] as f64).collect();
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

#[test]
fn speech_features_separate_labels_in_proportion_to_cluster_separation() {
    let base = GeneratorSpec {
        n_dialogues: 600,
        seed: 14,
        ..Default::default()
    };
    let wide = generate_synthetic_corpus(&GeneratorSpec {
        feature_cluster_separation: 5.0,
        ..base.clone()
    })
    .unwrap();
    let ua = nearest_centroid_ua(&wide);
    assert!(ua >= 0.95, "separable UA {ua}");
    let flat = generate_synthetic_corpus(&GeneratorSpec {
        feature_cluster_separation: 0.0,
        ..base
    })
    .unwrap();
    let ua = nearest_centroid_ua(&flat);
    assert!(ua <= 0.40, "collapsed UA {ua}");
}

#[test]
fn all_neutral_corpus_counts() {
    let spec = GeneratorSpec {
        n_dialogues: 10,
        class_prior: [0.0, 1.0, 0.0],
        markov_transition: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        ..Default::default()
    };
    let corpus = generate_synthetic_corpus(&spec).unwrap();
    let c = class_distribution(&corpus, Split::Train);
    assert_eq!(c.0, [0, corpus.turn_count(Split::Train), 0]);
}
