use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use leap_core::data::UNK_ID;
use leap_core::model::INIT_RANGE;
use leap_lstm::error::LeapError;
use leap_lstm::text::{
    build_vocab, load_corpus, load_embeddings, read_corpus, tokenize, Vocabulary, PAD_TOKEN, UNK_TOKEN,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

proptest! {
    #[test]
    fn tokenizing_lowercased_text_changes_nothing(s in "\\PC{0,60}") {
        prop_assert_eq!(tokenize(&s.to_lowercase()), tokenize(&s));
    }

    #[test]
    fn tokenizing_joined_tokens_is_a_fixed_point(s in "[a-zA-Z0-9 .,;:!?'()-]{0,60}") {
        let once = tokenize(&s);
        prop_assert_eq!(tokenize(&once.join(" ")), once);
    }

    #[test]
    fn tokens_have_no_whitespace_or_uppercase(s in "\\PC{0,60}") {
        for t in tokenize(&s) {
            prop_assert!(!t.is_empty());
            prop_assert!(!t.chars().any(char::is_whitespace));
            prop_assert_eq!(t.to_lowercase(), t.clone());
        }
    }

    #[test]
    fn ids_decode_to_the_token_or_unk(
        docs in prop::collection::vec(prop::collection::vec("[a-e]{1,2}", 1..12), 1..8),
        min_freq in 1usize..4,
    ) {
        let docs: Vec<Vec<String>> = docs;
        let vocab = build_vocab(docs.iter().map(Vec::as_slice), min_freq).unwrap();
        for doc in &docs {
            let ids = vocab.encode(doc);
            prop_assert!(ids.iter().all(|&i| (i as usize) < vocab.len()));
            for (tok, word) in doc.iter().zip(vocab.decode(&ids)) {
                prop_assert!(word == tok || word == UNK_TOKEN);
                prop_assert_eq!(word == tok, vocab.contains(tok));
            }
        }
    }

    /// Brute-force oracle: recount, sort by (-count, first position).
    #[test]
    fn vocabulary_order_matches_recount(
        docs in prop::collection::vec(prop::collection::vec("[a-h]", 1..15), 1..6),
        min_freq in 1usize..3,
    ) {
        let docs: Vec<Vec<String>> = docs;
        let flat: Vec<&String> = docs.iter().flatten().collect();
        let mut distinct: Vec<&String> = Vec::new();
        for t in &flat {
            if !distinct.contains(t) {
                distinct.push(t);
            }
        }
        let count = |t: &String| flat.iter().filter(|x| **x == t).count();
        let mut expected: Vec<(usize, usize, &String)> = distinct
            .iter()
            .enumerate()
            .map(|(i, t)| (count(t), i, *t))
            .filter(|(c, _, _)| *c >= min_freq)
            .collect();
        expected.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let vocab = build_vocab(docs.iter().map(Vec::as_slice), min_freq).unwrap();
        let got: Vec<&str> = vocab.tokens()[2..].iter().map(String::as_str).collect();
        let want: Vec<&str> = expected.iter().map(|e| e.2.as_str()).collect();
        prop_assert_eq!(got, want);
    }
}

#[test]
fn tokenizer_examples() {
    assert_eq!(tokenize("Treasury Prices fell."), strings(&["treasury", "prices", "fell", "."]));
    assert_eq!(tokenize(""), Vec::<String>::new());
    assert_eq!(tokenize("U.S.-based"), strings(&["u", ".", "s", ".", "-", "based"]));
}

#[test]
fn vocabulary_examples() {
    let doc = strings(&["a", "a", "b"]);
    let v = build_vocab([doc.as_slice()], 2).unwrap();
    assert_eq!(v.tokens(), &strings(&[PAD_TOKEN, UNK_TOKEN, "a"])[..]);
    assert_eq!(v.id("b"), UNK_ID);
    let v = build_vocab([doc.as_slice()], 1).unwrap();
    assert!(v.contains("a") && v.contains("b"));
}

#[test]
fn frequency_ties_keep_first_occurrence() {
    let d1 = strings(&["z", "y", "x", "y"]);
    let d2 = strings(&["x", "w", "z", "w"]);
    let v = build_vocab([d1.as_slice(), d2.as_slice()], 1).unwrap();
    // All four tokens appear twice.
    assert_eq!(&v.tokens()[2..], &strings(&["z", "y", "x", "w"])[..]);
}

#[test]
fn vocabulary_json_round_trip() {
    let doc = strings(&["b", "a", "b"]);
    let v = build_vocab([doc.as_slice()], 1).unwrap();
    let json = serde_json::to_string(&v).unwrap();
    let back: Vocabulary = serde_json::from_str(&json).unwrap();
    assert_eq!(back, v);
    assert!(serde_json::from_str::<Vocabulary>("[\"a\",\"b\"]").is_err());
}

#[test]
fn csv_rows_join_text_fields_and_shift_labels() {
    let data = "\"3\",\"title\",\"body\"\n";
    let docs = read_corpus(data.as_bytes(), Path::new("mem.csv"), 4).unwrap();
    assert_eq!(docs.len(), 1);
    assert_eq!(docs[0].label, 2);
    assert_eq!(docs[0].tokens, tokenize("title body"));
}

#[test]
fn csv_class_out_of_range_names_the_row() {
    let data = "\"1\",\"ok\"\n\"5\",\"too big\"\n";
    match read_corpus(data.as_bytes(), Path::new("mem.csv"), 4) {
        Err(LeapError::Corpus { row, message, .. }) => {
            assert_eq!(row, 2);
            assert!(message.contains('5'));
        }
        other => panic!("expected a corpus error, got {other:?}"),
    }
}

#[test]
fn csv_malformed_rows_name_the_row() {
    for data in ["\"1\",\"ok\"\n\"x\",\"bad class\"\n", "\"1\",\"ok\"\n\"2\"\n", "\"1\",\"ok\"\n\"0\",\"zero\"\n"] {
        match read_corpus(data.as_bytes(), Path::new("mem.csv"), 4) {
            Err(LeapError::Corpus { row, .. }) => assert_eq!(row, 2, "{data:?}"),
            other => panic!("{data:?}: expected a corpus error, got {other:?}"),
        }
    }
}

#[test]
fn fixture_row_count_equals_line_count() {
    let path = fixture("news_sample.csv");
    let lines = std::fs::read_to_string(&path).unwrap().lines().filter(|l| !l.is_empty()).count();
    let docs = load_corpus(&path, 4).unwrap();
    assert_eq!(docs.len(), lines);
    assert!(docs.iter().all(|d| d.label < 4 && !d.tokens.is_empty()));
}

#[test]
fn missing_corpus_is_an_io_error() {
    let err = load_corpus(Path::new("/definitely/not/here.csv"), 4).unwrap_err();
    assert!(matches!(err, LeapError::Io { .. }));
    assert_eq!(err.exit_code(), 1);
}

fn vocab_of(words: &[&str]) -> Vocabulary {
    let mut t = strings(&[PAD_TOKEN, UNK_TOKEN]);
    t.extend(strings(words));
    Vocabulary::from_tokens(t).unwrap()
}

#[test]
fn embeddings_fill_known_rows_and_randomize_the_rest() {
    let vocab = vocab_of(&["cat", "dog", "emu"]);
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "cat 0.1 0.2 0.3").unwrap();
    writeln!(f, "zebra 9 9 9").unwrap();
    writeln!(f, "dog -1 0 1e-3").unwrap();
    let table = load_embeddings(f.path(), &vocab, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(table.shape(), &[5, 3]);
    assert_eq!(table.row(vocab.id("cat") as usize), &[0.1, 0.2, 0.3]);
    assert_eq!(table.row(vocab.id("dog") as usize), &[-1.0, 0.0, 1e-3]);
    assert!(table.row(0).iter().all(|&v| v == 0.0));
    for id in [UNK_ID, vocab.id("emu")] {
        let row = table.row(id as usize);
        assert!(row.iter().all(|v| v.abs() <= INIT_RANGE));
        assert!(row.iter().any(|&v| v != 0.0));
    }
}

#[test]
fn embedding_dimension_mismatch_names_the_token() {
    let vocab = vocab_of(&["cat"]);
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "cat 0.1 0.2 0.3").unwrap();
    writeln!(f, "owl 0.1 0.2").unwrap();
    match load_embeddings(f.path(), &vocab, 3, &mut ChaCha8Rng::seed_from_u64(1)) {
        Err(e @ LeapError::EmbeddingDim { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains("owl"), "{msg}");
            assert_eq!(e.exit_code(), 2);
        }
        other => panic!("expected a dimension error, got {other:?}"),
    }
}

#[test]
fn vocabulary_built_on_fixture_is_a_bijection() {
    let docs = load_corpus(&fixture("news_sample.csv"), 4).unwrap();
    let vocab = build_vocab(docs.iter().map(|d| d.tokens.as_slice()), 1).unwrap();
    let mut seen = HashMap::new();
    for (i, t) in vocab.tokens().iter().enumerate() {
        assert_eq!(vocab.id(t) as usize, i);
        assert!(seen.insert(t.clone(), i).is_none());
    }
    assert!(vocab.tokens()[2..].iter().all(|t| t.to_lowercase() == *t));
}
