use std::fs;

use ksat_core::embeddings::{concept_key, load_embeddings, sentence_key, VocabularyMode};
use ksat_core::training::{examples_from_dataset, init_model};
use ksat_core::{load_jsonl, Embedder, EmbeddingConfig, KnowledgeTree, TrainConfig};

const CORPUS: &str = r#"{"id":"a","sentences":["one","two"],"gold":"Ideation1","sentence_presence":[[1,0,0],[0,0,0]]}
{"id":"b","sentences":["three"],"gold":"IndicationOrNone","sentence_presence":[[0,0,0]]}
"#;

fn table_text(extra: &str) -> String {
    let mut keys: Vec<String> = vec![sentence_key("a", 0), sentence_key("a", 1), sentence_key("b", 0)];
    keys.extend((0..3).map(concept_key));
    let mut out = String::from("# test vectors\n");
    for (i, k) in keys.iter().enumerate() {
        out.push_str(&format!("{k} {} 1.0 {}\n", i as f64, -(i as f64) / 2.0));
    }
    out.push_str(extra);
    out
}

fn file_config() -> EmbeddingConfig {
    EmbeddingConfig {
        vocabulary_mode: VocabularyMode::FileBacked,
        ..EmbeddingConfig::with_dimension(3)
    }
}

#[test]
fn file_backed_vectors_drive_the_forward_pass() {
    let dir = tempfile::tempdir().unwrap();
    let emb = dir.path().join("vectors.txt");
    let data = dir.path().join("posts.jsonl");
    fs::write(&emb, table_text("")).unwrap();
    fs::write(&data, CORPUS).unwrap();

    let table = load_embeddings(&emb).unwrap();
    assert_eq!(table.dimension(), 3);
    let embedder = Embedder::with_table(file_config(), table).unwrap();
    let tree = KnowledgeTree::cssrs();
    let dataset = load_jsonl(&data).unwrap();
    let examples = examples_from_dataset(&dataset, &tree, &embedder).unwrap();
    assert_eq!(examples.len(), 2);

    // Loaded vectors are re-normalized.
    let v = examples[0].sentences[1].values();
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
    assert!((v[0] - v[1]).abs() < 1e-12 && v[0] > 0.0);

    let config = TrainConfig::default();
    let model = init_model(tree, &embedder, &config).unwrap();
    for ex in &examples {
        let out = model.forward_embedded(&ex.sentences, &ex.presence).unwrap();
        assert!(out.final_probs.iter().all(|p| p.is_finite() && *p >= 0.0));
    }
}

#[test]
fn ragged_table_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let emb = dir.path().join("vectors.txt");
    fs::write(&emb, table_text("extra 1.0 2.0\n")).unwrap();
    assert!(load_embeddings(&emb).is_err());
}

#[test]
fn missing_sentence_vector_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let emb = dir.path().join("vectors.txt");
    let data = dir.path().join("posts.jsonl");
    let text: String = table_text("")
        .lines()
        .filter(|l| !l.starts_with(&sentence_key("b", 0)))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&emb, text).unwrap();
    fs::write(&data, CORPUS).unwrap();
    let embedder = Embedder::with_table(file_config(), load_embeddings(&emb).unwrap()).unwrap();
    let dataset = load_jsonl(&data).unwrap();
    assert!(examples_from_dataset(&dataset, &KnowledgeTree::cssrs(), &embedder).is_err());
}

#[test]
fn table_dimension_must_match_config() {
    let dir = tempfile::tempdir().unwrap();
    let emb = dir.path().join("vectors.txt");
    fs::write(&emb, table_text("")).unwrap();
    let config = EmbeddingConfig {
        vocabulary_mode: VocabularyMode::FileBacked,
        ..EmbeddingConfig::with_dimension(4)
    };
    assert!(Embedder::with_table(config, load_embeddings(&emb).unwrap()).is_err());
}
