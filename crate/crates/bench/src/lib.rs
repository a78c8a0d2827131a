//! Shared inputs for the benchmarks.

use ksat_core::training::random_fixture;
use ksat_core::{generate_synthetic, Dataset, Example, KnowledgeTree, KsatModel, EmbeddingConfig, SyntheticSpec};

/// A random model and batch over the bundled taxonomy.
pub fn model_and_batch(dimension: usize, posts: usize, seed: u64) -> (KsatModel, Vec<Example>) {
    let tree = KnowledgeTree::cssrs();
    let batch = random_fixture(&tree, dimension, posts, seed);
    let model = KsatModel::random(tree, EmbeddingConfig::with_dimension(dimension), 0.3, seed)
        .expect("valid model");
    (model, batch)
}

/// An unannotated synthetic corpus with gold labels.
pub fn corpus(posts: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec::cssrs(posts, seed), &KnowledgeTree::cssrs()).expect("valid spec")
}
