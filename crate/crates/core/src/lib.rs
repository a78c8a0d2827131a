//! Knowledge-infused self-attention (KSAT) for multi-context text
//! classification.
//!
//! The crate covers the whole pipeline: deterministic sentence embeddings,
//! a concept taxonomy with per-layer graph contexts, threshold-based
//! knowledge-context annotation with grid search, a stack of attention
//! layers that each encode one context and expose a data/knowledge
//! trade-off factor, hand-derived gradients with finite-difference checks,
//! and the metric and contribution reports used to inspect a trained model.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod annotation;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod knowledge;
pub mod model;
pub mod precise;
pub mod training;

pub use analysis::{auc_roc, accuracy, contribution_report, distance_report, evaluate, ContributionReport, DistanceReport, Metrics};
pub use annotation::{annotate_post, grid_search, AnnotatedPost, AnnotationParams};
pub use corpus::{generate_synthetic, load_jsonl, save_jsonl, split, Dataset, Post, SyntheticSpec};
pub use embeddings::{cosine_similarity, embed_text, Embedder, EmbeddingConfig, SentenceEmbedding};
pub use error::{KsatError, Result};
pub use knowledge::{ConnectionVector, KnowledgeTree, Outcome};
pub use model::{ForwardOutput, KsatLayerParams, KsatModel, LayerActivations};
pub use training::{backward, finite_diff_check, loss, train, Example, GradientReport, TrainConfig};
