//! Deterministic sentence embeddings.
//!
//! The default embedder is a seeded feature-hashing bag of words: every
//! lowercase alphanumeric token is hashed to a bucket and a sign, the signed
//! counts are accumulated and the result is L2-normalized. Externally computed
//! vectors can be supplied instead through [`load_embeddings`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Post;
use crate::error::{KsatError, Result};
use crate::knowledge::Concept;

pub const DEFAULT_DIMENSION: usize = 64;
pub const DEFAULT_SEED: u64 = 0x6b73_6174;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VocabularyMode {
    FeatureHash,
    FileBacked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub dimension: usize,
    pub seed: u64,
    pub vocabulary_mode: VocabularyMode,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dimension: DEFAULT_DIMENSION,
            seed: DEFAULT_SEED,
            vocabulary_mode: VocabularyMode::FeatureHash,
        }
    }
}

impl EmbeddingConfig {
    pub fn with_dimension(dimension: usize) -> Self {
        Self {
            dimension,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension < 2 {
            return Err(KsatError::InvalidParameter(format!(
                "embedding dimension must be at least 2, got {}",
                self.dimension
            )));
        }
        Ok(())
    }
}

/// A unit-norm (or all-zero) sentence vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SentenceEmbedding(Vec<f64>);

impl SentenceEmbedding {
    pub fn zeros(dimension: usize) -> Self {
        Self(vec![0.0; dimension])
    }

    /// Scales `values` to unit norm; an all-zero input stays zero.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = l2_norm(&values);
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Self(values)
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded 64-bit token hash: FNV-1a over the UTF-8 bytes, then a splitmix
/// finalizer keyed by the seed. Stable across platforms and releases.
pub fn token_hash(token: &str, seed: u64) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h ^ splitmix64(seed))
}

/// Feature-hash embedding of `text`. Empty token lists give the zero vector.
pub fn embed_text(text: &str, config: &EmbeddingConfig) -> SentenceEmbedding {
    let dim = config.dimension;
    let mut acc = vec![0.0; dim];
    for token in tokenize(text) {
        let h = token_hash(&token, config.seed);
        let index = (h % dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        acc[index] += sign;
    }
    SentenceEmbedding::normalized(acc)
}

/// Cosine similarity, clamped to [-1, 1]. Zero vectors score 0 against
/// everything.
pub fn cosine_similarity(a: &SentenceEmbedding, b: &SentenceEmbedding) -> Result<f64> {
    if a.dimension() != b.dimension() {
        return Err(KsatError::DimensionMismatch {
            expected: a.dimension(),
            found: b.dimension(),
        });
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Precomputed embeddings keyed by sentence id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    dimension: usize,
    vectors: BTreeMap<String, SentenceEmbedding>,
}

impl EmbeddingTable {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SentenceEmbedding> {
        self.vectors.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &SentenceEmbedding)> {
        self.vectors.iter()
    }
}

/// Reads `<id> <v1> ... <vd>` records. Lines starting with `#` and blank lines
/// are skipped. Vectors are re-normalized on load.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_embeddings(&text, path)
}

pub(crate) fn parse_embeddings(text: &str, path: &Path) -> Result<EmbeddingTable> {
    let parse_err = |line: usize, message: String| KsatError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut table = EmbeddingTable::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let id = fields.next().expect("non-empty line has a first field");
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line_no, format!("invalid float `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(parse_err(line_no, format!("record `{id}` has no values")));
        }
        if table.vectors.is_empty() {
            table.dimension = values.len();
        } else if values.len() != table.dimension {
            return Err(parse_err(
                line_no,
                format!(
                    "dimension mismatch: expected {}, found {}",
                    table.dimension,
                    values.len()
                ),
            ));
        }
        if table
            .vectors
            .insert(id.to_string(), SentenceEmbedding::normalized(values))
            .is_some()
        {
            return Err(parse_err(line_no, format!("duplicate sentence id `{id}`")));
        }
    }
    Ok(table)
}

/// Id under which sentence `index` of `post_id` is looked up in a table.
pub fn sentence_key(post_id: &str, index: usize) -> String {
    format!("{post_id}/{index}")
}

/// Id under which a concept's query text is looked up in a table.
pub fn concept_key(concept_id: usize) -> String {
    format!("concept/{concept_id}")
}

/// Resolves embeddings for posts and concepts, either by hashing text or by
/// looking up a precomputed table.
#[derive(Debug, Clone)]
pub struct Embedder {
    config: EmbeddingConfig,
    table: Option<EmbeddingTable>,
}

impl Embedder {
    pub fn new(config: EmbeddingConfig) -> Result<Self> {
        config.validate()?;
        if config.vocabulary_mode == VocabularyMode::FileBacked {
            return Err(KsatError::InvalidParameter(
                "file-backed embeddings need a table".into(),
            ));
        }
        Ok(Self {
            config,
            table: None,
        })
    }

    pub fn with_table(mut config: EmbeddingConfig, table: EmbeddingTable) -> Result<Self> {
        if table.dimension() != config.dimension {
            return Err(KsatError::DimensionMismatch {
                expected: config.dimension,
                found: table.dimension(),
            });
        }
        config.vocabulary_mode = VocabularyMode::FileBacked;
        config.validate()?;
        Ok(Self {
            config,
            table: Some(table),
        })
    }

    pub fn config(&self) -> &EmbeddingConfig {
        &self.config
    }

    pub fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn lookup(&self, key: &str) -> Result<SentenceEmbedding> {
        let table = self.table.as_ref().expect("file-backed embedder has a table");
        table
            .get(key)
            .cloned()
            .ok_or_else(|| KsatError::MissingEmbedding(key.to_string()))
    }

    pub fn sentence(&self, post: &Post, index: usize) -> Result<SentenceEmbedding> {
        match self.table {
            None => Ok(embed_text(&post.sentences[index], &self.config)),
            Some(_) => self.lookup(&sentence_key(&post.id, index)),
        }
    }

    pub fn sentences(&self, post: &Post) -> Result<Vec<SentenceEmbedding>> {
        (0..post.sentences.len())
            .map(|i| self.sentence(post, i))
            .collect()
    }

    /// Embedding of `len` consecutive sentences starting at `start`. Hashing
    /// embeds the joined text; a table pools the normalized sentence vectors.
    pub fn fragment(&self, post: &Post, start: usize, len: usize) -> Result<SentenceEmbedding> {
        let range = start..start + len;
        match self.table {
            None => Ok(embed_text(&post.sentences[range].join(" "), &self.config)),
            Some(_) => {
                let mut acc = vec![0.0; self.config.dimension];
                for i in range {
                    let e = self.lookup(&sentence_key(&post.id, i))?;
                    acc.iter_mut().zip(e.values()).for_each(|(a, v)| *a += v);
                }
                Ok(SentenceEmbedding::normalized(acc))
            }
        }
    }

    pub fn concept(&self, concept: &Concept) -> Result<SentenceEmbedding> {
        match self.table {
            None => Ok(embed_text(&concept.query_text, &self.config)),
            Some(_) => self.lookup(&concept_key(concept.id)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(dimension: usize, seed: u64) -> EmbeddingConfig {
        EmbeddingConfig {
            dimension,
            seed,
            vocabulary_mode: VocabularyMode::FeatureHash,
        }
    }

    #[test]
    fn empty_text_is_zero() {
        let e = embed_text("", &cfg(16, 1));
        assert_eq!(e, SentenceEmbedding::zeros(16));
        let e = embed_text("  ,.;! ", &cfg(16, 1));
        assert!(e.is_zero());
    }

    #[test]
    fn identical_text_has_unit_cosine() {
        let c = EmbeddingConfig::default();
        let a = embed_text("gun life", &c);
        let b = embed_text("gun life", &c);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn golden_two_token_vector() {
        let e = embed_text("a b", &cfg(8, 42));
        assert!((e.norm() - 1.0).abs() < 1e-9);
        // Frozen after first evaluation of the hashing scheme.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for (got, want) in e.values().iter().zip(GOLDEN_A_B.map(|v| v * s)) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    // Signed bucket counts for "a b" at dimension 8, seed 42.
    const GOLDEN_A_B: [f64; 8] = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0, 0.0];

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("I don't-feel OK!"), ["i", "don", "t", "feel", "ok"]);
    }

    #[test]
    fn cosine_fixtures() {
        let a = SentenceEmbedding::normalized(vec![1.0, 0.0]);
        let b = SentenceEmbedding::normalized(vec![0.0, 1.0]);
        let neg = SentenceEmbedding::normalized(vec![-1.0, 0.0]);
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&a, &neg).unwrap(), -1.0);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        let z = SentenceEmbedding::zeros(2);
        assert_eq!(cosine_similarity(&a, &z).unwrap(), 0.0);
    }

    #[test]
    fn cosine_rejects_dimension_mismatch() {
        let a = SentenceEmbedding::zeros(2);
        let b = SentenceEmbedding::zeros(3);
        assert!(matches!(
            cosine_similarity(&a, &b),
            Err(KsatError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn config_rejects_tiny_dimension() {
        assert!(cfg(1, 0).validate().is_err());
        assert!(cfg(2, 0).validate().is_ok());
    }

    #[test]
    fn parse_embedding_file() {
        let p = Path::new("emb.txt");
        let t = parse_embeddings("# header\ns1 1.0 0.0\n\ns2 2.0 0.0\n", p).unwrap();
        assert_eq!(t.dimension(), 2);
        assert_eq!(t.get("s1").unwrap().values(), &[1.0, 0.0]);
        assert_eq!(t.get("s2").unwrap().values(), &[1.0, 0.0]);

        let zero = parse_embeddings("z 0 0 0\n", p).unwrap();
        assert!(zero.get("z").unwrap().is_zero());

        let err = parse_embeddings("a 1 2 3\nb 1 2 3 4\n", p).unwrap_err();
        assert!(matches!(err, KsatError::Parse { line: 2, .. }), "{err}");
        let err = parse_embeddings("a 1 x\n", p).unwrap_err();
        assert!(matches!(err, KsatError::Parse { line: 1, .. }), "{err}");
        let err = parse_embeddings("a\n", p).unwrap_err();
        assert!(matches!(err, KsatError::Parse { line: 1, .. }), "{err}");
    }

    proptest! {
        #[test]
        fn nonempty_text_has_unit_norm(words in proptest::collection::vec("[a-z]{1,8}", 1..12), seed: u64, dim in 2usize..128) {
            let e = embed_text(&words.join(" "), &cfg(dim, seed));
            // Cancelling signs can zero the accumulator; otherwise unit norm.
            prop_assert!(e.is_zero() || (e.norm() - 1.0).abs() < 1e-9);
            prop_assert_eq!(e.clone(), embed_text(&words.join(" "), &cfg(dim, seed)));
        }

        #[test]
        fn cosine_is_symmetric_and_bounded(a in "[a-z ]{0,40}", b in "[a-z ]{0,40}") {
            let c = cfg(32, 9);
            let (ea, eb) = (embed_text(&a, &c), embed_text(&b, &c));
            let ab = cosine_similarity(&ea, &eb).unwrap();
            let ba = cosine_similarity(&eb, &ea).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
