//! The knowledge-infused attention stack.
//!
//! Each layer owns one outcome's knowledge context. Its input sequence is
//! `[CLS, KCLS, S1..Sn]` (sentence-level tokens); the KCLS slot is reset to
//! the layer's learned knowledge token on entry. One attention head with a
//! residual connection produces `z_cls` and `z_kcls`, which are mixed by the
//! layer's `alpha` and scored per outcome with an element-wise sigmoid plus
//! the scalar graph-context bias. Layer probabilities multiply into the final
//! score.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Post;
use crate::embeddings::{Embedder, EmbeddingConfig, SentenceEmbedding};
use crate::error::{KsatError, Result};
use crate::knowledge::{connection_vector, hamming_distance, ConnectionVector, KnowledgeTree, Outcome, TaxonomyFile};

/// Default additive constant in the graph-context distance denominator.
pub const DEFAULT_EPSILON: f64 = 1.0;
/// Sequence positions of the two special tokens.
pub const CLS: usize = 0;
pub const KCLS: usize = 1;
pub const FIRST_SENTENCE: usize = 2;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without underflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Row-wise softmax.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KsatLayerParams {
    pub outcome: Outcome,
    pub context: Vec<usize>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub kcls_init: Array1<f64>,
    /// One classifier column per outcome (d x 4).
    pub w_out: Array2<f64>,
    pub a_raw: f64,
}

impl KsatLayerParams {
    pub fn zeros(outcome: Outcome, context: Vec<usize>, d: usize) -> Self {
        Self {
            outcome,
            context,
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            kcls_init: Array1::zeros(d),
            w_out: Array2::zeros((d, Outcome::COUNT)),
            a_raw: 0.0,
        }
    }

    pub fn dimension(&self) -> usize {
        self.kcls_init.len()
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.a_raw)
    }
}

/// Everything a layer exposes for analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    pub z_cls: Array1<f64>,
    pub z_kcls: Array1<f64>,
    /// Attention-weighted value vector each sentence sends to KCLS.
    pub kcls_contribs: Array2<f64>,
    pub attention: Array2<f64>,
    pub kg_bias: f64,
    pub logits: [f64; Outcome::COUNT],
    pub layer_probs: [f64; Outcome::COUNT],
    pub alpha: f64,
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub input: Array2<f64>,
    pub v: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub mix: Array1<f64>,
    pub pair_weights: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Raw product of layer probabilities; not a distribution.
    pub final_probs: [f64; Outcome::COUNT],
    /// Sum of per-layer log-sigmoids, i.e. `ln(final_probs)` without underflow.
    pub log_final: [f64; Outcome::COUNT],
    pub layers: Vec<LayerActivations>,
}

impl ForwardOutput {
    /// Final scores rescaled to sum to one.
    pub fn normalized(&self) -> [f64; Outcome::COUNT] {
        let lse = log_sum_exp(&self.log_final);
        self.log_final.map(|v| (v - lse).exp())
    }

    /// Argmax of the final scores; ties go to the earlier outcome.
    pub fn predicted(&self) -> Outcome {
        argmax_first(&self.log_final)
    }
}

/// Element-wise product of per-layer outcome probabilities.
pub fn product_aggregate(layer_probs: &[[f64; Outcome::COUNT]]) -> [f64; Outcome::COUNT] {
    std::array::from_fn(|y| layer_probs.iter().map(|p| p[y]).product())
}

pub fn argmax_first(values: &[f64; Outcome::COUNT]) -> Outcome {
    let mut best = 0;
    for i in 1..Outcome::COUNT {
        if values[i] > values[best] {
            best = i;
        }
    }
    Outcome::ALL[best]
}

/// Pairwise weights `1 / (hamming + epsilon)` for sentences i < j.
pub fn pair_weights(connections: &[ConnectionVector], epsilon: f64) -> Result<Vec<(usize, usize, f64)>> {
    let n = connections.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d = hamming_distance(&connections[i], &connections[j])?;
            out.push((i, j, 1.0 / (d as f64 + epsilon)));
        }
    }
    Ok(out)
}

/// Graph-context bias: minus the sum over sentence pairs of the squared
/// distance between their KCLS contributions, divided by
/// `hamming + epsilon`. Never positive.
pub fn kg_bias(contribs: &Array2<f64>, connections: &[ConnectionVector], epsilon: f64) -> Result<f64> {
    if contribs.nrows() != connections.len() {
        return Err(KsatError::DimensionMismatch {
            expected: contribs.nrows(),
            found: connections.len(),
        });
    }
    if !(epsilon > 0.0) {
        return Err(KsatError::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(kg_bias_weighted(contribs, &pair_weights(connections, epsilon)?))
}

fn kg_bias_weighted(contribs: &Array2<f64>, weights: &[(usize, usize, f64)]) -> f64 {
    -weights
        .iter()
        .map(|&(i, j, w)| {
            let sq: f64 = contribs
                .row(i)
                .iter()
                .zip(contribs.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            sq * w
        })
        .sum::<f64>()
}

/// Per-outcome sigmoid of `W_out[:, y] . (alpha z_kcls + (1 - alpha) z_cls) + kg_bias`.
pub fn layer_probabilities(
    z_cls: ArrayView1<f64>,
    z_kcls: ArrayView1<f64>,
    kg_bias: f64,
    layer: &KsatLayerParams,
) -> [f64; Outcome::COUNT] {
    layer_logits(&mix(z_cls, z_kcls, layer.alpha()), kg_bias, layer).map(sigmoid)
}

fn mix(z_cls: ArrayView1<f64>, z_kcls: ArrayView1<f64>, alpha: f64) -> Array1<f64> {
    &z_kcls * alpha + &z_cls * (1.0 - alpha)
}

fn layer_logits(mix: &Array1<f64>, kg_bias: f64, layer: &KsatLayerParams) -> [f64; Outcome::COUNT] {
    let scores = layer.w_out.t().dot(mix);
    std::array::from_fn(|y| scores[y] + kg_bias)
}

/// One layer over `tokens` (`[CLS, KCLS, S1..Sn]`, one row each).
pub fn layer_forward(
    tokens: &Array2<f64>,
    layer: &KsatLayerParams,
    connections: &[ConnectionVector],
    epsilon: f64,
    kg_bias_enabled: bool,
) -> Result<(Array2<f64>, LayerActivations)> {
    layer_forward_cached(tokens, layer, connections, epsilon, kg_bias_enabled).map(|(y, a, _)| (y, a))
}

pub(crate) fn layer_forward_cached(
    tokens: &Array2<f64>,
    layer: &KsatLayerParams,
    connections: &[ConnectionVector],
    epsilon: f64,
    kg_bias_enabled: bool,
) -> Result<(Array2<f64>, LayerActivations, LayerCache)> {
    let d = layer.dimension();
    if tokens.nrows() <= FIRST_SENTENCE {
        return Err(KsatError::InvalidData("layer input has no sentence tokens".into()));
    }
    if tokens.ncols() != d {
        return Err(KsatError::DimensionMismatch {
            expected: d,
            found: tokens.ncols(),
        });
    }
    let n = tokens.nrows() - FIRST_SENTENCE;
    if connections.len() != n {
        return Err(KsatError::DimensionMismatch {
            expected: n,
            found: connections.len(),
        });
    }
    let mut x = tokens.clone();
    x.row_mut(KCLS).assign(&layer.kcls_init);

    let q = x.dot(&layer.wq);
    let k = x.dot(&layer.wk);
    let v = x.dot(&layer.wv);
    let scale = 1.0 / (d as f64).sqrt();
    let attention = softmax_rows(&(q.dot(&k.t()) * scale));
    let y = attention.dot(&v) + &x;

    let mut contribs = v.slice(s![FIRST_SENTENCE.., ..]).to_owned();
    for (i, mut row) in contribs.rows_mut().into_iter().enumerate() {
        row *= attention[[KCLS, FIRST_SENTENCE + i]];
    }
    let weights = pair_weights(connections, epsilon)?;
    let bias = if kg_bias_enabled {
        kg_bias_weighted(&contribs, &weights)
    } else {
        0.0
    };

    let alpha = layer.alpha();
    let z_cls = y.row(CLS).to_owned();
    let z_kcls = y.row(KCLS).to_owned();
    let m = mix(z_cls.view(), z_kcls.view(), alpha);
    let logits = layer_logits(&m, bias, layer);
    let activations = LayerActivations {
        z_cls,
        z_kcls,
        kcls_contribs: contribs,
        attention,
        kg_bias: bias,
        logits,
        layer_probs: logits.map(sigmoid),
        alpha,
    };
    let cache = LayerCache {
        input: x,
        v,
        q,
        k,
        mix: m,
        pair_weights: weights,
    };
    Ok((y, activations, cache))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KsatModel {
    pub layers: Vec<KsatLayerParams>,
    pub tree: KnowledgeTree,
    pub embedding: EmbeddingConfig,
    pub epsilon: f64,
    pub kg_bias_enabled: bool,
}

impl KsatModel {
    /// All-zero parameters, one layer per outcome in stacking order.
    pub fn zeros(tree: KnowledgeTree, embedding: EmbeddingConfig) -> Self {
        let d = embedding.dimension;
        let layers = tree
            .layer_order()
            .into_iter()
            .map(|o| KsatLayerParams::zeros(o, tree.context_for_layer(o).to_vec(), d))
            .collect();
        Self {
            layers,
            tree,
            embedding,
            epsilon: DEFAULT_EPSILON,
            kg_bias_enabled: true,
        }
    }

    /// Gaussian initialization with standard deviation `scale` for every
    /// matrix and knowledge token; `a_raw` starts at 0 (alpha = 0.5).
    pub fn random(tree: KnowledgeTree, embedding: EmbeddingConfig, scale: f64, seed: u64) -> Result<Self> {
        embedding.validate()?;
        let normal = Normal::new(0.0, scale)
            .map_err(|e| KsatError::InvalidParameter(format!("init scale {scale}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::zeros(tree, embedding);
        for layer in &mut model.layers {
            for m in [&mut layer.wq, &mut layer.wk, &mut layer.wv, &mut layer.w_out] {
                m.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
            layer.kcls_init.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        Ok(model)
    }

    /// A model over a subset of layers. Layers must follow stacking order.
    pub fn from_layers(
        layers: Vec<KsatLayerParams>,
        tree: KnowledgeTree,
        embedding: EmbeddingConfig,
        epsilon: f64,
    ) -> Result<Self> {
        let model = Self {
            layers,
            tree,
            embedding,
            epsilon,
            kg_bias_enabled: true,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embedding.dimension;
        if self.layers.is_empty() {
            return Err(KsatError::InvalidParameter("model has no layers".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(KsatError::InvalidParameter(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.layers.windows(2).any(|w| w[0].outcome >= w[1].outcome) {
            return Err(KsatError::InvalidParameter("layers must follow the outcome order".into()));
        }
        for l in &self.layers {
            let shapes_ok = l.wq.dim() == (d, d)
                && l.wk.dim() == (d, d)
                && l.wv.dim() == (d, d)
                && l.kcls_init.len() == d
                && l.w_out.dim() == (d, Outcome::COUNT);
            if !shapes_ok {
                return Err(KsatError::InvalidParameter(format!("layer {} has inconsistent shapes", l.outcome)));
            }
            if l.context.iter().any(|&c| c >= self.tree.num_concepts()) {
                return Err(KsatError::InvalidParameter(format!("layer {} context out of range", l.outcome)));
            }
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.embedding.dimension
    }

    /// Token matrix `[CLS = 0, KCLS = 0, sentence embeddings]`.
    pub fn initial_tokens(&self, sentences: &[SentenceEmbedding]) -> Result<Array2<f64>> {
        let d = self.dimension();
        let mut tokens = Array2::zeros((sentences.len() + FIRST_SENTENCE, d));
        for (i, e) in sentences.iter().enumerate() {
            if e.dimension() != d {
                return Err(KsatError::DimensionMismatch {
                    expected: d,
                    found: e.dimension(),
                });
            }
            tokens.row_mut(FIRST_SENTENCE + i).assign(&ArrayView1::from(e.values()));
        }
        Ok(tokens)
    }

    /// Forward pass using the model's hashing embedder.
    pub fn forward(&self, post: &Post, presence: &[ConnectionVector]) -> Result<ForwardOutput> {
        let embedder = Embedder::new(self.embedding)?;
        self.forward_with(&embedder, post, presence)
    }

    pub fn forward_with(&self, embedder: &Embedder, post: &Post, presence: &[ConnectionVector]) -> Result<ForwardOutput> {
        if post.sentences.is_empty() {
            return Err(KsatError::EmptyPost(post.id.clone()));
        }
        self.forward_embedded(&embedder.sentences(post)?, presence)
    }

    pub fn forward_embedded(&self, sentences: &[SentenceEmbedding], presence: &[ConnectionVector]) -> Result<ForwardOutput> {
        self.forward_cached(sentences, presence).map(|(out, _)| out)
    }

    pub(crate) fn forward_cached(
        &self,
        sentences: &[SentenceEmbedding],
        presence: &[ConnectionVector],
    ) -> Result<(ForwardOutput, Vec<LayerCache>)> {
        if sentences.is_empty() {
            return Err(KsatError::InvalidData("post has no sentences".into()));
        }
        if presence.len() != sentences.len() {
            return Err(KsatError::DimensionMismatch {
                expected: sentences.len(),
                found: presence.len(),
            });
        }
        let mut tokens = self.initial_tokens(sentences)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut log_final = [0.0; Outcome::COUNT];
        for layer in &self.layers {
            let connections = presence
                .iter()
                .map(|p| connection_vector(p, &layer.context))
                .collect::<Result<Vec<_>>>()?;
            let (next, act, cache) =
                layer_forward_cached(&tokens, layer, &connections, self.epsilon, self.kg_bias_enabled)?;
            for (lf, u) in log_final.iter_mut().zip(act.logits) {
                *lf += log_sigmoid(u);
            }
            tokens = next;
            layers.push(act);
            caches.push(cache);
        }
        let per_layer: Vec<_> = layers.iter().map(|a| a.layer_probs).collect();
        let final_probs = product_aggregate(&per_layer);
        Ok((
            ForwardOutput {
                final_probs,
                log_final,
                layers,
            },
            caches,
        ))
    }

    pub fn predict(&self, post: &Post, presence: &[ConnectionVector]) -> Result<Outcome> {
        Ok(self.forward(post, presence)?.predicted())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&ModelFile::from(self))?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::try_from(file)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::try_from(serde_json::from_str::<ModelFile>(text)?)
    }
}

pub const MODEL_FORMAT: &str = "ksat-model/1";

/// Persisted model layout; matrices are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub dimension: usize,
    pub epsilon: f64,
    pub kg_bias_enabled: bool,
    pub embedding: EmbeddingConfig,
    pub taxonomy_sha256: String,
    pub taxonomy: TaxonomyFile,
    pub layers: Vec<LayerFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerFile {
    pub outcome: Outcome,
    pub context: Vec<usize>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub kcls_init: Vec<f64>,
    pub w_out: Vec<f64>,
    pub a_raw: f64,
}

fn row_major(m: &Array2<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

impl From<&KsatModel> for ModelFile {
    fn from(m: &KsatModel) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            dimension: m.dimension(),
            epsilon: m.epsilon,
            kg_bias_enabled: m.kg_bias_enabled,
            embedding: m.embedding,
            taxonomy_sha256: m.tree.fingerprint(),
            taxonomy: m.tree.to_file(),
            layers: m
                .layers
                .iter()
                .map(|l| LayerFile {
                    outcome: l.outcome,
                    context: l.context.clone(),
                    wq: row_major(&l.wq),
                    wk: row_major(&l.wk),
                    wv: row_major(&l.wv),
                    kcls_init: l.kcls_init.to_vec(),
                    w_out: row_major(&l.w_out),
                    a_raw: l.a_raw,
                })
                .collect(),
        }
    }
}

impl TryFrom<ModelFile> for KsatModel {
    type Error = KsatError;

    fn try_from(file: ModelFile) -> Result<Self> {
        if file.format != MODEL_FORMAT {
            return Err(KsatError::InvalidData(format!("unsupported model format `{}`", file.format)));
        }
        let tree = KnowledgeTree::try_from(file.taxonomy)?;
        if tree.fingerprint() != file.taxonomy_sha256 {
            return Err(KsatError::InvalidData("taxonomy hash does not match embedded taxonomy".into()));
        }
        let d = file.dimension;
        if file.embedding.dimension != d {
            return Err(KsatError::DimensionMismatch {
                expected: d,
                found: file.embedding.dimension,
            });
        }
        let matrix = |v: Vec<f64>, cols: usize, name: &str| {
            let len = v.len();
            Array2::from_shape_vec((d, cols), v).map_err(|_| {
                KsatError::InvalidData(format!("{name}: expected {} values, found {len}", d * cols))
            })
        };
        let layers = file
            .layers
            .into_iter()
            .map(|l| {
                if l.kcls_init.len() != d {
                    return Err(KsatError::DimensionMismatch {
                        expected: d,
                        found: l.kcls_init.len(),
                    });
                }
                Ok(KsatLayerParams {
                    outcome: l.outcome,
                    context: l.context,
                    wq: matrix(l.wq, d, "wq")?,
                    wk: matrix(l.wk, d, "wk")?,
                    wv: matrix(l.wv, d, "wv")?,
                    kcls_init: Array1::from(l.kcls_init),
                    w_out: matrix(l.w_out, Outcome::COUNT, "w_out")?,
                    a_raw: l.a_raw,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Self {
            layers,
            tree,
            embedding: file.embedding,
            epsilon: file.epsilon,
            kg_bias_enabled: file.kg_bias_enabled,
        };
        model.validate()?;
        Ok(model)
    }
}
