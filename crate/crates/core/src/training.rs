//! Loss, hand-derived gradients through the whole stack, finite-difference
//! verification and a full-batch gradient-descent trainer.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::read_sentence_presence;
use crate::corpus::Dataset;
use crate::embeddings::{Embedder, SentenceEmbedding};
use crate::error::{KsatError, Result};
use crate::knowledge::{ConnectionVector, KnowledgeTree, Outcome};
use crate::model::{log_sum_exp, sigmoid, ForwardOutput, KsatModel, LayerCache, CLS, FIRST_SENTENCE, KCLS};
use crate::precise::ReferenceLoss;

/// Final scores below this everywhere count as numerical collapse.
pub const COLLAPSE_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian initialization; `None` means 1/sqrt(d).
    pub init_scale: Option<f64>,
    pub fd_step: f64,
    pub grad_tolerance: f64,
    pub kg_bias_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 200,
            seed: 0,
            init_scale: None,
            fd_step: 1e-5,
            grad_tolerance: 1e-4,
            kg_bias_enabled: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning rate", self.learning_rate),
            ("finite-difference step", self.fd_step),
            ("gradient tolerance", self.grad_tolerance),
            ("init scale", self.init_scale.unwrap_or(1.0)),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(KsatError::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn init_scale_for(&self, dimension: usize) -> f64 {
        self.init_scale.unwrap_or(1.0 / (dimension as f64).sqrt())
    }
}

/// Randomly initialized model for `config`.
pub fn init_model(tree: KnowledgeTree, embedder: &Embedder, config: &TrainConfig) -> Result<KsatModel> {
    config.validate()?;
    let d = embedder.dimension();
    let mut model = KsatModel::random(tree, *embedder.config(), config.init_scale_for(d), config.seed)?;
    model.kg_bias_enabled = config.kg_bias_enabled;
    Ok(model)
}

/// A post reduced to what the model consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub sentences: Vec<SentenceEmbedding>,
    pub presence: Vec<ConnectionVector>,
    pub gold: Outcome,
}

/// Builds examples from an annotated dataset, sorted by post id.
pub fn examples_from_dataset(dataset: &Dataset, tree: &KnowledgeTree, embedder: &Embedder) -> Result<Vec<Example>> {
    let mut out = dataset
        .posts()
        .iter()
        .map(|p| {
            Ok(Example {
                id: p.id.clone(),
                sentences: embedder.sentences(p)?,
                presence: read_sentence_presence(p, tree.num_concepts())?,
                gold: p.gold.ok_or_else(|| KsatError::InvalidData(format!("post `{}` has no gold outcome", p.id)))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

fn example_loss(out: &ForwardOutput, gold: Outcome) -> Result<f64> {
    if out.final_probs.iter().all(|&p| p < COLLAPSE_FLOOR) || out.log_final.iter().any(|v| v.is_nan()) {
        return Err(KsatError::NumericalCollapse(format!(
            "final scores {:?} are all below {COLLAPSE_FLOOR:e}",
            out.final_probs
        )));
    }
    Ok(log_sum_exp(&out.log_final) - out.log_final[gold.index()])
}

/// Mean negative log of the normalized final score of the gold outcome.
pub fn loss(model: &KsatModel, batch: &[Example]) -> Result<f64> {
    let losses = example_losses(model, batch)?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Per-post terms of [`loss`], in batch order.
pub fn example_losses(model: &KsatModel, batch: &[Example]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(KsatError::InvalidData("empty batch".into()));
    }
    batch
        .par_iter()
        .map(|ex| example_loss(&model.forward_embedded(&ex.sentences, &ex.presence)?, ex.gold))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub kcls_init: Array1<f64>,
    pub w_out: Array2<f64>,
    pub a_raw: f64,
}

impl LayerGradients {
    fn zeros(d: usize) -> Self {
        Self {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            kcls_init: Array1::zeros(d),
            w_out: Array2::zeros((d, Outcome::COUNT)),
            a_raw: 0.0,
        }
    }

    fn add_scaled(&mut self, other: &Self, scale: f64) {
        self.wq.scaled_add(scale, &other.wq);
        self.wk.scaled_add(scale, &other.wk);
        self.wv.scaled_add(scale, &other.wv);
        self.kcls_init.scaled_add(scale, &other.kcls_init);
        self.w_out.scaled_add(scale, &other.w_out);
        self.a_raw += scale * other.a_raw;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
}

impl Gradients {
    pub fn zeros_like(model: &KsatModel) -> Self {
        Self {
            layers: model.layers.iter().map(|l| LayerGradients::zeros(l.dimension())).collect(),
        }
    }

    pub fn get(&self, layer: usize, block: ParamBlock, index: usize) -> f64 {
        let g = &self.layers[layer];
        match block {
            ParamBlock::Wq => g.wq.as_slice().expect("standard layout")[index],
            ParamBlock::Wk => g.wk.as_slice().expect("standard layout")[index],
            ParamBlock::Wv => g.wv.as_slice().expect("standard layout")[index],
            ParamBlock::KclsInit => g.kcls_init[index],
            ParamBlock::WOut => g.w_out.as_slice().expect("standard layout")[index],
            ParamBlock::ARaw => g.a_raw,
        }
    }

    pub fn get_mut(&mut self, layer: usize, block: ParamBlock, index: usize) -> &mut f64 {
        let g = &mut self.layers[layer];
        match block {
            ParamBlock::Wq => &mut g.wq.as_slice_mut().expect("standard layout")[index],
            ParamBlock::Wk => &mut g.wk.as_slice_mut().expect("standard layout")[index],
            ParamBlock::Wv => &mut g.wv.as_slice_mut().expect("standard layout")[index],
            ParamBlock::KclsInit => &mut g.kcls_init[index],
            ParamBlock::WOut => &mut g.w_out.as_slice_mut().expect("standard layout")[index],
            ParamBlock::ARaw => &mut g.a_raw,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|g| {
            g.wq.iter()
                .chain(&g.wk)
                .chain(&g.wv)
                .chain(&g.kcls_init)
                .chain(&g.w_out)
                .chain(std::iter::once(&g.a_raw))
                .all(|v| v.is_finite())
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamBlock {
    Wq,
    Wk,
    Wv,
    KclsInit,
    WOut,
    ARaw,
}

impl ParamBlock {
    pub const ALL: [ParamBlock; 6] = [
        ParamBlock::Wq,
        ParamBlock::Wk,
        ParamBlock::Wv,
        ParamBlock::KclsInit,
        ParamBlock::WOut,
        ParamBlock::ARaw,
    ];

    pub fn len(self, d: usize) -> usize {
        match self {
            ParamBlock::Wq | ParamBlock::Wk | ParamBlock::Wv => d * d,
            ParamBlock::KclsInit => d,
            ParamBlock::WOut => d * Outcome::COUNT,
            ParamBlock::ARaw => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamBlock::Wq => "wq",
            ParamBlock::Wk => "wk",
            ParamBlock::Wv => "wv",
            ParamBlock::KclsInit => "kcls_init",
            ParamBlock::WOut => "w_out",
            ParamBlock::ARaw => "a_raw",
        }
    }
}

pub fn param_mut(model: &mut KsatModel, layer: usize, block: ParamBlock, index: usize) -> &mut f64 {
    let l = &mut model.layers[layer];
    match block {
        ParamBlock::Wq => &mut l.wq.as_slice_mut().expect("standard layout")[index],
        ParamBlock::Wk => &mut l.wk.as_slice_mut().expect("standard layout")[index],
        ParamBlock::Wv => &mut l.wv.as_slice_mut().expect("standard layout")[index],
        ParamBlock::KclsInit => &mut l.kcls_init[index],
        ParamBlock::WOut => &mut l.w_out.as_slice_mut().expect("standard layout")[index],
        ParamBlock::ARaw => &mut l.a_raw,
    }
}

/// Loss and gradient for a single example.
fn example_backward(model: &KsatModel, ex: &Example) -> Result<(f64, Gradients)> {
    let (out, caches) = model.forward_cached(&ex.sentences, &ex.presence)?;
    let loss = example_loss(&out, ex.gold)?;
    let pi = out.normalized();
    let g = ex.gold.index();
    let d = model.dimension();
    let t = ex.sentences.len() + FIRST_SENTENCE;
    let scale = 1.0 / (d as f64).sqrt();

    let mut grads = Gradients::zeros_like(model);
    let mut d_tokens = Array2::<f64>::zeros((t, d));
    for (li, ((layer, act), cache)) in model.layers.iter().zip(&out.layers).zip(&caches).enumerate().rev() {
        let gl = &mut grads.layers[li];
        let LayerCache {
            input: x,
            v,
            q,
            k,
            mix,
            pair_weights,
        } = cache;
        let a = &act.attention;

        // dL/du_y = (pi_y - [y = gold]) * (1 - p_y), with 1 - p_y = sigmoid(-u_y).
        let delta: [f64; Outcome::COUNT] = std::array::from_fn(|y| {
            let target = if y == g { 1.0 } else { 0.0 };
            (pi[y] - target) * sigmoid(-act.logits[y])
        });
        let delta_v = Array1::from(delta.to_vec());
        for y in 0..Outcome::COUNT {
            gl.w_out.column_mut(y).scaled_add(delta[y], mix);
        }
        let d_mix = layer.w_out.dot(&delta_v);
        let d_bias: f64 = if model.kg_bias_enabled { delta.iter().sum() } else { 0.0 };

        let alpha = act.alpha;
        let d_alpha = d_mix.dot(&(&act.z_kcls - &act.z_cls));
        gl.a_raw = d_alpha * alpha * (1.0 - alpha);

        let mut d_y = d_tokens;
        d_y.row_mut(CLS).scaled_add(1.0 - alpha, &d_mix);
        d_y.row_mut(KCLS).scaled_add(alpha, &d_mix);

        // y = attention . v + x
        let mut d_x = d_y.clone();
        let mut d_a = d_y.dot(&v.t());
        let mut d_v = a.t().dot(&d_y);

        if d_bias != 0.0 {
            let contribs = &act.kcls_contribs;
            let mut d_c = Array2::<f64>::zeros(contribs.raw_dim());
            for &(i, j, w) in pair_weights {
                let diff = &contribs.row(i) - &contribs.row(j);
                d_c.row_mut(i).scaled_add(-2.0 * w * d_bias, &diff);
                d_c.row_mut(j).scaled_add(2.0 * w * d_bias, &diff);
            }
            for (i, dci) in d_c.rows().into_iter().enumerate() {
                let pos = FIRST_SENTENCE + i;
                d_a[[KCLS, pos]] += dci.dot(&v.row(pos));
                d_v.row_mut(pos).scaled_add(a[[KCLS, pos]], &dci);
            }
        }

        // Row softmax.
        let mut d_s = d_a;
        for (mut ds_row, a_row) in d_s.rows_mut().into_iter().zip(a.rows()) {
            let inner = ds_row.dot(&a_row);
            ds_row.zip_mut_with(&a_row, |ds, &av| *ds = av * (*ds - inner));
        }
        d_s *= scale;
        let d_q = d_s.dot(k);
        let d_k = d_s.t().dot(q);

        gl.wq = x.t().dot(&d_q);
        gl.wk = x.t().dot(&d_k);
        gl.wv = x.t().dot(&d_v);
        d_x += &d_q.dot(&layer.wq.t());
        d_x += &d_k.dot(&layer.wk.t());
        d_x += &d_v.dot(&layer.wv.t());

        // The KCLS slot was overwritten by this layer's token.
        gl.kcls_init = d_x.row(KCLS).to_owned();
        d_x.row_mut(KCLS).fill(0.0);
        d_tokens = d_x;
    }
    Ok((loss, grads))
}

/// Mean loss and its gradient over `batch`. Per-example results are reduced
/// in id order so the sum does not depend on scheduling.
pub fn backward(model: &KsatModel, batch: &[Example]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(KsatError::InvalidData("empty batch".into()));
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&a, &b| batch[a].id.cmp(&batch[b].id));
    let parts = order
        .par_iter()
        .map(|&i| example_backward(model, &batch[i]))
        .collect::<Result<Vec<_>>>()?;
    let n = batch.len() as f64;
    let mut total = Gradients::zeros_like(model);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        for (acc, gl) in total.layers.iter_mut().zip(&g.layers) {
            acc.add_scaled(gl, 1.0 / n);
        }
    }
    Ok((loss / n, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub layer: Outcome,
    pub block: ParamBlock,
    pub parameters: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub blocks: Vec<BlockReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares [`backward`] against central differences on every scalar
/// parameter. The differenced loss is evaluated in double-double precision.
/// Meant for reduced models (small d, a few posts).
pub fn finite_diff_check(model: &KsatModel, batch: &[Example], config: &TrainConfig) -> Result<GradientReport> {
    finite_diff_check_with(model, batch, config, |m, b| backward(m, b).map(|(_, g)| g))
}

/// As [`finite_diff_check`] with a caller-supplied analytic gradient.
pub fn finite_diff_check_with<F>(model: &KsatModel, batch: &[Example], config: &TrainConfig, gradient: F) -> Result<GradientReport>
where
    F: Fn(&KsatModel, &[Example]) -> Result<Gradients>,
{
    config.validate()?;
    let analytic = gradient(model, batch)?;
    let reference = ReferenceLoss::new(model, batch)?;
    let h = config.fd_step;
    let d = model.dimension();
    let mut blocks = Vec::new();
    for (li, layer) in model.layers.iter().enumerate() {
        for block in ParamBlock::ALL {
            let count = block.len(d);
            let errors = (0..count)
                .into_par_iter()
                .map(|idx| {
                    let numeric = reference.central_difference(li, block, idx, h);
                    let a = analytic.get(li, block, idx);
                    Ok((relative_error(a, numeric), (a - numeric).abs()))
                })
                .collect::<Result<Vec<_>>>()?;
            let (rel, abs) = errors
                .iter()
                .fold((0.0f64, 0.0f64), |(r, a), &(er, ea)| (r.max(er), a.max(ea)));
            blocks.push(BlockReport {
                layer: layer.outcome,
                block,
                parameters: count,
                max_rel_error: rel,
                max_abs_error: abs,
            });
        }
    }
    let max_rel_error = blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    Ok(GradientReport {
        passed: max_rel_error < config.grad_tolerance && analytic.all_finite(),
        blocks,
        max_rel_error,
        tolerance: config.grad_tolerance,
    })
}

fn apply_update(model: &mut KsatModel, grads: &Gradients, lr: f64) {
    for (l, g) in model.layers.iter_mut().zip(&grads.layers) {
        l.wq.scaled_add(-lr, &g.wq);
        l.wk.scaled_add(-lr, &g.wk);
        l.wv.scaled_add(-lr, &g.wv);
        l.kcls_init.scaled_add(-lr, &g.kcls_init);
        l.w_out.scaled_add(-lr, &g.w_out);
        l.a_raw -= lr * g.a_raw;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub model: KsatModel,
    /// Loss at the start of each epoch, before that epoch's update.
    pub loss_trace: Vec<f64>,
    /// Loss after the last update.
    pub final_loss: f64,
    /// Per-layer alpha after each epoch.
    pub alpha_trajectory: Vec<Vec<f64>>,
}

/// Full-batch gradient descent. The only randomness is in initialization,
/// which happens before this call.
pub fn train(mut model: KsatModel, train_set: &[Example], config: &TrainConfig) -> Result<TrainResult> {
    config.validate()?;
    model.kg_bias_enabled = config.kg_bias_enabled;
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut alpha_trajectory = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let (l, grads) = backward(&model, train_set)?;
        if !grads.all_finite() {
            return Err(KsatError::NumericalCollapse("non-finite gradient".into()));
        }
        loss_trace.push(l);
        apply_update(&mut model, &grads, config.learning_rate);
        alpha_trajectory.push(model.layers.iter().map(|l| l.alpha()).collect());
    }
    let final_loss = loss(&model, train_set)?;
    Ok(TrainResult {
        model,
        loss_trace,
        final_loss,
        alpha_trajectory,
    })
}

/// Random fixture for gradient checks: `posts` examples of 1-4 sentences with
/// random unit embeddings and presence bits.
pub fn random_fixture(tree: &KnowledgeTree, dimension: usize, posts: usize, seed: u64) -> Vec<Example> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1c7);
    let k = tree.num_concepts();
    (0..posts)
        .map(|p| {
            let n = rng.random_range(2..=4);
            let sentences = (0..n)
                .map(|_| SentenceEmbedding::normalized((0..dimension).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect();
            let presence = (0..n)
                .map(|_| ConnectionVector::from_bools((0..k).map(|_| rng.random_bool(0.5))))
                .collect();
            Example {
                id: format!("fx-{p}"),
                sentences,
                presence,
                gold: Outcome::ALL[rng.random_range(0..Outcome::COUNT)],
            }
        })
        .collect()
}
