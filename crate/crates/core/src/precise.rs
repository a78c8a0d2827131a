//! Double-double evaluation of the training loss. Written independently of
//! the `f64` forward pass and used as the reference function for
//! finite-difference gradient checks, where `f64` rounding of the loss (about
//! 1e-16) would swamp central differences of gradients below roughly 1e-7.

use twofloat::TwoFloat;

use crate::error::Result;
use crate::knowledge::{connection_vector, hamming_distance, ConnectionVector, Outcome};
use crate::model::{KsatLayerParams, KsatModel};
use crate::training::{Example, ParamBlock};

type T = TwoFloat;

fn t(x: f64) -> T {
    T::from(x)
}

#[derive(Clone)]
struct Layer {
    wq: Vec<T>,
    wk: Vec<T>,
    wv: Vec<T>,
    kcls: Vec<T>,
    w_out: Vec<T>,
    a_raw: T,
}

impl Layer {
    fn new(p: &KsatLayerParams) -> Self {
        let conv = |xs: &[f64]| xs.iter().map(|&x| t(x)).collect::<Vec<_>>();
        Self {
            wq: conv(p.wq.as_slice().expect("standard layout")),
            wk: conv(p.wk.as_slice().expect("standard layout")),
            wv: conv(p.wv.as_slice().expect("standard layout")),
            kcls: conv(p.kcls_init.as_slice().expect("standard layout")),
            w_out: conv(p.w_out.as_slice().expect("standard layout")),
            a_raw: t(p.a_raw),
        }
    }

    fn shifted(&self, block: ParamBlock, index: usize, delta: f64) -> Self {
        let mut out = self.clone();
        let slot = match block {
            ParamBlock::Wq => &mut out.wq[index],
            ParamBlock::Wk => &mut out.wk[index],
            ParamBlock::Wv => &mut out.wv[index],
            ParamBlock::KclsInit => &mut out.kcls[index],
            ParamBlock::WOut => &mut out.w_out[index],
            ParamBlock::ARaw => &mut out.a_raw,
        };
        *slot += t(delta);
        out
    }
}

/// Row-major `rows x d` matrix.
#[derive(Clone)]
struct Tokens {
    rows: usize,
    d: usize,
    data: Vec<T>,
}

impl Tokens {
    fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    fn times(&self, w: &[T]) -> Tokens {
        let d = self.d;
        let mut data = vec![t(0.0); self.rows * d];
        for i in 0..self.rows {
            for k in 0..d {
                let x = self.data[i * d + k];
                if x == 0.0 {
                    continue;
                }
                for j in 0..d {
                    data[i * d + j] += x * w[k * d + j];
                }
            }
        }
        Tokens { rows: self.rows, d, data }
    }
}

fn dot(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(t(0.0), |acc, (x, y)| acc + *x * *y)
}

fn log_sigmoid(u: T) -> T {
    if u >= 0.0 {
        -(-u).exp().ln_1p()
    } else {
        u - u.exp().ln_1p()
    }
}

/// One layer: returns the output tokens and the per-outcome log-sigmoids.
fn layer_forward(x: &Tokens, layer: &Layer, pairs: &[(usize, usize, T)], scale: T, kg_on: bool) -> (Tokens, [T; Outcome::COUNT]) {
    let d = x.d;
    let n = x.rows;
    let mut x = x.clone();
    x.data[d..2 * d].copy_from_slice(&layer.kcls);
    let q = x.times(&layer.wq);
    let k = x.times(&layer.wk);
    let v = x.times(&layer.wv);

    let mut attn = vec![t(0.0); n * n];
    for i in 0..n {
        let scores: Vec<T> = (0..n).map(|j| dot(q.row(i), k.row(j)) * scale).collect();
        let max = scores.iter().copied().fold(scores[0], |m, s| if s > m { s } else { m });
        let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
        let total = exps.iter().fold(t(0.0), |a, &e| a + e);
        for j in 0..n {
            attn[i * n + j] = exps[j] / total;
        }
    }
    let mut y = x.clone();
    for i in 0..n {
        for j in 0..n {
            let a = attn[i * n + j];
            for c in 0..d {
                y.data[i * d + c] += a * v.data[j * d + c];
            }
        }
    }

    let mut kg = t(0.0);
    if kg_on {
        let contrib = |i: usize| -> Vec<T> { v.row(2 + i).iter().map(|&e| attn[n + 2 + i] * e).collect() };
        for &(i, j, w) in pairs {
            let (ci, cj) = (contrib(i), contrib(j));
            let sq = ci.iter().zip(&cj).fold(t(0.0), |acc, (a, b)| acc + (*a - *b) * (*a - *b));
            kg -= sq * w;
        }
    }

    let alpha = t(1.0) / (t(1.0) + (-layer.a_raw).exp());
    let mix: Vec<T> = (0..d)
        .map(|c| alpha * y.data[d + c] + (t(1.0) - alpha) * y.data[c])
        .collect();
    let logsig = std::array::from_fn(|o| {
        let u = (0..d).fold(t(0.0), |acc, c| acc + layer.w_out[c * Outcome::COUNT + o] * mix[c]) + kg;
        log_sigmoid(u)
    });
    (y, logsig)
}

struct Cached {
    gold: usize,
    pairs: Vec<Vec<(usize, usize, T)>>,
    inputs: Vec<Tokens>,
    logsig: Vec<[T; Outcome::COUNT]>,
}

/// Reference loss over a fixed batch, with per-layer intermediates of the
/// unperturbed model cached so that a perturbation in layer `l` only reruns
/// layers `l..`.
pub struct ReferenceLoss {
    layers: Vec<Layer>,
    scale: T,
    kg_on: bool,
    cached: Vec<Cached>,
}

fn pair_weights(connections: &[ConnectionVector], epsilon: f64) -> Result<Vec<(usize, usize, T)>> {
    let mut out = Vec::new();
    for i in 0..connections.len() {
        for j in i + 1..connections.len() {
            let h = hamming_distance(&connections[i], &connections[j])? as f64;
            out.push((i, j, t(1.0) / (t(h) + t(epsilon))));
        }
    }
    Ok(out)
}

impl ReferenceLoss {
    pub fn new(model: &KsatModel, batch: &[Example]) -> Result<Self> {
        let d = model.dimension();
        let layers: Vec<Layer> = model.layers.iter().map(Layer::new).collect();
        let scale = t(1.0 / (d as f64).sqrt());
        let kg_on = model.kg_bias_enabled;
        let mut cached = Vec::with_capacity(batch.len());
        for ex in batch {
            let mut data = vec![t(0.0); 2 * d];
            for s in &ex.sentences {
                data.extend(s.values().iter().map(|&v| t(v)));
            }
            let mut x = Tokens {
                rows: ex.sentences.len() + 2,
                d,
                data,
            };
            let mut c = Cached {
                gold: ex.gold.index(),
                pairs: Vec::new(),
                inputs: Vec::new(),
                logsig: Vec::new(),
            };
            for (p, layer) in model.layers.iter().zip(&layers) {
                let conns = ex
                    .presence
                    .iter()
                    .map(|b| connection_vector(b, &p.context))
                    .collect::<Result<Vec<_>>>()?;
                let pairs = pair_weights(&conns, model.epsilon)?;
                let (y, ls) = layer_forward(&x, layer, &pairs, scale, kg_on);
                c.inputs.push(x);
                c.pairs.push(pairs);
                c.logsig.push(ls);
                x = y;
            }
            cached.push(c);
        }
        Ok(Self {
            layers,
            scale,
            kg_on,
            cached,
        })
    }

    fn example_loss(&self, c: &Cached, layer: usize, shifted: &Layer, rerun_downstream: bool) -> T {
        let mut lf = [t(0.0); Outcome::COUNT];
        let mut add = |ls: &[T; Outcome::COUNT]| lf.iter_mut().zip(ls).for_each(|(a, b)| *a += *b);
        c.logsig[..layer].iter().for_each(&mut add);
        let (mut x, ls) = layer_forward(&c.inputs[layer], shifted, &c.pairs[layer], self.scale, self.kg_on);
        add(&ls);
        for l in layer + 1..self.layers.len() {
            if rerun_downstream {
                let (y, ls) = layer_forward(&x, &self.layers[l], &c.pairs[l], self.scale, self.kg_on);
                add(&ls);
                x = y;
            } else {
                add(&c.logsig[l]);
            }
        }
        let max = lf.iter().copied().fold(lf[0], |m, v| if v > m { v } else { m });
        let total = lf.iter().fold(t(0.0), |a, &v| a + (v - max).exp());
        max + total.ln() - lf[c.gold]
    }

    /// Unperturbed mean loss.
    pub fn loss(&self) -> f64 {
        let total = self
            .cached
            .iter()
            .fold(t(0.0), |acc, c| acc + self.example_loss(c, 0, &self.layers[0], true));
        (total / t(self.cached.len() as f64)).hi()
    }

    /// Central difference `(L(p + h) - L(p - h)) / 2h` of the mean loss,
    /// differenced per post before averaging.
    pub fn central_difference(&self, layer: usize, block: ParamBlock, index: usize, h: f64) -> f64 {
        let plus = self.layers[layer].shifted(block, index, h);
        let minus = self.layers[layer].shifted(block, index, -h);
        // The output-side parameters leave the tokens passed upward unchanged.
        let rerun = !matches!(block, ParamBlock::WOut | ParamBlock::ARaw);
        let diff = self.cached.iter().fold(t(0.0), |acc, c| {
            acc + (self.example_loss(c, layer, &plus, rerun) - self.example_loss(c, layer, &minus, rerun))
        });
        let step = (t(h) - t(-h)) * t(self.cached.len() as f64);
        (diff / step).hi()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::EmbeddingConfig;
    use crate::knowledge::KnowledgeTree;
    use crate::training::{loss, random_fixture};

    #[test]
    fn agrees_with_f64_loss() {
        let tree = KnowledgeTree::cssrs();
        for seed in 0..5 {
            let mut model = KsatModel::random(tree.clone(), EmbeddingConfig::with_dimension(6), 0.6, seed).unwrap();
            model.layers[2].a_raw = 0.7;
            let batch = random_fixture(&tree, 6, 4, seed);
            for kg in [true, false] {
                model.kg_bias_enabled = kg;
                let want = loss(&model, &batch).unwrap();
                let got = ReferenceLoss::new(&model, &batch).unwrap().loss();
                // twofloat's exp and ln carry roughly 1e-12 relative error.
                assert!((got - want).abs() < 1e-10 * want.abs(), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn central_difference_matches_coarse_f64_difference() {
        let tree = KnowledgeTree::cssrs();
        let model = KsatModel::random(tree.clone(), EmbeddingConfig::with_dimension(4), 0.5, 3).unwrap();
        let batch = random_fixture(&tree, 4, 2, 3);
        let r = ReferenceLoss::new(&model, &batch).unwrap();
        let h = 1e-3;
        let mut p = model.clone();
        p.layers[1].w_out[[2, 1]] += h;
        let plus = loss(&p, &batch).unwrap();
        p.layers[1].w_out[[2, 1]] -= 2.0 * h;
        let minus = loss(&p, &batch).unwrap();
        let coarse = (plus - minus) / (2.0 * h);
        let precise = r.central_difference(1, ParamBlock::WOut, 2 * Outcome::COUNT + 1, h);
        assert!((coarse - precise).abs() < 1e-9, "{coarse} vs {precise}");
    }
}
