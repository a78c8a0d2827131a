//! Classification metrics and the data-versus-knowledge reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KsatError, Result};
use crate::knowledge::Outcome;
use crate::model::{ForwardOutput, KsatModel};
use crate::training::Example;

pub fn accuracy(predictions: &[Outcome], golds: &[Outcome]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(KsatError::DimensionMismatch {
            expected: golds.len(),
            found: predictions.len(),
        });
    }
    if golds.is_empty() {
        return Err(KsatError::InvalidData("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

/// 1-based ranks with ties sharing their average rank.
pub fn midranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Positions i..j (0-based) share ranks i+1..=j.
        let rank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = rank;
        }
        i = j;
    }
    ranks
}

/// Binary AUC via the Mann-Whitney statistic. `None` when either class is
/// empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Macro one-vs-rest AUC. Outcomes absent from `golds` are skipped and the
/// average is taken over the rest.
pub fn auc_roc(scores: &[[f64; Outcome::COUNT]], golds: &[Outcome]) -> Result<f64> {
    if scores.len() != golds.len() {
        return Err(KsatError::DimensionMismatch {
            expected: golds.len(),
            found: scores.len(),
        });
    }
    let per_class: Vec<f64> = Outcome::ALL
        .iter()
        .filter_map(|&o| {
            let column: Vec<f64> = scores.iter().map(|s| s[o.index()]).collect();
            let positive: Vec<bool> = golds.iter().map(|&g| g == o).collect();
            binary_auc(&column, &positive)
        })
        .collect();
    if per_class.is_empty() {
        return Err(KsatError::InvalidData("AUC is undefined when every post has the same gold outcome".into()));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Rows are gold outcomes, columns predictions.
pub type Confusion = [[usize; Outcome::COUNT]; Outcome::COUNT];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    pub auc_roc: f64,
    pub confusion: Confusion,
}

fn forward_all(model: &KsatModel, examples: &[Example]) -> Result<Vec<ForwardOutput>> {
    examples
        .par_iter()
        .map(|ex| model.forward_embedded(&ex.sentences, &ex.presence))
        .collect()
}

pub fn evaluate(model: &KsatModel, examples: &[Example]) -> Result<Metrics> {
    let outputs = forward_all(model, examples)?;
    let golds: Vec<Outcome> = examples.iter().map(|e| e.gold).collect();
    let preds: Vec<Outcome> = outputs.iter().map(ForwardOutput::predicted).collect();
    let scores: Vec<_> = outputs.iter().map(ForwardOutput::normalized).collect();
    let mut confusion = [[0; Outcome::COUNT]; Outcome::COUNT];
    for (g, p) in golds.iter().zip(&preds) {
        confusion[g.index()][p.index()] += 1;
    }
    Ok(Metrics {
        n: examples.len(),
        accuracy: accuracy(&preds, &golds)?,
        auc_roc: auc_roc(&scores, &golds)?,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerContribution {
    pub layer: Outcome,
    pub alpha: f64,
    pub knowledge_logit_mean: f64,
    pub data_logit_mean: f64,
    pub kg_bias_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub posts: usize,
    pub layers: Vec<LayerContribution>,
}

/// Per layer: alpha, mean |alpha W^T z_kcls| and mean |(1 - alpha) W^T z_cls|
/// over posts and outcomes, and the mean graph-context bias.
pub fn contribution_report(model: &KsatModel, examples: &[Example]) -> Result<ContributionReport> {
    if examples.is_empty() {
        return Err(KsatError::InvalidData("contribution report over an empty dataset".into()));
    }
    let outputs = forward_all(model, examples)?;
    let per_post = (examples.len() * Outcome::COUNT) as f64;
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(li, layer)| {
            let alpha = layer.alpha();
            let (mut know, mut data, mut bias) = (0.0, 0.0, 0.0);
            for out in &outputs {
                let act = &out.layers[li];
                know += layer.w_out.t().dot(&act.z_kcls).iter().map(|v| (alpha * v).abs()).sum::<f64>();
                data += layer.w_out.t().dot(&act.z_cls).iter().map(|v| ((1.0 - alpha) * v).abs()).sum::<f64>();
                bias += act.kg_bias;
            }
            LayerContribution {
                layer: layer.outcome,
                alpha,
                knowledge_logit_mean: know / per_post,
                data_logit_mean: data / per_post,
                kg_bias_mean: bias / examples.len() as f64,
            }
        })
        .collect();
    Ok(ContributionReport {
        posts: examples.len(),
        layers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub post_a: String,
    pub post_b: String,
    pub d_zcls: f64,
    pub d_zkcls: f64,
    pub close_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub epsilon: f64,
    pub pairs: Vec<PairDistance>,
}

fn euclidean(a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Final-layer representations for each example.
pub fn final_representations(model: &KsatModel, examples: &[Example]) -> Result<Vec<(ndarray::Array1<f64>, ndarray::Array1<f64>)>> {
    Ok(forward_all(model, examples)?
        .into_iter()
        .map(|mut out| {
            let last = out.layers.pop().expect("model has layers");
            (last.z_cls, last.z_kcls)
        })
        .collect())
}

/// Distances between final-layer `z_cls` and `z_kcls` for each index pair,
/// flagged close when the `z_kcls` distance is below `epsilon`.
pub fn distance_report(model: &KsatModel, examples: &[Example], pairs: &[(usize, usize)], epsilon: f64) -> Result<DistanceReport> {
    let reps = final_representations(model, examples)?;
    let pairs = pairs
        .iter()
        .map(|&(a, b)| {
            if a >= examples.len() || b >= examples.len() {
                return Err(KsatError::InvalidParameter(format!("pair ({a}, {b}) out of range")));
            }
            let d_zkcls = euclidean(&reps[a].1, &reps[b].1);
            Ok(PairDistance {
                post_a: examples[a].id.clone(),
                post_b: examples[b].id.clone(),
                d_zcls: euclidean(&reps[a].0, &reps[b].0),
                d_zkcls,
                close_flag: d_zkcls < epsilon,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DistanceReport { epsilon, pairs })
}

/// All unordered index pairs `i < j`.
pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// Linear-interpolated percentile (`q` in [0, 1]) of `values`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// Default closeness threshold: the 25th percentile of all pairwise final
/// `z_kcls` distances.
pub fn default_report_epsilon(model: &KsatModel, examples: &[Example]) -> Result<f64> {
    let reps = final_representations(model, examples)?;
    let d: Vec<f64> = all_pairs(reps.len()).iter().map(|&(a, b)| euclidean(&reps[a].1, &reps[b].1)).collect();
    percentile(&d, 0.25).ok_or_else(|| KsatError::InvalidData("need at least two posts for pair distances".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSeparation {
    pub within_class_zkcls: f64,
    pub between_class_zkcls: f64,
    pub within_class_zcls: f64,
    pub between_class_zcls: f64,
}

/// Mean final-layer distances over same-gold and different-gold pairs.
pub fn class_separation(model: &KsatModel, examples: &[Example]) -> Result<ClassSeparation> {
    let reps = final_representations(model, examples)?;
    let mut sums = [[0.0; 2]; 2];
    let mut counts = [0usize; 2];
    for (a, b) in all_pairs(reps.len()) {
        let slot = usize::from(examples[a].gold != examples[b].gold);
        sums[slot][0] += euclidean(&reps[a].1, &reps[b].1);
        sums[slot][1] += euclidean(&reps[a].0, &reps[b].0);
        counts[slot] += 1;
    }
    if counts.contains(&0) {
        return Err(KsatError::InvalidData("need same-class and cross-class pairs".into()));
    }
    let mean = |slot: usize, which: usize| sums[slot][which] / counts[slot] as f64;
    Ok(ClassSeparation {
        within_class_zkcls: mean(0, 0),
        between_class_zkcls: mean(1, 0),
        within_class_zcls: mean(0, 1),
        between_class_zcls: mean(1, 1),
    })
}
