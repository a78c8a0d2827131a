//! Knowledge-context annotation of raw posts: concept presence by cosine
//! threshold, decision-tree labeling, the Bernoulli fit objective and the
//! exhaustive threshold/fragment-size grid search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{Dataset, Post};
use crate::embeddings::{cosine_similarity, embed_text, Embedder, EmbeddingConfig};
use crate::error::{KsatError, Result};
use crate::knowledge::{Concept, ConnectionVector, KnowledgeTree, Outcome};

/// Smoothing added inside the logarithms of the fit objective.
pub const LOG_DELTA: f64 = 1e-9;
pub const FRAGMENT_SIZES: [usize; 3] = [1, 2, 3];
pub const DEFAULT_THETA_STEP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationParams {
    pub thetas: Vec<f64>,
    pub frag_size: usize,
}

impl AnnotationParams {
    /// Thresholds {0.3, 0.5, 0.3} with single-sentence fragments.
    pub fn reported() -> Self {
        Self {
            thetas: vec![0.3, 0.5, 0.3],
            frag_size: 1,
        }
    }

    pub fn validate(&self, num_concepts: usize) -> Result<()> {
        if self.thetas.len() != num_concepts {
            return Err(KsatError::InvalidParameter(format!(
                "expected {num_concepts} thresholds, got {}",
                self.thetas.len()
            )));
        }
        if let Some(t) = self.thetas.iter().find(|t| !(-1.0..=1.0).contains(*t)) {
            return Err(KsatError::InvalidParameter(format!(
                "threshold {t} outside [-1, 1]"
            )));
        }
        if !FRAGMENT_SIZES.contains(&self.frag_size) {
            return Err(KsatError::InvalidParameter(format!(
                "fragment size must be 1, 2 or 3, got {}",
                self.frag_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedPost {
    pub post_id: String,
    pub sentence_presence: Vec<ConnectionVector>,
    pub post_presence: ConnectionVector,
    pub predicted_outcome: Outcome,
}

/// Whether `concept` is present in `fragment_text` under the hashing embedder.
pub fn concept_present(fragment_text: &str, concept: &Concept, theta: f64, embedder: &EmbeddingConfig) -> bool {
    let f = embed_text(fragment_text, embedder);
    let q = embed_text(&concept.query_text, embedder);
    cosine_similarity(&f, &q).expect("same config, same dimension") >= theta
}

/// Start offsets and length of the sliding fragments of a post.
pub fn fragment_windows(num_sentences: usize, frag_size: usize) -> (usize, usize) {
    if num_sentences < frag_size {
        (1, num_sentences)
    } else {
        (num_sentences - frag_size + 1, frag_size)
    }
}

/// Per-post cosine similarities against every concept, reduced to what the
/// annotator needs: per-sentence values and the per-fragment-size maximum.
#[derive(Debug, Clone)]
pub struct PostSimilarities {
    pub sentence: Vec<Vec<f64>>,
    pub max_by_frag: [Vec<f64>; 3],
}

impl PostSimilarities {
    pub fn compute(post: &Post, tree: &KnowledgeTree, embedder: &Embedder) -> Result<Self> {
        if post.sentences.is_empty() {
            return Err(KsatError::EmptyPost(post.id.clone()));
        }
        let queries = tree
            .concepts()
            .iter()
            .map(|c| embedder.concept(c))
            .collect::<Result<Vec<_>>>()?;
        let sims = |e: &crate::embeddings::SentenceEmbedding| {
            queries
                .iter()
                .map(|q| cosine_similarity(e, q))
                .collect::<Result<Vec<f64>>>()
        };
        let n = post.sentences.len();
        let sentence = (0..n)
            .map(|i| sims(&embedder.sentence(post, i)?))
            .collect::<Result<Vec<_>>>()?;
        let mut max_by_frag: [Vec<f64>; 3] = Default::default();
        for (slot, &f) in FRAGMENT_SIZES.iter().enumerate() {
            let (count, len) = fragment_windows(n, f);
            let mut best = vec![f64::NEG_INFINITY; queries.len()];
            for start in 0..count {
                let s = if len == 1 {
                    sentence[start].clone()
                } else {
                    sims(&embedder.fragment(post, start, len)?)?
                };
                best.iter_mut().zip(s).for_each(|(b, v)| *b = b.max(v));
            }
            max_by_frag[slot] = best;
        }
        Ok(Self {
            sentence,
            max_by_frag,
        })
    }

    pub fn post_presence(&self, params: &AnnotationParams) -> ConnectionVector {
        let max = &self.max_by_frag[params.frag_size - 1];
        ConnectionVector::from_bools(max.iter().zip(&params.thetas).map(|(m, t)| m >= t))
    }

    pub fn sentence_presence(&self, thetas: &[f64]) -> Vec<ConnectionVector> {
        self.sentence
            .iter()
            .map(|s| ConnectionVector::from_bools(s.iter().zip(thetas).map(|(v, t)| v >= t)))
            .collect()
    }
}

pub fn annotate_post(
    post: &Post,
    tree: &KnowledgeTree,
    params: &AnnotationParams,
    embedder: &Embedder,
) -> Result<AnnotatedPost> {
    params.validate(tree.num_concepts())?;
    let sims = PostSimilarities::compute(post, tree, embedder)?;
    let post_presence = sims.post_presence(params);
    Ok(AnnotatedPost {
        post_id: post.id.clone(),
        sentence_presence: sims.sentence_presence(&params.thetas),
        predicted_outcome: tree.outcome_for_assignment(&post_presence)?,
        post_presence,
    })
}

/// Laplace-smoothed (add-one) empirical gold outcome frequencies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomePrior(pub [f64; Outcome::COUNT]);

impl OutcomePrior {
    pub fn from_counts(counts: &[usize; Outcome::COUNT]) -> Self {
        let total: usize = counts.iter().sum();
        let denom = (total + Outcome::COUNT) as f64;
        Self(counts.map(|c| (c + 1) as f64 / denom))
    }

    pub fn get(&self, outcome: Outcome) -> f64 {
        self.0[outcome.index()]
    }
}

/// One Bernoulli term: `ln(p + δ)` on a match, `ln(1 - p + δ)` otherwise.
pub fn bernoulli_term(matched: bool, p: f64) -> f64 {
    if matched {
        (p + LOG_DELTA).ln()
    } else {
        (1.0 - p + LOG_DELTA).ln()
    }
}

/// Sum of Bernoulli terms over `(predicted, gold)` pairs, with `p` the prior
/// of the predicted outcome.
pub fn log_likelihood_with_prior(pairs: &[(Outcome, Outcome)], prior: &OutcomePrior) -> f64 {
    pairs
        .iter()
        .map(|&(pred, gold)| bernoulli_term(pred == gold, prior.get(pred)))
        .sum()
}

fn golds(dataset: &Dataset) -> Result<Vec<Outcome>> {
    if dataset.is_empty() {
        return Err(KsatError::InvalidData("annotation dataset is empty".into()));
    }
    dataset
        .posts()
        .iter()
        .map(|p| {
            p.gold
                .ok_or_else(|| KsatError::InvalidData(format!("post `{}` has no gold outcome", p.id)))
        })
        .collect()
}

pub fn bernoulli_log_likelihood(
    dataset: &Dataset,
    tree: &KnowledgeTree,
    params: &AnnotationParams,
    embedder: &Embedder,
) -> Result<f64> {
    let golds = golds(dataset)?;
    let prior = OutcomePrior::from_counts(dataset.outcome_counts());
    let pairs = dataset
        .posts()
        .iter()
        .zip(golds)
        .map(|(p, g)| Ok((annotate_post(p, tree, params, embedder)?.predicted_outcome, g)))
        .collect::<Result<Vec<_>>>()?;
    Ok(log_likelihood_with_prior(&pairs, &prior))
}

/// Threshold lattice {-1, -1 + step, ..., 1}. The last point is pinned to
/// exactly 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaLattice {
    pub step: f64,
    pub intervals: usize,
}

impl ThetaLattice {
    pub fn new(step: f64) -> Result<Self> {
        let intervals = (2.0 / step).round();
        if !(step > 0.0) || intervals < 1.0 || (intervals * step - 2.0).abs() > 1e-9 {
            return Err(KsatError::InvalidParameter(format!(
                "theta step {step} does not divide 2 into whole intervals"
            )));
        }
        Ok(Self {
            step,
            intervals: intervals as usize,
        })
    }

    pub fn points(&self) -> usize {
        self.intervals + 1
    }

    pub fn value(&self, j: usize) -> f64 {
        if j == self.intervals {
            1.0
        } else {
            -1.0 + j as f64 * self.step
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub params: AnnotationParams,
    pub log_likelihood: f64,
    pub evaluated: usize,
}

/// Exhaustive search over thresholds and fragment sizes. Points are visited
/// in lexicographic (thetas, frag_size) order and the first maximum wins, so
/// parallel scoring leaves the answer unchanged.
pub fn grid_search(
    dataset: &Dataset,
    tree: &KnowledgeTree,
    embedder: &Embedder,
    theta_step: f64,
) -> Result<GridSearchResult> {
    let golds = golds(dataset)?;
    let lattice = ThetaLattice::new(theta_step)?;
    let k = tree.num_concepts();
    let prior = OutcomePrior::from_counts(dataset.outcome_counts());
    let sims = dataset
        .posts()
        .par_iter()
        .map(|p| PostSimilarities::compute(p, tree, embedder))
        .collect::<Result<Vec<_>>>()?;

    let per_axis = lattice.points();
    let tuples = per_axis
        .checked_pow(k as u32)
        .filter(|t| t.checked_mul(FRAGMENT_SIZES.len()).is_some_and(|n| n <= 1 << 32))
        .ok_or_else(|| KsatError::InvalidParameter(format!("lattice too large for {k} concepts")))?;
    let total = tuples * FRAGMENT_SIZES.len();

    let decode = |point: usize| -> (Vec<usize>, usize) {
        let frag = FRAGMENT_SIZES[point % FRAGMENT_SIZES.len()];
        let mut rest = point / FRAGMENT_SIZES.len();
        let mut digits = vec![0; k];
        for d in digits.iter_mut().rev() {
            *d = rest % per_axis;
            rest /= per_axis;
        }
        (digits, frag)
    };

    let scores: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|point| {
            let (digits, frag) = decode(point);
            let thetas: Vec<f64> = digits.iter().map(|&j| lattice.value(j)).collect();
            sims.iter()
                .zip(&golds)
                .map(|(s, &gold)| {
                    let max = &s.max_by_frag[frag - 1];
                    let presence = ConnectionVector::from_bools(max.iter().zip(&thetas).map(|(m, t)| m >= t));
                    let pred = tree.outcome_for_assignment(&presence).expect("K-length presence");
                    bernoulli_term(pred == gold, prior.get(pred))
                })
                .sum()
        })
        .collect();

    let (best, &score) = scores
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, &f64)>, (i, s)| match acc {
            Some((_, b)) if *s <= *b => acc,
            _ => Some((i, s)),
        })
        .expect("lattice is non-empty");
    let (digits, frag_size) = decode(best);
    Ok(GridSearchResult {
        params: AnnotationParams {
            thetas: digits.iter().map(|&j| lattice.value(j)).collect(),
            frag_size,
        },
        log_likelihood: score,
        evaluated: total,
    })
}

/// Copy of `post` carrying its annotation as extra JSON fields.
pub fn annotated_record(post: &Post, annotation: &AnnotatedPost) -> Post {
    let mut out = post.clone();
    let to_value = |v: &ConnectionVector| Value::from(v.bits().to_vec());
    out.extra.insert(
        "sentence_presence".into(),
        Value::Array(annotation.sentence_presence.iter().map(to_value).collect()),
    );
    out.extra
        .insert("post_presence".into(), to_value(&annotation.post_presence));
    out.extra.insert(
        "predicted".into(),
        Value::String(annotation.predicted_outcome.to_string()),
    );
    out
}

/// Reads the `sentence_presence` field written by [`annotated_record`].
pub fn read_sentence_presence(post: &Post, num_concepts: usize) -> Result<Vec<ConnectionVector>> {
    let raw = post.extra.get("sentence_presence").ok_or_else(|| {
        KsatError::InvalidData(format!("post `{}` has no sentence_presence; annotate it first", post.id))
    })?;
    let presence: Vec<ConnectionVector> = serde_json::from_value(raw.clone())
        .map_err(|e| KsatError::InvalidData(format!("post `{}`: sentence_presence: {e}", post.id)))?;
    if presence.len() != post.sentences.len() {
        return Err(KsatError::InvalidData(format!(
            "post `{}` has {} sentences but {} presence vectors",
            post.id,
            post.sentences.len(),
            presence.len()
        )));
    }
    if let Some(v) = presence.iter().find(|v| v.len() != num_concepts) {
        return Err(KsatError::InvalidData(format!(
            "post `{}`: presence vector of length {} for {num_concepts} concepts",
            post.id,
            v.len()
        )));
    }
    Ok(presence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use proptest::prelude::*;

    fn embedder() -> Embedder {
        Embedder::new(EmbeddingConfig::default()).unwrap()
    }

    fn post(sentences: &[&str]) -> Post {
        Post::new("p", sentences.iter().map(|s| s.to_string()).collect(), None)
    }

    #[test]
    fn concept_present_fixtures() {
        let tree = KnowledgeTree::cssrs();
        let cfg = EmbeddingConfig::default();
        let c = &tree.concepts()[2];
        assert!(concept_present(&c.query_text, c, 0.99, &cfg));
        assert!(concept_present("anything at all", c, -1.0, &cfg));
        // Fixture pair verified to hash orthogonally at the default config.
        let frag = "painted the fence";
        let cos = cosine_similarity(&embed_text(frag, &cfg), &embed_text(&c.query_text, &cfg)).unwrap();
        assert_eq!(cos, 0.0);
        assert!(!concept_present(frag, c, 0.9, &cfg));
    }

    #[test]
    fn worked_example_presence_is_pinned() {
        let tree = KnowledgeTree::cssrs();
        let p = post(&["I don't feel like waking up and have a gun.", "Oh well."]);
        let a = annotate_post(&p, &tree, &AnnotationParams::reported(), &embedder()).unwrap();
        // Recomputed with the hashing embedder; differs from a trained
        // sentence encoder, which marks all three concepts.
        assert_eq!(a.post_presence.bits(), WORKED_EXAMPLE_PRESENCE);
        assert_eq!(a.sentence_presence.len(), 2);
    }

    const WORKED_EXAMPLE_PRESENCE: &[u8] = &[0, 0, 1];

    #[test]
    fn minus_one_thresholds_mark_everything() {
        let tree = KnowledgeTree::cssrs();
        let params = AnnotationParams {
            thetas: vec![-1.0; 3],
            frag_size: 2,
        };
        let a = annotate_post(&post(&["coffee helps", "grocery shopping later"]), &tree, &params, &embedder()).unwrap();
        assert_eq!(a.post_presence, ConnectionVector::ones(3));
        assert_eq!(a.predicted_outcome, Outcome::BehaviorOrAttempt);
    }

    #[test]
    fn params_are_validated() {
        let mut p = AnnotationParams::reported();
        p.thetas[0] = 1.0 + 1e-9;
        assert!(p.validate(3).is_err());
        assert!(AnnotationParams::reported().validate(2).is_err());
        let p = AnnotationParams {
            thetas: vec![0.0; 3],
            frag_size: 4,
        };
        assert!(p.validate(3).is_err());
        let empty = Post::new("e", vec![], None);
        assert!(annotate_post(&empty, &KnowledgeTree::cssrs(), &AnnotationParams::reported(), &embedder()).is_err());
    }

    #[test]
    fn short_posts_form_one_fragment() {
        assert_eq!(fragment_windows(2, 3), (1, 2));
        assert_eq!(fragment_windows(5, 3), (3, 3));
        assert_eq!(fragment_windows(4, 1), (4, 1));
    }

    #[test]
    fn bernoulli_fixtures() {
        let perfect = OutcomePrior([1.0; 4]);
        let pairs = [(Outcome::Ideation1, Outcome::Ideation1), (Outcome::Ideation2, Outcome::Ideation2)];
        assert!(log_likelihood_with_prior(&pairs, &perfect).abs() < 1e-8);

        let half = OutcomePrior([0.5; 4]);
        let v = log_likelihood_with_prior(&[(Outcome::Ideation1, Outcome::Ideation2)], &half);
        assert_eq!(v, (0.5 + 1e-9f64).ln());
        assert!((v + std::f64::consts::LN_2).abs() < 1e-8);

        let mixed = [(Outcome::Ideation1, Outcome::Ideation2), (Outcome::Ideation2, Outcome::Ideation2)];
        let prior = OutcomePrior::from_counts(&[3, 1, 4, 0]);
        let doubled: Vec<_> = mixed.iter().chain(&mixed).copied().collect();
        assert_eq!(log_likelihood_with_prior(&doubled, &prior), 2.0 * log_likelihood_with_prior(&mixed, &prior));
    }

    #[test]
    fn laplace_prior() {
        let p = OutcomePrior::from_counts(&[2, 0, 1, 1]);
        assert_eq!(p.0, [3.0 / 8.0, 1.0 / 8.0, 2.0 / 8.0, 2.0 / 8.0]);
    }

    #[test]
    fn lattice_validation() {
        assert_eq!(ThetaLattice::new(0.1).unwrap().points(), 21);
        assert_eq!(ThetaLattice::new(0.5).unwrap().value(4), 1.0);
        assert_eq!(ThetaLattice::new(0.5).unwrap().value(1), -0.5);
        assert!(ThetaLattice::new(0.3).is_err());
        assert!(ThetaLattice::new(0.0).is_err());
        assert!(ThetaLattice::new(-0.5).is_err());
    }

    #[test]
    fn single_post_always_correct_gives_smallest_params() {
        // A single-concept tree that predicts the same outcome everywhere
        // makes every lattice point score identically.
        let json = r#"{"concepts":[{"id":0,"name":"c","query_text":"c"}],
            "outcomes":["IndicationOrNone","Ideation1","Ideation2","BehaviorOrAttempt"],
            "outcome_map":{"0":"Ideation1","1":"Ideation1"},
            "layer_contexts":{"IndicationOrNone":[0],"Ideation1":[0],"Ideation2":[0],"BehaviorOrAttempt":[0]}}"#;
        let tree = KnowledgeTree::from_json(json).unwrap();
        let d = Dataset::new(vec![Post::new("a", vec!["x y".into()], Some(Outcome::Ideation1))]).unwrap();
        let r = grid_search(&d, &tree, &embedder(), 0.5).unwrap();
        assert_eq!(r.params, AnnotationParams { thetas: vec![-1.0], frag_size: 1 });
        assert_eq!(r.evaluated, 15);
    }

    #[test]
    fn grid_search_rejects_unlabeled_and_empty() {
        let tree = KnowledgeTree::cssrs();
        assert!(grid_search(&Dataset::default(), &tree, &embedder(), 0.5).is_err());
        let d = Dataset::new(vec![Post::new("a", vec!["x".into()], None)]).unwrap();
        assert!(grid_search(&d, &tree, &embedder(), 0.5).is_err());
    }

    #[test]
    fn generous_thresholds_recover_planted_assignment() {
        let tree = KnowledgeTree::cssrs();
        let spec = SyntheticSpec::cssrs(40, 17);
        let d = generate_synthetic(&spec, &tree).unwrap();
        let params = AnnotationParams {
            thetas: vec![0.4; 3],
            frag_size: 1,
        };
        for p in d.posts() {
            let planted = ConnectionVector::from_bools(
                (0..3).map(|c| p.sentences.iter().any(|s| spec.keyword_bank[&c].contains(s))),
            );
            let a = annotate_post(p, &tree, &params, &embedder()).unwrap();
            assert_eq!(a.post_presence, planted, "{p:?}");
            assert_eq!(a.predicted_outcome, p.gold.unwrap());
        }
    }

    #[test]
    fn presence_round_trips_through_record() {
        let tree = KnowledgeTree::cssrs();
        let p = post(&["have a gun", "coffee helps"]);
        let a = annotate_post(&p, &tree, &AnnotationParams::reported(), &embedder()).unwrap();
        let rec = annotated_record(&p, &a);
        assert_eq!(read_sentence_presence(&rec, 3).unwrap(), a.sentence_presence);
        assert!(read_sentence_presence(&p, 3).is_err());
        assert!(read_sentence_presence(&rec, 2).is_err());
    }

    proptest! {
        #[test]
        fn presence_is_monotone_in_theta(idx in 0usize..12, extra in 0usize..12, lo in -1.0f64..1.0, bump in 0.0f64..1.0) {
            let spec = SyntheticSpec::cssrs(1, 0);
            let bank: Vec<String> = spec.keyword_bank.values().flatten().cloned().chain(spec.noise_phrases.clone()).collect();
            let p = post(&[&bank[idx % bank.len()], &bank[(idx + extra) % bank.len()]]);
            let tree = KnowledgeTree::cssrs();
            let hi = (lo + bump).min(1.0);
            let a = annotate_post(&p, &tree, &AnnotationParams { thetas: vec![lo; 3], frag_size: 1 }, &embedder()).unwrap();
            let b = annotate_post(&p, &tree, &AnnotationParams { thetas: vec![hi; 3], frag_size: 1 }, &embedder()).unwrap();
            for i in 0..3 {
                prop_assert!(b.post_presence.get(i) <= a.post_presence.get(i));
            }
        }

        #[test]
        fn adding_a_sentence_only_sets_bits(idx in 0usize..30, extra in 0usize..30, frag in 1usize..=3) {
            let spec = SyntheticSpec::cssrs(1, 0);
            let bank: Vec<String> = spec.keyword_bank.values().flatten().cloned().chain(spec.noise_phrases.clone()).collect();
            let s1 = bank[idx % bank.len()].clone();
            let s2 = bank[extra % bank.len()].clone();
            let tree = KnowledgeTree::cssrs();
            let params = AnnotationParams { thetas: vec![0.2; 3], frag_size: frag };
            let before = annotate_post(&post(&[&s1, &s2, &s1]), &tree, &params, &embedder()).unwrap();
            let after = annotate_post(&post(&[&s1, &s2, &s1, &s2]), &tree, &params, &embedder()).unwrap();
            if frag <= 3 {
                for i in 0..3 {
                    prop_assert!(after.post_presence.get(i) >= before.post_presence.get(i));
                }
            }
        }
    }
}
