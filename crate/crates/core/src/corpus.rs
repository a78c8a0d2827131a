//! Posts, datasets, JSONL persistence, stratified splitting and the
//! synthetic corpus generator.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{KsatError, Result};
use crate::knowledge::{KnowledgeTree, Outcome};

/// A pre-segmented input post. Unrecognised JSON keys are kept in `extra`
/// and written back on save.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub sentences: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Outcome>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Post {
    pub fn new(id: impl Into<String>, sentences: Vec<String>, gold: Option<Outcome>) -> Self {
        Self {
            id: id.into(),
            sentences,
            gold,
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    posts: Vec<Post>,
    outcome_counts: [usize; Outcome::COUNT],
}

impl Dataset {
    pub fn new(posts: Vec<Post>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(posts.len());
        let mut outcome_counts = [0; Outcome::COUNT];
        for post in &posts {
            if !seen.insert(post.id.as_str()) {
                return Err(KsatError::DuplicateId(post.id.clone()));
            }
            if post.sentences.is_empty() {
                return Err(KsatError::EmptyPost(post.id.clone()));
            }
            if let Some(g) = post.gold {
                outcome_counts[g.index()] += 1;
            }
        }
        Ok(Self {
            posts,
            outcome_counts,
        })
    }

    pub fn posts(&self) -> &[Post] {
        &self.posts
    }

    pub fn into_posts(self) -> Vec<Post> {
        self.posts
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn outcome_counts(&self) -> &[usize; Outcome::COUNT] {
        &self.outcome_counts
    }

    pub fn count(&self, outcome: Outcome) -> usize {
        self.outcome_counts[outcome.index()]
    }

    pub fn labeled(&self) -> usize {
        self.outcome_counts.iter().sum()
    }
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_jsonl(&text, path)
}

pub(crate) fn parse_jsonl(text: &str, path: &Path) -> Result<Dataset> {
    let mut posts = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let post: Post = serde_json::from_str(line).map_err(|e| KsatError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        posts.push(post);
    }
    Dataset::new(posts)
}

pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_jsonl(dataset.posts(), &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(records: &[T], out: &mut impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Stratified split by gold outcome. Each class keeps at least one member on
/// both sides; both halves preserve the input order.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(KsatError::InvalidParameter(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_class: BTreeMap<Outcome, Vec<usize>> = BTreeMap::new();
    for (i, post) in dataset.posts().iter().enumerate() {
        let gold = post.gold.ok_or_else(|| {
            KsatError::InvalidData(format!("post `{}` has no gold outcome to stratify on", post.id))
        })?;
        by_class.entry(gold).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; dataset.len()];
    for (outcome, mut members) in by_class {
        let n = members.len();
        if n < 2 {
            return Err(KsatError::Stratify {
                outcome: outcome.to_string(),
                count: n,
            });
        }
        members.shuffle(&mut rng);
        let take = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        for &i in &members[..take] {
            in_train[i] = true;
        }
    }
    let (train, test): (Vec<_>, Vec<_>) = dataset
        .posts()
        .iter()
        .cloned()
        .zip(in_train)
        .partition(|(_, t)| *t);
    Ok((
        Dataset::new(train.into_iter().map(|(p, _)| p).collect())?,
        Dataset::new(test.into_iter().map(|(p, _)| p).collect())?,
    ))
}

/// Parameters of the synthetic corpus with planted concept triggers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_posts: usize,
    pub seed: u64,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub keyword_bank: BTreeMap<usize, Vec<String>>,
    pub noise_phrases: Vec<String>,
}

impl SyntheticSpec {
    /// One trigger phrase per concept of the bundled CSSRS taxonomy, three
    /// sentences per post. Noise phrases share no tokens with any trigger or
    /// concept text. Larger banks and longer posts make a harder corpus.
    pub fn cssrs(n_posts: usize, seed: u64) -> Self {
        let bank = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self {
            n_posts,
            seed,
            min_sentences: 3,
            max_sentences: 3,
            keyword_bank: BTreeMap::from([
                (0, bank(&["wish i was dead"])),
                (1, bank(&["thinking about killing myself"])),
                (2, bank(&["have a gun"])),
            ]),
            noise_phrases: bank(&[
                "work is busy lately",
                "my cat knocked over the lamp",
                "dinner tasted great",
                "traffic on the highway",
                "grocery shopping later",
                "new phone arrived",
                "played football with friends",
                "school starts soon",
                "coffee helps",
                "the bus came late",
                "painted the fence",
                "cleaned my room",
            ]),
        }
    }

    pub fn validate(&self, tree: &KnowledgeTree) -> Result<()> {
        let bad = |m: String| Err(KsatError::InvalidParameter(m));
        if self.n_posts == 0 {
            return bad("n_posts must be positive".into());
        }
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return bad(format!(
                "invalid sentence range {}..={}",
                self.min_sentences, self.max_sentences
            ));
        }
        for c in tree.concepts() {
            if self.keyword_bank.get(&c.id).is_none_or(|v| v.is_empty()) {
                return bad(format!("concept {} has no trigger phrases", c.id));
            }
        }
        if self.noise_phrases.is_empty() {
            return bad("noise phrase list is empty".into());
        }
        Ok(())
    }
}

/// Generates posts with outcomes assigned round-robin in layer order. Each
/// post draws an assignment uniformly among those mapping to its outcome,
/// plants one trigger per true concept in distinct sentences and fills the
/// rest with noise.
pub fn generate_synthetic(spec: &SyntheticSpec, tree: &KnowledgeTree) -> Result<Dataset> {
    spec.validate(tree)?;
    let rotation: Vec<(Outcome, Vec<_>)> = Outcome::ALL
        .into_iter()
        .map(|o| (o, tree.assignments_for(o)))
        .filter(|(_, a)| !a.is_empty())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.n_posts.to_string().len().max(4);
    let mut posts = Vec::with_capacity(spec.n_posts);
    for p in 0..spec.n_posts {
        let (outcome, assignments) = &rotation[p % rotation.len()];
        let assignment = assignments.choose(&mut rng).expect("non-empty");
        let true_concepts: Vec<usize> = (0..assignment.len()).filter(|&i| assignment.get(i)).collect();
        let n = rng
            .random_range(spec.min_sentences..=spec.max_sentences)
            .max(true_concepts.len());
        let mut sentences: Vec<String> = (0..n)
            .map(|_| spec.noise_phrases.choose(&mut rng).expect("non-empty").clone())
            .collect();
        let mut slots: Vec<usize> = (0..n).collect();
        slots.shuffle(&mut rng);
        for (&concept, &slot) in true_concepts.iter().zip(&slots) {
            sentences[slot] = spec.keyword_bank[&concept]
                .choose(&mut rng)
                .expect("non-empty")
                .clone();
        }
        posts.push(Post::new(format!("syn-{p:0width$}"), sentences, Some(*outcome)));
    }
    Dataset::new(posts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path() -> &'static Path {
        Path::new("posts.jsonl")
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(parse_jsonl("", path()).unwrap().is_empty());
        assert!(parse_jsonl("\n\n", path()).unwrap().is_empty());
    }

    #[test]
    fn single_line_parses() {
        let d = parse_jsonl(r#"{"id":"p1","sentences":["a","b"],"gold":"BehaviorOrAttempt"}"#, path()).unwrap();
        assert_eq!(d.len(), 1);
        let p = &d.posts()[0];
        assert_eq!(p.id, "p1");
        assert_eq!(p.sentences, ["a", "b"]);
        assert_eq!(p.gold, Some(Outcome::BehaviorOrAttempt));
        assert_eq!(d.count(Outcome::BehaviorOrAttempt), 1);
    }

    #[test]
    fn gold_is_optional_and_unknown_keys_survive() {
        let line = r#"{"id":"p1","sentences":["a"],"source":{"sub":"r/x"},"score":3}"#;
        let d = parse_jsonl(line, path()).unwrap();
        let p = &d.posts()[0];
        assert_eq!(p.gold, None);
        assert_eq!(p.extra["score"], 3);
        let mut buf = Vec::new();
        write_jsonl(d.posts(), &mut buf).unwrap();
        let again = parse_jsonl(std::str::from_utf8(&buf).unwrap(), path()).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":\"a\",\"sentences\":[\"x\"]}\n{oops\n";
        match parse_jsonl(text, path()) {
            Err(KsatError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let bad_gold = r#"{"id":"a","sentences":["x"],"gold":"Maybe"}"#;
        assert!(matches!(parse_jsonl(bad_gold, path()), Err(KsatError::Parse { line: 1, .. })));
    }

    #[test]
    fn duplicate_ids_and_empty_posts_rejected() {
        let dup = "{\"id\":\"a\",\"sentences\":[\"x\"]}\n{\"id\":\"a\",\"sentences\":[\"y\"]}\n";
        assert!(matches!(parse_jsonl(dup, path()), Err(KsatError::DuplicateId(id)) if id == "a"));
        let empty = r#"{"id":"a","sentences":[]}"#;
        assert!(matches!(parse_jsonl(empty, path()), Err(KsatError::EmptyPost(_))));
    }

    fn labeled(n_per_class: usize) -> Dataset {
        let posts = (0..n_per_class * 4)
            .map(|i| Post::new(format!("p{i}"), vec!["s".into()], Outcome::from_index(i % 4)))
            .collect();
        Dataset::new(posts).unwrap()
    }

    #[test]
    fn split_is_stratified_disjoint_and_exhaustive() {
        let d = labeled(25);
        let (train, test) = split(&d, 0.8, 11).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
        for o in Outcome::ALL {
            assert!(train.count(o).abs_diff(20) <= 1);
            assert!(test.count(o).abs_diff(5) <= 1);
        }
        let mut ids: Vec<_> = train.posts().iter().chain(test.posts()).map(|p| p.id.clone()).collect();
        ids.sort();
        let mut orig: Vec<_> = d.posts().iter().map(|p| p.id.clone()).collect();
        orig.sort();
        assert_eq!(ids, orig);
        let (train2, test2) = split(&d, 0.8, 11).unwrap();
        assert_eq!((train, test), (train2, test2));
    }

    #[test]
    fn split_rejects_tiny_classes_and_unlabeled() {
        let mut posts = labeled(3).into_posts();
        posts.retain(|p| p.gold != Some(Outcome::Ideation2) || p.id == "p2");
        let err = split(&Dataset::new(posts).unwrap(), 0.8, 0).unwrap_err();
        assert!(matches!(err, KsatError::Stratify { count: 1, .. }));
        let unlabeled = Dataset::new(vec![Post::new("u", vec!["s".into()], None)]).unwrap();
        assert!(split(&unlabeled, 0.5, 0).is_err());
        assert!(split(&labeled(3), 1.0, 0).is_err());
    }

    #[test]
    fn synthetic_round_robin_and_determinism() {
        let tree = KnowledgeTree::cssrs();
        let d = generate_synthetic(&SyntheticSpec::cssrs(4, 3), &tree).unwrap();
        let golds: Vec<_> = d.posts().iter().map(|p| p.gold.unwrap()).collect();
        assert_eq!(golds, Outcome::ALL);
        let spec = SyntheticSpec::cssrs(40, 99);
        assert_eq!(generate_synthetic(&spec, &tree).unwrap(), generate_synthetic(&spec, &tree).unwrap());
    }

    #[test]
    fn triggers_appear_iff_planted() {
        let tree = KnowledgeTree::cssrs();
        let spec = SyntheticSpec::cssrs(200, 5);
        let d = generate_synthetic(&spec, &tree).unwrap();
        for post in d.posts() {
            let present: Vec<u8> = (0..3)
                .map(|c| u8::from(post.sentences.iter().any(|s| spec.keyword_bank[&c].contains(s))))
                .collect();
            let cv = crate::knowledge::ConnectionVector::new(present).unwrap();
            assert_eq!(tree.outcome_for_assignment(&cv).unwrap(), post.gold.unwrap(), "{post:?}");
            assert!(post.sentences.len() >= spec.min_sentences);
            assert!(post.sentences.len() <= spec.max_sentences);
        }
    }

    #[test]
    fn synthetic_spec_validation() {
        let tree = KnowledgeTree::cssrs();
        let mut spec = SyntheticSpec::cssrs(4, 0);
        spec.keyword_bank.remove(&2);
        assert!(generate_synthetic(&spec, &tree).is_err());
        let mut spec = SyntheticSpec::cssrs(4, 0);
        spec.min_sentences = 6;
        assert!(spec.validate(&tree).is_err());
    }
}
