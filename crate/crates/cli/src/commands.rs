use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use serde::Serialize;

use ksat_core::analysis::{all_pairs, class_separation, default_report_epsilon, ClassSeparation};
use ksat_core::annotation::annotated_record;
use ksat_core::embeddings::{load_embeddings, EmbeddingTable};
use ksat_core::training::{examples_from_dataset, init_model, random_fixture};
use ksat_core::*;

use crate::GlobalOpts;

const DEFAULT_DIM: usize = 64;
const GRADCHECK_DIM: usize = 16;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Numerical(_) => "numerical",
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

impl From<KsatError> for CliError {
    fn from(e: KsatError) -> Self {
        match e {
            KsatError::InvalidParameter(_) => CliError::Usage(e.to_string()),
            KsatError::NumericalCollapse(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Prints `{"error": kind, "message": ...}` on one line of stderr.
pub fn report_error(e: &CliError) -> ExitCode {
    let line = serde_json::json!({ "error": e.kind(), "message": e.message().replace('\n', " ") });
    eprintln!("{line}");
    ExitCode::from(e.code())
}

type CliResult<T = ()> = Result<T, CliError>;

fn progress(g: &GlobalOpts, msg: impl fmt::Display) {
    if !g.quiet {
        eprintln!("ksat: {msg}");
    }
}

fn load_tree(g: &GlobalOpts) -> CliResult<KnowledgeTree> {
    Ok(match &g.taxonomy {
        Some(p) => KnowledgeTree::load(p)?,
        None => KnowledgeTree::cssrs(),
    })
}

fn load_table(g: &GlobalOpts) -> CliResult<Option<EmbeddingTable>> {
    g.embeddings.as_ref().map(|p| load_embeddings(p).map_err(CliError::from)).transpose()
}

/// Embedder for fresh runs: hash features at `--dim`, or the `--embeddings`
/// table (whose dimension wins when `--dim` is omitted).
fn fresh_embedder(g: &GlobalOpts) -> CliResult<Embedder> {
    match load_table(g)? {
        Some(table) => {
            let config = EmbeddingConfig::with_dimension(g.dim.unwrap_or(table.dimension()));
            Ok(Embedder::with_table(config, table)?)
        }
        None => Ok(Embedder::new(EmbeddingConfig::with_dimension(g.dim.unwrap_or(DEFAULT_DIM)))?),
    }
}

/// Embedder matching a trained model's configuration.
fn model_embedder(g: &GlobalOpts, model: &KsatModel) -> CliResult<Embedder> {
    if g.dim.is_some_and(|d| d != model.dimension()) {
        return Err(CliError::Usage(format!(
            "--dim {} does not match the model dimension {}",
            g.dim.unwrap_or_default(),
            model.dimension()
        )));
    }
    match load_table(g)? {
        Some(table) => Ok(Embedder::with_table(model.embedding, table)?),
        None => Ok(Embedder::new(model.embedding)?),
    }
}

fn load_model(g: &GlobalOpts, path: &Path) -> CliResult<KsatModel> {
    let model = KsatModel::load(path)?;
    if g.taxonomy.is_some() {
        let tree = load_tree(g)?;
        if tree.fingerprint() != model.tree.fingerprint() {
            return Err(CliError::Data(format!(
                "--taxonomy differs from the taxonomy stored in {}",
                path.display()
            )));
        }
    }
    Ok(model)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Trigger phrases for a custom taxonomy: the comma-separated pieces of each
/// concept's query text.
fn synthetic_spec(tree: &KnowledgeTree, custom: bool, n: usize, seed: u64) -> SyntheticSpec {
    let mut spec = SyntheticSpec::cssrs(n, seed);
    if custom {
        spec.keyword_bank = tree
            .concepts()
            .iter()
            .map(|c| {
                let phrases = c
                    .query_text
                    .split(',')
                    .map(|s| s.trim().to_lowercase())
                    .filter(|s| !s.is_empty())
                    .collect();
                (c.id, phrases)
            })
            .collect::<BTreeMap<_, _>>();
    }
    spec
}

pub fn synth(g: &GlobalOpts, n: usize, out: &Path) -> CliResult {
    let tree = load_tree(g)?;
    let spec = synthetic_spec(&tree, g.taxonomy.is_some(), n, g.seed);
    let data = generate_synthetic(&spec, &tree)?;
    save_jsonl(&data, out)?;
    progress(g, format_args!("wrote {} posts to {}", data.len(), out.display()));
    Ok(())
}

pub enum AnnotateMode {
    GridSearch { step: f64 },
    Fixed { thetas: Option<Vec<f64>>, frag_size: Option<usize> },
}

pub fn annotate(g: &GlobalOpts, data: &Path, out: &Path, mode: AnnotateMode) -> CliResult {
    let tree = load_tree(g)?;
    let embedder = fresh_embedder(g)?;
    let dataset = load_jsonl(data)?;
    let params = match mode {
        AnnotateMode::GridSearch { step } => {
            let found = grid_search(&dataset, &tree, &embedder, step)?;
            progress(
                g,
                format_args!("grid search scored {} points, log-likelihood {:.6}", found.evaluated, found.log_likelihood),
            );
            println!("{}", serde_json::to_string(&found)?);
            found.params
        }
        AnnotateMode::Fixed { thetas, frag_size } => {
            let reported = AnnotationParams::reported();
            let thetas = match thetas {
                Some(t) => t,
                None if tree.num_concepts() == reported.thetas.len() => reported.thetas,
                None => {
                    return Err(CliError::Usage(format!(
                        "--thetas is required for a {}-concept taxonomy",
                        tree.num_concepts()
                    )))
                }
            };
            AnnotationParams {
                thetas,
                frag_size: frag_size.unwrap_or(reported.frag_size),
            }
        }
    };
    params.validate(tree.num_concepts())?;
    let posts = dataset
        .posts()
        .iter()
        .map(|p| Ok(annotated_record(p, &annotate_post(p, &tree, &params, &embedder)?)))
        .collect::<Result<Vec<_>, KsatError>>()?;
    save_jsonl(&Dataset::new(posts)?, out)?;
    progress(
        g,
        format_args!("annotated {} posts with thetas {:?}, fragment size {}", dataset.len(), params.thetas, params.frag_size),
    );
    Ok(())
}

pub struct TrainOpts {
    pub epochs: usize,
    pub lr: f64,
    pub kg_bias: bool,
    pub test_fraction: Option<f64>,
}

#[derive(Serialize)]
struct RunConfig {
    seed: u64,
    dimension: usize,
    epochs: usize,
    learning_rate: f64,
    kg_bias_enabled: bool,
    test_fraction: Option<f64>,
    train_posts: usize,
    test_posts: usize,
    taxonomy_sha256: String,
}

#[derive(Serialize)]
struct RunRecord {
    config: RunConfig,
    loss_trace: Vec<f64>,
    final_loss: f64,
    train_metrics: Metrics,
    test_metrics: Option<Metrics>,
    alpha_trajectory: Vec<Vec<f64>>,
}

pub fn train(g: &GlobalOpts, data: &Path, out: &Path, run_out: &Path, opts: &TrainOpts) -> CliResult {
    let tree = load_tree(g)?;
    let embedder = fresh_embedder(g)?;
    let dataset = load_jsonl(data)?;
    let (train_set, test_set) = match opts.test_fraction {
        Some(f) => {
            let (a, b) = split(&dataset, 1.0 - f, g.seed)?;
            (a, Some(b))
        }
        None => (dataset, None),
    };
    let train_ex = examples_from_dataset(&train_set, &tree, &embedder)?;
    let test_ex = test_set
        .map(|t| examples_from_dataset(&t, &tree, &embedder))
        .transpose()?;
    let config = TrainConfig {
        learning_rate: opts.lr,
        epochs: opts.epochs,
        seed: g.seed,
        kg_bias_enabled: opts.kg_bias,
        ..TrainConfig::default()
    };
    let model = init_model(tree.clone(), &embedder, &config)?;
    progress(
        g,
        format_args!("training on {} posts for {} epochs", train_ex.len(), opts.epochs),
    );
    let result = ksat_core::train(model, &train_ex, &config)?;
    result.model.save(out)?;
    let train_metrics = evaluate(&result.model, &train_ex)?;
    let test_metrics = test_ex.as_ref().map(|t| evaluate(&result.model, t)).transpose()?;
    let record = RunRecord {
        config: RunConfig {
            seed: g.seed,
            dimension: embedder.dimension(),
            epochs: opts.epochs,
            learning_rate: opts.lr,
            kg_bias_enabled: opts.kg_bias,
            test_fraction: opts.test_fraction,
            train_posts: train_ex.len(),
            test_posts: test_ex.as_ref().map_or(0, Vec::len),
            taxonomy_sha256: tree.fingerprint(),
        },
        loss_trace: result.loss_trace,
        final_loss: result.final_loss,
        train_metrics,
        test_metrics,
        alpha_trajectory: result.alpha_trajectory,
    };
    write_json(run_out, &record)?;
    let summary = record.test_metrics.as_ref().unwrap_or(&record.train_metrics);
    progress(
        g,
        format_args!(
            "final loss {:.4}, accuracy {:.3}, macro AUC {:.3}",
            record.final_loss, summary.accuracy, summary.auc_roc
        ),
    );
    Ok(())
}

pub fn eval(g: &GlobalOpts, data: &Path, model: &Path, out: &Path, no_kg_bias: bool) -> CliResult {
    let mut model = load_model(g, model)?;
    if no_kg_bias {
        model.kg_bias_enabled = false;
    }
    let embedder = model_embedder(g, &model)?;
    let examples = examples_from_dataset(&load_jsonl(data)?, &model.tree, &embedder)?;
    let metrics = evaluate(&model, &examples)?;
    write_json(out, &metrics)?;
    progress(
        g,
        format_args!("accuracy {:.3}, macro AUC {:.3} on {} posts", metrics.accuracy, metrics.auc_roc, metrics.n),
    );
    Ok(())
}

#[derive(Serialize)]
struct FullReport {
    contributions: ContributionReport,
    class_separation: Option<ClassSeparation>,
    distances: DistanceReport,
}

pub fn report(g: &GlobalOpts, data: &Path, model: &Path, out_dir: &Path, epsilon: Option<f64>) -> CliResult {
    let model = load_model(g, model)?;
    let embedder = model_embedder(g, &model)?;
    let examples = examples_from_dataset(&load_jsonl(data)?, &model.tree, &embedder)?;
    let epsilon = match epsilon {
        Some(e) => e,
        None => default_report_epsilon(&model, &examples)?,
    };
    let contributions = contribution_report(&model, &examples)?;
    let distances = distance_report(&model, &examples, &all_pairs(examples.len()), epsilon)?;
    fs::create_dir_all(out_dir)?;

    let mut w = csv::Writer::from_path(out_dir.join("contributions.csv"))?;
    for row in &contributions.layers {
        w.serialize(row)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out_dir.join("distances.csv"))?;
    for row in &distances.pairs {
        w.serialize(row)?;
    }
    w.flush()?;

    let full = FullReport {
        class_separation: class_separation(&model, &examples).ok(),
        contributions,
        distances,
    };
    write_json(&out_dir.join("report.json"), &full)?;
    progress(
        g,
        format_args!("reported {} posts, {} pairs, epsilon {:.4}", examples.len(), full.distances.pairs.len(), epsilon),
    );
    Ok(())
}

pub fn gradcheck(g: &GlobalOpts, posts: usize) -> CliResult {
    if posts == 0 {
        return Err(CliError::Usage("--posts must be positive".into()));
    }
    let tree = load_tree(g)?;
    let d = g.dim.unwrap_or(GRADCHECK_DIM);
    let config = TrainConfig {
        seed: g.seed,
        ..TrainConfig::default()
    };
    let model = init_model(tree.clone(), &Embedder::new(EmbeddingConfig::with_dimension(d))?, &config)?;
    let batch = random_fixture(&tree, d, posts, g.seed);
    let report = finite_diff_check(&model, &batch, &config)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.passed {
        progress(g, format_args!("gradient check passed, max relative error {:.3e}", report.max_rel_error));
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed: max relative error {:.3e} >= {:.1e}",
            report.max_rel_error, report.tolerance
        )))
    }
}
