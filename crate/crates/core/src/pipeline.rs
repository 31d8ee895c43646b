//! The separated two-level pipeline: compute `Q`, learn `Q_s` with one of the
//! lower-level optimizers, then train and evaluate the classifier with `Q_s`
//! frozen.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::classifier::{evaluate, predict_model, train_upper, ClassifierParams, Mlp};
use crate::data::{DatasetBundle, StoredMatrix};
use crate::dense::optimize_dense;
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, ppr_matrix, Graph, PropagationMatrix, PropagationView};
use crate::history::LowerHistory;
use crate::lowrank::{optimize_lowrank_with_init, RankOnePerturbation};
use crate::objective::{constraint_satisfaction_many, LowerParams, TripleBatch, TripleSampler};

const LOWER_STREAM: u64 = 1;
const UPPER_STREAM: u64 = 2;
const HELDOUT_STREAM: u64 = 3;

/// Independent generator for one consumer of a run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// How the propagation matrix used by the classifier is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// `Q` itself (the unlearned baseline).
    Fixed,
    Dense,
    LowRank,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Method::Fixed),
            "dense" => Ok(Method::Dense),
            "lowrank" => Ok(Method::LowRank),
            other => Err(Error::InvalidParameter(format!(
                "unknown method `{other}` (fixed|dense|lowrank)"
            ))),
        }
    }
}

/// Result of the lower level.
#[derive(Debug, Clone, PartialEq)]
pub enum Learned {
    Fixed,
    Dense(DMatrix<f64>),
    RankOne(RankOnePerturbation),
}

impl Learned {
    pub fn view<'a>(&'a self, q: &'a DMatrix<f64>) -> PropagationView<'a> {
        match self {
            Learned::Fixed => PropagationView::Dense(q),
            Learned::Dense(m) => PropagationView::Dense(m),
            Learned::RankOne(r) => r.view(q),
        }
    }

    pub fn into_stored(self, q: &DMatrix<f64>) -> StoredMatrix {
        match self {
            Learned::Fixed => StoredMatrix::Dense(q.clone()),
            Learned::Dense(m) => StoredMatrix::Dense(m),
            Learned::RankOne(r) => StoredMatrix::RankOne(r),
        }
    }
}

impl From<StoredMatrix> for Learned {
    fn from(m: StoredMatrix) -> Self {
        match m {
            StoredMatrix::Dense(m) => Learned::Dense(m),
            StoredMatrix::RankOne(r) => Learned::RankOne(r),
        }
    }
}

pub fn compute_q(graph: &Graph, alpha: f64) -> Result<PropagationMatrix> {
    ppr_matrix(&normalize_adjacency(graph)?, alpha)
}

/// Runs the selected lower-level optimizer on the visible (train + val) nodes.
pub fn learn(
    method: Method,
    q: &DMatrix<f64>,
    bundle: &DatasetBundle,
    params: &LowerParams,
    seed: u64,
) -> Result<(Learned, Option<LowerHistory>)> {
    let mut rng = stream_rng(seed, LOWER_STREAM);
    let g = &bundle.graph;
    let visible = bundle.splits.visible();
    match method {
        Method::Fixed => Ok((Learned::Fixed, None)),
        Method::Dense => {
            let (m, h) = optimize_dense(q, g.features(), g.labels(), &visible, params, &mut rng)?;
            Ok((Learned::Dense(m), Some(h)))
        }
        Method::LowRank => {
            let (_, r, h) =
                optimize_lowrank_with_init(q, g.features(), g.labels(), &visible, params, &mut rng)?;
            Ok((Learned::RankOne(r), Some(h)))
        }
    }
}

/// Metrics of one trained classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunMetrics {
    pub test_accuracy: f64,
    /// Accuracy on the model-selection set (validation, or training when
    /// there is no validation split).
    pub val_accuracy: f64,
    pub epochs_run: usize,
    pub seed: u64,
}

/// Trains the classifier through `view` and scores it.
pub fn train_and_evaluate(
    view: PropagationView<'_>,
    bundle: &DatasetBundle,
    params: &ClassifierParams,
    seed: u64,
) -> Result<RunMetrics> {
    train_and_evaluate_model(view, bundle, params, seed).map(|(m, _)| m)
}

/// [`train_and_evaluate`] that also returns the selected model.
pub fn train_and_evaluate_model(
    view: PropagationView<'_>,
    bundle: &DatasetBundle,
    params: &ClassifierParams,
    seed: u64,
) -> Result<(RunMetrics, Mlp)> {
    let g = &bundle.graph;
    let s = &bundle.splits;
    if s.test.is_empty() {
        return Err(Error::InvalidParameter("test split is empty".into()));
    }
    let mut rng = stream_rng(seed, UPPER_STREAM);
    let outcome = train_upper(view, g, s, params, &mut rng)?;
    let z = predict_model(view, g, &outcome.model, params.alpha)?.z;
    let select = if s.val.is_empty() { &s.train } else { &s.val };
    let metrics = RunMetrics {
        test_accuracy: evaluate(&z, g.labels(), &s.test)?,
        val_accuracy: evaluate(&z, g.labels(), select)?,
        epochs_run: outcome.epochs_run,
        seed,
    };
    Ok((metrics, outcome.model))
}

/// Lower level followed by the classifier for a single seed.
pub fn run_method(
    method: Method,
    q: &DMatrix<f64>,
    bundle: &DatasetBundle,
    lower: &LowerParams,
    classifier: &ClassifierParams,
    seed: u64,
) -> Result<RunMetrics> {
    let (learned, _) = learn(method, q, bundle, lower, seed)?;
    train_and_evaluate(learned.view(q), bundle, classifier, seed)
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub runs: Vec<RunMetrics>,
    pub test_accuracy_mean: f64,
    pub test_accuracy_std: f64,
    pub val_accuracy_mean: f64,
    pub val_accuracy_std: f64,
}

pub fn summarize(runs: Vec<RunMetrics>) -> SeedSummary {
    let (test_accuracy_mean, test_accuracy_std) =
        mean_std(&runs.iter().map(|r| r.test_accuracy).collect::<Vec<_>>());
    let (val_accuracy_mean, val_accuracy_std) =
        mean_std(&runs.iter().map(|r| r.val_accuracy).collect::<Vec<_>>());
    SeedSummary { runs, test_accuracy_mean, test_accuracy_std, val_accuracy_mean, val_accuracy_std }
}

/// One row of the term ablation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationEntry {
    pub name: &'static str,
    pub beta: f64,
    pub gamma: f64,
    pub c: f64,
    pub test_accuracy_mean: f64,
    pub test_accuracy_std: f64,
    pub test_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub configs: Vec<AblationEntry>,
}

/// Full rank-one pipeline and three variants each with one loss term zeroed:
/// `no_norm` (β = 0), `no_feature` (γ = 0) and `no_penalty` (c = 0).
pub fn ablate(
    q: &DMatrix<f64>,
    bundle: &DatasetBundle,
    lower: &LowerParams,
    classifier: &ClassifierParams,
    seeds: &[u64],
) -> Result<AblationReport> {
    let variants: [(&'static str, LowerParams); 4] = [
        ("full", lower.clone()),
        ("no_norm", LowerParams { beta: 0.0, ..lower.clone() }),
        ("no_feature", LowerParams { gamma: 0.0, ..lower.clone() }),
        ("no_penalty", LowerParams { c: 0.0, ..lower.clone() }),
    ];
    let mut configs = Vec::with_capacity(variants.len());
    for (name, params) in variants {
        let accs = seeds
            .iter()
            .map(|&s| run_method(Method::LowRank, q, bundle, &params, classifier, s).map(|m| m.test_accuracy))
            .collect::<Result<Vec<f64>>>()?;
        let (mean, std) = mean_std(&accs);
        configs.push(AblationEntry {
            name,
            beta: params.beta,
            gamma: params.gamma,
            c: params.c,
            test_accuracy_mean: mean,
            test_accuracy_std: std,
            test_accuracies: accs,
        });
    }
    Ok(AblationReport { seeds: seeds.to_vec(), configs })
}

/// Triples drawn from a stream the optimizers never see.
pub fn heldout_batches(bundle: &DatasetBundle, params: &LowerParams, count: usize, seed: u64) -> Result<Vec<TripleBatch>> {
    let sampler = TripleSampler::new(
        bundle.graph.labels(),
        &bundle.splits.visible(),
        params.batch_p,
        params.batch_n,
    )?;
    let mut rng = stream_rng(seed, HELDOUT_STREAM);
    Ok((0..count).map(|_| sampler.sample(&mut rng)).collect())
}

/// Satisfaction of `Q` and of the learned matrix on the same held-out triples.
pub fn satisfaction_before_after(
    q: &DMatrix<f64>,
    learned: &Learned,
    batches: &[TripleBatch],
) -> (f64, f64) {
    let before = constraint_satisfaction_many(|i, j| q[(i, j)], batches);
    let view = learned.view(q);
    let after = constraint_satisfaction_many(|i, j| view.entry(i, j), batches);
    (before, after)
}
