//! Lower-level objective: the sigmoid penalty, triple sampling, the
//! constraint-satisfaction diagnostic and loss evaluation for both the dense
//! and rank-one parameterizations.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::PropagationView;

/// Exponent clamp for [`penalty_g`].
const EXP_CLAMP: f64 = 700.0;

/// Sigmoid penalty `g(x) = 1 / (1 + exp(-x/b))` and its derivative
/// `g'(x) = g(x)(1 - g(x)) / b`.
///
/// `x/b` is clamped to ±700; past the clamp the derivative is exactly 0.
#[inline]
pub fn penalty_g(x: f64, b: f64) -> (f64, f64) {
    let z = x / b;
    if z.is_nan() {
        return (f64::NAN, f64::NAN);
    }
    if z.abs() >= EXP_CLAMP {
        let e = (-EXP_CLAMP).exp();
        let value = if z > 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
        return (value, 0.0);
    }
    // e = exp(-|z|) never overflows; both branches share it.
    let e = (-z.abs()).exp();
    let value = if z >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    let deriv = e / ((1.0 + e) * (1.0 + e)) / b;
    (value, deriv)
}

/// Lower-level hyperparameters shared by both optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerParams {
    /// Weight of the feature term `tr(Xᵀ Q_s X)` in the dense loss.
    pub epsilon: f64,
    /// Penalty weight.
    pub c: f64,
    /// Sigmoid scale.
    pub b: f64,
    /// Norm weight of the rank-one factors.
    pub beta: f64,
    /// Weight of the rank-one feature term.
    pub gamma: f64,
    /// Step size.
    pub eta: f64,
    /// Iteration cap.
    pub max_iters: usize,
    pub batch_p: usize,
    pub batch_n: usize,
    pub seed: u64,
    /// When set the feature term enters with a negative sign (rewarding
    /// feature-aligned mass instead of penalizing it).
    pub reward_smoothness: bool,
    /// Replace the p-gradient penalty term `(q[b]-q[a])·e_{a_i}` with
    /// `q[a_i]·(e_b - e_a)`, which is not the true derivative.
    pub paper_literal_grad: bool,
    /// Anchors whose penalty gradients are accumulated per step.
    pub anchors_per_step: usize,
    /// Stop when `‖grad‖_F` drops below this.
    pub grad_tol: f64,
    /// Stop when the relative loss change over [`LowerParams::loss_window`]
    /// iterations drops below this.
    pub loss_rel_tol: f64,
    pub loss_window: usize,
    /// Step halvings allowed per iteration when the full step would raise the
    /// loss on the current batch. Zero gives plain fixed-step descent, which
    /// diverges for the rank-one loss at the default step size.
    pub max_backtracks: usize,
}

impl Default for LowerParams {
    fn default() -> Self {
        LowerParams {
            epsilon: 1e-4,
            c: 1.0,
            b: 0.01,
            beta: 1.0,
            gamma: 1e-4,
            eta: 0.01,
            max_iters: 200,
            batch_p: 50,
            batch_n: 50,
            seed: 0,
            reward_smoothness: false,
            paper_literal_grad: false,
            anchors_per_step: 1,
            grad_tol: 1e-6,
            loss_rel_tol: 1e-8,
            loss_window: 10,
            max_backtracks: 20,
        }
    }
}

impl LowerParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("epsilon", self.epsilon),
            ("c", self.c),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("eta", self.eta),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(Error::InvalidParameter(format!("b must be > 0, got {}", self.b)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if self.batch_p == 0 || self.batch_n == 0 || self.anchors_per_step == 0 {
            return Err(Error::InvalidParameter(
                "batch sizes and anchors_per_step must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Signed weight of the dense feature term.
    pub(crate) fn signed_epsilon(&self) -> f64 {
        if self.reward_smoothness {
            -self.epsilon
        } else {
            self.epsilon
        }
    }

    /// Signed weight of the rank-one feature term.
    pub(crate) fn signed_gamma(&self) -> f64 {
        if self.reward_smoothness {
            -self.gamma
        } else {
            self.gamma
        }
    }
}

/// One anchor with same-class and cross-class partners.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleBatch {
    pub anchor: usize,
    pub class: usize,
    pub same_class: Vec<usize>,
    pub cross_class: Vec<usize>,
}

impl TripleBatch {
    pub fn num_pairs(&self) -> usize {
        self.same_class.len() * self.cross_class.len()
    }
}

/// Per-class index of the visible nodes, built once and sampled many times.
#[derive(Debug, Clone)]
pub struct TripleSampler {
    labels: Vec<usize>,
    by_class: Vec<Vec<usize>>,
    anchors: Vec<usize>,
    batch_p: usize,
    batch_n: usize,
}

impl TripleSampler {
    /// Fails unless some class has two visible members and a visible node
    /// lies outside it.
    pub fn new(labels: &[usize], visible: &[usize], batch_p: usize, batch_n: usize) -> Result<Self> {
        if batch_p == 0 || batch_n == 0 {
            return Err(Error::InvalidParameter("batch sizes must be >= 1".into()));
        }
        let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
        let mut by_class = vec![Vec::new(); num_classes];
        let mut seen = vec![false; labels.len()];
        for &v in visible {
            let Some(&y) = labels.get(v) else {
                return Err(Error::InvalidData(format!(
                    "visible id {v} outside [0, {})",
                    labels.len()
                )));
            };
            if !std::mem::replace(&mut seen[v], true) {
                by_class[y].push(v);
            }
        }
        let total: usize = by_class.iter().map(Vec::len).sum();
        let anchors: Vec<usize> = by_class
            .iter()
            .filter(|members| members.len() >= 2 && members.len() < total)
            .flatten()
            .copied()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        if anchors.is_empty() {
            return Err(Error::DegenerateLabels(
                "need a class with >= 2 visible nodes and at least one visible node outside it"
                    .into(),
            ));
        }
        Ok(TripleSampler {
            labels: labels.to_vec(),
            by_class,
            anchors,
            batch_p,
            batch_n,
        })
    }

    /// Visible nodes eligible as anchors.
    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    /// Draws a batch with a uniformly chosen eligible anchor.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TripleBatch {
        let anchor = self.anchors[rng.random_range(0..self.anchors.len())];
        self.sample_for(anchor, rng)
            .expect("eligible anchors always have partners")
    }

    /// Draws a batch around a fixed anchor.
    pub fn sample_for<R: Rng + ?Sized>(&self, anchor: usize, rng: &mut R) -> Result<TripleBatch> {
        let class = *self
            .labels
            .get(anchor)
            .ok_or_else(|| Error::InvalidData(format!("anchor {anchor} out of range")))?;
        let same: Vec<usize> = self.by_class[class]
            .iter()
            .copied()
            .filter(|&v| v != anchor)
            .collect();
        let cross: Vec<usize> = self
            .by_class
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != class)
            .flat_map(|(_, m)| m.iter().copied())
            .collect();
        if same.is_empty() {
            return Err(Error::DegenerateLabels(format!(
                "anchor {anchor} has no other visible node in class {class}"
            )));
        }
        if cross.is_empty() {
            return Err(Error::DegenerateLabels(format!(
                "no visible node outside class {class}"
            )));
        }
        Ok(TripleBatch {
            anchor,
            class,
            same_class: draw(&same, self.batch_p, rng),
            cross_class: draw(&cross, self.batch_n, rng),
        })
    }
}

/// Without replacement when the pool is large enough, with replacement otherwise.
fn draw<R: Rng + ?Sized>(pool: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() >= k {
        index::sample(rng, pool.len(), k)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Samples a single [`TripleBatch`] from the visible nodes.
pub fn sample_triples<R: Rng + ?Sized>(
    labels: &[usize],
    visible: &[usize],
    batch_p: usize,
    batch_n: usize,
    rng: &mut R,
) -> Result<TripleBatch> {
    Ok(TripleSampler::new(labels, visible, batch_p, batch_n)?.sample(rng))
}

/// Fraction of `(a_j, b_j)` pairs with `Q_s(a_i, a_j) > Q_s(a_i, b_j)`.
pub fn constraint_satisfaction<F>(entry: F, batch: &TripleBatch) -> f64
where
    F: Fn(usize, usize) -> f64,
{
    constraint_satisfaction_many(entry, std::slice::from_ref(batch))
}

/// Pooled satisfaction fraction over several batches. Empty input gives 0.
pub fn constraint_satisfaction_many<F>(entry: F, batches: &[TripleBatch]) -> f64
where
    F: Fn(usize, usize) -> f64,
{
    let mut hits = 0usize;
    let mut total = 0usize;
    for batch in batches {
        let a = batch.anchor;
        let cross: Vec<f64> = batch.cross_class.iter().map(|&b| entry(a, b)).collect();
        for &aj in &batch.same_class {
            let same = entry(a, aj);
            hits += cross.iter().filter(|&&v| same > v).count();
        }
        total += batch.num_pairs();
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// `Σ c·g(Q_s(a_i,b_j) - Q_s(a_i,a_j))` over all batch pairs.
pub(crate) fn penalty_sum(view: &PropagationView<'_>, batches: &[TripleBatch], params: &LowerParams) -> f64 {
    penalty_with(|i, j| view.entry(i, j), batches, params)
}

pub(crate) fn penalty_with<F>(entry: F, batches: &[TripleBatch], params: &LowerParams) -> f64
where
    F: Fn(usize, usize) -> f64,
{
    if params.c == 0.0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for batch in batches {
        let a = batch.anchor;
        for &aj in &batch.same_class {
            let same = entry(a, aj);
            for &bj in &batch.cross_class {
                sum += params.c * penalty_g(entry(a, bj) - same, params.b).0;
            }
        }
    }
    sum
}

fn check_dense_shapes(q_s: &DMatrix<f64>, q: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<()> {
    if !q.is_square() || q_s.shape() != q.shape() {
        return Err(Error::dims("lower loss", format!("{:?}", q.shape()), format!("{:?}", q_s.shape())));
    }
    if x.nrows() != q.nrows() {
        return Err(Error::dims("lower loss features", q.nrows(), x.nrows()));
    }
    Ok(())
}

/// `‖Q_s - Q‖_F² + ε·tr(Xᵀ Q_s X) + Σ c·g(·)`.
pub fn lower_loss_dense(
    q_s: &DMatrix<f64>,
    q: &DMatrix<f64>,
    x: &DMatrix<f64>,
    batches: &[TripleBatch],
    params: &LowerParams,
) -> Result<f64> {
    check_dense_shapes(q_s, q, x)?;
    let frob = (q_s - q).norm_squared();
    let smooth = if params.epsilon == 0.0 {
        0.0
    } else {
        let qx = crate::linalg::mul(q_s, x);
        params.signed_epsilon() * x.iter().zip(qx.iter()).map(|(a, b)| a * b).sum::<f64>()
    };
    Ok(frob + smooth + penalty_sum(&PropagationView::Dense(q_s), batches, params))
}

/// Rank-one loss
/// `‖p qᵀ‖_F² + β(‖p‖² + ‖q‖²) + γ·tr(Xᵀ p qᵀ X) + Σ c·g(·)` with
/// `Q_s = Q + p qᵀ` kept implicit.
pub fn lower_loss_lowrank(
    p: &DVector<f64>,
    qv: &DVector<f64>,
    q: &DMatrix<f64>,
    x: &DMatrix<f64>,
    batches: &[TripleBatch],
    params: &LowerParams,
) -> Result<f64> {
    let n = q.nrows();
    if p.len() != n || qv.len() != n {
        return Err(Error::dims("rank-one loss", n, format!("{} / {}", p.len(), qv.len())));
    }
    if x.nrows() != n {
        return Err(Error::dims("rank-one loss features", n, x.nrows()));
    }
    let pp = p.norm_squared();
    let qq = qv.norm_squared();
    let feature = if params.gamma == 0.0 {
        0.0
    } else {
        let xp = x.tr_mul(p);
        let xq = x.tr_mul(qv);
        params.signed_gamma() * xp.dot(&xq)
    };
    let view = PropagationView::RankOne { base: q, p, q: qv };
    Ok(pp * qq + params.beta * (pp + qq) + feature + penalty_sum(&view, batches, params))
}
