//! Rank-one approximation `Q_s = Q + p qᵀ` with gradient descent on `p` and
//! `q`. Per-iteration cost is linear in the node count.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::PropagationView;
use crate::history::{IterationRecord, LowerHistory};
use crate::objective::{
    constraint_satisfaction_many, lower_loss_lowrank, penalty_g, LowerParams, TripleBatch, TripleSampler,
};

/// The factors of `Q_s = Q + p qᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOnePerturbation {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

impl RankOnePerturbation {
    pub fn zeros(n: usize) -> Self {
        RankOnePerturbation {
            p: DVector::zeros(n),
            q: DVector::zeros(n),
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn view<'a>(&'a self, base: &'a DMatrix<f64>) -> PropagationView<'a> {
        PropagationView::RankOne {
            base,
            p: &self.p,
            q: &self.q,
        }
    }

    /// `Q + p qᵀ` as a dense matrix.
    pub fn materialize(&self, base: &DMatrix<f64>) -> DMatrix<f64> {
        base + &self.p * self.q.transpose()
    }
}

/// `p[b_j] = Q(a_i,b_j)`, `p[a_j] = -Q(a_i,a_j)`, `p[a_i] = Q(a_i,a_i)`, zero
/// elsewhere; `q = 0`, so `Q + p qᵀ = Q` exactly.
pub fn init_rank_one(q: &DMatrix<f64>, batch: &TripleBatch) -> RankOnePerturbation {
    let n = q.nrows();
    let a = batch.anchor;
    let mut p = DVector::zeros(n);
    for &bj in &batch.cross_class {
        p[bj] = q[(a, bj)];
    }
    for &aj in &batch.same_class {
        p[aj] = -q[(a, aj)];
    }
    p[a] = q[(a, a)];
    RankOnePerturbation {
        p,
        q: DVector::zeros(n),
    }
}

fn check_shapes(
    r: &RankOnePerturbation,
    q: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> Result<()> {
    let n = q.nrows();
    if !q.is_square() || r.p.len() != n || r.q.len() != n || x.nrows() != n {
        return Err(Error::dims(
            "rank-one gradient",
            format!("n = {n}"),
            format!("p {}, q {}, X rows {}", r.p.len(), r.q.len(), x.nrows()),
        ));
    }
    Ok(())
}

/// Loss value and both gradients evaluated from one `(p, q)` snapshot.
#[derive(Debug, Clone)]
pub struct RankOneEval {
    pub loss: f64,
    pub grad_p: DVector<f64>,
    pub grad_q: DVector<f64>,
}

/// Evaluates the rank-one loss and the gradients with respect to `p` and `q`.
///
/// With `d = Q(a,b) - Q(a,a_j) + p[a](q[b] - q[a_j])`:
///
/// * `∂/∂p = 2 p ‖q‖² + 2β p + γ X Xᵀ q + Σ c g'(d) (q[b] - q[a_j]) e_a`
/// * `∂/∂q = 2 q ‖p‖² + 2β q + γ X Xᵀ p + Σ c g'(d) p[a] (e_b - e_{a_j})`
///
/// When `paper_literal_grad` is set, the p-penalty term is replaced by
/// `Σ c g'(d) q[a] (e_b - e_{a_j})`.
pub fn evaluate_lowrank(
    r: &RankOnePerturbation,
    q: &DMatrix<f64>,
    x: &DMatrix<f64>,
    batches: &[TripleBatch],
    params: &LowerParams,
) -> Result<RankOneEval> {
    check_shapes(r, q, x)?;
    let (p, qv) = (&r.p, &r.q);
    let pp = p.norm_squared();
    let qq = qv.norm_squared();
    let gamma = params.signed_gamma();

    let mut grad_p = p * (2.0 * qq + 2.0 * params.beta);
    let mut grad_q = qv * (2.0 * pp + 2.0 * params.beta);
    let mut loss = pp * qq + params.beta * (pp + qq);
    if params.gamma != 0.0 {
        let xp = x.tr_mul(p);
        let xq = x.tr_mul(qv);
        loss += gamma * xp.dot(&xq);
        grad_p.gemv(gamma, x, &xq, 1.0);
        grad_q.gemv(gamma, x, &xp, 1.0);
    }
    if params.c != 0.0 {
        for batch in batches {
            let a = batch.anchor;
            let (pa, qa) = (p[a], qv[a]);
            for &aj in &batch.same_class {
                let same = q[(a, aj)] + pa * qv[aj];
                for &bj in &batch.cross_class {
                    let (g, dg) = penalty_g(q[(a, bj)] + pa * qv[bj] - same, params.b);
                    loss += params.c * g;
                    let w = params.c * dg;
                    if params.paper_literal_grad {
                        grad_p[bj] += w * qa;
                        grad_p[aj] -= w * qa;
                    } else {
                        grad_p[a] += w * (qv[bj] - qv[aj]);
                    }
                    grad_q[bj] += w * pa;
                    grad_q[aj] -= w * pa;
                }
            }
        }
    }
    Ok(RankOneEval { loss, grad_p, grad_q })
}

/// Gradient of the rank-one loss with respect to `p` (q held fixed).
pub fn lower_gradient_p(
    r: &RankOnePerturbation,
    q: &DMatrix<f64>,
    x: &DMatrix<f64>,
    batch: &TripleBatch,
    params: &LowerParams,
) -> Result<DVector<f64>> {
    evaluate_lowrank(r, q, x, std::slice::from_ref(batch), params).map(|e| e.grad_p)
}

/// Gradient of the rank-one loss with respect to `q` (p held fixed).
pub fn lower_gradient_q(
    r: &RankOnePerturbation,
    q: &DMatrix<f64>,
    x: &DMatrix<f64>,
    batch: &TripleBatch,
    params: &LowerParams,
) -> Result<DVector<f64>> {
    evaluate_lowrank(r, q, x, std::slice::from_ref(batch), params).map(|e| e.grad_q)
}

/// Stateful rank-one optimizer.
pub struct RankOneOptimizer<'a> {
    q: &'a DMatrix<f64>,
    x: &'a DMatrix<f64>,
    state: RankOnePerturbation,
    params: LowerParams,
}

impl<'a> RankOneOptimizer<'a> {
    pub fn new(
        q: &'a DMatrix<f64>,
        x: &'a DMatrix<f64>,
        init: RankOnePerturbation,
        params: LowerParams,
    ) -> Result<Self> {
        params.validate()?;
        check_shapes(&init, q, x)?;
        Ok(RankOneOptimizer { q, x, state: init, params })
    }

    pub fn current(&self) -> &RankOnePerturbation {
        &self.state
    }

    pub fn into_perturbation(self) -> RankOnePerturbation {
        self.state
    }

    /// Computes both gradients at the current snapshot, then updates `p`
    /// followed by `q`. Returns the loss and the joint gradient norm.
    /// Backtracking follows [`DenseOptimizer::step`](crate::dense::DenseOptimizer::step).
    pub fn step(&mut self, batches: &[TripleBatch]) -> (f64, f64) {
        let eval = evaluate_lowrank(&self.state, self.q, self.x, batches, &self.params)
            .expect("shapes checked at construction");
        let norm = (eval.grad_p.norm_squared() + eval.grad_q.norm_squared()).sqrt();
        if norm >= self.params.grad_tol || norm.is_nan() {
            let mut eta = self.params.eta;
            let mut halvings = 0;
            while halvings < self.params.max_backtracks {
                let p = &self.state.p - &eval.grad_p * eta;
                let q = &self.state.q - &eval.grad_q * eta;
                let trial = lower_loss_lowrank(&p, &q, self.q, self.x, batches, &self.params)
                    .expect("shapes checked at construction");
                if trial.is_finite() && trial <= eval.loss {
                    break;
                }
                eta *= 0.5;
                halvings += 1;
            }
            if self.params.max_backtracks == 0 || halvings < self.params.max_backtracks {
                self.state.p.axpy(-eta, &eval.grad_p, 1.0);
                self.state.q.axpy(-eta, &eval.grad_q, 1.0);
            }
        }
        (eval.loss, norm)
    }
}

/// Learns `p, q`. The first sampled batch seeds [`init_rank_one`] and is also
/// used by the first iteration; later iterations draw fresh batches.
///
/// Returns the initial and final perturbations with the history.
pub fn optimize_lowrank_with_init<R: Rng + ?Sized>(
    q: &DMatrix<f64>,
    x: &DMatrix<f64>,
    labels: &[usize],
    visible: &[usize],
    params: &LowerParams,
    rng: &mut R,
) -> Result<(RankOnePerturbation, RankOnePerturbation, LowerHistory)> {
    params.validate()?;
    let sampler = TripleSampler::new(labels, visible, params.batch_p, params.batch_n)?;
    let mut batches: Vec<TripleBatch> = (0..params.anchors_per_step)
        .map(|_| sampler.sample(rng))
        .collect();
    let init = init_rank_one(q, &batches[0]);
    let mut opt = RankOneOptimizer::new(q, x, init.clone(), params.clone())?;
    let mut history = LowerHistory::new();
    for iter in 1..=params.max_iters {
        if iter > 1 {
            batches = (0..params.anchors_per_step)
                .map(|_| sampler.sample(rng))
                .collect();
        }
        let start = Instant::now();
        let satisfaction = {
            let view = opt.current().view(q);
            constraint_satisfaction_many(|i, j| view.entry(i, j), &batches)
        };
        let (loss, grad_norm) = opt.step(&batches);
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "rank-one lower loss became {loss} (grad norm {grad_norm}) at iteration {iter}, anchor {}",
                batches[0].anchor
            )));
        }
        let record = IterationRecord {
            iter,
            loss,
            constraint_satisfaction: satisfaction,
            grad_norm,
            wall_ms,
        };
        if history.push_and_check(record, params.grad_tol, params.loss_rel_tol, params.loss_window) {
            break;
        }
    }
    Ok((init, opt.into_perturbation(), history))
}

/// Learns `p, q` and returns the final perturbation with its history.
pub fn optimize_lowrank<R: Rng + ?Sized>(
    q: &DMatrix<f64>,
    x: &DMatrix<f64>,
    labels: &[usize],
    visible: &[usize],
    params: &LowerParams,
    rng: &mut R,
) -> Result<(RankOnePerturbation, LowerHistory)> {
    optimize_lowrank_with_init(q, x, labels, visible, params, rng).map(|(_, r, h)| (r, h))
}
