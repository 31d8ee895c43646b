//! Full-matrix gradient descent on the learned propagation matrix.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::PropagationView;
use crate::history::{IterationRecord, LowerHistory};
use crate::objective::{
    constraint_satisfaction_many, penalty_g, penalty_with, LowerParams, TripleBatch, TripleSampler,
};

/// Gradient of the dense lower loss for one batch:
/// `2(Q_s - Q) + ε X Xᵀ + Σ c g'(d) e_{a_i} (e_{b_j} - e_{a_j})ᵀ`.
pub fn lower_gradient_dense(
    q_s: &DMatrix<f64>,
    q: &DMatrix<f64>,
    x: &DMatrix<f64>,
    batch: &TripleBatch,
    params: &LowerParams,
) -> Result<DMatrix<f64>> {
    if !q.is_square() || q_s.shape() != q.shape() || x.nrows() != q.nrows() {
        return Err(Error::dims(
            "dense gradient",
            format!("{:?} with {} feature rows", q.shape(), q.nrows()),
            format!("{:?} with {} feature rows", q_s.shape(), x.nrows()),
        ));
    }
    let mut grad = (q_s - q) * 2.0;
    if params.epsilon != 0.0 {
        grad += (x * x.transpose()) * params.signed_epsilon();
    }
    add_penalty_gradient(&mut grad, q_s, std::slice::from_ref(batch), params);
    Ok(grad)
}

/// Adds the penalty gradient, which only touches row `a_i`, and returns the
/// penalty value.
fn add_penalty_gradient(
    grad: &mut DMatrix<f64>,
    q_s: &DMatrix<f64>,
    batches: &[TripleBatch],
    params: &LowerParams,
) -> f64 {
    if params.c == 0.0 {
        return 0.0;
    }
    let mut value = 0.0;
    for batch in batches {
        let a = batch.anchor;
        for &aj in &batch.same_class {
            let same = q_s[(a, aj)];
            for &bj in &batch.cross_class {
                let (g, dg) = penalty_g(q_s[(a, bj)] - same, params.b);
                value += params.c * g;
                let w = params.c * dg;
                grad[(a, bj)] += w;
                grad[(a, aj)] -= w;
            }
        }
    }
    value
}

/// Stateful dense optimizer. Holds `Q_s` and a reusable gradient buffer.
pub struct DenseOptimizer<'a> {
    q: &'a DMatrix<f64>,
    xxt: Option<DMatrix<f64>>,
    q_s: DMatrix<f64>,
    grad: DMatrix<f64>,
    params: LowerParams,
}

/// Loss and gradient norm observed by one [`DenseOptimizer::step`].
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

impl<'a> DenseOptimizer<'a> {
    pub fn new(q: &'a DMatrix<f64>, x: &DMatrix<f64>, params: LowerParams) -> Result<Self> {
        params.validate()?;
        if !q.is_square() || x.nrows() != q.nrows() {
            return Err(Error::dims("dense optimizer", q.nrows(), x.nrows()));
        }
        // ε·XXᵀ is constant across iterations.
        let xxt = (params.epsilon != 0.0).then(|| x * x.transpose());
        Ok(DenseOptimizer {
            q,
            xxt,
            q_s: q.clone(),
            grad: DMatrix::zeros(q.nrows(), q.ncols()),
            params,
        })
    }

    pub fn current(&self) -> &DMatrix<f64> {
        &self.q_s
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.q_s
    }

    /// Evaluates loss and gradient at the current `Q_s`, then applies
    /// `Q_s ← Q_s - η·grad` unless the gradient norm is below tolerance.
    ///
    /// With `max_backtracks > 0` the step is halved until the loss on the same
    /// batches does not increase; if every halving fails no step is taken.
    pub fn step(&mut self, batches: &[TripleBatch]) -> StepStats {
        let n = self.q.nrows().max(1);
        let eps = self.params.signed_epsilon();
        let xxt = self.xxt.as_ref();

        // grad = 2(Q_s - Q) + ε XXᵀ, with per-column loss partials.
        let partials: Vec<(f64, f64)> = self
            .grad
            .as_mut_slice()
            .par_chunks_mut(n)
            .zip(self.q_s.as_slice().par_chunks(n))
            .zip(self.q.as_slice().par_chunks(n))
            .enumerate()
            .map(|(col, ((g, qs), q0))| {
                let mut frob = 0.0;
                let mut smooth = 0.0;
                match xxt {
                    Some(m) => {
                        let k = &m.as_slice()[col * n..(col + 1) * n];
                        for i in 0..g.len() {
                            let d = qs[i] - q0[i];
                            frob += d * d;
                            smooth += qs[i] * k[i];
                            g[i] = 2.0 * d + eps * k[i];
                        }
                    }
                    None => {
                        for i in 0..g.len() {
                            let d = qs[i] - q0[i];
                            frob += d * d;
                            g[i] = 2.0 * d;
                        }
                    }
                }
                (frob, smooth)
            })
            .collect();
        let (frob, smooth) = partials
            .iter()
            .fold((0.0, 0.0), |(f, s), &(a, b)| (f + a, s + b));
        let penalty = add_penalty_gradient(&mut self.grad, &self.q_s, batches, &self.params);
        let loss = frob + eps * smooth + penalty;

        // Reductions for evaluating the loss along -grad in closed form.
        let reductions: Vec<(f64, f64, f64)> = self
            .grad
            .as_slice()
            .par_chunks(n)
            .zip(self.q_s.as_slice().par_chunks(n))
            .zip(self.q.as_slice().par_chunks(n))
            .enumerate()
            .map(|(col, ((g, qs), q0))| {
                let mut gg = 0.0;
                let mut dg = 0.0;
                let mut kg = 0.0;
                for i in 0..g.len() {
                    gg += g[i] * g[i];
                    dg += (qs[i] - q0[i]) * g[i];
                    if let Some(m) = xxt {
                        kg += m.as_slice()[col * n + i] * g[i];
                    }
                }
                (gg, dg, kg)
            })
            .collect();
        let (gg, dg, kg) = reductions
            .iter()
            .fold((0.0, 0.0, 0.0), |(a, b, c), &(x, y, z)| (a + x, b + y, c + z));
        let grad_norm = gg.sqrt();

        if grad_norm >= self.params.grad_tol || grad_norm.is_nan() {
            let mut eta = self.params.eta;
            let mut halvings = 0;
            while halvings < self.params.max_backtracks {
                let (q_s, grad) = (&self.q_s, &self.grad);
                let trial = frob - 2.0 * eta * dg + eta * eta * gg + eps * (smooth - eta * kg)
                    + penalty_with(|i, j| q_s[(i, j)] - eta * grad[(i, j)], batches, &self.params);
                if trial.is_finite() && trial <= loss {
                    break;
                }
                eta *= 0.5;
                halvings += 1;
            }
            if self.params.max_backtracks == 0 || halvings < self.params.max_backtracks {
                self.q_s
                    .as_mut_slice()
                    .par_chunks_mut(n)
                    .zip(self.grad.as_slice().par_chunks(n))
                    .for_each(|(qs, g)| {
                        for (v, d) in qs.iter_mut().zip(g) {
                            *v -= eta * d;
                        }
                    });
            }
        }
        StepStats { loss, grad_norm }
    }
}

/// Learns a dense `Q_s` starting from `Q`.
///
/// Each iteration draws `anchors_per_step` fresh batches from the visible
/// nodes, evaluates the loss and gradient and takes one descent step.
pub fn optimize_dense<R: Rng + ?Sized>(
    q: &DMatrix<f64>,
    x: &DMatrix<f64>,
    labels: &[usize],
    visible: &[usize],
    params: &LowerParams,
    rng: &mut R,
) -> Result<(DMatrix<f64>, LowerHistory)> {
    let sampler = TripleSampler::new(labels, visible, params.batch_p, params.batch_n)?;
    let mut opt = DenseOptimizer::new(q, x, params.clone())?;
    let mut history = LowerHistory::new();
    for iter in 1..=params.max_iters {
        let batches: Vec<TripleBatch> = (0..params.anchors_per_step)
            .map(|_| sampler.sample(rng))
            .collect();
        let start = Instant::now();
        let satisfaction =
            constraint_satisfaction_many(|i, j| opt.current()[(i, j)], &batches);
        let stats = opt.step(&batches);
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        if !stats.loss.is_finite() || !stats.grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "dense lower loss became {} (grad norm {}) at iteration {iter}, anchor {}",
                stats.loss, stats.grad_norm, batches[0].anchor
            )));
        }
        let record = IterationRecord {
            iter,
            loss: stats.loss,
            constraint_satisfaction: satisfaction,
            grad_norm: stats.grad_norm,
            wall_ms,
        };
        if history.push_and_check(record, params.grad_tol, params.loss_rel_tol, params.loss_window) {
            break;
        }
    }
    Ok((opt.into_matrix(), history))
}

/// Convenience: satisfaction of a dense matrix on fixed batches.
pub fn dense_satisfaction(q_s: &DMatrix<f64>, batches: &[TripleBatch]) -> f64 {
    let view = PropagationView::Dense(q_s);
    constraint_satisfaction_many(|i, j| view.entry(i, j), batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::lower_loss_dense;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..0.3));
        let q_s = &q + DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.05..0.05));
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        (q, q_s, x)
    }

    #[test]
    fn stationary_at_init() {
        let (q, _, x) = setup(5, 2, 1);
        let batch = TripleBatch { anchor: 0, class: 0, same_class: vec![1, 2], cross_class: vec![3, 4] };
        let params = LowerParams { epsilon: 0.0, c: 0.0, ..LowerParams::default() };
        let g = lower_gradient_dense(&q, &q, &x, &batch, &params).unwrap();
        assert_eq!(g, DMatrix::zeros(5, 5));
    }

    #[test]
    fn closed_form_without_penalty() {
        let (q, q_s, x) = setup(5, 3, 2);
        let batch = TripleBatch { anchor: 0, class: 0, same_class: vec![1], cross_class: vec![3] };
        let params = LowerParams { epsilon: 1.0, c: 0.0, ..LowerParams::default() };
        let g = lower_gradient_dense(&q_s, &q, &x, &batch, &params).unwrap();
        let expect = (&q_s - &q) * 2.0 + &x * x.transpose();
        assert!(crate::linalg::max_abs_diff(&g, &expect) < 1e-14);
    }

    #[test]
    fn penalty_only_touches_anchor_row() {
        let (q, q_s, x) = setup(6, 2, 3);
        let batch = TripleBatch { anchor: 2, class: 0, same_class: vec![0, 1], cross_class: vec![4, 5] };
        let with = LowerParams { epsilon: 0.3, c: 1.0, b: 0.1, ..LowerParams::default() };
        let without = LowerParams { c: 0.0, ..with.clone() };
        let diff = lower_gradient_dense(&q_s, &q, &x, &batch, &with).unwrap()
            - lower_gradient_dense(&q_s, &q, &x, &batch, &without).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if i != 2 || !(j < 2 || j >= 4) {
                    assert_eq!(diff[(i, j)], 0.0, "entry ({i},{j})");
                }
            }
        }
        assert!(diff.row(2).amax() > 0.0);
    }

    #[test]
    fn step_loss_matches_objective() {
        let (q, q_s, x) = setup(6, 3, 4);
        let batch = TripleBatch { anchor: 1, class: 0, same_class: vec![0, 3], cross_class: vec![2, 4, 5] };
        let params = LowerParams { epsilon: 0.2, b: 0.05, ..LowerParams::default() };
        let mut opt = DenseOptimizer::new(&q, &x, params.clone()).unwrap();
        opt.q_s = q_s.clone();
        let stats = opt.step(std::slice::from_ref(&batch));
        let expect = lower_loss_dense(&q_s, &q, &x, std::slice::from_ref(&batch), &params).unwrap();
        assert!((stats.loss - expect).abs() < 1e-10 * expect.abs().max(1.0));
        let g = lower_gradient_dense(&q_s, &q, &x, &batch, &params).unwrap();
        assert!((stats.grad_norm - g.norm()).abs() < 1e-10);
        let stepped = &q_s - g * params.eta;
        assert!(crate::linalg::max_abs_diff(opt.current(), &stepped) < 1e-14);
    }

    #[test]
    fn identity_when_terms_off_or_eta_zero() {
        let (q, _, x) = setup(8, 2, 5);
        let labels = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let visible: Vec<usize> = (0..8).collect();
        let off = LowerParams { epsilon: 0.0, c: 0.0, max_iters: 7, batch_p: 2, batch_n: 2, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (q_s, _) = optimize_dense(&q, &x, &labels, &visible, &off, &mut rng).unwrap();
        assert_eq!(q_s, q);
        let frozen = LowerParams { eta: 0.0, max_iters: 5, batch_p: 2, batch_n: 2, ..Default::default() };
        let (q_s, hist) = optimize_dense(&q, &x, &labels, &visible, &frozen, &mut rng).unwrap();
        assert_eq!(q_s, q);
        assert!(hist.records.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn fixed_seed_reproducible() {
        let (q, _, x) = setup(10, 2, 6);
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let visible: Vec<usize> = (0..10).collect();
        let params = LowerParams { max_iters: 20, batch_p: 3, batch_n: 3, ..Default::default() };
        let a = optimize_dense(&q, &x, &labels, &visible, &params, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = optimize_dense(&q, &x, &labels, &visible, &params, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.records.len(), b.1.records.len());
        for (x, y) in a.1.records.iter().zip(&b.1.records) {
            assert_eq!((x.loss, x.grad_norm), (y.loss, y.grad_norm));
        }
    }
}
