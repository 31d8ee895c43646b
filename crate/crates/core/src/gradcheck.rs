//! Central finite-difference checks of every analytic gradient in the crate.
//!
//! The error metric is `‖analytic - numeric‖_∞ / ‖numeric‖_∞` per instance,
//! and a component passes when its worst instance is below tolerance.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::classifier::{backward, ce_loss, predict, Mlp};
use crate::dense::lower_gradient_dense;
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, ppr_matrix, Graph, PropagationView};
use crate::lowrank::{evaluate_lowrank, RankOnePerturbation};
use crate::objective::{lower_loss_dense, lower_loss_lowrank, LowerParams, TripleBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Dense,
    LowRank,
    Upper,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Scope::Dense),
            "lowrank" => Ok(Scope::LowRank),
            "upper" => Ok(Scope::Upper),
            other => Err(Error::InvalidParameter(format!(
                "unknown gradcheck scope `{other}` (dense|lowrank|upper)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub max_n: usize,
    pub max_d: usize,
    pub seed: u64,
    pub step: f64,
    pub lower_tol: f64,
    pub upper_tol: f64,
    /// Check the alternative p-gradient penalty term instead of the true one.
    pub paper_literal_grad: bool,
    /// Negate the analytic gradient before comparing (fault injection).
    pub inject_sign_flip: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            instances: 20,
            max_n: 8,
            max_d: 5,
            seed: 0,
            step: 1e-6,
            lower_tol: 1e-5,
            upper_tol: 1e-4,
            paper_literal_grad: false,
            inject_sign_flip: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentReport {
    pub component: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `‖a - b‖_∞ / ‖b‖_∞`, falling back to the absolute error when `b` is ~0.
pub fn relative_max_abs_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = numeric.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` over every coordinate of `x`.
pub fn central_differences(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(x);
            x[i] = orig - h;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// A random lower-level instance built on a real PPR matrix.
pub struct LowerInstance {
    pub q: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub batch: TripleBatch,
    pub params: LowerParams,
}

pub fn random_lower_instance<R: Rng + ?Sized>(rng: &mut R, max_n: usize, max_d: usize) -> LowerInstance {
    let n = rng.random_range(4..=max_n.max(4));
    let d = rng.random_range(1..=max_d.max(1));
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < 0.4 {
                edges.push((u, v));
            }
        }
    }
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let g = Graph::new(n, edges, x.clone(), vec![0; n]).expect("valid random graph");
    let alpha = rng.random_range(0.05..0.9);
    let q = ppr_matrix(&normalize_adjacency(&g).expect("n > 0"), alpha)
        .expect("random PPR solve")
        .matrix;
    // Anchor 0, same-class {1, 2}, cross-class the remaining nodes.
    let batch = TripleBatch {
        anchor: 0,
        class: 0,
        same_class: vec![1, 2],
        cross_class: (3..n).collect(),
    };
    let params = LowerParams {
        epsilon: rng.random_range(0.0..1.0),
        c: rng.random_range(0.5..2.0),
        b: rng.random_range(0.05..0.5),
        beta: rng.random_range(0.0..2.0),
        gamma: rng.random_range(0.0..1.0),
        ..LowerParams::default()
    };
    LowerInstance { q, x, batch, params }
}

fn flip(v: &mut [f64], on: bool) {
    if on {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn check_dense<R: Rng + ?Sized>(rng: &mut R, opts: &GradcheckOptions) -> f64 {
    let inst = random_lower_instance(rng, opts.max_n, opts.max_d);
    let n = inst.q.nrows();
    let q_s = &inst.q + DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.1..0.1));
    let batches = [inst.batch.clone()];
    let mut analytic = lower_gradient_dense(&q_s, &inst.q, &inst.x, &inst.batch, &inst.params)
        .expect("shapes agree")
        .as_slice()
        .to_vec();
    flip(&mut analytic, opts.inject_sign_flip);
    let mut flat = q_s.as_slice().to_vec();
    let numeric = central_differences(&mut flat, opts.step, |v| {
        let m = DMatrix::from_column_slice(n, n, v);
        lower_loss_dense(&m, &inst.q, &inst.x, &batches, &inst.params).expect("shapes agree")
    });
    relative_max_abs_error(&analytic, &numeric)
}

fn check_lowrank<R: Rng + ?Sized>(rng: &mut R, opts: &GradcheckOptions) -> (f64, f64) {
    let mut inst = random_lower_instance(rng, opts.max_n, opts.max_d);
    inst.params.paper_literal_grad = opts.paper_literal_grad;
    let n = inst.q.nrows();
    let r = RankOnePerturbation {
        p: DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5)),
        q: DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5)),
    };
    let batches = [inst.batch.clone()];
    let eval = evaluate_lowrank(&r, &inst.q, &inst.x, &batches, &inst.params).expect("shapes agree");
    let mut gp = eval.grad_p.as_slice().to_vec();
    let mut gq = eval.grad_q.as_slice().to_vec();
    flip(&mut gp, opts.inject_sign_flip);
    flip(&mut gq, opts.inject_sign_flip);

    let mut p = r.p.as_slice().to_vec();
    let num_p = central_differences(&mut p, opts.step, |v| {
        lower_loss_lowrank(&DVector::from_column_slice(v), &r.q, &inst.q, &inst.x, &batches, &inst.params)
            .expect("shapes agree")
    });
    let mut q = r.q.as_slice().to_vec();
    let num_q = central_differences(&mut q, opts.step, |v| {
        lower_loss_lowrank(&r.p, &DVector::from_column_slice(v), &inst.q, &inst.x, &batches, &inst.params)
            .expect("shapes agree")
    });
    (relative_max_abs_error(&gp, &num_p), relative_max_abs_error(&gq, &num_q))
}

/// Random upper-level instance: features, labels, propagation and weights.
pub struct UpperInstance {
    pub x: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub base: DMatrix<f64>,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    pub rank_one: bool,
    pub mlp: Mlp,
    pub lambda: f64,
    pub alpha: f64,
}

impl UpperInstance {
    pub fn view(&self) -> PropagationView<'_> {
        if self.rank_one {
            PropagationView::RankOne { base: &self.base, p: &self.p, q: &self.q }
        } else {
            PropagationView::Dense(&self.base)
        }
    }

    /// The loss through the public full-matrix path.
    pub fn loss(&self, mlp: &Mlp) -> f64 {
        let logits = mlp
            .forward::<ChaCha8Rng>(&self.x, 0.0, None)
            .expect("shapes agree")
            .logits;
        let z = predict(self.view(), &logits, self.alpha).expect("shapes agree").z;
        ce_loss(&z, &self.labels, &self.train, self.lambda, &mlp.w1).expect("nonempty train")
    }
}

pub fn random_upper_instance<R: Rng + ?Sized>(rng: &mut R, max_n: usize, max_d: usize) -> UpperInstance {
    loop {
        let n = rng.random_range(3..=max_n.max(3));
        let d = rng.random_range(1..=max_d.max(1));
        let k = rng.random_range(1..=3);
        let h = rng.random_range(1..=6);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut train: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < 0.6).collect();
        if train.is_empty() {
            train.push(0);
        }
        let base = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..1.0));
        let p = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
        let q = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
        let mut mlp = Mlp::init(d, h, k, rng);
        mlp.b1 = DVector::from_fn(h, |_, _| rng.random_range(-0.3..0.3));
        mlp.b2 = DVector::from_fn(k, |_, _| rng.random_range(-0.3..0.3));
        // Keep every pre-activation away from the rectifier kink.
        let pre = &x * &mlp.w1;
        let kink = pre
            .row_iter()
            .flat_map(|r| r.iter().zip(mlp.b1.iter()).map(|(a, b)| (a + b).abs()).collect::<Vec<_>>())
            .fold(f64::INFINITY, f64::min);
        if kink < 1e-3 {
            continue;
        }
        return UpperInstance {
            x,
            labels,
            train,
            base,
            p,
            q,
            rank_one: rng.random::<bool>(),
            mlp,
            lambda: rng.random_range(0.0..0.1),
            alpha: rng.random_range(0.05..=1.0),
        };
    }
}

fn check_upper<R: Rng + ?Sized>(rng: &mut R, opts: &GradcheckOptions) -> f64 {
    let inst = random_upper_instance(rng, opts.max_n.max(3), opts.max_d);
    let cache = inst.mlp.forward::<ChaCha8Rng>(&inst.x, 0.0, None).expect("shapes agree");
    let (_, grads) = backward(
        inst.view(),
        &inst.x,
        &inst.labels,
        &inst.train,
        &inst.mlp,
        &cache,
        inst.lambda,
        inst.alpha,
    )
    .expect("shapes agree");
    let mut analytic: Vec<f64> = [grads.w1.as_slice(), grads.b1.as_slice(), grads.w2.as_slice(), grads.b2.as_slice()]
        .concat();
    flip(&mut analytic, opts.inject_sign_flip);
    let sizes = [inst.mlp.w1.len(), inst.mlp.b1.len(), inst.mlp.w2.len(), inst.mlp.b2.len()];
    let mut flat: Vec<f64> = [
        inst.mlp.w1.as_slice(),
        inst.mlp.b1.as_slice(),
        inst.mlp.w2.as_slice(),
        inst.mlp.b2.as_slice(),
    ]
    .concat();
    let numeric = central_differences(&mut flat, opts.step, |v| {
        let mut m = inst.mlp.clone();
        let (a, rest) = v.split_at(sizes[0]);
        let (b, rest) = rest.split_at(sizes[1]);
        let (c, e) = rest.split_at(sizes[2]);
        m.w1.as_mut_slice().copy_from_slice(a);
        m.b1.as_mut_slice().copy_from_slice(b);
        m.w2.as_mut_slice().copy_from_slice(c);
        m.b2.as_mut_slice().copy_from_slice(e);
        inst.loss(&m)
    });
    relative_max_abs_error(&analytic, &numeric)
}

/// Runs the finite-difference suites for `scopes`.
pub fn run(scopes: &[Scope], opts: &GradcheckOptions) -> Vec<ComponentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::new();
    let report = |component, errs: &[f64], tol: f64| {
        let max = errs.iter().copied().fold(0.0_f64, |m, e| if e.is_nan() { f64::NAN } else { m.max(e) });
        ComponentReport {
            component,
            instances: errs.len(),
            max_rel_error: max,
            tolerance: tol,
            passed: max < tol,
        }
    };
    for scope in scopes {
        match scope {
            Scope::Dense => {
                let errs: Vec<f64> = (0..opts.instances).map(|_| check_dense(&mut rng, opts)).collect();
                reports.push(report("dense", &errs, opts.lower_tol));
            }
            Scope::LowRank => {
                let (ep, eq): (Vec<f64>, Vec<f64>) =
                    (0..opts.instances).map(|_| check_lowrank(&mut rng, opts)).unzip();
                reports.push(report("lowrank_p", &ep, opts.lower_tol));
                reports.push(report("lowrank_q", &eq, opts.lower_tol));
            }
            Scope::Upper => {
                let errs: Vec<f64> = (0..opts.instances).map(|_| check_upper(&mut rng, opts)).collect();
                reports.push(report("upper", &errs, opts.upper_tol));
            }
        }
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suites_pass() {
        let opts = GradcheckOptions { instances: 5, ..Default::default() };
        for r in run(&[Scope::Dense, Scope::LowRank, Scope::Upper], &opts) {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let opts = GradcheckOptions { instances: 3, inject_sign_flip: true, ..Default::default() };
        for r in run(&[Scope::Dense, Scope::LowRank, Scope::Upper], &opts) {
            assert!(!r.passed, "{r:?}");
        }
    }

    #[test]
    fn literal_p_gradient_disagrees_with_differences() {
        let opts = GradcheckOptions { instances: 5, paper_literal_grad: true, ..Default::default() };
        let reports = run(&[Scope::LowRank], &opts);
        assert!(!reports[0].passed);
        assert!(reports[1].passed);
    }
}
