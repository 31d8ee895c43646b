//! Acceptance suite. Runs every criterion in sequence, prints one
//! `PASS`/`FAIL` line each and exits nonzero if any failed.
//!
//! The gradient and PPR oracles below are written from the defining formulas
//! and share no code with the library beyond its public entry points.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use optprop::bench::{bench_lower, growth_ratios, BenchMode};
use optprop::classifier::{backward, ClassifierParams, Mlp};
use optprop::data::{load_dataset, perturb_edges, sbm_generate, DatasetBundle, DatasetPaths, SbmConfig};
use optprop::dense::{lower_gradient_dense, optimize_dense};
use optprop::graph::{normalize_adjacency, ppr_matrix, Graph, PropagationView};
use optprop::lowrank::{evaluate_lowrank, init_rank_one, optimize_lowrank_with_init, RankOnePerturbation};
use optprop::objective::{sample_triples, LowerParams, TripleBatch};
use optprop::pipeline::{
    compute_q, heldout_batches, learn, mean_std, run_method, satisfaction_before_after, stream_rng, Method,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

// ---------------------------------------------------------------------------
// Oracles

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn oracle_penalty(entry: impl Fn(usize, usize) -> f64, batch: &TripleBatch, c: f64, b: f64) -> f64 {
    let a = batch.anchor;
    let mut s = 0.0;
    for &aj in &batch.same_class {
        for &bj in &batch.cross_class {
            s += c * sigmoid((entry(a, bj) - entry(a, aj)) / b);
        }
    }
    s
}

fn oracle_dense_loss(qs: &DMatrix<f64>, q: &DMatrix<f64>, x: &DMatrix<f64>, batch: &TripleBatch, p: &LowerParams) -> f64 {
    let n = q.nrows();
    let mut fro = 0.0;
    for i in 0..n {
        for j in 0..n {
            fro += (qs[(i, j)] - q[(i, j)]).powi(2);
        }
    }
    let mut smooth = 0.0;
    for k in 0..x.ncols() {
        for i in 0..n {
            for j in 0..n {
                smooth += x[(i, k)] * qs[(i, j)] * x[(j, k)];
            }
        }
    }
    fro + p.epsilon * smooth + oracle_penalty(|i, j| qs[(i, j)], batch, p.c, p.b)
}

fn oracle_rank_one_loss(
    pv: &DVector<f64>,
    qv: &DVector<f64>,
    q: &DMatrix<f64>,
    x: &DMatrix<f64>,
    batch: &TripleBatch,
    p: &LowerParams,
) -> f64 {
    let n = q.nrows();
    let outer = pv * qv.transpose();
    let qs = q + &outer;
    let fro: f64 = outer.iter().map(|v| v * v).sum();
    let mut feat = 0.0;
    for k in 0..x.ncols() {
        for i in 0..n {
            for j in 0..n {
                feat += x[(i, k)] * outer[(i, j)] * x[(j, k)];
            }
        }
    }
    fro + p.beta * (pv.norm_squared() + qv.norm_squared())
        + p.gamma * feat
        + oracle_penalty(|i, j| qs[(i, j)], batch, p.c, p.b)
}

struct UpperCase {
    x: DMatrix<f64>,
    prop: DMatrix<f64>,
    labels: Vec<usize>,
    train: Vec<usize>,
    lambda: f64,
    alpha: f64,
}

fn oracle_upper_loss(case: &UpperCase, w1: &DMatrix<f64>, b1: &DVector<f64>, w2: &DMatrix<f64>, b2: &DVector<f64>) -> f64 {
    let n = case.x.nrows();
    let mut hidden = &case.x * w1;
    for i in 0..n {
        for j in 0..hidden.ncols() {
            hidden[(i, j)] = (hidden[(i, j)] + b1[j]).max(0.0);
        }
    }
    let mut logits = &hidden * w2;
    for i in 0..n {
        for j in 0..logits.ncols() {
            logits[(i, j)] += b2[j];
        }
    }
    let s = (&case.prop * &logits) * case.alpha;
    let mut loss = 0.0;
    for &i in &case.train {
        let row = s.row(i);
        let m = row.max();
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - s[(i, case.labels[i])];
    }
    loss + case.lambda * w1.iter().map(|v| v * v).sum::<f64>()
}

fn central_diff(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let o = x[i];
            x[i] = o + h;
            let up = f(x);
            x[i] = o - h;
            let down = f(x);
            x[i] = o;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a - n‖_∞ / ‖n‖_∞`.
fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = n.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale < 1e-12 { diff } else { diff / scale }
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize, density: f64) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < density {
                edges.push((u, v));
            }
        }
    }
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let labels = (0..n).map(|i| i % 2).collect();
    Graph::new(n, edges, x, labels).unwrap()
}

fn lower_case(rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>, TripleBatch, LowerParams) {
    let n = rng.random_range(4..=8);
    let d = rng.random_range(1..=5);
    let g = random_graph(rng, n, d, 0.4);
    let q = ppr_matrix(&normalize_adjacency(&g).unwrap(), rng.random_range(0.05..0.9))
        .unwrap()
        .matrix;
    let visible: Vec<usize> = (0..n).collect();
    let batch = sample_triples(g.labels(), &visible, 3, 3, rng).unwrap();
    let params = LowerParams {
        epsilon: rng.random_range(0.0..1.0),
        c: rng.random_range(0.5..2.0),
        b: 10f64.powf(rng.random_range(-2.0..-0.3)),
        beta: rng.random_range(0.0..2.0),
        gamma: rng.random_range(0.0..1.0),
        ..LowerParams::default()
    };
    (q, g.features().clone(), batch, params)
}

// ---------------------------------------------------------------------------
// Criteria

fn gradient_oracles() -> Outcome {
    const INSTANCES: usize = 20;
    const H: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut dense, mut gp, mut gq, mut upper) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);

    for _ in 0..INSTANCES {
        let (q, x, batch, params) = lower_case(&mut rng);
        let n = q.nrows();
        let qs = &q + DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.1..0.1));
        let analytic = lower_gradient_dense(&qs, &q, &x, &batch, &params).unwrap();
        let mut flat = qs.as_slice().to_vec();
        let numeric = central_diff(&mut flat, H, |v| {
            oracle_dense_loss(&DMatrix::from_column_slice(n, n, v), &q, &x, &batch, &params)
        });
        dense = dense.max(rel_err(analytic.as_slice(), &numeric));
    }

    for _ in 0..INSTANCES {
        let (q, x, batch, params) = lower_case(&mut rng);
        let n = q.nrows();
        let r = RankOnePerturbation {
            p: DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5)),
            q: DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5)),
        };
        let eval = evaluate_lowrank(&r, &q, &x, std::slice::from_ref(&batch), &params).unwrap();
        let mut p = r.p.as_slice().to_vec();
        let np = central_diff(&mut p, H, |v| {
            oracle_rank_one_loss(&DVector::from_column_slice(v), &r.q, &q, &x, &batch, &params)
        });
        let mut qq = r.q.as_slice().to_vec();
        let nq = central_diff(&mut qq, H, |v| {
            oracle_rank_one_loss(&r.p, &DVector::from_column_slice(v), &q, &x, &batch, &params)
        });
        gp = gp.max(rel_err(eval.grad_p.as_slice(), &np));
        gq = gq.max(rel_err(eval.grad_q.as_slice(), &nq));
    }

    let mut done = 0;
    while done < INSTANCES {
        let n = rng.random_range(3..=8);
        let d = rng.random_range(1..=5);
        let h = rng.random_range(2..=6);
        let k = rng.random_range(2..=3);
        let mut mlp = Mlp::init(d, h, k, &mut rng);
        mlp.b1 = DVector::from_fn(h, |_, _| rng.random_range(-0.3..0.3));
        mlp.b2 = DVector::from_fn(k, |_, _| rng.random_range(-0.3..0.3));
        let case = UpperCase {
            x: DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0)),
            prop: DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..1.0)),
            labels: (0..n).map(|_| rng.random_range(0..k)).collect(),
            train: (0..n).filter(|i| i % 3 != 2).collect(),
            lambda: rng.random_range(0.0..0.05),
            alpha: rng.random_range(0.05..=1.0),
        };
        let pre = &case.x * &mlp.w1;
        let near_kink = (0..n).any(|i| (0..h).any(|j| (pre[(i, j)] + mlp.b1[j]).abs() < 1e-3));
        if near_kink {
            continue;
        }
        done += 1;
        let cache = mlp.forward::<ChaCha8Rng>(&case.x, 0.0, None).unwrap();
        let (_, g) = backward(
            PropagationView::Dense(&case.prop),
            &case.x,
            &case.labels,
            &case.train,
            &mlp,
            &cache,
            case.lambda,
            case.alpha,
        )
        .unwrap();
        let analytic = [g.w1.as_slice(), g.b1.as_slice(), g.w2.as_slice(), g.b2.as_slice()].concat();
        let mut flat = [mlp.w1.as_slice(), mlp.b1.as_slice(), mlp.w2.as_slice(), mlp.b2.as_slice()].concat();
        let (s1, s2, s3) = (d * h, d * h + h, d * h + h + h * k);
        let numeric = central_diff(&mut flat, H, |v| {
            oracle_upper_loss(
                &case,
                &DMatrix::from_column_slice(d, h, &v[..s1]),
                &DVector::from_column_slice(&v[s1..s2]),
                &DMatrix::from_column_slice(h, k, &v[s2..s3]),
                &DVector::from_column_slice(&v[s3..]),
            )
        });
        upper = upper.max(rel_err(&analytic, &numeric));
    }

    let passed = dense < 1e-5 && gp < 1e-5 && gq < 1e-5 && upper < 1e-4;
    outcome(
        passed,
        format!("max rel err dense {dense:.2e}, p {gp:.2e}, q {gq:.2e}, upper {upper:.2e} over {INSTANCES} instances each"),
    )
}

fn ppr_equivalence() -> Outcome {
    let mut worst = 0.0_f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=50);
        let density = rng.random_range(0.02..0.3);
        let g = random_graph(&mut rng, n, 1, density);
        let alpha = rng.random_range(0.1..0.9);
        let deg: Vec<f64> = (0..n)
            .map(|i| g.edges().iter().filter(|&&(u, v)| u == i || v == i).count() as f64)
            .collect();
        let mut a_hat = DMatrix::zeros(n, n);
        for &(u, v) in g.edges() {
            let w = 1.0 / (deg[u] * deg[v]).sqrt();
            a_hat[(u, v)] = w;
            a_hat[(v, u)] = w;
        }
        let step = a_hat * (1.0 - alpha);
        let mut term = DMatrix::<f64>::identity(n, n);
        let mut series = term.clone();
        for _ in 1..1000 {
            term = &step * &term;
            series += &term;
        }
        let q = ppr_matrix(&normalize_adjacency(&g).unwrap(), alpha).unwrap().matrix;
        worst = worst.max((q - series).abs().max());
    }
    outcome(worst < 1e-8, format!("max |Q - series| = {worst:.2e} over 20 graphs"))
}

fn stationarity() -> Outcome {
    let b = sbm_generate(&SbmConfig { n: 60, k: 3, p_in: 0.2, p_out: 0.03, feature_dim: 3, train_per_class: 5, ..Default::default() })
        .unwrap();
    let q = compute_q(&b.graph, 0.1).unwrap().matrix;
    let g = &b.graph;
    let visible = b.splits.visible();
    let mut ok = true;
    for t in [1, 7, 200] {
        let params = LowerParams { epsilon: 0.0, c: 0.0, max_iters: t, ..Default::default() };
        let (qs, _) = optimize_dense(&q, g.features(), g.labels(), &visible, &params, &mut ChaCha8Rng::seed_from_u64(t as u64)).unwrap();
        ok &= qs.as_slice().iter().zip(q.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());

        let params = LowerParams { eta: 0.0, max_iters: t, ..Default::default() };
        let (init, fin, _) =
            optimize_lowrank_with_init(&q, g.features(), g.labels(), &visible, &params, &mut ChaCha8Rng::seed_from_u64(t as u64))
                .unwrap();
        ok &= init == fin;
        let m = init.materialize(&q);
        ok &= m.as_slice().iter().zip(q.as_slice()).all(|(a, b)| a == b);
    }
    let batch = sample_triples(g.labels(), &visible, 50, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    ok &= init_rank_one(&q, &batch).materialize(&q) == q;
    outcome(ok, "dense eps=c=0 and rank-one eta=0 leave Q unchanged for T in {1, 7, 200}".into())
}

fn experiment(seed: u64, rate: f64) -> DatasetBundle {
    let base = sbm_generate(&SbmConfig { seed, ..SbmConfig::default() }).unwrap();
    let graph = perturb_edges(&base.graph, rate, &mut stream_rng(seed, 100)).unwrap();
    DatasetBundle { graph, splits: base.splits }
}

fn constraint_improvement() -> Outcome {
    let params = LowerParams::default();
    let mut detail = Vec::new();
    let mut ok = true;
    for method in [Method::Dense, Method::LowRank] {
        let mut wins = 0;
        let mut pairs = Vec::new();
        for seed in 0..5 {
            let b = experiment(seed, 0.1);
            let q = compute_q(&b.graph, 0.1).unwrap().matrix;
            let held = heldout_batches(&b, &params, 50, seed).unwrap();
            let (learned, _) = learn(method, &q, &b, &params, seed).unwrap();
            let (before, after) = satisfaction_before_after(&q, &learned, &held);
            if after >= before {
                wins += 1;
            }
            pairs.push(format!("{before:.3}->{after:.3}"));
        }
        ok &= wins >= 4;
        detail.push(format!("{method:?} {wins}/5 [{}]", pairs.join(" ")));
    }
    outcome(ok, detail.join("; "))
}

fn end_to_end() -> Outcome {
    let lower = LowerParams::default();
    let classifier = ClassifierParams::default();
    let mut detail = Vec::new();
    let mut ok = true;
    for (rate, margin) in [(0.1, 0.01), (0.2, 0.0)] {
        let acc = |method| -> Vec<f64> {
            (0..5)
                .map(|seed| {
                    let b = experiment(seed, rate);
                    let q = compute_q(&b.graph, classifier.alpha).unwrap().matrix;
                    run_method(method, &q, &b, &lower, &classifier, seed).unwrap().test_accuracy
                })
                .collect()
        };
        let (fixed, _) = mean_std(&acc(Method::Fixed));
        let (dense, _) = mean_std(&acc(Method::Dense));
        let (lowrank, _) = mean_std(&acc(Method::LowRank));
        ok &= dense >= fixed - margin && lowrank >= fixed - margin;
        detail.push(format!(
            "{:.0}% perturbation: fixed {:.2}, dense {:.2}, lowrank {:.2}",
            rate * 100.0,
            fixed * 100.0,
            dense * 100.0,
            lowrank * 100.0
        ));
    }
    outcome(ok, detail.join("; "))
}

fn complexity() -> Outcome {
    let rows = bench_lower(&[500, 1000, 2000], &[BenchMode::Dense, BenchMode::LowRank], 10, &LowerParams::default(), 0).unwrap();
    let dense = growth_ratios(&rows, BenchMode::Dense);
    let low = growth_ratios(&rows, BenchMode::LowRank);
    let ok = dense.iter().all(|&r| r >= 3.0) && low.iter().all(|&r| r <= 2.6);
    let ms: Vec<String> = rows.iter().map(|r| format!("{} n={} {:.3}ms", r.mode, r.n, r.mean_ms)).collect();
    outcome(ok, format!("dense ratios {dense:.2?}, lowrank ratios {low:.2?} ({})", ms.join(", ")))
}

/// Runs only when `OPTPROP_CORA_DIR` points at a directory in the documented
/// text formats.
fn cora() -> Option<Outcome> {
    let dir = std::env::var_os("OPTPROP_CORA_DIR")?;
    let b = match load_dataset(&DatasetPaths::in_dir(dir)) {
        Ok(b) => b,
        Err(e) => return Some(outcome(false, format!("could not load dataset: {e}"))),
    };
    let classifier = ClassifierParams::default();
    let lower = LowerParams::default();
    let q = compute_q(&b.graph, classifier.alpha).unwrap().matrix;
    let runs = |m| -> f64 {
        let accs: Vec<f64> = (0..5).map(|s| run_method(m, &q, &b, &lower, &classifier, s).unwrap().test_accuracy).collect();
        mean_std(&accs).0 * 100.0
    };
    let fixed = runs(Method::Fixed);
    let dense = runs(Method::Dense);
    Some(outcome(
        (fixed - 83.3).abs() <= 2.0 && dense >= fixed - 0.5,
        format!("fixed {fixed:.2}, dense {dense:.2}"),
    ))
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--nocapture`; ignore them,
    // but honor a listing request so test discovery stays quiet.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [(&str, Duration, fn() -> Outcome); 6] = [
        ("gradient oracles", Duration::from_secs(30), gradient_oracles),
        ("ppr equivalence", Duration::from_secs(10), ppr_equivalence),
        ("stationarity identity", Duration::from_secs(60), stationarity),
        ("constraint improvement", Duration::from_secs(180), constraint_improvement),
        ("end-to-end uplift", Duration::from_secs(600), end_to_end),
        ("complexity signature", Duration::from_secs(300), complexity),
    ];
    let mut failed = 0;
    for (name, budget, run) in criteria {
        let start = Instant::now();
        let o = run();
        let took = start.elapsed();
        let passed = o.passed && took <= budget;
        failed += usize::from(!passed);
        println!(
            "{} {name}: {} ({:.1}s, budget {}s)",
            if passed { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    match cora() {
        Some(o) => {
            failed += usize::from(!o.passed);
            println!("{} cora (optional): {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        }
        None => println!("SKIP cora (optional): OPTPROP_CORA_DIR not set"),
    }
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
