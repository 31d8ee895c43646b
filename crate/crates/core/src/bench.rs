//! Per-iteration timing of the two lower-level optimizers on block-model
//! graphs of growing size.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::data::{sbm_generate, SbmConfig};
use crate::dense::DenseOptimizer;
use crate::error::Result;
use crate::lowrank::{init_rank_one, RankOneOptimizer};
use crate::objective::{LowerParams, TripleBatch, TripleSampler};
use crate::pipeline::{compute_q, mean_std, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Dense,
    LowRank,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Dense => "dense",
            BenchMode::LowRank => "lowrank",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub mode: &'static str,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Graph used at size `n`: four blocks, expected degree about 8 inside and 2
/// across, eight-dimensional features, up to 20 training nodes per class.
pub fn bench_graph_config(n: usize, seed: u64) -> SbmConfig {
    let block = (n / 4).max(2) as f64;
    SbmConfig {
        n,
        k: 4,
        p_in: (8.0 / block).min(1.0),
        p_out: (2.0 / (n as f64 - block).max(1.0)).min((8.0 / block).min(1.0)),
        feature_dim: 8,
        seed,
        train_per_class: (n / 20).clamp(2, 20),
        ..SbmConfig::default()
    }
}

/// Times `iters` optimizer steps (after one warm-up step) for each size and
/// mode. Batches are pre-sampled so only the step itself is measured.
pub fn bench_lower(
    sizes: &[usize],
    modes: &[BenchMode],
    iters: usize,
    params: &LowerParams,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    params.validate()?;
    let mut rows = Vec::new();
    for &n in sizes {
        let bundle = sbm_generate(&bench_graph_config(n, seed))?;
        let q = compute_q(&bundle.graph, 0.1)?.matrix;
        let x = bundle.graph.features();
        let sampler = TripleSampler::new(
            bundle.graph.labels(),
            &bundle.splits.visible(),
            params.batch_p,
            params.batch_n,
        )?;
        let mut rng = stream_rng(seed, n as u64);
        let batches: Vec<Vec<TripleBatch>> = (0..=iters)
            .map(|_| (0..params.anchors_per_step).map(|_| sampler.sample(&mut rng)).collect())
            .collect();
        // Never stop early on a tiny gradient: every step must do full work.
        let timed = LowerParams { grad_tol: 0.0, ..params.clone() };
        for &mode in modes {
            let mut times = Vec::with_capacity(iters);
            match mode {
                BenchMode::Dense => {
                    let mut opt = DenseOptimizer::new(&q, x, timed.clone())?;
                    for (i, b) in batches.iter().enumerate() {
                        let start = Instant::now();
                        std::hint::black_box(opt.step(b));
                        if i > 0 {
                            times.push(start.elapsed().as_secs_f64() * 1e3);
                        }
                    }
                }
                BenchMode::LowRank => {
                    let init = init_rank_one(&q, &batches[0][0]);
                    let mut opt = RankOneOptimizer::new(&q, x, init, timed.clone())?;
                    for (i, b) in batches.iter().enumerate() {
                        let start = Instant::now();
                        std::hint::black_box(opt.step(b));
                        if i > 0 {
                            times.push(start.elapsed().as_secs_f64() * 1e3);
                        }
                    }
                }
            }
            let (mean_ms, std_ms) = mean_std(&times);
            rows.push(BenchRow { n, mode: mode.name(), mean_ms, std_ms });
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[BenchRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "n,mode,mean_ms,std_ms")?;
    for r in rows {
        writeln!(out, "{},{},{:.6},{:.6}", r.n, r.mode, r.mean_ms, r.std_ms)?;
    }
    Ok(())
}

/// `t(n_{i+1}) / t(n_i)` for consecutive rows of one mode.
pub fn growth_ratios(rows: &[BenchRow], mode: BenchMode) -> Vec<f64> {
    let times: Vec<f64> = rows.iter().filter(|r| r.mode == mode.name()).map(|r| r.mean_ms).collect();
    times.windows(2).map(|w| w[1] / w[0]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_shape() {
        let params = LowerParams { batch_p: 5, batch_n: 5, ..Default::default() };
        let rows = bench_lower(&[40, 80], &[BenchMode::Dense, BenchMode::LowRank], 3, &params, 0).unwrap();
        assert_eq!(rows.len(), 4);
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "n,mode,mean_ms,std_ms");
        assert_eq!(lines.len(), 5);
        for l in &lines[1..] {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 4);
            f[0].parse::<usize>().unwrap();
            assert!(f[1] == "dense" || f[1] == "lowrank");
            assert!(f[2].parse::<f64>().unwrap() >= 0.0);
        }
        assert_eq!(growth_ratios(&rows, BenchMode::Dense).len(), 1);
    }
}
