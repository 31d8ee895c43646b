use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use optprop::bench::{bench_lower, write_csv, BenchMode};
use optprop::classifier::ClassifierParams;
use optprop::config::{entries_to_args, load_config};
use optprop::data::{
    load_dataset, load_matrix, perturb_edges, save_dataset, save_matrix, sbm_generate, DatasetBundle,
    DatasetPaths, SbmConfig, StoredMatrix,
};
use optprop::error::{Error, Result};
use optprop::gradcheck::{self, GradcheckOptions, Scope};
use optprop::graph::{normalize_adjacency, ppr_matrix_with_residual};
use optprop::objective::LowerParams;
use optprop::pipeline::{ablate, compute_q, learn, stream_rng, summarize, train_and_evaluate_model, Learned, Method};

/// Learned personalized-PageRank propagation for node classification.
#[derive(Parser)]
#[command(name = "optprop", version, args_override_self = true)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for matrix kernels.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// `key = value` file whose entries act as flags; command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a block-model dataset directory.
    GenSbm(GenSbmArgs),
    /// Add random, mostly cross-class, edges to a dataset.
    Perturb(PerturbArgs),
    /// Compute and save Q = (I - (1-α)Ã)^{-1}.
    Ppr(PprArgs),
    /// Learn Q_s with the dense or rank-one optimizer.
    Lower(LowerArgs),
    /// Train and evaluate the classifier on a fixed or learned propagation.
    Train(TrainArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Time lower-level iterations at several graph sizes.
    Bench(BenchArgs),
    /// Rank-one pipeline with each loss term removed in turn.
    Ablate(AblateArgs),
}

#[derive(Args)]
#[command(args_override_self = true)]
struct GenSbmArgs {
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 0.08)]
    p_in: f64,
    #[arg(long, default_value_t = 0.02)]
    p_out: f64,
    #[arg(long, default_value_t = 4)]
    feature_dim: usize,
    /// Standard deviation of the Gaussian feature noise.
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 20)]
    train_per_class: usize,
    #[arg(long, default_value_t = 0.3)]
    val_fraction: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct PerturbArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Added edges as a fraction of the existing edge count.
    #[arg(long)]
    rate: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct PprArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum LowerMode {
    Dense,
    Lowrank,
}

#[derive(Args)]
struct LowerFlags {
    /// Weight of the dense feature term.
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    /// Penalty weight.
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    /// Sigmoid scale.
    #[arg(long, default_value_t = 0.01)]
    b: f64,
    /// Rank-one norm weight.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Rank-one feature weight.
    #[arg(long, default_value_t = 1e-4)]
    gamma: f64,
    /// Step size.
    #[arg(long, default_value_t = 0.01)]
    eta: f64,
    /// Iteration cap.
    #[arg(long, default_value_t = 200)]
    iters: usize,
    /// Same-class partners per anchor.
    #[arg(long, default_value_t = 50)]
    batch_p: usize,
    /// Cross-class partners per anchor.
    #[arg(long, default_value_t = 50)]
    batch_n: usize,
    #[arg(long, default_value_t = 1)]
    anchors_per_step: usize,
    #[arg(long, default_value_t = 1e-6)]
    grad_tol: f64,
    #[arg(long, default_value_t = 1e-8)]
    loss_rel_tol: f64,
    #[arg(long, default_value_t = 10)]
    loss_window: usize,
    /// Step halvings per iteration; 0 gives plain fixed-step descent.
    #[arg(long, default_value_t = 20)]
    max_backtracks: usize,
    /// Flip the sign of the feature term.
    #[arg(long)]
    reward_smoothness: bool,
    /// Use the alternative p-gradient penalty term `q[a_i]·(e_b - e_a)`.
    #[arg(long)]
    paper_literal_grad: bool,
}

impl LowerFlags {
    fn params(&self, seed: u64) -> LowerParams {
        LowerParams {
            epsilon: self.epsilon,
            c: self.c,
            b: self.b,
            beta: self.beta,
            gamma: self.gamma,
            eta: self.eta,
            max_iters: self.iters,
            batch_p: self.batch_p,
            batch_n: self.batch_n,
            seed,
            reward_smoothness: self.reward_smoothness,
            paper_literal_grad: self.paper_literal_grad,
            anchors_per_step: self.anchors_per_step,
            grad_tol: self.grad_tol,
            loss_rel_tol: self.loss_rel_tol,
            loss_window: self.loss_window,
            max_backtracks: self.max_backtracks,
        }
    }
}

#[derive(Args)]
struct ClassifierFlags {
    /// Teleport probability.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    /// L2 weight on the first layer.
    #[arg(long, default_value_t = 0.005)]
    lambda: f64,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    patience: usize,
}

impl ClassifierFlags {
    fn params(&self) -> ClassifierParams {
        ClassifierParams {
            hidden: self.hidden,
            dropout: self.dropout,
            lambda: self.lambda,
            alpha: self.alpha,
            epochs: self.epochs,
            learning_rate: self.lr,
            patience: self.patience,
        }
    }
}

#[derive(Args)]
#[command(args_override_self = true)]
struct LowerArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Precomputed Q; computed from the dataset when absent.
    #[arg(long)]
    q: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, value_enum)]
    mode: LowerMode,
    #[command(flatten)]
    lower: LowerFlags,
    #[arg(long)]
    out: PathBuf,
    /// History CSV path; defaults to `<out>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Learned matrix file, or `fixed` to use Q itself.
    #[arg(long, default_value = "fixed")]
    propagation: String,
    /// Precomputed Q used as the base of rank-one files and in `fixed` mode.
    #[arg(long)]
    q: Option<PathBuf>,
    #[command(flatten)]
    classifier: ClassifierFlags,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Metrics JSON path; printed to stdout as well.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Save the model of the first seed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradScope {
    Dense,
    Lowrank,
    Upper,
    All,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    scope: GradScope,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 8)]
    max_n: usize,
    #[arg(long, default_value_t = 5)]
    max_d: usize,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 1e-5)]
    lower_tol: f64,
    #[arg(long, default_value_t = 1e-4)]
    upper_tol: f64,
    #[arg(long)]
    paper_literal_grad: bool,
    /// Negate the analytic gradients (the check must then fail).
    #[arg(long)]
    inject_sign_flip: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchWhich {
    Dense,
    Lowrank,
    Both,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "500,1000,2000")]
    sizes: Vec<usize>,
    #[arg(long, value_enum, default_value = "both")]
    mode: BenchWhich,
    /// Timed iterations per size and mode.
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[command(flatten)]
    lower: LowerFlags,
    /// CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct AblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    lower: LowerFlags,
    #[command(flatten)]
    classifier: ClassifierFlags,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flags that take a value before the subcommand name.
const GLOBAL_VALUED: [&str; 3] = ["--seed", "--threads", "--config"];

/// Places config-file flags directly after the subcommand and every
/// command-line flag after them, so the command line wins.
fn expand_config(raw: Vec<String>) -> Result<Vec<String>> {
    let mut config = None;
    let mut i = 1;
    while i < raw.len() {
        if let Some(v) = raw[i].strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else if raw[i] == "--config" {
            config = raw.get(i + 1).map(PathBuf::from);
        }
        i += 1;
    }
    let Some(path) = config else { return Ok(raw) };

    let mut sub_at = None;
    let mut i = 1;
    while i < raw.len() {
        let a = &raw[i];
        if GLOBAL_VALUED.contains(&a.as_str()) {
            i += 2;
        } else if a.starts_with('-') {
            i += 1;
        } else {
            sub_at = Some(i);
            break;
        }
    }
    let Some(sub_at) = sub_at else { return Ok(raw) };

    let cmd = Cli::command();
    let sub = cmd.find_subcommand(&raw[sub_at]);
    let is_switch = |key: &str| {
        sub.into_iter()
            .flat_map(|s| s.get_arguments())
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key))
            .is_some_and(|a| !a.get_action().takes_values())
    };
    let file_args = entries_to_args(&load_config(&path)?, is_switch)?;

    let mut out = vec![raw[0].clone(), raw[sub_at].clone()];
    out.extend(file_args);
    out.extend(raw[1..sub_at].iter().cloned());
    out.extend(raw[sub_at + 1..].iter().cloned());
    Ok(out)
}

fn load(dir: &Path) -> Result<DatasetBundle> {
    load_dataset(&DatasetPaths::in_dir(dir))
}

fn base_q(q: Option<&Path>, bundle: &DatasetBundle, alpha: f64) -> Result<nalgebra::DMatrix<f64>> {
    match q {
        Some(path) => match load_matrix(path)? {
            StoredMatrix::Dense(m) if m.nrows() == bundle.graph.num_nodes() => Ok(m),
            StoredMatrix::Dense(m) => Err(Error::InvalidData(format!(
                "{} holds a {}x{} matrix but the dataset has {} nodes",
                path.display(),
                m.nrows(),
                m.ncols(),
                bundle.graph.num_nodes()
            ))),
            StoredMatrix::RankOne(_) => Err(Error::InvalidData(format!(
                "{} holds a rank-one perturbation, expected a dense Q",
                path.display()
            ))),
        },
        None => Ok(compute_q(&bundle.graph, alpha)?.matrix),
    }
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    if let Some(path) = out {
        std::fs::write(path, format!("{text}\n")).map_err(|e| io_err(path, e))?;
    }
    println!("{text}");
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenSbm(a) => {
            let cfg = SbmConfig {
                n: a.n,
                k: a.k,
                p_in: a.p_in,
                p_out: a.p_out,
                feature_dim: a.feature_dim,
                feature_noise: a.noise,
                seed,
                train_per_class: a.train_per_class,
                val_fraction: a.val_fraction,
            };
            let bundle = sbm_generate(&cfg)?;
            save_dataset(&bundle, &a.out)?;
            println!(
                "wrote {} nodes, {} edges to {}",
                bundle.graph.num_nodes(),
                bundle.graph.num_edges(),
                a.out.display()
            );
        }
        Command::Perturb(a) => {
            let bundle = load(&a.dataset)?;
            let graph = perturb_edges(&bundle.graph, a.rate, &mut stream_rng(seed, 0))?;
            let added = graph.num_edges() - bundle.graph.num_edges();
            save_dataset(&DatasetBundle { graph, splits: bundle.splits }, &a.out)?;
            println!("added {added} edges, wrote {}", a.out.display());
        }
        Command::Ppr(a) => {
            let bundle = load(&a.dataset)?;
            let (q, residual) = ppr_matrix_with_residual(&normalize_adjacency(&bundle.graph)?, a.alpha)?;
            save_matrix(&a.out, &StoredMatrix::Dense(q.matrix))?;
            println!("residual {residual:e}");
        }
        Command::Lower(a) => {
            let bundle = load(&a.dataset)?;
            let q = base_q(a.q.as_deref(), &bundle, a.alpha)?;
            let method = match a.mode {
                LowerMode::Dense => Method::Dense,
                LowerMode::Lowrank => Method::LowRank,
            };
            let (learned, history) = learn(method, &q, &bundle, &a.lower.params(seed), seed)?;
            let history = history.expect("learned methods record history");
            save_matrix(&a.out, &learned.into_stored(&q))?;
            let hist_path = a.history.unwrap_or_else(|| {
                let mut s = a.out.clone().into_os_string();
                s.push(".history.csv");
                PathBuf::from(s)
            });
            let mut w = create(&hist_path)?;
            history
                .write_csv(&mut w)
                .and_then(|_| w.flush())
                .map_err(|e| io_err(&hist_path, e))?;
            let last = history.records.last();
            emit_json(
                &serde_json::json!({
                    "iterations": history.iterations(),
                    "stop": history.stop,
                    "final_loss": last.map(|r| r.loss),
                    "final_constraint_satisfaction": last.map(|r| r.constraint_satisfaction),
                }),
                None,
            )?;
        }
        Command::Train(a) => {
            let bundle = load(&a.dataset)?;
            let params = a.classifier.params();
            params.validate()?;
            if a.seeds == 0 {
                return Err(Error::InvalidParameter("--seeds must be >= 1".into()));
            }
            let q = base_q(a.q.as_deref(), &bundle, params.alpha)?;
            let learned = if a.propagation == "fixed" {
                Learned::Fixed
            } else {
                Learned::from(load_matrix(Path::new(&a.propagation))?)
            };
            let mut runs = Vec::new();
            for s in seed..seed + a.seeds {
                let (metrics, model) = train_and_evaluate_model(learned.view(&q), &bundle, &params, s)?;
                if s == seed {
                    if let Some(path) = &a.checkpoint {
                        model.save(path)?;
                    }
                }
                runs.push(metrics);
            }
            if runs.len() == 1 {
                emit_json(&runs[0], a.out.as_deref())?;
            } else {
                emit_json(&summarize(runs), a.out.as_deref())?;
            }
        }
        Command::Gradcheck(a) => {
            let scopes: Vec<Scope> = match a.scope {
                GradScope::Dense => vec![Scope::Dense],
                GradScope::Lowrank => vec![Scope::LowRank],
                GradScope::Upper => vec![Scope::Upper],
                GradScope::All => vec![Scope::Dense, Scope::LowRank, Scope::Upper],
            };
            let opts = GradcheckOptions {
                instances: a.instances,
                max_n: a.max_n,
                max_d: a.max_d,
                seed,
                step: a.step,
                lower_tol: a.lower_tol,
                upper_tol: a.upper_tol,
                paper_literal_grad: a.paper_literal_grad,
                inject_sign_flip: a.inject_sign_flip,
            };
            if opts.instances == 0 || !(opts.step > 0.0) {
                return Err(Error::InvalidParameter("need --instances >= 1 and --step > 0".into()));
            }
            let reports = gradcheck::run(&scopes, &opts);
            println!("component,instances,max_rel_error,tolerance,result");
            for r in &reports {
                println!(
                    "{},{},{:.3e},{:.1e},{}",
                    r.component,
                    r.instances,
                    r.max_rel_error,
                    r.tolerance,
                    if r.passed { "pass" } else { "fail" }
                );
            }
            if let Some(bad) = reports.iter().find(|r| !r.passed) {
                return Err(Error::Numeric(format!(
                    "{} gradient differs from finite differences (max rel error {:.3e})",
                    bad.component, bad.max_rel_error
                )));
            }
        }
        Command::Bench(a) => {
            let modes = match a.mode {
                BenchWhich::Dense => vec![BenchMode::Dense],
                BenchWhich::Lowrank => vec![BenchMode::LowRank],
                BenchWhich::Both => vec![BenchMode::Dense, BenchMode::LowRank],
            };
            if a.reps == 0 || a.sizes.is_empty() {
                return Err(Error::InvalidParameter("need --reps >= 1 and at least one size".into()));
            }
            let rows = bench_lower(&a.sizes, &modes, a.reps, &a.lower.params(seed), seed)?;
            match &a.out {
                Some(path) => {
                    let mut w = create(path)?;
                    write_csv(&rows, &mut w).and_then(|_| w.flush()).map_err(|e| io_err(path, e))?;
                }
                None => write_csv(&rows, std::io::stdout().lock()).map_err(|e| io_err(Path::new("<stdout>"), e))?,
            }
        }
        Command::Ablate(a) => {
            let bundle = load(&a.dataset)?;
            let params = a.classifier.params();
            let q = compute_q(&bundle.graph, params.alpha)?.matrix;
            let seeds: Vec<u64> = (seed..seed + a.seeds).collect();
            let report = ablate(&q, &bundle, &a.lower.params(seed), &params, &seeds)?;
            emit_json(&report, a.out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let args = match expand_config(raw) {
        Ok(args) => args,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be >= 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: could not start thread pool: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
