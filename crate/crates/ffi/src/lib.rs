//! C interface to `optprop`.
//!
//! Objects cross the boundary as opaque handles created by `optprop_*`
//! constructors and released with the matching `*_free` function. Every
//! fallible call returns an [`OptpropStatus`]; on failure the message is
//! available from [`optprop_last_error`] on the same thread until the next
//! failing call.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use optprop::classifier::{predict_model, ClassifierParams, Mlp};
use optprop::data::{load_dataset, load_matrix, save_matrix, sbm_generate, DatasetBundle, DatasetPaths, SbmConfig};
use optprop::error::Error;
use optprop::graph::PropagationMatrix;
use optprop::objective::LowerParams;
use optprop::pipeline::{compute_q, learn, train_and_evaluate_model, Learned, Method};

/// Result of every fallible call. The numeric values match the exit codes of
/// the command-line tool for the first four variants.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptpropStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8, out-of-range index or invalid parameter.
    InvalidArgument = 1,
    /// Unreadable, malformed or inconsistent input data.
    Data = 2,
    Numeric = 3,
    /// A Rust panic was caught at the boundary.
    Internal = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptpropMethod {
    Fixed = 0,
    Dense = 1,
    LowRank = 2,
}

/// Block-model generator settings.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct OptpropSbmConfig {
    pub n: usize,
    pub k: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
    pub train_per_class: usize,
    pub val_fraction: f64,
}

/// Lower-level settings; obtain defaults from
/// [`optprop_lower_params_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct OptpropLowerParams {
    pub epsilon: f64,
    pub c: f64,
    pub b: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub max_iters: usize,
    pub batch_p: usize,
    pub batch_n: usize,
    pub anchors_per_step: usize,
    pub grad_tol: f64,
    pub loss_rel_tol: f64,
    pub loss_window: usize,
    pub max_backtracks: usize,
    pub reward_smoothness: bool,
    pub paper_literal_grad: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct OptpropClassifierParams {
    pub hidden: usize,
    pub dropout: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub patience: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct OptpropMetrics {
    pub test_accuracy: f64,
    pub val_accuracy: f64,
    pub epochs_run: usize,
    pub seed: u64,
}

/// A graph with features, labels and splits.
pub struct OptpropDataset(DatasetBundle);

/// A dense PPR matrix `Q` with its teleport probability.
pub struct OptpropMatrix(PropagationMatrix);

/// A learned propagation matrix together with the `Q` it was learned from.
pub struct OptpropLearned {
    base: PropagationMatrix,
    learned: Learned,
}

/// Trained classifier weights.
pub struct OptpropModel(Mlp);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> OptpropStatus {
    match e.exit_code() {
        1 => OptpropStatus::InvalidArgument,
        3 => OptpropStatus::Numeric,
        _ => OptpropStatus::Data,
    }
}

struct Fail(OptpropStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(OptpropStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> OptpropStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OptpropStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            OptpropStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

impl From<OptpropLowerParams> for LowerParams {
    fn from(p: OptpropLowerParams) -> Self {
        LowerParams {
            epsilon: p.epsilon,
            c: p.c,
            b: p.b,
            beta: p.beta,
            gamma: p.gamma,
            eta: p.eta,
            max_iters: p.max_iters,
            batch_p: p.batch_p,
            batch_n: p.batch_n,
            seed: 0,
            reward_smoothness: p.reward_smoothness,
            paper_literal_grad: p.paper_literal_grad,
            anchors_per_step: p.anchors_per_step,
            grad_tol: p.grad_tol,
            loss_rel_tol: p.loss_rel_tol,
            loss_window: p.loss_window,
            max_backtracks: p.max_backtracks,
        }
    }
}

impl From<OptpropClassifierParams> for ClassifierParams {
    fn from(p: OptpropClassifierParams) -> Self {
        ClassifierParams {
            hidden: p.hidden,
            dropout: p.dropout,
            lambda: p.lambda,
            alpha: p.alpha,
            epochs: p.epochs,
            learning_rate: p.learning_rate,
            patience: p.patience,
        }
    }
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn optprop_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn optprop_sbm_config_default() -> OptpropSbmConfig {
    let c = SbmConfig::default();
    OptpropSbmConfig {
        n: c.n,
        k: c.k,
        p_in: c.p_in,
        p_out: c.p_out,
        feature_dim: c.feature_dim,
        feature_noise: c.feature_noise,
        seed: c.seed,
        train_per_class: c.train_per_class,
        val_fraction: c.val_fraction,
    }
}

#[no_mangle]
pub extern "C" fn optprop_lower_params_default() -> OptpropLowerParams {
    let p = LowerParams::default();
    OptpropLowerParams {
        epsilon: p.epsilon,
        c: p.c,
        b: p.b,
        beta: p.beta,
        gamma: p.gamma,
        eta: p.eta,
        max_iters: p.max_iters,
        batch_p: p.batch_p,
        batch_n: p.batch_n,
        anchors_per_step: p.anchors_per_step,
        grad_tol: p.grad_tol,
        loss_rel_tol: p.loss_rel_tol,
        loss_window: p.loss_window,
        max_backtracks: p.max_backtracks,
        reward_smoothness: p.reward_smoothness,
        paper_literal_grad: p.paper_literal_grad,
    }
}

#[no_mangle]
pub extern "C" fn optprop_classifier_params_default() -> OptpropClassifierParams {
    let p = ClassifierParams::default();
    OptpropClassifierParams {
        hidden: p.hidden,
        dropout: p.dropout,
        lambda: p.lambda,
        alpha: p.alpha,
        epochs: p.epochs,
        learning_rate: p.learning_rate,
        patience: p.patience,
    }
}

/// Loads a dataset directory (edges, features, labels, splits).
#[no_mangle]
pub unsafe extern "C" fn optprop_dataset_load(dir: *const c_char, out: *mut *mut OptpropDataset) -> OptpropStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let bundle = load_dataset(&DatasetPaths::in_dir(dir))?;
        put(out, OptpropDataset(bundle))
    })
}

#[no_mangle]
pub unsafe extern "C" fn optprop_dataset_generate_sbm(
    config: *const OptpropSbmConfig,
    out: *mut *mut OptpropDataset,
) -> OptpropStatus {
    guard(|| {
        let c = *borrow(config, "config")?;
        let cfg = SbmConfig {
            n: c.n,
            k: c.k,
            p_in: c.p_in,
            p_out: c.p_out,
            feature_dim: c.feature_dim,
            feature_noise: c.feature_noise,
            seed: c.seed,
            train_per_class: c.train_per_class,
            val_fraction: c.val_fraction,
        };
        put(out, OptpropDataset(sbm_generate(&cfg)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn optprop_dataset_num_nodes(dataset: *const OptpropDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.graph.num_nodes())
}

#[no_mangle]
pub unsafe extern "C" fn optprop_dataset_num_classes(dataset: *const OptpropDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.graph.num_classes())
}

#[no_mangle]
pub unsafe extern "C" fn optprop_dataset_free(dataset: *mut OptpropDataset) {
    free(dataset)
}

/// Computes `Q = (I - (1-α)Ã)^{-1}` for the dataset's graph.
#[no_mangle]
pub unsafe extern "C" fn optprop_ppr(
    dataset: *const OptpropDataset,
    alpha: f64,
    out: *mut *mut OptpropMatrix,
) -> OptpropStatus {
    guard(|| {
        let d = borrow(dataset, "dataset")?;
        put(out, OptpropMatrix(compute_q(&d.0.graph, alpha)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn optprop_matrix_dim(matrix: *const OptpropMatrix) -> usize {
    matrix.as_ref().map_or(0, |m| m.0.num_nodes())
}

#[no_mangle]
pub unsafe extern "C" fn optprop_matrix_get(
    matrix: *const OptpropMatrix,
    i: usize,
    j: usize,
    value: *mut f64,
) -> OptpropStatus {
    guard(|| {
        let m = &borrow(matrix, "matrix")?.0.matrix;
        if i >= m.nrows() || j >= m.ncols() {
            return Err(invalid(format!("index ({i}, {j}) outside {}x{}", m.nrows(), m.ncols())));
        }
        let value = value.as_mut().ok_or_else(|| invalid("value is null"))?;
        *value = m[(i, j)];
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn optprop_matrix_free(matrix: *mut OptpropMatrix) {
    free(matrix)
}

/// Learns a propagation matrix from `q` on the dataset's visible nodes.
#[no_mangle]
pub unsafe extern "C" fn optprop_learn(
    dataset: *const OptpropDataset,
    q: *const OptpropMatrix,
    method: OptpropMethod,
    params: *const OptpropLowerParams,
    seed: u64,
    out: *mut *mut OptpropLearned,
) -> OptpropStatus {
    guard(|| {
        let d = borrow(dataset, "dataset")?;
        let q = borrow(q, "q")?;
        let params = LowerParams { seed, ..LowerParams::from(*borrow(params, "params")?) };
        let method = match method {
            OptpropMethod::Fixed => Method::Fixed,
            OptpropMethod::Dense => Method::Dense,
            OptpropMethod::LowRank => Method::LowRank,
        };
        let (learned, _) = learn(method, &q.0.matrix, &d.0, &params, seed)?;
        put(out, OptpropLearned { base: q.0.clone(), learned })
    })
}

/// Loads a learned matrix file; rank-one files are applied on top of `q`.
#[no_mangle]
pub unsafe extern "C" fn optprop_learned_load(
    path: *const c_char,
    q: *const OptpropMatrix,
    out: *mut *mut OptpropLearned,
) -> OptpropStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let q = borrow(q, "q")?;
        let learned = Learned::from(load_matrix(&path)?);
        let n = q.0.num_nodes();
        let got = match &learned {
            Learned::Dense(d) => d.nrows(),
            Learned::RankOne(r) => r.len(),
            Learned::Fixed => n,
        };
        if got != n {
            return Err(Fail(OptpropStatus::Data, format!("{} holds size {got}, expected {n}", path.display())));
        }
        put(out, OptpropLearned { base: q.0.clone(), learned })
    })
}

#[no_mangle]
pub unsafe extern "C" fn optprop_learned_save(learned: *const OptpropLearned, path: *const c_char) -> OptpropStatus {
    guard(|| {
        let l = borrow(learned, "learned")?;
        let path = path_arg(path, "path")?;
        save_matrix(&path, &l.learned.clone().into_stored(&l.base.matrix))?;
        Ok(())
    })
}

/// Entry `(i, j)` of the learned matrix.
#[no_mangle]
pub unsafe extern "C" fn optprop_learned_get(
    learned: *const OptpropLearned,
    i: usize,
    j: usize,
    value: *mut f64,
) -> OptpropStatus {
    guard(|| {
        let l = borrow(learned, "learned")?;
        let n = l.base.num_nodes();
        if i >= n || j >= n {
            return Err(invalid(format!("index ({i}, {j}) outside {n}x{n}")));
        }
        let value = value.as_mut().ok_or_else(|| invalid("value is null"))?;
        *value = l.learned.view(&l.base.matrix).entry(i, j);
        Ok(())
    })
}

/// 1 when the learned matrix is stored as `Q + p qᵀ`, 0 otherwise.
#[no_mangle]
pub unsafe extern "C" fn optprop_learned_is_rank_one(learned: *const OptpropLearned) -> i32 {
    learned.as_ref().map_or(0, |l| matches!(l.learned, Learned::RankOne(_)) as i32)
}

#[no_mangle]
pub unsafe extern "C" fn optprop_learned_free(learned: *mut OptpropLearned) {
    free(learned)
}

/// Trains the classifier through `learned` and evaluates it on the test
/// split. `model_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn optprop_train(
    dataset: *const OptpropDataset,
    learned: *const OptpropLearned,
    params: *const OptpropClassifierParams,
    seed: u64,
    metrics: *mut OptpropMetrics,
    model_out: *mut *mut OptpropModel,
) -> OptpropStatus {
    guard(|| {
        let d = borrow(dataset, "dataset")?;
        let l = borrow(learned, "learned")?;
        let params = ClassifierParams::from(*borrow(params, "params")?);
        let metrics = metrics.as_mut().ok_or_else(|| invalid("metrics is null"))?;
        let (m, model) = train_and_evaluate_model(l.learned.view(&l.base.matrix), &d.0, &params, seed)?;
        *metrics = OptpropMetrics {
            test_accuracy: m.test_accuracy,
            val_accuracy: m.val_accuracy,
            epochs_run: m.epochs_run,
            seed: m.seed,
        };
        if !model_out.is_null() {
            put(model_out, OptpropModel(model))?;
        }
        Ok(())
    })
}

/// Writes the predicted class of every node into `labels` (length `len`,
/// at least the node count).
#[no_mangle]
pub unsafe extern "C" fn optprop_model_predict(
    model: *const OptpropModel,
    dataset: *const OptpropDataset,
    learned: *const OptpropLearned,
    alpha: f64,
    labels: *mut usize,
    len: usize,
) -> OptpropStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        let d = borrow(dataset, "dataset")?;
        let l = borrow(learned, "learned")?;
        let n = d.0.graph.num_nodes();
        if labels.is_null() || len < n {
            return Err(invalid(format!("labels buffer must hold {n} entries")));
        }
        let pred = predict_model(l.learned.view(&l.base.matrix), &d.0.graph, &model.0, alpha)?;
        let out = std::slice::from_raw_parts_mut(labels, n);
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = pred.argmax(i);
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn optprop_model_save(model: *const OptpropModel, path: *const c_char) -> OptpropStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        m.0.save(&path_arg(path, "path")?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn optprop_model_load(path: *const c_char, out: *mut *mut OptpropModel) -> OptpropStatus {
    guard(|| {
        let m = Mlp::load(&path_arg(path, "path")?)?;
        put(out, OptpropModel(m))
    })
}

#[no_mangle]
pub unsafe extern "C" fn optprop_model_free(model: *mut OptpropModel) {
    free(model)
}
