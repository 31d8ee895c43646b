//! Upper level: a two-layer predictor whose logits are propagated through a
//! fixed (possibly learned) propagation matrix, trained with regularized
//! cross-entropy.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::data::Splits;
use crate::error::{Error, Result};
use crate::graph::{Graph, PropagationView};

/// Hyperparameters of the upper-level model and its training loop.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassifierParams {
    pub hidden: usize,
    pub dropout: f64,
    /// L2 coefficient on the first-layer weights only.
    pub lambda: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        ClassifierParams {
            hidden: 64,
            dropout: 0.1,
            lambda: 0.005,
            alpha: 0.1,
            epochs: 1000,
            learning_rate: 0.01,
            patience: 100,
        }
    }
}

impl ClassifierParams {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::InvalidParameter("hidden must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidParameter(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Weights of `f_θ(X) = relu(X W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub pre: DMatrix<f64>,
    pub mask: Option<DMatrix<f64>>,
    pub hidden: DMatrix<f64>,
    pub logits: DMatrix<f64>,
}

impl Mlp {
    pub fn zeros(d: usize, h: usize, k: usize) -> Self {
        Mlp {
            w1: DMatrix::zeros(d, h),
            b1: DVector::zeros(h),
            w2: DMatrix::zeros(h, k),
            b2: DVector::zeros(k),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(d: usize, h: usize, k: usize, rng: &mut R) -> Self {
        let mut glorot = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            DMatrix::from_fn(rows, cols, |_, _| dist.sample(rng))
        };
        let w1 = glorot(d, h);
        let w2 = glorot(h, k);
        Mlp {
            w1,
            b1: DVector::zeros(h),
            w2,
            b2: DVector::zeros(k),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.ncols()
    }

    /// Forward pass. Dropout is applied after the rectifier, with inverted
    /// scaling, only when `train_rng` is given.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &DMatrix<f64>,
        dropout: f64,
        train_rng: Option<&mut R>,
    ) -> Result<ForwardCache> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dims("mlp_forward", self.input_dim(), x.ncols()));
        }
        let mut pre = x * &self.w1;
        for mut row in pre.row_iter_mut() {
            row += self.b1.transpose();
        }
        let mut hidden = pre.map(|v| v.max(0.0));
        let mask = match train_rng {
            Some(rng) if dropout > 0.0 => {
                let keep = 1.0 / (1.0 - dropout);
                let mask = DMatrix::from_fn(hidden.nrows(), hidden.ncols(), |_, _| {
                    if rng.random::<f64>() < dropout { 0.0 } else { keep }
                });
                hidden.component_mul_assign(&mask);
                Some(mask)
            }
            _ => None,
        };
        let mut logits = &hidden * &self.w2;
        for mut row in logits.row_iter_mut() {
            row += self.b2.transpose();
        }
        Ok(ForwardCache { pre, mask, hidden, logits })
    }

    fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ]
    }

    fn params(&self) -> [&[f64]; 4] {
        [self.w1.as_slice(), self.b1.as_slice(), self.w2.as_slice(), self.b2.as_slice()]
    }
}

/// Logits `f_θ(X)`; deterministic when `train_mode` is false.
pub fn mlp_forward<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    mlp: &Mlp,
    dropout: f64,
    train_mode: bool,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let cache = if train_mode {
        mlp.forward(x, dropout, Some(rng))?
    } else {
        mlp.forward::<R>(x, dropout, None)?
    };
    Ok(cache.logits)
}

/// Row-stochastic class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub z: DMatrix<f64>,
}

impl Prediction {
    pub fn argmax(&self, i: usize) -> usize {
        argmax_row(&self.z, i)
    }
}

fn argmax_row(z: &DMatrix<f64>, i: usize) -> usize {
    let row = z.row(i);
    let mut best = 0;
    for k in 1..row.len() {
        if row[k] > row[best] {
            best = k;
        }
    }
    best
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = s.clone();
    for mut row in z.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    z
}

/// `Z = softmax(α · Q_s · H)`.
pub fn predict(view: PropagationView<'_>, logits: &DMatrix<f64>, alpha: f64) -> Result<Prediction> {
    let s = view.apply(logits, alpha)?;
    Ok(Prediction { z: softmax_rows(&s) })
}

const LN_CLAMP: f64 = 1e-12;

/// `-Σ_{i∈train} ln Z(i, y_i) + λ‖W1‖_F²`, summed over training nodes.
pub fn ce_loss(
    z: &DMatrix<f64>,
    labels: &[usize],
    train: &[usize],
    lambda: f64,
    w1: &DMatrix<f64>,
) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::InvalidParameter("training set is empty".into()));
    }
    let mut loss = 0.0;
    for &i in train {
        let y = *labels
            .get(i)
            .ok_or_else(|| Error::InvalidData(format!("train id {i} has no label")))?;
        if i >= z.nrows() || y >= z.ncols() {
            return Err(Error::dims("ce_loss", format!("{:?}", z.shape()), format!("({i}, {y})")));
        }
        loss -= z[(i, y)].max(LN_CLAMP).ln();
    }
    Ok(loss + lambda * w1.norm_squared())
}

/// Fraction of `ids` whose argmax (lowest index on ties) equals the label.
pub fn evaluate(z: &DMatrix<f64>, labels: &[usize], ids: &[usize]) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::InvalidParameter("evaluation set is empty".into()));
    }
    let mut hits = 0usize;
    for &i in ids {
        if i >= z.nrows() || i >= labels.len() {
            return Err(Error::dims("evaluate", z.nrows(), i));
        }
        if argmax_row(z, i) == labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / ids.len() as f64)
}

/// Gradients with the same layout as [`Mlp`].
pub type Gradients = Mlp;

/// Loss on `rows` and its exact gradient with respect to every parameter,
/// given a cached forward pass.
pub fn backward(
    view: PropagationView<'_>,
    x: &DMatrix<f64>,
    labels: &[usize],
    rows: &[usize],
    mlp: &Mlp,
    cache: &ForwardCache,
    lambda: f64,
    alpha: f64,
) -> Result<(f64, Gradients)> {
    let s = view.apply_rows(rows, &cache.logits, alpha)?;
    let z = softmax_rows(&s);
    let k = mlp.num_classes();
    let mut loss = lambda * mlp.w1.norm_squared();
    // dL/dS restricted to the loss rows: Z - onehot(y).
    let mut ds = z.clone();
    for (r, &i) in rows.iter().enumerate() {
        let y = labels[i];
        if y >= k {
            return Err(Error::InvalidData(format!("label {y} of node {i} >= {k} classes")));
        }
        loss -= z[(r, y)].max(LN_CLAMP).ln();
        ds[(r, y)] -= 1.0;
    }
    let d_logits = view.apply_transpose_rows(rows, &ds, alpha)?;

    let grad_w2 = cache.hidden.tr_mul(&d_logits);
    let grad_b2 = row_sums(&d_logits);
    let mut d_hidden = &d_logits * mlp.w2.transpose();
    if let Some(mask) = &cache.mask {
        d_hidden.component_mul_assign(mask);
    }
    d_hidden.zip_apply(&cache.pre, |g, p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    let mut grad_w1 = x.tr_mul(&d_hidden);
    grad_w1 += &mlp.w1 * (2.0 * lambda);
    let grad_b1 = row_sums(&d_hidden);
    Ok((
        loss,
        Mlp {
            w1: grad_w1,
            b1: grad_b1,
            w2: grad_w2,
            b2: grad_b2,
        },
    ))
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

/// Adam with the usual moment decay constants.
#[derive(Debug, Clone)]
struct Adam {
    lr: f64,
    t: i32,
    m: Mlp,
    v: Mlp,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(like: &Mlp, lr: f64) -> Self {
        let zeros = Mlp::zeros(like.input_dim(), like.hidden_dim(), like.num_classes());
        Adam { lr, t: 0, m: zeros.clone(), v: zeros }
    }

    fn step(&mut self, params: &mut Mlp, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let lr = self.lr;
        for (((p, g), m), v) in params
            .params_mut()
            .into_iter()
            .zip(grads.params())
            .zip(self.m.params_mut())
            .zip(self.v.params_mut())
        {
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Mlp,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
}

/// Full-batch training with the propagation held fixed.
///
/// Early stopping tracks validation accuracy, breaking ties by validation
/// loss, and returns the best-validation parameters. When the validation split
/// is empty the training nodes are used for model selection.
pub fn train_upper<R: Rng + ?Sized>(
    view: PropagationView<'_>,
    graph: &Graph,
    splits: &Splits,
    params: &ClassifierParams,
    rng: &mut R,
) -> Result<TrainOutcome> {
    params.validate()?;
    splits.validate(graph.num_nodes())?;
    if splits.train.is_empty() {
        return Err(Error::InvalidParameter("training set is empty".into()));
    }
    if view.num_nodes() != graph.num_nodes() {
        return Err(Error::dims("train_upper propagation", graph.num_nodes(), view.num_nodes()));
    }
    let x = graph.features();
    let labels = graph.labels();
    let select: &[usize] = if splits.val.is_empty() { &splits.train } else { &splits.val };

    let mut model = Mlp::init(graph.feature_dim(), params.hidden, graph.num_classes(), rng);
    let mut adam = Adam::new(&model, params.learning_rate);
    let mut best = model.clone();
    let mut best_key = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();

    for epoch in 1..=params.epochs {
        let cache = model.forward(x, params.dropout, Some(&mut *rng))?;
        let (train_loss, grads) =
            backward(view, x, labels, &splits.train, &model, &cache, params.lambda, params.alpha)?;
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!("training loss became {train_loss} at epoch {epoch}")));
        }
        adam.step(&mut model, &grads);

        let logits = model.forward::<R>(x, 0.0, None)?.logits;
        let z_sel = softmax_rows(&view.apply_rows(select, &logits, params.alpha)?);
        let mut val_loss = 0.0;
        let mut hits = 0usize;
        for (r, &i) in select.iter().enumerate() {
            val_loss -= z_sel[(r, labels[i])].max(LN_CLAMP).ln();
            if argmax_row(&z_sel, r) == labels[i] {
                hits += 1;
            }
        }
        let val_accuracy = hits as f64 / select.len() as f64;
        history.push(EpochRecord { epoch, train_loss, val_loss, val_accuracy });

        let key = (val_accuracy, -val_loss);
        if key > best_key {
            best_key = key;
            best = model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= params.patience {
                break;
            }
        }
    }
    let epochs_run = history.len();
    Ok(TrainOutcome { model: best, best_epoch, epochs_run, history })
}

/// Predictions of a trained model in evaluation mode.
pub fn predict_model(
    view: PropagationView<'_>,
    graph: &Graph,
    model: &Mlp,
    alpha: f64,
) -> Result<Prediction> {
    let logits = model.forward::<rand_chacha::ChaCha8Rng>(graph.features(), 0.0, None)?.logits;
    predict(view, &logits, alpha)
}

const CHECKPOINT_MAGIC: &[u8; 7] = b"OPTGNN1";

impl Mlp {
    /// `OPTGNN1`, u64 LE `d, h, K`, then row-major f64 LE `W1, b1, W2, b2`.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        for dim in [self.input_dim(), self.hidden_dim(), self.num_classes()] {
            out.write_all(&(dim as u64).to_le_bytes())?;
        }
        write_row_major(&mut out, &self.w1)?;
        for v in self.b1.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        write_row_major(&mut out, &self.w2)?;
        for v in self.b2.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Format(format!("reading checkpoint: {e}")))?;
        let mut cur = crate::data::ByteCursor::new(&bytes);
        if cur.take(7)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("checkpoint magic mismatch".into()));
        }
        let d = cur.read_len()?;
        let h = cur.read_len()?;
        let k = cur.read_len()?;
        let w1 = cur.read_row_major(d, h)?;
        let b1 = DVector::from_vec(cur.read_f64s(h)?);
        let w2 = cur.read_row_major(h, k)?;
        let b2 = DVector::from_vec(cur.read_f64s(k)?);
        cur.finish()?;
        Ok(Mlp { w1, b1, w2, b2 })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Mlp::read_checkpoint(std::io::BufReader::new(file))
    }
}

pub(crate) fn write_row_major<W: Write>(out: &mut W, m: &DMatrix<f64>) -> std::io::Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}
