//! Graphs, symmetric normalization and the personalized-PageRank propagation
//! matrix `Q = (I - (1-α)Ã)^{-1}`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Undirected, unweighted graph with node features and integer labels.
///
/// Edges are stored canonically as `(u, v)` with `u < v`, sorted and
/// deduplicated.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    features: DMatrix<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Graph {
    /// Builds a graph, canonicalizing and deduplicating `edges`.
    ///
    /// The class count is `max(label) + 1`. Self-loops are rejected.
    pub fn new(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: DMatrix<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
        Self::with_classes(n, edges, features, labels, num_classes)
    }

    /// Like [`Graph::new`] with an explicit class count (classes may be empty).
    pub fn with_classes(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: DMatrix<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if features.nrows() != n {
            return Err(Error::dims("graph features", format!("{n} rows"), features.nrows()));
        }
        if labels.len() != n {
            return Err(Error::dims("graph labels", n, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidData(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        let mut canon = Vec::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::InvalidData(format!(
                    "edge ({u}, {v}) has an endpoint outside [0, {n})"
                )));
            }
            if u == v {
                return Err(Error::InvalidData(format!("self-loop on node {u}")));
            }
            canon.push((u.min(v), u.max(v)));
        }
        canon.sort_unstable();
        canon.dedup();
        Ok(Graph {
            n,
            edges: canon,
            features,
            labels,
            num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.binary_search(&(u.min(v), u.max(v))).is_ok()
    }

    /// Returns a copy with `extra` edges added (canonicalized, deduplicated).
    pub fn with_added_edges(&self, extra: &[(usize, usize)]) -> Result<Self> {
        Graph::with_classes(
            self.n,
            self.edges.iter().chain(extra).copied(),
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
        )
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }
}

/// `Ã = D^{-1/2} A D^{-1/2}`, held densely and as weighted neighbor lists.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    dense: DMatrix<f64>,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl NormalizedAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn dense(&self) -> &DMatrix<f64> {
        &self.dense
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    /// Sparse product `Ã · h`.
    pub fn mul(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(h.nrows(), h.ncols());
        for c in 0..h.ncols() {
            let src = h.column(c);
            let mut dst = out.column_mut(c);
            for (i, row) in self.neighbors.iter().enumerate() {
                dst[i] = row.iter().map(|&(j, w)| w * src[j]).sum();
            }
        }
        out
    }

    /// Power-iteration estimate of the spectral radius of Ã.
    pub fn spectral_radius_estimate(&self, iters: usize) -> f64 {
        let n = self.num_nodes();
        if n == 0 {
            return 0.0;
        }
        // A deterministic, non-symmetric start vector avoids landing exactly
        // orthogonal to the dominant eigenvector on regular graphs.
        let mut v = DMatrix::from_fn(n, 1, |i, _| 1.0 + (i as f64 * 0.618_033_988_7).fract());
        let mut estimate = 0.0;
        for _ in 0..iters {
            let norm = v.norm();
            if norm == 0.0 {
                return 0.0;
            }
            v /= norm;
            let w = self.mul(&v);
            estimate = w.norm();
            v = w;
        }
        estimate
    }
}

/// Symmetrically normalizes the binary adjacency of `g`.
///
/// Isolated nodes get a zero row and column (their `D^{-1/2}` entry is 0).
pub fn normalize_adjacency(g: &Graph) -> Result<NormalizedAdjacency> {
    let n = g.num_nodes();
    if n == 0 {
        return Err(Error::InvalidParameter("graph has no nodes".into()));
    }
    let inv_sqrt: Vec<f64> = g
        .degrees()
        .into_iter()
        .map(|d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
        .collect();
    let mut dense = DMatrix::zeros(n, n);
    let mut neighbors = vec![Vec::new(); n];
    for &(u, v) in g.edges() {
        let w = inv_sqrt[u] * inv_sqrt[v];
        dense[(u, v)] = w;
        dense[(v, u)] = w;
        neighbors[u].push((v, w));
        neighbors[v].push((u, w));
    }
    for row in &mut neighbors {
        row.sort_unstable_by_key(|&(j, _)| j);
    }
    Ok(NormalizedAdjacency { dense, neighbors })
}

/// A dense propagation matrix together with its teleport probability.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationMatrix {
    pub alpha: f64,
    pub matrix: DMatrix<f64>,
}

impl PropagationMatrix {
    pub fn num_nodes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn view(&self) -> PropagationView<'_> {
        PropagationView::Dense(&self.matrix)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "teleport probability must lie in (0, 1], got {alpha}"
        )));
    }
    Ok(())
}

/// Residual bound every direct solve must meet.
pub const PPR_RESIDUAL_TOL: f64 = 1e-8;

/// Solves `(I - (1-α)Ã) Q = I` by Cholesky factorization.
///
/// The system matrix is symmetric positive definite for α > 0 because the
/// spectrum of Ã lies in [-1, 1]. Returns the matrix and the max-abs residual.
pub fn ppr_matrix_with_residual(
    na: &NormalizedAdjacency,
    alpha: f64,
) -> Result<(PropagationMatrix, f64)> {
    check_alpha(alpha)?;
    let n = na.num_nodes();
    let system = system_matrix(na, alpha);
    let chol = nalgebra::Cholesky::new(system.clone()).ok_or_else(|| {
        Error::Numeric("PPR system matrix is not positive definite".into())
    })?;
    let q = chol.solve(&DMatrix::identity(n, n));
    let residual = ppr_residual(&system, &q);
    if !(residual < PPR_RESIDUAL_TOL) {
        return Err(Error::Numeric(format!(
            "PPR solve residual {residual:e} exceeds {PPR_RESIDUAL_TOL:e}"
        )));
    }
    Ok((PropagationMatrix { alpha, matrix: q }, residual))
}

/// `Q = (I - (1-α)Ã)^{-1}` via a factorization-based solve.
pub fn ppr_matrix(na: &NormalizedAdjacency, alpha: f64) -> Result<PropagationMatrix> {
    ppr_matrix_with_residual(na, alpha).map(|(q, _)| q)
}

fn system_matrix(na: &NormalizedAdjacency, alpha: f64) -> DMatrix<f64> {
    let n = na.num_nodes();
    let mut m = na.dense() * -(1.0 - alpha);
    for i in 0..n {
        m[(i, i)] += 1.0;
    }
    m
}

/// `‖(I - (1-α)Ã) Q - I‖_max`.
fn ppr_residual(system: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    let mut r = linalg::mul(system, q);
    for i in 0..r.nrows() {
        r[(i, i)] -= 1.0;
    }
    r.amax()
}

/// Runs `H ← (1-α) Ã H + α H0` for `steps` iterations starting at `H0`.
///
/// As `steps` grows this converges to `α Q H0`.
pub fn ppr_power_iteration(
    na: &NormalizedAdjacency,
    alpha: f64,
    h0: &DMatrix<f64>,
    steps: usize,
) -> Result<DMatrix<f64>> {
    check_alpha(alpha)?;
    if h0.nrows() != na.num_nodes() {
        return Err(Error::dims("power iteration", na.num_nodes(), h0.nrows()));
    }
    let restart = h0 * alpha;
    let mut h = h0.clone();
    for _ in 0..steps {
        let mut next = na.mul(&h);
        next *= 1.0 - alpha;
        next += &restart;
        h = next;
    }
    Ok(h)
}

/// Read-only view of a learned propagation matrix: either dense, or the
/// implicit rank-one form `Q + p qᵀ`.
#[derive(Debug, Clone, Copy)]
pub enum PropagationView<'a> {
    Dense(&'a DMatrix<f64>),
    RankOne {
        base: &'a DMatrix<f64>,
        p: &'a DVector<f64>,
        q: &'a DVector<f64>,
    },
}

impl PropagationView<'_> {
    pub fn num_nodes(&self) -> usize {
        match self {
            PropagationView::Dense(m) => m.nrows(),
            PropagationView::RankOne { base, .. } => base.nrows(),
        }
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match self {
            PropagationView::Dense(m) => m[(i, j)],
            PropagationView::RankOne { base, p, q } => base[(i, j)] + p[i] * q[j],
        }
    }

    fn check(&self) -> Result<()> {
        match self {
            PropagationView::Dense(m) if !m.is_square() => {
                Err(Error::dims("propagation matrix", "square", format!("{:?}", m.shape())))
            }
            PropagationView::RankOne { base, p, q }
                if !base.is_square() || p.len() != base.nrows() || q.len() != base.nrows() =>
            {
                Err(Error::dims(
                    "rank-one propagation",
                    format!("p, q of length {}", base.nrows()),
                    format!("{} and {}", p.len(), q.len()),
                ))
            }
            _ => Ok(()),
        }
    }

    /// `α · Q_s · H`. The rank-one form computes `α (Q H + p (qᵀ H))`.
    pub fn apply(&self, h: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
        self.check()?;
        if h.nrows() != self.num_nodes() {
            return Err(Error::dims("apply_propagation", self.num_nodes(), h.nrows()));
        }
        let mut out = match self {
            PropagationView::Dense(m) => linalg::mul(m, h),
            PropagationView::RankOne { base, p, q } => {
                let mut out = linalg::mul(base, h);
                let qh = linalg::vec_tr_mul(q, h);
                out += *p * qh.transpose();
                out
            }
        };
        out *= alpha;
        Ok(out)
    }

    /// `α · Q_sᵀ · G`, used when backpropagating through the propagation.
    pub fn apply_transpose(&self, g: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
        self.check()?;
        if g.nrows() != self.num_nodes() {
            return Err(Error::dims("apply_propagation_transpose", self.num_nodes(), g.nrows()));
        }
        let mut out = match self {
            PropagationView::Dense(m) => linalg::tr_mul(m, g),
            PropagationView::RankOne { base, p, q } => {
                let mut out = linalg::tr_mul(base, g);
                let pg = linalg::vec_tr_mul(p, g);
                out += *q * pg.transpose();
                out
            }
        };
        out *= alpha;
        Ok(out)
    }

    /// Rows `rows` of `α · Q_s · H`, in the given order.
    pub fn apply_rows(&self, rows: &[usize], h: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
        self.check()?;
        let n = self.num_nodes();
        if h.nrows() != n {
            return Err(Error::dims("apply_propagation rows", n, h.nrows()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dims("apply_propagation rows", format!("row < {n}"), bad));
        }
        let base = match self {
            PropagationView::Dense(m) => *m,
            PropagationView::RankOne { base, .. } => *base,
        };
        let mut out = DMatrix::zeros(rows.len(), h.ncols());
        for c in 0..h.ncols() {
            let hc = h.column(c);
            for (r, &i) in rows.iter().enumerate() {
                out[(r, c)] = base.row(i).iter().zip(hc.iter()).map(|(a, b)| a * b).sum();
            }
        }
        if let PropagationView::RankOne { p, q, .. } = self {
            let qh = linalg::vec_tr_mul(q, h);
            for (r, &i) in rows.iter().enumerate() {
                for c in 0..h.ncols() {
                    out[(r, c)] += p[i] * qh[c];
                }
            }
        }
        out *= alpha;
        Ok(out)
    }

    /// `α · Q_sᵀ · G` where `G` is zero outside `rows`; `g_rows[r]` holds row
    /// `rows[r]` of `G`.
    pub fn apply_transpose_rows(
        &self,
        rows: &[usize],
        g_rows: &DMatrix<f64>,
        alpha: f64,
    ) -> Result<DMatrix<f64>> {
        self.check()?;
        let n = self.num_nodes();
        if g_rows.nrows() != rows.len() {
            return Err(Error::dims("apply_propagation_transpose rows", rows.len(), g_rows.nrows()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dims("apply_propagation_transpose rows", format!("row < {n}"), bad));
        }
        let base = match self {
            PropagationView::Dense(m) => *m,
            PropagationView::RankOne { base, .. } => *base,
        };
        let mut out = DMatrix::zeros(n, g_rows.ncols());
        for (r, &i) in rows.iter().enumerate() {
            let qi = base.row(i);
            for c in 0..g_rows.ncols() {
                let w = g_rows[(r, c)];
                if w == 0.0 {
                    continue;
                }
                let mut col = out.column_mut(c);
                for (o, &v) in col.iter_mut().zip(qi.iter()) {
                    *o += w * v;
                }
            }
        }
        if let PropagationView::RankOne { p, q, .. } = self {
            for c in 0..g_rows.ncols() {
                let s: f64 = rows.iter().enumerate().map(|(r, &i)| p[i] * g_rows[(r, c)]).sum();
                out.column_mut(c).axpy(s, *q, 1.0);
            }
        }
        out *= alpha;
        Ok(out)
    }

    /// Materializes the view as a dense matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            PropagationView::Dense(m) => (*m).clone(),
            PropagationView::RankOne { base, p, q } => *base + *p * q.transpose(),
        }
    }
}

/// `α · Q_s · H`.
pub fn apply_propagation(
    view: PropagationView<'_>,
    h: &DMatrix<f64>,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    view.apply(h, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn featureless(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::new(n, edges.iter().copied(), DMatrix::zeros(n, 1), vec![0; n]).unwrap()
    }

    #[test]
    fn single_isolated_node() {
        let na = normalize_adjacency(&featureless(1, &[])).unwrap();
        assert_eq!(na.dense(), &DMatrix::zeros(1, 1));
        let q = ppr_matrix(&na, 0.1).unwrap();
        assert_eq!(q.matrix[(0, 0)], 1.0);
    }

    #[test]
    fn empty_graph_rejected() {
        let g = featureless(0, &[]);
        assert!(matches!(normalize_adjacency(&g), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn two_node_edge() {
        let na = normalize_adjacency(&featureless(2, &[(1, 0)])).unwrap();
        assert_eq!(na.dense(), &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let q = ppr_matrix(&na, 0.5).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[4.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 4.0 / 3.0]);
        assert!(linalg::max_abs_diff(&q.matrix, &expect) < 1e-14);
    }

    #[test]
    fn path_of_three() {
        let na = normalize_adjacency(&featureless(3, &[(0, 1), (1, 2)])).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let expect = DMatrix::from_row_slice(3, 3, &[0.0, s, 0.0, s, 0.0, s, 0.0, s, 0.0]);
        assert!(linalg::max_abs_diff(na.dense(), &expect) < 1e-15);
        assert!(na.spectral_radius_estimate(200) <= 1.0 + 1e-9);
    }

    #[test]
    fn alpha_one_is_identity() {
        let na = normalize_adjacency(&featureless(4, &[(0, 1), (1, 2), (2, 3), (0, 3)])).unwrap();
        let q = ppr_matrix(&na, 1.0).unwrap();
        assert_eq!(q.matrix, DMatrix::identity(4, 4));
        let h0 = DMatrix::from_fn(4, 2, |i, j| (i + j) as f64);
        assert_eq!(ppr_power_iteration(&na, 1.0, &h0, 5).unwrap(), h0);
    }

    #[test]
    fn bad_alpha_rejected() {
        let na = normalize_adjacency(&featureless(2, &[(0, 1)])).unwrap();
        assert!(ppr_matrix(&na, 0.0).is_err());
        assert!(ppr_matrix(&na, 1.5).is_err());
    }

    #[test]
    fn zero_power_steps_returns_input() {
        let na = normalize_adjacency(&featureless(3, &[(0, 1)])).unwrap();
        let h0 = DMatrix::from_fn(3, 2, |i, j| i as f64 - j as f64);
        assert_eq!(ppr_power_iteration(&na, 0.3, &h0, 0).unwrap(), h0);
        assert!(ppr_power_iteration(&na, 0.3, &DMatrix::zeros(2, 2), 1).is_err());
    }

    #[test]
    fn graph_invariants_enforced() {
        let x = DMatrix::zeros(3, 1);
        assert!(Graph::new(3, [(0, 3)], x.clone(), vec![0; 3]).is_err());
        assert!(Graph::new(3, [(1, 1)], x.clone(), vec![0; 3]).is_err());
        assert!(Graph::new(3, [(0, 1)], x.clone(), vec![0; 2]).is_err());
        assert!(Graph::new(2, [(0, 1)], x, vec![0; 2]).is_err());
        let g = featureless(3, &[(2, 1), (1, 2), (0, 1)]);
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn identity_propagation() {
        let na = normalize_adjacency(&featureless(3, &[(0, 1), (1, 2)])).unwrap();
        let q = ppr_matrix(&na, 0.2).unwrap();
        let out = apply_propagation(q.view(), &DMatrix::identity(3, 3), 1.0).unwrap();
        assert_eq!(out, q.matrix);
        let p = DVector::zeros(3);
        let qv = DVector::from_element(3, 0.7);
        let h = DMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let rank = PropagationView::RankOne { base: &q.matrix, p: &p, q: &qv };
        let dense = q.view().apply(&h, 0.2).unwrap();
        assert!(linalg::max_abs_diff(&rank.apply(&h, 0.2).unwrap(), &dense) < 1e-15);
    }

    #[test]
    fn row_restricted_products_match_full() {
        let base = DMatrix::from_fn(6, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.1);
        let p = DVector::from_fn(6, |i, _| i as f64 * 0.2 - 0.5);
        let q = DVector::from_fn(6, |i, _| 0.3 - i as f64 * 0.1);
        let h = DMatrix::from_fn(6, 3, |i, j| (i as f64 - j as f64) * 0.25);
        let rows = [4, 1, 5];
        for view in [PropagationView::Dense(&base), PropagationView::RankOne { base: &base, p: &p, q: &q }] {
            let full = view.apply(&h, 0.3).unwrap();
            let part = view.apply_rows(&rows, &h, 0.3).unwrap();
            for (r, &i) in rows.iter().enumerate() {
                for c in 0..3 {
                    assert!((full[(i, c)] - part[(r, c)]).abs() < 1e-14);
                }
            }
            let g_rows = DMatrix::from_fn(3, 3, |r, c| (r + c) as f64 - 1.5);
            let mut g = DMatrix::zeros(6, 3);
            for (r, &i) in rows.iter().enumerate() {
                g.row_mut(i).copy_from(&g_rows.row(r));
            }
            let full_t = view.apply_transpose(&g, 0.3).unwrap();
            let part_t = view.apply_transpose_rows(&rows, &g_rows, 0.3).unwrap();
            assert!(linalg::max_abs_diff(&full_t, &part_t) < 1e-13);
            let dense = view.to_dense();
            assert!(linalg::max_abs_diff(&full_t, &(dense.transpose() * &g * 0.3)) < 1e-13);
        }
    }
}
