//! Dataset files, synthetic block-model graphs, random edge perturbation and
//! the `OPTQ1` binary format for learned matrices.
//!
//! Text formats, all 0-based:
//!
//! * edges: one `u v` pair per line, whitespace separated, `#` comments
//! * features: headerless comma-separated reals, row `i` is node `i`; a
//!   first line reading `identity` stands for the n×n identity
//! * labels: one integer per line
//! * splits: JSON object `{"train": [...], "val": [...], "test": [...]}`

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::lowrank::RankOnePerturbation;

/// Node id lists for training, validation and testing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Checks ids are in range and the three lists pairwise disjoint.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut owner: Vec<Option<&'static str>> = vec![None; n];
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in ids {
                if i >= n {
                    return Err(Error::InvalidData(format!("{name} id {i} outside [0, {n})")));
                }
                if let Some(prev) = owner[i] {
                    return Err(Error::InvalidData(format!(
                        "split overlap: node {i} appears in {prev} and {name}"
                    )));
                }
                owner[i] = Some(name);
            }
        }
        Ok(())
    }

    /// Labeled nodes available to the lower level: train followed by val.
    pub fn visible(&self) -> Vec<usize> {
        self.train.iter().chain(&self.val).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub graph: Graph,
    pub splits: Splits,
}

/// Locations of the four dataset files.
#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
    pub splits: PathBuf,
}

impl DatasetPaths {
    /// `edges.txt`, `features.csv`, `labels.txt`, `splits.json` inside `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        DatasetPaths {
            edges: dir.join("edges.txt"),
            features: dir.join("features.csv"),
            labels: dir.join("labels.txt"),
            splits: dir.join("splits.json"),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_edges(path: &Path, text: &str, n: usize) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(path, line_no, format!("expected `u v`, found {} fields", fields.len())));
        }
        let mut ids = [0usize; 2];
        for (slot, field) in ids.iter_mut().zip(&fields) {
            *slot = field
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("invalid node id `{field}`")))?;
            if *slot >= n {
                return Err(parse_err(path, line_no, format!("node id {slot} outside [0, {n})")));
            }
        }
        if ids[0] == ids[1] {
            return Err(parse_err(path, line_no, format!("self-loop on node {}", ids[0])));
        }
        edges.push((ids[0], ids[1]));
    }
    Ok(edges)
}

fn parse_labels(path: &Path, text: &str) -> Result<Vec<usize>> {
    text.trim_end()
        .lines()
        .enumerate()
        .map(|(idx, line)| {
            let t = line.trim();
            t.parse()
                .map_err(|_| parse_err(path, idx + 1, format!("invalid label `{t}`")))
        })
        .collect()
}

fn parse_features(path: &Path, text: &str, n: usize) -> Result<DMatrix<f64>> {
    let body = text.trim_end();
    if body.lines().next().map(str::trim) == Some("identity") {
        if body.lines().count() > 1 {
            return Err(parse_err(path, 2, "unexpected content after `identity`"));
        }
        return Ok(DMatrix::identity(n, n));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (idx, line) in body.lines().enumerate() {
        let line_no = idx + 1;
        let row = line
            .split(',')
            .map(|f| {
                let f = f.trim();
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(path, line_no, format!("invalid real `{f}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected {} columns, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.len() != n {
        return Err(parse_err(
            path,
            rows.len(),
            format!("expected {n} feature rows (one per labeled node), found {}", rows.len()),
        ));
    }
    let d = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

/// Loads a dataset. The node count is the number of labels.
pub fn load_dataset(paths: &DatasetPaths) -> Result<DatasetBundle> {
    let labels = parse_labels(&paths.labels, &read_text(&paths.labels)?)?;
    let n = labels.len();
    if n == 0 {
        return Err(parse_err(&paths.labels, 1, "no labels"));
    }
    let features = parse_features(&paths.features, &read_text(&paths.features)?, n)?;
    let edges = parse_edges(&paths.edges, &read_text(&paths.edges)?, n)?;
    let splits: Splits = serde_json::from_str(&read_text(&paths.splits)?).map_err(|e| {
        parse_err(&paths.splits, e.line(), format!("invalid splits JSON: {e}"))
    })?;
    splits.validate(n)?;
    let graph = Graph::new(n, edges, features, labels)?;
    Ok(DatasetBundle { graph, splits })
}

/// Writes a bundle in the four text formats into `dir` (created if needed).
pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<DatasetPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DatasetPaths::in_dir(dir);
    let g = &bundle.graph;

    let mut edges = String::from("# u v\n");
    for &(u, v) in g.edges() {
        edges.push_str(&format!("{u} {v}\n"));
    }
    let mut feats = String::new();
    for row in g.features().row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        feats.push_str(&cells.join(","));
        feats.push('\n');
    }
    let labels: String = g.labels().iter().map(|y| format!("{y}\n")).collect();
    let splits = serde_json::to_string(&bundle.splits).expect("splits serialize");

    for (path, body) in [
        (&paths.edges, edges),
        (&paths.features, feats),
        (&paths.labels, labels),
        (&paths.splits, splits),
    ] {
        fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(paths)
}

/// Planted-partition graph parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmConfig {
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

impl Default for SbmConfig {
    fn default() -> Self {
        SbmConfig {
            n: 200,
            k: 4,
            p_in: 0.08,
            p_out: 0.02,
            feature_dim: 4,
            feature_noise: 0.5,
            seed: 0,
            train_per_class: 20,
            val_fraction: 0.3,
        }
    }
}

/// Samples a block-model graph with noisy one-hot class-mean features.
///
/// Class `c` holds nodes `[c·⌊n/K⌋, (c+1)·⌊n/K⌋)`; the last class also takes
/// the remainder. Splits: `min(train_per_class, |class|)` training nodes per
/// class, `round(val_fraction·n)` validation nodes, the rest test.
pub fn sbm_generate(cfg: &SbmConfig) -> Result<DatasetBundle> {
    let SbmConfig { n, k, p_in, p_out, feature_dim, feature_noise, .. } = *cfg;
    if n == 0 || k == 0 || k > n {
        return Err(Error::InvalidParameter(format!("need 1 <= K <= n, got n={n}, K={k}")));
    }
    if !(0.0 <= p_out && p_out <= p_in && p_in <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}"
        )));
    }
    if feature_dim < k {
        return Err(Error::InvalidParameter(format!(
            "feature_dim {feature_dim} must be >= K = {k}"
        )));
    }
    if !(feature_noise >= 0.0) || !(0.0..=1.0).contains(&cfg.val_fraction) {
        return Err(Error::InvalidParameter("feature_noise must be >= 0 and val_fraction in [0, 1]".into()));
    }
    let block = n / k;
    let labels: Vec<usize> = (0..n).map(|i| (i / block).min(k - 1)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let noise = Normal::new(0.0, feature_noise).expect("noise scale checked");
    let features = DMatrix::from_fn(n, feature_dim, |i, j| {
        let mean = if labels[i] == j { 1.0 } else { 0.0 };
        mean + noise.sample(&mut rng)
    });
    // from_fn walks column-major; the draw order is fixed either way.

    let mut train = Vec::new();
    let mut rest = Vec::new();
    for c in 0..k {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let take = cfg.train_per_class.min(members.len());
        train.extend_from_slice(&members[..take]);
        rest.extend_from_slice(&members[take..]);
    }
    let n_val = (cfg.val_fraction * n as f64).round() as usize;
    if n_val > rest.len() {
        return Err(Error::InvalidParameter(format!(
            "infeasible splits: {} training + {n_val} validation nodes exceed n = {n}",
            train.len()
        )));
    }
    rest.shuffle(&mut rng);
    let val = rest[..n_val].to_vec();
    let mut test = rest[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    test.sort_unstable();

    let graph = Graph::with_classes(n, edges, features, labels, k)?;
    Ok(DatasetBundle { graph, splits: Splits { train, val, test } })
}

/// Probability that an added edge is forced to join two different classes.
pub const CROSS_CLASS_BIAS: f64 = 0.9;

/// Adds `⌈rate·m⌉` new edges. Each is drawn between different classes with
/// probability [`CROSS_CLASS_BIAS`] (when such a non-edge remains), otherwise
/// uniformly among non-edges. Existing edges are never removed.
pub fn perturb_edges<R: Rng + ?Sized>(g: &Graph, rate: f64, rng: &mut R) -> Result<Graph> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!("perturbation rate must be in [0, 1], got {rate}")));
    }
    let n = g.num_nodes();
    let m = g.num_edges();
    let count = (rate * m as f64 - 1e-9).ceil().max(0.0) as usize;
    if count == 0 {
        return Ok(g.clone());
    }
    let total_pairs = n * n.saturating_sub(1) / 2;
    if count > total_pairs - m {
        return Err(Error::InvalidData(format!(
            "cannot add {count} edges: only {} non-edges remain",
            total_pairs - m
        )));
    }
    let labels = g.labels();
    let mut class_sizes = vec![0usize; g.num_classes()];
    for &y in labels {
        class_sizes[y] += 1;
    }
    let cross_pairs: usize = {
        let same: usize = class_sizes.iter().map(|&s| s * s.saturating_sub(1) / 2).sum();
        total_pairs - same
    };
    let mut existing: HashSet<(usize, usize)> = g.edges().iter().copied().collect();
    let mut cross_existing = g.edges().iter().filter(|&&(u, v)| labels[u] != labels[v]).count();
    let mut added = Vec::with_capacity(count);

    while added.len() < count {
        let want_cross = rng.random::<f64>() < CROSS_CLASS_BIAS && cross_existing < cross_pairs;
        let pair = if want_cross {
            draw_non_edge(n, rng, &existing, |u, v| labels[u] != labels[v], cross_pairs - cross_existing)
        } else {
            draw_non_edge(n, rng, &existing, |_, _| true, total_pairs - existing.len())
        };
        if labels[pair.0] != labels[pair.1] {
            cross_existing += 1;
        }
        existing.insert(pair);
        added.push(pair);
    }
    g.with_added_edges(&added)
}

/// Uniform non-edge among pairs accepted by `keep`. Uses rejection while
/// candidates are plentiful, enumeration otherwise. `available` must be > 0.
fn draw_non_edge<R: Rng + ?Sized>(
    n: usize,
    rng: &mut R,
    existing: &HashSet<(usize, usize)>,
    keep: impl Fn(usize, usize) -> bool,
    available: usize,
) -> (usize, usize) {
    let total_pairs = n * (n - 1) / 2;
    if available * 8 >= total_pairs {
        loop {
            let u = rng.random_range(0..n);
            let v = rng.random_range(0..n);
            if u == v {
                continue;
            }
            let pair = (u.min(v), u.max(v));
            if keep(pair.0, pair.1) && !existing.contains(&pair) {
                return pair;
            }
        }
    }
    let candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
        .filter(|&(u, v)| keep(u, v) && !existing.contains(&(u, v)))
        .collect();
    candidates[rng.random_range(0..candidates.len())]
}

/// A learned propagation matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredMatrix {
    Dense(DMatrix<f64>),
    RankOne(RankOnePerturbation),
}

const MATRIX_MAGIC: &[u8; 5] = b"OPTQ1";

/// `OPTQ1 | kind (0 dense, 1 rank-one) | u64 n | row-major f64 payload`, all
/// little-endian. Rank-one payload is `p` followed by `q`.
pub fn write_matrix<W: Write>(mut out: W, m: &StoredMatrix) -> std::io::Result<()> {
    out.write_all(MATRIX_MAGIC)?;
    match m {
        StoredMatrix::Dense(q) => {
            out.write_all(&[0u8])?;
            out.write_all(&(q.nrows() as u64).to_le_bytes())?;
            crate::classifier::write_row_major(&mut out, q)?;
        }
        StoredMatrix::RankOne(r) => {
            out.write_all(&[1u8])?;
            out.write_all(&(r.len() as u64).to_le_bytes())?;
            for v in r.p.iter().chain(r.q.iter()) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_matrix(bytes: &[u8]) -> Result<StoredMatrix> {
    let mut cur = ByteCursor::new(bytes);
    if cur.take(MATRIX_MAGIC.len())? != MATRIX_MAGIC {
        return Err(Error::Format("matrix magic mismatch (expected OPTQ1)".into()));
    }
    let kind = cur.take(1)?[0];
    let n = cur.read_len()?;
    let out = match kind {
        0 => StoredMatrix::Dense(cur.read_row_major(n, n)?),
        1 => {
            let p = DVector::from_vec(cur.read_f64s(n)?);
            let q = DVector::from_vec(cur.read_f64s(n)?);
            StoredMatrix::RankOne(RankOnePerturbation { p, q })
        }
        other => return Err(Error::Format(format!("unknown matrix kind byte {other}"))),
    };
    cur.finish()?;
    Ok(out)
}

pub fn save_matrix(path: &Path, m: &StoredMatrix) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_matrix(&mut w, m)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: &Path) -> Result<StoredMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_matrix(&bytes)
}

/// Bounds-checked little-endian reader.
pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteCursor { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated: need {len} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn read_len(&mut self) -> Result<usize> {
        let raw = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(raw)
            .ok()
            .filter(|&v| v <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("implausible dimension {raw}")))
    }

    pub(crate) fn read_f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(8)
            .ok_or_else(|| Error::Format("payload size overflow".into()))?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn read_row_major(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("payload size overflow".into()))?;
        let vals = self.read_f64s(count)?;
        Ok(DMatrix::from_row_slice(rows, cols, &vals))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_files(dir: &Path, edges: &str, feats: &str, labels: &str, splits: &str) -> DatasetPaths {
        let paths = DatasetPaths::in_dir(dir);
        fs::write(&paths.edges, edges).unwrap();
        fs::write(&paths.features, feats).unwrap();
        fs::write(&paths.labels, labels).unwrap();
        fs::write(&paths.splits, splits).unwrap();
        paths
    }

    const SPLITS: &str = r#"{"train":[0],"val":[],"test":[1]}"#;

    #[test]
    fn minimal_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_files(dir.path(), "0 1\n", "0.5\n-1.0\n", "0\n1\n", SPLITS);
        let b = load_dataset(&paths).unwrap();
        assert_eq!(b.graph.num_nodes(), 2);
        assert_eq!(b.graph.num_edges(), 1);
        assert_eq!(b.graph.feature_dim(), 1);
    }

    #[test]
    fn duplicate_edges_collapse() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_files(dir.path(), "# c\n0 1\n1 0\n0 1 # again\n\n", "1\n2\n", "0\n1\n", SPLITS);
        assert_eq!(load_dataset(&paths).unwrap().graph.edges(), &[(0, 1)]);
    }

    #[test]
    fn identity_features() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_files(dir.path(), "0 1\n", "identity\n", "0\n1\n", SPLITS);
        let b = load_dataset(&paths).unwrap();
        assert_eq!(b.graph.features(), &DMatrix::identity(2, 2));
    }

    #[test]
    fn positional_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_files(dir.path(), "0 1\n0 x\n", "1\n2\n", "0\n1\n", SPLITS);
        match load_dataset(&paths) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let paths = write_files(dir.path(), "0 1\n\n1 5\n", "1\n2\n", "0\n1\n", SPLITS);
        assert!(matches!(load_dataset(&paths), Err(Error::Parse { line: 3, .. })));
        let paths = write_files(dir.path(), "0 1\n", "1,2\n3\n", "0\n1\n", SPLITS);
        assert!(matches!(load_dataset(&paths), Err(Error::Parse { line: 2, .. })));
        let paths = write_files(dir.path(), "0 1\n", "1\n", "0\n1\n", SPLITS);
        assert!(matches!(load_dataset(&paths), Err(Error::Parse { .. })));
        let paths = write_files(dir.path(), "0 1\n", "1\n2\n", "0\nz\n", SPLITS);
        assert!(matches!(load_dataset(&paths), Err(Error::Parse { line: 2, .. })));
        let paths = write_files(dir.path(), "0 1\n", "1\n2\n", "0\n1\n", r#"{"train":[0],"val":[0],"test":[]}"#);
        assert!(matches!(load_dataset(&paths), Err(Error::InvalidData(_))));
        let paths = write_files(dir.path(), "0 1\n", "1\n2\n", "0\n1\n", r#"{"train":[0],"val":[],"test":[2]}"#);
        assert!(matches!(load_dataset(&paths), Err(Error::InvalidData(_))));
    }

    #[test]
    fn sbm_extremes() {
        let none = SbmConfig { n: 40, k: 2, p_in: 0.0, p_out: 0.0, feature_dim: 2, val_fraction: 0.0, train_per_class: 5, ..Default::default() };
        assert_eq!(sbm_generate(&none).unwrap().graph.num_edges(), 0);
        let cliques = SbmConfig { p_in: 1.0, ..none.clone() };
        assert_eq!(sbm_generate(&cliques).unwrap().graph.num_edges(), 2 * (20 * 19 / 2));
        let a = sbm_generate(&SbmConfig::default()).unwrap();
        let b = sbm_generate(&SbmConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sbm_splits() {
        let cfg = SbmConfig { n: 203, k: 4, ..Default::default() };
        let b = sbm_generate(&cfg).unwrap();
        b.splits.validate(203).unwrap();
        let labels = b.graph.labels();
        assert_eq!(labels.iter().filter(|&&y| y == 3).count(), 50 + 3);
        for c in 0..4 {
            assert_eq!(b.splits.train.iter().filter(|&&i| labels[i] == c).count(), 20);
        }
        assert_eq!(b.splits.val.len(), 61);
        assert_eq!(b.splits.train.len() + b.splits.val.len() + b.splits.test.len(), 203);
        let bad = SbmConfig { n: 30, k: 2, val_fraction: 0.5, ..Default::default() };
        assert!(sbm_generate(&bad).is_err());
        assert!(sbm_generate(&SbmConfig { p_out: 0.5, p_in: 0.1, ..Default::default() }).is_err());
    }

    #[test]
    fn perturbation_counts() {
        let b = sbm_generate(&SbmConfig { n: 60, k: 2, p_in: 0.2, p_out: 0.05, feature_dim: 2, ..Default::default() }).unwrap();
        let g = &b.graph;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(&perturb_edges(g, 0.0, &mut rng).unwrap(), g);
        let m = g.num_edges();
        let rate = 5.0 / m as f64;
        let p = perturb_edges(g, rate, &mut rng).unwrap();
        assert_eq!(p.num_edges(), m + 5);
        assert!(g.edges().iter().all(|&(u, v)| p.has_edge(u, v)));
        assert!(perturb_edges(g, 1.5, &mut rng).is_err());
    }

    #[test]
    fn perturbation_too_dense() {
        let x = DMatrix::zeros(4, 1);
        let g = Graph::new(4, [(0, 1), (1, 2), (2, 3), (0, 3)], x, vec![0, 1, 0, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = perturb_edges(&g, 0.5, &mut rng).unwrap();
        assert_eq!(full.num_edges(), 6);
        assert!(matches!(perturb_edges(&full, 0.2, &mut rng), Err(Error::InvalidData(_))));
    }

    #[test]
    fn matrix_roundtrip_and_errors() {
        let m = DMatrix::from_fn(5, 5, |i, j| (i as f64 + 1.0) / (j as f64 + 3.0) - 0.1);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &StoredMatrix::Dense(m.clone())).unwrap();
        assert_eq!(buf.len(), 5 + 1 + 8 + 25 * 8);
        assert_eq!(&buf[..6], b"OPTQ1\0");
        assert_eq!(f64::from_le_bytes(buf[14..22].try_into().unwrap()), m[(0, 0)]);
        assert_eq!(f64::from_le_bytes(buf[22..30].try_into().unwrap()), m[(0, 1)]);
        assert_eq!(read_matrix(&buf).unwrap(), StoredMatrix::Dense(m));
        assert!(matches!(read_matrix(&buf[..buf.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(read_matrix(&buf[..3]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_matrix(&bad).is_err());
        bad = buf.clone();
        bad[5] = 7;
        assert!(read_matrix(&bad).is_err());
        buf.push(0);
        assert!(read_matrix(&buf).is_err());
    }
}
