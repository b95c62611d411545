//! Information bottleneck: PCA to `d` dimensions followed by an independent
//! 1-D k-means per dimension (d-k-means). Dimension `j` receives
//! `ceil(K * v_j / v_0)` centroids where `v_j` is its explained variance;
//! the code is the concatenation of one one-hot block per dimension.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, RecordBuf, RecordCursor};
use crate::error::{Error, Result};
use crate::rng;

pub const KMEANS_MAX_ITERS: usize = 100;

/// Which parts of the bottleneck are active; `None` and `Pca` exist for the
/// ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckMode {
    None,
    Pca,
    PcaDkmeans,
}

impl std::str::FromStr for BottleneckMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "pca" => Ok(Self::Pca),
            "pca+dkmeans" | "pca_dkmeans" => Ok(Self::PcaDkmeans),
            other => Err(Error::config(format!("unknown bottleneck mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for BottleneckMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Pca => "pca",
            Self::PcaDkmeans => "pca+dkmeans",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerModel {
    pub mode: BottleneckMode,
    pub input_dim: usize,
    pub d: usize,
    pub k: usize,
    pub mean: Vec<f64>,
    /// `d` orthonormal rows of length `input_dim`.
    pub projection: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    /// Sorted, distinct scalar centroids for each retained dimension.
    pub centroid_tables: Vec<Vec<f64>>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QuantizedCode {
    /// Selected centroid per block.
    pub indices: Vec<u32>,
    pub block_sizes: Vec<usize>,
}

impl QuantizedCode {
    pub fn len(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_one_hot(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        let mut base = 0;
        for (&i, &size) in self.indices.iter().zip(&self.block_sizes) {
            out[base + i as usize] = 1.0;
            base += size;
        }
        out
    }
}

/// Budget for dimension `j`: `ceil(K v_j / v_0)` clamped to `[1, K]`.
pub fn centroid_budget(k: usize, v_j: f64, v_0: f64) -> usize {
    if !(v_0 > 0.0) || !(v_j > 0.0) {
        return 1;
    }
    ((k as f64 * v_j / v_0).ceil() as usize).clamp(1, k)
}

/// Full q: PCA + d-k-means.
pub fn fit_quantizer(tokens: &[Vec<f64>], d: usize, k: usize, seed: u64) -> Result<QuantizerModel> {
    fit_bottleneck(tokens, BottleneckMode::PcaDkmeans, d, k, seed)
}

pub fn fit_bottleneck(
    tokens: &[Vec<f64>],
    mode: BottleneckMode,
    d: usize,
    k: usize,
    seed: u64,
) -> Result<QuantizerModel> {
    let n = tokens.len();
    let dim = tokens.first().map_or(0, Vec::len);
    if dim == 0 || tokens.iter().any(|t| t.len() != dim) {
        return Err(Error::invalid(
            "tokens must be non-empty and share one dimension",
        ));
    }
    if tokens.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite token value"));
    }
    if mode == BottleneckMode::None {
        return Ok(QuantizerModel {
            mode,
            input_dim: dim,
            d: dim,
            k,
            mean: vec![0.0; dim],
            projection: Vec::new(),
            variances: Vec::new(),
            centroid_tables: Vec::new(),
            warnings: Vec::new(),
        });
    }
    if d == 0 || d > dim {
        return Err(Error::config(format!("d = {d} must lie in 1..={dim}")));
    }
    if k == 0 {
        return Err(Error::config("K must be >= 1"));
    }
    if n < k || n < d {
        return Err(Error::config(format!(
            "{n} tokens is fewer than K = {k} or d = {d}"
        )));
    }

    let (mean, projection, variances) = pca(tokens, d);
    let mut model = QuantizerModel {
        mode,
        input_dim: dim,
        d,
        k,
        mean,
        projection,
        variances,
        centroid_tables: Vec::new(),
        warnings: Vec::new(),
    };
    if mode == BottleneckMode::Pca {
        return Ok(model);
    }

    let projected: Vec<Vec<f64>> = tokens.iter().map(|t| model.project(t)).collect();
    let v0 = model.variances[0];
    for j in 0..d {
        let column: Vec<f64> = projected.iter().map(|p| p[j]).collect();
        let budget = centroid_budget(k, model.variances[j], v0);
        let mut r = rng::stream(seed, j as u64);
        let table = kmeans_1d(&column, budget, &mut r);
        if table.len() < budget {
            let msg = format!(
                "dimension {j}: only {} distinct centroids for a budget of {budget}",
                table.len()
            );
            warn!("{msg}");
            model.warnings.push(msg);
        }
        model.centroid_tables.push(table);
    }
    Ok(model)
}

/// Mean, top-`d` principal directions (rows), and their population
/// variances in non-increasing order.
fn pca(tokens: &[Vec<f64>], d: usize) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
    let n = tokens.len() as f64;
    let dim = tokens[0].len();
    let mut mean = vec![0.0; dim];
    for t in tokens {
        for (m, x) in mean.iter_mut().zip(t) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for t in tokens {
        let c: Vec<f64> = t.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for a in 0..dim {
            for b in a..dim {
                cov[(a, b)] += c[a] * c[b];
            }
        }
    }
    for a in 0..dim {
        for b in a..dim {
            let v = cov[(a, b)] / n;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut rows = Vec::with_capacity(d);
    let mut vars = Vec::with_capacity(d);
    for &i in order.iter().take(d) {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let pivot = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        rows.push(v);
        vars.push(eig.eigenvalues[i].max(0.0));
    }
    // enforce non-increasing after clamping
    for j in 1..vars.len() {
        if vars[j] > vars[j - 1] {
            vars[j] = vars[j - 1];
        }
    }
    (mean, rows, vars)
}

/// 1-D k-means with k-means++ seeding, iterated to an assignment fixed
/// point (at most [`KMEANS_MAX_ITERS`] rounds). Returns sorted distinct
/// centroids; fewer than `c` when the data has fewer distinct values.
pub fn kmeans_1d<R: Rng + ?Sized>(values: &[f64], c: usize, rng: &mut R) -> Vec<f64> {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let c = c.min(distinct.len());
    if c == 0 {
        return Vec::new();
    }
    if c == distinct.len() {
        return distinct;
    }

    let mut centroids = Vec::with_capacity(c);
    centroids.push(values[rng.random_range(0..values.len())]);
    let mut d2: Vec<f64> = values.iter().map(|v| (v - centroids[0]).powi(2)).collect();
    while centroids.len() < c {
        let next = values[rng::categorical(&d2, rng)];
        centroids.push(next);
        for (w, v) in d2.iter_mut().zip(values) {
            *w = w.min((v - next).powi(2));
        }
    }
    centroids.sort_by(f64::total_cmp);

    let mut assign = vec![usize::MAX; values.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (a, &v) in assign.iter_mut().zip(values) {
            let best = nearest_sorted(&centroids, v);
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; c];
        let mut counts = vec![0usize; c];
        for (&a, &v) in assign.iter().zip(values) {
            sums[a] += v;
            counts[a] += 1;
        }
        let mut empty = Vec::new();
        for i in 0..c {
            if counts[i] > 0 {
                centroids[i] = sums[i] / counts[i] as f64;
            } else {
                empty.push(i);
            }
        }
        // An emptied centroid restarts at the value farthest from every
        // other centroid, so no two centroids can merge.
        for i in empty {
            let others: Vec<f64> = (0..c).filter(|&j| j != i).map(|j| centroids[j]).collect();
            let far = values
                .iter()
                .copied()
                .max_by(|a, b| {
                    let gap = |x: f64| {
                        others
                            .iter()
                            .map(|o| (x - o).abs())
                            .fold(f64::INFINITY, f64::min)
                    };
                    gap(*a).total_cmp(&gap(*b))
                })
                .unwrap();
            centroids[i] = far;
        }
        // 1-D Lloyd updates preserve order; re-sort guards against rounding
        centroids.sort_by(f64::total_cmp);
    }
    centroids.dedup();
    centroids
}

/// Nearest entry of an ascending table; equidistant ties go to the lower
/// index.
pub fn nearest_sorted(table: &[f64], x: f64) -> usize {
    let hi = table.partition_point(|&c| c < x);
    if hi == 0 {
        return 0;
    }
    if hi == table.len() {
        return table.len() - 1;
    }
    if x - table[hi - 1] <= table[hi] - x {
        hi - 1
    } else {
        hi
    }
}

impl QuantizerModel {
    pub fn block_sizes(&self) -> Vec<usize> {
        self.centroid_tables.iter().map(Vec::len).collect()
    }

    /// Length of the concatenated one-hot code.
    pub fn code_dim(&self) -> usize {
        self.centroid_tables.iter().map(Vec::len).sum()
    }

    /// Dimension of the vector handed to the lexical embedder in this mode.
    pub fn feature_dim(&self) -> usize {
        match self.mode {
            BottleneckMode::None => self.input_dim,
            BottleneckMode::Pca => self.d,
            BottleneckMode::PcaDkmeans => self.code_dim(),
        }
    }

    pub fn project(&self, token: &[f64]) -> Vec<f64> {
        self.projection
            .iter()
            .map(|row| {
                row.iter()
                    .zip(token)
                    .zip(&self.mean)
                    .map(|((w, x), m)| w * (x - m))
                    .sum()
            })
            .collect()
    }

    fn check_input(&self, token: &[f32]) -> Result<Vec<f64>> {
        if token.len() != self.input_dim {
            return Err(Error::Shape {
                expected: self.input_dim,
                got: token.len(),
            });
        }
        if token.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite token value"));
        }
        Ok(token.iter().map(|&x| x as f64).collect())
    }

    pub fn quantize(&self, token: &[f32]) -> Result<QuantizedCode> {
        if self.mode != BottleneckMode::PcaDkmeans {
            return Err(Error::invalid(format!(
                "quantizer in mode {} has no codebooks",
                self.mode
            )));
        }
        let x = self.check_input(token)?;
        let p = self.project(&x);
        Ok(QuantizedCode {
            indices: self
                .centroid_tables
                .iter()
                .zip(&p)
                .map(|(table, &v)| nearest_sorted(table, v) as u32)
                .collect(),
            block_sizes: self.block_sizes(),
        })
    }

    /// Input features for the lexical embedder.
    pub fn features(&self, token: &[f32]) -> Result<Vec<f64>> {
        match self.mode {
            BottleneckMode::None => self.check_input(token),
            BottleneckMode::Pca => Ok(self.project(&self.check_input(token)?)),
            BottleneckMode::PcaDkmeans => Ok(self.quantize(token)?.to_one_hot()),
        }
    }

    /// Fraction of distinct tokens whose code is shared with another
    /// distinct token.
    pub fn collision_rate(&self, tokens: &[Vec<f32>]) -> Result<f64> {
        let mut distinct: Vec<&Vec<f32>> = tokens.iter().collect();
        distinct.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        distinct.dedup();
        if distinct.is_empty() {
            return Ok(0.0);
        }
        let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
        for t in &distinct {
            *counts.entry(self.quantize(t)?.indices).or_default() += 1;
        }
        let collided: usize = counts.values().filter(|&&c| c > 1).sum();
        Ok(collided as f64 / distinct.len() as f64)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantizerHeader {
    kind: String,
    count: usize,
    mode: BottleneckMode,
    input_dim: usize,
    d: usize,
    k: usize,
    block_sizes: Vec<usize>,
    warnings: Vec<String>,
}

/// JSON header followed by the mean, variances, projection rows and
/// centroid tables as f64 records.
pub fn write_quantizer(path: &Path, model: &QuantizerModel) -> Result<()> {
    let mut records = Vec::new();
    records.push({
        let mut r = RecordBuf::new();
        r.f64s(&model.mean);
        r
    });
    records.push({
        let mut r = RecordBuf::new();
        r.f64s(&model.variances);
        r
    });
    for row in model.projection.iter().chain(&model.centroid_tables) {
        let mut r = RecordBuf::new();
        r.f64s(row);
        records.push(r);
    }
    let header = QuantizerHeader {
        kind: "quantizer".into(),
        count: records.len(),
        mode: model.mode,
        input_dim: model.input_dim,
        d: model.d,
        k: model.k,
        block_sizes: model.block_sizes(),
        warnings: model.warnings.clone(),
    };
    container::write_container(path, &header, records)
}

pub fn read_quantizer(path: &Path) -> Result<QuantizerModel> {
    let (h, records): (QuantizerHeader, _) = container::read_container(path)?;
    container::check_kind(&h.kind, "quantizer", h.count, records.len())?;
    let mut vecs = records
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut c = RecordCursor::new(b, i);
            let v = c.f64s()?;
            c.finish()?;
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let bad = |m: &str| Error::parse("line 2", m.to_string());
    let mean = vecs.next().ok_or_else(|| bad("missing mean"))?;
    let variances = vecs.next().ok_or_else(|| bad("missing variances"))?;
    let n_proj = if h.mode == BottleneckMode::None {
        0
    } else {
        h.d
    };
    let projection: Vec<Vec<f64>> = vecs.by_ref().take(n_proj).collect();
    let centroid_tables: Vec<Vec<f64>> = vecs.collect();
    if projection.len() != n_proj
        || mean.len() != h.input_dim
        || centroid_tables
            .iter()
            .map(Vec::len)
            .ne(h.block_sizes.iter().copied())
    {
        return Err(bad("tables inconsistent with header"));
    }
    Ok(QuantizerModel {
        mode: h.mode,
        input_dim: h.input_dim,
        d: h.d,
        k: h.k,
        mean,
        projection,
        variances,
        centroid_tables,
        warnings: h.warnings,
    })
}
