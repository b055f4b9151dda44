//! Dense primitives for exact and gathered vocabulary projection.
//!
//! Every logit is produced by the same kernel: a dot product accumulated in
//! f32 sequentially over the embedding dimension (ascending index), followed
//! by a single bias add. Full and gathered projections therefore agree bit
//! for bit on shared columns, regardless of how rows and column tiles are
//! distributed over threads.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};

pub type TokenId = u32;

/// Logit value written at inactive vocabulary positions.
pub const NEG_MASK: f32 = f32::MIN;

/// Output columns handled by one parallel task.
const COLUMN_TILE: usize = 2048;

#[inline]
pub fn is_masked(x: f32) -> bool {
    x <= NEG_MASK / 2.0
}

/// Sequential f32 dot product, ascending index.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Counts scalar multiplications performed by the projection kernels.
#[derive(Debug, Default)]
pub struct OpCounter(AtomicU64);

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

fn check_finite(what: &str, values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::invalid(format!("{what}[{i}] is not finite"))),
        None => Ok(()),
    }
}

/// Projection weights `W` (d x N, stored column-major) and bias `b` (N).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    d: usize,
    n: usize,
    columns: Vec<f32>,
    bias: Vec<f32>,
}

impl WeightMatrix {
    /// `columns` holds N consecutive columns of `d` values each.
    pub fn new(d: usize, n: usize, columns: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(Error::invalid("weight matrix needs d >= 1 and N >= 1"));
        }
        check_dim("weight column data", d * n, columns.len())?;
        check_dim("bias length", n, bias.len())?;
        check_finite("weights", &columns)?;
        check_finite("bias", &bias)?;
        Ok(Self {
            d,
            n,
            columns,
            bias,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn column(&self, j: usize) -> &[f32] {
        &self.columns[j * self.d..(j + 1) * self.d]
    }

    pub fn columns_raw(&self) -> &[f32] {
        &self.columns
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }
}

/// `M` hidden context vectors of dimension `d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenBatch {
    d: usize,
    vectors: Vec<f32>,
}

impl HiddenBatch {
    pub fn new(d: usize, vectors: Vec<f32>) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("hidden dimension must be >= 1"));
        }
        if vectors.is_empty() || !vectors.len().is_multiple_of(d) {
            return Err(Error::invalid(format!(
                "hidden batch holds {} values, not a positive multiple of d={d}",
                vectors.len()
            )));
        }
        check_finite("hidden", &vectors)?;
        Ok(Self { d, vectors })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let d = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or_else(|| Error::invalid("hidden batch needs at least one row"))?;
        let mut vectors = Vec::with_capacity(d * rows.len());
        for r in rows {
            check_dim("hidden row length", d, r.as_ref().len())?;
            vectors.extend_from_slice(r.as_ref());
        }
        Self::new(d, vectors)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Row count `M`.
    pub fn len(&self) -> usize {
        self.vectors.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn row(&self, m: usize) -> &[f32] {
        &self.vectors[m * self.d..(m + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.vectors.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vectors
    }
}

/// Plain row-major f32 matrix (reduced logits, probabilities).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        check_dim("matrix data", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, m: usize) -> &[f32] {
        &self.data[m * self.cols..(m + 1) * self.cols]
    }

    pub fn get(&self, m: usize, j: usize) -> f32 {
        self.data[m * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact panics on zero, and a zero-column matrix has no data anyway
        self.data.chunks_exact(self.cols.max(1))
    }

    /// Column selection: `out[m][k] = self[m][ids[k]]`.
    pub fn select_columns(&self, ids: &[TokenId]) -> Result<Matrix> {
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.cols) {
            return Err(Error::invalid(format!(
                "column id {bad} out of range for {} columns",
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * ids.len());
        for row in self.iter_rows().take(self.rows) {
            data.extend(ids.iter().map(|&id| row[id as usize]));
        }
        Matrix::new(self.rows, ids.len(), data)
    }
}

/// Full-width logits, possibly masked outside `active`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMatrix {
    values: Matrix,
    active: Vec<TokenId>,
}

impl LogitsMatrix {
    /// Unmasked logits; the active list is empty (all tokens active).
    pub fn dense(values: Matrix) -> Self {
        Self {
            values,
            active: Vec::new(),
        }
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    /// Sorted unique ids that carry real logits; empty means all of them.
    pub fn active(&self) -> &[TokenId] {
        &self.active
    }

    pub fn rows(&self) -> usize {
        self.values.rows
    }

    pub fn cols(&self) -> usize {
        self.values.cols
    }

    pub fn row(&self, m: usize) -> &[f32] {
        self.values.row(m)
    }
}

fn project_columns(
    h: &HiddenBatch,
    w: &WeightMatrix,
    ids: Option<&[TokenId]>,
    counter: Option<&OpCounter>,
) -> Matrix {
    let cols = ids.map_or(w.n, <[TokenId]>::len);
    let mut out = vec![0.0f32; h.len() * cols];
    if cols == 0 {
        return Matrix {
            rows: h.len(),
            cols,
            data: out,
        };
    }
    out.par_chunks_mut(cols)
        .zip(h.vectors.par_chunks_exact(h.d))
        .for_each(|(out_row, hrow)| {
            out_row
                .par_chunks_mut(COLUMN_TILE)
                .enumerate()
                .for_each(|(tile, out_tile)| {
                    let base = tile * COLUMN_TILE;
                    let mut mults = 0u64;
                    for (k, slot) in out_tile.iter_mut().enumerate() {
                        let j = match ids {
                            Some(ids) => ids[base + k] as usize,
                            None => base + k,
                        };
                        let col = w.column(j);
                        mults += col.len() as u64;
                        *slot = dot(col, hrow) + w.bias[j];
                    }
                    if let Some(c) = counter {
                        c.add(mults);
                    }
                });
        });
    Matrix {
        rows: h.len(),
        cols,
        data: out,
    }
}

/// Exact projection `z = W^T h + b` for every row of `h`.
pub fn full_project(h: &HiddenBatch, w: &WeightMatrix) -> Result<LogitsMatrix> {
    full_project_counted(h, w, None)
}

pub fn full_project_counted(
    h: &HiddenBatch,
    w: &WeightMatrix,
    counter: Option<&OpCounter>,
) -> Result<LogitsMatrix> {
    check_dim("hidden dimension vs weights", w.d, h.d)?;
    Ok(LogitsMatrix::dense(project_columns(h, w, None, counter)))
}

/// Projection restricted to the columns in `active`; bias is gathered alongside.
pub fn gather_project(h: &HiddenBatch, w: &WeightMatrix, active: &[TokenId]) -> Result<Matrix> {
    gather_project_counted(h, w, active, None)
}

pub fn gather_project_counted(
    h: &HiddenBatch,
    w: &WeightMatrix,
    active: &[TokenId],
    counter: Option<&OpCounter>,
) -> Result<Matrix> {
    check_dim("hidden dimension vs weights", w.d, h.d)?;
    if active.is_empty() {
        return Err(Error::invalid("active token list is empty"));
    }
    if let Some(&bad) = active.iter().find(|&&id| id as usize >= w.n) {
        return Err(Error::invalid(format!(
            "token id {bad} out of range for vocabulary of {}",
            w.n
        )));
    }
    Ok(project_columns(h, w, Some(active), counter))
}

/// Writes reduced logits back to full width; every other position gets [`NEG_MASK`].
pub fn scatter_logits(reduced: &Matrix, active: &[TokenId], n: usize) -> Result<LogitsMatrix> {
    check_dim("active list vs reduced columns", reduced.cols, active.len())?;
    let mut seen = vec![false; n];
    for &id in active {
        let slot = seen.get_mut(id as usize).ok_or_else(|| {
            Error::invalid(format!("token id {id} out of range for vocabulary of {n}"))
        })?;
        if *slot {
            return Err(Error::invalid(format!(
                "duplicate token id {id} in active list"
            )));
        }
        *slot = true;
    }
    let mut data = vec![NEG_MASK; reduced.rows * n];
    for (m, row) in reduced.iter_rows().take(reduced.rows).enumerate() {
        let out = &mut data[m * n..(m + 1) * n];
        for (&id, &v) in active.iter().zip(row) {
            out[id as usize] = v;
        }
    }
    let mut sorted = active.to_vec();
    sorted.sort_unstable();
    Ok(LogitsMatrix {
        values: Matrix {
            rows: reduced.rows,
            cols: n,
            data,
        },
        active: sorted,
    })
}

/// Row-wise softmax; masked positions receive probability exactly 0.
pub fn softmax_rows(z: &LogitsMatrix) -> Result<Matrix> {
    let cols = z.cols();
    let mut data = vec![0.0f32; z.rows() * cols];
    for (m, (row, out)) in z
        .values
        .iter_rows()
        .zip(data.chunks_exact_mut(cols.max(1)))
        .enumerate()
    {
        let max = row
            .iter()
            .copied()
            .filter(|&v| !is_masked(v))
            .fold(None, |acc: Option<f32>, v| {
                Some(acc.map_or(v, |a| a.max(v)))
            })
            .ok_or_else(|| Error::invalid(format!("row {m} is fully masked")))?;
        let mut sum = 0.0f64;
        for (o, &v) in out.iter_mut().zip(row) {
            if !is_masked(v) {
                let e = (v - max).exp();
                *o = e;
                sum += e as f64;
            }
        }
        let inv = 1.0 / sum;
        for o in out.iter_mut() {
            *o = (*o as f64 * inv) as f32;
        }
    }
    Matrix::new(z.rows(), cols, data)
}

/// Orders `(id, value)` pairs by value descending, then id ascending.
#[inline]
fn rank_order(a: &(TokenId, f32), b: &(TokenId, f32)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Top `k` ids of one row, highest value first, ties to the lower id.
pub fn topk_row(row: &[f32], k: usize) -> Vec<TokenId> {
    let mut pairs: Vec<(TokenId, f32)> = row
        .iter()
        .enumerate()
        .map(|(j, &v)| (j as TokenId, v))
        .collect();
    if k < pairs.len() {
        pairs.select_nth_unstable_by(k, rank_order);
        pairs.truncate(k);
    }
    pairs.sort_unstable_by(rank_order);
    // a fresh allocation; collecting from `into_iter` would keep the full-row capacity
    pairs.iter().map(|&(id, _)| id).collect()
}

pub fn topk_rows(p: &Matrix, k: usize) -> Result<Vec<Vec<TokenId>>> {
    if k == 0 || k > p.cols {
        return Err(Error::invalid(format!(
            "top-k needs 1 <= K <= N, got K={k} with N={}",
            p.cols
        )));
    }
    Ok(p.data
        .par_chunks_exact(p.cols)
        .map(|row| topk_row(row, k))
        .collect())
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(row: &[f32]) -> TokenId {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best as TokenId
}
