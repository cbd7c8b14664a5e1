//! Dense f64 kernels: matrices, permutations and the normalisation /
//! activation operators that commute with feature permutations.
//!
//! All reductions run in ascending index order so that the same inputs give
//! bit-identical outputs whether a matrix product is split across threads,
//! across pipeline shards, or not split at all.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EeError, Result};
use crate::exec::Exec;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const RMS_NORM_EPS: f64 = 1e-6;

/// Products with at least this many multiply-adds are split by rows.
const PAR_MATMUL_WORK: usize = 1 << 18;

/// Row-major matrix of f64.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor2({}x{})", self.rows, self.cols)
    }
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(EeError::Shape(format!(
                "{}x{} tensor needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// A single-row tensor, the storage form for bias and gain vectors.
    pub fn row_vector(v: Vec<f64>) -> Self {
        Tensor2 {
            rows: 1,
            cols: v.len(),
            data: v,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(EeError::Shape("ragged rows".into()));
        }
        Ok(Tensor2 {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.shape() != other.shape() {
            return Err(EeError::Shape(format!(
                "cannot add {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor2 { data, ..*self })
    }

    pub fn add_assign(&mut self, other: &Tensor2) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Largest absolute elementwise difference; `INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor2) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `out[perm(r)][col_perm(c)] = self[r][c]`, i.e. `P_row · A · P_colᵀ`.
    /// `None` leaves that axis in place.
    pub fn permuted(&self, row_perm: Option<&PermTable>, col_perm: Option<&PermTable>) -> Tensor2 {
        if let Some(p) = row_perm {
            assert_eq!(p.len(), self.rows, "row permutation size");
        }
        if let Some(p) = col_perm {
            assert_eq!(p.len(), self.cols, "column permutation size");
        }
        let mut out = Tensor2::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let rr = row_perm.map_or(r, |p| p.apply(r));
            let src = self.row(r);
            let dst = &mut out.data[rr * self.cols..(rr + 1) * self.cols];
            match col_perm {
                Some(p) => {
                    for (c, &v) in src.iter().enumerate() {
                        dst[p.apply(c)] = v;
                    }
                }
                None => dst.copy_from_slice(src),
            }
        }
        out
    }

    pub fn permute_cols(&self, p: &PermTable) -> Tensor2 {
        self.permuted(None, Some(p))
    }

    pub fn permute_rows(&self, p: &PermTable) -> Tensor2 {
        self.permuted(Some(p), None)
    }

    pub fn select_rows(&self, rows: std::ops::Range<usize>) -> Tensor2 {
        Tensor2 {
            rows: rows.len(),
            cols: self.cols,
            data: self.data[rows.start * self.cols..rows.end * self.cols].to_vec(),
        }
    }
}

/// A bijection on `0..n`; `map[i]` is the image of `i`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct PermTable {
    map: Vec<u32>,
}

impl fmt::Debug for PermTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PermTable{:?}", self.map)
    }
}

impl TryFrom<Vec<u32>> for PermTable {
    type Error = EeError;

    fn try_from(map: Vec<u32>) -> Result<Self> {
        PermTable::new(map)
    }
}

impl From<PermTable> for Vec<u32> {
    fn from(p: PermTable) -> Self {
        p.map
    }
}

impl PermTable {
    pub fn new(map: Vec<u32>) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &m in &map {
            let m = m as usize;
            if m >= n || seen[m] {
                return Err(EeError::Config(format!(
                    "not a permutation of 0..{n}: {map:?}"
                )));
            }
            seen[m] = true;
        }
        Ok(PermTable { map })
    }

    pub fn identity(n: usize) -> Self {
        PermTable {
            map: (0..n as u32).collect(),
        }
    }

    /// Uniform draw via Fisher-Yates.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut map: Vec<u32> = (0..n as u32).collect();
        map.shuffle(rng);
        PermTable { map }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.map
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &m)| i == m as usize)
    }

    #[inline]
    pub fn apply(&self, i: usize) -> usize {
        self.map[i] as usize
    }

    pub fn inverse(&self) -> PermTable {
        let mut inv = vec![0u32; self.map.len()];
        for (i, &m) in self.map.iter().enumerate() {
            inv[m as usize] = i as u32;
        }
        PermTable { map: inv }
    }

    /// `(self ∘ other)(i) = self(other(i))`.
    pub fn compose(&self, other: &PermTable) -> PermTable {
        assert_eq!(self.len(), other.len());
        PermTable {
            map: other.map.iter().map(|&i| self.map[i as usize]).collect(),
        }
    }

    /// Map every id through the table.
    pub fn apply_ids(&self, ids: &[u32]) -> Vec<u32> {
        ids.iter().map(|&i| self.map[i as usize]).collect()
    }

    /// Move entry `i` of `v` to position `map[i]`, i.e. `P · v`.
    pub fn permute_vec<T: Copy + Default>(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.map.len());
        let mut out = vec![T::default(); v.len()];
        for (i, &x) in v.iter().enumerate() {
            out[self.map[i] as usize] = x;
        }
        out
    }

    pub fn swap(&mut self, i: usize, j: usize) {
        self.map.swap(i, j);
    }

    /// Block-diagonal permutation from per-block tables, block `b` acting on
    /// indices `b*block..(b+1)*block`.
    pub fn block_diagonal(blocks: &[PermTable]) -> PermTable {
        let mut map = Vec::with_capacity(blocks.iter().map(PermTable::len).sum());
        let mut base = 0u32;
        for b in blocks {
            map.extend(b.map.iter().map(|&m| base + m));
            base += b.len() as u32;
        }
        PermTable { map }
    }
}

pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    matmul_with(a, b, Exec::default())
}

/// `a · b`, each output element reduced over the inner index in ascending order.
pub fn matmul_with(a: &Tensor2, b: &Tensor2, exec: Exec) -> Result<Tensor2> {
    if a.cols != b.rows {
        return Err(EeError::Shape(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Tensor2::zeros(n, m);
    if m == 0 {
        return Ok(out);
    }
    let exec = if n * k * m >= PAR_MATMUL_WORK {
        exec
    } else {
        Exec::Sequential
    };
    exec.for_each_chunk_mut(&mut out.data, m, |r, dst| {
        let arow = a.row(r);
        for (c, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, &av) in arow.iter().enumerate() {
                acc += av * b.data[i * m + c];
            }
            *d = acc;
        }
    });
    Ok(out)
}

/// `x · wᵀ + bias` for a weight stored as (out_features × in_features).
pub fn linear(x: &Tensor2, w: &Tensor2, bias: Option<&Tensor2>) -> Result<Tensor2> {
    if x.cols != w.cols {
        return Err(EeError::Shape(format!(
            "linear input {}x{} against weight {}x{}",
            x.rows, x.cols, w.rows, w.cols
        )));
    }
    if let Some(b) = bias {
        if b.data.len() != w.rows {
            return Err(EeError::Shape(format!(
                "bias of length {} for {} outputs",
                b.data.len(),
                w.rows
            )));
        }
    }
    let (n, out_f) = (x.rows, w.rows);
    let exec = if n * x.cols * out_f >= PAR_MATMUL_WORK {
        Exec::default()
    } else {
        Exec::Sequential
    };
    let mut out = Tensor2::zeros(n, out_f);
    if out_f == 0 {
        return Ok(out);
    }
    exec.for_each_chunk_mut(&mut out.data, out_f, |r, dst| {
        let xr = x.row(r);
        for (o, d) in dst.iter_mut().enumerate() {
            let wr = w.row(o);
            let mut acc = 0.0;
            for (xv, wv) in xr.iter().zip(wr) {
                acc += xv * wv;
            }
            *d = acc + bias.map_or(0.0, |b| b.data[o]);
        }
    });
    Ok(out)
}

/// Stable softmax of one row in place. Entries equal to `-inf` get weight 0;
/// at least one entry must be finite.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(a: &Tensor2) -> Tensor2 {
    let mut out = a.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActKind {
    Relu,
    Gelu,
    Silu,
}

impl FromStr for ActKind {
    type Err = EeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(ActKind::Relu),
            "gelu" => Ok(ActKind::Gelu),
            "silu" => Ok(ActKind::Silu),
            other => Err(EeError::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl fmt::Display for ActKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActKind::Relu => "relu",
            ActKind::Gelu => "gelu",
            ActKind::Silu => "silu",
        })
    }
}

impl ActKind {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            ActKind::Relu => x.max(0.0),
            // x·Φ(x), exact erf form
            ActKind::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            ActKind::Silu => x / (1.0 + (-x).exp()),
        }
    }
}

pub fn activate(kind: ActKind, x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| *v = kind.eval(*v));
    out
}

fn check_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(EeError::Shape(format!(
            "{name} has length {got}, expected {want}"
        )));
    }
    Ok(())
}

pub fn layer_norm(x: &Tensor2, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor2> {
    check_len("layer_norm gamma", gamma.len(), x.cols)?;
    check_len("layer_norm beta", beta.len(), x.cols)?;
    let mut out = x.clone();
    let n = x.cols as f64;
    for r in 0..x.rows {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let denom = (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            let centered = *v - mean;
            // constant rows stay exactly zero even when eps = 0
            *v = if centered == 0.0 { *b } else { centered / denom * g + b };
        }
    }
    Ok(out)
}

pub fn rms_norm(x: &Tensor2, gamma: &[f64], eps: f64) -> Result<Tensor2> {
    check_len("rms_norm gamma", gamma.len(), x.cols)?;
    let mut out = x.clone();
    let n = x.cols as f64;
    for r in 0..x.rows {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / n;
        let denom = (ms + eps).sqrt();
        for (v, g) in row.iter_mut().zip(gamma) {
            *v = if *v == 0.0 { 0.0 } else { *v / denom * g };
        }
    }
    Ok(out)
}
