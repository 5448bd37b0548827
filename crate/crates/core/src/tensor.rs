//! Dense tensor and matrix arithmetic.
//!
//! Everything here is deliberately plain: f64 storage, fixed loop orders, no
//! reassociation. The point is that two runs (or a run and a hand-written
//! oracle) produce bit-identical results, which lets the chunked execution
//! paths be compared against monolithic references at tight tolerances.
//! Matrix products use the classic i/j/k triple loop with k innermost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Which axis of a `[b, s, h, d]` tensor is sharded across ranks.
///
/// `SeqLocalHeadsGlobal`: the rank holds a slice of the tokens with all
/// heads (the layout outside distributed attention).
/// `SeqGlobalHeadsLocal`: the rank holds all tokens of a sequence chunk with
/// a slice of the heads (the layout inside distributed attention).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    SeqLocalHeadsGlobal,
    SeqGlobalHeadsLocal,
}

/// Axis sizes of a [`ChunkTensor`]: batch, tokens, heads, head dim.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub b: usize,
    pub s: usize,
    pub h: usize,
    pub d: usize,
}

impl Dims {
    pub fn new(b: usize, s: usize, h: usize, d: usize) -> Self {
        Dims { b, s, h, d }
    }

    pub fn len(&self) -> usize {
        self.b * self.s * self.h * self.d
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense row-major `[b, s, h, d]` tensor with a layout tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkTensor {
    pub dims: Dims,
    pub layout: Layout,
    data: Vec<f64>,
}

impl ChunkTensor {
    pub fn zeros(dims: Dims, layout: Layout) -> Self {
        ChunkTensor {
            dims,
            layout,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, layout: Layout, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "tensor data length {} != b*s*h*d = {}",
                data.len(),
                dims.len()
            )));
        }
        Ok(ChunkTensor { dims, layout, data })
    }

    /// Seeded uniform fill in [-1, 1).
    pub fn random(dims: Dims, layout: Layout, rng: &mut Rng) -> Self {
        let data = (0..dims.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        ChunkTensor { dims, layout, data }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn size_bytes(&self) -> u64 {
        (self.data.len() * std::mem::size_of::<f64>()) as u64
    }

    #[inline]
    fn index(&self, b: usize, s: usize, h: usize, d: usize) -> usize {
        ((b * self.dims.s + s) * self.dims.h + h) * self.dims.d + d
    }

    #[inline]
    pub fn get(&self, b: usize, s: usize, h: usize, d: usize) -> f64 {
        self.data[self.index(b, s, h, d)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, s: usize, h: usize, d: usize, v: f64) {
        let i = self.index(b, s, h, d);
        self.data[i] = v;
    }

    pub fn assert_finite(&self, what: &'static str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn with_layout(mut self, layout: Layout) -> Self {
        self.layout = layout;
        self
    }

    /// Reorder axes. `perm[k]` names the source axis that lands in output
    /// position `k` (axes 0..3 = b, s, h, d). The inverse permutation
    /// restores the original tensor exactly.
    pub fn permute_axes(&self, perm: [usize; 4]) -> Result<ChunkTensor> {
        let mut seen = [false; 4];
        for &p in &perm {
            if p > 3 || seen[p] {
                return Err(Error::DimMismatch(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let src = [self.dims.b, self.dims.s, self.dims.h, self.dims.d];
        let out_dims = Dims::new(src[perm[0]], src[perm[1]], src[perm[2]], src[perm[3]]);
        let mut out = ChunkTensor::zeros(out_dims, self.layout);
        let od = [out_dims.b, out_dims.s, out_dims.h, out_dims.d];
        for i0 in 0..od[0] {
            for i1 in 0..od[1] {
                for i2 in 0..od[2] {
                    for i3 in 0..od[3] {
                        let o = [i0, i1, i2, i3];
                        let mut s_idx = [0usize; 4];
                        for k in 0..4 {
                            s_idx[perm[k]] = o[k];
                        }
                        let v = self.get(s_idx[0], s_idx[1], s_idx[2], s_idx[3]);
                        out.set(i0, i1, i2, i3, v);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Slice tokens `[start, start + len)` into a new tensor.
    pub fn slice_seq(&self, start: usize, len: usize) -> Result<ChunkTensor> {
        if start + len > self.dims.s {
            return Err(Error::DimMismatch(format!(
                "seq slice [{start}, {}) out of range 0..{}",
                start + len,
                self.dims.s
            )));
        }
        let dims = Dims::new(self.dims.b, len, self.dims.h, self.dims.d);
        let mut out = ChunkTensor::zeros(dims, self.layout);
        let row = self.dims.h * self.dims.d;
        for b in 0..self.dims.b {
            for s in 0..len {
                let src = self.index(b, start + s, 0, 0);
                let dst = out.index(b, s, 0, 0);
                out.data[dst..dst + row].copy_from_slice(&self.data[src..src + row]);
            }
        }
        Ok(out)
    }

    /// Split the token axis into `u` equal chunks.
    pub fn split_seq(&self, u: usize) -> Result<Vec<ChunkTensor>> {
        if u == 0 || self.dims.s % u != 0 {
            return Err(Error::Divisibility {
                what: "token count",
                value: self.dims.s,
                by: u.max(1),
            });
        }
        let c = self.dims.s / u;
        (0..u).map(|i| self.slice_seq(i * c, c)).collect()
    }

    /// Concatenate chunks along the token axis. Inverse of [`ChunkTensor::split_seq`].
    pub fn concat_seq(chunks: &[ChunkTensor]) -> Result<ChunkTensor> {
        let first = chunks
            .first()
            .ok_or_else(|| Error::DimMismatch("concat of zero chunks".into()))?;
        let (b, h, d) = (first.dims.b, first.dims.h, first.dims.d);
        let s_total: usize = chunks.iter().map(|c| c.dims.s).sum();
        let mut out = ChunkTensor::zeros(Dims::new(b, s_total, h, d), first.layout);
        let row = h * d;
        let mut offset = 0;
        for c in chunks {
            if c.dims.b != b || c.dims.h != h || c.dims.d != d {
                return Err(Error::DimMismatch("concat chunk shape mismatch".into()));
            }
            for bi in 0..b {
                for s in 0..c.dims.s {
                    let src = c.index(bi, s, 0, 0);
                    let dst = out.index(bi, offset + s, 0, 0);
                    out.data[dst..dst + row].copy_from_slice(&c.data[src..src + row]);
                }
            }
            offset += c.dims.s;
        }
        Ok(out)
    }

    /// View the tensor as a `(b*s, h*d)` matrix (row-major layouts agree, so
    /// this is a copy of the same bytes).
    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.dims.b * self.dims.s,
            cols: self.dims.h * self.dims.d,
            data: self.data.clone(),
        }
    }

    /// Rebuild a `[b, s, h, d]` tensor from a `(b*s, h*d)` matrix.
    pub fn from_matrix(m: &Matrix, dims: Dims, layout: Layout) -> Result<ChunkTensor> {
        if m.rows != dims.b * dims.s || m.cols != dims.h * dims.d {
            return Err(Error::DimMismatch(format!(
                "matrix {}x{} does not reshape to {:?}",
                m.rows, m.cols, dims
            )));
        }
        ChunkTensor::from_vec(dims, layout, m.data.clone())
    }

    /// Copy the `(s, d)` matrix for one (batch, head) pair.
    pub fn head_matrix(&self, b: usize, h: usize) -> Matrix {
        let mut m = Matrix::zeros(self.dims.s, self.dims.d);
        for s in 0..self.dims.s {
            for d in 0..self.dims.d {
                m.data[s * self.dims.d + d] = self.get(b, s, h, d);
            }
        }
        m
    }

    /// Write an `(s, d)` matrix back into one (batch, head) pair.
    pub fn set_head_matrix(&mut self, b: usize, h: usize, m: &Matrix) {
        assert_eq!(m.rows, self.dims.s);
        assert_eq!(m.cols, self.dims.d);
        for s in 0..self.dims.s {
            for d in 0..self.dims.d {
                self.set(b, s, h, d, m.data[s * self.dims.d + d]);
            }
        }
    }

    pub fn add_assign(&mut self, other: &ChunkTensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch("add_assign shape mismatch".into()));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ChunkTensor) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c);
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn random(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn scale(&self, k: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * k).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimMismatch("matrix add shape mismatch".into()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimMismatch("matrix add shape mismatch".into()));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    /// Columns `[start, start + n)` as a new matrix.
    pub fn slice_cols(&self, start: usize, n: usize) -> Matrix {
        assert!(start + n <= self.cols);
        let mut out = Matrix::zeros(self.rows, n);
        for r in 0..self.rows {
            out.data[r * n..(r + 1) * n]
                .copy_from_slice(&self.data[r * self.cols + start..r * self.cols + start + n]);
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `A · B` with the fixed i/j/k loop order, k innermost. No blocking, no
/// reassociation: result is a deterministic function of the inputs.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimMismatch(format!(
            "matmul: ({}, {}) x ({}, {})",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.data[i * a.cols + k] * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// Numerically stable row softmax: subtract the row max, exponentiate, and
/// normalize. Rows sum to 1 within 1e-12 in f64. `-inf` entries (mask
/// sentinels) map to exactly 0.
pub fn row_softmax_stable(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let row = &m.data[r * m.cols..(r + 1) * m.cols];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..m.cols {
            let e = (row[c] - mx).exp();
            out.data[r * m.cols + c] = e;
            sum += e;
        }
        for c in 0..m.cols {
            out.data[r * m.cols + c] /= sum;
        }
    }
    out
}
