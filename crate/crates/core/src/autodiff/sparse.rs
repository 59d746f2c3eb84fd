use crate::error::{Error, Result};

/// Constant sparse row-selection operator: output row `r` is
/// `sum_k weight_k * table[index_k]` over the entries of row `r`.
///
/// Covers plain look-up (one entry of weight 1), average pooling of token
/// lists (weights `1/len`) and bag-of-tokens indicators. An output row with
/// no entries is the zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
    source_rows: usize,
}

impl SparseRows {
    /// Builds from per-output-row entry lists, checking every index against
    /// `source_rows`.
    pub fn new(rows: impl IntoIterator<Item = Vec<(usize, f64)>>, source_rows: usize) -> Result<Self> {
        let mut offsets = vec![0];
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        for row in rows {
            for (idx, w) in row {
                if idx >= source_rows {
                    return Err(Error::index("gather source row", idx, source_rows));
                }
                indices.push(idx);
                weights.push(w);
            }
            offsets.push(indices.len());
        }
        Ok(SparseRows {
            offsets,
            indices,
            weights,
            source_rows,
        })
    }

    /// One unit-weight entry per output row.
    pub fn select(indices: &[usize], source_rows: usize) -> Result<Self> {
        SparseRows::new(indices.iter().map(|&i| vec![(i, 1.0)]), source_rows)
    }

    /// Average of the listed rows per output row; empty lists give zero rows.
    pub fn average(lists: &[&[usize]], source_rows: usize) -> Result<Self> {
        SparseRows::new(
            lists.iter().map(|l| {
                let w = 1.0 / l.len().max(1) as f64;
                l.iter().map(|&i| (i, w)).collect()
            }),
            source_rows,
        )
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn source_rows(&self) -> usize {
        self.source_rows
    }

    pub fn entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    /// `out[r] = sum w * src[i]`; `src` is `[source_rows, cols]`.
    pub(crate) fn gather(&self, src: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.out_rows() * cols];
        for r in 0..self.out_rows() {
            let dst = &mut out[r * cols..(r + 1) * cols];
            for (i, w) in self.entries(r) {
                for (d, s) in dst.iter_mut().zip(&src[i * cols..(i + 1) * cols]) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Adjoint of [`gather`](Self::gather): `out[i] += w * src[r]`.
    pub(crate) fn scatter(&self, src: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.source_rows * cols];
        for r in 0..self.out_rows() {
            let s = &src[r * cols..(r + 1) * cols];
            for (i, w) in self.entries(r) {
                for (d, v) in out[i * cols..(i + 1) * cols].iter_mut().zip(s) {
                    *d += w * v;
                }
            }
        }
        out
    }
}
