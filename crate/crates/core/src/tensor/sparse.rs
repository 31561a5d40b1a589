//! Fixed sparse linear maps applied along the last tensor axis.
//!
//! Bilinear sampling, resizing, pooling and im2col are all linear in the
//! sampled values with weights that depend only on geometry. Expressing them
//! as a CSR matrix paired with its transpose gives one differentiable op
//! whose adjoint is the same op with the pair flipped, so derivatives of any
//! order come for free.

use std::sync::Arc;

use super::Tensor;

/// CSR matrix mapping `n_in` input positions to `n_out` output positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    n_in: usize,
    n_out: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

impl SparseMap {
    /// Builds a map from per-output-row `(input index, weight)` lists.
    pub fn from_rows<I, R>(n_in: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = (usize, f64)>,
    {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        for row in rows {
            for (c, w) in row {
                assert!(c < n_in, "sparse column {c} out of range {n_in}");
                cols.push(c as u32);
                weights.push(w);
            }
            row_ptr.push(cols.len());
        }
        SparseMap { n_in, n_out: row_ptr.len() - 1, row_ptr, cols, weights }
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn transpose(&self) -> SparseMap {
        let mut counts = vec![0usize; self.n_in + 1];
        for &c in &self.cols {
            counts[c as usize + 1] += 1;
        }
        for i in 0..self.n_in {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut fill = counts;
        let mut cols = vec![0u32; self.nnz()];
        let mut weights = vec![0.0; self.nnz()];
        for r in 0..self.n_out {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.cols[k] as usize;
                cols[fill[c]] = r as u32;
                weights[fill[c]] = self.weights[k];
                fill[c] += 1;
            }
        }
        SparseMap { n_in: self.n_out, n_out: self.n_in, row_ptr, cols, weights }
    }

    /// Applies the map to one contiguous row of `n_in` values.
    pub fn apply_row(&self, src: &[f64], dst: &mut [f64]) {
        debug_assert_eq!(src.len(), self.n_in);
        debug_assert_eq!(dst.len(), self.n_out);
        for (r, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.weights[k] * src[self.cols[k] as usize];
            }
            *d = acc;
        }
    }
}

/// A sparse map together with its transpose.
#[derive(Debug, Clone)]
pub struct SparsePair {
    forward: Arc<SparseMap>,
    adjoint: Arc<SparseMap>,
}

impl SparsePair {
    pub fn new(map: SparseMap) -> Self {
        let adjoint = Arc::new(map.transpose());
        SparsePair { forward: Arc::new(map), adjoint }
    }

    pub fn map(&self) -> &SparseMap {
        &self.forward
    }

    pub fn flipped(&self) -> SparsePair {
        SparsePair { forward: Arc::clone(&self.adjoint), adjoint: Arc::clone(&self.forward) }
    }
}

impl Tensor {
    /// Applies `pair`'s forward map along the last axis:
    /// `[..., n_in] -> [..., n_out]`.
    pub fn sparse_apply(&self, pair: &SparsePair) -> Tensor {
        let map = pair.map();
        let last = *self.shape().last().expect("sparse_apply needs rank >= 1");
        assert_eq!(last, map.n_in(), "sparse_apply: last axis {last} != map input {}", map.n_in());
        let rows = self.numel() / last.max(1);
        let mut data = vec![0.0; rows * map.n_out()];
        if map.n_out() > 0 {
            for (src, dst) in self.data().chunks(last).zip(data.chunks_mut(map.n_out())) {
                map.apply_row(src, dst);
            }
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = map.n_out();
        let adjoint = pair.flipped();
        Tensor::from_op(data, shape, "sparse_apply", vec![self.clone()], move |_, _, g| {
            vec![Some(g.sparse_apply(&adjoint))]
        })
    }
}
