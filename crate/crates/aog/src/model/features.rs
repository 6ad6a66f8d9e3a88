//! Sparse feature vectors over the flat parameter dimension.

/// A sparse vector with sorted, unique indices. Bins outside activated nodes
/// and edges are implicit zeros.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVec {
    pub idx: Vec<u32>,
    pub val: Vec<f64>,
}

impl SparseVec {
    pub fn new() -> Self {
        SparseVec::default()
    }

    /// Appends `values` at `offset..offset+len`. Segments may be pushed in
    /// any order; indices are sorted on finalize.
    pub fn push_slice(&mut self, offset: usize, values: &[f64]) {
        self.idx.reserve(values.len());
        self.val.reserve(values.len());
        for (k, v) in values.iter().enumerate() {
            self.idx.push((offset + k) as u32);
            self.val.push(*v);
        }
    }

    /// Sorts entries by index. Duplicate indices are a logic error upstream.
    pub fn finalize(mut self) -> SparseVec {
        let mut order: Vec<usize> = (0..self.idx.len()).collect();
        order.sort_unstable_by_key(|&k| self.idx[k]);
        let idx: Vec<u32> = order.iter().map(|&k| self.idx[k]).collect();
        let val: Vec<f64> = order.iter().map(|&k| self.val[k]).collect();
        debug_assert!(idx.windows(2).all(|w| w[0] < w[1]), "duplicate feature bins");
        self.idx = idx;
        self.val = val;
        self
    }

    pub fn nnz(&self) -> usize {
        self.idx.len()
    }

    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.idx
            .iter()
            .zip(&self.val)
            .map(|(&i, &v)| dense[i as usize] * v)
            .sum()
    }

    /// Dot product of two sparse vectors (both sorted).
    pub fn dot_sparse(&self, other: &SparseVec) -> f64 {
        let mut acc = 0.0;
        let (mut a, mut b) = (0usize, 0usize);
        while a < self.idx.len() && b < other.idx.len() {
            match self.idx[a].cmp(&other.idx[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.val[a] * other.val[b];
                    a += 1;
                    b += 1;
                }
            }
        }
        acc
    }

    /// `self - other`, entries with exact zero difference retained only when
    /// present in either input.
    pub fn sub(&self, other: &SparseVec) -> SparseVec {
        let mut idx = Vec::with_capacity(self.idx.len() + other.idx.len());
        let mut val = Vec::with_capacity(self.idx.len() + other.idx.len());
        let (mut a, mut b) = (0usize, 0usize);
        while a < self.idx.len() || b < other.idx.len() {
            let ia = self.idx.get(a).copied().unwrap_or(u32::MAX);
            let ib = other.idx.get(b).copied().unwrap_or(u32::MAX);
            match ia.cmp(&ib) {
                std::cmp::Ordering::Less => {
                    idx.push(ia);
                    val.push(self.val[a]);
                    a += 1;
                }
                std::cmp::Ordering::Greater => {
                    idx.push(ib);
                    val.push(-other.val[b]);
                    b += 1;
                }
                std::cmp::Ordering::Equal => {
                    idx.push(ia);
                    val.push(self.val[a] - other.val[b]);
                    a += 1;
                    b += 1;
                }
            }
        }
        SparseVec { idx, val }
    }

    pub fn l1_norm(&self) -> f64 {
        self.val.iter().map(|v| v.abs()).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.val.iter().map(|v| v * v).sum()
    }

    /// Adds `scale * self` into a dense accumulator.
    pub fn add_scaled_into(&self, scale: f64, dense: &mut [f64]) {
        for (&i, &v) in self.idx.iter().zip(&self.val) {
            dense[i as usize] += scale * v;
        }
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (&i, &v) in self.idx.iter().zip(&self.val) {
            out[i as usize] = v;
        }
        out
    }
}
