//! Fixed linear maps over the spatial positions of a feature map.
//!
//! A feature map of `batch` images is stored as `(batch * h * w) x channels`;
//! a [`SparseMap`] sends the `h*w` rows of each image to `n_out` new rows,
//! independently per channel and per image.

use crate::error::{AutogradError, Result};
use crate::scalar::Scalar;

/// CSR matrix of shape `n_out x n_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap<T> {
    pub n_in: usize,
    pub n_out: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<T>,
}

impl<T: Scalar> SparseMap<T> {
    pub fn from_rows(n_in: usize, rows: Vec<Vec<(usize, T)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for row in &rows {
            for &(i, w) in row {
                debug_assert!(i < n_in);
                indices.push(i);
                weights.push(w);
            }
            offsets.push(indices.len());
        }
        Self {
            n_in,
            n_out: rows.len(),
            offsets,
            indices,
            weights,
        }
    }

    /// Entries `(input index, weight)` of one output row.
    pub fn row(&self, out: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.offsets[out]..self.offsets[out + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    /// Dense `n_out x n_in` copy (tests and small maps only).
    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let mut dense = vec![vec![T::zero(); self.n_in]; self.n_out];
        for (o, row) in dense.iter_mut().enumerate() {
            for (i, w) in self.row(o) {
                row[i] += w;
            }
        }
        dense
    }

    /// Average pooling of an `h x w` map onto a `k x k` grid whose bins
    /// partition the map: bin `a` along an axis of length `n` covers
    /// `[floor(a*n/k), floor((a+1)*n/k))`.
    pub fn adaptive_avg_pool(h: usize, w: usize, k: usize) -> Result<Self> {
        if k == 0 || k > h.min(w) {
            return Err(AutogradError::Invalid(format!(
                "pool size {k} must be in 1..={} for a {h}x{w} map",
                h.min(w)
            )));
        }
        let bins = |n: usize, a: usize| (a * n / k, (a + 1) * n / k);
        let mut rows = Vec::with_capacity(k * k);
        for a in 0..k {
            let (y0, y1) = bins(h, a);
            for b in 0..k {
                let (x0, x1) = bins(w, b);
                let weight = T::one() / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                let mut row = Vec::with_capacity((y1 - y0) * (x1 - x0));
                for y in y0..y1 {
                    for x in x0..x1 {
                        row.push((y * w + x, weight));
                    }
                }
                rows.push(row);
            }
        }
        Ok(Self::from_rows(h * w, rows))
    }

    /// Bilinear resampling from `h_in x w_in` to `h_out x w_out` with
    /// half-pixel centers (corner alignment off); source coordinates below
    /// zero clamp to the first row/column.
    pub fn bilinear(h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> Self {
        let axis = |n_in: usize, n_out: usize, dst: usize| -> (usize, usize, f64) {
            let scale = n_in as f64 / n_out as f64;
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        };
        let mut rows = Vec::with_capacity(h_out * w_out);
        for y in 0..h_out {
            let (y0, y1, fy) = axis(h_in, h_out, y);
            for x in 0..w_out {
                let (x0, x1, fx) = axis(w_in, w_out, x);
                let mut row: Vec<(usize, T)> = Vec::with_capacity(4);
                let mut push = |i: usize, wgt: f64| {
                    if wgt == 0.0 {
                        return;
                    }
                    if let Some(e) = row.iter_mut().find(|e| e.0 == i) {
                        e.1 += T::from_f64_lossy(wgt);
                    } else {
                        row.push((i, T::from_f64_lossy(wgt)));
                    }
                };
                push(y0 * w_in + x0, (1.0 - fy) * (1.0 - fx));
                push(y0 * w_in + x1, (1.0 - fy) * fx);
                push(y1 * w_in + x0, fy * (1.0 - fx));
                push(y1 * w_in + x1, fy * fx);
                rows.push(row);
            }
        }
        Self::from_rows(h_in * w_in, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_bins_partition_the_map() {
        for (h, k) in [(16, 3), (16, 6), (8, 6), (4, 4), (5, 2)] {
            let map = SparseMap::<f64>::adaptive_avg_pool(h, h, k).unwrap();
            let mut hits = vec![0usize; h * h];
            for o in 0..map.n_out {
                for (i, _) in map.row(o) {
                    hits[i] += 1;
                }
            }
            assert!(hits.iter().all(|&c| c == 1), "h={h} k={k}");
        }
        assert!(SparseMap::<f64>::adaptive_avg_pool(4, 4, 6).is_err());
        assert!(SparseMap::<f64>::adaptive_avg_pool(4, 4, 0).is_err());
    }

    #[test]
    fn bilinear_rows_are_convex() {
        let map = SparseMap::<f64>::bilinear(3, 2, 16, 16);
        for o in 0..map.n_out {
            let s: f64 = map.row(o).map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(map.row(o).all(|(_, w)| w > 0.0));
        }
        // same size is the identity
        let id = SparseMap::<f64>::bilinear(4, 4, 4, 4);
        for o in 0..16 {
            assert_eq!(id.row(o).collect::<Vec<_>>(), vec![(o, 1.0)]);
        }
    }
}
