//! Path-indexed storage on the time grid and deterministic reductions.

use rayon::prelude::*;

/// Fixed block size for all parallel reductions. Partial sums are always
/// combined in block order, so results are bit-identical for any worker
/// count.
pub const REDUCTION_BLOCK: usize = 4096;

/// A `n_paths x n_nodes` array of reals. A broadcast array stores a single
/// row shared by every path (deterministic processes), which keeps
/// deterministic controls and delay-free data cheap at large path counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PathArray {
    n_paths: usize,
    n_nodes: usize,
    broadcast: bool,
    data: Vec<f64>,
}

impl PathArray {
    pub fn zeros(n_paths: usize, n_nodes: usize) -> Self {
        Self {
            n_paths,
            n_nodes,
            broadcast: false,
            data: vec![0.0; n_paths * n_nodes],
        }
    }

    pub fn constant(n_paths: usize, n_nodes: usize, value: f64) -> Self {
        Self {
            n_paths,
            n_nodes,
            broadcast: true,
            data: vec![value; n_nodes],
        }
    }

    /// One shared row broadcast across all paths.
    pub fn broadcast_row(n_paths: usize, row: Vec<f64>) -> Self {
        Self {
            n_paths,
            n_nodes: row.len(),
            broadcast: true,
            data: row,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n_paths = rows.len();
        let n_nodes = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_paths * n_nodes);
        for row in rows {
            assert_eq!(row.len(), n_nodes);
            data.extend_from_slice(&row);
        }
        Self {
            n_paths,
            n_nodes,
            broadcast: false,
            data,
        }
    }

    #[inline]
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    #[inline]
    pub fn is_broadcast(&self) -> bool {
        self.broadcast
    }

    #[inline]
    pub fn get(&self, path: usize, node: usize) -> f64 {
        debug_assert!(path < self.n_paths && node < self.n_nodes);
        if self.broadcast {
            self.data[node]
        } else {
            self.data[path * self.n_nodes + node]
        }
    }

    #[inline]
    pub fn set(&mut self, path: usize, node: usize, value: f64) {
        assert!(!self.broadcast, "cannot write a single path of a broadcast array");
        self.data[path * self.n_nodes + node] = value;
    }

    /// The stored row backing `path` (the shared row when broadcast).
    #[inline]
    pub fn row(&self, path: usize) -> &[f64] {
        if self.broadcast {
            &self.data
        } else {
            &self.data[path * self.n_nodes..(path + 1) * self.n_nodes]
        }
    }

    /// Mutable per-path rows for parallel filling. Panics on broadcast.
    pub fn rows_mut(&mut self) -> rayon::slice::ChunksMut<'_, f64> {
        assert!(!self.broadcast);
        self.data.par_chunks_mut(self.n_nodes)
    }

    /// Materializes a broadcast array into per-path storage.
    pub fn densified(&self) -> Self {
        if !self.broadcast {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.n_paths * self.n_nodes);
        for _ in 0..self.n_paths {
            data.extend_from_slice(&self.data);
        }
        Self {
            n_paths: self.n_paths,
            n_nodes: self.n_nodes,
            broadcast: false,
            data,
        }
    }

    /// Writes node `node` of every path through `f(path) -> value`.
    pub fn fill_node<F: Fn(usize) -> f64 + Sync>(&mut self, node: usize, f: F) {
        assert!(!self.broadcast);
        let n_nodes = self.n_nodes;
        self.data
            .par_chunks_mut(n_nodes)
            .enumerate()
            .for_each(|(p, row)| row[node] = f(p));
    }

    /// Mean over paths of `f(path)`, reduced in fixed block order.
    pub fn mean_over_paths<F: Fn(usize) -> f64 + Sync>(&self, f: F) -> f64 {
        block_sum(self.n_paths, &f) / self.n_paths as f64
    }

    pub fn node_mean(&self, node: usize) -> f64 {
        self.mean_over_paths(|p| self.get(p, node))
    }

    pub fn node_variance(&self, node: usize) -> f64 {
        let m = self.node_mean(node);
        self.mean_over_paths(|p| {
            let d = self.get(p, node) - m;
            d * d
        })
    }

    /// Linear-interpolation quantile of the node values over paths.
    pub fn node_quantile(&self, node: usize, q: f64) -> f64 {
        let mut vals: Vec<f64> = (0..self.n_paths).map(|p| self.get(p, node)).collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        quantile_sorted(&vals, q)
    }

    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        for p in 0..if self.broadcast { 1 } else { self.n_paths } {
            if let Some(i) = self.row(p).iter().position(|v| !v.is_finite()) {
                return Some((p, i));
            }
        }
        None
    }
}

/// Deterministic fixed-block parallel sum of `f(0) + ... + f(n-1)`.
pub fn block_sum<F: Fn(usize) -> f64 + Sync>(n: usize, f: &F) -> f64 {
    if n <= REDUCTION_BLOCK {
        return (0..n).map(f).sum();
    }
    let n_blocks = n.div_ceil(REDUCTION_BLOCK);
    let partials: Vec<f64> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let lo = b * REDUCTION_BLOCK;
            let hi = (lo + REDUCTION_BLOCK).min(n);
            (lo..hi).map(f).sum::<f64>()
        })
        .collect();
    partials.iter().sum()
}

/// Deterministic fixed-block parallel accumulation of vector-valued terms:
/// each index contributes via `f(index, &mut acc)`, blocks are combined in
/// order by element-wise addition.
pub fn block_accumulate<F>(n: usize, width: usize, f: &F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let n_blocks = n.div_ceil(REDUCTION_BLOCK).max(1);
    let partials: Vec<Vec<f64>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let lo = b * REDUCTION_BLOCK;
            let hi = (lo + REDUCTION_BLOCK).min(n);
            let mut acc = vec![0.0; width];
            for i in lo..hi {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for part in partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

/// Mean and standard error of per-index samples `f(i)`.
pub fn mean_and_std_error<F: Fn(usize) -> f64 + Sync>(n: usize, f: &F) -> (f64, f64) {
    let sums = block_accumulate(n, 2, &|i, acc: &mut [f64]| {
        let v = f(i);
        acc[0] += v;
        acc[1] += v * v;
    });
    let nn = n as f64;
    let mean = sums[0] / nn;
    let var = (sums[1] / nn - mean * mean).max(0.0);
    (mean, (var / nn).sqrt())
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_reads_shared_row() {
        let a = PathArray::broadcast_row(5, vec![1.0, 2.0, 3.0]);
        assert_eq!(a.get(0, 1), 2.0);
        assert_eq!(a.get(4, 2), 3.0);
        assert_eq!(a.n_paths(), 5);
    }

    #[test]
    fn block_sum_matches_sequential() {
        let n = 3 * REDUCTION_BLOCK + 17;
        let vals: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let seq: f64 = {
            // same block structure applied sequentially
            let mut parts = Vec::new();
            for b in 0..n.div_ceil(REDUCTION_BLOCK) {
                let lo = b * REDUCTION_BLOCK;
                let hi = (lo + REDUCTION_BLOCK).min(n);
                parts.push(vals[lo..hi].iter().sum::<f64>());
            }
            parts.iter().sum()
        };
        let par = block_sum(n, &|i| vals[i]);
        assert_eq!(seq.to_bits(), par.to_bits());
    }

    #[test]
    fn node_stats() {
        let a = PathArray::from_rows(vec![vec![1.0, 10.0], vec![3.0, 10.0]]);
        assert_eq!(a.node_mean(0), 2.0);
        assert_eq!(a.node_variance(0), 1.0);
        assert_eq!(a.node_quantile(0, 0.5), 2.0);
        assert_eq!(a.node_variance(1), 0.0);
    }

    #[test]
    fn detects_non_finite() {
        let mut a = PathArray::zeros(2, 3);
        assert!(a.first_non_finite().is_none());
        a.set(1, 2, f64::NAN);
        assert_eq!(a.first_non_finite(), Some((1, 2)));
    }
}
