//! Deterministic point-set kernels: pairwise distances, k-nearest neighbors,
//! farthest-point sampling and neighbor gathering.
//!
//! All kernels are brute force. Ties are always broken toward the smaller
//! index so that results are reproducible bit for bit.

use std::cmp::Ordering;

use crate::diffarray::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{IndexTensor, Tensor};

/// `n×3` coordinates in normalized object space.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet(Tensor);

impl PointSet {
    pub fn new(coords: Tensor) -> Result<Self> {
        if coords.ndim() != 2 || coords.shape()[1] != 3 {
            return Err(Error::shape("point set", coords.shape(), &[coords.rows(), 3]));
        }
        coords.check_finite("point set")?;
        Ok(Self(coords))
    }

    pub fn from_points(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(Tensor::from_rows(points)?)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let r = self.0.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn points(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }

    pub fn coords(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::invalid("select", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid("select", format!("index {bad} out of range")));
        }
        Ok(Self(self.0.select_rows(idx)))
    }

    /// Largest distance from the origin.
    pub fn max_radius(&self) -> f64 {
        self.points()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Row `i` lists the `k` nearest reference items to query `i`, nearest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex(IndexTensor);

impl NeighborIndex {
    pub fn n(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[usize] {
        self.0.row(i)
    }

    pub fn indices(&self) -> &IndexTensor {
        &self.0
    }

    pub fn from_rows(rows: Vec<Vec<usize>>) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("neighbor index", "ragged rows"));
        }
        Ok(Self(IndexTensor::new(vec![n, k], rows.concat())?))
    }
}

fn check_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<usize> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(a.shape()[1])
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `out[i][j] = ‖a_i − b_j‖²`.
pub fn pairwise_sq_dist(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_dims("pairwise_sq_dist", a, b)?;
    let (n, m) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = a.row(i);
        out.extend((0..m).map(|j| sq_dist(ai, b.row(j))));
    }
    Tensor::new(vec![n, m], out)
}

fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// k nearest rows of `reference` for every row of `query`, by squared
/// Euclidean distance. A query that is also in `reference` finds itself first.
pub fn knn(query: &Tensor, reference: &Tensor, k: usize) -> Result<NeighborIndex> {
    check_dims("knn", query, reference)?;
    let m = reference.rows();
    if k == 0 || k > m {
        return Err(Error::invalid("knn", format!("k = {k} with {m} reference points")));
    }
    let n = query.rows();
    let mut idx = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(m);
    for i in 0..n {
        let q = query.row(i);
        cand.clear();
        cand.extend((0..m).map(|j| (sq_dist(q, reference.row(j)), j)));
        if k < m {
            cand.select_nth_unstable_by(k - 1, by_dist_then_index);
        }
        let top = &mut cand[..k];
        top.sort_unstable_by(by_dist_then_index);
        idx.extend(top.iter().map(|&(_, j)| j));
    }
    Ok(NeighborIndex(IndexTensor::new(vec![n, k], idx)?))
}

/// Greedy farthest-point sampling starting from index 0.
///
/// Returns `m` distinct indices in selection order; each pick maximizes the
/// distance to the already-chosen set (ties to the smaller index).
pub fn fps(points: &Tensor, m: usize) -> Result<IndexTensor> {
    let n = points.rows();
    if m == 0 || m > n {
        return Err(Error::invalid("fps", format!("cannot sample {m} of {n} points")));
    }
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = 0;
    for _ in 0..m {
        chosen.push(cur);
        taken[cur] = true;
        let p = points.row(cur);
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for j in 0..n {
            if taken[j] {
                continue;
            }
            let d = sq_dist(p, points.row(j));
            if d < min_d[j] {
                min_d[j] = d;
            }
            if min_d[j] > best_d {
                best_d = min_d[j];
                best = j;
            }
        }
        cur = best;
    }
    Ok(IndexTensor::from_vec(chosen))
}

/// `out[i][j] = values[nbr[i][j]]`, shape `n×k×c`.
pub fn gather_neighbors(values: &Tensor, nbr: &NeighborIndex) -> Result<Tensor> {
    let n = values.rows();
    if let Some(&bad) = nbr.indices().data().iter().find(|&&i| i >= n) {
        return Err(Error::invalid(
            "gather_neighbors",
            format!("index {bad} out of range for {n} rows"),
        ));
    }
    values
        .select_rows(nbr.indices().data())
        .reshape(vec![nbr.n(), nbr.k(), values.last_dim()])
}

/// Differentiable form of [`gather_neighbors`].
pub fn gather_neighbors_var(g: &mut Graph, values: Var, nbr: &NeighborIndex) -> Result<Var> {
    g.gather_rows(values, nbr.indices().data().to_vec(), &[nbr.n(), nbr.k()])
}

/// Each row index repeated `k` times: the "center" side of an edge gather.
pub fn gather_centers_var(g: &mut Graph, values: Var, k: usize) -> Result<Var> {
    let n = g.value(values).rows();
    let idx = (0..n * k).map(|j| j / k).collect();
    g.gather_rows(values, idx, &[n, k])
}
