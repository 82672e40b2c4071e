//! Reverse-mode differentiation over dense row-major `f64` matrices.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a 1x1 node walks the tape in reverse and returns the
//! gradient of every node. Operations with a data-dependent branch (hinges,
//! argmax, argmin, probability clamps) append their decision to
//! [`Graph::branches`], which gradient checks use to detect when a finite
//! difference step crossed a kink.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine distances evaluated against an all-zero vector.
static ZERO_VECTOR_DISTANCES: AtomicU64 = AtomicU64::new(0);
/// Cross-entropy evaluations whose target probability hit the clamp.
static CLAMPED_PROBABILITIES: AtomicU64 = AtomicU64::new(0);

pub fn zero_vector_distance_count() -> u64 {
    ZERO_VECTOR_DISTANCES.load(Ordering::Relaxed)
}

pub fn clamped_probability_count() -> u64 {
    CLAMPED_PROBABILITIES.load(Ordering::Relaxed)
}

pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row_vector(v: Vec<f64>) -> Self {
        Self::from_vec(1, v.len(), v)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn scalar(x: f64) -> Self {
        Self::from_vec(1, 1, vec![x])
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Pairwise tree sum over `n` items in fixed index order.
pub fn tree_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => tree_sum(&xs[..n / 2]) + tree_sum(&xs[n / 2..]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Euclidean,
    Cosine,
}

impl std::str::FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!(
                "unknown distance {other:?}, expected euclidean or cosine"
            ))),
        }
    }
}

impl std::fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Euclidean => "euclidean",
            Self::Cosine => "cosine",
        })
    }
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Distance between two equal-length vectors. Cosine distance involving a
/// zero vector is defined as 1 and counted.
pub fn vector_distance(u: &[f64], v: &[f64], kind: DistanceKind) -> f64 {
    assert_eq!(u.len(), v.len(), "distance dimension mismatch");
    match kind {
        DistanceKind::Euclidean => u
            .iter()
            .zip(v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt(),
        DistanceKind::Cosine => {
            let nu = dot(u, u).sqrt();
            let nv = dot(v, v).sqrt();
            if nu == 0.0 || nv == 0.0 {
                ZERO_VECTOR_DISTANCES.fetch_add(1, Ordering::Relaxed);
                return 1.0;
            }
            (1.0 - dot(u, v) / (nu * nv)).clamp(0.0, 2.0)
        }
    }
}

/// Gradients of `d(u, v)` with respect to `u` and `v`.
fn vector_distance_grad(u: &[f64], v: &[f64], kind: DistanceKind) -> (Vec<f64>, Vec<f64>) {
    match kind {
        DistanceKind::Euclidean => {
            let d = vector_distance(u, v, kind);
            if d == 0.0 {
                return (vec![0.0; u.len()], vec![0.0; v.len()]);
            }
            let gu: Vec<f64> = u.iter().zip(v).map(|(a, b)| (a - b) / d).collect();
            let gv = gu.iter().map(|g| -g).collect();
            (gu, gv)
        }
        DistanceKind::Cosine => {
            let nu = dot(u, u).sqrt();
            let nv = dot(v, v).sqrt();
            if nu == 0.0 || nv == 0.0 {
                return (vec![0.0; u.len()], vec![0.0; v.len()]);
            }
            let s = dot(u, v) / (nu * nv);
            // d = 1 - s
            let gu = u
                .iter()
                .zip(v)
                .map(|(a, b)| -(b / (nu * nv) - s * a / (nu * nu)))
                .collect();
            let gv = u
                .iter()
                .zip(v)
                .map(|(a, b)| -(a / (nu * nv) - s * b / (nv * nv)))
                .collect();
            (gu, gv)
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    L2NormalizeRows(Var),
    MeanRows(Var),
    SumRows(Var),
    MaxRows(Var, Vec<usize>),
    SegmentMeanRows(Var, usize),
    SliceRows(Var, usize),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<Option<usize>>),
    Distances(Var, Var, DistanceKind),
    HingeMin(Var, usize, bool),
    TripletBatchAll(Var, Vec<(usize, usize, usize)>, Vec<bool>),
    CrossEntropy(Var, Vec<usize>, Vec<bool>),
    MeanAll(Var),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients for every node of a graph, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` did not influence it.
    pub fn wrt(&self, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Mat::zeros(self.shapes[v.0].0, self.shapes[v.0].1),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    branches: Vec<u64>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Data-dependent branch decisions taken so far.
    pub fn branches(&self) -> &[u64] {
        &self.branches
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.data[0]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf node: a parameter or an input.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape");
        let mut v = x.clone();
        v.add_assign(y);
        self.push(v, Op::Add(a, b))
    }

    /// Adds the 1xC row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((1, x.cols), y.shape(), "add_row shape");
        let mut v = x.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                *v.at_mut(r, c) += y.data[c];
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data.iter_mut() {
            let on = *x > 0.0;
            self.branches.push(on as u64);
            if !on {
                *x = 0.0;
            }
        }
        self.push(v, Op::Relu(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let row = &mut v.data[r * v.cols..(r + 1) * v.cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Scales every row to unit L2 norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let row = &mut v.data[r * v.cols..(r + 1) * v.cols];
            let n = dot(row, row).sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        self.push(v, Op::L2NormalizeRows(a))
    }

    fn column_reduce(x: &Mat, f: impl Fn(&[f64]) -> f64) -> Mat {
        let mut col = vec![0.0; x.rows];
        let mut out = Mat::zeros(1, x.cols);
        for c in 0..x.cols {
            for (r, slot) in col.iter_mut().enumerate() {
                *slot = x.at(r, c);
            }
            out.data[c] = f(&col);
        }
        out
    }

    /// Column means (n x D -> 1 x D), tree-summed in row order.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.rows > 0, "mean of zero rows");
        let n = x.rows as f64;
        let v = Self::column_reduce(x, |c| tree_sum(c) / n);
        self.push(v, Op::MeanRows(a))
    }

    /// Column sums (n x D -> 1 x D), tree-summed in row order.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = Self::column_reduce(self.value(a), tree_sum);
        self.push(v, Op::SumRows(a))
    }

    /// Column maxima (n x D -> 1 x D); the first maximal row wins ties.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.rows > 0, "max of zero rows");
        let mut out = Mat::zeros(1, x.cols);
        let mut arg = vec![0usize; x.cols];
        for (c, a) in arg.iter_mut().enumerate() {
            let mut best = x.at(0, c);
            for r in 1..x.rows {
                if x.at(r, c) > best {
                    best = x.at(r, c);
                    *a = r;
                }
            }
            out.data[c] = best;
        }
        self.branches.extend(arg.iter().map(|&i| i as u64));
        self.push(out, Op::MaxRows(a, arg))
    }

    /// Means of consecutive row blocks of length `seg` ((n*seg) x D -> n x D).
    pub fn segment_mean_rows(&mut self, a: Var, seg: usize) -> Var {
        let x = self.value(a);
        assert!(seg > 0 && x.rows.is_multiple_of(seg), "segment length");
        let n = x.rows / seg;
        let mut out = Mat::zeros(n, x.cols);
        let mut col = vec![0.0; seg];
        for i in 0..n {
            for c in 0..x.cols {
                for (k, slot) in col.iter_mut().enumerate() {
                    *slot = x.at(i * seg + k, c);
                }
                *out.at_mut(i, c) = tree_sum(&col) / seg as f64;
            }
        }
        self.push(out, Op::SegmentMeanRows(a, seg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start <= end && end <= x.rows, "row slice");
        let v = Mat::from_vec(
            end - start,
            x.cols,
            x.data[start * x.cols..end * x.cols].to_vec(),
        );
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start <= end && end <= x.cols, "column slice");
        let mut v = Mat::zeros(x.rows, end - start);
        for r in 0..x.rows {
            v.data[r * (end - start)..(r + 1) * (end - start)]
                .copy_from_slice(&x.row(r)[start..end]);
        }
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols, cols, "concat_rows width");
            data.extend_from_slice(&x.data);
            rows += x.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows, rows, "concat_cols height");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + x.cols].copy_from_slice(x.row(r));
            }
            off += x.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Builds a `rows x cols` matrix whose entry `i` (row-major) is entry
    /// `index[i]` of `a` in row-major order, or zero for `None`.
    pub fn gather(&mut self, a: Var, rows: usize, cols: usize, index: Vec<Option<usize>>) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let x = self.value(a);
        let data = index
            .iter()
            .map(|i| i.map_or(0.0, |i| x.data[i]))
            .collect();
        self.push(Mat::from_vec(rows, cols, data), Op::Gather(a, index))
    }

    /// All distances between rows of `a` (n x D) and rows of `b` (m x D).
    pub fn distances(&mut self, a: Var, b: Var, kind: DistanceKind) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.cols, "distance dimension");
        let mut out = Mat::zeros(x.rows, y.rows);
        for i in 0..x.rows {
            for j in 0..y.rows {
                *out.at_mut(i, j) = vector_distance(x.row(i), y.row(j), kind);
            }
        }
        self.push(out, Op::Distances(a, b, kind))
    }

    /// `max(0, min(a) - margin)` over all entries of `a`.
    pub fn hinge_min(&mut self, a: Var, margin: f64) -> Var {
        let x = self.value(a);
        assert!(!x.data.is_empty(), "hinge_min of nothing");
        let (arg, min) = x
            .data
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, v)| if v < best.1 { (i, v) } else { best });
        let active = min - margin > 0.0;
        self.branches.push(arg as u64);
        self.branches.push(active as u64);
        let v = if active { min - margin } else { 0.0 };
        self.push(Mat::scalar(v), Op::HingeMin(a, arg, active))
    }

    /// Mean over `triplets` of `max(d[a,p] - d[a,n] + margin, 0)` where `d` is
    /// a square distance matrix.
    pub fn triplet_batch_all(
        &mut self,
        dist: Var,
        triplets: Vec<(usize, usize, usize)>,
        margin: f64,
    ) -> Result<Var> {
        if triplets.is_empty() {
            return Err(Error::NoValidTriplets);
        }
        let d = self.value(dist);
        let terms: Vec<f64> = triplets
            .iter()
            .map(|&(a, p, n)| d.at(a, p) - d.at(a, n) + margin)
            .collect();
        let active: Vec<bool> = terms.iter().map(|&t| t > 0.0).collect();
        let hinged: Vec<f64> = terms.iter().map(|&t| t.max(0.0)).collect();
        let v = tree_sum(&hinged) / triplets.len() as f64;
        self.branches.extend(active.iter().map(|&a| a as u64));
        Ok(self.push(Mat::scalar(v), Op::TripletBatchAll(dist, triplets, active)))
    }

    /// Mean of `-ln(max(p[i, labels[i]], eps))` over the rows of `probs`.
    pub fn cross_entropy(&mut self, probs: Var, labels: Vec<usize>) -> Var {
        let p = self.value(probs);
        assert_eq!(p.rows, labels.len(), "one label per row");
        let mut clamped = Vec::with_capacity(labels.len());
        let mut terms = Vec::with_capacity(labels.len());
        for (r, &l) in labels.iter().enumerate() {
            let q = p.at(r, l);
            let c = q < PROB_EPS;
            if c {
                CLAMPED_PROBABILITIES.fetch_add(1, Ordering::Relaxed);
            }
            clamped.push(c);
            terms.push(-q.max(PROB_EPS).ln());
        }
        self.branches.extend(clamped.iter().map(|&c| c as u64));
        let v = tree_sum(&terms) / labels.len() as f64;
        self.push(Mat::scalar(v), Op::CrossEntropy(probs, labels, clamped))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(!x.data.is_empty(), "mean of nothing");
        let v = tree_sum(&x.data) / x.data.len() as f64;
        self.push(Mat::scalar(v), Op::MeanAll(a))
    }

    /// `sum_i w_i * x_i` over equally shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "weighted sum of nothing");
        let shape = self.value(terms[0].0).shape();
        let mut out = Mat::zeros(shape.0, shape.1);
        for &(v, w) in terms {
            let x = self.value(v);
            assert_eq!(x.shape(), shape, "weighted_sum shape");
            for (o, a) in out.data.iter_mut().zip(&x.data) {
                *o += w * a;
            }
        }
        self.push(out, Op::WeightedSum(terms.to_vec()))
    }

    /// Gradients of the scalar node `loss` w.r.t. every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::scalar(1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(x) => x.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul(&y.transpose()));
                    acc(&mut grads, *b, x.transpose().matmul(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, b) => {
                    let gb = Self::column_reduce(&g, |c| c.iter().sum());
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let mut ga = g.clone();
                    ga.data.iter_mut().for_each(|x| *x *= s);
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g.clone();
                    for (x, y) in ga.data.iter_mut().zip(&node.value.data) {
                        *x *= 1.0 - y * y;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    for (x, y) in ga.data.iter_mut().zip(&node.value.data) {
                        if *y <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let s = dot(g.row(r), y.row(r));
                        for c in 0..y.cols {
                            *ga.at_mut(r, c) = y.at(r, c) * (g.at(r, c) - s);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::L2NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let n = dot(x.row(r), x.row(r)).sqrt();
                        if n == 0.0 {
                            continue;
                        }
                        let s = dot(g.row(r), y.row(r));
                        for c in 0..x.cols {
                            *ga.at_mut(r, c) = (g.at(r, c) - y.at(r, c) * s) / n;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let n = x.rows as f64;
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        for c in 0..x.cols {
                            *ga.at_mut(r, c) = g.data[c] / n;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumRows(a) => {
                    let x = self.value(*a);
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        ga.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(&g.data);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MaxRows(a, arg) => {
                    let x = self.value(*a);
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for (c, &r) in arg.iter().enumerate() {
                        *ga.at_mut(r, c) = g.data[c];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SegmentMeanRows(a, seg) => {
                    let x = self.value(*a);
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        for c in 0..x.cols {
                            *ga.at_mut(r, c) = g.at(r / seg, c) / *seg as f64;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let x = self.value(*a);
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    ga.data[start * x.cols..start * x.cols + g.data.len()].copy_from_slice(&g.data);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start, end) => {
                    let x = self.value(*a);
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        ga.data[r * x.cols + start..r * x.cols + end].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let x = self.value(p);
                        let n = x.data.len();
                        acc(
                            &mut grads,
                            p,
                            Mat::from_vec(x.rows, x.cols, g.data[off..off + n].to_vec()),
                        );
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let x = self.value(p);
                        let mut gp = Mat::zeros(x.rows, x.cols);
                        for r in 0..x.rows {
                            gp.data[r * x.cols..(r + 1) * x.cols]
                                .copy_from_slice(&g.row(r)[off..off + x.cols]);
                        }
                        off += x.cols;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::Gather(a, index) => {
                    let x = self.value(*a);
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for (gi, src) in g.data.iter().zip(index) {
                        if let Some(s) = src {
                            ga.data[*s] += gi;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Distances(a, b, kind) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    let mut gb = Mat::zeros(y.rows, y.cols);
                    for i in 0..x.rows {
                        for j in 0..y.rows {
                            let w = g.at(i, j);
                            if w == 0.0 {
                                continue;
                            }
                            let (du, dv) = vector_distance_grad(x.row(i), y.row(j), *kind);
                            for c in 0..x.cols {
                                *ga.at_mut(i, c) += w * du[c];
                                *gb.at_mut(j, c) += w * dv[c];
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::HingeMin(a, arg, active) => {
                    let x = self.value(*a);
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    if *active {
                        ga.data[*arg] = g.data[0];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::TripletBatchAll(d, triplets, active) => {
                    let x = self.value(*d);
                    let mut gd = Mat::zeros(x.rows, x.cols);
                    let w = g.data[0] / triplets.len() as f64;
                    for (&(a, p, n), &on) in triplets.iter().zip(active) {
                        if on {
                            *gd.at_mut(a, p) += w;
                            *gd.at_mut(a, n) -= w;
                        }
                    }
                    acc(&mut grads, *d, gd);
                }
                Op::CrossEntropy(p, labels, clamped) => {
                    let x = self.value(*p);
                    let mut gp = Mat::zeros(x.rows, x.cols);
                    let w = g.data[0] / labels.len() as f64;
                    for (r, (&l, &c)) in labels.iter().zip(clamped).enumerate() {
                        if !c {
                            *gp.at_mut(r, l) = -w / x.at(r, l);
                        }
                    }
                    acc(&mut grads, *p, gp);
                }
                Op::MeanAll(a) => {
                    let x = self.value(*a);
                    let n = x.data.len() as f64;
                    acc(
                        &mut grads,
                        *a,
                        Mat::from_vec(x.rows, x.cols, vec![g.data[0] / n; x.data.len()]),
                    );
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        let mut gv = g.clone();
                        gv.data.iter_mut().for_each(|x| *x *= w);
                        acc(&mut grads, v, gv);
                    }
                }
            }
            grads[idx] = Some(g);
        }

        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(loss)/d(input) for one leaf against central differences.
    fn check(build: impl Fn(&mut Graph, Var) -> Var, input: Mat) {
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let loss = build(&mut g, x);
        let analytic = g.backward(loss).wrt(x);
        let base_branches = g.branches().to_vec();
        let h = 1e-5;
        for i in 0..input.data.len() {
            let eval = |delta: f64| {
                let mut m = input.clone();
                m.data[i] += delta;
                let mut g = Graph::new();
                let x = g.leaf(m);
                let l = build(&mut g, x);
                (g.scalar(l), g.branches().to_vec())
            };
            let (fp, bp) = eval(h);
            let (fm, bm) = eval(-h);
            if bp != base_branches || bm != base_branches {
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "entry {i}: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn matmul_and_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = random(&mut rng, 4, 3);
        let b = random(&mut rng, 1, 3);
        check(
            move |g, x| {
                let w = g.leaf(w.clone());
                let b = g.leaf(b.clone());
                let y = g.matmul(x, w);
                let y = g.add_row(y, b);
                let y = g.tanh(y);
                g.mean_all(y)
            },
            random(&mut rng, 5, 4),
        );
    }

    #[test]
    fn softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(
            |g, x| {
                let p = g.softmax_rows(x);
                g.cross_entropy(p, vec![0, 2, 1])
            },
            random(&mut rng, 3, 4),
        );
    }

    #[test]
    fn reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random(&mut rng, 6, 3);
        check(
            |g, x| {
                let a = g.mean_rows(x);
                let b = g.sum_rows(x);
                let c = g.max_rows(x);
                let d = g.segment_mean_rows(x, 3);
                let d = g.sum_rows(d);
                let s = g.weighted_sum(&[(a, 0.3), (b, -0.7), (c, 1.1), (d, 0.5)]);
                let s = g.tanh(s);
                g.mean_all(s)
            },
            input,
        );
    }

    #[test]
    fn slicing_and_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(
            |g, x| {
                let a = g.slice_rows(x, 1, 3);
                let b = g.slice_cols(x, 0, 2);
                let bt = g.transpose(b);
                let d = g.matmul(bt, x);
                let c = g.concat_cols(&[a, d]);
                let e = g.concat_rows(&[c, c]);
                let e = g.tanh(e);
                let idx = vec![Some(0), None, Some(5), Some(5)];
                let f = g.gather(x, 2, 2, idx);
                let f = g.mean_all(f);
                let e = g.mean_all(e);
                g.weighted_sum(&[(e, 1.0), (f, 2.0)])
            },
            random(&mut rng, 4, 3),
        );
    }

    #[test]
    fn normalize_and_distances() {
        for kind in [DistanceKind::Euclidean, DistanceKind::Cosine] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            check(
                move |g, x| {
                    let n = g.l2_normalize_rows(x);
                    let a = g.slice_rows(x, 0, 2);
                    let d = g.distances(a, n, kind);
                    g.mean_all(d)
                },
                random(&mut rng, 4, 3),
            );
        }
    }

    #[test]
    fn hinges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [DistanceKind::Euclidean, DistanceKind::Cosine] {
            check(
                move |g, x| {
                    let d = g.distances(x, x, kind);
                    let t = g
                        .triplet_batch_all(d, vec![(0, 1, 2), (1, 0, 3), (2, 3, 0), (3, 2, 1)], 0.5)
                        .unwrap();
                    let r = g.slice_rows(x, 0, 1);
                    let rest = g.slice_rows(x, 1, 4);
                    let dd = g.distances(r, rest, kind);
                    let h = g.hinge_min(dd, 0.1);
                    g.weighted_sum(&[(t, 1.0), (h, 0.5)])
                },
                random(&mut rng, 4, 5),
            );
        }
    }

    #[test]
    fn relu_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check(
            |g, x| {
                let y = g.relu(x);
                g.mean_all(y)
            },
            random(&mut rng, 3, 3),
        );
    }

    #[test]
    fn distance_values() {
        assert_eq!(vector_distance(&[0.0, 0.0], &[3.0, 4.0], DistanceKind::Euclidean), 5.0);
        assert!((vector_distance(&[1.0, 0.0], &[0.0, 1.0], DistanceKind::Cosine) - 1.0).abs() < 1e-15);
        let before = zero_vector_distance_count();
        assert_eq!(vector_distance(&[0.0, 0.0], &[1.0, 1.0], DistanceKind::Cosine), 1.0);
        assert!(zero_vector_distance_count() > before);
    }

    #[test]
    fn empty_triplets_error() {
        let mut g = Graph::new();
        let d = g.leaf(Mat::zeros(2, 2));
        assert!(matches!(g.triplet_batch_all(d, vec![], 0.1), Err(Error::NoValidTriplets)));
    }

    #[test]
    fn clamp_counts_and_stays_finite() {
        let mut g = Graph::new();
        let p = g.leaf(Mat::from_rows(&[vec![1.0, 0.0]]));
        let before = clamped_probability_count();
        let l = g.cross_entropy(p, vec![1]);
        assert!((g.scalar(l) - (-PROB_EPS.ln())).abs() < 1e-9);
        assert!(clamped_probability_count() > before);
        let grads = g.backward(l);
        assert!(grads.wrt(p).is_finite());
    }

    #[test]
    fn tree_sum_matches_plain_sum() {
        let xs: Vec<f64> = (0..17).map(|i| i as f64).collect();
        assert_eq!(tree_sum(&xs), 136.0);
        assert_eq!(tree_sum(&[]), 0.0);
    }
}
