//! Exact k-nearest-neighbor distances.
//!
//! Two interchangeable searches: an all-pairs scan and a kd-tree. Both
//! evaluate distances through [`squared_distance`] and return the square
//! root of the k-th smallest squared distance, so they agree bit for bit.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum KnnError {
    #[error("need at least {needed} candidate points for k={k}, have {have}")]
    InsufficientPoints { k: usize, needed: usize, have: usize },
    #[error("k must be >= 1")]
    ZeroK,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("point data length {len} is not a multiple of dim {dim}")]
    Ragged { len: usize, dim: usize },
}

/// Row-major set of points in R^d.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dim: usize,
    data: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self, KnnError> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(KnnError::Ragged { len: data.len(), dim });
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, KnnError> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(1);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(KnnError::DimensionMismatch(dim, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Subset in the order of `indices`.
    pub fn select(&self, indices: &[usize]) -> PointSet {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        PointSet { dim: self.dim, data }
    }

    pub fn scaled(&self, a: f64) -> PointSet {
        PointSet { dim: self.dim, data: self.data.iter().map(|x| x * a).collect() }
    }

    /// Concatenate point sets of equal dimension.
    pub fn stack(sets: &[&PointSet]) -> Result<PointSet, KnnError> {
        let dim = sets.first().map(|s| s.dim).unwrap_or(1);
        let mut data = Vec::new();
        for s in sets {
            if s.dim != dim {
                return Err(KnnError::DimensionMismatch(dim, s.dim));
            }
            data.extend_from_slice(&s.data);
        }
        Ok(PointSet { dim, data })
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let t = a[i] - b[i];
        s += t * t;
    }
    s
}

fn check_k(k: usize, have: usize) -> Result<(), KnnError> {
    if k == 0 {
        return Err(KnnError::ZeroK);
    }
    if have < k {
        return Err(KnnError::InsufficientPoints { k, needed: k, have });
    }
    Ok(())
}

/// All-pairs scan: distance from `query` to its k-th nearest point,
/// skipping the point at index `exclude`.
pub fn brute_kth(points: &PointSet, query: &[f64], k: usize, exclude: Option<usize>) -> Result<f64, KnnError> {
    if query.len() != points.dim {
        return Err(KnnError::DimensionMismatch(points.dim, query.len()));
    }
    let have = points.len() - usize::from(exclude.is_some_and(|e| e < points.len()));
    check_k(k, have)?;
    let mut d2: Vec<f64> = (0..points.len())
        .filter(|&j| Some(j) != exclude)
        .map(|j| squared_distance(query, points.row(j)))
        .collect();
    let (_, kth, _) = d2.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(kth.sqrt())
}

/// k-th nearest neighbor distance from an arbitrary query.
///
/// With `exclude_self`, one point exactly equal to the query (if any) is
/// left out, so a query drawn from `points` does not find itself at 0.
pub fn kth_nn_distance(points: &PointSet, query: &[f64], k: usize, exclude_self: bool) -> Result<f64, KnnError> {
    let exclude = if exclude_self {
        (0..points.len()).find(|&j| points.row(j) == query)
    } else {
        None
    };
    brute_kth(points, query, k, exclude)
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate(f64);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

const LEAF_SIZE: usize = 16;

/// Static kd-tree over a borrowed point set.
pub struct KdTree<'a> {
    points: &'a PointSet,
    order: Vec<usize>,
    root: Node,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a PointSet) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = Self::build_node(points, &mut order, 0);
        Self { points, order, root }
    }

    fn build_node(points: &PointSet, order: &mut [usize], offset: usize) -> Node {
        let n = order.len();
        if n <= LEAF_SIZE {
            return Node::Leaf { start: offset, end: offset + n };
        }
        // split on the widest coordinate
        let d = points.dim();
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..d {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in order.iter() {
                let v = points.row(i)[c];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best.1 {
                best = (c, hi - lo);
            }
        }
        let (dim, spread) = best;
        if spread <= 0.0 {
            return Node::Leaf { start: offset, end: offset + n };
        }
        let mid = n / 2;
        order.select_nth_unstable_by(mid, |&a, &b| points.row(a)[dim].total_cmp(&points.row(b)[dim]));
        let value = points.row(order[mid])[dim];
        let (left, right) = order.split_at_mut(mid);
        Node::Split {
            dim,
            value,
            left: Box::new(Self::build_node(points, left, offset)),
            right: Box::new(Self::build_node(points, right, offset + mid)),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same contract as [`brute_kth`].
    pub fn kth(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Result<f64, KnnError> {
        if query.len() != self.points.dim() {
            return Err(KnnError::DimensionMismatch(self.points.dim(), query.len()));
        }
        let have = self.points.len() - usize::from(exclude.is_some_and(|e| e < self.points.len()));
        check_k(k, have)?;
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        self.search(&self.root, query, k, exclude, &mut heap);
        Ok(heap.peek().expect("k >= 1 candidates found").0.sqrt())
    }

    fn search(&self, node: &Node, q: &[f64], k: usize, exclude: Option<usize>, heap: &mut BinaryHeap<Candidate>) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let d2 = squared_distance(q, self.points.row(i));
                    if heap.len() < k {
                        heap.push(Candidate(d2));
                    } else if d2 < heap.peek().unwrap().0 {
                        heap.pop();
                        heap.push(Candidate(d2));
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[*dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, heap);
                let gap = diff * diff;
                if heap.len() < k || gap <= heap.peek().unwrap().0 {
                    self.search(far, q, k, exclude, heap);
                }
            }
        }
    }
}

/// Which exact search to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Search {
    BruteForce,
    #[default]
    KdTree,
}

/// Prepared index over one point set.
pub enum Index<'a> {
    Brute(&'a PointSet),
    Tree(KdTree<'a>),
}

impl<'a> Index<'a> {
    pub fn new(points: &'a PointSet, search: Search) -> Self {
        match search {
            Search::BruteForce => Index::Brute(points),
            Search::KdTree => Index::Tree(KdTree::build(points)),
        }
    }

    pub fn kth(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Result<f64, KnnError> {
        match self {
            Index::Brute(p) => brute_kth(p, query, k, exclude),
            Index::Tree(t) => t.kth(query, k, exclude),
        }
    }
}
