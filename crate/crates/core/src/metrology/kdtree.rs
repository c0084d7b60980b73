//! Static 3-d tree for nearest-neighbour queries.

use nalgebra::Vector3;

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Point indices arranged as an implicit balanced tree: the median of
    /// each slice is the node, the halves are its subtrees.
    order: Vec<usize>,
}

const LEAF: usize = 8;

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> KdTree {
        let mut order: Vec<usize> = (0..points.len()).collect();
        build_rec(points, &mut order, 0);
        KdTree { points: points.to_vec(), order }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &Vector3<f64> {
        &self.points[i]
    }

    /// Index and squared distance of the closest point; ties go to the
    /// lower index.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        let mut best = None;
        self.search(q, &self.order, 0, &mut best);
        best
    }

    fn search(&self, q: &Vector3<f64>, slice: &[usize], depth: usize, best: &mut Option<(usize, f64)>) {
        let consider = |i: usize, best: &mut Option<(usize, f64)>| {
            let d = (self.points[i] - q).norm_squared();
            if best.is_none_or(|(bi, bd)| d < bd || (d == bd && i < bi)) {
                *best = Some((i, d));
            }
        };
        if slice.len() <= LEAF {
            for &i in slice {
                consider(i, best);
            }
            return;
        }
        let axis = depth % 3;
        let mid = slice.len() / 2;
        let node = slice[mid];
        consider(node, best);
        let diff = q[axis] - self.points[node][axis];
        let (near, far) = if diff < 0.0 { (&slice[..mid], &slice[mid + 1..]) } else { (&slice[mid + 1..], &slice[..mid]) };
        self.search(q, near, depth + 1, best);
        if best.is_none_or(|(_, bd)| diff * diff <= bd) {
            self.search(q, far, depth + 1, best);
        }
    }
}

fn build_rec(points: &[Vector3<f64>], slice: &mut [usize], depth: usize) {
    if slice.len() <= LEAF {
        return;
    }
    let axis = depth % 3;
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    let (left, right) = slice.split_at_mut(mid);
    build_rec(points, left, depth + 1);
    build_rec(points, &mut right[1..], depth + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pt = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let pts: Vec<_> = (0..2000).map(|_| pt()).collect();
        let tree = KdTree::build(&pts);
        for _ in 0..500 {
            let q = pt() * 1.5;
            let scan = (0..pts.len())
                .map(|i| (i, (pts[i] - q).norm_squared()))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .unwrap();
            assert_eq!(tree.nearest(&q), Some(scan));
        }
    }
}
