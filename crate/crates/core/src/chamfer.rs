//! Nearest-neighbor queries and the one-way Chamfer distance.

use crate::error::{Error, Result};
use crate::geometry::{dist2, Vec3};

const LEAF: usize = 8;

/// A static 3-d tree over a point list. Queries return the same squared
/// distance as a linear scan since both evaluate `dist2` on the winning pair.
#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [Vec3],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Vec3]) -> Self {
        let mut tree = KdTree { points, order: (0..points.len()).collect(), nodes: Vec::new() };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let slice = &self.order[start..end];
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in slice {
            for c in 0..3 {
                lo[c] = lo[c].min(self.points[i][c]);
                hi[c] = hi[c].max(self.points[i][c]);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
        let mid = start + (end - start) / 2;
        let pts = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let value = pts[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Index and squared distance of the nearest point; ties go to the lower index.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        Some(best)
    }

    fn search(&self, node: usize, q: &Vec3, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(q, &self.points[i]);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

pub fn nearest_brute(q: &Vec3, tgt: &[Vec3]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in tgt.iter().enumerate() {
        let d = dist2(q, p);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best
}

/// For every source point, the index of its nearest target point.
pub fn nearest_indices(src: &[Vec3], tgt: &[Vec3]) -> Result<Vec<usize>> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::EmptySet);
    }
    let tree = KdTree::build(tgt);
    Ok(src.iter().map(|q| tree.nearest(q).expect("nonempty tree").0).collect())
}

/// Σ over source points of the squared distance to the nearest target point.
pub fn chamfer_one_way(src: &[Vec3], tgt: &[Vec3]) -> Result<f64> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::EmptySet);
    }
    let tree = KdTree::build(tgt);
    Ok(src.iter().map(|q| tree.nearest(q).expect("nonempty tree").1).sum())
}

pub fn chamfer_one_way_brute(src: &[Vec3], tgt: &[Vec3]) -> Result<f64> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(src.iter().map(|q| nearest_brute(q, tgt).expect("nonempty").1).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn subset_is_zero() {
        let tgt = vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        assert_eq!(chamfer_one_way(&tgt[1..], &tgt).unwrap(), 0.0);
    }

    #[test]
    fn nearer_neighbor_squared() {
        let v = chamfer_one_way(&[[0.0, 0.0, 0.0]], &[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn empty_errors() {
        assert!(matches!(chamfer_one_way(&[], &[[0.0; 3]]), Err(Error::EmptySet)));
        assert!(matches!(chamfer_one_way(&[[0.0; 3]], &[]), Err(Error::EmptySet)));
    }

    #[test]
    fn tree_matches_scan_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec3> {
            (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0)]).collect()
        };
        let src = cloud(&mut rng, 200);
        let tgt = cloud(&mut rng, 300);
        let a = chamfer_one_way(&src, &tgt).unwrap();
        let b = chamfer_one_way_brute(&src, &tgt).unwrap();
        assert!((a - b).abs() <= 1e-9 * b.max(1.0));
    }

    #[test]
    fn duplicate_points_in_target() {
        let tgt = vec![[0.5, 0.5, 0.5]; 40];
        let src = vec![[0.0; 3], [1.0, 1.0, 1.0]];
        assert!((chamfer_one_way(&src, &tgt).unwrap() - 1.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn permutation_invariant(
            pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 2..40),
            tgt in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..40),
            rot in 0usize..40,
        ) {
            let a = chamfer_one_way(&pts, &tgt).unwrap();
            let mut p2 = pts.clone();
            let r = rot % p2.len();
            p2.rotate_left(r);
            let mut t2 = tgt.clone();
            t2.reverse();
            let b = chamfer_one_way(&p2, &t2).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
            prop_assert!(a >= 0.0);
        }
    }
}
