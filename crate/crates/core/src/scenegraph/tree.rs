use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geometry::{Aabb, ObjectId};

/// Intersection over union of two boxes. Zero-volume boxes score 1 against an identical box
/// and 0 otherwise.
pub fn bbox_iou(a: &Aabb, b: &Aabb) -> f64 {
    let (va, vb) = (a.volume(), b.volume());
    if va <= 0.0 || vb <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    let inter = a.intersection(b).map_or(0.0, |i| i.volume());
    let union = va + vb - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateEdge {
    pub source_id: ObjectId,
    pub target_id: ObjectId,
    pub iou: f64,
}

/// Every pair with positive IoU, source < target, ordered by id pair.
pub fn overlap_edges(boxes: &[(ObjectId, Aabb)]) -> Vec<CandidateEdge> {
    let mut sorted: Vec<&(ObjectId, Aabb)> = boxes.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    let mut edges = Vec::new();
    for (i, (a, ba)) in sorted.iter().enumerate() {
        for (b, bb) in &sorted[i + 1..] {
            let iou = bbox_iou(ba, bb);
            if iou > 0.0 {
                edges.push(CandidateEdge {
                    source_id: *a,
                    target_id: *b,
                    iou,
                });
            }
        }
    }
    edges
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            Ordering::Less => self.parent[ra] = rb,
            Ordering::Greater => self.parent[rb] = ra,
            Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Maximum-IoU spanning forest of the overlap graph (Kruskal). Equal weights are taken in
/// lexicographic id-pair order. Output is sorted by id pair.
pub fn prune_to_tree(boxes: &[(ObjectId, Aabb)]) -> Vec<CandidateEdge> {
    let mut ids: Vec<ObjectId> = boxes.iter().map(|(id, _)| *id).collect();
    ids.sort_unstable();
    let index = |id: ObjectId| ids.binary_search(&id).expect("id from input");

    let mut edges = overlap_edges(boxes);
    edges.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then((a.source_id, a.target_id).cmp(&(b.source_id, b.target_id)))
    });
    let mut sets = DisjointSet::new(ids.len());
    let mut kept: Vec<CandidateEdge> = edges
        .into_iter()
        .filter(|e| sets.union(index(e.source_id), index(e.target_id)))
        .collect();
    kept.sort_by_key(|e| (e.source_id, e.target_id));
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Point3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(min: [f64; 3], max: [f64; 3]) -> Aabb {
        Aabb::new(Point3::from(min), Point3::from(max)).unwrap()
    }

    /// Best total IoU over every spanning forest, by backtracking over edge subsets.
    pub(crate) fn exhaustive_best(n: usize, edges: &[(usize, usize, f64)]) -> (f64, usize) {
        let mut sets = DisjointSet::new(n);
        let components = n - edges.iter().filter(|(a, b, _)| sets.union(*a, *b)).count();
        let need = n - components;
        fn go(
            edges: &[(usize, usize, f64)],
            n: usize,
            chosen: &mut Vec<usize>,
            start: usize,
            need: usize,
            best: &mut f64,
            count: &mut usize,
        ) {
            if chosen.len() == need {
                let mut s = DisjointSet::new(n);
                if chosen.iter().all(|&i| s.union(edges[i].0, edges[i].1)) {
                    *count += 1;
                    *best = best.max(chosen.iter().map(|&i| edges[i].2).sum());
                }
                return;
            }
            for i in start..edges.len() {
                if edges.len() - i < need - chosen.len() {
                    break;
                }
                chosen.push(i);
                go(edges, n, chosen, i + 1, need, best, count);
                chosen.pop();
            }
        }
        let (mut best, mut count) = (f64::NEG_INFINITY, 0);
        go(edges, n, &mut Vec::new(), 0, need, &mut best, &mut count);
        (best.max(0.0), count)
    }

    #[test]
    fn iou_cases() {
        let unit = bx([0.0; 3], [1.0; 3]);
        assert_eq!(bbox_iou(&unit, &unit), 1.0);
        assert_eq!(bbox_iou(&unit, &bx([2.0; 3], [3.0; 3])), 0.0);
        let shifted = bx([0.5, 0.0, 0.0], [1.5, 1.0, 1.0]);
        assert!((bbox_iou(&unit, &shifted) - 1.0 / 3.0).abs() < 1e-12);
        let flat = bx([0.0; 3], [1.0, 1.0, 0.0]);
        assert_eq!(bbox_iou(&flat, &flat), 1.0);
        assert_eq!(bbox_iou(&flat, &unit), 0.0);
        // touching faces have zero-volume overlap
        assert_eq!(bbox_iou(&unit, &bx([1.0, 0.0, 0.0], [2.0, 1.0, 1.0])), 0.0);
    }

    #[test]
    fn tree_small_cases() {
        let two = vec![(4, bx([0.0; 3], [1.0; 3])), (9, bx([0.5; 3], [1.5; 3]))];
        let t = prune_to_tree(&two);
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].source_id, t[0].target_id), (4, 9));

        let forest = vec![
            (0, bx([0.0; 3], [1.0; 3])),
            (1, bx([0.5; 3], [1.5; 3])),
            (2, bx([0.8; 3], [1.8; 3])),
            (3, bx([10.0; 3], [11.0; 3])),
            (4, bx([10.2; 3], [11.2; 3])),
            (5, bx([-9.0; 3], [-8.0; 3])),
        ];
        assert_eq!(prune_to_tree(&forest).len(), 3);
        assert!(prune_to_tree(&[(0, bx([0.0; 3], [1.0; 3]))]).is_empty());
    }

    #[test]
    fn four_node_complete_graph_against_all_sixteen_trees() {
        let boxes = vec![
            (0, bx([0.0; 3], [1.0; 3])),
            (1, bx([0.1, 0.0, 0.0], [1.1, 1.0, 1.0])),
            (2, bx([0.3, 0.1, 0.0], [1.3, 1.1, 1.0])),
            (3, bx([0.45, 0.2, 0.1], [1.45, 1.2, 1.1])),
        ];
        let cand = overlap_edges(&boxes);
        assert_eq!(cand.len(), 6);
        let e: Vec<(usize, usize, f64)> = cand
            .iter()
            .map(|c| (c.source_id as usize, c.target_id as usize, c.iou))
            .collect();
        let (best, trees) = exhaustive_best(4, &e);
        assert_eq!(trees, 16);
        let got = prune_to_tree(&boxes);
        assert_eq!(got.len(), 3);
        assert!((got.iter().map(|e| e.iou).sum::<f64>() - best).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_smallest_pair() {
        // three identical boxes: every edge has IoU 1
        let b = bx([0.0; 3], [1.0; 3]);
        let t = prune_to_tree(&[(2, b), (0, b), (1, b)]);
        let pairs: Vec<_> = t.iter().map(|e| (e.source_id, e.target_id)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2)]);
    }

    #[test]
    fn random_graphs_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(1..=7);
            let boxes: Vec<(ObjectId, Aabb)> = (0..n)
                .map(|i| {
                    let lo: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0));
                    let hi: [f64; 3] = std::array::from_fn(|k| lo[k] + rng.random_range(0.2..1.5));
                    (i as ObjectId, bx(lo, hi))
                })
                .collect();
            let e: Vec<_> = overlap_edges(&boxes)
                .iter()
                .map(|c| (c.source_id as usize, c.target_id as usize, c.iou))
                .collect();
            let (best, _) = exhaustive_best(n, &e);
            let got: f64 = prune_to_tree(&boxes).iter().map(|e| e.iou).sum();
            assert!((got - best).abs() < 1e-9, "{got} vs {best}");
        }
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(
            a in prop::array::uniform6(-2.0f64..2.0),
            b in prop::array::uniform6(-2.0f64..2.0),
        ) {
            let mk = |v: [f64; 6]| bx(
                [v[0].min(v[3]), v[1].min(v[4]), v[2].min(v[5])],
                [v[0].max(v[3]), v[1].max(v[4]), v[2].max(v[5])],
            );
            let (x, y) = (mk(a), mk(b));
            let i = bbox_iou(&x, &y);
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert_eq!(i, bbox_iou(&y, &x));
            if x.volume() > 0.0 {
                prop_assert!((bbox_iou(&x, &x) - 1.0).abs() < 1e-12);
            }
        }
    }
}
