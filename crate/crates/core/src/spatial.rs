//! Spatial indexes: a static 3D kd-tree for point queries and a bucketed box index for the
//! object-overlap prefilter.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::Point3;

use crate::geometry::{Aabb, ObjectId};

const LEAF_SIZE: usize = 8;

#[inline]
pub fn dist2(a: &Point3<f64>, b: &Point3<f64>) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Immutable kd-tree over a borrowed-at-build-time point set. Queries return indices into the
/// original slice.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(points: &[Point3<f64>]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// True if any indexed point lies within `radius` (inclusive) of `query`.
    pub fn any_within(&self, query: &Point3<f64>, radius: f64) -> bool {
        if self.nodes.is_empty() {
            return false;
        }
        let r2 = radius * radius;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            match self.nodes[id] {
                Node::Leaf { start, end } => {
                    if self.order[start..end]
                        .iter()
                        .any(|&i| dist2(&self.points[i], query) <= r2)
                    {
                        return true;
                    }
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    let d = query[axis] - value;
                    // Points equal to the split value may sit on either side.
                    if d <= radius {
                        stack.push(left);
                    }
                    if d >= -radius {
                        stack.push(right);
                    }
                }
            }
        }
        false
    }

    /// Indices of all points within `radius` (inclusive), ascending.
    pub fn within_radius(&self, query: &Point3<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            return out;
        }
        let r2 = radius * radius;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            match self.nodes[id] {
                Node::Leaf { start, end } => out.extend(
                    self.order[start..end]
                        .iter()
                        .copied()
                        .filter(|&i| dist2(&self.points[i], query) <= r2),
                ),
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    let d = query[axis] - value;
                    if d <= radius {
                        stack.push(left);
                    }
                    if d >= -radius {
                        stack.push(right);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Nearest point as `(index, squared distance)`; ties go to the lowest index.
    pub fn nearest(&self, query: &Point3<f64>) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(0, query, &mut best);
        Some(best)
    }

    fn nearest_rec(&self, id: usize, query: &Point3<f64>, best: &mut (usize, f64)) {
        match self.nodes[id] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(&self.points[i], query);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let d = query[axis] - value;
                let (near, far) = if d <= 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, query, best);
                if d * d <= best.1 {
                    self.nearest_rec(far, query, best);
                }
            }
        }
    }
}

/// Uniform-grid bucket index over object boxes. Answers "which objects might overlap this box"
/// with a superset that callers refine with an exact intersection test.
#[derive(Debug, Clone)]
pub struct BoxIndex {
    cell: f64,
    buckets: HashMap<[i64; 3], BTreeSet<ObjectId>>,
    boxes: BTreeMap<ObjectId, Aabb>,
}

impl BoxIndex {
    pub fn new(cell: f64) -> Self {
        assert!(cell > 0.0, "box index cell size must be positive");
        BoxIndex {
            cell,
            buckets: HashMap::new(),
            boxes: BTreeMap::new(),
        }
    }

    fn cells(&self, b: &Aabb) -> impl Iterator<Item = [i64; 3]> {
        let lo: [i64; 3] = std::array::from_fn(|i| (b.min[i] / self.cell).floor() as i64);
        let hi: [i64; 3] = std::array::from_fn(|i| (b.max[i] / self.cell).floor() as i64);
        (lo[0]..=hi[0]).flat_map(move |x| (lo[1]..=hi[1]).flat_map(move |y| (lo[2]..=hi[2]).map(move |z| [x, y, z])))
    }

    pub fn insert(&mut self, id: ObjectId, b: Aabb) {
        self.remove(id);
        let cells: Vec<_> = self.cells(&b).collect();
        for c in cells {
            self.buckets.entry(c).or_default().insert(id);
        }
        self.boxes.insert(id, b);
    }

    pub fn remove(&mut self, id: ObjectId) -> Option<Aabb> {
        let old = self.boxes.remove(&id)?;
        let cells: Vec<_> = self.cells(&old).collect();
        for c in cells {
            if let Some(set) = self.buckets.get_mut(&c) {
                set.remove(&id);
                if set.is_empty() {
                    self.buckets.remove(&c);
                }
            }
        }
        Some(old)
    }

    pub fn get(&self, id: ObjectId) -> Option<&Aabb> {
        self.boxes.get(&id)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Ids of indexed boxes intersecting `query` (closed intervals), ascending.
    pub fn overlapping(&self, query: &Aabb) -> Vec<ObjectId> {
        let mut hits = BTreeSet::new();
        for c in self.cells(query) {
            if let Some(set) = self.buckets.get(&c) {
                hits.extend(set.iter().copied().filter(|id| self.boxes[id].intersects(query)));
            }
        }
        hits.into_iter().collect()
    }
}
