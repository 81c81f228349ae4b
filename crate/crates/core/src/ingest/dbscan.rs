//! DBSCAN clustering used to strip depth noise from back-projected masks.

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::spatial::KdTree;

/// Cluster label per point; `None` is noise. Clusters are numbered in order of their seed
/// point's index, and a border point reachable from several clusters joins the first.
pub fn dbscan_labels(cloud: &PointCloud, eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let points = cloud.points();
    let tree = KdTree::build(points);
    let n = points.len();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next_cluster = 0;

    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        visited[seed] = true;
        let neighbors = tree.within_radius(&points[seed], eps);
        if neighbors.len() < min_pts {
            continue;
        }
        let cluster = next_cluster;
        next_cluster += 1;
        labels[seed] = Some(cluster);
        let mut queue = std::collections::VecDeque::from(neighbors);
        while let Some(q) = queue.pop_front() {
            if labels[q].is_none() {
                labels[q] = Some(cluster);
            }
            if visited[q] {
                continue;
            }
            visited[q] = true;
            let nq = tree.within_radius(&points[q], eps);
            if nq.len() >= min_pts {
                queue.extend(nq.into_iter().filter(|&r| !visited[r] || labels[r].is_none()));
            }
        }
    }
    labels
}

/// Keeps only the largest DBSCAN cluster, preserving point order and provenance. Equal-size
/// clusters resolve to the one containing the smallest original point index.
pub fn denoise(cloud: &PointCloud, eps: f64, min_pts: usize) -> Result<PointCloud> {
    if !(eps > 0.0) {
        return Err(Error::invalid("dbscan", "eps must be positive"));
    }
    if min_pts == 0 {
        return Err(Error::invalid("dbscan", "min_pts must be at least 1"));
    }
    let labels = dbscan_labels(cloud, eps, min_pts);
    // (size, smallest index) per cluster
    let mut stats: Vec<(usize, usize)> = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        if let Some(c) = *label {
            if c >= stats.len() {
                stats.resize(c + 1, (0, usize::MAX));
            }
            stats[c].0 += 1;
            stats[c].1 = stats[c].1.min(i);
        }
    }
    let best = stats
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(c, _)| c);
    let Some(best) = best else {
        return Ok(PointCloud::new());
    };
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Some(best)).collect();
    Ok(cloud.select(&keep))
}
