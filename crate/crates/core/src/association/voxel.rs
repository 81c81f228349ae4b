use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub fn voxel_cell(p: &Point3<f64>, voxel: f64) -> [i64; 3] {
    [
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    ]
}

/// (cell, sum, count, first point, first view)
type Cell = ([i64; 3], Vector3<f64>, u32, Point3<f64>, u32);

/// One point per occupied cell: the centroid of the cell's points, tagged with the view of the
/// cell's first point. Output order follows first occupancy.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud> {
    if !(voxel > 0.0) {
        return Err(Error::invalid("voxel size", "must be positive"));
    }
    let mut slots: HashMap<[i64; 3], usize> = HashMap::with_capacity(cloud.len());
    let mut acc: Vec<Cell> = Vec::new();
    for (p, view) in cloud.iter() {
        let cell = voxel_cell(p, voxel);
        match slots.get(&cell) {
            Some(&i) => {
                acc[i].1 += p.coords;
                acc[i].2 += 1;
            }
            None => {
                slots.insert(cell, acc.len());
                acc.push((cell, p.coords, 1, *p, view));
            }
        }
    }
    let mut out = PointCloud::with_capacity(acc.len());
    for (cell, sum, count, first, view) in acc {
        let centroid = Point3::from(sum / f64::from(count));
        // Rounding can push a centroid of boundary points into a neighbor cell.
        let rep = if voxel_cell(&centroid, voxel) == cell {
            centroid
        } else {
            first
        };
        out.push(rep, view);
    }
    Ok(out)
}
