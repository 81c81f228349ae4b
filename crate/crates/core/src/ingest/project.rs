use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose};

use super::{FrameRecord, Mask};

/// Pinhole back-projection of the mask's valid-depth pixels into the camera frame
/// (x right, y down, z forward). Pixels without valid depth are skipped.
pub fn backproject_mask(frame: &FrameRecord, mask: &Mask) -> Result<PointCloud> {
    let k = &frame.intrinsics;
    let total = k.pixel_count();
    let mut cloud = PointCloud::with_capacity(mask.len());
    for &idx in mask.pixels() {
        if idx as usize >= total {
            return Err(Error::invalid(
                "mask",
                format!("pixel index {idx} outside {}x{} image", k.width, k.height),
            ));
        }
        let u = idx % k.width;
        let v = idx / k.width;
        let Some(z) = frame.depth.at(u, v) else {
            continue;
        };
        let x = (f64::from(u) - k.cx) * z / k.fx;
        let y = (f64::from(v) - k.cy) * z / k.fy;
        cloud.push(Point3::new(x, y, z), frame.frame_id);
    }
    Ok(cloud)
}

pub fn to_map_frame(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    cloud.transformed(pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use crate::ingest::DepthGrid;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn frame(depth: DepthGrid, k: CameraIntrinsics) -> FrameRecord {
        FrameRecord {
            frame_id: 4,
            depth,
            pose: Pose::identity(),
            intrinsics: k,
            color_ref: None,
        }
    }

    fn intrinsics(w: u32, h: u32, f: f64, c: f64) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: c,
            cy: c,
            width: w,
            height: h,
        }
    }

    #[test]
    fn principal_point_projects_onto_axis() {
        let k = intrinsics(101, 101, 80.0, 50.0);
        let f = frame(DepthGrid::filled(101, 101, 2.0), k);
        let cloud = backproject_mask(&f, &Mask::from_pixels(vec![50 * 101 + 50])).unwrap();
        assert_eq!(cloud.points(), &[Point3::new(0.0, 0.0, 2.0)]);
        assert_eq!(cloud.views(), &[4]);
    }

    #[test]
    fn pinhole_by_hand() {
        let k = intrinsics(200, 100, 100.0, 50.0);
        let f = frame(DepthGrid::filled(200, 100, 1.0), k);
        let cloud = backproject_mask(&f, &Mask::from_pixels(vec![50 * 200 + 150])).unwrap();
        assert_eq!(cloud.points(), &[Point3::new(1.0, 0.0, 1.0)]);
    }

    #[test]
    fn invalid_depth_skipped() {
        let k = intrinsics(4, 4, 10.0, 2.0);
        let f = frame(DepthGrid::filled(4, 4, f32::NAN), k);
        let cloud = backproject_mask(&f, &Mask::from_pixels((0..16).collect())).unwrap();
        assert!(cloud.is_empty());

        let mut depth = DepthGrid::filled(4, 4, 0.0);
        depth.set(1, 1, 3.0);
        let f = frame(depth, k);
        let cloud = backproject_mask(&f, &Mask::from_pixels((0..16).collect())).unwrap();
        assert_eq!(cloud.len(), 1);
    }

    #[test]
    fn out_of_bounds_pixel_is_error() {
        let k = intrinsics(4, 4, 10.0, 2.0);
        let f = frame(DepthGrid::filled(4, 4, 1.0), k);
        assert!(backproject_mask(&f, &Mask::from_pixels(vec![16])).is_err());
    }

    #[test]
    fn map_frame_cases() {
        let cloud = PointCloud::from_points(vec![Point3::new(0.0, 0.0, 1.0)], 0).unwrap();
        assert_eq!(to_map_frame(&cloud, &Pose::identity()), cloud);
        let t = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(to_map_frame(&cloud, &t).points(), &[Point3::new(1.0, 0.0, 1.0)]);

        let x = PointCloud::from_points(vec![Point3::new(1.0, 0.0, 0.0)], 0).unwrap();
        let yaw = Pose::from_yaw(std::f64::consts::FRAC_PI_2, Vector3::zeros());
        let p = to_map_frame(&x, &yaw).points()[0];
        assert!((p - Point3::new(0.0, 1.0, 0.0)).norm() < 1e-9);
    }

    proptest! {
        #[test]
        fn rigid_transform_preserves_distances(
            pts in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64), 2..20),
            yaw in -3.0..3.0f64,
            t in (-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64),
        ) {
            let pts: Vec<_> = pts.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect();
            let cloud = PointCloud::from_points(pts, 0).unwrap();
            let pose = Pose::from_yaw(yaw, Vector3::new(t.0, t.1, t.2));
            let moved = to_map_frame(&cloud, &pose);
            for i in 0..cloud.len() {
                for j in 0..cloud.len() {
                    let before = (cloud.points()[i] - cloud.points()[j]).norm();
                    let after = (moved.points()[i] - moved.points()[j]).norm();
                    prop_assert!((before - after).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn backprojection_never_exceeds_mask(
            pixels in prop::collection::btree_set(0u32..64, 0..64),
            valid in prop::collection::vec(prop::bool::ANY, 64),
        ) {
            let k = intrinsics(8, 8, 10.0, 4.0);
            let depth = DepthGrid::new(8, 8, valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()).unwrap();
            let mask = Mask::from_pixels(pixels.into_iter().collect());
            let cloud = backproject_mask(&frame(depth, k), &mask).unwrap();
            prop_assert!(cloud.len() <= mask.len());
        }
    }
}
