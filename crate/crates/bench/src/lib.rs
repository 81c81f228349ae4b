//! Fixtures shared by the benchmarks.

use cgmap::association::MapState;
use cgmap::ingest::DenoiseConfig;
use cgmap::localization::{observations, CameraMount, ObservationBatch, Pose2};
use cgmap::pipeline::MapBuilder;
use cgmap::synthetic::{desk_scene, loop_mount, loop_path, render, CAMERA_HEIGHT, LOOP_RADIUS};
use cgmap::{Aabb, AssociationConfig, PointCloud};
use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` points uniform in a cube of side `size` at `origin`.
pub fn cloud(seed: u64, n: usize, origin: f64, size: f64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| {
            Point3::new(
                origin + rng.random::<f64>() * size,
                origin + rng.random::<f64>() * size,
                rng.random::<f64>() * size,
            )
        })
        .collect();
    PointCloud::from_points(pts, 0).unwrap()
}

/// `n` random boxes inside a 2 m cube, many overlapping.
pub fn boxes(seed: u64, n: usize) -> Vec<(u32, Aabb)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n as u32)
        .map(|i| {
            let min = Point3::new(
                rng.random::<f64>() * 2.0,
                rng.random::<f64>() * 2.0,
                rng.random::<f64>() * 2.0,
            );
            let ext = nalgebra::Vector3::new(
                rng.random_range(0.1..0.6),
                rng.random_range(0.1..0.6),
                rng.random_range(0.1..0.6),
            );
            (i, Aabb::new(min, min + ext).unwrap())
        })
        .collect()
}

pub struct DeskFixture {
    pub map: MapState,
    pub obs: ObservationBatch,
    pub pose: Pose2,
    pub mount: CameraMount,
}

/// The default desk map plus one frame of observations taken from the loop.
pub fn desk(frames: usize) -> DeskFixture {
    let data = render(&desk_scene(0, frames)).unwrap();
    let mut b = MapBuilder::new(AssociationConfig::default(), DenoiseConfig::default(), 0).unwrap();
    for f in &data.frames {
        b.add_frame(&f.record, &f.detections).unwrap();
    }
    let (map, _) = b.finish().unwrap();
    let f = &data.frames[0];
    DeskFixture {
        map,
        obs: observations(&f.record, &f.detections, &DenoiseConfig::default(), 0.05).unwrap(),
        pose: loop_path(LOOP_RADIUS, frames, 0.0)[0],
        mount: loop_mount(CAMERA_HEIGHT, LOOP_RADIUS),
    }
}
