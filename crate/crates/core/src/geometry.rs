//! Geometric primitives and feature-vector helpers shared by every stage of the pipeline.

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type FrameId = u32;
pub type ObjectId = u32;

const ORTHONORMAL_TOL: f64 = 1e-6;

/// Rigid transform taking camera-frame points into the map frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPose", into = "RawPose")]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawPose {
    /// Row-major 3x3 rotation.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<RawPose> for Pose {
    type Error = Error;

    fn try_from(raw: RawPose) -> Result<Self> {
        let r = raw.rotation;
        let rotation = Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        );
        Pose::new(rotation, Vector3::from(raw.translation))
    }
}

impl From<Pose> for RawPose {
    fn from(pose: Pose) -> Self {
        let m = pose.rotation;
        RawPose {
            rotation: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            translation: pose.translation.into(),
        }
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("pose", "non-finite entry"));
        }
        let gram = rotation.transpose() * rotation;
        if (gram - Matrix3::identity()).amax() > ORTHONORMAL_TOL {
            return Err(Error::invalid("pose", "rotation is not orthonormal"));
        }
        if (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::invalid("pose", "rotation determinant is not +1"));
        }
        Ok(Pose { rotation, translation })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about the map z axis by `yaw` radians, then translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("intrinsics", "focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::invalid("intrinsics", "cx outside image"));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid("intrinsics", "cy outside image"));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Axis-aligned box in the map frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl Aabb {
    pub fn new(min: Point3<f64>, max: Point3<f64>) -> Result<Self> {
        if (0..3).any(|i| !(min[i] <= max[i])) {
            return Err(Error::invalid("bounding box", "min corner exceeds max corner"));
        }
        Ok(Aabb { min, max })
    }

    pub fn from_center_extent(center: Point3<f64>, extent: Vector3<f64>) -> Result<Self> {
        let half = extent / 2.0;
        Aabb::new(center - half, center + half)
    }

    pub fn center(&self) -> Point3<f64> {
        nalgebra::center(&self.min, &self.max)
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    /// Closed-interval overlap test; touching boxes intersect.
    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= other.max[i] && other.min[i] <= self.max[i])
    }

    pub fn intersection(&self, other: &Aabb) -> Option<Aabb> {
        if !self.intersects(other) {
            return None;
        }
        let min = self.min.coords.sup(&other.min.coords);
        let max = self.max.coords.inf(&other.max.coords);
        Some(Aabb {
            min: Point3::from(min),
            max: Point3::from(max),
        })
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    pub fn expanded(&self, margin: f64) -> Aabb {
        let m = Vector3::repeat(margin);
        Aabb {
            min: self.min - m,
            max: self.max + m,
        }
    }
}

/// Points with one view-id provenance tag each.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
    views: Vec<FrameId>,
}

impl PointCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(points: Vec<Point3<f64>>, views: Vec<FrameId>) -> Result<Self> {
        if points.len() != views.len() {
            return Err(Error::invalid(
                "point cloud",
                format!("{} points but {} provenance tags", points.len(), views.len()),
            ));
        }
        if !points.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("point cloud", "non-finite coordinate"));
        }
        Ok(PointCloud { points, views })
    }

    /// All points tagged with the same view.
    pub fn from_points(points: Vec<Point3<f64>>, view: FrameId) -> Result<Self> {
        let views = vec![view; points.len()];
        Self::from_parts(points, views)
    }

    pub fn with_capacity(n: usize) -> Self {
        PointCloud {
            points: Vec::with_capacity(n),
            views: Vec::with_capacity(n),
        }
    }

    /// Panics on non-finite input; callers ingest untrusted data through `from_parts`.
    pub fn push(&mut self, p: Point3<f64>, view: FrameId) {
        assert!(p.iter().all(|v| v.is_finite()), "non-finite point");
        self.points.push(p);
        self.views.push(view);
    }

    pub fn extend_from(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
        self.views.extend_from_slice(&other.views);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn views(&self) -> &[FrameId] {
        &self.views
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Point3<f64>, FrameId)> {
        self.points.iter().zip(self.views.iter().copied())
    }

    /// Keep the points at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            views: indices.iter().map(|&i| self.views[i]).collect(),
        }
    }

    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            views: self.views.clone(),
        }
    }

    pub fn bbox(&self) -> Result<Aabb> {
        bbox_of(self)
    }
}

/// Tight axis-aligned box over the cloud's points.
pub fn bbox_of(cloud: &PointCloud) -> Result<Aabb> {
    let (first, rest) = cloud.points.split_first().ok_or(Error::EmptyPointCloud)?;
    let (min, max) = rest.iter().fold((first.coords, first.coords), |(lo, hi), p| {
        (lo.inf(&p.coords), hi.sup(&p.coords))
    });
    Ok(Aabb {
        min: Point3::from(min),
        max: Point3::from(max),
    })
}

/// Dense semantic descriptor. Detection features are unit-norm; fused object features are raw
/// running means and get renormalized only when compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

const DEGENERATE_NORM: f64 = 1e-9;

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        FeatureVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        FeatureVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    pub fn renormalized(&self) -> Result<FeatureVector> {
        renormalize(self)
    }

    /// Cosine similarity after renormalizing both sides.
    pub fn cosine(&self, other: &FeatureVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        let a = self.norm();
        let b = other.norm();
        if a <= DEGENERATE_NORM || b <= DEGENERATE_NORM || !a.is_finite() || !b.is_finite() {
            return Err(Error::DegenerateFeature);
        }
        Ok((self.dot(other) / (a * b)).clamp(-1.0, 1.0))
    }

    /// `(n * self + other) / (n + 1)`: running mean with `n` prior samples.
    pub fn running_mean(&self, n: u32, other: &FeatureVector) -> Result<FeatureVector> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        let n = f64::from(n);
        Ok(FeatureVector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| (n * a + b) / (n + 1.0))
                .collect(),
        ))
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(values: Vec<f64>) -> Self {
        FeatureVector(values)
    }
}

pub fn renormalize(feature: &FeatureVector) -> Result<FeatureVector> {
    let n = feature.norm();
    if !(n > DEGENERATE_NORM) || !n.is_finite() {
        return Err(Error::DegenerateFeature);
    }
    Ok(FeatureVector(feature.0.iter().map(|v| v / n).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(x: f64, y: f64, z: f64) -> Point3<f64> {
        Point3::new(x, y, z)
    }

    #[test]
    fn bbox_extremes() {
        let cloud = PointCloud::from_points(vec![p(0., 0., 0.), p(1., 2., 3.)], 0).unwrap();
        let b = bbox_of(&cloud).unwrap();
        assert_eq!(b.min, p(0., 0., 0.));
        assert_eq!(b.max, p(1., 2., 3.));
    }

    #[test]
    fn bbox_degenerate_single_point() {
        let cloud = PointCloud::from_points(vec![p(5., 5., 5.)], 0).unwrap();
        let b = bbox_of(&cloud).unwrap();
        assert_eq!(b.min, b.max);
        assert_eq!(b.volume(), 0.0);
    }

    #[test]
    fn bbox_empty_is_error() {
        assert!(matches!(bbox_of(&PointCloud::new()), Err(Error::EmptyPointCloud)));
        assert_eq!(Error::EmptyPointCloud.to_string(), "empty point cloud");
    }

    #[test]
    fn bbox_random_unit_cube_matches_componentwise_extremes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<_> = (0..100).map(|_| p(rng.random(), rng.random(), rng.random())).collect();
        let cloud = PointCloud::from_points(pts.clone(), 0).unwrap();
        let b = bbox_of(&cloud).unwrap();
        for axis in 0..3 {
            let lo = pts.iter().map(|q| q[axis]).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(|q| q[axis]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(b.min[axis], lo);
            assert_eq!(b.max[axis], hi);
            assert!(lo >= 0.0 && hi <= 1.0);
        }
        assert!(pts.iter().all(|q| b.contains(q)));
    }

    #[test]
    fn renormalize_cases() {
        let f = renormalize(&FeatureVector::new(vec![3.0, 4.0])).unwrap();
        assert!((f.as_slice()[0] - 0.6).abs() < 1e-12);
        assert!((f.as_slice()[1] - 0.8).abs() < 1e-12);

        let unit = FeatureVector::new(vec![0.0, 1.0, 0.0]);
        assert_eq!(renormalize(&unit).unwrap(), unit);

        let mean = FeatureVector::new(vec![1.0, 0.0])
            .running_mean(1, &FeatureVector::new(vec![0.0, 1.0]))
            .unwrap();
        assert_eq!(mean.as_slice(), &[0.5, 0.5]);
        let r = renormalize(&mean).unwrap();
        let half_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        assert!((r.as_slice()[0] - half_sqrt2).abs() < 1e-12);
        assert!((r.as_slice()[1] - half_sqrt2).abs() < 1e-12);
    }

    #[test]
    fn renormalize_degenerate() {
        let err = renormalize(&FeatureVector::new(vec![1e-12, 0.0])).unwrap_err();
        assert_eq!(err.to_string(), "degenerate feature");
    }

    #[test]
    fn pose_validation() {
        assert!(Pose::new(Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
        let reflection = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Pose::new(reflection, Vector3::zeros()).is_err());
        let yaw = Pose::from_yaw(0.3, Vector3::new(1.0, 2.0, 3.0));
        assert!(Pose::new(*yaw.rotation(), *yaw.translation()).is_ok());
    }

    #[test]
    fn pose_json_roundtrip_is_row_major() {
        let pose = Pose::from_yaw(std::f64::consts::FRAC_PI_2, Vector3::new(1.0, 0.0, 0.0));
        let json = serde_json::to_value(pose).unwrap();
        let row0 = json["rotation"][0].as_array().unwrap();
        assert!(row0[0].as_f64().unwrap().abs() < 1e-12);
        assert!((row0[1].as_f64().unwrap() + 1.0).abs() < 1e-12);
        let back: Pose = serde_json::from_value(json).unwrap();
        assert_eq!(back, pose);
    }

    #[test]
    fn aabb_rejects_inverted_corners() {
        assert!(Aabb::new(p(1., 0., 0.), p(0., 1., 1.)).is_err());
    }

    proptest! {
        #[test]
        fn bbox_is_permutation_invariant(
            pts in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64), 1..50),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let pts: Vec<_> = pts.into_iter().map(|(x, y, z)| p(x, y, z)).collect();
            let mut shuffled = pts.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = bbox_of(&PointCloud::from_points(pts, 0).unwrap()).unwrap();
            let b = bbox_of(&PointCloud::from_points(shuffled, 0).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn renormalize_is_idempotent(v in prop::collection::vec(-5.0..5.0f64, 2..16)) {
            let f = FeatureVector::new(v);
            prop_assume!(f.norm() > 1e-6);
            let once = renormalize(&f).unwrap();
            let twice = renormalize(&once).unwrap();
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
