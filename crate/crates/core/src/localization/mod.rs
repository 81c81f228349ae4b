//! Planar (x, y, yaw) particle-filter localization against an object map, with map updates
//! for objects that disappear or appear.
//!
//! A hypothesis is scored by moving the frame's detections into the map with the
//! hypothesized camera pose and matching each against the map exactly as association does.
//! Each detection contributes `max(φ − delta_sim, 0) + ε`.

mod pose2;
mod update;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use pose2::{wrap_angle, CameraMount, Pose2};
pub use update::{expected_visible, MapChange, MapUpdater, VisibilityModel};

use crate::association::{voxel_downsample, AssociationConfig, MapState};
use crate::error::{Error, Result};
use crate::geometry::{FeatureVector, FrameId, PointCloud, Pose};
use crate::ingest::{camera_cloud, DenoiseConfig, DetectionRecord, FrameRecord, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub weight: f64,
}

impl Particle {
    pub fn pose(&self) -> Pose2 {
        Pose2 {
            x: self.x,
            y: self.y,
            yaw: self.yaw,
        }
    }

    fn set_pose(&mut self, p: Pose2) {
        self.x = p.x;
        self.y = p.y;
        self.yaw = p.yaw;
    }
}

/// One detection in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub cloud: PointCloud,
    pub feature: FeatureVector,
    pub crop_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    pub frame_id: FrameId,
    pub detections: Vec<Observation>,
}

/// Denoised, downsampled camera-frame observations for one frame.
pub fn observations(
    frame: &FrameRecord,
    records: &[DetectionRecord],
    denoise: &DenoiseConfig,
    voxel: f64,
) -> Result<ObservationBatch> {
    let mut detections = Vec::new();
    for rec in records {
        let mask = Mask::from_rle(&rec.mask_rle, frame.intrinsics.pixel_count())?;
        let Some(cloud) = camera_cloud(frame, &mask, denoise)? else {
            continue;
        };
        detections.push(Observation {
            cloud: voxel_downsample(&cloud, voxel)?,
            feature: FeatureVector::new(rec.feature.clone()).renormalized()?,
            crop_ref: rec.crop_ref.clone(),
        });
    }
    Ok(ObservationBatch {
        frame_id: frame.frame_id,
        detections,
    })
}

/// Applies odometry `delta` (in each particle's own frame) plus seeded Gaussian noise with
/// deviations `sigma = [x, y, yaw]`.
pub fn predict(particles: &mut [Particle], delta: &Pose2, sigma: [f64; 3], rng: &mut impl Rng) {
    let noise: Vec<Normal<f64>> = sigma.iter().map(|s| Normal::new(0.0, s.max(0.0)).unwrap()).collect();
    for p in particles.iter_mut() {
        let mut d = *delta;
        if sigma.iter().any(|s| *s > 0.0) {
            d.x += noise[0].sample(rng);
            d.y += noise[1].sample(rng);
            d.yaw += noise[2].sample(rng);
        }
        p.set_pose(p.pose().compose(&d));
    }
}

/// Score floor per detection.
pub const SCORE_EPSILON: f64 = 1e-3;

/// `Σ max(φ − delta_sim, 0) + ε` over the batch, with detections placed by `camera_pose`.
pub fn score_hypothesis(
    camera_pose: &Pose,
    obs: &ObservationBatch,
    map: &MapState,
    cfg: &AssociationConfig,
) -> Result<f64> {
    let mut score = 0.0;
    for det in &obs.detections {
        let world = det.cloud.transformed(camera_pose);
        let bbox = world.bbox()?;
        let phi = map
            .best_match(&world, &bbox, &det.feature, cfg.delta_nn)?
            .map_or(0.0, |(_, phi)| phi);
        score += (phi - cfg.delta_sim).max(0.0) + SCORE_EPSILON;
    }
    Ok(score)
}

pub fn effective_sample_size(particles: &[Particle]) -> f64 {
    let s: f64 = particles.iter().map(|p| p.weight * p.weight).sum();
    if s > 0.0 {
        1.0 / s
    } else {
        0.0
    }
}

fn normalize(particles: &mut [Particle]) {
    let total: f64 = particles.iter().map(|p| p.weight).sum();
    let n = particles.len() as f64;
    for p in particles.iter_mut() {
        p.weight = if total > 0.0 && total.is_finite() {
            p.weight / total
        } else {
            1.0 / n
        };
    }
}

/// Low-variance resampling with one uniform draw. Resampled weights are uniform.
pub fn systematic_resample(particles: &[Particle], rng: &mut impl Rng) -> Vec<Particle> {
    let n = particles.len();
    if n == 0 {
        return Vec::new();
    }
    let step = 1.0 / n as f64;
    let mut u = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut cumulative = particles[0].weight;
    let mut i = 0;
    for _ in 0..n {
        while u > cumulative && i + 1 < n {
            i += 1;
            cumulative += particles[i].weight;
        }
        out.push(Particle {
            weight: step,
            ..particles[i]
        });
        u += step;
    }
    out
}

/// Multiplies weights by `scores`, normalizes, and resamples when the effective sample size
/// drops below half the particle count. Returns whether a resample happened.
pub fn update_weights(particles: &mut Vec<Particle>, scores: &[f64], rng: &mut impl Rng) -> bool {
    assert_eq!(particles.len(), scores.len(), "one score per particle");
    for (p, s) in particles.iter_mut().zip(scores) {
        p.weight *= s.max(0.0);
    }
    normalize(particles);
    if effective_sample_size(particles) < particles.len() as f64 / 2.0 {
        *particles = systematic_resample(particles, rng);
        true
    } else {
        false
    }
}

/// Weighted mean pose (circular mean for yaw).
pub fn weighted_mean(particles: &[Particle]) -> Pose2 {
    let (mut x, mut y, mut s, mut c) = (0.0, 0.0, 0.0, 0.0);
    for p in particles {
        x += p.weight * p.x;
        y += p.weight * p.y;
        s += p.weight * p.yaw.sin();
        c += p.weight * p.yaw.cos();
    }
    Pose2::new(x, y, s.atan2(c))
}

/// Weighted RMS distance of particle positions from their mean, meters.
pub fn position_spread(particles: &[Particle]) -> f64 {
    let m = weighted_mean(particles);
    particles
        .iter()
        .map(|p| p.weight * ((p.x - m.x).powi(2) + (p.y - m.y).powi(2)))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizationConfig {
    pub particles: usize,
    /// Matching parameters for scoring and map updates; `delta_nn` is the final, tightest
    /// neighbor radius.
    pub association: AssociationConfig,
    /// Neighbor radius on the first update; shrinks geometrically to `association.delta_nn`.
    pub initial_delta_nn: f64,
    pub delta_nn_decay: f64,
    /// Odometry noise deviations [x m, y m, yaw rad].
    pub motion_noise: [f64; 3],
    /// Jitter after resampling, as multiples of the current neighbor radius [xy, yaw per m].
    pub roughening: [f64; 2],
    /// Observation clouds are downsampled to this voxel edge before scoring, meters.
    pub observation_voxel: f64,
    pub mount: CameraMount,
    pub visibility: VisibilityModel,
    /// Consecutive frames required before removing or adding an object.
    pub persistence: u32,
    /// Map updates run only while the particle position spread is below this, meters.
    pub update_max_spread: f64,
    pub seed: u64,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        LocalizationConfig {
            particles: 500,
            association: AssociationConfig::default(),
            initial_delta_nn: 1.0,
            delta_nn_decay: 0.85,
            motion_noise: [0.01, 0.01, 0.005],
            roughening: [0.3, 0.3],
            observation_voxel: 0.05,
            mount: CameraMount::default(),
            visibility: VisibilityModel::default(),
            persistence: 5,
            update_max_spread: 0.1,
            seed: 0,
        }
    }
}

impl LocalizationConfig {
    pub fn validate(&self) -> Result<()> {
        self.association.validate()?;
        if self.particles == 0 {
            return Err(Error::Config("particle count must be positive".into()));
        }
        if !(self.delta_nn_decay > 0.0 && self.delta_nn_decay <= 1.0) {
            return Err(Error::Config("delta_nn_decay must lie in (0, 1]".into()));
        }
        if !(self.initial_delta_nn > 0.0) || !(self.observation_voxel > 0.0) {
            return Err(Error::Config("radii must be positive".into()));
        }
        if self.persistence == 0 {
            return Err(Error::Config("persistence must be at least 1".into()));
        }
        Ok(())
    }

    /// Neighbor radius used on update number `step` (0-based).
    pub fn delta_nn_at(&self, step: u32) -> f64 {
        (self.initial_delta_nn * self.delta_nn_decay.powi(step as i32)).max(self.association.delta_nn)
    }
}

/// One line of the session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub frame_id: FrameId,
    pub est_pose: Pose2,
    pub ess: f64,
    pub changes: Vec<MapChange>,
}

pub struct Localizer {
    cfg: LocalizationConfig,
    particles: Vec<Particle>,
    rng: ChaCha8Rng,
    updater: MapUpdater,
    updates: u32,
}

impl Localizer {
    /// Particles spread uniformly over the box `[x0, x1] × [y0, y1]` with uniform yaw.
    pub fn uniform(cfg: LocalizationConfig, x: (f64, f64), y: (f64, f64)) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w = 1.0 / cfg.particles as f64;
        let particles = (0..cfg.particles)
            .map(|_| Particle {
                x: rng.random_range(x.0..=x.1),
                y: rng.random_range(y.0..=y.1),
                yaw: wrap_angle(rng.random_range(-PI..PI)),
                weight: w,
            })
            .collect();
        Ok(Localizer::with_particles(cfg, particles, rng))
    }

    /// Every particle at `pose` (tracking from a known start).
    pub fn at(cfg: LocalizationConfig, pose: Pose2) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w = 1.0 / cfg.particles as f64;
        let particles = vec![
            Particle {
                x: pose.x,
                y: pose.y,
                yaw: pose.yaw,
                weight: w,
            };
            cfg.particles
        ];
        let mut loc = Localizer::with_particles(cfg, particles, rng);
        loc.updates = u32::MAX / 2;
        Ok(loc)
    }

    fn with_particles(cfg: LocalizationConfig, particles: Vec<Particle>, rng: ChaCha8Rng) -> Self {
        Localizer {
            updater: MapUpdater::new(cfg.persistence),
            cfg,
            particles,
            rng,
            updates: 0,
        }
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn estimate(&self) -> Pose2 {
        weighted_mean(&self.particles)
    }

    pub fn config(&self) -> &LocalizationConfig {
        &self.cfg
    }

    /// One filter cycle: motion update, scoring, reweighting, then map maintenance when the
    /// estimate is tight enough.
    pub fn step(&mut self, map: &mut MapState, obs: &ObservationBatch, odometry: Option<&Pose2>) -> Result<StepLog> {
        if let Some(delta) = odometry {
            predict(&mut self.particles, delta, self.cfg.motion_noise, &mut self.rng);
        }
        let delta_nn = self.cfg.delta_nn_at(self.updates);
        if !obs.detections.is_empty() {
            let assoc = AssociationConfig {
                delta_nn,
                ..self.cfg.association.clone()
            };
            let mount = self.cfg.mount;
            let frozen: &MapState = map;
            let scores = self
                .particles
                .par_iter()
                .map(|p| score_hypothesis(&mount.camera_pose(&p.pose()), obs, frozen, &assoc))
                .collect::<Result<Vec<f64>>>()?;
            if update_weights(&mut self.particles, &scores, &mut self.rng) {
                self.roughen(delta_nn);
            }
            self.updates = self.updates.saturating_add(1);
        }
        let ess = effective_sample_size(&self.particles);
        let est = self.estimate();
        let mut changes = Vec::new();
        if position_spread(&self.particles) <= self.cfg.update_max_spread {
            let camera = self.cfg.mount.camera_pose(&est);
            changes = self.updater.update(map, &camera, obs, &self.cfg)?;
        }
        Ok(StepLog {
            frame_id: obs.frame_id,
            est_pose: est,
            ess,
            changes,
        })
    }

    fn roughen(&mut self, delta_nn: f64) {
        let [kxy, kyaw] = self.cfg.roughening;
        if kxy <= 0.0 && kyaw <= 0.0 {
            return;
        }
        let nxy = Normal::new(0.0, kxy * delta_nn).unwrap();
        let nyaw = Normal::new(0.0, kyaw * delta_nn).unwrap();
        for p in &mut self.particles {
            p.x += nxy.sample(&mut self.rng);
            p.y += nxy.sample(&mut self.rng);
            p.yaw = wrap_angle(p.yaw + nyaw.sample(&mut self.rng));
        }
    }
}
