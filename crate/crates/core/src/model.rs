//! Shared domain types and the geometric primitives every stage builds on.
//!
//! Conventions used throughout the crate:
//!
//! * Poses are body-to-odometry: `x_odom = R * x_body + t`. The camera frame is
//!   taken to be the body frame (x right, y down, z along the optical axis).
//! * Cameras are ideal pinholes without distortion; undistort detections
//!   before ingesting them.
//! * Euler angles use the Z-Y-X (yaw-pitch-roll) convention with yaw about the
//!   gravity-aligned +z axis. Angles are degrees at API boundaries.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;
const MIN_DEPTH: f64 = 1e-6;

fn check_rotation(field: &str, rotation: &Matrix3<f64>) -> Result<()> {
    if rotation.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(field, "non-finite entry"));
    }
    let err = (rotation.transpose() * rotation - Matrix3::identity()).norm();
    if err >= ORTHONORMAL_TOL {
        return Err(Error::invalid(
            field,
            format!("not orthonormal (|RtR - I| = {err:.3e})"),
        ));
    }
    let det = rotation.determinant();
    if (det - 1.0).abs() >= ORTHONORMAL_TOL {
        return Err(Error::invalid(field, format!("determinant {det} != +1")));
    }
    Ok(())
}

/// Camera pose at one frame, body-to-odometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub frame_index: usize,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, frame_index: usize) -> Result<Self> {
        check_rotation("rotation", &rotation)?;
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("translation", "non-finite entry"));
        }
        Ok(Self {
            rotation,
            translation,
            frame_index,
        })
    }

    pub fn identity(frame_index: usize) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            frame_index,
        }
    }

    /// Camera center in the odometry frame.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    /// Odometry-frame point expressed in the camera frame.
    pub fn to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (point - self.translation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("fx", self.fx), ("fy", self.fy), ("width", self.width), ("height", self.height)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.cx >= 0.0 && self.cx < self.width) {
            return Err(Error::invalid("cx", format!("{} outside [0, {})", self.cx, self.width)));
        }
        if !(self.cy >= 0.0 && self.cy < self.height) {
            return Err(Error::invalid("cy", format!("{} outside [0, {})", self.cy, self.height)));
        }
        Ok(())
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.x < self.width && pixel.y >= 0.0 && pixel.y < self.height
    }
}

/// A single 2D observation: the pixel centroid of an object mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub frame_index: usize,
    pub centroid: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: u64,
    pub detections: Vec<Detection>,
}

impl Track {
    pub fn new(track_id: u64, detections: Vec<Detection>) -> Result<Self> {
        let track = Self { track_id, detections };
        track.validate()?;
        Ok(track)
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .detections
            .windows(2)
            .any(|w| w[0].frame_index >= w[1].frame_index)
        {
            return Err(Error::invalid(
                format!("tracks[{}].detections", self.track_id),
                "frame indices must be strictly increasing",
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

/// Estimated 3D object position with its covariance (m^2).
#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub landmark_id: u64,
    pub position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

impl Landmark {
    pub fn new(landmark_id: u64, position: Vector3<f64>, covariance: Matrix3<f64>) -> Result<Self> {
        let lm = Self {
            landmark_id,
            position,
            covariance,
        };
        lm.validate()?;
        Ok(lm)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("landmarks[{}].{f}", self.landmark_id);
        if self.position.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(field("position"), "non-finite entry"));
        }
        if self.covariance.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(field("covariance"), "non-finite entry"));
        }
        let scale = self.covariance.amax().max(1.0);
        if (self.covariance - self.covariance.transpose()).amax() > 1e-12 * scale {
            return Err(Error::invalid(field("covariance"), "not symmetric"));
        }
        let min_eig = self.covariance.symmetric_eigenvalues().min();
        if min_eig < -1e-12 * scale {
            return Err(Error::invalid(
                field("covariance"),
                format!("not positive semi-definite (min eigenvalue {min_eig:.3e})"),
            ));
        }
        Ok(())
    }
}

/// One agent's object map in its own odometry frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMap {
    pub agent_id: String,
    pub frame_label: String,
    pub landmarks: Vec<Landmark>,
}

impl ObjectMap {
    pub fn new(agent_id: impl Into<String>, frame_label: impl Into<String>, landmarks: Vec<Landmark>) -> Result<Self> {
        let map = Self {
            agent_id: agent_id.into(),
            frame_label: frame_label.into(),
            landmarks,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::with_capacity(self.landmarks.len());
        for lm in &self.landmarks {
            lm.validate()?;
            if !seen.insert(lm.landmark_id) {
                return Err(Error::invalid(
                    "landmarks",
                    format!("duplicate landmark id {}", lm.landmark_id),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    /// Copy of this map with only the landmarks for which `keep` is true.
    pub fn filtered(&self, mut keep: impl FnMut(usize, &Landmark) -> bool) -> ObjectMap {
        ObjectMap {
            agent_id: self.agent_id.clone(),
            frame_label: self.frame_label.clone(),
            landmarks: self
                .landmarks
                .iter()
                .enumerate()
                .filter(|(i, lm)| keep(*i, lm))
                .map(|(_, lm)| lm.clone())
                .collect(),
        }
    }
}

/// Tunable scalars of the pipeline. Defaults suit nadir flights over
/// scenes with objects roughly a metre apart.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    /// Tracks need strictly more than this many detections.
    pub n_min: usize,
    /// Percentile of Mahalanobis distances kept as inliers.
    pub omega_percentile: f64,
    /// Submap window size, m. Landmarks are chosen nearest-to-center, so
    /// the window does not crop them.
    pub window: f64,
    /// Step between submap centers, m.
    pub overlap: f64,
    /// Maximum landmarks per submap.
    pub n_max: usize,
    /// Expected pairwise-distance noise, m.
    pub sigma: f64,
    /// Consistency cutoff, m.
    pub epsilon: f64,
    /// Minimum distance between two matched points in the same map, m.
    pub gamma: f64,
    /// A match needs strictly more inliers than this.
    pub s_max: usize,
    /// IoU above which a submap pair is expected to match.
    pub theta_overlap: f64,
    /// Roll/pitch threshold, degrees.
    pub theta_rp: f64,
    /// Yaw threshold, degrees (evaluation only unless `prune_yaw`).
    pub theta_yaw: f64,
    /// Translation threshold, m.
    pub t_max: f64,
    /// Voxel edge for submap IoU, m.
    pub iou_voxel: f64,
    /// Cap on candidate associations per submap pair.
    pub max_candidates: usize,
    /// Also reject hypotheses with |yaw| > theta_yaw while matching.
    pub prune_yaw: bool,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            n_min: 3,
            omega_percentile: 95.0,
            window: 2.0,
            overlap: 1.0,
            n_max: 50,
            sigma: 0.05,
            epsilon: 0.1,
            gamma: 0.1,
            s_max: 4,
            theta_overlap: 0.667,
            theta_rp: 10.0,
            theta_yaw: 30.0,
            t_max: 1.5,
            iou_voxel: 0.5,
            max_candidates: 10_000,
            prune_yaw: false,
        }
    }
}

impl Hyperparameters {
    pub const KEYS: [&'static str; 16] = [
        "n_min",
        "omega_percentile",
        "window",
        "overlap",
        "n_max",
        "sigma",
        "epsilon",
        "gamma",
        "s_max",
        "theta_overlap",
        "theta_rp",
        "theta_yaw",
        "t_max",
        "iou_voxel",
        "max_candidates",
        "prune_yaw",
    ];

    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("omega_percentile", self.omega_percentile),
            ("window", self.window),
            ("overlap", self.overlap),
            ("sigma", self.sigma),
            ("epsilon", self.epsilon),
            ("gamma", self.gamma),
            ("theta_overlap", self.theta_overlap),
            ("theta_rp", self.theta_rp),
            ("theta_yaw", self.theta_yaw),
            ("t_max", self.t_max),
            ("iou_voxel", self.iou_voxel),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be strictly positive, got {v}")));
            }
        }
        for (name, v) in [
            ("n_min", self.n_min),
            ("n_max", self.n_max),
            ("s_max", self.s_max),
            ("max_candidates", self.max_candidates),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be strictly positive"));
            }
        }
        if self.omega_percentile > 100.0 {
            return Err(Error::invalid("omega_percentile", "must be <= 100"));
        }
        if self.epsilon < self.sigma {
            return Err(Error::invalid("epsilon", "must be >= sigma"));
        }
        if self.overlap > self.window {
            return Err(Error::invalid("overlap", "must be <= window"));
        }
        if self.theta_overlap > 1.0 {
            return Err(Error::invalid("theta_overlap", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Sets one field from its textual value. Keys are the field names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn real(key: &str, v: &str) -> Result<f64> {
            v.parse::<f64>()
                .map_err(|e| Error::invalid(key, format!("`{v}` is not a number ({e})")))
        }
        fn int(key: &str, v: &str) -> Result<usize> {
            v.parse::<usize>()
                .map_err(|e| Error::invalid(key, format!("`{v}` is not a non-negative integer ({e})")))
        }
        match key {
            "n_min" => self.n_min = int(key, value)?,
            "omega_percentile" => self.omega_percentile = real(key, value)?,
            "window" => self.window = real(key, value)?,
            "overlap" => self.overlap = real(key, value)?,
            "n_max" => self.n_max = int(key, value)?,
            "sigma" => self.sigma = real(key, value)?,
            "epsilon" => self.epsilon = real(key, value)?,
            "gamma" => self.gamma = real(key, value)?,
            "s_max" => self.s_max = int(key, value)?,
            "theta_overlap" => self.theta_overlap = real(key, value)?,
            "theta_rp" => self.theta_rp = real(key, value)?,
            "theta_yaw" => self.theta_yaw = real(key, value)?,
            "t_max" => self.t_max = real(key, value)?,
            "iou_voxel" => self.iou_voxel = real(key, value)?,
            "max_candidates" => self.max_candidates = int(key, value)?,
            "prune_yaw" => {
                self.prune_yaw = value
                    .parse::<bool>()
                    .map_err(|_| Error::invalid(key, format!("`{value}` is not true/false")))?
            }
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation("rotation", &rotation)?;
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("translation", "non-finite entry"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform from Z-Y-X Euler angles in degrees.
    pub fn from_euler_deg(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        let rotation = Rotation3::from_euler_angles(roll.to_radians(), pitch.to_radians(), yaw.to_radians());
        Self {
            rotation: rotation.into_inner(),
            translation,
        }
    }

    pub fn apply(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in degrees.
    pub fn angle_deg(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }
}

/// Euler angles (degrees) of a transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attitude {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

/// Z-Y-X decomposition `R = Rz(yaw) Ry(pitch) Rx(roll)`, degrees.
///
/// At gimbal lock (|pitch| = 90°) roll is reported as 0 and the whole
/// rotation about z is folded into yaw.
pub fn transform_angles(t: &RigidTransform) -> Attitude {
    let r = &t.rotation;
    let sp = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    let cp = (r[(2, 1)].powi(2) + r[(2, 2)].powi(2)).sqrt();
    let (roll, yaw) = if cp < 1e-9 {
        (0.0, (-r[(0, 1)]).atan2(r[(1, 1)]))
    } else {
        (r[(2, 1)].atan2(r[(2, 2)]), r[(1, 0)].atan2(r[(0, 0)]))
    };
    Attitude {
        roll: roll.to_degrees(),
        pitch: pitch.to_degrees(),
        yaw: yaw.to_degrees(),
    }
}

/// Pinhole projection of an odometry-frame point.
pub fn project(pose: &Pose, intrinsics: &CameraIntrinsics, point: &Vector3<f64>) -> Result<Vector2<f64>> {
    let pc = pose.to_camera(point);
    if pc.z <= MIN_DEPTH {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    Ok(Vector2::new(
        intrinsics.fx * pc.x / pc.z + intrinsics.cx,
        intrinsics.fy * pc.y / pc.z + intrinsics.cy,
    ))
}

/// Back-projects a pixel at the given camera-frame depth into the odometry frame.
pub fn unproject(pose: &Pose, intrinsics: &CameraIntrinsics, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
    pose.rotation * (bearing(intrinsics, pixel) * depth) + pose.translation
}

/// Camera-frame ray through a pixel, normalized to z = 1.
pub fn bearing(intrinsics: &CameraIntrinsics, pixel: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(
        (pixel.x - intrinsics.cx) / intrinsics.fx,
        (pixel.y - intrinsics.cy) / intrinsics.fy,
        1.0,
    )
}
