//! Synthetic scenes, camera trajectories and 2D object tracks with known
//! ground truth. Stands in for a segmentation-and-tracking front-end.
//!
//! Occlusion is modelled only through random detection dropout.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{PoseTable, TrackSet};
use crate::model::{project, CameraIntrinsics, Detection, Landmark, ObjectMap, Pose, RigidTransform, Track};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub n_objects: usize,
    /// Objects are placed uniformly in `[0, extent]` per axis, m.
    pub extent: [f64; 3],
    #[serde(default)]
    pub n_dynamic: usize,
    /// Speed of dynamic objects, m/frame.
    #[serde(default = "default_velocity")]
    pub dynamic_velocity: f64,
    pub seed: u64,
}

fn default_velocity() -> f64 {
    1.0
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_dynamic > self.n_objects {
            return Err(Error::invalid("n_dynamic", "exceeds n_objects"));
        }
        if self.extent.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::invalid("extent", "components must be positive"));
        }
        if !(self.dynamic_velocity.is_finite() && self.dynamic_velocity >= 0.0) {
            return Err(Error::invalid("dynamic_velocity", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    /// Path vertices; the camera flies at `altitude` above each vertex's z.
    pub waypoints: Vec<[f64; 3]>,
    pub frames: usize,
    /// Degrees from nadir: 0 looks straight down, larger tilts forward.
    #[serde(default)]
    pub camera_pitch: f64,
    pub altitude: f64,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::invalid("frames", "need at least 2"));
        }
        if !(0.0..=89.0).contains(&self.camera_pitch) {
            return Err(Error::invalid("camera_pitch", "must lie in [0, 89] degrees"));
        }
        if self.waypoints.len() < 2 {
            return Err(Error::invalid("waypoints", "need at least 2"));
        }
        if !self.altitude.is_finite() {
            return Err(Error::invalid("altitude", "must be finite"));
        }
        if path_length(&self.waypoints) <= 0.0 {
            return Err(Error::invalid("waypoints", "path has zero length"));
        }
        Ok(())
    }

    /// Back-and-forth sweep over `[x0, x1] × [y0, y1]` with `lanes` passes along x.
    pub fn lawnmower(x: (f64, f64), y: (f64, f64), lanes: usize, altitude: f64, frames: usize, camera_pitch: f64) -> Self {
        let lanes = lanes.max(1);
        let mut waypoints = Vec::with_capacity(2 * lanes);
        for lane in 0..lanes {
            let yy = if lanes == 1 {
                0.5 * (y.0 + y.1)
            } else {
                y.0 + (y.1 - y.0) * lane as f64 / (lanes - 1) as f64
            };
            let (from, to) = if lane % 2 == 0 { (x.0, x.1) } else { (x.1, x.0) };
            waypoints.push([from, yy, 0.0]);
            waypoints.push([to, yy, 0.0]);
        }
        Self {
            waypoints,
            frames,
            camera_pitch,
            altitude,
        }
    }
}

fn path_length(w: &[[f64; 3]]) -> f64 {
    w.windows(2)
        .map(|p| (Vector3::from(p[1]) - Vector3::from(p[0])).norm())
        .sum()
}

/// Ground-truth object. Dynamic objects move with constant velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub object_id: usize,
    /// Position at frame 0, m.
    pub position: [f64; 3],
    /// m/frame; zero for static objects.
    pub velocity: [f64; 3],
    pub dynamic: bool,
}

impl SceneObject {
    pub fn position_at(&self, frame: usize) -> Vector3<f64> {
        Vector3::from(self.position) + Vector3::from(self.velocity) * frame as f64
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Vec<SceneObject>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut objects: Vec<SceneObject> = (0..spec.n_objects)
        .map(|object_id| SceneObject {
            object_id,
            position: [
                rng.random_range(0.0..spec.extent[0]),
                rng.random_range(0.0..spec.extent[1]),
                rng.random_range(0.0..spec.extent[2]),
            ],
            velocity: [0.0; 3],
            dynamic: false,
        })
        .collect();
    let mut ids: Vec<usize> = (0..spec.n_objects).collect();
    ids.shuffle(&mut rng);
    for &i in &ids[..spec.n_dynamic] {
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        objects[i].dynamic = true;
        objects[i].velocity = [
            spec.dynamic_velocity * heading.cos(),
            spec.dynamic_velocity * heading.sin(),
            0.0,
        ];
    }
    Ok(objects)
}

/// Camera orientation for a heading (unit xy direction) and pitch from nadir.
/// Camera axes: x right, y down in the image, z along the optical axis.
fn camera_rotation(heading: Vector3<f64>, pitch_deg: f64) -> Matrix3<f64> {
    let (s, c) = pitch_deg.to_radians().sin_cos();
    let up = Vector3::z();
    let z = -up * c + heading * s;
    let y = -(heading * c + up * s);
    let x = y.cross(&z);
    Matrix3::from_columns(&[x, y, z])
}

/// Poses sampled uniformly by arc length along the waypoint path.
pub fn trajectory_poses(spec: &TrajectorySpec) -> Result<PoseTable> {
    spec.validate()?;
    let pts: Vec<Vector3<f64>> = spec.waypoints.iter().map(|w| Vector3::from(*w)).collect();
    let seg_len: Vec<f64> = pts.windows(2).map(|p| (p[1] - p[0]).norm()).collect();
    let total: f64 = seg_len.iter().sum();
    let mut poses = PoseTable::new();
    let mut seg = 0usize;
    let mut seg_start = 0.0;
    for f in 0..spec.frames {
        let s = total * f as f64 / (spec.frames - 1) as f64;
        while seg + 1 < seg_len.len() && (s > seg_start + seg_len[seg] || seg_len[seg] == 0.0) {
            seg_start += seg_len[seg];
            seg += 1;
        }
        let frac = if seg_len[seg] > 0.0 {
            ((s - seg_start) / seg_len[seg]).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let pos = pts[seg] + (pts[seg + 1] - pts[seg]) * frac + Vector3::z() * spec.altitude;
        let dir = pts[seg + 1] - pts[seg];
        let mut heading = Vector3::new(dir.x, dir.y, 0.0);
        if heading.norm() < 1e-12 {
            heading = Vector3::x();
        }
        heading.normalize_mut();
        let rotation = camera_rotation(heading, spec.camera_pitch);
        poses.insert(f, Pose::new(rotation, pos, f)?);
    }
    Ok(poses)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Gaussian pixel noise standard deviation.
    pub noise_px: f64,
    /// Probability of dropping each detection.
    pub dropout: f64,
    /// Probability of splitting an object's track into two track ids.
    pub duplicate_rate: f64,
    pub seed: u64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            noise_px: 0.0,
            dropout: 0.0,
            duplicate_rate: 0.0,
            seed: 0,
        }
    }
}

/// Rendered run plus the object each track observes.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub tracks: TrackSet,
    pub track_objects: BTreeMap<u64, usize>,
}

/// Projects every object into every frame where it is in front of the camera
/// and inside the image, adds pixel noise, drops and splits tracks.
pub fn render_tracks(
    scene: &[SceneObject],
    trajectory: &TrajectorySpec,
    intrinsics: &CameraIntrinsics,
    options: &RenderOptions,
) -> Result<Rendered> {
    intrinsics.validate()?;
    for (name, p) in [("dropout", options.dropout), ("duplicate_rate", options.duplicate_rate)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(name, "must be a probability"));
        }
    }
    if !(options.noise_px.is_finite() && options.noise_px >= 0.0) {
        return Err(Error::invalid("noise_px", "must be non-negative"));
    }
    let poses = trajectory_poses(trajectory)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let noise = Normal::new(0.0, options.noise_px.max(f64::MIN_POSITIVE)).expect("valid sigma");

    let mut per_object: Vec<Vec<Detection>> = vec![Vec::new(); scene.len()];
    let mut first_seen: Vec<Option<(usize, usize)>> = vec![None; scene.len()];
    for pose in poses.values() {
        for (k, obj) in scene.iter().enumerate() {
            let x = obj.position_at(pose.frame_index);
            if pose.to_camera(&x).z < 0.1 {
                continue;
            }
            let Ok(clean) = project(pose, intrinsics, &x) else { continue };
            if !intrinsics.contains(&clean) {
                continue;
            }
            let mut px = clean;
            if options.noise_px > 0.0 {
                px.x += noise.sample(&mut rng);
                px.y += noise.sample(&mut rng);
            }
            let dropped = options.dropout > 0.0 && rng.random::<f64>() < options.dropout;
            if dropped || !intrinsics.contains(&px) {
                continue;
            }
            first_seen[k].get_or_insert((pose.frame_index, k));
            per_object[k].push(Detection {
                frame_index: pose.frame_index,
                centroid: px,
            });
        }
    }

    let mut order: Vec<usize> = (0..scene.len()).filter(|&k| first_seen[k].is_some()).collect();
    order.sort_by_key(|&k| first_seen[k]);
    let mut tracks = Vec::new();
    let mut track_objects = BTreeMap::new();
    let mut pending = Vec::new();
    for (next_id, k) in order.into_iter().enumerate() {
        let detections = std::mem::take(&mut per_object[k]);
        let id = next_id as u64;
        if detections.len() >= 2 && options.duplicate_rate > 0.0 && rng.random::<f64>() < options.duplicate_rate {
            let cut = rng.random_range(1..detections.len());
            let (head, tail) = detections.split_at(cut);
            tracks.push(Track {
                track_id: id,
                detections: head.to_vec(),
            });
            track_objects.insert(id, scene[k].object_id);
            pending.push((k, tail.to_vec()));
        } else {
            tracks.push(Track { track_id: id, detections });
            track_objects.insert(id, scene[k].object_id);
        }
    }
    for (id, (k, detections)) in (tracks.len() as u64..).zip(pending) {
        tracks.push(Track { track_id: id, detections });
        track_objects.insert(id, scene[k].object_id);
    }
    Ok(Rendered {
        tracks: TrackSet {
            intrinsics: *intrinsics,
            poses,
            tracks,
        },
        track_objects,
    })
}

/// Moves a map into a new frame by a yaw rotation and translation.
///
/// Covariances rotate as `R C Rᵀ`. With `relabel_seed`, landmark ids are
/// randomly permuted and the landmark list shuffled so that ids carry no
/// correspondence information. Returns the map and the exact old→new transform.
pub fn perturb_frame(
    map: &ObjectMap,
    yaw_deg: f64,
    translation: Vector3<f64>,
    relabel_seed: Option<u64>,
) -> (ObjectMap, RigidTransform) {
    let truth = RigidTransform::from_euler_deg(0.0, 0.0, yaw_deg, translation);
    let r = truth.rotation;
    let mut landmarks: Vec<Landmark> = map
        .landmarks
        .iter()
        .map(|l| Landmark {
            landmark_id: l.landmark_id,
            position: truth.apply(&l.position),
            covariance: {
                let c = r * l.covariance * r.transpose();
                (c + c.transpose()) * 0.5
            },
        })
        .collect();
    if let Some(seed) = relabel_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids: Vec<u64> = landmarks.iter().map(|l| l.landmark_id).collect();
        ids.shuffle(&mut rng);
        for (l, id) in landmarks.iter_mut().zip(ids) {
            l.landmark_id = id;
        }
        landmarks.shuffle(&mut rng);
    }
    (
        ObjectMap {
            agent_id: map.agent_id.clone(),
            frame_label: map.frame_label.clone(),
            landmarks,
        },
        truth,
    )
}

/// Intrinsics used by the simulator when none are given: 640×480, f = 400 px.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 400.0,
        fy: 400.0,
        cx: 320.0,
        cy: 240.0,
        width: 640.0,
        height: 480.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Hyperparameters;
    use crate::triangulation::build_map;

    fn scene_spec(n: usize, dynamic: usize, seed: u64) -> SceneSpec {
        SceneSpec {
            n_objects: n,
            extent: [8.0, 8.0, 1.0],
            n_dynamic: dynamic,
            dynamic_velocity: 1.0,
            seed,
        }
    }

    fn nadir() -> TrajectorySpec {
        TrajectorySpec::lawnmower((-1.0, 9.0), (0.0, 8.0), 4, 4.0, 160, 0.0)
    }

    #[test]
    fn scene_is_reproducible() {
        let a = generate_scene(&scene_spec(36, 0, 9)).unwrap();
        let b = generate_scene(&scene_spec(36, 0, 9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 36);
        let c = generate_scene(&scene_spec(36, 0, 10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dynamic_count_exact() {
        let objs = generate_scene(&scene_spec(100, 10, 1)).unwrap();
        assert_eq!(objs.iter().filter(|o| o.dynamic).count(), 10);
        assert!(objs
            .iter()
            .filter(|o| o.dynamic)
            .all(|o| (Vector3::from(o.velocity).norm() - 1.0).abs() < 1e-12));
        assert!(generate_scene(&scene_spec(3, 4, 1)).is_err());
    }

    #[test]
    fn nadir_camera_looks_down() {
        let poses = trajectory_poses(&nadir()).unwrap();
        for p in poses.values() {
            let axis = p.rotation * Vector3::z();
            assert!((axis - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
            assert!((p.translation.z - 4.0).abs() < 1e-12);
        }
        let oblique = TrajectorySpec {
            camera_pitch: 45.0,
            ..nadir()
        };
        let poses = trajectory_poses(&oblique).unwrap();
        let axis = poses[&0].rotation * Vector3::z();
        assert!((axis.z + 45f64.to_radians().cos()).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_tracks_triangulate_exactly() {
        let scene = generate_scene(&scene_spec(30, 0, 2)).unwrap();
        let r = render_tracks(&scene, &nadir(), &default_intrinsics(), &RenderOptions::default()).unwrap();
        // static tracks are exactly consistent with the projection model
        for t in &r.tracks.tracks {
            let obj = &scene[r.track_objects[&t.track_id]];
            for d in &t.detections {
                let p = project(&r.tracks.poses[&d.frame_index], &default_intrinsics(), &obj.position_at(0)).unwrap();
                assert!((p - d.centroid).norm() < 1e-9);
            }
        }
        let (map, report) = build_map(
            &r.tracks.tracks,
            &r.tracks.poses,
            &r.tracks.intrinsics,
            &Hyperparameters::default(),
            "sim",
        )
        .unwrap();
        assert_eq!(report.discarded_diverged, 0);
        assert_eq!(map.len(), 30);
        for lm in &map.landmarks {
            let truth = scene[r.track_objects[&lm.landmark_id]].position_at(0);
            assert!((lm.position - truth).norm() < 1e-6);
        }
    }

    #[test]
    fn full_dropout_gives_no_tracks() {
        let scene = generate_scene(&scene_spec(20, 0, 3)).unwrap();
        let opts = RenderOptions {
            dropout: 1.0,
            ..Default::default()
        };
        let r = render_tracks(&scene, &nadir(), &default_intrinsics(), &opts).unwrap();
        assert!(r.tracks.tracks.is_empty());
    }

    #[test]
    fn detections_stay_inside_the_image() {
        let scene = generate_scene(&scene_spec(40, 4, 4)).unwrap();
        let opts = RenderOptions {
            noise_px: 3.0,
            dropout: 0.2,
            duplicate_rate: 0.3,
            seed: 4,
        };
        let r = render_tracks(&scene, &nadir(), &default_intrinsics(), &opts).unwrap();
        r.tracks.validate().unwrap();
        let again = render_tracks(&scene, &nadir(), &default_intrinsics(), &opts).unwrap();
        assert_eq!(r, again);
        // duplicates share their object, so there are more tracks than seen objects
        let objects: std::collections::BTreeSet<usize> = r.track_objects.values().copied().collect();
        assert!(r.tracks.tracks.len() > objects.len());
    }

    #[test]
    fn perturb_examples() {
        let scene = generate_scene(&scene_spec(12, 0, 5)).unwrap();
        let map = ObjectMap {
            agent_id: "a".into(),
            frame_label: "odom".into(),
            landmarks: scene
                .iter()
                .map(|o| Landmark {
                    landmark_id: o.object_id as u64,
                    position: o.position_at(0),
                    covariance: Matrix3::from_diagonal(&Vector3::new(1e-4, 4e-4, 9e-4)),
                })
                .collect(),
        };
        let (same, truth) = perturb_frame(&map, 0.0, Vector3::zeros(), None);
        assert_eq!(same, map);
        assert_eq!(truth, RigidTransform::identity());

        let (moved, truth) = perturb_frame(&map, 90.0, Vector3::new(5.0, 0.0, 0.0), None);
        for (a, b) in map.landmarks.iter().zip(&moved.landmarks) {
            let expect = Vector3::new(-a.position.y + 5.0, a.position.x, a.position.z);
            assert!((b.position - expect).norm() < 1e-12);
            assert!((truth.apply(&a.position) - b.position).norm() < 1e-12);
            let ea = a.covariance.symmetric_eigenvalues();
            let eb = b.covariance.symmetric_eigenvalues();
            let mut ea: Vec<f64> = ea.iter().copied().collect();
            let mut eb: Vec<f64> = eb.iter().copied().collect();
            ea.sort_by(f64::total_cmp);
            eb.sort_by(f64::total_cmp);
            for (x, y) in ea.iter().zip(&eb) {
                assert!((x - y).abs() < 1e-12);
            }
        }

        let (relabeled, _) = perturb_frame(&map, 10.0, Vector3::zeros(), Some(3));
        relabeled.validate().unwrap();
        assert_ne!(
            relabeled.landmarks.iter().map(|l| l.landmark_id).collect::<Vec<_>>(),
            map.landmarks.iter().map(|l| l.landmark_id).collect::<Vec<_>>()
        );
    }
}
