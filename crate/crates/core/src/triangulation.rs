//! Per-track landmark estimation.
//!
//! Every track has a single unknown (its 3D point) and the camera poses are
//! fixed, so each track is solved as an independent 3-parameter nonlinear
//! least-squares problem: midpoint triangulation for the initial guess, then
//! damped Gauss-Newton on the reprojection error. Tracks that fail to
//! converge are treated as dynamic objects and dropped.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::PoseTable;
use crate::model::{bearing, project, CameraIntrinsics, Hyperparameters, Landmark, ObjectMap, Pose, Track};

/// Stopping rules for [`refine`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOptions {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub relative_cost_tolerance: f64,
    /// Consecutive rejected (cost-increasing) damped steps before giving up.
    pub max_consecutive_increases: usize,
    /// A converged solution whose residual scale `s` (pixels) exceeds this
    /// has not reached the noise floor and is reported as diverged.
    pub residual_floor_px: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            step_tolerance: 1e-8,
            relative_cost_tolerance: 1e-10,
            max_consecutive_increases: 5,
            residual_floor_px: 5.0,
        }
    }
}

/// Keeps tracks with strictly more than `n_min` detections.
pub fn filter_tracks(tracks: &[Track], n_min: usize) -> Vec<Track> {
    tracks.iter().filter(|t| t.len() > n_min).cloned().collect()
}

fn pose_for<'a>(poses: &'a PoseTable, track: &Track, frame: usize) -> Result<&'a Pose> {
    poses.get(&frame).ok_or_else(|| {
        Error::invalid(
            format!("tracks[id={}]", track.track_id),
            format!("no pose for frame {frame}"),
        )
    })
}

/// Least-squares point closest to all detection rays.
pub fn initial_guess(track: &Track, poses: &PoseTable, intrinsics: &CameraIntrinsics) -> Result<Vector3<f64>> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for det in &track.detections {
        let pose = pose_for(poses, track, det.frame_index)?;
        let dir = (pose.rotation * bearing(intrinsics, &det.centroid)).normalize();
        let proj = Matrix3::identity() - dir * dir.transpose();
        a += proj;
        b += proj * pose.center();
    }
    if track.detections.len() < 2 {
        return Err(Error::Degenerate(format!("track {} has fewer than two rays", track.track_id)));
    }
    let eig = a.symmetric_eigen();
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if lo <= 1e-8 * hi {
        return Err(Error::Degenerate(format!(
            "track {}: rays are parallel (eigenvalue ratio {:.3e})",
            track.track_id,
            lo / hi
        )));
    }
    let inv_diag = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    Ok(eig.eigenvectors * inv_diag * eig.eigenvectors.transpose() * b)
}

/// Analytic derivative of the projected pixel with respect to the world point.
pub fn reprojection_jacobian(pose: &Pose, intrinsics: &CameraIntrinsics, point: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
    let pc = pose.to_camera(point);
    if pc.z <= 1e-6 {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    let iz = 1.0 / pc.z;
    let d_cam = Matrix2x3::new(
        intrinsics.fx * iz,
        0.0,
        -intrinsics.fx * pc.x * iz * iz,
        0.0,
        intrinsics.fy * iz,
        -intrinsics.fy * pc.y * iz * iz,
    );
    Ok(d_cam * pose.rotation.transpose())
}

struct Problem<'a> {
    obs: Vec<(&'a Pose, Vector2<f64>)>,
    intrinsics: &'a CameraIntrinsics,
}

impl Problem<'_> {
    /// Summed squared reprojection error, `None` outside the chirality domain.
    fn cost(&self, x: &Vector3<f64>) -> Option<f64> {
        let mut total = 0.0;
        for (pose, z) in &self.obs {
            let p = project(pose, self.intrinsics, x).ok()?;
            total += (p - z).norm_squared();
        }
        Some(total)
    }

    fn normal_equations(&self, x: &Vector3<f64>) -> Option<(Matrix3<f64>, Vector3<f64>)> {
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for (pose, z) in &self.obs {
            let r = project(pose, self.intrinsics, x).ok()? - z;
            let j = reprojection_jacobian(pose, self.intrinsics, x).ok()?;
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        Some((h, g))
    }

    fn in_front_of_any(&self, x: &Vector3<f64>) -> bool {
        self.obs.iter().any(|(pose, _)| pose.to_camera(x).z > 1e-6)
    }
}

/// Result of a successful refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub landmark: Landmark,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

/// Minimizes the summed squared reprojection error of one track.
pub fn refine(
    track: &Track,
    poses: &PoseTable,
    intrinsics: &CameraIntrinsics,
    guess: &Vector3<f64>,
    options: &RefineOptions,
) -> Result<Refined> {
    if guess.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("guess", "non-finite initial guess"));
    }
    let obs = track
        .detections
        .iter()
        .map(|d| Ok((pose_for(poses, track, d.frame_index)?, d.centroid)))
        .collect::<Result<Vec<_>>>()?;
    let problem = Problem { obs, intrinsics };
    let diverged = |why: String| Error::Diverged(format!("track {}: {why}", track.track_id));

    let mut x = *guess;
    let Some(initial_cost) = problem.cost(&x) else {
        return Err(diverged(if problem.in_front_of_any(&x) {
            "initial guess behind an observing camera".into()
        } else {
            "initial guess behind every camera".into()
        }));
    };
    let mut cost = initial_cost;
    let mut lambda = 0.0f64;
    let mut increases = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;

    while iterations < options.max_iterations {
        iterations += 1;
        let (h, g) = problem
            .normal_equations(&x)
            .ok_or_else(|| diverged("iterate left the chirality domain".into()))?;
        let mut damped = h;
        if lambda > 0.0 {
            for i in 0..3 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
        }
        let Some(step) = damped.cholesky().map(|c| -c.solve(&g)) else {
            lambda = if lambda == 0.0 { 1e-3 } else { lambda * 10.0 };
            continue;
        };
        if step.norm() < options.step_tolerance {
            converged = true;
            break;
        }
        let candidate = x + step;
        match problem.cost(&candidate) {
            Some(c) if c <= cost => {
                let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
                x = candidate;
                cost = c;
                increases = 0;
                lambda = if lambda < 1e-9 { 0.0 } else { lambda / 10.0 };
                if rel < options.relative_cost_tolerance {
                    converged = true;
                    break;
                }
            }
            _ => {
                increases += 1;
                if increases >= options.max_consecutive_increases {
                    return Err(diverged(format!("cost increased for {increases} consecutive damped steps")));
                }
                lambda = if lambda == 0.0 { 1e-3 } else { lambda * 10.0 };
            }
        }
    }
    if !converged {
        return Err(diverged(format!("no convergence within {} iterations", options.max_iterations)));
    }
    if !problem.in_front_of_any(&x) {
        return Err(diverged("solution behind every camera".into()));
    }

    let dof = (2 * track.detections.len()).saturating_sub(3).max(1) as f64;
    let s2 = cost / dof;
    if s2.sqrt() > options.residual_floor_px {
        return Err(diverged(format!(
            "residual scale {:.2} px above the {:.2} px floor",
            s2.sqrt(),
            options.residual_floor_px
        )));
    }
    let (h, _) = problem
        .normal_equations(&x)
        .ok_or_else(|| diverged("final point behind a camera".into()))?;
    let info_inv = h
        .try_inverse()
        .ok_or_else(|| Error::Degenerate(format!("track {}: singular information matrix", track.track_id)))?;
    let mut covariance = info_inv * s2;
    covariance = (covariance + covariance.transpose()) * 0.5;

    Ok(Refined {
        landmark: Landmark {
            landmark_id: track.track_id,
            position: x,
            covariance,
        },
        initial_cost,
        final_cost: cost,
        iterations,
    })
}

/// Per-map bookkeeping of what [`build_map`] kept and dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub landmarks: usize,
    pub discarded_short: usize,
    pub discarded_diverged: usize,
    pub discarded_degenerate: usize,
    pub diverged_ids: Vec<u64>,
    pub degenerate_ids: Vec<u64>,
}

impl BuildReport {
    pub fn is_empty_map(&self) -> bool {
        self.landmarks == 0
    }
}

pub fn build_map(
    tracks: &[Track],
    poses: &PoseTable,
    intrinsics: &CameraIntrinsics,
    params: &Hyperparameters,
    agent_id: &str,
) -> Result<(ObjectMap, BuildReport)> {
    build_map_with(tracks, poses, intrinsics, params, agent_id, &RefineOptions::default())
}

/// Triangulates every sufficiently long track independently. Landmarks are
/// returned sorted by id, so the map does not depend on track order.
pub fn build_map_with(
    tracks: &[Track],
    poses: &PoseTable,
    intrinsics: &CameraIntrinsics,
    params: &Hyperparameters,
    agent_id: &str,
    options: &RefineOptions,
) -> Result<(ObjectMap, BuildReport)> {
    let kept = filter_tracks(tracks, params.n_min);
    let mut report = BuildReport {
        discarded_short: tracks.len() - kept.len(),
        ..Default::default()
    };

    let results: Vec<(u64, Result<Refined>)> = kept
        .par_iter()
        .map(|t| {
            let r = initial_guess(t, poses, intrinsics).and_then(|g| refine(t, poses, intrinsics, &g, options));
            (t.track_id, r)
        })
        .collect();

    let mut landmarks = Vec::with_capacity(results.len());
    for (id, r) in results {
        match r {
            Ok(refined) => landmarks.push(refined.landmark),
            Err(Error::Diverged(msg)) => {
                log::debug!("{msg}");
                report.diverged_ids.push(id);
            }
            Err(Error::Degenerate(msg)) => {
                log::debug!("{msg}");
                report.degenerate_ids.push(id);
            }
            Err(other) => return Err(other),
        }
    }
    landmarks.sort_by_key(|l| l.landmark_id);
    report.diverged_ids.sort_unstable();
    report.degenerate_ids.sort_unstable();
    report.discarded_diverged = report.diverged_ids.len();
    report.discarded_degenerate = report.degenerate_ids.len();
    report.landmarks = landmarks.len();
    if landmarks.is_empty() {
        log::warn!("map for agent `{agent_id}` is empty: no track survived triangulation");
    }
    let map = ObjectMap::new(agent_id, format!("{agent_id}/odom"), landmarks)?;
    Ok((map, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{unproject, Detection, RigidTransform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 400.0,
            fy: 400.0,
            cx: 320.0,
            cy: 240.0,
            width: 640.0,
            height: 480.0,
        }
    }

    /// Cameras on a circle, all looking at `target`.
    fn ring_poses(n: usize, target: Vector3<f64>, radius: f64) -> PoseTable {
        (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU * 0.3;
                let c = target + Vector3::new(radius * a.cos(), radius * a.sin(), 6.0);
                let z = (target - c).normalize();
                let x = z.cross(&Vector3::z()).normalize();
                let y = z.cross(&x);
                let r = Matrix3::from_columns(&[x, y, z]);
                (i, Pose::new(r, c, i).unwrap())
            })
            .collect()
    }

    fn track_of(id: u64, poses: &PoseTable, point: &Vector3<f64>) -> Track {
        let k = intrinsics();
        Track {
            track_id: id,
            detections: poses
                .values()
                .map(|p| Detection {
                    frame_index: p.frame_index,
                    centroid: project(p, &k, point).unwrap(),
                })
                .collect(),
        }
    }

    #[test]
    fn filter_is_strict() {
        let mk = |n: usize| Track {
            track_id: n as u64,
            detections: (0..n)
                .map(|f| Detection {
                    frame_index: f,
                    centroid: Vector2::zeros(),
                })
                .collect(),
        };
        let kept = filter_tracks(&[mk(3), mk(4), mk(2), mk(5)], 3);
        assert_eq!(kept.iter().map(|t| t.track_id).collect::<Vec<_>>(), vec![4, 5]);
        assert!(filter_tracks(&[], 3).is_empty());
    }

    #[test]
    fn orthogonal_rays_meet() {
        let k = intrinsics();
        let target = Vector3::new(1.0, 2.0, 5.0);
        // camera 0 looks along +z at the target, camera 1 along +x
        let p0 = Pose::new(Matrix3::identity(), target - Vector3::new(0.0, 0.0, 4.0), 0).unwrap();
        let r1 = Matrix3::from_columns(&[-Vector3::z(), Vector3::y(), Vector3::x()]);
        let p1 = Pose::new(r1, target - Vector3::new(3.0, 0.0, 0.0), 1).unwrap();
        let poses: PoseTable = [(0, p0), (1, p1)].into_iter().collect();
        let track = track_of(9, &poses, &target);
        let x = initial_guess(&track, &poses, &k).unwrap();
        assert!((x - target).norm() < 1e-9);
    }

    #[test]
    fn five_views_recover_point() {
        let target = Vector3::new(3.0, -1.0, 8.0);
        let poses = ring_poses(5, target, 4.0);
        let track = track_of(1, &poses, &target);
        let x = initial_guess(&track, &poses, &intrinsics()).unwrap();
        assert!((x - target).norm() < 1e-6);
    }

    #[test]
    fn parallel_rays_are_degenerate() {
        let k = intrinsics();
        let pose = Pose::identity(0);
        let poses: PoseTable = [(0, pose.clone()), (1, Pose { frame_index: 1, ..pose })].into_iter().collect();
        let track = track_of(2, &poses, &Vector3::new(0.1, 0.2, 3.0));
        assert!(matches!(initial_guess(&track, &poses, &k), Err(Error::Degenerate(_))));
    }

    #[test]
    fn zero_noise_refine() {
        let target = Vector3::new(0.5, 0.5, 1.0);
        let poses = ring_poses(8, target, 3.0);
        let track = track_of(4, &poses, &target);
        let k = intrinsics();
        let guess = target + Vector3::new(0.2, -0.1, 0.3);
        let r = refine(&track, &poses, &k, &guess, &RefineOptions::default()).unwrap();
        assert!((r.landmark.position - target).norm() < 1e-6);
        assert!(r.landmark.covariance.trace() < 1e-10);
        assert!(r.final_cost <= r.initial_cost);
        assert_eq!(r.landmark.landmark_id, 4);
    }

    #[test]
    fn moving_point_diverges() {
        let k = intrinsics();
        // camera sweeps along +x at 4 m altitude looking down; the object runs along +y
        let poses: PoseTable = (0..6)
            .map(|f| {
                let t = RigidTransform::from_euler_deg(180.0, 0.0, 0.0, Vector3::new(f as f64 * 0.3, 0.0, 4.0));
                (f, Pose::new(t.rotation, t.translation, f).unwrap())
            })
            .collect();
        let detections = poses
            .values()
            .filter_map(|p| {
                let x = Vector3::new(0.8, -2.0 + 0.8 * p.frame_index as f64, 0.0);
                project(p, &k, &x).ok().filter(|px| k.contains(px)).map(|centroid| Detection {
                    frame_index: p.frame_index,
                    centroid,
                })
            })
            .collect::<Vec<_>>();
        assert_eq!(detections.len(), 6);
        let track = Track {
            track_id: 1,
            detections,
        };
        let outcome = initial_guess(&track, &poses, &k).and_then(|g| refine(&track, &poses, &k, &g, &RefineOptions::default()));
        assert!(matches!(outcome, Err(Error::Diverged(_))), "{outcome:?}");
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = intrinsics();
        for _ in 0..100 {
            let t = RigidTransform::from_euler_deg(
                rng.random_range(-180.0..180.0),
                rng.random_range(-80.0..80.0),
                rng.random_range(-180.0..180.0),
                Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
            );
            let pose = Pose::new(t.rotation, t.translation, 0).unwrap();
            let px = Vector2::new(rng.random_range(10.0..630.0), rng.random_range(10.0..470.0));
            let x = unproject(&pose, &k, &px, rng.random_range(1.0..20.0));
            let j = reprojection_jacobian(&pose, &k, &x).unwrap();
            let h = 1e-6;
            for c in 0..3 {
                let mut e = Vector3::zeros();
                e[c] = h;
                let fd = (project(&pose, &k, &(x + e)).unwrap() - project(&pose, &k, &(x - e)).unwrap()) / (2.0 * h);
                let col = j.column(c);
                let rel = (fd - col).norm() / col.norm().max(1e-3);
                assert!(rel < 1e-4, "column {c}: {fd} vs {col}");
            }
        }
    }

    #[test]
    fn build_map_drops_short_tracks_and_warns() {
        let target = Vector3::new(0.0, 0.0, 0.0);
        let poses = ring_poses(2, target, 3.0);
        let track = track_of(1, &poses, &target);
        let (map, report) = build_map(&[track], &poses, &intrinsics(), &Hyperparameters::default(), "a").unwrap();
        assert!(map.is_empty());
        assert!(report.is_empty_map());
        assert_eq!(report.discarded_short, 1);
    }

    #[test]
    fn build_map_is_order_invariant() {
        let poses = ring_poses(7, Vector3::zeros(), 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tracks: Vec<Track> = (0..12)
            .map(|i| {
                let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
                track_of(i, &poses, &p)
            })
            .collect();
        let params = Hyperparameters::default();
        let (a, _) = build_map(&tracks, &poses, &intrinsics(), &params, "a").unwrap();
        let mut rev = tracks.clone();
        rev.reverse();
        let (b, _) = build_map(&rev, &poses, &intrinsics(), &params, "a").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
    }
}
