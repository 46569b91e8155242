//! End-to-end behaviour of the library on simulated runs.

use vista_align::nalgebra::{Matrix3, Vector3};
use vista_align::simulation::{
    default_intrinsics, generate_scene, perturb_frame, render_tracks, RenderOptions, SceneObject, SceneSpec,
    TrajectorySpec,
};
use vista_align::{align_maps, build_map, Hyperparameters, Landmark, ObjectMap};

fn scene(n: usize, dynamic: usize, extent: [f64; 3], seed: u64) -> Vec<SceneObject> {
    generate_scene(&SceneSpec {
        n_objects: n,
        extent,
        n_dynamic: dynamic,
        dynamic_velocity: 1.0,
        seed,
    })
    .unwrap()
}

fn survey() -> TrajectorySpec {
    TrajectorySpec::lawnmower((-5.0, 35.0), (0.0, 30.0), 4, 10.0, 200, 0.0)
}

fn noisy(seed: u64) -> RenderOptions {
    RenderOptions {
        noise_px: 1.0,
        seed,
        ..Default::default()
    }
}

fn truth_map(objects: &[SceneObject]) -> ObjectMap {
    ObjectMap {
        agent_id: "truth".into(),
        frame_label: "world".into(),
        landmarks: objects
            .iter()
            .map(|o| Landmark {
                landmark_id: o.object_id as u64,
                position: o.position_at(0),
                covariance: Matrix3::identity() * 1e-4,
            })
            .collect(),
    }
}

fn simulated_map(objects: &[SceneObject], traj: &TrajectorySpec, seed: u64, agent: &str) -> ObjectMap {
    let k = default_intrinsics();
    let r = render_tracks(objects, traj, &k, &noisy(seed)).unwrap();
    build_map(&r.tracks.tracks, &r.tracks.poses, &k, &Hyperparameters::default(), agent)
        .unwrap()
        .0
}

#[test]
fn every_static_object_becomes_a_landmark() {
    let objects = scene(100, 0, [30.0, 30.0, 1.0], 11);
    let k = default_intrinsics();
    let r = render_tracks(&objects, &survey(), &k, &noisy(11)).unwrap();
    let (map, report) = build_map(&r.tracks.tracks, &r.tracks.poses, &k, &Hyperparameters::default(), "a").unwrap();
    assert_eq!(map.len(), 100, "{report:?}");
    for l in &map.landmarks {
        let truth = objects[r.track_objects[&l.landmark_id]].position_at(0);
        assert!((l.position - truth).norm() < 0.2, "landmark {} off by {}", l.landmark_id, (l.position - truth).norm());
    }
}

#[test]
fn moving_objects_are_left_out() {
    let objects = scene(100, 10, [30.0, 30.0, 1.0], 12);
    let k = default_intrinsics();
    let r = render_tracks(&objects, &survey(), &k, &noisy(12)).unwrap();
    let (map, _) = build_map(&r.tracks.tracks, &r.tracks.poses, &k, &Hyperparameters::default(), "a").unwrap();
    assert!(map.len() >= 90, "only {} landmarks", map.len());
    for l in &map.landmarks {
        let obj = &objects[r.track_objects[&l.landmark_id]];
        assert!(!obj.dynamic, "moving object {} kept as landmark {}", obj.object_id, l.landmark_id);
    }
}

#[test]
fn unrelated_maps_rarely_match() {
    let params = Hyperparameters::default();
    let mut empty = 0;
    for seed in 0..100u64 {
        let a = truth_map(&scene(36, 0, [8.0, 8.0, 1.0], 2 * seed));
        let b = truth_map(&scene(36, 0, [8.0, 8.0, 1.0], 2 * seed + 1));
        if align_maps(&a, &b, &params).unwrap().is_empty() {
            empty += 1;
        }
    }
    assert!(empty >= 95, "a hypothesis survived on {} of 100 unrelated pairs", 100 - empty);
}

#[test]
fn swapping_maps_inverts_the_transform() {
    let params = Hyperparameters::default();
    for seed in 0..5u64 {
        let a = truth_map(&scene(36, 0, [8.0, 8.0, 1.0], 40 + seed));
        let (b, truth) = perturb_frame(&a, 25.0 + 10.0 * seed as f64, Vector3::new(1.5, -2.0, 0.3), Some(seed));
        let ab = align_maps(&a, &b, &params).unwrap();
        let ba = align_maps(&b, &a, &params).unwrap();
        let (ab, ba) = (&ab[0].transform, &ba[0].transform);
        let round = ab.compose(ba);
        assert!((round.rotation - Matrix3::identity()).norm() < 1e-6);
        assert!(round.translation.norm() < 1e-6);
        assert!((ab.rotation - truth.rotation).norm() < 1e-6);
        assert!((ab.translation - truth.translation).norm() < 1e-6);
    }
}

#[test]
fn nadir_and_oblique_views_of_one_scene_align_to_identity() {
    let objects = scene(36, 0, [8.0, 8.0, 1.0], 77);
    let nadir = TrajectorySpec::lawnmower((-1.0, 9.0), (0.0, 8.0), 4, 4.0, 200, 0.0);
    let oblique = TrajectorySpec::lawnmower((-3.0, 11.0), (-1.0, 9.0), 3, 4.0, 200, 45.0);
    let a = simulated_map(&objects, &nadir, 1, "nadir");
    let b = simulated_map(&objects, &oblique, 2, "oblique");
    let params = Hyperparameters {
        theta_rp: 6.0,
        ..Hyperparameters::default()
    };
    let hyps = align_maps(&a, &b, &params).unwrap();
    let top = hyps.first().expect("no hypothesis");
    let t = &top.transform;
    let angle = ((t.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees();
    assert!(angle < 2.0, "rotation off by {angle} deg");
    assert!(t.translation.norm() < 0.3, "translation off by {} m", t.translation.norm());
}
