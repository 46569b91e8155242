//! Precision/recall evaluation against a known frame alignment.

use std::collections::HashSet;
use std::time::Duration;

use nalgebra::Vector3;

use crate::alignment::{attitude_feasible, compare_submaps, MatchRun};
use crate::error::{Error, Result};
use crate::model::{transform_angles, Hyperparameters, ObjectMap, RigidTransform};
use crate::submap::{generate_submaps, mahalanobis_filter, Submap};

fn voxels(points: &[Vector3<f64>], voxel: f64) -> HashSet<[i64; 3]> {
    points
        .iter()
        .map(|p| [(p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64])
        .collect()
}

/// Voxel-occupancy IoU of two point sets expressed in the same frame.
pub fn point_iou(a: &[Vector3<f64>], b: &[Vector3<f64>], voxel: f64) -> f64 {
    let va = voxels(a, voxel);
    let vb = voxels(b, voxel);
    let union = va.union(&vb).count();
    if union == 0 {
        return 0.0;
    }
    va.intersection(&vb).count() as f64 / union as f64
}

/// Submap IoU; both submaps must already be in a common frame. Empty submaps give 0.
pub fn submap_iou(submap_a: &Submap, submap_b: &Submap, voxel: f64) -> f64 {
    point_iou(&submap_a.points, &submap_b.points, voxel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Correct,
    Incorrect,
}

/// Compares a hypothesized A→B transform with the true one. The residual
/// `hypothesis ∘ truth⁻¹` must have |roll|, |pitch| < `theta_rp`,
/// |yaw| < `theta_yaw` and translation norm < `t_max`.
pub fn classify(hypothesis: &RigidTransform, truth: &RigidTransform, params: &Hyperparameters) -> Classification {
    let residual = hypothesis.compose(&truth.inverse());
    let a = transform_angles(&residual);
    let ok = a.roll.abs() < params.theta_rp
        && a.pitch.abs() < params.theta_rp
        && a.yaw.abs() < params.theta_yaw
        && residual.translation.norm() < params.t_max;
    if ok {
        Classification::Correct
    } else {
        Classification::Incorrect
    }
}

/// Summary of one submap pair for precision/recall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRecord {
    pub iou: f64,
    pub cardinality: usize,
    /// A transform exists and passes the roll/pitch gate.
    pub attitude_ok: bool,
    pub correct: bool,
}

impl PairRecord {
    pub fn hypothesized(&self, s_max: usize) -> bool {
        self.attitude_ok && self.cardinality > s_max
    }
}

/// Scores every pair of a match run against the true A→B transform. Submap
/// A points are moved into B's frame before computing IoU.
pub fn score_run(run: &MatchRun, truth: &RigidTransform, params: &Hyperparameters) -> Vec<PairRecord> {
    let moved_a: Vec<Vec<Vector3<f64>>> = run
        .submaps_a
        .iter()
        .map(|s| s.points.iter().map(|p| truth.apply(p)).collect())
        .collect();
    let index_a: std::collections::HashMap<usize, usize> =
        run.submaps_a.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    let index_b: std::collections::HashMap<usize, usize> =
        run.submaps_b.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    run.outcomes
        .iter()
        .map(|o| {
            let a = &moved_a[index_a[&o.source_submap]];
            let b = &run.submaps_b[index_b[&o.target_submap]].points;
            let (attitude_ok, correct) = match &o.hypothesis {
                Some(h) => (
                    attitude_feasible(&h.attitude, params),
                    classify(&h.transform, truth, params) == Classification::Correct,
                ),
                None => (false, false),
            };
            PairRecord {
                iou: point_iou(a, b, params.iou_voxel),
                cardinality: o.cardinality(),
                attitude_ok,
                correct,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrRow {
    pub s_max: usize,
    /// 1.0 with `precision_undefined` set when nothing is hypothesized.
    pub precision: f64,
    /// 0.0 when no pair overlaps enough.
    pub recall: f64,
    pub hypothesized: usize,
    pub correct_hypothesized: usize,
    pub overlapping_pairs: usize,
    pub recovered_overlapping: usize,
    pub precision_undefined: bool,
}

pub fn precision_recall(records: &[PairRecord], params: &Hyperparameters, s_max_sweep: &[usize]) -> Vec<PrRow> {
    let overlapping = records.iter().filter(|r| r.iou > params.theta_overlap).count();
    s_max_sweep
        .iter()
        .map(|&s| {
            let hyp: Vec<&PairRecord> = records.iter().filter(|r| r.hypothesized(s)).collect();
            let correct = hyp.iter().filter(|r| r.correct).count();
            let recovered = hyp.iter().filter(|r| r.correct && r.iou > params.theta_overlap).count();
            PrRow {
                s_max: s,
                precision: if hyp.is_empty() { 1.0 } else { correct as f64 / hyp.len() as f64 },
                recall: if overlapping == 0 { 0.0 } else { recovered as f64 / overlapping as f64 },
                hypothesized: hyp.len(),
                correct_hypothesized: correct,
                overlapping_pairs: overlapping,
                recovered_overlapping: recovered,
                precision_undefined: hyp.is_empty(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub mean_s: f64,
    pub std_s: f64,
    pub samples: usize,
}

/// Mean and sample standard deviation of a set of durations.
pub fn runtime_stats(durations: &[Duration]) -> Timing {
    let n = durations.len();
    if n == 0 {
        return Timing {
            mean_s: 0.0,
            std_s: 0.0,
            samples: 0,
        };
    }
    let secs: Vec<f64> = durations.iter().map(Duration::as_secs_f64).collect();
    let mean = secs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        secs.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Timing {
        mean_s: mean,
        std_s: var.sqrt(),
        samples: n,
    }
}

/// Times single submap-pair correspondence searches (affinity, clique and
/// alignment only), `repeats` times for every distinct pair of the two maps.
pub fn timing(map_a: &ObjectMap, map_b: &ObjectMap, params: &Hyperparameters, repeats: usize) -> Result<Timing> {
    if repeats < 3 {
        return Err(Error::invalid("repeats", format!("must be at least 3, got {repeats}")));
    }
    let unique = |m: &ObjectMap| {
        let mut subs = generate_submaps(&mahalanobis_filter(m, params.omega_percentile).map, params);
        let mut seen = HashSet::new();
        subs.retain(|s| seen.insert(s.landmark_ids.clone()));
        subs
    };
    let (sa, sb) = (unique(map_a), unique(map_b));
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::Degenerate("maps produce no submaps to compare".into()));
    }
    let mut samples = Vec::with_capacity(sa.len() * sb.len() * repeats);
    for a in &sa {
        for b in &sb {
            for _ in 0..repeats {
                samples.push(compare_submaps(a, b, params)?.elapsed);
            }
        }
    }
    Ok(runtime_stats(&samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sub(points: Vec<Vector3<f64>>) -> Submap {
        Submap {
            id: 0,
            center: Default::default(),
            landmark_ids: (0..points.len() as u64).collect(),
            points,
        }
    }

    fn cell(x: i32, y: i32, z: i32) -> Vector3<f64> {
        Vector3::new(x as f64 + 0.25, y as f64 + 0.5, z as f64 + 0.75)
    }

    #[test]
    fn iou_examples() {
        let a = sub(vec![cell(0, 0, 0), cell(1, 0, 0), cell(2, 3, 1)]);
        assert_eq!(submap_iou(&a, &a, 1.0), 1.0);
        let far = sub(vec![cell(100, 0, 0), cell(101, 0, 0)]);
        assert_eq!(submap_iou(&a, &far, 1.0), 0.0);
        assert_eq!(submap_iou(&sub(vec![]), &sub(vec![]), 1.0), 0.0);

        // 8 occupied cells each, 4 shared: 4 / 12
        let a: Vec<_> = (0..8).map(|i| cell(i, 0, 0)).collect();
        let b: Vec<_> = (4..12).map(|i| cell(i, 0, 0)).collect();
        assert!((submap_iou(&sub(a), &sub(b), 1.0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn classify_examples() {
        let p = Hyperparameters::default();
        let truth = RigidTransform::from_euler_deg(0.0, 0.0, 70.0, Vector3::new(3.0, -1.0, 0.2));
        assert_eq!(classify(&truth, &truth, &p), Classification::Correct);
        let off = RigidTransform::from_euler_deg(0.0, 0.0, 0.0, Vector3::new(1.6, 0.0, 0.0)).compose(&truth);
        assert_eq!(classify(&off, &truth, &p), Classification::Incorrect);
        let near = RigidTransform::from_euler_deg(0.0, 0.0, 0.0, Vector3::new(1.4, 0.0, 0.0)).compose(&truth);
        assert_eq!(classify(&near, &truth, &p), Classification::Correct);
        let yawed = RigidTransform::from_euler_deg(0.0, 0.0, 31.0, Vector3::zeros()).compose(&truth);
        assert_eq!(classify(&yawed, &truth, &p), Classification::Incorrect);
        let rolled = RigidTransform::from_euler_deg(11.0, 0.0, 0.0, Vector3::zeros()).compose(&truth);
        assert_eq!(classify(&rolled, &truth, &p), Classification::Incorrect);
    }

    fn rec(iou: f64, card: usize, correct: bool) -> PairRecord {
        PairRecord {
            iou,
            cardinality: card,
            attitude_ok: true,
            correct,
        }
    }

    #[test]
    fn counting_example() {
        let p = Hyperparameters::default();
        let mut records = Vec::new();
        // 8 correct hypotheses on overlapping pairs, 2 wrong on non-overlapping,
        // 12 more overlapping pairs with nothing hypothesized
        records.extend((0..8).map(|_| rec(0.9, 10, true)));
        records.extend((0..2).map(|_| rec(0.1, 10, false)));
        records.extend((0..12).map(|_| rec(0.9, 2, false)));
        let rows = precision_recall(&records, &p, &[4]);
        assert_eq!(rows[0].hypothesized, 10);
        assert_eq!(rows[0].overlapping_pairs, 20);
        assert!((rows[0].precision - 0.8).abs() < 1e-15);
        assert!((rows[0].recall - 0.4).abs() < 1e-15);
    }

    #[test]
    fn perfect_run() {
        let p = Hyperparameters::default();
        let records: Vec<_> = (0..5).map(|_| rec(0.95, 9, true)).collect();
        let r = precision_recall(&records, &p, &[4])[0];
        assert_eq!((r.precision, r.recall), (1.0, 1.0));
    }

    #[test]
    fn undefined_precision_is_flagged() {
        let p = Hyperparameters::default();
        let r = precision_recall(&[rec(0.9, 3, true)], &p, &[4])[0];
        assert!(r.precision_undefined);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 0.0);
    }

    #[test]
    fn attitude_failures_are_not_hypothesized() {
        let r = PairRecord {
            iou: 0.9,
            cardinality: 20,
            attitude_ok: false,
            correct: false,
        };
        assert!(!r.hypothesized(4));
    }

    #[test]
    fn timing_requires_three_repeats() {
        let m = ObjectMap {
            agent_id: "a".into(),
            frame_label: "f".into(),
            landmarks: vec![],
        };
        assert!(matches!(timing(&m, &m, &Hyperparameters::default(), 2), Err(Error::InvalidField { .. })));
    }

    #[test]
    fn stats() {
        let t = runtime_stats(&[Duration::from_millis(1), Duration::from_millis(3)]);
        assert!((t.mean_s - 0.002).abs() < 1e-12);
        assert!((t.std_s - 2f64.sqrt() * 1e-3).abs() < 1e-12);
        assert_eq!(t.samples, 2);
    }

    fn arb_records() -> impl Strategy<Value = Vec<PairRecord>> {
        prop::collection::vec(
            (0.0..1.0f64, 0usize..20, any::<bool>(), any::<bool>()).prop_map(|(iou, c, a, k)| PairRecord {
                iou,
                cardinality: c,
                attitude_ok: a,
                correct: k,
            }),
            0..60,
        )
    }

    proptest! {
        #[test]
        fn sweep_is_monotone(records in arb_records()) {
            let rows = precision_recall(&records, &Hyperparameters::default(), &(0..20).collect::<Vec<_>>());
            for w in rows.windows(2) {
                prop_assert!(w[1].recall <= w[0].recall);
                prop_assert!(w[1].hypothesized <= w[0].hypothesized);
            }
        }

        #[test]
        fn iou_symmetric(a in prop::collection::vec(prop::array::uniform3(-3.0..3.0f64), 0..20),
                         b in prop::collection::vec(prop::array::uniform3(-3.0..3.0f64), 0..20)) {
            let a: Vec<_> = a.into_iter().map(Vector3::from).collect();
            let b: Vec<_> = b.into_iter().map(Vector3::from).collect();
            let x = point_iou(&a, &b, 0.5);
            prop_assert_eq!(x, point_iou(&b, &a, 0.5));
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(x == 1.0, !a.is_empty() && voxels(&a, 0.5) == voxels(&b, 0.5));
        }

        #[test]
        fn truth_classifies_itself(r in -30.0..30.0f64, p in -30.0..30.0f64, y in -180.0..180.0f64,
                                   t in prop::array::uniform3(-100.0..100.0f64)) {
            let truth = RigidTransform::from_euler_deg(r, p, y, Vector3::from(t));
            prop_assert_eq!(classify(&truth, &truth, &Hyperparameters::default()), Classification::Correct);
        }
    }
}
