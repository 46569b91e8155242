//! Frame alignment from inlier sets, feasibility pruning, and all-to-all
//! submap matching between two maps.
//!
//! Hypotheses map coordinates of map A's frame into map B's frame:
//! `x_b = R x_a + t`.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::association::{build_affinity, densest_clique, Association};
use crate::error::{Error, Result};
use crate::model::{transform_angles, Attitude, Hyperparameters, ObjectMap, RigidTransform};
use crate::submap::{generate_submaps, mahalanobis_filter, Submap};

/// Least-squares rigid transform taking `points_a` onto `points_b`
/// (closed form via SVD of the cross-covariance).
pub fn arun(points_a: &[Vector3<f64>], points_b: &[Vector3<f64>]) -> Result<RigidTransform> {
    if points_a.len() != points_b.len() {
        return Err(Error::invalid(
            "points_b",
            format!("length {} differs from points_a length {}", points_b.len(), points_a.len()),
        ));
    }
    if points_a.len() < 3 {
        return Err(Error::Degenerate(format!("{} correspondences, need at least 3", points_a.len())));
    }
    let n = points_a.len() as f64;
    let ca = points_a.iter().sum::<Vector3<f64>>() / n;
    let cb = points_b.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in points_a.iter().zip(points_b) {
        h += (a - ca) * (b - cb).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    if s[order[1]] < 1e-9 * s[order[0]] || s[order[0]] == 0.0 {
        return Err(Error::Degenerate("points are collinear".into()));
    }
    let v = v_t.transpose();
    let mut rotation = v * u.transpose();
    if rotation.determinant() < 0.0 {
        let mut flip = Matrix3::identity();
        flip[(order[2], order[2])] = -1.0;
        rotation = v * flip * u.transpose();
    }
    Ok(RigidTransform {
        rotation,
        translation: cb - rotation * ca,
    })
}

/// Sum of squared residuals `‖R a + t − b‖²`.
pub fn alignment_cost(t: &RigidTransform, points_a: &[Vector3<f64>], points_b: &[Vector3<f64>]) -> f64 {
    points_a.iter().zip(points_b).map(|(a, b)| (t.apply(a) - b).norm_squared()).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentHypothesis {
    pub transform: RigidTransform,
    pub inliers: Vec<Association>,
    pub cardinality: usize,
    pub source_submap: usize,
    pub target_submap: usize,
    pub attitude: Attitude,
}

impl AlignmentHypothesis {
    pub fn new(transform: RigidTransform, inliers: Vec<Association>, source_submap: usize, target_submap: usize) -> Self {
        Self {
            attitude: transform_angles(&transform),
            cardinality: inliers.len(),
            transform,
            inliers,
            source_submap,
            target_submap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RejectReason {
    /// |roll| or |pitch| above `theta_rp`.
    Attitude,
    /// |yaw| above `theta_yaw`; only with `prune_yaw`.
    Yaw,
    /// |S| ≤ `s_max`.
    Cardinality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Keep,
    Reject(RejectReason),
}

impl Verdict {
    pub fn is_keep(self) -> bool {
        self == Verdict::Keep
    }
}

/// True when roll and pitch are within `theta_rp`.
pub fn attitude_feasible(attitude: &Attitude, params: &Hyperparameters) -> bool {
    attitude.roll.abs() <= params.theta_rp && attitude.pitch.abs() <= params.theta_rp
}

pub fn prune(hypothesis: &AlignmentHypothesis, params: &Hyperparameters) -> Verdict {
    if !attitude_feasible(&hypothesis.attitude, params) {
        return Verdict::Reject(RejectReason::Attitude);
    }
    if params.prune_yaw && hypothesis.attitude.yaw.abs() > params.theta_yaw {
        return Verdict::Reject(RejectReason::Yaw);
    }
    if hypothesis.cardinality <= params.s_max {
        return Verdict::Reject(RejectReason::Cardinality);
    }
    Verdict::Keep
}

/// Result of one submap-pair correspondence search.
#[derive(Debug, Clone, PartialEq)]
pub struct PairOutcome {
    pub source_submap: usize,
    pub target_submap: usize,
    pub inliers: Vec<Association>,
    /// `None` when the inlier set cannot define a transform.
    pub hypothesis: Option<AlignmentHypothesis>,
    pub verdict: Option<Verdict>,
    /// Wall-clock time of affinity + clique + alignment.
    pub elapsed: Duration,
}

impl PairOutcome {
    pub fn cardinality(&self) -> usize {
        self.inliers.len()
    }

    pub fn kept(&self) -> bool {
        self.verdict.is_some_and(Verdict::is_keep)
    }
}

/// Correspondence search between two submaps: affinity, densest clique,
/// rigid alignment and pruning.
pub fn compare_submaps(a: &Submap, b: &Submap, params: &Hyperparameters) -> Result<PairOutcome> {
    let start = Instant::now();
    let (assoc, affinity) = build_affinity(a, b, params)?;
    let inliers = densest_clique(&affinity, &assoc);
    let pa: Vec<Vector3<f64>> = inliers.iter().map(|x| a.points[x.index_a]).collect();
    let pb: Vec<Vector3<f64>> = inliers.iter().map(|x| b.points[x.index_b]).collect();
    let transform = match arun(&pa, &pb) {
        Ok(t) => Some(t),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    let elapsed = start.elapsed();
    let hypothesis = transform.map(|t| AlignmentHypothesis::new(t, inliers.clone(), a.id, b.id));
    let verdict = hypothesis.as_ref().map(|h| prune(h, params));
    Ok(PairOutcome {
        source_submap: a.id,
        target_submap: b.id,
        inliers,
        hypothesis,
        verdict,
        elapsed,
    })
}

/// Everything produced while matching two maps.
#[derive(Debug, Clone)]
pub struct MatchRun {
    pub submaps_a: Vec<Submap>,
    pub submaps_b: Vec<Submap>,
    /// One entry per submap pair, ordered by (source, target).
    pub outcomes: Vec<PairOutcome>,
    /// Number of distinct submap pairs actually solved.
    pub unique_pairs: usize,
}

impl MatchRun {
    /// Kept hypotheses by cardinality descending, then (source, target).
    pub fn kept_hypotheses(&self) -> Vec<AlignmentHypothesis> {
        let mut kept: Vec<AlignmentHypothesis> = self
            .outcomes
            .iter()
            .filter(|o| o.kept())
            .filter_map(|o| o.hypothesis.clone())
            .collect();
        kept.sort_by(|x, y| {
            y.cardinality
                .cmp(&x.cardinality)
                .then(x.source_submap.cmp(&y.source_submap))
                .then(x.target_submap.cmp(&y.target_submap))
        });
        kept
    }
}

fn unique_groups(submaps: &[Submap]) -> (Vec<usize>, Vec<usize>) {
    let mut seen: HashMap<&[u64], usize> = HashMap::new();
    let mut reps = Vec::new();
    let group = submaps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            *seen.entry(s.landmark_ids.as_slice()).or_insert_with(|| {
                reps.push(i);
                reps.len() - 1
            })
        })
        .collect();
    (group, reps)
}

/// Filters both maps, builds their submaps and searches every submap pair.
///
/// Submaps with identical membership give identical problems, so each
/// distinct pair is solved once and its outcome reused.
pub fn match_maps(map_a: &ObjectMap, map_b: &ObjectMap, params: &Hyperparameters) -> Result<MatchRun> {
    let fa = mahalanobis_filter(map_a, params.omega_percentile);
    let fb = mahalanobis_filter(map_b, params.omega_percentile);
    let submaps_a = generate_submaps(&fa.map, params);
    let submaps_b = generate_submaps(&fb.map, params);
    let (group_a, reps_a) = unique_groups(&submaps_a);
    let (group_b, reps_b) = unique_groups(&submaps_b);

    let jobs: Vec<(usize, usize)> = (0..reps_a.len())
        .flat_map(|i| (0..reps_b.len()).map(move |j| (i, j)))
        .collect();
    let solved: Vec<PairOutcome> = jobs
        .par_iter()
        .map(|&(i, j)| compare_submaps(&submaps_a[reps_a[i]], &submaps_b[reps_b[j]], params))
        .collect::<Result<_>>()?;

    let mut outcomes = Vec::with_capacity(submaps_a.len() * submaps_b.len());
    for (ia, sa) in submaps_a.iter().enumerate() {
        for (ib, sb) in submaps_b.iter().enumerate() {
            let base = &solved[group_a[ia] * reps_b.len() + group_b[ib]];
            let mut o = base.clone();
            o.source_submap = sa.id;
            o.target_submap = sb.id;
            if let Some(h) = o.hypothesis.as_mut() {
                h.source_submap = sa.id;
                h.target_submap = sb.id;
            }
            outcomes.push(o);
        }
    }
    Ok(MatchRun {
        submaps_a,
        submaps_b,
        outcomes,
        unique_pairs: jobs.len(),
    })
}

/// All kept frame-alignment hypotheses between two maps, best first.
pub fn align_maps(map_a: &ObjectMap, map_b: &ObjectMap, params: &Hyperparameters) -> Result<Vec<AlignmentHypothesis>> {
    Ok(match_maps(map_a, map_b, params)?.kept_hypotheses())
}
