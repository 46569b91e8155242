//! Inlier filtering and geometric submap generation.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::model::{Hyperparameters, ObjectMap};

#[derive(Debug, Clone, PartialEq)]
pub struct Submap {
    /// Row-major index of the grid cell this submap was built around.
    pub id: usize,
    /// Grid-cell center in the x-y ground plane, m.
    pub center: Vector2<f64>,
    pub landmark_ids: Vec<u64>,
    /// `points[k]` is the position of `landmark_ids[k]`.
    pub points: Vec<Vector3<f64>>,
}

impl Submap {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Outcome of [`mahalanobis_filter`].
#[derive(Debug, Clone, PartialEq)]
pub struct InlierFilter {
    pub map: ObjectMap,
    /// Distances of every input landmark, in input order.
    pub distances: Vec<f64>,
    pub threshold: f64,
    /// The landmark covariance was singular and Euclidean distances were used.
    pub singular_fallback: bool,
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Keeps landmarks whose Mahalanobis distance to the landmark distribution is
/// at most the `omega_percentile`-th percentile of all such distances.
///
/// Maps with fewer than two landmarks are returned unchanged.
pub fn mahalanobis_filter(map: &ObjectMap, omega_percentile: f64) -> InlierFilter {
    let n = map.landmarks.len();
    if n < 2 {
        return InlierFilter {
            map: map.clone(),
            distances: vec![0.0; n],
            threshold: 0.0,
            singular_fallback: false,
        };
    }
    let mean = map.landmarks.iter().map(|l| l.position).sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    for l in &map.landmarks {
        let d = l.position - mean;
        cov += d * d.transpose();
    }
    cov /= (n - 1) as f64;

    let scale = cov.trace().max(f64::MIN_POSITIVE);
    let eig = cov.symmetric_eigen();
    let singular = eig.eigenvalues.min() <= 1e-12 * scale;
    let metric = if singular {
        log::warn!(
            "landmark covariance of `{}` is singular; falling back to Euclidean distance",
            map.agent_id
        );
        Matrix3::identity()
    } else {
        let inv = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
        eig.eigenvectors * inv * eig.eigenvectors.transpose()
    };

    let distances: Vec<f64> = map
        .landmarks
        .iter()
        .map(|l| {
            let d = l.position - mean;
            (d.transpose() * metric * d)[(0, 0)].max(0.0).sqrt()
        })
        .collect();
    let threshold = percentile(&distances, omega_percentile);
    let filtered = map.filtered(|i, _| distances[i] <= threshold);
    InlierFilter {
        map: filtered,
        distances,
        threshold,
        singular_fallback: singular,
    }
}

/// Number of grid centers along an axis of the given extent.
pub fn grid_count(extent: f64, step: f64) -> usize {
    (extent / step + 1e-9).floor() as usize + 1
}

/// Tiles the x-y bounding box with centers `overlap` apart and assigns each
/// center its `n_max` nearest landmarks (3D distance to the center lifted to
/// the mean landmark height, ties by landmark id). Submaps with at most
/// `s_max` landmarks cannot produce a match and are dropped.
pub fn generate_submaps(map: &ObjectMap, params: &Hyperparameters) -> Vec<Submap> {
    if map.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..map.landmarks.len()).collect();
    order.sort_by_key(|&i| map.landmarks[i].landmark_id);
    let pts: Vec<Vector3<f64>> = order.iter().map(|&i| map.landmarks[i].position).collect();
    let ids: Vec<u64> = order.iter().map(|&i| map.landmarks[i].landmark_id).collect();

    let (mut min, mut max) = (pts[0].xy(), pts[0].xy());
    for p in &pts {
        min = min.inf(&p.xy());
        max = max.sup(&p.xy());
    }
    let height = pts.iter().map(|p| p.z).sum::<f64>() / pts.len() as f64;
    let nx = grid_count(max.x - min.x, params.overlap);
    let ny = grid_count(max.y - min.y, params.overlap);

    let mut out = Vec::new();
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(pts.len());
    for iy in 0..ny {
        for ix in 0..nx {
            let center = Vector2::new(min.x + ix as f64 * params.overlap, min.y + iy as f64 * params.overlap);
            let c3 = Vector3::new(center.x, center.y, height);
            dist.clear();
            dist.extend(pts.iter().enumerate().map(|(k, p)| ((p - c3).norm(), k)));
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            dist.truncate(params.n_max);
            if dist.len() <= params.s_max {
                continue;
            }
            let mut members: Vec<usize> = dist.iter().map(|&(_, k)| k).collect();
            members.sort_unstable();
            out.push(Submap {
                id: iy * nx + ix,
                center,
                landmark_ids: members.iter().map(|&k| ids[k]).collect(),
                points: members.iter().map(|&k| pts[k]).collect(),
            });
        }
    }
    out
}
