//! Consistency graph construction and densest consistent clique search.
//!
//! Every candidate association (one point of submap A paired with one point
//! of submap B) is a vertex. Two associations are joined by an edge weighted
//! with [`consistency_score`] of the difference between their intra-map
//! distances. The inlier set is the binary selection `u` maximizing
//! `uᵀAu / uᵀu` with no zero-affinity pair selected together.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Hyperparameters;
use crate::submap::Submap;

/// Candidate pairing of point `index_a` of submap A with point `index_b` of submap B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Association {
    pub index_a: usize,
    pub index_b: usize,
}

/// Pairwise consistency weight of a distance difference `x`.
pub fn consistency_score(x: f64, sigma: f64, epsilon: f64) -> f64 {
    if x.abs() <= epsilon {
        (-0.5 * x * x / (sigma * sigma)).exp()
    } else {
        0.0
    }
}

/// Symmetric affinity matrix with unit diagonal, stored sparsely: only the
/// strictly positive off-diagonal entries are kept (sorted per row).
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl AffinityMatrix {
    fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for mut row in rows {
            row.sort_unstable_by_key(|e| e.0);
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self { n, row_ptr, cols, vals }
    }

    /// Builds from a dense square matrix. The diagonal is ignored (it is 1 by
    /// definition); off-diagonal entries must be symmetric and in `[0, 1]`.
    pub fn from_dense(dense: &[Vec<f64>]) -> Result<Self> {
        let n = dense.len();
        let mut rows = vec![Vec::new(); n];
        for (i, row) in dense.iter().enumerate() {
            if row.len() != n {
                return Err(Error::invalid("affinity", format!("row {i} has {} entries, expected {n}", row.len())));
            }
            for (j, &v) in row.iter().enumerate() {
                if i == j {
                    continue;
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid("affinity", format!("entry ({i},{j}) = {v} outside [0,1]")));
                }
                if v != dense[j][i] {
                    return Err(Error::invalid("affinity", format!("entry ({i},{j}) is not symmetric")));
                }
                if v > 0.0 {
                    rows[i].push((j, v));
                }
            }
        }
        Ok(Self::from_rows(rows))
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn nnz_off_diagonal(&self) -> usize {
        self.cols.len()
    }

    /// Positive off-diagonal entries of row `i` as `(column, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0;
        }
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(k) => self.vals[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            row[i] = 1.0;
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }

    /// Principal submatrix on the sorted index set `keep`.
    fn restrict(&self, keep: &[usize]) -> AffinityMatrix {
        let mut local = vec![usize::MAX; self.n];
        for (k, &i) in keep.iter().enumerate() {
            local[i] = k;
        }
        let rows = keep
            .iter()
            .map(|&i| {
                self.row(i)
                    .filter(|(j, _)| local[*j] != usize::MAX)
                    .map(|(j, v)| (local[j], v))
                    .collect()
            })
            .collect();
        Self::from_rows(rows)
    }

    /// `A u` including the unit diagonal.
    fn mul(&self, u: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            out[i] = u[i] + self.row(i).map(|(j, v)| v * u[j]).sum::<f64>();
        }
    }

    /// `A u - d N u`, where `N` marks the off-diagonal zero entries.
    fn mul_penalized(&self, u: &[f64], d: f64, out: &mut [f64]) {
        let total: f64 = u.iter().sum();
        for i in 0..self.n {
            let mut weighted = 0.0;
            let mut linked = 0.0;
            for (j, v) in self.row(i) {
                weighted += v * u[j];
                linked += u[j];
            }
            let non_edges = total - u[i] - linked;
            out[i] = u[i] + weighted - d * non_edges;
        }
    }

    /// `uᵀAu / uᵀu` of the binary selection `members`.
    pub fn density(&self, members: &[usize]) -> f64 {
        if members.is_empty() {
            return 0.0;
        }
        let mut inside = vec![false; self.n];
        for &m in members {
            inside[m] = true;
        }
        let mut num = members.len() as f64;
        for &m in members {
            num += self.row(m).filter(|(j, _)| inside[*j]).map(|(_, v)| v).sum::<f64>();
        }
        num / members.len() as f64
    }

    /// True when every pair of `members` has strictly positive affinity.
    pub fn is_feasible(&self, members: &[usize]) -> bool {
        members
            .iter()
            .enumerate()
            .all(|(k, &p)| members[k + 1..].iter().all(|&q| self.get(p, q) > 0.0))
    }
}

/// Builds the all-to-all candidate set between two submaps and its affinity.
///
/// Two associations get zero affinity when they share an endpoint or when
/// either map's pair of points is closer than `gamma` (duplicate objects).
pub fn build_affinity(
    submap_a: &Submap,
    submap_b: &Submap,
    params: &Hyperparameters,
) -> Result<(Vec<Association>, AffinityMatrix)> {
    build_affinity_points(&submap_a.points, &submap_b.points, params)
}

pub fn build_affinity_points(
    points_a: &[Vector3<f64>],
    points_b: &[Vector3<f64>],
    params: &Hyperparameters,
) -> Result<(Vec<Association>, AffinityMatrix)> {
    let (na, nb) = (points_a.len(), points_b.len());
    let n = na * nb;
    if n > params.max_candidates {
        return Err(Error::SizeLimit {
            candidates: n,
            cap: params.max_candidates,
        });
    }
    let assoc: Vec<Association> = (0..na)
        .flat_map(|i| (0..nb).map(move |k| Association { index_a: i, index_b: k }))
        .collect();

    let pairwise = |pts: &[Vector3<f64>]| -> Vec<Vec<f64>> {
        pts.iter().map(|p| pts.iter().map(|q| (p - q).norm()).collect()).collect()
    };
    let da = pairwise(points_a);
    let db = pairwise(points_b);
    // per B point, its distances to the other B points in ascending order
    let sorted_b: Vec<Vec<(f64, usize)>> = db
        .iter()
        .map(|row| {
            let mut v: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
            v.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            v
        })
        .collect();

    let (sigma, eps, gamma) = (params.sigma, params.epsilon, params.gamma);
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|p| {
            let (i, k) = (p / nb, p % nb);
            let mut row = Vec::new();
            for j in 0..na {
                let d_a = da[i][j];
                if j == i || d_a < gamma {
                    continue;
                }
                let sb = &sorted_b[k];
                let start = sb.partition_point(|e| e.0 < d_a - eps);
                for &(d_b, l) in &sb[start..] {
                    if d_b > d_a + eps {
                        break;
                    }
                    if l == k || d_b < gamma {
                        continue;
                    }
                    let s = consistency_score(d_a - d_b, sigma, eps);
                    if s > 0.0 {
                        row.push((j * nb + l, s));
                    }
                }
            }
            row
        })
        .collect();
    Ok((assoc, AffinityMatrix::from_rows(rows)))
}

/// Selected association indices and their density.
#[derive(Debug, Clone, PartialEq)]
pub struct CliqueSolution {
    /// Sorted ascending.
    pub members: Vec<usize>,
    pub density: f64,
}

const POWER_ITERATIONS: usize = 100;
const PENALTY_START: f64 = 1e-2;
const PENALTY_GROWTH: f64 = 1.4;
const PENALTY_MAX: f64 = 1e5;
const ASCENT_ITERATIONS: usize = 400;
const ASCENT_TOL: f64 = 1e-8;
const SUPPORT_TOL: f64 = 1e-6;
const STALL_ROUNDS: usize = 5;
const RESTARTS: usize = 16;
const SMALL_PROBLEM: usize = 64;
const TINY_PROBLEM: usize = 24;

fn normalize(u: &mut [f64]) -> f64 {
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        u.iter_mut().for_each(|v| *v /= norm);
    }
    norm
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected gradient ascent of `uᵀ M_d u` on the nonnegative unit sphere.
fn ascend(a: &AffinityMatrix, d: f64, u: &mut Vec<f64>, step: &mut f64) {
    let n = u.len();
    let mut grad = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];
    a.mul_penalized(u, d, &mut grad);
    let mut f = dot(u, &grad);
    for _ in 0..ASCENT_ITERATIONS {
        let mut alpha = (*step * 2.0).min(1e3);
        let mut accepted = false;
        let mut gain = 0.0;
        for _ in 0..40 {
            for i in 0..n {
                trial[i] = (u[i] + alpha * grad[i]).max(0.0);
            }
            if normalize(&mut trial) == 0.0 {
                alpha *= 0.5;
                continue;
            }
            a.mul_penalized(&trial, d, &mut trial_grad);
            let ft = dot(&trial, &trial_grad);
            if ft >= f {
                accepted = true;
                gain = ft - f;
                f = ft;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        *step = alpha;
        let moved = u.iter().zip(&trial).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        std::mem::swap(u, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        if moved < ASCENT_TOL || gain <= ASCENT_TOL * f.abs().max(1.0) {
            break;
        }
    }
}

fn support(u: &[f64]) -> Vec<usize> {
    let umax = u.iter().copied().fold(0.0, f64::max);
    (0..u.len()).filter(|&i| u[i] > SUPPORT_TOL * umax).collect()
}

fn is_feasible_support(a: &AffinityMatrix, support: &[usize]) -> bool {
    let mut linked = vec![usize::MAX; a.size()];
    for &p in support {
        for (q, _) in a.row(p) {
            linked[q] = p;
        }
        if support.iter().any(|&q| q != p && linked[q] != p) {
            return false;
        }
    }
    true
}

/// Incremental bookkeeping for single-vertex moves on a feasible set.
struct LocalSearch<'a> {
    a: &'a AffinityMatrix,
    inside: Vec<bool>,
    members: usize,
    /// Sum of affinities to the current members, excluding self.
    weight: Vec<f64>,
    /// Number of current members with zero affinity, excluding self.
    conflicts: Vec<usize>,
    numerator: f64,
}

impl<'a> LocalSearch<'a> {
    fn new(a: &'a AffinityMatrix) -> Self {
        let n = a.size();
        Self {
            a,
            inside: vec![false; n],
            members: 0,
            weight: vec![0.0; n],
            conflicts: vec![0; n],
            numerator: 0.0,
        }
    }

    fn density(&self) -> f64 {
        if self.members == 0 {
            0.0
        } else {
            self.numerator / self.members as f64
        }
    }

    fn toggle(&mut self, p: usize, add: bool) {
        let sign = if add { 1.0 } else { -1.0 };
        self.numerator += sign * (1.0 + 2.0 * self.weight[p]);
        self.inside[p] = add;
        if add {
            self.members += 1;
        } else {
            self.members -= 1;
        }
        let mut linked = vec![false; self.a.size()];
        linked[p] = true;
        for (q, v) in self.a.row(p) {
            linked[q] = true;
            self.weight[q] += sign * v;
        }
        for (q, &l) in linked.iter().enumerate() {
            if !l {
                if add {
                    self.conflicts[q] += 1;
                } else {
                    self.conflicts[q] -= 1;
                }
            }
        }
    }

    /// Adds the feasible vertex with the largest affinity to the current set
    /// while doing so does not lower the density.
    fn grow(&mut self) {
        loop {
            let dens = self.density();
            let k = self.members as f64;
            let pick = (0..self.a.size())
                .filter(|&q| !self.inside[q] && self.conflicts[q] == 0)
                .map(|q| (q, (self.numerator + 1.0 + 2.0 * self.weight[q]) / (k + 1.0)))
                .filter(|(_, nd)| *nd >= dens - 1e-12 * dens.max(1.0))
                .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)));
            match pick {
                Some((q, _)) => self.toggle(q, true),
                None => break,
            }
        }
    }

    /// Applies best-improvement add / remove / swap moves until none helps.
    /// Equal-density moves that grow the set are taken as well.
    fn polish(&mut self) {
        let n = self.a.size();
        for _ in 0..10 * n.max(1) {
            let k = self.members as f64;
            let dens = self.density();
            let tol = 1e-12 * dens.max(1.0);
            let mut best: Option<(f64, usize, Option<usize>, Option<usize>)> = None;
            let mut consider = |gain: f64, size_gain: usize, add: Option<usize>, rem: Option<usize>| {
                let key = (gain, size_gain);
                let better = match &best {
                    None => true,
                    Some((g, s, _, _)) => key.0 > *g + tol || ((key.0 - *g).abs() <= tol && key.1 > *s),
                };
                let admissible = gain > tol || (gain >= -tol && size_gain == 2);
                if admissible && better {
                    best = Some((gain, size_gain, add, rem));
                }
            };
            for q in 0..n {
                if self.inside[q] {
                    if self.members > 1 {
                        let nd = (self.numerator - 1.0 - 2.0 * self.weight[q]) / (k - 1.0);
                        consider(nd - dens, 0, None, Some(q));
                    }
                } else if self.conflicts[q] == 0 {
                    let nd = (self.numerator + 1.0 + 2.0 * self.weight[q]) / (k + 1.0);
                    consider(nd - dens, 2, Some(q), None);
                }
            }
            let current = self.members();
            for q in 0..n {
                if self.inside[q] || self.conflicts[q] > 1 {
                    continue;
                }
                for &r in &current {
                    let a_qr = self.a.get(q, r);
                    if self.conflicts[q] == 1 && a_qr > 0.0 {
                        continue;
                    }
                    let nd = (self.numerator - 2.0 * self.weight[r] + 2.0 * (self.weight[q] - a_qr)) / k;
                    consider(nd - dens, 1, Some(q), Some(r));
                }
            }
            let Some((_, _, add, rem)) = best else { break };
            if let Some(r) = rem {
                self.toggle(r, false);
            }
            if let Some(q) = add {
                self.toggle(q, true);
            }
        }
    }

    fn members(&self) -> Vec<usize> {
        (0..self.a.size()).filter(|&i| self.inside[i]).collect()
    }
}

/// Relaxation-ascent solver for the densest consistent clique.
///
/// 1. Initialize `u` with 100 power iterations on `A` from the uniform vector.
/// 2. Run projected gradient ascent on `uᵀ(A − dN)u` over the nonnegative unit
///    sphere, growing the penalty `d` on zero-affinity pairs geometrically
///    (×1.4) until the support of `u` is a feasible set or stops changing.
/// 3. Round by admitting associations in decreasing `u` order while the set
///    stays feasible, then polish with single add/remove/swap moves to a
///    local maximum of the density.
/// 4. Restart from greedy cliques grown around the highest-weight vertices
///    (every vertex on small problems, every edge on tiny ones), polish each,
///    and keep the densest.
///
/// Deterministic: no randomness is involved.
pub fn solve_clique(a: &AffinityMatrix) -> CliqueSolution {
    let n = a.size();
    if n == 0 {
        return CliqueSolution {
            members: Vec::new(),
            density: 0.0,
        };
    }
    let mut u = vec![1.0 / (n as f64).sqrt(); n];
    let mut tmp = vec![0.0; n];
    for _ in 0..POWER_ITERATIONS {
        a.mul(&u, &mut tmp);
        normalize(&mut tmp);
        std::mem::swap(&mut u, &mut tmp);
    }

    // Work on a shrinking principal submatrix: coordinates that are zero with
    // a non-positive penalized gradient are dropped, since the penalty only grows.
    let mut active: Vec<usize> = (0..n).collect();
    let mut sub = a.clone();
    let mut v = u.clone();
    let mut grad = vec![0.0; n];
    let mut d = 0.0;
    let mut step = 1.0;
    let mut last_support = Vec::new();
    let mut stale = 0;
    loop {
        ascend(&sub, d, &mut v, &mut step);
        let support: Vec<usize> = support(&v).into_iter().map(|k| active[k]).collect();
        if is_feasible_support(a, &support) || d > PENALTY_MAX {
            break;
        }
        // a symmetric conflicting pair is a saddle the penalty cannot break;
        // rounding resolves it
        if support == last_support {
            stale += 1;
            if stale >= STALL_ROUNDS {
                break;
            }
        } else {
            stale = 0;
            last_support = support;
        }
        d = if d == 0.0 { PENALTY_START } else { d * PENALTY_GROWTH };
        grad.resize(v.len(), 0.0);
        sub.mul_penalized(&v, d, &mut grad);
        let keep: Vec<usize> = (0..v.len()).filter(|&k| v[k] > 0.0 || grad[k] > 0.0).collect();
        if keep.len() < v.len() * 3 / 4 {
            sub = sub.restrict(&keep);
            active = keep.iter().map(|&k| active[k]).collect();
            v = keep.iter().map(|&k| v[k]).collect();
        }
    }
    u.iter_mut().for_each(|x| *x = 0.0);
    for (k, &i) in active.iter().enumerate() {
        u[i] = v[k];
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| u[y].total_cmp(&u[x]).then(x.cmp(&y)));
    let mut search = LocalSearch::new(a);
    for &p in order.iter().take_while(|&&p| u[p] > 0.0) {
        if search.conflicts[p] == 0 {
            search.toggle(p, true);
        }
    }
    if search.members == 0 {
        search.toggle(order[0], true);
    }
    search.polish();
    let mut best = (search.density(), search.members());

    // restarts: greedy cliques grown from the highest-weight vertices
    let starts = if n <= SMALL_PROBLEM { n } else { RESTARTS };
    let mut seeds: Vec<Vec<usize>> = order.iter().take(starts).map(|&p| vec![p]).collect();
    if n <= TINY_PROBLEM {
        for p in 0..n {
            seeds.extend(a.row(p).filter(|(q, _)| *q > p).map(|(q, _)| vec![p, q]));
        }
    }
    for seed in seeds {
        let mut search = LocalSearch::new(a);
        for p in seed {
            search.toggle(p, true);
        }
        search.grow();
        search.polish();
        let dens = search.density();
        let tol = 1e-12 * best.0.max(1.0);
        if dens > best.0 + tol || (dens >= best.0 - tol && search.members > best.1.len()) {
            best = (dens, search.members());
        }
    }
    let members = best.1;
    CliqueSolution {
        density: a.density(&members),
        members,
    }
}

/// Inlier association set `S` of the densest consistent clique.
pub fn densest_clique(affinity: &AffinityMatrix, assoc: &[Association]) -> Vec<Association> {
    solve_clique(affinity).members.into_iter().map(|i| assoc[i]).collect()
}

pub const EXACT_MAX: usize = 20;

/// Exhaustive search over feasible subsets (test oracle).
///
/// Ties in density are broken by larger cardinality, then by the
/// lexicographically smallest sorted index list.
pub fn solve_clique_exact(a: &AffinityMatrix) -> Result<CliqueSolution> {
    let n = a.size();
    if n > EXACT_MAX {
        return Err(Error::TooLarge { n, max: EXACT_MAX });
    }
    let dense = a.to_dense();
    let mut best = CliqueSolution {
        members: Vec::new(),
        density: 0.0,
    };
    // enumerate cliques of the positive-affinity graph by backtracking in
    // increasing index order, so sets are visited in lexicographic order
    fn visit(
        dense: &[Vec<f64>],
        start: usize,
        current: &mut Vec<usize>,
        numerator: f64,
        best: &mut CliqueSolution,
    ) {
        for q in start..dense.len() {
            if current.iter().any(|&p| dense[p][q] <= 0.0) {
                continue;
            }
            let added = 1.0 + 2.0 * current.iter().map(|&p| dense[p][q]).sum::<f64>();
            current.push(q);
            let num = numerator + added;
            let dens = num / current.len() as f64;
            let tol = 1e-12 * dens.max(1.0);
            if dens > best.density + tol || ((dens - best.density).abs() <= tol && current.len() > best.members.len()) {
                best.members = current.clone();
                best.density = dens;
            }
            visit(dense, q + 1, current, num, best);
            current.pop();
        }
    }
    visit(&dense, 0, &mut Vec::new(), 0.0, &mut best);
    if !best.members.is_empty() {
        best.density = a.density(&best.members);
    }
    Ok(best)
}

pub fn densest_clique_exact(affinity: &AffinityMatrix, assoc: &[Association]) -> Result<Vec<Association>> {
    Ok(solve_clique_exact(affinity)?.members.into_iter().map(|i| assoc[i]).collect())
}
