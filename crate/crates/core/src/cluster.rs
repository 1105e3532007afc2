//! Functional k-means on curves or their derivatives, alert-level labelling
//! and level/velocity/acceleration transition analysis.
//!
//! Curves are compared with a range-normalized L2 distance over the grid
//! points both curves observe, so a short curve is measured in the same
//! mean-square units as a long one. Assignment is to the nearest centroid
//! under that distance; centroids are pointwise means of their members.

use std::collections::{BTreeMap, BTreeSet};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::curve::FunctionalDataset;
use crate::error::{Error, Result};

/// Note attached to every clustering output describing the assignment rule.
pub const ASSIGNMENT_RULE: &str =
    "nearest centroid under range-normalized L2 distance (k-means++ seeding over sorted ids)";

/// `sqrt( ∫ (a − b)² dt / L )` by the trapezoid rule over the grid segments
/// where both curves are observed, `L` being the total length of those
/// segments.
pub fn functional_distance(a: &[f64], b: &[f64], grid: &[f64]) -> Result<f64> {
    if a.len() != grid.len() || b.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            got: a.len().min(b.len()),
        });
    }
    let mut integral = 0.0;
    let mut length = 0.0;
    for k in 1..grid.len() {
        let (a0, a1, b0, b1) = (a[k - 1], a[k], b[k - 1], b[k]);
        if a0.is_nan() || a1.is_nan() || b0.is_nan() || b1.is_nan() {
            continue;
        }
        let h = grid[k] - grid[k - 1];
        integral += 0.5 * h * ((a0 - b0).powi(2) + (a1 - b1).powi(2));
        length += h;
    }
    if length <= 0.0 {
        return Err(Error::IncomparableCurves(
            "fewer than two shared observed grid points".into(),
        ));
    }
    Ok((integral / length).sqrt())
}

/// Chance-corrected agreement between two partitions of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "partitions must cover the same items");
    let n = a.len();
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n as u64);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_rows * sum_cols / total;
    let max = 0.5 * (sum_rows + sum_cols);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// A fitted clustering of curves (or of their `ell`-th derivatives).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterModel {
    pub k: usize,
    pub ell: usize,
    pub grid: Vec<f64>,
    /// Curve ids in ascending order.
    pub ids: Vec<String>,
    /// Cluster index per entry of `ids`.
    pub assignments: Vec<usize>,
    /// Centroid grid values (`NaN` where no member is observed).
    pub centroids: Vec<Vec<f64>>,
    pub within_dispersion: f64,
    /// Within-cluster dispersion after every assignment step.
    pub dispersion_trace: Vec<f64>,
    pub iterations: usize,
    /// Alert rank of each cluster (0 = lowest).
    pub alert_ranks: Vec<usize>,
}

impl ClusterModel {
    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        self.ids
            .binary_search_by(|probe| probe.as_str().cmp(id))
            .ok()
            .map(|i| self.assignments[i])
    }

    pub fn alert_rank(&self, cluster: usize) -> usize {
        self.alert_ranks[cluster]
    }

    pub fn alert_label(&self, cluster: usize) -> &'static str {
        alert_name(self.alert_ranks[cluster], self.k)
    }

    pub fn label_of(&self, id: &str) -> Option<&'static str> {
        self.cluster_of(id).map(|c| self.alert_label(c))
    }

    pub fn members(&self, cluster: usize) -> Vec<&str> {
        self.ids
            .iter()
            .zip(&self.assignments)
            .filter(|(_, &a)| a == cluster)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Name of alert rank `rank` among `k` levels.
pub fn alert_name(rank: usize, k: usize) -> &'static str {
    const MIDDLE: [&str; 6] = [
        "moderate-1",
        "moderate-2",
        "moderate-3",
        "moderate-4",
        "moderate-5",
        "moderate-6",
    ];
    if rank == 0 {
        "low"
    } else if rank + 1 == k {
        "high"
    } else if k == 3 {
        "moderate"
    } else {
        MIDDLE.get(rank - 1).copied().unwrap_or("moderate-n")
    }
}

/// Settings for [`kmeans_functional`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub ell: usize,
    pub seed: u64,
    pub max_iter: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, ell: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            ell,
            seed,
            max_iter: 100,
        }
    }
}

fn nearest(row: &[f64], centroids: &[Vec<f64>], grid: &[f64]) -> Result<(usize, f64)> {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = functional_distance(row, centroid, grid)?;
        if d < best.1 {
            best = (c, d);
        }
    }
    Ok(best)
}

fn pointwise_centroid(rows: &[Vec<f64>], members: &[usize], g: usize) -> Vec<f64> {
    let mut sum = vec![0.0; g];
    let mut count = vec![0usize; g];
    for &i in members {
        for (j, &v) in rows[i].iter().enumerate() {
            if !v.is_nan() {
                sum[j] += v;
                count[j] += 1;
            }
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect()
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance from the nearest chosen center.
fn seed_centroids(rows: &[Vec<f64>], k: usize, grid: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let n = rows.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = rows
        .par_iter()
        .map(|r| functional_distance(r, &rows[chosen[0]], grid).map(|d| d * d))
        .collect::<Result<_>>()?;
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc >= target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        let fresh: Vec<f64> = rows
            .par_iter()
            .map(|r| functional_distance(r, &rows[next], grid).map(|d| d * d))
            .collect::<Result<_>>()?;
        for (d, f) in d2.iter_mut().zip(fresh) {
            *d = d.min(f);
        }
    }
    Ok(chosen.into_iter().map(|i| rows[i].clone()).collect())
}

/// Lloyd iterations on the `ell`-th derivative grid values of `ds`.
///
/// Deterministic for a given `(ds, config)`: curves are processed in
/// ascending id order, so the input order of `ds` does not matter. An empty
/// cluster is re-seeded at the curve farthest from its own centroid.
pub fn kmeans_functional(ds: &FunctionalDataset, config: &KMeansConfig) -> Result<ClusterModel> {
    let n = ds.len();
    let k = config.k;
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!(
            "cannot form {k} clusters from {n} curves"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ds.curves[a].id.cmp(&ds.curves[b].id));
    let ids: Vec<String> = order.iter().map(|&i| ds.curves[i].id.clone()).collect();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidConfig("duplicate curve ids".into()));
    }
    let values = ds.grid_values(config.ell)?;
    let rows: Vec<Vec<f64>> = order.iter().map(|&i| values[i].clone()).collect();
    let grid = &ds.grid;
    let g = grid.len();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = seed_centroids(&rows, k, grid, &mut rng)?;
    let mut assignments: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut iterations = 0;

    loop {
        let nearest_all: Vec<(usize, f64)> = rows
            .par_iter()
            .map(|r| nearest(r, &centroids, grid))
            .collect::<Result<_>>()?;
        let new_assign: Vec<usize> = nearest_all.iter().map(|a| a.0).collect();
        let dispersion: f64 = nearest_all.iter().map(|a| a.1 * a.1).sum();
        iterations += 1;
        let converged = new_assign == assignments;
        assignments = new_assign;
        trace.push(dispersion);
        if converged || iterations >= config.max_iter {
            break;
        }

        let mut members = vec![Vec::new(); k];
        for (i, &a) in assignments.iter().enumerate() {
            members[a].push(i);
        }
        let mut updated: Vec<Vec<f64>> = members
            .par_iter()
            .map(|m| pointwise_centroid(&rows, m, g))
            .collect();
        for c in 0..k {
            if !members[c].is_empty() {
                continue;
            }
            // farthest curve from its own centroid, among clusters that can spare one
            let mut far = None;
            let mut far_d = -1.0;
            for (i, &(a, d)) in nearest_all.iter().enumerate() {
                if members[a].len() > 1 && d > far_d {
                    far = Some(i);
                    far_d = d;
                }
            }
            if let Some(i) = far {
                updated[c] = rows[i].clone();
                let a = assignments[i];
                members[a].retain(|&m| m != i);
                members[c].push(i);
                updated[a] = pointwise_centroid(&rows, &members[a], g);
            }
        }

        // the pointwise mean is the exact minimizer only when members share
        // an observed range; keep the old centroids if it would not improve
        let check: f64 = rows
            .par_iter()
            .zip(assignments.par_iter())
            .map(|(r, &a)| functional_distance(r, &updated[a], grid).map(|d| d * d))
            .collect::<Result<Vec<f64>>>()?
            .iter()
            .sum();
        if check > dispersion * (1.0 + 1e-12) {
            break;
        }
        centroids = updated;
    }

    let within_dispersion = *trace.last().unwrap();
    Ok(ClusterModel {
        k,
        ell: config.ell,
        grid: grid.clone(),
        ids,
        assignments,
        centroids,
        within_dispersion,
        dispersion_trace: trace,
        iterations,
        alert_ranks: (0..k).collect(),
    })
}

fn terminal_value(centroid: &[f64]) -> f64 {
    centroid.iter().rev().copied().find(|v| !v.is_nan()).unwrap_or(f64::NAN)
}

fn centroid_mean(centroid: &[f64]) -> f64 {
    let (s, c) = centroid
        .iter()
        .filter(|v| !v.is_nan())
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

/// Orders clusters by the terminal value of their centroid: the smallest is
/// `low`, the largest `high`. Ties fall back to the centroid mean, then to
/// the cluster index. Assignments are left untouched.
pub fn label_alert_levels(mut model: ClusterModel) -> ClusterModel {
    let mut order: Vec<usize> = (0..model.k).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&model.centroids[a], &model.centroids[b]);
        terminal_value(ca)
            .total_cmp(&terminal_value(cb))
            .then(centroid_mean(ca).total_cmp(&centroid_mean(cb)))
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0; model.k];
    for (rank, &c) in order.iter().enumerate() {
        ranks[c] = rank;
    }
    model.alert_ranks = ranks;
    model
}

/// One city's labels across the three clusterings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransitionRow {
    pub city_id: String,
    pub level: String,
    pub velocity: String,
    pub acceleration: String,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransitionReport {
    pub rows: Vec<TransitionRow>,
    /// Count per transition code, sorted by code.
    pub summary: Vec<(String, usize)>,
}

/// `stable-<label>` when all three labels agree, else `a→b→c`.
pub fn transition_code(level: &str, velocity: &str, acceleration: &str) -> String {
    if level == velocity && velocity == acceleration {
        format!("stable-{level}")
    } else {
        format!("{level}→{velocity}→{acceleration}")
    }
}

/// Cross-tabulates level, velocity and acceleration alert labels per city.
pub fn transition_report(
    level: &ClusterModel,
    velocity: &ClusterModel,
    acceleration: &ClusterModel,
) -> Result<TransitionReport> {
    let sets: Vec<BTreeSet<&str>> = [level, velocity, acceleration]
        .iter()
        .map(|m| m.ids.iter().map(String::as_str).collect())
        .collect();
    let union: BTreeSet<&str> = sets.iter().flatten().copied().collect();
    let odd: Vec<String> = union
        .iter()
        .filter(|id| sets.iter().any(|s| !s.contains(*id)))
        .map(|s| s.to_string())
        .collect();
    if !odd.is_empty() {
        return Err(Error::IdMismatch(odd));
    }
    let mut summary: BTreeMap<String, usize> = BTreeMap::new();
    let rows: Vec<TransitionRow> = level
        .ids
        .iter()
        .map(|id| {
            let l = level.label_of(id).unwrap();
            let v = velocity.label_of(id).unwrap();
            let a = acceleration.label_of(id).unwrap();
            let code = transition_code(l, v, a);
            *summary.entry(code.clone()).or_default() += 1;
            TransitionRow {
                city_id: id.clone(),
                level: l.into(),
                velocity: v.into(),
                acceleration: a.into(),
                code,
            }
        })
        .collect();
    Ok(TransitionReport {
        rows,
        summary: summary.into_iter().collect(),
    })
}
