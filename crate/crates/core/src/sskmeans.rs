//! Semi-supervised k-means.
//!
//! Labelled samples are pinned: a sample labelled `c` is assigned to the center
//! of class `c` at every iteration, however far away it is. The first `|Y_L|`
//! centers start at the per-class means of the labelled rows (classes in sorted
//! order); the remaining novel centers are seeded from unlabelled rows by
//! k-means++, with distances measured to every center chosen so far, including
//! the class means. Lloyd iterations then update all centers.
//!
//! k-means++ seeding draws from [`SplitMix64`] seeded with `ClusterConfig::seed`
//! and visits unlabelled rows in ascending record-id order:
//!
//! 1. the first novel seed is row `below(n_unlabelled)`;
//! 2. each later seed draws `u = next_f64() * total` where `total` is the sum of
//!    squared distances to the nearest chosen center, and picks the first row
//!    whose running sum of those weights exceeds `u`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::store::EmbeddingBundle;

pub type Centers = Vec<Vec<f64>>;

/// Label to center index.
pub type Pinning = BTreeMap<String, usize>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmptyClusterPolicy {
    /// Keep the previous center.
    #[default]
    Retain,
    /// Move the center onto the unlabelled row farthest from its own center.
    ReseedFarthest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// Total number of clusters `K`, known plus novel.
    pub clusters: usize,
    pub max_iters: usize,
    /// Stop once no center moves farther than this (Euclidean).
    #[serde(with = "tolerance")]
    pub tol: f64,
    pub seed: u64,
    /// Keep known-class centers at their labelled means instead of updating them.
    #[serde(default)]
    pub freeze_known_centers: bool,
    #[serde(default)]
    pub empty_cluster: EmptyClusterPolicy,
    /// Known-class set. When absent, it is the set of labels present in the data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub known_classes: Option<BTreeSet<String>>,
}

impl ClusterConfig {
    pub fn new(clusters: usize) -> Self {
        Self {
            clusters,
            max_iters: 300,
            tol: 1e-6,
            seed: 0,
            freeze_known_centers: false,
            empty_cluster: EmptyClusterPolicy::Retain,
            known_classes: None,
        }
    }
}

/// JSON has no infinity; an infinite tolerance is written as the string `"inf"`.
mod tolerance {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad tolerance {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centers: Centers,
    pub pinned: Pinning,
    pub assignments: Vec<usize>,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    pub config: ClusterConfig,
}

impl ClusterModel {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("model serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, "cluster model", e))
    }
}

/// One Lloyd iteration as seen by a [`fit_with_observer`] callback.
pub struct IterationState<'a> {
    pub iteration: usize,
    pub assignments: &'a [usize],
    pub centers: &'a Centers,
    pub inertia: f64,
}

pub(crate) fn sq_dist(x: &[f32], c: &[f64]) -> f64 {
    x.iter()
        .zip(c)
        .map(|(&a, b)| {
            let d = f64::from(a) - b;
            d * d
        })
        .sum()
}

fn labelled_rows(fused: &EmbeddingBundle) -> BTreeMap<&str, Vec<usize>> {
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for r in fused.records() {
        if let Some(l) = &r.label {
            by_label.entry(l.as_str()).or_default().push(r.row);
        }
    }
    by_label
}

/// Unlabelled rows in ascending record-id order.
pub fn unlabelled_rows_by_id(fused: &EmbeddingBundle) -> Vec<usize> {
    let mut rows: Vec<&crate::store::SampleRecord> = fused.records().iter().filter(|r| !r.is_labelled()).collect();
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    rows.into_iter().map(|r| r.row).collect()
}

fn mean_of_rows(fused: &EmbeddingBundle, rows: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0; fused.dim()];
    for &r in rows {
        for (a, &x) in acc.iter_mut().zip(fused.row(r)) {
            *a += f64::from(x);
        }
    }
    let n = rows.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Known-class means followed by k-means++ novel seeds.
pub fn init_centers(fused: &EmbeddingBundle, cfg: &ClusterConfig) -> Result<(Centers, Pinning)> {
    let by_label = labelled_rows(fused);
    let known: Vec<String> = match &cfg.known_classes {
        Some(set) => {
            if let Some(l) = by_label.keys().find(|l| !set.contains(**l)) {
                return Err(Error::UnpinnedLabel(l.to_string()));
            }
            set.iter().cloned().collect()
        }
        None => by_label.keys().map(|s| s.to_string()).collect(),
    };
    if cfg.clusters == 0 || cfg.clusters < known.len() {
        return Err(Error::Config(format!(
            "cluster count {} must be at least the number of known classes ({})",
            cfg.clusters,
            known.len()
        )));
    }

    let mut centers = Vec::with_capacity(cfg.clusters);
    let mut pinned = Pinning::new();
    for (i, label) in known.iter().enumerate() {
        let rows = by_label
            .get(label.as_str())
            .ok_or_else(|| Error::ClassWithoutLabelled(label.clone()))?;
        centers.push(mean_of_rows(fused, rows));
        pinned.insert(label.clone(), i);
    }

    let novel = cfg.clusters - known.len();
    if novel == 0 {
        return Ok((centers, pinned));
    }
    let candidates = unlabelled_rows_by_id(fused);
    if candidates.len() < novel {
        return Err(Error::TooFewUnlabelled {
            needed: novel,
            found: candidates.len(),
        });
    }

    let mut rng = SplitMix64::new(cfg.seed);
    let first = candidates[rng.below(candidates.len())];
    centers.push(fused.row(first).iter().map(|&x| f64::from(x)).collect());

    let mut weights: Vec<f64> = candidates
        .iter()
        .map(|&r| centers.iter().map(|c| sq_dist(fused.row(r), c)).fold(f64::INFINITY, f64::min))
        .collect();

    while centers.len() < cfg.clusters {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            let distinct = centers.len() - known.len();
            return Err(Error::TooFewUnlabelled {
                needed: novel,
                found: distinct,
            });
        }
        let u = rng.next_f64() * total;
        let mut running = 0.0;
        let mut chosen = None;
        for (j, w) in weights.iter().enumerate() {
            running += w;
            if running > u {
                chosen = Some(j);
                break;
            }
        }
        // Rounding can leave `u` at the very top of the range.
        let j = chosen.unwrap_or_else(|| weights.iter().rposition(|&w| w > 0.0).expect("total > 0"));
        let center: Vec<f64> = fused.row(candidates[j]).iter().map(|&x| f64::from(x)).collect();
        for (w, &r) in weights.iter_mut().zip(&candidates) {
            *w = w.min(sq_dist(fused.row(r), &center));
        }
        centers.push(center);
    }
    Ok((centers, pinned))
}

/// Pinned rows go to their class center; other rows to the nearest center
/// (squared Euclidean, lowest index on ties).
pub fn assign(fused: &EmbeddingBundle, centers: &Centers, pinned: &Pinning) -> Result<Vec<usize>> {
    if centers.is_empty() {
        return Err(Error::Empty("no centers"));
    }
    if let Some(c) = centers.iter().find(|c| c.len() != fused.dim()) {
        return Err(Error::DimensionMismatch {
            expected: fused.dim(),
            found: c.len(),
        });
    }
    (0..fused.count())
        .into_par_iter()
        .map(|i| match &fused.record(i).label {
            Some(l) => pinned.get(l).copied().ok_or_else(|| Error::UnpinnedLabel(l.clone())),
            None => Ok(nearest(fused.row(i), centers).0),
        })
        .collect()
}

fn nearest(x: &[f32], centers: &Centers) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

pub fn inertia(fused: &EmbeddingBundle, centers: &Centers, assignments: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(fused.row(i), &centers[a]))
        .sum()
}

/// Per-cluster means, summed in ascending row order. Empty clusters keep their
/// `previous` center; their indices are returned alongside.
pub fn update_centers(fused: &EmbeddingBundle, assignments: &[usize], previous: &Centers) -> (Centers, Vec<usize>) {
    let k = previous.len();
    let mut sums = vec![vec![0.0; fused.dim()]; k];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, &x) in sums[a].iter_mut().zip(fused.row(i)) {
            *s += f64::from(x);
        }
    }
    let mut empty = Vec::new();
    let centers = sums
        .into_iter()
        .zip(&counts)
        .enumerate()
        .map(|(j, (mut s, &n))| {
            if n == 0 {
                warn!("cluster {j} is empty; keeping its previous center");
                empty.push(j);
                previous[j].clone()
            } else {
                s.iter_mut().for_each(|v| *v /= n as f64);
                s
            }
        })
        .collect();
    (centers, empty)
}

fn max_shift(a: &Centers, b: &Centers) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

pub fn fit(fused: &EmbeddingBundle, cfg: &ClusterConfig) -> Result<ClusterModel> {
    fit_with_observer(fused, cfg, |_| {})
}

/// Runs [`fit`], calling `observe` after every assignment step.
pub fn fit_with_observer(
    fused: &EmbeddingBundle,
    cfg: &ClusterConfig,
    mut observe: impl FnMut(&IterationState<'_>),
) -> Result<ClusterModel> {
    if cfg.max_iters == 0 {
        return Err(Error::Config("max_iters must be positive".into()));
    }
    if cfg.tol.is_nan() || cfg.tol < 0.0 {
        return Err(Error::Config("tol must be non-negative".into()));
    }
    let (mut centers, pinned) = init_centers(fused, cfg)?;
    let known = pinned.len();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        let assignments = assign(fused, &centers, &pinned)?;
        let current = inertia(fused, &centers, &assignments);
        trace.push(current);
        observe(&IterationState {
            iteration: iterations,
            assignments: &assignments,
            centers: &centers,
            inertia: current,
        });

        let (mut next, empty) = update_centers(fused, &assignments, &centers);
        if cfg.empty_cluster == EmptyClusterPolicy::ReseedFarthest && !empty.is_empty() {
            reseed_farthest(fused, &assignments, &centers, &empty, &mut next);
        }
        if cfg.freeze_known_centers {
            next[..known].clone_from_slice(&centers[..known]);
        }
        let shift = max_shift(&centers, &next);
        centers = next;
        iterations += 1;
        if shift <= cfg.tol {
            converged = true;
            break;
        }
    }

    let assignments = assign(fused, &centers, &pinned)?;
    Ok(ClusterModel {
        centers,
        pinned,
        assignments,
        inertia_trace: trace,
        iterations_run: iterations,
        converged,
        config: cfg.clone(),
    })
}

fn reseed_farthest(fused: &EmbeddingBundle, assignments: &[usize], old: &Centers, empty: &[usize], next: &mut Centers) {
    let mut dists: Vec<(usize, f64)> = (0..fused.count())
        .filter(|&i| !fused.record(i).is_labelled())
        .map(|i| (i, sq_dist(fused.row(i), &old[assignments[i]])))
        .collect();
    dists.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (&j, &(row, _)) in empty.iter().zip(&dists) {
        next[j] = fused.row(row).iter().map(|&x| f64::from(x)).collect();
    }
}
