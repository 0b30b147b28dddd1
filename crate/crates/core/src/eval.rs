//! Clustering accuracy under the best one-to-one matching of clusters to classes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum-cost assignment of rows to columns (Hungarian method with
/// potentials, `O(n^2 m)`). Rectangular inputs are solved as if padded with
/// zero-cost dummy rows or columns; the result holds `min(rows, cols)` pairs
/// sorted by row. Maximize a benefit by passing its negation.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(Error::Empty("empty cost matrix"));
    }
    for (r, row) in cost.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::LengthMismatch {
                left: cols,
                right: row.len(),
            });
        }
        if let Some(c) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteCost { row: r, col: c });
        }
    }
    if rows <= cols {
        Ok(solve(rows, cols, |r, c| cost[r][c]))
    } else {
        let mut pairs: Vec<(usize, usize)> = solve(cols, rows, |r, c| cost[c][r])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        Ok(pairs)
    }
}

/// Shortest-augmenting-path Hungarian algorithm for `n <= m`.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based with a virtual column 0; `matched[j]` is the row holding column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut matched = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| matched[j] != 0)
        .map(|j| (matched[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Contingency counts and the accuracy-maximizing cluster-to-class matching.
#[derive(Debug, Clone, PartialEq)]
pub struct Accuracy<T> {
    pub correct: usize,
    pub total: usize,
    /// Cluster index to class.
    pub matching: BTreeMap<usize, T>,
    /// Sorted distinct classes; columns of `contingency`.
    pub classes: Vec<T>,
    /// `contingency[cluster][class]` sample counts.
    pub contingency: Vec<Vec<u64>>,
}

impl<T> Accuracy<T> {
    pub fn acc(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

pub fn cluster_accuracy<T: Ord + Clone>(pred: &[usize], truth: &[T]) -> Result<Accuracy<T>> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("no samples to evaluate"));
    }
    let classes: Vec<T> = truth.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let class_index: BTreeMap<&T, usize> = classes.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let clusters = pred.iter().max().map_or(0, |m| m + 1);
    let mut contingency = vec![vec![0u64; classes.len()]; clusters];
    for (&p, t) in pred.iter().zip(truth) {
        contingency[p][class_index[t]] += 1;
    }
    // Match non-empty clusters in order of first appearance, so that the chosen
    // matching (including ties) does not depend on how clusters are numbered.
    let mut order = Vec::new();
    let mut seen = vec![false; clusters];
    for &p in pred {
        if !std::mem::replace(&mut seen[p], true) {
            order.push(p);
        }
    }
    let cost: Vec<Vec<f64>> = order
        .iter()
        .map(|&k| contingency[k].iter().map(|&c| -(c as f64)).collect())
        .collect();
    let pairs: Vec<(usize, usize)> = hungarian_match(&cost)?.into_iter().map(|(r, c)| (order[r], c)).collect();
    let correct = pairs.iter().map(|&(k, c)| contingency[k][c] as usize).sum();
    let matching = pairs.into_iter().map(|(k, c)| (k, classes[c].clone())).collect();
    Ok(Accuracy {
        correct,
        total: pred.len(),
        matching,
        classes,
        contingency,
    })
}

/// Accuracy rendered to four decimals.
pub fn round4(x: f64) -> f64 {
    (x * 10_000.0).round() / 10_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_all: f64,
    /// Absent when no sample belongs to an old class.
    pub acc_old: Option<f64>,
    /// Absent when no sample belongs to a new class.
    pub acc_new: Option<f64>,
    pub n_all: usize,
    pub n_old: usize,
    pub n_new: usize,
    pub correct_all: usize,
    pub correct_old: usize,
    pub correct_new: usize,
    pub matching: BTreeMap<usize, String>,
    pub classes: Vec<String>,
    pub contingency: Vec<Vec<u64>>,
    /// Effective configuration of the run that produced this report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl EvalReport {
    pub const TSV_HEADER: &'static str = "acc_all\tacc_old\tacc_new\tn_all\tn_old\tn_new";

    /// One line: `acc_all acc_old acc_new n_all n_old n_new`, tab-separated; absent accuracies are `NA`.
    pub fn tsv_line(&self) -> String {
        let f = |x: Option<f64>| x.map_or("NA".to_string(), |v| format!("{v:.4}"));
        format!(
            "{:.4}\t{}\t{}\t{}\t{}\t{}",
            self.acc_all,
            f(self.acc_old),
            f(self.acc_new),
            self.n_all,
            self.n_old,
            self.n_new
        )
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let tsv = dir.join("report.tsv");
        fs::write(&tsv, format!("{}\n{}\n", Self::TSV_HEADER, self.tsv_line())).map_err(|e| Error::io(&tsv, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, "report", e))
    }
}

/// One matching on all samples, then correctness rates restricted to samples
/// whose true class is (old) or is not (new) in `old_classes`.
pub fn subset_report<T: Ord + Clone + Display>(
    pred: &[usize],
    truth: &[T],
    old_classes: &BTreeSet<T>,
) -> Result<EvalReport> {
    let all = cluster_accuracy(pred, truth)?;
    let (mut n_old, mut n_new, mut correct_old, mut correct_new) = (0, 0, 0, 0);
    for (p, t) in pred.iter().zip(truth) {
        let hit = all.matching.get(p) == Some(t);
        if old_classes.contains(t) {
            n_old += 1;
            correct_old += usize::from(hit);
        } else {
            n_new += 1;
            correct_new += usize::from(hit);
        }
    }
    let rate = |c: usize, n: usize| (n > 0).then(|| round4(c as f64 / n as f64));
    Ok(EvalReport {
        acc_all: round4(all.acc()),
        acc_old: rate(correct_old, n_old),
        acc_new: rate(correct_new, n_new),
        n_all: all.total,
        n_old,
        n_new,
        correct_all: all.correct,
        correct_old,
        correct_new,
        matching: all.matching.iter().map(|(k, c)| (*k, c.to_string())).collect(),
        classes: all.classes.iter().map(ToString::to_string).collect(),
        contingency: all.contingency,
        config: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn identity_benefit_picks_diagonal() {
        let benefit: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { -1.0 } else { 0.0 }).collect()).collect();
        assert_eq!(hungarian_match(&benefit).unwrap(), vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(hungarian_match(&[vec![3.5]]).unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(hungarian_match(&[]).is_err());
        assert!(hungarian_match(&[vec![]]).is_err());
        assert!(matches!(
            hungarian_match(&[vec![1.0, f64::NAN]]),
            Err(Error::NonFiniteCost { row: 0, col: 1 })
        ));
        assert!(hungarian_match(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    #[test]
    fn six_by_six_matches_permutation_search() {
        let mut rng = SplitMix64::new(6);
        let benefit: Vec<Vec<f64>> = (0..6).map(|_| (0..6).map(|_| rng.below(20) as f64).collect()).collect();
        let best = permutations(6)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| benefit[i][j]).sum::<f64>())
            .fold(f64::MIN, f64::max);
        let cost: Vec<Vec<f64>> = benefit.iter().map(|r| r.iter().map(|x| -x).collect()).collect();
        let got: f64 = hungarian_match(&cost).unwrap().iter().map(|&(i, j)| benefit[i][j]).sum();
        assert_eq!(got, best);
    }

    #[test]
    fn rectangular_both_ways() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0]];
        assert_eq!(hungarian_match(&cost).unwrap(), vec![(0, 1), (1, 0)]);
        let t: Vec<Vec<f64>> = (0..3).map(|j| (0..2).map(|i| cost[i][j]).collect()).collect();
        assert_eq!(hungarian_match(&t).unwrap(), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn accuracy_is_permutation_invariant() {
        let truth = vec![0, 0, 1, 1, 2, 2, 2];
        assert_eq!(cluster_accuracy(&truth, &truth).unwrap().acc(), 1.0);
        let relabelled: Vec<usize> = truth.iter().map(|&t| [2, 0, 1][t]).collect();
        let a = cluster_accuracy(&relabelled, &truth).unwrap();
        assert_eq!(a.acc(), 1.0);
        assert_eq!(a.matching, BTreeMap::from([(2, 0), (0, 1), (1, 2)]));
    }

    #[test]
    fn planted_confusion_matches_brute_force() {
        let mut rng = SplitMix64::new(12);
        let truth: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.next_f64() < 0.7 { (t + 1) % 3 } else { rng.below(3) })
            .collect();
        let best = permutations(3)
            .iter()
            .map(|p| pred.iter().zip(&truth).filter(|(&c, &t)| p[c] == t).count())
            .max()
            .unwrap();
        assert_eq!(cluster_accuracy(&pred, &truth).unwrap().correct, best);
    }

    #[test]
    fn accuracy_errors() {
        assert!(matches!(cluster_accuracy::<u8>(&[], &[]), Err(Error::Empty(_))));
        assert!(matches!(cluster_accuracy(&[0], &[1, 2]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn perfect_split_report() {
        let truth: Vec<u32> = (0..10).flat_map(|c| [c; 4]).collect();
        let old: BTreeSet<u32> = (0..5).collect();
        let pred: Vec<usize> = truth.iter().map(|&t| t as usize).collect();
        let r = subset_report(&pred, &truth, &old).unwrap();
        assert_eq!((r.acc_all, r.acc_old, r.acc_new), (1.0, Some(1.0), Some(1.0)));
        assert_eq!((r.n_all, r.n_old, r.n_new), (40, 20, 20));
    }

    #[test]
    fn all_old_leaves_new_absent() {
        let truth = vec![0u32, 1, 1];
        let r = subset_report(&[0, 1, 1], &truth, &BTreeSet::from([0, 1])).unwrap();
        assert_eq!(r.acc_new, None);
        assert_eq!(r.n_new, 0);
        assert_eq!(r.tsv_line(), "1.0000\t1.0000\tNA\t3\t3\t0");
    }

    #[test]
    fn report_round_trip() {
        let truth = vec!["a".to_string(), "b".into(), "b".into()];
        let r = subset_report(&[1, 0, 0], &truth, &BTreeSet::from(["a".to_string()])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        assert_eq!(EvalReport::read(&dir.path().join("report.json")).unwrap(), r);
        let tsv = fs::read_to_string(dir.path().join("report.tsv")).unwrap();
        assert!(tsv.starts_with(EvalReport::TSV_HEADER));
    }
}
