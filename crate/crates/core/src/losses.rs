//! Contrastive losses over a batch of paired embeddings, with analytic gradients.
//!
//! With logits `s(a, b) = a . b / tau`:
//!
//! - unsupervised, row `i`: `-s(Z_i, Z'_i) + log sum_{n != i} exp(s(Z_i, Z'_n))`.
//!   The positive pair is *not* part of the denominator, so this loss can be
//!   negative. [`Denominator::IncludePositive`] gives the usual InfoNCE form.
//! - supervised, labelled row `i` with positives `N(i)` (other rows sharing its label):
//!   `-(1/|N(i)|) sum_{q in N(i)} s(Z_i, Z_q) + log sum_{n != i} exp(s(Z_i, Z_n))`,
//!   computed entirely within the anchor view `Z`.
//! - total: `(1 - lambda) * sum_i unsup_i + lambda * sum_{i labelled} sup_i`.
//!
//! Gradients treat every row of `Z` and `Z'` as a free vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_LAMBDA: f64 = 0.25;

/// Allowed deviation of an input row norm from 1.0.
pub const ROW_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// Sum over second-view rows `n != i` only.
    #[default]
    ExcludePositive,
    /// Sum over every second-view row, positive included.
    IncludePositive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    rows: usize,
    dim: usize,
    z: Vec<f64>,
    zp: Vec<f64>,
    labels: Vec<Option<u32>>,
    tau: f64,
    lambda: f64,
    denominator: Denominator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub z: Vec<f64>,
    pub zp: Vec<f64>,
}

impl LossBatch {
    /// `z` and `zp` are row-major `rows x dim`; every row must be unit-norm.
    pub fn new(
        dim: usize,
        z: Vec<f64>,
        zp: Vec<f64>,
        labels: Vec<Option<u32>>,
        tau: f64,
        lambda: f64,
    ) -> Result<Self> {
        let batch = Self::new_unnormalized(dim, z, zp, labels, tau, lambda)?;
        for (i, row) in batch.z.chunks_exact(dim).chain(batch.zp.chunks_exact(dim)).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > ROW_NORM_TOLERANCE {
                return Err(Error::Config(format!(
                    "row {} of {} has norm {norm}, expected 1",
                    i % batch.rows,
                    if i < batch.rows { "Z" } else { "Z'" }
                )));
            }
        }
        Ok(batch)
    }

    /// Same as [`LossBatch::new`] without the unit-norm check.
    pub fn new_unnormalized(
        dim: usize,
        z: Vec<f64>,
        zp: Vec<f64>,
        labels: Vec<Option<u32>>,
        tau: f64,
        lambda: f64,
    ) -> Result<Self> {
        if dim == 0 || !z.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: z.len(),
            });
        }
        if z.len() != zp.len() {
            return Err(Error::LengthMismatch {
                left: z.len(),
                right: zp.len(),
            });
        }
        let rows = z.len() / dim;
        if labels.len() != rows {
            return Err(Error::LengthMismatch {
                left: rows,
                right: labels.len(),
            });
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {tau}")));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {lambda}")));
        }
        if z.iter().chain(&zp).any(|x| !x.is_finite()) {
            return Err(Error::Config("non-finite embedding entry".into()));
        }
        Ok(Self {
            rows,
            dim,
            z,
            zp,
            labels,
            tau,
            lambda,
            denominator: Denominator::ExcludePositive,
        })
    }

    pub fn with_denominator(mut self, d: Denominator) -> Self {
        self.denominator = d;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {lambda}")));
        }
        self.lambda = lambda;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn labels(&self) -> &[Option<u32>] {
        &self.labels
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn zp(&self) -> &[f64] {
        &self.zp
    }

    fn z_row(&self, i: usize) -> &[f64] {
        &self.z[i * self.dim..(i + 1) * self.dim]
    }

    fn zp_row(&self, i: usize) -> &[f64] {
        &self.zp[i * self.dim..(i + 1) * self.dim]
    }

    fn logit(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / self.tau
    }

    /// Rows sharing row `i`'s label, excluding `i`.
    pub fn positives(&self, i: usize) -> Result<Vec<usize>> {
        let label = self.labels.get(i).copied().flatten().ok_or(Error::Unlabelled(i))?;
        let p: Vec<usize> = (0..self.rows)
            .filter(|&q| q != i && self.labels[q] == Some(label))
            .collect();
        if p.is_empty() {
            return Err(Error::EmptyPositiveSet(i));
        }
        Ok(p)
    }

    /// Row indices in the unsupervised denominator for anchor `i`.
    fn unsup_denominator(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let include = self.denominator == Denominator::IncludePositive;
        (0..self.rows).filter(move |&n| include || n != i)
    }
}

/// `log sum exp`, shifted by the maximum.
fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

fn check_row(batch: &LossBatch, i: usize) -> Result<()> {
    if batch.rows < 2 {
        return Err(Error::BatchTooSmall(batch.rows));
    }
    if i >= batch.rows {
        return Err(Error::LengthMismatch {
            left: i,
            right: batch.rows,
        });
    }
    Ok(())
}

pub fn unsup_loss(batch: &LossBatch, i: usize) -> Result<f64> {
    check_row(batch, i)?;
    let zi = batch.z_row(i);
    let logits: Vec<f64> = batch.unsup_denominator(i).map(|n| batch.logit(zi, batch.zp_row(n))).collect();
    Ok(-batch.logit(zi, batch.zp_row(i)) + log_sum_exp(&logits))
}

pub fn sup_loss(batch: &LossBatch, i: usize) -> Result<f64> {
    check_row(batch, i)?;
    let positives = batch.positives(i)?;
    let zi = batch.z_row(i);
    let logits: Vec<f64> = (0..batch.rows)
        .filter(|&n| n != i)
        .map(|n| batch.logit(zi, batch.z_row(n)))
        .collect();
    let pos_mean = positives.iter().map(|&q| batch.logit(zi, batch.z_row(q))).sum::<f64>() / positives.len() as f64;
    Ok(-pos_mean + log_sum_exp(&logits))
}

/// Sum of unsupervised losses over all rows.
pub fn unsup_sum(batch: &LossBatch) -> Result<f64> {
    (0..batch.rows).map(|i| unsup_loss(batch, i)).sum()
}

/// Sum of supervised losses over labelled rows.
pub fn sup_sum(batch: &LossBatch) -> Result<f64> {
    if batch.rows < 2 {
        return Err(Error::BatchTooSmall(batch.rows));
    }
    (0..batch.rows)
        .filter(|&i| batch.labels[i].is_some())
        .map(|i| sup_loss(batch, i))
        .sum()
}

pub fn total_loss(batch: &LossBatch) -> Result<f64> {
    let u = unsup_sum(batch)?;
    let s = sup_sum(batch)?;
    Ok((1.0 - batch.lambda) * u + batch.lambda * s)
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Analytic gradient of [`total_loss`] with respect to every entry of `Z` and `Z'`.
pub fn total_loss_grad(batch: &LossBatch) -> Result<Gradient> {
    // Same preconditions as the loss itself.
    total_loss(batch)?;
    let (b, d, tau) = (batch.rows, batch.dim, batch.tau);
    let mut gz = vec![0.0; b * d];
    let mut gzp = vec![0.0; b * d];
    let wu = (1.0 - batch.lambda) / tau;
    let ws = batch.lambda / tau;

    for i in 0..b {
        let zi = batch.z_row(i);

        if wu != 0.0 {
            let idx: Vec<usize> = batch.unsup_denominator(i).collect();
            let logits: Vec<f64> = idx.iter().map(|&n| batch.logit(zi, batch.zp_row(n))).collect();
            let p = softmax(&logits);
            let gi = &mut gz[i * d..(i + 1) * d];
            axpy(gi, -wu, batch.zp_row(i));
            for (&n, &pn) in idx.iter().zip(&p) {
                axpy(gi, wu * pn, batch.zp_row(n));
            }
            axpy(&mut gzp[i * d..(i + 1) * d], -wu, zi);
            for (&n, &pn) in idx.iter().zip(&p) {
                axpy(&mut gzp[n * d..(n + 1) * d], wu * pn, zi);
            }
        }

        if ws != 0.0 && batch.labels[i].is_some() {
            let positives = batch.positives(i)?;
            let idx: Vec<usize> = (0..b).filter(|&n| n != i).collect();
            let logits: Vec<f64> = idx.iter().map(|&n| batch.logit(zi, batch.z_row(n))).collect();
            let p = softmax(&logits);
            let inv_pos = 1.0 / positives.len() as f64;
            let mut gi = vec![0.0; d];
            for &q in &positives {
                axpy(&mut gi, -ws * inv_pos, batch.z_row(q));
                axpy(&mut gz[q * d..(q + 1) * d], -ws * inv_pos, zi);
            }
            for (&n, &pn) in idx.iter().zip(&p) {
                axpy(&mut gi, ws * pn, batch.z_row(n));
                axpy(&mut gz[n * d..(n + 1) * d], ws * pn, zi);
            }
            axpy(&mut gz[i * d..(i + 1) * d], 1.0, &gi);
        }
    }
    Ok(Gradient { z: gz, zp: gzp })
}

fn entry_mut(batch: &mut LossBatch, second_view: bool, k: usize) -> &mut f64 {
    if second_view {
        &mut batch.zp[k]
    } else {
        &mut batch.z[k]
    }
}

/// Central finite differences of [`total_loss`] with the given step.
pub fn finite_difference_grad(batch: &LossBatch, step: f64) -> Result<Gradient> {
    let mut probe = batch.clone();
    let mut partial = |second_view: bool, k: usize| -> Result<f64> {
        let orig = *entry_mut(&mut probe, second_view, k);
        *entry_mut(&mut probe, second_view, k) = orig + step;
        let plus = total_loss(&probe)?;
        *entry_mut(&mut probe, second_view, k) = orig - step;
        let minus = total_loss(&probe)?;
        *entry_mut(&mut probe, second_view, k) = orig;
        Ok((plus - minus) / (2.0 * step))
    };
    let n = batch.z.len();
    let z = (0..n).map(|k| partial(false, k)).collect::<Result<_>>()?;
    let zp = (0..n).map(|k| partial(true, k)).collect::<Result<_>>()?;
    Ok(Gradient { z, zp })
}

/// Entries whose magnitude is below this are compared absolutely. Central
/// differences at step 1e-4 carry roundoff around 1e-10, so a relative bound of
/// 1e-4 is meaningless for gradient entries much smaller than 1e-5.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub entries: usize,
}

/// Compares [`total_loss_grad`] with central finite differences.
pub fn gradient_check(batch: &LossBatch, step: f64) -> Result<GradCheck> {
    let analytic = total_loss_grad(batch)?;
    let numeric = finite_difference_grad(batch, step)?;
    let pairs = analytic.z.iter().chain(&analytic.zp).zip(numeric.z.iter().chain(&numeric.zp));
    let mut out = GradCheck {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        entries: 0,
    };
    for (&a, &n) in pairs {
        out.max_relative_error = out.max_relative_error.max(relative_error(a, n));
        out.max_absolute_error = out.max_absolute_error.max((a - n).abs());
        out.entries += 1;
    }
    Ok(out)
}

/// Random unit-row batch where every labelled row has at least one positive.
///
/// The leading rows (an even count, at least two, about half the batch) are
/// labelled `0, 0, 1, 1, ...` so positive sets are never empty.
pub fn random_batch(rng: &mut SplitMix64, rows: usize, dim: usize, tau: f64, lambda: f64) -> Result<LossBatch> {
    let mut unit_rows = |n: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.extend(v.iter().map(|x| x / norm));
        }
        out
    };
    let z = unit_rows(rows);
    let zp = unit_rows(rows);
    let labelled = (rows / 4 * 2).max(2).min(rows / 2 * 2);
    let labels = (0..rows)
        .map(|i| if i < labelled { Some((i / 2) as u32) } else { None })
        .collect();
    LossBatch::new(dim, z, zp, labels, tau, lambda)
}
