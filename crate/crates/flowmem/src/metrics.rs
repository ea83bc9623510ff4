//! Attack and fidelity metrics: ROC/AUC, TPR at a fixed FPR, rank and
//! linear correlations, and an unbiased Gaussian-kernel MMD.
//!
//! Scores are oriented lower-means-member everywhere; every report carries
//! that orientation note so a silent sign flip cannot masquerade as signal.
//! The ROC is a step function over observed thresholds — no interpolation,
//! which would inflate TPR at small FPR levels.

use crate::data::PatchDataset;
use crate::error::{Error, Result};
use crate::likelihood;
use crate::mia::{score_dataset, AttackConfig, AttackScoreTable};
use crate::model::VelocityField;
use crate::rng;

pub const ORIENTATION_NOTE: &str = "lower score predicts member";

/// P(member score < nonmember score) + 0.5 P(tie), computed by rank sums
/// in O(n log n).
pub fn auc_scores(members: &[f64], nonmembers: &[f64]) -> Result<f64> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::InvalidArgument(
            "AUC needs both member and nonmember scores".into(),
        ));
    }
    let n_m = members.len();
    let n_n = nonmembers.len();
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&s| (s, true))
        .chain(nonmembers.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // Average ranks over ties, then the Mann-Whitney identity.
    let n = all.len();
    let mut member_rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for item in &all[i..=j] {
            if item.1 {
                member_rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    // U counts member-above-nonmember pairs (ties half), so the
    // lower-is-member orientation flips it.
    let u_above = member_rank_sum - (n_m * (n_m + 1)) as f64 / 2.0;
    Ok(1.0 - u_above / (n_m as f64 * n_n as f64))
}

pub fn auc(table: &AttackScoreTable) -> Result<f64> {
    auc_scores(&table.member_scores(), &table.nonmember_scores())
}

/// Max TPR over thresholds `score <= tau -> member` subject to the
/// empirical FPR not exceeding `fpr_level`. Step-function ROC.
pub fn tpr_at_fpr_scores(members: &[f64], nonmembers: &[f64], fpr_level: f64) -> Result<f64> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::InvalidArgument(
            "TPR@FPR needs both member and nonmember scores".into(),
        ));
    }
    if !(0.0 < fpr_level && fpr_level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fpr level must be in (0,1), got {fpr_level}"
        )));
    }
    let allowed_fp = (fpr_level * nonmembers.len() as f64).floor() as usize;
    let mut non_sorted = nonmembers.to_vec();
    non_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut mem_sorted = members.to_vec();
    mem_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // TPR steps only at member scores; count false positives at each.
    let mut best = 0.0f64;
    for (k, &tau) in mem_sorted.iter().enumerate() {
        let fp = non_sorted.partition_point(|&s| s <= tau);
        if fp <= allowed_fp {
            best = best.max((k + 1) as f64 / mem_sorted.len() as f64);
        }
    }
    Ok(best)
}

pub fn tpr_at_fpr(table: &AttackScoreTable, fpr_level: f64) -> Result<f64> {
    tpr_at_fpr_scores(
        &table.member_scores(),
        &table.nonmember_scores(),
        fpr_level,
    )
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::InvalidArgument(
            "correlation needs equal nonzero lengths".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numeric(
            "correlation undefined for zero-variance input".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Average ranks (ties averaged).
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson on average-ranked data.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::InvalidArgument(
            "correlation needs equal nonzero lengths".into(),
        ));
    }
    pearson(&ranks(xs), &ranks(ys))
}

/// Median pairwise Euclidean distance over the pooled samples, divided by
/// sqrt(2); the standard parameter-free kernel bandwidth.
pub fn median_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y.iter()).collect();
    let mut dists = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            let d2: f64 = pooled[i]
                .iter()
                .zip(pooled[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = dists[dists.len() / 2];
    (median / 2f64.sqrt()).max(1e-12)
}

fn gaussian_kernel(a: &[f64], b: &[f64], bandwidth: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * bandwidth * bandwidth)).exp()
}

/// Unbiased squared MMD with a Gaussian kernel. `bandwidth: None` selects
/// the median heuristic. The u-statistic can be slightly negative for
/// close distributions; callers compare values, not signs.
pub fn mmd_sq(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: Option<f64>) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::InvalidArgument(
            "unbiased MMD needs at least 2 samples per set".into(),
        ));
    }
    let bw = match bandwidth {
        Some(b) if b > 0.0 => b,
        Some(b) => {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive, got {b}"
            )))
        }
        None => median_bandwidth(x, y),
    };
    let m = x.len();
    let n = y.len();
    let mut kxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kxx += gaussian_kernel(&x[i], &x[j], bw);
            }
        }
    }
    kxx /= (m * (m - 1)) as f64;
    let mut kyy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kyy += gaussian_kernel(&y[i], &y[j], bw);
            }
        }
    }
    kyy /= (n * (n - 1)) as f64;
    let mut kxy = 0.0;
    for xi in x {
        for yj in y {
            kxy += gaussian_kernel(xi, yj, bw);
        }
    }
    kxy /= (m * n) as f64;
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Generates `n` samples by integrating the flow forward from Gaussian
/// draws and returns their unbiased MMD^2 against a reference set.
pub fn mmd_fidelity(
    model: &impl VelocityField,
    reference: &[Vec<f64>],
    n_generated: usize,
    ode_steps: usize,
    seed: u64,
) -> Result<f64> {
    if n_generated < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 generated samples".into(),
        ));
    }
    let mut r = rng::substream(seed, "mmd-generate", 0);
    let generated: Vec<Vec<f64>> = (0..n_generated)
        .map(|_| likelihood::generate_sample(model, ode_steps, &mut r))
        .collect::<Result<_>>()?;
    mmd_sq(&generated, reference, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSummary {
    pub member_mean: f64,
    pub member_std: f64,
    pub nonmember_mean: f64,
    pub nonmember_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocReport {
    pub auc: f64,
    /// `(fpr_level, tpr)` pairs.
    pub tpr_at_fpr: Vec<(f64, f64)>,
    pub n_members: usize,
    pub n_nonmembers: usize,
    pub orientation: String,
    pub scores: ScoreSummary,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

pub fn roc_report(table: &AttackScoreTable, fpr_levels: &[f64]) -> Result<RocReport> {
    let members = table.member_scores();
    let nonmembers = table.nonmember_scores();
    let auc = auc_scores(&members, &nonmembers)?;
    let mut tprs = Vec::with_capacity(fpr_levels.len());
    for &level in fpr_levels {
        tprs.push((level, tpr_at_fpr_scores(&members, &nonmembers, level)?));
    }
    let (mm, ms) = mean_std(&members);
    let (nm, ns) = mean_std(&nonmembers);
    Ok(RocReport {
        auc,
        tpr_at_fpr: tprs,
        n_members: members.len(),
        n_nonmembers: nonmembers.len(),
        orientation: ORIENTATION_NOTE.to_string(),
        scores: ScoreSummary {
            member_mean: mm,
            member_std: ms,
            nonmember_mean: nm,
            nonmember_std: ns,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub t: f64,
    pub auc: f64,
    pub tpr_at_1pct: f64,
}

/// AUC and TPR@1%FPR of one statistic across a timestep grid.
pub fn sweep_auc_over_t(
    model: &impl VelocityField,
    ds: &PatchDataset,
    base: &AttackConfig,
    t_grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if t_grid.is_empty() {
        return Err(Error::InvalidArgument("empty timestep grid".into()));
    }
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let cfg = AttackConfig { t, ..base.clone() };
        let table = score_dataset(model, ds, &cfg)?;
        rows.push(SweepRow {
            t,
            auc: auc(&table)?,
            tpr_at_1pct: tpr_at_fpr(&table, 0.01)?,
        });
    }
    Ok(rows)
}

/// Evenly spaced attack grid inside the clamp interval, symmetric about 0.5.
pub fn default_t_grid(points: usize) -> Vec<f64> {
    assert!(points >= 1);
    if points == 1 {
        return vec![0.5];
    }
    (0..points)
        .map(|i| 0.05 + 0.9 * i as f64 / (points - 1) as f64)
        .collect()
}

/// Brute-force pairwise AUC used as the oracle in tests: O(n^2) concordance
/// count with explicit tie halving.
pub fn auc_bruteforce(members: &[f64], nonmembers: &[f64]) -> f64 {
    let mut total = 0.0;
    for m in members {
        for nm in nonmembers {
            if m < nm {
                total += 1.0;
            } else if m == nm {
                total += 0.5;
            }
        }
    }
    total / (members.len() * nonmembers.len()) as f64
}
