//! Closed-form linear (LMMSE) velocity baseline and the nonlinearity gap.
//!
//! For data moments `(mu, Sigma)` the best affine predictor of the target
//! velocity `v = x1 - x0` from the noisy state `x_t = t x1 + (1-t) x0` is
//!
//! `v_lin(x_t) = mu + (t Sigma - (1-t) I)(t^2 Sigma + (1-t)^2 I)^-1 (x_t - t mu)`
//!
//! A ridge term keeps the inverted system positive definite near t = 0.5,
//! where the state decorrelates from the velocity (the cross covariance is
//! `(2t - 1) I` under standardized moments and vanishes at the midpoint).
//! The squared deviation of a trained network from this baseline is the
//! per-sample nonlinearity gap; members of an overfit model show larger
//! gaps than held-out samples.

use rand::Rng;

use crate::data::PatchDataset;
use crate::error::{Error, Result};
use crate::model::VelocityField;
use crate::rng;

pub const DEFAULT_RIDGE: f64 = 1e-8;

/// First and second moments of the data split the baseline is fit on.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMoments {
    dim: usize,
    mean: Vec<f64>,
    /// Row-major D x D covariance, 1/(n-1) normalization.
    cov: Vec<f64>,
    ridge: f64,
}

impl DataMoments {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    /// Idealized standardized moments: `mu = 0`, `Sigma = I`.
    pub fn standardized(dim: usize) -> Self {
        let mut cov = vec![0.0; dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = 1.0;
        }
        DataMoments {
            dim,
            mean: vec![0.0; dim],
            cov,
            ridge: DEFAULT_RIDGE,
        }
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }
}

/// Sample mean and covariance (1/(n-1)) of a set of vectors.
pub fn estimate_moments(samples: &[Vec<f64>], ridge: f64) -> Result<DataMoments> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "moment estimation needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Shape("ragged samples".into()));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = vec![0.0; d * d];
    for s in samples {
        for i in 0..d {
            let di = s[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (s[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1.0);
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(DataMoments {
        dim: d,
        mean,
        cov,
        ridge,
    })
}

/// Moments of the member split.
pub fn member_moments(ds: &PatchDataset) -> Result<DataMoments> {
    estimate_moments(&ds.members, DEFAULT_RIDGE)
}

/// Materialized affine predictor `W x + b` at a fixed timestep.
#[derive(Debug, Clone)]
pub struct LinearPredictor {
    pub dim: usize,
    /// Row-major D x D.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearPredictor {
    pub fn predict(&self, x_t: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| {
                self.b[i]
                    + self.w[i * d..(i + 1) * d]
                        .iter()
                        .zip(x_t)
                        .map(|(w, x)| w * x)
                        .sum::<f64>()
            })
            .collect()
    }
}

impl DataMoments {
    /// Builds `W = (t Sigma - (1-t) I) A^-1` with
    /// `A = t^2 Sigma + (1-t)^2 I + ridge I`, solving rather than forming
    /// the inverse.
    pub fn predictor_at(&self, t: f64) -> Result<LinearPredictor> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("t={t} outside [0,1]")));
        }
        let d = self.dim;
        let s = 1.0 - t;
        let mut a = vec![0.0; d * d];
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = t * t * self.cov[i * d + j];
                m[i * d + j] = t * self.cov[i * d + j];
            }
            a[i * d + i] += s * s + self.ridge;
            m[i * d + i] -= s;
        }
        let l = cholesky(&a, d)?;
        // Solve A W^T = M^T column by column; A is symmetric.
        let mut wt = vec![0.0; d * d];
        let mut col = vec![0.0; d];
        for c in 0..d {
            for r in 0..d {
                col[r] = m[c * d + r]; // M^T column c = M row c
            }
            let sol = chol_solve(&l, d, &col);
            for r in 0..d {
                wt[r * d + c] = sol[r];
            }
        }
        let w = crate::tape::transpose(&wt, d, d);
        let mut b = self.mean.clone();
        for i in 0..d {
            let wm: f64 = w[i * d..(i + 1) * d]
                .iter()
                .zip(&self.mean)
                .map(|(wv, mv)| wv * mv)
                .sum();
            b[i] -= t * wm;
        }
        Ok(LinearPredictor { dim: d, w, b })
    }
}

/// `v_lin(x_t)` at one point; factorizes per call, so batch users should
/// hold a [`LinearPredictor`].
pub fn v_linear(moments: &DataMoments, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    if x_t.len() != moments.dim {
        return Err(Error::Shape(format!(
            "x_t has {} elements, moments are {}-dimensional",
            x_t.len(),
            moments.dim
        )));
    }
    Ok(moments.predictor_at(t)?.predict(x_t))
}

/// The LMMSE baseline as a [`VelocityField`], so it can stand in anywhere a
/// trained model is expected.
pub struct LmmseField<'a> {
    pub moments: &'a DataMoments,
}

impl VelocityField for LmmseField<'_> {
    fn dim(&self) -> usize {
        self.moments.dim
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        v_linear(self.moments, x, t).expect("valid lmmse inputs")
    }

    fn input_vjp(&self, _x: &[f64], t: f64, cotangent: &[f64]) -> Vec<f64> {
        let p = self.moments.predictor_at(t).expect("valid lmmse inputs");
        let d = p.dim;
        (0..d)
            .map(|i| (0..d).map(|j| p.w[j * d + i] * cotangent[j]).sum())
            .collect()
    }
}

/// Theoretical cross covariance `Sigma_{v, x_t} = (2t - 1) I` under
/// standardized moments, as a row-major D x D matrix.
pub fn cross_covariance_schedule(t: f64, dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    let c = 2.0 * t - 1.0;
    for i in 0..dim {
        m[i * dim + i] = c;
    }
    m
}

/// Mean over `n_draws` noise draws of `||v_model(x_t, t) - v_lin(x_t)||^2`
/// with `x_t = t x + (1-t) eps`.
pub fn linearity_gap(
    model: &impl VelocityField,
    moments: &DataMoments,
    x: &[f64],
    t: f64,
    rng: &mut impl Rng,
    n_draws: usize,
) -> Result<f64> {
    if n_draws == 0 {
        return Err(Error::InvalidArgument("n_draws must be >= 1".into()));
    }
    let predictor = moments.predictor_at(t)?;
    let d = x.len();
    let mut total = 0.0;
    for _ in 0..n_draws {
        let eps = rng::standard_normal_vec(rng, d);
        let xt: Vec<f64> = x
            .iter()
            .zip(&eps)
            .map(|(a, e)| t * a + (1.0 - t) * e)
            .collect();
        let vm = model.velocity(&xt, t);
        let vl = predictor.predict(&xt);
        total += vm
            .iter()
            .zip(&vl)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / n_draws as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapProfileRow {
    pub t: f64,
    pub member_mean: f64,
    pub member_std: f64,
    pub nonmember_mean: f64,
    pub nonmember_std: f64,
}

/// Gap statistics over a timestep grid, per split, with deterministic
/// per-sample noise.
pub fn gap_profile(
    model: &impl VelocityField,
    moments: &DataMoments,
    ds: &PatchDataset,
    t_grid: &[f64],
    n_draws: usize,
    seed: u64,
) -> Result<Vec<GapProfileRow>> {
    if t_grid.is_empty() {
        return Err(Error::InvalidArgument("empty timestep grid".into()));
    }
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let split_stats = |split: &[Vec<f64>], label_index: u64| -> Result<(f64, f64)> {
            let mut gaps = Vec::with_capacity(split.len());
            for (i, x) in split.iter().enumerate() {
                let mut r = rng::substream(seed, "gap-noise", label_index * 1_000_000 + i as u64);
                gaps.push(linearity_gap(model, moments, x, t, &mut r, n_draws)?);
            }
            let n = gaps.len() as f64;
            let mean = gaps.iter().sum::<f64>() / n;
            let var = gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / (n - 1.0).max(1.0);
            Ok((mean, var.sqrt()))
        };
        let (member_mean, member_std) = split_stats(&ds.members, 0)?;
        let (nonmember_mean, nonmember_std) = split_stats(&ds.nonmembers, 1)?;
        rows.push(GapProfileRow {
            t,
            member_mean,
            member_std,
            nonmember_mean,
            nonmember_std,
        });
    }
    Ok(rows)
}

/// Lower-triangular Cholesky factor of a symmetric positive definite
/// matrix; fails if a pivot is not strictly positive.
pub(crate) fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Numeric(format!(
                        "matrix not positive definite at pivot {i} (value {s})"
                    )));
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(l)
}

/// Solves `A x = b` given the Cholesky factor `L` of `A`.
pub(crate) fn chol_solve(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in i + 1..d {
            s -= l[k * d + i] * x[k];
        }
        x[i] = s / l[i * d + i];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig};
    use crate::fields::FnField;
    use crate::model::MlpVelocityModel;
    use crate::rng;

    #[test]
    fn cholesky_solves_spd_system() {
        // A = [[4,2],[2,3]], b = [1, 2] -> x = [-1/8, 3/4]
        let a = vec![4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        let x = chol_solve(&l, 2, &[1.0, 2.0]);
        assert!((x[0] + 0.125).abs() < 1e-12);
        assert!((x[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = vec![1.0, 2.0, 2.0, 1.0];
        assert!(matches!(cholesky(&a, 2), Err(Error::Numeric(_))));
    }

    #[test]
    fn moments_of_antipodal_pair() {
        // {a, -a}: mu = 0 and Sigma = sum (x - mu)(x - mu)^T / (n-1) = 2 a a^T.
        let a = vec![1.0, -2.0, 0.5];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let m = estimate_moments(&[a.clone(), neg], 0.0).unwrap();
        assert!(m.mean().iter().all(|v| v.abs() < 1e-15));
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (m.cov()[i * 3 + j] - 2.0 * a[i] * a[j]).abs() < 1e-12,
                    "cov[{i},{j}]"
                );
            }
        }
    }

    #[test]
    fn duplicated_dataset_matches_direct_recompute() {
        let mut r = rng::substream(70, "lmmse-test", 0);
        let samples: Vec<Vec<f64>> = (0..5)
            .map(|_| rng::standard_normal_vec(&mut r, 4))
            .collect();
        let mut doubled = samples.clone();
        doubled.extend(samples.iter().cloned());
        let m = estimate_moments(&doubled, 0.0).unwrap();

        // Brute-force recompute with the same convention.
        let n = doubled.len() as f64;
        let mut mean = vec![0.0; 4];
        for s in &doubled {
            for (a, b) in mean.iter_mut().zip(s) {
                *a += b / n;
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                let c: f64 = doubled
                    .iter()
                    .map(|s| (s[i] - mean[i]) * (s[j] - mean[j]))
                    .sum::<f64>()
                    / (n - 1.0);
                assert!((m.cov()[i * 4 + j] - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn moments_need_two_samples() {
        assert!(matches!(
            estimate_moments(&[vec![1.0, 2.0]], 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn standardized_dataset_moments_are_near_identity() {
        let ds = generate(&GeneratorConfig {
            seed: 71,
            n_per_split: 128,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let m = member_moments(&ds).unwrap();
        let d = ds.dim();
        let mean_norm: f64 = m.mean().iter().map(|v| v * v).sum::<f64>();
        assert!(mean_norm.sqrt() < 1e-8 * (d as f64).sqrt());
        for i in 0..d {
            assert!((m.cov()[i * d + i] - 1.0).abs() < 1e-6, "diag {i}");
        }
    }

    #[test]
    fn standardized_midpoint_predicts_zero() {
        let m = DataMoments::standardized(6);
        let mut r = rng::substream(72, "lmmse-test", 0);
        for _ in 0..50 {
            let x = rng::standard_normal_vec(&mut r, 6);
            let v = v_linear(&m, &x, 0.5).unwrap();
            assert!(v.iter().all(|a| a.abs() < 1e-6), "{v:?}");
        }
    }

    #[test]
    fn standardized_reduces_to_scalar_coefficient() {
        // mu = 0, Sigma = I: v_lin = (2t-1)/(t^2+(1-t)^2) x, so +-x at the ends.
        let m = DataMoments::standardized(4);
        let mut r = rng::substream(73, "lmmse-test", 0);
        let x = rng::standard_normal_vec(&mut r, 4);
        for &(t, coef) in &[(1.0, 1.0), (0.0, -1.0), (0.7, crate::fields::gaussian_marginal_coef(0.7))] {
            let v = v_linear(&m, &x, t).unwrap();
            for (vi, xi) in v.iter().zip(&x) {
                assert!(
                    (vi - coef * xi).abs() < 1e-6 * (1.0 + xi.abs()),
                    "t={t}: {vi} vs {}",
                    coef * xi
                );
            }
        }
    }

    #[test]
    fn scalar_coefficient_is_odd_about_midpoint() {
        for k in 1..50 {
            let delta = k as f64 / 100.0;
            let plus = crate::fields::gaussian_marginal_coef(0.5 + delta);
            let minus = crate::fields::gaussian_marginal_coef(0.5 - delta);
            assert!((plus + minus).abs() < 1e-12, "delta={delta}");
        }
    }

    #[test]
    fn cross_covariance_schedule_values() {
        let z = cross_covariance_schedule(0.5, 3);
        assert!(z.iter().all(|v| *v == 0.0));
        let one = cross_covariance_schedule(1.0, 2);
        assert_eq!(one, vec![1.0, 0.0, 0.0, 1.0]);
        let neg = cross_covariance_schedule(0.0, 2);
        assert_eq!(neg, vec![-1.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn gap_is_zero_for_lmmse_stub_and_offset_squared_for_shifted() {
        let m = DataMoments::standardized(5);
        let mut r = rng::substream(74, "lmmse-test", 0);
        let x = rng::standard_normal_vec(&mut r, 5);

        let lmmse_stub = LmmseField { moments: &m };
        let g = linearity_gap(&lmmse_stub, &m, &x, 0.3, &mut r, 4).unwrap();
        assert!(g < 1e-20, "gap {g}");

        // v_lin + c: gap is exactly c^2 * D.
        let c = 0.37;
        let m2 = m.clone();
        let shifted = FnField::new(5, move |xt, t| {
            v_linear(&m2, xt, t)
                .unwrap()
                .iter()
                .map(|v| v + c)
                .collect()
        });
        let g2 = linearity_gap(&shifted, &m, &x, 0.3, &mut r, 4).unwrap();
        assert!((g2 - c * c * 5.0).abs() < 1e-9, "gap {g2}");
    }

    #[test]
    fn gap_profile_shapes_and_determinism() {
        let ds = generate(&GeneratorConfig {
            seed: 75,
            n_per_split: 32,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let m = member_moments(&ds).unwrap();
        let model = MlpVelocityModel::new(ds.dim(), &[16], 4).unwrap();
        let single = gap_profile(&model, &m, &ds, &[0.5], 2, 9).unwrap();
        assert_eq!(single.len(), 1);
        let a = gap_profile(&model, &m, &ds, &[0.3, 0.5], 2, 9).unwrap();
        let b = gap_profile(&model, &m, &ds, &[0.3, 0.5], 2, 9).unwrap();
        assert_eq!(a, b);
        assert!(gap_profile(&model, &m, &ds, &[], 2, 9).is_err());
    }

    #[test]
    fn untrained_model_shows_no_split_separation() {
        // Random-init model: member and nonmember gap means should sit
        // within one pooled std of each other at every t.
        let ds = generate(&GeneratorConfig {
            seed: 76,
            n_per_split: 64,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let m = member_moments(&ds).unwrap();
        let model = MlpVelocityModel::new(ds.dim(), &[32, 32], 11).unwrap();
        let rows = gap_profile(&model, &m, &ds, &[0.2, 0.5, 0.8], 4, 13).unwrap();
        for row in rows {
            let pooled = (row.member_std.powi(2) + row.nonmember_std.powi(2)).sqrt();
            assert!(
                (row.member_mean - row.nonmember_mean).abs() <= pooled,
                "t={}: {} vs {} (pooled {pooled})",
                row.t,
                row.member_mean,
                row.nonmember_mean
            );
        }
    }
}
