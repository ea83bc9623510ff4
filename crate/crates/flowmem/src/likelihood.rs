//! Exact ODE log-likelihoods under a velocity field.
//!
//! The log-density of a sample evolves along the flow as
//! `d log p / dt = -Tr(dv/dx)`, so integrating the state backward from
//! t=1 to t=0 while accumulating the trace gives
//! `log p1(x1) = log p0(x0) + integral_1^0 Tr(dv/dx) dt` with a standard
//! Gaussian base density `p0`. Integration is fixed-grid RK4 over the joint
//! (state, log-det) system, which keeps results deterministic and the
//! convergence order testable.
//!
//! The Jacobian trace is either estimated with Hutchinson probes (drawn
//! once per trajectory and reused at every step) or computed exactly from
//! the Jacobian diagonal via central differences; the exact mode exists as
//! the oracle for the stochastic one.

use rand::Rng;

use crate::data::PatchDataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::mia::Codec;
use crate::model::VelocityField;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    /// `(1/K) sum_k eps_k^T (dv/dx) eps_k` via vector-Jacobian products.
    HutchinsonAutodiff,
    /// Jacobian diagonal by central finite differences; O(D) forward
    /// passes per evaluation, exact up to O(h^2).
    ExactSmallD,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodConfig {
    /// Fixed RK4 grid size over [0, 1].
    pub n_steps: usize,
    /// Hutchinson probe count.
    pub k_probes: usize,
    pub seed: u64,
    pub mode: TraceMode,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        LikelihoodConfig {
            n_steps: 128,
            k_probes: 2,
            seed: 0,
            mode: TraceMode::HutchinsonAutodiff,
        }
    }
}

impl LikelihoodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 16 {
            return Err(Error::Config(format!(
                "n_steps must be >= 16, got {}",
                self.n_steps
            )));
        }
        if self.k_probes < 1 {
            return Err(Error::Config("k_probes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Hutchinson estimate of `Tr(dv/dx)` at `(x, t)` with `k` fresh Gaussian
/// probes.
pub fn hutchinson_trace(
    model: &impl VelocityField,
    x: &[f64],
    t: f64,
    k: usize,
    rng: &mut impl Rng,
) -> f64 {
    assert!(k >= 1);
    let probes: Vec<Vec<f64>> = (0..k)
        .map(|_| rng::standard_normal_vec(rng, x.len()))
        .collect();
    hutchinson_trace_with_probes(model, x, t, &probes)
}

fn hutchinson_trace_with_probes(
    model: &impl VelocityField,
    x: &[f64],
    t: f64,
    probes: &[Vec<f64>],
) -> f64 {
    let vjps = model.input_vjp_multi(x, t, probes);
    let total: f64 = probes
        .iter()
        .zip(&vjps)
        .map(|(e, je)| e.iter().zip(je).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    total / probes.len() as f64
}

/// Exact trace from the Jacobian diagonal by central differences.
pub fn exact_trace_fd(model: &impl VelocityField, x: &[f64], t: f64) -> f64 {
    let h = 1e-5;
    let mut xp = x.to_vec();
    let mut tr = 0.0;
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let vp = model.velocity(&xp, t)[i];
        xp[i] = x[i] - h;
        let vm = model.velocity(&xp, t)[i];
        xp[i] = x[i];
        tr += (vp - vm) / (2.0 * h);
    }
    tr
}

fn gaussian_log_density(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    -0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * x.iter().map(|v| v * v).sum::<f64>()
}

/// Integrates the flow state alone (no log-det) from `t0` to `t1` with
/// fixed-grid RK4; used both for likelihood trajectories and generation.
pub fn integrate_state(
    model: &impl VelocityField,
    x_start: &[f64],
    t0: f64,
    t1: f64,
    n_steps: usize,
) -> Result<Vec<f64>> {
    let h = (t1 - t0) / n_steps as f64;
    let mut x = x_start.to_vec();
    let mut t = t0;
    for _ in 0..n_steps {
        let k1 = model.velocity(&x, clamp01(t));
        let k2 = model.velocity(&axpy(&x, &k1, h / 2.0), clamp01(t + h / 2.0));
        let k3 = model.velocity(&axpy(&x, &k2, h / 2.0), clamp01(t + h / 2.0));
        let k4 = model.velocity(&axpy(&x, &k3, h), clamp01(t + h));
        for i in 0..x.len() {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t += h;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                t,
                reason: "state diverged during integration".into(),
            });
        }
    }
    Ok(x)
}

/// Generates one sample by flowing a standard Gaussian draw from t=0 to t=1.
pub fn generate_sample(
    model: &impl VelocityField,
    n_steps: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let x0 = rng::standard_normal_vec(rng, model.dim());
    integrate_state(model, &x0, 0.0, 1.0, n_steps)
}

/// Exact log-likelihood of `x1` under the flow, plus the latent `x0` it
/// maps back to. Deterministic given the config seed.
pub fn log_likelihood(
    model: &impl VelocityField,
    x1: &[f64],
    cfg: &LikelihoodConfig,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    if x1.len() != model.dim() {
        return Err(Error::Shape(format!(
            "sample has {} elements, field dimension is {}",
            x1.len(),
            model.dim()
        )));
    }
    if x1.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            t: 1.0,
            reason: "non-finite input sample".into(),
        });
    }
    // Probes are drawn once per trajectory and reused across all steps.
    let mut probe_rng = rng::substream(cfg.seed, "likelihood-probes", 0);
    let probes: Vec<Vec<f64>> = (0..cfg.k_probes)
        .map(|_| rng::standard_normal_vec(&mut probe_rng, x1.len()))
        .collect();
    let trace = |x: &[f64], t: f64| -> f64 {
        match cfg.mode {
            TraceMode::HutchinsonAutodiff => hutchinson_trace_with_probes(model, x, t, &probes),
            TraceMode::ExactSmallD => exact_trace_fd(model, x, t),
        }
    };

    let h = -1.0 / cfg.n_steps as f64;
    let mut x = x1.to_vec();
    let mut logdet = 0.0;
    let mut t = 1.0;
    for _ in 0..cfg.n_steps {
        let (k1x, k1l) = joint_derivative(model, &trace, &x, clamp01(t));
        let (k2x, k2l) = joint_derivative(model, &trace, &axpy(&x, &k1x, h / 2.0), clamp01(t + h / 2.0));
        let (k3x, k3l) = joint_derivative(model, &trace, &axpy(&x, &k2x, h / 2.0), clamp01(t + h / 2.0));
        let (k4x, k4l) = joint_derivative(model, &trace, &axpy(&x, &k3x, h), clamp01(t + h));
        for i in 0..x.len() {
            x[i] += h / 6.0 * (k1x[i] + 2.0 * k2x[i] + 2.0 * k3x[i] + k4x[i]);
        }
        logdet += h / 6.0 * (k1l + 2.0 * k2l + 2.0 * k3l + k4l);
        t += h;
        if x.iter().any(|v| !v.is_finite()) || !logdet.is_finite() {
            return Err(Error::NonFinite {
                t,
                reason: "likelihood trajectory diverged".into(),
            });
        }
    }
    Ok((gaussian_log_density(&x) + logdet, x))
}

fn joint_derivative<M: VelocityField>(
    model: &M,
    trace: &impl Fn(&[f64], f64) -> f64,
    x: &[f64],
    t: f64,
) -> (Vec<f64>, f64) {
    (model.velocity(x, t), trace(x, t))
}

fn axpy(x: &[f64], k: &[f64], h: f64) -> Vec<f64> {
    x.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

fn clamp01(t: f64) -> f64 {
    t.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub id: usize,
    pub logp: f64,
    pub complexity_bytes: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodStudy {
    pub rows: Vec<StudyRow>,
    pub pearson_logp_complexity: f64,
    pub spearman_logp_complexity: f64,
}

/// Per-nonmember log-likelihood against compressed-size complexity, with
/// the correlation coefficients of the two columns.
pub fn likelihood_complexity_study(
    model: &impl VelocityField,
    ds: &PatchDataset,
    cfg: &LikelihoodConfig,
) -> Result<LikelihoodStudy> {
    cfg.validate()?;
    if ds.nonmembers.is_empty() {
        return Err(Error::InvalidArgument("no nonmembers to study".into()));
    }
    let codec = Codec::for_dataset(ds);
    let mut rows = Vec::with_capacity(ds.nonmembers.len());
    for (i, x) in ds.nonmembers.iter().enumerate() {
        let per_sample = LikelihoodConfig {
            seed: rng::derive_seed(cfg.seed, "likelihood-sample", i as u64),
            ..cfg.clone()
        };
        let (logp, _) = log_likelihood(model, x, &per_sample)?;
        rows.push(StudyRow {
            id: ds.members.len() + i,
            logp,
            complexity_bytes: codec.complexity(x)?,
        });
    }
    let logps: Vec<f64> = rows.iter().map(|r| r.logp).collect();
    let cs: Vec<f64> = rows.iter().map(|r| r.complexity_bytes as f64).collect();
    Ok(LikelihoodStudy {
        pearson_logp_complexity: metrics::pearson(&logps, &cs)?,
        spearman_logp_complexity: metrics::spearman(&logps, &cs)?,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{gaussian_marginal_field, FnField, LinearField, ZeroField};
    use crate::rng;

    #[test]
    fn zero_field_gives_base_density_exactly() {
        let d = 6;
        let mut r = rng::substream(80, "lik-test", 0);
        let x1 = rng::standard_normal_vec(&mut r, d);
        let cfg = LikelihoodConfig {
            n_steps: 32,
            ..Default::default()
        };
        let (logp, x0) = log_likelihood(&ZeroField { dim: d }, &x1, &cfg).unwrap();
        assert_eq!(x0, x1);
        assert!((logp - gaussian_log_density(&x1)).abs() < 1e-12);
    }

    #[test]
    fn marginal_field_reproduces_gaussian_density() {
        // The standardized RF marginal field preserves the standard normal,
        // so logp(x) must equal the Gaussian log-density.
        let d = 8;
        let field = gaussian_marginal_field(d);
        let mut r = rng::substream(81, "lik-test", 0);
        let cfg = LikelihoodConfig {
            n_steps: 256,
            mode: TraceMode::ExactSmallD,
            ..Default::default()
        };
        for _ in 0..5 {
            let x1 = rng::standard_normal_vec(&mut r, d);
            let (logp, _) = log_likelihood(&field, &x1, &cfg).unwrap();
            let want = gaussian_log_density(&x1);
            assert!((logp - want).abs() < 1e-3, "{logp} vs {want}");
        }
    }

    #[test]
    fn hutchinson_expectation_matches_trace_of_linear_field() {
        // Batch estimates with k=100 each; the batch spread gives an honest
        // standard error for the 3-sigma band around Tr(A).
        let d = 8;
        let mut r = rng::substream(82, "lik-test", 0);
        let a = rng::standard_normal_vec(&mut r, d * d);
        let field = LinearField::new(d, a);
        let x = vec![0.0; d];
        let tr = field.trace();
        let batches = 100;
        let ests: Vec<f64> = (0..batches)
            .map(|_| hutchinson_trace(&field, &x, 0.5, 100, &mut r))
            .collect();
        let mean = ests.iter().sum::<f64>() / batches as f64;
        let var =
            ests.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (batches - 1) as f64;
        let se = (var / batches as f64).sqrt();
        assert!(
            (mean - tr).abs() < 3.0 * se,
            "mean {mean} vs trace {tr} (se {se})"
        );
    }

    #[test]
    fn hutchinson_is_exact_for_constant_field() {
        let d = 4;
        let c = vec![1.0, -2.0, 3.0, 0.5];
        let field = FnField::new(d, move |_, _| c.clone());
        let mut r = rng::substream(83, "lik-test", 0);
        let x = rng::standard_normal_vec(&mut r, d);
        let est = hutchinson_trace(&field, &x, 0.2, 3, &mut r);
        assert!(est.abs() < 1e-4, "constant field trace {est}");
    }

    #[test]
    fn hutchinson_k2_varies_by_seed_but_is_unbiased() {
        let d = 6;
        let mut seed_rng = rng::substream(84, "lik-test", 0);
        let a = rng::standard_normal_vec(&mut seed_rng, d * d);
        let field = LinearField::new(d, a);
        let x = vec![0.0; d];
        let tr = field.trace();

        let mut r1 = rng::substream(85, "lik-test", 1);
        let mut r2 = rng::substream(85, "lik-test", 2);
        let e1 = hutchinson_trace(&field, &x, 0.5, 2, &mut r1);
        let e2 = hutchinson_trace(&field, &x, 0.5, 2, &mut r2);
        assert_ne!(e1, e2, "distinct seeds should give distinct estimates");

        let n_pairs = 1000;
        let mut mean = 0.0;
        let mut vals = Vec::with_capacity(n_pairs);
        for i in 0..n_pairs {
            let mut r = rng::substream(86, "lik-test", i as u64);
            let e = hutchinson_trace(&field, &x, 0.5, 2, &mut r);
            mean += e;
            vals.push(e);
        }
        mean /= n_pairs as f64;
        let var: f64 =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n_pairs - 1) as f64;
        let se = (var / n_pairs as f64).sqrt();
        assert!(
            (mean - tr).abs() < 3.0 * se,
            "mean {mean} vs trace {tr} (se {se})"
        );
    }

    #[test]
    fn rk4_convergence_is_fourth_order_on_analytic_field() {
        // v(x, t) = a(t) x with a(t) = 4/(1+3t). The integral of a over
        // [0,1] is (4/3) ln 4, so x0 = x1 exp(-(4/3) ln 4) and
        // logp = logN(x0) - (4/3) ln 4 * D. A non-periodic coefficient is
        // deliberate: periodic integrands superconverge under fixed grids
        // and would mask the h^4 order.
        let d = 5;
        let field = crate::fields::IsotropicField::new(d, |t: f64| 4.0 / (1.0 + 3.0 * t));
        let integral = 4.0 / 3.0 * 4.0f64.ln();
        let mut r = rng::substream(87, "lik-test", 0);
        let x1 = rng::standard_normal_vec(&mut r, d);
        let x0: Vec<f64> = x1.iter().map(|v| v * (-integral).exp()).collect();
        let analytic = gaussian_log_density(&x0) - integral * d as f64;

        let err_at = |n: usize| {
            let cfg = LikelihoodConfig {
                n_steps: n,
                mode: TraceMode::ExactSmallD,
                ..Default::default()
            };
            let (logp, _) = log_likelihood(&field, &x1, &cfg).unwrap();
            (logp - analytic).abs()
        };
        let e64 = err_at(64);
        let e128 = err_at(128);
        let e256 = err_at(256);
        assert!(e256 < 1e-4, "e256 = {e256}");
        assert!((e128 - e256).abs() < 1e-4, "doubling beyond 128 moved logp");
        let ratio = e64 / e128;
        assert!(
            (8.0..=32.0).contains(&ratio),
            "order-4 ratio out of band: {e64}/{e128} = {ratio}"
        );
    }

    #[test]
    fn determinism_given_seed() {
        let d = 4;
        let field = gaussian_marginal_field(d);
        let mut r = rng::substream(88, "lik-test", 0);
        let x1 = rng::standard_normal_vec(&mut r, d);
        let cfg = LikelihoodConfig {
            n_steps: 32,
            seed: 5,
            ..Default::default()
        };
        let a = log_likelihood(&field, &x1, &cfg).unwrap();
        let b = log_likelihood(&field, &x1, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn diverging_field_reports_failing_time() {
        let d = 2;
        let field = FnField::new(d, |x, _| x.iter().map(|v| v * 1e308).collect());
        let cfg = LikelihoodConfig {
            n_steps: 16,
            mode: TraceMode::ExactSmallD,
            ..Default::default()
        };
        match log_likelihood(&field, &[1.0, 1.0], &cfg) {
            Err(Error::NonFinite { t, .. }) => assert!((0.0..=1.0).contains(&t)),
            other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn config_bounds_enforced() {
        let bad = LikelihoodConfig {
            n_steps: 8,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad_k = LikelihoodConfig {
            k_probes: 0,
            ..Default::default()
        };
        assert!(bad_k.validate().is_err());
    }

    #[test]
    fn study_covers_all_nonmembers_and_matches_direct_correlation() {
        use crate::data::{generate, GeneratorConfig};
        let ds = generate(&GeneratorConfig {
            seed: 89,
            n_per_split: 32,
            patch_side: 4,
            f_lo: 0.5,
            f_hi: 2.0,
            noise_floor: 0.1,
        })
        .unwrap();
        let field = ZeroField { dim: ds.dim() };
        let cfg = LikelihoodConfig {
            n_steps: 16,
            mode: TraceMode::ExactSmallD,
            seed: 3,
            ..Default::default()
        };
        let study = likelihood_complexity_study(&field, &ds, &cfg).unwrap();
        assert_eq!(study.rows.len(), ds.nonmembers.len());
        // Zero field: logp is the Gaussian density of the sample itself, so
        // the correlation must match a direct recomputation.
        let logps: Vec<f64> = ds
            .nonmembers
            .iter()
            .map(|x| gaussian_log_density(x))
            .collect();
        let cs: Vec<f64> = study.rows.iter().map(|r| r.complexity_bytes as f64).collect();
        let direct = metrics::pearson(&logps, &cs).unwrap();
        assert!(
            (study.pearson_logp_complexity - direct).abs() < 1e-12,
            "{} vs {direct}",
            study.pearson_logp_complexity
        );
    }
}
