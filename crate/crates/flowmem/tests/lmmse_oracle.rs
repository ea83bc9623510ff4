//! Monte-Carlo oracles for the closed-form LMMSE baseline: optimality among
//! perturbed affine predictors and agreement of the theoretical cross
//! covariance with simulation.

use flowmem::lmmse::{cross_covariance_schedule, estimate_moments};
use flowmem::rng;
use rand::Rng;

/// Random mean plus SPD covariance via A A^T / d + 0.3 I.
fn random_moments(d: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng::substream(seed, "lmmse-oracle", 0);
    let a = rng::standard_normal_vec(&mut r, d * d);
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[i * d + k] * a[j * d + k];
            }
            cov[i * d + j] = s / d as f64;
        }
        cov[i * d + i] += 0.3;
    }
    let mean = rng::standard_normal_vec(&mut r, d);
    (mean, cov)
}

fn cholesky_lower(a: &[f64], d: usize) -> Vec<f64> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    l
}

fn sample_x1(mean: &[f64], l: &[f64], d: usize, r: &mut impl Rng) -> Vec<f64> {
    let z = rng::standard_normal_vec(r, d);
    (0..d)
        .map(|i| {
            mean[i]
                + (0..=i)
                    .map(|k| l[i * d + k] * z[k])
                    .sum::<f64>()
        })
        .collect()
}

/// Monte-Carlo objective E||v - (W x_t + b)||^2 over paired draws.
fn mc_objective(
    w: &[f64],
    b: &[f64],
    mean: &[f64],
    l: &[f64],
    t: f64,
    d: usize,
    n: usize,
    seed: u64,
) -> Vec<f64> {
    let mut r = rng::substream(seed, "lmmse-objective", 0);
    let mut per_sample = Vec::with_capacity(n);
    for _ in 0..n {
        let x1 = sample_x1(mean, l, d, &mut r);
        let x0 = rng::standard_normal_vec(&mut r, d);
        let xt: Vec<f64> = x1
            .iter()
            .zip(&x0)
            .map(|(a, c)| t * a + (1.0 - t) * c)
            .collect();
        let v: Vec<f64> = x1.iter().zip(&x0).map(|(a, c)| a - c).collect();
        let mut err = 0.0;
        for i in 0..d {
            let pred: f64 =
                b[i] + (0..d).map(|j| w[i * d + j] * xt[j]).sum::<f64>();
            err += (v[i] - pred) * (v[i] - pred);
        }
        per_sample.push(err);
    }
    per_sample
}

#[test]
fn closed_form_beats_all_perturbations() {
    // No perturbed (W* + dW, b* + db) may achieve a lower Monte-Carlo
    // objective than the closed form beyond 3 sigma of the paired
    // difference estimate.
    let d = 6;
    let t = 0.45;
    let (mean, cov) = random_moments(d, 7);
    let l = cholesky_lower(&cov, d);

    // Fit the closed form from a big simulated member cloud so the moments
    // path is the production one.
    let mut r = rng::substream(8, "lmmse-cloud", 0);
    let cloud: Vec<Vec<f64>> = (0..60_000).map(|_| sample_x1(&mean, &l, d, &mut r)).collect();
    let moments = estimate_moments(&cloud, 1e-8).unwrap();
    let star = moments.predictor_at(t).unwrap();

    let n = 100_000;
    let base = mc_objective(&star.w, &star.b, &mean, &l, t, d, n, 99);
    let mut rp = rng::substream(9, "lmmse-perturb", 0);
    for trial in 0..100 {
        let scale = if trial % 2 == 0 { 0.02 } else { 0.2 };
        let w: Vec<f64> = star
            .w
            .iter()
            .map(|v| v + scale * rng::standard_normal(&mut rp))
            .collect();
        let b: Vec<f64> = star
            .b
            .iter()
            .map(|v| v + scale * rng::standard_normal(&mut rp))
            .collect();
        let pert = mc_objective(&w, &b, &mean, &l, t, d, n, 99);
        // Paired comparison on identical draws.
        let diffs: Vec<f64> = base.iter().zip(&pert).map(|(a, p)| p - a).collect();
        let md = diffs.iter().sum::<f64>() / n as f64;
        let var = diffs.iter().map(|x| (x - md) * (x - md)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            md > -3.0 * se,
            "perturbation {trial} beat the closed form: diff {md} (se {se})"
        );
    }
}

#[test]
fn empirical_cross_covariance_matches_schedule() {
    // Standardized data: Sigma_{v, x_t} should be (2t-1) I within Monte
    // Carlo error.
    let d = 6;
    let n = 1_000_000;
    for &t in &[0.5, 0.8] {
        let mut r = rng::substream(10, "lmmse-cov", (t * 10.0) as u64);
        let mut acc = vec![0.0; d * d];
        for _ in 0..n {
            let x1 = rng::standard_normal_vec(&mut r, d);
            let x0 = rng::standard_normal_vec(&mut r, d);
            for i in 0..d {
                let v = x1[i] - x0[i];
                for j in 0..d {
                    acc[i * d + j] += v * (t * x1[j] + (1.0 - t) * x0[j]);
                }
            }
        }
        for v in &mut acc {
            *v /= n as f64;
        }
        let want = cross_covariance_schedule(t, d);
        // Entry variance of the product terms is O(1); 3 sigma with a small
        // cushion for the off-diagonal structure.
        let se = (3.0 / (n as f64).sqrt()) * 3.0;
        for i in 0..d * d {
            assert!(
                (acc[i] - want[i]).abs() < se,
                "t={t} entry {i}: {} vs {}",
                acc[i],
                want[i]
            );
        }
    }
}
