//! Closed forms and Monte-Carlo oracles.

use klprior::diffcore::MlpParams;
use klprior::gp::{fit_kernel, GpFitConfig, GpPosterior, KernelKind, KernelSpec};
use klprior::klreg::{kl_closed_form, kl_gaussian_diag, kl_mc};
use klprior::numeric::{gaussian_log_density, softplus};
use klprior::policies::{EnsemblePolicy, EnsembleSource, MleReg, OnlinePolicy, RefPolicy, VARIANCE_FLOOR};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Network whose output is `bias` for every input.
fn constant_net(d: usize, bias: &[f64]) -> MlpParams {
    let mut net = MlpParams::zeros(&[d, 2, bias.len()]).unwrap();
    net.layers_mut().last_mut().unwrap().bias.copy_from_slice(bias);
    net
}

/// Raw head output giving variance `v` after softplus and the floor.
fn raw_for_variance(v: f64) -> f64 {
    ((v - VARIANCE_FLOOR).exp() - 1.0).ln()
}

fn gaussian_reference(mu: &[f64], var: &[f64]) -> RefPolicy {
    let mut bias = mu.to_vec();
    bias.extend(var.iter().map(|v| raw_for_variance(*v)));
    RefPolicy::Mle {
        net: constant_net(2, &bias),
        reg: MleReg::None,
    }
}

#[test]
fn blow_up_formula() {
    let v = kl_gaussian_diag(&[0.0], &[1.0], &[0.0], &[1e-3]).unwrap();
    let expected = 0.5 * (1e3 - 1.0 + 1e-3f64.ln());
    assert!(((v - expected) / expected).abs() < 1e-6);
}

#[test]
fn small_variance_log_density() {
    // −½log(2π·1e-3) − 1/(2·1e-3)
    let lp = gaussian_log_density(1.0, 0.0, 1e-3);
    assert!((lp - (-497.465)).abs() < 1e-3, "{lp}");
}

#[test]
fn monte_carlo_kl_agrees_with_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    for pair in 0..50 {
        let mu: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ls: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5f64..0.3)).collect();
        let mu0: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let var0: Vec<f64> = (0..2).map(|_| rng.random_range(0.05..2.0)).collect();
        let mut bias = mu.clone();
        bias.extend(&ls);
        let online = OnlinePolicy::from_parts(constant_net(2, &bias), vec![0.0; 2], vec![1.0; 2], false).unwrap();
        let reference = gaussian_reference(&mu0, &var0);
        let s = [0.1, -0.2];
        let exact = kl_closed_form(&online, &reference, &s).unwrap().value;
        let var: Vec<f64> = ls.iter().map(|l| (2.0 * l).exp()).collect();
        assert!((exact - kl_gaussian_diag(&mu, &var, &mu0, &var0).unwrap()).abs() < 1e-9);
        let est = kl_mc(&online, &reference, &s, 100_000, pair).unwrap();
        let z = (est.value - exact).abs() / est.std_error.unwrap();
        worst = worst.max(z);
    }
    assert!(worst < 3.0, "largest deviation {worst} standard errors");
}

#[test]
fn ensemble_moments_match_mixture_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..4 {
        let members: Vec<MlpParams> = (0..5).map(|_| MlpParams::new(&[3, 8, 4], &mut rng).unwrap()).collect();
        let ens = RefPolicy::Ensemble(EnsemblePolicy::new(members.clone(), EnsembleSource::Members).unwrap());
        let s: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (mean, var) = ens.moments(&s).unwrap();
        let heads: Vec<(Vec<f64>, Vec<f64>)> = members
            .iter()
            .map(|m| {
                let out = m.forward(&s).unwrap();
                (out[..2].to_vec(), out[2..].iter().map(|r| softplus(*r) + VARIANCE_FLOOR).collect())
            })
            .collect();
        let n = 100_000;
        for dim in 0..2 {
            let draws: Vec<f64> = (0..n)
                .map(|_| {
                    let (mu, v) = &heads[rng.random_range(0..5)];
                    mu[dim] + v[dim].sqrt() * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            let m = draws.iter().sum::<f64>() / n as f64;
            let c2: Vec<f64> = draws.iter().map(|x| (x - m) * (x - m)).collect();
            let v = c2.iter().sum::<f64>() / (n - 1) as f64;
            let m4 = c2.iter().map(|x| x * x).sum::<f64>() / n as f64;
            let se_mean = (v / n as f64).sqrt();
            let se_var = ((m4 - v * v) / n as f64).sqrt();
            assert!((m - mean[dim]).abs() < 3.0 * se_mean, "trial {trial} dim {dim}: mean {m} vs {}", mean[dim]);
            assert!((v - var[dim]).abs() < 3.0 * se_var, "trial {trial} dim {dim}: var {v} vs {}", var[dim]);
        }
    }
}

#[test]
fn gp_interpolates_at_tiny_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s: DMatrix<f64> = DMatrix::from_fn(15, 2, |_, _| rng.random_range(-1.0..1.0));
    let a = DMatrix::from_fn(15, 1, |r, _| (3.0 * s[(r, 0)]).sin() * s[(r, 1)]);
    let k = KernelSpec::new(KernelKind::SquaredExponential, vec![0.5, 0.5], 1.0, 1e-6).unwrap();
    let gp = GpPosterior::condition_raw(vec![k], &s, &a).unwrap();
    for r in 0..15 {
        let (m, _) = gp.predict(&[s[(r, 0)], s[(r, 1)]]).unwrap();
        assert!((m[0] - a[(r, 0)]).abs() < 1e-3);
    }
}

#[test]
fn gp_reverts_to_prior_far_away() {
    let s = DMatrix::from_row_slice(3, 1, &[0.0, 0.2, -0.3]);
    let a = DMatrix::from_row_slice(3, 1, &[1.0, 0.5, -0.2]);
    for kind in [KernelKind::SquaredExponential, KernelKind::Matern52] {
        let k = KernelSpec::new(kind, vec![0.4], 1.5, 0.01).unwrap();
        let gp = GpPosterior::condition_raw(vec![k], &s, &a).unwrap();
        let (_, v) = gp.predict(&[0.2 + 10.0 * 0.4]).unwrap();
        assert!(v[0] > 0.99 * (1.5 + 0.01), "{kind:?}: {}", v[0]);
    }
}

#[test]
fn gp_two_points_closed_form() {
    let (x1, x2, y1, y2) = (0.1, 0.7, 0.4, -0.3);
    let (l, sf2, sn2) = (0.5, 1.2, 0.05);
    let k = KernelSpec::new(KernelKind::SquaredExponential, vec![l], sf2, sn2).unwrap();
    let s = DMatrix::from_row_slice(2, 1, &[x1, x2]);
    let a = DMatrix::from_row_slice(2, 1, &[y1, y2]);
    let gp = GpPosterior::condition_raw(vec![k], &s, &a).unwrap();
    let kf = |p: f64, q: f64| sf2 * (-(p - q) * (p - q) / (2.0 * l * l)).exp();
    let (a11, a12, a22) = (kf(x1, x1) + sn2, kf(x1, x2), kf(x2, x2) + sn2);
    let det = a11 * a22 - a12 * a12;
    let inv = [[a22 / det, -a12 / det], [-a12 / det, a11 / det]];
    let x = 0.35;
    let ks = [kf(x, x1), kf(x, x2)];
    let w = [inv[0][0] * y1 + inv[0][1] * y2, inv[1][0] * y1 + inv[1][1] * y2];
    let mean = ks[0] * w[0] + ks[1] * w[1];
    let quad = ks[0] * (inv[0][0] * ks[0] + inv[0][1] * ks[1]) + ks[1] * (inv[1][0] * ks[0] + inv[1][1] * ks[1]);
    let var = sf2 - quad + sn2;
    let (m, v) = gp.predict(&[x]).unwrap();
    assert!((m[0] - mean).abs() < 1e-10);
    assert!((v[0] - var).abs() < 1e-10);
}

#[test]
fn lengthscale_recovered_from_prior_draws() {
    let true_l = 0.7;
    let truth = KernelSpec::new(KernelKind::SquaredExponential, vec![true_l], 1.0, 0.01).unwrap();
    let mut total = 0.0;
    let seeds = 3;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = 200;
        let inputs: DMatrix<f64> = DMatrix::from_fn(1, n, |_, _| rng.random_range(-5.0..5.0));
        let mut cov = truth.gram(&inputs);
        for i in 0..n {
            cov[(i, i)] += 0.01 + 1e-9;
        }
        let l = cov.cholesky().unwrap().l();
        let z = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
        let y = l * z;
        let fit = fit_kernel(KernelKind::SquaredExponential, &inputs, &y, &GpFitConfig::default()).unwrap();
        total += fit.lengthscales[0];
    }
    let mean_l = total / seeds as f64;
    assert!((mean_l - true_l).abs() < 0.5 * true_l, "mean fitted lengthscale {mean_l}");
}
