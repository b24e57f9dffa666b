mod common;

use common::{random_instance, rng, Limits};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use vcmm::estimator::{gibbs_sample, posterior_blocks, GibbsConfig};
use vcmm::model::Partition;
use vcmm::simgen::{generate, mean_sd, ScenarioSpec};
use vcmm::spline::{TensorSplineBasis, UnivariateBasis};
use vcmm::suffstats::compute_local;

const GIBBS_LIMITS: Limits = Limits { max_n: 800, max_fixed: 24, max_q: 8, nodes: &[1, 2] };

#[test]
fn gibbs_mean_matches_the_posterior_mean() {
    let mut r = rng(31);
    for _ in 0..4 {
        let inst = random_instance(&mut r, &GIBBS_LIMITS);
        let agg = inst.aggregate();
        let post = posterior_blocks(&inst.template, &agg).unwrap();
        let chain = gibbs_sample(
            &inst.template.variance,
            &inst.template.penalty,
            &agg,
            &GibbsConfig { n_iter: 150_000, burn_in: 1000, seed: 9 },
        )
        .unwrap();
        let mu = post.mu();
        let mean = chain.mean();
        let mcse = chain.mcse(10);
        let sd = post.precision().try_inverse().unwrap().diagonal().map(f64::sqrt);
        for i in 0..mu.len() {
            assert!(
                (mean[i] - mu[i]).abs() <= 5.0 * mcse[i] + 0.02 * sd[i],
                "coordinate {i}: {} vs {}",
                mean[i],
                mu[i]
            );
        }
        let ratio = chain.sample_sd().component_div(&sd);
        assert!(ratio.iter().all(|r| (0.8..1.25).contains(r)), "{ratio}");
    }
}

#[test]
fn gibbs_is_seeded_and_ergodic_means_settle() {
    let mut r = rng(32);
    let inst = random_instance(&mut r, &GIBBS_LIMITS);
    let agg = inst.aggregate();
    let cfg = GibbsConfig { n_iter: 3000, burn_in: 200, seed: 5 };
    let a = gibbs_sample(&inst.template.variance, &inst.template.penalty, &agg, &cfg).unwrap();
    let b = gibbs_sample(&inst.template.variance, &inst.template.penalty, &agg, &cfg).unwrap();
    assert_eq!(a.draws, b.draws);
    let c =
        gibbs_sample(&inst.template.variance, &inst.template.penalty, &agg, &GibbsConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(a.draws, c.draws);

    let mu = posterior_blocks(&inst.template, &agg).unwrap().mu();
    let err = |m: &DVector<f64>| (m - &mu).amax();
    let (mut early, mut late) = (0.0, 0.0);
    for seed in 0..6 {
        let chain = gibbs_sample(
            &inst.template.variance,
            &inst.template.penalty,
            &agg,
            &GibbsConfig { n_iter: 20_000, burn_in: 200, seed },
        )
        .unwrap();
        let running = chain.running_means();
        early += err(&running[499]);
        late += err(&running[running.len() - 1]);
    }
    assert!(late < 0.5 * early, "{late} vs {early}");
}

/// Per-node `(1/n_k) W_k^T W_k` for `k` nodes of `n_k` rows each.
fn normalized_grams(
    rng: &mut impl Rng,
    basis: &TensorSplineBasis,
    k: usize,
    n_k: usize,
    q: usize,
) -> Vec<DMatrix<f64>> {
    (0..k)
        .map(|id| {
            let x = DMatrix::from_fn(n_k, 1, |_, _| rng.random_range(-1.0..1.0));
            let h = DMatrix::from_fn(n_k, 1, |_, _| rng.random::<f64>());
            let mut z = DMatrix::zeros(n_k, q);
            for i in 0..n_k {
                z[(i, rng.random_range(0..q))] = 1.0;
            }
            let part = Partition { id: id as u32, y: DVector::zeros(n_k), x, h, z };
            compute_local(&part, basis).unwrap().gram() / n_k as f64
        })
        .collect()
}

#[test]
fn averaged_node_curvature_concentrates() {
    let basis = TensorSplineBasis::univariate(UnivariateBasis::uniform(8, 3).unwrap());
    let (n_k, q) = (400, 6);
    let mut r = rng(33);
    let reference = {
        let grams = normalized_grams(&mut r, &basis, 500, n_k, q);
        grams.iter().fold(DMatrix::zeros(grams[0].nrows(), grams[0].ncols()), |a, g| a + g) / grams.len() as f64
    };
    let deviation = |k: usize, r: &mut rand_chacha::ChaCha8Rng| {
        let devs: Vec<f64> = (0..8)
            .map(|_| {
                let grams = normalized_grams(r, &basis, k, n_k, q);
                let avg =
                    grams.iter().fold(DMatrix::zeros(reference.nrows(), reference.ncols()), |a, g| a + g) / k as f64;
                (avg - &reference).amax()
            })
            .collect();
        mean_sd(&devs).0
    };
    let devs: Vec<f64> = [4, 16, 64].iter().map(|&k| deviation(k, &mut r)).collect();
    assert!(devs.windows(2).all(|w| w[1] < w[0]), "{devs:?}");
    assert!(devs[2] < 0.5 * devs[0], "{devs:?}");
}

#[test]
fn generated_data_follow_the_scenario() {
    let spec = ScenarioSpec::example(1).unwrap().with_n(20_000).with_seed(3);
    let data = generate(&spec).unwrap();
    let pooled = data.pooled().unwrap();
    let n = pooled.n_rows();
    assert_eq!(n + data.test.n_rows(), spec.n);
    assert_eq!(data.partitions.len(), spec.k);

    let h: Vec<f64> = pooled.h.column(0).iter().copied().collect();
    let (mean_h, sd_h) = mean_sd(&h);
    assert!((mean_h - 0.5).abs() < 0.01 && (sd_h - (1.0f64 / 12.0).sqrt()).abs() < 0.01);

    let counts = pooled.z.row_sum();
    let expected = n as f64 / spec.n_random() as f64;
    assert!(counts.iter().all(|&c| (c - expected).abs() <= 0.1 * expected), "{counts}");
    assert!(pooled.z.row_iter().all(|row| row.sum() == 1.0));

    let truth = &data.truth;
    let alpha = DVector::from_vec(truth.alpha.clone());
    let residuals: Vec<f64> = (0..n)
        .map(|i| {
            let hi = [pooled.h[(i, 0)]];
            let signal = truth.coefficient(0, &hi) + truth.coefficient(1, &hi) * pooled.x[(i, 0)];
            pooled.y[i] - signal - (pooled.z.row(i) * &alpha)[0]
        })
        .collect();
    let (mean_e, sd_e) = mean_sd(&residuals);
    assert!(mean_e.abs() < 4.0 * spec.noise_sd / (n as f64).sqrt());
    assert!((sd_e / spec.noise_sd - 1.0).abs() < 0.03, "{sd_e}");
}

#[test]
fn random_effects_have_the_stated_spread() {
    let mut draws = Vec::new();
    let mut r = rng(34);
    let spec = ScenarioSpec::example(2).unwrap();
    for _ in 0..50 {
        draws.extend(spec.sample_alpha(&mut r).iter().copied());
    }
    let (mean, sd) = mean_sd(&draws);
    assert!(mean.abs() < 0.02, "{mean}");
    assert!((sd / spec.sigma_alpha - 1.0).abs() < 0.03, "{sd}");

    let q = spec.n_random();
    let lag1: Vec<f64> = draws.chunks(q).flat_map(|a| a.windows(2).map(|w| w[0] * w[1]).collect::<Vec<_>>()).collect();
    let rho = mean_sd(&lag1).0 / (spec.sigma_alpha * spec.sigma_alpha);
    assert!((rho - spec.correlation).abs() < 0.03, "{rho}");
}
