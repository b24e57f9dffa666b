#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcmm::model::{ModelDims, ModelParams, Partition, Penalty, PenaltySpec, RandomEffectCov, VarianceComponents};
use vcmm::spline::{TensorSplineBasis, UnivariateBasis};
use vcmm::suffstats::{aggregate, compute_local, SuffStats};

pub struct Instance {
    pub partitions: Vec<Partition>,
    pub basis: TensorSplineBasis,
    pub dims: ModelDims,
    pub template: ModelParams,
}

impl Instance {
    pub fn stats(&self) -> Vec<SuffStats> {
        self.partitions.iter().map(|p| compute_local(p, &self.basis).unwrap()).collect()
    }

    pub fn aggregate(&self) -> SuffStats {
        aggregate(&self.stats()).unwrap()
    }
}

pub struct Limits {
    pub max_n: usize,
    pub max_fixed: usize,
    pub max_q: usize,
    pub nodes: &'static [usize],
}

pub const SMALL: Limits = Limits { max_n: 2000, max_fixed: 60, max_q: 40, nodes: &[1, 2, 4, 8] };

/// A random mixed-model instance within `limits`: one or two index
/// variables, a grouped or dense random-effect design, a random
/// covariance structure and penalty.
pub fn random_instance(rng: &mut ChaCha8Rng, limits: &Limits) -> Instance {
    let n_index = if rng.random_bool(0.3) { 2 } else { 1 };
    let (basis, basis_size) = loop {
        let sizes: Vec<usize> = (0..n_index).map(|_| rng.random_range(4..=8)).collect();
        let q: usize = sizes.iter().product();
        let p = rng.random_range(0..=3usize);
        if (p + 1) * q <= limits.max_fixed {
            let margins = sizes.iter().map(|&s| UnivariateBasis::uniform(s, 3).unwrap()).collect();
            break ((TensorSplineBasis::new(margins).unwrap(), p), q);
        }
    };
    let (basis, p) = basis;
    let n_random = rng.random_range(1..=limits.max_q);
    let k = limits.nodes[rng.random_range(0..limits.nodes.len())];
    let n = rng.random_range((20 * k).max(100)..=limits.max_n);
    let grouped = rng.random_bool(0.6);

    let beta_true = DVector::from_fn((p + 1) * basis_size, |_, _| rng.random_range(-1.0..1.0));
    let alpha_true = DVector::from_fn(n_random, |_, _| rng.random_range(-0.7..0.7));
    let noise = rng.random_range(0.1..0.6);
    let rows: Vec<usize> = split(n, k);
    let mut partitions = Vec::with_capacity(k);
    for (id, &nk) in rows.iter().enumerate() {
        let x = DMatrix::from_fn(nk, p, |_, _| rng.random_range(-1.0..1.0));
        let h = DMatrix::from_fn(nk, n_index, |_, _| rng.random::<f64>());
        let z = if grouped {
            let mut z = DMatrix::zeros(nk, n_random);
            for i in 0..nk {
                z[(i, rng.random_range(0..n_random))] = 1.0;
            }
            z
        } else {
            DMatrix::from_fn(nk, n_random, |_, _| rng.random_range(-1.0..1.0))
        };
        let mut part = Partition { id: id as u32, y: DVector::zeros(nk), x, h, z };
        let design = vcmm::spline::expand_design(&part.x, &part.h, &basis).unwrap();
        let eps = DVector::from_fn(nk, |_, _| noise * rng.random_range(-1.7..1.7));
        part.y = &design * &beta_true + &part.z * &alpha_true + eps;
        partitions.push(part);
    }

    let dims = ModelDims::new(p, basis_size, n_random, n_index, k, n).unwrap();
    let cov = match rng.random_range(0..3) {
        0 => RandomEffectCov::isotropic(rng.random_range(0.1..2.0)),
        1 if n_random >= 2 => {
            let first = rng.random_range(1..n_random);
            RandomEffectCov::block_isotropic(&[
                (first, rng.random_range(0.1..2.0)),
                (n_random - first, rng.random_range(0.1..2.0)),
            ])
        }
        _ => {
            let a = DMatrix::from_fn(n_random, n_random, |_, _| rng.random_range(-0.5..0.5));
            RandomEffectCov::full(&a * a.transpose() + DMatrix::identity(n_random, n_random) * 0.3, 0.0)
        }
    };
    let lambda = 10f64.powf(rng.random_range(-3.0..1.0));
    let spec = if rng.random_bool(0.5) {
        PenaltySpec::ridge(lambda)
    } else if n_index == 1 {
        PenaltySpec::second_difference(lambda)
    } else {
        let sizes: Vec<usize> = basis.margins().iter().map(|m| m.len()).collect();
        PenaltySpec::tensor_second_difference(lambda, &sizes)
    };
    let penalty = Penalty::new(spec, &dims).unwrap();
    let variance = VarianceComponents::new(noise * noise, cov);
    let template = ModelParams::zeros(&dims, variance, penalty).unwrap();
    Instance { partitions, basis, dims, template }
}

/// Row counts for `k` near-equal partitions of `n`.
pub fn split(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Largest coordinate difference relative to the larger of the two
/// sup-norms (at least one).
pub fn rel_sup_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(a.amax()).max(1.0)
}
