//! Server-side proxy target construction.
//!
//! The server cannot see target data, so it manufactures a stand-in: pairs
//! of source examples averaged together, then re-weighted per client by how
//! well each mixed example matches that client's feature-distribution
//! summary.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::density::{confidence_weights, GmmParams};
use crate::nn::{forward_features, ModelParams};
use crate::tensor::{add, scale, Tensor};

/// A batch of pairwise-averaged source examples plus the index pairs that
/// produced each row.
#[derive(Clone, Debug)]
pub struct ProxyBatch {
    pub inputs: Tensor,
    pub provenance: Vec<(usize, usize)>,
}

/// Elementwise midpoint of two equally-shaped examples.
pub fn mixup_pair(x_m: &Tensor, x_n: &Tensor) -> Tensor {
    scale(&add(x_m, x_n), 0.5)
}

/// Pairs every row of the batch with a distinct, seeded-random partner and
/// emits the midpoints. Deterministic per seed.
pub fn build_proxy_batch(source_batch: &Tensor, rng_seed: u64) -> ProxyBatch {
    let b = source_batch.rows();
    assert!(b >= 2, "proxy construction needs at least 2 source examples, got {}", b);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut partner: Vec<usize> = (0..b).collect();
    partner.shuffle(&mut rng);
    // Repair self-pairings: swapping with the next slot cannot create a new
    // fixed point, so one ascending pass suffices.
    for i in 0..b {
        if partner[i] == i {
            partner.swap(i, (i + 1) % b);
        }
    }

    let d = source_batch.cols();
    let mut data = Vec::with_capacity(b * d);
    let mut provenance = Vec::with_capacity(b);
    for (m, &n) in partner.iter().enumerate() {
        debug_assert_ne!(m, n);
        let xm = source_batch.row(m);
        let xn = source_batch.row(n);
        data.extend(xm.iter().zip(xn).map(|(a, b)| (a + b) / 2.0));
        provenance.push((m, n));
    }
    ProxyBatch { inputs: Tensor::new(vec![b, d], data), provenance }
}

/// Confidence of each proxy example under a client's density summary,
/// evaluated on the shared extractor's features.
pub fn weight_proxy(gmm_t: &GmmParams, g: &ModelParams, proxy: &ProxyBatch) -> Tensor {
    confidence_weights(gmm_t, &forward_features(g, &proxy.inputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::fit_gmm;
    use crate::nn::Activation;
    use rand::Rng;

    #[test]
    fn mixup_of_identical_inputs_is_identity() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]);
        assert_eq!(mixup_pair(&x, &x), x);
    }

    #[test]
    fn mixup_direct_arithmetic() {
        let a = Tensor::new(vec![2], vec![0.0, 2.0]);
        let b = Tensor::new(vec![2], vec![2.0, 0.0]);
        assert_eq!(mixup_pair(&a, &b).data(), &[1.0, 1.0]);
    }

    #[test]
    fn mixup_of_opposites_is_zero() {
        let x = Tensor::new(vec![3], vec![1.5, -0.5, 2.0]);
        let nx = scale(&x, -1.0);
        assert_eq!(mixup_pair(&x, &nx), Tensor::zeros(vec![3]));
    }

    #[test]
    fn two_example_batch_uses_the_single_distinct_pair() {
        let batch = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 4.0]]);
        let proxy = build_proxy_batch(&batch, 7);
        assert_eq!(proxy.provenance, vec![(0, 1), (1, 0)]);
        for r in 0..2 {
            assert_eq!(proxy.inputs.row(r), &[1.0, 2.0]);
        }
    }

    #[test]
    fn identical_rows_produce_identical_proxies() {
        let batch = Tensor::from_rows(&vec![vec![3.0, -1.0]; 5]);
        let proxy = build_proxy_batch(&batch, 0);
        for r in 0..5 {
            assert_eq!(proxy.inputs.row(r), &[3.0, -1.0]);
        }
    }

    #[test]
    fn pairing_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = Tensor::new(vec![8, 3], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect());
        let a = build_proxy_batch(&batch, 99);
        let b = build_proxy_batch(&batch, 99);
        assert_eq!(a.provenance, b.provenance);
        assert_eq!(a.inputs, b.inputs);
        let c = build_proxy_batch(&batch, 100);
        assert!(c.provenance != a.provenance || c.inputs == a.inputs);
    }

    #[test]
    fn no_example_pairs_with_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for b in 2..20 {
            let batch =
                Tensor::new(vec![b, 2], (0..b * 2).map(|_| rng.random_range(-1.0..1.0)).collect());
            for seed in 0..10 {
                let proxy = build_proxy_batch(&batch, seed);
                for &(m, n) in &proxy.provenance {
                    assert_ne!(m, n, "b={} seed={}", b, seed);
                }
            }
        }
    }

    #[test]
    fn proxies_lie_between_their_parents_coordinatewise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = Tensor::new(vec![9, 4], (0..36).map(|_| rng.random_range(-2.0..2.0)).collect());
        let proxy = build_proxy_batch(&batch, 5);
        for (r, &(m, n)) in proxy.provenance.iter().enumerate() {
            for j in 0..4 {
                let (a, b) = (batch.at(m, j), batch.at(n, j));
                let p = proxy.inputs.at(r, j);
                assert!(p >= a.min(b) - 1e-12 && p <= a.max(b) + 1e-12);
                assert!((p - (a + b) / 2.0).abs() < 1e-15);
            }
        }
    }

    fn identity_extractor(d: usize) -> ModelParams {
        let mut m = ModelParams::glorot(&[d, d], Activation::Relu, 0);
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        m.layers[0].weight = Tensor::new(vec![d, d], eye);
        m
    }

    #[test]
    fn weights_cover_unit_range_on_self_fitted_gmm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = Tensor::new(vec![10, 2], (0..20).map(|_| rng.random_range(-1.0..1.0)).collect());
        let proxy = build_proxy_batch(&batch, 6);
        let g = identity_extractor(2);
        let gmm = fit_gmm(&forward_features(&g, &proxy.inputs), 1, 3).unwrap();
        let w = weight_proxy(&gmm, &g, &proxy);
        let max = w.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(max, 1.0);
        assert!(w.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn single_proxy_example_gets_weight_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fit = Tensor::new(vec![12, 2], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect());
        let g = identity_extractor(2);
        let gmm = fit_gmm(&forward_features(&g, &fit), 1, 4).unwrap();
        let proxy = ProxyBatch {
            inputs: Tensor::from_rows(&[vec![0.3, 0.4]]),
            provenance: vec![(0, 1)],
        };
        assert_eq!(weight_proxy(&gmm, &g, &proxy).data(), &[1.0]);
    }

    #[test]
    fn weight_ordering_follows_distance_to_fitted_cluster() {
        // Mixture fitted around the first proxy point; the far-away second
        // point must get the lower (zero) weight.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let near: Vec<Vec<f64>> =
            (0..20).map(|_| vec![rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)]).collect();
        let g = identity_extractor(2);
        let gmm = fit_gmm(&forward_features(&g, &Tensor::from_rows(&near)), 1, 5).unwrap();
        let proxy = ProxyBatch {
            inputs: Tensor::from_rows(&[vec![0.0, 0.0], vec![8.0, 8.0]]),
            provenance: vec![(0, 1), (1, 0)],
        };
        assert_eq!(weight_proxy(&gmm, &g, &proxy).data(), &[1.0, 0.0]);
    }
}
