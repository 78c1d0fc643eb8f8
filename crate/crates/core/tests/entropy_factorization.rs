//! Grouped entropies against exhaustive enumeration of the full codebook.

use gqtok::autodiff::{Graph, Precision};
use gqtok::entropy::oracle::oracle_full_entropy;
use gqtok::entropy::{codebook_entropy, entropy_terms, soft_assignment, token_entropy};
use gqtok::quantizer::{group_reshape, Latent, QuantConfig};
use gqtok::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_latent(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> Latent {
    let scale: f64 = rng.gen_range(0.2..2.0);
    let t = Tensor::randn(&[h * w * d], rng).map(|v| v * scale);
    Latent::new(h, w, d, t.into_data()).unwrap()
}

fn divisors(d: usize) -> Vec<usize> {
    (1..=d).filter(|g| d % g == 0).collect()
}

#[test]
fn token_entropy_factorizes_over_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..20 {
        let d = [4, 6, 8][case % 3];
        let u = random_latent(&mut rng, 2, 3, d);
        let tau = rng.gen_range(0.5..2.0);
        let exact = oracle_full_entropy(&u, tau).unwrap();
        for g in divisors(d) {
            let cfg = QuantConfig::new(g, d / g).unwrap();
            let dist = soft_assignment(&group_reshape(&u, &cfg).unwrap(), tau).unwrap();
            let grouped = token_entropy(&dist);
            assert!((grouped - exact.token).abs() <= 1e-9, "d={d} g={g}: {grouped} vs {}", exact.token);
        }
    }
}

#[test]
fn grouped_codebook_entropy_is_an_upper_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..20 {
        let d = [4, 6, 8][case % 3];
        let u = random_latent(&mut rng, 3, 3, d);
        let exact = oracle_full_entropy(&u, 1.0).unwrap();
        for g in divisors(d) {
            let cfg = QuantConfig::new(g, d / g).unwrap();
            let dist = soft_assignment(&group_reshape(&u, &cfg).unwrap(), 1.0).unwrap();
            let grouped = codebook_entropy(&dist);
            if g == 1 {
                assert!((grouped - exact.codebook).abs() <= 1e-9);
            } else {
                assert!(grouped >= exact.codebook - 1e-12, "d={d} g={g}");
            }
        }
    }
}

#[test]
fn per_bit_groups_are_sigmoids() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = random_latent(&mut rng, 2, 2, 5);
    let tau = 0.7;
    let cfg = QuantConfig::new(5, 1).unwrap();
    let dist = soft_assignment(&group_reshape(&u, &cfg).unwrap(), tau).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..5 {
                let p_plus = dist.row(i, j, k)[1];
                let sigma = 1.0 / (1.0 + (-2.0 * u.at(i, j, k) / tau).exp());
                assert!((p_plus - sigma).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn oracle_refuses_large_codebooks() {
    let u = Latent::new(1, 1, 24, vec![0.1; 24]).unwrap();
    assert!(oracle_full_entropy(&u, 1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn graph_route_matches_value_route(seed in 0u64..10_000, g in 1usize..=3, dp in 1usize..=3, h in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = QuantConfig::new(g, dp).unwrap();
        let u = random_latent(&mut rng, h, 2, cfg.channels());
        let dist = soft_assignment(&group_reshape(&u, &cfg).unwrap(), 1.3).unwrap();

        let mut graph = Graph::new(Precision::F64);
        let rows = graph.constant(Tensor::new(vec![h * 2, cfg.channels()], u.values.clone()).unwrap());
        let terms = entropy_terms(&mut graph, rows, &cfg, 1.3).unwrap();
        prop_assert!((graph.value(terms.token).item() - token_entropy(&dist)).abs() <= 1e-10);
        prop_assert!((graph.value(terms.codebook).item() - codebook_entropy(&dist)).abs() <= 1e-10);
        let p = h * 2;
        // the constant code matrix is (d', 2^d'), which can outgrow tiny batches
        prop_assert!(terms.footprint.peak_elements <= (p * g).max(dp) * (1 << dp));
        if g > 1 {
            prop_assert!(!terms.footprint.spans_full_codebook(&cfg));
        }
    }
}
