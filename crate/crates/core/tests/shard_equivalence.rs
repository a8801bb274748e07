use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sicot_core::shard::{dense_ce, equivalence_check, ShardSet};
use sicot_core::Tensor;

fn random_head(rng: &mut ChaCha8Rng, c: usize, d: usize, scale: f64) -> (Tensor, Vec<f64>, Vec<f64>) {
    let w: Vec<f64> = (0..c * d).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    (Tensor::new(vec![c, d], w).unwrap(), b, x)
}

#[test]
fn shard_counts_agree_with_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let (w, b, x) = random_head(&mut rng, 60, 8, 1.0);
        let label = rng.random_range(0..60);
        let rep = equivalence_check(&w, &b, &x, label, &[1, 3, 7, 60], 3).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}

#[test]
fn extreme_logits_stay_finite() {
    // Logits spanning roughly ±700: naive exp overflows, the shifted
    // reduction does not.
    let c = 50;
    let bias: Vec<f64> = (0..c).map(|i| -700.0 + 1400.0 * i as f64 / (c - 1) as f64).collect();
    let w = Tensor::zeros(vec![c, 4]);
    let x = [0.1, 0.2, 0.3, 0.4];
    for label in [0, 25, 49] {
        let rep = equivalence_check(&w, &bias, &x, label, &[1, 3, 7, 50], 3).unwrap();
        assert!(rep.passed(), "{rep:?}");
        let out = ShardSet::from_dense(&w, &bias, 7).unwrap().sharded_ce(&x, label).unwrap();
        assert!(out.loss.is_finite());
    }
    let low = ShardSet::from_dense(&w, &bias, 3).unwrap().sharded_ce(&x, 0).unwrap();
    assert!((low.loss - 1400.0).abs() < 1e-9);
}

#[test]
fn reductions_are_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (w, b, x) = random_head(&mut rng, 101, 16, 2.0);
    let set = ShardSet::from_dense(&w, &b, 7).unwrap();
    let a = set.sharded_ce(&x, 33).unwrap();
    let again = set.sharded_ce(&x, 33).unwrap();
    assert_eq!(a, again);
    assert_eq!(a.summary.dump(), again.summary.dump());
    let max = a.summary.per_shard.iter().map(|s| s.local_max).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(max, a.summary.global_max);
    assert!(a.summary.global_expsum > 0.0);
}

#[test]
fn shards_only_hold_their_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (w, b, _) = random_head(&mut rng, 10, 3, 1.0);
    let set = ShardSet::from_dense(&w, &b, 3).unwrap();
    let sizes: Vec<usize> = set.shards.iter().map(|s| s.weight.shape()[0]).collect();
    assert_eq!(sizes, vec![4, 3, 3]);
    assert_eq!(set.shards[1].weight.row(0), w.row(4));
    assert_eq!(set.shards[2].bias, b[7..].to_vec());
}

#[test]
fn input_gradient_matches_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (w, b, x) = random_head(&mut rng, 30, 5, 1.0);
    let dense = dense_ce(&w, &b, &x, 11).unwrap();
    let out = ShardSet::from_dense(&w, &b, 4).unwrap().sharded_ce(&x, 11).unwrap();
    for (a, e) in out.input_grad.iter().zip(&dense.input_grad) {
        assert!((a - e).abs() <= 1e-12);
    }
}
