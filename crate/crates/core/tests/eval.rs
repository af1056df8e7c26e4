use meanflow_cv::datasets::{DatasetKind, DatasetSpec};
use meanflow_cv::eval::*;
use meanflow_cv::trainer::{TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, d: usize, mean: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..d)
                .map(|i| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mean[i] + z
                })
                .collect()
        })
        .collect()
}

fn cfg(n_projections: usize) -> SwConfig {
    SwConfig {
        n_projections,
        ..SwConfig::default()
    }
}

#[test]
fn one_dimension_is_the_sorted_matching_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..200).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..3.0f64).powi(2)).collect();
    let (mut sa, mut sb) = (a.clone(), b.clone());
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let w1 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / 200.0;
    let w2 = (sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 200.0).sqrt();
    let pair = sliced_wasserstein_flat(&a, &b, 1, &cfg(7)).unwrap();
    assert!((pair.sw1 - w1).abs() < 1e-12);
    assert!((pair.sw2 - w2).abs() < 1e-12);
}

#[test]
fn unit_offset_gaussians_average_to_two_over_pi() {
    let a = gaussian(8192, 2, &[0.0, 0.0], 3);
    let b = gaussian(8192, 2, &[0.6, 0.8], 4);
    let sw = sliced_wasserstein(&a, &b, &cfg(1000)).unwrap();
    let want = 2.0 / std::f64::consts::PI;
    assert!((sw / want - 1.0).abs() < 0.1, "{sw} vs {want}");
}

#[test]
fn symmetric_and_zero_on_identical_sets() {
    let a = gaussian(300, 3, &[0.0; 3], 5);
    let b = gaussian(300, 3, &[1.0, 0.0, -1.0], 6);
    let c = cfg(64);
    assert_eq!(sliced_wasserstein_pair(&a, &b, &c).unwrap(), sliced_wasserstein_pair(&b, &a, &c).unwrap());
    let z = sliced_wasserstein_pair(&a, &a, &c).unwrap();
    assert_eq!((z.sw1, z.sw2), (0.0, 0.0));
}

#[test]
fn triangle_inequality_on_shared_projections() {
    let c = cfg(50);
    for seed in 0..5 {
        let a = gaussian(128, 2, &[0.0, 0.0], seed);
        let b = gaussian(128, 2, &[1.0, 0.5], seed + 100);
        let m = gaussian(128, 2, &[-0.5, 2.0], seed + 200);
        let ab = sliced_wasserstein_pair(&a, &b, &c).unwrap();
        let am = sliced_wasserstein_pair(&a, &m, &c).unwrap();
        let mb = sliced_wasserstein_pair(&m, &b, &c).unwrap();
        assert!(ab.sw1 <= am.sw1 + mb.sw1 + 1e-12);
        assert!(ab.sw2 <= am.sw2 + mb.sw2 + 1e-12);
    }
}

#[test]
fn scales_linearly() {
    let a = gaussian(256, 4, &[0.0; 4], 8);
    let b = gaussian(256, 4, &[0.3; 4], 9);
    let c = cfg(40);
    let base = sliced_wasserstein_pair(&a, &b, &c).unwrap();
    for lambda in [0.5, 3.0, 1e3] {
        let s = |p: &[Vec<f64>]| p.iter().map(|x| x.iter().map(|v| v * lambda).collect()).collect::<Vec<Vec<f64>>>();
        let scaled = sliced_wasserstein_pair(&s(&a), &s(&b), &c).unwrap();
        assert!((scaled.sw1 / (lambda * base.sw1) - 1.0).abs() < 1e-10);
        assert!((scaled.sw2 / (lambda * base.sw2) - 1.0).abs() < 1e-10);
    }
}

#[test]
fn projections_depend_only_on_dimension_count_and_seed() {
    let a = projection_directions(3, 20, 7);
    assert_eq!(a, projection_directions(3, 20, 7));
    assert_ne!(a, projection_directions(3, 20, 8));
    assert_eq!(&projection_directions(3, 30, 7)[..60], &a[..]);
}

#[test]
fn rejects_mismatched_inputs() {
    let a = gaussian(10, 2, &[0.0; 2], 0);
    let b = gaussian(11, 2, &[0.0; 2], 0);
    assert!(sliced_wasserstein(&a, &b, &cfg(4)).is_err());
    let b3 = gaussian(10, 3, &[0.0; 3], 0);
    assert!(sliced_wasserstein(&a, &b3, &cfg(4)).is_err());
    let bad = SwConfig { p: 3, ..cfg(4) };
    assert!(sliced_wasserstein(&a, &a, &bad).is_err());
}

#[test]
fn untrained_model_is_far_from_eight_gaussians() {
    let c = TrainConfig::new(DatasetSpec::toy(DatasetKind::EightGaussians));
    let t = Trainer::new(c.clone()).unwrap();
    let rep = evaluate_checkpoint(t.model(), &c.dataset, &c.sw, &[0, 1]).unwrap();
    assert!(rep.sw1_mean > 0.3, "{}", rep.sw1_mean);
    assert_eq!(rep.per_seed.len(), 2);
    let again = evaluate_checkpoint(t.model(), &c.dataset, &c.sw, &[0, 1]).unwrap();
    assert_eq!(rep, again);
    assert!(evaluate_checkpoint(t.model(), &DatasetSpec::dgmm(3, 0), &c.sw, &[0]).is_err());
}
