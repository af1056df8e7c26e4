use meanflow_cv::datasets::*;
use meanflow_cv::rng::{stream_rng, Stream};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn axis_stats(xs: &[Vec<f64>], i: usize) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|x| x[i]).sum::<f64>() / n;
    let var = xs.iter().map(|x| (x[i] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[test]
fn toys_are_standardized() {
    for kind in DatasetKind::TOYS {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs = sample_data(&DatasetSpec::toy(kind), &mut rng, 100_000).unwrap();
        for i in 0..2 {
            let (mean, std) = axis_stats(&xs, i);
            assert!((0.9..=1.1).contains(&std), "{kind} axis {i}: std {std}");
            // Exact moments: the sample std is within a few percent of 1 and
            // the mean within a few standard errors of 0.
            assert!((std - 1.0).abs() < 0.02, "{kind} axis {i}: std {std}");
            assert!(mean.abs() < 5.0 / (1e5f64).sqrt(), "{kind} axis {i}: mean {mean}");
        }
    }
}

#[test]
fn noise_scale_keeps_standardization() {
    for kind in [DatasetKind::TwoMoons, DatasetKind::Pinwheel, DatasetKind::SwissRoll] {
        let mut spec = DatasetSpec::toy(kind);
        spec.noise_scale = 3.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = sample_data(&spec, &mut rng, 100_000).unwrap();
        for i in 0..2 {
            let (_, std) = axis_stats(&xs, i);
            assert!((std - 1.0).abs() < 0.02, "{kind} axis {i}: std {std}");
        }
    }
}

#[test]
fn eight_gaussians_modes_are_balanced() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let xs = sample_data(&DatasetSpec::toy(DatasetKind::EightGaussians), &mut rng, n).unwrap();
    let mut counts = [0usize; 8];
    for x in &xs {
        let a = x[1].atan2(x[0]).rem_euclid(2.0 * std::f64::consts::PI);
        let k = ((a / (std::f64::consts::PI / 4.0)).round() as usize) % 8;
        counts[k] += 1;
    }
    let p = 1.0 / 8.0;
    let expected = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    for (k, c) in counts.iter().enumerate() {
        assert!((*c as f64 - expected).abs() < 5.0 * sd, "mode {k}: {c}");
    }
}

#[test]
fn dgmm_sample_mean_matches_mixture() {
    let spec = DatasetSpec::dgmm(2, 5);
    let mix = dgmm_mixture_spec(&spec).unwrap();
    let mean = mix.total_mean();
    let cov = mix.total_covariance();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    let xs = sample_data(&spec, &mut rng, n).unwrap();
    for i in 0..2 {
        let (m, _) = axis_stats(&xs, i);
        let se = (cov[(i, i)] / n as f64).sqrt();
        assert!((m - mean[i]).abs() < 4.0 * se);
    }
}

#[test]
fn dgmm_mixture_law_is_standardized() {
    for d in [2, 8, 32] {
        let mix = dgmm_mixture_spec(&DatasetSpec::dgmm(d, 11)).unwrap();
        let c = mix.total_covariance();
        for i in 0..d {
            assert!(mix.total_mean()[i].abs() < 1e-12);
            assert!((c[(i, i)] - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn dgmm_layout_depends_on_dataset_seed_only() {
    let a = dgmm_mixture_spec(&DatasetSpec::dgmm(4, 1)).unwrap();
    let b = dgmm_mixture_spec(&DatasetSpec::dgmm(4, 1)).unwrap();
    let c = dgmm_mixture_spec(&DatasetSpec::dgmm(4, 2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn later_time_has_mean_two_thirds() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 100_000;
    let ts: Vec<f64> = (0..n).map(|_| sample_times(&mut rng, 0.0).1).collect();
    let mean = ts.iter().sum::<f64>() / n as f64;
    // max(U₁, U₂) has variance 1/18.
    let se = (1.0 / 18.0 / n as f64).sqrt();
    assert!((mean - 2.0 / 3.0).abs() < 4.0 * se, "mean {mean}");
}

#[test]
fn seeded_streams_are_reproducible() {
    let ds = Dataset::new(DatasetSpec::toy(DatasetKind::Checkerboard)).unwrap();
    let draw = || {
        sample_interpolant(
            &mut stream_rng(42, Stream::Data),
            &mut stream_rng(42, Stream::Noise),
            &mut stream_rng(42, Stream::Time),
            &ds,
            128,
            0.25,
        )
    };
    assert_eq!(draw(), draw());
}

#[test]
fn interpolant_invariants_hold_exactly() {
    let ds = Dataset::new(DatasetSpec::dgmm(8, 3)).unwrap();
    let batch = sample_interpolant(
        &mut stream_rng(1, Stream::Data),
        &mut stream_rng(1, Stream::Noise),
        &mut stream_rng(1, Stream::Time),
        &ds,
        256,
        0.0,
    );
    for s in batch.iter() {
        assert!(s.r <= s.t);
        for i in 0..8 {
            assert_eq!(s.x_t[i], (1.0 - s.t) * s.x0[i] + s.t * s.x1[i]);
            assert_eq!(s.v_cond[i], s.x1[i] - s.x0[i]);
        }
    }
}

#[test]
fn spec_round_trips_through_toml() {
    let mut spec = DatasetSpec::dgmm(16, 3);
    spec.dgmm_modes = Some(5);
    let text = toml::to_string(&spec).unwrap();
    assert_eq!(toml::from_str::<DatasetSpec>(&text).unwrap(), spec);
    let toy: DatasetSpec = toml::from_str("kind = \"two_spirals\"").unwrap();
    assert_eq!(toy, DatasetSpec::toy(DatasetKind::TwoSpirals));
}
