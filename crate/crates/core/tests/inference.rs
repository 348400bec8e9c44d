use proptest::prelude::*;
use uhpnet::data::{ConditioningVector, Mask, NormalizationConstants, Patch, PATCH_PIXELS, PATCH_SIDE};
use uhpnet::infer::{
    appearance_maps, growth_logistic, growth_probability, growth_stats, longest_diameter, mc_sample,
    mc_sample_mode, predict, predict_with_samples, GrowthEstimate, PredictionRequest, SampleSet,
    SegmentationSampler, DEFAULT_K,
};
use uhpnet::net::{HpuConfig, NetworkWeights, SampleMode};
use uhpnet::phantom::rasterize_ellipse;
use uhpnet::Result;

/// Exhaustive pairwise oracle over every foreground pixel.
fn brute_force_diameter(mask: &Mask, spacing_mm: f64) -> f64 {
    let pts: Vec<(f64, f64)> = (0..mask.height())
        .flat_map(|y| (0..mask.width()).map(move |x| (y, x)))
        .filter(|&(y, x)| mask.get(y, x))
        .map(|(y, x)| (y as f64, x as f64))
        .collect();
    let mut best = 0.0f64;
    for a in &pts {
        for b in &pts {
            best = best.max(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt());
        }
    }
    best * spacing_mm
}

fn mask_from(side: usize, pts: &[(usize, usize)]) -> Mask {
    let mut m = Mask::empty(side, side);
    for &(y, x) in pts {
        m.set(y, x, true);
    }
    m
}

#[test]
fn longest_diameter_examples() {
    let run = mask_from(8, &[(3, 1), (3, 2), (3, 3), (3, 4), (3, 5)]);
    assert!((longest_diameter(&run, 0.7) - 2.8).abs() < 1e-12);
    assert_eq!(longest_diameter(&Mask::empty(32, 32), 1.0), 0.0);
    assert_eq!(longest_diameter(&mask_from(4, &[(2, 2)]), 1.0), 0.0);

    // Semi-axes of 6 px: a 12 mm major axis at 1 mm spacing.
    let ellipse = rasterize_ellipse(6.0, 5.0, false);
    assert!((longest_diameter(&ellipse, 1.0) - 12.0).abs() <= 1.0);
    let half = rasterize_ellipse(12.0, 10.0, true);
    assert!((longest_diameter(&half, 0.5) - 12.0).abs() <= 0.5);
}

#[test]
fn growth_stats_examples() {
    assert_eq!(growth_stats(&[7.0, 7.0, 7.0], 7.0).unwrap(), (0.0, 0.0));
    let (m, s) = growth_stats(&[6.0, 8.0], 5.0).unwrap();
    assert!((m - 2.0).abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
    assert_eq!(growth_stats(&[9.5], 5.0).unwrap(), (4.5, 0.0));
    assert!(growth_stats(&[], 5.0).is_err());
}

#[test]
fn growth_probability_examples() {
    assert_eq!(growth_logistic(2.0), 0.5);
    assert_eq!(growth_probability(&[2.0; 5]).unwrap(), (0.5, 0.0));
    let (p, s) = growth_probability(&[4.0, 4.0]).unwrap();
    assert!((p - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
    assert!((p - 0.8808).abs() < 1e-4);
    assert_eq!(s, 0.0);
    assert!(growth_probability(&[-800.0]).unwrap().0 < 1e-300);
    assert!(growth_probability(&[]).is_err());
}

#[test]
fn appearance_map_examples() {
    let m = rasterize_ellipse(5.0, 4.0, false);
    let (mean, std) = appearance_maps(&vec![m.clone(); 6]).unwrap();
    assert_eq!(mean, m.to_values().iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
    assert!(std.iter().all(|&s| s == 0.0));

    let on = mask_from(2, &[(0, 0), (1, 1)]);
    let off = mask_from(2, &[(1, 1)]);
    let (mean, std) = appearance_maps(&[on.clone(), off.clone(), on, off]).unwrap();
    assert_eq!(mean, vec![0.5, 0.0, 0.0, 1.0]);
    assert_eq!(std, vec![0.5, 0.0, 0.0, 0.0]);

    assert!(appearance_maps(&[]).is_err());
    assert!(appearance_maps(&[Mask::empty(2, 2), Mask::empty(3, 3)]).is_err());
}

fn untrained() -> NetworkWeights {
    let config = HpuConfig {
        base_filters: 4,
        ..HpuConfig::default()
    };
    let norm = NormalizationConstants {
        sz0_min_mm: 4.0,
        sz0_max_mm: 12.0,
    };
    NetworkWeights::init(config, norm, 13).unwrap()
}

fn disk_patch() -> Patch {
    let m = rasterize_ellipse(6.0, 5.5, false);
    Patch::new(m.to_values().iter().map(|v| 0.1 + 0.6 * v).collect()).unwrap()
}

#[test]
fn single_mean_sample_is_the_point_prediction() {
    let w = untrained();
    let i0 = disk_patch();
    let cond = ConditioningVector::new(1.0 / 3.0, 0.5).unwrap();
    let set = mc_sample_mode(&w, &i0, &cond, 1, 0.5, 0, SampleMode::Mean, 1.0).unwrap();
    let point = w.mean_probs(&i0, &cond).unwrap();
    let expected = Mask::new(PATCH_SIDE, PATCH_SIDE, point.iter().map(|&p| p > 0.5).collect()).unwrap();
    assert_eq!(set.masks, vec![expected]);
    let other = mc_sample_mode(&w, &i0, &cond, 1, 0.5, 77, SampleMode::Mean, 1.0).unwrap();
    assert_eq!(other.masks, set.masks);
}

#[test]
fn sampling_is_reproducible_and_prefix_stable() {
    let w = untrained();
    let i0 = disk_patch();
    let cond = ConditioningVector::new(1.0, 0.2).unwrap();
    let a = mc_sample(&w, &i0, &cond, 60, 0.5, 9, 1.0).unwrap();
    let b = mc_sample(&w, &i0, &cond, 60, 0.5, 9, 1.0).unwrap();
    assert_eq!(a, b);
    // Sample i depends only on (seed, i), across chunk boundaries too.
    let short = mc_sample(&w, &i0, &cond, 7, 0.5, 9, 1.0).unwrap();
    assert_eq!(short.masks[..], a.masks[..7]);
}

#[test]
fn sampling_rejects_bad_arguments() {
    let w = untrained();
    let i0 = disk_patch();
    let cond = ConditioningVector::new(0.0, 0.0).unwrap();
    assert!(mc_sample(&w, &i0, &cond, 0, 0.5, 0, 1.0).is_err());
    assert!(mc_sample(&w, &i0, &cond, 1, 1.0, 0, 1.0).is_err());
    assert!(mc_sample(&w, &i0, &cond, 1, 0.0, 0, 1.0).is_err());
    assert!(SampleSet::new(Vec::new(), 1.0, 0).is_err());
    assert_eq!(DEFAULT_K, 1000);
}

#[test]
fn prediction_summarizes_its_samples() {
    let w = untrained();
    let i0 = disk_patch();
    let req = PredictionRequest {
        i0: &i0,
        spacing_mm: 0.8,
        days_between: 400,
        d0_mm: 8.0,
    };
    let (est, samples) = predict_with_samples(&w, &req, 40, 3).unwrap();
    assert_eq!(est.k, 40);
    assert_eq!(est.d0_used_mm, 8.0);
    let diam = samples.diameters();
    let mean = diam.iter().sum::<f64>() / diam.len() as f64;
    assert!((est.growth_mean_mm - (mean - 8.0)).abs() < 1e-9);
    assert_eq!(est.deltas_mm.len(), 40);
    assert!((0.0..=1.0).contains(&est.prob_growth_mean));
    assert!(est.appearance_mean.iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(est.appearance_std.iter().all(|s| (0.0..=0.5).contains(s)));
    assert_eq!(est.appearance_mean.len(), PATCH_PIXELS);
    assert_eq!(predict(&w, &req, 40, 3).unwrap(), est);
}

#[test]
fn identical_samples_have_zero_spread() {
    let m = rasterize_ellipse(4.0, 3.5, true);
    let set = SampleSet::new(vec![m; 5], 1.0, 0).unwrap();
    let est = GrowthEstimate::from_samples(&set, 5.0).unwrap();
    assert_eq!(est.growth_std_mm, 0.0);
    assert_eq!(est.prob_growth_std, 0.0);
    assert!(est.appearance_std.iter().all(|&s| s == 0.0));

    // A naive summed mean drifts by an ulp on repeated values like this one.
    let d = 0.7 * 13f64.sqrt();
    assert_eq!(growth_stats(&vec![d; 1000], 1.0).unwrap(), (d - 1.0, 0.0));
}

/// Emits a fixed soft map regardless of input.
struct Constant(Vec<f64>, NormalizationConstants);

impl SegmentationSampler for Constant {
    fn normalization(&self) -> &NormalizationConstants {
        &self.1
    }

    fn is_generative(&self) -> bool {
        false
    }

    fn sample_probs(&self, _: &Patch, _: &ConditioningVector, _: u64, count: usize, _: u64) -> Result<Vec<Vec<f64>>> {
        Ok(vec![self.0.clone(); count])
    }

    fn mean_probs(&self, _: &Patch, _: &ConditioningVector) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

#[test]
fn non_finite_probabilities_are_rejected() {
    let norm = NormalizationConstants {
        sz0_min_mm: 4.0,
        sz0_max_mm: 12.0,
    };
    let mut probs = vec![0.2; PATCH_PIXELS];
    probs[100] = f64::NAN;
    let bad = Constant(probs, norm);
    let cond = ConditioningVector::new(0.0, 0.5).unwrap();
    let err = mc_sample(&bad, &disk_patch(), &cond, 3, 0.5, 0, 1.0).unwrap_err();
    assert!(matches!(err, uhpnet::Error::Numerical(_)), "{err}");
}

fn arb_mask() -> impl Strategy<Value = Mask> {
    (1usize..=32, 0.0f64..=1.0).prop_flat_map(|(side, density)| {
        proptest::collection::vec(proptest::bool::weighted(density.clamp(0.01, 0.99)), side * side)
            .prop_map(move |bits| Mask::new(side, side, bits).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn longest_diameter_matches_brute_force(mask in arb_mask(), spacing in 0.3f64..2.0) {
        prop_assert_eq!(longest_diameter(&mask, spacing), brute_force_diameter(&mask, spacing));
    }

    #[test]
    fn growth_stats_are_translation_invariant(
        ds in proptest::collection::vec(0.0f64..30.0, 1..50),
        d0 in 0.0f64..20.0,
        c in -10.0f64..10.0,
    ) {
        let (m, s) = growth_stats(&ds, d0).unwrap();
        let shifted: Vec<f64> = ds.iter().map(|d| d + c).collect();
        let (m2, s2) = growth_stats(&shifted, d0).unwrap();
        prop_assert!((m2 - m - c).abs() < 1e-9);
        prop_assert!((s2 - s).abs() < 1e-9);
    }

    #[test]
    fn growth_probability_rises_with_a_common_shift(
        deltas in proptest::collection::vec(-10.0f64..10.0, 1..50),
        c in 0.01f64..5.0,
    ) {
        let shifted: Vec<f64> = deltas.iter().map(|d| d + c).collect();
        prop_assert!(growth_probability(&shifted).unwrap().0 > growth_probability(&deltas).unwrap().0);
    }

    #[test]
    fn appearance_maps_respect_bernoulli_bounds(masks in proptest::collection::vec(
        proptest::collection::vec(any::<bool>(), 16).prop_map(|b| Mask::new(4, 4, b).unwrap()), 1..20)) {
        let (mean, std) = appearance_maps(&masks).unwrap();
        prop_assert!(mean.iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert!(std.iter().all(|s| (0.0..=0.5).contains(s)));
    }
}
