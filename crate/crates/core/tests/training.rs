use proptest::prelude::*;
use uhpnet::data::{Mask, PATCH_SIDE};
use uhpnet::infer::longest_diameter;
use uhpnet::net::{cond_batch, image_batch, LatentLevelParams, NetworkWeights};
use uhpnet::phantom::generate_cohort;
use uhpnet::train::{
    cross_validate, elbo_loss, hpu_weights, kl_diag_gaussian, moment_diameter, recon_loss, soft_diameter,
    soft_iou_loss, train, train_with, Batch, DiameterProxy, EpochLoss, Example, ReconMode, TrainConfig,
};
use uhpnet_autograd::Tensor;

fn level(mean: &[f32], log_variance: &[f32]) -> LatentLevelParams {
    let shape = [1, 1, 1, mean.len()];
    LatentLevelParams {
        mean: Tensor::new(&shape, mean.to_vec()).unwrap(),
        log_variance: Tensor::new(&shape, log_variance.to_vec()).unwrap(),
    }
}

fn disk(side: usize, r: f64) -> Mask {
    let c = (side as f64 - 1.0) / 2.0;
    let bits = (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f64 - c, (i % side) as f64 - c);
            y * y + x * x <= r * r
        })
        .collect();
    Mask::new(side, side, bits).unwrap()
}

fn as_probs(m: &Mask) -> Vec<f64> {
    m.bits().iter().map(|&b| f64::from(u8::from(b))).collect()
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        base_filters: 4,
        num_latent_levels: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn kl_of_identical_gaussians_is_zero() {
    let q = level(&[0.3, -1.2, 2.0], &[0.1, -0.7, 1.5]);
    assert_eq!(kl_diag_gaussian(&q, &q).unwrap(), 0.0);
}

#[test]
fn kl_matches_closed_form_examples() {
    let p = level(&[0.0], &[0.0]);
    let shifted = kl_diag_gaussian(&level(&[1.0], &[0.0]), &p).unwrap();
    assert!((shifted - 0.5).abs() < 1e-7);

    let widened = kl_diag_gaussian(&level(&[0.0], &[1.0]), &p).unwrap();
    let oracle = (std::f64::consts::E - 1.0 - 1.0) / 2.0;
    assert!((widened - oracle).abs() < 1e-6);
    assert!((widened - 0.3591).abs() < 1e-4);
}

#[test]
fn kl_rejects_mismatched_grids() {
    assert!(kl_diag_gaussian(&level(&[0.0, 1.0], &[0.0, 0.0]), &level(&[0.0], &[0.0])).is_err());
}

#[test]
fn soft_iou_examples() {
    let target = disk(PATCH_SIDE, 6.0);
    assert!(soft_iou_loss(&as_probs(&target), &target).unwrap().abs() < 1e-12);

    let mut complement = Mask::empty(PATCH_SIDE, PATCH_SIDE);
    for y in 0..PATCH_SIDE {
        for x in 0..PATCH_SIDE {
            complement.set(y, x, !target.get(y, x));
        }
    }
    assert!((soft_iou_loss(&as_probs(&complement), &target).unwrap() - 1.0).abs() < 1e-6);

    // Half of the pixels in the target, 0.5 everywhere: Σp = Σy = A and
    // Σpy = A/2, so the ratio is (A/2) / (3A/2).
    let half = Mask::new(
        PATCH_SIDE,
        PATCH_SIDE,
        (0..PATCH_SIDE * PATCH_SIDE).map(|i| i % 2 == 0).collect(),
    )
    .unwrap();
    let flat = vec![0.5; PATCH_SIDE * PATCH_SIDE];
    let a = half.area() as f64;
    let oracle = 1.0 - (0.5 * a + 1e-6) / (a + a - 0.5 * a + 1e-6);
    let got = soft_iou_loss(&flat, &half).unwrap();
    assert!((got - oracle).abs() < 1e-12);
    assert!((got - 2.0 / 3.0).abs() < 1e-6);
}

#[test]
fn soft_diameter_examples() {
    assert_eq!(soft_diameter(&[0.0; 1024], 1.0), 0.0);
    let d = disk(PATCH_SIDE, 5.0);
    let probs = as_probs(&d);
    // Equivalent-circle diameter of the rasterized disk's pixel count.
    let oracle = 2.0 * (d.area() as f64 / std::f64::consts::PI).sqrt();
    let got = soft_diameter(&probs, 1.0);
    assert!((got - oracle).abs() < 1e-12);
    assert!((got - 10.0).abs() <= 1.0);
    assert!((soft_diameter(&probs, 2.0) - 2.0 * got).abs() < 1e-12);
}

#[test]
fn moment_diameter_examples() {
    assert_eq!(moment_diameter(&[0.0; 1024], PATCH_SIDE, 1.0), 0.0);
    let d = disk(PATCH_SIDE, 5.0);
    let probs = as_probs(&d);
    let got = moment_diameter(&probs, PATCH_SIDE, 1.0);
    assert!((got - 10.0).abs() <= 1.0, "{got}");
    assert!((got - longest_diameter(&d, 1.0)).abs() <= 1.0);
    assert!((moment_diameter(&probs, PATCH_SIDE, 0.7) - 0.7 * got).abs() < 1e-12);
}

#[test]
fn recon_composes_iou_and_diameter_terms() {
    let target = disk(PATCH_SIDE, 6.0);
    let exact = as_probs(&target);
    for proxy in [DiameterProxy::EquivalentCircle, DiameterProxy::Moments] {
        let d = match proxy {
            DiameterProxy::EquivalentCircle => soft_diameter(&exact, 0.8),
            DiameterProxy::Moments => moment_diameter(&exact, PATCH_SIDE, 0.8),
        };
        let perfect = recon_loss(&exact, &target, d, 0.8, 1.0, ReconMode::IouL1Diam, proxy).unwrap();
        assert!(perfect.abs() < 1e-9);

        // Diameter off by 2 mm on top of an IoU term of 0.3.
        let probs: Vec<f64> = exact.iter().map(|p| p * 0.7).collect();
        let iou = soft_iou_loss(&probs, &target).unwrap();
        assert!((iou - 0.3).abs() < 1e-6);
        let d_pred = match proxy {
            DiameterProxy::EquivalentCircle => soft_diameter(&probs, 0.8),
            DiameterProxy::Moments => moment_diameter(&probs, PATCH_SIDE, 0.8),
        };
        let total = recon_loss(&probs, &target, d_pred + 2.0, 0.8, 1.0, ReconMode::IouL1Diam, proxy).unwrap();
        assert!((total - 2.3).abs() < 1e-6, "{total}");

        let plain = recon_loss(&probs, &target, d_pred + 2.0, 0.8, 0.0, ReconMode::IouL1Diam, proxy).unwrap();
        assert!((plain - iou).abs() < 1e-12);
        let iou_mode = recon_loss(&probs, &target, d_pred + 2.0, 0.8, 1.0, ReconMode::Iou, proxy).unwrap();
        assert!((iou_mode - iou).abs() < 1e-12);
    }
}

fn one_batch(n: usize) -> (NetworkWeights, Batch, TrainConfig) {
    let m = generate_cohort(n, 0.5, 21).unwrap();
    let norm = m.normalization().unwrap();
    let examples: Vec<Example> = m
        .entries()
        .iter()
        .map(|e| Example::new(e, 0, 0, &norm).unwrap())
        .collect();
    let config = tiny_config(1);
    let w = NetworkWeights::init(config.hpu_config(), norm, 3).unwrap();
    (w, Batch::new(&examples, true).unwrap(), config)
}

#[test]
fn elbo_is_finite_and_linear_in_beta() {
    let (w, batch, config) = one_batch(4);
    let base = elbo_loss(&w, &batch, &config, 5).unwrap();
    assert!(base.total.is_finite());
    assert_eq!(base.kl.len(), 2);
    assert!(base.kl.iter().all(|&k| k >= -1e-7));

    let zero = elbo_loss(&w, &batch, &TrainConfig { beta: 0.0, ..config.clone() }, 5).unwrap();
    assert!((zero.total - zero.recon).abs() <= 1e-6 * zero.recon.abs().max(1.0));

    let doubled = elbo_loss(&w, &batch, &TrainConfig { beta: 2.0, ..config.clone() }, 5).unwrap();
    assert_eq!(doubled.recon, base.recon);
    let (k1, k2) = (base.total - base.recon, doubled.total - doubled.recon);
    assert!((k2 - 2.0 * k1).abs() <= 1e-4 * k1.abs().max(1e-3), "{k1} {k2}");
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let m = generate_cohort(4, 0.5, 2).unwrap();
    let config = tiny_config(0);
    let out = train(&m, &config).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.checkpoint.epochs_trained, 0);
    let init = NetworkWeights::init(config.hpu_config(), m.normalization().unwrap(), config.seed).unwrap();
    assert_eq!(out.checkpoint.params, init.params);
    assert_eq!(hpu_weights(&out.checkpoint).unwrap(), init);
}

#[test]
fn resumed_training_continues_the_log() {
    let m = generate_cohort(4, 0.5, 2).unwrap();
    let straight = train(&m, &tiny_config(3)).unwrap();
    let first = train(&m, &tiny_config(1)).unwrap();
    let mut seen = Vec::new();
    let rest = train_with(&m, &tiny_config(3), Some(first.checkpoint), &mut |e: &EpochLoss| seen.push(e.epoch)).unwrap();
    assert_eq!(seen, vec![2, 3]);
    let mut log = first.log.clone();
    log.extend(rest.log);
    assert_eq!(log, straight.log);
    assert_eq!(rest.checkpoint, straight.checkpoint);
    assert!(log.iter().all(|e| e.kl.iter().all(|&k| k >= -1e-7)));
}

#[test]
fn same_seed_trains_identical_weights() {
    let m = generate_cohort(4, 0.5, 2).unwrap();
    let a = train(&m, &tiny_config(1)).unwrap();
    let b = train(&m, &tiny_config(1)).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    let c = train(&m, &TrainConfig { seed: 1, ..tiny_config(1) }).unwrap();
    assert_ne!(a.checkpoint.params, c.checkpoint.params);
}

#[test]
fn invalid_configs_are_rejected() {
    let m = generate_cohort(4, 0.5, 2).unwrap();
    for bad in [
        TrainConfig { learning_rate: 0.0, ..tiny_config(1) },
        TrainConfig { batch_size: 0, ..tiny_config(1) },
        TrainConfig { gamma: -1.0, ..tiny_config(1) },
        TrainConfig { num_latent_levels: 5, ..tiny_config(1) },
    ] {
        assert!(train(&m, &bad).is_err());
    }
}

#[test]
fn cross_validation_reports_every_fold() {
    let m = generate_cohort(6, 0.5, 4).unwrap();
    let reports = cross_validate(&m, &tiny_config(1), 3).unwrap();
    assert_eq!(reports.len(), 3);
    assert!(reports.iter().all(|r| r.held_out_nodules == 2 && r.train_nodules == 4));
    assert!(reports.iter().all(|r| r.final_loss.is_finite() && (0.0..=1.0).contains(&r.held_out_dice)));
    assert!(cross_validate(&m, &tiny_config(1), 1).is_err());
}

#[test]
fn batches_stack_their_examples() {
    let (_, batch, _) = one_batch(3);
    assert_eq!(batch.len(), 3);
    assert_eq!(batch.i0.shape(), [3, 1, 32, 32]);
    assert_eq!(batch.targets.masks.shape(), [3, 1, 32, 32]);
    let m = generate_cohort(3, 0.5, 21).unwrap();
    let norm = m.normalization().unwrap();
    let ex: Vec<Example> = m.entries().iter().map(|e| Example::new(e, 0, 0, &norm).unwrap()).collect();
    assert_eq!(batch.i0, image_batch(&ex.iter().map(|e| &e.i0).collect::<Vec<_>>()).unwrap());
    assert_eq!(batch.cond, cond_batch(&ex.iter().map(|e| e.cond).collect::<Vec<_>>(), true).unwrap());
    assert!(Example::new(&m.entries()[0], 3, 0, &norm).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn diameter_term_only_adds(
        values in proptest::collection::vec(0.0f64..=1.0, PATCH_SIDE * PATCH_SIDE),
        r in 2.0f64..9.0,
        d1 in 0.0f64..20.0,
        gamma in 0.01f64..3.0,
    ) {
        let target = disk(PATCH_SIDE, r);
        let iou = recon_loss(&values, &target, d1, 0.7, gamma, ReconMode::Iou, DiameterProxy::Moments).unwrap();
        let full = recon_loss(&values, &target, d1, 0.7, gamma, ReconMode::IouL1Diam, DiameterProxy::Moments).unwrap();
        prop_assert!(iou <= full);
        prop_assert!((0.0..=1.0).contains(&iou));
    }

    #[test]
    fn kl_is_nonnegative(
        mq in proptest::collection::vec(-3.0f32..3.0, 4),
        lq in proptest::collection::vec(-4.0f32..2.0, 4),
        mp in proptest::collection::vec(-3.0f32..3.0, 4),
        lp in proptest::collection::vec(-4.0f32..2.0, 4),
    ) {
        prop_assert!(kl_diag_gaussian(&level(&mq, &lq), &level(&mp, &lp)).unwrap() >= -1e-7);
    }
}
