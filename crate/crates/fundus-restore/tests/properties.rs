//! Randomized property tests across the pipeline: schedule algebra,
//! phantom determinism, mask morphology and round-trips, metric
//! definitions against brute-force oracles, and the conditioning
//! pathways of the model. Expensive end-to-end checks live in the
//! acceptance suite; everything here runs in seconds.

mod common;

use common::{disc_mask, naive_dice, naive_psnr, naive_ssim, random_image, random_mask};
use ndarray::Array2;
use proptest::prelude::*;

use fundus_restore::config::{parse_config, to_toml, ExperimentConfig};
use fundus_restore::image::Image;
use fundus_restore::inpaint::{restore, timestep_subset, LatentSource, RestoreOptions};
use fundus_restore::masks::{
    blend_artifact, detect_fov, erode, extract_artifact_mask, threshold_artifacts,
    ArtifactTexture, ExtractParams,
};
use fundus_restore::metrics::{
    dice, psnr, ssim, ssim_default, PSNR_CAP_DB, SSIM_K1, SSIM_K2, SSIM_WINDOW,
};
use fundus_restore::model::{images_to_batch, loss_and_grad, sample_draws, Model, ModelConfig};
use fundus_restore::phantom::{generate_phantom, PhantomSpec};
use fundus_restore::rng::Pcg32;
use fundus_restore::schedule::{build_schedule, forward_diffuse, ScheduleConfig, ScheduleKind};
use fundus_restore::train::{train, OptimizerState, TrainConfig};

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        channels: 3,
        latent_dim: 4,
        base_width: 4,
        depth: 2,
        timestep_embed_dim: 8,
        seed: 0,
    }
}

// ------------------------------------------------------------- schedule

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_invariants_hold_for_random_configs(
        timesteps in 1usize..=64,
        beta_min in 1e-5f64..5e-3,
        span in 0.0f64..0.1,
    ) {
        let beta_max = (beta_min + span).min(0.999);
        let sched = build_schedule(timesteps, beta_min, beta_max, ScheduleKind::Linear).unwrap();
        prop_assert_eq!(sched.len(), timesteps);
        for t in 0..timesteps {
            prop_assert!(sched.beta[t] > 0.0 && sched.beta[t] < 1.0);
            if t > 0 {
                prop_assert!(sched.beta[t] >= sched.beta[t - 1]);
            }
            prop_assert!((sched.alpha[t] - (1.0 - sched.beta[t])).abs() < 1e-15);
            prop_assert!(sched.alpha_bar[t] > 0.0 && sched.alpha_bar[t] < 1.0);
            // Cumulative-product identity, exact up to one rounding step.
            let prev = sched.alpha_bar_before(t);
            prop_assert!((sched.alpha_bar[t] - prev * sched.alpha[t]).abs() <= 1e-15 * prev);
            if t > 0 {
                prop_assert!(sched.alpha_bar[t] < sched.alpha_bar[t - 1]);
            }
            // Coefficient identity behind the posterior mean: the
            // denominators of the x0_hat and x_t weights recombine to
            // the total noise level.
            let lhs = sched.beta[t] + sched.alpha[t] * (1.0 - prev);
            prop_assert!((lhs - (1.0 - sched.alpha_bar[t])).abs() < 1e-10);
            // Posterior variance is bounded by the forward step variance.
            let var = sched.sigma[t] * sched.sigma[t];
            prop_assert!((0.0..=sched.beta[t] + 1e-15).contains(&var));
        }
        prop_assert!(sched.sigma[0] == 0.0);
    }

    #[test]
    fn forward_diffuse_is_the_documented_linear_map(
        seed in 0u64..1_000,
        t_frac in 0.0f64..1.0,
    ) {
        let sched = ScheduleConfig::default().build().unwrap();
        let t = ((sched.len() - 1) as f64 * t_frac) as usize;
        let mut rng = Pcg32::new(seed, 11);
        let x0 = random_image(8, 8, 3, &mut rng);
        let eps = Image::gaussian(8, 8, 3, &mut rng);
        let zero = Image::zeros(8, 8, 3);

        let signal = forward_diffuse(&x0, t, &zero, &sched).unwrap();
        let noise = forward_diffuse(&zero, t, &eps, &sched).unwrap();
        let both = forward_diffuse(&x0, t, &eps, &sched).unwrap();
        let ab = sched.alpha_bar[t];
        for i in 0..x0.data.len() {
            let s = (ab.sqrt() as f32) * x0.data[i];
            let n = ((1.0 - ab).sqrt() as f32) * eps.data[i];
            prop_assert!((signal.data[i] - s).abs() < 1e-6);
            prop_assert!((noise.data[i] - n).abs() < 1e-6);
            prop_assert!((both.data[i] - (s + n)).abs() < 1e-6);
        }
    }

    #[test]
    fn timestep_subsets_are_descending_with_endpoints(
        t_total in 1usize..=256,
        steps in 1usize..=64,
    ) {
        let subset = timestep_subset(t_total, steps);
        prop_assert!(!subset.is_empty());
        prop_assert!(subset.len() <= steps.min(t_total));
        prop_assert_eq!(subset[0], t_total - 1);
        if steps >= 2 {
            // A single-step subset is just the top level; the sampler's
            // final step-to-clean transition covers the bottom.
            prop_assert_eq!(*subset.last().unwrap(), 0);
        }
        for w in subset.windows(2) {
            prop_assert!(w[0] > w[1]);
        }
    }
}

// -------------------------------------------------------------- phantom

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn phantom_generation_is_a_pure_function(seed in 0u64..10_000, big in any::<bool>()) {
        let spec = PhantomSpec {
            size: if big { 64 } else { 32 },
            seed,
            ..PhantomSpec::default()
        };
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        prop_assert_eq!(&a.image.data, &b.image.data);
        prop_assert_eq!(&a.vessel_mask.data, &b.vessel_mask.data);
        prop_assert_eq!(a.disc_center, b.disc_center);

        // The disc center must sit inside the field-of-view circle.
        let half = spec.size as f64 / 2.0;
        let r = half * spec.fov_radius_frac as f64;
        let dy = a.disc_center.0 as f64 - half;
        let dx = a.disc_center.1 as f64 - half;
        prop_assert!((dy * dy + dx * dx).sqrt() < r);
    }
}

// ---------------------------------------------------------------- masks

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn detection_grows_as_tau_high_drops(
        seed in 0u64..10_000,
        tau_lo_side in 0.5f32..0.8,
        gap in 0.05f32..0.2,
    ) {
        let phantom = generate_phantom(&PhantomSpec { seed, ..PhantomSpec::default() })
            .unwrap();
        // Paint a bright patch so the high threshold has something to find.
        let mut img = phantom.image.clone();
        for y in 28..36 {
            for x in 28..36 {
                for c in 0..3 {
                    img.set(y, x, c, 1.0);
                }
            }
        }
        let fov = detect_fov(&img).unwrap();
        let lower = threshold_artifacts(&img, &fov, tau_lo_side, 0.02).unwrap();
        let higher = threshold_artifacts(&img, &fov, tau_lo_side + gap, 0.02).unwrap();
        for i in 0..lower.data.len() {
            prop_assert!(lower.data[i] >= higher.data[i], "pixel {i} shrank");
        }
        prop_assert!(lower.count_ones() >= higher.count_ones());
    }

    #[test]
    fn blend_leaves_unmasked_pixels_bit_identical(
        seed in 0u64..10_000,
        alpha in 0.0f32..=1.0,
        radius in 3usize..=7,
    ) {
        let phantom = generate_phantom(&PhantomSpec { seed, ..PhantomSpec::default() })
            .unwrap();
        let clean = &phantom.image;
        let blob = disc_mask(64, 64, 32, 32, radius);
        let mut rng = Pcg32::new(seed, 21);
        let tex = ArtifactTexture {
            image: random_image(64, 64, 3, &mut rng),
            support: blob.clone(),
        };
        let center = (32, 32);
        let out = blend_artifact(clean, &tex, &blob, alpha, center, center).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if blob.get(y, x) == 0 {
                    for c in 0..3 {
                        prop_assert!(
                            out.get(y, x, c).to_bits() == clean.get(y, x, c).to_bits(),
                            "unmasked pixel ({y}, {x}, {c}) changed"
                        );
                    }
                }
            }
        }
        if alpha == 0.0 {
            prop_assert_eq!(&out.data, &clean.data);
        }
    }

    #[test]
    fn saturating_blend_round_trips_through_extraction(
        seed in 0u64..10_000,
        dy in -10isize..=10,
        dx in -10isize..=10,
        radius in 5usize..=9,
    ) {
        let phantom = generate_phantom(&PhantomSpec { seed, ..PhantomSpec::default() })
            .unwrap();
        let cy = (32 + dy) as usize;
        let cx = (32 + dx) as usize;
        let blob = disc_mask(64, 64, cy, cx, radius);
        // Fully saturating texture: white everywhere on the support.
        let mut white = Image::zeros(64, 64, 3);
        for v in white.data.iter_mut() {
            *v = 1.0;
        }
        let tex = ArtifactTexture {
            image: white,
            support: blob.clone(),
        };
        let center = phantom.disc_center;
        let blended = blend_artifact(&phantom.image, &tex, &blob, 1.0, center, center).unwrap();
        // Margin 1 keeps the recovered mask tight enough for a geometric
        // overlap measure; the default margin of 2 is a safety halo for
        // restoration, not for mask fidelity.
        let params = ExtractParams {
            dilate_radius: 1,
            ..ExtractParams::default()
        };
        let recovered = extract_artifact_mask(&blended, &params).unwrap();
        let overlap = dice(&recovered, &blob).unwrap();
        prop_assert!(overlap >= 0.8, "dice {overlap} below 0.8");
    }
}

// -------------------------------------------------------------- metrics

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn psnr_matches_brute_force(seed in 0u64..10_000) {
        let mut rng = Pcg32::new(seed, 31);
        let a = random_image(16, 16, 3, &mut rng);
        let b = random_image(16, 16, 3, &mut rng);
        let fast = psnr(&a, &b, 1.0).unwrap();
        prop_assert!((fast - naive_psnr(&a, &b, 1.0)).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_brute_force(seed in 0u64..10_000) {
        let mut rng = Pcg32::new(seed, 32);
        let a = random_image(16, 16, 3, &mut rng);
        let b = random_image(16, 16, 3, &mut rng);
        let fast = ssim(&a, &b, SSIM_WINDOW, SSIM_K1, SSIM_K2, 1.0).unwrap();
        let slow = naive_ssim(&a, &b, SSIM_WINDOW, SSIM_K1, SSIM_K2, 1.0);
        prop_assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }

    #[test]
    fn dice_matches_brute_force_and_is_symmetric(seed in 0u64..10_000, p in 0.0f64..1.0) {
        let mut rng = Pcg32::new(seed, 33);
        let a = random_mask(16, 16, p, &mut rng);
        let b = random_mask(16, 16, 1.0 - p, &mut rng);
        let ab = dice(&a, &b).unwrap();
        prop_assert!((ab - naive_dice(&a, &b)).abs() < 1e-9);
        prop_assert_eq!(ab.to_bits(), dice(&b, &a).unwrap().to_bits());
        prop_assert!((dice(&a, &a).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn psnr_strictly_decreases_with_noise_amplitude(
        seed in 0u64..10_000,
        amp in 0.01f32..0.2,
        factor in 1.5f32..4.0,
    ) {
        let mut rng = Pcg32::new(seed, 34);
        let a = random_image(16, 16, 3, &mut rng);
        let noise = random_image(16, 16, 3, &mut rng);
        let perturb = |amplitude: f32| {
            let mut b = a.clone();
            for (v, n) in b.data.iter_mut().zip(&noise.data) {
                *v += amplitude * (n + 0.01);
            }
            b
        };
        let small = psnr(&a, &perturb(amp), 1.0).unwrap();
        let large = psnr(&a, &perturb(amp * factor), 1.0).unwrap();
        prop_assert!(large < small, "{large} !< {small}");
    }

    #[test]
    fn ssim_is_bounded_and_one_on_identity(seed in 0u64..10_000) {
        let mut rng = Pcg32::new(seed, 35);
        let a = random_image(16, 16, 3, &mut rng);
        let b = random_image(16, 16, 3, &mut rng);
        let s = ssim_default(&a, &b).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        prop_assert!((ssim_default(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dice_decays_as_one_mask_erodes(seed in 0u64..10_000, radius in 3usize..=6) {
        let mut rng = Pcg32::new(seed, 36);
        let cy = 6 + rng.next_below(5);
        let cx = 6 + rng.next_below(5);
        let a = disc_mask(16, 16, cy, cx, radius);
        let d1 = dice(&a, &erode(&a, 1)).unwrap();
        let d2 = dice(&a, &erode(&a, 2)).unwrap();
        prop_assert!(d1 <= 1.0 && d2 <= d1, "{d2} !<= {d1} !<= 1");
    }
}

#[test]
fn identical_images_hit_the_psnr_cap() {
    let mut rng = Pcg32::new(5, 37);
    let a = random_image(16, 16, 3, &mut rng);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
}

// ------------------------------------------------------------------ rng

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn next_below_respects_its_bound(seed in any::<u64>(), n in 1usize..10_000) {
        let mut rng = Pcg32::new(seed, 41);
        for _ in 0..50 {
            prop_assert!(rng.next_below(n) < n);
        }
    }

    #[test]
    fn shuffle_is_a_seed_stable_permutation(seed in any::<u64>(), len in 0usize..200) {
        let mut items: Vec<usize> = (0..len).collect();
        let mut rng = Pcg32::new(seed, 42);
        rng.shuffle(&mut items);
        let mut again: Vec<usize> = (0..len).collect();
        let mut rng2 = Pcg32::new(seed, 42);
        rng2.shuffle(&mut again);
        prop_assert_eq!(&items, &again);
        let mut sorted = items.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..len).collect::<Vec<_>>());
    }
}

// --------------------------------------------------------------- config

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn config_serialization_round_trips(
        // Seeds are capped at i64::MAX so they survive the TOML integer type;
        // `validate()` rejects anything larger.
        seed in 0u64..=i64::MAX as u64,
        epochs in 1usize..5_000,
        batch in 1usize..16,
        steps in 1usize..=200,
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.train.epochs = epochs;
        cfg.train.batch_size = batch;
        cfg.restore.steps = steps;
        let text = to_toml(&cfg).unwrap();
        let parsed = parse_config(&text).unwrap();
        prop_assert_eq!(to_toml(&parsed).unwrap(), text);
    }
}

// ------------------------------------------------- model and restoration

#[test]
fn encoding_survives_small_perturbations() {
    let cfg = toy_model_config();
    let model = Model::init(&cfg).unwrap();
    let mut rng = Pcg32::new(3, 51);
    let x = random_image(16, 16, 3, &mut rng);
    let mut shifted = x.clone();
    for v in shifted.data.iter_mut() {
        *v += 1e-3 * (rng.next_f64() as f32);
    }
    let za = model.encode(&[&x]).unwrap();
    let zb = model.encode(&[&shifted]).unwrap();
    let mut diff = 0.0f64;
    for (a, b) in za.iter().zip(zb.iter()) {
        assert!(a.is_finite() && b.is_finite());
        diff += ((a - b) as f64).powi(2);
    }
    assert!(diff.is_finite());
}

#[test]
fn restoration_output_is_in_range_and_latent_sensitive() {
    let cfg = toy_model_config();
    let model = Model::init(&cfg).unwrap();
    let sched = ScheduleConfig {
        timesteps: 20,
        ..ScheduleConfig::default()
    }
    .build()
    .unwrap();
    let mut rng = Pcg32::new(9, 52);
    let artifact = random_image(16, 16, 3, &mut rng);
    let mask = disc_mask(16, 16, 8, 8, 4);

    let run = |latent: LatentSource| {
        let opts = RestoreOptions {
            steps: 4,
            latent,
            seed: 77,
            ..RestoreOptions::default()
        };
        restore(&model, &sched, &artifact, &mask, &opts).unwrap().image
    };
    let mut za = Array2::zeros((1, 4));
    let mut zb = Array2::zeros((1, 4));
    for i in 0..4 {
        za[[0, i]] = 1.0 + i as f32;
        zb[[0, i]] = -2.0 * (i as f32 + 1.0);
    }
    let ra = run(LatentSource::Provided(za));
    let rb = run(LatentSource::Provided(zb));

    let mut in_mask_gap = 0.0f64;
    for y in 0..16 {
        for x in 0..16 {
            for c in 0..3 {
                assert!((0.0..=1.0).contains(&ra.get(y, x, c)));
                assert!((0.0..=1.0).contains(&rb.get(y, x, c)));
                if mask.get(y, x) == 1 {
                    in_mask_gap += ((ra.get(y, x, c) - rb.get(y, x, c)) as f64).powi(2);
                }
            }
        }
    }
    assert!(
        in_mask_gap > 0.0,
        "conditioning latent had no effect on generated content"
    );
}

// --------------------------------------------------------------- training

fn mini_train_config() -> (ModelConfig, Vec<Image>) {
    let model = ModelConfig {
        image_size: 32,
        channels: 3,
        latent_dim: 16,
        base_width: 8,
        depth: 2,
        timestep_embed_dim: 16,
        seed: 1,
    };
    let images = (0..4)
        .map(|i| {
            generate_phantom(&PhantomSpec {
                size: 32,
                seed: 300 + i,
                ..PhantomSpec::default()
            })
            .unwrap()
            .image
        })
        .collect();
    (model, images)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    xs[xs.len() / 2]
}

#[test]
fn loss_trends_downward_over_a_short_run() {
    let (mcfg, images) = mini_train_config();
    let mut model = Model::init(&mcfg).unwrap();
    let sched = ScheduleConfig::default().build().unwrap();
    let refs: Vec<&Image> = images.iter().collect();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 4,
        lr: 1e-3,
        seed: 0,
    };
    let mut opt = OptimizerState::new(&model.params);
    let report = train(&mut model, &mut opt, &sched, &refs, &cfg, 0, |_, _, _| Ok(())).unwrap();
    let losses: Vec<f64> = report.rows.iter().map(|r| r.loss).collect();
    assert!(losses.len() >= 200);
    let tenth = losses.len() / 10;
    let first = median(losses[..tenth].to_vec());
    let last = median(losses[losses.len() - tenth..].to_vec());
    assert!(
        last < first,
        "median loss did not improve: first {first}, last {last}"
    );
}

/// The conditioning pathway must be live end to end: the training loss
/// backpropagates into every encoder tensor, and a short run moves both
/// the encoder weights and the code it assigns a fixed image. A dead or
/// disconnected latent branch would leave all of these untouched.
#[test]
fn encoder_pathway_is_live_and_trains() {
    let (mcfg, images) = mini_train_config();
    let sched = ScheduleConfig::default().build().unwrap();
    let refs: Vec<&Image> = images.iter().collect();
    let x0 = images_to_batch(&refs).unwrap();

    let model = Model::init(&mcfg).unwrap();
    let mut rng = Pcg32::new(7, 0x9100);
    let draws = sample_draws::<f32>(&mcfg, refs.len(), sched.len(), &mut rng);
    let (_, grads) = loss_and_grad(&model.params, &mcfg, &sched, &x0, &draws);
    let mut enc_tensors = 0;
    for (name, g) in grads.iter() {
        if name.starts_with("enc.") {
            enc_tensors += 1;
            let norm = g.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!(
                norm > 0.0,
                "{name}: no gradient reaches this encoder tensor"
            );
        }
    }
    assert!(enc_tensors > 0, "model exposes no encoder parameters");

    // A short run moves the encoder, and with it the image's code.
    let z_init = model.encode(&[&images[0]]).unwrap();
    let mut trained = Model::init(&mcfg).unwrap();
    let mut opt = OptimizerState::new(&trained.params);
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 4,
        lr: 2e-3,
        seed: 0,
    };
    train(&mut trained, &mut opt, &sched, &refs, &cfg, 0, |_, _, _| Ok(())).unwrap();
    let z_trained = trained.encode(&[&images[0]]).unwrap();
    let moved: f64 = z_init
        .iter()
        .zip(z_trained.iter())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(
        moved > 1e-6,
        "training left the encoder's code unchanged: moved {moved}"
    );
}
