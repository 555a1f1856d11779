use rand::Rng;

use super::*;
use crate::dataset::{FrameRecord, MaskMap, SequenceSample, IGNORE_LABEL, SEQ_LEN};
use crate::rng::stream;

fn test_sample(h: usize, w: usize) -> SequenceSample {
    let mut rng = stream(&[30]);
    let frames: Vec<FrameRecord> = (0..SEQ_LEN as u32)
        .map(|i| {
            let data: Vec<f64> = (0..3 * h * w).map(|_| rng.gen::<f64>()).collect();
            let labels: Vec<u8> = (0..h * w)
                .map(|_| {
                    if rng.gen::<f64>() < 0.1 {
                        IGNORE_LABEL
                    } else {
                        rng.gen_range(0..20)
                    }
                })
                .collect();
            FrameRecord {
                chapter_id: "ch".into(),
                frame_index: i,
                image: Volume::from_vec(3, h, w, data),
                mask: MaskMap::new(h, w, labels),
                speed: 14.0,
                angle: 3.2,
            }
        })
        .collect();
    SequenceSample::new(frames).unwrap()
}

#[test]
fn flip_negates_angle_and_keeps_speed() {
    let s = test_sample(6, 8);
    let f = hflip_sample(&s);
    assert_eq!(f.targets.angle, -3.2);
    assert_eq!(f.targets.speed, 14.0);
    for frame in f.frames() {
        assert_eq!(frame.angle, -3.2);
        assert_eq!(frame.speed, 14.0);
    }
}

#[test]
fn flip_is_an_involution() {
    let s = test_sample(6, 8);
    assert_eq!(hflip_sample(&hflip_sample(&s)), s);
}

#[test]
fn flip_mirrors_every_mask_pixel() {
    let s = test_sample(5, 7);
    let f = hflip_sample(&s);
    let w = 7;
    for (orig, flipped) in s.frames().iter().zip(f.frames()) {
        for hh in 0..5 {
            for ww in 0..w {
                assert_eq!(flipped.mask.get(hh, ww), orig.mask.get(hh, w - 1 - ww));
                assert_eq!(flipped.image.get(0, hh, ww), orig.image.get(0, hh, w - 1 - ww));
            }
        }
    }
}

#[test]
fn brightness_scales_pixels() {
    // the 8-bit value 100 scaled by 0.5 becomes 50
    let img = Volume::from_vec(1, 1, 2, vec![100.0 / 255.0, 200.0 / 255.0]);
    let out = adjust_brightness(&img, 0.5).unwrap();
    assert!((out.get(0, 0, 0) - 50.0 / 255.0).abs() < 1e-15);
    assert!((out.get(0, 0, 1) - 100.0 / 255.0).abs() < 1e-15);
}

#[test]
fn brightness_factor_one_is_identity_and_output_stays_in_range() {
    let img = Volume::from_vec(1, 1, 3, vec![0.0, 0.5, 1.0]);
    assert_eq!(adjust_brightness(&img, 1.0).unwrap(), img);
    let bright = adjust_brightness(&img, 3.0).unwrap();
    assert!(bright.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn brightness_rejects_non_positive_factor() {
    let img = Volume::zeros(1, 1, 1);
    assert!(adjust_brightness(&img, 0.0).is_err());
    assert!(adjust_brightness(&img, -0.5).is_err());
}

#[test]
fn sampled_brightness_factors_stay_in_declared_range() {
    let cfg = AugmentConfig::default();
    let mut rng = stream(&[31]);
    let mut seen = 0u32;
    for _ in 0..100_000 {
        let d = draw_decision(&cfg, &mut rng);
        if let Some(f) = d.brightness {
            assert!((0.2..=0.75).contains(&f), "factor {f} out of range");
            seen += 1;
        }
    }
    assert!(seen > 1000, "brightness fired {seen} times");
}

#[test]
fn zero_shift_is_identity() {
    let s = test_sample(6, 8);
    let cfg = AugmentConfig::default();
    let out = shift_sample(&s, 0.0, 0.0, &cfg).unwrap();
    assert_eq!(out, s);
}

#[test]
fn shift_adjusts_angle_by_k_times_dx() {
    let s = test_sample(6, 8);
    let cfg = AugmentConfig::default(); // K = 30
    let out = shift_sample(&s, 0.1, 0.0, &cfg).unwrap();
    assert!((out.targets.angle - (3.2 + 3.0)).abs() < 1e-12);
    assert_eq!(out.targets.speed, 14.0);
    // vertical shift leaves targets unchanged
    let vert = shift_sample(&s, 0.0, 0.1, &cfg).unwrap();
    assert_eq!(vert.targets, s.targets);
}

#[test]
fn shift_moves_content_and_fills_vacated_pixels() {
    let s = test_sample(90, 160);
    let cfg = AugmentConfig::default();
    let out = shift_sample(&s, 0.1, 0.0, &cfg).unwrap();
    for (orig, shifted) in s.frames().iter().zip(out.frames()) {
        for h in 0..90 {
            // leftmost 16 image columns are zero, masks IGNORE
            for w in 0..16 {
                assert_eq!(shifted.image.get(0, h, w), 0.0);
                assert_eq!(shifted.mask.get(h, w), IGNORE_LABEL);
            }
            for w in 16..160 {
                assert_eq!(shifted.image.get(1, h, w), orig.image.get(1, h, w - 16));
                assert_eq!(shifted.mask.get(h, w), orig.mask.get(h, w - 16));
            }
        }
    }
}

#[test]
fn shift_rejects_out_of_range_fractions() {
    let s = test_sample(6, 8);
    let cfg = AugmentConfig::default();
    assert!(shift_sample(&s, 0.25, 0.0, &cfg).is_err());
    assert!(shift_sample(&s, 0.0, 0.2, &cfg).is_err());
}

#[test]
fn disabled_gate_passes_samples_through() {
    let s = test_sample(6, 8);
    let cfg = AugmentConfig {
        gate_p: 0.0,
        ..AugmentConfig::default()
    };
    for epoch in 0..20 {
        let key = AugmentKey {
            seed: 9,
            chapter: "ch",
            frame_index: 9,
            epoch,
        };
        assert_eq!(apply_augmentation(&s, &cfg, key).unwrap(), s);
    }
}

#[test]
fn augmentation_is_deterministic_per_key() {
    let s = test_sample(12, 20);
    let cfg = AugmentConfig::default();
    let key = AugmentKey {
        seed: 1234,
        chapter: "ch",
        frame_index: 9,
        epoch: 3,
    };
    let a = apply_augmentation(&s, &cfg, key).unwrap();
    let b = apply_augmentation(&s, &cfg, key).unwrap();
    assert_eq!(a, b, "same key must give bit-identical output");
    // different epoch gives a different stream
    let c = apply_augmentation(
        &s,
        &cfg,
        AugmentKey {
            epoch: 4,
            ..key
        },
    )
    .unwrap();
    let d = apply_augmentation(
        &s,
        &cfg,
        AugmentKey {
            epoch: 5,
            ..key
        },
    )
    .unwrap();
    assert!(c != d || a != c, "epochs should not all collide");
}

#[test]
fn geometric_transforms_are_sequence_consistent() {
    let s = test_sample(12, 20);
    let cfg = AugmentConfig::default();
    // scan epochs until both flip and shift have been observed
    let mut saw_flip = false;
    let mut saw_shift = false;
    for epoch in 0..100 {
        let key = AugmentKey {
            seed: 77,
            chapter: "ch",
            frame_index: 9,
            epoch,
        };
        let mut rng = augment_rng(key);
        let d = draw_decision(&cfg, &mut rng);
        if d.flip {
            saw_flip = true;
        }
        if d.shift.is_some() {
            saw_shift = true;
        }
        let out = apply_decision(&s, &d, &cfg).unwrap();
        // identical parameters across frames: transforming frame i of the
        // input individually must equal frame i of the output
        for (orig, got) in s.frames().iter().zip(out.frames()) {
            let single = SequenceSample::from_parts(
                vec![orig.clone(); 1],
                Targets {
                    speed: orig.speed,
                    angle: orig.angle,
                },
            );
            let single_out = apply_decision(&single, &d, &cfg).unwrap();
            assert_eq!(single_out.frames()[0].image, got.image, "epoch {epoch}");
            assert_eq!(single_out.frames()[0].mask, got.mask, "epoch {epoch}");
        }
    }
    assert!(saw_flip && saw_shift);
}

#[test]
fn gate_frequencies_converge_to_configured_probabilities() {
    let cfg = AugmentConfig::default();
    let n = 100_000usize;
    let mut gated = 0usize;
    let mut flips = 0usize;
    let mut brightness = 0usize;
    let mut shifts = 0usize;
    for i in 0..n {
        let key = AugmentKey {
            seed: 4242,
            chapter: "mc",
            frame_index: i as u32,
            epoch: 0,
        };
        let mut rng = augment_rng(key);
        let d = draw_decision(&cfg, &mut rng);
        if d.gated {
            gated += 1;
            if d.flip {
                flips += 1;
            }
            if d.brightness.is_some() {
                brightness += 1;
            }
            if d.shift.is_some() {
                shifts += 1;
            }
        }
    }
    // binomial 3-sigma bounds
    let check = |count: usize, trials: usize, p: f64, name: &str| {
        let freq = count as f64 / trials as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        assert!(
            (freq - p).abs() < 3.0 * sigma,
            "{name}: {freq} vs {p} (3 sigma = {})",
            3.0 * sigma
        );
    };
    check(gated, n, 0.8, "gate");
    check(flips, gated, 0.5, "flip | gated");
    check(brightness, gated, 0.1, "brightness | gated");
    check(shifts, gated, 0.25, "shift | gated");
}

#[test]
fn config_validation_rejects_bad_probabilities() {
    let mut cfg = AugmentConfig::default();
    cfg.flip_p = 1.5;
    let err = cfg.validate().unwrap_err();
    assert!(err.to_string().contains("flip_p"), "{err}");
    let mut cfg = AugmentConfig::default();
    cfg.brightness_range = [0.0, 0.5];
    assert!(cfg.validate().is_err());
    let mut cfg = AugmentConfig::default();
    cfg.max_shift_frac = [1.0, 0.1];
    assert!(cfg.validate().is_err());
}
