//! Stochastic label-correcting augmentation for training samples.
//!
//! A per-sample gate admits 80% of samples to augmentation; admitted samples
//! then undergo three independent trials (horizontal flip, brightness,
//! shift). Geometric transforms apply the same parameters to all ten frames
//! of a sequence; the flip negates the steering angle and a horizontal shift
//! adds `K * dx_frac` to it. All draws derive from (seed, sample, epoch).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FrameRecord, SequenceSample, Targets, Volume};
use crate::error::{DriveError, Result};
use crate::rng::{self, hash_str, stream};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Fraction of training samples considered for augmentation at all.
    pub gate_p: f64,
    pub flip_p: f64,
    pub brightness_p: f64,
    pub brightness_range: [f64; 2],
    pub shift_p: f64,
    /// Maximum shift as a fraction of (width, height).
    pub max_shift_frac: [f64; 2],
    /// Steering-angle correction per unit of horizontal shift fraction.
    pub angle_per_unit_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            gate_p: 0.8,
            flip_p: 0.5,
            brightness_p: 0.1,
            brightness_range: [0.2, 0.75],
            shift_p: 0.25,
            max_shift_frac: [0.2, 0.1],
            angle_per_unit_shift: 30.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("augment.gate_p", self.gate_p),
            ("augment.flip_p", self.flip_p),
            ("augment.brightness_p", self.brightness_p),
            ("augment.shift_p", self.shift_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DriveError::Config(format!(
                    "{name} = {p} is outside [0, 1]"
                )));
            }
        }
        let [lo, hi] = self.brightness_range;
        if !(lo > 0.0 && hi.is_finite() && lo <= hi) {
            return Err(DriveError::Config(format!(
                "augment.brightness_range = [{lo}, {hi}] must satisfy 0 < lo <= hi"
            )));
        }
        let [mx, my] = self.max_shift_frac;
        if !(0.0..1.0).contains(&mx) || !(0.0..1.0).contains(&my) {
            return Err(DriveError::Config(format!(
                "augment.max_shift_frac = [{mx}, {my}] must lie in [0, 1)"
            )));
        }
        Ok(())
    }
}

/// The transforms drawn for one (sample, epoch); applying a decision is a
/// pure function, so tests can measure draw frequencies directly.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDecision {
    pub gated: bool,
    pub flip: bool,
    pub brightness: Option<f64>,
    /// (dx_frac, dy_frac)
    pub shift: Option<(f64, f64)>,
}

impl AugmentDecision {
    pub const IDENTITY: AugmentDecision = AugmentDecision {
        gated: false,
        flip: false,
        brightness: None,
        shift: None,
    };
}

/// Draw order is fixed: gate, flip coin, brightness coin (+factor),
/// shift coin (+dx, dy). Changing it would silently reshuffle every seeded
/// training run.
pub fn draw_decision(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> AugmentDecision {
    if rng.gen::<f64>() >= cfg.gate_p {
        return AugmentDecision::IDENTITY;
    }
    let flip = rng.gen::<f64>() < cfg.flip_p;
    let brightness = if rng.gen::<f64>() < cfg.brightness_p {
        Some(rng.gen_range(cfg.brightness_range[0]..=cfg.brightness_range[1]))
    } else {
        None
    };
    let shift = if rng.gen::<f64>() < cfg.shift_p {
        let dx = rng.gen_range(-cfg.max_shift_frac[0]..=cfg.max_shift_frac[0]);
        let dy = rng.gen_range(-cfg.max_shift_frac[1]..=cfg.max_shift_frac[1]);
        Some((dx, dy))
    } else {
        None
    };
    AugmentDecision {
        gated: true,
        flip,
        brightness,
        shift,
    }
}

/// Mirrors every frame (image and mask) about the vertical axis and negates
/// the steering angle; speed is unchanged.
pub fn hflip_sample(sample: &SequenceSample) -> SequenceSample {
    let targets = Targets {
        speed: sample.targets.speed,
        angle: -sample.targets.angle,
    };
    sample.map_frames(
        |f| FrameRecord {
            chapter_id: f.chapter_id.clone(),
            frame_index: f.frame_index,
            image: f.image.hflip(),
            mask: f.mask.hflip(),
            speed: f.speed,
            angle: -f.angle,
        },
        targets,
    )
}

/// Scales raw-domain pixels by `factor` and clips to the valid range.
/// Masks and targets are untouched by brightness changes.
pub fn adjust_brightness(image: &Volume, factor: f64) -> Result<Volume> {
    if factor <= 0.0 || !factor.is_finite() {
        return Err(DriveError::InvalidValue(format!(
            "brightness factor must be positive, got {factor}"
        )));
    }
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Translates all ten frames identically by `(round(dx_frac*W),
/// round(dy_frac*H))` pixels. Vacated image pixels are zero-filled, vacated
/// mask pixels become IGNORE. The angle target gains `K * dx_frac`; vertical
/// shift leaves targets unchanged.
pub fn shift_sample(
    sample: &SequenceSample,
    dx_frac: f64,
    dy_frac: f64,
    cfg: &AugmentConfig,
) -> Result<SequenceSample> {
    let [mx, my] = cfg.max_shift_frac;
    if dx_frac.abs() > mx || dy_frac.abs() > my {
        return Err(DriveError::InvalidValue(format!(
            "shift ({dx_frac}, {dy_frac}) exceeds max_shift_frac [{mx}, {my}]"
        )));
    }
    let first = &sample.frames()[0];
    let dx = (dx_frac * first.image.w as f64).round() as isize;
    let dy = (dy_frac * first.image.h as f64).round() as isize;
    let delta = cfg.angle_per_unit_shift * dx_frac;
    let targets = Targets {
        speed: sample.targets.speed,
        angle: sample.targets.angle + delta,
    };
    Ok(sample.map_frames(
        |f| FrameRecord {
            chapter_id: f.chapter_id.clone(),
            frame_index: f.frame_index,
            image: f.image.shift(dx, dy, 0.0),
            mask: f.mask.shift(dx, dy),
            speed: f.speed,
            angle: f.angle + delta,
        },
        targets,
    ))
}

/// Applies a drawn decision in the order flip, brightness, shift.
pub fn apply_decision(
    sample: &SequenceSample,
    decision: &AugmentDecision,
    cfg: &AugmentConfig,
) -> Result<SequenceSample> {
    let mut out = sample.clone();
    if decision.flip {
        out = hflip_sample(&out);
    }
    if let Some(factor) = decision.brightness {
        let targets = out.targets;
        let mut frames = Vec::with_capacity(out.frames().len());
        for f in out.frames() {
            frames.push(FrameRecord {
                chapter_id: f.chapter_id.clone(),
                frame_index: f.frame_index,
                image: adjust_brightness(&f.image, factor)?,
                mask: f.mask.clone(),
                speed: f.speed,
                angle: f.angle,
            });
        }
        out = SequenceSample::from_parts(frames, targets);
    }
    if let Some((dx, dy)) = decision.shift {
        out = shift_sample(&out, dx, dy, cfg)?;
    }
    Ok(out)
}

/// Identifies a sample's random stream: reruns of the same (seed, sample,
/// epoch) produce bit-identical augmentation.
#[derive(Debug, Clone, Copy)]
pub struct AugmentKey<'a> {
    pub seed: u64,
    pub chapter: &'a str,
    pub frame_index: u32,
    pub epoch: usize,
}

pub fn augment_rng(key: AugmentKey<'_>) -> ChaCha8Rng {
    stream(&[
        key.seed,
        rng::tag::AUGMENT,
        hash_str(key.chapter),
        u64::from(key.frame_index),
        key.epoch as u64,
    ])
}

/// Training-split augmentation entry point.
pub fn apply_augmentation(
    sample: &SequenceSample,
    cfg: &AugmentConfig,
    key: AugmentKey<'_>,
) -> Result<SequenceSample> {
    let mut rng = augment_rng(key);
    let decision = draw_decision(cfg, &mut rng);
    apply_decision(sample, &decision, cfg)
}

#[cfg(test)]
mod tests;
