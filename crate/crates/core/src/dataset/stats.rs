use serde::{Deserialize, Serialize};
use std::path::Path;

use super::manifest::for_each_distinct_frame;
use super::{ManifestSet, SampleSet, SequenceSample, Targets, VecSampleSet, Volume};
use crate::error::{DriveError, Result};

/// Standard deviations are floored here so constant-valued shards cannot
/// produce a division by zero.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel image statistics and per-target scalar statistics, computed
/// on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub image_mean: [f64; 3],
    pub image_std: [f64; 3],
    pub speed_mean: f64,
    pub speed_std: f64,
    pub angle_mean: f64,
    pub angle_std: f64,
}

impl NormStats {
    /// Identity statistics (mean 0, std 1); used by tests working in
    /// already-normalized space.
    pub fn identity() -> Self {
        NormStats {
            image_mean: [0.0; 3],
            image_std: [1.0; 3],
            speed_mean: 0.0,
            speed_std: 1.0,
            angle_mean: 0.0,
            angle_std: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.image_std[0],
            self.image_std[1],
            self.image_std[2],
            self.speed_std,
            self.angle_std,
        ];
        if all.iter().any(|s| !s.is_finite() || *s < STD_FLOOR) {
            return Err(DriveError::InvalidValue(format!(
                "normalization stds must be >= {STD_FLOOR}: {all:?}"
            )));
        }
        Ok(())
    }

    /// `(x - mean) / std` per RGB channel.
    pub fn normalize_image(&self, image: &Volume) -> Volume {
        assert_eq!(image.c, 3, "normalize_image expects 3 channels");
        let mut out = image.clone();
        let plane = image.h * image.w;
        for c in 0..3 {
            let (m, s) = (self.image_mean[c], self.image_std[c]);
            for v in &mut out.data_mut()[c * plane..(c + 1) * plane] {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn normalize_targets(&self, t: Targets) -> Targets {
        Targets {
            speed: (t.speed - self.speed_mean) / self.speed_std,
            angle: (t.angle - self.angle_mean) / self.angle_std,
        }
    }

    /// Exact inverse of [`NormStats::normalize_targets`].
    pub fn denormalize_targets(&self, t: Targets) -> Targets {
        Targets {
            speed: t.speed * self.speed_std + self.speed_mean,
            angle: t.angle * self.angle_std + self.angle_mean,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self).expect("stats serialize"),
        )
        .map_err(|e| DriveError::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(DriveError::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| DriveError::io(path, e))?;
        let stats: NormStats =
            serde_json::from_str(&text).map_err(|e| DriveError::parse(path, e.to_string()))?;
        stats.validate()?;
        Ok(stats)
    }
}

/// Anything statistics can be computed over: distinct retained frames plus
/// per-sample targets, visited in a deterministic order.
pub trait StatsSource {
    fn for_each_frame(&self, f: &mut dyn FnMut(&Volume)) -> Result<()>;
    fn for_each_target(&self, f: &mut dyn FnMut(Targets)) -> Result<()>;
}

impl StatsSource for ManifestSet {
    fn for_each_frame(&self, f: &mut dyn FnMut(&Volume)) -> Result<()> {
        for_each_distinct_frame(self, f)
    }

    fn for_each_target(&self, f: &mut dyn FnMut(Targets)) -> Result<()> {
        for e in &self.manifest().entries {
            f(Targets {
                speed: e.speed,
                angle: e.angle,
            });
        }
        Ok(())
    }
}

impl StatsSource for VecSampleSet {
    fn for_each_frame(&self, f: &mut dyn FnMut(&Volume)) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..self.len() {
            let sample: SequenceSample = self.get(i)?;
            for frame in sample.frames() {
                if seen.insert((frame.chapter_id.clone(), frame.frame_index)) {
                    f(&frame.image);
                }
            }
        }
        Ok(())
    }

    fn for_each_target(&self, f: &mut dyn FnMut(Targets)) -> Result<()> {
        for i in 0..self.len() {
            f(self.get(i)?.targets);
        }
        Ok(())
    }
}

/// Population mean/std over all retained training pixels (per RGB channel)
/// and over the per-sample speed and angle targets. Stds are clamped to
/// [`STD_FLOOR`]. Deterministic: sequential accumulation in source order.
pub fn compute_norm_stats(source: &dyn StatsSource) -> Result<NormStats> {
    let mut count = 0u64;
    let mut sum = [0.0f64; 3];
    let mut sumsq = [0.0f64; 3];
    source.for_each_frame(&mut |image| {
        let plane = image.h * image.w;
        for c in 0..3 {
            for &v in &image.data()[c * plane..(c + 1) * plane] {
                sum[c] += v;
                sumsq[c] += v * v;
            }
        }
        count += plane as u64;
    })?;
    if count == 0 {
        return Err(DriveError::Empty {
            what: "training manifest (norm stats)".into(),
        });
    }

    let mut t_count = 0u64;
    let mut t_sum = [0.0f64; 2];
    let mut t_sumsq = [0.0f64; 2];
    source.for_each_target(&mut |t| {
        t_sum[0] += t.speed;
        t_sumsq[0] += t.speed * t.speed;
        t_sum[1] += t.angle;
        t_sumsq[1] += t.angle * t.angle;
        t_count += 1;
    })?;
    if t_count == 0 {
        return Err(DriveError::Empty {
            what: "training manifest (target stats)".into(),
        });
    }

    let n = count as f64;
    let mut image_mean = [0.0; 3];
    let mut image_std = [0.0; 3];
    for c in 0..3 {
        image_mean[c] = sum[c] / n;
        let var = (sumsq[c] / n - image_mean[c] * image_mean[c]).max(0.0);
        image_std[c] = var.sqrt().max(STD_FLOOR);
    }
    let tn = t_count as f64;
    let mean_of = |i: usize| t_sum[i] / tn;
    let std_of = |i: usize| {
        let m = mean_of(i);
        ((t_sumsq[i] / tn - m * m).max(0.0)).sqrt().max(STD_FLOOR)
    };
    Ok(NormStats {
        image_mean,
        image_std,
        speed_mean: mean_of(0),
        speed_std: std_of(0),
        angle_mean: mean_of(1),
        angle_std: std_of(1),
    })
}
