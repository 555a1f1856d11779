//! Ingestion of raw frames and segmentation label maps into normalized,
//! channel-concatenated sequence samples.
//!
//! Pixel domain convention: images are f64 in `[0, 1]` (8-bit values divided
//! by 255) until [`NormStats`] normalization; mask labels are class indices
//! in `[0, C_seg)` with 255 reserved as IGNORE.

mod codec;
mod image_io;
mod manifest;
mod stats;

pub use codec::MaskCodec;
pub use image_io::{load_image_rgb, load_mask, save_image_rgb, save_mask};
pub use manifest::{
    build_manifests, Manifest, ManifestEntry, ManifestSet, Provenance, Split, SplitConfig,
};
pub use stats::{compute_norm_stats, NormStats, StatsSource, STD_FLOOR};

use crate::error::{DriveError, Result};

/// Target frame height after spatial downsampling.
pub const FRAME_H: usize = 90;
/// Target frame width after spatial downsampling.
pub const FRAME_W: usize = 160;
/// Raw capture height.
pub const RAW_H: usize = 1080;
/// Raw capture width.
pub const RAW_W: usize = 1920;
/// Spatial downsampling factor (1:12 per dimension).
pub const SPATIAL_FACTOR: usize = 12;
/// Mask label for pixels with no class.
pub const IGNORE_LABEL: u8 = 255;
/// Frames per sequence sample (t = -9 s ..= 0 s at 1 Hz).
pub const SEQ_LEN: usize = 10;

/// Channel-major (CHW) float image plane stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl Volume {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Volume {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "volume data length");
        Volume { c, h, w, data }
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[(c * self.h + h) * self.w + w]
    }

    #[inline]
    pub fn set(&mut self, c: usize, h: usize, w: usize, v: f64) {
        self.data[(c * self.h + h) * self.w + w] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Mirror about the vertical axis: pixel (h, w) moves to (h, W-1-w).
    pub fn hflip(&self) -> Volume {
        let mut out = Volume::zeros(self.c, self.h, self.w);
        for c in 0..self.c {
            for h in 0..self.h {
                for w in 0..self.w {
                    out.set(c, h, w, self.get(c, h, self.w - 1 - w));
                }
            }
        }
        out
    }

    /// Translate by (dx, dy) pixels (positive moves content right/down);
    /// vacated pixels take `fill`.
    pub fn shift(&self, dx: isize, dy: isize, fill: f64) -> Volume {
        let mut out = Volume::zeros(self.c, self.h, self.w);
        for c in 0..self.c {
            for h in 0..self.h {
                let src_h = h as isize - dy;
                for w in 0..self.w {
                    let src_w = w as isize - dx;
                    let v = if src_h < 0
                        || src_w < 0
                        || src_h >= self.h as isize
                        || src_w >= self.w as isize
                    {
                        fill
                    } else {
                        self.get(c, src_h as usize, src_w as usize)
                    };
                    out.set(c, h, w, v);
                }
            }
        }
        out
    }
}

/// Single-channel 8-bit label map.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMap {
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl MaskMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), h * w, "mask data length");
        MaskMap { h, w, data }
    }

    pub fn filled(h: usize, w: usize, label: u8) -> Self {
        MaskMap {
            h,
            w,
            data: vec![label; h * w],
        }
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize) -> u8 {
        self.data[h * self.w + w]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, v: u8) {
        self.data[h * self.w + w] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn hflip(&self) -> MaskMap {
        let mut out = self.clone();
        for h in 0..self.h {
            for w in 0..self.w {
                out.set(h, w, self.get(h, self.w - 1 - w));
            }
        }
        out
    }

    /// Translate like [`Volume::shift`]; vacated pixels become IGNORE.
    pub fn shift(&self, dx: isize, dy: isize) -> MaskMap {
        let mut out = MaskMap::filled(self.h, self.w, IGNORE_LABEL);
        for h in 0..self.h {
            let src_h = h as isize - dy;
            if src_h < 0 || src_h >= self.h as isize {
                continue;
            }
            for w in 0..self.w {
                let src_w = w as isize - dx;
                if src_w < 0 || src_w >= self.w as isize {
                    continue;
                }
                out.set(h, w, self.get(src_h as usize, src_w as usize));
            }
        }
        out
    }
}

/// One timestamped camera frame with its label map and ground-truth targets.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub chapter_id: String,
    /// Index at 1 Hz after temporal downsampling.
    pub frame_index: u32,
    /// 3-channel image, `[0, 1]` domain, 90x160.
    pub image: Volume,
    pub mask: MaskMap,
    pub speed: f64,
    pub angle: f64,
}

/// Prediction targets in dataset-native units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Targets {
    pub speed: f64,
    pub angle: f64,
}

/// Ten consecutive 1 Hz frames ending at the prediction instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    frames: Vec<FrameRecord>,
    pub targets: Targets,
}

impl SequenceSample {
    /// Validates the sequence invariants: exactly [`SEQ_LEN`] frames, one
    /// chapter, strictly consecutive frame indices, finite targets.
    pub fn new(frames: Vec<FrameRecord>) -> Result<Self> {
        if frames.len() != SEQ_LEN {
            return Err(DriveError::shape(
                "sequence sample",
                format!("{SEQ_LEN} frames"),
                format!("{} frames", frames.len()),
            ));
        }
        let chapter = frames[0].chapter_id.clone();
        for pair in frames.windows(2) {
            if pair[1].chapter_id != chapter {
                return Err(DriveError::InvalidValue(format!(
                    "sequence crosses chapters {} and {}",
                    chapter, pair[1].chapter_id
                )));
            }
            if pair[1].frame_index != pair[0].frame_index + 1 {
                return Err(DriveError::InvalidValue(format!(
                    "non-consecutive frame indices {} -> {}",
                    pair[0].frame_index, pair[1].frame_index
                )));
            }
        }
        let last = frames.last().expect("non-empty");
        let targets = Targets {
            speed: last.speed,
            angle: last.angle,
        };
        if !targets.speed.is_finite() || !targets.angle.is_finite() {
            return Err(DriveError::InvalidValue(format!(
                "non-finite targets in chapter {chapter}"
            )));
        }
        Ok(SequenceSample { frames, targets })
    }

    pub fn frames(&self) -> &[FrameRecord] {
        &self.frames
    }

    /// The frame at the prediction instant (t = 0).
    pub fn latest(&self) -> &FrameRecord {
        self.frames.last().expect("non-empty")
    }

    pub(crate) fn from_parts(frames: Vec<FrameRecord>, targets: Targets) -> Self {
        SequenceSample { frames, targets }
    }

    pub fn map_frames(&self, f: impl Fn(&FrameRecord) -> FrameRecord, targets: Targets) -> Self {
        SequenceSample {
            frames: self.frames.iter().map(f).collect(),
            targets,
        }
    }
}

/// Access to raw (un-normalized) samples; backed by memory or a manifest.
pub trait SampleSet {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn get(&self, idx: usize) -> Result<SequenceSample>;
}

/// In-memory sample set for tests and synthetic data.
pub struct VecSampleSet(pub Vec<SequenceSample>);

impl SampleSet for VecSampleSet {
    fn len(&self) -> usize {
        self.0.len()
    }
    fn get(&self, idx: usize) -> Result<SequenceSample> {
        Ok(self.0[idx].clone())
    }
}

/// Area-averaging downsample of a 1080x1920x3 image to 90x160x3; an input
/// already at the target size passes through unchanged.
pub fn resize_frame(image: &Volume) -> Result<Volume> {
    if image.c != 3 {
        return Err(DriveError::shape(
            "resize_frame",
            "3 channels",
            format!("{} channels", image.c),
        ));
    }
    if image.h == FRAME_H && image.w == FRAME_W {
        return Ok(image.clone());
    }
    if image.h == RAW_H && image.w == RAW_W {
        return Ok(area_downsample(image, SPATIAL_FACTOR));
    }
    Err(DriveError::shape(
        "resize_frame",
        format!("{RAW_H}x{RAW_W} or {FRAME_H}x{FRAME_W}"),
        format!("{}x{}", image.h, image.w),
    ))
}

/// Block mean over `factor x factor` tiles; exact for integer factors.
pub fn area_downsample(image: &Volume, factor: usize) -> Volume {
    let oh = image.h / factor;
    let ow = image.w / factor;
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = Volume::zeros(image.c, oh, ow);
    for c in 0..image.c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for di in 0..factor {
                    for dj in 0..factor {
                        acc += image.get(c, i * factor + di, j * factor + dj);
                    }
                }
                out.set(c, i, j, acc * norm);
            }
        }
    }
    out
}

/// Nearest-neighbor downsample for label maps (no interpolation).
pub fn resize_mask(mask: &MaskMap) -> Result<MaskMap> {
    if mask.h == FRAME_H && mask.w == FRAME_W {
        return Ok(mask.clone());
    }
    if mask.h == RAW_H && mask.w == RAW_W {
        let f = SPATIAL_FACTOR;
        let mut out = MaskMap::filled(FRAME_H, FRAME_W, 0);
        for i in 0..FRAME_H {
            for j in 0..FRAME_W {
                out.set(i, j, mask.get(i * f + f / 2, j * f + f / 2));
            }
        }
        return Ok(out);
    }
    Err(DriveError::shape(
        "resize_mask",
        format!("{RAW_H}x{RAW_W} or {FRAME_H}x{FRAME_W}"),
        format!("{}x{}", mask.h, mask.w),
    ))
}

/// Expands a label map into `C_seg` binary channels; IGNORE pixels become
/// the all-zero vector.
pub fn encode_mask_onehot(mask: &MaskMap, codec: &MaskCodec) -> Result<Volume> {
    let c_seg = codec.c_seg();
    let mut out = Volume::zeros(c_seg, mask.h, mask.w);
    for h in 0..mask.h {
        for w in 0..mask.w {
            let label = mask.get(h, w);
            if label == IGNORE_LABEL {
                continue;
            }
            if label as usize >= c_seg {
                return Err(DriveError::MaskLabel {
                    value: label,
                    row: h,
                    col: w,
                    c_seg,
                });
            }
            out.set(label as usize, h, w, 1.0);
        }
    }
    Ok(out)
}

/// Concatenates RGB channels with mask channels: output channel order is
/// `[R, G, B, mask 0, mask 1, ...]`.
pub fn concat_channels(image: &Volume, onehot: &Volume) -> Result<Volume> {
    if image.h != onehot.h || image.w != onehot.w {
        return Err(DriveError::shape(
            "concat_channels",
            format!("{}x{}", image.h, image.w),
            format!("{}x{}", onehot.h, onehot.w),
        ));
    }
    let mut data = Vec::with_capacity((image.c + onehot.c) * image.h * image.w);
    data.extend_from_slice(image.data());
    data.extend_from_slice(onehot.data());
    Ok(Volume::from_vec(image.c + onehot.c, image.h, image.w, data))
}

/// Stacks the ten per-frame volumes along the channel axis, oldest first.
pub fn stack_sequence(frames: &[Volume]) -> Result<Volume> {
    if frames.len() != SEQ_LEN {
        return Err(DriveError::shape(
            "stack_sequence",
            format!("{SEQ_LEN} frames"),
            format!("{} frames", frames.len()),
        ));
    }
    let (c, h, w) = (frames[0].c, frames[0].h, frames[0].w);
    let mut data = Vec::with_capacity(SEQ_LEN * c * h * w);
    for f in frames {
        if f.c != c || f.h != h || f.w != w {
            return Err(DriveError::shape(
                "stack_sequence",
                format!("{c}x{h}x{w}"),
                format!("{}x{}x{}", f.c, f.h, f.w),
            ));
        }
        data.extend_from_slice(f.data());
    }
    Ok(Volume::from_vec(SEQ_LEN * c, h, w, data))
}

/// Inverse of [`stack_sequence`].
pub fn unstack_sequence(stacked: &Volume, per_frame_c: usize) -> Vec<Volume> {
    assert_eq!(stacked.c % per_frame_c, 0, "channel count not divisible");
    let n = stacked.c / per_frame_c;
    let block = per_frame_c * stacked.h * stacked.w;
    (0..n)
        .map(|i| {
            Volume::from_vec(
                per_frame_c,
                stacked.h,
                stacked.w,
                stacked.data()[i * block..(i + 1) * block].to_vec(),
            )
        })
        .collect()
}

/// Normalized model-ready volume for one frame: normalized RGB concatenated
/// with the one-hot mask channels.
pub fn encode_frame(frame: &FrameRecord, stats: &NormStats, codec: &MaskCodec) -> Result<Volume> {
    let image = stats.normalize_image(&frame.image);
    let onehot = encode_mask_onehot(&frame.mask, codec)?;
    concat_channels(&image, &onehot)
}

#[cfg(test)]
mod tests;
