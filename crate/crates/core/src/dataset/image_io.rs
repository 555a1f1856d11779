use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use super::{MaskMap, Volume};
use crate::error::{DriveError, Result};

/// Loads an RGB PNG into a `[0, 1]` CHW volume.
pub fn load_image_rgb(path: &Path) -> Result<Volume> {
    let img = image::open(path).map_err(|e| DriveError::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Volume::zeros(3, h, w);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, f64::from(p.0[c]) / 255.0);
        }
    }
    Ok(out)
}

/// Loads a single-channel 8-bit label map; rejects other pixel formats since
/// conversion would corrupt labels.
pub fn load_mask(path: &Path) -> Result<MaskMap> {
    let img = image::open(path).map_err(|e| DriveError::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    match img {
        DynamicImage::ImageLuma8(gray) => {
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            Ok(MaskMap::new(h, w, gray.into_raw()))
        }
        other => Err(DriveError::parse(
            path,
            format!(
                "mask must be a single-channel 8-bit label map, got {:?}",
                other.color()
            ),
        )),
    }
}

/// Writes a `[0, 1]` CHW volume as an 8-bit RGB PNG.
pub fn save_image_rgb(image: &Volume, path: &Path) -> Result<()> {
    assert_eq!(image.c, 3, "save_image_rgb expects 3 channels");
    let mut rgb = RgbImage::new(image.w as u32, image.h as u32);
    for (x, y, p) in rgb.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = image.get(c, y as usize, x as usize).clamp(0.0, 1.0);
            p.0[c] = (v * 255.0).round() as u8;
        }
    }
    rgb.save(path).map_err(|e| DriveError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn save_mask(mask: &MaskMap, path: &Path) -> Result<()> {
    let gray = GrayImage::from_raw(mask.w as u32, mask.h as u32, mask.data().to_vec())
        .expect("mask buffer size");
    gray.save(path).map_err(|e| DriveError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}
