use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::{MaskMap, IGNORE_LABEL};
use crate::error::{DriveError, Result};

/// Maps kept class names to one-hot channel indices and, optionally, raw
/// label-map values to those classes. Without a raw map the label-map values
/// are taken to be channel indices already.
#[derive(Debug, Clone)]
pub struct MaskCodec {
    classes: Vec<String>,
    /// raw label value -> channel index; IGNORE always maps to IGNORE.
    raw_map: Option<BTreeMap<u8, u8>>,
}

/// The 19 Cityscapes evaluation classes with their raw label ids.
const CITYSCAPES_EVAL: &[(&str, u8)] = &[
    ("road", 7),
    ("sidewalk", 8),
    ("building", 11),
    ("wall", 12),
    ("fence", 13),
    ("pole", 17),
    ("traffic_light", 19),
    ("traffic_sign", 20),
    ("vegetation", 21),
    ("terrain", 22),
    ("sky", 23),
    ("person", 24),
    ("rider", 25),
    ("car", 26),
    ("truck", 27),
    ("bus", 28),
    ("train", 31),
    ("motorcycle", 32),
    ("bicycle", 33),
];

#[derive(Deserialize)]
struct ClassTableFile {
    c_seg: usize,
    classes: Vec<String>,
    #[serde(default)]
    default_class: Option<String>,
    #[serde(default)]
    raw_map: BTreeMap<String, String>,
}

impl MaskCodec {
    /// Identity codec: label values are channel indices in `[0, c_seg)`.
    pub fn identity(c_seg: usize) -> Self {
        MaskCodec {
            classes: (0..c_seg).map(|i| format!("class_{i}")).collect(),
            raw_map: None,
        }
    }

    /// Default table: the 19 Cityscapes evaluation classes on channels 0-18
    /// plus an aggregate `other` channel for every remaining non-IGNORE
    /// label, 20 channels total.
    pub fn default_cityscapes() -> Self {
        let mut classes: Vec<String> = CITYSCAPES_EVAL.iter().map(|(n, _)| n.to_string()).collect();
        classes.push("other".to_string());
        let other = (classes.len() - 1) as u8;
        let mut raw_map = BTreeMap::new();
        for raw in 0..=254u8 {
            raw_map.insert(raw, other);
        }
        for (i, (_, raw)) in CITYSCAPES_EVAL.iter().enumerate() {
            raw_map.insert(*raw, i as u8);
        }
        MaskCodec {
            classes,
            raw_map: Some(raw_map),
        }
    }

    /// Loads a class-table config file:
    ///
    /// ```toml
    /// c_seg = 20
    /// classes = ["road", "sidewalk", "other"]
    /// default_class = "other"     # optional: catch-all for unlisted labels
    /// [raw_map]                   # optional: raw label value -> class name
    /// "7" = "road"
    /// ```
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DriveError::io(path, e))?;
        let file: ClassTableFile =
            toml::from_str(&text).map_err(|e| DriveError::parse(path, e.to_string()))?;
        if file.classes.len() != file.c_seg {
            return Err(DriveError::Config(format!(
                "class table {}: c_seg = {} but {} classes listed",
                path.display(),
                file.c_seg,
                file.classes.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &file.classes {
            if !seen.insert(c) {
                return Err(DriveError::Config(format!(
                    "class table {}: duplicate class name '{c}'",
                    path.display()
                )));
            }
        }
        let channel_of = |name: &str| -> Result<u8> {
            file.classes
                .iter()
                .position(|c| c == name)
                .map(|i| i as u8)
                .ok_or_else(|| {
                    DriveError::Config(format!(
                        "class table {}: unknown class name '{name}'",
                        path.display()
                    ))
                })
        };
        let raw_map = if file.raw_map.is_empty() && file.default_class.is_none() {
            None
        } else {
            let mut map = BTreeMap::new();
            if let Some(default) = &file.default_class {
                let ch = channel_of(default)?;
                for raw in 0..=254u8 {
                    map.insert(raw, ch);
                }
            }
            for (raw, name) in &file.raw_map {
                let raw: u8 = raw.parse().map_err(|_| {
                    DriveError::Config(format!(
                        "class table {}: raw label '{raw}' is not an 8-bit integer",
                        path.display()
                    ))
                })?;
                if raw == IGNORE_LABEL {
                    return Err(DriveError::Config(format!(
                        "class table {}: raw label 255 is reserved for IGNORE",
                        path.display()
                    )));
                }
                map.insert(raw, channel_of(name)?);
            }
            Some(map)
        };
        Ok(MaskCodec {
            classes: file.classes,
            raw_map,
        })
    }

    pub fn c_seg(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn channel_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Translates a raw label map into channel space. With no raw map this
    /// validates that every label is already a channel index or IGNORE.
    pub fn remap(&self, mask: &MaskMap) -> Result<MaskMap> {
        let c_seg = self.c_seg();
        let mut out = mask.clone();
        for h in 0..mask.h {
            for w in 0..mask.w {
                let raw = mask.get(h, w);
                if raw == IGNORE_LABEL {
                    continue;
                }
                match &self.raw_map {
                    Some(map) => match map.get(&raw) {
                        Some(&ch) => out.set(h, w, ch),
                        None => {
                            return Err(DriveError::MaskLabel {
                                value: raw,
                                row: h,
                                col: w,
                                c_seg,
                            })
                        }
                    },
                    None => {
                        if raw as usize >= c_seg {
                            return Err(DriveError::MaskLabel {
                                value: raw,
                                row: h,
                                col: w,
                                c_seg,
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
