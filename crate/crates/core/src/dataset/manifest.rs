use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    load_image_rgb, load_mask, resize_frame, resize_mask, FrameRecord, MaskCodec, SampleSet,
    SequenceSample, Targets, Volume, SEQ_LEN,
};
use crate::error::{DriveError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Chapter -> split assignment. Chapters not listed are skipped.
#[derive(Debug, Clone, Default)]
pub struct SplitConfig {
    map: BTreeMap<String, Split>,
}

impl SplitConfig {
    pub fn new(
        train: &[String],
        validation: &[String],
        test: &[String],
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (chapters, split) in [
            (train, Split::Train),
            (validation, Split::Validation),
            (test, Split::Test),
        ] {
            for ch in chapters {
                if let Some(prev) = map.insert(ch.clone(), split) {
                    return Err(DriveError::Config(format!(
                        "chapter '{ch}' assigned to both {} and {}",
                        prev.as_str(),
                        split.as_str()
                    )));
                }
            }
        }
        Ok(SplitConfig { map })
    }

    pub fn split_of(&self, chapter: &str) -> Option<Split> {
        self.map.get(chapter).copied()
    }

    pub fn chapters(&self, split: Split) -> impl Iterator<Item = &str> {
        self.map
            .iter()
            .filter(move |(_, &s)| s == split)
            .map(|(c, _)| c.as_str())
    }
}

/// One sequence sample: paths to its ten frames plus the t=0 targets.
/// Serialized as one JSON object per manifest line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub chapter: String,
    pub frame_indices: Vec<u32>,
    pub image_paths: Vec<String>,
    pub mask_paths: Vec<String>,
    pub speed: f64,
    pub angle: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub source_root: String,
    pub temporal_factor: u32,
    pub spatial_factor: u32,
    pub seed: u64,
}

impl Default for Provenance {
    fn default() -> Self {
        Provenance {
            source_root: String::new(),
            temporal_factor: 10,
            spatial_factor: super::SPATIAL_FACTOR as u32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ManifestMeta {
    split: Split,
    provenance: Provenance,
    entry_count: usize,
}

impl Manifest {
    /// Writes entries as JSON-lines plus a `<path>.meta.json` sidecar with
    /// split and provenance.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| DriveError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for entry in &self.entries {
            let line = serde_json::to_string(entry)
                .map_err(|e| DriveError::parse(path, e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| DriveError::io(path, e))?;
        }
        w.flush().map_err(|e| DriveError::io(path, e))?;
        let meta = ManifestMeta {
            split: self.split,
            provenance: self.provenance.clone(),
            entry_count: self.entries.len(),
        };
        let meta_path = sidecar_path(path);
        std::fs::write(
            &meta_path,
            serde_json::to_string_pretty(&meta).expect("meta serializes"),
        )
        .map_err(|e| DriveError::io(&meta_path, e))?;
        Ok(())
    }

    /// Reads a JSON-lines manifest; the sidecar is optional (split falls
    /// back to the caller's and provenance to defaults).
    pub fn read_jsonl(path: &Path, split: Split) -> Result<Self> {
        if !path.exists() {
            return Err(DriveError::MissingFile(path.to_path_buf()));
        }
        let file = std::fs::File::open(path).map_err(|e| DriveError::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| DriveError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| DriveError::parse(path, format!("line {}: {e}", i + 1)))?;
            if entry.frame_indices.len() != SEQ_LEN
                || entry.image_paths.len() != SEQ_LEN
                || entry.mask_paths.len() != SEQ_LEN
            {
                return Err(DriveError::parse(
                    path,
                    format!("line {}: entry does not reference {SEQ_LEN} frames", i + 1),
                ));
            }
            entries.push(entry);
        }
        let (split, provenance) = match std::fs::read_to_string(sidecar_path(path)) {
            Ok(text) => {
                let meta: ManifestMeta = serde_json::from_str(&text)
                    .map_err(|e| DriveError::parse(sidecar_path(path), e.to_string()))?;
                (meta.split, meta.provenance)
            }
            Err(_) => (split, Provenance::default()),
        };
        Ok(Manifest {
            split,
            entries,
            provenance,
        })
    }

    /// Chapters referenced by this manifest.
    pub fn chapters(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.chapter.as_str()).collect()
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Scans `data_root` and builds one manifest per split.
///
/// Expected layout per chapter: `frames/<index>.png`, `masks/<index>.png`
/// and `targets.csv` with columns `frame,speed,angle`, all indexed at the
/// raw capture rate. Frames where `index % temporal_factor != 0` are
/// dropped; retained frames get 1 Hz indices `index / temporal_factor`.
/// Every run of ten consecutive retained frames yields one entry (stride 1).
pub fn build_manifests(
    data_root: &Path,
    splits: &SplitConfig,
    temporal_factor: u32,
    seed: u64,
) -> Result<BTreeMap<Split, Manifest>> {
    if temporal_factor == 0 {
        return Err(DriveError::Config("temporal_factor must be >= 1".into()));
    }
    if !data_root.is_dir() {
        return Err(DriveError::MissingFile(data_root.to_path_buf()));
    }
    let mut chapters: Vec<String> = std::fs::read_dir(data_root)
        .map_err(|e| DriveError::io(data_root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    chapters.sort();

    let provenance = Provenance {
        source_root: data_root.display().to_string(),
        temporal_factor,
        spatial_factor: super::SPATIAL_FACTOR as u32,
        seed,
    };
    let mut manifests: BTreeMap<Split, Manifest> = BTreeMap::new();
    for split in [Split::Train, Split::Validation, Split::Test] {
        manifests.insert(
            split,
            Manifest {
                split,
                entries: Vec::new(),
                provenance: provenance.clone(),
            },
        );
    }

    for chapter in &chapters {
        let split = match splits.split_of(chapter) {
            Some(s) => s,
            None => {
                log::info!("chapter {chapter}: not assigned to any split, skipping");
                continue;
            }
        };
        let retained = scan_chapter(data_root, chapter, temporal_factor)?;
        let entries = windows_of(chapter, &retained);
        log::info!(
            "chapter {chapter}: {} retained frames, {} samples ({})",
            retained.len(),
            entries.len(),
            split.as_str()
        );
        manifests
            .get_mut(&split)
            .expect("split present")
            .entries
            .extend(entries);
    }
    Ok(manifests)
}

struct RetainedFrame {
    /// 1 Hz index (raw index / temporal factor).
    index: u32,
    image_path: String,
    mask_path: String,
    speed: f64,
    angle: f64,
}

fn scan_chapter(
    data_root: &Path,
    chapter: &str,
    temporal_factor: u32,
) -> Result<Vec<RetainedFrame>> {
    let chapter_dir = data_root.join(chapter);
    let frames_dir = chapter_dir.join("frames");
    let masks_dir = chapter_dir.join("masks");
    let targets_path = chapter_dir.join("targets.csv");
    if !frames_dir.is_dir() {
        return Err(DriveError::MissingFile(frames_dir));
    }
    if !targets_path.is_file() {
        return Err(DriveError::MissingFile(targets_path));
    }
    let targets = read_targets(&targets_path)?;

    let mut raw_indices: Vec<(u32, String)> = std::fs::read_dir(&frames_dir)
        .map_err(|e| DriveError::io(&frames_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let stem = name.strip_suffix(".png")?;
            let idx: u32 = stem.parse().ok()?;
            Some((idx, name))
        })
        .collect();
    raw_indices.sort();

    let mut retained = Vec::new();
    for (raw_idx, file_name) in raw_indices {
        if raw_idx % temporal_factor != 0 {
            continue;
        }
        let (speed, angle) = match targets.get(&raw_idx) {
            Some(&t) => t,
            None => {
                log::warn!("chapter {chapter}: frame {raw_idx} has no target, rejected");
                continue;
            }
        };
        let mask_rel = format!("{chapter}/masks/{file_name}");
        if !masks_dir.join(&file_name).is_file() {
            log::warn!("chapter {chapter}: frame {raw_idx} has no mask, rejected");
            continue;
        }
        retained.push(RetainedFrame {
            index: raw_idx / temporal_factor,
            image_path: format!("{chapter}/frames/{file_name}"),
            mask_path: mask_rel,
            speed,
            angle,
        });
    }
    Ok(retained)
}

fn read_targets(path: &Path) -> Result<BTreeMap<u32, (f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| DriveError::parse(path, e.to_string()))?;
    let mut map = BTreeMap::new();
    for (i, record) in rdr.deserialize::<TargetRow>().enumerate() {
        let row = record.map_err(|e| DriveError::parse(path, format!("row {}: {e}", i + 1)))?;
        if !row.speed.is_finite() || !row.angle.is_finite() {
            log::warn!("{}: row {} has non-finite targets, skipped", path.display(), i + 1);
            continue;
        }
        map.insert(row.frame, (row.speed, row.angle));
    }
    Ok(map)
}

#[derive(Deserialize)]
struct TargetRow {
    frame: u32,
    speed: f64,
    angle: f64,
}

/// Builds all stride-1 windows of [`SEQ_LEN`] consecutive 1 Hz indices.
fn windows_of(chapter: &str, retained: &[RetainedFrame]) -> Vec<ManifestEntry> {
    let mut entries = Vec::new();
    if retained.len() < SEQ_LEN {
        return entries;
    }
    for window in retained.windows(SEQ_LEN) {
        let consecutive = window
            .windows(2)
            .all(|p| p[1].index == p[0].index + 1);
        if !consecutive {
            continue;
        }
        let last = &window[SEQ_LEN - 1];
        entries.push(ManifestEntry {
            chapter: chapter.to_string(),
            frame_indices: window.iter().map(|f| f.index).collect(),
            image_paths: window.iter().map(|f| f.image_path.clone()).collect(),
            mask_paths: window.iter().map(|f| f.mask_path.clone()).collect(),
            speed: last.speed,
            angle: last.angle,
        });
    }
    entries
}

/// Manifest-backed sample set: loads, resizes and remaps frames on access.
pub struct ManifestSet {
    manifest: Manifest,
    data_root: PathBuf,
    codec: MaskCodec,
    /// raw-rate targets per chapter, for per-frame annotations
    chapter_targets: BTreeMap<String, BTreeMap<u32, (f64, f64)>>,
}

impl ManifestSet {
    pub fn new(manifest: Manifest, data_root: &Path, codec: MaskCodec) -> Self {
        ManifestSet {
            manifest,
            data_root: data_root.to_path_buf(),
            codec,
            chapter_targets: BTreeMap::new(),
        }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn codec(&self) -> &MaskCodec {
        &self.codec
    }

    fn load_frame(
        &self,
        chapter: &str,
        index: u32,
        image_rel: &str,
        mask_rel: &str,
        fallback: (f64, f64),
    ) -> Result<FrameRecord> {
        let image = load_image_rgb(&self.data_root.join(image_rel))?;
        let image = resize_frame(&image)?;
        let mask = load_mask(&self.data_root.join(mask_rel))?;
        let mask = resize_mask(&mask)?;
        let mask = self.codec.remap(&mask)?;
        let raw_idx = index * self.manifest.provenance.temporal_factor;
        let (speed, angle) = self
            .chapter_targets
            .get(chapter)
            .and_then(|t| t.get(&raw_idx).copied())
            .unwrap_or(fallback);
        Ok(FrameRecord {
            chapter_id: chapter.to_string(),
            frame_index: index,
            image,
            mask,
            speed,
            angle,
        })
    }

    /// Preloads per-frame target annotations from each chapter's
    /// `targets.csv`; without this, per-frame targets fall back to the
    /// sample's t=0 values.
    pub fn preload_targets(&mut self) -> Result<()> {
        let chapters: BTreeSet<String> = self
            .manifest
            .entries
            .iter()
            .map(|e| e.chapter.clone())
            .collect();
        for ch in chapters {
            let path = self.data_root.join(&ch).join("targets.csv");
            if path.is_file() {
                self.chapter_targets.insert(ch, read_targets(&path)?);
            }
        }
        Ok(())
    }
}

impl SampleSet for ManifestSet {
    fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    fn get(&self, idx: usize) -> Result<SequenceSample> {
        let entry = &self.manifest.entries[idx];
        let mut frames = Vec::with_capacity(SEQ_LEN);
        for i in 0..SEQ_LEN {
            frames.push(self.load_frame(
                &entry.chapter,
                entry.frame_indices[i],
                &entry.image_paths[i],
                &entry.mask_paths[i],
                (entry.speed, entry.angle),
            )?);
        }
        let sample = SequenceSample::new(frames)?;
        // targets come from the manifest, which recorded them at build time
        Ok(SequenceSample::from_parts(
            sample.frames().to_vec(),
            Targets {
                speed: entry.speed,
                angle: entry.angle,
            },
        ))
    }
}

/// Iterates distinct retained frames of a manifest exactly once (stride-1
/// windows share frames; statistics must not double count).
pub(super) fn for_each_distinct_frame(
    set: &ManifestSet,
    f: &mut dyn FnMut(&Volume),
) -> Result<()> {
    let mut seen: BTreeSet<(String, u32)> = BTreeSet::new();
    for entry in &set.manifest.entries {
        for i in 0..SEQ_LEN {
            let key = (entry.chapter.clone(), entry.frame_indices[i]);
            if !seen.insert(key) {
                continue;
            }
            let image = load_image_rgb(&set.data_root.join(&entry.image_paths[i]))?;
            let image = resize_frame(&image)?;
            f(&image);
        }
    }
    Ok(())
}
