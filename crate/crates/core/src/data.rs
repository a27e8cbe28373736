//! Dataset manifests, keyframe selection, sample loading and splits.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{read_dynamics_csv, SAMPLE_RATE, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::heatmap::read_detections_jsonl;
use crate::pipeline::{Sample, KEYFRAMES, NUM_CLASSES};

/// Per-class sample totals of the reference corpus.
pub const REFERENCE_TOTALS: [usize; NUM_CLASSES] = [2581, 3523, 1461, 254, 41];
/// Its per-class training counts under the 80/20 split.
pub const REFERENCE_TRAIN: [usize; NUM_CLASSES] = [2055, 2819, 1179, 202, 33];
pub const REFERENCE_VALIDATE: [usize; NUM_CLASSES] = [526, 704, 282, 52, 8];
/// Class shares of the reference corpus, percent.
pub const REFERENCE_PERCENT: [f64; NUM_CLASSES] = [32.84, 44.83, 18.59, 3.23, 0.52];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub detections_path: PathBuf,
    pub dynamics_path: PathBuf,
    pub label: usize,
    #[serde(with = "flag")]
    pub moving: bool,
    pub video_id: String,
    pub segment: u8,
}

/// `moving` is written as `0`/`1`; `true`/`false` are accepted too.
mod flag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match String::deserialize(d)?.as_str() {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            other => Err(serde::de::Error::custom(format!("invalid moving flag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Keeps only the listed entry indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest {
            root: self.root.clone(),
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
        }
    }

    pub fn validate(&self, origin: &Path) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(Error::parse(origin, format!("duplicate sample_id {}", e.sample_id)));
            }
            if e.label >= NUM_CLASSES {
                return Err(Error::InvalidLabel(e.label));
            }
            if e.segment > 9 {
                return Err(Error::parse(origin, format!("segment {} of {} outside 0..=9", e.segment, e.sample_id)));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::parse("manifest", e))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::parse("manifest", e))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

pub fn parse_manifest(text: &str, origin: &Path, root: PathBuf) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let entries = reader
        .deserialize()
        .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
        .map_err(|e| Error::parse(origin, e))?;
    let manifest = DatasetManifest { root, entries };
    manifest.validate(origin)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, path, root)
}

/// Twelve indices evenly spaced over `0..frame_count`, each
/// `round(i (frame_count - 1) / 11)` with halves rounded up.
pub fn select_keyframes(frame_count: usize) -> Result<[usize; KEYFRAMES]> {
    if frame_count < KEYFRAMES {
        return Err(Error::TooFewFrames(frame_count));
    }
    let span = frame_count - 1;
    let steps = KEYFRAMES - 1;
    let mut out = [0; KEYFRAMES];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = (2 * i * span + steps) / (2 * steps);
    }
    // Spacing is at least one frame here, but keep indices strictly
    // increasing regardless.
    for i in 1..KEYFRAMES {
        if out[i] <= out[i - 1] {
            out[i] = out[i - 1] + 1;
        }
    }
    Ok(out)
}

/// Loads one sample. The detections file lists frames by index; the clip
/// spans `max(frame) + 1` frames and frames without a record have no
/// detections.
pub fn load_sample(manifest: &DatasetManifest, entry: &ManifestEntry, window_len: usize) -> Result<Sample> {
    let det_path = manifest.resolve(&entry.detections_path);
    let frames = read_detections_jsonl(&det_path)?;
    let frame_count = match frames.iter().map(|f| f.frame).max() {
        Some(m) if m >= 0 => m as usize + 1,
        _ => 0,
    };
    let keys = select_keyframes(frame_count)?;
    let keyframes = keys
        .iter()
        .map(|&k| {
            frames
                .iter()
                .filter(|f| f.frame == k as i64)
                .flat_map(|f| f.boxes.iter().copied())
                .collect()
        })
        .collect();
    let dynamics = read_dynamics_csv(&manifest.resolve(&entry.dynamics_path), window_len, SAMPLE_RATE)?;
    let sample = Sample {
        keyframes,
        dynamics,
        label: entry.label,
        moving: entry.moving,
    };
    sample.validate()?;
    Ok(sample)
}

/// Loads every entry, dropping (and logging) those whose files are
/// unreadable or too short. Returns the samples with their entry indices.
pub fn load_samples(manifest: &DatasetManifest, window_len: usize) -> (Vec<Sample>, Vec<usize>) {
    let mut samples = Vec::new();
    let mut kept = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        match load_sample(manifest, e, window_len) {
            Ok(s) => {
                samples.push(s);
                kept.push(i);
            }
            Err(err) => warn!("dropping sample {}: {err}", e.sample_id),
        }
    }
    (samples, kept)
}

pub fn load_all(manifest: &DatasetManifest) -> Vec<Sample> {
    load_samples(manifest, WINDOW_LEN).0
}

/// Indices into the original collection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validate: Vec<usize>,
}

fn class_indices(labels: &[usize]) -> [Vec<usize>; NUM_CLASSES] {
    let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_class[l.min(NUM_CLASSES - 1)].push(i);
    }
    by_class
}

pub fn class_counts(labels: &[usize]) -> [usize; NUM_CLASSES] {
    class_indices(labels).map(|v| v.len())
}

/// Per-class split with `round(n * train_fraction)` training samples per
/// class. When the class totals are exactly the reference corpus totals
/// and the fraction is 0.8, the reference per-class counts are used.
pub fn stratified_split(labels: &[usize], train_fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::InvalidLabel(l));
    }
    let by_class = class_indices(labels);
    let totals = by_class.clone().map(|v| v.len());
    let reference = totals == REFERENCE_TOTALS && (train_fraction - 0.8).abs() < 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        validate: Vec::new(),
    };
    for (c, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            warn!("class {c} has no samples");
            continue;
        }
        idx.shuffle(&mut rng);
        let n_train = if reference {
            REFERENCE_TRAIN[c]
        } else {
            (idx.len() as f64 * train_fraction).round() as usize
        };
        split.train.extend_from_slice(&idx[..n_train]);
        split.validate.extend_from_slice(&idx[n_train..]);
    }
    split.train.sort_unstable();
    split.validate.sort_unstable();
    Ok(split)
}

/// Stratified `k`-fold partition. Each class is shuffled and dealt
/// round-robin over the folds, starting where the previous class stopped so
/// fold sizes stay balanced.
pub fn kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Split>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; labels.len()];
    let mut offset = 0;
    for (c, mut idx) in class_indices(labels).into_iter().enumerate() {
        if !idx.is_empty() && idx.len() < k {
            warn!("class {c} has {} samples, fewer than {k} folds", idx.len());
        }
        idx.shuffle(&mut rng);
        for (j, &i) in idx.iter().enumerate() {
            fold_of[i] = (offset + j) % k;
        }
        offset = (offset + idx.len()) % k;
    }
    Ok((0..k)
        .map(|f| {
            let (validate, train) = (0..labels.len()).partition(|&i| fold_of[i] == f);
            Split { train, validate }
        })
        .collect())
}
