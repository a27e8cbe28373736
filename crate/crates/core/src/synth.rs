//! Synthetic datasets with a transparent labelling rule.
//!
//! A sample's complexity score is the mean of three components:
//!
//! * `vulnerable`: pedestrian and cyclist boxes per keyframe,
//! * `area`: ten times the mean fraction of the frame covered by boxes
//!   (box areas summed, overlaps counted twice),
//! * `motion`: `std(a_x) + std(a_y)` over the dynamics window.
//!
//! The label is `floor(score)` clamped to `0..=4`. The generator picks the
//! label first and plants every component inside `[label + 0.15,
//! label + 0.85]`, so re-scoring a generated sample recovers its label.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{select_keyframes, DatasetManifest, ManifestEntry, REFERENCE_PERCENT};
use crate::dynamics::{write_dynamics_csv, DynamicsWindow, SAMPLE_RATE, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::heatmap::{write_detections_jsonl, Detection, FrameDetections, ObjectClass};
use crate::pipeline::{Sample, KEYFRAMES, NUM_CLASSES};

const BAND_LO: f64 = 0.15;
const BAND_HI: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub counts: [usize; NUM_CLASSES],
    pub seed: u64,
    pub frame_width: f64,
    pub frame_height: f64,
    /// Video frames per clip; keyframes are spread over them.
    pub frames: usize,
    pub window_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            counts: counts_from_percentages(1000, &REFERENCE_PERCENT),
            seed: 0,
            frame_width: 1280.0,
            frame_height: 720.0,
            frames: 120,
            window_len: WINDOW_LEN,
        }
    }
}

/// Splits `total` by percentages with the largest-remainder rule (ties go
/// to the lower class index).
pub fn counts_from_percentages(total: usize, percent: &[f64; NUM_CLASSES]) -> [usize; NUM_CLASSES] {
    let sum: f64 = percent.iter().sum();
    let exact = percent.map(|p| total as f64 * p / sum);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = total - counts.iter().sum::<usize>();
    for &c in order.iter().cycle().take(short) {
        counts[c] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityComponents {
    pub vulnerable: f64,
    pub area: f64,
    pub motion: f64,
}

impl ComplexityComponents {
    pub fn score(&self) -> f64 {
        (self.vulnerable + self.area + self.motion) / 3.0
    }

    pub fn label(&self) -> usize {
        (self.score().floor().max(0.0) as usize).min(NUM_CLASSES - 1)
    }
}

fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn complexity_components(
    keyframes: &[Vec<Detection>],
    dynamics: &DynamicsWindow,
    frame_width: f64,
    frame_height: f64,
) -> ComplexityComponents {
    let k = keyframes.len().max(1) as f64;
    let boxes = keyframes.iter().flatten();
    let vulnerable = boxes.clone().filter(|d| d.class.is_vulnerable()).count() as f64 / k;
    let area = 10.0 * boxes.map(Detection::area).sum::<f64>() / (k * frame_width * frame_height);
    let motion = population_std(&dynamics.a_x) + population_std(&dynamics.a_y);
    ComplexityComponents {
        vulnerable,
        area,
        motion,
    }
}

/// Zero-mean smooth signal with the given standard deviation.
fn motion_signal(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..2.0) * std::f64::consts::TAU,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.3..1.0),
            )
        })
        .collect();
    let mut xs: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE;
            let smooth: f64 = waves.iter().map(|(w, p, a)| a * (w * t + p).sin()).sum();
            smooth + rng.gen_range(-0.3..0.3)
        })
        .collect();
    let mean = xs.iter().sum::<f64>() / len as f64;
    xs.iter_mut().for_each(|x| *x -= mean);
    let s = population_std(&xs);
    xs.iter_mut().for_each(|x| *x *= std / s);
    xs
}

fn place_box(rng: &mut ChaCha8Rng, area: f64, class: ObjectClass, fw: f64, fh: f64) -> Detection {
    let ratio = rng.gen_range(0.5..2.0);
    let w = (area * ratio).sqrt().clamp(area / fh, fw);
    let h = area / w;
    let x = rng.gen_range(0.0..=(fw - w).max(0.0));
    let y = rng.gen_range(0.0..=(fh - h).max(0.0));
    Detection {
        x_lb: x,
        y_lb: y,
        x_rt: x + w,
        y_rt: y + h,
        class,
    }
}

/// Generates one sample of complexity `label`.
pub fn generate_sample(label: usize, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    if label >= NUM_CLASSES {
        return Err(Error::InvalidLabel(label));
    }
    let (fw, fh) = (config.frame_width, config.frame_height);
    let lo = label as f64 + BAND_LO;
    let hi = label as f64 + BAND_HI;
    let k = KEYFRAMES as f64;

    // (keyframe, class) of every box
    let mut slots: Vec<(usize, ObjectClass)> = Vec::new();
    let vulnerable = rng.gen_range((k * lo).ceil() as usize..=(k * hi).floor() as usize);
    let vulnerable_class = |rng: &mut ChaCha8Rng| *[ObjectClass::Pedestrian, ObjectClass::Cyclist].choose(rng).unwrap();
    if label == 0 {
        let mut frames: Vec<usize> = (0..KEYFRAMES).collect();
        frames.shuffle(rng);
        for &f in &frames[..vulnerable] {
            slots.push((f, vulnerable_class(rng)));
        }
    } else {
        for _ in 0..vulnerable {
            slots.push((rng.gen_range(0..KEYFRAMES), vulnerable_class(rng)));
        }
        let others = [
            ObjectClass::Vehicle,
            ObjectClass::TrafficSign,
            ObjectClass::TrafficLight,
            ObjectClass::Other,
        ];
        for f in 0..KEYFRAMES {
            for _ in 0..rng.gen_range(0..=label) {
                slots.push((f, *others.choose(rng).unwrap()));
            }
        }
    }

    let area_score = rng.gen_range(lo..hi);
    let total_area = area_score / 10.0 * k * fw * fh;
    let shares: Vec<f64> = slots.iter().map(|_| rng.gen_range(0.5..1.5)).collect();
    let share_sum: f64 = shares.iter().sum();
    let mut keyframes = vec![Vec::new(); KEYFRAMES];
    for (&(f, class), s) in slots.iter().zip(&shares) {
        let det = place_box(rng, total_area * s / share_sum, class, fw, fh);
        keyframes[f].push(det);
    }

    let motion = rng.gen_range(lo..hi);
    let split = rng.gen_range(0.3..0.7);
    let len = config.window_len;
    let a_x = motion_signal(rng, len, motion * split);
    let a_y = motion_signal(rng, len, motion * (1.0 - split));
    let v0 = rng.gen_range(0.0..25.0);
    let mut v = Vec::with_capacity(len);
    let mut speed: f64 = v0;
    for &a in &a_x {
        v.push(speed.max(0.0));
        speed += a / SAMPLE_RATE;
    }
    let yaw_rate = a_y.iter().zip(&v).map(|(a, s)| a / s.max(2.0)).collect();
    let moving = v.iter().sum::<f64>() / len as f64 >= 0.5;
    let dynamics = DynamicsWindow::new(a_x, v, a_y, yaw_rate)?;
    Ok(Sample {
        keyframes,
        dynamics,
        label,
        moving,
    })
}

/// Writes `detections/<id>.jsonl`, `dynamics/<id>.csv` and `manifest.csv`
/// under `out_dir` and returns the manifest.
pub fn synth_dataset(config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if config.counts.iter().sum::<usize>() == 0 {
        return Err(Error::Config("synthetic class counts are all zero".into()));
    }
    let frame_ids = select_keyframes(config.frames)?;
    let det_dir = out_dir.join("detections");
    let dyn_dir = out_dir.join("dynamics");
    for d in [&det_dir, &dyn_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut labels: Vec<usize> = config
        .counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));

    let mut entries = Vec::with_capacity(labels.len());
    for (idx, &label) in labels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(idx as u64 + 1);
        let sample = generate_sample(label, config, &mut rng)?;
        let id = format!("synth{idx:05}");
        let frames: Vec<FrameDetections> = frame_ids
            .iter()
            .zip(sample.keyframes)
            .map(|(&frame, boxes)| FrameDetections {
                frame: frame as i64,
                boxes,
            })
            .collect();
        let det_rel = Path::new("detections").join(format!("{id}.jsonl"));
        let dyn_rel = Path::new("dynamics").join(format!("{id}.csv"));
        let det_path = out_dir.join(&det_rel);
        let dyn_path = out_dir.join(&dyn_rel);
        std::fs::write(&det_path, write_detections_jsonl(&frames)).map_err(|e| Error::io(&det_path, e))?;
        std::fs::write(&dyn_path, write_dynamics_csv(&sample.dynamics, SAMPLE_RATE))
            .map_err(|e| Error::io(&dyn_path, e))?;
        entries.push(ManifestEntry {
            sample_id: id,
            detections_path: det_rel,
            dynamics_path: dyn_rel,
            label,
            moving: sample.moving,
            video_id: format!("synth{:05}", idx / 10),
            segment: (idx % 10) as u8,
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
