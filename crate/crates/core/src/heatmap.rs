//! Bounding-box heat maps.
//!
//! Every detected box becomes a smooth intensity bump: pixel columns and
//! rows inside the box are mapped linearly onto `[-pi/2, pi/2]`, and each
//! axis contributes `exp(sqrt(n) * cos(angle))`, where `n` is the weight
//! factor of the object class. The two axis terms are combined with an L2
//! norm, so a box corner evaluates to `sqrt(2)` and the box center to
//! `sqrt(2) * exp(sqrt(n))`.
//!
//! Pixel coordinates have their origin at the top-left corner, `x` grows to
//! the right and `y` grows downwards. `(x_lb, y_lb)` is the top-left corner
//! of a box and `(x_rt, y_rt)` the bottom-right one. A box covers every
//! integer pixel `i` with `x_lb <= i <= x_rt` (and likewise for rows).

use std::cmp::Ordering;
use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default render width, 16:9 to match dashcam footage.
pub const DEFAULT_WIDTH: usize = 256;
pub const DEFAULT_HEIGHT: usize = 144;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Pedestrian,
    Cyclist,
    Vehicle,
    TrafficSign,
    TrafficLight,
    Other,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 6] = [
        ObjectClass::Pedestrian,
        ObjectClass::Cyclist,
        ObjectClass::Vehicle,
        ObjectClass::TrafficSign,
        ObjectClass::TrafficLight,
        ObjectClass::Other,
    ];

    /// Pedestrians and cyclists.
    pub fn is_vulnerable(self) -> bool {
        matches!(self, ObjectClass::Pedestrian | ObjectClass::Cyclist)
    }
}

/// Weight factor `n` applied inside `exp(sqrt(n) * cos(.))`. Always 1, 2 or 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ClassWeight(u8);

impl ClassWeight {
    pub fn n(self) -> u8 {
        self.0
    }

    pub fn sqrt_n(self) -> f64 {
        f64::from(self.0).sqrt()
    }
}

pub fn class_weight(class: ObjectClass) -> ClassWeight {
    match class {
        ObjectClass::Pedestrian | ObjectClass::Cyclist => ClassWeight(4),
        ObjectClass::Vehicle | ObjectClass::TrafficSign | ObjectClass::TrafficLight => {
            ClassWeight(2)
        }
        ObjectClass::Other => ClassWeight(1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x_lb: f64,
    pub y_lb: f64,
    pub x_rt: f64,
    pub y_rt: f64,
    pub class: ObjectClass,
}

impl Detection {
    pub fn new(x_lb: f64, y_lb: f64, x_rt: f64, y_rt: f64, class: ObjectClass) -> Result<Self> {
        let det = Detection {
            x_lb,
            y_lb,
            x_rt,
            y_rt,
            class,
        };
        det.validate()?;
        Ok(det)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x_lb, self.y_lb, self.x_rt, self.y_rt];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config(format!("non-finite box coordinates {coords:?}")));
        }
        if self.x_lb > self.x_rt || self.y_lb > self.y_rt {
            return Err(Error::Config(format!(
                "box corners out of order: x {}..{}, y {}..{}",
                self.x_lb, self.x_rt, self.y_lb, self.y_rt
            )));
        }
        Ok(())
    }

    /// Rescales the box from one pixel grid to another.
    pub fn scaled(&self, sx: f64, sy: f64) -> Detection {
        Detection {
            x_lb: self.x_lb * sx,
            y_lb: self.y_lb * sy,
            x_rt: self.x_rt * sx,
            y_rt: self.y_rt * sy,
            class: self.class,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_rt - self.x_lb) * (self.y_rt - self.y_lb)
    }

    fn canonical_cmp(&self, other: &Detection) -> Ordering {
        self.x_lb
            .total_cmp(&other.x_lb)
            .then(self.y_lb.total_cmp(&other.y_lb))
            .then(self.x_rt.total_cmp(&other.x_rt))
            .then(self.y_rt.total_cmp(&other.y_rt))
            .then(self.class.cmp(&other.class))
    }
}

/// Intensity patch of a single box, already clamped to the image.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxField {
    /// First covered column.
    pub x0: usize,
    /// First covered row.
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    /// Column-major: `values[dx * height + dy]`.
    pub values: Vec<f64>,
}

impl BoxField {
    pub fn get(&self, dx: usize, dy: usize) -> f64 {
        self.values[dx * self.height + dy]
    }

    /// Sum of all pixel intensities in the patch.
    pub fn intensity(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Integer pixel span `[lo, hi]` covered by `[a, b]` inside `0..extent`.
fn pixel_span(a: f64, b: f64, extent: usize) -> Option<(usize, usize)> {
    let lo = a.ceil().max(0.0);
    let hi = b.floor().min(extent as f64 - 1.0);
    if hi < lo {
        return None;
    }
    Some((lo as usize, hi as usize))
}

/// Per-axis heat term `exp(sqrt(n) * cos(angle))` for every pixel in `lo..=hi`.
///
/// A single-pixel span would divide by zero; its angle collapses to 0.
fn axis_profile(lo: usize, hi: usize, sqrt_n: f64) -> Vec<f64> {
    let (a0, a1) = (-FRAC_PI_2, FRAC_PI_2);
    let (b0, b1) = (lo as f64, hi as f64);
    (lo..=hi)
        .map(|p| {
            let angle = if hi == lo {
                0.0
            } else {
                (p as f64 - b0) * (a1 - a0) / (b1 - b0) + a0
            };
            (sqrt_n * angle.cos()).exp()
        })
        .collect()
}

/// Heat field of one box clamped to a `width x height` image. Returns `None`
/// when the box covers no pixel of the image.
pub fn box_field(
    det: &Detection,
    weight: ClassWeight,
    width: usize,
    height: usize,
) -> Option<BoxField> {
    let (x0, x1) = pixel_span(det.x_lb, det.x_rt, width)?;
    let (y0, y1) = pixel_span(det.y_lb, det.y_rt, height)?;
    let sqrt_n = weight.sqrt_n();
    let zh = axis_profile(x0, x1, sqrt_n);
    let zv = axis_profile(y0, y1, sqrt_n);
    let mut values = Vec::with_capacity(zh.len() * zv.len());
    for &h in &zh {
        for &v in &zv {
            values.push((h * h + v * v).sqrt());
        }
    }
    Some(BoxField {
        x0,
        y0,
        width: zh.len(),
        height: zv.len(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    width: usize,
    height: usize,
    /// Column-major: `values[x * height + y]`.
    values: Vec<f64>,
    total_intensity: f64,
}

impl HeatMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        HeatMap {
            width,
            height,
            values: vec![0.0; width * height],
            total_intensity: 0.0,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[x * self.height + y]
    }

    /// Raw grid, column-major (`x` outer, `y` inner).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Sum of every box's per-pixel intensity (`Z`).
    pub fn total_intensity(&self) -> f64 {
        self.total_intensity
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// 16-bit binary PGM, grid maximum mapped to 65535.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        out.reserve(self.width * self.height * 2);
        let peak = self.peak();
        for y in 0..self.height {
            for x in 0..self.width {
                let level = if peak > 0.0 {
                    (self.get(x, y) / peak * 65535.0).round() as u16
                } else {
                    0
                };
                out.extend_from_slice(&level.to_be_bytes());
            }
        }
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_pgm())
            .map_err(|e| Error::io(path, e))
    }
}

/// Renders all detections onto a `width x height` grid.
///
/// Overlapping boxes add up. Detections are accumulated in a canonical order,
/// so the output does not depend on the order of `dets`, bit for bit.
pub fn render_heatmap(dets: &[Detection], width: usize, height: usize) -> HeatMap {
    let mut map = HeatMap::zeros(width, height);
    let mut ordered: Vec<&Detection> = dets.iter().collect();
    ordered.sort_by(|a, b| a.canonical_cmp(b));

    let mut total = 0.0;
    for det in ordered {
        let Some(field) = box_field(det, class_weight(det.class), width, height) else {
            continue;
        };
        for dx in 0..field.width {
            let col = (field.x0 + dx) * height + field.y0;
            let src = &field.values[dx * field.height..(dx + 1) * field.height];
            for (dst, v) in map.values[col..col + field.height].iter_mut().zip(src) {
                *dst += v;
            }
        }
        total += field.intensity();
    }
    map.total_intensity = total;
    map
}

/// One line of a detection JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame: i64,
    pub boxes: Vec<Detection>,
}

/// Parses JSON lines, one frame per line. Blank lines are skipped and the
/// result is sorted by frame number.
pub fn parse_detections_jsonl(text: &str, origin: &Path) -> Result<Vec<FrameDetections>> {
    let mut frames = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let frame: FrameDetections = serde_json::from_str(line)
            .map_err(|e| Error::parse(origin, format!("line {}: {e}", lineno + 1)))?;
        for det in &frame.boxes {
            det.validate()
                .map_err(|e| Error::parse(origin, format!("line {}: {e}", lineno + 1)))?;
        }
        frames.push(frame);
    }
    frames.sort_by_key(|f| f.frame);
    Ok(frames)
}

pub fn read_detections_jsonl(path: &Path) -> Result<Vec<FrameDetections>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections_jsonl(&text, path)
}

pub fn write_detections_jsonl(frames: &[FrameDetections]) -> String {
    let mut out = String::new();
    for f in frames {
        out.push_str(&serde_json::to_string(f).expect("detections serialize"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::SQRT_2;

    fn boxed(x0: f64, y0: f64, x1: f64, y1: f64, class: ObjectClass) -> Detection {
        Detection::new(x0, y0, x1, y1, class).unwrap()
    }

    #[test]
    fn weight_factors() {
        assert_eq!(class_weight(ObjectClass::Pedestrian).n(), 4);
        assert_eq!(class_weight(ObjectClass::Cyclist).n(), 4);
        assert_eq!(class_weight(ObjectClass::Vehicle).n(), 2);
        assert_eq!(class_weight(ObjectClass::TrafficSign).n(), 2);
        assert_eq!(class_weight(ObjectClass::TrafficLight).n(), 2);
        assert_eq!(class_weight(ObjectClass::Other).n(), 1);
    }

    #[test]
    fn corners_and_center() {
        let det = boxed(10.0, 4.0, 20.0, 12.0, ObjectClass::Vehicle);
        let f = box_field(&det, class_weight(det.class), 64, 64).unwrap();
        assert_eq!((f.width, f.height), (11, 9));
        for (dx, dy) in [(0, 0), (10, 0), (0, 8), (10, 8)] {
            assert!((f.get(dx, dy) - SQRT_2).abs() < 1e-9);
        }
        assert!((f.get(5, 4) - 5.817_014_471_111).abs() < 1e-6);
    }

    #[test]
    fn pedestrian_center() {
        let det = boxed(0.0, 0.0, 4.0, 6.0, ObjectClass::Pedestrian);
        let f = box_field(&det, class_weight(det.class), 64, 64).unwrap();
        assert!((f.get(2, 3) - 10.449_703_348_243).abs() < 1e-6);
    }

    #[test]
    fn single_pixel_axis_collapses_to_center() {
        let det = boxed(5.0, 2.0, 5.0, 8.0, ObjectClass::Other);
        let f = box_field(&det, class_weight(det.class), 16, 16).unwrap();
        assert_eq!(f.width, 1);
        let e = 1f64.exp();
        // column angle is 0 everywhere: z_h = e
        assert!((f.get(0, 0) - (e * e + 1.0).sqrt()).abs() < 1e-12);
        assert!((f.get(0, 3) - SQRT_2 * e).abs() < 1e-12);
    }

    #[test]
    fn empty_scene_is_zero() {
        let map = render_heatmap(&[], 32, 18);
        assert!(map.values().iter().all(|&v| v == 0.0));
        assert_eq!(map.total_intensity(), 0.0);
    }

    #[test]
    fn out_of_bounds_boxes() {
        let outside = boxed(100.0, 100.0, 120.0, 130.0, ObjectClass::Vehicle);
        let map = render_heatmap(&[outside], 32, 18);
        assert_eq!(map.total_intensity(), 0.0);

        // clamped box spans the visible part only
        let partial = boxed(-10.0, -10.0, 4.0, 4.0, ObjectClass::Vehicle);
        let f = box_field(&partial, ClassWeight(2), 32, 18).unwrap();
        assert_eq!((f.x0, f.y0, f.width, f.height), (0, 0, 5, 5));
        let map = render_heatmap(&[partial], 32, 18);
        assert!(map.get(10, 10) == 0.0);
        assert!((map.get(2, 2) - SQRT_2 * 2f64.sqrt().exp()).abs() < 1e-12);
    }

    #[test]
    fn class_ordering_of_peaks() {
        let geom = |c| boxed(3.0, 3.0, 13.0, 9.0, c);
        let ped = render_heatmap(&[geom(ObjectClass::Pedestrian)], 20, 12).peak();
        let car = render_heatmap(&[geom(ObjectClass::Vehicle)], 20, 12).peak();
        let other = render_heatmap(&[geom(ObjectClass::Other)], 20, 12).peak();
        assert!(ped > car && car > other);
    }

    #[test]
    fn disjoint_boxes_double_z() {
        let a = boxed(1.0, 1.0, 9.0, 7.0, ObjectClass::Cyclist);
        let b = boxed(20.0, 8.0, 28.0, 14.0, ObjectClass::Cyclist);
        let one = render_heatmap(&[a], 32, 18).total_intensity();
        let two = render_heatmap(&[a, b], 32, 18).total_intensity();
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn overlapping_boxes_superpose() {
        let a = boxed(2.0, 2.0, 12.0, 10.0, ObjectClass::Vehicle);
        let b = boxed(6.0, 4.0, 18.0, 12.0, ObjectClass::Pedestrian);
        let both = render_heatmap(&[a, b], 24, 16);
        let ma = render_heatmap(&[a], 24, 16);
        let mb = render_heatmap(&[b], 24, 16);
        for x in 0..24 {
            for y in 0..16 {
                assert!((both.get(x, y) - ma.get(x, y) - mb.get(x, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pgm_layout() {
        let det = boxed(0.0, 0.0, 2.0, 2.0, ObjectClass::Other);
        let map = render_heatmap(&[det], 4, 3);
        let pgm = map.to_pgm();
        let header = b"P5\n4 3\n65535\n";
        assert_eq!(&pgm[..header.len()], header);
        let body = &pgm[header.len()..];
        assert_eq!(body.len(), 4 * 3 * 2);
        // center pixel (1,1) is the maximum
        let px = |x: usize, y: usize| u16::from_be_bytes([body[(y * 4 + x) * 2], body[(y * 4 + x) * 2 + 1]]);
        assert_eq!(px(1, 1), 65535);
        assert_eq!(px(3, 0), 0);
        assert!(px(0, 0) > 0 && px(0, 0) < 65535);

        let empty = HeatMap::zeros(2, 2).to_pgm();
        assert!(empty[b"P5\n2 2\n65535\n".len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn jsonl_roundtrip_and_errors() {
        let text = r#"{"frame": 3, "boxes": [{"x_lb": 1, "y_lb": 2, "x_rt": 5, "y_rt": 9, "class": "traffic_light"}]}

{"frame": 1, "boxes": []}
"#;
        let frames = parse_detections_jsonl(text, Path::new("t.jsonl")).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0].frame, 1);
        assert_eq!(frames[1].boxes[0].class, ObjectClass::TrafficLight);
        let again = parse_detections_jsonl(&write_detections_jsonl(&frames), Path::new("t")).unwrap();
        assert_eq!(again, frames);

        let bad_class = r#"{"frame": 0, "boxes": [{"x_lb": 1, "y_lb": 2, "x_rt": 5, "y_rt": 9, "class": "truck"}]}"#;
        assert!(matches!(
            parse_detections_jsonl(bad_class, Path::new("t")),
            Err(Error::Parse { .. })
        ));
        let flipped = r#"{"frame": 0, "boxes": [{"x_lb": 9, "y_lb": 2, "x_rt": 5, "y_rt": 9, "class": "other"}]}"#;
        assert!(parse_detections_jsonl(flipped, Path::new("t")).is_err());
    }
}
