//! Synthetic paired RGB/TIR sequences and their on-disk layout.
//!
//! A sequence directory holds `rgb/NNNNNN.ppm` (binary P6), `tir/NNNNNN.pgm`
//! (binary P5), `gt.txt` with lines `frame x y w h` (0-based frame, pixels,
//! top-left origin) and `misalignment.txt` with lines `frame dx dy`.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::BBox;

/// 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) || data.len() != width * height * channels || width == 0 || height == 0 {
            return Err(Error::invalid(
                "frame",
                format!("{width}x{height}x{channels} frame with {} bytes", data.len()),
            ));
        }
        Ok(Frame {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Writes binary P6 for RGB frames and binary P5 for gray frames.
    pub fn save(&self, path: &Path) -> Result<()> {
        use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
        let (subtype, color) = match self.channels {
            3 => (PnmSubtype::Pixmap(SampleEncoding::Binary), image::ExtendedColorType::Rgb8),
            _ => (PnmSubtype::Graymap(SampleEncoding::Binary), image::ExtendedColorType::L8),
        };
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        PnmEncoder::new(file)
            .with_subtype(subtype)
            .encode(self.data.as_slice(), self.width as u32, self.height as u32, color)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// Reads a PPM as RGB or a PGM as gray.
    pub fn load(path: &Path) -> Result<Self> {
        let reader = image::ImageReader::open(path)?
            .with_guessed_format()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let img = reader
            .decode()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img.color().channel_count() {
            1 => Frame::new(w, h, 1, img.into_luma8().into_raw()),
            _ => Frame::new(w, h, 3, img.into_rgb8().into_raw()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionModel {
    /// The target stays put.
    Static,
    /// Slow constant-speed drift with a gentle wobble, reflected at borders.
    #[default]
    Drift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub frames: usize,
    pub frame_side: usize,
    pub motion: MotionModel,
    /// Peak TIR translation in pixels.
    pub misalignment_px: f64,
}

impl GenConfig {
    pub fn new(seed: u64, frames: usize) -> Self {
        GenConfig {
            seed,
            frames,
            frame_side: 128,
            motion: MotionModel::Drift,
            misalignment_px: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub rgb: Vec<Frame>,
    pub tir: Vec<Frame>,
    /// Target box in RGB coordinates.
    pub gt: Vec<BBox>,
    /// TIR translation `(dx, dy)` per frame.
    pub shifts: Vec<(f64, f64)>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

fn waves(rng: &mut ChaCha8Rng, n: usize, max_freq: f64, amp: f64) -> Vec<Wave> {
    (0..n)
        .map(|_| Wave {
            fx: rng.random_range(-max_freq..max_freq),
            fy: rng.random_range(-max_freq..max_freq),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amp: amp * rng.random_range(0.5..1.0),
        })
        .collect()
}

fn field(ws: &[Wave], x: f64, y: f64) -> f64 {
    ws.iter().map(|w| w.amp * (w.fx * x + w.fy * y + w.phase).sin()).sum()
}

#[derive(Clone, Copy)]
enum Shape {
    Square,
    Ellipse,
}

/// Soft coverage of the target at `(x, y)` and its normalized radius.
fn coverage(shape: Shape, b: &BBox, x: f64, y: f64) -> (f64, f64) {
    let (cx, cy) = b.center();
    let (hw, hh) = (b.w / 2.0, b.h / 2.0);
    match shape {
        Shape::Square => {
            let cov = (0.5 + hw - (x - cx).abs()).clamp(0.0, 1.0) * (0.5 + hh - (y - cy).abs()).clamp(0.0, 1.0);
            let r = ((x - cx).abs() / hw).max((y - cy).abs() / hh);
            (cov, r)
        }
        Shape::Ellipse => {
            let r = (((x - cx) / hw).powi(2) + ((y - cy) / hh).powi(2)).sqrt();
            (((1.0 - r) * hw.min(hh) + 0.5).clamp(0.0, 1.0), r)
        }
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Deterministic synthetic sequence: a textured target on structured noise,
/// rendered in RGB and as an inverted-contrast blob in TIR, with the whole
/// TIR frame translated by a slowly rotating offset.
pub fn gen_sequence(cfg: &GenConfig) -> Result<Sequence> {
    if cfg.frames < 2 {
        return Err(Error::invalid("gen_sequence", format!("need at least 2 frames, got {}", cfg.frames)));
    }
    if cfg.frame_side < 32 {
        return Err(Error::invalid("gen_sequence", format!("frame_side {} below 32", cfg.frame_side)));
    }
    if !(cfg.misalignment_px.is_finite() && cfg.misalignment_px >= 0.0) {
        return Err(Error::invalid("gen_sequence", "misalignment must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let side = cfg.frame_side as f64;
    let bg_rgb: Vec<Vec<Wave>> = (0..3).map(|_| waves(&mut rng, 4, 0.15, 30.0)).collect();
    let bg_tir = waves(&mut rng, 3, 0.06, 20.0);
    let base_rgb: [f64; 3] = [rng.random_range(90.0..150.0), rng.random_range(90.0..150.0), rng.random_range(90.0..150.0)];
    let shape = if rng.random_bool(0.5) { Shape::Square } else { Shape::Ellipse };
    let color_a: [f64; 3] = [rng.random_range(180.0..240.0), rng.random_range(20.0..80.0), rng.random_range(20.0..80.0)];
    let color_b: [f64; 3] = [rng.random_range(20.0..60.0), rng.random_range(20.0..60.0), rng.random_range(150.0..220.0)];
    let checker = rng.random_range(3.0..5.0);

    let w = side * rng.random_range(0.14..0.2);
    let h = side * rng.random_range(0.14..0.2);
    let mut cx = side * rng.random_range(0.35..0.65);
    let mut cy = side * rng.random_range(0.35..0.65);
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let speed = side * rng.random_range(0.01..0.018);
    let (mut vx, mut vy) = match cfg.motion {
        MotionModel::Static => (0.0, 0.0),
        MotionModel::Drift => (speed * heading.cos(), speed * heading.sin()),
    };
    let wobble_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let shift_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let n = cfg.frame_side;
    let mut seq = Sequence {
        rgb: Vec::with_capacity(cfg.frames),
        tir: Vec::with_capacity(cfg.frames),
        gt: Vec::with_capacity(cfg.frames),
        shifts: Vec::with_capacity(cfg.frames),
    };
    for t in 0..cfg.frames {
        if t > 0 && cfg.motion == MotionModel::Drift {
            let wobble = 0.3 * speed * (0.4 * t as f64 + wobble_phase).sin();
            cx += vx - wobble * vy.signum();
            cy += vy + wobble * vx.signum();
            // reflect at borders, keeping the box inside the frame
            if cx - w / 2.0 < 0.0 || cx + w / 2.0 > side {
                vx = -vx;
                cx = cx.clamp(w / 2.0, side - w / 2.0);
            }
            if cy - h / 2.0 < 0.0 || cy + h / 2.0 > side {
                vy = -vy;
                cy = cy.clamp(h / 2.0, side - h / 2.0);
            }
        }
        let bbox = BBox::from_center(cx, cy, w, h);
        let angle = shift_phase + 0.15 * t as f64;
        let shift = (cfg.misalignment_px * angle.cos(), cfg.misalignment_px * angle.sin());

        let mut rgb = Vec::with_capacity(n * n * 3);
        let mut tir = Vec::with_capacity(n * n);
        for py in 0..n {
            for px in 0..n {
                let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                let (cov, _) = coverage(shape, &bbox, x, y);
                let (tx, ty) = (x - bbox.x, y - bbox.y);
                let parity = ((tx / checker).floor() as i64 + (ty / checker).floor() as i64).rem_euclid(2);
                let tex = if parity == 0 { &color_a } else { &color_b };
                for c in 0..3 {
                    let bg = base_rgb[c] + field(&bg_rgb[c], x, y) + rng.random_range(-4.0..4.0);
                    rgb.push(to_u8(bg * (1.0 - cov) + tex[c] * cov));
                }
                let (sx, sy) = (x - shift.0, y - shift.1);
                let (tcov, r) = coverage(shape, &bbox, sx, sy);
                let bg = 70.0 + field(&bg_tir, sx, sy) + rng.random_range(-4.0..4.0);
                let blob = 200.0 + 45.0 * (1.0 - r.min(1.0));
                tir.push(to_u8(bg * (1.0 - tcov) + blob * tcov));
            }
        }
        seq.rgb.push(Frame::new(n, n, 3, rgb)?);
        seq.tir.push(Frame::new(n, n, 1, tir)?);
        seq.gt.push(bbox);
        seq.shifts.push(shift);
    }
    Ok(seq)
}

fn frame_name(i: usize, ext: &str) -> String {
    format!("{i:06}.{ext}")
}

pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("rgb"))?;
    std::fs::create_dir_all(dir.join("tir"))?;
    let mut gt = String::new();
    let mut shifts = String::new();
    for i in 0..seq.len() {
        seq.rgb[i].save(&dir.join("rgb").join(frame_name(i, "ppm")))?;
        seq.tir[i].save(&dir.join("tir").join(frame_name(i, "pgm")))?;
        let b = &seq.gt[i];
        writeln!(gt, "{i} {} {} {} {}", b.x, b.y, b.w, b.h).expect("write to string");
        let (dx, dy) = seq.shifts.get(i).copied().unwrap_or((0.0, 0.0));
        writeln!(shifts, "{i} {dx} {dy}").expect("write to string");
    }
    std::fs::write(dir.join("gt.txt"), gt)?;
    std::fs::write(dir.join("misalignment.txt"), shifts)?;
    Ok(())
}

fn parse_rows(text: &str, fields: usize, what: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("{what} line {}: {e}", ln + 1)))?;
        if vals.len() != fields {
            return Err(Error::Format(format!(
                "{what} line {}: expected {fields} fields, got {}",
                ln + 1,
                vals.len()
            )));
        }
        rows.push(vals);
    }
    Ok(rows)
}

/// Loads a sequence directory; frames must be numbered `0..n` in `gt.txt`.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let gt_rows = parse_rows(&std::fs::read_to_string(dir.join("gt.txt"))?, 5, "gt.txt")?;
    if gt_rows.is_empty() {
        return Err(Error::Format("gt.txt has no frames".into()));
    }
    let mut seq = Sequence {
        rgb: Vec::new(),
        tir: Vec::new(),
        gt: Vec::new(),
        shifts: Vec::new(),
    };
    for (i, row) in gt_rows.iter().enumerate() {
        if row[0] as usize != i || row[0].fract() != 0.0 {
            return Err(Error::Format(format!("gt.txt: expected frame {i}, found {}", row[0])));
        }
        let rgb = Frame::load(&dir.join("rgb").join(frame_name(i, "ppm")))?;
        let tir = Frame::load(&dir.join("tir").join(frame_name(i, "pgm")))?;
        if rgb.width != tir.width || rgb.height != tir.height {
            return Err(Error::Format(format!(
                "frame {i}: RGB {}x{} and TIR {}x{} differ in size",
                rgb.width, rgb.height, tir.width, tir.height
            )));
        }
        seq.rgb.push(rgb);
        seq.tir.push(tir);
        seq.gt.push(BBox::new(row[1], row[2], row[3], row[4]));
    }
    let shift_path = dir.join("misalignment.txt");
    seq.shifts = if shift_path.exists() {
        parse_rows(&std::fs::read_to_string(shift_path)?, 3, "misalignment.txt")?
            .into_iter()
            .map(|r| (r[1], r[2]))
            .collect()
    } else {
        vec![(0.0, 0.0); seq.gt.len()]
    };
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centroid(frame: &Frame, pred: impl Fn(&Frame, usize, usize) -> bool) -> (f64, f64) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..frame.height {
            for x in 0..frame.width {
                if pred(frame, x, y) {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        (sx / n, sy / n)
    }

    #[test]
    fn same_seed_same_sequence() {
        let cfg = GenConfig::new(5, 4);
        assert_eq!(gen_sequence(&cfg).unwrap(), gen_sequence(&cfg).unwrap());
        let other = GenConfig::new(6, 4);
        assert_ne!(gen_sequence(&cfg).unwrap().gt, gen_sequence(&other).unwrap().gt);
    }

    #[test]
    fn boxes_stay_inside_and_overlap_between_frames() {
        for seed in 0..5 {
            let mut cfg = GenConfig::new(seed, 60);
            cfg.frame_side = 64;
            let seq = gen_sequence(&cfg).unwrap();
            for b in &seq.gt {
                assert!(b.x >= -1e-9 && b.y >= -1e-9 && b.x + b.w <= 64.0 + 1e-9 && b.y + b.h <= 64.0 + 1e-9);
            }
            for pair in seq.gt.windows(2) {
                assert!(pair[0].iou(&pair[1]) > 0.0);
            }
        }
    }

    #[test]
    fn zero_misalignment_aligns_target_centers() {
        let mut cfg = GenConfig::new(2, 3);
        cfg.misalignment_px = 0.0;
        let seq = gen_sequence(&cfg).unwrap();
        for i in 0..3 {
            let c = centroid(&seq.tir[i], |f, x, y| f.pixel(x, y, 0) > 170);
            let (gx, gy) = seq.gt[i].center();
            assert!((c.0 - gx).abs() < 0.75 && (c.1 - gy).abs() < 0.75, "{c:?} vs {gx},{gy}");
        }
        cfg.misalignment_px = 4.0;
        let seq = gen_sequence(&cfg).unwrap();
        let c = centroid(&seq.tir[0], |f, x, y| f.pixel(x, y, 0) > 170);
        let (gx, gy) = seq.gt[0].center();
        let (dx, dy) = seq.shifts[0];
        assert!((c.0 - gx - dx).abs() < 0.75 && (c.1 - gy - dy).abs() < 0.75);
    }

    #[test]
    fn rejects_short_sequences() {
        assert!(gen_sequence(&GenConfig::new(0, 1)).is_err());
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = GenConfig::new(3, 3);
        cfg.frame_side = 48;
        let seq = gen_sequence(&cfg).unwrap();
        save_sequence(&seq, dir.path()).unwrap();
        let back = load_sequence(dir.path()).unwrap();
        assert_eq!(back.rgb, seq.rgb);
        assert_eq!(back.tir, seq.tir);
        assert_eq!(back.gt, seq.gt);
        assert_eq!(back.shifts, seq.shifts);
        let ppm = std::fs::read(dir.path().join("rgb/000000.ppm")).unwrap();
        assert_eq!(&ppm[..2], b"P6");
        let pgm = std::fs::read(dir.path().join("tir/000000.pgm")).unwrap();
        assert_eq!(&pgm[..2], b"P5");
    }

    #[test]
    fn mismatched_pair_sizes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = GenConfig::new(3, 2);
        cfg.frame_side = 40;
        let seq = gen_sequence(&cfg).unwrap();
        save_sequence(&seq, dir.path()).unwrap();
        Frame::new(32, 32, 1, vec![0; 1024])
            .unwrap()
            .save(&dir.path().join("tir/000001.pgm"))
            .unwrap();
        assert!(load_sequence(dir.path()).is_err());
    }
}
