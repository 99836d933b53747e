//! Synthetic text-line images rendered with a built-in 5×7 bitmap font,
//! optionally curved or put in perspective, with per-character boxes.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, SMatrix, SVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, QuadBox, QuadBoxSet};
use crate::image::GrayImage;

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;
const ADVANCE: usize = GLYPH_W + 1;

pub const ALPHANUMERIC: &str = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz";

// Column bytes, bit 0 at the top row.
#[rustfmt::skip]
const FONT: [[u8; 5]; 62] = [
    [0x3E, 0x51, 0x49, 0x45, 0x3E], [0x00, 0x42, 0x7F, 0x40, 0x00], [0x72, 0x49, 0x49, 0x49, 0x46],
    [0x21, 0x41, 0x49, 0x4D, 0x33], [0x18, 0x14, 0x12, 0x7F, 0x10], [0x27, 0x45, 0x45, 0x45, 0x39],
    [0x3C, 0x4A, 0x49, 0x49, 0x31], [0x41, 0x21, 0x11, 0x09, 0x07], [0x36, 0x49, 0x49, 0x49, 0x36],
    [0x46, 0x49, 0x49, 0x29, 0x1E],
    [0x7C, 0x12, 0x11, 0x12, 0x7C], [0x7F, 0x49, 0x49, 0x49, 0x36], [0x3E, 0x41, 0x41, 0x41, 0x22],
    [0x7F, 0x41, 0x41, 0x41, 0x3E], [0x7F, 0x49, 0x49, 0x49, 0x41], [0x7F, 0x09, 0x09, 0x09, 0x01],
    [0x3E, 0x41, 0x41, 0x51, 0x73], [0x7F, 0x08, 0x08, 0x08, 0x7F], [0x00, 0x41, 0x7F, 0x41, 0x00],
    [0x20, 0x40, 0x41, 0x3F, 0x01], [0x7F, 0x08, 0x14, 0x22, 0x41], [0x7F, 0x40, 0x40, 0x40, 0x40],
    [0x7F, 0x02, 0x1C, 0x02, 0x7F], [0x7F, 0x04, 0x08, 0x10, 0x7F], [0x3E, 0x41, 0x41, 0x41, 0x3E],
    [0x7F, 0x09, 0x09, 0x09, 0x06], [0x3E, 0x41, 0x51, 0x21, 0x5E], [0x7F, 0x09, 0x19, 0x29, 0x46],
    [0x26, 0x49, 0x49, 0x49, 0x32], [0x03, 0x01, 0x7F, 0x01, 0x03], [0x3F, 0x40, 0x40, 0x40, 0x3F],
    [0x1F, 0x20, 0x40, 0x20, 0x1F], [0x3F, 0x40, 0x38, 0x40, 0x3F], [0x63, 0x14, 0x08, 0x14, 0x63],
    [0x03, 0x04, 0x78, 0x04, 0x03], [0x61, 0x59, 0x49, 0x4D, 0x43],
    [0x20, 0x54, 0x54, 0x78, 0x40], [0x7F, 0x28, 0x44, 0x44, 0x38], [0x38, 0x44, 0x44, 0x44, 0x28],
    [0x38, 0x44, 0x44, 0x28, 0x7F], [0x38, 0x54, 0x54, 0x54, 0x18], [0x00, 0x08, 0x7E, 0x09, 0x02],
    [0x0C, 0x52, 0x52, 0x52, 0x3E], [0x7F, 0x08, 0x04, 0x04, 0x78], [0x00, 0x44, 0x7D, 0x40, 0x00],
    [0x20, 0x40, 0x40, 0x3D, 0x00], [0x7F, 0x10, 0x28, 0x44, 0x00], [0x00, 0x41, 0x7F, 0x40, 0x00],
    [0x7C, 0x04, 0x78, 0x04, 0x78], [0x7C, 0x08, 0x04, 0x04, 0x78], [0x38, 0x44, 0x44, 0x44, 0x38],
    [0x7C, 0x14, 0x14, 0x14, 0x08], [0x08, 0x14, 0x14, 0x18, 0x7C], [0x7C, 0x08, 0x04, 0x04, 0x08],
    [0x48, 0x54, 0x54, 0x54, 0x24], [0x04, 0x04, 0x3F, 0x44, 0x24], [0x3C, 0x40, 0x40, 0x20, 0x7C],
    [0x1C, 0x20, 0x40, 0x20, 0x1C], [0x3C, 0x40, 0x30, 0x40, 0x3C], [0x44, 0x28, 0x10, 0x28, 0x44],
    [0x0C, 0x50, 0x50, 0x50, 0x3C], [0x44, 0x64, 0x54, 0x4C, 0x44],
];

/// 5×7 bitmap of an alphanumeric character, `[row][col]`.
pub fn glyph(ch: char) -> Option<[[bool; GLYPH_W]; GLYPH_H]> {
    let i = ALPHANUMERIC.find(ch)?;
    let cols = FONT[i];
    let mut out = [[false; GLYPH_W]; GLYPH_H];
    for (x, col) in cols.iter().enumerate() {
        for (y, row) in out.iter_mut().enumerate() {
            row[x] = col >> y & 1 == 1;
        }
    }
    Some(out)
}

/// Geometric distortion applied to the flat rendering, in normalised coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distortion {
    None,
    /// `y += amplitude · sin(2π·x / period + phase)`.
    Sine { amplitude: f64, period: f64, phase: f64 },
    /// Homography taking the canvas corners (TL, TR, BR, BL) to themselves plus `offsets`.
    Perspective { offsets: [[f64; 2]; 4] },
}

fn homography(offsets: &[[f64; 2]; 4]) -> Result<Matrix3<f64>> {
    let src = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for k in 0..4 {
        let [x, y] = src[k];
        let (u, v) = (x + offsets[k][0], y + offsets[k][1]);
        a.set_row(2 * k, &[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y].into());
        a.set_row(2 * k + 1, &[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y].into());
        b[2 * k] = u;
        b[2 * k + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Geometry("degenerate perspective corners".into()))?;
    Ok(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

fn apply_h(h: &Matrix3<f64>, p: Point) -> Point {
    let v = h * nalgebra::Vector3::new(p.x, p.y, 1.0);
    Point::new(v[0] / v[2], v[1] / v[2])
}

impl Distortion {
    fn maps(&self) -> Result<(Box<dyn Fn(Point) -> Point>, Box<dyn Fn(Point) -> Point>)> {
        Ok(match *self {
            Distortion::None => (Box::new(|p| p), Box::new(|p| p)),
            Distortion::Sine { amplitude, period, phase } => {
                if !(period > 0.0) {
                    return Err(Error::Config(format!("sine period must be positive, got {period}")));
                }
                let f = move |x: f64| amplitude * (2.0 * std::f64::consts::PI * x / period + phase).sin();
                (
                    Box::new(move |p: Point| Point::new(p.x, p.y + f(p.x))),
                    Box::new(move |p: Point| Point::new(p.x, p.y - f(p.x))),
                )
            }
            Distortion::Perspective { ref offsets } => {
                let h = homography(offsets)?;
                let inv = h
                    .try_inverse()
                    .ok_or_else(|| Error::Geometry("singular perspective map".into()))?;
                (Box::new(move |p| apply_h(&h, p)), Box::new(move |p| apply_h(&inv, p)))
            }
        })
    }
}

/// Which distortions a generator draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistortionKind {
    None,
    Sine,
    Perspective,
    #[default]
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub height: usize,
    pub width: usize,
    /// Integer upscaling of the 5×7 glyphs.
    pub scale: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub distortion: DistortionKind,
    /// Largest sine amplitude, normalised units.
    pub max_amplitude: f64,
    /// Largest perspective corner offset, normalised units.
    pub max_offset: f64,
    pub charset: String,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 40,
            scale: 1,
            min_len: 2,
            max_len: 6,
            distortion: DistortionKind::Mixed,
            max_amplitude: 0.2,
            max_offset: 0.1,
            charset: ALPHANUMERIC.to_string(),
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len || self.max_len > 10 {
            return Err(Error::Config(format!("lengths {}..={} outside 1..=10", self.min_len, self.max_len)));
        }
        if self.scale == 0 || self.height < GLYPH_H * self.scale + 2 {
            return Err(Error::Config(format!("canvas height {} too small", self.height)));
        }
        if self.charset.is_empty() || self.charset.chars().any(|c| glyph(c).is_none()) {
            return Err(Error::Config("charset must be non-empty alphanumerics".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub image: GrayImage,
    pub text: String,
    pub boxes: QuadBoxSet,
    pub distortion: Distortion,
}

fn norm_x(px: f64, w: usize) -> f64 {
    2.0 * px / w as f64 - 1.0
}

/// Renders `text` with its left edge at pixel column `x0` and top at row `y0`.
pub fn render_sample(text: &str, cfg: &ToyConfig, x0: usize, y0: usize, distortion: Distortion) -> Result<ToySample> {
    cfg.validate()?;
    let n = text.chars().count();
    if n == 0 {
        return Err(Error::Contract("empty transcription".into()));
    }
    let s = cfg.scale;
    let text_w = (n * ADVANCE - 1) * s;
    if x0 + text_w > cfg.width || y0 + GLYPH_H * s > cfg.height {
        return Err(Error::Contract(format!(
            "\"{text}\" ({text_w} px) does not fit a {}x{} canvas at ({x0}, {y0})",
            cfg.height, cfg.width
        )));
    }
    let mut flat = GrayImage::zeros(cfg.height, cfg.width);
    let mut boxes = Vec::with_capacity(n);
    let (fwd, inv) = distortion.maps()?;
    for (k, ch) in text.chars().enumerate() {
        let bm = glyph(ch).ok_or_else(|| Error::Contract(format!("no glyph for {ch:?}")))?;
        let gx = x0 + k * ADVANCE * s;
        for y in 0..GLYPH_H * s {
            for x in 0..GLYPH_W * s {
                if bm[y / s][x / s] {
                    flat.set(y0 + y, gx + x, 1.0);
                }
            }
        }
        let b = QuadBox::axis_aligned(
            norm_x(gx as f64, cfg.width),
            norm_x(y0 as f64, cfg.height),
            norm_x((gx + GLYPH_W * s) as f64, cfg.width),
            norm_x((y0 + GLYPH_H * s) as f64, cfg.height),
        );
        boxes.push(b.map(&fwd));
    }
    let image = match distortion {
        Distortion::None => flat,
        _ => GrayImage::from_fn(cfg.height, cfg.width, |y, x| {
            let p = inv(Point::new(
                crate::image::pixel_center(x, cfg.width),
                crate::image::pixel_center(y, cfg.height),
            ));
            flat.sample(p.x, p.y)
        }),
    };
    Ok(ToySample {
        image,
        text: text.to_string(),
        boxes: QuadBoxSet::new(boxes)?,
        distortion,
    })
}

fn draw_distortion(rng: &mut impl Rng, cfg: &ToyConfig) -> Distortion {
    let kind = match cfg.distortion {
        DistortionKind::Mixed => [DistortionKind::None, DistortionKind::Sine, DistortionKind::Perspective][rng.gen_range(0..3)],
        k => k,
    };
    match kind {
        DistortionKind::Sine => Distortion::Sine {
            amplitude: rng.gen_range(0.5..=1.0) * cfg.max_amplitude * if rng.gen() { 1.0 } else { -1.0 },
            period: rng.gen_range(2.0..4.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        },
        DistortionKind::Perspective => {
            let m = cfg.max_offset;
            let mut offsets = [[0.0; 2]; 4];
            for o in offsets.iter_mut() {
                *o = [rng.gen_range(-m..=m), rng.gen_range(-m..=m)];
            }
            Distortion::Perspective { offsets }
        }
        _ => Distortion::None,
    }
}

const MAX_ATTEMPTS: usize = 100;

/// One random sample: a random string placed at a random offset. Draws
/// whose boxes leave the canvas or admit no rectification geometry are
/// redrawn.
pub fn generate_toy_sample(rng: &mut impl Rng, cfg: &ToyConfig) -> Result<ToySample> {
    cfg.validate()?;
    for _ in 0..MAX_ATTEMPTS {
        let s = draw_sample(rng, cfg)?;
        let inside = s
            .boxes
            .boxes()
            .iter()
            .flat_map(|b| b.corners)
            .all(|p| p.x.abs() < 1.0 && p.y.abs() < 1.0);
        if inside && crate::geometry::geometry_from_boxes(&s.boxes, crate::geometry::DEFAULT_SEGMENTS).is_ok() {
            return Ok(s);
        }
    }
    Err(Error::Config(format!("no valid sample in {MAX_ATTEMPTS} draws; distortion too strong?")))
}

fn draw_sample(rng: &mut impl Rng, cfg: &ToyConfig) -> Result<ToySample> {
    let chars: Vec<char> = cfg.charset.chars().collect();
    let n = rng.gen_range(cfg.min_len..=cfg.max_len);
    let text: String = (0..n).map(|_| chars[rng.gen_range(0..chars.len())]).collect();
    let s = cfg.scale;
    let text_w = (n * ADVANCE - 1) * s;
    if text_w + 4 > cfg.width {
        return Err(Error::Contract(format!("{n} characters do not fit a width of {}", cfg.width)));
    }
    let x0 = rng.gen_range(2..=cfg.width - 2 - text_w);
    let y_slack = cfg.height - GLYPH_H * s;
    let y0 = (y_slack / 2).saturating_sub(1) + rng.gen_range(0..=2.min(y_slack - y_slack / 2));
    let d = draw_distortion(rng, cfg);
    render_sample(&text, cfg, x0, y0.min(y_slack), d)
}

/// `n` samples from a ChaCha8 stream seeded with `seed`.
pub fn generate_dataset(n: usize, cfg: &ToyConfig, seed: u64) -> Result<Vec<ToySample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| generate_toy_sample(&mut rng, cfg)).collect()
}

/// Writes `NNNNN.pgm`, `NNNNN.boxes.json` and a `labels.tsv` index.
pub fn write_dataset(dir: &Path, samples: &[ToySample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut labels = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}.pgm");
        s.image.write_pgm(&dir.join(&name))?;
        s.boxes.write_json(&dir.join(format!("{i:05}.boxes.json")))?;
        labels.push_str(&format!("{name}\t{}\n", s.text));
    }
    fs::write(dir.join("labels.tsv"), labels)?;
    Ok(())
}

/// A labelled image read back from a dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: GrayImage,
    pub text: String,
    pub boxes: Option<QuadBoxSet>,
}

pub fn read_dataset(dir: &Path) -> Result<Vec<LabeledImage>> {
    let index = fs::read_to_string(dir.join("labels.tsv"))?;
    let mut out = Vec::new();
    for (ln, line) in index.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (path, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("labels.tsv line {}: expected path<TAB>text", ln + 1)))?;
        let image = GrayImage::read_pnm(&dir.join(path))?;
        let stem = path.strip_suffix(".pgm").unwrap_or(path);
        let bpath = dir.join(format!("{stem}.boxes.json"));
        let boxes = if bpath.exists() { Some(QuadBoxSet::read_json(&bpath)?) } else { None };
        out.push(LabeledImage {
            image,
            text: text.to_string(),
            boxes,
        });
    }
    Ok(out)
}
