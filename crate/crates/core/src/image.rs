//! Grayscale raster images, bilinear sampling in normalised coordinates and
//! 8-bit PGM/PPM I/O.
//!
//! Normalised coordinates span `[-1, 1]` across the full image extent with
//! `y` growing downwards; pixel `j` of a row of width `w` has its centre at
//! `2 (j + 0.5) / w - 1`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Contract("empty image".into()));
        }
        if data.len() != height * width {
            return Err(Error::shape("GrayImage", &[height, width], &[data.len()]));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    /// Converts interleaved 8-bit RGB to luma with ITU-R BT.601 weights.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(Error::shape("from_rgb8", &[height, width, 3], &[rgb.len()]));
        }
        let data = rgb
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0)
            .collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at normalised `(x, y)`. Points outside `[-1, 1]²`
    /// read 0; inside, neighbours beyond the last pixel centre clamp to the edge.
    pub fn sample(&self, x: f64, y: f64) -> f32 {
        if !(-1.0..=1.0).contains(&x) || !(-1.0..=1.0).contains(&y) {
            return 0.0;
        }
        let px = (x + 1.0) * 0.5 * self.width as f64 - 0.5;
        let py = (y + 1.0) * 0.5 * self.height as f64 - 0.5;
        let x0 = px.floor();
        let y0 = py.floor();
        let fx = (px - x0) as f32;
        let fy = (py - y0) as f32;
        let clamp_x = |v: f64| v.clamp(0.0, (self.width - 1) as f64) as usize;
        let clamp_y = |v: f64| v.clamp(0.0, (self.height - 1) as f64) as usize;
        let (xa, xb) = (clamp_x(x0), clamp_x(x0 + 1.0));
        let (ya, yb) = (clamp_y(y0), clamp_y(y0 + 1.0));
        let top = self.get(ya, xa) * (1.0 - fx) + self.get(ya, xb) * fx;
        let bottom = self.get(yb, xa) * (1.0 - fx) + self.get(yb, xb) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Plain bilinear resize; aspect ratio is not preserved.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Contract("resize to an empty image".into()));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        Ok(Self::from_fn(height, width, |y, x| {
            let u = 2.0 * (x as f64 + 0.5) / width as f64 - 1.0;
            let v = 2.0 * (y as f64 + 0.5) / height as f64 - 1.0;
            self.sample(u, v)
        }))
    }

    pub fn crop_columns(&self, width: usize) -> Self {
        Self::from_fn(self.height, width, |y, x| if x < self.width { self.get(y, x) } else { 0.0 })
    }

    pub fn read_pnm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::decode_pnm(&bytes)
    }

    /// Decodes binary PGM (P5) or PPM (P6, converted to luma), 8-bit only.
    pub fn decode_pnm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PNM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PNM header field `{s}`")))
        };
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("unsupported PNM maxval {maxval}")));
        }
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(Error::Format(format!("unsupported PNM magic {other}"))),
        };
        let body = bytes
            .get(pos..pos + w * h * channels)
            .ok_or_else(|| Error::Format("truncated PNM body".into()))?;
        if channels == 3 {
            let scaled: Vec<u8> = body
                .iter()
                .map(|&v| ((v as f32) * 255.0 / maxval as f32).round() as u8)
                .collect();
            return Self::from_rgb8(h, w, &scaled);
        }
        Self::new(h, w, body.iter().map(|&v| v as f32 / maxval as f32).collect())
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() + 20);
        write!(out, "P5\n{} {}\n255\n", self.width, self.height).expect("write to vec");
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_pgm())?;
        Ok(())
    }
}

/// Normalised coordinate of the centre of pixel `i` along an axis of `n` pixels.
pub fn pixel_center(i: usize, n: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / n as f64 - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_images_stay_constant_under_resize() {
        let img = GrayImage::from_fn(7, 13, |_, _| 0.25);
        let r = img.resize(32, 128).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = GrayImage::from_fn(300, 300, |y, x| ((y * 31 + x * 7) % 255) as f32 / 255.0);
        assert_eq!(img.resize(300, 300).unwrap(), img);
    }

    #[test]
    fn sampling_outside_reads_zero() {
        let img = GrayImage::from_fn(4, 4, |_, _| 1.0);
        assert_eq!(img.sample(1.01, 0.0), 0.0);
        assert_eq!(img.sample(0.0, -1.5), 0.0);
        assert_eq!(img.sample(0.999, 0.999), 1.0);
    }

    #[test]
    fn pgm_round_trip_is_bit_exact_on_8bit_values() {
        let img = GrayImage::from_fn(5, 9, |y, x| ((y * 9 + x) * 5) as f32 / 255.0);
        let back = GrayImage::decode_pnm(&img.encode_pgm()).unwrap();
        assert_eq!(back.encode_pgm(), img.encode_pgm());
        assert_eq!(back.width(), 9);
    }

    #[test]
    fn ppm_is_converted_with_bt601_luma() {
        let ppm = [b"P6\n# c\n1 1\n255\n".as_slice(), &[255, 0, 0]].concat();
        let img = GrayImage::decode_pnm(&ppm).unwrap();
        assert!((img.get(0, 0) - 0.299).abs() < 1e-6);
    }

    #[test]
    fn empty_images_are_rejected() {
        assert!(GrayImage::new(0, 3, vec![]).is_err());
    }
}
