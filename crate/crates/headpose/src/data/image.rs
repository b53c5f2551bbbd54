//! RGB image buffer with 8-bit PPM/PGM I/O and bilinear sampling.
//!
//! Pixels are f64 RGB triples in [0, 1]. Continuous coordinates put pixel
//! (i, j) at exactly (i, j); bilinear reads outside the grid return zero.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// Add onto a pixel, clamping to [0, 1].
    #[inline]
    pub fn blend_add(&mut self, x: usize, y: usize, rgb: [f64; 3], alpha: f64) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            let v = self.data[i + c] * (1.0 - alpha) + rgb[c] * alpha;
            self.data[i + c] = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear sample at continuous coordinates; zero outside the image.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let mut out = [0.0; 3];
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let xi = x0 as isize + dx;
                let yi = y0 as isize + dy;
                if xi >= 0 && (xi as usize) < self.width && yi >= 0 && (yi as usize) < self.height {
                    let p = self.get(xi as usize, yi as usize);
                    let w = wx * wy;
                    for c in 0..3 {
                        out[c] += w * p[c];
                    }
                }
            }
        }
        out
    }

    /// Fill an axis-aligned rectangle (crop coordinates, clamped to bounds).
    pub fn fill_rect(&mut self, x: f64, y: f64, w: f64, h: f64, rgb: [f64; 3]) {
        let x0 = x.round().max(0.0) as usize;
        let y0 = y.round().max(0.0) as usize;
        let x1 = ((x + w).round() as usize).min(self.width);
        let y1 = ((y + h).round() as usize).min(self.height);
        for yy in y0..y1 {
            for xx in x0..x1 {
                self.set(xx, yy, rgb);
            }
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut bytes = Vec::with_capacity(self.data.len());
        for v in &self.data {
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::parse_netpbm(&bytes)
    }

    /// Parse binary PPM (P6) or PGM (P5); grayscale replicates into RGB.
    pub fn parse_netpbm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos).ok_or_else(|| Error::Format("empty netpbm file".into()))?;
        let channels = match magic.as_str() {
            "P6" => 3,
            "P5" => 1,
            other => return Err(Error::Format(format!("unsupported netpbm magic `{other}`"))),
        };
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let tok = next_token(bytes, &mut pos).ok_or_else(|| Error::Format("truncated netpbm header".into()))?;
            *d = tok.parse().map_err(|e| Error::Format(format!("bad netpbm header value `{tok}`: {e}")))?;
        }
        let (width, height, maxval) = (dims[0], dims[1], dims[2]);
        if maxval != 255 {
            return Err(Error::Format(format!("only 8-bit netpbm supported, maxval {maxval}")));
        }
        let need = width * height * channels;
        if bytes.len() < pos + need {
            return Err(Error::Format(format!(
                "netpbm payload truncated: need {need} bytes, have {}",
                bytes.len() - pos
            )));
        }
        let payload = &bytes[pos..pos + need];
        let mut img = Image::new(width, height);
        for i in 0..width * height {
            if channels == 3 {
                for c in 0..3 {
                    img.data[i * 3 + c] = payload[i * 3 + c] as f64 / 255.0;
                }
            } else {
                let v = payload[i] as f64 / 255.0;
                for c in 0..3 {
                    img.data[i * 3 + c] = v;
                }
            }
        }
        Ok(img)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let mut bytes = Vec::with_capacity(self.width * self.height);
        for i in 0..self.width * self.height {
            let g = 0.299 * self.data[i * 3] + 0.587 * self.data[i * 3 + 1] + 0.114 * self.data[i * 3 + 2];
            bytes.push((g.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        w.write_all(&bytes)?;
        Ok(())
    }
}

/// Netpbm header token: skips whitespace and `#` comments. After the maxval
/// token a single whitespace byte separates header from payload.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    while *pos < bytes.len() {
        let b = bytes[*pos];
        if b == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        let tok = String::from_utf8_lossy(&bytes[start..*pos]).into_owned();
        *pos += 1; // consume the single separator before binary payload
        Some(tok)
    } else {
        None
    }
}

/// RGB in [0,1] to (hue degrees, saturation, value).
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0).rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}
