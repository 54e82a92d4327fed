//! 8-bit RGB raster images and binary PPM (P6) I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Array;

/// Axis-aligned pixel rectangle `{x, y, w, h}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn full(width: usize, height: usize) -> Self {
        BBox {
            x: 0,
            y: 0,
            w: width,
            h: height,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    /// Expand by a margin (fraction of the larger side), clipped to an image.
    pub fn expand(&self, margin: f32, width: usize, height: usize) -> BBox {
        let pad = (self.w.max(self.h) as f32 * margin).round() as usize;
        let x0 = self.x.saturating_sub(pad);
        let y0 = self.y.saturating_sub(pad);
        let x1 = (self.x + self.w + pad).min(width);
        let y1 = (self.y + self.h + pad).min(height);
        BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }
}

/// An 8-bit RGB image, row-major, channel-last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixels as `f32` in `[-1, 1]`, shape `[h, w, 3]`.
    pub fn to_signed(&self) -> Array<f32> {
        let data = self
            .pixels
            .iter()
            .map(|&p| p as f32 / 255.0 * 2.0 - 1.0)
            .collect();
        Array::from_vec(vec![self.height, self.width, 3], data)
            .expect("pixel count matches shape")
    }

    /// Pixels as `f32` in `[0, 1]`, shape `[h, w, 3]`.
    pub fn to_unit(&self) -> Array<f32> {
        let data = self.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        Array::from_vec(vec![self.height, self.width, 3], data)
            .expect("pixel count matches shape")
    }

    /// Quantize a signed `[-1, 1]` array back to 8-bit, clamping.
    pub fn from_signed(a: &Array<f32>) -> Result<Self> {
        if a.shape().len() != 3 || a.shape()[2] != 3 {
            return Err(Error::InvalidDimensions {
                op: "Image::from_signed",
                message: format!("expected [h, w, 3], got {:?}", a.shape()),
            });
        }
        let (h, w) = (a.shape()[0], a.shape()[1]);
        let pixels = a
            .data()
            .iter()
            .map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8)
            .collect();
        Ok(Image {
            width: w,
            height: h,
            pixels,
        })
    }

    pub fn from_unit(a: &Array<f32>) -> Result<Self> {
        if a.shape().len() != 3 || a.shape()[2] != 3 {
            return Err(Error::InvalidDimensions {
                op: "Image::from_unit",
                message: format!("expected [h, w, 3], got {:?}", a.shape()),
            });
        }
        let (h, w) = (a.shape()[0], a.shape()[1]);
        let pixels = a
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(Image {
            width: w,
            height: h,
            pixels,
        })
    }

    /// Copy of the pixels inside a rectangle.
    pub fn crop(&self, rect: BBox) -> Result<Image> {
        if rect.is_empty() || rect.x + rect.w > self.width || rect.y + rect.h > self.height {
            return Err(Error::InvalidDimensions {
                op: "Image::crop",
                message: format!("rect {rect:?} outside {}x{}", self.width, self.height),
            });
        }
        let mut out = Image::new(rect.w, rect.h);
        for y in 0..rect.h {
            for x in 0..rect.w {
                out.set(x, y, self.get(rect.x + x, rect.y + y));
            }
        }
        Ok(out)
    }

    /// Bilinear resample to a new size.
    pub fn resize_bilinear(&self, new_w: usize, new_h: usize) -> Image {
        let mut out = Image::new(new_w, new_h);
        let sx = self.width as f32 / new_w as f32;
        let sy = self.height as f32 / new_h as f32;
        for y in 0..new_h {
            for x in 0..new_w {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, self.width as f32 - 1.0);
                let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, self.height as f32 - 1.0);
                let x0 = fx.floor() as usize;
                let y0 = fy.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let y1 = (y0 + 1).min(self.height - 1);
                let tx = fx - x0 as f32;
                let ty = fy - y0 as f32;
                let mut rgb = [0u8; 3];
                for c in 0..3 {
                    let p00 = self.get(x0, y0)[c] as f32;
                    let p10 = self.get(x1, y0)[c] as f32;
                    let p01 = self.get(x0, y1)[c] as f32;
                    let p11 = self.get(x1, y1)[c] as f32;
                    let top = p00 + (p10 - p00) * tx;
                    let bot = p01 + (p11 - p01) * tx;
                    rgb[c] = (top + (bot - top) * ty).round().clamp(0.0, 255.0) as u8;
                }
                out.set(x, y, rgb);
            }
        }
        out
    }

    /// Write as binary PPM (P6).
    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)
                    .map_err(|e| Error::io(parent.display().to_string(), e))?;
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)
            .and_then(|_| f.write_all(&self.pixels))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(path.display().to_string())
            } else {
                Error::io(path.display().to_string(), e)
            }
        })?;
        Image::parse_ppm(&bytes)
    }

    pub fn parse_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |offset: u64, msg: &str| Error::format(offset, msg.to_string());
        if bytes.len() < 2 || &bytes[0..2] != b"P6" {
            return Err(bad(0, "expected P6 magic"));
        }
        // Header: three whitespace-separated integers after the magic,
        // with `#` comments allowed.
        let mut pos = 2usize;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            while pos < bytes.len() {
                let b = bytes[pos];
                if b == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else if b.is_ascii_whitespace() {
                    pos += 1;
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                pos += 1;
            }
            if start == pos {
                return Err(bad(pos as u64, "expected integer in PPM header"));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .unwrap()
                .parse()
                .map_err(|_| bad(start as u64, "invalid integer"))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(bad(pos as u64, "only 8-bit PPM supported"));
        }
        pos += 1; // single whitespace after maxval
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(bad(bytes.len() as u64, "truncated pixel data"));
        }
        Ok(Image {
            width,
            height,
            pixels: bytes[pos..pos + need].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let mut img = Image::new(3, 2);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = (i * 13 % 256) as u8;
        }
        let dir = std::env::temp_dir().join("loraspace-ppm-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ppm");
        img.save_ppm(&path).unwrap();
        let back = Image::load_ppm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn signed_round_trip_is_lossless_for_u8() {
        let mut img = Image::new(4, 4);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = (i * 7 % 256) as u8;
        }
        let back = Image::from_signed(&img.to_signed()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(Image::parse_ppm(b"P5\n2 2\n255\nxxxx").is_err());
    }
}
