//! RGB images in `[-1, 1]` and binary PPM (P6) I/O.

use std::fs;
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Channel-major `3 × size × size` image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f64>,
}

pub fn byte_to_unit(b: u8) -> f64 {
    f64::from(b) / 127.5 - 1.0
}

pub fn unit_to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

impl Image {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if size == 0 || data.len() != 3 * size * size {
            return dim_err(format!("image of size {size} needs {} values, got {}", 3 * size * size, data.len()));
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * size * size);
        for c in rgb {
            data.extend(std::iter::repeat_n(byte_to_unit(c), size * size));
        }
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let p = self.size * self.size;
        let i = y * self.size + x;
        [self.data[i], self.data[p + i], self.data[2 * p + i]]
    }

    pub fn pixel_bytes(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixel(x, y).map(unit_to_byte)
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let p = self.size * self.size;
        let i = y * self.size + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * p + i] = byte_to_unit(v);
        }
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.size, self.size).into_bytes();
        for y in 0..self.size {
            for x in 0..self.size {
                out.extend(self.pixel_bytes(x, y));
            }
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm_bytes())?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::parse_ppm(&bytes).map_err(|(offset, msg)| Error::Parse {
            file: path.to_path_buf(),
            offset,
            msg,
        })
    }

    /// Square P6 images with maxval 255 only.
    pub fn parse_ppm(bytes: &[u8]) -> std::result::Result<Self, (usize, String)> {
        let mut pos = 0usize;
        let token = |pos: &mut usize| -> std::result::Result<(usize, String), (usize, String)> {
            loop {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < bytes.len() && bytes[*pos] == b'#' {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if start == *pos {
                return Err((start, "unexpected end of header".into()));
            }
            Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
        };
        let (at, magic) = token(&mut pos)?;
        if magic != "P6" {
            return Err((at, format!("expected P6 magic, found {magic:?}")));
        }
        let number = |pos: &mut usize| -> std::result::Result<usize, (usize, String)> {
            let (at, t) = token(pos)?;
            t.parse().map_err(|_| (at, format!("expected a number, found {t:?}")))
        };
        let w = number(&mut pos)?;
        let h = number(&mut pos)?;
        let maxval_at = pos;
        let maxval = number(&mut pos)?;
        if maxval != 255 {
            return Err((maxval_at, format!("unsupported maxval {maxval}")));
        }
        if w != h || w == 0 {
            return Err((0, format!("expected a non-empty square image, got {w}x{h}")));
        }
        // exactly one whitespace byte separates header and raster
        pos += 1;
        let need = w * h * 3;
        if bytes.len() < pos + need {
            return Err((bytes.len(), format!("raster truncated: need {need} bytes after offset {pos}")));
        }
        if bytes.len() > pos + need {
            return Err((pos + need, "trailing bytes after raster".into()));
        }
        let mut img = Image::filled(w, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                let i = pos + (y * w + x) * 3;
                img.set_pixel(x, y, [bytes[i], bytes[i + 1], bytes[i + 2]]);
            }
        }
        Ok(img)
    }
}

/// Stacks images into an `[N, 3, S, S]` constant tensor.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return dim_err("no images to stack");
    };
    let s = first.size;
    let mut data = Vec::with_capacity(images.len() * 3 * s * s);
    for img in images {
        if img.size != s {
            return dim_err(format!("mixed image sizes {s} and {}", img.size));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(data, &[images.len(), 3, s, s])
}

/// Splits an `[N, 3, S, S]` tensor into images (values clamped to `[-1, 1]`).
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (n, s) = match *t.shape() {
        [n, 3, h, w] if h == w => (n, h),
        _ => return dim_err(format!("expected [N, 3, S, S], got {:?}", t.shape())),
    };
    let d = t.data();
    (0..n)
        .map(|i| {
            Image::new(
                s,
                d[i * 3 * s * s..(i + 1) * 3 * s * s].iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            )
        })
        .collect()
}

/// Tiles images into one grid image row by row (`cols` per row), for sample dumps.
pub fn grid(images: &[Image], cols: usize) -> Result<Image> {
    let Some(first) = images.first() else {
        return dim_err("empty grid");
    };
    let s = first.size;
    let rows = images.len().div_ceil(cols);
    let side = s * cols.max(rows);
    let mut out = Image::filled(side, [0, 0, 0]);
    for (k, img) in images.iter().enumerate() {
        let (ox, oy) = ((k % cols) * s, (k / cols) * s);
        for y in 0..s {
            for x in 0..s {
                out.set_pixel(ox + x, oy + y, img.pixel_bytes(x, y));
            }
        }
    }
    Ok(out)
}
