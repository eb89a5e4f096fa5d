//! Binary PPM (P6) / PGM (P5) codec and image geometry.
//!
//! Resizing is bilinear with corner-aligned sampling: destination pixel i
//! maps to source position i * (src_len - 1) / (dst_len - 1), so the first
//! and last samples land exactly on the first and last source pixels. All
//! operations are pure functions of the input bytes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// 8-bit interleaved image, 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn shorter_side(&self) -> usize {
        self.width.min(self.height)
    }
}

fn skip_whitespace_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn read_uint(bytes: &[u8], pos: usize) -> Result<(usize, usize)> {
    let pos = skip_whitespace_and_comments(bytes, pos);
    let start = pos;
    let mut end = pos;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(Error::ImageDecode {
            detail: "expected integer in header".into(),
        });
    }
    let mut v = 0usize;
    for b in &bytes[start..end] {
        v = v
            .checked_mul(10)
            .and_then(|v| v.checked_add((b - b'0') as usize))
            .ok_or_else(|| Error::ImageDecode {
                detail: "header integer overflow".into(),
            })?;
    }
    Ok((v, end))
}

/// Decode binary PPM (P6, RGB) or PGM (P5, gray) with maxval 255.
pub fn decode_netpbm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 {
        return Err(Error::ImageDecode {
            detail: "shorter than magic".into(),
        });
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(Error::ImageDecode {
                detail: format!("unsupported magic {:?}", other),
            })
        }
    };
    let (width, pos) = read_uint(bytes, 2)?;
    let (height, pos) = read_uint(bytes, pos)?;
    let (maxval, pos) = read_uint(bytes, pos)?;
    if maxval != 255 {
        return Err(Error::ImageDecode {
            detail: format!("unsupported maxval {}", maxval),
        });
    }
    if width == 0 || height == 0 {
        return Err(Error::ImageGeometry {
            detail: format!("degenerate dimensions {}x{}", width, height),
        });
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::ImageDecode {
            detail: "missing separator before payload".into(),
        });
    }
    let payload = &bytes[pos + 1..];
    let need = width * height * channels;
    if payload.len() < need {
        return Err(Error::ImageDecode {
            detail: format!("payload {} bytes, need {}", payload.len(), need),
        });
    }
    Ok(Image {
        width,
        height,
        channels,
        data: payload[..need].to_vec(),
    })
}

/// Encode to binary PPM (3 channels) or PGM (1 channel).
pub fn encode_netpbm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let header = format!("{}\n{} {}\n255\n", magic, img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.data.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&img.data);
    out
}

/// Bilinear resize with corner-aligned sampling.
pub fn resize_bilinear(img: &Image, new_width: usize, new_height: usize) -> Result<Image> {
    if img.width < 1 || img.height < 1 || new_width < 1 || new_height < 1 {
        return Err(Error::ImageGeometry {
            detail: "resize with zero extent".into(),
        });
    }
    let mut out = Image::new(new_width, new_height, img.channels);
    let sx = if new_width > 1 {
        (img.width - 1) as f32 / (new_width - 1) as f32
    } else {
        0.0
    };
    let sy = if new_height > 1 {
        (img.height - 1) as f32 / (new_height - 1) as f32
    } else {
        0.0
    };
    for y in 0..new_height {
        let fy = y as f32 * sy;
        let y0 = fy as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f32;
        for x in 0..new_width {
            let fx = x as f32 * sx;
            let x0 = fx as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f32;
            for c in 0..img.channels {
                let tl = img.at(x0, y0, c) as f32;
                let tr = img.at(x1, y0, c) as f32;
                let bl = img.at(x0, y1, c) as f32;
                let br = img.at(x1, y1, c) as f32;
                let top = tl + (tr - tl) * wx;
                let bot = bl + (br - bl) * wx;
                let v = top + (bot - top) * wy;
                out.set(x, y, c, libm::roundf(v.clamp(0.0, 255.0)) as u8);
            }
        }
    }
    Ok(out)
}

/// Resize so the shorter side equals `target`, preserving aspect ratio
/// (the longer side rounds to nearest).
pub fn resize_shorter_side(img: &Image, target: usize) -> Result<Image> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::ImageGeometry {
            detail: "degenerate input".into(),
        });
    }
    let (w, h) = if img.width <= img.height {
        let scale = target as f32 / img.width as f32;
        (
            target,
            (libm::roundf(img.height as f32 * scale) as usize).max(1),
        )
    } else {
        let scale = target as f32 / img.height as f32;
        (
            (libm::roundf(img.width as f32 * scale) as usize).max(1),
            target,
        )
    };
    resize_bilinear(img, w, h)
}

pub fn crop(img: &Image, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
    if x0 + width > img.width || y0 + height > img.height {
        return Err(Error::ImageGeometry {
            detail: format!(
                "crop {}x{}+{}+{} exceeds {}x{}",
                width, height, x0, y0, img.width, img.height
            ),
        });
    }
    let mut out = Image::new(width, height, img.channels);
    for y in 0..height {
        let src = ((y0 + y) * img.width + x0) * img.channels;
        let dst = y * width * img.channels;
        out.data[dst..dst + width * img.channels]
            .copy_from_slice(&img.data[src..src + width * img.channels]);
    }
    Ok(out)
}

pub fn hflip(img: &Image) -> Image {
    let mut out = Image::new(img.width, img.height, img.channels);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.set(x, y, c, img.at(img.width - 1 - x, y, c));
            }
        }
    }
    out
}
