//! Minimal owned 8-bit rasters and file I/O.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("data length {len} does not match {width}x{height}x{channels}")]
    BadLength {
        len: usize,
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("image i/o: {0}")]
    Image(#[from] image::ImageError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed PGM: {0}")]
    Pgm(String),
}

/// Single-channel 8-bit image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        if data.len() != width * height {
            return Err(RasterError::BadLength {
                len: data.len(),
                width,
                height,
                channels: 1,
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> u8 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: u8) {
        self.data[v * self.width + u] = value;
    }

    #[inline]
    pub fn row(&self, v: usize) -> &[u8] {
        &self.data[v * self.width..(v + 1) * self.width]
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }
}

/// Three-channel 8-bit image, row-major interleaved RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        if data.len() != width * height * 3 {
            return Err(RasterError::BadLength {
                len: data.len(),
                width,
                height,
                channels: 3,
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [u8; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, color: [u8; 3]) {
        let i = (v * self.width + u) * 3;
        self.data[i..i + 3].copy_from_slice(&color);
    }

    /// Writes `color` if (u, v) is inside the image; coordinates may be negative.
    #[inline]
    pub fn put(&mut self, u: i64, v: i64, color: [u8; 3]) {
        if u >= 0 && v >= 0 && (u as usize) < self.width && (v as usize) < self.height {
            self.set(u as usize, v as usize, color);
        }
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Per-pixel conversion to luma; see [`crate::disparity::to_grayscale`].
    pub fn to_gray(&self) -> GrayImage {
        crate::disparity::to_grayscale(self)
    }
}

/// Loads any image format the `image` crate decodes (PNG, PNM) as RGB.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage, RasterError> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::from_vec(w as usize, h as usize, img.into_raw())
}

pub fn save_png_rgb(path: impl AsRef<Path>, img: &RgbImage) -> Result<(), RasterError> {
    image::save_buffer(
        path,
        img.as_raw(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(())
}

pub fn save_png_gray(path: impl AsRef<Path>, img: &GrayImage) -> Result<(), RasterError> {
    image::save_buffer(
        path,
        img.as_raw(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::L8,
    )?;
    Ok(())
}

/// Writes a binary 16-bit PGM (P5, maxval 65535, big-endian samples).
pub fn write_pgm16<W: Write>(
    mut w: W,
    width: usize,
    height: usize,
    samples: &[u16],
) -> Result<(), RasterError> {
    if samples.len() != width * height {
        return Err(RasterError::BadLength {
            len: samples.len(),
            width,
            height,
            channels: 1,
        });
    }
    write!(w, "P5\n{width} {height}\n65535\n")?;
    let mut buf = Vec::with_capacity(samples.len() * 2);
    for s in samples {
        buf.extend_from_slice(&s.to_be_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a binary P5 PGM with maxval 65535. Returns (width, height, samples).
pub fn read_pgm16<R: Read>(mut r: R) -> Result<(usize, usize, Vec<u16>), RasterError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
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
            return Err(RasterError::Pgm("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // single whitespace byte separates header from raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(RasterError::Pgm(format!("magic {:?}, expected P5", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| RasterError::Pgm(format!("bad header field {s:?}")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 65535 {
        return Err(RasterError::Pgm(format!("maxval {maxval}, expected 65535")));
    }
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != width * height * 2 {
        return Err(RasterError::Pgm(format!(
            "raster has {} bytes, expected {}",
            body.len(),
            width * height * 2
        )));
    }
    let samples = body
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((width, height, samples))
}
