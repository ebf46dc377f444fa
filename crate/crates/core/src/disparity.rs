//! Integer block-matching disparity (SAD cost, left-referenced search).
//!
//! Disparity 0 doubles as "no data": border pixels, blocks that do not fit,
//! and true zero-disparity winners all read as 0.

use std::io::{Read, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::raster::{self, GrayImage, RasterError, RgbImage};

#[derive(Debug, Error)]
pub enum DisparityError {
    #[error("image dimensions differ: left {left:?}, right {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("block at ({u}, {v}) with disparity {d} is out of bounds")]
    BlockOutOfBounds { u: usize, v: usize, d: usize },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DisparityParams {
    pub block_w: usize,
    pub block_h: usize,
    pub max_disparity: usize,
    /// Spacing of evaluated block centers; the winner is written to the whole
    /// `block_step × block_step` tile. 1 means dense.
    pub block_step: usize,
}

impl Default for DisparityParams {
    fn default() -> Self {
        Self {
            block_w: 5,
            block_h: 5,
            max_disparity: 64,
            block_step: 5,
        }
    }
}

impl DisparityParams {
    pub fn dense(block: usize, max_disparity: usize) -> Self {
        Self {
            block_w: block,
            block_h: block,
            max_disparity,
            block_step: 1,
        }
    }

    pub fn validate(&self, width: usize) -> Result<(), DisparityError> {
        let bad = |msg: String| Err(DisparityError::InvalidParams(msg));
        if self.block_w == 0 || self.block_h == 0 || self.block_w.is_multiple_of(2) || self.block_h.is_multiple_of(2) {
            return bad(format!(
                "block {}x{} must have odd dimensions >= 1",
                self.block_w, self.block_h
            ));
        }
        if self.max_disparity < 1 || self.max_disparity >= width {
            return bad(format!(
                "max_disparity {} must be in [1, {})",
                self.max_disparity, width
            ));
        }
        if self.max_disparity > u16::MAX as usize {
            return bad(format!("max_disparity {} exceeds 16 bits", self.max_disparity));
        }
        if self.block_step == 0 {
            return bad("block_step must be >= 1".into());
        }
        Ok(())
    }

    #[inline]
    fn radii(&self) -> (usize, usize) {
        (self.block_w / 2, self.block_h / 2)
    }
}

/// Per-pixel integer disparity, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DisparityMap {
    width: usize,
    height: usize,
    data: Vec<u16>,
}

impl DisparityMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u16>) -> Result<Self, RasterError> {
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

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> u16 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, d: u16) {
        self.data[v * self.width + u] = d;
    }

    pub fn as_raw(&self) -> &[u16] {
        &self.data
    }

    pub fn write_pgm<W: Write>(&self, w: W) -> Result<(), RasterError> {
        raster::write_pgm16(w, self.width, self.height, &self.data)
    }

    pub fn read_pgm<R: Read>(r: R) -> Result<Self, RasterError> {
        let (width, height, data) = raster::read_pgm16(r)?;
        Self::from_vec(width, height, data)
    }

    /// 8-bit visualization scaled so `max_disparity` maps to 255.
    pub fn to_preview(&self, max_disparity: usize) -> GrayImage {
        let scale = 255.0 / max_disparity.max(1) as f64;
        let data = self
            .data
            .iter()
            .map(|&d| (d as f64 * scale).round().min(255.0) as u8)
            .collect();
        GrayImage::from_vec(self.width, self.height, data).expect("dims match")
    }
}

/// BT.601 luma: round(0.299 R + 0.587 G + 0.114 B).
pub fn to_grayscale(rgb: &RgbImage) -> GrayImage {
    let data = rgb
        .pixels()
        .map(|[r, g, b]| {
            let weighted = 299 * r as u32 + 587 * g as u32 + 114 * b as u32;
            ((weighted + 500) / 1000).min(255) as u8
        })
        .collect();
    GrayImage::from_vec(rgb.width(), rgb.height(), data).expect("dims match")
}

fn check_pair(left: &GrayImage, right: &GrayImage) -> Result<(), DisparityError> {
    if left.dims() != right.dims() {
        return Err(DisparityError::DimensionMismatch {
            left: left.dims(),
            right: right.dims(),
        });
    }
    Ok(())
}

/// Sum of absolute differences between the block centered at `(u, v)` in
/// `left` and at `(u - d, v)` in `right`.
pub fn sad_cost(
    left: &GrayImage,
    right: &GrayImage,
    u: usize,
    v: usize,
    d: usize,
    params: &DisparityParams,
) -> Result<u32, DisparityError> {
    check_pair(left, right)?;
    let (rw, rh) = params.radii();
    let (w, h) = left.dims();
    if u < rw + d || u + rw >= w || v < rh || v + rh >= h {
        return Err(DisparityError::BlockOutOfBounds { u, v, d });
    }
    let mut cost = 0u32;
    for y in v - rh..=v + rh {
        let (lrow, rrow) = (left.row(y), right.row(y));
        for x in u - rw..=u + rw {
            cost += lrow[x].abs_diff(rrow[x - d]) as u32;
        }
    }
    Ok(cost)
}

/// `(start, center)` of each tile along an axis of length `len`.
fn tiles(len: usize, step: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..len).step_by(step).map(move |start| {
        let end = (start + step).min(len);
        (start, end, start + (end - start - 1) / 2)
    })
}

/// Winning disparities for one row of block centers. `centers` is sorted;
/// entries whose block does not fit yield 0.
fn match_row(
    left: &GrayImage,
    right: &GrayImage,
    v: usize,
    centers: &[usize],
    params: &DisparityParams,
) -> Vec<u16> {
    let (w, h) = left.dims();
    let (rw, rh) = params.radii();
    let mut out = vec![0u16; centers.len()];
    if v < rh || v + rh >= h {
        return out;
    }
    let lrows: Vec<&[u8]> = (v - rh..=v + rh).map(|y| left.row(y)).collect();
    let rrows: Vec<&[u8]> = (v - rh..=v + rh).map(|y| right.row(y)).collect();

    // Centers whose block fits horizontally, with their best cost so far.
    let valid: Vec<(usize, usize)> = centers
        .iter()
        .enumerate()
        .filter(|&(_, &u)| u >= rw && u + rw < w)
        .map(|(i, &u)| (i, u))
        .collect();
    if valid.is_empty() {
        return out;
    }
    let mut best = vec![u32::MAX; valid.len()];
    let mut column = vec![0u32; w];
    let max_d = params.max_disparity.min(w - 1);

    for d in 0..=max_d {
        // Column sums of |L(x) - R(x - d)| over the block height, x >= d.
        column[d..].iter_mut().for_each(|c| *c = 0);
        for (lrow, rrow) in lrows.iter().zip(&rrows) {
            for ((c, &l), &r) in column[d..].iter_mut().zip(&lrow[d..]).zip(&rrow[..w - d]) {
                *c += l.abs_diff(r) as u32;
            }
        }
        // Centers are sorted, so the ones admitting `d` form a suffix.
        let first = valid.partition_point(|&(_, u)| u < rw + d);
        if first == valid.len() {
            break;
        }
        let mut window_left = valid[first].1 - rw;
        let mut window: u32 = column[window_left..=valid[first].1 + rw].iter().sum();
        for (k, &(i, u)) in valid.iter().enumerate().skip(first) {
            let start = u - rw;
            if start != window_left {
                if start < window_left + params.block_w {
                    // Slide the window right.
                    for x in window_left..start {
                        window -= column[x];
                        window += column[x + params.block_w];
                    }
                } else {
                    window = column[start..=u + rw].iter().sum();
                }
                window_left = start;
            }
            if window < best[k] {
                best[k] = window;
                out[i] = d as u16;
            }
        }
    }
    out
}

/// Dense or tiled block matching over a rectified pair.
///
/// Each evaluated center takes the disparity in `[0, min(max_disparity,
/// u - radius)]` with the lowest SAD, ties resolved towards the smallest
/// disparity. Rows of tiles are processed in parallel and written to disjoint
/// output bands, so the result does not depend on the worker count.
pub fn compute_disparity_map(
    left: &GrayImage,
    right: &GrayImage,
    params: &DisparityParams,
) -> Result<DisparityMap, DisparityError> {
    check_pair(left, right)?;
    let (w, h) = left.dims();
    params.validate(w)?;
    let step = params.block_step;
    let col_tiles: Vec<(usize, usize, usize)> = tiles(w, step).collect();
    let centers: Vec<usize> = col_tiles.iter().map(|t| t.2).collect();

    let mut map = DisparityMap::new(w, h);
    map.data
        .par_chunks_mut(step * w)
        .enumerate()
        .for_each(|(tile_row, band)| {
            let v0 = tile_row * step;
            let rows = band.len() / w;
            let center_v = v0 + (rows - 1) / 2;
            let winners = match_row(left, right, center_v, &centers, params);
            for (&(start, end, _), &d) in col_tiles.iter().zip(&winners) {
                if d == 0 {
                    continue;
                }
                for r in 0..rows {
                    band[r * w + start..r * w + end].fill(d);
                }
            }
        });
    Ok(map)
}

/// Straightforward dense reference implementation with the same contract as
/// [`compute_disparity_map`] at `block_step = 1`. `params.block_step` is
/// ignored. Intended for verification.
pub fn disparity_naive_oracle(
    left: &GrayImage,
    right: &GrayImage,
    params: &DisparityParams,
) -> Result<DisparityMap, DisparityError> {
    check_pair(left, right)?;
    let (w, h) = left.dims();
    params.validate(w)?;
    let (rw, rh) = (params.block_w / 2, params.block_h / 2);
    let mut map = DisparityMap::new(w, h);
    for v in 0..h {
        for u in 0..w {
            if u < rw || u + rw >= w || v < rh || v + rh >= h {
                continue;
            }
            let mut best_cost = u64::MAX;
            let mut best_d = 0;
            let mut d = 0;
            while d <= params.max_disparity && d + rw <= u {
                let mut cost = 0u64;
                for dy in 0..params.block_h {
                    for dx in 0..params.block_w {
                        let y = v + dy - rh;
                        let x = u + dx - rw;
                        let a = left.get(x, y) as i64;
                        let b = right.get(x - d, y) as i64;
                        cost += (a - b).unsigned_abs();
                    }
                }
                if cost < best_cost {
                    best_cost = cost;
                    best_d = d;
                }
                d += 1;
            }
            map.set(u, v, best_d as u16);
        }
    }
    Ok(map)
}
