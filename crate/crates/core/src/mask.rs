//! Pixel masks, latent edit sets and the geometry used by the samplers.
//!
//! Convention throughout: a pixel mask value of 1 marks the preserved source
//! region, 0 the region to edit.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{decode_pnm, encode_pnm};
use crate::rng::{stream_rng, streams};

/// Binary `h x w` mask; `true` = preserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    keep: Vec<bool>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, keep: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || keep.len() != height * width {
            return Err(Error::shape("pixel mask", &[height, width], &[keep.len()]));
        }
        Ok(PixelMask { height, width, keep })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let keep = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, keep)
    }

    pub fn all_preserved(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![true; height * width])
    }

    /// Everything preserved except the half-open rectangle, which is edited.
    pub fn with_edit_rect(height: usize, width: usize, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        Self::from_fn(height, width, |y, x| !(y >= top && y < top + h && x >= left && x < left + w))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_preserved(&self, y: usize, x: usize) -> bool {
        self.keep[y * self.width + x]
    }

    pub fn edit_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn preserved_count(&self) -> usize {
        self.keep.len() - self.edit_count()
    }

    /// Error unless the mask has both an edit and a preserved region.
    pub fn check_not_degenerate(&self) -> Result<()> {
        let edit = self.edit_count();
        if edit == 0 || edit == self.keep.len() {
            let what = if edit == 0 { "all-ones" } else { "all-zeros" };
            return Err(Error::invalid(format!("degenerate mask ({what}): nothing to edit or nothing to keep")));
        }
        Ok(())
    }

    /// P5 bytes with 255 = preserved, 0 = edit.
    pub fn to_pgm(&self) -> Vec<u8> {
        let samples: Vec<u8> = self.keep.iter().map(|&k| if k { 255 } else { 0 }).collect();
        encode_pnm(self.width, self.height, 1, &samples).expect("single channel is always encodable")
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let pnm = decode_pnm(bytes)?;
        if pnm.channels != 1 {
            return Err(Error::format("masks must be single-channel PGM (P5)"));
        }
        let keep = pnm
            .samples
            .iter()
            .enumerate()
            .map(|(i, &v)| match v {
                255 => Ok(true),
                0 => Ok(false),
                v => Err(Error::format(format!(
                    "mask value {v} at pixel ({}, {}) is neither 0 nor 255",
                    i / pnm.width,
                    i % pnm.width
                ))),
            })
            .collect::<Result<_>>()?;
        Self::new(pnm.height, pnm.width, keep)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::from_pgm(&bytes).map_err(|e| e.in_file(path))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::from(e).in_file(path))
    }
}

/// Latent positions eligible for editing: `base` is randomized, `dilated`
/// (a superset) is resampled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentEditSet {
    height: usize,
    width: usize,
    base: Vec<bool>,
    dilated: Vec<bool>,
}

impl LatentEditSet {
    /// Both sets equal to `base`.
    pub fn new(height: usize, width: usize, base: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || base.len() != height * width {
            return Err(Error::shape("latent edit set", &[height, width], &[base.len()]));
        }
        Ok(LatentEditSet {
            height,
            width,
            dilated: base.clone(),
            base,
        })
    }

    pub fn from_positions(height: usize, width: usize, positions: &[usize]) -> Result<Self> {
        let mut base = vec![false; height * width];
        for &p in positions {
            *base
                .get_mut(p)
                .ok_or_else(|| Error::invalid(format!("position {p} outside {height}x{width} grid")))? = true;
        }
        Self::new(height, width, base)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn in_base(&self, p: usize) -> bool {
        self.base[p]
    }

    pub fn in_dilated(&self, p: usize) -> bool {
        self.dilated[p]
    }

    pub fn base_positions(&self) -> Vec<usize> {
        positions(&self.base)
    }

    pub fn dilated_positions(&self) -> Vec<usize> {
        positions(&self.dilated)
    }
}

fn positions(set: &[bool]) -> Vec<usize> {
    set.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

/// A latent position is edited iff its `f x f` cell holds at least one
/// edit pixel.
pub fn downsample_mask(m: &PixelMask, f: usize) -> Result<LatentEditSet> {
    if f == 0 || m.height % f != 0 || m.width % f != 0 {
        return Err(Error::invalid(format!(
            "mask {}x{} is not divisible by patch size {f}",
            m.height, m.width
        )));
    }
    let (gh, gw) = (m.height / f, m.width / f);
    let mut base = vec![false; gh * gw];
    for y in 0..m.height {
        for x in 0..m.width {
            if !m.is_preserved(y, x) {
                base[(y / f) * gw + x / f] = true;
            }
        }
    }
    LatentEditSet::new(gh, gw, base)
}

/// Grow the base set by Chebyshev radius `radius`, clipped to the grid.
pub fn dilate(set: &LatentEditSet, radius: usize) -> LatentEditSet {
    let (h, w) = (set.height, set.width);
    let mut dilated = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !set.base[y * w + x] {
                continue;
            }
            for ny in y.saturating_sub(radius)..=(y + radius).min(h - 1) {
                for nx in x.saturating_sub(radius)..=(x + radius).min(w - 1) {
                    dilated[ny * w + nx] = true;
                }
            }
        }
    }
    LatentEditSet {
        height: h,
        width: w,
        base: set.base.clone(),
        dilated,
    }
}

// Clockwise from east, 45 degrees per step: E, SE, S, SW, W, NW, N, NE.
const HEADINGS: [(isize, isize); 8] = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)];
// Turn preference, in 45-degree clockwise steps.
const TURNS: [usize; 8] = [0, 1, 2, 7, 6, 3, 5, 4];

/// Peel index of every position of `set` (0 = touches the complement or the
/// grid border); `None` outside the set.
pub fn peel_layers(set: &[bool], h: usize, w: usize) -> Vec<Option<usize>> {
    let mut layer = vec![None; h * w];
    let mut remaining: Vec<bool> = set.to_vec();
    let mut k = 0;
    while remaining.iter().any(|&b| b) {
        let ring: Vec<usize> = (0..h * w)
            .filter(|&p| {
                remaining[p]
                    && HEADINGS.iter().any(|&(dy, dx)| {
                        let (y, x) = ((p / w) as isize + dy, (p % w) as isize + dx);
                        y < 0 || x < 0 || y >= h as isize || x >= w as isize || !remaining[y as usize * w + x as usize]
                    })
            })
            .collect();
        for &p in &ring {
            remaining[p] = false;
            layer[p] = Some(k);
        }
        k += 1;
    }
    layer
}

/// Border-to-centre visiting order over the dilated set: erosion layers
/// outermost first, each walked clockwise from its topmost-then-leftmost cell.
pub fn spiral_order(set: &LatentEditSet) -> Result<Vec<usize>> {
    let (h, w) = (set.height, set.width);
    let layers = peel_layers(&set.dilated, h, w);
    let depth = layers.iter().flatten().max().copied().ok_or_else(|| Error::invalid("spiral order of an empty edit set"))?;
    let mut order = Vec::new();
    for k in 0..=depth {
        let mut todo: Vec<bool> = layers.iter().map(|&l| l == Some(k)).collect();
        let mut left = todo.iter().filter(|&&b| b).count();
        while left > 0 {
            // (re)start at the topmost-leftmost unvisited cell, heading east
            let mut cur = todo.iter().position(|&b| b).expect("cells remain");
            let mut heading = 0;
            loop {
                todo[cur] = false;
                order.push(cur);
                left -= 1;
                let next = TURNS.iter().find_map(|&t| {
                    let d = (heading + t) % 8;
                    let (dy, dx) = HEADINGS[d];
                    let (y, x) = ((cur / w) as isize + dy, (cur % w) as isize + dx);
                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        return None;
                    }
                    let p = y as usize * w + x as usize;
                    todo[p].then_some((p, d))
                });
                match next {
                    Some((p, d)) => {
                        cur = p;
                        heading = d;
                    }
                    None => break,
                }
            }
        }
    }
    Ok(order)
}

/// Uniform random permutation of the dilated set.
pub fn random_order(set: &LatentEditSet, seed: u64) -> Result<Vec<usize>> {
    let mut order = set.dilated_positions();
    if order.is_empty() {
        return Err(Error::invalid("random order of an empty edit set"));
    }
    order.shuffle(&mut stream_rng(seed, streams::ORDER));
    Ok(order)
}

/// Mask after gaussian blurring; 1 = fully source.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl SoftMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

/// Kernel radius used for a given sigma.
pub fn blur_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Separable truncated gaussian (radius `ceil(3 sigma)`), renormalized over
/// the in-bounds part of the kernel. Pixels whose whole support is preserved
/// come out as exactly 1.
pub fn gaussian_soft_mask(m: &PixelMask, sigma: f64) -> Result<SoftMask> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be a finite non-negative number, got {sigma}")));
    }
    let (h, w) = (m.height, m.width);
    let src: Vec<f64> = m.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
    if sigma == 0.0 {
        return Ok(SoftMask {
            height: h,
            width: w,
            values: src.iter().map(|&v| v as f32).collect(),
        });
    }
    let r = blur_radius(sigma) as isize;
    let kernel: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let pass = |input: &[f64], step: (isize, isize)| -> Vec<f64> {
        let mut out = vec![0f64; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut num, mut den) = (0f64, 0f64);
                for (ki, &kw) in kernel.iter().enumerate() {
                    let k = ki as isize - r;
                    let (yy, xx) = (y + k * step.0, x + k * step.1);
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        num += kw * input[yy as usize * w + xx as usize];
                        den += kw;
                    }
                }
                out[y as usize * w + x as usize] = num / den;
            }
        }
        out
    };
    let horizontal = pass(&src, (0, 1));
    let both = pass(&horizontal, (1, 0));
    Ok(SoftMask {
        height: h,
        width: w,
        values: both.iter().map(|&v| (v as f32).clamp(0.0, 1.0)).collect(),
    })
}

/// Latent-grid rectangle used as the training perturbation set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingRectangle {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl TrainingRectangle {
    /// Row-major grid positions covered.
    pub fn positions(&self, grid_w: usize) -> Vec<usize> {
        (self.top..self.top + self.height)
            .flat_map(|y| (self.left..self.left + self.width).map(move |x| y * grid_w + x))
            .collect()
    }
}

/// Inclusive side-length range `[ceil(0.2 n), floor(0.5 n)]`.
pub fn rectangle_side_range(n: usize) -> (usize, usize) {
    (n.div_ceil(5), n / 2)
}

/// Side lengths uniform over their ranges, placement uniform over all valid
/// offsets.
pub fn sample_training_rectangle(h_l: usize, w_l: usize, rng: &mut impl Rng) -> Result<TrainingRectangle> {
    if h_l < 5 || w_l < 5 {
        return Err(Error::invalid(format!(
            "latent grid {h_l}x{w_l} too small for training rectangles (need at least 5x5)"
        )));
    }
    let (hmin, hmax) = rectangle_side_range(h_l);
    let (wmin, wmax) = rectangle_side_range(w_l);
    let height = rng.gen_range(hmin..=hmax);
    let width = rng.gen_range(wmin..=wmax);
    let top = rng.gen_range(0..=h_l - height);
    let left = rng.gen_range(0..=w_l - width);
    Ok(TrainingRectangle {
        top,
        left,
        height,
        width,
    })
}
