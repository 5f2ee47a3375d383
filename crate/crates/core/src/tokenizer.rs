//! Patch vector-quantization: images become grids of codebook indices.
//!
//! The encoder cuts an image into non-overlapping `f x f` patches, the
//! quantizer maps each flattened patch to its nearest codeword and the
//! decoder pastes codewords back. Because patches do not overlap, changing
//! one token changes exactly one patch of the decoded image and vice versa.

use std::collections::{HashMap, HashSet};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{stream_rng, streams};
use crate::tensor::Tensor;

const CODEBOOK_MAGIC: &[u8; 4] = b"EDBK";
const CODEBOOK_VERSION: u32 = 1;

/// Finite dictionary of `d`-dimensional codewords.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    dim: usize,
    vectors: Vec<f32>,
}

impl Codebook {
    /// Rejects empty books, non-finite values and duplicate codewords.
    pub fn new(dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 || vectors.is_empty() || vectors.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "codebook of {} values is not a whole number of {dim}-dimensional codewords",
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook".into()));
        }
        let mut seen = HashSet::new();
        for (k, w) in vectors.chunks(dim).enumerate() {
            if !seen.insert(bit_key(w)) {
                return Err(Error::invalid(format!("codeword {k} duplicates an earlier codeword")));
            }
        }
        Ok(Codebook { dim, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codeword(&self, k: usize) -> &[f32] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    /// Index of the nearest codeword; ties go to the smallest index.
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for k in 0..self.len() {
            let d = sq_dist(v, self.codeword(k));
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }

    /// Content hash, used to tie token datasets to the book that made them.
    pub fn id(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.dim.hash(&mut h);
        bit_key(&self.vectors).hash(&mut h);
        h.finish()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.vectors.len());
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("codebook file truncated"))?;
        if &magic != CODEBOOK_MAGIC {
            return Err(Error::format("not a codebook file (bad magic)"));
        }
        let mut word = || -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| Error::format("codebook file truncated"))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = word()?;
        if version != CODEBOOK_VERSION {
            return Err(Error::format(format!("unsupported codebook version {version}")));
        }
        let (n, d) = (word()? as usize, word()? as usize);
        let body = &bytes[16..];
        if body.len() != n * d * 4 {
            return Err(Error::format(format!(
                "codebook body has {} bytes, header promises {n}x{d} f32",
                body.len()
            )));
        }
        let vectors = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Codebook::new(d, vectors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::from(e).in_file(path))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::from(e).in_file(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
        Codebook::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }
}

fn bit_key(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// `h_l x w_l` grid of token indices, flattened row-major into the sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, tokens: Vec<usize>) -> Result<Self> {
        if height == 0 || width == 0 || tokens.len() != height * width {
            return Err(Error::shape("token grid", &[height, width], &[tokens.len()]));
        }
        Ok(TokenGrid { height, width, tokens })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The row-major sequence.
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut [usize] {
        &mut self.tokens
    }

    pub fn into_tokens(self) -> Vec<usize> {
        self.tokens
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.tokens[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, token: usize) {
        self.tokens[row * self.width + col] = token;
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.tokens.iter().position(|&t| t >= vocab) {
            Some(p) => Err(Error::invalid(format!(
                "token {} at position {p} out of range for vocabulary {vocab}",
                self.tokens[p]
            ))),
            None => Ok(()),
        }
    }

    pub fn hamming(&self, other: &TokenGrid) -> usize {
        self.tokens.iter().zip(&other.tokens).filter(|(a, b)| a != b).count()
    }
}

fn check_divisible(image: &Image, f: usize) -> Result<()> {
    if f == 0 || image.height() % f != 0 || image.width() % f != 0 {
        return Err(Error::invalid(format!(
            "image {}x{} is not divisible by patch size {f}",
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

/// `[l, f*f*c]` matrix; row `i` is the patch at grid position `i` flattened
/// as `(dy, dx, channel)`.
pub fn patchify(image: &Image, f: usize) -> Result<Tensor> {
    check_divisible(image, f)?;
    let (gh, gw, c) = (image.height() / f, image.width() / f, image.channels());
    let d = f * f * c;
    let mut data = Vec::with_capacity(gh * gw * d);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..f {
                let start = image.index(gy * f + dy, gx * f, 0);
                data.extend_from_slice(&image.data()[start..start + f * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, d], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, grid_h: usize, grid_w: usize, f: usize, channels: usize) -> Result<Image> {
    let (l, d) = patches.dims2("unpatchify")?;
    if l != grid_h * grid_w || d != f * f * channels {
        return Err(Error::shape("unpatchify", patches.shape(), &[grid_h * grid_w, f * f * channels]));
    }
    let (h, w) = (grid_h * f, grid_w * f);
    let mut data = vec![0f32; h * w * channels];
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let patch = patches.row(gy * grid_w + gx);
            for dy in 0..f {
                let start = ((gy * f + dy) * w + gx * f) * channels;
                data[start..start + f * channels].copy_from_slice(&patch[dy * f * channels..(dy + 1) * f * channels]);
            }
        }
    }
    Image::new(h, w, channels, data)
}

/// Nearest-codeword assignment of each row of `vectors`.
pub fn quantize(vectors: &Tensor, codebook: &Codebook, grid: (usize, usize)) -> Result<TokenGrid> {
    let (l, d) = vectors.dims2("quantize")?;
    if d != codebook.dim() {
        return Err(Error::shape("quantize", vectors.shape(), &[codebook.len(), codebook.dim()]));
    }
    let tokens = (0..l).map(|i| codebook.nearest(vectors.row(i))).collect();
    TokenGrid::new(grid.0, grid.1, tokens)
}

/// Encoder/decoder pair around a codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTokenizer {
    codebook: Codebook,
    patch: usize,
    channels: usize,
}

impl PatchTokenizer {
    pub fn new(codebook: Codebook, patch: usize) -> Result<Self> {
        let area = patch * patch;
        if patch == 0 || codebook.dim() % area != 0 {
            return Err(Error::invalid(format!(
                "codeword dimension {} is not a multiple of patch area {area}",
                codebook.dim()
            )));
        }
        let channels = codebook.dim() / area;
        Ok(PatchTokenizer {
            codebook,
            patch,
            channels,
        })
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn vocab(&self) -> usize {
        self.codebook.len()
    }

    /// `Q_Z(E(image))`.
    pub fn encode(&self, image: &Image) -> Result<TokenGrid> {
        if image.channels() != self.channels {
            return Err(Error::invalid(format!(
                "image has {} channels, tokenizer expects {}",
                image.channels(),
                self.channels
            )));
        }
        let patches = patchify(image, self.patch)?;
        quantize(
            &patches,
            &self.codebook,
            (image.height() / self.patch, image.width() / self.patch),
        )
    }

    /// Paste codewords back as patches; values clamped to `[0, 1]`.
    pub fn decode(&self, grid: &TokenGrid) -> Result<Image> {
        grid.check_vocab(self.codebook.len())?;
        let d = self.codebook.dim();
        let mut data = Vec::with_capacity(grid.len() * d);
        for &t in grid.tokens() {
            data.extend_from_slice(self.codebook.codeword(t));
        }
        let patches = Tensor::new(&[grid.len(), d], data)?;
        unpatchify(&patches, grid.height(), grid.width(), self.patch, self.channels)
    }
}

/// Outcome of [`kmeans_codebook`]: the book plus the mean squared
/// quantization error measured at every assignment step.
#[derive(Clone, Debug)]
pub struct KMeansReport {
    pub codebook: Codebook,
    pub mse_history: Vec<f64>,
}

/// Learn an `n`-word codebook from every `f x f` patch of `images`.
pub fn learn_codebook(images: &[Image], n: usize, f: usize, iters: usize, seed: u64) -> Result<Codebook> {
    Ok(kmeans_codebook(images, n, f, iters, seed)?.codebook)
}

/// k-means with k-means++ seeding. Empty clusters are re-seeded from the
/// patch farthest from its centroid. Each final centroid is replaced by the
/// most frequent patch of its cluster (ties: the member nearest the
/// centroid), so patches that recur exactly decode exactly.
pub fn kmeans_codebook(images: &[Image], n: usize, f: usize, iters: usize, seed: u64) -> Result<KMeansReport> {
    if images.is_empty() {
        return Err(Error::invalid("cannot learn a codebook from an empty dataset"));
    }
    if n == 0 {
        return Err(Error::invalid("codebook size must be positive"));
    }
    let mut rows: Vec<f32> = Vec::new();
    let mut d = 0;
    for img in images {
        let p = patchify(img, f)?;
        let (_, pd) = p.dims2("kmeans")?;
        if d != 0 && pd != d {
            return Err(Error::invalid("images disagree on channel count"));
        }
        d = pd;
        rows.extend_from_slice(p.data());
    }
    let points: Vec<&[f32]> = rows.chunks(d).collect();
    let distinct = points.iter().map(|p| bit_key(p)).collect::<HashSet<_>>().len();
    if n > distinct {
        return Err(Error::invalid(format!(
            "codebook size {n} exceeds the {distinct} distinct patches in the dataset"
        )));
    }

    let mut rng = stream_rng(seed, streams::KMEANS);
    let mut centers = kmeans_plus_plus(&points, n, d, &mut rng);
    let mut assign = vec![usize::MAX; points.len()];
    let mut history = Vec::new();

    for _ in 0..iters.max(1) {
        let (new_assign, dists) = assign_all(&points, &centers, d);
        let mse = dists.iter().sum::<f64>() / points.len() as f64;
        history.push(mse);
        let converged = new_assign == assign;
        assign = new_assign;
        if converged {
            break;
        }

        let mut sums = vec![0f64; n * d];
        let mut counts = vec![0usize; n];
        for (p, &k) in points.iter().zip(&assign) {
            counts[k] += 1;
            for (s, &v) in sums[k * d..(k + 1) * d].iter_mut().zip(p.iter()) {
                *s += v as f64;
            }
        }
        let mut taken: HashSet<usize> = HashSet::new();
        for k in 0..n {
            if counts[k] > 0 {
                for j in 0..d {
                    centers[k * d + j] = (sums[k * d + j] / counts[k] as f64) as f32;
                }
            } else {
                let far = farthest_point(&dists, &taken);
                taken.insert(far);
                centers[k * d..(k + 1) * d].copy_from_slice(points[far]);
            }
        }
    }

    snap_to_members(&points, &mut centers, d);
    dedupe_centers(&points, &mut centers, d);
    let codebook = Codebook::new(d, centers)?;
    Ok(KMeansReport {
        codebook,
        mse_history: history,
    })
}

fn kmeans_plus_plus(points: &[&[f32]], n: usize, d: usize, rng: &mut impl Rng) -> Vec<f32> {
    let mut centers = Vec::with_capacity(n * d);
    let first = rng.gen_range(0..points.len());
    centers.extend_from_slice(points[first]);
    let mut best: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();
    for _ in 1..n {
        let total: f64 = best.iter().sum();
        // total > 0 because n <= distinct patches
        let mut target = rng.gen::<f64>() * total;
        let mut pick = best.iter().rposition(|&w| w > 0.0).unwrap_or(0);
        for (i, &w) in best.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        let c = points[pick].to_vec();
        for (b, p) in best.iter_mut().zip(points) {
            *b = b.min(sq_dist(p, &c));
        }
        centers.extend_from_slice(&c);
    }
    centers
}

fn assign_all(points: &[&[f32]], centers: &[f32], d: usize) -> (Vec<usize>, Vec<f64>) {
    let k = centers.len() / d;
    points
        .par_iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let dist = sq_dist(p, &centers[c * d..(c + 1) * d]);
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            (best.1, best.0)
        })
        .unzip()
}

fn farthest_point(dists: &[f64], taken: &HashSet<usize>) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, &dv) in dists.iter().enumerate() {
        if dv > best.0 && !taken.contains(&i) {
            best = (dv, i);
        }
    }
    best.1
}

fn snap_to_members(points: &[&[f32]], centers: &mut [f32], d: usize) {
    let (assign, _) = assign_all(points, centers, d);
    let k = centers.len() / d;
    let mut counts: HashMap<(usize, Vec<u32>), usize> = HashMap::new();
    for (p, &c) in points.iter().zip(&assign) {
        *counts.entry((c, bit_key(p))).or_default() += 1;
    }
    // (count, -distance, point index) per cluster
    let mut best: Vec<Option<(usize, f64, usize)>> = vec![None; k];
    for (i, (p, &c)) in points.iter().zip(&assign).enumerate() {
        let n = counts[&(c, bit_key(p))];
        let dist = sq_dist(p, &centers[c * d..(c + 1) * d]);
        let better = match best[c] {
            None => true,
            Some((bn, bd, _)) => n > bn || (n == bn && dist < bd),
        };
        if better {
            best[c] = Some((n, dist, i));
        }
    }
    for (c, b) in best.into_iter().enumerate() {
        if let Some((_, _, i)) = b {
            centers[c * d..(c + 1) * d].copy_from_slice(points[i]);
        }
    }
}

/// Replace any centroid identical to an earlier one with the patch that is
/// farthest from the current book.
fn dedupe_centers(points: &[&[f32]], centers: &mut [f32], d: usize) {
    let k = centers.len() / d;
    loop {
        let mut seen = HashSet::new();
        let dup = (0..k).find(|&c| !seen.insert(bit_key(&centers[c * d..(c + 1) * d])));
        let Some(dup) = dup else { return };
        let (_, dists) = assign_all(points, centers, d);
        let far = farthest_point(&dists, &HashSet::new());
        centers[dup * d..(dup + 1) * d].copy_from_slice(points[far]);
    }
}

/// Where a token grid came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub source: String,
    pub split: String,
}

/// `D_S`: one token grid per image, all from the same codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub grids: Vec<TokenGrid>,
    pub provenance: Vec<Provenance>,
    pub codebook_id: u64,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn grid_shape(&self) -> Option<(usize, usize)> {
        self.grids.first().map(|g| (g.height(), g.width()))
    }
}

/// Encode every image, preserving order. `ids` names each image's source.
pub fn build_sequence_dataset(
    images: &[Image],
    ids: &[String],
    split: &str,
    tokenizer: &PatchTokenizer,
) -> Result<SequenceDataset> {
    if ids.len() != images.len() {
        return Err(Error::invalid(format!("{} images but {} ids", images.len(), ids.len())));
    }
    let grids: Vec<TokenGrid> = images.par_iter().map(|img| tokenizer.encode(img)).collect::<Result<_>>()?;
    if let Some(first) = grids.first() {
        if grids.iter().any(|g| g.height() != first.height() || g.width() != first.width()) {
            return Err(Error::invalid("images in a sequence dataset must share one size"));
        }
    }
    Ok(SequenceDataset {
        grids,
        provenance: ids
            .iter()
            .map(|id| Provenance {
                source: id.clone(),
                split: split.to_string(),
            })
            .collect(),
        codebook_id: tokenizer.codebook().id(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        let n = h * w * c;
        Image::new(h, w, c, (0..n).map(|i| i as f32 / n as f32).collect()).unwrap()
    }

    #[test]
    fn patchify_index_arithmetic() {
        // 4x4 single channel: value = 10*y + x, scaled
        let img = Image::new(4, 4, 1, (0..16).map(|i| ((i / 4) * 10 + i % 4) as f32 / 100.0).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        let expect: Vec<f32> = [0, 1, 10, 11].iter().map(|&v| v as f32 / 100.0).collect();
        assert_eq!(p.row(0), &expect[..]);
        let expect3: Vec<f32> = [22, 23, 32, 33].iter().map(|&v| v as f32 / 100.0).collect();
        assert_eq!(p.row(3), &expect3[..]);
    }

    #[test]
    fn single_patch_and_round_trip() {
        let img = ramp(8, 8, 3);
        let p = patchify(&img, 8).unwrap();
        assert_eq!(p.shape(), &[1, 192]);
        let img2 = ramp(8, 12, 3);
        let p2 = patchify(&img2, 4).unwrap();
        assert_eq!(unpatchify(&p2, 2, 3, 4, 3).unwrap(), img2);
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let err = patchify(&ramp(6, 8, 1), 4).unwrap_err().to_string();
        assert!(err.contains("6x8") && err.contains('4'), "{err}");
    }

    #[test]
    fn codebook_rejects_duplicates() {
        assert!(Codebook::new(2, vec![0.0, 1.0, 0.0, 1.0]).is_err());
        assert!(Codebook::new(2, vec![0.0, 1.0, 0.5]).is_err());
        assert!(Codebook::new(2, vec![f32::NAN, 1.0]).is_err());
    }

    #[test]
    fn quantize_cases() {
        let one = Codebook::new(2, vec![0.3, 0.3]).unwrap();
        let v = Tensor::new(&[3, 2], vec![0.0, 1.0, 0.9, 0.1, 0.5, 0.5]).unwrap();
        assert_eq!(quantize(&v, &one, (1, 3)).unwrap().tokens(), &[0, 0, 0]);

        let book = Codebook::new(2, vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        let v = Tensor::new(&[3, 2], vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(quantize(&v, &book, (3, 1)).unwrap().tokens(), &[2, 1, 0]);

        // equidistant from 0 and 1: smallest index wins
        let tie = Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(quantize(&tie, &book, (1, 1)).unwrap().tokens(), &[0]);

        let wrong = Tensor::new(&[1, 3], vec![0.0; 3]).unwrap();
        assert!(quantize(&wrong, &book, (1, 1)).is_err());
    }

    #[test]
    fn decode_rejects_bad_tokens() {
        let tok = PatchTokenizer::new(Codebook::new(4, vec![0.0, 0.0, 0.0, 0.0]).unwrap(), 2).unwrap();
        let g = TokenGrid::new(1, 1, vec![1]).unwrap();
        assert!(tok.decode(&g).is_err());
    }

    #[test]
    fn uniform_codeword_decodes_to_constant_image() {
        let tok = PatchTokenizer::new(Codebook::new(4, vec![0.25; 4]).unwrap(), 2).unwrap();
        let g = TokenGrid::new(2, 3, vec![0; 6]).unwrap();
        let img = tok.decode(&g).unwrap();
        assert_eq!((img.height(), img.width()), (4, 6));
        assert!(img.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn codebook_file_round_trip_and_errors() {
        let book = Codebook::new(3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.125]).unwrap();
        let bytes = book.to_bytes();
        assert_eq!(&bytes[..4], b"EDBK");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(Codebook::from_bytes(&bytes).unwrap(), book);
        assert!(Codebook::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Codebook::from_bytes(&bad).is_err());
        let mut ver = bytes;
        ver[4] = 9;
        assert!(Codebook::from_bytes(&ver).is_err());
    }

    #[test]
    fn kmeans_single_constant_patch() {
        let imgs = vec![Image::filled(8, 8, 1, 0.4).unwrap(); 3];
        let book = learn_codebook(&imgs, 1, 4, 10, 1).unwrap();
        assert_eq!(book.len(), 1);
        assert!(book.codeword(0).iter().all(|&v| v == 0.4));
        assert!(learn_codebook(&imgs, 2, 4, 10, 1).is_err());
        assert!(learn_codebook(&[], 1, 4, 10, 1).is_err());
    }

    #[test]
    fn empty_dataset_gives_empty_sequences() {
        let tok = PatchTokenizer::new(Codebook::new(4, vec![0.0; 4]).unwrap(), 2).unwrap();
        let ds = build_sequence_dataset(&[], &[], "train", &tok).unwrap();
        assert!(ds.is_empty());
    }
}
