//! Synthetic data: palette scenes for the image pipeline and a rule-based
//! token language with exact ground truth for the samplers.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{read_image, Image};
use crate::rng::{stream_rng, streams};
use crate::tokenizer::TokenGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    Flat,
    /// Top-to-bottom blend of two palette colors in bands of `snap` rows.
    VerticalGradient,
}

/// Recipe for palette scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub palette: Vec<[f32; 3]>,
    /// Inclusive range of shapes per scene.
    pub shapes: (usize, usize),
    pub kinds: Vec<ShapeKind>,
    pub backgrounds: Vec<Background>,
    /// Rectangle edges and disc centres land on multiples of this.
    pub snap: usize,
    /// Inclusive disc radius range in pixels.
    pub disc_radius: (usize, usize),
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 32,
            width: 32,
            palette: vec![
                [0.05, 0.05, 0.10],
                [0.95, 0.95, 0.90],
                [0.85, 0.20, 0.15],
                [0.15, 0.55, 0.25],
                [0.20, 0.30, 0.80],
                [0.95, 0.80, 0.20],
            ],
            shapes: (1, 4),
            kinds: vec![ShapeKind::Rectangle, ShapeKind::Rectangle, ShapeKind::Rectangle, ShapeKind::Disc],
            backgrounds: vec![Background::Flat, Background::Flat, Background::Flat, Background::VerticalGradient],
            snap: 4,
            disc_radius: (4, 5),
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("scene size must be positive"));
        }
        if self.palette.is_empty() || self.palette.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("palette must be non-empty with values in [0, 1]"));
        }
        if self.shapes.0 > self.shapes.1 || (self.shapes.1 > 0 && self.kinds.is_empty()) {
            return Err(Error::invalid("invalid shape count range or no shape kinds"));
        }
        if self.backgrounds.is_empty() || self.snap == 0 || self.disc_radius.0 > self.disc_radius.1 {
            return Err(Error::invalid("invalid background, snap or disc radius settings"));
        }
        Ok(())
    }
}

const PLACEMENT_RETRIES: usize = 64;

/// `n` scenes; scene `k` depends only on `(seed, k)`.
pub fn generate_scenes(spec: &SceneSpec, n: usize, seed: u64) -> Result<Vec<Image>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("scene count must be at least 1"));
    }
    (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), streams::SCENES);
            render_scene(spec, &mut rng)
        })
        .collect()
}

fn render_scene(spec: &SceneSpec, rng: &mut impl Rng) -> Result<Image> {
    let (h, w) = (spec.height, spec.width);
    let mut px = vec![[0f32; 3]; h * w];
    match *spec.backgrounds.choose(rng).expect("non-empty") {
        Background::Flat => {
            let c = *spec.palette.choose(rng).expect("non-empty");
            px.fill(c);
        }
        Background::VerticalGradient => {
            // steps through the palette between two entries, so no new colors
            let a = rng.gen_range(0..spec.palette.len()) as f64;
            let b = rng.gen_range(0..spec.palette.len()) as f64;
            let bands = h.div_ceil(spec.snap).max(2);
            for y in 0..h {
                let t = (y / spec.snap) as f64 / (bands - 1) as f64;
                let c = spec.palette[(a + (b - a) * t).round() as usize];
                px[y * w..(y + 1) * w].fill(c);
            }
        }
    }
    let count = rng.gen_range(spec.shapes.0..=spec.shapes.1);
    for _ in 0..count {
        let color = *spec.palette.choose(rng).expect("non-empty");
        match *spec.kinds.choose(rng).expect("non-empty") {
            ShapeKind::Rectangle => {
                let (gy, gx) = (h / spec.snap, w / spec.snap);
                if gy == 0 || gx == 0 {
                    return Err(Error::invalid("canvas smaller than one snap cell"));
                }
                let rh = rng.gen_range(1..=gy.div_ceil(2));
                let rw = rng.gen_range(1..=gx.div_ceil(2));
                let top = rng.gen_range(0..=gy - rh) * spec.snap;
                let left = rng.gen_range(0..=gx - rw) * spec.snap;
                for y in top..top + rh * spec.snap {
                    px[y * w + left..y * w + left + rw * spec.snap].fill(color);
                }
            }
            ShapeKind::Disc => {
                let mut placed = false;
                for _ in 0..PLACEMENT_RETRIES {
                    let r = rng.gen_range(spec.disc_radius.0..=spec.disc_radius.1);
                    let cy = rng.gen_range(0..=h / spec.snap) * spec.snap;
                    let cx = rng.gen_range(0..=w / spec.snap) * spec.snap;
                    // disc pixels: centres within r of the grid corner (cy, cx)
                    if cy < r || cx < r || cy + r > h || cx + r > w {
                        continue;
                    }
                    for y in cy - r..cy + r {
                        for x in cx - r..cx + r {
                            let (dy, dx) = (y as f64 + 0.5 - cy as f64, x as f64 + 0.5 - cx as f64);
                            if dy * dy + dx * dx <= (r * r) as f64 {
                                px[y * w + x] = color;
                            }
                        }
                    }
                    placed = true;
                    break;
                }
                if !placed {
                    return Err(Error::invalid(format!(
                        "could not place a disc inside a {h}x{w} canvas after {PLACEMENT_RETRIES} tries"
                    )));
                }
            }
        }
    }
    // Store as exact 8-bit levels so written files round-trip bit-exactly.
    let data = px
        .iter()
        .flat_map(|c| c.map(|v| (v * 255.0).round() / 255.0))
        .collect();
    Image::new(h, w, 3, data)
}

/// How a toy-language token follows from its north and west neighbours.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyRule {
    /// `t = north XOR west` (vocabulary must be a power of two).
    Xor,
    /// `t = (north + west) mod N`.
    Sum,
    /// With `q = sqrt(N)`: high base-`q` digit from north, low digit from
    /// west, `t = q*(north / q) + west % q` (vocabulary must be a square).
    HighLow,
}

impl ToyRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "xor" => Ok(ToyRule::Xor),
            "sum" => Ok(ToyRule::Sum),
            "highlow" => Ok(ToyRule::HighLow),
            other => Err(Error::invalid(format!(
                "unknown toy rule '{other}' (expected xor, sum or highlow)"
            ))),
        }
    }

    pub fn apply(self, north: usize, west: usize, vocab: usize) -> usize {
        match self {
            ToyRule::Xor => north ^ west,
            ToyRule::Sum => (north + west) % vocab,
            ToyRule::HighLow => {
                let q = vocab.isqrt();
                q * (north / q) + west % q
            }
        }
    }

    /// Value of `north` given the cell and `west`, when the rule determines it.
    fn solve_north(self, cell: usize, west: usize, vocab: usize) -> Option<usize> {
        match self {
            ToyRule::Xor => Some(cell ^ west),
            ToyRule::Sum => Some((cell + vocab - west) % vocab),
            ToyRule::HighLow => None,
        }
    }

    /// Value of `west` given the cell and `north`, when the rule determines it.
    fn solve_west(self, cell: usize, north: usize, vocab: usize) -> Option<usize> {
        match self {
            ToyRule::Xor | ToyRule::Sum => self.solve_north(cell, north, vocab),
            ToyRule::HighLow => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyLanguageSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub vocab: usize,
    pub rule: ToyRule,
    /// Per-token probability of a uniform replacement.
    pub noise: f32,
    /// HighLow only: draw one digit vector and use it for both the column
    /// (high) and row (low) digits, so `t(r, c) = q*d[c] + d[r]`.
    pub shared_digits: bool,
}

impl ToyLanguageSpec {
    pub fn new(grid_h: usize, grid_w: usize, vocab: usize, rule: ToyRule, noise: f32) -> Result<Self> {
        if grid_h < 2 || grid_w < 2 || vocab < 2 {
            return Err(Error::invalid("toy language needs at least a 2x2 grid and 2 tokens"));
        }
        if rule == ToyRule::Xor && !vocab.is_power_of_two() {
            return Err(Error::invalid(format!("xor rule needs a power-of-two vocabulary, got {vocab}")));
        }
        if rule == ToyRule::HighLow && vocab.isqrt().pow(2) != vocab {
            return Err(Error::invalid(format!("highlow rule needs a square vocabulary, got {vocab}")));
        }
        if !(0.0..1.0).contains(&noise) {
            return Err(Error::invalid(format!("noise rate {noise} outside [0, 1)")));
        }
        Ok(ToyLanguageSpec {
            grid_h,
            grid_w,
            vocab,
            rule,
            noise,
            shared_digits: false,
        })
    }

    /// Every digit then sits at four border cells instead of two, which
    /// makes a single corrupted border token easy to outvote.
    pub fn with_shared_digits(mut self) -> Result<Self> {
        if self.rule != ToyRule::HighLow || self.grid_h != self.grid_w || self.grid_h > self.vocab.isqrt() {
            return Err(Error::invalid("shared digits need the highlow rule on a square grid no wider than sqrt(N)"));
        }
        self.shared_digits = true;
        Ok(self)
    }

    pub fn rule_holds(&self, grid: &TokenGrid, row: usize, col: usize) -> bool {
        row == 0 || col == 0 || grid.get(row, col) == self.rule.apply(grid.get(row - 1, col), grid.get(row, col - 1), self.vocab)
    }

    /// Interior positions (row-major index) where the rule fails.
    pub fn violations(&self, grid: &TokenGrid) -> Vec<usize> {
        (1..grid.height())
            .flat_map(|r| (1..grid.width()).map(move |c| (r, c)))
            .filter(|&(r, c)| !self.rule_holds(grid, r, c))
            .map(|(r, c)| r * grid.width() + c)
            .collect()
    }

    /// The value at `p` uniquely implied by a single rule triple whose other
    /// two members lie outside `unknown`, if any. Triples are
    /// `(cell, north, west)` for every interior cell.
    pub fn forced_value(&self, grid: &TokenGrid, p: usize, unknown: &[bool]) -> Option<usize> {
        let w = grid.width();
        let (r, c) = (p / w, p % w);
        let known = |rr: usize, cc: usize| !unknown[rr * w + cc];
        let n = self.vocab;
        // p as the cell
        if r > 0 && c > 0 && known(r - 1, c) && known(r, c - 1) {
            return Some(self.rule.apply(grid.get(r - 1, c), grid.get(r, c - 1), n));
        }
        // p as the north of (r+1, c)
        if r + 1 < grid.height() && c > 0 && known(r + 1, c) && known(r + 1, c - 1) {
            if let Some(v) = self.rule.solve_north(grid.get(r + 1, c), grid.get(r + 1, c - 1), n) {
                return Some(v);
            }
        }
        // p as the west of (r, c+1)
        if r > 0 && c + 1 < w && known(r, c + 1) && known(r - 1, c + 1) {
            return self.rule.solve_west(grid.get(r, c + 1), grid.get(r - 1, c + 1), n);
        }
        None
    }
}

/// Clean grids plus their noised copies.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub clean: Vec<TokenGrid>,
    pub noisy: Vec<TokenGrid>,
}

/// Random first row and column, every other token fixed by the rule.
/// Under [`ToyRule::HighLow`] every token is `q*high[col] + low[row]`.
pub fn generate_toy_language(spec: &ToyLanguageSpec, n: usize, seed: u64) -> Result<ToyCorpus> {
    if n == 0 {
        return Err(Error::invalid("toy corpus size must be at least 1"));
    }
    let mut rng = stream_rng(seed, streams::TOY_LANGUAGE);
    let (h, w, v) = (spec.grid_h, spec.grid_w, spec.vocab);
    let mut clean = Vec::with_capacity(n);
    let mut noisy = Vec::with_capacity(n);
    for _ in 0..n {
        let mut t = vec![0usize; h * w];
        // HighLow seeds share the digits the rule would propagate anyway,
        // so no token of the grid is left unconstrained by its neighbours.
        let digits = (spec.rule == ToyRule::HighLow).then(|| {
            let q = v.isqrt();
            let high: Vec<usize> = (0..w).map(|_| rng.gen_range(0..q)).collect();
            let low: Vec<usize> = if spec.shared_digits { high.clone() } else { (0..h).map(|_| rng.gen_range(0..q)).collect() };
            (q, high, low)
        });
        for r in 0..h {
            for c in 0..w {
                t[r * w + c] = if r == 0 || c == 0 {
                    match &digits {
                        Some((q, high, low)) => q * high[c] + low[r],
                        None => rng.gen_range(0..v),
                    }
                } else {
                    spec.rule.apply(t[(r - 1) * w + c], t[r * w + c - 1], v)
                };
            }
        }
        let mut noised = t.clone();
        if spec.noise > 0.0 {
            for tok in &mut noised {
                if rng.gen::<f32>() < spec.noise {
                    *tok = rng.gen_range(0..v);
                }
            }
        }
        clean.push(TokenGrid::new(h, w, t)?);
        noisy.push(TokenGrid::new(h, w, noised)?);
    }
    Ok(ToyCorpus { clean, noisy })
}

/// Every `.pgm`/`.ppm`/`.pnm` file in `dir`, sorted by file name. Returns
/// `(file name, image)` pairs.
pub fn load_image_dir(dir: &Path, expected: Option<(usize, usize)>) -> Result<Vec<(String, Image)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::from(e).in_file(dir))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::from(e).in_file(dir))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm"));
        if is_image && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let image = read_image(&path)?;
            if let Some((h, w)) = expected {
                if (image.height(), image.width()) != (h, w) {
                    return Err(Error::invalid(format!(
                        "image is {}x{}, expected {h}x{w}",
                        image.height(),
                        image.width()
                    ))
                    .in_file(&path));
                }
            }
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, image))
        })
        .collect()
}

/// Seeded shuffle into `(train, val)` with `|train| = round(ratio * n)`.
pub fn split<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(Error::invalid(format!("cannot split {} items", items.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut stream_rng(seed, streams::SPLIT));
    let n_train = (ratio * items.len() as f64).round() as usize;
    let train = idx[..n_train].iter().map(|&i| items[i].clone()).collect();
    let val = idx[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, val))
}
