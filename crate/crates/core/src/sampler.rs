//! Token-resampling editors: likelihood-guided denoising, and the
//! inpainting / composition loop with periodic image collage.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::{dilate, downsample_mask, gaussian_soft_mask, random_order, spiral_order, LatentEditSet, PixelMask, SoftMask};
use crate::model::Model;
use crate::rng::{stream_rng, streams, SeededRng};
use crate::tokenizer::{PatchTokenizer, TokenGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ordering {
    Spiral,
    Random,
}

impl Ordering {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "spiral" => Ok(Ordering::Spiral),
            "random" => Ok(Ordering::Random),
            other => Err(Error::invalid(format!("unknown ordering '{other}' (expected spiral or random)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub epochs: usize,
    /// Collages per epoch, evenly spaced over the visit order.
    pub collages: usize,
    /// Clamped to the vocabulary size at use.
    pub top_k: usize,
    pub dilation: usize,
    /// Gaussian sigma (pixels) of the collage mask; 0 = hard mask.
    pub sigma: f64,
    pub ordering: Ordering,
    pub randomize_init: bool,
    pub re_randomize_second_epoch: bool,
    /// Blend the decoded result with the source once more at the end.
    pub final_collage: bool,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn inpainting() -> Self {
        SamplerConfig {
            epochs: 2,
            collages: 4,
            top_k: 100,
            dilation: 1,
            sigma: 1.0,
            ordering: Ordering::Spiral,
            randomize_init: true,
            re_randomize_second_epoch: true,
            final_collage: true,
            seed: 0,
        }
    }

    pub fn composition() -> Self {
        SamplerConfig {
            randomize_init: false,
            re_randomize_second_epoch: false,
            ..Self::inpainting()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("sampler needs at least one epoch"));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top-k must be at least 1"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be finite and non-negative, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// `q_i = p^i(s_i | s)`, clamped into the open interval `(0, 1)`.
pub fn token_likelihood_heatmap(model: &Model, s: &TokenGrid) -> Result<Vec<f64>> {
    let probs = model.probabilities(s.tokens())?;
    Ok(current_token_likelihoods(&probs, s.tokens(), model.config.vocab))
}

fn current_token_likelihoods(probs: &[f64], tokens: &[usize], vocab: usize) -> Vec<f64> {
    tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| probs[i * vocab + t].clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
        .collect()
}

/// Draw a position with probability proportional to `1 / q_i`.
pub fn select_suspicious_position(q: &[f64], rng: &mut impl Rng) -> Result<usize> {
    if q.is_empty() || q.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("position scores must be positive and finite"));
    }
    // normalize in log space so tiny q cannot overflow 1/q
    let logw: Vec<f64> = q.iter().map(|&v| -v.ln()).collect();
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|&l| (l - max).exp()).collect();
    let dist = WeightedIndex::new(&w).map_err(|e| Error::invalid(format!("position weights: {e}")))?;
    Ok(dist.sample(rng))
}

/// Keep the `k` most probable tokens (ties to the smaller index),
/// renormalize and sample.
pub fn top_k_multinomial(dist: &[f64], k: usize, rng: &mut impl Rng) -> Result<usize> {
    if k == 0 || dist.is_empty() {
        return Err(Error::invalid("top-k sampling needs k >= 1 and a non-empty distribution"));
    }
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    idx.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]));
    idx.truncate(k.min(dist.len()));
    if idx.len() == 1 {
        return Ok(idx[0]);
    }
    let weights: Vec<f64> = idx.iter().map(|&i| dist[i].max(0.0)).collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::invalid(format!("top-k weights: {e}")))?;
    Ok(idx[pick.sample(rng)])
}

/// `T` rounds of: score positions, pick an unlikely one, resample it.
pub fn denoise(model: &Model, s: &TokenGrid, steps: usize, top_k: usize, seed: u64) -> Result<TokenGrid> {
    let mut rng = stream_rng(seed, streams::SAMPLER);
    let mut s = s.clone();
    let vocab = model.config.vocab;
    for _ in 0..steps {
        let probs = model.probabilities(s.tokens())?;
        let q = current_token_likelihoods(&probs, s.tokens(), vocab);
        let p = select_suspicious_position(&q, &mut rng)?;
        let t = top_k_multinomial(&probs[p * vocab..(p + 1) * vocab], top_k, &mut rng)?;
        s.tokens_mut()[p] = t;
    }
    Ok(s)
}

/// State of one inpainting/composition run.
#[derive(Clone, Debug)]
pub struct EditSession {
    pub grid: TokenGrid,
    pub edit: LatentEditSet,
    pub source: Image,
    pub mask: PixelMask,
    pub soft: SoftMask,
    pub order: Vec<usize>,
    /// Position updates performed so far.
    pub step: usize,
    /// Collages performed so far.
    pub collages: usize,
}

impl EditSession {
    /// Encode `source`, derive the base and dilated edit sets and the visit
    /// order. No tokens are changed yet.
    pub fn new(tokenizer: &PatchTokenizer, source: &Image, mask: &PixelMask, cfg: &SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        if (source.height(), source.width()) != (mask.height(), mask.width()) {
            return Err(Error::invalid(format!(
                "mask is {}x{} but image is {}x{}",
                mask.height(),
                mask.width(),
                source.height(),
                source.width()
            )));
        }
        let grid = tokenizer.encode(source)?;
        let base = downsample_mask(mask, tokenizer.patch())?;
        let edit = dilate(&base, cfg.dilation);
        let order = match cfg.ordering {
            Ordering::Spiral => spiral_order(&edit)?,
            Ordering::Random => random_order(&edit, cfg.seed)?,
        };
        Ok(EditSession {
            grid,
            edit,
            source: source.clone(),
            mask: mask.clone(),
            soft: gaussian_soft_mask(mask, cfg.sigma)?,
            order,
            step: 0,
            collages: 0,
        })
    }

    /// Current decode with the source pasted back under the soft mask.
    pub fn blended(&self, tokenizer: &PatchTokenizer) -> Result<Image> {
        blend(&self.source, &tokenizer.decode(&self.grid)?, &self.soft)
    }
}

/// `soft * source + (1 - soft) * generated`, per pixel.
pub fn blend(source: &Image, generated: &Image, soft: &SoftMask) -> Result<Image> {
    if !source.same_shape(generated) || (soft.height(), soft.width()) != (source.height(), source.width()) {
        return Err(Error::invalid("blend: image and mask shapes differ"));
    }
    let c = source.channels();
    let data = source
        .data()
        .iter()
        .zip(generated.data())
        .enumerate()
        .map(|(i, (&s, &g))| {
            let m = soft.values()[i / c];
            m * s + (1.0 - m) * g
        })
        .collect();
    Image::new(source.height(), source.width(), c, data)
}

/// Decode, paste the source back under the soft mask, re-encode.
pub fn collage_reencode(session: &mut EditSession, tokenizer: &PatchTokenizer) -> Result<()> {
    let image = session.blended(tokenizer)?;
    session.grid = tokenizer.encode(&image)?;
    session.collages += 1;
    Ok(())
}

/// Result of an inpainting/composition run.
#[derive(Clone, Debug)]
pub struct EditOutcome {
    pub image: Image,
    /// Token grid after the last position update (before the final collage).
    pub grid: TokenGrid,
    /// Every position visited, in visit order, across epochs.
    pub visited: Vec<usize>,
    pub collages: usize,
}

/// Number of collages due right after the `j`-th (1-based) of `n` updates
/// when `c` are spread evenly over an epoch.
pub fn collages_due(j: usize, n: usize, c: usize) -> usize {
    (j * c) / n - ((j - 1) * c) / n
}

/// Resample every dilated position `cfg.epochs` times with periodic
/// collages; the shared loop behind [`inpaint`] and [`composite`].
pub fn run_edit(model: &Model, tokenizer: &PatchTokenizer, image: &Image, mask: &PixelMask, cfg: &SamplerConfig) -> Result<EditOutcome> {
    if tokenizer.vocab() != model.config.vocab {
        return Err(Error::invalid(format!(
            "tokenizer has {} tokens but model vocabulary is {}",
            tokenizer.vocab(),
            model.config.vocab
        )));
    }
    let mut session = EditSession::new(tokenizer, image, mask, cfg)?;
    if session.grid.len() != model.config.seq_len {
        return Err(Error::invalid(format!(
            "image encodes to {} tokens but the model expects {}",
            session.grid.len(),
            model.config.seq_len
        )));
    }
    let vocab = model.config.vocab;
    let mut rng: SeededRng = stream_rng(cfg.seed, streams::SAMPLER);
    if cfg.randomize_init {
        for p in session.edit.base_positions() {
            session.grid.tokens_mut()[p] = rng.gen_range(0..vocab);
        }
    }
    let order = session.order.clone();
    let n = order.len();
    let mut visited = Vec::with_capacity(n * cfg.epochs);
    for epoch in 0..cfg.epochs {
        for (j, &p) in order.iter().enumerate() {
            if epoch >= 1 && cfg.re_randomize_second_epoch {
                session.grid.tokens_mut()[p] = rng.gen_range(0..vocab);
            }
            let dist = model.conditional_distribution(session.grid.tokens(), p)?;
            session.grid.tokens_mut()[p] = top_k_multinomial(&dist, cfg.top_k, &mut rng)?;
            session.step += 1;
            visited.push(p);
            for _ in 0..collages_due(j + 1, n, cfg.collages) {
                collage_reencode(&mut session, tokenizer)?;
            }
        }
    }
    let image = if cfg.final_collage {
        session.blended(tokenizer)?
    } else {
        tokenizer.decode(&session.grid)?
    };
    Ok(EditOutcome {
        image,
        grid: session.grid,
        visited,
        collages: session.collages,
    })
}

/// Fill the edit region (`mask == 0`) of `masked` with sampled content.
pub fn inpaint(model: &Model, tokenizer: &PatchTokenizer, masked: &Image, mask: &PixelMask, cfg: &SamplerConfig) -> Result<EditOutcome> {
    mask.check_not_degenerate()?;
    if !cfg.randomize_init {
        return Err(Error::invalid("inpainting requires randomize_init"));
    }
    run_edit(model, tokenizer, masked, mask, cfg)
}

/// Harmonize a user-edited image inside the edit region without erasing
/// the edit first. An all-preserved mask returns the input unchanged.
pub fn composite(model: &Model, tokenizer: &PatchTokenizer, edited: &Image, mask: &PixelMask, cfg: &SamplerConfig) -> Result<EditOutcome> {
    if mask.edit_count() == 0 {
        if (edited.height(), edited.width()) != (mask.height(), mask.width()) {
            return Err(Error::invalid("mask and image sizes differ"));
        }
        let grid = tokenizer.encode(edited)?;
        return Ok(EditOutcome {
            image: edited.clone(),
            grid,
            visited: Vec::new(),
            collages: 0,
        });
    }
    mask.check_not_degenerate()?;
    let cfg = SamplerConfig {
        randomize_init: false,
        re_randomize_second_epoch: false,
        ..*cfg
    };
    run_edit(model, tokenizer, edited, mask, &cfg)
}

/// `source * m + target * (1 - m)`: paste the edit region of `target` into
/// `source`.
pub fn paste(source: &Image, target: &Image, mask: &PixelMask) -> Result<Image> {
    let hard = gaussian_soft_mask(mask, 0.0)?;
    blend(source, target, &hard)
}

/// Grayscale rendering of `-ln q`, scaled to the largest value and
/// upsampled by `scale`; darker = more likely.
pub fn heatmap_image(q: &[f64], grid_h: usize, grid_w: usize, scale: usize) -> Result<Image> {
    if q.len() != grid_h * grid_w || scale == 0 {
        return Err(Error::shape("heatmap", &[grid_h, grid_w], &[q.len()]));
    }
    let nll: Vec<f64> = q.iter().map(|&v| -v.ln()).collect();
    let max = nll.iter().cloned().fold(0.0, f64::max);
    let (h, w) = (grid_h * scale, grid_w * scale);
    let data = (0..h * w)
        .map(|i| {
            let v = nll[(i / w / scale) * grid_w + (i % w) / scale];
            if max > 0.0 { (v / max) as f32 } else { 0.0 }
        })
        .collect();
    Image::new(h, w, 1, data)
}

/// The inpainting ablations: full method, without initial randomization,
/// without collage, and random instead of spiral order.
pub fn ablation_configs(base: &SamplerConfig) -> Vec<(&'static str, SamplerConfig)> {
    vec![
        ("full", *base),
        (
            "no_randomization",
            SamplerConfig {
                randomize_init: false,
                re_randomize_second_epoch: false,
                ..*base
            },
        ),
        (
            "no_collage",
            SamplerConfig {
                collages: 0,
                final_collage: false,
                ..*base
            },
        ),
        (
            "random_order",
            SamplerConfig {
                ordering: Ordering::Random,
                ..*base
            },
        ),
    ]
}

/// Like [`inpaint`] but without the randomization precondition, for the
/// "no randomization" ablation.
pub fn inpaint_ablation(model: &Model, tokenizer: &PatchTokenizer, masked: &Image, mask: &PixelMask, cfg: &SamplerConfig) -> Result<EditOutcome> {
    mask.check_not_degenerate()?;
    run_edit(model, tokenizer, masked, mask, cfg)
}
