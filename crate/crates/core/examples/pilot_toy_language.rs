//! Train the toy-config model on the noise-free token language and report
//! held-out loss, accuracy on rule-forced positions, and the denoising and
//! hole-filling success rates of the trained model.
//!
//! cargo run --release -p edibert --example pilot_toy_language -- [steps] [batch] [lr] [ff_mult] [rule] [warmup]
//! Set SAVE=path to keep the trained checkpoint, COSINE=1 for cosine decay,
//! NOISE=rate to train on the noised corpus, SHARED=1 for shared HighLow digits,
//! LOAD=path to only evaluate a saved checkpoint.

use std::time::Instant;

use edibert::data::{generate_toy_language, ToyLanguageSpec, ToyRule};
use edibert::image::Image;
use edibert::mask::{sample_training_rectangle, PixelMask};
use edibert::model::{held_out_loss, perturb, Model, ModelConfig, TrainConfig, Trainer};
use edibert::optim::AdamConfig;
use edibert::rng::{stream_rng, streams};
use edibert::sampler::{denoise, inpaint, paste, SamplerConfig};
use edibert::tokenizer::{Codebook, PatchTokenizer, TokenGrid};
use rand::seq::index::sample;
use rand::Rng;

fn main() -> edibert::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let steps: usize = arg(1, "2000").parse().unwrap();
    let batch: usize = arg(2, "32").parse().unwrap();
    let lr: f32 = arg(3, "1e-3").parse().unwrap();
    let ff: usize = arg(4, "2").parse().unwrap();
    let rule = ToyRule::parse(&arg(5, "highlow"))?;
    let warmup: usize = arg(6, "0").parse().unwrap();

    let noise: f32 = std::env::var("NOISE").map(|v| v.parse().unwrap()).unwrap_or(0.0);
    let shared = std::env::var("SHARED").is_ok();
    let make = |noise| {
        let s = ToyLanguageSpec::new(8, 8, 64, rule, noise)?;
        if shared { s.with_shared_digits() } else { Ok(s) }
    };
    let spec = make(0.0)?;
    let train = if noise > 0.0 {
        generate_toy_language(&make(noise)?, 4000, 1)?.noisy
    } else {
        generate_toy_language(&spec, 4000, 1)?.clean
    };
    let held = generate_toy_language(&spec, 200, 2)?.clean;
    if let Ok(path) = std::env::var("LOAD") {
        let model = Model::load(std::path::Path::new(&path))?;
        println!("{path}: held-out loss={:.4}", held_out_loss(&model, &held, 0)?);
        return sampler_checks(&model, &held);
    }
    let cfg = ModelConfig { ff_mult: ff, ..ModelConfig::toy(64) };
    let model = Model::new(cfg)?;
    println!("params={} steps={steps} batch={batch} lr={lr} ff_mult={ff} rule={rule:?}", model.params.count());
    println!("fresh held-out loss={:.4} ln N={:.4}", held_out_loss(&model, &held, 0)?, (64f64).ln());

    let mut trainer = Trainer::new(model, TrainConfig {
        steps,
        batch_size: batch,
        adam: AdamConfig { lr, beta2: std::env::var("BETA2").map(|v| v.parse().unwrap()).unwrap_or(0.999), ..AdamConfig::default() },
        warmup,
        cosine_decay: std::env::var("COSINE").is_ok(),
        seed: 0,
    });
    let start = Instant::now();
    let mut window = 0.0;
    for step in 0..steps {
        window += trainer.step(&train)? as f64;
        if (step + 1) % 100 == 0 {
            println!("step {:5} mean loss {:.4} elapsed {:.1}s", step + 1, window / 100.0, start.elapsed().as_secs_f64());
            window = 0.0;
        }
        // intermediate checkpoints, for comparing training lengths
        if (step + 1) % 2000 == 0 && step + 1 < steps {
            if let Ok(path) = std::env::var("SAVE") {
                trainer.model.save(std::path::Path::new(&format!("{path}.{}", step + 1)))?;
            }
        }
    }
    let model = trainer.model;
    if let Ok(path) = std::env::var("SAVE") {
        model.save(std::path::Path::new(&path))?;
    }
    println!("held-out loss={:.4} (bar {:.4})", held_out_loss(&model, &held, 0)?, 0.2 * (64f64).ln());

    // top-1 accuracy on rule-forced positions of a perturbed rectangle
    let mut rng = stream_rng(3, streams::EVAL);
    let (mut hit, mut total) = (0, 0);
    for g in &held {
        let rect = sample_training_rectangle(8, 8, &mut rng)?;
        let phi = rect.positions(8);
        let p = perturb(g.tokens(), &phi, cfg.p_rand, 64, &mut rng);
        let unknown: Vec<bool> = (0..64).map(|i| phi.contains(&i)).collect();
        let probs = model.probabilities(&p.tokens)?;
        for &i in &phi {
            if spec.forced_value(g, i, &unknown).is_none() {
                continue;
            }
            let row = &probs[i * 64..(i + 1) * 64];
            let arg = (0..64).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            total += 1;
            if arg == g.tokens()[i] {
                hit += 1;
            }
        }
    }
    println!("rule-forced accuracy={:.4} over {total} positions", hit as f64 / total as f64);
    sampler_checks(&model, &held)
}

/// Denoising (5 corrupted tokens, T=20, top-k 64, 100 trials) and 2x2-hole
/// inpainting (50 seeds) on held-out grids.
fn sampler_checks(model: &Model, held: &[TokenGrid]) -> edibert::Result<()> {
    let (mut dec, mut rec) = (0, 0);
    for trial in 0..100u64 {
        let clean = &held[trial as usize];
        let mut rng = stream_rng(1000 + trial, streams::EVAL);
        let mut g = clean.clone();
        let pos = sample(&mut rng, 64, 5).into_vec();
        for &p in &pos {
            let old = g.tokens()[p];
            let v = rng.gen_range(0..63);
            g.tokens_mut()[p] = if v >= old { v + 1 } else { v };
        }
        let out = denoise(model, &g, 20, 64, trial)?;
        dec += (out.hamming(clean) < g.hamming(clean)) as usize;
        rec += pos.iter().filter(|&&p| out.tokens()[p] == clean.tokens()[p]).count();
    }
    println!("denoise: decreased {dec}/100, recovered {rec}/500");

    // 64 distinct grey 4x4 codewords, so decoded grids encode back exactly
    let mut rng = stream_rng(7, streams::EVAL);
    let vecs: Vec<f32> = (0..64 * 16).map(|_| rng.gen_range(0..=255u32) as f32 / 255.0).collect();
    let tok = PatchTokenizer::new(Codebook::new(16, vecs)?, 4)?;
    let (mut hit, mut tot) = (0, 0);
    for seed in 0..50u64 {
        let clean = &held[100 + seed as usize];
        let mut r = stream_rng(2000 + seed, streams::EVAL);
        let (hr, hc) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let mask = PixelMask::with_edit_rect(32, 32, hr * 4, hc * 4, 8, 8)?;
        let masked = paste(&tok.decode(clean)?, &Image::filled(32, 32, 1, 0.0)?, &mask)?;
        let out = inpaint(model, &tok, &masked, &mask, &SamplerConfig { seed, ..SamplerConfig::inpainting() })?;
        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let p = (hr + dr) * 8 + hc + dc;
            tot += 1;
            hit += (out.grid.tokens()[p] == clean.tokens()[p]) as usize;
        }
    }
    println!("inpaint 2x2 hole: {hit}/{tot} tokens");
    Ok(())
}
