//! Fraction of scene pixels reproduced exactly by a k-means patch tokenizer.
use edibert::data::{generate_scenes, SceneSpec};
use edibert::tokenizer::{learn_codebook, PatchTokenizer};

fn main() -> edibert::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map_or(1000, |s| s.parse().unwrap());
    let iters: usize = args.get(2).map_or(20, |s| s.parse().unwrap());
    let t = std::time::Instant::now();
    let mut spec = SceneSpec::default();
    if let Some(r) = args.get(3) {
        let hi: usize = r.parse().unwrap();
        spec.disc_radius = (spec.disc_radius.0, hi);
    }
    let images = generate_scenes(&spec, n, 0)?;
    let tok = PatchTokenizer::new(learn_codebook(&images, 64, 4, iters, 0)?, 4)?;
    let (mut same, mut total) = (0usize, 0usize);
    for im in &images {
        let rec = tok.decode(&tok.encode(im)?)?;
        for (a, b) in im.to_bytes().chunks(3).zip(rec.to_bytes().chunks(3)) {
            total += 1;
            same += (a == b) as usize;
        }
    }
    println!("exact pixels {:.4} ({same}/{total}) in {:.1}s", same as f64 / total as f64, t.elapsed().as_secs_f64());
    Ok(())
}
