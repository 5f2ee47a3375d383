//! `edibert` — data generation, tokenizer and model training, editing and
//! evaluation from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
//! failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use edibert::data::{generate_scenes, load_image_dir, SceneSpec};
use edibert::image::{read_image, write_image, Image};
use edibert::mask::PixelMask;
use edibert::metrics::{extract_features, masked_l1, FeatureMode, MetricReport, Provenance};
use edibert::model::{Model, ModelConfig, TrainConfig, Trainer};
use edibert::optim::AdamConfig;
use edibert::sampler::{self, Ordering, SamplerConfig};
use edibert::tokenizer::{build_sequence_dataset, kmeans_codebook, Codebook, PatchTokenizer};

#[derive(Parser, Debug)]
#[command(name = "edibert", version, about = "Masked-token image editing on a patch tokenizer", args_override_self = true)]
struct Cli {
    /// `key = value` file; keys are long flag names, flags given on the
    /// command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic scene corpus as PPM files.
    GenData(GenData),
    /// Learn a k-means patch codebook.
    TrainTokenizer(TrainTokenizer),
    /// Train the masked-token transformer on a tokenized image directory.
    TrainModel(TrainModel),
    /// Quantize and decode an image through the codebook.
    Reconstruct(Reconstruct),
    /// Resample unlikely tokens; also writes a likelihood heatmap.
    Denoise(Denoise),
    /// Fill the edit region (mask = 0) of an image.
    Inpaint(Inpaint),
    /// Harmonize a pasted or scribbled edit.
    Composite(Composite),
    /// Masked L1, Fréchet distance, density and coverage.
    Evaluate(Evaluate),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainTokenizer {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 4)]
    patch: usize,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TokenizerArgs {
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long, default_value_t = 4)]
    patch: usize,
}

impl TokenizerArgs {
    fn load(&self) -> Result<PatchTokenizer, CliError> {
        Ok(PatchTokenizer::new(Codebook::load(&self.codebook)?, self.patch)?)
    }
}

#[derive(Args, Debug)]
struct TrainModel {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    tokenizer: TokenizerArgs,
    #[arg(long)]
    out: PathBuf,
    /// Loss log, one `step,loss` line per step.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    warmup: usize,
    /// Cosine-decay the learning rate to zero over the run.
    #[arg(long)]
    cosine: bool,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    ff_mult: usize,
    #[arg(long, default_value_t = 0.9)]
    p_rand: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct Reconstruct {
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    tokenizer: TokenizerArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Denoise {
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    tokenizer: TokenizerArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Heatmap of the input's token likelihoods (brighter = less likely).
    #[arg(long)]
    heatmap: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 100)]
    top_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SamplerArgs {
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    collages: usize,
    #[arg(long, default_value_t = 100)]
    top_k: usize,
    #[arg(long, default_value_t = 1)]
    dilation: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// spiral | random
    #[arg(long, default_value = "spiral")]
    order: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SamplerArgs {
    fn config(&self, base: SamplerConfig) -> Result<SamplerConfig, CliError> {
        let ordering = Ordering::parse(&self.order).map_err(|e| CliError::Usage(e.to_string()))?;
        let cfg = SamplerConfig {
            epochs: self.epochs,
            collages: self.collages,
            top_k: self.top_k,
            dilation: self.dilation,
            sigma: self.sigma,
            ordering,
            seed: self.seed,
            ..base
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct Inpaint {
    #[arg(long)]
    image: PathBuf,
    /// PGM, 255 = keep, 0 = edit.
    #[arg(long)]
    mask: PathBuf,
    #[command(flatten)]
    tokenizer: TokenizerArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Args, Debug)]
struct Composite {
    /// Image supplying the preserved region.
    #[arg(long, requires = "target", conflicts_with = "edited")]
    source: Option<PathBuf>,
    /// Image supplying the edit region.
    #[arg(long, requires = "source")]
    target: Option<PathBuf>,
    /// An already edited image.
    #[arg(long, required_unless_present = "source")]
    edited: Option<PathBuf>,
    #[arg(long)]
    mask: PathBuf,
    #[command(flatten)]
    tokenizer: TokenizerArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Args, Debug)]
struct Evaluate {
    #[arg(long)]
    real_dir: PathBuf,
    #[arg(long)]
    fake_dir: PathBuf,
    /// Source images, paired with the fakes in sorted filename order.
    #[arg(long, requires = "masks")]
    sources: Option<PathBuf>,
    /// Masks, paired with the fakes in sorted filename order.
    #[arg(long, requires = "sources")]
    masks: Option<PathBuf>,
    /// randproj | latent
    #[arg(long, default_value = "randproj")]
    feature_mode: String,
    /// Needed for the latent feature mode.
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    patch: usize,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(edibert::Error),
}

impl From<edibert::Error> for CliError {
    fn from(e: edibert::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(edibert::Error::NonFinite(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

const SUBCOMMANDS: [&str; 8] = [
    "gen-data",
    "train-tokenizer",
    "train-model",
    "reconstruct",
    "denoise",
    "inpaint",
    "composite",
    "evaluate",
];

/// Splice `key = value` lines from `--config` in right after the
/// subcommand, so later command-line flags override them.
fn expand_config(args: Vec<String>) -> Result<Vec<String>, CliError> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        if a == "--config" {
            path = args.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(args) };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("cannot read config {path}: {e}")))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("{path}:{}: expected `key = value`", n + 1)));
        };
        let (key, value) = (key.trim(), value.trim());
        if key == "config" || key.is_empty() {
            return Err(CliError::Usage(format!("{path}:{}: invalid key '{key}'", n + 1)));
        }
        // switches: `key = true` sets the flag, `key = false` leaves it off
        match value {
            "true" => extra.push(format!("--{key}")),
            "false" => {}
            _ => {
                extra.push(format!("--{key}"));
                extra.push(value.to_string());
            }
        }
    }
    let Some(at) = args.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(args);
    };
    let mut out = args[..=at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[at + 1..]);
    Ok(out)
}

fn parse() -> Result<Cli, ExitCode> {
    let args = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return Err(ExitCode::from(e.exit_code()));
        }
    };
    let matches = Cli::command().try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m));
    matches.map_err(|e| {
        if !e.use_stderr() {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        let text = e.render().to_string();
        eprintln!("{}", text.lines().next().unwrap_or("error: invalid usage"));
        ExitCode::from(1)
    })
}

fn main() -> ExitCode {
    let cli = match parse() {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        // only fails if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            eprintln!("error: {}", msg.lines().next().unwrap_or(""));
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::TrainTokenizer(a) => train_tokenizer(a),
        Command::TrainModel(a) => train_model(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Denoise(a) => denoise(a),
        Command::Inpaint(a) => inpaint(a),
        Command::Composite(a) => composite(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("no such file: {}", path.display())))
    }
}

fn require_dir(path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("no such directory: {}", path.display())))
    }
}

fn gen_data(a: GenData) -> Result<(), CliError> {
    let spec = SceneSpec {
        height: a.height,
        width: a.width,
        ..SceneSpec::default()
    };
    let images = generate_scenes(&spec, a.count, a.seed)?;
    fs::create_dir_all(&a.out)?;
    for (i, img) in images.iter().enumerate() {
        write_image(&a.out.join(format!("scene_{i:05}.ppm")), img)?;
    }
    println!("wrote {} scenes to {}", images.len(), a.out.display());
    Ok(())
}

fn load_images(dir: &Path) -> Result<Vec<(String, Image)>, CliError> {
    require_dir(dir)?;
    let images = load_image_dir(dir, None)?;
    if images.is_empty() {
        return Err(CliError::Core(edibert::Error::Format(format!("no PGM/PPM images in {}", dir.display()))));
    }
    Ok(images)
}

fn train_tokenizer(a: TrainTokenizer) -> Result<(), CliError> {
    let images: Vec<Image> = load_images(&a.data)?.into_iter().map(|(_, im)| im).collect();
    let report = kmeans_codebook(&images, a.vocab, a.patch, a.iters, a.seed)?;
    report.codebook.save(&a.out)?;
    if let Some(mse) = report.mse_history.last() {
        println!("codebook: {} words, final k-means mse {mse:.6}", report.codebook.len());
    }
    Ok(())
}

fn train_model(a: TrainModel) -> Result<(), CliError> {
    require_file(&a.tokenizer.codebook)?;
    let tok = a.tokenizer.load()?;
    let (ids, images): (Vec<String>, Vec<Image>) = load_images(&a.data)?.into_iter().unzip();
    let data = build_sequence_dataset(&images, &ids, "train", &tok)?;
    let (gh, gw) = data.grid_shape().expect("dataset is non-empty");
    let config = ModelConfig {
        vocab: tok.vocab(),
        seq_len: gh * gw,
        grid_h: gh,
        grid_w: gw,
        layers: a.layers,
        width: a.width,
        heads: a.heads,
        ff_mult: a.ff_mult,
        p_rand: a.p_rand,
        seed: a.seed,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let train = TrainConfig {
        steps: a.steps,
        batch_size: a.batch,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        warmup: a.warmup,
        cosine_decay: a.cosine,
        seed: a.seed,
    };
    let mut trainer = Trainer::new(Model::new(config)?, train);
    let mut log = String::new();
    trainer.run(&data.grids, |step, loss| log.push_str(&format!("{},{loss:.6}\n", step + 1)))?;
    trainer.model.save(&a.out)?;
    if let Some(path) = &a.log {
        fs::File::create(path)?.write_all(log.as_bytes())?;
    }
    let last = log.lines().last().unwrap_or("");
    println!("trained {} steps; last step,loss = {last}", a.steps);
    Ok(())
}

fn reconstruct(a: Reconstruct) -> Result<(), CliError> {
    require_file(&a.image)?;
    let tok = a.tokenizer.load()?;
    let img = read_image(&a.image)?;
    let rec = tok.decode(&tok.encode(&img)?)?;
    write_image(&a.out, &rec)?;
    let c = img.channels();
    let same = img
        .to_bytes()
        .chunks(c)
        .zip(rec.to_bytes().chunks(c))
        .filter(|(x, y)| x == y)
        .count();
    println!("exact pixels = {:.6}", same as f64 / (img.height() * img.width()) as f64);
    Ok(())
}

fn load_model(path: &Path, tok: &PatchTokenizer) -> Result<Model, CliError> {
    require_file(path)?;
    let model = Model::load(path)?;
    if model.config.vocab != tok.vocab() {
        return Err(CliError::Core(edibert::Error::Format(format!(
            "checkpoint vocabulary {} does not match codebook size {}",
            model.config.vocab,
            tok.vocab()
        ))));
    }
    Ok(model)
}

fn denoise(a: Denoise) -> Result<(), CliError> {
    require_file(&a.image)?;
    if a.top_k == 0 {
        return Err(CliError::Usage("--top-k must be at least 1".into()));
    }
    let tok = a.tokenizer.load()?;
    let model = load_model(&a.checkpoint, &tok)?;
    let img = read_image(&a.image)?;
    let grid = tok.encode(&img)?;
    if let Some(path) = &a.heatmap {
        let q = sampler::token_likelihood_heatmap(&model, &grid)?;
        write_image(path, &sampler::heatmap_image(&q, grid.height(), grid.width(), tok.patch())?)?;
    }
    let out = sampler::denoise(&model, &grid, a.steps, a.top_k, a.seed)?;
    write_image(&a.out, &tok.decode(&out)?)?;
    println!("changed {} of {} tokens", out.hamming(&grid), grid.len());
    Ok(())
}

fn inpaint(a: Inpaint) -> Result<(), CliError> {
    require_file(&a.image)?;
    require_file(&a.mask)?;
    let cfg = a.sampler.config(SamplerConfig::inpainting())?;
    let tok = a.tokenizer.load()?;
    let model = load_model(&a.checkpoint, &tok)?;
    let img = read_image(&a.image)?;
    let mask = PixelMask::load(&a.mask)?;
    mask.check_not_degenerate()?;
    // the edit region carries no information: i_m = i ⊙ m
    let blank = Image::filled(img.height(), img.width(), img.channels(), 0.0)?;
    let masked = sampler::paste(&img, &blank, &mask)?;
    let out = sampler::inpaint(&model, &tok, &masked, &mask, &cfg)?;
    write_image(&a.out, &out.image)?;
    println!("resampled {} positions with {} collages", out.visited.len(), out.collages);
    Ok(())
}

fn composite(a: Composite) -> Result<(), CliError> {
    require_file(&a.mask)?;
    let cfg = a.sampler.config(SamplerConfig::composition())?;
    let tok = a.tokenizer.load()?;
    let model = load_model(&a.checkpoint, &tok)?;
    let mask = PixelMask::load(&a.mask)?;
    let edited = match (&a.source, &a.target, &a.edited) {
        (Some(s), Some(t), None) => {
            require_file(s)?;
            require_file(t)?;
            sampler::paste(&read_image(s)?, &read_image(t)?, &mask)?
        }
        (None, None, Some(e)) => {
            require_file(e)?;
            read_image(e)?
        }
        _ => return Err(CliError::Usage("give either --source and --target, or --edited".into())),
    };
    let out = sampler::composite(&model, &tok, &edited, &mask, &cfg)?;
    write_image(&a.out, &out.image)?;
    println!("resampled {} positions with {} collages", out.visited.len(), out.collages);
    Ok(())
}

fn evaluate(a: Evaluate) -> Result<(), CliError> {
    let real: Vec<Image> = load_images(&a.real_dir)?.into_iter().map(|(_, im)| im).collect();
    let fake: Vec<Image> = load_images(&a.fake_dir)?.into_iter().map(|(_, im)| im).collect();
    let tok = match (&a.feature_mode[..], &a.codebook) {
        ("latent", Some(cb)) => {
            require_file(cb)?;
            Some(PatchTokenizer::new(Codebook::load(cb)?, a.patch)?)
        }
        ("latent", None) => return Err(CliError::Usage("--feature-mode latent needs --codebook".into())),
        ("randproj", _) => None,
        (other, _) => return Err(CliError::Usage(format!("unknown feature mode '{other}' (expected randproj or latent)"))),
    };
    let mode = match &tok {
        Some(t) => FeatureMode::Latent(t),
        None => FeatureMode::RandProj { seed: a.seed },
    };
    let l1 = match (&a.sources, &a.masks) {
        (Some(src), Some(masks)) => {
            let sources = load_images(src)?;
            require_dir(masks)?;
            let mut mask_files: Vec<PathBuf> = fs::read_dir(masks)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            mask_files.retain(|p| p.extension().is_some_and(|x| x == "pgm"));
            mask_files.sort();
            if sources.len() != fake.len() || mask_files.len() != fake.len() {
                return Err(CliError::Core(edibert::Error::Format(format!(
                    "{} generated images but {} sources and {} masks",
                    fake.len(),
                    sources.len(),
                    mask_files.len()
                ))));
            }
            let mut total = 0.0;
            for ((g, (_, s)), m) in fake.iter().zip(&sources).zip(&mask_files) {
                total += masked_l1(g, s, &PixelMask::load(m)?)?;
            }
            Some(total / fake.len() as f64)
        }
        _ => None,
    };
    let real_f = extract_features(&real, mode, Provenance::Real)?;
    let fake_f = extract_features(&fake, mode, Provenance::Generated)?;
    let report = MetricReport::compute(&real_f, &fake_f, a.k, mode.label(), l1)?;
    fs::write(&a.out, report.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}
