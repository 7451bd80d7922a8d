use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fsn_core::attention::{AttentionOverride, ScoreMaps, HARD};
use fsn_core::data::{self, Combo, Split};
use fsn_core::denoiser::checkpoint::{self, CheckpointMeta};
use fsn_core::denoiser::{AttentionEvent, AttentionProbe, Denoiser};
use fsn_core::diffusion::{self, Method, SamplerConfig};
use fsn_core::layout::{self, expand_layout, LabelMap};
use fsn_core::netpbm::{self, Kind, Raster};
use fsn_core::pipeline::{self, Conditioner, Request, RunConfig, Stage, TrainConfig};
use fsn_core::textcond::{self, Binding, Prompt, Vocabulary};

#[derive(Parser)]
#[command(name = "fsn", version, about = "Layout- and text-conditioned toy diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shapes dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated "color shape" combos removed from fine-tuning.
        #[arg(long, default_value = "")]
        holdout: String,
    },
    /// Train from scratch on captions with plain cross-attention.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tune a pretrained checkpoint on layouts with rectified attention.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
    },
    /// Generate one image.
    Sample(SampleArgs),
    /// Generate one image per test record and report mIoU.
    Eval {
        #[arg(long, required_unless_present = "ground_truth")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Segment the dataset's own images instead of generating.
        #[arg(long)]
        ground_truth: bool,
        #[arg(long, default_value = "test")]
        split: String,
        /// Evaluate only the first N records.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Dump the rectified attention maps of one layer at one sampling step.
    InspectAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "")]
        text: String,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Index into the sampling timesteps.
        #[arg(long, default_value_t = 0)]
        step: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
}

#[derive(Args)]
struct SamplingArgs {
    /// Run config supplying the vocabulary and sampler defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Rectification strength; "inf" for hard masking.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// ddpm, ddim or plms.
    #[arg(long)]
    method: Option<Method>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Label map (PGM). Without it the prompt is plain text.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value = "")]
    text: String,
    /// Comma-separated "word=class" pairs binding extra words to regions.
    #[arg(long, default_value = "")]
    bind: String,
    /// Attention overrides, e.g. "swap:1,3|share:2,5".
    #[arg(long, default_value = "")]
    r#override: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sampling: SamplingArgs,
}

/// Failure category, mapped onto the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Failure {
    Usage = 1,
    Io = 2,
    Divergence = 3,
}

fn classify(err: &anyhow::Error) -> Failure {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<fsn_core::Error>() {
            return match e {
                e if e.is_divergence() => Failure::Divergence,
                fsn_core::Error::Io { .. } | fsn_core::Error::Format(_) => Failure::Io,
                _ => Failure::Usage,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return Failure::Io;
        }
    }
    Failure::Usage
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Failure::Usage as u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e) as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { out, n, seed, holdout } => gen_data(&out, n, seed, &holdout),
        Command::Pretrain { config } => train(&config, Stage::Pretrain, None),
        Command::Finetune { config, init } => train(&config, Stage::Finetune, Some(&init)),
        Command::Sample(args) => sample(args),
        Command::Eval { checkpoint, manifest, out, ground_truth, split, limit, batch, sampling } => {
            eval(checkpoint.as_deref(), &manifest, &out, ground_truth, &split, limit, batch, &sampling)
        }
        Command::InspectAttn { checkpoint, labels, text, layer, step, out, sampling } => {
            inspect_attn(&checkpoint, &labels, &text, layer, step, &out, &sampling)
        }
    }
}

fn gen_data(out: &Path, n: usize, seed: u64, holdout: &str) -> Result<()> {
    let held = Combo::parse_list(holdout)?;
    let manifest = data::generate_dataset(out, n, seed, &held)?;
    println!("{} records written to {}", manifest.records.len(), out.join(data::MANIFEST_FILE).display());
    println!("{:<16} {:>9} {:>9} {:>9}", "combo", "pretrain", "finetune", "test");
    let census = manifest.census();
    for combo in Combo::all() {
        let count = |s: Split| census.get(&s).and_then(|m| m.get(&combo)).copied().unwrap_or(0);
        println!(
            "{:<16} {:>9} {:>9} {:>9}",
            combo.to_string(),
            count(Split::Pretrain),
            count(Split::Finetune),
            count(Split::Test)
        );
    }
    Ok(())
}

fn train(config: &Path, stage: Stage, init: Option<&Path>) -> Result<()> {
    let run = RunConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let vocab = run.vocabulary()?;
    let (model, mut meta) = match init {
        None => {
            let model = Denoiser::new(run.model.clone())?;
            let meta = CheckpointMeta { text_seed: run.text_seed, vocab_size: vocab.size(), step: 0, stage: "init".into() };
            (model, meta)
        }
        Some(path) => {
            let (model, meta) = checkpoint::load(path)?;
            if meta.stage != Stage::Pretrain.name() {
                bail!("{} is a {:?} checkpoint; fine-tuning needs a pretrain checkpoint", path.display(), meta.stage);
            }
            if model.config() != &run.model {
                log::warn!("model section of the config differs from the checkpoint; using the checkpoint's");
            }
            (model, meta)
        }
    };
    let cond = Conditioner::for_checkpoint(vocab, &model, &meta)?;
    let (_, examples) = pipeline::load_examples(&run.data, stage.split())?;
    log::info!("{}: {} examples, {} parameters", stage.name(), examples.len(), model.param_count());
    let cfg = TrainConfig::from_run(&run, stage);
    let outcome = pipeline::train(&model, &mut meta, stage, &examples, &cond, &cfg, &run.out_dir)?;
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

/// Checkpoint, vocabulary and sampler settings shared by the sampling commands.
struct Loaded {
    model: Denoiser,
    cond: Conditioner,
    sampler: SamplerConfig,
    lambda: f64,
}

fn load_for_sampling(checkpoint_path: &Path, args: &SamplingArgs) -> Result<Loaded> {
    let run = args.config.as_deref().map(RunConfig::load).transpose()?;
    let vocab = match &run {
        Some(r) => r.vocabulary()?,
        None => data::vocabulary(),
    };
    let (model, meta) = checkpoint::load(checkpoint_path)?;
    let cond = Conditioner::for_checkpoint(vocab, &model, &meta)?;
    let mut sampler = run.as_ref().map(|r| r.sampler).unwrap_or_default();
    if let Some(s) = args.steps {
        sampler.steps = s;
    }
    if let Some(s) = args.scale {
        sampler.guidance_scale = s;
    }
    if let Some(s) = args.seed {
        sampler.seed = s;
    }
    if let Some(m) = args.method {
        sampler.method = m;
    }
    sampler.validate(&cond.schedule)?;
    let lambda = args.lambda.or(run.as_ref().and_then(|r| r.lambda)).unwrap_or(HARD);
    if lambda.is_nan() || lambda < 0.0 {
        bail!("lambda must be non-negative");
    }
    Ok(Loaded { model, cond, sampler, lambda })
}

/// Applies "word=class" bindings to every extra-text occurrence of `word`.
fn apply_binds(prompt: Prompt, spec: &str, vocab: &Vocabulary, labels: Option<&LabelMap>) -> Result<Prompt> {
    let mut prompt = prompt;
    for pair in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (word, class) = pair.split_once('=').ok_or_else(|| anyhow!("binding {pair:?} is not word=class"))?;
        let word = word.trim().to_lowercase();
        let class: u8 = class.trim().parse().with_context(|| format!("class in binding {pair:?}"))?;
        if !vocab.concepts.contains_key(&class) {
            bail!("binding {pair:?}: class {class} is unknown");
        }
        if let Some(l) = labels {
            if l.count(class) == 0 {
                bail!("binding {pair:?}: class {class} does not occur in the layout");
            }
        }
        let id = vocab.id(&word).ok_or_else(|| fsn_core::Error::OutOfVocabulary(word.clone()))?;
        let free: Vec<usize> =
            prompt.positions_of(id).into_iter().filter(|&p| prompt.bindings[p] == Binding::Global).collect();
        if free.is_empty() {
            bail!("binding {pair:?}: {word:?} does not appear in --text");
        }
        for p in free {
            prompt = textcond::rebind(&prompt, p..p + 1, Binding::Concept(class), vocab)?;
        }
    }
    Ok(prompt)
}

fn print_binding_table(prompt: &Prompt, vocab: &Vocabulary) {
    let words: Vec<&str> = prompt.token_ids.iter().map(|&t| vocab.word(t).unwrap_or("?")).collect();
    println!("prompt: {}", words.join(" "));
    for (pos, word, binding) in prompt.binding_table(vocab) {
        let b = match binding {
            Binding::Concept(c) => format!("class {c}"),
            Binding::Global => "global".to_string(),
        };
        println!("{pos:>3} {word:<12} {b}");
    }
}

fn sample(args: SampleArgs) -> Result<()> {
    let l = load_for_sampling(&args.checkpoint, &args.sampling)?;
    let labels = args.labels.as_deref().map(layout::load_label_map).transpose()?;
    let vocab = &l.cond.vocab;
    let overrides = AttentionOverride::parse(&args.r#override)?;
    let request = match &labels {
        Some(map) => {
            let prompt = apply_binds(l.cond.layout_prompt(map, &args.text)?, &args.bind, vocab, Some(map))?;
            let layout = expand_layout(map, &prompt)?;
            Request { prompt, layout: Some(layout), seed: l.sampler.seed }
        }
        None => {
            if !args.bind.trim().is_empty() || !overrides.is_empty() {
                bail!("--bind and --override need a --labels layout");
            }
            Request { prompt: l.cond.text_prompt(&args.text)?, layout: None, seed: l.sampler.seed }
        }
    };
    overrides.validate(request.prompt.len())?;
    print_binding_table(&request.prompt, vocab);
    let images = pipeline::generate(&l.model, &l.cond, &l.sampler, &[request], l.lambda, &overrides, None)?;
    images[0].save(&args.out)?;
    println!("{}", args.out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    checkpoint_path: Option<&Path>,
    manifest: &Path,
    out: &Path,
    ground_truth: bool,
    split: &str,
    limit: Option<usize>,
    batch: usize,
    sampling: &SamplingArgs,
) -> Result<()> {
    let split = match split {
        "pretrain" => Split::Pretrain,
        "finetune" => Split::Finetune,
        "test" => Split::Test,
        other => bail!("unknown split {other:?}"),
    };
    let (_, mut examples) = pipeline::load_examples(manifest, split)?;
    if let Some(n) = limit {
        examples.truncate(n);
    }
    let report = if ground_truth {
        let vocab = data::vocabulary();
        let cfg = fsn_core::denoiser::DenoiserConfig::default();
        let cond = Conditioner::new(vocab, &cfg, 0, &Default::default())?;
        pipeline::evaluate(None, &cond, &SamplerConfig::default(), &examples, HARD, batch, true)?
    } else {
        let path = checkpoint_path.ok_or_else(|| anyhow!("--checkpoint is required"))?;
        let l = load_for_sampling(path, sampling)?;
        pipeline::evaluate(Some(&l.model), &l.cond, &l.sampler, &examples, l.lambda, batch, false)?
    };
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    println!("mIoU {:.4}  pixel accuracy {:.4}  over {} images", report.miou, report.pixel_acc, report.n_images);
    Ok(())
}

/// Keeps the first conditional attention event of one layer at one timestep.
struct Capture {
    layer: usize,
    t: usize,
    maps: Option<ScoreMaps>,
}

impl AttentionProbe for Capture {
    fn observe(&mut self, event: &AttentionEvent<'_>) {
        if self.maps.is_some() || event.layer != self.layer || event.mask.is_none() || event.t[0] != self.t {
            return;
        }
        let scores = event.output.scores.data();
        let (n, c) = (event.height * event.width, event.output.scores.dim(event.output.scores.shape().len() - 1));
        self.maps = ScoreMaps::from_position_major(&scores[..n * c], c, event.height, event.width).ok();
    }
}

fn inspect_attn(
    checkpoint_path: &Path,
    labels: &Path,
    text: &str,
    layer: usize,
    step: usize,
    out: &Path,
    sampling: &SamplingArgs,
) -> Result<()> {
    let l = load_for_sampling(checkpoint_path, sampling)?;
    let layers = l.model.attention_layers();
    if layer >= layers {
        bail!("layer {layer} out of range: the model has {layers} attention layers");
    }
    let ts = diffusion::sampling_timesteps(l.cond.schedule.timesteps(), l.sampler.steps);
    let t = *ts.get(step).ok_or_else(|| anyhow!("step {step} out of range: sampling takes {} steps", ts.len()))?;
    let map = layout::load_label_map(labels)?;
    let request = Request::from_labels(&l.cond, &map, text, l.sampler.seed)?;
    let prompt = request.prompt.clone();
    let mut capture = Capture { layer, t, maps: None };
    pipeline::generate(
        &l.model,
        &l.cond,
        &l.sampler,
        &[request],
        l.lambda,
        &AttentionOverride::default(),
        Some(&mut capture),
    )?;
    let maps = capture.maps.ok_or_else(|| anyhow!("no attention event captured for layer {layer} at t = {t}"))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for k in 0..maps.channels {
        let word = l.cond.vocab.word(prompt.token_ids[k]).unwrap_or("unk").trim_matches(['<', '>']);
        let path = out.join(format!("channel_{k:02}_{word}.pgm"));
        let raster = Raster { kind: Kind::Gray, width: maps.width, height: maps.height, bytes: maps.heatmap(k) };
        netpbm::write(&path, &raster)?;
    }
    print_binding_table(&prompt, &l.cond.vocab);
    println!("{} maps of {}x{} at layer {layer}, t = {t} written to {}", maps.channels, maps.width, maps.height, out.display());
    Ok(())
}
