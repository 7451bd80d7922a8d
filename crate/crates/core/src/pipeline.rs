//! Training and generation drivers shared by the command line and the
//! experiment suites.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fsn_tensor::{adam_step, clip_grad_norm, AdamConfig, AdamState, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionOverride, HARD};
use crate::data::{self, DatasetManifest, Example, Image, Split};
use crate::denoiser::checkpoint::{self, CheckpointMeta};
use crate::denoiser::{AttentionProbe, Conditioning, Denoiser, DenoiserConfig};
use crate::diffusion::{self, EpsModel, NoiseSchedule, NullCondition, Probed, SamplerConfig, ScheduleConfig};
use crate::error::{contract, Error, Result};
use crate::eval::{self, ConfusionAccumulator, EvalReport};
use crate::layout::{expand_layout, ConceptLayout, LabelMap};
use crate::textcond::{self, null_prompt, Prompt, TextEncoder, Vocabulary};

/// Everything a training or sampling run needs, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: DenoiserConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Vocabulary JSON; the built-in shape vocabulary when absent.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    /// Dataset manifest (`manifest.jsonl`).
    pub data: PathBuf,
    /// Where checkpoints and loss logs go.
    pub out_dir: PathBuf,
    #[serde(default = "defaults::pretrain_steps")]
    pub pretrain_steps: usize,
    #[serde(default = "defaults::finetune_steps")]
    pub finetune_steps: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub seed: u64,
    /// Rectification strength; `null` means hard masking.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "defaults::p_uncond")]
    pub p_uncond: f64,
    #[serde(default = "defaults::text_seed")]
    pub text_seed: u64,
    #[serde(default = "defaults::checkpoint_every")]
    pub checkpoint_every: usize,
}

mod defaults {
    pub fn pretrain_steps() -> usize {
        20_000
    }
    pub fn finetune_steps() -> usize {
        10_000
    }
    pub fn batch_size() -> usize {
        8
    }
    pub fn lr() -> f64 {
        1e-4
    }
    pub fn grad_clip() -> f64 {
        1.0
    }
    pub fn p_uncond() -> f64 {
        0.1
    }
    pub fn text_seed() -> u64 {
        0x5EED
    }
    pub fn checkpoint_every() -> usize {
        1000
    }
}

impl RunConfig {
    /// Parses the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data = base.join(&cfg.data);
        cfg.out_dir = base.join(&cfg.out_dir);
        if let Some(v) = &cfg.vocab {
            cfg.vocab = Some(base.join(v));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.timesteps != self.schedule.timesteps {
            return Err(contract("model.timesteps must equal schedule.timesteps"));
        }
        if self.batch_size == 0 {
            return Err(contract("batch_size must be positive"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.grad_clip.is_nan() || self.grad_clip <= 0.0 || !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(contract("lr and grad_clip must be positive and p_uncond in [0, 1]"));
        }
        for p in std::iter::once(&self.data).chain(&self.vocab) {
            if !p.exists() {
                return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file not found")));
            }
        }
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(HARD)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        match &self.vocab {
            Some(p) => Vocabulary::load(p),
            None => Ok(data::vocabulary()),
        }
    }
}

/// Vocabulary, frozen encoder and schedule that go with a model.
pub struct Conditioner {
    pub vocab: Vocabulary,
    pub encoder: TextEncoder,
    pub schedule: NoiseSchedule,
    pub null: NullCondition,
}

impl Conditioner {
    pub fn new(vocab: Vocabulary, model: &DenoiserConfig, text_seed: u64, schedule: &ScheduleConfig) -> Result<Self> {
        let encoder = TextEncoder::new(vocab.size(), model.seq_len, model.text_dim, text_seed);
        let null = NullCondition { text: encoder.encode(&null_prompt(&vocab, model.seq_len))?.values.to_vec() };
        Ok(Self { vocab, encoder, schedule: NoiseSchedule::new(schedule)?, null })
    }

    /// Rebuilds the conditioner recorded in a checkpoint.
    pub fn for_checkpoint(vocab: Vocabulary, model: &Denoiser, meta: &CheckpointMeta) -> Result<Self> {
        if vocab.size() != meta.vocab_size {
            return Err(contract(format!(
                "checkpoint was trained with {} tokens, vocabulary has {}",
                meta.vocab_size,
                vocab.size()
            )));
        }
        let schedule = ScheduleConfig { timesteps: model.config().timesteps, ..ScheduleConfig::default() };
        Self::new(vocab, model.config(), meta.text_seed, &schedule)
    }

    pub fn seq_len(&self) -> usize {
        self.encoder.seq_len
    }

    pub fn text_prompt(&self, text: &str) -> Result<Prompt> {
        textcond::build_prompt_from_text(text, &self.vocab, self.seq_len())
    }

    pub fn layout_prompt(&self, labels: &LabelMap, extra: &str) -> Result<Prompt> {
        textcond::build_prompt_from_layout(labels, &self.vocab, extra, self.seq_len())
    }

    /// Stacks prompts (and layouts, when given) into one conditioning batch.
    pub fn condition(
        &self,
        prompts: &[&Prompt],
        layouts: Option<&[ConceptLayout]>,
        lambda: f64,
        overrides: &AttentionOverride,
    ) -> Result<Conditioning> {
        let text = self.encoder.encode_batch(prompts)?;
        let layout = match layouts {
            None => None,
            Some(ls) => {
                if ls.len() != prompts.len() {
                    return Err(contract("one layout per prompt required"));
                }
                let parts: Vec<Tensor> = ls.iter().map(|l| l.channels.clone()).collect();
                let stacked = Tensor::concat(&parts, 0)?;
                let (s, h, w) = (ls[0].tokens(), ls[0].height(), ls[0].width());
                Some(stacked.reshape(&[ls.len(), s, h, w])?)
            }
        };
        Ok(Conditioning { text, layout, lambda, overrides: overrides.clone() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    pub fn split(self) -> Split {
        match self {
            Stage::Pretrain => Split::Pretrain,
            Stage::Finetune => Split::Finetune,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub p_uncond: f64,
    pub lambda: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn from_run(run: &RunConfig, stage: Stage) -> Self {
        Self {
            steps: match stage {
                Stage::Pretrain => run.pretrain_steps,
                Stage::Finetune => run.finetune_steps,
            },
            batch_size: run.batch_size,
            lr: run.lr,
            grad_clip: run.grad_clip,
            p_uncond: run.p_uncond,
            lambda: run.lambda(),
            seed: run.seed,
            checkpoint_every: run.checkpoint_every,
        }
    }
}

/// One prepared training example.
struct Item {
    z0: Vec<f64>,
    prompt: Prompt,
    labels: LabelMap,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub losses: Vec<f64>,
}

pub fn checkpoint_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("{}.fsn", stage.name()))
}

pub fn loss_log_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("{}_loss.csv", stage.name()))
}

/// Runs `cfg.steps` Adam steps of the noise-regression objective.
///
/// Pretraining conditions on caption text alone (plain cross-attention).
/// Fine-tuning conditions on the layout's concept stack with rectified
/// attention. Prompts are replaced by the null prompt with probability
/// `p_uncond`. Writes `<stage>_loss.csv`, periodic checkpoints and the final
/// `<stage>.fsn` into `out_dir`.
pub fn train(
    model: &Denoiser,
    meta: &mut CheckpointMeta,
    stage: Stage,
    examples: &[Example],
    cond: &Conditioner,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if cfg.steps > 0 && examples.is_empty() {
        return Err(contract(format!("no {} examples to train on", stage.name())));
    }
    let items: Vec<Item> = examples
        .iter()
        .map(|ex| {
            let prompt = match stage {
                Stage::Pretrain => cond.text_prompt(&ex.caption)?,
                Stage::Finetune => cond.layout_prompt(&ex.labels, "")?,
            };
            Ok(Item { z0: ex.image.data.clone(), prompt, labels: ex.labels.clone() })
        })
        .collect::<Result<_>>()?;

    let log_path = loss_log_path(out_dir, stage);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "step,loss").map_err(|e| Error::io(&log_path, e))?;

    let params = model.params();
    let mut adam = AdamState::new(&params);
    let adam_cfg = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let stage_seed = cfg.seed ^ if stage == Stage::Pretrain { 0x9E37_79B9 } else { 0x7F4A_7C15 };
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed);
    let mc = model.config();
    let item_shape = [mc.in_channels, mc.image_size, mc.image_size];
    let mut losses = Vec::with_capacity(cfg.steps);
    let none = AttentionOverride::default();

    for step in 1..=cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..items.len())).collect();
        let mut z0 = Vec::with_capacity(cfg.batch_size * item_shape.iter().product::<usize>());
        picks.iter().for_each(|&i| z0.extend_from_slice(&items[i].z0));
        let mut shape = vec![cfg.batch_size];
        shape.extend(item_shape);
        let z0 = Tensor::new(z0, &shape)?;
        let prompts: Vec<&Prompt> = picks.iter().map(|&i| &items[i].prompt).collect();
        let batch = match stage {
            Stage::Pretrain => cond.condition(&prompts, None, cfg.lambda, &none)?,
            Stage::Finetune => {
                let layouts: Vec<ConceptLayout> = picks
                    .iter()
                    .map(|&i| expand_layout(&items[i].labels, &items[i].prompt))
                    .collect::<Result<_>>()?;
                cond.condition(&prompts, Some(&layouts), cfg.lambda, &none)?
            }
        };

        model.zero_grad();
        let loss = diffusion::training_loss(model, &cond.schedule, &z0, &batch, Some(&cond.null), cfg.p_uncond, &mut rng)?;
        loss.backward()?;
        clip_grad_norm(&params, cfg.grad_clip);
        adam_step(&params, &mut adam, &adam_cfg)?;
        let v = loss.item()?;
        losses.push(v);
        meta.step += 1;
        writeln!(log, "{step},{v}").map_err(|e| Error::io(&log_path, e))?;
        if step % 100 == 0 {
            let recent = &losses[losses.len() - 100..];
            log::info!("{} step {step}/{}: mean loss {:.5}", stage.name(), cfg.steps, recent.iter().sum::<f64>() / 100.0);
            log.flush().map_err(|e| Error::io(&log_path, e))?;
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
            meta.stage = stage.name().to_string();
            let p = out_dir.join(format!("{}-{step:06}.fsn", stage.name()));
            checkpoint::save(&p, model, meta)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    meta.stage = stage.name().to_string();
    let path = checkpoint_path(out_dir, stage);
    checkpoint::save(&path, model, meta)?;
    Ok(TrainOutcome { checkpoint: path, losses })
}

/// Loads a manifest and the examples of one split.
pub fn load_examples(manifest_path: &Path, split: Split) -> Result<(DatasetManifest, Vec<Example>)> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let examples = data::load_split(&manifest, &data::manifest_root(manifest_path), split)?;
    Ok((manifest, examples))
}

/// One image to generate.
#[derive(Debug, Clone)]
pub struct Request {
    pub prompt: Prompt,
    /// Full-resolution layout; `None` generates from text alone.
    pub layout: Option<ConceptLayout>,
    pub seed: u64,
}

impl Request {
    /// Concept-stack prompt and layout for a label map.
    pub fn from_labels(cond: &Conditioner, labels: &LabelMap, extra: &str, seed: u64) -> Result<Self> {
        let prompt = cond.layout_prompt(labels, extra)?;
        let layout = expand_layout(labels, &prompt)?;
        Ok(Self { prompt, layout: Some(layout), seed })
    }
}

/// Samples a batch. Requests must either all carry layouts or none.
/// Each request's starting noise comes from its own seed.
pub fn generate(
    model: &Denoiser,
    cond: &Conditioner,
    sampler: &SamplerConfig,
    requests: &[Request],
    lambda: f64,
    overrides: &AttentionOverride,
    probe: Option<&mut dyn AttentionProbe>,
) -> Result<Vec<Image>> {
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let with_layout = requests[0].layout.is_some();
    if requests.iter().any(|r| r.layout.is_some() != with_layout) {
        return Err(contract("a batch cannot mix layout and text-only requests"));
    }
    let prompts: Vec<&Prompt> = requests.iter().map(|r| &r.prompt).collect();
    let layouts: Option<Vec<ConceptLayout>> =
        with_layout.then(|| requests.iter().map(|r| r.layout.clone().expect("checked")).collect());
    let c = cond.condition(&prompts, layouts.as_deref(), lambda, overrides)?;
    let u = cond.null.batch(requests.len(), cond.seq_len())?;
    let mc = model.config();
    let seeds: Vec<u64> = requests.iter().map(|r| r.seed).collect();
    let z = diffusion::initial_noise(&[mc.in_channels, mc.image_size, mc.image_size], &seeds)?;
    let out = match probe {
        Some(p) => {
            let probed = Probed::new(model, p);
            diffusion::sample(&probed as &dyn EpsModel, &cond.schedule, sampler, &c, &u, &z)?
        }
        None => diffusion::sample(model, &cond.schedule, sampler, &c, &u, &z)?,
    };
    let per = out.numel() / requests.len();
    let data = out.to_vec();
    Ok(data.chunks(per).map(|d| Image { width: mc.image_size, height: mc.image_size, data: d.to_vec() }).collect())
}

/// Seed used for record `index` of an evaluation run.
pub fn record_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Generates one image per example from its layout, oracle-segments it and
/// accumulates mIoU against the example's label map. With `ground_truth`
/// the example's own image is segmented instead.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: Option<&Denoiser>,
    cond: &Conditioner,
    sampler: &SamplerConfig,
    examples: &[Example],
    lambda: f64,
    batch: usize,
    ground_truth: bool,
) -> Result<EvalReport> {
    let palette = data::palette();
    let mut acc = ConfusionAccumulator::default();
    for (chunk_idx, chunk) in examples.chunks(batch.max(1)).enumerate() {
        let images: Vec<Image> = if ground_truth {
            chunk.iter().map(|e| e.image.clone()).collect()
        } else {
            let model = model.ok_or_else(|| contract("evaluation needs a model unless ground truth is used"))?;
            let reqs: Vec<Request> = chunk
                .iter()
                .enumerate()
                .map(|(i, e)| Request::from_labels(cond, &e.labels, "", record_seed(sampler.seed, chunk_idx * batch + i)))
                .collect::<Result<_>>()?;
            generate(model, cond, sampler, &reqs, lambda, &AttentionOverride::default(), None)?
        };
        for (img, ex) in images.iter().zip(chunk) {
            acc.add(&eval::oracle_segment(img, &palette)?, &ex.labels)?;
        }
        log::info!("evaluated {}/{}", (chunk_idx * batch + chunk.len()).min(examples.len()), examples.len());
    }
    Ok(acc.report())
}
