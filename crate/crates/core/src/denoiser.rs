//! The noise-prediction U-Net.
//!
//! A resolution ladder of residual blocks with timestep conditioning. At the
//! configured attention resolutions every residual block is followed by a
//! cross-attention block reading the text embeddings. Without a layout these
//! run plain cross-attention; with one they run rectified cross-attention on
//! the layout resized to the block's resolution.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use fsn_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionOutput, AttentionOverride, AttentionParams, HARD};
use crate::error::{contract, Result};

pub mod checkpoint;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    /// One multiplier per ladder level; the image halves between levels.
    pub channel_mults: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    pub res_blocks: usize,
    pub norm_groups: usize,
    pub text_dim: usize,
    pub seq_len: usize,
    /// Number of diffusion steps the time embedding accepts.
    pub timesteps: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            attention_resolutions: vec![16, 8],
            res_blocks: 2,
            norm_groups: 8,
            text_dim: 32,
            seq_len: crate::textcond::DEFAULT_SEQ_LEN,
            timesteps: 1000,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.channel_mults.len()).map(|i| self.image_size >> i).collect()
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    fn level_channels(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.channel_mults.len();
        if depth == 0 || self.res_blocks == 0 || self.in_channels == 0 || self.seq_len == 0 || self.text_dim == 0 {
            return Err(contract("denoiser config has an empty dimension"));
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(2) {
            return Err(contract("base_channels must be positive and even"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << (depth - 1)) {
            return Err(contract(format!("image size {} not divisible by 2^{}", self.image_size, depth - 1)));
        }
        let ladder = self.resolutions();
        if let Some(r) = self.attention_resolutions.iter().find(|r| !ladder.contains(r)) {
            return Err(contract(format!("attention resolution {r} is not on the ladder {ladder:?}")));
        }
        let ch = self.level_channels();
        let mut widths = ch.clone();
        widths.extend((0..depth).map(|i| 2 * ch[i]));
        widths.extend((1..depth).map(|i| ch[i] + ch[i - 1]));
        if self.norm_groups == 0 || widths.iter().any(|w| w % self.norm_groups != 0) {
            return Err(contract(format!("norm_groups {} must divide every width {widths:?}", self.norm_groups)));
        }
        if self.timesteps == 0 {
            return Err(contract("timesteps must be positive"));
        }
        Ok(())
    }

    /// Parameter count implied by the configuration.
    pub fn param_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let lin = |i: usize, o: usize| i * o + o;
        let norm = |c: usize| 2 * c;
        let td = self.time_dim();
        let res = |i: usize, o: usize| {
            norm(i) + conv(i, o, 3) + lin(td, o) + norm(o) + conv(o, o, 3) + if i != o { conv(i, o, 1) } else { 0 }
        };
        let attn = |c: usize| norm(c) + c * c + 2 * self.text_dim * c + lin(c, c);
        let ch = self.level_channels();
        let res_at = self.resolutions();
        let depth = ch.len();
        let mut n = lin(self.base_channels, td) + lin(td, td) + conv(self.in_channels, ch[0], 3);
        let mut cur = ch[0];
        for i in 0..depth {
            let with_attn = self.attention_resolutions.contains(&res_at[i]);
            for b in 0..self.res_blocks {
                n += res(if b == 0 { cur } else { ch[i] }, ch[i]);
                n += if with_attn { attn(ch[i]) } else { 0 };
            }
            cur = ch[i];
            if i + 1 < depth {
                n += conv(ch[i], ch[i], 3);
            }
        }
        for i in (0..depth).rev() {
            let with_attn = self.attention_resolutions.contains(&res_at[i]);
            for b in 0..self.res_blocks {
                n += res(if b == 0 { cur + ch[i] } else { ch[i] }, ch[i]);
                n += if with_attn { attn(ch[i]) } else { 0 };
            }
            cur = ch[i];
            if i > 0 {
                n += conv(ch[i], ch[i], 3);
            }
        }
        n + norm(ch[0]) + conv(ch[0], self.in_channels, 3)
    }
}

/// Interleaved sinusoid features `[sin(t·f₀), cos(t·f₀), sin(t·f₁), …]`
/// with `f_i = 10000^(-i/(dim/2))`.
pub fn sinusoid(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * f;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<(String, Tensor)>,
}

impl Builder {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let t = Tensor::param((0..n).map(|_| dist.sample(&mut self.rng)).collect(), shape).expect("shape");
        self.params.push((name, t.clone()));
        t
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> Tensor {
        let t = Tensor::param(vec![v; shape.iter().product()], shape).expect("shape");
        self.params.push((name, t.clone()));
        t
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Linear {
        let bound = 1.0 / (i as f64).sqrt();
        Linear { w: self.uniform(format!("{name}.weight"), &[i, o], bound), b: self.uniform(format!("{name}.bias"), &[o], bound) }
    }

    fn conv(&mut self, name: &str, i: usize, o: usize, k: usize, stride: usize) -> Conv {
        let bound = 1.0 / ((i * k * k) as f64).sqrt();
        Conv {
            w: self.uniform(format!("{name}.weight"), &[o, i, k, k], bound),
            b: self.uniform(format!("{name}.bias"), &[o], bound),
            stride,
            pad: k / 2,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm { gain: self.constant(format!("{name}.gain"), &[c], 1.0), bias: self.constant(format!("{name}.bias"), &[c], 0.0) }
    }

    fn res(&mut self, name: &str, i: usize, o: usize, td: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), i),
            conv1: self.conv(&format!("{name}.conv1"), i, o, 3, 1),
            temb: self.linear(&format!("{name}.temb"), td, o),
            norm2: self.norm(&format!("{name}.norm2"), o),
            conv2: self.conv(&format!("{name}.conv2"), o, o, 3, 1),
            skip: (i != o).then(|| self.conv(&format!("{name}.skip"), i, o, 1, 1)),
        }
    }

    fn attn(&mut self, name: &str, c: usize, text_dim: usize) -> CrossAttnBlock {
        let norm = self.norm(&format!("{name}.norm"), c);
        let b_img = 1.0 / (c as f64).sqrt();
        let b_txt = 1.0 / (text_dim as f64).sqrt();
        let w_q = self.uniform(format!("{name}.w_q"), &[c, c], b_img);
        let w_k = self.uniform(format!("{name}.w_k"), &[text_dim, c], b_txt);
        let w_v = self.uniform(format!("{name}.w_v"), &[text_dim, c], b_txt);
        let proj = self.linear(&format!("{name}.proj"), c, c);
        CrossAttnBlock { norm, attn: AttentionParams { w_q, w_k, w_v }, proj }
    }
}

struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w)?.add(&self.b)?)
    }
}

struct Conv {
    w: Tensor,
    b: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(&self.w, Some(&self.b), self.stride, self.pad)?)
    }
}

struct Norm {
    gain: Tensor,
    bias: Tensor,
}

struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    temb: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn forward(&self, x: &Tensor, temb_act: &Tensor, groups: usize) -> Result<Tensor> {
        let h = x.group_norm(groups, &self.norm1.gain, &self.norm1.bias)?.silu()?;
        let h = self.conv1.forward(&h)?;
        let t = self.temb.forward(temb_act)?;
        let (b, c) = (t.dim(0), t.dim(1));
        let h = h.add(&t.reshape(&[b, c, 1, 1])?)?;
        let h = h.group_norm(groups, &self.norm2.gain, &self.norm2.bias)?.silu()?;
        let h = self.conv2.forward(&h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok(h.add(&skip)?)
    }
}

struct CrossAttnBlock {
    norm: Norm,
    attn: AttentionParams,
    proj: Linear,
}

/// What a probe sees for each cross-attention evaluation.
pub struct AttentionEvent<'a> {
    /// Index of the attention block in forward order.
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    /// Diffusion step of every batch item.
    pub t: &'a [usize],
    /// Position-major `[B, N, S]` mask, `None` for plain cross-attention.
    pub mask: Option<&'a Tensor>,
    pub lambda: f64,
    pub output: &'a AttentionOutput,
}

/// Observer of attention internals during a forward pass.
pub trait AttentionProbe {
    fn observe(&mut self, event: &AttentionEvent<'_>);
}

/// Conditioning for one batched forward pass.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// `[B, S, D_txt]` text embeddings.
    pub text: Tensor,
    /// `[B, S, H, W]` binary layout at image resolution; `None` runs plain
    /// cross-attention everywhere.
    pub layout: Option<Tensor>,
    pub lambda: f64,
    pub overrides: AttentionOverride,
}

impl Conditioning {
    pub fn text_only(text: Tensor) -> Self {
        Self { text, layout: None, lambda: HARD, overrides: AttentionOverride::default() }
    }

    pub fn with_layout(text: Tensor, layout: Tensor) -> Self {
        Self { text, layout: Some(layout), lambda: HARD, overrides: AttentionOverride::default() }
    }

    pub fn batch(&self) -> usize {
        self.text.dim(0)
    }
}

struct Level {
    blocks: Vec<(ResBlock, Option<CrossAttnBlock>)>,
    resolution: usize,
}

/// The ε network and its parameters.
pub struct Denoiser {
    config: DenoiserConfig,
    params: Vec<(String, Tensor)>,
    time1: Linear,
    time2: Linear,
    conv_in: Conv,
    down: Vec<Level>,
    downsample: Vec<Conv>,
    up: Vec<Level>,
    upsample: Vec<Conv>,
    norm_out: Norm,
    conv_out: Conv,
}

struct Pass<'a, 'p> {
    cond: &'a Conditioning,
    t: &'a [usize],
    masks: HashMap<usize, Tensor>,
    probe: Option<&'p mut dyn AttentionProbe>,
    layer: usize,
}

impl Denoiser {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { rng: ChaCha8Rng::seed_from_u64(config.seed), params: Vec::new() };
        let td = config.time_dim();
        let ch = config.level_channels();
        let res_at = config.resolutions();
        let depth = ch.len();

        let time1 = b.linear("time.0", config.base_channels, td);
        let time2 = b.linear("time.1", td, td);
        let conv_in = b.conv("conv_in", config.in_channels, ch[0], 3, 1);
        let mut cur = ch[0];
        let (mut down, mut downsample) = (Vec::new(), Vec::new());
        for i in 0..depth {
            let with_attn = config.attention_resolutions.contains(&res_at[i]);
            let mut blocks = Vec::new();
            for j in 0..config.res_blocks {
                let name = format!("down.{i}.{j}");
                let rb = b.res(&format!("{name}.res"), if j == 0 { cur } else { ch[i] }, ch[i], td);
                let ab = with_attn.then(|| b.attn(&format!("{name}.attn"), ch[i], config.text_dim));
                blocks.push((rb, ab));
            }
            down.push(Level { blocks, resolution: res_at[i] });
            cur = ch[i];
            if i + 1 < depth {
                downsample.push(b.conv(&format!("down.{i}.downsample"), ch[i], ch[i], 3, 2));
            }
        }
        let (mut up, mut upsample) = (Vec::new(), Vec::new());
        for i in (0..depth).rev() {
            let with_attn = config.attention_resolutions.contains(&res_at[i]);
            let mut blocks = Vec::new();
            for j in 0..config.res_blocks {
                let name = format!("up.{i}.{j}");
                let rb = b.res(&format!("{name}.res"), if j == 0 { cur + ch[i] } else { ch[i] }, ch[i], td);
                let ab = with_attn.then(|| b.attn(&format!("{name}.attn"), ch[i], config.text_dim));
                blocks.push((rb, ab));
            }
            up.push(Level { blocks, resolution: res_at[i] });
            cur = ch[i];
            if i > 0 {
                upsample.push(b.conv(&format!("up.{i}.upsample"), ch[i], ch[i], 3, 1));
            }
        }
        let norm_out = b.norm("norm_out", ch[0]);
        let conv_out = b.conv("conv_out", ch[0], config.in_channels, 3, 1);
        Ok(Self { config, params: b.params, time1, time2, conv_in, down, downsample, up, upsample, norm_out, conv_out })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Named parameters in their stable serialization order.
    pub fn named_params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Number of cross-attention blocks, in forward order.
    pub fn attention_layers(&self) -> usize {
        self.down.iter().chain(&self.up).flat_map(|l| &l.blocks).filter(|(_, a)| a.is_some()).count()
    }

    /// Spatial resolution of each attention layer in forward order.
    pub fn attention_layer_resolutions(&self) -> Vec<usize> {
        self.down
            .iter()
            .chain(&self.up)
            .flat_map(|l| l.blocks.iter().filter(|(_, a)| a.is_some()).map(move |_| l.resolution))
            .collect()
    }

    /// Sinusoid features followed by the learned two-layer map, `[B, 4·base]`.
    pub fn time_embed(&self, t: &[usize]) -> Result<Tensor> {
        if let Some(bad) = t.iter().find(|&&s| s >= self.config.timesteps) {
            return Err(contract(format!("timestep {bad} outside 0..{}", self.config.timesteps)));
        }
        let dim = self.config.base_channels;
        let feats: Vec<f64> = t.iter().flat_map(|&s| sinusoid(s, dim)).collect();
        let x = Tensor::new(feats, &[t.len(), dim])?;
        self.time2.forward(&self.time1.forward(&x)?.silu()?)
    }

    /// Predicts the noise in `z` (`[B, C, H, W]`) at steps `t`.
    pub fn forward(
        &self,
        z: &Tensor,
        t: &[usize],
        cond: &Conditioning,
        probe: Option<&mut dyn AttentionProbe>,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let s = z.shape();
        let bsz = s.first().copied().unwrap_or(0);
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
            return Err(contract(format!(
                "input {s:?} does not match [B, {}, {n}, {n}]",
                cfg.in_channels,
                n = cfg.image_size
            )));
        }
        if t.len() != bsz || cond.batch() != bsz {
            return Err(contract(format!("batch {bsz} with {} timesteps and {} prompts", t.len(), cond.batch())));
        }
        if cond.text.shape()[1..] != [cfg.seq_len, cfg.text_dim] {
            return Err(contract(format!("text embeddings {:?} do not match S={} D={}", cond.text.shape(), cfg.seq_len, cfg.text_dim)));
        }
        if let Some(l) = &cond.layout {
            if l.shape() != [bsz, cfg.seq_len, cfg.image_size, cfg.image_size] {
                return Err(contract(format!("layout {:?} must be [B, S, H, W] at image resolution", l.shape())));
            }
        }
        let temb = self.time_embed(t)?.silu()?;
        let mut pass = Pass { cond, t, masks: HashMap::new(), probe, layer: 0 };
        let g = cfg.norm_groups;

        let mut h = self.conv_in.forward(z)?;
        let mut skips = Vec::new();
        for (i, level) in self.down.iter().enumerate() {
            for (rb, ab) in &level.blocks {
                h = rb.forward(&h, &temb, g)?;
                if let Some(ab) = ab {
                    h = self.attend(ab, &h, &mut pass)?;
                }
            }
            skips.push(h.clone());
            if let Some(ds) = self.downsample.get(i) {
                h = ds.forward(&h)?;
            }
        }
        for (k, level) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = Tensor::concat(&[h, skip], 1)?;
            for (rb, ab) in &level.blocks {
                h = rb.forward(&h, &temb, g)?;
                if let Some(ab) = ab {
                    h = self.attend(ab, &h, &mut pass)?;
                }
            }
            if let Some(us) = self.upsample.get(k) {
                let r = 2 * level.resolution;
                h = us.forward(&h.nearest_resize(r, r)?)?;
            }
        }
        let h = h.group_norm(g, &self.norm_out.gain, &self.norm_out.bias)?.silu()?;
        self.conv_out.forward(&h)
    }

    fn attend(&self, block: &CrossAttnBlock, x: &Tensor, pass: &mut Pass<'_, '_>) -> Result<Tensor> {
        let (b, c, hh, ww) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let n = hh * ww;
        let tokens = x.reshape(&[b, c, n])?.transpose_last2()?;
        let normed = tokens.layer_norm(&block.norm.gain, &block.norm.bias)?;
        let cond = pass.cond;
        let mask = match &cond.layout {
            None => None,
            Some(layout) => {
                if let Entry::Vacant(e) = pass.masks.entry(hh) {
                    let s = layout.dim(1);
                    e.insert(layout.nearest_resize(hh, ww)?.reshape(&[b, s, n])?.transpose_last2()?);
                }
                pass.masks.get(&hh)
            }
        };
        let out = match mask {
            None => attention::cross_attention(&normed, &cond.text, &block.attn)?,
            Some(m) => attention::rectified_cross_attention(&normed, &cond.text, m, &block.attn, cond.lambda, &cond.overrides)?,
        };
        if let Some(probe) = pass.probe.as_deref_mut() {
            probe.observe(&AttentionEvent {
                layer: pass.layer,
                height: hh,
                width: ww,
                t: pass.t,
                mask,
                lambda: cond.lambda,
                output: &out,
            });
        }
        pass.layer += 1;
        let y = block.proj.forward(&out.out)?;
        let y = y.transpose_last2()?.reshape(&[b, c, hh, ww])?;
        Ok(x.add(&y)?)
    }

    /// Overwrites every parameter, in manifest order.
    pub fn load_values(&self, values: &[Vec<f64>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(contract(format!("{} tensors supplied for {} parameters", values.len(), self.params.len())));
        }
        for ((name, t), v) in self.params.iter().zip(values) {
            if v.len() != t.numel() {
                return Err(contract(format!("parameter {name}: {} values for {} slots", v.len(), t.numel())));
            }
        }
        for ((_, t), v) in self.params.iter().zip(values) {
            t.data_mut().copy_from_slice(v);
        }
        Ok(())
    }

    /// Deep copy with independent parameter storage.
    pub fn duplicate(&self) -> Result<Self> {
        let copy = Self::new(self.config.clone())?;
        copy.load_values(&self.params.iter().map(|(_, t)| t.to_vec()).collect::<Vec<_>>())?;
        Ok(copy)
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|(_, t)| t.zero_grad());
    }
}
