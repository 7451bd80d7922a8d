//! Cross-attention between image positions and prompt tokens, with layout
//! rectification and post-rectification channel overrides.
//!
//! Scores are laid out position-major, `[.., N, C]` with `N = H·W` image
//! positions and `C` tokens, so the softmax over tokens runs along the last
//! axis. [`ScoreMaps`] converts to the channel-major `C×H×W` view for export.

use fsn_tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{contract, Result};
use crate::layout::ConceptLayout;

/// Hard rectification strength: masked scores become `-inf`.
pub const HARD: f64 = f64::INFINITY;

/// Projection matrices of one single-head attention layer.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    /// `D_img × d`
    pub w_q: Tensor,
    /// `D_txt × d`
    pub w_k: Tensor,
    /// `D_txt × d_v`
    pub w_v: Tensor,
}

impl AttentionParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Result<Self> {
        let p = Self { w_q, w_k, w_v };
        if [&p.w_q, &p.w_k, &p.w_v].iter().any(|t| t.rank() != 2) {
            return Err(contract("projection matrices must be rank 2"));
        }
        if p.w_q.dim(1) != p.w_k.dim(1) {
            return Err(contract(format!("query width {} != key width {}", p.w_q.dim(1), p.w_k.dim(1))));
        }
        if p.w_k.dim(0) != p.w_v.dim(0) {
            return Err(contract("key and value projections must read the same text width"));
        }
        Ok(p)
    }

    /// Uniform `±1/√fan_in` initialization.
    pub fn init<R: Rng + ?Sized>(d_img: usize, d_txt: usize, d: usize, d_v: usize, rng: &mut R) -> Self {
        let mat = |rows: usize, cols: usize, rng: &mut R| {
            let bound = 1.0 / (rows as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Tensor::param((0..rows * cols).map(|_| dist.sample(rng)).collect(), &[rows, cols]).expect("shape")
        };
        Self { w_q: mat(d_img, d, rng), w_k: mat(d_txt, d, rng), w_v: mat(d_txt, d_v, rng) }
    }

    /// Scaling dimension of queries and keys.
    pub fn d(&self) -> usize {
        self.w_q.dim(1)
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_q, &self.w_k, &self.w_v]
    }
}

/// `M = Q·Kᵀ/√d`, shape `[.., N, C]`.
pub fn attention_scores(q: &Tensor, k: &Tensor, d: usize) -> Result<Tensor> {
    if d == 0 {
        return Err(contract("attention scaling dimension must be positive"));
    }
    let (qd, kd) = (q.shape().last().copied(), k.shape().last().copied());
    if qd != Some(d) || kd != Some(d) {
        return Err(contract(format!("query/key widths {:?}/{:?} differ from d = {d}", qd, kd)));
    }
    Ok(q.matmul(&k.transpose_last2()?)?.scale(1.0 / (d as f64).sqrt())?)
}

fn check_strength(lambda: f64) -> Result<()> {
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(contract(format!("rectification strength must be in (0, inf], got {lambda}")));
    }
    Ok(())
}

/// Where `mask == 1` scores pass through untouched; where `mask == 0` they
/// become `-inf` (`lambda = inf`) or are lowered by `lambda`.
pub fn rectify(scores: &Tensor, mask: &Tensor, lambda: f64) -> Result<Tensor> {
    check_strength(lambda)?;
    if scores.shape() != mask.shape() {
        return Err(contract(format!("scores {:?} and layout {:?} differ in shape", scores.shape(), mask.shape())));
    }
    let keep: Vec<bool> = {
        let m = mask.data();
        if let Some(v) = m.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(contract(format!("layout value {v} is not binary")));
        }
        m.iter().map(|&v| v == 1.0).collect()
    };
    let hard = lambda == f64::INFINITY;
    let data: Vec<f64> = scores
        .data()
        .iter()
        .zip(&keep)
        .map(|(&s, &k)| match (k, hard) {
            (true, _) => s,
            (false, true) => f64::NEG_INFINITY,
            (false, false) => s - lambda,
        })
        .collect();
    Tensor::from_op(
        data,
        scores.shape().to_vec(),
        vec![scores.clone()],
        Box::new(move |g| {
            let gx = if hard { g.iter().zip(&keep).map(|(&g, &k)| if k { g } else { 0.0 }).collect() } else { g.to_vec() };
            vec![Some(gx)]
        }),
    )
    .map_err(Into::into)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Directive {
    /// Channel `dst` takes a copy of channel `src`.
    Share { src: usize, dst: usize },
    /// Channels `a` and `b` exchange.
    Swap { a: usize, b: usize },
}

/// Ordered list of channel surgeries on rectified scores.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttentionOverride {
    pub directives: Vec<Directive>,
}

impl AttentionOverride {
    pub fn new(directives: Vec<Directive>) -> Self {
        Self { directives }
    }

    pub fn is_empty(&self) -> bool {
        self.directives.is_empty()
    }

    /// Parses `"swap:a,b|share:src,dst"`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut directives = Vec::new();
        for part in text.split('|').map(str::trim).filter(|p| !p.is_empty()) {
            let (kind, args) =
                part.split_once(':').ok_or_else(|| contract(format!("override {part:?} lacks ':'")))?;
            let nums: Vec<usize> = args
                .split(',')
                .map(|a| a.trim().parse().map_err(|_| contract(format!("bad channel index {a:?} in {part:?}"))))
                .collect::<Result<_>>()?;
            let [x, y] = nums[..] else {
                return Err(contract(format!("override {part:?} needs exactly two channels")));
            };
            directives.push(match kind.trim() {
                "swap" => Directive::Swap { a: x, b: y },
                "share" => Directive::Share { src: x, dst: y },
                other => return Err(contract(format!("unknown override kind {other:?}"))),
            });
        }
        Ok(Self { directives })
    }

    /// Rejects out-of-range channels and directives that disagree about a
    /// channel: a destination shared from two different sources, or a
    /// channel that is both a share destination and part of a swap.
    pub fn validate(&self, channels: usize) -> Result<()> {
        let mut share_src: Vec<Option<usize>> = vec![None; channels];
        let mut swapped = vec![false; channels];
        for d in &self.directives {
            let (x, y) = match *d {
                Directive::Share { src, dst } => (src, dst),
                Directive::Swap { a, b } => (a, b),
            };
            if x >= channels || y >= channels {
                return Err(contract(format!("{d:?} refers to a channel outside 0..{channels}")));
            }
            match *d {
                Directive::Share { src, dst } => {
                    if share_src[dst].is_some_and(|s| s != src) {
                        return Err(contract(format!("channel {dst} is shared from two different sources")));
                    }
                    share_src[dst] = Some(src);
                }
                Directive::Swap { a, b } => {
                    swapped[a] = true;
                    swapped[b] = true;
                }
            }
        }
        if let Some(c) = (0..channels).find(|&c| swapped[c] && share_src[c].is_some()) {
            return Err(contract(format!("channel {c} is both swapped and overwritten by a share")));
        }
        Ok(())
    }

    /// Output channel `k` reads input channel `map[k]`.
    pub fn channel_map(&self, channels: usize) -> Result<Vec<usize>> {
        self.validate(channels)?;
        let mut map: Vec<usize> = (0..channels).collect();
        for d in &self.directives {
            match *d {
                Directive::Share { src, dst } => map[dst] = map[src],
                Directive::Swap { a, b } => map.swap(a, b),
            }
        }
        Ok(map)
    }
}

/// Applies the directives in order to scores laid out `[.., N, C]`.
pub fn apply_overrides(rectified: &Tensor, overrides: &AttentionOverride) -> Result<Tensor> {
    if overrides.is_empty() {
        return Ok(rectified.clone());
    }
    let axis = rectified.rank().checked_sub(1).ok_or_else(|| contract("scores must have a token axis"))?;
    let map = overrides.channel_map(rectified.dim(axis))?;
    if map.iter().enumerate().all(|(k, &m)| k == m) {
        return Ok(rectified.clone());
    }
    Ok(rectified.index_select(axis, &map)?)
}

/// Everything one attention evaluation produced.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `softmax(scores)·V`, `[.., N, d_v]`
    pub out: Tensor,
    /// Scores after rectification and overrides, `[.., N, C]`
    pub scores: Tensor,
    /// Post-softmax weights, `[.., N, C]`
    pub weights: Tensor,
}

/// Rectification settings for one call. `mask` is position-major and shaped
/// like the scores; `None` means plain cross-attention.
#[derive(Debug, Clone, Copy)]
pub struct Rectifier<'a> {
    pub mask: Option<&'a Tensor>,
    pub lambda: f64,
    pub overrides: &'a AttentionOverride,
}

fn attend(phi_i: &Tensor, phi_t: &Tensor, params: &AttentionParams, rect: Rectifier<'_>) -> Result<AttentionOutput> {
    let q = phi_i.matmul(&params.w_q)?;
    let k = phi_t.matmul(&params.w_k)?;
    let v = phi_t.matmul(&params.w_v)?;
    let mut scores = attention_scores(&q, &k, params.d())?;
    if let Some(mask) = rect.mask {
        scores = rectify(&scores, mask, rect.lambda)?;
        scores = apply_overrides(&scores, rect.overrides)?;
    }
    let weights = scores.softmax_lastdim()?;
    let out = weights.matmul(&v)?;
    Ok(AttentionOutput { out, scores, weights })
}

/// `O = softmax(Q·Kᵀ/√d)·V` with `Q = φ_I·W_Q`, `K = φ_T·W_K`, `V = φ_T·W_V`.
///
/// `phi_i` is `[.., N, D_img]` and `phi_t` is `[.., C, D_txt]` with matching
/// leading axes.
pub fn cross_attention(phi_i: &Tensor, phi_t: &Tensor, params: &AttentionParams) -> Result<AttentionOutput> {
    static NONE: AttentionOverride = AttentionOverride { directives: Vec::new() };
    attend(phi_i, phi_t, params, Rectifier { mask: None, lambda: HARD, overrides: &NONE })
}

/// Cross-attention with the scores rectified by `mask` (position-major,
/// shaped like the scores) and then overridden before the softmax.
pub fn rectified_cross_attention(
    phi_i: &Tensor,
    phi_t: &Tensor,
    mask: &Tensor,
    params: &AttentionParams,
    lambda: f64,
    overrides: &AttentionOverride,
) -> Result<AttentionOutput> {
    attend(phi_i, phi_t, params, Rectifier { mask: Some(mask), lambda, overrides })
}

/// Position-major `[N, C]` mask of one layout (`N = H·W`).
pub fn layout_mask(layout: &ConceptLayout) -> Result<Tensor> {
    let (c, n) = (layout.tokens(), layout.height() * layout.width());
    Ok(layout.channels.reshape(&[c, n])?.transpose_last2()?)
}

/// Channel-major view `C×H×W` of position-major scores or weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMaps {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ScoreMaps {
    /// `scores` is `[N, C]` with `N = height·width`.
    pub fn from_position_major(scores: &[f64], channels: usize, height: usize, width: usize) -> Result<Self> {
        let n = height * width;
        if scores.len() != n * channels {
            return Err(contract(format!("{} scores do not form {n} positions x {channels} tokens", scores.len())));
        }
        let mut values = vec![0.0; scores.len()];
        for p in 0..n {
            for k in 0..channels {
                values[k * n + p] = scores[p * channels + k];
            }
        }
        Ok(Self { channels, height, width, values })
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[k * n..(k + 1) * n]
    }

    /// 8-bit heatmap of channel `k`: finite values map linearly from the
    /// channel's finite range onto 0..=255 and `-inf` maps to 0. A channel
    /// with a single finite value renders as 255 where finite.
    pub fn heatmap(&self, k: usize) -> Vec<u8> {
        let ch = self.channel(k);
        let finite = ch.iter().copied().filter(|v| v.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        ch.iter()
            .map(|&v| {
                if !v.is_finite() {
                    0
                } else if hi > lo {
                    ((v - lo) / (hi - lo) * 255.0).round() as u8
                } else {
                    255
                }
            })
            .collect()
    }
}
