#![allow(dead_code)]

use fsn_core::attention::AttentionParams;
use fsn_core::denoiser::DenoiserConfig;
use fsn_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smallest configuration with two attention resolutions.
pub fn tiny_config() -> DenoiserConfig {
    DenoiserConfig {
        image_size: 8,
        base_channels: 4,
        channel_mults: vec![1, 2],
        attention_resolutions: vec![8, 4],
        res_blocks: 1,
        norm_groups: 2,
        text_dim: 6,
        seq_len: 4,
        timesteps: 50,
        ..DenoiserConfig::default()
    }
}

/// A random single-layer attention problem.
pub struct Instance {
    pub n: usize,
    pub c: usize,
    pub phi_i: Tensor,
    pub phi_t: Tensor,
    pub params: AttentionParams,
    /// Position-major `[N, C]` binary mask, every row with at least one 1.
    pub mask: Tensor,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=12);
    let c = rng.random_range(1..=6);
    let (d_img, d_txt) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let (d, d_v) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let params = AttentionParams::init(d_img, d_txt, d, d_v, &mut rng);
    let phi_i = Tensor::randn(&[n, d_img], &mut rng).scale(2.0).unwrap();
    let phi_t = Tensor::randn(&[c, d_txt], &mut rng).scale(2.0).unwrap();
    let mut mask: Vec<f64> = (0..n * c).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    for p in 0..n {
        if mask[p * c..(p + 1) * c].iter().all(|&m| m == 0.0) {
            mask[p * c + rng.random_range(0..c)] = 1.0;
        }
    }
    Instance { n, c, phi_i, phi_t, params, mask: Tensor::new(mask, &[n, c]).unwrap() }
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
