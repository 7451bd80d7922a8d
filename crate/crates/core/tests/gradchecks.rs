mod common;

use common::{instance, tiny_config};
use fsn_core::attention::{rectified_cross_attention, AttentionOverride, AttentionParams, Directive, HARD};
use fsn_core::denoiser::{Conditioning, Denoiser};
use fsn_core::diffusion::{loss_for_draw, LossDraw, NoiseSchedule, NullCondition, ScheduleConfig};
use fsn_tensor::gradcheck::{check, max_rel_error};
use fsn_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random_coords<R: Rng>(sizes: &[usize], count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..sizes.len());
            (i, rng.random_range(0..sizes[i]))
        })
        .collect()
}

#[test]
fn rectified_layer_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for (case, lambda) in [HARD, 2.0, HARD].into_iter().enumerate() {
        let inst = instance(1000 + case as u64);
        let phi_i = Tensor::param(inst.phi_i.to_vec(), inst.phi_i.shape()).unwrap();
        let phi_t = Tensor::param(inst.phi_t.to_vec(), inst.phi_t.shape()).unwrap();
        let overrides = if case == 2 && inst.c > 1 {
            AttentionOverride::new(vec![Directive::Swap { a: 0, b: inst.c - 1 }])
        } else {
            AttentionOverride::default()
        };
        let readout = Tensor::randn(&[inst.n, inst.params.w_v.dim(1)], &mut rng);
        let inputs = vec![inst.params.w_q.clone(), inst.params.w_k.clone(), inst.params.w_v.clone(), phi_i, phi_t];
        let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
        let coords = random_coords(&sizes, 24, &mut rng);
        let probes = check(&inputs, &coords, STEP, |x| {
            let params = AttentionParams::new(x[0].clone(), x[1].clone(), x[2].clone())
                .map_err(|e| fsn_tensor::TensorError::Contract(e.to_string()))?;
            let out = rectified_cross_attention(&x[3], &x[4], &inst.mask, &params, lambda, &overrides)
                .map_err(|e| fsn_tensor::TensorError::Contract(e.to_string()))?;
            out.out.mul(&readout)?.sum_all()
        })
        .unwrap();
        assert!(max_rel_error(&probes) < TOL, "case {case}: {probes:?}");
    }
}

fn loss_setup(seed: u64) -> (Denoiser, Tensor, Conditioning, NullCondition, LossDraw, NoiseSchedule) {
    let cfg = tiny_config();
    let model = Denoiser::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule = NoiseSchedule::new(&ScheduleConfig { timesteps: cfg.timesteps, ..ScheduleConfig::default() }).unwrap();
    let (b, s, n) = (2, cfg.seq_len, cfg.image_size);
    let z0 = Tensor::randn(&[b, 3, n, n], &mut rng).scale(0.5).unwrap();
    let text = Tensor::randn(&[b, s, cfg.text_dim], &mut rng);
    // token 0 global, tokens 1 and 2 split the image left/right, token 3 global
    let mut layout = Vec::with_capacity(b * s * n * n);
    for _ in 0..b {
        for k in 0..s {
            for _row in 0..n {
                for col in 0..n {
                    layout.push(match k {
                        1 => (col < n / 2) as u8 as f64,
                        2 => (col >= n / 2) as u8 as f64,
                        _ => 1.0,
                    });
                }
            }
        }
    }
    let cond = Conditioning::with_layout(text, Tensor::new(layout, &[b, s, n, n]).unwrap());
    let null = NullCondition { text: Tensor::randn(&[s, cfg.text_dim], &mut rng).to_vec() };
    let draw = LossDraw { t: vec![3, 41], eps: Tensor::randn(&[b, 3, n, n], &mut rng), drop: vec![false, true] };
    (model, z0, cond, null, draw, schedule)
}

#[test]
fn denoiser_loss_matches_finite_differences() {
    let (model, z0, cond, null, draw, schedule) = loss_setup(41);
    let params = model.params();
    let sizes: Vec<usize> = params.iter().map(Tensor::numel).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let coords = random_coords(&sizes, 30, &mut rng);
    let probes = check(&params, &coords, STEP, |_| {
        loss_for_draw(&model, &schedule, &z0, &cond, Some(&null), &draw)
            .map_err(|e| fsn_tensor::TensorError::Contract(e.to_string()))
    })
    .unwrap();
    assert!(max_rel_error(&probes) < TOL, "{probes:?}");
}

#[test]
fn every_parameter_receives_gradient_and_text_does_not() {
    let (model, z0, cond, null, draw, schedule) = loss_setup(43);
    model.zero_grad();
    let loss = loss_for_draw(&model, &schedule, &z0, &cond, Some(&null), &draw).unwrap();
    loss.backward().unwrap();
    for (name, p) in model.named_params() {
        let g = p.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.iter().any(|&v| v != 0.0), "{name} gradient is identically zero");
    }
    assert!(!cond.text.requires_grad());
    assert!(cond.text.grad().is_none());
}
