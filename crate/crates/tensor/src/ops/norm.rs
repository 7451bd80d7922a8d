use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;

/// Normalizes consecutive chunks of `chunk` values to zero mean and unit
/// variance, then applies an affine map whose parameter index for flat
/// element `i` is `(i / repeat) % period`.
fn chunk_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, chunk: usize, period: usize, repeat: usize) -> Result<Tensor> {
    let n = x.numel();
    let chunks = n / chunk;
    let mut xhat = vec![0.0; n];
    let mut inv_std = vec![0.0; chunks];
    {
        let xv = x.data();
        for c in 0..chunks {
            let xs = &xv[c * chunk..(c + 1) * chunk];
            let mean = xs.iter().sum::<f64>() / chunk as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / chunk as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[c] = is;
            for (h, v) in xhat[c * chunk..(c + 1) * chunk].iter_mut().zip(xs) {
                *h = (v - mean) * is;
            }
        }
    }
    let out: Vec<f64> = {
        let (gv, bv) = (gain.data(), bias.data());
        xhat.iter().enumerate().map(|(i, h)| h * gv[(i / repeat) % period] + bv[(i / repeat) % period]).collect()
    };
    let (xt, gt, bt) = (x.clone(), gain.clone(), bias.clone());
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |g| {
            let gx = xt.requires_grad().then(|| {
                let gv = gt.data();
                let mut gx = vec![0.0; n];
                for (c, &istd) in inv_std.iter().enumerate() {
                    let range = c * chunk..(c + 1) * chunk;
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for i in range.clone() {
                        let d = g[i] * gv[(i / repeat) % period];
                        sum_d += d;
                        sum_dh += d * xhat[i];
                    }
                    let m = chunk as f64;
                    for i in range {
                        let d = g[i] * gv[(i / repeat) % period];
                        gx[i] = istd / m * (m * d - sum_d - xhat[i] * sum_dh);
                    }
                }
                gx
            });
            let ggain = gt.requires_grad().then(|| {
                let mut acc = vec![0.0; period];
                for i in 0..n {
                    acc[(i / repeat) % period] += g[i] * xhat[i];
                }
                acc
            });
            let gbias = bt.requires_grad().then(|| {
                let mut acc = vec![0.0; period];
                for i in 0..n {
                    acc[(i / repeat) % period] += g[i];
                }
                acc
            });
            vec![gx, ggain, gbias]
        }),
    )
}

impl Tensor {
    /// Normalization over the last axis with elementwise gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let Some(&d) = self.shape().last() else {
            return Err(dim_err!("layer_norm of a scalar"));
        };
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(dim_err!(
                "layer_norm affine shapes {:?}/{:?}, expected [{}]",
                gain.shape(),
                bias.shape(),
                d
            ));
        }
        if d == 0 {
            return Err(dim_err!("layer_norm over an empty axis"));
        }
        chunk_norm(self, gain, bias, d, d, 1)
    }

    /// Group normalization of `[B,C,H,W]` with per-channel gain and bias.
    pub fn group_norm(&self, groups: usize, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(dim_err!("group_norm expects [B,C,H,W], got {:?}", s));
        }
        let (c, hw) = (s[1], s[2] * s[3]);
        if groups == 0 || c % groups != 0 {
            return Err(dim_err!("{} channels not divisible into {} groups", c, groups));
        }
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(dim_err!("group_norm affine shapes {:?}/{:?}, expected [{}]", gain.shape(), bias.shape(), c));
        }
        chunk_norm(self, gain, bias, c / groups * hw, c, hw)
    }
}
