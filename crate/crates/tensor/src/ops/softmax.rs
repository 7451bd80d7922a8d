use crate::error::{dim_err, Result, TensorError};
use crate::tensor::Tensor;

impl Tensor {
    /// Softmax over the last axis.
    ///
    /// Entries equal to `-inf` receive exactly zero weight and zero gradient.
    /// The row maximum is taken over finite entries only; a row with no
    /// finite entry is rejected with [`TensorError::MaskedRow`], and a row
    /// holding NaN or `+inf` with [`TensorError::Divergence`].
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let Some(&n) = self.shape().last() else {
            return Err(dim_err!("softmax of a scalar"));
        };
        if n == 0 {
            return Err(dim_err!("softmax over an empty axis"));
        }
        let rows = self.numel() / n;
        let mut out = vec![0.0; self.numel()];
        {
            let x = self.data();
            for r in 0..rows {
                let xr = &x[r * n..(r + 1) * n];
                if xr.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                    return Err(TensorError::Divergence(format!("softmax row {r} holds NaN or +inf")));
                }
                let max = xr.iter().copied().filter(|v| *v > f64::NEG_INFINITY).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(TensorError::MaskedRow { row: r });
                }
                let yr = &mut out[r * n..(r + 1) * n];
                let mut sum = 0.0;
                for (y, &v) in yr.iter_mut().zip(xr) {
                    *y = if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() };
                    sum += *y;
                }
                let inv = 1.0 / sum;
                yr.iter_mut().for_each(|y| *y *= inv);
            }
        }
        let y = out.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; y.len()];
                for r in 0..rows {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dx, &yv), &gv) in gx[r * n..(r + 1) * n].iter_mut().zip(yr).zip(gr) {
                        *dx = yv * (gv - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_pair() {
        let y = Tensor::new(vec![0.0, 0.0], &[2]).unwrap().softmax_lastdim().unwrap();
        assert_eq!(y.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn neg_inf_is_annihilated() {
        for x in [-50.0, 0.0, 3.25, 700.0] {
            let y = Tensor::new(vec![x, f64::NEG_INFINITY], &[1, 2]).unwrap().softmax_lastdim().unwrap();
            assert_eq!(y.to_vec(), vec![1.0, 0.0]);
        }
    }

    #[test]
    fn fully_masked_row_errors() {
        let x = Tensor::new(vec![0.0, 1.0, f64::NEG_INFINITY, f64::NEG_INFINITY], &[2, 2]).unwrap();
        assert_eq!(x.softmax_lastdim().unwrap_err(), TensorError::MaskedRow { row: 1 });
    }

    #[test]
    fn non_finite_scores_are_divergence() {
        for bad in [f64::NAN, f64::INFINITY] {
            let x = Tensor::new(vec![0.0, bad], &[1, 2]).unwrap();
            assert!(matches!(x.softmax_lastdim().unwrap_err(), TensorError::Divergence(_)));
        }
    }

    #[test]
    fn one_two_three() {
        // exp(k-3)/sum evaluated with a high-precision calculator
        let expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        let y = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap().softmax_lastdim().unwrap();
        for (a, b) in y.to_vec().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn masked_entries_receive_no_gradient() {
        let x = Tensor::param(vec![0.3, f64::NEG_INFINITY, -1.0], &[3]).unwrap();
        let w = Tensor::new(vec![1.0, 5.0, -2.0], &[3]).unwrap();
        x.softmax_lastdim().unwrap().mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g[1], 0.0);
        assert!(g.iter().all(|v| v.is_finite()));
    }
}
