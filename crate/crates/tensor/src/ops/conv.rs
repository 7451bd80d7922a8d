//! 2-D convolution lowered to im2col + GEMM.

use crate::error::{dim_err, Result};
use crate::ops::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

// cols[(c,ki,kj), (oi,oj)] = x[c, oi*s+ki-p, oj*s+kj-p], zero outside
fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let dst = &mut cols[row..row + p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, dx: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let src = &cols[row..row + p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            line[jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Cross-correlation of `[B,Cin,H,W]` with `kernel: [Cout,Cin,kh,kw]`,
    /// symmetric zero padding, optional per-output-channel bias.
    pub fn conv2d(&self, kernel: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(dim_err!("conv2d expects rank-4 input and kernel, got {:?} and {:?}", xs, ks));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d stride must be positive"));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin {
            return Err(dim_err!("conv2d input has {} channels, kernel expects {}", cin, kcin));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(dim_err!("conv2d kernel {}x{} larger than padded input {}x{}", kh, kw, h, w));
        }
        if let Some(bias) = bias {
            if bias.shape() != [cout] {
                return Err(dim_err!("conv2d bias shape {:?}, expected [{}]", bias.shape(), cout));
            }
        }
        let g = Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let (k, p) = (g.patch(), g.positions());
        let in_sz = cin * h * w;
        let mut out = vec![0.0; b * cout * p];
        let mut cols = vec![0.0; k * p];
        {
            let (xv, kv) = (self.data(), kernel.data());
            for bi in 0..b {
                im2col(&xv[bi * in_sz..(bi + 1) * in_sz], &g, &mut cols);
                let ob = &mut out[bi * cout * p..(bi + 1) * cout * p];
                gemm(MatRef::new(&kv, cout, k), MatRef::new(&cols, k, p), ob, 0.0);
                if let Some(bias) = bias {
                    let bv = bias.data();
                    for (co, row) in ob.chunks_mut(p).enumerate() {
                        row.iter_mut().for_each(|v| *v += bv[co]);
                    }
                }
            }
        }

        let x = self.clone();
        let kernel_t = kernel.clone();
        let bias_t = bias.cloned();
        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(bias) = bias {
            parents.push(bias.clone());
        }
        Tensor::from_op(
            out,
            vec![b, cout, g.oh, g.ow],
            parents,
            Box::new(move |grad| {
                let (xv, kv) = (x.data(), kernel_t.data());
                let need_x = x.requires_grad();
                let need_k = kernel_t.requires_grad();
                let mut gx = need_x.then(|| vec![0.0; xv.len()]);
                let mut gk = need_k.then(|| vec![0.0; kv.len()]);
                let mut cols = vec![0.0; k * p];
                let mut dcols = vec![0.0; k * p];
                for bi in 0..b {
                    let gb = &grad[bi * cout * p..(bi + 1) * cout * p];
                    if let Some(gk) = gk.as_mut() {
                        im2col(&xv[bi * in_sz..(bi + 1) * in_sz], &g, &mut cols);
                        gemm(MatRef::new(gb, cout, p), MatRef::new(&cols, k, p).t(), gk, 1.0);
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(MatRef::new(&kv, cout, k).t(), MatRef::new(gb, cout, p), &mut dcols, 0.0);
                        col2im(&dcols, &g, &mut gx[bi * in_sz..(bi + 1) * in_sz]);
                    }
                }
                let mut grads = vec![gx, gk];
                if let Some(bias) = &bias_t {
                    let gbias = bias.requires_grad().then(|| {
                        let mut gbias = vec![0.0; cout];
                        for bi in 0..b {
                            for (co, acc) in gbias.iter_mut().enumerate() {
                                let row = &grad[(bi * cout + co) * p..(bi * cout + co + 1) * p];
                                *acc += row.iter().sum::<f64>();
                            }
                        }
                        gbias
                    });
                    grads.push(gbias);
                }
                grads
            }),
        )
    }
}
