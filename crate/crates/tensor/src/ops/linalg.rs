use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Strided view of a row-major matrix, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a·b + beta·c` for row-major `c` of shape m×n.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], beta: f64) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "gemm inner extents");
    assert_eq!(c.len(), m * n, "gemm output size");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: extents and strides above describe in-bounds row-major views of
    // the given slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// Matrix product over the last two axes.
    ///
    /// Accepted forms: `[m,k]·[k,n]`, `[..,m,k]·[..,k,n]` with identical
    /// leading axes, and `[..,m,k]·[k,n]` where the right operand is shared
    /// across the batch (a linear layer).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(dim_err!("matmul needs rank >= 2, got {:?} and {:?}", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(dim_err!("matmul inner extents differ: {:?} x {:?}", sa, sb));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_rhs = lead_b.is_empty();
        if !shared_rhs && lead_a != lead_b {
            return Err(dim_err!("matmul batch axes differ: {:?} x {:?}", sa, sb));
        }
        let batch: usize = lead_a.iter().product();
        let mut out_shape = lead_a.to_vec();
        out_shape.extend([m, n]);

        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.data(), other.data());
            if shared_rhs {
                // fold the batch into rows: [batch*m, k]·[k, n]
                gemm(MatRef::new(&av, batch * m, k), MatRef::new(&bv, k, n), &mut out, 0.0);
            } else {
                for bi in 0..batch {
                    gemm(
                        MatRef::new(&av[bi * m * k..(bi + 1) * m * k], m, k),
                        MatRef::new(&bv[bi * k * n..(bi + 1) * k * n], k, n),
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        0.0,
                    );
                }
            }
        }

        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            out,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let (av, bv) = (a.data(), b.data());
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![0.0; av.len()];
                    if shared_rhs {
                        gemm(MatRef::new(g, batch * m, n), MatRef::new(&bv, k, n).t(), &mut ga, 0.0);
                    } else {
                        for bi in 0..batch {
                            gemm(
                                MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n),
                                MatRef::new(&bv[bi * k * n..(bi + 1) * k * n], k, n).t(),
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                0.0,
                            );
                        }
                    }
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![0.0; bv.len()];
                    if shared_rhs {
                        gemm(MatRef::new(&av, batch * m, k).t(), MatRef::new(g, batch * m, n), &mut gb, 0.0);
                    } else {
                        for bi in 0..batch {
                            gemm(
                                MatRef::new(&av[bi * m * k..(bi + 1) * m * k], m, k).t(),
                                MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n),
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                0.0,
                            );
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        )
    }
}
