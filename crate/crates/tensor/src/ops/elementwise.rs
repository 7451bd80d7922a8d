//! Pointwise arithmetic with numpy-style broadcasting, activations, and
//! reductions.

use crate::error::{dim_err, Result};
use crate::tensor::{numel_of, Tensor};

/// Result shape of broadcasting `a` against `b`, aligned at the trailing axis.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err!("cannot broadcast {:?} with {:?}", a, b)),
        };
    }
    Ok(out)
}

/// For every element of `out_shape` (row-major), the flat offset into an
/// input of shape `in_shape` broadcast to it.
fn broadcast_offsets(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        strides[i + pad] = if in_shape[i] == 1 { 0 } else { acc };
        acc *= in_shape[i];
    }
    let n = numel_of(out_shape);
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

fn reduce_to(grad: &[f64], offsets: &[usize], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (g, &o) in grad.iter().zip(offsets) {
        out[o] += g;
    }
    out
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

fn binary(a: &Tensor, b: &Tensor, op: BinOp) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let (av, bv) = (a.data(), b.data());
        let data: Vec<f64> = match op {
            BinOp::Add => av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect(),
            BinOp::Sub => av.iter().zip(bv.iter()).map(|(x, y)| x - y).collect(),
            BinOp::Mul => av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect(),
        };
        let (ac, bc) = (a.clone(), b.clone());
        return Tensor::from_op(
            data,
            a.shape().to_vec(),
            vec![a.clone(), b.clone()],
            Box::new(move |g| match op {
                BinOp::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
                BinOp::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
                BinOp::Mul => {
                    let ga = if ac.requires_grad() {
                        Some(g.iter().zip(bc.data().iter()).map(|(g, y)| g * y).collect())
                    } else {
                        None
                    };
                    let gb = if bc.requires_grad() {
                        Some(g.iter().zip(ac.data().iter()).map(|(g, x)| g * x).collect())
                    } else {
                        None
                    };
                    vec![ga, gb]
                }
            }),
        );
    }

    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let oa = broadcast_offsets(a.shape(), &out_shape);
    let ob = broadcast_offsets(b.shape(), &out_shape);
    let data: Vec<f64> = {
        let (av, bv) = (a.data(), b.data());
        oa.iter()
            .zip(&ob)
            .map(|(&i, &j)| match op {
                BinOp::Add => av[i] + bv[j],
                BinOp::Sub => av[i] - bv[j],
                BinOp::Mul => av[i] * bv[j],
            })
            .collect()
    };
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        data,
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ga = ac.requires_grad().then(|| match op {
                BinOp::Add | BinOp::Sub => reduce_to(g, &oa, ac.numel()),
                BinOp::Mul => {
                    let bv = bc.data();
                    let scaled: Vec<f64> = g.iter().zip(&ob).map(|(g, &j)| g * bv[j]).collect();
                    reduce_to(&scaled, &oa, ac.numel())
                }
            });
            let gb = bc.requires_grad().then(|| match op {
                BinOp::Add => reduce_to(g, &ob, bc.numel()),
                BinOp::Sub => {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    reduce_to(&neg, &ob, bc.numel())
                }
                BinOp::Mul => {
                    let av = ac.data();
                    let scaled: Vec<f64> = g.iter().zip(&oa).map(|(g, &i)| g * av[i]).collect();
                    reduce_to(&scaled, &ob, bc.numel())
                }
            });
            vec![ga, gb]
        }),
    )
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Mul)
    }

    pub fn scale(&self, k: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * k).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|v| v * k).collect())]),
        )
    }

    pub fn add_scalar(&self, k: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v + k).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], Box::new(|g| vec![Some(g.to_vec())]))
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    /// x * sigmoid(x)
    pub fn silu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| x / (1.0 + (-x).exp())).collect();
        let input = self.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let xs = input.data();
                let gx = g
                    .iter()
                    .zip(xs.iter())
                    .map(|(g, &x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![], vec![self.clone()], Box::new(move |g| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(dim_err!("mean of an empty tensor"));
        }
        let s = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op(
            vec![s],
            vec![],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0] / n as f64; n])]),
        )
    }
}
