//! Reshaping, axis permutation, concatenation, gathering, and nearest-neighbor
//! resizing.

use crate::error::{dim_err, Result};
use crate::tensor::{numel_of, Tensor};

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape(), shape));
        }
        Tensor::from_op(self.to_vec(), shape.to_vec(), vec![self.clone()], Box::new(|g| vec![Some(g.to_vec())]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(dim_err!("transpose_last2 needs rank >= 2, got {:?}", s));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.numel() / (r * c).max(1);
        let transpose = move |src: &[f64], rows: usize, cols: usize| {
            let mut dst = vec![0.0; src.len()];
            for b in 0..batch {
                let (sb, db) = (&src[b * rows * cols..], &mut dst[b * rows * cols..(b + 1) * rows * cols]);
                for i in 0..rows {
                    for j in 0..cols {
                        db[j * rows + i] = sb[i * cols + j];
                    }
                }
            }
            dst
        };
        let data = transpose(&self.data(), r, c);
        let mut shape = s.to_vec();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Tensor::from_op(data, shape, vec![self.clone()], Box::new(move |g| vec![Some(transpose(g, c, r))]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(dim_err!("concat axis {} out of range for rank {}", axis, rank));
        }
        for p in parts {
            let ok = p.rank() == rank && (0..rank).all(|a| a == axis || p.dim(a) == first.dim(a));
            if !ok {
                return Err(dim_err!("concat shape {:?} incompatible with {:?}", p.shape(), first.shape()));
            }
        }
        let (outer, inner) = outer_inner(first.shape(), axis);
        let widths: Vec<usize> = parts.iter().map(|p| p.dim(axis) * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        {
            let views: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (v, &wdt) in views.iter().zip(&widths) {
                    data.extend_from_slice(&v[o * wdt..(o + 1) * wdt]);
                }
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.dim(axis)).sum();
        let keep: Vec<bool> = parts.iter().map(Tensor::requires_grad).collect();
        Tensor::from_op(
            data,
            shape,
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads: Vec<Option<Vec<f64>>> =
                    widths.iter().zip(&keep).map(|(w, k)| k.then(|| Vec::with_capacity(outer * w))).collect();
                for o in 0..outer {
                    let mut off = o * total;
                    for (gp, &wdt) in grads.iter_mut().zip(&widths) {
                        if let Some(gp) = gp {
                            gp.extend_from_slice(&g[off..off + wdt]);
                        }
                        off += wdt;
                    }
                }
                grads
            }),
        )
    }

    /// `out[.., k, ..] = self[.., indices[k], ..]` along `axis`.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(dim_err!("index_select axis {} out of range for {:?}", axis, self.shape()));
        }
        let n = self.dim(axis);
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(dim_err!("index {} out of range for axis of extent {}", bad, n));
        }
        let (outer, inner) = outer_inner(self.shape(), axis);
        let m = indices.len();
        let mut data = Vec::with_capacity(outer * m * inner);
        {
            let src = self.data();
            for o in 0..outer {
                for &i in indices {
                    let start = (o * n + i) * inner;
                    data.extend_from_slice(&src[start..start + inner]);
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = m;
        let idx = indices.to_vec();
        let numel = self.numel();
        Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; numel];
                for o in 0..outer {
                    for (k, &i) in idx.iter().enumerate() {
                        let src = &g[(o * m + k) * inner..(o * m + k + 1) * inner];
                        let dst = &mut gx[(o * n + i) * inner..(o * n + i + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Nearest-neighbor resize of the last two axes to `h`×`w`. Output cell
    /// `(i, j)` reads input cell `(floor(i·H/h), floor(j·W/w))`.
    pub fn nearest_resize(&self, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(dim_err!("nearest_resize needs rank >= 2, got {:?}", s));
        }
        if h == 0 || w == 0 {
            return Err(dim_err!("nearest_resize target {}x{} must be positive", h, w));
        }
        let (ih, iw) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = self.numel() / (ih * iw).max(1);
        let map: Vec<usize> = (0..h * w).map(|o| (o / w * ih / h) * iw + (o % w) * iw / w).collect();
        let mut data = Vec::with_capacity(planes * h * w);
        {
            let src = self.data();
            for p in 0..planes {
                let plane = &src[p * ih * iw..(p + 1) * ih * iw];
                data.extend(map.iter().map(|&i| plane[i]));
            }
        }
        let mut shape = s.to_vec();
        let n = shape.len();
        shape[n - 2] = h;
        shape[n - 1] = w;
        let numel = self.numel();
        Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; numel];
                for p in 0..planes {
                    for (o, &i) in map.iter().enumerate() {
                        gx[p * ih * iw + i] += g[p * h * w + o];
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
    fn resize_constant() {
        let x = Tensor::full(&[2, 5, 7], 0.75);
        let y = x.nearest_resize(3, 11).unwrap();
        assert_eq!(y.shape(), &[2, 3, 11]);
        assert!(y.to_vec().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn resize_block_pattern() {
        let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
        #[rustfmt::skip]
        let x = Tensor::new(vec![
            a, a, b, b,
            a, a, b, b,
            c, c, d, d,
            c, c, d, d,
        ], &[4, 4]).unwrap();
        assert_eq!(x.nearest_resize(2, 2).unwrap().to_vec(), vec![a, b, c, d]);
    }

    #[test]
    fn resize_rejects_zero_extent() {
        assert!(Tensor::zeros(&[2, 2]).nearest_resize(0, 2).is_err());
    }

    #[test]
    fn transpose_and_back() {
        let x = Tensor::new((0..24).map(f64::from).collect(), &[2, 3, 4]).unwrap();
        let t = x.transpose_last2().unwrap();
        assert_eq!(t.shape(), &[2, 4, 3]);
        assert_eq!(t.data()[3], 1.0);
        assert_eq!(t.transpose_last2().unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn concat_channels() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 1, 2]).unwrap();
        let b = Tensor::new(vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0], &[2, 2, 2]).unwrap();
        let c = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
    }

    #[test]
    fn index_select_duplicates_accumulate_grad() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        let y = x.index_select(1, &[2, 2, 0]).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 3.0, 1.0]);
        y.sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 2.0]);
    }
}
