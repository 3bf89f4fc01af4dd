//! Elementwise, reduction and layout operations.

use super::{numel, shape_err, Real, Result, Tensor};

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn map<T: Real>(x: &[T], f: impl Fn(T) -> T) -> Vec<T> {
    x.iter().map(|&v| f(v)).collect()
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Maps each element of `out_shape` to its source index in `in_shape`,
/// where each input dim is either 1 or equal to the output dim.
fn broadcast_index(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        in_strides[d] = if in_shape[d] == 1 { 0 } else { s };
        s *= in_shape[d];
    }
    let total = numel(out_shape);
    let mut idx = vec![0usize; total];
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for slot in idx.iter_mut() {
        *slot = src;
        for d in (0..rank).rev() {
            counter[d] += 1;
            src += in_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= in_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

impl<T: Real> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = zip_map(self.data(), other.data(), |a, b| a + b);
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |g, _| vec![Some(g.to_vec()), Some(g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data = zip_map(self.data(), other.data(), |a, b| a - b);
        Ok(Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |g, _| vec![Some(g.to_vec()), Some(map(g, |v| -v))],
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data = zip_map(self.data(), other.data(), |a, b| a * b);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g, _| {
                let ga = a.requires_grad().then(|| zip_map(g, b.data(), |g, y| g * y));
                let gb = b.requires_grad().then(|| zip_map(g, a.data(), |g, x| g * x));
                vec![ga, gb]
            },
        ))
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("div", self, other)?;
        let data = zip_map(self.data(), other.data(), |a, b| a / b);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "div",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g, out| {
                let ga = a.requires_grad().then(|| zip_map(g, b.data(), |g, y| g / y));
                let gb = b.requires_grad().then(|| {
                    g.iter()
                        .zip(out)
                        .zip(b.data())
                        .map(|((&g, &q), &y)| -g * q / y)
                        .collect()
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            map(self.data(), |v| v * c),
            vec![self.clone()],
            move |g, _| vec![Some(map(g, |v| v * c))],
        )
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            map(self.data(), |v| v + c),
            vec![self.clone()],
            |g, _| vec![Some(g.to_vec())],
        )
    }

    pub fn square(&self) -> Tensor<T> {
        let x = self.clone();
        Tensor::from_op(
            "square",
            self.shape().to_vec(),
            map(self.data(), |v| v * v),
            vec![self.clone()],
            move |g, _| vec![Some(zip_map(g, x.data(), |g, v| T::of(2.0) * g * v))],
        )
    }

    /// `sqrt(x + eps)`; `eps` keeps the derivative finite at zero.
    pub fn sqrt_eps(&self, eps: T) -> Tensor<T> {
        Tensor::from_op(
            "sqrt",
            self.shape().to_vec(),
            map(self.data(), |v| (v + eps).sqrt()),
            vec![self.clone()],
            |g, out| vec![Some(zip_map(g, out, |g, s| g * T::of(0.5) / s))],
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![1], vec![s], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::of(self.numel() as f64);
        self.sum().scale(T::one() / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return shape_err("reshape", format!("{:?} -> {:?}", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    /// Repeats singleton dims to `shape` (same rank required).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let ins = self.shape();
        if ins.len() != shape.len() || ins.iter().zip(shape).any(|(&i, &o)| i != 1 && i != o) {
            return shape_err("broadcast_to", format!("{ins:?} -> {shape:?}"));
        }
        if ins == shape {
            return Ok(self.clone());
        }
        let idx = broadcast_index(ins, shape);
        let src = self.data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let n_in = self.numel();
        Ok(Tensor::from_op(
            "broadcast_to",
            shape.to_vec(),
            data,
            vec![self.clone()],
            move |g, _| {
                let mut gi = vec![T::zero(); n_in];
                for (&i, &gv) in idx.iter().zip(g) {
                    gi[i] += gv;
                }
                vec![Some(gi)]
            },
        ))
    }

    /// Sums over the leading axis keeping it as size 1.
    pub fn sum_dim0(&self) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.is_empty() {
            return shape_err("sum_dim0", "rank 0");
        }
        let n0 = shape[0];
        let inner = self.numel() / n0.max(1);
        let mut out = vec![T::zero(); inner];
        for chunk in self.data().chunks(inner) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        let mut oshape = shape.to_vec();
        oshape[0] = 1;
        Ok(Tensor::from_op("sum_dim0", oshape, out, vec![self.clone()], move |g, _| {
            let mut gi = Vec::with_capacity(n0 * inner);
            for _ in 0..n0 {
                gi.extend_from_slice(g);
            }
            vec![Some(gi)]
        }))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return shape_err("concat", "no inputs");
        }
        let s0 = parts[0].shape();
        if s0.len() != 4 {
            return shape_err("concat", format!("expected NCHW, got {s0:?}"));
        }
        let (n, h, w) = (s0[0], s0[2], s0[3]);
        for p in parts {
            let s = p.shape();
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return shape_err("concat", format!("{s0:?} vs {s:?}"));
            }
        }
        let chans: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        let c_total: usize = chans.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c_total * plane);
        for b in 0..n {
            for (p, &c) in parts.iter().zip(&chans) {
                data.extend_from_slice(&p.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        Ok(Tensor::from_op(
            "concat",
            vec![n, c_total, h, w],
            data,
            parts.to_vec(),
            move |g, _| {
                let mut grads: Vec<Vec<T>> = chans.iter().map(|&c| Vec::with_capacity(n * c * plane)).collect();
                for b in 0..n {
                    let mut off = b * c_total * plane;
                    for (gp, &c) in grads.iter_mut().zip(&chans) {
                        gp.extend_from_slice(&g[off..off + c * plane]);
                        off += c * plane;
                    }
                }
                grads.into_iter().map(Some).collect()
            },
        ))
    }

    /// Zero-pads the last two axes.
    pub fn pad2d(&self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() < 2 {
            return shape_err("pad2d", format!("rank {} < 2", s.len()));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if top + bottom + left + right == 0 {
            return Ok(self.clone());
        }
        let (oh, ow) = (h + top + bottom, w + left + right);
        let lead = self.numel() / (h * w).max(1);
        let mut data = vec![T::zero(); lead * oh * ow];
        for l in 0..lead {
            for y in 0..h {
                let src = &self.data()[l * h * w + y * w..l * h * w + (y + 1) * w];
                let dst = l * oh * ow + (y + top) * ow + left;
                data[dst..dst + w].copy_from_slice(src);
            }
        }
        let mut oshape = s.to_vec();
        let r = oshape.len();
        oshape[r - 2] = oh;
        oshape[r - 1] = ow;
        Ok(Tensor::from_op("pad2d", oshape, data, vec![self.clone()], move |g, _| {
            let mut gi = Vec::with_capacity(lead * h * w);
            for l in 0..lead {
                for y in 0..h {
                    let off = l * oh * ow + (y + top) * ow + left;
                    gi.extend_from_slice(&g[off..off + w]);
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Crops the last two axes to `[top..top+h, left..left+w]`.
    pub fn crop2d(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() < 2 {
            return shape_err("crop2d", format!("rank {} < 2", s.len()));
        }
        let (ih, iw) = (s[s.len() - 2], s[s.len() - 1]);
        if top + h > ih || left + w > iw {
            return shape_err("crop2d", format!("window {h}x{w} at ({top},{left}) exceeds {ih}x{iw}"));
        }
        if h == ih && w == iw {
            return Ok(self.clone());
        }
        let lead = self.numel() / (ih * iw).max(1);
        let mut data = Vec::with_capacity(lead * h * w);
        for l in 0..lead {
            for y in 0..h {
                let off = l * ih * iw + (y + top) * iw + left;
                data.extend_from_slice(&self.data()[off..off + w]);
            }
        }
        let mut oshape = s.to_vec();
        let r = oshape.len();
        oshape[r - 2] = h;
        oshape[r - 1] = w;
        Ok(Tensor::from_op("crop2d", oshape, data, vec![self.clone()], move |g, _| {
            let mut gi = vec![T::zero(); lead * ih * iw];
            for l in 0..lead {
                for y in 0..h {
                    let off = l * ih * iw + (y + top) * iw + left;
                    gi[off..off + w].copy_from_slice(&g[(l * h + y) * w..(l * h + y + 1) * w]);
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Divides by the L2 norm of each row of a `[N, D]` tensor. Errors on an
    /// all-zero row.
    pub fn l2_normalize_rows(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return shape_err("l2_normalize", format!("expected [N, D], got {s:?}"));
        }
        let d = s[1];
        for row in self.data().chunks(d) {
            if row.iter().all(|v| v.is_zero()) {
                return Err(super::AutodiffError::InvalidValue {
                    op: "l2_normalize",
                    detail: "zero vector cannot be normalized".into(),
                });
            }
        }
        let norms: Vec<T> = self
            .data()
            .chunks(d)
            .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let data: Vec<T> = self
            .data()
            .chunks(d)
            .zip(&norms)
            .flat_map(|(row, &n)| row.iter().map(move |&v| v / n))
            .collect();
        Ok(Tensor::from_op(
            "l2_normalize",
            s.to_vec(),
            data,
            vec![self.clone()],
            move |g, out| {
                // d(x/|x|) = (g - y (y·g)) / |x|
                let mut gi = Vec::with_capacity(g.len());
                for ((gr, yr), &n) in g.chunks(d).zip(out.chunks(d)).zip(&norms) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    gi.extend(gr.iter().zip(yr).map(|(&gv, &yv)| (gv - yv * dot) / n));
                }
                vec![Some(gi)]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_index_matches_manual() {
        let idx = broadcast_index(&[2, 1, 3], &[2, 2, 3]);
        assert_eq!(idx, vec![0, 1, 2, 0, 1, 2, 3, 4, 5, 3, 4, 5]);
        let idx = broadcast_index(&[1, 2, 1], &[2, 2, 2]);
        assert_eq!(idx, vec![0, 0, 1, 1, 0, 0, 1, 1]);
    }

    #[test]
    fn sum_of_x_has_unit_gradient() {
        let x = Tensor::<f64>::var(vec![1.0, -2.0, 3.5], &[3]).unwrap();
        let g = x.sum().backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let x = Tensor::<f64>::var(vec![1.0, -2.0, 3.5], &[3]).unwrap();
        let g = x.square().sum().backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let x = Tensor::<f64>::from_f64(&(0..12).map(|v| v as f64).collect::<Vec<_>>(), &[1, 3, 4]).unwrap();
        let y = x.pad2d(1, 2, 0, 3).unwrap().crop2d(1, 0, 3, 4).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn backward_rejects_bad_losses() {
        let x = Tensor::<f64>::var(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.square().backward(), Err(crate::autodiff::AutodiffError::NonScalarLoss(_))));
        let c = Tensor::<f64>::new(vec![1.0], &[1]).unwrap();
        assert!(matches!(c.backward(), Err(crate::autodiff::AutodiffError::Detached)));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x * x) written with the same node twice.
        let x = Tensor::<f64>::var(vec![3.0], &[1]).unwrap();
        let g = x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap(), &[6.0]);
    }

    #[test]
    fn no_grad_does_not_record() {
        let x = Tensor::<f64>::var(vec![3.0], &[1]).unwrap();
        let y = crate::autodiff::no_grad(|| x.square());
        assert!(!y.requires_grad());
        assert!(crate::autodiff::grad_enabled());
    }
}
