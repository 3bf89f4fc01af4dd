//! Complex-valued operations on real-packed tensors.
//!
//! A complex stack of `B` planes is stored as a real tensor of shape
//! `[B, 2, H, W]`: channel 0 holds the real part, channel 1 the imaginary
//! part. Gradients follow the real-packed convention, so for a real loss the
//! gradient of a complex input `z` is `∂L/∂Re z + i ∂L/∂Im z`.

use num_complex::Complex;

use super::{shape_err, Real, Result, Tensor};
use crate::fourier;

fn complex_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 || shape[1] != 2 {
        return shape_err(op, format!("expected a [B, 2, H, W] complex stack, got {shape:?}"));
    }
    Ok((shape[0], shape[2], shape[3]))
}

/// Real-packed `[B, 2, H, W]` data to contiguous complex planes.
pub(crate) fn unpack<T: Real>(data: &[T], b: usize, plane: usize) -> Vec<Complex<T>> {
    let mut out = Vec::with_capacity(b * plane);
    for bi in 0..b {
        let re = &data[(2 * bi) * plane..(2 * bi + 1) * plane];
        let im = &data[(2 * bi + 1) * plane..(2 * bi + 2) * plane];
        out.extend(re.iter().zip(im).map(|(&r, &i)| Complex::new(r, i)));
    }
    out
}

pub(crate) fn pack<T: Real>(z: &[Complex<T>], plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); 2 * z.len()];
    for (bi, zp) in z.chunks(plane).enumerate() {
        let (re, rest) = out[2 * bi * plane..(2 * bi + 2) * plane].split_at_mut(plane);
        for ((r, i), v) in re.iter_mut().zip(rest.iter_mut()).zip(zp) {
            *r = v.re;
            *i = v.im;
        }
    }
    out
}

fn transform<T: Real>(data: &[T], b: usize, h: usize, w: usize, inverse: bool) -> Vec<T> {
    let mut z = unpack(data, b, h * w);
    fourier::fft2c_inplace(&mut z, h, w, inverse);
    pack(&z, h * w)
}

impl<T: Real> Tensor<T> {
    /// Centered orthonormal 2-D FFT of every plane of a complex stack.
    pub fn fft2c(&self) -> Result<Tensor<T>> {
        self.fourier("fft2c", false)
    }

    /// Inverse of [`Tensor::fft2c`].
    pub fn ifft2c(&self) -> Result<Tensor<T>> {
        self.fourier("ifft2c", true)
    }

    fn fourier(&self, op: &'static str, inverse: bool) -> Result<Tensor<T>> {
        let (b, h, w) = complex_dims(op, self.shape())?;
        let data = transform(self.data(), b, h, w, inverse);
        // The transform is unitary, so its adjoint is the opposite transform.
        Ok(Tensor::from_op(op, self.shape().to_vec(), data, vec![self.clone()], move |g, _| {
            vec![Some(transform(g, b, h, w, !inverse))]
        }))
    }

    /// Elementwise complex product `self · other` (or `self · conj(other)`).
    pub fn cmul(&self, other: &Tensor<T>, conj_other: bool) -> Result<Tensor<T>> {
        let (b, h, w) = complex_dims("cmul", self.shape())?;
        if other.shape() != self.shape() {
            return shape_err("cmul", format!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        let plane = h * w;
        let za = unpack(self.data(), b, plane);
        let zb = unpack(other.data(), b, plane);
        let prod: Vec<Complex<T>> = za
            .iter()
            .zip(&zb)
            .map(|(a, o)| if conj_other { a * o.conj() } else { a * o })
            .collect();
        let (ta, tb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "cmul",
            self.shape().to_vec(),
            pack(&prod, plane),
            vec![self.clone(), other.clone()],
            move |g, _| {
                let gz = unpack(g, b, plane);
                let da = ta.requires_grad().then(|| {
                    let zb = unpack(tb.data(), b, plane);
                    let d: Vec<_> = gz
                        .iter()
                        .zip(&zb)
                        .map(|(g, o)| if conj_other { g * o } else { g * o.conj() })
                        .collect();
                    pack(&d, plane)
                });
                let db = tb.requires_grad().then(|| {
                    let za = unpack(ta.data(), b, plane);
                    let d: Vec<_> = gz
                        .iter()
                        .zip(&za)
                        .map(|(g, a)| if conj_other { g.conj() * a } else { g * a.conj() })
                        .collect();
                    pack(&d, plane)
                });
                vec![da, db]
            },
        ))
    }

    /// Root-sum-of-squares over coils and real/imaginary channels:
    /// `[B, 2, H, W] -> [1, 1, H, W]`, `sqrt(Σ|z|² + eps)`.
    pub fn sos(&self, eps: T) -> Result<Tensor<T>> {
        let (b, h, w) = complex_dims("sos", self.shape())?;
        let plane = h * w;
        let mut acc = vec![eps; plane];
        for ch in self.data().chunks(plane) {
            for (a, &v) in acc.iter_mut().zip(ch) {
                *a += v * v;
            }
        }
        let data: Vec<T> = acc.into_iter().map(|v| v.sqrt()).collect();
        let x = self.clone();
        Ok(Tensor::from_op("sos", vec![1, 1, h, w], data, vec![self.clone()], move |g, s| {
            let mut gi = Vec::with_capacity(2 * b * plane);
            for ch in x.data().chunks(plane) {
                gi.extend(ch.iter().zip(g).zip(s).map(|((&v, &gv), &sv)| gv * v / sv));
            }
            vec![Some(gi)]
        }))
    }

    /// Data-consistency blend in k-space: where `mask` is set the output is
    /// `(y + λ·k) / (1 + λ)`, elsewhere `k`. `self` is `k`, `y` is a constant
    /// measurement stack of the same shape, `mask` is `H×W` and `lambda` has
    /// one element.
    pub fn data_consistency(&self, y: &Tensor<T>, mask: &[bool], lambda: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, h, w) = complex_dims("data_consistency", self.shape())?;
        if y.shape() != self.shape() {
            return shape_err("data_consistency", format!("measurement {:?} vs {:?}", y.shape(), self.shape()));
        }
        if mask.len() != h * w {
            return shape_err("data_consistency", format!("mask has {} entries, plane is {h}x{w}", mask.len()));
        }
        if lambda.numel() != 1 {
            return shape_err("data_consistency", format!("lambda must be scalar, got {:?}", lambda.shape()));
        }
        let plane = h * w;
        let lam = lambda.item();
        let denom = T::one() + lam;
        let mut data = self.to_vec();
        for ch in 0..2 * b {
            let off = ch * plane;
            for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                data[off + i] = (y.data()[off + i] + lam * data[off + i]) / denom;
            }
        }
        let mask = mask.to_vec();
        let (k, yy, lt) = (self.clone(), y.clone(), lambda.clone());
        Ok(Tensor::from_op(
            "data_consistency",
            self.shape().to_vec(),
            data,
            vec![self.clone(), lambda.clone()],
            move |g, _| {
                let lam = lt.item();
                let denom = T::one() + lam;
                let dk = k.requires_grad().then(|| {
                    let mut d = g.to_vec();
                    let f = lam / denom;
                    for ch in 0..2 * b {
                        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                            d[ch * plane + i] = g[ch * plane + i] * f;
                        }
                    }
                    d
                });
                let dl = lt.requires_grad().then(|| {
                    let mut s = T::zero();
                    for ch in 0..2 * b {
                        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                            let j = ch * plane + i;
                            s += g[j] * (k.data()[j] - yy.data()[j]);
                        }
                    }
                    vec![s / (denom * denom)]
                });
                vec![dk, dl]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_unpack_roundtrip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let z = unpack(&data, 3, 4);
        assert_eq!(z[0], Complex::new(0.0, 4.0));
        assert_eq!(z[4], Complex::new(8.0, 12.0));
        assert_eq!(pack(&z, 4), data);
    }

    #[test]
    fn centered_delta_has_flat_spectrum() {
        let (h, w) = (8, 8);
        let mut d = vec![0.0; 2 * h * w];
        d[(h / 2) * w + w / 2] = 1.0;
        let k = Tensor::<f64>::new(d, &[1, 2, h, w]).unwrap().fft2c().unwrap();
        let z = unpack(k.data(), 1, h * w);
        for v in z {
            assert!((v.norm() - 1.0 / 8.0).abs() < 1e-14);
        }
    }

    #[test]
    fn sos_of_identical_coils() {
        // Two 1x1 coils, both 3 + 4i.
        let x = Tensor::<f64>::new(vec![3.0, 4.0, 3.0, 4.0], &[2, 2, 1, 1]).unwrap();
        let s = x.sos(0.0).unwrap();
        assert!((s.item() - 5.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn dc_limiting_cases() {
        let k = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 1, 2]).unwrap();
        let y = Tensor::<f64>::new(vec![10.0, 20.0, 30.0, 40.0], &[1, 2, 1, 2]).unwrap();
        let mask = [true, false];
        let out = k.data_consistency(&y, &mask, &Tensor::scalar(0.0)).unwrap();
        assert_eq!(out.data(), &[10.0, 2.0, 30.0, 4.0]);
        let out = k.data_consistency(&y, &mask, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(out.data(), &[5.5, 2.0, 16.5, 4.0]);
    }
}
