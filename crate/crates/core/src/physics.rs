//! Multi-coil Cartesian MRI signal model.
//!
//! Complex images and k-space are `ndarray` arrays of `Complex64` laid out
//! `[coils, y, x]` (or `[y, x]` after coil combination). The encoding
//! operator is `A = U·F·S` with `F` the centered orthonormal 2-D DFT, `S` the
//! per-coil sensitivity multiplication and `U` the sampling mask.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array3, ArrayView3, Axis, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fourier;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, PhysicsError>;

fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(PhysicsError::Shape {
        op,
        detail: detail.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// In-plane pixel spacing (row, column) in mm.
    pub pixel_spacing_mm: [f64; 2],
    pub slice_thickness_mm: f64,
    pub frame: Option<usize>,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            pixel_spacing_mm: [1.5, 1.5],
            slice_thickness_mm: 8.0,
            frame: None,
        }
    }
}

/// Multi-coil k-space `[coils, ky, kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceVolume {
    pub data: Array3<Complex64>,
    pub geometry: Geometry,
    pub scan_id: String,
}

impl KSpaceVolume {
    pub fn new(data: Array3<Complex64>, geometry: Geometry, scan_id: impl Into<String>) -> Result<Self> {
        if data.shape()[0] == 0 {
            return Err(PhysicsError::Invalid {
                op: "KSpaceVolume",
                detail: "at least one coil is required".into(),
            });
        }
        if data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(PhysicsError::Invalid {
                op: "KSpaceVolume",
                detail: "non-finite k-space entry".into(),
            });
        }
        Ok(KSpaceVolume {
            data,
            geometry,
            scan_id: scan_id.into(),
        })
    }

    pub fn coils(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }
}

/// Per-coil complex sensitivity maps `[coils, y, x]` with
/// `Σ_j |S_j|² = 1` wherever any map is nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilSensitivities {
    maps: Array3<Complex64>,
}

impl CoilSensitivities {
    /// Normalizes raw maps pixelwise; pixels whose root-sum-of-squares is at
    /// most `floor` are set to zero.
    pub fn normalized(raw: Array3<Complex64>, floor: f64) -> Self {
        let mut maps = raw;
        let rss = sos(&maps);
        for mut coil in maps.outer_iter_mut() {
            Zip::from(&mut coil).and(&rss).for_each(|s, &r| {
                *s = if r > floor { *s / r } else { Complex64::new(0.0, 0.0) };
            });
        }
        CoilSensitivities { maps }
    }

    /// Wraps maps that are already normalized; fails if any covered pixel
    /// deviates from unit energy by more than `tol`.
    pub fn from_normalized(maps: Array3<Complex64>, tol: f64) -> Result<Self> {
        let s = CoilSensitivities { maps };
        let err = s.normalization_error();
        if err > tol {
            return Err(PhysicsError::Invalid {
                op: "CoilSensitivities",
                detail: format!("maps are not normalized (max deviation {err:.3e})"),
            });
        }
        Ok(s)
    }

    /// Max over covered pixels of `|Σ_j |S_j|² − 1|`.
    pub fn normalization_error(&self) -> f64 {
        let e = energy(&self.maps);
        e.iter().filter(|&&v| v > 0.0).map(|v| (v - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn maps(&self) -> &Array3<Complex64> {
        &self.maps
    }

    pub fn into_maps(self) -> Array3<Complex64> {
        self.maps
    }

    pub fn coils(&self) -> usize {
        self.maps.shape()[0]
    }

    /// Pixels where any coil has nonzero sensitivity.
    pub fn support(&self) -> Array2<bool> {
        energy(&self.maps).mapv(|v| v > 0.0)
    }
}

fn energy(x: &Array3<Complex64>) -> Array2<f64> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut acc = Array2::<f64>::zeros((h, w));
    for coil in x.outer_iter() {
        Zip::from(&mut acc).and(&coil).for_each(|a, v| *a += v.norm_sqr());
    }
    acc
}

/// Centered orthonormal 2-D DFT of every plane of a `[n, y, x]` stack.
pub fn fft2c(x: &Array3<Complex64>) -> Array3<Complex64> {
    transform3(x, false)
}

pub fn ifft2c(x: &Array3<Complex64>) -> Array3<Complex64> {
    transform3(x, true)
}

pub fn fft2c_image(x: &Array2<Complex64>) -> Array2<Complex64> {
    transform2(x, false)
}

pub fn ifft2c_image(x: &Array2<Complex64>) -> Array2<Complex64> {
    transform2(x, true)
}

fn transform3(x: &Array3<Complex64>, inverse: bool) -> Array3<Complex64> {
    let (n, h, w) = x.dim();
    let mut buf: Vec<Complex64> = x.iter().copied().collect();
    fourier::fft2c_inplace(&mut buf, h, w, inverse);
    Array3::from_shape_vec((n, h, w), buf).expect("shape preserved")
}

fn transform2(x: &Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let (h, w) = x.dim();
    let mut buf: Vec<Complex64> = x.iter().copied().collect();
    fourier::fft2c_inplace(&mut buf, h, w, inverse);
    Array2::from_shape_vec((h, w), buf).expect("shape preserved")
}

/// `x_C = Σ_j conj(S_j)·x_j`.
pub fn coil_combine(x: &Array3<Complex64>, s: &CoilSensitivities) -> Result<Array2<Complex64>> {
    if x.shape() != s.maps.shape() {
        return shape_err(
            "coil_combine",
            format!("image {:?} vs sensitivities {:?}", x.shape(), s.maps.shape()),
        );
    }
    let (_, h, w) = x.dim();
    let mut out = Array2::<Complex64>::zeros((h, w));
    for (xj, sj) in x.outer_iter().zip(s.maps.outer_iter()) {
        Zip::from(&mut out).and(&xj).and(&sj).for_each(|o, &a, &b| *o += b.conj() * a);
    }
    Ok(out)
}

/// `m_j = S_j·x`.
pub fn coil_expand(x: &Array2<Complex64>, s: &CoilSensitivities) -> Result<Array3<Complex64>> {
    let (c, h, w) = s.maps.dim();
    if x.dim() != (h, w) {
        return shape_err("coil_expand", format!("image {:?} vs maps {h}x{w}", x.dim()));
    }
    let mut out = Array3::<Complex64>::zeros((c, h, w));
    for (mut oj, sj) in out.outer_iter_mut().zip(s.maps.outer_iter()) {
        Zip::from(&mut oj).and(&sj).and(x).for_each(|o, &sv, &xv| *o = sv * xv);
    }
    Ok(out)
}

/// Pixelwise `sqrt(Σ_j |x_j|²)`.
pub fn sos(x: &Array3<Complex64>) -> Array2<f64> {
    energy(x).mapv(f64::sqrt)
}

fn check_mask(op: &'static str, mask: &Array2<bool>, h: usize, w: usize) -> Result<()> {
    if mask.dim() != (h, w) {
        return shape_err(op, format!("mask {:?} vs grid {h}x{w}", mask.dim()));
    }
    Ok(())
}

/// Zeroes unsampled entries of every coil.
pub fn apply_mask_stack(k: &Array3<Complex64>, mask: &Array2<bool>) -> Result<Array3<Complex64>> {
    let (_, h, w) = k.dim();
    check_mask("apply_mask", mask, h, w)?;
    let mut out = k.clone();
    for mut coil in out.outer_iter_mut() {
        Zip::from(&mut coil).and(mask).for_each(|v, &m| {
            if !m {
                *v = Complex64::new(0.0, 0.0);
            }
        });
    }
    Ok(out)
}

/// `A x = U F S x`.
pub fn forward_model(x: &Array2<Complex64>, s: &CoilSensitivities, mask: &Array2<bool>) -> Result<Array3<Complex64>> {
    let (_, h, w) = s.maps.dim();
    check_mask("forward_model", mask, h, w)?;
    apply_mask_stack(&fft2c(&coil_expand(x, s)?), mask)
}

/// `A* y = S* F* U y` (the mask is its own adjoint).
pub fn adjoint_model(y: &Array3<Complex64>, s: &CoilSensitivities, mask: &Array2<bool>) -> Result<Array2<Complex64>> {
    let (_, h, w) = y.dim();
    check_mask("adjoint_model", mask, h, w)?;
    coil_combine(&ifft2c(&apply_mask_stack(y, mask)?), s)
}

/// Which k-space samples define the coil covariance for compression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Calibration {
    /// All samples.
    Full,
    /// A centered `h × w` block.
    Center { h: usize, w: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compressed {
    pub data: Array3<Complex64>,
    /// `‖compressed‖² / ‖original‖²` over all samples.
    pub energy_retained: f64,
    /// `keep × coils` projection (rows are conjugated virtual-coil vectors).
    pub projection: DMatrix<Complex64>,
}

/// Projects coils onto the `keep` dominant principal directions of the
/// calibration samples.
pub fn coil_compress(k: &Array3<Complex64>, keep: usize, calib: Calibration) -> Result<Compressed> {
    let (c, h, w) = k.dim();
    if keep == 0 {
        return Err(PhysicsError::Invalid {
            op: "coil_compress",
            detail: "keep must be >= 1".into(),
        });
    }
    if keep > c {
        return Err(PhysicsError::Invalid {
            op: "coil_compress",
            detail: format!("keep {keep} exceeds coil count {c}"),
        });
    }
    let (y0, y1, x0, x1) = match calib {
        Calibration::Full => (0, h, 0, w),
        Calibration::Center { h: ch, w: cw } => {
            if ch == 0 || cw == 0 || ch > h || cw > w {
                return shape_err("coil_compress", format!("calibration block {ch}x{cw} vs grid {h}x{w}"));
            }
            let (y0, x0) = (h / 2 - ch / 2, w / 2 - cw / 2);
            (y0, y0 + ch, x0, x0 + cw)
        }
    };
    // Coil covariance R = X Xᴴ over the calibration samples.
    let mut cov = DMatrix::<Complex64>::zeros(c, c);
    let block = k.slice(ndarray::s![.., y0..y1, x0..x1]);
    let samples: Vec<Vec<Complex64>> = block.outer_iter().map(|p| p.iter().copied().collect()).collect();
    for i in 0..c {
        for j in i..c {
            let v: Complex64 = samples[i].iter().zip(&samples[j]).map(|(a, b)| a * b.conj()).sum();
            cov[(i, j)] = v;
            cov[(j, i)] = v.conj();
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut proj = DMatrix::<Complex64>::zeros(keep, c);
    for (r, &idx) in order.iter().take(keep).enumerate() {
        let v = eig.eigenvectors.column(idx);
        for j in 0..c {
            proj[(r, j)] = v[j].conj();
        }
    }
    let data = project(k.view(), &proj);
    let total: f64 = k.iter().map(|v| v.norm_sqr()).sum();
    let kept: f64 = data.iter().map(|v| v.norm_sqr()).sum();
    Ok(Compressed {
        data,
        energy_retained: if total > 0.0 { kept / total } else { 1.0 },
        projection: proj,
    })
}

fn project(k: ArrayView3<Complex64>, proj: &DMatrix<Complex64>) -> Array3<Complex64> {
    let (c, h, w) = k.dim();
    let keep = proj.nrows();
    let mut out = Array3::<Complex64>::zeros((keep, h, w));
    for r in 0..keep {
        let mut or = out.index_axis_mut(Axis(0), r);
        for j in 0..c {
            let p = proj[(r, j)];
            Zip::from(&mut or).and(&k.index_axis(Axis(0), j)).for_each(|o, &v| *o += p * v);
        }
    }
    out
}

/// Inner product `⟨a, b⟩ = Σ conj(a)·b`.
pub fn inner<D: ndarray::Dimension>(a: &ndarray::Array<Complex64, D>, b: &ndarray::Array<Complex64, D>) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

/// `‖x‖₂` over all entries.
pub fn norm<D: ndarray::Dimension>(x: &ndarray::Array<Complex64, D>) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}
