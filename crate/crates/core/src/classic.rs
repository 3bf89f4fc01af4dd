//! Non-learned reconstruction: ACS sensitivity estimation, zero filling and
//! conjugate-gradient SENSE.

use ndarray::{s, Array2, Array3, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{self, CoilSensitivities, PhysicsError};
use crate::sampling::Acs;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassicError {
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("the calibration region is empty")]
    EmptyAcs,
    #[error("conjugate gradient diverged at iteration {iteration}: residual trace {trace:?}")]
    Diverged { iteration: usize, trace: Vec<f64> },
}

pub type Result<T> = std::result::Result<T, ClassicError>;

/// Fraction of the maximum root-sum-of-squares below which a pixel is
/// treated as outside the object.
pub const SUPPORT_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgConfig {
    pub max_iters: usize,
    /// Stop once `‖r‖ / ‖Aᴴy‖` of the normal equations falls below this.
    pub tol: f64,
    pub lambda_reg: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            max_iters: 30,
            tol: 1e-6,
            lambda_reg: 0.01,
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(ClassicError::Config("max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(ClassicError::Config("tol must be > 0".into()));
        }
        if !(self.lambda_reg >= 0.0) {
            return Err(ClassicError::Config("lambda_reg must be >= 0".into()));
        }
        Ok(())
    }
}

/// Raised-cosine taper of length `n`, strictly positive at both ends.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i + 1) as f64 / (n + 1) as f64).cos())
        .collect()
}

/// Low-resolution coil images from the apodized, zero-padded ACS region.
pub fn acs_images(y: &Array3<Complex64>, acs: Acs) -> Result<Array3<Complex64>> {
    let (c, ny, nx) = y.dim();
    if acs.is_empty() || c == 0 {
        return Err(ClassicError::EmptyAcs);
    }
    let ((y0, y1), (x0, x1)) = acs.bounds(ny, nx);
    let wy = hann(y1 - y0);
    // Line ACS spans the full readout, which needs no taper.
    let wx = match acs {
        Acs::Lines(_) => vec![1.0; x1 - x0],
        Acs::Block { .. } => hann(x1 - x0),
    };
    let mut k = Array3::<Complex64>::zeros((c, ny, nx));
    k.slice_mut(s![.., y0..y1, x0..x1]).assign(&y.slice(s![.., y0..y1, x0..x1]));
    for mut coil in k.outer_iter_mut() {
        for (iy, mut row) in coil.slice_mut(s![y0..y1, x0..x1]).outer_iter_mut().enumerate() {
            for (ix, v) in row.iter_mut().enumerate() {
                *v *= wy[iy] * wx[ix];
            }
        }
    }
    Ok(physics::ifft2c(&k))
}

/// Pixels whose root-sum-of-squares exceeds [`SUPPORT_THRESHOLD`] of the
/// maximum.
pub fn support_mask(img: &Array3<Complex64>) -> Array2<bool> {
    let rss = physics::sos(img);
    let max = rss.iter().copied().fold(0.0, f64::max);
    rss.mapv(|v| v > SUPPORT_THRESHOLD * max && v > 0.0)
}

/// Sensitivities as ACS coil images divided by their root-sum-of-squares.
pub fn estimate_sens_acs(y: &Array3<Complex64>, acs: Acs) -> Result<CoilSensitivities> {
    let img = acs_images(y, acs)?;
    let support = support_mask(&img);
    let mut raw = img;
    for mut coil in raw.outer_iter_mut() {
        Zip::from(&mut coil).and(&support).for_each(|v, &m| {
            if !m {
                *v = Complex64::new(0.0, 0.0);
            }
        });
    }
    Ok(CoilSensitivities::normalized(raw, 0.0))
}

/// `x⁰ = F* U y` per coil.
pub fn zero_filled(y: &Array3<Complex64>, mask: &Array2<bool>) -> Result<Array3<Complex64>> {
    Ok(physics::ifft2c(&physics::apply_mask_stack(y, mask)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SenseResult {
    pub image: Array2<Complex64>,
    /// `‖A x_k − y‖` for `k = 0..=iterations`.
    pub data_residual: Vec<f64>,
    /// Normal-equation residual norms `‖Aᴴy − (AᴴA + λI) x_k‖`.
    pub normal_residual: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `‖y − U F S x‖² + λ‖x‖²` by conjugate gradients on the normal
/// equations, starting from zero.
pub fn sense_cg(
    y: &Array3<Complex64>,
    mask: &Array2<bool>,
    sens: &CoilSensitivities,
    cfg: &CgConfig,
) -> Result<SenseResult> {
    cfg.validate()?;
    if y.shape() != sens.maps().shape() {
        return Err(PhysicsError::Shape {
            op: "sense_cg",
            detail: format!("k-space {:?} vs sensitivities {:?}", y.shape(), sens.maps().shape()),
        }
        .into());
    }
    let (_, ny, nx) = y.dim();
    let lam = cfg.lambda_reg;
    let ym = physics::apply_mask_stack(y, mask)?;
    let b = physics::adjoint_model(&ym, sens, mask)?;
    let bnorm = physics::norm(&b);
    let mut x = Array2::<Complex64>::zeros((ny, nx));
    // Data residual s = y - A x, tracked through A p.
    let mut sres = ym.clone();
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = physics::inner(&r, &r).re;
    let r0 = rr.sqrt();
    let mut out = SenseResult {
        image: x.clone(),
        data_residual: vec![physics::norm(&sres)],
        normal_residual: vec![r0],
        iterations: 0,
        converged: bnorm == 0.0,
    };
    if bnorm == 0.0 {
        return Ok(out);
    }
    for it in 1..=cfg.max_iters {
        let ap = physics::forward_model(&p, sens, mask)?;
        let mut q = physics::adjoint_model(&ap, sens, mask)?;
        if lam != 0.0 {
            q.zip_mut_with(&p, |qv, &pv| *qv += pv * lam);
        }
        let pq = physics::inner(&p, &q).re;
        if pq <= 0.0 {
            break;
        }
        let alpha = rr / pq;
        x.zip_mut_with(&p, |xv, &pv| *xv += pv * alpha);
        r.zip_mut_with(&q, |rv, &qv| *rv -= qv * alpha);
        sres.zip_mut_with(&ap, |sv, &av| *sv -= av * alpha);
        let rr_new = physics::inner(&r, &r).re;
        out.iterations = it;
        out.data_residual.push(physics::norm(&sres));
        out.normal_residual.push(rr_new.sqrt());
        if !rr_new.is_finite() || rr_new.sqrt() > 10.0 * r0 {
            return Err(ClassicError::Diverged {
                iteration: it,
                trace: out.normal_residual,
            });
        }
        if rr_new.sqrt() / bnorm < cfg.tol {
            out.converged = true;
            break;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        p.zip_mut_with(&r, |pv, &rv| *pv = rv + *pv * beta);
    }
    out.image = x;
    Ok(out)
}
