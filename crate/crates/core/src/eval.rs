//! Evaluation mathematics: image metrics, relaxometry fits, LGE
//! quantification, ventricular phenotypes and agreement statistics.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("the LV mask is empty at frame {0}")]
    EmptyLv(usize),
    #[error("need both classes, got {pos} positive and {neg} negative")]
    SingleClass { pos: usize, neg: usize },
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(EvalError::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(EvalError::Invalid("empty image".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Image metrics

/// `20·log10(max(ref) / rmse)`; identical images give `+∞`.
pub fn psnr(reference: &Array2<f64>, test: &Array2<f64>) -> Result<f64> {
    same_shape(reference, test)?;
    let mse = Zip::from(reference)
        .and(test)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b))
        / reference.len() as f64;
    let peak = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let t: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering with `taps` along both axes.
fn filter_valid(img: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = taps.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = taps.iter().enumerate().map(|(k, t)| t * img[[y, x + k]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = taps.iter().enumerate().map(|(k, t)| t * rows[[y + k, x]]).sum();
        }
    }
    out
}

/// Mean local SSIM over all fully contained 11×11 Gaussian windows.
pub fn ssim(reference: &Array2<f64>, test: &Array2<f64>, data_range: f64) -> Result<f64> {
    same_shape(reference, test)?;
    let (h, w) = reference.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EvalError::Shape(format!("{h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window")));
    }
    if !(data_range > 0.0) {
        return Err(EvalError::Invalid(format!("data range must be > 0, got {data_range}")));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mx = filter_valid(reference, &taps);
    let my = filter_valid(test, &taps);
    let mxx = filter_valid(&(reference * reference), &taps);
    let myy = filter_valid(&(test * test), &taps);
    let mxy = filter_valid(&(reference * test), &taps);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx.as_slice().unwrap()[i], my.as_slice().unwrap()[i]);
        let sxx = mxx.as_slice().unwrap()[i] - ux * ux;
        let syy = myy.as_slice().unwrap()[i] - uy * uy;
        let sxy = mxy.as_slice().unwrap()[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * sxy + c2)) / ((ux * ux + uy * uy + c1) * (sxx + syy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// PSNR and SSIM after dividing both images by the reference maximum.
pub fn image_metrics(reference: &Array2<f64>, test: &Array2<f64>) -> Result<(f64, f64)> {
    same_shape(reference, test)?;
    let peak = reference.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(EvalError::Invalid("reference has no positive signal".into()));
    }
    let r = reference / peak;
    let t = test / peak;
    Ok((psnr(&r, &t)?, ssim(&r, &t, 1.0)?))
}

/// Mean with a normal-approximation 95% interval, `mean ± 1.96·sem`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    let n = values.len();
    if n == 0 {
        return Err(EvalError::Invalid("nothing to summarize".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let half = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(Summary {
        n,
        mean,
        ci_low: mean - half,
        ci_high: mean + half,
    })
}

// ---------------------------------------------------------------------------
// Relaxometry

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Relative parameter change that counts as converged.
    pub tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iters: 50,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct T1Fit {
    pub a: f64,
    pub b: f64,
    pub t1: f64,
    /// Root-mean-square residual.
    pub residual: f64,
    pub converged: bool,
}

fn t1_model(a: f64, b: f64, t1: f64, ti: f64) -> (f64, [f64; 3]) {
    let e = (-ti / t1).exp();
    let u = a - b * e;
    let s = if u >= 0.0 { 1.0 } else { -1.0 };
    (u.abs(), [s, -s * e, -s * b * e * ti / (t1 * t1)])
}

fn t1_cost(a: f64, b: f64, t1: f64, series: &[f64], tis: &[f64]) -> f64 {
    series
        .iter()
        .zip(tis)
        .map(|(&s, &ti)| (t1_model(a, b, t1, ti).0 - s).powi(2))
        .sum()
}

/// Levenberg–Marquardt fit of `s(TI) = |A − B·exp(−TI/T1)|`, started at
/// `A = max s`, `B = 2A`, `T1 = median TI`.
pub fn fit_t1_pixel(series: &[f64], tis: &[f64], cfg: &FitConfig) -> Result<T1Fit> {
    if series.len() != tis.len() {
        return Err(EvalError::Shape(format!("{} samples vs {} inversion times", series.len(), tis.len())));
    }
    if series.len() < 3 {
        return Err(EvalError::Invalid("a 3-parameter T1 fit needs at least 3 points".into()));
    }
    let mut sorted = tis.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let a0 = series.iter().copied().fold(0.0, f64::max);
    let (mut a, mut b, mut t1) = (a0, 2.0 * a0, median.max(1e-6));
    let mut cost = t1_cost(a, b, t1, series, tis);
    let mut mu = 1e-3;
    let mut converged = a0 == 0.0;
    let scale = series.iter().map(|s| s * s).sum::<f64>();
    for _ in 0..cfg.max_iters {
        if converged {
            break;
        }
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for (&s, &ti) in series.iter().zip(tis) {
            let (m, g) = t1_model(a, b, t1, ti);
            let g = Vector3::from(g);
            jtj += g * g.transpose();
            jtr += g * (m - s);
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut damped = jtj;
            for i in 0..3 {
                damped[(i, i)] += mu * jtj[(i, i)].max(1e-30);
            }
            let Some(step) = damped.lu().solve(&(-jtr)) else {
                mu *= 10.0;
                continue;
            };
            let (na, nb, nt) = (a + step[0], b + step[1], t1 + step[2]);
            if !(nt > 0.0) {
                mu *= 10.0;
                continue;
            }
            let nc = t1_cost(na, nb, nt, series, tis);
            if nc <= cost {
                let rel = (step[0].abs() / a.abs().max(1e-300))
                    .max(step[1].abs() / b.abs().max(1e-300))
                    .max(step[2].abs() / t1);
                let dc = cost - nc;
                (a, b, t1, cost) = (na, nb, nt, nc);
                mu = (mu / 10.0).max(1e-12);
                improved = true;
                if rel < cfg.tol || dc <= 1e-15 * scale || cost <= 1e-28 * scale {
                    converged = true;
                }
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            // No descent direction left: a stationary point.
            converged = true;
        }
    }
    Ok(T1Fit {
        a,
        b,
        t1,
        residual: (cost / series.len() as f64).sqrt(),
        converged: converged && t1.is_finite(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct T2Fit {
    pub pd: f64,
    /// `+∞` when the series does not decay.
    pub t2: f64,
    pub residual: f64,
    pub valid: bool,
}

/// Log-linear least squares for `s(TE) = PD·exp(−TE/T2)`, weighted by `s²`
/// to undo the noise amplification of the logarithm. Non-positive samples
/// are dropped.
pub fn fit_t2_pixel(series: &[f64], tes: &[f64]) -> Result<T2Fit> {
    if series.len() != tes.len() {
        return Err(EvalError::Shape(format!("{} samples vs {} echo times", series.len(), tes.len())));
    }
    if series.len() < 2 {
        return Err(EvalError::Invalid("a T2 fit needs at least 2 points".into()));
    }
    let pts: Vec<(f64, f64, f64)> = series
        .iter()
        .zip(tes)
        .filter(|(&s, _)| s > 0.0)
        .map(|(&s, &te)| (te, s.ln(), s * s))
        .collect();
    let invalid = T2Fit {
        pd: f64::NAN,
        t2: f64::NAN,
        residual: f64::NAN,
        valid: false,
    };
    if pts.len() < 2 {
        return Ok(invalid);
    }
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let mt = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let ml = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let stt: f64 = pts.iter().map(|p| p.2 * (p.0 - mt).powi(2)).sum();
    if stt == 0.0 {
        return Ok(invalid);
    }
    let slope = pts.iter().map(|p| p.2 * (p.0 - mt) * (p.1 - ml)).sum::<f64>() / stt;
    let pd = (ml - slope * mt).exp();
    if slope >= 0.0 {
        return Ok(T2Fit {
            pd,
            t2: f64::INFINITY,
            residual: f64::NAN,
            valid: false,
        });
    }
    let t2 = -1.0 / slope;
    let residual = (series
        .iter()
        .zip(tes)
        .map(|(&s, &te)| (pd * (-te / t2).exp() - s).powi(2))
        .sum::<f64>()
        / series.len() as f64)
        .sqrt();
    Ok(T2Fit {
        pd,
        t2,
        residual,
        valid: true,
    })
}

/// Per-pixel fit result. Invalid pixels hold NaN (or `+∞` for
/// non-decaying T2).
#[derive(Debug, Clone, PartialEq)]
pub struct FitMap {
    pub values: Array2<f64>,
    pub residual: Array2<f64>,
    pub valid: Array2<bool>,
}

fn check_series(series: &[Array2<f64>], timings: &[f64], mask: Option<&Array2<bool>>) -> Result<(usize, usize)> {
    if series.len() != timings.len() || series.is_empty() {
        return Err(EvalError::Shape(format!("{} images vs {} timings", series.len(), timings.len())));
    }
    let dim = series[0].dim();
    if series.iter().any(|s| s.dim() != dim) || mask.is_some_and(|m| m.dim() != dim) {
        return Err(EvalError::Shape("series images and mask must share a shape".into()));
    }
    if timings.windows(2).any(|w| w[1] < w[0]) {
        return Err(EvalError::Invalid("timings must be sorted".into()));
    }
    Ok(dim)
}

/// Fits every row block on its own thread; results are placed by pixel
/// index, so the output does not depend on `jobs`.
fn fit_map<F>(dim: (usize, usize), mask: Option<&Array2<bool>>, jobs: usize, f: F) -> FitMap
where
    F: Fn(usize, usize) -> (f64, f64, bool) + Sync,
{
    let (h, w) = dim;
    let jobs = jobs.clamp(1, h.max(1));
    let per = h.div_ceil(jobs);
    let rows: Vec<Vec<(f64, f64, bool)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let f = &f;
                s.spawn(move || {
                    let mut v = Vec::new();
                    for y in j * per..((j + 1) * per).min(h) {
                        for x in 0..w {
                            if mask.is_none_or(|m| m[[y, x]]) {
                                v.push(f(y, x));
                            } else {
                                v.push((f64::NAN, f64::NAN, false));
                            }
                        }
                    }
                    v
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("fit worker panicked")).collect()
    });
    let flat: Vec<(f64, f64, bool)> = rows.into_iter().flatten().collect();
    FitMap {
        values: Array2::from_shape_fn(dim, |(y, x)| flat[y * w + x].0),
        residual: Array2::from_shape_fn(dim, |(y, x)| flat[y * w + x].1),
        valid: Array2::from_shape_fn(dim, |(y, x)| flat[y * w + x].2),
    }
}

pub fn fit_t1(
    series: &[Array2<f64>],
    tis: &[f64],
    mask: Option<&Array2<bool>>,
    cfg: &FitConfig,
    jobs: usize,
) -> Result<FitMap> {
    let dim = check_series(series, tis, mask)?;
    if tis.len() < 3 {
        return Err(EvalError::Invalid("a 3-parameter T1 fit needs at least 3 points".into()));
    }
    Ok(fit_map(dim, mask, jobs, |y, x| {
        let s: Vec<f64> = series.iter().map(|img| img[[y, x]]).collect();
        match fit_t1_pixel(&s, tis, cfg) {
            Ok(f) if f.converged => (f.t1, f.residual, true),
            Ok(f) => (f64::NAN, f.residual, false),
            Err(_) => (f64::NAN, f64::NAN, false),
        }
    }))
}

pub fn fit_t2(series: &[Array2<f64>], tes: &[f64], mask: Option<&Array2<bool>>, jobs: usize) -> Result<FitMap> {
    let dim = check_series(series, tes, mask)?;
    if tes.len() < 2 {
        return Err(EvalError::Invalid("a T2 fit needs at least 2 points".into()));
    }
    Ok(fit_map(dim, mask, jobs, |y, x| {
        let s: Vec<f64> = series.iter().map(|img| img[[y, x]]).collect();
        match fit_t2_pixel(&s, tes) {
            Ok(f) => (f.t2, f.residual, f.valid),
            Err(_) => (f64::NAN, f64::NAN, false),
        }
    }))
}

// ---------------------------------------------------------------------------
// LGE

/// Percentage of myocardial pixels at or above half the myocardial maximum.
pub fn fwhm_lge_mass(image: &Array2<f64>, myo: &Array2<bool>) -> Result<f64> {
    if image.dim() != myo.dim() {
        return Err(EvalError::Shape(format!("{:?} vs {:?}", image.dim(), myo.dim())));
    }
    let vals: Vec<f64> = image.iter().zip(myo).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    if vals.is_empty() {
        return Err(EvalError::EmptyMask);
    }
    let thr = 0.5 * vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let enhanced = vals.iter().filter(|&&v| v >= thr).count();
    Ok(100.0 * enhanced as f64 / vals.len() as f64)
}

// ---------------------------------------------------------------------------
// Phenotypes

/// Myocardial density in g/mL.
pub const MYO_DENSITY: f64 = 1.05;

/// Label masks of one short-axis slice at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceMasks {
    pub lv: Array2<bool>,
    pub rv: Array2<bool>,
    pub myo: Array2<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeReport {
    pub lvedv: f64,
    pub lvesv: f64,
    pub lvsv: f64,
    /// L/min.
    pub lvco: f64,
    /// g.
    pub lvm: f64,
    /// %.
    pub lvef: f64,
    pub rvedv: f64,
    pub rvesv: f64,
    pub rvsv: f64,
    pub rvef: f64,
    pub ed_frame: usize,
    pub es_frame: usize,
    /// Per-frame LV volumes in mL.
    pub lv_volumes: Vec<f64>,
}

/// Volumes in mL from `frames[t][slice]`. ED and ES are the LV volume
/// extremes (earliest frame on ties); RV indices use the same frames.
pub fn phenotypes(
    frames: &[Vec<SliceMasks>],
    spacing_mm: [f64; 2],
    slice_thickness_mm: f64,
    heart_rate_bpm: f64,
) -> Result<PhenotypeReport> {
    if frames.is_empty() {
        return Err(EvalError::Invalid("no frames".into()));
    }
    if !(spacing_mm[0] > 0.0 && spacing_mm[1] > 0.0 && slice_thickness_mm > 0.0) {
        return Err(EvalError::Invalid("spacing and thickness must be positive".into()));
    }
    let voxel_ml = spacing_mm[0] * spacing_mm[1] * slice_thickness_mm / 1000.0;
    let count = |m: &Array2<bool>| m.iter().filter(|&&v| v).count() as f64;
    let vol = |t: usize, pick: fn(&SliceMasks) -> &Array2<bool>| frames[t].iter().map(|s| count(pick(s))).sum::<f64>() * voxel_ml;
    let lv: Vec<f64> = (0..frames.len()).map(|t| vol(t, |s| &s.lv)).collect();
    if let Some(t) = lv.iter().position(|&v| v == 0.0) {
        return Err(EvalError::EmptyLv(t));
    }
    let mut ed = 0;
    let mut es = 0;
    for (t, &v) in lv.iter().enumerate() {
        if v > lv[ed] {
            ed = t;
        }
        if v < lv[es] {
            es = t;
        }
    }
    let (lvedv, lvesv) = (lv[ed], lv[es]);
    let lvsv = lvedv - lvesv;
    let (rvedv, rvesv) = (vol(ed, |s| &s.rv), vol(es, |s| &s.rv));
    let rvsv = rvedv - rvesv;
    Ok(PhenotypeReport {
        lvedv,
        lvesv,
        lvsv,
        lvco: lvsv * heart_rate_bpm / 1000.0,
        lvm: vol(ed, |s| &s.myo) * MYO_DENSITY,
        lvef: 100.0 * lvsv / lvedv,
        rvedv,
        rvesv,
        rvsv,
        rvef: if rvedv > 0.0 { 100.0 * rvsv / rvedv } else { f64::NAN },
        ed_frame: ed,
        es_frame: es,
        lv_volumes: lv,
    })
}

// ---------------------------------------------------------------------------
// Wall thickness

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceLevel {
    Basal,
    Mid,
    Apical,
}

impl SliceLevel {
    /// First AHA segment index (0-based) and number of sectors.
    fn segments(self) -> (usize, usize) {
        match self {
            SliceLevel::Basal => (0, 6),
            SliceLevel::Mid => (6, 6),
            SliceLevel::Apical => (12, 4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallThickness {
    /// Maximum thickness per AHA segment 1–16 in mm; NaN when no slice
    /// covers the segment or the segment is flagged.
    pub segments: [f64; 16],
    /// Maximum over the measured segments.
    pub global: f64,
    /// 0-based segments containing a ray that crossed no wall.
    pub flagged: Vec<usize>,
}

impl WallThickness {
    /// The 16 segments followed by the global value.
    pub fn values(&self) -> [f64; 17] {
        let mut v = [0.0; 17];
        v[..16].copy_from_slice(&self.segments);
        v[16] = self.global;
        v
    }
}

/// Rays per slice.
const RAYS: usize = 720;
/// Radial sampling step in pixels.
const RAY_STEP: f64 = 0.02;

/// Gaussian blur (σ in pixels, zero outside the grid) of a binary mask.
/// The ½ level set of the blurred mask follows the underlying smooth
/// boundary instead of the pixel staircase.
fn blur_mask(m: &Array2<bool>, sigma: f64) -> Array2<f64> {
    let radius = (4.0 * sigma).ceil() as usize;
    let taps = gaussian_taps(2 * radius + 1, sigma);
    let (h, w) = m.dim();
    let mut rows = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xx = x as isize + k as isize - radius as isize;
                if xx >= 0 && (xx as usize) < w && m[[y, xx as usize]] {
                    acc += t;
                }
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yy = y as isize + k as isize - radius as isize;
                if yy >= 0 && (yy as usize) < h {
                    acc += t * rows[[yy as usize, x]];
                }
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Bilinear sample at pixel-center coordinates; zero outside the grid.
fn bilinear(m: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = m.dim();
    let at = |yy: isize, xx: isize| {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            m[[yy as usize, xx as usize]]
        }
    };
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + at(y0, x0 + 1) * (1.0 - fy) * fx
        + at(y0 + 1, x0) * fy * (1.0 - fx)
        + at(y0 + 1, x0 + 1) * fy * fx
}

/// Wall crossing along one ray: the first interval where the smoothed
/// mask exceeds ½, with linearly interpolated endpoints (pixels).
fn ray_wall(myo: &Array2<f64>, cy: f64, cx: f64, theta: f64, r_max: f64) -> Option<(f64, f64)> {
    let (s, c) = theta.sin_cos();
    let f = |r: f64| bilinear(myo, cy + r * s, cx + r * c) - 0.5;
    let steps = (r_max / RAY_STEP) as usize;
    let mut prev = f(0.0);
    let mut inner = if prev >= 0.0 { Some(0.0) } else { None };
    for i in 1..=steps {
        let r = i as f64 * RAY_STEP;
        let v = f(r);
        let cross = r - RAY_STEP * v / (v - prev);
        match inner {
            None if v >= 0.0 && prev < 0.0 => inner = Some(cross),
            Some(r_in) if v < 0.0 && prev >= 0.0 => return Some((r_in, cross)),
            _ => {}
        }
        prev = v;
    }
    None
}

/// Maximum wall thickness per AHA segment. Sectors start at
/// `rv_insertion_rad` (image angle, `atan2(dy, dx)` with `y` down) and
/// advance with increasing angle; apical sectors are 90° wide and start
/// 45° earlier so the first is centered on the insertion direction.
pub fn lvmwt_aha(
    slices: &[(SliceLevel, &Array2<bool>, &Array2<bool>)],
    spacing_mm: f64,
    rv_insertion_rad: f64,
) -> Result<WallThickness> {
    if !(spacing_mm > 0.0) {
        return Err(EvalError::Invalid("spacing must be positive".into()));
    }
    let mut seg = [f64::NAN; 16];
    let mut flagged = Vec::new();
    for &(level, myo, lv) in slices {
        if myo.dim() != lv.dim() {
            return Err(EvalError::Shape(format!("{:?} vs {:?}", myo.dim(), lv.dim())));
        }
        let (mut cy, mut cx, mut n) = (0.0, 0.0, 0.0);
        for ((y, x), &v) in lv.indexed_iter() {
            if v {
                cy += y as f64;
                cx += x as f64;
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Err(EvalError::EmptyMask);
        }
        let (cy, cx) = (cy / n, cx / n);
        let (h, w) = myo.dim();
        let smooth = blur_mask(myo, 1.0);
        let r_max = ((h * h + w * w) as f64).sqrt();
        let (first, count) = level.segments();
        let width = 2.0 * PI / count as f64;
        let origin = if level == SliceLevel::Apical {
            rv_insertion_rad - width / 2.0
        } else {
            rv_insertion_rad
        };
        for i in 0..RAYS {
            let theta = 2.0 * PI * (i as f64 + 0.5) / RAYS as f64;
            let sector = (((theta - origin).rem_euclid(2.0 * PI)) / width) as usize % count;
            let k = first + sector;
            match ray_wall(&smooth, cy, cx, theta, r_max) {
                Some((a, b)) => {
                    let t = (b - a) * spacing_mm;
                    if !flagged.contains(&k) && !(seg[k] >= t) {
                        seg[k] = t;
                    }
                }
                None => {
                    if !flagged.contains(&k) {
                        flagged.push(k);
                    }
                }
            }
        }
    }
    flagged.sort_unstable();
    for &k in &flagged {
        seg[k] = f64::NAN;
    }
    let global = seg.iter().copied().filter(|v| v.is_finite()).fold(f64::NAN, f64::max);
    Ok(WallThickness {
        segments: seg,
        global,
        flagged,
    })
}

// ---------------------------------------------------------------------------
// Agreement and diagnostic statistics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub n: usize,
    /// NaN when either vector has zero variance.
    pub pcc: f64,
    /// Least-squares fit `b ≈ slope·a + intercept`.
    pub slope: f64,
    pub intercept: f64,
    /// Mean of `b − a`.
    pub md: f64,
    pub sd_diff: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub mae: f64,
}

pub fn agreement_stats(a: &[f64], b: &[f64]) -> Result<Agreement> {
    if a.len() != b.len() {
        return Err(EvalError::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    let n = a.len();
    if n < 3 {
        return Err(EvalError::Invalid("agreement needs at least 3 pairs".into()));
    }
    let nf = n as f64;
    let ma = a.iter().sum::<f64>() / nf;
    let mb = b.iter().sum::<f64>() / nf;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
        sab += (x - ma) * (y - mb);
    }
    let pcc = if saa > 0.0 && sbb > 0.0 {
        (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
    } else {
        f64::NAN
    };
    let slope = if saa > 0.0 { sab / saa } else { f64::NAN };
    let intercept = mb - slope * ma;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let md = d.iter().sum::<f64>() / nf;
    let sd = (d.iter().map(|v| (v - md).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    Ok(Agreement {
        n,
        pcc,
        slope,
        intercept,
        md,
        sd_diff: sd,
        loa_low: md - 1.96 * sd,
        loa_high: md + 1.96 * sd,
        mae: d.iter().map(|v| v.abs()).sum::<f64>() / nf,
    })
}

/// Midranks (1-based) of `values`.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney AUC with midranks, so each tie counts one half.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::SingleClass {
            pos: pos.len(),
            neg: neg.len(),
        });
    }
    let all: Vec<f64> = pos.iter().chain(neg).copied().collect();
    let ranks = midranks(&all);
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let rsum: f64 = ranks[..pos.len()].iter().sum();
    Ok((rsum - np * (np + 1.0) / 2.0) / (np * nn))
}

fn auc_labeled(scores: &[f64], labels: &[bool], pick: &[usize]) -> Option<f64> {
    let pos: Vec<f64> = pick.iter().filter(|&&i| labels[i]).map(|&i| scores[i]).collect();
    let neg: Vec<f64> = pick.iter().filter(|&&i| !labels[i]).map(|&i| scores[i]).collect();
    auc(&pos, &neg).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub auc_a: f64,
    pub auc_b: f64,
    /// Two-sided p-value for `auc_a ≠ auc_b`.
    pub p: f64,
    /// Resamples that contained both classes.
    pub used: usize,
}

/// Paired case bootstrap of `AUC(a) − AUC(b)`. Resamples lacking a class are
/// skipped.
pub fn bootstrap_auc_diff(a: &[f64], b: &[f64], labels: &[bool], n_boot: usize, seed: u64) -> Result<BootstrapResult> {
    if a.len() != b.len() || a.len() != labels.len() {
        return Err(EvalError::Shape("scores and labels must have equal length".into()));
    }
    let all: Vec<usize> = (0..a.len()).collect();
    let pos = labels.iter().filter(|&&l| l).count();
    let (auc_a, auc_b) = match (auc_labeled(a, labels, &all), auc_labeled(b, labels, &all)) {
        (Some(x), Some(y)) => (x, y),
        _ => {
            return Err(EvalError::SingleClass {
                pos,
                neg: labels.len() - pos,
            })
        }
    };
    if n_boot == 0 {
        return Err(EvalError::Invalid("n_boot must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut le, mut ge, mut used) = (0usize, 0usize, 0usize);
    let mut pick = vec![0usize; a.len()];
    for _ in 0..n_boot {
        for p in pick.iter_mut() {
            *p = rng.random_range(0..a.len());
        }
        if let (Some(x), Some(y)) = (auc_labeled(a, labels, &pick), auc_labeled(b, labels, &pick)) {
            used += 1;
            let d = x - y;
            le += usize::from(d <= 0.0);
            ge += usize::from(d >= 0.0);
        }
    }
    let p = if used == 0 {
        1.0
    } else {
        (2.0 * le.min(ge) as f64 / used as f64).min(1.0)
    };
    Ok(BootstrapResult { auc_a, auc_b, p, used })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTests {
    pub t: f64,
    pub t_p: f64,
    /// Signed-rank statistic `W+`.
    pub w_plus: f64,
    pub wilcoxon_z: f64,
    pub wilcoxon_p: f64,
}

/// Paired two-sided t-test (n − 1 dof) and Wilcoxon signed-rank test with
/// the tie-corrected normal approximation; zero differences are dropped.
pub fn paired_tests(a: &[f64], b: &[f64]) -> Result<PairedTests> {
    if a.len() != b.len() {
        return Err(EvalError::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    let n = a.len();
    if n < 5 {
        return Err(EvalError::Invalid("paired tests need at least 5 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().all(|&v| v == 0.0) {
        return Ok(PairedTests {
            t: 0.0,
            t_p: 1.0,
            w_plus: 0.0,
            wilcoxon_z: 0.0,
            wilcoxon_p: 1.0,
        });
    }
    let nf = n as f64;
    let md = d.iter().sum::<f64>() / nf;
    let sd = (d.iter().map(|v| (v - md).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    let t = md / (sd / nf.sqrt());
    let t_p = if t.is_infinite() {
        0.0
    } else {
        let dist = StudentsT::new(0.0, 1.0, nf - 1.0).expect("dof > 0");
        2.0 * dist.cdf(-t.abs())
    };

    let nz: Vec<f64> = d.into_iter().filter(|&v| v != 0.0).collect();
    let m = nz.len() as f64;
    let abs: Vec<f64> = nz.iter().map(|v| v.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let mut ties = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let tc = (j - i + 1) as f64;
        ties += tc * tc * tc - tc;
        i = j + 1;
    }
    let mean = m * (m + 1.0) / 4.0;
    let var = m * (m + 1.0) * (2.0 * m + 1.0) / 24.0 - ties / 48.0;
    let z = if var > 0.0 { (w_plus - mean) / var.sqrt() } else { 0.0 };
    let normal = Normal::standard();
    Ok(PairedTests {
        t,
        t_p,
        w_plus,
        wilcoxon_z: z,
        wilcoxon_p: (2.0 * normal.cdf(-z.abs())).min(1.0),
    })
}

// ---------------------------------------------------------------------------
// Raster output

/// Grayscale PNG of `img` mapped linearly from `[lo, hi]`.
pub fn write_png_gray(path: &std::path::Path, img: &Array2<f64>, lo: f64, hi: f64) -> std::io::Result<()> {
    let (h, w) = img.dim();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let buf: Vec<u8> = img
        .iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer matches dimensions")
        .save(path)
        .map_err(std::io::Error::other)
}

/// Bullseye of 16 AHA values: basal outer ring, mid ring, apical inner
/// ring. NaN segments are drawn black; others from dark blue to yellow.
pub fn bullseye(values: &[f64; 16], size: usize) -> image::RgbImage {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let c = size as f64 / 2.0;
    image::RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let dx = x as f64 + 0.5 - c;
        let dy = y as f64 + 0.5 - c;
        let r = (dx * dx + dy * dy).sqrt() / c;
        let theta = dy.atan2(dx).rem_euclid(2.0 * PI);
        let (first, count, offset) = if r > 1.0 {
            return image::Rgb([255, 255, 255]);
        } else if r > 2.0 / 3.0 {
            (0, 6, 0.0)
        } else if r > 1.0 / 3.0 {
            (6, 6, 0.0)
        } else {
            (12, 4, -PI / 4.0)
        };
        let width = 2.0 * PI / count as f64;
        let k = first + ((theta - offset).rem_euclid(2.0 * PI) / width) as usize % count;
        let v = values[k];
        if !v.is_finite() {
            return image::Rgb([0, 0, 0]);
        }
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        image::Rgb([(255.0 * t) as u8, (64.0 + 160.0 * t) as u8, (160.0 * (1.0 - t)) as u8])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_taps_sum_to_one() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((t[0] - t[10]).abs() < 1e-18);
    }

    #[test]
    fn midranks_handle_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn summary_of_single_value_has_zero_width() {
        let s = summarize(&[2.5]).unwrap();
        assert_eq!((s.ci_low, s.mean, s.ci_high), (2.5, 2.5, 2.5));
        assert!(summarize(&[]).is_err());
    }
}
