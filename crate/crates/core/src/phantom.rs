//! Synthetic cardiac phantoms, multi-coil k-space synthesis and the on-disk
//! dataset container.
//!
//! Coordinates are millimetres from the grid center; pixel `(y, x)` sits at
//! `((x − nx/2 + ½)·dx, (y − ny/2 + ½)·dy)`.

use std::f64::consts::PI;
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use ndarray::{Array2, Array3, Zip};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{self, CoilSensitivities};
use crate::sampling::MaskRecord;
use crate::text::{compose_metadata_text, ScanMetadata};

/// Version of `dataset.json` and per-record manifests.
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("geometry does not fit: {0}")]
    Geometry(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("digest mismatch for {path}: manifest {expected}, content {found}")]
    Digest {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("missing blob {0}")]
    MissingBlob(PathBuf),
    #[error("container version {found} is not supported (expected {CONTAINER_VERSION})")]
    Version { found: u32 },
    #[error("malformed container file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PhantomError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PhantomError + '_ {
    move |source| PhantomError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Relaxation times in ms and relative proton density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tissue {
    pub t1: f64,
    pub t2: f64,
    pub pd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tissues {
    pub torso: Tissue,
    pub blood: Tissue,
    pub myocardium: Tissue,
    pub lesion: Tissue,
}

impl Tissues {
    /// Native values at 3 T.
    pub fn native_3t() -> Self {
        Tissues {
            torso: Tissue {
                t1: 1000.0,
                t2: 40.0,
                pd: 0.7,
            },
            blood: Tissue {
                t1: 1650.0,
                t2: 250.0,
                pd: 0.95,
            },
            myocardium: Tissue {
                t1: 1150.0,
                t2: 45.0,
                pd: 0.8,
            },
            lesion: Tissue {
                t1: 1400.0,
                t2: 60.0,
                pd: 0.85,
            },
        }
    }

    /// T1 shortens at lower field; 1.5 T is roughly 85% of 3 T.
    pub fn at_field(field_t: f64) -> Self {
        let f = (0.85 + 0.15 * (field_t - 1.5) / 1.5).clamp(0.6, 1.2);
        let mut t = Self::native_3t();
        for tissue in [&mut t.torso, &mut t.blood, &mut t.myocardium, &mut t.lesion] {
            tissue.t1 *= f;
        }
        t
    }

    fn all(&self) -> [Tissue; 4] {
        [self.torso, self.blood, self.myocardium, self.lesion]
    }
}

/// Heart and torso geometry in mm at end-diastole.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    /// Torso ellipse semi-axes `(x, y)`.
    pub torso_axes: (f64, f64),
    /// LV center `(x, y)`.
    pub lv_center: (f64, f64),
    pub lv_radius: f64,
    pub myo_thickness: f64,
    /// RV disk center relative to the LV center.
    pub rv_offset: (f64, f64),
    pub rv_radius: f64,
}

impl Default for Anatomy {
    fn default() -> Self {
        Anatomy {
            torso_axes: (150.0, 110.0),
            lv_center: (10.0, 0.0),
            lv_radius: 24.0,
            myo_thickness: 9.0,
            rv_offset: (-32.0, -6.0),
            rv_radius: 30.0,
        }
    }
}

/// Periodic radial contraction of the LV cavity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    /// Fractional cavity radius reduction at end-systole, in `[0, 1)`.
    pub amplitude: f64,
    pub frames: usize,
}

/// Enhanced myocardial sector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    /// Start angle and angular extent in radians.
    pub start: f64,
    pub extent: f64,
    /// Fraction of the wall covered from the endocardium outwards.
    pub transmurality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub ny: usize,
    pub nx: usize,
    pub pixel_mm: f64,
    pub anatomy: Anatomy,
    pub tissues: Tissues,
    pub motion: Motion,
    pub lesion: Option<Lesion>,
    /// Scales LV and RV radii (apical slices are smaller).
    pub slice_scale: f64,
    /// Boundary blur in pixels for the parameter maps.
    pub edge_px: f64,
}

impl PhantomSpec {
    /// A default anatomy scaled to fill an `ny × nx` grid.
    pub fn for_grid(ny: usize, nx: usize) -> Self {
        let pixel_mm = 360.0 / ny.min(nx) as f64;
        PhantomSpec {
            ny,
            nx,
            pixel_mm,
            anatomy: Anatomy::default(),
            tissues: Tissues::native_3t(),
            motion: Motion {
                amplitude: 0.35,
                frames: 20,
            },
            lesion: None,
            slice_scale: 1.0,
            edge_px: 0.5,
        }
    }

    /// Jittered anatomy and motion for dataset diversity.
    pub fn sample(ny: usize, nx: usize, rng: &mut impl Rng) -> Self {
        let mut s = Self::for_grid(ny, nx);
        let a = &mut s.anatomy;
        let j = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        a.torso_axes = (j(rng, 135.0, 165.0), j(rng, 95.0, 125.0));
        a.lv_center = (j(rng, 0.0, 20.0), j(rng, -10.0, 10.0));
        a.lv_radius = j(rng, 18.0, 30.0);
        a.myo_thickness = j(rng, 6.0, 14.0);
        a.rv_offset = (-(a.lv_radius + a.myo_thickness + j(rng, 0.0, 6.0)), j(rng, -12.0, 6.0));
        a.rv_radius = j(rng, 22.0, 32.0);
        s.motion.amplitude = j(rng, 0.2, 0.45);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.anatomy;
        if self.ny == 0 || self.nx == 0 || !(self.pixel_mm > 0.0) {
            return Err(PhantomError::Invalid("empty grid or non-positive pixel size".into()));
        }
        if !(a.myo_thickness > 0.0) || !(a.lv_radius > 0.0) || !(a.rv_radius > 0.0) {
            return Err(PhantomError::Invalid("radii and wall thickness must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.motion.amplitude) || self.motion.frames == 0 {
            return Err(PhantomError::Invalid("motion amplitude must be in [0, 1) with >= 1 frame".into()));
        }
        if !(self.slice_scale > 0.0 && self.slice_scale <= 1.0) {
            return Err(PhantomError::Invalid("slice_scale must be in (0, 1]".into()));
        }
        for t in self.tissues.all() {
            if !(t.t1 > t.t2 && t.t2 > 0.0 && t.pd > 0.0) {
                return Err(PhantomError::Invalid(format!("tissue {t:?} needs T1 > T2 > 0 and PD > 0")));
            }
        }
        let half = (self.nx as f64 * self.pixel_mm / 2.0, self.ny as f64 * self.pixel_mm / 2.0);
        if a.torso_axes.0 > half.0 || a.torso_axes.1 > half.1 {
            return Err(PhantomError::Geometry(format!(
                "torso {:?} exceeds half field of view {half:?}",
                a.torso_axes
            )));
        }
        let inside = |c: (f64, f64), r: f64| {
            // Conservative: the farthest point on the circle along each axis.
            let ex = (c.0.abs() + r) / a.torso_axes.0;
            let ey = (c.1.abs() + r) / a.torso_axes.1;
            ex * ex + ey * ey <= 1.0
        };
        let k = self.slice_scale;
        let epi = a.lv_radius * k + a.myo_thickness;
        let rv = (a.lv_center.0 + a.rv_offset.0 * k, a.lv_center.1 + a.rv_offset.1 * k);
        if !inside(a.lv_center, epi) || !inside(rv, a.rv_radius * k) {
            return Err(PhantomError::Geometry("heart extends beyond the torso".into()));
        }
        Ok(())
    }
}

/// Parameter maps and labels of one cardiac frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomFrame {
    pub t1: Array2<f64>,
    pub t2: Array2<f64>,
    pub pd: Array2<f64>,
    pub torso: Array2<bool>,
    pub lv: Array2<bool>,
    pub myo: Array2<bool>,
    pub rv: Array2<bool>,
    /// Subset of `myo`.
    pub lesion: Array2<bool>,
    pub cavity_radius_mm: f64,
    pub epi_radius_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub frames: Vec<PhantomFrame>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Cavity and epicardial radii at time `t` (frames), conserving wall area.
pub fn radii_at(spec: &PhantomSpec, t: usize) -> (f64, f64) {
    let a = &spec.anatomy;
    let r0 = a.lv_radius * spec.slice_scale;
    let e0 = r0 + a.myo_thickness;
    let phase = 2.0 * PI * t as f64 / spec.motion.frames as f64;
    let r = r0 * (1.0 - spec.motion.amplitude * 0.5 * (1.0 - phase.cos()));
    (r, (r * r + e0 * e0 - r0 * r0).sqrt())
}

/// Rasterizes frame `t`; frames are periodic with period `motion.frames`.
pub fn phantom_frame(spec: &PhantomSpec, t: usize) -> PhantomFrame {
    let (ny, nx, dx) = (spec.ny, spec.nx, spec.pixel_mm);
    let a = &spec.anatomy;
    let ts = &spec.tissues;
    let k = spec.slice_scale;
    let (rc, re) = radii_at(spec, t);
    // The RV follows the LV contraction.
    let rv_scale = rc / (a.lv_radius * k);
    let rv_c = (a.lv_center.0 + a.rv_offset.0 * k, a.lv_center.1 + a.rv_offset.1 * k);
    let rv_r = a.rv_radius * k * (0.5 + 0.5 * rv_scale);
    let w = spec.edge_px * dx;
    let frac = |d: f64| if w > 0.0 { sigmoid(-d / w) } else { f64::from(d < 0.0) };

    let mut out = PhantomFrame {
        t1: Array2::zeros((ny, nx)),
        t2: Array2::zeros((ny, nx)),
        pd: Array2::zeros((ny, nx)),
        torso: Array2::from_elem((ny, nx), false),
        lv: Array2::from_elem((ny, nx), false),
        myo: Array2::from_elem((ny, nx), false),
        rv: Array2::from_elem((ny, nx), false),
        lesion: Array2::from_elem((ny, nx), false),
        cavity_radius_mm: rc,
        epi_radius_mm: re,
    };
    for y in 0..ny {
        for x in 0..nx {
            let px = (x as f64 - nx as f64 / 2.0 + 0.5) * dx;
            let py = (y as f64 - ny as f64 / 2.0 + 0.5) * dx;
            // Approximate signed distance to the torso ellipse.
            let q = ((px / a.torso_axes.0).powi(2) + (py / a.torso_axes.1).powi(2)).sqrt();
            let d_torso = (q - 1.0) * a.torso_axes.0.min(a.torso_axes.1);
            let dl = ((px - a.lv_center.0).powi(2) + (py - a.lv_center.1).powi(2)).sqrt();
            let dr = ((px - rv_c.0).powi(2) + (py - rv_c.1).powi(2)).sqrt();
            let ang = (py - a.lv_center.1).atan2(px - a.lv_center.0);

            let f_torso = frac(d_torso);
            let f_epi = frac(dl - re);
            let f_cav = frac(dl - rc);
            let f_rv = frac(dr - rv_r) * (1.0 - f_epi);
            let in_lesion_sector = spec.lesion.is_some_and(|l| {
                let rel = (ang - l.start).rem_euclid(2.0 * PI);
                rel < l.extent
            });
            let lesion_outer = spec.lesion.map_or(rc, |l| rc + l.transmurality * (re - rc));
            let f_les = if in_lesion_sector {
                (f_epi - f_cav) * frac(dl - lesion_outer)
            } else {
                0.0
            };

            // Layered blend: torso, myocardium, lesion, blood pools.
            let mut tissue = [0.0f64; 3];
            let mut layer = |t: &Tissue, f: f64| {
                for (v, p) in tissue.iter_mut().zip([t.t1, t.t2, t.pd]) {
                    *v = *v * (1.0 - f) + p * f;
                }
            };
            layer(&ts.torso, 1.0);
            layer(&ts.myocardium, f_epi);
            layer(&ts.lesion, if f_epi - f_cav > 0.0 { f_les / (f_epi - f_cav).max(1e-12) } else { 0.0 });
            layer(&ts.blood, f_cav);
            layer(&ts.blood, f_rv);
            // Only density fades at the body edge; relaxation stays tissue-like.
            if f_torso > 1e-12 {
                out.t1[[y, x]] = tissue[0];
                out.t2[[y, x]] = tissue[1];
                out.pd[[y, x]] = tissue[2] * f_torso;
            }

            let torso = q < 1.0;
            out.torso[[y, x]] = torso;
            out.lv[[y, x]] = torso && dl < rc;
            let myo = torso && dl >= rc && dl < re;
            out.myo[[y, x]] = myo;
            out.rv[[y, x]] = torso && dr < rv_r && dl >= re;
            out.lesion[[y, x]] = myo && in_lesion_sector && dl < lesion_outer;
        }
    }
    out
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    Ok(Phantom {
        spec: spec.clone(),
        frames: (0..spec.motion.frames).map(|t| phantom_frame(spec, t)).collect(),
    })
}

/// Image contrasts the synthesizer can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Cine,
    Lge,
    T1map,
    T2map,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Cine => "cine",
            Modality::Lge => "lge",
            Modality::T1map => "t1map",
            Modality::T2map => "t2map",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = PhantomError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "cine" => Ok(Modality::Cine),
            "lge" => Ok(Modality::Lge),
            "t1map" => Ok(Modality::T1map),
            "t2map" => Ok(Modality::T2map),
            other => Err(PhantomError::Invalid(format!("unknown modality `{other}`"))),
        }
    }
}

/// Post-contrast T1 (ms) used for enhancement imaging.
fn post_contrast_t1(native: f64, is_lesion: bool) -> f64 {
    // Gadolinium shortens T1; scar retains more agent.
    let r = if is_lesion { 4.5 } else { 2.4 };
    native / r
}

/// Magnitude image of one frame for a modality.
pub fn contrast_image(frame: &PhantomFrame, tissues: &Tissues, modality: Modality) -> Array2<f64> {
    let mut img = Array2::<f64>::zeros(frame.pd.dim());
    match modality {
        Modality::Cine => {
            Zip::from(&mut img).and(&frame.pd).and(&frame.t1).and(&frame.t2).for_each(|o, &pd, &t1, &t2| {
                if t1 > 0.0 {
                    *o = pd * t2 / (t1 + t2);
                }
            });
        }
        Modality::Lge => {
            // Inversion time nulling healthy myocardium.
            let ti = post_contrast_t1(tissues.myocardium.t1, false) * std::f64::consts::LN_2;
            Zip::from(&mut img)
                .and(&frame.pd)
                .and(&frame.t1)
                .and(&frame.lesion)
                .for_each(|o, &pd, &t1, &les| {
                    if t1 > 0.0 {
                        let t1p = post_contrast_t1(t1, les);
                        *o = pd * (1.0 - 2.0 * (-ti / t1p).exp()).abs();
                    }
                });
        }
        Modality::T1map => {
            let s = simulate_weighted_series(frame, SeriesKind::T1, &[300.0]).expect("single timing");
            img = s.into_iter().next().expect("one image");
        }
        Modality::T2map => {
            let s = simulate_weighted_series(frame, SeriesKind::T2, &[30.0]).expect("single timing");
            img = s.into_iter().next().expect("one image");
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeriesKind {
    /// Inversion recovery, `|A − B·exp(−TI/T1)|` with `A = PD`, `B = 2·PD`.
    T1,
    /// Spin echo decay, `PD·exp(−TE/T2)`.
    T2,
}

/// One image per timing (ms); timings must be sorted ascending.
pub fn simulate_weighted_series(frame: &PhantomFrame, kind: SeriesKind, timings: &[f64]) -> Result<Vec<Array2<f64>>> {
    if timings.windows(2).any(|w| w[1] < w[0]) || timings.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(PhantomError::Invalid("timings must be finite, non-negative and sorted".into()));
    }
    Ok(timings
        .iter()
        .map(|&tau| {
            let mut img = Array2::<f64>::zeros(frame.pd.dim());
            Zip::from(&mut img).and(&frame.pd).and(&frame.t1).and(&frame.t2).for_each(|o, &pd, &t1, &t2| {
                *o = match kind {
                    SeriesKind::T1 if t1 > 0.0 => t1_signal(pd, 2.0 * pd, t1, tau),
                    SeriesKind::T2 if t2 > 0.0 => t2_signal(pd, t2, tau),
                    _ => 0.0,
                };
            });
            img
        })
        .collect())
}

pub fn t1_signal(a: f64, b: f64, t1: f64, ti: f64) -> f64 {
    (a - b * (-ti / t1).exp()).abs()
}

pub fn t2_signal(pd: f64, t2: f64, te: f64) -> f64 {
    pd * (-te / t2).exp()
}

/// Smooth normalized coil maps: quadratic magnitude profiles peaking at
/// `n` positions around the grid, times linear phase ramps.
pub fn simulate_coils(n: usize, shape: (usize, usize), seed: u64) -> Result<CoilSensitivities> {
    if n == 0 {
        return Err(PhantomError::Invalid("at least one coil is required".into()));
    }
    let (ny, nx) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f_696c);
    let mut raw = Array3::<Complex64>::zeros((n, ny, nx));
    for (j, mut coil) in raw.outer_iter_mut().enumerate() {
        let theta = 2.0 * PI * (j as f64 + rng.random_range(-0.15..0.15)) / n as f64;
        let (c, s) = (theta.cos(), theta.sin());
        let curv = rng.random_range(0.1..0.3);
        let (p0, px, py) = (
            rng.random_range(-PI..PI),
            rng.random_range(-0.8..0.8),
            rng.random_range(-0.8..0.8),
        );
        for ((y, x), v) in coil.indexed_iter_mut() {
            let u = 2.0 * (x as f64 + 0.5) / nx as f64 - 1.0;
            let w = 2.0 * (y as f64 + 0.5) / ny as f64 - 1.0;
            let along = u * c + w * s;
            let across = -u * s + w * c;
            // Positive on [-1, 1]² for curv < 0.3.
            let mag = if n == 1 {
                1.0
            } else {
                (1.0 + 0.8 * along).powi(2) / 3.24 + 0.05 - curv * across * across * 0.1
            };
            *v = Complex64::from_polar(mag, p0 + px * u + py * w);
        }
    }
    Ok(CoilSensitivities::normalized(raw, 0.0))
}

/// Multi-coil k-space from a magnitude image.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesized {
    pub kspace: Array3<Complex64>,
    pub sens: CoilSensitivities,
    /// Complex image before coil weighting.
    pub image: Array2<Complex64>,
    /// Noise variance per complex sample.
    pub noise_var: f64,
}

/// Smooth phase `a·u + b·v + c·(u² + v²)` on normalized coordinates.
pub fn synthetic_phase(shape: (usize, usize), rng: &mut impl Rng) -> Array2<f64> {
    let (ny, nx) = shape;
    let (a, b, c) = (
        rng.random_range(-PI / 2.0..PI / 2.0),
        rng.random_range(-PI / 2.0..PI / 2.0),
        rng.random_range(-PI / 4.0..PI / 4.0),
    );
    Array2::from_shape_fn(shape, |(y, x)| {
        let u = 2.0 * (x as f64 + 0.5) / nx as f64 - 1.0;
        let v = 2.0 * (y as f64 + 0.5) / ny as f64 - 1.0;
        a * u + b * v + c * (u * u + v * v)
    })
}

/// Mean of `|m|²` over pixels above a millionth of the peak.
pub fn signal_power(mag: &Array2<f64>) -> f64 {
    let peak = mag.iter().copied().fold(0.0, f64::max);
    let (mut s, mut n) = (0.0, 0usize);
    for &v in mag {
        if v > 1e-6 * peak {
            s += v * v;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Adds phase, applies coils, transforms and adds complex Gaussian noise
/// with variance `signal_power / snr` per complex sample. `snr = ∞` is
/// noiseless.
pub fn synthesize_kspace(mag: &Array2<f64>, n_coils: usize, snr: f64, seed: u64) -> Result<Synthesized> {
    if !(snr > 0.0) {
        return Err(PhantomError::Invalid(format!("snr must be > 0, got {snr}")));
    }
    if mag.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(PhantomError::Invalid("magnitude must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = synthetic_phase(mag.dim(), &mut rng);
    let image = Zip::from(mag).and(&phase).map_collect(|&m, &p| Complex64::from_polar(m, p));
    let sens = simulate_coils(n_coils, mag.dim(), seed)?;
    let mut kspace = physics::fft2c(&physics::coil_expand(&image, &sens).expect("shapes match"));
    let noise_var = if snr.is_infinite() { 0.0 } else { signal_power(mag) / snr };
    if noise_var > 0.0 {
        let normal = Normal::new(0.0, (noise_var / 2.0).sqrt()).expect("finite std");
        let mut nrng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_65);
        for v in kspace.iter_mut() {
            *v += Complex64::new(normal.sample(&mut nrng), normal.sample(&mut nrng));
        }
    }
    Ok(Synthesized {
        kspace,
        sens,
        image,
        noise_var,
    })
}

/// Labels attached to a synthetic record.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub lv: Array2<bool>,
    pub myo: Array2<bool>,
    pub rv: Array2<bool>,
    pub lesion: Array2<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub id: String,
    pub subject: String,
    pub slice: usize,
    pub frame: usize,
    pub metadata: ScanMetadata,
    pub pixel_spacing_mm: [f64; 2],
    pub slice_thickness_mm: f64,
    /// Fully sampled k-space `[coils, ky, kx]`.
    pub kspace: Array3<Complex64>,
    /// `SoS(ifft2c(kspace))`.
    pub reference: Array2<f64>,
    pub sens: Option<Array3<Complex64>>,
    pub segmentation: Option<Segmentation>,
    pub masks: Vec<MaskRecord>,
}

impl ScanRecord {
    pub fn metadata_text(&self) -> String {
        compose_metadata_text(&self.metadata)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.kspace.dim()
    }

    /// Largest deviation of the stored reference from `SoS(ifft2c(kspace))`.
    pub fn reference_error(&self) -> f64 {
        let r = physics::sos(&physics::ifft2c(&self.kspace));
        r.iter()
            .zip(&self.reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn round_c64(v: Complex64) -> Complex64 {
    Complex64::new(v.re as f32 as f64, v.im as f32 as f64)
}

/// Builds a record whose arrays are exactly representable in the container's
/// 32-bit blobs, so a write/read roundtrip is lossless.
#[allow(clippy::too_many_arguments)]
pub fn make_record(
    id: &str,
    subject: &str,
    slice: usize,
    frame: usize,
    metadata: ScanMetadata,
    pixel_mm: f64,
    synth: &Synthesized,
    segmentation: Option<Segmentation>,
) -> ScanRecord {
    let kspace = synth.kspace.mapv(round_c64);
    let reference = physics::sos(&physics::ifft2c(&kspace)).mapv(|v| v as f32 as f64);
    ScanRecord {
        id: id.to_string(),
        subject: subject.to_string(),
        slice,
        frame,
        metadata,
        pixel_spacing_mm: [pixel_mm, pixel_mm],
        slice_thickness_mm: 8.0,
        kspace,
        reference,
        sens: Some(synth.sens.maps().mapv(round_c64)),
        segmentation,
        masks: Vec::new(),
    }
}

/// Dataset synthesis settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub subjects: usize,
    pub frames_per_subject: usize,
    pub slices_per_subject: usize,
    pub ny: usize,
    pub nx: usize,
    pub coils: usize,
    pub snr: f64,
    pub modalities: Vec<Modality>,
    /// Field strengths drawn uniformly per subject.
    pub fields_t: Vec<f64>,
    /// Fraction of subjects with an enhanced lesion.
    pub lesion_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects: 4,
            frames_per_subject: 2,
            slices_per_subject: 1,
            ny: 64,
            nx: 64,
            coils: 4,
            snr: 40.0,
            modalities: vec![Modality::Cine],
            fields_t: vec![1.5, 3.0],
            lesion_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.frames_per_subject == 0 || self.slices_per_subject == 0 {
            return Err(PhantomError::Invalid("subjects, frames and slices must be >= 1".into()));
        }
        if self.modalities.is_empty() || self.fields_t.is_empty() {
            return Err(PhantomError::Invalid("modalities and field strengths must be non-empty".into()));
        }
        if !(self.snr > 0.0) {
            return Err(PhantomError::Invalid("snr must be > 0".into()));
        }
        if self.coils == 0 {
            return Err(PhantomError::Invalid("coils must be >= 1".into()));
        }
        Ok(())
    }

    pub fn record_count(&self) -> usize {
        self.subjects * self.frames_per_subject * self.slices_per_subject * self.modalities.len()
    }
}

fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(seed);
    for p in parts {
        h.write_u64(*p);
    }
    h.finish()
}

/// Records of one subject in (slice, frame, modality) order.
pub fn subject_records(cfg: &SynthConfig, subject: usize) -> Result<Vec<ScanRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[subject as u64]));
    let mut spec = PhantomSpec::sample(cfg.ny, cfg.nx, &mut rng);
    let field = cfg.fields_t[rng.random_range(0..cfg.fields_t.len())];
    spec.tissues = Tissues::at_field(field);
    if rng.random::<f64>() < cfg.lesion_fraction {
        spec.lesion = Some(Lesion {
            start: rng.random_range(0.0..2.0 * PI),
            extent: rng.random_range(0.5..1.5),
            transmurality: rng.random_range(0.4..1.0),
        });
    }
    let subj = format!("s{subject:04}");
    let mut out = Vec::new();
    for sl in 0..cfg.slices_per_subject {
        spec.slice_scale = 1.0 - 0.5 * sl as f64 / cfg.slices_per_subject as f64;
        spec.validate()?;
        // Spread the sampled frames over the cycle, starting at end-diastole.
        for fi in 0..cfg.frames_per_subject {
            let t = fi * spec.motion.frames / cfg.frames_per_subject;
            let frame = phantom_frame(&spec, t);
            for (mi, &m) in cfg.modalities.iter().enumerate() {
                let mut img = contrast_image(&frame, &spec.tissues, m);
                let peak = img.iter().copied().fold(0.0, f64::max);
                if peak > 0.0 {
                    img.mapv_inplace(|v| v / peak);
                }
                let seed = mix_seed(cfg.seed, &[subject as u64, sl as u64, fi as u64, mi as u64]);
                let synth = synthesize_kspace(&img, cfg.coils, cfg.snr, seed)?;
                let meta = ScanMetadata {
                    modality: m.name().to_string(),
                    view: Some("sax".into()),
                    field_strength_t: Some(field),
                    vendor: Some("simulated".into()),
                };
                let seg = Segmentation {
                    lv: frame.lv.clone(),
                    myo: frame.myo.clone(),
                    rv: frame.rv.clone(),
                    lesion: frame.lesion.clone(),
                };
                let id = format!("{subj}_sl{sl:02}_fr{t:02}_{}", m.name());
                out.push(make_record(&id, &subj, sl, t, meta, spec.pixel_mm, &synth, Some(seg)));
            }
        }
    }
    Ok(out)
}

/// All records, in subject order. `jobs > 1` splits subjects across
/// threads; the output does not depend on `jobs`.
pub fn generate_dataset(cfg: &SynthConfig, jobs: usize) -> Result<Vec<ScanRecord>> {
    cfg.validate()?;
    let jobs = jobs.clamp(1, cfg.subjects);
    let per = cfg.subjects.div_ceil(jobs);
    let chunks: Vec<Result<Vec<ScanRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                s.spawn(move || {
                    let mut v = Vec::new();
                    for subj in j * per..((j + 1) * per).min(cfg.subjects) {
                        v.extend(subject_records(cfg, subj)?);
                    }
                    Ok(v)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(cfg.record_count());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Container

/// 64-bit FNV-1a of `bytes`, as 16 hex digits.
pub fn digest(bytes: &[u8]) -> String {
    let mut h = FnvHasher::default();
    h.write(bytes);
    format!("{:016x}", h.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    file: String,
    dtype: String,
    shape: Vec<usize>,
    digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecordManifest {
    format_version: u32,
    id: String,
    subject: String,
    slice: usize,
    frame: usize,
    metadata: ScanMetadata,
    metadata_text: String,
    pixel_spacing_mm: [f64; 2],
    slice_thickness_mm: f64,
    arrays: std::collections::BTreeMap<String, BlobEntry>,
    masks: Vec<MaskRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    records: Vec<String>,
}

fn c64_bytes(a: &Array3<Complex64>) -> Vec<u8> {
    let mut b = Vec::with_capacity(a.len() * 8);
    for v in a {
        b.extend_from_slice(&(v.re as f32).to_le_bytes());
        b.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    b
}

fn f32_bytes(a: &Array2<f64>) -> Vec<u8> {
    a.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn u8_bytes(a: &Array2<bool>) -> Vec<u8> {
    a.iter().map(|&v| u8::from(v)).collect()
}

fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Writes one record into `dir/<id>/` via a temporary directory and rename.
pub fn write_record(dir: &Path, rec: &ScanRecord) -> Result<()> {
    let final_dir = dir.join(&rec.id);
    let tmp_dir = dir.join(format!(".{}.tmp", rec.id));
    if tmp_dir.exists() {
        fs::remove_dir_all(&tmp_dir).map_err(io_err(&tmp_dir))?;
    }
    fs::create_dir_all(&tmp_dir).map_err(io_err(&tmp_dir))?;
    let mut arrays = std::collections::BTreeMap::new();
    let (c, ny, nx) = rec.kspace.dim();
    let mut blobs: Vec<(&str, &str, Vec<usize>, Vec<u8>)> = vec![
        ("kspace", "complex64", vec![c, ny, nx], c64_bytes(&rec.kspace)),
        ("reference", "float32", vec![ny, nx], f32_bytes(&rec.reference)),
    ];
    if let Some(s) = &rec.sens {
        blobs.push(("sens", "complex64", s.shape().to_vec(), c64_bytes(s)));
    }
    if let Some(seg) = &rec.segmentation {
        for (role, m) in [("seg_lv", &seg.lv), ("seg_myo", &seg.myo), ("seg_rv", &seg.rv), ("seg_lesion", &seg.lesion)] {
            blobs.push((role, "u8", vec![ny, nx], u8_bytes(m)));
        }
    }
    for (role, dtype, shape, bytes) in blobs {
        let file = format!("{role}.bin");
        fs::write(tmp_dir.join(&file), &bytes).map_err(io_err(&tmp_dir.join(&file)))?;
        arrays.insert(
            role.to_string(),
            BlobEntry {
                file,
                dtype: dtype.to_string(),
                shape,
                digest: digest(&bytes),
            },
        );
    }
    let manifest = RecordManifest {
        format_version: CONTAINER_VERSION,
        id: rec.id.clone(),
        subject: rec.subject.clone(),
        slice: rec.slice,
        frame: rec.frame,
        metadata: rec.metadata.clone(),
        metadata_text: rec.metadata_text(),
        pixel_spacing_mm: rec.pixel_spacing_mm,
        slice_thickness_mm: rec.slice_thickness_mm,
        arrays,
        masks: rec.masks.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(tmp_dir.join("manifest.json"), text).map_err(io_err(&tmp_dir))?;
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir).map_err(io_err(&final_dir))?;
    }
    fs::rename(&tmp_dir, &final_dir).map_err(io_err(&final_dir))
}

/// Writes every record and then `dataset.json` listing them in order.
pub fn write_dataset(dir: &Path, records: &[ScanRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for r in records {
        write_record(dir, r)?;
    }
    let m = DatasetManifest {
        format_version: CONTAINER_VERSION,
        records: records.iter().map(|r| r.id.clone()).collect(),
    };
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
    write_file_atomic(&dir.join("dataset.json"), text.as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PhantomError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Record ids in container order.
pub fn list_records(dir: &Path) -> Result<Vec<String>> {
    let m: DatasetManifest = read_json(&dir.join("dataset.json"))?;
    if m.format_version != CONTAINER_VERSION {
        return Err(PhantomError::Version {
            found: m.format_version,
        });
    }
    Ok(m.records)
}

fn read_blob(dir: &Path, e: &BlobEntry, dtype: &str, numel: usize) -> Result<Vec<u8>> {
    let path = dir.join(&e.file);
    if !path.exists() {
        return Err(PhantomError::MissingBlob(path));
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let found = digest(&bytes);
    if found != e.digest {
        return Err(PhantomError::Digest {
            path,
            expected: e.digest.clone(),
            found,
        });
    }
    let width = match dtype {
        "complex64" => 8,
        "float32" => 4,
        _ => 1,
    };
    if e.dtype != dtype || e.shape.iter().product::<usize>() != numel || bytes.len() != numel * width {
        return Err(PhantomError::Format {
            path,
            detail: format!("expected {dtype} with {numel} elements, manifest says {} {:?}", e.dtype, e.shape),
        });
    }
    Ok(bytes)
}

fn f32_at(b: &[u8], i: usize) -> f64 {
    f32::from_le_bytes([b[4 * i], b[4 * i + 1], b[4 * i + 2], b[4 * i + 3]]) as f64
}

/// Reads and verifies `dir/<id>/`.
pub fn read_record(dir: &Path, id: &str) -> Result<ScanRecord> {
    let rdir = dir.join(id);
    let mpath = rdir.join("manifest.json");
    let m: RecordManifest = read_json(&mpath)?;
    if m.format_version != CONTAINER_VERSION {
        return Err(PhantomError::Version {
            found: m.format_version,
        });
    }
    let entry = |role: &str| {
        m.arrays.get(role).ok_or_else(|| PhantomError::Format {
            path: mpath.clone(),
            detail: format!("no `{role}` array"),
        })
    };
    let ks = entry("kspace")?;
    if ks.shape.len() != 3 {
        return Err(PhantomError::Format {
            path: mpath.clone(),
            detail: format!("kspace shape {:?} is not 3-D", ks.shape),
        });
    }
    let (c, ny, nx) = (ks.shape[0], ks.shape[1], ks.shape[2]);
    let complex = |e: &BlobEntry, n: usize, shape: (usize, usize, usize)| -> Result<Array3<Complex64>> {
        let b = read_blob(&rdir, e, "complex64", n)?;
        let v = (0..n).map(|i| Complex64::new(f32_at(&b, 2 * i), f32_at(&b, 2 * i + 1))).collect();
        Ok(Array3::from_shape_vec(shape, v).expect("length checked"))
    };
    let kspace = complex(ks, c * ny * nx, (c, ny, nx))?;
    let rb = read_blob(&rdir, entry("reference")?, "float32", ny * nx)?;
    let reference = Array2::from_shape_fn((ny, nx), |(y, x)| f32_at(&rb, y * nx + x));
    let sens = match m.arrays.get("sens") {
        Some(e) => Some(complex(e, c * ny * nx, (c, ny, nx))?),
        None => None,
    };
    let mask = |role: &str| -> Result<Array2<bool>> {
        let b = read_blob(&rdir, entry(role)?, "u8", ny * nx)?;
        Ok(Array2::from_shape_fn((ny, nx), |(y, x)| b[y * nx + x] != 0))
    };
    let segmentation = if m.arrays.contains_key("seg_lv") {
        Some(Segmentation {
            lv: mask("seg_lv")?,
            myo: mask("seg_myo")?,
            rv: mask("seg_rv")?,
            lesion: mask("seg_lesion")?,
        })
    } else {
        None
    };
    Ok(ScanRecord {
        id: m.id,
        subject: m.subject,
        slice: m.slice,
        frame: m.frame,
        metadata: m.metadata,
        pixel_spacing_mm: m.pixel_spacing_mm,
        slice_thickness_mm: m.slice_thickness_mm,
        kspace,
        reference,
        sens,
        segmentation,
        masks: m.masks,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Vec<ScanRecord>> {
    list_records(dir)?.iter().map(|id| read_record(dir, id)).collect()
}

/// Digest over every record manifest in container order.
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let mut all = Vec::new();
    for id in list_records(dir)? {
        let p = dir.join(&id).join("manifest.json");
        all.extend(fs::read(&p).map_err(io_err(&p))?);
    }
    Ok(digest(&all))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modality_parse_roundtrip() {
        for m in [Modality::Cine, Modality::Lge, Modality::T1map, Modality::T2map] {
            assert_eq!(m.name().parse::<Modality>().unwrap(), m);
        }
        assert!("flow".parse::<Modality>().is_err());
    }

    #[test]
    fn wall_area_is_conserved_through_the_cycle() {
        let s = PhantomSpec::for_grid(64, 64);
        let (r0, e0) = radii_at(&s, 0);
        for t in 0..s.motion.frames {
            let (r, e) = radii_at(&s, t);
            assert!(((e * e - r * r) - (e0 * e0 - r0 * r0)).abs() < 1e-9);
            assert!(r <= r0 + 1e-12);
        }
    }

    #[test]
    fn signal_models_at_zero_time() {
        assert_eq!(t2_signal(0.8, 45.0, 0.0), 0.8);
        assert_eq!(t1_signal(1.0, 2.0, 1000.0, 0.0), 1.0);
        assert!(t1_signal(1.0, 2.0, 1000.0, 1000.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn snr_must_be_positive() {
        let img = Array2::from_elem((8, 8), 1.0);
        assert!(synthesize_kspace(&img, 2, 0.0, 1).is_err());
        assert!(synthesize_kspace(&img, 2, -3.0, 1).is_err());
        assert!(synthesize_kspace(&img, 2, f64::INFINITY, 1).is_ok());
    }
}
