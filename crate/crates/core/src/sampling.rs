//! Retrospective Cartesian undersampling masks.
//!
//! A mask keeps its base pattern separately from the union with the
//! autocalibration (ACS) region, because the acceleration factor counts the
//! pattern's own samples only: `AF = ny·nx / |base|`. Points of the base
//! pattern that happen to fall inside the ACS region still count; the ACS
//! lines or block added on top do not.

use std::fmt;
use std::io::Write;

use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{self, KSpaceVolume};

/// Golden-angle increment between consecutive radial spokes, in degrees.
pub const GOLDEN_ANGLE_DEG: f64 = 111.246;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("invalid mask parameter: {0}")]
    Invalid(String),
    #[error("the base pattern has no samples outside the calibration additions")]
    NoPatternSamples,
    #[error("shape mismatch: mask {mask:?} vs k-space {kspace:?}")]
    Shape { mask: (usize, usize), kspace: (usize, usize) },
    #[error("malformed mask encoding: {0}")]
    Encoding(String),
}

pub type Result<T> = std::result::Result<T, MaskError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Uniform,
    Random,
    Radial,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::Uniform, Pattern::Random, Pattern::Radial];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Uniform => "uniform",
            Pattern::Random => "random",
            Pattern::Radial => "radial",
        }
    }

    /// Position of the pattern in [`Pattern::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Pattern {
    type Err = MaskError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" => Ok(Pattern::Uniform),
            "random" => Ok(Pattern::Random),
            "radial" => Ok(Pattern::Radial),
            other => Err(MaskError::Invalid(format!("unknown pattern `{other}`"))),
        }
    }
}

/// Fully sampled calibration region at the k-space center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Acs {
    /// Centered full-width ky lines.
    Lines(usize),
    /// Centered `h × w` block.
    Block { h: usize, w: usize },
}

impl Acs {
    /// Row and column ranges of the region on an `ny × nx` grid.
    pub fn bounds(&self, ny: usize, nx: usize) -> ((usize, usize), (usize, usize)) {
        match *self {
            Acs::Lines(n) => {
                let n = n.min(ny);
                let y0 = ny / 2 - n / 2;
                ((y0, y0 + n), (0, nx))
            }
            Acs::Block { h, w } => {
                let (h, w) = (h.min(ny), w.min(nx));
                let (y0, x0) = (ny / 2 - h / 2, nx / 2 - w / 2);
                ((y0, y0 + h), (x0, x0 + w))
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        match *self {
            Acs::Lines(n) => n == 0,
            Acs::Block { h, w } => h == 0 || w == 0,
        }
    }

    pub fn region(&self, ny: usize, nx: usize) -> Array2<bool> {
        let ((y0, y1), (x0, x1)) = self.bounds(ny, nx);
        Array2::from_shape_fn((ny, nx), |(y, x)| y >= y0 && y < y1 && x >= x0 && x < x1)
    }

    pub fn area(&self, ny: usize, nx: usize) -> usize {
        let ((y0, y1), (x0, x1)) = self.bounds(ny, nx);
        (y1 - y0) * (x1 - x0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UndersamplingMask {
    /// Acquired samples: base pattern ∪ ACS.
    pub grid: Array2<bool>,
    /// The pattern before the ACS region is added.
    pub base: Array2<bool>,
    pub pattern: Pattern,
    pub nominal_af: f64,
    pub acs: Acs,
    pub seed: u64,
}

impl UndersamplingMask {
    fn assemble(base: Array2<bool>, pattern: Pattern, nominal_af: f64, acs: Acs, seed: u64) -> Self {
        let (ny, nx) = base.dim();
        let mut grid = base.clone();
        Zip::from(&mut grid).and(&acs.region(ny, nx)).for_each(|g, &a| *g |= a);
        UndersamplingMask {
            grid,
            base,
            pattern,
            nominal_af,
            acs,
            seed,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn acquired(&self) -> usize {
        self.grid.iter().filter(|&&v| v).count()
    }

    pub fn pattern_samples(&self) -> usize {
        self.base.iter().filter(|&&v| v).count()
    }

    /// `ny·nx / |base pattern|`.
    pub fn effective_af(&self) -> Result<f64> {
        effective_af(self)
    }

    /// Row-major flags of the acquired grid.
    pub fn flags(&self) -> Vec<bool> {
        self.grid.iter().copied().collect()
    }

    pub fn text(&self) -> UndersamplingText {
        UndersamplingText::new(self.pattern, self.nominal_af)
    }

    /// Run-length encoded form for the dataset container.
    pub fn to_record(&self) -> MaskRecord {
        let (ny, nx) = self.dims();
        MaskRecord {
            ny,
            nx,
            pattern: self.pattern,
            nominal_af: self.nominal_af,
            effective_af: self.effective_af().ok(),
            acs: self.acs,
            seed: self.seed,
            grid_rle: rle_encode(&self.grid),
            base_rle: rle_encode(&self.base),
        }
    }

    pub fn from_record(r: &MaskRecord) -> Result<Self> {
        let grid = rle_decode(&r.grid_rle, r.ny, r.nx)?;
        let base = rle_decode(&r.base_rle, r.ny, r.nx)?;
        let m = UndersamplingMask {
            grid,
            base,
            pattern: r.pattern,
            nominal_af: r.nominal_af,
            acs: r.acs,
            seed: r.seed,
        };
        let rebuilt = Self::assemble(m.base.clone(), m.pattern, m.nominal_af, m.acs, m.seed);
        if rebuilt.grid != m.grid {
            return Err(MaskError::Encoding("grid is not the union of base and ACS".into()));
        }
        Ok(m)
    }

    /// Binary 8-bit PGM (acquired = 255).
    pub fn write_pgm(&self, out: &mut impl Write) -> std::io::Result<()> {
        let (ny, nx) = self.dims();
        write!(out, "P5\n{nx} {ny}\n255\n")?;
        let bytes: Vec<u8> = self.grid.iter().map(|&v| if v { 255 } else { 0 }).collect();
        out.write_all(&bytes)
    }
}

/// Serialized mask: each row is a list of alternating run lengths starting
/// with a run of unsampled entries (possibly zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub ny: usize,
    pub nx: usize,
    pub pattern: Pattern,
    pub nominal_af: f64,
    pub effective_af: Option<f64>,
    pub acs: Acs,
    pub seed: u64,
    pub grid_rle: Vec<Vec<u32>>,
    pub base_rle: Vec<Vec<u32>>,
}

pub fn rle_encode(grid: &Array2<bool>) -> Vec<Vec<u32>> {
    grid.outer_iter()
        .map(|row| {
            let mut runs = Vec::new();
            let mut cur = false;
            let mut len = 0u32;
            for &v in row.iter() {
                if v == cur {
                    len += 1;
                } else {
                    runs.push(len);
                    cur = v;
                    len = 1;
                }
            }
            runs.push(len);
            runs
        })
        .collect()
}

pub fn rle_decode(rows: &[Vec<u32>], ny: usize, nx: usize) -> Result<Array2<bool>> {
    if rows.len() != ny {
        return Err(MaskError::Encoding(format!("{} rows, expected {ny}", rows.len())));
    }
    let mut grid = Array2::from_elem((ny, nx), false);
    for (y, runs) in rows.iter().enumerate() {
        let mut x = 0usize;
        for (i, &len) in runs.iter().enumerate() {
            let len = len as usize;
            if x + len > nx {
                return Err(MaskError::Encoding(format!("row {y} overflows {nx} columns")));
            }
            if i % 2 == 1 {
                grid.row_mut(y).slice_mut(ndarray::s![x..x + len]).fill(true);
            }
            x += len;
        }
        if x != nx {
            return Err(MaskError::Encoding(format!("row {y} covers {x} of {nx} columns")));
        }
    }
    Ok(grid)
}

fn check_common(ny: usize, nx: usize, af: f64) -> Result<()> {
    if ny == 0 || nx == 0 {
        return Err(MaskError::Invalid(format!("grid {ny}x{nx} is empty")));
    }
    if !(af >= 1.0) || !af.is_finite() {
        return Err(MaskError::Invalid(format!("af must be a finite value >= 1, got {af}")));
    }
    Ok(())
}

/// Every `round(af)`-th ky line starting at `offset`, plus centered ACS lines.
pub fn gen_uniform(ny: usize, nx: usize, af: f64, acs_lines: usize, offset: usize) -> Result<UndersamplingMask> {
    check_common(ny, nx, af)?;
    if acs_lines > ny {
        return Err(MaskError::Invalid(format!("acs_lines {acs_lines} exceeds ny {ny}")));
    }
    let step = af.round() as usize;
    if offset >= ny {
        return Err(MaskError::Invalid(format!("offset {offset} leaves no sampled line (ny {ny})")));
    }
    let base = Array2::from_shape_fn((ny, nx), |(y, _)| y >= offset && (y - offset) % step == 0);
    Ok(UndersamplingMask::assemble(base, Pattern::Uniform, af, Acs::Lines(acs_lines), 0))
}

/// `round(ny/af)` ky lines outside the ACS drawn without replacement with a
/// Gaussian density centered on the k-space center (σ = ny/6).
pub fn gen_random(ny: usize, nx: usize, af: f64, acs_lines: usize, seed: u64) -> Result<UndersamplingMask> {
    check_common(ny, nx, af)?;
    if acs_lines > ny {
        return Err(MaskError::Invalid(format!("acs_lines {acs_lines} exceeds ny {ny}")));
    }
    let target = (ny as f64 / af).round() as usize;
    if target < 1 {
        return Err(MaskError::Invalid(format!("af {af} yields no lines for ny {ny}")));
    }
    let ((a0, a1), _) = Acs::Lines(acs_lines).bounds(ny, nx);
    let candidates: Vec<usize> = (0..ny).filter(|&y| y < a0 || y >= a1).collect();
    if candidates.len() < target {
        return Err(MaskError::Invalid(format!(
            "{target} lines requested but only {} lie outside the ACS",
            candidates.len()
        )));
    }
    let sigma = ny as f64 / 6.0;
    let center = (ny / 2) as f64;
    let weight = |i: usize| {
        let d = (candidates[i] as f64 - center) / sigma;
        (-0.5 * d * d).exp().max(1e-12)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample_weighted(&mut rng, candidates.len(), weight, target)
        .map_err(|e| MaskError::Invalid(format!("weighted sampling failed: {e}")))?;
    let mut rows = vec![false; ny];
    for i in picked.iter() {
        rows[candidates[i]] = true;
    }
    let base = Array2::from_shape_fn((ny, nx), |(y, _)| rows[y]);
    Ok(UndersamplingMask::assemble(base, Pattern::Random, af, Acs::Lines(acs_lines), seed))
}

/// Number of spokes from the area budget: the samples allowed by `af`
/// minus the ACS block, divided by the samples per spoke.
pub fn radial_spoke_budget(ny: usize, nx: usize, af: f64, acs: Acs) -> usize {
    let budget = (ny * nx) as f64 / af - acs.area(ny, nx) as f64;
    (budget / ny.max(nx) as f64).round().max(0.0) as usize
}

/// Golden-angle spokes through the k-space center, rasterized by nearest
/// neighbour along the dominant axis.
pub fn radial_spokes(ny: usize, nx: usize, spokes: usize) -> Array2<bool> {
    let mut grid = Array2::from_elem((ny, nx), false);
    let (cy, cx) = ((ny / 2) as f64, (nx / 2) as f64);
    for i in 0..spokes {
        let theta = (i as f64 * GOLDEN_ANGLE_DEG).to_radians();
        let (dy, dx) = (theta.sin(), theta.cos());
        if dx.abs() >= dy.abs() {
            // One sample per column.
            for x in 0..nx {
                let t = (x as f64 - cx) / dx;
                let y = (cy + t * dy).round();
                if y >= 0.0 && (y as usize) < ny {
                    grid[[y as usize, x]] = true;
                }
            }
        } else {
            for y in 0..ny {
                let t = (y as f64 - cy) / dy;
                let x = (cx + t * dx).round();
                if x >= 0.0 && (x as usize) < nx {
                    grid[[y, x as usize]] = true;
                }
            }
        }
    }
    grid
}

/// Golden-angle radial pattern with a centered calibration block. The spoke
/// count starts from [`radial_spoke_budget`] and is then moved to the count
/// whose rasterized pattern gives the effective AF closest to `af`, since
/// overlapping spokes near the center make the budget overshoot.
pub fn gen_radial(ny: usize, nx: usize, af: f64, acs_block: (usize, usize)) -> Result<UndersamplingMask> {
    check_common(ny, nx, af)?;
    let acs = Acs::Block {
        h: acs_block.0,
        w: acs_block.1,
    };
    let total = (ny * nx) as f64;
    let count = |n: usize| radial_spokes(ny, nx, n).iter().filter(|&&v| v).count();
    let af_of = |n: usize| {
        let c = count(n);
        if c == 0 {
            f64::INFINITY
        } else {
            total / c as f64
        }
    };
    let mut n = radial_spoke_budget(ny, nx, af, acs).max(1);
    let mut err = (af_of(n) - af).abs();
    // Effective AF falls monotonically with the spoke count; walk downhill.
    loop {
        let mut moved = false;
        for cand in [n + 1, n.saturating_sub(1)] {
            if cand == 0 || cand == n {
                continue;
            }
            let e = (af_of(cand) - af).abs();
            if e < err {
                n = cand;
                err = e;
                moved = true;
                break;
            }
        }
        if !moved {
            break;
        }
    }
    let base = radial_spokes(ny, nx, n);
    if !base.iter().any(|&v| v) {
        return Err(MaskError::Invalid("pattern has zero spokes".into()));
    }
    Ok(UndersamplingMask::assemble(base, Pattern::Radial, af, acs, 0))
}

/// `ny·nx / |base pattern|`, failing when the pattern is empty.
pub fn effective_af(mask: &UndersamplingMask) -> Result<f64> {
    let n = mask.pattern_samples();
    if n == 0 {
        return Err(MaskError::NoPatternSamples);
    }
    let (ny, nx) = mask.dims();
    Ok((ny * nx) as f64 / n as f64)
}

/// Everything needed to regenerate a mask on a given grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub pattern: Pattern,
    pub af: f64,
    /// ACS lines for uniform/random, block side for radial.
    pub acs: usize,
    pub seed: u64,
}

impl MaskSpec {
    pub fn generate(&self, ny: usize, nx: usize) -> Result<UndersamplingMask> {
        match self.pattern {
            Pattern::Uniform => gen_uniform(ny, nx, self.af, self.acs, 0),
            Pattern::Random => gen_random(ny, nx, self.af, self.acs, self.seed),
            Pattern::Radial => gen_radial(ny, nx, self.af, (self.acs, self.acs)),
        }
    }
}

/// Zeroes k-space entries outside the mask on every coil.
pub fn apply_mask(k: &KSpaceVolume, mask: &UndersamplingMask) -> Result<KSpaceVolume> {
    let (ny, nx) = k.dims();
    if mask.dims() != (ny, nx) {
        return Err(MaskError::Shape {
            mask: mask.dims(),
            kspace: (ny, nx),
        });
    }
    let data = physics::apply_mask_stack(&k.data, &mask.grid).expect("dims checked");
    Ok(KSpaceVolume {
        data,
        geometry: k.geometry.clone(),
        scan_id: k.scan_id.clone(),
    })
}

/// Canonical undersampling description, e.g. `pattern radial; af 12.5`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UndersamplingText(String);

impl UndersamplingText {
    pub fn new(pattern: Pattern, af: f64) -> Self {
        UndersamplingText(format!("pattern {}; af {}", pattern.name(), format_af(af)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UndersamplingText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Shortest decimal rendering: `8`, `12.5`, `4.25`.
pub fn format_af(af: f64) -> String {
    let s = format!("{af:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}
