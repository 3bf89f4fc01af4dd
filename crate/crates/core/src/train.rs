//! End-to-end training: SSIM loss, step schedule, mixed undersampling and a
//! resumable, deterministic loop.

use std::fs;
use std::hash::Hasher;
use std::io::Write;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamW, AutodiffError, ConvSpec, ParamStore, ParamStoreError, Real, Tensor};
use crate::eval::{self, gaussian_taps, EvalError, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
use crate::model::{self, CardioMM, ModelError, ModelInput};
use crate::phantom::ScanRecord;
use crate::sampling::{Acs, MaskError, MaskSpec, Pattern, UndersamplingMask};
use crate::text::{TextBundle, TextEncoder, TextError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step} (record {record}); state dumped to {dump}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        record: String,
        dump: PathBuf,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Params(#[from] ParamStoreError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs: 15,
            decay_factor: 0.3,
            decay_every: 5,
        }
    }
}

/// The mixed-undersampling grid: every pattern paired with every AF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UndersamplingConfig {
    pub patterns: Vec<Pattern>,
    pub afs: Vec<f64>,
    /// Calibration lines for uniform and random masks.
    pub acs_lines: usize,
    /// Calibration block side for radial masks.
    pub acs_block: usize,
}

impl Default for UndersamplingConfig {
    fn default() -> Self {
        UndersamplingConfig {
            patterns: Pattern::ALL.to_vec(),
            afs: vec![4.0, 8.0, 12.0, 16.0, 20.0, 24.0],
            acs_lines: 20,
            acs_block: 20,
        }
    }
}

impl UndersamplingConfig {
    pub fn grid(&self) -> Vec<(Pattern, f64)> {
        self.patterns
            .iter()
            .flat_map(|&p| self.afs.iter().map(move |&af| (p, af)))
            .collect()
    }

    pub fn acs(&self, pattern: Pattern) -> Acs {
        match pattern {
            Pattern::Radial => Acs::Block {
                h: self.acs_block,
                w: self.acs_block,
            },
            _ => Acs::Lines(self.acs_lines),
        }
    }

    pub fn mask(&self, pattern: Pattern, af: f64, ny: usize, nx: usize, seed: u64) -> Result<UndersamplingMask> {
        let acs = match pattern {
            Pattern::Radial => self.acs_block,
            _ => self.acs_lines,
        };
        Ok(MaskSpec { pattern, af, acs, seed }.generate(ny, nx)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    /// Validation record `i` uses cell `i mod len`.
    pub cells: Vec<(Pattern, f64)>,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            cells: vec![(Pattern::Uniform, 8.0)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub undersampling: UndersamplingConfig,
    pub validation: ValidationConfig,
    /// Stops after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    /// Saves a resumable checkpoint every this many steps.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 1,
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            undersampling: UndersamplingConfig::default(),
            validation: ValidationConfig::default(),
            max_steps: None,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.optim.lr0 > 0.0) {
            return bad("optim.lr0 must be > 0");
        }
        if !(self.optim.weight_decay >= 0.0) {
            return bad("optim.weight_decay must be >= 0");
        }
        if self.schedule.epochs < 1 {
            return bad("schedule.epochs must be >= 1");
        }
        if self.schedule.decay_every < 1 || !(self.schedule.decay_factor > 0.0) {
            return bad("schedule.decay_every must be >= 1 and decay_factor > 0");
        }
        if self.batch_size != 1 {
            return bad("batch_size must be 1");
        }
        if self.undersampling.grid().is_empty() {
            return bad("undersampling grid is empty");
        }
        if self.undersampling.afs.iter().chain(self.validation.cells.iter().map(|c| &c.1)).any(|&af| !(af >= 1.0)) {
            return bad("acceleration factors must be >= 1");
        }
        if self.max_steps == Some(0) || self.checkpoint_every == Some(0) {
            return bad("max_steps and checkpoint_every must be >= 1 when set");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `lr0 · factor^⌊epoch / every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.optim.lr0 * cfg.schedule.decay_factor.powi((epoch / cfg.schedule.decay_every) as i32)
}

/// Uniform draw from the (pattern, AF) grid.
pub fn sample_undersampling(grid: &[(Pattern, f64)], rng: &mut impl Rng) -> Result<(Pattern, f64)> {
    if grid.is_empty() {
        return Err(TrainError::Config("undersampling grid is empty".into()));
    }
    Ok(grid[rng.random_range(0..grid.len())])
}

/// FNV mix of a seed and stream coordinates.
pub fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(seed);
    for p in parts {
        h.write_u64(*p);
    }
    h.finish()
}

/// `1 − SSIM(x, y)` on `[1, 1, H, W]` magnitudes with the evaluation window
/// and constants, differentiable in both arguments.
pub fn ssim_loss<T: Real>(x: &Tensor<T>, y: &Tensor<T>, data_range: f64) -> std::result::Result<Tensor<T>, AutodiffError> {
    if x.shape() != y.shape() {
        return Err(AutodiffError::Shape {
            op: "ssim_loss",
            detail: format!("{:?} vs {:?}", x.shape(), y.shape()),
        });
    }
    let s = x.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 1 || s[2] < SSIM_WINDOW || s[3] < SSIM_WINDOW {
        return Err(AutodiffError::Shape {
            op: "ssim_loss",
            detail: format!("expected [1, 1, H, W] with H, W >= {SSIM_WINDOW}, got {s:?}"),
        });
    }
    let g = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let kernel: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let k = Tensor::<T>::from_f64(&kernel, &[1, 1, SSIM_WINDOW, SSIM_WINDOW])?;
    let blur = |t: &Tensor<T>| t.conv2d(&k, None, ConvSpec::UNIT);
    let c1 = T::of((SSIM_K1 * data_range).powi(2));
    let c2 = T::of((SSIM_K2 * data_range).powi(2));
    let mx = blur(x)?;
    let my = blur(y)?;
    let mxx = blur(&x.square())?;
    let myy = blur(&y.square())?;
    let mxy = blur(&x.mul(y)?)?;
    let mx2 = mx.square();
    let my2 = my.square();
    let mxmy = mx.mul(&my)?;
    let sxx = mxx.sub(&mx2)?;
    let syy = myy.sub(&my2)?;
    let sxy = mxy.sub(&mxmy)?;
    let two = T::of(2.0);
    let num = mxmy.scale(two).add_scalar(c1).mul(&sxy.scale(two).add_scalar(c2))?;
    let den = mx2.add(&my2)?.add_scalar(c1).mul(&sxx.add(&syy)?.add_scalar(c2))?;
    Ok(num.div(&den)?.mean().neg().add_scalar(T::one()))
}

/// Root-sum-of-squares regularizer inside the loss (scaled units).
const SOS_EPS: f64 = 1e-12;

/// SSIM loss of one forward pass against a fully sampled SoS reference in
/// physical units. Both sides are divided by the reference maximum.
pub fn record_loss<T: Real>(
    model: &CardioMM,
    store: &ParamStore<T>,
    input: &ModelInput<T>,
    reference: &Array2<f64>,
) -> Result<Tensor<T>> {
    let (_, h, w) = input.dims();
    if reference.dim() != (h, w) {
        return Err(TrainError::Config(format!("reference {:?} vs k-space {:?}", reference.dim(), (h, w))));
    }
    let peak = reference.iter().copied().fold(0.0, f64::max) * input.scale;
    if !(peak > 0.0) {
        return Err(TrainError::Config("reference has no signal".into()));
    }
    let out = model.forward(store, input, false)?;
    let mag = out.x.sos(T::of(SOS_EPS))?.scale(T::of(1.0 / peak));
    let r: Vec<f64> = reference.iter().map(|v| v * input.scale / peak).collect();
    let r = Tensor::<T>::from_f64(&r, &[1, 1, h, w])?;
    Ok(ssim_loss(&mag, &r, 1.0)?)
}

/// Text bundle for a record under a mask.
pub fn bundle_for(record: &ScanRecord, mask: &UndersamplingMask) -> Result<TextBundle> {
    Ok(TextBundle::new(&record.metadata_text(), mask.text().as_str())?)
}

/// Per-record evaluation of a model against zero filling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub record: String,
    pub pattern: Pattern,
    pub af: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Reconstructs each record under its validation mask.
pub fn evaluate<T: Real>(
    model: &CardioMM,
    store: &ParamStore<T>,
    encoder: &dyn TextEncoder,
    records: &[ScanRecord],
    us: &UndersamplingConfig,
    cells: &[(Pattern, f64)],
    seed: u64,
) -> Result<Vec<RecordMetrics>> {
    if cells.is_empty() {
        return Err(TrainError::Config("no validation cells".into()));
    }
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let (pattern, af) = cells[i % cells.len()];
            let (_, ny, nx) = r.dims();
            let mask = us.mask(pattern, af, ny, nx, stream_seed(seed, &[u64::MAX, i as u64]))?;
            let bundle = bundle_for(r, &mask)?;
            let rec = model::reconstruct(model, store, encoder, &r.kspace, &mask.grid, mask.acs, &bundle, false)?;
            let (psnr, ssim) = eval::image_metrics(&r.reference, &rec.sos)?;
            Ok(RecordMetrics {
                record: r.id.clone(),
                pattern,
                af,
                psnr,
                ssim,
            })
        })
        .collect()
}

/// Resume point stored next to the last checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub format_version: u32,
    /// Epoch of the next step.
    pub epoch: usize,
    /// Position of the next step within the epoch's order.
    pub position: usize,
    pub global_step: usize,
    pub best_val_ssim: f64,
    pub best_epoch: Option<usize>,
    /// Byte length of `metrics.csv` at the time of the checkpoint.
    pub metrics_len: u64,
    /// Running loss sum and step count of the current epoch, so a resumed
    /// epoch reports the same mean as an uninterrupted one.
    pub epoch_loss_sum: f64,
    pub epoch_steps: usize,
}

const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    /// Loss of every step taken in this call.
    pub losses: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
    pub global_step: usize,
    pub best_epoch: Option<usize>,
    pub best_val_ssim: f64,
}

const METRICS_HEADER: &str = "kind,epoch,step,record,pattern,af,lr,loss,psnr,ssim\n";

/// Output layout of a run.
pub struct RunDirs {
    pub root: PathBuf,
}

impl RunDirs {
    pub fn last(&self) -> PathBuf {
        self.root.join("last")
    }
    pub fn best(&self) -> PathBuf {
        self.root.join("best")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn state(&self) -> PathBuf {
        self.last().join("state.json")
    }
}

pub fn load_state(dir: &Path) -> Result<TrainState> {
    let path = RunDirs { root: dir.to_path_buf() }.state();
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let s: TrainState = serde_json::from_str(&text).map_err(|e| TrainError::Format {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if s.format_version != STATE_VERSION {
        return Err(TrainError::Format {
            path,
            detail: format!("state version {} is not supported", s.format_version),
        });
    }
    Ok(s)
}

fn save_last<T: Real>(dirs: &RunDirs, model: &CardioMM, store: &ParamStore<T>, state: &TrainState) -> Result<()> {
    model::save_checkpoint(&dirs.last(), model, store, true)?;
    let text = serde_json::to_string_pretty(state).expect("state serializes") + "\n";
    let path = dirs.state();
    fs::write(&path, text).map_err(io_err(&path))
}

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Trains `model` in place. Every completed epoch is validated, logged and
/// checkpointed to `out/last`; the best validation SSIM is kept in
/// `out/best`. A run cut short by `max_steps` stops without validating the
/// partial epoch. With `resume`, continues from `out/last` (parameters,
/// optimizer moments and position) and truncates the metrics log to the
/// checkpoint, so the continuation matches an uninterrupted run.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Real>(
    model: &CardioMM,
    store: &mut ParamStore<T>,
    encoder: &dyn TextEncoder,
    train_set: &[ScanRecord],
    val_set: &[ScanRecord],
    cfg: &TrainConfig,
    out: &Path,
    resume: bool,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let dirs = RunDirs { root: out.to_path_buf() };
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut state = if resume {
        let s = load_state(out)?;
        store.load(&dirs.last().join("params"))?;
        let p = dirs.metrics();
        let f = fs::OpenOptions::new().write(true).open(&p).map_err(io_err(&p))?;
        f.set_len(s.metrics_len).map_err(io_err(&p))?;
        s
    } else {
        let p = dirs.metrics();
        fs::write(&p, METRICS_HEADER).map_err(io_err(&p))?;
        TrainState {
            format_version: STATE_VERSION,
            epoch: 0,
            position: 0,
            global_step: 0,
            best_val_ssim: f64::NEG_INFINITY,
            best_epoch: None,
            metrics_len: METRICS_HEADER.len() as u64,
            epoch_loss_sum: 0.0,
            epoch_steps: 0,
        }
    };
    let mpath = dirs.metrics();
    let mut log = fs::OpenOptions::new().append(true).open(&mpath).map_err(io_err(&mpath))?;
    let grid = cfg.undersampling.grid();
    let text_aware = model.heads.is_some();
    let mut summary = TrainSummary {
        losses: Vec::new(),
        epochs: Vec::new(),
        global_step: state.global_step,
        best_epoch: state.best_epoch,
        best_val_ssim: state.best_val_ssim,
    };
    let budget_left = |s: &TrainState| cfg.max_steps.is_none_or(|m| s.global_step < m);

    while state.epoch < cfg.schedule.epochs && budget_left(&state) {
        let epoch = state.epoch;
        let lr = lr_at(epoch, cfg);
        let opt = AdamW {
            lr,
            beta1: cfg.optim.beta1,
            beta2: cfg.optim.beta2,
            eps: cfg.optim.eps,
            weight_decay: cfg.optim.weight_decay,
        };
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &[epoch as u64])));
        while state.position < order.len() && budget_left(&state) {
            let idx = order[state.position];
            let rec = &train_set[idx];
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &[epoch as u64, state.position as u64]));
            let (pattern, af) = sample_undersampling(&grid, &mut rng)?;
            let (_, ny, nx) = rec.dims();
            let mask = cfg.undersampling.mask(pattern, af, ny, nx, rng.random())?;
            let bundle = bundle_for(rec, &mask)?;
            let texts = text_aware.then_some((encoder, &bundle));
            let input = ModelInput::<T>::prepare(&rec.kspace, &mask.grid, mask.acs, texts)?;
            let loss = record_loss(model, store, &input, &rec.reference)?;
            let lv = loss.item().f64();
            if !lv.is_finite() {
                let dump = out.join("abort");
                model::save_checkpoint(&dump, model, store, true)?;
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step: state.global_step,
                    record: rec.id.clone(),
                    dump,
                });
            }
            let grads = loss.backward()?;
            store.zero_grad();
            store.accumulate(&grads);
            store.adamw_step(&opt)?;
            let row = format!(
                "step,{epoch},{},{},{},{},{},{},,\n",
                state.global_step,
                rec.id,
                pattern.name(),
                af,
                lr,
                lv
            );
            log.write_all(row.as_bytes()).map_err(io_err(&mpath))?;
            state.metrics_len += row.len() as u64;
            summary.losses.push(lv);
            state.epoch_loss_sum += lv;
            state.epoch_steps += 1;
            state.global_step += 1;
            state.position += 1;
            if cfg.checkpoint_every.is_some_and(|n| state.global_step % n == 0) && state.position < order.len() {
                save_last(&dirs, model, store, &state)?;
            }
        }
        if state.position < order.len() {
            // The step budget ran out mid-epoch: leave a resumable point.
            save_last(&dirs, model, store, &state)?;
            break;
        }
        let (vp, vs) = if val_set.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let m = evaluate(model, store, encoder, val_set, &cfg.undersampling, &cfg.validation.cells, cfg.seed)?;
            let n = m.len() as f64;
            (m.iter().map(|r| r.psnr).sum::<f64>() / n, m.iter().map(|r| r.ssim).sum::<f64>() / n)
        };
        let mean_loss = if state.epoch_steps == 0 {
            f64::NAN
        } else {
            state.epoch_loss_sum / state.epoch_steps as f64
        };
        let row = format!(
            "epoch,{epoch},{},,,,{lr},{},{},{}\n",
            state.global_step,
            fmt_f(mean_loss),
            fmt_f(vp),
            fmt_f(vs)
        );
        log.write_all(row.as_bytes()).map_err(io_err(&mpath))?;
        state.metrics_len += row.len() as u64;
        // Without validation data the latest epoch is the best.
        if val_set.is_empty() || vs > state.best_val_ssim {
            state.best_val_ssim = if val_set.is_empty() { f64::NAN } else { vs };
            state.best_epoch = Some(epoch);
            model::save_checkpoint(&dirs.best(), model, store, false)?;
        }
        summary.epochs.push(EpochSummary {
            epoch,
            mean_loss,
            val_psnr: vp,
            val_ssim: vs,
        });
        state.epoch += 1;
        state.position = 0;
        state.epoch_loss_sum = 0.0;
        state.epoch_steps = 0;
        save_last(&dirs, model, store, &state)?;
    }
    log.flush().map_err(io_err(&mpath))?;
    summary.global_step = state.global_step;
    summary.best_epoch = state.best_epoch;
    summary.best_val_ssim = state.best_val_ssim;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 2e-4);
        assert_eq!(lr_at(4, &cfg), 2e-4);
        assert!((lr_at(5, &cfg) - 6e-5).abs() < 1e-18);
        assert!((lr_at(10, &cfg) - 1.8e-5).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.optim.lr0 = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.schedule.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.undersampling.afs.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let mut c = TrainConfig::default();
        c.max_steps = Some(12);
        c.validation.cells.push((Pattern::Radial, 16.0));
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(TrainConfig::from_toml("[optim]\nlr = 1.0\n").is_err());
        let partial = TrainConfig::from_toml("seed = 4\n[schedule]\nepochs = 2\n").unwrap();
        assert_eq!((partial.seed, partial.schedule.epochs, partial.schedule.decay_every), (4, 2, 5));
    }
}
