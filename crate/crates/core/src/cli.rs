//! Command-line workflows. Every subcommand writes only below its `--out`
//! directory and leaves a `manifest.json` there (plus `timing.json`, which
//! holds the wall-clock time so the manifest itself stays reproducible).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamStore, ParamStoreError, Real};
use crate::classic::{self, CgConfig, ClassicError};
use crate::eval::{self, EvalError, SliceLevel, SliceMasks};
use crate::model::{self, CardioMM, ModelConfig, ModelError};
use crate::phantom::{self, Modality, PhantomError, ScanRecord, SeriesKind, SynthConfig};
use crate::physics::{self, PhysicsError};
use crate::sampling::{MaskError, Pattern, UndersamplingMask};
use crate::text::{self, HashingEncoder, TextError, TextKind};
use crate::train::{self, stream_seed, TrainConfig, TrainError, UndersamplingConfig};

pub const MANIFEST_VERSION: u32 = 1;
/// Environment variable naming the default dataset directory.
pub const DATA_ENV: &str = "CARDIOMM_DATA";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("i/o failure: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::Geometry(_) | PhantomError::Invalid(_) => CliError::Validation(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<ParamStoreError> for CliError {
    fn from(e: ParamStoreError) -> Self {
        match e {
            ParamStoreError::NonFiniteGradient(_) => CliError::Numerical(e.to_string()),
            ParamStoreError::Io { .. } | ParamStoreError::Format { .. } | ParamStoreError::Version { .. } => {
                CliError::Io(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TextError> for CliError {
    fn from(e: TextError) -> Self {
        match e {
            TextError::Io { .. } | TextError::Format { .. } => CliError::Io(e.to_string()),
            TextError::Params(p) => p.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ClassicError> for CliError {
    fn from(e: ClassicError) -> Self {
        match e {
            ClassicError::Diverged { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { .. } | ModelError::Format { .. } => CliError::Io(e.to_string()),
            ModelError::Params(p) => p.into(),
            ModelError::Text(t) => t.into(),
            ModelError::Classic(c) => c.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            TrainError::Io { .. } | TrainError::Format { .. } => CliError::Io(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Params(p) => p.into(),
            TrainError::Text(t) => t.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<MaskError> for CliError {
    fn from(e: MaskError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<PhysicsError> for CliError {
    fn from(e: PhysicsError) -> Self {
        CliError::Validation(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "cardiomm", version, about = "Text-conditioned reconstruction of undersampled multi-coil cardiac MRI")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a phantom dataset container.
    Synth(SynthArgs),
    /// Generate one undersampling mask.
    Mask(MaskArgs),
    /// Reconstruct records with a classic method or a trained model.
    Recon(ReconArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Compare a model with zero filling and SENSE on a dataset.
    Eval(EvalArgs),
    /// Downstream biomarker analyses.
    Analyze(AnalyzeArgs),
    /// Export projected text embeddings of a dataset.
    EmbedDump(EmbedArgs),
    /// Print a summary of a dataset, record, checkpoint or manifest.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of every random choice; a generated seed is recorded when absent.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-record work. Results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MaskOpts {
    #[arg(long, default_value = "uniform")]
    pub pattern: Pattern,
    #[arg(long, default_value_t = 8.0)]
    pub af: f64,
    /// ACS lines (uniform, random) or block side (radial).
    #[arg(long, default_value_t = 20)]
    pub acs: usize,
}

impl MaskOpts {
    fn config(&self) -> UndersamplingConfig {
        UndersamplingConfig {
            patterns: vec![self.pattern],
            afs: vec![self.af],
            acs_lines: self.acs,
            acs_block: self.acs,
        }
    }

    /// Mask of record `index`; random masks draw from the run seed.
    fn mask_for(&self, seed: u64, index: usize, ny: usize, nx: usize) -> Result<UndersamplingMask> {
        Ok(self.config().mask(self.pattern, self.af, ny, nx, stream_seed(seed, &[index as u64]))?)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML file with synthesis settings; defaults are used for absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[command(flatten)]
    pub mask: MaskOpts,
    #[arg(long, default_value_t = 256)]
    pub ny: usize,
    #[arg(long, default_value_t = 246)]
    pub nx: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ZeroFilled,
    Conventional,
    Cardiomm,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset container directory.
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    /// Restrict to these record ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub records: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReconArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "zero-filled")]
    pub method: Method,
    /// Checkpoint directory for `--method cardiomm`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub mask: MaskOpts,
    /// Score against each record's fully sampled reference.
    #[arg(long = "ref")]
    pub with_ref: bool,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
    #[arg(long, default_value_t = CgConfig::default().max_iters)]
    pub cg_iters: usize,
    #[arg(long, default_value_t = CgConfig::default().tol)]
    pub cg_tol: f64,
    #[arg(long, default_value_t = CgConfig::default().lambda_reg)]
    pub cg_lambda: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file with `[model]` and `[train]` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    /// Validation dataset; without it the last epoch is kept as best.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Continue the run in `--out`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Without a checkpoint only the baselines are scored.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub mask: MaskOpts,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(subcommand)]
    pub what: Analysis,
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// Ventricular volumes, function, mass and AHA wall thickness from the
    /// segmentations of cine records.
    Phenotypes(PhenotypeArgs),
    /// Simulated T1 or T2 series fitted pixelwise against phantom truth.
    Mapping(MappingArgs),
    /// FWHM enhanced mass of LGE records, optionally against a model's
    /// reconstructions.
    Lge(LgeArgs),
    /// Agreement and paired tests between two columns of a CSV file.
    Agreement(AgreementArgs),
}

#[derive(Debug, Args)]
pub struct PhenotypeArgs {
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    /// Heart rate used for cardiac output.
    #[arg(long, default_value_t = 60.0)]
    pub heart_rate: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    T1,
    T2,
}

#[derive(Debug, Args)]
pub struct MappingArgs {
    #[arg(long, value_enum)]
    pub kind: MapKind,
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    /// Peak signal over noise standard deviation; `inf` for noiseless.
    #[arg(long, default_value_t = f64::INFINITY)]
    pub snr: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct LgeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub mask: MaskOpts,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AgreementArgs {
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub a: String,
    #[arg(long)]
    pub b: String,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    /// Trained heads; freshly initialized heads are used without it.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Acceleration factors whose undersampling texts are included.
    #[arg(long, value_delimiter = ',', default_values_t = [4.0, 8.0, 12.0, 16.0, 20.0, 24.0])]
    pub afs: Vec<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

/// Record of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub subcommand: String,
    pub tool_version: String,
    pub seed: u64,
    /// `flag` or `generated`.
    pub seed_source: String,
    pub config: serde_json::Value,
    /// Input name → digest.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the run directory → digest.
    pub outputs: BTreeMap<String, String>,
}

struct Run {
    name: &'static str,
    out: PathBuf,
    seed: u64,
    seed_source: &'static str,
    inputs: BTreeMap<String, String>,
    started: Instant,
}

fn generated_seed() -> u64 {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    stream_seed(nanos as u64, &[std::process::id() as u64])
}

impl Run {
    fn start(name: &'static str, common: &Common) -> Result<Self> {
        if common.jobs == 0 {
            return Err(CliError::Validation("--jobs must be >= 1".into()));
        }
        fs::create_dir_all(&common.out).map_err(io(&common.out))?;
        let (seed, seed_source) = match common.seed {
            Some(s) => (s, "flag"),
            None => (generated_seed(), "generated"),
        };
        Ok(Run {
            name,
            out: common.out.clone(),
            seed,
            seed_source,
            inputs: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    fn input_dataset(&mut self, key: &str, dir: &Path) -> Result<()> {
        self.inputs.insert(key.to_string(), phantom::dataset_digest(dir)?);
        Ok(())
    }

    fn input_file(&mut self, key: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(io(path))?;
        self.inputs.insert(key.to_string(), phantom::digest(&bytes));
        Ok(())
    }

    fn input_checkpoint(&mut self, key: &str, dir: &Path) -> Result<()> {
        let mut all = Vec::new();
        for f in ["model.json", "params.json", "params.bin"] {
            let p = dir.join(f);
            all.extend(fs::read(&p).map_err(io(&p))?);
        }
        self.inputs.insert(key.to_string(), phantom::digest(&all));
        Ok(())
    }

    fn finish(self, config: impl Serialize) -> Result<RunManifest> {
        let manifest = RunManifest {
            format_version: MANIFEST_VERSION,
            subcommand: self.name.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            seed_source: self.seed_source.to_string(),
            config: serde_json::to_value(config).map_err(|e| CliError::Validation(e.to_string()))?,
            inputs: self.inputs,
            outputs: output_digests(&self.out)?,
        };
        write_json(&self.out.join("manifest.json"), &manifest)?;
        let timing = serde_json::json!({ "wall_clock_s": self.started.elapsed().as_secs_f64() });
        write_json(&self.out.join("timing.json"), &timing)?;
        Ok(manifest)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))? + "\n";
    fs::write(path, text).map_err(io(path))
}

/// Digests of every file below `root` except the manifest and timing files.
pub fn output_digests(root: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io(dir))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .map_err(io(dir))?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out)?;
                continue;
            }
            let rel: Vec<String> = p
                .strip_prefix(root)
                .expect("walk stays below root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect();
            let rel = rel.join("/");
            if rel == "manifest.json" || rel == "timing.json" {
                continue;
            }
            out.insert(rel, phantom::digest(&fs::read(&p).map_err(io(&p))?));
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

fn read_toml<C: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io(p))?;
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {}", p.display(), e.message())))
        }
    }
}

/// Maps `f` over `items` on `jobs` threads; results keep the item order.
pub fn par_map<I: Sync, R: Send>(items: &[I], jobs: usize, f: impl Fn(usize, &I) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, it)| f(i, it)).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, it)| f(c * chunk + i, it))
                        .collect::<Vec<R>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

fn load_records(data: &Path, ids: &[String]) -> Result<Vec<ScanRecord>> {
    let all = phantom::list_records(data)?;
    let chosen: Vec<String> = if ids.is_empty() {
        all
    } else {
        for id in ids {
            if !all.contains(id) {
                return Err(CliError::Validation(format!("record `{id}` is not in {}", data.display())));
            }
        }
        ids.to_vec()
    };
    if chosen.is_empty() {
        return Err(CliError::Validation(format!("{} holds no records", data.display())));
    }
    chosen.iter().map(|id| Ok(phantom::read_record(data, id)?)).collect()
}

fn check_finite(what: &str, img: &Array2<f64>) -> Result<()> {
    if img.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("{what} contains non-finite values")))
    }
}

fn write_f64_le(path: &Path, img: &Array2<f64>) -> Result<()> {
    let bytes: Vec<u8> = img.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io(path))
}

fn max_of(img: &Array2<f64>) -> f64 {
    img.iter().copied().fold(0.0, f64::max)
}

/// A loaded model in either precision.
enum Loaded {
    F32(CardioMM, ParamStore<f32>),
    F64(CardioMM, ParamStore<f64>),
}

impl Loaded {
    fn open(dir: &Path, precision: Precision) -> Result<Self> {
        Ok(match precision {
            Precision::F32 => {
                let (m, s) = model::load_checkpoint::<f32>(dir)?;
                Loaded::F32(m, s)
            }
            Precision::F64 => {
                let (m, s) = model::load_checkpoint::<f64>(dir)?;
                Loaded::F64(m, s)
            }
        })
    }

    fn reconstruct(&self, rec: &ScanRecord, mask: &UndersamplingMask) -> Result<Array2<f64>> {
        let bundle = train::bundle_for(rec, mask)?;
        let r = match self {
            Loaded::F32(m, s) => model::reconstruct(m, s, &HashingEncoder, &rec.kspace, &mask.grid, mask.acs, &bundle, false)?,
            Loaded::F64(m, s) => model::reconstruct(m, s, &HashingEncoder, &rec.kspace, &mask.grid, mask.acs, &bundle, false)?,
        };
        check_finite("model reconstruction", &r.sos)?;
        Ok(r.sos)
    }
}

fn zero_filled_sos(rec: &ScanRecord, mask: &UndersamplingMask) -> Result<Array2<f64>> {
    Ok(physics::sos(&classic::zero_filled(&rec.kspace, &mask.grid)?))
}

fn sense(rec: &ScanRecord, mask: &UndersamplingMask, cfg: &CgConfig) -> Result<Array2<f64>> {
    let sens = classic::estimate_sens_acs(&rec.kspace, mask.acs)?;
    let img = classic::sense_cg(&rec.kspace, &mask.grid, &sens, cfg)?.image.mapv(|v| v.norm());
    check_finite("SENSE reconstruction", &img)?;
    Ok(img)
}

/// Runs the parsed command and returns its manifest (`None` for `inspect`).
pub fn run(cli: Cli) -> Result<Option<RunManifest>> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(Some),
        Command::Mask(a) => cmd_mask(&a).map(Some),
        Command::Recon(a) => cmd_recon(&a).map(Some),
        Command::Train(a) => cmd_train(&a).map(Some),
        Command::Eval(a) => cmd_eval(&a).map(Some),
        Command::Analyze(a) => match a.what {
            Analysis::Phenotypes(p) => cmd_phenotypes(&p).map(Some),
            Analysis::Mapping(m) => cmd_mapping(&m).map(Some),
            Analysis::Lge(l) => cmd_lge(&l).map(Some),
            Analysis::Agreement(g) => cmd_agreement(&g).map(Some),
        },
        Command::EmbedDump(a) => cmd_embed_dump(&a).map(Some),
        Command::Inspect(a) => {
            println!("{}", inspect(&a.path)?);
            Ok(None)
        }
    }
}

/// Parses `args` (including the program name) and runs them, returning the
/// process exit code. Errors are reported on stderr.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<RunManifest> {
    let mut run = Run::start("synth", &a.common)?;
    let mut cfg: SynthConfig = read_toml(a.config.as_deref())?;
    if let Some(p) = &a.config {
        run.input_file("config", p)?;
    }
    cfg.seed = run.seed;
    cfg.validate()?;
    let records = phantom::generate_dataset(&cfg, a.common.jobs)?;
    phantom::write_dataset(&run.out, &records)?;
    run.inputs.clear();
    run.finish(&cfg)
}

pub fn cmd_mask(a: &MaskArgs) -> Result<RunManifest> {
    let run = Run::start("mask", &a.common)?;
    let mask = a.mask.mask_for(run.seed, 0, a.ny, a.nx)?;
    let eff = mask.effective_af()?;
    let doc = serde_json::json!({
        "mask": mask.to_record(),
        "effective_af": eff,
        "acquired": mask.acquired(),
        "text": mask.text().as_str(),
    });
    write_json(&run.out.join("mask.json"), &doc)?;
    let pgm = run.out.join("mask.pgm");
    let mut f = fs::File::create(&pgm).map_err(io(&pgm))?;
    mask.write_pgm(&mut f).map_err(io(&pgm))?;
    #[derive(Serialize)]
    struct Cfg<'a> {
        mask: &'a MaskOpts,
        ny: usize,
        nx: usize,
    }
    run.finish(Cfg { mask: &a.mask, ny: a.ny, nx: a.nx })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ReconRow {
    record: String,
    method: Method,
    pattern: String,
    af: f64,
    psnr: f64,
    ssim: f64,
}

pub fn cmd_recon(a: &ReconArgs) -> Result<RunManifest> {
    let mut run = Run::start("recon", &a.common)?;
    let records = load_records(&a.data.data, &a.data.records)?;
    run.input_dataset("data", &a.data.data)?;
    let cg = CgConfig {
        max_iters: a.cg_iters,
        tol: a.cg_tol,
        lambda_reg: a.cg_lambda,
    };
    cg.validate()?;
    let model = match (a.method, &a.checkpoint) {
        (Method::Cardiomm, Some(dir)) => {
            run.input_checkpoint("checkpoint", dir)?;
            Some(Loaded::open(dir, a.precision)?)
        }
        (Method::Cardiomm, None) => return Err(CliError::Validation("--method cardiomm needs --checkpoint".into())),
        (_, Some(_)) => return Err(CliError::Validation("--checkpoint only applies to --method cardiomm".into())),
        _ => None,
    };
    let seed = run.seed;
    let results = par_map(&records, a.common.jobs, |i, rec| -> Result<(Array2<f64>, Option<ReconRow>)> {
        let (_, ny, nx) = rec.dims();
        let mask = a.mask.mask_for(seed, i, ny, nx)?;
        let img = match a.method {
            Method::ZeroFilled => zero_filled_sos(rec, &mask)?,
            Method::Conventional => sense(rec, &mask, &cg)?,
            Method::Cardiomm => model.as_ref().expect("checked above").reconstruct(rec, &mask)?,
        };
        let row = if a.with_ref {
            let (psnr, ssim) = eval::image_metrics(&rec.reference, &img)?;
            Some(ReconRow {
                record: rec.id.clone(),
                method: a.method,
                pattern: a.mask.pattern.name().to_string(),
                af: a.mask.af,
                psnr,
                ssim,
            })
        } else {
            None
        };
        Ok((img, row))
    });
    let mut rows = Vec::new();
    for (rec, res) in records.iter().zip(results) {
        let (img, row) = res?;
        write_f64_le(&run.out.join(format!("{}.f64", rec.id)), &img)?;
        let png = run.out.join(format!("{}.png", rec.id));
        eval::write_png_gray(&png, &img, 0.0, max_of(&rec.reference)).map_err(io(&png))?;
        rows.extend(row);
    }
    if a.with_ref {
        write_csv(&run.out.join("metrics.csv"), &rows)?;
    }
    #[derive(Serialize)]
    struct Cfg<'a> {
        method: Method,
        mask: &'a MaskOpts,
        records: Vec<&'a str>,
        precision: Precision,
        cg: CgConfig,
        reference: bool,
    }
    run.finish(Cfg {
        method: a.method,
        mask: &a.mask,
        records: records.iter().map(|r| r.id.as_str()).collect(),
        precision: a.precision,
        cg,
        reference: a.with_ref,
    })
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(io(path))
}

/// Contents of a `train --config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn cmd_train(a: &TrainArgs) -> Result<RunManifest> {
    let mut common = a.common.clone();
    let previous: Option<RunManifest> = if a.resume {
        let p = a.common.out.join("manifest.json");
        let text = fs::read_to_string(&p).map_err(io(&p))?;
        Some(serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?)
    } else {
        None
    };
    // A resumed run keeps its recorded seed unless one is given.
    if let (None, Some(prev)) = (common.seed, &previous) {
        common.seed = Some(prev.seed);
    }
    let mut run = Run::start("train", &common)?;
    if let (Some(prev), None) = (&previous, a.common.seed) {
        run.seed_source = if prev.seed_source == "flag" { "flag" } else { "generated" };
    }
    let mut cfg: TrainRunConfig = read_toml(a.config.as_deref())?;
    cfg.model.seed = run.seed;
    cfg.train.seed = run.seed;
    cfg.model.validate()?;
    cfg.train.validate()?;
    if let Some(p) = &a.config {
        run.input_file("config", p)?;
    }
    run.input_dataset("data", &a.data)?;
    let train_set = phantom::read_dataset(&a.data)?;
    let val_set = match &a.val {
        Some(v) => {
            run.input_dataset("val", v)?;
            phantom::read_dataset(v)?
        }
        None => Vec::new(),
    };
    #[derive(Serialize)]
    struct Cfg<'a> {
        run: &'a TrainRunConfig,
        precision: Precision,
    }
    let resolved = serde_json::to_value(Cfg { run: &cfg, precision: a.precision }).expect("config serializes");
    if let Some(prev) = &previous {
        if prev.config != resolved {
            return Err(CliError::Validation(
                "resumed run configuration differs from the recorded one".into(),
            ));
        }
    } else {
        // Seed the manifest so an interrupted run can be resumed.
        let pending = RunManifest {
            format_version: MANIFEST_VERSION,
            subcommand: "train".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: run.seed,
            seed_source: run.seed_source.into(),
            config: resolved.clone(),
            inputs: run.inputs.clone(),
            outputs: BTreeMap::new(),
        };
        write_json(&run.out.join("manifest.json"), &pending)?;
    }
    match a.precision {
        Precision::F32 => train_in::<f32>(&cfg, &train_set, &val_set, &run.out, a.resume)?,
        Precision::F64 => train_in::<f64>(&cfg, &train_set, &val_set, &run.out, a.resume)?,
    };
    run.finish(resolved)
}

fn train_in<T: Real>(cfg: &TrainRunConfig, train_set: &[ScanRecord], val: &[ScanRecord], out: &Path, resume: bool) -> Result<()> {
    let mut store = ParamStore::<T>::new();
    let model = CardioMM::build(cfg.model.clone(), &mut store)?;
    train::train(&model, &mut store, &HashingEncoder, train_set, val, &cfg.train, out, resume)?;
    Ok(())
}

/// One row of `eval` output; the aggregate row has record `mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub record: String,
    pub pattern: String,
    pub af: f64,
    pub zf_psnr: f64,
    pub zf_ssim: f64,
    pub sense_psnr: f64,
    pub sense_ssim: f64,
    pub model_psnr: Option<f64>,
    pub model_ssim: Option<f64>,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<RunManifest> {
    let mut run = Run::start("eval", &a.common)?;
    let records = load_records(&a.data.data, &a.data.records)?;
    run.input_dataset("data", &a.data.data)?;
    let model = match &a.checkpoint {
        Some(dir) => {
            run.input_checkpoint("checkpoint", dir)?;
            Some(Loaded::open(dir, a.precision)?)
        }
        None => None,
    };
    let cg = CgConfig::default();
    let seed = run.seed;
    let rows = par_map(&records, a.common.jobs, |i, rec| -> Result<EvalRow> {
        let (_, ny, nx) = rec.dims();
        let mask = a.mask.mask_for(seed, i, ny, nx)?;
        let (zf_psnr, zf_ssim) = eval::image_metrics(&rec.reference, &zero_filled_sos(rec, &mask)?)?;
        let (sense_psnr, sense_ssim) = eval::image_metrics(&rec.reference, &sense(rec, &mask, &cg)?)?;
        let (model_psnr, model_ssim) = match &model {
            Some(m) => {
                let (p, s) = eval::image_metrics(&rec.reference, &m.reconstruct(rec, &mask)?)?;
                (Some(p), Some(s))
            }
            None => (None, None),
        };
        Ok(EvalRow {
            record: rec.id.clone(),
            pattern: a.mask.pattern.name().into(),
            af: a.mask.af,
            zf_psnr,
            zf_ssim,
            sense_psnr,
            sense_ssim,
            model_psnr,
            model_ssim,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&EvalRow) -> Option<f64>| rows.iter().map(f).sum::<Option<f64>>().map(|s| s / n);
    let aggregate = EvalRow {
        record: "mean".into(),
        pattern: a.mask.pattern.name().into(),
        af: a.mask.af,
        zf_psnr: mean(&|r| r.zf_psnr),
        zf_ssim: mean(&|r| r.zf_ssim),
        sense_psnr: mean(&|r| r.sense_psnr),
        sense_ssim: mean(&|r| r.sense_ssim),
        model_psnr: mean_opt(&|r| r.model_psnr),
        model_ssim: mean_opt(&|r| r.model_ssim),
    };
    let mut all = rows.clone();
    all.push(aggregate);
    write_csv(&run.out.join("metrics.csv"), &all)?;
    if rows.len() >= 2 {
        let mut summary = BTreeMap::new();
        let columns: [(&str, Vec<Option<f64>>); 6] = [
            ("zf_psnr", rows.iter().map(|r| Some(r.zf_psnr)).collect()),
            ("zf_ssim", rows.iter().map(|r| Some(r.zf_ssim)).collect()),
            ("sense_psnr", rows.iter().map(|r| Some(r.sense_psnr)).collect()),
            ("sense_ssim", rows.iter().map(|r| Some(r.sense_ssim)).collect()),
            ("model_psnr", rows.iter().map(|r| r.model_psnr).collect()),
            ("model_ssim", rows.iter().map(|r| r.model_ssim).collect()),
        ];
        for (name, col) in columns {
            if let Some(v) = col.into_iter().collect::<Option<Vec<f64>>>() {
                summary.insert(name, eval::summarize(&v)?);
            }
        }
        write_json(&run.out.join("summary.json"), &summary)?;
    }
    #[derive(Serialize)]
    struct Cfg<'a> {
        mask: &'a MaskOpts,
        records: Vec<&'a str>,
        precision: Precision,
        cg: CgConfig,
    }
    run.finish(Cfg {
        mask: &a.mask,
        records: records.iter().map(|r| r.id.as_str()).collect(),
        precision: a.precision,
        cg,
    })
}

#[derive(Debug, Serialize)]
struct PhenotypeRow {
    subject: String,
    lvedv_ml: f64,
    lvesv_ml: f64,
    lvsv_ml: f64,
    lvef_pct: f64,
    lvco_l_min: f64,
    lvm_g: f64,
    rvedv_ml: f64,
    rvesv_ml: f64,
    rvsv_ml: f64,
    rvef_pct: f64,
    ed_frame: usize,
    es_frame: usize,
}

/// Angle of the anterior RV insertion: one 60° sector before the septal
/// midpoint, which faces the RV centroid.
fn rv_insertion_angle(lv: &Array2<bool>, rv: &Array2<bool>) -> Option<f64> {
    let centroid = |m: &Array2<bool>| {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
        for ((y, x), &v) in m.indexed_iter() {
            if v {
                sy += y as f64;
                sx += x as f64;
                n += 1.0;
            }
        }
        (n > 0.0).then(|| (sy / n, sx / n))
    };
    let (ly, lx) = centroid(lv)?;
    let (ry, rx) = centroid(rv)?;
    Some((ry - ly).atan2(rx - lx) - std::f64::consts::FRAC_PI_3)
}

fn slice_level(index: usize, count: usize) -> SliceLevel {
    match count {
        0 | 1 => SliceLevel::Mid,
        _ => match 3 * index / count {
            0 => SliceLevel::Basal,
            1 => SliceLevel::Mid,
            _ => SliceLevel::Apical,
        },
    }
}

pub fn cmd_phenotypes(a: &PhenotypeArgs) -> Result<RunManifest> {
    let mut run = Run::start("analyze-phenotypes", &a.common)?;
    run.input_dataset("data", &a.data)?;
    let records = phantom::read_dataset(&a.data)?;
    // subject → frame → slice → record
    let mut grouped: BTreeMap<String, BTreeMap<usize, BTreeMap<usize, &ScanRecord>>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.metadata.modality == Modality::Cine.name() && r.segmentation.is_some()) {
        grouped.entry(r.subject.clone()).or_default().entry(r.frame).or_default().insert(r.slice, r);
    }
    if grouped.is_empty() {
        return Err(CliError::Validation("no segmented cine records".into()));
    }
    let mut rows = Vec::new();
    let mut wall_rows = Vec::new();
    for (subject, frames) in &grouped {
        let frame_ids: Vec<usize> = frames.keys().copied().collect();
        let slices: Vec<Vec<SliceMasks>> = frames
            .values()
            .map(|sl| {
                sl.values()
                    .map(|r| {
                        let s = r.segmentation.as_ref().expect("filtered");
                        SliceMasks { lv: s.lv.clone(), rv: s.rv.clone(), myo: s.myo.clone() }
                    })
                    .collect()
            })
            .collect();
        let first = *frames.values().next().and_then(|s| s.values().next()).expect("non-empty group");
        let p = eval::phenotypes(&slices, first.pixel_spacing_mm, first.slice_thickness_mm, a.heart_rate)?;
        rows.push(PhenotypeRow {
            subject: subject.clone(),
            lvedv_ml: p.lvedv,
            lvesv_ml: p.lvesv,
            lvsv_ml: p.lvsv,
            lvef_pct: p.lvef,
            lvco_l_min: p.lvco,
            lvm_g: p.lvm,
            rvedv_ml: p.rvedv,
            rvesv_ml: p.rvesv,
            rvsv_ml: p.rvsv,
            rvef_pct: p.rvef,
            ed_frame: frame_ids[p.ed_frame],
            es_frame: frame_ids[p.es_frame],
        });
        let ed = &slices[p.ed_frame];
        let angle = ed.iter().find_map(|s| rv_insertion_angle(&s.lv, &s.rv)).unwrap_or(0.0);
        let levels: Vec<(SliceLevel, &Array2<bool>, &Array2<bool>)> = ed
            .iter()
            .enumerate()
            .map(|(i, s)| (slice_level(i, ed.len()), &s.myo, &s.lv))
            .collect();
        let wt = eval::lvmwt_aha(&levels, first.pixel_spacing_mm[0], angle)?;
        let mut row = vec![subject.clone()];
        row.extend(wt.values().iter().map(|v| format!("{v}")));
        wall_rows.push(row);
        let png = run.out.join(format!("{subject}_bullseye.png"));
        eval::bullseye(&wt.segments, 256).save(&png).map_err(|e| CliError::Io(format!("{}: {e}", png.display())))?;
    }
    write_csv(&run.out.join("phenotypes.csv"), &rows)?;
    let wpath = run.out.join("wall_thickness.csv");
    let mut w = csv::Writer::from_path(&wpath).map_err(|e| CliError::Io(e.to_string()))?;
    let mut header = vec!["subject".to_string()];
    header.extend((1..=16).map(|i| format!("seg{i:02}_mm")));
    header.push("global_mm".into());
    w.write_record(&header).map_err(|e| CliError::Io(e.to_string()))?;
    for r in &wall_rows {
        w.write_record(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush().map_err(io(&wpath))?;
    run.finish(serde_json::json!({ "heart_rate_bpm": a.heart_rate }))
}

#[derive(Debug, Serialize)]
struct MappingRow {
    tissue: &'static str,
    truth_ms: f64,
    median_ms: f64,
    median_rel_err: f64,
    pixels: usize,
}

pub const T1_INVERSION_TIMES_MS: [f64; 8] = [100.0, 180.0, 260.0, 1000.0, 1100.0, 1200.0, 2000.0, 3000.0];
pub const T2_ECHO_TIMES_MS: [f64; 5] = [0.0, 25.0, 35.0, 45.0, 55.0];

pub fn cmd_mapping(a: &MappingArgs) -> Result<RunManifest> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let run = Run::start("analyze-mapping", &a.common)?;
    if !(a.snr > 0.0) {
        return Err(CliError::Validation("--snr must be > 0".into()));
    }
    let spec = phantom::PhantomSpec::for_grid(a.size, a.size);
    spec.validate()?;
    let frame = phantom::phantom_frame(&spec, 0);
    let (kind, timings, truth): (SeriesKind, &[f64], &Array2<f64>) = match a.kind {
        MapKind::T1 => (SeriesKind::T1, &T1_INVERSION_TIMES_MS, &frame.t1),
        MapKind::T2 => (SeriesKind::T2, &T2_ECHO_TIMES_MS, &frame.t2),
    };
    let mut series = phantom::simulate_weighted_series(&frame, kind, timings)?;
    if a.snr.is_finite() {
        let peak = series.iter().map(max_of).fold(0.0, f64::max);
        let noise = Normal::new(0.0, peak / a.snr).map_err(|e| CliError::Validation(e.to_string()))?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(run.seed);
        for img in &mut series {
            img.mapv_inplace(|v| (v + noise.sample(&mut rng)).abs());
        }
    }
    let tissue = &frame.myo | &frame.lv;
    let fit = match a.kind {
        MapKind::T1 => eval::fit_t1(&series, timings, Some(&tissue), &eval::FitConfig::default(), a.common.jobs)?,
        MapKind::T2 => eval::fit_t2(&series, timings, Some(&tissue), a.common.jobs)?,
    };
    let mut rows = Vec::new();
    for (name, region) in [("myocardium", &frame.myo), ("blood", &frame.lv)] {
        let mut errs = Vec::new();
        let mut vals = Vec::new();
        let mut truths = Vec::new();
        for ((y, x), &inside) in region.indexed_iter() {
            if inside && fit.valid[[y, x]] {
                let t = truth[[y, x]];
                vals.push(fit.values[[y, x]]);
                truths.push(t);
                errs.push((fit.values[[y, x]] - t).abs() / t);
            }
        }
        if errs.is_empty() {
            return Err(CliError::Numerical(format!("no valid {name} fits")));
        }
        rows.push(MappingRow {
            tissue: name,
            truth_ms: median(&mut truths),
            median_ms: median(&mut vals),
            median_rel_err: median(&mut errs),
            pixels: errs.len(),
        });
    }
    write_csv(&run.out.join("mapping.csv"), &rows)?;
    let shown = fit.values.mapv(|v| if v.is_finite() { v } else { 0.0 });
    let hi = match a.kind {
        MapKind::T1 => 2000.0,
        MapKind::T2 => 300.0,
    };
    let png = run.out.join("map.png");
    eval::write_png_gray(&png, &shown, 0.0, hi).map_err(io(&png))?;
    run.finish(serde_json::json!({
        "kind": a.kind,
        "size": a.size,
        "snr": if a.snr.is_finite() { serde_json::json!(a.snr) } else { serde_json::json!("inf") },
        "timings_ms": timings,
    }))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Serialize)]
struct LgeRow {
    record: String,
    reference_pct: f64,
    model_pct: Option<f64>,
}

pub fn cmd_lge(a: &LgeArgs) -> Result<RunManifest> {
    let mut run = Run::start("analyze-lge", &a.common)?;
    run.input_dataset("data", &a.data.data)?;
    let records: Vec<ScanRecord> = load_records(&a.data.data, &a.data.records)?
        .into_iter()
        .filter(|r| r.metadata.modality == Modality::Lge.name() && r.segmentation.is_some())
        .collect();
    if records.is_empty() {
        return Err(CliError::Validation("no segmented LGE records".into()));
    }
    let model = match &a.checkpoint {
        Some(dir) => {
            run.input_checkpoint("checkpoint", dir)?;
            Some(Loaded::open(dir, Precision::F64)?)
        }
        None => None,
    };
    let seed = run.seed;
    let rows = par_map(&records, a.common.jobs, |i, rec| -> Result<LgeRow> {
        let myo = &rec.segmentation.as_ref().expect("filtered").myo;
        let reference_pct = eval::fwhm_lge_mass(&rec.reference, myo)?;
        let model_pct = match &model {
            Some(m) => {
                let (_, ny, nx) = rec.dims();
                let mask = a.mask.mask_for(seed, i, ny, nx)?;
                Some(eval::fwhm_lge_mass(&m.reconstruct(rec, &mask)?, myo)?)
            }
            None => None,
        };
        Ok(LgeRow { record: rec.id.clone(), reference_pct, model_pct })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    write_csv(&run.out.join("lge.csv"), &rows)?;
    if model.is_some() && rows.len() >= 3 {
        let r: Vec<f64> = rows.iter().map(|r| r.reference_pct).collect();
        let m: Vec<f64> = rows.iter().filter_map(|r| r.model_pct).collect();
        write_json(&run.out.join("agreement.json"), &eval::agreement_stats(&r, &m)?)?;
    }
    run.finish(serde_json::json!({ "mask": &a.mask, "model": a.checkpoint.is_some() }))
}

pub fn cmd_agreement(a: &AgreementArgs) -> Result<RunManifest> {
    let mut run = Run::start("analyze-agreement", &a.common)?;
    run.input_file("csv", &a.csv)?;
    let mut rdr = csv::Reader::from_path(&a.csv).map_err(|e| CliError::Io(format!("{}: {e}", a.csv.display())))?;
    let headers = rdr.headers().map_err(|e| CliError::Io(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Validation(format!("column `{name}` not found")))
    };
    let (ia, ib) = (col(&a.a)?, col(&a.b)?);
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Io(e.to_string()))?;
        let parse = |i: usize| {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| CliError::Validation(format!("row {}: `{}` is not a number", line + 1, &rec[i])))
        };
        xa.push(parse(ia)?);
        xb.push(parse(ib)?);
    }
    #[derive(Serialize)]
    struct Report {
        agreement: eval::Agreement,
        paired: eval::PairedTests,
    }
    let report = Report { agreement: eval::agreement_stats(&xa, &xb)?, paired: eval::paired_tests(&xa, &xb)? };
    write_json(&run.out.join("agreement.json"), &report)?;
    run.finish(serde_json::json!({ "a": a.a, "b": a.b }))
}

pub fn cmd_embed_dump(a: &EmbedArgs) -> Result<RunManifest> {
    let mut run = Run::start("embed-dump", &a.common)?;
    run.input_dataset("data", &a.data)?;
    let records = phantom::read_dataset(&a.data)?;
    let mut texts: BTreeSet<(TextKind, String)> =
        records.iter().map(|r| (TextKind::Metadata, r.metadata_text())).collect();
    for p in Pattern::ALL {
        for &af in &a.afs {
            texts.insert((TextKind::Undersampling, crate::sampling::UndersamplingText::new(p, af).as_str().into()));
        }
    }
    let (model, store) = match &a.checkpoint {
        Some(dir) => {
            run.input_checkpoint("checkpoint", dir)?;
            model::load_checkpoint::<f64>(dir)?
        }
        None => {
            let mut store = ParamStore::new();
            let cfg = ModelConfig { seed: run.seed, ..Default::default() };
            (CardioMM::build(cfg, &mut store)?, store)
        }
    };
    let heads = model
        .heads
        .ok_or_else(|| CliError::Validation("the checkpoint is a text-unaware model".into()))?;
    let rows = text::embedding_table(&texts, &HashingEncoder, &heads, &store)?;
    let path = run.out.join("embeddings.csv");
    let f = fs::File::create(&path).map_err(io(&path))?;
    text::write_embedding_csv(&rows, f).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    run.finish(serde_json::json!({ "afs": a.afs, "checkpoint": a.checkpoint.is_some() }))
}

/// JSON summary of a dataset, record, checkpoint or run directory.
pub fn inspect(path: &Path) -> Result<String> {
    let pretty = |v: serde_json::Value| serde_json::to_string_pretty(&v).expect("value serializes");
    if path.join("dataset.json").is_file() {
        let ids = phantom::list_records(path)?;
        let first = ids.first().map(|id| phantom::read_record(path, id)).transpose()?;
        return Ok(pretty(serde_json::json!({
            "kind": "dataset",
            "records": ids.len(),
            "digest": phantom::dataset_digest(path)?,
            "first": first.map(|r| serde_json::json!({
                "id": r.id,
                "dims": [r.dims().0, r.dims().1, r.dims().2],
                "metadata": r.metadata_text(),
            })),
        })));
    }
    if path.join("model.json").is_file() {
        let cfg = model::load_config(path)?;
        let mut store = ParamStore::<f64>::new();
        CardioMM::build(cfg.clone(), &mut store)?;
        return Ok(pretty(serde_json::json!({
            "kind": "checkpoint",
            "config": cfg,
            "parameters": store.num_scalars(),
        })));
    }
    if path.join("manifest.json").is_file() && path.parent().is_some_and(|p| p.join("dataset.json").is_file()) {
        let parent = path.parent().expect("checked");
        let id = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let r = phantom::read_record(parent, &id)?;
        return Ok(pretty(serde_json::json!({
            "kind": "record",
            "id": r.id,
            "subject": r.subject,
            "slice": r.slice,
            "frame": r.frame,
            "dims": [r.dims().0, r.dims().1, r.dims().2],
            "metadata": r.metadata_text(),
            "segmented": r.segmentation.is_some(),
            "reference_error": r.reference_error(),
        })));
    }
    let manifest = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&manifest).map_err(io(&manifest))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", manifest.display())))?;
    Ok(pretty(v))
}
