//! The unrolled reconstruction network: per-phase text-aware de-aliasing
//! alternating with elementwise k-space data consistency, plus the learned
//! coil-sensitivity estimator.

use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{no_grad, AutodiffError, ConvSpec, ParamId, ParamStore, ParamStoreError, Real, Tensor};
use crate::classic::{self, ClassicError};
use crate::physics::{self, CoilSensitivities};
use crate::sampling::Acs;
use crate::text::{ConditioningVectors, TextBundle, TextEncoder, TextError, TextHeads, TextKind, RAW_DIM};

/// Version of the checkpoint directory layout.
pub const CHECKPOINT_VERSION: u32 = 1;
/// Added under the square root when normalizing learned sensitivities.
const SENS_EPS: f64 = 1e-16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("the text-aware model needs text conditioning")]
    MissingConditioning,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Params(#[from] ParamStoreError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Classic(#[from] ClassicError),
    #[error(transparent)]
    Physics(#[from] physics::PhysicsError),
    #[error("malformed checkpoint {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of unrolled phases K.
    pub phases: usize,
    pub levels: usize,
    pub base_channels: usize,
    /// Prompt dictionary components Q.
    pub prompt_components: usize,
    /// Side of each prompt dictionary atom.
    pub prompt_size: usize,
    pub embed_dim: usize,
    /// Base width of the sensitivity UNet.
    pub sens_channels: usize,
    /// Channel-attention squeeze ratio.
    pub cab_reduction: usize,
    /// `false` builds the ablation without adapters, prompters or heads.
    pub text_aware: bool,
    /// Seeds parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            phases: 10,
            levels: 3,
            base_channels: 16,
            prompt_components: 3,
            prompt_size: 8,
            embed_dim: 128,
            sens_channels: 8,
            cab_reduction: 4,
            text_aware: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// `phases == 0` is accepted and yields the zero-filled image.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.levels < 2 {
            return bad("levels must be >= 2");
        }
        if self.prompt_components < 1 {
            return bad("prompt_components must be >= 1");
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return bad("base_channels must be even and >= 2");
        }
        if self.sens_channels < 1 {
            return bad("sens_channels must be >= 1");
        }
        if self.prompt_size < 1 || self.embed_dim < 1 || self.cab_reduction < 1 {
            return bad("prompt_size, embed_dim and cab_reduction must be >= 1");
        }
        Ok(())
    }

    /// Spatial dims are padded to a multiple of this.
    pub fn pad_multiple(&self) -> usize {
        1 << self.levels
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in `±gain·sqrt(3/fan_in)`.
    Fan { fan_in: usize, gain: f64 },
    Const(f64),
}

/// Registers parameters whose initial values depend only on the model seed
/// and the parameter name, so shared names agree across variants.
struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    seed: u64,
}

impl<T: Real> Builder<'_, T> {
    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h = FnvHasher::default();
        h.write(name.as_bytes());
        ChaCha8Rng::seed_from_u64(self.seed ^ h.finish())
    }

    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Const(v) => vec![T::of(v); n],
            Init::Fan { fan_in, gain } => {
                let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = self.rng_for(name);
                (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect()
            }
        };
        Ok(self.store.register(name, shape, data)?)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, spec: ConvSpec, gain: f64) -> Result<Conv> {
        Ok(Conv {
            w: self.param(
                &format!("{name}.w"),
                &[cout, cin, k, k],
                Init::Fan {
                    fan_in: cin * k * k,
                    gain,
                },
            )?,
            b: self.param(&format!("{name}.b"), &[cout], Init::Const(0.0))?,
            spec,
        })
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, zero: bool) -> Result<Linear> {
        let init = if zero {
            Init::Const(0.0)
        } else {
            Init::Fan { fan_in: din, gain: 1.0 }
        };
        Ok(Linear {
            w: self.param(&format!("{name}.w"), &[dout, din], init)?,
            b: self.param(&format!("{name}.b"), &[dout], Init::Const(0.0))?,
        })
    }

    fn cab(&mut self, name: &str, c: usize, reduction: usize) -> Result<Cab> {
        let hidden = (c / reduction).max(1);
        Ok(Cab {
            conv1: self.conv(&format!("{name}.conv1"), c, c, 3, ConvSpec::SAME3, 1.0)?,
            act1: self.param(&format!("{name}.act1"), &[1], Init::Const(0.25))?,
            conv2: self.conv(&format!("{name}.conv2"), c, c, 3, ConvSpec::SAME3, 1.0)?,
            squeeze: self.linear(&format!("{name}.squeeze"), c, hidden, false)?,
            act2: self.param(&format!("{name}.act2"), &[1], Init::Const(0.25))?,
            excite: self.linear(&format!("{name}.excite"), hidden, c, false)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn forward<T: Real>(&self, s: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.conv2d(&s.leaf(self.w), Some(&s.leaf(self.b)), self.spec)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<T: Real>(&self, s: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.linear(&s.leaf(self.w), Some(&s.leaf(self.b)))?)
    }
}

/// Channel attention block: `x + body(x) ⊙ sigmoid(excite(prelu(squeeze(gap(body(x))))))`
/// with `body = conv3×3 → PReLU → conv3×3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cab {
    pub conv1: Conv,
    pub act1: ParamId,
    pub conv2: Conv,
    pub squeeze: Linear,
    pub act2: ParamId,
    pub excite: Linear,
}

impl Cab {
    pub fn forward<T: Real>(&self, s: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv1.forward(s, x)?.prelu(&s.leaf(self.act1))?;
        let h = self.conv2.forward(s, &h)?;
        let (n, c) = (h.shape()[0], h.shape()[1]);
        let z = h.global_avg_pool()?.reshape(&[n, c])?;
        let z = self.squeeze.forward(s, &z)?.prelu(&s.leaf(self.act2))?;
        let att = self.excite.forward(s, &z)?.sigmoid().reshape(&[n, c, 1, 1])?;
        Ok(x.add(&h.scale_channels(&att)?)?)
    }
}

/// Metadata adapter: `CAB(sigmoid(linear(t_M)) ⊙ (γ·f_A + β))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Adapter {
    pub proj: Linear,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub cab: Cab,
}

impl Adapter {
    pub fn weights<T: Real>(&self, s: &ParamStore<T>, t_m: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.proj.forward(s, t_m)?.sigmoid())
    }

    pub fn forward<T: Real>(&self, s: &ParamStore<T>, f_a: &Tensor<T>, t_m: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c) = (f_a.shape()[0], f_a.shape()[1]);
        let w = self.weights(s, t_m)?;
        if w.shape()[1] != c {
            return Err(ModelError::Input(format!("adapter produces {} weights for {c} channels", w.shape()[1])));
        }
        let w = w.reshape(&[1, c, 1, 1])?.broadcast_to(&[n, c, 1, 1])?;
        let f_at = f_a.channel_affine(&s.leaf(self.gamma), &s.leaf(self.beta))?;
        self.cab.forward(s, &f_at.scale_channels(&w)?)
    }
}

/// Undersampling prompter: a softmax mixture of dictionary atoms, resized
/// and passed through a 3×3 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prompter {
    pub proj: Linear,
    /// `[Q, C_p, P, P]`.
    pub dict: ParamId,
    pub conv: Conv,
}

impl Prompter {
    /// Mixture weights on the simplex, `[1, Q]`.
    pub fn weights<T: Real>(&self, s: &ParamStore<T>, t_u: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.proj.forward(s, t_u)?.softmax_lastdim()?)
    }

    /// `Σ_q w_q · p_q` for `w: [1, Q]` and `dict: [Q, C, P, P]`.
    pub fn mix<T: Real>(w: &Tensor<T>, dict: &Tensor<T>) -> Result<Tensor<T>> {
        let ds = dict.shape().to_vec();
        if ds.len() != 4 || w.shape() != [1, ds[0]] {
            return Err(ModelError::Input(format!(
                "prompt weights {:?} do not match dictionary {ds:?}",
                w.shape()
            )));
        }
        let (q, c, p1, p2) = (ds[0], ds[1], ds[2], ds[3]);
        let scaled = dict
            .reshape(&[1, q, c * p1, p2])?
            .scale_channels(&w.reshape(&[1, q, 1, 1])?)?;
        Ok(scaled.reshape(&[q, c, p1, p2])?.sum_dim0()?)
    }

    pub fn forward<T: Real>(&self, s: &ParamStore<T>, t_u: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        let p = Self::mix(&self.weights(s, t_u)?, &s.leaf(self.dict))?;
        self.conv.forward(s, &p.resample_bilinear(h, w)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLevel {
    pub cabs: Vec<Cab>,
    pub down: Conv,
}

impl EncoderLevel {
    /// Returns `(skip, downsampled)`.
    pub fn forward<T: Real>(&self, s: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(ModelError::Input(format!("encoder level needs even spatial dims, got {h}x{w}")));
        }
        let mut f = x.clone();
        for cab in &self.cabs {
            f = cab.forward(s, &f)?;
        }
        let down = self.down.forward(s, &f)?;
        Ok((f, down))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderLevel {
    pub prompter: Option<Prompter>,
    /// Channels reserved for the undersampling embedding (zero-filled in the
    /// text-unaware variant).
    pub prompt_channels: usize,
    pub fuse: Conv,
    pub cabs: Vec<Cab>,
    pub up: Conv,
    pub attn: Cab,
    pub adapter: Option<Adapter>,
}

impl DecoderLevel {
    pub fn forward<T: Real>(
        &self,
        s: &ParamStore<T>,
        f_di: &Tensor<T>,
        skip: &Tensor<T>,
        cond: Option<&ConditioningVectors<T>>,
    ) -> Result<Tensor<T>> {
        let (n, h, w) = (f_di.shape()[0], f_di.shape()[2], f_di.shape()[3]);
        if skip.shape()[2] != 2 * h || skip.shape()[3] != 2 * w || skip.shape()[0] != n {
            return Err(ModelError::Input(format!(
                "skip {:?} does not match decoder input {:?}",
                skip.shape(),
                f_di.shape()
            )));
        }
        let mut f = if self.prompt_channels > 0 {
            let e_u = match (&self.prompter, cond) {
                (Some(p), Some(c)) => {
                    let e = p.forward(s, &c.t_u, h, w)?;
                    e.broadcast_to(&[n, self.prompt_channels, h, w])?
                }
                (Some(_), None) => return Err(ModelError::MissingConditioning),
                (None, _) => Tensor::zeros(&[n, self.prompt_channels, h, w]),
            };
            self.fuse.forward(s, &Tensor::concat_channels(&[f_di.clone(), e_u])?)?
        } else {
            self.fuse.forward(s, f_di)?
        };
        for cab in &self.cabs {
            f = cab.forward(s, &f)?;
        }
        let f_u = self.up.forward(s, &f.resample_bilinear(2 * h, 2 * w)?)?;
        let f_a = self.attn.forward(s, &f_u.add(skip)?)?;
        match (&self.adapter, cond) {
            (Some(a), Some(c)) => Ok(f_a.add(&a.forward(s, &f_a, &c.t_m)?)?),
            (Some(_), None) => Err(ModelError::MissingConditioning),
            (None, _) => Ok(f_a),
        }
    }
}

/// Residual UNet: `x + tail(decoders(encoders(head(x))))`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNet {
    pub head: Conv,
    pub encoders: Vec<EncoderLevel>,
    /// Top (full resolution) level first.
    pub decoders: Vec<DecoderLevel>,
    pub tail: Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Conditioning {
    /// Prompters and adapters.
    Text,
    /// Zero undersampling embedding, no adapters.
    Blind,
    /// No embedding channels at all.
    Plain,
}

impl UNet {
    fn build<T: Real>(b: &mut Builder<'_, T>, name: &str, cfg: &ModelConfig, base: usize, cond: Conditioning) -> Result<Self> {
        let r = cfg.cab_reduction;
        let head = b.conv(&format!("{name}.head"), 2, base, 3, ConvSpec::SAME3, 1.0)?;
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        for l in 0..cfg.levels {
            let c = base << l;
            let p = format!("{name}.enc{l}");
            let cabs = (0..3).map(|i| b.cab(&format!("{p}.cab{i}"), c, r)).collect::<Result<_>>()?;
            let down = b.conv(&format!("{p}.down"), c, 2 * c, 2, ConvSpec::DOWN2, 1.0)?;
            encoders.push(EncoderLevel { cabs, down });
        }
        for l in 0..cfg.levels {
            let c = base << l;
            let p = format!("{name}.dec{l}");
            let cp = if cond == Conditioning::Plain { 0 } else { (c / 2).max(1) };
            let prompter = if cond == Conditioning::Text {
                Some(Prompter {
                    proj: b.linear(&format!("{p}.prompt.proj"), cfg.embed_dim, cfg.prompt_components, false)?,
                    dict: b.param(
                        &format!("{p}.prompt.dict"),
                        &[cfg.prompt_components, cp, cfg.prompt_size, cfg.prompt_size],
                        Init::Fan { fan_in: 3, gain: 1.0 },
                    )?,
                    conv: b.conv(&format!("{p}.prompt.conv"), cp, cp, 3, ConvSpec::SAME3, 1.0)?,
                })
            } else {
                None
            };
            let fuse = b.conv(&format!("{p}.fuse"), 2 * c + cp, 2 * c, 1, ConvSpec::UNIT, 1.0)?;
            let cabs = (0..3)
                .map(|i| b.cab(&format!("{p}.cab{i}"), 2 * c, r))
                .collect::<Result<_>>()?;
            let up = b.conv(&format!("{p}.up"), 2 * c, c, 1, ConvSpec::UNIT, 1.0)?;
            let attn = b.cab(&format!("{p}.attn"), c, r)?;
            let adapter = if cond == Conditioning::Text {
                Some(Adapter {
                    proj: b.linear(&format!("{p}.adapter.proj"), cfg.embed_dim, c, true)?,
                    gamma: b.param(&format!("{p}.adapter.gamma"), &[c], Init::Const(1.0))?,
                    beta: b.param(&format!("{p}.adapter.beta"), &[c], Init::Const(0.0))?,
                    cab: b.cab(&format!("{p}.adapter.cab"), c, r)?,
                })
            } else {
                None
            };
            decoders.push(DecoderLevel {
                prompter,
                prompt_channels: cp,
                fuse,
                cabs,
                up,
                attn,
                adapter,
            });
        }
        // A small tail keeps the initial network close to the identity.
        let tail = b.conv(&format!("{name}.tail"), base, 2, 3, ConvSpec::SAME3, 0.02)?;
        Ok(UNet {
            head,
            encoders,
            decoders,
            tail,
        })
    }

    /// `x: [N, 2, H, W]` with `H`, `W` divisible by `2^levels`.
    pub fn forward<T: Real>(
        &self,
        s: &ParamStore<T>,
        x: &Tensor<T>,
        cond: Option<&ConditioningVectors<T>>,
    ) -> Result<Tensor<T>> {
        let mut f = self.head.forward(s, x)?;
        let mut skips = Vec::with_capacity(self.encoders.len());
        for enc in &self.encoders {
            let (skip, down) = enc.forward(s, &f)?;
            skips.push(skip);
            f = down;
        }
        for (dec, skip) in self.decoders.iter().zip(&skips).rev() {
            f = dec.forward(s, &f, skip, cond)?;
        }
        Ok(x.add(&self.tail.forward(s, &f)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phase {
    pub unet: UNet,
    /// `λ = softplus(raw)`.
    pub lambda_raw: ParamId,
}

/// Architecture handles into a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct CardioMM {
    pub config: ModelConfig,
    pub heads: Option<TextHeads>,
    pub sens: UNet,
    pub phases: Vec<Phase>,
}

/// Precomputed, scaled tensors for one reconstruction.
#[derive(Debug, Clone)]
pub struct ModelInput<T: Real> {
    /// Masked measurement `[J, 2, H, W]` times `scale`.
    pub y: Tensor<T>,
    pub mask: Vec<bool>,
    /// Apodized ACS coil images `[J, 2, H, W]` times `scale`.
    pub acs_images: Tensor<T>,
    /// 1 inside the object support, broadcast to `[J, 2, H, W]`.
    pub support: Tensor<T>,
    /// Raw text embeddings (metadata, undersampling).
    pub texts: Option<(Vec<f64>, Vec<f64>)>,
    /// Inputs are multiplied by this; outputs are divided by it.
    pub scale: f64,
}

/// Packs `[J, H, W]` complex data as `[J, 2, H, W]` times `scale`.
pub fn complex_to_tensor<T: Real>(x: &Array3<Complex64>, scale: f64) -> Tensor<T> {
    let (j, h, w) = x.dim();
    let mut data = Vec::with_capacity(2 * j * h * w);
    for coil in x.outer_iter() {
        data.extend(coil.iter().map(|v| T::of(v.re * scale)));
        data.extend(coil.iter().map(|v| T::of(v.im * scale)));
    }
    Tensor::new(data, &[j, 2, h, w]).expect("length matches shape")
}

/// Inverse of [`complex_to_tensor`].
pub fn tensor_to_complex<T: Real>(t: &Tensor<T>, scale: f64) -> Result<Array3<Complex64>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 2 {
        return Err(ModelError::Input(format!("expected [J, 2, H, W], got {s:?}")));
    }
    let (j, h, w) = (s[0], s[2], s[3]);
    let plane = h * w;
    let d = t.data();
    let mut out = Vec::with_capacity(j * plane);
    for c in 0..j {
        let (re, im) = (&d[2 * c * plane..(2 * c + 1) * plane], &d[(2 * c + 1) * plane..(2 * c + 2) * plane]);
        out.extend(re.iter().zip(im).map(|(&a, &b)| Complex64::new(a.f64() / scale, b.f64() / scale)));
    }
    Ok(Array3::from_shape_vec((j, h, w), out).expect("length matches shape"))
}

impl<T: Real> ModelInput<T> {
    /// Scales so the zero-filled root-sum-of-squares peaks at 1.
    pub fn prepare(
        y: &Array3<Complex64>,
        mask: &Array2<bool>,
        acs: Acs,
        texts: Option<(&dyn TextEncoder, &TextBundle)>,
    ) -> Result<Self> {
        let (j, h, w) = y.dim();
        if j == 0 || h == 0 || w == 0 {
            return Err(ModelError::Input(format!("empty k-space {:?}", y.dim())));
        }
        if y.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(ModelError::Input("k-space contains non-finite values".into()));
        }
        let ym = physics::apply_mask_stack(y, mask)?;
        let zf_max = physics::sos(&physics::ifft2c(&ym)).iter().copied().fold(0.0, f64::max);
        let scale = if zf_max > 0.0 { 1.0 / zf_max } else { 1.0 };
        let acs_img = classic::acs_images(&ym, acs)?;
        let support = classic::support_mask(&acs_img);
        let plane: Vec<T> = support.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        let mut sup = Vec::with_capacity(2 * j * h * w);
        for _ in 0..2 * j {
            sup.extend_from_slice(&plane);
        }
        let texts = match texts {
            Some((enc, b)) => Some((enc.encode(&b.metadata)?, enc.encode(&b.undersampling)?)),
            None => None,
        };
        Ok(ModelInput {
            y: complex_to_tensor(&ym, scale),
            mask: mask.iter().copied().collect(),
            acs_images: complex_to_tensor(&acs_img, scale),
            support: Tensor::new(sup, &[j, 2, h, w])?,
            texts,
            scale,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.y.shape();
        (s[0], s[2], s[3])
    }
}

/// Result of a tensor-level forward pass (scaled units).
#[derive(Debug, Clone)]
pub struct Forward<T: Real> {
    pub x: Tensor<T>,
    pub sens: Tensor<T>,
    pub lambdas: Vec<f64>,
    /// `x^(k)` after every phase when tracing.
    pub trace: Vec<Tensor<T>>,
}

/// Centered padding of `n` up to a multiple of `m`: `(before, after)`.
fn pad_amounts(n: usize, m: usize) -> (usize, usize) {
    let total = n.div_ceil(m) * m - n;
    (total / 2, total - total / 2)
}

impl CardioMM {
    /// Registers every parameter in `store` (which should be empty).
    pub fn build<T: Real>(config: ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store,
            seed: config.seed,
        };
        let heads = if config.text_aware {
            let mut rng = b.rng_for("text");
            Some(TextHeads::register(b.store, config.embed_dim, &mut rng)?)
        } else {
            None
        };
        let sens = UNet::build(&mut b, "sens", &config, config.sens_channels, Conditioning::Plain)?;
        let cond = if config.text_aware {
            Conditioning::Text
        } else {
            Conditioning::Blind
        };
        let mut phases = Vec::with_capacity(config.phases);
        for k in 0..config.phases {
            let name = format!("phase{k:02}");
            let unet = UNet::build(&mut b, &format!("{name}.unet"), &config, config.base_channels, cond)?;
            // softplus(ln(e − 1)) = 1
            let lambda_raw = b.param(
                &format!("{name}.lambda_raw"),
                &[1],
                Init::Const((std::f64::consts::E - 1.0).ln()),
            )?;
            phases.push(Phase { unet, lambda_raw });
        }
        Ok(CardioMM {
            config,
            heads,
            sens,
            phases,
        })
    }

    /// Projected conditioning vectors, or `None` for the text-unaware model.
    pub fn condition<T: Real>(&self, s: &ParamStore<T>, input: &ModelInput<T>) -> Result<Option<ConditioningVectors<T>>> {
        match (&self.heads, &input.texts) {
            (None, _) => Ok(None),
            (Some(_), None) => Err(ModelError::MissingConditioning),
            (Some(h), Some((m, u))) => Ok(Some(ConditioningVectors {
                t_m: h.project(s, TextKind::Metadata, m)?,
                t_u: h.project(s, TextKind::Undersampling, u)?,
            })),
        }
    }

    /// Learned sensitivities `[J, 2, H, W]`, normalized on the ACS support.
    pub fn sens_maps<T: Real>(&self, s: &ParamStore<T>, input: &ModelInput<T>) -> Result<Tensor<T>> {
        let (j, h, w) = input.dims();
        let r = self.run_padded(&self.sens, s, &input.acs_images, None)?;
        let norm = r.sos(T::of(SENS_EPS))?.broadcast_to(&[j, 2, h, w])?;
        Ok(r.div(&norm)?.mul(&input.support)?)
    }

    fn run_padded<T: Real>(
        &self,
        net: &UNet,
        s: &ParamStore<T>,
        x: &Tensor<T>,
        cond: Option<&ConditioningVectors<T>>,
    ) -> Result<Tensor<T>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let m = self.config.pad_multiple();
        let (t, b) = pad_amounts(h, m);
        let (l, r) = pad_amounts(w, m);
        let out = net.forward(s, &x.pad2d(t, b, l, r)?, cond)?;
        Ok(out.crop2d(t, l, h, w)?)
    }

    /// `S · D(Σ_j conj(S_j) x_j)` for one phase.
    pub fn dealias<T: Real>(
        &self,
        s: &ParamStore<T>,
        phase: &Phase,
        x: &Tensor<T>,
        sens: &Tensor<T>,
        cond: Option<&ConditioningVectors<T>>,
    ) -> Result<Tensor<T>> {
        let combined = x.cmul(sens, true)?.sum_dim0()?;
        let u = self.run_padded(&phase.unet, s, &combined, cond)?;
        Ok(sens.cmul(&u.broadcast_to(sens.shape())?, false)?)
    }

    pub fn lambda<T: Real>(&self, s: &ParamStore<T>, phase: &Phase) -> Tensor<T> {
        s.leaf(phase.lambda_raw).softplus()
    }

    /// `x^(0)` is the zero-filled image; each phase de-aliases then
    /// enforces data consistency in k-space.
    pub fn forward<T: Real>(&self, s: &ParamStore<T>, input: &ModelInput<T>, trace: bool) -> Result<Forward<T>> {
        let cond = self.condition(s, input)?;
        let sens = self.sens_maps(s, input)?;
        let mut x = input.y.ifft2c()?;
        let mut lambdas = Vec::with_capacity(self.phases.len());
        let mut traces = Vec::new();
        for phase in &self.phases {
            let m = self.dealias(s, phase, &x, &sens, cond.as_ref())?;
            let lam = self.lambda(s, phase);
            lambdas.push(lam.item().f64());
            x = m.fft2c()?.data_consistency(&input.y, &input.mask, &lam)?.ifft2c()?;
            if trace {
                traces.push(x.detach());
            }
        }
        Ok(Forward {
            x,
            sens,
            lambdas,
            trace: traces,
        })
    }
}

/// Reconstruction in physical units.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub coils: Array3<Complex64>,
    /// `Σ_j conj(S_j) x_j` with the learned sensitivities.
    pub combined: Array2<Complex64>,
    pub sos: Array2<f64>,
    pub sensitivities: CoilSensitivities,
    pub lambdas: Vec<f64>,
    /// Root-sum-of-squares after each phase when requested.
    pub trace: Vec<Array2<f64>>,
}

/// Runs the model without recording a graph.
pub fn reconstruct<T: Real>(
    model: &CardioMM,
    store: &ParamStore<T>,
    encoder: &dyn TextEncoder,
    y: &Array3<Complex64>,
    mask: &Array2<bool>,
    acs: Acs,
    texts: &TextBundle,
    trace: bool,
) -> Result<Reconstruction> {
    no_grad(|| {
        let texts = model.heads.is_some().then_some((encoder, texts));
        let input = ModelInput::<T>::prepare(y, mask, acs, texts)?;
        let out = model.forward(store, &input, trace)?;
        let coils = tensor_to_complex(&out.x, input.scale)?;
        let sens = CoilSensitivities::normalized(tensor_to_complex(&out.sens, 1.0)?, 0.0);
        let combined = physics::coil_combine(&coils, &sens)?;
        let trace = out
            .trace
            .iter()
            .map(|t| Ok(physics::sos(&tensor_to_complex(t, input.scale)?)))
            .collect::<Result<_>>()?;
        Ok(Reconstruction {
            sos: physics::sos(&coils),
            coils,
            combined,
            sensitivities: sens,
            lambdas: out.lambdas,
            trace,
        })
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config: ModelConfig,
    raw_embedding_dim: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `model.json` and `params.{json,bin}` into `dir`.
pub fn save_checkpoint<T: Real>(dir: &Path, model: &CardioMM, store: &ParamStore<T>, with_optimizer: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    store.save(&dir.join("params"), with_optimizer)?;
    let m = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        raw_embedding_dim: RAW_DIM,
    };
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
    crate::autodiff::write_atomic(&dir.join("model.json"), text.as_bytes())?;
    Ok(())
}

pub fn load_config(dir: &Path) -> Result<ModelConfig> {
    let path = dir.join("model.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| ModelError::Format {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if m.format_version != CHECKPOINT_VERSION {
        return Err(ModelError::Format {
            path,
            detail: format!("format_version {} is not supported", m.format_version),
        });
    }
    Ok(m.config)
}

/// Rebuilds the architecture from `model.json` and loads the parameters.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(CardioMM, ParamStore<T>)> {
    let config = load_config(dir)?;
    let mut store = ParamStore::new();
    let model = CardioMM::build(config, &mut store)?;
    store.load(&dir.join("params"))?;
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(text_aware: bool) -> ModelConfig {
        ModelConfig {
            phases: 2,
            levels: 2,
            base_channels: 4,
            prompt_components: 3,
            prompt_size: 4,
            embed_dim: 8,
            sens_channels: 2,
            cab_reduction: 2,
            text_aware,
            seed: 7,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { levels: 1, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { prompt_components: 0, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { base_channels: 5, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { phases: 0, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn padding_is_centered() {
        assert_eq!(pad_amounts(246, 8), (1, 1));
        assert_eq!(pad_amounts(512, 8), (0, 0));
        assert_eq!(pad_amounts(13, 4), (1, 2));
    }

    #[test]
    fn shared_names_initialize_identically() {
        let mut a = ParamStore::<f64>::new();
        let mut b = ParamStore::<f64>::new();
        CardioMM::build(tiny(true), &mut a).unwrap();
        CardioMM::build(tiny(false), &mut b).unwrap();
        let mut shared = 0;
        for id in b.ids() {
            let ia = a.id(b.name(id)).expect("blind names are a subset");
            assert_eq!(a.data(ia), b.data(id), "{}", b.name(id));
            shared += 1;
        }
        assert_eq!(shared, b.len());
        assert!(a.len() > b.len());
    }

    #[test]
    fn lambda_starts_at_one() {
        let mut s = ParamStore::<f64>::new();
        let m = CardioMM::build(tiny(false), &mut s).unwrap();
        for p in &m.phases {
            assert!((m.lambda(&s, p).item() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn complex_tensor_roundtrip() {
        let x = Array3::from_shape_fn((2, 3, 4), |(c, y, x)| Complex64::new(c as f64 + y as f64, x as f64 - 1.5));
        let t = complex_to_tensor::<f64>(&x, 2.0);
        assert_eq!(t.shape(), &[2, 2, 3, 4]);
        assert_eq!(tensor_to_complex(&t, 2.0).unwrap(), x);
    }
}
