//! Finite-difference suites shared by the autodiff tests and the acceptance
//! run.

#![allow(dead_code)]

use cardiomm::autodiff::{grad_check, grad_check_sampled, ConvSpec, GradCheckReport, ParamId, ParamStore, Tensor};
use cardiomm::model::{CardioMM, ModelConfig};
use cardiomm::text::{HashingEncoder, TextBundle};
use cardiomm::train::ssim_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub type Check = (String, GradCheckReport);

/// Uniform values in ±1 kept at least `0.05` away from zero, so kinks of
/// ReLU-type activations are never within a finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random::<bool>() { v } else { -v }
        })
        .collect()
}

struct Case {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
    n: usize,
}

impl Case {
    fn new(seed: u64) -> Self {
        Case { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed), n: 0 }
    }

    fn param(&mut self, shape: &[usize]) -> ParamId {
        let data = away_from_zero(&mut self.rng, shape.iter().product());
        self.n += 1;
        self.store.register(&format!("p{}", self.n), shape, data).unwrap()
    }

    fn positive(&mut self, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(0.5..2.0)).collect();
        self.n += 1;
        self.store.register(&format!("p{}", self.n), shape, data).unwrap()
    }

    fn weights(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| self.rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    /// Checks `Σ w ⊙ f(params)` with a fixed random `w`.
    fn check(
        mut self,
        name: &str,
        ids: &[ParamId],
        out_shape: &[usize],
        f: impl Fn(&ParamStore<f64>) -> cardiomm::autodiff::Result<Tensor<f64>>,
    ) -> Check {
        let w = self.weights(out_shape);
        let rep = grad_check(&mut self.store, ids, FD_EPS, FD_TOL, |s| Ok(f(s)?.mul(&w)?.sum())).unwrap();
        (name.to_string(), rep)
    }
}

/// One check per differentiable primitive, with respect to every tensor
/// argument.
pub fn primitive_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let mut seed = 100;
    let mut case = || {
        seed += 1;
        Case::new(seed)
    };

    for (label, spec, hw, o) in [
        ("conv2d same", ConvSpec::SAME3, 6, 6),
        ("conv2d stride2", ConvSpec { stride: 2, pad: 1 }, 7, 4),
    ] {
        let mut c = case();
        let (x, w, b) = (c.param(&[2, 3, hw, hw]), c.param(&[4, 3, 3, 3]), c.param(&[4]));
        out.push(c.check(label, &[x, w, b], &[2, 4, o, o], move |s| {
            s.leaf(x).conv2d(&s.leaf(w), Some(&s.leaf(b)), spec)
        }));
    }
    {
        let mut c = case();
        let (x, w, b) = (c.param(&[3, 5]), c.param(&[4, 5]), c.param(&[4]));
        out.push(c.check("linear", &[x, w, b], &[3, 4], move |s| s.leaf(x).linear(&s.leaf(w), Some(&s.leaf(b)))));
    }
    let unary: [(&str, fn(&Tensor<f64>) -> cardiomm::autodiff::Result<Tensor<f64>>); 12] = [
        ("sigmoid", |t| Ok(t.sigmoid())),
        ("relu", |t| Ok(t.relu())),
        ("softplus", |t| Ok(t.softplus())),
        ("softmax", |t| t.softmax_lastdim()),
        ("neg", |t| Ok(t.neg())),
        ("scale", |t| Ok(t.scale(-1.7))),
        ("add_scalar", |t| Ok(t.add_scalar(0.3))),
        ("square", |t| Ok(t.square())),
        ("sqrt_eps", |t| Ok(t.square().sqrt_eps(1e-3))),
        ("l2_normalize_rows", |t| t.reshape(&[2, 48])?.l2_normalize_rows()?.reshape(&[2, 3, 4, 4])),
        ("pad2d", |t| t.pad2d(1, 2, 0, 3)?.crop2d(0, 0, 4, 4)),
        ("crop2d", |t| t.crop2d(1, 1, 3, 2)?.pad2d(1, 0, 1, 1)),
    ];
    for (name, f) in unary {
        let mut c = case();
        let x = c.param(&[2, 3, 4, 4]);
        out.push(c.check(name, &[x], &[2, 3, 4, 4], move |s| f(&s.leaf(x))));
    }
    for (name, f) in [
        ("sum", (|t: &Tensor<f64>| Ok(t.sum())) as fn(&Tensor<f64>) -> cardiomm::autodiff::Result<Tensor<f64>>),
        ("mean", |t| Ok(t.mean())),
    ] {
        let mut c = case();
        let x = c.param(&[2, 3, 4, 4]);
        out.push(c.check(name, &[x], &[1], move |s| f(&s.leaf(x))));
    }
    {
        let mut c = case();
        let (x, a) = (c.param(&[2, 3, 4, 4]), c.param(&[1]));
        out.push(c.check("prelu", &[x, a], &[2, 3, 4, 4], move |s| s.leaf(x).prelu(&s.leaf(a))));
    }
    {
        let mut c = case();
        let x = c.param(&[2, 3, 4, 5]);
        out.push(c.check("global_avg_pool", &[x], &[2, 3, 1, 1], move |s| s.leaf(x).global_avg_pool()));
    }
    for (name, oh, ow) in [("resample up", 9, 7), ("resample down", 3, 2)] {
        let mut c = case();
        let x = c.param(&[1, 2, 4, 5]);
        out.push(c.check(name, &[x], &[1, 2, oh, ow], move |s| s.leaf(x).resample_bilinear(oh, ow)));
    }
    {
        let mut c = case();
        let (x, g) = (c.param(&[2, 3, 4, 4]), c.param(&[2, 3, 1, 1]));
        out.push(c.check("scale_channels", &[x, g], &[2, 3, 4, 4], move |s| s.leaf(x).scale_channels(&s.leaf(g))));
    }
    {
        let mut c = case();
        let (x, g, b) = (c.param(&[2, 3, 4, 4]), c.param(&[3]), c.param(&[3]));
        out.push(c.check("channel_affine", &[x, g, b], &[2, 3, 4, 4], move |s| {
            s.leaf(x).channel_affine(&s.leaf(g), &s.leaf(b))
        }));
    }
    type Binary = fn(&Tensor<f64>, &Tensor<f64>) -> cardiomm::autodiff::Result<Tensor<f64>>;
    let binary: [(&str, Binary); 4] = [
        ("add", |a, b| a.add(b)),
        ("sub", |a, b| a.sub(b)),
        ("mul", |a, b| a.mul(b)),
        ("div", |a, b| a.div(b)),
    ];
    for (name, f) in binary {
        let mut c = case();
        let a = c.param(&[2, 3, 4]);
        let b = if name == "div" { c.positive(&[2, 3, 4]) } else { c.param(&[2, 3, 4]) };
        out.push(c.check(name, &[a, b], &[2, 3, 4], move |s| f(&s.leaf(a), &s.leaf(b))));
    }
    {
        let mut c = case();
        let x = c.param(&[1, 3, 1, 1]);
        out.push(c.check("broadcast_to", &[x], &[2, 3, 4, 4], move |s| s.leaf(x).broadcast_to(&[2, 3, 4, 4])));
    }
    {
        let mut c = case();
        let x = c.param(&[3, 2, 4, 4]);
        out.push(c.check("sum_dim0", &[x], &[1, 2, 4, 4], move |s| s.leaf(x).sum_dim0()));
    }
    {
        let mut c = case();
        let (a, b) = (c.param(&[2, 1, 3, 3]), c.param(&[2, 3, 3, 3]));
        out.push(c.check("concat_channels", &[a, b], &[2, 4, 3, 3], move |s| {
            Tensor::concat_channels(&[s.leaf(a), s.leaf(b)])
        }));
    }
    {
        let mut c = case();
        let x = c.param(&[2, 12]);
        out.push(c.check("reshape", &[x], &[4, 6], move |s| s.leaf(x).reshape(&[4, 6])));
    }
    for (name, inverse) in [("fft2c", false), ("ifft2c", true)] {
        let mut c = case();
        let x = c.param(&[2, 2, 5, 6]);
        out.push(c.check(name, &[x], &[2, 2, 5, 6], move |s| {
            if inverse { s.leaf(x).ifft2c() } else { s.leaf(x).fft2c() }
        }));
    }
    for (name, conj) in [("cmul", false), ("cmul conj", true)] {
        let mut c = case();
        let (a, b) = (c.param(&[3, 2, 4, 4]), c.param(&[3, 2, 4, 4]));
        out.push(c.check(name, &[a, b], &[3, 2, 4, 4], move |s| s.leaf(a).cmul(&s.leaf(b), conj)));
    }
    {
        let mut c = case();
        let x = c.param(&[3, 2, 4, 4]);
        out.push(c.check("sos", &[x], &[1, 1, 4, 4], move |s| s.leaf(x).sos(1e-12)));
    }
    {
        let mut c = case();
        let (k, lam) = (c.param(&[2, 2, 4, 4]), c.positive(&[1]));
        let y = c.weights(&[2, 2, 4, 4]);
        let mask: Vec<bool> = (0..16).map(|i| i % 3 != 1).collect();
        out.push(c.check("data_consistency", &[k, lam], &[2, 2, 4, 4], move |s| {
            s.leaf(k).data_consistency(&y, &mask, &s.leaf(lam))
        }));
    }
    out
}

pub fn micro_config(text_aware: bool) -> ModelConfig {
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
        seed: 11,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

/// Checks of the composite network blocks and the training loss.
pub fn block_checks() -> Vec<Check> {
    let mut s = ParamStore::<f64>::new();
    let model = CardioMM::build(micro_config(true), &mut s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Leave the initialization so zero-initialized projections carry signal.
    for id in s.ids().collect::<Vec<_>>() {
        s.data_mut(id).iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    let bundle =
        TextBundle::new("modality cine; view sax; field 3.0t; vendor simulated", "pattern radial; af 8").unwrap();
    let heads = model.heads.unwrap();
    let unet = &model.phases[0].unet;
    let prefixed = |s: &ParamStore<f64>, p: &str| s.ids().filter(|&id| s.name(id).starts_with(p)).collect::<Vec<_>>();
    let mut out = Vec::new();

    let cab = unet.encoders[0].cabs[0];
    let x = random_tensor(&mut rng, &[1, 4, 8, 8]);
    let w = random_tensor(&mut rng, &[1, 4, 8, 8]);
    let ids = prefixed(&s, "phase00.unet.enc0.cab0.");
    let rep = grad_check(&mut s, &ids, FD_EPS, FD_TOL, |s| Ok(cab.forward(s, &x).unwrap().mul(&w)?.sum())).unwrap();
    out.push(("channel attention block".to_string(), rep));

    let adapter = unet.decoders[0].adapter.unwrap();
    let ids = prefixed(&s, "phase00.unet.dec0.adapter.");
    let rep = grad_check_sampled(&mut s, &ids, FD_EPS, FD_TOL, 24, |s| {
        let c = heads.condition(s, &HashingEncoder, &bundle).unwrap();
        Ok(adapter.forward(s, &x, &c.t_m).unwrap().mul(&w)?.sum())
    })
    .unwrap();
    out.push(("metadata adapter".to_string(), rep));

    let prompter = unet.decoders[0].prompter.unwrap();
    let pw = random_tensor(&mut rng, &[1, 2, 4, 4]);
    let mut ids = prefixed(&s, "phase00.unet.dec0.prompt.");
    ids.extend(prefixed(&s, "text.undersampling"));
    let rep = grad_check_sampled(&mut s, &ids, FD_EPS, FD_TOL, 24, |s| {
        let c = heads.condition(s, &HashingEncoder, &bundle).unwrap();
        Ok(prompter.forward(s, &c.t_u, 4, 4).unwrap().mul(&pw)?.sum())
    })
    .unwrap();
    out.push(("undersampling prompter".to_string(), rep));

    let dec = unet.decoders[0].clone();
    let f_di = random_tensor(&mut rng, &[1, 8, 4, 4]);
    let ids = prefixed(&s, "phase00.unet.dec0.");
    let rep = grad_check_sampled(&mut s, &ids, FD_EPS, FD_TOL, 6, |s| {
        let c = heads.condition(s, &HashingEncoder, &bundle).unwrap();
        Ok(dec.forward(s, &f_di, &x, Some(&c)).unwrap().mul(&w)?.sum())
    })
    .unwrap();
    out.push(("decoder level".to_string(), rep));

    let mut ls = ParamStore::<f64>::new();
    let a: Vec<f64> = (0..256).map(|_| rng.random_range(0.1..1.0)).collect();
    let b: Vec<f64> = a.iter().map(|v| (v + rng.random_range(-0.2..0.2f64)).abs()).collect();
    let xa = ls.register("recon", &[1, 1, 16, 16], a).unwrap();
    let xb = ls.register("reference", &[1, 1, 16, 16], b).unwrap();
    let rep = grad_check(&mut ls, &[xa, xb], FD_EPS, FD_TOL, |s| ssim_loss(&s.leaf(xa), &s.leaf(xb), 1.0)).unwrap();
    out.push(("ssim loss".to_string(), rep));
    out
}

/// Smooth test object: a few Gaussian blobs inside a soft elliptical
/// envelope, peak-normalized.
pub fn smooth_object(ny: usize, nx: usize, seed: u64) -> ndarray::Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(-0.35..0.35),
                rng.random_range(-0.35..0.35),
                rng.random_range(0.12..0.3),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let (ay, ax) = (rng.random_range(0.55..0.75), rng.random_range(0.55..0.75));
    let img = ndarray::Array2::from_shape_fn((ny, nx), |(y, x)| {
        let u = 2.0 * (y as f64 + 0.5) / ny as f64 - 1.0;
        let v = 2.0 * (x as f64 + 0.5) / nx as f64 - 1.0;
        let r2 = (u / ay).powi(2) + (v / ax).powi(2);
        let envelope = 1.0 / (1.0 + ((r2 - 1.0) * 12.0).exp());
        let body: f64 = blobs
            .iter()
            .map(|&(cy, cx, s, a)| a * (-((u - cy).powi(2) + (v - cx).powi(2)) / (2.0 * s * s)).exp())
            .sum();
        envelope * (0.3 + body)
    });
    let peak = img.iter().copied().fold(0.0, f64::max);
    img / peak
}
