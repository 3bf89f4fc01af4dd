//! Layer primitives: convolution, linear maps, activations, pooling and
//! resampling.

use super::{shape_err, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const SAME3: ConvSpec = ConvSpec { stride: 1, pad: 1 };
    pub const UNIT: ConvSpec = ConvSpec { stride: 1, pad: 0 };
    pub const DOWN2: ConvSpec = ConvSpec { stride: 2, pad: 0 };
}

/// Parameter-free nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    /// Normalizes the last dimension to sum to one.
    Softmax,
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

/// Target number of output pixels per im2col tile; keeps the column buffer
/// cache-resident for the channel counts used here.
const TILE_PIXELS: usize = 2048;

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output-row tiles `[oy0, oy1)`.
    fn tiles(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = (TILE_PIXELS / self.ow.max(1)).max(1);
        let oh = self.oh;
        (0..oh).step_by(step).map(move |r| (r, (r + step).min(oh)))
    }

    /// Output columns `[lo, hi)` whose input column for tap `kx` is in range.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let (s, pad) = (self.stride as isize, self.pad as isize);
        let k = kx as isize;
        // ix = ox*s + kx - pad must lie in [0, w).
        let lo = (((pad - k).max(0) + s - 1) / s).min(self.ow as isize);
        let last = self.w as isize - 1 + pad - k;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(self.ow as isize) };
        (lo as usize, hi.max(lo) as usize)
    }

    /// Columns for output rows `[oy0, oy1)`: `cols` is `rows × (tile·ow)`.
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T], oy0: usize, oy1: usize) {
        let tp = (oy1 - oy0) * self.ow;
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * tp..(row + 1) * tp];
                    let (lo, hi) = self.valid_ox(kx);
                    for oy in oy0..oy1 {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let drow = &mut dst[(oy - oy0) * self.ow..(oy - oy0 + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        let ix0 = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            drow[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (j, d) in drow[lo..hi].iter_mut().enumerate() {
                                *d = src[ix0 + j * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds tile columns back onto the input gradient.
    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T], oy0: usize, oy1: usize) {
        let tp = (oy1 - oy0) * self.ow;
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * tp..(row + 1) * tp];
                    let (lo, hi) = self.valid_ox(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let srow = &src[(oy - oy0) * self.ow..(oy - oy0 + 1) * self.ow];
                        let ix0 = lo * self.stride + kx - self.pad;
                        for (j, &v) in srow[lo..hi].iter().enumerate() {
                            drow[ix0 + j * self.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tensor<T> {
    /// 2-D cross-correlation: `x` is `[N, C, H, W]`, `w` is `[O, C, KH, KW]`,
    /// `b` is `[O]`.
    pub fn conv2d(&self, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: ConvSpec) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ws = w.shape();
        if xs.len() != 4 {
            return shape_err("conv2d", format!("input must be NCHW, got {xs:?}"));
        }
        if ws.len() != 4 {
            return shape_err("conv2d", format!("kernel must be OIKK, got {ws:?}"));
        }
        if xs[1] != ws[1] {
            return shape_err(
                "conv2d",
                format!("input channels (dim 1) {} != kernel in-channels {}", xs[1], ws[1]),
            );
        }
        if spec.stride == 0 {
            return shape_err("conv2d", "stride must be >= 1");
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if let Some(b) = b {
            if b.shape() != [o] {
                return shape_err("conv2d", format!("bias shape {:?} != [{o}]", b.shape()));
            }
        }
        if h + 2 * spec.pad < kh {
            return shape_err("conv2d", format!("padded height {} < kernel height {kh}", h + 2 * spec.pad));
        }
        if wd + 2 * spec.pad < kw {
            return shape_err("conv2d", format!("padded width {} < kernel width {kw}", wd + 2 * spec.pad));
        }
        let g = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            oh: (h + 2 * spec.pad - kh) / spec.stride + 1,
            ow: (wd + 2 * spec.pad - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.pad,
        };
        let (rows, p) = (g.rows(), g.cols());
        let in_item = c * h * wd;
        let out_item = o * p;
        let mut out = vec![T::zero(); n * out_item];
        if g.is_pointwise() {
            for bi in 0..n {
                let xi = &self.data()[bi * in_item..(bi + 1) * in_item];
                T::gemm(o, rows, p, w.data(), false, xi, false, &mut out[bi * out_item..(bi + 1) * out_item], false);
            }
        } else {
            let tile_max = g.tiles().map(|(a, b)| b - a).max().unwrap_or(0) * g.ow;
            let mut cols = vec![T::zero(); rows * tile_max];
            let mut tmp = vec![T::zero(); o * tile_max];
            for bi in 0..n {
                let xi = &self.data()[bi * in_item..(bi + 1) * in_item];
                let yo = &mut out[bi * out_item..(bi + 1) * out_item];
                for (oy0, oy1) in g.tiles() {
                    let tp = (oy1 - oy0) * g.ow;
                    g.im2col(xi, &mut cols, oy0, oy1);
                    T::gemm(o, rows, tp, w.data(), false, &cols[..rows * tp], false, &mut tmp[..o * tp], false);
                    for oc in 0..o {
                        let dst = oc * p + oy0 * g.ow;
                        yo[dst..dst + tp].copy_from_slice(&tmp[oc * tp..(oc + 1) * tp]);
                    }
                }
            }
        }
        if let Some(b) = b {
            for (oc, row) in out.chunks_mut(p).enumerate() {
                let bv = b.data()[oc % o];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }

        let x = self.clone();
        let wt = w.clone();
        let has_b = b.is_some();
        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = b {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op("conv2d", vec![n, o, g.oh, g.ow], out, parents, move |gy, _| {
            let need_x = x.requires_grad();
            let need_w = wt.requires_grad();
            let mut dx = need_x.then(|| vec![T::zero(); n * in_item]);
            let mut dw = need_w.then(|| vec![T::zero(); o * rows]);
            if g.is_pointwise() {
                for bi in 0..n {
                    let gyi = &gy[bi * out_item..(bi + 1) * out_item];
                    if let Some(dw) = dw.as_mut() {
                        let xi = &x.data()[bi * in_item..(bi + 1) * in_item];
                        T::gemm(o, p, rows, gyi, false, xi, true, dw, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxi = &mut dx[bi * in_item..(bi + 1) * in_item];
                        T::gemm(rows, o, p, wt.data(), true, gyi, false, dxi, false);
                    }
                }
            } else {
                let tile_max = g.tiles().map(|(a, b)| b - a).max().unwrap_or(0) * g.ow;
                let mut cols = vec![T::zero(); rows * tile_max];
                let mut gt = vec![T::zero(); o * tile_max];
                for bi in 0..n {
                    let gyi = &gy[bi * out_item..(bi + 1) * out_item];
                    let xi = &x.data()[bi * in_item..(bi + 1) * in_item];
                    for (oy0, oy1) in g.tiles() {
                        let tp = (oy1 - oy0) * g.ow;
                        for oc in 0..o {
                            let src = oc * p + oy0 * g.ow;
                            gt[oc * tp..(oc + 1) * tp].copy_from_slice(&gyi[src..src + tp]);
                        }
                        if let Some(dw) = dw.as_mut() {
                            g.im2col(xi, &mut cols, oy0, oy1);
                            T::gemm(o, tp, rows, &gt[..o * tp], false, &cols[..rows * tp], true, dw, true);
                        }
                        if let Some(dx) = dx.as_mut() {
                            let dxi = &mut dx[bi * in_item..(bi + 1) * in_item];
                            T::gemm(rows, o, tp, wt.data(), true, &gt[..o * tp], false, &mut cols[..rows * tp], false);
                            g.col2im(&cols, dxi, oy0, oy1);
                        }
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if has_b {
                let mut db = vec![T::zero(); o];
                for (i, row) in gy.chunks(p).enumerate() {
                    db[i % o] += row.iter().copied().sum::<T>();
                }
                grads.push(Some(db));
            }
            grads
        }))
    }

    /// `x·wᵀ + b` for `x: [N, Din]`, `w: [Dout, Din]`, `b: [Dout]`.
    pub fn linear(&self, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ws = w.shape();
        if xs.len() != 2 || ws.len() != 2 {
            return shape_err("linear", format!("expected 2-D input and weight, got {xs:?} and {ws:?}"));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if ws[1] != din {
            return shape_err("linear", format!("input dim {din} != weight in-dim {}", ws[1]));
        }
        if let Some(b) = b {
            if b.shape() != [dout] {
                return shape_err("linear", format!("bias shape {:?} != [{dout}]", b.shape()));
            }
        }
        let mut out = vec![T::zero(); n * dout];
        T::gemm(n, din, dout, self.data(), false, w.data(), true, &mut out, false);
        if let Some(b) = b {
            for row in out.chunks_mut(dout) {
                for (v, &bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
        }
        let x = self.clone();
        let wt = w.clone();
        let has_b = b.is_some();
        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = b {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op("linear", vec![n, dout], out, parents, move |gy, _| {
            let dx = x.requires_grad().then(|| {
                let mut dx = vec![T::zero(); n * din];
                T::gemm(n, dout, din, gy, false, wt.data(), false, &mut dx, false);
                dx
            });
            let dw = wt.requires_grad().then(|| {
                let mut dw = vec![T::zero(); dout * din];
                T::gemm(dout, n, din, gy, true, x.data(), false, &mut dw, false);
                dw
            });
            let mut grads = vec![dx, dw];
            if has_b {
                let mut db = vec![T::zero(); dout];
                for row in gy.chunks(dout) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                grads.push(Some(db));
            }
            grads
        }))
    }

    pub fn activation(&self, kind: Activation) -> Result<Tensor<T>> {
        match kind {
            Activation::Sigmoid => Ok(self.sigmoid()),
            Activation::Relu => Ok(self.relu()),
            Activation::Softmax => self.softmax_lastdim(),
        }
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| sigmoid(v)).collect();
        Tensor::from_op("sigmoid", self.shape().to_vec(), data, vec![self.clone()], |g, y| {
            vec![Some(g.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect())]
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v.max(T::zero())).collect();
        let x = self.clone();
        Tensor::from_op("relu", self.shape().to_vec(), data, vec![self.clone()], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
            )]
        })
    }

    /// Parametric ReLU with a single learnable slope `alpha: [1]`.
    pub fn prelu(&self, alpha: &Tensor<T>) -> Result<Tensor<T>> {
        if alpha.numel() != 1 {
            return shape_err("prelu", format!("slope must have one element, got {:?}", alpha.shape()));
        }
        let a = alpha.item();
        let data = self.data().iter().map(|&v| if v > T::zero() { v } else { a * v }).collect();
        let x = self.clone();
        let al = alpha.clone();
        Ok(Tensor::from_op(
            "prelu",
            self.shape().to_vec(),
            data,
            vec![self.clone(), alpha.clone()],
            move |g, _| {
                let a = al.item();
                let dx = x.requires_grad().then(|| {
                    g.iter()
                        .zip(x.data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { a * g })
                        .collect()
                });
                let da = al.requires_grad().then(|| {
                    let s: T = g
                        .iter()
                        .zip(x.data())
                        .filter(|(_, &v)| v <= T::zero())
                        .map(|(&g, &v)| g * v)
                        .sum();
                    vec![s]
                });
                vec![dx, da]
            },
        ))
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&self) -> Tensor<T> {
        let data = self
            .data()
            .iter()
            .map(|&v| v.max(T::zero()) + (T::one() + (-v.abs()).exp()).ln())
            .collect();
        let x = self.clone();
        Tensor::from_op("softplus", self.shape().to_vec(), data, vec![self.clone()], move |g, _| {
            vec![Some(g.iter().zip(x.data()).map(|(&g, &v)| g * sigmoid(v)).collect())]
        })
    }

    pub fn softmax_lastdim(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        let Some(&d) = s.last() else {
            return shape_err("softmax", "rank 0");
        };
        if d == 0 {
            return shape_err("softmax", "empty last dimension");
        }
        let mut data = Vec::with_capacity(self.numel());
        for row in self.data().chunks(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: T = e.iter().copied().sum();
            data.extend(e.into_iter().map(|v| v / z));
        }
        Ok(Tensor::from_op("softmax", s.to_vec(), data, vec![self.clone()], move |g, y| {
            let mut gi = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(d).zip(y.chunks(d)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                gi.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
            }
            vec![Some(gi)]
        }))
    }

    /// Mean over H and W: `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return shape_err("global_avg_pool", format!("expected NCHW, got {s:?}"));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / T::of(plane as f64);
        let data = self.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        Ok(Tensor::from_op("global_avg_pool", vec![n, c, 1, 1], data, vec![self.clone()], move |g, _| {
            let mut gi = Vec::with_capacity(n * c * plane);
            for &gv in g {
                gi.extend(std::iter::repeat_n(gv * inv, plane));
            }
            vec![Some(gi)]
        }))
    }

    /// Bilinear resampling of the spatial axes with half-pixel
    /// (align-corners-false) sample positions.
    pub fn resample_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return shape_err("resample_bilinear", format!("expected NCHW, got {s:?}"));
        }
        if out_h == 0 || out_w == 0 {
            return shape_err("resample_bilinear", "output size must be >= 1");
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        if h == out_h && w == out_w {
            return Ok(self.clone());
        }
        let ys = axis_weights::<T>(h, out_h);
        let xs = axis_weights::<T>(w, out_w);
        let mut data = Vec::with_capacity(nc * out_h * out_w);
        for p in self.data().chunks(h * w) {
            for &(y0, y1, wy0, wy1) in &ys {
                for &(x0, x1, wx0, wx1) in &xs {
                    let v = wy0 * (wx0 * p[y0 * w + x0] + wx1 * p[y0 * w + x1])
                        + wy1 * (wx0 * p[y1 * w + x0] + wx1 * p[y1 * w + x1]);
                    data.push(v);
                }
            }
        }
        Ok(Tensor::from_op(
            "resample_bilinear",
            vec![s[0], s[1], out_h, out_w],
            data,
            vec![self.clone()],
            move |g, _| {
                let mut gi = vec![T::zero(); nc * h * w];
                for (gp, dp) in g.chunks(out_h * out_w).zip(gi.chunks_mut(h * w)) {
                    for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                            let gv = gp[oy * out_w + ox];
                            dp[y0 * w + x0] += gv * wy0 * wx0;
                            dp[y0 * w + x1] += gv * wy0 * wx1;
                            dp[y1 * w + x0] += gv * wy1 * wx0;
                            dp[y1 * w + x1] += gv * wy1 * wx1;
                        }
                    }
                }
                vec![Some(gi)]
            },
        ))
    }
}

/// Source taps and weights along one axis for align-corners-false
/// interpolation.
fn axis_weights<T: Real>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T, T)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l = src - i0 as f64;
            (i0, i1, T::of(1.0 - l), T::of(l))
        })
        .collect()
}

impl<T: Real> Tensor<T> {
    /// Multiplies every `[H, W]` plane of `[N, C, H, W]` by the matching
    /// entry of `scale: [N, C, 1, 1]`.
    pub fn scale_channels(&self, scale: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 || scale.shape() != [s[0], s[1], 1, 1] {
            return shape_err("scale_channels", format!("{s:?} by {:?}", scale.shape()));
        }
        let plane = s[2] * s[3];
        let data = self
            .data()
            .chunks(plane)
            .zip(scale.data())
            .flat_map(|(p, &a)| p.iter().map(move |&v| v * a))
            .collect();
        let (x, sc) = (self.clone(), scale.clone());
        Ok(Tensor::from_op(
            "scale_channels",
            s.to_vec(),
            data,
            vec![self.clone(), scale.clone()],
            move |g, _| {
                let dx = x.requires_grad().then(|| {
                    g.chunks(plane)
                        .zip(sc.data())
                        .flat_map(|(p, &a)| p.iter().map(move |&v| v * a))
                        .collect()
                });
                let ds = sc.requires_grad().then(|| {
                    g.chunks(plane)
                        .zip(x.data().chunks(plane))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect()
                });
                vec![dx, ds]
            },
        ))
    }

    /// `γ_c · x + β_c` per channel with `gamma, beta: [C]`.
    pub fn channel_affine(&self, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 || gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
            return shape_err(
                "channel_affine",
                format!("{s:?} with gamma {:?}, beta {:?}", gamma.shape(), beta.shape()),
            );
        }
        let (c, plane) = (s[1], s[2] * s[3]);
        let data = self
            .data()
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, p)| {
                let (gm, bt) = (gamma.data()[i % c], beta.data()[i % c]);
                p.iter().map(move |&v| gm * v + bt)
            })
            .collect();
        let (x, gt, bt) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::from_op(
            "channel_affine",
            s.to_vec(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, _| {
                let dx = x.requires_grad().then(|| {
                    g.chunks(plane)
                        .enumerate()
                        .flat_map(|(i, p)| {
                            let gm = gt.data()[i % c];
                            p.iter().map(move |&v| v * gm)
                        })
                        .collect()
                });
                let dg = gt.requires_grad().then(|| {
                    let mut d = vec![T::zero(); c];
                    for (i, (gp, xp)) in g.chunks(plane).zip(x.data().chunks(plane)).enumerate() {
                        d[i % c] += gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    d
                });
                let db = bt.requires_grad().then(|| {
                    let mut d = vec![T::zero(); c];
                    for (i, gp) in g.chunks(plane).enumerate() {
                        d[i % c] += gp.iter().copied().sum::<T>();
                    }
                    d
                });
                vec![dx, dg, db]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct nested-loop cross-correlation.
    #[allow(clippy::too_many_arguments)]
    fn conv_oracle(
        x: &[f64],
        xs: [usize; 4],
        w: &[f64],
        ws: [usize; 4],
        b: &[f64],
        stride: usize,
        pad: usize,
    ) -> (Vec<f64>, usize, usize) {
        let [n, c, h, wd] = xs;
        let [o, _, kh, kw] = ws;
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for bi in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b[oc];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += x[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w[((oc * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((bi * o + oc) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        (out, oh, ow)
    }

    #[test]
    fn identity_kernel_copies_input() {
        let x = Tensor::<f64>::from_f64(&[1., 2., 3., 4., 5., 6., 7., 8., 9.], &[1, 1, 3, 3]).unwrap();
        let w = Tensor::<f64>::from_f64(&[1.0], &[1, 1, 1, 1]).unwrap();
        let b = Tensor::<f64>::from_f64(&[0.0], &[1]).unwrap();
        let y = x.conv2d(&w, Some(&b), ConvSpec::UNIT).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor::<f64>::zeros(&[1, 2, 5, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::<f64>::from_f64(&rand_vec(&mut rng, 3 * 2 * 9), &[3, 2, 3, 3]).unwrap();
        let b = Tensor::<f64>::full(&[3], 0.5);
        let y = x.conv2d(&w, Some(&b), ConvSpec::SAME3).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs = [2, 3, 8, 8];
        let ws = [4, 3, 3, 3];
        let xv = rand_vec(&mut rng, xs.iter().product());
        let wv = rand_vec(&mut rng, ws.iter().product());
        let bv = rand_vec(&mut rng, 4);
        let x = Tensor::<f64>::from_f64(&xv, &xs).unwrap();
        let w = Tensor::<f64>::from_f64(&wv, &ws).unwrap();
        let b = Tensor::<f64>::from_f64(&bv, &[4]).unwrap();
        for (stride, pad) in [(1, 1), (1, 0), (2, 1), (2, 0)] {
            let y = x.conv2d(&w, Some(&b), ConvSpec { stride, pad }).unwrap();
            let (oracle, oh, ow) = conv_oracle(&xv, xs, &wv, ws, &bv, stride, pad);
            assert_eq!(y.shape(), &[2, 4, oh, ow]);
            for (a, e) in y.data().iter().zip(&oracle) {
                assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0), "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_reports_offending_dimension() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(&[2, 4, 3, 3]);
        let err = x.conv2d(&w, None, ConvSpec::SAME3).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
        let w = Tensor::<f64>::zeros(&[2, 3, 5, 5]);
        let err = Tensor::<f64>::zeros(&[1, 3, 2, 2]).conv2d(&w, None, ConvSpec::UNIT).unwrap_err();
        assert!(err.to_string().contains("height"));
    }

    #[test]
    fn linear_identity_and_constant() {
        let x = Tensor::<f64>::from_f64(&[1., 2., 3., 4., 5., 6.], &[2, 3]).unwrap();
        let eye = Tensor::<f64>::from_f64(&[1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3]).unwrap();
        let zero_b = Tensor::<f64>::zeros(&[3]);
        assert_eq!(x.linear(&eye, Some(&zero_b)).unwrap().data(), x.data());
        let zw = Tensor::<f64>::zeros(&[2, 3]);
        let cb = Tensor::<f64>::full(&[2], 1.25);
        assert!(x.linear(&zw, Some(&cb)).unwrap().data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn linear_matches_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, din, dout) = (4, 7, 5);
        let xv = rand_vec(&mut rng, n * din);
        let wv = rand_vec(&mut rng, dout * din);
        let bv = rand_vec(&mut rng, dout);
        let y = Tensor::<f64>::from_f64(&xv, &[n, din])
            .unwrap()
            .linear(
                &Tensor::from_f64(&wv, &[dout, din]).unwrap(),
                Some(&Tensor::from_f64(&bv, &[dout]).unwrap()),
            )
            .unwrap();
        for i in 0..n {
            for o in 0..dout {
                let e: f64 = bv[o] + (0..din).map(|k| xv[i * din + k] * wv[o * din + k]).sum::<f64>();
                let a = y.data()[i * dout + o];
                assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn activation_examples() {
        let z = Tensor::<f64>::zeros(&[2, 3]);
        assert!(z.sigmoid().data().iter().all(|&v| v == 0.5));
        let c = Tensor::<f64>::full(&[1, 4], 2.0).softmax_lastdim().unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let l = Tensor::<f64>::from_f64(&[1f64.ln(), 2f64.ln(), 3f64.ln()], &[1, 3])
            .unwrap()
            .softmax_lastdim()
            .unwrap();
        for (a, e) in l.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn global_avg_pool_examples() {
        let x = Tensor::<f64>::from_f64(&[1., 2., 3., 4.], &[1, 1, 2, 2]).unwrap();
        assert_eq!(x.global_avg_pool().unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full(&[2, 3, 4, 5], 1.5);
        assert!(c.global_avg_pool().unwrap().data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn bilinear_upsample_of_ramp_matches_closed_form() {
        // Row [0, 1] resampled to 4 samples: positions (o+0.5)/2-0.5 =
        // -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped tap) -> 0, .25, .75, 1
        let x = Tensor::<f64>::from_f64(&[0.0, 1.0], &[1, 1, 1, 2]).unwrap();
        let y = x.resample_bilinear(1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
        let c = Tensor::<f64>::full(&[1, 2, 3, 5], 0.7).resample_bilinear(7, 4).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }
}
