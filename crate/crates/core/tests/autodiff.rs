mod common;

use cardiomm::autodiff::{ConvSpec, ParamStore, Tensor};
use cardiomm::model::CardioMM;
use proptest::prelude::*;

#[test]
fn every_primitive_matches_central_differences() {
    let checks = common::primitive_checks();
    assert!(checks.len() >= 35);
    let failed: Vec<String> = checks
        .iter()
        .filter(|(_, r)| !r.passed())
        .map(|(n, r)| format!("{n}: {:.3e}\n{r}", r.worst()))
        .collect();
    assert!(failed.is_empty(), "{}", failed.join("\n"));
}

#[test]
fn composite_blocks_match_central_differences() {
    for (name, rep) in common::block_checks() {
        assert!(rep.passed(), "{name}\n{rep}");
    }
}

#[test]
fn forward_pass_is_bitwise_deterministic() {
    let run = || {
        let mut s = ParamStore::<f64>::new();
        let m = CardioMM::build(common::micro_config(false), &mut s).unwrap();
        let x = Tensor::new((0..2 * 64).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect(), &[1, 2, 8, 8]).unwrap();
        m.phases[0].unet.forward(&s, &x, None).unwrap().to_vec()
    };
    let a = run();
    assert_eq!(a, run());
}

fn nested_loop_conv(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, wd] = xs;
    let [o, _, k, _] = ws;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w[((oi * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_nested_loops(
        n in 1usize..=2, c in 1usize..=4, o in 1usize..=4, h in 3usize..=9, w in 3usize..=9,
        k in 1usize..=3, stride in 1usize..=2, pad in 0usize..=1, seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let xd: Vec<f64> = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wd: Vec<f64> = (0..o * c * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bd: Vec<f64> = (0..o).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(xd.clone(), &[n, c, h, w]).unwrap();
        let wt = Tensor::new(wd.clone(), &[o, c, k, k]).unwrap();
        let bt = Tensor::new(bd.clone(), &[o]).unwrap();
        let got = x.conv2d(&wt, Some(&bt), ConvSpec { stride, pad }).unwrap();
        let want = nested_loop_conv(&xd, [n, c, h, w], &wd, [o, c, k, k], &bd, stride, pad);
        prop_assert_eq!(got.numel(), want.len());
        for (a, b) in got.data().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, q in 1usize..9, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d: Vec<f64> = (0..rows * q).map(|_| rng.random_range(-30.0..30.0)).collect();
        let s = Tensor::new(d, &[rows, q]).unwrap().softmax_lastdim().unwrap();
        for r in s.data().chunks(q) {
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradient_shapes_match_data(h in 2usize..6, w in 2usize..6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::var((0..2 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(), &[1, 2, h, w]).unwrap();
        let loss = x.resample_bilinear(h + 1, w + 2).unwrap().sigmoid().sum();
        let g = loss.backward().unwrap();
        prop_assert_eq!(g.wrt(&x).unwrap().len(), x.numel());
    }
}
