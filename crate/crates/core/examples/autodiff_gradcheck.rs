//! Reverse-mode gradients of a small conv → PReLU → pool graph, checked
//! against central finite differences.

use cardiomm::autodiff::{grad_check, ConvSpec, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let mut init = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let x = store.register("x", &[1, 2, 8, 8], init(128))?;
    let w = store.register("w", &[3, 2, 3, 3], init(54))?;
    let a = store.register("alpha", &[1], vec![0.25])?;

    let loss = |s: &ParamStore<f64>| {
        let h = s.leaf(x).conv2d(&s.leaf(w), None, ConvSpec::SAME3)?.prelu(&s.leaf(a))?;
        Ok(h.global_avg_pool()?.square().sum())
    };
    let value = loss(&store)?;
    let grads = value.backward()?;
    println!("loss {:.6}", value.item());
    println!("d loss / d alpha = {:.6}", grads.param(a).expect("alpha is used")[0]);

    let report = grad_check(&mut store, &[x, w, a], 1e-5, 1e-4, loss)?;
    println!("{report}");
    println!("finite-difference check {}", if report.passed() { "passed" } else { "FAILED" });
    Ok(())
}
