//! One reconstruction with a freshly initialized network, tracing the
//! image after each unrolled phase.

use cardiomm::autodiff::ParamStore;
use cardiomm::eval::image_metrics;
use cardiomm::model::{reconstruct, CardioMM, ModelConfig};
use cardiomm::phantom::{generate_dataset, SynthConfig};
use cardiomm::sampling::{MaskSpec, Pattern};
use cardiomm::text::HashingEncoder;
use cardiomm::train::bundle_for;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rec = &generate_dataset(&SynthConfig { subjects: 1, frames_per_subject: 1, seed: 4, ..Default::default() }, 1)?[0];
    let (_, ny, nx) = rec.dims();
    let mask = MaskSpec { pattern: Pattern::Random, af: 8.0, acs: 8, seed: 1 }.generate(ny, nx)?;

    let mut store = ParamStore::<f32>::new();
    let cfg = ModelConfig { phases: 4, base_channels: 8, ..Default::default() };
    let model = CardioMM::build(cfg, &mut store)?;
    println!("{} parameters", store.num_scalars());

    let texts = bundle_for(rec, &mask)?;
    println!("metadata: \"{}\"  undersampling: \"{}\"", texts.metadata, texts.undersampling);
    let out = reconstruct(&model, &store, &HashingEncoder, &rec.kspace, &mask.grid, mask.acs, &texts, true)?;
    for (k, img) in out.trace.iter().enumerate() {
        let (p, s) = image_metrics(&rec.reference, img)?;
        println!("after phase {k}: PSNR {p:.2} dB, SSIM {s:.4}, lambda {:.3}", out.lambdas[k]);
    }
    println!("untrained network; see the train_micro example for learning");
    Ok(())
}
