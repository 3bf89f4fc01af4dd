//! A few epochs of mixed-undersampling training on a tiny network, then
//! evaluation on held-out phantoms.

use cardiomm::autodiff::ParamStore;
use cardiomm::model::{CardioMM, ModelConfig};
use cardiomm::phantom::{generate_dataset, SynthConfig};
use cardiomm::sampling::Pattern;
use cardiomm::text::HashingEncoder;
use cardiomm::train::{evaluate, train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let synth = |subjects, seed| SynthConfig { subjects, frames_per_subject: 2, ny: 32, nx: 32, coils: 3, seed, ..Default::default() };
    let train_set = generate_dataset(&synth(8, 1), 1)?;
    let held = generate_dataset(&synth(2, 99), 1)?;

    let mut store = ParamStore::<f32>::new();
    let mc = ModelConfig { phases: 3, levels: 2, base_channels: 8, embed_dim: 16, sens_channels: 4, prompt_size: 4, ..Default::default() };
    let model = CardioMM::build(mc, &mut store)?;

    let mut cfg = TrainConfig::default();
    cfg.schedule.epochs = 3;
    cfg.schedule.decay_every = 2;
    cfg.undersampling.acs_lines = 6;
    cfg.undersampling.acs_block = 6;
    cfg.validation.cells = vec![(Pattern::Uniform, 4.0), (Pattern::Radial, 8.0)];
    let out = tempfile::tempdir()?;
    let summary = train(&model, &mut store, &HashingEncoder, &train_set, &held, &cfg, out.path(), false)?;
    for e in &summary.epochs {
        println!("epoch {}: train loss {:.4}, validation SSIM {:.4}", e.epoch, e.mean_loss, e.val_ssim);
    }
    for cell in [(Pattern::Uniform, 8.0), (Pattern::Random, 16.0)] {
        for m in evaluate(&model, &store, &HashingEncoder, &held, &cfg.undersampling, &[cell], 3)? {
            println!("{} {} x{}: PSNR {:.2} dB, SSIM {:.4}", m.record, m.pattern.name(), m.af, m.psnr, m.ssim);
        }
    }
    Ok(())
}
