//! Zero filling against CG-SENSE with autocalibrated sensitivities on a
//! noiseless phantom, over a range of accelerations.

use cardiomm::classic::{estimate_sens_acs, sense_cg, zero_filled, CgConfig};
use cardiomm::eval::image_metrics;
use cardiomm::phantom::{generate_dataset, SynthConfig};
use cardiomm::physics;
use cardiomm::sampling::gen_uniform;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig { subjects: 1, frames_per_subject: 1, ny: 96, nx: 96, coils: 8, snr: f64::INFINITY, seed: 2, ..Default::default() };
    let rec = &generate_dataset(&cfg, 1)?[0];
    println!("record {} ({})", rec.id, rec.metadata_text());
    for af in [2.0, 4.0, 6.0, 8.0] {
        let mask = gen_uniform(96, 96, af, 12, 0)?;
        let zf = physics::sos(&zero_filled(&rec.kspace, &mask.grid)?);
        let sens = estimate_sens_acs(&rec.kspace, mask.acs)?;
        let r = sense_cg(&rec.kspace, &mask.grid, &sens, &CgConfig::default())?;
        let (zp, zs) = image_metrics(&rec.reference, &zf)?;
        let (sp, ss) = image_metrics(&rec.reference, &r.image.mapv(|c| c.norm()))?;
        println!(
            "AF {af}: zero-filled {zp:5.2} dB / SSIM {zs:.4}   SENSE {sp:5.2} dB / SSIM {ss:.4}  ({} CG iterations)",
            r.iterations
        );
    }
    Ok(())
}
