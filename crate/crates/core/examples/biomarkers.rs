//! Downstream analyses on phantom ground truth: T1 and T2 fitting, cardiac
//! function, wall thickness and agreement statistics.

use cardiomm::eval::{agreement_stats, fit_t1, fit_t2, lvmwt_aha, phenotypes, FitConfig, SliceLevel, SliceMasks};
use cardiomm::phantom::{phantom_frame, simulate_weighted_series, PhantomSpec, SeriesKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // 2.25 mm pixels put several samples across the myocardial wall.
    let spec = PhantomSpec::for_grid(160, 160);
    let f = phantom_frame(&spec, 0);
    let tis = [100.0, 180.0, 260.0, 1000.0, 1100.0, 1200.0, 2000.0, 3000.0];
    let series = simulate_weighted_series(&f, SeriesKind::T1, &tis)?;
    let t1 = fit_t1(&series, &tis, Some(&f.myo), &FitConfig::default(), 1)?;
    let tes = [0.0, 25.0, 35.0, 45.0, 55.0];
    let t2 = fit_t2(&simulate_weighted_series(&f, SeriesKind::T2, &tes)?, &tes, Some(&f.myo), 1)?;
    for (name, fit, truth) in [("T1", &t1, &f.t1), ("T2", &t2, &f.t2)] {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (p, &m) in f.myo.indexed_iter() {
            if m && fit.valid[p] {
                a.push(truth[p]);
                b.push(fit.values[p]);
            }
        }
        let s = agreement_stats(&a, &b)?;
        println!("myocardial {name} over {} pixels: bias {:.3} ms, MAE {:.3} ms, PCC {:.4}", s.n, s.md, s.mae, s.pcc);
    }

    let frames: Vec<Vec<SliceMasks>> = (0..spec.motion.frames)
        .step_by(5)
        .map(|t| {
            let f = phantom_frame(&spec, t);
            vec![SliceMasks { lv: f.lv, rv: f.rv, myo: f.myo }]
        })
        .collect();
    let p = phenotypes(&frames, [spec.pixel_mm, spec.pixel_mm], 8.0, 65.0)?;
    println!("single-slice LVEDV {:.2} mL, LVESV {:.2} mL, LVEF {:.1}%, LVCO {:.2} L/min", p.lvedv, p.lvesv, p.lvef, p.lvco);

    let wt = lvmwt_aha(&[(SliceLevel::Mid, &f.myo, &f.lv)], spec.pixel_mm, 0.0)?;
    let mid: Vec<String> = wt.segments[6..12].iter().map(|v| format!("{v:.2}")).collect();
    println!("mid-ventricular segment maxima of wall thickness (mm): {}", mid.join(" "));
    println!("analytic wall: {:.2} mm", f.epi_radius_mm - f.cavity_radius_mm);
    Ok(())
}
