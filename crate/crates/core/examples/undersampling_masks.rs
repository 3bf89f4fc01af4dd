//! The three undersampling patterns, their effective acceleration and the
//! text each one contributes to the model.

use cardiomm::sampling::{MaskSpec, Pattern};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (ny, nx) = (256, 246);
    for pattern in Pattern::ALL {
        for af in [4.0, 8.0, 16.0, 24.0] {
            let spec = MaskSpec { pattern, af, acs: 20, seed: 7 };
            let m = spec.generate(ny, nx)?;
            println!(
                "{:<8} nominal {af:>4}  effective {:>6.2}  acquired {:>5.1}%  text \"{}\"",
                pattern.name(),
                m.effective_af()?,
                100.0 * m.acquired() as f64 / (ny * nx) as f64,
                m.text().as_str()
            );
        }
    }
    // A coarse picture of a small radial mask.
    let m = MaskSpec { pattern: Pattern::Radial, af: 6.0, acs: 6, seed: 0 }.generate(24, 48)?;
    for row in m.grid.rows() {
        println!("{}", row.iter().map(|&v| if v { '#' } else { '.' }).collect::<String>());
    }
    Ok(())
}
