//! Multi-coil forward model, its adjoint, coil combination and coil
//! compression on a simulated cardiac slice.

use cardiomm::phantom::{phantom_frame, simulate_coils, PhantomSpec};
use cardiomm::physics::{self, Calibration};
use cardiomm::sampling::gen_uniform;
use ndarray::Array2;
use num_complex::Complex64;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (ny, nx, coils) = (96, 96, 12);
    let frame = phantom_frame(&PhantomSpec::for_grid(ny, nx), 0);
    let x: Array2<Complex64> = frame.pd.mapv(|v| Complex64::new(v, 0.0));
    let sens = simulate_coils(coils, (ny, nx), 3)?;
    let mask = gen_uniform(ny, nx, 4.0, 16, 0)?;

    let y = physics::forward_model(&x, &sens, &mask.grid)?;
    let back = physics::adjoint_model(&y, &sens, &mask.grid)?;
    // <A x, y> = <x, A^H y> for any pair.
    let lhs = physics::inner(&y, &y);
    let rhs = physics::inner(&x, &back);
    println!("adjoint identity: <Ax,Ax> = {:.6}, <x,A^H A x> = {:.6}", lhs.re, rhs.re);

    let full = Array2::from_elem((ny, nx), true);
    let k = physics::forward_model(&x, &sens, &full)?;
    let combined = physics::coil_combine(&physics::ifft2c(&k), &sens)?;
    println!("coil combine of full data, rel err {:.2e}", physics::norm(&(&combined - &x)) / physics::norm(&x));

    for keep in [2, 4, 8, coils] {
        let c = physics::coil_compress(&k, keep, Calibration::Center { h: 24, w: 24 })?;
        println!("compress {coils} -> {keep:>2} virtual coils: {:.4} of the energy retained", c.energy_retained);
    }
    Ok(())
}
