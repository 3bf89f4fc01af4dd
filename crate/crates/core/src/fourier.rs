//! Centered, orthonormal 2-D discrete Fourier transforms on row-major
//! complex planes.
//!
//! `fft2c = fftshift ∘ FFT ∘ ifftshift / sqrt(H·W)` and `ifft2c` likewise
//! with the inverse FFT, so the pair is unitary and mutually inverse for
//! any (including odd) plane sizes.

use num_complex::Complex;

use crate::autodiff::Real;

/// `out[(i + s) % n] = in[i]` along both axes of one plane.
fn roll_plane<T: Real>(src: &[Complex<T>], dst: &mut [Complex<T>], h: usize, w: usize, sy: usize, sx: usize) {
    for y in 0..h {
        let ty = (y + sy) % h;
        let srow = &src[y * w..(y + 1) * w];
        let drow = &mut dst[ty * w..(ty + 1) * w];
        // Row rotation by sx: the tail of the source lands at the front.
        let split = w - sx % w;
        drow[sx % w..].copy_from_slice(&srow[..split]);
        drow[..sx % w].copy_from_slice(&srow[split..]);
    }
}

/// Transforms every `h×w` plane of `buf` in place.
pub fn fft2c_inplace<T: Real>(buf: &mut [Complex<T>], h: usize, w: usize, inverse: bool) {
    let plane = h * w;
    if plane == 0 {
        return;
    }
    assert_eq!(buf.len() % plane, 0, "buffer is not a whole number of {h}x{w} planes");
    let fw = T::fft_plan(w, inverse);
    let fh = T::fft_plan(h, inverse);
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); plane];
    let mut fft_scratch =
        vec![Complex::new(T::zero(), T::zero()); fw.get_inplace_scratch_len().max(fh.get_inplace_scratch_len())];
    let norm = T::of(1.0 / (plane as f64).sqrt());
    for p in buf.chunks_mut(plane) {
        // ifftshift: roll by ceil(n/2).
        roll_plane(p, &mut scratch, h, w, h - h / 2, w - w / 2);
        fw.process_with_scratch(&mut scratch, &mut fft_scratch[..fw.get_inplace_scratch_len()]);
        transpose(&scratch, p, h, w);
        fh.process_with_scratch(p, &mut fft_scratch[..fh.get_inplace_scratch_len()]);
        transpose(p, &mut scratch, w, h);
        // fftshift: roll by floor(n/2).
        roll_plane(&scratch, p, h, w, h / 2, w / 2);
        for v in p.iter_mut() {
            *v = *v * norm;
        }
    }
}

fn transpose<T: Copy>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

pub fn fft2c_planes<T: Real>(buf: &mut [Complex<T>], h: usize, w: usize) {
    fft2c_inplace(buf, h, w, false);
}

pub fn ifft2c_planes<T: Real>(buf: &mut [Complex<T>], h: usize, w: usize) {
    fft2c_inplace(buf, h, w, true);
}
