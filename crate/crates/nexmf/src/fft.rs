//! FFT plumbing shared by the spectral code paths (Sobolev norms, grid
//! inner products, periodic convolutions).

use num_complex::Complex64;
use rustfft::FftPlanner;

/// Unnormalized forward DFT of a real vector:
/// `F[m] = Σ_j v[j] · exp(-2πi m j / n)`.
pub(crate) fn dft_1d(values: &[f64]) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    if data.len() > 1 {
        FftPlanner::new().plan_fft_forward(data.len()).process(&mut data);
    }
    data
}

/// Unnormalized forward DFT of a real row-major array of the given shape,
/// applied along every axis.
pub(crate) fn dft_nd(values: &[f64], shape: &[usize]) -> Vec<Complex64> {
    let total: usize = shape.iter().product();
    assert_eq!(values.len(), total, "shape does not match data length");
    let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    for axis in 0..shape.len() {
        let n = shape[axis];
        if n <= 1 {
            continue;
        }
        let fft = planner.plan_fft_forward(n);
        let stride: usize = shape[axis + 1..].iter().product();
        let block = stride * n;
        let mut lane = vec![Complex64::new(0.0, 0.0); n];
        for outer in (0..total).step_by(block.max(1)) {
            for inner in 0..stride {
                let base = outer + inner;
                for (t, slot) in lane.iter_mut().enumerate() {
                    *slot = data[base + t * stride];
                }
                fft.process(&mut lane);
                for (t, slot) in lane.iter().enumerate() {
                    data[base + t * stride] = *slot;
                }
            }
        }
    }
    data
}

/// Signed frequency for DFT bin `j` of an `n`-point transform, in the
/// conventional order `0, 1, …, ⌈n/2⌉-1, -⌊n/2⌋, …, -1`.
pub(crate) fn signed_mode(j: usize, n: usize) -> i64 {
    if j < n.div_ceil(2) {
        j as i64
    } else {
        j as i64 - n as i64
    }
}
