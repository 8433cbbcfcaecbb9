//! Multi-dimensional FFT over row-major arrays (thin wrapper on rustfft).

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

/// In-place unnormalised DFT along every axis of a row-major array.
pub(crate) fn fft_nd(data: &mut [Complex64], shape: &[usize], direction: FftDirection) {
    debug_assert_eq!(data.len(), shape.iter().product::<usize>());
    let mut planner = FftPlanner::new();
    let mut line = Vec::new();
    for axis in 0..shape.len() {
        let len = shape[axis];
        if len <= 1 {
            continue;
        }
        let fft = planner.plan_fft(len, direction);
        let stride: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        line.resize(len, Complex64::new(0.0, 0.0));
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        for o in 0..outer {
            let base = o * len * stride;
            for s in 0..stride {
                for (j, slot) in line.iter_mut().enumerate() {
                    *slot = data[base + j * stride + s];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for (j, value) in line.iter().enumerate() {
                    data[base + j * stride + s] = *value;
                }
            }
        }
    }
}

/// Signed frequency index of DFT bin `k` on `len` points.
#[inline]
pub(crate) fn signed_bin(k: usize, len: usize) -> i64 {
    if k <= len / 2 {
        k as i64
    } else {
        k as i64 - len as i64
    }
}
