use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Scalar;

/// Smallest integer >= `min` whose prime factors are all in {2, 3, 5}, so the
/// mixed-radix FFT stays fast for the dealiasing grid sizes.
pub fn fast_size(min: usize) -> usize {
    let mut m = min.max(1);
    loop {
        let mut v = m;
        for p in [2, 3, 5] {
            while v % p == 0 {
                v /= p;
            }
        }
        if v == 1 {
            return m;
        }
        m += 1;
    }
}

/// Planned in-place 2D complex FFT on a fixed square size.
///
/// Rows are transformed in one batched pass, then columns via a transpose.
/// Transforms are unnormalized: `inverse(forward(x)) == m²·x`.
pub struct Fft2<T: Scalar> {
    m: usize,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
    scratch: Vec<Complex<T>>,
    tmp: Vec<Complex<T>>,
}

impl<T: Scalar> Fft2<T> {
    pub fn new(m: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(m);
        let inv = planner.plan_fft_inverse(m);
        let scratch_len = fwd
            .get_inplace_scratch_len()
            .max(inv.get_inplace_scratch_len());
        Fft2 {
            m,
            fwd,
            inv,
            scratch: vec![Complex::default(); scratch_len],
            tmp: vec![Complex::default(); m * m],
        }
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn forward(&mut self, data: &mut [Complex<T>]) {
        self.pass(data, true);
    }

    pub fn inverse(&mut self, data: &mut [Complex<T>]) {
        self.pass(data, false);
    }

    fn pass(&mut self, data: &mut [Complex<T>], forward: bool) {
        let m = self.m;
        assert_eq!(data.len(), m * m, "buffer must be m×m");
        let plan = if forward { &self.fwd } else { &self.inv };
        // Row pass: rustfft processes len/m contiguous transforms per call.
        plan.process_with_scratch(data, &mut self.scratch);
        transpose(m, data, &mut self.tmp);
        plan.process_with_scratch(&mut self.tmp, &mut self.scratch);
        transpose(m, &self.tmp, data);
    }
}

fn transpose<T: Copy>(m: usize, src: &[T], dst: &mut [T]) {
    for i in 0..m {
        for j in 0..m {
            dst[j * m + i] = src[i * m + j];
        }
    }
}
