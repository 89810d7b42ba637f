//! Real-to-complex 3-D FFT built from 1-D `realfft` (x) and `rustfft` (y, z)
//! passes.

use std::sync::Arc;

use num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};
use xfft_core::greenop::Fft3;

type C64 = Complex<f64>;

pub struct RealFft3 {
    n: [usize; 3],
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    fwd: [Arc<dyn Fft<f64>>; 2],
    inv: [Arc<dyn Fft<f64>>; 2],
    line_re: Vec<f64>,
    line_c: Vec<C64>,
    scratch: Vec<C64>,
}

impl RealFft3 {
    pub fn new(n: [usize; 3]) -> Self {
        let mut rp = RealFftPlanner::<f64>::new();
        let mut cp = FftPlanner::<f64>::new();
        let r2c = rp.plan_fft_forward(n[0]);
        let c2r = rp.plan_fft_inverse(n[0]);
        let fwd = [cp.plan_fft_forward(n[1]), cp.plan_fft_forward(n[2])];
        let inv = [cp.plan_fft_inverse(n[1]), cp.plan_fft_inverse(n[2])];
        let scratch_len = [
            r2c.get_scratch_len(),
            c2r.get_scratch_len(),
            fwd[0].get_inplace_scratch_len(),
            fwd[1].get_inplace_scratch_len(),
            inv[0].get_inplace_scratch_len(),
            inv[1].get_inplace_scratch_len(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0);
        RealFft3 {
            n,
            r2c,
            c2r,
            fwd,
            inv,
            line_re: vec![0.0; n[0]],
            line_c: vec![C64::new(0.0, 0.0); n[0].max(n[1]).max(n[2])],
            scratch: vec![C64::new(0.0, 0.0); scratch_len],
        }
    }

    /// Complex transform along y (`axis = 0`) or z (`axis = 1`) of the
    /// half-spectrum array.
    fn strided(&mut self, data: &mut [C64], axis: usize, forward: bool) {
        let nh = self.n[0] / 2 + 1;
        let (m, stride, outer) = if axis == 0 {
            (self.n[1], nh, self.n[2])
        } else {
            (self.n[2], nh * self.n[1], 1)
        };
        let plan = if forward { &self.fwd[axis] } else { &self.inv[axis] };
        let line = &mut self.line_c[..m];
        let inner_count = if axis == 0 { nh } else { nh * self.n[1] };
        for o in 0..outer {
            let base = if axis == 0 { o * nh * self.n[1] } else { 0 };
            for s in 0..inner_count {
                let start = base + s;
                for (j, v) in line.iter_mut().enumerate() {
                    *v = data[start + j * stride];
                }
                plan.process_with_scratch(line, &mut self.scratch);
                for (j, v) in line.iter().enumerate() {
                    data[start + j * stride] = *v;
                }
            }
        }
    }
}

impl Fft3 for RealFft3 {
    fn shape(&self) -> [usize; 3] {
        self.n
    }

    fn forward(&mut self, input: &[f64], output: &mut [C64]) {
        let [n0, n1, n2] = self.n;
        let nh = n0 / 2 + 1;
        for line in 0..n1 * n2 {
            self.line_re.copy_from_slice(&input[line * n0..(line + 1) * n0]);
            self.r2c
                .process_with_scratch(&mut self.line_re, &mut output[line * nh..(line + 1) * nh], &mut self.scratch)
                .expect("r2c buffer sizes");
        }
        self.strided(output, 0, true);
        self.strided(output, 1, true);
    }

    fn inverse(&mut self, input: &mut [C64], output: &mut [f64]) {
        let [n0, n1, n2] = self.n;
        let nh = n0 / 2 + 1;
        self.strided(input, 1, false);
        self.strided(input, 0, false);
        let scale = 1.0 / (n0 * n1 * n2) as f64;
        for line in 0..n1 * n2 {
            let spec = &mut input[line * nh..(line + 1) * nh];
            // Rounding leaves tiny imaginary parts on the self-conjugate bins.
            spec[0].im = 0.0;
            if n0 % 2 == 0 {
                spec[nh - 1].im = 0.0;
            }
            let out = &mut output[line * n0..(line + 1) * n0];
            self.c2r
                .process_with_scratch(spec, out, &mut self.scratch)
                .expect("c2r buffer sizes");
            out.iter_mut().for_each(|v| *v *= scale);
        }
    }
}
