//! Iterative radix-2 decimation-in-time FFT.
//!
//! Twiddles are evaluated directly from the angle for every index rather
//! than by repeated multiplication, so the round-off does not grow with the
//! transform length.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Radix2Fft {
    len: usize,
    twiddles: Vec<Complex64>,
    bit_rev: Vec<usize>,
}

impl Radix2Fft {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 || !len.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(len));
        }
        let twiddles = (0..len / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / len as f64))
            .collect();
        let bits = len.trailing_zeros();
        let bit_rev = (0..len)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        Ok(Self {
            len,
            twiddles,
            bit_rev,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Unnormalized forward transform, `X[k] = sum x[n] e^{-2 pi i k n / N}`.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.transform(buf, false);
    }

    /// Inverse transform including the `1/N` factor.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.transform(buf, true);
        let scale = 1.0 / self.len as f64;
        for x in buf.iter_mut() {
            *x *= scale;
        }
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        assert_eq!(buf.len(), self.len, "buffer length must match the plan");
        for i in 0..self.len {
            let j = self.bit_rev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut half = 1;
        while half < self.len {
            let step = self.len / (2 * half);
            for start in (0..self.len).step_by(2 * half) {
                for k in 0..half {
                    let mut w = self.twiddles[k * step];
                    if inverse {
                        w = w.conj();
                    }
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            half *= 2;
        }
    }

    /// Forward transform of a real signal, zero-padded or truncated to the plan length.
    pub fn forward_real(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x
            .iter()
            .take(self.len)
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        buf.resize(self.len, Complex64::new(0.0, 0.0));
        self.forward(&mut buf);
        buf
    }
}
