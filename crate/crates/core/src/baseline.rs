//! GCC-PHAT time-delay estimation, used to cross-check the encoder.

use num_complex::Complex64;

use crate::error::{invalid, Error, Result};
use crate::fft::Radix2Fft;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdoaEstimate {
    /// Seconds by which `x2` lags `x1`.
    pub delay: f64,
    /// Correlation peak over the mean absolute correlation in the search range.
    pub confidence: f64,
}

/// Relative magnitude below which a cross-spectrum bin counts as empty.
const EMPTY_BIN: f64 = 1e-12;

/// Phase-transform weighted cross-correlation. A positive delay means `x2`
/// is a delayed copy of `x1`.
pub fn gcc_phat(x1: &[f64], x2: &[f64], fs: f64, max_lag: f64) -> Result<TdoaEstimate> {
    if x1.len() != x2.len() {
        return Err(Error::Dimension(format!("inputs of {} and {} samples", x1.len(), x2.len())));
    }
    if !(fs > 0.0) || !(max_lag >= 0.0) {
        return Err(invalid("sample rate must be positive and max lag non-negative"));
    }
    let lag = (max_lag * fs).floor() as usize;
    let n = x1.len();
    if n < (2 * lag).max(2) {
        return Err(invalid(format!("{n} samples cannot cover a lag of ±{lag}")));
    }
    if x1.iter().chain(x2).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gcc_phat input".into()));
    }
    let size = (n + lag).next_power_of_two();
    let plan = Radix2Fft::new(size)?;
    let a = plan.forward_real(x1);
    let b = plan.forward_real(x2);
    let mut cross: Vec<Complex64> = a.iter().zip(&b).map(|(p, q)| q * p.conj()).collect();
    let peak_mag = cross.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if !(peak_mag > 0.0) {
        return Err(Error::UndefinedCorrelation);
    }
    for c in cross.iter_mut() {
        let m = c.norm();
        *c = if m > EMPTY_BIN * peak_mag { *c / m } else { Complex64::new(0.0, 0.0) };
    }
    plan.inverse(&mut cross);
    let lags: Vec<f64> = (0..=2 * lag)
        .map(|k| cross[(k + size - lag) % size].re)
        .collect();
    let mut best = 0;
    for (k, &v) in lags.iter().enumerate() {
        if v > lags[best] {
            best = k;
        }
    }
    let mut offset = 0.0;
    if best > 0 && best < 2 * lag {
        let (l, c, r) = (lags[best - 1], lags[best], lags[best + 1]);
        let denom = l - 2.0 * c + r;
        if denom < 0.0 {
            offset = (0.5 * (l - r) / denom).clamp(-0.5, 0.5);
        }
    }
    let mean = lags.iter().map(|v| v.abs()).sum::<f64>() / lags.len() as f64;
    let confidence = if mean > 0.0 { (lags[best] / mean).max(1.0) } else { 1.0 };
    let delay = ((best as f64 - lag as f64 + offset) / fs).clamp(-max_lag, max_lag);
    Ok(TdoaEstimate { delay, confidence })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{add_noise, analytic_tdoa, synthesize_clip, MicArrayGeometry, NoiseKind, SourceSignal, SourceSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FS: f64 = 16_000.0;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identical_inputs() {
        let x = noise(1024, 1);
        let e = gcc_phat(&x, &x, FS, 0.001).unwrap();
        assert_eq!(e.delay, 0.0);
        assert!(e.confidence >= 1.0);
    }

    #[test]
    fn integer_shift() {
        // A burst with silent margins, so the shift loses no content.
        let mut x1 = vec![0.0; 1024];
        x1[50..950].copy_from_slice(&noise(900, 2));
        let mut x2 = vec![0.0; 1024];
        x2[5..].copy_from_slice(&x1[..1019]);
        let e = gcc_phat(&x1, &x2, FS, 0.001).unwrap();
        assert!((e.delay - 5.0 / FS).abs() < 1e-9, "{}", e.delay * FS);
        let e = gcc_phat(&x2, &x1, FS, 0.001).unwrap();
        assert!((e.delay + 5.0 / FS).abs() < 1e-9, "{}", e.delay * FS);
    }

    #[test]
    fn integer_shift_of_truncated_windows() {
        let x = noise(1029, 2);
        let e = gcc_phat(&x[5..], &x[..1024], FS, 0.001).unwrap();
        assert!((e.delay * FS - 5.0).abs() < 0.01);
    }

    #[test]
    fn antisymmetric_and_scale_invariant() {
        let geometry = MicArrayGeometry::square(0.24).unwrap();
        for seed in 0..10 {
            let src = SourceSpec::new(seed as f64 * 33.0, 1.2, SourceSignal::WhiteNoiseBurst, seed);
            let clip = synthesize_clip(&geometry, &src, 0.064, FS).unwrap();
            let clip = add_noise(&clip, 10.0, NoiseKind::White, seed).unwrap();
            let (a, b) = (&clip.samples[0], &clip.samples[2]);
            let fwd = gcc_phat(a, b, FS, 0.001).unwrap();
            let rev = gcc_phat(b, a, FS, 0.001).unwrap();
            assert!((fwd.delay + rev.delay).abs() < 1e-7);
            let scaled: Vec<f64> = b.iter().map(|v| v * 37.5).collect();
            let s = gcc_phat(a, &scaled, FS, 0.001).unwrap();
            assert!((s.delay - fwd.delay).abs() * FS < 1e-6);
        }
    }

    #[test]
    fn silent_input() {
        let z = vec![0.0; 256];
        assert!(matches!(gcc_phat(&z, &z, FS, 0.001), Err(Error::UndefinedCorrelation)));
        assert!(gcc_phat(&z, &z[..100], FS, 0.001).is_err());
        assert!(gcc_phat(&z[..20], &z[..20], FS, 0.001).is_err());
    }

    #[test]
    fn delay_stays_within_search_range() {
        let x = noise(2000, 3);
        let e = gcc_phat(&x[40..1040], &x[..1000], FS, 0.001).unwrap();
        assert!(e.delay.abs() <= 0.001);
    }

    #[test]
    fn simulated_pairs_match_geometry() {
        let geometry = MicArrayGeometry::square(0.064).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut hits = 0;
        for trial in 0..100 {
            let src = SourceSpec::new(rng.gen_range(0.0..360.0), 1.5, SourceSignal::WhiteNoiseBurst, trial);
            let clip = synthesize_clip(&geometry, &src, 0.170, FS).unwrap();
            let clip = add_noise(&clip, 20.0, NoiseKind::White, 1000 + trial).unwrap();
            let (i, j) = geometry.pairs()[trial as usize % 6];
            let truth = analytic_tdoa(&geometry, &src, (i, j)).unwrap();
            // x_j lags x_i by T_j - T_i = -truth.
            let e = gcc_phat(&clip.samples[i], &clip.samples[j], FS, 0.001).unwrap();
            hits += (((e.delay + truth) * FS).abs() <= 1.0) as usize;
        }
        assert!(hits >= 99, "{hits}/100");
    }
}
