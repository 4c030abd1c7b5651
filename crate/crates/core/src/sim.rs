//! Free-field microphone-array simulator.
//!
//! Sources are points in the array plane. Each microphone receives the
//! source signal delayed by its exact propagation time and scaled by the
//! inverse of its distance to the source. Tonal sources are evaluated in
//! closed form; sampled sources are delayed with a frequency-domain phase
//! ramp.
//!
//! Azimuth 0 points at the midpoint of microphones 3 and 4 and increases
//! counterclockwise.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::fft::Radix2Fft;

pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;
pub const DEFAULT_ARRAY_SIDE_M: f64 = 0.064;
pub const DEFAULT_SAMPLE_RATE: f64 = 16_000.0;

/// Standard deviation of the unit white-noise burst before distance attenuation.
const NOISE_BURST_STD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct MicArrayGeometry {
    mic_positions: Vec<[f64; 2]>,
    speed_of_sound: f64,
}

impl MicArrayGeometry {
    pub fn new(mic_positions: Vec<[f64; 2]>, speed_of_sound: f64) -> Result<Self> {
        if mic_positions.len() < 2 {
            return Err(invalid("geometry needs at least two microphones"));
        }
        if !(speed_of_sound > 0.0 && speed_of_sound.is_finite()) {
            return Err(invalid("speed of sound must be positive"));
        }
        for (i, a) in mic_positions.iter().enumerate() {
            if !a[0].is_finite() || !a[1].is_finite() {
                return Err(invalid(format!("microphone {} has a non-finite position", i + 1)));
            }
            for b in &mic_positions[i + 1..] {
                if a == b {
                    return Err(invalid("microphone positions must be pairwise distinct"));
                }
            }
        }
        Ok(Self {
            mic_positions,
            speed_of_sound,
        })
    }

    /// Four microphones on a square of the given side, centered at the origin.
    ///
    /// Mic 1 sits at 135°, mic 2 at 225°, mic 3 at 315° and mic 4 at 45°, so
    /// the midpoint of mics 3 and 4 lies on the 0° axis.
    pub fn square(side_m: f64) -> Result<Self> {
        if !(side_m > 0.0) {
            return Err(invalid("array side must be positive"));
        }
        let h = side_m / 2.0;
        Self::new(
            vec![[-h, h], [-h, -h], [h, -h], [h, h]],
            DEFAULT_SPEED_OF_SOUND,
        )
    }

    pub fn with_speed_of_sound(mut self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(invalid("speed of sound must be positive"));
        }
        self.speed_of_sound = c;
        Ok(self)
    }

    pub fn mic_positions(&self) -> &[[f64; 2]] {
        &self.mic_positions
    }

    pub fn n_mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn speed_of_sound(&self) -> f64 {
        self.speed_of_sound
    }

    /// Largest inter-microphone distance.
    pub fn aperture(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.mic_positions.iter().enumerate() {
            for b in &self.mic_positions[i + 1..] {
                best = best.max(dist(*a, *b));
            }
        }
        best
    }

    /// The same array rotated counterclockwise about the origin.
    pub fn rotated(&self, degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        Self {
            mic_positions: self
                .mic_positions
                .iter()
                .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
                .collect(),
            speed_of_sound: self.speed_of_sound,
        }
    }

    /// Unordered microphone pairs `(i, j)` with `i < j`, lexicographic.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        all_pairs(self.n_mics())
    }

    fn propagation_time(&self, mic: usize, pos: [f64; 2]) -> f64 {
        dist(self.mic_positions[mic], pos) / self.speed_of_sound
    }
}

impl Default for MicArrayGeometry {
    fn default() -> Self {
        Self::square(DEFAULT_ARRAY_SIDE_M).expect("default geometry is valid")
    }
}

pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push((i, j));
        }
    }
    out
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tone {
    pub freq_hz: f64,
    pub amplitude: f64,
    pub phase: f64,
}

impl Tone {
    pub fn new(freq_hz: f64, amplitude: f64, phase: f64) -> Self {
        Self {
            freq_hz,
            amplitude,
            phase,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceSignal {
    MultiTone(Vec<Tone>),
    /// Gaussian white noise drawn from the source seed.
    WhiteNoiseBurst,
    /// Samples at the synthesis rate; padded with zeros when shorter than the clip.
    External(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    pub azimuth_deg: f64,
    pub distance_m: f64,
    pub signal: SourceSignal,
    pub seed: u64,
}

impl SourceSpec {
    pub fn new(azimuth_deg: f64, distance_m: f64, signal: SourceSignal, seed: u64) -> Self {
        Self {
            azimuth_deg,
            distance_m,
            signal,
            seed,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        let (s, c) = self.azimuth_deg.to_radians().sin_cos();
        [self.distance_m * c, self.distance_m * s]
    }

    fn validate(&self) -> Result<()> {
        if !(self.distance_m > 0.0 && self.distance_m.is_finite()) {
            return Err(invalid("source distance must be positive"));
        }
        if !self.azimuth_deg.is_finite() {
            return Err(invalid("source azimuth must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelClip {
    pub sample_rate: f64,
    /// Channels × samples.
    pub samples: Vec<Vec<f64>>,
    pub label_azimuth: Option<f64>,
}

impl MultiChannelClip {
    pub fn new(sample_rate: f64, samples: Vec<Vec<f64>>, label_azimuth: Option<f64>) -> Result<Self> {
        if !(sample_rate > 0.0) {
            return Err(invalid("sample rate must be positive"));
        }
        if let Some(first) = samples.first() {
            if samples.iter().any(|c| c.len() != first.len()) {
                return Err(Error::Dimension("channels differ in length".into()));
            }
        }
        Ok(Self {
            sample_rate,
            samples,
            label_azimuth,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    pub fn peak(&self) -> f64 {
        self.samples
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    /// Scale every channel jointly so the peak magnitude does not exceed one.
    fn limit_peak(&mut self) {
        let peak = self.peak();
        if peak > 1.0 {
            let g = 1.0 / peak;
            for c in &mut self.samples {
                for x in c.iter_mut() {
                    *x *= g;
                }
            }
        }
    }
}

pub fn channel_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Propagation-time difference `T(first) - T(second)` for an exact spherical wavefront.
pub fn analytic_tdoa(
    geometry: &MicArrayGeometry,
    source: &SourceSpec,
    pair: (usize, usize),
) -> Result<f64> {
    let (a, b) = pair;
    let n = geometry.n_mics();
    if a >= n || b >= n {
        return Err(invalid(format!("mic index out of range for {n} microphones")));
    }
    if a == b {
        return Err(Error::DegeneratePair(a));
    }
    source.validate()?;
    let pos = source.position();
    Ok(geometry.propagation_time(a, pos) - geometry.propagation_time(b, pos))
}

pub fn synthesize_clip(
    geometry: &MicArrayGeometry,
    source: &SourceSpec,
    duration_s: f64,
    sample_rate: f64,
) -> Result<MultiChannelClip> {
    source.validate()?;
    if !(sample_rate > 0.0) {
        return Err(invalid("sample rate must be positive"));
    }
    let n = (duration_s * sample_rate).round();
    if !(n >= 1.0) {
        return Err(invalid("clip duration must cover at least one sample"));
    }
    let n = n as usize;
    let pos = source.position();
    let delays: Vec<f64> = (0..geometry.n_mics())
        .map(|m| geometry.propagation_time(m, pos))
        .collect();
    let gains: Vec<f64> = (0..geometry.n_mics())
        .map(|m| 1.0 / dist(geometry.mic_positions[m], pos))
        .collect();

    let samples = match &source.signal {
        SourceSignal::MultiTone(tones) => {
            let nyquist = sample_rate / 2.0;
            if tones.is_empty() {
                return Err(invalid("multi-tone source has no tones"));
            }
            for t in tones {
                if !(t.freq_hz > 0.0) {
                    return Err(invalid("tone frequencies must be positive"));
                }
                if t.freq_hz >= nyquist {
                    return Err(Error::AboveNyquist {
                        freq_hz: t.freq_hz,
                        nyquist_hz: nyquist,
                    });
                }
            }
            let lowest = tones.iter().map(|t| t.freq_hz).fold(f64::INFINITY, f64::min);
            if (n as f64) < sample_rate / lowest - 1e-9 {
                return Err(invalid(format!(
                    "duration {duration_s} s is shorter than one period of {lowest} Hz"
                )));
            }
            delays
                .iter()
                .zip(&gains)
                .map(|(&delay, &gain)| {
                    (0..n)
                        .map(|k| {
                            let t = k as f64 / sample_rate - delay;
                            gain * tones
                                .iter()
                                .map(|tone| {
                                    tone.amplitude * (2.0 * PI * tone.freq_hz * t + tone.phase).sin()
                                })
                                .sum::<f64>()
                        })
                        .collect()
                })
                .collect()
        }
        SourceSignal::WhiteNoiseBurst => {
            let mut rng = ChaCha8Rng::seed_from_u64(source.seed);
            let base: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    NOISE_BURST_STD * z
                })
                .collect();
            delay_sampled(&base, &delays, &gains, sample_rate)?
        }
        SourceSignal::External(x) => {
            let mut base = x.clone();
            base.resize(n, 0.0);
            delay_sampled(&base, &delays, &gains, sample_rate)?
        }
    };

    let mut clip = MultiChannelClip::new(sample_rate, samples, Some(source.azimuth_deg.rem_euclid(360.0)))?;
    clip.limit_peak();
    Ok(clip)
}

/// Band-limited fractional delay of a sampled signal, one output per delay.
///
/// The signal is zero-padded past the longest delay plus a guard band so the
/// circular shift of the transform behaves as a linear delay.
fn delay_sampled(base: &[f64], delays: &[f64], gains: &[f64], fs: f64) -> Result<Vec<Vec<f64>>> {
    let n = base.len();
    let max_delay = delays.iter().cloned().fold(0.0, f64::max);
    let len = (n + (max_delay * fs).ceil() as usize + 256).next_power_of_two();
    let plan = Radix2Fft::new(len)?;
    let spectrum = plan.forward_real(base);
    let half = len / 2;
    Ok(delays
        .iter()
        .zip(gains)
        .map(|(&delay, &gain)| {
            let mut buf: Vec<Complex64> = spectrum
                .iter()
                .enumerate()
                .map(|(k, &x)| {
                    if k == half {
                        // Keep the Nyquist bin real.
                        x * (PI * fs * delay).cos()
                    } else {
                        let signed = if k < half { k as f64 } else { k as f64 - len as f64 };
                        let f = signed * fs / len as f64;
                        x * Complex64::from_polar(1.0, -2.0 * PI * f * delay)
                    }
                })
                .collect();
            plan.inverse(&mut buf);
            buf[..n].iter().map(|c| gain * c.re).collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy)]
pub enum NoiseKind<'a> {
    /// Independent Gaussian noise on every channel, SNR set per channel.
    White,
    /// A second point source; SNR set on the power summed over channels.
    Directional {
        geometry: &'a MicArrayGeometry,
        source: &'a SourceSpec,
    },
}

/// Add noise at the requested SNR. `f64::INFINITY` returns the clip unchanged.
pub fn add_noise(
    clip: &MultiChannelClip,
    snr_db: f64,
    kind: NoiseKind<'_>,
    seed: u64,
) -> Result<MultiChannelClip> {
    if snr_db.is_nan() {
        return Err(invalid("SNR must not be NaN"));
    }
    if snr_db == f64::INFINITY {
        return Ok(clip.clone());
    }
    let powers: Vec<f64> = clip.samples.iter().map(|c| channel_power(c)).collect();
    let total: f64 = powers.iter().sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedSnr);
    }
    let ratio = 10f64.powf(snr_db / 10.0);
    let mut out = clip.clone();
    match kind {
        NoiseKind::White => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (ch, &p) in out.samples.iter_mut().zip(&powers) {
                if p == 0.0 {
                    return Err(Error::UndefinedSnr);
                }
                let noise: Vec<f64> = (0..ch.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                let g = (p / (ratio * channel_power(&noise))).sqrt();
                for (x, w) in ch.iter_mut().zip(&noise) {
                    *x += g * w;
                }
            }
        }
        NoiseKind::Directional { geometry, source } => {
            if geometry.n_mics() != clip.n_channels() {
                return Err(Error::Dimension(format!(
                    "noise geometry has {} microphones, clip has {} channels",
                    geometry.n_mics(),
                    clip.n_channels()
                )));
            }
            let mut source = source.clone();
            source.seed = seed;
            let noise = synthesize_clip(geometry, &source, clip.duration(), clip.sample_rate)?;
            let noise_total: f64 = noise.samples.iter().map(|c| channel_power(c)).sum();
            if !(noise_total > 0.0) {
                return Err(invalid("directional noise source is silent"));
            }
            let g = (total / (ratio * noise_total)).sqrt();
            for (ch, nch) in out.samples.iter_mut().zip(&noise.samples) {
                for (x, w) in ch.iter_mut().zip(nch) {
                    *x += g * w;
                }
            }
        }
    }
    out.limit_peak();
    Ok(out)
}

/// Cut a clip into overlapping windows with identical boundaries on every channel.
pub fn clip_windows(clip: &MultiChannelClip, window_s: f64, stride_s: f64) -> Result<Vec<MultiChannelClip>> {
    let win = (window_s * clip.sample_rate).round() as usize;
    let stride = (stride_s * clip.sample_rate).round() as usize;
    if win == 0 || stride == 0 {
        return Err(invalid("window and stride must each cover at least one sample"));
    }
    Ok(window_starts(clip.len(), win, stride)
        .map(|start| MultiChannelClip {
            sample_rate: clip.sample_rate,
            samples: clip
                .samples
                .iter()
                .map(|c| c[start..start + win].to_vec())
                .collect(),
            label_azimuth: clip.label_azimuth,
        })
        .collect())
}

fn window_starts(len: usize, win: usize, stride: usize) -> impl Iterator<Item = usize> {
    let count = if len < win { 0 } else { (len - win) / stride + 1 };
    (0..count).map(move |i| i * stride)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone_source(az: f64, d: f64, freqs: &[f64]) -> SourceSpec {
        SourceSpec::new(
            az,
            d,
            SourceSignal::MultiTone(freqs.iter().map(|&f| Tone::new(f, 0.2, 0.3)).collect()),
            7,
        )
    }

    // Phase of the projection onto exp(-j 2 pi f t), measured over whole periods.
    fn phase_at(x: &[f64], f: f64, fs: f64) -> f64 {
        let acc = x.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (k, &v)| {
            acc + v * Complex64::from_polar(1.0, -2.0 * PI * f * k as f64 / fs)
        });
        acc.arg()
    }

    fn wrap(x: f64) -> f64 {
        (x + PI).rem_euclid(2.0 * PI) - PI
    }

    #[test]
    fn geometry_validation() {
        assert!(MicArrayGeometry::new(vec![[0.0, 0.0]], 343.0).is_err());
        assert!(MicArrayGeometry::new(vec![[0.0, 0.0], [0.0, 0.0]], 343.0).is_err());
        assert!(MicArrayGeometry::new(vec![[0.0, 0.0], [1.0, 0.0]], 0.0).is_err());
        let g = MicArrayGeometry::default();
        assert_eq!(g.n_mics(), 4);
        assert_eq!(g.pairs(), vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn zero_azimuth_is_between_mics_three_and_four() {
        let g = MicArrayGeometry::default();
        let p = g.mic_positions();
        let mid = [(p[2][0] + p[3][0]) / 2.0, (p[2][1] + p[3][1]) / 2.0];
        assert!(mid[0] > 0.0);
        assert_eq!(mid[1], 0.0);
    }

    #[test]
    fn tdoa_zero_on_bisector() {
        let g = MicArrayGeometry::default();
        // Mics 3 and 4 are mirror images about the x axis.
        let s = tone_source(0.0, 1.5, &[200.0]);
        assert_eq!(analytic_tdoa(&g, &s, (2, 3)).unwrap(), 0.0);
        assert!(matches!(analytic_tdoa(&g, &s, (1, 1)), Err(Error::DegeneratePair(1))));
        assert!(analytic_tdoa(&g, &s, (0, 9)).is_err());
    }

    #[test]
    fn tdoa_endfire_limit() {
        let g = MicArrayGeometry::new(vec![[-0.05, 0.0], [0.05, 0.0]], 343.0).unwrap();
        let s = tone_source(0.0, 1000.0, &[200.0]);
        let t = analytic_tdoa(&g, &s, (0, 1)).unwrap();
        assert!((t - 0.1 / 343.0).abs() < 1e-7, "{t}");
        let s = tone_source(180.0, 1000.0, &[200.0]);
        let t = analytic_tdoa(&g, &s, (0, 1)).unwrap();
        assert!((t + 0.1 / 343.0).abs() < 1e-7, "{t}");
    }

    #[test]
    fn tdoa_square_at_45_degrees_matches_hand_distances() {
        let side = 0.064;
        let g = MicArrayGeometry::square(side).unwrap();
        let s = tone_source(45.0, 1.5, &[200.0]);
        // Independent scalar arithmetic: source at (1.5 cos45, 1.5 sin45).
        let sx = 1.5 * std::f64::consts::FRAC_1_SQRT_2;
        let sy = sx;
        let h = side / 2.0;
        let d1 = ((sx + h).powi(2) + (sy - h).powi(2)).sqrt();
        let d4 = ((sx - h).powi(2) + (sy - h).powi(2)).sqrt();
        let expect = (d1 - d4) / 343.0;
        let got = analytic_tdoa(&g, &s, (0, 3)).unwrap();
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
    }

    #[test]
    fn tone_phase_difference_follows_delay() {
        let g = MicArrayGeometry::square(0.24).unwrap();
        let fs = 16_000.0;
        for &az in &[0.0, 33.0, 128.0, 275.0] {
            let s = SourceSpec::new(
                az,
                1.0,
                SourceSignal::MultiTone(vec![Tone::new(200.0, 0.5, 1.1)]),
                1,
            );
            // 0.1 s holds exactly 20 periods of 200 Hz.
            let clip = synthesize_clip(&g, &s, 0.1, fs).unwrap();
            for (a, b) in g.pairs() {
                let delta = analytic_tdoa(&g, &s, (a, b)).unwrap();
                let pa = phase_at(&clip.samples[a], 200.0, fs);
                let pb = phase_at(&clip.samples[b], 200.0, fs);
                // Channel a is delayed by T_a, so its phase lags by 2 pi f T_a.
                let measured = wrap(pb - pa);
                let expect = wrap(2.0 * PI * 200.0 * delta);
                assert!(wrap(measured - expect).abs() < 1e-6, "az {az} pair {a}{b}");
            }
        }
    }

    #[test]
    fn equidistant_channels_are_identical() {
        let g = MicArrayGeometry::default();
        for signal in [
            SourceSignal::MultiTone(vec![Tone::new(300.0, 0.3, 0.0), Tone::new(1234.0, 0.2, 1.0)]),
            SourceSignal::WhiteNoiseBurst,
        ] {
            let s = SourceSpec::new(0.0, 1.5, signal, 3);
            let clip = synthesize_clip(&g, &s, 0.05, 16_000.0).unwrap();
            let diff = clip.samples[2]
                .iter()
                .zip(&clip.samples[3])
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(diff < 1e-9, "{diff}");
        }
    }

    #[test]
    fn four_tone_spectrum_has_equal_peaks() {
        let g = MicArrayGeometry::default();
        let s = tone_source(70.0, 1.5, &[200.0, 400.0, 600.0, 800.0]);
        let fs = 16_000.0;
        let clip = synthesize_clip(&g, &s, 0.1, fs).unwrap();
        for ch in &clip.samples {
            let mags: Vec<f64> = [200.0, 400.0, 600.0, 800.0]
                .iter()
                .map(|&f| {
                    ch.iter()
                        .enumerate()
                        .fold(Complex64::new(0.0, 0.0), |acc, (k, &v)| {
                            acc + v * Complex64::from_polar(1.0, -2.0 * PI * f * k as f64 / fs)
                        })
                        .norm()
                })
                .collect();
            for m in &mags {
                assert!((m - mags[0]).abs() < 1e-9 * mags[0]);
            }
            // Off-tone frequency carries nothing.
            let off = ch
                .iter()
                .enumerate()
                .fold(Complex64::new(0.0, 0.0), |acc, (k, &v)| {
                    acc + v * Complex64::from_polar(1.0, -2.0 * PI * 300.0 * k as f64 / fs)
                })
                .norm();
            assert!(off < 1e-9 * mags[0]);
        }
    }

    #[test]
    fn synthesis_errors() {
        let g = MicArrayGeometry::default();
        let s = tone_source(0.0, 1.0, &[9000.0]);
        assert!(matches!(
            synthesize_clip(&g, &s, 0.1, 16_000.0),
            Err(Error::AboveNyquist { .. })
        ));
        let s = tone_source(0.0, 1.0, &[200.0]);
        assert!(synthesize_clip(&g, &s, 0.0, 16_000.0).is_err());
        // Shorter than one period of 200 Hz.
        assert!(synthesize_clip(&g, &s, 0.004, 16_000.0).is_err());
    }

    #[test]
    fn synthesis_is_deterministic_and_bounded() {
        let g = MicArrayGeometry::default();
        let s = SourceSpec::new(10.0, 1.0, SourceSignal::WhiteNoiseBurst, 99);
        let a = synthesize_clip(&g, &s, 0.2, 16_000.0).unwrap();
        let b = synthesize_clip(&g, &s, 0.2, 16_000.0).unwrap();
        assert_eq!(a, b);
        assert!(a.peak() <= 1.0);
        let loud = tone_source(0.0, 0.1, &[200.0, 300.0, 500.0]);
        assert!(synthesize_clip(&g, &loud, 0.05, 16_000.0).unwrap().peak() <= 1.0);
    }

    #[test]
    fn noise_infinite_snr_is_identity() {
        let g = MicArrayGeometry::default();
        let clip = synthesize_clip(&g, &tone_source(0.0, 1.0, &[200.0]), 0.1, 16_000.0).unwrap();
        assert_eq!(add_noise(&clip, f64::INFINITY, NoiseKind::White, 1).unwrap(), clip);
    }

    #[test]
    fn white_noise_hits_target_snr() {
        let g = MicArrayGeometry::default();
        let clean = synthesize_clip(&g, &tone_source(20.0, 1.5, &[200.0, 700.0]), 0.17, 16_000.0).unwrap();
        let noisy = add_noise(&clean, 0.0, NoiseKind::White, 5).unwrap();
        for (c, n) in clean.samples.iter().zip(&noisy.samples) {
            let resid: Vec<f64> = n.iter().zip(c).map(|(a, b)| a - b).collect();
            let db = 10.0 * (channel_power(c) / channel_power(&resid)).log10();
            assert!(db.abs() < 0.1, "{db}");
        }
    }

    #[test]
    fn silent_clip_has_undefined_snr() {
        let clip = MultiChannelClip::new(16_000.0, vec![vec![0.0; 100]; 2], None).unwrap();
        assert!(matches!(add_noise(&clip, 10.0, NoiseKind::White, 1), Err(Error::UndefinedSnr)));
    }

    #[test]
    fn window_counts() {
        let fs = 16_000.0;
        let mk = |n: usize| MultiChannelClip::new(fs, vec![vec![0.1; n]; 4], Some(5.0)).unwrap();
        assert_eq!(clip_windows(&mk(2720), 0.170, 0.085).unwrap().len(), 1);
        assert_eq!(clip_windows(&mk(5440), 0.170, 0.085).unwrap().len(), 3);
        assert_eq!(clip_windows(&mk(100), 0.170, 0.085).unwrap().len(), 0);
        // One second: enumerate start positions directly.
        let mut count = 0;
        let mut start = 0;
        while start + 2720 <= 16_000 {
            count += 1;
            start += 1360;
        }
        let w = clip_windows(&mk(16_000), 0.170, 0.085).unwrap();
        assert_eq!(w.len(), count);
        assert!(w.iter().all(|c| c.label_azimuth == Some(5.0) && c.len() == 2720));
        // Window shorter than stride is allowed.
        assert_eq!(clip_windows(&mk(16_000), 0.05, 0.1).unwrap().len(), 10);
    }
}
