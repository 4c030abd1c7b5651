//! Multi-tone phase coding of inter-channel time differences.
//!
//! A window is decomposed into analysis tones by an N-point FFT. Each tone
//! with enough energy emits one spike at the first peak of its sinusoid.
//! For every microphone pair, coincidence detectors behind a bank of
//! integer-sample delay lines compare the two spikes of each tone, and the
//! resulting tone × delay matrix is pooled into ERB-spaced cochlear channels.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::config::KeyValues;
use crate::error::{invalid, Error, Result};
use crate::fft::Radix2Fft;
use crate::sim::{all_pairs, MultiChannelClip};

pub const PATTERN_MAGIC: &[u8; 4] = b"MTPC";
pub const PATTERN_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ToneSpectrum {
    pub fft_points: usize,
    pub sample_rate: f64,
    /// `f_i = i / N * f_s` for `i = 1..=N/2`.
    pub freqs: Vec<f64>,
    pub amplitudes: Vec<f64>,
    /// Four-quadrant angle of `(a_i, b_i)`, in `(-pi, pi]`.
    pub phases: Vec<f64>,
}

impl ToneSpectrum {
    pub fn n_tones(&self) -> usize {
        self.freqs.len()
    }
}

pub fn analyze_tones(window: &[f64], fft_points: usize, sample_rate: f64) -> Result<ToneSpectrum> {
    analyze_tones_windowed(window, fft_points, sample_rate, AnalysisWindow::Rectangular)
}

/// Like [`analyze_tones`], but tapers the first `fft_points` samples first.
pub fn analyze_tones_windowed(
    window: &[f64],
    fft_points: usize,
    sample_rate: f64,
    taper: AnalysisWindow,
) -> Result<ToneSpectrum> {
    let plan = Radix2Fft::new(fft_points)?;
    analyze_with(&plan, &taper.coefficients(fft_points), window, sample_rate)
}

fn analyze_with(plan: &Radix2Fft, taper: &[f64], window: &[f64], sample_rate: f64) -> Result<ToneSpectrum> {
    let n_fft = plan.len();
    if window.len() < n_fft {
        return Err(invalid(format!(
            "window of {} samples is shorter than the {n_fft}-point FFT",
            window.len()
        )));
    }
    let tapered: Vec<f64> = window.iter().zip(taper).map(|(x, w)| x * w).collect();
    let spec = plan.forward_real(&tapered);
    let n = n_fft / 2;
    let mut freqs = Vec::with_capacity(n);
    let mut amplitudes = Vec::with_capacity(n);
    let mut phases = Vec::with_capacity(n);
    for (i, c) in spec.iter().enumerate().skip(1).take(n) {
        freqs.push(i as f64 / n_fft as f64 * sample_rate);
        amplitudes.push(c.re.hypot(c.im));
        phases.push(c.im.atan2(c.re));
    }
    Ok(ToneSpectrum {
        fft_points: n_fft,
        sample_rate,
        freqs,
        amplitudes,
        phases,
    })
}

/// First-peak spike times, one optional spike per analysis tone.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpikeTrain {
    pub freqs: Vec<f64>,
    pub times: Vec<Option<f64>>,
}

/// Time of the first maximum of `sin(2 pi f t + phase)` at or after zero.
pub fn first_peak_time(freq_hz: f64, phase: f64) -> f64 {
    let period = 1.0 / freq_hz;
    let t = (FRAC_PI_2 - phase).rem_euclid(2.0 * PI) / (2.0 * PI * freq_hz);
    if t >= period {
        t - period
    } else {
        t
    }
}

pub fn phase_to_spike(spectrum: &ToneSpectrum, floor_db: f64) -> PhaseSpikeTrain {
    let max = spectrum.amplitudes.iter().cloned().fold(0.0, f64::max);
    let floor = max * 10f64.powf(-floor_db / 20.0);
    let times = spectrum
        .freqs
        .iter()
        .zip(&spectrum.amplitudes)
        .zip(&spectrum.phases)
        .map(|((&f, &a), &phi)| (max > 0.0 && a > floor).then(|| first_peak_time(f, phi)))
        .collect();
    PhaseSpikeTrain {
        freqs: spectrum.freqs.clone(),
        times,
    }
}

/// Symmetric bank of `2d + 1` delay lines spaced one sample apart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayLineBank {
    pub half_width: usize,
    pub sample_rate: f64,
    pub tolerance: f64,
}

impl DelayLineBank {
    /// Bank with `count` delay lines and half-sample coincidence tolerance.
    pub fn new(count: usize, sample_rate: f64) -> Result<Self> {
        if count == 0 || count % 2 == 0 {
            return Err(invalid(format!("delay-line count must be odd, got {count}")));
        }
        if !(sample_rate > 0.0) {
            return Err(invalid("sample rate must be positive"));
        }
        Ok(Self {
            half_width: (count - 1) / 2,
            sample_rate,
            tolerance: 0.5 / sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Delay of column `col`, in seconds.
    pub fn delay(&self, col: usize) -> f64 {
        (col as f64 - self.half_width as f64) / self.sample_rate
    }

    pub fn delays(&self) -> Vec<f64> {
        (0..self.len()).map(|c| self.delay(c)).collect()
    }

    /// Column of a delay expressed in whole samples, if inside the bank.
    pub fn column_of(&self, delay_samples: i64) -> Option<usize> {
        let c = delay_samples + self.half_width as i64;
        (0..self.len() as i64).contains(&c).then_some(c as usize)
    }
}

/// Binary tone × delay coincidence matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoincidencePattern {
    pub n_tones: usize,
    pub n_delays: usize,
    pub bits: Vec<u8>,
}

impl CoincidencePattern {
    pub fn zeros(n_tones: usize, n_delays: usize) -> Self {
        Self {
            n_tones,
            n_delays,
            bits: vec![0; n_tones * n_delays],
        }
    }

    pub fn get(&self, tone: usize, col: usize) -> u8 {
        self.bits[tone * self.n_delays + col]
    }

    pub fn set(&mut self, tone: usize, col: usize) {
        self.bits[tone * self.n_delays + col] = 1;
    }

    pub fn row(&self, tone: usize) -> &[u8] {
        &self.bits[tone * self.n_delays..(tone + 1) * self.n_delays]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }
}

/// Fire every delay line whose delay aligns the two first-peak spikes,
/// modulo the tone period.
pub fn coincidence_detect(
    reference: &PhaseSpikeTrain,
    other: &PhaseSpikeTrain,
    bank: &DelayLineBank,
) -> Result<CoincidencePattern> {
    if reference.freqs != other.freqs || reference.times.len() != other.times.len() {
        return Err(Error::Dimension("spike trains built on different tone grids".into()));
    }
    let n_delays = bank.len();
    let mut out = CoincidencePattern::zeros(reference.freqs.len(), n_delays);
    let fs = bank.sample_rate;
    let d = bank.half_width as f64;
    let lo = -d / fs - bank.tolerance;
    let hi = d / fs + bank.tolerance;
    for (i, &f) in reference.freqs.iter().enumerate() {
        let (Some(tr), Some(to)) = (reference.times[i], other.times[i]) else {
            continue;
        };
        let period = 1.0 / f;
        let delta = tr - to;
        // Fire column k when delta - tau_k - m * period lies in [-tol, tol).
        let m_lo = ((delta - hi) / period).floor() as i64;
        let m_hi = ((delta - lo) / period).ceil() as i64;
        for m in m_lo..=m_hi {
            let centre = delta - m as f64 * period;
            let k_lo = ((centre - bank.tolerance) * fs).floor() as i64 + 1;
            let k_hi = ((centre + bank.tolerance) * fs).floor() as i64;
            for k in k_lo - 1..=k_hi + 1 {
                let r = centre - k as f64 / fs;
                if r < -bank.tolerance || r >= bank.tolerance {
                    continue;
                }
                if let Some(col) = bank.column_of(k) {
                    out.set(i, col);
                }
            }
        }
    }
    Ok(out)
}

pub fn hz_to_erb_rate(f_hz: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * f_hz).log10()
}

pub fn erb_rate_to_hz(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) / 0.00437
}

/// Edges of `n_channels` contiguous bands, uniform on the ERB-rate scale.
pub fn cochlear_channels(n_channels: usize, f_low: f64, f_high: f64) -> Result<Vec<f64>> {
    if n_channels < 1 {
        return Err(invalid("at least one cochlear channel is required"));
    }
    if !(f_low > 0.0 && f_low < f_high && f_high.is_finite()) {
        return Err(invalid(format!("invalid band range [{f_low}, {f_high}] Hz")));
    }
    let (e_lo, e_hi) = (hz_to_erb_rate(f_low), hz_to_erb_rate(f_high));
    let mut edges: Vec<f64> = (0..=n_channels)
        .map(|c| erb_rate_to_hz(e_lo + (e_hi - e_lo) * c as f64 / n_channels as f64))
        .collect();
    edges[0] = f_low;
    edges[n_channels] = f_high;
    Ok(edges)
}

/// Channel index of a frequency, `None` outside `[edges[0], edges[last]]`.
pub fn channel_of(edges: &[f64], f: f64) -> Option<usize> {
    let n = edges.len().checked_sub(1)?;
    if n == 0 || f < edges[0] || f > edges[n] {
        return None;
    }
    let c = edges.partition_point(|&e| e <= f);
    Some(c.saturating_sub(1).min(n - 1))
}

/// Spike counts per cochlear channel and delay, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPattern {
    pub n_channels: usize,
    pub n_delays: usize,
    pub counts: Vec<u32>,
    pub edges: Vec<f64>,
}

impl ChannelPattern {
    pub fn zeros(n_channels: usize, n_delays: usize, edges: Vec<f64>) -> Self {
        Self {
            n_channels,
            n_delays,
            counts: vec![0; n_channels * n_delays],
            edges,
        }
    }

    pub fn get(&self, channel: usize, col: usize) -> u32 {
        self.counts[channel * self.n_delays + col]
    }

    pub fn column_totals(&self) -> Vec<u32> {
        let mut totals = vec![0u32; self.n_delays];
        for row in self.counts.chunks(self.n_delays) {
            for (t, &c) in totals.iter_mut().zip(row) {
                *t += c;
            }
        }
        totals
    }

    /// Column with the largest total count; the first one on ties.
    pub fn argmax_column(&self) -> usize {
        let totals = self.column_totals();
        let mut best = 0;
        for (i, &t) in totals.iter().enumerate() {
            if t > totals[best] {
                best = i;
            }
        }
        best
    }

    /// Argmax column expressed as a signed delay in samples.
    pub fn argmax_delay_samples(&self) -> i64 {
        self.argmax_column() as i64 - (self.n_delays as i64 - 1) / 2
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

pub fn group_channels(pattern: &CoincidencePattern, spectrum: &ToneSpectrum, edges: &[f64]) -> ChannelPattern {
    let n_channels = edges.len().saturating_sub(1);
    let mut out = ChannelPattern::zeros(n_channels, pattern.n_delays, edges.to_vec());
    for (tone, &f) in spectrum.freqs.iter().enumerate().take(pattern.n_tones) {
        let Some(c) = channel_of(edges, f) else { continue };
        let dst = &mut out.counts[c * pattern.n_delays..(c + 1) * pattern.n_delays];
        for (o, &b) in dst.iter_mut().zip(pattern.row(tone)) {
            *o += b as u32;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub fft_points: usize,
    pub delay_lines: usize,
    pub channels: usize,
    pub floor_db: f64,
    pub f_low_hz: f64,
    /// Upper band edge; the Nyquist frequency when unset.
    pub f_high_hz: Option<f64>,
    pub window: AnalysisWindow,
}

/// Taper applied before the FFT. A tone between bins leaks into every bin
/// under the rectangular window, and each leaked bin reports the tone's phase
/// at the wrong frequency, so its delay estimate is scaled by `f / f_i`.
/// The Hann taper confines a tone to its two or three nearest bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalysisWindow {
    Rectangular,
    Hann,
}

impl AnalysisWindow {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Self::Rectangular => vec![1.0; n],
            Self::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

impl FromStr for AnalysisWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rect" | "rectangular" => Ok(Self::Rectangular),
            "hann" => Ok(Self::Hann),
            other => Err(Error::Config(format!("unknown window {other:?}"))),
        }
    }
}

impl fmt::Display for AnalysisWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rectangular => "rect",
            Self::Hann => "hann",
        })
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            fft_points: 1024,
            delay_lines: 51,
            channels: 40,
            floor_db: 20.0,
            f_low_hz: 50.0,
            f_high_hz: None,
            window: AnalysisWindow::Hann,
        }
    }
}

impl EncoderConfig {
    pub const KEYS: [&'static str; 7] = [
        "fft_points",
        "delay_lines",
        "channels",
        "floor_db",
        "f_low_hz",
        "f_high_hz",
        "window",
    ];

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&Self::KEYS)?;
        let mut cfg = Self::default();
        cfg.apply(kv)?;
        Ok(cfg)
    }

    /// Override fields present in `kv`; other keys are ignored.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(v) = kv.parse("fft_points")? {
            self.fft_points = v;
        }
        if let Some(v) = kv.parse("delay_lines")? {
            self.delay_lines = v;
        }
        if let Some(v) = kv.parse("channels")? {
            self.channels = v;
        }
        if let Some(v) = kv.parse("floor_db")? {
            self.floor_db = v;
        }
        if let Some(v) = kv.parse("f_low_hz")? {
            self.f_low_hz = v;
        }
        if let Some(v) = kv.get("f_high_hz") {
            self.f_high_hz = match v {
                "" | "nyquist" => None,
                s => Some(s.parse().map_err(|_| Error::Config(format!("f_high_hz: bad value {s:?}")))?),
            };
        }
        if let Some(v) = kv.get("window") {
            self.window = v.parse()?;
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("fft_points", self.fft_points);
        kv.insert("delay_lines", self.delay_lines);
        kv.insert("channels", self.channels);
        kv.insert("floor_db", self.floor_db);
        kv.insert("f_low_hz", self.f_low_hz);
        kv.insert(
            "f_high_hz",
            self.f_high_hz.map_or_else(|| "nyquist".to_string(), |f| f.to_string()),
        );
        kv.insert("window", self.window);
        kv
    }
}

impl FromStr for EncoderConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_key_values(&s.parse()?)
    }
}

impl fmt::Display for EncoderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_key_values())
    }
}

/// One channel pattern per microphone pair, in `(0,1), (0,2), ..., (n-2,n-1)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiPairPattern {
    pub sample_rate: f64,
    pub pairs: Vec<(usize, usize)>,
    pub patterns: Vec<ChannelPattern>,
    pub label_azimuth: Option<f64>,
}

impl MultiPairPattern {
    pub fn n_pairs(&self) -> usize {
        self.patterns.len()
    }

    pub fn n_channels(&self) -> usize {
        self.patterns.first().map_or(0, |p| p.n_channels)
    }

    pub fn n_delays(&self) -> usize {
        self.patterns.first().map_or(0, |p| p.n_delays)
    }

    /// Patterns joined along the delay axis: `n_pairs * n_delays` steps of
    /// `n_channels` values each, flattened step-major. Read as a
    /// `pair × delay × channel` volume this is also the stacked layout.
    pub fn delay_sequence(&self) -> Vec<f64> {
        let (nc, nd) = (self.n_channels(), self.n_delays());
        let mut out = Vec::with_capacity(self.n_pairs() * nd * nc);
        for p in &self.patterns {
            for col in 0..nd {
                for ch in 0..nc {
                    out.push(p.get(ch, col) as f64);
                }
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let to_u16 = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u16")))
        };
        w.write_all(PATTERN_MAGIC)?;
        w.write_u16::<LittleEndian>(PATTERN_VERSION)?;
        w.write_u16::<LittleEndian>(to_u16(self.n_pairs(), "pair count")?)?;
        w.write_u16::<LittleEndian>(to_u16(self.n_channels(), "channel count")?)?;
        w.write_u16::<LittleEndian>(to_u16(self.n_delays(), "delay count")?)?;
        w.write_f64::<LittleEndian>(self.sample_rate)?;
        for p in &self.patterns {
            for &c in &p.counts {
                w.write_u16::<LittleEndian>(to_u16(c as usize, "count")?)?;
            }
        }
        if let Some(az) = self.label_azimuth {
            w.write_f32::<LittleEndian>(az as f32)?;
        }
        Ok(())
    }

    /// Parse a pattern file. Pair indices and channel edges are not stored;
    /// pairs are restored in canonical order for the smallest microphone
    /// count with that many pairs, and edges are left empty.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PATTERN_MAGIC {
            return Err(Error::Format("not an MTPC pattern file".into()));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != PATTERN_VERSION {
            return Err(Error::Format(format!("unsupported pattern version {version}")));
        }
        let n_pairs = r.read_u16::<LittleEndian>()? as usize;
        let n_channels = r.read_u16::<LittleEndian>()? as usize;
        let n_delays = r.read_u16::<LittleEndian>()? as usize;
        let sample_rate = r.read_f64::<LittleEndian>()?;
        let mut patterns = Vec::with_capacity(n_pairs);
        for _ in 0..n_pairs {
            let mut p = ChannelPattern::zeros(n_channels, n_delays, Vec::new());
            for c in p.counts.iter_mut() {
                *c = r.read_u16::<LittleEndian>()? as u32;
            }
            patterns.push(p);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let label_azimuth = match rest.len() {
            0 => None,
            4 => Some(f32::from_le_bytes([rest[0], rest[1], rest[2], rest[3]]) as f64),
            n => return Err(Error::Format(format!("{n} unexpected trailing bytes"))),
        };
        let mut mics = 2;
        while mics * (mics - 1) / 2 < n_pairs {
            mics += 1;
        }
        let mut pairs = all_pairs(mics);
        pairs.truncate(n_pairs);
        Ok(Self {
            sample_rate,
            pairs,
            patterns,
            label_azimuth,
        })
    }
}

/// Reusable encoder holding the FFT plan, delay bank and channel edges.
#[derive(Debug, Clone)]
pub struct MtpcEncoder {
    config: EncoderConfig,
    sample_rate: f64,
    plan: Radix2Fft,
    taper: Vec<f64>,
    bank: DelayLineBank,
    edges: Vec<f64>,
}

impl MtpcEncoder {
    pub fn new(config: EncoderConfig, sample_rate: f64) -> Result<Self> {
        let plan = Radix2Fft::new(config.fft_points)?;
        let bank = DelayLineBank::new(config.delay_lines, sample_rate)?;
        let nyquist = sample_rate / 2.0;
        let f_high = config.f_high_hz.unwrap_or(nyquist);
        if f_high > nyquist {
            return Err(invalid(format!("f_high_hz {f_high} exceeds Nyquist {nyquist}")));
        }
        let edges = cochlear_channels(config.channels, config.f_low_hz, f_high)?;
        let taper = config.window.coefficients(config.fft_points);
        Ok(Self {
            config,
            sample_rate,
            plan,
            taper,
            bank,
            edges,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn bank(&self) -> &DelayLineBank {
        &self.bank
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn spike_train(&self, channel: &[f64]) -> Result<(ToneSpectrum, PhaseSpikeTrain)> {
        let spectrum = analyze_with(&self.plan, &self.taper, channel, self.sample_rate)?;
        let train = phase_to_spike(&spectrum, self.config.floor_db);
        Ok((spectrum, train))
    }

    /// Encode every microphone pair; the lower index is the reference side.
    pub fn encode(&self, clip: &MultiChannelClip) -> Result<MultiPairPattern> {
        if clip.n_channels() < 2 {
            return Err(invalid("encoding needs at least two channels"));
        }
        if (clip.sample_rate - self.sample_rate).abs() > 1e-9 {
            return Err(invalid(format!(
                "clip sample rate {} differs from encoder rate {}",
                clip.sample_rate, self.sample_rate
            )));
        }
        let trains = clip
            .samples
            .iter()
            .map(|ch| self.spike_train(ch))
            .collect::<Result<Vec<_>>>()?;
        let pairs = all_pairs(clip.n_channels());
        let patterns = pairs
            .iter()
            .map(|&(a, b)| {
                let coincidences = coincidence_detect(&trains[a].1, &trains[b].1, &self.bank)?;
                Ok(group_channels(&coincidences, &trains[a].0, &self.edges))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiPairPattern {
            sample_rate: self.sample_rate,
            pairs,
            patterns,
            label_azimuth: clip.label_azimuth,
        })
    }
}

pub fn encode_multipair(clip: &MultiChannelClip, config: &EncoderConfig) -> Result<MultiPairPattern> {
    MtpcEncoder::new(config.clone(), clip.sample_rate)?.encode(clip)
}
