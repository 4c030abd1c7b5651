//! Synthetic localisation datasets: clips on an azimuth grid, cut into
//! windows and encoded once so training epochs only touch spike counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::KeyValues;
use crate::encoder::{EncoderConfig, MtpcEncoder, MultiPairPattern};
use crate::error::{invalid, Error, Result};
use crate::sim::{
    add_noise, clip_windows, synthesize_clip, MicArrayGeometry, MultiChannelClip, NoiseKind, SourceSignal, SourceSpec,
    Tone, DEFAULT_SAMPLE_RATE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    /// Random tones, log-uniform in frequency.
    MultiTone,
    NoiseBurst,
}

/// A second talker-like source placed on one of a few fixed bearings.
#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceConfig {
    pub snr_db_range: (f64, f64),
    pub distance_m: f64,
    pub directions_deg: Vec<f64>,
}

impl Default for InterferenceConfig {
    fn default() -> Self {
        Self {
            snr_db_range: (0.0, 5.0),
            distance_m: 1.5,
            directions_deg: vec![0.0, 90.0, 180.0, 270.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub side_m: f64,
    pub sample_rate: f64,
    pub n_azimuths: usize,
    pub clips_per_azimuth: usize,
    pub windows_per_clip: usize,
    pub window_s: f64,
    pub stride_s: f64,
    pub distances_m: Vec<f64>,
    /// Sensor noise; `f64::INFINITY` for none.
    pub snr_db: f64,
    pub val_clips: usize,
    pub test_clips: usize,
    pub interference: Option<InterferenceConfig>,
    pub seed: u64,
}

impl Default for DatasetConfig {
    /// 36 bearings, 200 windows each, on a 24 cm square whose diagonal
    /// spans about one millisecond of delay.
    fn default() -> Self {
        Self {
            side_m: 0.24,
            sample_rate: DEFAULT_SAMPLE_RATE,
            n_azimuths: 36,
            clips_per_azimuth: 10,
            windows_per_clip: 20,
            window_s: 0.170,
            stride_s: 0.085,
            distances_m: vec![1.0, 1.5],
            snr_db: 20.0,
            val_clips: 2,
            test_clips: 2,
            interference: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipPlan {
    pub index: usize,
    pub azimuth_deg: f64,
    pub distance_m: f64,
    pub kind: SourceKind,
    pub split: Split,
    pub seed: u64,
}

/// Seed of the `k`-th clip drawn from a run seed.
pub fn clip_seed(seed: u64, k: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn multi_tone(rng: &mut ChaCha8Rng, nyquist: f64) -> Vec<Tone> {
    let n = rng.gen_range(24..=48);
    let (lo, hi) = (150f64.ln(), 5000f64.min(0.9 * nyquist).ln());
    (0..n)
        .map(|_| {
            Tone::new(
                rng.gen_range(lo..hi).exp(),
                rng.gen_range(0.02..0.06),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect()
}

/// Harmonic series with a falling spectrum, as a crude voice.
fn voice(rng: &mut ChaCha8Rng, nyquist: f64) -> Vec<Tone> {
    let f0 = rng.gen_range(100.0..250.0);
    (1..)
        .map(|k| k as f64 * f0)
        .take_while(|&f| f < 4000f64.min(0.9 * nyquist))
        .enumerate()
        .map(|(k, f)| Tone::new(f, 0.2 / (k + 1) as f64, rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect()
}

impl DatasetConfig {
    pub const KEYS: [&'static str; 12] = [
        "side_m",
        "n_azimuths",
        "clips_per_azimuth",
        "windows_per_clip",
        "window_s",
        "stride_s",
        "snr_db",
        "val_clips",
        "test_clips",
        "interference",
        "sample_rate",
        "seed",
    ];

    /// Override fields present in `kv`; other keys are ignored.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = kv.parse(stringify!($f))? {
                    self.$f = v;
                }
            )*};
        }
        set!(side_m, n_azimuths, clips_per_azimuth, windows_per_clip, window_s, stride_s, snr_db, val_clips, test_clips, sample_rate, seed);
        if let Some(v) = kv.parse::<bool>("interference")? {
            self.interference = v.then(InterferenceConfig::default);
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("side_m", self.side_m);
        kv.insert("n_azimuths", self.n_azimuths);
        kv.insert("clips_per_azimuth", self.clips_per_azimuth);
        kv.insert("windows_per_clip", self.windows_per_clip);
        kv.insert("window_s", self.window_s);
        kv.insert("stride_s", self.stride_s);
        kv.insert("snr_db", self.snr_db);
        kv.insert("val_clips", self.val_clips);
        kv.insert("test_clips", self.test_clips);
        kv.insert("interference", self.interference.is_some());
        kv.insert("sample_rate", self.sample_rate);
        kv.insert("seed", self.seed);
        kv
    }

    pub fn geometry(&self) -> Result<MicArrayGeometry> {
        MicArrayGeometry::square(self.side_m)
    }

    fn validate(&self) -> Result<()> {
        if self.n_azimuths == 0 || self.clips_per_azimuth == 0 || self.windows_per_clip == 0 {
            return Err(invalid("dataset must have azimuths, clips and windows"));
        }
        if self.val_clips + self.test_clips >= self.clips_per_azimuth {
            return Err(invalid("no clips left for training"));
        }
        if self.distances_m.is_empty() {
            return Err(invalid("no source distances"));
        }
        Ok(())
    }

    pub fn clip_duration(&self) -> f64 {
        self.window_s + (self.windows_per_clip - 1) as f64 * self.stride_s
    }

    /// Every clip of the dataset. Within each bearing the last clips are held
    /// out, so no window of a held-out clip is seen in training. Source kinds
    /// alternate clip by clip and distances every other clip, offset so that
    /// both held-out splits see both kinds and both distances.
    pub fn plan(&self) -> Result<Vec<ClipPlan>> {
        self.validate()?;
        let n_train = self.clips_per_azimuth - self.val_clips - self.test_clips;
        let mut out = Vec::new();
        for a in 0..self.n_azimuths {
            let azimuth_deg = a as f64 * 360.0 / self.n_azimuths as f64;
            for c in 0..self.clips_per_azimuth {
                let split = if c < n_train {
                    Split::Train
                } else if c < n_train + self.val_clips {
                    Split::Val
                } else {
                    Split::Test
                };
                let index = out.len();
                out.push(ClipPlan {
                    index,
                    azimuth_deg,
                    distance_m: self.distances_m[(c + c / 2) % self.distances_m.len()],
                    kind: if c % 2 == 0 { SourceKind::MultiTone } else { SourceKind::NoiseBurst },
                    split,
                    seed: clip_seed(self.seed, index as u64),
                });
            }
        }
        Ok(out)
    }

    /// Synthesise one planned clip with its noise.
    pub fn render(&self, plan: &ClipPlan) -> Result<MultiChannelClip> {
        let geometry = self.geometry()?;
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let nyquist = self.sample_rate / 2.0;
        let signal = match plan.kind {
            SourceKind::MultiTone => SourceSignal::MultiTone(multi_tone(&mut rng, nyquist)),
            SourceKind::NoiseBurst => SourceSignal::WhiteNoiseBurst,
        };
        let source = SourceSpec::new(plan.azimuth_deg, plan.distance_m, signal, rng.gen());
        let mut clip = synthesize_clip(&geometry, &source, self.clip_duration(), self.sample_rate)?;
        if let Some(intf) = &self.interference {
            let dir = intf.directions_deg[rng.gen_range(0..intf.directions_deg.len())];
            let (lo, hi) = intf.snr_db_range;
            let snr = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let talker = SourceSpec::new(dir, intf.distance_m, SourceSignal::MultiTone(voice(&mut rng, nyquist)), 0);
            let kind = NoiseKind::Directional {
                geometry: &geometry,
                source: &talker,
            };
            clip = add_noise(&clip, snr, kind, rng.gen())?;
        }
        add_noise(&clip, self.snr_db, NoiseKind::White, rng.gen())
    }

    pub fn windows(&self, plan: &ClipPlan) -> Result<Vec<MultiChannelClip>> {
        let clip = self.render(plan)?;
        let mut w = clip_windows(&clip, self.window_s, self.stride_s)?;
        w.truncate(self.windows_per_clip);
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Counts in delay-sequence order: pair, then delay, then channel.
    pub counts: Vec<u16>,
    pub azimuth_deg: f64,
    pub split: Split,
    pub clip: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSet {
    pub n_pairs: usize,
    pub n_delays: usize,
    pub n_channels: usize,
    pub samples: Vec<Sample>,
}

impl EncodedSet {
    pub fn new(n_pairs: usize, n_delays: usize, n_channels: usize) -> Self {
        Self {
            n_pairs,
            n_delays,
            n_channels,
            samples: Vec::new(),
        }
    }

    /// Append one encoded window; its shape must match the set.
    pub fn push(&mut self, p: &MultiPairPattern, azimuth_deg: f64, split: Split, clip: usize) -> Result<()> {
        let shape = (p.n_pairs(), p.n_delays(), p.n_channels());
        if shape != (self.n_pairs, self.n_delays, self.n_channels) {
            return Err(Error::Dimension(format!(
                "pattern of {shape:?} (pairs, delays, channels), set holds {:?}",
                (self.n_pairs, self.n_delays, self.n_channels)
            )));
        }
        self.samples.push(Sample {
            counts: compact(p)?,
            azimuth_deg,
            split,
            clip,
        });
        Ok(())
    }

    pub fn input(&self, i: usize) -> Vec<f64> {
        self.samples[i].counts.iter().map(|&c| c as f64).collect()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn compact(p: &MultiPairPattern) -> Result<Vec<u16>> {
    p.delay_sequence()
        .into_iter()
        .map(|c| u16::try_from(c as u64).map_err(|_| Error::Format(format!("count {c} exceeds u16"))))
        .collect()
}

/// Render and encode every window of the dataset, clips in parallel.
pub fn encode_dataset(cfg: &DatasetConfig, enc: &EncoderConfig) -> Result<EncodedSet> {
    encode_split(cfg, enc, None)
}

/// As [`encode_dataset`], restricted to the clips of one split when given.
pub fn encode_split(cfg: &DatasetConfig, enc: &EncoderConfig, split: Option<Split>) -> Result<EncodedSet> {
    let encoder = MtpcEncoder::new(enc.clone(), cfg.sample_rate)?;
    let mut plan = cfg.plan()?;
    if let Some(split) = split {
        plan.retain(|p| p.split == split);
    }
    let per_clip = plan
        .par_iter()
        .map(|plan| {
            cfg.windows(plan)?
                .iter()
                .map(|w| {
                    Ok(Sample {
                        counts: compact(&encoder.encode(w)?)?,
                        azimuth_deg: plan.azimuth_deg,
                        split: plan.split,
                        clip: plan.index,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let n_pairs = cfg.geometry()?.pairs().len();
    Ok(EncodedSet {
        n_pairs,
        n_delays: enc.delay_lines,
        n_channels: enc.channels,
        samples: per_clip.into_iter().flatten().collect(),
    })
}
