//! 16-bit PCM multichannel WAV files and the dataset manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::sim::MultiChannelClip;

pub fn write_wav(path: &Path, clip: &MultiChannelClip) -> Result<()> {
    let rate = clip.sample_rate.round();
    if (rate - clip.sample_rate).abs() > 1e-9 || rate > u32::MAX as f64 {
        return Err(invalid(format!("sample rate {} is not a whole number of Hz", clip.sample_rate)));
    }
    let channels = u16::try_from(clip.n_channels()).map_err(|_| invalid("too many channels for WAV"))?;
    if channels == 0 {
        return Err(invalid("cannot write a clip without channels"));
    }
    let spec = hound::WavSpec {
        channels,
        sample_rate: rate as u32,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::new(BufWriter::new(File::create(path)?), spec)?;
    for i in 0..clip.len() {
        for ch in &clip.samples {
            writer.write_sample(to_pcm16(ch[i]))?;
        }
    }
    writer.finalize()?;
    Ok(())
}

pub fn to_pcm16(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16
}

pub fn read_wav(path: &Path) -> Result<MultiChannelClip> {
    let mut reader = hound::WavReader::new(BufReader::new(File::open(path)?))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: expected 16-bit PCM, found {} bits {:?}",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let n_ch = spec.channels as usize;
    let mut samples = vec![Vec::with_capacity(reader.len() as usize / n_ch.max(1)); n_ch];
    for (i, s) in reader.samples::<i16>().enumerate() {
        samples[i % n_ch].push(s? as f64 / i16::MAX as f64);
    }
    MultiChannelClip::new(spec.sample_rate as f64, samples, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub azimuth_deg: f64,
    pub distance_m: f64,
    pub snr_db: f64,
    pub noise_kind: String,
    pub split: String,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["path", "azimuth_deg", "distance_m", "snr_db", "noise_kind", "split"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
