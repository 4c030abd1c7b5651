//! Azimuth labels, peak decoding and error metrics.

use std::fmt::Write as _;
use std::io::Write;

use crate::config::KeyValues;
use crate::error::{invalid, Error, Result};
use crate::snn::N_AZIMUTHS;

/// Error charged to a sample whose output is silent.
pub const NO_ACTIVITY_ERROR_DEG: f64 = 180.0;
pub const DEFAULT_LABEL_SIGMA_DEG: f64 = 8.0;

/// Circular distance in degrees, in `[0, 180]`.
pub fn angular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 360.0;
    d.min(360.0 - d)
}

/// 360-bin cyclic Gaussian with peak 1 at `azimuth`.
#[derive(Debug, Clone, PartialEq)]
pub struct AzimuthLabelCurve {
    pub center_deg: f64,
    pub sigma_deg: f64,
    pub values: Vec<f64>,
}

pub fn gaussian_label(azimuth: f64, sigma: f64) -> Result<AzimuthLabelCurve> {
    if !(0.0..360.0).contains(&azimuth) {
        return Err(invalid(format!("azimuth {azimuth} outside [0, 360)")));
    }
    if !(sigma > 0.0) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    let values = (0..N_AZIMUTHS)
        .map(|i| {
            let d = angular_distance(i as f64, azimuth);
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    Ok(AzimuthLabelCurve {
        center_deg: azimuth,
        sigma_deg: sigma,
        values,
    })
}

/// Index of the largest rate. Tied maxima resolve to the circular mean of
/// their indices, rounded to the nearest degree.
pub fn decode_peak(rates: &[f64]) -> Result<f64> {
    if rates.len() != N_AZIMUTHS {
        return Err(Error::Dimension(format!("{} rates, expected {N_AZIMUTHS}", rates.len())));
    }
    let max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_nan() {
        return Err(Error::NonFinite("output rates".into()));
    }
    if rates.iter().all(|&r| r == 0.0) {
        return Err(Error::NoActivity);
    }
    let tied: Vec<usize> = (0..N_AZIMUTHS).filter(|&i| rates[i] == max).collect();
    if tied.len() == 1 {
        return Ok(tied[0] as f64);
    }
    let (s, c) = tied.iter().fold((0.0, 0.0), |(s, c), &i| {
        let a = (i as f64).to_radians();
        (s + a.sin(), c + a.cos())
    });
    if s.hypot(c) < 1e-9 {
        // Balanced ties have no mean direction; take the first.
        return Ok(tied[0] as f64);
    }
    Ok(s.atan2(c).to_degrees().rem_euclid(360.0).round() % 360.0)
}

/// Mean circular absolute error in degrees.
pub fn mae(estimates: &[f64], labels: &[f64]) -> Result<f64> {
    if estimates.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} estimates for {} labels",
            estimates.len(),
            labels.len()
        )));
    }
    if estimates.is_empty() {
        return Err(invalid("MAE of an empty set"));
    }
    let total: f64 = estimates.iter().zip(labels).map(|(&e, &l)| angular_distance(e, l)).sum();
    Ok(total / estimates.len() as f64)
}

/// Error of one decoded output against its label, with silent outputs
/// charged [`NO_ACTIVITY_ERROR_DEG`].
pub fn sample_error(rates: &[f64], label_deg: f64) -> Result<(Option<f64>, f64)> {
    match decode_peak(rates) {
        Ok(est) => Ok((Some(est), angular_distance(est, label_deg))),
        Err(Error::NoActivity) => Ok((None, NO_ACTIVITY_ERROR_DEG)),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AzimuthBin {
    pub azimuth_deg: f64,
    pub n: usize,
    pub mae_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub bin_width_deg: f64,
    pub bins: Vec<AzimuthBin>,
    pub overall_mae_deg: f64,
    pub n_samples: usize,
    pub n_silent: usize,
    pub config: KeyValues,
}

impl EvalReport {
    /// Build from `(label, error)` pairs, binning labels to the nearest
    /// multiple of `bin_width_deg`.
    pub fn from_errors(errors: &[(f64, f64)], n_silent: usize, bin_width_deg: f64, config: KeyValues) -> Result<Self> {
        if errors.is_empty() {
            return Err(invalid("report over zero samples"));
        }
        if !(bin_width_deg > 0.0) || (360.0 / bin_width_deg).fract() != 0.0 {
            return Err(invalid(format!("bin width {bin_width_deg} must divide 360")));
        }
        let n_bins = (360.0 / bin_width_deg) as usize;
        let mut sums = vec![0.0; n_bins];
        let mut counts = vec![0usize; n_bins];
        for &(label, err) in errors {
            let b = ((label.rem_euclid(360.0) / bin_width_deg).round() as usize) % n_bins;
            sums[b] += err;
            counts[b] += 1;
        }
        let bins = (0..n_bins)
            .filter(|&b| counts[b] > 0)
            .map(|b| AzimuthBin {
                azimuth_deg: b as f64 * bin_width_deg,
                n: counts[b],
                mae_deg: sums[b] / counts[b] as f64,
            })
            .collect();
        let overall = errors.iter().map(|e| e.1).sum::<f64>() / errors.len() as f64;
        Ok(Self {
            bin_width_deg,
            bins,
            overall_mae_deg: overall,
            n_samples: errors.len(),
            n_silent,
            config,
        })
    }

    /// Sample-weighted mean of the per-azimuth MAEs.
    pub fn weighted_bin_mae(&self) -> f64 {
        let n: usize = self.bins.iter().map(|b| b.n).sum();
        self.bins.iter().map(|b| b.mae_deg * b.n as f64).sum::<f64>() / n as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["azimuth_deg", "n", "mae_deg"])?;
        for b in &self.bins {
            wr.write_record([b.azimuth_deg.to_string(), b.n.to_string(), b.mae_deg.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Flat `key=value` summary followed by the config echo.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mae_deg={}", self.overall_mae_deg);
        let _ = writeln!(s, "n_samples={}", self.n_samples);
        let _ = writeln!(s, "n_silent={}", self.n_silent);
        let _ = writeln!(s, "bin_width_deg={}", self.bin_width_deg);
        for (k, v) in self.config.iter() {
            let _ = writeln!(s, "config.{k}={v}");
        }
        s
    }
}
