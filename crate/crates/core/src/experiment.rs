//! Training loop and the comparative experiments built on it.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::KeyValues;
use crate::dataset::{encode_dataset, encode_split, DatasetConfig, EncodedSet, InterferenceConfig, Split};
use crate::encoder::EncoderConfig;
use crate::error::{invalid, Result};
use crate::eval::{gaussian_label, sample_error, EvalReport, DEFAULT_LABEL_SIGMA_DEG};
use crate::snn::{
    bptt_update, mse_loss, Adam, Architecture, CsnnConfig, CsnnParams, LifParams, Network, ReadoutKind, RsnnConfig,
    RsnnParams, SpikingNet,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop after this many epochs without a better validation MAE.
    pub patience: Option<usize>,
    pub label_sigma_deg: f64,
    /// Stop once the validation MAE reaches this value.
    pub target_mae_deg: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 2e-3,
            patience: Some(10),
            label_sigma_deg: DEFAULT_LABEL_SIGMA_DEG,
            target_mae_deg: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 6] = ["epochs", "batch_size", "lr", "patience", "label_sigma_deg", "target_mae_deg"];

    /// Override fields present in `kv`; other keys are ignored.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(v) = kv.parse("epochs")? {
            self.epochs = v;
        }
        if let Some(v) = kv.parse("batch_size")? {
            self.batch_size = v;
        }
        if let Some(v) = kv.parse("lr")? {
            self.lr = v;
        }
        if let Some(v) = kv.parse::<usize>("patience")? {
            self.patience = (v > 0).then_some(v);
        }
        if let Some(v) = kv.parse("label_sigma_deg")? {
            self.label_sigma_deg = v;
        }
        if let Some(v) = kv.parse::<f64>("target_mae_deg")? {
            self.target_mae_deg = (v > 0.0).then_some(v);
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("epochs", self.epochs);
        kv.insert("batch_size", self.batch_size);
        kv.insert("lr", self.lr);
        kv.insert("patience", self.patience.unwrap_or(0));
        kv.insert("label_sigma_deg", self.label_sigma_deg);
        kv.insert("target_mae_deg", self.target_mae_deg.unwrap_or(0.0));
        kv
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub mae_deg: f64,
    pub seconds: f64,
}

pub fn write_log<W: std::io::Write>(rows: &[EpochLog], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["epoch", "split", "loss", "mae_deg", "seconds"])?;
    for r in rows {
        wr.write_record([
            r.epoch.to_string(),
            r.split.name().to_string(),
            r.loss.to_string(),
            r.mae_deg.to_string(),
            format!("{:.3}", r.seconds),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Trained<M> {
    /// Parameters from the epoch with the lowest validation MAE.
    pub model: M,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub log: Vec<EpochLog>,
}

/// Outcome for one evaluated sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub label_deg: f64,
    /// `None` when the output was silent.
    pub estimate_deg: Option<f64>,
    pub error_deg: f64,
    pub loss: f64,
}

/// Score `model` on the samples `idx`, in order.
pub fn score<M: SpikingNet>(model: &M, set: &EncodedSet, idx: &[usize], sigma: f64) -> Result<Vec<Scored>> {
    idx.par_iter()
        .map(|&i| {
            let s = &set.samples[i];
            let rates = model.forward(&set.input(i))?.normalized();
            let label = gaussian_label(s.azimuth_deg, sigma)?;
            let (estimate_deg, error_deg) = sample_error(&rates, s.azimuth_deg)?;
            Ok(Scored {
                label_deg: s.azimuth_deg,
                estimate_deg,
                error_deg,
                loss: mse_loss(&rates, &label.values)?,
            })
        })
        .collect()
}

/// Mean loss and error report of `model` on the samples `idx`.
pub fn evaluate<M: SpikingNet>(model: &M, set: &EncodedSet, idx: &[usize], sigma: f64) -> Result<(f64, EvalReport)> {
    if idx.is_empty() {
        return Err(invalid("evaluation over zero samples"));
    }
    let scored = score(model, set, idx, sigma)?;
    let report = report_of(&scored, 5.0, KeyValues::default())?;
    let loss = scored.iter().map(|s| s.loss).sum::<f64>() / idx.len() as f64;
    Ok((loss, report))
}

pub fn report_of(scored: &[Scored], bin_width_deg: f64, config: KeyValues) -> Result<EvalReport> {
    let errors: Vec<(f64, f64)> = scored.iter().map(|s| (s.label_deg, s.error_deg)).collect();
    let silent = scored.iter().filter(|s| s.estimate_deg.is_none()).count();
    EvalReport::from_errors(&errors, silent, bin_width_deg, config)
}

/// Minibatch training with validation-based model selection. Batches are
/// reshuffled every epoch from `cfg.seed`.
pub fn fit<M: SpikingNet>(model: M, set: &EncodedSet, cfg: &TrainConfig) -> Result<Trained<M>> {
    fit_with(model, set, cfg, |_| {})
}

/// [`fit`] with a callback receiving each log row as it is produced.
pub fn fit_with<M: SpikingNet>(
    mut model: M,
    set: &EncodedSet,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&EpochLog),
) -> Result<Trained<M>> {
    let train = set.indices(Split::Train);
    let val = set.indices(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(invalid("training needs both training and validation samples"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let inputs: Vec<Vec<f64>> = train.iter().map(|&i| set.input(i)).collect();
    let labels: Vec<Vec<f64>> = train
        .iter()
        .map(|&i| gaussian_label(set.samples[i].azimuth_deg, cfg.label_sigma_deg).map(|l| l.values))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    // Training MAE is tracked on a fixed subset to keep epochs cheap.
    let monitor: Vec<usize> = train.iter().step_by(train.len().div_ceil(500)).copied().collect();
    let start = Instant::now();
    let mut log = Vec::new();
    let mut best = (model.clone(), 0, f64::INFINITY);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], &[f64])> = chunk.iter().map(|&k| (&inputs[k][..], &labels[k][..])).collect();
            total += bptt_update(&batch, &mut model, &mut opt, cfg.lr)? * chunk.len() as f64;
        }
        let (_, train_rep) = evaluate(&model, set, &monitor, cfg.label_sigma_deg)?;
        let row = EpochLog {
            epoch,
            split: Split::Train,
            loss: total / train.len() as f64,
            mae_deg: train_rep.overall_mae_deg,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_log(&row);
        log.push(row);
        let (val_loss, rep) = evaluate(&model, set, &val, cfg.label_sigma_deg)?;
        let row = EpochLog {
            epoch,
            split: Split::Val,
            loss: val_loss,
            mae_deg: rep.overall_mae_deg,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_log(&row);
        log.push(row);
        if rep.overall_mae_deg < best.2 {
            best = (model.clone(), epoch, rep.overall_mae_deg);
        }
        if cfg.target_mae_deg.is_some_and(|t| best.2 <= t) {
            break;
        }
        if cfg.patience.is_some_and(|p| epoch - best.1 >= p) {
            break;
        }
    }
    Ok(Trained {
        model: best.0,
        best_epoch: best.1,
        best_val_mae: best.2,
        log,
    })
}

/// Backend choice and its hyperparameters as flat settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub rsnn: RsnnConfig,
    pub csnn: CsnnConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Rsnn,
            rsnn: RsnnConfig::default(),
            csnn: CsnnConfig::default(),
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 11] = [
        "arch",
        "n_hidden",
        "tau_m",
        "readout_tau_m",
        "threshold",
        "refractory_steps",
        "readout",
        "hidden_bias_init",
        "csnn_steps",
        "csnn_fc",
        "csnn_tau_m",
    ];

    /// Override fields present in `kv`; other keys are ignored. `threshold`,
    /// `refractory_steps` and `readout` apply to both backends.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(v) = kv.parse("arch")? {
            self.architecture = v;
        }
        if let Some(v) = kv.parse("n_hidden")? {
            self.rsnn.n_hidden = v;
        }
        if let Some(v) = kv.parse("tau_m")? {
            self.rsnn.hidden.tau_m = v;
        }
        if let Some(v) = kv.parse("readout_tau_m")? {
            self.rsnn.readout.tau_m = v;
        }
        if let Some(v) = kv.parse::<f64>("threshold")? {
            for p in self.lif_params_mut() {
                p.threshold = v;
            }
        }
        if let Some(v) = kv.parse::<u32>("refractory_steps")? {
            for p in self.lif_params_mut() {
                p.refractory_steps = v;
            }
        }
        if let Some(v) = kv.parse::<ReadoutKind>("readout")? {
            self.rsnn.readout_kind = v;
            self.csnn.readout_kind = v;
        }
        if let Some(v) = kv.parse("hidden_bias_init")? {
            self.rsnn.hidden_bias_init = v;
        }
        if let Some(v) = kv.parse("csnn_steps")? {
            self.csnn.steps = v;
        }
        if let Some(v) = kv.parse("csnn_fc")? {
            self.csnn.fc = v;
        }
        if let Some(v) = kv.parse::<f64>("csnn_tau_m")? {
            self.csnn.lif.tau_m = v;
            self.csnn.readout.tau_m = v;
        }
        for p in self.lif_params_mut() {
            p.validate()?;
        }
        Ok(())
    }

    fn lif_params_mut(&mut self) -> [&mut LifParams; 4] {
        [
            &mut self.rsnn.hidden,
            &mut self.rsnn.readout,
            &mut self.csnn.lif,
            &mut self.csnn.readout,
        ]
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("arch", self.architecture);
        kv.insert("n_hidden", self.rsnn.n_hidden);
        kv.insert("tau_m", self.rsnn.hidden.tau_m);
        kv.insert("readout_tau_m", self.rsnn.readout.tau_m);
        kv.insert("threshold", self.rsnn.hidden.threshold);
        kv.insert("refractory_steps", self.rsnn.hidden.refractory_steps);
        kv.insert("readout", self.rsnn.readout_kind);
        kv.insert("hidden_bias_init", self.rsnn.hidden_bias_init);
        kv.insert("csnn_steps", self.csnn.steps);
        kv.insert("csnn_fc", self.csnn.fc);
        kv.insert("csnn_tau_m", self.csnn.lif.tau_m);
        kv
    }
}

/// A fresh network of the configured backend, input scaling fitted to the
/// training split.
pub fn init_model(set: &EncodedSet, cfg: &ModelConfig, seed: u64) -> Result<Network> {
    match cfg.architecture {
        Architecture::Rsnn => init_rsnn(set, &cfg.rsnn, seed).map(Network::Rsnn),
        Architecture::Csnn => init_csnn(set, &cfg.csnn, seed).map(Network::Csnn),
    }
}

/// A fresh convolutional network with `input_norm` fitted to the training split.
pub fn init_csnn(set: &EncodedSet, cfg: &CsnnConfig, seed: u64) -> Result<CsnnParams> {
    let cfg = CsnnConfig {
        n_pairs: set.n_pairs,
        n_delays: set.n_delays,
        n_channels: set.n_channels,
        ..cfg.clone()
    };
    let mut model = CsnnParams::init(&cfg, seed)?;
    let sample: Vec<Vec<f64>> = set.indices(Split::Train).iter().step_by(7).map(|&i| set.input(i)).collect();
    model.calibrate_input_norm(&sample);
    Ok(model)
}

/// A fresh recurrent network with its input gain fitted to the training split.
pub fn init_rsnn(set: &EncodedSet, cfg: &RsnnConfig, seed: u64) -> Result<RsnnParams> {
    let cfg = RsnnConfig {
        n_in: set.n_channels,
        ..cfg.clone()
    };
    let mut model = RsnnParams::init(&cfg, seed)?;
    let sample: Vec<Vec<f64>> = set.indices(Split::Train).iter().step_by(7).map(|&i| set.input(i)).collect();
    model.calibrate_input_scale(&sample)?;
    Ok(model)
}

/// Test-split MAE of an RSNN trained on `set`.
pub fn train_and_test_rsnn(set: &EncodedSet, rsnn: &RsnnConfig, train: &TrainConfig) -> Result<(Trained<RsnnParams>, EvalReport)> {
    let model = init_rsnn(set, rsnn, train.seed)?;
    let trained = fit(model, set, train)?;
    let (_, report) = evaluate(&trained.model, set, &set.indices(Split::Test), train.label_sigma_deg)?;
    Ok((trained, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: usize,
    pub seed: u64,
    pub test_mae_deg: f64,
}

/// Train and test one RSNN per `(count, seed)` with `delay_lines = count`.
pub fn run_sweep_delay_lines(
    data: &DatasetConfig,
    enc: &EncoderConfig,
    counts: &[usize],
    seeds: &[u64],
    rsnn: &RsnnConfig,
    train: &TrainConfig,
) -> Result<Vec<SweepPoint>> {
    run_sweep(data, enc, counts, seeds, rsnn, train, |e, v| e.delay_lines = v)
}

/// As [`run_sweep_delay_lines`], varying the number of frequency channels.
pub fn run_sweep_channels(
    data: &DatasetConfig,
    enc: &EncoderConfig,
    counts: &[usize],
    seeds: &[u64],
    rsnn: &RsnnConfig,
    train: &TrainConfig,
) -> Result<Vec<SweepPoint>> {
    run_sweep(data, enc, counts, seeds, rsnn, train, |e, v| e.channels = v)
}

fn run_sweep(
    data: &DatasetConfig,
    enc: &EncoderConfig,
    values: &[usize],
    seeds: &[u64],
    rsnn: &RsnnConfig,
    train: &TrainConfig,
    set_value: impl Fn(&mut EncoderConfig, usize),
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::new();
    for &value in values {
        let mut e = enc.clone();
        set_value(&mut e, value);
        let set = encode_dataset(data, &e)?;
        for &seed in seeds {
            let t = TrainConfig { seed, ..train.clone() };
            let (_, report) = train_and_test_rsnn(&set, rsnn, &t)?;
            out.push(SweepPoint {
                value,
                seed,
                test_mae_deg: report.overall_mae_deg,
            });
        }
    }
    Ok(out)
}

/// Mean test MAE over seeds for one sweep value.
pub fn sweep_mean(points: &[SweepPoint], value: usize) -> Option<f64> {
    let v: Vec<f64> = points.iter().filter(|p| p.value == value).map(|p| p.test_mae_deg).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEvalPoint {
    pub seed: u64,
    /// Trained on clean data, tested on the interference test split.
    pub clean_trained_mae_deg: f64,
    /// Trained and tested with interference.
    pub condition_trained_mae_deg: f64,
    /// Clean-trained model on the clean test split.
    pub clean_test_mae_deg: f64,
}

/// Compare models trained with and without directional interference, both
/// tested under interference. The clean dataset is `data` with
/// interference removed; the condition dataset uses `interference`.
pub fn run_noise_eval(
    data: &DatasetConfig,
    interference: &InterferenceConfig,
    enc: &EncoderConfig,
    seeds: &[u64],
    rsnn: &RsnnConfig,
    train: &TrainConfig,
) -> Result<Vec<NoiseEvalPoint>> {
    let clean_cfg = DatasetConfig {
        interference: None,
        ..data.clone()
    };
    let noisy_cfg = DatasetConfig {
        interference: Some(interference.clone()),
        ..data.clone()
    };
    let clean = encode_dataset(&clean_cfg, enc)?;
    let noisy = encode_dataset(&noisy_cfg, enc)?;
    let test = noisy.indices(Split::Test);
    let mut out = Vec::new();
    for &seed in seeds {
        let t = TrainConfig { seed, ..train.clone() };
        let (clean_model, clean_report) = train_and_test_rsnn(&clean, rsnn, &t)?;
        let (_, cross) = evaluate(&clean_model.model, &noisy, &test, t.label_sigma_deg)?;
        let (_, cond) = train_and_test_rsnn(&noisy, rsnn, &t)?;
        out.push(NoiseEvalPoint {
            seed,
            clean_trained_mae_deg: cross.overall_mae_deg,
            condition_trained_mae_deg: cond.overall_mae_deg,
            clean_test_mae_deg: clean_report.overall_mae_deg,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnrPoint {
    pub snr_db: f64,
    pub test_mae_deg: f64,
}

/// Test-split MAE of `model` with the white background noise of `data`
/// replaced by each level of `snr_grid`. `f64::INFINITY` means no added noise.
pub fn mae_vs_snr<M: SpikingNet>(
    model: &M,
    data: &DatasetConfig,
    enc: &EncoderConfig,
    snr_grid: &[f64],
    sigma: f64,
) -> Result<Vec<SnrPoint>> {
    snr_grid
        .iter()
        .map(|&snr_db| {
            let cfg = DatasetConfig { snr_db, ..data.clone() };
            let set = encode_split(&cfg, enc, Some(Split::Test))?;
            let idx: Vec<usize> = (0..set.len()).collect();
            let (_, report) = evaluate(model, &set, &idx, sigma)?;
            Ok(SnrPoint {
                snr_db,
                test_mae_deg: report.overall_mae_deg,
            })
        })
        .collect()
}
