//! Command-line front end.
//!
//! Settings merge in the order built-in defaults, `--config` file, `--set
//! key=value` flags, `--seed`. Unknown keys are rejected. Every command writes
//! the merged settings to `config.txt` in its output directory; that file can
//! be passed back as `--config` to repeat the run.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::baseline::gcc_phat;
use crate::config::KeyValues;
use crate::dataset::{clip_seed, ClipPlan, DatasetConfig, EncodedSet, InterferenceConfig, SourceKind, Split};
use crate::encoder::{EncoderConfig, MtpcEncoder, MultiPairPattern};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_LABEL_SIGMA_DEG;
use crate::experiment::{
    fit_with, init_model, mae_vs_snr, report_of, run_noise_eval, run_sweep_channels, run_sweep_delay_lines, score,
    sweep_mean, train_and_test_rsnn, write_log, ModelConfig, TrainConfig,
};
use crate::sim::{clip_windows, MicArrayGeometry, DEFAULT_ARRAY_SIDE_M, DEFAULT_SAMPLE_RATE};
use crate::snn::{read_checkpoint, write_checkpoint, Architecture, Network};
use crate::wav::{read_manifest, read_wav, write_manifest, write_wav, ManifestRow};

#[derive(Debug, Parser)]
#[command(name = "mtpc", version, about = "Phase-coded sound localisation with spiking networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Settings file of `key=value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run seed; overrides `seed` from the settings.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Override one setting; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Render a WAV dataset with a manifest.
    Simulate,
    /// Encode every window of a dataset into `.mtpc` pattern files.
    Encode,
    /// Train a network on encoded patterns.
    Train,
    /// Evaluate a checkpoint on encoded patterns.
    Eval,
    /// Delay-line, channel, noise and conditional-training experiments.
    Sweep,
    /// GCC-PHAT delays for every microphone pair.
    Baseline,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Encode => "encode",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::Baseline => "baseline",
        }
    }

    fn defaults(self) -> KeyValues {
        let mut kv = KeyValues::default();
        match self {
            Command::Simulate => {
                kv.insert("side_m", DEFAULT_ARRAY_SIDE_M);
                kv.insert("sample_rate", DEFAULT_SAMPLE_RATE);
                kv.insert("azimuth_step_deg", 5);
                kv.insert("distances_m", "1.0,1.5");
                kv.insert("n_clips", 4);
                kv.insert("val_clips", 1);
                kv.insert("test_clips", 1);
                kv.insert("clip_s", 1.0);
                kv.insert("snr_db", 20.0);
                kv.insert("source", "mixed");
                kv.insert("interference", false);
            }
            Command::Encode => {
                kv.insert("input", "data");
                kv.insert("window_s", 0.170);
                kv.insert("stride_s", 0.085);
                kv.merge(&EncoderConfig::default().to_key_values());
            }
            Command::Train => {
                kv.insert("input", "encoded");
                kv.merge(&TrainConfig::default().to_key_values());
                kv.merge(&ModelConfig::default().to_key_values());
            }
            Command::Eval => {
                kv.insert("input", "encoded");
                kv.insert("checkpoint", "model.mtpw");
                kv.insert("split", "test");
                kv.insert("label_sigma_deg", DEFAULT_LABEL_SIGMA_DEG);
                kv.insert("bin_width_deg", 5.0);
            }
            Command::Sweep => {
                kv.insert("experiment", "delay_lines");
                kv.insert("values", "11,21,31,41,51,61");
                kv.insert("seeds", "1,2,3");
                kv.merge(&DatasetConfig::default().to_key_values());
                kv.merge(&EncoderConfig::default().to_key_values());
                kv.merge(&TrainConfig::default().to_key_values());
                kv.merge(&ModelConfig::default().to_key_values());
            }
            Command::Baseline => {
                kv.insert("input", "data");
                kv.insert("max_lag_s", 0.001);
                kv.insert("window_s", 0.0);
            }
        }
        kv.insert("seed", 0);
        kv
    }
}

/// Process exit status for an error: 1 usage, 2 data, 3 numerical failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

/// Parse `args` (program name first), run the command and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| execute(&cli)),
        Err(e) => Err(Error::Config(format!("thread pool: {e}"))),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn settings(cli: &Cli) -> Result<KeyValues> {
    let mut kv = cli.command.defaults();
    let allowed: Vec<String> = kv.keys().map(str::to_string).collect();
    let allowed: Vec<&str> = allowed.iter().map(String::as_str).collect();
    if let Some(path) = &cli.config {
        let file = KeyValues::load(path)?;
        file.reject_unknown(&allowed)?;
        kv.merge(&file);
    }
    for item in &cli.set {
        let flag: KeyValues = item.parse()?;
        flag.reject_unknown(&allowed)?;
        kv.merge(&flag);
    }
    if let Some(seed) = cli.seed {
        kv.insert("seed", seed);
    }
    Ok(kv)
}

fn execute(cli: &Cli) -> Result<()> {
    let kv = settings(cli)?;
    fs::create_dir_all(&cli.out)?;
    fs::write(
        cli.out.join("config.txt"),
        format!("# mtpc {}\n{kv}", cli.command.name()),
    )?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Simulate => simulate(&kv, out),
        Command::Encode => encode(&kv, out),
        Command::Train => train(&kv, out),
        Command::Eval => eval(&kv, out),
        Command::Sweep => sweep(&kv, out),
        Command::Baseline => baseline(&kv, out),
    }
}

fn required<T: FromStr>(kv: &KeyValues, key: &str) -> Result<T> {
    kv.parse(key)?
        .ok_or_else(|| Error::Config(format!("missing setting {key:?}")))
}

fn list<T: FromStr>(kv: &KeyValues, key: &str) -> Result<Vec<T>> {
    let raw = kv.get(key).unwrap_or("");
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
        })
        .collect()
}

fn path(kv: &KeyValues, key: &str) -> PathBuf {
    PathBuf::from(kv.get(key).unwrap_or(""))
}

fn simulate(kv: &KeyValues, out: &Path) -> Result<()> {
    let seed: u64 = required(kv, "seed")?;
    let step: f64 = required(kv, "azimuth_step_deg")?;
    if !(step > 0.0 && step <= 360.0) {
        return Err(Error::Config(format!("azimuth_step_deg must be in (0, 360], got {step}")));
    }
    let distances: Vec<f64> = list(kv, "distances_m")?;
    if distances.is_empty() || distances.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::Config("distances_m must list positive distances".into()));
    }
    let n_clips: usize = required(kv, "n_clips")?;
    if n_clips == 0 {
        return Err(Error::Config("n_clips must be positive".into()));
    }
    // Held-out clips shrink so that at least one training clip remains.
    let n_test = required::<usize>(kv, "test_clips")?.min(n_clips - 1);
    let n_val = required::<usize>(kv, "val_clips")?.min(n_clips - 1 - n_test);
    let n_train = n_clips - n_val - n_test;
    let source = kv.get("source").unwrap_or("mixed");
    let kind_of = |k: usize| match source {
        "multitone" => Ok(SourceKind::MultiTone),
        "noise" => Ok(SourceKind::NoiseBurst),
        "mixed" => Ok(if k % 2 == 0 { SourceKind::MultiTone } else { SourceKind::NoiseBurst }),
        other => Err(Error::Config(format!("unknown source {other:?}"))),
    };
    let clip_s: f64 = required(kv, "clip_s")?;
    let data = DatasetConfig {
        side_m: required(kv, "side_m")?,
        sample_rate: required(kv, "sample_rate")?,
        window_s: clip_s,
        stride_s: clip_s,
        windows_per_clip: 1,
        snr_db: required(kv, "snr_db")?,
        interference: required::<bool>(kv, "interference")?.then(InterferenceConfig::default),
        seed,
        ..DatasetConfig::default()
    };
    MicArrayGeometry::square(data.side_m)?;
    let n_az = (360.0 / step).round() as usize;
    let mut plans = Vec::new();
    let mut dirs = Vec::new();
    for a in 0..n_az {
        let azimuth_deg = a as f64 * step;
        if azimuth_deg >= 360.0 {
            break;
        }
        for &distance_m in &distances {
            let dir = format!("az{azimuth_deg:05.1}_d{distance_m:.2}");
            for k in 0..n_clips {
                let split = if k < n_train {
                    Split::Train
                } else if k < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
                let index = plans.len();
                plans.push(ClipPlan {
                    index,
                    azimuth_deg,
                    distance_m,
                    kind: kind_of(k + a)?,
                    split,
                    seed: clip_seed(seed, index as u64),
                });
                dirs.push(dir.clone());
            }
        }
    }
    for dir in dirs.iter() {
        fs::create_dir_all(out.join(dir))?;
    }
    let rows: Vec<ManifestRow> = plans
        .par_iter()
        .zip(&dirs)
        .map(|(plan, dir)| {
            let clip = data.render(plan)?;
            let rel = format!("{dir}/clip{:03}.wav", plan.index % n_clips);
            write_wav(&out.join(&rel), &clip)?;
            Ok(ManifestRow {
                path: rel,
                azimuth_deg: plan.azimuth_deg,
                distance_m: plan.distance_m,
                snr_db: data.snr_db,
                noise_kind: if data.interference.is_some() { "white+voice" } else { "white" }.into(),
                split: plan.split.name().into(),
            })
        })
        .collect::<Result<_>>()?;
    write_manifest(&out.join("manifest.csv"), &rows)?;
    eprintln!("wrote {} clips to {}", rows.len(), out.display());
    Ok(())
}

/// Index of an encoded pattern directory.
const PATTERN_INDEX: &str = "patterns.csv";

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct PatternRow {
    path: String,
    azimuth_deg: f64,
    split: String,
    clip: usize,
}

fn encode(kv: &KeyValues, out: &Path) -> Result<()> {
    let input = path(kv, "input");
    let rows = read_manifest(&input.join("manifest.csv"))?;
    let enc = EncoderConfig::from_key_values(&key_subset(kv, &EncoderConfig::KEYS))?;
    let window_s: f64 = required(kv, "window_s")?;
    let stride_s: f64 = required(kv, "stride_s")?;
    fs::create_dir_all(out.join("patterns"))?;
    let results: Vec<std::result::Result<Vec<PatternRow>, String>> = rows
        .par_iter()
        .enumerate()
        .map(|(clip, row)| {
            encode_file(&input, row, clip, &enc, window_s, stride_s, out).map_err(|e| e.to_string())
        })
        .collect();
    let mut index = csv::Writer::from_path(out.join(PATTERN_INDEX))?;
    let mut errors = csv::Writer::from_path(out.join("errors.csv"))?;
    errors.write_record(["path", "error"])?;
    let mut written = 0;
    let mut failed = 0;
    for (row, r) in rows.iter().zip(results) {
        match r {
            Ok(patterns) => {
                for p in patterns {
                    index.serialize(&p)?;
                    written += 1;
                }
            }
            Err(msg) => {
                eprintln!("skipping {}: {msg}", row.path);
                errors.write_record([row.path.as_str(), msg.as_str()])?;
                failed += 1;
            }
        }
    }
    if written == 0 {
        index.write_record(["path", "azimuth_deg", "split", "clip"])?;
    }
    index.flush()?;
    errors.flush()?;
    eprintln!("wrote {written} patterns, {failed} files failed");
    Ok(())
}

fn key_subset(kv: &KeyValues, keys: &[&str]) -> KeyValues {
    let mut sub = KeyValues::default();
    for (k, v) in kv.iter().filter(|(k, _)| keys.contains(k)) {
        sub.insert(k, v);
    }
    sub
}

fn encode_file(
    input: &Path,
    row: &ManifestRow,
    clip: usize,
    enc: &EncoderConfig,
    window_s: f64,
    stride_s: f64,
    out: &Path,
) -> Result<Vec<PatternRow>> {
    let audio = read_wav(&input.join(&row.path))?;
    let encoder = MtpcEncoder::new(enc.clone(), audio.sample_rate)?;
    let stem = row.path.trim_end_matches(".wav").replace(['/', '\\'], "_");
    let mut written = Vec::new();
    for (w, window) in clip_windows(&audio, window_s, stride_s)?.iter().enumerate() {
        let mut pattern = encoder.encode(window)?;
        pattern.label_azimuth = Some(row.azimuth_deg);
        let rel = format!("patterns/{stem}_w{w:03}.mtpc");
        pattern.write_to(BufWriter::new(File::create(out.join(&rel))?))?;
        written.push(PatternRow {
            path: rel,
            azimuth_deg: row.azimuth_deg,
            split: row.split.clone(),
            clip,
        });
    }
    Ok(written)
}

/// Load the patterns listed in `dir/patterns.csv`.
pub fn load_patterns(dir: &Path) -> Result<EncodedSet> {
    let mut reader = csv::Reader::from_path(dir.join(PATTERN_INDEX))?;
    let mut set: Option<EncodedSet> = None;
    for row in reader.deserialize::<PatternRow>() {
        let row = row?;
        let p = MultiPairPattern::read_from(std::io::BufReader::new(File::open(dir.join(&row.path))?))?;
        let set = set.get_or_insert_with(|| EncodedSet::new(p.n_pairs(), p.n_delays(), p.n_channels()));
        set.push(&p, row.azimuth_deg, row.split.parse()?, row.clip)?;
    }
    set.ok_or_else(|| Error::Format(format!("{} lists no patterns", dir.join(PATTERN_INDEX).display())))
}

fn train_config(kv: &KeyValues) -> Result<TrainConfig> {
    let mut cfg = TrainConfig {
        seed: required(kv, "seed")?,
        ..TrainConfig::default()
    };
    cfg.apply(kv)?;
    Ok(cfg)
}

fn model_config(kv: &KeyValues) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    cfg.apply(kv)?;
    Ok(cfg)
}

fn print_log_row(r: &crate::experiment::EpochLog) {
    eprintln!(
        "epoch {:3} {:5} loss {:.5} mae {:6.2} ({:.0} s)",
        r.epoch,
        r.split.name(),
        r.loss,
        r.mae_deg,
        r.seconds
    );
}

fn train(kv: &KeyValues, out: &Path) -> Result<()> {
    let train = train_config(kv)?;
    let model_cfg = model_config(kv)?;
    let set = load_patterns(&path(kv, "input"))?;
    let model = init_model(&set, &model_cfg, train.seed)?;
    let trained = fit_with(model, &set, &train, print_log_row)?;
    write_log(&trained.log, File::create(out.join("train_log.csv"))?)?;
    write_checkpoint(BufWriter::new(File::create(out.join("model.mtpw"))?), &trained.model.to_checkpoint())?;
    eprintln!(
        "best validation MAE {:.2} deg at epoch {}",
        trained.best_val_mae, trained.best_epoch
    );
    Ok(())
}

/// Read a checkpoint file into a network.
pub fn load_network(path: &Path) -> Result<Network> {
    let file = File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Network::from_checkpoint(&read_checkpoint(std::io::BufReader::new(file))?)
}

fn eval(kv: &KeyValues, out: &Path) -> Result<()> {
    let split: Split = kv
        .get("split")
        .unwrap_or("test")
        .parse()
        .map_err(|e: Error| Error::Config(e.to_string()))?;
    let sigma: f64 = required(kv, "label_sigma_deg")?;
    let bin_width: f64 = required(kv, "bin_width_deg")?;
    let net = load_network(&path(kv, "checkpoint"))?;
    let set = load_patterns(&path(kv, "input"))?;
    let idx = set.indices(split);
    if idx.is_empty() {
        return Err(Error::Format(format!("no {} samples", split.name())));
    }
    let scored = score(&net, &set, &idx, sigma)?;
    let report = report_of(&scored, bin_width, kv.clone())?;
    report.write_csv(File::create(out.join("eval.csv"))?)?;
    fs::write(out.join("summary.txt"), report.summary())?;
    let mut w = csv::Writer::from_path(out.join("predictions.csv"))?;
    w.write_record(["label_deg", "estimate_deg", "error_deg"])?;
    for s in &scored {
        w.write_record([
            s.label_deg.to_string(),
            s.estimate_deg.map_or_else(String::new, |e| e.to_string()),
            s.error_deg.to_string(),
        ])?;
    }
    w.flush()?;
    eprintln!("{} MAE {:.2} deg over {} samples", split.name(), report.overall_mae_deg, report.n_samples);
    Ok(())
}

fn sweep(kv: &KeyValues, out: &Path) -> Result<()> {
    let mut data = DatasetConfig::default();
    data.apply(kv)?;
    let enc = EncoderConfig::from_key_values(&key_subset(kv, &EncoderConfig::KEYS))?;
    let train = train_config(kv)?;
    let model = model_config(kv)?;
    if model.architecture != Architecture::Rsnn {
        return Err(Error::Config("sweeps train the recurrent backend only (arch=rsnn)".into()));
    }
    let seeds: Vec<u64> = list(kv, "seeds")?;
    if seeds.is_empty() {
        return Err(Error::Config("seeds must list at least one seed".into()));
    }
    let experiment = kv.get("experiment").unwrap_or("");
    match experiment {
        "delay_lines" | "channels" => {
            let values: Vec<usize> = list(kv, "values")?;
            let points = if experiment == "delay_lines" {
                run_sweep_delay_lines(&data, &enc, &values, &seeds, &model.rsnn, &train)?
            } else {
                run_sweep_channels(&data, &enc, &values, &seeds, &model.rsnn, &train)?
            };
            let mut runs = csv::Writer::from_path(out.join("sweep_runs.csv"))?;
            runs.write_record([experiment, "seed", "mae_deg"])?;
            for p in &points {
                runs.write_record([p.value.to_string(), p.seed.to_string(), p.test_mae_deg.to_string()])?;
            }
            runs.flush()?;
            let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
            w.write_record([experiment, "n_seeds", "mae_deg"])?;
            for &v in &values {
                let mean = sweep_mean(&points, v).unwrap_or(f64::NAN);
                w.write_record([v.to_string(), seeds.len().to_string(), mean.to_string()])?;
            }
            w.flush()?;
        }
        "snr" => {
            let grid: Vec<f64> = list(kv, "values")?;
            let set = crate::dataset::encode_dataset(&data, &enc)?;
            let mut w = csv::Writer::from_path(out.join("snr.csv"))?;
            w.write_record(["seed", "snr_db", "mae_deg"])?;
            for &seed in &seeds {
                let t = TrainConfig { seed, ..train.clone() };
                let (trained, _) = train_and_test_rsnn(&set, &model.rsnn, &t)?;
                for p in mae_vs_snr(&trained.model, &data, &enc, &grid, t.label_sigma_deg)? {
                    w.write_record([seed.to_string(), p.snr_db.to_string(), p.test_mae_deg.to_string()])?;
                }
            }
            w.flush()?;
        }
        "conditional" => {
            let points = run_noise_eval(&data, &InterferenceConfig::default(), &enc, &seeds, &model.rsnn, &train)?;
            let mut w = csv::Writer::from_path(out.join("conditional.csv"))?;
            w.write_record(["seed", "clean_test_mae_deg", "clean_trained_mae_deg", "condition_trained_mae_deg"])?;
            for p in &points {
                w.write_record([
                    p.seed.to_string(),
                    p.clean_test_mae_deg.to_string(),
                    p.clean_trained_mae_deg.to_string(),
                    p.condition_trained_mae_deg.to_string(),
                ])?;
            }
            w.flush()?;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown experiment {other:?} (delay_lines, channels, snr, conditional)"
            )))
        }
    }
    eprintln!("sweep {experiment} done");
    Ok(())
}

/// Pairwise GCC-PHAT rows for one clip: `delay_s` is the arrival time at the
/// pair's first microphone minus the second.
pub fn baseline_rows(clip: &crate::sim::MultiChannelClip, max_lag_s: f64) -> Result<Vec<(String, f64, f64)>> {
    crate::sim::all_pairs(clip.n_channels())
        .into_iter()
        .map(|(i, j)| {
            let e = gcc_phat(&clip.samples[j], &clip.samples[i], clip.sample_rate, max_lag_s)?;
            Ok((format!("{i}-{j}"), e.delay, e.confidence))
        })
        .collect()
}

fn write_baseline(path: &Path, rows: &[(String, f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["pair", "delay_s", "confidence"])?;
    for (pair, delay, conf) in rows {
        w.write_record([pair.clone(), delay.to_string(), conf.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn baseline(kv: &KeyValues, out: &Path) -> Result<()> {
    let input = path(kv, "input");
    let max_lag_s: f64 = required(kv, "max_lag_s")?;
    let window_s: f64 = required(kv, "window_s")?;
    let load = |p: &Path| -> Result<crate::sim::MultiChannelClip> {
        let clip = read_wav(p)?;
        if window_s > 0.0 {
            clip_windows(&clip, window_s, window_s)?
                .into_iter()
                .next()
                .ok_or_else(|| Error::Format(format!("{} is shorter than one window", p.display())))
        } else {
            Ok(clip)
        }
    };
    if input.extension().is_some_and(|e| e == "wav") {
        return write_baseline(&out.join("baseline.csv"), &baseline_rows(&load(&input)?, max_lag_s)?);
    }
    let rows = read_manifest(&input.join("manifest.csv"))?;
    fs::create_dir_all(out.join("baseline"))?;
    rows.par_iter().try_for_each(|row| {
        let stem = row.path.trim_end_matches(".wav").replace(['/', '\\'], "_");
        let pairs = baseline_rows(&load(&input.join(&row.path))?, max_lag_s)?;
        write_baseline(&out.join("baseline").join(format!("{stem}.csv")), &pairs)
    })?;
    eprintln!("wrote GCC-PHAT delays for {} clips", rows.len());
    Ok(())
}
