use std::fs;
use std::path::Path;

use mtpc::baseline::gcc_phat;
use mtpc::cli::{load_network, load_patterns, run};
use mtpc::config::KeyValues;
use mtpc::encoder::{EncoderConfig, MtpcEncoder, MultiPairPattern};
use mtpc::eval::{gaussian_label, sample_error, EvalReport};
use mtpc::experiment::{init_model, ModelConfig};
use mtpc::sim::{all_pairs, clip_windows};
use mtpc::snn::{Network, ReadoutKind};
use mtpc::wav::{read_manifest, read_wav};

fn mtpc(args: &[&str]) -> i32 {
    run(std::iter::once("mtpc").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Four bearings, two distances, two short clips each.
fn small_dataset(dir: &Path) {
    let code = mtpc(&[
        "simulate",
        "--out",
        s(dir),
        "--set",
        "azimuth_step_deg=90",
        "--set",
        "clip_s=0.34",
        "--set",
        "n_clips=3",
    ]);
    assert_eq!(code, 0);
}

#[test]
fn default_grid_smoke_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    assert_eq!(mtpc(&["simulate", "--out", s(&out), "--set", "n_clips=1", "--set", "clip_s=0.2"]), 0);
    let dirs: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 72 * 2);
    for d in &dirs {
        assert_eq!(fs::read_dir(d).unwrap().count(), 1);
    }
    let rows = read_manifest(&out.join("manifest.csv")).unwrap();
    assert_eq!(rows.len(), 144);
    assert!(rows.iter().all(|r| r.split == "train"));
    let reader = hound::WavReader::open(out.join(&rows[17].path)).unwrap();
    assert_eq!(reader.spec().channels, 4);
    assert_eq!(reader.spec().sample_rate, 16_000);
    assert_eq!(reader.spec().bits_per_sample, 16);
    assert_eq!(reader.duration(), 3200);
}

#[test]
fn simulate_is_deterministic_and_echoes_its_config() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = tmp.path().join("run.txt");
    fs::write(&cfg, "azimuth_step_deg=120\nn_clips=5\nclip_s=0.2\n").unwrap();
    for out in [&a, &b] {
        assert_eq!(mtpc(&["simulate", "--config", s(&cfg), "--set", "n_clips=2", "--seed", "9", "--out", s(out)]), 0);
    }
    let manifest = fs::read(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest, fs::read(b.join("manifest.csv")).unwrap());
    for row in read_manifest(&a.join("manifest.csv")).unwrap() {
        assert_eq!(fs::read(a.join(&row.path)).unwrap(), fs::read(b.join(&row.path)).unwrap());
    }
    let echo = KeyValues::load(&a.join("config.txt")).unwrap();
    assert_eq!(echo.get("n_clips"), Some("2"));
    assert_eq!(echo.get("azimuth_step_deg"), Some("120"));
    assert_eq!(echo.get("seed"), Some("9"));
    // The snapshot reproduces the run.
    let c = tmp.path().join("c");
    assert_eq!(mtpc(&["simulate", "--config", s(&a.join("config.txt")), "--out", s(&c)]), 0);
    assert_eq!(manifest, fs::read(c.join("manifest.csv")).unwrap());
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(mtpc(&["simulate", "--out", s(&out), "--set", "colour=red"]), 1);
    assert_eq!(mtpc(&["simulate", "--out", s(&out), "--set", "novalue"]), 1);
    assert_eq!(mtpc(&["simulate", "--out", s(&out), "--set", "azimuth_step_deg=0"]), 1);
    assert_eq!(mtpc(&["transmogrify"]), 1);
    assert_eq!(mtpc(&["train", "--out", s(&out), "--set", "arch=mlp"]), 1);
    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "epochs=3\nwhatever=1\n").unwrap();
    assert_eq!(mtpc(&["train", "--config", s(&bad), "--out", s(&out)]), 1);
}

#[test]
fn encode_writes_readable_patterns_and_logs_bad_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    // One corrupt file in the manifest must not stop the run.
    let mut manifest = fs::read_to_string(data.join("manifest.csv")).unwrap();
    fs::write(data.join("broken.wav"), b"RIFF not really").unwrap();
    manifest.push_str("broken.wav,0.0,1.0,20.0,white,train\n");
    fs::write(data.join("manifest.csv"), manifest).unwrap();

    let enc = tmp.path().join("enc");
    assert_eq!(mtpc(&["encode", "--out", s(&enc), "--set", &format!("input={}", s(&data))]), 0);
    let errors = fs::read_to_string(enc.join("errors.csv")).unwrap();
    assert_eq!(errors.lines().count(), 2);
    assert!(errors.contains("broken.wav"));

    let set = load_patterns(&enc).unwrap();
    // 4 bearings x 2 distances x 3 clips, 3 windows of 170 ms per 340 ms clip.
    assert_eq!(set.len(), 4 * 2 * 3 * 3);
    assert_eq!((set.n_pairs, set.n_channels, set.n_delays), (6, 40, 51));

    let rows = read_manifest(&data.join("manifest.csv")).unwrap();
    let clip = read_wav(&data.join(&rows[5].path)).unwrap();
    let window = &clip_windows(&clip, 0.170, 0.085).unwrap()[1];
    let mut expected = MtpcEncoder::new(EncoderConfig::default(), 16_000.0).unwrap().encode(window).unwrap();
    expected.label_azimuth = Some(rows[5].azimuth_deg);
    let name = rows[5].path.trim_end_matches(".wav").replace('/', "_");
    let file = fs::File::open(enc.join("patterns").join(format!("{name}_w001.mtpc"))).unwrap();
    let back = MultiPairPattern::read_from(file).unwrap();
    assert_eq!(back.patterns.len(), 6);
    for (a, b) in back.patterns.iter().zip(&expected.patterns) {
        assert_eq!(a.counts, b.counts);
    }
    assert_eq!(back.label_azimuth, Some(rows[5].azimuth_deg));
}

#[test]
fn encode_output_does_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let input = format!("input={}", s(&data));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(mtpc(&["encode", "--threads", "1", "--out", s(&a), "--set", &input]), 0);
    assert_eq!(mtpc(&["encode", "--threads", "3", "--out", s(&b), "--set", &input]), 0);
    let index = fs::read(a.join("patterns.csv")).unwrap();
    assert_eq!(index, fs::read(b.join("patterns.csv")).unwrap());
    for entry in fs::read_dir(a.join("patterns")).unwrap() {
        let entry = entry.unwrap();
        assert_eq!(fs::read(entry.path()).unwrap(), fs::read(b.join("patterns").join(entry.file_name())).unwrap());
    }
}

#[test]
fn empty_manifest_encodes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir_all(&data).unwrap();
    mtpc::wav::write_manifest(&data.join("manifest.csv"), &[]).unwrap();
    let enc = tmp.path().join("enc");
    assert_eq!(mtpc(&["encode", "--out", s(&enc), "--set", &format!("input={}", s(&data))]), 0);
    assert_eq!(fs::read_dir(enc.join("patterns")).unwrap().count(), 0);
    assert!(load_patterns(&enc).is_err());
    // A missing manifest is a data error.
    assert_eq!(mtpc(&["encode", "--out", s(&enc), "--set", "input=/nonexistent"]), 2);
}

#[test]
fn train_and_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let enc = tmp.path().join("enc");
    assert_eq!(mtpc(&["encode", "--out", s(&enc), "--set", &format!("input={}", s(&data))]), 0);
    let input = format!("input={}", s(&enc));
    let common = ["--set", &input, "--set", "n_hidden=8", "--set", "epochs=2", "--set", "batch_size=8"];

    // lr=0 leaves the seeded initial weights in the checkpoint.
    let frozen = tmp.path().join("frozen");
    let mut args = vec!["train", "--out", s(&frozen), "--seed", "4", "--set", "lr=0"];
    args.extend(common);
    assert_eq!(mtpc(&args), 0);
    let set = load_patterns(&enc).unwrap();
    let cfg = ModelConfig {
        rsnn: mtpc::snn::RsnnConfig {
            n_hidden: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    let init = init_model(&set, &cfg, 4).unwrap();
    let saved = load_network(&frozen.join("model.mtpw")).unwrap();
    // Checkpoints hold f32 values.
    let f32_init = Network::from_checkpoint(&init.to_checkpoint()).unwrap();
    assert_eq!(saved, f32_init);

    // Fixed seed: byte-identical checkpoints; log has a train and val row per epoch.
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let mut args = vec!["train", "--out", s(out), "--set", "readout=leaky"];
        args.extend(common);
        assert_eq!(mtpc(&args), 0);
    }
    assert_eq!(fs::read(a.join("model.mtpw")).unwrap(), fs::read(b.join("model.mtpw")).unwrap());
    let log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,split,loss,mae_deg,seconds"));
    assert_eq!(log.lines().count(), 1 + 2 * 2);
    match load_network(&a.join("model.mtpw")).unwrap() {
        Network::Rsnn(p) => assert_eq!(p.readout_kind, ReadoutKind::Leaky),
        Network::Csnn(_) => panic!("expected the recurrent backend"),
    }

    let ev = tmp.path().join("ev");
    let ck = format!("checkpoint={}", s(&a.join("model.mtpw")));
    assert_eq!(mtpc(&["eval", "--out", s(&ev), "--set", &input, "--set", &ck]), 0);
    let report = fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert_eq!(report.lines().next(), Some("azimuth_deg,n,mae_deg"));
    let summary: KeyValues = fs::read_to_string(ev.join("summary.txt")).unwrap().parse().unwrap();
    let n_test = set.indices(mtpc::dataset::Split::Test).len();
    assert_eq!(summary.parse::<usize>("n_samples").unwrap(), Some(n_test));
    assert_eq!(fs::read_to_string(ev.join("predictions.csv")).unwrap().lines().count(), 1 + n_test);

    let missing = format!("checkpoint={}", s(&tmp.path().join("nope.mtpw")));
    assert_eq!(mtpc(&["eval", "--out", s(&ev), "--set", &input, "--set", &missing]), 2);
}

#[test]
fn csnn_trains_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let enc = tmp.path().join("enc");
    assert_eq!(mtpc(&["encode", "--out", s(&enc), "--set", &format!("input={}", s(&data))]), 0);
    let out = tmp.path().join("csnn");
    let code = mtpc(&[
        "train",
        "--out",
        s(&out),
        "--set",
        &format!("input={}", s(&enc)),
        "--set",
        "arch=csnn",
        "--set",
        "csnn_fc=16",
        "--set",
        "csnn_steps=3",
        "--set",
        "epochs=1",
    ]);
    assert_eq!(code, 0);
    assert!(matches!(load_network(&out.join("model.mtpw")).unwrap(), Network::Csnn(_)));
}

#[test]
fn perfect_posterior_scores_zero() {
    let mut errors = Vec::new();
    for az in (0..360).step_by(5) {
        let rates = gaussian_label(az as f64, 8.0).unwrap().values;
        let (est, err) = sample_error(&rates, az as f64).unwrap();
        assert_eq!(est, Some(az as f64));
        errors.push((az as f64, err));
    }
    let report = EvalReport::from_errors(&errors, 0, 5.0, KeyValues::default()).unwrap();
    assert_eq!(report.overall_mae_deg, 0.0);
    assert_eq!(report.bins.len(), 72);
}

#[test]
fn sweep_writes_one_row_per_count() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let code = mtpc(&[
        "sweep",
        "--out",
        s(&out),
        "--set",
        "values=11,31,51",
        "--set",
        "seeds=1",
        "--set",
        "n_azimuths=4",
        "--set",
        "clips_per_azimuth=3",
        "--set",
        "windows_per_clip=1",
        "--set",
        "val_clips=1",
        "--set",
        "test_clips=1",
        "--set",
        "channels=8",
        "--set",
        "n_hidden=8",
        "--set",
        "epochs=1",
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "delay_lines,n_seeds,mae_deg");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("11,1,"));
    assert!(lines[3].starts_with("51,1,"));
    assert_eq!(mtpc(&["sweep", "--out", s(&out), "--set", "experiment=dance"]), 1);
}

#[test]
fn baseline_matches_direct_calls() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let rows = read_manifest(&data.join("manifest.csv")).unwrap();
    let out = tmp.path().join("bl");
    assert_eq!(mtpc(&["baseline", "--out", s(&out), "--set", &format!("input={}", s(&data))]), 0);
    for row in rows.iter().step_by(5) {
        let clip = read_wav(&data.join(&row.path)).unwrap();
        let name = row.path.trim_end_matches(".wav").replace('/', "_");
        let mut reader = csv::Reader::from_path(out.join("baseline").join(format!("{name}.csv"))).unwrap();
        assert_eq!(reader.headers().unwrap(), vec!["pair", "delay_s", "confidence"]);
        let records: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
        assert_eq!(records.len(), 6);
        for (rec, (i, j)) in records.iter().zip(all_pairs(4)) {
            let direct = gcc_phat(&clip.samples[j], &clip.samples[i], 16_000.0, 0.001).unwrap();
            assert_eq!(&rec[0], format!("{i}-{j}"));
            assert_eq!(rec[1].parse::<f64>().unwrap(), direct.delay);
            assert_eq!(rec[2].parse::<f64>().unwrap(), direct.confidence);
        }
    }
    let single = tmp.path().join("one");
    let wav = data.join(&rows[0].path);
    assert_eq!(mtpc(&["baseline", "--out", s(&single), "--set", &format!("input={}", s(&wav))]), 0);
    assert_eq!(fs::read_to_string(single.join("baseline.csv")).unwrap().lines().count(), 7);
}
