use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use factorcodec::checkpoint::save_trainer;
use factorcodec::data::write_synthetic_corpus;
use factorcodec::encoder::Scale;
use factorcodec::strategy::StrategyConfig;
use factorcodec::train::{TrainConfig, Trainer};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_factorcodec")).args(args).output().expect("spawn cli")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn model(dir: &Path, strategy: StrategyConfig) -> PathBuf {
    let path = dir.join(format!("{}.ckpt", strategy.name));
    save_trainer(&Trainer::new(TrainConfig::new(Scale::Tiny, strategy, 5)).unwrap(), &path).unwrap();
    path
}

fn wavs(dir: &Path, n: usize) -> Vec<PathBuf> {
    write_synthetic_corpus(&dir.join("wav"), n, 1.0, 11).unwrap()
}

#[test]
fn encode_decode_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(dir.path(), StrategyConfig::v2());
    let before = fs::read(&m).unwrap();
    let wav = &wavs(dir.path(), 1)[0];
    let (a, b) = (dir.path().join("a.frc"), dir.path().join("b.frc"));

    let o = cli(&["encode", "--model", p(&m), "--in", p(wav), "--out", p(&a)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("57 tokens/s"), "{}", stdout(&o));
    assert!(cli(&["encode", "--model", p(&m), "--in", p(wav), "--out", p(&b)]).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let out = dir.path().join("out.wav");
    let o = cli(&["decode", "--model", p(&m), "--in", p(&a), "--out", p(&out)]);
    assert!(o.status.success());
    assert_eq!(hound::WavReader::open(&out).unwrap().len(), 16_000);

    let o = cli(&["inspect", "--in", p(&a)]);
    let text = stdout(&o);
    assert!(o.status.success());
    for needle in ["content tokens: 50", "prosody tokens: 7", "8 speaker indices"] {
        assert!(text.contains(needle), "{text}");
    }
    assert_eq!(fs::read(&m).unwrap(), before, "model file changed");
}

#[test]
fn failures_exit_nonzero_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.frc");
    fs::write(&junk, b"definitely not a stream").unwrap();
    let o = cli(&["inspect", "--in", p(&junk)]);
    assert!(!o.status.success());
    assert!(o.stdout.is_empty());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));

    let m = model(dir.path(), StrategyConfig::v1());
    let wav = &wavs(dir.path(), 1)[0];
    let frc = dir.path().join("a.frc");
    assert!(cli(&["encode", "--model", p(&m), "--in", p(wav), "--out", p(&frc)]).status.success());
    let bytes = fs::read(&frc).unwrap();
    fs::write(&frc, &bytes[..bytes.len() - 5]).unwrap();
    assert!(!cli(&["decode", "--model", p(&m), "--in", p(&frc), "--out", p(&dir.path().join("x.wav"))]).status.success());
    assert!(!cli(&["encode", "--model", p(&dir.path().join("none.ckpt")), "--in", p(wav), "--out", p(&frc)]).status.success());
}

#[test]
fn convert_modes() {
    let dir = tempfile::tempdir().unwrap();
    let w = wavs(dir.path(), 2);
    let out = dir.path().join("vc.wav");
    let v3 = model(dir.path(), StrategyConfig::v3());
    let v2 = model(dir.path(), StrategyConfig::v2());
    let o = cli(&["convert", "--model", p(&v3), "--src", p(&w[0]), "--tgt", p(&w[1]), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(hound::WavReader::open(&out).unwrap().len(), 16_000);

    let missing = dir.path().join("missing.wav");
    assert!(!cli(&["convert", "--model", p(&v3), "--src", p(&w[0]), "--tgt", p(&missing), "--out", p(&out)]).status.success());
    assert!(!cli(&["convert", "--model", p(&v2), "--src", p(&w[0]), "--tgt", p(&w[1]), "--out", p(&out)]).status.success());
    assert!(cli(&["convert", "--model", p(&v2), "--src", p(&w[0]), "--tgt", p(&w[1]), "--out", p(&out), "--target-indices"]).status.success());
}

#[test]
fn train_with_config_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    wavs(dir.path(), 4);
    let run = dir.path().join("run");
    let config = dir.path().join("run.toml");
    fs::write(&config, format!("data = {:?}\nout_dir = {:?}\nsteps = 5\nbatch_size = 2\nstrategy = \"v3\"\n", p(&dir.path().join("wav")), p(&run))).unwrap();
    let o = cli(&["train", "--config", p(&config), "--override", "steps=2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).trim().ends_with("step-000002.ckpt"));
    let metrics = fs::read_to_string(run.join("metrics.ndjson")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let bad = cli(&["train", "--config", p(&config), "--override", "no_such_key=1"]);
    assert!(!bad.status.success());
}

#[test]
fn export_embeddings_table() {
    let dir = tempfile::tempdir().unwrap();
    wavs(dir.path(), 3);
    let m = model(dir.path(), StrategyConfig::v3());
    let out = dir.path().join("emb.csv");
    let o = cli(&["export-embeddings", "--model", p(&m), "--manifest", p(&dir.path().join("wav")), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0].split(',').count(), 1 + 192 + 64 + 64);
}
