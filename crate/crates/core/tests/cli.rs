//! End-to-end tests for the `icmf` binary: exit codes, idempotency,
//! determinism of artifacts, and container integrity checks.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::SystemTime;

const TINY_CONFIG: &str = "seed = 41\n\
    [model]\ninput_dim = 4\nhidden_dim = 6\noutput_dim = 4\n\
    [suite]\nsize = 2\nn_train = 24\nn_val = 8\nn_test = 12\nn_classes = 2\n\
    [pretrain]\nepochs = 30\nlr = 0.3\nn_samples = 32\n\
    [finetune]\nrank = 2\nepochs = 10\nlr = 0.5\n\
    [taskvec]\nn_probe = 16\n\
    [vae]\nlatent_dim = 2\nhidden_dim = 8\n\
    [meta]\niters = 12\nbatch_size = 2\ninner_batch = 8\n";

fn icmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icmf"))
        .args(args)
        .output()
        .expect("failed to spawn icmf")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("icmf terminated by signal")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn run_tiny(dir: &Path) -> (PathBuf, PathBuf) {
    let config = write_config(dir, TINY_CONFIG);
    let out = dir.join("out");
    let res = icmf(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        exit_code(&res),
        0,
        "run failed: {}",
        String::from_utf8_lossy(&res.stderr)
    );
    (config, out)
}

fn mtime(path: &Path) -> SystemTime {
    std::fs::metadata(path).unwrap().modified().unwrap()
}

#[test]
fn run_produces_report_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (config, out) = run_tiny(dir.path());
    for artifact in [
        "base.icmf",
        "taskvec.icmf",
        "vae.icmf",
        "meta_history.csv",
        "report.csv",
        "report.json",
        "latents.csv",
        "manifest.json",
        "config.toml",
    ] {
        assert!(out.join(artifact).exists(), "{artifact} missing after run");
    }

    let before = mtime(&out.join("base.icmf"));
    std::thread::sleep(std::time::Duration::from_millis(20));
    let rerun = icmf(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&rerun), 0);
    assert_eq!(
        mtime(&out.join("base.icmf")),
        before,
        "idempotent rerun rewrote an existing artifact"
    );

    std::thread::sleep(std::time::Duration::from_millis(20));
    let forced = icmf(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--force",
    ]);
    assert_eq!(exit_code(&forced), 0);
    assert!(
        mtime(&out.join("base.icmf")) > before,
        "--force did not redo the pretrain stage"
    );
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "seed = \"not a number");
    let out = dir.path().join("out");
    let res = icmf(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 2);
}

#[test]
fn unknown_config_field_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "seed = 1\n[model]\nwidth = 3\n");
    let out = dir.path().join("out");
    let res = icmf(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 2);
}

#[test]
fn missing_config_flag_exits_2() {
    let res = icmf(&["pretrain"]);
    assert_eq!(exit_code(&res), 2);
}

#[test]
fn stage_without_inputs_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let out = dir.path().join("out");
    let res = icmf(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        exit_code(&res),
        3,
        "eval without upstream artifacts: {}",
        String::from_utf8_lossy(&res.stderr)
    );
}

#[test]
fn changed_config_exits_4_until_forced() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = run_tiny(dir.path());
    let changed = write_config(dir.path(), &TINY_CONFIG.replace("seed = 41", "seed = 42"));
    let res = icmf(&[
        "report",
        "--config",
        changed.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 4);
    let forced = icmf(&[
        "run",
        "--config",
        changed.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--force",
    ]);
    assert_eq!(
        exit_code(&forced),
        0,
        "--force with a new config should restart the run: {}",
        String::from_utf8_lossy(&forced.stderr)
    );
}

#[test]
fn truncated_container_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let (config, out) = run_tiny(dir.path());
    let base = out.join("base.icmf");
    let bytes = std::fs::read(&base).unwrap();
    std::fs::write(&base, &bytes[..10]).unwrap();
    let res = icmf(&[
        "finetune",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--force",
    ]);
    assert_eq!(
        exit_code(&res),
        5,
        "truncated base container: {}",
        String::from_utf8_lossy(&res.stderr)
    );
}

#[test]
fn corrupted_payload_exits_6() {
    let dir = tempfile::tempdir().unwrap();
    let (config, out) = run_tiny(dir.path());
    let base = out.join("base.icmf");
    let mut bytes = std::fs::read(&base).unwrap();
    let n = bytes.len();
    bytes[n - 16] ^= 0x40;
    std::fs::write(&base, &bytes).unwrap();
    let res = icmf(&[
        "finetune",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--force",
    ]);
    assert_eq!(
        exit_code(&res),
        6,
        "corrupted base payload: {}",
        String::from_utf8_lossy(&res.stderr)
    );
}

#[test]
fn locked_out_dir_exits_7() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".lock"), "12345").unwrap();
    let res = icmf(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 7);
}

#[test]
fn identical_configs_give_identical_artifacts() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (_, out_a) = run_tiny(dir_a.path());
    let (_, out_b) = run_tiny(dir_b.path());
    for artifact in [
        "base.icmf",
        "taskvec.icmf",
        "vae.icmf",
        "meta_history.csv",
        "report.csv",
        "report.json",
        "latents.csv",
    ] {
        let a = std::fs::read(out_a.join(artifact)).unwrap();
        let b = std::fs::read(out_b.join(artifact)).unwrap();
        assert_eq!(a, b, "{artifact} differs between identical runs");
    }
}

#[test]
fn f32_precision_shrinks_artifacts() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (_, out_f64) = run_tiny(dir_a.path());
    let config = write_config(dir_b.path(), TINY_CONFIG);
    let out_f32 = dir_b.path().join("out");
    let res = icmf(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_f32.to_str().unwrap(),
        "--precision",
        "f32",
    ]);
    assert_eq!(
        exit_code(&res),
        0,
        "f32 run failed: {}",
        String::from_utf8_lossy(&res.stderr)
    );
    let f64_len = std::fs::metadata(out_f64.join("base.icmf")).unwrap().len();
    let f32_len = std::fs::metadata(out_f32.join("base.icmf")).unwrap().len();
    assert!(
        f32_len < f64_len,
        "f32 base container ({f32_len} bytes) is not smaller than f64 ({f64_len} bytes)"
    );
}
