#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Two hourly channels, short enough for second-scale runs.
pub const SMALL_SPEC: &str = r#"
length = 400
frequency = "hourly"
start = "2021-03-01 00:00:00"

[[channel]]
name = "load"
level = 5.0
trend_slope = 0.01
ar_phi = 0.5
noise_scale = 0.2
sinusoids = [{ amplitude = 2.0, period = 24.0 }]

[[channel]]
name = "temperature"
level = -1.0
ar_phi = 0.5
noise_scale = 0.1
sinusoids = [{ amplitude = 1.0, period = 12.0, phase = 0.4 }]
"#;

/// A model small enough that a full train + sweep takes seconds.
pub const TINY_CONFIG: &str = r#"
[model]
look_back = 16
horizon = 4
tau = 2
pdm_layers = 1
pdm_d_ff = 8
moving_avg = 5

[model.backbone]
n_layers = 1
n_heads = 2
d_model = 8
d_ff = 16
max_seq_len = 128

[train]
lr = 0.001
epochs = 3
batch_size = 4
accum_steps = 2
seed = 1

[ntk]
taus = [1, 2, 3]
samples = 6
"#;

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn scalemix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scalemix"))
        .args(args)
        .env_remove("SCALEMIX_THREADS")
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) -> String {
    let out = scalemix(args);
    assert!(
        out.status.success(),
        "scalemix {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

pub fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

/// Writes the small spec, generates its CSV and writes the tiny config.
/// Returns `(data, config)` paths.
pub fn small_inputs(dir: &Path) -> (String, String) {
    let spec = write(dir, "spec.toml", SMALL_SPEC);
    let data = path(dir, "data.csv");
    ok(&["gen-data", "--spec", &spec, "--seed", "0", "--out", &data]);
    (data, write(dir, "tiny.toml", TINY_CONFIG))
}
