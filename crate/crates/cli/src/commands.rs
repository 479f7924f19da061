//! Implementation of each subcommand. Every command is deterministic given its
//! configuration and seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use scalemix::backbone::{self, init_backbone};
use scalemix::checkpoint::Checkpoint;
use scalemix::data::{
    fit_norm, gen_synthetic, load_csv, make_windows, NormStats, Split, Splits, SyntheticSpec,
    TimeSeries, WindowSet,
};
use scalemix::embedding::{tokenize_prompt, PromptSpec, Vocab};
use scalemix::forecaster::{
    evaluate, prompt_text, train, Metrics, MixerModel, Persistence, TrainReport,
};
use scalemix::ntk::{tau_sweep, NtkSample, SweepResult, SweepSetup};
use scalemix::{ParamStore, Pooling};

use crate::{CliError, CliResult, RunConfig, SYNTHETIC_SPEC};

pub fn parse_synthetic_spec(text: &str) -> CliResult<SyntheticSpec> {
    toml::from_str(text)
        .map_err(|e| CliError::Config(format!("synthetic spec: {}", e.message().trim())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Writes a seeded synthetic series as CSV.
pub fn gen_data(spec_path: &Path, seed: u64, out: &Path) -> CliResult<TimeSeries> {
    let text = fs::read_to_string(spec_path).map_err(|e| CliError::io(spec_path, e))?;
    let series = gen_synthetic(seed, &parse_synthetic_spec(&text)?)?;
    let mut buf = Vec::new();
    series.write_csv(&mut buf)?;
    write_file(out, buf)?;
    Ok(series)
}

/// Reads `data`, or generates the bundled synthetic series when it is absent.
pub fn load_series(cfg: &RunConfig, data: Option<&Path>) -> CliResult<TimeSeries> {
    match data {
        Some(path) => Ok(load_csv(path, &cfg.data.schema())?),
        None => Ok(gen_synthetic(
            cfg.data.synthetic_seed,
            &parse_synthetic_spec(SYNTHETIC_SPEC)?,
        )?),
    }
}

pub fn load_vocab(path: Option<&Path>) -> CliResult<Vocab> {
    match path {
        Some(p) => Ok(Vocab::load(p)?),
        None => Ok(Vocab::bundled()),
    }
}

/// Windows, train-only statistics and the prompt for one dataset.
pub struct Prepared {
    pub splits: Splits,
    pub stats: NormStats,
    pub train: WindowSet,
    pub val: WindowSet,
    pub prompt: PromptSpec,
}

pub fn prepare(cfg: &RunConfig, series: &TimeSeries, vocab: &Vocab) -> CliResult<Prepared> {
    let m = &cfg.model;
    let splits = make_windows(series, m.look_back, m.horizon, &cfg.data.fractions())?;
    let stats = fit_norm(&splits.train)?;
    let text = prompt_text(
        &cfg.data.description,
        series.channels(),
        &stats,
        series.frequency().name(),
        m.look_back,
        m.horizon,
    );
    let prompt = tokenize_prompt(&text, vocab);
    let train = splits.train.normalized(&stats)?;
    let val = splits.val.normalized(&stats)?;
    Ok(Prepared {
        splits,
        stats,
        train,
        val,
        prompt,
    })
}

/// Frozen backbone from a checkpoint, or a seeded random one from the config.
pub fn backbone_params(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
) -> CliResult<(scalemix::backbone::BackboneConfig, ParamStore)> {
    match checkpoint {
        Some(path) => Ok(backbone::load_checkpoint(path)?),
        None => {
            let bc = cfg.model.backbone.clone();
            let params = init_backbone(&bc, cfg.model.backbone_seed)?;
            Ok((bc, params))
        }
    }
}

pub fn init_backbone_cmd(cfg: &RunConfig, seed: Option<u64>, out: &Path) -> CliResult<String> {
    let bc = &cfg.model.backbone;
    let params = init_backbone(bc, seed.unwrap_or(cfg.model.backbone_seed))?;
    let ckpt = backbone::backbone_checkpoint(bc, &params)?;
    write_file(out, ckpt.to_bytes())?;
    Ok(ckpt.content_hash())
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub out_model: PathBuf,
    pub report: PathBuf,
    pub backbone: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub seed: Option<u64>,
    pub timing: bool,
}

/// Builds and trains a model; returns it with its report.
pub fn fit(
    cfg: &RunConfig,
    series: &TimeSeries,
    backbone_ckpt: Option<&Path>,
    vocab: &Vocab,
) -> CliResult<(MixerModel, TrainReport, Prepared)> {
    let prep = prepare(cfg, series, vocab)?;
    let (bc, params) = backbone_params(cfg, backbone_ckpt)?;
    let mut model = MixerModel::new(
        cfg.model.model_config(),
        bc,
        params,
        prep.stats.clone(),
        prep.prompt.clone(),
        cfg.train.seed,
    )?;
    let report = train(&mut model, &prep.train, Some(&prep.val), &cfg.train)?;
    Ok((model, report, prep))
}

pub fn train_cmd(args: &TrainArgs) -> CliResult<(MixerModel, TrainReport)> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let series = load_series(&cfg, Some(&args.data))?;
    let vocab = load_vocab(args.vocab.as_deref())?;
    let (model, report, _) = fit(&cfg, &series, args.backbone.as_deref(), &vocab)?;
    write_file(&args.out_model, model.to_checkpoint()?.to_bytes())?;
    write_file(&args.report, report.render(args.timing))?;
    Ok((model, report))
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub name: &'static str,
    pub horizon: usize,
    pub metrics: Metrics,
}

/// `horizon,mse,mae` with one data row.
pub fn metrics_csv(horizon: usize, m: &Metrics) -> String {
    format!("horizon,mse,mae\n{horizon},{},{}\n", m.mse, m.mae)
}

/// Sibling path for the baseline metrics: `metrics.csv` → `metrics_baseline.csv`.
pub fn baseline_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map_or_else(|| "metrics".into(), |s| s.to_string_lossy().into_owned());
    let ext = out
        .extension()
        .map_or_else(String::new, |e| format!(".{}", e.to_string_lossy()));
    out.with_file_name(format!("{stem}_baseline{ext}"))
}

pub fn eval_cmd(
    model_path: &Path,
    data: &Path,
    config: Option<&Path>,
    split: Split,
    baseline: bool,
    out: Option<&Path>,
) -> CliResult<Vec<EvalRow>> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let model = MixerModel::load(model_path)?;
    if model.stats.source_split != Split::Train {
        return Err(CliError::Config(
            "model statistics were not fitted on the train split".into(),
        ));
    }
    let series = load_csv(data, &cfg.data.schema())?;
    let splits = make_windows(
        &series,
        model.config.look_back,
        model.config.horizon,
        &cfg.data.fractions(),
    )?;
    let windows = splits.get(split);
    let horizon = model.config.horizon;
    let mut rows = vec![EvalRow {
        name: "scalemix",
        horizon,
        metrics: evaluate(&model, windows)?,
    }];
    if baseline {
        rows.push(EvalRow {
            name: "persistence",
            horizon,
            metrics: evaluate(&Persistence { horizon }, windows)?,
        });
    }
    if let Some(out) = out {
        write_file(out, metrics_csv(horizon, &rows[0].metrics))?;
        if baseline {
            write_file(&baseline_path(out), metrics_csv(horizon, &rows[1].metrics))?;
        }
    }
    Ok(rows)
}

pub fn render_eval(rows: &[EvalRow]) -> String {
    let mut s = format!(
        "{:<12} {:>8} {:>14} {:>14}\n",
        "model", "horizon", "mse", "mae"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>14.6} {:>14.6}",
            r.name, r.horizon, r.metrics.mse, r.metrics.mae
        );
    }
    s
}

/// Parses `1,2,3`, `1..6` (inclusive) or a mix such as `1..3,8`.
pub fn parse_tau_list(text: &str) -> CliResult<Vec<usize>> {
    let bad = || CliError::Usage(format!("invalid tau list `{text}`"));
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (usize, usize) = (
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            );
            if a > b {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// `n` evenly spaced indices out of `len`.
fn spread(len: usize, n: usize) -> Vec<usize> {
    (0..n).map(|k| k * len / n).collect()
}

/// Fixed kernel sample set: evenly spaced train and test windows, normalised with
/// train statistics. Ids are `split:start_row`.
pub fn ntk_samples(
    prep: &Prepared,
    total: usize,
    train_share: f64,
) -> CliResult<(Vec<NtkSample>, Vec<String>)> {
    let n_train = (total as f64 * train_share).round() as usize;
    let n_test = total - n_train;
    let mut samples = Vec::with_capacity(total);
    let mut ids = Vec::with_capacity(total);
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        let ws = prep.splits.get(split);
        if n > ws.len() {
            return Err(CliError::Config(format!(
                "{n} NTK samples requested from the {} split, which has {} windows",
                split.name(),
                ws.len()
            )));
        }
        for i in spread(ws.len(), n) {
            samples.push(NtkSample {
                input: scalemix::data::apply_norm(&ws.inputs[i], &prep.stats)?,
                marks: ws.time_marks[i].clone(),
            });
            ids.push(format!("{}:{}", split.name(), ws.starts[i]));
        }
    }
    Ok((samples, ids))
}

pub fn ntk_sweep_cmd(
    cfg: &RunConfig,
    taus: &[usize],
    samples: usize,
    data: Option<&Path>,
    out_dir: &Path,
) -> CliResult<SweepResult> {
    let series = load_series(cfg, data)?;
    let vocab = Vocab::bundled();
    let prep = prepare(cfg, &series, &vocab)?;
    let (samples, ids) = ntk_samples(&prep, samples, cfg.ntk.train_share)?;
    let (bc, params) = backbone_params(cfg, None)?;
    let model = cfg.model.model_config();
    let setup = SweepSetup {
        model: &model,
        backbone: &bc,
        backbone_params: &params,
        stats: &prep.stats,
        prompt: &prep.prompt,
        train: &prep.train,
        train_config: &cfg.train,
        samples: &samples,
        sample_ids: &ids,
        budget_bytes: cfg.ntk.budget_bytes,
    };
    let result = tau_sweep(&setup, taus)?;
    result.write(out_dir)?;
    Ok(result)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub pooling: Pooling,
    pub metrics: Metrics,
}

/// One model per pooling technique, identical seeds and data; test-split metrics.
pub fn ablate_pooling_cmd(
    cfg: &RunConfig,
    data: Option<&Path>,
    out: &Path,
) -> CliResult<Vec<AblationRow>> {
    let series = load_series(cfg, data)?;
    let vocab = Vocab::bundled();
    let mut rows = Vec::with_capacity(cfg.ablation.poolings.len());
    for &pooling in &cfg.ablation.poolings {
        let mut run = cfg.clone();
        run.model.pooling = pooling;
        let (model, _, prep) = fit(&run, &series, None, &vocab)?;
        rows.push(AblationRow {
            pooling,
            metrics: evaluate(&model, &prep.splits.test)?,
        });
    }
    let mut csv = String::from("pooling,mse,mae\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{}", r.pooling, r.metrics.mse, r.metrics.mae);
    }
    write_file(out, csv)?;
    Ok(rows)
}

/// Human-readable listing of a checkpoint.
pub fn inspect_cmd(path: &Path) -> CliResult<String> {
    let ckpt = Checkpoint::load(path)?;
    let c = &ckpt.config;
    let mut s = String::new();
    let _ = writeln!(s, "hash {}", ckpt.content_hash());
    let _ = writeln!(
        s,
        "backbone n_layers={} n_heads={} d_model={} d_ff={} max_seq_len={} vocab_size={} causal={}",
        c.n_layers, c.n_heads, c.d_model, c.d_ff, c.max_seq_len, c.vocab_size, c.causal
    );
    if !ckpt.metadata.is_empty() {
        let _ = writeln!(s, "metadata {}", ckpt.metadata);
    }
    for (name, p) in ckpt.params.iter() {
        let part = if p.frozen { "frozen" } else { "trainable" };
        let _ = writeln!(s, "{part:<9} {name} {:?}", p.value.shape());
    }
    let _ = writeln!(
        s,
        "frozen_hash {}\ntrainable_hash {}",
        ckpt.params.frozen_hash(),
        ckpt.params.trainable_hash()
    );
    Ok(s)
}
