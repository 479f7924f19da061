//! End-to-end forecaster: multiscale embedding, PDM mixing, frozen backbone and
//! a trainable linear decoder, plus the Adam training loop and evaluation.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{self, BackboneConfig, EMBED_TOKENS};
use crate::checkpoint::Checkpoint;
use crate::data::{apply_norm, invert_norm, NormStats, WindowSet, N_MARKS};
use crate::embedding::{
    embed_prompt, embed_scale, init_embedding_params, marks_for_scale, positional_encoding,
    PromptSpec,
};
use crate::error::{Error, Result};
use crate::multiscale::{
    check_levels, downsample, init_pdm_params, pdm_stack, scale_lengths, PdmConfig,
};
use crate::params::ParamStore;
use crate::tensor::{Pooling, Tensor};

pub const DECODER_WEIGHT: &str = "decoder.weight";
pub const DECODER_BIAS: &str = "decoder.bias";

/// Shape hyper-parameters of the forecaster around the backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub look_back: usize,
    pub horizon: usize,
    /// Downsampling levels τ; the model sees `τ + 1` scales.
    pub tau: usize,
    pub pdm_layers: usize,
    pub pdm_d_ff: usize,
    pub moving_avg: usize,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            look_back: 96,
            horizon: 96,
            tau: 3,
            pdm_layers: 2,
            pdm_d_ff: 64,
            moving_avg: 25,
            pooling: Pooling::Avg,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.look_back == 0 || self.horizon == 0 {
            return Err(Error::Config(
                "look_back and horizon must be positive".into(),
            ));
        }
        check_levels(self.look_back, self.tau)?;
        self.pdm(1).validate()
    }

    pub fn pdm(&self, d_model: usize) -> PdmConfig {
        PdmConfig {
            layers: self.pdm_layers,
            d_model,
            d_ff: self.pdm_d_ff,
            moving_avg: self.moving_avg,
        }
    }

    pub fn scale_lengths(&self) -> Vec<usize> {
        scale_lengths(self.look_back, self.tau)
    }

    /// Number of non-prompt positions fed to the decoder.
    pub fn series_positions(&self) -> usize {
        self.scale_lengths().iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            batch_size: 8,
            accum_steps: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if self.batch_size == 0 || self.accum_steps == 0 {
            return Err(Error::Config(
                "batch_size and accum_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Forecast in original units.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub values: Tensor,
    pub horizon: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelMeta {
    model: ModelConfig,
    channels: usize,
    stats: NormStats,
    prompt: PromptSpec,
}

/// `Ŷ = F(X, P; Θ, Φ)`: frozen backbone and prompt table in Θ, everything else in Φ.
#[derive(Clone, Debug)]
pub struct MixerModel {
    pub config: ModelConfig,
    pub backbone: BackboneConfig,
    pub channels: usize,
    pub params: ParamStore,
    pub stats: NormStats,
    pub prompt: PromptSpec,
}

impl MixerModel {
    /// Wraps a frozen backbone and initialises Φ from `seed`.
    pub fn new(
        config: ModelConfig,
        backbone_cfg: BackboneConfig,
        backbone_params: ParamStore,
        stats: NormStats,
        prompt: PromptSpec,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        backbone_cfg.validate()?;
        backbone::check_params(&backbone_cfg, &backbone_params)?;
        if let Some((name, _)) = backbone_params.trainable().next() {
            return Err(Error::Contract(format!(
                "backbone parameter `{name}` is not frozen"
            )));
        }
        let channels = stats.mean.len();
        let mut params = backbone_params;
        params.extend(init_trainable(&config, &backbone_cfg, channels, seed)?)?;
        let model = Self {
            config,
            backbone: backbone_cfg,
            channels,
            params,
            stats,
            prompt,
        };
        model.check_prompt_and_length()?;
        Ok(model)
    }

    fn check_prompt_and_length(&self) -> Result<()> {
        for &id in &self.prompt.token_ids {
            if id >= self.backbone.vocab_size {
                return Err(Error::Index {
                    what: "prompt vocabulary".into(),
                    index: id,
                    size: self.backbone.vocab_size,
                });
            }
        }
        self.backbone
            .check_seq_len(self.prompt.token_ids.len() + self.config.series_positions())
    }

    pub fn pdm_config(&self) -> PdmConfig {
        self.config.pdm(self.backbone.d_model)
    }

    /// Records the forward pass on `tape`; `input` is a normalised `L×M` window.
    /// Returns the normalised `K×M` forecast.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor, marks: &Tensor) -> Result<Var> {
        let cfg = &self.config;
        if input.dims2()? != (cfg.look_back, self.channels) || input.ndim() != 2 {
            return Err(Error::dim(
                "model input",
                input.shape(),
                &[cfg.look_back, self.channels],
            ));
        }
        if marks.dims2()? != (cfg.look_back, N_MARKS) {
            return Err(Error::dim(
                "model marks",
                marks.shape(),
                &[cfg.look_back, N_MARKS],
            ));
        }
        let set = downsample(input, cfg.tau, cfg.pooling)?;
        let mut embedded = Vec::with_capacity(set.scales().len());
        for (i, scale) in set.scales().iter().enumerate() {
            let x = tape.constant(scale.clone());
            embedded.push(embed_scale(
                tape,
                &self.params,
                x,
                &marks_for_scale(marks, i)?,
            )?);
        }
        let mixed = pdm_stack(tape, &self.params, &self.pdm_config(), &embedded)?;

        let ids = &self.prompt.token_ids;
        let mut parts = Vec::with_capacity(mixed.len() + 1);
        if let Some(p) = embed_prompt(tape, &self.params, EMBED_TOKENS, ids)? {
            // The backbone has no positions of its own; without this the prompt is a bag of tokens.
            let pe = tape.constant(positional_encoding(ids.len(), self.backbone.d_model));
            parts.push(tape.add(p, pe)?);
        }
        parts.extend(mixed);
        let seq = tape.concat_rows(&parts)?;
        let hidden = backbone::forward(tape, &self.params, &self.backbone, seq)?;
        let series = tape.slice_rows(hidden, ids.len(), cfg.series_positions())?;
        self.decode(tape, series)
    }

    /// Linear head: flattens `S'×d` hidden states row-major and maps them to `K×M`.
    pub fn decode(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let n = tape.value(hidden).len();
        let flat = tape.reshape(hidden, &[1, n])?;
        let w = tape.param(&self.params, DECODER_WEIGHT)?;
        let b = tape.param(&self.params, DECODER_BIAS)?;
        let y = tape.matmul(flat, w)?;
        let y = tape.add_row(y, b)?;
        tape.reshape(y, &[self.config.horizon, self.channels])
    }

    /// Normalised-space prediction without recording gradients.
    pub fn predict_normalized(&self, input: &Tensor, marks: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, input, marks)?;
        Ok(tape.value(y).clone())
    }

    /// Forecast for a normalised window, returned in original units.
    pub fn predict(&self, input: &Tensor, marks: &Tensor) -> Result<Forecast> {
        let values = invert_norm(&self.predict_normalized(input, marks)?, &self.stats)?;
        values.check_finite("forecast")?;
        Ok(Forecast {
            values,
            horizon: self.config.horizon,
        })
    }

    /// Training loss and gradients of every trainable parameter for one window.
    pub fn loss_and_grad(
        &self,
        input: &Tensor,
        marks: &Tensor,
        target: &Tensor,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, input, marks)?;
        let loss = tape.mse(y, target)?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss, &Tensor::scalar(1.0))?;
        Ok((value, grads.params))
    }

    pub fn frozen_hash(&self) -> String {
        self.params.frozen_hash()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = ModelMeta {
            model: self.config.clone(),
            channels: self.channels,
            stats: self.stats.clone(),
            prompt: self.prompt.clone(),
        };
        let metadata = serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Checkpoint {
            config: self.backbone.clone(),
            metadata,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_str(&ckpt.metadata)
            .map_err(|e| Error::Format(format!("model metadata: {e}")))?;
        let bad = |e: Error| Error::Format(e.to_string());
        meta.model.validate().map_err(bad)?;
        ckpt.config.validate().map_err(bad)?;
        backbone::check_params(&ckpt.config, &ckpt.params)?;
        if meta.stats.mean.len() != meta.channels || meta.stats.std.len() != meta.channels {
            return Err(Error::Format(
                "normalisation statistics do not match channel count".into(),
            ));
        }
        let expected = init_trainable(&meta.model, &ckpt.config, meta.channels, 0).map_err(bad)?;
        let found: Vec<(&str, &[usize])> = ckpt
            .params
            .trainable()
            .map(|(n, t)| (n, t.shape()))
            .collect();
        let wanted: Vec<(&str, &[usize])> =
            expected.trainable().map(|(n, t)| (n, t.shape())).collect();
        if found != wanted {
            return Err(Error::Format(
                "trainable tensors do not match the model configuration".into(),
            ));
        }
        let backbone_names = ckpt.config.param_shapes().len();
        if ckpt.params.frozen().count() != backbone_names {
            return Err(Error::Format(
                "unexpected frozen tensors in model checkpoint".into(),
            ));
        }
        let model = Self {
            config: meta.model,
            backbone: ckpt.config,
            channels: meta.channels,
            params: ckpt.params,
            stats: meta.stats,
            prompt: meta.prompt,
        };
        model.check_prompt_and_length().map_err(bad)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Fresh Φ: embeddings, PDM stack and decoder, in that registration order.
fn init_trainable(
    config: &ModelConfig,
    backbone_cfg: &BackboneConfig,
    channels: usize,
    seed: u64,
) -> Result<ParamStore> {
    if channels == 0 {
        return Err(Error::Config("model needs at least one channel".into()));
    }
    let d = backbone_cfg.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_embedding_params(&mut store, channels, d, &mut rng)?;
    init_pdm_params(
        &mut store,
        &config.pdm(d),
        &config.scale_lengths(),
        &mut rng,
    )?;
    let fan_in = config.series_positions() * d;
    let out = config.horizon * channels;
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert_trainable(
        DECODER_WEIGHT,
        Tensor::uniform(&[fan_in, out], bound, &mut rng),
    )?;
    store.insert_trainable(DECODER_BIAS, Tensor::uniform(&[out], bound, &mut rng))?;
    Ok(store)
}

/// Mean squared error over all entries.
pub fn loss_mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(pred.sub(target)?.data().iter().map(|d| d * d).sum::<f64>() / pred.len() as f64)
}

/// Mean absolute error over all entries.
pub fn metric_mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(pred
        .sub(target)?
        .data()
        .iter()
        .map(|d| d.abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Updates every trainable entry of `store`; parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let names: Vec<String> = store.trainable().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let theta = store.trainable_mut(&name)?;
            if let Some(g) = grads.get(&name) {
                if g.shape() != theta.shape() {
                    return Err(Error::dim("adam gradient", g.shape(), theta.shape()));
                }
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape()));
            let g = grads.get(&name).map(Tensor::data);
            let (m, v) = (m.data_mut(), v.data_mut());
            for (j, p) in theta.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    /// One `key=value` line per epoch. Wall-clock time is only included on request,
    /// so default reports are byte-identical across runs.
    pub fn render(&self, timing: bool) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!(
                "epoch={} train_loss={:.12e}",
                e.epoch, e.train_loss
            ));
            match e.val_loss {
                Some(v) => out.push_str(&format!(" val_loss={v:.12e}")),
                None => out.push_str(" val_loss=NA"),
            }
            if timing {
                out.push_str(&format!(" wall_ms={}", e.wall_ms));
            }
            out.push('\n');
        }
        out
    }
}

fn largest_param(store: &ParamStore) -> (String, f64) {
    store
        .trainable()
        .map(|(n, t)| (n.to_string(), t.norm()))
        .fold((String::new(), f64::NEG_INFINITY), |best, cur| {
            if !(cur.1 <= best.1) {
                cur
            } else {
                best
            }
        })
}

fn accumulate(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(name, g);
            }
        }
    }
}

fn scale_all(grads: &mut BTreeMap<String, Tensor>, c: f64) {
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= c);
    }
}

/// Mean normalised-space loss over a window set.
pub fn mean_loss(model: &MixerModel, windows: &WindowSet) -> Result<f64> {
    let losses: Vec<f64> = (0..windows.len())
        .into_par_iter()
        .map(|i| {
            let y = model.predict_normalized(&windows.inputs[i], &windows.time_marks[i])?;
            loss_mse(&y, &windows.targets[i])
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Adam training on normalised windows. Only Φ is updated. Each optimiser step
/// averages `accum_steps` micro-batch gradients, each the mean over `batch_size`
/// windows; per-window work may run in parallel but is always reduced in order.
pub fn train(
    model: &mut MixerModel,
    train: &WindowSet,
    val: Option<&WindowSet>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split has no windows".into()));
    }
    let mut adam = Adam::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut losses = vec![0.0; train.len()];
        let group = cfg.batch_size * cfg.accum_steps;
        for (step, chunk) in order.chunks(group).enumerate() {
            let mut update = BTreeMap::new();
            let micro_batches: Vec<&[usize]> = chunk.chunks(cfg.batch_size).collect();
            for (mb, batch) in micro_batches.iter().enumerate() {
                let results: Vec<(f64, BTreeMap<String, Tensor>)> = batch
                    .par_iter()
                    .map(|&i| {
                        model.loss_and_grad(
                            &train.inputs[i],
                            &train.time_marks[i],
                            &train.targets[i],
                        )
                    })
                    .collect::<Result<_>>()?;
                let mut micro = BTreeMap::new();
                for (&i, (loss, grads)) in batch.iter().zip(results) {
                    if !loss.is_finite() {
                        let (param, norm) = largest_param(&model.params);
                        return Err(Error::Diverged {
                            epoch,
                            batch: step * cfg.accum_steps + mb,
                            loss,
                            param,
                            norm,
                        });
                    }
                    losses[i] = loss;
                    accumulate(&mut micro, grads);
                }
                scale_all(&mut micro, 1.0 / batch.len() as f64);
                accumulate(&mut update, micro);
            }
            scale_all(&mut update, 1.0 / micro_batches.len() as f64);
            adam.step(&mut model.params, &update)?;
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let val_loss = match val {
            Some(v) if !v.is_empty() => Some(mean_loss(model, v)?),
            _ => None,
        };
        report.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            wall_ms: started.elapsed().as_millis(),
        });
    }
    Ok(report)
}

/// Anything that maps a raw look-back window to a raw forecast.
pub trait Forecaster {
    fn horizon(&self) -> usize;

    /// `input` is `L×M` in original units; returns `K×M` in original units.
    fn forecast(&self, input: &Tensor, marks: &Tensor) -> Result<Tensor>;
}

impl Forecaster for MixerModel {
    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn forecast(&self, input: &Tensor, marks: &Tensor) -> Result<Tensor> {
        Ok(self
            .predict(&apply_norm(input, &self.stats)?, marks)?
            .values)
    }
}

/// Repeats the last observed row for every future step.
#[derive(Clone, Copy, Debug)]
pub struct Persistence {
    pub horizon: usize,
}

impl Forecaster for Persistence {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn forecast(&self, input: &Tensor, _marks: &Tensor) -> Result<Tensor> {
        let (l, m) = input.dims2()?;
        let last = input.row(l - 1);
        let data = (0..self.horizon)
            .flat_map(|_| last.iter().copied())
            .collect();
        Tensor::new(vec![self.horizon, m], data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

/// Mean of per-window MSE and MAE over raw (original-unit) windows.
pub fn evaluate(model: &(dyn Forecaster + Sync), windows: &WindowSet) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(Error::Config(format!(
            "{} split has no windows to evaluate",
            windows.split.name()
        )));
    }
    if model.horizon() != windows.horizon {
        return Err(Error::Config(format!(
            "model horizon {} differs from window horizon {}",
            model.horizon(),
            windows.horizon
        )));
    }
    let per: Vec<(f64, f64)> = (0..windows.len())
        .into_par_iter()
        .map(|i| {
            let y = model.forecast(&windows.inputs[i], &windows.time_marks[i])?;
            Ok((
                loss_mse(&y, &windows.targets[i])?,
                metric_mae(&y, &windows.targets[i])?,
            ))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok(Metrics {
        mse: per.iter().map(|p| p.0).sum::<f64>() / n,
        mae: per.iter().map(|p| p.1).sum::<f64>() / n,
        windows: per.len(),
    })
}

/// Dataset description for the prompt prefix, built from train-split statistics only.
pub fn prompt_text(
    description: &str,
    channels: &[String],
    stats: &NormStats,
    frequency: &str,
    look_back: usize,
    horizon: usize,
) -> String {
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.1}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    format!(
        "{description}; channels {}; {frequency}; predict {horizon} steps from {look_back}; mean {}; std {}",
        channels.join(" "),
        fmt(&stats.mean),
        fmt(&stats.std)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_backbone;
    use crate::data::Split;
    use crate::embedding::{tokenize_prompt, Vocab};

    fn tiny(tau: usize) -> (ModelConfig, BackboneConfig) {
        (
            ModelConfig {
                look_back: 16,
                horizon: 4,
                tau,
                pdm_layers: 1,
                pdm_d_ff: 8,
                moving_avg: 3,
                pooling: Pooling::Avg,
            },
            BackboneConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 8,
                d_ff: 8,
                max_seq_len: 64,
                vocab_size: Vocab::bundled().len(),
                causal: false,
            },
        )
    }

    fn model(tau: usize, seed: u64) -> MixerModel {
        let (mc, bc) = tiny(tau);
        let stats = NormStats {
            mean: vec![1.0, -2.0],
            std: vec![2.0, 0.5],
            source_split: Split::Train,
        };
        let prompt = tokenize_prompt("hourly load data", &Vocab::bundled());
        MixerModel::new(
            mc,
            bc.clone(),
            init_backbone(&bc, 5).unwrap(),
            stats,
            prompt,
            seed,
        )
        .unwrap()
    }

    fn window(seed: u64, l: usize) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[l, 2], 1.0, &mut rng);
        let mut marks = Vec::new();
        for t in 0..l {
            marks.extend_from_slice(&[
                (t % 12) as f64,
                (t % 31) as f64,
                (t % 7) as f64,
                (t % 24) as f64,
            ]);
        }
        (x, Tensor::new(vec![l, 4], marks).unwrap())
    }

    #[test]
    fn zero_decoder_forecasts_train_means() {
        let mut m = model(2, 1);
        let w = m.params.tensor(DECODER_WEIGHT).unwrap().shape().to_vec();
        m.params
            .set_trainable(DECODER_WEIGHT, Tensor::zeros(&w))
            .unwrap();
        m.params
            .set_trainable(DECODER_BIAS, Tensor::zeros(&[8]))
            .unwrap();
        let (x, marks) = window(2, 16);
        let f = m.predict(&x, &marks).unwrap();
        assert_eq!(f.values.shape(), &[4, 2]);
        for i in 0..4 {
            assert_eq!(f.values.row(i), &[1.0, -2.0]);
        }
    }

    #[test]
    fn prediction_is_pure() {
        let m = model(2, 3);
        let (x, marks) = window(4, 16);
        assert_eq!(
            m.predict(&x, &marks).unwrap(),
            m.predict(&x, &marks).unwrap()
        );
    }

    #[test]
    fn prompt_order_matters() {
        let m = model(2, 3);
        let (x, marks) = window(4, 16);
        let mut swapped = m.clone();
        let ids = &mut swapped.prompt.token_ids;
        assert_ne!(ids[0], ids[1]);
        ids.swap(0, 1);
        let a = m.predict_normalized(&x, &marks).unwrap();
        let b = swapped.predict_normalized(&x, &marks).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-9);
    }

    #[test]
    fn decoder_is_exactly_linear() {
        let mut m = model(1, 3);
        m.params
            .set_trainable(DECODER_BIAS, Tensor::zeros(&[8]))
            .unwrap();
        let n = m.config.series_positions() * 8;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = Tensor::uniform(&[m.config.series_positions(), 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let y = m.decode(&mut tape, hv).unwrap();
        let w = m.params.tensor(DECODER_WEIGHT).unwrap();
        let expect = h.reshape(&[1, n]).unwrap().matmul(w).unwrap();
        assert_eq!(tape.value(y).data(), expect.data());
    }

    #[test]
    fn every_trainable_tensor_gets_gradient() {
        let m = model(2, 6);
        let (x, marks) = window(7, 16);
        let (y, _) = window(8, 4);
        let (_, g) = m.loss_and_grad(&x, &marks, &y).unwrap();
        for (name, _) in m.params.trainable() {
            let gn = g.get(name).map_or(0.0, Tensor::norm);
            assert!(gn > 0.0, "{name} has zero gradient");
        }
        for (name, _) in m.params.frozen() {
            assert!(!g.contains_key(name));
        }
    }

    #[test]
    fn partition_is_total_and_disjoint() {
        let m = model(2, 1);
        let frozen = m.params.frozen().count();
        let trainable = m.params.trainable().count();
        assert_eq!(frozen + trainable, m.params.len());
        assert_eq!(frozen, m.backbone.param_shapes().len());
        assert!(m.params.frozen().all(|(n, _)| n.starts_with("backbone.")));
    }

    #[test]
    fn losses_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::uniform(&[5, 3], 2.0, &mut rng);
        let b = Tensor::uniform(&[5, 3], 2.0, &mut rng);
        let (mut se, mut ae) = (0.0, 0.0);
        for i in 0..5 {
            for j in 0..3 {
                let d = a.at(i, j) - b.at(i, j);
                se += d * d;
                ae += d.abs();
            }
        }
        assert!((loss_mse(&a, &b).unwrap() - se / 15.0).abs() < 1e-12);
        assert!((metric_mae(&a, &b).unwrap() - ae / 15.0).abs() < 1e-12);
        let one = a.map(|v| v + 1.0);
        assert!((loss_mse(&one, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((metric_mae(&one, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(loss_mse(&a, &a).unwrap(), 0.0);
        assert!(matches!(
            loss_mse(&a, &Tensor::zeros(&[3, 5])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn adam_first_step_on_square() {
        let mut store = ParamStore::new();
        store
            .insert_trainable("theta", Tensor::scalar(1.0))
            .unwrap();
        let mut adam = Adam::new(1e-4, 0.9, 0.999, 1e-8);
        let mut grads = BTreeMap::new();
        grads.insert("theta".to_string(), Tensor::scalar(2.0));
        adam.step(&mut store, &grads).unwrap();
        // m̂ = 2, v̂ = 4 after bias correction
        let expect = 1e-4 * 2.0 / (2.0 + 1e-8);
        let moved = 1.0 - store.tensor("theta").unwrap().data()[0];
        assert!((moved - expect).abs() < 1e-10);
    }

    #[test]
    fn model_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model(2, 11);
        m.save(&path).unwrap();
        let back = MixerModel::load(&path).unwrap();
        assert_eq!(back.params.trainable_hash(), m.params.trainable_hash());
        assert_eq!(back.params.frozen_hash(), m.params.frozen_hash());
        assert_eq!(back.stats, m.stats);
        assert_eq!(back.prompt, m.prompt);
        let (x, marks) = window(1, 16);
        assert_eq!(
            back.predict(&x, &marks).unwrap(),
            m.predict(&x, &marks).unwrap()
        );
    }

    #[test]
    fn over_long_sequence_is_rejected() {
        let (mc, mut bc) = tiny(2);
        bc.max_seq_len = 20;
        let prompt = tokenize_prompt("hourly load data", &Vocab::bundled());
        let err = MixerModel::new(
            mc,
            bc.clone(),
            init_backbone(&bc, 1).unwrap(),
            NormStats::identity(2),
            prompt,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::SequenceLength { len: 31, limit: 20 }));
    }

    #[test]
    fn persistence_repeats_last_row() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let y = Persistence { horizon: 3 }
            .forecast(&x, &Tensor::zeros(&[2, 4]))
            .unwrap();
        assert_eq!(y.data(), &[3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
    }
}
