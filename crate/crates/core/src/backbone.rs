//! Frozen pre-norm transformer encoder standing in for the pre-trained language model.
//!
//! The backbone is position-free: positional information enters only through the
//! scale embeddings. Its parameters, including the token table used for prompts,
//! are always registered frozen, so gradients pass through them to upstream
//! parameters without ever producing entries for them.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::embedding::Vocab;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const EMBED_TOKENS: &str = "backbone.embed_tokens";
pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// Mask attention to future positions (decoder-style) instead of attending both ways.
    pub causal: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_ff: 64,
            max_seq_len: 512,
            vocab_size: Vocab::bundled().len(),
            causal: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0
            || self.d_model == 0
            || self.d_ff == 0
            || self.max_seq_len == 0
            || self.vocab_size == 0
        {
            return Err(Error::Config(format!(
                "backbone extents must be positive (n_heads={}, d_model={}, d_ff={}, max_seq_len={}, vocab_size={})",
                self.n_heads, self.d_model, self.d_ff, self.max_seq_len, self.vocab_size
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model={} is not divisible by n_heads={}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn check_seq_len(&self, len: usize) -> Result<()> {
        if len > self.max_seq_len {
            return Err(Error::SequenceLength {
                len,
                limit: self.max_seq_len,
            });
        }
        Ok(())
    }

    /// Every backbone tensor with its shape, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![(EMBED_TOKENS.to_string(), vec![self.vocab_size, d])];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("backbone.layer{l}.{s}");
            out.push((p("attn_norm.gamma"), vec![d]));
            out.push((p("attn_norm.beta"), vec![d]));
            for w in ["q", "k", "v", "o"] {
                out.push((p(&format!("attn.w{w}")), vec![d, d]));
                out.push((p(&format!("attn.b{w}")), vec![d]));
            }
            out.push((p("ffn_norm.gamma"), vec![d]));
            out.push((p("ffn_norm.beta"), vec![d]));
            out.push((p("ffn.w1"), vec![d, f]));
            out.push((p("ffn.b1"), vec![f]));
            out.push((p("ffn.w2"), vec![f, d]));
            out.push((p("ffn.b2"), vec![d]));
        }
        if self.n_layers > 0 {
            out.push(("backbone.final_norm.gamma".to_string(), vec![d]));
            out.push(("backbone.final_norm.beta".to_string(), vec![d]));
        }
        out
    }
}

/// Seeded random initialisation; every tensor is registered frozen.
pub fn init_backbone(cfg: &BackboneConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in cfg.param_shapes() {
        let t = if name.ends_with(".gamma") {
            Tensor::ones(&shape)
        } else if shape.len() == 1 {
            Tensor::zeros(&shape)
        } else {
            Tensor::normal(&shape, INIT_STD, &mut rng)
        };
        store.insert_frozen(name, t)?;
    }
    Ok(store)
}

/// Checks that `store` holds exactly the tensors `cfg` declares, with matching shapes.
pub fn check_params(cfg: &BackboneConfig, store: &ParamStore) -> Result<()> {
    for (name, shape) in cfg.param_shapes() {
        let t = store
            .get(&name)
            .ok_or_else(|| Error::Format(format!("missing backbone tensor `{name}`")))?;
        if t.value.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, config declares {shape:?}",
                t.value.shape()
            )));
        }
    }
    Ok(())
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    cfg: &BackboneConfig,
    store: &ParamStore,
) -> Result<()> {
    backbone_checkpoint(cfg, store)?.save(path)
}

/// Bare-backbone checkpoint holding only the backbone tensors of `store`.
pub fn backbone_checkpoint(cfg: &BackboneConfig, store: &ParamStore) -> Result<Checkpoint> {
    check_params(cfg, store)?;
    let mut params = ParamStore::new();
    for (name, _) in cfg.param_shapes() {
        params.insert_frozen(name.as_str(), store.tensor(&name)?.clone())?;
    }
    Ok(Checkpoint {
        config: cfg.clone(),
        metadata: String::new(),
        params,
    })
}

/// Loads the backbone tensors of a checkpoint; all of them land in the frozen partition.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(BackboneConfig, ParamStore)> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.config
        .validate()
        .map_err(|e| Error::Format(e.to_string()))?;
    check_params(&ckpt.config, &ckpt.params)?;
    let mut store = ParamStore::new();
    for (name, _) in ckpt.config.param_shapes() {
        store.insert_frozen(name.as_str(), ckpt.params.tensor(&name)?.clone())?;
    }
    Ok((ckpt.config, store))
}

/// Runs the encoder stack on `seq` (`S×d_model`).
pub fn forward(tape: &mut Tape, store: &ParamStore, cfg: &BackboneConfig, seq: Var) -> Result<Var> {
    forward_probed(tape, store, cfg, seq, None)
}

/// As [`forward`], additionally pushing every attention probability matrix
/// (layer-major, then head) into `probe`.
pub fn forward_probed(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &BackboneConfig,
    seq: Var,
    mut probe: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 2 || shape[1] != cfg.d_model {
        return Err(Error::dim(
            "backbone input",
            &shape,
            &[shape[0], cfg.d_model],
        ));
    }
    cfg.check_seq_len(shape[0])?;
    let mut h = seq;
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("backbone.layer{l}.{s}");
        let normed = norm(tape, store, h, &p("attn_norm"))?;
        let attn = attention(tape, store, cfg, normed, &p("attn"), probe.as_deref_mut())?;
        h = tape.add(h, attn)?;

        let normed = norm(tape, store, h, &p("ffn_norm"))?;
        let w1 = tape.param(store, &p("ffn.w1"))?;
        let b1 = tape.param(store, &p("ffn.b1"))?;
        let w2 = tape.param(store, &p("ffn.w2"))?;
        let b2 = tape.param(store, &p("ffn.b2"))?;
        let z = tape.matmul(normed, w1)?;
        let z = tape.add_row(z, b1)?;
        let z = tape.gelu(z);
        let z = tape.matmul(z, w2)?;
        let z = tape.add_row(z, b2)?;
        h = tape.add(h, z)?;
    }
    if cfg.n_layers > 0 {
        h = norm(tape, store, h, "backbone.final_norm")?;
    }
    Ok(h)
}

/// Gradient-free convenience wrapper.
pub fn forward_tensor(store: &ParamStore, cfg: &BackboneConfig, seq: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(seq.clone());
    let y = forward(&mut tape, store, cfg, x)?;
    Ok(tape.value(y).clone())
}

fn norm(tape: &mut Tape, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.gamma"))?;
    let b = tape.param(store, &format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

fn attention(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &BackboneConfig,
    x: Var,
    prefix: &str,
    probe: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    let proj = |tape: &mut Tape, w: &str| -> Result<Var> {
        let wt = tape.param(store, &format!("{prefix}.w{w}"))?;
        let bt = tape.param(store, &format!("{prefix}.b{w}"))?;
        let y = tape.matmul(x, wt)?;
        tape.add_row(y, bt)
    };
    let q = proj(tape, "q")?;
    let k = proj(tape, "k")?;
    let v = proj(tape, "v")?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut maps = Vec::new();
    for head in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.masked_softmax(scores, cfg.causal)?;
        if probe.is_some() {
            maps.push(tape.value(probs).clone());
        }
        heads.push(tape.matmul(probs, vh)?);
    }
    if let Some(p) = probe {
        p.extend(maps);
    }
    let ctx = tape.concat_cols(&heads)?;
    let wo = tape.param(store, &format!("{prefix}.wo"))?;
    let bo = tape.param(store, &format!("{prefix}.bo"))?;
    let out = tape.matmul(ctx, wo)?;
    tape.add_row(out, bo)
}
