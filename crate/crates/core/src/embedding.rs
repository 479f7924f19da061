//! Token, calendar and positional embeddings for each scale, plus the frozen
//! prompt-prefix embedding.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::N_MARKS;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Padding, Tensor};

pub const TOKEN_CONV: &str = "embed.token_conv";
pub const TOKEN_KERNEL: usize = 3;

/// Calendar tables: name and row count, in mark-column order.
pub const TEMPORAL_TABLES: [(&str, usize); N_MARKS] = [
    ("embed.month", 12),
    ("embed.day", 31),
    ("embed.weekday", 7),
    ("embed.hour", 24),
];

pub const DEFAULT_VOCAB: &str = include_str!("../assets/vocab.txt");
pub const UNK_TOKEN: &str = "<unk>";
pub const UNK_ID: usize = 0;

pub fn init_embedding_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    channels: usize,
    d_model: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = 1.0 / ((channels * TOKEN_KERNEL) as f64).sqrt();
    store.insert_trainable(
        TOKEN_CONV,
        Tensor::uniform(&[d_model, channels, TOKEN_KERNEL], bound, rng),
    )?;
    for (name, rows) in TEMPORAL_TABLES {
        store.insert_trainable(name, Tensor::normal(&[rows, d_model], 0.1, rng))?;
    }
    Ok(())
}

/// Fixed sinusoidal encoding: column `2i` is `sin(pos / 10000^(2i/d))`, column `2i+1` the cosine.
pub fn positional_encoding(len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; len * d_model];
    for pos in 0..len {
        for j in 0..d_model {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            data[pos * d_model + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![len, d_model], data)
}

/// Calendar marks of scale `i`: every `2^i`-th row of the scale-0 marks.
pub fn marks_for_scale(marks: &Tensor, scale: usize) -> Result<Tensor> {
    marks.subsample_rows(1 << scale)
}

fn mark_ids(marks: &Tensor, col: usize, rows: usize, what: &str) -> Result<Vec<usize>> {
    (0..marks.rows())
        .map(|r| {
            let v = marks.at(r, col);
            if v < 0.0 || v.fract() != 0.0 || v >= rows as f64 {
                Err(Error::Index {
                    what: format!("{what} table (mark value {v})"),
                    index: v.max(0.0) as usize,
                    size: rows,
                })
            } else {
                Ok(v as usize)
            }
        })
        .collect()
}

/// `conv1d(x) + Σ calendar lookups + positional encoding`, shape `L_i × d`.
pub fn embed_scale(tape: &mut Tape, store: &ParamStore, x: Var, marks: &Tensor) -> Result<Var> {
    let len = tape.shape(x)[0];
    if marks.dims2()? != (len, N_MARKS) {
        return Err(Error::dim(
            "embed_scale marks",
            marks.shape(),
            &[len, N_MARKS],
        ));
    }
    let kernels = tape.param(store, TOKEN_CONV)?;
    let d_model = tape.shape(kernels)[0];
    let mut out = tape.conv1d(x, kernels, Padding::Replicate)?;
    for (col, (name, rows)) in TEMPORAL_TABLES.iter().enumerate() {
        let ids = mark_ids(marks, col, *rows, name)?;
        let table = tape.param(store, name)?;
        let looked = tape.gather_rows(table, &ids)?;
        out = tape.add(out, looked)?;
    }
    let pe = tape.constant(positional_encoding(len, d_model));
    tape.add(out, pe)
}

/// Toy vocabulary: one token per line, the line number is the id, line 0 is `<unk>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .collect();
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::Config(format!(
                "vocabulary line 0 must be `{UNK_TOKEN}`"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Config(format!("vocabulary line {id} is empty")));
            }
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::Config(format!(
                    "vocabulary token `{t}` appears twice"
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_VOCAB).expect("bundled vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// Lower-cases and splits into letter runs, single digits and single punctuation marks.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphabetic() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub text: String,
    pub token_ids: Vec<usize>,
    pub vocab_size: usize,
}

pub fn tokenize_prompt(text: &str, vocab: &Vocab) -> PromptSpec {
    PromptSpec {
        text: text.to_string(),
        token_ids: split_tokens(text).iter().map(|t| vocab.id(t)).collect(),
        vocab_size: vocab.len(),
    }
}

/// Looks the prompt ids up in the frozen table `table`; `None` for an empty prompt.
pub fn embed_prompt(
    tape: &mut Tape,
    store: &ParamStore,
    table: &str,
    ids: &[usize],
) -> Result<Option<Var>> {
    if ids.is_empty() {
        return Ok(None);
    }
    let e = tape.param(store, table)?;
    Ok(Some(tape.gather_rows(e, ids)?))
}
