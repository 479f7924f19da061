//! Empirical neural tangent kernel over the trainable parameters, and the study
//! of how the kernel moves as the number of downsampling levels changes.
//!
//! Models are scalarised by summing every output entry, so the kernel is
//! `K(x, x') = ∇_Φ f(x) · ∇_Φ f(x')` with `f(x) = Σ_j ŷ_j(x)`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::backbone::BackboneConfig;
use crate::data::{NormStats, WindowSet};
use crate::embedding::PromptSpec;
use crate::error::{Error, Result};
use crate::forecaster::{train, MixerModel, ModelConfig, TrainConfig};
use crate::multiscale::check_levels;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Default cap on the `n × |Φ|` Jacobian block.
pub const DEFAULT_BUDGET_BYTES: u64 = 1 << 30;

/// A model whose scalar output can be recorded on a tape.
pub trait TapeModel: Sync {
    type Input: Sync;

    fn params(&self) -> &ParamStore;

    /// Records `f(x)`, a one-element tensor.
    fn scalar_output(&self, tape: &mut Tape, x: &Self::Input) -> Result<Var>;
}

/// Normalised look-back window and its calendar marks.
#[derive(Clone, Debug, PartialEq)]
pub struct NtkSample {
    pub input: Tensor,
    pub marks: Tensor,
}

impl TapeModel for MixerModel {
    type Input = NtkSample;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn scalar_output(&self, tape: &mut Tape, x: &NtkSample) -> Result<Var> {
        let y = self.forward(tape, &x.input, &x.marks)?;
        Ok(tape.sum(y))
    }
}

/// `f(x) = θᵀx` with a single trainable vector `probe.theta`.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    params: ParamStore,
}

impl LinearProbe {
    pub const THETA: &'static str = "probe.theta";

    pub fn new(theta: Tensor) -> Result<Self> {
        let mut params = ParamStore::new();
        params.insert_trainable(Self::THETA, theta.reshape(&[theta.len()])?)?;
        Ok(Self { params })
    }
}

impl TapeModel for LinearProbe {
    type Input = Tensor;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn scalar_output(&self, tape: &mut Tape, x: &Tensor) -> Result<Var> {
        let theta = tape.param(&self.params, Self::THETA)?;
        let n = tape.value(theta).len();
        let x = tape.constant(x.reshape(&[n])?);
        let prod = tape.mul(theta, x)?;
        Ok(tape.sum(prod))
    }
}

/// Number of trainable scalars, i.e. the Jacobian length.
pub fn jacobian_len<M: TapeModel>(model: &M) -> usize {
    model.params().num_trainable_scalars()
}

/// `∇_Φ f(x)` flattened in parameter registration order; parameters the output
/// does not reach contribute zeros. A model with no trainable parameters yields
/// an empty vector.
pub fn jacobian<M: TapeModel>(model: &M, x: &M::Input) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let f = model.scalar_output(&mut tape, x)?;
    if tape.value(f).len() != 1 {
        return Err(Error::dim("ntk scalar output", tape.shape(f), &[1]));
    }
    let grads = tape.backward(f, &Tensor::scalar(1.0))?;
    let mut out = Vec::with_capacity(jacobian_len(model));
    for (name, t) in model.params().trainable() {
        match grads.param(name) {
            Some(g) => out.extend_from_slice(g.data()),
            None => out.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    Ok(out)
}

/// Kernel matrix with the ids of the samples it was computed on.
#[derive(Clone, Debug, PartialEq)]
pub struct NtkMatrix {
    pub values: Tensor,
    pub sample_ids: Vec<String>,
    /// Downsampling level of the model the kernel belongs to.
    pub tau: usize,
}

impl NtkMatrix {
    pub fn n(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.n();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..i {
                worst = worst.max((self.values.at(i, j) - self.values.at(j, i)).abs());
            }
        }
        worst
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let n = self.n();
        let m = DMatrix::from_row_slice(n, n, self.values.data());
        let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Smallest eigenvalue is at least `-1e-8` times the largest one.
    pub fn is_psd(&self) -> bool {
        let ev = self.eigenvalues();
        let (lo, hi) = (ev[0], ev[ev.len() - 1]);
        lo >= -1e-8 * hi.abs().max(f64::MIN_POSITIVE)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_grid(path, &self.values, &self.sample_ids)
    }
}

/// Gram matrix of per-sample Jacobians. Fails with a resource error when the
/// `n × |Φ|` Jacobian block would exceed `budget_bytes`.
pub fn ntk_matrix<M: TapeModel>(
    model: &M,
    samples: &[M::Input],
    sample_ids: &[String],
    tau: usize,
    budget_bytes: u64,
) -> Result<NtkMatrix> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "an NTK needs at least 2 samples, got {n}"
        )));
    }
    if sample_ids.len() != n {
        return Err(Error::Contract(format!(
            "{} sample ids for {n} samples",
            sample_ids.len()
        )));
    }
    let required = (n as u64) * (jacobian_len(model) as u64) * 8;
    if required > budget_bytes {
        return Err(Error::Resource {
            required_bytes: required,
            budget_bytes,
        });
    }
    let jacobians: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|x| jacobian(model, x))
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; n * n];
    for a in 0..n {
        for b in a..n {
            let k: f64 = jacobians[a]
                .iter()
                .zip(&jacobians[b])
                .map(|(p, q)| p * q)
                .sum();
            values[a * n + b] = k;
            values[b * n + a] = k;
        }
    }
    let values = Tensor::new(vec![n, n], values)?;
    values.check_finite("ntk")?;
    Ok(NtkMatrix {
        values,
        sample_ids: sample_ids.to_vec(),
        tau,
    })
}

fn check_comparable(a: &NtkMatrix, b: &NtkMatrix) -> Result<()> {
    if a.sample_ids != b.sample_ids {
        return Err(Error::Contract(
            "kernels were computed on different sample sets and are not comparable".into(),
        ));
    }
    if a.values.shape() != b.values.shape() {
        return Err(Error::dim(
            "ntk_distance",
            a.values.shape(),
            b.values.shape(),
        ));
    }
    Ok(())
}

/// Frobenius norm of `reference − other`.
pub fn ntk_distance(reference: &NtkMatrix, other: &NtkMatrix) -> Result<f64> {
    check_comparable(reference, other)?;
    Ok(reference.values.sub(&other.values)?.norm())
}

/// `|A − B|` scaled so its largest entry is 1 (all zeros when `A == B`).
pub fn normalized_abs_diff(a: &NtkMatrix, b: &NtkMatrix) -> Result<Tensor> {
    check_comparable(a, b)?;
    let d = a.values.sub(&b.values)?.map(f64::abs);
    let max = d.data().iter().copied().fold(0.0, f64::max);
    Ok(if max > 0.0 { d.scale(1.0 / max) } else { d })
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Everything shared by the models of a sweep; only τ differs between them.
pub struct SweepSetup<'a> {
    pub model: &'a ModelConfig,
    pub backbone: &'a BackboneConfig,
    pub backbone_params: &'a ParamStore,
    pub stats: &'a NormStats,
    pub prompt: &'a PromptSpec,
    /// Normalised training windows.
    pub train: &'a WindowSet,
    pub train_config: &'a TrainConfig,
    pub samples: &'a [NtkSample],
    pub sample_ids: &'a [String],
    pub budget_bytes: u64,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub reference_tau: usize,
    /// `(τ, d_NTK(τ))` in the order requested.
    pub curve: Vec<(usize, f64)>,
    pub kernels: Vec<NtkMatrix>,
    pub reference: NtkMatrix,
}

impl SweepResult {
    /// Spearman correlation between τ and the distance.
    pub fn spearman(&self) -> Option<f64> {
        let t: Vec<f64> = self.curve.iter().map(|c| c.0 as f64).collect();
        let d: Vec<f64> = self.curve.iter().map(|c| c.1).collect();
        spearman(&t, &d)
    }

    /// τ with the largest distance (first one on ties).
    pub fn argmax_tau(&self) -> usize {
        self.curve
            .iter()
            .fold(None::<(usize, f64)>, |best, &(t, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((t, d)),
            })
            .map_or(self.reference_tau, |b| b.0)
    }

    pub fn decreasing_trend(&self) -> bool {
        self.spearman().is_some_and(|r| r < 0.0)
    }

    pub fn summary(&self) -> String {
        let min_tau = self
            .curve
            .iter()
            .map(|c| c.0)
            .min()
            .unwrap_or(self.reference_tau);
        let rho = self
            .spearman()
            .map_or("NA".to_string(), |r| format!("{r:.6}"));
        format!(
            "reference_tau={}\nspearman={rho}\nargmax_tau={}\nmax_at_smallest_tau={}\ndecreasing_trend={}\n",
            self.reference_tau,
            self.argmax_tau(),
            self.argmax_tau() == min_tau,
            self.decreasing_trend()
        )
    }

    /// Writes `curve.csv`, `ntk_tau{τ}.csv`, `diff_tau{τ}.csv` and `summary.txt`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut curve = String::from("tau,distance\n");
        for (t, d) in &self.curve {
            curve.push_str(&format!("{t},{d}\n"));
        }
        fs::write(dir.join("curve.csv"), curve)?;
        for k in &self.kernels {
            k.write_csv(dir.join(format!("ntk_tau{}.csv", k.tau)))?;
            write_grid(
                dir.join(format!("diff_tau{}.csv", k.tau)),
                &normalized_abs_diff(&self.reference, k)?,
                &k.sample_ids,
            )?;
        }
        fs::write(dir.join("summary.txt"), self.summary())?;
        Ok(())
    }
}

/// Trains one model per τ (same seed, data and budget) and measures each
/// post-training kernel against the kernel of the largest τ.
pub fn tau_sweep(setup: &SweepSetup<'_>, taus: &[usize]) -> Result<SweepResult> {
    let reference_tau = *taus
        .iter()
        .max()
        .ok_or_else(|| Error::Config("tau list is empty".into()))?;
    for &t in taus {
        check_levels(setup.model.look_back, t)?;
    }
    let kernel_for = |tau: usize| -> Result<NtkMatrix> {
        let cfg = ModelConfig {
            tau,
            ..setup.model.clone()
        };
        let mut model = MixerModel::new(
            cfg,
            setup.backbone.clone(),
            setup.backbone_params.clone(),
            setup.stats.clone(),
            setup.prompt.clone(),
            setup.train_config.seed,
        )?;
        train(&mut model, setup.train, None, setup.train_config)?;
        ntk_matrix(
            &model,
            setup.samples,
            setup.sample_ids,
            tau,
            setup.budget_bytes,
        )
    };
    let mut kernels = Vec::with_capacity(taus.len());
    let mut reference = None;
    for &t in taus {
        let k = kernel_for(t)?;
        if t == reference_tau && reference.is_none() {
            reference = Some(k.clone());
        }
        kernels.push(k);
    }
    let reference = reference.expect("reference tau is in the list");
    let curve = kernels
        .iter()
        .map(|k| Ok((k.tau, ntk_distance(&reference, k)?)))
        .collect::<Result<_>>()?;
    Ok(SweepResult {
        reference_tau,
        curve,
        kernels,
        reference,
    })
}

fn write_grid(path: impl AsRef<Path>, values: &Tensor, ids: &[String]) -> Result<()> {
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec![String::new()];
    header.extend(ids.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(values.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
