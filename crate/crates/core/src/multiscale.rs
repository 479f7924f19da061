//! Multiscale downsampling and the past-decomposable-mixing (PDM) stack.
//!
//! A look-back window is pooled into scales `x_0 … x_τ` whose lengths follow
//! `⌈L / 2^i⌉`. Each PDM layer splits every scale into a moving-average trend
//! and a seasonal residual, mixes seasonal parts fine → coarse and trend parts
//! coarse → fine with linear maps along the time axis, and adds a feed-forward
//! projection of the recombined signal back onto its input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{check_odd_kernel, Pooling, Tensor};

/// Ordered scales `x_0 … x_τ` sharing a channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleSet {
    scales: Vec<Tensor>,
}

impl MultiScaleSet {
    pub fn new(scales: Vec<Tensor>) -> Result<Self> {
        let first = scales
            .first()
            .ok_or_else(|| Error::Config("a multiscale set needs at least one scale".into()))?;
        let c = first.cols();
        for (i, s) in scales.iter().enumerate() {
            let (rows, cols) = s.dims2()?;
            let want = first.rows().div_ceil(1 << i);
            if cols != c || rows != want {
                return Err(Error::dim("multiscale set", s.shape(), &[want, c]));
            }
        }
        Ok(Self { scales })
    }

    pub fn scales(&self) -> &[Tensor] {
        &self.scales
    }

    pub fn into_scales(self) -> Vec<Tensor> {
        self.scales
    }

    pub fn tau(&self) -> usize {
        self.scales.len() - 1
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.scales.iter().map(Tensor::rows).collect()
    }
}

/// `⌈len / 2^i⌉` for `i = 0..=tau`.
pub fn scale_lengths(len: usize, tau: usize) -> Vec<usize> {
    (0..=tau).map(|i| len.div_ceil(1usize << i)).collect()
}

pub fn check_levels(len: usize, tau: usize) -> Result<()> {
    if tau >= usize::BITS as usize || len < (1usize << tau) {
        return Err(Error::Config(format!(
            "look-back {len} is shorter than 2^{tau}; downsampling level {tau} is not admissible"
        )));
    }
    Ok(())
}

/// Pools `x` (`L×C`) `tau` times with window 2, stride 2.
pub fn downsample(x: &Tensor, tau: usize, pooling: Pooling) -> Result<MultiScaleSet> {
    let (len, _) = x.dims2()?;
    check_levels(len, tau)?;
    let mut scales = Vec::with_capacity(tau + 1);
    scales.push(x.clone());
    for i in 0..tau {
        let next = scales[i].pool_time(pooling)?;
        scales.push(next);
    }
    MultiScaleSet::new(scales)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecompPair {
    pub seasonal: Tensor,
    pub trend: Tensor,
}

/// Moving-average trend (replicate padded, width `k`) and the seasonal residual.
pub fn decompose(x: &Tensor, k: usize) -> Result<DecompPair> {
    check_odd_kernel(k)?;
    if k < 3 {
        return Err(Error::Config(format!(
            "moving-average width must be ≥ 3, got {k}"
        )));
    }
    let trend = x.moving_average(k)?;
    let seasonal = x.sub(&trend)?;
    Ok(DecompPair { seasonal, trend })
}

/// Shape hyper-parameters of a PDM stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PdmConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub moving_avg: usize,
}

impl Default for PdmConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 32,
            d_ff: 64,
            moving_avg: 25,
        }
    }
}

impl PdmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("PDM stack needs at least one layer".into()));
        }
        if self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("PDM widths must be positive".into()));
        }
        check_odd_kernel(self.moving_avg)?;
        if self.moving_avg < 3 {
            return Err(Error::Config("moving-average width must be ≥ 3".into()));
        }
        Ok(())
    }
}

pub fn season_name(layer: usize, i: usize) -> String {
    format!("pdm.{layer}.season.{i}")
}

pub fn trend_name(layer: usize, i: usize) -> String {
    format!("pdm.{layer}.trend.{i}")
}

fn ffn_name(layer: usize, part: &str) -> String {
    format!("pdm.{layer}.ffn.{part}")
}

/// Registers trainable PDM parameters for scales of the given lengths.
pub fn init_pdm_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &PdmConfig,
    lengths: &[usize],
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let tau = lengths.len() - 1;
    for l in 0..cfg.layers {
        for i in 1..=tau {
            let bound = 1.0 / (lengths[i - 1] as f64).sqrt();
            store.insert_trainable(
                season_name(l, i),
                Tensor::uniform(&[lengths[i], lengths[i - 1]], bound, rng),
            )?;
        }
        for i in (0..tau).rev() {
            let bound = 1.0 / (lengths[i + 1] as f64).sqrt();
            store.insert_trainable(
                trend_name(l, i),
                Tensor::uniform(&[lengths[i], lengths[i + 1]], bound, rng),
            )?;
        }
        let b1 = 1.0 / (cfg.d_model as f64).sqrt();
        let b2 = 1.0 / (cfg.d_ff as f64).sqrt();
        store.insert_trainable(
            ffn_name(l, "w1"),
            Tensor::uniform(&[cfg.d_model, cfg.d_ff], b1, rng),
        )?;
        store.insert_trainable(ffn_name(l, "b1"), Tensor::uniform(&[cfg.d_ff], b1, rng))?;
        store.insert_trainable(
            ffn_name(l, "w2"),
            Tensor::uniform(&[cfg.d_ff, cfg.d_model], b2, rng),
        )?;
        store.insert_trainable(ffn_name(l, "b2"), Tensor::uniform(&[cfg.d_model], b2, rng))?;
    }
    Ok(())
}

fn mixing_weight(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<Var> {
    let w = tape.param(store, name)?;
    if tape.shape(w) != [rows, cols] {
        return Err(Error::dim(
            "pdm mixing weight",
            tape.shape(w),
            &[rows, cols],
        ));
    }
    Ok(w)
}

/// One PDM layer over embedded scales (`L_i × d` each) recorded on `tape`.
pub fn pdm_layer(
    tape: &mut Tape,
    store: &ParamStore,
    layer: usize,
    cfg: &PdmConfig,
    scales: &[Var],
) -> Result<Vec<Var>> {
    let lengths: Vec<usize> = scales.iter().map(|&v| tape.shape(v)[0]).collect();
    for &v in scales {
        if tape.shape(v).len() != 2 || tape.shape(v)[1] != cfg.d_model {
            return Err(Error::dim(
                "pdm input",
                tape.shape(v),
                &[usize::MAX, cfg.d_model],
            ));
        }
    }
    let tau = scales.len() - 1;

    let mut seasonal = Vec::with_capacity(scales.len());
    let mut trend = Vec::with_capacity(scales.len());
    for &x in scales {
        let t = tape.moving_average(x, cfg.moving_avg)?;
        seasonal.push(tape.sub(x, t)?);
        trend.push(t);
    }

    for i in 1..=tau {
        let w = mixing_weight(
            tape,
            store,
            &season_name(layer, i),
            lengths[i],
            lengths[i - 1],
        )?;
        let mixed = tape.matmul(w, seasonal[i - 1])?;
        seasonal[i] = tape.add(seasonal[i], mixed)?;
    }
    for i in (0..tau).rev() {
        let w = mixing_weight(
            tape,
            store,
            &trend_name(layer, i),
            lengths[i],
            lengths[i + 1],
        )?;
        let mixed = tape.matmul(w, trend[i + 1])?;
        trend[i] = tape.add(trend[i], mixed)?;
    }

    let w1 = tape.param(store, &ffn_name(layer, "w1"))?;
    let b1 = tape.param(store, &ffn_name(layer, "b1"))?;
    let w2 = tape.param(store, &ffn_name(layer, "w2"))?;
    let b2 = tape.param(store, &ffn_name(layer, "b2"))?;
    let mut out = Vec::with_capacity(scales.len());
    for i in 0..=tau {
        let mixed = tape.add(seasonal[i], trend[i])?;
        let h = tape.matmul(mixed, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2)?;
        let h = tape.add_row(h, b2)?;
        out.push(tape.add(scales[i], h)?);
    }
    Ok(out)
}

/// `cfg.layers` PDM layers with independent parameters.
pub fn pdm_stack(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &PdmConfig,
    scales: &[Var],
) -> Result<Vec<Var>> {
    cfg.validate()?;
    let mut current = scales.to_vec();
    for l in 0..cfg.layers {
        current = pdm_layer(tape, store, l, cfg, &current)?;
    }
    Ok(current)
}

/// Evaluates the stack on concrete tensors (no gradients kept).
pub fn pdm_stack_eval(
    store: &ParamStore,
    cfg: &PdmConfig,
    set: &MultiScaleSet,
) -> Result<MultiScaleSet> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = set
        .scales()
        .iter()
        .map(|s| tape.constant(s.clone()))
        .collect();
    let out = pdm_stack(&mut tape, store, cfg, &vars)?;
    MultiScaleSet::new(out.iter().map(|&v| tape.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn pooling_definitions() {
        let x = col(&[1.0, 2.0, 3.0, 4.0]);
        let s = |p| downsample(&x, 1, p).unwrap().scales()[1].data().to_vec();
        assert_eq!(s(Pooling::Avg), vec![1.5, 3.5]);
        assert_eq!(s(Pooling::Max), vec![2.0, 4.0]);
        assert_eq!(s(Pooling::Min), vec![1.0, 3.0]);
        let l2 = s(Pooling::L2);
        assert!((l2[0] - 2.5f64.sqrt()).abs() < 1e-15);
        assert!((l2[1] - 12.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_series_stays_constant() {
        let x = Tensor::full(&[12, 2], 3.25);
        for p in [Pooling::Avg, Pooling::Min, Pooling::Max] {
            for s in downsample(&x, 3, p).unwrap().scales() {
                assert!(s.data().iter().all(|&v| v == 3.25));
            }
        }
    }

    #[test]
    fn odd_lengths_follow_ceiling() {
        let x = Tensor::zeros(&[13, 1]);
        let set = downsample(&x, 3, Pooling::Avg).unwrap();
        assert_eq!(set.lengths(), vec![13, 7, 4, 2]);
        assert_eq!(scale_lengths(13, 3), set.lengths());
    }

    #[test]
    fn too_many_levels_is_config_error() {
        let x = Tensor::zeros(&[7, 1]);
        assert!(matches!(
            downsample(&x, 3, Pooling::Avg),
            Err(Error::Config(_))
        ));
        assert!(downsample(&Tensor::zeros(&[8, 1]), 3, Pooling::Avg).is_ok());
    }

    #[test]
    fn decompose_constant_and_ramp() {
        let c = Tensor::full(&[10, 2], -4.0);
        let d = decompose(&c, 5).unwrap();
        assert_eq!(d.trend, c);
        assert!(d.seasonal.data().iter().all(|&v| v == 0.0));

        let ramp = col(&(0..20).map(|t| 0.5 * t as f64 - 3.0).collect::<Vec<_>>());
        let d = decompose(&ramp, 5).unwrap();
        for t in 2..18 {
            assert!((d.trend.at(t, 0) - ramp.at(t, 0)).abs() < 1e-12);
        }
        assert!(matches!(decompose(&ramp, 4), Err(Error::Config(_))));
        assert!(matches!(decompose(&ramp, 1), Err(Error::Config(_))));
    }

    fn small_cfg(layers: usize) -> PdmConfig {
        PdmConfig {
            layers,
            d_model: 4,
            d_ff: 6,
            moving_avg: 3,
        }
    }

    fn random_set(len: usize, tau: usize, d: usize, rng: &mut ChaCha8Rng) -> MultiScaleSet {
        let scales = scale_lengths(len, tau)
            .into_iter()
            .map(|l| Tensor::uniform(&[l, d], 1.0, rng))
            .collect();
        MultiScaleSet::new(scales).unwrap()
    }

    fn zero_store(store: &ParamStore) -> ParamStore {
        let mut z = ParamStore::new();
        for (name, t) in store.trainable() {
            z.insert_trainable(name, Tensor::zeros(t.shape())).unwrap();
        }
        z
    }

    #[test]
    fn zero_parameters_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = small_cfg(2);
        let set = random_set(12, 2, 4, &mut rng);
        let mut store = ParamStore::new();
        init_pdm_params(&mut store, &cfg, &set.lengths(), &mut rng).unwrap();
        let out = pdm_stack_eval(&zero_store(&store), &cfg, &set).unwrap();
        assert_eq!(out, set);
    }

    #[test]
    fn single_scale_reduces_to_residual_ffn() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = small_cfg(1);
        let set = random_set(9, 0, 4, &mut rng);
        let mut store = ParamStore::new();
        init_pdm_params(&mut store, &cfg, &set.lengths(), &mut rng).unwrap();
        let out = pdm_stack_eval(&store, &cfg, &set).unwrap();
        let x = &set.scales()[0];
        let h = x
            .matmul(store.tensor("pdm.0.ffn.w1").unwrap())
            .unwrap()
            .add_row(store.tensor("pdm.0.ffn.b1").unwrap())
            .unwrap()
            .gelu()
            .matmul(store.tensor("pdm.0.ffn.w2").unwrap())
            .unwrap()
            .add_row(store.tensor("pdm.0.ffn.b2").unwrap())
            .unwrap();
        let expected = x.add(&h).unwrap();
        assert!(out.scales()[0].max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn lengths_and_width_are_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = PdmConfig {
            layers: 2,
            d_model: 8,
            d_ff: 8,
            moving_avg: 25,
        };
        let set = random_set(96, 2, 8, &mut rng);
        assert_eq!(set.lengths(), vec![96, 48, 24]);
        let mut store = ParamStore::new();
        init_pdm_params(&mut store, &cfg, &set.lengths(), &mut rng).unwrap();
        let out = pdm_stack_eval(&store, &cfg, &set).unwrap();
        assert_eq!(out.lengths(), vec![96, 48, 24]);
        assert!(out.scales().iter().all(|s| s.cols() == 8));
    }

    #[test]
    fn second_zero_layer_is_transparent() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let set = random_set(16, 2, 4, &mut rng);
        let mut two = ParamStore::new();
        init_pdm_params(&mut two, &small_cfg(2), &set.lengths(), &mut rng).unwrap();
        let mut one = ParamStore::new();
        for (name, t) in two.trainable() {
            if name.starts_with("pdm.0.") {
                one.insert_trainable(name, t.clone()).unwrap();
            }
        }
        for (name, t) in two.clone().trainable() {
            if name.starts_with("pdm.1.") {
                two.set_trainable(name, Tensor::zeros(t.shape())).unwrap();
            }
        }
        let a = pdm_stack_eval(&one, &small_cfg(1), &set).unwrap();
        let b = pdm_stack_eval(&two, &small_cfg(2), &set).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_mixing_weight_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = small_cfg(1);
        let mut store = ParamStore::new();
        init_pdm_params(&mut store, &cfg, &[16, 8, 4], &mut rng).unwrap();
        let set = random_set(12, 2, 4, &mut rng);
        assert!(matches!(
            pdm_stack_eval(&store, &cfg, &set),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn gradient_reaches_every_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = small_cfg(2);
        let set = random_set(12, 2, 4, &mut rng);
        let mut store = ParamStore::new();
        init_pdm_params(&mut store, &cfg, &set.lengths(), &mut rng).unwrap();
        let seeds: Vec<Tensor> = set
            .scales()
            .iter()
            .map(|s| Tensor::uniform(s.shape(), 1.0, &mut rng))
            .collect();
        let objective = |store: &ParamStore| -> (f64, Option<crate::autodiff::Gradients>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = set
                .scales()
                .iter()
                .map(|s| tape.constant(s.clone()))
                .collect();
            let out = pdm_stack(&mut tape, store, &cfg, &vars).unwrap();
            let mut terms = Vec::new();
            for (o, s) in out.iter().zip(&seeds) {
                let c = tape.constant(s.clone());
                let p = tape.mul(*o, c).unwrap();
                terms.push(tape.sum(p));
            }
            let mut total = terms[0];
            for t in &terms[1..] {
                total = tape.add(total, *t).unwrap();
            }
            let value = tape.value(total).data()[0];
            (
                value,
                Some(tape.backward(total, &Tensor::scalar(1.0)).unwrap()),
            )
        };
        let (_, grads) = objective(&store);
        let grads = grads.unwrap();
        for (name, _) in store.trainable() {
            let g = grads
                .param(name)
                .unwrap_or_else(|| panic!("no gradient for {name}"));
            assert!(g.norm() > 0.0, "{name} has zero gradient");
        }
        let h = 1e-5;
        for name in [
            "pdm.0.season.1",
            "pdm.1.trend.0",
            "pdm.0.ffn.w1",
            "pdm.1.ffn.b2",
        ] {
            let mut plus = store.clone();
            plus.trainable_mut(name).unwrap().data_mut()[0] += h;
            let mut minus = store.clone();
            minus.trainable_mut(name).unwrap().data_mut()[0] -= h;
            let fd = (objective(&plus).0 - objective(&minus).0) / (2.0 * h);
            let an = grads.param(name).unwrap().data()[0];
            assert!(
                (fd - an).abs() <= 1e-6 * an.abs().max(1.0),
                "{name}: {an} vs {fd}"
            );
        }
    }
}
