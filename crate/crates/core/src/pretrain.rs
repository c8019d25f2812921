//! Masked signal-token modelling: per-channel random patch masks filled with
//! the fleet's task token, reconstruction loss over masked samples only, and
//! the mixed-fleet pretraining loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::FleetSpec;
use crate::error::{Error, Result};
use crate::model::{decode_recon, encode, ModelConfig};
use crate::par;
use crate::tensor::{Real, Tensor, Var};
use crate::tokenizer::{PreparedWindow, TokenSequence};
use crate::training::{reduce_grads, tag, Adam, ParameterStore, SeedBank, Session, Stream};

/// Patch mask `[M, P]`: `true` = kept, `false` = masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub channels: usize,
    pub patches: usize,
    pub ratio_bits: u64,
    pub seed: u64,
    keep: Vec<bool>,
}

/// Masked patches per channel: `round(r·P)` clamped to `[1, P − 1]`.
pub fn masked_per_channel(patches: usize, ratio: f64) -> usize {
    ((ratio * patches as f64).round() as usize).clamp(1, patches - 1)
}

impl MaskPlan {
    /// Independent per-channel masks, regenerated exactly from
    /// `(seed, M, P, r)`.
    pub fn generate(seed: u64, channels: usize, patches: usize, ratio: f64) -> Result<MaskPlan> {
        if patches < 2 {
            return Err(Error::Config(format!(
                "masking needs at least 2 patches per channel, got {patches}"
            )));
        }
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {ratio} must lie in (0, 1)")));
        }
        let k = masked_per_channel(patches, ratio);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = vec![true; channels * patches];
        let mut idx: Vec<usize> = (0..patches).collect();
        for c in 0..channels {
            idx.shuffle(&mut rng);
            for &q in &idx[..k] {
                keep[c * patches + q] = false;
            }
        }
        Ok(MaskPlan {
            channels,
            patches,
            ratio_bits: ratio.to_bits(),
            seed,
            keep,
        })
    }

    /// Plan from an explicit keep grid (row-major `[M, P]`).
    pub fn from_keep(channels: usize, patches: usize, keep: Vec<bool>) -> Result<MaskPlan> {
        if keep.len() != channels * patches {
            return Err(Error::Contract(format!(
                "keep grid has {} entries, expected {channels}×{patches}",
                keep.len()
            )));
        }
        Ok(MaskPlan {
            channels,
            patches,
            ratio_bits: 0,
            seed: 0,
            keep,
        })
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, channel: usize, patch: usize) -> bool {
        self.keep[channel * self.patches + patch]
    }

    /// Row-major `[M, P]` flags, `true` where the patch is masked.
    pub fn fill_flags(&self) -> Vec<bool> {
        self.keep.iter().map(|&k| !k).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    /// Row-major `[M, span]` flags marking samples inside any masked patch.
    pub fn sample_mask(&self, patch_len: usize, stride: usize) -> Vec<bool> {
        let span = (self.patches - 1) * stride + patch_len;
        let mut out = vec![false; self.channels * span];
        for c in 0..self.channels {
            for q in 0..self.patches {
                if !self.is_kept(c, q) {
                    let row = &mut out[c * span..(c + 1) * span];
                    row[q * stride..q * stride + patch_len].fill(true);
                }
            }
        }
        out
    }
}

/// Replace masked patch tokens with the first task token vector. Prompt,
/// statistic and task sections are untouched.
pub fn apply_mask<T: Real>(tok: &TokenSequence<T>, plan: &MaskPlan, task_token: &Tensor<T>) -> Result<TokenSequence<T>> {
    let shape = tok.tokens.shape();
    let (m, n, d) = (shape[0], shape[1], shape[2]);
    if plan.channels != m || plan.patches != tok.patch_count() {
        return Err(Error::Contract(format!(
            "mask plan is {}×{}, token grid has {m} channels and {} patches",
            plan.channels,
            plan.patches,
            tok.patch_count()
        )));
    }
    if task_token.rank() != 2 || task_token.shape()[1] != d {
        return Err(Error::Contract(format!(
            "task token shape {:?} does not match model width {d}",
            task_token.shape()
        )));
    }
    let fill = &task_token.data()[..d];
    let mut out = tok.clone();
    let data = out.tokens.data_mut();
    for c in 0..m {
        for q in 0..plan.patches {
            if !plan.is_kept(c, q) {
                let pos = tok.sections.patch.start + q;
                data[(c * n + pos) * d..(c * n + pos + 1) * d].copy_from_slice(fill);
            }
        }
    }
    Ok(out)
}

/// Mean squared error between `x_hat` and `x_norm` over the samples of
/// masked patches only.
pub fn mstm_loss_graph<T: Real>(
    sess: &mut Session<'_, T>,
    x_norm: Var,
    x_hat: Var,
    plan: &MaskPlan,
    patch_len: usize,
    stride: usize,
) -> Result<Var> {
    let (sx, sh) = (sess.g.shape(x_norm).to_vec(), sess.g.shape(x_hat).to_vec());
    if sx != sh {
        return Err(Error::Contract(format!("mstm_loss shapes differ: {sx:?} vs {sh:?}")));
    }
    let mask = plan.sample_mask(patch_len, stride);
    if mask.len() != sx.iter().product::<usize>() {
        return Err(Error::Contract(format!(
            "mask plan covers {} samples, reconstruction has shape {sx:?}",
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Contract("mask plan masks no samples".into()));
    }
    let a = sess.g.masked_select(x_hat, &mask)?;
    let b = sess.g.masked_select(x_norm, &mask)?;
    Ok(sess.g.mse(a, b)?)
}

/// Value-level masked reconstruction loss.
pub fn mstm_loss<T: Real>(x_norm: &Tensor<T>, x_hat: &Tensor<T>, plan: &MaskPlan, patch_len: usize, stride: usize) -> Result<f64> {
    let store = ParameterStore::<T>::new(0);
    let mut sess = Session::new(&store, false);
    let x = sess.constant(x_norm.clone());
    let h = sess.constant(x_hat.clone());
    let l = mstm_loss_graph(&mut sess, x, h, plan, patch_len, stride)?;
    Ok(sess.g.value(l).item().f64())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 5,
            batch_size: 256,
            mask_ratio: 0.3,
        }
    }
}

/// Prepared windows of one fleet.
#[derive(Debug, Clone)]
pub struct FleetWindows<T: Real> {
    pub spec: FleetSpec,
    pub windows: Vec<PreparedWindow<T>>,
}

/// Forward + masked loss for one window; with `track` the parameter
/// gradients come back too.
pub fn window_loss<T: Real>(
    store: &ParameterStore<T>,
    pw: &PreparedWindow<T>,
    plan: &MaskPlan,
    model: &ModelConfig,
    dropout: Option<ChaCha8Rng>,
    track: bool,
) -> Result<(f64, Vec<(String, Tensor<T>)>)> {
    let mut sess = Session::new(store, track);
    let fill = plan.fill_flags();
    let mut rng = dropout;
    let h = encode(&mut sess, pw, model, Some(&fill), rng.as_mut())?;
    let recon = decode_recon(&mut sess, h, pw)?;
    let x = sess.constant(pw.x_norm.clone());
    let loss = mstm_loss_graph(&mut sess, x, recon, plan, pw.patch_len, pw.stride)?;
    let value = sess.g.value(loss).item().f64();
    let grads = if track { sess.param_grads(loss)? } else { Vec::new() };
    Ok((value, grads))
}

/// Masked loss of one window under a plan for `(seed, window start)`.
pub fn plan_for<T: Real>(bank: &SeedBank, path: &[u64], pw: &PreparedWindow<T>, ratio: f64) -> Result<MaskPlan> {
    let mut full = path.to_vec();
    full.push(tag(&pw.fleet_id));
    full.push(pw.start as u64);
    MaskPlan::generate(bank.seed(Stream::Mask, &full), pw.channels(), pw.patch_count(), ratio)
}

/// One optimizer step over a batch: per-window graphs in parallel, gradients
/// reduced in window order. Returns the mean batch loss.
pub fn batch_step<T: Real>(
    store: &mut ParameterStore<T>,
    adam: &mut Adam<T>,
    batch: &[(&PreparedWindow<T>, MaskPlan, Option<ChaCha8Rng>)],
    model: &ModelConfig,
) -> Result<f64> {
    let results = {
        let shared: &ParameterStore<T> = store;
        par::map(batch, |_, (pw, plan, rng)| window_loss(shared, pw, plan, model, rng.clone(), true))
    };
    let mut losses = Vec::with_capacity(results.len());
    let mut lists = Vec::with_capacity(results.len());
    for r in results {
        let (l, g) = r?;
        if !l.is_finite() {
            return Err(Error::Data(format!("non-finite pretraining loss {l}")));
        }
        losses.push(l);
        lists.push(g);
    }
    let n = losses.len() as f64;
    for (name, g) in reduce_grads(lists, 1.0 / n) {
        store.accumulate_grad(&name, &g)?;
    }
    adam.step(store)?;
    Ok(losses.iter().sum::<f64>() / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgressLine {
    pub epoch: usize,
    pub fleet: String,
    pub step: u64,
    pub loss: f64,
}

impl std::fmt::Display for ProgressLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.epoch, self.fleet, self.step, self.loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    /// Mean batch loss per fleet, in fleet order.
    pub fleet_loss: Vec<(String, f64)>,
    pub mean_loss: f64,
}

/// One pass over every fleet's windows in fleet-homogeneous mini-batches,
/// shuffled across fleets.
pub fn pretrain_epoch<T: Real>(
    corpus: &[FleetWindows<T>],
    store: &mut ParameterStore<T>,
    adam: &mut Adam<T>,
    cfg: &PretrainConfig,
    model: &ModelConfig,
    bank: &SeedBank,
    epoch: usize,
    progress: &mut dyn FnMut(&ProgressLine),
) -> Result<EpochStats> {
    if corpus.is_empty() || corpus.iter().all(|f| f.windows.is_empty()) {
        return Err(Error::Data("pretraining needs at least one non-empty fleet".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut batches: Vec<(usize, Vec<usize>)> = Vec::new();
    for (fi, fleet) in corpus.iter().enumerate() {
        let mut idx: Vec<usize> = (0..fleet.windows.len()).collect();
        idx.shuffle(&mut bank.rng(Stream::Shuffle, &[epoch as u64, tag(&fleet.spec.fleet_id)]));
        for chunk in idx.chunks(cfg.batch_size) {
            batches.push((fi, chunk.to_vec()));
        }
    }
    batches.shuffle(&mut bank.rng(Stream::Shuffle, &[epoch as u64, u64::MAX]));

    let mut per_fleet: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (fi, idx) in &batches {
        let step = adam.step_count();
        let fleet = &corpus[*fi];
        let batch = idx
            .iter()
            .map(|&i| {
                let pw = &fleet.windows[i];
                let plan = plan_for(bank, &[epoch as u64, step], pw, cfg.mask_ratio)?;
                let rng = (model.dropout > 0.0)
                    .then(|| bank.rng(Stream::Dropout, &[step, tag(&pw.fleet_id), pw.start as u64]));
                Ok((pw, plan, rng))
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = batch_step(store, adam, &batch, model)?;
        let e = per_fleet.entry(*fi).or_insert((0.0, 0));
        e.0 += loss;
        e.1 += 1;
        progress(&ProgressLine {
            epoch,
            fleet: fleet.spec.fleet_id.clone(),
            step: adam.step_count(),
            loss,
        });
    }
    let fleet_loss: Vec<(String, f64)> = per_fleet
        .iter()
        .map(|(&fi, &(s, n))| (corpus[fi].spec.fleet_id.clone(), s / n as f64))
        .collect();
    let total: f64 = per_fleet.values().map(|(s, _)| s).sum();
    Ok(EpochStats {
        epoch,
        steps: batches.len(),
        mean_loss: total / batches.len() as f64,
        fleet_loss,
    })
}

/// Mean masked loss over `windows` with plans fixed by `bank` (no dropout,
/// no gradients). Used to compare a model before and after training.
pub fn eval_mstm<T: Real>(
    store: &ParameterStore<T>,
    windows: &[&PreparedWindow<T>],
    model: &ModelConfig,
    ratio: f64,
    bank: &SeedBank,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    let eval_model = ModelConfig {
        dropout: 0.0,
        ..model.clone()
    };
    let losses = par::map(windows, |_, pw| {
        let plan = plan_for(bank, &[u64::MAX], pw, ratio)?;
        window_loss(store, pw, &plan, &eval_model, None, false).map(|(l, _)| l)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / windows.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_counts_and_reproducibility() {
        let a = MaskPlan::generate(7, 3, 16, 0.3).unwrap();
        assert_eq!(a, MaskPlan::generate(7, 3, 16, 0.3).unwrap());
        assert_ne!(a, MaskPlan::generate(8, 3, 16, 0.3).unwrap());
        for c in 0..3 {
            let masked = (0..16).filter(|&q| !a.is_kept(c, q)).count();
            assert_eq!(masked, 5);
        }
        let tiny = MaskPlan::generate(1, 2, 4, 0.01).unwrap();
        assert_eq!(tiny.masked_count(), 2);
        let heavy = MaskPlan::generate(1, 2, 4, 0.99).unwrap();
        assert_eq!(heavy.masked_count(), 6);
        assert!(MaskPlan::generate(1, 2, 1, 0.3).is_err());
    }

    #[test]
    fn single_masked_patch_offset_gives_unit_loss() {
        let keep = vec![true, false, true, true];
        let plan = MaskPlan::from_keep(1, 4, keep).unwrap();
        let x = Tensor::<f64>::from_f64(&[1, 8], &[0.5, -0.25, 0.75, 1.5, -2.0, 0.125, 3.0, -1.0]).unwrap();
        let mut h = x.clone();
        h.data_mut()[2] += 1.0;
        h.data_mut()[3] += 1.0;
        assert_eq!(mstm_loss(&x, &h, &plan, 2, 2).unwrap(), 1.0);
        assert_eq!(mstm_loss(&x, &x, &plan, 2, 2).unwrap(), 0.0);
    }

    #[test]
    fn sample_mask_with_overlap() {
        let plan = MaskPlan::from_keep(1, 3, vec![true, false, true]).unwrap();
        let m = plan.sample_mask(4, 2);
        assert_eq!(m, vec![false, false, true, true, true, true, false, false]);
    }
}
