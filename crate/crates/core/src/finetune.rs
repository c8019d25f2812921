//! Joint baseline-prediction / anomaly-detection objective and head-only
//! fine-tuning on top of a frozen backbone.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::data::FleetSpec;
use crate::error::{Error, Result};
use crate::model::{denormalize_graph, encode, Head, ModelConfig};
use crate::par;
use crate::tensor::{Real, Tensor, Var};
use crate::tokenizer::PreparedWindow;
use crate::training::{count_params, reduce_grads, tag, Adam, AdamConfig, ParameterStore, SeedBank, Session, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct JointLossConfig {
    pub alpha: f64,
    pub ad_threshold: f64,
}

impl Default for JointLossConfig {
    fn default() -> Self {
        JointLossConfig {
            alpha: 10.0,
            ad_threshold: 0.5,
        }
    }
}

/// Whether a BP loss had any normal timesteps to learn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BpSupport {
    Normal(usize),
    NoNormalSupport,
}

/// `Σ (1 − y_ad)(y − ŷ)² / #normal` over every row of `y`/`ŷ`
/// (`[C, span]`), labels shared by all rows. With no normal timestep the
/// loss is an exact zero that still carries a (zero) gradient to `y_hat`.
pub fn bp_loss_graph<T: Real>(
    sess: &mut Session<'_, T>,
    y: Var,
    y_hat: Var,
    labels: &[u8],
) -> Result<(Var, BpSupport)> {
    let shape = sess.g.shape(y_hat).to_vec();
    if sess.g.shape(y) != shape.as_slice() || shape.len() != 2 || shape[1] != labels.len() {
        return Err(Error::Contract(format!(
            "bp_loss shapes: target {:?}, prediction {shape:?}, labels {}",
            sess.g.shape(y),
            labels.len()
        )));
    }
    let normal: Vec<bool> = (0..shape[0]).flat_map(|_| labels.iter().map(|&l| l == 0)).collect();
    let count = labels.iter().filter(|&&l| l == 0).count();
    if count == 0 {
        let s = sess.g.sum(y_hat);
        return Ok((sess.g.scale(s, 0.0), BpSupport::NoNormalSupport));
    }
    let a = sess.g.masked_select(y_hat, &normal)?;
    let b = sess.g.masked_select(y, &normal)?;
    Ok((sess.g.mse(a, b)?, BpSupport::Normal(count)))
}

/// `mean((y_ad − ŷ_ad)²)`.
pub fn ad_loss_graph<T: Real>(sess: &mut Session<'_, T>, y_ad: Var, y_hat: Var) -> Result<Var> {
    Ok(sess.g.mse(y_hat, y_ad)?)
}

/// `l_bp + α·l_ad`.
pub fn total_loss_graph<T: Real>(sess: &mut Session<'_, T>, l_bp: Var, l_ad: Var, alpha: f64) -> Result<Var> {
    let w = sess.g.scale(l_ad, alpha);
    Ok(sess.g.add(l_bp, w)?)
}

pub fn bp_loss(y: &[f64], y_hat: &[f64], labels: &[u8]) -> (f64, BpSupport) {
    assert_eq!(y.len(), y_hat.len());
    assert_eq!(y.len() % labels.len().max(1), 0);
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (a, b)) in y.iter().zip(y_hat).enumerate() {
        if labels[i % labels.len()] == 0 {
            sum += (a - b) * (a - b);
            n += 1;
        }
    }
    if n == 0 {
        (0.0, BpSupport::NoNormalSupport)
    } else {
        (sum / n as f64, BpSupport::Normal(n / (y.len() / labels.len())))
    }
}

pub fn ad_loss(y_ad: &[f64], y_hat: &[f64]) -> f64 {
    assert_eq!(y_ad.len(), y_hat.len());
    y_ad.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y_ad.len() as f64
}

pub fn total_loss(l_bp: f64, l_ad: f64, alpha: f64) -> f64 {
    l_bp + alpha * l_ad
}

/// Partition of parameters into trainable and frozen sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezePlan {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

impl FreezePlan {
    /// Only the BP and AD heads train.
    pub fn heads_only<T: Real>(store: &ParameterStore<T>) -> FreezePlan {
        Self::from_predicate(store, |n| n.starts_with("head.bp.") || n.starts_with("head.ad."))
    }

    pub fn from_predicate<T: Real>(store: &ParameterStore<T>, pred: impl Fn(&str) -> bool) -> FreezePlan {
        let (trainable, frozen) = store.names().map(str::to_string).partition(|n| pred(n));
        FreezePlan { trainable, frozen }
    }

    pub fn apply<T: Real>(&self, store: &mut ParameterStore<T>) -> Result<()> {
        for name in self.trainable.iter().chain(&self.frozen) {
            store.get(name)?;
        }
        if self.trainable.len() + self.frozen.len() != store.len() || !self.trainable.is_disjoint(&self.frozen) {
            return Err(Error::Contract("freeze plan does not partition the parameter store".into()));
        }
        store.set_trainable(|n| self.trainable.contains(n));
        Ok(())
    }

    /// True when every trainable parameter is a BP/AD head parameter, so
    /// backbone features can be computed once per window.
    pub fn backbone_frozen(&self) -> bool {
        self.trainable
            .iter()
            .all(|n| n.starts_with("head.bp.") || n.starts_with("head.ad."))
    }

    pub fn ratio<T: Real>(&self, store: &ParameterStore<T>) -> ParamRatio {
        ParamRatio {
            trainable: count_params(store, |n| self.trainable.contains(n)),
            total: count_params(store, |_| true),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamRatio {
    pub trainable: usize,
    pub total: usize,
}

impl ParamRatio {
    pub fn ratio(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

/// Input to the BP head: the baseline channel observed, or with its patches
/// replaced by the task token so the prediction comes from covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BpInput {
    Observed,
    Masked,
}

/// Features for the AD head: observed tokens of the anomaly channel, or the
/// difference between the observed and the BP-masked pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdFeatures {
    Observed,
    Residual,
}

impl fmt::Display for BpInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BpInput::Observed => "observed",
            BpInput::Masked => "masked",
        })
    }
}

impl FromStr for BpInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observed" => Ok(BpInput::Observed),
            "masked" => Ok(BpInput::Masked),
            _ => Err(Error::Config(format!("unknown bp input {s:?}"))),
        }
    }
}

impl fmt::Display for AdFeatures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdFeatures::Observed => "observed",
            AdFeatures::Residual => "residual",
        })
    }
}

impl FromStr for AdFeatures {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observed" => Ok(AdFeatures::Observed),
            "residual" => Ok(AdFeatures::Residual),
            _ => Err(Error::Config(format!("unknown ad features {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: JointLossConfig,
    /// BP target channels; empty means the fleet's baseline channel.
    pub bp_channels: Vec<usize>,
    /// Channel whose tokens feed the AD head; `None` means the baseline.
    pub ad_channel: Option<usize>,
    pub bp_input: BpInput,
    pub ad_features: AdFeatures,
    /// Start the BP head from the reconstruction head's weights.
    pub init_bp_from_recon: bool,
    /// Fraction of the training windows used (at least one window).
    pub label_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 5,
            batch_size: 256,
            adam: AdamConfig::default(),
            loss: JointLossConfig::default(),
            bp_channels: Vec::new(),
            ad_channel: None,
            bp_input: BpInput::Masked,
            ad_features: AdFeatures::Observed,
            init_bp_from_recon: true,
            label_fraction: 1.0,
        }
    }
}

impl FinetuneConfig {
    pub fn bp_channels(&self, spec: &FleetSpec) -> Result<Vec<usize>> {
        let chans = if self.bp_channels.is_empty() {
            vec![spec.baseline_channel]
        } else {
            self.bp_channels.clone()
        };
        if let Some(&c) = chans.iter().find(|&&c| c >= spec.num_channels()) {
            return Err(Error::Config(format!("BP channel {c} absent from fleet {}", spec.fleet_id)));
        }
        Ok(chans)
    }

    pub fn ad_channel(&self, spec: &FleetSpec) -> Result<usize> {
        let c = self.ad_channel.unwrap_or(spec.baseline_channel);
        if c >= spec.num_channels() {
            return Err(Error::Config(format!("AD channel {c} absent from fleet {}", spec.fleet_id)));
        }
        Ok(c)
    }
}

/// Fixed per-window head inputs computed by the frozen backbone.
#[derive(Debug, Clone)]
pub struct CachedFeatures<T: Real> {
    /// Patch tokens of the BP channels, `[C, P, d]`.
    pub bp: Tensor<T>,
    /// Patch tokens for the AD head, `[1, P, d]`.
    pub ad: Tensor<T>,
}

/// Everything the fine-tuning objective needs about one window.
#[derive(Debug, Clone)]
pub struct Task {
    pub bp_channels: Vec<usize>,
    pub ad_channel: usize,
    pub bp_input: BpInput,
    pub ad_features: AdFeatures,
}

impl Task {
    pub fn new(cfg: &FinetuneConfig, spec: &FleetSpec) -> Result<Task> {
        Ok(Task {
            bp_channels: cfg.bp_channels(spec)?,
            ad_channel: cfg.ad_channel(spec)?,
            bp_input: cfg.bp_input,
            ad_features: cfg.ad_features,
        })
    }

    fn fill<T: Real>(&self, pw: &PreparedWindow<T>) -> Vec<bool> {
        let p = pw.patch_count();
        let mut fill = vec![false; pw.channels() * p];
        for &c in &self.bp_channels {
            fill[c * p..(c + 1) * p].fill(true);
        }
        fill
    }
}

fn patch_rows<T: Real>(sess: &mut Session<'_, T>, h: Var, pw: &PreparedWindow<T>, channels: &[usize]) -> Result<Var> {
    let s = &pw.sections;
    let patch = sess.g.slice(h, 1, s.patch.start, s.patches())?;
    let parts = channels
        .iter()
        .map(|&c| sess.g.slice(patch, 0, c, 1))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(sess.g.concat(&parts, 0)?)
}

/// Head inputs for one window, built in `sess` (live backbone) as graph
/// nodes.
fn head_inputs<T: Real>(
    sess: &mut Session<'_, T>,
    pw: &PreparedWindow<T>,
    task: &Task,
    model: &ModelConfig,
) -> Result<(Var, Var)> {
    let fill = task.fill(pw);
    let needs_masked = task.bp_input == BpInput::Masked || task.ad_features == AdFeatures::Residual;
    let needs_observed = task.bp_input == BpInput::Observed || task.ad_features == AdFeatures::Observed || task.ad_features == AdFeatures::Residual;
    let masked = if needs_masked {
        Some(encode(sess, pw, model, Some(&fill), None)?)
    } else {
        None
    };
    let observed = if needs_observed {
        Some(encode(sess, pw, model, None, None)?)
    } else {
        None
    };
    let bp_src = match task.bp_input {
        BpInput::Masked => masked.expect("masked pass"),
        BpInput::Observed => observed.expect("observed pass"),
    };
    let bp = patch_rows(sess, bp_src, pw, &task.bp_channels)?;
    let obs_ad = patch_rows(sess, observed.expect("observed pass"), pw, &[task.ad_channel])?;
    let ad = match task.ad_features {
        AdFeatures::Observed => obs_ad,
        AdFeatures::Residual => {
            let m_ad = patch_rows(sess, masked.expect("masked pass"), pw, &[task.ad_channel])?;
            sess.g.sub(obs_ad, m_ad)?
        }
    };
    Ok((bp, ad))
}

/// Run the frozen backbone once and keep the head inputs.
pub fn cache_features<T: Real>(
    store: &ParameterStore<T>,
    pw: &PreparedWindow<T>,
    task: &Task,
    model: &ModelConfig,
) -> Result<CachedFeatures<T>> {
    let mut sess = Session::new(store, false);
    let (bp, ad) = head_inputs(&mut sess, pw, task, model)?;
    Ok(CachedFeatures {
        bp: sess.g.value(bp).clone(),
        ad: sess.g.value(ad).clone(),
    })
}

fn apply_head<T: Real>(sess: &mut Session<'_, T>, feats: Var, head: Head, stride: usize) -> Result<Var> {
    let (w, b) = (sess.p(&head.weight())?, sess.p(&head.bias())?);
    let y = sess.g.linear(feats, w, Some(b))?;
    let y = if head == Head::Ad { sess.g.sigmoid(y) } else { y };
    Ok(sess.g.fold_patches(y, stride)?)
}

/// BP prediction (signal units) and AD scores for one window.
pub fn head_outputs<T: Real>(
    sess: &mut Session<'_, T>,
    pw: &PreparedWindow<T>,
    cached: Option<&CachedFeatures<T>>,
    task: &Task,
    model: &ModelConfig,
) -> Result<(Var, Var)> {
    let (bp_in, ad_in) = match cached {
        Some(c) => (sess.constant(c.bp.clone()), sess.constant(c.ad.clone())),
        None => head_inputs(sess, pw, task, model)?,
    };
    let bp = apply_head(sess, bp_in, Head::Bp, pw.stride)?;
    let bp = denormalize_graph(sess, bp, pw, &task.bp_channels)?;
    let ad = apply_head(sess, ad_in, Head::Ad, pw.stride)?;
    Ok((bp, ad))
}

/// Per-window joint loss (and its parts).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub bp: f64,
    pub ad: f64,
    pub total: f64,
}

pub fn window_objective<T: Real>(
    store: &ParameterStore<T>,
    pw: &PreparedWindow<T>,
    cached: Option<&CachedFeatures<T>>,
    task: &Task,
    model: &ModelConfig,
    alpha: f64,
) -> Result<(LossParts, Vec<(String, Tensor<T>)>)> {
    let mut sess = Session::new(store, true);
    let (bp, ad) = head_outputs(&mut sess, pw, cached, task, model)?;
    let target: Vec<f64> = task.bp_channels.iter().flat_map(|&c| pw.signal[c].iter().copied()).collect();
    let target = sess.constant(Tensor::from_f64(&[task.bp_channels.len(), pw.span()], &target)?);
    let labels: Vec<f64> = pw.labels.iter().map(|&l| l as f64).collect();
    let labels_t = sess.constant(Tensor::from_f64(&[1, pw.span()], &labels)?);
    let (l_bp, _) = bp_loss_graph(&mut sess, target, bp, &pw.labels)?;
    let l_ad = ad_loss_graph(&mut sess, labels_t, ad)?;
    let total = total_loss_graph(&mut sess, l_bp, l_ad, alpha)?;
    let parts = LossParts {
        bp: sess.g.value(l_bp).item().f64(),
        ad: sess.g.value(l_ad).item().f64(),
        total: sess.g.value(total).item().f64(),
    };
    Ok((parts, sess.param_grads(total)?))
}

/// Labeled windows of the target fleet.
#[derive(Debug, Clone)]
pub struct LabeledWindows<T: Real> {
    pub spec: FleetSpec,
    pub windows: Vec<PreparedWindow<T>>,
    pub labeled: bool,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Mean joint loss per epoch.
    pub epoch_loss: Vec<LossParts>,
    pub ratio: ParamRatio,
    pub windows_used: usize,
    pub steps: u64,
    pub frozen_digest: String,
}

/// Choose the labeled subset used for fine-tuning.
pub fn subset_indices(n: usize, fraction: f64, bank: &SeedBank, fleet: &str) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction {fraction} must lie in (0, 1]")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if fraction < 1.0 {
        idx.shuffle(&mut bank.rng(Stream::Subset, &[tag(fleet)]));
        idx.truncate(((n as f64 * fraction).round() as usize).max(1));
        idx.sort_unstable();
    }
    Ok(idx)
}

/// Fit the trainable set of `plan` on labeled windows with the joint loss.
/// Frozen parameters are never written.
pub fn finetune_run<T: Real>(
    store: &mut ParameterStore<T>,
    data: &LabeledWindows<T>,
    plan: &FreezePlan,
    cfg: &FinetuneConfig,
    model: &ModelConfig,
    bank: &SeedBank,
    progress: &mut dyn FnMut(usize, u64, &LossParts),
) -> Result<FinetuneOutcome> {
    if !data.labeled {
        return Err(Error::Data(format!(
            "fine-tuning needs anomaly labels; dataset {} has none",
            data.spec.fleet_id
        )));
    }
    if data.windows.is_empty() {
        return Err(Error::Data("no fine-tuning windows".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("fine-tuning epochs and batch size must be positive".into()));
    }
    if !(cfg.loss.alpha >= 0.0) {
        return Err(Error::Config("alpha must be non-negative".into()));
    }
    let task = Task::new(cfg, &data.spec)?;
    if cfg.init_bp_from_recon && plan.trainable.contains(&Head::Bp.weight()) {
        for (src, dst) in [(Head::Recon.weight(), Head::Bp.weight()), (Head::Recon.bias(), Head::Bp.bias())] {
            let t = store.tensor(&src)?.clone();
            store.get_mut(&dst)?.tensor = t;
        }
    }
    plan.apply(store)?;
    let frozen_digest = store.digest(|n, _| plan.frozen.contains(n));
    let idx = subset_indices(data.windows.len(), cfg.label_fraction, bank, &data.spec.fleet_id)?;
    let windows: Vec<&PreparedWindow<T>> = idx.iter().map(|&i| &data.windows[i]).collect();
    let cache: Option<Vec<CachedFeatures<T>>> = if plan.backbone_frozen() {
        let shared: &ParameterStore<T> = store;
        Some(par::map(&windows, |_, pw| cache_features(shared, pw, &task, model)).into_iter().collect::<Result<_>>()?)
    } else {
        None
    };
    let mut adam = Adam::new(cfg.adam);
    adam.require_all = true;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut bank.rng(Stream::Shuffle, &[tag("finetune"), epoch as u64]));
        let mut acc = LossParts {
            bp: 0.0,
            ad: 0.0,
            total: 0.0,
        };
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let results = {
                let shared: &ParameterStore<T> = store;
                let cache = cache.as_ref();
                par::map(chunk, |_, &i| {
                    window_objective(shared, windows[i], cache.map(|c| &c[i]), &task, model, cfg.loss.alpha)
                })
            };
            let mut lists = Vec::with_capacity(chunk.len());
            let mut batch = LossParts {
                bp: 0.0,
                ad: 0.0,
                total: 0.0,
            };
            for r in results {
                let (parts, grads) = r?;
                batch.bp += parts.bp;
                batch.ad += parts.ad;
                batch.total += parts.total;
                lists.push(grads);
            }
            let n = chunk.len() as f64;
            for (name, g) in reduce_grads(lists, 1.0 / n) {
                store.accumulate_grad(&name, &g)?;
            }
            adam.step(store)?;
            batch.bp /= n;
            batch.ad /= n;
            batch.total /= n;
            progress(epoch, adam.step_count(), &batch);
            acc.bp += batch.bp;
            acc.ad += batch.ad;
            acc.total += batch.total;
            batches += 1;
        }
        let b = batches as f64;
        epoch_loss.push(LossParts {
            bp: acc.bp / b,
            ad: acc.ad / b,
            total: acc.total / b,
        });
    }
    let after = store.digest(|n, _| plan.frozen.contains(n));
    if after != frozen_digest {
        return Err(Error::Contract("a frozen parameter changed during fine-tuning".into()));
    }
    Ok(FinetuneOutcome {
        epoch_loss,
        ratio: plan.ratio(store),
        windows_used: windows.len(),
        steps: adam.step_count(),
        frozen_digest,
    })
}

/// Model outputs for one window in signal units / probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPrediction {
    pub fleet_id: String,
    pub start: usize,
    /// `[C][span]` BP prediction and its target.
    pub bp: Vec<Vec<f64>>,
    pub bp_target: Vec<Vec<f64>>,
    pub ad_scores: Vec<f64>,
    pub labels: Vec<u8>,
}

pub fn predict<T: Real>(
    store: &ParameterStore<T>,
    windows: &[PreparedWindow<T>],
    spec: &FleetSpec,
    cfg: &FinetuneConfig,
    model: &ModelConfig,
) -> Result<Vec<WindowPrediction>> {
    let task = Task::new(cfg, spec)?;
    let eval_model = ModelConfig {
        dropout: 0.0,
        ..model.clone()
    };
    par::map(windows, |_, pw| {
        let mut sess = Session::new(store, false);
        let (bp, ad) = head_outputs(&mut sess, pw, None, &task, &eval_model)?;
        let span = pw.span();
        let bp_vals = sess.g.value(bp).to_f64_vec();
        Ok(WindowPrediction {
            fleet_id: pw.fleet_id.clone(),
            start: pw.start,
            bp: bp_vals.chunks(span).map(<[f64]>::to_vec).collect(),
            bp_target: task.bp_channels.iter().map(|&c| pw.signal[c].clone()).collect(),
            ad_scores: sess.g.value(ad).to_f64_vec(),
            labels: pw.labels.clone(),
        })
    })
    .into_iter()
    .collect()
}

/// Mean-pooled final-layer patch tokens of every channel, `[d]` per window.
pub fn pooled_features<T: Real>(store: &ParameterStore<T>, pw: &PreparedWindow<T>, model: &ModelConfig) -> Result<Vec<f64>> {
    let mut sess = Session::new(store, false);
    let h = encode(&mut sess, pw, model, None, None)?;
    let all: Vec<usize> = (0..pw.channels()).collect();
    let rows = patch_rows(&mut sess, h, pw, &all)?;
    let v = sess.g.value(rows);
    let d = v.shape()[2];
    let n = v.numel() / d;
    let mut out = vec![0.0; d];
    for row in v.data().chunks(d) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x.f64();
        }
    }
    Ok(out.into_iter().map(|x| x / n as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_losses() {
        assert_eq!(bp_loss(&[1.0, 2.0], &[5.0, 7.0], &[1, 1]), (0.0, BpSupport::NoNormalSupport));
        let (l, s) = bp_loss(&[1.0, 2.0, 3.0], &[1.5, 2.5, 3.5], &[0, 0, 0]);
        assert_eq!((l, s), (0.25, BpSupport::Normal(3)));
        assert_eq!(ad_loss(&[0.0, 1.0, 1.0, 0.0], &[0.5; 4]), 0.25);
        let y = [0.0, 1.0, 1.0];
        let yh = [0.2, 0.7, 0.9];
        let flip = |v: &[f64]| v.iter().map(|x| 1.0 - x).collect::<Vec<_>>();
        assert!((ad_loss(&y, &yh) - ad_loss(&flip(&y), &flip(&yh))).abs() < 1e-15);
        assert!((total_loss(0.1, 0.02, 10.0) - 0.3).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 0.0, 3.0), 0.7);
    }

    #[test]
    fn bp_gate_is_exact_in_graph() {
        let store = ParameterStore::<f64>::new(0);
        let mut sess = Session::new(&store, true);
        let y = sess.constant(Tensor::from_f64(&[1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let yh = sess.g.param(Tensor::from_f64(&[1, 4], &[1.5, 9.0, 3.5, -4.0]).unwrap());
        let (l, s) = bp_loss_graph(&mut sess, y, yh, &[0, 1, 0, 1]).unwrap();
        assert_eq!(s, BpSupport::Normal(2));
        assert_eq!(sess.g.value(l).item(), 0.25);
        let g = sess.g.backward(l).unwrap();
        let g = g.get(yh).unwrap().data().to_vec();
        assert_eq!(g[1], 0.0);
        assert_eq!(g[3], 0.0);
        assert!(g[0] != 0.0 && g[2] != 0.0);
    }
}
