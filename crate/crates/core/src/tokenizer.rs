//! Cross-fleet tokenizer: per-channel normalization, patching, linear patch
//! projection, statistic tokens, and prompt/task tokens from per-fleet pools.

use std::collections::BTreeMap;
use std::ops::Range;

use rand_chacha::ChaCha8Rng;

use crate::data::{FleetSpec, SignalWindow};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};
use crate::training::{ParameterStore, Session};

pub const PATCH_W: &str = "tok.patch.w";
pub const PATCH_B: &str = "tok.patch.b";
pub const MEAN_W: &str = "tok.stat_mean.w";
pub const MEAN_B: &str = "tok.stat_mean.b";
pub const STD_W: &str = "tok.stat_std.w";
pub const STD_B: &str = "tok.stat_std.b";

pub const PROMPT_INIT_STD: f64 = 0.02;
pub const STAT_INIT_STD: f64 = 0.1;

pub fn prompt_param(fleet: &str, sensor: &str) -> String {
    format!("pool.prompt.{fleet}.{sensor}")
}

pub fn task_param(fleet: &str) -> String {
    format!("pool.task.{fleet}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub prompt_len: usize,
    pub task_len: usize,
    pub eps: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            patch_len: 128,
            stride: 128,
            prompt_len: 10,
            task_len: 1,
            eps: 1e-5,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.stride == 0 || self.prompt_len == 0 || self.task_len == 0 {
            return Err(Error::Config(
                "tokenizer patch_len, stride, prompt_len and task_len must be positive".into(),
            ));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("tokenizer eps must be positive".into()));
        }
        Ok(())
    }

    pub fn patch_count(&self, window_len: usize) -> Result<usize> {
        patch_count(window_len, self.patch_len, self.stride)
    }

    /// Token positions per channel: `P_p + P + 2 + P_t`.
    pub fn num_tokens(&self, window_len: usize) -> Result<usize> {
        Ok(self.prompt_len + self.patch_count(window_len)? + 2 + self.task_len)
    }

    /// Samples covered by the patch grid: `(P − 1)·S + pl`.
    pub fn span(&self, patches: usize) -> usize {
        (patches - 1) * self.stride + self.patch_len
    }

    pub fn sections(&self, patches: usize) -> SectionMap {
        SectionMap::new(self.prompt_len, patches, self.task_len)
    }
}

/// Number of patch placements: `⌊(L − pl)/S⌋ + 1`.
pub fn patch_count(len: usize, patch_len: usize, stride: usize) -> Result<usize> {
    if patch_len == 0 || stride == 0 {
        return Err(Error::Config("patch length and stride must be positive".into()));
    }
    if len < patch_len {
        return Err(Error::InputTooShort { len, patch_len });
    }
    Ok((len - patch_len) / stride + 1)
}

/// `(x − μ) / σ` with μ the mean and σ the population standard deviation,
/// clamped below at `eps`. Returns the clamped σ.
pub fn normalize_channel(x: &[f64], eps: f64) -> (Vec<f64>, f64, f64) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sigma = var.sqrt().max(eps);
    (x.iter().map(|v| (v - mu) / sigma).collect(), mu, sigma)
}

pub fn denormalize(x_norm: &[f64], mu: f64, sigma: f64, eps: f64) -> Vec<f64> {
    let s = sigma.max(eps);
    x_norm.iter().map(|v| v * s + mu).collect()
}

/// `sign(v)·ln(1 + |v|)`, applied to raw statistics before embedding.
pub fn squash(v: f64) -> f64 {
    v.signum() * v.abs().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Prompt,
    Patch,
    Stat,
    Task,
}

/// Token layout per channel: `[prompt | patches | mean, std | task]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionMap {
    pub prompt: Range<usize>,
    pub patch: Range<usize>,
    pub stat: Range<usize>,
    pub task: Range<usize>,
}

impl SectionMap {
    pub fn new(prompt_len: usize, patches: usize, task_len: usize) -> Self {
        let p_end = prompt_len + patches;
        SectionMap {
            prompt: 0..prompt_len,
            patch: prompt_len..p_end,
            stat: p_end..p_end + 2,
            task: p_end + 2..p_end + 2 + task_len,
        }
    }

    pub fn len(&self) -> usize {
        self.task.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patches(&self) -> usize {
        self.patch.len()
    }

    pub fn section(&self, pos: usize) -> Option<Section> {
        [
            (&self.prompt, Section::Prompt),
            (&self.patch, Section::Patch),
            (&self.stat, Section::Stat),
            (&self.task, Section::Task),
        ]
        .into_iter()
        .find(|(r, _)| r.contains(&pos))
        .map(|(_, s)| s)
    }
}

/// Parameter-free preprocessing of one window, computed once and reused by
/// every forward pass over it.
#[derive(Debug, Clone)]
pub struct PreparedWindow<T: Real> {
    pub fleet_id: String,
    pub sensors: Vec<String>,
    pub start: usize,
    /// Normalized patches `[M, P, pl]`.
    pub patches: Tensor<T>,
    /// Squashed raw mean / std, `[M, 1, 1]` each.
    pub stat_mu: Tensor<T>,
    pub stat_sigma: Tensor<T>,
    /// Normalized series restricted to the patch span, `[M, span]`.
    pub x_norm: Tensor<T>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Signal-unit values over the span, per channel.
    pub signal: Vec<Vec<f64>>,
    /// Labels over the span.
    pub labels: Vec<u8>,
    pub sections: SectionMap,
    pub patch_len: usize,
    pub stride: usize,
}

impl<T: Real> PreparedWindow<T> {
    pub fn channels(&self) -> usize {
        self.sensors.len()
    }

    pub fn patch_count(&self) -> usize {
        self.sections.patches()
    }

    pub fn span(&self) -> usize {
        self.labels.len()
    }

    pub fn has_anomaly(&self) -> bool {
        self.labels.iter().any(|&l| l == 1)
    }
}

pub fn prepare<T: Real>(window: &SignalWindow, spec: &FleetSpec, cfg: &TokenizerConfig) -> Result<PreparedWindow<T>> {
    cfg.validate()?;
    if window.fleet_id != spec.fleet_id {
        return Err(Error::Config(format!(
            "window from fleet {} tokenized with spec {}",
            window.fleet_id, spec.fleet_id
        )));
    }
    let m = spec.num_channels();
    if window.values.len() != m {
        return Err(Error::Config(format!(
            "window has {} channels, fleet {} declares {m}",
            window.values.len(),
            spec.fleet_id
        )));
    }
    let len = window.len();
    let p = cfg.patch_count(len)?;
    let span = cfg.span(p);
    let (pl, s) = (cfg.patch_len, cfg.stride);
    let mut patches = Vec::with_capacity(m * p * pl);
    let mut x_norm = Vec::with_capacity(m * span);
    let (mut mu, mut sigma) = (Vec::with_capacity(m), Vec::with_capacity(m));
    for ch in &window.values {
        let (norm, c_mu, c_sigma) = normalize_channel(ch, cfg.eps);
        for q in 0..p {
            patches.extend_from_slice(&norm[q * s..q * s + pl]);
        }
        x_norm.extend_from_slice(&norm[..span]);
        mu.push(c_mu);
        sigma.push(c_sigma);
    }
    let stat = |v: &[f64]| Tensor::from_f64(&[m, 1, 1], &v.iter().map(|&x| squash(x)).collect::<Vec<_>>());
    Ok(PreparedWindow {
        fleet_id: spec.fleet_id.clone(),
        sensors: spec.channel_names(),
        start: window.start,
        patches: Tensor::from_f64(&[m, p, pl], &patches)?,
        stat_mu: stat(&mu)?,
        stat_sigma: stat(&sigma)?,
        x_norm: Tensor::from_f64(&[m, span], &x_norm)?,
        mu,
        sigma,
        signal: window.values.iter().map(|c| c[..span].to_vec()).collect(),
        labels: window.labels[..span].to_vec(),
        sections: cfg.sections(p),
        patch_len: pl,
        stride: s,
    })
}

/// Build the token grid `[M, N_tok, d]` in `sess`. Patch positions flagged
/// in `fill` (row-major `[M, P]`) are replaced by the fleet's first task
/// token vector.
pub fn tokenize_graph<T: Real>(
    sess: &mut Session<'_, T>,
    pw: &PreparedWindow<T>,
    fill: Option<&[bool]>,
) -> Result<Var> {
    let m = pw.channels();
    let p = pw.patch_count();
    let (pw_w, pw_b) = (sess.p(PATCH_W)?, sess.p(PATCH_B)?);
    let x = sess.constant(pw.patches.clone());
    let mut patch = sess.g.linear(x, pw_w, Some(pw_b))?;
    let d = sess.g.shape(patch)[2];

    let task_name = task_param(&pw.fleet_id);
    let task = sess.p(&task_name).map_err(|_| Error::MissingPool(task_name.clone()))?;
    if let Some(fill) = fill {
        if fill.len() != m * p {
            return Err(Error::Contract(format!(
                "fill mask has {} entries, token grid has {m}×{p} patches",
                fill.len()
            )));
        }
        patch = fill_patches(sess, patch, task, fill, [m, p, d])?;
    }

    let mu_in = sess.constant(pw.stat_mu.clone());
    let (mw, mb) = (sess.p(MEAN_W)?, sess.p(MEAN_B)?);
    let mean_tok = sess.g.linear(mu_in, mw, Some(mb))?;
    let sd_in = sess.constant(pw.stat_sigma.clone());
    let (sw, sb) = (sess.p(STD_W)?, sess.p(STD_B)?);
    let std_tok = sess.g.linear(sd_in, sw, Some(sb))?;

    let mut prompts = Vec::with_capacity(m);
    for sensor in &pw.sensors {
        let name = prompt_param(&pw.fleet_id, sensor);
        let v = sess.p(&name).map_err(|_| Error::MissingPool(name.clone()))?;
        let shape = sess.g.shape(v).to_vec();
        prompts.push(sess.g.reshape(v, &[1, shape[0], shape[1]])?);
    }
    let prompt = sess.g.concat(&prompts, 0)?;
    let pt = sess.g.shape(task)[0];
    let task_tok = sess.g.broadcast_to(task, &[m, pt, d])?;
    Ok(sess.g.concat(&[prompt, patch, mean_tok, std_tok, task_tok], 1)?)
}

/// `z ⊙ keep + task ⊙ (1 − keep)` over the patch grid `[M, P, d]`.
fn fill_patches<T: Real>(
    sess: &mut Session<'_, T>,
    patch: Var,
    task: Var,
    fill: &[bool],
    [m, p, d]: [usize; 3],
) -> Result<Var> {
    if !fill.iter().any(|&f| f) {
        return Ok(patch);
    }
    let keep: Vec<T> = fill
        .iter()
        .flat_map(|&f| std::iter::repeat(if f { T::zero() } else { T::one() }).take(d))
        .collect();
    let drop: Vec<T> = keep.iter().map(|&k| T::one() - k).collect();
    let keep = sess.constant(Tensor::new(vec![m, p, d], keep)?);
    let drop = sess.constant(Tensor::new(vec![m, p, d], drop)?);
    let first = sess.g.slice(task, 0, 0, 1)?;
    let first = sess.g.reshape(first, &[d])?;
    let task_grid = sess.g.broadcast_to(first, &[m, p, d])?;
    let kept = sess.g.mul(patch, keep)?;
    let filled = sess.g.mul(task_grid, drop)?;
    Ok(sess.g.add(kept, filled)?)
}

/// Token grid plus the statistics needed to map outputs back to signal units.
#[derive(Debug, Clone)]
pub struct TokenSequence<T: Real> {
    pub tokens: Tensor<T>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sections: SectionMap,
    pub fleet_id: String,
    pub sensors: Vec<String>,
}

impl<T: Real> TokenSequence<T> {
    pub fn patch_count(&self) -> usize {
        self.sections.patches()
    }
}

/// Value-level tokenization with the current parameters.
pub fn tokenize<T: Real>(store: &ParameterStore<T>, pw: &PreparedWindow<T>) -> Result<TokenSequence<T>> {
    let mut sess = Session::new(store, false);
    let z = tokenize_graph(&mut sess, pw, None)?;
    Ok(TokenSequence {
        tokens: sess.g.value(z).clone(),
        mu: pw.mu.clone(),
        sigma: pw.sigma.clone(),
        sections: pw.sections.clone(),
        fleet_id: pw.fleet_id.clone(),
        sensors: pw.sensors.clone(),
    })
}

/// Insert the shared patch projection and statistic embeddings.
pub fn init_tokenizer_params<T: Real>(
    store: &mut ParameterStore<T>,
    cfg: &TokenizerConfig,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.insert_normal(PATCH_W, &[cfg.patch_len, d], 1.0 / (cfg.patch_len as f64).sqrt(), rng)?;
    store.insert_full(PATCH_B, &[d], 0.0)?;
    store.insert_normal(MEAN_W, &[1, d], STAT_INIT_STD, rng)?;
    store.insert_full(MEAN_B, &[d], 0.0)?;
    store.insert_normal(STD_W, &[1, d], STAT_INIT_STD, rng)?;
    store.insert_full(STD_B, &[d], 0.0)?;
    Ok(())
}

/// Register prompt tokens for every sensor of `spec` and the fleet's task
/// tokens, drawn from `N(0, 0.02²)`.
pub fn register_fleet<T: Real>(
    store: &mut ParameterStore<T>,
    spec: &FleetSpec,
    cfg: &TokenizerConfig,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for c in &spec.channels {
        store.insert_normal(&prompt_param(&spec.fleet_id, &c.name), &[cfg.prompt_len, d], PROMPT_INIT_STD, rng)?;
    }
    store.insert_normal(&task_param(&spec.fleet_id), &[cfg.task_len, d], PROMPT_INIT_STD, rng)?;
    Ok(())
}

fn mean_of<T: Real>(tensors: &[&Tensor<T>]) -> Tensor<T> {
    let n = T::of(tensors.len() as f64);
    let mut acc = Tensor::zeros(tensors[0].shape());
    for t in tensors {
        for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
            *a = *a + v;
        }
    }
    acc.map(|v| v / n)
}

/// Register pools for a fleet never seen in pretraining, initialized from
/// already registered `sources`: a sensor takes the mean prompt of
/// same-named sensors in the sources; otherwise the baseline channel takes
/// the mean of the sources' baseline prompts; anything else takes the mean
/// of all source prompts. The task token is the mean source task token.
pub fn register_fleet_from<T: Real>(
    store: &mut ParameterStore<T>,
    spec: &FleetSpec,
    sources: &[FleetSpec],
) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::Config("transfer initialization needs at least one source fleet".into()));
    }
    let mut by_name: BTreeMap<&str, Vec<&Tensor<T>>> = BTreeMap::new();
    let mut baselines = Vec::new();
    let mut all = Vec::new();
    let mut tasks = Vec::new();
    for src in sources {
        for (i, c) in src.channels.iter().enumerate() {
            let name = prompt_param(&src.fleet_id, &c.name);
            let t = store.tensor(&name).map_err(|_| Error::MissingPool(name.clone()))?;
            by_name.entry(c.name.as_str()).or_default().push(t);
            if i == src.baseline_channel {
                baselines.push(t);
            }
            all.push(t);
        }
        let name = task_param(&src.fleet_id);
        tasks.push(store.tensor(&name).map_err(|_| Error::MissingPool(name.clone()))?);
    }
    let mut new = Vec::new();
    for (i, c) in spec.channels.iter().enumerate() {
        let init = match by_name.get(c.name.as_str()) {
            Some(ts) => mean_of(ts),
            None if i == spec.baseline_channel => mean_of(&baselines),
            None => mean_of(&all),
        };
        new.push((prompt_param(&spec.fleet_id, &c.name), init));
    }
    new.push((task_param(&spec.fleet_id), mean_of(&tasks)));
    for (name, t) in new {
        store.insert(name, t, true)?;
    }
    Ok(())
}
