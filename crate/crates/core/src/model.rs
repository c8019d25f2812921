//! ESAT backbone (channel attention → time attention → FFN, each followed by
//! residual + LayerNorm) and the reconstruction / BP / AD heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::FleetSpec;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};
use crate::tokenizer::{
    init_tokenizer_params, register_fleet, tokenize_graph, PreparedWindow, SectionMap, TokenSequence, TokenizerConfig,
};
use crate::training::{seed_all, ParameterStore, Session, Stream};

pub const POS: &str = "model.pos";
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub ffn_hidden: usize,
    pub num_heads: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 4,
            model_dim: 512,
            ffn_hidden: 2048,
            num_heads: 1,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            num_layers: 2,
            model_dim: 64,
            ffn_hidden: 256,
            num_heads: 1,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.ffn_hidden == 0 || self.num_heads == 0 {
            return Err(Error::Config("model_dim, ffn_hidden and num_heads must be positive".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Recon,
    Bp,
    Ad,
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Head::Recon => "head.recon",
            Head::Bp => "head.bp",
            Head::Ad => "head.ad",
        }
    }

    pub fn weight(self) -> String {
        format!("{}.w", self.prefix())
    }

    pub fn bias(self) -> String {
        format!("{}.b", self.prefix())
    }
}

/// Sinusoidal start for the learned positional table: even columns sine,
/// odd columns cosine, geometric frequencies from 1 down to 1/10000.
pub fn sinusoidal_table<T: Real>(n: usize, d: usize) -> Result<Tensor<T>> {
    let data: Vec<f64> = (0..n)
        .flat_map(|i| {
            (0..d).map(move |j| {
                let angle = i as f64 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
                if j % 2 == 0 { angle.sin() } else { angle.cos() }
            })
        })
        .collect();
    Ok(Tensor::from_f64(&[n, d], &data)?)
}

fn block_param(layer: usize, part: &str) -> String {
    format!("block{layer}.{part}")
}

/// Build a complete parameter store: tokenizer, pools for every fleet,
/// positional table sized for `window_len`, ESAT blocks and heads.
pub fn init_params<T: Real>(
    model: &ModelConfig,
    tok: &TokenizerConfig,
    window_len: usize,
    fleets: &[FleetSpec],
    seed: u64,
) -> Result<ParameterStore<T>> {
    model.validate()?;
    tok.validate()?;
    let d = model.model_dim;
    let bank = seed_all(seed);
    let mut store = ParameterStore::new(seed);
    let mut rng = bank.rng(Stream::Init, &[0]);
    init_tokenizer_params(&mut store, tok, d, &mut rng)?;
    let mut rng = bank.rng(Stream::Init, &[1]);
    for f in fleets {
        register_fleet(&mut store, f, tok, d, &mut rng)?;
    }
    store.insert(POS, sinusoidal_table(tok.num_tokens(window_len)?, d)?, true)?;
    let proj_std = 1.0 / (d as f64).sqrt();
    for layer in 0..model.num_layers {
        let mut rng = bank.rng(Stream::Init, &[3, layer as u64]);
        for stage in ["chan", "time"] {
            for w in ["q", "k", "v", "o"] {
                store.insert_normal(&block_param(layer, &format!("{stage}.{w}")), &[d, d], proj_std, &mut rng)?;
            }
            store.insert_full(&block_param(layer, &format!("{stage}.ln.g")), &[d], 1.0)?;
            store.insert_full(&block_param(layer, &format!("{stage}.ln.b")), &[d], 0.0)?;
        }
        let h = model.ffn_hidden;
        store.insert_normal(&block_param(layer, "ffn.w1"), &[d, h], proj_std, &mut rng)?;
        store.insert_full(&block_param(layer, "ffn.b1"), &[h], 0.0)?;
        store.insert_normal(&block_param(layer, "ffn.w2"), &[h, d], 1.0 / (h as f64).sqrt(), &mut rng)?;
        store.insert_full(&block_param(layer, "ffn.b2"), &[d], 0.0)?;
        store.insert_full(&block_param(layer, "ffn.ln.g"), &[d], 1.0)?;
        store.insert_full(&block_param(layer, "ffn.ln.b"), &[d], 0.0)?;
    }
    let mut rng = bank.rng(Stream::Init, &[4]);
    for head in [Head::Recon, Head::Bp, Head::Ad] {
        store.insert_normal(&head.weight(), &[d, tok.patch_len], proj_std, &mut rng)?;
        store.insert_full(&head.bias(), &[tok.patch_len], 0.0)?;
    }
    Ok(store)
}

/// Recover the model shape recorded in a store (layer count, width, FFN
/// width, patch length).
pub fn infer_shape<T: Real>(store: &ParameterStore<T>) -> Result<(usize, usize, usize, usize)> {
    let w = store.tensor(&Head::Recon.weight())?;
    let (d, pl) = (w.shape()[0], w.shape()[1]);
    let layers = (0..).take_while(|&l| store.contains(&block_param(l, "chan.q"))).count();
    let ffn = if layers > 0 {
        store.tensor(&block_param(0, "ffn.w1"))?.shape()[1]
    } else {
        4 * d
    };
    Ok((layers, d, ffn, pl))
}

/// Add the learned positional table over the token axis.
pub fn add_positions<T: Real>(sess: &mut Session<'_, T>, z: Var) -> Result<Var> {
    let n = sess.g.shape(z)[1];
    let pos = sess.p(POS)?;
    if n > sess.g.shape(pos)[0] {
        return Err(Error::Config(format!(
            "token grid has {n} positions, positional table only {}",
            sess.g.shape(pos)[0]
        )));
    }
    let pos = sess.g.slice(pos, 0, 0, n)?;
    Ok(sess.g.broadcast_add(z, pos)?)
}

/// Dropout state for one forward pass; `None` disables it.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

fn dropout<T: Real>(sess: &mut Session<'_, T>, x: Var, p: f64, rng: &mut DropoutRng<'_>) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if p == 0.0 {
        return Ok(x);
    }
    let shape = sess.g.shape(x).to_vec();
    let keep = T::of(1.0 / (1.0 - p));
    let n: usize = shape.iter().product();
    let mask: Vec<T> = (0..n).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
    let mask = sess.constant(Tensor::new(shape, mask)?);
    Ok(sess.g.mul(x, mask)?)
}

/// Scaled dot-product self-attention over axis 1 of `x: [B, T, d]`, batched
/// over axis 0. Returns the output and the multiplies spent in the score and
/// context products.
fn attention<T: Real>(sess: &mut Session<'_, T>, x: Var, prefix: &str, heads: usize) -> Result<(Var, u64)> {
    let shape = sess.g.shape(x).to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let (wq, wk, wv, wo) = (
        sess.p(&format!("{prefix}.q"))?,
        sess.p(&format!("{prefix}.k"))?,
        sess.p(&format!("{prefix}.v"))?,
        sess.p(&format!("{prefix}.o"))?,
    );
    let mut q = sess.g.matmul(x, wq)?;
    let mut k = sess.g.matmul(x, wk)?;
    let mut v = sess.g.matmul(x, wv)?;
    if heads > 1 {
        for y in [&mut q, &mut k, &mut v] {
            let r = sess.g.reshape(*y, &[b, t, heads, dh])?;
            *y = sess.g.transpose(r, &[0, 2, 1, 3])?;
        }
    }
    let before = sess.g.matmul_mults();
    let kt = sess.g.transpose_last(k)?;
    let scores = sess.g.matmul(q, kt)?;
    let scores = sess.g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = sess.g.softmax_lastdim(scores)?;
    let mut ctx = sess.g.matmul(attn, v)?;
    let mults = sess.g.matmul_mults() - before;
    if heads > 1 {
        let back = sess.g.transpose(ctx, &[0, 2, 1, 3])?;
        ctx = sess.g.reshape(back, &[b, t, d])?;
    }
    Ok((sess.g.matmul(ctx, wo)?, mults))
}

fn residual_norm<T: Real>(sess: &mut Session<'_, T>, x: Var, y: Var, prefix: &str) -> Result<Var> {
    let sum = sess.g.add(x, y)?;
    let (g, b) = (sess.p(&format!("{prefix}.ln.g"))?, sess.p(&format!("{prefix}.ln.b"))?);
    Ok(sess.g.layer_norm(sum, g, b, LN_EPS)?)
}

/// Attention across channels at each token position, then residual + norm.
pub fn channel_attention<T: Real>(
    sess: &mut Session<'_, T>,
    x: Var,
    layer: usize,
    cfg: &ModelConfig,
    rng: &mut DropoutRng<'_>,
) -> Result<Var> {
    let prefix = block_param(layer, "chan");
    let xt = sess.g.transpose(x, &[1, 0, 2])?;
    let (a, mults) = attention(sess, xt, &prefix, cfg.num_heads)?;
    sess.channel_attn_mults += mults;
    let a = sess.g.transpose(a, &[1, 0, 2])?;
    let a = dropout(sess, a, cfg.dropout, rng)?;
    residual_norm(sess, x, a, &prefix)
}

/// Attention across token positions within each channel, then residual +
/// norm.
pub fn time_attention<T: Real>(
    sess: &mut Session<'_, T>,
    x: Var,
    layer: usize,
    cfg: &ModelConfig,
    rng: &mut DropoutRng<'_>,
) -> Result<Var> {
    let prefix = block_param(layer, "time");
    let (a, mults) = attention(sess, x, &prefix, cfg.num_heads)?;
    sess.time_attn_mults += mults;
    let a = dropout(sess, a, cfg.dropout, rng)?;
    residual_norm(sess, x, a, &prefix)
}

pub fn ffn<T: Real>(
    sess: &mut Session<'_, T>,
    x: Var,
    layer: usize,
    cfg: &ModelConfig,
    rng: &mut DropoutRng<'_>,
) -> Result<Var> {
    let prefix = block_param(layer, "ffn");
    let (w1, b1) = (sess.p(&format!("{prefix}.w1"))?, sess.p(&format!("{prefix}.b1"))?);
    let (w2, b2) = (sess.p(&format!("{prefix}.w2"))?, sess.p(&format!("{prefix}.b2"))?);
    let h = sess.g.linear(x, w1, Some(b1))?;
    let h = sess.g.gelu(h);
    let y = sess.g.linear(h, w2, Some(b2))?;
    let y = dropout(sess, y, cfg.dropout, rng)?;
    residual_norm(sess, x, y, &prefix)
}

/// The block stack over a (position-encoded) token grid `[M, N_tok, d]`.
pub fn esat_graph<T: Real>(
    sess: &mut Session<'_, T>,
    z: Var,
    cfg: &ModelConfig,
    mut rng: DropoutRng<'_>,
) -> Result<Var> {
    let mut x = z;
    for layer in 0..cfg.num_layers {
        x = channel_attention(sess, x, layer, cfg, &mut rng)?;
        x = time_attention(sess, x, layer, cfg, &mut rng)?;
        x = ffn(sess, x, layer, cfg, &mut rng)?;
    }
    Ok(x)
}

/// Multiplies spent in attention score/context products.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttnCounts {
    pub channel: u64,
    pub time: u64,
}

impl AttnCounts {
    pub fn total(&self) -> u64 {
        self.channel + self.time
    }
}

/// Closed-form score+context multiplies of one block: `2(M²·N·d + N²·M·d)`.
pub fn two_stage_mults(m: usize, n: usize, d: usize) -> u64 {
    2 * (m * m * n * d + n * n * m * d) as u64
}

/// Closed-form multiplies of full attention over all `M·N` tokens.
pub fn joint_attention_mults(m: usize, n: usize, d: usize) -> u64 {
    2 * ((m * n) * (m * n) * d) as u64
}

/// Value-level backbone over an already position-encoded grid.
pub fn esat_forward<T: Real>(
    store: &ParameterStore<T>,
    tokens: &Tensor<T>,
    cfg: &ModelConfig,
) -> Result<(Tensor<T>, AttnCounts)> {
    let mut sess = Session::new(store, false);
    let z = sess.constant(tokens.clone());
    let h = esat_graph(&mut sess, z, cfg, None)?;
    let counts = AttnCounts {
        channel: sess.channel_attn_mults,
        time: sess.time_attn_mults,
    };
    Ok((sess.g.value(h).clone(), counts))
}

/// Tokenize (optionally filling patches with the task token), add positions
/// and run the block stack.
pub fn encode<T: Real>(
    sess: &mut Session<'_, T>,
    pw: &PreparedWindow<T>,
    cfg: &ModelConfig,
    fill: Option<&[bool]>,
    rng: DropoutRng<'_>,
) -> Result<Var> {
    let z = tokenize_graph(sess, pw, fill)?;
    let z = add_positions(sess, z)?;
    esat_graph(sess, z, cfg, rng)
}

/// Value-level encode of a token sequence (positions added here).
pub fn encode_tokens<T: Real>(store: &ParameterStore<T>, tok: &TokenSequence<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let mut sess = Session::new(store, false);
    let z = sess.constant(tok.tokens.clone());
    let z = add_positions(&mut sess, z)?;
    let h = esat_graph(&mut sess, z, cfg, None)?;
    Ok(sess.g.value(h).clone())
}

fn select_channels<T: Real>(sess: &mut Session<'_, T>, x: Var, channels: &[usize]) -> Result<Var> {
    let m = sess.g.shape(x)[0];
    if channels.iter().any(|&c| c >= m) {
        return Err(Error::Config(format!("channel set {channels:?} out of range for {m} channels")));
    }
    if channels.len() == m && channels.iter().enumerate().all(|(i, &c)| i == c) {
        return Ok(x);
    }
    let parts = channels
        .iter()
        .map(|&c| sess.g.slice(x, 0, c, 1))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(sess.g.concat(&parts, 0)?)
}

/// Apply `head` to the patch-section tokens of `channels`: `[C, P, pl]`.
pub fn head_patches<T: Real>(
    sess: &mut Session<'_, T>,
    h: Var,
    sections: &SectionMap,
    head: Head,
    channels: &[usize],
) -> Result<Var> {
    if channels.is_empty() {
        return Err(Error::Config("empty channel set for head".into()));
    }
    let patch = sess.g.slice(h, 1, sections.patch.start, sections.patches())?;
    let patch = select_channels(sess, patch, channels)?;
    let (w, b) = (sess.p(&head.weight())?, sess.p(&head.bias())?);
    Ok(sess.g.linear(patch, w, Some(b))?)
}

/// Normalized reconstruction of every channel, `[M, span]`.
pub fn decode_recon<T: Real>(sess: &mut Session<'_, T>, h: Var, pw: &PreparedWindow<T>) -> Result<Var> {
    let all: Vec<usize> = (0..pw.channels()).collect();
    let y = head_patches(sess, h, &pw.sections, Head::Recon, &all)?;
    Ok(sess.g.fold_patches(y, pw.stride)?)
}

/// Baseline prediction in signal units, `[C, span]`.
pub fn decode_bp<T: Real>(sess: &mut Session<'_, T>, h: Var, pw: &PreparedWindow<T>, channels: &[usize]) -> Result<Var> {
    let y = head_patches(sess, h, &pw.sections, Head::Bp, channels)?;
    let folded = sess.g.fold_patches(y, pw.stride)?;
    denormalize_graph(sess, folded, pw, channels)
}

/// `x·σ_c + μ_c` per row.
pub fn denormalize_graph<T: Real>(
    sess: &mut Session<'_, T>,
    x: Var,
    pw: &PreparedWindow<T>,
    channels: &[usize],
) -> Result<Var> {
    let span = sess.g.shape(x)[1];
    let rows = channels.len();
    let scale: Vec<T> = channels
        .iter()
        .flat_map(|&c| std::iter::repeat(T::of(pw.sigma[c])).take(span))
        .collect();
    let shift: Vec<T> = channels
        .iter()
        .flat_map(|&c| std::iter::repeat(T::of(pw.mu[c])).take(span))
        .collect();
    let scale = sess.constant(Tensor::new(vec![rows, span], scale)?);
    let shift = sess.constant(Tensor::new(vec![rows, span], shift)?);
    let y = sess.g.mul(x, scale)?;
    Ok(sess.g.add(y, shift)?)
}

/// Per-timestep anomaly scores in (0, 1), `[C, span]`. Sigmoid is applied
/// per patch before overlap-averaging.
pub fn decode_ad<T: Real>(sess: &mut Session<'_, T>, h: Var, pw: &PreparedWindow<T>, channels: &[usize]) -> Result<Var> {
    let y = head_patches(sess, h, &pw.sections, Head::Ad, channels)?;
    let y = sess.g.sigmoid(y);
    Ok(sess.g.fold_patches(y, pw.stride)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_fleet, make_windows};
    use crate::tokenizer::{prepare, tokenize};

    fn tiny() -> (ModelConfig, TokenizerConfig) {
        let model = ModelConfig {
            num_layers: 2,
            model_dim: 8,
            ffn_hidden: 16,
            num_heads: 1,
            dropout: 0.0,
        };
        let tok = TokenizerConfig {
            patch_len: 8,
            stride: 8,
            prompt_len: 2,
            task_len: 1,
            eps: 1e-5,
        };
        (model, tok)
    }

    fn window(spec: &FleetSpec, len: usize) -> crate::data::SignalWindow {
        let ds = generate_fleet(spec, len, 3).unwrap();
        make_windows(&ds, len, len).unwrap().remove(0)
    }

    #[test]
    fn zero_layers_is_identity() {
        let (mut model, tok) = tiny();
        model.num_layers = 0;
        let spec = FleetSpec::desk_c();
        let store = init_params::<f64>(&model, &tok, 32, &[spec.clone()], 1).unwrap();
        let pw = prepare(&window(&spec, 32), &spec, &tok).unwrap();
        let ts = tokenize(&store, &pw).unwrap();
        let (h, counts) = esat_forward(&store, &ts.tokens, &model).unwrap();
        assert!(h.bitwise_eq(&ts.tokens));
        assert_eq!(counts.total(), 0);
    }

    #[test]
    fn counters_match_closed_form() {
        let (model, tok) = tiny();
        let spec = FleetSpec::desk_a();
        let store = init_params::<f64>(&model, &tok, 64, &[spec.clone()], 1).unwrap();
        let pw = prepare(&window(&spec, 64), &spec, &tok).unwrap();
        let ts = tokenize(&store, &pw).unwrap();
        let (_, counts) = esat_forward(&store, &ts.tokens, &model).unwrap();
        let (m, n, d) = (8, ts.sections.len(), 8);
        assert_eq!(counts.total(), 2 * two_stage_mults(m, n, d));
    }

    #[test]
    fn heads_shapes_and_zero_weight_cases() {
        let (model, tok) = tiny();
        let spec = FleetSpec::desk_c();
        let mut store = init_params::<f64>(&model, &tok, 40, &[spec.clone()], 1).unwrap();
        for head in [Head::Bp, Head::Ad] {
            let w = store.get_mut(&head.weight()).unwrap();
            w.tensor = Tensor::zeros(w.tensor.shape());
        }
        let pw = prepare(&window(&spec, 40), &spec, &tok).unwrap();
        let mut sess = Session::new(&store, false);
        let h = encode(&mut sess, &pw, &model, None, None).unwrap();
        let r = decode_recon(&mut sess, h, &pw).unwrap();
        assert_eq!(sess.g.shape(r), &[4, 40]);
        let bp = decode_bp(&mut sess, h, &pw, &[3]).unwrap();
        assert_eq!(sess.g.shape(bp), &[1, 40]);
        assert!(sess.g.value(bp).data().iter().all(|&v| (v - pw.mu[3]).abs() < 1e-9));
        let ad = decode_ad(&mut sess, h, &pw, &[3]).unwrap();
        assert!(sess.g.value(ad).data().iter().all(|&v| v == 0.5));
        assert!(decode_bp(&mut sess, h, &pw, &[9]).is_err());
    }

    #[test]
    fn multi_head_keeps_shape() {
        let (mut model, tok) = tiny();
        model.num_heads = 2;
        let spec = FleetSpec::desk_c();
        let store = init_params::<f64>(&model, &tok, 32, &[spec.clone()], 1).unwrap();
        let pw = prepare(&window(&spec, 32), &spec, &tok).unwrap();
        let ts = tokenize(&store, &pw).unwrap();
        let (h, _) = esat_forward(&store, &ts.tokens, &model).unwrap();
        assert_eq!(h.shape(), ts.tokens.shape());
        model.num_heads = 3;
        assert!(model.validate().is_err());
    }
}
