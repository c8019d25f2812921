//! Finite-difference verification of the autodiff engine, per op and through
//! the whole model. Everything runs at f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ChannelInfo, FaultType, FleetSpec, SignalWindow};
use crate::error::{Error, Result};
use crate::finetune::{window_objective, FinetuneConfig, Task};
use crate::model::{init_params, ModelConfig};
use crate::pretrain::{window_loss, MaskPlan};
use crate::tensor::{finite_diff_grad, relative_error, Graph, Tensor, TensorError, Var};
use crate::tokenizer::{prepare, PreparedWindow, TokenizerConfig};
use crate::training::ParameterStore;

pub const FD_STEP: f64 = 1e-5;
/// Gradient magnitudes below this are treated as zero when scaling errors.
pub const ERR_FLOOR: f64 = 1e-7;

/// Worst normwise relative error of one checked quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub rel_err: f64,
    pub elements: usize,
}

impl CheckResult {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err <= tol
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> std::result::Result<Var, TensorError>;

/// Contract the op's output with fixed random weights so every output
/// element matters, then compare each input's gradient against central
/// differences.
fn check_op(name: &str, inputs: &[Tensor<f64>], build: &Build, seed: u64) -> Result<CheckResult> {
    let eval = |xs: &[Tensor<f64>], track: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), track)).collect();
        let y = build(&mut g, &vars)?;
        let w = random(g.shape(y), &mut ChaCha8Rng::seed_from_u64(seed));
        let w = g.constant(w);
        let prod = g.mul(y, w)?;
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        if !track {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let out = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        Ok((value, out))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    let mut elements = 0;
    for (i, x) in inputs.iter().enumerate() {
        let numeric = finite_diff_grad(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[i] = probe.clone();
                eval(&xs, false).map(|r| r.0).unwrap_or(f64::NAN)
            },
            x,
            FD_STEP,
        );
        worst = worst.max(relative_error(analytic[i].data(), numeric.data(), ERR_FLOOR));
        elements += x.numel();
    }
    Ok(CheckResult { name: name.to_string(), rel_err: worst, elements })
}

/// Check every differentiable graph op on small random inputs.
pub fn check_ops(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| random(shape, &mut rng);
    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<Build>)> = vec![
        ("add", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", vec![r(&[5])], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        ("broadcast_add", vec![r(&[2, 3, 4]), r(&[4])], Box::new(|g, v| g.broadcast_add(v[0], v[1]))),
        ("broadcast_to", vec![r(&[3, 4])], Box::new(|g, v| g.broadcast_to(v[0], &[2, 3, 4]))),
        ("matmul_shared", vec![r(&[2, 3, 4]), r(&[4, 5])], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("matmul_batched", vec![r(&[2, 3, 4]), r(&[2, 4, 2])], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("linear", vec![r(&[3, 4]), r(&[4, 2]), r(&[2])], Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])))),
        ("transpose", vec![r(&[2, 3, 4])], Box::new(|g, v| g.transpose(v[0], &[2, 0, 1]))),
        ("transpose_last", vec![r(&[2, 3, 4])], Box::new(|g, v| g.transpose_last(v[0]))),
        ("reshape", vec![r(&[2, 6])], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        ("softmax", vec![r(&[2, 3, 5])], Box::new(|g, v| g.softmax_lastdim(v[0]))),
        (
            "layer_norm",
            vec![r(&[3, 6]), r(&[6]), r(&[6])],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("gelu", vec![r(&[7])], Box::new(|g, v| Ok(g.gelu(v[0])))),
        ("sigmoid", vec![r(&[7])], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        ("concat", vec![r(&[2, 3]), r(&[2, 2])], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        ("slice", vec![r(&[3, 5])], Box::new(|g, v| g.slice(v[0], 1, 1, 3))),
        (
            "masked_select",
            vec![r(&[2, 3])],
            Box::new(|g, v| g.masked_select(v[0], &[true, false, true, true, false, false])),
        ),
        ("sum", vec![r(&[2, 3])], Box::new(|g, v| Ok(g.sum(v[0])))),
        ("mean", vec![r(&[2, 3])], Box::new(|g, v| Ok(g.mean(v[0])))),
        ("mse", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|g, v| g.mse(v[0], v[1]))),
        ("fold_patches_overlap", vec![r(&[2, 3, 4])], Box::new(|g, v| g.fold_patches(v[0], 2))),
        ("fold_patches_gap", vec![r(&[1, 3, 2])], Box::new(|g, v| g.fold_patches(v[0], 3))),
    ];
    cases
        .iter()
        .enumerate()
        .map(|(i, (name, xs, build))| check_op(name, xs, build.as_ref(), seed.wrapping_add(i as u64 + 1)))
        .collect()
}

/// The smallest complete setup: d=8, two layers, three channels, four
/// patches of four samples.
pub struct TinySetup {
    pub spec: FleetSpec,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub window: PreparedWindow<f64>,
    pub store: ParameterStore<f64>,
}

pub fn tiny_setup(seed: u64) -> Result<TinySetup> {
    let spec = FleetSpec {
        fleet_id: "tiny".into(),
        channels: vec![
            ChannelInfo::new("u0", "-"),
            ChannelInfo::new("u1", "-"),
            ChannelInfo::new("y", "-"),
        ],
        sample_freq_hz: 1.0,
        fault_type: FaultType::UnderPressure,
        baseline_channel: 2,
        anomaly_rate: 0.5,
    };
    let tokenizer = TokenizerConfig {
        patch_len: 4,
        stride: 4,
        prompt_len: 2,
        task_len: 1,
        eps: 1e-5,
    };
    let model = ModelConfig {
        num_layers: 2,
        model_dim: 8,
        ffn_hidden: 16,
        num_heads: 2,
        dropout: 0.0,
    };
    let len = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<Vec<f64>> = (0..3)
        .map(|c| (0..len).map(|_| 10.0 * c as f64 + rng.gen_range(-1.0..1.0)).collect())
        .collect();
    // Labels mix normal and faulty steps so both loss terms are live.
    let labels: Vec<u8> = (0..len).map(|t| u8::from((5..9).contains(&t))).collect();
    let window = SignalWindow {
        fleet_id: spec.fleet_id.clone(),
        start: 0,
        values,
        labels,
        phase: "cruise".into(),
    };
    let window = prepare(&window, &spec, &tokenizer)?;
    let mut store = init_params::<f64>(&model, &tokenizer, len, std::slice::from_ref(&spec), seed)?;
    // Heads start from random, not zero, weights so no gradient is
    // trivially zero.
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let p = store.get_mut(&name)?;
        p.trainable = true;
        for v in p.tensor.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    Ok(TinySetup { spec, tokenizer, model, window, store })
}

/// Compare every parameter's analytic gradient of `loss` with central
/// differences; one result per parameter.
pub fn check_params<F>(store: &ParameterStore<f64>, loss: F) -> Result<Vec<CheckResult>>
where
    F: Fn(&ParameterStore<f64>) -> Result<(f64, Vec<(String, Tensor<f64>)>)>,
{
    let (_, grads) = loss(store)?;
    let mut out = Vec::new();
    for (name, param) in store.iter() {
        let analytic = grads
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Tensor::zeros(param.tensor.shape()));
        let mut probe_store = store.clone();
        let numeric = finite_diff_grad(
            |probe| {
                probe_store.get_mut(name).expect("param exists").tensor = probe.clone();
                loss(&probe_store).map(|r| r.0).unwrap_or(f64::NAN)
            },
            &param.tensor,
            FD_STEP,
        );
        out.push(CheckResult {
            name: name.to_string(),
            rel_err: relative_error(analytic.data(), numeric.data(), ERR_FLOOR),
            elements: param.tensor.numel(),
        });
    }
    Ok(out)
}

/// Joint fine-tuning loss through the full (unfrozen) model.
pub fn check_joint_loss(seed: u64) -> Result<Vec<CheckResult>> {
    let s = tiny_setup(seed)?;
    let cfg = FinetuneConfig::default();
    let task = Task::new(&cfg, &s.spec)?;
    let alpha = cfg.loss.alpha;
    check_params(&s.store, |st| {
        let (parts, grads) = window_objective(st, &s.window, None, &task, &s.model, alpha)?;
        Ok((parts.total, grads))
    })
}

/// Masked-reconstruction loss through the full model.
pub fn check_mstm_loss(seed: u64) -> Result<Vec<CheckResult>> {
    let s = tiny_setup(seed)?;
    let keep = vec![true, false, true, true, false, true, true, true, true, true, false, false];
    let plan = MaskPlan::from_keep(3, 4, keep)?;
    check_params(&s.store, |st| window_loss(st, &s.window, &plan, &s.model, None, true))
}

/// Worst result of a batch, or a contract error when the batch is empty.
pub fn worst(results: &[CheckResult]) -> Result<&CheckResult> {
    results
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .ok_or_else(|| Error::Contract("no gradient checks ran".into()))
}
