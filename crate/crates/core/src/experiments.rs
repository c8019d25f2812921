//! Experiment drivers shared by the CLI and the acceptance suite: pretrain,
//! pretrained-vs-scratch transfer, the model-size grid and the stride sweep.

use crate::config::RunConfig;
use crate::data::{generate_fleet, inject_faults, make_windows, split_windows, FleetDataset, FleetSpec, SignalWindow};
use crate::error::{Error, Result};
use crate::finetune::{finetune_run, predict, FinetuneOutcome, FreezePlan, LabeledWindows};
use crate::metrics::{fit_power_law, EvalReport, PowerLaw};
use crate::model::init_params;
use crate::par;
use crate::pretrain::{eval_mstm, pretrain_epoch, EpochStats, FleetWindows, ProgressLine};
use crate::tensor::Real;
use crate::tokenizer::{prepare, register_fleet_from, PreparedWindow};
use crate::training::{count_params, derive_seed, seed_all, tag, Adam, ParameterStore};

/// Time steps per fleet in the desk corpus.
pub const DESK_SOURCE_POINTS: usize = 240_000;
pub const DESK_TARGET_POINTS: usize = 200_000;
/// Fault-injection chunk length of the desk target fleet.
pub const FAULT_CHUNK: usize = 512;

pub fn prepare_windows<T: Real>(windows: &[SignalWindow], spec: &FleetSpec, cfg: &RunConfig) -> Result<Vec<PreparedWindow<T>>> {
    par::map(windows, |_, w| prepare(w, spec, &cfg.tokenizer))
        .into_iter()
        .collect()
}

/// Overlapping pretraining windows of one (label-free) dataset.
pub fn fleet_windows<T: Real>(ds: &FleetDataset, cfg: &RunConfig) -> Result<FleetWindows<T>> {
    let windows = make_windows(ds, cfg.window_len, cfg.window_stride)?;
    Ok(FleetWindows {
        spec: ds.spec.clone(),
        windows: prepare_windows(&windows, &ds.spec, cfg)?,
    })
}

/// Labeled train/test windows of a fine-tuning fleet.
#[derive(Debug, Clone)]
pub struct TargetSplit<T: Real> {
    pub train: LabeledWindows<T>,
    pub test: Vec<PreparedWindow<T>>,
}

pub fn target_split<T: Real>(ds: &FleetDataset, cfg: &RunConfig) -> Result<TargetSplit<T>> {
    if ds.labels.is_none() {
        return Err(Error::Data(format!("fleet {} has no anomaly labels", ds.spec.fleet_id)));
    }
    let split = split_windows(ds, cfg.window_len, cfg.eval_stride)?;
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Data(format!("fleet {} too short for a train/test split", ds.spec.fleet_id)));
    }
    Ok(TargetSplit {
        train: LabeledWindows {
            spec: ds.spec.clone(),
            windows: prepare_windows(&split.train, &ds.spec, cfg)?,
            labeled: true,
        },
        test: prepare_windows(&split.test, &ds.spec, cfg)?,
    })
}

/// The desk corpus: two label-free source fleets and a faulted target.
pub struct DeskCorpus {
    pub sources: Vec<FleetDataset>,
    pub target: FleetDataset,
}

pub fn desk_corpus(seed: u64) -> Result<DeskCorpus> {
    let sources = [FleetSpec::desk_a(), FleetSpec::desk_b()]
        .iter()
        .map(|s| generate_fleet(s, DESK_SOURCE_POINTS, derive_seed(seed, &[tag(&s.fleet_id)])))
        .collect::<Result<Vec<_>>>()?;
    let c = FleetSpec::desk_c();
    let target_seed = derive_seed(seed, &[tag(&c.fleet_id)]);
    let mut target = generate_fleet(&c, DESK_TARGET_POINTS, target_seed)?;
    inject_faults(&mut target, FAULT_CHUNK, target_seed)?;
    Ok(DeskCorpus { sources, target })
}

/// Fresh parameters for `fleets` under `cfg`.
pub fn init_store<T: Real>(cfg: &RunConfig, fleets: &[FleetSpec], seed: u64) -> Result<ParameterStore<T>> {
    init_params(&cfg.model, &cfg.tokenizer, cfg.window_len, fleets, seed)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub epochs: Vec<EpochStats>,
    /// Held-out masked loss (fixed masks) before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Run `cfg.pretrain.epochs` epochs starting at `first_epoch`, measuring the
/// masked loss on `probe` windows before and after.
pub fn run_pretrain<T: Real>(
    store: &mut ParameterStore<T>,
    adam: &mut Adam<T>,
    corpus: &[FleetWindows<T>],
    probe: &[&PreparedWindow<T>],
    cfg: &RunConfig,
    first_epoch: usize,
    progress: &mut dyn FnMut(&ProgressLine),
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<PretrainOutcome> {
    let bank = seed_all(cfg.seed);
    let eval_bank = seed_all(derive_seed(cfg.seed, &[tag("probe")]));
    let ratio = cfg.pretrain.mask_ratio;
    let initial_loss = eval_mstm(store, probe, &cfg.model, ratio, &eval_bank)?;
    let mut epochs = Vec::with_capacity(cfg.pretrain.epochs);
    for e in first_epoch..first_epoch + cfg.pretrain.epochs {
        let stats = pretrain_epoch(corpus, store, adam, &cfg.pretrain, &cfg.model, &bank, e, progress)?;
        on_epoch(&stats);
        epochs.push(stats);
    }
    let final_loss = eval_mstm(store, probe, &cfg.model, ratio, &eval_bank)?;
    Ok(PretrainOutcome {
        epochs,
        initial_loss,
        final_loss,
    })
}

/// Fine-tune the heads of `store` on the target's training windows; frozen
/// backbone, labeled subset drawn with `seed`.
pub fn finetune_heads<T: Real>(
    store: &mut ParameterStore<T>,
    target: &TargetSplit<T>,
    cfg: &RunConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    let plan = FreezePlan::heads_only(store);
    finetune_run(store, &target.train, &plan, &cfg.finetune, &cfg.model, &seed_all(seed), &mut |_, _, _| {})
}

pub fn evaluate<T: Real>(
    store: &ParameterStore<T>,
    windows: &[PreparedWindow<T>],
    spec: &FleetSpec,
    cfg: &RunConfig,
    ratio: Option<crate::finetune::ParamRatio>,
) -> Result<EvalReport> {
    let preds = predict(store, windows, spec, &cfg.finetune, &cfg.model)?;
    Ok(EvalReport::from_predictions(
        &preds,
        cfg.finetune.loss.ad_threshold,
        cfg.hash(),
        cfg.seed,
        ratio,
    ))
}

/// Held-out scores of one fine-tuned model.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmScore {
    pub bp_mae: f64,
    pub bp_mape: f64,
    pub f1: Option<f64>,
}

impl ArmScore {
    fn from_report(r: &EvalReport) -> ArmScore {
        let bp = &r.fleets[0].bp;
        ArmScore {
            bp_mae: bp.mae,
            bp_mape: bp.mape,
            f1: r.ad.f1(),
        }
    }

    /// F1 with an undefined value read as 0.
    pub fn f1_or_zero(&self) -> f64 {
        self.f1.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedComparison {
    pub seed: u64,
    pub pretrained: ArmScore,
    pub scratch: ArmScore,
}

/// For each fine-tuning seed: heads on the pretrained backbone vs heads on a
/// randomly initialized (equally frozen) backbone, same labeled subset.
pub fn transfer_experiment<T: Real>(
    pretrained: &ParameterStore<T>,
    sources: &[FleetSpec],
    target: &TargetSplit<T>,
    cfg: &RunConfig,
    seeds: &[u64],
) -> Result<Vec<SeedComparison>> {
    let spec = &target.train.spec;
    let mut base = pretrained.clone();
    if !base.contains(&crate::tokenizer::task_param(&spec.fleet_id)) {
        register_fleet_from(&mut base, spec, sources)?;
    }
    let mut fleets = sources.to_vec();
    fleets.push(spec.clone());
    seeds
        .iter()
        .map(|&seed| {
            let ft_seed = derive_seed(cfg.seed, &[tag("finetune"), seed]);
            let mut pre = base.clone();
            let out = finetune_heads(&mut pre, target, cfg, ft_seed)?;
            let pre_report = evaluate(&pre, &target.test, spec, cfg, Some(out.ratio))?;
            let mut scratch = init_store::<T>(cfg, &fleets, derive_seed(cfg.seed, &[tag("scratch"), seed]))?;
            let out = finetune_heads(&mut scratch, target, cfg, ft_seed)?;
            let scratch_report = evaluate(&scratch, &target.test, spec, cfg, Some(out.ratio))?;
            Ok(SeedComparison {
                seed,
                pretrained: ArmScore::from_report(&pre_report),
                scratch: ArmScore::from_report(&scratch_report),
            })
        })
        .collect()
}

/// One point of the model-size grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub model_dim: usize,
    pub params: usize,
    pub pretrain_loss: f64,
    pub score: ArmScore,
}

/// Pretrain a fresh model on the source fleets of `corpus`.
pub fn pretrain_sources<T: Real>(
    corpus: &DeskCorpus,
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<(ParameterStore<T>, PretrainOutcome)> {
    let specs: Vec<FleetSpec> = corpus.sources.iter().map(|d| d.spec.clone()).collect();
    let fw = corpus
        .sources
        .iter()
        .map(|d| fleet_windows::<T>(d, cfg))
        .collect::<Result<Vec<_>>>()?;
    let probe: Vec<&PreparedWindow<T>> = fw.iter().flat_map(|f| f.windows.iter().step_by(8)).collect();
    let mut store = init_store::<T>(cfg, &specs, cfg.seed)?;
    let mut adam = Adam::new(cfg.pretrain_adam);
    let out = run_pretrain(&mut store, &mut adam, &fw, &probe, cfg, 0, &mut |_| {}, on_epoch)?;
    Ok((store, out))
}

/// Fine-tune heads of a source-pretrained model on the target and score it.
pub fn grid_point<T: Real>(
    corpus: &DeskCorpus,
    cfg: &RunConfig,
    pretrained: &ParameterStore<T>,
    pretrain_loss: f64,
) -> Result<GridPoint> {
    let specs: Vec<FleetSpec> = corpus.sources.iter().map(|d| d.spec.clone()).collect();
    let target = target_split::<T>(&corpus.target, cfg)?;
    let mut store = pretrained.clone();
    register_fleet_from(&mut store, &target.train.spec, &specs)?;
    let params = count_params(&store, |_| true);
    finetune_heads(&mut store, &target, cfg, derive_seed(cfg.seed, &[tag("finetune")]))?;
    let report = evaluate(&store, &target.test, &target.train.spec, cfg, None)?;
    Ok(GridPoint {
        model_dim: cfg.model.model_dim,
        params,
        pretrain_loss,
        score: ArmScore::from_report(&report),
    })
}

/// Config of the grid member with width `d` (FFN kept at 4d).
pub fn with_width(cfg: &RunConfig, d: usize) -> Result<RunConfig> {
    let mut c = cfg.clone();
    c.model.model_dim = d;
    c.model.ffn_hidden = 4 * d;
    c.validate()?;
    Ok(c)
}

/// One model per width; the fit relates total parameter count to held-out
/// BP MAPE. `pretrain` supplies each width's pretrained store and final
/// masked loss (normally [`pretrain_sources`], or a cache).
pub fn scaling_grid<T: Real>(
    corpus: &DeskCorpus,
    cfg: &RunConfig,
    dims: &[usize],
    pretrain: &mut dyn FnMut(&RunConfig) -> Result<(ParameterStore<T>, f64)>,
    progress: &mut dyn FnMut(&GridPoint),
) -> Result<(Vec<GridPoint>, PowerLaw)> {
    if dims.len() < 3 {
        return Err(Error::Config("the scaling grid needs at least three widths".into()));
    }
    let mut points = Vec::with_capacity(dims.len());
    for &d in dims {
        let c = with_width(cfg, d)?;
        let (store, loss) = pretrain(&c)?;
        let point = grid_point::<T>(corpus, &c, &store, loss)?;
        progress(&point);
        points.push(point);
    }
    let fit = fit_power_law(&points.iter().map(|p| (p.params as f64, p.score.bp_mape)).collect::<Vec<_>>())?;
    Ok((points, fit))
}

/// One row of the stride sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct StridePoint {
    pub stride: usize,
    pub patch_len: usize,
    pub bp_mae: f64,
}

/// Train and score one model per stride with `patch_len = stride`.
pub fn stride_sweep<T: Real>(
    corpus: &DeskCorpus,
    cfg: &RunConfig,
    strides: &[usize],
    progress: &mut dyn FnMut(&StridePoint),
) -> Result<Vec<StridePoint>> {
    strides
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.tokenizer.stride = s;
            c.tokenizer.patch_len = s;
            c.validate()?;
            let (store, out) = pretrain_sources::<T>(corpus, &c, &mut |_| {})?;
            let p = grid_point::<T>(corpus, &c, &store, out.final_loss)?;
            let point = StridePoint {
                stride: s,
                patch_len: s,
                bp_mae: p.score.bp_mae,
            };
            progress(&point);
            Ok(point)
        })
        .collect()
}

pub fn stride_csv(points: &[StridePoint]) -> String {
    let mut s = String::from("stride,patch_len,bp_mae\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.stride, p.patch_len, p.bp_mae));
    }
    s
}

pub fn grid_csv(points: &[GridPoint]) -> String {
    let mut s = String::from("model_dim,params,pretrain_loss,bp_mae,bp_mape,ad_f1\n");
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.model_dim,
            p.params,
            p.pretrain_loss,
            p.score.bp_mae,
            p.score.bp_mape,
            crate::metrics::fmt_opt(p.score.f1)
        ));
    }
    s
}
