use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use fsgpt::config::{parse_pairs, Precision, RunCard, RunConfig};
use fsgpt::data::{generate_fleet, inject_faults, load_dataset, make_windows, save_dataset, FleetDataset, FleetSpec};
use fsgpt::experiments::{
    desk_corpus, evaluate, finetune_heads, fleet_windows, grid_csv, init_store, pretrain_sources, run_pretrain,
    scaling_grid, stride_csv, stride_sweep, target_split,
};
use fsgpt::finetune::{pooled_features, FreezePlan};
use fsgpt::gradcheck::{check_joint_loss, check_mstm_loss, check_ops, worst};
use fsgpt::metrics::{features_csv, fit_power_law, FeatureRow};
use fsgpt::persistence::{load, peek_dtype, save, Checkpoint, OptimizerState};
use fsgpt::tensor::{DType, Real};
use fsgpt::tokenizer::{prepare, register_fleet_from, task_param};
use fsgpt::training::{derive_seed, tag, Adam};
use fsgpt::{Error, Result};

use crate::{Command, ConfigArgs};

/// Largest gradient-check error accepted by `gradcheck`.
const GRAD_TOL: f64 = 1e-4;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { cfg, spec, points, faults, out } => gen_data(&resolve(&cfg, None)?, &spec, points, faults, &out),
        Command::Pretrain {
            cfg,
            data,
            resume,
            out_checkpoint,
        } => {
            let base = resume.as_deref().map(card_of).transpose()?;
            let config = resolve(&cfg, base.as_ref().map(|c| c.config.clone()))?;
            match config.precision {
                Precision::F32 => pretrain::<f32>(&config, &data, resume.as_deref(), &out_checkpoint),
                Precision::F64 => pretrain::<f64>(&config, &data, resume.as_deref(), &out_checkpoint),
            }
        }
        Command::Finetune {
            cfg,
            data,
            checkpoint,
            from_scratch: _,
            out_checkpoint,
        } => {
            let base = checkpoint.as_deref().map(card_of).transpose()?;
            let config = resolve(&cfg, base.as_ref().map(|c| c.config.clone()))?;
            match config.precision {
                Precision::F32 => finetune::<f32>(&config, &data, checkpoint.as_deref(), &out_checkpoint),
                Precision::F64 => finetune::<f64>(&config, &data, checkpoint.as_deref(), &out_checkpoint),
            }
        }
        Command::Eval {
            cfg,
            data,
            checkpoint,
            report,
        } => {
            let config = resolve(&cfg, Some(card_of(&checkpoint)?.config))?;
            match config.precision {
                Precision::F32 => eval::<f32>(&config, &data, &checkpoint, &report),
                Precision::F64 => eval::<f64>(&config, &data, &checkpoint, &report),
            }
        }
        Command::Gradcheck { cfg } => gradcheck(&resolve(&cfg, None)?),
        Command::SweepStride { cfg, values, out } => {
            let config = resolve(&cfg, None)?;
            match config.precision {
                Precision::F32 => sweep_stride::<f32>(&config, &values, &out),
                Precision::F64 => sweep_stride::<f64>(&config, &values, &out),
            }
        }
        Command::FitScaling {
            cfg,
            points,
            run_grid: _,
            dims,
            out,
        } => {
            let config = resolve(&cfg, None)?;
            match (points, config.precision) {
                (Some(p), _) => fit_points(&config, &p, &out),
                (None, Precision::F32) => fit_grid::<f32>(&config, &dims, &out),
                (None, Precision::F64) => fit_grid::<f64>(&config, &dims, &out),
            }
        }
        Command::ExportFeatures {
            cfg,
            data,
            checkpoint,
            out,
        } => {
            let config = resolve(&cfg, Some(card_of(&checkpoint)?.config))?;
            match config.precision {
                Precision::F32 => export_features::<f32>(&config, &data, &checkpoint, &out),
                Precision::F64 => export_features::<f64>(&config, &data, &checkpoint, &out),
            }
        }
    }
}

/// Layer the configuration and echo it (to stderr, so stdout stays
/// machine-readable).
fn resolve(args: &ConfigArgs, base: Option<RunConfig>) -> Result<RunConfig> {
    let file_pairs = match &args.config {
        Some(path) => parse_pairs(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?,
        None => Vec::new(),
    };
    let file_profile = file_pairs.iter().find(|(k, _)| k == "profile").map(|(_, v)| v.as_str());
    let mut cfg = match (&args.profile, file_profile, base) {
        (Some(p), _, _) => RunConfig::profile(p)?,
        (None, Some(p), _) => RunConfig::profile(p)?,
        (None, None, Some(b)) => b,
        (None, None, None) => RunConfig::desk(),
    };
    for (k, v) in file_pairs.iter().filter(|(k, _)| k != "profile") {
        cfg.set(k, v)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(p) = &args.precision {
        cfg.precision = p.parse()?;
    }
    cfg.validate()?;
    eprint!("{}", cfg.to_text());
    eprintln!("config_hash={}", cfg.hash());
    Ok(cfg)
}

fn card_of(path: &Path) -> Result<RunCard> {
    let ckpt_cfg = match peek_dtype(path)? {
        Some(DType::F64) => load::<f64>(path)?.config,
        _ => load::<f32>(path)?.config,
    };
    RunCard::parse(&ckpt_cfg)
}

fn load_checked<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    match peek_dtype(path)? {
        Some(dt) if dt != T::DTYPE => Err(Error::Format(format!(
            "{} holds {dt:?} tensors; pass --precision to match",
            path.display()
        ))),
        _ => load::<T>(path),
    }
}

fn provenance(cfg: &RunConfig) -> Vec<(String, String)> {
    vec![
        ("config_hash".to_string(), cfg.hash()),
        ("seed".to_string(), cfg.seed.to_string()),
    ]
}

/// `# key=value` header lines carried by every CSV the CLI writes.
fn csv_header(cfg: &RunConfig) -> String {
    provenance(cfg).iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(cfg: &RunConfig, spec: &str, points: usize, faults: bool, out: &Path) -> Result<()> {
    let spec = FleetSpec::preset(spec)?;
    let mut ds = generate_fleet(&spec, points, cfg.seed)?;
    if faults {
        let segs = inject_faults(&mut ds, cfg.window_len, cfg.seed)?;
        eprintln!("injected {} fault segments", segs.len());
    }
    let path = save_dataset(&ds, out, provenance(cfg))?;
    println!("{}", path.display());
    Ok(())
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<FleetDataset>> {
    let sets = paths.iter().map(|p| load_dataset(p)).collect::<Result<Vec<_>>>()?;
    let mut seen = BTreeSet::new();
    for ds in &sets {
        if !seen.insert(ds.spec.fleet_id.clone()) {
            return Err(Error::Config(format!("fleet {} given twice", ds.spec.fleet_id)));
        }
    }
    Ok(sets)
}

fn pretrain<T: Real>(cfg: &RunConfig, data: &[PathBuf], resume: Option<&Path>, out: &Path) -> Result<()> {
    let sets = load_all(data)?;
    // Windowing and tokenizer checks run for every fleet before any step.
    let corpus = sets.iter().map(|d| fleet_windows::<T>(d, cfg)).collect::<Result<Vec<_>>>()?;
    if let Some(f) = corpus.iter().find(|f| f.windows.is_empty()) {
        return Err(Error::Data(format!("fleet {} yields no windows", f.spec.fleet_id)));
    }
    let mut fleets: Vec<FleetSpec> = sets.iter().map(|d| d.spec.clone()).collect();
    let (mut store, mut adam, first_epoch) = match resume {
        Some(path) => {
            let ckpt = load_checked::<T>(path)?;
            let card = RunCard::parse(&ckpt.config)?;
            for f in &fleets {
                if !ckpt.store.contains(&task_param(&f.fleet_id)) {
                    return Err(Error::Config(format!("fleet {} is not registered in {}", f.fleet_id, path.display())));
                }
            }
            let adam = match ckpt.optimizer {
                Some(state) => state.into_adam(cfg.pretrain_adam.clone(), ckpt.step),
                None => Adam::new(cfg.pretrain_adam.clone()),
            };
            let per_epoch: u64 = corpus
                .iter()
                .map(|f| f.windows.len().div_ceil(cfg.pretrain.batch_size) as u64)
                .sum();
            for f in card.fleets {
                if !fleets.iter().any(|g| g.fleet_id == f.fleet_id) {
                    fleets.push(f);
                }
            }
            (ckpt.store, adam, (ckpt.step / per_epoch) as usize)
        }
        None => (
            init_store::<T>(cfg, &fleets, cfg.seed)?,
            Adam::new(cfg.pretrain_adam.clone()),
            0,
        ),
    };
    let probe: Vec<_> = corpus.iter().flat_map(|f| f.windows.iter().step_by(8)).collect();
    let outcome = run_pretrain(&mut store, &mut adam, &corpus, &probe, cfg, first_epoch, &mut |_| {}, &mut |s| {
        let fleets: Vec<String> = s.fleet_loss.iter().map(|(f, l)| format!("{f}={l:.6}")).collect();
        println!("epoch={} steps={} loss={:.6} {}", s.epoch, s.steps, s.mean_loss, fleets.join(" "));
    })?;
    println!(
        "heldout_mstm_initial={:.6} heldout_mstm_final={:.6} step={}",
        outcome.initial_loss,
        outcome.final_loss,
        adam.step_count()
    );
    let ckpt = Checkpoint {
        config: RunCard { config: cfg.clone(), fleets }.to_text(),
        seed: cfg.seed,
        step: adam.step_count(),
        optimizer: Some(OptimizerState::from_adam(&adam)),
        store,
    };
    save(&ckpt, out)
}

fn finetune<T: Real>(cfg: &RunConfig, data: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    let target = target_split::<T>(&ds, cfg)?;
    let spec = ds.spec.clone();
    let (mut store, mut fleets, step) = match checkpoint {
        Some(path) => {
            let ckpt = load_checked::<T>(path)?;
            let card = RunCard::parse(&ckpt.config)?;
            let mut store = ckpt.store;
            let mut fleets = card.fleets;
            if !store.contains(&task_param(&spec.fleet_id)) {
                register_fleet_from(&mut store, &spec, &fleets)?;
                fleets.push(spec.clone());
            }
            (store, fleets, ckpt.step)
        }
        None => (init_store::<T>(cfg, std::slice::from_ref(&spec), cfg.seed)?, vec![spec.clone()], 0),
    };
    fleets.retain(|f| f.fleet_id != spec.fleet_id);
    fleets.push(spec);
    let outcome = finetune_heads(&mut store, &target, cfg, derive_seed(cfg.seed, &[tag("finetune")]))?;
    if let Some(last) = outcome.epoch_loss.last() {
        println!("final_loss bp={:.6} ad={:.6} total={:.6}", last.bp, last.ad, last.total);
    }
    println!(
        "windows={} steps={} params.trainable={} params.total={} params.ratio={:.6}",
        outcome.windows_used,
        outcome.steps,
        outcome.ratio.trainable,
        outcome.ratio.total,
        outcome.ratio.ratio()
    );
    let ckpt = Checkpoint {
        config: RunCard { config: cfg.clone(), fleets }.to_text(),
        seed: cfg.seed,
        step,
        optimizer: None,
        store,
    };
    save(&ckpt, out)
}

fn eval<T: Real>(cfg: &RunConfig, data: &Path, checkpoint: &Path, report: &Path) -> Result<()> {
    let store = load_checked::<T>(checkpoint)?.store;
    let ds = load_dataset(data)?;
    let target = target_split::<T>(&ds, cfg)?;
    let ratio = FreezePlan::heads_only(&store).ratio(&store);
    let r = evaluate(&store, &target.test, &ds.spec, cfg, Some(ratio))?;
    r.write(report)?;
    print!("{}", r.to_text());
    Ok(())
}

fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let groups = [
        ("ops", check_ops(cfg.seed)?),
        ("joint_loss", check_joint_loss(cfg.seed)?),
        ("mstm_loss", check_mstm_loss(cfg.seed)?),
    ];
    let mut failed = Vec::new();
    for (group, results) in &groups {
        let w = worst(results)?;
        println!("{group}: checks={} worst={} rel_err={:.3e}", results.len(), w.name, w.rel_err);
        failed.extend(results.iter().filter(|r| !r.passes(GRAD_TOL)).map(|r| r.name.clone()));
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("gradient mismatch above {GRAD_TOL:e} in: {}", failed.join(", "))))
    }
}

fn sweep_stride<T: Real>(cfg: &RunConfig, values: &[usize], out: &Path) -> Result<()> {
    let corpus = desk_corpus(cfg.seed)?;
    let points = stride_sweep::<T>(&corpus, cfg, values, &mut |p| {
        println!("stride={} patch_len={} bp_mae={:.6}", p.stride, p.patch_len, p.bp_mae);
    })?;
    write_file(out, &(csv_header(cfg) + &stride_csv(&points)))
}

fn read_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("params") {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            row: i + 1,
            msg: msg.to_string(),
        };
        let (n, l) = line.split_once(',').ok_or_else(|| bad("expected params,loss"))?;
        let n: f64 = n.trim().parse().map_err(|_| bad("params is not a number"))?;
        let l: f64 = l.trim().parse().map_err(|_| bad("loss is not a number"))?;
        out.push((n, l));
    }
    Ok(out)
}

fn fit_text(cfg: &RunConfig, fit: &fsgpt::metrics::PowerLaw, n: usize) -> String {
    let mut s = String::new();
    for (k, v) in provenance(cfg) {
        s.push_str(&format!("{k}={v}\n"));
    }
    s.push_str(&format!("points={n}\n"));
    s.push_str(&format!("n_c={}\n", fsgpt::metrics::fmt_opt(fit.n_c)));
    s.push_str(&format!("alpha_n={}\n", fit.alpha_n));
    s.push_str(&format!("r2={}\n", fit.r2));
    s
}

fn fit_points(cfg: &RunConfig, points: &Path, out: &Path) -> Result<()> {
    let pts = read_points(points)?;
    let fit = fit_power_law(&pts)?;
    let text = fit_text(cfg, &fit, pts.len());
    print!("{text}");
    write_file(out, &text)
}

fn fit_grid<T: Real>(cfg: &RunConfig, dims: &[usize], out: &Path) -> Result<()> {
    let corpus = desk_corpus(cfg.seed)?;
    let (points, fit) = scaling_grid::<T>(
        &corpus,
        cfg,
        dims,
        &mut |c| pretrain_sources::<T>(&corpus, c, &mut |_| {}).map(|(s, o)| (s, o.final_loss)),
        &mut |p| {
            println!(
                "model_dim={} params={} bp_mape={:.6} bp_mae={:.6}",
                p.model_dim, p.params, p.score.bp_mape, p.score.bp_mae
            )
        },
    )?;
    let text = fit_text(cfg, &fit, points.len());
    print!("{text}");
    write_file(&out.with_extension("grid.csv"), &(csv_header(cfg) + &grid_csv(&points)))?;
    write_file(out, &text)
}

fn export_features<T: Real>(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let store = load_checked::<T>(checkpoint)?.store;
    let ds = load_dataset(data)?;
    if !store.contains(&task_param(&ds.spec.fleet_id)) {
        return Err(Error::MissingPool(task_param(&ds.spec.fleet_id)));
    }
    let windows = make_windows(&ds, cfg.window_len, cfg.eval_stride)?;
    let rows = windows
        .iter()
        .map(|w| {
            let pw = prepare::<T>(w, &ds.spec, &cfg.tokenizer)?;
            Ok(FeatureRow {
                fleet_id: ds.spec.fleet_id.clone(),
                anomalous: w.has_anomaly(),
                features: pooled_features(&store, &pw, &cfg.model)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    println!("windows={} dim={}", rows.len(), cfg.model.model_dim);
    write_file(out, &(csv_header(cfg) + &features_csv(&rows)))
}
