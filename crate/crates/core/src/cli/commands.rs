use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use super::{
    display, io_err, CliError, EvalArgs, EvalMode, GenArgs, GenSignal, MethodArg, NoiseArg, RunManifest, StageArg, Switch,
    TrainArgs, TrainSignal, MANIFEST_NAME,
};
use crate::baselines::PnpMode;
use crate::evaluation::{
    ablation_keypoints, emit_report, pose_eval, pr_curve, signal_mode_of, uniform_thresholds, EvalResults, Method,
    DEFAULT_NUM_THRESHOLDS,
};
use crate::matcher::checkpoint;
use crate::matcher::{train_with_progress, MatcherConfig, MatcherError, SignalMode, Stage, TrainConfig, TrainSample};
use crate::scenegen::io::{pair_file_name, read_dataset, read_manifest, read_pair, write_manifest, write_pair, ManifestRecord, MANIFEST_FILE};
use crate::scenegen::{generate_pair, pair_seed, ClassConfig, NoiseConfig, PairConfig, SignalNoiseConfig};

const GEN_CHUNK: usize = 64;
const PROGRESS_EVERY: usize = 500;

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Training log written next to a checkpoint.
pub fn train_log_path(ckpt: &Path) -> PathBuf {
    with_suffix(ckpt, ".log.csv")
}

/// Run manifest written next to a checkpoint.
pub fn train_manifest_path(ckpt: &Path) -> PathBuf {
    with_suffix(ckpt, ".manifest.json")
}

pub fn pair_config(args: &GenArgs) -> PairConfig {
    let (noise, signal_noise) = match args.noise {
        NoiseArg::None => (NoiseConfig::zero(), None),
        NoiseArg::Default => (NoiseConfig::default(), Some(SignalNoiseConfig::default())),
    };
    PairConfig {
        class: ClassConfig { family: args.class.into(), num_points: args.points, ..ClassConfig::default() },
        baseline_deg: (args.baseline.0, args.baseline.1),
        noise,
        signal_noise,
        ..PairConfig::default()
    }
}

pub fn cmd_gen(args: &GenArgs, recorded: &[String]) -> Result<(), CliError> {
    if args.pairs == 0 {
        return Err(CliError::InvalidFlags("--pairs must be positive".into()));
    }
    let cfg = pair_config(args);
    cfg.class.validate()?;
    let keep = match args.signal {
        GenSignal::Nocs => SignalMode::Nocs,
        GenSignal::Mde => SignalMode::Mde,
    };
    std::fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let mut records = Vec::with_capacity(args.pairs);
    for start in (0..args.pairs).step_by(GEN_CHUNK) {
        let end = (start + GEN_CHUNK).min(args.pairs);
        let pairs = (start..end)
            .into_par_iter()
            .map(|k| generate_pair(&cfg, pair_seed(args.seed, k)).map(|p| p.retain_signal(keep)))
            .collect::<Result<Vec<_>, _>>()?;
        for (k, p) in (start..end).zip(&pairs) {
            let name = pair_file_name(k);
            write_pair(&args.out.join(&name), p)?;
            records.push(ManifestRecord::new(name, p));
        }
    }
    write_manifest(&args.out.join(MANIFEST_FILE), &records)?;
    let mut manifest = RunManifest::new("gen", args.seed, recorded, json!({ "flags": args, "pair": cfg }));
    manifest.outputs = vec![display(&args.out)];
    manifest.write(&args.out.join(MANIFEST_NAME))
}

fn signal_mode(s: TrainSignal) -> SignalMode {
    match s {
        TrainSignal::Nocs => SignalMode::Nocs,
        TrainSignal::Mde => SignalMode::Mde,
        TrainSignal::None => SignalMode::None,
    }
}

/// Reads a split one pair at a time, keeping only the encoder inputs.
pub fn load_train_samples(dir: &Path, mode: SignalMode) -> Result<Vec<TrainSample>, CliError> {
    read_manifest(&dir.join(MANIFEST_FILE))?
        .iter()
        .map(|r| {
            let pair = read_pair(&dir.join(&r.file))?;
            if !pair.has_signal(mode) {
                return Err(CliError::InvalidFlags(format!("{} carries no {mode:?} map", r.file)));
            }
            Ok(pair.train_sample(mode))
        })
        .collect()
}

pub fn train_config(args: &TrainArgs) -> TrainConfig {
    TrainConfig {
        stage: match args.stage {
            StageArg::Pretrain2d => Stage::Pretrain2d,
            StageArg::Finetune3d => Stage::Finetune3d,
        },
        signal: signal_mode(args.signal),
        positional_encoding: args.pe == Switch::On,
        learning_rate: args.lr,
        decay_start: args.decay_start,
        batch_size: args.batch,
        iterations: args.iters,
        seed: args.seed,
        matcher: MatcherConfig { sinkhorn_iterations: args.sinkhorn_iters, ..MatcherConfig::default() },
        ..TrainConfig::default()
    }
}

pub fn cmd_train(args: &TrainArgs, recorded: &[String]) -> Result<(), CliError> {
    let cfg = train_config(args);
    let init = match (cfg.stage, &args.init) {
        (Stage::Pretrain2d, Some(_)) => return Err(CliError::InvalidFlags("--init only applies to finetune3d".into())),
        (Stage::Pretrain2d, None) if cfg.signal != SignalMode::None => {
            return Err(CliError::InvalidFlags("pretrain2d trains without a 3D signal; use --signal none".into()))
        }
        (Stage::Pretrain2d, None) => None,
        (Stage::Finetune3d, None) => return Err(MatcherError::MissingCheckpoint.into()),
        (Stage::Finetune3d, Some(path)) => Some(checkpoint::load(path)?),
    };
    if let Some(w) = &init {
        if w.encoder.mlp3d.is_some() && signal_mode_of(w) != cfg.signal {
            return Err(CliError::InvalidFlags(format!(
                "--init already reads {:?}, cannot finetune with --signal {:?}",
                signal_mode_of(w),
                cfg.signal
            )));
        }
    }
    cfg.validate()?;
    let samples = load_train_samples(&args.data, cfg.signal)?;
    let outcome = train_with_progress(&samples, &cfg, init, |e| {
        if (e.iteration + 1) % PROGRESS_EVERY == 0 {
            eprintln!("iteration {} loss {:.4}", e.iteration + 1, e.loss);
        }
    })?;
    checkpoint::save(&args.out, &outcome.weights).map_err(io_err(&args.out))?;
    let log = train_log_path(&args.out);
    checkpoint::write_training_log(&log, &outcome.log).map_err(|e| CliError::Io(format!("{}: {e}", log.display())))?;
    let mut manifest = RunManifest::new("train", args.seed, recorded, json!({ "flags": args, "train": cfg }));
    manifest.inputs = std::iter::once(display(&args.data)).chain(args.init.as_deref().map(display)).collect();
    manifest.outputs = vec![display(&args.out), display(&log)];
    manifest.write(&train_manifest_path(&args.out))
}

fn learned(args: &EvalArgs, path: &Path) -> Result<Method, CliError> {
    let weights = checkpoint::load(path)?;
    let has_3d = weights.encoder.mlp3d.is_some();
    let name = match (args.method, has_3d) {
        (MethodArg::Sg2d, true) => {
            return Err(CliError::InvalidFlags(format!("{} has a 3D branch; use --method lfm3d", path.display())))
        }
        (MethodArg::Lfm3d, false) => {
            return Err(CliError::InvalidFlags(format!("{} has no 3D branch; use --method sg2d", path.display())))
        }
        (_, true) => "lfm3d",
        (_, false) => "sg2d",
    };
    Ok(Method::learned(name, weights))
}

pub fn eval_method(args: &EvalArgs) -> Result<Method, CliError> {
    let need_ckpt = || args.ckpt.as_deref().ok_or_else(|| CliError::InvalidFlags("learned methods need --ckpt".into()));
    match args.method {
        MethodArg::Lfm3d | MethodArg::Sg2d => learned(args, need_ckpt()?),
        MethodArg::Mnn => Ok(Method::Mnn),
        MethodArg::Ratio if args.ratio > 0.0 && args.ratio < 1.0 => Ok(Method::Ratio(args.ratio)),
        MethodArg::Ratio => Err(CliError::InvalidFlags(format!("--ratio {} not in (0, 1)", args.ratio))),
        MethodArg::NocsFilter => {
            let d = args.d.ok_or_else(|| CliError::InvalidFlags("nocs-filter needs --d".into()))?;
            if !(d > 0.0) {
                return Err(CliError::InvalidFlags(format!("--d {d} must be positive")));
            }
            let base = match &args.ckpt {
                Some(path) => learned(args, path)?,
                None => Method::Mnn,
            };
            Ok(Method::NocsFiltered { base: Box::new(base), d })
        }
        MethodArg::PnpSparse => Ok(Method::Pnp(PnpMode::Sparse)),
        MethodArg::PnpDense => Ok(Method::Pnp(PnpMode::Dense)),
    }
}

pub fn cmd_eval(args: &EvalArgs, recorded: &[String]) -> Result<(), CliError> {
    let method = eval_method(args)?;
    let is_pnp = matches!(method, Method::Pnp(_));
    if args.mode == EvalMode::Pr && is_pnp {
        return Err(CliError::InvalidFlags("pnp methods estimate poses, not matches; use --mode pose".into()));
    }
    if args.mode == EvalMode::AblateKp && args.counts.is_empty() {
        return Err(CliError::InvalidFlags("--counts is empty".into()));
    }
    let data = read_dataset(&args.data)?;
    let needs = match &method {
        Method::Learned { weights, .. } => signal_mode_of(weights),
        Method::NocsFiltered { .. } | Method::Pnp(_) => SignalMode::Nocs,
        _ => SignalMode::None,
    };
    if let Some(p) = data.iter().find(|p| !p.has_signal(needs)) {
        return Err(CliError::InvalidFlags(format!("pair {} carries no {needs:?} map", p.id)));
    }
    let mut results = EvalResults::default();
    match args.mode {
        EvalMode::Pr => {
            let curve = pr_curve(&method, &data, &uniform_thresholds(DEFAULT_NUM_THRESHOLDS))?;
            results.curves.push((method.name(), curve));
        }
        EvalMode::Pose => results.poses.push(pose_eval(&method, &data, args.seed)?),
        EvalMode::AblateKp => {
            results.poses = ablation_keypoints(&method, &data, &args.counts, args.seed)?.into_iter().map(|(_, r)| r).collect();
        }
    }
    let written = emit_report(&results, &args.out)?;
    let mut manifest = RunManifest::new("eval", args.seed, recorded, json!({ "flags": args }));
    manifest.inputs = std::iter::once(display(&args.data)).chain(args.ckpt.as_deref().map(display)).collect();
    manifest.outputs = written.iter().map(|p| display(p)).collect();
    manifest.write(&args.out.join(MANIFEST_NAME))
}
