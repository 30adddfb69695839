//! Subcommand bodies. Each writes its outputs atomically and echoes the resolved
//! configuration to `<output>.resolved.json`.

use std::path::{Path, PathBuf};

use disco::eval::{
    coefficient_labels, collect_cloud, evaluate, param_space_analysis, rollout_window, AdaptedGeps, HorizonReport, Identity,
    Predictor,
};
use disco::parallel::Execution;
use disco::pdegen::{generate, TrajectorySet};
use disco::tensor::Tensor;
use disco::train::{
    context_tensor, geps_train, metrics_csv, select_adapt_lr, split_trajectories, train_disco, windows, Split, Window,
};
use serde::Serialize;
use serde_json::json;

use crate::config::{EvalConfig, ModelKind, RunConfig, SplitName};
use crate::error::{CliError, Result};
use crate::format::{
    read_checkpoint, read_dataset, read_file, sniff, write_atomic, write_checkpoint, write_dataset, DatasetHeader, FileKind,
    Manifest, CHECKPOINT_MAGIC, DATASET_MAGIC,
};
use crate::images::{export_images, frames_csv};
use crate::model::{check_compatible, disco_checkpoint, geps_checkpoint, load, operator_config, Model};

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".resolved.json");
    PathBuf::from(s)
}

fn write_sidecar<T: Serialize>(out: &Path, value: &T) -> Result<()> {
    write_atomic(&sidecar_path(out), &serde_json::to_vec_pretty(value).expect("config serializes"))
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::Config {
        path: ".".into(),
        message: "config is not UTF-8".into(),
    })?;
    RunConfig::parse(&text)
}

pub fn generate_dataset(cfg: &RunConfig) -> Result<TrajectorySet> {
    Ok(generate(&cfg.data.family(), &cfg.data.grid(), cfg.data.trajectories, cfg.seed)?)
}

pub fn cmd_gen(config: &Path, out: &Path) -> Result<DatasetHeader> {
    let cfg = read_config(config)?;
    let set = generate_dataset(&cfg)?;
    write_dataset(out, &set)?;
    write_sidecar(out, &cfg.resolved())?;
    Ok(DatasetHeader::of(&set))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_val_loss: Option<f64>,
}

pub fn cmd_train(config: &Path, data: &Path, out: &Path) -> Result<TrainSummary> {
    let cfg = read_config(config)?;
    let set = read_dataset(data)?;
    let exec = Execution::from_env();
    let m = &cfg.model;
    let op = operator_config(m, &set);
    let t = m.hyper.context_len;
    if set.n_frames < t + 1 {
        return Err(CliError::Dimension(format!(
            "dataset has {} frames, context length {t} needs at least {}",
            set.n_frames,
            t + 1
        )));
    }
    let (ck, metrics) = match m.kind {
        ModelKind::Disco => {
            let o = train_disco(&set, op, m.hyper.clone(), m.integrator, &cfg.train, exec)?;
            (disco_checkpoint(&o.model, m, &cfg.train, &set)?, o.metrics)
        }
        ModelKind::Geps => {
            let o = geps_train(&set, op, m.integrator, t, &m.geps, &cfg.train, exec)?;
            (geps_checkpoint(&o.model, m, &cfg.train, &set)?, o.metrics)
        }
    };
    write_checkpoint(out, &ck)?;
    let mut csv = out.as_os_str().to_owned();
    csv.push(".metrics.csv");
    write_atomic(Path::new(&csv), metrics_csv(&metrics).as_bytes())?;
    write_sidecar(out, &cfg.resolved())?;
    Ok(TrainSummary {
        epochs: metrics.len(),
        final_val_loss: metrics.last().map(|r| r.val_loss),
    })
}

fn split_of(man: &Manifest, set: &TrajectorySet) -> Split {
    split_trajectories(set.n_traj(), man.train.split, man.train.seed)
}

fn pick(split: &Split, name: SplitName, n: usize) -> Vec<usize> {
    match name {
        SplitName::Train => split.train.clone(),
        SplitName::Val => split.val.clone(),
        SplitName::Test => split.test.clone(),
        SplitName::Held => split.val.iter().chain(&split.test).copied().collect(),
        SplitName::All => (0..n).collect(),
    }
}

fn limit(mut ws: Vec<Window>, max: Option<usize>) -> Vec<Window> {
    if let Some(m) = max {
        ws.truncate(m);
    }
    ws
}

/// Loaded model wrapped as a predictor, with the adaptation rate chosen for
/// shared-plus-code models.
struct Loaded {
    model: Model,
    adapt_lr: Option<f64>,
}

impl Loaded {
    fn predictor(&self, eval: &EvalConfig, man: &Manifest) -> Box<dyn Predictor + '_> {
        match &self.model {
            Model::Disco(m) => Box::new(m.clone()),
            Model::Geps(g) => Box::new(AdaptedGeps {
                model: g,
                lr: eval.adapt_lr.or(self.adapt_lr).unwrap_or(man.model.geps.adapt_lrs[0]),
                steps: man.model.geps.adapt_steps,
                eps: man.train.loss_eps,
            }),
        }
    }
}

fn open(checkpoint: &Path, data: &Path, eval: &EvalConfig) -> Result<(Manifest, TrajectorySet, Loaded)> {
    let ck = read_checkpoint(checkpoint)?;
    let set = read_dataset(data)?;
    check_compatible(&ck.manifest, &set)?;
    let model = load(&ck)?;
    let mut adapt_lr = None;
    if let (Model::Geps(g), None) = (&model, eval.adapt_lr) {
        let split = split_of(&ck.manifest, &set);
        let val = limit(windows(&split.val, set.n_frames, g.context_len), ck.manifest.train.max_val_windows);
        if !val.is_empty() {
            let (lr, _) = select_adapt_lr(g, &set, &val, &ck.manifest.model.geps, ck.manifest.train.loss_eps, Execution::from_env())?;
            adapt_lr = Some(lr);
        }
    }
    Ok((ck.manifest, set, Loaded { model, adapt_lr }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub model: HorizonReport,
    pub identity: HorizonReport,
}

pub fn report_csv(rows: &[(&str, &HorizonReport)]) -> String {
    let mut s = String::from("predictor,horizon,nrmse,count\n");
    for (name, r) in rows {
        for ((h, v), c) in r.horizons.iter().zip(&r.nrmse).zip(&r.counts) {
            s.push_str(&format!("{name},{h},{v},{c}\n"));
        }
    }
    s
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path, eval: &EvalConfig) -> Result<EvalSummary> {
    let (man, set, loaded) = open(checkpoint, data, eval)?;
    let pred = loaded.predictor(eval, &man);
    let split = split_of(&man, &set);
    let trajs = pick(&split, eval.split, set.n_traj());
    let ws = limit(windows(&trajs, set.n_frames, pred.context_len()), eval.max_windows);
    if ws.is_empty() {
        return Err(CliError::Dimension("no evaluation windows in the selected split".into()));
    }
    let exec = Execution::from_env();
    let model = evaluate(pred.as_ref(), &set, &ws, &eval.horizons, eval.theta_mode, exec)?;
    let id = Identity {
        context_len: pred.context_len(),
        channels: set.channels(),
    };
    let identity = evaluate(&id, &set, &ws, &eval.horizons, eval.theta_mode, exec)?;
    write_atomic(out, report_csv(&[("model", &model), ("identity", &identity)]).as_bytes())?;
    write_sidecar(
        out,
        &json!({
            "checkpoint": checkpoint,
            "data": data,
            "model": man.model,
            "train": man.train,
            "eval": eval,
            "adapt_lr": loaded.adapt_lr,
            "windows": ws.len(),
        }),
    )?;
    Ok(EvalSummary { model, identity })
}

#[derive(Debug, Clone, Default)]
pub struct RolloutOptions {
    pub traj: usize,
    pub start: usize,
    pub images: Option<PathBuf>,
    pub frames_csv: Option<PathBuf>,
}

pub fn cmd_rollout(
    checkpoint: &Path,
    data: &Path,
    horizons: &[usize],
    out: &Path,
    eval: &EvalConfig,
    opts: &RolloutOptions,
) -> Result<disco::eval::RolloutResult> {
    let (man, set, loaded) = open(checkpoint, data, eval)?;
    let pred = loaded.predictor(eval, &man);
    let t = pred.context_len();
    let max_h = horizons.iter().copied().max().unwrap_or(1);
    if opts.traj >= set.n_traj() || opts.start + t >= set.n_frames {
        return Err(CliError::Dimension(format!(
            "trajectory {} start {} leaves no target frame ({} trajectories, {} frames)",
            opts.traj,
            opts.start,
            set.n_traj(),
            set.n_frames
        )));
    }
    let steps = max_h.min(set.n_frames - opts.start - t);
    let w = Window {
        traj: opts.traj,
        start: opts.start,
    };
    let r = rollout_window(pred.as_ref(), &set, w, steps, horizons, eval.theta_mode)?;
    let mut csv = String::from("step,nrmse,budget_exhausted\n");
    for (i, (v, b)) in r.step_nrmse.iter().zip(&r.budget_exhausted).enumerate() {
        csv.push_str(&format!("{},{v},{}\n", i + 1, *b as u8));
    }
    write_atomic(out, csv.as_bytes())?;
    if let Some(dir) = &opts.images {
        export_images(&r.frames, &set.frame_shape(), dir, "pred")?;
        let truth: Vec<Vec<f64>> = (0..r.frames.len())
            .map(|k| set.frame_slice(w.traj, w.start + t + k).iter().map(|x| *x as f64).collect())
            .collect();
        export_images(&truth, &set.frame_shape(), dir, "true")?;
    }
    if let Some(p) = &opts.frames_csv {
        write_atomic(p, frames_csv(&r.frames, set.channels()).as_bytes())?;
    }
    write_sidecar(
        out,
        &json!({
            "checkpoint": checkpoint,
            "data": data,
            "model": man.model,
            "eval": eval,
            "horizons": horizons,
            "traj": opts.traj,
            "start": opts.start,
            "steps": steps,
            "truncated": r.truncated,
            "horizon_nrmse": r.horizons.iter().zip(&r.nrmse).collect::<Vec<_>>(),
        }),
    )?;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamsSummary {
    pub contexts: usize,
    pub purity: f64,
    pub null_purity: f64,
}

pub fn cmd_params(checkpoint: &Path, data: &Path, out: &Path, eval: &EvalConfig) -> Result<ParamsSummary> {
    let (man, set, loaded) = open(checkpoint, data, eval)?;
    let pred = loaded.predictor(eval, &man);
    let layout = match &loaded.model {
        Model::Disco(m) => &m.layout,
        Model::Geps(g) => &g.layout,
    };
    let split = split_of(&man, &set);
    let trajs = pick(&split, eval.split, set.n_traj());
    let ws = limit(windows(&trajs, set.n_frames, pred.context_len()), eval.max_windows);
    let labels = coefficient_labels(&set);
    let contexts: Vec<(Tensor, usize)> = ws
        .iter()
        .map(|w| (context_tensor(&set, w.traj, w.start, pred.context_len()), labels[w.traj]))
        .collect();
    let cloud = collect_cloud(pred.as_ref(), layout, &contexts, Execution::from_env())?;
    let a = param_space_analysis(&cloud, eval.cluster_seed)?;
    write_atomic(out, a.projection_csv(&cloud.labels).as_bytes())?;
    write_sidecar(
        out,
        &json!({
            "checkpoint": checkpoint,
            "data": data,
            "model": man.model,
            "eval": eval,
            "contexts": cloud.rows.len(),
            "width": cloud.width(),
            "purity": a.purity,
            "null_purity": a.null_purity,
            "explained_variance": a.explained,
        }),
    )?;
    Ok(ParamsSummary {
        contexts: cloud.rows.len(),
        purity: a.purity,
        null_purity: a.null_purity,
    })
}

/// Human- and machine-readable `key=value` summary of a container.
pub fn cmd_info(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    match sniff(&bytes)? {
        FileKind::Dataset => {
            let set = crate::format::decode_dataset(&bytes)?;
            let h = DatasetHeader::of(&set);
            Ok(format!(
                "kind=dataset magic={} trajectories={} frames={} fields={} grid={} dt={} generator={} seed={}",
                String::from_utf8_lossy(&DATASET_MAGIC),
                h.trajectories,
                h.frames,
                h.fields.join(","),
                h.grid.points.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("x"),
                h.dt,
                h.generator,
                h.seed
            ))
        }
        FileKind::Checkpoint => {
            let ck = crate::format::decode_checkpoint(&bytes)?;
            let m = &ck.manifest;
            Ok(format!(
                "kind=checkpoint magic={} model={} fields={} grid={} segments={} values={}",
                String::from_utf8_lossy(&CHECKPOINT_MAGIC),
                serde_json::to_value(m.kind).expect("serializes").as_str().unwrap_or("?"),
                m.fields.join(","),
                m.grid.points.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("x"),
                m.segments.len(),
                ck.payload.len()
            ))
        }
    }
}
