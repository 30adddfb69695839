//! Conversions between in-memory models and checkpoints.

use disco::hypernet::{FieldRegistry, HyperNet, ParamStore};
use disco::operator::{build_layout, OperatorConfig};
use disco::pdegen::{GridSpec, TrajectorySet};
use disco::tensor::Tensor;
use disco::train::{boundary_mode, operator_for, DiscoModel, GepsModel, TrainConfig};

use crate::config::{ModelConfig, ModelKind};
use crate::error::{CliError, Result};
use crate::format::{Checkpoint, Manifest};

pub enum Model {
    Disco(DiscoModel),
    Geps(GepsModel),
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

fn manifest(kind: ModelKind, model: &ModelConfig, train: &TrainConfig, data: &TrajectorySet) -> Manifest {
    Manifest {
        kind,
        model: model.clone(),
        train: train.clone(),
        fields: data.field_names.clone(),
        grid: data.grid.clone(),
        code_trajectories: Vec::new(),
        segments: Vec::new(),
    }
}

pub fn operator_config(model: &ModelConfig, data: &TrajectorySet) -> OperatorConfig {
    operator_for(data, model.depth, model.c_start)
}

pub fn disco_checkpoint(m: &DiscoModel, model: &ModelConfig, train: &TrainConfig, data: &TrajectorySet) -> Result<Checkpoint> {
    let segs = m
        .net
        .store
        .names
        .iter()
        .zip(&m.net.store.tensors)
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), to_f32(t.data())))
        .collect();
    Checkpoint::from_segments(manifest(ModelKind::Disco, model, train, data), segs)
}

pub fn geps_checkpoint(m: &GepsModel, model: &ModelConfig, train: &TrainConfig, data: &TrajectorySet) -> Result<Checkpoint> {
    let p = m.shared.len();
    let k = m.code_dim;
    let codes: Vec<f64> = m.codes.iter().flat_map(|(_, c)| c.iter().copied()).collect();
    let mut man = manifest(ModelKind::Geps, model, train, data);
    man.code_trajectories = m.codes.iter().map(|(t, _)| *t).collect();
    Checkpoint::from_segments(
        man,
        vec![
            ("shared".into(), vec![p], to_f32(&m.shared)),
            ("w".into(), vec![p, k], to_f32(&m.w)),
            ("codes".into(), vec![m.codes.len(), k], to_f32(&codes)),
        ],
    )
}

/// Dataset stand-in carrying only the metadata models are built from.
fn shell(grid: &GridSpec, fields: &[String]) -> TrajectorySet {
    TrajectorySet {
        grid: grid.clone(),
        field_names: fields.to_vec(),
        coefficients: Vec::new(),
        n_frames: 0,
        dt: 1.0,
        generator: String::new(),
        seed: 0,
        data: Vec::new(),
    }
}

fn require<'a>(ck: &'a Checkpoint, name: &str) -> Result<(&'a [usize], &'a [f32])> {
    let (s, v) = ck
        .segment(name)
        .ok_or_else(|| CliError::Payload(format!("checkpoint has no segment {name:?}")))?;
    Ok((&s.shape, v))
}

pub fn load(ck: &Checkpoint) -> Result<Model> {
    let man = &ck.manifest;
    let data = shell(&man.grid, &man.fields);
    let op = operator_config(&man.model, &data);
    match man.kind {
        ModelKind::Disco => {
            let layout = build_layout(&op)?;
            let registry = FieldRegistry::new(&man.fields)?;
            let net = HyperNet::new(
                man.model.hyper.clone(),
                registry,
                &layout,
                &man.grid.points,
                man.grid.is_periodic(),
                man.train.seed,
            )?;
            let mut store = ParamStore::default();
            for s in &man.segments {
                let (shape, v) = require(ck, &s.name)?;
                let t = Tensor::new(shape.to_vec(), to_f64(v)).map_err(|e| CliError::Payload(e.to_string()))?;
                store.push(s.name.clone(), t);
            }
            let net = net.with_weights(store).map_err(|e| CliError::Payload(e.to_string()))?;
            Ok(Model::Disco(DiscoModel {
                op,
                layout,
                net,
                integrator: man.model.integrator,
                fields: man.fields.clone(),
                frame_shape: data.frame_shape(),
            }))
        }
        ModelKind::Geps => {
            let layout = build_layout(&op)?;
            let (ss, shared) = require(ck, "shared")?;
            let (ws, w) = require(ck, "w")?;
            let (cs, codes) = require(ck, "codes")?;
            let k = man.model.geps.code_dim;
            if ss != [layout.total] || ws != [layout.total, k] || cs != [man.code_trajectories.len(), k] {
                return Err(CliError::Payload(format!(
                    "segment shapes {ss:?} {ws:?} {cs:?} do not fit {} parameters with codes of size {k}",
                    layout.total
                )));
            }
            Ok(Model::Geps(GepsModel {
                op,
                layout,
                integrator: man.model.integrator,
                frame_shape: data.frame_shape(),
                context_len: man.model.hyper.context_len,
                code_dim: k,
                shared: to_f64(shared),
                w: to_f64(w),
                codes: man
                    .code_trajectories
                    .iter()
                    .zip(codes.chunks(k.max(1)))
                    .map(|(t, c)| (*t, to_f64(c)))
                    .collect(),
            }))
        }
    }
}

/// Checks that a checkpoint can run on a dataset.
pub fn check_compatible(man: &Manifest, data: &TrajectorySet) -> Result<()> {
    if man.fields != data.field_names || man.grid.points != data.grid.points || boundary_mode(data) != boundary_mode(&shell(&man.grid, &man.fields)) {
        return Err(CliError::Dimension(format!(
            "checkpoint expects fields {:?} on grid {:?}, dataset has {:?} on {:?}",
            man.fields, man.grid.points, data.field_names, data.grid.points
        )));
    }
    Ok(())
}
