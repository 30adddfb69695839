//! Binary containers: `DSC1` datasets and `DSCK` checkpoints.
//!
//! Layout of both: magic (4 bytes), version (u32 LE), header length (u32 LE),
//! UTF-8 JSON header, then contiguous f32 LE payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use disco::pdegen::{Coefficients, GridSpec, TrajectorySet};
use disco::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, ModelKind};
use crate::error::{CliError, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"DSC1";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Dataset,
    Checkpoint,
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Invalid(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(CliError::io(path, e));
    }
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn magic_name(m: &[u8]) -> String {
    m.iter().map(|b| if b.is_ascii_graphic() { *b as char } else { '?' }).collect()
}

pub fn sniff(bytes: &[u8]) -> Result<FileKind> {
    match bytes.get(..4) {
        Some(m) if m == DATASET_MAGIC => Ok(FileKind::Dataset),
        Some(m) if m == CHECKPOINT_MAGIC => Ok(FileKind::Checkpoint),
        m => Err(CliError::Magic {
            expected: "DSC1 or DSCK".into(),
            found: magic_name(m.unwrap_or(bytes)),
        }),
    }
}

fn encode<H: Serialize>(magic: [u8; 4], header: &H, payload: &[f32]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * payload.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode<H: DeserializeOwned>(magic: [u8; 4], bytes: &[u8]) -> Result<(H, Vec<f32>)> {
    if bytes.len() < 4 || bytes[..4] != magic {
        return Err(CliError::Magic {
            expected: magic_name(&magic),
            found: magic_name(&bytes[..bytes.len().min(4)]),
        });
    }
    if bytes.len() < 12 {
        return Err(CliError::Header("file ends inside the fixed header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CliError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(CliError::Header(format!("header length {hlen} exceeds file size")));
    }
    let header: H = serde_json::from_slice(&body[..hlen]).map_err(|e| CliError::Header(e.to_string()))?;
    let raw = &body[hlen..];
    if raw.len() % 4 != 0 {
        return Err(CliError::Payload(format!("{} payload bytes is not a whole number of floats", raw.len())));
    }
    let payload = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((header, payload))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub fields: Vec<String>,
    pub grid: GridSpec,
    pub dt: f64,
    pub trajectories: usize,
    pub frames: usize,
    pub coefficients: Vec<Coefficients>,
    pub generator: String,
    pub seed: u64,
}

impl DatasetHeader {
    pub fn of(set: &TrajectorySet) -> Self {
        DatasetHeader {
            fields: set.field_names.clone(),
            grid: set.grid.clone(),
            dt: set.dt,
            trajectories: set.n_traj(),
            frames: set.n_frames,
            coefficients: set.coefficients.clone(),
            generator: set.generator.clone(),
            seed: set.seed,
        }
    }

    pub fn payload_len(&self) -> usize {
        self.trajectories * self.frames * self.fields.len() * self.grid.points.iter().product::<usize>()
    }
}

pub fn encode_dataset(set: &TrajectorySet) -> Vec<u8> {
    encode(DATASET_MAGIC, &DatasetHeader::of(set), &set.data)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<TrajectorySet> {
    let (h, data): (DatasetHeader, Vec<f32>) = decode(DATASET_MAGIC, bytes)?;
    h.grid.validate().map_err(|e| CliError::Header(e.to_string()))?;
    if h.coefficients.len() != h.trajectories || h.fields.is_empty() {
        return Err(CliError::Header(format!(
            "{} coefficient sets and {} fields for {} trajectories",
            h.coefficients.len(),
            h.fields.len(),
            h.trajectories
        )));
    }
    if data.len() != h.payload_len() {
        return Err(CliError::Payload(format!("{} floats, header implies {}", data.len(), h.payload_len())));
    }
    Ok(TrajectorySet {
        grid: h.grid,
        field_names: h.fields,
        coefficients: h.coefficients,
        n_frames: h.frames,
        dt: h.dt,
        generator: h.generator,
        seed: h.seed,
        data,
    })
}

pub fn write_dataset(path: &Path, set: &TrajectorySet) -> Result<()> {
    write_atomic(path, &encode_dataset(set))
}

pub fn read_dataset(path: &Path) -> Result<TrajectorySet> {
    decode_dataset(&read_file(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in floats from the start of the payload.
    pub offset: usize,
}

impl SegmentEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fields: Vec<String>,
    pub grid: GridSpec,
    /// Trajectory ids owning the stored codes (shared-plus-code model only).
    #[serde(default)]
    pub code_trajectories: Vec<usize>,
    pub segments: Vec<SegmentEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub payload: Vec<f32>,
}

impl Checkpoint {
    /// Builds the segment table from named tensors laid out back to back.
    pub fn from_segments(mut manifest: Manifest, segments: Vec<(String, Vec<usize>, Vec<f32>)>) -> Result<Self> {
        let mut payload = Vec::new();
        manifest.segments.clear();
        for (name, shape, data) in segments {
            let entry = SegmentEntry {
                name,
                shape,
                offset: payload.len(),
            };
            if entry.len() != data.len() {
                return Err(CliError::Dimension(format!(
                    "segment {} holds {} values for shape {:?}",
                    entry.name,
                    data.len(),
                    entry.shape
                )));
            }
            payload.extend(data);
            manifest.segments.push(entry);
        }
        Ok(Checkpoint { manifest, payload })
    }

    pub fn segment(&self, name: &str) -> Option<(&SegmentEntry, &[f32])> {
        let s = self.manifest.segments.iter().find(|s| s.name == name)?;
        Some((s, &self.payload[s.offset..s.offset + s.len()]))
    }

    /// Segments must tile the payload in order without gaps or overlap.
    pub fn check(&self) -> Result<()> {
        let mut off = 0;
        for s in &self.manifest.segments {
            if s.offset != off {
                return Err(CliError::Payload(format!("segment {} starts at {}, expected {off}", s.name, s.offset)));
            }
            off += s.len();
        }
        if off != self.payload.len() {
            return Err(CliError::Payload(format!(
                "segment table covers {off} floats, payload holds {}",
                self.payload.len()
            )));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    encode(CHECKPOINT_MAGIC, &ck.manifest, &ck.payload)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, payload) = decode(CHECKPOINT_MAGIC, bytes)?;
    let ck = Checkpoint { manifest, payload };
    ck.check()?;
    Ok(ck)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}
