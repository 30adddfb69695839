//! Binary PGM export of 2D frames plus a CSV fallback for 1D data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::format::{read_file, write_atomic};

pub const NORMALIZATION_RULE: &str =
    "pixel = round(255 * (value - min) / (max - min)) per channel over all frames; a channel with max == min maps to 0";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelRange {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub rule: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: Vec<ChannelRange>,
}

impl Normalization {
    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_slice(&read_file(path)?).map_err(|e| CliError::Header(e.to_string()))
    }
}

pub fn pixel(v: f64, r: ChannelRange) -> u8 {
    if !(r.max > r.min) {
        return 0;
    }
    (255.0 * (v - r.min) / (r.max - r.min)).round().clamp(0.0, 255.0) as u8
}

pub fn pgm_bytes(pixels: &[u8], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes `{prefix}_c{channel}_t{frame}.pgm` for every frame and channel, and
/// `{prefix}_normalization.json`. Frames are `[C, H, W]` flattened.
pub fn export_images(frames: &[Vec<f64>], frame_shape: &[usize], dir: &Path, prefix: &str) -> Result<(Normalization, Vec<PathBuf>)> {
    if frame_shape.len() != 3 {
        return Err(CliError::Invalid(format!(
            "image export needs 2D fields, got frame shape {frame_shape:?}; use CSV export for 1D data"
        )));
    }
    let (c, h, w) = (frame_shape[0], frame_shape[1], frame_shape[2]);
    let n = h * w;
    if frames.iter().any(|f| f.len() != c * n) {
        return Err(CliError::Dimension(format!("frames do not match shape {frame_shape:?}")));
    }
    let channels: Vec<ChannelRange> = (0..c)
        .map(|ch| {
            let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
            for f in frames {
                for v in &f[ch * n..(ch + 1) * n] {
                    min = min.min(*v);
                    max = max.max(*v);
                }
            }
            ChannelRange { min, max }
        })
        .collect();
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut written = Vec::new();
    for (t, f) in frames.iter().enumerate() {
        for (ch, r) in channels.iter().enumerate() {
            let px: Vec<u8> = f[ch * n..(ch + 1) * n].iter().map(|v| pixel(*v, *r)).collect();
            let path = dir.join(format!("{prefix}_c{ch}_t{t:04}.pgm"));
            write_atomic(&path, &pgm_bytes(&px, h, w))?;
            written.push(path);
        }
    }
    let norm = Normalization {
        rule: NORMALIZATION_RULE.into(),
        frames: frames.len(),
        height: h,
        width: w,
        channels,
    };
    let side = dir.join(format!("{prefix}_normalization.json"));
    write_atomic(&side, &serde_json::to_vec_pretty(&norm).expect("serializes"))?;
    Ok((norm, written))
}

/// Long-format CSV `step,channel,index,value` for frames of any dimension.
pub fn frames_csv(frames: &[Vec<f64>], channels: usize) -> String {
    let mut s = String::from("step,channel,index,value\n");
    for (t, f) in frames.iter().enumerate() {
        let n = f.len() / channels.max(1);
        for (i, v) in f.iter().enumerate() {
            s.push_str(&format!("{t},{},{},{v}\n", i / n, i % n));
        }
    }
    s
}
