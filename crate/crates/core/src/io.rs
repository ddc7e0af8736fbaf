//! On-disk motion formats.
//!
//! The textual form is a JSON document carrying the layout and optionally the
//! skeleton. The binary form is a little-endian header (`LKMO`, version,
//! frame count, frame dimension, fps as f32) followed by row-major f32
//! frame data; it carries no layout, so readers supply one.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{Motion, PoseLayout};
use crate::skeleton::Skeleton;

pub const MOTION_MAGIC: &[u8; 4] = b"LKMO";
pub const FORMAT_VERSION: u32 = 1;
const BINARY_HEADER_LEN: usize = 20;

#[derive(Serialize, Deserialize)]
struct MotionDoc {
    version: u32,
    fps: u32,
    layout: PoseLayout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    skeleton: Option<Skeleton>,
    frames: Vec<Vec<f64>>,
}

/// A motion as read from disk, with the skeleton when the file carries one.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionFile {
    pub motion: Motion,
    pub skeleton: Option<Skeleton>,
}

pub fn motion_to_json(motion: &Motion, skeleton: Option<&Skeleton>) -> serde_json::Value {
    let doc = MotionDoc {
        version: FORMAT_VERSION,
        fps: motion.fps(),
        layout: *motion.layout(),
        skeleton: skeleton.cloned(),
        frames: motion.frames().rows().into_iter().map(|r| r.to_vec()).collect(),
    };
    serde_json::to_value(doc).expect("motion documents always serialize")
}

pub fn motion_from_json(value: serde_json::Value) -> Result<MotionFile> {
    let doc: MotionDoc =
        serde_json::from_value(value).map_err(|e| Error::json("motion document", e))?;
    if doc.version != FORMAT_VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported motion version {}",
            doc.version
        )));
    }
    if let Some(skeleton) = &doc.skeleton {
        doc.layout.check_skeleton(skeleton)?;
    }
    let motion = Motion::from_rows(doc.layout, doc.fps, &doc.frames)?;
    Ok(MotionFile {
        motion,
        skeleton: doc.skeleton,
    })
}

pub fn encode_binary(motion: &Motion) -> Vec<u8> {
    let (f, d) = motion.frames().dim();
    let mut out = Vec::with_capacity(BINARY_HEADER_LEN + 4 * f * d);
    out.extend_from_slice(MOTION_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(motion.fps() as f32).to_le_bytes());
    for v in motion.frames().iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn read_f32(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_binary(bytes: &[u8], layout: PoseLayout) -> Result<Motion> {
    if bytes.len() < BINARY_HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MOTION_MAGIC {
        return Err(Error::MalformedHeader("bad magic, expected LKMO".into()));
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported motion version {version}"
        )));
    }
    let frames = read_u32(bytes, 8) as usize;
    let dim = read_u32(bytes, 12) as usize;
    let fps = read_f32(bytes, 16);
    if !(fps.is_finite() && fps >= 1.0 && fps.fract() == 0.0) {
        return Err(Error::MalformedHeader(format!(
            "fps must be a positive integer, found {fps}"
        )));
    }
    if dim != layout.dim() {
        return Err(Error::DimensionMismatch {
            frame: 0,
            expected: layout.dim(),
            actual: dim,
        });
    }
    let expected_len = BINARY_HEADER_LEN + 4 * frames * dim;
    if bytes.len() != expected_len {
        return Err(Error::MalformedHeader(format!(
            "header declares {frames}x{dim} values ({expected_len} bytes) but file has {} bytes",
            bytes.len()
        )));
    }
    let data: Vec<f64> = (0..frames * dim)
        .map(|i| read_f32(bytes, BINARY_HEADER_LEN + 4 * i) as f64)
        .collect();
    let frames = Array2::from_shape_vec((frames, dim), data)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    Motion::new(layout, fps as u32, frames)
}

fn is_binary_path(path: &Path) -> bool {
    !matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("json")
    )
}

/// Writes a motion; `.json` paths get the textual form, anything else the
/// binary form (which drops the skeleton).
pub fn write_motion(motion: &Motion, skeleton: Option<&Skeleton>, path: &Path) -> Result<()> {
    let bytes = if is_binary_path(path) {
        encode_binary(motion)
    } else {
        serde_json::to_vec(&motion_to_json(motion, skeleton))
            .map_err(|e| Error::json(path.display().to_string(), e))?
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads either form, detected by the leading magic bytes. Binary files need
/// `layout`; for JSON files it is checked against the embedded layout when
/// given.
pub fn read_motion(path: &Path, layout: Option<&PoseLayout>) -> Result<MotionFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MOTION_MAGIC) {
        let layout = layout.ok_or_else(|| {
            Error::MalformedHeader(format!(
                "{}: binary motion files need an explicit layout",
                path.display()
            ))
        })?;
        return Ok(MotionFile {
            motion: decode_binary(&bytes, *layout)?,
            skeleton: None,
        });
    }
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))?;
    let file = motion_from_json(value)?;
    if let Some(layout) = layout {
        if file.motion.layout() != layout {
            return Err(Error::InvalidLayout(format!(
                "{}: file layout {:?} does not match expected {:?}",
                path.display(),
                file.motion.layout(),
                layout
            )));
        }
    }
    Ok(file)
}
