//! Keyframe constraints, their placement on a timeline, and linear infilling
//! of the unconstrained regions.

use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{Motion, Pose, PoseLayout};

#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub frame: usize,
    pub pose: Pose,
}

/// Keyposes pinned to frame indices of a timeline of `len` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeSet {
    len: usize,
    fps: u32,
    layout: PoseLayout,
    entries: Vec<Keyframe>,
}

impl KeyframeSet {
    pub fn new(len: usize, fps: u32, layout: PoseLayout, entries: Vec<Keyframe>) -> Result<Self> {
        if fps == 0 {
            return Err(Error::InvalidKeyframes("fps must be positive".into()));
        }
        for (i, kf) in entries.iter().enumerate() {
            if kf.frame >= len {
                return Err(Error::InvalidKeyframes(format!(
                    "keyframes[{i}].frame = {} is outside the timeline of {len} frames",
                    kf.frame
                )));
            }
            if *kf.pose.layout() != layout {
                return Err(Error::InvalidKeyframes(format!(
                    "keyframes[{i}].pose has a different layout"
                )));
            }
            if i > 0 && entries[i - 1].frame >= kf.frame {
                return Err(Error::InvalidKeyframes(format!(
                    "keyframes[{i}].frame = {} must be greater than the previous frame {}",
                    kf.frame,
                    entries[i - 1].frame
                )));
            }
        }
        Ok(KeyframeSet {
            len,
            fps,
            layout,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn layout(&self) -> &PoseLayout {
        &self.layout
    }

    pub fn entries(&self) -> &[Keyframe] {
        &self.entries
    }

    pub fn to_json(&self) -> serde_json::Value {
        let doc = KeyframeDoc {
            version: 1,
            len: self.len,
            fps: self.fps,
            keyframes: self
                .entries
                .iter()
                .map(|k| KeyframeEntry {
                    frame: k.frame,
                    pose: k.pose.values().to_vec(),
                })
                .collect(),
        };
        serde_json::to_value(doc).expect("keyframe documents always serialize")
    }

    /// Parses the keyframe document, reporting every invalid field at once.
    pub fn from_json(value: serde_json::Value, layout: PoseLayout) -> Result<Self> {
        let doc: KeyframeDoc =
            serde_json::from_value(value).map_err(|e| Error::json("keyframe document", e))?;
        let mut problems = Vec::new();
        if doc.version != 1 {
            problems.push(format!("version: unsupported value {}", doc.version));
        }
        if doc.len < 2 {
            problems.push(format!("F: must be at least 2, found {}", doc.len));
        }
        if doc.fps == 0 {
            problems.push("fps: must be positive".to_string());
        }
        let mut entries = Vec::new();
        for (i, kf) in doc.keyframes.into_iter().enumerate() {
            if kf.frame >= doc.len {
                problems.push(format!(
                    "keyframes[{i}].frame: {} is outside [0, {})",
                    kf.frame, doc.len
                ));
            }
            match Pose::new(layout, kf.pose) {
                Ok(pose) => entries.push(Keyframe {
                    frame: kf.frame,
                    pose,
                }),
                Err(e) => problems.push(format!("keyframes[{i}].pose: {e}")),
            }
        }
        for pair in entries.windows(2) {
            if pair[1].frame <= pair[0].frame {
                problems.push(format!(
                    "keyframes: frame {} follows frame {}; frames must be strictly increasing",
                    pair[1].frame, pair[0].frame
                ));
            }
        }
        if !problems.is_empty() {
            return Err(Error::InvalidKeyframes(problems.join("; ")));
        }
        KeyframeSet::new(doc.len, doc.fps, layout, entries)
    }

    pub fn read(path: &Path, layout: PoseLayout) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let value =
            serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))?;
        KeyframeSet::from_json(value, layout)
    }
}

#[derive(Serialize, Deserialize)]
struct KeyframeEntry {
    frame: usize,
    pose: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct KeyframeDoc {
    version: u32,
    #[serde(rename = "F")]
    len: usize,
    fps: u32,
    keyframes: Vec<KeyframeEntry>,
}

/// Partially defined motion: rows where `mask` is false carry no data.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSignal {
    layout: PoseLayout,
    fps: u32,
    buffer: Array2<f64>,
    mask: Vec<bool>,
}

impl ObservationSignal {
    /// Builds an observation from a fully defined buffer, keeping only the
    /// masked rows. Unconstrained rows are zeroed and contact flags cleared.
    pub fn from_masked(
        layout: PoseLayout,
        fps: u32,
        mut buffer: Array2<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if buffer.nrows() != mask.len() {
            return Err(Error::LengthMismatch {
                expected: buffer.nrows(),
                actual: mask.len(),
            });
        }
        if buffer.ncols() != layout.dim() {
            return Err(Error::DimensionMismatch {
                frame: 0,
                expected: layout.dim(),
                actual: buffer.ncols(),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::NoConstraints);
        }
        let contacts = layout.contacts();
        for (mut row, &m) in buffer.axis_iter_mut(Axis(0)).zip(&mask) {
            if m {
                row.slice_mut(ndarray::s![contacts.clone()]).fill(0.0);
            } else {
                row.fill(0.0);
            }
        }
        for (f, row) in buffer.axis_iter(Axis(0)).enumerate() {
            if let Some(i) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    frame: f,
                    field: layout.field_name(i),
                });
            }
        }
        Ok(ObservationSignal {
            layout,
            fps,
            buffer,
            mask,
        })
    }

    pub fn layout(&self) -> &PoseLayout {
        &self.layout
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Raw buffer; only rows where the mask is set are meaningful.
    pub fn buffer(&self) -> ndarray::ArrayView2<'_, f64> {
        self.buffer.view()
    }

    pub fn constrained_frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(f, _)| f)
    }

    /// Frames `[start, end)` as a new observation. Fails when the window holds
    /// no constrained frame.
    pub fn window(&self, start: usize, end: usize) -> Result<ObservationSignal> {
        if end > self.len() || start >= end {
            return Err(Error::Invalid(format!(
                "window [{start}, {end}) out of range for {} frames",
                self.len()
            )));
        }
        ObservationSignal::from_masked(
            self.layout,
            self.fps,
            self.buffer.slice(ndarray::s![start..end, ..]).to_owned(),
            self.mask[start..end].to_vec(),
        )
    }
}

/// Places keyposes on an `len`-frame timeline. Contact flags are cleared in
/// the observation.
pub fn place_on_timeline(keyframes: &KeyframeSet, len: usize) -> Result<ObservationSignal> {
    if keyframes.is_empty() {
        return Err(Error::NoConstraints);
    }
    let layout = *keyframes.layout();
    let mut buffer = Array2::zeros((len, layout.dim()));
    let mut mask = vec![false; len];
    for (i, kf) in keyframes.entries().iter().enumerate() {
        if kf.frame >= len {
            return Err(Error::InvalidKeyframes(format!(
                "keyframes[{i}].frame = {} is outside the timeline of {len} frames",
                kf.frame
            )));
        }
        buffer.row_mut(kf.frame).assign(&kf.pose.view());
        mask[kf.frame] = true;
    }
    ObservationSignal::from_masked(layout, keyframes.fps(), buffer, mask)
}

/// Fills every unconstrained run with the straight line between its bounding
/// constrained frames; runs before the first or after the last constraint
/// hold that constraint.
pub fn infill_linear(obs: &ObservationSignal) -> Result<Motion> {
    let keys: Vec<usize> = obs.constrained_frames().collect();
    let (&first, &last) = match (keys.first(), keys.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::NoConstraints),
    };
    let mut out = obs.buffer.clone();
    for f in 0..first {
        out.row_mut(f).assign(&obs.buffer.row(first));
    }
    for f in last + 1..obs.len() {
        out.row_mut(f).assign(&obs.buffer.row(last));
    }
    for pair in keys.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let span = (b - a) as f64;
        for f in a + 1..b {
            let u = (f - a) as f64 / span;
            let (lo, hi) = (obs.buffer.row(a), obs.buffer.row(b));
            for ((o, &x0), &x1) in out.row_mut(f).iter_mut().zip(lo.iter()).zip(hi.iter()) {
                *o = (1.0 - u) * x0 + u * x1;
            }
        }
    }
    Motion::new(obs.layout, obs.fps, out)
}
