//! Pose feature layout and motion containers.

use std::ops::Range;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{forward_kinematics, Skeleton, Vec3};

/// Layout of a single frame vector:
/// `[rotations (6J) | root translation (3) | shape (S) | contacts (C) | joint positions (3J)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoseLayout {
    pub num_joints: usize,
    pub shape_dims: usize,
    pub contact_dims: usize,
}

impl PoseLayout {
    pub fn new(num_joints: usize, shape_dims: usize, contact_dims: usize) -> Result<Self> {
        if num_joints == 0 {
            return Err(Error::InvalidLayout("num_joints must be positive".into()));
        }
        Ok(PoseLayout {
            num_joints,
            shape_dims,
            contact_dims,
        })
    }

    /// Layout for a skeleton with one contact flag per contact joint and no
    /// shape block.
    pub fn for_skeleton(skeleton: &Skeleton) -> Self {
        PoseLayout {
            num_joints: skeleton.num_joints(),
            shape_dims: 0,
            contact_dims: skeleton.contact_joints().len(),
        }
    }

    pub fn dim(&self) -> usize {
        6 * self.num_joints + 3 + self.shape_dims + self.contact_dims + 3 * self.num_joints
    }

    pub fn rotations(&self) -> Range<usize> {
        0..6 * self.num_joints
    }

    pub fn root_translation(&self) -> Range<usize> {
        let start = 6 * self.num_joints;
        start..start + 3
    }

    pub fn shape(&self) -> Range<usize> {
        let start = self.root_translation().end;
        start..start + self.shape_dims
    }

    pub fn contacts(&self) -> Range<usize> {
        let start = self.shape().end;
        start..start + self.contact_dims
    }

    pub fn joint_positions(&self) -> Range<usize> {
        let start = self.contacts().end;
        start..start + 3 * self.num_joints
    }

    /// All blocks in frame order with their names.
    pub fn blocks(&self) -> [(&'static str, Range<usize>); 5] {
        [
            ("rotations", self.rotations()),
            ("root_translation", self.root_translation()),
            ("shape", self.shape()),
            ("contacts", self.contacts()),
            ("joint_positions", self.joint_positions()),
        ]
    }

    /// Name of the block holding coordinate `index`, used in error messages.
    pub fn field_name(&self, index: usize) -> String {
        for (name, range) in self.blocks() {
            if range.contains(&index) {
                return format!("{name}[{}]", index - range.start);
            }
        }
        format!("index {index}")
    }

    pub fn check_skeleton(&self, skeleton: &Skeleton) -> Result<()> {
        if skeleton.num_joints() != self.num_joints {
            return Err(Error::InvalidLayout(format!(
                "layout has {} joints but skeleton has {}",
                self.num_joints,
                skeleton.num_joints()
            )));
        }
        Ok(())
    }

    pub fn rotations_of(&self, frame: ArrayView1<f64>) -> Vec<[f64; 6]> {
        let base = self.rotations().start;
        (0..self.num_joints)
            .map(|j| std::array::from_fn(|k| frame[base + 6 * j + k]))
            .collect()
    }

    pub fn root_of(&self, frame: ArrayView1<f64>) -> Vec3 {
        let base = self.root_translation().start;
        [frame[base], frame[base + 1], frame[base + 2]]
    }

    pub fn positions_of(&self, frame: ArrayView1<f64>) -> Vec<Vec3> {
        let base = self.joint_positions().start;
        (0..self.num_joints)
            .map(|j| std::array::from_fn(|k| frame[base + 3 * j + k]))
            .collect()
    }
}

/// Single frame vector bound to a layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    layout: PoseLayout,
    values: Vec<f64>,
}

impl Pose {
    pub fn new(layout: PoseLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::LengthMismatch {
                expected: layout.dim(),
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                frame: 0,
                field: layout.field_name(i),
            });
        }
        Ok(Pose { layout, values })
    }

    pub fn layout(&self) -> &PoseLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[..])
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Fixed-rate sequence of frame vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Motion {
    layout: PoseLayout,
    fps: u32,
    frames: Array2<f64>,
}

impl Motion {
    pub fn new(layout: PoseLayout, fps: u32, frames: Array2<f64>) -> Result<Self> {
        if fps == 0 {
            return Err(Error::InvalidMotion("fps must be positive".into()));
        }
        if frames.nrows() < 2 {
            return Err(Error::InvalidMotion(format!(
                "a motion needs at least 2 frames, found {}",
                frames.nrows()
            )));
        }
        if frames.ncols() != layout.dim() {
            return Err(Error::DimensionMismatch {
                frame: 0,
                expected: layout.dim(),
                actual: frames.ncols(),
            });
        }
        for (f, row) in frames.axis_iter(Axis(0)).enumerate() {
            if let Some(i) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    frame: f,
                    field: layout.field_name(i),
                });
            }
        }
        Ok(Motion {
            layout,
            fps,
            frames,
        })
    }

    pub fn from_rows(layout: PoseLayout, fps: u32, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = layout.dim();
        for (f, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    frame: f,
                    expected: dim,
                    actual: row.len(),
                });
            }
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let frames = Array2::from_shape_vec((rows.len(), dim), flat)
            .map_err(|e| Error::InvalidMotion(e.to_string()))?;
        Motion::new(layout, fps, frames)
    }

    pub fn layout(&self) -> &PoseLayout {
        &self.layout
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn frames(&self) -> ArrayView2<'_, f64> {
        self.frames.view()
    }

    pub fn frame(&self, f: usize) -> ArrayView1<'_, f64> {
        self.frames.row(f)
    }

    pub fn pose(&self, f: usize) -> Pose {
        Pose {
            layout: self.layout,
            values: self.frames.row(f).to_vec(),
        }
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.frames
    }

    /// Frames `[start, end)` as a new motion.
    pub fn slice(&self, start: usize, end: usize) -> Result<Motion> {
        if end > self.num_frames() || start >= end {
            return Err(Error::InvalidMotion(format!(
                "slice [{start}, {end}) out of range for {} frames",
                self.num_frames()
            )));
        }
        Motion::new(
            self.layout,
            self.fps,
            self.frames.slice(ndarray::s![start..end, ..]).to_owned(),
        )
    }

    /// Checks that every contact flag is exactly 0 or 1, as required of
    /// observed ground-truth motion.
    pub fn validate_contacts(&self) -> Result<()> {
        let range = self.layout.contacts();
        for (f, row) in self.frames.axis_iter(Axis(0)).enumerate() {
            for i in range.clone() {
                let v = row[i];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::InvalidMotion(format!(
                        "contact flag {} at frame {f} is {v}, expected 0 or 1",
                        self.layout.field_name(i)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Global joint positions of one frame computed from its rotations and root
/// translation.
pub fn frame_positions(
    layout: &PoseLayout,
    skeleton: &Skeleton,
    frame: ArrayView1<f64>,
) -> Result<Vec<Vec3>> {
    forward_kinematics(skeleton, &layout.rotations_of(frame), layout.root_of(frame))
}

/// Recomputes the joint position block of every frame from the rotation and
/// root translation blocks. Other blocks are left untouched.
pub fn refresh_positions(motion: &Motion, skeleton: &Skeleton) -> Result<Motion> {
    let layout = *motion.layout();
    layout.check_skeleton(skeleton)?;
    let mut frames = motion.frames.clone();
    let base = layout.joint_positions().start;
    for mut row in frames.axis_iter_mut(Axis(0)) {
        let positions = frame_positions(&layout, skeleton, row.view())?;
        for (j, p) in positions.iter().enumerate() {
            for k in 0..3 {
                row[base + 3 * j + k] = p[k];
            }
        }
    }
    Motion::new(layout, motion.fps, frames)
}
