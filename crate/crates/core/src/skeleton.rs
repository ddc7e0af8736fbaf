//! Kinematic tree, 6D rotations and forward kinematics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Row-major 3×3 matrix.
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// 6D encoding of the identity rotation.
pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

const DEGENERATE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    /// Parent joint index, -1 for the root.
    pub parent: i32,
    /// Offset from the parent joint in the parent's frame, in meters.
    pub offset: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonRepr", into = "SkeletonRepr")]
pub struct Skeleton {
    joints: Vec<Joint>,
    contact_joints: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SkeletonRepr {
    joints: Vec<Joint>,
    contact_joints: Vec<usize>,
}

impl TryFrom<SkeletonRepr> for Skeleton {
    type Error = Error;

    fn try_from(repr: SkeletonRepr) -> Result<Self> {
        Skeleton::new(repr.joints, repr.contact_joints)
    }
}

impl From<Skeleton> for SkeletonRepr {
    fn from(s: Skeleton) -> Self {
        SkeletonRepr {
            joints: s.joints,
            contact_joints: s.contact_joints,
        }
    }
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>, contact_joints: Vec<usize>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::InvalidSkeleton("no joints".into()));
        }
        if joints[0].parent != -1 {
            return Err(Error::InvalidSkeleton(format!(
                "joint 0 must be the root (parent -1), found parent {}",
                joints[0].parent
            )));
        }
        for (i, joint) in joints.iter().enumerate() {
            if i > 0 && (joint.parent < 0 || joint.parent as usize >= i) {
                return Err(Error::InvalidSkeleton(format!(
                    "joint {i} ({}) has parent {}; parents must precede their children",
                    joint.name, joint.parent
                )));
            }
            if joint.offset.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSkeleton(format!(
                    "joint {i} ({}) has a non-finite offset",
                    joint.name
                )));
            }
        }
        if let Some(&bad) = contact_joints.iter().find(|&&c| c >= joints.len()) {
            return Err(Error::InvalidSkeleton(format!(
                "contact joint index {bad} out of range for {} joints",
                joints.len()
            )));
        }
        Ok(Skeleton {
            joints,
            contact_joints,
        })
    }

    /// Eight-joint stick figure: root, spine, head, two two-joint arms and a
    /// single leg proxy reaching the ground from the root.
    pub fn desk() -> Self {
        let j = |name: &str, parent: i32, offset: Vec3| Joint {
            name: name.to_string(),
            parent,
            offset,
        };
        let joints = vec![
            j("root", -1, [0.0, 0.0, 0.0]),
            j("spine", 0, [0.0, 0.3, 0.0]),
            j("head", 1, [0.0, 0.3, 0.0]),
            j("left_upper_arm", 1, [0.2, 0.25, 0.0]),
            j("left_forearm", 3, [0.3, 0.0, 0.0]),
            j("right_upper_arm", 1, [-0.2, 0.25, 0.0]),
            j("right_forearm", 5, [-0.3, 0.0, 0.0]),
            j("leg", 0, [0.0, -0.9, 0.0]),
        ];
        // Four contact sites to match the heel/toe layout: the leg proxy, both
        // forearms and the head.
        Skeleton::new(joints, vec![7, 4, 6, 2]).expect("desk skeleton is valid")
    }

    /// 24-joint tree with the SMPL topology and approximate rest offsets.
    pub fn smpl24() -> Self {
        const PARENTS: [i32; 24] = [
            -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
        ];
        const NAMES: [&str; 24] = [
            "pelvis",
            "left_hip",
            "right_hip",
            "spine1",
            "left_knee",
            "right_knee",
            "spine2",
            "left_ankle",
            "right_ankle",
            "spine3",
            "left_foot",
            "right_foot",
            "neck",
            "left_collar",
            "right_collar",
            "head",
            "left_shoulder",
            "right_shoulder",
            "left_elbow",
            "right_elbow",
            "left_wrist",
            "right_wrist",
            "left_hand",
            "right_hand",
        ];
        const OFFSETS: [Vec3; 24] = [
            [0.0, 0.0, 0.0],
            [0.06, -0.09, 0.0],
            [-0.06, -0.09, 0.0],
            [0.0, 0.11, -0.02],
            [0.04, -0.38, 0.0],
            [-0.04, -0.38, 0.0],
            [0.0, 0.14, 0.0],
            [-0.01, -0.4, -0.04],
            [0.01, -0.4, -0.04],
            [0.0, 0.06, 0.03],
            [0.02, -0.06, 0.12],
            [-0.02, -0.06, 0.12],
            [0.0, 0.21, -0.03],
            [0.08, 0.12, -0.02],
            [-0.08, 0.12, -0.02],
            [0.0, 0.07, 0.05],
            [0.12, 0.05, -0.01],
            [-0.12, 0.05, -0.01],
            [0.26, -0.01, -0.03],
            [-0.26, -0.01, -0.03],
            [0.25, 0.01, 0.0],
            [-0.25, 0.01, 0.0],
            [0.09, -0.01, -0.01],
            [-0.09, -0.01, -0.01],
        ];
        let joints = (0..24)
            .map(|i| Joint {
                name: NAMES[i].to_string(),
                parent: PARENTS[i],
                offset: OFFSETS[i],
            })
            .collect();
        // ankles stand in for heels, feet for toes
        Skeleton::new(joints, vec![7, 10, 8, 11]).expect("smpl24 skeleton is valid")
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn contact_joints(&self) -> &[usize] {
        &self.contact_joints
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        let p = self.joints[joint].parent;
        (p >= 0).then_some(p as usize)
    }

    /// Joint positions with every rotation at identity and the root at the origin.
    pub fn rest_positions(&self) -> Vec<Vec3> {
        let rotations = vec![IDENTITY_6D; self.num_joints()];
        forward_kinematics(self, &rotations, [0.0; 3]).expect("identity rotations are valid")
    }
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

pub fn determinant(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

/// Decodes a 6D rotation (two stacked 3-vector columns) into a rotation
/// matrix by Gram-Schmidt orthonormalization.
pub fn rot6d_to_matrix(r: &[f64]) -> Result<Mat3> {
    if r.len() != 6 {
        return Err(Error::LengthMismatch {
            expected: 6,
            actual: r.len(),
        });
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateRotation);
    }
    let a1 = [r[0], r[1], r[2]];
    let a2 = [r[3], r[4], r[5]];
    let n1 = norm(a1);
    if n1 < DEGENERATE_EPS {
        return Err(Error::DegenerateRotation);
    }
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let proj = dot(b1, a2);
    let u2 = [a2[0] - proj * b1[0], a2[1] - proj * b1[1], a2[2] - proj * b1[2]];
    let n2 = norm(u2);
    if n2 < DEGENERATE_EPS {
        return Err(Error::DegenerateRotation);
    }
    let b2 = [u2[0] / n2, u2[1] / n2, u2[2] / n2];
    let b3 = cross(b1, b2);
    // columns b1, b2, b3
    Ok([
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ])
}

/// Encodes a rotation matrix as its first two columns.
pub fn matrix_to_rot6d(m: &Mat3) -> [f64; 6] {
    [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]
}

/// Rotation matrix for a rotation of `angle` radians about `axis` (Rodrigues).
pub fn axis_angle_matrix(axis: Vec3, angle: f64) -> Mat3 {
    let n = norm(axis);
    if n == 0.0 || angle == 0.0 {
        return IDENTITY;
    }
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Global joint positions from per-joint local 6D rotations and the root
/// translation.
pub fn forward_kinematics(
    skeleton: &Skeleton,
    rotations: &[[f64; 6]],
    root_translation: Vec3,
) -> Result<Vec<Vec3>> {
    let n = skeleton.num_joints();
    if rotations.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: rotations.len(),
        });
    }
    let mut global_rot: Vec<Mat3> = Vec::with_capacity(n);
    let mut positions: Vec<Vec3> = Vec::with_capacity(n);
    for (j, joint) in skeleton.joints.iter().enumerate() {
        let local = rot6d_to_matrix(&rotations[j])?;
        match skeleton.parent(j) {
            None => {
                global_rot.push(local);
                positions.push(root_translation);
            }
            Some(p) => {
                let offset = mat_vec(&global_rot[p], joint.offset);
                let base = positions[p];
                positions.push([base[0] + offset[0], base[1] + offset[1], base[2] + offset[2]]);
                global_rot.push(mat_mul(&global_rot[p], &local));
            }
        }
    }
    Ok(positions)
}
