//! Reconstruction, keypose, smoothness and diversity metrics over joint
//! positions. Units are meters; k-th temporal differences are scaled by
//! `fps^k`.

use ndarray::{s, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{frame_positions, Motion, Pose};
use crate::skeleton::Skeleton;

/// Global (FK) and root-relative joint positions, each `F × J × 3`.
pub fn joint_positions_gl(motion: &Motion, skeleton: &Skeleton) -> Result<(Array3<f64>, Array3<f64>)> {
    let layout = motion.layout();
    layout.check_skeleton(skeleton)?;
    let (f, j) = (motion.num_frames(), layout.num_joints);
    let mut global = Array3::zeros((f, j, 3));
    let mut local = Array3::zeros((f, j, 3));
    for frame in 0..f {
        let positions = frame_positions(layout, skeleton, motion.frame(frame))?;
        let root = positions[0];
        for (joint, p) in positions.iter().enumerate() {
            for k in 0..3 {
                global[[frame, joint, k]] = p[k];
                local[[frame, joint, k]] = p[k] - root[k];
            }
        }
    }
    Ok((global, local))
}

fn pose_local_positions(pose: &Pose, skeleton: &Skeleton) -> Result<Vec<[f64; 3]>> {
    pose.layout().check_skeleton(skeleton)?;
    let positions = frame_positions(pose.layout(), skeleton, pose.view())?;
    let root = positions[0];
    Ok(positions
        .iter()
        .map(|p| [p[0] - root[0], p[1] - root[1], p[2] - root[2]])
        .collect())
}

/// `order`-th forward difference along the frame axis.
fn difference(x: ArrayView3<f64>, order: usize) -> Array3<f64> {
    let mut cur = x.to_owned();
    for _ in 0..order {
        let n = cur.shape()[0];
        cur = &cur.slice(s![1..n, .., ..]) - &cur.slice(s![0..n - 1, .., ..]);
    }
    cur
}

/// Mean over frames and joints of the Euclidean norm of `a - b`.
fn mean_joint_distance(a: ArrayView3<f64>, b: ArrayView3<f64>) -> f64 {
    let diff = &a - &b;
    let norms = diff.map_axis(Axis(2), |v| v.dot(&v).sqrt());
    norms.mean().unwrap_or(0.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct L2Family {
    pub pos_g: f64,
    pub pos_l: f64,
    pub vel_g: f64,
    pub vel_l: f64,
    pub acc_g: f64,
    pub acc_l: f64,
    pub jerk_g: f64,
    pub jerk_l: f64,
}

pub fn l2_family_from_positions(
    gen: (&Array3<f64>, &Array3<f64>),
    gt: (&Array3<f64>, &Array3<f64>),
    fps: f64,
) -> Result<L2Family> {
    if gen.0.shape() != gt.0.shape() {
        return Err(Error::LengthMismatch {
            expected: gt.0.shape()[0],
            actual: gen.0.shape()[0],
        });
    }
    let frames = gt.0.shape()[0];
    let metric = |a: &Array3<f64>, b: &Array3<f64>, k: usize| -> f64 {
        if frames <= k {
            return 0.0;
        }
        let scale = fps.powi(k as i32);
        mean_joint_distance(difference(a.view(), k).view(), difference(b.view(), k).view()) * scale
    };
    Ok(L2Family {
        pos_g: metric(gen.0, gt.0, 0),
        pos_l: metric(gen.1, gt.1, 0),
        vel_g: metric(gen.0, gt.0, 1),
        vel_l: metric(gen.1, gt.1, 1),
        acc_g: metric(gen.0, gt.0, 2),
        acc_l: metric(gen.1, gt.1, 2),
        jerk_g: metric(gen.0, gt.0, 3),
        jerk_l: metric(gen.1, gt.1, 3),
    })
}

/// Position, velocity, acceleration and jerk errors, global and root-local.
pub fn l2_family(gen: &Motion, gt: &Motion, skeleton: &Skeleton) -> Result<L2Family> {
    if gen.num_frames() != gt.num_frames() {
        return Err(Error::LengthMismatch {
            expected: gt.num_frames(),
            actual: gen.num_frames(),
        });
    }
    if gen.layout() != gt.layout() {
        return Err(Error::InvalidLayout("generated and ground-truth layouts differ".into()));
    }
    let a = joint_positions_gl(gen, skeleton)?;
    let b = joint_positions_gl(gt, skeleton)?;
    l2_family_from_positions((&a.0, &a.1), (&b.0, &b.1), gt.fps() as f64)
}

/// Distance from `keypose` to each frame: mean per-joint distance between
/// root-local joint positions.
pub fn keypose_distances(gen: &Motion, keypose: &Pose, skeleton: &Skeleton) -> Result<Vec<f64>> {
    let (_, local) = joint_positions_gl(gen, skeleton)?;
    let key = pose_local_positions(keypose, skeleton)?;
    Ok(local
        .axis_iter(Axis(0))
        .map(|frame| {
            let total: f64 = frame
                .axis_iter(Axis(0))
                .zip(&key)
                .map(|(p, q)| {
                    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
                })
                .sum();
            total / key.len() as f64
        })
        .collect())
}

/// Keypose error: distance from `keypose` to its closest frame of `gen`.
pub fn kpe(gen: &Motion, keypose: &Pose, skeleton: &Skeleton) -> Result<f64> {
    Ok(keypose_distances(gen, keypose, skeleton)?
        .into_iter()
        .fold(f64::INFINITY, f64::min))
}

/// Frame of `gen` closest to `keypose` (first on ties).
pub fn keypose_frame(gen: &Motion, keypose: &Pose, skeleton: &Skeleton) -> Result<usize> {
    let d = keypose_distances(gen, keypose, skeleton)?;
    Ok(d
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &v)| if v < best.1 { (i, v) } else { best })
        .0)
}

/// Mean magnitude of the second difference of global joint positions, scaled
/// by `fps^2`.
pub fn jitter(gen: &Motion, skeleton: &Skeleton) -> Result<f64> {
    if gen.num_frames() < 3 {
        return Err(Error::InvalidMotion(format!(
            "jitter needs at least 3 frames, found {}",
            gen.num_frames()
        )));
    }
    let (global, _) = joint_positions_gl(gen, skeleton)?;
    let acc = difference(global.view(), 2);
    let fps2 = (gen.fps() as f64).powi(2);
    Ok(acc.map_axis(Axis(2), |v| v.dot(&v).sqrt()).mean().unwrap_or(0.0) * fps2)
}

/// Mean over unordered sample pairs of the mean per-frame, per-joint distance
/// between root-local joint positions.
pub fn diversity(samples: &[Motion], skeleton: &Skeleton) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Invalid(format!(
            "diversity needs at least 2 samples, found {}",
            samples.len()
        )));
    }
    let locals = samples
        .iter()
        .map(|m| joint_positions_gl(m, skeleton).map(|(_, l)| l))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..locals.len() {
        for j in i + 1..locals.len() {
            if locals[i].shape() != locals[j].shape() {
                return Err(Error::LengthMismatch {
                    expected: locals[i].shape()[0],
                    actual: locals[j].shape()[0],
                });
            }
            total += mean_joint_distance(locals[i].view(), locals[j].view());
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Aggregate metrics for one generator over a test set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub l2_pos_g: f64,
    pub l2_pos_l: f64,
    pub l2_vel_g: f64,
    pub l2_vel_l: f64,
    pub l2_acc_g: f64,
    pub l2_acc_l: f64,
    pub l2_jerk_g: f64,
    pub l2_jerk_l: f64,
    pub kpe: f64,
    pub jitter: f64,
    pub diversity: f64,
    pub pairs: usize,
    pub samples_per_input: usize,
}

impl EvalReport {
    pub fn scalars(&self) -> [(&'static str, f64); 11] {
        [
            ("l2_pos_g", self.l2_pos_g),
            ("l2_pos_l", self.l2_pos_l),
            ("l2_vel_g", self.l2_vel_g),
            ("l2_vel_l", self.l2_vel_l),
            ("l2_acc_g", self.l2_acc_g),
            ("l2_acc_l", self.l2_acc_l),
            ("l2_jerk_g", self.l2_jerk_g),
            ("l2_jerk_l", self.l2_jerk_l),
            ("kpe", self.kpe),
            ("jitter", self.jitter),
            ("diversity", self.diversity),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.scalars() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Invalid(format!("report field {name} is {v}")));
            }
        }
        Ok(())
    }

    /// Aligned table with one row per named report, columns in G / L pairs.
    pub fn table(rows: &[(&str, &EvalReport)]) -> String {
        let header = [
            "Method", "L2-Pos G/L", "L2-Vel G/L", "L2-Acc G/L", "L2-Jerk G/L", "KPE", "Jitter",
            "Diversity",
        ];
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for (name, r) in rows {
            cells.push(vec![
                name.to_string(),
                format!("{:.4} / {:.4}", r.l2_pos_g, r.l2_pos_l),
                format!("{:.4} / {:.4}", r.l2_vel_g, r.l2_vel_l),
                format!("{:.4} / {:.4}", r.l2_acc_g, r.l2_acc_l),
                format!("{:.4} / {:.4}", r.l2_jerk_g, r.l2_jerk_l),
                format!("{:.4}", r.kpe),
                format!("{:.4}", r.jitter),
                format!("{:.4}", r.diversity),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:<w$}"))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Running sums for [`EvalReport`]; merging accumulators is associative.
#[derive(Clone, Debug, Default)]
pub struct ReportAccumulator {
    l2: [f64; 8],
    kpe: f64,
    kpe_count: usize,
    jitter: f64,
    diversity: f64,
    diversity_count: usize,
    pairs: usize,
}

impl ReportAccumulator {
    pub fn add_reconstruction(&mut self, l2: &L2Family, jitter: f64) {
        let v = [
            l2.pos_g, l2.pos_l, l2.vel_g, l2.vel_l, l2.acc_g, l2.acc_l, l2.jerk_g, l2.jerk_l,
        ];
        for (acc, x) in self.l2.iter_mut().zip(v) {
            *acc += x;
        }
        self.jitter += jitter;
        self.pairs += 1;
    }

    pub fn add_kpe(&mut self, kpe: f64) {
        self.kpe += kpe;
        self.kpe_count += 1;
    }

    pub fn add_diversity(&mut self, diversity: f64) {
        self.diversity += diversity;
        self.diversity_count += 1;
    }

    pub fn merge(&mut self, other: &ReportAccumulator) {
        for (a, b) in self.l2.iter_mut().zip(other.l2) {
            *a += b;
        }
        self.kpe += other.kpe;
        self.kpe_count += other.kpe_count;
        self.jitter += other.jitter;
        self.diversity += other.diversity;
        self.diversity_count += other.diversity_count;
        self.pairs += other.pairs;
    }

    pub fn finish(&self, samples_per_input: usize) -> EvalReport {
        let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
        let l2 = self.l2.map(|v| mean(v, self.pairs));
        EvalReport {
            l2_pos_g: l2[0],
            l2_pos_l: l2[1],
            l2_vel_g: l2[2],
            l2_vel_l: l2[3],
            l2_acc_g: l2[4],
            l2_acc_l: l2[5],
            l2_jerk_g: l2[6],
            l2_jerk_l: l2[7],
            kpe: mean(self.kpe, self.kpe_count),
            jitter: mean(self.jitter, self.pairs),
            diversity: mean(self.diversity, self.diversity_count),
            pairs: self.pairs,
            samples_per_input,
        }
    }
}
