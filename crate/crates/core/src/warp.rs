//! Global time warp: a per-frame slope vector whose cumulative sum gives,
//! for every output frame, the (fractional) input time it samples.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::motion::Motion;

/// Lower bound applied to every slope so the time map stays monotone.
pub const DEFAULT_SLOPE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct WarpFunction {
    slopes: Vec<f64>,
    floor: f64,
}

impl WarpFunction {
    /// Floors raw slopes at `floor`. Slot 0 only anchors `t(0) = 0`.
    pub fn from_slopes(raw: &[f64], floor: f64) -> Result<Self> {
        if raw.len() < 2 {
            return Err(Error::Invalid(format!(
                "a warp needs at least 2 slopes, found {}",
                raw.len()
            )));
        }
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(Error::Invalid(format!("slope floor must be positive, found {floor}")));
        }
        if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite raw slope at frame {i}")));
        }
        Ok(WarpFunction {
            slopes: raw.iter().map(|&s| s.max(floor)).collect(),
            floor,
        })
    }

    pub fn identity(frames: usize) -> Self {
        WarpFunction {
            slopes: vec![1.0; frames.max(2)],
            floor: DEFAULT_SLOPE_FLOOR,
        }
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn len(&self) -> usize {
        self.slopes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slopes.is_empty()
    }

    /// Unclamped time map: `t(0) = 0`, `t(f) = slopes[1] + ... + slopes[f]`.
    pub fn times(&self) -> Vec<f64> {
        cumulative_times(&self.slopes)
    }

    /// Time map clamped to the valid input range `[0, F-1]`.
    pub fn sample_times(&self) -> Vec<f64> {
        let last = (self.slopes.len() - 1) as f64;
        self.times().into_iter().map(|t| t.min(last)).collect()
    }
}

fn cumulative_times(slopes: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(slopes.len());
    out.push(0.0);
    for s in &slopes[1..] {
        acc += s;
        out.push(acc);
    }
    out
}

/// Resamples `frames` at the given input times by linear interpolation
/// between the two neighbouring frames. Times must already lie in
/// `[0, frames - 1]`.
pub fn resample(frames: ArrayView2<f64>, times: &[f64]) -> Array2<f64> {
    let n = frames.nrows();
    let mut out = Array2::zeros((times.len(), frames.ncols()));
    for (mut row, &t) in out.axis_iter_mut(Axis(0)).zip(times) {
        let a = (t.floor() as usize).min(n - 1);
        let u = t - a as f64;
        if u == 0.0 || a + 1 >= n {
            row.assign(&frames.row(a));
        } else {
            let lo = frames.row(a);
            let hi = frames.row(a + 1);
            for ((o, &x0), &x1) in row.iter_mut().zip(lo.iter()).zip(hi.iter()) {
                *o = (1.0 - u) * x0 + u * x1;
            }
        }
    }
    out
}

/// Backward-mapped warp of a whole motion: output frame `f` is the input
/// interpolated at time `t(f)`.
pub fn apply_warp(warp: &WarpFunction, motion: &Motion) -> Result<Motion> {
    if warp.len() != motion.num_frames() {
        return Err(Error::LengthMismatch {
            expected: motion.num_frames(),
            actual: warp.len(),
        });
    }
    let frames = resample(motion.frames(), &warp.sample_times());
    Motion::new(*motion.layout(), motion.fps(), frames)
}

/// Analytic gradient of `sum(apply_warp(from_slopes(raw), X))` with respect
/// to the raw slopes.
///
/// Frames whose time is clamped at the end contribute nothing, as do slopes
/// held at the floor. At integer times the right-hand derivative is used.
pub fn sum_gradient(raw: &[f64], floor: f64, frames: ArrayView2<f64>) -> Result<Vec<f64>> {
    let warp = WarpFunction::from_slopes(raw, floor)?;
    let n = frames.nrows();
    if warp.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: warp.len(),
        });
    }
    let last = (n - 1) as f64;
    let row_sums: Vec<f64> = frames.axis_iter(Axis(0)).map(|r| r.sum()).collect();
    // d(sum out_f)/d t(f)
    let dt: Vec<f64> = warp
        .times()
        .iter()
        .map(|&t| {
            if t >= last {
                0.0
            } else {
                let a = t.floor() as usize;
                row_sums[a + 1] - row_sums[a]
            }
        })
        .collect();
    // t(f) depends on slopes 1..=f, so the gradient is a reverse cumulative sum.
    let mut grad = vec![0.0; n];
    let mut acc = 0.0;
    for i in (1..n).rev() {
        acc += dt[i];
        grad[i] = if raw[i] > floor { acc } else { 0.0 };
    }
    Ok(grad)
}

/// Largest relative disagreement between the analytic slope gradient and a
/// central finite difference of step `h`, over all slope coordinates.
pub fn warp_jacobian_check(raw: &[f64], motion: &Motion, h: f64) -> Result<f64> {
    let floor = DEFAULT_SLOPE_FLOOR;
    let analytic = sum_gradient(raw, floor, motion.frames())?;
    let objective = |slopes: &[f64]| -> Result<f64> {
        let w = WarpFunction::from_slopes(slopes, floor)?;
        Ok(apply_warp(&w, motion)?.frames().sum())
    };
    let mut worst: f64 = 0.0;
    let mut probe = raw.to_vec();
    for i in 0..raw.len() {
        probe[i] = raw[i] + h;
        let plus = objective(&probe)?;
        probe[i] = raw[i] - h;
        let minus = objective(&probe)?;
        probe[i] = raw[i];
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max((analytic[i] - fd).abs() / (fd.abs() + 1e-8));
    }
    Ok(worst)
}
