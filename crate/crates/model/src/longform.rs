//! Generation beyond one network window by half-overlapping splicing.

use loosekey_core::{Motion, ObservationSignal};
use ndarray::{s, Array2};
use serde::Serialize;

use crate::error::{ModelError, Result};
use crate::net::Denoiser;
use crate::sampler::{denoise_windows, SamplerConfig};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SpliceLayout {
    pub total: usize,
    pub window: usize,
    /// Window start frames: stride `window / 2`, the last one end-aligned.
    pub offsets: Vec<usize>,
}

impl SpliceLayout {
    pub fn new(total: usize, window: usize) -> Result<Self> {
        if window < 2 {
            return Err(ModelError::Invalid(format!("window of {window} frames is too short")));
        }
        if total < window {
            return Err(ModelError::Invalid(format!(
                "sequence of {total} frames is shorter than the {window}-frame window"
            )));
        }
        let stride = window / 2;
        let mut offsets = vec![0];
        while offsets.last().unwrap() + window < total {
            let next = (offsets.last().unwrap() + stride).min(total - window);
            offsets.push(next);
        }
        Ok(SpliceLayout {
            total,
            window,
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Frames window `i` shares with window `i - 1` (0 for the first).
    pub fn overlap(&self, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            self.offsets[i - 1] + self.window - self.offsets[i]
        }
    }

    /// Global frame range window `i` contributes to the assembled output.
    pub fn owned_range(&self, i: usize) -> std::ops::Range<usize> {
        let start = self.offsets[i] + self.overlap(i);
        start..self.offsets[i] + self.window
    }

    /// The first window in full, then each later window past its overlap.
    pub fn assemble(&self, windows: &[Array2<f64>]) -> Array2<f64> {
        let d = windows[0].ncols();
        let mut out = Array2::zeros((self.total, d));
        for (i, w) in windows.iter().enumerate() {
            let range = self.owned_range(i);
            let local = range.start - self.offsets[i]..self.window;
            out.slice_mut(s![range, ..]).assign(&w.slice(s![local, ..]));
        }
        out
    }
}

/// Slices a long observation into window-length observations. Windows with
/// no constraint of their own are rejected by the observation invariant, so
/// such windows carry `None`.
pub fn splice(observation: &ObservationSignal, window: usize) -> Result<(Vec<Option<ObservationSignal>>, SpliceLayout)> {
    let layout = SpliceLayout::new(observation.len(), window)?;
    let parts = layout
        .offsets
        .iter()
        .map(|&o| {
            let has = observation.mask()[o..o + window].iter().any(|&m| m);
            has.then(|| observation.window(o, o + window)).transpose()
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((parts, layout))
}

/// One spliced sample: the assembled motion and the final per-window
/// states it was assembled from.
#[derive(Clone, Debug)]
pub struct SplicedSample {
    pub motion: Motion,
    pub windows: Vec<Array2<f64>>,
    pub layout: SpliceLayout,
}

pub fn constrained_sample(
    net: &Denoiser,
    observation: &ObservationSignal,
    config: &SamplerConfig,
    sample_index: usize,
) -> Result<SplicedSample> {
    let nc = net.config();
    let schedule = NoiseSchedule::new(nc.schedule, nc.diffusion_steps)?;
    let layout = SpliceLayout::new(observation.len(), nc.frames)?;
    let windows = denoise_windows(net, &schedule, observation, &layout, config, sample_index)?;
    let motion = Motion::new(*observation.layout(), observation.fps(), layout.assemble(&windows))?;
    Ok(SplicedSample {
        motion,
        windows,
        layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_follow_half_stride_with_end_alignment() {
        assert_eq!(SpliceLayout::new(60, 60).unwrap().offsets, vec![0]);
        assert_eq!(SpliceLayout::new(90, 60).unwrap().offsets, vec![0, 30]);
        assert_eq!(SpliceLayout::new(150, 60).unwrap().offsets, vec![0, 30, 60, 90]);
        let odd = SpliceLayout::new(100, 60).unwrap();
        assert_eq!(odd.offsets, vec![0, 30, 40]);
        assert_eq!(odd.overlap(2), 50);
        assert!(SpliceLayout::new(59, 60).is_err());
    }

    #[test]
    fn owned_ranges_tile_the_sequence() {
        for total in [60, 61, 89, 90, 150, 151, 299] {
            let l = SpliceLayout::new(total, 60).unwrap();
            let mut next = 0;
            for i in 0..l.len() {
                let r = l.owned_range(i);
                assert_eq!(r.start, next, "total {total}");
                next = r.end;
            }
            assert_eq!(next, total);
        }
    }
}
