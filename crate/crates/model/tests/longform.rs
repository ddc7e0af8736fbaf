mod common;

use common::tiny_config;
use loosekey_core::datagen::synth_source_motions;
use loosekey_core::{place_on_timeline, Keyframe, KeyframeSet, ObservationSignal, PoseLayout, Skeleton};
use loosekey_model::longform::{constrained_sample, splice, SpliceLayout};
use loosekey_model::{sample, Denoiser, Mode, SamplerConfig};
use ndarray::s;

fn long_observation(total: usize, frames: &[usize]) -> ObservationSignal {
    let skel = Skeleton::desk();
    let motion = &synth_source_motions(1, &skel, total, 30, 21).unwrap()[0];
    let entries = frames
        .iter()
        .map(|&f| Keyframe {
            frame: f,
            pose: motion.pose(f),
        })
        .collect();
    let set = KeyframeSet::new(total, 30, PoseLayout::for_skeleton(&skel), entries).unwrap();
    place_on_timeline(&set, total).unwrap()
}

fn net() -> Denoiser {
    Denoiser::new(tiny_config(Mode::Lt), 8).unwrap()
}

#[test]
fn keyframes_land_in_every_covering_window() {
    let obs = long_observation(150, &[10, 70, 130]);
    let (windows, layout) = splice(&obs, 60).unwrap();
    assert_eq!(layout.offsets, vec![0, 30, 60, 90]);
    let expected: [&[usize]; 4] = [&[10], &[40], &[10], &[40]];
    for (i, w) in windows.iter().enumerate() {
        let w = w.as_ref().unwrap();
        let local: Vec<usize> = w.constrained_frames().collect();
        assert_eq!(local, expected[i], "window {i}");
        for &f in &local {
            let global = layout.offsets[i] + f;
            assert_eq!(w.buffer().row(f), obs.buffer().row(global));
        }
        assert_eq!(w.mask(), &obs.mask()[layout.offsets[i]..layout.offsets[i] + 60]);
    }
}

#[test]
fn windows_without_constraints_are_reported_empty() {
    let obs = long_observation(150, &[5]);
    let (windows, _) = splice(&obs, 60).unwrap();
    assert!(windows[0].is_some());
    assert!(windows[1..].iter().all(Option::is_none));
    assert!(splice(&long_observation(50, &[5]), 60).is_err());
}

#[test]
fn overlapping_halves_agree_exactly() {
    let obs = long_observation(150, &[10, 70, 130]);
    let cfg = SamplerConfig {
        imputation: Some(0),
        seed: 2,
        num_samples: 1,
    };
    let out = constrained_sample(&net(), &obs, &cfg, 0).unwrap();
    let layout = &out.layout;
    assert_eq!(out.motion.num_frames(), 150);
    for i in 1..layout.len() {
        let shift = layout.offsets[i] - layout.offsets[i - 1];
        let overlap = layout.overlap(i);
        assert_eq!(overlap, 30);
        assert_eq!(
            out.windows[i].slice(s![..overlap, ..]),
            out.windows[i - 1].slice(s![shift..shift + overlap, ..]),
            "seam {i}"
        );
    }
    for i in 0..layout.len() {
        let o = layout.offsets[i];
        assert_eq!(out.motion.frames().slice(s![o..o + 60, ..]), out.windows[i]);
    }
    for g in [10, 70, 130] {
        assert_eq!(out.motion.frame(g), obs.buffer().row(g));
    }
}

#[test]
fn end_aligned_windows_keep_seams_exact() {
    let obs = long_observation(100, &[20, 80]);
    let layout = SpliceLayout::new(100, 60).unwrap();
    assert_eq!(layout.offsets, vec![0, 30, 40]);
    let out = constrained_sample(&net(), &obs, &SamplerConfig::default(), 0).unwrap();
    for i in 1..layout.len() {
        let shift = layout.offsets[i] - layout.offsets[i - 1];
        let overlap = layout.overlap(i);
        assert_eq!(
            out.windows[i].slice(s![..overlap, ..]),
            out.windows[i - 1].slice(s![shift..shift + overlap, ..])
        );
    }
}

#[test]
fn single_window_matches_plain_sampling() {
    let obs = long_observation(60, &[15, 45]);
    let cfg = SamplerConfig {
        imputation: None,
        seed: 12,
        num_samples: 1,
    };
    let net = net();
    let spliced = constrained_sample(&net, &obs, &cfg, 0).unwrap();
    assert_eq!(spliced.layout.len(), 1);
    assert_eq!(spliced.motion, sample(&net, &obs, &cfg).unwrap()[0]);
    let again = constrained_sample(&net, &obs, &cfg, 0).unwrap();
    assert_eq!(spliced.motion, again.motion);
}
