#![allow(dead_code)]

use loosekey_core::datagen::{generate_pairs, synth_source_motions, DatagenConfig, TrainingPair};
use loosekey_core::{PoseLayout, Skeleton};
use loosekey_model::{Mode, NetConfig};

pub fn desk_pairs(sources: usize, seed: u64) -> Vec<TrainingPair> {
    let skel = Skeleton::desk();
    let motions = synth_source_motions(sources, &skel, 120, 30, seed).unwrap();
    let cfg = DatagenConfig {
        seed,
        ..DatagenConfig::default()
    };
    generate_pairs(&motions, &cfg).unwrap()
}

pub fn desk_dim() -> usize {
    PoseLayout::for_skeleton(&Skeleton::desk()).dim()
}

/// A small network that keeps tests fast while exercising every block.
pub fn tiny_config(mode: Mode) -> NetConfig {
    NetConfig {
        frames: 60,
        dim: desk_dim(),
        latent: 16,
        layers: 1,
        heads: 2,
        ff: 32,
        warp_hidden: [16, 8],
        mode,
        diffusion_steps: 10,
        ..NetConfig::default()
    }
}
