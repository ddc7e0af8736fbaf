use loosekey_core::datagen::{generate_pairs, synth_source_motions, DatagenConfig};
use loosekey_core::{PoseLayout, Skeleton};
use loosekey_model::optim::AdamConfig;
use loosekey_model::{Denoiser, NetConfig, TrainConfig, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let lr: f32 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);
    let skel = Skeleton::desk();
    let motions = synth_source_motions(4, &skel, 90, 30, 7).unwrap();
    let pairs = generate_pairs(&motions, &DatagenConfig { seed: 7, ..Default::default() }).unwrap();
    let pairs = &pairs[..8];
    let net = Denoiser::new(NetConfig { dim: PoseLayout::for_skeleton(&skel).dim(), ..NetConfig::default() }, 0).unwrap();
    let cfg = TrainConfig { batch_size: batch, optimizer: AdamConfig { learning_rate: lr, ..Default::default() }, ..Default::default() };
    let mut tr = Trainer::new(net, pairs, &cfg).unwrap();
    let init = tr.probe_loss(10, 1).unwrap();
    println!("init probe {init}");
    let t0 = std::time::Instant::now();
    for chunk in 0..(steps / 250) {
        let h = tr.run(250, 0).unwrap();
        let mean: f32 = h.iter().map(|s| s.loss).sum::<f32>() / h.len() as f32;
        let p = tr.probe_loss(10, 1).unwrap();
        println!("step {} mean {mean:.3e} probe {p:.3e} ratio {:.4} ({:?})", (chunk + 1) * 250, p / init, t0.elapsed());
    }
}
