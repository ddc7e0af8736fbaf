//! Trains LT and NoWarp on synthetic pairs and compares keypose retiming and
//! smoothness on a held-out set.
//!
//! Usage: retime [steps] [learning_rate] [batch] [out_dir]

use std::path::PathBuf;
use std::time::Instant;

use loosekey_core::datagen::{generate_pairs, synth_source_motions, DatagenConfig};
use loosekey_core::{PoseLayout, Skeleton};
use loosekey_model::checkpoint::{save, CheckpointHeader};
use loosekey_model::optim::AdamConfig;
use loosekey_model::{evaluate, Denoiser, EvalConfig, Generator, Mode, NetConfig, TrainConfig, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let lr: f32 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5e-4);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);
    let out = PathBuf::from(args.get(4).cloned().unwrap_or_else(|| "/tmp/retime".into()));
    std::fs::create_dir_all(&out).unwrap();

    let skel = Skeleton::desk();
    let dim = PoseLayout::for_skeleton(&skel).dim();
    let datagen = DatagenConfig::default();
    let train_pairs = generate_pairs(&synth_source_motions(64, &skel, 240, 30, 0).unwrap(), &datagen).unwrap();
    let mut test_pairs = generate_pairs(&synth_source_motions(32, &skel, 240, 30, 1_000_003).unwrap(), &datagen).unwrap();
    test_pairs.truncate(200);
    println!("train pairs {} test pairs {}", train_pairs.len(), test_pairs.len());

    let eval_cfg = EvalConfig::default();
    let interp = evaluate(&Generator::Interp, &test_pairs, &skel, &eval_cfg).unwrap();
    println!("interp retimed {:.3}", interp.retimed_fraction(2));

    for mode in [Mode::Lt, Mode::NoWarp] {
        let t0 = Instant::now();
        let net = Denoiser::new(NetConfig { dim, mode, ..NetConfig::default() }, 0).unwrap();
        let cfg = TrainConfig {
            steps,
            batch_size: batch,
            optimizer: AdamConfig { learning_rate: lr, ..Default::default() },
            ..Default::default()
        };
        let mut tr = Trainer::new(net, &train_pairs, &cfg).unwrap();
        let mut done = 0;
        while done < steps {
            let n = 500.min(steps - done);
            let h = tr.run(n, 0).unwrap();
            done += n;
            let mean: f32 = h.iter().map(|s| s.loss).sum::<f32>() / h.len() as f32;
            println!("{mode} step {done} loss {mean:.4e} ({:.0?})", t0.elapsed());
        }
        let net = tr.into_net();
        let header = CheckpointHeader { net: net.config().clone(), steps, config_hash: None, metadata: Default::default() };
        save(&net, &header, &out.join(format!("{mode}.lkck"))).unwrap();
        let ev = evaluate(&Generator::Model { net: &net, imputation: None }, &test_pairs, &skel, &eval_cfg).unwrap();
        let r = &ev.report;
        println!(
            "{mode} retimed {:.3} acc_g {:.5} jerk_g {:.5} acc_l {:.5} jerk_l {:.5} kpe {:.4} pos_g {:.4} ({:.0?})",
            ev.retimed_fraction(2),
            r.l2_acc_g,
            r.l2_jerk_g,
            r.l2_acc_l,
            r.l2_jerk_l,
            r.kpe,
            r.l2_pos_g,
            t0.elapsed()
        );
    }
    println!(
        "interp acc_g {:.5} jerk_g {:.5} kpe {:.4} pos_g {:.4}",
        interp.report.l2_acc_g, interp.report.l2_jerk_g, interp.report.kpe, interp.report.l2_pos_g
    );
}
