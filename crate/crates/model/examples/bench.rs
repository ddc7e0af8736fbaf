use loosekey_model::{Denoiser, Mode, NetConfig};
use ndarray::Array2;
fn run(cfg: NetConfig, label: &str) {
    let net = Denoiser::new(cfg, 1).unwrap();
    let y = Array2::<f32>::from_shape_fn((60, 79), |(i, j)| ((i * 7 + j) % 13) as f32 * 0.1);
    let mask = vec![false; 60];
    let t0 = std::time::Instant::now();
    for _ in 0..20 { net.forward(y.view(), y.view(), &mask, 5).unwrap(); }
    let f = t0.elapsed() / 20;
    let t0 = std::time::Instant::now();
    for _ in 0..20 { net.loss_and_grads(y.view(), y.view(), &mask, 5, y.view()).unwrap(); }
    println!("{label}: params {} fwd {:?} fwd+bwd {:?}", net.param_count(), f, t0.elapsed() / 20);
}
fn main() {
    run(NetConfig::default(), "default");
    run(NetConfig { layers: 0, ..NetConfig::default() }, "0 layers");
    run(NetConfig { mode: Mode::NoWarp, ..NetConfig::default() }, "nowarp");
    run(NetConfig { layers: 1, mode: Mode::NoWarp, ..NetConfig::default() }, "1 layer nowarp");
}
