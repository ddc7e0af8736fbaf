mod common;

use common::{desk_pairs, tiny_config};
use loosekey_model::autodiff::ParamId;
use loosekey_model::train::{pair_loss, PreparedPair};
use loosekey_model::{Denoiser, Mode, NetConfig, NoiseSchedule};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(seed: u64, shape: (usize, usize)) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn(shape, || rng.sample(rand_distr::StandardNormal))
}

fn grad_norm(grads: &loosekey_model::autodiff::Grads, ids: &[ParamId]) -> f32 {
    ids.iter()
        .map(|id| grads.get(*id).iter().map(|v| v * v).sum::<f32>())
        .sum::<f32>()
        .sqrt()
}

#[test]
fn initial_prediction_is_the_infilled_observation() {
    let pairs = desk_pairs(2, 5);
    let cfg = NetConfig {
        dim: common::desk_dim(),
        ..NetConfig::default()
    };
    let net = Denoiser::new(cfg, 11).unwrap();
    for pair in pairs.iter().take(3) {
        let p = PreparedPair::new(pair).unwrap();
        for t in [1, 50, 100] {
            let y_t = noise(t as u64, p.target.dim());
            let out = net.forward(y_t.view(), p.x_infilled.view(), &p.mask, t).unwrap();
            let w = out.w_raw.unwrap();
            assert!(w.iter().all(|&v| v == 1.0));
            assert!(out.delta.iter().all(|&v| v == 0.0));
            let err = out
                .composed
                .iter()
                .zip(p.x_infilled.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(err <= 1e-6, "max deviation {err}");
        }
    }
}

#[test]
fn both_heads_receive_gradients_after_one_step() {
    let pairs = desk_pairs(1, 6);
    let net = Denoiser::new(tiny_config(Mode::Lt), 3).unwrap();
    let schedule = NoiseSchedule::new(net.config().schedule, net.config().diffusion_steps).unwrap();
    let p = PreparedPair::new(&pairs[0]).unwrap();
    let n = noise(1, p.target.dim());
    let (loss, grads) = pair_loss(&net, &schedule, &p, 4, n.view()).unwrap();
    assert!(loss > 0.0);
    let (residual, warp) = net.head_params();
    assert!(grad_norm(&grads, &residual) > 0.0);
    assert!(grad_norm(&grads, &warp) > 0.0);
}

#[test]
fn residual_only_modes_have_no_warp_parameters() {
    for mode in [Mode::NoWarp, Mode::NoTime] {
        let net = Denoiser::new(tiny_config(mode), 0).unwrap();
        assert!(net.head_params().1.is_empty());
        assert!(net.params().iter().all(|(_, name, _)| !name.starts_with("warp_head")));
        let p = PreparedPair::new(&desk_pairs(1, 1)[0]).unwrap();
        let out = net.forward(p.target.view(), p.x_infilled.view(), &p.mask, 3).unwrap();
        assert!(out.w_raw.is_none());
        assert_eq!(out.composed, p.x_infilled);
    }
    let lt = Denoiser::new(tiny_config(Mode::Lt), 0).unwrap();
    let nw = Denoiser::new(tiny_config(Mode::NoWarp), 0).unwrap();
    assert!(lt.param_count() > nw.param_count());
}

#[test]
fn param_count_is_deterministic() {
    let a = Denoiser::new(NetConfig::default(), 1).unwrap();
    let b = Denoiser::new(NetConfig::default(), 2).unwrap();
    assert_eq!(a.param_count(), b.param_count());
    assert_eq!(
        Denoiser::new(NetConfig::default(), 1).unwrap().params(),
        a.params()
    );
}

fn perturbed(seed: u64) -> Denoiser {
    let mut net = Denoiser::new(tiny_config(Mode::Lt), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let ids: Vec<_> = net.params().iter().map(|(id, _, _)| id).collect();
    for id in ids {
        net.params_mut()
            .get_mut(id)
            .mapv_inplace(|v| v + 0.05 * rng.random_range(-1.0f32..1.0));
    }
    net
}

#[test]
fn batch_order_does_not_leak_between_items() {
    let net = perturbed(4);
    let pairs: Vec<PreparedPair> = desk_pairs(2, 9).iter().map(|p| PreparedPair::new(p).unwrap()).collect();
    let noises: Vec<Array2<f32>> = (0..pairs.len()).map(|i| noise(i as u64, pairs[0].target.dim())).collect();
    let items: Vec<_> = pairs
        .iter()
        .zip(&noises)
        .enumerate()
        .map(|(i, (p, n))| (n.view(), p.x_infilled.view(), p.mask.as_slice(), 1 + i % 10))
        .collect();
    let forward = net.forward_batch(&items).unwrap();
    let mut reversed = items.clone();
    reversed.reverse();
    let backward = net.forward_batch(&reversed).unwrap();
    for (i, out) in forward.iter().enumerate() {
        assert_eq!(out, &backward[items.len() - 1 - i]);
    }
    assert_eq!(forward.len(), pairs.len());
    assert_eq!(forward[0].delta.dim(), (60, common::desk_dim()));
    assert_eq!(forward[0].w_raw.as_ref().unwrap().len(), 60);
}

#[test]
fn forward_rejects_wrong_shapes() {
    let net = Denoiser::new(tiny_config(Mode::Lt), 0).unwrap();
    let y = Array2::<f32>::zeros((60, common::desk_dim() + 1));
    let x = Array2::<f32>::zeros((60, common::desk_dim()));
    let err = net.forward(y.view(), x.view(), &[false; 60], 1).unwrap_err();
    assert!(err.to_string().contains("shape mismatch"), "{err}");
    assert!(net.forward(x.view(), x.view(), &[false; 59], 1).is_err());
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let pair = PreparedPair::new(&desk_pairs(1, 2)[0]).unwrap();
    let net = Denoiser::new(tiny_config(Mode::Lt), 0).unwrap();
    let delta = &pair.target - &pair.x_infilled;
    let (loss, _) = net.loss_given_slopes(
        &Array1::ones(60),
        delta.view(),
        pair.x_infilled.view(),
        pair.target.view(),
    );
    assert!(loss < 1e-12, "{loss}");
}

#[test]
fn loss_gradient_wrt_warp_output_matches_finite_differences() {
    let pair = PreparedPair::new(&desk_pairs(1, 3)[0]).unwrap();
    let net = perturbed(7);
    let out = net.forward(pair.target.view(), pair.x_infilled.view(), &pair.mask, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // A half-frame lag then near-unit slopes keeps every sample time near a
    // half-integer, away from interpolation kinks and inside the clip.
    let mut w: Array1<f32> = Array1::from_shape_fn(60, |_| 1.0 + 0.002 * rng.random_range(-1.0f32..1.0));
    w[1] = 0.5;
    let (_, g) = net.loss_given_slopes(&w, out.delta.view(), pair.x_infilled.view(), pair.target.view());
    // Inside one interpolation segment the loss is quadratic in each slope,
    // so central differences are exact up to rounding.
    let h = 1e-2f32;
    let mut checked = 0;
    for i in 1..60 {
        let mut plus = w.clone();
        plus[i] += h;
        let mut minus = w.clone();
        minus[i] -= h;
        // Skip coordinates where a perturbation moves a sample time across an
        // integer frame, where the loss has a kink.
        let crosses = |a: &Array1<f32>, b: &Array1<f32>| {
            let (mut ta, mut tb) = (0.0f32, 0.0f32);
            (1..60).any(|f| {
                ta += a[f];
                tb += b[f];
                ta.floor() != tb.floor()
            })
        };
        if crosses(&plus, &minus) {
            continue;
        }
        let lp = net.loss_given_slopes(&plus, out.delta.view(), pair.x_infilled.view(), pair.target.view()).0 as f64;
        let lm = net.loss_given_slopes(&minus, out.delta.view(), pair.x_infilled.view(), pair.target.view()).0 as f64;
        let fd = (lp - lm) / (2.0 * h as f64);
        let rel = (g[i] as f64 - fd).abs() / (fd.abs() + 1e-6);
        assert!(rel < 1e-3 || (g[i] as f64 - fd).abs() < 1e-6, "slope {i}: analytic {} vs fd {fd}", g[i]);
        checked += 1;
    }
    assert!(checked > 20, "only {checked} smooth coordinates");
}

#[test]
fn forward_is_deterministic() {
    let net = perturbed(5);
    let p = PreparedPair::new(&desk_pairs(1, 4)[0]).unwrap();
    let a = net.forward(p.target.view(), p.x_infilled.view(), &p.mask, 6).unwrap();
    let b = net.forward(p.target.view(), p.x_infilled.view(), &p.mask, 6).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mask_channel_widens_the_condition_input() {
    let cfg = NetConfig {
        mask_channel: true,
        ..tiny_config(Mode::Lt)
    };
    let net = Denoiser::new(cfg, 0).unwrap();
    let id = net.params().id("cond_proj.weight").unwrap();
    assert_eq!(net.params().get(id).nrows(), common::desk_dim() + 1);
    let p = PreparedPair::new(&desk_pairs(1, 4)[0]).unwrap();
    let out = net.forward(p.target.view(), p.x_infilled.view(), &p.mask, 6).unwrap();
    assert!(out.composed.iter().all(|v| v.is_finite()));
}

#[test]
fn config_validation_lists_every_problem() {
    let cfg = NetConfig {
        latent: 30,
        heads: 4,
        slope_floor: 0.0,
        diffusion_steps: 0,
        ..NetConfig::default()
    };
    let v = cfg.violations("net.");
    assert_eq!(v.len(), 3, "{v:?}");
    assert!(Denoiser::new(cfg, 0).is_err());
}
