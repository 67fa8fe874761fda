//! Central finite differences against the hand-written backward pass.

use dgt_core::micronet::{self, NetConfig, NetworkParams};
mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn reference_forward_matches_network() {
    let cfg = NetConfig {
        width: 32,
        height: 16,
        ..NetConfig::default()
    };
    let params = NetworkParams::init(&cfg, 3).unwrap();
    let s = common::random_sample(8, 16, 32);
    let ours = micronet::forward_segment(&params, &s.frame, &s.ref_frame, &s.ref_mask).unwrap();
    let reference = common::RefNet::from_params(&params).forward(
        &common::Map::from_tensor(&s.frame),
        &common::Map::from_tensor(&s.ref_frame),
        &common::Map::from_tensor(&s.ref_mask),
    );
    for (a, b) in ours.data().iter().zip(&reference.d) {
        assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn backward_matches_central_differences_small_input() {
    let cfg = NetConfig {
        width: 32,
        height: 16,
        ..NetConfig::default()
    };
    let params = NetworkParams::init(&cfg, 21).unwrap();
    let s = common::random_sample(4, 16, 32);
    let (_, grads) = micronet::backward(&params, std::slice::from_ref(&s)).unwrap();
    let net = common::RefNet::from_params(&params);
    let h = 1e-6f64;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut worst = 0.0f64;
    for (ti, name) in names.iter().enumerate() {
        let len = grads.tensors[ti].len();
        for _ in 0..8 {
            let k = rng.random_range(0..len);
            let mut plus = net.clone();
            plus.tensor_mut(ti)[k] += h;
            let mut minus = net.clone();
            minus.tensor_mut(ti)[k] -= h;
            let fd = (plus.loss(&s) - minus.loss(&s)) / (2.0 * h);
            let an = grads.tensors[ti].data()[k] as f64;
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            worst = worst.max(err);
            assert!(err < 1e-2, "{name}[{k}]: analytic {an:e} vs fd {fd:e}");
        }
    }
    eprintln!("worst relative error {worst:e}");
}

#[test]
fn training_step_timing() {
    let params = NetworkParams::init(&NetConfig::default(), 0).unwrap();
    let s = common::random_sample(1, 48, 64);
    let t = std::time::Instant::now();
    for _ in 0..10 {
        micronet::backward(&params, std::slice::from_ref(&s)).unwrap();
    }
    eprintln!("full backward {:?}/sample", t.elapsed() / 10);
    let feats = micronet::encode_context(&params, &s.frame, &s.ref_frame, &s.ref_mask).unwrap();
    let t = std::time::Instant::now();
    for _ in 0..10 {
        micronet::encode_context(&params, &s.frame, &s.ref_frame, &s.ref_mask).unwrap();
    }
    eprintln!("encode {:?}/sample", t.elapsed() / 10);
    let t = std::time::Instant::now();
    for _ in 0..10 {
        micronet::features_loss_and_grads(&params, &feats, &s.gt, 1, false);
    }
    eprintln!("decoder backward {:?}/sample", t.elapsed() / 10);
    let t = std::time::Instant::now();
    for _ in 0..10 {
        micronet::decode(&params, &feats);
    }
    eprintln!("decode {:?}/sample", t.elapsed() / 10);
}
