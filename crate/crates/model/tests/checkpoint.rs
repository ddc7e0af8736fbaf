mod common;

use common::{desk_pairs, tiny_config};
use loosekey_model::checkpoint::{decode_checkpoint, encode_checkpoint, load, save, CheckpointHeader};
use loosekey_model::train::PreparedPair;
use loosekey_model::{Denoiser, Mode, ModelError, NetConfig, TrainConfig, Trainer};

fn header(net: &Denoiser) -> CheckpointHeader {
    CheckpointHeader {
        net: net.config().clone(),
        steps: 3,
        config_hash: Some("abc123".into()),
        metadata: Default::default(),
    }
}

fn trained() -> Denoiser {
    let pairs = desk_pairs(1, 1);
    let mut trainer = Trainer::new(
        Denoiser::new(tiny_config(Mode::Lt), 1).unwrap(),
        &pairs,
        &TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    trainer.run(3, 0).unwrap();
    trainer.into_net()
}

#[test]
fn save_load_forward_is_bit_exact() {
    let net = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.lkck");
    save(&net, &header(&net), &path).unwrap();
    let ck = load(&path, Some(net.config())).unwrap();
    assert_eq!(ck.header, header(&net));
    assert_eq!(ck.net.params(), net.params());
    let p = PreparedPair::new(&desk_pairs(1, 2)[0]).unwrap();
    let a = net.forward(p.target.view(), p.x_infilled.view(), &p.mask, 5).unwrap();
    let b = ck.net.forward(p.target.view(), p.x_infilled.view(), &p.mask, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(encode_checkpoint(&ck.net, &ck.header), std::fs::read(&path).unwrap());
}

#[test]
fn load_with_wrong_dim_names_both_values() {
    let net = Denoiser::new(tiny_config(Mode::Lt), 0).unwrap();
    let bytes = encode_checkpoint(&net, &header(&net));
    let expected = NetConfig {
        dim: 236,
        ..tiny_config(Mode::Lt)
    };
    let err = decode_checkpoint(&bytes, Some(&expected)).unwrap_err();
    assert!(matches!(err, ModelError::Incompatible { field: "dim", .. }));
    let msg = err.to_string();
    assert!(msg.contains("236") && msg.contains(&common::desk_dim().to_string()), "{msg}");
}

#[test]
fn mode_mismatch_is_rejected() {
    let net = Denoiser::new(tiny_config(Mode::NoWarp), 0).unwrap();
    let bytes = encode_checkpoint(&net, &header(&net));
    let err = decode_checkpoint(&bytes, Some(&tiny_config(Mode::Lt))).unwrap_err();
    assert!(err.to_string().contains("mode"), "{err}");
}

#[test]
fn corrupt_files_are_rejected() {
    let net = Denoiser::new(tiny_config(Mode::Lt), 0).unwrap();
    let bytes = encode_checkpoint(&net, &header(&net));
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1], None).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad, None).is_err());
    let mut v2 = bytes.clone();
    v2[4] = 2;
    let err = decode_checkpoint(&v2, None).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
    let mut extra = bytes;
    extra.push(0);
    assert!(decode_checkpoint(&extra, None).is_err());
}

#[test]
fn header_and_tensors_must_agree() {
    // Tensors from an LT network under a NoWarp header.
    let lt = Denoiser::new(tiny_config(Mode::Lt), 0).unwrap();
    let mut h = header(&lt);
    h.net.mode = Mode::NoWarp;
    let bytes = encode_checkpoint(&lt, &h);
    assert!(matches!(
        decode_checkpoint(&bytes, None),
        Err(ModelError::Incompatible { .. })
    ));
}
