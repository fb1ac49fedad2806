use std::fs;

use klens::model_io::{load_model, save_model};
use klens::net::build_toy_deep_net;
use klens::rng::SplitMix64;
use klens::Error;

// Every single-byte flip must either be caught or leave the loaded weights
// untouched. The CRC covers the whole blob, so in practice all are caught.
#[test]
fn single_byte_corruption_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("deep.json");
    let blob_path = dir.path().join("deep.bin");
    let net = build_toy_deep_net(3);
    save_model(&net, &manifest, &blob_path).unwrap();
    let clean = fs::read(&blob_path).unwrap();
    assert_eq!(load_model(&manifest, &blob_path).unwrap(), net);

    let mut rng = SplitMix64::new(2024);
    let mut caught = 0;
    for _ in 0..100 {
        let mut blob = clean.clone();
        let at = rng.below(blob.len());
        let flip = 1 + rng.below(255) as u8;
        blob[at] ^= flip;
        fs::write(&blob_path, &blob).unwrap();
        match load_model(&manifest, &blob_path) {
            Err(Error::Checksum { expected, actual }) => {
                assert_ne!(expected, actual);
                caught += 1;
            }
            Err(e) => panic!("unexpected error kind: {e}"),
            Ok(loaded) => assert_eq!(loaded, net, "corruption at byte {at} went unnoticed"),
        }
    }
    assert_eq!(caught, 100);
}

#[test]
fn truncated_blob_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("deep.json");
    let blob_path = dir.path().join("deep.bin");
    save_model(&build_toy_deep_net(0), &manifest, &blob_path).unwrap();
    let blob = fs::read(&blob_path).unwrap();
    fs::write(&blob_path, &blob[..blob.len() - 4]).unwrap();
    assert!(load_model(&manifest, &blob_path).is_err());
}
