use std::path::Path;

use proptest::prelude::*;
use rfp_cli::checkpoint::{Checkpoint, TrainState};
use rfp_cli::config::RunConfig;
use rfp_cli::volume::{Payload, VolumeFile};
use rfp_core::segnet::{AdamW, AdamWConfig, SegNet};

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_overrides(&["input_shape=16x16x16", "stage_channels=2,2,2,2,2", "num_classes=3", "synth_structures=2"])
        .unwrap();
    c
}

fn volume_strategy() -> impl Strategy<Value = VolumeFile> {
    (1usize..5, 1usize..5, 1usize..5, any::<bool>(), any::<u64>()).prop_map(|(h, w, d, labels, seed)| {
        let n = h * w * d;
        let payload = if labels {
            Payload::U8((0..n).map(|i| ((i as u64 ^ seed) % 7) as u8).collect())
        } else {
            Payload::F32((0..n).map(|i| ((i as u64).wrapping_mul(seed) % 1000) as f32 * 0.37 - 100.0).collect())
        };
        VolumeFile::new(vec![h, w, d], [0.8, 0.8, 2.5], payload).unwrap()
    })
}

proptest! {
    #[test]
    fn volume_round_trips(v in volume_strategy()) {
        let bytes = v.to_bytes();
        prop_assert_eq!(&bytes[..4], b"RFPV");
        let back = VolumeFile::from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back, v);
    }

    #[test]
    fn truncated_volumes_are_rejected(v in volume_strategy(), cut in 1usize..16) {
        let bytes = v.to_bytes();
        let cut = cut.min(bytes.len());
        prop_assert!(VolumeFile::from_bytes(&bytes[..bytes.len() - cut], Path::new("mem")).is_err());
    }
}

#[test]
fn volume_header_layout() {
    let v = VolumeFile::new(vec![2, 1, 3], [1.0, 2.0, 3.0], Payload::U8(vec![0, 1, 2, 3, 4, 5])).unwrap();
    let b = v.to_bytes();
    assert_eq!(&b[..4], b"RFPV");
    assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
    assert_eq!(b[8], 1);
    assert_eq!(b[9], 3);
    assert_eq!(b.len(), 4 + 4 + 1 + 1 + 12 + 12 + 6);
    assert_eq!(&b[b.len() - 6..], &[0, 1, 2, 3, 4, 5]);
}

#[test]
fn bad_volumes_are_rejected() {
    let good = VolumeFile::new(vec![2, 2, 1], [1.0; 3], Payload::F32(vec![1.0; 4])).unwrap().to_bytes();
    let p = Path::new("mem");
    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(VolumeFile::from_bytes(&magic, p).is_err());
    let mut version = good.clone();
    version[4] = 9;
    assert!(VolumeFile::from_bytes(&version, p).is_err());
    let mut dtype = good.clone();
    dtype[8] = 7;
    assert!(VolumeFile::from_bytes(&dtype, p).is_err());
    let mut trailing = good.clone();
    trailing.push(0);
    assert!(VolumeFile::from_bytes(&trailing, p).is_err());
    assert!(VolumeFile::new(vec![2, 2], [1.0; 3], Payload::U8(vec![0; 3])).is_err());
}

fn checkpoint(seed: u64) -> (RunConfig, SegNet<f32>, Checkpoint) {
    let cfg = tiny_config();
    let net = SegNet::<f32>::new(cfg.network.clone(), seed).unwrap();
    let opt = AdamW::new(&net.store, AdamWConfig::default());
    let state = TrainState {
        epoch: 3,
        best_dsc: 0.25,
        best_epoch: 2,
    };
    let ck = Checkpoint::capture(&cfg, &net, &opt, state);
    (cfg, net, ck)
}

#[test]
fn checkpoint_round_trips() {
    let (cfg, net, ck) = checkpoint(5);
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..4], b"RFPC");
    assert_eq!(&bytes[8..40], &cfg.digest());
    let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.config().unwrap(), cfg);
    let st = back.state().unwrap();
    assert_eq!((st.epoch, st.best_dsc, st.best_epoch), (3, 0.25, 2));
    assert_eq!(back.meta_value::<f64>("opt.weight_decay").unwrap(), 3e-4);
    assert_eq!(back.meta_value::<f64>("opt.base_lr").unwrap(), 1e-3);

    let restored = back.network().unwrap();
    for (a, b) in net.store.iter().zip(restored.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let (_, _, ck) = checkpoint(1);
    let bytes = ck.to_bytes();
    let p = Path::new("mem");
    for cut in [1, 7, bytes.len() / 2] {
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - cut], p).is_err());
    }
    let mut magic = bytes.clone();
    magic[3] = b'V';
    assert!(Checkpoint::from_bytes(&magic, p).is_err());
    let mut trailing = bytes;
    trailing.extend_from_slice(&[1, 2, 3]);
    assert!(Checkpoint::from_bytes(&trailing, p).is_err());
}

#[test]
fn loading_into_a_different_architecture_fails() {
    let (_, _, ck) = checkpoint(1);
    let mut other = tiny_config();
    other.set("dag_count", "2").unwrap();
    let mut net = SegNet::<f32>::new(other.network, 1).unwrap();
    assert!(ck.load_weights(&mut net).is_err());
}

#[test]
fn config_digest_tracks_values() {
    let a = tiny_config();
    let b = RunConfig::parse_str(&a.canonical()).unwrap();
    assert_eq!(a.digest(), b.digest());
    let mut c = a.clone();
    c.set("seed", "9").unwrap();
    assert_ne!(a.digest(), c.digest());
    assert!(RunConfig::parse_str("no_such_key=1").is_err());
    assert!(RunConfig::parse_str("seed").is_err());
    assert!(RunConfig::parse_str("# comment\n\nseed = 4\n").unwrap().seed == 4);
}
