use meta_core::adapter::{AdapterConfig, AdapterState};
use meta_core::io::{decode_tensor, encode_tensor, load_checkpoint, read_tensor, restore_into, save_checkpoint, write_tensor, Manifest, MANIFEST};
use meta_core::mea::MeaConfig;
use meta_core::tensor::Tensor;

fn tiny() -> AdapterConfig {
    AdapterConfig { mea: MeaConfig { width: 8, head_count: 2, ..MeaConfig::default() }, ..AdapterConfig::default() }
}

#[test]
fn tensor_files_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::<f64>::from_fn(&[2, 3, 1, 4], |i| (i as f64 * 0.37).sin() * 1e-7 + i as f64);
    let path = dir.path().join("t.mett");
    write_tensor(&path, &t).unwrap();
    let back: Tensor<f64> = read_tensor(&path).unwrap();
    assert_eq!(back.dims(), t.dims());
    assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let f = Tensor::<f32>::from_fn(&[5], |i| i as f32 / 3.0);
    let widened: Tensor<f64> = decode_tensor(&encode_tensor(&f)).unwrap();
    assert!(widened.data().iter().zip(f.data()).all(|(a, b)| *a == *b as f64));
}

#[test]
fn corrupt_files_are_rejected() {
    let good = encode_tensor(&Tensor::<f32>::zeros(&[2, 2]));
    assert!(decode_tensor::<f32>(&good[..good.len() - 1]).is_err());
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(decode_tensor::<f32>(&bad).is_err());
    let mut bad = good.clone();
    bad[4] = 9;
    assert!(decode_tensor::<f32>(&bad).is_err());
    let mut bad = good.clone();
    bad[5] = 7;
    assert!(decode_tensor::<f32>(&bad).is_err());
    let mut huge = good[..7].to_vec();
    huge[6] = 4;
    for _ in 0..4 {
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
    }
    assert!(decode_tensor::<f32>(&huge).is_err());
}

#[test]
fn checkpoint_round_trip_restores_every_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let state = AdapterState::<f32>::init(tiny(), 3).unwrap();
    let manifest = save_checkpoint(dir.path(), &state.store).unwrap();
    assert_eq!(manifest.tensors.len(), state.store.len());
    let text = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
    let parsed: Manifest = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, manifest);

    let loaded = load_checkpoint::<f32>(dir.path()).unwrap();
    for ((_, a), (_, b)) in state.store.iter().zip(loaded.iter()) {
        assert_eq!((&a.name, a.role, a.component), (&b.name, b.role, b.component));
        assert_eq!(a.value.data(), b.value.data());
    }

    let mut other = AdapterState::<f32>::init(tiny(), 4).unwrap();
    restore_into(dir.path(), &mut other.store).unwrap();
    for ((_, a), (_, b)) in state.store.iter().zip(other.store.iter()) {
        assert_eq!(a.value.data(), b.value.data());
    }
}

#[test]
fn mismatched_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let state = AdapterState::<f32>::init(tiny(), 3).unwrap();
    save_checkpoint(dir.path(), &state.store).unwrap();
    let wider = AdapterConfig { mea: MeaConfig { width: 16, head_count: 2, ..MeaConfig::default() }, ..AdapterConfig::default() };
    let mut other = AdapterState::<f32>::init(wider, 3).unwrap();
    assert!(restore_into(dir.path(), &mut other.store).is_err());

    let path = dir.path().join(MANIFEST);
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    v["tensors"][0]["extra"] = serde_json::json!(1);
    std::fs::write(&path, v.to_string()).unwrap();
    assert!(load_checkpoint::<f32>(dir.path()).is_err());
}
