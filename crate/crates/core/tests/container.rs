use std::path::PathBuf;

use mmf_core::container::{
    self, make_random_model, make_random_model_with, make_zero_model, read_header, ContainerError, DType,
    RandomModelSpec,
};

fn golden() -> Vec<u8> {
    std::fs::read(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden.mmfl")).unwrap()
}

#[test]
fn golden_file_is_stable() {
    let bytes = golden();
    let m = container::from_bytes(&bytes).unwrap();
    assert_eq!(container::to_bytes(&m), bytes);
    let cfg = m.config();
    assert_eq!((cfg.d, cfg.n_blocks, cfg.hidden_dim, cfg.vocab_size), (8, 1, 16, 16));
}

#[test]
fn save_load_through_filesystem() {
    let m = make_random_model(16, 2, 32, 24, 3, 0.354).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.mmfl");
    container::save(&m, &p).unwrap();
    assert_eq!(container::load(&p).unwrap(), m);
    let missing = container::load(dir.path().join("nope.mmfl")).unwrap_err();
    assert!(missing.is_io());
}

#[test]
fn invalid_trit_code_rejected() {
    let mut bytes = golden();
    let (h, start) = read_header(&bytes).unwrap();
    let e = h.tensors.iter().find(|e| e.dtype == DType::Trit2).unwrap();
    bytes[start + e.offset as usize] |= 0b11;
    match container::from_bytes(&bytes) {
        Err(ContainerError::InvalidTrit(msg)) => assert!(msg.starts_with(&format!("{}:", e.name)), "{msg}"),
        other => panic!("expected InvalidTrit, got {other:?}"),
    }
}

#[test]
fn truncation_rejected_at_every_length() {
    let bytes = golden();
    for n in (0..bytes.len()).step_by(7) {
        assert!(container::from_bytes(&bytes[..n]).is_err(), "accepted {n} bytes");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(container::from_bytes(&long).is_err());
}

#[test]
fn bad_magic_and_version() {
    let mut bytes = golden();
    bytes[0] = b'X';
    assert!(matches!(container::from_bytes(&bytes), Err(ContainerError::BadMagic(_))));
    let mut bytes = golden();
    bytes[4] = 2;
    assert!(matches!(container::from_bytes(&bytes), Err(ContainerError::Version(2))));
}

/// Rewrites the header JSON and its digest so only the directory check can fire.
fn with_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    use sha2::{Digest, Sha256};
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut v: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
    edit(&mut v);
    let json = serde_json::to_vec(&v).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&Sha256::digest(&json));
    out.extend_from_slice(&bytes[12 + hlen + 32..]);
    out
}

#[test]
fn directory_mismatches_rejected() {
    let bytes = golden();
    assert_eq!(container::from_bytes(&with_header(&bytes, |_| {})).unwrap(), container::from_bytes(&bytes).unwrap());

    let swapped = with_header(&bytes, |v| v["tensors"].as_array_mut().unwrap().swap(1, 2));
    assert!(matches!(container::from_bytes(&swapped), Err(ContainerError::Directory(_))));

    let shape = with_header(&bytes, |v| v["tensors"][0]["shape"][0] = 17.into());
    assert!(matches!(container::from_bytes(&shape), Err(ContainerError::Directory(_))));

    let dropped = with_header(&bytes, |v| {
        v["tensors"].as_array_mut().unwrap().pop();
    });
    assert!(matches!(container::from_bytes(&dropped), Err(ContainerError::Directory(_))));

    let wider = with_header(&bytes, |v| v["config"]["d"] = 16.into());
    assert!(container::from_bytes(&wider).is_err());

    let extra = with_header(&bytes, |v| v["config"]["colour"] = "blue".into());
    assert!(matches!(container::from_bytes(&extra), Err(ContainerError::Header(_))));
}

#[test]
fn same_seed_same_bytes() {
    let a = container::to_bytes(&make_random_model(8, 2, 16, 16, 11, 0.354).unwrap());
    let b = container::to_bytes(&make_random_model(8, 2, 16, 16, 11, 0.354).unwrap());
    let c = container::to_bytes(&make_random_model(8, 2, 16, 16, 12, 0.354).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn zero_fraction_hits_target() {
    let m = make_random_model(64, 2, 128, 64, 5, 0.354).unwrap();
    let (mut zeros, mut total) = (0.0, 0.0);
    for (_, w) in m.named_matrices() {
        let n = (w.rows() * w.cols()) as f64;
        zeros += w.zero_fraction() * n;
        total += n;
    }
    let zf = zeros / total;
    assert!((zf - 0.354).abs() <= 0.02, "aggregate zero fraction {zf}");
}

#[test]
fn full_sparsity_gives_all_zero_weights() {
    let mut spec = RandomModelSpec::new(8, 1, 16, 16, 1, 1.0);
    spec.calib_seqs = 1;
    let m = make_random_model_with(&spec).unwrap();
    assert!(m.named_matrices().iter().all(|(_, w)| w.nnz() == 0));
}

#[test]
fn zero_model_round_trips() {
    let m = make_zero_model(4, 1, 8, 5).unwrap();
    assert_eq!(container::from_bytes(&container::to_bytes(&m)).unwrap(), m);
}
