mod common;

use common::*;
use compressive_mbn::container::{decode, encode, peek_kind, MAGIC};
use compressive_mbn::mlp::seeded_init;
use compressive_mbn::*;
use proptest::prelude::*;

fn small_mbn() -> Mbn {
    let x = uniform_matrix(30, 5, -1.0, 1.0, 3);
    train_mbn(&x, &MbnConfig { k_schedule: vec![6, 3], clusterings_per_layer: 4, feature_fraction: 0.6, reconstruction_rate: 0.5, seed: 3 })
        .unwrap()
}

fn small_mlp() -> Mlp {
    let config = MlpConfig {
        layer_sizes: vec![5, 7, 2],
        output_activation: OutputActivation::Sigmoid,
        dropout_rate: 0.2,
        learning_rate: 0.1,
        batch_size: 4,
        epochs: 3,
        seed: 5,
    };
    seeded_init(&config).unwrap()
}

fn every_kind() -> Vec<(ModelKind, Vec<u8>)> {
    let x = uniform_matrix(30, 5, -1.0, 1.0, 4);
    let pca: Pca = fit_empca(&x, &EmpcaConfig::new(2, 4)).unwrap();
    let km: Kmeans = kmeans(&x, &KmeansConfig::new(3, 4)).unwrap();
    vec![
        (ModelKind::Mbn, encode(&small_mbn())),
        (ModelKind::Pca, encode(&pca)),
        (ModelKind::Mlp, encode(&small_mlp())),
        (ModelKind::Kmeans, encode(&km)),
    ]
}

/// Decodes as whichever type the header names and re-encodes.
fn reencode(bytes: &[u8]) -> Result<Vec<u8>> {
    Ok(match peek_kind(bytes)? {
        ModelKind::Mbn => encode(&decode::<Mbn>(bytes)?),
        ModelKind::Pca => encode(&decode::<Pca>(bytes)?),
        ModelKind::Mlp => encode(&decode::<Mlp>(bytes)?),
        ModelKind::Kmeans => encode(&decode::<Kmeans>(bytes)?),
    })
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for (kind, bytes) in every_kind() {
        assert_eq!(peek_kind(&bytes).unwrap(), kind);
        assert_eq!(reencode(&bytes).unwrap(), bytes, "{}", kind.name());
        let path = dir.path().join(kind.name());
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), reencode(&std::fs::read(&path).unwrap()).unwrap());
    }
    let mlp = small_mlp();
    let path = dir.path().join("mlp.cmbn");
    save_model(&path, &mlp).unwrap();
    assert_eq!(load_model::<Mlp>(&path).unwrap(), mlp);
}

#[test]
fn loaded_teacher_transforms_identically() {
    let mbn = small_mbn();
    let back: Mbn = decode(&encode(&mbn)).unwrap();
    let x = uniform_matrix(12, 5, -1.0, 1.0, 8);
    assert_eq!(back.transform(&x).unwrap(), mbn.transform(&x).unwrap());
}

#[test]
fn wrong_kind_is_named() {
    let bytes = encode(&small_mlp());
    match decode::<Pca>(&bytes) {
        Err(Error::KindMismatch { expected, found }) => assert_eq!((expected.as_str(), found.as_str()), ("pca", "mlp")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn header_damage_is_classified() {
    let bytes = encode(&small_mlp());
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(matches!(decode::<Mlp>(&bad_magic), Err(Error::Format(_))));
    let mut future = bytes.clone();
    future[4] = 9;
    assert!(matches!(decode::<Mlp>(&future), Err(Error::Version { found: 9, .. })));
    assert!(matches!(decode::<Mlp>(&bytes[..MAGIC.len() + 2]), Err(Error::Checksum { .. })));
    assert!(matches!(decode::<Mlp>(&[]), Err(Error::Format(_))));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_model::<Mlp>(dir.path().join("absent.cmbn")), Err(Error::Io { .. })));
}

proptest! {
    #![proptest_config(cases(200))]

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256), prefix in any::<bool>()) {
        let bytes = if prefix { [MAGIC.as_slice(), &1u32.to_le_bytes(), &bytes].concat() } else { bytes };
        let _ = reencode(&bytes);
    }

    #[test]
    fn any_flipped_payload_bit_is_detected(which in 0usize..4, pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let (_, bytes) = every_kind().swap_remove(which);
        let i = 16 + pos.index(bytes.len() - 16);
        let mut damaged = bytes.clone();
        damaged[i] ^= 1 << bit;
        prop_assert!(reencode(&damaged).is_err());
    }

    #[test]
    fn any_truncation_is_detected(which in 0usize..4, cut in any::<prop::sample::Index>()) {
        let (_, bytes) = every_kind().swap_remove(which);
        let keep = cut.index(bytes.len());
        prop_assert!(reencode(&bytes[..keep]).is_err());
    }
}
