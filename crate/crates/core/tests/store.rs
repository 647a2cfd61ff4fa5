use irisnet::store::{self, FreezeMode};
use irisnet::{Error, Model, ModelSpec, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TINY: &str = "\
variant=tiny
input_size=8
stem=in:3,out:2,kernel:3,stride:2,padding:1
stage=blocks:1,kind:basic,in:2,mid:2,out:2,stride:1,projection:false
head_classes=2
";

fn tiny() -> Model {
    Model::build(ModelSpec::from_config_str(TINY).unwrap(), 3).unwrap()
}

/// A micro model with non-default buffers, so every tensor kind carries data.
fn trained_looking_micro() -> Model {
    let mut m = Model::build(ModelSpec::resnet_micro(5), 11).unwrap();
    m.set_input_normalization(&[0.4, 0.5, 0.6], &[0.2, 0.25, 0.3])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in m.buffers_mut().values_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(0.0f32..0.5));
    }
    m
}

fn probe_images(size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data = (0..2 * 3 * size * size)
        .map(|_| rng.random_range(0.0f32..1.0))
        .collect();
    Tensor::from_vec(&[2, 3, size, size], data).unwrap()
}

#[test]
fn save_load_save_is_a_bytewise_fixpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    let model = trained_looking_micro();
    store::save(&model, &a).unwrap();
    let loaded = store::load(&a).unwrap();
    store::save(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    for (name, t) in model.tensors() {
        assert!(t.bit_eq(loaded.tensors()[name]), "{name}");
    }
}

#[test]
fn file_size_follows_from_the_spec_shapes() {
    let model = trained_looking_micro();
    let spec = model.spec();
    let header = 8 + 4 + 4 + spec.to_config_string().len();
    let records: usize = spec
        .parameter_shapes()
        .into_iter()
        .chain(spec.buffer_shapes())
        .map(|(name, shape)| {
            4 + name.len() + 4 + 8 * shape.len() + 4 * shape.iter().product::<usize>()
        })
        .sum();
    assert_eq!(store::encode(&model).len(), header + records + 4);
}

#[test]
fn round_trip_logits_are_bit_equal() {
    let model = trained_looking_micro();
    let loaded = store::decode(&store::encode(&model)).unwrap();
    let x = probe_images(32);
    assert!(model
        .logits(&x)
        .unwrap()
        .bit_eq(&loaded.logits(&x).unwrap()));
}

#[test]
fn every_single_byte_corruption_is_detected() {
    let bytes = store::encode(&tiny());
    let mut copy = bytes.clone();
    for pos in 0..bytes.len() {
        for delta in 1..=255u8 {
            copy[pos] = bytes[pos] ^ delta;
            assert!(
                store::decode(&copy).is_err(),
                "byte {pos} xor {delta:#04x} went unnoticed"
            );
        }
        copy[pos] = bytes[pos];
    }
}

#[test]
fn every_truncation_is_detected() {
    let bytes = store::encode(&tiny());
    for len in 0..bytes.len() {
        assert!(store::decode(&bytes[..len]).is_err(), "truncated to {len}");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(store::decode(&longer).is_err());
}

#[test]
fn header_errors_are_classified() {
    let bytes = store::encode(&tiny());
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(store::decode(&bad_magic), Err(Error::BadMagic)));
    let mut flipped = bytes.clone();
    let last = flipped.len() - 10;
    flipped[last] ^= 1;
    assert!(matches!(
        store::decode(&flipped),
        Err(Error::CorruptPayload(_))
    ));
    let mut future = bytes[..bytes.len() - 4].to_vec();
    future[8..12].copy_from_slice(&2u32.to_le_bytes());
    let crc = crc32fast::hash(&future);
    future.extend_from_slice(&crc.to_le_bytes());
    assert!(matches!(
        store::decode(&future),
        Err(Error::VersionUnsupported(2))
    ));
}

#[test]
fn unwritable_destination_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing").join("w.bin");
    assert!(matches!(store::save(&tiny(), &path), Err(Error::Io { .. })));
    assert!(matches!(store::load(&path), Err(Error::Io { .. })));
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn transfer_modes_and_backbone_preservation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("src.bin");
    let source = trained_looking_micro();
    store::save(&source, &path).unwrap();

    let full = store::transfer(&path, 224, FreezeMode::FullFinetune, 7).unwrap();
    assert!(full.frozen().is_empty());
    assert_eq!(full.head_weight().shape(), &[64, 224]);

    let fe = store::transfer(&path, 10, FreezeMode::FeatureExtractor, 7).unwrap();
    for name in fe.params().keys() {
        assert_eq!(fe.is_frozen(name), !name.starts_with("head."), "{name}");
    }
    for (name, t) in source.tensors() {
        if !name.starts_with("head.") {
            assert!(t.bit_eq(fe.tensors()[name]), "{name}");
        }
    }
    assert_eq!(fe.head_weight().shape(), &[64, 10]);
}

#[test]
fn unknown_freeze_prefix_is_rejected() {
    let mut m = tiny();
    assert!(matches!(
        m.freeze(&["nosuch."]),
        Err(Error::UnknownPrefix(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corruption_anywhere_in_a_micro_file_is_detected(frac in 0.0f64..1.0, delta in 1u8..=255) {
        thread_local! {
            static BYTES: Vec<u8> = store::encode(&trained_looking_micro());
        }
        BYTES.with(|bytes| {
            let mut copy = bytes.clone();
            let pos = ((bytes.len() - 1) as f64 * frac) as usize;
            copy[pos] ^= delta;
            prop_assert!(store::decode(&copy).is_err());
            Ok(())
        })?;
    }
}
