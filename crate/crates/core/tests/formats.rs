//! Binary format stability: golden files, bit-exact roundtrips, corruption detection.

mod common;

use common::{fixture, golden_adaptor, golden_embeddings, golden_pack, random_embeddings};
use jointspace::adaptor::{read_adaptor, write_adaptor, AdaptorConfig, AdaptorParams};
use jointspace::embedding_io::{read_embeddings, write_embeddings};
use jointspace::quant::{QuantMode, QuantizedPack};
use jointspace::tensor::Matrix;
use jointspace::vocab::{load_pack, load_stored_pack, save_pack, save_stored_pack, StoredPack};
use jointspace::{EmbeddingMatrix, Error, VocabularyPack};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn golden_dsem_byte_for_byte() {
    let bytes = std::fs::read(fixture("golden.dsem")).unwrap();
    assert_eq!(golden_embeddings().to_bytes(), bytes);
    assert_eq!(read_embeddings(fixture("golden.dsem")).unwrap(), golden_embeddings());

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("golden.dsem");
    write_embeddings(&out, &golden_embeddings()).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), bytes);
    assert_eq!(
        std::fs::read(dir.path().join("golden.labels.json")).unwrap(),
        std::fs::read(fixture("golden.labels.json")).unwrap()
    );
}

#[test]
fn golden_dsad_byte_for_byte() {
    let bytes = std::fs::read(fixture("golden.dsad")).unwrap();
    assert_eq!(golden_adaptor().to_bytes(), bytes);
    assert_eq!(read_adaptor(fixture("golden.dsad")).unwrap(), golden_adaptor());
}

#[test]
fn golden_dspk_byte_for_byte() {
    let bytes = std::fs::read(fixture("golden.dspk")).unwrap();
    assert_eq!(StoredPack::Float(golden_pack()).to_bytes().unwrap(), bytes);
    assert_eq!(load_pack(fixture("golden.dspk")).unwrap(), golden_pack());
}

#[test]
fn golden_int8_dspk_byte_for_byte() {
    let q = QuantizedPack::from_pack(&golden_pack(), QuantMode::Int8);
    assert_eq!(q.kernel().values(), &[95, 127, 0, -127]);
    let bytes = std::fs::read(fixture("golden_int8.dspk")).unwrap();
    assert_eq!(StoredPack::Quantized(q.clone()).to_bytes().unwrap(), bytes);
    assert_eq!(load_stored_pack(fixture("golden_int8.dspk")).unwrap(), StoredPack::Quantized(q));
    assert!(matches!(load_pack(fixture("golden_int8.dspk")), Err(Error::Format(_))));
}

#[test]
fn every_blob_bit_flip_is_caught() {
    let bytes = std::fs::read(fixture("golden.dspk")).unwrap();
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    for i in 8 + header_len..bytes.len() {
        for bit in 0..8 {
            let mut b = bytes.clone();
            b[i] ^= 1 << bit;
            assert!(matches!(StoredPack::from_bytes(&b), Err(Error::Corruption(_))), "byte {i} bit {bit}");
        }
    }
}

#[test]
fn lvis_sized_embedding_file() {
    let mut rng = ChaCha8Rng::seed_from_u64(1203);
    let e = random_embeddings(&mut rng, 1203, 512);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("lvis.dsem");
    write_embeddings(&p, &e).unwrap();
    let back = read_embeddings(&p).unwrap();
    assert_eq!(back.rows(), 1203);
    assert_eq!(back.dims(), 512);
    assert_eq!(back.to_bytes(), e.to_bytes());
}

fn finite_f32() -> impl Strategy<Value = f32> {
    any::<u32>().prop_map(f32::from_bits).prop_filter("finite", |v| v.is_finite())
}

proptest! {
    #[test]
    fn dsem_roundtrip_is_bit_exact(k in 1usize..6, d in 1usize..6, vals in prop::collection::vec(finite_f32(), 36)) {
        let m = Matrix::from_vec(k, d, vals[..k * d].to_vec()).unwrap();
        let e = EmbeddingMatrix::new(m, None).unwrap();
        let back = EmbeddingMatrix::from_bytes(&e.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), e.to_bytes());
    }

    #[test]
    fn dsad_roundtrip_is_bit_exact(n in 0usize..=4, d in 1usize..8, seed in any::<u64>()) {
        let p = AdaptorParams::init(&AdaptorConfig::new(n, d, seed).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.dsad");
        write_adaptor(&path, &p).unwrap();
        let back = read_adaptor(&path).unwrap();
        prop_assert_eq!(back.to_bytes(), p.to_bytes());
    }

    #[test]
    fn dspk_roundtrip_is_bit_exact(
        seed in any::<u64>(), k in 0usize..6, d in 1usize..6,
        alpha in finite_f32().prop_filter("positive", |v| *v > 0.0),
        beta in finite_f32(),
        mode in prop::option::of(prop::sample::select(vec![QuantMode::Int8, QuantMode::Int16])),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernel = if k == 0 {
            Matrix::zeros(0, d)
        } else {
            random_embeddings(&mut rng, k, d).into_matrix()
        };
        let labels = (0..k).map(|i| format!("label \"{i}\", ü")).collect();
        let pack = VocabularyPack::new(labels, kernel, alpha, beta, false).unwrap();
        let stored = match mode {
            None => StoredPack::Float(pack),
            Some(m) => StoredPack::Quantized(QuantizedPack::from_pack(&pack, m)),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.dspk");
        save_stored_pack(&path, &stored).unwrap();
        let back = load_stored_pack(&path).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), stored.to_bytes().unwrap());
        if let StoredPack::Float(p) = &stored {
            save_pack(&path, p).unwrap();
            let again = load_pack(&path).unwrap();
            prop_assert_eq!(again.logit_scale().to_bits(), alpha.to_bits());
            prop_assert_eq!(again.logit_bias().to_bits(), beta.to_bits());
        }
    }
}
