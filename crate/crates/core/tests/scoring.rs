//! Online cosine scoring, the re-parameterized conv path, and their equivalence.

mod common;

use common::{naive_cosine, random_embeddings, random_feature_map};
use jointspace::embedding_io::{l2_normalize_rows, row_norms};
use jointspace::head::{classify_conv, reparameterize, score_online, FeatureMap};
use jointspace::tensor::Matrix;
use jointspace::EmbeddingMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn online_scores_match_naive_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let e = random_embeddings(&mut rng, 7, 32);
    let fm = random_feature_map(&mut rng, [1, 32, 4, 4]);
    let got = score_online(&e, &fm, 14.29, -10.0).unwrap();
    let want = naive_cosine(e.matrix(), &fm, 14.29f32 as f64, -10.0);
    assert_eq!(got.shape(), [1, 7, 4, 4]);
    for (g, w) in got.data.iter().zip(&want) {
        assert!((*g as f64 - w).abs() < 1e-5);
    }
}

#[test]
fn lvis_sized_pack_output_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let e = random_embeddings(&mut rng, 1203, 512);
    let pack = reparameterize(&e, 14.29, -10.0).unwrap();
    let fm = random_feature_map(&mut rng, [1, 512, 20, 20]);
    assert_eq!(classify_conv(&pack, &fm).unwrap().shape(), [1, 1203, 20, 20]);
}

#[test]
fn normalized_rows_have_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let e = random_embeddings(&mut rng, 64, 128);
    let n = l2_normalize_rows(&e).unwrap();
    for r in 0..64 {
        let norm: f64 = n.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6);
    }
    assert!(row_norms(&n).iter().all(|v| (v - 1.0).abs() <= 1e-6));
}

fn embeddings_strategy() -> impl Strategy<Value = (EmbeddingMatrix, FeatureMap)> {
    (1usize..12, 1usize..24, 1usize..3, 1usize..4, 1usize..4, any::<u64>()).prop_map(|(k, d, b, h, w, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_embeddings(&mut rng, k, d);
        let mut fm = random_feature_map(&mut rng, [b, d, h, w]);
        // Sprinkle zero cells, which must score β.
        if rng.random_bool(0.3) {
            fm.set_cell(0, 0, &vec![0.0; d]);
        }
        (e, fm)
    })
}

proptest! {
    #[test]
    fn conv_path_equals_online_path((e, fm) in embeddings_strategy(), alpha in 0.1f32..50.0, beta in -20.0f32..5.0) {
        let online = score_online(&e, &fm, alpha, beta).unwrap();
        let conv = classify_conv(&reparameterize(&e, alpha, beta).unwrap(), &fm).unwrap();
        prop_assert_eq!(online.shape(), conv.shape());
        for (a, b) in online.data.iter().zip(&conv.data) {
            prop_assert!((a - b).abs() <= 1e-5 * alpha.max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn argmax_is_invariant_to_scale((e, fm) in embeddings_strategy(), c in 0.01f32..100.0) {
        let base = classify_conv(&reparameterize(&e, 10.0, -3.0).unwrap(), &fm).unwrap();
        let scaled = classify_conv(&reparameterize(&e, 10.0 * c, -3.0).unwrap(), &fm).unwrap();
        for b in 0..fm.batch() {
            let x = base.argmax(b);
            let y = scaled.argmax(b);
            for (cell, (p, q)) in x.iter().zip(&y).enumerate() {
                // Exact cosine ties can resolve either way after rounding; skip them.
                let row: Vec<f32> = (0..base.classes).map(|k| base.get(b, k, cell)).collect();
                let tied = row.iter().filter(|&&v| (v - p.1).abs() < 1e-4).count() > 1;
                if !tied {
                    prop_assert_eq!(p.0, q.0);
                }
            }
        }
    }

    #[test]
    fn permuting_rows_permutes_channels((e, fm) in embeddings_strategy(), seed in any::<u64>()) {
        let k = e.rows();
        let mut order: Vec<usize> = (0..k).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..k).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let rows: Vec<Vec<f32>> = order.iter().map(|&i| e.row(i).to_vec()).collect();
        let p = EmbeddingMatrix::new(Matrix::from_rows(&rows).unwrap(), None).unwrap();
        let a = classify_conv(&reparameterize(&e, 5.0, -1.0).unwrap(), &fm).unwrap();
        let b = classify_conv(&reparameterize(&p, 5.0, -1.0).unwrap(), &fm).unwrap();
        for bi in 0..fm.batch() {
            for (new, &old) in order.iter().enumerate() {
                for cell in 0..fm.cells() {
                    prop_assert_eq!(b.get(bi, new, cell), a.get(bi, old, cell));
                }
            }
        }
    }

    #[test]
    fn normalization_is_idempotent(seed in any::<u64>(), k in 1usize..10, d in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_embeddings(&mut rng, k, d);
        let once = l2_normalize_rows(&e).unwrap();
        let twice = l2_normalize_rows(&once).unwrap();
        for (a, b) in once.matrix().as_slice().iter().zip(twice.matrix().as_slice()) {
            prop_assert!((a - b).abs() <= 1e-7);
        }
    }
}
