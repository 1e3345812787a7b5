mod common;

use common::*;
use dualhead_core::model::{Backbone, ModelInput};
use dualhead_core::modeswitch::{current_mode, Mode};
use dualhead_core::retrieval::{embed_current_state, retrieval_input, Hit};
use dualhead_core::tokens::{DOC_MARKER, PAD, QUERY_MARKER};
use dualhead_core::{embed, maxsim, ndcg_at_k, Index, MultiVecEmbedding, RetrievalResult, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Mat {
    l2_normalize(&Mat::random(rng, rows, dim)).quantized()
}

fn emb(m: &Mat) -> MultiVecEmbedding {
    MultiVecEmbedding::new(m.to_tensor(), "")
}

#[test]
fn maxsim_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let dim = rng.random_range(1..12);
        let (qr, dr) = (rng.random_range(1..8), rng.random_range(1..10));
        let q = Mat::random(&mut rng, qr, dim).quantized();
        let d = Mat::random(&mut rng, dr, dim).quantized();
        let got = f64::from(maxsim(&emb(&q), &emb(&d)).unwrap());
        let want = common::maxsim(&q, &d);
        assert!((got - want).abs() <= 1e-5 * (1.0 + want.abs()), "{got} vs {want}");
    }
}

#[test]
fn maxsim_rejects_mismatched_dims() {
    let q = MultiVecEmbedding::new(Tensor::zeros(vec![2, 3]), "q");
    let d = MultiVecEmbedding::new(Tensor::zeros(vec![2, 4]), "d");
    assert!(maxsim(&q, &d).is_err());
}

fn oracle_ndcg(ranked: &[String], relevant: &[String], k: usize) -> f64 {
    let gains: Vec<f64> = ranked.iter().map(|id| if relevant.contains(id) { 1.0 } else { 0.0 }).collect();
    let dcg = |g: &[f64]| -> f64 { g.iter().take(k).enumerate().map(|(i, v)| v / ((i + 2) as f64).log2()).sum() };
    let mut ideal = vec![1.0; relevant.len()];
    ideal.resize(ranked.len().max(relevant.len()), 0.0);
    let idcg = dcg(&ideal);
    if idcg == 0.0 {
        0.0
    } else {
        dcg(&gains) / idcg
    }
}

#[test]
fn ndcg_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let n = rng.random_range(1..15);
        let mut ids: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
        ids.shuffle(&mut rng);
        let relevant: Vec<String> = ids.iter().filter(|_| rng.random_bool(0.3)).cloned().collect();
        let k = rng.random_range(1..12);
        let result = RetrievalResult {
            hits: ids.iter().map(|id| Hit { doc_id: id.clone(), score: 0.0 }).collect(),
        };
        let rel: Vec<&str> = relevant.iter().map(String::as_str).collect();
        let got = ndcg_at_k(&result, &rel, k);
        assert!((got - oracle_ndcg(&ids, &relevant, k)).abs() < 1e-12);
        assert!((0.0..=1.0 + 1e-12).contains(&got));
    }
}

fn random_index(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> (Index, Vec<Mat>) {
    let mut index = Index::new(dim);
    let mut docs = Vec::new();
    for i in 0..n {
        let rows = rng.random_range(1..6);
        let d = unit_rows(rng, rows, dim);
        index.add(format!("doc-{i}"), emb(&d)).unwrap();
        docs.push(d);
    }
    (index, docs)
}

#[test]
fn search_agrees_with_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let dim = rng.random_range(2..9);
        let n = rng.random_range(1..30);
        let (index, docs) = random_index(&mut rng, n, dim);
        let qr = rng.random_range(1..5);
        let q = unit_rows(&mut rng, qr, dim);
        let k = rng.random_range(1..40);
        let result = index.search(&emb(&q), k).unwrap();
        assert_eq!(result.hits.len(), k.min(n));

        let scores: Vec<f64> = docs.iter().map(|d| common::maxsim(&q, d)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
        for (rank, hit) in result.hits.iter().enumerate() {
            let idx: usize = hit.doc_id["doc-".len()..].parse().unwrap();
            // Equal up to float noise with the oracle's document at this rank.
            assert!((scores[idx] - scores[order[rank]]).abs() < 1e-5);
            assert!((f64::from(hit.score) - scores[idx]).abs() < 1e-5);
        }
    }
}

#[test]
fn equal_scores_keep_insertion_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = unit_rows(&mut rng, 3, 5);
    let mut index = Index::new(5);
    for id in ["c", "a", "b"] {
        index.add(id, emb(&d)).unwrap();
    }
    let hits = index.search(&emb(&unit_rows(&mut rng, 2, 5)), 3).unwrap().hits;
    let ids: Vec<&str> = hits.iter().map(|h| h.doc_id.as_str()).collect();
    assert_eq!(ids, ["c", "a", "b"]);
}

#[test]
fn index_rejects_bad_inputs() {
    let mut index = Index::new(4);
    let q = MultiVecEmbedding::new(Tensor::zeros(vec![1, 4]), "");
    assert!(index.search(&q, 1).is_err());
    index.add("a", MultiVecEmbedding::new(Tensor::zeros(vec![2, 4]), "")).unwrap();
    assert!(index.add("a", MultiVecEmbedding::new(Tensor::zeros(vec![2, 4]), "")).is_err());
    assert!(index.add("b", MultiVecEmbedding::new(Tensor::zeros(vec![2, 3]), "")).is_err());
    assert!(index.search(&q, 0).is_err());
}

#[test]
fn index_round_trips_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (index, _) = random_index(&mut rng, 17, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("idx.bin");
    index.save(&path).unwrap();
    let loaded = Index::load(&path).unwrap();
    assert_eq!(loaded.len(), index.len());
    for ((ia, ea), (ib, eb)) in index.entries().iter().zip(loaded.entries()) {
        assert_eq!(ia, ib);
        assert!(ea.vectors.bitwise_eq(&eb.vectors));
    }
    let q = emb(&unit_rows(&mut rng, 3, 6));
    assert_eq!(index.search(&q, 5).unwrap(), loaded.search(&q, 5).unwrap());

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(Index::load(&path).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, bad).unwrap();
    assert!(Index::load(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adding_documents_preserves_relative_order(seed in 0u64..10_000, n in 2usize..15, extra in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut index, _) = random_index(&mut rng, n, 4);
        let q = emb(&unit_rows(&mut rng, 2, 4));
        let before: Vec<String> = index.search(&q, n).unwrap().hits.into_iter().map(|h| h.doc_id).collect();
        for i in 0..extra {
            index.add(format!("extra-{i}"), emb(&unit_rows(&mut rng, 2, 4))).unwrap();
        }
        let after: Vec<String> = index
            .search(&q, n + extra)
            .unwrap()
            .hits
            .into_iter()
            .map(|h| h.doc_id)
            .filter(|id| id.starts_with("doc-"))
            .collect();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn positive_query_scaling_keeps_ranking(seed in 0u64..10_000, n in 1usize..15, c in 0.1f32..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (index, _) = random_index(&mut rng, n, 5);
        let q = unit_rows(&mut rng, 3, 5);
        let scaled = map(&q, |v| v * f64::from(c)).quantized();
        let a = index.search(&emb(&q), n).unwrap();
        let b = index.search(&emb(&scaled), n).unwrap();
        for (x, y) in a.hits.iter().zip(&b.hits) {
            prop_assert!((x.score * c - y.score).abs() < 1e-4 * c.max(1.0));
        }
        let sa: Vec<f64> = a.hits.iter().map(|h| f64::from(h.score)).collect();
        // Ranks may differ only where scores tie within float noise.
        for (x, y) in a.hits.iter().zip(&b.hits) {
            if x.doc_id != y.doc_id {
                let sx = f64::from(x.score);
                prop_assert!(sa.iter().filter(|s| (*s - sx).abs() < 1e-5).count() > 1);
            }
        }
    }

    #[test]
    fn maxsim_ignores_document_row_order(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = unit_rows(&mut rng, 3, 4);
        let d = unit_rows(&mut rng, 5, 4);
        let mut rows: Vec<usize> = (0..5).collect();
        rows.shuffle(&mut rng);
        let shuffled = Mat::new(5, 4, rows.iter().flat_map(|r| d.row(*r).to_vec()).collect());
        prop_assert_eq!(maxsim(&emb(&q), &emb(&d)).unwrap().to_bits(), maxsim(&emb(&q), &emb(&shuffled)).unwrap().to_bits());
    }

    #[test]
    fn self_similarity_is_maximal_for_unit_rows(seed in 0u64..10_000, rows in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = unit_rows(&mut rng, rows, 6);
        let other = unit_rows(&mut rng, rows, 6);
        let self_score = maxsim(&emb(&d), &emb(&d)).unwrap();
        prop_assert!((self_score - rows as f32).abs() < 1e-4);
        prop_assert!(maxsim(&emb(&d), &emb(&other)).unwrap() <= self_score + 1e-4);
    }
}

#[test]
fn embed_produces_unit_rows_for_valid_positions_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = Backbone::new(tiny_config(), 1).unwrap();
    randomize_adapters(&mut model, 2);
    for _ in 0..20 {
        let np = rng.random_range(0..3);
        let nt = rng.random_range(1..8);
        let mut tokens = random_tokens(&mut rng, nt, 40);
        let pads = rng.random_range(0..3);
        tokens.extend(std::iter::repeat_n(PAD, pads));
        let input = ModelInput { patches: (0..np).map(|_| random_patch(&mut rng)).collect(), tokens };
        let e = embed(&mut model, &input, rng.random_bool(0.5)).unwrap();
        assert_eq!(current_mode(&model), Some(Mode::Retrieval));
        assert_eq!(e.num_tokens(), np + 1 + nt);
        assert_eq!(e.dim(), 8);
        for r in 0..e.num_tokens() {
            let norm: f32 = e.vectors.row(r).iter().map(|v| v * v).sum();
            assert!((norm - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn embed_matches_f64_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = Backbone::new(tiny_config(), 3).unwrap();
    randomize_adapters(&mut model, 4);
    let scale = 2.0;
    for is_query in [true, false] {
        let mut tokens = random_tokens(&mut rng, 6, 40);
        tokens.push(PAD);
        let input = ModelInput { patches: vec![random_patch(&mut rng)], tokens };
        let got = embed(&mut model, &input, is_query).unwrap();

        let seq = retrieval_input(&input, is_query);
        assert_eq!(seq.tokens[0], if is_query { QUERY_MARKER } else { DOC_MARKER });
        let h = reference_hidden(&model, &seq, true, true);
        let valid = seq.validity();
        let kept = Mat::new(
            valid.iter().filter(|v| **v).count(),
            h.c,
            (0..h.r).filter(|i| valid[*i]).flat_map(|i| h.row(i).to_vec()).collect(),
        );
        let store = model.params();
        let w = param(store, "custom_text_proj.weight");
        let a = param(store, "custom_text_proj.lora_a");
        let b = param(store, "custom_text_proj.lora_b");
        let proj = zip(
            &matmul(&kept, &transpose(&w)),
            &matmul(&matmul(&kept, &transpose(&a)), &transpose(&b)),
            |u, v| u + scale * v,
        );
        let want = l2_normalize(&proj);
        for (x, y) in got.vectors.data().iter().zip(&want.d) {
            assert!((f64::from(*x) - y).abs() < 1e-4);
        }
    }
}

#[test]
fn query_and_document_markers_give_different_embeddings() {
    let mut model = Backbone::new(tiny_config(), 3).unwrap();
    randomize_adapters(&mut model, 4);
    let input = ModelInput::tokens(vec![20, 21, 22]);
    let q = embed(&mut model, &input, true).unwrap();
    let d = embed(&mut model, &input, false).unwrap();
    assert!(!q.vectors.bitwise_eq(&d.vectors));
    assert!(embed_current_state(&model, &ModelInput::default(), true).is_err());
}
