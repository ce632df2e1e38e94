use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kvrag::autodiff::{Graph, ParamGroup, ParamStore, Tensor};
use kvrag::checkpoint::{decode_params_into, encode_params};
use kvrag::encoders::featurize_text;
use kvrag::fusion::build_attention_mask;
use kvrag::memory::{decode_snapshot, encode_snapshot, MemoryEntry, MemorySnapshot};
use kvrag::retriever::{distributed_topk, topk_renormalize};
use kvrag::training::prefix_split;
use kvrag::{Model, ModelConfig};

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn snapshot(keys: &[Vec<f64>], corpora: usize, shards: usize) -> MemorySnapshot<f64> {
    let d = keys[0].len();
    let entries = keys
        .iter()
        .enumerate()
        .map(|(i, k)| MemoryEntry {
            key: unit(k.clone()),
            value: Tensor::new(vec![2, d], k.iter().chain(k).map(|x| x * 0.5).collect()).unwrap(),
            item_id: format!("e{i:03}"),
            corpus_id: i % corpora,
            encoded_at_version: 0,
        })
        .collect();
    MemorySnapshot::from_entries(1, d, 2, corpora, shards, entries).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// d/dlogits of summed cross-entropy is softmax - onehot.
    #[test]
    fn cross_entropy_gradient_matches_closed_form(
        logits in prop::collection::vec(-4.0f64..4.0, 12),
        targets in prop::collection::vec(0usize..4, 3),
    ) {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("logits", ParamGroup::Other, Tensor::new(vec![3, 4], logits.clone()).unwrap());
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let loss = g.cross_entropy(x, targets.clone()).unwrap();
        let grads = g.backward(loss).unwrap();
        let got = grads.param_or_zeros(&store, id);
        for r in 0..3 {
            let row = &logits[r * 4..r * 4 + 4];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for c in 0..4 {
                let p = (row[c] - m).exp() / z;
                let want = p - f64::from(u8::from(c == targets[r]));
                prop_assert!((got.data()[r * 4 + c] - want).abs() < 1e-12);
            }
        }
    }

    /// d sum(A B) / dA[i][j] = sum_k B[j][k].
    #[test]
    fn matmul_gradient_is_row_sums(a in prop::collection::vec(-2.0f64..2.0, 6), b in prop::collection::vec(-2.0f64..2.0, 12)) {
        let mut store = ParamStore::<f64>::new();
        let ia = store.add("a", ParamGroup::Other, Tensor::new(vec![2, 3], a).unwrap());
        let mut g = Graph::new();
        let va = g.param(&store, ia);
        let vb = g.constant(Tensor::new(vec![3, 4], b.clone()).unwrap());
        let prod = g.matmul(va, vb).unwrap();
        let s = g.sum(prod).unwrap();
        let grads = g.backward(s).unwrap();
        let got = grads.param_or_zeros(&store, ia);
        for i in 0..2 {
            for j in 0..3 {
                let want: f64 = b[j * 4..j * 4 + 4].iter().sum();
                prop_assert!((got.data()[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sharded_search_equals_a_full_sort(
        keys in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 8..80),
        q in prop::collection::vec(-1.0f64..1.0, 4),
        gate_logits in prop::collection::vec(-2.0f64..2.0, 3),
        shards in 1usize..9,
        k in 1usize..8,
    ) {
        let snap = snapshot(&keys, 3, shards);
        let q = unit(q);
        let gates = topk_renormalize(&gate_logits);
        let got = distributed_topk(&q, &gates, &snap, k, 0.05).unwrap();
        let mut order: Vec<(f64, String, usize)> = snap
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| (gates[e.corpus_id] * e.key.iter().zip(&q).map(|(x, y)| x * y).sum::<f64>(), e.item_id.clone(), i))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let want: Vec<usize> = order.iter().take(k).map(|o| o.2).collect();
        prop_assert_eq!(&got.indices, &want);
        let total: f64 = got.topk_probs.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        let one_shard = distributed_topk(&q, &gates, &snap.resharded(1).unwrap(), k, 0.05).unwrap();
        prop_assert_eq!(got.indices, one_shard.indices);
    }

    #[test]
    fn snapshot_bytes_round_trip(keys in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..20), shards in 1usize..5) {
        let wide = snapshot(&keys, 1, shards);
        // Narrow to f32 first; after that the file format is lossless.
        let narrow: MemorySnapshot<f32> = decode_snapshot(&encode_snapshot(&wide).unwrap()).unwrap();
        let again: MemorySnapshot<f32> = decode_snapshot(&encode_snapshot(&narrow).unwrap()).unwrap();
        prop_assert!(again.bitwise_eq(&narrow));
        prop_assert_eq!(again.num_shards(), shards);
    }

    #[test]
    fn mask_layout(logits in prop::collection::vec(-3.0f64..3.0, 1..6), query_len in 1usize..9, c in 1usize..5) {
        let probs = topk_renormalize(&logits);
        let m = build_attention_mask(&probs, query_len, c).unwrap();
        prop_assert_eq!(m.len(), query_len + c * probs.len());
        prop_assert!(m[..query_len].iter().all(|&v| v == 1.0));
        for (k, p) in probs.iter().enumerate() {
            let block = &m[query_len + k * c..query_len + (k + 1) * c];
            prop_assert!(block.iter().all(|v| v == p));
        }
    }

    #[test]
    fn prefix_split_is_a_split(tokens in prop::collection::vec(0usize..50, 1..12), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, s) = prefix_split(&tokens, &mut rng).unwrap();
        prop_assert!(!p.is_empty());
        prop_assert_eq!(s.is_empty(), tokens.len() == 1);
        prop_assert_eq!([p, s].concat(), tokens);
    }

    #[test]
    fn featurized_tokens_are_stable_and_in_range(words in prop::collection::vec("[a-z]{1,8}", 1..10), vocab in 2usize..500) {
        let text = words.join(" ");
        let t = featurize_text(&text, vocab);
        prop_assert_eq!(t.len(), words.len());
        prop_assert!(t.iter().all(|&x| x < vocab));
        prop_assert_eq!(t, featurize_text(&text.to_uppercase(), vocab));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_restore_any_seed(seed in any::<u64>()) {
        let cfg = ModelConfig { d: 8, d_img: 4, vocab: 31, c: 2, base_layers: 1, fusion_layers: 1, decoder_layers: 1, seed, ..ModelConfig::toy() };
        let a = Model::<f64>::new(cfg.clone());
        let mut b = Model::<f64>::new(ModelConfig { seed: seed.wrapping_add(1), ..cfg });
        decode_params_into(&mut b.params, &encode_params(&a.params).unwrap()).unwrap();
        for id in a.params.ids() {
            prop_assert_eq!(a.params.get(id).data(), b.params.get(id).data());
        }
    }
}
