use proptest::prelude::*;
use ytune::cost::{attention_cost, measure_attention, CostQuery, Paradigm};
use ytune::fuser::{param_count, FuserConfig, InitStrategy, LabelFuser, LabelSet, LayerFeatures};
use ytune::heads::{self, argmax, qa_predict_span, triplet_loss, triplet_loss_value, SoftmaxAxis};
use ytune::store::{FeatureKey, FeatureRecord, LayerMask};
use ytune::tensor::{self, Tensor};
use ytune::{
    EncoderConfig, FrozenEncoder, Model, ModelSpec, ParamStore, Tape, TaskKind, TokenSequence,
};

fn small_encoder(layers: usize) -> FrozenEncoder {
    FrozenEncoder::new(EncoderConfig {
        layers,
        hidden: 16,
        heads: 2,
        ffn_dim: 32,
        vocab_size: 50,
        max_len: 16,
        seed: 3,
    })
    .unwrap()
}

/// Direct hinge sum over every wrong label.
fn hinge_oracle(scores: &[f64], gold: usize, margin: f64) -> f64 {
    scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != gold)
        .map(|(_, &s)| (margin - scores[gold] + s).max(0.0))
        .sum()
}

/// Exhaustive `i ≤ j` search, earliest end then earliest begin on ties.
fn brute_force_span(logits: &Tensor, axis: SoftmaxAxis) -> (usize, usize) {
    let p = heads::normalize(logits, axis);
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for j in 0..p.rows() {
        for i in 0..=j {
            let s = p.at(i, 0) * p.at(j, 1);
            if s > best_score {
                best_score = s;
                best = (i, j);
            }
        }
    }
    best
}

fn scores_and_gold() -> impl Strategy<Value = (Vec<f64>, usize)> {
    prop::collection::vec(-1.0f64..1.0, 2..8).prop_flat_map(|s| {
        let n = s.len();
        (Just(s), 0..n)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn triplet_loss_matches_hinge_sum((scores, gold) in scores_and_gold()) {
        let got = triplet_loss_value(&scores, gold, 0.1).unwrap();
        prop_assert!(got >= 0.0);
        prop_assert!((got - hinge_oracle(&scores, gold, 0.1)).abs() < 1e-12);
        let separated = scores.iter().enumerate().all(|(i, &s)| i == gold || scores[gold] - s >= 0.1);
        prop_assert_eq!(got == 0.0, separated);

        let mut tape = Tape::new();
        let vars: Vec<_> = scores.iter().map(|&s| tape.constant(Tensor::scalar(s))).collect();
        let l = triplet_loss(&mut tape, &vars, gold, 0.1).unwrap();
        prop_assert!((tape.value(l).item() - got).abs() < 1e-12);
    }

    #[test]
    fn raising_the_gold_score_lowers_a_positive_loss((scores, gold) in scores_and_gold(), delta in 1e-3f64..0.5) {
        let before = triplet_loss_value(&scores, gold, 0.1).unwrap();
        let mut raised = scores.clone();
        raised[gold] += delta;
        let after = triplet_loss_value(&raised, gold, 0.1).unwrap();
        if before > 0.0 {
            prop_assert!(after < before);
        } else {
            prop_assert_eq!(after, 0.0);
        }
    }

    #[test]
    fn argmax_is_first_maximum_and_shift_invariant(v in prop::collection::vec(-3i32..3, 1..10), shift in -5.0f64..5.0) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        let i = argmax(&v);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(v[i], max);
        prop_assert!(v[..i].iter().all(|&x| x < max));
        let shifted: Vec<f64> = v.iter().map(|x| x + shift.round()).collect();
        prop_assert_eq!(argmax(&shifted), i);
    }

    #[test]
    fn joint_span_decoding_matches_brute_force(m in 1usize..=8, vals in prop::collection::vec(-4.0f64..4.0, 16), token_axis: bool) {
        let logits = Tensor::from_vec(vec![m, 2], vals[..2 * m].to_vec()).unwrap();
        let axis = if token_axis { SoftmaxAxis::Token } else { SoftmaxAxis::Label };
        let (b, e) = qa_predict_span(&logits, axis);
        prop_assert!(b <= e && e < m);
        prop_assert_eq!((b, e), brute_force_span(&logits, axis));
    }

    #[test]
    fn joint_span_ties_resolve_early(m in 1usize..=8, level in -2i32..2) {
        let logits = Tensor::full(&[m, 2], f64::from(level));
        prop_assert_eq!(qa_predict_span(&logits, SoftmaxAxis::Token), (0, 0));
    }

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let x = Tensor::from_vec(vec![3, 4], vals).unwrap();
        let p = tensor::softmax_rows(&x);
        for r in 0..3 {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn feature_record_round_trip_is_bit_exact(
        m in 1usize..6,
        h in 1usize..5,
        mask in 1u64..16,
        seed in any::<u64>(),
        flip in any::<prop::sample::Index>(),
    ) {
        let mut rng = ytune::Rng::new(seed);
        let all: Vec<Tensor> = (0..4).map(|_| rng.normal_tensor(&[m, h], 1e3)).collect();
        let tokens = TokenSequence::new((3..3 + m as u32).collect()).unwrap();
        let key = FeatureKey::new(seed, &tokens, LayerMask(mask));
        let rec = FeatureRecord::from_encoder_output(key, &all).unwrap();
        let bytes = rec.encode().unwrap();
        let back = FeatureRecord::decode(&bytes).unwrap();
        for (a, b) in rec.layers.iter().zip(&back.layers) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
        prop_assert_eq!(&back, &rec);

        let mut bad = bytes.clone();
        let at = flip.index(bad.len());
        bad[at] ^= 0x40;
        prop_assert!(FeatureRecord::decode(&bad).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn measured_attention_equals_model(
        layers in 1usize..4,
        m in 1usize..10,
        p in 1usize..5,
        n in 2usize..5,
        k in 1usize..3,
        ld in 1usize..4,
        which in 0usize..5,
    ) {
        let q = CostQuery { layers, seq_len: m, prompt_len: p, labels: n, k, fuser_layers: ld };
        let paradigm = Paradigm::ALL[which];
        let counted = measure_attention(paradigm, &q).unwrap();
        prop_assert_eq!(counted.attention_pairs, attention_cost(paradigm, &q));
    }

    #[test]
    fn attention_cost_strictly_increasing(
        layers in 1usize..6,
        m in 1usize..40,
        p in 1usize..10,
        n in 1usize..10,
        k in 1usize..4,
        ld in 1usize..5,
        which in 0usize..5,
    ) {
        let q = CostQuery { layers, seq_len: m, prompt_len: p, labels: n, k, fuser_layers: ld };
        let paradigm = Paradigm::ALL[which];
        let base = attention_cost(paradigm, &q);
        let grows = |bumped: CostQuery| attention_cost(paradigm, &bumped) > base;
        { let bumped = CostQuery { layers: layers + 1, ..q }; prop_assert!(grows(bumped)); }
        { let bumped = CostQuery { seq_len: m + 1, ..q }; prop_assert!(grows(bumped)); }
        if paradigm == Paradigm::Prompt {
            { let bumped = CostQuery { prompt_len: p + 1, ..q }; prop_assert!(grows(bumped)); }
        }
        if paradigm == Paradigm::YTuning {
            { let bumped = CostQuery { labels: n + 1, ..q }; prop_assert!(grows(bumped)); }
            { let bumped = CostQuery { k: k + 1, ..q }; prop_assert!(grows(bumped)); }
            { let bumped = CostQuery { fuser_layers: ld + 1, ..q }; prop_assert!(grows(bumped)); }
        }
    }

    #[test]
    fn param_count_matches_reflection(n in 2usize..6, k in 1usize..4, layers in 1usize..5, shared: bool) {
        let enc = small_encoder(4);
        let labels = LabelSet::new((0..n).map(|i| format!("c{i}")).collect(), k).unwrap();
        let cfg = FuserConfig { layers, weight_shared: shared, heads: 2, ..FuserConfig::default() };
        let mut store = ParamStore::new();
        LabelFuser::new(&mut store, cfg.clone(), labels.clone(), &enc, None, InitStrategy::RandomUniform, 0).unwrap();
        prop_assert_eq!(store.trainable_scalars(), param_count(&cfg, &labels, 16, 16));
        if shared {
            let one = FuserConfig { layers: 1, ..cfg.clone() };
            prop_assert_eq!(param_count(&cfg, &labels, 16, 16), param_count(&one, &labels, 16, 16));
        }
    }

    #[test]
    fn relabeling_permutes_scores(perm_seed in any::<u64>(), tokens in prop::collection::vec(3u32..50, 2..10)) {
        let enc = small_encoder(2);
        let names: Vec<String> = ["alpha", "beta", "gamma", "delta"].iter().map(|s| s.to_string()).collect();
        let mut order: Vec<usize> = (0..names.len()).collect();
        ytune::Rng::new(perm_seed).shuffle(&mut order);
        let permuted: Vec<String> = order.iter().map(|&i| names[i].clone()).collect();

        let mut spec = ModelSpec::new(TaskKind::Classification, names.clone());
        spec.init = InitStrategy::RandomUniform;
        spec.fuser.heads = 2;
        let a = Model::new(spec.clone(), &enc, None).unwrap();
        let mut b = Model::new(ModelSpec { labels: permuted, ..spec }, &enc, None).unwrap();

        let mut tensors = a.named_tensors();
        for (name, t) in tensors.iter_mut() {
            if name == ytune::fuser::EMBEDDINGS_NAME {
                let mut rows = vec![0];
                rows.extend(order.iter().map(|&i| i + 1));
                *t = t.gather_rows(&rows);
            }
        }
        b.load_tensors(&tensors, |_| true).unwrap();

        let seq = TokenSequence::new(tokens).unwrap();
        let feats = |m: &Model| LayerFeatures::select(enc.encode(&seq).unwrap(), m.feature_mask());
        let sa = a.scores(&feats(&a)).unwrap();
        let sb = b.scores(&feats(&b)).unwrap();
        for (j, &i) in order.iter().enumerate() {
            prop_assert!((sb[j] - sa[i]).abs() < 1e-12, "{} vs {}", sb[j], sa[i]);
        }
    }
}
