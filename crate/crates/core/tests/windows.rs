use std::collections::HashMap;

use mid_core::analysis::{rank_logits, select_intercept_window, select_intercepts, select_max_window, InterceptMode};
use mid_core::mitigation::{assemble_retrain_set, retrain_last_layer, RetrainConfig};
use mid_core::nncore::{EmbeddingRecord, ModelParams, ModelSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn records(logits: &[[f32; 3]]) -> Vec<EmbeddingRecord> {
    logits
        .iter()
        .enumerate()
        .map(|(i, l)| EmbeddingRecord { sample_id: 100 + i as u64, embedding: vec![l[0], l[1]], logits: l.to_vec() })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn windows_match_sorting_oracle(logits in proptest::collection::vec(proptest::array::uniform3(-5.0f32..5.0), 1..60), m in 1usize..20, class in 0usize..3) {
        let recs = records(&logits);
        let mut by_abs: Vec<(f32, u64)> = recs.iter().map(|r| (r.logits[class].abs(), r.sample_id)).collect();
        by_abs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let expected: Vec<u64> = by_abs.iter().take(m).map(|p| p.1).collect();
        prop_assert_eq!(select_intercept_window(&recs, class, m, InterceptMode::AbsoluteZero).unwrap(), expected);

        let mut by_val: Vec<(f32, u64)> = recs.iter().map(|r| (r.logits[class], r.sample_id)).collect();
        by_val.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let top: Vec<u64> = by_val.iter().take(m).map(|p| p.1).collect();
        prop_assert_eq!(select_max_window(&rank_logits(&recs, class).unwrap(), m), top);

        let sel = select_intercepts(&recs, m, InterceptMode::AbsoluteZero).unwrap();
        prop_assert!(sel.selected.windows(2).all(|w| w[0] < w[1]));
        for w in &sel.per_class {
            prop_assert_eq!(w.len(), m.min(recs.len()));
            prop_assert!(w.iter().all(|id| sel.selected.binary_search(id).is_ok()));
        }
    }
}

#[test]
fn retraining_leaves_encoder_bitwise_intact() {
    let spec = ModelSpec::reduced_input();
    let params = ModelParams::<f32>::init(&spec, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = spec.embedding_dim();
    let recs: Vec<EmbeddingRecord> = (0..240u64)
        .map(|id| {
            let c = (id % 3) as usize;
            let embedding = (0..dim).map(|d| rng.random_range(-1.0f32..1.0) + if d == c { 2.0 } else { 0.0 }).collect();
            EmbeddingRecord { sample_id: id, embedding, logits: vec![0.0; 3] }
        })
        .collect();
    let labels: HashMap<u64, usize> = recs.iter().map(|r| (r.sample_id, (r.sample_id % 3) as usize)).collect();
    let pool: Vec<(u64, usize)> = labels.iter().map(|(&k, &v)| (k, v)).collect();
    let ids: Vec<u64> = (0..60).collect();
    let split = assemble_retrain_set(&ids, &pool, 0.5, 0).unwrap();
    let cfg = RetrainConfig { n_repeats: 3, ..RetrainConfig::default() };
    let (a, out) = retrain_last_layer(&params, &recs, &labels, &split, &cfg).unwrap();
    let (b, _) = retrain_last_layer(&params, &recs, &labels, &split, &cfg).unwrap();
    assert_eq!(a, b);
    for (x, y) in a.encoder_tensors().iter().zip(params.encoder_tensors()) {
        assert!(x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
    assert!(cfg.l1_grid.contains(&out.tuning.lambda));
    assert_eq!(out.repeats_converged.len(), 3);
}
