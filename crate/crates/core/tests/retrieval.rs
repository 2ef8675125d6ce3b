use std::collections::BTreeSet;

use cac_core::embedder::{Embedder, ReferenceEmbedder};
use cac_core::eval::retrieval_oracle;
use cac_core::kb::{DmDraft, DmId, DmKind, KnowledgeBase, Provenance, RetrievalQuery, ScoreWeights};
use proptest::prelude::*;

const WORDS: [&str; 24] = [
    "plant", "fiber", "cell", "wall", "sugar", "starch", "glucose", "digest", "enzyme", "storage", "animal", "liver",
    "bond", "chain", "solve", "goal", "answer", "identify", "option", "memory", "fact", "water", "leaf", "seed",
];

fn text() -> impl Strategy<Value = String> {
    proptest::collection::vec(0..WORDS.len(), 1..6).prop_map(|ix| ix.into_iter().map(|i| WORDS[i]).collect::<Vec<_>>().join(" "))
}

fn build(conditions: &[(String, String)], batch: usize, e: &ReferenceEmbedder) -> KnowledgeBase {
    let drafts: Vec<DmDraft> = conditions
        .iter()
        .enumerate()
        .map(|(i, (g, w))| DmDraft::new(DmKind::Fact, format!("memory {i}"), g.clone(), w.clone()))
        .collect();
    let mut kb = KnowledgeBase::new(e.config().clone());
    for chunk in drafts.chunks(batch.max(1)) {
        kb.append_dms(chunk, &Provenance::human(0), e).unwrap();
    }
    kb
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn retrieve_equals_oracle(
        conditions in proptest::collection::vec((text(), text()), 0..60),
        batch in 1usize..20,
        queries in proptest::collection::vec((text(), text()), 1..8),
        k in 1usize..25,
        goal_weight in 0.0f64..1.0,
        removed_mask in proptest::collection::vec(any::<bool>(), 60),
    ) {
        let e = ReferenceEmbedder::default();
        let kb = build(&conditions, batch, &e);
        let weights = ScoreWeights { goal: goal_weight, wm: 1.0 - goal_weight };
        let removed: BTreeSet<DmId> = kb.dms().iter().zip(&removed_mask).filter(|(_, r)| **r).map(|(d, _)| d.id.clone()).collect();
        for view in [kb.view(), kb.ablation_view(&removed).unwrap()] {
            for (g, w) in &queries {
                let q = RetrievalQuery::new(g.clone(), w.clone()).unwrap();
                let got: Vec<(DmId, f64)> = view.retrieve(&q, k, &e, weights).unwrap().into_iter().map(|h| (h.id, h.score)).collect();
                let want = retrieval_oracle(&view, &q, k, &e, weights).unwrap();
                let got_ids: Vec<&DmId> = got.iter().map(|(id, _)| id).collect();
                let want_ids: Vec<&DmId> = want.iter().map(|(id, _)| id).collect();
                prop_assert_eq!(got_ids, want_ids);
                for ((_, a), (_, b)) in got.iter().zip(&want) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn scores_are_bounded_and_sorted(
        conditions in proptest::collection::vec((text(), text()), 1..40),
        (g, w) in (text(), text()),
    ) {
        let e = ReferenceEmbedder::default();
        let kb = build(&conditions, 7, &e);
        let q = RetrievalQuery::new(g, w).unwrap();
        let hits = kb.view().retrieve(&q, conditions.len(), &e, ScoreWeights::default()).unwrap();
        prop_assert_eq!(hits.len(), conditions.len());
        for pair in hits.windows(2) {
            prop_assert!(pair[0].score >= pair[1].score);
            if pair[0].score == pair[1].score {
                let seq = |id: &DmId| kb.get(id).unwrap().seq;
                prop_assert!(seq(&pair[0].id) < seq(&pair[1].id));
            }
        }
        for h in &hits {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&h.score));
        }
    }

    #[test]
    fn own_conditions_score_one(conditions in proptest::collection::vec((text(), text()), 1..30), pick in any::<prop::sample::Index>()) {
        let e = ReferenceEmbedder::default();
        let kb = build(&conditions, 5, &e);
        let dm = &kb.dms()[pick.index(kb.len())];
        let q = RetrievalQuery::new(dm.goal_condition.clone(), dm.wm_condition.clone()).unwrap();
        let top = &kb.view().retrieve(&q, 1, &e, ScoreWeights::default()).unwrap()[0];
        prop_assert!((top.score - 1.0).abs() < 1e-12);
        let emb = e.embed(&dm.goal_condition).unwrap();
        prop_assert_eq!(&emb, &dm.key_goal);
    }
}
