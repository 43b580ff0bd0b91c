mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::*;
use rede_core::eval::{export_distill_dataset, run_batch};
use rede_core::judge::{JudgeBackend, LlmJudgeConfig};
use rede_core::llm::{Gateway, MockBackend, MockEntry};
use rede_core::pipeline::{InitialRetriever, Method, PathTaken, SearchConfig};
use rede_core::templates::Templates;
use rede_core::Error;

fn llm_judge(gateway: Arc<Gateway>) -> JudgeBackend {
    JudgeBackend::Llm {
        gateway,
        templates: Arc::new(Templates::default()),
        config: LlmJudgeConfig::default(),
    }
}

/// Judge that accepts documents whose text contains `word`.
fn keyword_gateway(word: &str) -> Arc<Gateway> {
    mock_gateway(vec![
        MockEntry {
            match_substring: word.into(),
            text: "1".into(),
            first_token_logprobs: Some(BTreeMap::from([("1".into(), -0.05), ("0".into(), -3.0)])),
            delay_ms: None,
        },
        judge_entry(-3.0, -0.05, None),
    ])
}

#[test]
fn llm_judge_feedback_uses_accepted_documents_only() {
    let b = bench(1);
    let gateway = keyword_gateway("t0w");
    let world = b.world(llm_judge(gateway.clone()));
    let config = SearchConfig::default();
    // The mock matches anywhere in the prompt, so skip queries naming the keyword.
    let queries: Vec<_> = b.queries.iter().filter(|q| !q.text.contains("t0w")).collect();
    for q in &queries {
        let (list, trace) = world.retriever().search(Method::Rede, q, &config).unwrap();
        assert_eq!(trace.candidates.len(), 20);
        assert_eq!(trace.judgments.len(), 20);
        assert_eq!(trace.judge_calls, 20);
        assert_eq!(trace.generation_calls, 0);
        for d in &trace.feedback_docs {
            assert!(world.corpus.get(d).unwrap().text.contains("t0w"), "{d}");
        }
        assert_eq!(trace.embedding_fetches, trace.kstar);
        let expected = if trace.kstar > 0 { PathTaken::Rede } else { PathTaken::DefaultEncoder };
        assert_eq!(trace.path_taken, Some(expected));
        assert_eq!(list.len(), 200);
        list.validate().unwrap();
    }
    assert_eq!(gateway.counts().judge, 20 * queries.len() as u64);
}

#[test]
fn kstar_cap_keeps_highest_probabilities() {
    let b = bench(2);
    let world = b.world(b.oracle());
    let mut config = SearchConfig::default();
    config.pipeline.max_kstar = Some(3);
    for q in &b.queries {
        let (_, trace) = world.retriever().search(Method::Rede, q, &config).unwrap();
        assert!(trace.kstar <= 3);
        // Oracle probabilities tie at 1.0, so the cap keeps initial rank order.
        let accepted: Vec<&str> = trace
            .candidates
            .doc_ids()
            .filter(|d| b.qrels.relevance(&q.query_id, d).unwrap_or(0) > 0)
            .take(3)
            .collect();
        assert_eq!(trace.feedback_docs, accepted);
    }
}

#[test]
fn failing_judge_falls_back_to_default_policy() {
    let b = bench(3);
    // No script entry matches judge prompts, so every call fails.
    let gateway = mock_gateway(vec![generate_entry("unused", None)]);
    let world = b.world(llm_judge(gateway));
    let q = &b.queries[0];
    let (list, trace) = world.retriever().search(Method::Rede, q, &SearchConfig::default()).unwrap();
    assert_eq!(trace.path_taken, Some(PathTaken::DefaultEncoder));
    assert_eq!(trace.kstar, 0);
    assert_eq!(trace.skipped.len(), 20);
    let (dense, _) = world.retriever().search(Method::Dense, q, &SearchConfig::default()).unwrap();
    assert_eq!(list, dense);
}

#[test]
fn partial_judge_failures_are_skipped() {
    let b = bench(4);
    let backend = MockBackend::new(vec![
        MockEntry {
            match_substring: "t1w".into(),
            text: "x".into(),
            first_token_logprobs: Some(BTreeMap::from([("maybe".into(), -0.1)])),
            delay_ms: None,
        },
        judge_entry(-0.1, -2.0, None),
    ]);
    let world = b.world(llm_judge(Arc::new(Gateway::new(backend))));
    for q in b.queries.iter().filter(|q| !q.text.contains("t1w")) {
        let (_, trace) = world.retriever().search(Method::Rede, q, &SearchConfig::default()).unwrap();
        assert_eq!(trace.judgments.len() + trace.skipped.len(), 20);
        for s in &trace.skipped {
            assert!(world.corpus.get(&s.doc_id).unwrap().text.contains("t1w"));
            assert!(!trace.feedback_docs.contains(&s.doc_id));
        }
    }
}

#[test]
fn rerank_orders_candidates_by_probability() {
    let b = bench(5);
    let world = b.world(llm_judge(keyword_gateway("t2w")));
    let q = b.queries.iter().find(|q| !q.text.contains("t2w")).unwrap();
    let (list, trace) = world.retriever().search(Method::Rerank, q, &SearchConfig::default()).unwrap();
    assert_eq!(list.len(), trace.candidates.len());
    let mut seen_low = false;
    for e in &list.entries {
        let hit = world.corpus.get(&e.doc_id).unwrap().text.contains("t2w");
        assert!(!(hit && seen_low), "accepted doc ranked below a rejected one");
        seen_low |= !hit;
    }
}

#[test]
fn hyde_prf_fetches_context_before_generating() {
    let mut b = bench(6);
    b.query_vectors.push(("ctx passage".into(), vec![0.5; BENCH_DIM]));
    let gateway = mock_gateway(vec![generate_entry("ctx passage", None)]);
    let world = b.world(b.oracle()).with_gateway(gateway.clone());
    let (_, trace) = world.retriever().search(Method::HydePrf, &b.queries[0], &SearchConfig::default()).unwrap();
    assert_eq!(trace.context_fetches, 20);
    assert_eq!(trace.generation_calls, 8);
    assert_eq!(trace.hypothetical_docs, 8);
    assert_eq!(trace.judge_calls, 0);
    assert!(trace.stage_ms.contains_key("context_fetch") && trace.stage_ms.contains_key("generate"));

    let (_, trace) = world.retriever().search(Method::Hyde, &b.queries[0], &SearchConfig::default()).unwrap();
    assert_eq!(trace.context_fetches, 0);
    assert!(trace.candidates.is_empty());
}

#[test]
fn generation_methods_require_a_gateway() {
    let b = bench(7);
    let world = b.world(b.oracle());
    for m in [Method::Hyde, Method::HydePrf, Method::RedeHydeDefault] {
        assert!(matches!(
            world.retriever().search(m, &b.queries[0], &SearchConfig::default()),
            Err(Error::InvalidConfig(_))
        ));
    }
}

#[test]
fn initial_retriever_choice_changes_candidates() {
    let b = bench(8);
    let world = b.world(b.oracle());
    let mut config = SearchConfig::default();
    let q = &b.queries[0];
    let mut seen = Vec::new();
    for r in [InitialRetriever::Sparse, InitialRetriever::Dense, InitialRetriever::Hybrid] {
        config.pipeline.initial_retriever = r;
        let (_, trace) = world.retriever().search(Method::Rede, q, &config).unwrap();
        seen.push(trace.candidates);
    }
    let (dense, _) = world.retriever().search(Method::Dense, q, &config).unwrap();
    assert_eq!(seen[1].doc_ids().collect::<Vec<_>>(), dense.doc_ids().take(20).collect::<Vec<_>>());
    assert_ne!(seen[0], seen[1]);
}

#[test]
fn parallel_batches_match_sequential() {
    let b = bench(9);
    let world = b.world(llm_judge(keyword_gateway("t3w")));
    let config = SearchConfig::default();
    let seq = run_batch(&world.retriever(), Method::Rede, &b.queries, &config, 1).unwrap();
    let par = run_batch(&world.retriever(), Method::Rede, &b.queries, &config, 4).unwrap();
    for ((a, ta), (p, tp)) in seq.iter().zip(&par) {
        assert_eq!(a, p);
        assert_eq!(ta.feedback_docs, tp.feedback_docs);
    }
}

#[test]
fn distill_export_writes_one_line_per_accepted_query() {
    let b = bench(10);
    let world = b.world(b.oracle());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.jsonl");
    let n = export_distill_dataset(&world.retriever(), &SearchConfig::default(), &b.queries, &path).unwrap();
    let body = std::fs::read_to_string(&path).unwrap();
    assert_eq!(body.lines().count(), n);
    let first: serde_json::Value = serde_json::from_str(body.lines().next().unwrap()).unwrap();
    assert_eq!(first["target"].as_array().unwrap().len(), BENCH_DIM);
    assert!(first["text"].is_string() && first["query_id"].is_string());

    let n = export_distill_dataset(&world.retriever(), &SearchConfig::default(), &[], &path).unwrap();
    assert_eq!(n, 0);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
}
