mod common;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::{Fixture, MockServer, MockState, PLANTED, TARGET};
use spurlens::config::RunConfig;
use spurlens::error::Error;
use spurlens::loader::{load_annotations, Format, LoadedDataset};
use spurlens::pipeline::{
    self, eval_images, original_images, run_pa_audit, score_pool, ClassStatus, RunCtx,
};
use spurlens::services::Services;
use spurlens::store::{Cache, EndpointKind};
use spurlens_core::eval::{Strategy, StrategyInputs};

struct Env {
    fixture: Fixture,
    mock: MockServer,
    cfg: RunConfig,
    data: LoadedDataset,
}

fn env(n: usize) -> Env {
    let fixture = Fixture::planted(n, 0);
    let mock = MockServer::start(Arc::new(MockState::new(0, fixture.tagged_hashes.clone())));
    let out = fixture.path().join("out");
    let cfg_path = fixture.write_config(&mock.base_url, &out, &fixture.path().join("cache"));
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let data = load_annotations(&fixture.manifest, Format::SimpleManifest, None).unwrap();
    Env { fixture, mock, cfg, data }
}

fn ids(data: &LoadedDataset) -> Vec<String> {
    data.dataset.images().iter().map(|r| r.image_id.clone()).collect()
}

#[test]
fn planted_run_finds_the_cue_and_drops_the_failing_filter() {
    let e = env(400);
    let svc = Services::from_config(&e.cfg, false).unwrap();
    let report = run_pa_audit(&RunCtx { cfg: &e.cfg, data: &e.data, svc: &svc }).unwrap();
    let class = &report.classes[0];
    assert_eq!(class.status, ClassStatus::Evaluated);
    assert_eq!(class.n_candidates, 32);
    assert_eq!(class.active_features.len(), 31);
    assert!(!class.active_features.iter().any(|f| f == common::DISTRACTOR_FAILING));
    assert_eq!(class.best.as_ref().unwrap().report.feature, PLANTED);
    assert_eq!(e.mock.state.counters.unexpected.load(Ordering::SeqCst), 0);
    assert_eq!(e.mock.state.counters.detect.load(Ordering::SeqCst), 400);
    let top = &class.best.as_ref().unwrap().report.top_ids;
    assert!(top.iter().all(|id| e.fixture.tagged_ids[id]));
}

#[test]
fn scoring_twice_costs_no_network_calls() {
    let e = env(40);
    let svc = Services::from_config(&e.cfg, false).unwrap();
    let pool = ids(&e.data);
    let features = vec![PLANTED.to_string(), "kettle".to_string()];
    let images = original_images(&e.data);
    let first = score_pool(&svc, &pool, &features, &images, 0.01).unwrap();
    let calls = e.mock.state.counters.total();
    assert_eq!(calls, 40);
    let offline = Services::from_config(&e.cfg, true).unwrap();
    let second = score_pool(&offline, &pool, &features, &images, 0.01).unwrap();
    assert_eq!(first, second);
    assert_eq!(e.mock.state.counters.total(), calls);
    // query order does not change the cache key
    let reversed: Vec<String> = features.iter().rev().cloned().collect();
    score_pool(&offline, &pool, &reversed, &images, 0.01).unwrap();
}

#[test]
fn out_of_range_detector_scores_are_item_failures_until_the_budget() {
    let e = env(200);
    let svc = Services::from_config(&e.cfg, false).unwrap();
    let pool = ids(&e.data);
    let images = original_images(&e.data);
    let hash_of = |id: &str| e.data.dataset.get(id).unwrap().content_hash.to_hex();
    e.mock.state.faults.lock().unwrap().bad_score_images.insert(hash_of(&pool[3]));
    let features = vec![PLANTED.to_string()];
    let art = score_pool(&svc, &pool, &features, &images, 0.01).unwrap();
    assert_eq!(art.errored.len(), 1);
    assert!(art.errored[&pool[3]].contains("1.2"), "{:?}", art.errored);
    assert_eq!(art.scored_pool().len(), 199);
    assert!(!art.scores[PLANTED].contains_key(&pool[3]));

    // invalid replies are never cached, so a later run asks again
    for id in &pool[10..13] {
        e.mock.state.faults.lock().unwrap().bad_score_images.insert(hash_of(id));
    }
    let err = score_pool(&svc, &pool, &["bucket".to_string()], &images, 0.01).unwrap_err();
    match err {
        Error::Budget { stage, errored, total, .. } => assert_eq!((stage, errored, total), ("detect", 4, 200)),
        other => panic!("expected budget error, got {other}"),
    }
}

#[test]
fn transient_server_errors_are_retried() {
    let e = env(4);
    let svc = Services::from_config(&e.cfg, false).unwrap();
    e.mock.state.faults.lock().unwrap().chat_500s = 1;
    let reply = svc.ask(&spurlens_core::proposal::PromptVariant::Objects.prompt(16, TARGET)).unwrap();
    assert!(reply.starts_with("1. lanyard"));
    assert_eq!(e.mock.state.counters.chat.load(Ordering::SeqCst), 2);
}

#[test]
fn eval_rates_match_a_hand_computed_mean() {
    let e = env(6);
    let svc = Services::from_config(&e.cfg, false).unwrap();
    let pool = ids(&e.data);
    let images = original_images(&e.data);
    let batch = eval_images(&svc, &pool, TARGET, Strategy::Baseline, &StrategyInputs::default(), &images).unwrap();
    assert!(batch.errored.is_empty());
    assert_eq!(e.mock.state.counters.chat.load(Ordering::SeqCst), 18);
    // recompute each image's rate from its raw replies
    let mut by_hand = 0.0;
    for id in &pool {
        let rec = &batch.records[id].record;
        assert_eq!(rec.raw_responses.len(), 3);
        assert_eq!(batch.records[id].cache_keys.len(), 3);
        let yes = rec.raw_responses.iter().filter(|r| r.starts_with("Yes")).count();
        assert_eq!(rec.image_rate.yes as usize, yes);
        by_hand += yes as f64 / 3.0;
    }
    by_hand /= 6.0;
    let (top, bottom) = (pool[..3].to_vec(), pool[3..].to_vec());
    let meta = spurlens_core::gaps::GapMeta {
        kind: spurlens_core::gaps::GapKind::Pa,
        model: "m".into(),
        target: TARGET.into(),
        feature: "f".into(),
        strategy: "baseline".into(),
    };
    let g = pipeline::gap_for_sets(&top, &bottom, &batch.rates(), meta).unwrap().unwrap();
    let mean = (g.report.rate_s + g.report.rate_c) / 2.0;
    assert!((mean - by_hand).abs() < 1e-12, "{mean} vs {by_hand}");
}

#[test]
fn offline_miss_names_the_request() {
    let e = env(2);
    let offline = Services::from_config(&e.cfg, true).unwrap();
    match offline.ask("never asked").unwrap_err() {
        Error::CacheMiss { kind, key } => {
            assert_eq!(kind, "chat");
            assert_eq!(key.len(), 64);
        }
        other => panic!("expected cache miss, got {other}"),
    }
    assert_eq!(e.mock.state.counters.total(), 0);
}

#[test]
fn concurrent_identical_requests_call_once() {
    let dir = tempfile::tempdir().unwrap();
    let cache = Arc::new(Cache::open(dir.path()).unwrap());
    let calls = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..16 {
            s.spawn(|| {
                for i in 0..20 {
                    let req = format!("req-{}", i % 5);
                    let got = cache
                        .get_or_call(EndpointKind::Chat, req.as_bytes(), || {
                            calls.fetch_add(1, Ordering::SeqCst);
                            std::thread::sleep(std::time::Duration::from_millis(2));
                            Ok(format!("resp-{req}").into_bytes())
                        })
                        .unwrap();
                    assert_eq!(got, format!("resp-{req}").into_bytes());
                }
            });
        }
    });
    assert_eq!(calls.load(Ordering::SeqCst), 5);
    assert_eq!(cache.entries(EndpointKind::Chat).unwrap().len(), 5);
}

#[test]
fn class_artifacts_are_written() {
    let e = env(120);
    let mut cfg = e.cfg.clone();
    cfg.k = Some(10);
    let svc = Services::from_config(&cfg, false).unwrap();
    let ctx = RunCtx { cfg: &cfg, data: &e.data, svc: &svc };
    run_pa_audit(&ctx).unwrap();
    let dir = ctx.class_dir(pipeline::AuditKind::Pa, TARGET);
    for f in ["candidates.json", "filtered.json", "scores.json", "rankings.json", "records.jsonl", "rates.json", "gaps.json", "class.json"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let rates: BTreeMap<String, spurlens_core::gaps::Rate> = pipeline::read_json(&dir.join("rates.json")).unwrap();
    assert!(!rates.is_empty());
}
