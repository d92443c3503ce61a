use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::{json, Value};
use spurlens::study_server::{HumanGapSettings, StudyServer, StudyState};
use spurlens_core::gaps::Rate;
use spurlens_core::study::{AnnotationTask, Bucket};

fn tasks() -> Vec<AnnotationTask> {
    (0..4)
        .map(|i| AnnotationTask {
            task_id: format!("task-{i}"),
            image_id: format!("img/{i}.png"),
            target: "dog".into(),
            feature: "leash".into(),
            bucket: if i < 2 { Bucket::Top } else { Bucket::Bottom },
        })
        .collect()
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn get(a: &ureq::Agent, url: &str) -> (u16, Value) {
    let mut r = a.get(url).call().unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap())
}

fn post(a: &ureq::Agent, url: &str, body: &Value) -> (u16, Value) {
    let mut r = a.post(url).send_json(body).unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap())
}

#[test]
fn annotation_round_trip_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("judgments.jsonl");
    let rates: BTreeMap<String, Rate> =
        (0..4).map(|i| (format!("img/{i}.png"), if i < 2 { Rate::new(3, 3) } else { Rate::new(1, 3) })).collect();
    let gap = HumanGapSettings {
        rates: BTreeMap::from([("dog".to_string(), rates)]),
        k: 50,
        model: "m".into(),
        strategy: "baseline".into(),
        seed: 0,
    };
    let state = Arc::new(StudyState::open(tasks(), &log, None, gap.clone()).unwrap());
    let server = StudyServer::start(state, "127.0.0.1:0", 2).unwrap();
    let base = format!("http://{}/api", server.addr);
    let a = agent();

    let (status, next) = get(&a, &format!("{base}/tasks/next?annotator=ann%201"));
    assert_eq!(status, 200);
    assert_eq!(next["task_id"], "task-0");
    assert!(next.get("bucket").is_none(), "bucket leaked: {next}");

    // judge every task: present on the first two, absent on the rest
    for i in 0..4 {
        let body = json!({"task_id": format!("task-{i}"), "annotator_id": "ann 1", "present": i < 2});
        let (status, reply) = post(&a, &format!("{base}/judgments"), &body);
        assert_eq!(status, 201, "{reply}");
    }
    let (_, done) = get(&a, &format!("{base}/tasks/next?annotator=ann%201"));
    assert_eq!(done["done"], true);

    let dup = json!({"task_id": "task-0", "annotator_id": "ann 1", "present": false});
    assert_eq!(post(&a, &format!("{base}/judgments"), &dup).0, 409);
    let unknown = json!({"task_id": "nope", "annotator_id": "ann 1", "present": true});
    assert_eq!(post(&a, &format!("{base}/judgments"), &unknown).0, 404);
    assert_eq!(a.post(&format!("{base}/metrics")).send_empty().unwrap().status().as_u16(), 405);

    let (status, m) = get(&a, &format!("{base}/metrics"));
    assert_eq!(status, 200);
    assert_eq!(m["n_judgments"], 4);
    assert_eq!(m["pooled"]["average"], 1.0);
    let hg = &m["human_gaps"][0];
    assert_eq!((hg["n_present"].as_u64(), hg["n_absent"].as_u64()), (Some(2), Some(2)));
    let g = hg["report"]["gap"].as_f64().unwrap();
    assert!((g - 2.0 / 3.0).abs() < 1e-12, "{g}");
    server.stop();

    // a restarted server replays the log
    let state = Arc::new(StudyState::open(tasks(), &log, None, gap).unwrap());
    assert_eq!(state.snapshot().judgments().len(), 4);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 4);
}
