mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use common::{Fixture, MockServer, MockState, PLANTED, TARGET};
use serde_json::Value;

struct Run {
    fixture: Fixture,
    mock: MockServer,
    cfg: PathBuf,
    out: PathBuf,
}

fn setup(n: usize) -> Run {
    setup_with(Fixture::planted(n, 0))
}

fn setup_with(fixture: Fixture) -> Run {
    let mock = MockServer::start(Arc::new(MockState::new(0, fixture.tagged_hashes.clone())));
    let out = fixture.path().join("out");
    let cfg = fixture.write_config(&mock.base_url, &out, &fixture.path().join("cache"));
    Run { fixture, mock, cfg, out }
}

fn spurlens(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spurlens"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "status {:?}\n{}", out.status, String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

#[test]
fn stage_commands_compose_into_a_report() {
    let r = setup(160);
    let class_dir = r.out.join("recognition").join(TARGET);
    for stage in ["propose", "filter", "detect", "rank", "eval", "gaps", "report"] {
        ok(spurlens(&r.cfg, &[stage, "--k", "20"]));
    }
    for f in ["candidates.json", "filtered.json", "scores.json", "rankings.json", "records.jsonl", "rates.json", "gaps.json", "class.json"] {
        assert!(class_dir.join(f).exists(), "missing {f}");
    }
    let report = json(&r.out.join("recognition/report.json"));
    let best = &report["classes"][0]["best"];
    assert_eq!(best["feature"], PLANTED);
    assert_eq!(best["k"], 20);
    let csv = std::fs::read_to_string(r.out.join("recognition/report.csv")).unwrap();
    assert!(csv.starts_with("dataset,model,class,kind,feature,K,rate_s,rate_c,gap,strategy,n_errored\n"));
    assert!(csv.lines().any(|l| l.contains(",lanyard,20,")));

    // a later stage rerun reuses the cache
    let calls = r.mock.state.counters.total();
    ok(spurlens(&r.cfg, &["eval", "--k", "20"]));
    assert_eq!(r.mock.state.counters.total(), calls);

    // spurious strategies take their cues from the saved baseline gaps
    ok(spurlens(&r.cfg, &["eval", "--k", "20", "--strategy", "spurious-top"]));
    assert!(r.mock.state.counters.total() > calls);
}

#[test]
fn analysis_commands_write_their_artifacts() {
    let r = setup_with(Fixture::planted(120, 0).with_negatives(40));
    ok(spurlens(&r.cfg, &["run-pa", "--k", "10", "--class", TARGET]));
    let dir = r.out.join("recognition").join(TARGET);
    // at this small K the max-gap cue is not necessarily the planted one
    let best = json(&dir.join("class.json"))["best"]["feature"].clone();

    ok(spurlens(&r.cfg, &["diversity", "--n-tilde", "3", "--class", TARGET]));
    let div = json(&dir.join("diversity.json"));
    assert_eq!(div["per_tau_k"].as_array().unwrap().len(), 41);
    assert_eq!(div["n_tilde"], 3);

    ok(spurlens(&r.cfg, &["sweep-k", "--k", "10", "--ks", "5,10,20", "--class", TARGET]));
    let sweep = json(&dir.join("sweep_k.json"));
    let gaps: Vec<f64> = ["5", "10", "20"].iter().map(|k| sweep[k]["gap"].as_f64().unwrap()).collect();
    assert_eq!(sweep["10"]["feature"], best);
    assert!(gaps.iter().all(|g| g.is_finite()));

    ok(spurlens(&r.cfg, &["baseline", "--k", "10", "--rankings", "4", "--repeats", "4", "--class", TARGET]));
    let base = json(&dir.join("random_baseline.json"));
    let planted = json(&dir.join("class.json"))["best"]["gap"].as_f64().unwrap();
    assert!(base["value"].as_f64().unwrap() < planted, "{base}");

    ok(spurlens(&r.cfg, &["probe", "--k", "10", "--x", "20", "--k-holdout", "20", "--runs", "2", "--class", TARGET]));
    let probe = json(&dir.join("probe.json"));
    assert_eq!(probe["feature"], best);
    assert_eq!(probe["result"]["per_run"].as_array().unwrap().len(), 2);
    assert!(r.mock.state.counters.embed.load(std::sync::atomic::Ordering::SeqCst) > 0);

    ok(spurlens(&r.cfg, &["study", "sample", "--per-bucket", "3", "--class", TARGET]));
    let tasks = json(&r.out.join("study/tasks.json"));
    assert_eq!(tasks.as_array().unwrap().len(), 6);
}

#[test]
fn budget_overrun_exits_with_code_two() {
    let r = setup(100);
    {
        let hashes: Vec<String> = r.fixture.tagged_hashes.keys().take(3).cloned().collect();
        r.mock.state.faults.lock().unwrap().bad_score_images.extend(hashes);
    }
    let out = spurlens(&r.cfg, &["run-pa", "--k", "10"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&r.out.join("recognition/report.json"));
    assert_eq!(report["classes"][0]["status"], "budget_exceeded");
}

#[test]
fn offline_run_without_cache_fails_cleanly() {
    let r = setup(20);
    let out = spurlens(&r.cfg, &["propose", "--offline"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cache"));
    assert_eq!(r.mock.state.counters.total(), 0);
}

#[test]
fn ablate_blank_writes_a_black_png() {
    let r = setup(4);
    let target = r.fixture.path().join("blank.png");
    ok(spurlens(&r.cfg, &["ablate", "blank", "--width", "32", "--height", "16", "--output", target.to_str().unwrap()]));
    let img = image::open(&target).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (32, 16));
    assert!(img.pixels().all(|p| p.0 == [0, 0, 0]));
}

#[test]
fn unknown_setup_is_rejected_by_the_parser() {
    let r = setup(4);
    let out = spurlens(&r.cfg, &["run-hr", "--setup", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));
}
