use std::path::Path;

use artaug::curation::{Decision, Manifest, ReviewServer, Status, Verdict};
use artaug::diffusion::{sample, DenoiserConfig, DenoiserParams, SamplerConfig, TrainConfig};
use artaug::interaction::CriticBackend;
use artaug::lora::{lora_fuse, LoraParams};
use artaug::orchestrator::{
    export_merged, init_run, run_iteration, run_loop, train_base_model, RunConfig, RunDir, RunState, StopReason,
};
use artaug::training::FitConfig;
use artaug::Error;

fn small_config() -> RunConfig {
    RunConfig {
        model: DenoiserConfig {
            hidden: 64,
            ..DenoiserConfig::default()
        },
        base_training: TrainConfig {
            steps: 300,
            batch_size: 16,
            ..TrainConfig::default()
        },
        dataset_per_prompt: 4,
        sampler_steps: 12,
        prompts_per_iteration: 24,
        critic: CriticBackend::RuleBased { max_regions: 4 },
        fit: FitConfig {
            steps: 20,
            learning_rate: 2e-3,
            batch_size: 2,
            rank: 2,
            eval_draws: 2,
            ..FitConfig::default()
        },
        min_pairs: 1,
        // the tiny model's gains are below the default threshold
        epsilon_stop: -1.0,
        max_iters: 2,
        auto_accept: true,
        parallelism: 4,
        seed: 5,
        ..RunConfig::default()
    }
}

fn fresh_run(root: &Path, cfg: &RunConfig) {
    init_run(root, cfg).unwrap();
    train_base_model(root).unwrap();
}

fn file(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn loop_is_deterministic_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for r in [&a, &b, &c] {
        fresh_run(r, &cfg);
    }
    assert_eq!(file(a.join("base.atw")), file(b.join("base.atw")));

    let out = run_loop(&mut RunState::open(&a).unwrap()).unwrap();
    assert_eq!(out.reason, StopReason::MaxIters);
    assert_eq!(out.ran.len(), 2);
    for s in &out.ran {
        assert!(s.pairs.accepted <= s.pairs.auto_kept && s.pairs.auto_kept <= s.pairs.generated);
        assert_eq!(s.pairs.generated, 24);
    }

    // same seed, separate process state
    run_loop(&mut RunState::open(&b).unwrap()).unwrap();
    for rel in [
        "manifest.jsonl",
        "iter1/stats.json",
        "iter2/stats.json",
        "iter2/model.atw",
        "iter2/update.atw",
    ] {
        assert_eq!(file(a.join(rel)), file(b.join(rel)), "{rel} differs");
    }

    // interrupted during iteration 2's training: stats, update, model and
    // some adapters are missing
    {
        let mut st = RunState::open(&c).unwrap();
        run_iteration(&mut st).unwrap();
        run_iteration(&mut st).unwrap();
    }
    let dir = RunDir::new(&c);
    for p in [dir.stats(2), dir.update(2), dir.model(2)] {
        std::fs::remove_file(p).unwrap();
    }
    let loras: Vec<_> = std::fs::read_dir(dir.iter_dir(2).join("loras"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    for p in loras.iter().step_by(2) {
        std::fs::remove_file(p).unwrap();
    }
    let mut st = RunState::open(&c).unwrap();
    assert_eq!(st.completed(), 1);
    let resumed = run_loop(&mut st).unwrap();
    assert_eq!(resumed.ran.len(), 1);
    for rel in ["iter2/stats.json", "iter2/model.atw", "iter2/update.atw"] {
        assert_eq!(file(a.join(rel)), file(c.join(rel)), "{rel} differs after resume");
    }
    assert_eq!(
        Manifest::new(a.join("manifest.jsonl")).latest_view().unwrap(),
        Manifest::new(c.join("manifest.jsonl")).latest_view().unwrap()
    );

    // nothing left to do
    let again = run_loop(&mut RunState::open(&a).unwrap()).unwrap();
    assert!(again.ran.is_empty());
}

#[test]
fn export_and_fusion_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    let cfg = RunConfig {
        max_iters: 1,
        ..small_config()
    };
    fresh_run(&root, &cfg);
    let mut st = RunState::open(&root).unwrap();
    assert!(matches!(export_merged(&st), Err(Error::Contract(_))));
    run_iteration(&mut st).unwrap();
    let merged = export_merged(&st).unwrap();
    let phi1 = &st.updates[0].1;
    for (m, u) in merged.deltas().unwrap().iter().zip(phi1.deltas().unwrap()) {
        assert!(m.max_abs_diff(&u).unwrap() <= 1e-6);
    }
    let on_disk = LoraParams::load(&RunDir::new(&root).merged()).unwrap();
    assert_eq!(on_disk.rank, merged.rank);

    let sampler = SamplerConfig::new(12, 99);
    let p = artaug::world::sample_prompt(3);
    let zero = lora_fuse(&st.base, &on_disk, 0.0).unwrap();
    assert_eq!(zero, st.base);
    let one = lora_fuse(&st.base, &on_disk, 1.0).unwrap();
    let x1 = sample(&one, None, &p, &sampler).unwrap();
    let xk = sample(&st.current, None, &p, &sampler).unwrap();
    let linf = x1
        .pixels()
        .iter()
        .zip(xk.pixels())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(linf <= 1e-4, "L∞ {linf}");
}

#[test]
fn zero_alpha_leaves_model_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    fresh_run(
        &root,
        &RunConfig {
            alpha: 0.0,
            ..small_config()
        },
    );
    let mut st = RunState::open(&root).unwrap();
    let stats = run_iteration(&mut st).unwrap();
    assert!(stats.j > 0);
    assert_eq!(st.current, st.base);
}

#[test]
fn tampered_model_fails_integrity() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    fresh_run(
        &root,
        &RunConfig {
            max_iters: 1,
            ..small_config()
        },
    );
    run_iteration(&mut RunState::open(&root).unwrap()).unwrap();
    let dir = RunDir::new(&root);
    let mut m = DenoiserParams::load(&dir.model(1)).unwrap();
    m.layers[0].weight.data_mut()[0] += 0.01;
    m.save(&dir.model(1)).unwrap();
    assert!(matches!(RunState::open(&root), Err(Error::Integrity(_))));
}

#[test]
fn second_opener_is_locked_out() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    fresh_run(&root, &small_config());
    let _st = RunState::open(&root).unwrap();
    assert!(matches!(RunState::open(&root), Err(Error::Locked(_))));
    assert!(matches!(train_base_model(&root), Err(Error::Locked(_))));
}

#[test]
fn starved_iteration_is_recorded_and_stops_loop() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    // review gate with a zero timeout and nobody reviewing: nothing accepted
    let cfg = RunConfig {
        auto_accept: false,
        review_timeout_secs: Some(0),
        ..small_config()
    };
    fresh_run(&root, &cfg);
    let mut st = RunState::open(&root).unwrap();
    let out = run_loop(&mut st).unwrap();
    assert_eq!(out.reason, StopReason::InsufficientPairs);
    assert_eq!(out.ran.len(), 1);
    assert_eq!(out.ran[0].j, 0);
    assert!(out.ran[0].pairs.review_pending > 0);
    assert_eq!(st.current, st.base);
    assert!(st.updates.is_empty());
    drop(st);
    // the recorded iteration replays on open
    assert_eq!(RunState::open(&root).unwrap().completed(), 1);
}

#[test]
fn human_review_gate_trains_on_verdicts() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    let cfg = RunConfig {
        auto_accept: false,
        review_timeout_secs: Some(120),
        ..small_config()
    };
    fresh_run(&root, &cfg);
    let mut st = RunState::open(&root).unwrap();
    let manifest = st.manifest.clone();
    let server = ReviewServer::start(root.clone(), manifest.clone(), "127.0.0.1:0".parse().unwrap()).unwrap();
    let url = server.url();

    let reviewer = std::thread::spawn(move || {
        let agent = ureq::Agent::new_with_config(ureq::Agent::config_builder().http_status_as_error(false).build());
        let mut decided = Vec::new();
        let deadline = std::time::Instant::now() + std::time::Duration::from_secs(100);
        while std::time::Instant::now() < deadline {
            let pending: Vec<String> = {
                let mut r = agent
                    .get(&format!("{url}/api/pairs?status=review_pending"))
                    .call()
                    .unwrap();
                let v: serde_json::Value = serde_json::from_str(&r.body_mut().read_to_string().unwrap()).unwrap();
                v["items"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|i| i["id"].as_str().unwrap().to_string())
                    .collect()
            };
            if pending.is_empty() && !decided.is_empty() {
                break;
            }
            for (n, id) in pending.into_iter().enumerate() {
                let decision = if n % 2 == 0 { "accept" } else { "reject" };
                let body = serde_json::json!({"decision": decision, "reviewer": "tester"}).to_string();
                let code = agent
                    .post(&format!("{url}/api/pairs/{id}/verdict"))
                    .send(body)
                    .unwrap()
                    .status()
                    .as_u16();
                assert_eq!(code, 200);
                decided.push((id, decision));
            }
            std::thread::sleep(std::time::Duration::from_millis(100));
        }
        decided
    });

    let stats = run_iteration(&mut st).unwrap();
    let decided = reviewer.join().unwrap();
    drop(server);
    let accepted = decided.iter().filter(|(_, d)| *d == "accept").count();
    assert!(accepted > 0);
    assert_eq!(stats.pairs.accepted, accepted);
    assert_eq!(stats.pairs.review_pending, 0);
    let view = manifest.latest_view().unwrap();
    for (id, d) in &decided {
        let rec = &view[&id.parse::<uuid::Uuid>().unwrap()];
        let want = if *d == "accept" {
            Status::Trained
        } else {
            Status::Rejected
        };
        assert_eq!(rec.status, want);
        let v: &Verdict = rec.verdict.as_ref().unwrap();
        assert_eq!(v.reviewer, "tester");
        assert_eq!(v.decision == Decision::Accept, *d == "accept");
        assert!(v.timestamp.is_some());
    }
}
