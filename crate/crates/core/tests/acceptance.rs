//! Acceptance criteria 1-10. Runs without the libtest harness so that one
//! PASS/FAIL line per criterion is always printed; exits non-zero if any
//! criterion fails.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use humantool_core::batch::{self, sweep_grid, SeedResult};
use humantool_core::host::{Host, HostConfig};
use humantool_core::interaction::{
    advance_stage, allowed_behaviors, compose_call, transition_table_json, Behavior, Stage, StageEvent,
};
use humantool_core::orchestrator::{Mode, RecordOutcome, ResponseScript, SessionConfig};
use humantool_core::planner::{ScriptedPlan, ScriptedPlanner};
use humantool_core::protocol::{decode, decode_frame, encode};
use humantool_core::sim::{random_scenario, run_scenario, SimParams};
use humantool_core::store::{replay, ActivationReport};
use humantool_core::taskgraph::{allocate, AllocationPolicy, NodeStatus, RequirementFlag, TaskNode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let grid = sweep_grid(&[1, 3, 5], &[1, 4, 5]);
    let actors = batch::sweep(&grid, 3);
    let mut mismatches = 0usize;
    for (point, actor) in grid.iter().zip(&actors) {
        let node = TaskNode::leaf("leaf", "sweep", RequirementFlag::subset(point.flags_mask));
        let policy = AllocationPolicy::with_thresholds(point.capability_threshold, point.delegation_cutoff);
        let profile = batch::sweep_profile(point, 3);
        let alloc = allocate(&node, &profile, &policy).map_err(|e| e.to_string())?;
        let expected = oracle_allocation(
            point.flags_mask,
            point.cognitive_creativity,
            profile.authority.delegation_level.get(),
            point.capability_threshold,
            point.delegation_cutoff,
        );
        if allocation_names(&alloc) != expected || alloc.actor() != *actor {
            mismatches += 1;
        }
    }
    let elapsed = started.elapsed();
    check!(mismatches == 0, "{mismatches} mismatches over {} points", grid.len());
    check!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{} points, 0 mismatches, {:.2?}", grid.len(), elapsed))
}

/// The transition table written out by hand.
fn expected_transition(from: &str, event: &str) -> &'static str {
    let to = match (from, event) {
        (_, "session_aborted") => "ending",
        ("initial", "context_established") => "during",
        ("during", "refusal_received") | ("during", "misunderstanding_detected") => "error_handling",
        ("error_handling", "repaired") | ("error_handling", "repair_abandoned") => "during",
        ("during", "all_nodes_terminal") => "ending",
        _ => "",
    };
    if to.is_empty() {
        Stage::ALL.iter().find(|s| s.as_str() == from).unwrap().as_str()
    } else {
        to
    }
}

fn event_name(e: StageEvent) -> String {
    serde_json::to_value(e).unwrap().as_str().unwrap().to_string()
}

fn criterion_2() -> Outcome {
    let mut cases = 0;
    for s in Stage::ALL {
        for e in StageEvent::ALL {
            cases += 1;
            let got = advance_stage(s, e).as_str();
            let want = expected_transition(s.as_str(), &event_name(e));
            check!(got == want, "({}, {}) -> {got}, expected {want}", s.as_str(), event_name(e));
        }
    }
    check!(cases == 36, "{cases} cases");
    let mut seen = BTreeSet::from([Stage::Initial]);
    let mut frontier = vec![Stage::Initial];
    while let Some(s) = frontier.pop() {
        for e in StageEvent::ALL {
            let t = advance_stage(s, e);
            if seen.insert(t) {
                frontier.push(t);
            }
        }
    }
    check!(seen.len() == 4, "reachable: {seen:?}");
    check!(StageEvent::ALL.iter().all(|e| advance_stage(Stage::Ending, *e) == Stage::Ending), "ending is not absorbing");
    let exported = transition_table_json()["transitions"].as_array().map(Vec::len).unwrap_or(0);
    // 3 non-ending stages abort to ending, plus the six named moves.
    check!(exported == 9, "exported table has {exported} non-identity rows");
    Ok("36/36 transitions, 4 stages reachable, ending absorbing".into())
}

const TABLE: [(&str, &[&str]); 4] = [
    ("initial", &["prime", "configure"]),
    ("during", &["probe", "cue", "elicit", "augment", "guide", "critique", "reflect", "approve"]),
    ("error_handling", &["explain", "correct"]),
    ("ending", &["approve", "reflect", "explain"]),
];

fn criterion_3() -> Outcome {
    let union: BTreeSet<Behavior> = Stage::ALL.iter().flat_map(|s| allowed_behaviors(*s)).collect();
    check!(union.len() == 12 && Behavior::ALL.iter().all(|b| union.contains(b)), "union has {} behaviors", union.len());
    let node = TaskNode::leaf("n", "node", []);
    let mut cases = 0;
    for s in Stage::ALL {
        for b in Behavior::ALL {
            cases += 1;
            let legal = TABLE.iter().any(|(st, bs)| *st == s.as_str() && bs.contains(&b.as_str()));
            let ok = compose_call(b, s, &node, None, "prompt").is_ok();
            check!(ok == legal, "compose_call({}, {}) ok={ok}, table says {legal}", b.as_str(), s.as_str());
        }
    }
    check!(cases == 48, "{cases} cases");
    Ok("12 behaviors covered, 48/48 stage-behavior pairs agree".into())
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..1000 {
        let msg = random_message(&mut rng);
        let bytes = encode(&msg).map_err(|e| e.to_string())?;
        let back = decode(&bytes).map_err(|e| format!("message {i}: {e}"))?;
        check!(back == msg, "message {i} changed on round trip");
    }
    let goldens = golden_messages();
    for (name, msg) in &goldens {
        let path = golden_dir().join("frames").join(format!("{name}.frame"));
        let expected = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        check!(encode(msg).map_err(|e| e.to_string())? == expected, "golden {name} differs");
    }
    let corpus = malformed_frames();
    check!(corpus.len() >= 20, "only {} malformed cases", corpus.len());
    for (name, bytes) in &corpus {
        let r = std::panic::catch_unwind(|| decode(bytes).is_err());
        match r {
            Ok(true) => {}
            Ok(false) => return Err(format!("malformed case `{name}` decoded")),
            Err(_) => return Err(format!("decoder panicked on `{name}`")),
        }
        check!(std::panic::catch_unwind(|| decode_frame(bytes).map(|_| ())).is_ok(), "decode_frame panicked on `{name}`");
    }
    Ok(format!("1000 round trips, {} golden frames byte-exact, {} malformed rejected", goldens.len(), corpus.len()))
}

fn criterion_5(results: &[SeedResult], elapsed: Duration) -> Outcome {
    let mut calls = 0;
    for r in results {
        let out = r.outcome.as_ref().map_err(|e| format!("seed {}: {e}", r.seed))?;
        let structural: Vec<_> = out.violations.iter().filter(|v| !v.contains("hash")).collect();
        check!(structural.is_empty(), "seed {}: {:?}", r.seed, structural);
        calls += out.summary.calls_issued;
    }
    check!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("{} sessions, {calls} calls each closed once, all terminated, {:.2?}", results.len(), elapsed))
}

fn criterion_6() -> Outcome {
    let (session, summary) = run_fixture("porto", "booking", "booking.silent", SessionConfig::default());
    let confirm = session.state().tree.get("confirm").unwrap().status;
    check!(confirm == NodeStatus::Failed, "safety-critical node ended {confirm:?}");
    check!(session.is_terminal(), "session did not reach ending");
    let approved = summary.records.iter().any(|r| r.node_id == "confirm" && r.outcome == RecordOutcome::Answered);
    check!(!approved, "payment node shows an answer");

    let (session, summary) = run_fixture("trip", "trip5", "trip5.silent", SessionConfig::default());
    let hotel = session.state().tree.get("hotel").unwrap().status;
    check!(hotel == NodeStatus::Done, "non-authority node ended {hotel:?}");
    let fell_back = summary.records.iter().any(|r| r.node_id == "hotel" && r.outcome == RecordOutcome::AiExecuted);
    check!(fell_back, "no AI execution after the timeout");
    check!(session.is_terminal(), "trip session did not reach ending");
    Ok("unanswered approval -> failed, session ended; unanswered preference -> AI, done".into())
}

fn criterion_7() -> Outcome {
    let params = SimParams::default();
    let seeds: Vec<u64> = (1000..1050).collect();
    for r in batch::run(&seeds, &params, Mode::AiOnly) {
        let out = r.outcome.map_err(|e| format!("seed {}: {e}", r.seed))?;
        check!(out.summary.calls_issued == 0, "seed {}: {} calls", r.seed, out.summary.calls_issued);
        check!(out.summary.human_invocations == 0, "seed {}: human invocations recorded", r.seed);
        check!(out.summary.records.iter().all(|rec| !rec.outcome.is_human()), "seed {}: human record", r.seed);
    }
    for name in ["trip5", "booking"] {
        let mut host = Host::new(vec![profile()], Arc::new(ScriptedPlanner::new(plan(name))), HostConfig::default());
        let goal = plan(name).goal_pattern;
        let run = drive_host(&mut host, "s", &goal, "ai_only", &mut ResponseScript::default());
        check!(run.tool_calls == 0, "{name}: {} tools/call frames over the wire", run.tool_calls);
    }
    let (_, human) = run_fixture("a", "all_ai", "booking", SessionConfig::with_mode(Mode::HumanTool));
    let (_, ai) = run_fixture("a", "all_ai", "booking", SessionConfig::with_mode(Mode::AiOnly));
    check!(human.tree_hash == ai.tree_hash, "all-AI tree hashes differ");
    for seed in 0..30u64 {
        let mut scenario = random_scenario(seed, &SimParams { ai_failure_pct: 0, ..params });
        scenario.plan = strip_flags(scenario.plan);
        let id = format!("p{seed}");
        let (_, h) = run_scenario(&id, &scenario, SessionConfig::with_mode(Mode::HumanTool)).map_err(|e| e.to_string())?;
        let (_, a) = run_scenario(&id, &scenario, SessionConfig::with_mode(Mode::AiOnly)).map_err(|e| e.to_string())?;
        check!(h.tree_hash == a.tree_hash, "seed {seed}: all-AI tree hashes differ");
    }
    Ok("50 random ai-only runs without calls, 0 frames via host, 31 all-AI trees hash-equal".into())
}

fn strip_flags(mut plan: ScriptedPlan) -> ScriptedPlan {
    let nodes = plan
        .tree
        .nodes()
        .iter()
        .cloned()
        .map(|mut n| {
            n.requirement_flags.clear();
            n
        })
        .collect();
    plan.tree = humantool_core::taskgraph::TaskTree::new(nodes).unwrap();
    plan
}

fn criterion_8(results: &[SeedResult]) -> Outcome {
    for r in results {
        let out = r.outcome.as_ref().map_err(|e| e.clone())?;
        check!(out.replay_hash.as_deref() == Some(out.summary.state_hash.as_str()), "seed {}: replay hash differs", r.seed);
    }
    let (session, summary) = run_fixture("trip5", "trip5", "trip5", SessionConfig::default());
    let entries = session.log().entries().collect::<Vec<_>>();
    let replayed = replay(&entries).map_err(|e| e.to_string())?.ok_or("empty log")?;
    check!(replayed.state_hash() == summary.state_hash, "trip fixture replay differs");
    let golden = std::fs::read_to_string(golden_dir().join("trip5.hash")).map_err(|e| e.to_string())?;
    check!(golden.trim() == summary.state_hash, "trip fixture hash drifted from golden");
    Ok(format!("{} replays hash-equal to live state", results.len() + 1))
}

fn criterion_9() -> Outcome {
    let (session, _) = run_fixture("porto", "booking", "booking", SessionConfig::default());
    let report = ActivationReport::from_entries(&session.log().entries().collect::<Vec<_>>());
    let golden = std::fs::read_to_string(golden_dir().join("booking.report.json")).map_err(|e| e.to_string())?;
    let golden: ActivationReport = serde_json::from_str(&golden).map_err(|e| e.to_string())?;
    check!(report == golden, "booking report differs from golden");
    // Hand count for the booking fixture: prime, three preference/private
    // questions, the payment approval, and the closing reflection.
    check!(report.totals.calls_issued == 6 && report.totals.calls_with_reason == 4, "booking totals {:?}", report.totals);
    check!(report.interaction_behaviors[&Behavior::Elicit] == 3, "elicit count");
    check!(report.interaction_behaviors[&Behavior::Approve] == 1, "approve count");

    for seed in (0..300).step_by(7) {
        let scenario = random_scenario(seed, &SimParams::default());
        let (session, _) = run_scenario(&format!("r{seed}"), &scenario, SessionConfig::default()).map_err(|e| e.to_string())?;
        let report = ActivationReport::from_entries(&session.log().entries().collect::<Vec<_>>());
        let human: Vec<_> = session
            .log()
            .events()
            .iter()
            .filter_map(|e| match e {
                humantool_core::orchestrator::SessionEvent::Invocation(r) if r.call_id.is_some() => Some(r),
                _ => None,
            })
            .collect();
        let behaviors: u64 = report.interaction_behaviors.values().sum();
        let whys: u64 = report.why_need_human.values().sum();
        check!(behaviors == human.len() as u64, "seed {seed}: behaviors {behaviors} vs {} calls", human.len());
        check!(whys == human.iter().filter(|r| r.reason.is_some()).count() as u64, "seed {seed}: why total {whys}");
        check!(behaviors == session.state().calls_issued, "seed {seed}: behaviors vs state counter");
    }
    Ok("golden report matches hand count; totals hold on 43 random logs".into())
}

fn main() -> ExitCode {
    // Nothing below may reach a network or read credentials.
    for var in ["HTTP_PROXY", "HTTPS_PROXY", "ALL_PROXY", "http_proxy", "https_proxy", "all_proxy"] {
        std::env::set_var(var, "http://127.0.0.1:9");
    }

    let started = Instant::now();
    let seeds: Vec<u64> = (0..100).collect();
    let sim = batch::run(&seeds, &SimParams::default(), Mode::HumanTool);
    let sim_elapsed = started.elapsed();

    let outcomes: Vec<(u32, Outcome)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5(&sim, sim_elapsed)),
        (6, criterion_6()),
        (7, criterion_7()),
        (8, criterion_8(&sim)),
        (9, criterion_9()),
    ];
    let offline = if outcomes.iter().all(|(_, o)| o.is_ok()) {
        Ok("criteria 1-9 ran with scripted planners, proxies pointed at a closed port".to_string())
    } else {
        Err("an earlier criterion failed".to_string())
    };
    let mut failed = 0;
    for (n, outcome) in outcomes.into_iter().chain([(10, offline)]) {
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL  {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
