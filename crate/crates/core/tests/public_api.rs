//! Cross-module flows through the public API only.

use std::fs;

use gymsmith_core::agreement_verifier::{verify, CandidateTuple, ConditionId, VerifierConfig};
use gymsmith_core::diff_engine::{compute_diff, default_mask, DiffReport};
use gymsmith_core::reward_harness::EnvironmentHandle;
use gymsmith_core::session_store::{InjectionAction, SessionId, SessionStore, Timestamp};
use gymsmith_core::state_document::StateValue;
use gymsmith_core::traj_slicer::{
    proportional_counter, slice_trajectory, to_jsonl, Item, Role, Slice, Trajectory, Turn,
};

fn v(text: &str) -> StateValue {
    StateValue::from_json_str(text).unwrap()
}

#[test]
fn store_snapshots_feed_the_diff() {
    let store = SessionStore::default();
    let sid = SessionId::new("flow").unwrap();
    let t = Timestamp::from_secs(1);
    store.apply_action(&sid, InjectionAction::Set, Some(v(r#"{"doc":{"title":"a","lastViewedAt":1}}"#)), t).unwrap();
    store.apply_action(&sid, InjectionAction::Merge, Some(v(r#"{"doc":{"title":"b","lastViewedAt":9}}"#)), t).unwrap();
    let session = store.get_or_create(&sid, t);
    let diff = compute_diff(session.baseline(store.seed()), &session.current_snapshot, &default_mask());
    assert_eq!(diff.keys().collect::<Vec<_>>(), vec!["doc.title"]);

    let wire = serde_json::to_value(&diff).unwrap();
    assert_eq!(wire, serde_json::json!({"doc.title": {"old": "a", "new": "b"}}));
    assert_eq!(serde_json::from_value::<DiffReport>(wire).unwrap(), diff);
}

#[test]
fn forbidden_reward_is_never_executed() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, body: &str| {
        let path = dir.path().join(name);
        fs::write(&path, body).unwrap();
        path
    };
    let tuple = CandidateTuple {
        task_id: "exists_001".into(),
        initial_setup: write("initial_setup.py", "pass\n"),
        golden_patch: write("golden_patch.py", "open('report.xlsx', 'w').close()\n"),
        reward: write(
            "reward.py",
            "import os\nscore = 0.0\nif os.path.exists('report.xlsx'):\n    score += 1.0\nprint(f'REWARD: {score}')\n",
        ),
    };
    let init = EnvironmentHandle::local_sandbox(dir.path().join("init")).unwrap();
    let gold = EnvironmentHandle::local_sandbox(dir.path().join("gold")).unwrap();
    let report = verify(&tuple, &init, &gold, &VerifierConfig::default());
    assert!(!report.passed());
    // Both setups ran; the reward itself was not trusted with a run.
    assert_eq!(report.feedback.failing_conditions, vec![ConditionId::C3, ConditionId::C4, ConditionId::C5]);
    assert!(gold.root.join("report.xlsx").is_file());
    for id in [ConditionId::C3, ConditionId::C4] {
        assert_eq!(report.condition(id).unwrap().observed, None);
    }
    let c5 = report.condition(ConditionId::C5).unwrap();
    assert_eq!(c5.matched_pattern.as_deref(), Some("P4_BARE_EXISTENCE"));
}

#[test]
fn slices_survive_a_jsonl_round_trip() {
    let mut turns = Vec::new();
    for i in 0..4 {
        turns.push(Turn::new(Role::User, vec![Item::image(format!("s{i}"))]));
        turns.push(Turn::assistant(vec![Item::text("ok")], true, 1));
    }
    let trajectory = Trajectory { turns, episode_reward: 1.0 };
    let slices = slice_trajectory(&trajectory, 2, 10_000, proportional_counter(4, 100)).unwrap();
    let text = to_jsonl(&slices);
    let back: Vec<Slice> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, slices);
    assert_eq!(back.iter().map(|s| s.collapsed_length).collect::<Vec<_>>(), vec![0, 2]);
}
