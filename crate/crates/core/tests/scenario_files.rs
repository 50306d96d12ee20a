use slqr::linalg::Mat;
use slqr::scenario::{Mode, SharedScenario};
use slqr::sim::HumanPolicy;

#[test]
fn car_following_round_trips_through_json() {
    for mode in Mode::ALL {
        let s = SharedScenario::car_following(mode, 42);
        let back = SharedScenario::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back.to_json().unwrap(), s.to_json().unwrap());
        assert_eq!(back.mode, mode);
        assert_eq!(back.nudge.seed, 42);
    }
}

#[test]
fn load_reads_a_file() {
    let s = SharedScenario::car_following(Mode::OffPolicyTakeover, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenario.json");
    std::fs::write(&path, s.to_json().unwrap()).unwrap();
    assert_eq!(SharedScenario::load(&path).unwrap().x0, s.x0);
}

#[test]
fn destabilizing_human_is_rejected() {
    let mut s = SharedScenario::car_following(Mode::OnPolicyMinIntervention, 0);
    s.human = HumanPolicy::new(Mat::from_row_slice(1, 2, &[-1.0, 1.0]), s.human.ch().clone()).unwrap();
    let err = SharedScenario::from_json(&s.to_json().unwrap()).unwrap_err();
    assert!(err.to_string().contains("not stabilizing"), "{err}");
}

#[test]
fn unknown_schema_version_is_rejected() {
    let mut s = SharedScenario::car_following(Mode::OnPolicyMinIntervention, 0);
    s.schema_version = 99;
    assert!(SharedScenario::from_json(&s.to_json().unwrap()).is_err());
}

#[test]
fn malformed_matrices_are_rejected() {
    let text = SharedScenario::car_following(Mode::OnPolicyMinIntervention, 0)
        .to_json()
        .unwrap()
        .replacen("[\n        -1.0,\n        0.0,\n        0.0\n      ]", "[-1.0, 0.0]", 1);
    assert!(SharedScenario::from_json(&text).is_err());
    assert!(SharedScenario::from_json("{}").is_err());
}

#[test]
fn defaults_fill_optional_fields() {
    let json = r#"{
        "schema_version": 1,
        "plant": {"a": [[-1.0]], "b": [[1.0]]},
        "human": {"kh": [[0.0]], "ch": [[1.0]]},
        "weights": {"q": [[1.0]], "m": [[0.0]], "r": [[1.0]], "tau": 0.05},
        "mode": "on_policy_min_intervention",
        "x0": [1.0]
    }"#;
    let s = SharedScenario::from_json(json).unwrap();
    assert_eq!(s.substeps, 100);
    assert_eq!(s.nudge.hold_duration, 0.05);
    assert!(s.nudge.amplitude.is_none());
    assert_eq!(s.learner.max_iterations, 50);
}
