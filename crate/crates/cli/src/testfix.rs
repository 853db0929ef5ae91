//! Hand-built records for unit tests.

use shellforge_core::collector::{
    approx_token_count, CriticVerdict, IntentSignal, ObservationSource, StepRecord, Trajectory,
};
use shellforge_core::sandbox::ExecResult;

/// A minimal valid trajectory with real observations. The completion
/// rate must be a multiple of 0.25 so it is exact over four tests.
pub fn real_trajectory(task_id: &str, completion_rate: f64) -> Trajectory {
    trajectory(task_id, completion_rate, ObservationSource::Real)
}

fn trajectory(task_id: &str, completion_rate: f64, source: ObservationSource) -> Trajectory {
    let tests_total = 4u32;
    let tests_passed = (completion_rate * f64::from(tests_total)).round() as u32;
    assert!(
        (f64::from(tests_passed) / f64::from(tests_total) - completion_rate).abs() < 1e-9,
        "completion rate {completion_rate} is not exact over {tests_total} tests"
    );
    let steps = vec![StepRecord {
        index: 0,
        intent: IntentSignal::correct(),
        reasoning: "Inspect the workspace.".into(),
        command: "ls".into(),
        observation: ExecResult {
            stdout: "data.txt\n".into(),
            stderr: String::new(),
            exit_code: 0,
            duration_secs: 0.01,
            truncated: false,
        },
        critic_verdict: CriticVerdict::Approved,
        recovery: false,
        observation_source: source,
    }];
    let token_count = approx_token_count(&steps);
    let trajectory = Trajectory {
        task_id: task_id.to_string(),
        turn_count: steps.len() as u32,
        approx_token_count: token_count,
        steps,
        tests_passed,
        tests_total,
        completion_rate,
        observation_source: source,
    };
    trajectory.validate().expect("fixture trajectory is valid");
    trajectory
}
