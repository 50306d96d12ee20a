//! Experiment drivers and report files: configuration overrides, the
//! car-following benchmark across all three modes, the solvability
//! demonstrations, and CSV/JSON writers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{self, AlternativePair, BehaviorIndependence, RankReport};
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::onpolicy::ConvergenceReport;
use crate::scenario::{
    build_min_intervention_target, build_takeover_target, run_scenario, AreTarget,
    ExperimentReport, Mode, SharedScenario,
};
use crate::sim::{CostWeights, TrajectoryLog};

/// Relative Frobenius tolerance a learned value matrix must meet.
pub const ACCEPT_TOL: f64 = 1e-3;

/// Decimal with 15 significant digits.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.14e}")
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

/// Applies one `KEY=VALUE` override to a scenario.
pub fn apply_override(s: &mut SharedScenario, entry: &str) -> Result<()> {
    let (key, value) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {entry:?} is not KEY=VALUE")))?;
    let key = key.trim();
    match key {
        "tau" => s.weights.tau = parse(key, value)?,
        "amplitude" => {
            s.nudge.amplitude = match value.trim() {
                "auto" => None,
                v => Some(parse(key, v)?),
            }
        }
        "hold" | "hold_duration" => s.nudge.hold_duration = parse(key, value)?,
        "seed" => s.nudge.seed = parse(key, value)?,
        "substeps" => s.substeps = parse(key, value)?,
        "tolerance" => s.learner.tolerance = parse(key, value)?,
        "max_iterations" | "maxIterations" => s.learner.max_iterations = parse(key, value)?,
        "kappa_max" | "kappaMax" => s.learner.kappa_max = parse(key, value)?,
        "oversampling" => s.learner.oversampling = parse(key, value)?,
        "segments_per_trajectory" => s.learner.segments_per_trajectory = parse(key, value)?,
        "max_extra_segments" => s.learner.max_extra_segments = parse(key, value)?,
        "log_stride" => s.log_stride = Some(parse(key, value)?),
        _ => return Err(Error::Config(format!("unknown override key {key:?}"))),
    }
    Ok(())
}

pub fn apply_overrides(s: &mut SharedScenario, entries: &[String]) -> Result<()> {
    for entry in entries {
        apply_override(s, entry)?;
    }
    s.validate()
}

pub fn convergence_csv(rep: &ConvergenceReport) -> String {
    let opt = |v: Option<f64>| v.map(fmt_num).unwrap_or_default();
    let mut out = String::from("iteration,p_change,p_error,condition_number,rows,segments\n");
    for it in &rep.iterations {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            it.iteration,
            opt(it.p_change),
            opt(it.p_error),
            fmt_num(it.condition_number),
            it.rows,
            it.segments
        );
    }
    out
}

pub fn trajectory_csv(log: &TrajectoryLog) -> String {
    let Some(first) = log.rows.first() else {
        return "t\n".into();
    };
    let mut out = String::from("t");
    for i in 1..=first.x.len() {
        let _ = write!(out, ",x{i}");
    }
    for i in 1..=first.u_h.len() {
        let _ = write!(out, ",u_h{i}");
    }
    for i in 1..=first.u_a.len() {
        let _ = write!(out, ",u_a{i}");
    }
    out.push('\n');
    for row in &log.rows {
        out.push_str(&fmt_num(row.t));
        for v in row.x.iter().chain(row.u_h.iter()).chain(row.u_a.iter()) {
            out.push(',');
            out.push_str(&fmt_num(*v));
        }
        out.push('\n');
    }
    out
}

/// Compact per-run summary written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub passed: bool,
    pub tolerance: f64,
    pub relative_error: f64,
    pub iterations: usize,
    pub converged: bool,
    pub collected_segments: usize,
    pub fresh_segments_after_collection: usize,
    #[serde(serialize_with = "ser_rows")]
    pub learned_p: Mat,
    #[serde(serialize_with = "ser_rows")]
    pub learned_k: Mat,
    pub closed_loop_eigenvalues: Vec<crate::scenario::Eigenvalue>,
    pub post_exit: Option<crate::scenario::PostExitReport>,
}

fn ser_rows<S: serde::Serializer>(m: &Mat, s: S) -> std::result::Result<S::Ok, S::Error> {
    crate::serde_mat::matrix::serialize(m, s)
}

impl RunSummary {
    pub fn of(rep: &ExperimentReport) -> Self {
        Self {
            mode: rep.mode,
            passed: rep.passed(ACCEPT_TOL),
            tolerance: ACCEPT_TOL,
            relative_error: rep.relative_error,
            iterations: rep.convergence.iterations.len(),
            converged: rep.convergence.converged,
            collected_segments: rep.collected_segments,
            fresh_segments_after_collection: rep.fresh_segments_after_collection,
            learned_p: rep.learned_p.clone(),
            learned_k: rep.learned_k.clone(),
            closed_loop_eigenvalues: rep.closed_loop_eigenvalues.clone(),
            post_exit: rep.post_exit.clone(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `convergence.csv`, `trajectory.csv`, `oracle.json`,
/// `summary.json` and, for off-policy runs, `buffer.json` into `dir`.
pub fn write_experiment(dir: &Path, rep: &ExperimentReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("convergence.csv"), convergence_csv(&rep.convergence))?;
    if let Some(log) = &rep.trajectory {
        fs::write(dir.join("trajectory.csv"), trajectory_csv(log))?;
    }
    write_json(&dir.join("oracle.json"), &rep.oracle)?;
    write_json(&dir.join("summary.json"), &RunSummary::of(rep))?;
    if let Some(buf) = &rep.buffer {
        buf.save(&dir.join("buffer.json"))?;
    }
    Ok(())
}

/// Records a failed run so diagnostics exist even without a report.
pub fn write_failure(dir: &Path, mode: Mode, err: &Error) -> Result<()> {
    #[derive(Serialize)]
    struct Failure<'a> {
        mode: Mode,
        passed: bool,
        error: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        kind: Option<&'a str>,
    }
    fs::create_dir_all(dir)?;
    let kind = match err {
        Error::Collinear { .. } => Some("collinear"),
        Error::IllConditioned { .. } => Some("ill_conditioned"),
        _ => None,
    };
    write_json(
        &dir.join("summary.json"),
        &Failure {
            mode,
            passed: false,
            error: err.to_string(),
            kind,
        },
    )
}

/// Runs one scenario and writes its report files. The inner result is the
/// learner outcome; the outer one reports I/O failures.
pub fn run_and_write(s: &SharedScenario, dir: &Path) -> Result<std::result::Result<ExperimentReport, Error>> {
    match run_scenario(s) {
        Ok(rep) => {
            write_experiment(dir, &rep)?;
            Ok(Ok(rep))
        }
        Err(e) => {
            write_failure(dir, s.mode, &e)?;
            Ok(Err(e))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeOutcome {
    pub mode: Mode,
    pub passed: bool,
    pub relative_error: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CarFollowSummary {
    pub seed: u64,
    pub tolerance: f64,
    pub overrides: Vec<String>,
    pub modes: Vec<ModeOutcome>,
    pub passed: bool,
}

/// Car-following benchmark in all three modes. Each mode writes into its
/// own subdirectory of `out`; the combined `summary.json` and both oracles
/// go to `out` itself. The modes run concurrently as independent simulations.
pub fn run_carfollow(out: &Path, seed: u64, overrides: &[String]) -> Result<CarFollowSummary> {
    let scenarios = Mode::ALL
        .iter()
        .map(|&mode| {
            let mut s = SharedScenario::car_following(mode, seed);
            apply_overrides(&mut s, overrides)?;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    let base = &scenarios[0];
    write_json(&out.join("scenario.json"), base)?;
    let oracles = OracleFile {
        min_intervention: build_min_intervention_target(base)?,
        takeover: build_takeover_target(base)?,
    };
    write_json(&out.join("oracle.json"), &oracles)?;
    let results: Vec<Result<std::result::Result<ExperimentReport, Error>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = scenarios
            .iter()
            .map(|s| scope.spawn(move || run_and_write(s, &out.join(s.mode.name()))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("mode runner panicked"))
            .collect()
    });
    let mut modes = Vec::new();
    for (s, res) in scenarios.iter().zip(results) {
        modes.push(match res? {
            Ok(rep) => ModeOutcome {
                mode: s.mode,
                passed: rep.passed(ACCEPT_TOL),
                relative_error: Some(rep.relative_error),
                error: None,
            },
            Err(e) => ModeOutcome {
                mode: s.mode,
                passed: false,
                relative_error: None,
                error: Some(e.to_string()),
            },
        });
    }
    let summary = CarFollowSummary {
        seed,
        tolerance: ACCEPT_TOL,
        overrides: overrides.to_vec(),
        passed: modes.iter().all(|m| m.passed),
        modes,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleFile {
    pub min_intervention: AreTarget,
    pub takeover: AreTarget,
}

/// Which solvability demonstration to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Demo {
    /// The B-aware regression returns the policy value under any behavior.
    BehaviorIndependence,
    /// The B-free equation has a second solution pair on the same data.
    Nonuniqueness,
    /// One trajectory of a diagonalizable plant with a repeated eigenvalue
    /// gives a rank-deficient regression.
    SingleTrajectory,
    /// Fewer than `n(n+1)/2` distinct trajectories cannot give full rank.
    DistinctTrajectories,
}

impl Demo {
    pub const ALL: [Demo; 4] = [
        Demo::BehaviorIndependence,
        Demo::Nonuniqueness,
        Demo::SingleTrajectory,
        Demo::DistinctTrajectories,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Demo::BehaviorIndependence => "behavior-independence",
            Demo::Nonuniqueness => "nonuniqueness",
            Demo::SingleTrajectory => "single-trajectory",
            Demo::DistinctTrajectories => "distinct-trajectories",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BehaviorIndependenceReport {
    pub cases: Vec<BehaviorIndependence>,
    pub worst_relative_error: f64,
    pub worst_cross_behavior_spread: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Regresses the value of `K_i` under several behaviors for `cases` random
/// 3-state plants.
pub fn demo_behavior_independence(seed: u64, cases: usize) -> Result<BehaviorIndependenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = CostWeights::new(
        Mat::identity(3, 3),
        Mat::zeros(1, 1),
        Mat::from_element(1, 1, 1.0),
        0.05,
    )?;
    let mut reports = Vec::with_capacity(cases);
    for _ in 0..cases {
        let case = analysis::random_case(&mut rng, 3, 1)?;
        reports.push(analysis::behavior_independence(&case, &w, 100, 12, &mut rng)?);
    }
    let worst = reports
        .iter()
        .flat_map(|r| r.relative_errors.iter().copied())
        .fold(0.0, f64::max);
    let spread = reports.iter().map(|r| r.cross_behavior_spread).fold(0.0, f64::max);
    let tolerance = 1e-6;
    Ok(BehaviorIndependenceReport {
        cases: reports,
        worst_relative_error: worst,
        worst_cross_behavior_spread: spread,
        tolerance,
        passed: worst <= tolerance && spread <= tolerance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonuniquenessReport {
    pub pair: AlternativePair,
    /// Rank of the B-free regression and its column count `n(n+1)/2 + m n`.
    pub b_free_rank: usize,
    pub b_free_unknowns: usize,
    pub passed: bool,
}

/// Car-following takeover problem: `K_i` is the optimal takeover gain, data
/// come from the human-driven loop (`F = K_h C_h`).
pub fn demo_nonuniqueness(seed: u64) -> Result<NonuniquenessReport> {
    let s = SharedScenario::car_following(Mode::OffPolicyTakeover, seed);
    let ki = build_takeover_target(&s)?.k_star;
    let f = s.human.effective_gain();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = analysis::random_states(&mut rng, s.n(), 20);
    let segments = analysis::segments_from_starts(&s.plant, &f, &starts, &s.weights, s.substeps)?;
    let pair = analysis::construct_alternative_pair(&s.plant, &ki, &f, &s.weights, &segments)?;
    let (a, _) = analysis::b_free_system(&ki, &f, &s.weights, &segments);
    let b_free_rank = crate::linalg::numerical_rank(&a);
    let passed = !pair.coincides
        && pair.alternative.residual_integral <= 1e-8
        && pair.kleinman.residual_integral <= 1e-8
        && pair.relative_distance >= 1e-3;
    Ok(NonuniquenessReport {
        pair,
        b_free_rank,
        b_free_unknowns: a.ncols(),
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleTrajectoryReport {
    #[serde(serialize_with = "ser_rows")]
    pub matrix: Mat,
    pub draws: Vec<RankReport>,
    pub max_rank: usize,
    pub expected: usize,
    pub passed: bool,
}

/// `A = diag(-1, -1, -2)`, `K = 0`, `draws` random initial states, 12
/// consecutive segments each.
pub fn demo_single_trajectory(seed: u64, draws: usize) -> Result<SingleTrajectoryReport> {
    let a = Mat::from_diagonal(&Vector::from_vec(vec![-1.0, -1.0, -2.0]));
    let w = CostWeights::new(Mat::identity(3, 3), Mat::zeros(1, 1), Mat::identity(1, 1), 0.05)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reports = analysis::random_states(&mut rng, 3, draws)
        .iter()
        .map(|x0| analysis::single_trajectory_rank(&a, x0, 12, &w, 100))
        .collect::<Result<Vec<_>>>()?;
    let max_rank = reports.iter().map(|r| r.numerical_rank).max().unwrap_or(0);
    Ok(SingleTrajectoryReport {
        matrix: a,
        draws: reports,
        max_rank,
        expected: 6,
        passed: max_rank < 6,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistinctTrajectoriesReport {
    /// One report per trajectory count `T = 1..=n(n+1)/2`.
    pub by_count: Vec<RankReport>,
    pub passed: bool,
}

/// Car-following loop with the human closing it and `u_a = 0`.
pub fn demo_distinct_trajectories(seed: u64) -> Result<DistinctTrajectoriesReport> {
    let s = SharedScenario::car_following(Mode::OffPolicyMinIntervention, seed);
    let ah = s.human_closed_loop();
    let n_rows = crate::linalg::tri_len(s.n());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_count = (1..=n_rows)
        .map(|t| analysis::distinct_trajectory_rank(&ah, t, &s.weights, s.substeps, 5, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let passed = by_count.iter().all(|r| {
        if r.distinct_trajectory_count < n_rows {
            r.numerical_rank <= r.distinct_trajectory_count
        } else {
            r.full_rank()
        }
    });
    Ok(DistinctTrajectoriesReport { by_count, passed })
}

/// Runs one demonstration, writes `<name>.json` into `out` and returns
/// whether the expected outcome was observed.
pub fn run_demo(demo: Demo, seed: u64, out: &Path) -> Result<bool> {
    fs::create_dir_all(out)?;
    let path = out.join(format!("{}.json", demo.name()));
    let passed = match demo {
        Demo::BehaviorIndependence => {
            let r = demo_behavior_independence(seed, 20)?;
            write_json(&path, &r)?;
            r.passed
        }
        Demo::Nonuniqueness => {
            let r = demo_nonuniqueness(seed)?;
            write_json(&path, &r)?;
            r.passed
        }
        Demo::SingleTrajectory => {
            let r = demo_single_trajectory(seed, 20)?;
            write_json(&path, &r)?;
            r.passed
        }
        Demo::DistinctTrajectories => {
            let r = demo_distinct_trajectories(seed)?;
            write_json(&path, &r)?;
            r.passed
        }
    };
    Ok(passed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifteen_significant_digits() {
        assert_eq!(fmt_num(1.0 / 3.0), "3.33333333333333e-1");
        assert_eq!(fmt_num(0.0), "0.00000000000000e0");
        let v = 0.1 + 0.2;
        assert!((fmt_num(v).parse::<f64>().unwrap() - v).abs() <= 1e-15);
    }

    #[test]
    fn overrides_apply_and_reject_unknown_keys() {
        let mut s = SharedScenario::car_following(Mode::OnPolicyMinIntervention, 0);
        apply_overrides(
            &mut s,
            &["tau=0.02".into(), "amplitude=0".into(), "kappaMax=1e9".into(), "substeps=50".into()],
        )
        .unwrap();
        assert_eq!(s.weights.tau, 0.02);
        assert_eq!(s.nudge.amplitude, Some(0.0));
        assert_eq!(s.learner.kappa_max, 1e9);
        assert_eq!(s.substeps, 50);
        assert!(apply_override(&mut s, "colour=blue").is_err());
        assert!(apply_override(&mut s, "tau").is_err());
        assert!(apply_override(&mut s, "tau=abc").is_err());
        assert!(apply_overrides(&mut s, &["tau=-1".into()]).is_err());
    }

    #[test]
    fn demo_names_round_trip() {
        for d in Demo::ALL {
            assert_eq!(Demo::parse(d.name()), Some(d));
        }
        assert_eq!(Demo::parse("nope"), None);
    }
}
