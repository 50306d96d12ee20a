//! Shared-control experiments: scenario files, ground-truth ARE targets and
//! the three learning modes (on-policy minimum intervention, off-policy
//! minimum intervention, off-policy takeover).
//!
//! This module is the only place where the oracle side (plant matrices and
//! human gains) meets the learners. Learners are handed a [`SharedLoop`]
//! behind `&mut dyn LearningEnv` and nothing else.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CareSolution, Mat, Vector};
use crate::offpolicy::{
    collect_initial_buffer, iterate_on_buffer, recompute_rows, run_offpolicy, OffPolicyObjective,
    ReplayBuffer, TargetPolicy,
};
use crate::onpolicy::{run_onpolicy, ConvergenceReport, LearnerSettings};
use crate::serde_mat;
use crate::sim::{
    simulate_segment, CostWeights, HumanPolicy, LearningEnv, LtiPlant, NudgeConfig, SharedLoop,
    TrajectoryLog, DEFAULT_SUBSTEPS,
};

pub const SCENARIO_VERSION: u32 = 1;

/// Relative quadrature accuracy of a segment at the default step.
pub const QUADRATURE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OnPolicyMinIntervention,
    OffPolicyMinIntervention,
    OffPolicyTakeover,
}

impl Mode {
    pub const ALL: [Mode; 3] = [
        Mode::OnPolicyMinIntervention,
        Mode::OffPolicyMinIntervention,
        Mode::OffPolicyTakeover,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::OnPolicyMinIntervention => "onpolicy_min_intervention",
            Mode::OffPolicyMinIntervention => "offpolicy_min_intervention",
            Mode::OffPolicyTakeover => "offpolicy_takeover",
        }
    }

    pub fn is_takeover(self) -> bool {
        matches!(self, Mode::OffPolicyTakeover)
    }
}

fn default_substeps() -> usize {
    DEFAULT_SUBSTEPS
}

/// A complete experiment description, loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedScenario {
    pub schema_version: u32,
    pub plant: LtiPlant,
    pub human: HumanPolicy,
    pub weights: CostWeights,
    #[serde(default)]
    pub nudge: NudgeConfig,
    pub mode: Mode,
    #[serde(with = "serde_mat::vector")]
    pub x0: Vector,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub learner: LearnerSettings,
    /// Record the trajectory every `log_stride` integration steps.
    #[serde(default)]
    pub log_stride: Option<usize>,
}

impl SharedScenario {
    /// The car-following benchmark: error dynamics of two unit-mass,
    /// unit-drag vehicles, with the human closing the gap and speed errors.
    pub fn car_following(mode: Mode, seed: u64) -> Self {
        let a = Mat::from_row_slice(3, 3, &[-1., 0., 0., 1., 0., -1., 0., 0., -1.]);
        let b = Mat::from_row_slice(3, 1, &[0., 0., 1.]);
        let ch = Mat::from_row_slice(2, 3, &[0., 1., 0., 0., 0., 1.]);
        let kh = Mat::from_row_slice(1, 2, &[1., -1.]);
        Self {
            schema_version: SCENARIO_VERSION,
            plant: LtiPlant::new_unchecked(a, b).expect("valid shapes"),
            human: HumanPolicy::new(kh, ch).expect("valid shapes"),
            weights: CostWeights {
                q: Mat::identity(3, 3) * 5.0,
                m: Mat::from_element(1, 1, 1.0),
                r: Mat::from_element(1, 1, 10.0),
                tau: 0.01,
            },
            nudge: NudgeConfig {
                seed,
                ..NudgeConfig::default()
            },
            mode,
            x0: Vector::from_vec(vec![1.0, 2.0, -1.0]),
            substeps: DEFAULT_SUBSTEPS,
            learner: LearnerSettings::default(),
            log_stride: Some(10),
        }
    }

    pub fn n(&self) -> usize {
        self.plant.n()
    }

    pub fn m(&self) -> usize {
        self.plant.m()
    }

    /// `A_h = A + B K_h C_h`.
    pub fn human_closed_loop(&self) -> Mat {
        self.plant.a() + self.plant.b() * self.human.effective_gain()
    }

    /// `Q_h = Q + C_h^T K_h^T M K_h C_h`.
    pub fn human_weighted_q(&self) -> Mat {
        let g = self.human.effective_gain();
        &self.weights.q + g.transpose() * &self.weights.m * g
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCENARIO_VERSION {
            return Err(Error::Config(format!(
                "unsupported scenario schema_version {} (expected {SCENARIO_VERSION})",
                self.schema_version
            )));
        }
        let (n, m) = (self.n(), self.m());
        self.weights.validate()?;
        self.nudge.validate()?;
        self.learner.validate()?;
        if self.weights.q.nrows() != n || self.weights.r.nrows() != m {
            return Err(Error::Dimension("cost weights do not match the plant".into()));
        }
        if self.human.effective_gain().shape() != (m, n) {
            return Err(Error::Dimension("K_h C_h must be m x n".into()));
        }
        if self.x0.len() != n {
            return Err(Error::Dimension("x0 does not match the plant".into()));
        }
        if self.substeps < 10 {
            return Err(Error::Config("substeps must be >= 10".into()));
        }
        if self.log_stride == Some(0) {
            return Err(Error::Config("log_stride must be >= 1".into()));
        }
        let ah = self.human_closed_loop();
        if !linalg::is_hurwitz(&ah) {
            return Err(Error::Config(format!(
                "the human policy is not stabilizing (max Re = {:.3e})",
                linalg::spectral_abscissa(&ah)
            )));
        }
        self.plant.check_stabilizable()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Fresh simulator for this scenario, logging if configured.
    pub fn environment(&self) -> Result<SharedLoop> {
        let mut env = SharedLoop::new(
            self.plant.clone(),
            Some(self.human.clone()),
            self.weights.clone(),
            self.nudge.clone(),
            self.x0.clone(),
            self.substeps,
        )?;
        if let Some(stride) = self.log_stride {
            env.enable_log(stride);
        }
        Ok(env)
    }
}

/// Riccati problem a learner is expected to solve, with its model-based solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreTarget {
    #[serde(with = "serde_mat::matrix")]
    pub a_eff: Mat,
    #[serde(with = "serde_mat::matrix")]
    pub b: Mat,
    #[serde(with = "serde_mat::matrix")]
    pub q_eff: Mat,
    #[serde(with = "serde_mat::matrix")]
    pub r: Mat,
    #[serde(with = "serde_mat::matrix")]
    pub p_star: Mat,
    #[serde(with = "serde_mat::matrix")]
    pub k_star: Mat,
    pub residual: f64,
    pub iterations: usize,
}

impl AreTarget {
    fn solve(a_eff: Mat, b: Mat, q_eff: Mat, r: Mat, k0: &Mat) -> Result<Self> {
        let CareSolution {
            p, k, iterations, residual, ..
        } = linalg::kleinman_care(&a_eff, &b, &q_eff, &r, k0)?;
        Ok(Self {
            a_eff,
            b,
            q_eff,
            r,
            p_star: p,
            k_star: k,
            residual,
            iterations,
        })
    }

    /// `|P - P*|_F / |P*|_F`.
    pub fn relative_error(&self, p: &Mat) -> f64 {
        (p - &self.p_star).norm() / self.p_star.norm()
    }

    pub fn closed_loop(&self, k: &Mat) -> Mat {
        &self.a_eff + &self.b * k
    }
}

/// Minimum-intervention target: dynamics `A_h`, penalty `Q_h`, started from `K_0 = 0`.
pub fn build_min_intervention_target(s: &SharedScenario) -> Result<AreTarget> {
    let ah = s.human_closed_loop();
    if !linalg::is_hurwitz(&ah) {
        return Err(Error::NotHurwitz {
            abscissa: linalg::spectral_abscissa(&ah),
        });
    }
    let k0 = Mat::zeros(s.m(), s.n());
    AreTarget::solve(ah, s.plant.b().clone(), s.human_weighted_q(), s.weights.r.clone(), &k0)
}

/// Takeover target: plain `(A, B, Q, R)`. The oracle starts from `K_h C_h`
/// when that stabilizes `A`, otherwise from zero when `A` is Hurwitz.
pub fn build_takeover_target(s: &SharedScenario) -> Result<AreTarget> {
    let a = s.plant.a();
    let b = s.plant.b();
    let kh = s.human.effective_gain();
    let k0 = if linalg::is_hurwitz(&(a + b * &kh)) {
        kh
    } else if linalg::is_hurwitz(a) {
        Mat::zeros(s.m(), s.n())
    } else {
        return Err(Error::Precondition(
            "no stabilizing initial gain for the takeover oracle".into(),
        ));
    };
    AreTarget::solve(a.clone(), b.clone(), s.weights.q.clone(), s.weights.r.clone(), &k0)
}

pub fn target_for(s: &SharedScenario, mode: Mode) -> Result<AreTarget> {
    if mode.is_takeover() {
        build_takeover_target(s)
    } else {
        build_min_intervention_target(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

fn eigen_list(m: &Mat) -> Vec<Eigenvalue> {
    let mut v: Vec<Eigenvalue> = linalg::eigenvalues(m)
        .into_iter()
        .map(|c| Eigenvalue { re: c.re, im: c.im })
        .collect();
    v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    v
}

/// Closed-loop cost check after the human leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostExitReport {
    pub horizon: f64,
    /// `|x(T)| / |x0|`.
    pub state_ratio: f64,
    pub realized_cost: f64,
    /// `x0^T P x0`.
    pub predicted_cost: f64,
    pub relative_cost_error: f64,
    pub spectral_abscissa: f64,
    pub passed: bool,
}

/// Runs `x' = (A + B K) x` with `u_h = 0` from `x0` and compares the
/// realized cost `int x^T (Q + K^T R K) x dt` with `x0^T P x0`.
pub fn verify_takeover_after_exit(
    s: &SharedScenario,
    k: &Mat,
    p: &Mat,
    x0: &Vector,
) -> Result<PostExitReport> {
    let acl = s.plant.a() + s.plant.b() * k;
    let abscissa = linalg::spectral_abscissa(&acl);
    let predicted = x0.dot(&(p * x0));
    let x0_norm = x0.norm();
    if x0_norm == 0.0 {
        return Ok(PostExitReport {
            horizon: 0.0,
            state_ratio: 0.0,
            realized_cost: 0.0,
            predicted_cost: predicted,
            relative_cost_error: 0.0,
            spectral_abscissa: abscissa,
            passed: abscissa <= linalg::HURWITZ_MARGIN,
        });
    }
    if abscissa > linalg::HURWITZ_MARGIN {
        return Err(Error::NotHurwitz { abscissa });
    }
    // Horizon from the slowest mode; doubled until the state has decayed by
    // 1e-4, which leaves well under 0.1% of the cost beyond it.
    let spread = linalg::eigenvalues(&acl)
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
        .max(1.0);
    let h = (0.01 / spread).min(0.01);
    let mut horizon = (1e4f64).ln() / -abscissa;
    for _ in 0..8 {
        let xt = linalg::expm_at(&acl, horizon)? * x0;
        if xt.norm() <= 1e-4 * x0_norm {
            break;
        }
        horizon *= 2.0;
    }
    let steps = ((horizon / h).ceil() as usize).max(100);
    let weights = CostWeights {
        tau: horizon,
        ..s.weights.clone()
    };
    let seg = simulate_segment(&s.plant, None, k, x0, &weights, steps)?;
    let realized = seg.r_x + seg.r_ua;
    let state_ratio = seg.x_end.norm() / x0_norm;
    let relative_cost_error = (realized - predicted).abs() / predicted.abs().max(f64::MIN_POSITIVE);
    Ok(PostExitReport {
        horizon,
        state_ratio,
        realized_cost: realized,
        predicted_cost: predicted,
        relative_cost_error,
        spectral_abscissa: abscissa,
        passed: state_ratio <= 1e-3 && relative_cost_error <= 1e-2,
    })
}

/// Everything a single learning run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub oracle: AreTarget,
    pub convergence: ConvergenceReport,
    #[serde(with = "serde_mat::matrix")]
    pub learned_p: Mat,
    #[serde(with = "serde_mat::matrix")]
    pub learned_k: Mat,
    pub relative_error: f64,
    /// Eigenvalues of the target closed loop `A_eff + B K_learned`.
    pub closed_loop_eigenvalues: Vec<Eigenvalue>,
    pub closed_loop_abscissa: f64,
    pub collected_segments: usize,
    pub fresh_segments_after_collection: usize,
    pub post_exit: Option<PostExitReport>,
    #[serde(skip)]
    pub buffer: Option<ReplayBuffer>,
    #[serde(skip)]
    pub trajectory: Option<TrajectoryLog>,
}

impl ExperimentReport {
    /// Relative error within `tol`, and the target closed loop stable with
    /// margin `1e-6`; takeover runs must also pass the post-exit check.
    pub fn passed(&self, tol: f64) -> bool {
        self.relative_error <= tol
            && self.closed_loop_abscissa <= -1e-6
            && self.post_exit.as_ref().is_none_or(|p| p.passed)
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_report(
    s: &SharedScenario,
    mode: Mode,
    oracle: AreTarget,
    convergence: ConvergenceReport,
    collected: usize,
    fresh: usize,
    buffer: Option<ReplayBuffer>,
    trajectory: Option<TrajectoryLog>,
) -> Result<ExperimentReport> {
    let learned_p = convergence.p().clone();
    let learned_k = convergence.k().clone();
    let acl = oracle.closed_loop(&learned_k);
    let post_exit = if mode.is_takeover() {
        Some(verify_takeover_after_exit(s, &learned_k, &learned_p, &s.x0)?)
    } else {
        None
    };
    Ok(ExperimentReport {
        mode,
        relative_error: oracle.relative_error(&learned_p),
        closed_loop_eigenvalues: eigen_list(&acl),
        closed_loop_abscissa: linalg::spectral_abscissa(&acl),
        oracle,
        convergence,
        learned_p,
        learned_k,
        collected_segments: collected,
        fresh_segments_after_collection: fresh,
        post_exit,
        buffer,
        trajectory,
    })
}

/// Runs the scenario's learner against the ground-truth loop and compares
/// the result with the corresponding ARE solution.
pub fn run_scenario(s: &SharedScenario) -> Result<ExperimentReport> {
    s.validate()?;
    let oracle = target_for(s, s.mode)?;
    let mut env = s.environment()?;
    let zero = Mat::zeros(s.m(), s.n());
    let (convergence, collected, fresh, buffer) = match s.mode {
        Mode::OnPolicyMinIntervention => {
            let rep = run_onpolicy(&mut env, &zero, &s.learner, Some(&oracle.p_star))?;
            let total = rep.total_segments;
            (rep, total, 0, None)
        }
        Mode::OffPolicyMinIntervention | Mode::OffPolicyTakeover => {
            let objective = objective_of(s.mode);
            let rep = run_offpolicy(&mut env, &zero, objective, &s.learner, Some(&oracle.p_star))?;
            (
                rep.convergence,
                rep.collected_segments,
                rep.fresh_segments_after_collection,
                Some(rep.buffer),
            )
        }
    };
    let trajectory = env.take_log();
    finish_report(s, s.mode, oracle, convergence, collected, fresh, buffer, trajectory)
}

fn objective_of(mode: Mode) -> OffPolicyObjective {
    if mode.is_takeover() {
        OffPolicyObjective::Takeover
    } else {
        OffPolicyObjective::MinIntervention
    }
}

/// Minimum-intervention and takeover learned side by side from one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelReport {
    pub min_intervention: ExperimentReport,
    pub takeover: ExperimentReport,
    pub buffer: ReplayBuffer,
}

/// Collects a single buffer under `u_a = 0` that is well posed for both
/// objectives, then runs the two off-policy learners concurrently on it.
pub fn run_parallel_offpolicy(s: &SharedScenario) -> Result<ParallelReport> {
    s.validate()?;
    let min_oracle = build_min_intervention_target(s)?;
    let take_oracle = build_takeover_target(s)?;
    let mut env = s.environment()?;
    let zero = Mat::zeros(s.m(), s.n());
    let settings = &s.learner;
    let mut buffer =
        collect_initial_buffer(&mut env, &zero, OffPolicyObjective::MinIntervention, settings)?;
    let (q, r) = (s.weights.q.clone(), s.weights.r.clone());
    let mut extra = 0;
    while !recompute_rows(&buffer, TargetPolicy::HumanSignal, OffPolicyObjective::Takeover, &q, &r)?
        .is_well_posed(settings.kappa_max)
    {
        if extra >= settings.max_extra_segments {
            return Err(Error::IllConditioned {
                cond: f64::INFINITY,
                limit: settings.kappa_max,
            });
        }
        buffer.push(env.measure_segment(&zero)?)?;
        env.nudge(&zero)?;
        extra += 1;
    }
    let b = s.plant.b().clone();
    let (min_rep, take_rep) = std::thread::scope(|scope| {
        let run = |objective, oracle: &AreTarget| {
            let buf = buffer.clone();
            let p_star = oracle.p_star.clone();
            let (b, q, r, zero) = (&b, &q, &r, &zero);
            scope.spawn(move || {
                iterate_on_buffer(buf, None, b, q, r, zero, objective, settings, Some(&p_star))
            })
        };
        let h_min = run(OffPolicyObjective::MinIntervention, &min_oracle);
        let h_take = run(OffPolicyObjective::Takeover, &take_oracle);
        (
            h_min.join().expect("learner thread panicked"),
            h_take.join().expect("learner thread panicked"),
        )
    });
    let (min_rep, take_rep) = (min_rep?, take_rep?);
    let trajectory = env.take_log();
    let collected = buffer.len();
    Ok(ParallelReport {
        min_intervention: finish_report(
            s,
            Mode::OffPolicyMinIntervention,
            min_oracle,
            min_rep.convergence,
            collected,
            0,
            None,
            trajectory.clone(),
        )?,
        takeover: finish_report(
            s,
            Mode::OffPolicyTakeover,
            take_oracle,
            take_rep.convergence,
            collected,
            0,
            None,
            trajectory,
        )?,
        buffer,
    })
}

/// Largest relative violation of the integral Bellman identity
/// `x_end^T P x_end - x_start^T P x_start + int (x^T Q x + u_h^T M u_h + u_a^T R u_a) dt = 0`
/// over `count` fresh segments run under `u_a = gain * x`.
pub fn bellman_residual(env: &mut dyn LearningEnv, p: &Mat, gain: &Mat, count: usize) -> Result<f64> {
    let w = linalg::weights_from_matrix(p)?.to_vector();
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let seg = env.measure_segment(gain)?;
        let reward = seg.r_x + seg.r_uh + seg.r_ua;
        let res = seg.phi_diff().dot(&w) + reward;
        if reward > 0.0 {
            worst = worst.max(res.abs() / reward);
        }
        env.nudge(gain)?;
    }
    Ok(worst)
}

/// Outcome of a human-gain switch followed by relearning.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSwitchReport {
    pub before: ExperimentReport,
    pub threshold: f64,
    /// Monitor reading with the old human still in the loop.
    pub residual_before_switch: f64,
    /// Monitor reading right after the switch, before relearning.
    pub residual_after_switch: f64,
    pub change_detected: bool,
    pub oracle_after: AreTarget,
    pub relearned: ConvergenceReport,
    pub relative_error_after: f64,
}

/// Learns on-policy with the scenario's human, switches to `new_human`,
/// watches the Bellman residual of the learned value over fresh segments and
/// relearns from `K_0 = 0` once it exceeds `threshold`. The learned gain
/// need not stabilize the new loop, so relearning restarts from `u_a = 0`,
/// which is stabilizing by assumption on the human.
pub fn run_with_gain_switch(
    s: &SharedScenario,
    new_human: HumanPolicy,
    threshold: f64,
    monitor_segments: usize,
) -> Result<GainSwitchReport> {
    let s = SharedScenario {
        mode: Mode::OnPolicyMinIntervention,
        ..s.clone()
    };
    s.validate()?;
    let switched = SharedScenario {
        human: new_human.clone(),
        ..s.clone()
    };
    switched.validate()?;
    let oracle = build_min_intervention_target(&s)?;
    let oracle_after = build_min_intervention_target(&switched)?;
    let mut env = s.environment()?;
    let zero = Mat::zeros(s.m(), s.n());
    let rep = run_onpolicy(&mut env, &zero, &s.learner, Some(&oracle.p_star))?;
    let (p, k) = (rep.p().clone(), rep.k().clone());
    let residual_before_switch = bellman_residual(&mut env, &p, &k, monitor_segments)?;
    env.set_human(Some(new_human))?;
    let residual_after_switch = bellman_residual(&mut env, &p, &k, monitor_segments)?;
    let change_detected = residual_after_switch > threshold;
    let relearned = if change_detected {
        run_onpolicy(&mut env, &zero, &s.learner, Some(&oracle_after.p_star))?
    } else {
        rep.clone()
    };
    let relative_error_after = oracle_after.relative_error(relearned.p());
    let before = finish_report(&s, s.mode, oracle, rep, 0, 0, None, None)?;
    Ok(GainSwitchReport {
        before,
        threshold,
        residual_before_switch,
        residual_after_switch,
        change_detected,
        oracle_after,
        relearned,
        relative_error_after,
    })
}
