//! Off-policy integral policy iteration with experience replay.
//!
//! A fixed behavior law drives the loop once; every segment stores the
//! integrals that do not depend on the target gain. Each iteration then
//! rebuilds its regression rows
//!
//! `phi(x_end) - phi(x_start) - delta_k(K_i)`, rhs `-r_k(K_i)`
//!
//! from `delta_k(K_i) = delta_k(F) - sum_pq [K_i]_pq delta_k(e_pq)` and
//! `r_k(K_i) = r_k(Q) + sum_pq [K_i^T R K_i]_pq r(e_pq)` without touching the
//! plant. The input matrix `B` is required; it enters through the stored
//! `delta` integrals.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::onpolicy::{
    converged, policy_improve, solve_weights, ConvergenceReport, IterationRecord,
    LearnerSettings, RegressionSystem,
};
use crate::sim::{LearningEnv, SegmentRecord};

pub const BUFFER_VERSION: u32 = 1;

/// Which problem the replayed data are used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffPolicyObjective {
    /// Virtual plant `(A + B K_h C_h, B)`; behavior input is `u_a`; the reward
    /// includes the human effort term.
    MinIntervention,
    /// Virtual plant `(A, B)`; behavior input is `u_h + u_a`; no human effort term.
    Takeover,
}

/// Target policy of one iteration.
#[derive(Debug, Clone, Copy)]
pub enum TargetPolicy<'a> {
    Gain(&'a Mat),
    /// `u_0 = u_h`, known only as a measured signal.
    HumanSignal,
}

/// Segments recorded under one fixed behavior law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub version: u32,
    n: usize,
    m: usize,
    tau: f64,
    segments: Vec<SegmentRecord>,
}

impl ReplayBuffer {
    pub fn new(n: usize, m: usize, tau: f64) -> Self {
        Self {
            version: BUFFER_VERSION,
            n,
            m,
            tau,
            segments: Vec::new(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn segments(&self) -> &[SegmentRecord] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Appends a segment. Stored segments are never modified.
    pub fn push(&mut self, seg: SegmentRecord) -> Result<()> {
        if seg.x_start.len() != self.n || seg.delta_basis.shape() != (self.m * self.n, linalg::tri_len(self.n)) {
            return Err(Error::Dimension("segment does not match buffer dimensions".into()));
        }
        self.segments.push(seg);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let buf: Self = serde_json::from_str(text)?;
        if buf.version != BUFFER_VERSION {
            return Err(Error::Config(format!(
                "unsupported replay buffer version {} (expected {BUFFER_VERSION})",
                buf.version
            )));
        }
        let mut checked = Self::new(buf.n, buf.m, buf.tau);
        for seg in buf.segments {
            checked.push(seg)?;
        }
        Ok(checked)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Records `count` segments under `u_a = behavior * x`, nudging between
/// segments according to `segments_per_trajectory`.
pub fn collect_offpolicy_data(
    env: &mut dyn LearningEnv,
    behavior: &Mat,
    count: usize,
    segments_per_trajectory: usize,
) -> Result<ReplayBuffer> {
    let mut buf = ReplayBuffer::new(env.state_dim(), env.input_dim(), env.cost().tau);
    extend_buffer(env, behavior, count, segments_per_trajectory, &mut buf)?;
    Ok(buf)
}

fn extend_buffer(
    env: &mut dyn LearningEnv,
    behavior: &Mat,
    count: usize,
    segments_per_trajectory: usize,
    buf: &mut ReplayBuffer,
) -> Result<()> {
    let per = segments_per_trajectory.max(1);
    for i in 0..count {
        buf.push(env.measure_segment(behavior)?)?;
        if (i + 1) % per == 0 {
            env.nudge(behavior)?;
        }
    }
    Ok(())
}

/// Regression row for one stored segment and the given target policy.
pub fn offpolicy_row(
    seg: &SegmentRecord,
    target: TargetPolicy<'_>,
    objective: OffPolicyObjective,
    q: &Mat,
    r: &Mat,
) -> Result<(Vector, f64)> {
    let behavior_delta = match objective {
        OffPolicyObjective::MinIntervention => seg.delta_ua(),
        OffPolicyObjective::Takeover => seg.delta_f.clone(),
    };
    let human_effort = match objective {
        OffPolicyObjective::MinIntervention => seg.r_uh,
        OffPolicyObjective::Takeover => 0.0,
    };
    let r_q = seg.quadratic_integral(q)?;
    let (delta, r_target) = match target {
        TargetPolicy::Gain(k) => {
            let n = seg.n();
            if k.ncols() != n || k.nrows() * n != seg.delta_basis.nrows() {
                return Err(Error::Dimension("target gain must be m x n".into()));
            }
            if r.shape() != (k.nrows(), k.nrows()) {
                return Err(Error::Dimension("R must be m x m".into()));
            }
            let r_k = seg.quadratic_integral(&(k.transpose() * r * k))?;
            (behavior_delta - seg.delta_for_gain(k), r_k)
        }
        TargetPolicy::HumanSignal => match objective {
            OffPolicyObjective::Takeover => (behavior_delta - &seg.delta_uh, seg.r_u0),
            OffPolicyObjective::MinIntervention => {
                return Err(Error::Config(
                    "the human signal is a target policy only for takeover".into(),
                ))
            }
        },
    };
    Ok((seg.phi_diff() - delta, -(r_q + human_effort + r_target)))
}

/// Rebuilds the regression for `target` from the stored integrals.
pub fn recompute_rows(
    buffer: &ReplayBuffer,
    target: TargetPolicy<'_>,
    objective: OffPolicyObjective,
    q: &Mat,
    r: &Mat,
) -> Result<RegressionSystem> {
    let rows = buffer
        .segments
        .iter()
        .map(|seg| offpolicy_row(seg, target, objective, q, r))
        .collect::<Result<Vec<_>>>()?;
    RegressionSystem::from_rows(buffer.n, rows)
}

/// Off-policy run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffPolicyReport {
    pub convergence: ConvergenceReport,
    /// Segments recorded by the initial collection.
    pub collected_segments: usize,
    /// Segments recorded after the initial collection because replayed rows
    /// lost conditioning.
    pub fresh_segments_after_collection: usize,
    pub buffer: ReplayBuffer,
}

fn initial_target(objective: OffPolicyObjective, m: usize, n: usize) -> Option<Mat> {
    match objective {
        OffPolicyObjective::MinIntervention => Some(Mat::zeros(m, n)),
        OffPolicyObjective::Takeover => None,
    }
}

fn target_of(k: &Option<Mat>) -> TargetPolicy<'_> {
    k.as_ref().map_or(TargetPolicy::HumanSignal, TargetPolicy::Gain)
}

/// Collects the initial buffer under `behavior`, extending it until the
/// iteration-0 regression is well posed.
pub fn collect_initial_buffer(
    env: &mut dyn LearningEnv,
    behavior: &Mat,
    objective: OffPolicyObjective,
    settings: &LearnerSettings,
) -> Result<ReplayBuffer> {
    let (n, m) = (env.state_dim(), env.input_dim());
    let q = env.cost().q.clone();
    let r = env.cost().r.clone();
    let k0 = initial_target(objective, m, n);
    let target = settings.target_rows(n);
    let mut buf = collect_offpolicy_data(env, behavior, target, settings.segments_per_trajectory)?;
    loop {
        let sys = recompute_rows(&buf, target_of(&k0), objective, &q, &r)?;
        if sys.is_well_posed(settings.kappa_max) {
            return Ok(buf);
        }
        if buf.len() >= target + settings.max_extra_segments {
            let rank = sys.numerical_rank();
            return Err(if rank < sys.min_rows() {
                Error::Collinear {
                    rank,
                    expected: sys.min_rows(),
                    rows: sys.len(),
                }
            } else {
                Error::IllConditioned {
                    cond: sys.condition_number(),
                    limit: settings.kappa_max,
                }
            });
        }
        extend_buffer(env, behavior, 1, settings.segments_per_trajectory, &mut buf)?;
    }
}

/// Off-policy policy iteration on a buffer that is already collected.
/// When replayed rows become ill-conditioned and `env` is available, up to
/// `n(n+1)/2` new segments are recorded once before giving up.
#[allow(clippy::too_many_arguments)]
pub fn iterate_on_buffer(
    mut buffer: ReplayBuffer,
    mut env: Option<&mut dyn LearningEnv>,
    b: &Mat,
    q: &Mat,
    r: &Mat,
    behavior: &Mat,
    objective: OffPolicyObjective,
    settings: &LearnerSettings,
    oracle: Option<&Mat>,
) -> Result<OffPolicyReport> {
    settings.validate()?;
    let (n, m) = (buffer.n, buffer.m);
    if b.shape() != (n, m) {
        return Err(Error::Dimension("B does not match the buffer".into()));
    }
    let collected = buffer.len();
    let mut fresh = 0;
    let mut k = initial_target(objective, m, n);
    let mut records: Vec<IterationRecord> = Vec::new();
    for iteration in 0..settings.max_iterations {
        let mut sys = recompute_rows(&buffer, target_of(&k), objective, q, r)?;
        let mut new_segments = 0;
        if !sys.is_well_posed(settings.kappa_max) {
            if let Some(e) = env.as_deref_mut() {
                let extra = linalg::tri_len(n);
                extend_buffer(e, behavior, extra, settings.segments_per_trajectory, &mut buffer)?;
                new_segments = extra;
                fresh += extra;
                sys = recompute_rows(&buffer, target_of(&k), objective, q, r)?;
            }
        }
        let w = solve_weights(&sys, settings.kappa_max)?;
        let p = linalg::matrix_from_weights(&w);
        let next = policy_improve(&p, b, r)?;
        let change = records.last().map(|prev| (&p - &prev.p).norm());
        let done = converged(&p, change, settings.tolerance);

        records.push(IterationRecord {
            iteration,
            evaluated_gain: k.clone(),
            p_error: oracle.map(|ps| (&p - ps).norm()),
            p,
            next_gain: next.clone(),
            p_change: change,
            condition_number: sys.condition_number(),
            rows: sys.len(),
            segments: if iteration == 0 { collected } else { new_segments },
        });
        if done {
            break;
        }
        k = Some(next);
    }
    let converged = records.last().is_some_and(|r| {
        converged(&r.p, r.p_change, settings.tolerance)
    });
    Ok(OffPolicyReport {
        convergence: ConvergenceReport {
            total_segments: collected + fresh,
            iterations: records,
            converged,
        },
        collected_segments: collected,
        fresh_segments_after_collection: fresh,
        buffer,
    })
}

/// Collects one buffer under the fixed behavior `u_a = behavior * x` and
/// iterates on it.
pub fn run_offpolicy(
    env: &mut dyn LearningEnv,
    behavior: &Mat,
    objective: OffPolicyObjective,
    settings: &LearnerSettings,
    oracle: Option<&Mat>,
) -> Result<OffPolicyReport> {
    settings.validate()?;
    let (n, m) = (env.state_dim(), env.input_dim());
    if behavior.shape() != (m, n) {
        return Err(Error::Dimension("behavior gain must be m x n".into()));
    }
    let b = env.input_matrix().clone();
    let q = env.cost().q.clone();
    let r = env.cost().r.clone();
    let buffer = collect_initial_buffer(env, behavior, objective, settings)?;
    iterate_on_buffer(buffer, Some(env), &b, &q, &r, behavior, objective, settings, oracle)
}
