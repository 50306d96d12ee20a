//! On-policy integral policy iteration.
//!
//! Each iteration applies the current target gain to the loop, collects
//! reward segments (nudging onto a fresh trajectory between segments),
//! regresses the value weights from
//! `(phi(x_end) - phi(x_start))^T w = -int (x^T Q x + u_h^T M u_h + u_i^T R u_i) dt`
//! and improves the gain with `K <- -R^{-1} B^T P`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, tri_len, Mat, Vector, WeightVector};
use crate::serde_mat;
use crate::sim::{LearningEnv, SegmentRecord};

/// Stacked regression `A w = b` over quadratic-form weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSystem {
    n: usize,
    rows: Vec<Vector>,
    rhs: Vec<f64>,
    condition_number: f64,
}

impl RegressionSystem {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            rows: Vec::new(),
            rhs: Vec::new(),
            condition_number: f64::INFINITY,
        }
    }

    pub fn from_rows(n: usize, rows: impl IntoIterator<Item = (Vector, f64)>) -> Result<Self> {
        let mut sys = Self::new(n);
        for (row, rhs) in rows {
            sys.push_unchecked(row, rhs)?;
        }
        sys.refresh();
        Ok(sys)
    }

    fn push_unchecked(&mut self, row: Vector, rhs: f64) -> Result<()> {
        if row.len() != tri_len(self.n) {
            return Err(Error::Dimension(format!(
                "regressor row has length {}, expected {}",
                row.len(),
                tri_len(self.n)
            )));
        }
        if !rhs.is_finite() || row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite regression row".into()));
        }
        self.rows.push(row);
        self.rhs.push(rhs);
        Ok(())
    }

    fn refresh(&mut self) {
        self.condition_number = if self.rows.is_empty() {
            f64::INFINITY
        } else {
            linalg::condition_number(&self.matrix())
        };
    }

    pub fn push(&mut self, row: Vector, rhs: f64) -> Result<()> {
        self.push_unchecked(row, rhs)?;
        self.refresh();
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    /// Number of unknowns, `n(n+1)/2`.
    pub fn min_rows(&self) -> usize {
        tri_len(self.n)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn condition_number(&self) -> f64 {
        self.condition_number
    }

    pub fn matrix(&self) -> Mat {
        let mut a = Mat::zeros(self.rows.len(), tri_len(self.n));
        for (i, row) in self.rows.iter().enumerate() {
            a.set_row(i, &row.transpose());
        }
        a
    }

    pub fn rhs(&self) -> Vector {
        Vector::from_column_slice(&self.rhs)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&Vector, f64)> {
        self.rows.iter().zip(self.rhs.iter().copied())
    }

    pub fn numerical_rank(&self) -> usize {
        if self.rows.is_empty() {
            0
        } else {
            linalg::numerical_rank(&self.matrix())
        }
    }

    /// Whether the system is ready to solve: enough rows and `cond <= kappa_max`.
    pub fn is_well_posed(&self, kappa_max: f64) -> bool {
        self.len() >= self.min_rows() && self.condition_number <= kappa_max
    }
}

/// On-policy regression row for a segment run under `u_a = K_i x`:
/// `(phi(x_end) - phi(x_start), -(r_x + r_uh + int x^T K_i^T R K_i x dt))`.
pub fn assemble_onpolicy_row(seg: &SegmentRecord, ki: &Mat, r: &Mat) -> Result<(Vector, f64)> {
    let n = seg.n();
    if ki.ncols() != n || r.shape() != (ki.nrows(), ki.nrows()) {
        return Err(Error::Dimension("assemble_onpolicy_row: K_i or R".into()));
    }
    let r_ui = seg.quadratic_integral(&(ki.transpose() * r * ki))?;
    Ok((seg.phi_diff(), -(seg.r_x + seg.r_uh + r_ui)))
}

/// Same row with the directly measured `int u_a^T R u_a dt`.
pub fn assemble_onpolicy_row_measured(seg: &SegmentRecord) -> (Vector, f64) {
    (seg.phi_diff(), -(seg.r_x + seg.r_uh + seg.r_ua))
}

/// Least-squares weights of a full-rank, well-conditioned regression.
pub fn solve_weights(sys: &RegressionSystem, kappa_max: f64) -> Result<WeightVector> {
    let expected = sys.min_rows();
    let rank = sys.numerical_rank();
    if sys.len() < expected || rank < expected {
        return Err(Error::Collinear {
            rank,
            expected,
            rows: sys.len(),
        });
    }
    if sys.condition_number() > kappa_max {
        return Err(Error::IllConditioned {
            cond: sys.condition_number(),
            limit: kappa_max,
        });
    }
    let a = sys.matrix();
    let b = sys.rhs();
    let dec = linalg::svd(&a);
    let w = dec.solve(&b, linalg::rank_threshold(&dec.s, a.nrows(), a.ncols()));
    let residual = (&a * &w - &b).norm();
    if residual > 1e-6 * b.norm() {
        return Err(Error::Inconsistent {
            context: "value regression",
            residual,
        });
    }
    WeightVector::from_vector(&w)
}

/// `K = -R^{-1} B^T P`.
pub fn policy_improve(p: &Mat, b: &Mat, r: &Mat) -> Result<Mat> {
    linalg::gain_from_value(p, b, r)
}

/// Knobs shared by the on- and off-policy learners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerSettings {
    /// Stop when `|P_i - P_{i-1}|_F <= tolerance * |P_i|_F`.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Keep collecting while `cond(A)` exceeds this.
    pub kappa_max: f64,
    /// Rows collected per iteration are `ceil(oversampling * n(n+1)/2)`.
    pub oversampling: f64,
    /// Reward segments recorded back to back before nudging.
    pub segments_per_trajectory: usize,
    /// Extra segments allowed beyond the target row count before giving up.
    pub max_extra_segments: usize,
}

impl Default for LearnerSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 50,
            kappa_max: 1e8,
            oversampling: 1.0,
            segments_per_trajectory: 1,
            max_extra_segments: 60,
        }
    }
}

impl LearnerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.tolerance.is_nan() || self.tolerance <= 0.0 || self.max_iterations == 0 {
            return Err(Error::Config("tolerance and max_iterations must be positive".into()));
        }
        if self.kappa_max.is_nan() || self.kappa_max <= 1.0 || self.oversampling.is_nan() || self.oversampling < 1.0 {
            return Err(Error::Config("kappa_max must exceed 1 and oversampling be >= 1".into()));
        }
        if self.segments_per_trajectory == 0 {
            return Err(Error::Config("segments_per_trajectory must be >= 1".into()));
        }
        Ok(())
    }

    pub fn target_rows(&self, n: usize) -> usize {
        (self.oversampling * tri_len(n) as f64).ceil() as usize
    }
}

/// One policy-evaluation/improvement step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Gain whose value was evaluated; `None` when the target was the
    /// measured human signal.
    #[serde(with = "serde_mat::opt_matrix")]
    pub evaluated_gain: Option<Mat>,
    #[serde(with = "serde_mat::matrix")]
    pub p: Mat,
    /// Improved gain `-R^{-1} B^T P`.
    #[serde(with = "serde_mat::matrix")]
    pub next_gain: Mat,
    /// `|P_i - P_{i-1}|_F`, absent on the first iteration.
    pub p_change: Option<f64>,
    /// `|P_i - P*|_F` when an oracle is supplied.
    pub p_error: Option<f64>,
    pub condition_number: f64,
    pub rows: usize,
    /// Fresh plant segments measured during this iteration.
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub total_segments: usize,
}

impl ConvergenceReport {
    pub fn last(&self) -> &IterationRecord {
        self.iterations.last().expect("at least one iteration")
    }

    pub fn p(&self) -> &Mat {
        &self.last().p
    }

    pub fn k(&self) -> &Mat {
        &self.last().next_gain
    }
}

/// Segments plus nudges under a fixed gain until the regression built by
/// `assemble` has `target_rows` rows and acceptable conditioning.
pub(crate) fn exploit_policy<F>(
    env: &mut dyn LearningEnv,
    gain: &Mat,
    settings: &LearnerSettings,
    mut assemble: F,
) -> Result<(RegressionSystem, Vec<SegmentRecord>)>
where
    F: FnMut(&SegmentRecord) -> Result<(Vector, f64)>,
{
    let n = env.state_dim();
    let target = settings.target_rows(n);
    let cap = target + settings.max_extra_segments;
    let mut sys = RegressionSystem::new(n);
    let mut segments = Vec::new();
    let mut on_trajectory = 0;
    while sys.len() < target || sys.condition_number() > settings.kappa_max {
        if segments.len() >= cap {
            let rank = sys.numerical_rank();
            if rank < sys.min_rows() {
                return Err(Error::Collinear {
                    rank,
                    expected: sys.min_rows(),
                    rows: sys.len(),
                });
            }
            return Err(Error::IllConditioned {
                cond: sys.condition_number(),
                limit: settings.kappa_max,
            });
        }
        let seg = env.measure_segment(gain)?;
        let (row, rhs) = assemble(&seg)?;
        sys.push(row, rhs)?;
        segments.push(seg);
        on_trajectory += 1;
        if on_trajectory >= settings.segments_per_trajectory {
            env.nudge(gain)?;
            on_trajectory = 0;
        }
    }
    Ok((sys, segments))
}

pub(crate) fn converged(p: &Mat, change: Option<f64>, tol: f64) -> bool {
    change.is_some_and(|c| c <= tol * p.norm())
}

/// Runs on-policy policy iteration from the stabilizing gain `k0`.
///
/// `oracle` is only used to annotate the report with `|P_i - P*|_F`.
pub fn run_onpolicy(
    env: &mut dyn LearningEnv,
    k0: &Mat,
    settings: &LearnerSettings,
    oracle: Option<&Mat>,
) -> Result<ConvergenceReport> {
    settings.validate()?;
    let (n, m) = (env.state_dim(), env.input_dim());
    if k0.shape() != (m, n) {
        return Err(Error::Dimension("initial gain must be m x n".into()));
    }
    let b = env.input_matrix().clone();
    let r = env.cost().r.clone();

    let mut k = k0.clone();
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut total_segments = 0;
    for iteration in 0..settings.max_iterations {
        let (sys, segments) =
            exploit_policy(env, &k, settings, |seg| assemble_onpolicy_row(seg, &k, &r))?;
        total_segments += segments.len();
        let w = solve_weights(&sys, settings.kappa_max)?;
        let p = linalg::matrix_from_weights(&w);
        let next = policy_improve(&p, &b, &r)?;
        let change = records.last().map(|prev| (&p - &prev.p).norm());
        let done = converged(&p, change, settings.tolerance);
        records.push(IterationRecord {
            iteration,
            evaluated_gain: Some(k.clone()),
            p_error: oracle.map(|ps| (&p - ps).norm()),
            p,
            next_gain: next.clone(),
            p_change: change,
            condition_number: sys.condition_number(),
            rows: sys.len(),
            segments: segments.len(),
        });
        if done {
            return Ok(ConvergenceReport {
                iterations: records,
                converged: true,
                total_segments,
            });
        }
        k = next;
    }
    Ok(ConvergenceReport {
        iterations: records,
        converged: false,
        total_segments,
    })
}
