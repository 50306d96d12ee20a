//! Ground-truth simulator of the shared-control loop `x' = A x + B (u_h + u_a)`.
//!
//! The simulator owns the plant and the human model. Learners only see it
//! through [`LearningEnv`], which hands out the input matrix, the cost
//! weights and measured integrals ([`SegmentRecord`]); the internal
//! dynamics and the human's gains never cross that boundary.
//!
//! Integrals over a reward segment are computed by classical RK4 on the
//! state augmented with its quadrature channels, so the record is exactly
//! what a fixed-step integrator of the measured signals would produce.

use nalgebra::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, tri_index, tri_len, Mat, Vector};
use crate::serde_mat;

/// Default RK4 steps per reward segment.
pub const DEFAULT_SUBSTEPS: usize = 100;

/// Plant `x' = A x + B u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiPlant {
    #[serde(with = "serde_mat::matrix")]
    a: Mat,
    #[serde(with = "serde_mat::matrix")]
    b: Mat,
}

impl LtiPlant {
    /// Builds the plant after checking shapes and stabilizability (Hautus
    /// test on every eigenvalue with nonnegative real part).
    pub fn new(a: Mat, b: Mat) -> Result<Self> {
        let plant = Self::new_unchecked(a, b)?;
        plant.check_stabilizable()?;
        Ok(plant)
    }

    /// Shape checks only.
    pub fn new_unchecked(a: Mat, b: Mat) -> Result<Self> {
        let n = linalg::ensure_square(&a, "A")?;
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "B must have {n} rows, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn b(&self) -> &Mat {
        &self.b
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn check_stabilizable(&self) -> Result<()> {
        let n = self.n();
        let m = self.m();
        for lambda in linalg::eigenvalues(&self.a) {
            if lambda.re < linalg::HURWITZ_MARGIN {
                continue;
            }
            let mut pencil = nalgebra::DMatrix::<Complex<f64>>::zeros(n, n + m);
            for i in 0..n {
                for j in 0..n {
                    let diag = if i == j { lambda } else { Complex::new(0.0, 0.0) };
                    pencil[(i, j)] = diag - Complex::new(self.a[(i, j)], 0.0);
                }
                for j in 0..m {
                    pencil[(i, n + j)] = Complex::new(self.b[(i, j)], 0.0);
                }
            }
            let s = linalg::complex_singular_values(&pencil);
            let tol = linalg::rank_threshold(&s, n, n + m).max(1e-10);
            if s.iter().filter(|&&v| v > tol).count() < n {
                return Err(Error::NotStabilizable {
                    re: lambda.re,
                    im: lambda.im,
                });
            }
        }
        Ok(())
    }
}

/// Static output feedback of the human operator, `u_h = K_h C_h x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanPolicy {
    #[serde(with = "serde_mat::matrix")]
    kh: Mat,
    #[serde(with = "serde_mat::matrix")]
    ch: Mat,
}

impl HumanPolicy {
    pub fn new(kh: Mat, ch: Mat) -> Result<Self> {
        if kh.ncols() != ch.nrows() {
            return Err(Error::Dimension(format!(
                "K_h is {}x{} but C_h is {}x{}",
                kh.nrows(),
                kh.ncols(),
                ch.nrows(),
                ch.ncols()
            )));
        }
        Ok(Self { kh, ch })
    }

    /// Full-state observation with the given gain.
    pub fn full_state(k: Mat) -> Self {
        let n = k.ncols();
        Self {
            kh: k,
            ch: Mat::identity(n, n),
        }
    }

    pub fn kh(&self) -> &Mat {
        &self.kh
    }

    pub fn ch(&self) -> &Mat {
        &self.ch
    }

    /// `K_h C_h`, an `m x n` state gain.
    pub fn effective_gain(&self) -> Mat {
        &self.kh * &self.ch
    }

    pub fn input(&self, x: &Vector) -> Vector {
        &self.kh * (&self.ch * x)
    }
}

/// `u_h = K_h C_h x`.
pub fn human_input(human: &HumanPolicy, x: &Vector) -> Vector {
    human.input(x)
}

/// Performance index weights and the reward window length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    #[serde(with = "serde_mat::matrix")]
    pub q: Mat,
    #[serde(with = "serde_mat::matrix")]
    pub m: Mat,
    #[serde(with = "serde_mat::matrix")]
    pub r: Mat,
    pub tau: f64,
}

impl CostWeights {
    pub fn new(q: Mat, m: Mat, r: Mat, tau: f64) -> Result<Self> {
        let w = Self { q, m, r, tau };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        fn sym_min_eig(p: &Mat, name: &str) -> Result<f64> {
            linalg::ensure_square(p, name)?;
            if !linalg::assert_symmetric(p, 1e-12) {
                return Err(Error::Config(format!("{name} must be symmetric")));
            }
            Ok(p.clone().symmetric_eigenvalues().min())
        }
        let scale = |p: &Mat| p.abs().max().max(1.0) * 1e-12;
        if sym_min_eig(&self.q, "Q")? < -scale(&self.q) {
            return Err(Error::Config("Q must be positive semidefinite".into()));
        }
        if sym_min_eig(&self.m, "M")? < -scale(&self.m) {
            return Err(Error::Config("M must be positive semidefinite".into()));
        }
        if sym_min_eig(&self.r, "R")? <= 0.0 {
            return Err(Error::Config("R must be positive definite".into()));
        }
        if self.m.shape() != self.r.shape() {
            return Err(Error::Dimension("M and R must have the same shape".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }
}

/// Exploration settings. `amplitude = None` selects the adaptive default:
/// 10% of the RMS input norm over the last segment, floored at 1e-3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NudgeConfig {
    pub seed: u64,
    #[serde(default)]
    pub amplitude: Option<f64>,
    pub hold_duration: f64,
}

impl Default for NudgeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            amplitude: None,
            hold_duration: 0.05,
        }
    }
}

impl NudgeConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.amplitude {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Config("nudge amplitude must be >= 0".into()));
            }
        }
        if !(self.hold_duration > 0.0 && self.hold_duration.is_finite()) {
            return Err(Error::Config("nudge hold duration must be > 0".into()));
        }
        Ok(())
    }

    /// Amplitude to use given the RMS input norm of the last segment.
    pub fn effective_amplitude(&self, recent_u_rms: f64) -> f64 {
        self.amplitude.unwrap_or((0.1 * recent_u_rms).max(1e-3))
    }
}

/// Constant exploration input with entries uniform in `[-amplitude, amplitude]`.
pub fn nudge(amplitude: f64, m: usize, rng: &mut ChaCha8Rng) -> Vector {
    if amplitude == 0.0 {
        return Vector::zeros(m);
    }
    Vector::from_fn(m, |_, _| rng.random_range(-amplitude..=amplitude))
}

/// Integrals measured over one reward segment `[t_k, t_k + tau]`.
///
/// `delta_basis` has one row per entry of an `m x n` gain, ordered by the
/// column-major position of `(p, q)` (index `q * m + p`); row `(p, q)` holds
/// `int x^T e_pq^T B^T grad_phi(x)^T dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub t_start: f64,
    pub tau: f64,
    #[serde(with = "serde_mat::vector")]
    pub x_start: Vector,
    #[serde(with = "serde_mat::vector")]
    pub x_end: Vector,
    /// `int x^T Q x dt`
    pub r_x: f64,
    /// `int u_h^T M u_h dt`
    pub r_uh: f64,
    /// `int u_a^T R u_a dt`
    pub r_ua: f64,
    /// `int u_h^T R u_h dt`, the first-iteration target reward when `u_0 = u_h`.
    pub r_u0: f64,
    /// `int phi(x) dt`, i.e. `int x_p x_q dt` for `p >= q`.
    #[serde(with = "serde_mat::vector")]
    pub moments: Vector,
    /// `int u^T B^T grad_phi(x)^T dt` with the full measured input `u = u_h + u_a`.
    #[serde(with = "serde_mat::vector")]
    pub delta_f: Vector,
    /// Human share of `delta_f`.
    #[serde(with = "serde_mat::vector")]
    pub delta_uh: Vector,
    #[serde(with = "serde_mat::matrix_any")]
    pub delta_basis: Mat,
}

impl SegmentRecord {
    pub fn n(&self) -> usize {
        self.x_start.len()
    }

    /// `phi(x_end) - phi(x_start)`.
    pub fn phi_diff(&self) -> Vector {
        linalg::phi(&self.x_end) - linalg::phi(&self.x_start)
    }

    /// `int x^T S x dt` reconstructed from the stored moments.
    pub fn quadratic_integral(&self, s: &Mat) -> Result<f64> {
        Ok(linalg::weights_from_matrix(s)?.to_vector().dot(&self.moments))
    }

    /// Autonomy share of `delta_f`.
    pub fn delta_ua(&self) -> Vector {
        &self.delta_f - &self.delta_uh
    }

    /// `sum_pq K_pq delta(e_pq)`.
    pub fn delta_for_gain(&self, k: &Mat) -> Vector {
        let coeffs = Vector::from_column_slice(k.as_slice());
        self.delta_basis.tr_mul(&coeffs)
    }
}

/// `grad_phi(x) v` without forming the Jacobian.
pub(crate) fn grad_phi_times(x: &Vector, v: &Vector) -> Vector {
    let n = x.len();
    let mut out = Vector::zeros(tri_len(n));
    for j in 0..n {
        for i in j..n {
            out[tri_index(i, j, n)] = x[i] * v[j] + x[j] * v[i];
        }
    }
    out
}

/// Closed-loop law active over one integration interval.
struct Law<'a> {
    a: &'a Mat,
    b: &'a Mat,
    kh: &'a Mat,
    ka: &'a Mat,
    offset: Option<&'a Vector>,
}

impl Law<'_> {
    fn inputs(&self, x: &Vector) -> (Vector, Vector) {
        let uh = self.kh * x;
        let mut ua = self.ka * x;
        if let Some(o) = self.offset {
            ua += o;
        }
        (uh, ua)
    }

    fn rhs(&self, x: &Vector) -> Vector {
        let (uh, ua) = self.inputs(x);
        self.a * x + self.b * (uh + ua)
    }

    fn rk4_step(&self, x: &Vector, h: f64) -> [Vector; 5] {
        let k1 = self.rhs(x);
        let x2 = x + &k1 * (0.5 * h);
        let k2 = self.rhs(&x2);
        let x3 = x + &k2 * (0.5 * h);
        let k3 = self.rhs(&x3);
        let x4 = x + &k3 * h;
        let k4 = self.rhs(&x4);
        let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        [x.clone(), x2, x3, x4, next]
    }
}

/// Quadrature channels accumulated along a segment.
struct Accum {
    r_x: f64,
    r_uh: f64,
    r_ua: f64,
    r_u0: f64,
    u_sq: f64,
    moments: Vector,
    delta_f: Vector,
    delta_uh: Vector,
    delta_basis: Mat,
}

impl Accum {
    fn new(n: usize, m: usize) -> Self {
        let nn = tri_len(n);
        Self {
            r_x: 0.0,
            r_uh: 0.0,
            r_ua: 0.0,
            r_u0: 0.0,
            u_sq: 0.0,
            moments: Vector::zeros(nn),
            delta_f: Vector::zeros(nn),
            delta_uh: Vector::zeros(nn),
            delta_basis: Mat::zeros(m * n, nn),
        }
    }

    fn add(&mut self, law: &Law<'_>, w: &CostWeights, x: &Vector, c: f64) {
        let (uh, ua) = law.inputs(x);
        let u = &uh + &ua;
        self.r_x += c * x.dot(&(&w.q * x));
        self.r_uh += c * uh.dot(&(&w.m * &uh));
        self.r_ua += c * ua.dot(&(&w.r * &ua));
        self.r_u0 += c * uh.dot(&(&w.r * &uh));
        self.u_sq += c * u.norm_squared();
        self.moments.axpy(c, &linalg::phi(x), 1.0);
        self.delta_f.axpy(c, &grad_phi_times(x, &(law.b * &u)), 1.0);
        self.delta_uh.axpy(c, &grad_phi_times(x, &(law.b * &uh)), 1.0);
        let m = law.b.ncols();
        for p in 0..m {
            let g = grad_phi_times(x, &law.b.column(p).into_owned());
            for (q, &xq) in x.iter().enumerate() {
                let row = q * m + p;
                for (col, gv) in g.iter().enumerate() {
                    self.delta_basis[(row, col)] += c * xq * gv;
                }
            }
        }
    }
}

fn check_finite(x: &Vector, t: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) && x.norm() < 1e150 {
        Ok(())
    } else {
        Err(Error::SimulationBlowUp { time: t })
    }
}

/// One reward segment with a fixed linear law; returns the record and the
/// RMS input norm over the segment.
fn integrate_segment(
    law: &Law<'_>,
    weights: &CostWeights,
    x0: &Vector,
    t0: f64,
    substeps: usize,
    mut log: Option<&mut TrajectoryLog>,
) -> Result<(SegmentRecord, f64)> {
    if substeps < 10 {
        return Err(Error::Config("substeps must be >= 10".into()));
    }
    let n = x0.len();
    let m = law.b.ncols();
    let h = weights.tau / substeps as f64;
    let mut acc = Accum::new(n, m);
    let mut x = x0.clone();
    for step in 0..substeps {
        let t = t0 + step as f64 * h;
        if let Some(l) = log.as_deref_mut() {
            l.record(step, t, &x, law);
        }
        let [s1, s2, s3, s4, next] = law.rk4_step(&x, h);
        acc.add(law, weights, &s1, h / 6.0);
        acc.add(law, weights, &s2, h / 3.0);
        acc.add(law, weights, &s3, h / 3.0);
        acc.add(law, weights, &s4, h / 6.0);
        check_finite(&next, t + h)?;
        x = next;
    }
    let rms = (acc.u_sq / weights.tau).sqrt();
    Ok((
        SegmentRecord {
            t_start: t0,
            tau: weights.tau,
            x_start: x0.clone(),
            x_end: x,
            r_x: acc.r_x,
            r_uh: acc.r_uh,
            r_ua: acc.r_ua,
            r_u0: acc.r_u0,
            moments: acc.moments,
            delta_f: acc.delta_f,
            delta_uh: acc.delta_uh,
            delta_basis: acc.delta_basis,
        },
        rms,
    ))
}

/// Simulates one reward segment of length `weights.tau` starting at `x0`
/// under `u = u_h + ua * x` (`u_h = 0` when `human` is `None`).
pub fn simulate_segment(
    plant: &LtiPlant,
    human: Option<&HumanPolicy>,
    ua: &Mat,
    x0: &Vector,
    weights: &CostWeights,
    substeps: usize,
) -> Result<SegmentRecord> {
    let (n, m) = (plant.n(), plant.m());
    if x0.len() != n || ua.shape() != (m, n) {
        return Err(Error::Dimension("simulate_segment: x0 or u_a gain".into()));
    }
    let kh = human.map_or_else(|| Mat::zeros(m, n), HumanPolicy::effective_gain);
    if kh.shape() != (m, n) {
        return Err(Error::Dimension("human gain does not match plant".into()));
    }
    let law = Law {
        a: &plant.a,
        b: &plant.b,
        kh: &kh,
        ka: ua,
        offset: None,
    };
    integrate_segment(&law, weights, x0, 0.0, substeps, None).map(|(rec, _)| rec)
}

/// Logged samples `(t, x, u_h, u_a)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    /// Record one sample every `stride` integration steps.
    pub stride: usize,
    pub rows: Vec<TrajectorySample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub x: Vector,
    pub u_h: Vector,
    pub u_a: Vector,
}

impl TrajectoryLog {
    pub fn new(stride: usize) -> Self {
        Self {
            stride: stride.max(1),
            rows: Vec::new(),
        }
    }

    fn record(&mut self, step: usize, t: f64, x: &Vector, law: &Law<'_>) {
        if step.is_multiple_of(self.stride) {
            let (u_h, u_a) = law.inputs(x);
            self.rows.push(TrajectorySample {
                t,
                x: x.clone(),
                u_h,
                u_a,
            });
        }
    }
}

/// What a learner may see of the running experiment: the input matrix,
/// the cost weights and measured segment integrals.
pub trait LearningEnv {
    fn input_matrix(&self) -> &Mat;
    fn cost(&self) -> &CostWeights;
    /// Runs one reward segment with `u_a = gain * x` and returns its integrals.
    fn measure_segment(&mut self, gain: &Mat) -> Result<SegmentRecord>;
    /// Applies `u_a = gain * x + nudge` for the hold duration between segments.
    fn nudge(&mut self, gain: &Mat) -> Result<()>;

    fn state_dim(&self) -> usize {
        self.input_matrix().nrows()
    }

    fn input_dim(&self) -> usize {
        self.input_matrix().ncols()
    }
}

/// Stateful ground-truth simulation of the shared-control loop.
#[derive(Debug, Clone)]
pub struct SharedLoop {
    plant: LtiPlant,
    human: Option<HumanPolicy>,
    weights: CostWeights,
    nudge: NudgeConfig,
    substeps: usize,
    rng: ChaCha8Rng,
    x: Vector,
    t: f64,
    last_u_rms: f64,
    segments_run: usize,
    log: Option<TrajectoryLog>,
}

impl SharedLoop {
    pub fn new(
        plant: LtiPlant,
        human: Option<HumanPolicy>,
        weights: CostWeights,
        nudge: NudgeConfig,
        x0: Vector,
        substeps: usize,
    ) -> Result<Self> {
        weights.validate()?;
        nudge.validate()?;
        let (n, m) = (plant.n(), plant.m());
        if x0.len() != n {
            return Err(Error::Dimension("x0 does not match the plant".into()));
        }
        if weights.q.nrows() != n || weights.r.nrows() != m {
            return Err(Error::Dimension("cost weights do not match the plant".into()));
        }
        if let Some(h) = &human {
            if h.effective_gain().shape() != (m, n) {
                return Err(Error::Dimension("human gain does not match the plant".into()));
            }
        }
        if substeps < 10 {
            return Err(Error::Config("substeps must be >= 10".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(nudge.seed);
        Ok(Self {
            plant,
            human,
            weights,
            nudge,
            substeps,
            rng,
            x: x0,
            t: 0.0,
            last_u_rms: 0.0,
            segments_run: 0,
            log: None,
        })
    }

    /// Starts recording the trajectory every `stride` integration steps.
    pub fn enable_log(&mut self, stride: usize) {
        self.log = Some(TrajectoryLog::new(stride));
    }

    pub fn take_log(&mut self) -> Option<TrajectoryLog> {
        self.log.take()
    }

    pub fn state(&self) -> &Vector {
        &self.x
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn segments_run(&self) -> usize {
        self.segments_run
    }

    /// Places the state directly ("teleport"), bypassing the nudge path.
    pub fn set_state(&mut self, x: Vector) -> Result<()> {
        if x.len() != self.plant.n() {
            return Err(Error::Dimension("state length".into()));
        }
        self.x = x;
        Ok(())
    }

    /// Replaces the human policy (piecewise-constant gain switch).
    pub fn set_human(&mut self, human: Option<HumanPolicy>) -> Result<()> {
        if let Some(h) = &human {
            if h.effective_gain().shape() != (self.plant.m(), self.plant.n()) {
                return Err(Error::Dimension("human gain does not match the plant".into()));
            }
        }
        self.human = human;
        Ok(())
    }

    fn human_gain(&self) -> Mat {
        self.human.as_ref().map_or_else(
            || Mat::zeros(self.plant.m(), self.plant.n()),
            HumanPolicy::effective_gain,
        )
    }
}

impl LearningEnv for SharedLoop {
    fn input_matrix(&self) -> &Mat {
        &self.plant.b
    }

    fn cost(&self) -> &CostWeights {
        &self.weights
    }

    fn measure_segment(&mut self, gain: &Mat) -> Result<SegmentRecord> {
        if gain.shape() != (self.plant.m(), self.plant.n()) {
            return Err(Error::Dimension("autonomy gain shape".into()));
        }
        let kh = self.human_gain();
        let law = Law {
            a: &self.plant.a,
            b: &self.plant.b,
            kh: &kh,
            ka: gain,
            offset: None,
        };
        let (rec, rms) = integrate_segment(
            &law,
            &self.weights,
            &self.x,
            self.t,
            self.substeps,
            self.log.as_mut(),
        )?;
        self.x = rec.x_end.clone();
        self.t += self.weights.tau;
        self.last_u_rms = rms;
        self.segments_run += 1;
        Ok(rec)
    }

    fn nudge(&mut self, gain: &Mat) -> Result<()> {
        let amplitude = self.nudge.effective_amplitude(self.last_u_rms);
        let offset = nudge(amplitude, self.plant.m(), &mut self.rng);
        let kh = self.human_gain();
        let law = Law {
            a: &self.plant.a,
            b: &self.plant.b,
            kh: &kh,
            ka: gain,
            offset: Some(&offset),
        };
        let h = self.weights.tau / self.substeps as f64;
        let steps = (self.nudge.hold_duration / h).round().max(1.0) as usize;
        let h = self.nudge.hold_duration / steps as f64;
        for step in 0..steps {
            if let Some(l) = self.log.as_mut() {
                l.record(step, self.t, &self.x, &law);
            }
            let [.., next] = law.rk4_step(&self.x, h);
            self.t += h;
            check_finite(&next, self.t)?;
            self.x = next;
        }
        Ok(())
    }
}
