//! Solvability and data-collinearity diagnostics for the integral
//! policy-evaluation equations.
//!
//! Two integral equations are compared. The B-aware form regresses only the
//! value weights; it is uniquely solvable whatever the behavior law. The
//! B-free form treats the improved gain as a second unknown,
//!
//! `V(x_end) - V(x_start) + 2 int (L x)^T R K_hat x dt + int x^T (Q + K_i^T R K_i) x dt = 0`,
//!
//! with `L = F - K_i`, and admits more than one solution pair. The rest of
//! the module measures the rank of regression matrices built from single or
//! multiple trajectories.

use nalgebra::Complex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, tri_index, tri_len, Mat, Vector};
use crate::offpolicy::{offpolicy_row, recompute_rows, OffPolicyObjective, ReplayBuffer, TargetPolicy};
use crate::onpolicy::{solve_weights, RegressionSystem};
use crate::serde_mat;
use crate::sim::{simulate_segment, CostWeights, LtiPlant, SegmentRecord};

/// Two eigenvalues count as mirrored when `|lambda_i + lambda_j|` is below this.
pub const MIRROR_TOL: f64 = 1e-8;

/// Candidate solution of the B-free integral equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionPair {
    #[serde(with = "serde_mat::matrix")]
    pub p_hat: Mat,
    #[serde(with = "serde_mat::matrix")]
    pub k_hat: Mat,
    /// Largest absolute integral residual over the test segments.
    pub residual_integral: f64,
    /// Frobenius norm of the algebraic condition the pair must meet.
    pub residual_algebraic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub numerical_rank: usize,
    pub singular_values: Vec<f64>,
    /// `n(n+1)/2`.
    pub expected: usize,
    pub rows: usize,
    pub distinct_trajectory_count: usize,
    /// Draws used (1 unless a retry was needed).
    pub attempts: usize,
}

impl RankReport {
    fn of(a: &Mat, n: usize, trajectories: usize, attempts: usize) -> Self {
        Self {
            numerical_rank: linalg::numerical_rank(a),
            singular_values: linalg::singular_values(a),
            expected: tri_len(n),
            rows: a.nrows(),
            distinct_trajectory_count: trajectories,
            attempts,
        }
    }

    pub fn full_rank(&self) -> bool {
        self.numerical_rank == self.expected
    }
}

/// Symmetric `int x x^T dt` rebuilt from the stored moments.
pub fn moment_matrix(seg: &SegmentRecord) -> Mat {
    let n = seg.n();
    Mat::from_fn(n, n, |i, j| seg.moments[tri_index(i.max(j), i.min(j), n)])
}

/// Segments of length `weights.tau` under `u = f x` from each start.
pub fn segments_from_starts(
    plant: &LtiPlant,
    f: &Mat,
    starts: &[Vector],
    weights: &CostWeights,
    substeps: usize,
) -> Result<Vec<SegmentRecord>> {
    starts
        .iter()
        .map(|x0| simulate_segment(plant, None, f, x0, weights, substeps))
        .collect()
}

/// Uniform random states in `[-1, 1]^n`.
pub fn random_states(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<Vector> {
    (0..count)
        .map(|_| Vector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0)))
        .collect()
}

fn check_gains(plant: &LtiPlant, ki: &Mat, f: &Mat, weights: &CostWeights) -> Result<()> {
    let shape = (plant.m(), plant.n());
    if ki.shape() != shape || f.shape() != shape {
        return Err(Error::Dimension("K_i and F must be m x n".into()));
    }
    if weights.q.nrows() != plant.n() || weights.r.nrows() != plant.m() {
        return Err(Error::Dimension("cost weights do not match the plant".into()));
    }
    Ok(())
}

/// Residual of the B-free integral equation for `{p_hat, k_hat}` on each
/// segment (generated under `u = f x`); returns the largest magnitude.
pub fn b_free_residual(
    p_hat: &Mat,
    k_hat: &Mat,
    ki: &Mat,
    f: &Mat,
    weights: &CostWeights,
    segments: &[SegmentRecord],
) -> Result<f64> {
    let l = f - ki;
    let cross = l.transpose() * &weights.r * k_hat;
    let s = &cross + cross.transpose() + &weights.q + ki.transpose() * &weights.r * ki;
    let mut worst: f64 = 0.0;
    for seg in segments {
        let dv = seg.x_end.dot(&(p_hat * &seg.x_end)) - seg.x_start.dot(&(p_hat * &seg.x_start));
        let integral = (moment_matrix(seg).component_mul(&s)).sum();
        worst = worst.max((dv + integral).abs());
    }
    Ok(worst)
}

/// `P_hat A_F + A_F^T P_hat + L^T R K_hat + K_hat^T R L + Q + K_i^T R K_i`.
pub fn b_free_algebraic_residual(
    plant: &LtiPlant,
    p_hat: &Mat,
    k_hat: &Mat,
    ki: &Mat,
    f: &Mat,
    weights: &CostWeights,
) -> Mat {
    let af = plant.a() + plant.b() * f;
    let l = f - ki;
    let cross = l.transpose() * &weights.r * k_hat;
    p_hat * &af + af.transpose() * p_hat
        + &cross
        + cross.transpose()
        + &weights.q
        + ki.transpose() * &weights.r * ki
}

/// Residual of the B-aware integral equation for a candidate value matrix,
/// largest magnitude over the segments (generated under `u = f x`).
pub fn b_aware_residual(p: &Mat, ki: &Mat, weights: &CostWeights, segments: &[SegmentRecord]) -> Result<f64> {
    let w = linalg::weights_from_matrix(p)?.to_vector();
    let mut worst: f64 = 0.0;
    for seg in segments {
        let (row, rhs) = offpolicy_row(
            seg,
            TargetPolicy::Gain(ki),
            OffPolicyObjective::Takeover,
            &weights.q,
            &weights.r,
        )?;
        worst = worst.max((row.dot(&w) - rhs).abs());
    }
    Ok(worst)
}

/// `P_i` solving `P (A + B K_i) + (A + B K_i)^T P = -(Q + K_i^T R K_i)`.
pub fn policy_value(plant: &LtiPlant, ki: &Mat, weights: &CostWeights) -> Result<Mat> {
    let acl = plant.a() + plant.b() * ki;
    linalg::solve_lyapunov(&acl, &(&weights.q + ki.transpose() * &weights.r * ki))
}

/// Value weights regressed from the B-aware rows of segments recorded
/// under an arbitrary behavior.
pub fn regress_value(
    segments: &[SegmentRecord],
    ki: &Mat,
    weights: &CostWeights,
    kappa_max: f64,
) -> Result<Mat> {
    let first = segments
        .first()
        .ok_or_else(|| Error::Precondition("no segments".into()))?;
    let mut buf = ReplayBuffer::new(first.n(), ki.nrows(), first.tau);
    for seg in segments {
        buf.push(seg.clone())?;
    }
    let sys = recompute_rows(&buf, TargetPolicy::Gain(ki), OffPolicyObjective::Takeover, &weights.q, &weights.r)?;
    Ok(linalg::matrix_from_weights(&solve_weights(&sys, kappa_max)?))
}

/// Which construction produced the alternative pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlternativeCase {
    /// `A_F` and `-A_F` share an eigenvalue: `P_i` plus a kernel element of
    /// the Lyapunov operator, paired with the Kleinman gain.
    MirroredEigenvalue,
    /// Otherwise: the value of the behavior loop itself, paired with `K_hat = 0`.
    BehaviorValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlternativePair {
    pub case: AlternativeCase,
    pub alternative: SolutionPair,
    pub kleinman: SolutionPair,
    /// `|P_hat - P_i|_F / |P_i|_F`.
    pub relative_distance: f64,
    /// The construction reproduced `{P_i, K_{i+1}}` (e.g. `F = K_i`).
    pub coincides: bool,
}

fn mirrored_pair(af: &Mat) -> Option<(Complex<f64>, Complex<f64>)> {
    let eig = linalg::eigenvalues(af);
    for (i, a) in eig.iter().enumerate() {
        for b in &eig[i..] {
            if (a + b).norm() < MIRROR_TOL {
                return Some((*a, *b));
            }
        }
    }
    None
}

/// Null vector of `M^T - lambda I` (complex), i.e. a left eigenvector of `M`.
fn left_eigenvector(m: &Mat, lambda: Complex<f64>) -> Result<nalgebra::DVector<Complex<f64>>> {
    let n = m.nrows();
    let shifted = nalgebra::DMatrix::<Complex<f64>>::from_fn(n, n, |i, j| {
        let d = if i == j { lambda } else { Complex::new(0.0, 0.0) };
        Complex::new(m[(j, i)], 0.0) - d
    });
    // Null vector (u, w) of the real embedding gives u + i w.
    let dec = linalg::svd(&linalg::real_embedding(&shifted));
    let k = dec.v.ncols() - 1;
    let col = dec.v.column(k);
    Ok(nalgebra::DVector::from_fn(n, |i, _| Complex::new(col[i], col[n + i])))
}

/// Builds a solution pair of the B-free equation different from the
/// Kleinman pair `{P_i, -R^{-1} B^T P_i}` using the same data.
pub fn construct_alternative_pair(
    plant: &LtiPlant,
    ki: &Mat,
    f: &Mat,
    weights: &CostWeights,
    segments: &[SegmentRecord],
) -> Result<AlternativePair> {
    check_gains(plant, ki, f, weights)?;
    let p_i = policy_value(plant, ki, weights)?;
    let k_next = linalg::gain_from_value(&p_i, plant.b(), &weights.r)?;
    let af = plant.a() + plant.b() * f;
    let pair = |p: Mat, k: Mat| -> Result<SolutionPair> {
        Ok(SolutionPair {
            residual_integral: b_free_residual(&p, &k, ki, f, weights, segments)?,
            residual_algebraic: b_free_algebraic_residual(plant, &p, &k, ki, f, weights).norm(),
            p_hat: p,
            k_hat: k,
        })
    };
    let (case, p_hat, k_hat) = match mirrored_pair(&af) {
        Some((lambda, mu)) => {
            let v = left_eigenvector(&af, lambda)?;
            let w = left_eigenvector(&af, mu)?;
            let outer = &v * w.transpose() + &w * v.transpose();
            let re = outer.map(|c| c.re);
            let im = outer.map(|c| c.im);
            let mut delta = if re.norm() >= im.norm() { re } else { im };
            let scale = delta.norm();
            if scale == 0.0 {
                return Err(Error::Numerical("degenerate eigenvector construction".into()));
            }
            delta *= p_i.norm().max(1.0) / scale;
            (AlternativeCase::MirroredEigenvalue, &p_i + delta, k_next.clone())
        }
        None => {
            let w1 = -(&weights.q + ki.transpose() * &weights.r * ki);
            let sol = linalg::solve_sylvester(&af.transpose(), &af, &w1)?;
            let p = (&sol.x + sol.x.transpose()) * 0.5;
            (AlternativeCase::BehaviorValue, p, Mat::zeros(plant.m(), plant.n()))
        }
    };
    let relative_distance = (&p_hat - &p_i).norm() / p_i.norm().max(f64::MIN_POSITIVE);
    let coincides = relative_distance < 1e-9 && (&k_hat - &k_next).norm() <= 1e-9 * k_next.norm().max(1.0);
    Ok(AlternativePair {
        case,
        alternative: pair(p_hat, k_hat)?,
        kleinman: pair(p_i, k_next)?,
        relative_distance,
        coincides,
    })
}

/// Regression of the B-free equation with unknowns `(w, vec K_hat)`; its
/// rank falls short of `n(n+1)/2 + m n` whenever a second solution exists.
pub fn b_free_system(ki: &Mat, f: &Mat, weights: &CostWeights, segments: &[SegmentRecord]) -> (Mat, Vector) {
    let (m, n) = ki.shape();
    let nn = tri_len(n);
    let rl = &weights.r * (f - ki);
    let s0 = &weights.q + ki.transpose() * &weights.r * ki;
    let mut a = Mat::zeros(segments.len(), nn + m * n);
    let mut b = Vector::zeros(segments.len());
    for (k, seg) in segments.iter().enumerate() {
        let mx = moment_matrix(seg);
        let phi = seg.phi_diff();
        for c in 0..nn {
            a[(k, c)] = phi[c];
        }
        let coeff = &rl * &mx * 2.0;
        for q in 0..n {
            for p in 0..m {
                a[(k, nn + q * m + p)] = coeff[(p, q)];
            }
        }
        b[k] = -(mx.component_mul(&s0)).sum();
    }
    (a, b)
}

/// Whether `a` has a repeated eigenvalue and a full set of eigenvectors.
pub fn diagonalizable_with_repeated_eigenvalue(a: &Mat) -> bool {
    let n = a.nrows();
    let eig = linalg::eigenvalues(a);
    let mut repeated = false;
    for lambda in &eig {
        let mult = eig.iter().filter(|mu| (*mu - lambda).norm() < 1e-6).count();
        repeated |= mult >= 2;
        let shifted = nalgebra::DMatrix::<Complex<f64>>::from_fn(n, n, |i, j| {
            let d = if i == j { *lambda } else { Complex::new(0.0, 0.0) };
            Complex::new(a[(i, j)], 0.0) - d
        });
        let s = linalg::complex_singular_values(&shifted);
        let tol = 1e-8 * s.first().copied().unwrap_or(0.0).max(1.0);
        let nullity = s.iter().filter(|&&v| v <= tol).count();
        if nullity < mult {
            return false;
        }
    }
    repeated
}

fn autonomous(acl: &Mat) -> Result<LtiPlant> {
    LtiPlant::new_unchecked(acl.clone(), Mat::zeros(acl.nrows(), 1))
}

fn onpolicy_matrix(n: usize, segments: &[SegmentRecord]) -> Result<Mat> {
    let sys = RegressionSystem::from_rows(n, segments.iter().map(|s| (s.phi_diff(), 0.0)))?;
    Ok(sys.matrix())
}

/// Rank of the on-policy regression built from consecutive segments of one
/// trajectory of `x' = acl x`. Requires `acl` diagonalizable with a
/// repeated eigenvalue.
pub fn single_trajectory_rank(
    acl: &Mat,
    x0: &Vector,
    segment_count: usize,
    weights: &CostWeights,
    substeps: usize,
) -> Result<RankReport> {
    let n = linalg::ensure_square(acl, "A")?;
    if !diagonalizable_with_repeated_eigenvalue(acl) {
        return Err(Error::Precondition(
            "matrix must be diagonalizable with a repeated eigenvalue".into(),
        ));
    }
    if x0.len() != n || segment_count == 0 {
        return Err(Error::Dimension("x0 length or segment count".into()));
    }
    let plant = autonomous(acl)?;
    let zero = Mat::zeros(1, n);
    let mut x = x0.clone();
    let mut segments = Vec::with_capacity(segment_count);
    for _ in 0..segment_count {
        let seg = simulate_segment(&plant, None, &zero, &x, weights, substeps)?;
        x = seg.x_end.clone();
        segments.push(seg);
    }
    Ok(RankReport::of(&onpolicy_matrix(n, &segments)?, n, 1, 1))
}

/// Whether every pair of starts lies on different orbits of `x' = acl x`,
/// judged on the grid `t in [-horizon, horizon]` with `grid` points, and is
/// not parallel.
pub fn pairwise_distinct(acl: &Mat, starts: &[Vector], horizon: f64, grid: usize) -> Result<bool> {
    let grid = grid.max(2);
    let flows = (0..grid)
        .map(|k| linalg::expm_at(acl, -horizon + 2.0 * horizon * k as f64 / (grid - 1) as f64))
        .collect::<Result<Vec<_>>>()?;
    for (i, xi) in starts.iter().enumerate() {
        for xj in &starts[i + 1..] {
            let scale = xj.norm().max(xi.norm()).max(f64::MIN_POSITIVE);
            if flows.iter().any(|e| (xj - e * xi).norm() <= 1e-8 * scale) {
                return Ok(false);
            }
            let pair = Mat::from_columns(&[xi.clone(), xj.clone()]);
            let s = linalg::singular_values(&pair);
            if s[1] <= 1e-8 * s[0] {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// One segment per trajectory from `trajectories` random distinct starts.
/// With fewer trajectories than `n(n+1)/2` the rank is at most that count;
/// otherwise draws are repeated up to `retries` times until full rank.
pub fn distinct_trajectory_rank(
    acl: &Mat,
    trajectories: usize,
    weights: &CostWeights,
    substeps: usize,
    retries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RankReport> {
    let n = linalg::ensure_square(acl, "A")?;
    let plant = autonomous(acl)?;
    let zero = Mat::zeros(1, n);
    let attempts = if trajectories >= tri_len(n) { retries.max(1) } else { 1 };
    let mut last = None;
    for attempt in 1..=attempts {
        let starts = loop {
            let s = random_states(rng, n, trajectories);
            if pairwise_distinct(acl, &s, 2.0, 201)? {
                break s;
            }
        };
        let segments = segments_from_starts(&plant, &zero, &starts, weights, substeps)?;
        let report = RankReport::of(&onpolicy_matrix(n, &segments)?, n, trajectories, attempt);
        if report.full_rank() {
            return Ok(report);
        }
        last = Some(report);
    }
    Ok(last.expect("at least one attempt"))
}

/// A random plant with gains `K_i` and `F` that both stabilize it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomCase {
    pub plant: LtiPlant,
    #[serde(with = "serde_mat::matrix")]
    pub ki: Mat,
    #[serde(with = "serde_mat::matrix")]
    pub f: Mat,
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..=1.0))
}

/// Builds `A = H - B K_i` around a random Hurwitz `H`, then perturbs `K_i`
/// into a second stabilizing gain `F`.
pub fn random_case(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Result<RandomCase> {
    let mut h = random_mat(rng, n, n);
    let shift = linalg::spectral_abscissa(&h) + rng.random_range(0.3..=1.0);
    h -= Mat::identity(n, n) * shift;
    let b = random_mat(rng, n, m);
    let ki = random_mat(rng, m, n);
    let a = &h - &b * &ki;
    let mut scale = 1.0;
    let f = loop {
        let f = &ki + random_mat(rng, m, n) * scale;
        if linalg::spectral_abscissa(&(&a + &b * &f)) < -0.1 {
            break f;
        }
        scale *= 0.7;
    };
    Ok(RandomCase {
        plant: LtiPlant::new(a, b)?,
        ki,
        f,
    })
}

/// Outcome of regressing `P_i` under several behaviors for one random case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorIndependence {
    pub case: RandomCase,
    /// `|P_regressed - P_i|_F / |P_i|_F` per behavior.
    pub relative_errors: Vec<f64>,
    /// Largest `|P_a - P_b|_F / |P_i|_F` between behaviors.
    pub cross_behavior_spread: f64,
}

/// Regresses the value of `K_i` from data recorded under `F`, under the
/// target `K_i` itself and under a zero-input law if that is stable.
pub fn behavior_independence(
    case: &RandomCase,
    weights: &CostWeights,
    substeps: usize,
    segments: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BehaviorIndependence> {
    let p_i = policy_value(&case.plant, &case.ki, weights)?;
    let mut behaviors = vec![case.f.clone(), case.ki.clone()];
    if linalg::is_hurwitz(case.plant.a()) {
        behaviors.push(Mat::zeros(case.plant.m(), case.plant.n()));
    }
    let mut solved = Vec::new();
    for f in &behaviors {
        let starts = random_states(rng, case.plant.n(), segments);
        let segs = segments_from_starts(&case.plant, f, &starts, weights, substeps)?;
        solved.push(regress_value(&segs, &case.ki, weights, 1e10)?);
    }
    let norm = p_i.norm();
    let relative_errors = solved.iter().map(|p| (p - &p_i).norm() / norm).collect();
    let mut spread: f64 = 0.0;
    for (i, a) in solved.iter().enumerate() {
        for b in &solved[i + 1..] {
            spread = spread.max((a - b).norm() / norm);
        }
    }
    Ok(BehaviorIndependence {
        case: case.clone(),
        relative_errors,
        cross_behavior_spread: spread,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn weights(tau: f64) -> CostWeights {
        CostWeights::new(
            Mat::identity(3, 3) * 5.0,
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, 10.0),
            tau,
        )
        .unwrap()
    }

    fn car() -> LtiPlant {
        let a = Mat::from_row_slice(3, 3, &[-1., 0., 0., 1., 0., -1., 0., 0., -1.]);
        LtiPlant::new(a, Mat::from_row_slice(3, 1, &[0., 0., 1.])).unwrap()
    }

    #[test]
    fn zero_state_segments_have_zero_residual() {
        let w = weights(0.05);
        let plant = car();
        let f = Mat::from_row_slice(1, 3, &[0., 1., -1.]);
        let segs = segments_from_starts(&plant, &f, &[Vector::zeros(3)], &w, 20).unwrap();
        let p = Mat::from_fn(3, 3, |i, j| (i + j) as f64);
        assert_eq!(b_free_residual(&p, &Mat::from_element(1, 3, 3.0), &f, &f, &w, &segs).unwrap(), 0.0);
    }

    #[test]
    fn behavior_equal_to_target_coincides() {
        let w = weights(0.05);
        let plant = car();
        let k = Mat::from_row_slice(1, 3, &[0., 1., -1.]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let segs = segments_from_starts(&plant, &k, &random_states(&mut rng, 3, 8), &w, 50).unwrap();
        let alt = construct_alternative_pair(&plant, &k, &k, &w, &segs).unwrap();
        assert_eq!(alt.case, AlternativeCase::BehaviorValue);
        assert!(alt.relative_distance < 1e-9);
        // K_hat differs (0 vs the Kleinman gain), but with L = 0 the gain term
        // drops out and the value matrices agree.
        assert!(alt.alternative.residual_integral < 1e-10);
    }

    #[test]
    fn mirrored_eigenvalue_construction() {
        // F places eigenvalues of A + B F at +-1 (and -1 from the drag mode).
        let plant = car();
        let w = weights(0.02);
        let ki = Mat::from_row_slice(1, 3, &[0., 1., -1.]);
        let af_target = Mat::from_row_slice(3, 3, &[-1., 0., 0., 1., 0., -1., 0., -1., 0.]);
        let f = Mat::from_row_slice(1, 3, &[0., -1., 1.]);
        assert!((plant.a() + plant.b() * &f - &af_target).norm() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let segs = segments_from_starts(&plant, &f, &random_states(&mut rng, 3, 10), &w, 50).unwrap();
        let alt = construct_alternative_pair(&plant, &ki, &f, &w, &segs).unwrap();
        assert_eq!(alt.case, AlternativeCase::MirroredEigenvalue);
        assert!(alt.alternative.residual_algebraic < 1e-8, "{}", alt.alternative.residual_algebraic);
        assert!(alt.alternative.residual_integral < 1e-8);
        assert!(alt.relative_distance > 1e-3);
        assert!(!alt.coincides);
    }

    #[test]
    fn perturbed_pair_is_separated() {
        let plant = car();
        let w = weights(0.05);
        let ki = Mat::from_row_slice(1, 3, &[0., 1., -1.]);
        let f = Mat::zeros(1, 3);
        let f_plant = LtiPlant::new_unchecked(plant.a() + plant.b() * &ki, plant.b().clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let segs = segments_from_starts(&f_plant, &f, &random_states(&mut rng, 3, 8), &w, 50).unwrap();
        let k0 = Mat::zeros(1, 3);
        let p_i = policy_value(&f_plant, &k0, &w).unwrap();
        let k_next = linalg::gain_from_value(&p_i, plant.b(), &w.r).unwrap();
        assert!(b_free_residual(&p_i, &k_next, &k0, &f, &w, &segs).unwrap() < 1e-10);
        let bad = &p_i + Mat::identity(3, 3) * 0.5;
        assert!(b_free_residual(&bad, &k_next, &k0, &f, &w, &segs).unwrap() > 1e-3);
    }

    #[test]
    fn diagonalizability_gate() {
        assert!(diagonalizable_with_repeated_eigenvalue(&Mat::from_diagonal(&Vector::from_vec(vec![
            -1., -1., -2.
        ]))));
        assert!(!diagonalizable_with_repeated_eigenvalue(&Mat::from_diagonal(&Vector::from_vec(vec![
            -1., -2., -3.
        ]))));
        let jordan = Mat::from_row_slice(2, 2, &[-1., 1., 0., -1.]);
        assert!(!diagonalizable_with_repeated_eigenvalue(&jordan));
    }

    #[test]
    fn moment_matrix_reconstructs_quadratic_integrals() {
        let w = weights(0.05);
        let plant = car();
        let seg = simulate_segment(&plant, None, &Mat::zeros(1, 3), &Vector::from_vec(vec![1., -2., 0.5]), &w, 50)
            .unwrap();
        let s = Mat::from_row_slice(3, 3, &[2., 0.3, -1., 0.3, 1., 0.2, -1., 0.2, 4.]);
        let direct = seg.quadratic_integral(&s).unwrap();
        let via = moment_matrix(&seg).component_mul(&s).sum();
        assert!((direct - via).abs() < 1e-14 * direct.abs());
    }
}
