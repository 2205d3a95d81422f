//! Continuous-time LQR synthesis and the quadratic Lyapunov function used by
//! the mode supervisor.
//!
//! The Riccati equation is solved by Kleinman-Newton iteration: an initial
//! stabilizing gain comes from a shifted-Gramian construction, and each
//! Newton step solves a Lyapunov equation by a Cayley transform plus squared
//! Smith iteration. No Schur decomposition is needed at these sizes.

use nalgebra::{Complex, DMatrix, DVector};

#[derive(Debug, thiserror::Error)]
pub enum CareError {
    #[error("(A, B) pair is not stabilizable: {0}")]
    NotStabilizable(String),
    #[error("weights are invalid: {0}")]
    BadWeights(String),
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
}

/// Quadratic cost weights for `J = int x'Qx + u'Ru + 2 x'Nu dt`.
#[derive(Debug, Clone)]
pub struct LqrWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub n: DMatrix<f64>,
}

impl LqrWeights {
    /// Identity state/input weights, zero cross term.
    pub fn identity(nx: usize, nu: usize) -> Self {
        LqrWeights {
            q: DMatrix::identity(nx, nx),
            r: DMatrix::identity(nu, nu),
            n: DMatrix::zeros(nx, nu),
        }
    }

    fn validate(&self, nx: usize, nu: usize) -> Result<(), CareError> {
        if self.q.shape() != (nx, nx) || self.r.shape() != (nu, nu) || self.n.shape() != (nx, nu) {
            return Err(CareError::Dimensions(format!(
                "Q {:?}, R {:?}, N {:?} vs n={nx}, m={nu}",
                self.q.shape(),
                self.r.shape(),
                self.n.shape()
            )));
        }
        if (&self.q - self.q.transpose()).amax() > 1e-10 {
            return Err(CareError::BadWeights("Q must be symmetric".into()));
        }
        if (&self.r - self.r.transpose()).amax() > 1e-10 {
            return Err(CareError::BadWeights("R must be symmetric".into()));
        }
        if self.r.clone().cholesky().is_none() {
            return Err(CareError::BadWeights("R must be positive definite".into()));
        }
        Ok(())
    }
}

/// Result of a Riccati synthesis.
#[derive(Debug, Clone)]
pub struct LqrDesign {
    /// Feedback gain; the control law is `u = u_eq - K (x - x_eq)`.
    pub k: DMatrix<f64>,
    /// Stabilizing Riccati solution.
    pub s: DMatrix<f64>,
    /// Closed-loop eigenvalues of `A - B K`.
    pub spectrum: Vec<Complex<f64>>,
    /// Relative Frobenius residual of the Riccati equation.
    pub residual: f64,
}

/// Solves `A'X + XA + Q = 0` for Hurwitz `A` by Cayley transform and Smith
/// iteration with squaring.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let p = (a.amax() / n as f64).max(0.25);
    let c = a - DMatrix::identity(n, n) * p;
    let c_inv = c.clone().try_inverse()?;
    // X - U'XU = Q~ with U = C^-1 (A + pI), Q~ = 2p C^-T Q C^-1
    let u = &c_inv * (a + DMatrix::identity(n, n) * p);
    let mut x = 2.0 * p * c_inv.transpose() * q * &c_inv;
    let mut m = u;
    for _ in 0..60 {
        let update = m.transpose() * &x * &m;
        if update.amax() <= 1e-300 + 1e-16 * x.amax() {
            break;
        }
        x += update;
        m = &m * &m;
        if m.amax() > 1e12 {
            return None; // spectral radius >= 1: A was not Hurwitz
        }
    }
    // symmetrize against accumulated roundoff
    Some((&x + x.transpose()) * 0.5)
}

/// Initial stabilizing gain via the shifted controllability Gramian: with
/// `beta` beyond the dominant eigenvalue, `-(A + beta I)` is Hurwitz, the
/// Gramian `P` of `(A + beta I, sqrt(2) B)` is invertible for a stabilizable
/// pair, and `K0 = B' P^-1` stabilizes `A`.
fn initial_stabilizing_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, CareError> {
    let n = a.nrows();
    // Any norm bounds the spectral abscissa; the Frobenius norm avoids an
    // eigenvalue computation on possibly defective (nilpotent) drift terms.
    let beta = a.norm() + 1.0;
    let shifted = -(a + DMatrix::identity(n, n) * beta);
    let p = solve_lyapunov(&shifted.transpose(), &(2.0 * b * b.transpose())).ok_or_else(|| {
        CareError::NotStabilizable("shifted Gramian iteration diverged".to_string())
    })?;
    let p_inv = p
        .try_inverse()
        .ok_or_else(|| CareError::NotStabilizable("controllability Gramian is singular".into()))?;
    Ok(b.transpose() * p_inv)
}

/// Certificate check: `A` is Hurwitz with margin `mu` iff the Lyapunov
/// equation for the shifted matrix `A + mu I` has a positive solution, which
/// is exactly when the Smith iteration converges.
pub fn is_hurwitz(a: &DMatrix<f64>, margin: f64) -> bool {
    let n = a.nrows();
    let shifted = a + DMatrix::identity(n, n) * margin;
    match solve_lyapunov(&shifted, &DMatrix::identity(n, n)) {
        Some(x) => x.iter().all(|v| v.is_finite()),
        None => false,
    }
}

/// Eigenvalues through a bounded Schur iteration; empty when the iteration
/// fails to converge (defective corner cases).
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    match nalgebra::linalg::Schur::try_new(m.clone(), 1e-12, 100_000) {
        Some(schur) => schur.complex_eigenvalues().iter().copied().collect(),
        None => Vec::new(),
    }
}

/// Solves the continuous algebraic Riccati equation
/// `A'S + SA - (SB + N) R^-1 (B'S + N') + Q = 0`
/// and returns the stabilizing design `K = R^-1 (B'S + N')`.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    weights: &LqrWeights,
) -> Result<LqrDesign, CareError> {
    let (n, m) = (a.nrows(), b.ncols());
    if a.ncols() != n || b.nrows() != n {
        return Err(CareError::Dimensions(format!(
            "A {:?}, B {:?}",
            a.shape(),
            b.shape()
        )));
    }
    weights.validate(n, m)?;

    // Fold the cross term into the drift: with A~ = A - B R^-1 N' and
    // Q~ = Q - N R^-1 N', the standard CARE in (A~, B, Q~) has the same S.
    let r_inv = weights
        .r
        .clone()
        .try_inverse()
        .ok_or_else(|| CareError::BadWeights("R is singular".into()))?;
    let a_tilde = a - b * &r_inv * weights.n.transpose();
    let q_tilde = &weights.q - &weights.n * &r_inv * weights.n.transpose();

    let mut k = initial_stabilizing_gain(&a_tilde, b)?;
    if !is_hurwitz(&(&a_tilde - b * &k), 0.0) {
        return Err(CareError::NotStabilizable(
            "initial gain does not stabilize".into(),
        ));
    }

    let mut s = DMatrix::zeros(n, n);
    for _ in 0..100 {
        let a_cl = &a_tilde - b * &k;
        let q_cl = &q_tilde + k.transpose() * &weights.r * &k;
        let s_next = solve_lyapunov(&a_cl, &q_cl).ok_or_else(|| {
            CareError::NotStabilizable("Lyapunov step diverged during Newton iteration".into())
        })?;
        let k_next = &r_inv * (b.transpose() * &s_next);
        let delta = (&s_next - &s).amax();
        s = s_next;
        k = k_next;
        if delta <= 1e-13 * s.amax().max(1.0) {
            break;
        }
    }
    // back to the original coordinates: K = R^-1 (B'S + N')
    let k = &r_inv * (b.transpose() * &s + weights.n.transpose());

    let residual_mat = a.transpose() * &s + &s * a
        - (&s * b + &weights.n) * &r_inv * (b.transpose() * &s + weights.n.transpose())
        + &weights.q;
    let residual = residual_mat.norm() / s.norm().max(1.0);
    let a_cl = a - b * &k;
    if !is_hurwitz(&a_cl, 1e-9) {
        return Err(CareError::NotStabilizable(
            "closed loop not Hurwitz with 1e-9 margin".into(),
        ));
    }
    let spectrum = eigenvalues(&a_cl);
    Ok(LqrDesign {
        k,
        s,
        spectrum,
        residual,
    })
}

/// Appends three integrator states `x_i_dot = p_ref - p` to a linear model
/// whose first `position_rows` entries are the position block.
pub fn augment_integrator(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    position_rows: &[usize],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let m = b.ncols();
    let ni = position_rows.len();
    let mut a_aug = DMatrix::zeros(n + ni, n + ni);
    a_aug.view_mut((0, 0), (n, n)).copy_from(a);
    for (row, &src) in position_rows.iter().enumerate() {
        a_aug[(n + row, src)] = -1.0;
    }
    let mut b_aug = DMatrix::zeros(n + ni, m);
    b_aug.view_mut((0, 0), (n, m)).copy_from(b);
    (a_aug, b_aug)
}

/// Quadratic Lyapunov value `V = dx' S dx`, symmetrized.
pub fn lyapunov_value(s: &DMatrix<f64>, delta_x: &DVector<f64>) -> f64 {
    let sx = s * delta_x;
    let v = delta_x.dot(&sx);
    let stx = s.transpose() * delta_x;
    0.5 * (v + delta_x.dot(&stx))
}
