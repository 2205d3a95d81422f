//! Equilibrium and linearization tools: the analytic hover fixed point, a
//! damped-Newton trim solver for steady level flight, and model
//! linearization (closed-form at hover, central finite differences anywhere).
//!
//! Linearized states drop the quaternion scalar via the unit-norm constraint
//! `eta = sign(eta_0) sqrt(1 - |eps|^2)`, leaving the vector part `eps`.

use crate::mathkin::{UnitQuat, Vec3};
use crate::vehicle::{
    input_matrices, state_deriv, Command, EffectiveCommand, InertialState, ModelKind,
    VehicleParams, VirtualCommand, GRAVITY,
};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

#[derive(Debug, thiserror::Error)]
pub enum TrimError {
    #[error("trim iteration did not converge: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("airspeed must be positive, got {0}")]
    BadAirspeed(f64),
    #[error(
        "no physical trim at this airspeed: the root found has deflection {delta:.3} rad and \
         axial airflow {v_bx:.2} m/s (wing pitch moment exceeds elevon authority past the fold \
         near 2 m/s)"
    )]
    Unphysical { delta: f64, v_bx: f64 },
}

/// A state/command pair zeroing the dynamics, with the achieved residual.
#[derive(Debug, Clone)]
pub struct EquilibriumPoint {
    pub x_eq: InertialState,
    pub u_eq: EffectiveCommand,
    pub residual_norm: f64,
}

/// State layout of a linearized model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateLayout {
    /// `[p(3), v(3), eps(3), omega(3)]` - 12 states, hover.
    Hover12,
    /// `[p_z, v(3), eps(3), omega(3)]` - 10 states, forward flight.
    Flight10,
}

impl StateLayout {
    pub fn dim(self) -> usize {
        match self {
            StateLayout::Hover12 => 12,
            StateLayout::Flight10 => 10,
        }
    }

    pub fn labels(self) -> Vec<&'static str> {
        match self {
            StateLayout::Hover12 => vec![
                "p_x", "p_y", "p_z", "v_x", "v_y", "v_z", "eps_1", "eps_2", "eps_3", "omega_1",
                "omega_2", "omega_3",
            ],
            StateLayout::Flight10 => vec![
                "p_z", "v_x", "v_y", "v_z", "eps_1", "eps_2", "eps_3", "omega_1", "omega_2",
                "omega_3",
            ],
        }
    }

    /// Packs the deviation of `x` from `x_eq` into layout coordinates.
    pub fn deviation(self, x: &InertialState, x_eq: &InertialState) -> DVector<f64> {
        let dq = x.q.eps - x_eq.q.eps;
        // align double cover: q and -q are the same attitude
        let dq_flipped = -x.q.eps - x_eq.q.eps;
        let dq = if dq.norm_squared() <= dq_flipped.norm_squared() { dq } else { dq_flipped };
        match self {
            StateLayout::Hover12 => {
                let mut out = DVector::zeros(12);
                out.fixed_rows_mut::<3>(0).copy_from(&(x.p - x_eq.p));
                out.fixed_rows_mut::<3>(3).copy_from(&(x.v - x_eq.v));
                out.fixed_rows_mut::<3>(6).copy_from(&dq);
                out.fixed_rows_mut::<3>(9).copy_from(&(x.omega_b - x_eq.omega_b));
                out
            }
            StateLayout::Flight10 => {
                let mut out = DVector::zeros(10);
                out[0] = x.p.z - x_eq.p.z;
                out.fixed_rows_mut::<3>(1).copy_from(&(x.v - x_eq.v));
                out.fixed_rows_mut::<3>(4).copy_from(&dq);
                out.fixed_rows_mut::<3>(7).copy_from(&(x.omega_b - x_eq.omega_b));
                out
            }
        }
    }

    /// Reconstructs a full state from layout coordinates around `x_eq`.
    fn state_from(self, z: &DVector<f64>, x_eq: &InertialState) -> InertialState {
        let (p, v, eps, omega) = match self {
            StateLayout::Hover12 => (
                x_eq.p + Vector3::new(z[0], z[1], z[2]),
                x_eq.v + Vector3::new(z[3], z[4], z[5]),
                x_eq.q.eps + Vector3::new(z[6], z[7], z[8]),
                x_eq.omega_b + Vector3::new(z[9], z[10], z[11]),
            ),
            StateLayout::Flight10 => (
                x_eq.p + Vector3::new(0.0, 0.0, z[0]),
                x_eq.v + Vector3::new(z[1], z[2], z[3]),
                x_eq.q.eps + Vector3::new(z[4], z[5], z[6]),
                x_eq.omega_b + Vector3::new(z[7], z[8], z[9]),
            ),
        };
        let eta = x_eq.q.eta.signum() * (1.0 - eps.norm_squared()).max(0.0).sqrt();
        InertialState {
            p,
            v,
            q: UnitQuat { eta, eps },
            omega_b: omega,
        }
    }

    /// Packs a state derivative into layout coordinates.
    fn deriv_vector(self, d: &crate::vehicle::StateDeriv) -> DVector<f64> {
        match self {
            StateLayout::Hover12 => {
                let mut out = DVector::zeros(12);
                out.fixed_rows_mut::<3>(0).copy_from(&d.p_dot);
                out.fixed_rows_mut::<3>(3).copy_from(&d.v_dot);
                out.fixed_rows_mut::<3>(6).copy_from(&d.q_dot.eps);
                out.fixed_rows_mut::<3>(9).copy_from(&d.omega_dot);
                out
            }
            StateLayout::Flight10 => {
                let mut out = DVector::zeros(10);
                out[0] = d.p_dot.z;
                out.fixed_rows_mut::<3>(1).copy_from(&d.v_dot);
                out.fixed_rows_mut::<3>(4).copy_from(&d.q_dot.eps);
                out.fixed_rows_mut::<3>(7).copy_from(&d.omega_dot);
                out
            }
        }
    }
}

/// Linear model `z_dot = A z + B u` around an equilibrium.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub layout: StateLayout,
    pub equilibrium: EquilibriumPoint,
}

/// Per-motor hover thrust: the moment-free command is `lambda [1, 1, 0, 0]`
/// and the vertical balance gives `2 lambda (1 - S_wet C_d0 / (4 S_p)) = mg`,
/// so the raw total thrust `2 lambda = mg / (1 - S_wet C_d0/(4 S_p))`
/// exceeds the weight to cover the prop-wash drag loss.
pub fn hover_thrust_per_motor(params: &VehicleParams) -> f64 {
    params.m * GRAVITY / (2.0 * params.thrust_factor())
}

/// Hover attitude: body x axis on the vertical, nose up.
pub fn hover_attitude() -> UnitQuat {
    let s = 1.0 / 2.0_f64.sqrt();
    UnitQuat::new(s, Vec3::new(0.0, -s, 0.0))
}

/// Analytic hover fixed point at `p_target`.
pub fn hover_equilibrium(params: &VehicleParams, p_target: Vec3) -> EquilibriumPoint {
    let x_eq = InertialState::at_rest(p_target, hover_attitude());
    let u_eq = EffectiveCommand::kernel(hover_thrust_per_motor(params));
    let residual_norm = state_deriv(
        &x_eq,
        &Command::Effective(u_eq),
        Vec3::zeros(),
        params,
        ModelKind::Simplified,
    )
    .norm();
    EquilibriumPoint {
        x_eq,
        u_eq,
        residual_norm,
    }
}

/// Steady level-flight trim of the airspeed-augmented model at `v = (V, 0, 0)`.
///
/// Symmetry reduces the unknowns to the pitch component of the quaternion
/// and the symmetric commands `(t_sum, d_sum)`; `t_diff = d_diff = 0`. Solved
/// by damped Newton with finite-difference Jacobian on the residual
/// `(v_dot_x, v_dot_z, omega_dot_y)`.
pub fn trim_level_flight(params: &VehicleParams, airspeed: f64) -> Result<EquilibriumPoint, TrimError> {
    if airspeed <= 0.0 {
        return Err(TrimError::BadAirspeed(airspeed));
    }
    // The residual has spurious backward-leaning roots, so the solve is
    // continued from the hover solution over increasing airspeed, warm
    // starting each step. Unknowns: pitch half-angle phi
    // (q = [cos phi, 0, sin phi, 0], eps_2 < 0 branch), total thrust,
    // symmetric deflection sum.
    let mut z = Vector3::new(
        -std::f64::consts::FRAC_PI_4,
        params.m * GRAVITY / params.thrust_factor(),
        0.0,
    );
    let steps = (airspeed / 0.25).ceil().max(1.0) as usize;
    for k in 1..=steps {
        let v = airspeed * k as f64 / steps as f64;
        z = newton_trim(params, v, z)?;
    }
    let r = trim_residual(params, airspeed, &z);
    if r.norm() >= 1e-8 {
        return Err(TrimError::NoConvergence {
            residual: r.norm(),
            iterations: steps,
        });
    }

    let (phi, t_sum, d_sum) = (z[0], z[1], z[2]);
    let q = UnitQuat::new(phi.cos(), Vec3::new(0.0, phi.sin(), 0.0));
    let x_eq = InertialState {
        p: Vec3::zeros(),
        v: Vec3::new(airspeed, 0.0, 0.0),
        q,
        omega_b: Vec3::zeros(),
    };
    // Reject roots outside the flight envelope (reversed axial flow or
    // deflections beyond the hard stop): they are equilibria of the smooth
    // model, not trims the aircraft can hold.
    let delta = 0.5 * d_sum;
    let v_bx = x_eq.body_airspeed(Vec3::zeros()).x;
    if delta.abs() > crate::vehicle::ActuatorLimits::default().delta_max || v_bx < -0.2 * airspeed {
        return Err(TrimError::Unphysical { delta, v_bx });
    }
    let u_eq = VirtualCommand {
        t_sum,
        t_diff: 0.0,
        d_sum,
        d_diff: 0.0,
    }
    .to_effective();
    Ok(EquilibriumPoint {
        x_eq,
        u_eq,
        residual_norm: r.norm(),
    })
}

fn trim_residual(params: &VehicleParams, airspeed: f64, z: &Vector3<f64>) -> Vector3<f64> {
    let (phi, t_sum, d_sum) = (z[0], z[1], z[2]);
    let q = UnitQuat::new(phi.cos(), Vec3::new(0.0, phi.sin(), 0.0));
    let x = InertialState {
        p: Vec3::zeros(),
        v: Vec3::new(airspeed, 0.0, 0.0),
        q,
        omega_b: Vec3::zeros(),
    };
    let u = VirtualCommand {
        t_sum,
        t_diff: 0.0,
        d_sum,
        d_diff: 0.0,
    };
    let d = state_deriv(&x, &Command::Virtual(u), Vec3::zeros(), params, ModelKind::Augmented);
    Vector3::new(d.v_dot.x, d.v_dot.z, d.omega_dot.y)
}

fn newton_trim(
    params: &VehicleParams,
    airspeed: f64,
    mut z: Vector3<f64>,
) -> Result<Vector3<f64>, TrimError> {
    let mut r = trim_residual(params, airspeed, &z);
    for iter in 0..100 {
        if r.norm() < 1e-12 {
            return Ok(z);
        }
        let mut jac = Matrix3::zeros();
        for k in 0..3 {
            let h = 1e-7 * (1.0 + z[k].abs());
            let mut zp = z;
            let mut zm = z;
            zp[k] += h;
            zm[k] -= h;
            let col = (trim_residual(params, airspeed, &zp) - trim_residual(params, airspeed, &zm))
                / (2.0 * h);
            jac.set_column(k, &col);
        }
        let Some(step) = jac.lu().solve(&(-r)) else {
            return Err(TrimError::NoConvergence {
                residual: r.norm(),
                iterations: iter,
            });
        };
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let z_try = z + alpha * step;
            let r_try = trim_residual(params, airspeed, &z_try);
            if r_try.norm() < r.norm() {
                z = z_try;
                r = r_try;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if r.norm() < 1e-10 {
        Ok(z)
    } else {
        Err(TrimError::NoConvergence {
            residual: r.norm(),
            iterations: 100,
        })
    }
}

/// Closed-form hover linearization of the matrix model on the 12-state layout.
///
/// The attitude block keeps only `eps`, with `eta` eliminated through the
/// unit norm, so the gravity-tilt block `d(v_dot)/d(eps)` follows the
/// `2 sqrt(2) g` / `sqrt(2) g` pattern and `d(q_dot)/d(omega)` is the
/// quarter-`sqrt(2)` pattern of the hover attitude.
pub fn linearize_analytic_hover(params: &VehicleParams) -> LinearModel {
    let eq = hover_equilibrium(params, Vec3::zeros());
    let g = GRAVITY;
    let s2 = 2.0_f64.sqrt();
    let n = 12;
    let mut a = DMatrix::zeros(n, n);
    // p_dot = v
    for i in 0..3 {
        a[(i, 3 + i)] = 1.0;
    }
    // v_dot vs eps: gravity-tilt coupling at the nose-up attitude
    a[(3, 7)] = 2.0 * s2 * g;
    a[(4, 6)] = -s2 * g;
    a[(4, 8)] = s2 * g;
    // (row v_dot_z is zero: first-order attitude changes move the thrust
    // vector tangentially to the vertical)
    // q_dot vs omega: 1/2 (eta I + [eps]x) at the hover attitude
    let q = eq.x_eq.q;
    let block = (Matrix3::identity() * q.eta + crate::mathkin::skew(q.eps)) * 0.5;
    for i in 0..3 {
        for j in 0..3 {
            a[(6 + i, 9 + j)] = block[(i, j)];
        }
    }

    let (f_b, m_b) = input_matrices(params);
    let r = q.rotation();
    let mut b = DMatrix::zeros(n, 4);
    let rv = r * f_b / params.m;
    let j_inv = Vector3::new(1.0 / params.j1, 1.0 / params.j2, 1.0 / params.j3);
    for col in 0..4 {
        for i in 0..3 {
            b[(3 + i, col)] = rv[(i, col)];
            b[(9 + i, col)] = j_inv[i] * m_b[(i, col)];
        }
    }

    LinearModel {
        a,
        b,
        layout: StateLayout::Hover12,
        equilibrium: eq,
    }
}

/// Central finite-difference linearization around an equilibrium.
///
/// Step sizes: 1e-6 on positions/velocities/rates, 1e-7 on the quaternion
/// vector part. The command Jacobian is taken with respect to the effective
/// command vector.
pub fn linearize_fd(
    params: &VehicleParams,
    eq: &EquilibriumPoint,
    model: ModelKind,
    layout: StateLayout,
) -> LinearModel {
    let n = layout.dim();
    let f = |z: &DVector<f64>, u: &EffectiveCommand| -> DVector<f64> {
        let x = layout.state_from(z, &eq.x_eq);
        let d = state_deriv(&x, &Command::Effective(*u), Vec3::zeros(), params, model);
        layout.deriv_vector(&d)
    };

    let z0 = DVector::zeros(n);
    let mut a = DMatrix::zeros(n, n);
    for k in 0..n {
        let is_eps = layout.labels()[k].starts_with("eps");
        let h = if is_eps { 1e-7 } else { 1e-6 };
        let mut zp = z0.clone();
        let mut zm = z0.clone();
        zp[k] += h;
        zm[k] -= h;
        let col = (f(&zp, &eq.u_eq) - f(&zm, &eq.u_eq)) / (2.0 * h);
        a.set_column(k, &col);
    }

    let mut b = DMatrix::zeros(n, 4);
    let u0 = eq.u_eq.as_vector();
    for k in 0..4 {
        let h = 1e-6 * (1.0 + u0[k].abs());
        let mut up = u0;
        let mut um = u0;
        up[k] += h;
        um[k] -= h;
        let col = (f(&z0, &EffectiveCommand::from_vector(up))
            - f(&z0, &EffectiveCommand::from_vector(um)))
            / (2.0 * h);
        b.set_column(k, &col);
    }

    LinearModel {
        a,
        b,
        layout,
        equilibrium: eq.clone(),
    }
}

/// Rank of the controllability matrix `[B, AB, ..., A^(n-1) B]`.
pub fn controllability_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let m = b.ncols();
    let mut ctrb = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        ctrb.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = a * &block;
    }
    let tol = 1e-8 * ctrb.amax().max(1.0);
    ctrb.svd(false, false).rank(tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle::ActuatorLimits;
    use approx::assert_relative_eq;

    #[test]
    fn hover_equilibrium_is_a_fixed_point() {
        let p = VehicleParams::default();
        let eq = hover_equilibrium(&p, Vec3::new(1.0, -2.0, 3.0));
        assert!(eq.residual_norm < 1e-9, "residual {}", eq.residual_norm);
        let s = 1.0 / 2.0_f64.sqrt();
        assert_relative_eq!(eq.x_eq.q.eta, s, epsilon = 1e-12);
        assert_relative_eq!(eq.x_eq.q.eps.y.abs(), s, epsilon = 1e-12);
        assert_eq!(eq.x_eq.q.eps.x, 0.0);
        assert_eq!(eq.x_eq.q.eps.z, 0.0);
    }

    #[test]
    fn hover_thrust_exceeds_weight_share() {
        let p = VehicleParams::default();
        let lambda = hover_thrust_per_motor(&p);
        let mg = p.m * GRAVITY;
        // each motor carries slightly more than half the weight, and the raw
        // total thrust exceeds the weight to cover the wash-drag loss
        assert!(lambda > mg / 2.0);
        assert_relative_eq!(2.0 * lambda, mg / p.thrust_factor(), epsilon = 1e-12);
        assert!(2.0 * lambda > mg);
        // net applied force equals the weight exactly
        assert_relative_eq!(2.0 * lambda * p.thrust_factor(), mg, epsilon = 1e-12);
    }

    #[test]
    fn hover_command_lies_in_moment_kernel() {
        let p = VehicleParams::default();
        let eq = hover_equilibrium(&p, Vec3::zeros());
        let (_, m_b) = input_matrices(&p);
        assert!((m_b * eq.u_eq.as_vector()).norm() < 1e-12);
    }

    #[test]
    fn analytic_hover_blocks_match_symbolic_pattern() {
        let p = VehicleParams::default();
        let lm = linearize_analytic_hover(&p);
        let g = GRAVITY;
        let s2 = 2.0_f64.sqrt();
        // gravity-tilt block magnitudes: 2*sqrt(2)g and sqrt(2)g
        assert_relative_eq!(lm.a[(3, 7)].abs(), 2.0 * s2 * g, epsilon = 1e-12);
        assert_relative_eq!(lm.a[(4, 6)].abs(), s2 * g, epsilon = 1e-12);
        assert_relative_eq!(lm.a[(4, 8)].abs(), s2 * g, epsilon = 1e-12);
        // attitude-rate block: sqrt(2)/4 pattern
        let q = 0.25 * s2;
        for (i, j, v) in [
            (6, 9, q),
            (6, 11, -q),
            (7, 10, q),
            (8, 9, q),
            (8, 11, q),
        ] {
            assert_relative_eq!(lm.a[(i, j)], v, epsilon = 1e-12);
        }
        // thrust rows of B
        let expected = p.thrust_factor() / p.m;
        assert_relative_eq!(lm.b[(5, 0)], expected, epsilon = 1e-12);
        assert_relative_eq!(lm.b[(5, 1)], expected, epsilon = 1e-12);
        let fe = p.wash_ratio() * p.lift_factor() * p.xi_f / p.m;
        assert_relative_eq!(lm.b[(3, 2)], fe, epsilon = 1e-12);
    }

    #[test]
    fn analytic_matches_finite_difference_at_hover() {
        let p = VehicleParams::default();
        let analytic = linearize_analytic_hover(&p);
        let fd = linearize_fd(&p, &analytic.equilibrium, ModelKind::Simplified, StateLayout::Hover12);
        let scale_a = analytic.a.amax().max(1.0);
        let scale_b = analytic.b.amax().max(1.0);
        assert!(
            (&analytic.a - &fd.a).amax() / scale_a < 1e-6,
            "A mismatch: {}",
            (&analytic.a - &fd.a).amax()
        );
        assert!(
            (&analytic.b - &fd.b).amax() / scale_b < 1e-6,
            "B mismatch: {}",
            (&analytic.b - &fd.b).amax()
        );
    }

    #[test]
    fn hover_pair_is_controllable() {
        let p = VehicleParams::default();
        let lm = linearize_analytic_hover(&p);
        assert_eq!(controllability_rank(&lm.a, &lm.b), 12);
    }

    #[test]
    fn trim_converges_and_is_consistent() {
        let p = VehicleParams::default();
        let eq = trim_level_flight(&p, 1.0).unwrap();
        assert!(eq.residual_norm < 1e-8);
        // symmetric commands
        assert_relative_eq!(eq.u_eq.t1, eq.u_eq.t2, epsilon = 1e-9);
        assert_relative_eq!(eq.u_eq.d1t1, eq.u_eq.d2t2, epsilon = 1e-9);
        assert!(eq.x_eq.q.eps.y < 0.0);
        assert!(eq.x_eq.q.eta > 0.0);
        // deflections inside the actuator envelope
        let lim = ActuatorLimits::default();
        let (d1, d2) = eq.u_eq.deflections(0.0, (0.0, 0.0));
        assert!(d1.abs() <= lim.delta_max, "trim deflection {d1}");
        assert_relative_eq!(d1, d2, epsilon = 1e-9);
    }

    #[test]
    fn trim_has_no_level_solution_at_transition_speeds() {
        // The wing pitch moment scales with the same lever arm as the elevon
        // terms, so past the fold near 2 m/s the only remaining roots sit
        // outside the flight envelope and the solver must say so instead of
        // fabricating an answer.
        let p = VehicleParams::default();
        let err = trim_level_flight(&p, 5.0).unwrap_err();
        assert!(matches!(
            err,
            TrimError::NoConvergence { .. } | TrimError::Unphysical { .. }
        ));
    }

    #[test]
    fn trim_approaches_hover_at_low_speed() {
        let p = VehicleParams::default();
        let eq = trim_level_flight(&p, 0.2).unwrap();
        let hover = hover_attitude();
        // same rotation up to sign of the quaternion
        let align = (eq.x_eq.q.eta * hover.eta + eq.x_eq.q.eps.dot(&hover.eps)).abs();
        assert!(align > 0.99, "alignment {align}");
    }

    #[test]
    fn trim_open_loop_drift_is_small() {
        let p = VehicleParams::default();
        let eq = trim_level_flight(&p, 1.0).unwrap();
        let u = Command::Effective(eq.u_eq);
        let mut x = eq.x_eq;
        let dt = 1e-3;
        for _ in 0..500 {
            x = crate::sim::rk4_step_raw(&x, &u, Vec3::zeros(), dt, &p, ModelKind::Augmented);
        }
        assert!((x.v - eq.x_eq.v).norm() < 1e-4, "drift {}", (x.v - eq.x_eq.v).norm());
    }

    #[test]
    fn fd_flight_linearization_structure() {
        let p = VehicleParams::default();
        let eq = trim_level_flight(&p, 1.0).unwrap();
        let lm = linearize_fd(&p, &eq, ModelKind::Augmented, StateLayout::Flight10);
        // commands cannot directly move position or attitude
        assert!(lm.b.row(0).amax() < 1e-9);
        for i in 4..7 {
            assert!(lm.b.row(i).amax() < 1e-9, "row {i} of B not zero");
        }
        // altitude column of A is zero (dynamics invariant to height)
        assert!(lm.a.column(0).amax() < 1e-9);
        // gravity tilt shows up in dv_x/deps_2
        assert!(lm.a[(1, 5)].abs() > 1.0, "A(2,6) = {}", lm.a[(1, 5)]);
        println!("flight A(2,6) = {:.2}", lm.a[(1, 5)]);
        println!("flight B row8 = {:?}", lm.b.row(7).iter().copied().collect::<Vec<_>>());
    }
}
