//! Nonlinear hierarchical hover controller.
//!
//! The outer loop turns position/velocity errors into a reference force
//! (optionally through a saturated quasi-time-optimal shaping), the middle loop
//! carries a desired-attitude internal state `q_d` and a thrust-magnitude
//! state `f` whose dynamics make the force error `f_delta` converge first
//! order, and the inner loop is a quaternion PD attitude law. Commands are
//! distributed through the pseudo-inverse of the moment input matrix plus
//! the moment-free thrust direction.

use crate::mathkin::{quat_deriv, quat_error, skew, Mat3, UnitQuat, Vec3};
use crate::vehicle::{input_matrices, EffectiveCommand, InertialState, VehicleParams, GRAVITY};
use nalgebra::{SMatrix, Vector4};

#[derive(Debug, thiserror::Error)]
pub enum HoverCtlError {
    #[error("thrust state {0} N is at or below the division guard")]
    ThrustTooLow(f64),
}

/// Shape of the sigmoid saturation `sigma_M(x) = 2M exp(-exp(b - c x)) - M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GompertzShape {
    pub b: f64,
    pub c: f64,
}

impl Default for GompertzShape {
    /// `b = ln(ln 2)` so that `sigma(0) = 0`.
    fn default() -> Self {
        GompertzShape {
            b: 2.0_f64.ln().ln(),
            c: 1.0,
        }
    }
}

impl GompertzShape {
    /// The constants as printed in the source work (`b = ln 2`); biased at
    /// zero, kept selectable for comparison runs.
    pub fn legacy() -> Self {
        GompertzShape {
            b: 2.0_f64.ln(),
            c: 1.0,
        }
    }

    pub fn eval(&self, level: f64, x: f64) -> f64 {
        2.0 * level * (-((self.b - self.c * x).exp())).exp() - level
    }
}

/// Position-feedback shaping applied ahead of the force reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RefForceMode {
    Linear,
    /// Quasi-time-optimal saturated feedback.
    #[default]
    Qto,
    /// Component-wise sigmoid clamp of the linear feedback.
    GompertzSat,
    /// Norm clamp of the raw errors ahead of the linear law.
    ErrorGovernor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoverGains {
    /// Position gain, N/m.
    pub k_pp: f64,
    /// Velocity gain, N s/m.
    pub k_pd: f64,
    /// Force-error convergence rate, 1/s.
    pub k_delta: f64,
    /// Roll-about-vertical convergence gain, 1/s.
    pub k_q: f64,
    /// Attitude stiffness, N m.
    pub k_r: f64,
    /// Attitude damping, N m s.
    pub k_omega: f64,
    /// Saturation level of the shaped feedback, N.
    pub m_i: f64,
    /// Error-governor clamps, m and m/s.
    pub e_p_max: f64,
    pub e_v_max: f64,
    /// Division guard on the thrust state, N.
    pub f_min: f64,
    pub mode: RefForceMode,
    pub sigma: GompertzShape,
    /// Use the redefined input that makes the force error exactly first
    /// order; the original form leaves an attitude-mismatch disturbance.
    pub use_corrected_nu: bool,
}

impl Default for HoverGains {
    fn default() -> Self {
        HoverGains {
            k_pp: 2.0,
            k_pd: 2.2,
            k_delta: 5.0,
            k_q: 1.0,
            k_r: 5.0,
            k_omega: 0.5,
            m_i: 1.0,
            e_p_max: 1.0,
            e_v_max: 1.0,
            f_min: 0.1,
            mode: RefForceMode::Qto,
            sigma: GompertzShape::default(),
            use_corrected_nu: true,
        }
    }
}

/// Controller internal state: desired attitude and thrust magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoverCtlState {
    pub q_d: UnitQuat,
    pub f: f64,
}

impl HoverCtlState {
    /// Initialization rule: desired attitude starts at the measured attitude
    /// and the thrust state at the weight, avoiding hand-off transients.
    pub fn align_with(state: &InertialState, params: &VehicleParams) -> Self {
        HoverCtlState {
            q_d: state.q,
            f: params.m * GRAVITY,
        }
    }
}

/// Hover controller with precomputed distribution matrices.
#[derive(Debug, Clone)]
pub struct HoverCtl {
    pub gains: HoverGains,
    mass: f64,
    inertia: Mat3,
    m_b: SMatrix<f64, 3, 4>,
    m_b_pinv: SMatrix<f64, 4, 3>,
    /// Moment-free input direction scaled so `F_b * u_kernel` is unit norm.
    u_kernel: Vector4<f64>,
    /// Body-frame thrust direction of the kernel command.
    d_star: Vec3,
}

impl HoverCtl {
    pub fn new(gains: HoverGains, params: &VehicleParams) -> Self {
        let (f_b, m_b) = input_matrices(params);
        let m_b_pinv = m_b
            .pseudo_inverse(1e-12)
            .expect("moment matrix pseudo-inverse");
        let ones = Vector4::new(1.0, 1.0, 0.0, 0.0);
        let kappa = (f_b * ones).norm();
        let u_kernel = ones / kappa;
        let d_star = (f_b * ones).normalize();
        HoverCtl {
            gains,
            mass: params.m,
            inertia: params.inertia(),
            m_b,
            m_b_pinv,
            u_kernel,
            d_star,
        }
    }

    pub fn d_star(&self) -> Vec3 {
        self.d_star
    }

    pub fn moment_pinv(&self) -> SMatrix<f64, 4, 3> {
        self.m_b_pinv
    }

    /// Upward force reference from position and velocity errors.
    ///
    /// `e_p = p - p_ref`, `e_v = v`. At zero error this is exact gravity
    /// compensation `(0, 0, m g)`.
    pub fn reference_force(&self, e_p: Vec3, e_v: Vec3) -> Vec3 {
        let g = &self.gains;
        let weight = Vec3::new(0.0, 0.0, self.mass * GRAVITY);
        match g.mode {
            RefForceMode::Linear => weight - g.k_pp * e_p - g.k_pd * e_v,
            RefForceMode::ErrorGovernor => {
                let e_p = clamp_norm(e_p, g.e_p_max);
                let e_v = clamp_norm(e_v, g.e_v_max);
                weight - g.k_pp * e_p - g.k_pd * e_v
            }
            RefForceMode::GompertzSat => {
                let raw = -g.k_pp * e_p - g.k_pd * e_v;
                weight + raw.map(|x| g.sigma.eval(g.m_i, x))
            }
            RefForceMode::Qto => {
                let ratio = g.k_pd / g.k_pp;
                let blend = smooth_max(e_v.norm() / (2.0 * g.m_i), ratio);
                let arg = g.k_pp * (e_p + e_v * blend);
                weight + arg.map(|x| -g.sigma.eval(g.m_i, x))
            }
        }
    }

    /// Distribution `u = M_b^# tau_r + u_kernel f`: the pseudo-inverse part
    /// realizes the torque on the row space and the kernel part adds thrust
    /// without any moment.
    pub fn distribute(&self, tau_r: Vec3, f: f64) -> EffectiveCommand {
        let u = self.m_b_pinv * tau_r + self.u_kernel * f;
        EffectiveCommand::from_vector(u)
    }

    /// Force tracking error `f_delta = R(q_d) d* f - f_r`.
    pub fn force_error(&self, ctl: &HoverCtlState, f_r: Vec3) -> Vec3 {
        ctl.q_d.rotation() * self.d_star * ctl.f - f_r
    }

    /// Original outer-loop input: drives `f_delta` first order only once the
    /// attitude has converged.
    pub fn nu(&self, e_p: Vec3, e_v: Vec3, f_delta: Vec3) -> Vec3 {
        let g = &self.gains;
        let m = self.mass;
        (g.k_pp * g.k_pd / m) * e_p + (g.k_pd * g.k_pd / m - g.k_pp) * e_v
            - (g.k_pd / m + g.k_delta) * f_delta
    }

    /// Redefined input: the extra attitude-mismatch term makes
    /// `f_delta_dot = -k_delta f_delta` hold exactly.
    pub fn nu_prime(
        &self,
        e_p: Vec3,
        e_v: Vec3,
        f_delta: Vec3,
        q: UnitQuat,
        q_d: UnitQuat,
        f: f64,
    ) -> Vec3 {
        self.nu(e_p, e_v, f_delta)
            - (self.gains.k_pd / self.mass) * ((q.rotation() - q_d.rotation()) * self.d_star) * f
    }

    fn nu_for_mode(
        &self,
        e_p: Vec3,
        e_v: Vec3,
        f_delta: Vec3,
        q: UnitQuat,
        q_d: UnitQuat,
        f: f64,
    ) -> Vec3 {
        if self.gains.use_corrected_nu {
            self.nu_prime(e_p, e_v, f_delta, q, q_d, f)
        } else {
            self.nu(e_p, e_v, f_delta)
        }
    }

    /// Analytic `f_delta_dot` for the loop driven by `nu_used`; with the
    /// corrected input this reduces to `-k_delta f_delta` identically.
    pub fn force_error_rate(
        &self,
        nu_used: Vec3,
        e_p: Vec3,
        e_v: Vec3,
        f_delta: Vec3,
        q: UnitQuat,
        q_d: UnitQuat,
        f: f64,
    ) -> Vec3 {
        let g = &self.gains;
        let m = self.mass;
        let mismatch = (q.rotation() - q_d.rotation()) * self.d_star * f;
        nu_used
            + g.k_pp * e_v
            + (g.k_pd / m) * (mismatch - g.k_pp * e_p - g.k_pd * e_v + f_delta)
    }

    /// Desired body rate: force-direction steering plus the low-priority
    /// roll-about-vertical convergence term (active only along `d*`).
    pub fn desired_rate(
        &self,
        ctl: &HoverCtlState,
        nu: Vec3,
        q: UnitQuat,
        q_ref: UnitQuat,
    ) -> Result<Vec3, HoverCtlError> {
        if ctl.f <= self.gains.f_min {
            return Err(HoverCtlError::ThrustTooLow(ctl.f));
        }
        let steering = skew(self.d_star) * (ctl.q_d.rotation().transpose() * nu) / ctl.f;
        let eps_err = quat_error(q_ref, q).eps;
        let roll = -self.gains.k_q * self.d_star * self.d_star.dot(&eps_err);
        Ok(steering + roll)
    }

    /// Thrust-state rate `f_dot = (R(q_d) d*)' nu`.
    pub fn thrust_rate(&self, ctl: &HoverCtlState, nu: Vec3) -> f64 {
        (ctl.q_d.rotation() * self.d_star).dot(&nu)
    }

    /// Analytic time derivative of [`Self::desired_rate`] along the closed
    /// loop, used as attitude feedforward.
    #[allow(clippy::too_many_arguments)]
    pub fn desired_rate_deriv(
        &self,
        state: &InertialState,
        ctl: &HoverCtlState,
        e_p: Vec3,
        e_v: Vec3,
        q_ref: UnitQuat,
    ) -> Result<Vec3, HoverCtlError> {
        if ctl.f <= self.gains.f_min {
            return Err(HoverCtlError::ThrustTooLow(ctl.f));
        }
        let g = &self.gains;
        let m = self.mass;
        let r = state.q.rotation();
        let r_d = ctl.q_d.rotation();
        let f = ctl.f;
        let f_r = self.reference_force(e_p, e_v);
        let f_delta = self.force_error(ctl, f_r);
        let nu = self.nu_for_mode(e_p, e_v, f_delta, state.q, ctl.q_d, f);
        let omega_d = self.desired_rate(ctl, nu, state.q, q_ref)?;
        let f_dot = self.thrust_rate(ctl, nu);

        // chain rule pieces
        let mismatch = (r - r_d) * self.d_star * f;
        let e_v_dot = (mismatch - g.k_pp * e_p - g.k_pd * e_v + f_delta) / m;
        let f_delta_dot = self.force_error_rate(nu, e_p, e_v, f_delta, state.q, ctl.q_d, f);
        let r_dot = r * skew(state.omega_b);
        let r_d_dot = r_d * skew(omega_d);
        let mut nu_dot = (g.k_pp * g.k_pd / m) * e_v + (g.k_pd * g.k_pd / m - g.k_pp) * e_v_dot
            - (g.k_pd / m + g.k_delta) * f_delta_dot;
        if g.use_corrected_nu {
            nu_dot -= (g.k_pd / m) * ((r_dot - r_d_dot) * self.d_star) * f;
            nu_dot -= (g.k_pd / m) * ((r - r_d) * self.d_star) * f_dot;
        }

        // d/dt [ (1/f) [d*]x R_d' nu ]
        let sx = skew(self.d_star);
        let steering_dot = sx
            * (r_d.transpose() * nu_dot - skew(omega_d) * (r_d.transpose() * nu)
                - (f_dot / f) * (r_d.transpose() * nu))
            / f;

        // d/dt [ -k_q d* d*' eps'_delta ]: the error quaternion follows the
        // vehicle, q_ref constant.
        let q_err = quat_error(q_ref, state.q);
        let eps_err_dot = quat_deriv(q_err, state.omega_b).eps;
        let roll_dot = -g.k_q * self.d_star * self.d_star.dot(&eps_err_dot);

        Ok(steering_dot + roll_dot)
    }

    /// Inner attitude loop: quaternion PD with gyroscopic compensation and
    /// rate feedforward.
    pub fn attitude_torque(
        &self,
        state: &InertialState,
        ctl: &HoverCtlState,
        omega_d: Vec3,
        omega_d_dot: Vec3,
    ) -> Vec3 {
        let g = &self.gains;
        let q_e = quat_error(ctl.q_d, state.q);
        let sign = if q_e.eta < 0.0 { -1.0 } else { 1.0 };
        -g.k_r * sign * q_e.eps - g.k_omega * (state.omega_b - omega_d)
            + skew(state.omega_b) * (self.inertia * state.omega_b)
            + self.inertia * omega_d_dot
    }

    /// One controller update: composes the loops, integrates the internal
    /// state over `dt`, and returns the unsaturated effective command.
    pub fn step(
        &self,
        state: &InertialState,
        ctl: &HoverCtlState,
        target_p: Vec3,
        q_ref: UnitQuat,
        dt: f64,
    ) -> Result<(EffectiveCommand, HoverCtlState), HoverCtlError> {
        let e_p = state.p - target_p;
        let e_v = state.v;
        let f_r = self.reference_force(e_p, e_v);
        let f_delta = self.force_error(ctl, f_r);
        let nu = self.nu_for_mode(e_p, e_v, f_delta, state.q, ctl.q_d, ctl.f);
        let omega_d = self.desired_rate(ctl, nu, state.q, q_ref)?;
        let omega_d_dot = self.desired_rate_deriv(state, ctl, e_p, e_v, q_ref)?;
        let tau_r = self.attitude_torque(state, ctl, omega_d, omega_d_dot);
        let u = self.distribute(tau_r, ctl.f);

        let q_d_rate = quat_deriv(ctl.q_d, omega_d);
        let next = HoverCtlState {
            q_d: UnitQuat::new(
                ctl.q_d.eta + dt * q_d_rate.eta,
                ctl.q_d.eps + dt * q_d_rate.eps,
            ),
            f: (ctl.f + dt * self.thrust_rate(ctl, nu)).max(self.gains.f_min * 1.001),
        };
        Ok((u, next))
    }

    /// Moment of the effective command under the moment input matrix.
    pub fn moment_of(&self, u: &EffectiveCommand) -> Vec3 {
        self.m_b * u.as_vector()
    }
}

fn clamp_norm(v: Vec3, max_norm: f64) -> Vec3 {
    let n = v.norm();
    if n > max_norm {
        v * (max_norm / n)
    } else {
        v
    }
}

/// Smooth approximation of `max(a, b)` for nonnegative inputs.
fn smooth_max(a: f64, b: f64) -> f64 {
    0.5 * (a + b + ((a - b) * (a - b) + 1e-6).sqrt())
}
