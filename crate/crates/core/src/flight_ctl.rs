//! Horizontal-flight controller: a line-of-sight attitude law steering the
//! velocity direction onto the target bearing, a PID airspeed loop on total
//! thrust, and an internal control-allocation ODE that inverts the moment
//! map through an SVD-regularized Jacobian.

use crate::mathkin::{skew, Mat3, UnitQuat, Vec3};
use crate::vehicle::{
    augmented_wrench, EffectiveCommand, InertialState, VehicleParams, VirtualCommand,
};
use nalgebra::Vector3;

#[derive(Debug, thiserror::Error)]
pub enum FlightCtlError {
    #[error("line of sight undefined: {0}")]
    DegenerateGeometry(String),
    #[error("allocation Jacobian is identically zero")]
    ZeroMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlightGains {
    /// Attitude stiffness of the discontinuous torque law, N m.
    pub k_c: f64,
    /// Rate damping, N m s.
    pub k_d: f64,
    /// Airspeed PID gains (thrust N per m/s, per m, per m/s^2).
    pub k_p: f64,
    pub k_i: f64,
    pub k_dv: f64,
    /// Allocation convergence rate, 1/s.
    pub k_u: f64,
    /// Relative singular-value floor of the Jacobian inverse.
    pub sigma_floor: f64,
    /// Minimum speed for a defined velocity direction, m/s.
    pub v_min: f64,
    /// Time constant of the airspeed-derivative filter, s.
    pub accel_filter_tau: f64,
}

impl Default for FlightGains {
    fn default() -> Self {
        FlightGains {
            k_c: 0.4,
            k_d: 0.15,
            k_p: 1.0,
            k_i: 0.25,
            k_dv: 0.02,
            k_u: 20.0,
            sigma_floor: 1e-6,
            v_min: 0.5,
            accel_filter_tau: 0.05,
        }
    }
}

/// Controller state: internal allocation command `[T1-T2, d1+d2, d1-d2]`,
/// PID integrator, and the airspeed-derivative filter memory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlightCtlState {
    pub u_bar: Vector3<f64>,
    pub pid_integral: f64,
    pub prev_vbx: f64,
    pub vdot_filtered: f64,
    /// Condition number of the last allocation Jacobian (for the log).
    pub last_kappa: f64,
}

impl FlightCtlState {
    pub fn new(v_bx: f64) -> Self {
        FlightCtlState {
            u_bar: Vector3::zeros(),
            pid_integral: 0.0,
            prev_vbx: v_bx,
            vdot_filtered: 0.0,
            last_kappa: 1.0,
        }
    }

    /// Hand-off initialization reproducing the current thrust/elevon split.
    pub fn from_physical(cmd: &crate::vehicle::PhysicalCommand, params: &VehicleParams, v_bx: f64) -> Self {
        let v = cmd.to_virtual(params);
        FlightCtlState {
            u_bar: Vector3::new(v.t_diff, v.d_sum, v.d_diff),
            pid_integral: 0.0,
            prev_vbx: v_bx,
            vdot_filtered: 0.0,
            last_kappa: 1.0,
        }
    }
}

/// Error quaternion rotating the target bearing onto the velocity direction;
/// identity when they are aligned.
pub fn los_error_quat(p: Vec3, p_c: Vec3, v: Vec3, v_min: f64) -> Result<UnitQuat, FlightCtlError> {
    let to_target = p_c - p;
    if to_target.norm() == 0.0 {
        return Err(FlightCtlError::DegenerateGeometry(
            "already at the target point".into(),
        ));
    }
    if v.norm() <= v_min {
        return Err(FlightCtlError::DegenerateGeometry(format!(
            "speed {:.2} m/s below the direction threshold",
            v.norm()
        )));
    }
    let u_c = to_target.normalize();
    let u_v = v.normalize();
    let dot = u_c.dot(&u_v).clamp(-1.0, 1.0);
    let axis = u_c.cross(&u_v);
    let axis_norm = axis.norm();
    if axis_norm < 1e-12 {
        if dot > 0.0 {
            return Ok(UnitQuat::IDENTITY);
        }
        // anti-aligned: half turn about a deterministic axis orthogonal to
        // the velocity (projection of e3, falling back to e2 near vertical)
        let e3 = Vec3::z();
        let proj = e3 - u_v * u_v.dot(&e3);
        let axis = if proj.norm() > 1e-9 {
            proj.normalize()
        } else {
            (Vec3::y() - u_v * u_v.dot(&Vec3::y())).normalize()
        };
        return Ok(UnitQuat { eta: 0.0, eps: axis });
    }
    let eta = ((1.0 + dot) / 2.0).sqrt();
    let eps = (axis / axis_norm) * ((1.0 - dot) / 2.0).sqrt();
    Ok(UnitQuat::new(eta, eps))
}

/// Discontinuous attitude torque
/// `Gamma_c = -k_c sign(eta_e) eps_e + [w]x J w - k_d w`; `sign(0) = +1`.
pub fn los_torque(q_e: UnitQuat, omega_b: Vec3, inertia: Mat3, gains: &FlightGains) -> Vec3 {
    let sign = if q_e.eta < 0.0 { -1.0 } else { 1.0 };
    -gains.k_c * sign * q_e.eps + skew(omega_b) * (inertia * omega_b) - gains.k_d * omega_b
}

/// Airspeed PID on total thrust. The integrator accumulates the tracking
/// error and is clamped so the thrust request stays inside what two motors
/// can deliver.
pub fn airspeed_pid(
    v_bx: f64,
    v_c: f64,
    state: &FlightCtlState,
    dt: f64,
    gains: &FlightGains,
    t_sum_max: f64,
) -> (f64, FlightCtlState) {
    let mut next = *state;
    let err = v_c - v_bx;
    // one-pole filtered first difference for the derivative term
    let raw_rate = (v_bx - state.prev_vbx) / dt;
    let alpha = dt / (gains.accel_filter_tau + dt);
    next.vdot_filtered = state.vdot_filtered + alpha * (raw_rate - state.vdot_filtered);
    next.prev_vbx = v_bx;

    next.pid_integral = state.pid_integral + err * dt;
    let unclamped = |integral: f64| gains.k_p * err + gains.k_i * integral + gains.k_dv * next.vdot_filtered;
    // anti-windup: keep the integral where the total request saturates
    let t = unclamped(next.pid_integral);
    if gains.k_i > 0.0 {
        if t > t_sum_max {
            next.pid_integral = (t_sum_max - gains.k_p * err - gains.k_dv * next.vdot_filtered) / gains.k_i;
        } else if t < 0.0 {
            next.pid_integral = (-gains.k_p * err - gains.k_dv * next.vdot_filtered) / gains.k_i;
        }
    }
    let t_sum = unclamped(next.pid_integral).clamp(0.0, t_sum_max);
    (t_sum, next)
}

/// Moment of the airspeed-augmented model as a function of the allocation
/// vector `u_bar = [T1-T2, d1+d2, d1-d2]` at fixed total thrust and airspeed.
pub fn allocation_moment(
    u_bar: &Vector3<f64>,
    t_sum: f64,
    v_b: Vec3,
    omega_b: Vec3,
    params: &VehicleParams,
) -> Vec3 {
    let u = VirtualCommand {
        t_sum,
        t_diff: u_bar[0],
        d_sum: u_bar[1],
        d_diff: u_bar[2],
    };
    augmented_wrench(&u, v_b, omega_b, params).moment
}

/// Jacobian of [`allocation_moment`] with respect to `u_bar`. Entry (3,2) is
/// structurally zero; entry (3,1) is the thrust-differential yaw arm.
pub fn allocation_jacobian(
    u_bar: &Vector3<f64>,
    t_sum: f64,
    v_b: Vec3,
    omega_b: Vec3,
    params: &VehicleParams,
) -> Mat3 {
    let kw = params.wash_ratio();
    let cl = params.lift_factor();
    let eta = params.airspeed_norm(v_b, omega_b);
    let q4 = 0.25 * params.rho * params.s * eta;
    let (td, ds, dd) = (u_bar[0], u_bar[1], u_bar[2]);
    let ax = 0.5 * kw * params.a_y * cl * params.xi_f;
    let my = 0.5 * kw * params.delta_r * cl * params.xi_m;

    Mat3::new(
        params.k_m / params.k_f + ax * ds,
        ax * td,
        ax * t_sum + q4 * params.a_y * cl * params.xi_f * v_b.x,
        my * dd,
        my * t_sum + q4 * params.delta_r * cl * params.xi_m * v_b.x,
        my * td,
        params.p_y + kw * params.a_y * params.c_d0,
        0.0,
        q4 * params.a_y * params.c_d0 * params.xi_f * v_b.z,
    )
}

/// SVD inverse with singular values floored at `sigma_floor * sigma_max`.
/// Returns the inverse and the raw condition number (possibly infinite).
pub fn regularized_inverse(jm: &Mat3, sigma_floor: f64) -> Result<(Mat3, f64), FlightCtlError> {
    let svd = jm.svd(true, true);
    let sigma_max = svd.singular_values.max();
    if sigma_max == 0.0 {
        return Err(FlightCtlError::ZeroMatrix);
    }
    let sigma_min = svd.singular_values.min();
    let kappa = if sigma_min > 0.0 {
        sigma_max / sigma_min
    } else {
        f64::INFINITY
    };
    let floor = sigma_floor * sigma_max;
    let inv_sigma = Mat3::from_diagonal(&svd.singular_values.map(|s| 1.0 / s.max(floor)));
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    Ok((v_t.transpose() * inv_sigma * u.transpose(), kappa))
}

/// One Euler step of the internal allocation dynamics
/// `u_bar_dot = -k_u (dM/du_bar)^-1 (M(u_bar) - Gamma_c)`, with the elevon
/// components projected back into the deflection envelope.
pub fn allocation_step(
    ctl: &FlightCtlState,
    gamma_c: Vec3,
    t_sum: f64,
    v_b: Vec3,
    omega_b: Vec3,
    dt: f64,
    params: &VehicleParams,
    gains: &FlightGains,
    delta_max: f64,
) -> Result<FlightCtlState, FlightCtlError> {
    let jm = allocation_jacobian(&ctl.u_bar, t_sum, v_b, omega_b, params);
    let (inv, kappa) = regularized_inverse(&jm, gains.sigma_floor)?;
    let residual = allocation_moment(&ctl.u_bar, t_sum, v_b, omega_b, params) - gamma_c;
    let mut u_bar = ctl.u_bar - gains.k_u * dt * (inv * residual);

    // project deflections into the envelope
    let d1 = (0.5 * (u_bar[1] + u_bar[2])).clamp(-delta_max, delta_max);
    let d2 = (0.5 * (u_bar[1] - u_bar[2])).clamp(-delta_max, delta_max);
    u_bar[1] = d1 + d2;
    u_bar[2] = d1 - d2;

    let mut next = *ctl;
    next.u_bar = u_bar;
    next.last_kappa = kappa;
    Ok(next)
}

/// Full flight-control update: line of sight, torque, airspeed PID, and
/// allocation, returning the unsaturated effective command.
#[allow(clippy::too_many_arguments)]
pub fn flight_step(
    state: &InertialState,
    ctl: &FlightCtlState,
    p_c: Vec3,
    v_c: f64,
    dt: f64,
    gains: &FlightGains,
    params: &VehicleParams,
    limits: &crate::vehicle::ActuatorLimits,
) -> Result<(EffectiveCommand, FlightCtlState), FlightCtlError> {
    let q_e = los_error_quat(state.p, p_c, state.v, gains.v_min)?;
    let gamma_c = los_torque(q_e, state.omega_b, params.inertia(), gains);
    let v_b = state.body_airspeed(Vec3::zeros());
    let t_sum_max = 2.0 * params.k_f * limits.omega_max * limits.omega_max;
    let (t_sum, pid_state) = airspeed_pid(v_b.x, v_c, ctl, dt, gains, t_sum_max);
    let next = allocation_step(
        &pid_state,
        gamma_c,
        t_sum,
        v_b,
        state.omega_b,
        dt,
        params,
        gains,
        limits.delta_max,
    )?;
    let u = VirtualCommand {
        t_sum,
        t_diff: next.u_bar[0],
        d_sum: next.u_bar[1],
        d_diff: next.u_bar[2],
    }
    .to_effective();
    Ok((u, next))
}
