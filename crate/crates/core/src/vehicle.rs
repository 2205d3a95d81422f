//! DarkO vehicle model: parameters, actuator limits, command spaces, and the
//! three force/moment models (matrix model, airspeed-augmented model) feeding
//! the 6-DOF state derivative.
//!
//! Frames: inertial z points up, gravity is `(0, 0, -g)`. The body x axis
//! carries the motors, so hover holds the nose (body x) on the vertical.

use crate::mathkin::{quat_deriv, skew, Mat3, QuatRate, UnitQuat, Vec3};
use nalgebra::SMatrix;
use serde::Deserialize;
use std::path::Path;

pub const GRAVITY: f64 = 9.81;

pub type Mat3x4 = SMatrix<f64, 3, 4>;

#[derive(Debug, thiserror::Error)]
pub enum ParamsError {
    #[error("failed to read parameter file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse parameter file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

/// Physical constants of the airframe.
///
/// Lengths in m, areas in m^2, masses in kg, inertias in kg m^2. `k_f` (kg m)
/// and `k_m` (kg m^2) map motor speed squared to thrust and torque. `xi_f`
/// and `xi_m` are the elevon force/moment effectiveness factors. The motor
/// and aero-center offsets are stored as magnitudes; side 1 sits at -y,
/// side 2 at +y.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleParams {
    pub m: f64,
    /// Mean chord.
    pub c: f64,
    /// Span.
    pub b: f64,
    /// Wing area.
    pub s: f64,
    /// Propeller disc area.
    pub s_p: f64,
    pub j1: f64,
    pub j2: f64,
    pub j3: f64,
    pub k_f: f64,
    pub k_m: f64,
    pub c_d0: f64,
    pub c_y0: f64,
    pub xi_f: f64,
    pub xi_m: f64,
    pub p_x: f64,
    pub p_y: f64,
    pub p_z: f64,
    pub a_x: f64,
    pub a_y: f64,
    pub a_z: f64,
    /// Air density, kg/m^3.
    pub rho: f64,
    /// Airspeed-norm mixing constant in `eta = sqrt(|v_b|^2 + mu c^2 |w_b|^2)`.
    pub mu: f64,
    /// Signed pitch lever arm of the wing/elevon moment terms, m. Negative
    /// makes the wing moment restoring (weather-vane stable) and a positive
    /// deflection pitch the nose up, matching the elevon sign convention.
    pub delta_r: f64,
    /// Blown wing area, m^2.
    pub s_wet: f64,
    /// Rate-damping coefficients from the identification table; carried in
    /// the parameter set but unused by the implemented force/moment models.
    pub damping: DampingCoefficients,
    /// Propeller inertia; carried but unused (no gyroscopic coupling term).
    pub j_p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DampingCoefficients {
    pub c_lp: f64,
    pub c_lq: f64,
    pub c_lr: f64,
    pub c_mp: f64,
    pub c_mq: f64,
    pub c_mr: f64,
    pub c_np: f64,
    pub c_nq: f64,
    pub c_nr: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        let s = 0.0743;
        let c = 0.13;
        VehicleParams {
            m: 0.492,
            c,
            b: 0.55,
            s,
            s_p: 0.3989,
            j1: 0.0070,
            j2: 0.0028,
            j3: 0.0061,
            k_f: 5.13e-6,
            k_m: 2.64e-7,
            c_d0: 0.025,
            c_y0: 0.0,
            xi_f: 0.85,
            xi_m: 0.55,
            p_x: 0.065,
            p_y: 0.155,
            p_z: 0.0,
            a_x: 0.0,
            a_y: 0.155,
            a_z: 0.0,
            rho: 1.225,
            mu: 0.0,
            delta_r: -c / 4.0,
            s_wet: s,
            damping: DampingCoefficients {
                c_lp: 0.2792,
                c_lq: 0.0,
                c_lr: 0.1145,
                c_mp: 0.0,
                c_mq: 1.2715,
                c_mr: 0.0,
                c_np: 0.081,
                c_nq: 0.0,
                c_nr: 0.0039,
            },
            j_p: 5.1116e-6,
        }
    }
}

/// Raw file schema keyed by the identification-table symbol names.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    m: Option<f64>,
    c: Option<f64>,
    b: Option<f64>,
    #[serde(rename = "S")]
    s: Option<f64>,
    /// Propeller disc area (table name `S_f`).
    #[serde(rename = "S_f")]
    s_f: Option<f64>,
    #[serde(rename = "Jxx")]
    jxx: Option<f64>,
    #[serde(rename = "Jyy")]
    jyy: Option<f64>,
    #[serde(rename = "Jzz")]
    jzz: Option<f64>,
    #[serde(rename = "J_p")]
    j_p: Option<f64>,
    k_f: Option<f64>,
    k_m: Option<f64>,
    #[serde(rename = "C_d0")]
    c_d0: Option<f64>,
    #[serde(rename = "C_y0")]
    c_y0: Option<f64>,
    #[serde(rename = "C_lp")]
    c_lp: Option<f64>,
    #[serde(rename = "C_lq")]
    c_lq: Option<f64>,
    #[serde(rename = "C_lr")]
    c_lr: Option<f64>,
    #[serde(rename = "C_mp")]
    c_mp: Option<f64>,
    #[serde(rename = "C_mq")]
    c_mq: Option<f64>,
    #[serde(rename = "C_mr")]
    c_mr: Option<f64>,
    #[serde(rename = "C_np")]
    c_np: Option<f64>,
    #[serde(rename = "C_nq")]
    c_nq: Option<f64>,
    #[serde(rename = "C_nr")]
    c_nr: Option<f64>,
    p_x: Option<f64>,
    p_y: Option<f64>,
    p_z: Option<f64>,
    a_x: Option<f64>,
    a_y: Option<f64>,
    a_z: Option<f64>,
    xi_f: Option<f64>,
    xi_m: Option<f64>,
    rho: Option<f64>,
    mu: Option<f64>,
    delta_r: Option<f64>,
    #[serde(rename = "S_wet")]
    s_wet: Option<f64>,
}

impl VehicleParams {
    /// Loads parameters from a TOML file; missing keys keep their defaults.
    /// `S_wet` additionally defaults to `S` when only the latter is given.
    pub fn load(path: &Path) -> Result<Self, ParamsError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ParamsError> {
        let f: ParamsFile = toml::from_str(text)?;
        let mut p = VehicleParams::default();
        macro_rules! take {
            ($($field:ident <- $opt:ident),* $(,)?) => {
                $(if let Some(v) = f.$opt { p.$field = v; })*
            };
        }
        take!(
            m <- m, c <- c, b <- b, s <- s, s_p <- s_f,
            j1 <- jxx, j2 <- jyy, j3 <- jzz, j_p <- j_p,
            k_f <- k_f, k_m <- k_m, c_d0 <- c_d0, c_y0 <- c_y0,
            p_x <- p_x, p_y <- p_y, p_z <- p_z,
            a_x <- a_x, a_y <- a_y, a_z <- a_z,
            xi_f <- xi_f, xi_m <- xi_m,
            rho <- rho, mu <- mu, delta_r <- delta_r,
        );
        p.damping = DampingCoefficients {
            c_lp: f.c_lp.unwrap_or(p.damping.c_lp),
            c_lq: f.c_lq.unwrap_or(p.damping.c_lq),
            c_lr: f.c_lr.unwrap_or(p.damping.c_lr),
            c_mp: f.c_mp.unwrap_or(p.damping.c_mp),
            c_mq: f.c_mq.unwrap_or(p.damping.c_mq),
            c_mr: f.c_mr.unwrap_or(p.damping.c_mr),
            c_np: f.c_np.unwrap_or(p.damping.c_np),
            c_nq: f.c_nq.unwrap_or(p.damping.c_nq),
            c_nr: f.c_nr.unwrap_or(p.damping.c_nr),
        };
        p.s_wet = f.s_wet.unwrap_or(p.s);
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ParamsError> {
        let positives = [
            ("m", self.m),
            ("S", self.s),
            ("S_f", self.s_p),
            ("Jxx", self.j1),
            ("Jyy", self.j2),
            ("Jzz", self.j3),
            ("k_f", self.k_f),
            ("k_m", self.k_m),
        ];
        for (name, v) in positives {
            if !(v > 0.0) {
                return Err(ParamsError::Invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn inertia(&self) -> Mat3 {
        Mat3::from_diagonal(&Vec3::new(self.j1, self.j2, self.j3))
    }

    /// Gravity acceleration vector, inertial frame (z up).
    pub fn gravity(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, -GRAVITY)
    }

    pub fn up(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, 1.0)
    }

    /// Prop-wash area ratio `S_wet / (4 S_p)`.
    pub fn wash_ratio(&self) -> f64 {
        self.s_wet / (4.0 * self.s_p)
    }

    /// Lift-curve factor `2*pi + C_d0`.
    pub fn lift_factor(&self) -> f64 {
        2.0 * std::f64::consts::PI + self.c_d0
    }

    /// Net axial-force fraction per unit thrust, `1 - S_wet C_d0 / (4 S_p)`.
    pub fn thrust_factor(&self) -> f64 {
        1.0 - self.wash_ratio() * self.c_d0
    }

    /// Motor position, side 1 (-y) or 2 (+y).
    pub fn motor_offset(&self, side: Side) -> Vec3 {
        Vec3::new(self.p_x, side.sign() * self.p_y, self.p_z)
    }

    /// Aerodynamic-center offset, side 1 (-y) or 2 (+y).
    pub fn aero_offset(&self, side: Side) -> Vec3 {
        Vec3::new(self.a_x, side.sign() * self.a_y, self.a_z)
    }

    /// Airspeed norm `eta = sqrt(|v_b|^2 + mu c^2 |w_b|^2)`.
    pub fn airspeed_norm(&self, v_b: Vec3, omega_b: Vec3) -> f64 {
        (v_b.norm_squared() + self.mu * self.c * self.c * omega_b.norm_squared()).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    fn sign(self) -> f64 {
        match self {
            Side::Left => -1.0,
            Side::Right => 1.0,
        }
    }
}

/// Actuator envelope: motor speed/acceleration and elevon deflection/rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActuatorLimits {
    pub omega_min: f64,
    pub omega_max: f64,
    pub omega_dot_max: f64,
    pub delta_max: f64,
    /// Fixed servo slew rate (0.2 s for 60 deg).
    pub delta_rate_max: f64,
}

impl Default for ActuatorLimits {
    fn default() -> Self {
        ActuatorLimits {
            omega_min: 200.0,
            omega_max: 1000.0,
            omega_dot_max: 3000.0,
            delta_max: 30.0_f64.to_radians(),
            delta_rate_max: 5.24,
        }
    }
}

/// Plant state `[p, v, q, omega_b]`; position/velocity inertial, rates body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InertialState {
    pub p: Vec3,
    pub v: Vec3,
    pub q: UnitQuat,
    pub omega_b: Vec3,
}

impl InertialState {
    pub fn at_rest(p: Vec3, q: UnitQuat) -> Self {
        InertialState {
            p,
            v: Vec3::zeros(),
            q,
            omega_b: Vec3::zeros(),
        }
    }

    /// Body-frame airspeed `v_b = R(q)^T (v - wind)`.
    pub fn body_airspeed(&self, wind: Vec3) -> Vec3 {
        self.q.rotation().transpose() * (self.v - wind)
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().all(|x| x.is_finite())
            && self.v.iter().all(|x| x.is_finite())
            && self.omega_b.iter().all(|x| x.is_finite())
            && self.q.eta.is_finite()
            && self.q.eps.iter().all(|x| x.is_finite())
    }
}

/// Time derivative of [`InertialState`].
#[derive(Debug, Clone, Copy)]
pub struct StateDeriv {
    pub p_dot: Vec3,
    pub v_dot: Vec3,
    pub q_dot: QuatRate,
    pub omega_dot: Vec3,
}

impl StateDeriv {
    pub fn norm(&self) -> f64 {
        (self.p_dot.norm_squared()
            + self.v_dot.norm_squared()
            + self.q_dot.eta * self.q_dot.eta
            + self.q_dot.eps.norm_squared()
            + self.omega_dot.norm_squared())
        .sqrt()
    }
}

/// Effective command `u = [T1, T2, d1*T1, d2*T2]` (thrusts in N, products in
/// N rad). The thrust/deflection coupling makes these the natural decoupled
/// inputs of the matrix model.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EffectiveCommand {
    pub t1: f64,
    pub t2: f64,
    pub d1t1: f64,
    pub d2t2: f64,
}

impl EffectiveCommand {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Pure-thrust command `lambda * [1, 1, 0, 0]` (the moment-free direction).
    pub fn kernel(lambda: f64) -> Self {
        EffectiveCommand {
            t1: lambda,
            t2: lambda,
            d1t1: 0.0,
            d2t2: 0.0,
        }
    }

    pub fn as_vector(&self) -> nalgebra::Vector4<f64> {
        nalgebra::Vector4::new(self.t1, self.t2, self.d1t1, self.d2t2)
    }

    pub fn from_vector(u: nalgebra::Vector4<f64>) -> Self {
        EffectiveCommand {
            t1: u[0],
            t2: u[1],
            d1t1: u[2],
            d2t2: u[3],
        }
    }

    /// Recovers deflections; below `t_min` thrust the split is ill-defined
    /// and the fallback deflections are kept.
    pub fn deflections(&self, t_min: f64, fallback: (f64, f64)) -> (f64, f64) {
        let d1 = if self.t1 >= t_min { self.d1t1 / self.t1 } else { fallback.0 };
        let d2 = if self.t2 >= t_min { self.d2t2 / self.t2 } else { fallback.1 };
        (d1, d2)
    }

    pub fn to_virtual(&self, t_min: f64, fallback: (f64, f64)) -> VirtualCommand {
        let (d1, d2) = self.deflections(t_min, fallback);
        VirtualCommand {
            t_sum: self.t1 + self.t2,
            t_diff: self.t1 - self.t2,
            d_sum: d1 + d2,
            d_diff: d1 - d2,
        }
    }
}

/// Virtual command `u' = [T1+T2, T1-T2, d1+d2, d1-d2]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VirtualCommand {
    pub t_sum: f64,
    pub t_diff: f64,
    pub d_sum: f64,
    pub d_diff: f64,
}

impl VirtualCommand {
    pub fn to_effective(&self) -> EffectiveCommand {
        let t1 = 0.5 * (self.t_sum + self.t_diff);
        let t2 = 0.5 * (self.t_sum - self.t_diff);
        let d1 = 0.5 * (self.d_sum + self.d_diff);
        let d2 = 0.5 * (self.d_sum - self.d_diff);
        EffectiveCommand {
            t1,
            t2,
            d1t1: d1 * t1,
            d2t2: d2 * t2,
        }
    }
}

/// Raw actuator command `(omega_1, omega_2, delta_1, delta_2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalCommand {
    pub omega1: f64,
    pub omega2: f64,
    pub delta1: f64,
    pub delta2: f64,
}

impl PhysicalCommand {
    /// Motors parked at the low stop, elevons neutral.
    pub fn idle(limits: &ActuatorLimits) -> Self {
        PhysicalCommand {
            omega1: limits.omega_min,
            omega2: limits.omega_min,
            delta1: 0.0,
            delta2: 0.0,
        }
    }

    pub fn to_effective(&self, params: &VehicleParams) -> EffectiveCommand {
        let t1 = thrust_from_motor_speed(self.omega1, params);
        let t2 = thrust_from_motor_speed(self.omega2, params);
        EffectiveCommand {
            t1,
            t2,
            d1t1: self.delta1 * t1,
            d2t2: self.delta2 * t2,
        }
    }

    pub fn to_virtual(&self, params: &VehicleParams) -> VirtualCommand {
        let t1 = thrust_from_motor_speed(self.omega1, params);
        let t2 = thrust_from_motor_speed(self.omega2, params);
        VirtualCommand {
            t_sum: t1 + t2,
            t_diff: t1 - t2,
            d_sum: self.delta1 + self.delta2,
            d_diff: self.delta1 - self.delta2,
        }
    }

    /// Converts an effective command into actuator values. Deflections are
    /// held at `prev` when the corresponding thrust is below 0.05 N.
    pub fn from_effective(
        u: &EffectiveCommand,
        prev: &PhysicalCommand,
        params: &VehicleParams,
        limits: &ActuatorLimits,
    ) -> Self {
        Self::from_effective_flagged(u, prev, params, limits).0
    }

    /// As [`Self::from_effective`], also reporting whether a motor-speed
    /// clamp was needed.
    pub fn from_effective_flagged(
        u: &EffectiveCommand,
        prev: &PhysicalCommand,
        params: &VehicleParams,
        limits: &ActuatorLimits,
    ) -> (Self, bool) {
        let (omega1, c1) = motor_speed_from_thrust(u.t1, params, limits);
        let (omega2, c2) = motor_speed_from_thrust(u.t2, params, limits);
        let (d1, d2) = u.deflections(0.05, (prev.delta1, prev.delta2));
        (
            PhysicalCommand {
                omega1,
                omega2,
                delta1: d1,
                delta2: d2,
            },
            c1 || c2,
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.omega1, self.omega2, self.delta1, self.delta2]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Propeller thrust `T = k_f omega^2`, N.
pub fn thrust_from_motor_speed(omega: f64, params: &VehicleParams) -> f64 {
    params.k_f * omega * omega
}

/// Inverse of [`thrust_from_motor_speed`], clamped into the speed envelope.
/// The flag reports whether the demanded thrust was unreachable.
pub fn motor_speed_from_thrust(
    thrust: f64,
    params: &VehicleParams,
    limits: &ActuatorLimits,
) -> (f64, bool) {
    let omega = (thrust.max(0.0) / params.k_f).sqrt();
    let clamped = omega.clamp(limits.omega_min, limits.omega_max);
    (clamped, clamped != omega)
}

/// Force and moment input matrices of the matrix model.
///
/// `F_b` has rank 2 with a zero second row (no lateral force authority);
/// `M_b` has rank 3 with kernel direction `[1, 1, 0, 0]`.
pub fn input_matrices(params: &VehicleParams) -> (Mat3x4, Mat3x4) {
    let kw = params.wash_ratio();
    let cl = params.lift_factor();
    let ft = params.thrust_factor();
    let fe = kw * cl * params.xi_f;
    let mx = kw * params.a_y * cl * params.xi_f;
    let my = kw * params.delta_r * cl * params.xi_m;
    let mz = params.p_y + kw * params.a_y * params.c_d0;
    let km = params.k_m / params.k_f;

    #[rustfmt::skip]
    let f_b = Mat3x4::from_row_slice(&[
        ft,  ft,  0.0, 0.0,
        0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, -fe, -fe,
    ]);
    #[rustfmt::skip]
    let m_b = Mat3x4::from_row_slice(&[
        km,  -km,  mx,  -mx,
        0.0, 0.0,  my,  my,
        mz,  -mz,  0.0, 0.0,
    ]);
    (f_b, m_b)
}

/// Body force/moment pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyWrench {
    pub force: Vec3,
    pub moment: Vec3,
}

impl BodyWrench {
    pub fn zero() -> Self {
        BodyWrench {
            force: Vec3::zeros(),
            moment: Vec3::zeros(),
        }
    }
}

/// Matrix model: `force = F_b u`, `moment = M_b u`.
pub fn simplified_wrench(u: &EffectiveCommand, params: &VehicleParams) -> BodyWrench {
    let (f_b, m_b) = input_matrices(params);
    let uv = u.as_vector();
    BodyWrench {
        force: f_b * uv,
        moment: m_b * uv,
    }
}

/// Airspeed-augmented model `F(u')`, `M(u')`.
///
/// Adds the v_b-dependent wing and elevon terms to the matrix model; at zero
/// airspeed it reduces to [`simplified_wrench`] of the equivalent command.
pub fn augmented_wrench(
    u: &VirtualCommand,
    v_b: Vec3,
    omega_b: Vec3,
    params: &VehicleParams,
) -> BodyWrench {
    let kw = params.wash_ratio();
    let cl = params.lift_factor();
    let ft = params.thrust_factor();
    let eta = params.airspeed_norm(v_b, omega_b);
    let q2 = 0.5 * params.rho * params.s * eta;
    let q4 = 0.25 * params.rho * params.s * eta;
    let (ts, td, ds, dd) = (u.t_sum, u.t_diff, u.d_sum, u.d_diff);

    let f_x = ft * ts - q2 * params.c_d0 * v_b.x + q4 * params.xi_f * params.c_d0 * v_b.z * ds;
    let f_y = 0.0;
    let f_z = -0.5 * kw * cl * params.xi_f * (ds * ts + dd * td)
        - q2 * cl * v_b.z
        - q4 * params.xi_f * cl * v_b.x * ds;

    let m_x = (params.k_m / params.k_f + 0.5 * kw * params.a_y * cl * params.xi_f * ds) * td
        + (0.5 * kw * params.a_y * cl * params.xi_f * ts + q4 * params.a_y * cl * params.xi_f * v_b.x)
            * dd;
    let m_y = (0.5 * kw * params.delta_r * cl * params.xi_m * ts
        + q4 * params.delta_r * cl * params.xi_m * v_b.x)
        * ds
        + 0.5 * kw * params.delta_r * cl * params.xi_m * td * dd
        + q2 * params.delta_r * cl * v_b.z;
    let m_z = (params.p_y + kw * params.a_y * params.c_d0) * td
        + q4 * params.a_y * params.c_d0 * params.xi_f * v_b.z * dd;

    BodyWrench {
        force: Vec3::new(f_x, f_y, f_z),
        moment: Vec3::new(m_x, m_y, m_z),
    }
}

/// Which force/moment model drives the plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelKind {
    Simplified,
    #[default]
    Augmented,
}

/// Command input accepted by [`state_deriv`].
#[derive(Debug, Clone, Copy)]
pub enum Command {
    Effective(EffectiveCommand),
    Virtual(VirtualCommand),
}

impl Command {
    fn to_effective(self) -> EffectiveCommand {
        match self {
            Command::Effective(u) => u,
            Command::Virtual(u) => u.to_effective(),
        }
    }

    fn to_virtual(self) -> VirtualCommand {
        match self {
            Command::Effective(u) => u.to_virtual(0.05, (0.0, 0.0)),
            Command::Virtual(u) => u,
        }
    }
}

/// 6-DOF state derivative under the selected model.
pub fn state_deriv(
    x: &InertialState,
    u: &Command,
    wind: Vec3,
    params: &VehicleParams,
    model: ModelKind,
) -> StateDeriv {
    let wrench = match model {
        ModelKind::Simplified => simplified_wrench(&u.to_effective(), params),
        ModelKind::Augmented => {
            let v_b = x.body_airspeed(wind);
            augmented_wrench(&u.to_virtual(), v_b, x.omega_b, params)
        }
    };
    state_deriv_from_wrench(x, &wrench, params)
}

pub fn state_deriv_from_wrench(
    x: &InertialState,
    wrench: &BodyWrench,
    params: &VehicleParams,
) -> StateDeriv {
    let r = x.q.rotation();
    let j = params.inertia();
    let j_inv = Mat3::from_diagonal(&Vec3::new(1.0 / params.j1, 1.0 / params.j2, 1.0 / params.j3));
    StateDeriv {
        p_dot: x.v,
        v_dot: r * wrench.force / params.m + params.gravity(),
        q_dot: quat_deriv(x.q, x.omega_b),
        omega_dot: j_inv * (wrench.moment - skew(x.omega_b) * (j * x.omega_b)),
    }
}

/// Applies position clamps, then rate clamps relative to `prev` over `dt`.
pub fn saturate_command(
    raw: &PhysicalCommand,
    prev: &PhysicalCommand,
    dt: f64,
    limits: &ActuatorLimits,
) -> PhysicalCommand {
    debug_assert!(dt > 0.0);
    let clamp_rate = |target: f64, prev: f64, rate: f64| -> f64 {
        let step = rate * dt;
        prev + (target - prev).clamp(-step, step)
    };
    let omega1 = raw.omega1.clamp(limits.omega_min, limits.omega_max);
    let omega2 = raw.omega2.clamp(limits.omega_min, limits.omega_max);
    let delta1 = raw.delta1.clamp(-limits.delta_max, limits.delta_max);
    let delta2 = raw.delta2.clamp(-limits.delta_max, limits.delta_max);
    PhysicalCommand {
        omega1: clamp_rate(omega1, prev.omega1, limits.omega_dot_max),
        omega2: clamp_rate(omega2, prev.omega2, limits.omega_dot_max),
        delta1: clamp_rate(delta1, prev.delta1, limits.delta_rate_max),
        delta2: clamp_rate(delta2, prev.delta2, limits.delta_rate_max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathkin::skew;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Assembles `F_b` from the primitive per-term expressions, keeping
    /// `Phi` matrices and offsets symbolic. Independent of `input_matrices`.
    fn assemble_force_terms(p: &VehicleParams, phi_fv: Mat3) -> Mat3x4 {
        let kw = p.wash_ratio();
        let mut f = Mat3x4::zeros();
        let e1 = Vec3::x();
        // thrust minus prop-wash drag on the wing, per motor
        let per_thrust = (Mat3::identity() - kw * phi_fv) * e1;
        f.column_mut(0).copy_from(&per_thrust);
        f.column_mut(1).copy_from(&per_thrust);
        // prop-wash on the deflected elevon: Delta_f,i T_i = -xi_f (d_i T_i) e3
        let per_elevon = phi_fv * (-p.xi_f * Vec3::z()) * kw;
        f.column_mut(2).copy_from(&per_elevon);
        f.column_mut(3).copy_from(&per_elevon);
        f
    }

    /// Assembles `M_b` term by term: wash pitch moment, aero-center offset
    /// moments, motor reaction torque, and thrust-offset moments.
    fn assemble_moment_terms(p: &VehicleParams, phi_fv: Mat3, phi_mv: Mat3) -> Mat3x4 {
        let kw = p.wash_ratio();
        let b_mat = Mat3::from_diagonal(&Vec3::new(p.b, p.c, p.b));
        let e1 = Vec3::x();
        let mut m = Mat3x4::zeros();
        for (i, side) in [Side::Left, Side::Right].into_iter().enumerate() {
            let a_i = skew(p.aero_offset(side));
            let p_i = skew(p.motor_offset(side));
            let motor_sign = if side == Side::Left { 1.0 } else { -1.0 };
            // per unit thrust T_i
            let per_thrust = p_i * e1 + motor_sign * (p.k_m / p.k_f) * e1 + kw * (a_i * (phi_fv * e1));
            // per unit (delta_i T_i): wash on wing through Delta_m and on the
            // offset elevon through Delta_f
            let per_elevon =
                kw * (b_mat * (phi_mv * (-p.xi_m * Vec3::z()))) + kw * (a_i * (phi_fv * (-p.xi_f * Vec3::z())));
            m.column_mut(i).copy_from(&per_thrust);
            m.column_mut(2 + i).copy_from(&per_elevon);
        }
        m
    }

    fn phi_fv_reduced(p: &VehicleParams) -> Mat3 {
        Mat3::from_diagonal(&Vec3::new(p.c_d0, 0.0, p.lift_factor()))
    }

    fn phi_fv_full(p: &VehicleParams) -> Mat3 {
        Mat3::from_diagonal(&Vec3::new(p.c_d0, p.c_y0, p.lift_factor()))
    }

    fn phi_mv_reduced(p: &VehicleParams) -> Mat3 {
        let mut phi = Mat3::zeros();
        phi[(1, 2)] = -p.delta_r * p.lift_factor() / p.c;
        phi
    }

    fn phi_mv_full(p: &VehicleParams) -> Mat3 {
        let mut phi = phi_mv_reduced(p);
        phi[(2, 1)] = p.delta_r * p.c_y0 / p.c;
        phi
    }

    #[test]
    fn force_matrix_second_row_is_zero() {
        let p = VehicleParams::default();
        let (f_b, _) = input_matrices(&p);
        assert_eq!(f_b.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0; 4]);
    }

    #[test]
    fn input_matrix_ranks() {
        let p = VehicleParams::default();
        let (f_b, m_b) = input_matrices(&p);
        assert_eq!(f_b.svd(false, false).rank(1e-12), 2);
        assert_eq!(m_b.svd(false, false).rank(1e-12), 3);
    }

    #[test]
    fn kernel_direction_produces_zero_moment() {
        let p = VehicleParams::default();
        let (_, m_b) = input_matrices(&p);
        for lambda in [0.1, 1.0, 7.5] {
            let u = EffectiveCommand::kernel(lambda).as_vector();
            assert!((m_b * u).norm() < 1e-12);
        }
    }

    #[test]
    fn matrices_match_term_by_term_assembly() {
        let p = VehicleParams::default();
        let (f_b, m_b) = input_matrices(&p);
        let f_asm = assemble_force_terms(&p, phi_fv_reduced(&p));
        let m_asm = assemble_moment_terms(&p, phi_fv_reduced(&p), phi_mv_reduced(&p));
        assert_relative_eq!(f_b, f_asm, epsilon = 1e-14);
        assert_relative_eq!(m_b, m_asm, epsilon = 1e-14);
    }

    #[test]
    fn straight_and_arc_wing_assemblies_agree() {
        // With C_y0 = 0 the full Phi matrices collapse to the reduced ones,
        // so both assembly paths give identical input matrices.
        let p = VehicleParams::default();
        let f_straight = assemble_force_terms(&p, phi_fv_reduced(&p));
        let f_arc = assemble_force_terms(&p, phi_fv_full(&p));
        let m_straight = assemble_moment_terms(&p, phi_fv_reduced(&p), phi_mv_reduced(&p));
        let m_arc = assemble_moment_terms(&p, phi_fv_full(&p), phi_mv_full(&p));
        assert!((f_straight - f_arc).amax() <= 1e-12);
        assert!((m_straight - m_arc).amax() <= 1e-12);
    }

    #[test]
    fn thrust_curve_and_inverse() {
        let p = VehicleParams::default();
        let lim = ActuatorLimits::default();
        assert_eq!(thrust_from_motor_speed(0.0, &p), 0.0);
        assert_relative_eq!(thrust_from_motor_speed(1000.0, &p), 5.13, epsilon = 1e-12);

        let (omega, clamped) = motor_speed_from_thrust(2.0, &p, &lim);
        assert!(!clamped);
        assert_relative_eq!(thrust_from_motor_speed(omega, &p), 2.0, epsilon = 1e-12);

        let (omega_hi, clamped_hi) = motor_speed_from_thrust(1e3, &p, &lim);
        assert!(clamped_hi);
        assert_eq!(omega_hi, lim.omega_max);
    }

    #[test]
    fn differential_thrust_moment_pattern() {
        let p = VehicleParams::default();
        let u = EffectiveCommand {
            t1: 2.0,
            t2: 1.0,
            d1t1: 0.0,
            d2t2: 0.0,
        };
        let w = simplified_wrench(&u, &p);
        assert!(w.moment.x != 0.0);
        assert_eq!(w.moment.y, 0.0);
        assert!(w.moment.z != 0.0);
    }

    #[test]
    fn zero_command_zero_wrench() {
        let p = VehicleParams::default();
        let w = simplified_wrench(&EffectiveCommand::zero(), &p);
        assert_eq!(w.force, Vec3::zeros());
        assert_eq!(w.moment, Vec3::zeros());
    }

    #[test]
    fn augmented_reduces_to_simplified_at_zero_airspeed() {
        let p = VehicleParams::default();
        let cases = [
            (2.4, 2.4, 0.0, 0.0),
            (2.0, 1.5, 0.3, -0.2),
            (0.8, 1.1, -0.4, 0.4),
        ];
        for (t1, t2, d1, d2) in cases {
            let eff = EffectiveCommand {
                t1,
                t2,
                d1t1: d1 * t1,
                d2t2: d2 * t2,
            };
            let vir = VirtualCommand {
                t_sum: t1 + t2,
                t_diff: t1 - t2,
                d_sum: d1 + d2,
                d_diff: d1 - d2,
            };
            let a = augmented_wrench(&vir, Vec3::zeros(), Vec3::zeros(), &p);
            let s = simplified_wrench(&eff, &p);
            assert_relative_eq!(a.force, s.force, epsilon = 1e-12);
            assert_relative_eq!(a.moment, s.moment, epsilon = 1e-12);
        }
    }

    #[test]
    fn augmented_lateral_force_always_zero() {
        let p = VehicleParams::default();
        let u = VirtualCommand {
            t_sum: 4.0,
            t_diff: 0.5,
            d_sum: 0.3,
            d_diff: -0.1,
        };
        let w = augmented_wrench(&u, Vec3::new(3.0, -2.0, 1.0), Vec3::new(0.2, -0.4, 0.1), &p);
        assert_eq!(w.force.y, 0.0);
    }

    #[test]
    fn forward_speed_drag_and_pitch_damping() {
        let p = VehicleParams::default();
        let v = 6.0;
        let u = VirtualCommand::default();
        let w = augmented_wrench(&u, Vec3::new(v, 0.0, 0.0), Vec3::zeros(), &p);
        // Term-by-term of the airspeed model at neutral elevons:
        let expected_drag = -0.5 * p.rho * p.s * v * p.c_d0 * v;
        assert_relative_eq!(w.force.x, expected_drag, epsilon = 1e-12);
        assert_eq!(w.moment.y, 0.0); // pitch term needs v_b.z
        let w2 = augmented_wrench(&u, Vec3::new(v, 0.0, 1.0), Vec3::zeros(), &p);
        let eta = (v * v + 1.0).sqrt();
        let expected_pitch = 0.5 * p.rho * p.s * eta * p.delta_r * p.lift_factor();
        assert_relative_eq!(w2.moment.y, expected_pitch, epsilon = 1e-12);
    }

    #[test]
    fn free_fall_acceleration() {
        let p = VehicleParams::default();
        let x = InertialState::at_rest(Vec3::zeros(), UnitQuat::IDENTITY);
        let d = state_deriv(
            &x,
            &Command::Effective(EffectiveCommand::zero()),
            Vec3::zeros(),
            &p,
            ModelKind::Simplified,
        );
        assert_eq!(d.v_dot, p.gravity());
        assert_eq!(d.p_dot, Vec3::zeros());
    }

    #[test]
    fn gyroscopic_term_vanishes_on_principal_axis() {
        let p = VehicleParams::default();
        let mut x = InertialState::at_rest(Vec3::zeros(), UnitQuat::IDENTITY);
        x.omega_b = Vec3::new(0.0, 1.0, 0.0);
        let w = BodyWrench::zero();
        let d = state_deriv_from_wrench(&x, &w, &p);
        assert_relative_eq!(d.omega_dot, Vec3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn max_thrust_force_magnitude() {
        let p = VehicleParams::default();
        let lim = ActuatorLimits::default();
        let t_max = thrust_from_motor_speed(lim.omega_max, &p);
        let u = EffectiveCommand::kernel(t_max);
        let w = simplified_wrench(&u, &p);
        let expected = p.thrust_factor() * 2.0 * p.k_f * lim.omega_max * lim.omega_max;
        assert_relative_eq!(w.force.norm(), expected, epsilon = 1e-9);
        assert!(w.force.norm().is_finite());
    }

    #[test]
    fn saturation_position_and_rate() {
        let lim = ActuatorLimits::default();
        let prev = PhysicalCommand {
            omega1: 600.0,
            omega2: 600.0,
            delta1: 0.0,
            delta2: 0.0,
        };
        // inside all limits and close to prev: unchanged
        let raw = PhysicalCommand {
            omega1: 601.0,
            omega2: 599.0,
            delta1: 0.01,
            delta2: -0.01,
        };
        let out = saturate_command(&raw, &prev, 0.01, &lim);
        assert_eq!(out, raw);

        // speed clamp
        let hot = PhysicalCommand {
            omega1: 1500.0,
            ..prev
        };
        let out = saturate_command(&hot, &prev, 1.0, &lim);
        assert_eq!(out.omega1, 1000.0);

        // elevon slew: full step limited to 5.24 rad/s * dt
        let step = PhysicalCommand {
            delta1: 30.0_f64.to_radians(),
            ..prev
        };
        let out = saturate_command(&step, &prev, 0.01, &lim);
        assert_relative_eq!(out.delta1, 0.0524, epsilon = 1e-12);
    }

    #[test]
    fn params_load_roundtrip() {
        let text = r#"
            m = 0.5
            S = 0.08
            S_f = 0.4
            Jxx = 0.007
            Jyy = 0.003
            Jzz = 0.006
            k_f = 5.0e-6
            C_d0 = 0.03
            p_y = 0.16
            xi_f = 0.8
            C_mq = 1.3
            rho = 1.2
        "#;
        let p = VehicleParams::from_toml_str(text).unwrap();
        assert_eq!(p.m, 0.5);
        assert_eq!(p.s_p, 0.4);
        assert_eq!(p.j2, 0.003);
        assert_eq!(p.damping.c_mq, 1.3);
        assert_eq!(p.s_wet, 0.08); // follows S when not given
        assert_eq!(p.rho, 1.2);
        assert_eq!(p.mu, 0.0);

        assert!(VehicleParams::from_toml_str("m = -1.0").is_err());
        assert!(VehicleParams::from_toml_str("unknown_key = 1.0").is_err());
    }

    proptest! {
        #[test]
        fn simplified_wrench_is_linear(
            a in prop::array::uniform4(-5.0f64..5.0),
            b in prop::array::uniform4(-5.0f64..5.0),
            s in -3.0f64..3.0,
        ) {
            let p = VehicleParams::default();
            let ua = EffectiveCommand::from_vector(nalgebra::Vector4::from(a));
            let ub = EffectiveCommand::from_vector(nalgebra::Vector4::from(b));
            let combo = EffectiveCommand::from_vector(ua.as_vector() + s * ub.as_vector());
            let wa = simplified_wrench(&ua, &p);
            let wb = simplified_wrench(&ub, &p);
            let wc = simplified_wrench(&combo, &p);
            prop_assert!((wc.force - (wa.force + s * wb.force)).norm() <= 1e-12);
            prop_assert!((wc.moment - (wa.moment + s * wb.moment)).norm() <= 1e-12);
        }

        #[test]
        fn kernel_commands_never_moment(lambda in 0.0f64..20.0) {
            let p = VehicleParams::default();
            let w = simplified_wrench(&EffectiveCommand::kernel(lambda), &p);
            prop_assert!(w.moment.norm() <= 1e-12);
        }
    }
}
