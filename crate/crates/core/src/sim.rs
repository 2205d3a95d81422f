//! Fixed-step closed-loop simulation harness: RK4 integration, scenario
//! configuration, CSV logging, SVG plot emission, and the sampling
//! region-of-attraction estimator.
//!
//! Scenario files are TOML; see the shipped `scenarios/` directory for the
//! schema. Logs are RFC-4180 CSV with a fixed header and one record per
//! integration step, so identical scenarios produce byte-identical files.

use crate::equilibria::StateLayout;
use crate::flight_ctl::{flight_step, FlightCtlState, FlightGains};
use crate::hover_ctl::{GompertzShape, HoverCtl, HoverCtlState, HoverGains, RefForceMode};
use crate::hybrid::{
    HybridCtl, HybridTime, JumpRecord, LqrHoverCtl, LqrIntHoverCtl, Mode, SupervisorConfig,
};
use crate::lqr::LqrDesign;
use crate::mathkin::{euler_angles, UnitQuat, Vec3};
use crate::vehicle::{
    saturate_command, Command, InertialState, ModelKind, PhysicalCommand, StateDeriv,
    VehicleParams,
};
use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::io::Write;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("state became non-finite at t = {t:.4} s ({what})")]
    NonFinite { t: f64, what: String },
    #[error("controller failed at t = {t:.4} s: {source}")]
    Controller {
        t: f64,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("invalid scenario: {0}")]
    BadScenario(String),
    #[error("failed to read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Care(#[from] crate::lqr::CareError),
    #[error(transparent)]
    Hybrid(#[from] crate::hybrid::HybridError),
}

/// One classical RK4 step with zero-order-held command; the quaternion is
/// renormalized at every stage evaluation.
pub fn rk4_step_raw(
    x: &InertialState,
    u: &Command,
    wind: Vec3,
    dt: f64,
    params: &VehicleParams,
    model: ModelKind,
) -> InertialState {
    let f = |x: &InertialState| crate::vehicle::state_deriv(x, u, wind, params, model);
    let k1 = f(x);
    let k2 = f(&add_scaled(x, &k1, 0.5 * dt));
    let k3 = f(&add_scaled(x, &k2, 0.5 * dt));
    let k4 = f(&add_scaled(x, &k3, dt));
    let mut out = *x;
    let w = dt / 6.0;
    out.p += w * (k1.p_dot + 2.0 * k2.p_dot + 2.0 * k3.p_dot + k4.p_dot);
    out.v += w * (k1.v_dot + 2.0 * k2.v_dot + 2.0 * k3.v_dot + k4.v_dot);
    out.omega_b += w * (k1.omega_dot + 2.0 * k2.omega_dot + 2.0 * k3.omega_dot + k4.omega_dot);
    let eta = x.q.eta + w * (k1.q_dot.eta + 2.0 * k2.q_dot.eta + 2.0 * k3.q_dot.eta + k4.q_dot.eta);
    let eps = x.q.eps + w * (k1.q_dot.eps + 2.0 * k2.q_dot.eps + 2.0 * k3.q_dot.eps + k4.q_dot.eps);
    out.q = UnitQuat::new(eta, eps);
    out
}

fn add_scaled(x: &InertialState, d: &StateDeriv, h: f64) -> InertialState {
    InertialState {
        p: x.p + h * d.p_dot,
        v: x.v + h * d.v_dot,
        q: UnitQuat::new(x.q.eta + h * d.q_dot.eta, x.q.eps + h * d.q_dot.eps),
        omega_b: x.omega_b + h * d.omega_dot,
    }
}

/// Which control law drives a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    NlHover,
    Lqr,
    LqrInt,
    Flight,
    Hybrid,
}

impl ControllerKind {
    fn parse(s: &str) -> Result<Self, SimError> {
        Ok(match s {
            "nl_hover" => ControllerKind::NlHover,
            "lqr" => ControllerKind::Lqr,
            "lqr_int" => ControllerKind::LqrInt,
            "flight" => ControllerKind::Flight,
            "hybrid" => ControllerKind::Hybrid,
            other => {
                return Err(SimError::BadScenario(format!(
                    "unknown controller '{other}' (expected nl_hover|lqr|lqr_int|flight|hybrid)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::NlHover => "nl_hover",
            ControllerKind::Lqr => "lqr",
            ControllerKind::LqrInt => "lqr_int",
            ControllerKind::Flight => "flight",
            ControllerKind::Hybrid => "hybrid",
        }
    }
}

/// A closed-loop experiment: initial state, target and wind schedules,
/// controller selection and gains.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub controller: ControllerKind,
    pub model: ModelKind,
    pub dt: f64,
    pub t_end: f64,
    pub initial: InertialState,
    /// Time-sorted `(t_switch, target)` pairs; the last entry at or before
    /// the current time is active.
    pub targets: Vec<(f64, Vec3)>,
    /// Time-sorted `(t, wind)` pairs, zero-order held.
    pub winds: Vec<(f64, Vec3)>,
    pub hover_gains: HoverGains,
    pub flight_gains: FlightGains,
    pub flight_speed: f64,
    pub supervisor: SupervisorConfig,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let raw: ScenarioFile = toml::from_str(text)?;
        raw.build()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0) {
            return Err(SimError::BadScenario("dt must be positive".into()));
        }
        if !(self.t_end > 0.0) {
            return Err(SimError::BadScenario("t_end must be positive".into()));
        }
        if self.targets.is_empty() {
            return Err(SimError::BadScenario("at least one target required".into()));
        }
        for pairs in [&self.targets, &self.winds] {
            if pairs.windows(2).any(|w| w[0].0 > w[1].0) {
                return Err(SimError::BadScenario("schedules must be time-sorted".into()));
            }
        }
        self.supervisor.validate().map_err(SimError::BadScenario)?;
        Ok(())
    }

    pub fn target_at(&self, t: f64) -> Vec3 {
        schedule_at(&self.targets, t).unwrap_or_else(Vec3::zeros)
    }

    pub fn wind_at(&self, t: f64) -> Vec3 {
        schedule_at(&self.winds, t).unwrap_or_else(Vec3::zeros)
    }
}

fn schedule_at(pairs: &[(f64, Vec3)], t: f64) -> Option<Vec3> {
    pairs
        .iter()
        .take_while(|(ts, _)| *ts <= t)
        .last()
        .map(|(_, v)| *v)
}

// ---- TOML schema ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: Option<String>,
    controller: String,
    #[serde(default)]
    model: Option<String>,
    dt: Option<f64>,
    t_end: f64,
    initial: Option<InitialFile>,
    #[serde(default, rename = "target")]
    targets: Vec<TargetFile>,
    #[serde(default, rename = "wind")]
    winds: Vec<WindFile>,
    hover_gains: Option<HoverGainsFile>,
    flight: Option<FlightFile>,
    supervisor: Option<SupervisorFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialFile {
    p: Option<[f64; 3]>,
    v: Option<[f64; 3]>,
    q: Option<[f64; 4]>,
    omega: Option<[f64; 3]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetFile {
    t: f64,
    p: [f64; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WindFile {
    t: f64,
    v: [f64; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HoverGainsFile {
    k_pp: Option<f64>,
    k_pd: Option<f64>,
    k_delta: Option<f64>,
    k_q: Option<f64>,
    k_r: Option<f64>,
    k_omega: Option<f64>,
    m_i: Option<f64>,
    e_p_max: Option<f64>,
    e_v_max: Option<f64>,
    f_min: Option<f64>,
    mode: Option<String>,
    sigma_b: Option<f64>,
    sigma_c: Option<f64>,
    use_corrected_nu: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FlightFile {
    v_c: Option<f64>,
    k_c: Option<f64>,
    k_d: Option<f64>,
    k_p: Option<f64>,
    k_i: Option<f64>,
    k_dv: Option<f64>,
    k_u: Option<f64>,
    sigma_floor: Option<f64>,
    v_min: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SupervisorFile {
    v_enter: Option<f64>,
    v_exit: Option<f64>,
    d_flight: Option<f64>,
    v_min_flight: Option<f64>,
}

impl ScenarioFile {
    fn build(self) -> Result<Scenario, SimError> {
        macro_rules! merge {
            ($dst:expr, $src:expr; $($field:ident),* $(,)?) => {
                if let Some(src) = $src.as_ref() {
                    $(if let Some(v) = src.$field { $dst.$field = v; })*
                }
            };
        }
        let mut hover_gains = HoverGains::default();
        merge!(hover_gains, self.hover_gains;
            k_pp, k_pd, k_delta, k_q, k_r, k_omega, m_i, e_p_max, e_v_max, f_min, use_corrected_nu);
        if let Some(hg) = self.hover_gains.as_ref() {
            if let Some(mode) = hg.mode.as_deref() {
                hover_gains.mode = match mode {
                    "linear" => RefForceMode::Linear,
                    "qto" => RefForceMode::Qto,
                    "gompertz_sat" => RefForceMode::GompertzSat,
                    "error_governor" => RefForceMode::ErrorGovernor,
                    other => {
                        return Err(SimError::BadScenario(format!(
                            "unknown hover mode '{other}'"
                        )))
                    }
                };
            }
            let mut sigma = GompertzShape::default();
            if let Some(b) = hg.sigma_b {
                sigma.b = b;
            }
            if let Some(c) = hg.sigma_c {
                sigma.c = c;
            }
            hover_gains.sigma = sigma;
        }

        let mut flight_gains = FlightGains::default();
        merge!(flight_gains, self.flight; k_c, k_d, k_p, k_i, k_dv, k_u, sigma_floor, v_min);
        let flight_speed = self.flight.as_ref().and_then(|f| f.v_c).unwrap_or(20.0);

        let mut supervisor = SupervisorConfig::default();
        merge!(supervisor, self.supervisor; v_enter, v_exit, d_flight, v_min_flight);

        let initial = {
            let i = self.initial.as_ref();
            let arr3 = |v: Option<[f64; 3]>, d: Vec3| v.map(Vec3::from).unwrap_or(d);
            InertialState {
                p: arr3(i.and_then(|i| i.p), Vec3::zeros()),
                v: arr3(i.and_then(|i| i.v), Vec3::zeros()),
                q: i
                    .and_then(|i| i.q)
                    .map(UnitQuat::from_array)
                    .unwrap_or_else(crate::equilibria::hover_attitude),
                omega_b: arr3(i.and_then(|i| i.omega), Vec3::zeros()),
            }
        };

        let model = match self.model.as_deref() {
            None | Some("augmented") => ModelKind::Augmented,
            Some("simplified") => ModelKind::Simplified,
            Some(other) => {
                return Err(SimError::BadScenario(format!("unknown model '{other}'")))
            }
        };

        let scenario = Scenario {
            name: self.name.unwrap_or_else(|| "unnamed".into()),
            controller: ControllerKind::parse(&self.controller)?,
            model,
            dt: self.dt.unwrap_or(1e-3),
            t_end: self.t_end,
            initial,
            targets: self.targets.into_iter().map(|t| (t.t, Vec3::from(t.p))).collect(),
            winds: self.winds.into_iter().map(|w| (w.t, Vec3::from(w.v))).collect(),
            hover_gains,
            flight_gains,
            flight_speed,
            supervisor,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

// ---- logging ----

/// One record per integration step.
#[derive(Debug, Clone)]
pub struct LogRecord {
    pub t: f64,
    pub j: u64,
    pub mode: &'static str,
    pub p: Vec3,
    pub v: Vec3,
    pub q: [f64; 4],
    pub omega: Vec3,
    /// Applied effective command `[T1, T2, d1 T1, d2 T2]`.
    pub u: [f64; 4],
    /// Applied actuator values `[omega1, omega2, delta1, delta2]`.
    pub physical: [f64; 4],
    pub v_lyap: f64,
    pub kappa: f64,
    /// True when the requested command hit a position or rate clamp.
    pub saturated: bool,
}

/// Output of a scenario run.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub records: Vec<LogRecord>,
    pub jumps: Vec<JumpRecord>,
}

impl SimOutput {
    pub fn final_state(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    /// Serializes the step log as CSV (RFC-4180, '.' decimal separator).
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "t", "j", "mode", "px", "py", "pz", "vx", "vy", "vz", "q0", "q1", "q2", "q3", "wx",
            "wy", "wz", "u1", "u2", "u3", "u4", "omega1", "omega2", "delta1", "delta2", "V",
            "kappa", "sat",
        ])
        .map_err(io_err)?;
        for r in &self.records {
            let fields: Vec<String> = [
                r.t,
                r.j as f64,
            ]
            .into_iter()
            .map(fmt_num)
            .chain(std::iter::once(r.mode.to_string()))
            .chain(
                [
                    r.p.x, r.p.y, r.p.z, r.v.x, r.v.y, r.v.z, r.q[0], r.q[1], r.q[2], r.q[3],
                    r.omega.x, r.omega.y, r.omega.z, r.u[0], r.u[1], r.u[2], r.u[3],
                    r.physical[0], r.physical[1], r.physical[2], r.physical[3], r.v_lyap, r.kappa,
                ]
                .into_iter()
                .map(fmt_num),
            )
            .chain(std::iter::once(if r.saturated { "1" } else { "0" }.to_string()))
            .collect();
            w.write_record(&fields).map_err(io_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Serializes the jump log as CSV.
    pub fn write_jump_csv<W: std::io::Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "j", "from_mode", "to_mode", "V"]).map_err(io_err)?;
        for r in &self.jumps {
            w.write_record(&[
                fmt_num(r.t),
                r.j.to_string(),
                r.from.name().to_string(),
                r.to.name().to_string(),
                fmt_num(r.v),
            ])
            .map_err(io_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt_num(x: f64) -> String {
    // shortest round-trip decimal keeps logs byte-stable across runs
    format!("{x}")
}

fn io_err(e: csv::Error) -> SimError {
    SimError::Io(std::io::Error::other(e))
}

// ---- scenario runner ----

enum CtlRuntime {
    NlHover {
        ctl: HoverCtl,
        state: HoverCtlState,
        q_ref: UnitQuat,
    },
    Lqr(LqrHoverCtl),
    LqrInt(LqrIntHoverCtl),
    Flight {
        gains: FlightGains,
        v_c: f64,
        state: FlightCtlState,
    },
    Hybrid(Box<HybridCtl>),
}

/// Runs a scenario to completion. Deterministic: identical scenarios and
/// parameters produce identical logs.
pub fn run_scenario(scenario: &Scenario, params: &VehicleParams) -> Result<SimOutput, SimError> {
    scenario.validate()?;
    let limits = crate::vehicle::ActuatorLimits::default();
    // the hover-LQR Lyapunov function is logged for every controller
    let monitor = LqrHoverCtl::new(params)?;

    let mut ctl = match scenario.controller {
        ControllerKind::NlHover => CtlRuntime::NlHover {
            ctl: HoverCtl::new(scenario.hover_gains, params),
            state: HoverCtlState::align_with(&scenario.initial, params),
            q_ref: crate::equilibria::hover_attitude(),
        },
        ControllerKind::Lqr => CtlRuntime::Lqr(LqrHoverCtl::new(params)?),
        ControllerKind::LqrInt => CtlRuntime::LqrInt(LqrIntHoverCtl::new(params)?),
        ControllerKind::Flight => CtlRuntime::Flight {
            gains: scenario.flight_gains,
            v_c: scenario.flight_speed,
            state: FlightCtlState::new(scenario.initial.body_airspeed(Vec3::zeros()).x),
        },
        ControllerKind::Hybrid => CtlRuntime::Hybrid(Box::new(HybridCtl::new(
            params,
            scenario.supervisor,
            scenario.hover_gains,
            scenario.flight_gains,
            scenario.flight_speed,
            &scenario.initial,
        )?)),
    };

    let dt = scenario.dt;
    let steps = (scenario.t_end / dt).round() as usize;
    let mut x = scenario.initial;
    let mut prev_phys = PhysicalCommand::idle(&limits);
    let mut time = HybridTime { t: 0.0, j: 0 };
    let mut records = Vec::with_capacity(steps);
    let mut jumps = Vec::new();

    for k in 0..steps {
        let t = k as f64 * dt;
        time.t = t;
        let target = scenario.target_at(t);
        let wind = scenario.wind_at(t);

        let u_raw = match &mut ctl {
            CtlRuntime::NlHover { ctl, state, q_ref } => {
                let (u, next) = ctl
                    .step(&x, state, target, *q_ref, dt)
                    .map_err(|e| controller_err(t, e))?;
                *state = next;
                u
            }
            CtlRuntime::Lqr(l) => l.command(&x, target),
            CtlRuntime::LqrInt(l) => l.command(&x, target, dt),
            CtlRuntime::Flight { gains, v_c, state } => {
                let (u, next) = flight_step(&x, state, target, *v_c, dt, gains, params, &limits)
                    .map_err(|e| controller_err(t, e))?;
                *state = next;
                u
            }
            CtlRuntime::Hybrid(h) => h
                .command(&x, target, dt, params, &limits)
                .map_err(|e| controller_err(t, e))?,
        };

        let (phys_raw, motor_clamped) =
            PhysicalCommand::from_effective_flagged(&u_raw, &prev_phys, params, &limits);
        let phys = saturate_command(&phys_raw, &prev_phys, dt, &limits);
        let saturated = motor_clamped
            || [
                phys.omega1 - phys_raw.omega1,
                phys.omega2 - phys_raw.omega2,
                phys.delta1 - phys_raw.delta1,
                phys.delta2 - phys_raw.delta2,
            ]
            .iter()
            .any(|d| d.abs() > 1e-9);
        let applied = phys.to_effective(params);

        let v_lyap = monitor.lyapunov(&x, target);
        let (mode, kappa) = match &ctl {
            CtlRuntime::Hybrid(h) => (h.mode.name(), h.last_kappa()),
            CtlRuntime::Flight { state, .. } => (Mode::Flight.name(), state.last_kappa),
            CtlRuntime::NlHover { .. } => (Mode::NlHover.name(), 1.0),
            CtlRuntime::Lqr(_) => (Mode::LinHover.name(), 1.0),
            CtlRuntime::LqrInt(_) => ("lin_hover_int", 1.0),
        };
        records.push(LogRecord {
            t,
            j: time.j,
            mode,
            p: x.p,
            v: x.v,
            q: x.q.to_array(),
            omega: x.omega_b,
            u: [applied.t1, applied.t2, applied.d1t1, applied.d2t2],
            physical: [phys.omega1, phys.omega2, phys.delta1, phys.delta2],
            v_lyap,
            kappa,
            saturated,
        });

        x = rk4_step_raw(
            &x,
            &Command::Virtual(phys.to_virtual(params)),
            wind,
            dt,
            params,
            scenario.model,
        );
        if !x.is_finite() {
            return Err(SimError::NonFinite {
                t: t + dt,
                what: "plant state".into(),
            });
        }

        // jump set is evaluated once per step, after the flow
        if let CtlRuntime::Hybrid(h) = &mut ctl {
            time.t = t + dt;
            let target_next = scenario.target_at(t + dt);
            if let Some(rec) = h.check_jump(&mut time, &x, target_next, &phys, params) {
                jumps.push(rec);
            }
        }

        prev_phys = phys;
    }

    Ok(SimOutput { records, jumps })
}

fn controller_err<E: std::error::Error + Send + Sync + 'static>(t: f64, e: E) -> SimError {
    SimError::Controller {
        t,
        source: Box::new(e),
    }
}

// ---- region of attraction ----

/// Sampling plan for the basin estimate: per-component deviation scales and
/// a ladder of radius multipliers.
#[derive(Debug, Clone)]
pub struct RoaSampling {
    pub n_samples: usize,
    pub seed: u64,
    /// Base deviation scales for position, velocity, attitude (vector part)
    /// and body rate.
    pub scale_p: f64,
    pub scale_v: f64,
    pub scale_eps: f64,
    pub scale_omega: f64,
    /// Radius multipliers swept per sample (cycled).
    pub radii: Vec<f64>,
    pub t_end: f64,
    pub dt: f64,
}

impl Default for RoaSampling {
    fn default() -> Self {
        RoaSampling {
            n_samples: 64,
            seed: 1,
            scale_p: 4.0,
            scale_v: 3.0,
            scale_eps: 0.5,
            scale_omega: 2.0,
            radii: vec![0.2, 0.4, 0.6, 0.8, 1.0, 1.3],
            t_end: 15.0,
            dt: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoaSample {
    pub deviation: DVector<f64>,
    pub v0: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct RoaEstimate {
    pub samples: Vec<RoaSample>,
    /// Largest Lyapunov level below which every sample converged.
    pub c_star: f64,
}

/// Samples initial deviations around hover, runs the linear hover law on the
/// nonlinear plant, and classifies convergence by post-transient monotone
/// Lyapunov decrease plus terminal position/rate tolerance.
pub fn estimate_roa(
    design: &LqrDesign,
    params: &VehicleParams,
    sampling: &RoaSampling,
) -> RoaEstimate {
    let eq = crate::equilibria::hover_equilibrium(params, Vec3::zeros());
    let ctl = LqrHoverCtl::with_design(design.clone(), params);
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let limits = crate::vehicle::ActuatorLimits::default();
    let scales = [
        sampling.scale_p,
        sampling.scale_p,
        sampling.scale_p,
        sampling.scale_v,
        sampling.scale_v,
        sampling.scale_v,
        sampling.scale_eps,
        sampling.scale_eps,
        sampling.scale_eps,
        sampling.scale_omega,
        sampling.scale_omega,
        sampling.scale_omega,
    ];

    let mut samples = Vec::with_capacity(sampling.n_samples);
    for idx in 0..sampling.n_samples {
        // uniform direction on the scaled sphere
        let mut dir = DVector::from_fn(12, |_, _| {
            let u: f64 = rng.random_range(-1.0..1.0);
            u
        });
        // Box-Muller free normalization: resample until non-degenerate
        while dir.norm() < 1e-6 {
            dir = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        }
        dir /= dir.norm();
        let radius = sampling.radii[idx % sampling.radii.len()];
        let deviation = DVector::from_fn(12, |i, _| dir[i] * scales[i] * radius);

        // clamp attitude deviation inside the unit ball of the vector part
        let mut eps = eq.x_eq.q.eps + Vec3::new(deviation[6], deviation[7], deviation[8]);
        if eps.norm() >= 0.999 {
            eps *= 0.999 / eps.norm();
        }
        let eta = (1.0 - eps.norm_squared()).max(0.0).sqrt() * eq.x_eq.q.eta.signum();
        let x0 = InertialState {
            p: eq.x_eq.p + Vec3::new(deviation[0], deviation[1], deviation[2]),
            v: Vec3::new(deviation[3], deviation[4], deviation[5]),
            q: UnitQuat::new(eta, eps),
            omega_b: Vec3::new(deviation[9], deviation[10], deviation[11]),
        };
        let v0 = ctl.lyapunov(&x0, Vec3::zeros());
        let converged = simulate_converges(&ctl, x0, params, &limits, sampling);
        samples.push(RoaSample {
            deviation,
            v0,
            converged,
        });
    }

    let barrier = samples
        .iter()
        .filter(|s| !s.converged)
        .map(|s| s.v0)
        .fold(f64::INFINITY, f64::min);
    let c_star = samples
        .iter()
        .filter(|s| s.converged && s.v0 < barrier)
        .map(|s| s.v0)
        .fold(0.0, f64::max);
    RoaEstimate { samples, c_star }
}

fn simulate_converges(
    ctl: &LqrHoverCtl,
    mut x: InertialState,
    params: &VehicleParams,
    limits: &crate::vehicle::ActuatorLimits,
    sampling: &RoaSampling,
) -> bool {
    let dt = sampling.dt;
    let steps = (sampling.t_end / dt).round() as usize;
    let transient = (1.0 / dt).round() as usize;
    let mut prev_phys = PhysicalCommand::idle(limits);
    let mut v_prev = f64::INFINITY;
    for k in 0..steps {
        let u = ctl.command(&x, Vec3::zeros());
        let phys = saturate_command(
            &PhysicalCommand::from_effective(&u, &prev_phys, params, limits),
            &prev_phys,
            dt,
            limits,
        );
        x = rk4_step_raw(
            &x,
            &Command::Virtual(phys.to_virtual(params)),
            Vec3::zeros(),
            dt,
            params,
            ModelKind::Simplified,
        );
        prev_phys = phys;
        if !x.is_finite() || x.p.norm() > 1e4 {
            return false;
        }
        if k >= transient {
            let v = ctl.lyapunov(&x, Vec3::zeros());
            if v > v_prev * (1.0 + 1e-9) + 1e-12 {
                return false; // Lyapunov decrease must be monotone
            }
            v_prev = v;
        }
    }
    x.p.norm() < 0.1 && x.omega_b.norm() < 0.05
}

// ---- plots ----

/// Writes the standard figure set as standalone SVG line charts plus the raw
/// CSVs into `out_dir`. Thresholds, when given, are drawn on the Lyapunov
/// chart.
pub fn emit_plots(
    output: &SimOutput,
    out_dir: &Path,
    thresholds: Option<(f64, f64)>,
) -> Result<(), SimError> {
    if output.records.is_empty() {
        return Err(SimError::BadScenario("empty log".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let t: Vec<f64> = output.records.iter().map(|r| r.t).collect();

    let series = |f: &dyn Fn(&LogRecord) -> f64| -> Vec<f64> {
        output.records.iter().map(f).collect()
    };

    write_chart(
        &out_dir.join("position.svg"),
        "position [m]",
        &t,
        &[
            ("px", series(&|r| r.p.x)),
            ("py", series(&|r| r.p.y)),
            ("pz", series(&|r| r.p.z)),
        ],
        &[],
    )?;
    write_chart(
        &out_dir.join("attitude.svg"),
        "attitude angles [deg]",
        &t,
        &[
            ("roll", series(&|r| angle_of(r).0)),
            ("pitch", series(&|r| angle_of(r).1)),
            ("yaw", series(&|r| angle_of(r).2)),
            ("tilt", series(&|r| angle_of(r).3)),
        ],
        &[],
    )?;
    write_chart(
        &out_dir.join("commands_motors.svg"),
        "motor speed [rad/s]",
        &t,
        &[
            ("omega1", series(&|r| r.physical[0])),
            ("omega2", series(&|r| r.physical[1])),
        ],
        &[],
    )?;
    write_chart(
        &out_dir.join("commands_elevons.svg"),
        "elevon deflection [rad]",
        &t,
        &[
            ("delta1", series(&|r| r.physical[2])),
            ("delta2", series(&|r| r.physical[3])),
        ],
        &[],
    )?;
    let mut marks = Vec::new();
    if let Some((lo, hi)) = thresholds {
        marks.push(("enter", lo));
        marks.push(("exit", hi));
    }
    write_chart(
        &out_dir.join("lyapunov.svg"),
        "V(dx)",
        &t,
        &[("V", series(&|r| r.v_lyap))],
        &marks,
    )?;
    write_chart(
        &out_dir.join("jumps.svg"),
        "jump count",
        &t,
        &[("j", series(&|r| r.j as f64))],
        &[],
    )?;
    Ok(())
}

fn angle_of(r: &LogRecord) -> (f64, f64, f64, f64) {
    let q = UnitQuat::from_array(r.q);
    let (roll, pitch, yaw) = euler_angles(q);
    let tilt = q.tilt_from_vertical(Vec3::z());
    (
        roll.to_degrees(),
        pitch.to_degrees(),
        yaw.to_degrees(),
        tilt.to_degrees(),
    )
}

/// Minimal line-chart schema: fixed 900x500 canvas, one polyline per series,
/// axis bounds covering every sample, min/max labels, named horizontal
/// marker lines.
fn write_chart(
    path: &Path,
    title: &str,
    t: &[f64],
    series: &[(&str, Vec<f64>)],
    marks: &[(&str, f64)],
) -> Result<(), SimError> {
    const W: f64 = 900.0;
    const H: f64 = 500.0;
    const ML: f64 = 70.0;
    const MR: f64 = 20.0;
    const MT: f64 = 40.0;
    const MB: f64 = 40.0;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

    let t_min = t.first().copied().unwrap_or(0.0);
    let t_max = t.last().copied().unwrap_or(1.0).max(t_min + 1e-9);
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (_, ys) in series {
        for &y in ys {
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    for (_, y) in marks {
        y_min = y_min.min(*y);
        y_max = y_max.max(*y);
    }
    if !y_min.is_finite() || !y_max.is_finite() {
        return Err(SimError::BadScenario("non-finite plot data".into()));
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = 0.05 * (y_max - y_min);
    let (y_min, y_max) = (y_min - pad, y_max + pad);

    let x_of = |tv: f64| ML + (tv - t_min) / (t_max - t_min) * (W - ML - MR);
    let y_of = |yv: f64| H - MB - (yv - y_min) / (y_max - y_min) * (H - MT - MB);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        ML, title
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB
    ));
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB
    ));
    for (label, value, x, y, anchor) in [
        (format!("{t_min:.1}"), t_min, x_of(t_min), H - MB + 16.0, "middle"),
        (format!("{t_max:.1}"), t_max, x_of(t_max), H - MB + 16.0, "middle"),
        (format!("{y_min:.3}"), y_min, ML - 6.0, y_of(y_min), "end"),
        (format!("{y_max:.3}"), y_max, ML - 6.0, y_of(y_max), "end"),
    ] {
        let _ = value;
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{y:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"{anchor}\">{label}</text>\n"
        ));
    }
    for (name, y) in marks {
        let yy = y_of(*y);
        svg.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{yy:.1}\" x2=\"{}\" y2=\"{yy:.1}\" stroke=\"gray\" stroke-dasharray=\"6 4\"/>\n",
            W - MR
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"gray\">{} = {}</text>\n",
            W - MR - 90.0,
            yy - 4.0,
            name,
            y
        ));
    }
    // decimate long logs for readable files
    let stride = (t.len() / 4000).max(1);
    for (si, (name, ys)) in series.iter().enumerate() {
        let color = colors[si % colors.len()];
        let mut points = String::new();
        for (k, (&tv, &yv)) in t.iter().zip(ys.iter()).enumerate() {
            if k % stride == 0 || k + 1 == t.len() {
                points.push_str(&format!("{:.2},{:.2} ", x_of(tv), y_of(yv)));
            }
        }
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.2\" points=\"{points}\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            W - MR - 160.0,
            MT + 16.0 * si as f64
        ));
    }
    svg.push_str("</svg>\n");

    let mut f = std::fs::File::create(path)?;
    f.write_all(svg.as_bytes())?;
    Ok(())
}

impl LqrHoverCtl {
    /// Builds the linear hover controller around an externally computed
    /// design (used by the basin estimator).
    pub fn with_design(design: LqrDesign, params: &VehicleParams) -> Self {
        let eq = crate::equilibria::hover_equilibrium(params, Vec3::zeros());
        LqrHoverCtl::from_parts(design, eq.u_eq, eq.x_eq.q)
    }
}

/// Per-component deviation between a state and the hover point, in the
/// 12-state layout (re-exported convenience for the CLI and tests).
pub fn hover_deviation(x: &InertialState, target: Vec3, hover_q: UnitQuat) -> DVector<f64> {
    let x_eq = InertialState::at_rest(target, hover_q);
    StateLayout::Hover12.deviation(x, &x_eq)
}
