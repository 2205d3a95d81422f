//! Hybrid switching layer: generalized (t, j) time, the mode set, and the
//! Lyapunov-hysteresis supervisor that hands the vehicle between the
//! nonlinear hover law, the linear hover law, and the flight law.

use crate::equilibria::{hover_equilibrium, linearize_analytic_hover, StateLayout};
use crate::flight_ctl::{flight_step, FlightCtlError, FlightCtlState, FlightGains};
use crate::hover_ctl::{HoverCtl, HoverCtlError, HoverCtlState, HoverGains};
use crate::lqr::{augment_integrator, lyapunov_value, solve_care, CareError, LqrDesign, LqrWeights};
use crate::mathkin::{UnitQuat, Vec3};
use crate::vehicle::{
    ActuatorLimits, EffectiveCommand, InertialState, PhysicalCommand, VehicleParams,
};
use nalgebra::DVector;

/// Generalized hybrid time: continuous `t` and jump counter `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridTime {
    pub t: f64,
    pub j: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    NlHover,
    LinHover,
    Flight,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::NlHover => "nl_hover",
            Mode::LinHover => "lin_hover",
            Mode::Flight => "flight",
        }
    }
}

/// Switching thresholds. The Lyapunov pair forms the hysteresis band: the
/// linear law engages below `v_enter` and is abandoned only above `v_exit`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisorConfig {
    pub v_enter: f64,
    pub v_exit: f64,
    /// Target distance beyond which forward flight is requested, m.
    pub d_flight: f64,
    /// Minimum speed for a defined flight direction at the hand-off, m/s.
    pub v_min_flight: f64,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        SupervisorConfig {
            v_enter: 250.0,
            v_exit: 400.0,
            d_flight: 50.0,
            v_min_flight: 1.0,
        }
    }
}

impl SupervisorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.v_enter < self.v_exit) {
            return Err(format!(
                "hysteresis band requires v_enter < v_exit, got {} >= {}",
                self.v_enter, self.v_exit
            ));
        }
        if !(self.d_flight > 0.0) {
            return Err("d_flight must be positive".into());
        }
        Ok(())
    }
}

/// One evaluation of the jump map; at most one transition per call.
pub fn supervisor_jump(
    mode: Mode,
    v: f64,
    dist_to_target: f64,
    speed: f64,
    cfg: &SupervisorConfig,
) -> Mode {
    match mode {
        Mode::Flight => {
            if dist_to_target <= cfg.d_flight {
                Mode::NlHover
            } else {
                Mode::Flight
            }
        }
        Mode::NlHover => {
            if dist_to_target > cfg.d_flight && speed > cfg.v_min_flight {
                Mode::Flight
            } else if v < cfg.v_enter {
                Mode::LinHover
            } else {
                Mode::NlHover
            }
        }
        Mode::LinHover => {
            if dist_to_target > cfg.d_flight && speed > cfg.v_min_flight {
                Mode::Flight
            } else if v > cfg.v_exit {
                Mode::NlHover
            } else {
                Mode::LinHover
            }
        }
    }
}

/// Jump log entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpRecord {
    pub t: f64,
    pub j: u64,
    pub from: Mode,
    pub to: Mode,
    pub v: f64,
}

/// Linear hover controller `u = u_eq - K dx` around the hover point at the
/// current target, with the Riccati solution defining the supervisor's
/// Lyapunov function.
#[derive(Debug, Clone)]
pub struct LqrHoverCtl {
    pub design: LqrDesign,
    u_eq: EffectiveCommand,
    hover_q: UnitQuat,
}

impl LqrHoverCtl {
    pub fn new(params: &VehicleParams) -> Result<Self, CareError> {
        let lm = linearize_analytic_hover(params);
        let design = solve_care(&lm.a, &lm.b, &LqrWeights::identity(12, 4))?;
        let eq = hover_equilibrium(params, Vec3::zeros());
        Ok(LqrHoverCtl {
            design,
            u_eq: eq.u_eq,
            hover_q: eq.x_eq.q,
        })
    }

    pub(crate) fn from_parts(design: LqrDesign, u_eq: EffectiveCommand, hover_q: UnitQuat) -> Self {
        LqrHoverCtl {
            design,
            u_eq,
            hover_q,
        }
    }

    /// Deviation of `x` from the hover point parked at `target`.
    pub fn deviation(&self, x: &InertialState, target: Vec3) -> DVector<f64> {
        let x_eq = InertialState::at_rest(target, self.hover_q);
        StateLayout::Hover12.deviation(x, &x_eq)
    }

    pub fn command(&self, x: &InertialState, target: Vec3) -> EffectiveCommand {
        let dx = self.deviation(x, target);
        let du = &self.design.k * dx;
        EffectiveCommand::from_vector(self.u_eq.as_vector() - nalgebra::Vector4::from_iterator(du.iter().copied()))
    }

    /// Supervisor Lyapunov value `V = dx' S dx` around the target.
    pub fn lyapunov(&self, x: &InertialState, target: Vec3) -> f64 {
        lyapunov_value(&self.design.s, &self.deviation(x, target))
    }
}

/// Linear hover controller with position integrators for steady disturbance
/// rejection.
#[derive(Debug, Clone)]
pub struct LqrIntHoverCtl {
    pub design: LqrDesign,
    u_eq: EffectiveCommand,
    hover_q: UnitQuat,
    /// Integrator state `int (p_ref - p) dt`.
    pub xi: Vec3,
}

impl LqrIntHoverCtl {
    pub fn new(params: &VehicleParams) -> Result<Self, CareError> {
        let lm = linearize_analytic_hover(params);
        let (a_aug, b_aug) = augment_integrator(&lm.a, &lm.b, &[0, 1, 2]);
        let design = solve_care(&a_aug, &b_aug, &LqrWeights::identity(15, 4))?;
        let eq = hover_equilibrium(params, Vec3::zeros());
        Ok(LqrIntHoverCtl {
            design,
            u_eq: eq.u_eq,
            hover_q: eq.x_eq.q,
            xi: Vec3::zeros(),
        })
    }

    pub fn command(&mut self, x: &InertialState, target: Vec3, dt: f64) -> EffectiveCommand {
        self.xi += (target - x.p) * dt;
        let x_eq = InertialState::at_rest(target, self.hover_q);
        let dx = StateLayout::Hover12.deviation(x, &x_eq);
        let mut z = DVector::zeros(15);
        z.rows_mut(0, 12).copy_from(&dx);
        // the augmented state integrates -dp, i.e. xi itself
        z[12] = self.xi.x;
        z[13] = self.xi.y;
        z[14] = self.xi.z;
        let du = &self.design.k * z;
        EffectiveCommand::from_vector(
            self.u_eq.as_vector() - nalgebra::Vector4::from_iterator(du.iter().copied()),
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HybridError {
    #[error(transparent)]
    Hover(#[from] HoverCtlError),
    #[error(transparent)]
    Flight(#[from] FlightCtlError),
    #[error(transparent)]
    Care(#[from] CareError),
    #[error("invalid supervisor config: {0}")]
    Config(String),
}

/// The full mode-switching controller.
pub struct HybridCtl {
    pub cfg: SupervisorConfig,
    pub nl: HoverCtl,
    pub lin: LqrHoverCtl,
    pub flight_gains: FlightGains,
    pub flight_speed: f64,
    pub mode: Mode,
    nl_state: HoverCtlState,
    flight_state: FlightCtlState,
    q_ref: UnitQuat,
}

impl HybridCtl {
    pub fn new(
        params: &VehicleParams,
        cfg: SupervisorConfig,
        hover_gains: HoverGains,
        flight_gains: FlightGains,
        flight_speed: f64,
        initial: &InertialState,
    ) -> Result<Self, HybridError> {
        cfg.validate().map_err(HybridError::Config)?;
        let lin = LqrHoverCtl::new(params)?;
        Ok(HybridCtl {
            cfg,
            nl: HoverCtl::new(hover_gains, params),
            lin,
            flight_gains,
            flight_speed,
            mode: Mode::NlHover,
            nl_state: HoverCtlState::align_with(initial, params),
            flight_state: FlightCtlState::new(initial.body_airspeed(Vec3::zeros()).x),
            q_ref: crate::equilibria::hover_attitude(),
        })
    }

    pub fn lyapunov(&self, x: &InertialState, target: Vec3) -> f64 {
        self.lin.lyapunov(x, target)
    }

    /// Evaluates the jump set once; on a transition, re-initializes the
    /// incoming controller state from the current vehicle state and the last
    /// applied command.
    pub fn check_jump(
        &mut self,
        time: &mut HybridTime,
        x: &InertialState,
        target: Vec3,
        last_cmd: &PhysicalCommand,
        params: &VehicleParams,
    ) -> Option<JumpRecord> {
        let v = self.lyapunov(x, target);
        let dist = (target - x.p).norm();
        let next = supervisor_jump(self.mode, v, dist, x.v.norm(), &self.cfg);
        if next == self.mode {
            return None;
        }
        match next {
            Mode::NlHover => {
                self.nl_state = HoverCtlState::align_with(x, params);
            }
            Mode::Flight => {
                self.flight_state = PhysicalHandOff::flight_state(last_cmd, params, x);
            }
            Mode::LinHover => {}
        }
        let record = JumpRecord {
            t: time.t,
            j: time.j + 1,
            from: self.mode,
            to: next,
            v,
        };
        time.j += 1;
        self.mode = next;
        Some(record)
    }

    /// Command of the active mode.
    pub fn command(
        &mut self,
        x: &InertialState,
        target: Vec3,
        dt: f64,
        params: &VehicleParams,
        limits: &ActuatorLimits,
    ) -> Result<EffectiveCommand, HybridError> {
        match self.mode {
            Mode::NlHover => {
                let (u, next) = self.nl.step(x, &self.nl_state, target, self.q_ref, dt)?;
                self.nl_state = next;
                Ok(u)
            }
            Mode::LinHover => Ok(self.lin.command(x, target)),
            Mode::Flight => {
                let (u, next) = flight_step(
                    x,
                    &self.flight_state,
                    target,
                    self.flight_speed,
                    dt,
                    &self.flight_gains,
                    params,
                    limits,
                )?;
                self.flight_state = next;
                Ok(u)
            }
        }
    }

    pub fn last_kappa(&self) -> f64 {
        if self.mode == Mode::Flight {
            self.flight_state.last_kappa
        } else {
            1.0
        }
    }
}

struct PhysicalHandOff;

impl PhysicalHandOff {
    fn flight_state(
        cmd: &PhysicalCommand,
        params: &VehicleParams,
        x: &InertialState,
    ) -> FlightCtlState {
        FlightCtlState::from_physical(cmd, params, x.body_airspeed(Vec3::zeros()).x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SupervisorConfig {
        SupervisorConfig::default()
    }

    #[test]
    fn jump_thresholds() {
        let c = cfg();
        // enter the linear law below the inner threshold
        assert_eq!(supervisor_jump(Mode::NlHover, 249.0, 1.0, 0.0, &c), Mode::LinHover);
        // inside the band: hold
        assert_eq!(supervisor_jump(Mode::LinHover, 300.0, 1.0, 0.0, &c), Mode::LinHover);
        assert_eq!(supervisor_jump(Mode::NlHover, 300.0, 1.0, 0.0, &c), Mode::NlHover);
        // leave the linear law above the outer threshold
        assert_eq!(supervisor_jump(Mode::LinHover, 450.0, 1.0, 0.0, &c), Mode::NlHover);
        // distance triggers flight from either hover mode when moving
        assert_eq!(supervisor_jump(Mode::NlHover, 1e6, 100.0, 3.0, &c), Mode::Flight);
        assert_eq!(supervisor_jump(Mode::LinHover, 100.0, 100.0, 3.0, &c), Mode::Flight);
        // but not from rest
        assert_eq!(supervisor_jump(Mode::NlHover, 1e6, 100.0, 0.0, &c), Mode::NlHover);
        // flight releases to hover at the distance threshold
        assert_eq!(supervisor_jump(Mode::Flight, 1e6, 49.0, 20.0, &c), Mode::NlHover);
        assert_eq!(supervisor_jump(Mode::Flight, 1e6, 60.0, 20.0, &c), Mode::Flight);
    }

    #[test]
    fn hysteresis_band_never_chatters() {
        let c = cfg();
        // a V signal oscillating strictly inside the band causes no jumps
        for start in [Mode::NlHover, Mode::LinHover] {
            let mut mode = start;
            let mut jumps = 0;
            for k in 0..1000 {
                let v = 325.0 + 70.0 * ((k as f64) * 0.1).sin();
                let next = supervisor_jump(mode, v, 1.0, 0.0, &c);
                if next != mode {
                    jumps += 1;
                }
                mode = next;
            }
            assert_eq!(jumps, 0, "chatter from {start:?}");
        }

        // consecutive NL<->LIN jumps require traversing the full band
        let mut mode = Mode::NlHover;
        let mut transitions = Vec::new();
        let signal = |k: usize| -> f64 {
            // sweeps down through 250, up through 400, down again
            match k {
                0..=99 => 500.0 - 3.0 * k as f64,
                100..=199 => 200.0 + 3.0 * (k - 100) as f64,
                _ => 520.0 - 3.0 * (k - 200) as f64,
            }
        };
        for k in 0..300 {
            let v = signal(k);
            let next = supervisor_jump(mode, v, 1.0, 0.0, &c);
            if next != mode {
                transitions.push((k, mode, next, v));
            }
            mode = next;
        }
        assert_eq!(transitions.len(), 3);
        assert!(matches!(transitions[0], (_, Mode::NlHover, Mode::LinHover, _)));
        assert!(matches!(transitions[1], (_, Mode::LinHover, Mode::NlHover, _)));
        assert!(matches!(transitions[2], (_, Mode::NlHover, Mode::LinHover, _)));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = SupervisorConfig {
            v_enter: 400.0,
            v_exit: 250.0,
            ..SupervisorConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn lqr_hover_command_matches_equilibrium_at_target() {
        let p = VehicleParams::default();
        let ctl = LqrHoverCtl::new(&p).unwrap();
        let target = Vec3::new(2.0, -1.0, 4.0);
        let eq = hover_equilibrium(&p, target);
        let u = ctl.command(&eq.x_eq, target);
        assert!((u.as_vector() - eq.u_eq.as_vector()).norm() < 1e-9);
        assert!(ctl.lyapunov(&eq.x_eq, target) < 1e-18);

        // command is invariant to the quaternion double cover (the norm
        // direction is not a controlled coordinate)
        let mut flipped = eq.x_eq;
        flipped.q = UnitQuat {
            eta: -flipped.q.eta,
            eps: -flipped.q.eps,
        };
        let u2 = ctl.command(&flipped, target);
        assert!((u2.as_vector() - u.as_vector()).norm() < 1e-9);
    }

    #[test]
    fn lyapunov_value_scales_with_distance() {
        let p = VehicleParams::default();
        let ctl = LqrHoverCtl::new(&p).unwrap();
        let mut x = InertialState::at_rest(Vec3::zeros(), crate::equilibria::hover_attitude());
        x.p = Vec3::new(1.0, 0.0, 0.0);
        let v1 = ctl.lyapunov(&x, Vec3::zeros());
        x.p = Vec3::new(2.0, 0.0, 0.0);
        let v2 = ctl.lyapunov(&x, Vec3::zeros());
        assert!((v2 / v1 - 4.0).abs() < 1e-9);
        assert!(v1 > 0.0);
    }

    #[test]
    fn jump_records_increment_j_once() {
        let p = VehicleParams::default();
        let x = InertialState::at_rest(Vec3::zeros(), crate::equilibria::hover_attitude());
        let mut ctl = HybridCtl::new(
            &p,
            cfg(),
            HoverGains::default(),
            FlightGains::default(),
            20.0,
            &x,
        )
        .unwrap();
        let mut time = HybridTime { t: 1.0, j: 0 };
        let cmd = PhysicalCommand::idle(&ActuatorLimits::default());
        // at the target the Lyapunov value is ~0: expect NL -> LIN
        let rec = ctl.check_jump(&mut time, &x, Vec3::zeros(), &cmd, &p).unwrap();
        assert_eq!(rec.from, Mode::NlHover);
        assert_eq!(rec.to, Mode::LinHover);
        assert_eq!(rec.j, 1);
        assert_eq!(time.j, 1);
        // no further jump while inside the band
        assert!(ctl.check_jump(&mut time, &x, Vec3::zeros(), &cmd, &p).is_none());
    }
}
