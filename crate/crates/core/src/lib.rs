//! Desk-scale flight-dynamics lab for a twin-motor tail-sitter UAV.
//!
//! The crate models the vehicle in 6 DOF with unit-quaternion attitude,
//! provides four control laws (LQR and a nonlinear zero-moment law for
//! hover, a linearized model and a line-of-sight law for forward flight),
//! a Lyapunov-hysteresis supervisor that switches between them, and a
//! fixed-step simulation harness with trim, linearization, LQR synthesis,
//! and region-of-attraction estimation behind the `tslab` CLI.

pub mod equilibria;
pub mod flight_ctl;
pub mod hover_ctl;
pub mod hybrid;
pub mod lqr;
pub mod mathkin;
pub mod sim;
pub mod vehicle;

pub use mathkin::{Mat3, UnitQuat, Vec3};
pub use vehicle::{
    ActuatorLimits, BodyWrench, Command, EffectiveCommand, InertialState, ModelKind,
    PhysicalCommand, VehicleParams, VirtualCommand,
};
