use nalgebra::{Matrix2, Vector2, Vector3};
use tslab::mathkin::{UnitQuat, Vec3};
use tslab::vehicle::{
    augmented_wrench, state_deriv, Command, InertialState, ModelKind, VehicleParams,
    VirtualCommand,
};

// Scans tilt-from-vertical angles at a fixed airspeed: solves the two force
// equations for (t_sum, d_sum) and prints the leftover pitch moment.
fn main() {
    let mut p = VehicleParams::default();
    let mut args = std::env::args().skip(1);
    if let Some(rho) = args.next() {
        p.rho = rho.parse().unwrap();
    }
    if let Some(swet) = args.next() {
        p.s_wet = swet.parse().unwrap();
    }
    let speeds: Vec<f64> = args.map(|a| a.parse().unwrap()).collect();
    let speeds = if speeds.is_empty() { vec![5.0] } else { speeds };
    println!("rho = {}, s_wet = {}", p.rho, p.s_wet);

    for v in speeds {
        println!("--- V = {v} m/s ---");
        for tau_deg in (0..90).step_by(3) {
            let tau = (tau_deg as f64).to_radians();
            let phi = tau - std::f64::consts::FRAC_PI_2; // full pitch angle
            let q = UnitQuat::new((phi / 2.0).cos(), Vec3::new(0.0, (phi / 2.0).sin(), 0.0));
            let x = InertialState {
                p: Vec3::zeros(),
                v: Vec3::new(v, 0.0, 0.0),
                q,
                omega_b: Vec3::zeros(),
            };
            let v_b = x.body_airspeed(Vec3::zeros());

            // Newton on (v_dot_x, v_dot_z) over (t_sum, d_sum)
            let res = |ts: f64, ds: f64| -> Vector2<f64> {
                let u = VirtualCommand { t_sum: ts, t_diff: 0.0, d_sum: ds, d_diff: 0.0 };
                let d = state_deriv(&x, &Command::Virtual(u), Vec3::zeros(), &p, ModelKind::Augmented);
                Vector2::new(d.v_dot.x, d.v_dot.z)
            };
            let mut z = Vector2::new(4.0, 0.0);
            let mut ok = false;
            for _ in 0..60 {
                let r = res(z[0], z[1]);
                if r.norm() < 1e-11 {
                    ok = true;
                    break;
                }
                let h = 1e-6;
                let j = Matrix2::from_columns(&[
                    (res(z[0] + h, z[1]) - res(z[0] - h, z[1])) / (2.0 * h),
                    (res(z[0], z[1] + h) - res(z[0], z[1] - h)) / (2.0 * h),
                ]);
                match j.lu().solve(&(-r)) {
                    Some(s) => z += s,
                    None => break,
                }
            }
            if !ok {
                println!("tau={tau_deg:3}  force balance failed");
                continue;
            }
            let u = VirtualCommand { t_sum: z[0], t_diff: 0.0, d_sum: z[1], d_diff: 0.0 };
            let w = augmented_wrench(&u, v_b, Vector3::zeros(), &p);
            println!(
                "tau={tau_deg:3}  ts={:8.3}  ds={:8.3}  v_b=({:6.2},{:6.2})  My={:9.4}",
                z[0], z[1], v_b.x, v_b.z, w.moment.y
            );
        }
    }
}
