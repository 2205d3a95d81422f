use tslab::mathkin::Vec3;
use tslab::sim::{run_scenario, Scenario};
use tslab::vehicle::VehicleParams;

fn metrics(name: &str, scenario_toml: &str) {
    let p = VehicleParams::default();
    let s = Scenario::from_toml_str(scenario_toml).unwrap();
    let t0 = std::time::Instant::now();
    match run_scenario(&s, &p) {
        Ok(out) => {
            let last = out.records.last().unwrap();
            let target = s.target_at(last.t);
            let err = (last.p - target).norm();
            // time to first reach 0.1 m of the target
            let t_conv = out
                .records
                .iter()
                .find(|r| (r.p - s.target_at(r.t)).norm() < 0.1)
                .map(|r| r.t);
            let sat_after_5 = out
                .records
                .iter()
                .filter(|r| r.t > 5.0 && r.saturated)
                .count();
            let speed_tail: Vec<f64> = out
                .records
                .iter()
                .rev()
                .take(5_000)
                .map(|r| r.v.norm())
                .collect();
            let mean_speed_tail = speed_tail.iter().sum::<f64>() / speed_tail.len() as f64;
            let motor_tail: Vec<f64> = out
                .records
                .iter()
                .rev()
                .take(5_000)
                .map(|r| 0.5 * (r.physical[0] + r.physical[1]))
                .collect();
            let mean_motor = motor_tail.iter().sum::<f64>() / motor_tail.len() as f64;
            let tilt_tail: Vec<f64> = out
                .records
                .iter()
                .rev()
                .take(5_000)
                .map(|r| {
                    tslab::mathkin::UnitQuat::from_array(r.q)
                        .tilt_from_vertical(Vec3::z())
                        .to_degrees()
                })
                .collect();
            let mean_tilt = tilt_tail.iter().sum::<f64>() / tilt_tail.len() as f64;
            println!(
                "{name}: final_err={err:.3} m, t_conv={:?}, sat>5s={sat_after_5}, \
                 tail: |v|={mean_speed_tail:.2} m/s, motor={mean_motor:.0} rad/s, tilt={mean_tilt:.1} deg, \
                 jumps={}, wall={:.1}s",
                t_conv,
                out.jumps.len(),
                t0.elapsed().as_secs_f64()
            );
            for j in &out.jumps {
                println!("   jump t={:.2} {} -> {} (V={:.1})", j.t, j.from.name(), j.to.name(), j.v);
            }
        }
        Err(e) => println!("{name}: ERROR {e}"),
    }
}

fn main() {
    let which: Vec<String> = std::env::args().skip(1).collect();
    let all = which.is_empty();
    let has = |n: &str| all || which.iter().any(|w| w == n);

    if has("debug") { debug_lqr(); }
    if has("hover555") {
        metrics(
            "hover555",
            r#"
            controller = "nl_hover"
            t_end = 25.0
            [initial]
            q = [0.90, 0.19, 0.36, 0.15]
            [[target]]
            t = 0.0
            p = [5, 5, 5]
            "#,
        );
    }
    if has("flight") {
        metrics(
            "flight",
            r#"
            controller = "flight"
            t_end = 60.0
            [initial]
            v = [10, 0, 0]
            q = [1, 0, 0, 0]
            [[target]]
            t = 0.0
            p = [1000, 0, 1000]
            [flight]
            v_c = 20.0
            "#,
        );
    }
    if has("wind") {
        metrics(
            "lqi_wind",
            r#"
            controller = "lqr_int"
            t_end = 30.0
            [[target]]
            t = 0.0
            p = [0, 0, 0]
            [[wind]]
            t = 10.0
            v = [-5, 0, 0]
            "#,
        );
    }
    if has("hybrid") {
        metrics(
            "hybrid51",
            r#"
            controller = "hybrid"
            t_end = 220.0
            [[target]]
            t = 0.0
            p = [100, 100, 50]
            [[target]]
            t = 100.0
            p = [0, 0, 0]
            [supervisor]
            d_flight = 1e9
            "#,
        );
    }
}

#[allow(dead_code)]
fn debug_lqr() {
    use tslab::hybrid::{LqrHoverCtl, LqrIntHoverCtl};
    use tslab::vehicle::*;
    let args: Vec<String> = std::env::args().collect();
    let use_aug = args.iter().any(|a| a == "aug");
    let use_int = args.iter().any(|a| a == "int");
    let use_wind = args.iter().any(|a| a == "wind2");
    let model = if use_aug { ModelKind::Augmented } else { ModelKind::Simplified };
    let p = VehicleParams::default();
    let ctl = LqrHoverCtl::new(&p).unwrap();
    let mut ctl_int = LqrIntHoverCtl::new(&p).unwrap();
    let lim = ActuatorLimits::default();
    let mut x = InertialState::at_rest(Vec3::new(0.2, 0.0, 0.0), tslab::equilibria::hover_attitude());
    let mut prev = PhysicalCommand::idle(&lim);
    let dt = 1e-3;
    let steps: usize = if std::env::args().any(|a| a == "long") { 20001 } else { 5001 };
    for k in 0..steps {
        let t = k as f64 * dt;
        let u = if use_int { ctl_int.command(&x, Vec3::zeros(), dt) } else { ctl.command(&x, Vec3::zeros()) };
        let wind = if use_wind && t >= 2.0 { Vec3::new(-5.0, 0.0, 0.0) } else { Vec3::zeros() };
        let phys = saturate_command(&PhysicalCommand::from_effective(&u, &prev, &p, &lim), &prev, dt, &lim);
        if k % 250 == 0 {
            println!(
                "t={t:5.2} p=({:6.2},{:6.2},{:6.2}) v=({:6.2},{:6.2},{:6.2}) tilt={:6.1} V={:9.2} u_raw=[{:6.2},{:6.2},{:6.3},{:6.3}] phys=[{:5.0},{:5.0},{:6.3},{:6.3}]",
                x.p.x, x.p.y, x.p.z, x.v.x, x.v.y, x.v.z,
                x.q.tilt_from_vertical(Vec3::z()).to_degrees(),
                ctl.lyapunov(&x, Vec3::zeros()),
                u.t1, u.t2, u.d1t1, u.d2t2,
                phys.omega1, phys.omega2, phys.delta1, phys.delta2,
            );
        }
        x = tslab::sim::rk4_step_raw(&x, &Command::Virtual(phys.to_virtual(&p)), wind, dt, &p, model);
        prev = phys;
    }
}
