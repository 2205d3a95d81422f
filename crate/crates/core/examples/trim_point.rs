use tslab::equilibria::trim_level_flight;
use tslab::vehicle::VehicleParams;

fn main() {
    let p = VehicleParams::default();
    for v in [0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 20.0] {
        match trim_level_flight(&p, v) {
            Ok(eq) => {
                let (d1, _) = eq.u_eq.deflections(0.0, (0.0, 0.0));
                let vb = eq.x_eq.body_airspeed(nalgebra::Vector3::zeros());
                println!(
                    "V={v:5.2}  t1={:7.3}  d1={:8.3} rad  q=[{:.3},0,{:.3},0]  v_b=({:6.2},{:6.2})  res={:.1e}",
                    eq.u_eq.t1, d1, eq.x_eq.q.eta, eq.x_eq.q.eps.y, vb.x, vb.z, eq.residual_norm
                );
            }
            Err(e) => println!("V={v:5.2}  {e}"),
        }
    }
}
