use mvdepth::formation::*;
use mvdepth::pipeline::*;
use mvdepth::scene_io::*;

fn main() {
    let clean_l = read_depth_image("/tmp/fake_teddy/left.pgm").unwrap();
    let clean_r = read_depth_image("/tmp/fake_teddy/right.pgm").unwrap();
    let rig: CameraRig = serde_json::from_str(&std::fs::read_to_string("/tmp/fake_teddy/rig.json").unwrap()).unwrap();
    let mut values: Vec<f64> = clean_l.values().iter().zip(clean_l.mask()).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (lo, hi) = (values[0], values[values.len()-1]);
    println!("depth range [{lo}, {hi}]");
    let mut cfg = RunConfig::default();
    cfg.rig = rig.clone();
    cfg.depth_range = [lo, hi + 1e-9];
    cfg.formation.sigma_n2 = 50.0;
    let q = cfg.quantization_step();
    println!("q = {q}");
    let noisy_l = simulate_observation(&clean_l, &FormationParams::new(q, 50.0, 7).unwrap());
    let noisy_r = simulate_observation(&clean_r, &FormationParams::new(q, 50.0, 8).unwrap());
    let params = EnhanceParams::from_config(&cfg);
    let (el, er, report) = enhance_image_pair(&noisy_l, &noisy_r, &rig, &params).unwrap();
    println!("fallbacks {} refreshes {}", report.fallback_rows, report.metric_refreshes);
    for row in (0..rig.height).step_by(16) {
        let mut mae_n = 0.0; let mut mae_e = 0.0; let mut mae_er = 0.0; let mut mae_nr = 0.0;
        for j in 0..rig.width {
            mae_n += (noisy_l.get(row, j) - clean_l.get(row, j)).abs();
            mae_e += (el.get(row, j) - clean_l.get(row, j)).abs();
            if clean_r.is_valid(row, j) {
                mae_nr += (noisy_r.get(row, j) - clean_r.get(row, j)).abs();
                mae_er += (er.get(row, j) - clean_r.get(row, j)).abs();
            }
        }
        let d = &report.rows[row];
        println!("row {row:3}: L noisy {:.2} enh {:.2} | R noisy {:.2} enh {:.2} | iters {} unc {} obj {:.1}->{:.1}",
            mae_n/128.0, mae_e/128.0, mae_nr/128.0, mae_er/128.0, d.solver_iterations, d.uncovered_pixels,
            d.objective_initial, d.objective_final);
    }
    // profile row 48
    let row = 48;
    for j in (0..128).step_by(16) {
        println!("j {j:3}: clean {:9.3} noisy {:9.3} enh {:9.3}", clean_l.get(row, j), noisy_l.get(row, j), el.get(row, j));
    }
}
