use mvdepth::formation::*;
use mvdepth::pipeline::*;
use mvdepth::scene_io::*;
use nalgebra::DVector;

fn main() {
    let clean_l = read_depth_image("/tmp/fake_teddy/left.pgm").unwrap();
    let clean_r = read_depth_image("/tmp/fake_teddy/right.pgm").unwrap();
    let rig: CameraRig = serde_json::from_str(&std::fs::read_to_string("/tmp/fake_teddy/rig.json").unwrap()).unwrap();
    let mut cfg = RunConfig::default();
    cfg.rig = rig.clone();
    cfg.depth_range = [1500.0, 1589.2];
    cfg.formation.sigma_n2 = 50.0;
    let q = cfg.quantization_step();
    let noisy_l = simulate_observation(&clean_l, &FormationParams::new(q, 50.0, 7).unwrap());
    let noisy_r = simulate_observation(&clean_r, &FormationParams::new(q, 50.0, 8).unwrap());
    let params = EnhanceParams::from_config(&cfg);

    // replay the pipeline rows up to 33, tracking DC and shape error
    let mut state = EnhancementState::new();
    for row in 0..=33usize {
        let y_l = noisy_l.row_vector(row);
        let y_r = noisy_r.row_vector(row);
        let (x_l, _x_r, d) = enhance_row_pair(row, &y_l, &y_r, &mut state, &rig, &params).unwrap();
        let clean_row = clean_l.row_vector(row);
        let err = &x_l - &clean_row;
        let dc = err.mean();
        let shape = (&err - DVector::from_element(err.len(), dc)).norm() / (err.len() as f64).sqrt();
        let noise_dc = (&y_l - &clean_row).mean();
        if row % 4 == 0 || (28..=33).contains(&row) {
            println!("row {row:3}: dc {dc:7.3} (noisy dc {noise_dc:6.3}) shape-rms {shape:6.3} iters {:4} unc {}", d.solver_iterations, d.uncovered_pixels);
        }
        if row == 28 {
            for j in (0..x_l.len()).step_by(8) {
                println!("   j {j:3}: clean {:9.3} noisy {:9.3} enh {:9.3} err {:7.3}",
                    clean_row[j], y_l[j], x_l[j], x_l[j] - clean_row[j]);
            }
        }
    }
}
