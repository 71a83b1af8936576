//! Point cloud synthesis from depth images and the quality metrics used to
//! compare a test cloud against ground truth: point-to-point (C2C) and
//! point-to-plane (C2P) mean errors over nearest-neighbor correspondences.

use kdtree::distance::squared_euclidean;
use kdtree::KdTree;
use nalgebra::{Matrix3, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_io::{CameraRig, DepthImage, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewSide {
    Left,
    Right,
}

/// Back-projects valid pixels into the left-camera frame. Right-view points
/// are shifted by the baseline along +X so both clouds share one frame.
pub fn project_to_cloud(img: &DepthImage, rig: &CameraRig, view: ViewSide) -> PointCloud {
    let offset = match view {
        ViewSide::Left => 0.0,
        ViewSide::Right => rig.baseline,
    };
    let mut points = Vec::with_capacity(img.valid_count());
    for v in 0..img.height() {
        for u in 0..img.width() {
            if !img.is_valid(v, u) {
                continue;
            }
            let z = img.get(v, u);
            points.push(Point3::new(
                (u as f64 - rig.cx) * z / rig.focal_px + offset,
                (v as f64 - rig.cy) * z / rig.focal_px,
                z,
            ));
        }
    }
    PointCloud::new(points)
}

fn build_index(cloud: &PointCloud) -> KdTree<f64, usize, [f64; 3]> {
    let mut tree = KdTree::new(3);
    for (idx, p) in cloud.points().iter().enumerate() {
        tree.add([p.x, p.y, p.z], idx)
            .expect("finite coordinates insert cleanly");
    }
    tree
}

fn nearest_index(tree: &KdTree<f64, usize, [f64; 3]>, p: &Point3<f64>) -> usize {
    *tree
        .nearest(&[p.x, p.y, p.z], 1, &squared_euclidean)
        .expect("non-empty tree")[0]
        .1
}

/// Estimates per-point unit normals from a principal-component plane fit over
/// each point's k nearest neighbors, oriented toward the camera origin
/// (nonpositive Z). Degenerate neighborhoods default to (0, 0, -1).
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    if k < 3 {
        return Err(Error::InvalidArgument(format!(
            "normal estimation needs k >= 3, got {k}"
        )));
    }
    if cloud.len() < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "normal estimation needs at least k + 1 = {} points, got {}",
            k + 1,
            cloud.len()
        )));
    }
    let tree = build_index(cloud);
    let points = cloud.points();
    let normals: Vec<Vector3<f64>> = points
        .par_iter()
        .enumerate()
        .map(|(idx, p)| {
            let hits = tree
                .nearest(&[p.x, p.y, p.z], k + 1, &squared_euclidean)
                .expect("non-empty tree");
            let mut centroid = Vector3::zeros();
            let mut count = 0usize;
            let neighbors: Vec<usize> = hits
                .iter()
                .map(|(_, &i)| i)
                .filter(|&i| i != idx)
                .take(k)
                .collect();
            for &i in &neighbors {
                centroid += points[i].coords;
                count += 1;
            }
            if count < 3 {
                return Vector3::new(0.0, 0.0, -1.0);
            }
            centroid /= count as f64;
            let mut cov = Matrix3::zeros();
            for &i in &neighbors {
                let d = points[i].coords - centroid;
                cov += d * d.transpose();
            }
            let eig = nalgebra::SymmetricEigen::new(cov);
            let mut order = [0usize, 1, 2];
            order.sort_by(|&a, &b| {
                eig.eigenvalues[a]
                    .partial_cmp(&eig.eigenvalues[b])
                    .unwrap()
            });
            if eig.eigenvalues[order[1]]
                <= 1e-12 * eig.eigenvalues[order[2]].max(f64::MIN_POSITIVE)
            {
                return Vector3::new(0.0, 0.0, -1.0);
            }
            let mut n: Vector3<f64> = eig.eigenvectors.column(order[0]).into();
            n.normalize_mut();
            if n.z > 0.0 || (n.z == 0.0 && (n.y > 0.0 || (n.y == 0.0 && n.x > 0.0))) {
                n = -n;
            }
            n
        })
        .collect();
    PointCloud::with_normals(points.to_vec(), normals)
}

/// Mean Euclidean distance from each reference point to its nearest test
/// point.
pub fn c2c(reference: &PointCloud, test: &PointCloud) -> Result<f64> {
    Ok(c2c_distances(reference, test)?.iter().sum::<f64>() / reference.len() as f64)
}

/// Per-reference-point nearest-neighbor distances (the C2C integrand),
/// exposed for heat-map export.
pub fn c2c_distances(reference: &PointCloud, test: &PointCloud) -> Result<Vec<f64>> {
    if reference.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument(
            "point cloud metrics need non-empty clouds".into(),
        ));
    }
    let tree = build_index(test);
    Ok(reference
        .points()
        .par_iter()
        .map(|p| {
            let q = test.points()[nearest_index(&tree, p)];
            (p - q).norm()
        })
        .collect())
}

/// Mean unsigned distance from each reference point to the tangent plane of
/// its nearest test point.
pub fn c2p(reference: &PointCloud, test: &PointCloud) -> Result<f64> {
    if reference.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument(
            "point cloud metrics need non-empty clouds".into(),
        ));
    }
    let normals = test.normals().ok_or_else(|| {
        Error::InvalidArgument("point-to-plane needs normals on the test cloud".into())
    })?;
    let tree = build_index(test);
    // collect first so the sum order is deterministic
    let values: Vec<f64> = reference
        .points()
        .par_iter()
        .map(|p| {
            let idx = nearest_index(&tree, p);
            let q = test.points()[idx];
            ((p - q).dot(&normals[idx])).abs()
        })
        .collect();
    Ok(values.iter().sum::<f64>() / reference.len() as f64)
}

/// C2C and C2P of a test cloud against a reference, with the per-point C2C
/// distances kept for optional export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub c2c: f64,
    pub c2p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_point: Option<Vec<f64>>,
}

pub fn compare_clouds(
    reference: &PointCloud,
    test: &PointCloud,
    keep_per_point: bool,
) -> Result<MetricsReport> {
    let distances = c2c_distances(reference, test)?;
    let c2c_val = distances.iter().sum::<f64>() / reference.len() as f64;
    let c2p_val = c2p(reference, test)?;
    Ok(MetricsReport {
        c2c: c2c_val,
        c2p: c2p_val,
        per_point: keep_per_point.then_some(distances),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formation::{render_scene_pair, SceneSpec, SyntheticScene};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(-10.0..10.0),
                    )
                })
                .collect(),
        )
    }

    fn brute_force_nearest(p: &Point3<f64>, cloud: &PointCloud) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, q) in cloud.points().iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    #[test]
    fn principal_point_projects_to_axis() {
        let rig = CameraRig::new(500.0, 10.0, 2.0, 1.0, 5, 3).unwrap();
        let mut values = vec![0.0; 15];
        let mut mask = vec![false; 15];
        values[5 + 2] = 42.0; // row 1, col 2: the principal point
        mask[5 + 2] = true;
        let img = DepthImage::new(5, 3, values, mask).unwrap();
        let cloud = project_to_cloud(&img, &rig, ViewSide::Left);
        assert_eq!(cloud.len(), 1);
        let p = cloud.points()[0];
        assert!((p - Point3::new(0.0, 0.0, 42.0)).norm() < 1e-12);
    }

    #[test]
    fn constant_image_gives_planar_cloud() {
        let rig = CameraRig::new(400.0, 5.0, 8.0, 4.0, 16, 8).unwrap();
        let img = DepthImage::from_values(16, 8, vec![77.0; 128]).unwrap();
        let cloud = project_to_cloud(&img, &rig, ViewSide::Left);
        assert_eq!(cloud.len(), 128);
        for p in cloud.points() {
            assert_eq!(p.z, 77.0);
        }
    }

    #[test]
    fn rendered_pair_projections_overlap() {
        let rig = CameraRig::new(500.0, 2.0, 32.0, 8.0, 64, 16).unwrap();
        let scene = SyntheticScene::new(
            SceneSpec::SlantedSinusoid {
                base: 105.0,
                slope_u: 0.15,
                slope_v: 0.1,
                amplitude: 1.0,
                period_u: 32.0,
                period_v: 8.0,
            },
            rig.clone(),
        )
        .unwrap();
        let (left, right) = render_scene_pair(&scene).unwrap();
        let cloud_l = project_to_cloud(&left, &rig, ViewSide::Left);
        // keep right pixels whose correspondence lands inside the left image
        let fd = rig.focal_baseline();
        let mut kept = Vec::new();
        for v in 0..rig.height {
            for i in 0..rig.width {
                let z = right.get(v, i);
                if right.is_valid(v, i) && i as f64 + fd / z <= (rig.width - 1) as f64 {
                    kept.push(Point3::new(
                        (i as f64 - rig.cx) * z / rig.focal_px + rig.baseline,
                        (v as f64 - rig.cy) * z / rig.focal_px,
                        z,
                    ));
                }
            }
        }
        let cloud_r = PointCloud::new(kept);
        // every such right point should sit near some left point, within 2% depth
        let tree = build_index(&cloud_l);
        for p in cloud_r.points() {
            let q = cloud_l.points()[nearest_index(&tree, p)];
            let gap = (p - q).norm();
            assert!(gap <= 0.02 * p.z, "gap {gap} at depth {}", p.z);
        }
    }

    #[test]
    fn plane_cloud_normals_align_with_axis() {
        let rig = CameraRig::new(400.0, 5.0, 16.0, 8.0, 32, 16).unwrap();
        let img = DepthImage::from_values(32, 16, vec![60.0; 512]).unwrap();
        let cloud = project_to_cloud(&img, &rig, ViewSide::Left);
        let with_normals = estimate_normals(&cloud, 8).unwrap();
        for n in with_normals.normals().unwrap() {
            assert!(n.x.abs() < 1e-9 && n.y.abs() < 1e-9);
            assert!((n.z + 1.0).abs() < 1e-9, "normal {n:?} not toward camera");
        }
    }

    #[test]
    fn slanted_cloud_normals_match_plane_within_a_degree() {
        // points on the 3D plane Z = 0.4 X + 80
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let points: Vec<Point3<f64>> = (0..500)
            .map(|_| {
                let x = rng.gen_range(-20.0..20.0);
                let y = rng.gen_range(-20.0..20.0);
                Point3::new(x, y, 0.4 * x + 80.0)
            })
            .collect();
        let cloud = PointCloud::new(points);
        let with_normals = estimate_normals(&cloud, 16).unwrap();
        let expected = Vector3::new(0.4, 0.0, -1.0).normalize();
        for n in with_normals.normals().unwrap() {
            let angle = n.dot(&expected).clamp(-1.0, 1.0).acos().to_degrees();
            assert!(angle <= 1.0, "normal off by {angle} degrees");
        }
    }

    #[test]
    fn normal_estimation_rejects_small_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let cloud = random_cloud(10, &mut rng);
        assert!(estimate_normals(&cloud, 10).is_err());
        assert!(estimate_normals(&cloud, 2).is_err());
        assert!(estimate_normals(&cloud, 9).is_ok());
    }

    #[test]
    fn c2c_trivials() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let cloud = random_cloud(50, &mut rng);
        assert_eq!(c2c(&cloud, &cloud).unwrap(), 0.0);
        let a = PointCloud::new(vec![Point3::new(0.0, 0.0, 0.0)]);
        let b = PointCloud::new(vec![Point3::new(1.0, 0.0, 0.0)]);
        assert!((c2c(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        assert!(c2c(&a, &PointCloud::new(vec![])).is_err());
    }

    #[test]
    fn c2c_matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        for _ in 0..5 {
            let reference = random_cloud(200, &mut rng);
            let test = random_cloud(180, &mut rng);
            let got = c2c(&reference, &test).unwrap();
            let expected: f64 = reference
                .points()
                .iter()
                .map(|p| (p - test.points()[brute_force_nearest(p, &test)]).norm())
                .sum::<f64>()
                / reference.len() as f64;
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn c2c_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(85);
        let reference = random_cloud(100, &mut rng);
        let test = random_cloud(100, &mut rng);
        let shift = Vector3::new(3.0, -2.0, 7.0);
        let shifted_ref = PointCloud::new(reference.points().iter().map(|p| p + shift).collect());
        let shifted_test = PointCloud::new(test.points().iter().map(|p| p + shift).collect());
        let a = c2c(&reference, &test).unwrap();
        let b = c2c(&shifted_ref, &shifted_test).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn c2p_trivials_and_tangential_displacement() {
        // planar test cloud on z = 0 with normals (0,0,-1)
        let mut points = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                points.push(Point3::new(i as f64, j as f64, 0.0));
            }
        }
        let normals = vec![Vector3::new(0.0, 0.0, -1.0); points.len()];
        let test = PointCloud::with_normals(points, normals).unwrap();
        assert_eq!(c2p(&test, &test).unwrap(), 0.0);

        // a reference point displaced tangentially stays on the plane
        let reference = PointCloud::new(vec![Point3::new(5.4, 5.6, 0.0)]);
        let c2p_val = c2p(&reference, &test).unwrap();
        let c2c_val = c2c(&reference, &test).unwrap();
        assert!(c2p_val < 1e-12);
        assert!(c2c_val > 0.5);
    }

    #[test]
    fn c2p_matches_brute_force_and_stays_below_c2c() {
        let mut rng = ChaCha8Rng::seed_from_u64(86);
        for _ in 0..5 {
            let reference = random_cloud(150, &mut rng);
            let test = estimate_normals(&random_cloud(120, &mut rng), 8).unwrap();
            let got = c2p(&reference, &test).unwrap();
            let normals = test.normals().unwrap();
            let expected: f64 = reference
                .points()
                .iter()
                .map(|p| {
                    let i = brute_force_nearest(p, &test);
                    ((p - test.points()[i]).dot(&normals[i])).abs()
                })
                .sum::<f64>()
                / reference.len() as f64;
            assert_eq!(got, expected);
            let c2c_val = c2c(&reference, &test).unwrap();
            assert!(got <= c2c_val + 1e-9);
        }
    }

    #[test]
    fn c2p_requires_normals() {
        let mut rng = ChaCha8Rng::seed_from_u64(87);
        let a = random_cloud(10, &mut rng);
        let b = random_cloud(10, &mut rng);
        assert!(c2p(&a, &b).is_err());
    }

    #[test]
    fn report_carries_per_point_distances_on_request() {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let reference = random_cloud(60, &mut rng);
        let test = estimate_normals(&random_cloud(50, &mut rng), 6).unwrap();
        let with = compare_clouds(&reference, &test, true).unwrap();
        assert_eq!(with.per_point.as_ref().unwrap().len(), 60);
        let without = compare_clouds(&reference, &test, false).unwrap();
        assert!(without.per_point.is_none());
        assert_eq!(with.c2c, without.c2c);
    }
}
