//! Depth-sensor image formation: additive Gaussian noise followed by uniform
//! quantization, plus synthetic two-view scenes with exact ground truth.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_io::{CameraRig, DepthImage};

/// Noise-and-quantizer parameters applied to a clean depth image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormationParams {
    /// Quantization step, in depth units.
    pub qstep: f64,
    /// Additive noise variance, in squared depth units.
    pub sigma_n2: f64,
    pub seed: u64,
}

impl FormationParams {
    pub fn new(qstep: f64, sigma_n2: f64, seed: u64) -> Result<Self> {
        if !(qstep > 0.0 && qstep.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "quantization step must be positive, got {qstep}"
            )));
        }
        if !(sigma_n2 >= 0.0 && sigma_n2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be nonnegative, got {sigma_n2}"
            )));
        }
        Ok(FormationParams {
            qstep,
            sigma_n2,
            seed,
        })
    }
}

/// Quantization step that splits a depth range into 2^bits uniform cells.
pub fn quantization_step_for_bits(depth_range: (f64, f64), bits: u32) -> Result<f64> {
    let (lo, hi) = depth_range;
    if !(hi > lo) {
        return Err(Error::InvalidArgument(format!(
            "degenerate depth range ({lo}, {hi})"
        )));
    }
    if bits == 0 || bits > 62 {
        return Err(Error::InvalidArgument(format!(
            "bit depth must be in 1..=62, got {bits}"
        )));
    }
    Ok((hi - lo) / (1u64 << bits) as f64)
}

/// Applies the formation model to every valid pixel: y = round((x + n)/Q)*Q
/// with n ~ N(0, sigma_n2) drawn i.i.d. per pixel. Deterministic given the
/// seed; one draw is consumed per pixel regardless of the mask so that the
/// noise field does not depend on which pixels are valid.
///
/// A pixel whose noisy value falls below zero is clamped to 0 and masked
/// invalid.
pub fn simulate_observation(clean: &DepthImage, params: &FormationParams) -> DepthImage {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = Normal::new(0.0, params.sigma_n2.sqrt()).expect("finite standard deviation");
    let q = params.qstep;
    let count = clean.width() * clean.height();
    let mut values = Vec::with_capacity(count);
    let mut mask = Vec::with_capacity(count);
    for idx in 0..count {
        let noise = normal.sample(&mut rng);
        if !clean.mask()[idx] {
            values.push(0.0);
            mask.push(false);
            continue;
        }
        let noisy = clean.values()[idx] + noise;
        if noisy < 0.0 {
            values.push(0.0);
            mask.push(false);
        } else {
            values.push((noisy / q).round() * q);
            mask.push(true);
        }
    }
    DepthImage::new(clean.width(), clean.height(), values, mask)
        .expect("formation preserves image dimensions")
}

/// Analytic surface z(u, v) over continuous left-image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneSpec {
    /// Fronto-parallel plane at constant depth.
    Plane { depth: f64 },
    /// Plane sloping along the image axes: z = base + slope_u*u + slope_v*v.
    Slanted {
        base: f64,
        slope_u: f64,
        slope_v: f64,
    },
    /// Slanted plane with sinusoidal relief.
    SlantedSinusoid {
        base: f64,
        slope_u: f64,
        slope_v: f64,
        amplitude: f64,
        period_u: f64,
        period_v: f64,
    },
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec::SlantedSinusoid {
            base: 1500.0,
            slope_u: 0.3,
            slope_v: 0.8,
            amplitude: 8.0,
            period_u: 256.0,
            period_v: 64.0,
        }
    }
}

impl SceneSpec {
    pub fn depth_at(&self, u: f64, v: f64) -> f64 {
        match *self {
            SceneSpec::Plane { depth } => depth,
            SceneSpec::Slanted {
                base,
                slope_u,
                slope_v,
            } => base + slope_u * u + slope_v * v,
            SceneSpec::SlantedSinusoid {
                base,
                slope_u,
                slope_v,
                amplitude,
                period_u,
                period_v,
            } => {
                base + slope_u * u
                    + slope_v * v
                    + amplitude
                        * (std::f64::consts::TAU * u / period_u).sin()
                        * (std::f64::consts::TAU * v / period_v).cos()
            }
        }
    }
}

/// A synthetic scene: an analytic surface observed by a camera rig.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub surface: SceneSpec,
    pub rig: CameraRig,
}

impl SyntheticScene {
    pub fn new(surface: SceneSpec, rig: CameraRig) -> Result<Self> {
        let scene = SyntheticScene { surface, rig };
        let (lo, _hi) = scene.depth_bounds();
        if !(lo > 0.0) {
            return Err(Error::InvalidArgument(
                "surface depth must stay positive over the (padded) image domain".into(),
            ));
        }
        Ok(scene)
    }

    /// Min/max surface depth over the image domain padded by the disparity
    /// reach, sampled densely. Used to bracket ray intersections.
    pub fn depth_bounds(&self) -> (f64, f64) {
        let pad = 64.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let u_steps = ((self.rig.width as f64 + 2.0 * pad) * 2.0) as usize;
        let v_steps = (self.rig.height * 2).max(2);
        for vi in 0..=v_steps {
            let v = (vi as f64 / v_steps as f64) * (self.rig.height as f64 - 1.0).max(1.0);
            for ui in 0..=u_steps {
                let u = -pad + ui as f64 * 0.5;
                let z = self.surface.depth_at(u, v);
                lo = lo.min(z);
                hi = hi.max(z);
            }
        }
        (lo, hi)
    }
}

/// Renders a rectified pair from an analytic surface. The left image samples
/// depth at integer pixel centers; each right pixel is the depth at which its
/// camera ray meets the surface, found by bisection to ~1e-10.
pub fn render_scene_pair(scene: &SyntheticScene) -> Result<(DepthImage, DepthImage)> {
    let rig = &scene.rig;
    let (w, h) = (rig.width, rig.height);
    let fd = rig.focal_baseline();
    let (zlo, zhi) = scene.depth_bounds();
    let bracket_lo = zlo * 0.9;
    let bracket_hi = zhi * 1.1;

    let mut left_values = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let z = scene.surface.depth_at(u as f64, v as f64);
            if !(z > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "surface depth nonpositive at pixel ({u}, {v})"
                )));
            }
            left_values.push(z);
        }
    }
    let left = DepthImage::from_values(w, h, left_values)?;

    // A right pixel i on row v sees left-image coordinate u(t) = i + fD/t at
    // candidate depth t; the surface is met where t = z(u(t), v).
    let mut right_values = vec![0.0; w * h];
    let mut right_mask = vec![false; w * h];
    for v in 0..h {
        for i in 0..w {
            let residual = |t: f64| t - scene.surface.depth_at(i as f64 + fd / t, v as f64);
            let mut lo = bracket_lo;
            let mut hi = bracket_hi;
            let (rlo, rhi) = (residual(lo), residual(hi));
            if rlo > 0.0 || rhi < 0.0 {
                continue; // ray does not meet the surface inside the bracket
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if residual(mid) <= 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-10 {
                    break;
                }
            }
            let t = 0.5 * (lo + hi);
            right_values[v * w + i] = t;
            right_mask[v * w + i] = true;
        }
    }
    let right = DepthImage::new(w, h, right_values, right_mask)?;
    Ok((left, right))
}

/// Convenience: rows of a rendered image as vectors.
pub fn image_rows(img: &DepthImage) -> Vec<DVector<f64>> {
    (0..img.height()).map(|r| img.row_vector(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_rig() -> CameraRig {
        CameraRig::new(500.0, 30.0, 32.0, 8.0, 64, 16).unwrap()
    }

    #[test]
    fn qstep_direct_arithmetic() {
        assert_eq!(quantization_step_for_bits((0.0, 256.0), 8).unwrap(), 1.0);
        assert_eq!(quantization_step_for_bits((0.0, 1.0), 1).unwrap(), 0.5);
        assert!(quantization_step_for_bits((1.0, 1.0), 8).is_err());
        assert!(quantization_step_for_bits((0.0, 1.0), 0).is_err());
    }

    #[test]
    fn qstep_yields_exactly_256_levels_over_half_open_sweep() {
        // Range spanning exactly 256 cells with edges on half-lattice points:
        // lo/Q = 150.5, so the sweep [lo, hi) rounds onto 256 distinct levels.
        let (lo, hi) = (301.0, 813.0);
        let q = quantization_step_for_bits((lo, hi), 8).unwrap();
        assert_eq!(q, 2.0);
        let mut levels = std::collections::BTreeSet::new();
        let n = 200_000;
        for k in 0..n {
            let x = lo + (hi - lo) * (k as f64 / n as f64); // [lo, hi)
            let y = (x / q).round() as i64;
            levels.insert(y);
        }
        assert_eq!(levels.len(), 256);
    }

    #[test]
    fn noiseless_quantizer_fixed_point_and_bound() {
        let q = 0.25;
        let params = FormationParams::new(q, 0.0, 1).unwrap();
        let values: Vec<f64> = (1..=64).map(|k| k as f64 * q).collect();
        let img = DepthImage::from_values(8, 8, values.clone()).unwrap();
        let out = simulate_observation(&img, &params);
        assert_eq!(out.values(), img.values());

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let arbitrary: Vec<f64> = (0..64).map(|_| rng.gen_range(1.0..100.0)).collect();
        let img = DepthImage::from_values(8, 8, arbitrary.clone()).unwrap();
        let out = simulate_observation(&img, &params);
        for (y, x) in out.values().iter().zip(&arbitrary) {
            assert!((y - x).abs() <= q / 2.0 + 1e-12);
        }
    }

    #[test]
    fn noise_mean_is_statistically_zero() {
        // 10^5+ pixels; the sample mean of (y - x) stays within 3*sigma/sqrt(n)
        // plus the quantizer's worst-case bias bound.
        let sigma_n2 = 50.0;
        let q = 1.0;
        let n_pix = 400 * 256;
        let params = FormationParams::new(q, sigma_n2, 99).unwrap();
        let img = DepthImage::from_values(256, 400, vec![500.0; n_pix]).unwrap();
        let out = simulate_observation(&img, &params);
        let mean: f64 = out
            .values()
            .iter()
            .zip(img.values())
            .map(|(y, x)| y - x)
            .sum::<f64>()
            / n_pix as f64;
        let bound = 3.0 * sigma_n2.sqrt() / (n_pix as f64).sqrt();
        // Quantizing a wide Gaussian adds negligible bias; allow one lattice
        // step's worth of slack on top of the CLT bound.
        assert!(
            mean.abs() < bound + 0.05,
            "sample mean {mean} outside {bound}"
        );
    }

    #[test]
    fn output_lies_on_quantization_lattice() {
        let q = 0.75;
        let params = FormationParams::new(q, 9.0, 5).unwrap();
        let img = DepthImage::from_values(16, 16, vec![42.0; 256]).unwrap();
        let out = simulate_observation(&img, &params);
        for (idx, &y) in out.values().iter().enumerate() {
            if out.mask()[idx] {
                let k = y / q;
                assert!((k - k.round()).abs() < 1e-9, "value {y} off-lattice");
                assert!(y >= 0.0);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let params = FormationParams::new(0.5, 25.0, 1234).unwrap();
        let img = DepthImage::from_values(32, 8, vec![77.0; 256]).unwrap();
        let a = simulate_observation(&img, &params);
        let b = simulate_observation(&img, &params);
        assert_eq!(a, b);
    }

    #[test]
    fn masked_pixels_pass_through_invalid() {
        let params = FormationParams::new(0.5, 25.0, 8).unwrap();
        let mut mask = vec![true; 64];
        mask[10] = false;
        let values: Vec<f64> = (0..64).map(|k| if k == 10 { 0.0 } else { 50.0 }).collect();
        let img = DepthImage::new(8, 8, values, mask).unwrap();
        let out = simulate_observation(&img, &params);
        assert!(!out.mask()[10]);
        assert_eq!(out.values()[10], 0.0);
    }

    #[test]
    fn constant_plane_renders_constant_pair() {
        let rig = small_rig();
        let scene = SyntheticScene::new(SceneSpec::Plane { depth: 120.0 }, rig).unwrap();
        let (left, right) = render_scene_pair(&scene).unwrap();
        for &z in left.values() {
            assert!((z - 120.0).abs() < 1e-9);
        }
        for (idx, &z) in right.values().iter().enumerate() {
            assert!(right.mask()[idx]);
            assert!((z - 120.0).abs() < 1e-9, "right depth {z} != 120");
        }
    }

    #[test]
    fn plane_disparity_matches_closed_form() {
        // For z = c the right pixel i corresponds to left coordinate i + fD/c.
        let rig = small_rig();
        let c = 150.0;
        let delta = rig.focal_baseline() / c;
        let scene = SyntheticScene::new(SceneSpec::Plane { depth: c }, rig.clone()).unwrap();
        let (_, right) = render_scene_pair(&scene).unwrap();
        // the rendered right depth at i equals the surface depth at i + delta
        for i in 0..rig.width {
            let u = i as f64 + delta;
            let expected = scene.surface.depth_at(u, 0.0);
            assert!((right.get(0, i) - expected).abs() < 1e-8);
        }
    }

    #[test]
    fn slanted_plane_matches_ray_intersection_oracle() {
        // z = a*u + c along a row: the ray equation t = a*(i + fD/t) + c has
        // the closed-form root t = ((a*i + c) + sqrt((a*i + c)^2 + 4*a*fD))/2.
        let rig = small_rig();
        let (a, c) = (0.4, 100.0);
        let scene = SyntheticScene::new(
            SceneSpec::Slanted {
                base: c,
                slope_u: a,
                slope_v: 0.0,
            },
            rig.clone(),
        )
        .unwrap();
        let (_, right) = render_scene_pair(&scene).unwrap();
        let fd = rig.focal_baseline();
        for v in 0..rig.height {
            for i in 0..rig.width {
                let s = a * i as f64 + c;
                let t = 0.5 * (s + (s * s + 4.0 * a * fd).sqrt());
                assert!(
                    (right.get(v, i) - t).abs() < 1e-8,
                    "pixel ({v},{i}): got {} want {t}",
                    right.get(v, i)
                );
            }
        }
    }

    #[test]
    fn scene_rejects_nonpositive_surface() {
        let rig = small_rig();
        assert!(SyntheticScene::new(
            SceneSpec::Slanted {
                base: 10.0,
                slope_u: -1.0,
                slope_v: 0.0,
            },
            rig
        )
        .is_err());
    }
}
