//! Left-to-right view mapping for one rectified pixel row: disparity-driven
//! Gaussian interpolation weights, the warp g(x) = W(x) x, its analytic
//! Jacobian, and the first-order linearization g(x) ~= H x + d.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_io::CameraRig;

/// Kernel tails beyond this many spreads are truncated to zero, which keeps
/// the weight and Jacobian matrices banded.
const TRUNCATION_SPREADS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// Each weight row is scaled to sum to one (row-stochastic matrix).
    ExactRowNormalized,
    /// Every row uses the same fixed constant from the config.
    ConstantC,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarpConfig {
    /// Gaussian spread of the interpolation kernel, in pixels.
    pub sigma_s: f64,
    pub normalization: NormalizationMode,
    /// Row constant used in `ConstantC` mode.
    pub c: f64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        WarpConfig {
            sigma_s: 1.0,
            normalization: NormalizationMode::ExactRowNormalized,
            c: 1.0,
        }
    }
}

impl WarpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kernel spread must be positive, got {}",
                self.sigma_s
            )));
        }
        if !(self.c > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "row constant must be positive, got {}",
                self.c
            )));
        }
        Ok(())
    }
}

/// Horizontal pixel offset between a depth sample's projections in the two
/// views: delta = f*D / x.
pub fn disparity(x: f64, rig: &CameraRig) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::OutOfDomain(format!(
            "disparity requires positive depth, got {x}"
        )));
    }
    Ok(rig.focal_baseline() / x)
}

/// Interpolation weights of one row warp. Rows whose unnormalized weights all
/// truncate to zero (no left pixel projects nearby) are flagged uncovered.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    w: DMatrix<f64>,
    covered: Vec<bool>,
}

impl WeightMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn covered(&self) -> &[bool] {
        &self.covered
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.w * x
    }
}

/// First-order model of the warp around an expansion row x0:
/// g(x) ~= H x + d, with d = g(x0) - H x0.
#[derive(Debug, Clone)]
pub struct LinearizedWarp {
    pub h: DMatrix<f64>,
    pub d: DVector<f64>,
    pub x0: DVector<f64>,
    /// Right pixels with no interpolation support at x0.
    pub covered: Vec<bool>,
}

impl LinearizedWarp {
    /// Evaluates the affine model H x + d.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x + &self.d
    }
}

fn check_positive_row(x: &DVector<f64>) -> Result<()> {
    if let Some(bad) = x.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::OutOfDomain(format!(
            "warp requires strictly positive depths, found {bad}"
        )));
    }
    Ok(())
}

/// Unnormalized kernel values e_ij = exp(-(j - fD/x_j - i)^2 / sigma_s^2)
/// with banded truncation, plus each row's sum.
fn kernel_rows(x: &DVector<f64>, rig: &CameraRig, cfg: &WarpConfig) -> (DMatrix<f64>, Vec<f64>) {
    let n = x.len();
    let fd = rig.focal_baseline();
    let sigma2 = cfg.sigma_s * cfg.sigma_s;
    let cutoff = TRUNCATION_SPREADS * cfg.sigma_s;
    // projected position of each left pixel
    let proj: Vec<f64> = (0..n).map(|j| j as f64 - fd / x[j]).collect();
    let mut e = DMatrix::zeros(n, n);
    let mut sums = vec![0.0; n];
    for j in 0..n {
        let lo = (proj[j] - cutoff).ceil().max(0.0) as usize;
        let hi = (proj[j] + cutoff).floor().min((n - 1) as f64);
        if hi < 0.0 {
            continue;
        }
        for i in lo..=(hi as usize) {
            let t = proj[j] - i as f64;
            let val = (-t * t / sigma2).exp();
            e[(i, j)] = val;
            sums[i] += val;
        }
    }
    (e, sums)
}

/// Per-row scale constants under the config's normalization rule, evaluated
/// at the given row. Uncovered rows get zero.
fn row_constants(x: &DVector<f64>, rig: &CameraRig, cfg: &WarpConfig) -> (DMatrix<f64>, Vec<f64>) {
    let (e, sums) = kernel_rows(x, rig, cfg);
    let consts = sums
        .iter()
        .map(|&s| match cfg.normalization {
            NormalizationMode::ExactRowNormalized => {
                if s > 0.0 {
                    1.0 / s
                } else {
                    0.0
                }
            }
            NormalizationMode::ConstantC => cfg.c,
        })
        .collect();
    (e, consts)
}

/// Weight matrix W(x) with w_ij = C_i * exp(-(j - fD/x_j - i)^2 / sigma_s^2).
pub fn interpolation_weights(
    x: &DVector<f64>,
    rig: &CameraRig,
    cfg: &WarpConfig,
) -> Result<WeightMatrix> {
    check_positive_row(x)?;
    cfg.validate()?;
    let n = x.len();
    let (e, sums) = kernel_rows(x, rig, cfg);
    let covered: Vec<bool> = sums.iter().map(|&s| s > 0.0).collect();
    let mut w = e;
    for i in 0..n {
        let c_i = match cfg.normalization {
            NormalizationMode::ExactRowNormalized => {
                if covered[i] {
                    1.0 / sums[i]
                } else {
                    0.0
                }
            }
            NormalizationMode::ConstantC => cfg.c,
        };
        for j in 0..n {
            w[(i, j)] *= c_i;
        }
    }
    Ok(WeightMatrix { w, covered })
}

/// The row warp g(x) = W(x) x.
pub fn apply_warp(x: &DVector<f64>, rig: &CameraRig, cfg: &WarpConfig) -> Result<DVector<f64>> {
    Ok(interpolation_weights(x, rig, cfg)?.apply(x))
}

/// Warp with the row constants frozen to the supplied values instead of the
/// config rule. This is the map the Jacobian differentiates: the constants
/// are treated as independent of x.
pub fn apply_warp_frozen(
    x: &DVector<f64>,
    constants: &[f64],
    rig: &CameraRig,
    cfg: &WarpConfig,
) -> Result<DVector<f64>> {
    check_positive_row(x)?;
    if constants.len() != x.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} constants for a row of {}",
            constants.len(),
            x.len()
        )));
    }
    let (e, _) = kernel_rows(x, rig, cfg);
    let n = x.len();
    let mut out = DVector::zeros(n);
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += e[(i, j)] * x[j];
        }
        out[i] = constants[i] * acc;
    }
    Ok(out)
}

/// Row constants the linearization freezes at x0: the normalization value
/// computed from x0 in exact mode, or the config constant.
pub fn frozen_row_constants(
    x0: &DVector<f64>,
    rig: &CameraRig,
    cfg: &WarpConfig,
) -> Result<Vec<f64>> {
    check_positive_row(x0)?;
    cfg.validate()?;
    Ok(row_constants(x0, rig, cfg).1)
}

/// Right pixels whose kernel window is sampled on both sides at x0. Pixels
/// near the coverage edge keep one-sided support whose mass shifts steeply
/// with x, so linearized right-view terms are only trustworthy where the
/// window [i - 4s, i + 4s] lies entirely inside the projected span.
pub fn full_support(x0: &DVector<f64>, rig: &CameraRig, cfg: &WarpConfig) -> Result<Vec<bool>> {
    check_positive_row(x0)?;
    cfg.validate()?;
    let n = x0.len();
    let fd = rig.focal_baseline();
    let cutoff = TRUNCATION_SPREADS * cfg.sigma_s;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for j in 0..n {
        let p = j as f64 - fd / x0[j];
        lo = lo.min(p);
        hi = hi.max(p);
    }
    Ok((0..n)
        .map(|i| i as f64 - cutoff >= lo && i as f64 + cutoff <= hi)
        .collect())
}

/// Analytic Jacobian H of the frozen-constant warp at x0:
/// H_ij = w_ij + x0_j * w_ij * (-2 (j - fD/x0_j - i) / sigma_s^2) * (fD / x0_j^2).
pub fn warp_jacobian(x0: &DVector<f64>, rig: &CameraRig, cfg: &WarpConfig) -> Result<DMatrix<f64>> {
    check_positive_row(x0)?;
    cfg.validate()?;
    let n = x0.len();
    let fd = rig.focal_baseline();
    let sigma2 = cfg.sigma_s * cfg.sigma_s;
    let (e, consts) = row_constants(x0, rig, cfg);
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        let c_i = consts[i];
        if c_i == 0.0 {
            continue;
        }
        for j in 0..n {
            let w_ij = c_i * e[(i, j)];
            if w_ij == 0.0 {
                continue;
            }
            let t = j as f64 - fd / x0[j] - i as f64;
            h[(i, j)] = w_ij + x0[j] * w_ij * (-2.0 * t / sigma2) * (fd / (x0[j] * x0[j]));
        }
    }
    Ok(h)
}

/// First-order expansion of the warp at x0.
pub fn linearize(x0: &DVector<f64>, rig: &CameraRig, cfg: &WarpConfig) -> Result<LinearizedWarp> {
    let h = warp_jacobian(x0, rig, cfg)?;
    let (e, consts) = row_constants(x0, rig, cfg);
    let n = x0.len();
    let mut g0 = DVector::zeros(n);
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += e[(i, j)] * x0[j];
        }
        g0[i] = consts[i] * acc;
    }
    let covered: Vec<bool> = (0..n).map(|i| e.row(i).iter().any(|&v| v > 0.0)).collect();
    let d = &g0 - &h * x0;
    Ok(LinearizedWarp {
        h,
        d,
        x0: x0.clone(),
        covered,
    })
}
