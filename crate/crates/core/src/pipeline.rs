//! Row-by-row enhancement of a rectified depth-image pair: rolling windows
//! feed precision estimation and metric learning, each row is solved as a MAP
//! problem, and the right view is reconstructed through the warp.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    build_laplacian, compute_features, learn_metric, GraphConfig, GraphLaplacian, MetricMatrix,
    TrainingRow, FEATURE_DIM,
};
use crate::noise_model::{affine_approx_normalized, estimate_precision_windowed, PrecisionEstimate};
use crate::scene_io::{CameraRig, DepthImage, RunConfig};
use crate::solver::{fgm_solve, RowContext, SolverConfig};
use crate::warp::{full_support, interpolation_weights, linearize, NormalizationMode, WarpConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Rows fed to metric learning; also the refresh period.
    pub metric_window: usize,
    /// Residual rows kept for precision estimation.
    pub precision_window: usize,
    /// Outer relinearization passes per row.
    pub pass_count: usize,
    /// Prior weights on the left/right Laplacian terms.
    pub lambda_l: f64,
    pub lambda_r: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            metric_window: 10,
            precision_window: 30,
            pass_count: 2,
            lambda_l: 1.0,
            lambda_r: 1.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.metric_window == 0 || self.precision_window == 0 {
            return Err(Error::InvalidArgument(
                "window lengths must be at least 1".into(),
            ));
        }
        if self.pass_count == 0 {
            return Err(Error::InvalidArgument(
                "at least one relinearization pass is required".into(),
            ));
        }
        if !(self.lambda_l >= 0.0 && self.lambda_r >= 0.0) {
            return Err(Error::InvalidArgument(
                "prior weights must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Everything a row solve draws from and feeds back into.
#[derive(Debug, Clone)]
pub struct EnhancementState {
    enhanced_left: Vec<DVector<f64>>,
    enhanced_right: Vec<DVector<f64>>,
    features_left: VecDeque<nalgebra::DMatrix<f64>>,
    features_right: VecDeque<nalgebra::DMatrix<f64>>,
    residuals_left: VecDeque<DVector<f64>>,
    residuals_right: VecDeque<DVector<f64>>,
    metric_left: MetricMatrix,
    metric_right: MetricMatrix,
    rows_since_refresh: usize,
}

impl EnhancementState {
    pub fn new() -> Self {
        EnhancementState {
            enhanced_left: Vec::new(),
            enhanced_right: Vec::new(),
            features_left: VecDeque::new(),
            features_right: VecDeque::new(),
            residuals_left: VecDeque::new(),
            residuals_right: VecDeque::new(),
            metric_left: MetricMatrix::identity(FEATURE_DIM),
            metric_right: MetricMatrix::identity(FEATURE_DIM),
            rows_since_refresh: 0,
        }
    }

    pub fn enhanced_left(&self) -> &[DVector<f64>] {
        &self.enhanced_left
    }

    pub fn enhanced_right(&self) -> &[DVector<f64>] {
        &self.enhanced_right
    }

    pub fn residual_window_len(&self) -> (usize, usize) {
        (self.residuals_left.len(), self.residuals_right.len())
    }

    pub fn rows_since_refresh(&self) -> usize {
        self.rows_since_refresh
    }

    fn precision(
        &self,
        residuals: &VecDeque<DVector<f64>>,
        n: usize,
        sigma_n2: f64,
    ) -> Result<PrecisionEstimate> {
        if residuals.is_empty() {
            Ok(PrecisionEstimate::isotropic(n, sigma_n2))
        } else {
            let rows: Vec<DVector<f64>> = residuals.iter().cloned().collect();
            estimate_precision_windowed(&rows, sigma_n2)
        }
    }
}

impl Default for EnhancementState {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-row diagnostics surfaced in the run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowDiagnostics {
    pub row: usize,
    pub objective_initial: f64,
    pub objective_final: f64,
    pub solver_iterations: usize,
    pub passes: usize,
    pub uncovered_pixels: usize,
    pub fallback: bool,
    pub metric_refreshed: bool,
    pub skipped_invalid: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnhancementReport {
    pub rows: Vec<RowDiagnostics>,
    pub fallback_rows: usize,
    pub metric_refreshes: usize,
}

/// Parameters one row solve needs, bundled from the run config.
#[derive(Debug, Clone)]
pub struct EnhanceParams {
    pub warp: WarpConfig,
    pub graph: GraphConfig,
    pub solver: SolverConfig,
    pub pipeline: PipelineConfig,
    pub qstep: f64,
    pub sigma_n2: f64,
    pub depth_range: (f64, f64),
    /// Ablation: drop the right view's likelihood and prior.
    pub single_view: bool,
}

impl EnhanceParams {
    pub fn from_config(cfg: &RunConfig) -> Self {
        EnhanceParams {
            warp: cfg.warp.clone(),
            graph: cfg.graph.clone(),
            solver: cfg.solver.clone(),
            pipeline: cfg.pipeline.clone(),
            qstep: cfg.quantization_step(),
            sigma_n2: cfg.formation.sigma_n2,
            depth_range: (cfg.depth_range[0], cfg.depth_range[1]),
            single_view: false,
        }
    }

    /// Noise variance floored away from zero so density exponents stay
    /// finite on noiseless input.
    fn effective_sigma_n2(&self) -> f64 {
        self.sigma_n2.max(self.qstep * self.qstep / 12.0).max(1e-9)
    }
}

struct RowSolve {
    x_left: DVector<f64>,
    x_right: DVector<f64>,
    diagnostics: RowDiagnostics,
    features_left: nalgebra::DMatrix<f64>,
    features_right: nalgebra::DMatrix<f64>,
}

/// Enhances one row pair. `state` supplies history and receives the enhanced
/// rows, their features, and the new residuals.
pub fn enhance_row_pair(
    row_index: usize,
    y_l: &DVector<f64>,
    y_r: &DVector<f64>,
    state: &mut EnhancementState,
    rig: &CameraRig,
    params: &EnhanceParams,
) -> Result<(DVector<f64>, DVector<f64>, RowDiagnostics)> {
    let solved = solve_row(row_index, y_l, y_r, state, rig, params)?;
    let RowSolve {
        x_left,
        x_right,
        mut diagnostics,
        features_left,
        features_right,
    } = solved;

    state.enhanced_left.push(x_left.clone());
    state.enhanced_right.push(x_right.clone());
    state.features_left.push_back(features_left);
    state.features_right.push_back(features_right);
    while state.features_left.len() > params.pipeline.metric_window {
        state.features_left.pop_front();
        state.features_right.pop_front();
    }
    state.residuals_left.push_back(y_l - &x_left);
    state.residuals_right.push_back(y_r - &x_right);
    while state.residuals_left.len() > params.pipeline.precision_window {
        state.residuals_left.pop_front();
    }
    while state.residuals_right.len() > params.pipeline.precision_window {
        state.residuals_right.pop_front();
    }

    state.rows_since_refresh += 1;
    if state.rows_since_refresh == params.pipeline.metric_window {
        refresh_metrics(state, params)?;
        state.rows_since_refresh = 0;
        diagnostics.metric_refreshed = true;
    }
    Ok((x_left, x_right, diagnostics))
}

fn refresh_metrics(state: &mut EnhancementState, params: &EnhanceParams) -> Result<()> {
    let window = params.pipeline.metric_window;
    let count = state.features_left.len().min(window);
    let total = state.enhanced_left.len();
    let make_rows = |features: &VecDeque<nalgebra::DMatrix<f64>>,
                     signals: &[DVector<f64>]|
     -> Vec<TrainingRow> {
        features
            .iter()
            .rev()
            .take(count)
            .zip(signals.iter().rev().take(count))
            .map(|(f, s)| TrainingRow {
                features: f.clone(),
                signal: s.clone(),
            })
            .collect()
    };
    debug_assert!(total >= count);
    let rows_l = make_rows(&state.features_left, &state.enhanced_left);
    let rows_r = make_rows(&state.features_right, &state.enhanced_right);
    state.metric_left = learn_metric(&rows_l, &state.metric_left, &params.graph)?.metric;
    state.metric_right = learn_metric(&rows_r, &state.metric_right, &params.graph)?.metric;
    Ok(())
}

fn previous_rows(enhanced: &[DVector<f64>]) -> Vec<DVector<f64>> {
    enhanced.iter().rev().take(2).cloned().collect()
}

fn solve_row(
    row_index: usize,
    y_l: &DVector<f64>,
    y_r: &DVector<f64>,
    state: &EnhancementState,
    rig: &CameraRig,
    params: &EnhanceParams,
) -> Result<RowSolve> {
    let n = y_l.len();
    let sigma_n2 = params.effective_sigma_n2();
    // Solver-side warp: one analytic row constant, the dense-comb limit of
    // the exact normalization. Freezing per-row constants from the noisy
    // iterate would bake its jitter into the linearized map.
    let solver_warp = WarpConfig {
        normalization: NormalizationMode::ConstantC,
        c: (std::f64::consts::PI.sqrt() * params.warp.sigma_s).recip(),
        ..params.warp.clone()
    };

    let features_left =
        compute_features(row_index, y_l, &previous_rows(&state.enhanced_left), rig, params.depth_range);
    let features_right = compute_features(
        row_index,
        y_r,
        &previous_rows(&state.enhanced_right),
        rig,
        params.depth_range,
    );
    let lap_l: GraphLaplacian =
        build_laplacian(features_left.data(), &state.metric_left, params.graph.bandwidth);
    let lap_r_full =
        build_laplacian(features_right.data(), &state.metric_right, params.graph.bandwidth);

    let est_l = state.precision(&state.residuals_left, n, sigma_n2)?;
    let est_r = state.precision(&state.residuals_right, n, sigma_n2)?;

    let mut x_current = y_l.clone();
    let mut fallback = false;
    let mut objective_initial = f64::NAN;
    let mut objective_final = f64::NAN;
    let mut iterations = 0usize;
    let mut passes = 0usize;
    let mut uncovered_pixels = 0usize;
    let mut last_covered = vec![true; n];

    for pass in 0..params.pipeline.pass_count {
        let lin = linearize(&x_current, rig, &solver_warp)?;
        // right-view terms only where the kernel window has two-sided
        // support; edge pixels extrapolate too steeply under frozen
        // normalization to inform the solve
        let supported = full_support(&x_current, rig, &solver_warp)?;
        let uncovered: Vec<bool> = supported.iter().map(|&c| !c).collect();
        uncovered_pixels = uncovered.iter().filter(|&&u| u).count();
        last_covered = lin.covered.clone();

        let lik_l = affine_approx_normalized(y_l, &x_current, &est_l, params.qstep)?;
        let g0 = lin.apply(&x_current);
        // anchor the expansion on the supported residual only
        let mut y_r_eff = y_r.clone();
        for (i, &drop) in uncovered.iter().enumerate() {
            if drop {
                y_r_eff[i] = g0[i];
            }
        }
        let mut lik_r = affine_approx_normalized(&y_r_eff, &g0, &est_r, params.qstep)?;
        for (i, &drop) in uncovered.iter().enumerate() {
            if drop {
                lik_r.a[i] = 0.0;
            }
        }
        let lap_r = lap_r_full.drop_nodes(&uncovered);

        let (lambda_r, lik_r) = if params.single_view {
            let mut flat = lik_r.clone();
            flat.a.fill(0.0);
            flat.b = 1.0;
            (0.0, flat)
        } else {
            (params.pipeline.lambda_r, lik_r)
        };

        let ctx = RowContext::new(
            y_l.clone(),
            y_r.clone(),
            lik_l,
            lik_r,
            lap_l.to_dense(),
            lap_r.to_dense(),
            &lin,
            params.pipeline.lambda_l,
            lambda_r,
        )?;
        match fgm_solve(&x_current, &ctx, &params.solver) {
            Ok(out) => {
                if pass == 0 {
                    objective_initial = out.trace.first().map(|r| r.objective).unwrap_or(f64::NAN);
                }
                objective_final = out.objective;
                iterations += out.trace.len().saturating_sub(1);
                x_current = out.x;
                passes = pass + 1;
            }
            Err(Error::InfeasibleStart(_)) => {
                // likelihood coefficients are anchored at x_current, so this
                // only fires in pathological regimes; keep the observation
                fallback = true;
                x_current = y_l.clone();
                break;
            }
            Err(e) => return Err(e),
        }
    }

    // right view through the row-stochastic warp of the enhanced left row
    let weights = interpolation_weights(
        &x_current,
        rig,
        &WarpConfig {
            normalization: crate::warp::NormalizationMode::ExactRowNormalized,
            ..params.warp.clone()
        },
    )?;
    let mut x_right = weights.apply(&x_current);
    for i in 0..n {
        if !weights.covered()[i] || !last_covered[i] {
            x_right[i] = y_r[i]; // no support: pass the observation through
        }
    }

    Ok(RowSolve {
        x_left: x_current,
        x_right,
        diagnostics: RowDiagnostics {
            row: row_index,
            objective_initial,
            objective_final,
            solver_iterations: iterations,
            passes,
            uncovered_pixels,
            fallback,
            metric_refreshed: false,
            skipped_invalid: false,
        },
        features_left: features_left.data().clone(),
        features_right: features_right.data().clone(),
    })
}

/// Fills invalid pixels with the nearest valid value in the row so the solver
/// sees a complete signal. Returns None when the row has no valid pixel.
fn fill_row(values: &[f64], mask: &[bool]) -> Option<DVector<f64>> {
    let n = values.len();
    if mask.iter().all(|&m| !m) {
        return None;
    }
    let mut out = DVector::zeros(n);
    for j in 0..n {
        if mask[j] {
            out[j] = values[j];
        } else {
            let mut found = None;
            for off in 1..n {
                if j >= off && mask[j - off] {
                    found = Some(values[j - off]);
                    break;
                }
                if j + off < n && mask[j + off] {
                    found = Some(values[j + off]);
                    break;
                }
            }
            out[j] = found.expect("row has at least one valid pixel");
        }
    }
    Some(out)
}

/// Enhances a full rectified pair, top to bottom. Invalid pixels pass through
/// untouched; fully invalid rows are skipped.
pub fn enhance_image_pair(
    left: &DepthImage,
    right: &DepthImage,
    rig: &CameraRig,
    params: &EnhanceParams,
) -> Result<(DepthImage, DepthImage, EnhancementReport)> {
    params.pipeline.validate()?;
    params.solver.validate()?;
    params.warp.validate()?;
    params.graph.validate()?;
    if !left.matches_rig(rig) || !right.matches_rig(rig) {
        return Err(Error::DimensionMismatch(format!(
            "images must match the rig dimensions {}x{}",
            rig.width, rig.height
        )));
    }

    let mut state = EnhancementState::new();
    let mut out_left_values = Vec::with_capacity(left.values().len());
    let mut out_right_values = Vec::with_capacity(right.values().len());
    let mut report = EnhancementReport {
        rows: Vec::with_capacity(rig.height),
        fallback_rows: 0,
        metric_refreshes: 0,
    };

    for row in 0..rig.height {
        let filled_l = fill_row(left.row_values(row), left.row_mask(row));
        let filled_r = fill_row(right.row_values(row), right.row_mask(row));
        let (Some(y_l), Some(y_r)) = (filled_l, filled_r) else {
            // nothing to solve on this row
            out_left_values.extend_from_slice(left.row_values(row));
            out_right_values.extend_from_slice(right.row_values(row));
            report.rows.push(RowDiagnostics {
                row,
                objective_initial: f64::NAN,
                objective_final: f64::NAN,
                solver_iterations: 0,
                passes: 0,
                uncovered_pixels: 0,
                fallback: false,
                metric_refreshed: false,
                skipped_invalid: true,
            });
            continue;
        };

        let (x_l, x_r, mut diag) =
            enhance_row_pair(row, &y_l, &y_r, &mut state, rig, params)?;
        diag.skipped_invalid = false;
        if diag.fallback {
            report.fallback_rows += 1;
        }
        if diag.metric_refreshed {
            report.metric_refreshes += 1;
        }
        for j in 0..rig.width {
            out_left_values.push(if left.row_mask(row)[j] {
                x_l[j].max(0.0)
            } else {
                left.row_values(row)[j]
            });
            out_right_values.push(if right.row_mask(row)[j] {
                x_r[j].max(0.0)
            } else {
                right.row_values(row)[j]
            });
        }
        report.rows.push(diag);
    }

    let out_left = DepthImage::new(
        rig.width,
        rig.height,
        out_left_values,
        left.mask().to_vec(),
    )?;
    let out_right = DepthImage::new(
        rig.width,
        rig.height,
        out_right_values,
        right.mask().to_vec(),
    )?;
    Ok((out_left, out_right, report))
}
