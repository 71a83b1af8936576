//! Per-row MAP objective and its minimizer: two negative-log affine
//! likelihood terms (one per view, the right one through the linearized
//! warp), two Laplacian quadratic priors, solved with Nesterov's accelerated
//! gradient method under backtracking and a positivity guard on the log
//! arguments.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise_model::AffineLikelihood;
use crate::warp::LinearizedWarp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Gradient-norm stopping threshold.
    pub grad_tol: f64,
    /// Step shrink factor in (0, 1).
    pub backtrack: f64,
    pub initial_step: f64,
    /// Relative domain margin: log arguments must stay >= margin * b.
    pub domain_margin: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 500,
            grad_tol: 1e-6,
            backtrack: 0.5,
            initial_step: 1.0,
            domain_margin: 1e-8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "backtrack factor must lie in (0, 1), got {}",
                self.backtrack
            )));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::InvalidArgument("initial step must be positive".into()));
        }
        if !(self.domain_margin > 0.0) {
            return Err(Error::InvalidArgument(
                "domain margin must be positive".into(),
            ));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::InvalidArgument(
                "gradient tolerance must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Everything one row solve needs. Laplacian slots hold positive
/// semi-definite matrices; warp products are precomputed at construction.
#[derive(Debug, Clone)]
pub struct RowContext {
    pub y_l: DVector<f64>,
    pub y_r: DVector<f64>,
    pub lik_l: AffineLikelihood,
    pub lik_r: AffineLikelihood,
    pub lap_l: DMatrix<f64>,
    pub lap_r: DMatrix<f64>,
    pub lambda_l: f64,
    pub lambda_r: f64,
    h: DMatrix<f64>,
    d: DVector<f64>,
    // precomputed right-prior pieces
    ht_lr_h: DMatrix<f64>,
    ht_lr_d: DVector<f64>,
    d_lr_d: f64,
    ht_a_r: DVector<f64>,
}

impl RowContext {
    pub fn new(
        y_l: DVector<f64>,
        y_r: DVector<f64>,
        lik_l: AffineLikelihood,
        lik_r: AffineLikelihood,
        lap_l: DMatrix<f64>,
        lap_r: DMatrix<f64>,
        lin: &LinearizedWarp,
        lambda_l: f64,
        lambda_r: f64,
    ) -> Result<Self> {
        let n = y_l.len();
        let same = y_r.len() == n
            && lik_l.a.len() == n
            && lik_r.a.len() == n
            && lap_l.nrows() == n
            && lap_l.ncols() == n
            && lap_r.nrows() == n
            && lap_r.ncols() == n
            && lin.h.nrows() == n
            && lin.h.ncols() == n
            && lin.d.len() == n;
        if !same {
            return Err(Error::DimensionMismatch(
                "row context pieces disagree on the row length".into(),
            ));
        }
        if !(lambda_l >= 0.0 && lambda_r >= 0.0) {
            return Err(Error::InvalidArgument(
                "prior weights must be nonnegative".into(),
            ));
        }
        let lr_h = &lap_r * &lin.h;
        let ht_lr_h = lin.h.transpose() * &lr_h;
        let ht_lr_d = lin.h.transpose() * (&lap_r * &lin.d);
        let d_lr_d = (&lap_r * &lin.d).dot(&lin.d);
        let ht_a_r = lin.h.transpose() * &lik_r.a;
        Ok(RowContext {
            y_l,
            y_r,
            lik_l,
            lik_r,
            lap_l,
            lap_r,
            lambda_l,
            lambda_r,
            h: lin.h.clone(),
            d: lin.d.clone(),
            ht_lr_h,
            ht_lr_d,
            d_lr_d,
            ht_a_r,
        })
    }

    pub fn len(&self) -> usize {
        self.y_l.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_l.is_empty()
    }

    /// Log arguments of the two likelihood terms at x.
    pub fn denominators(&self, x: &DVector<f64>) -> (f64, f64) {
        let den_l = self.lik_l.a.dot(&self.y_l) - self.lik_l.a.dot(x) + self.lik_l.b;
        let den_r =
            self.lik_r.a.dot(&self.y_r) - self.ht_a_r.dot(x) - self.lik_r.a.dot(&self.d)
                + self.lik_r.b;
        (den_l, den_r)
    }

    /// -ln(a_l'(y_l - x) + b_l) - ln(a_r'(y_r - Hx - d) + b_r)
    /// + lambda_l x'L_l x + lambda_r ((Hx + d)' L_r (Hx + d)).
    pub fn objective(&self, x: &DVector<f64>) -> Result<f64> {
        let (den_l, den_r) = self.denominators(x);
        if !(den_l > 0.0 && den_r > 0.0) {
            return Err(Error::OutOfDomain(format!(
                "log arguments ({den_l}, {den_r}) must be positive"
            )));
        }
        let prior_l = if self.lambda_l != 0.0 {
            self.lambda_l * (&self.lap_l * x).dot(x)
        } else {
            0.0
        };
        let prior_r = if self.lambda_r != 0.0 {
            self.lambda_r
                * ((&self.ht_lr_h * x).dot(x) + 2.0 * self.ht_lr_d.dot(x) + self.d_lr_d)
        } else {
            0.0
        };
        Ok(-den_l.ln() - den_r.ln() + prior_l + prior_r)
    }

    /// a_l/den_l + H'a_r/den_r + 2 lambda_l L_l x + 2 lambda_r (H'L_r H x + H'L_r d).
    pub fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (den_l, den_r) = self.denominators(x);
        if !(den_l > 0.0 && den_r > 0.0) {
            return Err(Error::OutOfDomain(format!(
                "log arguments ({den_l}, {den_r}) must be positive"
            )));
        }
        let mut g = &self.lik_l.a / den_l + &self.ht_a_r / den_r;
        if self.lambda_l != 0.0 {
            g += (&self.lap_l * x) * (2.0 * self.lambda_l);
        }
        if self.lambda_r != 0.0 {
            g += (&self.ht_lr_h * x + &self.ht_lr_d) * (2.0 * self.lambda_r);
        }
        Ok(g)
    }

    /// Warp model H x + d used for the right-view reconstruction.
    pub fn warp_model(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x + &self.d
    }

    fn feasible(&self, x: &DVector<f64>, margin: f64) -> bool {
        let (den_l, den_r) = self.denominators(x);
        den_l >= margin * self.lik_l.b && den_r >= margin * self.lik_r.b
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct FgmOutcome {
    pub x: DVector<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub trace: Vec<IterationRecord>,
}

/// Writes the per-iteration log as CSV (iter, objective, grad_norm, step).
pub fn write_trace_csv(trace: &[IterationRecord], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "iter,objective,grad_norm,step")?;
    for rec in trace {
        writeln!(
            w,
            "{},{},{},{}",
            rec.iter, rec.objective, rec.grad_norm, rec.step
        )?;
    }
    Ok(())
}

/// Nesterov accelerated descent with backtracking on a smooth objective whose
/// domain is signalled through `None`. Momentum restarts whenever the
/// objective rises or the look-ahead point leaves the domain, so the returned
/// objective never exceeds the starting one.
pub fn minimize<F, G>(f: F, g: G, x0: &DVector<f64>, cfg: &SolverConfig) -> Result<FgmOutcome>
where
    F: Fn(&DVector<f64>) -> Option<f64>,
    G: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    cfg.validate()?;
    let mut x = x0.clone();
    let mut fx = f(&x).ok_or_else(|| {
        Error::InfeasibleStart("initial point is outside the objective domain".into())
    })?;
    let g0 = g(&x).expect("gradient defined wherever the objective is");
    let mut trace = vec![IterationRecord {
        iter: 0,
        objective: fx,
        grad_norm: g0.norm(),
        step: cfg.initial_step,
    }];
    if g0.norm() <= cfg.grad_tol {
        return Ok(FgmOutcome {
            objective: fx,
            grad_norm: g0.norm(),
            converged: true,
            trace,
            x,
        });
    }

    let mut y = x.clone();
    let mut fy = fx;
    let mut gy = g0;
    let mut t = 1.0f64;
    let mut step = cfg.initial_step;
    let mut best_x = x.clone();
    let mut best_f = fx;
    let mut converged = false;
    let mut grad_norm = f64::NAN;

    for iter in 1..=cfg.max_iters {
        // try to grow the step back toward the configured start
        step = (step / cfg.backtrack).min(cfg.initial_step);
        let gy_norm_sq = gy.norm_squared();
        let noise_floor = 8.0 * f64::EPSILON * fy.abs().max(f64::MIN_POSITIVE);
        let mut x_new = None;
        let mut f_new = f64::NAN;
        for _ in 0..60 {
            // a required decrease below the rounding floor of f would accept
            // null steps on exact equality; leave it to the gradient gate
            if 0.5 * step * gy_norm_sq <= noise_floor {
                break;
            }
            let cand = &y - &gy * step;
            match f(&cand) {
                Some(val) if val <= fy - 0.5 * step * gy_norm_sq => {
                    f_new = val;
                    x_new = Some(cand);
                    break;
                }
                _ => step *= cfg.backtrack,
            }
            if step <= f64::MIN_POSITIVE {
                break;
            }
        }
        if x_new.is_none() {
            // Near the optimum f-differences drown in round-off; gate on
            // strict gradient-norm contraction instead, still requiring f not
            // to rise beyond floating-point noise.
            let gy_norm = gy_norm_sq.sqrt();
            step = cfg.initial_step;
            for _ in 0..60 {
                let cand = &y - &gy * step;
                if let Some(val) = f(&cand) {
                    if val <= fy + noise_floor {
                        if let Some(gc) = g(&cand) {
                            if gc.norm() < gy_norm {
                                f_new = val;
                                x_new = Some(cand);
                                break;
                            }
                        }
                    }
                }
                step *= cfg.backtrack;
                if step <= f64::MIN_POSITIVE {
                    break;
                }
            }
        }
        let Some(x_new) = x_new else {
            // no admissible step: stop at the best point seen
            break;
        };

        let gx = g(&x_new).expect("gradient defined wherever the objective is");
        grad_norm = gx.norm();
        trace.push(IterationRecord {
            iter,
            objective: f_new,
            grad_norm,
            step,
        });

        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        let y_cand = &x_new + (&x_new - &x) * momentum;

        // keep momentum only while the objective measurably decreases; at
        // the round-off floor acceleration just amplifies noise
        let rose = !(fx - f_new > noise_floor);
        x = x_new;
        fx = f_new;
        if fx < best_f {
            best_f = fx;
            best_x = x.clone();
        }
        if grad_norm <= cfg.grad_tol {
            converged = true;
            break;
        }

        match f(&y_cand) {
            Some(val) if !rose => {
                y = y_cand;
                fy = val;
                t = t_next;
            }
            _ => {
                // restart: momentum rose the objective or left the domain
                y = x.clone();
                fy = fx;
                t = 1.0;
            }
        }
        gy = g(&y).expect("gradient defined wherever the objective is");
    }

    if fx <= best_f {
        best_f = fx;
        best_x = x;
    }
    Ok(FgmOutcome {
        x: best_x,
        objective: best_f,
        grad_norm,
        converged,
        trace,
    })
}

/// Minimizes the row objective from a feasible start. Trial steps that push a
/// log argument below `domain_margin * b` are rejected by the line search.
pub fn fgm_solve(x_init: &DVector<f64>, ctx: &RowContext, cfg: &SolverConfig) -> Result<FgmOutcome> {
    if x_init.len() != ctx.len() {
        return Err(Error::DimensionMismatch(format!(
            "start of {} for a row of {}",
            x_init.len(),
            ctx.len()
        )));
    }
    if !ctx.feasible(x_init, cfg.domain_margin) {
        return Err(Error::InfeasibleStart(
            "initial point violates the log-domain margin; re-anchor the likelihood coefficients"
                .into(),
        ));
    }
    let f = |x: &DVector<f64>| {
        if ctx.feasible(x, cfg.domain_margin) {
            ctx.objective(x).ok()
        } else {
            None
        }
    };
    let g = |x: &DVector<f64>| {
        if ctx.feasible(x, cfg.domain_margin) {
            ctx.gradient(x).ok()
        } else {
            None
        }
    };
    minimize(f, g, x_init, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise_model::{affine_approx, PrecisionEstimate};
    use crate::warp::LinearizedWarp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat_likelihood(n: usize, qstep: f64) -> AffineLikelihood {
        AffineLikelihood {
            a: DVector::zeros(n),
            b: 1.0,
            qstep,
            n0: DVector::zeros(n),
        }
    }

    fn identity_warp(n: usize) -> LinearizedWarp {
        LinearizedWarp {
            h: DMatrix::identity(n, n),
            d: DVector::zeros(n),
            x0: DVector::zeros(n),
            covered: vec![true; n],
        }
    }

    fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose()
    }

    fn random_spd_conditioned(n: usize, max_eig: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        // random orthogonal basis via QR of a Gaussian-ish matrix
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let qr = a.qr();
        let q = qr.q();
        let eigs = DVector::from_fn(n, |i, _| {
            1.0 + (max_eig - 1.0) * i as f64 / (n - 1) as f64
        });
        &q * DMatrix::from_diagonal(&eigs) * q.transpose()
    }

    fn full_context(n: usize, rng: &mut ChaCha8Rng) -> (RowContext, DVector<f64>) {
        let y_l = DVector::from_fn(n, |_, _| rng.gen_range(90.0..110.0));
        let y_r = DVector::from_fn(n, |_, _| rng.gen_range(90.0..110.0));
        let x0 = &y_l + DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let est = PrecisionEstimate::isotropic(n, 25.0);
        let lik_l = affine_approx(&y_l, &x0, &est, 0.5).unwrap();
        let mut h = DMatrix::identity(n, n);
        for i in 0..n - 1 {
            h[(i, i + 1)] = 0.1;
            h[(i, i)] = 0.9;
        }
        let d = DVector::from_fn(n, |_, _| rng.gen_range(-0.05..0.05));
        let g0 = &h * &x0 + &d;
        let lik_r = affine_approx(&y_r, &g0, &est, 0.5).unwrap();
        let lin = LinearizedWarp {
            h,
            d,
            x0: x0.clone(),
            covered: vec![true; n],
        };
        let lap_l = random_psd(n, rng) * 1e-4;
        let lap_r = random_psd(n, rng) * 1e-4;
        let ctx = RowContext::new(y_l, y_r, lik_l, lik_r, lap_l, lap_r, &lin, 1.0, 1.0).unwrap();
        (ctx, x0)
    }

    #[test]
    fn degenerate_terms_give_zero_objective() {
        let n = 6;
        let ctx = RowContext::new(
            DVector::zeros(n),
            DVector::zeros(n),
            flat_likelihood(n, 0.5),
            flat_likelihood(n, 0.5),
            DMatrix::zeros(n, n),
            DMatrix::zeros(n, n),
            &identity_warp(n),
            0.0,
            0.0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..5 {
            let x = DVector::from_fn(n, |_, _| rng.gen_range(-10.0..10.0));
            assert_eq!(ctx.objective(&x).unwrap(), 0.0);
        }
    }

    #[test]
    fn constant_row_sits_in_laplacian_null_space() {
        // banded Laplacian of an unweighted path graph
        let n = 8;
        let mut lap = DMatrix::zeros(n, n);
        for i in 0..n - 1 {
            lap[(i, i)] += 1.0;
            lap[(i + 1, i + 1)] += 1.0;
            lap[(i, i + 1)] -= 1.0;
            lap[(i + 1, i)] -= 1.0;
        }
        let ctx = RowContext::new(
            DVector::zeros(n),
            DVector::zeros(n),
            flat_likelihood(n, 0.5),
            flat_likelihood(n, 0.5),
            lap,
            DMatrix::zeros(n, n),
            &identity_warp(n),
            1.0,
            0.0,
        )
        .unwrap();
        let x = DVector::from_element(n, 4.2);
        assert!(ctx.objective(&x).unwrap().abs() < 1e-12);
        assert!(ctx.gradient(&x).unwrap().amax() < 1e-12);
    }

    #[test]
    fn objective_matches_term_by_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let n = 10;
        let (ctx, x0) = full_context(n, &mut rng);
        for _ in 0..10 {
            let x = &x0 + DVector::from_fn(n, |_, _| rng.gen_range(-0.2..0.2));
            // independent evaluation straight from the definition, with the
            // right prior routed through the warp output
            let den_l = ctx.lik_l.a.dot(&(&ctx.y_l - &x)) + ctx.lik_l.b;
            let gx = ctx.warp_model(&x);
            let den_r = ctx.lik_r.a.dot(&(&ctx.y_r - &gx)) + ctx.lik_r.b;
            let expected = -den_l.ln() - den_r.ln()
                + ctx.lambda_l * (&ctx.lap_l * &x).dot(&x)
                + ctx.lambda_r * (&ctx.lap_r * &gx).dot(&gx);
            let got = ctx.objective(&x).unwrap();
            assert!(
                (got - expected).abs() <= 1e-9 * expected.abs().max(1.0),
                "objective {got} vs term sum {expected}"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let n = 8;
        let (ctx, x0) = full_context(n, &mut rng);
        for _ in 0..32 {
            let x = &x0 + DVector::from_fn(n, |_, _| rng.gen_range(-0.3..0.3));
            if ctx.objective(&x).is_err() {
                continue;
            }
            let g = ctx.gradient(&x).unwrap();
            let mut fd = DVector::zeros(n);
            for j in 0..n {
                let h = 1e-6 * x[j].abs().max(1.0);
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                fd[j] = (ctx.objective(&xp).unwrap() - ctx.objective(&xm).unwrap()) / (2.0 * h);
            }
            let rel = (&g - &fd).norm() / g.norm().max(1e-12);
            assert!(rel <= 1e-5, "gradient FD mismatch: {rel}");
        }
    }

    #[test]
    fn quadratic_context_has_linear_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let n = 8;
        let lap_l = random_psd(n, &mut rng);
        let lap_r = random_psd(n, &mut rng);
        let lin = identity_warp(n);
        let ctx = RowContext::new(
            DVector::zeros(n),
            DVector::zeros(n),
            flat_likelihood(n, 0.5),
            flat_likelihood(n, 0.5),
            lap_l.clone(),
            lap_r.clone(),
            &lin,
            0.7,
            1.3,
        )
        .unwrap();
        // difference of gradients equals the Hessian-vector product
        let hess = (&lap_l * (2.0 * 0.7)) + (&lap_r * (2.0 * 1.3));
        for _ in 0..5 {
            let x1 = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
            let x2 = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
            let dg = ctx.gradient(&x1).unwrap() - ctx.gradient(&x2).unwrap();
            let expected = &hess * (&x1 - &x2);
            assert!((dg - expected).amax() < 1e-9);
        }
    }

    #[test]
    fn pure_quadratic_reaches_origin() {
        let n = 16;
        let ctx = RowContext::new(
            DVector::zeros(n),
            DVector::zeros(n),
            flat_likelihood(n, 0.5),
            flat_likelihood(n, 0.5),
            DMatrix::identity(n, n),
            DMatrix::zeros(n, n),
            &identity_warp(n),
            1.0,
            0.0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
        let cfg = SolverConfig {
            grad_tol: 1e-10,
            ..SolverConfig::default()
        };
        let out = fgm_solve(&x0, &ctx, &cfg).unwrap();
        assert!(out.converged);
        assert!(out.x.amax() < 1e-6, "minimizer {:?}", out.x.amax());
    }

    #[test]
    fn strongly_convex_quadratic_matches_linear_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        for _ in 0..5 {
            let n = 24;
            let lap_l = random_spd_conditioned(n, 40.0, &mut rng);
            let lap_r = random_spd_conditioned(n, 10.0, &mut rng);
            let d = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let lin = LinearizedWarp {
                h: DMatrix::identity(n, n),
                d: d.clone(),
                x0: DVector::zeros(n),
                covered: vec![true; n],
            };
            let ctx = RowContext::new(
                DVector::zeros(n),
                DVector::zeros(n),
                flat_likelihood(n, 0.5),
                flat_likelihood(n, 0.5),
                lap_l.clone(),
                lap_r.clone(),
                &lin,
                1.0,
                1.0,
            )
            .unwrap();
            // objective = x'(L_l + L_r)x + 2 d'L_r x + const
            let a = &lap_l + &lap_r;
            let rhs = -(&lap_r * &d);
            let expected = a.clone().lu().solve(&rhs).unwrap();
            let cfg = SolverConfig {
                max_iters: 500,
                grad_tol: 1e-8,
                ..SolverConfig::default()
            };
            let out = fgm_solve(&DVector::zeros(n), &ctx, &cfg).unwrap();
            assert!(out.converged, "did not reach grad_tol");
            let rel = (&out.x - &expected).norm() / expected.norm().max(1e-12);
            assert!(rel < 1e-6, "relative error {rel}");
        }
    }

    #[test]
    fn map_instance_never_ends_above_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        for _ in 0..10 {
            let n = 12;
            let (ctx, x0) = full_context(n, &mut rng);
            let cfg = SolverConfig::default();
            let f0 = ctx.objective(&x0).unwrap();
            let out = fgm_solve(&x0, &ctx, &cfg).unwrap();
            assert!(out.objective <= f0 + 1e-12);
            assert!(ctx.objective(&out.x).unwrap() <= f0 + 1e-12);
        }
    }

    #[test]
    fn objective_is_convex_along_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        let n = 10;
        let (ctx, x0) = full_context(n, &mut rng);
        let mut checked = 0;
        while checked < 100 {
            let xa = &x0 + DVector::from_fn(n, |_, _| rng.gen_range(-0.3..0.3));
            let xb = &x0 + DVector::from_fn(n, |_, _| rng.gen_range(-0.3..0.3));
            let (Ok(fa), Ok(fb)) = (ctx.objective(&xa), ctx.objective(&xb)) else {
                continue;
            };
            for t in [0.25, 0.5, 0.75] {
                let xm = &xa * t + &xb * (1.0 - t);
                let fm = ctx.objective(&xm).unwrap();
                assert!(
                    fm <= t * fa + (1.0 - t) * fb + 1e-9,
                    "convexity violated: {fm} > {}",
                    t * fa + (1.0 - t) * fb
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn solver_never_leaves_the_guarded_domain() {
        use std::cell::Cell;
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        let n = 12;
        let (ctx, x0) = full_context(n, &mut rng);
        let cfg = SolverConfig::default();
        let violations = Cell::new(0usize);
        let f = |x: &DVector<f64>| {
            if ctx.feasible(x, cfg.domain_margin) {
                ctx.objective(x).ok()
            } else {
                None
            }
        };
        let g = |x: &DVector<f64>| {
            if !ctx.feasible(x, cfg.domain_margin) {
                violations.set(violations.get() + 1);
            }
            ctx.gradient(x).ok()
        };
        let out = minimize(f, g, &x0, &cfg).unwrap();
        assert_eq!(
            violations.get(),
            0,
            "gradient was queried outside the margin"
        );
        assert!(ctx.feasible(&out.x, cfg.domain_margin));
    }

    #[test]
    fn scaling_the_whole_objective_keeps_the_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let n = 10;
        let (ctx, x0) = full_context(n, &mut rng);
        let cfg = SolverConfig {
            grad_tol: 1e-10,
            max_iters: 2000,
            ..SolverConfig::default()
        };
        let base = fgm_solve(&x0, &ctx, &cfg).unwrap();
        let c = 7.5;
        let cfg_scaled = SolverConfig {
            grad_tol: cfg.grad_tol * c,
            ..cfg.clone()
        };
        let f = |x: &DVector<f64>| {
            if ctx.feasible(x, cfg.domain_margin) {
                ctx.objective(x).ok().map(|v| c * v)
            } else {
                None
            }
        };
        let g = |x: &DVector<f64>| {
            if ctx.feasible(x, cfg.domain_margin) {
                ctx.gradient(x).ok().map(|v| v * c)
            } else {
                None
            }
        };
        let scaled = minimize(f, g, &x0, &cfg_scaled).unwrap();
        let gap = (&scaled.x - &base.x).norm() / base.x.norm().max(1.0);
        assert!(gap < 1e-5, "scaled minimizer drifted by {gap}");
    }

    #[test]
    fn infeasible_start_is_reported() {
        let n = 4;
        let lik = AffineLikelihood {
            a: DVector::from_element(n, 1.0),
            b: 0.01,
            qstep: 0.5,
            n0: DVector::zeros(n),
        };
        let ctx = RowContext::new(
            DVector::zeros(n),
            DVector::zeros(n),
            lik.clone(),
            lik,
            DMatrix::zeros(n, n),
            DMatrix::zeros(n, n),
            &identity_warp(n),
            0.0,
            0.0,
        )
        .unwrap();
        // a'(y - x) + b = -4 + 0.01 < 0 at x = 1
        let x0 = DVector::from_element(n, 1.0);
        assert!(matches!(
            fgm_solve(&x0, &ctx, &SolverConfig::default()),
            Err(Error::InfeasibleStart(_))
        ));
    }

    #[test]
    fn trace_csv_has_one_line_per_iteration() {
        let trace = vec![
            IterationRecord {
                iter: 0,
                objective: 1.0,
                grad_norm: 0.5,
                step: 1.0,
            },
            IterationRecord {
                iter: 1,
                objective: 0.5,
                grad_norm: 0.1,
                step: 0.5,
            },
        ];
        let mut buf = Vec::new();
        write_trace_csv(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("iter,objective,grad_norm,step"));
    }
}
