//! Similarity-graph construction for one pixel row: per-pixel feature
//! vectors, a learned Mahalanobis metric over them, and the banded graph
//! Laplacian that turns feature distances into a smoothness prior.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_io::CameraRig;

/// Feature dimension: surface normal (3) + depth (1) + grid location (2).
pub const FEATURE_DIM: usize = 6;

/// Relative eigenvalue floor: metrics must satisfy
/// min_eig >= PD_FLOOR_FRACTION * trace / dim.
pub const PD_FLOOR_FRACTION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    /// Connection radius along the row, in pixels.
    pub bandwidth: usize,
    /// Outer-iteration cap for metric learning.
    pub learn_max_outer: usize,
    /// Relative objective decrease below which metric learning stops.
    pub learn_rel_tol: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            bandwidth: 4,
            learn_max_outer: 100,
            learn_rel_tol: 1e-6,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bandwidth == 0 {
            return Err(Error::InvalidArgument(
                "graph bandwidth must be at least 1".into(),
            ));
        }
        if self.learn_max_outer == 0 {
            return Err(Error::InvalidArgument(
                "metric learning needs at least one outer iteration".into(),
            ));
        }
        Ok(())
    }
}

/// Per-pixel feature vectors for one row (N x 6) plus degeneracy flags for
/// pixels whose neighborhood could not support a plane fit.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    data: DMatrix<f64>,
    degenerate: Vec<bool>,
}

impl FeatureMatrix {
    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn degenerate(&self) -> &[bool] {
        &self.degenerate
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn feature(&self, i: usize) -> DVector<f64> {
        self.data.row(i).transpose()
    }
}

/// Symmetric positive-definite metric with trace fixed to its dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMatrix {
    m: DMatrix<f64>,
}

impl MetricMatrix {
    pub fn identity(dim: usize) -> Self {
        MetricMatrix {
            m: DMatrix::identity(dim, dim),
        }
    }

    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let dim = m.nrows();
        if dim == 0 || m.ncols() != dim {
            return Err(Error::InvalidArgument("metric must be square".into()));
        }
        let asym = (&m - m.transpose()).amax();
        if asym > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "metric asymmetry {asym} exceeds 1e-12"
            )));
        }
        let trace = m.trace();
        if (trace - dim as f64).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "metric trace {trace} must equal its dimension {dim}"
            )));
        }
        let floor = PD_FLOOR_FRACTION * trace / dim as f64;
        let min_eig = m.symmetric_eigenvalues().min();
        if min_eig < floor * (1.0 - 1e-6) - 1e-15 {
            return Err(Error::InvalidArgument(format!(
                "metric minimum eigenvalue {min_eig} below floor {floor}"
            )));
        }
        Ok(MetricMatrix { m })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn eigen_floor(&self) -> f64 {
        PD_FLOOR_FRACTION * self.m.trace() / self.dim() as f64
    }
}

/// Squared Mahalanobis distance (f_i - f_j)' M (f_i - f_j).
pub fn feature_distance(f_i: &DVector<f64>, f_j: &DVector<f64>, m: &MetricMatrix) -> f64 {
    let d = f_i - f_j;
    (m.matrix() * &d).dot(&d)
}

/// Gaussian kernel edge weight exp(-d).
pub fn edge_weight(d_ij: f64) -> f64 {
    (-d_ij).exp()
}

/// Banded symmetric graph Laplacian L = Deg - Adj over one pixel row.
/// Adjacency connects pixels at most `bandwidth` apart.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphLaplacian {
    n: usize,
    bandwidth: usize,
    /// adj[i * bandwidth + (o - 1)] = weight between i and i + o.
    adj: Vec<f64>,
    degrees: Vec<f64>,
}

impl GraphLaplacian {
    fn from_adjacency(n: usize, bandwidth: usize, adj: Vec<f64>) -> Self {
        let mut degrees = vec![0.0; n];
        for i in 0..n {
            for o in 1..=bandwidth {
                if i + o < n {
                    let w = adj[i * bandwidth + o - 1];
                    degrees[i] += w;
                    degrees[i + o] += w;
                }
            }
        }
        GraphLaplacian {
            n,
            bandwidth,
            adj,
            degrees,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        let o = hi - lo;
        if o == 0 || o > self.bandwidth || hi >= self.n {
            0.0
        } else {
            self.adj[lo * self.bandwidth + o - 1]
        }
    }

    /// x' L x = sum over edges of w_ij (x_i - x_j)^2.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            for o in 1..=self.bandwidth {
                if i + o < self.n {
                    let w = self.adj[i * self.bandwidth + o - 1];
                    let d = x[i] - x[i + o];
                    acc += w * d * d;
                }
            }
        }
        acc
    }

    /// (L x)_i = deg_i x_i - sum_j w_ij x_j.
    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for i in 0..self.n {
            out[i] = self.degrees[i] * x[i];
        }
        for i in 0..self.n {
            for o in 1..=self.bandwidth {
                if i + o < self.n {
                    let w = self.adj[i * self.bandwidth + o - 1];
                    out[i] -= w * x[i + o];
                    out[i + o] -= w * x[i];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            l[(i, i)] = self.degrees[i];
            for o in 1..=self.bandwidth {
                if i + o < self.n {
                    let w = self.adj[i * self.bandwidth + o - 1];
                    l[(i, i + o)] = -w;
                    l[(i + o, i)] = -w;
                }
            }
        }
        l
    }

    /// Laplacian of the same graph with every edge touching a dropped node
    /// removed. Dropped nodes become isolated (zero row and column).
    pub fn drop_nodes(&self, dropped: &[bool]) -> GraphLaplacian {
        assert_eq!(dropped.len(), self.n);
        let mut adj = self.adj.clone();
        for i in 0..self.n {
            for o in 1..=self.bandwidth {
                if i + o < self.n && (dropped[i] || dropped[i + o]) {
                    adj[i * self.bandwidth + o - 1] = 0.0;
                }
            }
        }
        GraphLaplacian::from_adjacency(self.n, self.bandwidth, adj)
    }
}

/// Builds the banded similarity Laplacian from row features under a metric.
/// Features are one row per pixel, one column per feature component.
pub fn build_laplacian(
    features: &DMatrix<f64>,
    m: &MetricMatrix,
    bandwidth: usize,
) -> GraphLaplacian {
    let n = features.nrows();
    let mut adj = vec![0.0; n * bandwidth];
    for i in 0..n {
        for o in 1..=bandwidth {
            if i + o < n {
                let mut d = 0.0;
                // (f_i - f_j)' M (f_i - f_j) accumulated without temporaries
                let fi = features.row(i);
                let fj = features.row(i + o);
                let dim = features.ncols();
                for a in 0..dim {
                    let da = fi[a] - fj[a];
                    for b in 0..dim {
                        let db = fi[b] - fj[b];
                        d += da * m.matrix()[(a, b)] * db;
                    }
                }
                adj[i * bandwidth + o - 1] = edge_weight(d);
            }
        }
    }
    GraphLaplacian::from_adjacency(n, bandwidth, adj)
}

// ---------------------------------------------------------------------------
// Per-pixel features from a causal neighborhood
// ---------------------------------------------------------------------------

/// Computes features for the row at `row_index`: the pixel's 3D neighborhood
/// (current row plus the most recent previous row, three columns wide) is fit
/// with a plane by principal component analysis; the smallest-variance
/// direction becomes the surface normal, oriented to positive Z. Features are
/// (normal, depth / range width, row / H, col / W).
pub fn compute_features(
    row_index: usize,
    current: &DVector<f64>,
    previous: &[DVector<f64>],
    rig: &CameraRig,
    depth_range: (f64, f64),
) -> FeatureMatrix {
    let n = current.len();
    let range_width = (depth_range.1 - depth_range.0).max(f64::MIN_POSITIVE);
    let mut data = DMatrix::zeros(n, FEATURE_DIM);
    let mut degenerate = vec![false; n];

    let project = |col: usize, row: usize, z: f64| -> Vector3<f64> {
        Vector3::new(
            (col as f64 - rig.cx) * z / rig.focal_px,
            (row as f64 - rig.cy) * z / rig.focal_px,
            z,
        )
    };

    for j in 0..n {
        let mut points: Vec<Vector3<f64>> = Vec::with_capacity(6);
        for (dr, row) in [(1usize, previous.first()), (0usize, Some(current))] {
            let Some(row_values) = row else { continue };
            let r = row_index.saturating_sub(dr);
            for dc in -1i64..=1 {
                let c = j as i64 + dc;
                if c < 0 || c >= n as i64 {
                    continue;
                }
                points.push(project(c as usize, r, row_values[c as usize]));
            }
        }
        let (normal, flat) = plane_normal(&points);
        degenerate[j] = flat;
        data[(j, 0)] = normal.x;
        data[(j, 1)] = normal.y;
        data[(j, 2)] = normal.z;
        data[(j, 3)] = current[j] / range_width;
        data[(j, 4)] = row_index as f64 / rig.height as f64;
        data[(j, 5)] = j as f64 / rig.width as f64;
    }
    FeatureMatrix { data, degenerate }
}

/// PCA plane fit. Returns the unit normal oriented to the nonnegative-Z
/// hemisphere, and whether the neighborhood was too flat or small to define
/// a plane (in which case the normal defaults to +Z).
fn plane_normal(points: &[Vector3<f64>]) -> (Vector3<f64>, bool) {
    let fallback = Vector3::new(0.0, 0.0, 1.0);
    if points.len() < 3 {
        return (fallback, true);
    }
    let mut centroid = Vector3::zeros();
    for p in points {
        centroid += p;
    }
    centroid /= points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let smallest = order[0];
    let middle = order[1];
    let largest = order[2];
    // collinear neighborhoods have two near-zero spreads
    if eig.eigenvalues[middle] <= 1e-12 * eig.eigenvalues[largest].max(f64::MIN_POSITIVE) {
        return (fallback, true);
    }
    let mut normal: Vector3<f64> = eig.eigenvectors.column(smallest).into();
    normal.normalize_mut();
    if normal.z < 0.0
        || (normal.z == 0.0 && (normal.y < 0.0 || (normal.y == 0.0 && normal.x < 0.0)))
    {
        normal = -normal;
    }
    (normal, false)
}

// ---------------------------------------------------------------------------
// Metric learning
// ---------------------------------------------------------------------------

/// One enhanced row made available to metric learning: the signal and the
/// features it was solved under.
#[derive(Debug, Clone)]
pub struct TrainingRow {
    pub features: DMatrix<f64>,
    pub signal: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub metric: MetricMatrix,
    /// Objective after initialization and after each outer iteration.
    pub objective_trace: Vec<f64>,
    /// True when the training signals carried no variation and the initial
    /// metric was returned untouched.
    pub no_information: bool,
}

/// One graph edge flattened for metric learning: the feature difference and
/// the squared signal difference across it.
struct Edge {
    delta: DVector<f64>,
    signal_sq: f64,
}

fn collect_edges(rows: &[TrainingRow], bandwidth: usize) -> Result<Vec<Edge>> {
    let mut edges = Vec::new();
    for row in rows {
        let n = row.signal.len();
        if row.features.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows for a signal of {n}",
                row.features.nrows()
            )));
        }
        for i in 0..n {
            for o in 1..=bandwidth {
                if i + o < n {
                    let delta = (row.features.row(i) - row.features.row(i + o)).transpose();
                    let d = row.signal[i] - row.signal[i + o];
                    edges.push(Edge {
                        delta,
                        signal_sq: d * d,
                    });
                }
            }
        }
    }
    Ok(edges)
}

fn edge_objective(edges: &[Edge], m: &DMatrix<f64>) -> f64 {
    edges
        .iter()
        .map(|e| {
            let d = (m * &e.delta).dot(&e.delta);
            e.signal_sq * (-d).exp()
        })
        .sum()
}

fn edge_gradient(edges: &[Edge], m: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = m.nrows();
    let mut grad = DMatrix::zeros(dim, dim);
    for e in edges {
        let d = (m * &e.delta).dot(&e.delta);
        let scale = -e.signal_sq * (-d).exp();
        grad.ger(scale, &e.delta, &e.delta, 1.0);
    }
    grad
}

/// Euclidean projection of v onto {w : w_i >= floor, sum w_i = total}.
fn project_floored_simplex(v: &DVector<f64>, total: f64, floor: f64) -> DVector<f64> {
    let n = v.len();
    let budget = total - floor * n as f64;
    debug_assert!(budget >= 0.0);
    let shifted: Vec<f64> = v.iter().map(|&x| x - floor).collect();
    let mut sorted = shifted.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut tau = -budget / n as f64;
    for (j, &val) in sorted.iter().enumerate() {
        cum += val;
        let t = (cum - budget) / (j + 1) as f64;
        if val > t {
            tau = t;
        } else {
            break;
        }
    }
    DVector::from_iterator(n, shifted.iter().map(|&x| floor + (x - tau).max(0.0)))
}

/// Projects a symmetric candidate onto the feasible metrics: eigenvalues are
/// jointly floored and rescaled so min_eig >= floor and trace = dim.
fn project_feasible(m: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let target = project_floored_simplex(&eig.eigenvalues, dim as f64, PD_FLOOR_FRACTION);
    let v = &eig.eigenvectors;
    let mut out = v * DMatrix::from_diagonal(&target) * v.transpose();
    // exact symmetry despite recomposition round-off
    for i in 0..dim {
        for j in (i + 1)..dim {
            let avg = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = avg;
            out[(j, i)] = avg;
        }
    }
    out
}

/// Minimizes the graph Laplacian regularizer of the training rows over
/// symmetric positive-definite metrics with trace fixed to the feature
/// dimension. Alternates a projected-gradient update of the diagonal (over
/// the trace simplex) with a gradient update of the off-diagonal entries
/// followed by an eigenvalue-floor projection. Every accepted step decreases
/// the objective; candidates are projected to the feasible set before
/// comparison.
pub fn learn_metric(
    rows: &[TrainingRow],
    m_init: &MetricMatrix,
    cfg: &GraphConfig,
) -> Result<LearnOutcome> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(Error::InvalidArgument(
            "metric learning needs at least one training row".into(),
        ));
    }
    let dim = m_init.dim();
    if rows.iter().any(|r| r.features.ncols() != dim) {
        return Err(Error::DimensionMismatch(format!(
            "training features must have {dim} columns to match the metric"
        )));
    }
    let edges = collect_edges(rows, cfg.bandwidth)?;
    let total_variation: f64 = edges.iter().map(|e| e.signal_sq).sum();
    if total_variation <= 0.0 {
        return Ok(LearnOutcome {
            metric: m_init.clone(),
            objective_trace: vec![0.0],
            no_information: true,
        });
    }

    let mut m = m_init.matrix().clone();
    let mut objective = edge_objective(&edges, &m);
    let mut trace = vec![objective];
    let mut step_diag = 1.0;
    let mut step_off = 1.0;

    for _ in 0..cfg.learn_max_outer {
        let prev = objective;

        // (i) diagonal block: projected gradient on the trace simplex
        let grad = edge_gradient(&edges, &m);
        let gd = grad.diagonal();
        let mut accepted = false;
        for _ in 0..30 {
            let cand_diag =
                project_floored_simplex(&(m.diagonal() - &gd * step_diag), dim as f64, 0.0);
            let mut cand = m.clone();
            cand.set_diagonal(&cand_diag);
            let cand = project_feasible(&cand);
            let val = edge_objective(&edges, &cand);
            if val < objective {
                m = cand;
                objective = val;
                accepted = true;
                break;
            }
            step_diag *= 0.5;
        }
        if accepted {
            step_diag *= 2.0;
        }

        // (ii) off-diagonal block: gradient step, then eigenvalue floor
        let grad = edge_gradient(&edges, &m);
        let mut accepted = false;
        for _ in 0..30 {
            let mut cand = &m - &grad * step_off;
            let d = m.diagonal();
            cand.set_diagonal(&d);
            let cand = project_feasible(&cand);
            let val = edge_objective(&edges, &cand);
            if val < objective {
                m = cand;
                objective = val;
                accepted = true;
                break;
            }
            step_off *= 0.5;
        }
        if accepted {
            step_off *= 2.0;
        }

        debug_assert!(objective <= prev + 1e-12, "objective increased");
        trace.push(objective);
        let decrease = (prev - objective) / prev.abs().max(f64::MIN_POSITIVE);
        if decrease < cfg.learn_rel_tol {
            break;
        }
    }

    let metric = MetricMatrix::new(project_feasible(&m))?;
    Ok(LearnOutcome {
        metric,
        objective_trace: trace,
        no_information: false,
    })
}

/// Regularizer value through the Laplacian route; the definitional form of
/// what `learn_metric` minimizes.
pub fn glr_objective(rows: &[TrainingRow], m: &MetricMatrix, bandwidth: usize) -> f64 {
    rows.iter()
        .map(|r| build_laplacian(&r.features, m, bandwidth).quad_form(&r.signal))
        .sum()
}
