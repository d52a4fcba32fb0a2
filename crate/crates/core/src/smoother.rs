//! Sliding-window factor-graph smoother over [`NavState`] keyframes.
//!
//! The window is solved as a robustified nonlinear least-squares problem by
//! Gauss–Newton with on-manifold retraction, falling back to
//! Levenberg–Marquardt damping when the normal equations are not positive
//! definite or a step increases the cost. Robust kernels enter through
//! iteratively reweighted least squares: weights are recomputed from the
//! whitened residuals at every linearization.
//!
//! Keyframes older than the lag are removed by [`FixedLagSmoother::marginalize`];
//! their information is folded into a Gaussian prior on the retained
//! neighbours via the Schur complement, linearized once at removal time.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::banded::SymBand;
use crate::factors::{
    aoa_factor, baro_factor, gnss_compass_factor, gnss_position_factor, range_factor,
    CompassBaseline, Measurement, RadioFrameConfig, DEFAULT_GEOMETRY_FLOOR,
};
use crate::lie::Vec3;
use crate::preint::{GravityModel, PreintegratedImu};
use crate::robust::RobustKernel;
use crate::state::{NavState, BARO, BASE_DIM, BARO_DIM, BIAS_ACC, BIAS_GYR, POS, ROT, VEL};

pub type NodeId = u64;

/// Aiding measurements closer together than this share one keyframe.
pub const BATCH_WINDOW: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum SmootherError {
    #[error("keyframe interval must be positive, got {0} s")]
    NonPositiveInterval(f64),
    #[error("measurement at t = {measurement} lies outside the keyframe interval ({start}, {end}]")]
    OutOfOrder {
        measurement: f64,
        start: f64,
        end: f64,
    },
    #[error("factor references unknown node {0}")]
    UnknownNode(NodeId),
    #[error("prior covariance must be {0}x{0} and positive definite")]
    BadPrior(usize),
    #[error("no optimization has been run yet")]
    NotOptimized,
}

/// Bias random-walk densities between keyframes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasRandomWalk {
    /// m/s²/√s
    pub accel: f64,
    /// rad/s/√s
    pub gyro: f64,
    /// m/√s
    pub baro: f64,
}

impl Default for BiasRandomWalk {
    fn default() -> Self {
        Self {
            accel: 1e-4,
            gyro: 1e-6,
            baro: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SmootherConfig {
    /// Seconds of history kept in the window.
    pub lag: f64,
    pub gravity: GravityModel,
    pub bias_walk: BiasRandomWalk,
    /// Kernel applied to the radio aiding factors (AoA, range, barometer);
    /// RTK, compass, IMU, bias and prior factors stay Gaussian.
    pub kernel: RobustKernel,
    pub radio: RadioFrameConfig,
    pub compass_baseline: CompassBaseline,
    pub geometry_floor: f64,
    pub max_iterations: usize,
    pub relative_cost_tol: f64,
    pub step_tol: f64,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            lag: 2.0,
            gravity: GravityModel::default(),
            bias_walk: BiasRandomWalk::default(),
            kernel: RobustKernel::None,
            radio: RadioFrameConfig::default(),
            compass_baseline: CompassBaseline(Vec3::x()),
            geometry_floor: DEFAULT_GEOMETRY_FLOOR,
            max_iterations: 50,
            relative_cost_tol: 1e-9,
            step_tol: 1e-10,
        }
    }
}

/// Whitened error `e(x)` (unit covariance) and `∂e/∂ξ` for each key, each
/// `rows × dim`.
#[derive(Clone, Debug)]
pub struct Whitened {
    pub error: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
}

/// A residual over one or more keyframes.
pub trait Factor: fmt::Debug + Send + Sync {
    fn keys(&self) -> &[NodeId];

    /// `None` when the factor cannot be evaluated at these states (for
    /// example degenerate radio geometry); it is then skipped.
    fn linearize(&self, states: &[&NavState], dim: usize) -> Option<Whitened>;
}

#[derive(Debug)]
pub struct FactorEntry {
    pub factor: Box<dyn Factor>,
    pub kernel: RobustKernel,
}

impl FactorEntry {
    pub fn gaussian(factor: impl Factor + 'static) -> Self {
        Self {
            factor: Box::new(factor),
            kernel: RobustKernel::None,
        }
    }

    pub fn robust(factor: impl Factor + 'static, kernel: RobustKernel) -> Self {
        Self {
            factor: Box::new(factor),
            kernel,
        }
    }
}

/// `L⁻¹` for a covariance `Σ = L Lᵀ`.
pub fn sqrt_information(cov: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = cov.nrows();
    let chol = cov.clone().cholesky()?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))?;
    Some(l_inv)
}

/// Jacobian of [`NavState::local`] embedded as a `dim × dim` block diagonal.
fn local_jacobian(blocks: &[crate::lie::Mat3], dim: usize) -> DMatrix<f64> {
    let mut j = DMatrix::identity(dim, dim);
    j.view_mut((ROT, ROT), (3, 3)).copy_from(&blocks[0]);
    j.view_mut((POS, POS), (3, 3)).copy_from(&blocks[1]);
    j
}

/// Gaussian prior on the full tangent state of one node.
#[derive(Clone, Debug)]
pub struct PriorFactor {
    keys: [NodeId; 1],
    pub mean: NavState,
    sqrt_info: DMatrix<f64>,
}

impl PriorFactor {
    pub fn new(key: NodeId, mean: NavState, covariance: &DMatrix<f64>) -> Option<Self> {
        Some(Self {
            keys: [key],
            mean,
            sqrt_info: sqrt_information(covariance)?,
        })
    }
}

impl Factor for PriorFactor {
    fn keys(&self) -> &[NodeId] {
        &self.keys
    }

    fn linearize(&self, states: &[&NavState], dim: usize) -> Option<Whitened> {
        let (delta, blocks) = self.mean.local(states[0], dim);
        Some(Whitened {
            error: &self.sqrt_info * delta,
            jacobians: vec![&self.sqrt_info * local_jacobian(&blocks, dim)],
        })
    }
}

/// Preintegrated IMU constraint between consecutive keyframes.
#[derive(Clone, Debug)]
pub struct ImuFactor {
    keys: [NodeId; 2],
    pub preint: PreintegratedImu,
    gravity: GravityModel,
    sqrt_info: DMatrix<f64>,
}

impl ImuFactor {
    pub fn new(i: NodeId, j: NodeId, preint: PreintegratedImu, gravity: GravityModel) -> Self {
        let mut cov = DMatrix::from_iterator(9, 9, preint.covariance.iter().copied());
        // floor keeps very short intervals well conditioned
        let floor = 1e-12 * (1.0 + cov.diagonal().amax());
        for k in 0..9 {
            cov[(k, k)] += floor;
        }
        let sqrt_info = sqrt_information(&cov).expect("preintegration covariance is PD after flooring");
        Self {
            keys: [i, j],
            preint,
            gravity,
            sqrt_info,
        }
    }
}

impl Factor for ImuFactor {
    fn keys(&self) -> &[NodeId] {
        &self.keys
    }

    fn linearize(&self, states: &[&NavState], dim: usize) -> Option<Whitened> {
        let r = self
            .preint
            .residual_and_jacobians(states[0], states[1], &self.gravity);
        let mut ji = DMatrix::zeros(9, dim);
        ji.view_mut((0, ROT), (9, 6)).copy_from(&r.d_pose_i);
        ji.view_mut((0, VEL), (9, 3)).copy_from(&r.d_vel_i);
        ji.view_mut((0, BIAS_ACC), (9, 6)).copy_from(&r.d_bias_i);
        let mut jj = DMatrix::zeros(9, dim);
        jj.view_mut((0, ROT), (9, 6)).copy_from(&r.d_pose_j);
        jj.view_mut((0, VEL), (9, 3)).copy_from(&r.d_vel_j);
        let e = DVector::from_iterator(9, r.residual.iter().copied());
        Some(Whitened {
            error: &self.sqrt_info * e,
            jacobians: vec![&self.sqrt_info * ji, &self.sqrt_info * jj],
        })
    }
}

/// Random-walk link between the biases of consecutive keyframes.
#[derive(Clone, Debug)]
pub struct BiasWalkFactor {
    keys: [NodeId; 2],
    inv_sigma: [f64; 3],
}

impl BiasWalkFactor {
    pub fn new(i: NodeId, j: NodeId, walk: &BiasRandomWalk, dt: f64) -> Self {
        let dt = dt.max(1e-9);
        let inv = |d: f64| 1.0 / (d * dt.sqrt()).max(1e-15);
        Self {
            keys: [i, j],
            inv_sigma: [inv(walk.accel), inv(walk.gyro), inv(walk.baro)],
        }
    }
}

impl Factor for BiasWalkFactor {
    fn keys(&self) -> &[NodeId] {
        &self.keys
    }

    fn linearize(&self, states: &[&NavState], dim: usize) -> Option<Whitened> {
        let rows = if dim > BARO { 7 } else { 6 };
        let (a, b) = (states[0], states[1]);
        let mut e = DVector::zeros(rows);
        let mut ji = DMatrix::zeros(rows, dim);
        let mut jj = DMatrix::zeros(rows, dim);
        for k in 0..3 {
            e[k] = (b.bias.accel[k] - a.bias.accel[k]) * self.inv_sigma[0];
            e[k + 3] = (b.bias.gyro[k] - a.bias.gyro[k]) * self.inv_sigma[1];
            ji[(k, BIAS_ACC + k)] = -self.inv_sigma[0];
            jj[(k, BIAS_ACC + k)] = self.inv_sigma[0];
            ji[(k + 3, BIAS_GYR + k)] = -self.inv_sigma[1];
            jj[(k + 3, BIAS_GYR + k)] = self.inv_sigma[1];
        }
        if rows == 7 {
            e[6] = (b.baro_bias.unwrap_or(0.0) - a.baro_bias.unwrap_or(0.0)) * self.inv_sigma[2];
            ji[(6, BARO)] = -self.inv_sigma[2];
            jj[(6, BARO)] = self.inv_sigma[2];
        }
        Some(Whitened {
            error: e,
            jacobians: vec![ji, jj],
        })
    }
}

/// Any aiding measurement attached to one keyframe.
#[derive(Clone, Debug)]
pub struct MeasurementFactor {
    keys: [NodeId; 1],
    pub measurement: Measurement,
    radio: RadioFrameConfig,
    baseline: CompassBaseline,
    floor: f64,
}

impl MeasurementFactor {
    pub fn new(key: NodeId, measurement: Measurement, config: &SmootherConfig) -> Self {
        Self {
            keys: [key],
            measurement,
            radio: config.radio,
            baseline: config.compass_baseline,
            floor: config.geometry_floor,
        }
    }
}

/// Whitens the innovation `z − h` into the error `h − z`.
fn whiten_innovation(
    residual: &[f64],
    h_pose: &[f64],
    cov: DMatrix<f64>,
    dim: usize,
    extra: Option<(usize, f64)>,
) -> Option<Whitened> {
    let m = residual.len();
    let w = sqrt_information(&cov)?;
    let e = -DVector::from_column_slice(residual);
    let mut j = DMatrix::zeros(m, dim);
    // h_pose is column-major m × 6
    for c in 0..6 {
        for r in 0..m {
            j[(r, ROT + c)] = h_pose[c * m + r];
        }
    }
    if let Some((col, v)) = extra {
        j[(0, col)] = v;
    }
    Some(Whitened {
        error: &w * e,
        jacobians: vec![&w * j],
    })
}

impl Factor for MeasurementFactor {
    fn keys(&self) -> &[NodeId] {
        &self.keys
    }

    fn linearize(&self, states: &[&NavState], dim: usize) -> Option<Whitened> {
        let s = states[0];
        match &self.measurement {
            Measurement::Gnss(z) => {
                let inn = gnss_position_factor(s, &z.position);
                let cov = DMatrix::from_iterator(3, 3, z.covariance.iter().copied());
                whiten_innovation(inn.residual.as_slice(), inn.h_pose.as_slice(), cov, dim, None)
            }
            Measurement::Compass(z) => {
                let inn = gnss_compass_factor(s, &z.vector, &self.baseline);
                let cov = DMatrix::from_iterator(3, 3, z.covariance.iter().copied());
                whiten_innovation(inn.residual.as_slice(), inn.h_pose.as_slice(), cov, dim, None)
            }
            Measurement::Aoa(z) => {
                let inn = aoa_factor(s, z, &self.radio, self.floor).ok()?;
                let cov = DMatrix::from_iterator(2, 2, z.noise_cov.iter().copied());
                whiten_innovation(inn.residual.as_slice(), inn.h_pose.as_slice(), cov, dim, None)
            }
            Measurement::Range(z) => {
                let inn = range_factor(s, z, &self.radio, self.floor).ok()?;
                let cov = DMatrix::from_element(1, 1, z.variance);
                whiten_innovation(inn.residual.as_slice(), inn.h_pose.as_slice(), cov, dim, None)
            }
            Measurement::Baro(z) => {
                let bias = s.baro_bias.unwrap_or(0.0);
                let inn = baro_factor(s, bias, z).ok()?;
                let cov = DMatrix::from_element(1, 1, z.variance);
                let extra = (dim > BARO).then_some((BARO, inn.h_bias));
                whiten_innovation(&[inn.residual], inn.h_pose.as_slice(), cov, dim, extra)
            }
        }
    }
}

/// Linear Gaussian prior left behind by marginalization:
/// `e = R · local(x_lin, x) + r0` stacked over the kept keys.
#[derive(Clone, Debug)]
pub struct MarginalFactor {
    keys: Vec<NodeId>,
    linearization: Vec<NavState>,
    sqrt_info: DMatrix<f64>,
    offset: DVector<f64>,
}

impl Factor for MarginalFactor {
    fn keys(&self) -> &[NodeId] {
        &self.keys
    }

    fn linearize(&self, states: &[&NavState], dim: usize) -> Option<Whitened> {
        let k = self.keys.len();
        let mut delta = DVector::zeros(k * dim);
        let mut blocks = Vec::with_capacity(k);
        for (n, (lin, s)) in self.linearization.iter().zip(states).enumerate() {
            let (d, jac) = lin.local(s, dim);
            delta.rows_mut(n * dim, dim).copy_from(&d);
            blocks.push(local_jacobian(&jac, dim));
        }
        let error = &self.sqrt_info * delta + &self.offset;
        let jacobians = blocks
            .iter()
            .enumerate()
            .map(|(n, b)| self.sqrt_info.columns(n * dim, dim) * b)
            .collect();
        Some(Whitened { error, jacobians })
    }
}

#[derive(Clone, Debug)]
struct Node {
    id: NodeId,
    state: NavState,
}

#[derive(Clone, Debug, Default)]
pub struct SolveReport {
    /// State updates applied.
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    /// Tangent-space marginal covariance of every node, oldest first.
    pub node_covariances: Vec<(NodeId, DMatrix<f64>)>,
}

struct Linearized {
    hessian: SymBand,
    gradient: DVector<f64>,
    cost: f64,
}

/// Fixed-lag smoother. See the module documentation.
#[derive(Debug)]
pub struct FixedLagSmoother {
    config: SmootherConfig,
    dim: usize,
    nodes: Vec<Node>,
    factors: Vec<FactorEntry>,
    next_id: NodeId,
    last_report: Option<SolveReport>,
}

impl FixedLagSmoother {
    /// Starts a window with one node and a Gaussian prior on it. The tangent
    /// dimension is 16 when `initial` carries a baro bias, 15 otherwise.
    pub fn new(
        config: SmootherConfig,
        initial: NavState,
        covariance: &DMatrix<f64>,
    ) -> Result<Self, SmootherError> {
        let dim = initial.tangent_dim();
        if covariance.nrows() != dim || covariance.ncols() != dim {
            return Err(SmootherError::BadPrior(dim));
        }
        let prior = PriorFactor::new(0, initial, covariance).ok_or(SmootherError::BadPrior(dim))?;
        Ok(Self {
            config,
            dim,
            nodes: vec![Node {
                id: 0,
                state: initial,
            }],
            factors: vec![FactorEntry::gaussian(prior)],
            next_id: 1,
            last_report: None,
        })
    }

    pub fn config(&self) -> &SmootherConfig {
        &self.config
    }

    pub fn tangent_dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|n| n.id).collect()
    }

    pub fn state(&self, id: NodeId) -> Option<&NavState> {
        self.index_of(id).map(|i| &self.nodes[i].state)
    }

    pub fn newest(&self) -> &NavState {
        &self.nodes.last().expect("window is never empty").state
    }

    pub fn last_report(&self) -> Option<&SolveReport> {
        self.last_report.as_ref()
    }

    fn index_of(&self, id: NodeId) -> Option<usize> {
        let first = self.nodes.first()?.id;
        let idx = id.checked_sub(first)? as usize;
        (idx < self.nodes.len() && self.nodes[idx].id == id).then_some(idx)
    }

    /// Appends a keyframe predicted from the newest node through `preint`,
    /// linked by an IMU factor and a bias random-walk factor, and attaches the
    /// aiding measurements to it. Returns the new node id and how many aiding
    /// measurements were skipped as unusable at the predicted state.
    pub fn add_keyframe(
        &mut self,
        preint: &PreintegratedImu,
        aiding: &[Measurement],
    ) -> Result<(NodeId, usize), SmootherError> {
        let dt = preint.delta_time;
        if !(dt > 0.0) {
            return Err(SmootherError::NonPositiveInterval(dt));
        }
        let prev = self.nodes.last().expect("window is never empty").clone();
        let t_new = prev.state.timestamp + dt;
        for m in aiding {
            let t = m.timestamp();
            if t <= prev.state.timestamp || t > t_new + BATCH_WINDOW {
                return Err(SmootherError::OutOfOrder {
                    measurement: t,
                    start: prev.state.timestamp,
                    end: t_new,
                });
            }
        }

        let mut state = preint.predict(&prev.state, &self.config.gravity);
        state.timestamp = t_new;
        let id = self.next_id;
        self.next_id += 1;
        self.nodes.push(Node { id, state });

        self.factors.push(FactorEntry::gaussian(ImuFactor::new(
            prev.id,
            id,
            preint.clone(),
            self.config.gravity,
        )));
        self.factors.push(FactorEntry::gaussian(BiasWalkFactor::new(
            prev.id,
            id,
            &self.config.bias_walk,
            dt,
        )));

        let mut skipped = 0;
        for m in aiding {
            let f = MeasurementFactor::new(id, *m, &self.config);
            if f.linearize(&[&state], self.dim).is_none() {
                skipped += 1;
                continue;
            }
            let kernel = match m {
                Measurement::Aoa(_) | Measurement::Range(_) | Measurement::Baro(_) => self.config.kernel,
                Measurement::Gnss(_) | Measurement::Compass(_) => RobustKernel::None,
            };
            self.factors.push(FactorEntry::robust(f, kernel));
        }
        Ok((id, skipped))
    }

    /// Adds an arbitrary factor over existing nodes.
    pub fn add_factor(&mut self, entry: FactorEntry) -> Result<(), SmootherError> {
        for &k in entry.factor.keys() {
            if self.index_of(k).is_none() {
                return Err(SmootherError::UnknownNode(k));
            }
        }
        self.factors.push(entry);
        Ok(())
    }

    fn bandwidth(&self) -> usize {
        let mut span = 1;
        for f in &self.factors {
            let idx: Vec<usize> = f
                .factor
                .keys()
                .iter()
                .filter_map(|k| self.index_of(*k))
                .collect();
            if let (Some(lo), Some(hi)) = (idx.iter().min(), idx.iter().max()) {
                span = span.max(hi - lo + 1);
            }
        }
        span * self.dim - 1
    }

    fn gather<'a>(&self, states: &'a [NavState], keys: &[NodeId]) -> Option<(Vec<usize>, Vec<&'a NavState>)> {
        let idx: Option<Vec<usize>> = keys.iter().map(|k| self.index_of(*k)).collect();
        let idx = idx?;
        let refs = idx.iter().map(|&i| &states[i]).collect();
        Some((idx, refs))
    }

    /// Robust cost, IRLS-weighted Hessian and gradient at `states`.
    fn linearize_all(&self, states: &[NavState], bw: usize) -> Linearized {
        let n = states.len() * self.dim;
        let d = self.dim;
        let mut hessian = SymBand::zeros(n, bw);
        let mut gradient = DVector::zeros(n);
        let mut cost = 0.0;
        for entry in &self.factors {
            let Some((idx, refs)) = self.gather(states, entry.factor.keys()) else {
                continue;
            };
            let Some(w) = entry.factor.linearize(&refs, d) else {
                continue;
            };
            let mut weights = DVector::zeros(w.error.len());
            for (i, e) in w.error.iter().enumerate() {
                cost += entry.kernel.cost(*e);
                weights[i] = entry.kernel.weight(*e);
            }
            let we = w.error.component_mul(&weights);
            for (a, ja) in idx.iter().zip(&w.jacobians) {
                let mut g = gradient.rows_mut(a * d, d);
                g += ja.transpose() * &we;
                let wja = DMatrix::from_fn(ja.nrows(), ja.ncols(), |r, c| ja[(r, c)] * weights[r]);
                for (b, jb) in idx.iter().zip(&w.jacobians) {
                    if a >= b {
                        let block = jb.transpose() * &wja;
                        // block is (dim_b × dim_a); store (a, b) = its transpose
                        hessian.add_block(a * d, b * d, &block.transpose());
                    }
                }
            }
        }
        Linearized {
            hessian,
            gradient,
            cost,
        }
    }

    fn retract_all(&self, states: &[NavState], step: &DVector<f64>) -> Vec<NavState> {
        states
            .iter()
            .enumerate()
            .map(|(i, s)| s.retract(step.rows(i * self.dim, self.dim).as_slice()))
            .collect()
    }

    fn damped(h: &SymBand, lambda: f64) -> SymBand {
        let mut d = h.clone();
        if lambda > 0.0 {
            for i in 0..h.dim() {
                d.add_diagonal(i, lambda * (h.get(i, i) + 1.0));
            }
        }
        d
    }

    /// Solves the window and stores the resulting estimate and covariances.
    pub fn optimize(&mut self) -> SolveReport {
        let bw = self.bandwidth();
        let mut states: Vec<NavState> = self.nodes.iter().map(|n| n.state).collect();
        let mut lin = self.linearize_all(&states, bw);
        let mut report = SolveReport {
            initial_cost: lin.cost,
            ..Default::default()
        };
        // Levenberg-Marquardt with the gain-ratio update of the damping;
        // λ = 0 is plain Gauss-Newton
        let mut lambda = 0.0;
        let mut growth = 2.0;
        let raise = |lambda: f64, growth: &mut f64| {
            let next = if lambda == 0.0 { 1e-6 } else { lambda * *growth };
            *growth *= 2.0;
            next
        };

        for _ in 0..self.config.max_iterations {
            let Some(chol) = Self::damped(&lin.hessian, lambda).cholesky() else {
                lambda = raise(lambda, &mut growth);
                if lambda > 1e12 {
                    break;
                }
                continue;
            };
            let step = -chol.solve(&lin.gradient);
            if step.norm() < self.config.step_tol {
                report.converged = true;
                break;
            }
            let candidate = self.retract_all(&states, &step);
            let next = self.linearize_all(&candidate, bw);
            if next.cost <= lin.cost {
                let predicted = -(lin.gradient.dot(&step) + 0.5 * step.dot(&lin.hessian.mul_vec(&step)));
                let gain = (lin.cost - next.cost) / predicted.max(f64::MIN_POSITIVE);
                let rel = (lin.cost - next.cost) / lin.cost.max(f64::MIN_POSITIVE);
                states = candidate;
                lin = next;
                report.iterations += 1;
                lambda *= (1.0 - (2.0 * gain - 1.0).powi(3)).max(1.0 / 3.0);
                if lambda < 1e-12 {
                    lambda = 0.0;
                }
                growth = 2.0;
                if rel < self.config.relative_cost_tol {
                    report.converged = true;
                    break;
                }
            } else {
                if (next.cost - lin.cost) / lin.cost.max(f64::MIN_POSITIVE) < self.config.relative_cost_tol {
                    // at the minimum up to rounding
                    report.converged = true;
                    break;
                }
                lambda = raise(lambda, &mut growth);
                if lambda > 1e12 {
                    break;
                }
            }
        }

        for (node, s) in self.nodes.iter_mut().zip(&states) {
            node.state = *s;
        }
        report.final_cost = lin.cost;
        report.node_covariances = self.marginal_covariances(&lin.hessian);
        self.last_report = Some(report.clone());
        report
    }

    fn marginal_covariances(&self, hessian: &SymBand) -> Vec<(NodeId, DMatrix<f64>)> {
        let mut lambda = 0.0;
        let chol = loop {
            if let Some(c) = Self::damped(hessian, lambda).cholesky() {
                break c;
            }
            lambda = if lambda == 0.0 { 1e-9 } else { lambda * 10.0 };
        };
        let sigma = chol.band_inverse();
        let d = self.dim;
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let cov = DMatrix::from_fn(d, d, |r, c| sigma.get(i * d + r, i * d + c));
                (n.id, cov)
            })
            .collect()
    }

    /// Dense joint covariance of every node in the window at the current
    /// estimate, oldest first.
    pub fn joint_covariance(&self) -> Option<DMatrix<f64>> {
        let states: Vec<NavState> = self.nodes.iter().map(|n| n.state).collect();
        let lin = self.linearize_all(&states, self.bandwidth());
        let h = lin.hessian.to_dense();
        match h.clone().cholesky() {
            Some(c) => Some(c.inverse()),
            None => h.try_inverse(),
        }
    }

    /// Newest node's state and tangent-space marginal covariance.
    pub fn current_estimate(&self) -> Result<(NavState, DMatrix<f64>), SmootherError> {
        let report = self.last_report.as_ref().ok_or(SmootherError::NotOptimized)?;
        let newest = self.nodes.last().expect("window is never empty");
        let cov = report
            .node_covariances
            .iter()
            .find(|(id, _)| *id == newest.id)
            .map(|(_, c)| c.clone())
            .ok_or(SmootherError::NotOptimized)?;
        Ok((newest.state, cov))
    }

    /// Removes nodes older than `now − lag`, keeping at least the newest,
    /// and replaces their factors by a Schur-complement prior on the retained
    /// nodes they were connected to.
    pub fn marginalize(&mut self, now: f64) {
        let cutoff = now - self.config.lag;
        let remove = self
            .nodes
            .iter()
            .take(self.nodes.len() - 1)
            .take_while(|n| n.state.timestamp < cutoff - 1e-9)
            .count();
        if remove == 0 {
            return;
        }
        let removed: Vec<NodeId> = self.nodes[..remove].iter().map(|n| n.id).collect();
        let is_removed = |k: &NodeId| removed.contains(k);

        let (touching, kept): (Vec<FactorEntry>, Vec<FactorEntry>) = std::mem::take(&mut self.factors)
            .into_iter()
            .partition(|f| f.factor.keys().iter().any(is_removed));
        self.factors = kept;

        let mut kept_keys: Vec<NodeId> = touching
            .iter()
            .flat_map(|f| f.factor.keys().iter().copied())
            .filter(|k| !is_removed(k))
            .collect();
        kept_keys.sort_unstable();
        kept_keys.dedup();

        // local ordering: removed nodes first, then kept neighbours
        let order: Vec<NodeId> = removed.iter().chain(&kept_keys).copied().collect();
        let d = self.dim;
        let n_all = order.len() * d;
        let n_m = removed.len() * d;
        let mut h = DMatrix::zeros(n_all, n_all);
        let mut g = DVector::zeros(n_all);
        for entry in &touching {
            let keys = entry.factor.keys();
            let refs: Vec<&NavState> = keys
                .iter()
                .map(|k| self.state(*k).expect("factor keys exist"))
                .collect();
            let Some(w) = entry.factor.linearize(&refs, d) else {
                continue;
            };
            let weights: Vec<f64> = w.error.iter().map(|e| entry.kernel.weight(*e)).collect();
            let pos: Vec<usize> = keys
                .iter()
                .map(|k| order.iter().position(|o| o == k).expect("key in ordering"))
                .collect();
            for (a, ja) in pos.iter().zip(&w.jacobians) {
                let wja = DMatrix::from_fn(ja.nrows(), ja.ncols(), |r, c| ja[(r, c)] * weights[r]);
                let mut gr = g.rows_mut(a * d, d);
                gr += wja.transpose() * &w.error;
                for (b, jb) in pos.iter().zip(&w.jacobians) {
                    let mut blk = h.view_mut((a * d, b * d), (d, d));
                    blk += wja.transpose() * jb;
                }
            }
        }

        self.nodes.drain(..remove);

        if kept_keys.is_empty() {
            return;
        }
        let h_mm = h.view((0, 0), (n_m, n_m)).into_owned();
        let h_km = h.view((n_m, 0), (n_all - n_m, n_m)).into_owned();
        let h_kk = h.view((n_m, n_m), (n_all - n_m, n_all - n_m)).into_owned();
        let g_m = g.rows(0, n_m).into_owned();
        let g_k = g.rows(n_m, n_all - n_m).into_owned();

        let h_mm_inv = symmetric_pinv(&h_mm);
        let h_marg = &h_kk - &h_km * &h_mm_inv * h_km.transpose();
        let g_marg = &g_k - &h_km * &h_mm_inv * &g_m;

        if let Some((sqrt_info, offset)) = factor_information(&h_marg, &g_marg) {
            let linearization = kept_keys
                .iter()
                .map(|k| *self.state(*k).expect("kept key exists"))
                .collect();
            self.factors.push(FactorEntry::gaussian(MarginalFactor {
                keys: kept_keys,
                linearization,
                sqrt_info,
                offset,
            }));
        }
    }
}

/// Pseudo-inverse of a symmetric PSD matrix.
fn symmetric_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = m.clone().cholesky() {
        return c.inverse();
    }
    let eig = m.clone().symmetric_eigen();
    let tol = eig.eigenvalues.amax() * 1e-12;
    let inv = eig.eigenvalues.map(|v| if v > tol { 1.0 / v } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Writes `½ξᵀHξ + gᵀξ` as `½‖Rξ + r0‖²` (up to a constant).
fn factor_information(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let h = (h + h.transpose()) * 0.5;
    let n = h.nrows();
    if let Some(chol) = h.clone().cholesky() {
        // H = L Lᵀ, R = Lᵀ, r0 = L⁻¹ g
        let l = chol.l();
        let r0 = l.solve_lower_triangular(g)?;
        return Some((l.transpose(), r0));
    }
    let eig = h.symmetric_eigen();
    let max = eig.eigenvalues.amax();
    if !(max > 0.0) {
        return None;
    }
    let tol = max * 1e-12;
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > tol)
        .collect();
    let mut r = DMatrix::zeros(keep.len(), n);
    let mut r0 = DVector::zeros(keep.len());
    for (row, &i) in keep.iter().enumerate() {
        let lam = eig.eigenvalues[i];
        let v = eig.eigenvectors.column(i);
        r.row_mut(row).copy_from(&(v.transpose() * lam.sqrt()));
        r0[row] = v.dot(g) / lam.sqrt();
    }
    Some((r, r0))
}

/// Tangent dimension helper for callers building priors.
pub fn tangent_dim(with_baro: bool) -> usize {
    if with_baro {
        BARO_DIM
    } else {
        BASE_DIM
    }
}
