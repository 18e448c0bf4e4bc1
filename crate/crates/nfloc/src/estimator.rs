//! Message-passing position and gain estimator.
//!
//! The estimator alternates Gaussian messages between the position
//! variables, the signal factor (which sees the beamformed received
//! vector), and the geometry factor (which ties the per-subarray gains to
//! the reference vector c(p)). Non-Gaussian outgoing messages are
//! approximated by a Gaussian centered at the message's maximizer, found
//! by alternating gradient ascent over the direction cosines and the
//! range, with the covariance taken from the (floored) negative inverse
//! Hessian.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelMatrix;
use crate::deriv::{
    measurement_columns, reference_column, ChannelModelKind, MessageKind, MessageObjective,
};
use crate::error::{Error, Result};
use crate::geometry::{CartesianPosition, PolarPosition};
use crate::linalg::{covariance_from_hessian, hermitian_part, ridge_inverse, HermitianSolver};
use crate::partition::PartitionSpec;

/// Configuration of the estimator loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub model: ChannelModelKind,
    pub r_min: f64,
    pub r_max: f64,
    /// Gradient-ascent stopping threshold on the position move, meters.
    pub ga_epsilon_m: f64,
    /// Outer-loop relative-change stopping threshold.
    pub outer_tol: f64,
    pub max_outer_iters: usize,
    pub max_ga_iters: usize,
    /// Damping factor applied to the p <-> signal-factor messages.
    pub damping: f64,
    /// Initial position message variance, m^2.
    pub sigma_ini2: f64,
    /// Prior gain variance.
    pub tau_pri: f64,
    /// Prior position variance, m^2.
    pub nu_pri: f64,
    /// Grid points along chi_x; default 4 * (subarray width).
    pub grid_mx: Option<usize>,
    /// Grid points along chi_y; default 4 * (subarray height).
    pub grid_my: Option<usize>,
    /// Grid points along range.
    pub grid_mr: usize,
}

impl EstimatorConfig {
    pub fn new(r_min: f64, r_max: f64) -> Self {
        Self {
            model: ChannelModelKind::Exact,
            r_min,
            r_max,
            ga_epsilon_m: 1e-4,
            outer_tol: 1e-3,
            max_outer_iters: 20,
            max_ga_iters: 100,
            damping: 0.5,
            sigma_ini2: 1e4,
            tau_pri: 1e9,
            nu_pri: 1e9,
            grid_mx: None,
            grid_my: None,
            grid_mr: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_min > 0.0 && self.r_max >= self.r_min) {
            return Err(Error::Config(format!(
                "invalid range bounds [{}, {}]",
                self.r_min, self.r_max
            )));
        }
        if self.ga_epsilon_m <= 0.0 || self.outer_tol <= 0.0 {
            return Err(Error::Config("thresholds must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config(format!("damping {} not in (0, 1]", self.damping)));
        }
        if self.max_outer_iters == 0 || self.max_ga_iters == 0 {
            return Err(Error::Config("iteration limits must be >= 1".into()));
        }
        if self.sigma_ini2 <= 0.0 || self.tau_pri <= 0.0 || self.nu_pri <= 0.0 {
            return Err(Error::Config("variances must be positive".into()));
        }
        if self.grid_mx == Some(0) || self.grid_my == Some(0) || self.grid_mr == 0 {
            return Err(Error::Config("grid sizes must be >= 1".into()));
        }
        if self.grid_mr < 2 && self.r_min != self.r_max {
            return Err(Error::Config(
                "range grid needs at least 2 points when r_min < r_max".into(),
            ));
        }
        Ok(())
    }

    pub fn prior_mean(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, 0.5 * (self.r_min + self.r_max))
    }
}

/// Gaussian belief over one user's position.
#[derive(Debug, Clone)]
pub struct PositionBelief {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

impl PositionBelief {
    pub fn isotropic(mean: Vector3<f64>, var: f64) -> Self {
        Self {
            mean,
            cov: Matrix3::identity() * var,
        }
    }

    pub fn position(&self) -> CartesianPosition {
        CartesianPosition::from_vector(&self.mean)
    }
}

/// Gaussian belief over a complex vector (per-subarray gains or the
/// central reference gains).
#[derive(Debug, Clone)]
pub struct ComplexBelief {
    pub mean: DVector<Complex64>,
    pub cov: DMatrix<Complex64>,
}

fn invert3(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let mut ridge = 0.0;
    let scale = m.trace().abs().max(1e-300) / 3.0;
    for _ in 0..8 {
        let trial = m + Matrix3::identity() * ridge;
        if let Some(inv) = trial.try_inverse() {
            if inv.iter().all(|x| x.is_finite()) {
                return Ok(inv);
            }
        }
        ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 100.0 };
    }
    Err(Error::Numerical("3x3 covariance not invertible".into()))
}

/// Information-form product of Gaussian beliefs.
pub fn fuse_position(beliefs: &[&PositionBelief]) -> Result<PositionBelief> {
    let mut lam = Matrix3::zeros();
    let mut eta = Vector3::zeros();
    for b in beliefs {
        let prec = invert3(&b.cov)?;
        lam += prec;
        eta += prec * b.mean;
    }
    let cov = invert3(&lam)?;
    let cov = (cov + cov.transpose()) * 0.5;
    Ok(PositionBelief {
        mean: cov * eta,
        cov,
    })
}

/// Everything the estimator observes: the received vector, the analog
/// beamformer, the array partition, the noise level, and per-user pilot
/// data (transmit power, pilot symbol).
#[derive(Debug, Clone)]
pub struct ObservationModel {
    pub y: DVector<Complex64>,
    pub w: DMatrix<Complex64>,
    pub spec: PartitionSpec,
    pub sigma2: f64,
    /// Per user: (transmit power P_k, pilot symbol x_k).
    pub pilots: Vec<(f64, Complex64)>,
}

impl ObservationModel {
    pub fn num_users(&self) -> usize {
        self.pilots.len()
    }

    pub fn noise_precision(&self) -> Result<DMatrix<Complex64>> {
        let cn = (&self.w * self.w.adjoint()).map(|x| x * self.sigma2);
        Ok(HermitianSolver::new(&hermitian_part(&cn))?.inverse())
    }
}

/// The directional Gaussian messages of one estimation run.
#[derive(Debug, Clone)]
pub struct MessageState {
    pub p_to_xi: Vec<PositionBelief>,
    pub xi_to_p: Vec<PositionBelief>,
    pub p_to_psi: Vec<PositionBelief>,
    pub psi_to_p: Vec<PositionBelief>,
    /// Gain-vector messages (dimension K*M^2); the factor-to-rho messages
    /// from the geometry side have zero mean by construction.
    pub psi_to_rho: Option<ComplexBelief>,
    pub rho_to_xi: Option<ComplexBelief>,
    pub xi_to_rho: Option<ComplexBelief>,
    pub rho_to_psi: Option<ComplexBelief>,
    pub iteration: usize,
    pub numerical_failures: usize,
}

/// Per-iteration snapshot for convergence studies.
#[derive(Debug, Clone)]
pub struct IterationTrace {
    pub positions: Vec<CartesianPosition>,
    pub objective: f64,
}

/// Final output of a run.
#[derive(Debug, Clone)]
pub struct EstimateResult {
    pub positions: Vec<CartesianPosition>,
    /// Block-diagonal per-user marginal position covariance, 3K x 3K.
    pub position_cov: DMatrix<f64>,
    /// Effective central reference gains (pilot and power absorbed).
    pub gains: DVector<Complex64>,
    pub gain_cov: DMatrix<Complex64>,
    pub channels: Vec<ChannelMatrix>,
    pub trace: Vec<IterationTrace>,
    pub converged: bool,
    pub iterations: usize,
    pub numerical_failures: usize,
}

/// One point of the initialization grid; may lie outside the unit disc,
/// in which case it is skipped during scoring.
#[derive(Debug, Clone, Copy)]
pub struct GridCandidate {
    pub chi_x: f64,
    pub chi_y: f64,
    pub r: f64,
}

impl GridCandidate {
    pub fn feasible(&self) -> bool {
        self.chi_x * self.chi_x + self.chi_y * self.chi_y < 1.0 - 1e-9
    }

    pub fn to_cartesian(&self) -> Result<CartesianPosition> {
        PolarPosition::new(self.chi_x, self.chi_y, self.r)?.to_cartesian()
    }
}

/// The initialization grid: chi values uniform on [-1, 1), ranges linear
/// on [r_min, r_max].
pub fn grid_candidates(cfg: &EstimatorConfig, spec: &PartitionSpec) -> Vec<GridCandidate> {
    let mx = cfg.grid_mx.unwrap_or(4 * spec.ns_x);
    let my = cfg.grid_my.unwrap_or(4 * spec.ns_y);
    let mr = cfg.grid_mr;
    let chi = |i: usize, m: usize| -1.0 + 2.0 * i as f64 / m as f64;
    let range = |l: usize| {
        if mr == 1 {
            cfg.r_min
        } else {
            cfg.r_min + (cfg.r_max - cfg.r_min) * l as f64 / (mr - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(mx * my * mr);
    for l in 0..mr {
        for j in 0..my {
            for i in 0..mx {
                out.push(GridCandidate {
                    chi_x: chi(i, mx),
                    chi_y: chi(j, my),
                    r: range(l),
                });
            }
        }
    }
    out
}

/// A scalar field over user positions that the gradient-ascent machinery
/// can maximize.
pub trait PositionObjective {
    fn num_users(&self) -> usize;
    fn value(&self, positions: &[CartesianPosition]) -> Result<f64>;
    /// Value and Cartesian gradient (3 per user).
    fn value_grad(&self, positions: &[CartesianPosition]) -> Result<(f64, DVector<f64>)>;
    /// Value, Cartesian gradient, and symmetrized Hessian.
    fn value_grad_hess(
        &self,
        positions: &[CartesianPosition],
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>)>;
}

impl PositionObjective for MessageObjective {
    fn num_users(&self) -> usize {
        self.num_users
    }

    fn value(&self, positions: &[CartesianPosition]) -> Result<f64> {
        self.eval(positions)
    }

    fn value_grad(&self, positions: &[CartesianPosition]) -> Result<(f64, DVector<f64>)> {
        let e = self.evaluate(positions, 1)?;
        Ok((e.value, e.gradient.expect("order-1 evaluation")))
    }

    fn value_grad_hess(
        &self,
        positions: &[CartesianPosition],
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let e = self.evaluate(positions, 2)?;
        Ok((
            e.value,
            e.gradient.expect("order-2 evaluation"),
            e.hessian.expect("order-2 evaluation"),
        ))
    }
}

/// Outcome of a gradient-ascent maximization.
#[derive(Debug, Clone)]
pub struct GaResult {
    pub positions: Vec<CartesianPosition>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

fn clamp_polar(p: &PolarPosition, cfg: &EstimatorConfig) -> PolarPosition {
    let mut chi_x = p.chi_x;
    let mut chi_y = p.chi_y;
    let norm2 = chi_x * chi_x + chi_y * chi_y;
    let limit = 1.0 - 1e-9;
    if norm2 > limit {
        let scale = (limit / norm2).sqrt();
        chi_x *= scale;
        chi_y *= scale;
    }
    let r = p.r.clamp(cfg.r_min, cfg.r_max);
    PolarPosition::new(chi_x, chi_y, r).expect("clamped point is feasible")
}

/// Project an arbitrary point into the feasible region. Gaussian fusion at
/// low SNR can place a message mean behind the array plane; such a point is
/// pulled to a boresight-adjacent direction at the nearest feasible range.
fn feasible_polar(p: &CartesianPosition, cfg: &EstimatorConfig) -> PolarPosition {
    let mut q = *p;
    if !(q.z > 0.0) || !q.z.is_finite() {
        q.z = 1e-3 * cfg.r_min;
    }
    if !(q.x.is_finite() && q.y.is_finite()) {
        q.x = 0.0;
        q.y = 0.0;
    }
    let pp = PolarPosition::from_cartesian(&q).expect("point with z > 0 converts");
    clamp_polar(&pp, cfg)
}

/// Alternating gradient ascent over (chi_x, chi_y) and r for the users in
/// `active`, other users held fixed. Stops when every active user moves
/// less than `ga_epsilon_m` (meters) in one sweep.
pub fn ga_maximize<O: PositionObjective>(
    obj: &O,
    start: &[CartesianPosition],
    active: &[usize],
    cfg: &EstimatorConfig,
) -> Result<GaResult> {
    let mut positions = start.to_vec();
    let mut polar: Vec<PolarPosition> = positions
        .iter()
        .map(|p| feasible_polar(p, cfg))
        .collect();
    for (k, pp) in polar.iter().enumerate() {
        positions[k] = pp.to_cartesian()?;
    }
    let mut f_cur = obj.value(&positions)?;
    let mut converged = false;
    let mut iters = 0;

    // phase = 0: chi step; phase = 1: range step
    let try_move = |polar: &[PolarPosition],
                    grad_polar: &DVector<f64>,
                    phase: usize,
                    alpha: f64|
     -> Result<(Vec<PolarPosition>, Vec<CartesianPosition>)> {
        let mut new_polar = polar.to_vec();
        for &k in active {
            let (mut cx, mut cy, mut r) = (polar[k].chi_x, polar[k].chi_y, polar[k].r);
            if phase == 0 {
                cx += alpha * grad_polar[3 * k];
                cy += alpha * grad_polar[3 * k + 1];
            } else {
                r += alpha * grad_polar[3 * k + 2];
            }
            new_polar[k] = clamp_polar(
                &PolarPosition {
                    chi_x: cx,
                    chi_y: cy,
                    r,
                },
                cfg,
            );
        }
        let mut new_pos = Vec::with_capacity(polar.len());
        for pp in &new_polar {
            new_pos.push(pp.to_cartesian()?);
        }
        Ok((new_polar, new_pos))
    };

    for it in 0..cfg.max_ga_iters {
        iters = it + 1;
        let before = positions.clone();
        let mut stalled_with_gradient = false;

        for phase in 0..2 {
            let (val, grad_cart) = obj.value_grad(&positions)?;
            f_cur = val;
            let grad_polar = crate::deriv::cartesian_to_polar_gradient(&grad_cart, &polar)?;
            let mut gnorm2 = 0.0;
            for &k in active {
                if phase == 0 {
                    gnorm2 += grad_polar[3 * k].powi(2) + grad_polar[3 * k + 1].powi(2);
                } else {
                    gnorm2 += grad_polar[3 * k + 2].powi(2);
                }
            }
            let gnorm = gnorm2.sqrt();
            if gnorm == 0.0 {
                continue;
            }
            // initial step targets a modest move in the phase's units
            let target = if phase == 0 {
                0.2
            } else {
                (0.25 * (cfg.r_max - cfg.r_min)).max(cfg.ga_epsilon_m)
            };
            let mut alpha = target / gnorm;
            let mut accepted = false;
            for _ in 0..MAX_BACKTRACKS {
                let (new_polar, new_pos) = try_move(&polar, &grad_polar, phase, alpha)?;
                match obj.value(&new_pos) {
                    Ok(f_new) if f_new >= f_cur + ARMIJO_C1 * alpha * gnorm2 => {
                        polar = new_polar;
                        positions = new_pos;
                        f_cur = f_new;
                        accepted = true;
                        break;
                    }
                    _ => alpha *= 0.5,
                }
            }
            if !accepted {
                stalled_with_gradient = true;
            }
        }

        let move_m = active
            .iter()
            .map(|&k| positions[k].distance(&before[k]))
            .fold(0.0, f64::max);
        if move_m < cfg.ga_epsilon_m {
            converged = !stalled_with_gradient || move_m > 0.0 || {
                // no acceptable ascent step exists at line-search resolution;
                // treat a vanishing gradient as converged
                let (_, grad_cart) = obj.value_grad(&positions)?;
                grad_cart.norm() * cfg.ga_epsilon_m < f_cur.abs().max(1.0) * 1e-12
            };
            break;
        }
    }

    Ok(GaResult {
        positions,
        value: f_cur,
        converged,
        iterations: iters,
    })
}

/// Gaussian approximation of a message: mean at the GA maximizer,
/// covariance from the floored negative inverse Hessian.
#[derive(Debug, Clone)]
pub struct ApproxMessage {
    pub per_user: Vec<PositionBelief>,
    pub cov_full: DMatrix<f64>,
    pub value: f64,
    pub converged: bool,
}

pub fn gaussian_approx_message<O: PositionObjective>(
    obj: &O,
    start: &[CartesianPosition],
    active: &[usize],
    cfg: &EstimatorConfig,
) -> Result<ApproxMessage> {
    let ga = ga_maximize(obj, start, active, cfg)?;
    let (value, _, hess) = obj.value_grad_hess(&ga.positions)?;
    let cov_full = covariance_from_hessian(&hess);
    let per_user = (0..obj.num_users())
        .map(|k| PositionBelief {
            mean: ga.positions[k].as_vector(),
            cov: Matrix3::from_fn(|i, j| cov_full[(3 * k + i, 3 * k + j)]),
        })
        .collect();
    Ok(ApproxMessage {
        per_user,
        cov_full,
        value,
        converged: ga.converged,
    })
}

fn xi_objective(
    obs: &ObservationModel,
    cn_inv: &DMatrix<Complex64>,
    p0: DMatrix<Complex64>,
    num_users: usize,
    model: ChannelModelKind,
) -> Result<MessageObjective> {
    MessageObjective::new(
        MessageKind::Xi,
        model,
        obs.spec,
        Some(obs.w.clone()),
        cn_inv.clone(),
        obs.y.clone(),
        p0,
        num_users,
    )
}

/// Sequential grid + gradient-ascent initialization: users are located one
/// at a time against the signal-factor objective with earlier users fixed
/// and no incoming gain belief.
pub fn sequential_init(obs: &ObservationModel, cfg: &EstimatorConfig) -> Result<Vec<CartesianPosition>> {
    let k_users = obs.num_users();
    let cn_inv = obs.noise_precision()?;
    let m2 = obs.spec.num_subarrays();
    let grid = grid_candidates(cfg, &obs.spec);
    if !grid.iter().any(|c| c.feasible()) {
        return Err(Error::Config("initialization grid has no feasible points".into()));
    }

    let mut inits: Vec<CartesianPosition> = Vec::with_capacity(k_users);
    for t in 0..k_users {
        let n = t + 1;
        let obj = xi_objective(
            obs,
            &cn_inv,
            DMatrix::zeros(n * m2, n * m2),
            n,
            cfg.model,
        )?;
        // columns of already-initialized users are fixed during scoring
        let fixed: Vec<DMatrix<Complex64>> = inits
            .iter()
            .enumerate()
            .map(|(k, p)| obj.user_columns(k, p, 0).map(|uc| uc.a))
            .collect::<Result<_>>()?;

        let mut best: Option<(f64, CartesianPosition)> = None;
        for cand in &grid {
            if !cand.feasible() {
                continue;
            }
            let p = cand.to_cartesian()?;
            let cand_cols = obj.user_columns(t, &p, 0)?.a;
            let mut a = DMatrix::zeros(obj.n_obs(), n * m2);
            for (k, cols) in fixed.iter().enumerate() {
                a.view_mut((0, k * m2), (obj.n_obs(), m2)).copy_from(cols);
            }
            a.view_mut((0, t * m2), (obj.n_obs(), m2)).copy_from(&cand_cols);
            let score = obj.eval_assembled(&a)?;
            // strict comparison keeps the first (lowest linear index) on ties
            if best.as_ref().map_or(true, |(s, _)| score > *s) {
                best = Some((score, p));
            }
        }
        let (_, p_best) = best.expect("at least one feasible grid point");

        let mut start = inits.clone();
        start.push(p_best);
        let ga = ga_maximize(&obj, &start, &[t], cfg)?;
        inits.push(ga.positions[t]);
    }
    Ok(inits)
}

fn damp_belief(old: &PositionBelief, new: &PositionBelief, beta: f64) -> PositionBelief {
    PositionBelief {
        mean: old.mean * (1.0 - beta) + new.mean * beta,
        cov: old.cov * (1.0 - beta) + new.cov * beta,
    }
}

/// Block-diagonal reference-vector matrix C-hat at the given positions.
fn c_hat(
    obs: &ObservationModel,
    positions: &[CartesianPosition],
    model: ChannelModelKind,
) -> Result<DMatrix<Complex64>> {
    let m2 = obs.spec.num_subarrays();
    let k = positions.len();
    let mut c = DMatrix::zeros(k * m2, k);
    for (i, p) in positions.iter().enumerate() {
        let col = reference_column(&obs.spec, p, model, 0)?.a;
        c.view_mut((i * m2, i), (m2, 1)).copy_from(&col);
    }
    Ok(c)
}

/// Measurement matrix at the given positions.
fn b_hat(
    obs: &ObservationModel,
    positions: &[CartesianPosition],
    model: ChannelModelKind,
) -> Result<DMatrix<Complex64>> {
    let m2 = obs.spec.num_subarrays();
    let k = positions.len();
    let mut b = DMatrix::zeros(obs.w.nrows(), k * m2);
    for (i, p) in positions.iter().enumerate() {
        let cols = measurement_columns(&obs.spec, &obs.w, p, model, 0)?.a;
        b.view_mut((0, i * m2), (obs.w.nrows(), m2)).copy_from(&cols);
    }
    Ok(b)
}

struct RunContext {
    cn_inv: DMatrix<Complex64>,
}

/// One clockwise + counterclockwise message sweep.
pub fn iterate(
    state: &mut MessageState,
    obs: &ObservationModel,
    cfg: &EstimatorConfig,
) -> Result<()> {
    let ctx = RunContext {
        cn_inv: obs.noise_precision()?,
    };
    iterate_with(state, obs, cfg, &ctx)
}

fn iterate_with(
    state: &mut MessageState,
    obs: &ObservationModel,
    cfg: &EstimatorConfig,
    ctx: &RunContext,
) -> Result<()> {
    let k_users = obs.num_users();
    let m2 = obs.spec.num_subarrays();
    let beta = cfg.damping;
    let prior = PositionBelief::isotropic(cfg.prior_mean(), cfg.nu_pri);

    // p -> geometry factor: prior times the incoming signal-side message
    for k in 0..k_users {
        state.p_to_psi[k] = fuse_position(&[&prior, &state.xi_to_p[k]])?;
    }

    // geometry factor -> rho: zero mean, covariance from the reference
    // vectors at the current position means and the prior gain variance
    let p_psi_means: Vec<CartesianPosition> =
        state.p_to_psi.iter().map(|b| b.position()).collect();
    let ch = c_hat(obs, &p_psi_means, cfg.model)?;
    let c_psi_rho = (&ch * ch.adjoint()).map(|x| x * cfg.tau_pri);
    state.psi_to_rho = Some(ComplexBelief {
        mean: DVector::zeros(k_users * m2),
        cov: c_psi_rho,
    });
    state.rho_to_xi = state.psi_to_rho.clone();

    // signal factor -> p: Gaussian approximation of the xi objective
    let rho_xi_cov = &state.rho_to_xi.as_ref().expect("set above").cov;
    let p0 = ridge_inverse(rho_xi_cov)?;
    let obj_xi = xi_objective(obs, &ctx.cn_inv, p0, k_users, cfg.model)?;
    let start: Vec<CartesianPosition> = state.p_to_xi.iter().map(|b| b.position()).collect();
    let all: Vec<usize> = (0..k_users).collect();
    match gaussian_approx_message(&obj_xi, &start, &all, cfg) {
        Ok(msg) => {
            for k in 0..k_users {
                state.xi_to_p[k] = damp_belief(&state.xi_to_p[k], &msg.per_user[k], beta);
            }
        }
        Err(_) => state.numerical_failures += 1,
    }

    // signal factor -> rho: Gaussian in rho given the position means
    let xi_p_means: Vec<CartesianPosition> = state.xi_to_p.iter().map(|b| b.position()).collect();
    let bh = b_hat(obs, &xi_p_means, cfg.model)?;
    let bgb = hermitian_part(&(bh.adjoint() * &ctx.cn_inv * &bh));
    let c_xi_rho = ridge_inverse(&bgb)?;
    let mu_xi_rho = &c_xi_rho * (bh.adjoint() * (&ctx.cn_inv * &obs.y));
    state.xi_to_rho = Some(ComplexBelief {
        mean: mu_xi_rho,
        cov: c_xi_rho,
    });
    state.rho_to_psi = state.xi_to_rho.clone();

    // geometry factor -> p
    let rho_psi = state.rho_to_psi.as_ref().expect("set above");
    let g_psi = ridge_inverse(&rho_psi.cov)?;
    let mut p0_psi = DMatrix::zeros(k_users, k_users);
    for i in 0..k_users {
        p0_psi[(i, i)] = Complex64::new(1.0 / cfg.tau_pri, 0.0);
    }
    let obj_psi = MessageObjective::new(
        MessageKind::Psi,
        cfg.model,
        obs.spec,
        None,
        g_psi,
        rho_psi.mean.clone(),
        p0_psi,
        k_users,
    )?;
    match gaussian_approx_message(&obj_psi, &p_psi_means, &all, cfg) {
        Ok(msg) => {
            for k in 0..k_users {
                state.psi_to_p[k] = msg.per_user[k].clone();
            }
        }
        Err(_) => state.numerical_failures += 1,
    }

    // p -> signal factor: prior times the geometry-side message, damped
    for k in 0..k_users {
        let undamped = fuse_position(&[&prior, &state.psi_to_p[k]])?;
        state.p_to_xi[k] = damp_belief(&state.p_to_xi[k], &undamped, beta);
    }

    state.iteration += 1;
    Ok(())
}

/// Marginal position beliefs: prior times both incoming messages.
pub fn position_marginals(
    state: &MessageState,
    cfg: &EstimatorConfig,
) -> Result<Vec<PositionBelief>> {
    let prior = PositionBelief::isotropic(cfg.prior_mean(), cfg.nu_pri);
    state
        .xi_to_p
        .iter()
        .zip(&state.psi_to_p)
        .map(|(xi, psi)| fuse_position(&[&prior, xi, psi]))
        .collect()
}

fn feasible_positions(
    marginals: &[PositionBelief],
    cfg: &EstimatorConfig,
) -> Result<Vec<CartesianPosition>> {
    marginals
        .iter()
        .map(|b| feasible_polar(&b.position(), cfg).to_cartesian())
        .collect()
}

/// Reconstruct the full channel from a position and central reference
/// coefficient under the chosen model.
pub fn reconstruct_with_model(
    p: &CartesianPosition,
    h_ref_central: Complex64,
    spec: &PartitionSpec,
    model: ChannelModelKind,
) -> Result<ChannelMatrix> {
    match model {
        ChannelModelKind::Exact => crate::partition::reconstruct_channel(p, h_ref_central, spec),
        ChannelModelKind::Approximate => {
            let g = spec.geometry;
            let q_c = spec.central_reference_position()?;
            let e_ref = crate::deriv::unit_coeff_derivs(p, &q_c, g.wavelength_m, model, 0)?.value;
            let mut entries = DMatrix::zeros(g.n_x, g.n_y);
            for j in 1..=g.n_y {
                for i in 1..=g.n_x {
                    let q = g.antenna_position(i, j)?;
                    let e = crate::deriv::unit_coeff_derivs(p, &q, g.wavelength_m, model, 0)?.value;
                    entries[(i - 1, j - 1)] = h_ref_central * e / e_ref;
                }
            }
            Ok(ChannelMatrix {
                entries,
                geometry: g,
            })
        }
    }
}

/// Full estimation: initialization, message iterations until the position
/// means stop moving, marginals, gains, and channel reconstruction.
pub fn run(obs: &ObservationModel, cfg: &EstimatorConfig) -> Result<EstimateResult> {
    cfg.validate()?;
    let k_users = obs.num_users();
    if k_users == 0 {
        return Err(Error::InvalidArgument("at least one user required".into()));
    }
    if obs.y.len() != obs.w.nrows() {
        return Err(Error::InvalidArgument(format!(
            "received vector has {} entries but the beamformer has {} outputs",
            obs.y.len(),
            obs.w.nrows()
        )));
    }
    if obs.w.ncols() != obs.spec.geometry.num_antennas() {
        return Err(Error::InvalidArgument(
            "beamformer width does not match the array size".into(),
        ));
    }

    let ctx = RunContext {
        cn_inv: obs.noise_precision()?,
    };
    let inits = sequential_init(obs, cfg)?;

    let iso = |p: &CartesianPosition| PositionBelief::isotropic(p.as_vector(), cfg.sigma_ini2);
    let mut state = MessageState {
        p_to_xi: inits.iter().map(iso).collect(),
        xi_to_p: inits.iter().map(iso).collect(),
        p_to_psi: inits.iter().map(iso).collect(),
        psi_to_p: inits.iter().map(iso).collect(),
        psi_to_rho: None,
        rho_to_xi: None,
        xi_to_rho: None,
        rho_to_psi: None,
        iteration: 0,
        numerical_failures: 0,
    };

    let m2 = obs.spec.num_subarrays();
    let init_obj = xi_objective(
        obs,
        &ctx.cn_inv,
        DMatrix::zeros(k_users * m2, k_users * m2),
        k_users,
        cfg.model,
    )?;
    let mut trace = vec![IterationTrace {
        positions: inits.clone(),
        objective: init_obj.eval(&inits)?,
    }];

    let mut prev_means: Vec<Vector3<f64>> = inits.iter().map(|p| p.as_vector()).collect();
    let mut converged = false;
    for it in 0..cfg.max_outer_iters {
        // geometrically decaying damping: the loop can oscillate around its
        // fixed point, and shrinking steps settle it instead of letting the
        // late iterations wander
        let mut iter_cfg = cfg.clone();
        iter_cfg.damping = cfg.damping * 0.75f64.powi(it as i32);
        iterate_with(&mut state, obs, &iter_cfg, &ctx)?;
        let marginals = position_marginals(&state, cfg)?;
        let positions = feasible_positions(&marginals, cfg)?;
        trace.push(IterationTrace {
            positions: positions.clone(),
            objective: init_obj.eval(&positions)?,
        });
        let mut all_small = true;
        for (k, m) in marginals.iter().enumerate() {
            let delta = (m.mean - prev_means[k]).norm();
            let scale = prev_means[k].norm().max(1e-12);
            if delta / scale >= cfg.outer_tol {
                all_small = false;
            }
        }
        prev_means = marginals.iter().map(|m| m.mean).collect();
        if all_small {
            converged = true;
            break;
        }
    }

    let marginals = position_marginals(&state, cfg)?;
    let positions = feasible_positions(&marginals, cfg)?;
    let mut position_cov = DMatrix::zeros(3 * k_users, 3 * k_users);
    for (k, m) in marginals.iter().enumerate() {
        for i in 0..3 {
            for j in 0..3 {
                position_cov[(3 * k + i, 3 * k + j)] = m.cov[(i, j)];
            }
        }
    }

    // central reference gain marginal from the geometry side
    let rho_psi = state
        .rho_to_psi
        .as_ref()
        .ok_or_else(|| Error::Numerical("no gain message available".into()))?;
    let prec_rho_psi = ridge_inverse(&rho_psi.cov)?;
    let ch = c_hat(obs, &positions, cfg.model)?;
    let msg_prec = hermitian_part(&(ch.adjoint() * &prec_rho_psi * &ch));
    let mut lam = msg_prec.clone();
    for i in 0..k_users {
        lam[(i, i)] += Complex64::new(1.0 / cfg.tau_pri, 0.0);
    }
    let lam_solver = HermitianSolver::new(&lam)?;
    let gains = lam_solver.solve_vec(&(ch.adjoint() * (&prec_rho_psi * &rho_psi.mean)));
    let gain_cov = lam_solver.inverse();

    let mut channels = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let (p_k, x_k) = obs.pilots[k];
        let h_ref = gains[k] / (Complex64::new(p_k.sqrt(), 0.0) * x_k);
        channels.push(reconstruct_with_model(
            &positions[k],
            h_ref,
            &obs.spec,
            cfg.model,
        )?);
    }

    Ok(EstimateResult {
        positions,
        position_cov,
        gains,
        gain_cov,
        channels,
        trace,
        converged,
        iterations: state.iteration,
        numerical_failures: state.numerical_failures,
    })
}
