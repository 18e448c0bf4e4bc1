//! Analytic value, gradient, and Hessian of the log message densities used
//! by the position estimator.
//!
//! Both message objectives share one algebraic shape,
//!
//! ```text
//! L(p) = Xi^H Upsilon^{-1} Xi,   Xi = A(p)^H G z,
//!                                Upsilon = P0 + A(p)^H G A(p),
//! ```
//!
//! where only the block of columns of `A` belonging to one user depends on
//! that user's position. For the signal-factor message, `A` is the
//! measurement matrix B, `G` the combined-noise precision, and `z` the
//! received signal; for the geometry-factor message, `A` is the
//! block-diagonal reference-vector matrix C, `G` the incoming belief
//! precision, and `z` its mean. Derivatives flow through the per-antenna
//! channel coefficients via the quotient rule used by the normalized
//! subarray blocks and the reference vector.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{CartesianPosition, PolarPosition};
use crate::linalg::{symmetric_part, HermitianSolver};
use crate::partition::PartitionSpec;

/// Channel structure assumed by the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ChannelModelKind {
    /// Full coefficient: radiation amplitude, path loss, and phase.
    Exact,
    /// Phase-only ratios (unit amplitude ratios between antennas).
    Approximate,
}

/// Value and position derivatives of one complex scalar coefficient.
#[derive(Debug, Clone)]
pub struct CoeffDerivs {
    pub value: Complex64,
    pub grad: Vector3<Complex64>,
    pub hess: Option<Matrix3<Complex64>>,
}

impl CoeffDerivs {
    fn constant(value: Complex64, order: usize) -> Self {
        Self {
            value,
            grad: Vector3::zeros(),
            hess: (order >= 2).then(|| Matrix3::zeros()),
        }
    }
}

fn c64(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

fn promote(v: &Vector3<f64>) -> Vector3<Complex64> {
    v.map(c64)
}

fn outer(a: &Vector3<Complex64>, b: &Vector3<Complex64>) -> Matrix3<Complex64> {
    a * b.transpose()
}

/// Derivatives of the unit-gain coefficient w.r.t. the source position `p`.
///
/// Exact model: `gamma(p, q) * (1/d) * exp(-j 2 pi d / lambda)`;
/// approximate model: the phase factor alone.
pub fn unit_coeff_derivs(
    p: &CartesianPosition,
    q: &CartesianPosition,
    wavelength_m: f64,
    kind: ChannelModelKind,
    order: usize,
) -> Result<CoeffDerivs> {
    let diff = p.as_vector() - q.as_vector();
    let d = diff.norm();
    if d == 0.0 {
        return Err(Error::Domain("source coincides with antenna".into()));
    }
    let e = diff / d;
    let kappa = Complex64::new(0.0, -2.0 * PI / wavelength_m);
    let big_e = Complex64::from_polar(1.0, -2.0 * PI * d / wavelength_m);
    let e_c = promote(&e);
    let grad_e = e_c.map(|x| kappa * big_e * x);
    let hess_e = |_: ()| -> Matrix3<Complex64> {
        let ee = outer(&e_c, &e_c);
        let mut m = Matrix3::identity().map(c64) - &ee;
        m /= c64(d);
        (ee.map(|x| kappa * x) + m).map(|x| kappa * big_e * x)
    };

    if kind == ChannelModelKind::Approximate {
        return Ok(CoeffDerivs {
            value: big_e,
            grad: grad_e,
            hess: (order >= 2).then(|| hess_e(())),
        });
    }

    let cz = e.z;
    if cz <= 0.0 {
        return Err(Error::Domain(format!(
            "source at or behind the array plane (cos theta = {cz})"
        )));
    }
    let gamma = cz.powf(1.5);
    let ez = Vector3::new(0.0, 0.0, 1.0);
    // d(cos theta)/dp
    let gc = (ez - e * cz) / d;
    let grad_gamma = gc * (1.5 * cz.sqrt());
    let inv_d = 1.0 / d;
    let grad_inv_d = -e / (d * d);

    let value = c64(gamma * inv_d) * big_e;
    let grad = promote(&(grad_gamma * inv_d + grad_inv_d * gamma)).map(|x| x * big_e)
        + grad_e.map(|x| x * gamma * inv_d);

    let hess = (order >= 2).then(|| {
        let eye = Matrix3::identity();
        let ee = &e * e.transpose();
        let hess_gamma = (&gc * gc.transpose()) * (0.75 / cz.sqrt())
            + ((&gc * e.transpose() + &e * gc.transpose()) * (-1.0 / d)
                + (eye - &ee) * (-cz / (d * d)))
                * (1.5 * cz.sqrt());
        let hess_inv_d = (&ee * 3.0 - eye) / (d * d * d);
        let he = hess_e(());

        let g_gamma = promote(&grad_gamma);
        let g_invd = promote(&grad_inv_d);
        let mut h = hess_gamma.map(|x| c64(x * inv_d) * big_e)
            + hess_inv_d.map(|x| c64(x * gamma) * big_e)
            + he.map(|x| x * gamma * inv_d);
        h += (outer(&g_gamma, &g_invd) + outer(&g_invd, &g_gamma)).map(|x| x * big_e);
        h += (outer(&g_gamma, &grad_e) + outer(&grad_e, &g_gamma)).map(|x| x * inv_d);
        h += (outer(&g_invd, &grad_e) + outer(&grad_e, &g_invd)).map(|x| x * gamma);
        h
    });

    Ok(CoeffDerivs { value, grad, hess })
}

/// Gradient (and Hessian for `order = 2`) of the exact channel coefficient,
/// complex gain included.
pub fn channel_coeff_derivatives(
    alpha: Complex64,
    p: &CartesianPosition,
    q: &CartesianPosition,
    wavelength_m: f64,
    order: usize,
) -> Result<CoeffDerivs> {
    let base = unit_coeff_derivs(p, q, wavelength_m, ChannelModelKind::Exact, order)?;
    Ok(CoeffDerivs {
        value: alpha * base.value,
        grad: base.grad.map(|x| alpha * x),
        hess: base.hess.map(|h| h.map(|x| alpha * x)),
    })
}

/// Quotient rule for `f / g` of two coefficients sharing the same
/// differentiation variable.
pub fn quotient_derivs(f: &CoeffDerivs, g: &CoeffDerivs, order: usize) -> CoeffDerivs {
    let inv_g = Complex64::new(1.0, 0.0) / g.value;
    let value = f.value * inv_g;
    let grad = f.grad.map(|x| x * inv_g) - g.grad.map(|x| x * value * inv_g);
    let hess = (order >= 2).then(|| {
        let fh = f.hess.as_ref().expect("f hessian required");
        let gh = g.hess.as_ref().expect("g hessian required");
        let cross = outer(&f.grad, &g.grad) + outer(&g.grad, &f.grad);
        fh.map(|x| x * inv_g) - cross.map(|x| x * inv_g * inv_g)
            - gh.map(|x| x * f.value * inv_g * inv_g)
            + outer(&g.grad, &g.grad).map(|x| x * 2.0 * f.value * inv_g * inv_g * inv_g)
    });
    CoeffDerivs { value, grad, hess }
}

/// Which factor node's outgoing log message is being evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    /// Signal factor: A = B (measurement matrix), G = noise precision,
    /// z = received signal.
    Xi,
    /// Geometry factor: A = blkdiag(c_1, ..., c_K), G = incoming belief
    /// precision over rho, z = its mean.
    Psi,
}

/// Per-user block of `A` and its position derivatives.
pub struct UserColumns {
    pub a: DMatrix<Complex64>,
    pub da: [DMatrix<Complex64>; 3],
    pub d2a: Option<[DMatrix<Complex64>; 6]>,
}

/// Index into the packed lower-triangular second-derivative storage for
/// the coordinate pair (i, j) with i >= j.
pub fn pair_index(i: usize, j: usize) -> usize {
    let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
    hi * (hi + 1) / 2 + lo
}

/// One message objective `L(p) = Xi^H Upsilon^{-1} Xi` with its fixed data.
pub struct MessageObjective {
    pub kind: MessageKind,
    pub model: ChannelModelKind,
    pub spec: PartitionSpec,
    /// Analog beamformer, required for the signal-factor objective.
    pub w: Option<DMatrix<Complex64>>,
    /// Precision G applied to observations.
    pub g_precision: DMatrix<Complex64>,
    /// Observation vector z.
    pub z: DVector<Complex64>,
    /// Prior precision term of Upsilon (e.g. the incoming rho-belief
    /// precision for the signal factor).
    pub p0: DMatrix<Complex64>,
    /// Number of users the objective is built for.
    pub num_users: usize,
    gz: DVector<Complex64>,
}

/// Value plus optional derivatives of a message objective, Cartesian
/// coordinates stacked user-major.
pub struct Evaluation {
    pub value: f64,
    pub gradient: Option<DVector<f64>>,
    pub hessian: Option<DMatrix<f64>>,
}

impl MessageObjective {
    pub fn new(
        kind: MessageKind,
        model: ChannelModelKind,
        spec: PartitionSpec,
        w: Option<DMatrix<Complex64>>,
        g_precision: DMatrix<Complex64>,
        z: DVector<Complex64>,
        p0: DMatrix<Complex64>,
        num_users: usize,
    ) -> Result<Self> {
        let n_obs = match kind {
            MessageKind::Xi => {
                let w = w
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("xi objective needs a beamformer".into()))?;
                w.nrows()
            }
            MessageKind::Psi => num_users * spec.num_subarrays(),
        };
        if g_precision.nrows() != n_obs || z.len() != n_obs {
            return Err(Error::InvalidArgument(format!(
                "observation dimension mismatch: G is {}x{}, z is {}, expected {n_obs}",
                g_precision.nrows(),
                g_precision.ncols(),
                z.len()
            )));
        }
        let n_cols = num_users * Self::cols_per_user_for(kind, &spec);
        if p0.nrows() != n_cols {
            return Err(Error::InvalidArgument(format!(
                "prior precision is {}x{}, expected {n_cols}",
                p0.nrows(),
                p0.ncols()
            )));
        }
        let gz = &g_precision * &z;
        Ok(Self {
            kind,
            model,
            spec,
            w,
            g_precision,
            z,
            p0,
            num_users,
            gz,
        })
    }

    fn cols_per_user_for(kind: MessageKind, spec: &PartitionSpec) -> usize {
        match kind {
            MessageKind::Xi => spec.num_subarrays(),
            MessageKind::Psi => 1,
        }
    }

    pub fn cols_per_user(&self) -> usize {
        Self::cols_per_user_for(self.kind, &self.spec)
    }

    pub fn n_obs(&self) -> usize {
        self.z.len()
    }

    /// Build user k's column block of A together with derivatives up to
    /// `order`.
    pub fn user_columns(&self, k: usize, p: &CartesianPosition, order: usize) -> Result<UserColumns> {
        match self.kind {
            MessageKind::Xi => self.xi_columns(p, order),
            MessageKind::Psi => self.psi_column(k, p, order),
        }
    }

    fn xi_columns(&self, p: &CartesianPosition, order: usize) -> Result<UserColumns> {
        let w = self.w.as_ref().expect("xi objective carries a beamformer");
        measurement_columns(&self.spec, w, p, self.model, order)
    }

    fn psi_column(&self, k: usize, p: &CartesianPosition, order: usize) -> Result<UserColumns> {
        let m2 = self.spec.num_subarrays();
        let n_obs = self.num_users * m2;
        let offset = k * m2;
        let rc = reference_column(&self.spec, p, self.model, order)?;
        let mut a = DMatrix::zeros(n_obs, 1);
        a.view_mut((offset, 0), (m2, 1)).copy_from(&rc.a);
        let mut da = [
            DMatrix::zeros(n_obs, 1),
            DMatrix::zeros(n_obs, 1),
            DMatrix::zeros(n_obs, 1),
        ];
        for c in 0..3 {
            da[c].view_mut((offset, 0), (m2, 1)).copy_from(&rc.da[c]);
        }
        let d2a = rc.d2a.map(|src| {
            std::array::from_fn(|pair| {
                let mut m = DMatrix::zeros(n_obs, 1);
                m.view_mut((offset, 0), (m2, 1)).copy_from(&src[pair]);
                m
            })
        });
        Ok(UserColumns { a, da, d2a })
    }

    /// Concatenate user blocks into the full A matrix.
    pub fn assemble(&self, cols: &[UserColumns]) -> DMatrix<Complex64> {
        let cpu = self.cols_per_user();
        let mut a = DMatrix::zeros(self.n_obs(), cols.len() * cpu);
        for (k, uc) in cols.iter().enumerate() {
            a.view_mut((0, k * cpu), (self.n_obs(), cpu)).copy_from(&uc.a);
        }
        a
    }

    /// Objective value from a pre-assembled A.
    pub fn eval_assembled(&self, a: &DMatrix<Complex64>) -> Result<f64> {
        let ga = &self.g_precision * a;
        let upsilon = &self.p0 + a.adjoint() * &ga;
        let solver = HermitianSolver::new(&upsilon)?;
        let xi = a.adjoint() * &self.gz;
        let v = solver.solve_vec(&xi);
        Ok(xi.dotc(&v).re)
    }

    /// Log message value at the given user positions.
    pub fn eval(&self, positions: &[CartesianPosition]) -> Result<f64> {
        Ok(self.evaluate(positions, 0)?.value)
    }

    /// Value plus derivatives; `order` 0, 1, or 2.
    pub fn evaluate(&self, positions: &[CartesianPosition], order: usize) -> Result<Evaluation> {
        if positions.len() != self.num_users {
            return Err(Error::InvalidArgument(format!(
                "expected {} user positions, got {}",
                self.num_users,
                positions.len()
            )));
        }
        let cpu = self.cols_per_user();
        let k_users = positions.len();
        let cols: Vec<UserColumns> = positions
            .iter()
            .enumerate()
            .map(|(k, p)| self.user_columns(k, p, order))
            .collect::<Result<_>>()?;
        let a = self.assemble(&cols);
        let ga = &self.g_precision * &a;
        let upsilon = &self.p0 + a.adjoint() * &ga;
        let solver = HermitianSolver::new(&upsilon)?;
        let xi = a.adjoint() * &self.gz;
        let v = solver.solve_vec(&xi);
        let value = xi.dotc(&v).re;
        if order == 0 {
            return Ok(Evaluation {
                value,
                gradient: None,
                hessian: None,
            });
        }

        let n_coords = 3 * k_users;
        let r = &self.z - &a * &v;
        let gr = &self.g_precision * &r;

        // s_a = (dA/da) v, nonzero only through user k(a)'s columns
        let mut s_vecs: Vec<DVector<Complex64>> = Vec::with_capacity(n_coords);
        for k in 0..k_users {
            for c in 0..3 {
                let vk = v.rows(k * cpu, cpu);
                s_vecs.push(&cols[k].da[c] * vk);
            }
        }
        let mut grad = DVector::zeros(n_coords);
        for (idx, s) in s_vecs.iter().enumerate() {
            grad[idx] = 2.0 * gr.dotc(s).re;
        }
        if order == 1 {
            return Ok(Evaluation {
                value,
                gradient: Some(grad),
                hessian: None,
            });
        }

        // per-coordinate auxiliaries for the Hessian
        let n_cols = a.ncols();
        let mut w_vecs: Vec<DVector<Complex64>> = Vec::with_capacity(n_coords);
        let mut t_vecs: Vec<DVector<Complex64>> = Vec::with_capacity(n_coords);
        for k in 0..k_users {
            for c in 0..3 {
                let dak = &cols[k].da[c];
                // dXi: rows of user k only
                let mut dxi = DVector::zeros(n_cols);
                let block = dak.adjoint() * &self.gz;
                dxi.rows_mut(k * cpu, cpu).copy_from(&block);
                // dUpsilon = X + X^H with X = (dA)^H (G A), rows of user k
                let x_block = dak.adjoint() * &ga;
                let mut dupsilon = DMatrix::zeros(n_cols, n_cols);
                dupsilon
                    .view_mut((k * cpu, 0), (cpu, n_cols))
                    .copy_from(&x_block);
                let dupsilon = &dupsilon + dupsilon.adjoint();
                let u_vec = dxi - &dupsilon * &v;
                let w_vec = solver.solve_vec(&u_vec);
                let idx = 3 * k + c;
                let t_inner = -&s_vecs[idx] - &a * &w_vec;
                t_vecs.push(&self.g_precision * t_inner);
                w_vecs.push(w_vec);
            }
        }

        let mut hess = DMatrix::zeros(n_coords, n_coords);
        for ka in 0..k_users {
            for ca in 0..3 {
                let ia = 3 * ka + ca;
                let vk = v.rows(ka * cpu, cpu).into_owned();
                for kb in 0..k_users {
                    for cb in 0..3 {
                        let ib = 3 * kb + cb;
                        if ib > ia {
                            continue;
                        }
                        let mut term = t_vecs[ib].dotc(&s_vecs[ia]).re;
                        // gr^H dA_a w_b, user ka columns of dA_a
                        let wb_block = w_vecs[ib].rows(ka * cpu, cpu);
                        let mixed = &cols[ka].da[ca] * wb_block;
                        term += gr.dotc(&mixed).re;
                        if ka == kb {
                            let d2 = cols[ka]
                                .d2a
                                .as_ref()
                                .expect("order-2 columns")
                                [pair_index(ca, cb)]
                            .clone();
                            let curv = d2 * &vk;
                            term += gr.dotc(&curv).re;
                        }
                        hess[(ia, ib)] = 2.0 * term;
                        hess[(ib, ia)] = hess[(ia, ib)];
                    }
                }
            }
        }
        let hess = symmetric_part(&hess);
        Ok(Evaluation {
            value,
            gradient: Some(grad),
            hessian: Some(hess),
        })
    }
}

/// One user's block of the measurement matrix B — the beamformed,
/// reference-normalized subarray responses — with position derivatives.
pub fn measurement_columns(
    spec: &PartitionSpec,
    w: &DMatrix<Complex64>,
    p: &CartesianPosition,
    kind: ChannelModelKind,
    order: usize,
) -> Result<UserColumns> {
    let g = &spec.geometry;
    let n_obs = w.nrows();
    let m2 = spec.num_subarrays();
    let mut a = DMatrix::zeros(n_obs, m2);
    let mut da = [
        DMatrix::zeros(n_obs, m2),
        DMatrix::zeros(n_obs, m2),
        DMatrix::zeros(n_obs, m2),
    ];
    let mut d2a = (order >= 2).then(|| std::array::from_fn::<_, 6, _>(|_| DMatrix::zeros(n_obs, m2)));
    for s in 1..=m2 {
        let (u, v) = spec.subarray_of(s);
        let q_ref = spec.reference_position(u, v)?;
        let ref_cd = unit_coeff_derivs(p, &q_ref, g.wavelength_m, kind, order)?;
        let (ref_i, ref_j) = spec.reference_index(u, v);
        for b in 1..=spec.ns_y {
            for aa in 1..=spec.ns_x {
                let (i, j) = spec.global_index(u, v, aa, b);
                let qd = if (i, j) == (ref_i, ref_j) {
                    CoeffDerivs::constant(c64(1.0), order)
                } else {
                    let q = g.antenna_position(i, j)?;
                    let cd = unit_coeff_derivs(p, &q, g.wavelength_m, kind, order)?;
                    quotient_derivs(&cd, &ref_cd, order)
                };
                let wc = g.flat_index(i, j);
                accumulate(&mut a, s - 1, w, wc, qd.value);
                if order >= 1 {
                    for c in 0..3 {
                        accumulate(&mut da[c], s - 1, w, wc, qd.grad[c]);
                    }
                }
                if let Some(d2) = d2a.as_mut() {
                    let h = qd.hess.as_ref().expect("order-2 quotient");
                    for i2 in 0..3 {
                        for j2 in 0..=i2 {
                            accumulate(&mut d2[pair_index(i2, j2)], s - 1, w, wc, h[(i2, j2)]);
                        }
                    }
                }
            }
        }
    }
    Ok(UserColumns { a, da, d2a })
}

/// The reference vector c(p) — per-subarray reference coefficients
/// normalized by the central subarray — with position derivatives.
pub fn reference_column(
    spec: &PartitionSpec,
    p: &CartesianPosition,
    kind: ChannelModelKind,
    order: usize,
) -> Result<UserColumns> {
    let g = &spec.geometry;
    let m2 = spec.num_subarrays();
    let q_c = spec.central_reference_position()?;
    let central_cd = unit_coeff_derivs(p, &q_c, g.wavelength_m, kind, order)?;
    let central = spec.central_subarray();
    let mut a = DMatrix::zeros(m2, 1);
    let mut da = [
        DMatrix::zeros(m2, 1),
        DMatrix::zeros(m2, 1),
        DMatrix::zeros(m2, 1),
    ];
    let mut d2a = (order >= 2).then(|| std::array::from_fn::<_, 6, _>(|_| DMatrix::zeros(m2, 1)));
    for s in 1..=m2 {
        let (u, v) = spec.subarray_of(s);
        let qd = if (u, v) == central {
            CoeffDerivs::constant(c64(1.0), order)
        } else {
            let q = spec.reference_position(u, v)?;
            let cd = unit_coeff_derivs(p, &q, g.wavelength_m, kind, order)?;
            quotient_derivs(&cd, &central_cd, order)
        };
        let row = s - 1;
        a[(row, 0)] = qd.value;
        if order >= 1 {
            for c in 0..3 {
                da[c][(row, 0)] = qd.grad[c];
            }
        }
        if let Some(d2) = d2a.as_mut() {
            let h = qd.hess.as_ref().expect("order-2 quotient");
            for i2 in 0..3 {
                for j2 in 0..=i2 {
                    d2[pair_index(i2, j2)][(row, 0)] = h[(i2, j2)];
                }
            }
        }
    }
    Ok(UserColumns { a, da, d2a })
}

fn accumulate(
    m: &mut DMatrix<Complex64>,
    col: usize,
    w: &DMatrix<Complex64>,
    w_col: usize,
    weight: Complex64,
) {
    if weight == Complex64::new(0.0, 0.0) {
        return;
    }
    for row in 0..m.nrows() {
        m[(row, col)] += w[(row, w_col)] * weight;
    }
}

/// Coordinate system for reported gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientDomain {
    Cartesian,
    Polar,
}

impl MessageObjective {
    /// Log message density (up to an additive constant).
    pub fn eval_log_message(&self, positions: &[CartesianPosition]) -> Result<f64> {
        self.eval(positions)
    }

    /// Value and gradient, in the requested coordinate system.
    pub fn grad_log_message(
        &self,
        positions: &[CartesianPosition],
        domain: GradientDomain,
    ) -> Result<(f64, DVector<f64>)> {
        let eval = self.evaluate(positions, 1)?;
        let grad = eval.gradient.expect("order-1 evaluation");
        let grad = match domain {
            GradientDomain::Cartesian => grad,
            GradientDomain::Polar => {
                let polar: Vec<PolarPosition> = positions
                    .iter()
                    .map(PolarPosition::from_cartesian)
                    .collect::<Result<_>>()?;
                cartesian_to_polar_gradient(&grad, &polar)?
            }
        };
        Ok((eval.value, grad))
    }

    /// Value, Cartesian gradient, and full symmetrized Hessian.
    pub fn hess_log_message(&self, positions: &[CartesianPosition]) -> Result<Evaluation> {
        self.evaluate(positions, 2)
    }
}

/// Map a Cartesian gradient (3 per user) to polar coordinates
/// (chi_x, chi_y, r per user) via the chain-rule transposed Jacobian.
pub fn cartesian_to_polar_gradient(
    grad: &DVector<f64>,
    polar: &[PolarPosition],
) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(grad.len());
    for (k, pp) in polar.iter().enumerate() {
        let t = pp.jacobian()?;
        let gk = Vector3::new(grad[3 * k], grad[3 * k + 1], grad[3 * k + 2]);
        let pk = t.transpose() * gk;
        for c in 0..3 {
            out[3 * k + c] = pk[c];
        }
    }
    Ok(out)
}

/// Central-difference gradient of a scalar field with per-coordinate step
/// `step * max(1, |x_i|)`.
pub fn fd_gradient<F>(f: &F, x: &DVector<f64>, step: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[i] += h;
        lo[i] -= h;
        g[i] = (f(&hi) - f(&lo)) / (2.0 * h);
    }
    g
}

/// Central-difference Jacobian of a vector field.
pub fn fd_jacobian<F>(f: &F, x: &DVector<f64>, step: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let f0 = f(x);
    let mut j = DMatrix::zeros(f0.len(), x.len());
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[i] += h;
        lo[i] -= h;
        j.set_column(i, &((f(&hi) - f(&lo)) / (2.0 * h)));
    }
    j
}

/// Hessian estimate as central differences of central-difference gradients.
pub fn fd_hessian<F>(f: &F, x: &DVector<f64>, step: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let grad = |y: &DVector<f64>| fd_gradient(f, y, step);
    let h = fd_jacobian(&grad, x, step);
    symmetric_part(&h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::default_alpha;
    use crate::geometry::ArrayGeometry;
    use crate::linalg::ridge_inverse;
    use crate::partition::{build_b, make_partition, reference_vector};
    use crate::rf::{random_beamformer, NoiseModel};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn fd_complex_grad(
        p: &CartesianPosition,
        q: &CartesianPosition,
        lambda: f64,
        kind: ChannelModelKind,
    ) -> Vector3<Complex64> {
        let x0 = DVector::from_vec(vec![p.x, p.y, p.z]);
        let eval = |x: &DVector<f64>, part: fn(Complex64) -> f64| {
            let pp = CartesianPosition::new(x[0], x[1], x[2]);
            part(unit_coeff_derivs(&pp, q, lambda, kind, 0).unwrap().value)
        };
        let gre = fd_gradient(&|x| eval(x, |c| c.re), &x0, 1e-7);
        let gim = fd_gradient(&|x| eval(x, |c| c.im), &x0, 1e-7);
        Vector3::new(
            Complex64::new(gre[0], gim[0]),
            Complex64::new(gre[1], gim[1]),
            Complex64::new(gre[2], gim[2]),
        )
    }

    #[test]
    fn coeff_gradient_matches_fd() {
        let mut rng = ChaCha20Rng::seed_from_u64(404);
        let lambda = 0.05;
        let q = CartesianPosition::new(0.1, -0.05, 0.0);
        for kind in [ChannelModelKind::Exact, ChannelModelKind::Approximate] {
            for _ in 0..50 {
                let p = CartesianPosition::new(
                    rng.gen::<f64>() * 4.0 - 2.0,
                    rng.gen::<f64>() * 4.0 - 2.0,
                    2.0 + rng.gen::<f64>() * 8.0,
                );
                let cd = unit_coeff_derivs(&p, &q, lambda, kind, 1).unwrap();
                let fd = fd_complex_grad(&p, &q, lambda, kind);
                for c in 0..3 {
                    let scale = cd.grad.iter().map(|x| x.norm()).fold(0.0, f64::max);
                    assert!(
                        (cd.grad[c] - fd[c]).norm() / scale < 1e-6,
                        "grad mismatch {kind:?} at {p:?}: {} vs {}",
                        cd.grad[c],
                        fd[c]
                    );
                }
            }
        }
    }

    #[test]
    fn coeff_hessian_matches_fd_of_gradient() {
        let mut rng = ChaCha20Rng::seed_from_u64(405);
        let lambda = 0.05;
        let q = CartesianPosition::new(-0.2, 0.3, 0.0);
        for kind in [ChannelModelKind::Exact, ChannelModelKind::Approximate] {
            for _ in 0..20 {
                let p = CartesianPosition::new(
                    rng.gen::<f64>() * 3.0 - 1.5,
                    rng.gen::<f64>() * 3.0 - 1.5,
                    2.0 + rng.gen::<f64>() * 6.0,
                );
                let cd = unit_coeff_derivs(&p, &q, lambda, kind, 2).unwrap();
                let h = cd.hess.unwrap();
                // symmetric
                assert!((h - h.transpose()).norm() < 1e-10 * h.norm());
                // finite differences of the analytic gradient
                let x0 = DVector::from_vec(vec![p.x, p.y, p.z]);
                for part in 0..2 {
                    let gfun = |x: &DVector<f64>| {
                        let pp = CartesianPosition::new(x[0], x[1], x[2]);
                        let g = unit_coeff_derivs(&pp, &q, lambda, kind, 1).unwrap().grad;
                        DVector::from_vec(
                            g.iter()
                                .map(|c| if part == 0 { c.re } else { c.im })
                                .collect(),
                        )
                    };
                    let jfd = fd_jacobian(&gfun, &x0, 1e-6);
                    let scale = h.norm();
                    for i in 0..3 {
                        for j in 0..3 {
                            let analytic = if part == 0 { h[(i, j)].re } else { h[(i, j)].im };
                            assert!(
                                (analytic - jfd[(i, j)]).abs() / scale < 1e-5,
                                "hess mismatch {kind:?} part {part} ({i},{j})"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn boresight_gamma_gradient_is_axial() {
        // directly over the antenna, the amplitude gradient has no lateral
        // component; the coefficient gradient's x/y parts are then purely
        // from the phase factor, which is imaginary there
        let lambda = 0.05;
        let q = CartesianPosition::new(0.0, 0.0, 0.0);
        let p = CartesianPosition::new(0.0, 0.0, 5.0);
        let cd = channel_coeff_derivatives(default_alpha(lambda), &p, &q, lambda, 1).unwrap();
        // h = alpha/d * exp(...) on boresight; lateral derivative of gamma
        // and of d both vanish, so d h/dx = dh/dy = 0
        assert!(cd.grad[0].norm() < 1e-12 * cd.grad[2].norm());
        assert!(cd.grad[1].norm() < 1e-12 * cd.grad[2].norm());
    }

    #[test]
    fn quadratic_fd_oracles_agree() {
        // sanity for the finite-difference helpers themselves
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.5, -0.2, 0.0, -0.2, 0.9]);
        let f = |x: &DVector<f64>| (x.transpose() * &a * x)[(0, 0)];
        let x = DVector::from_vec(vec![0.4, -1.2, 2.0]);
        let g = fd_gradient(&f, &x, 1e-6);
        let expect = (&a + a.transpose()) * &x;
        assert!((g - &expect).norm() < 1e-7 * expect.norm().max(1.0));
        let h = fd_hessian(&f, &x, 1e-4);
        let expect_h = &a + a.transpose();
        assert!((h - &expect_h).norm() < 1e-5 * expect_h.norm());
        // norm-squared gradient
        let f2 = |x: &DVector<f64>| x.norm_squared();
        let g2 = fd_gradient(&f2, &x, 1e-7);
        assert!((g2 - x.map(|v| 2.0 * v)).norm() < 1e-8 * x.norm());
        // affine function has zero Hessian
        let f3 = |x: &DVector<f64>| 1.5 * x[0] - 2.0 * x[1] + 0.25 * x[2] + 3.0;
        let h3 = fd_hessian(&f3, &x, 1e-4);
        assert!(h3.norm() < 1e-6);
    }

    struct TestSetup {
        xi: MessageObjective,
        psi: MessageObjective,
        positions: Vec<CartesianPosition>,
    }

    fn build_setup(seed: u64, k_users: usize, model: ChannelModelKind) -> TestSetup {
        let g = ArrayGeometry::new(9, 9, 0.025, 0.05).unwrap();
        let spec = make_partition(&g, 3).unwrap();
        let n_rf = 12;
        let w = random_beamformer(n_rf, g.num_antennas(), seed).weights;
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xabcdef);
        let positions: Vec<CartesianPosition> = (0..k_users)
            .map(|_| {
                PolarPosition::new(
                    rng.gen::<f64>() * 1.0 - 0.5,
                    rng.gen::<f64>() * 1.0 - 0.5,
                    4.0 + rng.gen::<f64>() * 5.0,
                )
                .unwrap()
                .to_cartesian()
                .unwrap()
            })
            .collect();

        // keep the prior and data terms of Upsilon on comparable scales so
        // the finite-difference oracle is not dominated by solver rounding
        let sigma2 = 1e-6;
        let nm = NoiseModel::new(sigma2, &w);
        let cn_inv = HermitianSolver::new(&nm.covariance).unwrap().inverse();
        // synthetic received signal from the true positions
        let b = build_b(&positions, &w, &spec).unwrap();
        let mut rho = DVector::zeros(k_users * spec.num_subarrays());
        for (k, p) in positions.iter().enumerate() {
            let c = reference_vector(p, &spec).unwrap();
            for s in 0..spec.num_subarrays() {
                rho[k * spec.num_subarrays() + s] = c[s] * Complex64::new(1e-4, 2e-5);
            }
        }
        let y = &b * &rho;

        let m2 = spec.num_subarrays();
        // a generic Hermitian PD rho-belief precision for the xi objective
        let mut p0 = DMatrix::zeros(k_users * m2, k_users * m2);
        for i in 0..k_users * m2 {
            p0[(i, i)] = Complex64::new(1e6 + i as f64, 0.0);
        }
        let xi = MessageObjective::new(
            MessageKind::Xi,
            model,
            spec,
            Some(w.clone()),
            cn_inv,
            y,
            p0,
            k_users,
        )
        .unwrap();

        // psi objective: a Hermitian PD incoming precision and a mean
        let n = k_users * m2;
        let mut gmat = DMatrix::zeros(n, n);
        let mut rng2 = ChaCha20Rng::seed_from_u64(seed ^ 0x1234);
        for i in 0..n {
            for j in 0..n {
                gmat[(i, j)] = Complex64::new(rng2.gen::<f64>() - 0.5, rng2.gen::<f64>() - 0.5);
            }
        }
        let gmat = &gmat * gmat.adjoint() + DMatrix::identity(n, n).map(|x: f64| c64(x * n as f64));
        let mu = DVector::from_fn(n, |i, _| {
            Complex64::new((i as f64 * 0.13).sin(), (i as f64 * 0.29).cos()) * 1e-4
        });
        let mut p0_psi = DMatrix::zeros(k_users, k_users);
        for i in 0..k_users {
            p0_psi[(i, i)] = c64(1e-9);
        }
        let psi = MessageObjective::new(
            MessageKind::Psi,
            model,
            spec,
            None,
            gmat,
            mu,
            p0_psi,
            k_users,
        )
        .unwrap();

        // evaluate derivatives away from the fitted optimum so gradients
        // have generic magnitude
        let positions = positions
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let s = 0.05 * (1.0 + 0.3 * k as f64);
                CartesianPosition::new(p.x + s, p.y - 0.7 * s, p.z + 1.3 * s)
            })
            .collect();

        TestSetup { xi, psi, positions }
    }

    fn positions_to_vec(ps: &[CartesianPosition]) -> DVector<f64> {
        DVector::from_vec(ps.iter().flat_map(|p| [p.x, p.y, p.z]).collect())
    }

    fn vec_to_positions(x: &DVector<f64>) -> Vec<CartesianPosition> {
        (0..x.len() / 3)
            .map(|k| CartesianPosition::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]))
            .collect()
    }

    #[test]
    fn objective_gradient_matches_fd() {
        for (seed, k_users) in [(1u64, 1usize), (2, 2), (3, 2)] {
            for model in [ChannelModelKind::Exact, ChannelModelKind::Approximate] {
                let setup = build_setup(seed, k_users, model);
                for obj in [&setup.xi, &setup.psi] {
                    let x0 = positions_to_vec(&setup.positions);
                    let eval = obj.evaluate(&setup.positions, 1).unwrap();
                    let grad = eval.gradient.unwrap();
                    let f = |x: &DVector<f64>| obj.eval(&vec_to_positions(x)).unwrap();
                    let fd = fd_gradient(&f, &x0, 1e-7);
                    let scale = grad.norm().max(fd.norm());
                    assert!(
                        (&grad - &fd).norm() / scale < 1e-5,
                        "gradient mismatch kind={:?} model={model:?} seed={seed}: rel {}",
                        obj.kind,
                        (&grad - &fd).norm() / scale
                    );
                }
            }
        }
    }

    #[test]
    fn objective_hessian_matches_fd_of_analytic_gradient() {
        for (seed, k_users) in [(11u64, 1usize), (12, 2)] {
            let setup = build_setup(seed, k_users, ChannelModelKind::Exact);
            for obj in [&setup.xi, &setup.psi] {
                let x0 = positions_to_vec(&setup.positions);
                let eval = obj.evaluate(&setup.positions, 2).unwrap();
                let hess = eval.hessian.unwrap();
                assert!((&hess - hess.transpose()).norm() < 1e-10 * hess.norm().max(1.0));
                let gfun = |x: &DVector<f64>| {
                    obj.evaluate(&vec_to_positions(x), 1)
                        .unwrap()
                        .gradient
                        .unwrap()
                };
                let fd = fd_jacobian(&gfun, &x0, 1e-6);
                let fd = symmetric_part(&fd);
                let scale = hess.norm().max(fd.norm());
                assert!(
                    (&hess - &fd).norm() / scale < 1e-4,
                    "hessian mismatch kind={:?} seed={seed}: rel {}",
                    obj.kind,
                    (&hess - &fd).norm() / scale
                );
            }
        }
    }

    #[test]
    fn zero_observation_means_zero_objective() {
        let mut setup = build_setup(21, 2, ChannelModelKind::Exact);
        setup.xi.z.fill(Complex64::new(0.0, 0.0));
        setup.xi.gz.fill(Complex64::new(0.0, 0.0));
        let eval = setup.xi.evaluate(&setup.positions, 1).unwrap();
        assert_eq!(eval.value, 0.0);
        assert!(eval.gradient.unwrap().norm() < 1e-30);

        setup.psi.z.fill(Complex64::new(0.0, 0.0));
        setup.psi.gz.fill(Complex64::new(0.0, 0.0));
        let eval = setup.psi.evaluate(&setup.positions, 1).unwrap();
        assert_eq!(eval.value, 0.0);
        assert!(eval.gradient.unwrap().norm() < 1e-30);
    }

    #[test]
    fn scalar_case_matches_hand_formula() {
        // K = 1, M = 1, N_RF = 1: everything is scalar arithmetic
        let g = ArrayGeometry::new(3, 3, 0.025, 0.05).unwrap();
        let spec = make_partition(&g, 1).unwrap();
        let w = random_beamformer(1, 9, 5).weights;
        let p = CartesianPosition::new(0.2, -0.1, 4.0);
        let y = DVector::from_vec(vec![Complex64::new(3.0e-4, -1.0e-4)]);
        let cn = DMatrix::from_vec(1, 1, vec![c64(2.0e-9)]);
        let cn_inv = DMatrix::from_vec(1, 1, vec![c64(1.0 / 2.0e-9)]);
        let p0 = DMatrix::from_vec(1, 1, vec![c64(7.0e3)]);
        let obj = MessageObjective::new(
            MessageKind::Xi,
            ChannelModelKind::Exact,
            spec,
            Some(w.clone()),
            cn_inv.clone(),
            y.clone(),
            p0.clone(),
            1,
        )
        .unwrap();
        let value = obj.eval(&[p]).unwrap();

        // hand evaluation: the single B column is sum_i w_i d_i
        let alpha = default_alpha(g.wavelength_m);
        let q_ref = spec.central_reference_position().unwrap();
        let h_ref = crate::channel::coeff(alpha, &p, &q_ref, g.wavelength_m).unwrap();
        let mut b = Complex64::new(0.0, 0.0);
        for j in 1..=3 {
            for i in 1..=3 {
                let q = g.antenna_position(i, j).unwrap();
                let h = crate::channel::coeff(alpha, &p, &q, g.wavelength_m).unwrap();
                b += w[(0, g.flat_index(i, j))] * (h / h_ref);
            }
        }
        let xi = b.conj() * y[0] / cn[(0, 0)];
        let upsilon = p0[(0, 0)] + b.conj() * b / cn[(0, 0)];
        let expect = (xi.conj() * xi / upsilon).re;
        assert_relative_eq!(value, expect, max_relative = 1e-12);
    }

    #[test]
    fn polar_gradient_is_chain_rule_transform() {
        let setup = build_setup(31, 2, ChannelModelKind::Exact);
        let eval = setup.xi.evaluate(&setup.positions, 1).unwrap();
        let cart = eval.gradient.unwrap();
        let polar: Vec<PolarPosition> = setup
            .positions
            .iter()
            .map(|p| PolarPosition::from_cartesian(p).unwrap())
            .collect();
        let pol = cartesian_to_polar_gradient(&cart, &polar).unwrap();
        for (k, pp) in polar.iter().enumerate() {
            let t = pp.jacobian().unwrap();
            let gk = Vector3::new(cart[3 * k], cart[3 * k + 1], cart[3 * k + 2]);
            let expect = t.transpose() * gk;
            for c in 0..3 {
                assert_relative_eq!(pol[3 * k + c], expect[c], max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn cross_user_blocks_small_for_separated_users() {
        let g = ArrayGeometry::new(12, 12, 0.025, 0.05).unwrap();
        let spec = make_partition(&g, 3).unwrap();
        let n_rf = 24;
        let w = random_beamformer(n_rf, g.num_antennas(), 8).weights;
        let positions = vec![
            PolarPosition::new(-0.5, 0.0, 5.0).unwrap().to_cartesian().unwrap(),
            PolarPosition::new(0.55, 0.1, 9.0).unwrap().to_cartesian().unwrap(),
        ];
        let sigma2 = 1e-10;
        let nm = NoiseModel::new(sigma2, &w);
        let cn_inv = HermitianSolver::new(&nm.covariance).unwrap().inverse();
        let b = build_b(&positions, &w, &spec).unwrap();
        let m2 = spec.num_subarrays();
        let mut rho = DVector::zeros(2 * m2);
        for (k, p) in positions.iter().enumerate() {
            let c = reference_vector(p, &spec).unwrap();
            for s in 0..m2 {
                rho[k * m2 + s] = c[s] * Complex64::new(1e-4, 0.0);
            }
        }
        let y = &b * &rho;
        let p0 = DMatrix::identity(2 * m2, 2 * m2).map(|x: f64| c64(x * 1e-6));
        let obj = MessageObjective::new(
            MessageKind::Xi,
            ChannelModelKind::Exact,
            spec,
            Some(w),
            cn_inv,
            y,
            p0,
            2,
        )
        .unwrap();
        let eval = obj.evaluate(&positions, 2).unwrap();
        let h = eval.hessian.unwrap();
        let d1 = h.view((0, 0), (3, 3)).into_owned();
        let d2 = h.view((3, 3), (3, 3)).into_owned();
        let cross = h.view((0, 3), (3, 3)).into_owned();
        let dmin = d1.norm().min(d2.norm());
        assert!(
            cross.norm() < dmin,
            "cross-user coupling should stay below self-coupling: {} vs {}",
            cross.norm(),
            dmin
        );
    }

    #[test]
    fn ridge_inverse_feeds_objective() {
        // the rho-belief precision produced from a rank-deficient covariance
        // must keep the objective finite
        let setup = build_setup(77, 1, ChannelModelKind::Exact);
        let m2 = setup.xi.spec.num_subarrays();
        let c = reference_vector(&setup.positions[0], &setup.xi.spec).unwrap();
        let cov = (&c * c.adjoint()).map(|e| e * 1e9);
        let prec = ridge_inverse(&cov).unwrap();
        let obj = MessageObjective::new(
            MessageKind::Xi,
            ChannelModelKind::Exact,
            setup.xi.spec,
            setup.xi.w.clone(),
            setup.xi.g_precision.clone(),
            setup.xi.z.clone(),
            prec,
            1,
        )
        .unwrap();
        let v = obj.eval(&setup.positions).unwrap();
        assert!(v.is_finite());
        assert_eq!(cov.nrows(), m2);
    }
}
