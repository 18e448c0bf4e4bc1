//! Bayesian Cramér–Rao bounds for positions, central reference gains, and
//! reconstructed channels.
//!
//! The parameter vector is real, 5 entries per user:
//! `eta = [p_k^T, Re rho_k, Im rho_k]_k`, where `rho_k` is the effective
//! central reference gain (pilot and transmit power absorbed).

use nalgebra::{DMatrix, DVector, Vector3};
use num_complex::Complex64;

use crate::channel::channel_matrix;
use crate::deriv::channel_coeff_derivatives;
use crate::error::{Error, Result};
use crate::partition::PartitionSpec;
use crate::rf::UplinkScenario;

/// Prior plus data information, J = J_F + J_P.
#[derive(Debug, Clone)]
pub struct InformationMatrix {
    pub j_f: DMatrix<f64>,
    pub j_p: DMatrix<f64>,
}

impl InformationMatrix {
    pub fn total(&self) -> DMatrix<f64> {
        &self.j_f + &self.j_p
    }
}

/// Complex Jacobian of the noiseless beamformed mean w.r.t. eta,
/// N_RF x 5K. Position columns differentiate the channel directly; gain
/// columns are the normalized user responses times (1, j).
pub fn mean_jacobian(scenario: &UplinkScenario, spec: &PartitionSpec) -> Result<DMatrix<Complex64>> {
    let g = &scenario.geometry;
    let w = &scenario.beamformer.weights;
    let n_rf = w.nrows();
    let k_users = scenario.users.len();
    let q_ref = spec.central_reference_position()?;
    let mut d = DMatrix::zeros(n_rf, 5 * k_users);
    for (k, user) in scenario.users.iter().enumerate() {
        let scale = Complex64::new(user.tx_power_w.sqrt(), 0.0) * user.pilot;
        let h_ref = crate::channel::coeff(user.complex_gain, &user.position, &q_ref, g.wavelength_m)?;
        // accumulate W * (dh/dp) and W * h over antennas
        let mut wh: DVector<Complex64> = DVector::zeros(n_rf);
        let mut wdh: [DVector<Complex64>; 3] =
            [DVector::zeros(n_rf), DVector::zeros(n_rf), DVector::zeros(n_rf)];
        for j in 1..=g.n_y {
            for i in 1..=g.n_x {
                let q = g.antenna_position(i, j)?;
                let cd = channel_coeff_derivatives(
                    user.complex_gain,
                    &user.position,
                    &q,
                    g.wavelength_m,
                    1,
                )?;
                let col = w.column(g.flat_index(i, j));
                for row in 0..n_rf {
                    wh[row] += col[row] * cd.value;
                    for c in 0..3 {
                        wdh[c][row] += col[row] * cd.grad[c];
                    }
                }
            }
        }
        for c in 0..3 {
            d.set_column(5 * k + c, &wdh[c].map(|x| scale * x));
        }
        let u = wh.map(|x| x / h_ref);
        d.set_column(5 * k + 3, &u);
        d.set_column(5 * k + 4, &u.map(|x| x * Complex64::new(0.0, 1.0)));
    }
    Ok(d)
}

/// Data information J_F = 2 Re{ D^H C_n^{-1} D } evaluated at the true
/// parameters.
pub fn fisher_matrix(scenario: &UplinkScenario, spec: &PartitionSpec) -> Result<DMatrix<f64>> {
    let d = mean_jacobian(scenario, spec)?;
    let cn = scenario.noise_model().covariance;
    let cn_inv = crate::linalg::HermitianSolver::new(&crate::linalg::hermitian_part(&cn))?.inverse();
    let m = d.adjoint() * cn_inv * &d;
    let n = m.nrows();
    let mut j = DMatrix::zeros(n, n);
    for i in 0..n {
        for jj in 0..n {
            j[(i, jj)] = 2.0 * m[(i, jj)].re;
        }
    }
    Ok(crate::linalg::symmetric_part(&j))
}

/// Prior information: inverse prior variances per block,
/// blkdiag(1/nu I_3, (2/tau) I_2) per user.
pub fn prior_matrix(k_users: usize, nu_pri: f64, tau_pri: f64) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(5 * k_users, 5 * k_users);
    for k in 0..k_users {
        for c in 0..3 {
            j[(5 * k + c, 5 * k + c)] = 1.0 / nu_pri;
        }
        for c in 3..5 {
            j[(5 * k + c, 5 * k + c)] = 2.0 / tau_pri;
        }
    }
    j
}

fn ridge_inv_sym(j: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = crate::linalg::symmetric_part(j);
    if let Some(chol) = nalgebra::Cholesky::new(sym.clone()) {
        return crate::linalg::symmetric_part(&chol.inverse());
    }
    let eig = nalgebra::SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let floor = (1e-15 * max).max(f64::MIN_POSITIVE);
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v.max(floor));
    let mut out = DMatrix::zeros(j.nrows(), j.ncols());
    for i in 0..j.nrows() {
        let q = eig.eigenvectors.column(i);
        out += q * q.transpose() * inv_vals[i];
    }
    crate::linalg::symmetric_part(&out)
}

/// Per-user position variance bounds (diagonal of J^{-1} on the position
/// coordinates) and the aggregate RMSE bound
/// sqrt(sum_k tr([J^{-1}]_{pos,k}) / K).
pub fn position_bcrb(j: &DMatrix<f64>) -> Result<(Vec<Vector3<f64>>, f64)> {
    if j.nrows() % 5 != 0 || j.nrows() == 0 {
        return Err(Error::InvalidArgument(format!(
            "information matrix has {} rows, expected a multiple of 5",
            j.nrows()
        )));
    }
    let k_users = j.nrows() / 5;
    let inv = ridge_inv_sym(j);
    let mut per_user = Vec::with_capacity(k_users);
    let mut trace_sum = 0.0;
    for k in 0..k_users {
        let v = Vector3::new(
            inv[(5 * k, 5 * k)],
            inv[(5 * k + 1, 5 * k + 1)],
            inv[(5 * k + 2, 5 * k + 2)],
        );
        trace_sum += v.sum();
        per_user.push(v);
    }
    Ok((per_user, (trace_sum / k_users as f64).sqrt()))
}

/// Real Jacobian of the stacked channel [Re h_1; Im h_1; ...] w.r.t. eta.
pub fn channel_jacobian(scenario: &UplinkScenario, spec: &PartitionSpec) -> Result<DMatrix<f64>> {
    let g = &scenario.geometry;
    let n_b = g.num_antennas();
    let k_users = scenario.users.len();
    let q_ref = spec.central_reference_position()?;
    let mut t = DMatrix::zeros(2 * n_b * k_users, 5 * k_users);
    for (k, user) in scenario.users.iter().enumerate() {
        let row0 = 2 * n_b * k;
        let scale = Complex64::new(user.tx_power_w.sqrt(), 0.0) * user.pilot;
        let h_ref = crate::channel::coeff(user.complex_gain, &user.position, &q_ref, g.wavelength_m)?;
        let rho = scale * h_ref;
        for j in 1..=g.n_y {
            for i in 1..=g.n_x {
                let q = g.antenna_position(i, j)?;
                let cd = channel_coeff_derivatives(
                    user.complex_gain,
                    &user.position,
                    &q,
                    g.wavelength_m,
                    1,
                )?;
                let flat = g.flat_index(i, j);
                for c in 0..3 {
                    t[(row0 + flat, 5 * k + c)] = cd.grad[c].re;
                    t[(row0 + n_b + flat, 5 * k + c)] = cd.grad[c].im;
                }
                // h depends linearly on rho through h = (rho / (sqrt(P) x h_ref^{(c)}-free form)) g(p)
                let dre = cd.value / rho;
                t[(row0 + flat, 5 * k + 3)] = dre.re;
                t[(row0 + n_b + flat, 5 * k + 3)] = dre.im;
                let dim = dre * Complex64::new(0.0, 1.0);
                t[(row0 + flat, 5 * k + 4)] = dim.re;
                t[(row0 + n_b + flat, 5 * k + 4)] = dim.im;
            }
        }
    }
    Ok(t)
}

/// Per-entry variance bounds for the stacked real channel.
pub fn channel_bcrb(
    j: &DMatrix<f64>,
    scenario: &UplinkScenario,
    spec: &PartitionSpec,
) -> Result<DVector<f64>> {
    let t = channel_jacobian(scenario, spec)?;
    let inv = ridge_inv_sym(j);
    let m = &t * inv * t.transpose();
    Ok(DVector::from_fn(m.nrows(), |i, _| m[(i, i)]))
}

/// Aggregate channel NMSE bound: per-user bound energy normalized by the
/// true channel energy, averaged over users.
pub fn channel_nmse_bound(
    j: &DMatrix<f64>,
    scenario: &UplinkScenario,
    spec: &PartitionSpec,
) -> Result<f64> {
    let bounds = channel_bcrb(j, scenario, spec)?;
    let g = &scenario.geometry;
    let n_b = g.num_antennas();
    let k_users = scenario.users.len();
    let mut acc = 0.0;
    for (k, user) in scenario.users.iter().enumerate() {
        let h = channel_matrix(user, g)?.to_vector();
        let energy = h.norm_squared();
        let sum: f64 = bounds.rows(2 * n_b * k, 2 * n_b).iter().sum();
        acc += sum / energy;
    }
    Ok(acc / k_users as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::UserChannelParams;
    use crate::deriv::fd_jacobian;
    use crate::geometry::{ArrayGeometry, CartesianPosition, PolarPosition};
    use crate::partition::make_partition;
    use crate::rf::{noiseless_mean, random_beamformer};
    use approx::assert_relative_eq;

    fn scenario(k: usize, sigma2: f64, seed: u64) -> (UplinkScenario, PartitionSpec) {
        let g = ArrayGeometry::new(15, 15, 0.025, 0.05).unwrap();
        let spec = make_partition(&g, 3).unwrap();
        let polar = [
            PolarPosition::new(0.2, -0.1, 6.0).unwrap(),
            PolarPosition::new(-0.35, 0.2, 8.5).unwrap(),
            PolarPosition::new(0.05, 0.4, 7.0).unwrap(),
        ];
        let users = polar[..k]
            .iter()
            .map(|p| UserChannelParams::new(p.to_cartesian().unwrap(), g.wavelength_m))
            .collect();
        (
            UplinkScenario {
                geometry: g,
                users,
                beamformer: random_beamformer(24, g.num_antennas(), seed),
                sigma2,
            },
            spec,
        )
    }

    #[test]
    fn fisher_scales_inversely_with_noise() {
        let (mut sc, spec) = scenario(2, 1e-8, 1);
        let j1 = fisher_matrix(&sc, &spec).unwrap();
        sc.sigma2 *= 4.0;
        let j4 = fisher_matrix(&sc, &spec).unwrap();
        assert!((j1.clone() - j4.clone() * 4.0).norm() < 1e-8 * j1.norm());
    }

    #[test]
    fn fisher_symmetric_psd() {
        let (sc, spec) = scenario(2, 1e-9, 2);
        let j = fisher_matrix(&sc, &spec).unwrap() + prior_matrix(2, 1e9, 1e9);
        assert!((j.clone() - j.transpose()).norm() < 1e-12 * j.norm());
        let eig = nalgebra::SymmetricEigen::new(j.clone());
        assert!(eig.eigenvalues.min() >= -1e-8 * j.trace());
    }

    #[test]
    fn mean_jacobian_matches_fd() {
        let (sc, spec) = scenario(1, 1e-9, 3);
        let d = mean_jacobian(&sc, &spec).unwrap();
        // position columns: finite differences of the noiseless mean
        let p0 = sc.users[0].position;
        let x0 = DVector::from_vec(vec![p0.x, p0.y, p0.z]);
        for part in 0..2 {
            let f = |x: &DVector<f64>| {
                let mut s = sc.clone();
                s.users[0].position = CartesianPosition::new(x[0], x[1], x[2]);
                let m = noiseless_mean(&s).unwrap();
                DVector::from_fn(m.len(), |i, _| if part == 0 { m[i].re } else { m[i].im })
            };
            let fd = fd_jacobian(&f, &x0, 1e-7);
            for c in 0..3 {
                for row in 0..d.nrows() {
                    let analytic = if part == 0 { d[(row, c)].re } else { d[(row, c)].im };
                    let scale = d.column(c).norm();
                    assert!(
                        (analytic - fd[(row, c)]).abs() / scale < 1e-6,
                        "position column {c} row {row}"
                    );
                }
            }
        }
        // gain columns: the mean is rho * (W h / h_ref), so the derivative
        // in Re rho is exactly that normalized response
        let g = &sc.geometry;
        let q_ref = spec.central_reference_position().unwrap();
        let h_ref = crate::channel::coeff(
            sc.users[0].complex_gain,
            &sc.users[0].position,
            &q_ref,
            g.wavelength_m,
        )
        .unwrap();
        let mean = noiseless_mean(&sc).unwrap();
        let rho = h_ref; // P = 1, x = 1
        for row in 0..d.nrows() {
            let expect = mean[row] / rho;
            assert!((d[(row, 3)] - expect).norm() < 1e-9 * expect.norm().max(1e-30));
            let expect_im = expect * Complex64::new(0.0, 1.0);
            assert!((d[(row, 4)] - expect_im).norm() < 1e-9 * expect.norm().max(1e-30));
        }
    }

    #[test]
    fn single_user_gain_block_is_scaled_identity() {
        let (sc, spec) = scenario(1, 1e-9, 4);
        let j = fisher_matrix(&sc, &spec).unwrap();
        let block = j.view((3, 3), (2, 2)).into_owned();
        assert!(block[(0, 0)] > 0.0);
        assert_relative_eq!(block[(0, 0)], block[(1, 1)], max_relative = 1e-10);
        assert!(block[(0, 1)].abs() < 1e-8 * block[(0, 0)]);
    }

    #[test]
    fn prior_matrix_structure() {
        let j = prior_matrix(2, 1e9, 1e9);
        for i in 0..10 {
            for jj in 0..10 {
                if i == jj {
                    let expect = if i % 5 < 3 { 1e-9 } else { 2e-9 };
                    assert_relative_eq!(j[(i, jj)], expect, max_relative = 1e-12);
                } else {
                    assert_eq!(j[(i, jj)], 0.0);
                }
            }
        }
    }

    #[test]
    fn position_bound_scaling_and_monotonicity() {
        let (sc, spec) = scenario(2, 1e-14, 5);
        let jp = prior_matrix(2, 1e9, 1e9);
        let j1 = fisher_matrix(&sc, &spec).unwrap() + &jp;
        let (_, rmse1) = position_bcrb(&j1).unwrap();
        // 4x the noise doubles the bound in the prior-negligible regime
        let mut sc4 = sc.clone();
        sc4.sigma2 *= 4.0;
        let j4 = fisher_matrix(&sc4, &spec).unwrap() + &jp;
        let (_, rmse4) = position_bcrb(&j4).unwrap();
        assert_relative_eq!(rmse4, 2.0 * rmse1, max_relative = 1e-6);
        // nonincreasing across increasing SNR
        let mut last = f64::INFINITY;
        for snr_step in 0..6 {
            let mut s = sc.clone();
            s.sigma2 = 1e-12 / 10f64.powf(snr_step as f64 * 0.5);
            let j = fisher_matrix(&s, &spec).unwrap() + &jp;
            let (per_user, rmse) = position_bcrb(&j).unwrap();
            assert!(rmse <= last + 1e-15);
            assert!(per_user.iter().all(|v| v.iter().all(|&x| x >= 0.0)));
            last = rmse;
        }
    }

    #[test]
    fn channel_jacobian_matches_fd() {
        let (sc, spec) = scenario(1, 1e-9, 6);
        let t = channel_jacobian(&sc, &spec).unwrap();
        let g = &sc.geometry;
        let n_b = g.num_antennas();
        // positions: finite differences of the true channel
        let p0 = sc.users[0].position;
        let x0 = DVector::from_vec(vec![p0.x, p0.y, p0.z]);
        let f = |x: &DVector<f64>| {
            let mut u = sc.users[0].clone();
            u.position = CartesianPosition::new(x[0], x[1], x[2]);
            let h = channel_matrix(&u, g).unwrap().to_vector();
            let mut out = DVector::zeros(2 * n_b);
            for i in 0..n_b {
                out[i] = h[i].re;
                out[n_b + i] = h[i].im;
            }
            out
        };
        let fd = fd_jacobian(&f, &x0, 1e-7);
        let scale = t.view((0, 0), (2 * n_b, 3)).norm();
        for row in 0..2 * n_b {
            for c in 0..3 {
                assert!(
                    (t[(row, c)] - fd[(row, c)]).abs() / scale < 1e-6,
                    "channel jacobian ({row},{c})"
                );
            }
        }
        // gain-only uncertainty: bound pattern proportional to |h|^2
        let mut j = DMatrix::zeros(5, 5);
        for i in 0..5 {
            j[(i, i)] = if i < 3 { 1e30 } else { 1.0 };
        }
        let bounds = channel_bcrb(&j, &sc, &spec).unwrap();
        let h = channel_matrix(&sc.users[0], g).unwrap().to_vector();
        let rho_sq = {
            let q_ref = spec.central_reference_position().unwrap();
            crate::channel::coeff(sc.users[0].complex_gain, &p0, &q_ref, g.wavelength_m)
                .unwrap()
                .norm_sqr()
        };
        for i in 0..n_b {
            let per_entry = bounds[i] + bounds[n_b + i];
            let expect = 2.0 * h[i].norm_sqr() / rho_sq;
            assert_relative_eq!(per_entry, expect, max_relative = 1e-6);
        }
    }
}
