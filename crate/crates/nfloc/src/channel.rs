//! Near-field channel coefficients with a directional radiation pattern and
//! free-space path loss, plus the phase-only approximate model and the
//! far-field degenerate model.

use nalgebra::DMatrix;
use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, CartesianPosition};

/// Default complex gain `lambda^2 / (16 pi^2)`.
pub fn default_alpha(wavelength_m: f64) -> Complex64 {
    Complex64::new(wavelength_m * wavelength_m / (16.0 * PI * PI), 0.0)
}

/// Transmit-side parameters of one user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserChannelParams {
    pub position: CartesianPosition,
    /// Complex channel gain `alpha_k`.
    pub complex_gain: Complex64,
    /// Transmit power `P_k` in watts.
    pub tx_power_w: f64,
    /// Unit-magnitude pilot symbol `x_k`.
    pub pilot: Complex64,
}

impl UserChannelParams {
    pub fn new(position: CartesianPosition, wavelength_m: f64) -> Self {
        Self {
            position,
            complex_gain: default_alpha(wavelength_m),
            tx_power_w: 1.0,
            pilot: Complex64::new(1.0, 0.0),
        }
    }
}

/// Full per-antenna channel of one user, `n_x x n_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub entries: DMatrix<Complex64>,
    pub geometry: ArrayGeometry,
}

impl ChannelMatrix {
    /// Channel vector under the global column-major vec(.) ordering.
    pub fn to_vector(&self) -> nalgebra::DVector<Complex64> {
        nalgebra::DVector::from_column_slice(self.entries.as_slice())
    }
}

/// Normalized power radiation pattern: `cos^3(theta)` for theta in
/// [0, pi/2], zero behind the array plane. Azimuth independent.
pub fn radiation_gain(theta: f64) -> f64 {
    if theta <= PI / 2.0 {
        let c = theta.cos();
        c * c * c
    } else {
        0.0
    }
}

/// Amplitude gain `gamma = (e_z . (p - q) / |p - q|)^{3/2}`.
///
/// Errors when the user is at or behind the array plane relative to the
/// antenna: a zero channel column would break reference normalization.
pub fn amplitude_gain(p: &CartesianPosition, q: &CartesianPosition) -> Result<f64> {
    let diff = p.as_vector() - q.as_vector();
    let d = diff.norm();
    if d == 0.0 {
        return Err(Error::Domain("user coincides with an antenna".into()));
    }
    let cos_theta = diff.z / d;
    if cos_theta <= 0.0 {
        return Err(Error::Domain(format!(
            "user at or behind array plane (cos theta = {cos_theta})"
        )));
    }
    Ok(cos_theta.powf(1.5))
}

/// Channel coefficient between a point source at `p` with gain `alpha` and
/// an antenna at `q`: `alpha * gamma * (1/d) * exp(-j 2 pi d / lambda)`.
pub fn coeff(
    alpha: Complex64,
    p: &CartesianPosition,
    q: &CartesianPosition,
    wavelength_m: f64,
) -> Result<Complex64> {
    let gamma = amplitude_gain(p, q)?;
    let d = p.distance(q);
    let phase = -2.0 * PI * d / wavelength_m;
    Ok(alpha * gamma / d * Complex64::from_polar(1.0, phase))
}

/// Channel coefficient for a configured user.
pub fn channel_coeff(
    user: &UserChannelParams,
    q: &CartesianPosition,
    wavelength_m: f64,
) -> Result<Complex64> {
    coeff(user.complex_gain, &user.position, q, wavelength_m)
}

/// Exact per-antenna channel matrix of one user.
pub fn channel_matrix(user: &UserChannelParams, g: &ArrayGeometry) -> Result<ChannelMatrix> {
    let mut entries = DMatrix::zeros(g.n_x, g.n_y);
    for j in 1..=g.n_y {
        for i in 1..=g.n_x {
            let q = g.antenna_position(i, j)?;
            entries[(i - 1, j - 1)] = channel_coeff(user, &q, g.wavelength_m)?;
        }
    }
    Ok(ChannelMatrix {
        entries,
        geometry: *g,
    })
}

/// Global reference antenna (ceil((n+1)/2) on each axis), 1-based.
pub fn reference_antenna(g: &ArrayGeometry) -> (usize, usize) {
    ((g.n_x + 2) / 2, (g.n_y + 2) / 2)
}

/// Approximate channel matrix: amplitude ratios to the reference antenna
/// set to one, only the phase differences retained.
pub fn approx_channel_matrix(user: &UserChannelParams, g: &ArrayGeometry) -> Result<ChannelMatrix> {
    let (ri, rj) = reference_antenna(g);
    let q_ref = g.antenna_position(ri, rj)?;
    let h_ref = channel_coeff(user, &q_ref, g.wavelength_m)?;
    let d_ref = user.position.distance(&q_ref);
    let mut entries = DMatrix::zeros(g.n_x, g.n_y);
    for j in 1..=g.n_y {
        for i in 1..=g.n_x {
            let q = g.antenna_position(i, j)?;
            amplitude_gain(&user.position, &q)?;
            let d = user.position.distance(&q);
            let phase = -2.0 * PI * (d - d_ref) / g.wavelength_m;
            entries[(i - 1, j - 1)] = h_ref * Complex64::from_polar(1.0, phase);
        }
    }
    Ok(ChannelMatrix {
        entries,
        geometry: *g,
    })
}

/// Far-field rank-1 channel: `gain * a_{n_x}(theta_x) a_{n_y}(theta_y)^T`
/// with steering vectors `a_N(theta)[n] = exp(j 2 pi (d/lambda) n cos theta)`.
pub fn farfield_channel_matrix(
    gain: Complex64,
    theta_x: f64,
    theta_y: f64,
    g: &ArrayGeometry,
) -> ChannelMatrix {
    let steer = |n: usize, theta: f64| -> Vec<Complex64> {
        (0..n)
            .map(|k| {
                Complex64::from_polar(
                    1.0,
                    2.0 * PI * g.spacing_m / g.wavelength_m * k as f64 * theta.cos(),
                )
            })
            .collect()
    };
    let ax = steer(g.n_x, theta_x);
    let ay = steer(g.n_y, theta_y);
    let entries = DMatrix::from_fn(g.n_x, g.n_y, |i, j| gain * ax[i] * ay[j]);
    ChannelMatrix {
        entries,
        geometry: *g,
    }
}
