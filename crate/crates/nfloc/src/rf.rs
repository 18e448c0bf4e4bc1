//! Analog beamformer generation, the colored-noise model C_n = sigma^2 W W^H,
//! received-signal synthesis, and the SNR convention.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::f64::consts::PI;

use crate::channel::{channel_matrix, UserChannelParams};
use crate::error::{Error, Result};
use crate::geometry::ArrayGeometry;

/// Unit-modulus analog beamforming matrix, N_RF x N_B.
#[derive(Debug, Clone, PartialEq)]
pub struct Beamformer {
    pub weights: DMatrix<Complex64>,
    pub seed: u64,
}

impl Beamformer {
    pub fn n_rf(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_b(&self) -> usize {
        self.weights.ncols()
    }
}

/// Noise power and the combined-noise covariance sigma^2 W W^H.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub sigma2: f64,
    pub covariance: DMatrix<Complex64>,
}

impl NoiseModel {
    pub fn new(sigma2: f64, w: &DMatrix<Complex64>) -> Self {
        let covariance = (w * w.adjoint()).map(|e| e * sigma2);
        Self { sigma2, covariance }
    }
}

/// One combined measurement vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedSignal {
    pub y: DVector<Complex64>,
    pub noise_seed: u64,
}

/// Uplink scene: geometry, users, beamformer, and noise level.
#[derive(Debug, Clone)]
pub struct UplinkScenario {
    pub geometry: ArrayGeometry,
    pub users: Vec<UserChannelParams>,
    pub beamformer: Beamformer,
    pub sigma2: f64,
}

impl UplinkScenario {
    pub fn noise_model(&self) -> NoiseModel {
        NoiseModel::new(self.sigma2, &self.beamformer.weights)
    }
}

/// Random phase-shifter network: entries e^{j phi} with phi i.i.d. uniform
/// on [0, 2 pi). Deterministic given the seed.
pub fn random_beamformer(n_rf: usize, n_b: usize, seed: u64) -> Beamformer {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let weights = DMatrix::from_fn(n_rf, n_b, |_, _| {
        Complex64::from_polar(1.0, rng.gen::<f64>() * 2.0 * PI)
    });
    Beamformer { weights, seed }
}

/// Noiseless combined mean `sum_k sqrt(P_k) x_k W h_k`.
pub fn noiseless_mean(scenario: &UplinkScenario) -> Result<DVector<Complex64>> {
    let w = &scenario.beamformer.weights;
    let mut mean = DVector::zeros(w.nrows());
    for user in &scenario.users {
        let h = channel_matrix(user, &scenario.geometry)?.to_vector();
        let scale = Complex64::new(user.tx_power_w.sqrt(), 0.0) * user.pilot;
        mean += (w * h) * scale;
    }
    Ok(mean)
}

/// Synthesize `y = sum_k sqrt(P_k) x_k W h_k + W n_0` with antenna-domain
/// noise `n_0 ~ CN(0, sigma^2 I)`, which realizes n ~ CN(0, sigma^2 W W^H)
/// exactly.
pub fn synthesize_received(scenario: &UplinkScenario, seed: u64) -> Result<ReceivedSignal> {
    let mut y = noiseless_mean(scenario)?;
    y += &combined_noise(scenario, seed);
    Ok(ReceivedSignal { y, noise_seed: seed })
}

/// One combined noise draw `W n_0`.
pub fn combined_noise(scenario: &UplinkScenario, seed: u64) -> DVector<Complex64> {
    let w = &scenario.beamformer.weights;
    if scenario.sigma2 == 0.0 {
        return DVector::zeros(w.nrows());
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let std = (scenario.sigma2 / 2.0).sqrt();
    let n0 = DVector::from_fn(w.ncols(), |_, _| {
        Complex64::new(std * gaussian(&mut rng), std * gaussian(&mut rng))
    });
    w * n0
}

fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Noise power giving the target SNR, defined as
/// `|signal|^2 / (sigma^2 trace(W W^H)) = 10^{snr_db / 10}`; with a
/// unit-modulus beamformer `trace(W W^H) = N_RF N_B`.
pub fn sigma2_for_snr(scenario: &UplinkScenario, target_snr_db: f64) -> Result<f64> {
    let mean = noiseless_mean(scenario)?;
    let signal_power = mean.norm_squared();
    if signal_power <= 0.0 {
        return Err(Error::InvalidArgument("zero signal power".into()));
    }
    let trace_wwh = scenario.beamformer.weights.norm_squared();
    Ok(signal_power / (trace_wwh * 10f64.powf(target_snr_db / 10.0)))
}
