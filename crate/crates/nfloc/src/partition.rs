//! Array partitioning into M x M subarrays: reference antennas, normalized
//! subarray blocks D, the inter-subarray reference vector c, the measurement
//! matrix B of the compact model y = B rho + n, and channel reconstruction
//! from an estimated position and reference gain.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::channel::{coeff, default_alpha, ChannelMatrix};
use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, CartesianPosition};

/// Layout of an even M x M partition of the array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub geometry: ArrayGeometry,
    /// Subarrays per dimension.
    pub m: usize,
    /// Antennas per subarray along x.
    pub ns_x: usize,
    /// Antennas per subarray along y.
    pub ns_y: usize,
}

impl PartitionSpec {
    /// Number of subarrays `M^2`.
    pub fn num_subarrays(&self) -> usize {
        self.m * self.m
    }

    /// Antennas per subarray.
    pub fn subarray_size(&self) -> usize {
        self.ns_x * self.ns_y
    }

    /// Subarray index (u, v) for the flat subarray ordering s = (v-1)M + u.
    /// All indices 1-based.
    pub fn subarray_of(&self, s: usize) -> (usize, usize) {
        ((s - 1) % self.m + 1, (s - 1) / self.m + 1)
    }

    /// Flat subarray index for (u, v).
    pub fn flat_subarray(&self, u: usize, v: usize) -> usize {
        (v - 1) * self.m + u
    }

    /// Central subarray (ceil(M/2), ceil(M/2)).
    pub fn central_subarray(&self) -> (usize, usize) {
        ((self.m + 1) / 2, (self.m + 1) / 2)
    }

    /// Global 1-based antenna index of the reference antenna of subarray
    /// (u, v).
    pub fn reference_index(&self, u: usize, v: usize) -> (usize, usize) {
        (
            (u - 1) * self.ns_x + (self.ns_x + 1) / 2,
            (v - 1) * self.ns_y + (self.ns_y + 1) / 2,
        )
    }

    /// Position of the reference antenna of subarray (u, v).
    pub fn reference_position(&self, u: usize, v: usize) -> Result<CartesianPosition> {
        let (i, j) = self.reference_index(u, v);
        self.geometry.antenna_position(i, j)
    }

    /// Position of the central-subarray reference antenna.
    pub fn central_reference_position(&self) -> Result<CartesianPosition> {
        let (u, v) = self.central_subarray();
        self.reference_position(u, v)
    }

    /// Global 1-based antenna index for local antenna (a, b) of subarray
    /// (u, v).
    pub fn global_index(&self, u: usize, v: usize, a: usize, b: usize) -> (usize, usize) {
        ((u - 1) * self.ns_x + a, (v - 1) * self.ns_y + b)
    }
}

/// Build an even M x M partition; `m` must divide both array dimensions.
pub fn make_partition(g: &ArrayGeometry, m: usize) -> Result<PartitionSpec> {
    if m == 0 {
        return Err(Error::InvalidArgument("m must be positive".into()));
    }
    if g.n_x % m != 0 || g.n_y % m != 0 {
        return Err(Error::InvalidArgument(format!(
            "{m} subarrays per dimension do not evenly divide a {}x{} array",
            g.n_x, g.n_y
        )));
    }
    Ok(PartitionSpec {
        geometry: *g,
        m,
        ns_x: g.n_x / m,
        ns_y: g.n_y / m,
    })
}

/// Reference coefficient and normalized block of subarray (u, v):
/// `D[(a, b)] = H^{(u,v)}[(a, b)] / h_ref^{(u,v)}`. The entry at the
/// reference antenna is exactly one.
pub fn subarray_block(
    p: &CartesianPosition,
    alpha: Complex64,
    spec: &PartitionSpec,
    u: usize,
    v: usize,
) -> Result<(Complex64, DMatrix<Complex64>)> {
    let g = &spec.geometry;
    let q_ref = spec.reference_position(u, v)?;
    let h_ref = coeff(alpha, p, &q_ref, g.wavelength_m)?;
    let (ref_i, ref_j) = spec.reference_index(u, v);
    let mut d = DMatrix::zeros(spec.ns_x, spec.ns_y);
    for b in 1..=spec.ns_y {
        for a in 1..=spec.ns_x {
            let (i, j) = spec.global_index(u, v, a, b);
            d[(a - 1, b - 1)] = if (i, j) == (ref_i, ref_j) {
                Complex64::new(1.0, 0.0)
            } else {
                let q = g.antenna_position(i, j)?;
                coeff(alpha, p, &q, g.wavelength_m)? / h_ref
            };
        }
    }
    Ok((h_ref, d))
}

/// Inter-subarray reference vector c(p): entry s is the ratio of the
/// subarray-s reference coefficient to the central one. The central entry
/// is exactly one and the complex gain cancels.
pub fn reference_vector(p: &CartesianPosition, spec: &PartitionSpec) -> Result<DVector<Complex64>> {
    let g = &spec.geometry;
    let alpha = default_alpha(g.wavelength_m);
    let q_c = spec.central_reference_position()?;
    let h_c = coeff(alpha, p, &q_c, g.wavelength_m)?;
    let central = spec.central_subarray();
    let mut c = DVector::zeros(spec.num_subarrays());
    for s in 1..=spec.num_subarrays() {
        let (u, v) = spec.subarray_of(s);
        c[s - 1] = if (u, v) == central {
            Complex64::new(1.0, 0.0)
        } else {
            let q = spec.reference_position(u, v)?;
            coeff(alpha, p, &q, g.wavelength_m)? / h_c
        };
    }
    Ok(c)
}

/// Columns of the analog beamformer addressing subarray s, ordered by the
/// subarray-local column-major antenna ordering.
pub fn subarray_beamformer(
    w: &DMatrix<Complex64>,
    spec: &PartitionSpec,
    s: usize,
) -> DMatrix<Complex64> {
    let (u, v) = spec.subarray_of(s);
    let g = &spec.geometry;
    let mut ws = DMatrix::zeros(w.nrows(), spec.subarray_size());
    let mut local = 0;
    for b in 1..=spec.ns_y {
        for a in 1..=spec.ns_x {
            let (i, j) = spec.global_index(u, v, a, b);
            ws.set_column(local, &w.column(g.flat_index(i, j)));
            local += 1;
        }
    }
    ws
}

/// Measurement matrix B = [B_1 ... B_K] with per-user blocks
/// `B_k = [W_1 d_{k,1}, ..., W_{M^2} d_{k,M^2}]`.
pub fn build_b(
    positions: &[CartesianPosition],
    w: &DMatrix<Complex64>,
    spec: &PartitionSpec,
) -> Result<DMatrix<Complex64>> {
    if w.ncols() != spec.geometry.num_antennas() {
        return Err(Error::InvalidArgument(format!(
            "beamformer has {} columns, expected {}",
            w.ncols(),
            spec.geometry.num_antennas()
        )));
    }
    let m2 = spec.num_subarrays();
    let alpha = default_alpha(spec.geometry.wavelength_m);
    let mut b = DMatrix::zeros(w.nrows(), positions.len() * m2);
    for (k, p) in positions.iter().enumerate() {
        for s in 1..=m2 {
            let (u, v) = spec.subarray_of(s);
            let (_, d) = subarray_block(p, alpha, spec, u, v)?;
            let col = beamform_column(w, spec, s, d.as_slice());
            b.set_column(k * m2 + s - 1, &col);
        }
    }
    Ok(b)
}

/// `W_s d` without materializing `W_s`: accumulates beamformer columns of
/// subarray s weighted by the local vector `d`.
pub fn beamform_column(
    w: &DMatrix<Complex64>,
    spec: &PartitionSpec,
    s: usize,
    d: &[Complex64],
) -> DVector<Complex64> {
    let (u, v) = spec.subarray_of(s);
    let g = &spec.geometry;
    let mut out = DVector::zeros(w.nrows());
    let mut local = 0;
    for b in 1..=spec.ns_y {
        for a in 1..=spec.ns_x {
            let (i, j) = spec.global_index(u, v, a, b);
            let weight = d[local];
            out.axpy(weight, &w.column(g.flat_index(i, j)).into_owned(), Complex64::new(1.0, 0.0));
            local += 1;
        }
    }
    out
}

/// Assemble the full channel from an estimated position and reference
/// coefficient: `H = h_ref * [ [c]_s D^{(u,v)} ]` blockwise.
pub fn reconstruct_channel(
    p_hat: &CartesianPosition,
    h_ref_hat: Complex64,
    spec: &PartitionSpec,
) -> Result<ChannelMatrix> {
    let g = spec.geometry;
    let alpha = default_alpha(g.wavelength_m);
    let c = reference_vector(p_hat, spec)?;
    let mut entries = DMatrix::zeros(g.n_x, g.n_y);
    for s in 1..=spec.num_subarrays() {
        let (u, v) = spec.subarray_of(s);
        let (_, d) = subarray_block(p_hat, alpha, spec, u, v)?;
        let scale = h_ref_hat * c[s - 1];
        for b in 1..=spec.ns_y {
            for a in 1..=spec.ns_x {
                let (i, j) = spec.global_index(u, v, a, b);
                entries[(i - 1, j - 1)] = scale * d[(a - 1, b - 1)];
            }
        }
    }
    Ok(ChannelMatrix { entries, geometry: g })
}
