//! Antenna-array geometry and the polar/Cartesian user parameterizations.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Margin keeping polar iterates away from the `chi_x^2 + chi_y^2 = 1`
/// boundary, where the polar-to-Cartesian Jacobian is singular.
pub const CHI_BOUNDARY_MARGIN: f64 = 1e-9;

/// A uniform planar array in the z = 0 plane, centered at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    /// Antenna count along the x axis.
    pub n_x: usize,
    /// Antenna count along the y axis.
    pub n_y: usize,
    /// Inter-antenna spacing in meters.
    pub spacing_m: f64,
    /// Carrier wavelength in meters.
    pub wavelength_m: f64,
}

impl ArrayGeometry {
    pub fn new(n_x: usize, n_y: usize, spacing_m: f64, wavelength_m: f64) -> Result<Self> {
        if n_x < 1 || n_y < 1 {
            return Err(Error::InvalidArgument(
                "antenna counts must be at least 1".into(),
            ));
        }
        if spacing_m <= 0.0 || wavelength_m <= 0.0 {
            return Err(Error::InvalidArgument(
                "spacing and wavelength must be positive".into(),
            ));
        }
        Ok(Self {
            n_x,
            n_y,
            spacing_m,
            wavelength_m,
        })
    }

    /// Total antenna count `N_B = n_x * n_y`.
    pub fn num_antennas(&self) -> usize {
        self.n_x * self.n_y
    }

    /// Position of the (i, j)-th antenna, 1-based indices.
    pub fn antenna_position(&self, i: usize, j: usize) -> Result<CartesianPosition> {
        if i < 1 || i > self.n_x || j < 1 || j > self.n_y {
            return Err(Error::InvalidArgument(format!(
                "antenna index ({i}, {j}) out of range for {}x{} array",
                self.n_x, self.n_y
            )));
        }
        let cx = (self.n_x as f64 + 1.0) / 2.0;
        let cy = (self.n_y as f64 + 1.0) / 2.0;
        Ok(CartesianPosition {
            x: (i as f64 - cx) * self.spacing_m,
            y: (j as f64 - cy) * self.spacing_m,
            z: 0.0,
        })
    }

    /// Flat antenna index under the global column-major vec(.) ordering over
    /// (i, j): antenna (i, j) maps to `(j - 1) * n_x + (i - 1)` (0-based).
    pub fn flat_index(&self, i: usize, j: usize) -> usize {
        (j - 1) * self.n_x + (i - 1)
    }

    /// Inverse of [`flat_index`](Self::flat_index); returns 1-based (i, j).
    pub fn antenna_indices(&self, flat: usize) -> (usize, usize) {
        (flat % self.n_x + 1, flat / self.n_x + 1)
    }

    /// Rayleigh distance `2 D^2 / lambda` with aperture
    /// `D = d * sqrt(n_x^2 + n_y^2)`.
    pub fn rayleigh_distance(&self) -> f64 {
        let nx = self.n_x as f64;
        let ny = self.n_y as f64;
        let d2 = self.spacing_m * self.spacing_m * (nx * nx + ny * ny);
        2.0 * d2 / self.wavelength_m
    }
}

/// A point in the array frame, meters. User positions have `z > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartesianPosition {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CartesianPosition {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self {
            x: v.x,
            y: v.y,
            z: v.z,
        }
    }

    /// Euclidean distance to `other`.
    pub fn distance(&self, other: &CartesianPosition) -> f64 {
        (self.as_vector() - other.as_vector()).norm()
    }
}

/// Polar user parameterization: direction cosines against the x and y axes
/// and range from the array center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarPosition {
    pub chi_x: f64,
    pub chi_y: f64,
    pub r: f64,
}

impl PolarPosition {
    pub fn new(chi_x: f64, chi_y: f64, r: f64) -> Result<Self> {
        let p = Self { chi_x, chi_y, r };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chi_x * self.chi_x + self.chi_y * self.chi_y >= 1.0 {
            return Err(Error::Domain(format!(
                "chi_x^2 + chi_y^2 = {} must be < 1",
                self.chi_x * self.chi_x + self.chi_y * self.chi_y
            )));
        }
        if self.r <= 0.0 {
            return Err(Error::Domain(format!("range {} must be > 0", self.r)));
        }
        Ok(())
    }

    /// `[r chi_x, r chi_y, r sqrt(1 - chi_x^2 - chi_y^2)]`.
    pub fn to_cartesian(&self) -> Result<CartesianPosition> {
        self.validate()?;
        let s = (1.0 - self.chi_x * self.chi_x - self.chi_y * self.chi_y).sqrt();
        Ok(CartesianPosition {
            x: self.r * self.chi_x,
            y: self.r * self.chi_y,
            z: self.r * s,
        })
    }

    /// Jacobian of the polar-to-Cartesian map; columns are
    /// d p / d chi_x, d p / d chi_y, d p / d r.
    pub fn jacobian(&self) -> Result<Matrix3<f64>> {
        self.validate()?;
        let s = (1.0 - self.chi_x * self.chi_x - self.chi_y * self.chi_y).sqrt();
        Ok(Matrix3::new(
            self.r,
            0.0,
            self.chi_x,
            0.0,
            self.r,
            self.chi_y,
            -self.r * self.chi_x / s,
            -self.r * self.chi_y / s,
            s,
        ))
    }

    /// Inverse of [`to_cartesian`](Self::to_cartesian) for points with z > 0.
    pub fn from_cartesian(p: &CartesianPosition) -> Result<Self> {
        let r = p.as_vector().norm();
        if r <= 0.0 {
            return Err(Error::Domain("cannot convert the origin".into()));
        }
        if p.z <= 0.0 {
            return Err(Error::Domain(format!(
                "z = {} must be > 0 for a user position",
                p.z
            )));
        }
        Ok(Self {
            chi_x: p.x / r,
            chi_y: p.y / r,
            r,
        })
    }

    /// Radially project (chi_x, chi_y) inside the feasible disc and clamp the
    /// range to be positive. Used between gradient-ascent steps.
    pub fn project_feasible(&self, r_min: f64) -> Self {
        let mut out = *self;
        let n2 = out.chi_x * out.chi_x + out.chi_y * out.chi_y;
        let limit = 1.0 - CHI_BOUNDARY_MARGIN;
        if n2 > limit {
            let scale = (limit / n2).sqrt();
            out.chi_x *= scale;
            out.chi_y *= scale;
        }
        if out.r < r_min {
            out.r = r_min;
        }
        out
    }
}

/// Euclidean distance between two points.
pub fn distance(p: &CartesianPosition, q: &CartesianPosition) -> f64 {
    p.distance(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn table1_geometry() -> ArrayGeometry {
        ArrayGeometry::new(45, 45, 0.025, 0.05).unwrap()
    }

    #[test]
    fn center_antenna_of_odd_grid_is_origin() {
        let g = table1_geometry();
        let p = g.antenna_position(23, 23).unwrap();
        assert_eq!(p, CartesianPosition::new(0.0, 0.0, 0.0));
    }

    #[test]
    fn antenna_position_edge_cases() {
        let g = table1_geometry();
        let p = g.antenna_position(1, 23).unwrap();
        assert_relative_eq!(p.x, -0.55, max_relative = 1e-14);
        assert_abs_diff_eq!(p.y, 0.0);
        let p = g.antenna_position(45, 45).unwrap();
        assert_relative_eq!(p.x, 0.55, max_relative = 1e-14);
        assert_relative_eq!(p.y, 0.55, max_relative = 1e-14);
        assert!(g.antenna_position(0, 1).is_err());
        assert!(g.antenna_position(46, 1).is_err());
    }

    #[test]
    fn antenna_z_is_zero_everywhere() {
        let g = ArrayGeometry::new(6, 4, 0.01, 0.05).unwrap();
        for i in 1..=6 {
            for j in 1..=4 {
                assert_eq!(g.antenna_position(i, j).unwrap().z, 0.0);
            }
        }
    }

    #[test]
    fn flat_index_round_trip() {
        let g = ArrayGeometry::new(6, 4, 0.01, 0.05).unwrap();
        let mut seen = vec![false; 24];
        for i in 1..=6 {
            for j in 1..=4 {
                let f = g.flat_index(i, j);
                assert!(!seen[f]);
                seen[f] = true;
                assert_eq!(g.antenna_indices(f), (i, j));
            }
        }
    }

    #[test]
    fn distance_examples() {
        let o = CartesianPosition::new(0.0, 0.0, 0.0);
        assert_eq!(distance(&CartesianPosition::new(0.0, 0.0, 5.0), &o), 5.0);
        assert_eq!(distance(&CartesianPosition::new(3.0, 0.0, 4.0), &o), 5.0);
        let p = CartesianPosition::new(1.2, -3.4, 5.6);
        assert_eq!(distance(&p, &p), 0.0);
        assert_eq!(distance(&p, &o), distance(&o, &p));
    }

    #[test]
    fn polar_to_cartesian_examples() {
        let p = PolarPosition::new(0.0, 0.0, 7.0).unwrap().to_cartesian().unwrap();
        assert_eq!(p, CartesianPosition::new(0.0, 0.0, 7.0));

        let p = PolarPosition::new(0.6, 0.0, 10.0).unwrap().to_cartesian().unwrap();
        assert_relative_eq!(p.x, 6.0, max_relative = 1e-14);
        assert_relative_eq!(p.z, 8.0, max_relative = 1e-14);

        let p = PolarPosition::new(0.3, -0.4, 2.0).unwrap().to_cartesian().unwrap();
        assert_relative_eq!(p.x, 0.6, max_relative = 1e-14);
        assert_relative_eq!(p.y, -0.8, max_relative = 1e-14);
        assert_relative_eq!(p.z, 2.0 * 0.75f64.sqrt(), max_relative = 1e-14);

        assert!(PolarPosition::new(0.8, 0.7, 5.0).is_err());
        assert!(PolarPosition::new(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn polar_round_trip() {
        let pts = [(0.3, -0.4, 2.0), (0.0, 0.0, 7.0), (-0.7, 0.1, 42.0)];
        for (cx, cy, r) in pts {
            let pp = PolarPosition::new(cx, cy, r).unwrap();
            let back = PolarPosition::from_cartesian(&pp.to_cartesian().unwrap()).unwrap();
            assert_relative_eq!(back.chi_x, cx, max_relative = 1e-12, epsilon = 1e-12);
            assert_relative_eq!(back.chi_y, cy, max_relative = 1e-12, epsilon = 1e-12);
            assert_relative_eq!(back.r, r, max_relative = 1e-12);
        }
    }

    #[test]
    fn jacobian_on_axis() {
        let t = PolarPosition::new(0.0, 0.0, 3.0).unwrap().jacobian().unwrap();
        let expect = Matrix3::new(3.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(t, expect, max_relative = 1e-14);
    }

    #[test]
    fn jacobian_third_row_example() {
        let t = PolarPosition::new(0.6, 0.0, 10.0).unwrap().jacobian().unwrap();
        assert_relative_eq!(t[(2, 0)], -7.5, max_relative = 1e-12);
        assert_abs_diff_eq!(t[(2, 1)], 0.0);
        assert_relative_eq!(t[(2, 2)], 0.8, max_relative = 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let (cx, cy) = loop {
                let cx = next() * 1.8 - 0.9;
                let cy = next() * 1.8 - 0.9;
                if cx * cx + cy * cy < 0.9 {
                    break (cx, cy);
                }
            };
            let r = 1.0 + next() * 20.0;
            let pp = PolarPosition::new(cx, cy, r).unwrap();
            let t = pp.jacobian().unwrap();
            let vars = [cx, cy, r];
            for col in 0..3 {
                let h = 1e-6 * vars[col].abs().max(1.0);
                let mut lo = vars;
                let mut hi = vars;
                lo[col] -= h;
                hi[col] += h;
                let plo = PolarPosition::new(lo[0], lo[1], lo[2])
                    .unwrap()
                    .to_cartesian()
                    .unwrap()
                    .as_vector();
                let phi = PolarPosition::new(hi[0], hi[1], hi[2])
                    .unwrap()
                    .to_cartesian()
                    .unwrap()
                    .as_vector();
                let fd = (phi - plo) / (2.0 * h);
                for row in 0..3 {
                    let scale = t.column(col).norm().max(1e-3);
                    assert!(
                        (t[(row, col)] - fd[row]).abs() / scale < 1e-6,
                        "jacobian mismatch at ({cx}, {cy}, {r}) entry ({row}, {col}): {} vs {}",
                        t[(row, col)],
                        fd[row]
                    );
                }
            }
        }
    }

    #[test]
    fn rayleigh_distance_table1() {
        let g = table1_geometry();
        assert_relative_eq!(g.rayleigh_distance(), 101.25, max_relative = 1e-10);
        let g1 = ArrayGeometry::new(1, 1, 0.025, 0.05).unwrap();
        assert_relative_eq!(g1.rayleigh_distance(), 0.05, max_relative = 1e-12);
        let gd = ArrayGeometry::new(45, 45, 0.05, 0.05).unwrap();
        assert_relative_eq!(gd.rayleigh_distance(), 4.0 * g.rayleigh_distance(), max_relative = 1e-12);
    }

    #[test]
    fn project_feasible_pulls_inside_disc() {
        let p = PolarPosition {
            chi_x: 0.9,
            chi_y: 0.9,
            r: 5.0,
        };
        let q = p.project_feasible(0.1);
        assert!(q.chi_x * q.chi_x + q.chi_y * q.chi_y <= 1.0 - CHI_BOUNDARY_MARGIN / 2.0);
        assert!(q.validate().is_ok());
    }
}
