//! Fractional kernel, its normalization constant, affine restrictions of hat
//! functions and the transformed integrands.

use nalgebra::{Matrix3, Vector3};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::geometry::{tet_map, Point3, Tetrahedron, REF_BARY_GRAD};
use crate::mesh::Mesh;

/// Fractional order `s` together with `c_{3,s}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FractionalOrder {
    pub s: f64,
    pub c_ds: f64,
}

impl FractionalOrder {
    pub fn new(s: f64) -> Result<Self> {
        Ok(FractionalOrder { s, c_ds: c_ds(s)? })
    }
}

/// `c_{3,s} = 2^{2s} Γ(s+3/2) / (π^{3/2} Γ(1-s))`.
pub fn c_ds(s: f64) -> Result<f64> {
    check_order(s)?;
    Ok(4f64.powf(s) * gamma(s + 1.5) / (std::f64::consts::PI.powf(1.5) * gamma(1.0 - s)))
}

pub fn check_order(s: f64) -> Result<()> {
    if s > 0.0 && s < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("s = {s} not in (0,1)")))
    }
}

/// `|z|^{-(3+2s)}` given `|z|^2`.
#[inline(always)]
pub fn kernel_from_sq(r2: f64, s: f64) -> f64 {
    r2.powf(-1.5 - s)
}

/// Hat function restricted to one tetrahedron: `φ(x) = v0 + gᵀ(x - a_t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineRestriction {
    pub g: Vector3<f64>,
    pub v0: f64,
    pub active: bool,
}

impl AffineRestriction {
    pub const INACTIVE: AffineRestriction = AffineRestriction {
        g: Vector3::new(0.0, 0.0, 0.0),
        v0: 0.0,
        active: false,
    };

    /// Barycentric coordinate of local vertex `k` of `tet`.
    pub fn barycentric(tet: &Tetrahedron, k: usize) -> Result<Self> {
        let map = tet_map(tet)?;
        let inv_t = map
            .m
            .try_inverse()
            .ok_or(Error::DegenerateElement { det: 0.0, tol: 0.0 })?
            .transpose();
        let g = inv_t * Vector3::from(REF_BARY_GRAD[k]);
        Ok(AffineRestriction {
            g,
            v0: if k == 0 { 1.0 } else { 0.0 },
            active: true,
        })
    }

    pub fn eval(&self, tet: &Tetrahedron, x: &Point3) -> f64 {
        if !self.active {
            return 0.0;
        }
        self.v0 + self.g.dot(&(x - tet.a()))
    }

    /// Gradient in reference coordinates, `Mᵀg`.
    pub fn reference_gradient(&self, m: &Matrix3<f64>) -> Vector3<f64> {
        m.transpose() * self.g
    }

    /// Same affine function expressed relative to another anchor vertex.
    pub fn reanchored(&self, old_a: &Point3, new_a: &Point3) -> Self {
        if !self.active {
            return *self;
        }
        AffineRestriction {
            g: self.g,
            v0: self.v0 + self.g.dot(&(new_a - old_a)),
            active: true,
        }
    }
}

/// Restriction of the hat function of `node` to tetrahedron `tet` of `mesh`.
pub fn basis_restriction(node: usize, tet: usize, mesh: &Mesh) -> Result<AffineRestriction> {
    let ids = mesh.tets[tet];
    match ids.iter().position(|&v| v == node) {
        None => Ok(AffineRestriction::INACTIVE),
        Some(k) => AffineRestriction::barycentric(&mesh.tet(tet), k),
    }
}

/// `g₂ᵀM₂d₂ − g₁ᵀM₁d₁`, the ξ-free part of `φ(y) − φ(x)`.
pub fn difference_factor(
    r1: &AffineRestriction,
    m1: &Matrix3<f64>,
    r2: &AffineRestriction,
    m2: &Matrix3<f64>,
    d1: &Vector3<f64>,
    d2: &Vector3<f64>,
) -> f64 {
    let a = if r2.active { r2.g.dot(&(m2 * d2)) } else { 0.0 };
    let b = if r1.active { r1.g.dot(&(m1 * d1)) } else { 0.0 };
    a - b
}

/// Data of an aligned tetrahedron pair for the `k₁` integrand.
#[derive(Debug, Clone, Copy)]
pub struct TtData {
    pub m1: Matrix3<f64>,
    pub m2: Matrix3<f64>,
    /// `|det M₁| |det M₂|`.
    pub det: f64,
    /// Reference gradients of `φ_i` on t₁, t₂ and of `φ_j` on t₁, t₂.
    pub gi: [Vector3<f64>; 2],
    pub gj: [Vector3<f64>; 2],
}

/// Transformed tetrahedron–tetrahedron integrand at one node.
pub fn k1_eta(data: &TtData, d1: &Vector3<f64>, d2: &Vector3<f64>, jac: f64, s: f64) -> Result<f64> {
    let z = data.m1 * d1 - data.m2 * d2;
    let r2 = z.norm_squared();
    if r2 < 1e-300 {
        return Err(Error::IntegrandError {
            node: d1.iter().chain(d2.iter()).copied().collect(),
            value: f64::INFINITY,
        });
    }
    let di = data.gi[1].dot(d2) - data.gi[0].dot(d1);
    let dj = data.gj[1].dot(d2) - data.gj[0].dot(d1);
    Ok(di * dj * kernel_from_sq(r2, s) * data.det * jac)
}

/// Data of an aligned tetrahedron–panel pair for the `k₂` integrand.
#[derive(Debug, Clone, Copy)]
pub struct TpData {
    pub mt: Matrix3<f64>,
    pub mtau: nalgebra::Matrix3x2<f64>,
    pub n: Vector3<f64>,
    /// `|det M_t| · |(b-a) x (c-b)|`.
    pub det: f64,
    pub gi: Vector3<f64>,
    pub gj: Vector3<f64>,
}

/// Transformed tetrahedron–panel integrand at one node.
pub fn k2_eta(data: &TpData, d1: &Vector3<f64>, d2: &nalgebra::Vector2<f64>, jac: f64, s: f64) -> Result<f64> {
    let z = data.mtau * d2 - data.mt * d1;
    let r2 = z.norm_squared();
    if r2 < 1e-300 {
        return Err(Error::IntegrandError {
            node: d1.iter().chain(d2.iter()).copied().collect(),
            value: f64::INFINITY,
        });
    }
    let fi = data.gi.dot(d1);
    let fj = data.gj.dot(d1);
    Ok(fi * fj * z.dot(&data.n) * kernel_from_sq(r2, s) * data.det * jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::REF_TET;

    #[test]
    fn c_ds_half() {
        let pi = std::f64::consts::PI;
        assert!((c_ds(0.5).unwrap() - 2.0 / (pi * pi)).abs() < 1e-15);
    }

    #[test]
    fn c_ds_high_precision_values() {
        let cases = [
            (0.25, 0.190480907802722909357289914804),
            (0.75, 0.158734089835602424464408262337),
            (0.2, 0.184943791026935962487604488274),
            (0.8, 0.138354823712160528428815831877),
        ];
        for (s, want) in cases {
            let got = c_ds(s).unwrap();
            assert!(((got - want) / want).abs() < 1e-13, "s={s}: {got} vs {want}");
        }
    }

    #[test]
    fn c_ds_profile_is_smooth_and_positive() {
        let vals: Vec<f64> = (1..=9).map(|k| c_ds(k as f64 / 10.0).unwrap()).collect();
        assert!(vals.iter().all(|&v| v > 0.0));
        // Rises to a single maximum near s = 0.4, then falls.
        let peak = vals.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!(vals[..=peak].windows(2).all(|w| w[0] < w[1]));
        assert!(vals[peak..].windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn c_ds_rejects_boundary() {
        assert!(c_ds(0.0).is_err());
        assert!(c_ds(1.0).is_err());
    }

    #[test]
    fn barycentric_restrictions_interpolate() {
        let t = Tetrahedron::new(
            Point3::new(0.1, 0.2, -0.3),
            Point3::new(1.3, 0.1, 0.2),
            Point3::new(0.4, 1.1, 0.1),
            Point3::new(0.3, 0.2, 0.9),
        );
        for k in 0..4 {
            let r = AffineRestriction::barycentric(&t, k).unwrap();
            for l in 0..4 {
                let want = if k == l { 1.0 } else { 0.0 };
                assert!((r.eval(&t, &t.v[l]) - want).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn reference_gradient_matches_table() {
        let t = Tetrahedron::new(
            Point3::new(0.1, 0.2, -0.3),
            Point3::new(1.3, 0.1, 0.2),
            Point3::new(0.4, 1.1, 0.1),
            Point3::new(0.3, 0.2, 0.9),
        );
        let m = tet_map(&t).unwrap().m;
        for k in 0..4 {
            let r = AffineRestriction::barycentric(&t, k).unwrap();
            let g = r.reference_gradient(&m);
            assert!((g - Vector3::from(REF_BARY_GRAD[k])).norm() < 1e-13);
        }
        let _ = REF_TET;
    }

    #[test]
    fn difference_factor_cases() {
        let t = Tetrahedron::reference();
        let m = tet_map(&t).unwrap().m;
        let r = AffineRestriction::barycentric(&t, 1).unwrap();
        let d1 = Vector3::new(0.3, 0.1, 0.2);
        let d2 = Vector3::new(0.7, 0.2, 0.1);
        let same = difference_factor(&r, &m, &r, &m, &d1, &d1);
        assert_eq!(same, 0.0);
        let v = difference_factor(&r, &m, &r, &m, &d1, &d2);
        assert!((v - r.g.dot(&(m * (d2 - d1)))).abs() < 1e-15);
        let one_sided = difference_factor(&r, &m, &AffineRestriction::INACTIVE, &m, &d1, &d2);
        assert!((one_sided + r.g.dot(&(m * d1))).abs() < 1e-15);
        let none = difference_factor(
            &AffineRestriction::INACTIVE,
            &m,
            &AffineRestriction::INACTIVE,
            &m,
            &d1,
            &d2,
        );
        assert_eq!(none, 0.0);
    }

    #[test]
    fn k1_orthogonal_gradient_vanishes() {
        let data = TtData {
            m1: Matrix3::identity(),
            m2: Matrix3::identity(),
            det: 1.0,
            gi: [Vector3::z(), Vector3::z()],
            gj: [Vector3::z(), Vector3::z()],
        };
        let d1 = Vector3::new(0.2, 0.5, 0.0);
        let d2 = Vector3::new(0.9, 0.1, 0.0);
        assert_eq!(k1_eta(&data, &d1, &d2, 1.0, 0.5).unwrap(), 0.0);
        assert!(k1_eta(&data, &d1, &d1, 1.0, 0.5).is_err());
    }

    #[test]
    fn k2_in_plane_difference_vanishes() {
        let data = TpData {
            mt: Matrix3::identity(),
            mtau: nalgebra::Matrix3x2::new(1.0, 0.0, 0.0, 1.0, 0.0, 0.0),
            n: Vector3::z(),
            det: 1.0,
            gi: Vector3::x(),
            gj: Vector3::x(),
        };
        let d1 = Vector3::new(0.5, 0.2, 0.0);
        let d2 = nalgebra::Vector2::new(0.1, 0.1);
        assert_eq!(k2_eta(&data, &d1, &d2, 1.0, 0.5).unwrap(), 0.0);
    }
}
