//! Linear solves, the closed-form unit-ball solution and energy errors.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::assembly::StiffnessSystem;
use crate::error::{Error, Result};
use crate::geometry::{ref_barycentric, tet_map, Point3};
use crate::kernels::check_order;
use crate::mesh::Mesh;

/// Default relative residual for [`solve`].
pub const DEFAULT_TOL: f64 = 1e-10;

/// Negative `e²` down to this value is rounding and clamped to zero.
pub const ENERGY_CLAMP: f64 = -1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveMethod {
    Cg,
    Cholesky,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub x: DVector<f64>,
    pub method: SolveMethod,
    pub iterations: usize,
    pub residual: f64,
}

/// Jacobi-preconditioned CG to relative residual `tol`, falling back to a
/// dense Cholesky solve if CG stalls or breaks down.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> Result<SolveReport> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::InvalidParameter(format!(
            "system is {}x{} with right-hand side of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let bnorm = b.norm();
    if bnorm == 0.0 {
        return Ok(SolveReport {
            x: DVector::zeros(n),
            method: SolveMethod::Cg,
            iterations: 0,
            residual: 0.0,
        });
    }
    let diag = a.diagonal();
    if diag.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::SolverError("non-positive diagonal entry".into()));
    }
    let mut x = DVector::zeros(n);
    let mut r = b.clone();
    let mut z = r.component_div(&diag);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let max_iter = 10 * n + 100;
    let mut it = 0;
    let mut broke = false;
    while r.norm() > tol * bnorm && it < max_iter {
        let ap = a * &p;
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            broke = true;
            break;
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        z = r.component_div(&diag);
        let rz_new = r.dot(&z);
        p = &z + (rz_new / rz) * &p;
        rz = rz_new;
        it += 1;
    }
    let res = (b - a * &x).norm() / bnorm;
    if !broke && res <= tol {
        return Ok(SolveReport {
            x,
            method: SolveMethod::Cg,
            iterations: it,
            residual: res,
        });
    }
    log::warn!("CG stopped after {it} iterations at residual {res:e}; using Cholesky");
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SolverError("matrix is not positive definite".into()))?;
    let x = chol.solve(b);
    let residual = (b - a * &x).norm() / bnorm;
    Ok(SolveReport {
        x,
        method: SolveMethod::Cholesky,
        iterations: it,
        residual,
    })
}

/// Solves `A x = g` of an assembled system.
pub fn solve(system: &StiffnessSystem, tol: f64) -> Result<SolveReport> {
    solve_spd(&system.a, &system.g, tol)
}

/// Solves the unit-ball problem with load [`BallSolution::load`], assuming
/// `system.g` is the load vector of `f = 1`.
pub fn solve_ball(system: &StiffnessSystem, tol: f64) -> Result<SolveReport> {
    let f = BallSolution::new(system.s)?.load();
    solve_spd(&system.a, &(&system.g * f), tol)
}

/// Whether a dense Cholesky factorization exists.
pub fn cholesky_ok(a: &DMatrix<f64>) -> bool {
    a.clone().cholesky().is_some()
}

/// Closed-form unit-ball solution `u(x) = 2^{-2s}/Γ²(1+s)·(1−|x|²)₊^s` for the
/// operator with constant [`c_ds`](crate::kernels::c_ds) and constant load [`Self::load`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallSolution {
    pub s: f64,
}

impl BallSolution {
    pub fn new(s: f64) -> Result<Self> {
        check_order(s)?;
        Ok(BallSolution { s })
    }

    fn scale(&self) -> f64 {
        2f64.powf(-2.0 * self.s) / gamma(1.0 + self.s).powi(2)
    }

    pub fn u(&self, x: &Point3) -> f64 {
        let r2 = x.norm_squared();
        if r2 >= 1.0 {
            0.0
        } else {
            self.scale() * (1.0 - r2).powf(self.s)
        }
    }

    /// `(−Δ)^s u` inside the ball: `Γ(s+3/2) / (s Γ(1+s) Γ(3/2))`.
    pub fn load(&self) -> f64 {
        let s = self.s;
        gamma(s + 1.5) / (s * gamma(1.0 + s) * gamma(1.5))
    }

    /// `∫ u = 2^{-2s} π^{3/2} / (Γ(1+s) Γ(s+5/2))`.
    pub fn mass(&self) -> f64 {
        let s = self.s;
        2f64.powf(-2.0 * s) * PI.powf(1.5) / (gamma(1.0 + s) * gamma(s + 2.5))
    }

    /// `∫ u` by radial tanh-sinh quadrature.
    pub fn mass_radial(&self) -> f64 {
        let s = self.s;
        let radial = tanh_sinh(|r| r * r * ((1.0 - r) * (1.0 + r)).powf(s), 0.0, 1.0);
        self.scale() * 4.0 * PI * radial
    }

    /// `a(u,u) = ∫ f u`.
    pub fn energy(&self) -> f64 {
        self.load() * self.mass()
    }

    pub fn energy_radial(&self) -> f64 {
        self.load() * self.mass_radial()
    }
}

/// Double-exponential quadrature on `[a, b]`, robust to endpoint singularities.
pub fn tanh_sinh(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let d = 0.5 * (b - a);
    let hstep = 1.0 / 64.0;
    let mut sum = 0.0;
    let kmax = (4.0 / hstep) as i64;
    for k in -kmax..=kmax {
        let t = k as f64 * hstep;
        let u = 0.5 * PI * t.sinh();
        let x = u.tanh();
        let w = 0.5 * PI * t.cosh() / u.cosh().powi(2);
        // 1 − |x| without cancellation.
        let gap = 2.0 / ((2.0 * u.abs()).exp() + 1.0);
        if gap < 1e-300 || w < 1e-300 {
            continue;
        }
        let y = if x < 0.0 { a + d * gap } else { b - d * gap };
        sum += w * f(y);
    }
    sum * d * hstep
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyError {
    pub abs: f64,
    pub rel: f64,
    /// `a(u,u)`.
    pub exact: f64,
    /// `xᵀAx`.
    pub discrete: f64,
}

/// `e² = a(u,u) − xᵀAx` for the unit-ball problem, `x` from [`solve_ball`].
pub fn energy_error(system: &StiffnessSystem, x: &DVector<f64>, s: f64) -> Result<EnergyError> {
    let exact = BallSolution::new(s)?.energy();
    let discrete = x.dot(&(&system.a * x));
    let mut e2 = exact - discrete;
    if e2 < 0.0 {
        if e2 >= ENERGY_CLAMP {
            e2 = 0.0;
        } else {
            return Err(Error::ConsistencyError(format!(
                "discrete energy {discrete} exceeds a(u,u) = {exact} by {:e}; raise the quadrature orders",
                -e2
            )));
        }
    }
    let abs = e2.sqrt();
    Ok(EnergyError {
        abs,
        rel: abs / exact.sqrt(),
        exact,
        discrete,
    })
}

/// Barycentric coordinates of `p` in tet `k`.
fn barycentric(mesh: &Mesh, k: usize, p: &Point3) -> Result<[f64; 4]> {
    let map = tet_map(&mesh.tet(k))?;
    let inv = map
        .m
        .try_inverse()
        .ok_or(Error::DegenerateElement { det: 0.0, tol: 0.0 })?;
    let x: Vector3<f64> = inv * (p - map.offset);
    Ok(ref_barycentric(&[x[0], x[1], x[2]]))
}

/// Tet containing `p`, found by a neighbour walk from tet 0.
pub fn locate(mesh: &Mesh, p: &Point3) -> Result<(usize, [f64; 4])> {
    let tol = -1e-12;
    let mut k = 0;
    for _ in 0..mesh.tets.len() {
        let lam = barycentric(mesh, k, p)?;
        let (worst, &lmin) = lam.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        if lmin >= tol {
            return Ok((k, lam));
        }
        let f = mesh.tet_faces[k][worst];
        let [a, b] = mesh.face_tets[f];
        let next = if a == k { b } else { a };
        if next == usize::MAX {
            break;
        }
        k = next;
    }
    for k in 0..mesh.tets.len() {
        let lam = barycentric(mesh, k, p)?;
        if lam.iter().all(|&l| l >= tol) {
            return Ok((k, lam));
        }
    }
    Err(Error::OutOfDomain([p.x, p.y, p.z]))
}

/// Finite element function with coefficients `x` (zero on boundary vertices).
pub fn eval_uh(mesh: &Mesh, x: &DVector<f64>, p: &Point3) -> Result<f64> {
    if x.len() != mesh.n_dofs() {
        return Err(Error::InvalidParameter(format!(
            "{} coefficients for {} unknowns",
            x.len(),
            mesh.n_dofs()
        )));
    }
    let (k, lam) = locate(mesh, p)?;
    Ok((0..4)
        .filter_map(|l| mesh.dof_of[mesh.tets[k][l]].map(|r| lam[l] * x[r]))
        .sum())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionDump {
    pub s: f64,
    pub coefficients: Vec<f64>,
    /// Mesh vertex of each coefficient.
    pub dof_map: Vec<usize>,
    pub vertices: Vec<[f64; 3]>,
    pub rel_err: Option<f64>,
}

impl SolutionDump {
    pub fn new(mesh: &Mesh, x: &DVector<f64>, s: f64, rel_err: Option<f64>) -> Self {
        SolutionDump {
            s,
            coefficients: x.iter().copied().collect(),
            dof_map: mesh.dofs.clone(),
            vertices: mesh.vertices.iter().map(|p| [p.x, p.y, p.z]).collect(),
            rel_err,
        }
    }
}
