//! Quadrature-convergence studies of single singular integrals and the
//! unit-ball benchmark.

use serde::{Deserialize, Serialize};

use crate::assembly::{assemble_stiffness, StiffnessSystem};
use crate::duffy::{singular_tp, singular_tt, CaseKind, PrefactorMode};
use crate::error::{Error, Result};
use crate::geometry::{Panel, Point3, Tetrahedron};
use crate::kernels::{check_order, AffineRestriction};
use crate::mesh::{ball_mesh, Mesh};
use crate::quadrature::{order_plan, OrderPlan};
use crate::solver::{energy_error, solve_ball, EnergyError, SolveReport, DEFAULT_TOL};

/// One singular integral with fixed geometry and basis functions.
#[derive(Debug, Clone)]
pub enum StudyCase {
    TetTet {
        kind: CaseKind,
        t1: Tetrahedron,
        t2: Tetrahedron,
        ri: [AffineRestriction; 2],
        rj: [AffineRestriction; 2],
    },
    TetPanel {
        kind: CaseKind,
        t: Tetrahedron,
        panel: Panel,
        ri: AffineRestriction,
        rj: AffineRestriction,
    },
}

fn p(x: f64, y: f64, z: f64) -> Point3 {
    Point3::new(x, y, z)
}

fn hat(t: &Tetrahedron, k: Option<usize>) -> Result<AffineRestriction> {
    match k {
        Some(k) => AffineRestriction::barycentric(t, k),
        None => Ok(AffineRestriction::INACTIVE),
    }
}

impl StudyCase {
    /// Configuration of `kind` scaled to diameter about `h`. Shared vertices
    /// lead in both elements.
    ///
    /// * tt-face: mirrored tets on the reference triangle, hats of the two
    ///   vertices off the shared face, one per tet.
    /// * tt-edge: hat of the first shared vertex and of a free vertex of `t₁`.
    /// * tt-vertex: hat of the shared vertex, twice.
    /// * tt-identical: hats of the first two vertices.
    /// * tp-*: one hat at a tet vertex off the panel, twice.
    pub fn new(kind: CaseKind, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidParameter(format!("h = {h} must be positive")));
        }
        let a = p(0.0, 0.0, 0.0) * h;
        let b = p(1.0, 0.0, 0.0) * h;
        let c = p(0.4, 0.9, 0.0) * h;
        let d = p(0.3, 0.35, 0.85) * h;
        let t1 = Tetrahedron::new(a, b, c, d);
        let case = match kind {
            CaseKind::TtFace => {
                let c = p(0.0, 1.0, 0.0) * h;
                let t1 = Tetrahedron::new(a, b, c, p(0.5, 0.289, 0.816) * h);
                let t2 = Tetrahedron::new(a, b, c, p(0.5, 0.289, -0.816) * h);
                StudyCase::TetTet {
                    kind,
                    t1,
                    t2,
                    ri: [hat(&t1, None)?, hat(&t2, Some(3))?],
                    rj: [hat(&t1, Some(3))?, hat(&t2, None)?],
                }
            }
            CaseKind::TtEdge => {
                let t2 = Tetrahedron::new(a, b, p(0.6, -0.8, 0.3) * h, p(0.4, -0.2, -0.9) * h);
                StudyCase::TetTet {
                    kind,
                    t1,
                    t2,
                    ri: [hat(&t1, Some(0))?, hat(&t2, Some(0))?],
                    rj: [hat(&t1, Some(2))?, hat(&t2, None)?],
                }
            }
            CaseKind::TtVertex => {
                let t2 = Tetrahedron::new(
                    a,
                    p(-0.9, 0.1, 0.2) * h,
                    p(-0.4, -0.85, 0.1) * h,
                    p(-0.35, -0.3, -0.9) * h,
                );
                StudyCase::TetTet {
                    kind,
                    t1,
                    t2,
                    ri: [hat(&t1, Some(0))?, hat(&t2, Some(0))?],
                    rj: [hat(&t1, Some(0))?, hat(&t2, Some(0))?],
                }
            }
            CaseKind::TtIdentical => StudyCase::TetTet {
                kind,
                t1,
                t2: t1,
                ri: [hat(&t1, Some(0))?; 2],
                rj: [hat(&t1, Some(1))?; 2],
            },
            CaseKind::TpFace => StudyCase::TetPanel {
                kind,
                t: t1,
                panel: Panel::facing_away(a, b, c, d, None),
                ri: hat(&t1, Some(3))?,
                rj: hat(&t1, Some(3))?,
            },
            CaseKind::TpEdge => {
                let panel = Panel::facing_away(a, b, p(0.5, -0.4, -0.7) * h, d, None);
                StudyCase::TetPanel {
                    kind,
                    t: t1,
                    panel,
                    ri: hat(&t1, Some(3))?,
                    rj: hat(&t1, Some(3))?,
                }
            }
            CaseKind::TpVertex => {
                let panel = Panel::facing_away(a, p(-0.8, 0.2, -0.3) * h, p(-0.3, -0.9, -0.2) * h, d, None);
                StudyCase::TetPanel {
                    kind,
                    t: t1,
                    panel,
                    ri: hat(&t1, Some(1))?,
                    rj: hat(&t1, Some(1))?,
                }
            }
            other => return Err(Error::WrongCase(format!("{other} is not a touching case"))),
        };
        Ok(case)
    }

    pub fn kind(&self) -> CaseKind {
        match self {
            StudyCase::TetTet { kind, .. } | StudyCase::TetPanel { kind, .. } => *kind,
        }
    }

    pub fn value(&self, s: f64, n: usize, mode: PrefactorMode) -> Result<f64> {
        match self {
            StudyCase::TetTet { kind, t1, t2, ri, rj } => singular_tt(*kind, t1, t2, ri, rj, s, n, mode),
            StudyCase::TetPanel { kind, t, panel, ri, rj } => singular_tp(*kind, t, panel, ri, rj, s, n, mode),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub case: CaseKind,
    pub s: f64,
    pub h: f64,
    pub n: usize,
    pub value: f64,
    pub reference: f64,
    pub abs_err: f64,
}

/// `|Q^n − Q^{ref_order}|` for each `h` and `n`.
pub fn singular_study(
    kind: CaseKind,
    s: f64,
    h_list: &[f64],
    orders: &[usize],
    ref_order: usize,
    mode: PrefactorMode,
) -> Result<Vec<StudyRow>> {
    let mut rows = Vec::with_capacity(h_list.len() * orders.len());
    for &h in h_list {
        let case = StudyCase::new(kind, h)?;
        let reference = case.value(s, ref_order, mode)?;
        for &n in orders {
            let value = case.value(s, n, mode)?;
            rows.push(StudyRow {
                case: kind,
                s,
                h,
                n,
                value,
                reference,
                abs_err: (value - reference).abs(),
            });
        }
    }
    Ok(rows)
}

/// Least-squares line `y = a + b x`: returns `(slope, intercept, r²)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(u, v)| (u - mx) * (v - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub h: f64,
    pub slope: f64,
    pub r2: f64,
}

/// Per-`h` fits of `log10(abs_err)` against `n`. Rows with zero error are skipped.
pub fn study_slopes(rows: &[StudyRow]) -> Vec<SlopeFit> {
    let mut hs: Vec<f64> = rows.iter().map(|r| r.h).collect();
    hs.dedup();
    hs.into_iter()
        .map(|h| {
            let (x, y): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| r.h == h && r.abs_err > 0.0)
                .map(|r| (r.n as f64, r.abs_err.log10()))
                .unzip();
            let (slope, _, r2) = fit_line(&x, &y);
            SlopeFit { h, slope, r2 }
        })
        .collect()
}

/// Smoothness index `min(1, s + 1/2 − 10⁻³)` of the ball solution.
pub fn default_smoothness(s: f64) -> f64 {
    (s + 0.5 - 1e-3).min(1.0)
}

/// Order plan for mesh width `h`; meshes with `h ≥ 1` get the floor `n1 = n2 = 2`.
pub fn ball_order_plan(h: f64, l: f64, s: f64, rho1: f64, rho2: f64) -> Result<OrderPlan> {
    if h >= 1.0 {
        check_order(s)?;
        let mut plan = OrderPlan::fixed(2, 2);
        plan.rho1 = rho1;
        plan.rho2 = rho2;
        plan.l = Some(l);
        Ok(plan)
    } else {
        order_plan(h, l, s, rho1, rho2)
    }
}

/// One refinement level of the unit-ball benchmark.
pub struct BallLevel {
    pub level: usize,
    pub mesh: Mesh,
    pub system: StiffnessSystem,
    pub solution: SolveReport,
    pub error: EnergyError,
}

/// Mesh, assemble, solve and measure the energy error at one level.
pub fn ball_level(
    level: usize,
    s: f64,
    plan: impl FnOnce(f64) -> Result<OrderPlan>,
    mode: PrefactorMode,
) -> Result<BallLevel> {
    let mesh = ball_mesh(level)?;
    let plan = plan(mesh.h())?;
    let system = assemble_stiffness(&mesh, s, plan, mode)?;
    let solution = solve_ball(&system, DEFAULT_TOL)?;
    let error = energy_error(&system, &solution.x, s)?;
    Ok(BallLevel {
        level,
        mesh,
        system,
        solution,
        error,
    })
}

/// `ln(e₁/e₂) / ln(h₁/h₂)`.
pub fn observed_rate(h1: f64, e1: f64, h2: f64, e2: f64) -> f64 {
    (e1 / e2).ln() / (h1 / h2).ln()
}
