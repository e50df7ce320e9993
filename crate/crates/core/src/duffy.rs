//! Duffy-type transformation tables for touching element pairs, the distant
//! maps, and the quadrature built on them.
//!
//! A touching pair is parametrized by scaling variables `ξ` and local
//! variables `η`. After aligning the shared simplex to the leading reference
//! vertices, the reference points are
//! `x̃ = shift(ξ) + scale(ξ)·d₁(η)` and `ỹ = shift(ξ) + scale(ξ)·d₂(η)`,
//! with `scale = ξ₁` (vertex), `ξ₁ξ₂` (edge) or `ξ₁ξ₂ξ₃` (face). The
//! integrand is homogeneous in every `ξ_k`, so the `ξ` integrals are done in
//! closed form and only the `η` integral is approximated.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, Matrix3, Matrix3x2, Matrix4, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{panel_map, tet_map, Panel, Tetrahedron};
use crate::kernels::{check_order, kernel_from_sq, AffineRestriction};
use crate::poly::{Poly, ETA0};
use crate::quadrature::gauss_rule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CaseKind {
    TtIdentical,
    TtFace,
    TtEdge,
    TtVertex,
    TpFace,
    TpEdge,
    TpVertex,
    TtDistant,
    TpDistant,
}

impl CaseKind {
    pub const SINGULAR: [CaseKind; 7] = [
        CaseKind::TtIdentical,
        CaseKind::TtFace,
        CaseKind::TtEdge,
        CaseKind::TtVertex,
        CaseKind::TpFace,
        CaseKind::TpEdge,
        CaseKind::TpVertex,
    ];

    pub const ALL: [CaseKind; 9] = [
        CaseKind::TtIdentical,
        CaseKind::TtFace,
        CaseKind::TtEdge,
        CaseKind::TtVertex,
        CaseKind::TpFace,
        CaseKind::TpEdge,
        CaseKind::TpVertex,
        CaseKind::TtDistant,
        CaseKind::TpDistant,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CaseKind::TtIdentical => "tt-identical",
            CaseKind::TtFace => "tt-face",
            CaseKind::TtEdge => "tt-edge",
            CaseKind::TtVertex => "tt-vertex",
            CaseKind::TpFace => "tp-face",
            CaseKind::TpEdge => "tp-edge",
            CaseKind::TpVertex => "tp-vertex",
            CaseKind::TtDistant => "tt-distant",
            CaseKind::TpDistant => "tp-distant",
        }
    }

    pub fn parse(s: &str) -> Option<CaseKind> {
        CaseKind::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_tp(&self) -> bool {
        matches!(
            self,
            CaseKind::TpFace | CaseKind::TpEdge | CaseKind::TpVertex | CaseKind::TpDistant
        )
    }

    /// Number of shared vertices of the aligned pair.
    pub fn shared(&self) -> usize {
        match self {
            CaseKind::TtIdentical => 4,
            CaseKind::TtFace | CaseKind::TpFace => 3,
            CaseKind::TtEdge | CaseKind::TpEdge => 2,
            CaseKind::TtVertex | CaseKind::TpVertex => 1,
            CaseKind::TtDistant | CaseKind::TpDistant => 0,
        }
    }

    pub fn tt(kind: crate::mesh::PairKind) -> CaseKind {
        use crate::mesh::PairKind as P;
        match kind {
            P::Identical => CaseKind::TtIdentical,
            P::Face => CaseKind::TtFace,
            P::Edge => CaseKind::TtEdge,
            P::Vertex => CaseKind::TtVertex,
            P::Distant => CaseKind::TtDistant,
        }
    }

    pub fn tp(kind: crate::mesh::PairKind) -> CaseKind {
        use crate::mesh::PairKind as P;
        match kind {
            P::Face => CaseKind::TpFace,
            P::Edge => CaseKind::TpEdge,
            P::Vertex => CaseKind::TpVertex,
            _ => CaseKind::TpDistant,
        }
    }
}

impl std::fmt::Display for CaseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Structural shift shared by both points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shift {
    /// Vertex, identical and distant cases.
    None,
    /// `ξ₁ e₁`.
    Edge,
    /// `ξ₁ e₁ + ξ₁(1−ξ₂) e₂`.
    Face,
}

#[derive(Debug, Clone)]
pub struct SubdomainMap {
    pub d1: Vec<Poly>,
    pub d2: Vec<Poly>,
    pub jac_eta: Poly,
    /// `m'` with `𝒟_m = 𝒟_{m'}ᵀ` (0-based).
    pub symmetric_of: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct DuffyCaseTable {
    pub kind: CaseKind,
    pub k_eta: usize,
    pub subdomains: Vec<SubdomainMap>,
    pub shift: Shift,
    /// Exponents of the `ξ`-Jacobian, one per scaling variable.
    pub xi_jacobian: Vec<u32>,
    /// Number of stored-map copies each stored map stands for.
    pub symmetry: f64,
    /// Prefactor exponents as printed in the source tables.
    pub printed_exponents: Vec<i32>,
}

impl DuffyCaseTable {
    pub fn k_xi(&self) -> usize {
        self.xi_jacobian.len()
    }
}

fn p(s: &str) -> Poly {
    Poly::parse(s).expect("table polynomial parses")
}

fn map(d1: &[&str], d2: &[&str], jac: &str) -> SubdomainMap {
    SubdomainMap {
        d1: d1.iter().map(|s| p(s)).collect(),
        d2: d2.iter().map(|s| p(s)).collect(),
        jac_eta: p(jac),
        symmetric_of: None,
    }
}

fn swapped(m: &SubdomainMap, of: usize) -> SubdomainMap {
    SubdomainMap {
        d1: m.d2.clone(),
        d2: m.d1.clone(),
        jac_eta: m.jac_eta.clone(),
        symmetric_of: Some(of),
    }
}

fn build_table(kind: CaseKind) -> DuffyCaseTable {
    use CaseKind::*;
    let (k_eta, shift, xi_jacobian, symmetry, printed_exponents, subdomains): (
        usize,
        Shift,
        Vec<u32>,
        f64,
        Vec<i32>,
        Vec<SubdomainMap>,
    ) = match kind {
        TtVertex => {
            let d1 = map(
                &["1", "e1*e2", "e1*(1-e2)"],
                &["e3", "e3*e4*e5", "e3*e4*(1-e5)"],
                "e1*e3^2*e4",
            );
            let d2 = swapped(&d1, 0);
            (5, Shift::None, vec![5], 1.0, vec![4], vec![d1, d2])
        }
        TtEdge => {
            let d1 = map(
                &["0", "e1", "1-e1"],
                &["-e2*e3*e4", "e2*e3*(1-e4)", "e2*(1-e3)"],
                "e2^2*e3",
            );
            let d2 = map(&["0", "e3*e4", "e3*(1-e4)"], &["-e1*e2", "e1*(1-e2)", "1-e1"], "e1*e3");
            let d3 = swapped(&d1, 0);
            let d4 = swapped(&d2, 1);
            (4, Shift::Edge, vec![5, 4], 1.0, vec![4, 3], vec![d1, d2, d3, d4])
        }
        TtFace => {
            let j = "e1^2*e2";
            let mut v = vec![
                map(&["0", "e1", "1-e1"], &["-e1*e2*e3", "0", "e1*e2*(1-e3)"], j),
                map(&["0", "e1*e2", "e1*(1-e2)"], &["-e1*e2*e3", "0", "1-e1*e2*e3"], j),
                map(&["0", "e1*e2", "1-e1*e2"], &["-e1*e2*e3", "0", "e1*(1-e2*e3)"], j),
                map(&["0", "e1*e2*e3", "e1*e2*(1-e3)"], &["-e1", "0", "1-e1"], j),
                map(&["0", "e1*e2*e3", "e1*(1-e2*e3)"], &["-e1*e2", "0", "1-e1*e2"], j),
                map(&["0", "e1*e2*e3", "1-e1*e2*e3"], &["-e1*e2", "0", "e1*(1-e2)"], j),
                map(&["0", "0", "1"], &["-e1*e2*e3", "e1*e2*(1-e3)", "e1*(1-e2)"], j),
            ];
            for m in 0..7 {
                let s = swapped(&v[m], m);
                v.push(s);
            }
            v.push(map(&["-e1*e2*e3", "e1*e2*(1-e3)", "1-e1*e2"], &["0", "0", "e1"], j));
            v.push(map(&["0", "0", "e3"], &["-e1*e2", "e1*(1-e2)", "1-e1"], "e1"));
            v.push(map(&["-e1*e2", "e1*(1-e2)", "1-e1"], &["0", "0", "e1*e3"], "e1^2"));
            (3, Shift::Face, vec![5, 4, 3], 1.0, vec![4, 3, 2], v)
        }
        TtIdentical => {
            let j = "e1";
            let v = vec![
                map(&["0", "e1", "-e1"], &["-e1*e2", "0", "-1"], j),
                map(&["0", "1", "0"], &["-e1*e2", "0", "e1*(1-e2)"], j),
                map(&["0", "e1", "-1"], &["-e1*e2", "0", "-e1*e2"], j),
                map(&["0", "e1*e2", "-e1*e2"], &["-e1", "0", "-1"], j),
                map(&["0", "e1*e2", "e1*(1-e2)"], &["-1", "0", "0"], j),
                map(&["0", "e1*e2", "-1"], &["-e1", "0", "-e1"], j),
                map(&["0", "0", "0"], &["-e1*e2", "e1*(1-e2)", "-1"], j),
                map(&["0", "0", "-1"], &["-e1*e2", "e1*(1-e2)", "-e1"], j),
                map(&["0", "0", "e1"], &["-e2", "1-e2", "0"], "1"),
            ];
            (2, Shift::None, vec![5, 4, 3, 2], 2.0, vec![4, 3, 2, 1], v)
        }
        TpVertex => {
            let v = vec![
                map(&["1", "e1*e2", "e1*(1-e2)"], &["e3", "e3*e4"], "e1*e3"),
                map(&["e2", "e2*e3*e4", "e2*e3*(1-e4)"], &["1", "e1"], "e2^2*e3"),
            ];
            (4, Shift::None, vec![4], 1.0, vec![3], v)
        }
        TpEdge => {
            let v = vec![
                map(&["0", "e1", "1-e1"], &["-e2*e3", "e2*(1-e3)"], "e2"),
                map(&["0", "e2*e3", "e2*(1-e3)"], &["-e1", "1-e1"], "e2"),
                map(&["-e2*e3", "e2*(1-e3)", "1-e2"], &["0", "e1"], "e2"),
                map(&["-e1*e2*e3", "e1*e2*(1-e3)", "e1*(1-e2)"], &["0", "1"], "e1^2*e2"),
            ];
            (3, Shift::Edge, vec![4, 3], 1.0, vec![4, 3], v)
        }
        TpFace => {
            let j = "e1";
            let v = vec![
                map(&["0", "e1", "1-e1"], &["-e1*e2", "0"], j),
                map(&["0", "e1*e2", "e1*(1-e2)"], &["-1", "0"], j),
                map(&["0", "e1*e2", "1-e1*e2"], &["-e1", "0"], j),
                map(&["0", "0", "1"], &["-e1*e2", "e1*(1-e2)"], j),
                map(&["-e1*e2", "e1*(1-e2)", "1-e1"], &["0", "0"], j),
                map(&["-e1", "0", "1-e1"], &["0", "e1*e2"], j),
                map(&["-e1*e2", "0", "e1*(1-e2)"], &["0", "1"], j),
                map(&["-e1*e2", "0", "1-e1*e2"], &["0", "e1"], j),
                map(&["0", "0", "e2"], &["-e1", "1-e1"], "1"),
            ];
            (2, Shift::Face, vec![4, 3, 2], 1.0, vec![4, 3, 2], v)
        }
        TtDistant => {
            let v = vec![map(
                &["e1", "e1*e2*e3", "e1*e2*(1-e3)"],
                &["e4", "e4*e5*e6", "e4*e5*(1-e6)"],
                "e1^2*e2*e4^2*e5",
            )];
            (6, Shift::None, vec![], 1.0, vec![], v)
        }
        TpDistant => {
            let v = vec![map(&["e1", "e1*e2*e3", "e1*e2*(1-e3)"], &["e4", "e4*e5"], "e1^2*e2*e4")];
            (5, Shift::None, vec![], 1.0, vec![], v)
        }
    };
    DuffyCaseTable {
        kind,
        k_eta,
        subdomains,
        shift,
        xi_jacobian,
        symmetry,
        printed_exponents,
    }
}

/// The transcribed table of `kind`.
pub fn case_table(kind: CaseKind) -> &'static DuffyCaseTable {
    static TABLES: OnceLock<Vec<DuffyCaseTable>> = OnceLock::new();
    let all = TABLES.get_or_init(|| CaseKind::ALL.iter().map(|&k| build_table(k)).collect());
    &all[CaseKind::ALL.iter().position(|&k| k == kind).unwrap()]
}

/// Full reference-point maps `(x̃(ξ,η), ỹ(ξ,η))` of subdomain `m`, with `ξ_k`
/// in poly slots `0..k_xi`. Not available for the identical case, whose
/// first point is integrated in closed form.
pub fn full_map(kind: CaseKind, m: usize) -> Option<(Vec<Poly>, Vec<Poly>)> {
    let t = case_table(kind);
    if kind == CaseKind::TtIdentical {
        return None;
    }
    let sub = &t.subdomains[m];
    let one = Poly::constant(1.0);
    let (shift_e1, shift_e2, scale) = match t.shift {
        Shift::None if t.k_xi() == 0 => (Poly::zero(), Poly::zero(), one.clone()),
        Shift::None => (Poly::zero(), Poly::zero(), Poly::xi(1)),
        Shift::Edge => (Poly::xi(1), Poly::zero(), Poly::xi(1).mul(&Poly::xi(2))),
        Shift::Face => (
            Poly::xi(1),
            Poly::xi(1).mul(&one.sub(&Poly::xi(2))),
            Poly::xi(1).mul(&Poly::xi(2)).mul(&Poly::xi(3)),
        ),
    };
    let build = |d: &[Poly]| -> Vec<Poly> {
        d.iter()
            .enumerate()
            .map(|(k, dk)| {
                let sh = match k {
                    0 => shift_e1.clone(),
                    1 => shift_e2.clone(),
                    _ => Poly::zero(),
                };
                sh.add(&scale.mul(dk))
            })
            .collect()
    };
    Some((build(&sub.d1), build(&sub.d2)))
}

/// Determinant of the Jacobian of the full map at `(ξ, η)`.
pub fn full_jacobian(kind: CaseKind, m: usize, xi: &[f64], eta: &[f64]) -> Option<f64> {
    let (x, y) = full_map(kind, m)?;
    let t = case_table(kind);
    let mut slots: Vec<usize> = (0..t.k_xi()).collect();
    slots.extend((0..t.k_eta).map(|k| ETA0 + k));
    let comps: Vec<&Poly> = x.iter().chain(y.iter()).collect();
    let n = comps.len();
    assert_eq!(n, slots.len());
    let mut vars = [0.0; crate::poly::NVARS];
    vars[..xi.len()].copy_from_slice(xi);
    vars[ETA0..ETA0 + eta.len()].copy_from_slice(eta);
    let jm = DMatrix::from_fn(n, n, |r, c| comps[r].derivative(slots[c]).eval(&vars));
    Some(jm.determinant())
}

/// Total measure of the parametrized domain: `1/36` (TT) or `1/12` (TP).
pub fn partition_volume(kind: CaseKind) -> Result<f64> {
    const N: usize = 12;
    let t = case_table(kind);
    let xi_part = if t.k_xi() == 0 {
        1.0
    } else {
        let exps = t.xi_jacobian.clone();
        crate::quadrature::tensor_integrate(
            |x| x.iter().zip(&exps).map(|(xk, &e)| xk.powi(e as i32)).product(),
            &vec![N; exps.len()],
        )?
    };
    let mut eta_part = 0.0;
    for sub in &t.subdomains {
        eta_part += crate::quadrature::tensor_integrate(|e| sub.jac_eta.eval_eta(e).abs(), &vec![N; t.k_eta])?;
    }
    Ok(t.symmetry * xi_part * eta_part)
}

/// Exponent `p_k` per scaling variable, measured from the homogeneity of
/// the untransformed integrand in each `ξ_k`; the identical case uses the
/// radial structure `p_k = J_k − 1`.
pub fn xi_exponent_audit(kind: CaseKind) -> Vec<i32> {
    static CACHE: OnceLock<Mutex<HashMap<CaseKind, Vec<i32>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(v) = cache.lock().unwrap().get(&kind) {
        return v.clone();
    }
    let v = measure_exponents(kind);
    cache.lock().unwrap().insert(kind, v.clone());
    v
}

fn measure_exponents(kind: CaseKind) -> Vec<i32> {
    let t = case_table(kind);
    if t.k_xi() == 0 {
        return vec![];
    }
    if kind == CaseKind::TtIdentical {
        return t.xi_jacobian.iter().map(|&j| j as i32 - 1).collect();
    }
    // Generic aligned configuration with reference-coordinate bases that
    // satisfy the continuity (TT) or vanishing-on-panel (TP) conditions.
    let s = 0.5;
    let m1 = Matrix3::new(1.0, 0.2, -0.1, 0.1, 0.9, 0.3, -0.2, 0.1, 1.1);
    let eta: Vec<f64> = (0..t.k_eta).map(|k| 0.31 + 0.13 * k as f64).collect();
    let xi0: Vec<f64> = (0..t.k_xi()).map(|k| 0.7 - 0.1 * k as f64).collect();
    let shared = kind.shared();
    let eval = |xi: &[f64]| -> f64 {
        let (x, y) = full_map(kind, 0).unwrap();
        let mut vars = [0.0; crate::poly::NVARS];
        vars[..xi.len()].copy_from_slice(xi);
        vars[ETA0..ETA0 + eta.len()].copy_from_slice(&eta);
        let xv = Vector3::new(x[0].eval(&vars), x[1].eval(&vars), x[2].eval(&vars));
        let jac = full_jacobian(kind, 0, xi, &eta).unwrap().abs();
        if kind.is_tp() {
            // Panel spanned by the first two columns; φ vanishes on it.
            let mtau = Matrix3x2::from_columns(&[m1.column(0).into_owned(), m1.column(1).into_owned()]);
            let yv = Vector2::new(y[0].eval(&vars), y[1].eval(&vars));
            let nrm = m1.column(0).cross(&m1.column(1)).normalize();
            let px = m1 * xv;
            let z = mtau * yv - px;
            let phi = nrm.dot(&px);
            jac * phi * phi * z.dot(&nrm) * kernel_from_sq(z.norm_squared(), s)
        } else {
            // Second tet shares the leading `shared` reference columns.
            let mut m2 = Matrix3::new(0.8, -0.3, 0.2, 0.2, 1.2, -0.4, 0.3, 0.2, 0.7);
            for c in 0..shared.saturating_sub(1) {
                m2.set_column(c, &m1.column(c));
            }
            let yv = Vector3::new(y[0].eval(&vars), y[1].eval(&vars), y[2].eval(&vars));
            let g = Vector3::new(0.4, -0.7, 0.5);
            let d = g.dot(&(m1 * xv)) - g.dot(&(m2 * yv));
            let z = m1 * xv - m2 * yv;
            jac * d * d * kernel_from_sq(z.norm_squared(), s)
        }
    };
    let f0 = eval(&xi0);
    (0..t.k_xi())
        .map(|k| {
            let mut xi = xi0.clone();
            xi[k] *= 0.5;
            let ratio = f0 / eval(&xi);
            (ratio.log2() + 2.0 * s).round() as i32
        })
        .collect()
}

/// Which exponents determine the closed-form `ξ` factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PrefactorMode {
    /// Exponents measured from the integrand homogeneity.
    #[default]
    Audit,
    /// Exponents as printed in the case tables.
    Paper,
}

impl PrefactorMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "audit" => Some(PrefactorMode::Audit),
            "paper" => Some(PrefactorMode::Paper),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PrefactorMode::Audit => "audit",
            PrefactorMode::Paper => "paper",
        }
    }
}

pub fn xi_exponents(kind: CaseKind, mode: PrefactorMode) -> Vec<i32> {
    match mode {
        PrefactorMode::Audit => xi_exponent_audit(kind),
        PrefactorMode::Paper => case_table(kind).printed_exponents.clone(),
    }
}

/// Fails with `ExponentMismatch` when the audit disagrees with the table.
pub fn check_exponents(kind: CaseKind) -> Result<()> {
    let audit = xi_exponent_audit(kind);
    let table = case_table(kind).printed_exponents.clone();
    if audit != table {
        return Err(Error::ExponentMismatch {
            case: kind.name().into(),
            audit,
            table,
        });
    }
    Ok(())
}

/// `symmetry · ∏_k 1/(p_k + 1 − 2s)`.
pub fn prefactor(kind: CaseKind, s: f64, mode: PrefactorMode) -> f64 {
    let t = case_table(kind);
    t.symmetry
        * xi_exponents(kind, mode)
            .iter()
            .map(|&p| 1.0 / (p as f64 + 1.0 - 2.0 * s))
            .product::<f64>()
}

/// One node of a transformed rule: weight times `|detJ_m(η)|` and the
/// `η`-parts of both points.
#[derive(Debug, Clone, Copy)]
pub struct RuleNode {
    pub w: f64,
    pub d1: [f64; 3],
    pub d2: [f64; 3],
}

#[derive(Debug)]
pub struct DuffyRule {
    pub kind: CaseKind,
    pub n: usize,
    pub nodes: Vec<RuleNode>,
}

/// Rules with more nodes are streamed instead of cached.
pub const RULE_CACHE_LIMIT: usize = 1 << 20;

#[derive(Debug, Clone)]
struct CompiledPoly {
    terms: Vec<(f64, [u8; 6])>,
}

impl CompiledPoly {
    fn new(p: &Poly) -> Self {
        CompiledPoly {
            terms: p
                .terms
                .iter()
                .map(|(e, c)| {
                    debug_assert!(e[..ETA0].iter().all(|&x| x == 0));
                    let mut f = [0u8; 6];
                    f.copy_from_slice(&e[ETA0..ETA0 + 6]);
                    (*c, f)
                })
                .collect(),
        }
    }

    #[inline]
    fn eval(&self, pw: &[[f64; 8]; 6]) -> f64 {
        let mut s = 0.0;
        for (c, e) in &self.terms {
            let mut t = *c;
            for k in 0..6 {
                t *= pw[k][e[k] as usize];
            }
            s += t;
        }
        s
    }
}

struct CompiledMap {
    d1: Vec<CompiledPoly>,
    d2: Vec<CompiledPoly>,
    jac: CompiledPoly,
}

/// Visits every node of the `n`-point rule of `kind` in a fixed order.
fn stream_nodes(kind: CaseKind, n: usize, mut f: impl FnMut(RuleNode)) -> Result<()> {
    let t = case_table(kind);
    let g = gauss_rule(n)?;
    let maps: Vec<CompiledMap> = t
        .subdomains
        .iter()
        .map(|s| CompiledMap {
            d1: s.d1.iter().map(CompiledPoly::new).collect(),
            d2: s.d2.iter().map(CompiledPoly::new).collect(),
            jac: CompiledPoly::new(&s.jac_eta),
        })
        .collect();
    let k = t.k_eta;
    let mut idx = vec![0usize; k];
    let mut pw = [[1.0; 8]; 6];
    for cm in &maps {
        idx.iter_mut().for_each(|i| *i = 0);
        'grid: loop {
            let mut w = 1.0;
            for d in 0..k {
                let x = g.nodes[idx[d]];
                w *= g.weights[idx[d]];
                let mut v = 1.0;
                for e in 0..8 {
                    pw[d][e] = v;
                    v *= x;
                }
            }
            let mut node = RuleNode {
                w: w * cm.jac.eval(&pw).abs(),
                d1: [0.0; 3],
                d2: [0.0; 3],
            };
            for (c, p) in cm.d1.iter().enumerate() {
                node.d1[c] = p.eval(&pw);
            }
            for (c, p) in cm.d2.iter().enumerate() {
                node.d2[c] = p.eval(&pw);
            }
            f(node);
            let mut d = k;
            loop {
                if d == 0 {
                    break 'grid;
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < n {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
    Ok(())
}

pub fn rule_size(kind: CaseKind, n: usize) -> usize {
    let t = case_table(kind);
    t.subdomains.len() * n.pow(t.k_eta as u32)
}

/// Cached rule for `(kind, n)`, or `None` if it exceeds the cache limit.
pub fn duffy_rule(kind: CaseKind, n: usize) -> Result<Option<Arc<DuffyRule>>> {
    gauss_rule(n)?;
    if rule_size(kind, n) > RULE_CACHE_LIMIT {
        return Ok(None);
    }
    static CACHE: OnceLock<Mutex<HashMap<(CaseKind, usize), Arc<DuffyRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(r) = cache.lock().unwrap().get(&(kind, n)) {
        return Ok(Some(r.clone()));
    }
    let mut nodes = Vec::with_capacity(rule_size(kind, n));
    stream_nodes(kind, n, |nd| nodes.push(nd))?;
    let rule = Arc::new(DuffyRule { kind, n, nodes });
    cache.lock().unwrap().insert((kind, n), rule.clone());
    Ok(Some(rule))
}

/// Visits all nodes, from the cache when possible.
pub fn for_each_node(kind: CaseKind, n: usize, mut f: impl FnMut(&RuleNode)) -> Result<()> {
    match duffy_rule(kind, n)? {
        Some(rule) => {
            rule.nodes.iter().for_each(&mut f);
            Ok(())
        }
        None => stream_nodes(kind, n, |nd| f(&nd)),
    }
}

/// Symmetric 6×6 moment `Σ w K(d) p pᵀ` with `p = [d₁; d₂]` and
/// `K = |M₁d₁ − M₂d₂|^{-3-2s}` over the rule of a touching TT case.
pub fn tt_moments(kind: CaseKind, n: usize, m1: &Matrix3<f64>, m2: &Matrix3<f64>, s: f64) -> Result<[[f64; 6]; 6]> {
    if kind.is_tp() || kind == CaseKind::TtDistant {
        return Err(Error::WrongCase(format!("{kind} has no tetrahedron moment rule")));
    }
    let mut acc = [0.0f64; 21];
    let mut bad = None;
    let e = -1.5 - s;
    for_each_node(kind, n, |nd| {
        let p = [nd.d1[0], nd.d1[1], nd.d1[2], nd.d2[0], nd.d2[1], nd.d2[2]];
        let mut z = [0.0; 3];
        for r in 0..3 {
            z[r] = m1[(r, 0)] * p[0] + m1[(r, 1)] * p[1] + m1[(r, 2)] * p[2]
                - m2[(r, 0)] * p[3]
                - m2[(r, 1)] * p[4]
                - m2[(r, 2)] * p[5];
        }
        let r2 = z[0] * z[0] + z[1] * z[1] + z[2] * z[2];
        let k = nd.w * r2.powf(e);
        if !k.is_finite() {
            bad.get_or_insert(p);
            return;
        }
        let mut c = 0;
        for a in 0..6 {
            let ka = k * p[a];
            for b in a..6 {
                acc[c] += ka * p[b];
                c += 1;
            }
        }
    })?;
    if let Some(p) = bad {
        return Err(Error::IntegrandError {
            node: p.to_vec(),
            value: f64::INFINITY,
        });
    }
    let mut out = [[0.0; 6]; 6];
    let mut c = 0;
    for a in 0..6 {
        for b in a..6 {
            out[a][b] = acc[c];
            out[b][a] = acc[c];
            c += 1;
        }
    }
    Ok(out)
}

/// Symmetric 3×3 moment `Σ w K(d) d₁d₁ᵀ` with
/// `K = (M_τd₂ − M_td₁)·n / |M_τd₂ − M_td₁|^{3+2s}` over a touching TP rule.
pub fn tp_moments(
    kind: CaseKind,
    n: usize,
    mt: &Matrix3<f64>,
    mtau: &Matrix3x2<f64>,
    normal: &Vector3<f64>,
    s: f64,
) -> Result<[[f64; 3]; 3]> {
    if !kind.is_tp() || kind == CaseKind::TpDistant {
        return Err(Error::WrongCase(format!("{kind} has no panel moment rule")));
    }
    let mut acc = [0.0f64; 6];
    let mut bad = None;
    let e = -1.5 - s;
    for_each_node(kind, n, |nd| {
        let d1 = nd.d1;
        let mut z = [0.0; 3];
        for r in 0..3 {
            z[r] = mtau[(r, 0)] * nd.d2[0] + mtau[(r, 1)] * nd.d2[1]
                - mt[(r, 0)] * d1[0]
                - mt[(r, 1)] * d1[1]
                - mt[(r, 2)] * d1[2];
        }
        let r2 = z[0] * z[0] + z[1] * z[1] + z[2] * z[2];
        let k = nd.w * (z[0] * normal[0] + z[1] * normal[1] + z[2] * normal[2]) * r2.powf(e);
        if !k.is_finite() {
            bad.get_or_insert([d1[0], d1[1], d1[2], nd.d2[0], nd.d2[1]]);
            return;
        }
        let mut c = 0;
        for a in 0..3 {
            for b in a..3 {
                acc[c] += k * d1[a] * d1[b];
                c += 1;
            }
        }
    })?;
    if let Some(p) = bad {
        return Err(Error::IntegrandError {
            node: p.to_vec(),
            value: f64::INFINITY,
        });
    }
    let mut out = [[0.0; 3]; 3];
    let mut c = 0;
    for a in 0..3 {
        for b in a..3 {
            out[a][b] = acc[c];
            out[b][a] = acc[c];
            c += 1;
        }
    }
    Ok(out)
}

fn tol_for(h: f64) -> f64 {
    1e-12 * h.max(1e-300)
}

/// Reference-coordinate form `(v0, Mᵀg)` of a restriction.
fn reference_form(r: &AffineRestriction, m: &Matrix3<f64>) -> (f64, Vector3<f64>) {
    if r.active {
        (r.v0, m.transpose() * r.g)
    } else {
        (0.0, Vector3::zeros())
    }
}

/// Checks the aligned TT pair and returns the difference vectors
/// `c = [−G₁; G₂]` of both functions.
fn tt_difference_vectors(
    kind: CaseKind,
    t1: &Tetrahedron,
    t2: &Tetrahedron,
    m1: &Matrix3<f64>,
    m2: &Matrix3<f64>,
    r: [&[AffineRestriction; 2]; 2],
) -> Result<[[f64; 6]; 2]> {
    let shared = kind.shared();
    let h = t1.diameter().max(t2.diameter());
    for k in 0..shared {
        if (t1.v[k] - t2.v[k]).norm() > tol_for(h) {
            return Err(Error::AlignmentError(format!(
                "{kind}: shared vertex slot {k} differs between the elements"
            )));
        }
    }
    let mut out = [[0.0; 6]; 2];
    for (f, rr) in r.iter().enumerate() {
        let (v1, g1) = reference_form(&rr[0], m1);
        let (v2, g2) = reference_form(&rr[1], m2);
        let scale = 1.0 + g1.abs().max().max(g2.abs().max());
        if (v1 - v2).abs() > 1e-12 * scale {
            return Err(Error::AlignmentError(format!(
                "{kind}: basis values at the shared vertex differ ({v1} vs {v2})"
            )));
        }
        for k in 0..shared.saturating_sub(1) {
            if (g1[k] - g2[k]).abs() > 1e-12 * scale {
                return Err(Error::AlignmentError(format!(
                    "{kind}: tangential gradients differ along reference direction {k}"
                )));
            }
        }
        if kind == CaseKind::TtIdentical && (g1 - g2).norm() > 1e-12 * scale {
            return Err(Error::AlignmentError(
                "identical pair with different restrictions".into(),
            ));
        }
        out[f] = [-g1[0], -g1[1], -g1[2], g2[0], g2[1], g2[2]];
    }
    Ok(out)
}

fn quad_form6(a: &[f64; 6], s: &[[f64; 6]; 6], b: &[f64; 6]) -> f64 {
    let mut v = 0.0;
    for i in 0..6 {
        for j in 0..6 {
            v += a[i] * s[i][j] * b[j];
        }
    }
    v
}

/// `∫_{t₁}∫_{t₂} (φ_i(x)−φ_i(y))(φ_j(x)−φ_j(y)) |x−y|^{-3-2s}` for a touching
/// pair, with vertices already aligned so the shared ones lead.
/// `ri[0]`, `ri[1]` are the restrictions of `φ_i` to `t₁`, `t₂`, anchored at
/// the respective first vertex.
#[allow(clippy::too_many_arguments)]
pub fn singular_tt(
    kind: CaseKind,
    t1: &Tetrahedron,
    t2: &Tetrahedron,
    ri: &[AffineRestriction; 2],
    rj: &[AffineRestriction; 2],
    s: f64,
    n: usize,
    mode: PrefactorMode,
) -> Result<f64> {
    check_order(s)?;
    let map1 = tet_map(t1)?;
    let map2 = tet_map(t2)?;
    let c = tt_difference_vectors(kind, t1, t2, &map1.m, &map2.m, [ri, rj])?;
    if c[0].iter().all(|&x| x == 0.0) || c[1].iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let s6 = tt_moments(kind, n, &map1.m, &map2.m, s)?;
    let det = map1.det().abs() * map2.det().abs();
    Ok(prefactor(kind, s, mode) * det * quad_form6(&c[0], &s6, &c[1]))
}

/// Checks the aligned TP pair and returns `G = M_tᵀg` of both functions,
/// which must vanish on the panel.
fn tp_factors(
    kind: CaseKind,
    t: &Tetrahedron,
    panel: &Panel,
    mt: &Matrix3<f64>,
    r: [&AffineRestriction; 2],
) -> Result<[Vector3<f64>; 2]> {
    let shared = kind.shared();
    let pv = panel.vertices();
    let h = t.diameter().max(panel.diameter());
    for k in 0..shared {
        if (t.v[k] - pv[k]).norm() > tol_for(h) {
            return Err(Error::AlignmentError(format!(
                "{kind}: shared vertex slot {k} differs between tet and panel"
            )));
        }
    }
    let mut out = [Vector3::zeros(); 2];
    for (f, rr) in r.iter().enumerate() {
        let (v0, g) = reference_form(rr, mt);
        let scale = 1.0 + g.abs().max();
        if v0.abs() > 1e-12 * scale {
            return Err(Error::AlignmentError(format!(
                "{kind}: basis function does not vanish at the shared vertex"
            )));
        }
        for k in 0..shared.saturating_sub(1) {
            if g[k].abs() > 1e-12 * scale {
                return Err(Error::AlignmentError(format!(
                    "{kind}: basis function does not vanish along the shared simplex"
                )));
            }
        }
        out[f] = g;
    }
    Ok(out)
}

/// `∫_t φ_i φ_j ∫_τ (y−x)·n |x−y|^{-3-2s}` for a touching tet–panel pair,
/// aligned so the shared vertices lead. Both functions must vanish on `τ`.
#[allow(clippy::too_many_arguments)]
pub fn singular_tp(
    kind: CaseKind,
    t: &Tetrahedron,
    panel: &Panel,
    ri: &AffineRestriction,
    rj: &AffineRestriction,
    s: f64,
    n: usize,
    mode: PrefactorMode,
) -> Result<f64> {
    check_order(s)?;
    let mt = tet_map(t)?;
    let mp = panel_map(panel)?;
    let g = tp_factors(kind, t, panel, &mt.m, [ri, rj])?;
    let s3 = tp_moments(kind, n, &mt.m, &mp.m, &panel.n, s)?;
    let mut v = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            v += g[0][a] * s3[a][b] * g[1][b];
        }
    }
    Ok(prefactor(kind, s, mode) * mt.det().abs() * mp.surface_factor() * v)
}

/// Collapsed Gauss rule on the reference tetrahedron: `(weight, x̃)`.
pub fn tet_rule(n: usize) -> Result<Arc<Vec<(f64, [f64; 3])>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<(f64, [f64; 3])>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(r) = cache.lock().unwrap().get(&n) {
        return Ok(r.clone());
    }
    let g = gauss_rule(n)?;
    let mut out = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let (e1, e2, e3) = (g.nodes[i], g.nodes[j], g.nodes[k]);
                let w = g.weights[i] * g.weights[j] * g.weights[k] * e1 * e1 * e2;
                out.push((w, [e1, e1 * e2 * e3, e1 * e2 * (1.0 - e3)]));
            }
        }
    }
    let r = Arc::new(out);
    cache.lock().unwrap().insert(n, r.clone());
    Ok(r)
}

/// Collapsed Gauss rule on the reference triangle: `(weight, ỹ)`.
pub fn tri_rule(n: usize) -> Result<Arc<Vec<(f64, [f64; 2])>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<(f64, [f64; 2])>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(r) = cache.lock().unwrap().get(&n) {
        return Ok(r.clone());
    }
    let g = gauss_rule(n)?;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (e4, e5) = (g.nodes[i], g.nodes[j]);
            out.push((g.weights[i] * g.weights[j] * e4, [e4, e4 * e5]));
        }
    }
    let r = Arc::new(out);
    cache.lock().unwrap().insert(n, r.clone());
    Ok(r)
}

/// Affine moments of a distant tet pair with `a = [1, x̃]`, `b = [1, ỹ]`:
/// `P = ∫∫ K a aᵀ`, `Q = ∫∫ K b bᵀ`, `X = ∫∫ K a bᵀ`, all including
/// `|det M₁||det M₂|`.
#[derive(Debug, Clone, Copy)]
pub struct DistantTtMoments {
    pub p: Matrix4<f64>,
    pub q: Matrix4<f64>,
    pub x: Matrix4<f64>,
}

fn shares_vertex(a: &[nalgebra::Vector3<f64>], b: &[nalgebra::Vector3<f64>], h: f64) -> bool {
    a.iter().any(|p| b.iter().any(|q| (p - q).norm() <= tol_for(h)))
}

pub fn distant_tt_moments(t1: &Tetrahedron, t2: &Tetrahedron, s: f64, n: usize) -> Result<DistantTtMoments> {
    distant_tt_moments_orders(t1, t2, s, n, n)
}

/// As [`distant_tt_moments`] with separate orders for the two elements.
pub fn distant_tt_moments_orders(
    t1: &Tetrahedron,
    t2: &Tetrahedron,
    s: f64,
    n1: usize,
    n2: usize,
) -> Result<DistantTtMoments> {
    let h = t1.diameter().max(t2.diameter());
    if shares_vertex(&t1.v, &t2.v, h) {
        return Err(Error::WrongCase("distant rule applied to touching tetrahedra".into()));
    }
    let map1 = tet_map(t1)?;
    let map2 = tet_map(t2)?;
    let rx = tet_rule(n1)?;
    let ry = tet_rule(n2)?;
    let xs: Vec<Vector3<f64>> = rx.iter().map(|(_, x)| map1.apply(&Vector3::from(*x))).collect();
    let ys: Vec<Vector3<f64>> = ry.iter().map(|(_, y)| map2.apply(&Vector3::from(*y))).collect();
    let mut rsum = vec![0.0; xs.len()];
    let mut csum = vec![0.0; ys.len()];
    let mut x = Matrix4::zeros();
    let e = -1.5 - s;
    for (pi, xp) in xs.iter().enumerate() {
        let wp = rx[pi].0;
        let mut row = Vector4::zeros();
        for (qi, yq) in ys.iter().enumerate() {
            let r2 = (xp - yq).norm_squared();
            let k = r2.powf(e);
            if !k.is_finite() {
                return Err(Error::IntegrandError {
                    node: vec![xp.x, xp.y, xp.z, yq.x, yq.y, yq.z],
                    value: k,
                });
            }
            let wq = ry[qi].0;
            rsum[pi] += wq * k;
            csum[qi] += wp * k;
            let yb = ry[qi].1;
            row += wq * k * Vector4::new(1.0, yb[0], yb[1], yb[2]);
        }
        let xa = rx[pi].1;
        let a = Vector4::new(1.0, xa[0], xa[1], xa[2]);
        x += wp * a * row.transpose();
    }
    let mut p = Matrix4::zeros();
    for (pi, (w, xa)) in rx.iter().enumerate() {
        let a = Vector4::new(1.0, xa[0], xa[1], xa[2]);
        p += (w * rsum[pi]) * a * a.transpose();
    }
    let mut q = Matrix4::zeros();
    for (qi, (w, yb)) in ry.iter().enumerate() {
        let b = Vector4::new(1.0, yb[0], yb[1], yb[2]);
        q += (w * csum[qi]) * b * b.transpose();
    }
    let det = map1.det().abs() * map2.det().abs();
    Ok(DistantTtMoments {
        p: p * det,
        q: q * det,
        x: x * det,
    })
}

/// `[v0, Mᵀg]`, the coefficients of a restriction in `[1, x̃]`.
pub fn affine_coefficients(r: &AffineRestriction, m: &Matrix3<f64>) -> Vector4<f64> {
    let (v0, g) = reference_form(r, m);
    Vector4::new(v0, g[0], g[1], g[2])
}

/// Difference-form integral over a distant tet pair.
pub fn distant_tt(
    t1: &Tetrahedron,
    t2: &Tetrahedron,
    ri: &[AffineRestriction; 2],
    rj: &[AffineRestriction; 2],
    s: f64,
    n: usize,
) -> Result<f64> {
    check_order(s)?;
    let mo = distant_tt_moments(t1, t2, s, n)?;
    let m1 = tet_map(t1)?.m;
    let m2 = tet_map(t2)?.m;
    let (ai, bi) = (affine_coefficients(&ri[0], &m1), affine_coefficients(&ri[1], &m2));
    let (aj, bj) = (affine_coefficients(&rj[0], &m1), affine_coefficients(&rj[1], &m2));
    Ok(ai.dot(&(mo.p * aj)) + bi.dot(&(mo.q * bj)) - ai.dot(&(mo.x * bj)) - aj.dot(&(mo.x * bi)))
}

/// `∫_{t₁}∫_{t₂} φ_i(x) φ_j(y) |x−y|^{-3-2s}` over a distant pair.
pub fn distant_tt_far(
    t1: &Tetrahedron,
    t2: &Tetrahedron,
    ri: &AffineRestriction,
    rj: &AffineRestriction,
    s: f64,
    n: usize,
) -> Result<f64> {
    check_order(s)?;
    let mo = distant_tt_moments(t1, t2, s, n)?;
    let a = affine_coefficients(ri, &tet_map(t1)?.m);
    let b = affine_coefficients(rj, &tet_map(t2)?.m);
    Ok(a.dot(&(mo.x * b)))
}

/// `∫_t K_n a aᵀ` with `a = [1, x̃]` and `K_n = ∫_τ (y−x)·n |x−y|^{-3-2s}`,
/// including `|det M_t|` and the panel surface factor.
pub fn distant_tp_moments(t: &Tetrahedron, panel: &Panel, s: f64, n_t: usize, n_p: usize) -> Result<Matrix4<f64>> {
    let h = t.diameter().max(panel.diameter());
    if shares_vertex(&t.v, &panel.vertices(), h) {
        return Err(Error::WrongCase("distant rule applied to a touching panel".into()));
    }
    let mt = tet_map(t)?;
    let mp = panel_map(panel)?;
    let rx = tet_rule(n_t)?;
    let ry = tri_rule(n_p)?;
    let ys: Vec<(f64, Vector3<f64>)> = ry
        .iter()
        .map(|(w, y)| (*w, mp.apply(&Vector2::new(y[0], y[1]))))
        .collect();
    let e = -1.5 - s;
    let mut out = Matrix4::zeros();
    for (w, xa) in rx.iter() {
        let xp = mt.apply(&Vector3::from(*xa));
        let mut kn = 0.0;
        for (wq, yq) in &ys {
            let z = yq - xp;
            let v = z.dot(&panel.n) * z.norm_squared().powf(e);
            if !v.is_finite() {
                return Err(Error::IntegrandError {
                    node: vec![xp.x, xp.y, xp.z, yq.x, yq.y, yq.z],
                    value: v,
                });
            }
            kn += wq * v;
        }
        let a = Vector4::new(1.0, xa[0], xa[1], xa[2]);
        out += (w * kn) * a * a.transpose();
    }
    Ok(out * (mt.det().abs() * mp.surface_factor()))
}

/// `∫_t φ_i φ_j ∫_τ (y−x)·n |x−y|^{-3-2s}` over a distant tet–panel pair.
pub fn distant_tp(
    t: &Tetrahedron,
    panel: &Panel,
    ri: &AffineRestriction,
    rj: &AffineRestriction,
    s: f64,
    n: usize,
) -> Result<f64> {
    check_order(s)?;
    let mo = distant_tp_moments(t, panel, s, n, n)?;
    let m = tet_map(t)?.m;
    let (a, b) = (affine_coefficients(ri, &m), affine_coefficients(rj, &m));
    Ok(a.dot(&(mo * b)))
}
