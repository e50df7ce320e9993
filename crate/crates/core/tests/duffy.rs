use approx::assert_relative_eq;
use fracduffy::duffy::{
    distant_tp, distant_tt, partition_volume, prefactor, singular_tp, singular_tt, CaseKind, PrefactorMode,
};
use fracduffy::error::Error;
use fracduffy::geometry::{Panel, Point3, Tetrahedron};
use fracduffy::kernels::AffineRestriction;
use fracduffy::oracle::separation::{separation_configuration, SeparationOptions};
use fracduffy::oracle::{separation_check, winning_mode};
use fracduffy::quadrature::gauss_rule;
use fracduffy::study::StudyCase;

fn p(x: f64, y: f64, z: f64) -> Point3 {
    Point3::new(x, y, z)
}

/// Collapsed-coordinate Gauss rule on a tetrahedron, as (weight, point).
fn naive_tet(t: &Tetrahedron, n: usize) -> Vec<(f64, Point3)> {
    let g = gauss_rule(n).unwrap();
    let det = (t.v[1] - t.v[0])
        .cross(&(t.v[2] - t.v[0]))
        .dot(&(t.v[3] - t.v[0]))
        .abs();
    let mut out = Vec::new();
    for (i, &u) in g.nodes.iter().enumerate() {
        for (j, &v) in g.nodes.iter().enumerate() {
            for (k, &w) in g.nodes.iter().enumerate() {
                let (x, y, z) = (u, v * (1.0 - u), w * (1.0 - u) * (1.0 - v));
                let jac = (1.0 - u) * (1.0 - u) * (1.0 - v);
                let pt = t.v[0] + (t.v[1] - t.v[0]) * x + (t.v[2] - t.v[0]) * y + (t.v[3] - t.v[0]) * z;
                out.push((g.weights[i] * g.weights[j] * g.weights[k] * jac * det, pt));
            }
        }
    }
    out
}

fn naive_tri(pn: &Panel, n: usize) -> Vec<(f64, Point3)> {
    let g = gauss_rule(n).unwrap();
    let area2 = (pn.b - pn.a).cross(&(pn.c - pn.a)).norm();
    let mut out = Vec::new();
    for (i, &u) in g.nodes.iter().enumerate() {
        for (j, &v) in g.nodes.iter().enumerate() {
            let (x, y) = (u, v * (1.0 - u));
            let pt = pn.a + (pn.b - pn.a) * x + (pn.c - pn.a) * y;
            out.push((g.weights[i] * g.weights[j] * (1.0 - u) * area2, pt));
        }
    }
    out
}

fn hat(t: &Tetrahedron, k: usize) -> AffineRestriction {
    AffineRestriction::barycentric(t, k).unwrap()
}

fn eval(r: &AffineRestriction, t: &Tetrahedron, x: &Point3) -> f64 {
    if r.active {
        r.v0 + r.g.dot(&(x - t.v[0]))
    } else {
        0.0
    }
}

fn far_pair() -> (Tetrahedron, Tetrahedron) {
    let t1 = Tetrahedron::new(p(0.0, 0.0, 0.0), p(1.0, 0.1, 0.0), p(0.3, 0.9, 0.1), p(0.2, 0.3, 0.8));
    let t2 = Tetrahedron::new(p(2.5, 0.2, 0.1), p(3.4, 0.0, 0.3), p(2.8, 1.1, 0.0), p(2.9, 0.4, 1.0));
    (t1, t2)
}

#[test]
fn partition_volumes_cover_the_product_domains() {
    for kind in CaseKind::SINGULAR {
        let want = if kind.is_tp() { 1.0 / 12.0 } else { 1.0 / 36.0 };
        assert_relative_eq!(partition_volume(kind).unwrap(), want, max_relative = 1e-12);
    }
}

#[test]
fn distant_tet_pair_matches_naive_product_rule() {
    let (t1, t2) = far_pair();
    let s = 0.6;
    let ri = [hat(&t1, 0), hat(&t2, 2)];
    let rj = [hat(&t1, 3), hat(&t2, 1)];
    let q1 = naive_tet(&t1, 12);
    let q2 = naive_tet(&t2, 12);
    let mut naive = 0.0;
    for (w1, x) in &q1 {
        for (w2, y) in &q2 {
            let di = eval(&ri[0], &t1, x) - eval(&ri[1], &t2, y);
            let dj = eval(&rj[0], &t1, x) - eval(&rj[1], &t2, y);
            naive += w1 * w2 * di * dj * (x - y).norm().powf(-3.0 - 2.0 * s);
        }
    }
    let got = distant_tt(&t1, &t2, &ri, &rj, s, 8).unwrap();
    assert_relative_eq!(got, naive, max_relative = 1e-9);
}

#[test]
fn distant_tet_panel_matches_naive_product_rule() {
    let (t, far) = far_pair();
    let panel = Panel::facing_away(far.v[0], far.v[1], far.v[2], far.v[3], None);
    let s = 0.35;
    let (ri, rj) = (hat(&t, 1), hat(&t, 2));
    let qt = naive_tet(&t, 12);
    let qp = naive_tri(&panel, 12);
    let mut naive = 0.0;
    for (w1, x) in &qt {
        let flux: f64 = qp
            .iter()
            .map(|(w2, y)| w2 * (y - x).dot(&panel.n) * (x - y).norm().powf(-3.0 - 2.0 * s))
            .sum();
        naive += w1 * eval(&ri, &t, x) * eval(&rj, &t, x) * flux;
    }
    let got = distant_tp(&t, &panel, &ri, &rj, s, 8).unwrap();
    assert_relative_eq!(got, naive, max_relative = 1e-9);
}

#[test]
fn singular_values_converge_in_the_order() {
    for kind in CaseKind::SINGULAR {
        let case = StudyCase::new(kind, 1.0).unwrap();
        for s in [0.2, 0.8] {
            let a = case.value(s, 14, PrefactorMode::Audit).unwrap();
            let b = case.value(s, 20, PrefactorMode::Audit).unwrap();
            assert!((a - b).abs() <= 1e-9 * b.abs(), "{kind} s={s}: {a} vs {b}");
        }
    }
}

#[test]
fn tp_vertex_prefactor_modes_differ_by_the_exponent_ratio() {
    let case = StudyCase::new(CaseKind::TpVertex, 1.0).unwrap();
    for s in [0.25, 0.5, 0.75] {
        let audit = case.value(s, 10, PrefactorMode::Audit).unwrap();
        let paper = case.value(s, 10, PrefactorMode::Paper).unwrap();
        assert_relative_eq!(paper / audit, (5.0 - 2.0 * s) / (4.0 - 2.0 * s), max_relative = 1e-12);
    }
    for kind in CaseKind::SINGULAR.into_iter().filter(|k| *k != CaseKind::TpVertex) {
        assert_eq!(
            prefactor(kind, 0.4, PrefactorMode::Audit),
            prefactor(kind, 0.4, PrefactorMode::Paper)
        );
    }
}

// Separation limits of the tet-panel face configuration, frozen from the
// ray-integration oracle at tolerance 1e-4.
const TP_FACE_LIMITS: [(f64, f64); 2] = [(0.3, -1.767301293e-2), (0.7, -4.665224988e-2)];

#[test]
fn tp_face_matches_frozen_separation_limits() {
    let (pair, _) = separation_configuration(CaseKind::TpFace).unwrap();
    for (s, limit) in TP_FACE_LIMITS {
        let v = pair.duffy_value(CaseKind::TpFace, s, 16, PrefactorMode::Audit).unwrap();
        assert_relative_eq!(v, limit, max_relative = 1e-4);
    }
}

#[test]
fn tp_face_separation_check_passes_live() {
    let opts = SeparationOptions {
        tol: 1e-4,
        ..SeparationOptions::default()
    };
    let checks = separation_check(CaseKind::TpFace, &[0.5], false, &opts).unwrap();
    assert!(checks.iter().all(|c| c.pass), "{checks:?}");
    assert!(winning_mode(&checks).is_none());
}

#[test]
fn zero_basis_short_circuits_to_zero() {
    let opts = SeparationOptions::default();
    for kind in CaseKind::SINGULAR {
        let checks = separation_check(kind, &[0.3, 0.7], true, &opts).unwrap();
        for c in checks {
            assert_eq!(c.limit, 0.0);
            assert_eq!(c.duffy, 0.0);
            assert!(c.pass);
        }
    }
}

#[test]
fn invalid_order_and_case_are_rejected() {
    let t = Tetrahedron::reference();
    let r = [hat(&t, 0); 2];
    assert!(matches!(
        singular_tt(CaseKind::TtIdentical, &t, &t, &r, &r, 1.0, 4, PrefactorMode::Audit),
        Err(Error::InvalidParameter(_))
    ));
    let panel = Panel::facing_away(t.v[0], t.v[1], t.v[2], t.v[3], None);
    assert!(singular_tp(CaseKind::TtFace, &t, &panel, &r[0], &r[0], 0.5, 4, PrefactorMode::Audit).is_err());
    assert!(matches!(
        StudyCase::new(CaseKind::TtDistant, 1.0),
        Err(Error::WrongCase(_))
    ));
}
