use fracduffy::assembly::graded_order;
use fracduffy::duffy::{singular_tp, singular_tt, CaseKind, PrefactorMode};
use fracduffy::geometry::{Panel, Point3, Tetrahedron};
use fracduffy::kernels::AffineRestriction;
use fracduffy::quadrature::order_plan;
use fracduffy::study::StudyCase;
use nalgebra::{Rotation3, Unit, Vector3};
use proptest::prelude::*;

const MODE: PrefactorMode = PrefactorMode::Audit;

fn p(x: f64, y: f64, z: f64) -> Point3 {
    Point3::new(x, y, z)
}

fn jitter() -> impl Strategy<Value = [f64; 12]> {
    prop::array::uniform12(-0.12..0.12f64)
}

/// Regular tetrahedron with perturbed vertices.
fn tet_from(j: &[f64; 12]) -> Tetrahedron {
    let base = [
        p(0.0, 0.0, 0.0),
        p(1.0, 0.0, 0.0),
        p(0.5, 0.866, 0.0),
        p(0.5, 0.289, 0.816),
    ];
    let v: Vec<Point3> = (0..4)
        .map(|k| base[k] + Vector3::new(j[3 * k], j[3 * k + 1], j[3 * k + 2]))
        .collect();
    Tetrahedron::new(v[0], v[1], v[2], v[3])
}

/// Face-sharing pair: the second apex mirrors the first across the plane z = 0.
fn face_pair(j: &[f64; 12]) -> (Tetrahedron, Tetrahedron) {
    let mut j = *j;
    for k in 0..3 {
        j[3 * k + 2] = 0.0;
    }
    let t1 = tet_from(&j);
    let d = t1.v[3];
    let t2 = Tetrahedron::new(t1.v[0], t1.v[1], t1.v[2], p(d.x + 0.05, d.y - 0.04, -d.z));
    (t1, t2)
}

fn affine(g: &[f64; 4], t: &Tetrahedron) -> AffineRestriction {
    let g3 = Vector3::new(g[0], g[1], g[2]);
    AffineRestriction {
        g: g3,
        v0: g[3] + g3.dot(&t.v[0]),
        active: true,
    }
}

fn hat(t: &Tetrahedron, k: usize) -> AffineRestriction {
    AffineRestriction::barycentric(t, k).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn singular_values_scale_with_power_three_minus_two_s(
        k in 0usize..7,
        h in 0.05..20.0f64,
        s in 0.05..0.95f64,
    ) {
        let kind = CaseKind::SINGULAR[k];
        let unit = StudyCase::new(kind, 1.0).unwrap().value(s, 6, MODE).unwrap();
        let scaled = StudyCase::new(kind, h).unwrap().value(s, 6, MODE).unwrap();
        prop_assert!(rel(scaled / unit, h.powf(3.0 - 2.0 * s)) < 1e-10);
    }

    #[test]
    fn tt_face_is_invariant_under_rigid_motions(
        j in jitter(),
        axis in prop::array::uniform3(-1.0..1.0f64),
        angle in 0.0..6.2f64,
        shift in prop::array::uniform3(-5.0..5.0f64),
        s in 0.05..0.95f64,
    ) {
        prop_assume!(Vector3::from(axis).norm() > 0.1);
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::from(axis)), angle);
        let b = Vector3::from(shift);
        let (t1, t2) = face_pair(&j);
        let value = |t1: &Tetrahedron, t2: &Tetrahedron| {
            let ri = [hat(t1, 0), hat(t2, 0)];
            let rj = [AffineRestriction::INACTIVE, hat(t2, 3)];
            singular_tt(CaseKind::TtFace, t1, t2, &ri, &rj, s, 6, MODE).unwrap()
        };
        let moved = |t: &Tetrahedron| t.map(|x| rot * x + b);
        prop_assert!(rel(value(&moved(&t1), &moved(&t2)), value(&t1, &t2)) < 1e-10);
    }

    #[test]
    fn swapping_basis_functions_keeps_the_value(
        j in jitter(),
        gi in prop::array::uniform4(-1.0..1.0f64),
        gj in prop::array::uniform4(-1.0..1.0f64),
        s in 0.05..0.95f64,
    ) {
        let t = tet_from(&j);
        let (fi, fj) = ([affine(&gi, &t); 2], [affine(&gj, &t); 2]);
        let a = singular_tt(CaseKind::TtIdentical, &t, &t, &fi, &fj, s, 6, MODE).unwrap();
        let b = singular_tt(CaseKind::TtIdentical, &t, &t, &fj, &fi, s, 6, MODE).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12));

        let a0 = t.v[0];
        let panel = Panel::facing_away(a0, a0 + (a0 - t.v[1]) * 0.9, a0 + (a0 - t.v[2]) * 0.8 + Vector3::new(0.0, 0.0, -0.3), t.centroid(), None);
        let vanish = |g: &[f64; 4]| AffineRestriction { g: Vector3::new(g[0], g[1], g[2]), v0: 0.0, active: true };
        let (hi, hj) = (vanish(&gi), vanish(&gj));
        let c = singular_tp(CaseKind::TpVertex, &t, &panel, &hi, &hj, s, 6, MODE).unwrap();
        let d = singular_tp(CaseKind::TpVertex, &t, &panel, &hj, &hi, s, 6, MODE).unwrap();
        prop_assert!((c - d).abs() <= 1e-12 * c.abs().max(1e-12));
    }

    #[test]
    fn vertex_order_does_not_change_the_identical_integral(
        j in jitter(),
        gi in prop::array::uniform4(-1.0..1.0f64),
        gj in prop::array::uniform4(-1.0..1.0f64),
        perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
        s in 0.05..0.95f64,
    ) {
        let t = tet_from(&j);
        let q = t.permuted(perm);
        let value = |t: &Tetrahedron| {
            let (fi, fj) = ([affine(&gi, t); 2], [affine(&gj, t); 2]);
            singular_tt(CaseKind::TtIdentical, t, t, &fi, &fj, s, 14, MODE).unwrap()
        };
        let (a, b) = (value(&t), value(&q));
        prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-8), "{a} vs {b}");
    }

    #[test]
    fn shared_face_order_does_not_change_the_face_integral(
        j in jitter(),
        g in prop::array::uniform4(-1.0..1.0f64),
        perm in Just([0usize, 1, 2]).prop_shuffle(),
        s in 0.05..0.95f64,
    ) {
        let (t1, t2) = face_pair(&j);
        let full = [perm[0], perm[1], perm[2], 3];
        let value = |t1: &Tetrahedron, t2: &Tetrahedron| {
            let fi = [affine(&g, t1), affine(&g, t2)];
            let fj = [hat(t1, 3), AffineRestriction::INACTIVE];
            singular_tt(CaseKind::TtFace, t1, t2, &fi, &fj, s, 14, MODE).unwrap()
        };
        let (a, b) = (value(&t1, &t2), value(&t1.permuted(full), &t2.permuted(full)));
        prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-8), "{a} vs {b}");
    }

    #[test]
    fn graded_orders_stay_in_range_and_fall_with_separation(
        n in 1usize..20,
        rho in 0.55..2.0f64,
        q1 in 0.0..10.0f64,
        dq in 0.0..10.0f64,
    ) {
        let a = graded_order(n, rho, q1);
        let b = graded_order(n, rho, q1 + dq);
        prop_assert!(a >= n.min(2) && a <= n);
        prop_assert!(b <= a);
    }

    #[test]
    fn order_plan_grows_under_refinement(
        h in 0.01..0.99f64,
        f in 0.1..0.99f64,
        s in 0.05..0.9f64,
    ) {
        let l = (s + 0.5 - 1e-3f64).min(1.0);
        let coarse = order_plan(h, l, s, 0.75, 0.75).unwrap();
        let fine = order_plan(h * f, l, s, 0.75, 0.75).unwrap();
        prop_assert!(fine.n1 >= coarse.n1 && fine.n2 >= coarse.n2);
        prop_assert!(coarse.n1 >= coarse.n2);
    }
}
