use std::f64::consts::PI;

use approx::assert_relative_eq;
use fracduffy::assembly::assemble_stiffness;
use fracduffy::duffy::PrefactorMode;
use fracduffy::error::Error;
use fracduffy::geometry::Point3;
use fracduffy::mesh::ball_mesh;
use fracduffy::quadrature::OrderPlan;
use fracduffy::solver::{
    cholesky_ok, energy_error, eval_uh, solve_ball, solve_spd, BallSolution, SolveMethod, DEFAULT_TOL,
};
use fracduffy::study::{ball_level, ball_order_plan, default_smoothness};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn spd_solves_recover_known_solutions() {
    let id = DMatrix::<f64>::identity(5, 5);
    let b = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5, 0.0]);
    assert!((solve_spd(&id, &b, 1e-12).unwrap().x - &b).amax() < 1e-14);

    let one = solve_spd(&DMatrix::from_element(1, 1, 4.0), &DVector::from_element(1, 2.0), 1e-12).unwrap();
    assert_relative_eq!(one.x[0], 0.5, max_relative = 1e-14);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = DMatrix::from_fn(30, 30, |_, _| rng.gen_range(-1.0..1.0));
    let a = &m * m.transpose() + DMatrix::identity(30, 30) * 0.5;
    let x = DVector::from_fn(30, |_, _| rng.gen_range(-1.0..1.0));
    let report = solve_spd(&a, &(&a * &x), 1e-12).unwrap();
    assert_eq!(report.method, SolveMethod::Cg);
    assert!((report.x - x).amax() < 1e-8);
}

#[test]
fn indefinite_systems_are_rejected() {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert!(!cholesky_ok(&a));
    let b = DVector::from_vec(vec![1.0, -1.0]);
    assert!(matches!(solve_spd(&a, &b, 1e-12), Err(Error::SolverError(_))));
    let neg = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
    assert!(matches!(solve_spd(&neg, &b, 1e-12), Err(Error::SolverError(_))));
}

#[test]
fn ball_solution_at_one_half() {
    let u = BallSolution::new(0.5).unwrap();
    assert_relative_eq!(u.u(&Point3::zeros()), 2.0 / PI, max_relative = 1e-14);
    assert_eq!(u.u(&Point3::new(0.6, 0.8, 0.0)), 0.0);
    assert_eq!(u.u(&Point3::new(2.0, 0.0, 0.0)), 0.0);
    assert_relative_eq!(u.load(), 8.0 / PI, max_relative = 1e-14);
    assert_relative_eq!(u.mass(), PI / 2.0, max_relative = 1e-14);
    assert_relative_eq!(u.energy(), 4.0, max_relative = 1e-14);
}

#[test]
fn closed_form_mass_matches_radial_quadrature() {
    for s in [0.05, 0.2, 0.5, 0.8, 0.95] {
        let u = BallSolution::new(s).unwrap();
        assert_relative_eq!(u.mass(), u.mass_radial(), max_relative = 1e-10);
        assert_relative_eq!(u.energy(), u.energy_radial(), max_relative = 1e-10);
    }
    assert!(BallSolution::new(1.0).is_err());
}

#[test]
fn zero_coefficients_have_unit_relative_error() {
    let mesh = ball_mesh(1).unwrap();
    let sys = assemble_stiffness(&mesh, 0.4, OrderPlan::fixed(2, 2), PrefactorMode::Audit).unwrap();
    let e = energy_error(&sys, &DVector::zeros(mesh.n_dofs()), 0.4).unwrap();
    assert_relative_eq!(e.rel, 1.0, max_relative = 1e-14);
    let x = solve_ball(&sys, DEFAULT_TOL).unwrap().x;
    let e = energy_error(&sys, &x, 0.4).unwrap();
    assert!(e.discrete > 0.0 && e.discrete < e.exact && e.rel < 1.0);
}

#[test]
fn finite_element_evaluation() {
    let mesh = ball_mesh(2).unwrap();
    let x = DVector::from_fn(mesh.n_dofs(), |r, _| 1.0 + r as f64);
    for (r, &v) in mesh.dofs.iter().enumerate() {
        assert_relative_eq!(
            eval_uh(&mesh, &x, &mesh.vertices[v]).unwrap(),
            x[r],
            max_relative = 1e-12
        );
    }
    for (v, dof) in mesh.dof_of.iter().enumerate() {
        if dof.is_none() {
            assert!(eval_uh(&mesh, &x, &mesh.vertices[v]).unwrap().abs() < 1e-12);
        }
    }
    assert!(matches!(
        eval_uh(&mesh, &x, &Point3::new(1.5, 0.0, 0.0)),
        Err(Error::OutOfDomain(_))
    ));
    assert!(eval_uh(&mesh, &DVector::zeros(3), &Point3::zeros()).is_err());
}

#[test]
fn ball_error_falls_under_refinement() {
    let s = 0.5;
    let plan = |h| ball_order_plan(h, default_smoothness(s), s, 0.75, 0.75);
    let coarse = ball_level(1, s, plan, PrefactorMode::Audit).unwrap();
    let fine = ball_level(2, s, plan, PrefactorMode::Audit).unwrap();
    assert!(fine.error.rel < coarse.error.rel);
    assert!(coarse.error.discrete < fine.error.discrete && fine.error.discrete < fine.error.exact);
    let centre = eval_uh(&fine.mesh, &fine.solution.x, &Point3::zeros()).unwrap();
    assert!((centre - 2.0 / PI).abs() < 0.15 * 2.0 / PI);
}
