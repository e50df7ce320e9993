use std::f64::consts::PI;
use std::time::Instant;

use fracduffy::assembly::{assemble_stiffness, max_asymmetry, DEFAULT_RHO};
use fracduffy::duffy::{partition_volume, tet_rule, tri_rule, CaseKind, PrefactorMode};
use fracduffy::error::Result;
use fracduffy::geometry::{Point3, Tetrahedron};
use fracduffy::kernels::AffineRestriction;
use fracduffy::mesh::{ball_mesh, Mesh};
use fracduffy::oracle::separation::SeparationOptions;
use fracduffy::oracle::{icosphere, panel_flux_reference, separation_check, subdivision_additivity, winning_mode};
use fracduffy::quadrature::OrderPlan;
use fracduffy::solver::{cholesky_ok, BallSolution};
use fracduffy::study::{
    ball_level, ball_order_plan, default_smoothness, observed_rate, singular_study, study_slopes, StudyCase,
};
use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODE: PrefactorMode = PrefactorMode::Audit;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn partition_of_volume() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for kind in CaseKind::ALL {
        let want = if kind.is_tp() { 1.0 / 12.0 } else { 1.0 / 36.0 };
        worst = worst.max((partition_volume(kind)? - want).abs());
    }
    // Distant tables as products of the collapsed rules.
    let tet: f64 = tet_rule(12)?.iter().map(|(w, _)| w).sum();
    let tri: f64 = tri_rule(12)?.iter().map(|(w, _)| w).sum();
    worst = worst
        .max((tet * tet - 1.0 / 36.0).abs())
        .max((tet * tri - 1.0 / 12.0).abs());
    check(worst <= 1e-10, format!("max deviation {worst:.2e} over 9 tables"))
}

fn subdivision() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let base = [
        Point3::new(0.0, 0.0, 0.0),
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(0.5, 0.866, 0.0),
        Point3::new(0.5, 0.289, 0.816),
    ];
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let v = base.map(|p| p + Vector3::from_fn(|_, _| rng.gen_range(-0.15..0.15)));
        let t = Tetrahedron::new(v[0], v[1], v[2], v[3]);
        let ri = AffineRestriction::barycentric(&t, 0)?;
        let rj = AffineRestriction::barycentric(&t, 2)?;
        for s in [0.2, 0.5, 0.8] {
            worst = worst.max(subdivision_additivity(&t, &ri, &rj, s, 12, MODE)?.rel_err);
        }
    }
    check(worst <= 1e-6, format!("max relative error {worst:.2e}"))
}

fn separation() -> Result<Outcome> {
    let opts = SeparationOptions {
        tol: 1e-5,
        ..SeparationOptions::default()
    };
    let mut worst: f64 = 0.0;
    let mut all = true;
    let mut selected = None;
    let mut ratio = Vec::new();
    for kind in CaseKind::SINGULAR {
        let checks = separation_check(kind, &[0.3, 0.7], false, &opts)?;
        for c in &checks {
            worst = worst.max(c.rel_err);
            all &= c.pass;
            if let Some((paper, _)) = c.paper {
                ratio.push(format!("{:.4} at s={}", paper / c.duffy, c.s));
            }
        }
        if kind == CaseKind::TpVertex {
            selected = winning_mode(&checks);
        }
    }
    check(
        all && selected.is_some(),
        format!(
            "max relative error {worst:.2e}; tp-vertex selects {}; paper/audit {}",
            selected.map_or("none", |m| m.name()),
            ratio.join(", ")
        ),
    )
}

fn quadrature_convergence() -> Result<Outcome> {
    let orders: Vec<usize> = (2..=8).collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in [CaseKind::TtFace, CaseKind::TpEdge] {
        let rows = singular_study(kind, 0.8, &[1.0, 0.5, 0.25], &orders, 20, MODE)?;
        let fits = study_slopes(&rows);
        let slopes: Vec<f64> = fits.iter().map(|f| f.slope).collect();
        let lo = slopes.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let r2 = fits.iter().map(|f| f.r2).fold(f64::INFINITY, f64::min);
        let spread = (hi - lo) / hi.abs().min(lo.abs());
        pass &= fits.len() == 3 && r2 >= 0.98 && hi <= -0.5 && spread <= 0.1;
        parts.push(format!(
            "{kind}: slopes {lo:.3}..{hi:.3}, min R² {r2:.4}, spread {spread:.1e}"
        ));
    }
    check(pass, parts.join("; "))
}

fn scaling() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for s in [0.3, 0.7] {
        let factor = 2f64.powf(3.0 - 2.0 * s);
        for kind in CaseKind::SINGULAR {
            let unit = StudyCase::new(kind, 1.0)?.value(s, 8, MODE)?;
            let big = StudyCase::new(kind, 2.0)?.value(s, 8, MODE)?;
            worst = worst.max(rel(big, factor * unit));
        }
        let mesh = ball_mesh(1)?;
        let scaled = Mesh::new(mesh.vertices.iter().map(|x| x * 2.0).collect(), mesh.tets.clone())?;
        let plan = OrderPlan::fixed(4, 4);
        let a = assemble_stiffness(&mesh, s, plan, MODE)?.a;
        let b = assemble_stiffness(&scaled, s, plan, MODE)?.a;
        let entries = (&b - &a * factor).amax() / (a.amax() * factor);
        worst = worst.max(entries);
    }
    check(worst <= 1e-10, format!("max relative deviation {worst:.2e}"))
}

fn sphere_flux() -> Result<Outcome> {
    let s = 0.5;
    let mut parts = Vec::new();
    let mut pass = true;
    for r in [1.0, 2.0] {
        let panels = icosphere(3, r);
        let x = Point3::zeros();
        let rule = tri_rule(8)?;
        let gauss: f64 = panels
            .iter()
            .map(|p| {
                let (e1, e2) = (p.b - p.a, p.c - p.a);
                let jac = e1.cross(&e2).norm();
                rule.iter()
                    .map(|(w, y)| {
                        let z = p.a + e1 * (y[0] - y[1]) + e2 * y[1] - x;
                        w * jac * z.dot(&p.n) * z.norm().powf(-3.0 - 2.0 * s)
                    })
                    .sum::<f64>()
            })
            .sum();
        let adaptive = panel_flux_reference(&x, &panels, s)?;
        let exact = 4.0 * PI * r.powf(-2.0 * s);
        let (eg, ea) = (rel(gauss, exact), rel(adaptive, exact));
        pass &= panels.len() >= 1280 && eg <= 0.02 && ea <= 0.02 && rel(gauss, adaptive) <= 1e-6;
        parts.push(format!("R={r}: gauss {eg:.2e}, adaptive {ea:.2e}"));
    }
    check(pass, format!("relative errors {}", parts.join("; ")))
}

struct BallRuns {
    systems: Vec<DMatrix<f64>>,
}

fn ball_benchmark(runs: &mut BallRuns) -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for s in [0.2, 0.8] {
        let l = default_smoothness(s);
        let mut rows: Vec<(f64, f64)> = Vec::new();
        let mut orders = Vec::new();
        for level in 1..=3 {
            let run = ball_level(level, s, |h| ball_order_plan(h, l, s, DEFAULT_RHO, DEFAULT_RHO), MODE)?;
            rows.push((run.mesh.h(), run.error.rel));
            orders.push(format!("{}/{}", run.system.plan.n1, run.system.plan.n2));
            runs.systems.push(run.system.a);
        }
        let errs: Vec<String> = rows.iter().map(|r| format!("{:.4}", r.1)).collect();
        let rates: Vec<f64> = rows
            .windows(2)
            .map(|w| observed_rate(w[0].0, w[0].1, w[1].0, w[1].1))
            .collect();
        let decreasing = rows.windows(2).all(|w| w[1].1 < w[0].1);
        let in_range = rates.iter().all(|r| (0.35..=0.65).contains(r));
        pass &= decreasing && in_range;
        parts.push(format!(
            "s={s}: rel_err {}, rates {}, orders {}",
            errs.join(" > "),
            rates.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", "),
            orders.join(" ")
        ));
    }
    let u = BallSolution::new(0.5)?;
    let (closed, radial) = (u.mass(), u.mass_radial());
    let mass_ok = rel(closed, radial) <= 1e-10 && rel(closed, PI / 2.0) <= 1e-10;
    parts.push(format!("s=0.5 mass {closed:.12} vs radial {radial:.12}"));
    check(pass && mass_ok, parts.join("; "))
}

fn matrix_sanity(runs: &BallRuns) -> Result<Outcome> {
    let asym = runs.systems.iter().map(max_asymmetry).fold(0.0, f64::max);
    let chol = runs.systems.iter().all(cholesky_ok);
    let mesh = ball_mesh(2)?;
    let assemble_with = |threads: usize| -> Result<DMatrix<f64>> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        Ok(pool
            .install(|| assemble_stiffness(&mesh, 0.5, OrderPlan::fixed(4, 3), MODE))?
            .a)
    };
    let one = assemble_with(1)?;
    let mut bitwise = true;
    for threads in [2, 4, 8] {
        let other = assemble_with(threads)?;
        bitwise &= one.iter().zip(other.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    check(
        asym <= 1e-12 && chol && bitwise,
        format!(
            "{} ball matrices: max asymmetry {asym:.1e}, cholesky {}, bitwise across 1/2/4/8 threads {}",
            runs.systems.len(),
            if chol { "ok" } else { "failed" },
            if bitwise { "yes" } else { "no" }
        ),
    )
}

fn report(k: usize, name: &str, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let outcome = f();
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match outcome {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "criterion {k} {name}: {} ({detail}) [{secs:.1} s]",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn main() {
    let mut runs = BallRuns { systems: Vec::new() };
    let results = [
        report(1, "partition of volume", partition_of_volume),
        report(2, "subdivision additivity", subdivision),
        report(3, "separation oracle", separation),
        report(4, "exponential quadrature convergence", quadrature_convergence),
        report(5, "h^(3-2s) scaling", scaling),
        report(6, "sphere flux", sphere_flux),
        report(7, "ball benchmark", || ball_benchmark(&mut runs)),
        report(8, "matrix sanity", || matrix_sanity(&runs)),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
}
