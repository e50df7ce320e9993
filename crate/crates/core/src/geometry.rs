//! Simplices, affine reference maps and shape metrics.
//!
//! The reference tetrahedron has vertices `(0,0,0), (1,0,0), (1,1,0), (1,0,1)`
//! and the reference triangle `(0,0), (1,0), (1,1)`, so that
//! `M_t = [b-a, c-b, d-b]` and `M_τ = [b-a, c-b]`.

use nalgebra::{Matrix3, Matrix3x2, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Relative tolerance for `|det M_t| / h_t^3`.
pub const DEGENERACY_TOL: f64 = 1e-12;

/// Reference tetrahedron vertices in the order `a, b, c, d`.
pub const REF_TET: [[f64; 3]; 4] = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 0.0, 1.0]];

/// Reference triangle vertices in the order `a, b, c`.
pub const REF_TRI: [[f64; 2]; 3] = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]];

/// Reference-coordinate gradients of the barycentric coordinates of `a, b, c, d`.
pub const REF_BARY_GRAD: [[f64; 3]; 4] = [[-1.0, 0.0, 0.0], [1.0, -1.0, -1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Barycentric coordinates of a reference point.
pub fn ref_barycentric(x: &[f64; 3]) -> [f64; 4] {
    [1.0 - x[0], x[0] - x[1] - x[2], x[1], x[2]]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tetrahedron {
    pub v: [Point3; 4],
}

impl Tetrahedron {
    pub fn new(a: Point3, b: Point3, c: Point3, d: Point3) -> Self {
        Tetrahedron { v: [a, b, c, d] }
    }

    pub fn reference() -> Self {
        let p = |r: [f64; 3]| Point3::new(r[0], r[1], r[2]);
        Tetrahedron::new(p(REF_TET[0]), p(REF_TET[1]), p(REF_TET[2]), p(REF_TET[3]))
    }

    pub fn a(&self) -> Point3 {
        self.v[0]
    }
    pub fn b(&self) -> Point3 {
        self.v[1]
    }
    pub fn c(&self) -> Point3 {
        self.v[2]
    }
    pub fn d(&self) -> Point3 {
        self.v[3]
    }

    /// Reordered copy with `self.v[perm[k]]` in slot `k`.
    pub fn permuted(&self, perm: [usize; 4]) -> Self {
        Tetrahedron {
            v: perm.map(|k| self.v[k]),
        }
    }

    pub fn diameter(&self) -> f64 {
        let mut h: f64 = 0.0;
        for i in 0..4 {
            for j in (i + 1)..4 {
                h = h.max((self.v[i] - self.v[j]).norm());
            }
        }
        h
    }

    pub fn centroid(&self) -> Point3 {
        (self.v[0] + self.v[1] + self.v[2] + self.v[3]) / 4.0
    }

    /// Unsigned volume.
    pub fn volume(&self) -> f64 {
        raw_matrix(self).determinant().abs() / 6.0
    }

    pub fn map(&self, f: impl Fn(Point3) -> Point3) -> Self {
        Tetrahedron { v: self.v.map(f) }
    }
}

/// Triangular panel with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Panel {
    pub a: Point3,
    pub b: Point3,
    pub c: Point3,
    pub n: Point3,
    /// Tetrahedron the normal points away from, if any.
    pub owner: Option<usize>,
}

impl Panel {
    /// Panel with normal pointing away from `opposite`.
    pub fn facing_away(a: Point3, b: Point3, c: Point3, opposite: Point3, owner: Option<usize>) -> Self {
        let mut n = (b - a).cross(&(c - a)).normalize();
        if n.dot(&((a + b + c) / 3.0 - opposite)) < 0.0 {
            n = -n;
        }
        Panel { a, b, c, n, owner }
    }

    /// Panel with the right-hand normal of `(a, b, c)`.
    pub fn oriented(a: Point3, b: Point3, c: Point3) -> Self {
        let n = (b - a).cross(&(c - a)).normalize();
        Panel {
            a,
            b,
            c,
            n,
            owner: None,
        }
    }

    pub fn vertices(&self) -> [Point3; 3] {
        [self.a, self.b, self.c]
    }

    pub fn area(&self) -> f64 {
        0.5 * (self.b - self.a).cross(&(self.c - self.a)).norm()
    }

    pub fn diameter(&self) -> f64 {
        (self.b - self.a)
            .norm()
            .max((self.c - self.b).norm())
            .max((self.a - self.c).norm())
    }

    pub fn centroid(&self) -> Point3 {
        (self.a + self.b + self.c) / 3.0
    }

    /// Reordered copy keeping the normal.
    pub fn permuted(&self, perm: [usize; 3]) -> Self {
        let v = self.vertices();
        Panel {
            a: v[perm[0]],
            b: v[perm[1]],
            c: v[perm[2]],
            ..*self
        }
    }
}

/// `x = M x̃ + offset` on the reference tetrahedron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap3 {
    pub m: Matrix3<f64>,
    pub offset: Point3,
}

impl AffineMap3 {
    pub fn apply(&self, x: &Vector3<f64>) -> Point3 {
        self.m * x + self.offset
    }

    pub fn det(&self) -> f64 {
        self.m.determinant()
    }
}

/// `y = M ỹ + offset` on the reference triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap2 {
    pub m: Matrix3x2<f64>,
    pub offset: Point3,
}

impl AffineMap2 {
    pub fn apply(&self, y: &Vector2<f64>) -> Point3 {
        self.m * y + self.offset
    }

    /// `|(b-a) x (c-b)|`, twice the panel area.
    pub fn surface_factor(&self) -> f64 {
        self.m.column(0).cross(&self.m.column(1)).norm()
    }
}

fn raw_matrix(t: &Tetrahedron) -> Matrix3<f64> {
    Matrix3::from_columns(&[t.b() - t.a(), t.c() - t.b(), t.d() - t.b()])
}

pub fn tet_map(t: &Tetrahedron) -> Result<AffineMap3> {
    if t.v.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
        return Err(Error::InvalidParameter("non-finite vertex".into()));
    }
    let m = raw_matrix(t);
    let h = t.diameter();
    let det = m.determinant();
    let tol = DEGENERACY_TOL * h * h * h;
    if !(det.abs() >= tol) || h == 0.0 {
        return Err(Error::DegenerateElement { det, tol });
    }
    Ok(AffineMap3 { m, offset: t.a() })
}

pub fn panel_map(p: &Panel) -> Result<AffineMap2> {
    let m = Matrix3x2::from_columns(&[p.b - p.a, p.c - p.b]);
    let h = p.diameter();
    let cross = m.column(0).cross(&m.column(1)).norm();
    let tol = DEGENERACY_TOL * h * h;
    if !(cross >= tol) || h == 0.0 {
        return Err(Error::DegenerateElement { det: cross, tol });
    }
    Ok(AffineMap2 { m, offset: p.a })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeMetrics {
    pub h: f64,
    /// Minimum of all face-triangle angles and all dihedral angles.
    pub theta: f64,
    pub volume: f64,
    /// Insphere radius.
    pub rho: f64,
}

const FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]];

fn angle(u: &Point3, v: &Point3) -> f64 {
    let c = u.dot(v) / (u.norm() * v.norm());
    c.clamp(-1.0, 1.0).acos()
}

pub fn shape_metrics(t: &Tetrahedron) -> Result<ShapeMetrics> {
    let map = tet_map(t)?;
    let volume = map.det().abs() / 6.0;
    let mut surface = 0.0;
    let mut theta = std::f64::consts::PI;
    for f in FACES {
        let [p, q, r] = f.map(|k| t.v[k]);
        surface += 0.5 * (q - p).cross(&(r - p)).norm();
        theta = theta
            .min(angle(&(q - p), &(r - p)))
            .min(angle(&(p - q), &(r - q)))
            .min(angle(&(p - r), &(q - r)));
    }
    // Dihedral angle along edge (i, j) between the faces opposite k and l.
    for i in 0..4 {
        for j in (i + 1)..4 {
            let others: Vec<usize> = (0..4).filter(|&k| k != i && k != j).collect();
            let e = (t.v[j] - t.v[i]).normalize();
            let proj = |p: Point3| {
                let w = p - t.v[i];
                w - e * e.dot(&w)
            };
            theta = theta.min(angle(&proj(t.v[others[0]]), &proj(t.v[others[1]])));
        }
    }
    Ok(ShapeMetrics {
        h: t.diameter(),
        theta,
        volume,
        rho: 3.0 * volume / surface,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GramScaling {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub gram_det_root: f64,
}

pub trait GramMatrix {
    fn gram(&self) -> nalgebra::DMatrix<f64>;
}

impl GramMatrix for AffineMap3 {
    fn gram(&self) -> nalgebra::DMatrix<f64> {
        let g = self.m.transpose() * self.m;
        nalgebra::DMatrix::from_iterator(3, 3, g.iter().copied())
    }
}

impl GramMatrix for AffineMap2 {
    fn gram(&self) -> nalgebra::DMatrix<f64> {
        let g = self.m.transpose() * self.m;
        nalgebra::DMatrix::from_iterator(2, 2, g.iter().copied())
    }
}

/// Eigenvalue extremes of `MᵀM` and `sqrt(det MᵀM)`.
pub fn gram_scaling_check(map: &impl GramMatrix) -> GramScaling {
    let g = map.gram();
    let det = g.determinant();
    let eig = g.symmetric_eigen().eigenvalues;
    GramScaling {
        lambda_min: eig.min(),
        lambda_max: eig.max(),
        gram_det_root: det.max(0.0).sqrt(),
    }
}

/// Lower bound on the Euclidean distance between two convex point sets,
/// from the largest projection gap over a set of candidate axes.
pub fn separation_lower_bound(p: &[Point3], q: &[Point3]) -> f64 {
    let gap = |axis: Point3| -> f64 {
        let n = axis.norm();
        if n < 1e-300 {
            return 0.0;
        }
        let u = axis / n;
        let (mut pmin, mut pmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for x in p {
            let v = u.dot(x);
            pmin = pmin.min(v);
            pmax = pmax.max(v);
        }
        let (mut qmin, mut qmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for x in q {
            let v = u.dot(x);
            qmin = qmin.min(v);
            qmax = qmax.max(v);
        }
        (qmin - pmax).max(pmin - qmax).max(0.0)
    };
    let mut best: f64 = 0.0;
    let edges = |s: &[Point3]| {
        let mut out = Vec::new();
        for i in 0..s.len() {
            for j in (i + 1)..s.len() {
                out.push(s[j] - s[i]);
            }
        }
        out
    };
    let ep = edges(p);
    let eq = edges(q);
    let cp: Point3 = p.iter().sum::<Point3>() / p.len() as f64;
    let cq: Point3 = q.iter().sum::<Point3>() / q.len() as f64;
    best = best.max(gap(cq - cp));
    for x in p {
        for y in q {
            best = best.max(gap(y - x));
        }
    }
    for a in &ep {
        for b in &ep {
            best = best.max(gap(a.cross(b)));
        }
        for b in &eq {
            best = best.max(gap(a.cross(b)));
        }
    }
    for a in &eq {
        for b in &eq {
            best = best.max(gap(a.cross(b)));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tet(seed: u64) -> Tetrahedron {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = || {
            Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
        };
        Tetrahedron::new(p(), p(), p(), p())
    }

    #[test]
    fn reference_map_is_identity() {
        let m = tet_map(&Tetrahedron::reference()).unwrap();
        assert_eq!(m.m, Matrix3::identity());
        assert_eq!(m.offset, Point3::zeros());
    }

    #[test]
    fn scaled_map_doubles() {
        let t = random_tet(1);
        let m1 = tet_map(&t).unwrap();
        let m2 = tet_map(&t.map(|p| 2.0 * p)).unwrap();
        assert!((m2.m - 2.0 * m1.m).norm() < 1e-15);
        assert!((m2.offset - 2.0 * m1.offset).norm() < 1e-15);
    }

    #[test]
    fn vertices_map_onto_tet() {
        for seed in 0..20 {
            let t = random_tet(seed);
            let Ok(m) = tet_map(&t) else { continue };
            for k in 0..4 {
                let r = Vector3::from(REF_TET[k]);
                assert!((m.apply(&r) - t.v[k]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn degenerate_tet_rejected() {
        let t = Tetrahedron::new(Point3::zeros(), Point3::x(), Point3::y(), Point3::new(0.5, 0.5, 0.0));
        assert!(matches!(tet_map(&t), Err(Error::DegenerateElement { .. })));
    }

    #[test]
    fn panel_map_examples() {
        let p = Panel::oriented(Point3::zeros(), Point3::x(), Point3::new(1.0, 1.0, 0.0));
        let m = panel_map(&p).unwrap();
        assert_eq!(m.apply(&Vector2::new(1.0, 0.0)), p.b);
        assert_eq!(m.apply(&Vector2::new(1.0, 1.0)), p.c);
        let shift = Point3::new(3.0, -1.0, 2.0);
        let q = Panel::oriented(p.a + shift, p.b + shift, p.c + shift);
        let mq = panel_map(&q).unwrap();
        assert!((mq.m - m.m).norm() < 1e-15);
        assert_eq!(mq.offset, shift);
    }

    #[test]
    fn regular_tet_metrics() {
        let s = 1.0 / 2f64.sqrt();
        let t = Tetrahedron::new(
            Point3::new(s, 0.0, -0.5),
            Point3::new(-s, 0.0, -0.5),
            Point3::new(0.0, s, 0.5),
            Point3::new(0.0, -s, 0.5),
        )
        .map(|p| p * s);
        let m = shape_metrics(&t).unwrap();
        assert!((m.h - 1.0).abs() < 1e-14);
        assert!((m.volume - 2f64.sqrt() / 12.0).abs() < 1e-14);
        assert!((m.theta - std::f64::consts::FRAC_PI_3).abs() < 1e-12);
        assert!((m.rho - 1.0 / (2.0 * 6f64.sqrt())).abs() < 1e-14);
    }

    #[test]
    fn reference_volume() {
        let m = shape_metrics(&Tetrahedron::reference()).unwrap();
        assert!((m.volume - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn gram_scaling() {
        let m = tet_map(&Tetrahedron::reference()).unwrap();
        let g = gram_scaling_check(&m);
        assert!((g.lambda_min - 1.0).abs() < 1e-14 && (g.lambda_max - 1.0).abs() < 1e-14);
        let t2 = tet_map(&random_tet(3).map(|p| 2.0 * p)).unwrap();
        let t1 = tet_map(&random_tet(3)).unwrap();
        let (g1, g2) = (gram_scaling_check(&t1), gram_scaling_check(&t2));
        assert!((g2.lambda_max / g1.lambda_max - 4.0).abs() < 1e-12);
        assert!((g2.lambda_min / g1.lambda_min - 4.0).abs() < 1e-9);
    }

    #[test]
    fn separation_bound_exact_for_face_gap() {
        let t = Tetrahedron::reference();
        let shifted = t.map(|p| p + Point3::new(0.0, 0.0, -2.5));
        // Reference tet spans z in [0,1]; the shifted copy spans [-2.5,-1.5].
        let d = separation_lower_bound(&t.v, &shifted.v);
        assert!((d - 1.5).abs() < 1e-12);
        assert_eq!(separation_lower_bound(&t.v, &t.v), 0.0);
    }
}
