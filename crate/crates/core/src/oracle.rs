//! Independent reference computations: subdivision additivity, adaptive
//! panel flux, and the separation-limit reference for touching pairs.

use std::collections::BinaryHeap;

use nalgebra::Vector3;

use crate::duffy::{distant_tt, singular_tt, CaseKind, PrefactorMode};
use crate::error::{Error, Result};
use crate::geometry::{Panel, Point3, Tetrahedron};
use crate::kernels::{check_order, AffineRestriction};
use crate::mesh::{classify_pair, red_children, PairKind};

pub mod separation;

pub use separation::{eps_separation_reference, separation_check, winning_mode, SeparationCheck, SeparationReport};

#[derive(Debug, Clone, Copy)]
pub struct Additivity {
    pub direct: f64,
    pub summed: f64,
    pub rel_err: f64,
    /// Child pairs per kind: identical, face, edge, vertex, distant.
    pub kinds: [usize; 5],
}

/// Compares `I_{t,t}` against the sum over the 64 pairs of red-refinement
/// children, each integrated by its own rule. `ri`, `rj` are affine
/// functions on `t` anchored at its first vertex.
pub fn subdivision_additivity(
    t: &Tetrahedron,
    ri: &AffineRestriction,
    rj: &AffineRestriction,
    s: f64,
    n: usize,
    mode: PrefactorMode,
) -> Result<Additivity> {
    check_order(s)?;
    let direct = singular_tt(CaseKind::TtIdentical, t, t, &[*ri; 2], &[*rj; 2], s, n, mode)?;
    let mut pts: Vec<Point3> = t.v.to_vec();
    let mids = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
    for (a, b) in mids {
        pts.push(0.5 * (t.v[a] + t.v[b]));
    }
    let children = red_children([0, 1, 2, 3], [4, 5, 6, 7, 8, 9], &pts);
    let tet_of = |ids: &[usize; 4]| Tetrahedron::new(pts[ids[0]], pts[ids[1]], pts[ids[2]], pts[ids[3]]);
    let on = |r: &AffineRestriction, c: &Tetrahedron| r.reanchored(&t.a(), &c.a());
    let mut summed = 0.0;
    let mut kinds = [0usize; 5];
    for c1 in &children {
        for c2 in &children {
            let case = classify_pair(c1, c2)?;
            let a = tet_of(c1).permuted(case.perm1);
            let b = tet_of(c2).permuted(case.perm2);
            let fi = [on(ri, &a), on(ri, &b)];
            let fj = [on(rj, &a), on(rj, &b)];
            let kind = CaseKind::tt(case.kind);
            let v = match case.kind {
                PairKind::Distant => distant_tt(&a, &b, &fi, &fj, s, n)?,
                _ => singular_tt(kind, &a, &b, &fi, &fj, s, n, mode)?,
            };
            kinds[case.kind as usize] += 1;
            summed += v;
        }
    }
    let rel_err = if direct == 0.0 {
        summed.abs()
    } else {
        ((summed - direct) / direct).abs()
    };
    Ok(Additivity {
        direct,
        summed,
        rel_err,
        kinds,
    })
}

#[derive(Clone, Copy)]
struct Tri {
    v: [Point3; 3],
    value: f64,
    err: f64,
}

impl PartialEq for Tri {
    fn eq(&self, o: &Self) -> bool {
        self.err == o.err
    }
}
impl Eq for Tri {}
impl PartialOrd for Tri {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Tri {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.err.total_cmp(&o.err)
    }
}

/// Degree-5 symmetric rule on a triangle (7 points), barycentric nodes.
const TRI7: [([f64; 3], f64); 7] = {
    const A1: f64 = 0.059_715_871_789_769_82;
    const B1: f64 = 0.470_142_064_105_115_1;
    const A2: f64 = 0.797_426_985_353_087_3;
    const B2: f64 = 0.101_286_507_323_456_3;
    const W0: f64 = 0.225;
    const W1: f64 = 0.132_394_152_788_506_2;
    const W2: f64 = 0.125_939_180_544_827_1;
    [
        ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], W0),
        ([A1, B1, B1], W1),
        ([B1, A1, B1], W1),
        ([B1, B1, A1], W1),
        ([A2, B2, B2], W2),
        ([B2, A2, B2], W2),
        ([B2, B2, A2], W2),
    ]
};

fn tri_quad(v: &[Point3; 3], f: &impl Fn(&Point3) -> f64) -> f64 {
    let area = 0.5 * (v[1] - v[0]).cross(&(v[2] - v[0])).norm();
    let mut s = 0.0;
    for (b, w) in TRI7 {
        let p = b[0] * v[0] + b[1] * v[1] + b[2] * v[2];
        s += w * f(&p);
    }
    s * area
}

fn split4(v: &[Point3; 3]) -> [[Point3; 3]; 4] {
    let m01 = 0.5 * (v[0] + v[1]);
    let m12 = 0.5 * (v[1] + v[2]);
    let m02 = 0.5 * (v[0] + v[2]);
    [[v[0], m01, m02], [m01, v[1], m12], [m02, m12, v[2]], [m01, m12, m02]]
}

/// Globally adaptive integral of `f` over a triangle to relative tolerance `tol`.
pub fn adaptive_triangle(v: [Point3; 3], f: &impl Fn(&Point3) -> f64, tol: f64, max_tris: usize) -> f64 {
    let make = |v: [Point3; 3]| -> Tri {
        let coarse = tri_quad(&v, f);
        let fine: f64 = split4(&v).iter().map(|c| tri_quad(c, f)).sum();
        Tri {
            v,
            value: fine,
            err: (fine - coarse).abs(),
        }
    };
    let mut heap = BinaryHeap::new();
    let root = make(v);
    let mut total = root.value;
    let mut err = root.err;
    heap.push(root);
    while err > tol * total.abs().max(1e-300) && heap.len() < max_tris {
        let Some(worst) = heap.pop() else { break };
        total -= worst.value;
        err -= worst.err;
        for c in split4(&worst.v) {
            let t = make(c);
            total += t.value;
            err += t.err;
            heap.push(t);
        }
    }
    heap.iter().map(|t| t.value).sum()
}

/// `Σ_τ ∫_τ (y−x)·n |x−y|^{-3-2s} dy` by adaptive subdivision.
pub fn panel_flux_reference(x: &Point3, panels: &[Panel], s: f64) -> Result<f64> {
    check_order(s)?;
    let mut total = 0.0;
    for p in panels {
        let h = p.diameter();
        let dist = point_triangle_distance(x, &p.vertices());
        if dist < 1e-6 * h {
            return Err(Error::OracleUnstable(format!(
                "point at distance {dist:e} from a panel"
            )));
        }
        let n = p.n;
        let f = |y: &Point3| {
            let z = y - x;
            z.dot(&n) * z.norm_squared().powf(-1.5 - s)
        };
        total += adaptive_triangle(p.vertices(), &f, 1e-10, 20_000);
    }
    Ok(total)
}

/// Euclidean distance from `p` to a triangle.
pub fn point_triangle_distance(p: &Point3, v: &[Point3; 3]) -> f64 {
    let (a, b, c) = (v[0], v[1], v[2]);
    let n = (b - a).cross(&(c - a));
    let nn = n.norm_squared();
    let proj = p - n * (n.dot(&(p - a)) / nn);
    let inside = [(a, b), (b, c), (c, a)]
        .iter()
        .all(|(u, w)| (w - u).cross(&(proj - u)).dot(&n) >= 0.0);
    if inside {
        return (p - proj).norm();
    }
    let seg = |u: &Point3, w: &Point3| {
        let d = w - u;
        let t = ((p - u).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
        (p - (u + t * d)).norm()
    };
    seg(&a, &b).min(seg(&b, &c)).min(seg(&c, &a))
}

/// Icosphere of radius `r` with `level` subdivisions, outward normals.
pub fn icosphere(level: usize, r: f64) -> Vec<Panel> {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Point3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vector3::from(*p).normalize())
    .collect();
    let mut f: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache = std::collections::HashMap::new();
        let mut mid = |a: usize, b: usize, v: &mut Vec<Point3>| -> usize {
            *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                v.push((0.5 * (v[a] + v[b])).normalize());
                v.len() - 1
            })
        };
        let mut nf = Vec::with_capacity(4 * f.len());
        for [a, b, c] in f {
            let ab = mid(a, b, &mut v);
            let bc = mid(b, c, &mut v);
            let ca = mid(c, a, &mut v);
            nf.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        f = nf;
    }
    f.iter()
        .map(|t| {
            let [a, b, c] = t.map(|k| v[k] * r);
            Panel::facing_away(a, b, c, Point3::zeros(), None)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tri7_degree_five() {
        let v = [Point3::zeros(), Point3::x(), Point3::y()];
        let got = tri_quad(&v, &|p| p.x.powi(2) * p.y.powi(3));
        // ∫ x^2 y^3 over the unit simplex = 2!3!/7!
        assert!((got - 12.0 / 5040.0).abs() < 1e-15);
    }

    #[test]
    fn icosphere_counts() {
        assert_eq!(icosphere(0, 1.0).len(), 20);
        assert_eq!(icosphere(3, 1.0).len(), 1280);
        let area: f64 = icosphere(3, 1.0).iter().map(|p| p.area()).sum();
        let sphere = 4.0 * std::f64::consts::PI;
        assert!(area < sphere && area > 0.99 * sphere, "{area}");
    }

    #[test]
    fn triangle_distance() {
        let v = [Point3::zeros(), Point3::x(), Point3::y()];
        assert!((point_triangle_distance(&Point3::new(0.2, 0.2, 0.5), &v) - 0.5).abs() < 1e-15);
        assert!((point_triangle_distance(&Point3::new(-1.0, 0.0, 0.0), &v) - 1.0).abs() < 1e-15);
    }
}
