//! Separation-limit reference for touching element pairs.
//!
//! The second element is shifted by `ε h v` and the double integral is
//! rewritten in the difference variable `z = y − x`:
//! `I = ∫_{S²} ∫_0^∞ w(r) Q(rω) dr dω`, where `Q(z)` integrates the
//! numerator over the overlap of the first element with the second shifted
//! by `−z`. Between contact events `Q` is a polynomial in `r`, so each piece
//! is rebuilt from a few exact overlap integrals and integrated against the
//! radial weight analytically near `r = 0`. Directions are integrated by
//! adaptive subdivision of a projected icosahedron.

use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::duffy::{distant_tp, distant_tt, singular_tp, singular_tt, CaseKind, PrefactorMode};
use crate::error::{Error, Result};
use crate::geometry::{Panel, Point3, Tetrahedron};
use crate::kernels::{check_order, AffineRestriction};
use crate::mesh::TET_FACES;
use crate::oracle::icosphere;
use crate::quadrature::gauss_rule;

type V3 = Vector3<f64>;

/// Global affine function `c + g·x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub g: V3,
    pub c: f64,
}

impl Affine {
    pub fn eval(&self, x: &Point3) -> f64 {
        self.c + self.g.dot(x)
    }

    /// Restriction form anchored at `a`.
    pub fn restriction(&self, a: &Point3) -> AffineRestriction {
        AffineRestriction {
            g: self.g,
            v0: self.eval(a),
            active: true,
        }
    }

    pub fn translated(&self, d: &V3) -> Affine {
        Affine {
            g: self.g,
            c: self.c - self.g.dot(d),
        }
    }
}

/// A touching pair with its basis data. For tet pairs `fi[k]`, `fj[k]` are
/// the affine pieces on element `k`; for tet–panel pairs the functions live
/// on the tet and must vanish on the shared simplex.
#[derive(Debug, Clone)]
pub enum TouchingPair {
    TetTet {
        t1: Tetrahedron,
        t2: Tetrahedron,
        fi: [Affine; 2],
        fj: [Affine; 2],
    },
    TetPanel {
        t: Tetrahedron,
        panel: Panel,
        fi: Affine,
        fj: Affine,
    },
}

impl TouchingPair {
    pub fn diameter(&self) -> f64 {
        match self {
            TouchingPair::TetTet { t1, .. } => t1.diameter(),
            TouchingPair::TetPanel { t, .. } => t.diameter(),
        }
    }

    /// Second element shifted by `d`; basis functions keep their global form.
    pub fn shifted(&self, d: &V3) -> TouchingPair {
        match self {
            TouchingPair::TetTet { t1, t2, fi, fj } => TouchingPair::TetTet {
                t1: *t1,
                t2: t2.map(|p| p + d),
                fi: *fi,
                fj: *fj,
            },
            TouchingPair::TetPanel { t, panel, fi, fj } => {
                let [a, b, c] = panel.vertices().map(|p| p + d);
                TouchingPair::TetPanel {
                    t: *t,
                    panel: Panel { a, b, c, ..*panel },
                    fi: *fi,
                    fj: *fj,
                }
            }
        }
    }

    /// Value of the aligned pair by the transformed rules.
    pub fn duffy_value(&self, kind: CaseKind, s: f64, n: usize, mode: PrefactorMode) -> Result<f64> {
        match self {
            TouchingPair::TetTet { t1, t2, fi, fj } => {
                let ri = [fi[0].restriction(&t1.a()), fi[1].restriction(&t2.a())];
                let rj = [fj[0].restriction(&t1.a()), fj[1].restriction(&t2.a())];
                singular_tt(kind, t1, t2, &ri, &rj, s, n, mode)
            }
            TouchingPair::TetPanel { t, panel, fi, fj } => {
                let (ri, rj) = (fi.restriction(&t.a()), fj.restriction(&t.a()));
                singular_tp(kind, t, panel, &ri, &rj, s, n, mode)
            }
        }
    }

    /// Value of a separated pair by the distant rule with `n` points per axis.
    pub fn distant_value(&self, s: f64, n: usize) -> Result<f64> {
        match self {
            TouchingPair::TetTet { t1, t2, fi, fj } => {
                let ri = [fi[0].restriction(&t1.a()), fi[1].restriction(&t2.a())];
                let rj = [fj[0].restriction(&t1.a()), fj[1].restriction(&t2.a())];
                distant_tt(t1, t2, &ri, &rj, s, n)
            }
            TouchingPair::TetPanel { t, panel, fi, fj } => {
                let (ri, rj) = (fi.restriction(&t.a()), fj.restriction(&t.a()));
                distant_tp(t, panel, &ri, &rj, s, n)
            }
        }
    }
}

/// Outward face planes `(n, c)`, `n·x ≤ c` inside, face `k` opposite vertex `k`.
fn tet_planes(v: &[V3; 4]) -> [(V3, f64); 4] {
    let mut out = [(V3::zeros(), 0.0); 4];
    for (k, f) in TET_FACES.iter().enumerate() {
        let p0 = v[f[0]];
        let mut n = (v[f[1]] - p0).cross(&(v[f[2]] - p0)).normalize();
        if n.dot(&(v[k] - p0)) > 0.0 {
            n = -n;
        }
        out[k] = (n, n.dot(&p0));
    }
    out
}

const TET_EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

fn cut(p: &V3, q: &V3, dp: f64, dq: f64) -> V3 {
    p + (q - p) * (dp / (dp - dq))
}

/// Keeps the part of each tet with `n·x ≤ c`.
fn clip_tets(input: &[[V3; 4]], n: &V3, c: f64, out: &mut Vec<[V3; 4]>) {
    out.clear();
    for t in input {
        let d = t.map(|p| n.dot(&p) - c);
        let ins: Vec<usize> = (0..4).filter(|&k| d[k] <= 0.0).collect();
        let outs: Vec<usize> = (0..4).filter(|&k| d[k] > 0.0).collect();
        let x = |i: usize, o: usize| cut(&t[i], &t[o], d[i], d[o]);
        match ins.len() {
            4 => out.push(*t),
            1 => {
                let a = ins[0];
                out.push([t[a], x(a, outs[0]), x(a, outs[1]), x(a, outs[2])]);
            }
            2 => {
                let (a, b) = (ins[0], ins[1]);
                let (c2, d2) = (outs[0], outs[1]);
                let (ac, ad, bc, bd) = (x(a, c2), x(a, d2), x(b, c2), x(b, d2));
                out.push([t[a], ac, ad, t[b]]);
                out.push([ac, ad, t[b], bc]);
                out.push([ad, t[b], bc, bd]);
            }
            3 => {
                let o = outs[0];
                let (a, b, c3) = (ins[0], ins[1], ins[2]);
                let (a2, b2, c2) = (x(a, o), x(b, o), x(c3, o));
                out.push([t[a], t[b], t[c3], a2]);
                out.push([t[b], t[c3], a2, b2]);
                out.push([t[c3], a2, b2, c2]);
            }
            _ => {}
        }
    }
}

/// Exact integral of a quadratic over a tetrahedron.
fn quad_tet(t: &[V3; 4], f: &impl Fn(&V3) -> f64) -> f64 {
    let vol = (t[1] - t[0]).dot(&(t[2] - t[0]).cross(&(t[3] - t[0]))).abs() / 6.0;
    if vol == 0.0 {
        return 0.0;
    }
    let mut sv = 0.0;
    for p in t {
        sv += f(p);
    }
    let mut se = 0.0;
    for (i, j) in TET_EDGES {
        se += f(&(0.5 * (t[i] + t[j])));
    }
    vol * (-sv / 20.0 + se / 5.0)
}

/// Keeps the part of a planar polygon with `n·x ≤ c`.
fn clip_polygon(poly: &[V3], n: &V3, c: f64, out: &mut Vec<V3>) {
    out.clear();
    let k = poly.len();
    for i in 0..k {
        let p = poly[i];
        let q = poly[(i + 1) % k];
        let (dp, dq) = (n.dot(&p) - c, n.dot(&q) - c);
        if dp <= 0.0 {
            out.push(p);
        }
        if (dp <= 0.0) != (dq <= 0.0) {
            out.push(cut(&p, &q, dp, dq));
        }
    }
}

/// Exact integral of a quadratic over a convex planar polygon.
fn quad_polygon(poly: &[V3], f: &impl Fn(&V3) -> f64) -> f64 {
    let mut sum = 0.0;
    for i in 1..poly.len().saturating_sub(1) {
        let (a, b, c) = (poly[0], poly[i], poly[i + 1]);
        let area = 0.5 * (b - a).cross(&(c - a)).norm();
        sum += area / 3.0 * (f(&(0.5 * (a + b))) + f(&(0.5 * (b + c))) + f(&(0.5 * (c + a))));
    }
    sum
}

/// Overlap integrand `Q(z)` and contact events of one pair.
struct Correlation {
    pair: TouchingPair,
    /// Planes `m·z = b` where the overlap changes combinatorial type.
    events: Vec<(V3, f64)>,
    rmax: f64,
    /// Polynomial degree of `Q` along a ray.
    degree: usize,
    /// Radial weight exponent is `beta0 − 2s`.
    beta0: f64,
}

impl Correlation {
    fn new(pair: TouchingPair) -> Self {
        let mut events = Vec::new();
        let mut push = |m: V3, b: f64| {
            let len = m.norm();
            if len > 1e-12 {
                events.push((m / len, b / len));
            }
        };
        match &pair {
            TouchingPair::TetTet { t1, t2, .. } => {
                let (p1, p2) = (tet_planes(&t1.v), tet_planes(&t2.v));
                for v in &t1.v {
                    for (n, c) in &p2 {
                        push(*n, c - n.dot(v));
                    }
                }
                for w in &t2.v {
                    for (n, c) in &p1 {
                        push(*n, n.dot(w) - c);
                    }
                }
                for (i, j) in TET_EDGES {
                    for (k, l) in TET_EDGES {
                        let m = (t1.v[j] - t1.v[i]).cross(&(t2.v[l] - t2.v[k]));
                        push(m, m.dot(&(t2.v[k] - t1.v[i])));
                    }
                }
                let mut rmax: f64 = 0.0;
                for v in &t1.v {
                    for w in &t2.v {
                        rmax = rmax.max((w - v).norm());
                    }
                }
                Correlation {
                    pair,
                    events,
                    rmax: rmax * (1.0 + 1e-9),
                    degree: 5,
                    beta0: -1.0,
                }
            }
            TouchingPair::TetPanel { t, panel, .. } => {
                let pt = tet_planes(&t.v);
                let pv = panel.vertices();
                let ct = panel.n.dot(&pv[0]);
                for y in &pv {
                    for (n, c) in &pt {
                        push(*n, n.dot(y) - c);
                    }
                }
                for w in &t.v {
                    push(panel.n, ct - panel.n.dot(w));
                }
                for (i, j) in TET_EDGES {
                    for k in 0..3 {
                        let m = (t.v[j] - t.v[i]).cross(&(pv[(k + 1) % 3] - pv[k]));
                        push(m, m.dot(&(pv[k] - t.v[i])));
                    }
                }
                let mut rmax: f64 = 0.0;
                for v in &t.v {
                    for y in &pv {
                        rmax = rmax.max((y - v).norm());
                    }
                }
                Correlation {
                    pair,
                    events,
                    rmax: rmax * (1.0 + 1e-9),
                    degree: 4,
                    beta0: 0.0,
                }
            }
        }
    }

    /// `Q(z)`, or `None` when the overlap is empty.
    fn q(&self, z: &V3) -> Option<f64> {
        match &self.pair {
            TouchingPair::TetTet { t1, t2, fi, fj } => {
                let mut cur = vec![t1.v];
                let mut next = Vec::with_capacity(8);
                for (n, c) in tet_planes(&t2.v) {
                    clip_tets(&cur, &n, c - n.dot(z), &mut next);
                    std::mem::swap(&mut cur, &mut next);
                    if cur.is_empty() {
                        return None;
                    }
                }
                let f = |x: &V3| {
                    let y = x + z;
                    (fi[0].eval(x) - fi[1].eval(&y)) * (fj[0].eval(x) - fj[1].eval(&y))
                };
                Some(cur.iter().map(|t| quad_tet(t, &f)).sum())
            }
            TouchingPair::TetPanel { t, panel, fi, fj } => {
                let mut cur = panel.vertices().to_vec();
                let mut next = Vec::with_capacity(8);
                for (n, c) in tet_planes(&t.v) {
                    clip_polygon(&cur, &n, c + n.dot(z), &mut next);
                    std::mem::swap(&mut cur, &mut next);
                    if cur.len() < 3 {
                        return None;
                    }
                }
                let f = |y: &V3| {
                    let x = y - z;
                    fi.eval(&x) * fj.eval(&x)
                };
                Some(quad_polygon(&cur, &f))
            }
        }
    }

    /// `∫_0^∞ w(r) Q(rω) dr` for each `s`, including the panel-normal factor.
    fn ray(&self, w: &V3, s_list: &[f64], out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|v| *v = 0.0);
        let scale = self.rmax;
        let mut rs = vec![0.0, self.rmax];
        for (m, b) in &self.events {
            let den = m.dot(w);
            if den.abs() < 1e-15 {
                continue;
            }
            let r = b / den;
            if r.is_finite() && r > 1e-12 * scale && r < self.rmax {
                rs.push(r);
            }
        }
        rs.sort_by(|a, b| a.total_cmp(b));
        rs.dedup_by(|a, b| (*a - *b).abs() < 1e-12 * scale);
        let factor = match &self.pair {
            TouchingPair::TetTet { .. } => 1.0,
            TouchingPair::TetPanel { panel, .. } => panel.n.dot(w),
        };
        let deg = self.degree;
        for piece in rs.windows(2) {
            let (a, b) = (piece[0], piece[1]);
            if b - a < 1e-12 * scale {
                continue;
            }
            if self.q(&(w * (0.5 * (a + b)))).is_none() {
                continue;
            }
            if a == 0.0 {
                // Q = r² Σ c_k (r/b)^k near a contact point.
                let k = deg - 1;
                let nodes = chebyshev_nodes(k);
                let mut vm = DMatrix::zeros(k, k);
                let mut rhs = DVector::zeros(k);
                for (row, t) in nodes.iter().enumerate() {
                    let tt = 0.5 * (1.0 + t);
                    let r = b * tt;
                    let qv = self.q(&(w * r)).unwrap_or(0.0);
                    rhs[row] = qv / (r * r);
                    for col in 0..k {
                        vm[(row, col)] = tt.powi(col as i32);
                    }
                }
                let c = vm
                    .lu()
                    .solve(&rhs)
                    .ok_or_else(|| Error::OracleUnstable("singular interpolation system on a contact piece".into()))?;
                for (o, &s) in out.iter_mut().zip(s_list) {
                    let beta = self.beta0 - 2.0 * s;
                    let mut v = 0.0;
                    for (kk, ck) in c.iter().enumerate() {
                        v += ck / (kk as f64 + 3.0 + beta);
                    }
                    *o += factor * v * b.powf(3.0 + beta);
                }
            } else {
                let nodes = chebyshev_nodes(deg + 1);
                let vals: Vec<f64> = nodes
                    .iter()
                    .map(|t| self.q(&(w * (a + 0.5 * (b - a) * (1.0 + t)))).unwrap_or(0.0))
                    .collect();
                let interp = |r: f64| barycentric(&nodes, &vals, 2.0 * (r - a) / (b - a) - 1.0);
                for (o, &s) in out.iter_mut().zip(s_list) {
                    let beta = self.beta0 - 2.0 * s;
                    *o += factor * graded_integral(a, b, &|r| interp(r) * r.powf(beta))?;
                }
            }
        }
        Ok(())
    }
}

/// Chebyshev points of the first kind on `[−1, 1]`.
fn chebyshev_nodes(k: usize) -> Vec<f64> {
    (0..k)
        .map(|j| (std::f64::consts::PI * (2 * j + 1) as f64 / (2 * k) as f64).cos())
        .collect()
}

fn barycentric(nodes: &[f64], vals: &[f64], x: f64) -> f64 {
    let k = nodes.len();
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..k {
        let d = x - nodes[j];
        if d == 0.0 {
            return vals[j];
        }
        let wj =
            (std::f64::consts::PI * (2 * j + 1) as f64 / (2 * k) as f64).sin() * if j % 2 == 0 { 1.0 } else { -1.0 };
        num += wj / d * vals[j];
        den += wj / d;
    }
    num / den
}

/// Gauss integral on `[a, b]`, `a > 0`, split geometrically towards `a`.
fn graded_integral(a: f64, b: f64, f: &impl Fn(f64) -> f64) -> Result<f64> {
    let g = gauss_rule(8)?;
    let mut lo = a;
    let mut sum = 0.0;
    while lo < b {
        let hi = (2.0 * lo).min(b);
        let len = hi - lo;
        for (x, w) in g.nodes.iter().zip(&g.weights) {
            sum += w * len * f(lo + len * x);
        }
        lo = hi;
    }
    Ok(sum)
}

/// Degree-5 rule on a triangle, barycentric nodes.
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

fn split4(v: &[V3; 3]) -> [[V3; 3]; 4] {
    let m01 = 0.5 * (v[0] + v[1]);
    let m12 = 0.5 * (v[1] + v[2]);
    let m02 = 0.5 * (v[0] + v[2]);
    [[v[0], m01, m02], [m01, v[1], m12], [m02, m12, v[2]], [m01, m12, m02]]
}

/// Solid-angle integral over the radial projection of a flat triangle.
fn sphere_tri(engine: &Correlation, v: &[V3; 3], s_list: &[f64]) -> Result<Vec<f64>> {
    let cr = (v[1] - v[0]).cross(&(v[2] - v[0]));
    let area = 0.5 * cr.norm();
    let nhat = cr / cr.norm();
    let mut acc = vec![0.0; s_list.len()];
    let mut buf = vec![0.0; s_list.len()];
    for (b, w) in TRI7 {
        let p = b[0] * v[0] + b[1] * v[1] + b[2] * v[2];
        let len = p.norm();
        let jac = nhat.dot(&p).abs() / (len * len * len);
        engine.ray(&(p / len), s_list, &mut buf)?;
        for (a, x) in acc.iter_mut().zip(&buf) {
            *a += w * area * jac * x;
        }
    }
    Ok(acc)
}

struct Cell {
    v: [V3; 3],
    kids: [Vec<f64>; 4],
    err: f64,
}

impl PartialEq for Cell {
    fn eq(&self, o: &Self) -> bool {
        self.err == o.err
    }
}
impl Eq for Cell {}
impl PartialOrd for Cell {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Cell {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.err.total_cmp(&o.err)
    }
}

/// Adaptive options of the direction integral.
#[derive(Debug, Clone, Copy)]
pub struct SeparationOptions {
    /// Relative tolerance of each `I(ε)`.
    pub tol: f64,
    /// Cap on the number of direction cells.
    pub max_cells: usize,
}

impl Default for SeparationOptions {
    fn default() -> Self {
        SeparationOptions {
            tol: 2e-6,
            max_cells: 40_000,
        }
    }
}

fn make_cell(engine: &Correlation, v: [V3; 3], coarse: &[f64], s_list: &[f64], scale: &[f64]) -> Result<Cell> {
    let kids: Vec<Vec<f64>> = split4(&v)
        .iter()
        .map(|c| sphere_tri(engine, c, s_list))
        .collect::<Result<_>>()?;
    let mut err: f64 = 0.0;
    for k in 0..s_list.len() {
        let fine: f64 = kids.iter().map(|c| c[k]).sum();
        err = err.max((fine - coarse[k]).abs() / scale[k]);
    }
    let [a, b, c, d]: [Vec<f64>; 4] = kids.try_into().unwrap();
    Ok(Cell {
        v,
        kids: [a, b, c, d],
        err,
    })
}

/// `∫∫ w(r) Q(rω)` over all directions for each `s`, with the cell count.
fn correlation_integral(pair: TouchingPair, s_list: &[f64], opts: &SeparationOptions) -> Result<(Vec<f64>, usize)> {
    let engine = Correlation::new(pair);
    let roots: Vec<[V3; 3]> = icosphere(1, 1.0).iter().map(|p| p.vertices()).collect();
    let coarse: Vec<Vec<f64>> = roots
        .par_iter()
        .map(|v| sphere_tri(&engine, v, s_list))
        .collect::<Result<_>>()?;
    let mut scale = vec![0.0; s_list.len()];
    for c in &coarse {
        for (sc, x) in scale.iter_mut().zip(c) {
            *sc += x.abs();
        }
    }
    for sc in scale.iter_mut() {
        if *sc == 0.0 {
            *sc = 1.0;
        }
    }
    let cells: Vec<Cell> = roots
        .par_iter()
        .zip(&coarse)
        .map(|(v, c)| make_cell(&engine, *v, c, s_list, &scale))
        .collect::<Result<_>>()?;
    let mut err: f64 = cells.iter().map(|c| c.err).sum();
    let mut heap: BinaryHeap<Cell> = cells.into_iter().collect();
    while err > opts.tol && heap.len() < opts.max_cells {
        let batch: Vec<Cell> = (0..16).map_while(|_| heap.pop()).collect();
        let refined: Vec<Vec<Cell>> = batch
            .par_iter()
            .map(|cell| {
                split4(&cell.v)
                    .iter()
                    .zip(&cell.kids)
                    .map(|(v, c)| make_cell(&engine, *v, c, s_list, &scale))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        for (old, new) in batch.iter().zip(refined) {
            err -= old.err;
            for c in new {
                err += c.err;
                heap.push(c);
            }
        }
    }
    let mut total = vec![0.0; s_list.len()];
    for cell in heap.iter() {
        for kid in &cell.kids {
            for (t, x) in total.iter_mut().zip(kid) {
                *t += x;
            }
        }
    }
    Ok((total, heap.len()))
}

/// Extrapolated separation limit at one order `s`.
#[derive(Debug, Clone)]
pub struct SeparationReport {
    pub s: f64,
    /// Shifts as multiples of the element diameter.
    pub eps: Vec<f64>,
    pub values: Vec<f64>,
    /// Extrapolated `ε → 0` limit.
    pub limit: f64,
    /// Change of the limit when the largest shift is dropped from the fit.
    pub error_estimate: f64,
    /// Relative root-mean-square residual of the fit.
    pub residual: f64,
    /// Value of the touching configuration by the same ray integration.
    pub contact: f64,
    /// Distant rule with 16 points per axis at the largest shift, when the
    /// shifted elements are disjoint.
    pub distant_n16: Option<f64>,
    /// Set when `I(ε)` is not monotone in `ε`.
    pub unstable: Option<String>,
}

/// Term `ε^power (ln ε)^log` of a separation fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitTerm {
    pub power: f64,
    pub log: u32,
}

impl FitTerm {
    pub fn power(power: f64) -> Self {
        FitTerm { power, log: 0 }
    }

    fn eval(&self, eps: f64) -> f64 {
        eps.powf(self.power) * eps.ln().powi(self.log as i32)
    }
}

/// Leading terms of the fit `I(ε) ≈ L + Σ c_k ε^{p_k}` in ascending order.
/// Near-coincident exponents `p, p+δ` are replaced by `ε^p, ε^p ln ε`,
/// which spans the same limit space as `δ → 0`.
pub fn richardson_exponents(s: f64) -> Vec<FitTerm> {
    let mut e = vec![1.0, 2.0, 3.0 - 2.0 * s, 4.0 - 2.0 * s];
    e.sort_by(f64::total_cmp);
    let mut out: Vec<FitTerm> = Vec::with_capacity(e.len());
    for p in e {
        match out.last() {
            Some(t) if t.log == 0 && (p - t.power).abs() < 0.05 => {
                let power = t.power;
                out.push(FitTerm { power, log: 1 });
            }
            _ => out.push(FitTerm::power(p)),
        }
    }
    out
}

/// Least-squares fit of `L + Σ c_k t_k(ε)`; returns `(L, rms residual / |L|)`.
pub fn richardson_fit(eps: &[f64], values: &[f64], terms: &[FitTerm]) -> Result<(f64, f64)> {
    let m = eps.len();
    let k = terms.len() + 1;
    if m < k {
        return Err(Error::InvalidParameter(format!(
            "{m} separations cannot fit {k} coefficients"
        )));
    }
    let a = DMatrix::from_fn(m, k, |i, j| if j == 0 { 1.0 } else { terms[j - 1].eval(eps[i]) });
    let b = DVector::from_column_slice(values);
    let svd = a.clone().svd(true, true);
    let x = svd
        .solve(&b, 1e-14)
        .map_err(|e| Error::OracleUnstable(format!("fit failed: {e}")))?;
    let r = &a * &x - &b;
    let scale = x[0].abs().max(1e-300);
    Ok((x[0], (r.norm_squared() / m as f64).sqrt() / scale))
}

/// Default shifts `2^{-4} .. 2^{-9}`.
pub fn default_eps() -> Vec<f64> {
    (4..=9).map(|k| 0.5f64.powi(k)).collect()
}

/// Separation-limit reference of a touching pair. The second element is
/// shifted by `ε h v` for each `ε` in `eps` (decreasing), the shifted
/// integrals are computed by ray integration and extrapolated to `ε = 0`.
pub fn eps_separation_reference(
    pair: &TouchingPair,
    direction: &V3,
    s_list: &[f64],
    eps: &[f64],
    opts: &SeparationOptions,
) -> Result<Vec<SeparationReport>> {
    for &s in s_list {
        check_order(s)?;
    }
    if eps.windows(2).any(|w| w[1] >= w[0]) || eps.iter().any(|&e| e <= 0.0) {
        return Err(Error::InvalidParameter(
            "separations must be positive and decreasing".into(),
        ));
    }
    let v = direction.normalize();
    let h = pair.diameter();
    let mut values = vec![Vec::with_capacity(eps.len()); s_list.len()];
    for &e in eps {
        let (vals, cells) = correlation_integral(pair.shifted(&(v * (e * h))), s_list, opts)?;
        log::debug!("separation {e}: {cells} direction cells");
        for (k, x) in vals.into_iter().enumerate() {
            values[k].push(x);
        }
    }
    let (contact, _) = correlation_integral(pair.clone(), s_list, opts)?;
    let mut out = Vec::with_capacity(s_list.len());
    for (k, &s) in s_list.iter().enumerate() {
        let exps = richardson_exponents(s);
        let fit = |e: &[f64], v: &[f64]| {
            let used = exps.len().min(e.len().saturating_sub(2)).max(1);
            richardson_fit(e, v, &exps[..used])
        };
        let (limit, residual) = fit(eps, &values[k])?;
        let (limit2, _) = if eps.len() > 2 {
            fit(&eps[1..], &values[k][1..])?
        } else {
            (limit, 0.0)
        };
        let diffs: Vec<f64> = values[k].windows(2).map(|w| w[1] - w[0]).collect();
        let monotone = diffs.iter().all(|d| *d >= 0.0) || diffs.iter().all(|d| *d <= 0.0);
        let shifted = pair.shifted(&(v * (eps[0] * h)));
        let distant_n16 = match shifted.distant_value(s, 16) {
            Ok(x) => Some(x),
            Err(Error::WrongCase(_)) => None,
            Err(e) => return Err(e),
        };
        out.push(SeparationReport {
            s,
            eps: eps.to_vec(),
            values: values[k].clone(),
            limit,
            error_estimate: (limit - limit2).abs(),
            residual,
            contact: contact[k],
            distant_n16,
            unstable: (!monotone).then(|| "shifted integrals are not monotone in the separation".to_string()),
        });
    }
    Ok(out)
}

/// Rotation of `p` about the axis through `o` along unit `e` by `angle`.
fn rotate(p: &V3, o: &V3, e: &V3, angle: f64) -> V3 {
    let r = p - o;
    let (s, c) = angle.sin_cos();
    o + r * c + e.cross(&r) * s + e * (e.dot(&r) * (1.0 - c))
}

/// Test configuration of each touching case together with its shift
/// direction. Shared vertices lead in both elements.
pub fn separation_configuration(kind: CaseKind) -> Result<(TouchingPair, V3)> {
    let off = V3::new(0.2, -0.1, 0.3);
    let a = off;
    let b = off + V3::new(1.0, 0.1, -0.05);
    let c = off + V3::new(0.35, 0.95, 0.05);
    let d = off + V3::new(0.3, 0.3, 0.9);
    let t1 = Tetrahedron::new(a, b, c, d);
    let u = Affine {
        g: V3::new(0.7, -0.4, 0.5),
        c: 0.3,
    };
    let w = Affine {
        g: V3::new(-0.2, 0.9, 0.3),
        c: -0.1,
    };
    // Continuous partner on t2: gradient jump normal to the shared simplex.
    let partner = |f: &Affine, jump: V3| Affine {
        g: f.g + jump,
        c: f.c - jump.dot(&a),
    };
    let e = (b - a).normalize();
    let perp = |p: &V3| {
        let r = p - a;
        r - e * e.dot(&r)
    };
    let reflect_axis = |p: &V3| p - 2.0 * perp(p);
    let pair = match kind {
        CaseKind::TtIdentical => {
            let pr = TouchingPair::TetTet {
                t1,
                t2: t1,
                fi: [u, u],
                fj: [w, w],
            };
            return Ok((pr, V3::new(1.0, 2.0, 3.0).normalize()));
        }
        CaseKind::TtFace => {
            let n = (b - a).cross(&(c - a)).normalize();
            let n = if n.dot(&(d - a)) > 0.0 { -n } else { n };
            let d2 = d - 2.0 * n * n.dot(&(d - a)) + V3::new(0.1, -0.05, 0.0);
            let t2 = Tetrahedron::new(a, b, c, d2);
            let pr = TouchingPair::TetTet {
                t1,
                t2,
                fi: [u, partner(&u, n * 0.8)],
                fj: [w, partner(&w, n * -0.5)],
            };
            return Ok((pr, n));
        }
        CaseKind::TtEdge => {
            let t2 = Tetrahedron::new(a, b, reflect_axis(&c), reflect_axis(&d));
            let j1 = V3::new(0.3, -0.6, 0.4);
            let j2 = V3::new(-0.5, 0.2, 0.7);
            let pr = TouchingPair::TetTet {
                t1,
                t2,
                fi: [u, partner(&u, j1 - e * e.dot(&j1))],
                fj: [w, partner(&w, j2 - e * e.dot(&j2))],
            };
            pr
        }
        CaseKind::TtVertex => {
            let axis = V3::new(0.3, -0.5, 0.8).normalize();
            let img = |p: &V3| rotate(&(2.0 * a - p), &a, &axis, 0.25);
            let t2 = Tetrahedron::new(a, img(&b), img(&c), img(&d));
            TouchingPair::TetTet {
                t1,
                t2,
                fi: [u, partner(&u, V3::new(0.2, 0.5, -0.3))],
                fj: [w, partner(&w, V3::new(-0.4, 0.1, 0.6))],
            }
        }
        CaseKind::TpFace => {
            let panel = Panel::facing_away(a, b, c, d, None);
            let l = Affine {
                g: panel.n,
                c: -panel.n.dot(&a),
            };
            let scaled = |k: f64| Affine { g: l.g * k, c: l.c * k };
            let pr = TouchingPair::TetPanel {
                t: t1,
                panel,
                fi: scaled(1.0),
                fj: scaled(-0.6),
            };
            return Ok((pr, panel.n));
        }
        CaseKind::TpEdge => {
            let panel = Panel::facing_away(a, b, reflect_axis(&c), t1.centroid(), None);
            let vanish_on_edge = |g: V3| {
                let g = g - e * e.dot(&g);
                Affine { g, c: -g.dot(&a) }
            };
            TouchingPair::TetPanel {
                t: t1,
                panel,
                fi: vanish_on_edge(V3::new(0.4, 0.8, -0.3)),
                fj: vanish_on_edge(V3::new(-0.6, 0.2, 0.9)),
            }
        }
        CaseKind::TpVertex => {
            let axis = V3::new(0.3, -0.5, 0.8).normalize();
            let img = |p: &V3| rotate(&(2.0 * a - p), &a, &axis, 0.25);
            let panel = Panel::facing_away(a, img(&b), img(&c), t1.centroid(), None);
            let vanish_at_a = |g: V3| Affine { g, c: -g.dot(&a) };
            TouchingPair::TetPanel {
                t: t1,
                panel,
                fi: vanish_at_a(V3::new(0.4, 0.8, -0.3)),
                fj: vanish_at_a(V3::new(-0.6, 0.2, 0.9)),
            }
        }
        k => return Err(Error::WrongCase(format!("{k} is not a touching case"))),
    };
    let dir = match &pair {
        TouchingPair::TetTet { t1, t2, .. } => t2.centroid() - t1.centroid(),
        TouchingPair::TetPanel { t, panel, .. } => panel.centroid() - t.centroid(),
    };
    Ok((pair, dir.normalize()))
}

impl TouchingPair {
    /// Same geometry with all basis functions replaced by zero.
    pub fn zero_basis(&self) -> TouchingPair {
        let z = Affine { g: V3::zeros(), c: 0.0 };
        match self {
            TouchingPair::TetTet { t1, t2, .. } => TouchingPair::TetTet {
                t1: *t1,
                t2: *t2,
                fi: [z; 2],
                fj: [z; 2],
            },
            TouchingPair::TetPanel { t, panel, .. } => TouchingPair::TetPanel {
                t: *t,
                panel: *panel,
                fi: z,
                fj: z,
            },
        }
    }

    fn is_zero(&self) -> bool {
        let zero = |f: &Affine| f.g == V3::zeros() && f.c == 0.0;
        match self {
            TouchingPair::TetTet { fi, fj, .. } => fi.iter().chain(fj).all(zero),
            TouchingPair::TetPanel { fi, fj, .. } => zero(fi) && zero(fj),
        }
    }
}

/// Gauss order of the transformed rules compared against the separation limit.
pub const CHECK_ORDER: usize = 16;

/// Relative agreement required between the transformed rules and the limit.
pub const CHECK_TOL: f64 = 1e-3;

/// Transformed-rule value of one case checked against its separation limit.
#[derive(Debug, Clone, Serialize)]
pub struct SeparationCheck {
    pub case: CaseKind,
    pub s: f64,
    pub zero_basis: bool,
    pub limit: f64,
    pub error_estimate: f64,
    pub duffy: f64,
    pub rel_err: f64,
    /// Value and relative error with the printed prefactor, where it differs.
    pub paper: Option<(f64, f64)>,
    pub pass: bool,
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs()
    }
}

/// Checks the transformed rules of `kind` against the separation limit of
/// its standard configuration. Zero bases short-circuit to exact zeros.
pub fn separation_check(
    kind: CaseKind,
    s_list: &[f64],
    zero_basis: bool,
    opts: &SeparationOptions,
) -> Result<Vec<SeparationCheck>> {
    let (pair, dir) = separation_configuration(kind)?;
    let pair = if zero_basis { pair.zero_basis() } else { pair };
    let reports = if pair.is_zero() {
        s_list
            .iter()
            .map(|&s| {
                check_order(s)?;
                Ok((s, 0.0, 0.0))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        eps_separation_reference(&pair, &dir, s_list, &default_eps(), opts)?
            .into_iter()
            .map(|r| (r.s, r.limit, r.error_estimate))
            .collect()
    };
    reports
        .into_iter()
        .map(|(s, limit, error_estimate)| {
            let duffy = pair.duffy_value(kind, s, CHECK_ORDER, PrefactorMode::Audit)?;
            let paper = if kind == CaseKind::TpVertex {
                let v = pair.duffy_value(kind, s, CHECK_ORDER, PrefactorMode::Paper)?;
                Some((v, rel(limit, v)))
            } else {
                None
            };
            let rel_err = rel(limit, duffy);
            Ok(SeparationCheck {
                case: kind,
                s,
                zero_basis,
                limit,
                error_estimate,
                duffy,
                rel_err,
                paper,
                pass: rel_err <= CHECK_TOL,
            })
        })
        .collect()
}

/// Prefactor mode selected by the nonzero checks: the one mode within
/// tolerance at every order while the other fails at every order.
pub fn winning_mode(checks: &[SeparationCheck]) -> Option<PrefactorMode> {
    let rows: Vec<(f64, f64)> = checks
        .iter()
        .filter(|c| !c.zero_basis)
        .filter_map(|c| c.paper.map(|(_, p)| (c.rel_err, p)))
        .collect();
    if rows.is_empty() {
        return None;
    }
    if rows.iter().all(|&(a, p)| a <= CHECK_TOL && p > CHECK_TOL) {
        Some(PrefactorMode::Audit)
    } else if rows.iter().all(|&(a, p)| p <= CHECK_TOL && a > CHECK_TOL) {
        Some(PrefactorMode::Paper)
    } else {
        None
    }
}
