//! Dense stiffness and load assembly over classified element pairs.
//!
//! Work is organised per element pair: one moment block per tet pair or
//! (tet, face) pair, scattered into every entry it touches. Congruent pairs
//! share their moments through a Gram-matrix key. Blocks are computed in
//! parallel and scattered sequentially in a fixed order, so the result does
//! not depend on the number of worker threads.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::duffy::{
    distant_tp_moments, distant_tt_moments_orders, prefactor, rule_size, tet_rule, tp_moments, tt_moments, CaseKind,
    PrefactorMode,
};
use crate::error::{Error, Result};
use crate::geometry::{panel_map, separation_lower_bound, tet_map, Point3, Tetrahedron, REF_BARY_GRAD};
use crate::kernels::{c_ds, check_order};
use crate::mesh::{classify_pair, classify_tet_panel, support_region, Mesh, PairKind};
use crate::quadrature::OrderPlan;

const NONE: usize = usize::MAX;

/// Grading parameter for plans without `ρ`.
pub use crate::quadrature::DEFAULT_RHO;

/// Magic bytes of the binary matrix dump.
pub const MATRIX_MAGIC: [u8; 8] = *b"FDMATRX1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssemblyOptions {
    /// Compute the upper triangle and mirror it. When off, every ordered
    /// entry is computed from its own ordered element pairs.
    pub symmetric_fill: bool,
    /// Lower Gauss orders for separated pairs.
    pub graded_far_orders: bool,
    /// Reuse moments between congruent element pairs.
    pub share_moments: bool,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        AssemblyOptions {
            symmetric_fill: true,
            graded_far_orders: true,
            share_moments: true,
        }
    }
}

/// Pair counts and work statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssemblyStats {
    /// Ordered tet pairs per kind: identical, face, edge, vertex, distant.
    pub tt_kinds: [usize; 5],
    /// (entry, tet, boundary panel) contributions per kind: face, edge, vertex, distant.
    pub tp_kinds: [usize; 4],
    /// Distinct moment blocks computed (touching tet pairs, near distant
    /// tet pairs, tet–panel pairs).
    pub unique_blocks: [usize; 3],
    /// Blocks taken from a congruent pair.
    pub shared_blocks: usize,
    /// Kernel evaluations.
    pub evaluations: u64,
    /// Histogram of distant tet-pair Gauss orders, index = order.
    pub far_orders: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct StiffnessSystem {
    pub a: DMatrix<f64>,
    pub g: DVector<f64>,
    /// Mesh vertex of each row.
    pub dof_map: Vec<usize>,
    pub stats: AssemblyStats,
    pub s: f64,
    pub h: f64,
    pub plan: OrderPlan,
    pub mode: PrefactorMode,
}

/// Right-hand side.
#[derive(Clone, Copy)]
pub enum Load<'a> {
    Constant(f64),
    Function(&'a (dyn Fn(&Point3) -> f64 + Sync)),
}

/// `g_i = ∫ f φ_i`, exact for constants and order-4 collapsed Gauss otherwise.
pub fn assemble_load(mesh: &Mesh, f: Load) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(mesh.n_dofs());
    let rule = tet_rule(4)?;
    for (k, t) in mesh.tets.iter().enumerate() {
        let tet = mesh.tet(k);
        let local = match f {
            Load::Constant(c) => [c * tet.volume() / 4.0; 4],
            Load::Function(f) => {
                let map = tet_map(&tet)?;
                let det = map.det().abs();
                let mut out = [0.0; 4];
                for (w, x) in rule.iter() {
                    let fx = f(&map.apply(&Vector3::from(*x)));
                    let lam = crate::geometry::ref_barycentric(x);
                    for l in 0..4 {
                        out[l] += w * fx * lam[l] * det;
                    }
                }
                out
            }
        };
        for l in 0..4 {
            if let Some(r) = mesh.dof_of[t[l]] {
                g[r] += local[l];
            }
        }
    }
    Ok(g)
}

/// Tet pairs and support-boundary panel pairs with their kinds.
#[derive(Debug, Clone, Default)]
pub struct PairWorklist {
    /// Unordered touching tet pairs `t1 <= t2` with kind.
    pub touching: Vec<(usize, usize, PairKind)>,
    /// Distinct `(tet, face)` pairs used by boundary terms, with kind.
    pub panels: Vec<(usize, usize, PairKind)>,
    /// Ordered tet pairs per kind: identical, face, edge, vertex, distant.
    pub tt_histogram: [usize; 5],
    /// (entry, tet, panel) triples per kind: face, edge, vertex, distant.
    pub tp_histogram: [usize; 4],
}

fn touching_pairs(mesh: &Mesh) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut seen = Vec::new();
    for t1 in 0..mesh.tets.len() {
        seen.clear();
        for &v in &mesh.tets[t1] {
            seen.extend(mesh.vertex_tets[v].iter().copied().filter(|&t2| t2 >= t1));
        }
        seen.sort_unstable();
        seen.dedup();
        out.extend(seen.iter().map(|&t2| (t1, t2)));
    }
    out
}

/// Rows adjacent to each row, including itself, ascending.
fn dof_neighbours(mesh: &Mesh) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); mesh.n_dofs()];
    for t in &mesh.tets {
        for &a in t {
            if let Some(ra) = mesh.dof_of[a] {
                for &b in t {
                    if let Some(rb) = mesh.dof_of[b] {
                        out[ra].push(rb);
                    }
                }
            }
        }
    }
    for v in &mut out {
        v.sort_unstable();
        v.dedup();
    }
    out
}

struct BoundaryEntry {
    p: usize,
    q: usize,
    /// `(tet, [(panel index, orientation)])`.
    tets: Vec<(usize, Vec<(usize, f64)>)>,
}

/// Boundary terms of all adjacent row pairs `p <= q` and the distinct
/// `(tet, face)` pairs they need.
fn boundary_entries(mesh: &Mesh, nbrs: &[Vec<usize>]) -> (Vec<BoundaryEntry>, Vec<(usize, usize)>) {
    let mut entries = Vec::new();
    let mut index: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (p, list) in nbrs.iter().enumerate() {
        for &q in list.iter().filter(|&&q| q >= p) {
            let (vp, vq) = (mesh.dofs[p], mesh.dofs[q]);
            let region = support_region(vp, vq, mesh);
            let mut tets = Vec::new();
            for &t in &region.tets {
                if !(mesh.tets[t].contains(&vp) && mesh.tets[t].contains(&vq)) {
                    continue;
                }
                let mut faces = Vec::with_capacity(region.faces.len());
                for &f in &region.faces {
                    let owner = mesh.face_tets[f][0];
                    let sigma = if region.tets.binary_search(&owner).is_ok() {
                        1.0
                    } else {
                        -1.0
                    };
                    let next = index.len();
                    let id = *index.entry((t, f)).or_insert(next);
                    faces.push((id, sigma));
                }
                tets.push((t, faces));
            }
            entries.push(BoundaryEntry { p, q, tets });
        }
    }
    let mut pairs = vec![(0, 0); index.len()];
    for (k, v) in index {
        pairs[v] = k;
    }
    (entries, pairs)
}

/// Classified pair lists and histograms without any quadrature.
pub fn pair_worklist(mesh: &Mesh) -> Result<PairWorklist> {
    let m = mesh.tets.len();
    let mut out = PairWorklist::default();
    for (t1, t2) in touching_pairs(mesh) {
        let kind = classify_pair(&mesh.tets[t1], &mesh.tets[t2])?.kind;
        out.tt_histogram[kind as usize] += if t1 == t2 { 1 } else { 2 };
        out.touching.push((t1, t2, kind));
    }
    out.tt_histogram[4] = m * m - out.tt_histogram[..4].iter().sum::<usize>();
    let nbrs = dof_neighbours(mesh);
    let (entries, pairs) = boundary_entries(mesh, &nbrs);
    let kinds: Vec<PairKind> = pairs
        .iter()
        .map(|&(t, f)| classify_tet_panel(&mesh.tets[t], &mesh.faces[f]).map(|c| c.kind))
        .collect::<Result<_>>()?;
    for e in &entries {
        for (_, faces) in &e.tets {
            for &(id, _) in faces {
                out.tp_histogram[kinds[id] as usize - 1] += 1;
            }
        }
    }
    out.panels = pairs.iter().zip(&kinds).map(|(&(t, f), &k)| (t, f, k)).collect();
    Ok(out)
}

/// Gauss order for a pair at relative separation `q`, matching the error
/// level of order `n` at Bernstein parameter `2ρ`.
pub fn graded_order(n: usize, rho: f64, q: f64) -> usize {
    let lo = n.min(2);
    if q <= 0.0 {
        return n;
    }
    let rq = 1.0 + q + (q * q + 2.0 * q).sqrt();
    let m = (n as f64 * (2.0 * rho).ln() / rq.ln()).ceil();
    if !m.is_finite() {
        return n;
    }
    (m.max(0.0) as usize).clamp(lo, n)
}

fn relative_separation(a: &[Point3], b: &[Point3], h: f64) -> f64 {
    let centre = |p: &[Point3]| p.iter().sum::<Point3>() / p.len() as f64;
    let (ca, cb) = (centre(a), centre(b));
    let ra = a.iter().map(|p| (p - ca).norm()).fold(0.0, f64::max);
    let rb = b.iter().map(|p| (p - cb).norm()).fold(0.0, f64::max);
    let d = (ca - cb).norm() - ra - rb;
    let d = if d > 0.0 { d } else { separation_lower_bound(a, b) };
    d / h
}

type Key = Vec<i64>;

fn push_gram(key: &mut Key, cols: &[Vector3<f64>], quantum: f64) {
    for i in 0..cols.len() {
        for j in i..cols.len() {
            key.push((cols[i].dot(&cols[j]) / quantum).round() as i64);
        }
    }
}

fn tt_key(kind: CaseKind, m1: &Matrix3<f64>, m2: &Matrix3<f64>, quantum: f64) -> Key {
    let cols: Vec<Vector3<f64>> = (0..3)
        .map(|k| m1.column(k).into())
        .chain((0..3).map(|k| m2.column(k).into()))
        .collect();
    let mut key = vec![kind as i64];
    push_gram(&mut key, &cols, quantum);
    key
}

fn far_key(t1: &Tetrahedron, t2: &Tetrahedron, n: usize, quantum: f64) -> Result<Key> {
    let m1 = tet_map(t1)?.m;
    let m2 = tet_map(t2)?.m;
    let mut cols: Vec<Vector3<f64>> = (0..3)
        .map(|k| m1.column(k).into())
        .chain((0..3).map(|k| m2.column(k).into()))
        .collect();
    cols.push(t2.a() - t1.a());
    let mut key = vec![n as i64];
    push_gram(&mut key, &cols, quantum);
    Ok(key)
}

fn tp_key(kind: CaseKind, t: &Tetrahedron, panel: &crate::geometry::Panel, n: [usize; 2], quantum: f64) -> Result<Key> {
    let mt = tet_map(t)?.m;
    let mp = panel_map(panel)?.m;
    let mut cols: Vec<Vector3<f64>> = (0..3).map(|k| mt.column(k).into()).collect();
    cols.push(mp.column(0).into());
    cols.push(mp.column(1).into());
    cols.push(panel.a - t.a());
    let mut key = vec![kind as i64, n[0] as i64, n[1] as i64];
    push_gram(&mut key, &cols, quantum);
    let nq = quantum.sqrt();
    for c in (0..3).map(|k| Vector3::from(mt.column(k))).chain([panel.a - t.a()]) {
        key.push((c.dot(&panel.n) / nq).round() as i64);
    }
    Ok(key)
}

/// Groups items by key: returns, per item, the index of the first item
/// with the same key, and the list of those representatives.
fn group_by_key(keys: impl Iterator<Item = Option<Key>>) -> (Vec<usize>, Vec<usize>) {
    let mut first: HashMap<Key, usize> = HashMap::new();
    let mut rep_of = Vec::new();
    let mut reps = Vec::new();
    for (i, k) in keys.enumerate() {
        let slot = match k {
            Some(k) => *first.entry(k).or_insert_with(|| {
                reps.push(i);
                reps.len() - 1
            }),
            None => {
                reps.push(i);
                reps.len() - 1
            }
        };
        rep_of.push(slot);
    }
    (rep_of, reps)
}

/// `[δ_k0, ∇̃λ_k]`: barycentric coordinate `k` in the basis `[1, x̃]`.
fn bary_coefficients(k: usize) -> Vector4<f64> {
    let g = REF_BARY_GRAD[k];
    Vector4::new(if k == 0 { 1.0 } else { 0.0 }, g[0], g[1], g[2])
}

fn with_context(e: Error, what: String) -> Error {
    match e {
        Error::IntegrandError { .. } | Error::DegenerateElement { .. } => {
            log::error!("{what}: {e}");
            e
        }
        Error::AlignmentError(m) => Error::AlignmentError(format!("{what}: {m}")),
        Error::WrongCase(m) => Error::WrongCase(format!("{what}: {m}")),
        other => other,
    }
}

struct Touching {
    t1: usize,
    t2: usize,
    kind: CaseKind,
    /// Aligned global vertex ids.
    v1: [usize; 4],
    v2: [usize; 4],
    det: f64,
}

/// Accumulator honouring the fill mode.
struct Acc {
    a: DMatrix<f64>,
    symmetric: bool,
}

impl Acc {
    #[inline]
    fn add(&mut self, p: usize, q: usize, v: f64) {
        if self.symmetric && p > q {
            self.a[(q, p)] += v;
        } else {
            self.a[(p, q)] += v;
        }
    }
}

/// `A` and `g` (for `f = 1`) of the fractional Laplacian on `mesh`.
pub fn assemble_stiffness(mesh: &Mesh, s: f64, plan: OrderPlan, mode: PrefactorMode) -> Result<StiffnessSystem> {
    assemble_stiffness_with(mesh, s, plan, mode, AssemblyOptions::default())
}

pub fn assemble_stiffness_with(
    mesh: &Mesh,
    s: f64,
    plan: OrderPlan,
    mode: PrefactorMode,
    opts: AssemblyOptions,
) -> Result<StiffnessSystem> {
    check_order(s)?;
    let n = mesh.n_dofs();
    if n == 0 {
        return Err(Error::MeshError("mesh has no interior vertices".into()));
    }
    let (n1, n2) = (plan.n1, plan.n2);
    crate::quadrature::gauss_rule(n1)?;
    crate::quadrature::gauss_rule(n2)?;
    let c = c_ds(s)?;
    let h = mesh.h();
    let quantum = h * h * 1e-10;
    let m = mesh.tets.len();
    let tets: Vec<Tetrahedron> = (0..m).map(|k| mesh.tet(k)).collect();
    let mut stats = AssemblyStats {
        far_orders: vec![0; n1.max(n2) + 1],
        ..Default::default()
    };
    let mut acc = Acc {
        a: DMatrix::zeros(n, n),
        symmetric: opts.symmetric_fill,
    };
    let sym = opts.symmetric_fill;

    // Touching tet pairs.
    let mut touching = Vec::new();
    for (t1, t2) in touching_pairs(mesh) {
        let orders: &[(usize, usize)] = if sym || t1 == t2 {
            &[(t1, t2)]
        } else {
            &[(t1, t2), (t2, t1)]
        };
        for &(a, b) in orders {
            let case = classify_pair(&mesh.tets[a], &mesh.tets[b])?;
            stats.tt_kinds[case.kind as usize] += if sym && a != b { 2 } else { 1 };
            let ta = tets[a].permuted(case.perm1);
            let tb = tets[b].permuted(case.perm2);
            touching.push((
                Touching {
                    t1: a,
                    t2: b,
                    kind: CaseKind::tt(case.kind),
                    v1: case.perm1.map(|k| mesh.tets[a][k]),
                    v2: case.perm2.map(|k| mesh.tets[b][k]),
                    det: 0.0,
                },
                ta,
                tb,
            ));
        }
    }
    stats.tt_kinds[4] = m * m - stats.tt_kinds[..4].iter().sum::<usize>();
    let mut mats = Vec::with_capacity(touching.len());
    for (tp, ta, tb) in &mut touching {
        let m1 = tet_map(ta)?.m;
        let m2 = tet_map(tb)?.m;
        tp.det = m1.determinant().abs() * m2.determinant().abs();
        mats.push((m1, m2));
    }
    let (rep_of, reps) = group_by_key(
        touching
            .iter()
            .zip(&mats)
            .map(|((tp, _, _), (m1, m2))| opts.share_moments.then(|| tt_key(tp.kind, m1, m2, quantum))),
    );
    stats.unique_blocks[0] = reps.len();
    stats.shared_blocks += touching.len() - reps.len();
    for &r in &reps {
        stats.evaluations += rule_size(touching[r].0.kind, n1) as u64;
    }
    let moments: Vec<[[f64; 6]; 6]> = reps
        .par_iter()
        .map(|&r| {
            let (m1, m2) = &mats[r];
            let tp = &touching[r].0;
            tt_moments(tp.kind, n1, m1, m2, s).map_err(|e| with_context(e, format!("tet pair ({}, {})", tp.t1, tp.t2)))
        })
        .collect::<Result<_>>()?;
    for (k, (tp, _, _)) in touching.iter().enumerate() {
        let s6 = &moments[rep_of[k]];
        let mult = if sym && tp.t1 != tp.t2 { 2.0 } else { 1.0 };
        let scale = 0.5 * c * mult * prefactor(tp.kind, s, mode) * tp.det;
        let mut union: Vec<usize> = tp
            .v1
            .iter()
            .chain(&tp.v2)
            .copied()
            .filter(|&v| mesh.dof_of[v].is_some())
            .collect();
        union.sort_unstable();
        union.dedup();
        let vecs: Vec<(usize, [f64; 6], bool, bool)> = union
            .iter()
            .map(|&v| {
                let mut cv = [0.0; 6];
                let in1 = tp.v1.iter().position(|&x| x == v);
                let in2 = tp.v2.iter().position(|&x| x == v);
                if let Some(k) = in1 {
                    for d in 0..3 {
                        cv[d] = -REF_BARY_GRAD[k][d];
                    }
                }
                if let Some(k) = in2 {
                    for d in 0..3 {
                        cv[3 + d] = REF_BARY_GRAD[k][d];
                    }
                }
                (mesh.dof_of[v].unwrap(), cv, in1.is_some(), in2.is_some())
            })
            .collect();
        for (i, (p, cp, p1, p2)) in vecs.iter().enumerate() {
            let start = if sym { i } else { 0 };
            for (q, cq, q1, q2) in &vecs[start..] {
                if !((*p1 || *q1) && (*p2 || *q2)) {
                    continue;
                }
                let mut v = 0.0;
                for a in 0..6 {
                    if cp[a] == 0.0 {
                        continue;
                    }
                    let mut row = 0.0;
                    for b in 0..6 {
                        row += s6[a][b] * cq[b];
                    }
                    v += cp[a] * row;
                }
                acc.add(*p, *q, scale * v);
            }
        }
    }
    drop(touching);

    // Non-touching tet pairs: −c ∫∫ φ_p(x) φ_q(y) K.
    let coef: [Vector4<f64>; 4] = std::array::from_fn(bary_coefficients);
    let dof_local: Vec<Vec<(usize, usize)>> = mesh
        .tets
        .iter()
        .map(|t| (0..4).filter_map(|l| mesh.dof_of[t[l]].map(|r| (l, r))).collect())
        .collect();
    let mark_touching = |t1: usize, seen: &mut Vec<bool>| {
        for &v in &mesh.tets[t1] {
            for &t2 in &mesh.vertex_tets[v] {
                seen[t2] = true;
            }
        }
    };
    let (rho1, rho2) = (plan.rho1, plan.rho2);
    let order_of = |t1: usize, t2: usize| -> usize {
        if !opts.graded_far_orders {
            return n1;
        }
        let hh = tets[t1].diameter().max(tets[t2].diameter());
        graded_order(n1, rho1, relative_separation(&tets[t1].v, &tets[t2].v, hh))
    };
    let block_value = |x: &Matrix4<f64>, k: usize, l: usize| -c * coef[k].dot(&(x * coef[l]));

    // Near distant pairs (order >= 3) go through the shared-moment path.
    let mut near: Vec<(usize, usize, usize)> = Vec::new();
    let chunk = 64usize;
    let mut far_evals = 0u64;
    for start in (0..m).step_by(chunk) {
        let end = (start + chunk).min(m);
        type Row = (Vec<(usize, usize, f64)>, Vec<(usize, usize, usize)>, Vec<usize>, u64);
        let rows: Vec<Row> = (start..end)
            .into_par_iter()
            .map(|t1| -> Result<Row> {
                let mut out = Vec::new();
                let mut deferred = Vec::new();
                let mut orders = vec![0usize; n1 + 1];
                let mut evals = 0u64;
                if dof_local[t1].is_empty() {
                    return Ok((out, deferred, orders, evals));
                }
                let mut seen = vec![false; m];
                mark_touching(t1, &mut seen);
                let range = if sym { t1 + 1..m } else { 0..m };
                for t2 in range {
                    if seen[t2] || dof_local[t2].is_empty() {
                        continue;
                    }
                    let nq = order_of(t1, t2);
                    orders[nq] += 1;
                    if nq >= 3 && opts.share_moments {
                        deferred.push((t1, t2, nq));
                        continue;
                    }
                    let x = distant_tt_moments_orders(&tets[t1], &tets[t2], s, nq, nq)
                        .map_err(|e| with_context(e, format!("tet pair ({t1}, {t2})")))?
                        .x;
                    evals += (nq as u64).pow(6);
                    for &(k, p) in &dof_local[t1] {
                        for &(l, q) in &dof_local[t2] {
                            out.push((p, q, block_value(&x, k, l)));
                        }
                    }
                }
                Ok((out, deferred, orders, evals))
            })
            .collect::<Result<_>>()?;
        for (out, deferred, orders, evals) in rows {
            for (p, q, v) in out {
                acc.add(p, q, v);
            }
            near.extend(deferred);
            for (k, c) in orders.into_iter().enumerate() {
                stats.far_orders[k] += c;
            }
            far_evals += evals;
        }
    }
    stats.evaluations += far_evals;
    let keys: Vec<Option<Key>> = near
        .iter()
        .map(|&(t1, t2, nq)| far_key(&tets[t1], &tets[t2], nq, quantum).map(Some))
        .collect::<Result<_>>()?;
    let (rep_of, reps) = group_by_key(keys.into_iter());
    stats.unique_blocks[1] = reps.len();
    stats.shared_blocks += near.len() - reps.len();
    for &r in &reps {
        stats.evaluations += (near[r].2 as u64).pow(6);
    }
    let moments: Vec<Matrix4<f64>> = reps
        .par_iter()
        .map(|&r| {
            let (t1, t2, nq) = near[r];
            distant_tt_moments_orders(&tets[t1], &tets[t2], s, nq, nq)
                .map(|mo| mo.x)
                .map_err(|e| with_context(e, format!("tet pair ({t1}, {t2})")))
        })
        .collect::<Result<_>>()?;
    for (k, &(t1, t2, _)) in near.iter().enumerate() {
        let x = &moments[rep_of[k]];
        for &(a, p) in &dof_local[t1] {
            for &(b, q) in &dof_local[t2] {
                acc.add(p, q, block_value(x, a, b));
            }
        }
    }
    drop(near);

    // Boundary terms over ∂Ω_pq.
    let nbrs = dof_neighbours(mesh);
    let (entries, pairs) = boundary_entries(mesh, &nbrs);
    struct PanelJob {
        t: usize,
        f: usize,
        kind: CaseKind,
        tet: Tetrahedron,
        panel: crate::geometry::Panel,
        /// Aligned slot of each local vertex (touching) or identity.
        slot: [usize; 4],
        orders: [usize; 2],
    }
    let mut jobs = Vec::with_capacity(pairs.len());
    for &(t, f) in &pairs {
        let case = classify_tet_panel(&mesh.tets[t], &mesh.faces[f])?;
        let kind = CaseKind::tp(case.kind);
        let canonical = mesh.canonical_panel(f);
        if case.kind == PairKind::Distant {
            let nq = if opts.graded_far_orders {
                let hh = tets[t].diameter().max(canonical.diameter());
                graded_order(n2, rho2, relative_separation(&tets[t].v, &canonical.vertices(), hh))
            } else {
                n2
            };
            jobs.push(PanelJob {
                t,
                f,
                kind,
                tet: tets[t],
                panel: canonical,
                slot: [0, 1, 2, 3],
                orders: [nq, nq],
            });
        } else {
            let mut slot = [0; 4];
            for (k, &l) in case.perm_t.iter().enumerate() {
                slot[l] = k;
            }
            jobs.push(PanelJob {
                t,
                f,
                kind,
                tet: tets[t].permuted(case.perm_t),
                panel: canonical.permuted(case.perm_tau),
                slot,
                orders: [n2, n2],
            });
        }
    }
    let keys: Vec<Option<Key>> = jobs
        .iter()
        .map(|j| {
            if opts.share_moments {
                tp_key(j.kind, &j.tet, &j.panel, j.orders, quantum).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let (rep_of, reps) = group_by_key(keys.into_iter());
    stats.unique_blocks[2] = reps.len();
    stats.shared_blocks += jobs.len() - reps.len();
    for &r in &reps {
        let j = &jobs[r];
        stats.evaluations += if j.kind == CaseKind::TpDistant {
            (j.orders[0] as u64).pow(5)
        } else {
            rule_size(j.kind, n2) as u64
        };
    }
    // Per rep: 4×4 value matrix over aligned (touching) or local (distant) slots,
    // without det factors; those are congruence invariants and applied below.
    let blocks: Vec<Matrix4<f64>> = reps
        .par_iter()
        .map(|&r| -> Result<Matrix4<f64>> {
            let j = &jobs[r];
            let ctx = |e| with_context(e, format!("tet {} against face {}", j.t, j.f));
            if j.kind == CaseKind::TpDistant {
                let mo = distant_tp_moments(&j.tet, &j.panel, s, j.orders[0], j.orders[1]).map_err(ctx)?;
                Ok(Matrix4::from_fn(|k, l| coef[k].dot(&(mo * coef[l]))))
            } else {
                let mt = tet_map(&j.tet).map_err(ctx)?;
                let mp = panel_map(&j.panel).map_err(ctx)?;
                let s3 = tp_moments(j.kind, n2, &mt.m, &mp.m, &j.panel.n, s).map_err(ctx)?;
                let scale = prefactor(j.kind, s, mode) * mt.det().abs() * mp.surface_factor();
                let g = |k: usize| Vector3::from(REF_BARY_GRAD[k]);
                let s3 = Matrix3::from_fn(|a, b| s3[a][b]);
                Ok(Matrix4::from_fn(|k, l| scale * g(k).dot(&(s3 * g(l)))))
            }
        })
        .collect::<Result<_>>()?;
    let bscale = c / (2.0 * s);
    for e in &entries {
        for (t, faces) in &e.tets {
            let lp = mesh.tets[*t].iter().position(|&v| v == mesh.dofs[e.p]).unwrap();
            let lq = mesh.tets[*t].iter().position(|&v| v == mesh.dofs[e.q]).unwrap();
            for &(id, sigma) in faces {
                let j = &jobs[id];
                stats.tp_kinds[tp_kind_index(j.kind)] += 1;
                let b = &blocks[rep_of[id]];
                let (k, l) = (j.slot[lp], j.slot[lq]);
                acc.add(e.p, e.q, bscale * sigma * b[(k, l)]);
                if !sym && e.p != e.q {
                    acc.add(e.q, e.p, bscale * sigma * b[(l, k)]);
                }
            }
        }
    }

    let mut a = acc.a;
    if sym {
        for i in 0..n {
            for j in 0..i {
                a[(i, j)] = a[(j, i)];
            }
        }
    }
    let g = assemble_load(mesh, Load::Constant(1.0))?;
    log::info!(
        "assembled N={n} M={m}: {} touching blocks, {} near blocks, {} panel blocks, {} shared",
        stats.unique_blocks[0],
        stats.unique_blocks[1],
        stats.unique_blocks[2],
        stats.shared_blocks
    );
    Ok(StiffnessSystem {
        a,
        g,
        dof_map: mesh.dofs.clone(),
        stats,
        s,
        h,
        plan,
        mode,
    })
}

fn tp_kind_index(kind: CaseKind) -> usize {
    match kind {
        CaseKind::TpFace => 0,
        CaseKind::TpEdge => 1,
        CaseKind::TpVertex => 2,
        _ => 3,
    }
}

/// Largest `|a_ij − a_ji| / max|a|`.
pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let scale = a.amax();
    if scale == 0.0 {
        return 0.0;
    }
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Graph distances from `start` over mesh edges, up to `limit` (NONE beyond).
pub fn vertex_distances(mesh: &Mesh, start: usize, limit: usize) -> Vec<usize> {
    let mut dist = vec![NONE; mesh.vertices.len()];
    let mut queue = VecDeque::from([start]);
    dist[start] = 0;
    while let Some(v) = queue.pop_front() {
        if dist[v] >= limit {
            continue;
        }
        for &t in &mesh.vertex_tets[v] {
            for &w in &mesh.tets[t] {
                if dist[w] == NONE {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
            }
        }
    }
    dist
}

/// Writes `a` as 8 magic bytes, `N` as u64, then row-major f64, all little-endian.
pub fn write_matrix(path: impl AsRef<Path>, a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::InvalidParameter("matrix dump expects a square matrix".into()));
    }
    let n = a.nrows();
    let mut buf = Vec::with_capacity(16 + 8 * n * n);
    buf.extend_from_slice(&MATRIX_MAGIC);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for i in 0..n {
        for j in 0..n {
            buf.extend_from_slice(&a[(i, j)].to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 16 || buf[..8] != MATRIX_MAGIC {
        return Err(Error::ParseError {
            line: 0,
            msg: "missing matrix header".into(),
        });
    }
    let n = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    if buf.len() != 16 + 8 * n * n {
        return Err(Error::ParseError {
            line: 0,
            msg: format!("expected {} bytes for N={n}, found {}", 16 + 8 * n * n, buf.len()),
        });
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let o = 16 + 8 * (i * n + j);
        f64::from_le_bytes(buf[o..o + 8].try_into().unwrap())
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixSidecar {
    pub n: usize,
    pub s: f64,
    pub h: f64,
    pub plan: OrderPlan,
    pub mode: String,
    pub tt_kinds: BTreeMap<String, usize>,
    pub tp_kinds: BTreeMap<String, usize>,
    pub stats: AssemblyStats,
}

impl StiffnessSystem {
    pub fn sidecar(&self) -> MatrixSidecar {
        let tt = ["identical", "face", "edge", "vertex", "distant"];
        let tp = ["face", "edge", "vertex", "distant"];
        MatrixSidecar {
            n: self.a.nrows(),
            s: self.s,
            h: self.h,
            plan: self.plan,
            mode: self.mode.name().to_string(),
            tt_kinds: tt.iter().map(|k| k.to_string()).zip(self.stats.tt_kinds).collect(),
            tp_kinds: tp.iter().map(|k| k.to_string()).zip(self.stats.tp_kinds).collect(),
            stats: self.stats.clone(),
        }
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn dump(&self, stem: impl AsRef<Path>) -> Result<()> {
        let with_ext = |ext: &str| {
            let mut p = stem.as_ref().as_os_str().to_owned();
            p.push(ext);
            PathBuf::from(p)
        };
        write_matrix(with_ext(".bin"), &self.a)?;
        let json = serde_json::to_string_pretty(&self.sidecar()).map_err(|e| Error::Io(e.into()))?;
        std::fs::write(with_ext(".json"), json)?;
        Ok(())
    }
}
