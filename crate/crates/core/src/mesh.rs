//! Tetrahedral meshes: Gmsh input, the unit-ball generator, pair
//! classification with canonical alignment and support-union boundaries.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{panel_map, shape_metrics, tet_map, Panel, Point3, Tetrahedron};

/// Largest ball level accepted by [`ball_mesh`].
pub const MAX_BALL_LEVEL: usize = 5;

/// Local vertex triples of the faces opposite vertices 0..4.
pub const TET_FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]];

const NONE: usize = usize::MAX;

#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<Point3>,
    pub tets: Vec<[usize; 4]>,
    pub boundary: Vec<bool>,
    /// Tets incident to each vertex, ascending.
    pub vertex_tets: Vec<Vec<usize>>,
    /// Sorted vertex triples of all faces.
    pub faces: Vec<[usize; 3]>,
    /// Incident tets per face, ascending; second slot `usize::MAX` on ∂Ω.
    pub face_tets: Vec<[usize; 2]>,
    /// Face index opposite each local vertex.
    pub tet_faces: Vec<[usize; 4]>,
    /// Row index of each interior vertex.
    pub dof_of: Vec<Option<usize>>,
    /// Vertex of each row.
    pub dofs: Vec<usize>,
}

impl Mesh {
    pub fn new(vertices: Vec<Point3>, tets: Vec<[usize; 4]>) -> Result<Self> {
        let nv = vertices.len();
        for (k, t) in tets.iter().enumerate() {
            if t.iter().any(|&v| v >= nv) {
                return Err(Error::MeshError(format!("tet {k} references a missing vertex")));
            }
            let mut s = *t;
            s.sort_unstable();
            if s.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::MeshError(format!("tet {k} repeats a vertex")));
            }
        }
        let mut vertex_tets = vec![Vec::new(); nv];
        for (k, t) in tets.iter().enumerate() {
            for &v in t {
                vertex_tets[v].push(k);
            }
        }
        let mut face_index: HashMap<[usize; 3], usize> = HashMap::new();
        let mut faces = Vec::new();
        let mut face_tets: Vec<[usize; 2]> = Vec::new();
        let mut tet_faces = Vec::with_capacity(tets.len());
        for (k, t) in tets.iter().enumerate() {
            let mut tf = [0; 4];
            for (l, f) in TET_FACES.iter().enumerate() {
                let mut key = f.map(|i| t[i]);
                key.sort_unstable();
                let idx = *face_index.entry(key).or_insert_with(|| {
                    faces.push(key);
                    face_tets.push([NONE, NONE]);
                    faces.len() - 1
                });
                let slot = &mut face_tets[idx];
                if slot[0] == NONE {
                    slot[0] = k;
                } else if slot[1] == NONE {
                    slot[1] = k;
                } else {
                    return Err(Error::MeshError(format!("face {key:?} shared by more than two tets")));
                }
                tf[l] = idx;
            }
            tet_faces.push(tf);
        }
        let mut boundary = vec![false; nv];
        for (f, ft) in faces.iter().zip(&face_tets) {
            if ft[1] == NONE {
                for &v in f {
                    boundary[v] = true;
                }
            }
        }
        let mut dof_of = vec![None; nv];
        let mut dofs = Vec::new();
        for v in 0..nv {
            if !boundary[v] && !vertex_tets[v].is_empty() {
                dof_of[v] = Some(dofs.len());
                dofs.push(v);
            }
        }
        let mesh = Mesh {
            vertices,
            tets,
            boundary,
            vertex_tets,
            faces,
            face_tets,
            tet_faces,
            dof_of,
            dofs,
        };
        for k in 0..mesh.tets.len() {
            tet_map(&mesh.tet(k))?;
        }
        Ok(mesh)
    }

    pub fn tet(&self, k: usize) -> Tetrahedron {
        let t = self.tets[k];
        Tetrahedron::new(
            self.vertices[t[0]],
            self.vertices[t[1]],
            self.vertices[t[2]],
            self.vertices[t[3]],
        )
    }

    pub fn n_dofs(&self) -> usize {
        self.dofs.len()
    }

    /// Largest tet diameter.
    pub fn h(&self) -> f64 {
        (0..self.tets.len()).map(|k| self.tet(k).diameter()).fold(0.0, f64::max)
    }

    pub fn volume(&self) -> f64 {
        (0..self.tets.len()).map(|k| self.tet(k).volume()).sum()
    }

    /// Smallest shape angle over all tets.
    pub fn min_theta(&self) -> Result<f64> {
        let mut th = f64::INFINITY;
        for k in 0..self.tets.len() {
            th = th.min(shape_metrics(&self.tet(k))?.theta);
        }
        Ok(th)
    }

    /// Panel of face `f` with its normal pointing out of the smallest-index
    /// incident tet.
    pub fn canonical_panel(&self, f: usize) -> Panel {
        let owner = self.face_tets[f][0];
        self.face_panel(f, owner)
    }

    /// Panel of face `f` with its normal pointing out of incident tet `owner`.
    pub fn face_panel(&self, f: usize, owner: usize) -> Panel {
        let [a, b, c] = self.faces[f].map(|v| self.vertices[v]);
        let t = self.tets[owner];
        let opp = *t.iter().find(|v| !self.faces[f].contains(v)).unwrap();
        Panel::facing_away(a, b, c, self.vertices[opp], Some(owner))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(MeshDump {
            vertices: self.vertices.iter().map(|p| [p.x, p.y, p.z]).collect(),
            tets: self.tets.clone(),
            boundary: self.boundary.clone(),
        })
        .expect("mesh serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let d: MeshDump = serde_json::from_value(v.clone()).map_err(|e| Error::ParseError {
            line: e.line(),
            msg: e.to_string(),
        })?;
        Mesh::new(d.vertices.into_iter().map(Point3::from).collect(), d.tets)
    }
}

#[derive(Serialize, Deserialize)]
struct MeshDump {
    vertices: Vec<[f64; 3]>,
    tets: Vec<[usize; 4]>,
    boundary: Vec<bool>,
}

/// Result of reading a Gmsh file.
#[derive(Debug, Clone)]
pub struct MshReport {
    pub mesh: Mesh,
    /// Elements of types other than 2 (triangle) and 4 (tetrahedron).
    pub unknown_elements: usize,
}

pub fn load_msh(path: impl AsRef<Path>) -> Result<MshReport> {
    let text = std::fs::read_to_string(path)?;
    parse_msh(&text)
}

/// Parses the ASCII Gmsh 2.2 subset.
pub fn parse_msh(text: &str) -> Result<MshReport> {
    let lines: Vec<&str> = text.lines().collect();
    let perr = |line: usize, msg: &str| Error::ParseError {
        line: line + 1,
        msg: msg.to_string(),
    };
    let mut i = 0;
    let mut node_ids: HashMap<u64, usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut tets_raw: Vec<([u64; 4], usize)> = Vec::new();
    let mut unknown = 0;
    let mut seen_format = false;
    while i < lines.len() {
        let l = lines[i].trim();
        match l {
            "" => i += 1,
            "$MeshFormat" => {
                let v = lines.get(i + 1).ok_or_else(|| perr(i + 1, "missing format line"))?;
                let mut it = v.split_whitespace();
                let ver = it.next().ok_or_else(|| perr(i + 1, "missing version"))?;
                if !ver.starts_with("2.") {
                    return Err(perr(i + 1, &format!("unsupported version {ver}")));
                }
                if it.next() != Some("0") {
                    return Err(perr(i + 1, "only ASCII files are supported"));
                }
                if lines.get(i + 2).map(|s| s.trim()) != Some("$EndMeshFormat") {
                    return Err(perr(i + 2, "expected $EndMeshFormat"));
                }
                seen_format = true;
                i += 3;
            }
            "$Nodes" => {
                let n: usize = lines
                    .get(i + 1)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| perr(i + 1, "bad node count"))?;
                for k in 0..n {
                    let ln = i + 2 + k;
                    let s = lines.get(ln).ok_or_else(|| perr(ln, "unexpected end of nodes"))?;
                    let f: Vec<&str> = s.split_whitespace().collect();
                    if f.len() != 4 {
                        return Err(perr(ln, "node line needs id x y z"));
                    }
                    let id: u64 = f[0].parse().map_err(|_| perr(ln, "bad node id"))?;
                    let mut p = [0.0; 3];
                    for d in 0..3 {
                        p[d] = f[d + 1].parse().map_err(|_| perr(ln, "bad coordinate"))?;
                    }
                    if node_ids.insert(id, vertices.len()).is_some() {
                        return Err(perr(ln, "duplicate node id"));
                    }
                    vertices.push(Point3::from(p));
                }
                let end = i + 2 + n;
                if lines.get(end).map(|s| s.trim()) != Some("$EndNodes") {
                    return Err(perr(end, "expected $EndNodes"));
                }
                i = end + 1;
            }
            "$Elements" => {
                let n: usize = lines
                    .get(i + 1)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| perr(i + 1, "bad element count"))?;
                for k in 0..n {
                    let ln = i + 2 + k;
                    let s = lines.get(ln).ok_or_else(|| perr(ln, "unexpected end of elements"))?;
                    let f: Vec<u64> = s
                        .split_whitespace()
                        .map(|x| x.parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| perr(ln, "bad integer in element"))?;
                    if f.len() < 3 {
                        return Err(perr(ln, "element line too short"));
                    }
                    let ty = f[1];
                    let ntags = f[2] as usize;
                    let nodes = f.get(3 + ntags..).ok_or_else(|| perr(ln, "missing tags"))?;
                    match ty {
                        4 => {
                            if nodes.len() != 4 {
                                return Err(perr(ln, "tetrahedron needs 4 nodes"));
                            }
                            tets_raw.push(([nodes[0], nodes[1], nodes[2], nodes[3]], ln));
                        }
                        2 => {
                            if nodes.len() != 3 {
                                return Err(perr(ln, "triangle needs 3 nodes"));
                            }
                        }
                        _ => unknown += 1,
                    }
                }
                let end = i + 2 + n;
                if lines.get(end).map(|s| s.trim()) != Some("$EndElements") {
                    return Err(perr(end, "expected $EndElements"));
                }
                i = end + 1;
            }
            s if s.starts_with('$') => {
                let end_tag = format!("$End{}", &s[1..]);
                let mut j = i + 1;
                while j < lines.len() && lines[j].trim() != end_tag {
                    j += 1;
                }
                if j == lines.len() {
                    return Err(perr(i, &format!("unterminated section {s}")));
                }
                i = j + 1;
            }
            _ => return Err(perr(i, "unexpected content outside a section")),
        }
    }
    if !seen_format {
        return Err(perr(0, "missing $MeshFormat"));
    }
    let mut tets = Vec::with_capacity(tets_raw.len());
    for (ids, ln) in tets_raw {
        let mut t = [0; 4];
        for k in 0..4 {
            t[k] = *node_ids
                .get(&ids[k])
                .ok_or_else(|| perr(ln, "element references unknown node"))?;
        }
        tets.push(t);
    }
    if unknown > 0 {
        log::warn!("ignored {unknown} elements of unsupported type");
    }
    // Drop nodes not used by any tetrahedron.
    let mut used = vec![false; vertices.len()];
    for t in &tets {
        for &v in t {
            used[v] = true;
        }
    }
    let mut remap = vec![NONE; vertices.len()];
    let mut kept = Vec::new();
    for (v, p) in vertices.iter().enumerate() {
        if used[v] {
            remap[v] = kept.len();
            kept.push(*p);
        }
    }
    let tets = tets.into_iter().map(|t| t.map(|v| remap[v])).collect();
    Ok(MshReport {
        mesh: Mesh::new(kept, tets)?,
        unknown_elements: unknown,
    })
}

/// Writes the mesh as ASCII Gmsh 2.2.
pub fn write_msh(mesh: &Mesh) -> String {
    use std::fmt::Write;
    let mut s = String::from("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n");
    let _ = writeln!(s, "{}", mesh.vertices.len());
    for (k, p) in mesh.vertices.iter().enumerate() {
        let _ = writeln!(s, "{} {:e} {:e} {:e}", k + 1, p.x, p.y, p.z);
    }
    let _ = writeln!(s, "$EndNodes\n$Elements\n{}", mesh.tets.len());
    for (k, t) in mesh.tets.iter().enumerate() {
        let _ = writeln!(
            s,
            "{} 4 2 0 0 {} {} {} {}",
            k + 1,
            t[0] + 1,
            t[1] + 1,
            t[2] + 1,
            t[3] + 1
        );
    }
    s.push_str("$EndElements\n");
    s
}

/// Unit ball: 8 tets around the origin, refined `level` times.
pub fn ball_mesh(level: usize) -> Result<Mesh> {
    if level > MAX_BALL_LEVEL {
        return Err(Error::ResourceLimit(format!(
            "ball level {level} exceeds {MAX_BALL_LEVEL}"
        )));
    }
    let mut vertices = vec![Point3::zeros()];
    for d in 0..3 {
        for sgn in [1.0, -1.0] {
            let mut p = Point3::zeros();
            p[d] = sgn;
            vertices.push(p);
        }
    }
    // Vertices 1..7 are +x, -x, +y, -y, +z, -z.
    let mut tets = Vec::new();
    for &x in &[1, 2] {
        for &y in &[3, 4] {
            for &z in &[5, 6] {
                tets.push([0, x, y, z]);
            }
        }
    }
    let mut mesh = Mesh::new(vertices, tets)?;
    for _ in 0..level {
        mesh = red_refine(&mesh, Some(1.0))?;
    }
    Ok(mesh)
}

/// Uniform red refinement. With `sphere = Some(r)`, midpoints of boundary
/// edges are projected radially onto the sphere of radius `r`.
pub fn red_refine(mesh: &Mesh, sphere: Option<f64>) -> Result<Mesh> {
    let mut vertices = mesh.vertices.clone();
    let mut boundary_edges: std::collections::HashSet<(usize, usize)> = Default::default();
    for (f, ft) in mesh.faces.iter().zip(&mesh.face_tets) {
        if ft[1] == NONE {
            boundary_edges.insert((f[0], f[1]));
            boundary_edges.insert((f[0], f[2]));
            boundary_edges.insert((f[1], f[2]));
        }
    }
    let mut mids: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut mid = |a: usize, b: usize, vertices: &mut Vec<Point3>| -> usize {
        let key = (a.min(b), a.max(b));
        *mids.entry(key).or_insert_with(|| {
            let mut p = 0.5 * (vertices[a] + vertices[b]);
            if let Some(r) = sphere {
                if boundary_edges.contains(&key) {
                    p *= r / p.norm();
                }
            }
            vertices.push(p);
            vertices.len() - 1
        })
    };
    let mut tets = Vec::with_capacity(8 * mesh.tets.len());
    for t in &mesh.tets {
        let [v0, v1, v2, v3] = *t;
        let m01 = mid(v0, v1, &mut vertices);
        let m02 = mid(v0, v2, &mut vertices);
        let m03 = mid(v0, v3, &mut vertices);
        let m12 = mid(v1, v2, &mut vertices);
        let m13 = mid(v1, v3, &mut vertices);
        let m23 = mid(v2, v3, &mut vertices);
        tets.extend(red_children(
            [v0, v1, v2, v3],
            [m01, m02, m03, m12, m13, m23],
            &vertices,
        ));
    }
    Mesh::new(vertices, tets)
}

/// The 8 children of tet `v` with edge midpoints `m = [m01, m02, m03, m12, m13, m23]`.
pub fn red_children(v: [usize; 4], m: [usize; 6], vertices: &[Point3]) -> [[usize; 4]; 8] {
    let [v0, v1, v2, v3] = v;
    let [m01, m02, m03, m12, m13, m23] = m;
    let len = |a: usize, b: usize| (vertices[a] - vertices[b]).norm();
    let diagonals = [
        (m01, m23, [m02, m03, m13, m12]),
        (m02, m13, [m01, m03, m23, m12]),
        (m03, m12, [m01, m02, m23, m13]),
    ];
    let mut best = 0;
    for k in 1..3 {
        let (p, q, _) = diagonals[k];
        let (bp, bq, _) = diagonals[best];
        if len(p, q) < len(bp, bq) {
            best = k;
        }
    }
    let (p, q, c) = diagonals[best];
    [
        [v0, m01, m02, m03],
        [m01, v1, m12, m13],
        [m02, m12, v2, m23],
        [m03, m13, m23, v3],
        [p, q, c[0], c[1]],
        [p, q, c[1], c[2]],
        [p, q, c[2], c[3]],
        [p, q, c[3], c[0]],
    ]
}

/// Shared-simplex type of an element pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairKind {
    Identical,
    Face,
    Edge,
    Vertex,
    Distant,
}

impl PairKind {
    pub fn name(&self) -> &'static str {
        match self {
            PairKind::Identical => "identical",
            PairKind::Face => "face",
            PairKind::Edge => "edge",
            PairKind::Vertex => "vertex",
            PairKind::Distant => "distant",
        }
    }
}

/// Classification of a tet pair; `perm[k]` is the local index placed in slot `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SingularPairCase {
    pub kind: PairKind,
    pub perm1: [usize; 4],
    pub perm2: [usize; 4],
    pub shared: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TetPanelCase {
    pub kind: PairKind,
    pub perm_t: [usize; 4],
    pub perm_tau: [usize; 3],
    pub shared: usize,
}

/// Orders local indices: shared vertices first, each group by ascending global index.
fn aligned_perm<const N: usize>(ids: &[usize; N], is_shared: impl Fn(usize) -> bool) -> [usize; N] {
    let mut local: [usize; N] = std::array::from_fn(|k| k);
    local.sort_by_key(|&k| (!is_shared(ids[k]), ids[k]));
    local
}

/// Classifies two tets given by global vertex indices.
pub fn classify_pair(t1: &[usize; 4], t2: &[usize; 4]) -> Result<SingularPairCase> {
    let shared = t1.iter().filter(|v| t2.contains(v)).count();
    let kind = match shared {
        4 => PairKind::Identical,
        3 => PairKind::Face,
        2 => PairKind::Edge,
        1 => PairKind::Vertex,
        _ => PairKind::Distant,
    };
    let perm1 = aligned_perm(t1, |v| t2.contains(&v));
    let perm2 = aligned_perm(t2, |v| t1.contains(&v));
    for k in 0..shared {
        if t1[perm1[k]] != t2[perm2[k]] {
            return Err(Error::MeshError("shared vertices failed to align".into()));
        }
    }
    Ok(SingularPairCase {
        kind,
        perm1,
        perm2,
        shared,
    })
}

/// Classifies tet `t` against panel `tau`, both as global vertex indices.
pub fn classify_tet_panel(t: &[usize; 4], tau: &[usize; 3]) -> Result<TetPanelCase> {
    let shared = t.iter().filter(|v| tau.contains(v)).count();
    let kind = match shared {
        3 => PairKind::Face,
        2 => PairKind::Edge,
        1 => PairKind::Vertex,
        0 => PairKind::Distant,
        _ => unreachable!(),
    };
    let perm_t = aligned_perm(t, |v| tau.contains(&v));
    let perm_tau = aligned_perm(tau, |v| t.contains(&v));
    for k in 0..shared {
        if t[perm_t[k]] != tau[perm_tau[k]] {
            return Err(Error::MeshError("shared vertices failed to align".into()));
        }
    }
    Ok(TetPanelCase {
        kind,
        perm_t,
        perm_tau,
        shared,
    })
}

/// Checks `χ_t(κ₁e₁+κ₂e₂) = χ_τ(κ₁ê₁+κ₂ê₂)` at `κ = (1,0), (1,1)`.
pub fn face_agreement(t: &Tetrahedron, p: &Panel) -> Result<f64> {
    let mt = tet_map(t)?;
    let mp = panel_map(p)?;
    let mut err: f64 = 0.0;
    for k in [[1.0, 0.0], [1.0, 1.0]] {
        let x = mt.apply(&nalgebra::Vector3::new(k[0], k[1], 0.0));
        let y = mp.apply(&nalgebra::Vector2::new(k[0], k[1]));
        err = err.max((x - y).norm());
    }
    Ok(err)
}

/// `Ω_ij = supp φ_i ∪ supp φ_j` and its oriented boundary.
#[derive(Debug, Clone)]
pub struct SupportRegion {
    pub tets: Vec<usize>,
    /// Face indices of `∂Ω_ij`.
    pub faces: Vec<usize>,
    /// Outward panels matching `faces`.
    pub boundary_panels: Vec<Panel>,
}

pub fn support_region(i: usize, j: usize, mesh: &Mesh) -> SupportRegion {
    let mut tets: Vec<usize> = mesh.vertex_tets[i]
        .iter()
        .chain(&mesh.vertex_tets[j])
        .copied()
        .collect();
    tets.sort_unstable();
    tets.dedup();
    let inside = |t: usize| t != NONE && tets.binary_search(&t).is_ok();
    let mut faces = Vec::new();
    let mut panels = Vec::new();
    for &t in &tets {
        for &f in &mesh.tet_faces[t] {
            let [a, b] = mesh.face_tets[f];
            let other = if a == t { b } else { a };
            if !inside(other) {
                faces.push(f);
                panels.push(mesh.face_panel(f, t));
            }
        }
    }
    SupportRegion {
        tets,
        faces,
        boundary_panels: panels,
    }
}
