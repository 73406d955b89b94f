//! Graphs, d-order neighborhoods, normalized adjacencies, and local
//! Dirichlet Laplacians.
//!
//! Neighborhoods always contain their center node, and members are kept
//! sorted ascending by node id; every per-patch vector or matrix in the
//! crate uses that local index order.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::error::{GraphError, NumericError};
use crate::linalg::{sym_eigen, Mat, SymEigen};

/// How a graph was built. Shared-basis filter templates need the ring/chain
/// node ordering, so the builders record it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    Ring,
    Chain,
    Grid { h: usize, w: usize },
    General,
}

/// Undirected simple graph. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Graph {
    n: usize,
    kind: GraphKind,
    edges: Vec<(usize, usize)>,
    adj: Vec<Vec<usize>>,
    degrees: Vec<usize>,
}

impl Graph {
    /// Build from an explicit edge list. Endpoints must be in range, no
    /// self-loops, no duplicate edges.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        Self::from_edges_kind(n, edges, GraphKind::General)
    }

    fn from_edges_kind(
        n: usize,
        edges: &[(usize, usize)],
        kind: GraphKind,
    ) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::TooSmall {
                kind: "graph",
                n,
                min: 1,
            });
        }
        let mut canon: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a == b {
                return Err(GraphError::SelfLoop { u: a });
            }
            if a >= n || b >= n {
                return Err(GraphError::EdgeOutOfRange { a, b, n });
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        if canon.windows(2).any(|w| w[0] == w[1]) {
            let dup = canon.windows(2).find(|w| w[0] == w[1]).unwrap()[0];
            return Err(GraphError::Parse {
                line: 0,
                msg: format!("duplicate edge ({}, {})", dup.0, dup.1),
            });
        }
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in &canon {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        let degrees = adj.iter().map(Vec::len).collect();
        Ok(Self {
            n,
            kind,
            edges: canon,
            adj,
            degrees,
        })
    }

    /// Cycle on `n >= 3` nodes: i connected to (i +/- 1 mod n).
    pub fn ring(n: usize) -> Result<Self, GraphError> {
        if n < 3 {
            return Err(GraphError::TooSmall {
                kind: "ring",
                n,
                min: 3,
            });
        }
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Self::from_edges_kind(n, &edges, GraphKind::Ring)
    }

    /// Path 0 - 1 - ... - (n-1) on `n >= 2` nodes.
    pub fn chain(n: usize) -> Result<Self, GraphError> {
        if n < 2 {
            return Err(GraphError::TooSmall {
                kind: "chain",
                n,
                min: 2,
            });
        }
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        Self::from_edges_kind(n, &edges, GraphKind::Chain)
    }

    /// h x w grid with 4-neighbor connectivity; node (i, j) has index i*w + j.
    pub fn grid(h: usize, w: usize) -> Result<Self, GraphError> {
        if h == 0 || w == 0 {
            return Err(GraphError::TooSmall {
                kind: "grid",
                n: h * w,
                min: 1,
            });
        }
        let mut edges = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let u = i * w + j;
                if j + 1 < w {
                    edges.push((u, u + 1));
                }
                if i + 1 < h {
                    edges.push((u, u + w));
                }
            }
        }
        Self::from_edges_kind(h * w, &edges, GraphKind::Grid { h, w })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.adj[u]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.degrees[u]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adj[a].binary_search(&b).is_ok()
    }

    /// BFS ball of radius `d` around `u`, center included, sorted ascending.
    pub fn neighborhood(&self, u: usize, d: usize) -> Result<Neighborhood, GraphError> {
        if u >= self.n {
            return Err(GraphError::NodeOutOfRange { u, n: self.n });
        }
        let mut dist = vec![usize::MAX; self.n];
        let mut queue = VecDeque::new();
        dist[u] = 0;
        queue.push_back(u);
        let mut members = vec![u];
        while let Some(v) = queue.pop_front() {
            if dist[v] == d {
                continue;
            }
            for &w in &self.adj[v] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    members.push(w);
                    queue.push_back(w);
                }
            }
        }
        members.sort_unstable();
        Ok(Neighborhood {
            center: u,
            order: d,
            members,
        })
    }

    pub fn neighborhoods(&self, d: usize) -> Vec<Neighborhood> {
        (0..self.n)
            .map(|u| self.neighborhood(u, d).expect("u < n"))
            .collect()
    }

    /// Normalized adjacency in the requested mode.
    pub fn normalized_adjacency(&self, mode: AdjacencyMode) -> Result<NormalizedAdjacency, GraphError> {
        if mode != AdjacencyMode::Raw {
            if let Some(u) = (0..self.n).find(|&u| self.degrees[u] == 0) {
                return Err(GraphError::IsolatedNode { u });
            }
        }
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n];
        match mode {
            AdjacencyMode::Raw => {
                for u in 0..self.n {
                    for &v in &self.adj[u] {
                        rows[u].push((v, 1.0));
                    }
                }
            }
            AdjacencyMode::Sym => {
                let inv_sqrt: Vec<f64> =
                    self.degrees.iter().map(|&d| 1.0 / (d as f64).sqrt()).collect();
                for u in 0..self.n {
                    for &v in &self.adj[u] {
                        rows[u].push((v, inv_sqrt[u] * inv_sqrt[v]));
                    }
                }
            }
            AdjacencyMode::SymSelfLoop => {
                let inv_sqrt: Vec<f64> = self
                    .degrees
                    .iter()
                    .map(|&d| 1.0 / ((d + 1) as f64).sqrt())
                    .collect();
                for u in 0..self.n {
                    let mut row = vec![(u, inv_sqrt[u] * inv_sqrt[u])];
                    for &v in &self.adj[u] {
                        row.push((v, inv_sqrt[u] * inv_sqrt[v]));
                    }
                    row.sort_unstable_by_key(|&(v, _)| v);
                    rows[u] = row;
                }
            }
        }
        Ok(NormalizedAdjacency {
            mode,
            matrix: SparseMatrix { n: self.n, rows },
        })
    }

    /// Dirichlet restriction of the full-graph `D - A` to a neighborhood:
    /// full-graph degrees stay on the diagonal.
    pub fn local_dirichlet_laplacian(
        &self,
        nbhd: &Neighborhood,
    ) -> Result<LocalLaplacian, NumericError> {
        let p = nbhd.len();
        let mut m = Mat::zeros(p, p);
        for (i, &v) in nbhd.members.iter().enumerate() {
            m[(i, i)] = self.degrees[v] as f64;
            for &w in &self.adj[v] {
                if let Some(j) = nbhd.local_index(w) {
                    m[(i, j)] = -1.0;
                }
            }
        }
        let eigen = sym_eigen(
            &m,
            &format!("local Laplacian at node {} order {}", nbhd.center, nbhd.order),
        )?;
        Ok(LocalLaplacian {
            neighborhood: nbhd.clone(),
            matrix: m,
            eigen,
        })
    }

    /// Whether the induced subgraph on `members` is connected.
    pub fn is_connected_subgraph(&self, members: &[usize]) -> bool {
        if members.is_empty() {
            return false;
        }
        let in_set = |v: usize| members.binary_search(&v).is_ok();
        let mut seen = vec![false; members.len()];
        let mut queue = VecDeque::new();
        seen[0] = true;
        queue.push_back(members[0]);
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &w in &self.adj[v] {
                if in_set(w) {
                    let j = members.binary_search(&w).unwrap();
                    if !seen[j] {
                        seen[j] = true;
                        count += 1;
                        queue.push_back(w);
                    }
                }
            }
        }
        count == members.len()
    }

    /// Whether some member has an edge leaving the member set.
    pub fn has_boundary_edge(&self, members: &[usize]) -> bool {
        members
            .iter()
            .any(|&v| self.adj[v].iter().any(|&w| members.binary_search(&w).is_err()))
    }

    /// Line-oriented text form: `nodes <n>` then `edge <i> <j>` per edge.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "nodes {}", self.n).unwrap();
        for &(a, b) in &self.edges {
            writeln!(out, "edge {a} {b}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, GraphError> {
        let mut n: Option<usize> = None;
        let mut edges = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("nodes") => {
                    let v = parts
                        .next()
                        .ok_or_else(|| GraphError::Parse {
                            line: lineno,
                            msg: "missing node count".into(),
                        })?
                        .parse::<usize>()
                        .map_err(|e| GraphError::Parse {
                            line: lineno,
                            msg: e.to_string(),
                        })?;
                    n = Some(v);
                }
                Some("edge") => {
                    let mut get = || -> Result<usize, GraphError> {
                        parts
                            .next()
                            .ok_or_else(|| GraphError::Parse {
                                line: lineno,
                                msg: "edge needs two endpoints".into(),
                            })?
                            .parse::<usize>()
                            .map_err(|e| GraphError::Parse {
                                line: lineno,
                                msg: e.to_string(),
                            })
                    };
                    let a = get()?;
                    let b = get()?;
                    edges.push((a, b));
                }
                Some(other) => {
                    return Err(GraphError::Parse {
                        line: lineno,
                        msg: format!("unknown directive `{other}`"),
                    })
                }
                None => unreachable!(),
            }
        }
        let n = n.ok_or(GraphError::Parse {
            line: 0,
            msg: "missing `nodes` header".into(),
        })?;
        Self::from_edges(n, &edges)
    }
}

/// d-order neighborhood of a node: the BFS ball of radius d, center included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhood {
    pub center: usize,
    pub order: usize,
    /// Sorted ascending; this is the canonical local index order.
    pub members: Vec<usize>,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn local_index(&self, node: usize) -> Option<usize> {
        self.members.binary_search(&node).ok()
    }

    pub fn contains(&self, node: usize) -> bool {
        self.local_index(node).is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjacencyMode {
    Raw,
    Sym,
    SymSelfLoop,
}

/// Sparse symmetric n x n operator stored by rows.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    pub n: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            rows: (0..n).map(|u| vec![(u, 1.0)]).collect(),
        }
    }

    pub fn to_mat(&self) -> Mat {
        let mut m = Mat::zeros(self.n, self.n);
        for (u, row) in self.rows.iter().enumerate() {
            for &(v, w) in row {
                m[(u, v)] = w;
            }
        }
        m
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(v, w)| w * x[v]).sum())
            .collect()
    }
}

/// Normalized adjacency of a graph in one of the supported modes.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    pub mode: AdjacencyMode,
    pub matrix: SparseMatrix,
}

impl NormalizedAdjacency {
    pub fn n(&self) -> usize {
        self.matrix.n
    }

    pub fn to_mat(&self) -> Mat {
        self.matrix.to_mat()
    }

    /// `alpha1 * I + alpha2 * (I - A)` as a sparse operator (the rescaled
    /// Laplacian driving the Chebyshev recursion).
    pub fn scaled_laplacian(&self, alpha1: f64, alpha2: f64) -> SparseMatrix {
        let n = self.matrix.n;
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for u in 0..n {
            let mut diag = alpha1 + alpha2;
            let mut row = Vec::with_capacity(self.matrix.rows[u].len() + 1);
            for &(v, w) in &self.matrix.rows[u] {
                if v == u {
                    diag -= alpha2 * w;
                } else {
                    row.push((v, -alpha2 * w));
                }
            }
            if diag != 0.0 {
                row.push((u, diag));
            }
            row.sort_unstable_by_key(|&(v, _)| v);
            rows[u] = row;
        }
        SparseMatrix { n, rows }
    }
}

/// Dirichlet local graph Laplacian on a neighborhood, with its cached
/// eigendecomposition (ascending eigenvalues, orthonormal eigenvectors).
#[derive(Debug, Clone)]
pub struct LocalLaplacian {
    pub neighborhood: Neighborhood,
    pub matrix: Mat,
    pub eigen: SymEigen,
}

impl LocalLaplacian {
    pub fn size(&self) -> usize {
        self.neighborhood.len()
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigen.values[0]
    }

    pub fn lambda_max(&self) -> f64 {
        *self.eigen.values.last().unwrap()
    }

    /// Quadratic form `x^T L x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let lx = self.matrix.matvec(x);
        crate::linalg::dot(x, &lx)
    }

    /// `x^T L^{-1} x` through the eigendecomposition; requires lambda_1 > 0.
    pub fn inv_quad_form(&self, x: &[f64]) -> f64 {
        self.eigen
            .values
            .iter()
            .enumerate()
            .map(|(l, &lambda)| {
                let c = crate::linalg::dot(&self.eigen.eigenvector(l), x);
                c * c / lambda
            })
            .sum()
    }
}

/// First Dirichlet eigenvector: unit norm, sign-normalized so the
/// largest-magnitude entry is positive. Errors when lambda_1 is degenerate.
pub fn first_dirichlet_eigvec(ll: &LocalLaplacian) -> Result<Vec<f64>, NumericError> {
    const GAP_TOL: f64 = 1e-10;
    if ll.size() > 1 {
        let gap = ll.eigen.values[1] - ll.eigen.values[0];
        if gap <= GAP_TOL {
            return Err(NumericError::DegenerateEigenvalue { gap, tol: GAP_TOL });
        }
    }
    Ok(ll.eigen.eigenvector(0))
}

/// Indexing for the concatenated per-node patches of one basis order:
/// patch of node u occupies `offsets[u]..offsets[u+1]` in canonical
/// (ascending node id) member order.
#[derive(Debug, Clone)]
pub struct PatchLayout {
    pub order: usize,
    pub offsets: Vec<usize>,
    pub members: Vec<usize>,
    pub centers: Vec<usize>,
    /// Shared-basis template: `map[pos]` is the template slot for a patch
    /// position, template length `2 * order + 1` (signed offset + order).
    pub template_map: Option<Vec<usize>>,
}

impl PatchLayout {
    pub fn new(g: &Graph, order: usize) -> Self {
        let mut offsets = Vec::with_capacity(g.n() + 1);
        let mut members = Vec::new();
        let mut centers = Vec::new();
        offsets.push(0);
        for u in 0..g.n() {
            let nbhd = g.neighborhood(u, order).expect("u < n");
            members.extend_from_slice(&nbhd.members);
            centers.extend(std::iter::repeat(u).take(nbhd.len()));
            offsets.push(members.len());
        }
        Self {
            order,
            offsets,
            members,
            centers,
            template_map: None,
        }
    }

    /// Layout with signed-offset template slots, tying one filter template
    /// across all nodes. Only rings and chains carry the required node order.
    pub fn with_shared_template(g: &Graph, order: usize) -> Result<Self, GraphError> {
        let mut layout = Self::new(g, order);
        let n = g.n();
        let mut map = Vec::with_capacity(layout.members.len());
        match g.kind() {
            GraphKind::Ring => {
                if n < 2 * order + 2 {
                    return Err(GraphError::TooSmall {
                        kind: "shared-basis ring",
                        n,
                        min: 2 * order + 2,
                    });
                }
                for pos in 0..layout.members.len() {
                    let u = layout.centers[pos];
                    let v = layout.members[pos];
                    let fwd = (v + n - u) % n;
                    let offset = if fwd <= n / 2 {
                        fwd as isize
                    } else {
                        fwd as isize - n as isize
                    };
                    map.push((offset + order as isize) as usize);
                }
            }
            GraphKind::Chain => {
                for pos in 0..layout.members.len() {
                    let u = layout.centers[pos] as isize;
                    let v = layout.members[pos] as isize;
                    map.push((v - u + order as isize) as usize);
                }
            }
            _ => {
                return Err(GraphError::Parse {
                    line: 0,
                    msg: "shared basis requires a ring or chain graph".into(),
                })
            }
        }
        layout.template_map = Some(map);
        Ok(layout)
    }

    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total_len(&self) -> usize {
        self.members.len()
    }

    pub fn template_len(&self) -> usize {
        2 * self.order + 1
    }

    pub fn patch(&self, u: usize) -> &[usize] {
        &self.members[self.offsets[u]..self.offsets[u + 1]]
    }

    pub fn patch_len(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    pub fn range(&self, u: usize) -> std::ops::Range<usize> {
        self.offsets[u]..self.offsets[u + 1]
    }
}
