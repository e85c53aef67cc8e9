//! Finite truncations of fractal-like weighted graphs.
//!
//! Three generators are provided: the integer lattice `Z^d` cut to a box, the
//! one-sided Sierpinski gasket graph cut at level `k`, and the Vicsek (plus)
//! tree cut at level `k`. All edges carry unit weight, so the vertex measure
//! is the degree.
//!
//! Each graph records its truncation boundary, the graph distance of every
//! vertex to that boundary, and the *core*: vertices at distance at least
//! `diameter / 4` from the boundary. Estimates are only meaningful on the core.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::{Arc, OnceLock, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Largest graph any generator will build.
pub const MAX_VERTICES: usize = 2_000_000;

/// All-pairs distance tables are only materialized up to this size.
pub const ALL_PAIRS_LIMIT: usize = 5000;

pub type Vertex = usize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case")]
pub enum GraphSpec {
    Lattice { dim: usize, side: usize },
    Gasket { level: u32 },
    Vicsek { level: u32 },
}

impl GraphSpec {
    /// Volume growth exponent of the infinite graph this generator truncates.
    pub fn nominal_df(&self) -> f64 {
        match self {
            GraphSpec::Lattice { dim, .. } => *dim as f64,
            GraphSpec::Gasket { .. } => 3f64.ln() / 2f64.ln(),
            GraphSpec::Vicsek { .. } => 5f64.ln() / 3f64.ln(),
        }
    }

    /// Walk dimension of the nearest-neighbor walk.
    pub fn nominal_dw(&self) -> f64 {
        match self {
            GraphSpec::Lattice { .. } => 2.0,
            GraphSpec::Gasket { .. } => 5f64.ln() / 2f64.ln(),
            GraphSpec::Vicsek { .. } => 15f64.ln() / 3f64.ln(),
        }
    }

    /// Number of vertices the generator produces, or `None` on overflow.
    pub fn vertex_count(&self) -> Option<usize> {
        match *self {
            GraphSpec::Lattice { dim, side } => {
                let mut n: usize = 1;
                for _ in 0..dim {
                    n = n.checked_mul(side)?;
                }
                Some(n)
            }
            GraphSpec::Gasket { level } => {
                let p = 3usize.checked_pow(level)?;
                p.checked_add(1)?.checked_mul(3).map(|v| v / 2)
            }
            GraphSpec::Vicsek { level } => {
                let p = 5usize.checked_pow(level.checked_sub(1)?)?;
                p.checked_mul(4)?.checked_add(1)
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            GraphSpec::Lattice { dim, side } => format!("lattice(d={dim},side={side})"),
            GraphSpec::Gasket { level } => format!("gasket({level})"),
            GraphSpec::Vicsek { level } => format!("vicsek({level})"),
        }
    }
}

/// Row-major table of graph distances, `u16` is enough below [`ALL_PAIRS_LIMIT`].
pub struct DistanceTable {
    n: usize,
    data: Vec<u16>,
}

impl DistanceTable {
    #[inline]
    pub fn get(&self, x: Vertex, y: Vertex) -> u32 {
        self.data[x * self.n + y] as u32
    }

    #[inline]
    pub fn row(&self, x: Vertex) -> &[u16] {
        &self.data[x * self.n..(x + 1) * self.n]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// A connected graph with symmetric positive edge weights.
pub struct WeightedGraph {
    spec: Option<GraphSpec>,
    offsets: Vec<usize>,
    neighbors: Vec<Vertex>,
    weights: Vec<f64>,
    measure: Vec<f64>,
    positions: Vec<[f64; 2]>,
    boundary: Vec<Vertex>,
    boundary_distance: Vec<u32>,
    core: Vec<Vertex>,
    diameter: u32,
    nominal_df: f64,
    nominal_dw: f64,
    all_pairs: OnceLock<Arc<DistanceTable>>,
    center_cache: RwLock<HashMap<Vertex, Arc<Vec<u32>>>>,
}

impl fmt::Debug for WeightedGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WeightedGraph")
            .field("spec", &self.spec)
            .field("n_vertices", &self.n_vertices())
            .field("n_edges", &self.n_edges())
            .field("diameter", &self.diameter)
            .field("core", &self.core.len())
            .finish()
    }
}

/// Build one of the supported generators with unit edge weights.
pub fn build_graph(spec: &GraphSpec) -> Result<WeightedGraph> {
    match *spec {
        GraphSpec::Lattice { dim, side } => {
            if dim == 0 || side == 0 {
                return Err(invalid("lattice dimension and side must be at least 1"));
            }
            if side == 1 {
                return Err(invalid("lattice side 1 has no edges"));
            }
        }
        GraphSpec::Gasket { level } | GraphSpec::Vicsek { level } => {
            if level == 0 {
                return Err(invalid("level must be at least 1"));
            }
        }
    }
    let n = spec
        .vertex_count()
        .filter(|&n| n <= MAX_VERTICES)
        .ok_or_else(|| {
            Error::ResourceLimit(format!(
                "{} exceeds the vertex budget of {MAX_VERTICES}",
                spec.label()
            ))
        })?;
    let raw = match *spec {
        GraphSpec::Lattice { dim, side } => lattice(dim, side),
        GraphSpec::Gasket { level } => gasket(level),
        GraphSpec::Vicsek { level } => vicsek(level),
    };
    debug_assert_eq!(raw.positions.len(), n);
    let edges = raw.edges.into_iter().map(|(a, b)| (a, b, 1.0)).collect();
    WeightedGraph::from_edges(
        n,
        edges,
        raw.boundary,
        raw.positions,
        Some(spec.clone()),
        spec.nominal_df(),
        spec.nominal_dw(),
    )
}

struct RawGraph {
    positions: Vec<[f64; 2]>,
    edges: Vec<(Vertex, Vertex)>,
    boundary: Vec<Vertex>,
}

fn lattice(dim: usize, side: usize) -> RawGraph {
    let n = side.pow(dim as u32);
    let mut edges = Vec::with_capacity(n * dim);
    let mut boundary = Vec::new();
    let mut positions = Vec::with_capacity(n);
    let mut coord = vec![0usize; dim];
    for v in 0..n {
        let mut rem = v;
        for c in coord.iter_mut() {
            *c = rem % side;
            rem /= side;
        }
        if coord.iter().any(|&c| c == 0 || c == side - 1) {
            boundary.push(v);
        }
        let mut stride = 1;
        for &c in coord.iter() {
            if c + 1 < side {
                edges.push((v, v + stride));
            }
            stride *= side;
        }
        positions.push([
            coord[0] as f64,
            coord.get(1).copied().unwrap_or(0) as f64,
        ]);
    }
    RawGraph {
        positions,
        edges,
        boundary,
    }
}

/// Relabels integer coordinates in sorted order so vertex ids are deterministic.
fn relabel(segments: Vec<([i64; 2], [i64; 2])>) -> (Vec<[i64; 2]>, Vec<(Vertex, Vertex)>) {
    let coords: BTreeSet<[i64; 2]> = segments.iter().flat_map(|&(a, b)| [a, b]).collect();
    let coords: Vec<[i64; 2]> = coords.into_iter().collect();
    let index: HashMap<[i64; 2], Vertex> =
        coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut edges: Vec<(Vertex, Vertex)> = segments
        .iter()
        .map(|(a, b)| {
            let (u, v) = (index[a], index[b]);
            (u.min(v), u.max(v))
        })
        .collect();
    edges.sort_unstable();
    edges.dedup();
    (coords, edges)
}

/// One-sided Sierpinski gasket graph: level `k` is three copies of level `k-1`
/// translated by `(0,0)`, `(2^{k-1},0)` and `(0,2^{k-1})` in triangular
/// coordinates. The truncation boundary is the two far corners, where the
/// infinite graph would continue; the origin corner is a genuine vertex of
/// the infinite graph.
fn gasket(level: u32) -> RawGraph {
    let mut origins: Vec<[i64; 2]> = vec![[0, 0]];
    for k in 0..level {
        let s = 1i64 << k;
        let mut next = Vec::with_capacity(origins.len() * 3);
        for &[a, b] in &origins {
            next.push([a, b]);
            next.push([a + s, b]);
            next.push([a, b + s]);
        }
        origins = next;
    }
    let mut segments = Vec::with_capacity(origins.len() * 3);
    for &[a, b] in &origins {
        let p0 = [a, b];
        let p1 = [a + 1, b];
        let p2 = [a, b + 1];
        segments.push((p0, p1));
        segments.push((p0, p2));
        segments.push((p1, p2));
    }
    let (coords, edges) = relabel(segments);
    let side = 1i64 << level;
    let boundary = coords
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == [side, 0] || c == [0, side])
        .map(|(i, _)| i)
        .collect();
    let half_sqrt3 = 3f64.sqrt() / 2.0;
    let positions = coords
        .iter()
        .map(|&[a, b]| [a as f64 + b as f64 / 2.0, b as f64 * half_sqrt3])
        .collect();
    RawGraph {
        positions,
        edges,
        boundary,
    }
}

/// Vicsek plus-shaped tree: level `k` is five copies of level `k-1` glued at
/// their tips. The boundary is the four outer tips.
fn vicsek(level: u32) -> RawGraph {
    let mut centers: Vec<[i64; 2]> = vec![[0, 0]];
    let mut arm: i64 = 1;
    for _ in 1..level {
        let mut next = Vec::with_capacity(centers.len() * 5);
        for &[a, b] in &centers {
            next.push([a, b]);
            next.push([a + 2 * arm, b]);
            next.push([a - 2 * arm, b]);
            next.push([a, b + 2 * arm]);
            next.push([a, b - 2 * arm]);
        }
        centers = next;
        arm *= 3;
    }
    let mut segments = Vec::with_capacity(centers.len() * 4);
    for &[a, b] in &centers {
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            segments.push(([a, b], [a + dx, b + dy]));
        }
    }
    let (coords, edges) = relabel(segments);
    let tips = [[arm, 0], [-arm, 0], [0, arm], [0, -arm]];
    let boundary = coords
        .iter()
        .enumerate()
        .filter(|(_, c)| tips.contains(c))
        .map(|(i, _)| i)
        .collect();
    let positions = coords.iter().map(|&[a, b]| [a as f64, b as f64]).collect();
    RawGraph {
        positions,
        edges,
        boundary,
    }
}

fn bfs(offsets: &[usize], neighbors: &[Vertex], sources: &[Vertex], n: usize) -> Vec<u32> {
    let mut dist = vec![u32::MAX; n];
    let mut queue = VecDeque::with_capacity(n);
    for &s in sources {
        if dist[s] != 0 {
            dist[s] = 0;
            queue.push_back(s);
        }
    }
    while let Some(v) = queue.pop_front() {
        let dv = dist[v] + 1;
        for &w in &neighbors[offsets[v]..offsets[v + 1]] {
            if dist[w] == u32::MAX {
                dist[w] = dv;
                queue.push_back(w);
            }
        }
    }
    dist
}

impl WeightedGraph {
    /// Assemble a graph from an undirected edge list `(u, v, weight)`.
    ///
    /// Each undirected edge is listed once; duplicates and self loops are
    /// rejected, as are non-positive weights and disconnected graphs.
    pub fn from_edges(
        n: usize,
        edges: Vec<(Vertex, Vertex, f64)>,
        boundary: Vec<Vertex>,
        positions: Vec<[f64; 2]>,
        spec: Option<GraphSpec>,
        nominal_df: f64,
        nominal_dw: f64,
    ) -> Result<Self> {
        if n < 2 {
            return Err(invalid("a weighted graph needs at least two vertices"));
        }
        if n > MAX_VERTICES {
            return Err(Error::ResourceLimit(format!(
                "{n} vertices exceeds the budget of {MAX_VERTICES}"
            )));
        }
        let mut degree = vec![0usize; n];
        let mut seen = BTreeSet::new();
        for &(u, v, w) in &edges {
            if u >= n || v >= n {
                return Err(invalid(format!("edge ({u},{v}) references a missing vertex")));
            }
            if u == v {
                return Err(invalid(format!("self loop at vertex {u}")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(invalid(format!("edge ({u},{v}) has non-positive weight {w}")));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(invalid(format!("duplicate edge ({u},{v})")));
            }
            degree[u] += 1;
            degree[v] += 1;
        }
        let mut offsets = vec![0usize; n + 1];
        for v in 0..n {
            offsets[v + 1] = offsets[v] + degree[v];
        }
        let mut fill = offsets.clone();
        let mut neighbors = vec![0; offsets[n]];
        let mut weights = vec![0.0; offsets[n]];
        for &(u, v, w) in &edges {
            neighbors[fill[u]] = v;
            weights[fill[u]] = w;
            fill[u] += 1;
            neighbors[fill[v]] = u;
            weights[fill[v]] = w;
            fill[v] += 1;
        }
        // sort adjacency for a canonical layout
        for v in 0..n {
            let range = offsets[v]..offsets[v + 1];
            let mut pairs: Vec<(Vertex, f64)> = neighbors[range.clone()]
                .iter()
                .copied()
                .zip(weights[range.clone()].iter().copied())
                .collect();
            pairs.sort_by_key(|p| p.0);
            for (i, (nb, w)) in pairs.into_iter().enumerate() {
                neighbors[range.start + i] = nb;
                weights[range.start + i] = w;
            }
        }
        let measure: Vec<f64> = (0..n)
            .map(|v| weights[offsets[v]..offsets[v + 1]].iter().sum())
            .collect();

        let from_zero = bfs(&offsets, &neighbors, &[0], n);
        if from_zero.iter().any(|&d| d == u32::MAX) {
            return Err(invalid("graph is not connected"));
        }
        // double sweep is exact for the trees, boxes and gaskets built here;
        // arbitrary edge lists get every eccentricity
        let far = argmax(&from_zero);
        let mut diameter = *bfs(&offsets, &neighbors, &[far], n).iter().max().unwrap_or(&0);
        if spec.is_none() && n <= ALL_PAIRS_LIMIT {
            for v in 0..n {
                diameter = diameter.max(*bfs(&offsets, &neighbors, &[v], n).iter().max().unwrap_or(&0));
            }
        }

        let boundary_distance = if boundary.is_empty() {
            vec![u32::MAX; n]
        } else {
            bfs(&offsets, &neighbors, &boundary, n)
        };
        let threshold = diameter / 4;
        let core = (0..n).filter(|&v| boundary_distance[v] >= threshold).collect();
        let positions = if positions.len() == n {
            positions
        } else {
            (0..n).map(|v| [v as f64, 0.0]).collect()
        };

        Ok(WeightedGraph {
            spec,
            offsets,
            neighbors,
            weights,
            measure,
            positions,
            boundary,
            boundary_distance,
            core,
            diameter,
            nominal_df,
            nominal_dw,
            all_pairs: OnceLock::new(),
            center_cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn spec(&self) -> Option<&GraphSpec> {
        self.spec.as_ref()
    }

    pub fn n_vertices(&self) -> usize {
        self.measure.len()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn neighbors(&self, x: Vertex) -> &[Vertex] {
        &self.neighbors[self.offsets[x]..self.offsets[x + 1]]
    }

    /// Neighbors of `x` paired with the edge weights `μ_xy`.
    pub fn edges_of(&self, x: Vertex) -> impl Iterator<Item = (Vertex, f64)> + '_ {
        let r = self.offsets[x]..self.offsets[x + 1];
        self.neighbors[r.clone()]
            .iter()
            .copied()
            .zip(self.weights[r].iter().copied())
    }

    /// Undirected edges `(u, v, μ_uv)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (Vertex, Vertex, f64)> + '_ {
        (0..self.n_vertices()).flat_map(move |u| {
            self.edges_of(u)
                .filter(move |&(v, _)| v > u)
                .map(move |(v, w)| (u, v, w))
        })
    }

    pub fn degree(&self, x: Vertex) -> usize {
        self.offsets[x + 1] - self.offsets[x]
    }

    pub fn max_degree(&self) -> usize {
        (0..self.n_vertices()).map(|v| self.degree(v)).max().unwrap_or(0)
    }

    /// Vertex measure `μ(x) = Σ_{y~x} μ_xy`.
    pub fn measure(&self) -> &[f64] {
        &self.measure
    }

    pub fn total_measure(&self) -> f64 {
        self.measure.iter().sum()
    }

    /// Smallest `C_μ ≥ 1` with `C_μ^{-1} ≤ μ(x) ≤ C_μ` for all `x`.
    pub fn measure_constant(&self) -> f64 {
        let max = self.measure.iter().cloned().fold(f64::MIN, f64::max);
        let min = self.measure.iter().cloned().fold(f64::MAX, f64::min);
        max.max(1.0 / min).max(1.0)
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn nominal_df(&self) -> f64 {
        self.nominal_df
    }

    pub fn nominal_dw(&self) -> f64 {
        self.nominal_dw
    }

    pub fn diameter(&self) -> u32 {
        self.diameter
    }

    pub fn boundary(&self) -> &[Vertex] {
        &self.boundary
    }

    /// Graph distance to the truncation boundary (`u32::MAX` when there is none).
    pub fn boundary_distance(&self, x: Vertex) -> u32 {
        self.boundary_distance[x]
    }

    pub fn core_vertices(&self) -> &[Vertex] {
        &self.core
    }

    pub fn is_core(&self, x: Vertex) -> bool {
        self.boundary_distance[x] >= self.diameter / 4
    }

    /// Radius up to which balls around every core vertex avoid the boundary.
    pub fn core_radius(&self) -> u32 {
        self.core
            .iter()
            .map(|&v| self.boundary_distance[v])
            .min()
            .unwrap_or(0)
    }

    /// Core vertex farthest from the boundary (ties broken by lowest id).
    pub fn deepest_vertex(&self) -> Vertex {
        let mut best = 0;
        for v in 0..self.n_vertices() {
            if self.boundary_distance[v] > self.boundary_distance[best] {
                best = v;
            }
        }
        best
    }

    pub fn check_vertex(&self, x: Vertex) -> Result<()> {
        if x < self.n_vertices() {
            Ok(())
        } else {
            Err(invalid(format!(
                "vertex {x} out of range (graph has {} vertices)",
                self.n_vertices()
            )))
        }
    }

    /// Require `B(x, radius)` to stay clear of the truncation boundary.
    pub fn check_ball_in_core(&self, x: Vertex, radius: f64) -> Result<()> {
        self.check_vertex(x)?;
        if !self.is_core(x) {
            return Err(Error::InvalidGeometry(format!("center {x} is not a core vertex")));
        }
        if radius > self.boundary_distance(x) as f64 {
            return Err(Error::InvalidGeometry(format!(
                "ball of radius {radius} around {x} reaches the boundary at distance {}",
                self.boundary_distance(x)
            )));
        }
        Ok(())
    }

    /// Shortest-path edge count between `x` and `y`.
    pub fn distance(&self, x: Vertex, y: Vertex) -> Result<u32> {
        self.check_vertex(x)?;
        self.check_vertex(y)?;
        if let Some(t) = self.all_pairs.get() {
            return Ok(t.get(x, y));
        }
        Ok(self.distances_from(x)?[y])
    }

    /// Distances from `x` to every vertex, cached per center.
    pub fn distances_from(&self, x: Vertex) -> Result<Arc<Vec<u32>>> {
        self.check_vertex(x)?;
        if let Some(t) = self.all_pairs.get() {
            return Ok(Arc::new(t.row(x).iter().map(|&d| d as u32).collect()));
        }
        if let Some(d) = self.center_cache.read().expect("cache poisoned").get(&x) {
            return Ok(Arc::clone(d));
        }
        let d = Arc::new(bfs(&self.offsets, &self.neighbors, &[x], self.n_vertices()));
        self.center_cache
            .write()
            .expect("cache poisoned")
            .insert(x, Arc::clone(&d));
        Ok(d)
    }

    /// Full distance table; only available up to [`ALL_PAIRS_LIMIT`] vertices.
    pub fn all_pairs(&self) -> Result<&DistanceTable> {
        let n = self.n_vertices();
        if n > ALL_PAIRS_LIMIT {
            return Err(Error::ResourceLimit(format!(
                "all-pairs distances requested for {n} vertices (limit {ALL_PAIRS_LIMIT})"
            )));
        }
        Ok(self.all_pairs.get_or_init(|| {
            let rows: Vec<Vec<u16>> = (0..n)
                .into_par_iter()
                .map(|s| {
                    bfs(&self.offsets, &self.neighbors, &[s], n)
                        .into_iter()
                        .map(|d| d as u16)
                        .collect()
                })
                .collect();
            Arc::new(DistanceTable {
                n,
                data: rows.concat(),
            })
        }))
    }

    /// Vertices with `d(x, y) ≤ radius`.
    pub fn ball(&self, x: Vertex, radius: f64) -> Result<Vec<Vertex>> {
        let d = self.distances_from(x)?;
        Ok((0..self.n_vertices())
            .filter(|&y| (d[y] as f64) <= radius)
            .collect())
    }

    /// Write the graph as a text edge list: header `n m`, then `u v weight`.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{} {}", self.n_vertices(), self.n_edges())?;
        for (u, v, w) in self.edges() {
            writeln!(out, "{u} {v} {w}")?;
        }
        Ok(())
    }

    /// Read a text edge list. Imported graphs have no truncation boundary, so
    /// every vertex is core.
    pub fn read_edge_list<R: BufRead>(input: R, nominal_df: f64, nominal_dw: f64) -> Result<Self> {
        let mut lines = input
            .lines()
            .map(|l| l.map_err(Error::from))
            .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()));
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("missing header line".into()))??;
        let mut head = header.split_whitespace();
        let n: usize = parse_field(head.next(), "n_vertices")?;
        let m: usize = parse_field(head.next(), "m_edges")?;
        let mut edges = Vec::with_capacity(m);
        for line in lines {
            let line = line?;
            let mut it = line.split_whitespace();
            let u: usize = parse_field(it.next(), "u")?;
            let v: usize = parse_field(it.next(), "v")?;
            let w: f64 = parse_field(it.next(), "weight")?;
            edges.push((u, v, w));
        }
        if edges.len() != m {
            return Err(Error::Parse(format!(
                "header announces {m} edges, found {}",
                edges.len()
            )));
        }
        Self::from_edges(n, edges, Vec::new(), Vec::new(), None, nominal_df, nominal_dw)
    }

    /// Stable content hash of the weighted edge set.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.n_vertices() as u64).to_le_bytes());
        for (u, v, w) in self.edges() {
            h.update((u as u64).to_le_bytes());
            h.update((v as u64).to_le_bytes());
            h.update(w.to_le_bytes());
        }
        h.update(self.nominal_df.to_le_bytes());
        h.update(self.nominal_dw.to_le_bytes());
        hex::encode(&h.finalize()[..16])
    }
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, name: &str) -> Result<T> {
    field
        .ok_or_else(|| Error::Parse(format!("missing field {name}")))?
        .parse()
        .map_err(|_| Error::Parse(format!("malformed field {name}")))
}

fn argmax(v: &[u32]) -> usize {
    let mut best = 0;
    for (i, &d) in v.iter().enumerate() {
        if d > v[best] {
            best = i;
        }
    }
    best
}

/// Ball volumes `V(x, r)` around a set of centers plus fitted growth exponent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VolumeReport {
    pub centers: Vec<Vertex>,
    /// `volumes[i][r] = V(centers[i], r)` for `r = 0..=r_max`.
    pub volumes: Vec<Vec<f64>>,
    pub r_max: u32,
    /// Least-squares slope of `log V` against `log r` over `r ∈ [2, r_max]`.
    pub df_hat: Option<f64>,
    /// `max max(V/r^df, r^df/V)` over `r ∈ [1, r_max]` with the nominal `d_f`.
    pub cv_hat: f64,
}

pub fn volume_profile(g: &WeightedGraph, centers: &[Vertex], r_max: u32) -> Result<VolumeReport> {
    if centers.is_empty() {
        return Err(invalid("volume_profile needs at least one center"));
    }
    let df = g.nominal_df();
    let mut volumes = Vec::with_capacity(centers.len());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut cv_hat: f64 = 1.0;
    for &x in centers {
        g.check_vertex(x)?;
        if !g.is_core(x) {
            return Err(invalid(format!("center {x} is not a core vertex")));
        }
        if r_max > g.boundary_distance(x) {
            return Err(Error::BoundaryContamination(format!(
                "r_max {r_max} exceeds the distance {} from center {x} to the boundary",
                g.boundary_distance(x)
            )));
        }
        let d = g.distances_from(x)?;
        let mut shell = vec![0.0; r_max as usize + 1];
        for (y, &dy) in d.iter().enumerate() {
            if dy <= r_max {
                shell[dy as usize] += g.measure()[y];
            }
        }
        let mut acc = 0.0;
        let vols: Vec<f64> = shell
            .iter()
            .map(|s| {
                acc += s;
                acc
            })
            .collect();
        for r in 1..=r_max {
            let v = vols[r as usize];
            let scale = (r as f64).powf(df);
            cv_hat = cv_hat.max(v / scale).max(scale / v);
            if r >= 2 {
                xs.push((r as f64).ln());
                ys.push(v.ln());
            }
        }
        volumes.push(vols);
    }
    Ok(VolumeReport {
        centers: centers.to_vec(),
        volumes,
        r_max,
        df_hat: least_squares_slope(&xs, &ys),
        cv_hat,
    })
}

pub(crate) fn least_squares_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> WeightedGraph {
        build_graph(&GraphSpec::Lattice { dim: 1, side: n }).unwrap()
    }

    #[test]
    fn path_graph_shape() {
        let g = path(5);
        assert_eq!(g.n_vertices(), 5);
        assert_eq!(g.n_edges(), 4);
        assert_eq!(g.measure()[2], 2.0);
        assert_eq!(g.measure()[0], 1.0);
        assert_eq!(g.distance(0, 3).unwrap(), 3);
        assert_eq!(g.distance(4, 4).unwrap(), 0);
    }

    #[test]
    fn size_zero_is_rejected() {
        for spec in [
            GraphSpec::Lattice { dim: 2, side: 0 },
            GraphSpec::Lattice { dim: 0, side: 4 },
            GraphSpec::Gasket { level: 0 },
            GraphSpec::Vicsek { level: 0 },
        ] {
            assert!(matches!(build_graph(&spec), Err(Error::InvalidParameter(_))));
        }
    }

    #[test]
    fn vertex_budget() {
        let err = build_graph(&GraphSpec::Gasket { level: 20 }).unwrap_err();
        assert!(matches!(err, Error::ResourceLimit(_)));
        let err = build_graph(&GraphSpec::Lattice { dim: 3, side: 200 }).unwrap_err();
        assert!(matches!(err, Error::ResourceLimit(_)));
    }

    #[test]
    fn vicsek_level_one_is_a_plus() {
        let g = build_graph(&GraphSpec::Vicsek { level: 1 }).unwrap();
        assert_eq!(g.n_vertices(), 5);
        assert_eq!(g.n_edges(), 4);
        assert_eq!(g.max_degree(), 4);
        assert_eq!(g.diameter(), 2);
        assert_eq!(g.boundary().len(), 4);
    }

    #[test]
    fn invalid_vertex() {
        let g = path(4);
        assert!(matches!(g.distance(0, 9), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn interior_volume_on_path() {
        let g = path(9);
        let rep = volume_profile(&g, &[4], 2).unwrap();
        assert_eq!(rep.volumes[0][0], 2.0);
        assert_eq!(rep.volumes[0][1], 6.0);
        assert_eq!(rep.volumes[0][2], 10.0);
    }

    #[test]
    fn volume_profile_rejects_boundary_radius() {
        let g = path(9);
        assert!(matches!(
            volume_profile(&g, &[4], 5),
            Err(Error::BoundaryContamination(_))
        ));
        assert!(matches!(
            volume_profile(&g, &[0], 1),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn edge_list_round_trip() {
        let g = build_graph(&GraphSpec::Gasket { level: 2 }).unwrap();
        let mut buf = Vec::new();
        g.write_edge_list(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("15 27\n"));
        let h = WeightedGraph::read_edge_list(&buf[..], g.nominal_df(), g.nominal_dw()).unwrap();
        assert_eq!(h.n_vertices(), g.n_vertices());
        assert_eq!(h.edges().collect::<Vec<_>>(), g.edges().collect::<Vec<_>>());
        assert_eq!(h.fingerprint(), g.fingerprint());
    }

    #[test]
    fn edge_list_errors() {
        let bad = b"3 2\n0 1 1\n";
        assert!(matches!(
            WeightedGraph::read_edge_list(&bad[..], 1.0, 2.0),
            Err(Error::Parse(_))
        ));
        let disconnected = b"4 2\n0 1 1\n2 3 1\n";
        assert!(matches!(
            WeightedGraph::read_edge_list(&disconnected[..], 1.0, 2.0),
            Err(Error::InvalidParameter(_))
        ));
        let negative = b"2 1\n0 1 -1\n";
        assert!(WeightedGraph::read_edge_list(&negative[..], 1.0, 2.0).is_err());
    }
}
