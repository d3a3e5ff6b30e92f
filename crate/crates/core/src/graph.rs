//! Finite graphs discretizing the spatial domain.
//!
//! Every undirected edge is stored twice, once per orientation, so sums over
//! `(i, j) ∈ E` are literal loops over [`Graph::edges`]. Edges are kept sorted
//! by `(from, to)`, which makes the outgoing edges of vertex `i` the contiguous
//! range [`Graph::edge_range`]. Vertices are 0-based.

use std::collections::VecDeque;
use std::ops::Range;

use crate::error::{invalid, Result};

/// Boundary treatment for lattice builders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Zero flux: no wrap-around edges.
    Neumann,
    /// Wrap-around edge between the last and first vertex of every line.
    Periodic,
}

/// A directed edge together with the coordinate direction it runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub direction: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    dim: usize,
    dx: f64,
    coords: Vec<f64>,
    edges: Vec<Edge>,
    offsets: Vec<usize>,
    reverse: Vec<usize>,
}

impl Graph {
    /// Assemble a graph from undirected edges `(i, j, direction)`; both
    /// orientations are inserted. `coords` is row-major with `dim` entries per
    /// vertex.
    pub fn from_undirected(
        n: usize,
        dim: usize,
        dx: f64,
        coords: Vec<f64>,
        undirected: &[(usize, usize, usize)],
    ) -> Result<Self> {
        if coords.len() != n * dim {
            return Err(invalid("coordinate array does not match vertex count"));
        }
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(invalid(format!("spacing must be positive, got {dx}")));
        }
        if let Some(&(_, _, d)) = undirected.iter().find(|e| e.2 >= dim) {
            return Err(invalid(format!("edge direction {d} out of range")));
        }
        let mut edges = Vec::with_capacity(2 * undirected.len());
        for &(i, j, d) in undirected {
            if i == j {
                return Err(invalid(format!("self-loop at vertex {i}")));
            }
            if i >= n || j >= n {
                return Err(invalid(format!("edge ({i}, {j}) out of range")));
            }
            edges.push(Edge { from: i, to: j, direction: d });
            edges.push(Edge { from: j, to: i, direction: d });
        }
        edges.sort();
        if edges.windows(2).any(|w| w[0].from == w[1].from && w[0].to == w[1].to) {
            return Err(invalid("duplicate edge; lattice lines need at least 3 points when periodic"));
        }
        let mut offsets = vec![0usize; n + 1];
        for e in &edges {
            offsets[e.from + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut reverse = vec![usize::MAX; edges.len()];
        for (k, e) in edges.iter().enumerate() {
            let range = offsets[e.to]..offsets[e.to + 1];
            let pos = edges[range.clone()]
                .binary_search_by(|f| f.to.cmp(&e.from))
                .expect("reverse edge exists by construction");
            reverse[k] = range.start + pos;
        }
        Ok(Self { n, dim, dx, coords, edges, offsets, reverse })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Spatial dimension of the coordinates (1 or 2 for the builders here).
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Uniform spacing Δx.
    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn coord(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    /// Directed edge list, both orientations, sorted by `(from, to)`.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Index range into [`Graph::edges`] of the edges leaving `i`.
    #[inline]
    pub fn edge_range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Index of the edge `(j, i)` for edge index `k = (i, j)`.
    #[inline]
    pub fn reverse_edge(&self, k: usize) -> usize {
        self.reverse[k]
    }

    pub fn num_undirected_edges(&self) -> usize {
        self.edges.len() / 2
    }

    /// Number of coordinate directions used to tag edges.
    pub fn num_directions(&self) -> usize {
        self.dim
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Maximal vertex degree Δ(G).
    pub fn max_degree(&self) -> usize {
        (0..self.n).map(|i| self.degree(i)).max().unwrap_or(0)
    }

    /// Sorted neighbor list N(i).
    pub fn neighbors(&self, i: usize) -> Result<Vec<usize>> {
        self.check_vertex(i)?;
        Ok(self.edges[self.edge_range(i)].iter().map(|e| e.to).collect())
    }

    /// Neighbors of `i` along coordinate direction `direction` (0-based).
    pub fn directional_neighbors(&self, i: usize, direction: usize) -> Result<Vec<usize>> {
        self.check_vertex(i)?;
        if direction >= self.dim {
            return Err(invalid(format!(
                "direction {direction} out of range for a {}-dimensional graph",
                self.dim
            )));
        }
        Ok(self.edges[self.edge_range(i)]
            .iter()
            .filter(|e| e.direction == direction)
            .map(|e| e.to)
            .collect())
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return false;
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for e in &self.edges[self.edge_range(i)] {
                if !seen[e.to] {
                    seen[e.to] = true;
                    count += 1;
                    queue.push_back(e.to);
                }
            }
        }
        count == self.n
    }

    fn check_vertex(&self, i: usize) -> Result<()> {
        if i >= self.n {
            return Err(invalid(format!("vertex {i} out of range (n = {})", self.n)));
        }
        Ok(())
    }
}

/// Path graph L_n on `n` equispaced points of `[a, b]`, Δx = (b−a)/(n−1).
pub fn build_path_lattice_1d(a: f64, b: f64, n: usize) -> Result<Graph> {
    check_interval(a, b)?;
    if n < 2 {
        return Err(invalid(format!("path lattice needs n >= 2, got {n}")));
    }
    let dx = (b - a) / (n - 1) as f64;
    let coords = (0..n).map(|i| a + i as f64 * dx).collect();
    let undirected: Vec<_> = (0..n - 1).map(|i| (i, i + 1, 0)).collect();
    Graph::from_undirected(n, 1, dx, coords, &undirected)
}

/// Cycle graph C_n: the path lattice plus the wrap edge `(n−1, 0)`.
///
/// Δx stays `(b−a)/(n−1)` and the wrap edge is treated as having the same
/// length as every other edge.
pub fn build_cycle_1d(a: f64, b: f64, n: usize) -> Result<Graph> {
    check_interval(a, b)?;
    if n < 3 {
        return Err(invalid(format!("cycle needs n >= 3, got {n}")));
    }
    let dx = (b - a) / (n - 1) as f64;
    let coords = (0..n).map(|i| a + i as f64 * dx).collect();
    let mut undirected: Vec<_> = (0..n - 1).map(|i| (i, i + 1, 0)).collect();
    undirected.push((n - 1, 0, 0));
    Graph::from_undirected(n, 1, dx, coords, &undirected)
}

/// Cartesian product of two 1-d lattices on `[xlo, xhi] × [ylo, yhi]`.
///
/// Vertex `iy * nx + ix` sits at `(xlo + ix·dx, ylo + iy·dx)`. Edges along x
/// carry direction 0, edges along y direction 1.
pub fn build_lattice_2d(
    xlo: f64,
    xhi: f64,
    ylo: f64,
    yhi: f64,
    dx: f64,
    boundary: Boundary,
) -> Result<Graph> {
    check_interval(xlo, xhi)?;
    check_interval(ylo, yhi)?;
    if !(dx > 0.0 && dx.is_finite()) {
        return Err(invalid(format!("spacing must be positive, got {dx}")));
    }
    let nx = points_along(xlo, xhi, dx)?;
    let ny = points_along(ylo, yhi, dx)?;
    let n = nx * ny;
    let mut coords = Vec::with_capacity(2 * n);
    for iy in 0..ny {
        for ix in 0..nx {
            coords.push(xlo + ix as f64 * dx);
            coords.push(ylo + iy as f64 * dx);
        }
    }
    let idx = |ix: usize, iy: usize| iy * nx + ix;
    let mut undirected = Vec::new();
    for iy in 0..ny {
        for ix in 0..nx - 1 {
            undirected.push((idx(ix, iy), idx(ix + 1, iy), 0));
        }
        if boundary == Boundary::Periodic && nx >= 2 {
            undirected.push((idx(nx - 1, iy), idx(0, iy), 0));
        }
    }
    for ix in 0..nx {
        for iy in 0..ny - 1 {
            undirected.push((idx(ix, iy), idx(ix, iy + 1), 1));
        }
        if boundary == Boundary::Periodic && ny >= 2 {
            undirected.push((idx(ix, ny - 1), idx(ix, 0), 1));
        }
    }
    Graph::from_undirected(n, 2, dx, coords, &undirected)
}

fn check_interval(lo: f64, hi: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(invalid(format!("need a < b, got [{lo}, {hi}]")));
    }
    Ok(())
}

fn points_along(lo: f64, hi: f64, dx: f64) -> Result<usize> {
    let cells = (hi - lo) / dx;
    let rounded = cells.round();
    if rounded < 1.0 || (cells - rounded).abs() > 1e-9 * cells.abs().max(1.0) {
        return Err(invalid(format!(
            "interval [{lo}, {hi}] is not an integer multiple of dx = {dx}"
        )));
    }
    Ok(rounded as usize + 1)
}
