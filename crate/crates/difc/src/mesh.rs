//! Uniform simplicial meshes of (0,1) and (0,1)² and the sub-simplex
//! subdivisions consumed by the composite vertex quadrature rule.

use crate::error::{invalid, Result};

pub type Point = [f64; 2];

const NO_NODE: usize = usize::MAX;

/// Simplicial triangulation of the unit interval or unit square.
///
/// Nodes are grid-ordered (x fastest); every square cell is split along its
/// (0,0)→(1,1) diagonal, so equal inputs produce identical meshes. `h` is the
/// maximum element diameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub dim: usize,
    pub cells_per_side: usize,
    pub nodes: Vec<Point>,
    elements: Vec<[usize; 3]>,
    pub boundary_nodes: Vec<bool>,
    pub h: f64,
}

impl Mesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    /// Node indices of element `k` (length dim+1).
    pub fn element(&self, k: usize) -> &[usize] {
        &self.elements[k][..=self.dim]
    }

    pub fn element_vertices(&self, k: usize) -> Vec<Point> {
        self.element(k).iter().map(|&i| self.nodes[i]).collect()
    }

    pub fn element_volume(&self, k: usize) -> f64 {
        simplex_volume(self.dim, &self.element_vertices(k))
    }

    pub fn element_diameter(&self, k: usize) -> f64 {
        simplex_diameter(self.dim, &self.element_vertices(k))
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.n_elements()).map(|k| self.element_volume(k)).sum()
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&i| !self.boundary_nodes[i])
            .collect()
    }

    /// Index of the element containing `x` (clamped to the grid), plus the
    /// barycentric coordinates of `x` in it. O(1) on these structured meshes.
    pub fn locate(&self, x: &[f64]) -> (usize, Vec<f64>) {
        let m = self.cells_per_side as f64;
        match self.dim {
            1 => {
                let i = ((x[0] * m).floor() as isize).clamp(0, self.cells_per_side as isize - 1)
                    as usize;
                let x0 = self.nodes[i][0];
                let t = (x[0] - x0) * m;
                (i, vec![1.0 - t, t])
            }
            _ => {
                let ci = ((x[0] * m).floor() as isize).clamp(0, self.cells_per_side as isize - 1)
                    as usize;
                let cj = ((x[1] * m).floor() as isize).clamp(0, self.cells_per_side as isize - 1)
                    as usize;
                let xi = x[0] * m - ci as f64;
                let eta = x[1] * m - cj as f64;
                // lower triangle (ξ ≥ η) is listed first per cell
                let k = 2 * (cj * self.cells_per_side + ci) + if xi >= eta { 0 } else { 1 };
                let verts = self.element_vertices(k);
                (k, barycentric(self.dim, &verts, x))
            }
        }
    }

    /// Boundary edges as node-index pairs (2D only; 1D boundaries are the two
    /// endpoint nodes).
    pub fn boundary_edges(&self) -> Vec<[usize; 2]> {
        assert_eq!(self.dim, 2, "boundary_edges is 2D-only");
        let m = self.cells_per_side;
        let idx = |i: usize, j: usize| j * (m + 1) + i;
        let mut edges = Vec::with_capacity(4 * m);
        for i in 0..m {
            edges.push([idx(i, 0), idx(i + 1, 0)]);
            edges.push([idx(i, m), idx(i + 1, m)]);
            edges.push([idx(0, i), idx(0, i + 1)]);
            edges.push([idx(m, i), idx(m, i + 1)]);
        }
        edges
    }

    /// Plain-text dump: one node line per node, then one element line per
    /// element (debugging aid).
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            if self.dim == 1 {
                out.push_str(&format!("{}\n", n[0]));
            } else {
                out.push_str(&format!("{} {}\n", n[0], n[1]));
            }
        }
        for k in 0..self.n_elements() {
            let e: Vec<String> = self.element(k).iter().map(|i| i.to_string()).collect();
            out.push_str(&e.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Uniform subdivision of one element into 2^{dim·n} sub-simplexes of
/// diameter h_K/2^n (repeated bisection in 1D, red refinement in 2D).
#[derive(Debug, Clone)]
pub struct SubSimplexSet {
    pub parent: usize,
    pub level: u32,
    pub cells: Vec<Vec<Point>>,
}

pub fn build_uniform_mesh(dim: usize, cells_per_side: usize) -> Result<Mesh> {
    if !(dim == 1 || dim == 2) {
        return Err(invalid(format!("mesh dimension must be 1 or 2, got {dim}")));
    }
    if cells_per_side < 1 {
        return Err(invalid("cells_per_side must be at least 1"));
    }
    let m = cells_per_side;
    Ok(match dim {
        1 => {
            let nodes: Vec<Point> = (0..=m).map(|i| [i as f64 / m as f64, 0.0]).collect();
            let elements = (0..m).map(|i| [i, i + 1, NO_NODE]).collect();
            let mut boundary = vec![false; m + 1];
            boundary[0] = true;
            boundary[m] = true;
            Mesh {
                dim,
                cells_per_side: m,
                nodes,
                elements,
                boundary_nodes: boundary,
                h: 1.0 / m as f64,
            }
        }
        _ => {
            let mut nodes = Vec::with_capacity((m + 1) * (m + 1));
            let mut boundary = Vec::with_capacity((m + 1) * (m + 1));
            for j in 0..=m {
                for i in 0..=m {
                    nodes.push([i as f64 / m as f64, j as f64 / m as f64]);
                    boundary.push(i == 0 || i == m || j == 0 || j == m);
                }
            }
            let idx = |i: usize, j: usize| j * (m + 1) + i;
            let mut elements = Vec::with_capacity(2 * m * m);
            for j in 0..m {
                for i in 0..m {
                    let (v00, v10, v01, v11) =
                        (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
                    elements.push([v00, v10, v11]);
                    elements.push([v00, v11, v01]);
                }
            }
            let h = std::f64::consts::SQRT_2 / m as f64;
            Mesh {
                dim,
                cells_per_side: m,
                nodes,
                elements,
                boundary_nodes: boundary,
                h,
            }
        }
    })
}

/// Uniform refinement: halves h and multiplies the element count by 2^dim.
/// For this fixed criss-cross pattern the result equals red refinement of
/// every element, up to node numbering.
pub fn refine(mesh: &Mesh) -> Mesh {
    build_uniform_mesh(mesh.dim, 2 * mesh.cells_per_side).expect("valid mesh refines")
}

pub fn subdivide_element(mesh: &Mesh, element: usize, n: u32) -> Result<SubSimplexSet> {
    if element >= mesh.n_elements() {
        return Err(invalid(format!("element index {element} out of range")));
    }
    let mut cells = vec![mesh.element_vertices(element)];
    for _ in 0..n {
        cells = cells
            .iter()
            .flat_map(|c| split_simplex(mesh.dim, c))
            .collect();
    }
    Ok(SubSimplexSet {
        parent: element,
        level: n,
        cells,
    })
}

fn split_simplex(dim: usize, v: &[Point]) -> Vec<Vec<Point>> {
    let mid = |a: Point, b: Point| [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
    match dim {
        1 => {
            let m = mid(v[0], v[1]);
            vec![vec![v[0], m], vec![m, v[1]]]
        }
        _ => {
            let (a, b, c) = (v[0], v[1], v[2]);
            let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
            vec![
                vec![a, ab, ca],
                vec![ab, b, bc],
                vec![ca, bc, c],
                vec![ab, bc, ca],
            ]
        }
    }
}

pub fn simplex_volume(dim: usize, v: &[Point]) -> f64 {
    match dim {
        1 => (v[1][0] - v[0][0]).abs(),
        _ => {
            let (ax, ay) = (v[1][0] - v[0][0], v[1][1] - v[0][1]);
            let (bx, by) = (v[2][0] - v[0][0], v[2][1] - v[0][1]);
            0.5 * (ax * by - ay * bx).abs()
        }
    }
}

pub fn simplex_diameter(dim: usize, v: &[Point]) -> f64 {
    match dim {
        1 => (v[1][0] - v[0][0]).abs(),
        _ => {
            let d = |a: Point, b: Point| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            d(v[0], v[1]).max(d(v[1], v[2])).max(d(v[2], v[0]))
        }
    }
}

/// Barycentric coordinates of `x` in the simplex with vertices `v`.
pub fn barycentric(dim: usize, v: &[Point], x: &[f64]) -> Vec<f64> {
    match dim {
        1 => {
            let t = (x[0] - v[0][0]) / (v[1][0] - v[0][0]);
            vec![1.0 - t, t]
        }
        _ => {
            let det = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1])
                - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]);
            let l1 = ((x[0] - v[0][0]) * (v[2][1] - v[0][1])
                - (v[2][0] - v[0][0]) * (x[1] - v[0][1]))
                / det;
            let l2 = ((v[1][0] - v[0][0]) * (x[1] - v[0][1])
                - (x[0] - v[0][0]) * (v[1][1] - v[0][1]))
                / det;
            vec![1.0 - l1 - l2, l1, l2]
        }
    }
}
