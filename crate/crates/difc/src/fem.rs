//! P1 finite elements on the meshes of [`crate::mesh`]: composite vertex
//! quadrature, stiffness and load assembly, homogeneous Dirichlet solves, and
//! error norms.

use std::collections::HashMap;
use std::sync::{Arc, LazyLock, Mutex};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{invalid, numerical, Result};
use crate::field::ScalarField;
use crate::mesh::{Mesh, Point};

/// Quadrature level treated as exact when a contract calls for an exact
/// integral: the vertex-rule error carries a 2^{-2n} factor, so level 4
/// contributes under half a percent of the leading h² term.
pub const EXACT_LEVEL: u32 = 4;

const MAX_LEVEL: u32 = 10;
const DENSE_LIMIT: usize = 200;
const PCG_RTOL: f64 = 1e-10;

/// One node of the composite vertex rule on the reference simplex.
/// `weight` is the fraction of the element volume carried by the node.
#[derive(Debug, Clone, Copy)]
pub struct QuadPoint {
    pub lambda: [f64; 3],
    pub weight: f64,
}

/// Composite vertex rule at subdivision level n: the element is split into
/// 2^{dim·n} sub-simplexes and each contributes volume/(dim+1) per vertex.
/// Exact for P1; error O(2^{-2n} h² |v|_{H²}) otherwise. Nodes are stored
/// deduplicated, in ascending integer-lattice order.
#[derive(Debug)]
pub struct QuadratureRule {
    pub dim: usize,
    pub level: u32,
    pub points: Vec<QuadPoint>,
}

static RULE_CACHE: LazyLock<Mutex<HashMap<(usize, u32), Arc<QuadratureRule>>>> =
    LazyLock::new(Default::default);

impl QuadratureRule {
    pub fn get(dim: usize, level: u32) -> Arc<QuadratureRule> {
        assert!(dim == 1 || dim == 2, "quadrature dim must be 1 or 2");
        assert!(
            level <= MAX_LEVEL,
            "quadrature level {level} exceeds {MAX_LEVEL}"
        );
        let mut cache = RULE_CACHE.lock().unwrap();
        cache
            .entry((dim, level))
            .or_insert_with(|| Arc::new(build_rule(dim, level)))
            .clone()
    }
}

fn build_rule(dim: usize, level: u32) -> QuadratureRule {
    let n = 1usize << level;
    let nf = n as f64;
    let mut points = Vec::new();
    match dim {
        1 => {
            // n panels of length 1/n; each endpoint takes half a panel.
            for i in 0..=n {
                let w = if i == 0 || i == n { 0.5 / nf } else { 1.0 / nf };
                points.push(QuadPoint {
                    lambda: [1.0 - i as f64 / nf, i as f64 / nf, 0.0],
                    weight: w,
                });
            }
        }
        _ => {
            // Red refinement of the reference triangle into n² children of
            // equal area; integer lattice keys make deduplication exact.
            let mut acc: std::collections::BTreeMap<(usize, usize), f64> = Default::default();
            let w = 1.0 / (3.0 * nf * nf);
            let mut add = |i: usize, j: usize| *acc.entry((i, j)).or_insert(0.0) += w;
            for j in 0..n {
                for i in 0..n - j {
                    add(i, j);
                    add(i + 1, j);
                    add(i, j + 1);
                    if i + j + 2 <= n {
                        add(i + 1, j);
                        add(i, j + 1);
                        add(i + 1, j + 1);
                    }
                }
            }
            for ((i, j), w) in acc {
                let (li, lj) = (i as f64 / nf, j as f64 / nf);
                points.push(QuadPoint {
                    lambda: [1.0 - li - lj, li, lj],
                    weight: w,
                });
            }
        }
    }
    QuadratureRule { dim, level, points }
}

/// Physical position of a barycentric point in element `k`.
pub fn physical_point(verts: &[Point], dim: usize, lambda: &[f64; 3]) -> [f64; 2] {
    let mut x = [0.0; 2];
    for (v, l) in verts.iter().zip(lambda.iter()).take(dim + 1) {
        x[0] += l * v[0];
        x[1] += l * v[1];
    }
    x
}

/// Q_K applied to `f(lambda, x)` over element `k`.
pub fn element_quadrature(
    mesh: &Mesh,
    k: usize,
    rule: &QuadratureRule,
    mut f: impl FnMut(&[f64], &[f64]) -> f64,
) -> f64 {
    let verts = mesh.element_vertices(k);
    let vol = mesh.element_volume(k);
    rule.points
        .iter()
        .map(|q| {
            let x = physical_point(&verts, mesh.dim, &q.lambda);
            q.weight * vol * f(&q.lambda[..=mesh.dim], &x[..mesh.dim])
        })
        .sum()
}

/// Q_h applied to `f(element, lambda, x)` over the whole mesh.
pub fn quadrature(mesh: &Mesh, level: u32, mut f: impl FnMut(usize, &[f64], &[f64]) -> f64) -> f64 {
    let rule = QuadratureRule::get(mesh.dim, level);
    (0..mesh.n_elements())
        .map(|k| element_quadrature(mesh, k, &rule, |l, x| f(k, l, x)))
        .sum()
}

/// Boundary counterpart of [`quadrature`]: counting measure at the two
/// endpoints in 1D, composite trapezoid along each boundary edge in 2D.
pub fn boundary_quadrature(mesh: &Mesh, level: u32, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    match mesh.dim {
        1 => f(&[0.0]) + f(&[1.0]),
        _ => {
            let n = 1usize << level;
            let nf = n as f64;
            let mut total = 0.0;
            for [a, b] in mesh.boundary_edges() {
                let (pa, pb) = (mesh.nodes[a], mesh.nodes[b]);
                let len = ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt();
                for i in 0..=n {
                    let t = i as f64 / nf;
                    let w = if i == 0 || i == n { 0.5 / nf } else { 1.0 / nf };
                    let x = [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])];
                    total += w * len * f(&x);
                }
            }
            total
        }
    }
}

/// Piecewise-linear function given by nodal values.
#[derive(Debug, Clone)]
pub struct FemFunction {
    pub mesh: Arc<Mesh>,
    pub values: Vec<f64>,
}

impl FemFunction {
    pub fn new(mesh: Arc<Mesh>, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.n_nodes() {
            return Err(invalid(format!(
                "nodal vector length {} does not match mesh with {} nodes",
                values.len(),
                mesh.n_nodes()
            )));
        }
        Ok(FemFunction { mesh, values })
    }

    pub fn zeros(mesh: &Arc<Mesh>) -> Self {
        FemFunction {
            mesh: mesh.clone(),
            values: vec![0.0; mesh.n_nodes()],
        }
    }

    pub fn interpolate(mesh: &Arc<Mesh>, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = mesh.nodes.iter().map(|p| f(&p[..mesh.dim])).collect();
        FemFunction {
            mesh: mesh.clone(),
            values,
        }
    }

    /// Value at barycentric coordinates inside element `k`; unambiguous on
    /// element boundaries, unlike point evaluation.
    pub fn value_in(&self, k: usize, lambda: &[f64]) -> f64 {
        self.mesh
            .element(k)
            .iter()
            .zip(lambda)
            .map(|(&v, l)| l * self.values[v])
            .sum()
    }

    /// Gradient on element `k` (constant there).
    pub fn gradient_in(&self, k: usize) -> [f64; 2] {
        let grads = shape_gradients(&self.mesh, k);
        let mut g = [0.0; 2];
        for (&v, sg) in self.mesh.element(k).iter().zip(grads.iter()) {
            g[0] += self.values[v] * sg[0];
            g[1] += self.values[v] * sg[1];
        }
        g
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let (k, lambda) = self.mesh.locate(x);
        self.value_in(k, &lambda)
    }

    pub fn eval_gradient(&self, x: &[f64]) -> [f64; 2] {
        let (k, _) = self.mesh.locate(x);
        self.gradient_in(k)
    }
}

/// Gradients of the barycentric shape functions of element `k`.
pub fn shape_gradients(mesh: &Mesh, k: usize) -> Vec<[f64; 2]> {
    let v = mesh.element_vertices(k);
    match mesh.dim {
        1 => {
            let h = v[1][0] - v[0][0];
            vec![[-1.0 / h, 0.0], [1.0 / h, 0.0]]
        }
        _ => {
            let two_a = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1])
                - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]);
            let mut g = Vec::with_capacity(3);
            for i in 0..3 {
                let (j, l) = ((i + 1) % 3, (i + 2) % 3);
                g.push([(v[j][1] - v[l][1]) / two_a, (v[l][0] - v[j][0]) / two_a]);
            }
            g
        }
    }
}

/// Symmetric sparse matrix in CSR form. Only SPD systems are solved here.
#[derive(Debug, Clone)]
pub struct SparseSpd {
    pub n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSpd {
    pub fn from_triplets(n: usize, triplets: &mut [(usize, usize, f64)]) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut last = None;
        for &(r, c, v) in triplets.iter() {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                last = Some((r, c));
            }
            row_ptr[r + 1] = cols.len();
        }
        for r in 0..n {
            row_ptr[r + 1] = row_ptr[r + 1].max(row_ptr[r]);
        }
        SparseSpd {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.n {
            let mut s = 0.0;
            for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.vals[idx] * x[self.cols[idx]];
            }
            y[r] = s;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        y
    }

    /// xᵀ A x.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.apply(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn diag(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for r in 0..self.n {
            for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.cols[idx] == r {
                    d[r] = self.vals[idx];
                }
            }
        }
        d
    }

    /// Submatrix on the rows/columns flagged in `keep`, plus the kept
    /// original indices (Dirichlet elimination keeps the system SPD).
    pub fn restrict(&self, keep: &[bool]) -> (SparseSpd, Vec<usize>) {
        let kept: Vec<usize> = (0..self.n).filter(|&i| keep[i]).collect();
        let mut map = vec![usize::MAX; self.n];
        for (new, &old) in kept.iter().enumerate() {
            map[old] = new;
        }
        let mut row_ptr = vec![0usize; kept.len() + 1];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for (new_r, &old_r) in kept.iter().enumerate() {
            for idx in self.row_ptr[old_r]..self.row_ptr[old_r + 1] {
                let c = self.cols[idx];
                if keep[c] {
                    cols.push(map[c]);
                    vals.push(self.vals[idx]);
                }
            }
            row_ptr[new_r + 1] = cols.len();
        }
        (
            SparseSpd {
                n: kept.len(),
                row_ptr,
                cols,
                vals,
            },
            kept,
        )
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                m[(r, self.cols[idx])] = self.vals[idx];
            }
        }
        m
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|r| self.vals[self.row_ptr[r]..self.row_ptr[r + 1]].iter().sum())
            .collect()
    }
}

/// Stiffness matrix of −∇·(a∇·) on the full nodal space (no boundary
/// conditions applied). `coeff(k, lambda, x)` is sampled at the level-`level`
/// quadrature nodes; every sample must be positive.
pub fn assemble_stiffness(
    mesh: &Mesh,
    level: u32,
    mut coeff: impl FnMut(usize, &[f64], &[f64]) -> f64,
) -> Result<SparseSpd> {
    let rule = QuadratureRule::get(mesh.dim, level);
    let nv = mesh.dim + 1;
    let mut triplets = Vec::with_capacity(mesh.n_elements() * nv * nv);
    for k in 0..mesh.n_elements() {
        let verts = mesh.element_vertices(k);
        let vol = mesh.element_volume(k);
        let mut s = 0.0;
        for q in &rule.points {
            let x = physical_point(&verts, mesh.dim, &q.lambda);
            let c = coeff(k, &q.lambda[..nv], &x[..mesh.dim]);
            if !(c > 0.0) {
                return Err(invalid(format!(
                    "coefficient sample {c} at x = {:?} (element {k}) is not positive",
                    &x[..mesh.dim]
                )));
            }
            s += q.weight * vol * c;
        }
        let grads = shape_gradients(mesh, k);
        let nodes = mesh.element(k);
        for i in 0..nv {
            for j in 0..nv {
                let gij = grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1];
                triplets.push((nodes[i], nodes[j], s * gij));
            }
        }
    }
    Ok(SparseSpd::from_triplets(mesh.n_nodes(), &mut triplets))
}

/// Stiffness with unit coefficient (the H¹-seminorm Gram matrix); exact at
/// any level, assembled at level 0.
pub fn unit_stiffness(mesh: &Mesh) -> SparseSpd {
    assemble_stiffness(mesh, 0, |_, _, _| 1.0).expect("unit coefficient is positive")
}

/// Load vector b_i = Q_h(f φ_i) on the full nodal space.
pub fn assemble_load(
    mesh: &Mesh,
    level: u32,
    mut f: impl FnMut(usize, &[f64], &[f64]) -> f64,
) -> Vec<f64> {
    let rule = QuadratureRule::get(mesh.dim, level);
    let nv = mesh.dim + 1;
    let mut b = vec![0.0; mesh.n_nodes()];
    for k in 0..mesh.n_elements() {
        let verts = mesh.element_vertices(k);
        let vol = mesh.element_volume(k);
        let nodes = mesh.element(k);
        for q in &rule.points {
            let x = physical_point(&verts, mesh.dim, &q.lambda);
            let fv = f(k, &q.lambda[..nv], &x[..mesh.dim]);
            for (local, &node) in nodes.iter().enumerate() {
                b[node] += q.weight * vol * fv * q.lambda[local];
            }
        }
    }
    b
}

/// How a linear system was solved.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum LinearSolve {
    Dense,
    Pcg { iterations: usize },
}

/// Dense Cholesky solve; for small systems and as a cross-check.
pub fn solve_spd_dense(a: &SparseSpd, b: &[f64]) -> Result<Vec<f64>> {
    let chol = a
        .to_dense()
        .cholesky()
        .ok_or_else(|| numerical("stiffness matrix is not positive definite"))?;
    Ok(chol
        .solve(&DVector::from_column_slice(b))
        .as_slice()
        .to_vec())
}

/// Jacobi-preconditioned conjugate gradients; relative residual 1e-10,
/// at most 10n iterations.
pub fn solve_spd_pcg(a: &SparseSpd, b: &[f64]) -> Result<(Vec<f64>, usize)> {
    let n = a.n;
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        return Ok((vec![0.0; n], 0));
    }
    let dinv: Vec<f64> = a
        .diag()
        .iter()
        .map(|&d| {
            if d > 0.0 {
                Ok(1.0 / d)
            } else {
                Err(numerical("non-positive diagonal in pcg"))
            }
        })
        .collect::<Result<_>>()?;
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let max_iters = 10 * n;
    let mut ap = vec![0.0; n];
    for it in 1..=max_iters {
        a.matvec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(numerical("pcg met a non-positive curvature direction"));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm <= PCG_RTOL * bnorm {
            return Ok((x, it));
        }
        for i in 0..n {
            z[i] = r[i] * dinv[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rel = r.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
    Err(numerical(format!(
        "pcg did not converge in {max_iters} iterations (relative residual {rel:.3e})"
    )))
}

/// Direct solve below [`DENSE_LIMIT`] unknowns, PCG above.
pub fn solve_spd(a: &SparseSpd, b: &[f64]) -> Result<(Vec<f64>, LinearSolve)> {
    if a.n < DENSE_LIMIT {
        Ok((solve_spd_dense(a, b)?, LinearSolve::Dense))
    } else {
        let (x, iters) = solve_spd_pcg(a, b)?;
        Ok((x, LinearSolve::Pcg { iterations: iters }))
    }
}

/// Stiffness system with homogeneous Dirichlet rows/columns eliminated.
/// Reusable across right-hand sides (forward and adjoint solves share it).
pub struct DirichletSystem {
    pub mesh: Arc<Mesh>,
    pub interior: Vec<usize>,
    pub matrix: SparseSpd,
}

impl DirichletSystem {
    pub fn assemble(
        mesh: &Arc<Mesh>,
        level: u32,
        coeff: impl FnMut(usize, &[f64], &[f64]) -> f64,
    ) -> Result<Self> {
        let full = assemble_stiffness(mesh, level, coeff)?;
        let keep: Vec<bool> = mesh.boundary_nodes.iter().map(|b| !b).collect();
        let (matrix, interior) = full.restrict(&keep);
        Ok(DirichletSystem {
            mesh: mesh.clone(),
            interior,
            matrix,
        })
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.interior.iter().map(|&i| full[i]).collect()
    }

    pub fn scatter(&self, reduced: &[f64]) -> FemFunction {
        let mut values = vec![0.0; self.mesh.n_nodes()];
        for (r, &i) in self.interior.iter().enumerate() {
            values[i] = reduced[r];
        }
        FemFunction {
            mesh: self.mesh.clone(),
            values,
        }
    }

    /// Solve with a full-space load vector; boundary entries are dropped and
    /// the solution is extended by zero.
    pub fn solve(&self, full_load: &[f64]) -> Result<(FemFunction, LinearSolve)> {
        let rhs = self.restrict(full_load);
        let (x, info) = solve_spd(&self.matrix, &rhs)?;
        Ok((self.scatter(&x), info))
    }
}

/// Solve −∇·(a∇u) = f, u = 0 on the boundary. Stiffness and load quadrature
/// levels are independent.
pub fn solve_forward(
    mesh: &Arc<Mesh>,
    stiffness_level: u32,
    load_level: u32,
    coeff: impl FnMut(usize, &[f64], &[f64]) -> f64,
    f: impl FnMut(usize, &[f64], &[f64]) -> f64,
) -> Result<(FemFunction, LinearSolve)> {
    let sys = DirichletSystem::assemble(mesh, stiffness_level, coeff)?;
    let b = assemble_load(mesh, load_level, f);
    sys.solve(&b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    L2,
    H1Semi,
    L2Boundary,
}

/// Norm of a FEM function, computed with level-`level` quadrature.
pub fn fem_norm(u: &FemFunction, kind: NormKind, level: u32) -> f64 {
    let mesh = &u.mesh;
    let sq = match kind {
        NormKind::L2 => quadrature(mesh, level, |k, l, _| u.value_in(k, l).powi(2)),
        NormKind::H1Semi => quadrature(mesh, level, |k, _, _| {
            let g = u.gradient_in(k);
            g[0] * g[0] + g[1] * g[1]
        }),
        NormKind::L2Boundary => boundary_quadrature(mesh, level, |x| u.eval(x).powi(2)),
    };
    sq.max(0.0).sqrt()
}

/// Norm of a smooth field, computed on `mesh` with level-`level` quadrature.
pub fn field_norm(mesh: &Mesh, g: &dyn ScalarField, kind: NormKind, level: u32) -> f64 {
    let sq = match kind {
        NormKind::L2 => quadrature(mesh, level, |_, _, x| g.value(x).powi(2)),
        NormKind::H1Semi => quadrature(mesh, level, |_, _, x| {
            let gr = g.gradient(x);
            gr[0] * gr[0] + gr[1] * gr[1]
        }),
        NormKind::L2Boundary => boundary_quadrature(mesh, level, |x| g.value(x).powi(2)),
    };
    sq.max(0.0).sqrt()
}

/// ‖u − g‖ for a FEM function against a smooth reference.
pub fn error_norm(u: &FemFunction, g: &dyn ScalarField, kind: NormKind, level: u32) -> f64 {
    let mesh = &u.mesh;
    let sq = match kind {
        NormKind::L2 => quadrature(mesh, level, |k, l, x| {
            (u.value_in(k, l) - g.value(x)).powi(2)
        }),
        NormKind::H1Semi => quadrature(mesh, level, |k, _, x| {
            let a = u.gradient_in(k);
            let b = g.gradient(x);
            (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
        }),
        NormKind::L2Boundary => {
            boundary_quadrature(mesh, level, |x| (u.eval(x) - g.value(x)).powi(2))
        }
    };
    sq.max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::SmoothFn;
    use crate::mesh::build_uniform_mesh;
    use std::f64::consts::PI;

    fn mesh1(m: usize) -> Arc<Mesh> {
        Arc::new(build_uniform_mesh(1, m).unwrap())
    }

    fn mesh2(m: usize) -> Arc<Mesh> {
        Arc::new(build_uniform_mesh(2, m).unwrap())
    }

    #[test]
    fn vertex_rule_tables() {
        let r = QuadratureRule::get(1, 0);
        assert_eq!(r.points.len(), 2);
        assert_eq!(r.points[0].weight, 0.5);
        let r = QuadratureRule::get(2, 0);
        assert_eq!(r.points.len(), 3);
        for q in &r.points {
            assert!((q.weight - 1.0 / 3.0).abs() < 1e-15);
        }
        // level 2 in 2D: lattice points of the 4x-refined reference triangle
        let r = QuadratureRule::get(2, 2);
        assert_eq!(r.points.len(), 15);
        let total: f64 = r.points.iter().map(|q| q.weight).sum();
        assert!((total - 1.0).abs() < 1e-14);
    }

    #[test]
    fn quadrature_is_exact_for_p1() {
        for (dim, m) in [(1usize, 4usize), (2, 3)] {
            let mesh = if dim == 1 { mesh1(m) } else { mesh2(m) };
            let f = |x: &[f64]| 0.7 + 1.3 * x[0] - 0.4 * x.get(1).copied().unwrap_or(0.0);
            let exact = if dim == 1 {
                0.7 + 1.3 / 2.0
            } else {
                0.7 + 1.3 / 2.0 - 0.4 / 2.0
            };
            for level in 0..=3 {
                let q = quadrature(&mesh, level, |_, _, x| f(x));
                assert!((q - exact).abs() < 1e-13, "dim {dim} level {level}: {q}");
            }
        }
    }

    #[test]
    fn quadrature_error_quarters_per_level_1d() {
        // v = x² on a single element: trapezoid error is exactly 2^{-2n}/6.
        let mesh = mesh1(1);
        let exact = 1.0 / 3.0;
        let q0 = quadrature(&mesh, 0, |_, _, x| x[0] * x[0]);
        assert!((q0 - 0.5).abs() < 1e-15);
        let mut prev = q0 - exact;
        for level in 1..=5 {
            let err = quadrature(&mesh, level, |_, _, x| x[0] * x[0]) - exact;
            assert!(
                (prev / err - 4.0).abs() < 1e-9,
                "level {level}: ratio {}",
                prev / err
            );
            prev = err;
        }
    }

    #[test]
    fn quadrature_error_quarters_per_level_2d() {
        // v = x²y on the two-triangle square; exact integral 1/6.
        let mesh = mesh2(1);
        let exact = 1.0 / 6.0;
        let q0 = quadrature(&mesh, 0, |_, _, x| x[0] * x[0] * x[1]);
        assert!((q0 - 1.0 / 3.0).abs() < 1e-15);
        let mut prev = q0 - exact;
        for level in 1..=5 {
            let err = quadrature(&mesh, level, |_, _, x| x[0] * x[0] * x[1]) - exact;
            assert!(
                (prev / err - 4.0).abs() < 1e-6,
                "level {level}: ratio {}",
                prev / err
            );
            prev = err;
        }
    }

    #[test]
    fn stiffness_1d_two_cells_unit_coeff() {
        let mesh = mesh1(2);
        let a = assemble_stiffness(&mesh, 0, |_, _, _| 1.0).unwrap();
        let d = a.to_dense();
        assert!((d[(1, 1)] - 4.0).abs() < 1e-14);
        assert!((d[(0, 1)] + 2.0).abs() < 1e-14);
        assert!((d[(1, 2)] + 2.0).abs() < 1e-14);
        assert!((d[(0, 2)]).abs() < 1e-14);
        for s in a.row_sums() {
            assert!(s.abs() < 1e-13);
        }
    }

    #[test]
    fn stiffness_2d_interior_row_is_five_point_stencil() {
        // Criss-cross P1 on a uniform square grid reproduces the 5-point
        // Laplacian: diagonal 4, axis neighbours -1, diagonal neighbours 0.
        let mesh = mesh2(2);
        let a = assemble_stiffness(&mesh, 0, |_, _, _| 1.0)
            .unwrap()
            .to_dense();
        let c = 4; // node (0.5, 0.5)
        assert!((a[(c, c)] - 4.0).abs() < 1e-13);
        for nb in [1, 3, 5, 7] {
            assert!((a[(c, nb)] + 1.0).abs() < 1e-13);
        }
        for nb in [0, 2, 6, 8] {
            assert!(a[(c, nb)].abs() < 1e-13);
        }
    }

    #[test]
    fn stiffness_respects_p1_coefficient_exactly() {
        // a = 1 + x/2 is P1, so the element average is exact at every level.
        let mesh = mesh1(4);
        let coeff = |x: &[f64]| 1.0 + x[0] / 2.0;
        let a0 = assemble_stiffness(&mesh, 0, |_, _, x| coeff(x))
            .unwrap()
            .to_dense();
        let a3 = assemble_stiffness(&mesh, 3, |_, _, x| coeff(x))
            .unwrap()
            .to_dense();
        assert!((&a0 - &a3).abs().max() < 1e-11);
        // first element: ∫_0^0.25 (1 + x/2) = 0.25 + 0.25²/4
        let s = 0.25 + 0.0625 / 4.0;
        assert!((a0[(0, 0)] - s / (0.25 * 0.25)).abs() < 1e-11);
    }

    #[test]
    fn stiffness_rejects_non_positive_coefficient() {
        let mesh = mesh1(2);
        assert!(assemble_stiffness(&mesh, 0, |_, _, x| x[0] - 0.5).is_err());
        assert!(assemble_stiffness(&mesh, 0, |_, _, _| 0.0).is_err());
    }

    #[test]
    fn load_1d_constant_f() {
        let mesh = mesh1(2);
        let b = assemble_load(&mesh, 0, |_, _, _| 1.0);
        assert!((b[1] - 0.5).abs() < 1e-14);
        assert!((b[0] - 0.25).abs() < 1e-14);
        let total: f64 = b.iter().sum();
        assert!((total - 1.0).abs() < 1e-14);
    }

    #[test]
    fn forward_1d_quadratic_is_nodally_exact() {
        // a ≡ 1, f ≡ 2 → u = x(1-x); P1 with exact load gives exact nodal
        // values, and f·φ_i is P1 so level 0 already integrates it exactly.
        let mesh = mesh1(8);
        let (u, info) = solve_forward(&mesh, 0, 0, |_, _, _| 1.0, |_, _, _| 2.0).unwrap();
        assert_eq!(info, LinearSolve::Dense);
        for (i, p) in mesh.nodes.iter().enumerate() {
            assert!((u.values[i] - p[0] * (1.0 - p[0])).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_2d_sine_has_small_error() {
        let mesh = mesh2(16);
        let f = |x: &[f64]| 2.0 * PI * PI * (PI * x[0]).sin() * (PI * x[1]).sin();
        let (u, info) = solve_forward(&mesh, 1, 2, |_, _, _| 1.0, |_, _, x| f(x)).unwrap();
        assert!(matches!(info, LinearSolve::Pcg { .. }));
        let exact = SmoothFn::new(
            |x| (PI * x[0]).sin() * (PI * x[1]).sin(),
            |x| {
                [
                    PI * (PI * x[0]).cos() * (PI * x[1]).sin(),
                    PI * (PI * x[0]).sin() * (PI * x[1]).cos(),
                ]
            },
        );
        assert!(error_norm(&u, &exact, NormKind::L2, EXACT_LEVEL) < 0.01);
        assert!(error_norm(&u, &exact, NormKind::H1Semi, EXACT_LEVEL) < 0.3);
    }

    #[test]
    fn pcg_matches_dense() {
        let mesh = mesh2(16); // 225 interior unknowns: PCG territory
        let sys = DirichletSystem::assemble(&mesh, 0, |_, _, _| 1.0).unwrap();
        let b: Vec<f64> = (0..sys.matrix.n).map(|i| (i as f64 * 0.37).sin()).collect();
        let xd = solve_spd_dense(&sys.matrix, &b).unwrap();
        let (xp, iters) = solve_spd_pcg(&sys.matrix, &b).unwrap();
        assert!(iters > 0 && iters <= 10 * sys.matrix.n);
        let diff = xd
            .iter()
            .zip(&xp)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-8, "dense vs pcg mismatch {diff}");
    }

    #[test]
    fn hat_function_norms() {
        let mesh = mesh1(2);
        let hat = FemFunction::new(mesh, vec![0.0, 1.0, 0.0]).unwrap();
        assert!((fem_norm(&hat, NormKind::H1Semi, 0) - 2.0).abs() < 1e-13);
        let l2 = fem_norm(&hat, NormKind::L2, EXACT_LEVEL);
        assert!((l2 * l2 - 1.0 / 3.0).abs() < 1e-3);
        assert!(fem_norm(&hat, NormKind::L2Boundary, 0) == 0.0);
    }

    #[test]
    fn field_norms_of_sine() {
        let mesh = mesh1(8);
        let s = SmoothFn::new(|x| (PI * x[0]).sin(), |x| [PI * (PI * x[0]).cos(), 0.0]);
        let l2 = field_norm(&mesh, &s, NormKind::L2, EXACT_LEVEL);
        assert!((l2 - 0.5f64.sqrt()).abs() < 1e-4);
        let h1 = field_norm(&mesh, &s, NormKind::H1Semi, EXACT_LEVEL);
        assert!((h1 - PI / 2.0f64.sqrt()).abs() < 1e-3);
    }

    #[test]
    fn boundary_norm_2d() {
        // ∫_∂Ω x² = 1/3 (bottom) + 1/3 (top) + 0 (left) + 1 (right) = 5/3.
        let mesh = mesh2(4);
        let s = SmoothFn::new(|x| x[0], |_| [1.0, 0.0]);
        let b = field_norm(&mesh, &s, NormKind::L2Boundary, 5);
        assert!((b * b - 5.0 / 3.0).abs() < 1e-4, "got {}", b * b);
    }

    #[test]
    fn fem_boundary_norm_matches_nodal_trace() {
        let mesh = mesh2(4);
        let u = FemFunction::interpolate(&mesh, |x| x[0] + 2.0 * x[1]);
        // trace of a P1 interpolant of an affine function is that function
        let exact: f64 = {
            // ∫_∂Ω (x+2y)²: bottom ∫x² = 1/3; top ∫(x+2)² = 19/3;
            // left ∫(2y)² = 4/3; right ∫(1+2y)² = 13/3 → total 37/3
            37.0 / 3.0
        };
        let b = fem_norm(&u, NormKind::L2Boundary, 4);
        assert!((b * b - exact).abs() < 1e-3, "got {}", b * b);
    }

    #[test]
    fn restrict_scatter_roundtrip() {
        let mesh = mesh2(3);
        let sys = DirichletSystem::assemble(&mesh, 0, |_, _, _| 1.0).unwrap();
        assert_eq!(sys.interior.len(), 4);
        let full: Vec<f64> = (0..mesh.n_nodes()).map(|i| i as f64).collect();
        let red = sys.restrict(&full);
        let back = sys.scatter(&red);
        for &i in &sys.interior {
            assert_eq!(back.values[i], full[i]);
        }
        assert_eq!(back.values[0], 0.0);
    }

    #[test]
    fn interpolation_and_gradients() {
        let mesh = mesh2(2);
        let u = FemFunction::interpolate(&mesh, |x| 1.0 + 2.0 * x[0] - 3.0 * x[1]);
        for k in 0..mesh.n_elements() {
            let g = u.gradient_in(k);
            assert!((g[0] - 2.0).abs() < 1e-13 && (g[1] + 3.0).abs() < 1e-13);
        }
        assert!((u.eval(&[0.3, 0.7]) - (1.0 + 0.6 - 2.1)).abs() < 1e-13);
    }
}
