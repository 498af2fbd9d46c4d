//! Coefficient reconstruction with neural networks. Three couplings, one
//! training loop: a hybrid scheme that pushes a coefficient network through
//! the finite element forward solve, a mixed least-squares scheme with an
//! auxiliary flux network, and a collocation scheme that also learns the
//! state. Every loss has two routes, a generic one over [`ScalarField`] /
//! [`VectorField`] views (used by the tests to inject exact truths) and a
//! hand-differentiated one that backpropagates through the networks.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, numerical, Result};
use crate::fem::{
    assemble_load, physical_point, quadrature, DirichletSystem, FemFunction, QuadratureRule,
    SparseSpd, EXACT_LEVEL,
};
use crate::field::{dot, ScalarField, VectorField};
use crate::mesh::Mesh;
use crate::nn::{parallelize, Adam, Cutoff, Mlp, MlpSpec, Workspace};
use crate::recon_fem::{data_misfit_functional, data_misfit_value};
use crate::synth::{calibration_mesh, mass_matrix, weighted_misfit, NormTag, Observation, Problem};

/// Monte Carlo collocation sample: `n_interior` points uniform on the
/// domain plus `n_boundary` points uniform on its boundary. The boundary
/// stream is seeded independently of the interior one, so changing
/// `n_interior` does not move the boundary sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SamplingPlan {
    pub n_interior: usize,
    pub n_boundary: usize,
    pub seed: u64,
}

const BOUNDARY_STREAM: u64 = 0x9d3f_85b7_02c1_644a;

impl SamplingPlan {
    pub fn new(n_interior: usize, n_boundary: usize, seed: u64) -> Result<Self> {
        if n_interior == 0 || n_boundary == 0 {
            return Err(invalid(
                "sampling plan needs at least one interior and one boundary point",
            ));
        }
        Ok(SamplingPlan {
            n_interior,
            n_boundary,
            seed,
        })
    }

    pub fn interior_points(&self, dim: usize) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_interior)
            .map(|_| {
                let mut x = [0.0; 2];
                for c in x.iter_mut().take(dim) {
                    *c = rng.gen_range(0.0..1.0);
                }
                x
            })
            .collect()
    }

    /// Boundary points with a unit tangent. In 1D the boundary is the two
    /// endpoints under counting measure and the tangent is zero.
    pub fn boundary_points(&self, dim: usize) -> Vec<([f64; 2], [f64; 2])> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ BOUNDARY_STREAM);
        (0..self.n_boundary)
            .map(|_| {
                if dim == 1 {
                    let e = if rng.gen_range(0.0..1.0) < 0.5 {
                        0.0
                    } else {
                        1.0
                    };
                    ([e, 0.0], [0.0, 0.0])
                } else {
                    let t = rng.gen_range(0.0..4.0);
                    if t < 1.0 {
                        ([t, 0.0], [1.0, 0.0])
                    } else if t < 2.0 {
                        ([1.0, t - 1.0], [0.0, 1.0])
                    } else if t < 3.0 {
                        ([3.0 - t, 1.0], [1.0, 0.0])
                    } else {
                        ([0.0, 4.0 - t], [0.0, 1.0])
                    }
                }
            })
            .collect()
    }

    /// Total boundary measure matching [`SamplingPlan::boundary_points`]:
    /// counting measure 2 in 1D, perimeter 4 in 2D.
    pub fn boundary_measure(dim: usize) -> f64 {
        if dim == 1 {
            2.0
        } else {
            4.0
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MixedPenalties {
    /// Weight of the flux-divergence residual.
    pub gamma_sigma: f64,
    /// Weight of the coefficient gradient penalty.
    pub gamma_a: f64,
    /// Weight of the boundary flux mismatch.
    pub gamma_b: f64,
}

impl MixedPenalties {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma_sigma", self.gamma_sigma),
            ("gamma_a", self.gamma_a),
            ("gamma_b", self.gamma_b),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!(
                    "{name} = {v} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PinnPenalties {
    /// Weight of the strong PDE residual.
    pub gamma_d: f64,
    /// Weight of the boundary state mismatch.
    pub gamma_b: f64,
    /// Weight of the coefficient gradient penalty.
    pub gamma_a: f64,
}

impl PinnPenalties {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma_d", self.gamma_d),
            ("gamma_b", self.gamma_b),
            ("gamma_a", self.gamma_a),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!(
                    "{name} = {v} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    AdaptiveMoment,
    PlainGd,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Log cadence in steps; 0 disables logging.
    pub log_every: usize,
    /// Redraw the Monte Carlo sample every step instead of freezing it.
    /// Ignored by the hybrid scheme, whose quadrature is deterministic.
    pub resample: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            learning_rate: 1e-3,
            optimizer: Optimizer::AdaptiveMoment,
            seed: 0,
            log_every: 200,
            resample: false,
        }
    }
}

/// One row of the training log. `terms` are the weighted loss components
/// in scheme order (unused slots zero); they sum to `loss`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub terms: [f64; 4],
    pub grad_norm: f64,
}

/// Scalar view of a single-output network, evaluated through jets.
pub struct NetScalar<'a> {
    net: &'a Mlp,
}

impl<'a> NetScalar<'a> {
    pub fn new(net: &'a Mlp) -> Result<Self> {
        if net.spec.output_dim != 1 {
            return Err(invalid("scalar view needs a single-output network"));
        }
        Ok(NetScalar { net })
    }
}

impl ScalarField for NetScalar<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        self.net.jet(x, 0).scalar()
    }

    fn gradient(&self, x: &[f64]) -> [f64; 2] {
        let g = self.net.jet(x, 1).gradient(0);
        [g[0], g.get(1).copied().unwrap_or(0.0)]
    }

    fn laplacian(&self, x: &[f64]) -> f64 {
        self.net.jet(x, 2).laplacian(0)
    }
}

/// Vector view of a network with one output per input dimension.
pub struct NetVector<'a> {
    net: &'a Mlp,
}

impl<'a> NetVector<'a> {
    pub fn new(net: &'a Mlp) -> Result<Self> {
        if net.spec.output_dim != net.spec.input_dim {
            return Err(invalid("vector view needs one output per input dimension"));
        }
        Ok(NetVector { net })
    }
}

impl VectorField for NetVector<'_> {
    fn value(&self, x: &[f64]) -> [f64; 2] {
        let v = self.net.jet(x, 0).value;
        [v[0], v.get(1).copied().unwrap_or(0.0)]
    }

    fn divergence(&self, x: &[f64]) -> f64 {
        self.net.jet(x, 1).divergence()
    }
}

/// Coefficient network whose initial output sits at the midpoint of the
/// admissible box. A zero-bias initialization would start in the clipped
/// region, where the mask silences every data gradient.
pub fn coeff_net(dim: usize, hidden: &[usize], seed: u64, bounds: &Cutoff) -> Result<Mlp> {
    let mut net = Mlp::new(MlpSpec::new(dim, hidden.to_vec(), 1)?, seed);
    let n = net.params.len();
    net.params[n - 1] = 0.5 * (bounds.lo + bounds.hi);
    Ok(net)
}

/// L2 and stability-weighted errors of the clipped coefficient against the
/// problem truth, integrated with the exact-level rule on `mesh`.
pub fn coefficient_errors(
    a: &dyn ScalarField,
    bounds: &Cutoff,
    problem: &Problem,
    mesh: &Mesh,
) -> (f64, f64) {
    let l2 = quadrature(mesh, EXACT_LEVEL, |_, _, x| {
        let d = bounds.apply(a.value(x)) - problem.a_true.value(x);
        d * d
    })
    .sqrt();
    let a_eval = |x: &[f64]| bounds.apply(a.value(x));
    let weighted = weighted_misfit(&a_eval, problem, mesh, EXACT_LEVEL);
    (l2, weighted)
}

// ---------------------------------------------------------------------------
// hybrid scheme: coefficient network, finite element state

#[derive(Debug, Clone, Serialize)]
pub struct HybridConfig {
    pub gamma: f64,
    pub bounds: Cutoff,
    /// Quadrature level of the stiffness assembly the network is sampled at.
    pub stiffness_level: u32,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl HybridConfig {
    pub fn new(gamma: f64, bounds: Cutoff) -> Result<Self> {
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(invalid(format!(
                "gamma = {gamma} must be finite and nonnegative"
            )));
        }
        Ok(HybridConfig {
            gamma,
            bounds,
            stiffness_level: 0,
            hidden: vec![16, 16],
            train: TrainConfig::default(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct HybridResult {
    pub net: Mlp,
    pub u_h: FemFunction,
    pub history: Vec<TrainLogRow>,
    pub final_loss: f64,
    pub final_terms: [f64; 4],
    pub l2_error: f64,
    pub weighted_error: f64,
}

/// Pieces of the hybrid loss that do not depend on the network.
struct HybridWork<'a> {
    mesh: &'a Arc<Mesh>,
    load: Vec<f64>,
    mass: SparseSpd,
    level: u32,
}

impl<'a> HybridWork<'a> {
    fn new(mesh: &'a Arc<Mesh>, problem: &Problem, level: u32) -> Self {
        let f = problem.f.clone();
        HybridWork {
            mesh,
            load: assemble_load(mesh, EXACT_LEVEL, |_, _, x| f.value(x)),
            mass: mass_matrix(mesh),
            level,
        }
    }

    fn state_of(
        &self,
        mut coeff: impl FnMut(&[f64]) -> f64,
    ) -> Result<(DirichletSystem, FemFunction)> {
        let sys = DirichletSystem::assemble(self.mesh, self.level, |_, _, x| coeff(x))?;
        let (u, _) = sys.solve(&self.load)?;
        Ok((sys, u))
    }

    fn loss_generic(
        &self,
        a: &dyn ScalarField,
        obs: &Observation,
        gamma: f64,
        bounds: &Cutoff,
    ) -> Result<(f64, [f64; 4])> {
        let (_, u) = self.state_of(|x| bounds.apply(a.value(x)))?;
        let misfit = data_misfit_value(self.mesh, &u, obs, &self.mass);
        // the penalty sees the raw network gradient, clipping only enters
        // the assembly
        let pen = quadrature(self.mesh, self.level, |_, _, x| {
            let g = a.gradient(x);
            dot(g, g)
        });
        let terms = [misfit, 0.5 * gamma * pen, 0.0, 0.0];
        Ok((terms[0] + terms[1], terms))
    }

    /// Loss and parameter gradient in one pass: forward solve, adjoint
    /// solve, then one reverse sweep per stiffness quadrature point with
    /// the cotangent of that point's coefficient sample.
    fn loss_grad(
        &self,
        net: &Mlp,
        ws: &mut Workspace,
        obs: &Observation,
        gamma: f64,
        bounds: &Cutoff,
        grad: &mut [f64],
    ) -> Result<(f64, [f64; 4])> {
        assert_eq!(grad.len(), net.n_params());
        let dim = self.mesh.dim;
        let (sys, u) = self.state_of(|x| {
            net.forward(x, 0, ws);
            bounds.apply(ws.value()[0])
        })?;
        let misfit = data_misfit_value(self.mesh, &u, obs, &self.mass);
        let m = data_misfit_functional(self.mesh, &u, obs, &self.mass);
        let (p, _) = sys.solve(&m)?;

        let rule = QuadratureRule::get(dim, self.level);
        let mut pen = 0.0;
        let mut cot_first = [0.0; 2];
        for k in 0..self.mesh.n_elements() {
            let verts = self.mesh.element_vertices(k);
            let vol = self.mesh.element_volume(k);
            let gu = u.gradient_in(k);
            let gp = p.gradient_in(k);
            let sens = dot(gu, gp);
            for q in &rule.points {
                let x = physical_point(&verts, dim, &q.lambda);
                let w = q.weight * vol;
                net.forward(&x[..dim], 1, ws);
                let a_raw = ws.value()[0];
                let mut g2 = 0.0;
                for (i, c) in cot_first.iter_mut().enumerate().take(dim) {
                    let gi = ws.first(i)[0];
                    g2 += gi * gi;
                    *c = gamma * w * gi;
                }
                pen += w * g2;
                let cot_value = [-w * bounds.mask(a_raw) * sens];
                net.backward(ws, &cot_value, &cot_first[..dim], &[], grad);
            }
        }
        let terms = [misfit, 0.5 * gamma * pen, 0.0, 0.0];
        Ok((terms[0] + terms[1], terms))
    }
}

/// Hybrid loss for any coefficient field: the data misfit of the finite
/// element state assembled from the clipped coefficient, plus
/// (gamma/2) times the quadrature of the unclipped squared gradient.
pub fn hybrid_loss(
    a: &dyn ScalarField,
    problem: &Problem,
    obs: &Observation,
    mesh: &Arc<Mesh>,
    gamma: f64,
    bounds: &Cutoff,
    level: u32,
) -> Result<(f64, [f64; 4])> {
    HybridWork::new(mesh, problem, level).loss_generic(a, obs, gamma, bounds)
}

/// Gradient companion of [`hybrid_loss`] for a network coefficient. Returns
/// the loss, its terms and the parameter gradient.
pub fn hybrid_loss_grad(
    net: &Mlp,
    problem: &Problem,
    obs: &Observation,
    mesh: &Arc<Mesh>,
    gamma: f64,
    bounds: &Cutoff,
    level: u32,
) -> Result<(f64, [f64; 4], Vec<f64>)> {
    let work = HybridWork::new(mesh, problem, level);
    let mut ws = Workspace::new(&net.spec);
    let mut grad = vec![0.0; net.n_params()];
    let (loss, terms) = work.loss_grad(net, &mut ws, obs, gamma, bounds, &mut grad)?;
    Ok((loss, terms, grad))
}

/// Finite element state induced by a network coefficient, clipped into the
/// admissible box.
pub fn hybrid_state(
    net: &Mlp,
    problem: &Problem,
    mesh: &Arc<Mesh>,
    bounds: &Cutoff,
    level: u32,
) -> Result<FemFunction> {
    let work = HybridWork::new(mesh, problem, level);
    let mut ws = Workspace::new(&net.spec);
    let (_, u) = work.state_of(|x| {
        net.forward(x, 0, &mut ws);
        bounds.apply(ws.value()[0])
    })?;
    Ok(u)
}

pub fn train_hybrid(
    problem: &Problem,
    obs: &Observation,
    mesh: &Arc<Mesh>,
    cfg: &HybridConfig,
) -> Result<HybridResult> {
    if obs.tag() != NormTag::L2 {
        return Err(invalid(
            "hybrid reconstruction expects an L2-calibrated observation",
        ));
    }
    let mut net = coeff_net(problem.dim, &cfg.hidden, cfg.train.seed, &cfg.bounds)?;
    let mut ws = Workspace::new(&net.spec.clone());
    let work = HybridWork::new(mesh, problem, cfg.stiffness_level);
    let (gamma, bounds) = (cfg.gamma, cfg.bounds);
    let init = net.params.clone();
    let (params, history) = train_custom(init, &cfg.train, |_, p, g| {
        net.params.copy_from_slice(p);
        work.loss_grad(&net, &mut ws, obs, gamma, &bounds, g)
    })?;
    net.params = params;
    let u_h = hybrid_state(&net, problem, mesh, &bounds, cfg.stiffness_level)?;
    let view = NetScalar::new(&net)?;
    let (final_loss, final_terms) = work.loss_generic(&view, obs, gamma, &bounds)?;
    let (l2_error, weighted_error) = coefficient_errors(&view, &bounds, problem, mesh);
    Ok(HybridResult {
        net,
        u_h,
        history,
        final_loss,
        final_terms,
        l2_error,
        weighted_error,
    })
}

// ---------------------------------------------------------------------------
// mixed least squares: coefficient network plus flux network

#[derive(Debug, Clone, Serialize)]
pub struct MixedConfig {
    pub penalties: MixedPenalties,
    pub bounds: Cutoff,
    pub plan: SamplingPlan,
    pub coeff_hidden: Vec<usize>,
    pub flux_hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl MixedConfig {
    pub fn new(penalties: MixedPenalties, bounds: Cutoff, plan: SamplingPlan) -> Result<Self> {
        penalties.validate()?;
        Ok(MixedConfig {
            penalties,
            bounds,
            plan,
            coeff_hidden: vec![16, 16],
            flux_hidden: vec![32, 32],
            train: TrainConfig::default(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct MixedResult {
    pub coeff_net: Mlp,
    pub flux_net: Mlp,
    pub history: Vec<TrainLogRow>,
    pub final_loss: f64,
    pub final_terms: [f64; 4],
    pub l2_error: f64,
    pub weighted_error: f64,
}

/// Flux network with one independent scalar component per dimension,
/// merged into a single block-diagonal network.
pub fn flux_net(dim: usize, hidden: &[usize], seed: u64) -> Result<Mlp> {
    let parts = (0..dim)
        .map(|i| {
            Ok(Mlp::new(
                MlpSpec::new(dim, hidden.to_vec(), 1)?,
                seed.wrapping_add(i as u64),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    parallelize(&parts)
}

fn require_smooth<'a>(obs: &'a Observation, scheme: &str) -> Result<&'a crate::field::SmoothFn> {
    obs.smooth_field().ok_or_else(|| {
        invalid(format!(
            "{scheme} reconstruction needs a smooth observation with pointwise gradients"
        ))
    })
}

/// Mixed least-squares loss over a Monte Carlo sample: flux consistency
/// with the observed gradient, flux divergence against the source,
/// coefficient gradient penalty (unclipped), and a boundary flux mismatch
/// against the known boundary coefficient.
pub fn mixed_loss(
    a: &dyn ScalarField,
    sigma: &dyn VectorField,
    problem: &Problem,
    obs: &Observation,
    plan: &SamplingPlan,
    pen: &MixedPenalties,
    bounds: &Cutoff,
) -> Result<(f64, [f64; 4])> {
    pen.validate()?;
    let z = require_smooth(obs, "mixed")?;
    let dim = problem.dim;
    let (mut e_d, mut e_s, mut e_a, mut e_b) = (0.0, 0.0, 0.0, 0.0);
    for x in plan.interior_points(dim) {
        let x = &x[..dim];
        let sv = sigma.value(x);
        let zg = z.gradient(x);
        let av = bounds.apply(a.value(x));
        let r0 = sv[0] - av * zg[0];
        let r1 = sv[1] - av * zg[1];
        e_d += r0 * r0 + r1 * r1;
        let rs = sigma.divergence(x) + problem.f.value(x);
        e_s += rs * rs;
        let g = a.gradient(x);
        e_a += dot(g, g);
    }
    let n_d = plan.n_interior as f64;
    e_d /= n_d;
    e_s /= n_d;
    e_a /= n_d;
    for (y, _) in plan.boundary_points(dim) {
        let y = &y[..dim];
        let sv = sigma.value(y);
        let zg = z.gradient(y);
        let at = problem.a_true.value(y);
        let r0 = sv[0] - at * zg[0];
        let r1 = sv[1] - at * zg[1];
        e_b += r0 * r0 + r1 * r1;
    }
    e_b *= SamplingPlan::boundary_measure(dim) / plan.n_boundary as f64;
    let terms = [
        e_d,
        pen.gamma_sigma * e_s,
        pen.gamma_a * e_a,
        pen.gamma_b * e_b,
    ];
    Ok((terms.iter().sum(), terms))
}

/// Gradient companion of [`mixed_loss`] for network fields. `grad` is laid
/// out as the coefficient parameters followed by the flux parameters.
pub fn mixed_loss_grad(
    coeff: &Mlp,
    flux: &Mlp,
    problem: &Problem,
    obs: &Observation,
    plan: &SamplingPlan,
    pen: &MixedPenalties,
    bounds: &Cutoff,
    grad: &mut [f64],
) -> Result<(f64, [f64; 4])> {
    pen.validate()?;
    let z = require_smooth(obs, "mixed")?;
    let dim = problem.dim;
    if coeff.spec.input_dim != dim || coeff.spec.output_dim != 1 {
        return Err(invalid(
            "coefficient network must map the domain to a scalar",
        ));
    }
    if flux.spec.input_dim != dim || flux.spec.output_dim != dim {
        return Err(invalid(
            "flux network must map the domain to one output per dimension",
        ));
    }
    let nc = coeff.n_params();
    assert_eq!(grad.len(), nc + flux.n_params());
    let (grad_a, grad_s) = grad.split_at_mut(nc);
    let mut ws_a = Workspace::new(&coeff.spec);
    let mut ws_s = Workspace::new(&flux.spec);

    let (mut e_d, mut e_s, mut e_a, mut e_b) = (0.0, 0.0, 0.0, 0.0);
    let c_d = 2.0 / plan.n_interior as f64;
    let mut cot_s = [0.0; 2];
    let mut cot_s_first = [0.0; 4];
    let mut cot_a_first = [0.0; 2];
    for x in plan.interior_points(dim) {
        let x = &x[..dim];
        coeff.forward(x, 1, &mut ws_a);
        let a_raw = ws_a.value()[0];
        let mask = bounds.mask(a_raw);
        let av = bounds.apply(a_raw);
        let mut ga = [0.0; 2];
        for (i, g) in ga.iter_mut().enumerate().take(dim) {
            *g = ws_a.first(i)[0];
        }
        flux.forward(x, 1, &mut ws_s);
        let mut sv = [0.0; 2];
        sv[..dim].copy_from_slice(&ws_s.value()[..dim]);
        let div: f64 = (0..dim).map(|i| ws_s.first(i)[i]).sum();

        let zg = z.gradient(x);
        let r = [sv[0] - av * zg[0], sv[1] - av * zg[1]];
        let rs = div + problem.f.value(x);
        e_d += dot(r, r);
        e_s += rs * rs;
        e_a += dot(ga, ga);

        for j in 0..dim {
            cot_s[j] = c_d * r[j];
        }
        for i in 0..dim {
            for j in 0..dim {
                cot_s_first[i * dim + j] = if i == j {
                    pen.gamma_sigma * c_d * rs
                } else {
                    0.0
                };
            }
        }
        flux.backward(
            &mut ws_s,
            &cot_s[..dim],
            &cot_s_first[..dim * dim],
            &[],
            grad_s,
        );

        let cot_a = [-c_d * mask * (r[0] * zg[0] + r[1] * zg[1])];
        for (i, c) in cot_a_first.iter_mut().enumerate().take(dim) {
            *c = pen.gamma_a * c_d * ga[i];
        }
        coeff.backward(&mut ws_a, &cot_a, &cot_a_first[..dim], &[], grad_a);
    }
    e_d /= plan.n_interior as f64;
    e_s /= plan.n_interior as f64;
    e_a /= plan.n_interior as f64;

    let bw = SamplingPlan::boundary_measure(dim) / plan.n_boundary as f64;
    for (y, _) in plan.boundary_points(dim) {
        let y = &y[..dim];
        flux.forward(y, 0, &mut ws_s);
        let mut sv = [0.0; 2];
        sv[..dim].copy_from_slice(&ws_s.value()[..dim]);
        let zg = z.gradient(y);
        let at = problem.a_true.value(y);
        let r = [sv[0] - at * zg[0], sv[1] - at * zg[1]];
        e_b += dot(r, r);
        for j in 0..dim {
            cot_s[j] = pen.gamma_b * 2.0 * bw * r[j];
        }
        flux.backward(&mut ws_s, &cot_s[..dim], &[], &[], grad_s);
    }
    e_b *= bw;
    let terms = [
        e_d,
        pen.gamma_sigma * e_s,
        pen.gamma_a * e_a,
        pen.gamma_b * e_b,
    ];
    Ok((terms.iter().sum(), terms))
}

pub fn train_mixed(problem: &Problem, obs: &Observation, cfg: &MixedConfig) -> Result<MixedResult> {
    require_smooth(obs, "mixed")?;
    let dim = problem.dim;
    let mut coeff = coeff_net(dim, &cfg.coeff_hidden, cfg.train.seed, &cfg.bounds)?;
    let mut flux = flux_net(dim, &cfg.flux_hidden, cfg.train.seed.wrapping_add(1))?;
    let nc = coeff.n_params();
    let init = [coeff.params.clone(), flux.params.clone()].concat();
    let (pen, bounds) = (cfg.penalties, cfg.bounds);
    let (params, history) = train_custom(init, &cfg.train, |step, p, g| {
        let plan = step_plan(&cfg.plan, cfg.train.resample, step);
        coeff.params.copy_from_slice(&p[..nc]);
        flux.params.copy_from_slice(&p[nc..]);
        mixed_loss_grad(&coeff, &flux, problem, obs, &plan, &pen, &bounds, g)
    })?;
    coeff.params.copy_from_slice(&params[..nc]);
    flux.params.copy_from_slice(&params[nc..]);
    let cal = calibration_mesh(dim);
    let a_view = NetScalar::new(&coeff)?;
    let (final_loss, final_terms) = mixed_loss(
        &a_view,
        &NetVector::new(&flux)?,
        problem,
        obs,
        &cfg.plan,
        &pen,
        &bounds,
    )?;
    let (l2_error, weighted_error) = coefficient_errors(&a_view, &bounds, problem, &cal);
    Ok(MixedResult {
        coeff_net: coeff,
        flux_net: flux,
        history,
        final_loss,
        final_terms,
        l2_error,
        weighted_error,
    })
}

// ---------------------------------------------------------------------------
// collocation scheme: coefficient network plus state network

#[derive(Debug, Clone, Serialize)]
pub struct PinnConfig {
    pub penalties: PinnPenalties,
    pub bounds: Cutoff,
    pub plan: SamplingPlan,
    pub coeff_hidden: Vec<usize>,
    pub state_hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl PinnConfig {
    pub fn new(penalties: PinnPenalties, bounds: Cutoff, plan: SamplingPlan) -> Result<Self> {
        penalties.validate()?;
        Ok(PinnConfig {
            penalties,
            bounds,
            plan,
            coeff_hidden: vec![16, 16],
            state_hidden: vec![32, 32],
            train: TrainConfig::default(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct PinnResult {
    pub coeff_net: Mlp,
    pub state_net: Mlp,
    pub history: Vec<TrainLogRow>,
    pub final_loss: f64,
    pub final_terms: [f64; 4],
    pub l2_error: f64,
    pub weighted_error: f64,
}

/// Collocation loss over a Monte Carlo sample: state misfit in value and
/// gradient, strong residual of the clipped-coefficient PDE, boundary
/// state in value and tangential derivative, and the masked coefficient
/// gradient penalty. The state field must provide a laplacian.
pub fn pinn_loss(
    a: &dyn ScalarField,
    u: &dyn ScalarField,
    problem: &Problem,
    obs: &Observation,
    plan: &SamplingPlan,
    pen: &PinnPenalties,
    bounds: &Cutoff,
) -> Result<(f64, [f64; 4])> {
    pen.validate()?;
    let z = require_smooth(obs, "collocation")?;
    let dim = problem.dim;
    let (mut e_u, mut e_d, mut e_b, mut e_a) = (0.0, 0.0, 0.0, 0.0);
    for x in plan.interior_points(dim) {
        let x = &x[..dim];
        let uv = u.value(x);
        let ug = u.gradient(x);
        let ul = u.laplacian(x);
        let a_raw = a.value(x);
        let ag = a.gradient(x);
        let mask = bounds.mask(a_raw);
        let zv = z.value(x);
        let zg = z.gradient(x);
        let dv = uv - zv;
        let dg = [ug[0] - zg[0], ug[1] - zg[1]];
        e_u += dv * dv + dot(dg, dg);
        // residual of div(clip(a) grad u) + f with the chain rule applied
        // to the clip
        let r = mask * dot(ag, ug) + bounds.apply(a_raw) * ul + problem.f.value(x);
        e_d += r * r;
        e_a += mask * dot(ag, ag);
    }
    let n_d = plan.n_interior as f64;
    e_u /= n_d;
    e_d /= n_d;
    e_a /= n_d;
    for (y, t) in plan.boundary_points(dim) {
        let y = &y[..dim];
        let uv = u.value(y);
        let tg = dot(t, u.gradient(y));
        e_b += uv * uv + tg * tg;
    }
    e_b *= SamplingPlan::boundary_measure(dim) / plan.n_boundary as f64;
    let terms = [e_u, pen.gamma_d * e_d, pen.gamma_b * e_b, pen.gamma_a * e_a];
    Ok((terms.iter().sum(), terms))
}

/// Gradient companion of [`pinn_loss`] for network fields. `grad` is laid
/// out as the coefficient parameters followed by the state parameters.
pub fn pinn_loss_grad(
    coeff: &Mlp,
    state: &Mlp,
    problem: &Problem,
    obs: &Observation,
    plan: &SamplingPlan,
    pen: &PinnPenalties,
    bounds: &Cutoff,
    grad: &mut [f64],
) -> Result<(f64, [f64; 4])> {
    pen.validate()?;
    let z = require_smooth(obs, "collocation")?;
    let dim = problem.dim;
    if coeff.spec.input_dim != dim || coeff.spec.output_dim != 1 {
        return Err(invalid(
            "coefficient network must map the domain to a scalar",
        ));
    }
    if state.spec.input_dim != dim || state.spec.output_dim != 1 {
        return Err(invalid("state network must map the domain to a scalar"));
    }
    let nc = coeff.n_params();
    assert_eq!(grad.len(), nc + state.n_params());
    let (grad_a, grad_u) = grad.split_at_mut(nc);
    let mut ws_a = Workspace::new(&coeff.spec);
    let mut ws_u = Workspace::new(&state.spec);

    let (mut e_u, mut e_d, mut e_b, mut e_a) = (0.0, 0.0, 0.0, 0.0);
    let c_d = 2.0 / plan.n_interior as f64;
    let mut cot_u_first = [0.0; 2];
    let mut cot_u_second = [0.0; 2];
    let mut cot_a_first = [0.0; 2];
    for x in plan.interior_points(dim) {
        let x = &x[..dim];
        state.forward(x, 2, &mut ws_u);
        let uv = ws_u.value()[0];
        let mut ug = [0.0; 2];
        let mut ul = 0.0;
        for (i, g) in ug.iter_mut().enumerate().take(dim) {
            *g = ws_u.first(i)[0];
            ul += ws_u.second(i)[0];
        }
        coeff.forward(x, 1, &mut ws_a);
        let a_raw = ws_a.value()[0];
        let mask = bounds.mask(a_raw);
        let av = bounds.apply(a_raw);
        let mut ag = [0.0; 2];
        for (i, g) in ag.iter_mut().enumerate().take(dim) {
            *g = ws_a.first(i)[0];
        }

        let zv = z.value(x);
        let zg = z.gradient(x);
        let dv = uv - zv;
        let dg = [ug[0] - zg[0], ug[1] - zg[1]];
        let r = mask * dot(ag, ug) + av * ul + problem.f.value(x);
        e_u += dv * dv + dot(dg, dg);
        e_d += r * r;
        e_a += mask * dot(ag, ag);

        let cot_u = [c_d * dv];
        for i in 0..dim {
            cot_u_first[i] = c_d * dg[i] + pen.gamma_d * c_d * r * mask * ag[i];
            cot_u_second[i] = pen.gamma_d * c_d * r * av;
        }
        state.backward(
            &mut ws_u,
            &cot_u,
            &cot_u_first[..dim],
            &cot_u_second[..dim],
            grad_u,
        );

        let cot_a = [pen.gamma_d * c_d * r * mask * ul];
        for i in 0..dim {
            cot_a_first[i] =
                pen.gamma_d * c_d * r * mask * ug[i] + pen.gamma_a * c_d * mask * ag[i];
        }
        coeff.backward(&mut ws_a, &cot_a, &cot_a_first[..dim], &[], grad_a);
    }
    let n_d = plan.n_interior as f64;
    e_u /= n_d;
    e_d /= n_d;
    e_a /= n_d;

    let bw = SamplingPlan::boundary_measure(dim) / plan.n_boundary as f64;
    for (y, t) in plan.boundary_points(dim) {
        let y = &y[..dim];
        state.forward(y, 1, &mut ws_u);
        let uv = ws_u.value()[0];
        let mut ug = [0.0; 2];
        for (i, g) in ug.iter_mut().enumerate().take(dim) {
            *g = ws_u.first(i)[0];
        }
        let tg = dot(t, ug);
        e_b += uv * uv + tg * tg;
        let cot_u = [pen.gamma_b * 2.0 * bw * uv];
        for i in 0..dim {
            cot_u_first[i] = pen.gamma_b * 2.0 * bw * tg * t[i];
        }
        state.backward(&mut ws_u, &cot_u, &cot_u_first[..dim], &[], grad_u);
    }
    e_b *= bw;
    let terms = [e_u, pen.gamma_d * e_d, pen.gamma_b * e_b, pen.gamma_a * e_a];
    Ok((terms.iter().sum(), terms))
}

pub fn train_pinn(problem: &Problem, obs: &Observation, cfg: &PinnConfig) -> Result<PinnResult> {
    require_smooth(obs, "collocation")?;
    let dim = problem.dim;
    let mut coeff = coeff_net(dim, &cfg.coeff_hidden, cfg.train.seed, &cfg.bounds)?;
    let mut state = Mlp::new(
        MlpSpec::new(dim, cfg.state_hidden.clone(), 1)?,
        cfg.train.seed.wrapping_add(1),
    );
    let nc = coeff.n_params();
    let init = [coeff.params.clone(), state.params.clone()].concat();
    let (pen, bounds) = (cfg.penalties, cfg.bounds);
    let (params, history) = train_custom(init, &cfg.train, |step, p, g| {
        let plan = step_plan(&cfg.plan, cfg.train.resample, step);
        coeff.params.copy_from_slice(&p[..nc]);
        state.params.copy_from_slice(&p[nc..]);
        pinn_loss_grad(&coeff, &state, problem, obs, &plan, &pen, &bounds, g)
    })?;
    coeff.params.copy_from_slice(&params[..nc]);
    state.params.copy_from_slice(&params[nc..]);
    let cal = calibration_mesh(dim);
    let a_view = NetScalar::new(&coeff)?;
    let (final_loss, final_terms) = pinn_loss(
        &a_view,
        &NetScalar::new(&state)?,
        problem,
        obs,
        &cfg.plan,
        &pen,
        &bounds,
    )?;
    let (l2_error, weighted_error) = coefficient_errors(&a_view, &bounds, problem, &cal);
    Ok(PinnResult {
        coeff_net: coeff,
        state_net: state,
        history,
        final_loss,
        final_terms,
        l2_error,
        weighted_error,
    })
}

// ---------------------------------------------------------------------------
// shared training loop

/// Sample for a given step: the base plan when frozen, a reseeded copy
/// every step when resampling.
fn step_plan(base: &SamplingPlan, resample: bool, step: usize) -> SamplingPlan {
    if resample && step > 0 {
        SamplingPlan {
            seed: base
                .seed
                .wrapping_add((step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            ..*base
        }
    } else {
        *base
    }
}

/// First-order training over a flat parameter vector. The closure receives
/// (step, params, grad out) and returns the loss with its term breakdown;
/// a non-finite loss or gradient aborts with an error naming the step.
pub fn train_custom(
    init: Vec<f64>,
    cfg: &TrainConfig,
    mut loss_grad: impl FnMut(usize, &[f64], &mut [f64]) -> Result<(f64, [f64; 4])>,
) -> Result<(Vec<f64>, Vec<TrainLogRow>)> {
    if !(cfg.learning_rate >= 0.0) || !cfg.learning_rate.is_finite() {
        return Err(invalid(format!(
            "learning rate {} must be finite and nonnegative",
            cfg.learning_rate
        )));
    }
    let n = init.len();
    let mut params = init;
    let mut grad = vec![0.0; n];
    let mut adam = match cfg.optimizer {
        Optimizer::AdaptiveMoment => Some(Adam::new(n, cfg.learning_rate)),
        Optimizer::PlainGd => None,
    };
    let mut history = Vec::new();
    for step in 0..cfg.steps {
        grad.fill(0.0);
        let (loss, terms) = loss_grad(step, &params, &mut grad)?;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(numerical(format!(
                "training diverged at step {step}: loss {loss}, gradient norm {grad_norm}"
            )));
        }
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            history.push(TrainLogRow {
                step,
                loss,
                terms,
                grad_norm,
            });
        }
        match &mut adam {
            Some(opt) => opt.step(&mut params, &grad),
            None => {
                for (p, g) in params.iter_mut().zip(&grad) {
                    *p -= cfg.learning_rate * g;
                }
            }
        }
    }
    Ok((params, history))
}
