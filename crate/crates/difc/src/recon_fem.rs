//! Tikhonov reconstruction of the diffusion coefficient with piecewise
//! linear elements for both state and coefficient: minimize
//! ½‖u_h(a_h)−z^δ‖² + (γ/2)‖∇a_h‖² over nodal values confined to the
//! admissible box, by projected gradient with adjoint derivatives.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::fem::{
    assemble_load, error_norm, quadrature, DirichletSystem, FemFunction, NormKind, SparseSpd,
    EXACT_LEVEL,
};
use crate::field::ScalarField;
use crate::mesh::Mesh;
use crate::nn::Cutoff;
use crate::synth::{mass_matrix, weighted_misfit, NormTag, Observation, Problem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "rule", content = "step")]
pub enum StepRule {
    /// Fixed step size; no descent guarantee.
    Fixed(f64),
    /// Barzilai-Borwein step with Armijo backtracking (c = 1e-4, halving).
    BarzilaiBorweinWithArmijo,
}

#[derive(Debug, Clone, Serialize)]
pub struct FemReconConfig {
    pub gamma: f64,
    pub bounds: Cutoff,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_rule: StepRule,
    pub seed: u64,
}

impl FemReconConfig {
    pub fn new(gamma: f64, bounds: Cutoff) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(invalid("gamma must be positive"));
        }
        Ok(FemReconConfig {
            gamma,
            bounds,
            max_iters: 2000,
            grad_tol: 1e-8,
            step_rule: StepRule::BarzilaiBorweinWithArmijo,
            seed: 0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ReconResult {
    pub a_h: FemFunction,
    pub u_h: FemFunction,
    pub loss_history: Vec<f64>,
    pub l2_error: f64,
    pub weighted_error: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Precomputed pieces that do not depend on the coefficient iterate.
struct ReconWork<'a> {
    mesh: &'a Arc<Mesh>,
    load: Vec<f64>,
    unit_k: SparseSpd,
    mass: SparseSpd,
}

impl<'a> ReconWork<'a> {
    fn new(mesh: &'a Arc<Mesh>, problem: &Problem) -> Self {
        let f = &problem.f;
        ReconWork {
            mesh,
            load: assemble_load(mesh, EXACT_LEVEL, |_, _, x| f.value(x)),
            unit_k: crate::fem::unit_stiffness(mesh),
            mass: mass_matrix(mesh),
        }
    }

    fn forward(&self, a: &FemFunction) -> Result<(DirichletSystem, FemFunction)> {
        // level 0 integrates a P1 coefficient exactly against the constant
        // shape gradients, so the assembly (and hence the adjoint gradient)
        // is free of quadrature error
        let sys = DirichletSystem::assemble(self.mesh, 0, |k, l, _| a.value_in(k, l))?;
        let (u, _) = sys.solve(&self.load)?;
        Ok((sys, u))
    }

    fn loss_of(&self, a: &FemFunction, obs: &Observation, gamma: f64) -> Result<f64> {
        let (_, u) = self.forward(a)?;
        Ok(data_misfit_value(self.mesh, &u, obs, &self.mass)
            + 0.5 * gamma * self.unit_k.quad_form(&a.values))
    }

    /// Loss, gradient and state in one pass (one forward and one adjoint
    /// solve). The data component at node i is −∫ φ_i ∇u_h·∇p_h, which is
    /// exact for elementwise-constant gradients.
    fn loss_grad(
        &self,
        a: &FemFunction,
        obs: &Observation,
        gamma: f64,
    ) -> Result<(f64, Vec<f64>, FemFunction)> {
        let (sys, u) = self.forward(a)?;
        let loss = data_misfit_value(self.mesh, &u, obs, &self.mass)
            + 0.5 * gamma * self.unit_k.quad_form(&a.values);
        let m = data_misfit_functional(self.mesh, &u, obs, &self.mass);
        let (p, _) = sys.solve(&m)?;
        let mesh = self.mesh;
        let mut grad = self.unit_k.apply(&a.values);
        for g in &mut grad {
            *g *= gamma;
        }
        let share = 1.0 / (mesh.dim + 1) as f64;
        for k in 0..mesh.n_elements() {
            let gu = u.gradient_in(k);
            let gp = p.gradient_in(k);
            let dot = gu[0] * gp[0] + gu[1] * gp[1];
            let w = mesh.element_volume(k) * share * dot;
            for &i in mesh.element(k) {
                grad[i] -= w;
            }
        }
        Ok((loss, grad, u))
    }
}

/// ½‖u − z^δ‖² with the quadrature matched to the observation kind: exact
/// mass-matrix form for nodal data, composite vertex rule at `EXACT_LEVEL`
/// for smooth data.
pub fn data_misfit_value(
    mesh: &Arc<Mesh>,
    u: &FemFunction,
    obs: &Observation,
    mass: &SparseSpd,
) -> f64 {
    match obs {
        Observation::Smooth { field, .. } => {
            0.5 * quadrature(mesh, EXACT_LEVEL, |k, l, x| {
                let r = u.value_in(k, l) - field.value(x);
                r * r
            })
        }
        Observation::Nodal { values, .. } => {
            let d: Vec<f64> = u
                .values
                .iter()
                .zip(&values.values)
                .map(|(a, b)| a - b)
                .collect();
            0.5 * mass.quad_form(&d)
        }
    }
}

/// Full-space vector m with m_j = ∫ (u − z^δ) φ_j, using the same quadrature
/// as `data_misfit_value` so adjoint gradients are exact derivatives of the
/// discrete loss.
pub fn data_misfit_functional(
    mesh: &Arc<Mesh>,
    u: &FemFunction,
    obs: &Observation,
    mass: &SparseSpd,
) -> Vec<f64> {
    match obs {
        Observation::Smooth { field, .. } => assemble_load(mesh, EXACT_LEVEL, |k, l, x| {
            u.value_in(k, l) - field.value(x)
        }),
        Observation::Nodal { values, .. } => {
            let d: Vec<f64> = u
                .values
                .iter()
                .zip(&values.values)
                .map(|(a, b)| a - b)
                .collect();
            mass.apply(&d)
        }
    }
}

/// Tikhonov loss ½‖u_h(a_h)−z^δ‖²_{L²} + (γ/2)‖∇a_h‖²_{L²}.
pub fn fem_loss(
    a_h: &FemFunction,
    problem: &Problem,
    obs: &Observation,
    gamma: f64,
) -> Result<f64> {
    ReconWork::new(&a_h.mesh.clone(), problem).loss_of(a_h, obs, gamma)
}

/// Gradient of `fem_loss` with respect to the nodal values of a_h, via the
/// adjoint solve (a_h∇p,∇φ) = (u_h−z^δ, φ).
pub fn fem_adjoint_gradient(
    a_h: &FemFunction,
    problem: &Problem,
    obs: &Observation,
    gamma: f64,
) -> Result<Vec<f64>> {
    let (_, grad, _) = ReconWork::new(&a_h.mesh.clone(), problem).loss_grad(a_h, obs, gamma)?;
    Ok(grad)
}

fn clip_to(values: &[f64], bounds: &Cutoff) -> Vec<f64> {
    values
        .iter()
        .map(|&v| v.clamp(bounds.lo, bounds.hi))
        .collect()
}

/// Sup-norm of a − P(a − g), the unit-step projected-gradient residual.
fn pg_residual(a: &[f64], g: &[f64], bounds: &Cutoff) -> f64 {
    a.iter()
        .zip(g)
        .map(|(&ai, &gi)| (ai - (ai - gi).clamp(bounds.lo, bounds.hi)).abs())
        .fold(0.0, f64::max)
}

/// Projected-gradient minimization of the Tikhonov functional from the
/// midpoint constant. Optimizer stalls are reported through
/// `converged = false`, never as errors.
pub fn reconstruct_fem(
    problem: &Problem,
    obs: &Observation,
    mesh: &Arc<Mesh>,
    config: &FemReconConfig,
) -> Result<ReconResult> {
    if obs.tag() != NormTag::L2 {
        return Err(invalid(
            "fem reconstruction expects an L2-calibrated observation",
        ));
    }
    if !(config.gamma > 0.0) || !(config.grad_tol > 0.0) {
        return Err(invalid("gamma and grad_tol must be positive"));
    }
    let work = ReconWork::new(mesh, problem);
    let bounds = &config.bounds;
    let mid = 0.5 * (bounds.lo + bounds.hi);
    let mut a = FemFunction::new(mesh.clone(), vec![mid; mesh.n_nodes()])?;
    let (mut loss, mut grad, mut u) = work.loss_grad(&a, obs, config.gamma)?;
    let mut history = vec![loss];
    let mut converged = false;
    let mut iterations = 0;
    // previous accepted iterate and gradient, for the BB step
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;

    for _ in 0..config.max_iters {
        if pg_residual(&a.values, &grad, bounds) < config.grad_tol {
            converged = true;
            break;
        }
        let fallback = 0.1 * (bounds.hi - bounds.lo)
            / grad.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-30);
        let mut step = match config.step_rule {
            StepRule::Fixed(s) => s,
            StepRule::BarzilaiBorweinWithArmijo => match &prev {
                Some((pa, pg)) => {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for i in 0..a.values.len() {
                        let da = a.values[i] - pa[i];
                        let dg = grad[i] - pg[i];
                        num += da * da;
                        den += da * dg;
                    }
                    if den > 0.0 && num > 0.0 {
                        (num / den).min(1e12)
                    } else {
                        fallback
                    }
                }
                None => fallback,
            },
        };

        let accepted = loop {
            let trial = clip_to(
                &a.values
                    .iter()
                    .zip(&grad)
                    .map(|(&ai, &gi)| ai - step * gi)
                    .collect::<Vec<_>>(),
                bounds,
            );
            let trial_fn = FemFunction::new(mesh.clone(), trial)?;
            let trial_loss = work.loss_of(&trial_fn, obs, config.gamma)?;
            match config.step_rule {
                StepRule::Fixed(_) => break Some((trial_fn, trial_loss)),
                StepRule::BarzilaiBorweinWithArmijo => {
                    let decrease: f64 = trial_fn
                        .values
                        .iter()
                        .zip(&a.values)
                        .zip(&grad)
                        .map(|((&t, &ai), &gi)| gi * (t - ai))
                        .sum();
                    if trial_loss <= loss + 1e-4 * decrease {
                        break Some((trial_fn, trial_loss));
                    }
                    step *= 0.5;
                    if step < 1e-16 * fallback.max(1.0) {
                        break None;
                    }
                }
            }
        };

        let Some((a_next, loss_next)) = accepted else {
            break; // backtracking stalled; report converged = false
        };
        prev = Some((a.values.clone(), grad.clone()));
        a = a_next;
        let (l, g, unew) = work.loss_grad(&a, obs, config.gamma)?;
        debug_assert!((l - loss_next).abs() <= 1e-12 * (1.0 + l.abs()));
        loss = l;
        grad = g;
        u = unew;
        history.push(loss);
        iterations += 1;
    }
    if !converged && pg_residual(&a.values, &grad, bounds) < config.grad_tol {
        converged = true;
    }

    let a_true = &problem.a_true;
    let l2_error = error_norm(&a, a_true, NormKind::L2, EXACT_LEVEL);
    let a_eval = |x: &[f64]| a.eval(x);
    let weighted_error = weighted_misfit(&a_eval, problem, mesh, EXACT_LEVEL);
    Ok(ReconResult {
        a_h: a,
        u_h: u,
        loss_history: history,
        l2_error,
        weighted_error,
        iterations,
        converged,
    })
}
