//! Convergence-study harness: couples the discretization parameters to the
//! noise level, sweeps (delta, seed) cells in a work pool, and fits
//! empirical power-law rates through the per-delta medians.

use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::lmm::{
    lmm_coefficients, recover_with_default_seeds, reference_trajectory, LmmFamily, LmmScheme,
};
use crate::mesh::build_uniform_mesh;
use crate::recon_fem::{reconstruct_fem, FemReconConfig};
use crate::recon_nn::{
    train_hybrid, train_mixed, train_pinn, HybridConfig, MixedConfig, MixedPenalties, PinnConfig,
    PinnPenalties, SamplingPlan, TrainConfig,
};
use crate::synth::{make_observation, pc_beta_check, problem, NoiseMode, NormTag, Problem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Fem,
    Hybrid,
    Mixed,
    Pinn,
    Lmm,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Fem => "fem",
            Scheme::Hybrid => "hybrid",
            Scheme::Mixed => "mixed",
            Scheme::Pinn => "pinn",
            Scheme::Lmm => "lmm",
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fem" => Ok(Scheme::Fem),
            "hybrid" => Ok(Scheme::Hybrid),
            "mixed" => Ok(Scheme::Mixed),
            "pinn" => Ok(Scheme::Pinn),
            "lmm" => Ok(Scheme::Lmm),
            other => Err(invalid(format!(
                "unknown scheme '{other}' (expected fem, hybrid, mixed, pinn or lmm)"
            ))),
        }
    }
}

/// How each cell's discretization follows the noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum Coupling {
    /// h = c_h sqrt(delta) snapped to a dyadic mesh, gamma = c_gamma delta^2.
    DeltaRule { c_h: f64, c_gamma: f64 },
    /// The same mesh and penalty weight for every delta.
    Manual { cells: usize, gamma: f64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyPlan {
    /// Registry id of the problem; for the lmm scheme this instead names
    /// the multistep method, e.g. "ab2" or "bdf3".
    pub problem_id: String,
    pub scheme: Scheme,
    /// Strictly decreasing positive noise levels; the lmm scheme reads it
    /// as a step-size grid.
    pub delta_grid: Vec<f64>,
    pub coupling: Coupling,
    /// How many of `seeds` each delta cell runs.
    pub trials_per_cell: usize,
    pub seeds: Vec<u64>,
    /// Training overrides for the network schemes; the per-cell seed always
    /// replaces the seed given here.
    pub train: Option<TrainConfig>,
    /// Collocation sample sizes for the mesh-free schemes; the per-cell
    /// seed always replaces the seed given here.
    pub sampling: Option<SamplingPlan>,
    /// Full penalty override for the mixed scheme; by default the coupled
    /// gamma weighs the coefficient penalty and the other weights are 1.
    pub mixed_penalties: Option<MixedPenalties>,
    /// Same for the collocation scheme.
    pub pinn_penalties: Option<PinnPenalties>,
}

impl StudyPlan {
    pub fn new(problem_id: &str, scheme: Scheme, delta_grid: Vec<f64>) -> Self {
        StudyPlan {
            problem_id: problem_id.to_string(),
            scheme,
            delta_grid,
            coupling: Coupling::DeltaRule {
                c_h: 1.0,
                c_gamma: 1.0,
            },
            trials_per_cell: 3,
            seeds: vec![0, 1, 2],
            train: None,
            sampling: None,
            mixed_penalties: None,
            pinn_penalties: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta_grid.is_empty() {
            return Err(invalid("delta grid must not be empty"));
        }
        for w in self.delta_grid.windows(2) {
            if !(w[1] < w[0]) {
                return Err(invalid("delta grid must be strictly decreasing"));
            }
        }
        if !self.delta_grid.iter().all(|&d| d > 0.0 && d.is_finite()) {
            return Err(invalid("delta grid entries must be positive and finite"));
        }
        if self.trials_per_cell == 0 {
            return Err(invalid("trials per cell must be at least 1"));
        }
        if self.seeds.len() < self.trials_per_cell {
            return Err(invalid(format!(
                "{} trials per cell need at least as many seeds, got {}",
                self.trials_per_cell,
                self.seeds.len()
            )));
        }
        if let Coupling::Manual { cells, gamma } = self.coupling {
            if cells < 2 {
                return Err(invalid("manual coupling needs at least 2 cells per side"));
            }
            if !(gamma >= 0.0) || !gamma.is_finite() {
                return Err(invalid("manual gamma must be finite and nonnegative"));
            }
        }
        match self.scheme {
            Scheme::Lmm => {
                parse_method(&self.problem_id)?;
            }
            _ => {
                problem(&self.problem_id)?;
            }
        }
        Ok(())
    }
}

/// Multistep method id of the form family + order, e.g. "ab2", "am3",
/// "bdf4", or "adams-bashforth-2".
pub fn parse_method(id: &str) -> Result<LmmScheme> {
    let trimmed = id.trim();
    let split = trimmed
        .rfind(|c: char| !c.is_ascii_digit())
        .map(|i| i + 1)
        .unwrap_or(0);
    let (name, digits) = trimmed.split_at(split);
    let m: usize = digits
        .parse()
        .map_err(|_| invalid(format!("method id '{trimmed}' must end in the step count")))?;
    let family: LmmFamily = name.trim_end_matches('-').parse()?;
    lmm_coefficients(family, m)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ParameterChoice {
    /// The unsnapped width c_h sqrt(delta).
    pub h_requested: f64,
    /// Snapped dyadic width 1/cells.
    pub h: f64,
    pub cells: usize,
    pub gamma: f64,
}

/// Noise-coupled discretization: h tracks sqrt(delta) snapped to the
/// nearest dyadic mesh with at least 4 cells per side (and at most 1024,
/// the desk-scale guard), gamma tracks delta squared.
pub fn parameter_choice(delta: f64, c_h: f64, c_gamma: f64) -> Result<ParameterChoice> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(invalid(format!(
            "delta = {delta} must be positive and finite"
        )));
    }
    if !(c_h > 0.0) || !(c_gamma > 0.0) {
        return Err(invalid("coupling constants must be positive"));
    }
    let h_requested = c_h * delta.sqrt();
    let k = (1.0 / h_requested).log2().round().clamp(2.0, 10.0) as u32;
    let cells = 1usize << k;
    Ok(ParameterChoice {
        h_requested,
        h: 1.0 / cells as f64,
        cells,
        gamma: c_gamma * delta * delta,
    })
}

impl Coupling {
    pub fn resolve(&self, delta: f64) -> Result<ParameterChoice> {
        match *self {
            Coupling::DeltaRule { c_h, c_gamma } => parameter_choice(delta, c_h, c_gamma),
            Coupling::Manual { cells, gamma } => {
                let h = 1.0 / cells as f64;
                Ok(ParameterChoice {
                    h_requested: h,
                    h,
                    cells,
                    gamma,
                })
            }
        }
    }
}

/// One study cell. Failed cells keep their message in `error` and NaN
/// error fields; summaries skip them.
#[derive(Debug, Clone, Serialize)]
pub struct RateRecord {
    pub delta: f64,
    pub seed: u64,
    pub h_requested: f64,
    pub h: f64,
    pub gamma: f64,
    pub l2_error: f64,
    pub weighted_error: f64,
    pub loss_final: f64,
    pub converged: bool,
    pub runtime_seconds: f64,
    pub error: Option<String>,
}

fn failed_record(
    delta: f64,
    seed: u64,
    pc: Option<ParameterChoice>,
    msg: String,
    started: Instant,
) -> RateRecord {
    let (h_requested, h, gamma) = match pc {
        Some(p) => (p.h_requested, p.h, p.gamma),
        None => (f64::NAN, f64::NAN, f64::NAN),
    };
    RateRecord {
        delta,
        seed,
        h_requested,
        h,
        gamma,
        l2_error: f64::NAN,
        weighted_error: f64::NAN,
        loss_final: f64::NAN,
        converged: false,
        runtime_seconds: started.elapsed().as_secs_f64(),
        error: Some(msg),
    }
}

fn default_sampling(seed: u64) -> SamplingPlan {
    SamplingPlan {
        n_interior: 1024,
        n_boundary: 128,
        seed,
    }
}

fn run_recon_cell(
    plan: &StudyPlan,
    prob: &Problem,
    delta: f64,
    seed: u64,
) -> std::result::Result<RateRecord, (Option<ParameterChoice>, String)> {
    let started = Instant::now();
    let pc = plan
        .coupling
        .resolve(delta)
        .map_err(|e| (None, e.to_string()))?;
    let fail = |e: Error| (Some(pc), e.to_string());
    let mut train = plan.train.clone().unwrap_or_default();
    train.seed = seed;
    let mut record = RateRecord {
        delta,
        seed,
        h_requested: pc.h_requested,
        h: pc.h,
        gamma: pc.gamma,
        l2_error: f64::NAN,
        weighted_error: f64::NAN,
        loss_final: f64::NAN,
        converged: true,
        runtime_seconds: 0.0,
        error: None,
    };
    match plan.scheme {
        Scheme::Fem => {
            let mesh = Arc::new(build_uniform_mesh(prob.dim, pc.cells).map_err(fail)?);
            let obs = make_observation(
                prob,
                delta,
                NormTag::L2,
                NoiseMode::Smooth,
                seed,
                Some(&mesh),
            )
            .map_err(fail)?;
            let mut cfg = FemReconConfig::new(pc.gamma, prob.bounds).map_err(fail)?;
            cfg.seed = seed;
            let res = reconstruct_fem(prob, &obs, &mesh, &cfg).map_err(fail)?;
            record.l2_error = res.l2_error;
            record.weighted_error = res.weighted_error;
            record.loss_final = *res.loss_history.last().unwrap();
            record.converged = res.converged;
        }
        Scheme::Hybrid => {
            let mesh = Arc::new(build_uniform_mesh(prob.dim, pc.cells).map_err(fail)?);
            let obs = make_observation(
                prob,
                delta,
                NormTag::L2,
                NoiseMode::Smooth,
                seed,
                Some(&mesh),
            )
            .map_err(fail)?;
            let mut cfg = HybridConfig::new(pc.gamma, prob.bounds).map_err(fail)?;
            cfg.train = train;
            let res = train_hybrid(prob, &obs, &mesh, &cfg).map_err(fail)?;
            record.l2_error = res.l2_error;
            record.weighted_error = res.weighted_error;
            record.loss_final = res.final_loss;
        }
        Scheme::Mixed => {
            let obs = make_observation(prob, delta, NormTag::L2, NoiseMode::Smooth, seed, None)
                .map_err(fail)?;
            let pen = plan.mixed_penalties.unwrap_or(MixedPenalties {
                gamma_sigma: 1.0,
                gamma_a: pc.gamma,
                gamma_b: 1.0,
            });
            let mut sampling = plan.sampling.unwrap_or_else(|| default_sampling(seed));
            sampling.seed = seed;
            let mut cfg = MixedConfig::new(pen, prob.bounds, sampling).map_err(fail)?;
            cfg.train = train;
            let res = train_mixed(prob, &obs, &cfg).map_err(fail)?;
            record.l2_error = res.l2_error;
            record.weighted_error = res.weighted_error;
            record.loss_final = res.final_loss;
        }
        Scheme::Pinn => {
            let obs = make_observation(prob, delta, NormTag::L2, NoiseMode::Smooth, seed, None)
                .map_err(fail)?;
            let pen = plan.pinn_penalties.unwrap_or(PinnPenalties {
                gamma_d: 1.0,
                gamma_b: 1.0,
                gamma_a: pc.gamma,
            });
            let mut sampling = plan.sampling.unwrap_or_else(|| default_sampling(seed));
            sampling.seed = seed;
            let mut cfg = PinnConfig::new(pen, prob.bounds, sampling).map_err(fail)?;
            cfg.train = train;
            let res = train_pinn(prob, &obs, &cfg).map_err(fail)?;
            record.l2_error = res.l2_error;
            record.weighted_error = res.weighted_error;
            record.loss_final = res.final_loss;
        }
        Scheme::Lmm => unreachable!("lmm cells are dispatched separately"),
    }
    record.runtime_seconds = started.elapsed().as_secs_f64();
    Ok(record)
}

/// Recovery error of the method named by the plan on the linear dynamics
/// f(y) = y over [0, 1]: the grid entry is the step size and the error is
/// the sup norm of the recovered right-hand side against the trajectory.
fn run_lmm_cell(plan: &StudyPlan, h: f64, seed: u64) -> RateRecord {
    let started = Instant::now();
    let inner = || -> Result<f64> {
        let scheme = parse_method(&plan.problem_id)?;
        let n = (1.0 / h).round().max(1.0) as usize;
        let f = |y: &[f64]| y.to_vec();
        let traj = reference_trajectory(&f, &[1.0], h, n)?;
        let fhat = recover_with_default_seeds(&scheme, &traj)?;
        let mut err = 0.0f64;
        for (row, state) in fhat.iter().zip(&traj.states) {
            for (a, b) in row.iter().zip(state) {
                err = err.max((a - b).abs());
            }
        }
        Ok(err)
    };
    match inner() {
        Ok(err) => RateRecord {
            delta: h,
            seed,
            h_requested: h,
            h,
            gamma: 0.0,
            l2_error: err,
            weighted_error: 0.0,
            loss_final: 0.0,
            converged: true,
            runtime_seconds: started.elapsed().as_secs_f64(),
            error: None,
        },
        Err(e) => failed_record(h, seed, None, e.to_string(), started),
    }
}

/// One record per (delta, seed) cell, in grid-major order. Cells run in a
/// work pool; each is single-threaded and deterministic, so the output is
/// reproducible up to the runtime field.
pub fn run_convergence_study(plan: &StudyPlan) -> Result<Vec<RateRecord>> {
    plan.validate()?;
    let prob = match plan.scheme {
        Scheme::Lmm => None,
        _ => Some(problem(&plan.problem_id)?),
    };
    let cells: Vec<(f64, u64)> = plan
        .delta_grid
        .iter()
        .flat_map(|&d| {
            plan.seeds[..plan.trials_per_cell]
                .iter()
                .map(move |&s| (d, s))
        })
        .collect();
    let records = cells
        .par_iter()
        .map(|&(delta, seed)| match (&plan.scheme, &prob) {
            (Scheme::Lmm, _) => run_lmm_cell(plan, delta, seed),
            (_, Some(p)) => {
                let started = Instant::now();
                run_recon_cell(plan, p, delta, seed)
                    .unwrap_or_else(|(pc, msg)| failed_record(delta, seed, pc, msg, started))
            }
            _ => unreachable!("non-lmm schemes resolve a problem up front"),
        })
        .collect();
    Ok(records)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RateFit {
    pub slope: f64,
    /// Natural-log intercept: err ~ exp(intercept) * x^slope.
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least squares on (log x, log err). Needs at least three strictly
/// positive pairs with non-identical x.
pub fn fit_rate(pairs: &[(f64, f64)]) -> Result<RateFit> {
    if pairs.len() < 3 {
        return Err(invalid(format!(
            "rate fit needs at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    if !pairs
        .iter()
        .all(|&(x, e)| x > 0.0 && e > 0.0 && x.is_finite() && e.is_finite())
    {
        return Err(invalid("rate fit needs positive finite pairs"));
    }
    let n = pairs.len() as f64;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - xbar) * (y - ybar))
        .sum();
    if sxx == 0.0 {
        return Err(invalid("rate fit needs at least two distinct x values"));
    }
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (intercept + slope * x)).powi(2))
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - ybar).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Per-delta distribution of the finished cells.
#[derive(Debug, Clone, Serialize)]
pub struct DeltaSummary {
    pub delta: f64,
    pub h: f64,
    pub gamma: f64,
    pub median_l2: f64,
    pub min_l2: f64,
    pub max_l2: f64,
    pub median_weighted: f64,
    pub cells: usize,
    pub failures: usize,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Group records by delta (in first-appearance order) and take medians of
/// the successful cells.
pub fn summarize(records: &[RateRecord]) -> Vec<DeltaSummary> {
    let mut deltas: Vec<f64> = Vec::new();
    for r in records {
        if !deltas.contains(&r.delta) {
            deltas.push(r.delta);
        }
    }
    deltas
        .into_iter()
        .map(|delta| {
            let cell: Vec<&RateRecord> = records.iter().filter(|r| r.delta == delta).collect();
            let mut l2: Vec<f64> = cell
                .iter()
                .filter(|r| r.error.is_none() && r.l2_error.is_finite())
                .map(|r| r.l2_error)
                .collect();
            l2.sort_by(f64::total_cmp);
            let mut wt: Vec<f64> = cell
                .iter()
                .filter(|r| r.error.is_none() && r.weighted_error.is_finite())
                .map(|r| r.weighted_error)
                .collect();
            wt.sort_by(f64::total_cmp);
            let ok = cell.iter().find(|r| r.error.is_none());
            DeltaSummary {
                delta,
                h: ok.map_or(f64::NAN, |r| r.h),
                gamma: ok.map_or(f64::NAN, |r| r.gamma),
                median_l2: if l2.is_empty() { f64::NAN } else { median(&l2) },
                min_l2: l2.first().copied().unwrap_or(f64::NAN),
                max_l2: l2.last().copied().unwrap_or(f64::NAN),
                median_weighted: if wt.is_empty() { f64::NAN } else { median(&wt) },
                cells: cell.len(),
                failures: cell.iter().filter(|r| r.error.is_some()).count(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct StudySummary {
    pub problem_id: String,
    pub scheme: Scheme,
    /// Exponent of the positivity condition certified for the problem
    /// (0 when the weight is bounded away from zero); absent for lmm runs.
    pub certified_beta: Option<f64>,
    /// Theoretical slope: 1/(4(1+beta)) for reconstruction schemes, the
    /// method order for lmm recovery.
    pub expected_slope: f64,
    pub fit: Option<RateFit>,
    pub medians_strictly_decreasing: bool,
    /// One-sided for reconstructions (slope at least 80% of expected, the
    /// theory giving only upper bounds), two-sided within 0.3 for lmm.
    pub slope_meets_threshold: Option<bool>,
    pub per_delta: Vec<DeltaSummary>,
}

/// Fold the records into the headline numbers the study reports.
pub fn summarize_study(plan: &StudyPlan, records: &[RateRecord]) -> Result<StudySummary> {
    let per_delta = summarize(records);
    let (certified_beta, expected_slope) = match plan.scheme {
        Scheme::Lmm => (None, parse_method(&plan.problem_id)?.p as f64),
        _ => {
            let prob = problem(&plan.problem_id)?;
            let (min_w, _) = pc_beta_check(&prob, 10_000)?;
            let beta = if min_w > 0.0 { 0.0 } else { prob.beta };
            (Some(beta), 1.0 / (4.0 * (1.0 + beta)))
        }
    };
    let pairs: Vec<(f64, f64)> = per_delta
        .iter()
        .filter(|s| s.median_l2.is_finite() && s.median_l2 > 0.0)
        .map(|s| (s.delta, s.median_l2))
        .collect();
    let fit = fit_rate(&pairs).ok();
    let medians_strictly_decreasing = per_delta.len() >= 2
        && per_delta.iter().all(|s| s.median_l2.is_finite())
        && per_delta
            .windows(2)
            .all(|w| w[1].median_l2 < w[0].median_l2);
    let slope_meets_threshold = fit.map(|f| match plan.scheme {
        Scheme::Lmm => (f.slope - expected_slope).abs() <= 0.3,
        _ => f.slope >= 0.8 * expected_slope,
    });
    Ok(StudySummary {
        problem_id: plan.problem_id.clone(),
        scheme: plan.scheme,
        certified_beta,
        expected_slope,
        fit,
        medians_strictly_decreasing,
        slope_meets_threshold,
        per_delta,
    })
}
