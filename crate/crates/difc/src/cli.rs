//! Command-line front end. Every run reads a config (key=value text with
//! optional [sections], or the same keys as a JSON object), resolves inline
//! overrides, and writes its artifacts under a directory named by the
//! command and a hash of the settings, so identical configs land in the
//! same place and reruns are byte-for-byte reproducible apart from the
//! runtime fields.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::fem::{error_norm, solve_forward, FemFunction, LinearSolve, NormKind, EXACT_LEVEL};
use crate::field::ScalarField;
use crate::lmm::{discovery_stable, recover_with_default_seeds, reference_trajectory};
use crate::mesh::{build_uniform_mesh, Mesh};
use crate::nn::Mlp;
use crate::recon_fem::{reconstruct_fem, FemReconConfig};
use crate::recon_nn::{
    train_hybrid, train_mixed, train_pinn, HybridConfig, MixedConfig, MixedPenalties, NetScalar,
    Optimizer, PinnConfig, PinnPenalties, SamplingPlan, TrainConfig, TrainLogRow,
};
use crate::study::{
    parse_method, run_convergence_study, summarize_study, Coupling, ParameterChoice, RateRecord,
    Scheme, StudyPlan,
};
use crate::synth::{calibration_mesh, make_observation, problem, NoiseMode, NormTag};

#[derive(Parser)]
#[command(
    name = "difc",
    version,
    about = "Diffusion-coefficient identification: forward solves, reconstructions, rate studies, multistep recovery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file: key=value lines with optional [sections], or JSON
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the config's seed
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Parent directory for run outputs (default "runs")
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for the study pool
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the Dirichlet problem for a registered coefficient and source
    Forward(KeyValues),
    /// Recover the coefficient from one noisy observation
    Reconstruct(KeyValues),
    /// Sweep a noise grid and fit the empirical convergence rate
    Study(KeyValues),
    /// Report multistep discovery stability and recover dynamics
    Lmm(KeyValues),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Forward(_) => "forward",
            Command::Reconstruct(_) => "reconstruct",
            Command::Study(_) => "study",
            Command::Lmm(_) => "lmm",
        }
    }

    fn overrides(&self) -> &[String] {
        match self {
            Command::Forward(kv)
            | Command::Reconstruct(kv)
            | Command::Study(kv)
            | Command::Lmm(kv) => &kv.set,
        }
    }
}

#[derive(Args)]
struct KeyValues {
    /// Inline key=value settings; they override the config file
    #[arg(value_name = "KEY=VALUE")]
    set: Vec<String>,
}

pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("difc: {e}");
            match e {
                Error::Numerical(_) => 1,
                _ => 2,
            }
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| invalid(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for pair in cli.command.overrides() {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| invalid(format!("override '{pair}' must look like key=value")))?;
        cfg.set(k.trim(), v.trim());
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", seed.to_string());
    }
    let parent = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(cfg.str_or("out", "runs")));
    let dir = parent.join(format!("{}-{}", cli.command.name(), cfg.hash8()));
    fs::create_dir_all(&dir)?;
    fs::write(
        dir.join("config.json"),
        format!("{}\n", serde_json::to_string_pretty(&cfg.values)?),
    )?;
    match cli.command {
        Command::Forward(_) => cmd_forward(&cfg, &dir)?,
        Command::Reconstruct(_) => cmd_reconstruct(&cfg, &dir)?,
        Command::Study(_) => cmd_study(&cfg, &dir)?,
        Command::Lmm(_) => cmd_lmm(&cfg, &dir)?,
    }
    println!("outputs: {}", dir.display());
    Ok(())
}

/// Flat dotted-key settings; [section] headers and nested JSON objects
/// both map onto "section.key".
#[derive(Debug, Default, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let json =
            path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
        if json {
            Self::from_json(&text)
        } else {
            Self::from_text(&text)
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| {
                    invalid(format!("config line {}: unterminated [section]", idx + 1))
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("config line {}: expected key=value", idx + 1)))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            values.insert(key, v.trim().to_string());
        }
        Ok(RunConfig { values })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let root: serde_json::Value =
            serde_json::from_str(text).map_err(|e| invalid(format!("config JSON: {e}")))?;
        if !root.is_object() {
            return Err(invalid("config JSON must be an object"));
        }
        let mut values = BTreeMap::new();
        flatten_json("", &root, &mut values)?;
        Ok(RunConfig { values })
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| invalid(format!("config key '{key}' is required")))
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse().map_err(|_| {
            invalid(format!(
                "config key '{key}' = '{raw}' is not a valid {}",
                std::any::type_name::<T>()
            ))
        })
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        self.get(key)
            .map_or(Ok(default), |raw| self.parse(key, raw))
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        let raw = self.require(key)?;
        self.parse(key, raw)
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        self.get(key)
            .map_or(Ok(default), |raw| self.parse(key, raw))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        self.get(key)
            .map_or(Ok(default), |raw| self.parse(key, raw))
    }

    pub fn u32_or(&self, key: &str, default: u32) -> Result<u32> {
        self.get(key)
            .map_or(Ok(default), |raw| self.parse(key, raw))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        self.get(key)
            .map_or(Ok(default), |raw| self.parse(key, raw))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|part| self.parse(key, part.trim()))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn list_f64(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.list(key)
    }

    pub fn list_u64(&self, key: &str) -> Result<Option<Vec<u64>>> {
        self.list(key)
    }

    pub fn list_usize(&self, key: &str) -> Result<Option<Vec<usize>>> {
        self.list(key)
    }

    /// Hash of the settings that shape the run; `out` and `threads` only
    /// steer where and how fast it executes, so they are skipped.
    pub fn hash8(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (k, v) in &self.values {
            if k == "out" || k == "threads" {
                continue;
            }
            for b in k.bytes().chain(*b"=").chain(v.bytes()).chain(*b"\n") {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        format!("{h:016x}")[..8].to_string()
    }
}

fn flatten_json(
    prefix: &str,
    v: &serde_json::Value,
    out: &mut BTreeMap<String, String>,
) -> Result<()> {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            for (k, val) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_json(&key, val, out)?;
            }
        }
        Value::Array(items) => {
            let parts: Result<Vec<String>> = items.iter().map(|i| json_scalar(prefix, i)).collect();
            out.insert(prefix.to_string(), parts?.join(","));
        }
        scalar => {
            out.insert(prefix.to_string(), json_scalar(prefix, scalar)?);
        }
    }
    Ok(())
}

fn json_scalar(key: &str, v: &serde_json::Value) -> Result<String> {
    use serde_json::Value;
    match v {
        Value::Null => Ok(String::new()),
        Value::Bool(b) => Ok(b.to_string()),
        Value::Number(n) => Ok(n.to_string()),
        Value::String(s) => Ok(s.clone()),
        _ => Err(invalid(format!(
            "config key '{key}': arrays must hold scalars"
        ))),
    }
}

fn write_file(path: PathBuf, contents: String) -> Result<()> {
    fs::write(&path, contents).map_err(|e| invalid(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    write_file(
        dir.join(name),
        format!("{}\n", serde_json::to_string_pretty(value)?),
    )
}

/// Nodal CSV of one or two fields over a mesh, "x[,y],<names>" per row.
fn write_nodal_csv(dir: &Path, name: &str, mesh: &Mesh, cols: &[(&str, &[f64])]) -> Result<()> {
    let mut text = String::from(if mesh.dim == 1 { "x" } else { "x,y" });
    for (label, _) in cols {
        text.push(',');
        text.push_str(label);
    }
    text.push('\n');
    for (i, node) in mesh.nodes.iter().enumerate() {
        text.push_str(&node[0].to_string());
        if mesh.dim == 2 {
            text.push(',');
            text.push_str(&node[1].to_string());
        }
        for (_, values) in cols {
            text.push(',');
            text.push_str(&values[i].to_string());
        }
        text.push('\n');
    }
    write_file(dir.join(name), text)
}

// ---------------------------------------------------------------- forward

#[derive(Serialize)]
struct ForwardReport<'a> {
    command: &'static str,
    problem: &'a str,
    dim: usize,
    cells: usize,
    h: f64,
    nodes: usize,
    solver: String,
    l2_error: f64,
    h1_error: f64,
    runtime_seconds: f64,
}

fn cmd_forward(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let name = cfg.require("problem")?;
    let prob = problem(name)?;
    let cells = cfg.usize_or("cells", 64)?;
    let level = cfg.u32_or("quadrature_level", EXACT_LEVEL)?;
    let started = Instant::now();
    let mesh = Arc::new(build_uniform_mesh(prob.dim, cells)?);
    let (u_h, solve) = solve_forward(
        &mesh,
        level,
        level,
        |_, _, x| prob.a_true.value(x),
        |_, _, x| prob.f.value(x),
    )?;
    let l2 = error_norm(&u_h, &prob.u_true, NormKind::L2, EXACT_LEVEL);
    let h1 = error_norm(&u_h, &prob.u_true, NormKind::H1Semi, EXACT_LEVEL);
    let report = ForwardReport {
        command: "forward",
        problem: name,
        dim: prob.dim,
        cells,
        h: mesh.h,
        nodes: mesh.n_nodes(),
        solver: match solve {
            LinearSolve::Dense => "dense".to_string(),
            LinearSolve::Pcg { iterations } => format!("pcg({iterations})"),
        },
        l2_error: l2,
        h1_error: h1,
        runtime_seconds: started.elapsed().as_secs_f64(),
    };
    write_nodal_csv(dir, "solution.csv", &mesh, &[("u", &u_h.values)])?;
    write_json(dir, "result.json", &report)?;
    println!("forward {name}: cells={cells} l2_error={l2:.6e} h1_error={h1:.6e}");
    Ok(())
}

// ------------------------------------------------------------ reconstruct

#[derive(Serialize)]
struct ReconReport<'a> {
    command: &'static str,
    scheme: &'a str,
    problem: &'a str,
    delta: f64,
    seed: u64,
    observation: &'a str,
    h_requested: f64,
    h: f64,
    cells: usize,
    gamma: f64,
    l2_error: f64,
    weighted_error: f64,
    loss_final: f64,
    converged: bool,
    iterations: usize,
    runtime_seconds: f64,
}

fn coupling_from(cfg: &RunConfig) -> Result<Coupling> {
    match cfg.str_or("coupling.mode", "delta-rule") {
        "delta-rule" => Ok(Coupling::DeltaRule {
            c_h: cfg.f64_or("coupling.c_h", 1.0)?,
            c_gamma: cfg.f64_or("coupling.c_gamma", 1.0)?,
        }),
        "manual" => {
            let raw = cfg.require("coupling.cells")?;
            let cells: usize = cfg.parse("coupling.cells", raw)?;
            Ok(Coupling::Manual {
                cells,
                gamma: cfg.require_f64("coupling.gamma")?,
            })
        }
        other => Err(invalid(format!(
            "coupling.mode '{other}' must be delta-rule or manual"
        ))),
    }
}

fn train_from(cfg: &RunConfig, seed: u64) -> Result<TrainConfig> {
    let base = TrainConfig::default();
    Ok(TrainConfig {
        steps: cfg.usize_or("train.steps", base.steps)?,
        learning_rate: cfg.f64_or("train.learning_rate", base.learning_rate)?,
        optimizer: match cfg.str_or("train.optimizer", "adaptive-moment") {
            "adaptive-moment" => Optimizer::AdaptiveMoment,
            "plain-gd" => Optimizer::PlainGd,
            other => {
                return Err(invalid(format!(
                    "train.optimizer '{other}' must be adaptive-moment or plain-gd"
                )))
            }
        },
        seed,
        log_every: cfg.usize_or("train.log_every", base.log_every)?,
        resample: cfg.bool_or("train.resample", base.resample)?,
    })
}

fn sampling_from(cfg: &RunConfig, seed: u64) -> Result<SamplingPlan> {
    SamplingPlan::new(
        cfg.usize_or("sampling.n_interior", 1024)?,
        cfg.usize_or("sampling.n_boundary", 128)?,
        seed,
    )
}

fn write_training_csv(dir: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut text = String::from("step,loss,term1,term2,term3,term4,grad_norm\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.loss, r.terms[0], r.terms[1], r.terms[2], r.terms[3], r.grad_norm
        ));
    }
    write_file(dir.join("history.csv"), text)
}

/// Clipped network coefficient sampled at the mesh nodes.
fn net_on_mesh(net: &Mlp, bounds: crate::nn::Cutoff, mesh: &Arc<Mesh>) -> Result<Vec<f64>> {
    let view = NetScalar::new(net)?;
    Ok(mesh
        .nodes
        .iter()
        .map(|p| bounds.apply(view.value(&p[..mesh.dim])))
        .collect())
}

fn cmd_reconstruct(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let scheme: Scheme = cfg.require("scheme")?.parse()?;
    if scheme == Scheme::Lmm {
        return Err(invalid(
            "reconstruct supports fem, hybrid, mixed and pinn; use the lmm command",
        ));
    }
    let name = cfg.require("problem")?;
    let prob = problem(name)?;
    let delta = cfg.require_f64("delta")?;
    let seed = cfg.u64_or("seed", 0)?;
    let noise = match cfg.str_or("observation.mode", "smooth") {
        "smooth" => NoiseMode::Smooth,
        "nodal" => NoiseMode::Nodal,
        other => {
            return Err(invalid(format!(
                "observation.mode '{other}' must be smooth or nodal"
            )))
        }
    };
    if noise == NoiseMode::Nodal && matches!(scheme, Scheme::Mixed | Scheme::Pinn) {
        return Err(invalid(format!(
            "the {} scheme needs a smooth-mode observation",
            scheme.as_str()
        )));
    }
    let norm = match cfg.str_or("observation.norm", "l2") {
        "l2" => NormTag::L2,
        "h1" => NormTag::H1,
        other => {
            return Err(invalid(format!(
                "observation.norm '{other}' must be l2 or h1"
            )))
        }
    };
    let pc: ParameterChoice = coupling_from(cfg)?.resolve(delta)?;
    let train = train_from(cfg, seed)?;
    let started = Instant::now();

    let mut report = ReconReport {
        command: "reconstruct",
        scheme: scheme.as_str(),
        problem: name,
        delta,
        seed,
        observation: if noise == NoiseMode::Smooth {
            "smooth"
        } else {
            "nodal"
        },
        h_requested: pc.h_requested,
        h: pc.h,
        cells: pc.cells,
        gamma: pc.gamma,
        l2_error: f64::NAN,
        weighted_error: f64::NAN,
        loss_final: f64::NAN,
        converged: true,
        iterations: 0,
        runtime_seconds: 0.0,
    };

    match scheme {
        Scheme::Fem => {
            let mesh = Arc::new(build_uniform_mesh(prob.dim, pc.cells)?);
            let obs = make_observation(&prob, delta, norm, noise, seed, Some(&mesh))?;
            let mut fem_cfg = FemReconConfig::new(pc.gamma, prob.bounds)?;
            fem_cfg.seed = seed;
            fem_cfg.max_iters = cfg.usize_or("max_iters", fem_cfg.max_iters)?;
            fem_cfg.grad_tol = cfg.f64_or("grad_tol", fem_cfg.grad_tol)?;
            let res = reconstruct_fem(&prob, &obs, &mesh, &fem_cfg)?;
            report.l2_error = res.l2_error;
            report.weighted_error = res.weighted_error;
            report.loss_final = *res.loss_history.last().unwrap();
            report.converged = res.converged;
            report.iterations = res.iterations;
            let a_true = FemFunction::interpolate(&mesh, |x| prob.a_true.value(x));
            write_nodal_csv(
                dir,
                "coefficient.csv",
                &mesh,
                &[("a_h", &res.a_h.values), ("a_true", &a_true.values)],
            )?;
            write_nodal_csv(dir, "solution.csv", &mesh, &[("u", &res.u_h.values)])?;
            let mut text = String::from("iteration,loss\n");
            for (i, loss) in res.loss_history.iter().enumerate() {
                text.push_str(&format!("{i},{loss}\n"));
            }
            write_file(dir.join("history.csv"), text)?;
        }
        Scheme::Hybrid => {
            let mesh = Arc::new(build_uniform_mesh(prob.dim, pc.cells)?);
            let obs = make_observation(&prob, delta, norm, noise, seed, Some(&mesh))?;
            let mut hcfg = HybridConfig::new(pc.gamma, prob.bounds)?;
            if let Some(hidden) = cfg.list_usize("hidden.coeff")? {
                hcfg.hidden = hidden;
            }
            hcfg.train = train;
            let res = train_hybrid(&prob, &obs, &mesh, &hcfg)?;
            report.l2_error = res.l2_error;
            report.weighted_error = res.weighted_error;
            report.loss_final = res.final_loss;
            report.iterations = hcfg.train.steps;
            let a_true = FemFunction::interpolate(&mesh, |x| prob.a_true.value(x));
            let a_vals = net_on_mesh(&res.net, prob.bounds, &mesh)?;
            write_nodal_csv(
                dir,
                "coefficient.csv",
                &mesh,
                &[("a_h", &a_vals), ("a_true", &a_true.values)],
            )?;
            write_nodal_csv(dir, "solution.csv", &mesh, &[("u", &res.u_h.values)])?;
            write_training_csv(dir, &res.history)?;
        }
        Scheme::Mixed => {
            let obs = make_observation(&prob, delta, norm, noise, seed, None)?;
            let pen = MixedPenalties {
                gamma_sigma: cfg.f64_or("mixed.gamma_sigma", 1.0)?,
                gamma_a: cfg.f64_or("mixed.gamma_a", pc.gamma)?,
                gamma_b: cfg.f64_or("mixed.gamma_b", 1.0)?,
            };
            let mut mcfg = MixedConfig::new(pen, prob.bounds, sampling_from(cfg, seed)?)?;
            if let Some(hidden) = cfg.list_usize("hidden.coeff")? {
                mcfg.coeff_hidden = hidden;
            }
            if let Some(hidden) = cfg.list_usize("hidden.flux")? {
                mcfg.flux_hidden = hidden;
            }
            mcfg.train = train;
            let res = train_mixed(&prob, &obs, &mcfg)?;
            report.l2_error = res.l2_error;
            report.weighted_error = res.weighted_error;
            report.loss_final = res.final_loss;
            report.iterations = mcfg.train.steps;
            let mesh = calibration_mesh(prob.dim);
            let a_true = FemFunction::interpolate(&mesh, |x| prob.a_true.value(x));
            let a_vals = net_on_mesh(&res.coeff_net, prob.bounds, &mesh)?;
            write_nodal_csv(
                dir,
                "coefficient.csv",
                &mesh,
                &[("a_h", &a_vals), ("a_true", &a_true.values)],
            )?;
            write_training_csv(dir, &res.history)?;
        }
        Scheme::Pinn => {
            let obs = make_observation(&prob, delta, norm, noise, seed, None)?;
            let pen = PinnPenalties {
                gamma_d: cfg.f64_or("pinn.gamma_d", 1.0)?,
                gamma_b: cfg.f64_or("pinn.gamma_b", 1.0)?,
                gamma_a: cfg.f64_or("pinn.gamma_a", pc.gamma)?,
            };
            let mut pcfg = PinnConfig::new(pen, prob.bounds, sampling_from(cfg, seed)?)?;
            if let Some(hidden) = cfg.list_usize("hidden.coeff")? {
                pcfg.coeff_hidden = hidden;
            }
            if let Some(hidden) = cfg.list_usize("hidden.state")? {
                pcfg.state_hidden = hidden;
            }
            pcfg.train = train;
            let res = train_pinn(&prob, &obs, &pcfg)?;
            report.l2_error = res.l2_error;
            report.weighted_error = res.weighted_error;
            report.loss_final = res.final_loss;
            report.iterations = pcfg.train.steps;
            let mesh = calibration_mesh(prob.dim);
            let a_true = FemFunction::interpolate(&mesh, |x| prob.a_true.value(x));
            let a_vals = net_on_mesh(&res.coeff_net, prob.bounds, &mesh)?;
            write_nodal_csv(
                dir,
                "coefficient.csv",
                &mesh,
                &[("a_h", &a_vals), ("a_true", &a_true.values)],
            )?;
            write_training_csv(dir, &res.history)?;
        }
        Scheme::Lmm => unreachable!("rejected above"),
    }
    report.runtime_seconds = started.elapsed().as_secs_f64();
    write_json(dir, "result.json", &report)?;
    println!(
        "reconstruct {} {name}: delta={delta:e} l2_error={:.6e} converged={}",
        scheme.as_str(),
        report.l2_error,
        report.converged
    );
    Ok(())
}

// ----------------------------------------------------------------- study

fn records_csv(records: &[RateRecord]) -> String {
    let mut text = String::from(
        "delta,seed,h_requested,h,gamma,l2_error,weighted_error,loss_final,converged,runtime_seconds,error\n",
    );
    for r in records {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.delta,
            r.seed,
            r.h_requested,
            r.h,
            r.gamma,
            r.l2_error,
            r.weighted_error,
            r.loss_final,
            r.converged,
            r.runtime_seconds,
            r.error.as_deref().unwrap_or("").replace(',', ";"),
        ));
    }
    text
}

fn cmd_study(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let scheme: Scheme = cfg.require("scheme")?.parse()?;
    let id_key = if scheme == Scheme::Lmm {
        "method"
    } else {
        "problem"
    };
    let problem_id = cfg.get(id_key).or_else(|| cfg.get("problem"));
    let problem_id =
        problem_id.ok_or_else(|| invalid(format!("config key '{id_key}' is required")))?;
    let grid = cfg
        .list_f64("delta_grid")?
        .ok_or_else(|| invalid("config key 'delta_grid' is required"))?;
    let mut plan = StudyPlan::new(problem_id, scheme, grid);
    plan.coupling = coupling_from(cfg)?;
    if let Some(seeds) = cfg.list_u64("seeds")? {
        plan.trials_per_cell = seeds.len();
        plan.seeds = seeds;
    }
    plan.trials_per_cell = cfg.usize_or("trials", plan.trials_per_cell)?;
    if cfg.get("train.steps").is_some()
        || cfg.get("train.learning_rate").is_some()
        || cfg.get("train.optimizer").is_some()
        || cfg.get("train.log_every").is_some()
        || cfg.get("train.resample").is_some()
    {
        plan.train = Some(train_from(cfg, 0)?);
    }
    if cfg.get("sampling.n_interior").is_some() || cfg.get("sampling.n_boundary").is_some() {
        plan.sampling = Some(sampling_from(cfg, 0)?);
    }
    if scheme == Scheme::Mixed && cfg.get("mixed.gamma_a").is_some() {
        plan.mixed_penalties = Some(MixedPenalties {
            gamma_sigma: cfg.f64_or("mixed.gamma_sigma", 1.0)?,
            gamma_a: cfg.require_f64("mixed.gamma_a")?,
            gamma_b: cfg.f64_or("mixed.gamma_b", 1.0)?,
        });
    }
    if scheme == Scheme::Pinn && cfg.get("pinn.gamma_a").is_some() {
        plan.pinn_penalties = Some(PinnPenalties {
            gamma_d: cfg.f64_or("pinn.gamma_d", 1.0)?,
            gamma_b: cfg.f64_or("pinn.gamma_b", 1.0)?,
            gamma_a: cfg.require_f64("pinn.gamma_a")?,
        });
    }
    plan.validate()?;

    let records = run_convergence_study(&plan)?;
    let summary = summarize_study(&plan, &records)?;
    write_file(dir.join("records.csv"), records_csv(&records))?;
    write_json(dir, "summary.json", &summary)?;
    let mut dat = String::from("# delta median_l2\n");
    for row in &summary.per_delta {
        if row.median_l2.is_finite() {
            dat.push_str(&format!("{} {}\n", row.delta, row.median_l2));
        }
    }
    write_file(dir.join("rates.dat"), dat)?;
    match summary.fit {
        Some(fit) => println!(
            "study {} {problem_id}: slope={:.3} expected={:.3} threshold_met={}",
            scheme.as_str(),
            fit.slope,
            summary.expected_slope,
            summary
                .slope_meets_threshold
                .map_or("n/a".to_string(), |b| b.to_string()),
        ),
        None => println!(
            "study {} {problem_id}: {} records, too few deltas for a rate fit",
            scheme.as_str(),
            records.len()
        ),
    }
    Ok(())
}

// ------------------------------------------------------------------- lmm

#[derive(Serialize)]
struct LmmReport<'a> {
    command: &'static str,
    method: &'a str,
    family: crate::lmm::LmmFamily,
    steps: usize,
    order: usize,
    alpha: &'a [f64],
    beta: &'a [f64],
    stable: bool,
    boundary: bool,
    root_moduli: &'a [f64],
    dynamics: Option<&'a str>,
    max_recovery_error: Option<f64>,
    runtime_seconds: f64,
}

fn dynamics_fn(name: &str) -> Result<Box<dyn Fn(&[f64]) -> Vec<f64>>> {
    match name {
        "linear" => Ok(Box::new(|y: &[f64]| y.to_vec())),
        "decay" => Ok(Box::new(|y: &[f64]| y.iter().map(|v| -v).collect())),
        "logistic" => Ok(Box::new(|y: &[f64]| {
            y.iter().map(|v| v * (1.0 - v)).collect()
        })),
        other => Err(invalid(format!(
            "dynamics '{other}' must be linear, decay or logistic"
        ))),
    }
}

fn cmd_lmm(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let method = cfg.require("method")?;
    let scheme = parse_method(method)?;
    let report = discovery_stable(&scheme)?;
    let started = Instant::now();
    let stability_only = cfg.bool_or("stability_only", false)?;
    let mut dynamics: Option<&str> = None;
    let mut max_err: Option<f64> = None;

    write_json(
        dir,
        "stability.json",
        &serde_json::json!({
            "method": method,
            "family": scheme.family,
            "steps": scheme.m,
            "order": scheme.p,
            "alpha": scheme.alpha,
            "beta": scheme.beta,
            "stable": report.stable,
            "boundary": report.boundary,
            "root_moduli": report.root_moduli,
        }),
    )?;

    if !stability_only {
        let dyn_name = cfg.str_or("dynamics", "linear");
        dynamics = Some(dyn_name);
        let f = dynamics_fn(dyn_name)?;
        let y0 = cfg.list_f64("y0")?.unwrap_or_else(|| vec![1.0]);
        let h = cfg.f64_or("h", 0.025)?;
        let t_end = cfg.f64_or("t_end", 1.0)?;
        if !(h > 0.0) || !(t_end > 0.0) {
            return Err(invalid("h and t_end must be positive"));
        }
        let n = (t_end / h).round().max(1.0) as usize;
        let traj = reference_trajectory(&*f, &y0, h, n)?;
        let fhat = recover_with_default_seeds(&scheme, &traj)?;
        let dim = traj.dim;
        let mut text = String::from("t");
        for j in 0..dim {
            text.push_str(&format!(",y{j}"));
        }
        for j in 0..dim {
            text.push_str(&format!(",fhat{j}"));
        }
        for j in 0..dim {
            text.push_str(&format!(",ftrue{j}"));
        }
        text.push('\n');
        let mut worst = 0.0f64;
        for (i, (state, rec)) in traj.states.iter().zip(&fhat).enumerate() {
            let truth = f(state);
            text.push_str(&(i as f64 * h).to_string());
            for v in state {
                text.push_str(&format!(",{v}"));
            }
            for v in rec {
                text.push_str(&format!(",{v}"));
            }
            for v in &truth {
                text.push_str(&format!(",{v}"));
            }
            text.push('\n');
            for (a, b) in rec.iter().zip(&truth) {
                worst = worst.max((a - b).abs());
            }
        }
        write_file(dir.join("recovery.csv"), text)?;
        max_err = Some(worst);
    }

    let summary = LmmReport {
        command: "lmm",
        method,
        family: scheme.family,
        steps: scheme.m,
        order: scheme.p,
        alpha: &scheme.alpha,
        beta: &scheme.beta,
        stable: report.stable,
        boundary: report.boundary,
        root_moduli: &report.root_moduli,
        dynamics,
        max_recovery_error: max_err,
        runtime_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(dir, "result.json", &summary)?;
    match max_err {
        Some(e) => println!(
            "lmm {method}: order={} stable={} max_recovery_error={e:.6e}",
            scheme.p, report.stable
        ),
        None => println!("lmm {method}: order={} stable={}", scheme.p, report.stable),
    }
    Ok(())
}
