//! Dense tanh multilayer perceptrons with hand-rolled differentiation.
//!
//! The forward pass carries, next to the values, first and second derivative
//! tangents along each input axis; the reverse pass propagates cotangents of
//! all three streams back to the parameters. This gives exact parameter
//! gradients of functionals that involve u, ∇u and diagonal second
//! derivatives (divergence and Laplacian terms) without a tape library.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

/// Network shape: affine layers of sizes
/// input → hidden[0] → … → hidden, with tanh between affine
/// layers and a linear output layer. Empty `hidden` is a pure affine map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            return Err(invalid("network layer widths must be positive"));
        }
        Ok(MlpSpec {
            input_dim,
            hidden,
            output_dim,
        })
    }

    /// Widths of the value stream: [input, hidden…, output].
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden.len() + 2);
        d.push(self.input_dim);
        d.extend_from_slice(&self.hidden);
        d.push(self.output_dim);
        d
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn n_params(&self) -> usize {
        let d = self.dims();
        (0..self.n_layers()).map(|l| d[l + 1] * (d[l] + 1)).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    a: usize,
    b: usize,
    w_in: usize,
    w_out: usize,
}

/// A network together with its flat parameter vector (per layer: row-major
/// weight matrix, then bias).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
    layers: Vec<LayerOffsets>,
}

impl Mlp {
    /// Glorot-uniform weights (±√(6/(fan_in+fan_out))), zero biases, drawn
    /// from a ChaCha8 stream so equal seeds give equal networks.
    pub fn new(spec: MlpSpec, seed: u64) -> Self {
        let mut net = Mlp::zeros(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..net.layers.len() {
            let LayerOffsets { a, w_in, w_out, .. } = net.layers[l];
            let lim = (6.0 / (w_in + w_out) as f64).sqrt();
            for p in &mut net.params[a..a + w_out * w_in] {
                *p = rng.gen_range(-lim..lim);
            }
        }
        net
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let dims = spec.dims();
        let mut layers = Vec::with_capacity(spec.n_layers());
        let mut off = 0;
        for l in 0..spec.n_layers() {
            let (w_in, w_out) = (dims[l], dims[l + 1]);
            layers.push(LayerOffsets {
                a: off,
                b: off + w_out * w_in,
                w_in,
                w_out,
            });
            off += w_out * (w_in + 1);
        }
        Mlp {
            params: vec![0.0; off],
            spec,
            layers,
        }
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        let mut net = Mlp::zeros(spec);
        if params.len() != net.params.len() {
            return Err(invalid(format!(
                "parameter vector length {} does not match network with {} parameters",
                params.len(),
                net.params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64], usize, usize) {
        let LayerOffsets { a, b, w_in, w_out } = self.layers[l];
        (&self.params[a..b], &self.params[b..b + w_out], w_in, w_out)
    }

    /// Forward pass filling `ws`; derivative streams are computed up to
    /// `order` (0 = values only, 1 = +∇, 2 = +diagonal second derivatives).
    pub fn forward(&self, x: &[f64], order: u8, ws: &mut Workspace) {
        assert_eq!(x.len(), self.spec.input_dim, "input dimension mismatch");
        assert!(order <= 2);
        ws.order = order;
        ws.x.clear();
        ws.x.extend_from_slice(x);
        let n_layers = self.layers.len();
        let d = self.spec.input_dim;
        for l in 0..n_layers {
            let (a, b, w_in, w_out) = self.layer(l);
            // affine stream: z = A·prev + b, ż_i = A·v̇_i, z̈_i = A·v̈_i
            for r in 0..w_out {
                let row = &a[r * w_in..(r + 1) * w_in];
                if l == 0 {
                    ws.z[l][r] = b[r] + row.iter().zip(x).map(|(a, x)| a * x).sum::<f64>();
                    if order >= 1 {
                        for i in 0..d {
                            ws.dz[l][i * w_out + r] = row[i];
                            if order >= 2 {
                                ws.ddz[l][i * w_out + r] = 0.0;
                            }
                        }
                    }
                } else {
                    let pv = &ws.v[l - 1];
                    ws.z[l][r] = b[r] + row.iter().zip(pv).map(|(a, v)| a * v).sum::<f64>();
                    if order >= 1 {
                        for i in 0..d {
                            let pdv = &ws.dv[l - 1][i * w_in..(i + 1) * w_in];
                            ws.dz[l][i * w_out + r] =
                                row.iter().zip(pdv).map(|(a, v)| a * v).sum::<f64>();
                            if order >= 2 {
                                let pddv = &ws.ddv[l - 1][i * w_in..(i + 1) * w_in];
                                ws.ddz[l][i * w_out + r] =
                                    row.iter().zip(pddv).map(|(a, v)| a * v).sum::<f64>();
                            }
                        }
                    }
                }
            }
            // activation stream: identity on the output layer
            if l + 1 == n_layers {
                ws.v[l].copy_from_slice(&ws.z[l]);
                if order >= 1 {
                    ws.dv[l].copy_from_slice(&ws.dz[l]);
                }
                if order >= 2 {
                    ws.ddv[l].copy_from_slice(&ws.ddz[l]);
                }
            } else {
                for r in 0..w_out {
                    let t = ws.z[l][r].tanh();
                    ws.v[l][r] = t;
                    if order >= 1 {
                        let p1 = 1.0 - t * t;
                        for i in 0..d {
                            let zi = ws.dz[l][i * w_out + r];
                            ws.dv[l][i * w_out + r] = p1 * zi;
                            if order >= 2 {
                                let p2 = -2.0 * t * p1;
                                ws.ddv[l][i * w_out + r] =
                                    p2 * zi * zi + p1 * ws.ddz[l][i * w_out + r];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Reverse pass for the most recent [`Mlp::forward`] call on `ws`.
    /// Cotangent layout: `cot_first[i * output_dim + j]` pairs with
    /// ∂u_j/∂x_i, `cot_second` likewise with ∂²u_j/∂x_i²; empty slices mean
    /// zero. Parameter gradients are accumulated into `grad`.
    pub fn backward(
        &self,
        ws: &mut Workspace,
        cot_value: &[f64],
        cot_first: &[f64],
        cot_second: &[f64],
        grad: &mut [f64],
    ) {
        assert_eq!(grad.len(), self.n_params());
        let n_layers = self.layers.len();
        let d = if ws.order >= 1 {
            self.spec.input_dim
        } else {
            0
        };
        let out = self.spec.output_dim;

        // seed cotangents of the network output
        ws.bar.clear();
        ws.bar.extend_from_slice(cot_value);
        ws.bar.resize(out, 0.0);
        ws.dbar.clear();
        ws.dbar.extend_from_slice(cot_first);
        ws.dbar.resize(d * out, 0.0);
        ws.ddbar.clear();
        ws.ddbar.extend_from_slice(cot_second);
        ws.ddbar.resize(d * out, 0.0);

        for l in (0..n_layers).rev() {
            let LayerOffsets {
                a: a_off,
                b: b_off,
                w_in,
                w_out,
            } = self.layers[l];
            let a = &self.params[a_off..b_off];

            // tanh cotangents: post-activation bars become pre-activation
            // bars; the output layer is linear so they pass through.
            if l + 1 != n_layers {
                for r in 0..w_out {
                    let t = ws.v[l][r];
                    let p1 = 1.0 - t * t;
                    let p2 = -2.0 * t * p1;
                    let p3 = (6.0 * t * t - 2.0) * p1;
                    let mut zb = ws.bar[r] * p1;
                    for i in 0..d {
                        let zi = ws.dz[l][i * w_out + r];
                        let vb1 = ws.dbar[i * w_out + r];
                        zb += vb1 * p2 * zi;
                        if ws.order >= 2 {
                            let vb2 = ws.ddbar[i * w_out + r];
                            let zzi = ws.ddz[l][i * w_out + r];
                            zb += vb2 * (p3 * zi * zi + p2 * zzi);
                            ws.dbar[i * w_out + r] = vb1 * p1 + vb2 * 2.0 * p2 * zi;
                            ws.ddbar[i * w_out + r] = vb2 * p1;
                        } else {
                            ws.dbar[i * w_out + r] = vb1 * p1;
                        }
                    }
                    ws.bar[r] = zb;
                }
            }

            // affine cotangents: Ā += z̄·vᵀ + Σ_i (ż̄_i·v̇_iᵀ + z̈̄_i·v̈_iᵀ),
            // b̄ += z̄, then pull every bar stream back through Aᵀ.
            for r in 0..w_out {
                grad[b_off + r] += ws.bar[r];
                let ga = &mut grad[a_off + r * w_in..a_off + (r + 1) * w_in];
                if l == 0 {
                    for c in 0..w_in {
                        ga[c] += ws.bar[r] * ws.x[c];
                    }
                    for i in 0..d {
                        ga[i] += ws.dbar[i * w_out + r];
                    }
                } else {
                    let pv = &ws.v[l - 1];
                    for c in 0..w_in {
                        ga[c] += ws.bar[r] * pv[c];
                    }
                    for i in 0..d {
                        let db = ws.dbar[i * w_out + r];
                        let pdv = &ws.dv[l - 1][i * w_in..(i + 1) * w_in];
                        for c in 0..w_in {
                            ga[c] += db * pdv[c];
                        }
                        if ws.order >= 2 {
                            let ddb = ws.ddbar[i * w_out + r];
                            let pddv = &ws.ddv[l - 1][i * w_in..(i + 1) * w_in];
                            for c in 0..w_in {
                                ga[c] += ddb * pddv[c];
                            }
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            ws.prev_bar.clear();
            ws.prev_bar.resize(w_in, 0.0);
            ws.prev_dbar.clear();
            ws.prev_dbar.resize(d * w_in, 0.0);
            ws.prev_ddbar.clear();
            ws.prev_ddbar.resize(d * w_in, 0.0);
            for r in 0..w_out {
                let row = &a[r * w_in..(r + 1) * w_in];
                for c in 0..w_in {
                    ws.prev_bar[c] += row[c] * ws.bar[r];
                }
                for i in 0..d {
                    let db = ws.dbar[i * w_out + r];
                    for c in 0..w_in {
                        ws.prev_dbar[i * w_in + c] += row[c] * db;
                    }
                    if ws.order >= 2 {
                        let ddb = ws.ddbar[i * w_out + r];
                        for c in 0..w_in {
                            ws.prev_ddbar[i * w_in + c] += row[c] * ddb;
                        }
                    }
                }
            }
            std::mem::swap(&mut ws.bar, &mut ws.prev_bar);
            std::mem::swap(&mut ws.dbar, &mut ws.prev_dbar);
            std::mem::swap(&mut ws.ddbar, &mut ws.prev_ddbar);
        }
    }

    /// Allocating convenience around [`Mlp::forward`], for callers outside
    /// hot loops.
    pub fn jet(&self, x: &[f64], order: u8) -> Jet {
        let mut ws = Workspace::new(&self.spec);
        self.forward(x, order, &mut ws);
        let out = self.spec.output_dim;
        let d = if order >= 1 { self.spec.input_dim } else { 0 };
        Jet {
            value: ws.value().to_vec(),
            first: (0..d).map(|i| ws.first(i).to_vec()).collect(),
            second: if order >= 2 {
                (0..d).map(|i| ws.second(i).to_vec()).collect()
            } else {
                Vec::new()
            },
            output_dim: out,
        }
    }
}

/// Value and diagonal derivative tangents of a network at one point.
/// `first[i][j]` is ∂u_j/∂x_i, `second[i][j]` is ∂²u_j/∂x_i².
#[derive(Debug, Clone)]
pub struct Jet {
    pub value: Vec<f64>,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    output_dim: usize,
}

impl Jet {
    pub fn scalar(&self) -> f64 {
        self.value[0]
    }

    pub fn gradient(&self, j: usize) -> Vec<f64> {
        self.first.iter().map(|f| f[j]).collect()
    }

    pub fn laplacian(&self, j: usize) -> f64 {
        self.second.iter().map(|s| s[j]).sum()
    }

    pub fn divergence(&self) -> f64 {
        (0..self.output_dim.min(self.first.len()))
            .map(|i| self.first[i][i])
            .sum()
    }
}

/// Reusable forward/backward buffers for one network shape. Holding these
/// outside the training loop keeps the per-point evaluation allocation-free.
#[derive(Debug)]
pub struct Workspace {
    order: u8,
    x: Vec<f64>,
    z: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    dz: Vec<Vec<f64>>,
    dv: Vec<Vec<f64>>,
    ddz: Vec<Vec<f64>>,
    ddv: Vec<Vec<f64>>,
    bar: Vec<f64>,
    dbar: Vec<f64>,
    ddbar: Vec<f64>,
    prev_bar: Vec<f64>,
    prev_dbar: Vec<f64>,
    prev_ddbar: Vec<f64>,
    output_dim: usize,
}

impl Workspace {
    pub fn new(spec: &MlpSpec) -> Self {
        let dims = spec.dims();
        let d = spec.input_dim;
        let make = |scale: usize| dims[1..].iter().map(|&w| vec![0.0; scale * w]).collect();
        Workspace {
            order: 0,
            x: Vec::with_capacity(d),
            z: make(1),
            v: make(1),
            dz: make(d),
            dv: make(d),
            ddz: make(d),
            ddv: make(d),
            bar: Vec::new(),
            dbar: Vec::new(),
            ddbar: Vec::new(),
            prev_bar: Vec::new(),
            prev_dbar: Vec::new(),
            prev_ddbar: Vec::new(),
            output_dim: spec.output_dim,
        }
    }

    pub fn value(&self) -> &[f64] {
        self.v.last().unwrap()
    }

    /// ∂u/∂x_i of all outputs.
    pub fn first(&self, i: usize) -> &[f64] {
        let w = self.output_dim;
        &self.dv.last().unwrap()[i * w..(i + 1) * w]
    }

    /// ∂²u/∂x_i² of all outputs.
    pub fn second(&self, i: usize) -> &[f64] {
        let w = self.output_dim;
        &self.ddv.last().unwrap()[i * w..(i + 1) * w]
    }
}

/// Combine networks of equal depth and input dimension into one network
/// whose output is the concatenation of theirs: first-layer weights stack,
/// deeper layers go block-diagonal, biases stack.
pub fn parallelize(nets: &[Mlp]) -> Result<Mlp> {
    let first = nets
        .first()
        .ok_or_else(|| invalid("parallelize needs at least one network"))?;
    let depth = first.spec.n_layers();
    let input_dim = first.spec.input_dim;
    for n in nets {
        if n.spec.input_dim != input_dim || n.spec.n_layers() != depth {
            return Err(invalid(
                "parallelize requires equal input dimension and depth",
            ));
        }
    }
    let hidden: Vec<usize> = (0..depth - 1)
        .map(|l| nets.iter().map(|n| n.spec.hidden[l]).sum())
        .collect();
    let output_dim = nets.iter().map(|n| n.spec.output_dim).sum();
    let spec = MlpSpec::new(input_dim, hidden, output_dim)?;
    let mut combined = Mlp::zeros(spec);
    let comb_dims = combined.spec.dims();
    for l in 0..depth {
        let LayerOffsets { a, b, w_in, w_out } = combined.layers[l];
        let _ = (w_in, w_out);
        let mut row0 = 0;
        let mut col0 = 0;
        for net in nets {
            let (na, nb, n_in, n_out) = net.layer(l);
            for r in 0..n_out {
                let dst_row = row0 + r;
                let dst = a + dst_row * comb_dims[l] + if l == 0 { 0 } else { col0 };
                combined.params[dst..dst + n_in].copy_from_slice(&na[r * n_in..(r + 1) * n_in]);
                combined.params[b + dst_row] = nb[r];
            }
            row0 += n_out;
            if l > 0 {
                col0 += n_in;
            }
        }
    }
    Ok(combined)
}

/// Pointwise projection onto [lo, hi]. The derivative mask is 1 on the
/// closed interval (boundary included) and exactly 0 outside, so clipped
/// samples contribute nothing to gradients.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Cutoff {
    pub lo: f64,
    pub hi: f64,
}

impl Cutoff {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(invalid(format!(
                "cutoff bounds [{lo}, {hi}] must be finite with lo < hi"
            )));
        }
        Ok(Cutoff { lo, hi })
    }

    pub fn apply(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    /// Derivative of [`Cutoff::apply`] at `v`.
    pub fn mask(&self, v: f64) -> f64 {
        if (self.lo..=self.hi).contains(&v) {
            1.0
        } else {
            0.0
        }
    }
}

/// Adam with the usual bias correction; β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
