//! Pointwise evaluators shared by the FEM, synthesis and network modules.
//!
//! Points are passed as `&[f64]` of length `dim`; gradients use a fixed
//! `[f64; 2]` with the trailing component zero in 1D so that call sites never
//! branch on dimension.

use std::sync::Arc;

/// A scalar function with a gradient, and optionally a laplacian.
///
/// `laplacian` panics by default; only call it on fields that advertise one
/// (closed-form truths built with [`SmoothFn::with_laplacian`], scalar MLPs).
pub trait ScalarField: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> [f64; 2];
    fn laplacian(&self, x: &[f64]) -> f64 {
        let _ = x;
        panic!("laplacian not available for this field")
    }
}

/// A vector-valued function (flux); `divergence` is the trace of its Jacobian.
pub trait VectorField: Send + Sync {
    fn value(&self, x: &[f64]) -> [f64; 2];
    fn divergence(&self, x: &[f64]) -> f64;
}

type VFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GFn = Arc<dyn Fn(&[f64]) -> [f64; 2] + Send + Sync>;

/// Closed-form scalar field assembled from closures.
#[derive(Clone)]
pub struct SmoothFn {
    value: VFn,
    grad: GFn,
    lap: Option<VFn>,
}

impl SmoothFn {
    pub fn new(
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> [f64; 2] + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            grad: Arc::new(grad),
            lap: None,
        }
    }

    pub fn with_laplacian(
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> [f64; 2] + Send + Sync + 'static,
        lap: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            grad: Arc::new(grad),
            lap: Some(Arc::new(lap)),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::with_laplacian(move |_| c, |_| [0.0, 0.0], |_| 0.0)
    }

    /// Field with no usable gradient (derived source terms); `gradient`
    /// panics if called.
    pub fn value_only(value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(value, |_| {
            panic!("gradient not available for this SmoothFn")
        })
    }

    pub fn has_laplacian(&self) -> bool {
        self.lap.is_some()
    }
}

impl ScalarField for SmoothFn {
    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }
    fn gradient(&self, x: &[f64]) -> [f64; 2] {
        (self.grad)(x)
    }
    fn laplacian(&self, x: &[f64]) -> f64 {
        match &self.lap {
            Some(l) => l(x),
            None => panic!("laplacian not available for this SmoothFn"),
        }
    }
}

/// Closed-form vector field (used to inject exact fluxes into the mixed loss).
#[derive(Clone)]
pub struct SmoothVecFn {
    value: GFn,
    div: VFn,
}

impl SmoothVecFn {
    pub fn new(
        value: impl Fn(&[f64]) -> [f64; 2] + Send + Sync + 'static,
        div: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            div: Arc::new(div),
        }
    }
}

impl VectorField for SmoothVecFn {
    fn value(&self, x: &[f64]) -> [f64; 2] {
        (self.value)(x)
    }
    fn divergence(&self, x: &[f64]) -> f64 {
        (self.div)(x)
    }
}

pub fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}
