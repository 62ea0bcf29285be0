//! Rectangular value-table grids over the (p_hat, p_tail) state plane.

use crate::error::{Error, Result};

/// Interpolation rule used when a value table is queried off-node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

impl Interpolation {
    pub fn name(self) -> &'static str {
        match self {
            Interpolation::Nearest => "nearest",
            Interpolation::Bilinear => "bilinear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Interpolation::Nearest),
            "bilinear" => Ok(Interpolation::Bilinear),
            other => Err(Error::InvalidArgument(format!(
                "unknown interpolation {other:?} (expected nearest or bilinear)"
            ))),
        }
    }
}

/// Uniform grid over [0, u_max] × [0, v_max] with n_u × n_v nodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub u_max: f64,
    pub v_max: f64,
    pub n_u: usize,
    pub n_v: usize,
    pub interpolation: Interpolation,
}

impl GridSpec {
    pub fn new(
        u_max: f64,
        v_max: f64,
        n_u: usize,
        n_v: usize,
        interpolation: Interpolation,
    ) -> Result<Self> {
        if !(u_max > 0.0 && u_max.is_finite()) || !(v_max > 0.0 && v_max.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "grid extents ({u_max}, {v_max}) must be positive and finite"
            )));
        }
        if n_u < 2 || n_v < 2 {
            return Err(Error::InvalidGrid(format!(
                "grid needs at least 2 nodes per axis, got {n_u} x {n_v}"
            )));
        }
        Ok(GridSpec {
            u_max,
            v_max,
            n_u,
            n_v,
            interpolation,
        })
    }

    /// Square grid over [0, 1/M]² with `n` nodes per axis, the natural domain
    /// when every tracked probability is at most 1/M.
    pub fn square_for(m: u32, n: usize, interpolation: Interpolation) -> Result<Self> {
        let cap = 1.0 / m as f64;
        GridSpec::new(cap, cap, n, n, interpolation)
    }

    #[inline]
    pub fn u_step(&self) -> f64 {
        self.u_max / (self.n_u - 1) as f64
    }

    #[inline]
    pub fn v_step(&self) -> f64 {
        self.v_max / (self.n_v - 1) as f64
    }

    /// True when both steps reach the reference resolution: a step of at most
    /// 1e-3 after rescaling the axis extent by the symbol prior 1/M (i.e.
    /// step ≤ 1e-3 · extent · M). Coarser grids still work but the tabulated
    /// values carry visible interpolation bias; callers warn on a miss.
    pub fn meets_reference_resolution(&self, m: u32) -> bool {
        let scale = 1e-3 * m as f64;
        self.u_step() <= self.u_max * scale * (1.0 + 1e-12)
            && self.v_step() <= self.v_max * scale * (1.0 + 1e-12)
    }
}

/// One grid axis: node i sits at i·step, i < n.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    pub n: usize,
    pub step: f64,
}

impl Axis {
    pub fn new(n: usize, step: f64) -> Self {
        debug_assert!(n >= 2 && step > 0.0);
        Axis { n, step }
    }

    #[inline]
    pub fn max(&self) -> f64 {
        self.step * (self.n - 1) as f64
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        self.step * i as f64
    }

    /// Cell index and fractional offset for a query, clamped to the axis.
    /// Returns (i, t) with the query ≈ node(i)·(1−t) + node(i+1)·t, t ∈ [0, 1],
    /// and whether clamping occurred beyond a 1e-12·max tolerance.
    #[inline]
    pub fn locate(&self, x: f64) -> (usize, f64, bool) {
        let max = self.max();
        let clamped = !(-1e-12 * max.max(1.0)..=max * (1.0 + 1e-12)).contains(&x);
        let x = x.clamp(0.0, max);
        let raw = x / self.step;
        let mut i = raw as usize;
        if i >= self.n - 1 {
            i = self.n - 2;
        }
        let t = (raw - i as f64).clamp(0.0, 1.0);
        (i, t, clamped)
    }
}
