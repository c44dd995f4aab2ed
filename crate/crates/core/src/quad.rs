//! Composite Gauss–Legendre quadrature with panel doubling.

use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;

use crate::error::{Error, Result};

/// Nodes per panel.
pub const PANEL_ORDER: usize = 16;

/// Reference Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussRule {
    pairs: Vec<(f64, f64)>,
}

impl GaussRule {
    pub fn new(order: usize) -> Self {
        let order = NonZeroUsize::new(order.max(1)).expect("order is at least 1");
        let mut pairs = GaussLegendre::new(order).as_node_weight_pairs().to_vec();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self { pairs }
    }

    pub fn order(&self) -> usize {
        self.pairs.len()
    }

    /// Nodes and weights of the composite rule with `panels` equal panels on `[a, b]`,
    /// ordered from `a` towards `b`.
    pub fn composite(&self, a: f64, b: f64, panels: usize) -> Vec<(f64, f64)> {
        let panels = panels.max(1);
        let width = (b - a) / panels as f64;
        let mut out = Vec::with_capacity(panels * self.pairs.len());
        for p in 0..panels {
            let lo = a + width * p as f64;
            let mid = lo + 0.5 * width;
            for &(x, w) in &self.pairs {
                out.push((mid + 0.5 * width * x, 0.5 * width * w));
            }
        }
        out
    }
}

impl Default for GaussRule {
    fn default() -> Self {
        Self::new(PANEL_ORDER)
    }
}

/// Integrates `f` over `[a, b]`, doubling the number of panels (starting at
/// `min_panels`) until two successive estimates differ by at most
/// `rel_tol · max(1, |I|)`.
pub fn integrate_adaptive<F>(mut f: F, a: f64, b: f64, min_panels: usize, rel_tol: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    const MAX_PANELS: usize = 1 << 14;
    let rule = GaussRule::default();
    let mut panels = min_panels.max(1);
    let mut previous = sum(&rule.composite(a, b, panels), &mut f)?;
    while panels < MAX_PANELS {
        panels *= 2;
        let current = sum(&rule.composite(a, b, panels), &mut f)?;
        if (current - previous).abs() <= rel_tol * current.abs().max(1.0) {
            return Ok(current);
        }
        previous = current;
    }
    Err(Error::Numerical(format!(
        "quadrature on [{a}, {b}] did not reach relative tolerance {rel_tol:e} with {MAX_PANELS} panels"
    )))
}

fn sum<F: FnMut(f64) -> Result<f64>>(nodes: &[(f64, f64)], f: &mut F) -> Result<f64> {
    let mut acc = 0.0;
    for &(x, w) in nodes {
        let v = f(x)?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("non-finite integrand at {x}")));
        }
        acc += w * v;
    }
    Ok(acc)
}
