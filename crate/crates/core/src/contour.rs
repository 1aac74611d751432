//! Rectangular integration contour around the signal clusters.
//!
//! All contour representations in this crate integrate over the clockwise
//! boundary of the rectangle `[t2- - eps, t2+ + eps] x [-delta, delta]`,
//! which encloses every signal cluster and leaves the noise cluster
//! outside. Nodes are composite Gauss-Legendre per side; the node layout
//! is exactly mirror-symmetric about the real axis, so integrands with
//! the symmetry `f(conj z) = conj f(z)` produce exactly real Cauchy
//! integrals up to rounding.

use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;

use crate::error::{Error, Result};
use crate::spectrum::SpectralSupport;
use crate::C64;

/// Hard cap for the node-doubling drivers.
pub const MAX_NODES_PER_SIDE: usize = 4096;

/// Clockwise rectangular contour with Gauss-Legendre nodes.
#[derive(Clone, Debug)]
pub struct RectContour {
    pub x_lo: f64,
    pub x_hi: f64,
    pub half_height: f64,
    pub nodes_per_side: usize,
    /// Real-axis margin the contour keeps from the enclosed clusters;
    /// poles closer than a fraction of this to the path are suspect.
    pub epsilon: f64,
    /// `(node, weight)` pairs, clockwise; `sum w_i f(z_i)` approximates
    /// the (un-normalized) contour integral.
    nodes: Vec<(C64, C64)>,
}

/// Symmetrized Gauss-Legendre rule on [-1, 1], ascending nodes.
fn legendre_rule(n: usize) -> Result<Vec<(f64, f64)>> {
    let n_nz = NonZeroUsize::new(n)
        .ok_or_else(|| Error::InvalidInput("node count must be positive".into()))?;
    let mut pairs: Vec<(f64, f64)> = GaussLegendre::new(n_nz).into_node_weight_pairs().into_vec();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // Enforce the exact +- symmetry of the rule so mirrored contour nodes
    // are exact conjugates.
    let len = pairs.len();
    for i in 0..len / 2 {
        let j = len - 1 - i;
        let x = 0.5 * (pairs[j].0 - pairs[i].0);
        let w = 0.5 * (pairs[i].1 + pairs[j].1);
        pairs[i] = (-x, w);
        pairs[j] = (x, w);
    }
    if len % 2 == 1 {
        pairs[len / 2].0 = 0.0;
    }
    Ok(pairs)
}

impl RectContour {
    /// Builds the rectangle directly from its geometry.
    pub fn new(
        x_lo: f64,
        x_hi: f64,
        half_height: f64,
        epsilon: f64,
        nodes_per_side: usize,
    ) -> Result<Self> {
        if x_lo.partial_cmp(&x_hi) != Some(std::cmp::Ordering::Less)
            || half_height.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
        {
            return Err(Error::InvalidInput(format!(
                "degenerate rectangle [{x_lo}, {x_hi}] x [-{half_height}, {half_height}]"
            )));
        }
        let rule = legendre_rule(nodes_per_side)?;
        let mid = 0.5 * (x_lo + x_hi);
        let half_w = 0.5 * (x_hi - x_lo);
        let mut nodes = Vec::with_capacity(4 * nodes_per_side);
        // Clockwise: top left-to-right, right side downward, bottom
        // right-to-left, left side upward.
        for &(t, w) in &rule {
            nodes.push((
                C64::new(mid + half_w * t, half_height),
                C64::new(half_w * w, 0.0),
            ));
        }
        for &(t, w) in &rule {
            // z = x_hi + i y, y running from +delta down to -delta.
            nodes.push((
                C64::new(x_hi, half_height * t),
                C64::new(0.0, -half_height * w),
            ));
        }
        for &(t, w) in &rule {
            nodes.push((
                C64::new(mid + half_w * t, -half_height),
                C64::new(-half_w * w, 0.0),
            ));
        }
        for &(t, w) in &rule {
            nodes.push((
                C64::new(x_lo, half_height * t),
                C64::new(0.0, half_height * w),
            ));
        }
        Ok(RectContour {
            x_lo,
            x_hi,
            half_height,
            nodes_per_side,
            epsilon,
            nodes,
        })
    }

    /// Rectangle around the signal clusters of a separated support.
    pub fn from_support(support: &SpectralSupport, nodes_per_side: usize) -> Result<Self> {
        let (t2_lo, t2_hi) = support
            .thresholds
            .t2
            .ok_or_else(|| Error::Separation("no signal cluster to enclose".into()))?;
        if !support.separated() {
            return Err(Error::Separation(
                "A-1/A-2 fail: the contour estimator has no consistency premise".into(),
            ));
        }
        let eps = support.thresholds.epsilon;
        let contour = RectContour::new(
            t2_lo - eps,
            t2_hi + eps,
            support.thresholds.delta,
            eps,
            nodes_per_side,
        )?;
        debug_assert!(contour.x_lo > support.thresholds.t1.1);
        Ok(contour)
    }

    pub fn nodes(&self) -> &[(C64, C64)] {
        &self.nodes
    }

    /// Same rectangle with a different node count.
    pub fn with_nodes(&self, nodes_per_side: usize) -> Result<Self> {
        RectContour::new(
            self.x_lo,
            self.x_hi,
            self.half_height,
            self.epsilon,
            nodes_per_side,
        )
    }

    /// Pushes the vertical sides outward and raises the height, keeping
    /// the same node count. Used to retry when a pole crowds the path.
    pub fn inflated(&self, extra: f64) -> Result<Self> {
        RectContour::new(
            self.x_lo - extra,
            self.x_hi + extra,
            self.half_height + extra,
            self.epsilon,
            self.nodes_per_side,
        )
    }

    /// Whether a real pole sits strictly inside the rectangle.
    pub fn encloses(&self, x: f64) -> bool {
        x > self.x_lo && x < self.x_hi
    }

    /// Distance from a real point to the contour path.
    pub fn distance_to_real(&self, x: f64) -> f64 {
        if self.encloses(x) {
            (x - self.x_lo).min(self.x_hi - x).min(self.half_height)
        } else {
            (x - self.x_lo).abs().min((x - self.x_hi).abs())
        }
    }

    /// Raw contour sum `sum w_i f(z_i)` (clockwise orientation).
    pub fn integrate<F>(&self, mut f: F) -> Result<C64>
    where
        F: FnMut(C64) -> Result<C64>,
    {
        let mut acc = C64::new(0.0, 0.0);
        for &(z, w) in &self.nodes {
            acc += w * f(z)?;
        }
        Ok(acc)
    }

    /// `(1/2 pi i) * integral`, the form every estimator consumes.
    pub fn cauchy<F>(&self, f: F) -> Result<C64>
    where
        F: FnMut(C64) -> Result<C64>,
    {
        let raw = self.integrate(f)?;
        Ok(raw / C64::new(0.0, 2.0 * std::f64::consts::PI))
    }
}

/// Node-doubling driver: evaluates the Cauchy integral at increasing node
/// counts until two successive values agree to `tol` (relative), then
/// returns the finer one.
pub fn stabilized_cauchy<F>(contour: &RectContour, mut f: F, tol: f64) -> Result<C64>
where
    F: FnMut(C64) -> Result<C64>,
{
    let mut n = contour.nodes_per_side.max(8);
    let mut prev: Option<C64> = None;
    loop {
        let c = contour.with_nodes(n)?;
        let val = c.cauchy(&mut f)?;
        if let Some(p) = prev {
            if (val - p).norm() <= tol * val.norm().max(1.0) {
                return Ok(val);
            }
        }
        prev = Some(val);
        n *= 2;
        if n > MAX_NODES_PER_SIDE {
            return Err(Error::Numerical(format!(
                "contour quadrature did not stabilize to {tol} within {MAX_NODES_PER_SIDE} nodes/side"
            )));
        }
    }
}
