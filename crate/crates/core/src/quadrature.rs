//! Gauss–Legendre rules and the box/ball integrators built on them.
//!
//! Point singularities are handled by splitting a box at the singular point
//! and integrating each piece in spherical coordinates centred there, with
//! the radial integral broken at caller-supplied radii (jump surfaces of a
//! regularized field).

use std::f64::consts::PI;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = 0.0;
            for k in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * k + 1) as f64 * z * p1 - k as f64 * p2) / (k + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// A Gauss–Legendre rule mapped onto an interval.
#[derive(Clone, Debug)]
pub struct GaussRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussRule {
    pub fn new(n: usize) -> Self {
        let (nodes, weights) = gauss_legendre(n);
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Iterates `(node, weight)` pairs of the rule mapped to `[a, b]`.
    pub fn on(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes.iter().zip(&self.weights).map(move |(&z, &w)| (mid + half * z, half * w))
    }

    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.on(a, b).map(|(x, w)| w * f(x)).sum()
    }

    /// Integrates over `[a, b]` with the interval split at every breakpoint
    /// strictly inside it.
    pub fn integrate_split(&self, a: f64, b: f64, breakpoints: &[f64], mut f: impl FnMut(f64) -> f64) -> f64 {
        let mut cuts: Vec<f64> = breakpoints.iter().copied().filter(|&c| c > a && c < b).collect();
        cuts.sort_by(f64::total_cmp);
        let mut total = 0.0;
        let mut lo = a;
        for hi in cuts.into_iter().chain(std::iter::once(b)) {
            total += self.integrate(lo, hi, &mut f);
            lo = hi;
        }
        total
    }
}

/// Tensor-product Gauss rule over the box `[lo, hi]`; returns the integral.
pub fn integrate_box(lo: &[f64], hi: &[f64], rule: &GaussRule, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let d = lo.len();
    let n = rule.order();
    let mapped: Vec<Vec<(f64, f64)>> = (0..d).map(|a| rule.on(lo[a], hi[a]).collect()).collect();
    let mut idx = vec![0usize; d];
    let mut x = vec![0.0; d];
    let mut total = 0.0;
    let count = n.pow(d as u32);
    for _ in 0..count {
        let mut w = 1.0;
        for a in 0..d {
            let (xa, wa) = mapped[a][idx[a]];
            x[a] = xa;
            w *= wa;
        }
        total += w * f(&x);
        for a in (0..d).rev() {
            idx[a] += 1;
            if idx[a] < n {
                break;
            }
            idx[a] = 0;
        }
    }
    total
}

/// Integral over the box `[lo, hi]` of an integrand singular at `center`.
///
/// The box is cut into at most `2^d` sub-boxes having `center` as a corner;
/// each piece is integrated along rays from `center`, splitting the ray
/// integral where it crosses the spheres of radius `radii`.
pub fn integrate_box_around(
    lo: &[f64],
    hi: &[f64],
    center: &[f64],
    radii: &[f64],
    rule: &GaussRule,
    f: &mut dyn FnMut(&[f64]) -> f64,
) -> f64 {
    let d = lo.len();
    let mut total = 0.0;
    for corner in 0..(1usize << d) {
        let mut extent = vec![0.0; d];
        let mut sign = vec![0.0; d];
        let mut empty = false;
        for a in 0..d {
            let (e, s) = if corner >> a & 1 == 0 { (center[a] - lo[a], -1.0) } else { (hi[a] - center[a], 1.0) };
            if e <= 0.0 {
                empty = true;
                break;
            }
            extent[a] = e;
            sign[a] = s;
        }
        if empty {
            continue;
        }
        total += integrate_corner_box(center, &extent, &sign, radii, rule, f);
    }
    total
}

/// Corner box `center + sign * [0, extent]`, split into one pyramid per face
/// with apex at `center`. On the pyramid of face `a`, `y_a = s e_a` and
/// `y_b = s u_b e_b`; the Jacobian `s^{d-1}` cancels a `|y|^{1-d}` singularity.
fn integrate_corner_box(
    center: &[f64],
    extent: &[f64],
    sign: &[f64],
    radii: &[f64],
    rule: &GaussRule,
    f: &mut dyn FnMut(&[f64]) -> f64,
) -> f64 {
    let d = center.len();
    let jac: f64 = extent.iter().product();
    let mut x = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut u = vec![0usize; d.saturating_sub(1)];
    let n = rule.order();
    let mut breaks = Vec::with_capacity(radii.len());
    let mut total = 0.0;
    for face in 0..d {
        let others: Vec<usize> = (0..d).filter(|&b| b != face).collect();
        u.iter_mut().for_each(|i| *i = 0);
        loop {
            let mut wu = 1.0;
            v[face] = extent[face];
            for (k, &b) in others.iter().enumerate() {
                let t = 0.5 * (rule.nodes[u[k]] + 1.0);
                wu *= 0.5 * rule.weights[u[k]];
                v[b] = t * extent[b];
            }
            let len = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            breaks.clear();
            breaks.extend(radii.iter().map(|r| r / len));
            let inner = rule.integrate_split(0.0, 1.0, &breaks, |s| {
                for a in 0..d {
                    x[a] = center[a] + sign[a] * s * v[a];
                }
                f(&x) * s.powi(d as i32 - 1)
            });
            total += wu * inner;
            let mut k = 0;
            while k < u.len() {
                u[k] += 1;
                if u[k] < n {
                    break;
                }
                u[k] = 0;
                k += 1;
            }
            if k == u.len() {
                break;
            }
        }
    }
    total * jac
}

/// Volume of the unit ball in `d` dimensions.
pub fn unit_ball_volume(d: usize) -> f64 {
    let half = d as f64 / 2.0;
    PI.powf(half) / statrs::function::gamma::gamma(half + 1.0)
}

/// Normalised quadrature on the unit ball: points `y` with `|y| <= 1` and
/// weights summing to one. Radius uses the graded substitution `|y| = s^2`.
pub fn unit_ball_rule(d: usize, radial_order: usize, directions: &[Vec<f64>]) -> Vec<(Vec<f64>, f64)> {
    let rule = GaussRule::new(radial_order);
    let mut out = Vec::with_capacity(radial_order * directions.len());
    // ∫_0^1 rho^{d-1} drho = 1/d; with rho = s^2, drho = 2 s ds.
    let mut raw = Vec::new();
    for (s, w) in rule.on(0.0, 1.0) {
        let rho = s * s;
        raw.push((rho, w * 2.0 * s * rho.powi(d as i32 - 1)));
    }
    let radial_mass: f64 = raw.iter().map(|(_, w)| w).sum();
    let dir_w = 1.0 / directions.len() as f64;
    for (rho, w) in &raw {
        for dir in directions {
            let y: Vec<f64> = dir.iter().map(|c| c * rho).collect();
            out.push((y, w / radial_mass * dir_w));
        }
    }
    out
}
