//! Duhamel–Neumann solution of `(λ + ∂t − Δ + b·∇)u = f`, the Cauchy
//! propagator, an independent finite-difference oracle, residual checks,
//! approximation sweeps in the regularization level and weighted bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{regularize, VectorField, VectorFieldSpec};
use crate::lattice::{LatticeGrid, SampleMode, ScalarLattice, SpatialLattice, VectorLattice};
use crate::potentials::{
    delta_initial_potential, gradient_potential_apply, inverse_potential_apply, potential_apply, probe_operator_norm,
    spectral_gradient, DeltaKind, DeltaPotential, Direction, DriftOpKind, DriftOperators, OperatorProbeReport,
    PlanCache, PlanSpec,
};
use crate::quadrature::{integrate_box, integrate_box_around, GaussRule};
use crate::stats::ols;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub p: f64,
    pub lambda: f64,
    /// Largest number of `T_p` applications in the series.
    pub max_terms: usize,
    /// Stop once a term's `p`-norm falls below `tol · ‖f‖_p`.
    pub tol: f64,
    pub probes: usize,
    pub seed: u64,
    /// Sum the series even when the gate is not below 1.
    pub force: bool,
}

impl SolveOptions {
    pub fn new(p: f64, lambda: f64) -> Self {
        Self { p, lambda, max_terms: 60, tol: 1e-10, probes: 64, seed: 0, force: false }
    }

    fn validate(&self) -> Result<()> {
        if !(self.p > 1.0 && self.p.is_finite()) {
            return Err(Error::Config(format!("p must lie in (1, inf), got {}", self.p)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveReport {
    #[serde(skip)]
    pub u: Option<ScalarLattice>,
    pub p: f64,
    pub lambda: f64,
    /// Number of `T_p` applications summed.
    pub terms: usize,
    /// `‖(−T_p)^k w‖_p` for `k = 0..=terms`.
    pub term_norms: Vec<f64>,
    /// Successive ratios of `term_norms`.
    pub ratios: Vec<f64>,
    pub converged: bool,
    pub gate: OperatorProbeReport,
    pub source_norm: f64,
    pub u_norm: f64,
    pub u_sup: f64,
}

impl SolveReport {
    pub fn solution(&self) -> &ScalarLattice {
        self.u.as_ref().expect("solve report carries its solution")
    }
}

/// Probes `‖T_p‖` and refuses unless the lower bound is below 1.
pub fn gate(ops: &DriftOperators, opts: &SolveOptions) -> Result<OperatorProbeReport> {
    let report = probe_operator_norm(&ops.operator(DriftOpKind::T), ops.p, ops.lambda, opts.probes.max(16), opts.seed)?;
    if report.max_ratio >= 1.0 && !opts.force {
        return Err(Error::GateRefused { report: Box::new(report) });
    }
    Ok(report)
}

struct Series {
    sum: ScalarLattice,
    norms: Vec<f64>,
    ratios: Vec<f64>,
    converged: bool,
}

/// `Σ_k (−T_p)^k w`, truncated by `tol · scale`.
fn neumann_series(ops: &DriftOperators, w: ScalarLattice, opts: &SolveOptions, scale: f64) -> Result<Series> {
    let threshold = opts.tol * scale;
    let mut norms = vec![w.norm_p(opts.p)];
    let mut ratios = Vec::new();
    let mut sum = w.clone();
    let mut term = w;
    let mut rising = 0;
    let mut converged = norms[0] <= threshold;
    while !converged && norms.len() <= opts.max_terms {
        term = ops.op_t(&term)?.scaled(-1.0);
        let n = term.norm_p(opts.p);
        let prev = *norms.last().expect("nonempty");
        let ratio = if prev > 0.0 { n / prev } else { 0.0 };
        norms.push(n);
        ratios.push(ratio);
        if !n.is_finite() {
            return Err(Error::Divergence { ratios });
        }
        rising = if ratio >= 1.0 { rising + 1 } else { 0 };
        if rising >= 3 {
            return Err(Error::Divergence { ratios });
        }
        sum.values.iter_mut().zip(&term.values).for_each(|(s, t)| *s += t);
        converged = n <= threshold;
    }
    Ok(Series { sum, norms, ratios, converged })
}

fn finish(
    ops: &DriftOperators,
    base: ScalarLattice,
    series: Series,
    gate: OperatorProbeReport,
    opts: &SolveOptions,
    source_norm: f64,
) -> Result<SolveReport> {
    let u = if ops.is_zero() || series.sum.is_zero() {
        base
    } else {
        let corr = potential_apply(&ops.r_plan, &ops.op_q(&series.sum)?)?;
        base.sub(&corr)?
    };
    if !u.is_finite() {
        return Err(Error::Numerical("non-finite solution".into()));
    }
    Ok(SolveReport {
        p: opts.p,
        lambda: opts.lambda,
        terms: series.norms.len() - 1,
        term_norms: series.norms,
        ratios: series.ratios,
        converged: series.converged,
        gate,
        source_norm,
        u_norm: u.norm_p(opts.p),
        u_sup: u.sup(),
        u: Some(u),
    })
}

/// `u = P^{−1}f − P^{−1/2−1/(2p)} Q_p Σ(−T_p)^k R_p P^{−1/(2p')} f` with
/// `P = λ + ∂t − Δ`; the last two factors are applied as `b^{1/p}·∇P^{−1}f`.
pub fn neumann_solve(b: &VectorLattice, f: &ScalarLattice, opts: &SolveOptions) -> Result<SolveReport> {
    opts.validate()?;
    b.grid.same_shape(&f.grid)?;
    let ops = DriftOperators::new(b, opts.p, opts.lambda)?;
    neumann_solve_with(&ops, f, opts)
}

pub fn neumann_solve_with(ops: &DriftOperators, f: &ScalarLattice, opts: &SolveOptions) -> Result<SolveReport> {
    let gate = gate(ops, opts)?;
    let base = potential_apply(&ops.resolvent, f)?;
    let w = ops.r_of_resolvent(f)?;
    let scale = f.norm_p(opts.p);
    let series = neumann_series(ops, w, opts, scale)?;
    finish(ops, base, series, gate, opts, scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagateOptions {
    pub solve: SolveOptions,
    /// Report the `λ = 0` solution `e^{λ(t−r)} v_λ`; a source is then read at `λ = 0` too.
    pub rescale_to_zero_lambda: bool,
}

/// Initial data and optional source for the Cauchy problem on `[r, T₁]`.
pub struct CauchyData<'a> {
    pub g: &'a SpatialLattice,
    pub r: f64,
    pub source: Option<&'a ScalarLattice>,
}

/// Cauchy propagation `v(t) = U^{t,r} g` (plus source), zero before `r`.
pub fn cauchy_propagate(b: &VectorLattice, data: &CauchyData, opts: &PropagateOptions) -> Result<SolveReport> {
    opts.solve.validate()?;
    let ops = DriftOperators::new(b, opts.solve.p, opts.solve.lambda)?;
    cauchy_propagate_with(&ops, data, opts)
}

pub fn cauchy_propagate_with(ops: &DriftOperators, data: &CauchyData, opts: &PropagateOptions) -> Result<SolveReport> {
    let grid = ops.grid().clone();
    grid.same_shape(&data.g.grid)?;
    let jr = grid
        .time_index(data.r)
        .ok_or_else(|| Error::Domain(format!("initial time {} is not a node of the time window", data.r)))?;
    let lambda = opts.solve.lambda;
    let decay = |j: usize| if opts.rescale_to_zero_lambda { (-lambda * (grid.time(j) - data.r)).exp() } else { 1.0 };

    let gate = gate(ops, &opts.solve)?;
    let DeltaPotential::Scalar(mut base) = delta_initial_potential(data.g, data.r, lambda, DeltaKind::Resolvent)?
    else {
        unreachable!("resolvent kind yields a scalar lattice")
    };
    let mut grad = if ops.is_zero() { VectorLattice::zeros(&grid) } else { spectral_gradient(&ops.resolvent, &base)? };
    let mut scale = data.g.sobolev_norm(opts.solve.p);
    if let Some(f) = data.source {
        grid.same_shape(&f.grid)?;
        let mut fr = ScalarLattice::zeros(&grid);
        for j in jr..grid.n_time() {
            let c = if j == jr { 0.5 } else { 1.0 } * decay(j);
            fr.slice_mut(j).iter_mut().zip(f.slice(j)).for_each(|(o, v)| *o = c * v);
        }
        base = base.add_scaled(1.0, &potential_apply(&ops.resolvent, &fr)?)?;
        if !ops.is_zero() {
            let gf = gradient_potential_apply(&ops.resolvent, &fr)?;
            grad.values.iter_mut().zip(&gf.values).for_each(|(a, b)| *a += b);
        }
        scale += fr.norm_p(opts.solve.p);
    }
    let w = if ops.is_zero() { ScalarLattice::zeros(&grid) } else { ops.dot_root(&grad)? };
    let series = neumann_series(ops, w, &opts.solve, scale)?;
    let mut report = finish(ops, base, series, gate, &opts.solve, scale)?;
    let u = report.u.as_mut().expect("solution present");
    for j in 0..grid.n_time() {
        let c = if j < jr {
            0.0
        } else if opts.rescale_to_zero_lambda {
            1.0 / decay(j)
        } else {
            1.0
        };
        u.slice_mut(j).iter_mut().for_each(|v| *v *= c);
    }
    report.u_norm = u.norm_p(opts.solve.p);
    report.u_sup = u.sup();
    Ok(report)
}

/// Source for the finite-difference oracle.
pub enum OracleSource<'a> {
    /// `u(t₀) = 0` with right-hand side `f`.
    Rhs(&'a ScalarLattice),
    /// `u(r) = g`, optional right-hand side after `r`.
    Initial { g: &'a SpatialLattice, r: f64, f: Option<&'a ScalarLattice> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftStencil {
    Central,
    Upwind,
}

/// Backward Euler in `λ − Δ_h` (Jacobi sweeps), explicit drift. Central drift
/// differences when the mesh Péclet number `max|b| dx / 2` is at most one,
/// upwind otherwise.
pub fn time_stepping_reference(b: &VectorLattice, source: &OracleSource, lambda: f64) -> Result<ScalarLattice> {
    let grid = b.grid.clone();
    let d = grid.dim;
    let n = grid.n_space();
    let ns = grid.space_len();
    let nt = grid.n_time();
    let dt = grid.dt;
    let dx = grid.dx;
    let bmax = b.max_magnitude();
    let stencil = if bmax * dx / 2.0 <= 1.0 { DriftStencil::Central } else { DriftStencil::Upwind };
    let cfl = (0..grid.len()).map(|k| b.at(k).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max) * dt / dx;
    if cfl > 1.0 {
        return Err(Error::Numerical(format!("CFL number {cfl:.3} exceeds 1 for the explicit drift")));
    }
    let (j0, mut u, f) = match source {
        OracleSource::Rhs(f) => {
            grid.same_shape(&f.grid)?;
            (0, vec![0.0; ns], Some(*f))
        }
        OracleSource::Initial { g, r, f } => {
            grid.same_shape(&g.grid)?;
            let jr = grid.time_index(*r).ok_or_else(|| Error::Domain(format!("initial time {r} is not a node")))?;
            (jr, g.values.clone(), *f)
        }
    };
    let mut out = ScalarLattice::zeros(&grid);
    if matches!(source, OracleSource::Initial { .. }) {
        out.slice_mut(j0).copy_from_slice(&u);
    }
    let strides: Vec<usize> = (0..d).map(|a| n.pow((d - 1 - a) as u32)).collect();
    let mut idx = vec![0usize; d];
    let neighbours: Vec<Vec<(usize, usize)>> = (0..ns)
        .map(|s| {
            grid.unravel(s, &mut idx);
            (0..d)
                .map(|a| {
                    let lo = if idx[a] == 0 { s + strides[a] } else { s - strides[a] };
                    let hi = if idx[a] == n - 1 { s - strides[a] } else { s + strides[a] };
                    (lo, hi)
                })
                .collect()
        })
        .collect();
    let diag = 1.0 + dt * lambda + 2.0 * d as f64 * dt / (dx * dx);
    let off = dt / (dx * dx);
    let mut rhs = vec![0.0; ns];
    let mut next = vec![0.0; ns];
    for j in j0..nt - 1 {
        let bj = &b.values[j * ns * d..(j + 1) * ns * d];
        for s in 0..ns {
            grid.unravel(s, &mut idx);
            let mut adv = 0.0;
            for a in 0..d {
                let ba = bj[s * d + a];
                if ba == 0.0 {
                    continue;
                }
                let i = idx[a];
                let st = strides[a];
                let du = match stencil {
                    DriftStencil::Central => {
                        if i == 0 {
                            (u[s + st] - u[s]) / dx
                        } else if i == n - 1 {
                            (u[s] - u[s - st]) / dx
                        } else {
                            (u[s + st] - u[s - st]) / (2.0 * dx)
                        }
                    }
                    DriftStencil::Upwind => {
                        if (ba > 0.0 && i > 0) || i == n - 1 {
                            (u[s] - u[s - st]) / dx
                        } else {
                            (u[s + st] - u[s]) / dx
                        }
                    }
                };
                adv += ba * du;
            }
            let fj = f.map(|f| f.slice(j + 1)[s]).unwrap_or(0.0);
            rhs[s] = u[s] + dt * (fj - adv);
        }
        next.copy_from_slice(&u);
        let scale = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for _ in 0..10_000 {
            let mut change = 0.0f64;
            for s in 0..ns {
                let nb: f64 = neighbours[s].iter().map(|&(lo, hi)| next[lo] + next[hi]).sum();
                let v = (rhs[s] + off * nb) / diag;
                change = change.max((v - next[s]).abs());
                next[s] = v;
            }
            if change <= 1e-14 * scale {
                break;
            }
        }
        std::mem::swap(&mut u, &mut next);
        out.slice_mut(j + 1).copy_from_slice(&u);
    }
    if !out.is_finite() {
        return Err(Error::Numerical("oracle produced non-finite values".into()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub p_norm: f64,
    pub sup: f64,
    pub nodes: usize,
}

/// `λu + ∂t u − Δu + b·∇u − f` by central differences on interior nodes.
pub fn pde_residual(
    u: &ScalarLattice,
    b: &VectorLattice,
    f: &ScalarLattice,
    lambda: f64,
    p: f64,
) -> Result<ResidualSummary> {
    let grid = &u.grid;
    grid.same_shape(&b.grid)?;
    grid.same_shape(&f.grid)?;
    let d = grid.dim;
    let n = grid.n_space();
    let ns = grid.space_len();
    let nt = grid.n_time();
    let (dx, dt) = (grid.dx, grid.dt);
    let strides: Vec<usize> = (0..d).map(|a| n.pow((d - 1 - a) as u32)).collect();
    let mut idx = vec![0usize; d];
    let mut acc = 0.0;
    let mut sup = 0.0f64;
    let mut count = 0;
    for s in 0..ns {
        grid.unravel(s, &mut idx);
        if idx.iter().any(|&i| i == 0 || i == n - 1) {
            continue;
        }
        for j in 1..nt - 1 {
            let k = j * ns + s;
            let v = &u.values;
            let mut r = lambda * v[k] + (v[k + ns] - v[k - ns]) / (2.0 * dt) - f.values[k];
            for a in 0..d {
                let st = strides[a];
                r -= (v[k + st] - 2.0 * v[k] + v[k - st]) / (dx * dx);
                r += b.values[k * d + a] * (v[k + st] - v[k - st]) / (2.0 * dx);
            }
            sup = sup.max(r.abs());
            acc += r.abs().powf(p) * dt * dx.powi(d as i32);
            count += 1;
        }
    }
    Ok(ResidualSummary { p_norm: acc.powf(1.0 / p), sup, nodes: count })
}

/// `u*(t, x) = ((t − t₀)/(t₁ − t₀))² exp(−|x − c|²/(2σ²))` and its
/// right-hand side `(λ + ∂t − Δ + b·∇)u*` evaluated analytically at nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManufacturedSolution {
    pub sigma: f64,
    pub center: Vec<f64>,
}

impl ManufacturedSolution {
    pub fn new(dim: usize, sigma: f64) -> Self {
        Self { sigma, center: vec![0.0; dim] }
    }

    fn parts(&self, grid: &LatticeGrid, t: f64, x: &[f64]) -> (f64, f64, f64, Vec<f64>, f64) {
        let span = grid.t1 - grid.t0;
        let s = (t - grid.t0) / span;
        let phi = s * s;
        let dphi = 2.0 * s / span;
        let s2 = self.sigma * self.sigma;
        let r2: f64 = x.iter().zip(&self.center).map(|(a, c)| (a - c).powi(2)).sum();
        let g = (-r2 / (2.0 * s2)).exp();
        let grad: Vec<f64> = x.iter().zip(&self.center).map(|(a, c)| -(a - c) / s2 * g).collect();
        let lap = g * (r2 / (s2 * s2) - x.len() as f64 / s2);
        (phi, dphi, g, grad, lap)
    }

    pub fn exact(&self, grid: &LatticeGrid) -> ScalarLattice {
        ScalarLattice::from_fn(grid, |t, x| {
            let (phi, _, g, _, _) = self.parts(grid, t, x);
            phi * g
        })
    }

    pub fn rhs(&self, b: &VectorLattice, lambda: f64) -> ScalarLattice {
        let grid = &b.grid;
        let d = grid.dim;
        let ns = grid.space_len();
        let mut x = vec![0.0; d];
        let mut out = ScalarLattice::zeros(grid);
        for j in 0..grid.n_time() {
            let t = grid.time(j);
            for s in 0..ns {
                grid.point(s, &mut x);
                let (phi, dphi, g, grad, lap) = self.parts(grid, t, &x);
                let bv = b.at(j * ns + s);
                let adv: f64 = bv.iter().zip(&grad).map(|(p, q)| p * q).sum();
                out.values[j * ns + s] = dphi * g + phi * (lambda * g - lap + adv);
            }
        }
        out
    }
}

/// Relative sup distance `‖a − b‖_∞ / ‖b‖_∞`.
pub fn relative_sup_gap(a: &ScalarLattice, b: &ScalarLattice) -> Result<f64> {
    let scale = b.sup();
    let gap = a.sub(b)?.sup();
    Ok(if scale > 0.0 { gap / scale } else { gap })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakResidual {
    pub lhs: f64,
    pub rhs: f64,
    pub abs: f64,
    /// `|lhs − rhs| / max(|lhs|, |rhs|)`.
    pub rel: f64,
}

/// Compactly supported space-time bumps inside the lattice.
pub fn stock_test_functions(grid: &LatticeGrid, count: usize) -> Vec<ScalarLattice> {
    let span = grid.t1 - grid.t0;
    let reach = 0.5 * grid.half_width;
    (0..count)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / count.max(1) as f64;
            let shift = if k == 0 { 0.0 } else { 0.4 * reach };
            let center: Vec<f64> = (0..grid.dim)
                .map(|a| {
                    if a == 0 {
                        shift * theta.cos()
                    } else if a == 1 {
                        shift * theta.sin()
                    } else {
                        0.0
                    }
                })
                .collect();
            let radius = reach * (1.0 + 0.25 * (k % 3) as f64);
            let tc = grid.t0 + span * (0.45 + 0.05 * (k % 2) as f64);
            let tr = 0.3 * span;
            ScalarLattice::from_fn(grid, |t, x| {
                let r2: f64 = x.iter().zip(&center).map(|(a, c)| (a - c).powi(2)).sum::<f64>() / (radius * radius);
                let s2 = ((t - tc) / tr).powi(2);
                compact_bump(r2) * compact_bump(s2)
            })
        })
        .collect()
}

/// `exp(1 − 1/(1 − s))` for `s < 1`, zero otherwise.
pub fn compact_bump(s: f64) -> f64 {
    if s < 1.0 {
        (1.0 - 1.0 / (1.0 - s)).exp()
    } else {
        0.0
    }
}

/// Both sides of the `p = 2` weak identity
/// `⟨P^{3/4}u, P^{3/4}η⟩ + ⟨R_2 P^{3/4}u, Q_2^* P^{3/4}η⟩ = ⟨f, P_*^{−1/4} P^{3/4}η⟩`
/// with `P = λ+∂t−Δ`, `P_* = λ−∂t−Δ`. Positive powers invert the forward
/// `−3/4` plan exactly.
pub fn weak_form_residual(
    u: &ScalarLattice,
    b: &VectorLattice,
    f: &ScalarLattice,
    lambda: f64,
    etas: &[ScalarLattice],
) -> Result<Vec<WeakResidual>> {
    let grid = &u.grid;
    grid.same_shape(&b.grid)?;
    grid.same_shape(&f.grid)?;
    let cache = PlanCache::global();
    let p34 = cache.get(grid, PlanSpec::new(Direction::Forward, 1.5, lambda))?;
    let adj = cache.get(grid, PlanSpec::new(Direction::Backward, 0.5, lambda))?;
    let ops = DriftOperators::new(b, 2.0, lambda)?;
    let (pu, _) = inverse_potential_apply(&p34, u)?;
    let rpu = ops.op_r(&pu)?;
    etas.iter()
        .map(|eta| {
            let (pe, _) = inverse_potential_apply(&p34, eta)?;
            let smoothed = potential_apply(&adj, &pe)?;
            let mut qstar = smoothed.clone();
            qstar.values.iter_mut().zip(&ops.b_abs_dual.values).for_each(|(v, w)| *v *= w);
            let lhs = pu.dot(&pe)? + rpu.dot(&qstar)?;
            let rhs = f.dot(&smoothed)?;
            let abs = (lhs - rhs).abs();
            let den = lhs.abs().max(rhs.abs());
            Ok(WeakResidual { lhs, rhs, abs, rel: if den > 0.0 { abs / den } else { 0.0 } })
        })
        .collect()
}

/// Problem solved at every regularization level.
pub enum Problem<'a> {
    Rhs(&'a ScalarLattice),
    Cauchy { g: &'a SpatialLattice, r: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub levels: Vec<f64>,
    /// `‖u_{n_{i+1}} − u_{n_i}‖_p`.
    pub p_gaps: Vec<f64>,
    pub sup_gaps: Vec<f64>,
    pub terms: Vec<usize>,
    pub gates: Vec<f64>,
    pub norms: Vec<f64>,
}

/// Solves with `regularize(b, n)` at every level and tabulates Cauchy gaps.
pub fn approximation_convergence(
    b: &VectorFieldSpec,
    grid: &LatticeGrid,
    problem: &Problem,
    levels: &[f64],
    mode: SampleMode,
    opts: &SolveOptions,
) -> Result<ConvergenceTable> {
    if levels.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("levels must be strictly increasing".into()));
    }
    let mut solutions = Vec::with_capacity(levels.len());
    let mut table = ConvergenceTable {
        levels: levels.to_vec(),
        p_gaps: Vec::new(),
        sup_gaps: Vec::new(),
        terms: Vec::new(),
        gates: Vec::new(),
        norms: Vec::new(),
    };
    for &n in levels {
        let bn = VectorLattice::sample(&regularize(b, n)?, grid, mode)?;
        let report = match problem {
            Problem::Rhs(f) => neumann_solve(&bn, f, opts)?,
            Problem::Cauchy { g, r } => cauchy_propagate(
                &bn,
                &CauchyData { g, r: *r, source: None },
                &PropagateOptions { solve: opts.clone(), rescale_to_zero_lambda: false },
            )?,
        };
        table.terms.push(report.terms);
        table.gates.push(report.gate.max_ratio);
        table.norms.push(report.u_norm);
        solutions.push(report.u.expect("solution present"));
    }
    for w in solutions.windows(2) {
        let diff = w[1].sub(&w[0])?;
        table.p_gaps.push(diff.norm_p(opts.p));
        table.sup_gaps.push(diff.sup());
    }
    Ok(table)
}

/// `ρ(x) = (1 + l|x − y|²)^{−ν}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub l: f64,
    pub nu: f64,
    pub center: Vec<f64>,
}

impl WeightSpec {
    pub fn new(l: f64, nu: f64, dim: usize) -> Result<Self> {
        if !(l > 0.0 && nu > 0.0) {
            return Err(Error::Config("weight needs l > 0 and nu > 0".into()));
        }
        Ok(Self { l, nu, center: vec![0.0; dim] })
    }

    /// `ν > d/(2p) + 1/(p q')`.
    pub fn admissible(&self, p: f64, q: f64) -> bool {
        let d = self.center.len() as f64;
        let qd = q / (q - 1.0);
        self.nu > d / (2.0 * p) + 1.0 / (p * qd)
    }

    pub fn c1(&self) -> f64 {
        self.nu
    }

    pub fn c2(&self) -> f64 {
        2.0 * self.nu * (2.0 * self.nu + self.center.len() as f64 + 2.0)
    }

    fn r2(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.center).map(|(a, c)| (a - c).powi(2)).sum()
    }

    pub fn rho(&self, x: &[f64]) -> f64 {
        (1.0 + self.l * self.r2(x)).powf(-self.nu)
    }

    /// `|∇ρ| / (√l ρ) = 2ν √l |x| / (1 + l|x|²)`.
    pub fn grad_ratio(&self, x: &[f64]) -> f64 {
        let r2 = self.r2(x);
        2.0 * self.nu * self.l.sqrt() * r2.sqrt() / (1.0 + self.l * r2)
    }

    /// `|Δρ| / (l ρ)` from `Δρ = ρ l [4ν(ν+1) l r²/(1+lr²)² − 2νd/(1+lr²)]`.
    pub fn laplacian_ratio(&self, x: &[f64]) -> f64 {
        let r2 = self.r2(x);
        let d = self.center.len() as f64;
        let s = 1.0 + self.l * r2;
        (4.0 * self.nu * (self.nu + 1.0) * self.l * r2 / (s * s) - 2.0 * self.nu * d / s).abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightCheck {
    pub l: f64,
    pub nu: f64,
    pub max_grad_ratio: f64,
    pub max_laplacian_ratio: f64,
    pub c1: f64,
    pub c2: f64,
    pub pass: bool,
}

/// Maximum over lattice nodes of the two weight ratios against `c₁`, `c₂`.
pub fn check_weight_inequalities(weight: &WeightSpec, grid: &LatticeGrid) -> WeightCheck {
    let mut x = vec![0.0; grid.dim];
    let (mut g, mut l) = (0.0f64, 0.0f64);
    for s in 0..grid.space_len() {
        grid.point(s, &mut x);
        g = g.max(weight.grad_ratio(&x));
        l = l.max(weight.laplacian_ratio(&x));
    }
    let slack = 1.0 + 4.0 * f64::EPSILON;
    WeightCheck {
        l: weight.l,
        nu: weight.nu,
        max_grad_ratio: g,
        max_laplacian_ratio: l,
        c1: weight.c1(),
        c2: weight.c2(),
        pass: g <= weight.c1() * slack && l <= weight.c2() * slack,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoFinReport {
    pub horizons: Vec<f64>,
    pub norms: Vec<f64>,
    /// Fitted slope of `log ‖ρ 1_{[r,T]} |f|^{1/p}‖_p` against `log(T − r)`.
    pub slope: f64,
    pub p_times_slope: f64,
    pub per_norm_reading: f64,
    pub per_power_reading: f64,
    /// `−2νp + d/q' + (d+2)/q − 1`, must be below −1.
    pub tail_exponent: f64,
}

/// `‖ρ 1_{[r,T]} |f|^{1/p}‖_p` over a sweep of `T` and its log-log slope.
/// The spatial integral runs over `[−R, R]^d` with the singular cell handled
/// by ray integration; time uses Gauss–Legendre nodes.
pub fn rho_fin_check(
    f: &VectorFieldSpec,
    q: f64,
    p: f64,
    weight: &WeightSpec,
    r: f64,
    horizons: &[f64],
    box_half_width: f64,
) -> Result<RhoFinReport> {
    let d = weight.center.len();
    if f.dim() != d {
        return Err(Error::Shape("field and weight dimensions differ".into()));
    }
    if !(q > 1.0 && p > 1.0) {
        return Err(Error::Config("need q > 1 and p > 1".into()));
    }
    let qd = q / (q - 1.0);
    let tail_exponent = -2.0 * weight.nu * p + d as f64 / qd + (d as f64 + 2.0) / q - 1.0;
    if !weight.admissible(p, q) || !(tail_exponent < -1.0) {
        return Err(Error::Config(format!(
            "nu = {} violates nu > d/(2p) + 1/(p q') or the tail condition (exponent {tail_exponent})",
            weight.nu
        )));
    }
    let ts: Vec<f64> = horizons.iter().map(|t| t - r).collect();
    if ts.len() < 2 || ts.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::Config("degenerate horizon sweep".into()));
    }
    let rule = GaussRule::new(8);
    let time_rule = GaussRule::new(6);
    let sing = f.singularity();
    let cells = 8usize;
    let h = 2.0 * box_half_width / cells as f64;
    let mut buf = vec![0.0; d];
    let mut spatial = |t: f64| -> Result<f64> {
        let mut total = 0.0;
        let mut lo = vec![0.0; d];
        let mut hi = vec![0.0; d];
        let mut idx = vec![0usize; d];
        let mut err = None;
        loop {
            for a in 0..d {
                lo[a] = -box_half_width + idx[a] as f64 * h;
                hi[a] = lo[a] + h;
            }
            let mut integrand = |x: &[f64]| -> f64 {
                match f.eval_into(t, x, &mut buf) {
                    Ok(()) => weight.rho(x).powf(p) * crate::fields::norm(&buf),
                    Err(e) => {
                        err = Some(e);
                        0.0
                    }
                }
            };
            let contains =
                sing.as_ref().map(|s| (0..d).all(|a| s.center[a] >= lo[a] && s.center[a] <= hi[a])).unwrap_or(false);
            total += match (&sing, contains) {
                (Some(s), true) => integrate_box_around(&lo, &hi, &s.center, &s.radii, &rule, &mut integrand),
                _ => integrate_box(&lo, &hi, &rule, &mut integrand),
            };
            let mut a = 0;
            while a < d {
                idx[a] += 1;
                if idx[a] < cells {
                    break;
                }
                idx[a] = 0;
                a += 1;
            }
            if a == d {
                break;
            }
        }
        match err {
            Some(e) => Err(e),
            None => Ok(total),
        }
    };
    let autonomous = f.is_autonomous();
    let frozen = if autonomous { Some(spatial(r)?) } else { None };
    let mut norms = Vec::with_capacity(ts.len());
    for &tau in &ts {
        let power = match frozen {
            Some(s) => s * tau,
            None => {
                let mut acc = 0.0;
                for (t, w) in time_rule.on(r, r + tau) {
                    acc += w * spatial(t)?;
                }
                acc
            }
        };
        norms.push(power.powf(1.0 / p));
    }
    let xs: Vec<f64> = ts.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = norms.iter().map(|v| v.ln()).collect();
    let fit = ols(&xs, &ys)?;
    Ok(RhoFinReport {
        horizons: horizons.to_vec(),
        norms,
        slope: fit.slope,
        p_times_slope: p * fit.slope,
        per_norm_reading: 1.0 / (p * qd),
        per_power_reading: 1.0 / qd,
        tail_exponent,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedSupCheck {
    pub t_minus_r: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub source_term: f64,
    pub data_term: f64,
    pub pass: bool,
}

/// `sup_{[r,t]} |ρ v| ≤ C₁ ‖ρ 1_{[r,t]} |f|^{1/p}‖_p + C₂ ‖ρ g‖_{W^{1,p}}` for
/// `v` from [`cauchy_propagate`] at `λ = 0` (rescaled), source `|f|`.
#[allow(clippy::too_many_arguments)]
pub fn weighted_sup_check(
    b: &VectorLattice,
    f_abs: Option<&ScalarLattice>,
    g: &SpatialLattice,
    weight: &WeightSpec,
    r: f64,
    t: f64,
    constants: (f64, f64),
    opts: &SolveOptions,
) -> Result<WeightedSupCheck> {
    let grid = b.grid.clone();
    let jr = grid.time_index(r).ok_or_else(|| Error::Domain(format!("r = {r} is not a node")))?;
    let jt = grid.time_index(t).ok_or_else(|| Error::Domain(format!("t = {t} is not a node")))?;
    if jt <= jr {
        return Err(Error::Config("need t > r".into()));
    }
    let report = cauchy_propagate(
        b,
        &CauchyData { g, r, source: f_abs },
        &PropagateOptions { solve: opts.clone(), rescale_to_zero_lambda: true },
    )?;
    let v = report.solution();
    let ns = grid.space_len();
    let rho: Vec<f64> = {
        let mut x = vec![0.0; grid.dim];
        (0..ns)
            .map(|s| {
                grid.point(s, &mut x);
                weight.rho(&x)
            })
            .collect()
    };
    let mut lhs = 0.0f64;
    for j in jr..=jt {
        for (s, v) in v.slice(j).iter().enumerate() {
            lhs = lhs.max((rho[s] * v).abs());
        }
    }
    let source_term = match f_abs {
        Some(f) => {
            let mut acc = 0.0;
            for j in jr..=jt {
                let wt = if j == jr || j == jt { 0.5 * grid.dt } else { grid.dt };
                for (s, fv) in f.slice(j).iter().enumerate() {
                    acc += wt * grid.space_weight(s) * rho[s].powf(opts.p) * fv.abs();
                }
            }
            acc.powf(1.0 / opts.p)
        }
        None => 0.0,
    };
    let weighted_g =
        SpatialLattice { grid: grid.clone(), values: g.values.iter().zip(&rho).map(|(a, b)| a * b).collect() };
    let data_term = weighted_g.sobolev_norm(opts.p);
    let rhs = constants.0 * source_term + constants.1 * data_term;
    Ok(WeightedSupCheck { t_minus_r: t - r, lhs, rhs, source_term, data_term, pass: lhs <= rhs })
}
