//! Fractional parabolic potentials `(λ ± ∂t − Δ)^{−α/2}` on a lattice.
//!
//! Space is a reflecting box. The lattice heat semigroup `exp(τΔ_h)` is
//! diagonal in the cosine basis `cos(π m i/(N−1))`, so each spatial mode
//! carries a scalar time kernel `τ^{α/2−1} e^{−(λ+μ_m)τ}/Γ(α/2)`. Its integral
//! over every time cell is taken in closed form with the regularized
//! incomplete gamma function; input values are held constant on the cell
//! around their node.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, gamma_lr, gamma_ur};

use crate::error::{Error, Result};
use crate::fields::fractional_power_in_place;
use crate::lattice::{LatticeGrid, ScalarLattice, SpatialLattice, VectorLattice};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `λ + ∂t − Δ`: reads the past.
    Forward,
    /// `λ − ∂t − Δ`: reads the future.
    Backward,
}

/// What the convolution sees outside the time window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeClosure {
    /// Input vanishes outside the window.
    Zero,
    /// Input is continued by its first (forward) or last (backward) slice.
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSpec {
    pub direction: Direction,
    pub alpha: f64,
    pub lambda: f64,
    pub closure: TimeClosure,
    /// Largest lag kept; `None` keeps every lag the window allows.
    pub k_max: Option<usize>,
}

impl PlanSpec {
    pub fn new(direction: Direction, alpha: f64, lambda: f64) -> Self {
        Self { direction, alpha, lambda, closure: TimeClosure::Zero, k_max: None }
    }

    pub fn frozen(mut self) -> Self {
        self.closure = TimeClosure::Frozen;
        self
    }

    pub fn truncated(mut self, k_max: usize) -> Self {
        self.k_max = Some(k_max);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 2.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 2], got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.lambda == 0.0 && self.closure == TimeClosure::Frozen && self.k_max.is_none() {
            return Err(Error::Config("lambda = 0 with a frozen closure has an unbounded effective window".into()));
        }
        Ok(())
    }
}

/// `∫_lo^hi τ^{a−1} e^{−κτ} dτ / Γ(a)`, `hi` may be infinite.
pub fn cell_mass(a: f64, kappa: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    if kappa == 0.0 {
        return (hi.powf(a) - lo.powf(a)) / gamma(a + 1.0);
    }
    let p = |x: f64| {
        if x <= 0.0 {
            0.0
        } else if x.is_infinite() {
            1.0
        } else {
            gamma_lr(a, x)
        }
    };
    let q = |x: f64| {
        if x <= 0.0 {
            1.0
        } else if x.is_infinite() {
            0.0
        } else {
            gamma_ur(a, x)
        }
    };
    let (xl, xh) = (kappa * lo, kappa * hi);
    let diff = if xl > a + 1.0 { q(xl) - q(xh) } else { p(xh) - p(xl) };
    kappa.powf(-a) * diff.max(0.0)
}

/// Cosine eigenbasis of the reflecting lattice Laplacian on one axis.
#[derive(Debug)]
pub struct SpectralBasis {
    pub n: usize,
    pub dx: f64,
    /// `N×N` analysis matrix, mode-major.
    analysis: Vec<f64>,
    /// `N×N` synthesis matrix, node-major.
    synthesis: Vec<f64>,
    /// Synthesis of the derivative, node-major.
    derivative: Vec<f64>,
    /// Eigenvalues of `−Δ_h`.
    pub mu: Vec<f64>,
}

impl SpectralBasis {
    pub fn new(n: usize, dx: f64) -> Self {
        let h = (n - 1) as f64;
        let mut analysis = vec![0.0; n * n];
        let mut synthesis = vec![0.0; n * n];
        let mut derivative = vec![0.0; n * n];
        for m in 0..n {
            let cm = if m == 0 || m == n - 1 { 1.0 } else { 2.0 };
            for i in 0..n {
                let ti = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                let phase = std::f64::consts::PI * (m * i % (2 * (n - 1))) as f64 / h;
                analysis[m * n + i] = cm / h * ti * phase.cos();
                synthesis[i * n + m] = phase.cos();
                derivative[i * n + m] = -std::f64::consts::PI * m as f64 / (h * dx) * phase.sin();
            }
        }
        let mu =
            (0..n).map(|m| 4.0 / (dx * dx) * (std::f64::consts::PI * m as f64 / (2.0 * h)).sin().powi(2)).collect();
        Self { n, dx, analysis, synthesis, derivative, mu }
    }

    /// `exp(τΔ_h)` on one axis as an `N×N` matrix (rows sum to one).
    pub fn heat_matrix(&self, tau: f64) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..n)
                    .map(|m| self.synthesis[i * n + m] * (-self.mu[m] * tau).exp() * self.analysis[m * n + j])
                    .sum();
            }
        }
        out
    }
}

/// Applies the `N×N` matrix `mat` (output-major) along `axis` of a `dim`-cube.
fn apply_axis(data: &mut [f64], n: usize, dim: usize, axis: usize, mat: &[f64], scratch: &mut Vec<f64>) {
    let stride = n.pow((dim - 1 - axis) as u32);
    let block = n * stride;
    scratch.resize(block, 0.0);
    for chunk in data.chunks_mut(block) {
        scratch.iter_mut().for_each(|v| *v = 0.0);
        for m in 0..n {
            let out = &mut scratch[m * stride..(m + 1) * stride];
            for i in 0..n {
                let c = mat[m * n + i];
                if c == 0.0 {
                    continue;
                }
                let src = &chunk[i * stride..(i + 1) * stride];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += c * s;
                }
            }
        }
        chunk.copy_from_slice(scratch);
    }
}

fn transform_slices(values: &mut [f64], ns: usize, basis: &SpectralBasis, dim: usize, mats: &[&[f64]]) {
    values.par_chunks_mut(ns).for_each(|slice| {
        let mut scratch = Vec::new();
        for (axis, mat) in mats.iter().enumerate().take(dim) {
            apply_axis(slice, basis.n, dim, axis, mat, &mut scratch);
        }
    });
}

fn transpose(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = values[r * cols + c];
        }
    }
    out
}

/// Precomputed quadrature for one potential on one grid.
#[derive(Debug)]
pub struct KernelPlan {
    pub grid: LatticeGrid,
    pub spec: PlanSpec,
    basis: Arc<SpectralBasis>,
    /// Weight table index of every spatial mode.
    mode_class: Vec<u32>,
    /// Per class: `w_k` for `k = 0..n_time`.
    weights: Vec<Vec<f64>>,
    /// Per class: mass beyond lag `j` (frozen closure), `j = 0..n_time`.
    tails: Vec<Vec<f64>>,
}

impl KernelPlan {
    pub fn build(grid: &LatticeGrid, spec: PlanSpec) -> Result<Self> {
        grid.validate()?;
        spec.validate()?;
        let n = grid.n_space();
        let d = grid.dim;
        let nt = grid.n_time();
        let basis = Arc::new(SpectralBasis::new(n, grid.dx));
        let a = 0.5 * spec.alpha;
        let dt = grid.dt;
        let kmax = spec.k_max.unwrap_or(usize::MAX);

        let mut classes: HashMap<Vec<u16>, u32> = HashMap::new();
        let mut kappas = Vec::new();
        let mut mode_class = Vec::with_capacity(grid.space_len());
        let mut idx = vec![0usize; d];
        for s in 0..grid.space_len() {
            grid.unravel(s, &mut idx);
            let mut key: Vec<u16> = idx.iter().map(|&i| i as u16).collect();
            key.sort_unstable();
            let next = classes.len() as u32;
            let c = *classes.entry(key.clone()).or_insert_with(|| {
                kappas.push(spec.lambda + key.iter().map(|&m| basis.mu[m as usize]).sum::<f64>());
                next
            });
            mode_class.push(c);
        }

        let edge = |k: usize| if k == 0 { 0.0 } else { (k as f64 - 0.5) * dt };
        let tables: Vec<(Vec<f64>, Vec<f64>)> = kappas
            .par_iter()
            .map(|&kappa| {
                let w: Vec<f64> =
                    (0..nt).map(|k| if k > kmax { 0.0 } else { cell_mass(a, kappa, edge(k), edge(k + 1)) }).collect();
                let tails = match spec.closure {
                    TimeClosure::Zero => Vec::new(),
                    TimeClosure::Frozen => {
                        let end = if kmax == usize::MAX { f64::INFINITY } else { edge(kmax + 1) };
                        (0..nt).map(|j| cell_mass(a, kappa, edge(j + 1), end)).collect()
                    }
                };
                (w, tails)
            })
            .collect();
        let (weights, tails) = tables.into_iter().unzip();
        Ok(Self { grid: grid.clone(), spec, basis, mode_class, weights, tails })
    }

    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    /// Time weights of the constant mode (`κ = λ`).
    pub fn time_weights(&self) -> &[f64] {
        &self.weights[self.mode_class[0] as usize]
    }

    /// Total time mass of the constant mode, closure tail included.
    pub fn total_mass(&self) -> f64 {
        let c = self.mode_class[0] as usize;
        let w: f64 = self.weights[c].iter().sum();
        w + self.tails[c].last().copied().unwrap_or(0.0)
    }

    /// Representative time of lag `k`, the centroid of its cell.
    pub fn lag_time(&self, k: usize) -> f64 {
        if k == 0 {
            0.25 * self.grid.dt
        } else {
            k as f64 * self.grid.dt
        }
    }

    /// One-axis spatial stencil `exp(τ_k Δ_h)` of lag `k`; rows sum to one.
    pub fn spatial_stencil(&self, k: usize) -> Vec<f64> {
        self.basis.heat_matrix(self.lag_time(k))
    }

    fn to_modes(&self, values: &[f64]) -> Vec<f64> {
        let mut modes = values.to_vec();
        let mats: Vec<&[f64]> = vec![&self.basis.analysis; self.grid.dim];
        transform_slices(&mut modes, self.grid.space_len(), &self.basis, self.grid.dim, &mats);
        modes
    }

    fn synthesize_modes(&self, mut modes: Vec<f64>, derivative_axis: Option<usize>) -> Vec<f64> {
        let mats: Vec<&[f64]> = (0..self.grid.dim)
            .map(|a| if Some(a) == derivative_axis { &self.basis.derivative[..] } else { &self.basis.synthesis[..] })
            .collect();
        transform_slices(&mut modes, self.grid.space_len(), &self.basis, self.grid.dim, &mats);
        modes
    }

    /// Time convolution of every mode series.
    fn convolve(&self, modes: &[f64]) -> Vec<f64> {
        let ns = self.grid.space_len();
        let nt = self.grid.n_time();
        let series = transpose(modes, nt, ns);
        let mut out = vec![0.0; series.len()];
        out.par_chunks_mut(nt).enumerate().for_each(|(s, row)| {
            let c = self.mode_class[s] as usize;
            let x = &series[s * nt..(s + 1) * nt];
            let w = &self.weights[c];
            let tails = &self.tails[c];
            match self.spec.direction {
                Direction::Forward => {
                    for j in 0..nt {
                        let mut acc = 0.0;
                        for k in 0..=j {
                            acc += w[k] * x[j - k];
                        }
                        if !tails.is_empty() {
                            acc += tails[j] * x[0];
                        }
                        row[j] = acc;
                    }
                }
                Direction::Backward => {
                    for j in 0..nt {
                        let mut acc = 0.0;
                        for k in 0..nt - j {
                            acc += w[k] * x[j + k];
                        }
                        if !tails.is_empty() {
                            acc += tails[nt - 1 - j] * x[nt - 1];
                        }
                        row[j] = acc;
                    }
                }
            }
        });
        transpose(&out, ns, nt)
    }

    /// Exact inverse of the forward zero-closure convolution, per mode.
    fn deconvolve(&self, modes: &[f64]) -> Vec<f64> {
        let ns = self.grid.space_len();
        let nt = self.grid.n_time();
        let series = transpose(modes, nt, ns);
        let mut out = vec![0.0; series.len()];
        out.par_chunks_mut(nt).enumerate().for_each(|(s, row)| {
            let w = &self.weights[self.mode_class[s] as usize];
            let x = &series[s * nt..(s + 1) * nt];
            for j in 0..nt {
                let mut acc = x[j];
                for k in 1..=j {
                    acc -= w[k] * row[j - k];
                }
                row[j] = acc / w[0];
            }
        });
        transpose(&out, ns, nt)
    }

    fn check_input(&self, h: &ScalarLattice) -> Result<()> {
        self.grid.same_shape(&h.grid)?;
        if !h.is_finite() {
            return Err(Error::Numerical("non-finite potential input".into()));
        }
        Ok(())
    }
}

/// Keyed by grid fingerprint and plan parameters.
#[derive(Default)]
pub struct PlanCache {
    plans: Mutex<HashMap<String, Arc<KernelPlan>>>,
}

impl PlanCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Process-wide cache.
    pub fn global() -> &'static PlanCache {
        static CACHE: OnceLock<PlanCache> = OnceLock::new();
        CACHE.get_or_init(PlanCache::new)
    }

    pub fn key(grid: &LatticeGrid, spec: &PlanSpec) -> String {
        format!(
            "{}|{:?}|a{:e}|l{:e}|{:?}|{:?}",
            grid.fingerprint(),
            spec.direction,
            spec.alpha,
            spec.lambda,
            spec.closure,
            spec.k_max
        )
    }

    pub fn get(&self, grid: &LatticeGrid, spec: PlanSpec) -> Result<Arc<KernelPlan>> {
        let key = Self::key(grid, &spec);
        if let Some(p) = self.plans.lock().expect("plan cache poisoned").get(&key) {
            return Ok(p.clone());
        }
        let plan = Arc::new(KernelPlan::build(grid, spec)?);
        let mut plans = self.plans.lock().expect("plan cache poisoned");
        if plans.len() > 64 {
            plans.clear();
        }
        Ok(plans.entry(key).or_insert(plan).clone())
    }

    pub fn len(&self) -> usize {
        self.plans.lock().expect("plan cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Zero-closure plan of the given direction.
pub fn build_kernel_plan(grid: &LatticeGrid, direction: Direction, alpha: f64, lambda: f64) -> Result<KernelPlan> {
    KernelPlan::build(grid, PlanSpec::new(direction, alpha, lambda))
}

pub fn potential_apply(plan: &KernelPlan, h: &ScalarLattice) -> Result<ScalarLattice> {
    plan.check_input(h)?;
    let out = plan.synthesize_modes(plan.convolve(&plan.to_modes(&h.values)), None);
    ScalarLattice::from_values(&plan.grid, out)
}

/// `∇` of the potential, differentiating the cosine series analytically.
pub fn gradient_potential_apply(plan: &KernelPlan, h: &ScalarLattice) -> Result<VectorLattice> {
    plan.check_input(h)?;
    let conv = plan.convolve(&plan.to_modes(&h.values));
    gradient_from_modes(plan, conv)
}

/// Spectral gradient of every time slice in the plan's cosine basis.
pub fn spectral_gradient(plan: &KernelPlan, v: &ScalarLattice) -> Result<VectorLattice> {
    plan.check_input(v)?;
    gradient_from_modes(plan, plan.to_modes(&v.values))
}

fn gradient_from_modes(plan: &KernelPlan, conv: Vec<f64>) -> Result<VectorLattice> {
    let comps = (0..plan.grid.dim)
        .map(|a| ScalarLattice::from_values(&plan.grid, plan.synthesize_modes(conv.clone(), Some(a))))
        .collect::<Result<Vec<_>>>()?;
    VectorLattice::from_components(&comps)
}

/// Solves `potential_apply(plan, y) = u` for a forward zero-closure plan
/// (a positive power of `λ + ∂t − Δ`), with one refinement sweep.
/// Returns `y` and the relative residual.
pub fn inverse_potential_apply(plan: &KernelPlan, u: &ScalarLattice) -> Result<(ScalarLattice, f64)> {
    if plan.spec.direction != Direction::Forward || plan.spec.closure != TimeClosure::Zero {
        return Err(Error::Config("inverse needs a forward zero-closure plan".into()));
    }
    plan.check_input(u)?;
    let modes = plan.to_modes(&u.values);
    let mut y = plan.deconvolve(&modes);
    let r: Vec<f64> = modes.iter().zip(plan.convolve(&y)).map(|(a, b)| a - b).collect();
    for (yi, ci) in y.iter_mut().zip(plan.deconvolve(&r)) {
        *yi += ci;
    }
    let y = ScalarLattice::from_values(&plan.grid, plan.synthesize_modes(y, None))?;
    let back = potential_apply(plan, &y)?;
    let scale = u.norm_p(2.0);
    let residual = if scale == 0.0 { back.norm_p(2.0) } else { back.sub(u)?.norm_p(2.0) / scale };
    if !(residual <= 1e-8) {
        return Err(Error::Numerical(format!("inverse potential residual {residual:e} above 1e-8")));
    }
    Ok((y, residual))
}

/// Which potential of `δ_{s=r} g` to build.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeltaKind {
    /// `(λ + ∂t − Δ)^{−1} δ_{s=r} g`.
    Resolvent,
    /// `∇ (λ + ∂t − Δ)^{−1/2 − 1/(2p')} δ_{s=r} g`.
    Sp { p: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum DeltaPotential {
    Scalar(ScalarLattice),
    Vector(VectorLattice),
}

/// Time factor of `(λ+∂t−Δ)^{−β} δ_{s=r}` for one mode at node `k` after `r`.
/// Node `r` itself carries the mean over its half cell.
fn delta_time_factor(beta: f64, kappa: f64, k: usize, dt: f64) -> f64 {
    if beta == 1.0 {
        return (-kappa * k as f64 * dt).exp();
    }
    if k == 0 {
        return cell_mass(beta, kappa, 0.0, 0.5 * dt) / (0.5 * dt);
    }
    let tau = k as f64 * dt;
    tau.powf(beta - 1.0) * (-kappa * tau).exp() / gamma(beta)
}

/// Potentials of the initial layer `δ_{s=r} g`; zero before `r`.
pub fn delta_initial_potential(g: &SpatialLattice, r: f64, lambda: f64, kind: DeltaKind) -> Result<DeltaPotential> {
    let grid = &g.grid;
    let jr = grid
        .time_index(r)
        .ok_or_else(|| Error::Domain(format!("initial time {r} is not a node of the time window")))?;
    let beta = match kind {
        DeltaKind::Resolvent => 1.0,
        DeltaKind::Sp { p } => {
            if !(p > 1.0) {
                return Err(Error::Config(format!("p must exceed 1, got {p}")));
            }
            0.5 + 0.5 * (1.0 - 1.0 / p)
        }
    };
    let plan = KernelPlan::build(grid, PlanSpec::new(Direction::Forward, 2.0 * beta, lambda))?;
    let ns = grid.space_len();
    let nt = grid.n_time();
    let mut gm = g.values.clone();
    let mats: Vec<&[f64]> = vec![&plan.basis.analysis; grid.dim];
    transform_slices(&mut gm, ns, &plan.basis, grid.dim, &mats);
    let mut idx = vec![0usize; grid.dim];
    let kappa: Vec<f64> = (0..ns)
        .map(|s| {
            grid.unravel(s, &mut idx);
            lambda + idx.iter().map(|&m| plan.basis.mu[m]).sum::<f64>()
        })
        .collect();
    let mut modes = vec![0.0; grid.len()];
    for j in jr..nt {
        let slice = &mut modes[j * ns..(j + 1) * ns];
        for s in 0..ns {
            slice[s] = gm[s] * delta_time_factor(beta, kappa[s], j - jr, grid.dt);
        }
    }
    match kind {
        DeltaKind::Resolvent => {
            Ok(DeltaPotential::Scalar(ScalarLattice::from_values(grid, plan.synthesize_modes(modes, None))?))
        }
        DeltaKind::Sp { .. } => Ok(DeltaPotential::Vector(gradient_from_modes(&plan, modes)?)),
    }
}

/// A linear map on scalar lattices.
pub trait LinearOp: Sync {
    fn name(&self) -> String;
    fn grid(&self) -> &LatticeGrid;
    fn apply(&self, h: &ScalarLattice) -> Result<ScalarLattice>;
}

pub struct PotentialOp {
    pub plan: Arc<KernelPlan>,
}

impl LinearOp for PotentialOp {
    fn name(&self) -> String {
        let s = &self.plan.spec;
        format!("potential(alpha={}, lambda={}, {:?})", s.alpha, s.lambda, s.direction)
    }

    fn grid(&self) -> &LatticeGrid {
        &self.plan.grid
    }

    fn apply(&self, h: &ScalarLattice) -> Result<ScalarLattice> {
        potential_apply(&self.plan, h)
    }
}

/// `b·v` with `b` stored as a vector lattice.
fn dot_field(b: &VectorLattice, v: &VectorLattice) -> ScalarLattice {
    let d = b.dim();
    let values =
        b.values.chunks(d).zip(v.values.chunks(d)).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum()).collect();
    ScalarLattice { grid: b.grid.clone(), values }
}

/// The drift operators built from a sampled field `b`, exponent `p` and `λ`.
pub struct DriftOperators {
    pub b: VectorLattice,
    pub p: f64,
    pub lambda: f64,
    /// `b^{1/p} = b|b|^{−1+1/p}`.
    pub b_root: VectorLattice,
    /// `|b|^{1/p'}`.
    pub b_abs_dual: ScalarLattice,
    zero: bool,
    /// `(λ+∂t−Δ)^{−1/(2p')}`.
    pub q_plan: Arc<KernelPlan>,
    /// `(λ+∂t−Δ)^{−1/2−1/(2p)}`.
    pub r_plan: Arc<KernelPlan>,
    /// `(λ+∂t−Δ)^{−1/(2p)}`.
    pub g_plan: Arc<KernelPlan>,
    /// `(λ+∂t−Δ)^{−1}`.
    pub resolvent: Arc<KernelPlan>,
}

impl DriftOperators {
    pub fn new(b: &VectorLattice, p: f64, lambda: f64) -> Result<Self> {
        Self::with_cache(b, p, lambda, PlanCache::global())
    }

    pub fn with_cache(b: &VectorLattice, p: f64, lambda: f64, cache: &PlanCache) -> Result<Self> {
        if !(p > 1.0 && p.is_finite()) {
            return Err(Error::Config(format!("p must lie in (1, inf), got {p}")));
        }
        if b.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite drift sample".into()));
        }
        let grid = &b.grid;
        let d = b.dim();
        let pd = p / (p - 1.0);
        let mut b_root = b.clone();
        b_root.values.chunks_mut(d).for_each(|c| fractional_power_in_place(c, p));
        let mut b_abs_dual = b.magnitude();
        b_abs_dual.values.iter_mut().for_each(|v| *v = v.powf(1.0 / pd));
        let fwd = |alpha: f64| cache.get(grid, PlanSpec::new(Direction::Forward, alpha, lambda));
        Ok(Self {
            b: b.clone(),
            p,
            lambda,
            b_root,
            b_abs_dual,
            zero: b.is_zero(),
            q_plan: fwd(1.0 / pd)?,
            r_plan: fwd(1.0 + 1.0 / p)?,
            g_plan: fwd(1.0 / p)?,
            resolvent: fwd(2.0)?,
        })
    }

    pub fn grid(&self) -> &LatticeGrid {
        &self.b.grid
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn p_dual(&self) -> f64 {
        self.p / (self.p - 1.0)
    }

    /// `R_p h = b^{1/p}·∇(λ+∂t−Δ)^{−1/2−1/(2p)} h`.
    pub fn op_r(&self, h: &ScalarLattice) -> Result<ScalarLattice> {
        if self.zero {
            self.grid().same_shape(&h.grid)?;
            return Ok(ScalarLattice::zeros(self.grid()));
        }
        let grad = gradient_potential_apply(&self.r_plan, h)?;
        Ok(dot_field(&self.b_root, &grad))
    }

    /// `Q_p h = (λ+∂t−Δ)^{−1/(2p')} |b|^{1/p'} h`.
    pub fn op_q(&self, h: &ScalarLattice) -> Result<ScalarLattice> {
        self.grid().same_shape(&h.grid)?;
        if self.zero {
            return Ok(ScalarLattice::zeros(self.grid()));
        }
        let mut m = h.clone();
        m.values.iter_mut().zip(&self.b_abs_dual.values).for_each(|(v, w)| *v *= w);
        potential_apply(&self.q_plan, &m)
    }

    /// `G_p w = b^{1/p}·(λ+∂t−Δ)^{−1/(2p)} w` for a vector input.
    pub fn op_g(&self, w: &VectorLattice) -> Result<ScalarLattice> {
        self.grid().same_shape(&w.grid)?;
        if self.zero {
            return Ok(ScalarLattice::zeros(self.grid()));
        }
        let comps = (0..w.dim()).map(|a| potential_apply(&self.g_plan, &w.component(a))).collect::<Result<Vec<_>>>()?;
        Ok(dot_field(&self.b_root, &VectorLattice::from_components(&comps)?))
    }

    /// `T_p = R_p Q_p`.
    pub fn op_t(&self, h: &ScalarLattice) -> Result<ScalarLattice> {
        self.op_r(&self.op_q(h)?)
    }

    /// `b^{1/p}·∇(λ+∂t−Δ)^{−1} f`, i.e. `R_p (λ+∂t−Δ)^{−1/(2p')} f` collapsed.
    pub fn r_of_resolvent(&self, f: &ScalarLattice) -> Result<ScalarLattice> {
        if self.zero {
            self.grid().same_shape(&f.grid)?;
            return Ok(ScalarLattice::zeros(self.grid()));
        }
        Ok(dot_field(&self.b_root, &gradient_potential_apply(&self.resolvent, f)?))
    }

    pub fn dot_root(&self, v: &VectorLattice) -> Result<ScalarLattice> {
        self.grid().same_shape(&v.grid)?;
        Ok(dot_field(&self.b_root, v))
    }

    pub fn operator(&self, kind: DriftOpKind) -> DriftOp<'_> {
        DriftOp { ops: self, kind }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftOpKind {
    R,
    Q,
    T,
}

pub struct DriftOp<'a> {
    ops: &'a DriftOperators,
    kind: DriftOpKind,
}

impl LinearOp for DriftOp<'_> {
    fn name(&self) -> String {
        format!("{:?}_p(p={}, lambda={})", self.kind, self.ops.p, self.ops.lambda)
    }

    fn grid(&self) -> &LatticeGrid {
        self.ops.grid()
    }

    fn apply(&self, h: &ScalarLattice) -> Result<ScalarLattice> {
        match self.kind {
            DriftOpKind::R => self.ops.op_r(h),
            DriftOpKind::Q => self.ops.op_q(h),
            DriftOpKind::T => self.ops.op_t(h),
        }
    }
}

/// Free functions mirroring the operator names.
pub fn op_r(b: &VectorLattice, p: f64, lambda: f64, h: &ScalarLattice) -> Result<ScalarLattice> {
    DriftOperators::new(b, p, lambda)?.op_r(h)
}

pub fn op_q(b: &VectorLattice, p: f64, lambda: f64, h: &ScalarLattice) -> Result<ScalarLattice> {
    DriftOperators::new(b, p, lambda)?.op_q(h)
}

pub fn op_g(b: &VectorLattice, p: f64, lambda: f64, w: &VectorLattice) -> Result<ScalarLattice> {
    DriftOperators::new(b, p, lambda)?.op_g(w)
}

pub fn op_t(b: &VectorLattice, p: f64, lambda: f64, h: &ScalarLattice) -> Result<ScalarLattice> {
    DriftOperators::new(b, p, lambda)?.op_t(h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorProbeReport {
    pub operator: String,
    pub p: f64,
    pub lambda: f64,
    pub probes: usize,
    pub seed: u64,
    /// Largest observed `‖Op f‖_p / ‖f‖_p`.
    pub max_ratio: f64,
    /// Always `lower_bound`.
    pub kind: String,
    /// Index of the maximizing probe.
    pub argmax: usize,
    /// Running maximum after each probe.
    pub running_max: Vec<f64>,
    /// Probes skipped for zero norm.
    pub skipped: usize,
}

/// Probe input number `i`; `previous` is the image of the current argmax.
pub fn probe_input(grid: &LatticeGrid, seed: u64, i: usize, previous: Option<&ScalarLattice>) -> ScalarLattice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    match i % 4 {
        0 if i == 0 => ScalarLattice::constant(grid, 1.0),
        3 => match previous {
            Some(prev) => prev.clone(),
            None => ScalarLattice::constant(grid, 1.0),
        },
        0 => ScalarLattice {
            grid: grid.clone(),
            values: (0..grid.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        },
        _ => {
            let d = grid.dim;
            let reach = 0.5 * grid.half_width;
            let center: Vec<f64> =
                if i % 4 == 1 { vec![0.0; d] } else { (0..d).map(|_| rng.random_range(-reach..reach)).collect() };
            let width = grid.dx * (1.0 + rng.random::<f64>() * (reach / grid.dx));
            let span = grid.t1 - grid.t0;
            let tc = grid.t0 + span * rng.random::<f64>();
            let tw = span * (0.1 + 0.9 * rng.random::<f64>());
            ScalarLattice::from_fn(grid, |t, x| {
                let r2: f64 = x.iter().zip(&center).map(|(a, c)| (a - c).powi(2)).sum();
                let s = (t - tc) / tw;
                (-r2 / (2.0 * width * width)).exp() * (-s * s).exp()
            })
        }
    }
}

/// Randomized lower bound of `‖Op‖_{p→p}`: a constant probe, Gaussian
/// noise, bumps, and power-iteration steps from the current argmax.
pub fn probe_operator_norm(
    op: &dyn LinearOp,
    p: f64,
    lambda: f64,
    probes: usize,
    seed: u64,
) -> Result<OperatorProbeReport> {
    if probes < 16 {
        return Err(Error::Config(format!("need at least 16 probes, got {probes}")));
    }
    let grid = op.grid().clone();
    let mut best = 0.0f64;
    let mut argmax = 0;
    let mut best_image: Option<ScalarLattice> = None;
    let mut running_max = Vec::with_capacity(probes);
    let mut skipped = 0;
    for i in 0..probes {
        let f = probe_input(&grid, seed, i, best_image.as_ref());
        let nf = f.norm_p(p);
        if !(nf > 0.0) || !nf.is_finite() {
            skipped += 1;
            running_max.push(best);
            continue;
        }
        let g = op.apply(&f)?;
        let ratio = g.norm_p(p) / nf;
        if !ratio.is_finite() {
            return Err(Error::Numerical(format!("non-finite probe ratio for {}", op.name())));
        }
        if ratio > best || best_image.is_none() {
            if ratio > best {
                best = ratio;
                argmax = i;
            }
            let ng = g.norm_p(p);
            if ng > 0.0 {
                best_image = Some(g.scaled(1.0 / ng));
            }
        }
        running_max.push(best);
    }
    Ok(OperatorProbeReport {
        operator: op.name(),
        p,
        lambda,
        probes,
        seed,
        max_ratio: best,
        kind: "lower_bound".into(),
        argmax,
        running_max,
        skipped,
    })
}
