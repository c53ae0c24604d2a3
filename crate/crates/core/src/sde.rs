//! Euler–Maruyama ensembles for `dX = −b_n(t, X) dt + √2 dB` and the
//! occupation, Krylov, martingale and law-versus-propagator diagnostics.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::fields::{norm, regularize, VectorField, VectorFieldSpec};
use crate::lattice::ScalarLattice;
use crate::quadrature::GaussRule;
use crate::stats::ols;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EulerConfig {
    pub x0: Vec<f64>,
    pub t_end: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    /// Drift level `n` of `b_n = 1_{|b| ≤ n} b`.
    pub level: f64,
    /// Base noise increments summed per Euler step; equal `dt / noise_substeps`
    /// across runs gives common random numbers under time refinement.
    #[serde(default = "one")]
    pub noise_substeps: usize,
}

fn one() -> usize {
    1
}

impl EulerConfig {
    pub fn new(x0: Vec<f64>, t_end: f64, dt: f64, paths: usize, seed: u64, level: f64) -> Self {
        Self { x0, t_end, dt, paths, seed, level, noise_substeps: 1 }
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.x0.is_empty() {
            return Err(Error::Config("x0 must be nonempty".into()));
        }
        if !(self.dt > 0.0 && self.t_end > 0.0) {
            return Err(Error::Config("dt and t_end must be positive".into()));
        }
        let steps = self.t_end / self.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(Error::Config(format!("t_end = {} is not a multiple of dt = {}", self.t_end, self.dt)));
        }
        if self.paths == 0 || self.noise_substeps == 0 {
            return Err(Error::Config("paths and noise_substeps must be positive".into()));
        }
        if !(self.level > 0.0 && self.level.is_finite()) {
            return Err(Error::Config(format!("drift level must be finite and positive, got {}", self.level)));
        }
        Ok(())
    }
}

/// Standard normals for base step `k` of path `i`: Box–Muller on a ChaCha8
/// stream per path, positioned by the step counter.
struct NoiseSource {
    rng: ChaCha8Rng,
    words_per_step: u128,
}

impl NoiseSource {
    fn new(seed: u64, path: usize, d: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path as u64);
        Self { rng, words_per_step: 4 * d.div_ceil(2) as u128 }
    }

    fn normals(&mut self, step: usize, out: &mut [f64]) {
        self.rng.set_word_pos(step as u128 * self.words_per_step);
        let mut a = 0;
        while a < out.len() {
            let u1 = ((self.rng.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
            let u2 = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            let r = (-2.0 * u1.ln()).sqrt();
            let th = std::f64::consts::TAU * u2;
            out[a] = r * th.cos();
            if a + 1 < out.len() {
                out[a + 1] = r * th.sin();
            }
            a += 2;
        }
    }
}

/// One simulated path: positions at `k·dt`, `k = 0..=steps`.
pub struct Path<'a> {
    pub dt: f64,
    pub positions: &'a [f64],
    pub dim: usize,
}

impl Path<'_> {
    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.positions[k * self.dim..(k + 1) * self.dim]
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementStats {
    pub count: u64,
    /// Per-component mean of `√2 ΔB`.
    pub mean: Vec<f64>,
    /// Per-component variance of `√2 ΔB`; should equal `2 dt`.
    pub variance: Vec<f64>,
    /// Largest off-diagonal covariance.
    pub max_covariance: f64,
}

/// Summary of an ensemble; paths themselves are replayed on demand from the seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub config: EulerConfig,
    pub field: VectorFieldSpec,
    /// `N × d` terminal positions.
    pub finals: Vec<f64>,
    /// `sup_t |X_t|` per path.
    pub sup_norms: Vec<f64>,
    /// Paths aborted on a non-finite position.
    pub flagged: Vec<usize>,
    pub increments: IncrementStats,
}

fn integrate_path(
    field: &dyn VectorField,
    cfg: &EulerConfig,
    path: usize,
    positions: &mut Vec<f64>,
    incr: &mut [f64],
) -> Result<bool> {
    let d = cfg.x0.len();
    let steps = cfg.steps();
    let sub = cfg.noise_substeps;
    let h = cfg.dt / sub as f64;
    let scale = (2.0 * h).sqrt();
    let mut noise = NoiseSource::new(cfg.seed, path, d);
    let mut z = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut dw = vec![0.0; d];
    positions.clear();
    positions.extend_from_slice(&cfg.x0);
    let mut x = cfg.x0.clone();
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        field.eval_into(t, &x, &mut b)?;
        dw.iter_mut().for_each(|v| *v = 0.0);
        for m in 0..sub {
            noise.normals(k * sub + m, &mut z);
            dw.iter_mut().zip(&z).for_each(|(w, zz)| *w += scale * zz);
        }
        for a in 0..d {
            incr[a] += dw[a];
            incr[d + a] += dw[a] * dw[a];
            for c in a + 1..d {
                incr[2 * d + a * d + c] += dw[a] * dw[c];
            }
            x[a] += -b[a] * cfg.dt + dw[a];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Ok(false);
        }
        positions.extend_from_slice(&x);
    }
    Ok(true)
}

/// Euler–Maruyama with the drift regularized at `config.level`.
pub fn simulate(config: &EulerConfig, b: &VectorFieldSpec) -> Result<PathEnsemble> {
    config.validate()?;
    let d = config.x0.len();
    if b.dim() != d {
        return Err(Error::Shape(format!("field dimension {} vs x0 dimension {d}", b.dim())));
    }
    let field = regularize(b, config.level)?;
    let results = (0..config.paths)
        .into_par_iter()
        .map(|i| {
            let mut pos = Vec::with_capacity((config.steps() + 1) * d);
            let mut incr = vec![0.0; 2 * d + d * d];
            let ok = integrate_path(&field, config, i, &mut pos, &mut incr)?;
            let last = pos[pos.len() - d..].to_vec();
            let sup = pos.chunks(d).map(norm).fold(0.0, f64::max);
            Ok((ok, last, sup, incr))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut finals = Vec::with_capacity(config.paths * d);
    let mut sup_norms = Vec::with_capacity(config.paths);
    let mut flagged = Vec::new();
    let mut acc = vec![0.0; 2 * d + d * d];
    for (i, (ok, last, sup, incr)) in results.into_iter().enumerate() {
        if !ok {
            flagged.push(i);
        }
        finals.extend(last);
        sup_norms.push(sup);
        acc.iter_mut().zip(incr).for_each(|(a, v)| *a += v);
    }
    let count = (config.paths * config.steps()) as u64;
    let cf = count.max(1) as f64;
    let mean: Vec<f64> = (0..d).map(|a| acc[a] / cf).collect();
    let variance: Vec<f64> = (0..d).map(|a| acc[d + a] / cf - mean[a] * mean[a]).collect();
    let mut max_covariance = 0.0f64;
    for a in 0..d {
        for c in a + 1..d {
            max_covariance = max_covariance.max((acc[2 * d + a * d + c] / cf - mean[a] * mean[c]).abs());
        }
    }
    Ok(PathEnsemble {
        config: config.clone(),
        field,
        finals,
        sup_norms,
        flagged,
        increments: IncrementStats { count, mean, variance, max_covariance },
    })
}

impl PathEnsemble {
    pub fn dim(&self) -> usize {
        self.config.x0.len()
    }

    pub fn is_flagged(&self, i: usize) -> bool {
        self.flagged.binary_search(&i).is_ok()
    }

    /// Replays every unflagged path and maps it to a value.
    pub fn map_paths<T: Send>(&self, f: impl Fn(usize, &Path) -> T + Sync) -> Result<Vec<T>> {
        let d = self.dim();
        (0..self.config.paths)
            .into_par_iter()
            .filter(|i| !self.is_flagged(*i))
            .map(|i| {
                let mut pos = Vec::with_capacity((self.config.steps() + 1) * d);
                let mut incr = vec![0.0; 2 * d + d * d];
                integrate_path(&self.field, &self.config, i, &mut pos, &mut incr)?;
                Ok(f(i, &Path { dt: self.config.dt, positions: &pos, dim: d }))
            })
            .collect()
    }

    /// Mean of `g(X_T)` over unflagged paths.
    pub fn terminal_mean(&self, g: impl Fn(&[f64]) -> f64) -> Estimate {
        let d = self.dim();
        let vals: Vec<f64> = (0..self.config.paths)
            .filter(|i| !self.is_flagged(*i))
            .map(|i| g(&self.finals[i * d..(i + 1) * d]))
            .collect();
        Estimate::from_samples(&vals)
    }

    /// Checks increments against mean 0 and variance `2dt` within `k` standard errors.
    pub fn increments_consistent(&self, k: f64) -> bool {
        let s = &self.increments;
        let v = 2.0 * self.config.dt;
        let n = s.count as f64;
        let se_mean = (v / n).sqrt();
        let se_var = v * (2.0 / n).sqrt();
        s.mean.iter().all(|m| m.abs() <= k * se_mean)
            && s.variance.iter().all(|w| (w - v).abs() <= k * se_var)
            && s.max_covariance <= k * se_var
    }
}

/// Mean with the batch-means standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl Estimate {
    /// Batch means over 100 contiguous batches (or per sample when fewer).
    pub fn from_samples(v: &[f64]) -> Self {
        let n = v.len();
        if n == 0 {
            return Self { value: f64::NAN, stderr: f64::NAN, samples: 0 };
        }
        let value = v.iter().sum::<f64>() / n as f64;
        let batches = n.min(100);
        let means: Vec<f64> = (0..batches)
            .map(|b| {
                let (lo, hi) = (b * n / batches, (b + 1) * n / batches);
                v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect();
        let stderr = if batches > 1 {
            let m = means.iter().sum::<f64>() / batches as f64;
            (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches - 1) as f64 / batches as f64).sqrt()
        } else {
            0.0
        };
        Self { value, stderr, samples: n }
    }
}

fn window_nodes(cfg: &EulerConfig, s: f64, r: f64) -> Result<(usize, usize)> {
    let snap = |t: f64| -> Result<usize> {
        let k = (t / cfg.dt).round();
        if (k * cfg.dt - t).abs() > 1e-9 * cfg.dt.max(t.abs()) || k < 0.0 || k as usize > cfg.steps() {
            return Err(Error::Domain(format!("window end {t} is not a step time in [0, {}]", cfg.t_end)));
        }
        Ok(k as usize)
    };
    let (a, b) = (snap(s)?, snap(r)?);
    if b < a {
        return Err(Error::Domain("window end precedes its start".into()));
    }
    Ok((a, b))
}

/// Trapezoid sum of `h` along a path over step indices `[a, b]`.
fn path_integral(path: &Path, a: usize, b: usize, h: &(impl Fn(f64, &[f64]) -> f64 + ?Sized)) -> f64 {
    if a == b {
        return 0.0;
    }
    let mut acc = 0.5 * (h(path.time(a), path.at(a)) + h(path.time(b), path.at(b)));
    for k in a + 1..b {
        acc += h(path.time(k), path.at(k));
    }
    acc * path.dt
}

/// `Ê ∫_s^r h(t, X_t) dt` with the trapezoid rule on the Euler grid.
pub fn occupation_estimate(
    ens: &PathEnsemble,
    h: &(dyn Fn(f64, &[f64]) -> f64 + Sync),
    window: (f64, f64),
) -> Result<Estimate> {
    let (a, b) = window_nodes(&ens.config, window.0, window.1)?;
    let vals = ens.map_paths(|_, p| path_integral(p, a, b, h))?;
    Ok(Estimate::from_samples(&vals))
}

/// `∫_s^r ∏_a P(lo_a ≤ x0_a + √(2t) Z ≤ hi_a) dt` for Brownian motion with generator `Δ`.
pub fn gaussian_box_occupation(x0: &[f64], lo: &[f64], hi: &[f64], s: f64, r: f64) -> f64 {
    let prob = |t: f64| -> f64 {
        if t <= 0.0 {
            return if x0.iter().zip(lo.iter().zip(hi)).all(|(x, (l, h))| x >= l && x <= h) { 1.0 } else { 0.0 };
        }
        let sd = (2.0 * t).sqrt() * std::f64::consts::SQRT_2;
        x0.iter().zip(lo.iter().zip(hi)).map(|(x, (l, h))| 0.5 * (erf((h - x) / sd) - erf((l - x) / sd))).product()
    };
    // graded nodes near t = 0 where the integrand has a √t layer
    let rule = GaussRule::new(24);
    let pieces = 12;
    let span = r - s;
    (0..pieces)
        .map(|k| {
            let a = s + span * (k as f64 / pieces as f64).powi(2);
            let b = s + span * ((k + 1) as f64 / pieces as f64).powi(2);
            rule.integrate(a, b, prob)
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KrylovFit {
    pub level: f64,
    pub windows: Vec<f64>,
    pub estimates: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// `Ê∫|b_k| ≈ C h^γ`.
    pub c: f64,
    pub gamma: f64,
    pub gamma_stderr: f64,
    /// 95% interval from the Student t quantile with `m − 2` degrees of freedom.
    pub gamma_ci: (f64, f64),
    pub r_squared: f64,
    pub seed: u64,
}

/// Log-log fit of `Ê ∫_0^h |b_k(t, X_t)| dt` against the window length `h`.
pub fn krylov_fit(ens: &PathEnsemble, base: &VectorFieldSpec, k: f64, windows: &[f64]) -> Result<KrylovFit> {
    if windows.len() < 4 {
        return Err(Error::Config(format!("Krylov fit needs at least 4 windows, got {}", windows.len())));
    }
    let bk = regularize(base, k)?;
    let nodes = windows.iter().map(|&h| window_nodes(&ens.config, 0.0, h)).collect::<Result<Vec<_>>>()?;
    let per_path = ens.map_paths(|_, p| {
        let mag = |t: f64, x: &[f64]| -> f64 {
            let mut b = vec![0.0; x.len()];
            match bk.eval_into(t, x, &mut b) {
                Ok(()) => norm(&b),
                Err(_) => f64::NAN,
            }
        };
        nodes.iter().map(|&(a, b)| path_integral(p, a, b, &mag)).collect::<Vec<f64>>()
    })?;
    let mut estimates = Vec::new();
    let mut stderrs = Vec::new();
    for w in 0..windows.len() {
        let col: Vec<f64> = per_path.iter().map(|v| v[w]).collect();
        let e = Estimate::from_samples(&col);
        estimates.push(e.value);
        stderrs.push(e.stderr);
    }
    if estimates.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Numerical(format!("nonpositive occupation estimate breaks the fit: {estimates:?}")));
    }
    let xs: Vec<f64> = windows.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = estimates.iter().map(|e| e.ln()).collect();
    let fit = ols(&xs, &ys)?;
    let dof = (windows.len() - 2) as f64;
    let tq = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::Numerical(e.to_string()))?.inverse_cdf(0.975);
    Ok(KrylovFit {
        level: k,
        windows: windows.to_vec(),
        estimates,
        stderrs,
        c: fit.intercept.exp(),
        gamma: fit.slope,
        gamma_stderr: fit.slope_stderr,
        gamma_ci: (fit.slope - tq * fit.slope_stderr, fit.slope + tq * fit.slope_stderr),
        r_squared: fit.r_squared,
        seed: ens.config.seed,
    })
}

/// `amplitude · 1_{[lo, hi] × [t0, t1]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub t0: f64,
    pub t1: f64,
    pub amplitude: f64,
}

impl SpaceTimeBox {
    pub fn cube(center: &[f64], side: f64, t0: f64, t1: f64) -> Self {
        Self {
            lo: center.iter().map(|c| c - 0.5 * side).collect(),
            hi: center.iter().map(|c| c + 0.5 * side).collect(),
            t0,
            t1,
            amplitude: 1.0,
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        let inside = t >= self.t0
            && t <= self.t1
            && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| v >= l && v <= h);
        if inside {
            self.amplitude
        } else {
            0.0
        }
    }

    /// `‖h‖_{L^ν(ℝ^{d+1})}`.
    pub fn norm_nu(&self, nu: f64) -> f64 {
        let vol: f64 = self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product::<f64>() * (self.t1 - self.t0);
        self.amplitude.abs() * vol.powf(1.0 / nu)
    }
}

/// Boxes of side `1, 1/2, 1/4, 1/8` at the start point and shifted along
/// each axis, all over `[0, T]`.
pub fn stock_box_dictionary(x0: &[f64], t_end: f64) -> Vec<SpaceTimeBox> {
    let mut out = Vec::new();
    for side in [1.0, 0.5, 0.25, 0.125] {
        out.push(SpaceTimeBox::cube(x0, side, 0.0, t_end));
        for a in 0..x0.len() {
            let mut c = x0.to_vec();
            c[a] += side;
            out.push(SpaceTimeBox::cube(&c, side, 0.0, t_end));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KrylovNuReport {
    pub nu: f64,
    pub ratios: Vec<f64>,
    pub occupations: Vec<Estimate>,
    pub sup: f64,
    pub argmax: usize,
}

/// `sup_h Ê ∫_0^T |h| / ‖1_{[0,T]} h‖_ν` over a box dictionary.
pub fn krylov_nu_ratio(ens: &PathEnsemble, dictionary: &[SpaceTimeBox], nu: f64) -> Result<KrylovNuReport> {
    let d = ens.dim();
    if !(nu > (d as f64 + 2.0) / 2.0) {
        return Err(Error::Config(format!("nu must exceed (d+2)/2 = {}, got {nu}", (d as f64 + 2.0) / 2.0)));
    }
    if dictionary.is_empty() {
        return Err(Error::Config("empty dictionary".into()));
    }
    let t_end = ens.config.t_end;
    let (a, b) = window_nodes(&ens.config, 0.0, t_end)?;
    let per_path = ens.map_paths(|_, p| {
        dictionary
            .iter()
            .map(|bx| path_integral(p, a, b, &|t: f64, x: &[f64]| bx.eval(t, x).abs()))
            .collect::<Vec<f64>>()
    })?;
    let mut ratios = Vec::new();
    let mut occupations = Vec::new();
    for (w, bx) in dictionary.iter().enumerate() {
        let col: Vec<f64> = per_path.iter().map(|v| v[w]).collect();
        let e = Estimate::from_samples(&col);
        let clipped = SpaceTimeBox { t0: bx.t0.max(0.0), t1: bx.t1.min(t_end), ..bx.clone() };
        let den = clipped.norm_nu(nu);
        ratios.push(if den > 0.0 { e.value / den } else { 0.0 });
        occupations.push(e);
    }
    let mut argmax = 0;
    for (k, r) in ratios.iter().enumerate() {
        if *r > ratios[argmax] {
            argmax = k;
        }
    }
    Ok(KrylovNuReport { nu, sup: ratios[argmax], ratios, occupations, argmax })
}

/// `ψ(|x − c|²/R²)` with `ψ(s) = exp(1 − 1/(1 − s))` for `s < 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BumpTest {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl BumpTest {
    /// `(f, ∇f, Δf)`.
    pub fn eval(&self, x: &[f64]) -> (f64, Vec<f64>, f64) {
        let d = x.len();
        let r2 = self.radius * self.radius;
        let y: Vec<f64> = x.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        let s = y.iter().map(|v| v * v).sum::<f64>() / r2;
        if s >= 1.0 {
            return (0.0, vec![0.0; d], 0.0);
        }
        let om = 1.0 - s;
        let psi = (1.0 - 1.0 / om).exp();
        let d1 = -psi / (om * om);
        let d2 = psi * (1.0 / om.powi(4) - 2.0 / om.powi(3));
        let grad = y.iter().map(|v| d1 * 2.0 * v / r2).collect();
        let lap = d2 * 4.0 * s / r2 + d1 * 2.0 * d as f64 / r2;
        (psi, grad, lap)
    }

    pub fn stock(x0: &[f64]) -> Vec<BumpTest> {
        let mut shifted = x0.to_vec();
        shifted[0] += 0.3;
        vec![
            BumpTest { center: x0.to_vec(), radius: 0.5 },
            BumpTest { center: x0.to_vec(), radius: 1.0 },
            BumpTest { center: shifted, radius: 1.5 },
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleRow {
    pub checkpoint: f64,
    pub mean: Estimate,
    /// `Ê[(M_r − M_s) φ_j]` for the previous checkpoint `s` and stock `φ_j`.
    pub increments: Vec<Estimate>,
}

/// `M_r = f(X_r) − f(x₀) + ∫_0^r (−Δf + b·∇f)(t, X_t) dt`, trapezoid in time.
pub fn martingale_residual(ens: &PathEnsemble, f: &BumpTest, checkpoints: &[f64]) -> Result<Vec<MartingaleRow>> {
    let d = ens.dim();
    let idx =
        checkpoints.iter().map(|&r| window_nodes(&ens.config, 0.0, r).map(|w| w.1)).collect::<Result<Vec<_>>>()?;
    if idx.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("checkpoints must be increasing".into()));
    }
    let field = &ens.field;
    let x0 = ens.config.x0.clone();
    let per_path = ens.map_paths(|_, p| {
        let mut b = vec![0.0; d];
        let mut integrand = |k: usize| -> f64 {
            let (_, g, lap) = f.eval(p.at(k));
            if field.eval_into(p.time(k), p.at(k), &mut b).is_err() {
                return f64::NAN;
            }
            -lap + b.iter().zip(&g).map(|(u, v)| u * v).sum::<f64>()
        };
        let f0 = f.eval(p.at(0)).0;
        let mut integral = 0.0;
        let mut prev = integrand(0);
        let mut m = Vec::with_capacity(idx.len());
        let mut phis = Vec::with_capacity(idx.len());
        let mut k = 0;
        for &target in &idx {
            while k < target {
                let next = integrand(k + 1);
                integral += 0.5 * (prev + next) * p.dt;
                prev = next;
                k += 1;
            }
            let x = p.at(target);
            m.push(f.eval(x).0 - f0 + integral);
            let dist = x.iter().zip(&x0).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
            phis.push([1.0, (std::f64::consts::PI * x[0]).cos(), if dist < 0.5 { 1.0 } else { 0.0 }]);
        }
        (m, phis)
    })?;
    let mut rows = Vec::new();
    for (c, &r) in checkpoints.iter().enumerate() {
        let mean = Estimate::from_samples(&per_path.iter().map(|(m, _)| m[c]).collect::<Vec<_>>());
        let increments = if c == 0 {
            Vec::new()
        } else {
            (0..3)
                .map(|j| {
                    let v: Vec<f64> = per_path.iter().map(|(m, ph)| (m[c] - m[c - 1]) * ph[c - 1][j]).collect();
                    Estimate::from_samples(&v)
                })
                .collect()
        };
        rows.push(MartingaleRow { checkpoint: r, mean, increments });
    }
    Ok(rows)
}

/// How the propagator lattice relates to the ensemble's time axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Orientation {
    /// `v(t) = U^{t,0} g` for a time-independent drift: compare at every checkpoint.
    Autonomous,
    /// `v` solves with `b̃(s) = b(T − s)` from `s = 0`: only `t = T` is comparable.
    ReversedAt { t_end: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawRow {
    pub t: f64,
    pub monte_carlo: Estimate,
    pub propagator: f64,
    pub gap: f64,
    pub tolerance: f64,
    pub within: bool,
}

/// `|Ê g(X_t) − v(t, x₀)|` per checkpoint against `3σ + lattice_tolerance`.
pub fn law_vs_propagator(
    ens: &PathEnsemble,
    g: &(dyn Fn(&[f64]) -> f64 + Sync),
    propagator: &ScalarLattice,
    orientation: Orientation,
    checkpoints: &[f64],
    lattice_tolerance: f64,
) -> Result<Vec<LawRow>> {
    let autonomous = ens.field.is_autonomous();
    let times: Vec<(f64, f64)> = match orientation {
        Orientation::Autonomous => {
            if !autonomous {
                return Err(Error::Config("time-dependent drift needs the reversed orientation".into()));
            }
            checkpoints.iter().map(|&t| (t, t)).collect()
        }
        Orientation::ReversedAt { t_end } => {
            if checkpoints.iter().any(|&t| (t - t_end).abs() > 1e-12) {
                return Err(Error::Config("reversed propagator only answers at its own horizon".into()));
            }
            vec![(t_end, propagator.grid.t0 + t_end)]
        }
    };
    let idx = times.iter().map(|&(t, _)| window_nodes(&ens.config, 0.0, t).map(|w| w.1)).collect::<Result<Vec<_>>>()?;
    let per_path = ens.map_paths(|_, p| idx.iter().map(|&k| g(p.at(k))).collect::<Vec<f64>>())?;
    times
        .iter()
        .enumerate()
        .map(|(c, &(t, tv))| {
            let mc = Estimate::from_samples(&per_path.iter().map(|v| v[c]).collect::<Vec<_>>());
            let pv = propagator.interpolate(tv, &ens.config.x0)?;
            let gap = (mc.value - pv).abs();
            let tolerance = 3.0 * mc.stderr + lattice_tolerance;
            Ok(LawRow { t, monte_carlo: mc, propagator: pv, gap, tolerance, within: gap <= tolerance })
        })
        .collect()
}

/// Fraction of paths with `sup_t |X_t| ≥ R`.
pub fn tail_mass(ens: &PathEnsemble, r: f64) -> f64 {
    let n = ens.sup_norms.len();
    if n == 0 {
        return 0.0;
    }
    ens.sup_norms.iter().filter(|&&s| s >= r).count() as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brownian(paths: usize, dt: f64) -> PathEnsemble {
        simulate(&EulerConfig::new(vec![0.0; 3], 0.5, dt, paths, 11, 1e6), &VectorFieldSpec::zero(3)).unwrap()
    }

    #[test]
    fn brownian_second_moment() {
        let e = brownian(4000, 0.01);
        let m = e.terminal_mean(|x| x.iter().map(|v| v * v).sum());
        assert!((m.value - 3.0).abs() <= 3.0 * m.stderr, "{m:?}");
        assert!(e.increments_consistent(4.0), "{:?}", e.increments);
        assert!(e.flagged.is_empty());
    }

    #[test]
    fn constant_drift_shifts_the_mean() {
        let cfg = EulerConfig::new(vec![0.5, 0.0], 1.0, 0.01, 4000, 3, 10.0);
        let e = simulate(&cfg, &VectorFieldSpec::constant(vec![1.0, -2.0])).unwrap();
        let m0 = e.terminal_mean(|x| x[0]);
        let m1 = e.terminal_mean(|x| x[1]);
        assert!((m0.value + 0.5).abs() <= 3.0 * m0.stderr);
        assert!((m1.value - 2.0).abs() <= 3.0 * m1.stderr);
    }

    #[test]
    fn replay_is_bit_exact() {
        let cfg = EulerConfig::new(vec![0.2, 0.0, 0.0], 0.1, 0.01, 64, 5, 10.0);
        let a = simulate(&cfg, &VectorFieldSpec::hardy(3, 0.04)).unwrap();
        let b = simulate(&cfg, &VectorFieldSpec::hardy(3, 0.04)).unwrap();
        assert_eq!(a.finals, b.finals);
        let last = a.map_paths(|_, p| p.at(p.len() - 1).to_vec()).unwrap().concat();
        assert_eq!(last, a.finals);
        // adding paths keeps the existing ones
        let c = simulate(&EulerConfig { paths: 80, ..cfg }, &VectorFieldSpec::hardy(3, 0.04)).unwrap();
        assert_eq!(&c.finals[..a.finals.len()], &a.finals[..]);
    }

    #[test]
    fn common_noise_under_substeps() {
        let fine = EulerConfig::new(vec![0.0], 0.2, 0.01, 16, 9, 1.0);
        let coarse = EulerConfig { dt: 0.02, noise_substeps: 2, ..fine.clone() };
        let a = simulate(&fine, &VectorFieldSpec::zero(1)).unwrap();
        let b = simulate(&coarse, &VectorFieldSpec::zero(1)).unwrap();
        for (x, y) in a.finals.iter().zip(&b.finals) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn occupation_of_one_is_window_length() {
        let e = brownian(50, 0.01);
        let o = occupation_estimate(&e, &|_, _| 1.0, (0.1, 0.4)).unwrap();
        assert!((o.value - 0.3).abs() < 1e-12 && o.stderr < 1e-12);
        assert!(occupation_estimate(&e, &|_, _| 1.0, (0.1, 0.405)).is_err());
    }

    #[test]
    fn box_occupation_matches_gaussian_oracle() {
        let e = brownian(8000, 0.005);
        let (lo, hi) = (vec![-0.5; 3], vec![0.5; 3]);
        let bx = SpaceTimeBox { lo: lo.clone(), hi: hi.clone(), t0: 0.0, t1: 1.0, amplitude: 1.0 };
        let o = occupation_estimate(&e, &|t, x| bx.eval(t, x), (0.0, 0.5)).unwrap();
        let want = gaussian_box_occupation(&[0.0; 3], &lo, &hi, 0.0, 0.5);
        assert!((o.value - want).abs() <= 3.0 * o.stderr + 2e-3, "{o:?} {want}");
    }

    #[test]
    fn gaussian_oracle_limits() {
        let v = gaussian_box_occupation(&[0.0], &[-100.0], &[100.0], 0.0, 0.7);
        assert!((v - 0.7).abs() < 1e-12);
    }

    #[test]
    fn krylov_constant_field_is_linear() {
        let cfg = EulerConfig::new(vec![0.0, 0.0], 0.2, 0.0125, 32, 1, 10.0);
        let c = VectorFieldSpec::constant(vec![0.6, 0.8]);
        let e = simulate(&cfg, &c).unwrap();
        let fit = krylov_fit(&e, &c, 10.0, &[0.025, 0.05, 0.1, 0.2]).unwrap();
        for (h, est) in fit.windows.iter().zip(&fit.estimates) {
            assert!((est - h).abs() < 1e-12);
        }
        assert!((fit.gamma - 1.0).abs() < 1e-10 && (fit.c - 1.0).abs() < 1e-9);
        assert!(krylov_fit(&e, &c, 10.0, &[0.05, 0.1, 0.2]).is_err());
    }

    #[test]
    fn occupation_monotone_in_level() {
        let cfg = EulerConfig::new(vec![0.05, 0.0, 0.0], 0.1, 0.001, 200, 2, 20.0);
        let h = VectorFieldSpec::hardy(3, 0.04);
        let e = simulate(&cfg, &h).unwrap();
        let mut prev = 0.0;
        for k in [0.5, 1.0, 2.0, 5.0, 10.0, 20.0] {
            let bk = regularize(&h, k).unwrap();
            let o = occupation_estimate(&e, &|t, x| bk.eval(t, x).map(|v| v.norm()).unwrap_or(f64::NAN), (0.0, 0.1))
                .unwrap();
            assert!(o.value >= prev);
            prev = o.value;
        }
    }

    #[test]
    fn nu_ratio_homogeneous_and_bounded() {
        let e = brownian(2000, 0.01);
        let dict = stock_box_dictionary(&[0.0; 3], 0.5);
        let a = krylov_nu_ratio(&e, &dict, 3.0).unwrap();
        let scaled: Vec<SpaceTimeBox> = dict.iter().map(|b| SpaceTimeBox { amplitude: 10.0, ..b.clone() }).collect();
        let b = krylov_nu_ratio(&e, &scaled, 3.0).unwrap();
        for (x, y) in a.ratios.iter().zip(&b.ratios) {
            assert!((x - y).abs() <= 1e-12 * x.max(1e-300));
        }
        assert!(krylov_nu_ratio(&e, &dict, 2.5).is_err());
    }

    #[test]
    fn bump_derivatives_match_differences() {
        let f = BumpTest { center: vec![0.1, -0.2], radius: 0.8 };
        let x = [0.3, 0.1];
        let h = 1e-4;
        let (v, g, lap) = f.eval(&x);
        let mut fd_lap = -4.0 * v;
        for a in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[a] += h;
            xm[a] -= h;
            let (vp, vm) = (f.eval(&xp).0, f.eval(&xm).0);
            assert!(((vp - vm) / (2.0 * h) - g[a]).abs() < 1e-6);
            fd_lap += vp + vm;
        }
        assert!((fd_lap / (h * h) - lap).abs() < 1e-4);
    }

    #[test]
    fn brownian_martingale() {
        let e = brownian(4000, 0.005);
        for f in BumpTest::stock(&[0.0; 3]) {
            for row in martingale_residual(&e, &f, &[0.1, 0.25, 0.5]).unwrap() {
                assert!(row.mean.value.abs() <= 3.0 * row.mean.stderr + 1e-3, "{row:?}");
            }
        }
        // far from the paths the test function is identically zero
        let far = BumpTest { center: vec![50.0, 0.0, 0.0], radius: 1.0 };
        for row in martingale_residual(&e, &far, &[0.25, 0.5]).unwrap() {
            assert_eq!(row.mean.value, 0.0);
        }
    }

    #[test]
    fn tail_mass_properties() {
        let e = brownian(2000, 0.01);
        assert_eq!(tail_mass(&e, 0.0), 1.0);
        let rs: Vec<f64> = (0..40).map(|k| 0.1 * k as f64).collect();
        let m: Vec<f64> = rs.iter().map(|&r| tail_mass(&e, r)).collect();
        assert!(m.windows(2).all(|w| w[1] <= w[0]));
        assert!(tail_mass(&e, 6.0 * (2.0f64 * 0.5).sqrt()) <= 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn estimate_of_constant_has_no_spread(c in -5.0f64..5.0, n in 1usize..300) {
            let e = Estimate::from_samples(&vec![c; n]);
            prop_assert!((e.value - c).abs() <= 1e-12 * c.abs().max(1.0));
            prop_assert!(e.stderr <= 1e-12 * c.abs().max(1.0));
        }

        #[test]
        fn tail_mass_monotone(r1 in 0.0f64..3.0, dr in 0.0f64..3.0) {
            let e = simulate(&EulerConfig::new(vec![0.0; 2], 0.1, 0.01, 64, 4, 1.0), &VectorFieldSpec::zero(2)).unwrap();
            prop_assert!(tail_mass(&e, r1 + dr) <= tail_mass(&e, r1));
        }
    }
}
