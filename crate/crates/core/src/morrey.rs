//! Parabolic and elliptic Morrey norms, parabolic maximal functions and the
//! Hedberg-type pointwise ratio.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{norm, Singularity, VectorField};
use crate::lattice::ScalarLattice;
use crate::potentials::{potential_apply, Direction, PlanCache, PlanSpec};
use crate::quadrature::{unit_ball_volume, GaussRule};

/// `C_r(t, x) = {t ≤ s ≤ t + r², |y − x| ≤ r}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParabolicCylinder {
    pub t: f64,
    pub x: Vec<f64>,
    pub r: f64,
}

impl ParabolicCylinder {
    pub fn new(t: f64, x: Vec<f64>, r: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) || !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("invalid cylinder radius {r} or anchor")));
        }
        Ok(Self { t, x, r })
    }

    pub fn volume(&self) -> f64 {
        let d = self.x.len();
        self.r * self.r * unit_ball_volume(d) * self.r.powi(d as i32)
    }

    pub fn contains(&self, s: f64, y: &[f64]) -> bool {
        let d2: f64 = y.iter().zip(&self.x).map(|(a, b)| (a - b).powi(2)).sum();
        s >= self.t && s <= self.t + self.r * self.r && d2 <= self.r * self.r
    }
}

/// Dyadic radii `r_min·2^k`, `k < levels`, over a finite anchor set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylinderSampling {
    pub r_min: f64,
    pub levels: usize,
    /// `(t, x)` anchors.
    pub anchors: Vec<(f64, Vec<f64>)>,
    /// Gauss nodes per radial piece and in time.
    pub nodes: usize,
    /// Directions per replica on the unit sphere.
    pub directions: usize,
    /// Independently rotated direction sets; their spread gives the error bar.
    pub replicas: usize,
    pub seed: u64,
}

impl CylinderSampling {
    pub fn new(r_min: f64, levels: usize, anchors: Vec<(f64, Vec<f64>)>) -> Self {
        Self { r_min, levels, anchors, nodes: 8, directions: 96, replicas: 8, seed: 0 }
    }

    /// Anchors at time `t` on the cube `{−k..k}^d · step`.
    pub fn cube_anchors(dim: usize, t: f64, k: usize, step: f64) -> Vec<(f64, Vec<f64>)> {
        let side = 2 * k + 1;
        (0..side.pow(dim as u32))
            .map(|mut c| {
                let mut x = vec![0.0; dim];
                for a in (0..dim).rev() {
                    x[a] = (c % side) as f64 * step - k as f64 * step;
                    c /= side;
                }
                (t, x)
            })
            .collect()
    }

    pub fn radii(&self) -> Vec<f64> {
        (0..self.levels).map(|k| self.r_min * 2f64.powi(k as i32)).collect()
    }

    pub fn r_max(&self) -> f64 {
        self.r_min * 2f64.powi(self.levels as i32 - 1)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.r_min > 0.0 && self.r_min.is_finite()) || self.levels == 0 {
            return Err(Error::Config("sampling needs r_min > 0 and at least one radius".into()));
        }
        if self.anchors.is_empty() {
            return Err(Error::Config("sampling needs at least one anchor".into()));
        }
        if self.nodes < 8 {
            return Err(Error::Config(format!("node count must be >= 8, got {}", self.nodes)));
        }
        if self.directions == 0 || self.replicas == 0 {
            return Err(Error::Config("directions and replicas must be positive".into()));
        }
        if self.anchors.iter().any(|(_, x)| x.len() != dim) {
            return Err(Error::Shape(format!("anchor dimension differs from field dimension {dim}")));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> SamplingFingerprint {
        SamplingFingerprint {
            radii: self.radii(),
            anchors: self.anchors.len(),
            nodes: self.nodes,
            directions: self.directions,
            replicas: self.replicas,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingFingerprint {
    pub radii: Vec<f64>,
    pub anchors: usize,
    pub nodes: usize,
    pub directions: usize,
    pub replicas: usize,
    pub seed: u64,
}

/// Functional value with the spread over rotated replicas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionalValue {
    pub value: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub value: f64,
    pub stderr: f64,
    /// Always `"lower_bound"`: the sup is taken over finitely many sets.
    pub kind: String,
    pub q: f64,
    pub argmax: ParabolicCylinder,
    pub sampling: SamplingFingerprint,
}

/// Direction sets on `S^{d−1}` with equal weights; replica `k` is a random
/// rotation of a fixed low-discrepancy set.
fn sphere_directions(d: usize, count: usize, seed: u64, replica: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica as u64);
    match d {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => {
            let phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
            (0..count)
                .map(|i| {
                    let a = phase + std::f64::consts::TAU * i as f64 / count as f64;
                    vec![a.cos(), a.sin()]
                })
                .collect()
        }
        3 => {
            let rot = random_rotation3(&mut rng);
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|i| {
                    let z = 1.0 - (2 * i + 1) as f64 / count as f64;
                    let rho = (1.0 - z * z).sqrt();
                    let phi = golden * i as f64;
                    let v = [rho * phi.cos(), rho * phi.sin(), z];
                    (0..3).map(|r| (0..3).map(|c| rot[r][c] * v[c]).sum()).collect()
                })
                .collect()
        }
        _ => {
            // antithetic Gaussian directions
            let half = count.div_ceil(2);
            let mut out = Vec::with_capacity(2 * half);
            for _ in 0..half {
                let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let n = norm(&v);
                let u: Vec<f64> = v.iter().map(|c| c / n).collect();
                out.push(u.iter().map(|c| -c).collect());
                out.push(u);
            }
            out
        }
    }
}

/// Uniform random rotation from a random unit quaternion.
fn random_rotation3(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin(), b * (tau * u3).cos());
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Quadrature for one ball `B_r(x)` in polar coordinates about a pole: the
/// singularity when it lies inside the ball, the centre otherwise. The ray
/// integral uses `ρ = ρ_exit u²` and splits where rays cross the spheres on
/// which the field jumps.
struct BallRule {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl BallRule {
    fn new(
        center: &[f64],
        r: f64,
        singularity: Option<&Singularity>,
        directions: &[Vec<f64>],
        rule: &GaussRule,
    ) -> Self {
        let d = center.len();
        let pole: Vec<f64> = match singularity {
            Some(s) if dist2(&s.center, center) < r * r * (1.0 - 1e-12) => s.center.clone(),
            _ => center.to_vec(),
        };
        let c: Vec<f64> = pole.iter().zip(center).map(|(p, x)| p - x).collect();
        let c2: f64 = c.iter().map(|v| v * v).sum();
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut breaks = Vec::new();
        for w in directions {
            let cw: f64 = c.iter().zip(w).map(|(a, b)| a * b).sum();
            let exit = -cw + (cw * cw - c2 + r * r).max(0.0).sqrt();
            if exit <= 0.0 {
                continue;
            }
            breaks.clear();
            if let Some(s) = singularity {
                // |pole + ρω − s|² = R²
                let e: Vec<f64> = pole.iter().zip(&s.center).map(|(p, q)| p - q).collect();
                let ew: f64 = e.iter().zip(w).map(|(a, b)| a * b).sum();
                let e2: f64 = e.iter().map(|v| v * v).sum();
                for &rad in &s.radii {
                    let disc = ew * ew - e2 + rad * rad;
                    if disc > 0.0 {
                        for rho in [-ew - disc.sqrt(), -ew + disc.sqrt()] {
                            if rho > 0.0 && rho < exit {
                                breaks.push((rho / exit).sqrt());
                            }
                        }
                    }
                }
            }
            breaks.sort_by(f64::total_cmp);
            let mut lo = 0.0;
            for hi in breaks.iter().copied().chain(std::iter::once(1.0)) {
                if hi <= lo {
                    continue;
                }
                for (u, wu) in rule.on(lo, hi) {
                    let rho = exit * u * u;
                    points.push((0..d).map(|a| pole[a] + rho * w[a]).collect());
                    weights.push(wu * 2.0 * u * exit * rho.powi(d as i32 - 1));
                }
                lo = hi;
            }
        }
        Self { points, weights }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `r (⨍ |b|^q)^{1/q}` over the rule's points and time nodes, scaled by the
/// largest sampled `|b|` so that power-of-two factors pass through exactly.
fn mean_power(field: &dyn VectorField, times: &[(f64, f64)], ball: &BallRule, q: f64) -> Result<f64> {
    let d = field.dim();
    let mut buf = vec![0.0; d];
    let mut mags = Vec::with_capacity(times.len() * ball.points.len());
    let mut ws = Vec::with_capacity(mags.capacity());
    for &(t, wt) in times {
        for (y, w) in ball.points.iter().zip(&ball.weights) {
            field.eval_into(t, y, &mut buf)?;
            let m = norm(&buf);
            if !m.is_finite() {
                return Err(Error::Numerical(format!("non-integrable sample |b| = {m} at {y:?}")));
            }
            mags.push(m);
            ws.push(wt * w);
        }
    }
    let top = mags.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(0.0);
    }
    let total: f64 = ws.iter().sum();
    let acc: f64 = mags.iter().zip(&ws).map(|(m, w)| w * (m / top).powf(q)).sum();
    Ok(top * (acc / total).powf(1.0 / q))
}

fn summarize(values: &[f64]) -> FunctionalValue {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stderr = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    FunctionalValue { value: mean, stderr }
}

fn check_q(q: f64, d: usize) -> Result<()> {
    if !(q > 1.0 && q <= (d + 2) as f64) {
        return Err(Error::Config(format!("q must lie in (1, d+2] = (1, {}], got {q}", d + 2)));
    }
    Ok(())
}

struct Replicas {
    directions: Vec<Vec<Vec<f64>>>,
    rule: GaussRule,
    nodes: usize,
}

impl Replicas {
    fn new(d: usize, s: &CylinderSampling) -> Self {
        Self {
            directions: (0..s.replicas).map(|k| sphere_directions(d, s.directions, s.seed, k)).collect(),
            rule: GaussRule::new(s.nodes),
            nodes: s.nodes,
        }
    }

    fn functional(
        &self,
        field: &dyn VectorField,
        cyl: &ParabolicCylinder,
        q: f64,
        parabolic: bool,
    ) -> Result<FunctionalValue> {
        let times: Vec<(f64, f64)> = if parabolic && !field.is_autonomous() {
            GaussRule::new(self.nodes).on(cyl.t, cyl.t + cyl.r * cyl.r).collect()
        } else {
            vec![(cyl.t, 1.0)]
        };
        let sing = field.singularity();
        let values = self
            .directions
            .iter()
            .map(|dirs| {
                let ball = BallRule::new(&cyl.x, cyl.r, sing.as_ref(), dirs, &self.rule);
                Ok(cyl.r * mean_power(field, &times, &ball, q)?)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(summarize(&values))
    }
}

/// Quadrature estimate of `r (|C_r|^{−1} ∫_{C_r} |b|^q)^{1/q}`.
pub fn cylinder_functional(
    field: &dyn VectorField,
    cyl: &ParabolicCylinder,
    q: f64,
    sampling: &CylinderSampling,
) -> Result<FunctionalValue> {
    check_q(q, field.dim())?;
    if cyl.x.len() != field.dim() {
        return Err(Error::Shape("cylinder and field dimensions differ".into()));
    }
    Replicas::new(field.dim(), sampling).functional(field, cyl, q, true)
}

fn norm_over(field: &dyn VectorField, q: f64, sampling: &CylinderSampling, parabolic: bool) -> Result<NormEstimate> {
    let d = field.dim();
    check_q(q, d)?;
    sampling.validate(d)?;
    let replicas = Replicas::new(d, sampling);
    let mut anchors = sampling.anchors.clone();
    anchors.sort_by(|a, b| {
        a.0.total_cmp(&b.0).then_with(|| {
            a.1.iter().zip(&b.1).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let cylinders: Vec<ParabolicCylinder> = sampling
        .radii()
        .into_iter()
        .flat_map(|r| anchors.iter().map(move |(t, x)| ParabolicCylinder { t: *t, x: x.clone(), r }))
        .collect();
    let values =
        cylinders.par_iter().map(|c| replicas.functional(field, c, q, parabolic)).collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if v.value > values[best].value {
            best = k;
        }
    }
    Ok(NormEstimate {
        value: values[best].value,
        stderr: values[best].stderr,
        kind: "lower_bound".into(),
        q,
        argmax: cylinders[best].clone(),
        sampling: sampling.fingerprint(),
    })
}

/// Max of [`cylinder_functional`] over the sampled cylinders.
pub fn morrey_norm(field: &dyn VectorField, q: f64, sampling: &CylinderSampling) -> Result<NormEstimate> {
    norm_over(field, q, sampling, true)
}

/// Elliptic analogue over balls `B_r(x)` at the anchor times.
pub fn elliptic_morrey_norm(field: &dyn VectorField, q: f64, sampling: &CylinderSampling) -> Result<NormEstimate> {
    norm_over(field, q, sampling, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaximalMode {
    /// `M_β`: cylinders anchored at the node.
    Anchored,
    /// `M̂`: also cylinders anchored at neighbouring nodes that contain it.
    Uncentered,
}

/// `dx·2^k` up to `r_max`.
pub fn dyadic_radii(r_min: f64, r_max: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut r = r_min;
    while r <= r_max * (1.0 + 1e-12) {
        out.push(r);
        r *= 2.0;
    }
    out
}

/// Discrete cylinder averages: nodes `(s, y)` with `t ≤ s ≤ t + ρ²` and
/// `|y − x| ≤ ρ`, truncated to the lattice, equally weighted. The ball is a
/// union of segments along the last axis, each summed from prefix sums.
fn cylinder_averages(h: &ScalarLattice, rho: f64) -> Vec<f64> {
    let grid = &h.grid;
    let d = grid.dim;
    let n = grid.n_space();
    let ni = n as i64;
    let ns = grid.space_len();
    let nt = grid.n_time();
    let r2 = rho * rho / (grid.dx * grid.dx) * (1.0 + 1e-12);
    let reach = r2.sqrt().floor() as i64;
    let steps = (rho * rho / grid.dt * (1.0 + 1e-12)).floor() as usize;
    // (offset over the first d − 1 axes, half-length along the last)
    let rows: Vec<(Vec<i64>, i64)> = {
        let side = (2 * reach + 1) as usize;
        (0..side.pow(d as u32 - 1))
            .filter_map(|mut c| {
                let mut o = vec![0i64; d - 1];
                for a in (0..d - 1).rev() {
                    o[a] = (c % side) as i64 - reach;
                    c /= side;
                }
                let used: i64 = o.iter().map(|v| v * v).sum();
                let rest = r2 - used as f64;
                (rest >= 0.0).then(|| (o, rest.sqrt().floor() as i64))
            })
            .collect()
    };
    let mut prefix = vec![0.0; (nt + 1) * ns];
    for j in 0..nt {
        for s in 0..ns {
            prefix[(j + 1) * ns + s] = prefix[j * ns + s] + h.values[j * ns + s];
        }
    }
    let mut out = vec![0.0; grid.len()];
    out.par_chunks_mut(ns).enumerate().for_each(|(j, row)| {
        let hi = (j + steps).min(nt - 1);
        let tcount = (hi - j + 1) as f64;
        // window sums, then running sums along the last axis (n + 1 per line)
        let mut lines = vec![0.0; (ns / n) * (n + 1)];
        for (l, line) in lines.chunks_mut(n + 1).enumerate() {
            for i in 0..n {
                let k = l * n + i;
                line[i + 1] = line[i] + prefix[(hi + 1) * ns + k] - prefix[j * ns + k];
            }
        }
        let mut idx = vec![0usize; d];
        for (s, o) in row.iter_mut().enumerate() {
            grid.unravel(s, &mut idx);
            let last = idx[d - 1] as i64;
            let mut sum = 0.0;
            let mut count = 0i64;
            'rows: for (off, w) in &rows {
                let mut l = 0usize;
                for a in 0..d - 1 {
                    let i = idx[a] as i64 + off[a];
                    if i < 0 || i >= ni {
                        continue 'rows;
                    }
                    l = l * n + i as usize;
                }
                let lo = (last - w).max(0) as usize;
                let up = (last + w).min(ni - 1) as usize;
                let line = &lines[l * (n + 1)..(l + 1) * (n + 1)];
                sum += line[up + 1] - line[lo];
                count += (up - lo + 1) as i64;
            }
            *o = sum / (count as f64 * tcount);
        }
    });
    out
}

/// `sup_ρ ρ^β ⨍_{C_ρ} h` over the radius set, per node.
pub fn maximal_function(h: &ScalarLattice, beta: f64, mode: MaximalMode, radii: &[f64]) -> Result<ScalarLattice> {
    let grid = &h.grid;
    let d = grid.dim;
    if !(0.0..=(d + 2) as f64).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, d+2], got {beta}")));
    }
    if h.values.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Domain("maximal function needs h >= 0".into()));
    }
    if radii.is_empty() || radii.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Config("radii must be positive and nonempty".into()));
    }
    let n = grid.n_space();
    let ns = grid.space_len();
    let nt = grid.n_time();
    let mut out = vec![0.0f64; grid.len()];
    for &rho in radii {
        let avg = cylinder_averages(h, rho);
        let scale = rho.powf(beta);
        match mode {
            MaximalMode::Anchored => {
                out.iter_mut().zip(&avg).for_each(|(o, a)| *o = o.max(scale * a));
            }
            MaximalMode::Uncentered => {
                let shifts: Vec<(usize, Vec<i64>)> = (0..2usize)
                    .flat_map(|back| {
                        (0..3usize.pow(d as u32)).map(move |mut c| {
                            let mut o = vec![0i64; d];
                            for a in (0..d).rev() {
                                o[a] = (c % 3) as i64 - 1;
                                c /= 3;
                            }
                            (back, o)
                        })
                    })
                    .filter(|(back, o)| {
                        let r2: i64 = o.iter().map(|v| v * v).sum();
                        (r2 as f64) * grid.dx * grid.dx <= rho * rho * (1.0 + 1e-12)
                            && (*back as f64) * grid.dt <= rho * rho * (1.0 + 1e-12)
                    })
                    .collect();
                out.par_chunks_mut(ns).enumerate().for_each(|(j, row)| {
                    let mut idx = vec![0usize; d];
                    for (s, o) in row.iter_mut().enumerate() {
                        grid.unravel(s, &mut idx);
                        'shifts: for (back, off) in &shifts {
                            if *back > j {
                                continue;
                            }
                            let mut k = 0usize;
                            for a in 0..d {
                                let i = idx[a] as i64 + off[a];
                                if i < 0 || i >= n as i64 {
                                    continue 'shifts;
                                }
                                k = k * n + i as usize;
                            }
                            *o = o.max(scale * avg[(j - back) * ns + k]);
                        }
                    }
                });
            }
        }
    }
    debug_assert_eq!(out.len(), ns * nt);
    ScalarLattice::from_values(grid, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HedbergReport {
    pub ratio: f64,
    pub argmax: usize,
    pub alpha: f64,
    pub beta: f64,
}

/// `sup P_α h / [(M_β h)^{α/β} (M h)^{1−α/β}]` with `P_α = (−∂t − Δ)^{−α/2}`;
/// `0/0` counts as 0.
pub fn hedberg_ratio(h: &ScalarLattice, alpha: f64, beta: f64, radii: &[f64]) -> Result<HedbergReport> {
    let d = h.grid.dim;
    if !(alpha > 0.0 && alpha < beta && beta <= (d + 2) as f64) {
        return Err(Error::Config(format!("need 0 < alpha < beta <= d+2, got alpha={alpha}, beta={beta}")));
    }
    if h.is_zero() {
        return Err(Error::Domain("hedberg ratio needs h not identically zero".into()));
    }
    let plan = PlanCache::global().get(&h.grid, PlanSpec::new(Direction::Backward, alpha, 0.0))?;
    let pot = potential_apply(&plan, h)?;
    let mb = maximal_function(h, beta, MaximalMode::Anchored, radii)?;
    let m0 = maximal_function(h, 0.0, MaximalMode::Anchored, radii)?;
    let theta = alpha / beta;
    let mut best = (0.0f64, 0usize);
    for k in 0..pot.values.len() {
        let den = mb.values[k].powf(theta) * m0.values[k].powf(1.0 - theta);
        let num = pot.values[k].max(0.0);
        let r = if den > 0.0 {
            num / den
        } else if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        if r > best.0 {
            best = (r, k);
        }
    }
    Ok(HedbergReport { ratio: best.0, argmax: best.1, alpha, beta })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpsClass {
    Subcritical,
    Critical,
    Supercritical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpsReport {
    pub class: LpsClass,
    pub exponent: f64,
}

/// Compares `d/p + 2/l` with 1; `l = ∞` is allowed.
pub fn lps_classify(dim: usize, p: f64, l: f64) -> Result<LpsReport> {
    if !(p > 0.0 && l > 0.0) {
        return Err(Error::Config("p and l must be positive".into()));
    }
    let exponent = dim as f64 / p + 2.0 / l;
    let class = if (exponent - 1.0).abs() <= 1e-12 {
        LpsClass::Critical
    } else if exponent < 1.0 {
        LpsClass::Subcritical
    } else {
        LpsClass::Supercritical
    };
    Ok(LpsReport { class, exponent })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{FnField, VectorFieldSpec};
    use crate::lattice::LatticeGrid;
    use proptest::prelude::*;

    fn sampling(levels: usize) -> CylinderSampling {
        CylinderSampling::new(0.125, levels, CylinderSampling::cube_anchors(3, 0.0, 1, 0.25))
    }

    #[test]
    fn cylinder_geometry() {
        let c = ParabolicCylinder::new(1.0, vec![0.0, 0.0, 0.0], 0.5).unwrap();
        assert!((c.volume() - 0.25 * 4.0 / 3.0 * std::f64::consts::PI * 0.125).abs() < 1e-14);
        assert!(c.contains(1.25, &[0.5, 0.0, 0.0]));
        assert!(!c.contains(1.2501, &[0.0, 0.0, 0.0]));
        assert!(!c.contains(0.99, &[0.0, 0.0, 0.0]));
        assert!(ParabolicCylinder::new(0.0, vec![0.0], 0.0).is_err());
    }

    #[test]
    fn zero_and_constant_fields() {
        let s = sampling(3);
        let c = ParabolicCylinder::new(0.0, vec![0.1, 0.0, 0.0], 0.5).unwrap();
        assert_eq!(cylinder_functional(&VectorFieldSpec::zero(3), &c, 1.5, &s).unwrap().value, 0.0);
        let k = VectorFieldSpec::constant(vec![0.0, 3.0, 4.0]);
        assert!((cylinder_functional(&k, &c, 1.5, &s).unwrap().value - 2.5).abs() < 1e-12);
        let wide = CylinderSampling::new(1.0, 4, vec![(0.0, vec![0.0; 3])]);
        let e = morrey_norm(&VectorFieldSpec::constant(vec![1.0, 0.0, 0.0]), 2.0, &wide).unwrap();
        assert!((e.value - 8.0).abs() < 1e-12 && e.argmax.r == 8.0 && e.kind == "lower_bound");
    }

    #[test]
    fn hardy_at_origin_is_refinement_stable() {
        let h = VectorFieldSpec::hardy(3, 1.0);
        let c = ParabolicCylinder::new(0.0, vec![0.0; 3], 0.5).unwrap();
        let s = sampling(1);
        let a = cylinder_functional(&h, &c, 1.5, &s).unwrap();
        let b = cylinder_functional(&h, &c, 1.5, &CylinderSampling { nodes: 16, ..s }).unwrap();
        assert!(a.value > 0.0);
        assert!((a.value - b.value).abs() <= 2.0 * a.stderr.max(b.stderr) + 1e-12 * a.value);
        // radial closed form: r (3/(3 - q))^{1/q} · 0.5 · r^{-1} for |b| = 0.5/|x|
        let want = 0.5 * (3.0f64 / 1.5).powf(1.0 / 1.5);
        assert!((a.value - want).abs() < 1e-9, "{} {want}", a.value);
    }

    #[test]
    fn off_centre_singularity_converges() {
        let h = VectorFieldSpec::hardy(3, 1.0);
        let c = ParabolicCylinder::new(0.0, vec![0.2, 0.1, 0.0], 0.5).unwrap();
        let s = sampling(1);
        let a = cylinder_functional(&h, &c, 1.5, &s).unwrap();
        let b = cylinder_functional(&h, &c, 1.5, &CylinderSampling { nodes: 16, directions: 384, ..s }).unwrap();
        assert!((a.value - b.value).abs() < 1e-2 * b.value, "{a:?} {b:?}");
    }

    #[test]
    fn homogeneity_is_exact_for_binary_factors() {
        let h = VectorFieldSpec::hardy(3, 0.5);
        let s = sampling(3);
        let base = morrey_norm(&h, 1.5, &s).unwrap();
        for c in [2.0, -0.5, 4.0] {
            let scaled = morrey_norm(&VectorFieldSpec::scaled(c, h.clone()), 1.5, &s).unwrap();
            assert_eq!(scaled.value, c.abs() * base.value);
        }
        let three = morrey_norm(&VectorFieldSpec::scaled(3.0, h), 1.5, &s).unwrap();
        assert!((three.value - 3.0 * base.value).abs() < 1e-13 * base.value);
    }

    #[test]
    fn monotone_in_q() {
        let h = VectorFieldSpec::hardy(3, 1.0);
        let s = sampling(3);
        let vals: Vec<f64> = [1.2, 1.5, 2.0, 2.5].iter().map(|&q| morrey_norm(&h, q, &s).unwrap().value).collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]), "{vals:?}");
    }

    #[test]
    fn parabolic_scaling() {
        let lam = 2.0;
        let base = FnField {
            dim: 3,
            autonomous: false,
            f: |t: f64, x: &[f64], out: &mut [f64]| {
                out[0] = (1.0 + t) * (x[1] + 1.0).sin();
                out[1] = x[0] * x[0];
                out[2] = (t - x[2]).cos();
            },
        };
        let scaled = FnField {
            dim: 3,
            autonomous: false,
            f: |t: f64, x: &[f64], out: &mut [f64]| {
                let y: Vec<f64> = x.iter().map(|v| lam * v).collect();
                (base.f)(lam * lam * t, &y, out);
                out.iter_mut().for_each(|v| *v *= lam);
            },
        };
        let s = sampling(1);
        let c = ParabolicCylinder::new(0.2, vec![0.3, -0.1, 0.4], 0.6).unwrap();
        let cs = ParabolicCylinder::new(0.2 / (lam * lam), c.x.iter().map(|v| v / lam).collect(), 0.6 / lam).unwrap();
        let a = cylinder_functional(&base, &c, 2.0, &s).unwrap().value;
        let b = cylinder_functional(&scaled, &cs, 2.0, &s).unwrap().value;
        assert!((a - b).abs() < 1e-10 * a);
    }

    #[test]
    fn elliptic_hardy_scales_with_root_delta() {
        let s = sampling(3);
        let a = elliptic_morrey_norm(&VectorFieldSpec::hardy(3, 0.25), 1.5, &s).unwrap().value;
        let b = elliptic_morrey_norm(&VectorFieldSpec::hardy(3, 1.0), 1.5, &s).unwrap().value;
        assert!((b / a - 2.0).abs() < 1e-12);
        let finer = elliptic_morrey_norm(
            &VectorFieldSpec::hardy(3, 1.0),
            1.5,
            &CylinderSampling { r_min: 0.0625, levels: 4, ..s },
        )
        .unwrap()
        .value;
        assert!((finer - b).abs() < 0.05 * b);
    }

    #[test]
    fn invalid_q_and_sampling() {
        let s = sampling(1);
        assert!(morrey_norm(&VectorFieldSpec::zero(3), 1.0, &s).is_err());
        assert!(morrey_norm(&VectorFieldSpec::zero(3), 5.5, &s).is_err());
        assert!(morrey_norm(&VectorFieldSpec::zero(3), 2.0, &CylinderSampling { nodes: 4, ..s }).is_err());
    }

    fn small_grid() -> LatticeGrid {
        LatticeGrid::with_counts(2, 9, 0.25, 0.0, 9, 0.0625).unwrap()
    }

    #[test]
    fn maximal_of_constant() {
        let g = small_grid();
        let h = ScalarLattice::constant(&g, 2.5);
        let radii = dyadic_radii(0.25, 1.0);
        let m = maximal_function(&h, 0.0, MaximalMode::Anchored, &radii).unwrap();
        assert!(m.values.iter().all(|v| (v - 2.5).abs() < 1e-14));
        let mb = maximal_function(&h, 1.5, MaximalMode::Anchored, &radii).unwrap();
        assert!(mb.values.iter().all(|v| (v - 2.5).abs() < 1e-14));
        let radii = dyadic_radii(0.25, 2.0);
        let mb = maximal_function(&h, 1.0, MaximalMode::Anchored, &radii).unwrap();
        assert!(mb.values.iter().all(|v| (v - 5.0).abs() < 1e-13));
    }

    /// Direct enumeration over all nodes for every sampled cylinder.
    fn naive(h: &ScalarLattice, beta: f64, radii: &[f64], j: usize, s: usize) -> f64 {
        let g = &h.grid;
        let mut x = vec![0.0; g.dim];
        let mut y = vec![0.0; g.dim];
        g.point(s, &mut x);
        let t = g.time(j);
        radii
            .iter()
            .map(|&rho| {
                let cyl = ParabolicCylinder { t, x: x.clone(), r: rho * (1.0 + 1e-12) };
                let (mut sum, mut count) = (0.0, 0.0);
                for jj in 0..g.n_time() {
                    for ss in 0..g.space_len() {
                        g.point(ss, &mut y);
                        if cyl.contains(g.time(jj), &y) {
                            sum += h.values[jj * g.space_len() + ss];
                            count += 1.0;
                        }
                    }
                }
                rho.powf(beta) * sum / count
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn maximal_matches_enumeration_and_decays() {
        let g = small_grid();
        let mut h = ScalarLattice::zeros(&g);
        let hot = 6 * g.space_len() + g.ravel(&[4, 4]);
        h.values[hot] = 1.0;
        let radii = dyadic_radii(0.25, 2.0);
        let beta = 1.0;
        let m = maximal_function(&h, beta, MaximalMode::Anchored, &radii).unwrap();
        for j in [0, 3, 6] {
            for s in [g.ravel(&[4, 4]), g.ravel(&[0, 4]), g.ravel(&[8, 8])] {
                let want = naive(&h, beta, &radii, j, s);
                assert!((m.values[j * g.space_len() + s] - want).abs() < 1e-14);
            }
        }
        let near = m.values[6 * g.space_len() + g.ravel(&[5, 4])];
        let far = m.values[6 * g.space_len() + g.ravel(&[8, 4])];
        assert!(far < near);
        let hat = maximal_function(&h, 0.0, MaximalMode::Uncentered, &radii).unwrap();
        let m0 = maximal_function(&h, 0.0, MaximalMode::Anchored, &radii).unwrap();
        assert!(hat.values.iter().zip(&m0.values).all(|(a, b)| a >= b));
        assert!(maximal_function(&h.scaled(-1.0), 0.0, MaximalMode::Anchored, &radii).is_err());
    }

    #[test]
    fn hedberg_ratio_scale_free_and_refinement_stable() {
        let g = LatticeGrid::with_counts(3, 9, 0.25, 0.0, 17, 0.125).unwrap();
        // radii must reach across the box or the truncated sup misses the support
        let cell = |g: &LatticeGrid| {
            ScalarLattice::from_fn(g, |t, x| {
                let inside = x.iter().all(|v| v.abs() <= 0.125 + 1e-12) && (t - 1.0).abs() <= 0.125 + 1e-12;
                if inside {
                    1.0
                } else {
                    0.0
                }
            })
        };
        let h = cell(&g);
        let radii = dyadic_radii(0.25, 4.0);
        let a = hedberg_ratio(&h, 0.5, 1.0, &radii).unwrap();
        assert!(a.ratio.is_finite() && a.ratio > 0.0, "{a:?}");
        let b = hedberg_ratio(&h.scaled(2.0), 0.5, 1.0, &radii).unwrap();
        assert!((a.ratio - b.ratio).abs() < 1e-12 * a.ratio);
        let fine = g.refined();
        let c = hedberg_ratio(&cell(&fine), 0.5, 1.0, &dyadic_radii(0.125, 4.0)).unwrap();
        assert!(c.ratio < 1.25 * a.ratio, "{} {}", a.ratio, c.ratio);
        assert!(hedberg_ratio(&h, 1.0, 0.5, &radii).is_err());
    }

    #[test]
    fn lps_classes() {
        assert_eq!(lps_classify(3, 6.0, 6.0).unwrap().class, LpsClass::Subcritical);
        assert_eq!(lps_classify(3, 3.0, f64::INFINITY).unwrap().class, LpsClass::Critical);
        let s = lps_classify(3, 2.0, 2.0).unwrap();
        assert_eq!(s.class, LpsClass::Supercritical);
        assert!((s.exponent - 2.5).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn positive_homogeneity_of_functional(c in -4.0f64..4.0, x in -0.4f64..0.4) {
            let h = VectorFieldSpec::hardy(3, 0.3);
            let s = CylinderSampling { directions: 24, replicas: 2, ..sampling(1) };
            let cyl = ParabolicCylinder::new(0.0, vec![x, 0.0, 0.1], 0.3).unwrap();
            let a = cylinder_functional(&h, &cyl, 2.0, &s).unwrap().value;
            let b = cylinder_functional(&VectorFieldSpec::scaled(c, h), &cyl, 2.0, &s).unwrap().value;
            prop_assert!((b - c.abs() * a).abs() <= 1e-12 * a.max(1e-300));
        }

        #[test]
        fn maximal_hat_dominates(vals in proptest::collection::vec(0.0f64..1.0, 81 * 9)) {
            let g = small_grid();
            let h = ScalarLattice::from_values(&g, vals).unwrap();
            let radii = dyadic_radii(0.25, 1.0);
            let hat = maximal_function(&h, 0.0, MaximalMode::Uncentered, &radii).unwrap();
            let m0 = maximal_function(&h, 0.0, MaximalMode::Anchored, &radii).unwrap();
            prop_assert!(hat.values.iter().zip(&m0.values).all(|(a, b)| a >= b));
        }
    }
}
