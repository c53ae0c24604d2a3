//! Uniform space-time lattices and the scalar/vector fields sampled on them.
//!
//! Nodes sit at `x_i = -L + i*dx` on every spatial axis and `t_j = t0 + j*dt`.
//! Storage is time-major, then row-major over space (first axis slowest);
//! vector lattices interleave their components innermost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::VectorField;
use crate::quadrature::{integrate_box, integrate_box_around, GaussRule};

pub const MIN_NODES: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeGrid {
    pub dim: usize,
    pub half_width: f64,
    pub dx: f64,
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
}

fn integral_ratio(num: f64, den: f64, what: &str) -> Result<usize> {
    let r = num / den;
    let n = r.round();
    if (r - n).abs() > 1e-9 * r.abs().max(1.0) {
        return Err(Error::Config(format!("{what}: {num} is not a multiple of {den}")));
    }
    Ok(n as usize)
}

impl LatticeGrid {
    pub fn new(dim: usize, half_width: f64, dx: f64, t0: f64, t1: f64, dt: f64) -> Result<Self> {
        let grid = Self { dim, half_width, dx, t0, t1, dt };
        grid.validate()?;
        Ok(grid)
    }

    /// Grid with `n_space` nodes per axis and `n_time` time nodes starting at `t0`.
    pub fn with_counts(dim: usize, n_space: usize, dx: f64, t0: f64, n_time: usize, dt: f64) -> Result<Self> {
        if n_space < 2 || n_time < 2 {
            return Err(Error::Config("need at least two nodes per axis".into()));
        }
        let half_width = 0.5 * (n_space - 1) as f64 * dx;
        Self::new(dim, half_width, dx, t0, t0 + (n_time - 1) as f64 * dt, dt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > crate::fields::MAX_DIM {
            return Err(Error::Config(format!("unsupported dimension {}", self.dim)));
        }
        if !(self.dx > 0.0 && self.dt > 0.0 && self.half_width > 0.0) {
            return Err(Error::Config("dx, dt and half_width must be positive".into()));
        }
        if !(self.t1 > self.t0) {
            return Err(Error::Config("time window must have t1 > t0".into()));
        }
        let ns = integral_ratio(2.0 * self.half_width, self.dx, "box width")? + 1;
        let nt = integral_ratio(self.t1 - self.t0, self.dt, "time window")? + 1;
        if ns < MIN_NODES || nt < MIN_NODES {
            return Err(Error::Config(format!(
                "node counts {ns} (space) and {nt} (time) must be at least {MIN_NODES}"
            )));
        }
        Ok(())
    }

    pub fn n_space(&self) -> usize {
        (2.0 * self.half_width / self.dx).round() as usize + 1
    }

    pub fn n_time(&self) -> usize {
        ((self.t1 - self.t0) / self.dt).round() as usize + 1
    }

    /// Number of spatial nodes, `n_space^dim`.
    pub fn space_len(&self) -> usize {
        self.n_space().pow(self.dim as u32)
    }

    pub fn len(&self) -> usize {
        self.space_len() * self.n_time()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.dx
    }

    pub fn time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.dt
    }

    /// Index of the time node at `t`, if `t` lies on the time lattice.
    pub fn time_index(&self, t: f64) -> Option<usize> {
        let r = (t - self.t0) / self.dt;
        let j = r.round();
        ((r - j).abs() < 1e-9 && j >= 0.0 && (j as usize) < self.n_time()).then_some(j as usize)
    }

    pub fn unravel(&self, mut s: usize, idx: &mut [usize]) {
        let n = self.n_space();
        for a in (0..self.dim).rev() {
            idx[a] = s % n;
            s /= n;
        }
    }

    pub fn ravel(&self, idx: &[usize]) -> usize {
        let n = self.n_space();
        idx.iter().fold(0, |acc, &i| acc * n + i)
    }

    pub fn point(&self, s: usize, x: &mut [f64]) {
        let n = self.n_space();
        let mut s = s;
        for a in (0..self.dim).rev() {
            x[a] = self.coord(s % n);
            s /= n;
        }
    }

    /// Trapezoid weight of one spatial node (half weight on box faces).
    pub fn space_weight(&self, s: usize) -> f64 {
        let n = self.n_space();
        let mut s = s;
        let mut w = 1.0;
        for _ in 0..self.dim {
            let i = s % n;
            s /= n;
            w *= if i == 0 || i == n - 1 { 0.5 * self.dx } else { self.dx };
        }
        w
    }

    pub fn space_weights(&self) -> Vec<f64> {
        (0..self.space_len()).map(|s| self.space_weight(s)).collect()
    }

    /// Minimum distance from spatial node `s` to the box boundary.
    pub fn edge_distance(&self, s: usize) -> f64 {
        let n = self.n_space();
        let mut s = s;
        let mut m = usize::MAX;
        for _ in 0..self.dim {
            let i = s % n;
            s /= n;
            m = m.min(i.min(n - 1 - i));
        }
        m as f64 * self.dx
    }

    /// Same box and window with both steps halved.
    pub fn refined(&self) -> Self {
        Self { dx: 0.5 * self.dx, dt: 0.5 * self.dt, ..self.clone() }
    }

    /// Multilinear interpolation stencil at `(t, x)`: flat node indices and weights.
    pub fn stencil(&self, t: f64, x: &[f64]) -> Result<Vec<(usize, f64)>> {
        let n = self.n_space();
        let (j, ft) = locate(t, self.n_time(), self.t0, self.dt)
            .ok_or_else(|| Error::Domain(format!("time {t} outside lattice window")))?;
        let mut base = [0usize; crate::fields::MAX_DIM];
        let mut frac = [0.0; crate::fields::MAX_DIM];
        for a in 0..self.dim {
            let (i, f) = locate(x[a], n, -self.half_width, self.dx)
                .ok_or_else(|| Error::Domain(format!("point {x:?} outside lattice box")))?;
            base[a] = i;
            frac[a] = f;
        }
        let ns = self.space_len();
        let mut out = Vec::with_capacity(2 << self.dim);
        let mut idx = [0usize; crate::fields::MAX_DIM];
        for (jj, wt) in [(j, 1.0 - ft), (j + 1, ft)] {
            if wt == 0.0 {
                continue;
            }
            for corner in 0..(1usize << self.dim) {
                let mut w = wt;
                for a in 0..self.dim {
                    let up = corner >> a & 1;
                    idx[a] = base[a] + up;
                    w *= if up == 1 { frac[a] } else { 1.0 - frac[a] };
                }
                if w != 0.0 {
                    out.push((jj * ns + self.ravel(&idx[..self.dim]), w));
                }
            }
        }
        Ok(out)
    }

    pub fn fingerprint(&self) -> String {
        format!("d{}_L{:e}_dx{:e}_t{:e}-{:e}_dt{:e}", self.dim, self.half_width, self.dx, self.t0, self.t1, self.dt)
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::Shape(format!("{} vs {}", self.fingerprint(), other.fingerprint())))
        }
    }
}

/// Per-axis multilinear interpolation stencil: (lower index, upper weight).
fn locate(x: f64, n: usize, origin: f64, step: f64) -> Option<(usize, f64)> {
    let r = (x - origin) / step;
    let tol = 1e-9;
    if r < -tol || r > (n - 1) as f64 + tol {
        return None;
    }
    let r = r.clamp(0.0, (n - 1) as f64);
    let i = (r.floor() as usize).min(n - 2);
    Some((i, r - i as f64))
}

/// Scalar function on the spatial part of a grid (one time slice).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialLattice {
    pub grid: LatticeGrid,
    pub values: Vec<f64>,
}

impl SpatialLattice {
    pub fn zeros(grid: &LatticeGrid) -> Self {
        Self { grid: grid.clone(), values: vec![0.0; grid.space_len()] }
    }

    pub fn from_fn(grid: &LatticeGrid, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let mut x = vec![0.0; grid.dim];
        let values = (0..grid.space_len())
            .map(|s| {
                grid.point(s, &mut x);
                f(&x)
            })
            .collect();
        Self { grid: grid.clone(), values }
    }

    pub fn norm_p(&self, p: f64) -> f64 {
        weighted_norm(&self.values, |s| self.grid.space_weight(s), p)
    }

    /// Lattice gradient: central differences inside, one-sided on the faces.
    pub fn gradient(&self) -> VectorLattice1 {
        let g = &self.grid;
        let d = g.dim;
        let n = g.n_space();
        let mut out = vec![0.0; g.space_len() * d];
        let mut idx = vec![0; d];
        for s in 0..g.space_len() {
            g.unravel(s, &mut idx);
            for a in 0..d {
                let stride = n.pow((d - 1 - a) as u32);
                let i = idx[a];
                let v = if i == 0 {
                    (self.values[s + stride] - self.values[s]) / g.dx
                } else if i == n - 1 {
                    (self.values[s] - self.values[s - stride]) / g.dx
                } else {
                    (self.values[s + stride] - self.values[s - stride]) / (2.0 * g.dx)
                };
                out[s * d + a] = v;
            }
        }
        VectorLattice1 { grid: g.clone(), values: out }
    }

    /// `||g||_p + || |grad g| ||_p`.
    pub fn sobolev_norm(&self, p: f64) -> f64 {
        let grad = self.gradient();
        let mags: Vec<f64> = grad.magnitudes();
        self.norm_p(p) + weighted_norm(&mags, |s| self.grid.space_weight(s), p)
    }

    pub fn interpolate(&self, x: &[f64]) -> Result<f64> {
        let st = self.grid.stencil(self.grid.t0, x)?;
        Ok(st.iter().map(|&(n, w)| w * self.values[n]).sum())
    }
}

/// Vector function on one time slice (interleaved components).
#[derive(Clone, Debug, PartialEq)]
pub struct VectorLattice1 {
    pub grid: LatticeGrid,
    pub values: Vec<f64>,
}

impl VectorLattice1 {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.values.chunks(self.grid.dim).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }
}

pub(crate) fn weighted_norm(values: &[f64], weight: impl Fn(usize) -> f64, p: f64) -> f64 {
    if p.is_infinite() {
        return values.iter().fold(0.0, |m, v| m.max(v.abs()));
    }
    let s: f64 = values.iter().enumerate().map(|(i, v)| weight(i) * v.abs().powf(p)).sum();
    s.powf(1.0 / p)
}

/// Scalar function on the full space-time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarLattice {
    pub grid: LatticeGrid,
    pub values: Vec<f64>,
}

impl ScalarLattice {
    pub fn zeros(grid: &LatticeGrid) -> Self {
        Self { grid: grid.clone(), values: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: &LatticeGrid, c: f64) -> Self {
        Self { grid: grid.clone(), values: vec![c; grid.len()] }
    }

    pub fn from_values(grid: &LatticeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!("{} values for {} nodes", values.len(), grid.len())));
        }
        Ok(Self { grid: grid.clone(), values })
    }

    pub fn from_fn(grid: &LatticeGrid, mut f: impl FnMut(f64, &[f64]) -> f64) -> Self {
        let mut x = vec![0.0; grid.dim];
        let ns = grid.space_len();
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.n_time() {
            let t = grid.time(j);
            for s in 0..ns {
                grid.point(s, &mut x);
                values.push(f(t, &x));
            }
        }
        Self { grid: grid.clone(), values }
    }

    pub fn slice(&self, j: usize) -> &[f64] {
        let ns = self.grid.space_len();
        &self.values[j * ns..(j + 1) * ns]
    }

    pub fn slice_mut(&mut self, j: usize) -> &mut [f64] {
        let ns = self.grid.space_len();
        &mut self.values[j * ns..(j + 1) * ns]
    }

    pub fn time_slice(&self, j: usize) -> SpatialLattice {
        SpatialLattice { grid: self.grid.clone(), values: self.slice(j).to_vec() }
    }

    pub fn node_weight(&self, n: usize) -> f64 {
        self.grid.dt * self.grid.space_weight(n % self.grid.space_len())
    }

    /// Lattice `L^p` norm with trapezoid spatial weights and `dt` in time.
    pub fn norm_p(&self, p: f64) -> f64 {
        let ws = self.grid.space_weights();
        let ns = ws.len();
        let dt = self.grid.dt;
        weighted_norm(&self.values, |n| dt * ws[n % ns], p)
    }

    pub fn sup(&self) -> f64 {
        self.norm_p(f64::INFINITY)
    }

    /// Weighted pairing `<self, other>`.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.grid.same_shape(&other.grid)?;
        let ws = self.grid.space_weights();
        let ns = ws.len();
        Ok(self.values.iter().zip(&other.values).enumerate().map(|(n, (a, b))| ws[n % ns] * a * b).sum::<f64>()
            * self.grid.dt)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { grid: self.grid.clone(), values: self.values.iter().map(|v| c * v).collect() }
    }

    /// `self + c * other`.
    pub fn add_scaled(&self, c: f64, other: &Self) -> Result<Self> {
        self.grid.same_shape(&other.grid)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + c * b).collect();
        Ok(Self { grid: self.grid.clone(), values })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add_scaled(-1.0, other)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Multilinear interpolation in `(t, x)`; outside the lattice is an error.
    pub fn interpolate(&self, t: f64, x: &[f64]) -> Result<f64> {
        let st = self.grid.stencil(t, x)?;
        Ok(st.iter().map(|&(n, w)| w * self.values[n]).sum())
    }

    /// Max over nodes at distance at least `margin` from the spatial faces.
    pub fn interior_sup(&self, margin: f64) -> f64 {
        let ns = self.grid.space_len();
        self.values
            .iter()
            .enumerate()
            .filter(|(n, _)| self.grid.edge_distance(n % ns) >= margin - 1e-12)
            .fold(0.0, |m, (_, v)| m.max(v.abs()))
    }

    /// The same lattice with time reversed (`t -> t0 + t1 - t`).
    pub fn time_reversed(&self) -> Self {
        let nt = self.grid.n_time();
        let mut out = self.clone();
        for j in 0..nt {
            out.slice_mut(j).copy_from_slice(self.slice(nt - 1 - j));
        }
        out
    }
}

/// How an analytic vector field is transferred onto lattice nodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SampleMode {
    /// Point values at the nodes.
    Nodal,
    /// Averages over the node's dual cell, `order` Gauss points per axis.
    CellAverage { order: usize },
}

/// Vector-valued function on the full space-time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorLattice {
    pub grid: LatticeGrid,
    pub values: Vec<f64>,
}

impl VectorLattice {
    pub fn zeros(grid: &LatticeGrid) -> Self {
        Self { grid: grid.clone(), values: vec![0.0; grid.len() * grid.dim] }
    }

    pub fn from_values(grid: &LatticeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() * grid.dim {
            return Err(Error::Shape(format!(
                "{} values for {} nodes of a {}-vector",
                values.len(),
                grid.len(),
                grid.dim
            )));
        }
        Ok(Self { grid: grid.clone(), values })
    }

    pub fn dim(&self) -> usize {
        self.grid.dim
    }

    pub fn at(&self, n: usize) -> &[f64] {
        let d = self.grid.dim;
        &self.values[n * d..(n + 1) * d]
    }

    pub fn component(&self, a: usize) -> ScalarLattice {
        let d = self.grid.dim;
        ScalarLattice { grid: self.grid.clone(), values: self.values.iter().skip(a).step_by(d).copied().collect() }
    }

    pub fn from_components(components: &[ScalarLattice]) -> Result<Self> {
        let grid = components.first().ok_or_else(|| Error::Shape("no components".into()))?.grid.clone();
        if components.len() != grid.dim {
            return Err(Error::Shape("component count differs from dimension".into()));
        }
        let d = grid.dim;
        let mut values = vec![0.0; grid.len() * d];
        for (a, c) in components.iter().enumerate() {
            grid.same_shape(&c.grid)?;
            for (n, v) in c.values.iter().enumerate() {
                values[n * d + a] = *v;
            }
        }
        Ok(Self { grid, values })
    }

    pub fn magnitude(&self) -> ScalarLattice {
        let d = self.grid.dim;
        ScalarLattice {
            grid: self.grid.clone(),
            values: self.values.chunks(d).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect(),
        }
    }

    pub fn max_magnitude(&self) -> f64 {
        self.magnitude().sup()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn interpolate_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.grid.dim;
        let st = self.grid.stencil(t, x)?;
        out[..d].iter_mut().for_each(|o| *o = 0.0);
        for (n, w) in st {
            for a in 0..d {
                out[a] += w * self.values[n * d + a];
            }
        }
        Ok(())
    }

    /// Samples a field onto the grid.
    pub fn sample(field: &dyn VectorField, grid: &LatticeGrid, mode: SampleMode) -> Result<Self> {
        if field.dim() != grid.dim {
            return Err(Error::Shape(format!("field dimension {} vs grid dimension {}", field.dim(), grid.dim)));
        }
        let d = grid.dim;
        let ns = grid.space_len();
        let nt = grid.n_time();
        let mut values = vec![0.0; grid.len() * d];
        let autonomous = field.is_autonomous();
        for j in 0..nt {
            let t = grid.time(j);
            if autonomous && j > 0 {
                let (head, tail) = values.split_at_mut(j * ns * d);
                tail[..ns * d].copy_from_slice(&head[..ns * d]);
                continue;
            }
            let slice = &mut values[j * ns * d..(j + 1) * ns * d];
            sample_slice(field, grid, t, mode, slice)?;
        }
        let out = Self { grid: grid.clone(), values };
        if out.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite value while sampling field".into()));
        }
        Ok(out)
    }

    /// Reverses time, `b(t) -> b(t0 + t1 - t)`.
    pub fn time_reversed(&self) -> Self {
        let nt = self.grid.n_time();
        let w = self.grid.space_len() * self.grid.dim;
        let mut values = vec![0.0; self.values.len()];
        for j in 0..nt {
            values[j * w..(j + 1) * w].copy_from_slice(&self.values[(nt - 1 - j) * w..(nt - j) * w]);
        }
        Self { grid: self.grid.clone(), values }
    }
}

fn sample_slice(field: &dyn VectorField, grid: &LatticeGrid, t: f64, mode: SampleMode, out: &mut [f64]) -> Result<()> {
    let d = grid.dim;
    let mut x = vec![0.0; d];
    match mode {
        SampleMode::Nodal => {
            for s in 0..grid.space_len() {
                grid.point(s, &mut x);
                field.eval_into(t, &x, &mut out[s * d..(s + 1) * d])?;
            }
        }
        SampleMode::CellAverage { order } => {
            let rule = GaussRule::new(order.max(1));
            let sing = field.singularity();
            let mut lo = vec![0.0; d];
            let mut hi = vec![0.0; d];
            let mut buf = vec![0.0; d];
            for s in 0..grid.space_len() {
                grid.point(s, &mut x);
                for a in 0..d {
                    lo[a] = (x[a] - 0.5 * grid.dx).max(-grid.half_width);
                    hi[a] = (x[a] + 0.5 * grid.dx).min(grid.half_width);
                }
                let vol: f64 = (0..d).map(|a| hi[a] - lo[a]).product();
                let contains = sing
                    .as_ref()
                    .map(|sg| (0..d).all(|a| sg.center[a] >= lo[a] && sg.center[a] <= hi[a]))
                    .unwrap_or(false);
                for a in 0..d {
                    let mut err = None;
                    let mut f = |y: &[f64]| -> f64 {
                        match field.eval_into(t, y, &mut buf) {
                            Ok(()) => buf[a],
                            Err(e) => {
                                err = Some(e);
                                0.0
                            }
                        }
                    };
                    let integral = match (&sing, contains) {
                        (Some(sg), true) => integrate_box_around(&lo, &hi, &sg.center, &sg.radii, &rule, &mut f),
                        _ => integrate_box(&lo, &hi, &rule, &mut f),
                    };
                    if let Some(e) = err {
                        return Err(e);
                    }
                    out[s * d + a] = integral / vol;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> LatticeGrid {
        LatticeGrid::new(2, 1.0, 0.25, 0.0, 0.08, 0.01).unwrap()
    }

    #[test]
    fn counts_and_coordinates() {
        let g = grid();
        assert_eq!(g.n_space(), 9);
        assert_eq!(g.n_time(), 9);
        assert_eq!(g.coord(0), -1.0);
        assert_eq!(g.coord(8), 1.0);
        assert_eq!(g.time_index(0.03), Some(3));
        assert_eq!(g.time_index(0.035), None);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(LatticeGrid::new(2, 1.0, 0.3, 0.0, 0.08, 0.01).is_err());
        assert!(LatticeGrid::new(2, 0.5, 0.25, 0.0, 0.08, 0.01).is_err());
        assert!(LatticeGrid::new(2, 1.0, 0.25, 0.0, 0.05, 0.01).is_err());
    }

    #[test]
    fn trapezoid_weights_sum_to_box_volume() {
        let g = grid();
        let total: f64 = g.space_weights().iter().sum();
        assert!((total - 4.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_reproduces_affine_functions() {
        let g = grid();
        let h = ScalarLattice::from_fn(&g, |t, x| 1.0 + 2.0 * t - x[0] + 0.5 * x[1]);
        let v = h.interpolate(0.033, &[0.1, -0.37]).unwrap();
        assert!((v - (1.0 + 0.066 - 0.1 - 0.185)).abs() < 1e-12);
        assert!(h.interpolate(0.0, &[1.2, 0.0]).is_err());
        assert!(h.interpolate(0.09, &[0.0, 0.0]).is_err());
    }
}
