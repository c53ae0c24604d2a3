//! Catalog of time-inhomogeneous drifts `b(t, x)`.
//!
//! Fields are stored as the `b` of `X_t = x - ∫ b(r, X_r) dr + √2 B_t`; the
//! simulator applies the minus sign. Composite specs evaluate recursively.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::VectorLattice;

/// Largest spatial dimension handled by stack buffers.
pub const MAX_DIM: usize = 8;

/// Location of a point singularity plus the radii of spheres about it on
/// which the field jumps.
#[derive(Clone, Debug, PartialEq)]
pub struct Singularity {
    pub center: Vec<f64>,
    pub radii: Vec<f64>,
}

/// Anything that can be evaluated like a drift.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;

    fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()>;

    fn is_autonomous(&self) -> bool {
        false
    }

    fn singularity(&self) -> Option<Singularity> {
        None
    }
}

/// Adapter turning a closure into a [`VectorField`].
pub struct FnField<F> {
    pub dim: usize,
    pub autonomous: bool,
    pub f: F,
}

impl<F> VectorField for FnField<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.f)(t, x, out);
        Ok(())
    }

    fn is_autonomous(&self) -> bool {
        self.autonomous
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Singular,
    Bounded,
}

fn default_cutoff() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VectorFieldSpec {
    /// `√δ (d-2)/2 · 1_{|x|<cutoff} |x|^{-2} x`, zero at the origin.
    Hardy {
        dim: usize,
        delta: f64,
        #[serde(default = "default_cutoff")]
        cutoff_radius: f64,
    },
    /// `C t^{-1/2} e` for `t > 0`, zero for `t <= 0`.
    InvSqrtTime {
        amplitude: f64,
        direction: Vec<f64>,
    },
    Constant {
        value: Vec<f64>,
    },
    /// Multilinear interpolation of a lattice file.
    GridSampled {
        path: String,
        #[serde(skip)]
        lattice: Option<Arc<VectorLattice>>,
    },
    Scaled {
        factor: f64,
        inner: Box<VectorFieldSpec>,
    },
    Sum {
        terms: Vec<VectorFieldSpec>,
    },
    /// `1_{|b| <= level} b`.
    Regularized {
        level: f64,
        inner: Box<VectorFieldSpec>,
    },
    /// One half of the splitting `b = 1_{|b|>t} b + 1_{|b|<=t} b`.
    SplitPart {
        role: SplitRole,
        threshold: f64,
        inner: Box<VectorFieldSpec>,
    },
}

/// A drift value: `d` real components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldValue(pub Vec<f64>);

impl FieldValue {
    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }
}

#[inline]
pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardyCriticality {
    Subcritical,
    SuperCritical,
}

/// `δ > 4 (d/(d-2))^2` is the regime without weak solutions from the origin.
pub fn hardy_criticality(dim: usize, delta: f64) -> Result<HardyCriticality> {
    if dim < 3 {
        return Err(Error::Config("Hardy threshold needs d >= 3".into()));
    }
    let d = dim as f64;
    let threshold = 4.0 * (d / (d - 2.0)).powi(2);
    Ok(if delta > threshold { HardyCriticality::SuperCritical } else { HardyCriticality::Subcritical })
}

impl VectorFieldSpec {
    pub fn hardy(dim: usize, delta: f64) -> Self {
        Self::Hardy { dim, delta, cutoff_radius: 1.0 }
    }

    pub fn constant(value: Vec<f64>) -> Self {
        Self::Constant { value }
    }

    pub fn zero(dim: usize) -> Self {
        Self::Constant { value: vec![0.0; dim] }
    }

    pub fn scaled(factor: f64, inner: VectorFieldSpec) -> Self {
        Self::Scaled { factor, inner: Box::new(inner) }
    }

    pub fn grid_sampled(lattice: VectorLattice) -> Self {
        Self::GridSampled { path: String::new(), lattice: Some(Arc::new(lattice)) }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Loads every `grid_sampled` payload, resolving paths against `base`.
    pub fn resolve(&mut self, base: &Path) -> Result<()> {
        match self {
            Self::GridSampled { path, lattice } => {
                if lattice.is_none() {
                    let v = crate::io::read_vector_lattice(&base.join(&*path))?;
                    *lattice = Some(Arc::new(v));
                }
                Ok(())
            }
            Self::Scaled { inner, .. } | Self::Regularized { inner, .. } | Self::SplitPart { inner, .. } => {
                inner.resolve(base)
            }
            Self::Sum { terms } => terms.iter_mut().try_for_each(|t| t.resolve(base)),
            _ => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Hardy { dim, delta, cutoff_radius } => {
                if *dim == 0 || *dim > MAX_DIM {
                    return Err(Error::Config(format!("hardy: unsupported dimension {dim}")));
                }
                if !(*delta >= 0.0) {
                    return Err(Error::Config("hardy: delta must be >= 0".into()));
                }
                if !(*cutoff_radius > 0.0) {
                    return Err(Error::Config("hardy: cutoff_radius must be > 0".into()));
                }
            }
            Self::InvSqrtTime { amplitude, direction } => {
                if direction.is_empty() || direction.len() > MAX_DIM || !amplitude.is_finite() {
                    return Err(Error::Config("inv_sqrt_time: bad parameters".into()));
                }
                if (norm(direction) - 1.0).abs() > 1e-9 {
                    return Err(Error::Config("inv_sqrt_time: direction must be a unit vector".into()));
                }
            }
            Self::Constant { value } => {
                if value.is_empty() || value.len() > MAX_DIM || value.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("constant: bad value".into()));
                }
            }
            Self::GridSampled { lattice, .. } => {
                if let Some(l) = lattice {
                    l.grid.validate()?;
                }
            }
            Self::Scaled { factor, inner } => {
                if !factor.is_finite() {
                    return Err(Error::Config("scaled: factor must be finite".into()));
                }
                inner.validate()?;
            }
            Self::Sum { terms } => {
                let first = terms.first().ok_or_else(|| Error::Config("sum: no terms".into()))?;
                for t in terms {
                    t.validate()?;
                    if t.dim() != first.dim() {
                        return Err(Error::Config("sum: dimension mismatch".into()));
                    }
                }
            }
            Self::Regularized { level, inner } => {
                if !(*level > 0.0) {
                    return Err(Error::Config("regularized: level must be > 0".into()));
                }
                inner.validate()?;
            }
            Self::SplitPart { threshold, inner, .. } => {
                if !(*threshold > 0.0) {
                    return Err(Error::Config("split: threshold must be > 0".into()));
                }
                inner.validate()?;
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Hardy { dim, .. } => *dim,
            Self::InvSqrtTime { direction, .. } => direction.len(),
            Self::Constant { value } => value.len(),
            Self::GridSampled { lattice, .. } => lattice.as_ref().map(|l| l.dim()).unwrap_or(0),
            Self::Scaled { inner, .. } | Self::Regularized { inner, .. } | Self::SplitPart { inner, .. } => inner.dim(),
            Self::Sum { terms } => terms.first().map(|t| t.dim()).unwrap_or(0),
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Result<FieldValue> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, x, &mut out)?;
        Ok(FieldValue(out))
    }

    fn eval_spec(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            Self::Hardy { dim, delta, cutoff_radius } => {
                let r2: f64 = x[..*dim].iter().map(|c| c * c).sum();
                if r2 == 0.0 || r2 >= cutoff_radius * cutoff_radius {
                    out[..*dim].iter_mut().for_each(|o| *o = 0.0);
                } else {
                    let coef = delta.sqrt() * (*dim as f64 - 2.0) / 2.0 / r2;
                    for a in 0..*dim {
                        out[a] = coef * x[a];
                    }
                }
            }
            Self::InvSqrtTime { amplitude, direction } => {
                let s = if t > 0.0 { amplitude / t.sqrt() } else { 0.0 };
                for (o, e) in out.iter_mut().zip(direction) {
                    *o = s * e;
                }
            }
            Self::Constant { value } => out[..value.len()].copy_from_slice(value),
            Self::GridSampled { lattice, path } => {
                let l = lattice
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("grid_sampled lattice '{path}' not loaded")))?;
                l.interpolate_into(t, x, out)?;
            }
            Self::Scaled { factor, inner } => {
                inner.eval_spec(t, x, out)?;
                out.iter_mut().for_each(|o| *o *= factor);
            }
            Self::Sum { terms } => {
                let d = self.dim();
                let mut buf = [0.0; MAX_DIM];
                out[..d].iter_mut().for_each(|o| *o = 0.0);
                for term in terms {
                    term.eval_spec(t, x, &mut buf[..d])?;
                    for a in 0..d {
                        out[a] += buf[a];
                    }
                }
            }
            Self::Regularized { level, inner } => {
                inner.eval_spec(t, x, out)?;
                if norm(out) > *level {
                    out.iter_mut().for_each(|o| *o = 0.0);
                }
            }
            Self::SplitPart { role, threshold, inner } => {
                inner.eval_spec(t, x, out)?;
                let big = norm(out) > *threshold;
                let keep = match role {
                    SplitRole::Singular => big,
                    SplitRole::Bounded => !big,
                };
                if !keep {
                    out.iter_mut().for_each(|o| *o = 0.0);
                }
            }
        }
        Ok(())
    }

    /// Radii `rho` about the singular point with `|b| = level` on `|x| = rho`,
    /// for fields whose magnitude is radial.
    fn radius_for_level(&self, level: f64) -> Option<f64> {
        match self {
            Self::Hardy { dim, delta, cutoff_radius } => {
                let r = delta.sqrt() * (*dim as f64 - 2.0).abs() / (2.0 * level);
                (r > 0.0 && r < *cutoff_radius).then_some(r)
            }
            Self::Scaled { factor, inner } if *factor != 0.0 => inner.radius_for_level(level / factor.abs()),
            Self::Regularized { inner, .. } | Self::SplitPart { inner, .. } => inner.radius_for_level(level),
            _ => None,
        }
    }

    pub fn is_autonomous_spec(&self) -> bool {
        match self {
            Self::Hardy { .. } | Self::Constant { .. } => true,
            Self::InvSqrtTime { .. } => false,
            Self::GridSampled { lattice, .. } => lattice
                .as_ref()
                .map(|l| {
                    let w = l.grid.space_len() * l.dim();
                    l.values.chunks(w).all(|c| c == &l.values[..w])
                })
                .unwrap_or(false),
            Self::Scaled { inner, .. } | Self::Regularized { inner, .. } | Self::SplitPart { inner, .. } => {
                inner.is_autonomous_spec()
            }
            Self::Sum { terms } => terms.iter().all(|t| t.is_autonomous_spec()),
        }
    }

    fn singularity_spec(&self) -> Option<Singularity> {
        match self {
            Self::Hardy { dim, cutoff_radius, .. } => {
                Some(Singularity { center: vec![0.0; *dim], radii: vec![*cutoff_radius] })
            }
            Self::Scaled { inner, .. } => inner.singularity_spec(),
            Self::Regularized { level, inner } | Self::SplitPart { threshold: level, inner, .. } => {
                let mut s = inner.singularity_spec()?;
                if let Some(r) = inner.radius_for_level(*level) {
                    s.radii.push(r);
                }
                Some(s)
            }
            Self::Sum { terms } => {
                let mut found: Option<Singularity> = None;
                for t in terms {
                    if let Some(s) = t.singularity_spec() {
                        match &mut found {
                            None => found = Some(s),
                            Some(f) if f.center == s.center => f.radii.extend(s.radii),
                            Some(_) => return None,
                        }
                    }
                }
                found
            }
            _ => None,
        }
    }

    /// Criticality label for Hardy specs (None for other variants).
    pub fn hardy_criticality(&self) -> Option<HardyCriticality> {
        match self {
            Self::Hardy { dim, delta, .. } => hardy_criticality(*dim, *delta).ok(),
            _ => None,
        }
    }
}

impl VectorField for VectorFieldSpec {
    fn dim(&self) -> usize {
        VectorFieldSpec::dim(self)
    }

    fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let d = VectorFieldSpec::dim(self);
        if x.len() < d || out.len() < d {
            return Err(Error::Shape(format!("point of length {} for a {d}-dimensional field", x.len())));
        }
        self.eval_spec(t, x, &mut out[..d])
    }

    fn is_autonomous(&self) -> bool {
        self.is_autonomous_spec()
    }

    fn singularity(&self) -> Option<Singularity> {
        self.singularity_spec()
    }
}

/// Evaluates `spec` at `(t, x)`.
pub fn eval_field(spec: &VectorFieldSpec, t: f64, x: &[f64]) -> Result<FieldValue> {
    spec.eval(t, x)
}

/// `1_{|b| <= n} b`.
pub fn regularize(spec: &VectorFieldSpec, n: f64) -> Result<VectorFieldSpec> {
    if !(n > 0.0) {
        return Err(Error::Config(format!("regularization level must be positive, got {n}")));
    }
    Ok(VectorFieldSpec::Regularized { level: n, inner: Box::new(spec.clone()) })
}

/// Splits `spec` into `(singular, bounded)` with `bounded = 1_{|b| <= bound} b`.
pub fn split_field(spec: &VectorFieldSpec, bound: f64) -> Result<(VectorFieldSpec, VectorFieldSpec)> {
    if !(bound > 0.0) {
        return Err(Error::Config(format!("split bound must be positive, got {bound}")));
    }
    let part = |role| VectorFieldSpec::SplitPart { role, threshold: bound, inner: Box::new(spec.clone()) };
    Ok((part(SplitRole::Singular), part(SplitRole::Bounded)))
}

/// `b |b|^{-1 + 1/p}`, zero at zero.
pub fn fractional_power_vector(v: &[f64], p: f64) -> FieldValue {
    let mut out = v.to_vec();
    fractional_power_in_place(&mut out, p);
    FieldValue(out)
}

pub(crate) fn fractional_power_in_place(v: &mut [f64], p: f64) {
    let m = norm(v);
    if m == 0.0 {
        return;
    }
    let s = m.powf(-1.0 + 1.0 / p);
    v.iter_mut().for_each(|c| *c *= s);
}
