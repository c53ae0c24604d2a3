use std::time::Instant;

use morrey_lab::fields::VectorFieldSpec;
use morrey_lab::lattice::{LatticeGrid, SampleMode, ScalarLattice, VectorLattice};
use morrey_lab::morrey::{morrey_norm, CylinderSampling};
use morrey_lab::potentials::{potential_apply, Direction, KernelPlan, PlanSpec};
use morrey_lab::sde::{simulate, tail_mass, EulerConfig};
use morrey_lab::solver::{
    neumann_solve, relative_sup_gap, time_stepping_reference, ManufacturedSolution, OracleSource, SolveOptions,
};
use serde::Serialize;

use crate::config::Suite;
use crate::CliError;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub check: &'static str,
    pub pass: bool,
    pub value: f64,
    pub limit: f64,
}

fn check(suite: &'static str, name: &'static str, value: f64, limit: f64, pass: bool) -> Check {
    Check { suite, check: name, pass, value, limit }
}

fn max_rel_dev(a: &ScalarLattice, b: &ScalarLattice) -> f64 {
    let scale = b.values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn kernels() -> Result<Vec<Check>, CliError> {
    let grid = LatticeGrid::with_counts(3, 17, 0.25, 0.0, 65, 0.01)?;
    let plan =
        |alpha: f64, lambda: f64| KernelPlan::build(&grid, PlanSpec::new(Direction::Forward, alpha, lambda).frozen());
    let one = ScalarLattice::constant(&grid, 1.0);
    let mut norm_dev = 0.0f64;
    for alpha in [0.5, 1.0, 1.5, 2.0] {
        for lambda in [1.0, 4.0] {
            let out = potential_apply(&plan(alpha, lambda)?, &one)?;
            let want = lambda.powf(-alpha / 2.0);
            norm_dev = norm_dev.max(out.values.iter().map(|v| (v - want).abs() / want).fold(0.0, f64::max));
        }
    }
    let h = ScalarLattice::from_fn(&grid, |t, x| (1.0 + t) * (-x.iter().map(|v| v * v).sum::<f64>()).exp());
    let mut comp_dev = 0.0f64;
    for (a, b) in [(0.5, 0.5), (0.5, 1.0), (1.0, 1.0)] {
        let composed = potential_apply(&plan(a, 4.0)?, &potential_apply(&plan(b, 4.0)?, &h)?)?;
        comp_dev = comp_dev.max(max_rel_dev(&composed, &potential_apply(&plan(a + b, 4.0)?, &h)?));
    }
    let fwd = KernelPlan::build(&grid, PlanSpec::new(Direction::Forward, 1.0, 4.0))?;
    let bwd = KernelPlan::build(&grid, PlanSpec::new(Direction::Backward, 1.0, 4.0))?;
    let h2 =
        ScalarLattice::from_fn(&grid, |t, x| t * (x[0] - 0.3).cos() * (-x.iter().map(|v| v * v).sum::<f64>()).exp());
    let lhs = potential_apply(&fwd, &h)?.dot(&h2)?;
    let rhs = h.dot(&potential_apply(&bwd, &h2)?)?;
    let dual = (lhs - rhs).abs() / lhs.abs();
    Ok(vec![
        check("kernels", "normalization", norm_dev, 1e-3, norm_dev <= 1e-3),
        check("kernels", "composition", comp_dev, 1e-3, comp_dev <= 1e-3),
        check("kernels", "duality", dual, 1e-6, dual <= 1e-6),
    ])
}

fn morrey() -> Result<Vec<Check>, CliError> {
    let h = VectorFieldSpec::hardy(3, 1.0);
    let s = CylinderSampling::new(0.125, 3, CylinderSampling::cube_anchors(3, 0.0, 1, 0.25));
    let base = morrey_norm(&h, 1.5, &s)?.value;
    let twice = morrey_norm(&VectorFieldSpec::scaled(2.0, h.clone()), 1.5, &s)?.value;
    let homog = (twice - 2.0 * base).abs();
    let by_q: Vec<f64> =
        [1.2, 1.5, 2.0, 3.0].iter().map(|&q| morrey_norm(&h, q, &s).map(|e| e.value)).collect::<Result<_, _>>()?;
    let drops = by_q.windows(2).filter(|w| w[1] < w[0]).count() as f64;
    let wide = CylinderSampling::new(1.0, 4, vec![(0.0, vec![0.0; 3])]);
    let k = morrey_norm(&VectorFieldSpec::constant(vec![0.0, 3.0, 4.0]), 2.0, &wide)?.value;
    let kdev = (k - 40.0).abs() / 40.0;
    let zero = morrey_norm(&VectorFieldSpec::zero(3), 2.0, &s)?.value;
    Ok(vec![
        check("morrey", "homogeneity", homog, 0.0, homog == 0.0),
        check("morrey", "q_monotonicity_violations", drops, 0.0, drops == 0.0),
        check("morrey", "constant_field", kdev, 1e-2, kdev <= 1e-2),
        check("morrey", "zero_field", zero, 0.0, zero == 0.0),
    ])
}

fn solver() -> Result<Vec<Check>, CliError> {
    let grid = LatticeGrid::with_counts(2, 17, 0.25, 0.0, 17, 0.02)?;
    let f = ScalarLattice::from_fn(&grid, |t, x| t * (-2.0 * (x[0] * x[0] + x[1] * x[1])).exp());
    let zero = neumann_solve(&VectorLattice::zeros(&grid), &f, &SolveOptions::new(2.0, 1.0))?;
    let plan = KernelPlan::build(&grid, PlanSpec::new(Direction::Forward, 2.0, 1.0))?;
    let exact = zero.terms == 0 && zero.solution() == &potential_apply(&plan, &f)?;
    let b = VectorLattice::sample(&VectorFieldSpec::constant(vec![0.6, -0.3]), &grid, SampleMode::Nodal)?;
    let u = neumann_solve(&b, &f, &SolveOptions::new(2.0, 4.0))?;
    let oracle = time_stepping_reference(&b, &OracleSource::Rhs(&f), 4.0)?;
    let gap = relative_sup_gap(u.solution(), &oracle)?;
    let mms = ManufacturedSolution::new(2, 0.4);
    let err = |g: &LatticeGrid| -> Result<f64, CliError> {
        let b = VectorLattice::sample(&VectorFieldSpec::constant(vec![0.5, 0.25]), g, SampleMode::Nodal)?;
        let u = time_stepping_reference(&b, &OracleSource::Rhs(&mms.rhs(&b, 1.0)), 1.0)?;
        Ok(relative_sup_gap(&u, &mms.exact(g))?)
    };
    let ratio = err(&grid)? / err(&grid.refined())?;
    Ok(vec![
        check("solver", "zero_drift_exact", if exact { 1.0 } else { 0.0 }, 1.0, exact),
        check("solver", "oracle_gap_constant_drift", gap, 0.1, gap < 0.1),
        check("solver", "manufactured_refinement_ratio", ratio, 1.8, ratio >= 1.8),
    ])
}

fn sde() -> Result<Vec<Check>, CliError> {
    let cfg = EulerConfig::new(vec![0.0; 3], 0.5, 0.01, 20_000, 3, 1e6);
    let e = simulate(&cfg, &VectorFieldSpec::zero(3))?;
    let m = e.terminal_mean(|x| x.iter().map(|v| v * v).sum());
    let z = (m.value - 3.0).abs() / m.stderr;
    let again = simulate(&cfg, &VectorFieldSpec::zero(3))?;
    let same = e.finals == again.finals;
    let masses: Vec<f64> = (0..30).map(|k| tail_mass(&e, 0.1 * k as f64)).collect();
    let monotone = masses.windows(2).all(|w| w[1] <= w[0]) && masses[0] == 1.0;
    Ok(vec![
        check("sde", "second_moment_z", z, 3.0, z <= 3.0),
        check(
            "sde",
            "increments_4sigma",
            if e.increments_consistent(4.0) { 1.0 } else { 0.0 },
            1.0,
            e.increments_consistent(4.0),
        ),
        check("sde", "replay_bit_exact", if same { 1.0 } else { 0.0 }, 1.0, same),
        check("sde", "tail_mass_monotone", if monotone { 1.0 } else { 0.0 }, 1.0, monotone),
    ])
}

/// Runs the suites, logging wall-clock per suite to stderr.
pub fn run(suite: Suite) -> Result<Vec<Check>, CliError> {
    type SuiteFn = fn() -> Result<Vec<Check>, CliError>;
    let all: [(Suite, SuiteFn); 4] =
        [(Suite::Kernels, kernels), (Suite::Morrey, morrey), (Suite::Solver, solver), (Suite::Sde, sde)];
    let mut out = Vec::new();
    for (s, f) in all {
        if suite == Suite::All || suite == s {
            let start = Instant::now();
            let checks = f()?;
            eprintln!("verify {:?}: {} checks in {:.2} s", s, checks.len(), start.elapsed().as_secs_f64());
            out.extend(checks);
        }
    }
    Ok(out)
}
