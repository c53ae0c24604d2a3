use morrey_lab::fields::{hardy_criticality, regularize, VectorFieldSpec};
use morrey_lab::lattice::{LatticeGrid, SampleMode, ScalarLattice, SpatialLattice, VectorLattice};
use morrey_lab::morrey::{elliptic_morrey_norm, lps_classify, morrey_norm};
use morrey_lab::potentials::DriftOperators;
use morrey_lab::sde::{
    krylov_fit, krylov_nu_ratio, martingale_residual, simulate, stock_box_dictionary, tail_mass, BumpTest, EulerConfig,
};
use morrey_lab::solver::{
    approximation_convergence, cauchy_propagate_with, gate, neumann_solve_with, pde_residual, CauchyData,
    ConvergenceTable, Problem, PropagateOptions, SolveOptions,
};
use serde_json::json;

use crate::artifacts::{RunDir, Table};
use crate::config::{ClassifyConfig, PropagateConfig, SimulateConfig, SolveConfig};
use crate::CliError;

fn sample_drift(
    field: &VectorFieldSpec,
    level: Option<f64>,
    grid: &LatticeGrid,
    mode: SampleMode,
) -> Result<VectorLattice, CliError> {
    let spec = match level {
        Some(n) => regularize(field, n)?,
        None => field.clone(),
    };
    Ok(VectorLattice::sample(&spec, grid, mode)?)
}

fn convergence_table(t: &ConvergenceTable) -> Table {
    let mut table = Table::new(
        "convergence",
        vec![
            ("level_from", "regularization level n_i"),
            ("level_to", "regularization level n_{i+1}"),
            ("p_gap", "lattice p-norm of u_{n_{i+1}} - u_{n_i}"),
            ("sup_gap", "sup norm of u_{n_{i+1}} - u_{n_i}"),
            ("decreasing", "p_gap below the previous row"),
        ],
    );
    for i in 0..t.p_gaps.len() {
        let dec = i == 0 || t.p_gaps[i] < t.p_gaps[i - 1];
        table.push(vec![
            t.levels[i].into(),
            t.levels[i + 1].into(),
            t.p_gaps[i].into(),
            t.sup_gaps[i].into(),
            dec.into(),
        ]);
    }
    table
}

pub fn classify(cfg: &ClassifyConfig, run: &mut RunDir) -> Result<(), CliError> {
    let dim = cfg.field.dim();
    let sampling = cfg.sampling.build(dim);
    let mut table = Table::new(
        "classify",
        vec![
            ("norm", "parabolic or elliptic Morrey functional"),
            ("q", "integrability exponent"),
            ("value", "lower-bound estimate of the norm"),
            ("stderr", "spread of the estimate across direction replicas"),
            ("argmax_t", "start time of the maximizing cylinder"),
            ("argmax_r", "radius of the maximizing cylinder"),
            ("argmax_x", "centre of the maximizing cylinder, components joined by ';'"),
        ],
    );
    let mut estimates = Vec::new();
    let kinds: &[&str] = if cfg.elliptic { &["parabolic", "elliptic"] } else { &["parabolic"] };
    for kind in kinds {
        for &q in &cfg.q {
            let e = if *kind == "parabolic" {
                morrey_norm(&cfg.field, q, &sampling)?
            } else {
                elliptic_morrey_norm(&cfg.field, q, &sampling)?
            };
            let x: Vec<String> = e.argmax.x.iter().map(|v| crate::artifacts::fmt_f64(*v)).collect();
            table.push(vec![
                (*kind).into(),
                q.into(),
                e.value.into(),
                e.stderr.into(),
                e.argmax.t.into(),
                e.argmax.r.into(),
                x.join(";").into(),
            ]);
            estimates.push(json!({ "norm": kind, "estimate": e }));
        }
    }
    let lps = match &cfg.lps {
        Some(l) => Some(lps_classify(dim, l.p, l.l)?),
        None => None,
    };
    let hardy = match &cfg.field {
        VectorFieldSpec::Hardy { dim, delta, .. } => Some(hardy_criticality(*dim, *delta)?),
        _ => None,
    };
    run.csv(&table)?;
    run.json("classify.json", json!({ "estimates": estimates, "lps": lps, "hardy_criticality": hardy }))
}

fn solve_options(
    p: f64,
    lambda: f64,
    max_terms: usize,
    tol: f64,
    probes: usize,
    seed: u64,
    force: bool,
) -> SolveOptions {
    SolveOptions { max_terms, tol, probes, seed, force, ..SolveOptions::new(p, lambda) }
}

pub fn solve(cfg: &SolveConfig, run: &mut RunDir) -> Result<(), CliError> {
    let grid = &cfg.grid;
    let b = sample_drift(&cfg.field, cfg.level, grid, cfg.sample_mode)?;
    let f = ScalarLattice::from_fn(grid, |t, x| cfg.source.eval(t, x));
    let mut sweep = Table::new(
        "gate_sweep",
        vec![
            ("lambda", "resolvent parameter"),
            ("gate", "probed lower bound of the T_p operator norm"),
            ("argmax_probe", "index of the maximizing probe"),
            ("below_one", "gate < 1"),
            ("decreasing", "gate below the previous row"),
        ],
    );
    let mut reports = Vec::new();
    let mut prev = f64::INFINITY;
    let mut last_ops = None;
    for &lambda in &cfg.lambda {
        let opts = solve_options(cfg.p, lambda, cfg.max_terms, cfg.tol, cfg.probes, cfg.seed, true);
        let ops = DriftOperators::new(&b, cfg.p, lambda)?;
        let rep = gate(&ops, &opts)?;
        sweep.push(vec![
            lambda.into(),
            rep.max_ratio.into(),
            rep.argmax.into(),
            (rep.max_ratio < 1.0).into(),
            (rep.max_ratio < prev).into(),
        ]);
        prev = rep.max_ratio;
        reports.push(rep);
        last_ops = Some(ops);
    }
    run.csv(&sweep)?;
    let ops = last_ops.expect("nonempty lambda sweep");
    let last = reports.last().expect("nonempty lambda sweep").clone();
    let lambda = *cfg.lambda.last().expect("nonempty lambda sweep");
    if last.max_ratio >= 1.0 && !cfg.force {
        run.json("gate_refused.json", json!({ "probe": last, "sweep": reports }))?;
        return Err(CliError::Gate(Box::new(last)));
    }
    let opts = solve_options(cfg.p, lambda, cfg.max_terms, cfg.tol, cfg.probes, cfg.seed, cfg.force);
    let rep = neumann_solve_with(&ops, &f, &opts)?;
    let u = rep.solution();
    let residual = pde_residual(u, &b, &f, lambda, cfg.p)?;
    let mut terms = Table::new(
        "terms",
        vec![
            ("k", "Neumann term index"),
            ("term_norm", "p-norm of (-T_p)^k w"),
            ("ratio", "term_norm / previous term_norm (empty for k = 0)"),
        ],
    );
    for (k, n) in rep.term_norms.iter().enumerate() {
        let ratio = if k == 0 { "".into() } else { crate::artifacts::fmt_f64(rep.ratios[k - 1]).into() };
        terms.push(vec![k.into(), (*n).into(), ratio]);
    }
    run.csv(&terms)?;
    run.lattice("u", u)?;
    run.json("solve.json", json!({ "report": rep, "residual": residual, "gate_sweep": reports }))?;
    if !cfg.levels.is_empty() {
        let table =
            approximation_convergence(&cfg.field, grid, &Problem::Rhs(&f), &cfg.levels, cfg.sample_mode, &opts)?;
        run.csv(&convergence_table(&table))?;
        run.json("convergence.json", serde_json::to_value(&table).expect("table serializes"))?;
    }
    Ok(())
}

pub fn propagate(cfg: &PropagateConfig, run: &mut RunDir) -> Result<(), CliError> {
    let grid = &cfg.grid;
    let b = sample_drift(&cfg.field, cfg.level, grid, cfg.sample_mode)?;
    let g = SpatialLattice::from_fn(grid, |x| cfg.initial.eval(1.0, x));
    let source = cfg.source.as_ref().map(|s| ScalarLattice::from_fn(grid, |t, x| s.eval(t, x)));
    let solve = solve_options(cfg.p, cfg.lambda, cfg.max_terms, cfg.tol, cfg.probes, cfg.seed, cfg.force);
    let opts = PropagateOptions { solve: solve.clone(), rescale_to_zero_lambda: cfg.rescale_to_zero_lambda };
    let ops = DriftOperators::new(&b, cfg.p, cfg.lambda)?;
    let data = CauchyData { g: &g, r: cfg.r, source: source.as_ref() };
    let rep = match cauchy_propagate_with(&ops, &data, &opts) {
        Err(morrey_lab::error::Error::GateRefused { report }) => {
            run.json("gate_refused.json", json!({ "probe": report }))?;
            return Err(CliError::Gate(report));
        }
        other => other?,
    };
    run.lattice("v", rep.solution())?;
    run.json("propagate.json", json!({ "report": rep }))?;
    if !cfg.levels.is_empty() {
        let table = approximation_convergence(
            &cfg.field,
            grid,
            &Problem::Cauchy { g: &g, r: cfg.r },
            &cfg.levels,
            cfg.sample_mode,
            &solve,
        )?;
        run.csv(&convergence_table(&table))?;
        run.json("convergence.json", serde_json::to_value(&table).expect("table serializes"))?;
    }
    Ok(())
}

pub fn simulate_run(cfg: &SimulateConfig, run: &mut RunDir) -> Result<(), CliError> {
    let euler = EulerConfig {
        noise_substeps: cfg.noise_substeps,
        ..EulerConfig::new(cfg.x0.clone(), cfg.t_end, cfg.dt, cfg.paths, cfg.seed, cfg.level)
    };
    let ens = simulate(&euler, &cfg.field)?;
    let dim = ens.dim();
    let means: Vec<_> = (0..dim).map(|a| ens.terminal_mean(|x| x[a])).collect();
    let sq = ens.terminal_mean(|x| x.iter().zip(&cfg.x0).map(|(v, c)| (v - c).powi(2)).sum());
    run.json(
        "simulate.json",
        json!({
            "euler": euler,
            "flagged": ens.flagged,
            "increments": ens.increments,
            "increments_consistent_4sigma": ens.increments_consistent(4.0),
            "terminal_mean": means,
            "terminal_square_displacement": sq,
        }),
    )?;
    if let Some(k) = &cfg.krylov {
        let fit = krylov_fit(&ens, &cfg.field, k.level, &k.windows)?;
        let mut t = Table::new(
            "krylov",
            vec![
                ("h", "window length"),
                ("estimate", "mean of the integral of |b_k(t, X_t)| over [0, h]"),
                ("stderr", "batch-means standard error"),
                ("fit_c", "fitted C in C h^gamma"),
                ("fit_gamma", "fitted gamma"),
                ("gamma_ci_low", "95% interval, lower end"),
                ("gamma_ci_high", "95% interval, upper end"),
                ("r_squared", "coefficient of determination of the log-log fit"),
            ],
        );
        for i in 0..fit.windows.len() {
            t.push(vec![
                fit.windows[i].into(),
                fit.estimates[i].into(),
                fit.stderrs[i].into(),
                fit.c.into(),
                fit.gamma.into(),
                fit.gamma_ci.0.into(),
                fit.gamma_ci.1.into(),
                fit.r_squared.into(),
            ]);
        }
        run.csv(&t)?;
        run.json("krylov.json", serde_json::to_value(&fit).expect("fit serializes"))?;
    }
    if !cfg.martingale_checkpoints.is_empty() {
        let mut t = Table::new(
            "martingale",
            vec![
                ("function", "stock test function index"),
                ("radius", "support radius of the test function"),
                ("checkpoint", "time r"),
                ("mean", "mean of M_r"),
                ("stderr", "batch-means standard error"),
                ("z", "mean / stderr"),
            ],
        );
        let mut rows = Vec::new();
        for (i, f) in BumpTest::stock(&cfg.x0).iter().enumerate() {
            for row in martingale_residual(&ens, f, &cfg.martingale_checkpoints)? {
                t.push(vec![
                    i.into(),
                    f.radius.into(),
                    row.checkpoint.into(),
                    row.mean.value.into(),
                    row.mean.stderr.into(),
                    (row.mean.value / row.mean.stderr).into(),
                ]);
                rows.push(json!({ "function": f, "row": row }));
            }
        }
        run.csv(&t)?;
        run.json("martingale.json", json!({ "rows": rows }))?;
    }
    if !cfg.tail_radii.is_empty() {
        let mut t = Table::new("tail", vec![("radius", "R"), ("mass", "fraction of paths with sup |X_t| >= R")]);
        for &r in &cfg.tail_radii {
            t.push(vec![r.into(), tail_mass(&ens, r).into()]);
        }
        run.csv(&t)?;
    }
    if let Some(nu) = cfg.nu {
        let dict = stock_box_dictionary(&cfg.x0, cfg.t_end);
        let rep = krylov_nu_ratio(&ens, &dict, nu)?;
        let mut t = Table::new(
            "krylov_nu",
            vec![
                ("box", "dictionary index"),
                ("side", "box side length"),
                ("occupation", "mean occupation of the box over [0, T]"),
                ("stderr", "batch-means standard error"),
                ("ratio", "occupation / L^nu norm of the box indicator"),
            ],
        );
        for (i, bx) in dict.iter().enumerate() {
            t.push(vec![
                i.into(),
                (bx.hi[0] - bx.lo[0]).into(),
                rep.occupations[i].value.into(),
                rep.occupations[i].stderr.into(),
                rep.ratios[i].into(),
            ]);
        }
        run.csv(&t)?;
    }
    Ok(())
}
