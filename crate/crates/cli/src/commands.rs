use mvdiv::oracle::{hjb_expression, min_x_max, solve_moments};
use mvdiv::simulate::{write_paths_csv, MomentSums};
use mvdiv::{
    estimate, simulate_paths, solve, solve_barrier, ClosedForm, ClosedFormError, EquilibriumSolution, MCEstimate,
    ModelParams, Regime, SolveError, Strategy,
};
use serde::Serialize;

use crate::config::{Grid, StrategySpec};
use crate::manifest::{pretty, write_file, RunManifest};
use crate::{Ctx, Failure};

pub fn equilibrium(p: &ModelParams<f64>) -> Result<EquilibriumSolution<f64>, Failure> {
    match solve(p) {
        Ok((sol, _)) => Ok(sol),
        Err(e @ SolveError::Unresolved { .. }) => Err(Failure::Unresolved(format!(
            "{e}. Neither a positive barrier solving f(x, γ) = 1 nor the max-rate condition \
             (d̄/ρ + 1/r6 < 0 with γ below its threshold) applies."
        ))),
        Err(SolveError::ClosedForm(e)) => Err(numerical(e)),
    }
}

fn numerical(e: ClosedFormError) -> Failure {
    Failure::Numerical(e.to_string())
}

/// Strategy from the config together with closed forms when they exist.
fn strategy_and_form(
    ctx: &Ctx,
    p: &ModelParams<f64>,
) -> Result<(Strategy<f64>, Option<ClosedForm<f64>>), Failure> {
    let spec = &ctx.loaded.config.strategy;
    Ok(match spec {
        StrategySpec::Equilibrium => {
            let sol = equilibrium(p)?;
            (sol.strategy(), Some(*sol.form()))
        }
        StrategySpec::MaxRate => (Strategy::max_rate(p), Some(ClosedForm::max_rate(p))),
        StrategySpec::Barrier(x) => {
            let s = spec.build(p, &ctx.loaded.dir)?;
            (s, Some(ClosedForm::barrier(p, *x).map_err(numerical)?))
        }
        StrategySpec::Constant(d) if *d == p.d_bar() => (Strategy::max_rate(p), Some(ClosedForm::max_rate(p))),
        _ => (spec.build(p, &ctx.loaded.dir)?, None),
    })
}

/// Emits `name` into the output directory, or to stdout without one.
fn emit(ctx: &Ctx, manifest: &RunManifest, name: &str, body: &str) -> Result<(), Failure> {
    match &ctx.out {
        Some(dir) => {
            write_file(dir, name, body.as_bytes())?;
            manifest.write(dir)
        }
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct SolveReport {
    manifest: serde_json::Value,
    regime: Regime,
    payout_condition: f64,
    x_tilde: Option<f64>,
    constants: Option<mvdiv::BarrierConstants<f64>>,
    f_residual: Option<f64>,
    eps_tilde: Option<f64>,
    roots: [f64; 8],
}

pub fn cmd_solve(ctx: &Ctx) -> Result<(), Failure> {
    let cfg = &ctx.loaded.config;
    let p = cfg.params()?;
    let (sol, class) = match solve(&p) {
        Ok(v) => v,
        Err(_) => return Err(equilibrium(&p).expect_err("solve failed")),
    };
    let mut manifest = ctx.manifest("solve");
    if ctx.out.is_some() {
        manifest.outputs = vec!["solve.json".into()];
    }
    let report = SolveReport {
        manifest: manifest.stamped(),
        regime: sol.regime(),
        payout_condition: class.payout_condition,
        x_tilde: sol.x_tilde(),
        constants: sol.constants(),
        f_residual: sol.f_residual(),
        eps_tilde: class.eps_tilde.map(|e| e.value),
        roots: sol.roots().as_array(),
    };
    let body = pretty(&report);
    if let Some(dir) = &ctx.out {
        write_file(dir, "solve.json", body.as_bytes())?;
        manifest.write(dir)?;
    }
    print!("{body}");
    Ok(())
}

pub fn cmd_sweep(ctx: &Ctx) -> Result<(), Failure> {
    let cfg = &ctx.loaded.config;
    let base = cfg.params()?;
    if cfg.gamma_grid.is_none() && cfg.dbar_grid.is_none() {
        return Err(Failure::Config("sweep needs gamma_grid and/or dbar_grid".into()));
    }
    let single = |v: f64| Grid::List(vec![v]);
    let gammas = cfg.gamma_grid.clone().unwrap_or_else(|| single(cfg.gamma)).points("gamma_grid")?;
    let dbars = cfg.dbar_grid.clone().unwrap_or_else(|| single(cfg.d_bar)).points("dbar_grid")?;
    let mut manifest = ctx.manifest("sweep");
    if ctx.out.is_some() {
        manifest.outputs = vec!["sweep.csv".into()];
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["gamma", "d_bar", "x_tilde", "status"]).map_err(csv_err)?;
    for &g in &gammas {
        for &d in &dbars {
            let p = ModelParams::new(base.a(), base.b(), base.rho(), d, g)
                .map_err(|e| Failure::Config(format!("grid point γ={g}, d̄={d}: {e}")))?;
            let (x, status) = match solve_barrier(&p) {
                Ok(Some(x)) => (format!("{x}"), "found".to_string()),
                Ok(None) => (String::new(), "not_found".to_string()),
                Err(ClosedFormError::MultipleRoots(n)) => (String::new(), format!("multiple_roots({n})")),
                Err(e) => (String::new(), format!("error({e})")),
            };
            w.write_record([format!("{g}"), format!("{d}"), x, status]).map_err(csv_err)?;
        }
    }
    let body = manifest.csv_comment() + &String::from_utf8(w.into_inner().map_err(|e| csv_err(e.into_error()))?)
        .expect("csv is utf-8");
    emit(ctx, &manifest, "sweep.csv", &body)
}

pub fn csv_err<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Config(format!("csv: {e}"))
}

pub fn cmd_eval(ctx: &Ctx) -> Result<(), Failure> {
    let cfg = &ctx.loaded.config;
    let p = cfg.params()?;
    let xs = cfg
        .x_grid
        .clone()
        .unwrap_or(Grid::Range { start: 0.0, stop: 2.0, step: 0.01 })
        .points("x_grid")?;
    if xs.iter().any(|x| *x < 0.0) {
        return Err(Failure::Config("x_grid must be ≥ 0".into()));
    }
    let (strategy, form) = strategy_and_form(ctx, &p)?;
    let mut manifest = ctx.manifest("eval");
    if ctx.out.is_some() {
        manifest.outputs = vec!["eval.csv".into()];
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "G", "H", "V", "residual", "argmax_d"]).map_err(csv_err)?;
    match form {
        Some(f) => {
            for &x in &xs {
                let at_zero = hjb_expression(&f, x, 0.0);
                let at_max = hjb_expression(&f, x, p.d_bar());
                let (sup, arg) = if at_max > at_zero { (at_max, p.d_bar()) } else { (at_zero, 0.0) };
                w.write_record([
                    format!("{x}"),
                    format!("{:e}", f.g(x)),
                    format!("{:e}", f.h(x)),
                    format!("{:e}", f.v(x)),
                    format!("{sup:e}"),
                    format!("{arg}"),
                ])
                .map_err(csv_err)?;
            }
        }
        None => {
            // No closed form: interpolate the finite-difference grid.
            let top = xs.iter().copied().fold(0.0, f64::max);
            let need = min_x_max(&p, &strategy).map_err(|e| Failure::Config(e.to_string()))?;
            let x_max = need.max(1.05 * top);
            let nodes = ((x_max / 1e-3) as usize).clamp(8000, 200_000);
            let grid = solve_moments(&p, &strategy, x_max, nodes).map_err(|e| Failure::Numerical(e.to_string()))?;
            let v = grid.v(p.gamma());
            let at = |vals: &[f64], x: f64| {
                let i = ((x / grid.step) as usize).min(grid.x.len() - 2);
                let t = (x - grid.x[i]) / grid.step;
                vals[i] * (1.0 - t) + vals[i + 1] * t
            };
            for &x in &xs {
                w.write_record([
                    format!("{x}"),
                    format!("{:e}", at(&grid.g, x)),
                    format!("{:e}", at(&grid.h, x)),
                    format!("{:e}", at(&v, x)),
                    String::new(),
                    String::new(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    let body = manifest.csv_comment() + &String::from_utf8(w.into_inner().map_err(|e| csv_err(e.into_error()))?)
        .expect("csv is utf-8");
    emit(ctx, &manifest, "eval.csv", &body)
}

#[derive(Serialize)]
struct Compared {
    g: f64,
    h: f64,
    j: f64,
    z_mean_y: f64,
    z_mean_y2: f64,
}

#[derive(Serialize)]
struct SimRow {
    x0: f64,
    estimate: MCEstimate<f64>,
    closed_form: Option<Compared>,
}

#[derive(Serialize)]
struct SimReport {
    manifest: serde_json::Value,
    strategy: String,
    sim: mvdiv::SimConfig,
    results: Vec<SimRow>,
}

pub fn cmd_simulate(ctx: &Ctx) -> Result<(), Failure> {
    let cfg = &ctx.loaded.config;
    let p = cfg.params()?;
    let x0s = cfg.x0.clone().ok_or_else(|| Failure::Config("simulate needs x0 (a list of starting surpluses)".into()))?;
    if x0s.is_empty() || x0s.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
        return Err(Failure::Config("x0 entries must be finite and > 0".into()));
    }
    let sim = cfg.sim(&ctx.over)?;
    let (strategy, form) = strategy_and_form(ctx, &p)?;
    let dump = cfg.dump_paths && ctx.out.is_some();
    let mut manifest = ctx.manifest("simulate");
    if ctx.out.is_some() {
        manifest.outputs.push("simulate.json".into());
        if dump {
            manifest.outputs.extend((0..x0s.len()).map(|i| format!("paths_{i}.csv")));
        }
    }
    let mut rows = Vec::new();
    for (i, &x0) in x0s.iter().enumerate() {
        let est = if dump {
            let paths = simulate_paths(&p, &strategy, x0, &sim).map_err(|e| Failure::Config(e.to_string()))?;
            let mut total = MomentSums::zero();
            for chunk in paths.chunks(sim.batch_size) {
                let mut acc = MomentSums::zero();
                chunk.iter().for_each(|o| acc.push(o));
                total.merge(&acc);
            }
            let mut buf = manifest.csv_comment().into_bytes();
            write_paths_csv(&mut buf, &paths).map_err(csv_err)?;
            write_file(ctx.out.as_deref().expect("dump needs --out"), &format!("paths_{i}.csv"), &buf)?;
            total.estimate(p.gamma())
        } else {
            estimate(&p, &strategy, x0, &sim).map_err(|e| Failure::Config(e.to_string()))?
        };
        let closed_form = form.map(|f| Compared {
            g: f.g(x0),
            h: f.h(x0),
            j: f.g(x0) - p.gamma() / 2.0 * f.variance(x0),
            z_mean_y: (est.mean_y - f.g(x0)) / est.stderr_y,
            z_mean_y2: (est.mean_y2 - f.h(x0)) / est.stderr_y2,
        });
        rows.push(SimRow { x0, estimate: est, closed_form });
    }
    let report = SimReport {
        manifest: manifest.stamped(),
        strategy: cfg.strategy.label(),
        sim,
        results: rows,
    };
    let body = pretty(&report);
    if let Some(dir) = &ctx.out {
        write_file(dir, "simulate.json", body.as_bytes())?;
        manifest.write(dir)?;
    }
    print!("{body}");
    Ok(())
}

pub fn relative_scale(sol: &EquilibriumSolution<f64>) -> f64 {
    sol.x_tilde().unwrap_or_else(|| 1.0 / sol.roots().r6.abs())
}

