use mvdiv::equilibrium::{equilibrium_sweep, SweepReport, Verdict};
use mvdiv::oracle::{hjb_residual, max_abs_error, min_x_max, solve_moments};
use mvdiv::{estimate, EquilibriumSolution, Regime, Side};
use serde::Serialize;

use crate::commands::{csv_err, equilibrium, relative_scale};
use crate::manifest::{pretty, write_file, RunManifest};
use crate::{Ctx, Failure};

const PASTING_TOL: f64 = 1e-10;
const UNIT_SLOPE_TOL: f64 = 1e-8;
const HJB_TOL: f64 = 1e-8;
const FORM_GAP_TOL: f64 = 1e-10;
const ORACLE_TOL: f64 = 1e-4;
const MC_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

#[derive(Serialize)]
struct VerifyReport {
    manifest: serde_json::Value,
    regime: Regime,
    x_tilde: Option<f64>,
    fault_injected: Option<String>,
    checks: Vec<Check>,
    pass: bool,
}

fn smooth_pasting(sol: &EquilibriumSolution<f64>) -> Check {
    let Some(xt) = sol.x_tilde() else {
        return Check { name: "smooth_pasting", pass: true, detail: "no barrier in the max-rate regime".into() };
    };
    let f = sol.form();
    let (gl, gr) = (f.g_jet(xt, Side::Left), f.g_jet(xt, Side::Right));
    let (hl, hr) = (f.h_jet(xt, Side::Left), f.h_jet(xt, Side::Right));
    let gap = [gl.v - gr.v, gl.d1 - gr.d1, hl.v - hr.v, hl.d1 - hr.d1].iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let slope = (f.v_jet(xt, Side::Left).d1 - 1.0).abs().max((f.v_jet(xt, Side::Right).d1 - 1.0).abs());
    Check {
        name: "smooth_pasting",
        pass: gap <= PASTING_TOL && slope <= UNIT_SLOPE_TOL,
        detail: format!("max jump of G, G′, H, H′ at x̃: {gap:.2e}; |V′(x̃) − 1| = {slope:.2e}"),
    }
}

fn hjb(sol: &EquilibriumSolution<f64>, nodes: usize) -> Result<Check, Failure> {
    let p = sol.params();
    let x_max = min_x_max(p, &sol.strategy()).map_err(|e| Failure::Numerical(e.to_string()))?;
    let h = x_max / (nodes.max(2) - 1) as f64;
    let xs: Vec<f64> = (0..nodes).map(|i| i as f64 * h).collect();
    let mut sup: f64 = 0.0;
    let mut gap: f64 = 0.0;
    let mut wrong = 0usize;
    for node in hjb_residual(sol, &xs) {
        let rule = match sol.x_tilde() {
            Some(xt) if node.x <= xt => 0.0,
            _ => p.d_bar(),
        };
        if node.argmax_d != rule {
            wrong += 1;
        }
        gap = gap.max(node.form_gap);
        if sol.x_tilde().is_none_or(|xt| (node.x - xt).abs() > h) {
            sup = sup.max(node.sup_residual.abs());
        }
    }
    Ok(Check {
        name: "hjb_residual",
        pass: sup <= HJB_TOL && wrong == 0 && gap <= FORM_GAP_TOL,
        detail: format!("sup residual {sup:.2e} on {nodes} nodes; {wrong} nodes off the payout rule; form gap {gap:.1e}"),
    })
}

fn oracle(sol: &EquilibriumSolution<f64>, nodes: usize) -> Result<Check, Failure> {
    let p = sol.params();
    let s = sol.strategy();
    let x_max = min_x_max(p, &s).map_err(|e| Failure::Numerical(e.to_string()))?;
    let solve_at = |n| solve_moments(p, &s, x_max, n).map_err(|e| Failure::Config(e.to_string()));
    let (eg, eh) = max_abs_error(&solve_at(nodes)?, sol.form());
    let (cg, ch) = max_abs_error(&solve_at(nodes / 2)?, sol.form());
    let ratio = (cg / eg).min(ch / eh);
    Ok(Check {
        name: "ode_oracle",
        pass: eg <= ORACLE_TOL && eh <= ORACLE_TOL,
        detail: format!("max |G − grid| {eg:.2e}, max |H − grid| {eh:.2e} at {nodes} nodes; halving ratio {ratio:.2}"),
    })
}

fn monte_carlo(ctx: &Ctx, sol: &EquilibriumSolution<f64>, xs: &[f64]) -> Result<Check, Failure> {
    let b = ctx.loaded.config.verify_budgets(&ctx.over);
    let seed = ctx.loaded.config.seed(&ctx.over);
    let p = sol.params();
    let mut worst: f64 = 0.0;
    let mut at = 0.0;
    for (i, &x0) in xs.iter().enumerate() {
        let cfg = ctx.loaded.config.sim_with(b.mc_dt, b.mc_paths, seed.wrapping_add(i as u64))?;
        let e = estimate(p, &sol.strategy(), x0, &cfg).map_err(|e| Failure::Config(e.to_string()))?;
        let z = ((e.mean_y - sol.eval_g(x0)) / e.stderr_y).abs().max(((e.mean_y2 - sol.eval_h(x0)) / e.stderr_y2).abs());
        if z > worst {
            worst = z;
            at = x0;
        }
    }
    Ok(Check {
        name: "mc_vs_closed_form",
        pass: worst <= MC_SIGMAS,
        detail: format!(
            "worst |MC − closed form| = {worst:.2} stderr (x0 = {at:.4}) over {} starts, {} paths, dt = {}",
            xs.len(),
            b.mc_paths,
            b.mc_dt
        ),
    })
}

fn sweep(ctx: &Ctx, sol: &EquilibriumSolution<f64>, xs: &[f64]) -> Result<(Check, SweepReport<f64>), Failure> {
    let b = ctx.loaded.config.verify_budgets(&ctx.over);
    let p = sol.params();
    let cfg = ctx.loaded.config.sim_with(b.sweep_dt, b.sweep_paths, ctx.loaded.config.seed(&ctx.over))?;
    let ds = [0.0, p.d_bar() / 2.0, p.d_bar()];
    let r = equilibrium_sweep(p, &sol.strategy(), xs, &ds, &b.eps_ladder, &cfg)
        .map_err(|e| Failure::Config(e.to_string()))?;
    let w = &r.cells[r.worst];
    let check = Check {
        name: "equilibrium_sweep",
        pass: r.verdict == Verdict::Pass,
        detail: format!(
            "{} cells; worst x0 = {:.4}, d = {}: slope {:.3e} ± {:.1e} (threshold {:.3e})",
            r.cells.len(),
            w.estimate.x0,
            w.estimate.d_dev,
            w.estimate.extrapolated_slope,
            w.estimate.stderr_extrapolated,
            w.threshold
        ),
    };
    Ok((check, r))
}

/// One row per sweep cell.
fn sweep_csv(manifest: &RunManifest, r: &SweepReport<f64>) -> Result<String, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x0", "d_dev", "slope", "stderr", "threshold", "verdict", "ruin_fraction"]).map_err(csv_err)?;
    for c in &r.cells {
        let e = &c.estimate;
        w.write_record([
            format!("{}", e.x0),
            format!("{}", e.d_dev),
            format!("{:e}", e.extrapolated_slope),
            format!("{:e}", e.stderr_extrapolated),
            format!("{:e}", c.threshold),
            format!("{:?}", c.verdict).to_lowercase(),
            format!("{}", e.ruin_fraction),
        ])
        .map_err(csv_err)?;
    }
    let body = w.into_inner().map_err(|e| csv_err(e.into_error()))?;
    Ok(manifest.csv_comment() + &String::from_utf8(body).expect("csv is utf-8"))
}

/// Runs every suite; returns whether all passed.
pub fn cmd_verify(ctx: &Ctx) -> Result<bool, Failure> {
    let cfg = &ctx.loaded.config;
    let p = cfg.params()?;
    let budgets = cfg.verify_budgets(&ctx.over);
    if budgets.x0_relative.is_empty() || budgets.x0_relative.iter().any(|r| !(*r > 0.0)) {
        return Err(Failure::Config("verify.x0_relative entries must be > 0".into()));
    }
    if budgets.oracle_nodes < 2 * mvdiv::oracle::MIN_NODES {
        return Err(Failure::Config(format!("verify.oracle_nodes must be ≥ {}", 2 * mvdiv::oracle::MIN_NODES)));
    }
    let mut sol = equilibrium(&p)?;
    let fault = ctx.fault.map(|rel| {
        sol = sol.with_perturbed_c1(rel);
        format!("C1 scaled by {}", 1.0 + rel)
    });
    let xs: Vec<f64> = budgets.x0_relative.iter().map(|r| r * relative_scale(&sol)).collect();

    let mut checks = vec![smooth_pasting(&sol), hjb(&sol, budgets.oracle_nodes)?, oracle(&sol, budgets.oracle_nodes)?];
    checks.push(monte_carlo(ctx, &sol, &xs)?);
    let mut cells = None;
    if budgets.sweep {
        let (check, report) = sweep(ctx, &sol, &xs)?;
        checks.push(check);
        cells = Some(report);
    }
    let pass = checks.iter().all(|c| c.pass);

    let mut manifest = ctx.manifest("verify");
    if ctx.out.is_some() {
        manifest.outputs.push("verify.json".into());
        if cells.is_some() {
            manifest.outputs.push("equilibrium_sweep.csv".into());
        }
    }
    let report = VerifyReport {
        manifest: manifest.stamped(),
        regime: sol.regime(),
        x_tilde: sol.x_tilde(),
        fault_injected: fault,
        checks: checks.clone(),
        pass,
    };
    let body = pretty(&report);
    if let Some(dir) = &ctx.out {
        write_file(dir, "verify.json", body.as_bytes())?;
        if let Some(r) = &cells {
            write_file(dir, "equilibrium_sweep.csv", sweep_csv(&manifest, r)?.as_bytes())?;
        }
        manifest.write(dir)?;
    }
    print!("{body}");
    for c in &checks {
        eprintln!("{:<18} {}  {}", c.name, if c.pass { "PASS" } else { "FAIL" }, c.detail);
    }
    if !pass {
        let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
        eprintln!("verification failed: {}", failed.join(", "));
    }
    Ok(pass)
}
