//! The `simulate`, `sweep`, `certify` and `reproduce` commands.

use std::path::Path;

use mismatch_mpc::closedloop::{
    bisect_delta, constant_theta, cost_difference_field, descent_certification, exponential_fit,
    fit_gamma_v, lyapunov_increase_envelope, random_theta, rpi_check, run_closed_loop, sample_sublevel,
    CertificationReport, CertificationSetup, ClosedLoopRun, Controller, CostDifferenceField, GammaVFit,
    Lyapunov, RpiReport, StabilityVerdict, ThetaSpace,
};
use mismatch_mpc::compfn::{scaling_limit_estimate, ScalingReport, ScalingVerdict};
use mismatch_mpc::terminal::{eigenvalues_2x2, pendulum_linear_feedback, pendulum_terminal_constants};
use serde::Serialize;

use crate::config::{Experiment, ExperimentConfig};
use crate::error::CliError;
use crate::output::{fmt_f64, indexed, ArtifactWriter, ManifestEntry, Num, Table};
use crate::scenario::ScenarioRegistry;
use crate::svg::{contour_plot, line_chart, Series};

/// Figure tags `(contour, trajectories)` for a scenario's outputs.
fn figure_tags(scenario: &str) -> (&'static str, &'static str) {
    match scenario {
        "integrator" => ("fig1", "fig2"),
        "signed-sqrt" => ("fig3", "fig4"),
        "sin" => ("sin-contour", "sin-trajectories"),
        "pendulum" => ("diagnostic", "fig5"),
        _ => ("diagnostic", "diagnostic"),
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn controller(exp: &Experiment) -> Controller<'_> {
    Controller::new(&exp.scenario.problem, exp.solver.as_ref())
}

/// A closed-loop run with the description of its parameter sequence.
#[derive(Debug, Clone)]
pub struct LabeledRun {
    pub label: String,
    pub x0: Vec<f64>,
    /// `None` for random sequences.
    pub theta: Option<Vec<f64>>,
    pub run: ClosedLoopRun,
}

/// Constant-`θ` runs for every `(x0, θ)` pair, then the random-sequence runs.
pub fn simulate_runs(exp: &Experiment) -> Result<Vec<LabeledRun>, CliError> {
    let ctrl = controller(exp);
    let sc = &exp.scenario;
    let mut jobs: Vec<(String, Vec<f64>, Option<Vec<f64>>, Vec<Vec<f64>>)> = Vec::new();
    for x0 in &exp.x0 {
        for th in &exp.thetas {
            let label = format!("x0={} theta={}", fmt_vec(x0), fmt_vec(th));
            jobs.push((label, x0.clone(), Some(th.clone()), constant_theta(th, exp.k_max)));
        }
        for r in 0..exp.random_runs {
            let seed = exp.seed.wrapping_add(r as u64);
            let label = format!("x0={} random delta={} seed={seed}", fmt_vec(x0), fmt_f64(exp.delta));
            jobs.push((label, x0.clone(), None, random_theta(&sc.theta_space, exp.delta, exp.k_max, seed)));
        }
    }
    jobs.into_iter()
        .map(|(label, x0, theta, seq)| {
            let run = run_closed_loop(&ctrl, sc.plant(), &x0, &seq, sc.escape_radius()).map_err(|e| match e {
                mismatch_mpc::Error::InfeasibleStart(m) => CliError::InfeasibleStart(m),
                e => e.into(),
            })?;
            Ok(LabeledRun { label, x0, theta, run })
        })
        .collect()
}

fn fmt_vec(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(";"))
}

/// Columns `k, x…, u…, theta…, V, dV`, with a leading `run` column when
/// `run_index` is given. The last row holds the final state only.
pub fn run_table(runs: &[(usize, &ClosedLoopRun)], with_run: bool) -> Table {
    let first = runs[0].1;
    let n = first.states[0].len();
    let m = first.inputs.first().map_or(1, Vec::len);
    let p = first.theta_seq.first().map_or(1, Vec::len);
    let mut header: Vec<String> = Vec::new();
    if with_run {
        header.push("run".into());
    }
    header.push("k".into());
    header.extend(indexed("x", n));
    header.extend(indexed("u", m));
    header.extend(indexed("theta", p));
    header.extend(["V".to_string(), "dV".to_string()]);
    let mut t = Table::new(header);
    for (idx, run) in runs {
        for k in 0..run.states.len() {
            let mut row = Vec::new();
            if with_run {
                row.push(idx.to_string());
            }
            row.push(k.to_string());
            row.extend(run.states[k].iter().map(|v| fmt_f64(*v)));
            let opt = |v: Option<&Vec<f64>>, len: usize| -> Vec<String> {
                v.map_or_else(|| vec![String::new(); len], |v| v.iter().map(|x| fmt_f64(*x)).collect())
            };
            row.extend(opt(run.inputs.get(k), m));
            row.extend(opt(run.theta_seq.get(k), p));
            row.push(run.values.get(k).map_or_else(String::new, |v| fmt_f64(*v)));
            row.push(run.delta_v.get(k).map_or_else(String::new, |v| fmt_f64(*v)));
            t.push(row);
        }
    }
    t
}

fn trajectory_chart(title: &str, runs: &[LabeledRun], coord: usize) -> String {
    let series: Vec<Series> = runs
        .iter()
        .map(|r| Series {
            label: r.label.clone(),
            points: r.run.states.iter().enumerate().map(|(k, x)| (k as f64, x[coord])).collect(),
        })
        .collect();
    line_chart(title, "k", &format!("x{}", coord + 1), &series)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub file: String,
    pub label: String,
    pub x0: Vec<f64>,
    pub theta: Option<Vec<f64>>,
    pub steps: usize,
    pub final_norm: Num,
    pub min_norm: Num,
    pub converged: bool,
    pub escaped: bool,
    /// `V` never increased by more than `1e-8` in one step.
    pub value_nonincreasing: bool,
    pub decay_rate: Option<Num>,
}

fn summarize(file: String, r: &LabeledRun, tol: f64) -> RunSummary {
    let norms = r.run.norms();
    let fit = exponential_fit(&r.run).ok();
    RunSummary {
        file,
        label: r.label.clone(),
        x0: r.x0.clone(),
        theta: r.theta.clone(),
        steps: r.run.inputs.len(),
        final_norm: Num(*norms.last().expect("nonempty")),
        min_norm: Num(norms.iter().copied().fold(f64::INFINITY, f64::min)),
        converged: r.run.converged(tol),
        escaped: r.run.escaped,
        value_nonincreasing: r.run.delta_v.iter().all(|d| *d <= 1e-8),
        decay_rate: fit.map(|f| Num(f.lambda)),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub scenario: String,
    pub solver: String,
    pub k_max: usize,
    pub converge_tol: f64,
    pub runs: Vec<RunSummary>,
}

/// Per-run CSVs, one chart per state coordinate, and `summary.json`.
pub fn simulate(exp: &Experiment) -> Result<SimulateSummary, CliError> {
    let runs = simulate_runs(exp)?;
    let mut w = ArtifactWriter::new(&exp.out)?;
    let (_, tag) = figure_tags(exp.scenario.name);
    let mut summaries = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        let file = format!("run_{i:02}.csv");
        w.write(&file, &run_table(&[(i, &r.run)], false).render(), tag, &format!("closed-loop run, {}", r.label))?;
        summaries.push(summarize(file, r, exp.converge_tol));
    }
    for j in 0..exp.scenario.problem.n() {
        let svg = trajectory_chart(&format!("{}: closed-loop x{}", exp.scenario.name, j + 1), &runs, j);
        w.write(&format!("x{}.svg", j + 1), &svg, tag, &format!("state coordinate {} against k", j + 1))?;
    }
    let summary = SimulateSummary {
        scenario: exp.scenario.name.to_string(),
        solver: exp.solver_name.clone(),
        k_max: exp.k_max,
        converge_tol: exp.converge_tol,
        runs: summaries,
    };
    w.write_json("summary.json", &summary, "diagnostic", "per-run convergence summary")?;
    w.finish()?;
    Ok(summary)
}

/// State grid along the first coordinate (others zero) and parameter grid
/// along the first free coordinate (others at their base values).
pub fn sweep_grids(exp: &Experiment) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = exp.scenario.problem.n();
    let space = &exp.scenario.theta_space;
    let xs = linspace(exp.x_range.0, exp.x_range.1, exp.x_points)
        .into_iter()
        .map(|v| {
            let mut x = vec![0.0; n];
            x[0] = v;
            x
        })
        .collect();
    let ths = linspace(exp.theta_range.0, exp.theta_range.1, exp.theta_points)
        .into_iter()
        .map(|v| {
            let mut t = vec![0.0; space.free_dim()];
            t[0] = v;
            space.embed(&t)
        })
        .collect();
    (xs, ths)
}

pub fn compute_field(exp: &Experiment) -> Result<CostDifferenceField, CliError> {
    let (xs, ths) = sweep_grids(exp);
    Ok(cost_difference_field(&controller(exp), exp.scenario.plant(), &xs, &ths)?)
}

/// Columns `x…, theta…, value`, one row per grid cell.
pub fn field_table(field: &CostDifferenceField) -> Table {
    let n = field.x_points[0].len();
    let p = field.theta_points[0].len();
    let mut header = indexed("x", n);
    header.extend(indexed("theta", p));
    header.push("value".into());
    let mut t = Table::new(header);
    for (i, x) in field.x_points.iter().enumerate() {
        for (j, th) in field.theta_points.iter().enumerate() {
            let mut row = x.clone();
            row.extend(th);
            row.push(field.dv[i][j]);
            t.push_f64(&row);
        }
    }
    t
}

fn field_contour(exp: &Experiment, field: &CostDifferenceField) -> String {
    let space = &exp.scenario.theta_space;
    let xs: Vec<f64> = field.x_points.iter().map(|x| x[0]).collect();
    let ys: Vec<f64> = field.theta_points.iter().map(|t| t[space.free[0]]).collect();
    contour_plot(
        &format!("{}: cost difference", exp.scenario.name),
        "x1",
        &format!("theta{}", space.free[0] + 1),
        &xs,
        &ys,
        &field.dv,
        &exp.levels,
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub scenario: String,
    pub solver: String,
    pub x_range: (f64, f64),
    pub theta_range: (f64, f64),
    pub x_points: usize,
    pub theta_points: usize,
    pub levels: Vec<f64>,
    pub feasible_cells: usize,
    pub cells: usize,
}

fn write_field(
    w: &mut ArtifactWriter,
    exp: &Experiment,
    field: &CostDifferenceField,
    stem: &str,
    tag: &str,
) -> Result<SweepSummary, CliError> {
    w.write(&format!("{stem}.csv"), &field_table(field).render(), tag, "cost difference on the (x, theta) grid")?;
    w.write(&format!("{stem}.svg"), &field_contour(exp, field), tag, "contours of the cost difference")?;
    Ok(SweepSummary {
        scenario: exp.scenario.name.to_string(),
        solver: exp.solver_name.clone(),
        x_range: exp.x_range,
        theta_range: exp.theta_range,
        x_points: exp.x_points,
        theta_points: exp.theta_points,
        levels: exp.levels.clone(),
        feasible_cells: field.feasible.iter().flatten().filter(|f| **f).count(),
        cells: field.x_points.len() * field.theta_points.len(),
    })
}

/// `field.csv`, `contour.svg` and `sweep.json`.
pub fn sweep(exp: &Experiment) -> Result<SweepSummary, CliError> {
    let field = compute_field(exp)?;
    let mut w = ArtifactWriter::new(&exp.out)?;
    let (tag, _) = figure_tags(exp.scenario.name);
    let summary = write_field(&mut w, exp, &field, "field", tag)?;
    w.write_json("sweep.json", &summary, "diagnostic", "sweep settings and feasibility count")?;
    w.finish()?;
    Ok(summary)
}

/// `θ` samples used for a certification at radius `d`.
pub fn certification_thetas(space: &ThetaSpace, d: f64) -> Vec<Vec<f64>> {
    let mut t = space.shell(d, 12);
    if d > 0.0 {
        t.extend(space.ball_grid(d, 5));
    }
    t
}

/// `τ` values tried by the scaling test, smallest first.
pub const TAU_GRID: [f64; 4] = [1e-3, 1e-2, 1e-1, 1.0];

/// Shells at `δ/4, δ/2, 3δ/4, δ` for the envelope fit.
pub fn envelope_shells(space: &ThetaSpace, delta: f64) -> Vec<(f64, Vec<Vec<f64>>)> {
    (1..=4).map(|i| delta * i as f64 / 4.0).map(|r| (r, space.shell(r, 12))).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub scenario: String,
    pub solver: String,
    pub seed: u64,
    pub rho: f64,
    pub delta: f64,
    pub rpi: RpiReport,
    pub report: CertificationReport,
    /// Bound on the Lyapunov perturbation used for the scaling test.
    pub gamma_v: String,
    pub sigma_v_at_delta: Option<Num>,
    /// Scaling test at every `τ` of the grid; `report.scaling` holds the
    /// first passing one, or the smallest `τ` if none passes.
    pub scaling_scan: Vec<ScalingReport>,
    /// Largest bisected radius that still certified strong stability.
    pub empirical_delta: f64,
    pub delta_max: f64,
    pub verdict: StabilityVerdict,
}

pub fn compute_certificate(exp: &Experiment) -> Result<Certificate, CliError> {
    let sc = &exp.scenario;
    let ctrl = controller(exp);
    let plant = sc.plant();
    let space = &sc.theta_space;
    let rpi = rpi_check(&ctrl, plant, &sc.lyapunov, space, &sc.state_box, exp.rho, exp.delta, exp.samples, exp.seed)?;
    let xs = sample_sublevel(&ctrl, &sc.lyapunov, &sc.state_box, exp.rho, exp.samples, exp.seed.wrapping_add(1))?;
    let certify = |d: f64| {
        let thetas = certification_thetas(space, d);
        let setup = CertificationSetup {
            rho: exp.rho,
            delta: d,
            x_samples: &xs,
            theta_samples: &thetas,
            alpha3: &sc.alpha3,
            quadratic_track: sc.quadratic_track,
            lyapunov: &sc.lyapunov,
        };
        descent_certification(&ctrl, plant, &setup)
    };
    let mut report = certify(exp.delta)?;
    if !rpi.passed {
        report.rpi_ok = false;
        report.verdict = StabilityVerdict::Unstable;
    }
    let fit: Option<GammaVFit> = if exp.delta > 0.0 {
        let shells = envelope_shells(space, exp.delta);
        Some(match &sc.lyapunov {
            Lyapunov::Candidate { v, .. } => lyapunov_increase_envelope(&ctrl, plant, v.as_ref(), &xs, &shells)?,
            Lyapunov::ValueFunction => fit_gamma_v(&ctrl, plant, &xs, &shells, sc.quadratic_track)?,
        })
    } else {
        None
    };
    let gamma = sc.gamma_v.clone().or_else(|| fit.as_ref().map(GammaVFit::to_joint));
    let scaling_scan: Vec<ScalingReport> = match &gamma {
        Some(g) => TAU_GRID
            .iter()
            .map(|tau| scaling_limit_estimate(g, &sc.alpha3, *tau, 1e-6, 1.0, 40))
            .collect::<Result<_, _>>()?,
        None => vec![],
    };
    let scaling = scaling_scan
        .iter()
        .find(|r| r.verdict == ScalingVerdict::Passes)
        .or(scaling_scan.first())
        .cloned();
    let sigma = fit.as_ref().filter(|f| f.quadratic).map(|f| Num(f.sigma_at(exp.delta)));
    report.lyap_increase_fit = fit;
    report.scaling = scaling;
    let empirical_delta = bisect_delta(exp.delta_max, exp.bisect_iterations, certify)?;
    Ok(Certificate {
        scenario: sc.name.to_string(),
        solver: exp.solver_name.clone(),
        seed: exp.seed,
        rho: exp.rho,
        delta: exp.delta,
        rpi,
        verdict: report.verdict,
        report,
        gamma_v: gamma.map_or_else(|| "none".into(), |g| g.label().to_string()),
        sigma_v_at_delta: sigma,
        scaling_scan,
        empirical_delta,
        delta_max: exp.delta_max,
    })
}

/// Writes `certificate.json`; an `unstable` verdict becomes exit code 4.
pub fn certify(exp: &Experiment) -> Result<Certificate, CliError> {
    let cert = compute_certificate(exp)?;
    let mut w = ArtifactWriter::new(&exp.out)?;
    w.write_json("certificate.json", &cert, "diagnostic", "stability certificate on the sampled level set")?;
    w.finish()?;
    if cert.verdict == StabilityVerdict::Unstable {
        return Err(CliError::Unstable(format!(
            "{} at rho = {}, delta = {}",
            cert.scenario, cert.rho, cert.delta
        )));
    }
    Ok(cert)
}

#[derive(Debug, Clone, Serialize)]
struct PendulumEcho {
    p_f: Vec<Vec<f64>>,
    a: f64,
    b: f64,
    x_star: f64,
    x_lower: f64,
    bracket_root: f64,
    c_f: f64,
    closed_loop_eigenvalues: Vec<f64>,
}

/// The scenario's full figure set under `out`, with a manifest.
pub fn reproduce(
    registry: &ScenarioRegistry,
    name: &str,
    out: &Path,
    seed: u64,
) -> Result<Vec<ManifestEntry>, CliError> {
    let cfg = ExperimentConfig {
        scenario: Some(name.to_string()),
        out: Some(out.to_path_buf()),
        seed: Some(seed),
        ..Default::default()
    };
    let exp = cfg.resolve(registry)?;
    let mut w = ArtifactWriter::new(out)?;
    let (contour_tag, traj_tag) = figure_tags(name);
    match name {
        "pendulum" => {
            let c = pendulum_terminal_constants()?;
            let eig = eigenvalues_2x2(&pendulum_linear_feedback().closed_loop());
            let mut eigenvalues: Vec<f64> = eig.iter().map(|z| z.re).collect();
            eigenvalues.sort_by(f64::total_cmp);
            let echo = PendulumEcho {
                p_f: c.p_f.to_rows(),
                a: c.a,
                b: c.b,
                x_star: c.x_star,
                x_lower: c.x_lower,
                bracket_root: c.bracket_root,
                c_f: c.c_f,
                closed_loop_eigenvalues: eigenvalues,
            };
            w.write_json("pendulum_constants.json", &echo, "diagnostic", "terminal ingredients of the pendulum design")?;
            let runs = simulate_runs(&exp)?;
            let panels = ["fig5a", "fig5a", "fig5b", "fig5c"];
            for (i, r) in runs.iter().enumerate() {
                let panel = panels.get(i).copied().unwrap_or(traj_tag);
                let file = format!("{panel}_run{i}.csv");
                w.write(&file, &run_table(&[(i, &r.run)], false).render(), panel, &r.label)?;
            }
            for j in 0..2 {
                let svg = trajectory_chart(&format!("pendulum: x{} from the resting position", j + 1), &runs, j);
                w.write(&format!("fig5_x{}.svg", j + 1), &svg, traj_tag, "trajectories for every panel")?;
            }
            let summaries: Vec<RunSummary> =
                runs.iter().enumerate().map(|(i, r)| summarize(format!("run{i}"), r, exp.converge_tol)).collect();
            w.write_json("fig5_summary.json", &summaries, "diagnostic", "convergence of each trajectory")?;
        }
        _ => {
            let field = compute_field(&exp)?;
            let stem = if contour_tag.starts_with("fig") { format!("{contour_tag}_contour") } else { contour_tag.replace('-', "_") };
            write_field(&mut w, &exp, &field, &stem, contour_tag)?;
            let runs = simulate_runs(&exp)?;
            let refs: Vec<(usize, &ClosedLoopRun)> = runs.iter().enumerate().map(|(i, r)| (i, &r.run)).collect();
            let stem = if traj_tag.starts_with("fig") { format!("{traj_tag}_trajectories") } else { traj_tag.replace('-', "_") };
            w.write(&format!("{stem}.csv"), &run_table(&refs, true).render(), traj_tag, "closed-loop trajectories, one run per value of theta")?;
            let svg = trajectory_chart(&format!("{name}: closed-loop trajectories"), &runs, 0);
            w.write(&format!("{stem}.svg"), &svg, traj_tag, "closed-loop trajectories")?;
            let summaries: Vec<RunSummary> =
                runs.iter().enumerate().map(|(i, r)| summarize(format!("run{i}"), r, exp.converge_tol)).collect();
            w.write_json(&format!("{stem}_summary.json"), &summaries, "diagnostic", "convergence of each trajectory")?;
        }
    }
    w.finish()
}
