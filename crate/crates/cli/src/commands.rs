//! Resolution of a configuration into a tracking problem, and the four
//! subcommands.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use fmpc_core::{
    class_g_check, estimate_dynamics_bounds, feedback_rollout, funnel_membership,
    mass_on_car_normal_form, mass_on_car_state_space, mpc, run_fmpc, saturation_bound,
    uniform_grid, verify_samples, ClosedLoopLog, GuaranteeReport, JetVector, MassOnCarParams,
    NormalFormPlant, OcpSpec, OcpStatus, Plant, Reference, RelativeDegreeSystem, StateSpacePlant,
    TrackingSetup,
};
use log::{info, warn};
use serde::Serialize;

use crate::config::{config_error, PlantConfig, Representation, RunConfig};
use crate::output::{read_log, render_svg, write_log, write_steps, LogKind};

/// Grid spacing for the class-G certificates printed by `gains`.
const CERTIFICATE_GRID: f64 = 1e-3;

#[derive(Clone)]
pub enum AnyPlant {
    NormalForm(NormalFormPlant),
    StateSpace(StateSpacePlant),
}

macro_rules! with_plant {
    ($plant:expr, $p:ident => $body:expr) => {
        match $plant {
            AnyPlant::NormalForm($p) => $body,
            AnyPlant::StateSpace($p) => $body,
        }
    };
}

pub fn build_plant(cfg: &PlantConfig, t0: f64) -> anyhow::Result<AnyPlant> {
    let plant = match cfg {
        PlantConfig::MassOnCar {
            m1,
            m2,
            spring,
            damping,
            ramp_angle,
            initial_state,
            representation,
        } => {
            let p = MassOnCarParams {
                m1: *m1,
                m2: *m2,
                k: *spring,
                d: *damping,
                vartheta: *ramp_angle,
            };
            match representation {
                Representation::NormalForm => {
                    AnyPlant::NormalForm(mass_on_car_normal_form(p, t0, initial_state)?)
                }
                Representation::StateSpace => {
                    AnyPlant::StateSpace(mass_on_car_state_space(p, t0, initial_state.to_vec())?)
                }
            }
        }
        PlantConfig::IntegratorChain {
            relative_degree,
            outputs,
            initial_jet,
        } => AnyPlant::NormalForm(NormalFormPlant::new(
            RelativeDegreeSystem::integrator_chain(*outputs, *relative_degree)?,
            t0,
            initial_jet,
            None,
        )?),
        PlantConfig::DelayOscillator { tau, initial_jet } => {
            AnyPlant::NormalForm(fmpc_core::delay_oscillator(*tau, t0, initial_jet, None)?)
        }
    };
    Ok(plant)
}

/// A configuration with every derivable quantity filled in.
pub struct Resolved {
    pub config: RunConfig,
    pub plant: AnyPlant,
    pub setup: TrackingSetup,
    pub f_max: f64,
    pub g_max: f64,
    /// Input bound under which the feedback is guaranteed to stay feasible.
    pub derived_saturation: f64,
    pub saturation: f64,
}

impl Resolved {
    pub fn resolved_json(&self) -> String {
        self.config.to_json()
    }

    pub fn ocp_spec(&self) -> anyhow::Result<OcpSpec> {
        let c = &self.config;
        let mut spec = OcpSpec::new(
            c.horizon,
            c.control_step,
            self.saturation,
            c.integrator_step,
        )
        .map_err(|e| config_error(format!("solver settings: {e}")))?;
        spec.max_iterations = c.solver.max_iterations;
        spec.max_evaluations = c.solver.max_evaluations;
        spec.tolerance = c.solver.tolerance;
        spec.validate()
            .map_err(|e| config_error(format!("solver settings: {e}")))?;
        Ok(spec)
    }
}

/// Derive `γ`, the gains, the funnel chain and `M`. Failures of the
/// problem data (initial error outside the funnel, bad certificates, …)
/// are configuration errors.
pub fn resolve(config: &RunConfig) -> anyhow::Result<Resolved> {
    let [t0, t_end] = config.t_span;
    if !(t0.is_finite() && t_end > t0) {
        return Err(config_error(format!(
            "t_span = {:?} must be increasing",
            config.t_span
        )));
    }
    if !(config.integrator_step > 0.0) || !(config.horizon > 0.0) {
        return Err(config_error("integrator_step and horizon must be positive"));
    }
    let plant = build_plant(&config.plant, t0).map_err(|e| config_error(format!("plant: {e}")))?;
    let reference = config.reference()?;
    let (m, r, jet) =
        with_plant!(&plant, p => (p.output_dim(), p.relative_degree(), p.current_jet()));
    if reference.dim() != m {
        return Err(config_error(format!(
            "reference has {} channels but the plant has {m} outputs",
            reference.dim()
        )));
    }
    if config.gains.len() > r - 1 {
        return Err(config_error(format!(
            "{} gains given for relative degree {r}",
            config.gains.len()
        )));
    }
    let psi = config
        .funnel
        .build(t0)
        .map_err(|e| config_error(format!("funnel: {e}")))?;
    let y0 = JetVector::new(r, m, jet).map_err(|e| config_error(format!("initial jet: {e}")))?;
    let reference: Arc<dyn Reference> = Arc::new(reference);
    let setup = TrackingSetup::new(
        psi,
        y0,
        reference,
        config.gamma,
        &config.gains,
        config.gain_grid,
        config.lambda_u,
        t_end - t0 + config.horizon,
    )
    .map_err(|e| config_error(format!("initial data: {e}")))?;
    for (i, (req, got)) in config.gains.iter().zip(setup.gains()).enumerate() {
        if let Some(k) = req {
            if k != got {
                warn!(
                    "k_{} = {k} is below its lower bound {}; using {got}",
                    i + 1,
                    setup.selection.bounds[i]
                );
            }
        }
    }
    let law = setup.feedback_law()?;
    let (f_max, g_max) = with_plant!(&plant, p => estimate_dynamics_bounds(
        p,
        &law,
        t_end + config.horizon,
        config.integrator_step,
    ))
    .context("feedback run for the dynamics bounds")?;
    let derived_saturation = saturation_bound(
        f_max,
        g_max,
        setup.gains(),
        &setup.chain,
        setup.reference.derivative_sup(r),
    )?;
    let saturation = config.saturation.unwrap_or(derived_saturation);
    if !(saturation > 0.0 && saturation.is_finite()) {
        return Err(config_error(format!(
            "saturation = {saturation} must be positive and finite"
        )));
    }
    if saturation < derived_saturation {
        warn!("M = {saturation} is below the feedback bound {derived_saturation:.6e}; feasibility of every OCP is not certified");
    }
    let mut resolved = config.clone();
    resolved.gamma = Some(setup.gamma);
    resolved.gains = setup.gains().iter().map(|k| Some(*k)).collect();
    resolved.saturation = Some(saturation);
    Ok(Resolved {
        config: resolved,
        plant,
        setup,
        f_max,
        g_max,
        derived_saturation,
        saturation,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub command: &'static str,
    pub pass: bool,
    pub rows: usize,
    pub min_margin: f64,
    pub min_margin_time: f64,
    pub max_input: f64,
    pub max_input_time: f64,
    pub input_bound: f64,
    pub violation_time: Option<f64>,
    /// Simulate only: problems solved and how their descents ended.
    pub ocp_count: usize,
    pub budget_exhausted: usize,
    pub warm_start_recovered: usize,
    /// Baseline only: range of `‖e_r(t)‖/θ(t)` along the run.
    pub ratio_range: Option<(f64, f64)>,
    /// Baseline only: every error variable stayed in its funnel.
    pub cascade_inside: Option<bool>,
    pub seconds: f64,
}

impl RunSummary {
    fn from_report(
        command: &'static str,
        report: &GuaranteeReport,
        rows: usize,
        input_bound: f64,
    ) -> Self {
        Self {
            command,
            pass: report.pass,
            rows,
            min_margin: report.min_margin,
            min_margin_time: report.min_margin_time,
            max_input: report.max_input,
            max_input_time: report.max_input_time,
            input_bound,
            violation_time: report.violation_time,
            ocp_count: 0,
            budget_exhausted: 0,
            warm_start_recovered: 0,
            ratio_range: None,
            cascade_inside: None,
            seconds: 0.0,
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{}: {}\n  rows              {}\n  min margin        {:.6e} at t = {:.4}\n  max |u|           {:.6e} at t = {:.4} (bound {:.6e})\n",
            self.command,
            if self.pass { "PASS" } else { "FAIL" },
            self.rows,
            self.min_margin,
            self.min_margin_time,
            self.max_input,
            self.max_input_time,
            self.input_bound,
        );
        if let Some(t) = self.violation_time {
            s.push_str(&format!("  first violation   t = {t:.4}\n"));
        }
        if self.command == "simulate" {
            s.push_str(&format!(
                "  OCPs solved       {} ({} budget exhausted, {} warm starts replaced)\n",
                self.ocp_count, self.budget_exhausted, self.warm_start_recovered
            ));
        }
        if let Some((lo, hi)) = self.ratio_range {
            s.push_str(&format!(
                "  |e_r|/theta       [{lo:.12}, {hi:.12}] (spread {:.3e})\n",
                hi - lo
            ));
        }
        if let Some(inside) = self.cascade_inside {
            s.push_str(&format!("  all e_i in funnel {inside}\n"));
        }
        s.push_str(&format!("  runtime           {:.2} s\n", self.seconds));
        s
    }
}

fn write_artifacts(
    out: &Path,
    stem: &str,
    kind: LogKind,
    res: &Resolved,
    samples: &[fmpc_core::LogSample],
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_log(
        &out.join(format!("{stem}.csv")),
        kind,
        &res.resolved_json(),
        samples,
    )?;
    std::fs::write(out.join(format!("{stem}.svg")), render_svg(samples))?;
    Ok(())
}

pub fn simulate(res: &Resolved, out: &Path) -> anyhow::Result<(RunSummary, ClosedLoopLog)> {
    let start = Instant::now();
    let c = &res.config;
    let config = res.setup.mpc_config(c.t_end(), c.delta, res.ocp_spec()?)?;
    let mut plant = res.plant.clone();
    let log = with_plant!(&mut plant, p => run_fmpc(p, res.setup.reference.clone(), &config))?;
    let report = fmpc_core::verify_guarantees(&log, &res.setup.psi, res.saturation);
    write_artifacts(out, "trajectory", LogKind::Simulate, res, &log.samples)?;
    write_steps(&out.join("ocp_steps.csv"), &log.steps)?;
    let mut summary =
        RunSummary::from_report("simulate", &report, log.samples.len(), res.saturation);
    summary.ocp_count = log.steps.len();
    summary.budget_exhausted = log
        .steps
        .iter()
        .filter(|s| s.status == OcpStatus::BudgetExhausted)
        .count();
    summary.warm_start_recovered = log
        .steps
        .iter()
        .filter(|s| s.status == OcpStatus::InfeasibleStartRecovered)
        .count();
    summary.seconds = start.elapsed().as_secs_f64();
    info!("simulate finished in {:.2} s", summary.seconds);
    Ok((summary, log))
}

pub fn baseline(res: &Resolved, out: &Path) -> anyhow::Result<RunSummary> {
    let start = Instant::now();
    let c = &res.config;
    let law = res.setup.feedback_law()?;
    let mut plant = res.plant.clone();
    let (traj, _) = with_plant!(&mut plant, p => feedback_rollout(
        p,
        &law,
        c.t_end(),
        c.integrator_step,
        c.control_step,
        f64::INFINITY,
    ))?;
    let stage = res.setup.stage_cost()?;
    let samples = mpc::log_samples(
        &traj,
        res.setup.reference.as_ref(),
        &res.setup.chain,
        &stage,
    );
    let mut yref = vec![0.0; traj.r * traj.m];
    let mut inside = traj.completed();
    for k in 0..traj.len() {
        let t = traj.grid[k];
        res.setup.reference.jet(t, traj.r - 1, &mut yref);
        let xi: Vec<f64> = traj.jet(k).iter().zip(&yref).map(|(a, b)| a - b).collect();
        inside &= funnel_membership(
            t,
            &JetVector::new(traj.r, traj.m, xi)?,
            &res.setup.chain,
            res.setup.gains(),
        )?;
    }
    let ratios = samples.iter().map(|s| norm(&s.e_r) / s.theta);
    let range = ratios.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let report = verify_samples(&samples, &res.setup.psi, res.derived_saturation, vec![]);
    write_artifacts(out, "baseline", LogKind::Baseline, res, &samples)?;
    let mut summary =
        RunSummary::from_report("baseline", &report, samples.len(), res.derived_saturation);
    summary.pass = inside && report.min_margin > 0.0;
    summary.ratio_range = Some(range);
    summary.cascade_inside = Some(inside);
    summary.seconds = start.elapsed().as_secs_f64();
    Ok(summary)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Re-check a persisted log against the configuration it claims to come
/// from. Baseline logs are held to the feedback bound, simulate logs to `M`.
pub fn verify(res: &Resolved, log_path: &Path) -> anyhow::Result<RunSummary> {
    let start = Instant::now();
    let m = res.config.plant.output_dim();
    let log = read_log(log_path, m)?;
    let expected = res.config.grid_len();
    if log.samples.len() != expected {
        return Err(config_error(format!(
            "{}: {} rows, expected {expected} for t_span {:?} at step {}",
            log_path.display(),
            log.samples.len(),
            res.config.t_span,
            res.config.integrator_step
        )));
    }
    let (bound, command) = match log.kind {
        LogKind::Simulate => (res.saturation, "verify (simulate log)"),
        LogKind::Baseline => (res.derived_saturation, "verify (baseline log)"),
    };
    let report = verify_samples(&log.samples, &res.setup.psi, bound, vec![]);
    let mut summary = RunSummary::from_report(command, &report, log.samples.len(), bound);
    summary.seconds = start.elapsed().as_secs_f64();
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct MemberReport {
    pub index: usize,
    pub expression: String,
    pub sup: f64,
    pub class_g: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GainsReport {
    pub gamma_min: f64,
    pub gamma: f64,
    pub gain_bounds: Vec<f64>,
    pub gains: Vec<f64>,
    pub theta: String,
    pub members: Vec<MemberReport>,
    /// Rows `[t, ψ_1(t), …, ψ_r(t)]`.
    pub table: Vec<Vec<f64>>,
    pub f_max: f64,
    pub g_max: f64,
    pub derived_saturation: f64,
    pub saturation: f64,
}

pub fn gains(res: &Resolved) -> anyhow::Result<GainsReport> {
    let setup = &res.setup;
    let [t0, t_end] = res.config.t_span;
    let grid = uniform_grid(t0, t_end, CERTIFICATE_GRID)?;
    let members = setup
        .chain
        .members()
        .iter()
        .enumerate()
        .map(|(i, f)| {
            Ok(MemberReport {
                index: i + 1,
                expression: f.describe(),
                sup: setup.chain.sup(i + 1).value,
                class_g: class_g_check(f, &grid, 1e-9)?.pass,
            })
        })
        .collect::<fmpc_core::Result<Vec<_>>>()?;
    let steps = (t_end - t0).ceil() as usize;
    let table = (0..=steps)
        .map(|k| {
            let t = (t0 + k as f64).min(t_end);
            std::iter::once(t)
                .chain(setup.chain.members().iter().map(|f| f.value(t)))
                .collect()
        })
        .collect();
    Ok(GainsReport {
        gamma_min: setup.gamma_min,
        gamma: setup.gamma,
        gain_bounds: setup.selection.bounds.clone(),
        gains: setup.gains().to_vec(),
        theta: setup.chain.theta().describe(),
        members,
        table,
        f_max: res.f_max,
        g_max: res.g_max,
        derived_saturation: res.derived_saturation,
        saturation: res.saturation,
    })
}

impl GainsReport {
    pub fn render(&self) -> String {
        let mut s = format!(
            "gamma_min         {:.12}\ngamma             {}\n",
            self.gamma_min, self.gamma
        );
        for (i, (b, k)) in self.gain_bounds.iter().zip(&self.gains).enumerate() {
            s.push_str(&format!(
                "k_{}               {k} (lower bound {b:.12})\n",
                i + 1
            ));
        }
        s.push_str(&format!("theta(t)          {}\n", self.theta));
        for m in &self.members {
            s.push_str(&format!(
                "psi_{}(t)          {}   sup {:.6}   class G {}\n",
                m.index,
                m.expression,
                m.sup,
                if m.class_g {
                    "certified"
                } else {
                    "NOT certified"
                }
            ));
        }
        s.push_str("t");
        for m in &self.members {
            s.push_str(&format!("\tpsi_{}", m.index));
        }
        s.push('\n');
        for row in &self.table {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&cells.join("\t"));
            s.push('\n');
        }
        s.push_str(&format!(
            "f_max {:.6e}   g_max {:.6e}\nM                 {} (feedback bound {:.6e})\n",
            self.f_max, self.g_max, self.saturation, self.derived_saturation
        ));
        s
    }
}
