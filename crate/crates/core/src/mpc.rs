//! Receding-horizon loop: measure, solve, apply the first `δ` of the optimal
//! input, shift, repeat. Plus a checker for the closed-loop guarantees.

use std::sync::Arc;

use crate::errchain::norm;
use crate::error::{invalid, Error, Result};
use crate::funnel::{FunnelChain, FunnelFunction};
use crate::ocp::{solve_ocp, OcpSolution, OcpSpec, OcpStatus, StageCost};
use crate::sim::{
    integrate_open_loop, sampled_feedback_rollout, step_count, ControlSignal, FeedbackLaw,
    Reference, Trajectory,
};
use crate::systems::Plant;

/// Slack allowed on the saturation when checking applied inputs.
pub const SATURATION_SLACK: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub t0: f64,
    pub t_end: f64,
    /// Time shift between successive problems.
    pub delta: f64,
    pub spec: OcpSpec,
    pub chain: FunnelChain,
    pub stage: StageCost,
}

impl MpcConfig {
    pub fn new(
        t0: f64,
        t_end: f64,
        delta: f64,
        spec: OcpSpec,
        chain: FunnelChain,
        stage: StageCost,
    ) -> Result<Self> {
        spec.validate()?;
        if !(delta > 0.0) || delta > spec.horizon * (1.0 + 1e-12) {
            return Err(invalid(format!(
                "need 0 < delta <= T, got delta = {delta}, T = {}",
                spec.horizon
            )));
        }
        step_count(delta, spec.control_step)
            .map_err(|_| invalid("delta must be a multiple of the control step"))?;
        step_count(t_end - t0, delta)
            .map_err(|_| invalid("delta must divide the simulation interval"))?;
        if stage.relative_degree() != chain.r() {
            return Err(invalid(
                "stage cost and funnel chain differ in relative degree",
            ));
        }
        Ok(Self {
            t0,
            t_end,
            delta,
            spec,
            chain,
            stage,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.spec.horizon
    }

    pub fn steps(&self) -> usize {
        ((self.t_end - self.t0) / self.delta).round() as usize
    }

    fn intervals_per_shift(&self) -> usize {
        (self.delta / self.spec.control_step).round() as usize
    }
}

/// One row of the closed-loop log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSample {
    pub t: f64,
    pub y: Vec<f64>,
    pub y_ref: Vec<f64>,
    pub e: Vec<f64>,
    pub psi: f64,
    pub e_r: Vec<f64>,
    pub theta: f64,
    pub u: Vec<f64>,
}

/// Outcome of the problem solved at `t_hat`.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpRecord {
    pub t_hat: f64,
    pub cost: f64,
    pub start_cost: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: OcpStatus,
    /// Cost of the shifted warm start; `None` when none was built.
    pub warm_start_cost: Option<f64>,
}

impl OcpRecord {
    fn from_solution(t_hat: f64, sol: &OcpSolution, warm: bool) -> Self {
        let warm_start_cost = warm.then(|| match sol.status {
            OcpStatus::InfeasibleStartRecovered => f64::INFINITY,
            _ => sol.start_cost,
        });
        Self {
            warm_start_cost,
            t_hat,
            cost: sol.cost,
            start_cost: sol.start_cost,
            iterations: sol.iterations,
            evaluations: sol.evaluations,
            status: sol.status,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClosedLoopLog {
    pub trajectory: Trajectory,
    pub samples: Vec<LogSample>,
    pub steps: Vec<OcpRecord>,
    /// Concatenation of the applied heads of the optimal inputs.
    pub applied: ControlSignal,
}

/// Per-grid-point log rows for a trajectory.
pub fn log_samples(
    traj: &Trajectory,
    reference: &dyn Reference,
    chain: &FunnelChain,
    stage: &StageCost,
) -> Vec<LogSample> {
    let (m, r) = (traj.m, traj.r);
    let mut yref = vec![0.0; r * m];
    let mut err = vec![0.0; r * m];
    let mut e_r = vec![0.0; m];
    (0..traj.len())
        .map(|k| {
            let t = traj.grid[k];
            let jet = traj.jet(k);
            reference.jet(t, r - 1, &mut yref);
            for i in 0..r * m {
                err[i] = jet[i] - yref[i];
            }
            stage.top_error(&err, &mut e_r);
            LogSample {
                t,
                y: jet[..m].to_vec(),
                y_ref: yref[..m].to_vec(),
                e: err[..m].to_vec(),
                psi: chain.member(1).value(t),
                e_r: e_r.clone(),
                theta: chain.theta().value(t),
                u: traj.input(k).to_vec(),
            }
        })
        .collect()
}

fn append(into: &mut Trajectory, seg: Trajectory) {
    // the segment's first point repeats the previous segment's last
    let skip = usize::from(!into.is_empty());
    into.grid.extend_from_slice(&seg.grid[skip..]);
    into.states
        .extend_from_slice(&seg.states[skip * seg.state_dim..]);
    let w = seg.r * seg.m;
    into.output_jet
        .extend_from_slice(&seg.output_jet[skip * w..]);
    if skip == 1 {
        // the joint is driven by the new segment's input
        let n = into.input.len();
        into.input[n - seg.m..].copy_from_slice(seg.input(0));
    }
    into.input.extend_from_slice(&seg.input[skip * seg.m..]);
    into.status = seg.status;
}

/// Shift the previous optimum by `n_shift` intervals and extend it by the
/// sampled feedback started from the predicted end state.
fn shifted_warm_start<P: Plant>(
    plant: &P,
    previous: &ControlSignal,
    n_shift: usize,
    config: &MpcConfig,
    law: &FeedbackLaw,
) -> Option<ControlSignal> {
    let spec = &config.spec;
    let m = previous.m();
    let mut run = plant.clone();
    let mut t_mid = plant.time();
    let mut predicted = true;
    if n_shift < previous.len() {
        let kept = previous.shifted(n_shift, &[]).ok()?;
        t_mid = kept.t_end();
        predicted = integrate_open_loop(&mut run, &kept, t_mid, spec.integrator_step)
            .is_ok_and(|t| t.completed());
    }
    let tail = predicted
        .then(|| {
            sampled_feedback_rollout(
                &mut run,
                law,
                t_mid + n_shift as f64 * spec.control_step,
                spec.integrator_step,
                spec.control_step,
                spec.saturation,
            )
            .ok()
        })
        .flatten()
        .filter(|(t, s)| t.completed() && s.len() >= n_shift)
        .map(|(_, s)| s.values()[..n_shift * m].to_vec())
        // fall back to holding the last value
        .unwrap_or_else(|| {
            let last = previous.value(previous.len() - 1);
            last.iter().copied().cycle().take(n_shift * m).collect()
        });
    previous.shifted(n_shift, &tail).ok()
}

/// Run the receding-horizon loop from the plant's current state.
///
/// Aborts with [`Error::RecursiveFeasibilityViolation`] when some problem
/// admits no finite-cost input.
pub fn run_fmpc<P: Plant>(
    plant: &mut P,
    reference: Arc<dyn Reference>,
    config: &MpcConfig,
) -> Result<ClosedLoopLog> {
    if (plant.time() - config.t0).abs() > 1e-12 * config.t0.abs().max(1.0) {
        return Err(invalid(format!(
            "plant starts at {} but the loop at {}",
            plant.time(),
            config.t0
        )));
    }
    let spec = &config.spec;
    let law = FeedbackLaw::new(
        config.chain.clone(),
        config.stage.gains(),
        reference.clone(),
    )?;
    let n_shift = config.intervals_per_shift();
    let m = plant.output_dim();
    let mut traj = Trajectory {
        m,
        r: plant.relative_degree(),
        state_dim: plant.state().len(),
        grid: Vec::new(),
        states: Vec::new(),
        output_jet: Vec::new(),
        input: Vec::new(),
        status: crate::sim::RunStatus::Completed,
    };
    let mut steps = Vec::with_capacity(config.steps());
    let mut applied: Vec<ControlSignal> = Vec::with_capacity(config.steps());
    let mut previous: Option<ControlSignal> = None;

    for step in 0..config.steps() {
        let t_hat = config.t0 + step as f64 * config.delta;
        let warm = previous
            .as_ref()
            .and_then(|p| shifted_warm_start(plant, p, n_shift, config, &law));
        let solution = match solve_ocp(
            plant,
            &config.stage,
            spec,
            reference.as_ref(),
            warm.as_ref(),
            Some(&law),
        ) {
            Ok(s) => s,
            Err(Error::Infeasible { reason, .. }) => {
                return Err(feasibility_violation(
                    plant,
                    reference.as_ref(),
                    config,
                    t_hat,
                    reason,
                ));
            }
            Err(e) => return Err(e),
        };
        steps.push(OcpRecord::from_solution(t_hat, &solution, warm.is_some()));
        let head = solution.control.head(n_shift)?;
        let seg = integrate_open_loop(plant, &head, t_hat + config.delta, spec.integrator_step)?;
        let completed = seg.completed();
        append(&mut traj, seg);
        if !completed {
            return Err(Error::PreconditionViolation(format!(
                "closed loop ended early after t_hat = {t_hat}: {:?}",
                traj.status
            )));
        }
        applied.push(head);
        previous = Some(solution.control);
    }
    let samples = log_samples(&traj, reference.as_ref(), &config.chain, &config.stage);
    Ok(ClosedLoopLog {
        trajectory: traj,
        samples,
        steps,
        applied: ControlSignal::concat(&applied)?,
    })
}

fn feasibility_violation<P: Plant>(
    plant: &P,
    reference: &dyn Reference,
    config: &MpcConfig,
    t_hat: f64,
    reason: String,
) -> Error {
    let (m, r) = (plant.output_dim(), plant.relative_degree());
    let mut jet = vec![0.0; r * m];
    plant.output_jet(plant.state(), &mut jet);
    let mut yref = vec![0.0; r * m];
    reference.jet(t_hat, r - 1, &mut yref);
    for i in 0..r * m {
        jet[i] -= yref[i];
    }
    let mut e_r = vec![0.0; m];
    config.stage.top_error(&jet, &mut e_r);
    Error::RecursiveFeasibilityViolation {
        t_hat,
        reason,
        margin: config.chain.theta().value(t_hat) - norm(&e_r),
        funnel_margin: config.chain.member(1).value(t_hat) - norm(&jet[..m]),
    }
}

/// Funnel margin and input peak of a closed-loop log.
#[derive(Debug, Clone, PartialEq)]
pub struct GuaranteeReport {
    pub pass: bool,
    /// `min_t (ψ(t) - ‖e(t)‖)`.
    pub min_margin: f64,
    pub min_margin_time: f64,
    pub max_input: f64,
    pub max_input_time: f64,
    /// First time at which either guarantee fails.
    pub violation_time: Option<f64>,
    pub cost_trace: Vec<f64>,
}

/// Check `‖e(t)‖ < ψ(t)` and `‖u(t)‖ ≤ M` on every log row.
pub fn verify_samples(
    samples: &[LogSample],
    psi: &FunnelFunction,
    saturation: f64,
    cost_trace: Vec<f64>,
) -> GuaranteeReport {
    let mut report = GuaranteeReport {
        pass: !samples.is_empty(),
        min_margin: f64::INFINITY,
        min_margin_time: f64::NAN,
        max_input: 0.0,
        max_input_time: f64::NAN,
        violation_time: None,
        cost_trace,
    };
    for s in samples {
        let margin = psi.value(s.t) - norm(&s.e);
        if !(margin >= report.min_margin) {
            report.min_margin = margin;
            report.min_margin_time = s.t;
        }
        let u = norm(&s.u);
        if u > report.max_input || report.max_input_time.is_nan() {
            report.max_input = u;
            report.max_input_time = s.t;
        }
        let bad = !(margin > 0.0) || !(u <= saturation + SATURATION_SLACK);
        if bad && report.violation_time.is_none() {
            report.violation_time = Some(s.t);
            report.pass = false;
        }
    }
    report
}

pub fn verify_guarantees(
    log: &ClosedLoopLog,
    psi: &FunnelFunction,
    saturation: f64,
) -> GuaranteeReport {
    verify_samples(
        &log.samples,
        psi,
        saturation,
        log.steps.iter().map(|s| s.cost).collect(),
    )
}
