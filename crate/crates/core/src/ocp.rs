//! The funnel stage cost, its integral over a prediction horizon, and a
//! projected-gradient direct-shooting solver with a brute-force oracle.

use std::fmt;

use smallvec::SmallVec;

use crate::errchain::{norm, polynomial_coefficients, GainVector, JetVector};
use crate::error::{invalid, Error, Result};
use crate::funnel::FunnelFunction;
use crate::sim::{
    project_to_ball, sampled_feedback_rollout, step_count, ControlSignal, FeedbackLaw, Reference,
    Stage, Stepper,
};
use crate::systems::{Buf, Plant, BLOW_UP_THRESHOLD};

/// `ℓ(t, ξ, u) = ‖e_r‖² / (θ(t)² - ‖e_r‖²) + λ_u ‖u‖²`, infinite once
/// `‖e_r‖ ≥ θ(t)`.
#[derive(Debug, Clone)]
pub struct StageCost {
    theta: FunnelFunction,
    lambda_u: f64,
    gains: GainVector,
    /// `e_r(ξ) = Σ_i c_i ξ_{i+1}`.
    coefficients: Vec<f64>,
}

impl StageCost {
    pub fn new(theta: FunnelFunction, lambda_u: f64, gains: GainVector) -> Result<Self> {
        if !(lambda_u >= 0.0 && lambda_u.is_finite()) {
            return Err(invalid(format!(
                "input weight {lambda_u} must be nonnegative"
            )));
        }
        let coefficients = polynomial_coefficients(&gains, gains.len())?;
        Ok(Self {
            theta,
            lambda_u,
            gains,
            coefficients,
        })
    }

    pub fn theta(&self) -> &FunnelFunction {
        &self.theta
    }

    pub fn lambda_u(&self) -> f64 {
        self.lambda_u
    }

    pub fn gains(&self) -> &GainVector {
        &self.gains
    }

    pub fn relative_degree(&self) -> usize {
        self.coefficients.len()
    }

    /// `e_r` of a flat error jet.
    pub fn top_error(&self, xi: &[f64], out: &mut [f64]) {
        let m = out.len();
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, c) in self.coefficients.iter().enumerate() {
            for j in 0..m {
                out[j] += c * xi[i * m + j];
            }
        }
    }

    /// Barrier part `‖e_r‖² / (θ(t)² - ‖e_r‖²)`.
    pub fn barrier(&self, t: f64, xi: &[f64], m: usize) -> f64 {
        let mut e: Buf = SmallVec::from_elem(0.0, m);
        self.top_error(xi, &mut e);
        let e2: f64 = e.iter().map(|v| v * v).sum();
        let theta = self.theta.value(t);
        if e2.sqrt() >= theta {
            f64::INFINITY
        } else {
            e2 / (theta * theta - e2)
        }
    }

    pub fn input_penalty(&self, u: &[f64]) -> f64 {
        self.lambda_u * u.iter().map(|v| v * v).sum::<f64>()
    }
}

/// `ℓ(t, ξ, u)` for an error jet `ξ`.
pub fn stage_cost(t: f64, xi: &JetVector, u: &[f64], sc: &StageCost) -> Result<f64> {
    if xi.r() != sc.relative_degree() || u.len() != xi.m() {
        return Err(invalid(
            "jet or input dimension does not match the stage cost",
        ));
    }
    Ok(sc.barrier(t, xi.as_slice(), xi.m()) + sc.input_penalty(u))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quadrature {
    /// Composite trapezoid on the integrator grid.
    Trapezoid,
}

/// Horizon, discretization and solver budget of one optimal control problem.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpSpec {
    pub horizon: f64,
    pub control_step: f64,
    pub saturation: f64,
    pub integrator_step: f64,
    pub quadrature: Quadrature,
    pub max_iterations: usize,
    pub max_evaluations: usize,
    /// Stop once the projected-gradient step `‖P(x - ∇J) - x‖∞` falls below.
    pub tolerance: f64,
    /// Relative finite-difference step.
    pub fd_step: f64,
    pub armijo: f64,
    pub max_halvings: usize,
}

impl OcpSpec {
    pub fn new(
        horizon: f64,
        control_step: f64,
        saturation: f64,
        integrator_step: f64,
    ) -> Result<Self> {
        let spec = Self {
            horizon,
            control_step,
            saturation,
            integrator_step,
            quadrature: Quadrature::Trapezoid,
            max_iterations: 200,
            max_evaluations: 1_000_000,
            tolerance: 1e-6,
            fd_step: 1e-6,
            armijo: 1e-4,
            max_halvings: 40,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.saturation > 0.0 && self.saturation.is_finite()) {
            return Err(invalid(format!(
                "saturation {} must be positive and finite",
                self.saturation
            )));
        }
        if !(self.horizon > 0.0) {
            return Err(invalid("horizon must be positive"));
        }
        step_count(self.horizon, self.control_step)
            .map_err(|_| invalid("control step must divide the horizon"))?;
        step_count(self.control_step, self.integrator_step)
            .map_err(|_| invalid("integrator step must divide the control step"))?;
        if !(self.tolerance >= 0.0 && self.fd_step > 0.0 && self.armijo > 0.0 && self.armijo < 1.0)
        {
            return Err(invalid("solver tolerances out of range"));
        }
        Ok(())
    }

    /// Number of hold intervals in the horizon.
    pub fn intervals(&self) -> usize {
        (self.horizon / self.control_step).round() as usize
    }

    fn substeps(&self) -> usize {
        (self.control_step / self.integrator_step).round() as usize
    }
}

/// Why a rollout has infinite cost.
#[derive(Debug, Clone, PartialEq)]
pub enum InfeasibleReason {
    /// `‖e_r‖ ≥ θ` at this grid time.
    FunnelExit {
        time: f64,
    },
    BlowUp {
        time: f64,
    },
    Integration {
        time: f64,
        message: String,
    },
}

impl fmt::Display for InfeasibleReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::FunnelExit { time } => write!(f, "e_r left the funnel at t = {time}"),
            Self::BlowUp { time } => write!(f, "state escaped at t = {time}"),
            Self::Integration { time, message } => {
                write!(f, "integration failed at t = {time}: {message}")
            }
        }
    }
}

/// Value of the cost functional together with the reason for `+∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEvaluation {
    pub value: f64,
    pub reason: Option<InfeasibleReason>,
}

impl CostEvaluation {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

struct Snapshot<P> {
    plant: P,
    acc: f64,
}

struct Evaluator<'a, P: Plant> {
    plant: &'a P,
    sc: &'a StageCost,
    reference: &'a dyn Reference,
    h: f64,
    sub: usize,
    intervals: usize,
    m: usize,
    t_hat: f64,
    stepper: Stepper,
    evaluations: usize,
}

impl<'a, P: Plant> Evaluator<'a, P> {
    fn new(
        plant: &'a P,
        sc: &'a StageCost,
        reference: &'a dyn Reference,
        spec: &OcpSpec,
    ) -> Result<Self> {
        spec.validate()?;
        if sc.relative_degree() != plant.relative_degree() {
            return Err(invalid("stage cost and plant differ in relative degree"));
        }
        if reference.dim() != plant.output_dim() {
            return Err(invalid("reference and plant differ in output dimension"));
        }
        if plant.memory() > 0.0 && spec.integrator_step > plant.memory() {
            return Err(invalid(
                "integrator step must not exceed the operator memory",
            ));
        }
        Ok(Self {
            plant,
            sc,
            reference,
            h: spec.integrator_step,
            sub: spec.substeps(),
            intervals: spec.intervals(),
            m: plant.output_dim(),
            t_hat: plant.time(),
            stepper: Stepper::new(plant.state().len()),
            evaluations: 0,
        })
    }

    fn barrier_at(&self, t: f64, plant: &P) -> f64 {
        let (m, r) = (self.m, plant.relative_degree());
        let mut jet: Buf = SmallVec::from_elem(0.0, r * m);
        plant.output_jet(plant.state(), &mut jet);
        let mut yref: Buf = SmallVec::from_elem(0.0, r * m);
        self.reference.jet(t, r - 1, &mut yref);
        for i in 0..r * m {
            jet[i] -= yref[i];
        }
        self.sc.barrier(t, &jet, m)
    }

    /// Integrate from hold interval `first` with `run` positioned at its
    /// start and `acc` the cost accumulated so far.
    fn rollout(
        &mut self,
        mut run: P,
        first: usize,
        mut acc: f64,
        u: &[f64],
        mut snapshots: Option<&mut Vec<Snapshot<P>>>,
    ) -> std::result::Result<f64, InfeasibleReason> {
        self.evaluations += 1;
        let (h, m, sub) = (self.h, self.m, self.sub);
        let mut noop = |_: Stage, _: f64, _: &P, _: &[f64], _: &mut [f64]| -> Result<()> { Ok(()) };
        let mut ui: Buf = SmallVec::from_elem(0.0, m);
        let mut k = first * sub;
        let mut t = self.t_hat + k as f64 * h;
        let mut b = self.barrier_at(t, &run);
        if !b.is_finite() {
            return Err(InfeasibleReason::FunnelExit { time: t });
        }
        let mut x: Vec<f64> = run.state().to_vec();
        for j in first..self.intervals {
            if let Some(s) = snapshots.as_deref_mut() {
                s.push(Snapshot {
                    plant: run.clone(),
                    acc,
                });
            }
            let block = &u[j * m..(j + 1) * m];
            let penalty = self.sc.input_penalty(block);
            for _ in 0..sub {
                ui.copy_from_slice(block);
                if let Err(e) = self.stepper.step(&run, t, h, &x, &mut ui, &mut noop) {
                    return Err(InfeasibleReason::Integration {
                        time: t,
                        message: e.to_string(),
                    });
                }
                k += 1;
                t = self.t_hat + k as f64 * h;
                let size = norm(&self.stepper.next);
                if !size.is_finite() || size > BLOW_UP_THRESHOLD {
                    return Err(InfeasibleReason::BlowUp { time: t });
                }
                x.copy_from_slice(&self.stepper.next);
                run.advance(t, &x);
                let b_next = self.barrier_at(t, &run);
                if !b_next.is_finite() {
                    return Err(InfeasibleReason::FunnelExit { time: t });
                }
                acc += 0.5 * h * (b + b_next) + h * penalty;
                b = b_next;
            }
        }
        Ok(acc)
    }

    fn full(&mut self, u: &[f64], snapshots: Option<&mut Vec<Snapshot<P>>>) -> CostEvaluation {
        if let Some(s) = snapshots.as_deref() {
            debug_assert!(s.is_empty());
        }
        match self.rollout(self.plant.clone(), 0, 0.0, u, snapshots) {
            Ok(value) => CostEvaluation {
                value,
                reason: None,
            },
            Err(reason) => CostEvaluation {
                value: f64::INFINITY,
                reason: Some(reason),
            },
        }
    }

    fn from_snapshot(&mut self, snaps: &[Snapshot<P>], first: usize, u: &[f64]) -> f64 {
        let s = &snaps[first];
        self.rollout(s.plant.clone(), first, s.acc, u, None)
            .unwrap_or(f64::INFINITY)
    }
}

fn check_control(control: &ControlSignal, plant_time: f64, m: usize, spec: &OcpSpec) -> Result<()> {
    if control.m() != m {
        return Err(invalid("control dimension does not match the plant"));
    }
    if (control.step() - spec.control_step).abs() > 1e-12 * spec.control_step {
        return Err(invalid(
            "control step differs from the problem's hold interval",
        ));
    }
    if (control.t_start() - plant_time).abs() > 1e-9 * spec.control_step {
        return Err(invalid(format!(
            "control starts at {} but the plant is at {plant_time}",
            control.t_start()
        )));
    }
    if control.len() < spec.intervals() {
        return Err(invalid("control does not cover the horizon"));
    }
    Ok(())
}

/// `∫_{t̂}^{t̂+T} ℓ(t, χ(y - y_rf)(t), u(t)) dt` for the plant's current
/// state and history, by composite trapezoid on the integrator grid.
pub fn cost_functional<P: Plant>(
    plant: &P,
    control: &ControlSignal,
    sc: &StageCost,
    reference: &dyn Reference,
    spec: &OcpSpec,
) -> Result<CostEvaluation> {
    check_control(control, plant.time(), plant.output_dim(), spec)?;
    let mut ev = Evaluator::new(plant, sc, reference, spec)?;
    let n = spec.intervals() * plant.output_dim();
    Ok(ev.full(&control.values()[..n], None))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcpStatus {
    Converged,
    BudgetExhausted,
    /// The supplied warm start had infinite cost and the feedback start
    /// was used instead.
    InfeasibleStartRecovered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub control: ControlSignal,
    pub cost: f64,
    pub status: OcpStatus,
    pub iterations: usize,
    pub evaluations: usize,
    /// Cost of the iterate the descent started from.
    pub start_cost: f64,
    /// Cost after every accepted step, starting with `start_cost`.
    pub cost_trace: Vec<f64>,
    /// The iteration ended because no step along the projected gradient
    /// decreased the cost.
    pub stalled: bool,
}

fn project(x: &mut [f64], m: usize, radius: f64) {
    for block in x.chunks_mut(m) {
        project_to_ball(block, radius);
    }
}

fn feedback_start<P: Plant>(plant: &P, law: &FeedbackLaw, spec: &OcpSpec) -> Option<Vec<f64>> {
    let mut run = plant.clone();
    let t_end = plant.time() + spec.horizon;
    let (_, signal) = sampled_feedback_rollout(
        &mut run,
        law,
        t_end,
        spec.integrator_step,
        spec.control_step,
        spec.saturation,
    )
    .ok()?;
    let n = spec.intervals() * plant.output_dim();
    (signal.values().len() >= n).then(|| signal.values()[..n].to_vec())
}

/// Minimize the cost functional over held inputs in the saturation ball.
///
/// Starts from `warm_start` when it has finite cost, else from the sampled
/// feedback `law` (if given). Descends by projected gradient with
/// Barzilai–Borwein steps, forward-difference gradients and halving
/// backtracking; every accepted step lowers the cost.
pub fn solve_ocp<P: Plant>(
    plant: &P,
    sc: &StageCost,
    spec: &OcpSpec,
    reference: &dyn Reference,
    warm_start: Option<&ControlSignal>,
    law: Option<&FeedbackLaw>,
) -> Result<OcpSolution> {
    let m = plant.output_dim();
    let n_int = spec.intervals();
    let n = n_int * m;
    let radius = spec.saturation;
    let t_hat = plant.time();
    let mut ev = Evaluator::new(plant, sc, reference, spec)?;

    let mut x = vec![0.0; n];
    let mut snaps: Vec<Snapshot<P>> = Vec::with_capacity(n_int);
    let mut cost = f64::INFINITY;
    let mut reason = None;
    let mut recovered = false;
    if let Some(w) = warm_start {
        check_control(w, t_hat, m, spec)?;
        x.copy_from_slice(&w.values()[..n]);
        project(&mut x, m, radius);
        let e = ev.full(&x, Some(&mut snaps));
        cost = e.value;
        reason = e.reason;
    }
    if !cost.is_finite() {
        recovered = warm_start.is_some();
        if let Some(start) = law.and_then(|l| feedback_start(plant, l, spec)) {
            x = start;
            snaps.clear();
            let e = ev.full(&x, Some(&mut snaps));
            cost = e.value;
            reason = e.reason.or(reason);
        }
    }
    if !cost.is_finite() {
        return Err(Error::Infeasible {
            time: t_hat,
            reason: reason.map_or_else(
                || "no starting control available".to_string(),
                |r| r.to_string(),
            ),
        });
    }

    let start_cost = cost;
    let mut trace = vec![cost];
    let mut grad = vec![0.0; n];
    let mut prev_x = vec![0.0; n];
    let mut prev_grad = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial_snaps: Vec<Snapshot<P>> = Vec::with_capacity(n_int);
    let mut alpha = 0.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut stalled = false;

    while iterations < spec.max_iterations && ev.evaluations < spec.max_evaluations {
        // forward differences, backward at the saturation boundary or when
        // the forward probe is infeasible
        for i in 0..n {
            let j = i / m;
            let step = spec.fd_step * x[i].abs().max(1.0);
            let mut probe = x.clone();
            let forward_ok = {
                probe[i] = x[i] + step;
                norm(&probe[j * m..(j + 1) * m]) <= radius
            };
            let mut value = f64::INFINITY;
            let mut signed = step;
            if forward_ok {
                value = ev.from_snapshot(&snaps, j, &probe);
            }
            if !value.is_finite() {
                probe[i] = x[i] - step;
                signed = -step;
                value = ev.from_snapshot(&snaps, j, &probe);
            }
            grad[i] = if value.is_finite() {
                (value - cost) / signed
            } else {
                0.0
            };
        }

        let mut residual: f64 = 0.0;
        for i in 0..n {
            trial[i] = x[i] - grad[i];
        }
        project(&mut trial, m, radius);
        for i in 0..n {
            residual = residual.max((trial[i] - x[i]).abs());
        }
        if residual <= spec.tolerance {
            converged = true;
            break;
        }

        let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if iterations == 0 {
            alpha = 0.1 * radius / gmax;
        } else {
            let (mut ss, mut sy) = (0.0, 0.0);
            for i in 0..n {
                let s = x[i] - prev_x[i];
                ss += s * s;
                sy += s * (grad[i] - prev_grad[i]);
            }
            alpha = if sy > 0.0 { ss / sy } else { 2.0 * alpha };
        }
        alpha = alpha.clamp(1e-12, 1e12);

        let mut accepted = false;
        for _ in 0..=spec.max_halvings {
            for i in 0..n {
                trial[i] = x[i] - alpha * grad[i];
            }
            project(&mut trial, m, radius);
            let mut decrease = 0.0;
            let mut moved = false;
            for i in 0..n {
                let d = trial[i] - x[i];
                decrease += grad[i] * d;
                moved |= d != 0.0;
            }
            if !moved {
                break;
            }
            trial_snaps.clear();
            let value = ev.full(&trial, Some(&mut trial_snaps)).value;
            if value.is_finite() && value <= cost + spec.armijo * decrease && value < cost {
                accepted = true;
                prev_x.copy_from_slice(&x);
                prev_grad.copy_from_slice(&grad);
                x.copy_from_slice(&trial);
                std::mem::swap(&mut snaps, &mut trial_snaps);
                log::debug!(
                    "ocp t_hat={t_hat} iter={} cost={value:.12e} step={alpha:.3e} residual={residual:.3e}",
                    iterations + 1
                );
                cost = value;
                trace.push(cost);
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            stalled = true;
            converged = true;
            log::debug!("ocp t_hat={t_hat} line search stalled at iter={iterations} residual={residual:.3e}");
            break;
        }
        iterations += 1;
    }

    let status = if recovered {
        OcpStatus::InfeasibleStartRecovered
    } else if converged {
        OcpStatus::Converged
    } else {
        OcpStatus::BudgetExhausted
    };
    log::info!(
        "ocp t_hat={t_hat} status={status:?} iterations={iterations} evaluations={} cost={cost:.12e}",
        ev.evaluations
    );
    Ok(OcpSolution {
        control: ControlSignal::new(t_hat, spec.control_step, m, x, radius)?,
        cost,
        status,
        iterations,
        evaluations: ev.evaluations,
        start_cost,
        cost_trace: trace,
        stalled,
    })
}

/// Exhaustive minimum over the grid `{-M, -M + res, …, M}^dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub solution: OcpSolution,
    /// Largest cost increase from the grid minimizer to a finite-cost grid
    /// neighbour: the cost resolution of the grid near the optimum.
    pub grid_gap: f64,
}

/// Largest decision dimension accepted by [`brute_force_ocp`].
pub const BRUTE_FORCE_MAX_DIM: usize = 3;

pub fn brute_force_ocp<P: Plant>(
    plant: &P,
    sc: &StageCost,
    spec: &OcpSpec,
    reference: &dyn Reference,
    resolution: f64,
) -> Result<BruteForceResult> {
    let m = plant.output_dim();
    let dim = spec.intervals() * m;
    if dim > BRUTE_FORCE_MAX_DIM {
        return Err(invalid(format!(
            "brute force handles at most {BRUTE_FORCE_MAX_DIM} decision variables, got {dim}"
        )));
    }
    if !(resolution > 0.0) {
        return Err(invalid("grid resolution must be positive"));
    }
    let radius = spec.saturation;
    let per_dim = (2.0 * radius / resolution).round() as usize + 1;
    // mirrored so that the grid is exactly symmetric about zero
    let level = |k: usize| {
        if 2 * k < per_dim - 1 {
            -(radius - k as f64 * resolution)
        } else {
            (radius - (per_dim - 1 - k) as f64 * resolution).min(radius)
        }
    };
    let mut ev = Evaluator::new(plant, sc, reference, spec)?;
    let total = per_dim.pow(dim as u32);
    let mut values = vec![f64::INFINITY; total];
    let mut x = vec![0.0; dim];
    let mut best = (f64::INFINITY, 0usize);
    for (idx, slot) in values.iter_mut().enumerate() {
        let mut rest = idx;
        for xi in x.iter_mut() {
            *xi = level(rest % per_dim);
            rest /= per_dim;
        }
        if x.chunks(m).any(|b| norm(b) > radius * (1.0 + 1e-12)) {
            continue;
        }
        *slot = ev.full(&x, None).value;
        if *slot < best.0 {
            best = (*slot, idx);
        }
    }
    if !best.0.is_finite() {
        return Err(Error::Infeasible {
            time: plant.time(),
            reason: "every grid control has infinite cost".into(),
        });
    }
    let mut gap: f64 = 0.0;
    let mut stride = 1;
    for _ in 0..dim {
        let coord = (best.1 / stride) % per_dim;
        for nb in [
            coord.checked_sub(1),
            Some(coord + 1).filter(|c| *c < per_dim),
        ]
        .into_iter()
        .flatten()
        {
            let v = values[best.1 - coord * stride + nb * stride];
            if v.is_finite() {
                gap = gap.max(v - best.0);
            }
        }
        stride *= per_dim;
    }
    let mut rest = best.1;
    for xi in x.iter_mut() {
        *xi = level(rest % per_dim);
        rest /= per_dim;
    }
    Ok(BruteForceResult {
        solution: OcpSolution {
            control: ControlSignal::new(plant.time(), spec.control_step, m, x, radius)?,
            cost: best.0,
            status: OcpStatus::Converged,
            iterations: 0,
            evaluations: ev.evaluations,
            start_cost: best.0,
            cost_trace: vec![best.0],
            stalled: false,
        },
        grid_gap: gap,
    })
}
