//! Fixed-step RK4 integration of plants under sampled or feedback inputs, and
//! the explicit funnel feedback that certifies feasibility.

use std::fmt;
use std::sync::Arc;

use smallvec::SmallVec;

use crate::errchain::norm;
use crate::error::{invalid, Error, Result};
use crate::funnel::FunnelChain;
use crate::systems::{solve_gain, Buf, Plant, BLOW_UP_THRESHOLD};

/// Default integrator step: ten substeps per 0.04 hold interval.
pub const DEFAULT_INTEGRATOR_STEP: f64 = 0.004;

/// Reference signal with known derivatives.
pub trait Reference: Send + Sync {
    fn dim(&self) -> usize;
    /// Blocks `y_rf, ẏ_rf, …, y_rf^{(order)}` written into `out`.
    fn jet(&self, t: f64, order: usize, out: &mut [f64]);
    /// An upper bound for `sup_t ‖y_rf^{(order)}(t)‖`.
    fn derivative_sup(&self, order: usize) -> f64;
}

/// `a cos(ω t + φ) + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub offset: f64,
}

impl Sinusoid {
    pub fn constant(value: f64) -> Self {
        Self {
            amplitude: 0.0,
            frequency: 0.0,
            phase: 0.0,
            offset: value,
        }
    }

    pub fn cosine(amplitude: f64, frequency: f64) -> Self {
        Self {
            amplitude,
            frequency,
            phase: 0.0,
            offset: 0.0,
        }
    }

    pub fn derivative(&self, t: f64, order: usize) -> f64 {
        let arg = self.frequency * t + self.phase;
        let scale = self.amplitude * self.frequency.powi(order as i32);
        let wave = match order % 4 {
            0 => arg.cos(),
            1 => -arg.sin(),
            2 => -arg.cos(),
            _ => arg.sin(),
        };
        if order == 0 {
            scale * wave + self.offset
        } else {
            scale * wave
        }
    }
}

/// One [`Sinusoid`] per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidalReference {
    channels: Vec<Sinusoid>,
}

impl SinusoidalReference {
    pub fn new(channels: Vec<Sinusoid>) -> Result<Self> {
        if channels.is_empty() {
            return Err(invalid("reference needs at least one channel"));
        }
        let finite = channels.iter().all(|c| {
            [c.amplitude, c.frequency, c.phase, c.offset]
                .iter()
                .all(|v| v.is_finite())
        });
        if !finite {
            return Err(invalid("reference parameters must be finite"));
        }
        Ok(Self { channels })
    }

    pub fn cosine() -> Self {
        Self {
            channels: vec![Sinusoid::cosine(1.0, 1.0)],
        }
    }

    pub fn constant(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|v| Sinusoid::constant(*v)).collect())
    }

    pub fn channels(&self) -> &[Sinusoid] {
        &self.channels
    }
}

impl Reference for SinusoidalReference {
    fn dim(&self) -> usize {
        self.channels.len()
    }

    fn jet(&self, t: f64, order: usize, out: &mut [f64]) {
        let m = self.channels.len();
        for k in 0..=order {
            for (c, ch) in self.channels.iter().enumerate() {
                out[k * m + c] = ch.derivative(t, k);
            }
        }
    }

    fn derivative_sup(&self, order: usize) -> f64 {
        self.channels
            .iter()
            .map(|c| {
                let a = (c.amplitude * c.frequency.powi(order as i32)).abs();
                if order == 0 {
                    a + c.offset.abs()
                } else {
                    a
                }
            })
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Scale `u` onto the closed ball of radius `radius` if it lies outside.
pub fn project_to_ball(u: &mut [f64], radius: f64) {
    if u.len() == 1 {
        u[0] = u[0].clamp(-radius, radius);
        return;
    }
    let n = norm(u);
    if n > radius {
        let mut s = radius / n;
        // rounding can leave the scaled norm a few ulps above the radius
        while norm(u.iter().map(|v| v * s).collect::<Buf>().as_slice()) > radius {
            s *= 1.0 - f64::EPSILON;
        }
        u.iter_mut().for_each(|v| *v *= s);
    }
}

/// Piecewise-constant input on `[t_start, t_start + step·len)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    t_start: f64,
    step: f64,
    m: usize,
    values: Vec<f64>,
    saturation: f64,
}

impl ControlSignal {
    /// `values` holds `len·m` entries; each block must lie in the ball of
    /// radius `saturation` (which may be infinite).
    pub fn new(
        t_start: f64,
        step: f64,
        m: usize,
        values: Vec<f64>,
        saturation: f64,
    ) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) || !t_start.is_finite() {
            return Err(invalid("hold interval must be positive and start finite"));
        }
        if m == 0 || values.is_empty() || values.len() % m != 0 {
            return Err(invalid("control values must be a nonempty multiple of m"));
        }
        if !(saturation > 0.0) {
            return Err(invalid("saturation must be positive"));
        }
        for block in values.chunks(m) {
            if block.iter().any(|v| !v.is_finite()) {
                return Err(invalid("control values must be finite"));
            }
            if norm(block) > saturation * (1.0 + 1e-12) {
                return Err(invalid(format!(
                    "control value of norm {} exceeds saturation {saturation}",
                    norm(block)
                )));
            }
        }
        Ok(Self {
            t_start,
            step,
            m,
            values,
            saturation,
        })
    }

    /// Constant input over `intervals` hold intervals.
    pub fn constant(
        t_start: f64,
        step: f64,
        intervals: usize,
        u: &[f64],
        saturation: f64,
    ) -> Result<Self> {
        let values = u
            .iter()
            .copied()
            .cycle()
            .take(u.len() * intervals)
            .collect();
        Self::new(t_start, step, u.len(), values, saturation)
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn saturation(&self) -> f64 {
        self.saturation
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn t_end(&self) -> f64 {
        self.t_start + self.step * self.len() as f64
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value held at time `t`, clamped to the first and last interval.
    pub fn value_at(&self, t: f64) -> &[f64] {
        let i = ((t - self.t_start) / self.step + 1e-9).floor();
        let i = if i < 0.0 {
            0
        } else {
            (i as usize).min(self.len() - 1)
        };
        self.value(i)
    }

    /// Largest block norm.
    pub fn peak(&self) -> f64 {
        self.values.chunks(self.m).map(norm).fold(0.0, f64::max)
    }

    /// Drop the first `intervals` values and append `tail`.
    pub fn shifted(&self, intervals: usize, tail: &[f64]) -> Result<Self> {
        if intervals > self.len() {
            return Err(invalid("cannot shift past the end of the signal"));
        }
        let mut values = self.values[intervals * self.m..].to_vec();
        values.extend_from_slice(tail);
        Self::new(
            self.t_start + intervals as f64 * self.step,
            self.step,
            self.m,
            values,
            self.saturation,
        )
    }

    /// The first `intervals` values.
    pub fn head(&self, intervals: usize) -> Result<Self> {
        if intervals == 0 || intervals > self.len() {
            return Err(invalid("head length out of range"));
        }
        Self::new(
            self.t_start,
            self.step,
            self.m,
            self.values[..intervals * self.m].to_vec(),
            self.saturation,
        )
    }

    /// Concatenate signals that abut in time and share step and saturation.
    pub fn concat(parts: &[ControlSignal]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("nothing to concatenate"))?;
        let mut values = Vec::new();
        let mut expected = first.t_start;
        for p in parts {
            if p.m != first.m || p.step != first.step {
                return Err(invalid("signals differ in dimension or step"));
            }
            if (p.t_start - expected).abs() > 1e-9 * first.step {
                return Err(invalid("signals do not abut"));
            }
            values.extend_from_slice(&p.values);
            expected = p.t_end();
        }
        let saturation = parts.iter().map(|p| p.saturation).fold(0.0, f64::max);
        Self::new(first.t_start, first.step, first.m, values, saturation)
    }
}

/// How a simulation ended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunStatus {
    Completed,
    /// State norm passed [`BLOW_UP_THRESHOLD`] at the given time.
    BlowUp {
        time: f64,
    },
    SingularGain {
        time: f64,
    },
}

/// Sampled trajectory on the integrator grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub m: usize,
    pub r: usize,
    pub state_dim: usize,
    pub grid: Vec<f64>,
    /// Flat, `state_dim` per grid point.
    pub states: Vec<f64>,
    /// Flat, `r·m` per grid point.
    pub output_jet: Vec<f64>,
    /// Flat, `m` per grid point: the input applied from that point on.
    pub input: Vec<f64>,
    pub status: RunStatus,
}

impl Trajectory {
    fn with_capacity(m: usize, r: usize, n: usize, points: usize) -> Self {
        Self {
            m,
            r,
            state_dim: n,
            grid: Vec::with_capacity(points),
            states: Vec::with_capacity(points * n),
            output_jet: Vec::with_capacity(points * r * m),
            input: Vec::with_capacity(points * m),
            status: RunStatus::Completed,
        }
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.state_dim..(k + 1) * self.state_dim]
    }

    pub fn jet(&self, k: usize) -> &[f64] {
        let w = self.r * self.m;
        &self.output_jet[k * w..(k + 1) * w]
    }

    pub fn output(&self, k: usize) -> &[f64] {
        &self.jet(k)[..self.m]
    }

    pub fn input(&self, k: usize) -> &[f64] {
        &self.input[k * self.m..(k + 1) * self.m]
    }

    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn peak_input(&self) -> f64 {
        self.input.chunks(self.m).map(norm).fold(0.0, f64::max)
    }

    fn push(&mut self, t: f64, x: &[f64], jet: &[f64], u: &[f64]) {
        self.grid.push(t);
        self.states.extend_from_slice(x);
        self.output_jet.extend_from_slice(jet);
        self.input.extend_from_slice(u);
    }
}

/// Where in an RK4 step an input policy is queried.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Step start on the grid; the value chosen here is logged.
    Start,
    /// Intermediate stage; sampled policies leave `u` untouched.
    Inner,
}

/// Reusable RK4 buffers.
#[derive(Debug, Clone)]
pub(crate) struct Stepper {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
    pub(crate) next: Vec<f64>,
}

impl Stepper {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
            next: vec![0.0; n],
        }
    }

    /// One RK4 step from `(t, x)`; `u` holds the `Stage::Start` input.
    pub(crate) fn step<P, F>(
        &mut self,
        plant: &P,
        t: f64,
        h: f64,
        x: &[f64],
        u: &mut [f64],
        policy: &mut F,
    ) -> Result<()>
    where
        P: Plant,
        F: FnMut(Stage, f64, &P, &[f64], &mut [f64]) -> Result<()>,
    {
        let n = x.len();
        plant.vector_field(t, x, u, &mut self.k1)?;
        let half = t + 0.5 * h;
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        policy(Stage::Inner, half, plant, &self.tmp, u)?;
        plant.vector_field(half, &self.tmp, u, &mut self.k2)?;
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        policy(Stage::Inner, half, plant, &self.tmp, u)?;
        plant.vector_field(half, &self.tmp, u, &mut self.k3)?;
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        policy(Stage::Inner, t + h, plant, &self.tmp, u)?;
        plant.vector_field(t + h, &self.tmp, u, &mut self.k4)?;
        for i in 0..n {
            self.next[i] =
                x[i] + h / 6.0 * (self.k1[i] + 2.0 * (self.k2[i] + self.k3[i]) + self.k4[i]);
        }
        Ok(())
    }
}

pub(crate) fn step_count(span: f64, h: f64) -> Result<usize> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid(format!("integrator step {h} must be positive")));
    }
    if !(span >= 0.0) {
        return Err(invalid("end time precedes the plant time"));
    }
    let n = (span / h).round();
    if (n * h - span).abs() > 1e-9 * h.max(span) {
        return Err(invalid(format!(
            "step {h} does not divide the interval length {span}"
        )));
    }
    Ok(n as usize)
}

/// Integrate the plant from its current time to `t_end` with step `h`,
/// querying `policy` for the input. The plant is advanced in place.
///
/// A singular gain or escaping state ends the run early with the
/// corresponding status; other errors propagate.
pub fn integrate<P, F>(plant: &mut P, t_end: f64, h: f64, mut policy: F) -> Result<Trajectory>
where
    P: Plant,
    F: FnMut(Stage, f64, &P, &[f64], &mut [f64]) -> Result<()>,
{
    let t0 = plant.time();
    let steps = step_count(t_end - t0, h)?;
    if plant.memory() > 0.0 && h > plant.memory() {
        return Err(invalid(
            "integrator step must not exceed the operator memory",
        ));
    }
    let (m, r) = (plant.output_dim(), plant.relative_degree());
    let n = plant.state().len();
    let mut traj = Trajectory::with_capacity(m, r, n, steps + 1);
    let mut stepper = Stepper::new(n);
    let mut u = vec![0.0; m];
    let mut jet = vec![0.0; r * m];
    let mut x = plant.state().to_vec();
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        if let Err(e) = policy(Stage::Start, t, plant, &x, &mut u) {
            return finish_early(traj, e, t);
        }
        plant.output_jet(&x, &mut jet);
        traj.push(t, &x, &jet, &u);
        if let Err(e) = stepper.step(plant, t, h, &x, &mut u, &mut policy) {
            return finish_early(traj, e, t);
        }
        let size = norm(&stepper.next);
        let t_next = t0 + (k + 1) as f64 * h;
        if !size.is_finite() || size > BLOW_UP_THRESHOLD {
            traj.status = RunStatus::BlowUp { time: t_next };
            return Ok(traj);
        }
        x.copy_from_slice(&stepper.next);
        plant.advance(t_next, &x);
    }
    plant.output_jet(&x, &mut jet);
    let t_final = t0 + steps as f64 * h;
    if steps == 0 {
        if let Err(e) = policy(Stage::Start, t_final, plant, &x, &mut u) {
            return finish_early(traj, e, t_final);
        }
    }
    traj.push(t_final, &x, &jet, &u);
    Ok(traj)
}

fn finish_early(mut traj: Trajectory, e: Error, t: f64) -> Result<Trajectory> {
    match e {
        Error::SingularGain { .. } => {
            traj.status = RunStatus::SingularGain { time: t };
            Ok(traj)
        }
        other => Err(other),
    }
}

/// Number of integrator steps per hold interval, and the offset of `t0`
/// into the signal, both checked to be integral.
pub(crate) fn hold_alignment(control: &ControlSignal, t0: f64, h: f64) -> Result<(usize, usize)> {
    let sub = step_count(control.step(), h).map_err(|_| {
        invalid(format!(
            "integrator step {h} does not divide the hold interval {}",
            control.step()
        ))
    })?;
    let offset = step_count(t0 - control.t_start(), h)
        .map_err(|_| invalid("plant time is not aligned with the control grid"))?;
    Ok((sub.max(1), offset))
}

/// Apply a held input to the plant until `t_end`.
pub fn integrate_open_loop<P: Plant>(
    plant: &mut P,
    control: &ControlSignal,
    t_end: f64,
    h: f64,
) -> Result<Trajectory> {
    if control.m() != plant.output_dim() {
        return Err(invalid("control dimension does not match the plant"));
    }
    let t0 = plant.time();
    let (sub, offset) = hold_alignment(control, t0, h)?;
    if t_end > control.t_end() + 1e-9 * control.step() {
        return Err(invalid(format!(
            "control covers up to {} but the run ends at {t_end}",
            control.t_end()
        )));
    }
    let mut k = 0usize;
    integrate(plant, t_end, h, |stage, _, _, _, u| {
        if stage == Stage::Start {
            let idx = ((k + offset) / sub).min(control.len() - 1);
            u.copy_from_slice(control.value(idx));
            k += 1;
        }
        Ok(())
    })
}

/// The explicit funnel feedback
/// `u = g⁻¹(-f + y_rf^{(r)} - Σ_j k_j e_j^{(r-j)} + e_r θ̇/θ)`.
#[derive(Clone)]
pub struct FeedbackLaw {
    chain: FunnelChain,
    gains: Vec<f64>,
    reference: Arc<dyn Reference>,
}

impl fmt::Debug for FeedbackLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeedbackLaw")
            .field("gains", &self.gains)
            .field("theta", &self.chain.theta().describe())
            .finish()
    }
}

impl FeedbackLaw {
    pub fn new(chain: FunnelChain, gains: &[f64], reference: Arc<dyn Reference>) -> Result<Self> {
        if gains.len() + 1 != chain.r() {
            return Err(invalid("gain count does not match the chain"));
        }
        Ok(Self {
            chain,
            gains: gains.to_vec(),
            reference,
        })
    }

    pub fn chain(&self) -> &FunnelChain {
        &self.chain
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn reference(&self) -> &Arc<dyn Reference> {
        &self.reference
    }

    /// Error jet `χ(y - y_rf)(t)` and `y_rf^{(r)}(t)` for output jet `jet`.
    pub fn error_jet(&self, t: f64, jet: &[f64], err: &mut [f64], yref_top: &mut [f64]) {
        let m = yref_top.len();
        let r = jet.len() / m;
        let mut yref: Buf = SmallVec::from_elem(0.0, (r + 1) * m);
        self.reference.jet(t, r, &mut yref);
        for i in 0..r * m {
            err[i] = jet[i] - yref[i];
        }
        yref_top.copy_from_slice(&yref[r * m..]);
    }

    /// Feedback value at plant state `x` and time `t`.
    pub fn input<P: Plant>(&self, plant: &P, t: f64, x: &[f64], u: &mut [f64]) -> Result<()> {
        let (m, r) = (plant.output_dim(), plant.relative_degree());
        let rm = r * m;
        let mut jet: Buf = SmallVec::from_elem(0.0, rm);
        plant.output_jet(x, &mut jet);
        let mut err: Buf = SmallVec::from_elem(0.0, rm);
        let mut top: Buf = SmallVec::from_elem(0.0, m);
        self.error_jet(t, &jet, &mut err, &mut top);

        // table[(i-1)·r + s] = e_i(S^s ξ), zero-padded past the jet
        let mut table: Buf = SmallVec::from_elem(0.0, r * r * m);
        table[..rm].copy_from_slice(&err);
        for i in 1..r {
            let k = self.gains[i - 1];
            for s in 0..r {
                for c in 0..m {
                    let shifted = if s + 1 < r {
                        table[((i - 1) * r + s + 1) * m + c]
                    } else {
                        0.0
                    };
                    table[(i * r + s) * m + c] = shifted + k * table[((i - 1) * r + s) * m + c];
                }
            }
        }
        for i in 1..=r {
            let e = &table[(i - 1) * r * m..(i - 1) * r * m + m];
            let radius = self.chain.member(i).value(t);
            if norm(e) >= radius {
                return Err(Error::PreconditionViolation(format!(
                    "error variable e_{i} of norm {} is outside its funnel {radius} at t = {t}",
                    norm(e)
                )));
            }
        }
        let (theta, theta_dot) = self.chain.theta().value_and_derivative(t);
        let mut f: Buf = SmallVec::from_elem(0.0, m);
        let mut g: Buf = SmallVec::from_elem(0.0, m * m);
        plant.affine_terms(t, x, &mut f, &mut g)?;
        let mut rhs: Buf = SmallVec::from_elem(0.0, m);
        let e_r = &table[(r - 1) * r * m..(r - 1) * r * m + m];
        for c in 0..m {
            let mut v = -f[c] + top[c] + e_r[c] * theta_dot / theta;
            for j in 1..r {
                v -= self.gains[j - 1] * table[((j - 1) * r + (r - j)) * m + c];
            }
            rhs[c] = v;
        }
        solve_gain(&g, m, &rhs, u)
    }
}

/// Closed loop under the feedback evaluated at every RK4 stage.
///
/// The returned signal holds the feedback value from each multiple of
/// `hold_step` (relative to the plant's start time), projected onto the
/// ball of radius `saturation`.
pub fn feedback_rollout<P: Plant>(
    plant: &mut P,
    law: &FeedbackLaw,
    t_end: f64,
    h: f64,
    hold_step: f64,
    saturation: f64,
) -> Result<(Trajectory, ControlSignal)> {
    let t0 = plant.time();
    let sub = step_count(hold_step, h)?.max(1);
    let traj = integrate(plant, t_end, h, |_, t, p, x, u| law.input(p, t, x, u))?;
    let m = traj.m;
    let mut values = Vec::new();
    let mut k = 0;
    while k + 1 < traj.len() {
        let mut u = traj.input(k).to_vec();
        project_to_ball(&mut u, saturation);
        values.extend(u);
        k += sub;
    }
    if values.is_empty() {
        values = vec![0.0; m];
    }
    let signal = ControlSignal::new(t0, hold_step, m, values, saturation)?;
    Ok((traj, signal))
}

/// Closed loop where the feedback is sampled at each multiple of
/// `hold_step`, projected onto the saturation ball and held.
pub fn sampled_feedback_rollout<P: Plant>(
    plant: &mut P,
    law: &FeedbackLaw,
    t_end: f64,
    h: f64,
    hold_step: f64,
    saturation: f64,
) -> Result<(Trajectory, ControlSignal)> {
    let t0 = plant.time();
    let sub = step_count(hold_step, h)?.max(1);
    let mut values = Vec::new();
    let mut k = 0usize;
    let traj = integrate(plant, t_end, h, |stage, t, p, x, u| {
        if stage == Stage::Start {
            if k % sub == 0 {
                law.input(p, t, x, u)?;
                project_to_ball(u, saturation);
                values.extend_from_slice(u);
            }
            k += 1;
        }
        Ok(())
    })?;
    if values.is_empty() {
        values = vec![0.0; traj.m];
    }
    let signal = ControlSignal::new(t0, hold_step, traj.m, values, saturation)?;
    Ok((traj, signal))
}

/// Margin inflating the sampled bounds below.
pub const DYNAMICS_BOUND_INFLATION: f64 = 1.01;

/// `(f_max, g_max)`: largest `‖f‖` and `‖g⁻¹‖` seen along the feedback
/// closed loop, inflated by [`DYNAMICS_BOUND_INFLATION`].
pub fn estimate_dynamics_bounds<P: Plant>(
    plant: &P,
    law: &FeedbackLaw,
    t_end: f64,
    h: f64,
) -> Result<(f64, f64)> {
    let m = plant.output_dim();
    let (mut f_max, mut g_max) = (0.0f64, 0.0f64);
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; m * m];
    let mut sample = |p: &P, t: f64, x: &[f64]| -> Result<()> {
        // evaluated on the running plant so operator histories are in place
        p.affine_terms(t, x, &mut f, &mut g)?;
        f_max = f_max.max(norm(&f));
        g_max = g_max.max(inverse_norm(&g, m)?);
        Ok(())
    };
    let mut run = plant.clone();
    let traj = integrate(&mut run, t_end, h, |stage, t, p, x, u| {
        if matches!(stage, Stage::Start) {
            sample(p, t, x)?;
        }
        law.input(p, t, x, u)
    })?;
    if !traj.completed() {
        return Err(Error::PreconditionViolation(format!(
            "feedback closed loop ended early: {:?}",
            traj.status
        )));
    }
    sample(&run, run.time(), run.state())?;
    // strictly positive bounds even for f ≡ 0
    Ok((
        (f_max * DYNAMICS_BOUND_INFLATION).max(f64::MIN_POSITIVE),
        g_max * DYNAMICS_BOUND_INFLATION,
    ))
}

fn inverse_norm(g: &[f64], m: usize) -> Result<f64> {
    if m == 1 {
        if g[0] == 0.0 {
            return Err(Error::SingularGain {
                condition: f64::INFINITY,
            });
        }
        return Ok(1.0 / g[0].abs());
    }
    let sv = nalgebra::DMatrix::from_row_slice(m, m, g).singular_values();
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        return Err(Error::SingularGain {
            condition: f64::INFINITY,
        });
    }
    Ok(1.0 / min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{
        mass_on_car_normal_form, MassOnCarParams, NormalFormPlant, RelativeDegreeSystem,
    };

    fn integrator(y0: f64) -> NormalFormPlant {
        NormalFormPlant::new(
            RelativeDegreeSystem::integrator_chain(1, 1).unwrap(),
            0.0,
            &[y0],
            None,
        )
        .unwrap()
    }

    #[test]
    fn constant_input_on_integrator_is_exact() {
        let mut plant = integrator(0.0);
        let u = ControlSignal::constant(0.0, 0.1, 10, &[1.0], 20.0).unwrap();
        let traj = integrate_open_loop(&mut plant, &u, 1.0, 0.01).unwrap();
        assert!(traj.completed());
        assert_eq!(traj.len(), 101);
        assert!((traj.output(100)[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn mass_on_car_rest_stays_at_rest() {
        let mut plant =
            mass_on_car_normal_form(MassOnCarParams::default(), 0.0, &[0.0; 4]).unwrap();
        let u = ControlSignal::constant(0.0, 0.04, 25, &[0.0], 20.0).unwrap();
        let traj = integrate_open_loop(&mut plant, &u, 1.0, 0.004).unwrap();
        assert!(traj.states.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mass_on_car_small_time_taylor() {
        let mut plant =
            mass_on_car_normal_form(MassOnCarParams::default(), 0.0, &[0.0; 4]).unwrap();
        let u = ControlSignal::constant(0.0, 0.1, 1, &[9.0], 20.0).unwrap();
        let traj = integrate_open_loop(&mut plant, &u, 0.1, 0.001).unwrap();
        let y = traj.output(traj.len() - 1)[0];
        // ÿ(0) = 1; the ramp mass reacts instantly, so y⃛(0) = -m1 c d s̈(0) / det
        // with s̈(0) = -m2 c u / det.
        let (c, det) = (std::f64::consts::FRAC_1_SQRT_2, 4.5);
        let sdd = -c * 9.0 / det;
        let jerk = -4.0 * c * sdd / det;
        let taylor = 0.5 * 0.01 + jerk * 1e-3 / 6.0;
        assert!((y - taylor).abs() < 1e-5, "y(0.1) = {y}, oracle {taylor}");
        assert!((y - 0.005).abs() < 2e-4);
    }

    #[test]
    fn misaligned_steps_rejected() {
        let mut plant = integrator(0.0);
        let u = ControlSignal::constant(0.0, 0.04, 5, &[1.0], 20.0).unwrap();
        assert!(integrate_open_loop(&mut plant, &u, 0.2, 0.03).is_err());
        assert!(integrate_open_loop(&mut plant, &u, 0.4, 0.004).is_err());
    }

    #[test]
    fn blow_up_is_reported() {
        let sys = RelativeDegreeSystem::new(
            1,
            1,
            |q, f| f[0] = q[0] * q[0],
            |_, g| g[0] = 1.0,
            crate::systems::CausalOperator::identity(1),
        )
        .unwrap();
        let mut plant = NormalFormPlant::new(sys, 0.0, &[1.0], None).unwrap();
        let u = ControlSignal::constant(0.0, 0.01, 300, &[0.0], 1.0).unwrap();
        let traj = integrate_open_loop(&mut plant, &u, 3.0, 0.01).unwrap();
        assert!(matches!(traj.status, RunStatus::BlowUp { .. }));
    }

    #[test]
    fn control_signal_rules() {
        assert!(ControlSignal::new(0.0, 0.1, 1, vec![2.0], 1.0).is_err());
        assert!(ControlSignal::new(0.0, 0.0, 1, vec![0.5], 1.0).is_err());
        let c = ControlSignal::new(0.0, 0.1, 1, vec![0.1, 0.2, 0.3], 1.0).unwrap();
        assert_eq!(c.value_at(0.15), &[0.2]);
        assert_eq!(c.value_at(0.2), &[0.3]);
        assert_eq!(c.value_at(7.0), &[0.3]);
        let s = c.shifted(1, &[0.4]).unwrap();
        assert_eq!(s.values(), &[0.2, 0.3, 0.4]);
        assert!((s.t_start() - 0.1).abs() < 1e-15);
        let joined = ControlSignal::concat(&[c.head(1).unwrap(), s.head(2).unwrap()]).unwrap();
        assert_eq!(joined.values(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn projection_onto_ball() {
        let mut u = [3.0, 4.0];
        project_to_ball(&mut u, 1.0);
        assert!((norm(&u) - 1.0).abs() < 1e-15);
        let mut v = [-30.0];
        project_to_ball(&mut v, 20.0);
        assert_eq!(v, [-20.0]);
    }

    #[test]
    fn reference_jets() {
        let r = SinusoidalReference::cosine();
        let mut out = [0.0; 3];
        r.jet(0.0, 2, &mut out);
        assert_eq!(out, [1.0, 0.0, -1.0]);
        assert_eq!(r.derivative_sup(2), 1.0);
        let c = SinusoidalReference::constant(&[2.0]).unwrap();
        c.jet(5.0, 1, &mut out[..2]);
        assert_eq!(&out[..2], &[2.0, 0.0]);
    }
}
