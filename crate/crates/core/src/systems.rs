//! Plants of the form `y^{(r)} = f(T(χ(y))) + g(T(χ(y))) u` and state-space
//! plants `ẋ = f̃(x) + g̃(x) u, y = h(x)` behind one [`Plant`] interface.
//!
//! Three causal operators are provided: memoryless maps, fixed delays backed
//! by an interpolated history buffer, and finite-dimensional internal
//! dynamics integrated alongside the output jet. Operators can be stacked.
//! Local Lipschitz continuity of user maps is assumed, not checked.

use std::collections::VecDeque;
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use smallvec::SmallVec;

use crate::error::{invalid, Error, Result};

/// `x ↦ y` written into the output slice.
pub type VectorMap = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `(η, ξ) ↦ out`.
pub type InternalMap = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Output-jet history on `[t0 - σ, t0]`.
pub type HistoryFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;
/// `x ↦ (f, g)` of the highest-derivative equation.
pub type AffineMap = Arc<dyn Fn(&[f64], &mut [f64], &mut [f64]) + Send + Sync>;

pub(crate) type Buf = SmallVec<[f64; 16]>;

/// State norm beyond which a trajectory is declared to have escaped.
pub const BLOW_UP_THRESHOLD: f64 = 1e8;
/// Condition number beyond which `g` is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Common interface of simulated plants.
///
/// A plant owns its current time and state (and any history an operator
/// needs). Integrators query the vector field at trial states and then
/// commit the accepted step with [`Plant::advance`].
pub trait Plant: Clone + Send + Sync {
    /// Input and output dimension `m`.
    fn output_dim(&self) -> usize;
    fn relative_degree(&self) -> usize;
    fn time(&self) -> f64;
    fn state(&self) -> &[f64];
    /// Memory length `σ` of the plant's operator.
    fn memory(&self) -> f64 {
        0.0
    }
    fn vector_field(&self, t: f64, x: &[f64], u: &[f64], dx: &mut [f64]) -> Result<()>;
    /// `χ(y) = (y, ẏ, …, y^{(r-1)})` as a function of the state.
    fn output_jet(&self, x: &[f64], jet: &mut [f64]);
    /// `f` and row-major `g` with `y^{(r)} = f + g u` at `(t, x)`.
    fn affine_terms(&self, t: f64, x: &[f64], f: &mut [f64], g: &mut [f64]) -> Result<()>;
    fn advance(&mut self, t: f64, x: &[f64]);

    fn current_jet(&self) -> Vec<f64> {
        let mut jet = vec![0.0; self.output_dim() * self.relative_degree()];
        self.output_jet(self.state(), &mut jet);
        jet
    }
}

/// 2-norm condition number of a row-major `m × m` matrix.
pub fn condition_number(g: &[f64], m: usize) -> f64 {
    if m == 1 {
        return if g[0] != 0.0 && g[0].is_finite() {
            1.0
        } else {
            f64::INFINITY
        };
    }
    let mat = DMatrix::from_row_slice(m, m, g);
    let sv = mat.singular_values();
    let (max, min) = sv
        .iter()
        .fold((0.0f64, f64::INFINITY), |(a, b), s| (a.max(*s), b.min(*s)));
    if min == 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

fn check_gain(g: &[f64], m: usize) -> Result<()> {
    let fast_ok = if m == 1 {
        g[0] != 0.0 && g[0].is_finite()
    } else if m == 2 {
        let det = g[0] * g[3] - g[1] * g[2];
        let scale = (g[0].hypot(g[1])) * (g[2].hypot(g[3]));
        det.abs() > 1e-14 * scale
    } else {
        condition_number(g, m) < SINGULAR_CONDITION
    };
    if fast_ok {
        Ok(())
    } else {
        Err(Error::SingularGain {
            condition: condition_number(g, m),
        })
    }
}

/// Solve `g u = rhs` for a row-major `m × m` gain.
pub fn solve_gain(g: &[f64], m: usize, rhs: &[f64], u: &mut [f64]) -> Result<()> {
    if m == 1 {
        check_gain(g, 1)?;
        u[0] = rhs[0] / g[0];
        return Ok(());
    }
    let condition = condition_number(g, m);
    if condition > SINGULAR_CONDITION {
        return Err(Error::SingularGain { condition });
    }
    let mat = DMatrix::from_row_slice(m, m, g);
    let sol = mat
        .lu()
        .solve(&nalgebra::DVector::from_column_slice(rhs))
        .ok_or(Error::SingularGain { condition })?;
    u.copy_from_slice(sol.as_slice());
    Ok(())
}

/// Sampled output-jet history for delay operators.
#[derive(Clone)]
pub struct JetHistory {
    dim: usize,
    tau: f64,
    t0: f64,
    initial: Option<HistoryFn>,
    times: VecDeque<f64>,
    values: VecDeque<f64>,
}

impl fmt::Debug for JetHistory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JetHistory")
            .field("dim", &self.dim)
            .field("t0", &self.t0)
            .field("samples", &self.times.len())
            .finish()
    }
}

impl JetHistory {
    fn new(tau: f64) -> Self {
        Self {
            dim: 0,
            tau,
            t0: f64::NAN,
            initial: None,
            times: VecDeque::new(),
            values: VecDeque::new(),
        }
    }

    fn start(&mut self, t0: f64, dim: usize, initial: HistoryFn) {
        self.dim = dim;
        self.t0 = t0;
        self.times.clear();
        self.values.clear();
        let mut buf: Buf = SmallVec::from_elem(0.0, dim);
        initial(t0, &mut buf);
        self.times.push_back(t0);
        self.values.extend(buf.iter().copied());
        self.initial = Some(initial);
    }

    fn record(&mut self, t: f64, jet: &[f64]) {
        // On the first step the spacing becomes known: seed the stencil with
        // initial-segment samples before t0.
        if self.times.len() == 1 {
            let h = t - self.t0;
            if let Some(initial) = &self.initial {
                let mut buf: Buf = SmallVec::from_elem(0.0, self.dim);
                for k in 1..=2 {
                    let s = self.t0 - k as f64 * h;
                    if s < self.t0 - self.tau - 1e-12 {
                        break;
                    }
                    initial(s, &mut buf);
                    self.times.push_front(s);
                    for v in buf.iter().rev() {
                        self.values.push_front(*v);
                    }
                }
            }
        }
        self.times.push_back(t);
        self.values.extend(jet.iter().copied());
        while self.times.len() > 5 && self.times[2] < t - self.tau {
            self.times.pop_front();
            for _ in 0..self.dim {
                self.values.pop_front();
            }
        }
    }

    fn query(&self, s: f64, out: &mut [f64]) -> Result<()> {
        let initial = self.initial.as_ref().ok_or(Error::HistoryNotCovered {
            time: s,
            available_from: f64::NAN,
        })?;
        let eps = 1e-12 * (1.0 + s.abs());
        if s < self.t0 - self.tau - eps {
            return Err(Error::HistoryNotCovered {
                time: s,
                available_from: self.t0 - self.tau,
            });
        }
        if s <= self.t0 + eps {
            initial(s.min(self.t0), out);
            return Ok(());
        }
        let last = *self.times.back().expect("history started");
        if s > last + eps {
            return Err(Error::PreconditionViolation(format!(
                "delayed value at {s} requested before it was recorded (latest {last})"
            )));
        }
        let n = self.times.len();
        let j = self.times.partition_point(|&t| t <= s).saturating_sub(1);
        let width = n.min(4);
        let start = j.saturating_sub(1).min(n - width);
        let nodes: SmallVec<[f64; 4]> = (start..start + width).map(|i| self.times[i]).collect();
        out.iter_mut().for_each(|o| *o = 0.0);
        for (a, &ta) in nodes.iter().enumerate() {
            let mut w = 1.0;
            for (b, &tb) in nodes.iter().enumerate() {
                if a != b {
                    w *= (s - tb) / (ta - tb);
                }
            }
            let base = (start + a) * self.dim;
            for (c, o) in out.iter_mut().enumerate() {
                *o += w * self.values[base + c];
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Causal operator `T` mapping the output-jet history to `R^q`.
#[derive(Clone)]
pub enum CausalOperator {
    /// `T(ξ)(t) = map(ξ(t))`.
    Static { q: usize, map: VectorMap },
    /// `T(ξ)(t) = map(ξ(t - τ))`.
    Delay {
        q: usize,
        tau: f64,
        map: VectorMap,
        history: JetHistory,
    },
    /// `T(ξ)(t) = readout(η(t), ξ(t))` with `η̇ = drift(η, ξ)`, `η(t0) = η0`.
    Internal {
        q: usize,
        drift: InternalMap,
        readout: InternalMap,
        eta0: Vec<f64>,
    },
    /// Outputs of several operators concatenated.
    Stack(Vec<CausalOperator>),
}

impl fmt::Debug for CausalOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Static { q, .. } => write!(f, "Static(q={q})"),
            Self::Delay { q, tau, .. } => write!(f, "Delay(q={q}, tau={tau})"),
            Self::Internal { q, eta0, .. } => write!(f, "Internal(q={q}, eta_dim={})", eta0.len()),
            Self::Stack(ops) => f.debug_list().entries(ops).finish(),
        }
    }
}

impl CausalOperator {
    pub fn static_map<F>(q: usize, map: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self::Static {
            q,
            map: Arc::new(map),
        }
    }

    /// Identity on the output jet.
    pub fn identity(dim: usize) -> Self {
        Self::static_map(dim, |xi, out| out.copy_from_slice(xi))
    }

    pub fn delay<F>(tau: f64, q: usize, map: F) -> Result<Self>
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(invalid(format!("delay {tau} must be positive")));
        }
        Ok(Self::Delay {
            q,
            tau,
            map: Arc::new(map),
            history: JetHistory::new(tau),
        })
    }

    pub fn internal_dynamics<D, R>(q: usize, eta0: Vec<f64>, drift: D, readout: R) -> Result<Self>
    where
        D: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        R: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        if eta0.is_empty() {
            return Err(invalid("internal dynamics need a positive dimension"));
        }
        Ok(Self::Internal {
            q,
            drift: Arc::new(drift),
            readout: Arc::new(readout),
            eta0,
        })
    }

    pub fn stack(ops: Vec<CausalOperator>) -> Self {
        Self::Stack(ops)
    }

    pub fn q(&self) -> usize {
        match self {
            Self::Static { q, .. } | Self::Delay { q, .. } | Self::Internal { q, .. } => *q,
            Self::Stack(ops) => ops.iter().map(Self::q).sum(),
        }
    }

    /// Memory length `σ`.
    pub fn sigma(&self) -> f64 {
        match self {
            Self::Delay { tau, .. } => *tau,
            Self::Stack(ops) => ops.iter().map(Self::sigma).fold(0.0, f64::max),
            _ => 0.0,
        }
    }

    pub fn eta_dim(&self) -> usize {
        match self {
            Self::Internal { eta0, .. } => eta0.len(),
            Self::Stack(ops) => ops.iter().map(Self::eta_dim).sum(),
            _ => 0,
        }
    }

    pub fn eta0(&self) -> Vec<f64> {
        match self {
            Self::Internal { eta0, .. } => eta0.clone(),
            Self::Stack(ops) => ops.iter().flat_map(Self::eta0).collect(),
            _ => Vec::new(),
        }
    }

    /// Attach the initial jet segment used for `t ≤ t0`.
    pub fn start(&mut self, t0: f64, jet_dim: usize, initial: &HistoryFn) {
        match self {
            Self::Delay { history, .. } => history.start(t0, jet_dim, initial.clone()),
            Self::Stack(ops) => ops.iter_mut().for_each(|op| op.start(t0, jet_dim, initial)),
            _ => {}
        }
    }

    /// Record the jet reached at time `t`.
    pub fn record(&mut self, t: f64, xi: &[f64]) {
        match self {
            Self::Delay { history, .. } => history.record(t, xi),
            Self::Stack(ops) => ops.iter_mut().for_each(|op| op.record(t, xi)),
            _ => {}
        }
    }

    /// `T(ξ)(t)` given the current jet and internal state.
    pub fn evaluate(&self, t: f64, xi: &[f64], eta: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            Self::Static { map, .. } => {
                map(xi, out);
                Ok(())
            }
            Self::Delay {
                tau, map, history, ..
            } => {
                let mut delayed: Buf = SmallVec::from_elem(0.0, xi.len());
                history.query(t - tau, &mut delayed)?;
                map(&delayed, out);
                Ok(())
            }
            Self::Internal { readout, .. } => {
                readout(eta, xi, out);
                Ok(())
            }
            Self::Stack(ops) => {
                let (mut qo, mut eo) = (0, 0);
                for op in ops {
                    let (q, e) = (op.q(), op.eta_dim());
                    op.evaluate(t, xi, &eta[eo..eo + e], &mut out[qo..qo + q])?;
                    qo += q;
                    eo += e;
                }
                Ok(())
            }
        }
    }

    /// `η̇` of all internal dynamics.
    pub fn eta_rate(&self, xi: &[f64], eta: &[f64], out: &mut [f64]) {
        match self {
            Self::Internal { drift, .. } => drift(eta, xi, out),
            Self::Stack(ops) => {
                let mut eo = 0;
                for op in ops {
                    let e = op.eta_dim();
                    op.eta_rate(xi, &eta[eo..eo + e], &mut out[eo..eo + e]);
                    eo += e;
                }
            }
            _ => {}
        }
    }

    /// Evaluate `T(ξ)` along a given signal on the grid `t0, t0 + h, …, t_end`.
    ///
    /// `signal(t, out)` supplies `ξ(t)` for every `t ≥ t0 - σ`; internal
    /// dynamics are integrated with classical RK4.
    pub fn apply_to_signal(
        &self,
        signal: &dyn Fn(f64, &mut [f64]),
        dim: usize,
        t0: f64,
        t_end: f64,
        h: f64,
    ) -> Result<Vec<(f64, Vec<f64>)>> {
        if !(h > 0.0) || !(t_end >= t0) {
            return Err(invalid("need h > 0 and t_end >= t0"));
        }
        let sigma = self.sigma();
        if sigma > 0.0 && h > sigma {
            return Err(invalid("step must not exceed the delay"));
        }
        let mut op = self.clone();
        let sig: Arc<dyn Fn(f64, &mut [f64]) + Send + Sync> = {
            // Sample the initial segment once so the history owns its data.
            let n = ((sigma / h).ceil() as usize).max(1) * 8;
            let samples: Vec<(f64, Vec<f64>)> = (0..=n)
                .map(|k| {
                    let s = t0 - sigma + sigma * k as f64 / n as f64;
                    let mut v = vec![0.0; dim];
                    signal(s, &mut v);
                    (s, v)
                })
                .collect();
            Arc::new(move |s: f64, out: &mut [f64]| {
                let idx = samples
                    .partition_point(|(ts, _)| *ts <= s)
                    .saturating_sub(1)
                    .min(samples.len().saturating_sub(2));
                if samples.len() == 1 {
                    out.copy_from_slice(&samples[0].1);
                    return;
                }
                let (ta, va) = &samples[idx];
                let (tb, vb) = &samples[idx + 1];
                let w = if tb > ta { (s - ta) / (tb - ta) } else { 0.0 };
                for c in 0..out.len() {
                    out[c] = va[c] + w * (vb[c] - va[c]);
                }
            })
        };
        op.start(t0, dim, &sig);
        let ne = op.eta_dim();
        let mut eta = op.eta0();
        let steps = ((t_end - t0) / h).round() as usize;
        let mut out = Vec::with_capacity(steps + 1);
        let (mut xi, mut q) = (vec![0.0; dim], vec![0.0; op.q()]);
        let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (
            vec![0.0; ne],
            vec![0.0; ne],
            vec![0.0; ne],
            vec![0.0; ne],
            vec![0.0; ne],
        );
        for n in 0..=steps {
            let t = t0 + n as f64 * h;
            signal(t, &mut xi);
            op.evaluate(t, &xi, &eta, &mut q)?;
            out.push((t, q.clone()));
            if n == steps {
                break;
            }
            if ne > 0 {
                let mut xs = vec![0.0; dim];
                op.eta_rate(&xi, &eta, &mut k1);
                signal(t + 0.5 * h, &mut xs);
                for i in 0..ne {
                    tmp[i] = eta[i] + 0.5 * h * k1[i];
                }
                op.eta_rate(&xs, &tmp, &mut k2);
                for i in 0..ne {
                    tmp[i] = eta[i] + 0.5 * h * k2[i];
                }
                op.eta_rate(&xs, &tmp, &mut k3);
                signal(t + h, &mut xs);
                for i in 0..ne {
                    tmp[i] = eta[i] + h * k3[i];
                }
                op.eta_rate(&xs, &tmp, &mut k4);
                for i in 0..ne {
                    eta[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
                let size: f64 = eta.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !size.is_finite() || size > BLOW_UP_THRESHOLD {
                    return Err(Error::DivergedInternalDynamics { time: t + h });
                }
            }
            signal(t + h, &mut xi);
            op.record(t + h, &xi);
        }
        Ok(out)
    }
}

/// `(f, g, T)` with `f: R^q → R^m`, `g: R^q → R^{m×m}` (row-major).
#[derive(Clone)]
pub struct RelativeDegreeSystem {
    pub m: usize,
    pub r: usize,
    pub f: VectorMap,
    pub g: VectorMap,
    pub operator: CausalOperator,
}

impl fmt::Debug for RelativeDegreeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RelativeDegreeSystem")
            .field("m", &self.m)
            .field("r", &self.r)
            .field("operator", &self.operator)
            .finish()
    }
}

impl RelativeDegreeSystem {
    pub fn new<F, G>(m: usize, r: usize, f: F, g: G, operator: CausalOperator) -> Result<Self>
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        if m == 0 || r == 0 {
            return Err(invalid("m and r must be positive"));
        }
        Ok(Self {
            m,
            r,
            f: Arc::new(f),
            g: Arc::new(g),
            operator,
        })
    }

    /// `y^{(r)} = u`: chain of integrators with a static identity operator.
    pub fn integrator_chain(m: usize, r: usize) -> Result<Self> {
        Self::new(
            m,
            r,
            |_, f| f.iter_mut().for_each(|v| *v = 0.0),
            move |_, g| {
                let m = (g.len() as f64).sqrt() as usize;
                g.iter_mut()
                    .enumerate()
                    .for_each(|(i, v)| *v = if i % (m + 1) == 0 { 1.0 } else { 0.0 })
            },
            CausalOperator::identity(r * m),
        )
    }
}

/// A [`RelativeDegreeSystem`] in motion: state `x = (χ(y), η)`.
#[derive(Debug, Clone)]
pub struct NormalFormPlant {
    system: RelativeDegreeSystem,
    t: f64,
    x: Vec<f64>,
}

impl NormalFormPlant {
    /// Start at `t0` with jet `χ(y)(t0)`. `history` gives the jet on
    /// `[t0 - σ, t0]`; without it the jet is held constant there.
    pub fn new(
        system: RelativeDegreeSystem,
        t0: f64,
        jet0: &[f64],
        history: Option<HistoryFn>,
    ) -> Result<Self> {
        let rm = system.r * system.m;
        if jet0.len() != rm {
            return Err(invalid(format!(
                "initial jet needs {rm} entries, got {}",
                jet0.len()
            )));
        }
        let mut system = system;
        let hist: HistoryFn = history.unwrap_or_else(|| {
            let j = jet0.to_vec();
            Arc::new(move |_, out: &mut [f64]| out.copy_from_slice(&j))
        });
        system.operator.start(t0, rm, &hist);
        let mut x = jet0.to_vec();
        x.extend(system.operator.eta0());
        Ok(Self { system, t: t0, x })
    }

    pub fn system(&self) -> &RelativeDegreeSystem {
        &self.system
    }

    /// Internal state `η`.
    pub fn internal_state(&self) -> &[f64] {
        &self.x[self.system.r * self.system.m..]
    }

    /// Current `T(χ(y))(t)`.
    pub fn operator_output(&self) -> Result<Vec<f64>> {
        let rm = self.system.r * self.system.m;
        let mut q = vec![0.0; self.system.operator.q()];
        self.system
            .operator
            .evaluate(self.t, &self.x[..rm], &self.x[rm..], &mut q)?;
        Ok(q)
    }

    fn terms(&self, t: f64, x: &[f64], f: &mut [f64], g: &mut [f64]) -> Result<()> {
        let rm = self.system.r * self.system.m;
        let mut q: Buf = SmallVec::from_elem(0.0, self.system.operator.q());
        self.system
            .operator
            .evaluate(t, &x[..rm], &x[rm..], &mut q)?;
        (self.system.f)(&q, f);
        (self.system.g)(&q, g);
        Ok(())
    }
}

impl Plant for NormalFormPlant {
    fn output_dim(&self) -> usize {
        self.system.m
    }

    fn relative_degree(&self) -> usize {
        self.system.r
    }

    fn time(&self) -> f64 {
        self.t
    }

    fn state(&self) -> &[f64] {
        &self.x
    }

    fn memory(&self) -> f64 {
        self.system.operator.sigma()
    }

    fn vector_field(&self, t: f64, x: &[f64], u: &[f64], dx: &mut [f64]) -> Result<()> {
        let (m, r) = (self.system.m, self.system.r);
        let rm = r * m;
        let mut f: Buf = SmallVec::from_elem(0.0, m);
        let mut g: Buf = SmallVec::from_elem(0.0, m * m);
        self.terms(t, x, &mut f, &mut g)?;
        check_gain(&g, m)?;
        dx[..rm - m].copy_from_slice(&x[m..rm]);
        for i in 0..m {
            let mut acc = f[i];
            for j in 0..m {
                acc += g[i * m + j] * u[j];
            }
            dx[rm - m + i] = acc;
        }
        if x.len() > rm {
            self.system
                .operator
                .eta_rate(&x[..rm], &x[rm..], &mut dx[rm..]);
        }
        Ok(())
    }

    fn output_jet(&self, x: &[f64], jet: &mut [f64]) {
        let rm = self.system.r * self.system.m;
        jet.copy_from_slice(&x[..rm]);
    }

    fn affine_terms(&self, t: f64, x: &[f64], f: &mut [f64], g: &mut [f64]) -> Result<()> {
        self.terms(t, x, f, g)
    }

    fn advance(&mut self, t: f64, x: &[f64]) {
        self.t = t;
        self.x.copy_from_slice(x);
        let rm = self.system.r * self.system.m;
        self.system.operator.record(t, &x[..rm]);
    }
}

/// `ẋ = f̃(x) + g̃(x) u` with the output jet given as a function of `x`.
#[derive(Clone)]
pub struct StateSpacePlant {
    n: usize,
    m: usize,
    r: usize,
    drift: VectorMap,
    /// Row-major `n × m`.
    input_map: VectorMap,
    output_jet: VectorMap,
    affine: Option<AffineMap>,
    t: f64,
    x: Vec<f64>,
}

impl fmt::Debug for StateSpacePlant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StateSpacePlant")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("r", &self.r)
            .field("t", &self.t)
            .field("x", &self.x)
            .finish()
    }
}

impl StateSpacePlant {
    #[allow(clippy::too_many_arguments)]
    pub fn new<D, G, H>(
        n: usize,
        m: usize,
        r: usize,
        drift: D,
        input_map: G,
        output_jet: H,
        t0: f64,
        x0: Vec<f64>,
    ) -> Result<Self>
    where
        D: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        H: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        if n == 0 || m == 0 || r == 0 {
            return Err(invalid("dimensions must be positive"));
        }
        if x0.len() != n {
            return Err(invalid(format!(
                "initial state needs {n} entries, got {}",
                x0.len()
            )));
        }
        Ok(Self {
            n,
            m,
            r,
            drift: Arc::new(drift),
            input_map: Arc::new(input_map),
            output_jet: Arc::new(output_jet),
            affine: None,
            t: t0,
            x: x0,
        })
    }

    /// Supply `f`, `g` of `y^{(r)} = f + g u` in closed form instead of
    /// differentiating the jet numerically.
    pub fn with_affine_terms<A>(mut self, affine: A) -> Self
    where
        A: Fn(&[f64], &mut [f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.affine = Some(Arc::new(affine));
        self
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn output(&self, x: &[f64]) -> Vec<f64> {
        let mut jet = vec![0.0; self.r * self.m];
        (self.output_jet)(x, &mut jet);
        jet.truncate(self.m);
        jet
    }

    /// Directional derivative of the jet along `v` at `x`.
    fn jet_derivative(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let scale = x.iter().chain(v).fold(1.0f64, |a, b| a.max(b.abs()));
        let vnorm = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if vnorm == 0.0 {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        let eps = 1e-6 * scale / vnorm;
        let rm = self.r * self.m;
        let (mut xp, mut xm): (Buf, Buf) =
            (x.iter().copied().collect(), x.iter().copied().collect());
        for i in 0..self.n {
            xp[i] += eps * v[i];
            xm[i] -= eps * v[i];
        }
        let (mut jp, mut jm): (Buf, Buf) =
            (SmallVec::from_elem(0.0, rm), SmallVec::from_elem(0.0, rm));
        (self.output_jet)(&xp, &mut jp);
        (self.output_jet)(&xm, &mut jm);
        for i in 0..rm {
            out[i] = (jp[i] - jm[i]) / (2.0 * eps);
        }
    }

    /// Largest violation of `d/dt y^{(i)} = y^{(i+1)}` (i < r-1) and of
    /// input independence of those derivatives, by central differences.
    pub fn jet_consistency_residual(&self, x: &[f64]) -> f64 {
        let (n, m, r) = (self.n, self.m, self.r);
        let rm = r * m;
        let mut f = vec![0.0; n];
        let mut g = vec![0.0; n * m];
        (self.drift)(x, &mut f);
        (self.input_map)(x, &mut g);
        let mut jet = vec![0.0; rm];
        (self.output_jet)(x, &mut jet);
        let mut d = vec![0.0; rm];
        self.jet_derivative(x, &f, &mut d);
        let mut worst: f64 = 0.0;
        for i in 0..(r - 1) * m {
            worst = worst.max((d[i] - jet[i + m]).abs());
        }
        for j in 0..m {
            let col: Vec<f64> = (0..n).map(|i| g[i * m + j]).collect();
            self.jet_derivative(x, &col, &mut d);
            for v in &d[..(r - 1) * m] {
                worst = worst.max(v.abs());
            }
        }
        worst
    }
}

impl Plant for StateSpacePlant {
    fn output_dim(&self) -> usize {
        self.m
    }

    fn relative_degree(&self) -> usize {
        self.r
    }

    fn time(&self) -> f64 {
        self.t
    }

    fn state(&self) -> &[f64] {
        &self.x
    }

    fn vector_field(&self, _t: f64, x: &[f64], u: &[f64], dx: &mut [f64]) -> Result<()> {
        (self.drift)(x, dx);
        let mut g: Buf = SmallVec::from_elem(0.0, self.n * self.m);
        (self.input_map)(x, &mut g);
        for i in 0..self.n {
            for j in 0..self.m {
                dx[i] += g[i * self.m + j] * u[j];
            }
        }
        Ok(())
    }

    fn output_jet(&self, x: &[f64], jet: &mut [f64]) {
        (self.output_jet)(x, jet);
    }

    fn affine_terms(&self, _t: f64, x: &[f64], f: &mut [f64], g: &mut [f64]) -> Result<()> {
        if let Some(affine) = &self.affine {
            affine(x, f, g);
            return Ok(());
        }
        let (n, m, r) = (self.n, self.m, self.r);
        let rm = r * m;
        let mut drift = vec![0.0; n];
        (self.drift)(x, &mut drift);
        let mut d = vec![0.0; rm];
        self.jet_derivative(x, &drift, &mut d);
        f.copy_from_slice(&d[rm - m..]);
        let mut gt = vec![0.0; n * m];
        (self.input_map)(x, &mut gt);
        for j in 0..m {
            let col: Vec<f64> = (0..n).map(|i| gt[i * m + j]).collect();
            self.jet_derivative(x, &col, &mut d);
            for i in 0..m {
                g[i * m + j] = d[rm - m + i];
            }
        }
        Ok(())
    }

    fn advance(&mut self, t: f64, x: &[f64]) {
        self.t = t;
        self.x.copy_from_slice(x);
    }
}

/// `y^{(r)}(t) = f(T(χ(y))(t)) + g(T(χ(y))(t)) u` at the plant's current state.
pub fn rhs_highest_derivative<P: Plant>(plant: &P, u: &[f64]) -> Result<Vec<f64>> {
    let m = plant.output_dim();
    if u.len() != m {
        return Err(invalid(format!("input needs {m} entries, got {}", u.len())));
    }
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; m * m];
    plant.affine_terms(plant.time(), plant.state(), &mut f, &mut g)?;
    let condition = condition_number(&g, m);
    if condition > SINGULAR_CONDITION {
        return Err(Error::SingularGain { condition });
    }
    Ok((0..m)
        .map(|i| f[i] + (0..m).map(|j| g[i * m + j] * u[j]).sum::<f64>())
        .collect())
}

/// Car with an inclined ramp carrying a spring-damper coupled mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassOnCarParams {
    pub m1: f64,
    pub m2: f64,
    pub k: f64,
    pub d: f64,
    /// Ramp angle in `[0, π/2)`.
    pub vartheta: f64,
}

impl Default for MassOnCarParams {
    fn default() -> Self {
        Self {
            m1: 4.0,
            m2: 1.0,
            k: 2.0,
            d: 1.0,
            vartheta: std::f64::consts::FRAC_PI_4,
        }
    }
}

impl MassOnCarParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.m1, self.m2, self.k, self.d]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        if !positive {
            return Err(invalid(
                "masses, spring constant and damping must be positive",
            ));
        }
        if !(0.0..FRAC_PI_2).contains(&self.vartheta) {
            return Err(invalid(format!(
                "ramp angle {} outside [0, pi/2)",
                self.vartheta
            )));
        }
        Ok(())
    }

    fn det(&self) -> f64 {
        let s = self.vartheta.sin();
        self.m2 * (self.m1 + self.m2 * s * s)
    }

    /// `∂ÿ/∂u = sin²ϑ / (m1 + m2 sin²ϑ)`.
    pub fn high_gain(&self) -> f64 {
        let s2 = self.vartheta.sin().powi(2);
        s2 / (self.m1 + self.m2 * s2)
    }

    /// `ÿ` at zero input as a function of `(s, ṡ)`.
    pub fn drift_term(&self, s: f64, sdot: f64) -> f64 {
        -self.m1 * self.vartheta.cos() * (self.k * s + self.d * sdot) / self.det()
    }

    /// `(z̈, s̈)` for state `(z, s, ż, ṡ)` and force `u`.
    pub fn accelerations(&self, x: &[f64], u: f64) -> (f64, f64) {
        let c = self.vartheta.cos();
        let spring = self.k * x[1] + self.d * x[3];
        let det = self.det();
        let zdd = (self.m2 * u + self.m2 * c * spring) / det;
        let sdd = (-self.m2 * c * u - (self.m1 + self.m2) * spring) / det;
        (zdd, sdd)
    }

    /// `(1/2) q̇ᵀ M q̇ + (k/2) s²`.
    pub fn energy(&self, x: &[f64]) -> f64 {
        let c = self.vartheta.cos();
        let (zd, sd) = (x[2], x[3]);
        0.5 * ((self.m1 + self.m2) * zd * zd + 2.0 * self.m2 * c * zd * sd + self.m2 * sd * sd)
            + 0.5 * self.k * x[1] * x[1]
    }

    /// Output jet `(y, ẏ)` and internal state `(s, m2 cosϑ ż + m2 ṡ)`.
    pub fn normal_form_coordinates(&self, x: &[f64]) -> ([f64; 2], [f64; 2]) {
        let c = self.vartheta.cos();
        (
            [x[0] + x[1] * c, x[2] + x[3] * c],
            [x[1], self.m2 * c * x[2] + self.m2 * x[3]],
        )
    }
}

/// Four-state model `x = (z, s, ż, ṡ)` with output `y = z + s cosϑ`.
pub fn mass_on_car_state_space(
    params: MassOnCarParams,
    t0: f64,
    x0: Vec<f64>,
) -> Result<StateSpacePlant> {
    params.validate()?;
    let c = params.vartheta.cos();
    let p = params;
    let plant = StateSpacePlant::new(
        4,
        1,
        2,
        move |x, dx| {
            let (zdd, sdd) = p.accelerations(x, 0.0);
            dx[0] = x[2];
            dx[1] = x[3];
            dx[2] = zdd;
            dx[3] = sdd;
        },
        move |_, g| {
            let det = p.det();
            g[0] = 0.0;
            g[1] = 0.0;
            g[2] = p.m2 / det;
            g[3] = -p.m2 * c / det;
        },
        move |x, jet| {
            jet[0] = x[0] + x[1] * c;
            jet[1] = x[2] + x[3] * c;
        },
        t0,
        x0,
    )?;
    Ok(plant.with_affine_terms(move |x, f, g| {
        f[0] = p.drift_term(x[1], x[3]);
        g[0] = p.high_gain();
    }))
}

/// The same plant as a relative-degree-two system: jet `(y, ẏ)`, internal
/// state `η = (s, w)` with `w = m2 cosϑ ż + m2 ṡ`, so that
/// `ṡ = (w - m2 cosϑ ẏ) / (m2 sin²ϑ)` and `ẇ = -k s - d ṡ` are driven by
/// the output jet alone.
pub fn mass_on_car_normal_form(
    params: MassOnCarParams,
    t0: f64,
    x0: &[f64],
) -> Result<NormalFormPlant> {
    params.validate()?;
    if x0.len() != 4 {
        return Err(invalid("mass-on-car state has four entries"));
    }
    let s2 = params.vartheta.sin().powi(2);
    if s2 == 0.0 {
        return Err(Error::SingularGain {
            condition: f64::INFINITY,
        });
    }
    let c = params.vartheta.cos();
    let p = params;
    let sdot = move |eta: &[f64], xi: &[f64]| (eta[1] - p.m2 * c * xi[1]) / (p.m2 * s2);
    let (jet0, eta0) = params.normal_form_coordinates(x0);
    let operator = CausalOperator::internal_dynamics(
        2,
        eta0.to_vec(),
        move |eta, xi, out| {
            let sd = sdot(eta, xi);
            out[0] = sd;
            out[1] = -p.k * eta[0] - p.d * sd;
        },
        move |eta, xi, out| {
            out[0] = eta[0];
            out[1] = sdot(eta, xi);
        },
    )?;
    let gain = params.high_gain();
    let system = RelativeDegreeSystem::new(
        1,
        2,
        move |q, f| f[0] = p.drift_term(q[0], q[1]),
        move |_, g| g[0] = gain,
        operator,
    )?;
    NormalFormPlant::new(system, t0, &jet0, None)
}

/// Second-order oscillator with delayed restoring force and a stable
/// filter state: `ÿ = -y(t-τ)/2 - ẏ/5 + 0.3 sin η + (1 + 0.5/(1 + y(t-τ)²)) u`
/// with `η̇ = -η + y`, `η(t0) = 0`. The jet is held at `jet0` before `t0`
/// unless a history is supplied.
pub fn delay_oscillator(
    tau: f64,
    t0: f64,
    jet0: &[f64],
    history: Option<HistoryFn>,
) -> Result<NormalFormPlant> {
    let operator = CausalOperator::stack(vec![
        CausalOperator::identity(2),
        CausalOperator::delay(tau, 1, |xi, out| out[0] = xi[0])?,
        CausalOperator::internal_dynamics(
            1,
            vec![0.0],
            |eta, xi, out| out[0] = -eta[0] + xi[0],
            |eta, _, out| out[0] = eta[0],
        )?,
    ]);
    let system = RelativeDegreeSystem::new(
        1,
        2,
        |q, f| f[0] = -0.5 * q[2] - 0.2 * q[1] + 0.3 * q[3].sin(),
        |q, g| g[0] = 1.0 + 0.5 / (1.0 + q[2] * q[2]),
        operator,
    )?;
    NormalFormPlant::new(system, t0, jet0, history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mass_on_car_equilibrium() {
        let plant = mass_on_car_state_space(MassOnCarParams::default(), 0.0, vec![0.0; 4]).unwrap();
        let mut dx = [1.0; 4];
        plant.vector_field(0.0, &[0.0; 4], &[0.0], &mut dx).unwrap();
        assert_eq!(dx, [0.0; 4]);
    }

    #[test]
    fn mass_on_car_high_gain_and_drift() {
        let p = MassOnCarParams::default();
        assert!((p.high_gain() - 1.0 / 9.0).abs() < 1e-15);
        let expected = -4.0 * (0.5f64).sqrt() * 2.0 / 4.5;
        assert!((p.drift_term(1.0, 0.0) - expected).abs() < 1e-14);
        assert!((expected + 1.2571).abs() < 1e-4);
    }

    #[test]
    fn analytic_and_numeric_affine_terms_agree() {
        let p = MassOnCarParams::default();
        let analytic = mass_on_car_state_space(p, 0.0, vec![0.0; 4]).unwrap();
        let mut numeric = analytic.clone();
        numeric.affine = None;
        let x = [0.3, -0.7, 1.1, 0.4];
        let (mut fa, mut ga, mut fn_, mut gn) = ([0.0], [0.0], [0.0], [0.0]);
        analytic.affine_terms(0.0, &x, &mut fa, &mut ga).unwrap();
        numeric.affine_terms(0.0, &x, &mut fn_, &mut gn).unwrap();
        assert!((fa[0] - fn_[0]).abs() < 1e-8);
        assert!((ga[0] - gn[0]).abs() < 1e-8);
        assert!(analytic.jet_consistency_residual(&x) < 1e-8);
    }

    #[test]
    fn rhs_examples() {
        let plant = mass_on_car_normal_form(MassOnCarParams::default(), 0.0, &[0.0; 4]).unwrap();
        let acc = rhs_highest_derivative(&plant, &[9.0]).unwrap();
        assert!((acc[0] - 1.0).abs() < 1e-14);
        assert_eq!(rhs_highest_derivative(&plant, &[0.0]).unwrap(), vec![0.0]);

        let sys = RelativeDegreeSystem::integrator_chain(2, 1).unwrap();
        let chain = NormalFormPlant::new(sys, 0.0, &[0.5, -0.5], None).unwrap();
        assert_eq!(
            rhs_highest_derivative(&chain, &[3.0, -2.0]).unwrap(),
            vec![3.0, -2.0]
        );
    }

    #[test]
    fn singular_gain_detected() {
        let sys = RelativeDegreeSystem::new(
            1,
            1,
            |_, f| f[0] = 0.0,
            |_, g| g[0] = 0.0,
            CausalOperator::identity(1),
        )
        .unwrap();
        let plant = NormalFormPlant::new(sys, 0.0, &[0.0], None).unwrap();
        assert!(matches!(
            rhs_highest_derivative(&plant, &[1.0]),
            Err(Error::SingularGain { .. })
        ));
        let mut dx = [0.0];
        assert!(plant.vector_field(0.0, &[0.0], &[1.0], &mut dx).is_err());
    }

    #[test]
    fn zero_angle_has_no_normal_form() {
        let p = MassOnCarParams {
            vartheta: 0.0,
            ..Default::default()
        };
        assert!(mass_on_car_normal_form(p, 0.0, &[0.0; 4]).is_err());
        assert!(MassOnCarParams {
            m1: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn static_operator_examples() {
        let id = CausalOperator::identity(2);
        let mut out = [0.0; 2];
        id.evaluate(0.0, &[1.0, 2.0], &[], &mut out).unwrap();
        assert_eq!(out, [1.0, 2.0]);
        let proj = CausalOperator::static_map(1, |xi, out| out[0] = xi[0]);
        let mut y = [0.0];
        proj.evaluate(0.0, &[3.0, 4.0], &[], &mut y).unwrap();
        assert_eq!(y, [3.0]);
    }

    #[test]
    fn delay_shifts_signal() {
        let op = CausalOperator::delay(0.5, 1, |xi, out| out[0] = xi[0]).unwrap();
        let run = op
            .apply_to_signal(&|t, out| out[0] = t, 1, 0.0, 2.0, 0.01)
            .unwrap();
        let (t, v) = run.last().unwrap();
        assert!((t - 2.0).abs() < 1e-12);
        assert!((v[0] - 1.5).abs() < 1e-12);

        let constant = op
            .apply_to_signal(&|_, out| out[0] = 3.0, 1, 0.0, 3.0, 0.1)
            .unwrap();
        assert!(constant.iter().all(|(_, v)| (v[0] - 3.0).abs() < 1e-12));
    }

    #[test]
    fn delay_rejects_uncovered_history() {
        let mut op = CausalOperator::delay(1.0, 1, |xi, out| out[0] = xi[0]).unwrap();
        let hist: HistoryFn = Arc::new(|_, out: &mut [f64]| out[0] = 0.0);
        op.start(0.0, 1, &hist);
        let mut out = [0.0];
        // t - τ = -1.5 lies before the supplied segment
        assert!(matches!(
            op.evaluate(-0.5, &[0.0], &[], &mut out),
            Err(Error::HistoryNotCovered { .. })
        ));
        // future values are not available
        assert!(op.evaluate(1.5, &[0.0], &[], &mut out).is_err());
        assert!(CausalOperator::delay(0.0, 1, |_, _| {}).is_err());
    }

    #[test]
    fn internal_dynamics_closed_form() {
        let op = CausalOperator::internal_dynamics(
            2,
            vec![1.0],
            |eta, xi, out| out[0] = -eta[0] + xi[0],
            |eta, xi, out| {
                out[0] = xi[0];
                out[1] = eta[0];
            },
        )
        .unwrap();
        let run = op
            .apply_to_signal(&|_, out| out[0] = 0.0, 1, 0.0, 2.0, 1e-3)
            .unwrap();
        for (t, v) in run {
            assert_eq!(v[0], 0.0);
            assert!((v[1] - (-t).exp()).abs() < 1e-12);
        }
        let zero = CausalOperator::internal_dynamics(
            1,
            vec![0.0],
            |e, x, o| o[0] = -e[0] + x[0],
            |e, _, o| o[0] = e[0],
        )
        .unwrap();
        let run = zero
            .apply_to_signal(&|_, out| out[0] = 0.0, 1, 0.0, 1.0, 1e-2)
            .unwrap();
        assert!(run.iter().all(|(_, v)| v[0] == 0.0));
    }

    #[test]
    fn unstable_internal_dynamics_reported() {
        let op = CausalOperator::internal_dynamics(
            1,
            vec![1.0],
            |e, _, o| o[0] = e[0] * e[0],
            |e, _, o| o[0] = e[0],
        )
        .unwrap();
        assert!(matches!(
            op.apply_to_signal(&|_, out| out[0] = 0.0, 1, 0.0, 5.0, 1e-2),
            Err(Error::DivergedInternalDynamics { .. })
        ));
    }

    #[test]
    fn delay_oscillator_uses_past_output() {
        let mut plant = delay_oscillator(0.5, 0.0, &[1.0, 0.0], None).unwrap();
        assert_eq!(plant.memory(), 0.5);
        let (mut f, mut g) = ([0.0], [0.0]);
        plant
            .affine_terms(0.0, plant.state(), &mut f, &mut g)
            .unwrap();
        assert!((f[0] + 0.5).abs() < 1e-15);
        assert!((g[0] - 1.25).abs() < 1e-15);
        // after one step the delayed output still comes from the held history
        let x = plant.state().to_vec();
        plant.advance(0.01, &[2.0, 0.0, 0.0]);
        plant
            .affine_terms(0.01, plant.state(), &mut f, &mut g)
            .unwrap();
        assert!((f[0] + 0.5).abs() < 1e-15);
        assert_eq!(x.len(), 3);
    }

    #[test]
    fn stacked_operator_layout() {
        let op = CausalOperator::stack(vec![
            CausalOperator::identity(2),
            CausalOperator::internal_dynamics(
                1,
                vec![2.0],
                |e, _, o| o[0] = -e[0],
                |e, _, o| o[0] = e[0],
            )
            .unwrap(),
        ]);
        assert_eq!(op.q(), 3);
        assert_eq!(op.eta_dim(), 1);
        let mut out = [0.0; 3];
        op.evaluate(0.0, &[1.0, 2.0], &[5.0], &mut out).unwrap();
        assert_eq!(out, [1.0, 2.0, 5.0]);
    }
}
