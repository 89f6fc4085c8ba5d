//! Funnel boundaries of class G, the derived funnel chain `ψ_1, …, ψ_r`, the
//! gain conditions that make the chain consistent, and the input level that
//! the explicit funnel feedback never exceeds.
//!
//! A boundary `ψ` belongs to class G when it is bounded, bounded away from
//! zero and satisfies `ψ̇(t) ≥ -α ψ(t) + β` for some `α, β > 0`. The pair
//! `(α, β)` is part of every [`FunnelFunction`]: it is checked numerically,
//! never inferred.

use std::fmt;
use std::sync::Arc;

use crate::errchain::{norm, ErrorTable, GainVector, JetVector};
use crate::error::{invalid, Error, Result};

/// Default spacing of the grid used for numeric class-G checks.
pub const CLASS_G_GRID_SPACING: f64 = 1e-3;
/// Default tolerance of the numeric class-G inequality.
pub const CLASS_G_TOLERANCE: f64 = 1e-9;
/// Inflation applied to sup norms estimated on a grid.
pub const SUP_NORM_INFLATION: f64 = 1.01;

/// One term `c · exp(-λ (t - t0))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpTerm {
    pub coefficient: f64,
    pub rate: f64,
}

type ProfileFn = Arc<dyn Fn(f64) -> (f64, f64) + Send + Sync>;

#[derive(Clone)]
pub enum FunnelProfile {
    /// `constant + Σ c_j exp(-λ_j (t - t0))`.
    ExpSum { constant: f64, terms: Vec<ExpTerm> },
    /// User supplied `t ↦ (ψ(t), ψ̇(t))`.
    Custom(ProfileFn),
}

impl fmt::Debug for FunnelProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ExpSum { constant, terms } => f
                .debug_struct("ExpSum")
                .field("constant", constant)
                .field("terms", terms)
                .finish(),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// A funnel boundary together with its class-G certificate `(α, β)`.
#[derive(Debug, Clone)]
pub struct FunnelFunction {
    t0: f64,
    profile: FunnelProfile,
    alpha: f64,
    beta: f64,
}

/// Sup norms `‖ψ‖∞` and `‖ψ̇‖∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupNorms {
    pub value: f64,
    pub derivative: f64,
}

impl FunnelFunction {
    pub fn exp_sum(
        t0: f64,
        constant: f64,
        terms: Vec<ExpTerm>,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        if !constant.is_finite()
            || terms
                .iter()
                .any(|t| !t.coefficient.is_finite() || !t.rate.is_finite())
        {
            return Err(Error::InvalidFunnel("non-finite coefficient".into()));
        }
        Self::with_profile(t0, FunnelProfile::ExpSum { constant, terms }, alpha, beta)
    }

    pub fn constant(value: f64, alpha: f64, beta: f64) -> Result<Self> {
        Self::exp_sum(0.0, value, Vec::new(), alpha, beta)
    }

    pub fn custom<F>(t0: f64, profile: F, alpha: f64, beta: f64) -> Result<Self>
    where
        F: Fn(f64) -> (f64, f64) + Send + Sync + 'static,
    {
        Self::with_profile(t0, FunnelProfile::Custom(Arc::new(profile)), alpha, beta)
    }

    fn with_profile(t0: f64, profile: FunnelProfile, alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) || !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidFunnel(format!(
                "certificate (alpha, beta) = ({alpha}, {beta}) must be positive"
            )));
        }
        let psi = Self {
            t0,
            profile,
            alpha,
            beta,
        };
        if !(psi.value(t0) > 0.0) {
            return Err(Error::InvalidFunnel(format!(
                "psi(t0) = {} is not positive",
                psi.value(t0)
            )));
        }
        Ok(psi)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn profile(&self) -> &FunnelProfile {
        &self.profile
    }

    pub fn value(&self, t: f64) -> f64 {
        self.value_and_derivative(t).0
    }

    pub fn derivative(&self, t: f64) -> f64 {
        self.value_and_derivative(t).1
    }

    #[inline]
    pub fn value_and_derivative(&self, t: f64) -> (f64, f64) {
        match &self.profile {
            FunnelProfile::ExpSum { constant, terms } => {
                let dt = t - self.t0;
                let mut v = *constant;
                let mut d = 0.0;
                for term in terms {
                    let e = term.coefficient * (-term.rate * dt).exp();
                    v += e;
                    d -= term.rate * e;
                }
                (v, d)
            }
            FunnelProfile::Custom(f) => f(t),
        }
    }

    /// `ψ̇(t) + αψ(t) - β`, summed term by term for exponential sums so that
    /// terms decaying at rate `α` cancel exactly.
    pub fn class_g_residual(&self, t: f64) -> f64 {
        match &self.profile {
            FunnelProfile::ExpSum { constant, terms } => {
                let dt = t - self.t0;
                let mut r = self.alpha * constant - self.beta;
                for term in terms {
                    r += term.coefficient * (self.alpha - term.rate) * (-term.rate * dt).exp();
                }
                r
            }
            FunnelProfile::Custom(f) => {
                let (v, d) = f(t);
                d + self.alpha * v - self.beta
            }
        }
    }

    /// Closed-form sup norms for a nonincreasing, nonnegative exponential sum
    /// (sup attained at `t0`).
    pub fn analytic_sup(&self) -> Option<SupNorms> {
        match &self.profile {
            FunnelProfile::ExpSum { constant, terms }
                if *constant >= 0.0
                    && terms.iter().all(|t| t.coefficient >= 0.0 && t.rate >= 0.0) =>
            {
                let (v, d) = self.value_and_derivative(self.t0);
                Some(SupNorms {
                    value: v,
                    derivative: d.abs(),
                })
            }
            _ => None,
        }
    }

    /// Sup norms estimated on `grid`, inflated by [`SUP_NORM_INFLATION`].
    pub fn grid_sup(&self, grid: &[f64]) -> SupNorms {
        let (mut v, mut d) = (0.0f64, 0.0f64);
        for &t in grid {
            let (a, b) = self.value_and_derivative(t);
            v = v.max(a.abs());
            d = d.max(b.abs());
        }
        SupNorms {
            value: v * SUP_NORM_INFLATION,
            derivative: d * SUP_NORM_INFLATION,
        }
    }

    /// Human readable closed form.
    pub fn describe(&self) -> String {
        match &self.profile {
            FunnelProfile::ExpSum { constant, terms } => {
                let shift = if self.t0 == 0.0 {
                    "t".to_string()
                } else {
                    format!("(t - {})", self.t0)
                };
                let mut s = String::new();
                for term in terms {
                    if !s.is_empty() {
                        s.push_str(if term.coefficient < 0.0 { " - " } else { " + " });
                    } else if term.coefficient < 0.0 {
                        s.push('-');
                    }
                    s.push_str(&format!(
                        "{}*exp(-{}*{shift})",
                        short(term.coefficient.abs()),
                        short(term.rate)
                    ));
                }
                if s.is_empty() {
                    short(*constant)
                } else {
                    format!("{s} + {}", short(*constant))
                }
            }
            FunnelProfile::Custom(_) => "<custom>".to_string(),
        }
    }
}

/// Twelve significant digits, trailing zeros dropped.
fn short(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let digits = (11 - v.abs().log10().floor() as i32).clamp(0, 17) as usize;
    let s = format!("{v:.digits$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Uniform grid `t0, t0 + h, …` up to `t1` (inclusive, rounded to whole steps).
pub fn uniform_grid(t0: f64, t1: f64, spacing: f64) -> Result<Vec<f64>> {
    if !(spacing > 0.0) || !(t1 >= t0) {
        return Err(invalid("grid needs positive spacing and t1 >= t0"));
    }
    let n = ((t1 - t0) / spacing).round() as usize;
    Ok((0..=n).map(|k| t0 + k as f64 * spacing).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassGReport {
    pub pass: bool,
    pub first_violation: Option<f64>,
    /// Smallest value of `ψ̇ + αψ - β` on the grid.
    pub min_residual: f64,
    pub min_value: f64,
}

/// Numeric class-G check of `ψ` on `grid`.
pub fn class_g_check(psi: &FunnelFunction, grid: &[f64], tol: f64) -> Result<ClassGReport> {
    if grid.is_empty() {
        return Err(invalid("class-G check needs a nonempty grid"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("grid must be strictly increasing"));
    }
    if !(tol >= 0.0) {
        return Err(invalid("tolerance must be nonnegative"));
    }
    let mut report = ClassGReport {
        pass: true,
        first_violation: None,
        min_residual: f64::INFINITY,
        min_value: f64::INFINITY,
    };
    for &t in grid {
        let v = psi.value(t);
        let residual = psi.class_g_residual(t);
        report.min_residual = report.min_residual.min(residual);
        report.min_value = report.min_value.min(v);
        if report.pass && (!(v > 0.0) || residual < -tol) {
            report.pass = false;
            report.first_violation = Some(t);
        }
    }
    Ok(report)
}

/// Initial output jet and reference jet at `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialJetData {
    pub t0: f64,
    pub y0_jet: JetVector,
    pub yref_jet: JetVector,
}

impl InitialJetData {
    pub fn new(t0: f64, y0_jet: JetVector, yref_jet: JetVector) -> Result<Self> {
        if y0_jet.r() != yref_jet.r() || y0_jet.m() != yref_jet.m() {
            return Err(invalid("output and reference jets differ in shape"));
        }
        Ok(Self {
            t0,
            y0_jet,
            yref_jet,
        })
    }

    pub fn r(&self) -> usize {
        self.y0_jet.r()
    }

    pub fn m(&self) -> usize {
        self.y0_jet.m()
    }

    /// `χ(y^0 - y_rf)(t0)`.
    pub fn error_jet(&self) -> JetVector {
        let data = self
            .y0_jet
            .as_slice()
            .iter()
            .zip(self.yref_jet.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        JetVector::new(self.r(), self.m(), data).expect("shape checked on construction")
    }

    /// Norms `(‖e_i^0‖, ‖ė_i^0‖)` for `i = 1..r`.
    ///
    /// Only `k_1..k_{i-1}` enter `e_i`, so `gains` may be shorter than `r - 1`;
    /// missing gains are only allowed for indices that are not requested.
    pub fn error_norms(&self, gains: &[f64], i: usize) -> (f64, f64) {
        let r = self.r();
        let mut padded = vec![0.0; r - 1];
        let n = gains.len().min(r - 1);
        padded[..n].copy_from_slice(&gains[..n]);
        let mut table = ErrorTable::new(r, self.m());
        table.fill(self.error_jet().as_slice(), &padded);
        (norm(table.get(i, 0)), norm(table.get(i, 1)))
    }
}

/// Smallest admissible `γ = (‖e(t0)‖ / ψ(t0))^{1/r}`.
pub fn gamma_margin(data: &InitialJetData, psi: &FunnelFunction) -> Result<f64> {
    let radius = psi.value(data.t0);
    if !(radius > 0.0) {
        return Err(Error::InvalidFunnel(format!(
            "psi(t0) = {radius} is not positive"
        )));
    }
    let e0 = norm(data.error_jet().block(0));
    if e0 >= radius {
        return Err(Error::InitialErrorOutsideFunnel {
            error_norm: e0,
            radius,
        });
    }
    Ok((e0 / radius).powf(1.0 / data.r() as f64))
}

/// `γ = 0.5` when admissible, otherwise the midpoint between `γ_min` and one.
pub fn default_gamma(gamma_min: f64) -> f64 {
    if gamma_min < 0.5 {
        0.5
    } else {
        0.5 * (gamma_min + 1.0)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("gamma = {gamma} must lie in (0, 1)")))
    }
}

/// Lower bounds for `k_1, …, k_{r-1}`.
///
/// The bound for `k_i` (`i ≥ 2`) depends on `e_i^0` and `ė_i^0`, which in turn
/// depend on the already fixed `k_1..k_{i-1}`; those are taken from `gains`.
/// Bounds are returned for as many indices as `gains` determines (all `r - 1`
/// once at least `r - 2` gains are supplied).
pub fn gain_lower_bounds(
    data: &InitialJetData,
    alpha: f64,
    beta: f64,
    gamma: f64,
    psi_t0: f64,
    gains: &[f64],
) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if !(psi_t0 > 0.0) {
        return Err(invalid("psi(t0) must be positive"));
    }
    if !(alpha >= 0.0) || !(beta > 0.0) {
        return Err(invalid("alpha must be nonnegative and beta positive"));
    }
    let r = data.r();
    let count = (gains.len() + 1).min(r - 1);
    Ok((1..=count)
        .map(|i| single_bound(data, alpha, beta, gamma, psi_t0, gains, i))
        .collect())
}

fn single_bound(
    data: &InitialJetData,
    alpha: f64,
    beta: f64,
    gamma: f64,
    psi_t0: f64,
    gains: &[f64],
    i: usize,
) -> f64 {
    let r = data.r() as i32;
    let (e_norm, de_norm) = data.error_norms(gains, i);
    if i == 1 {
        let g = gamma.powi(r - 1);
        2.0 * de_norm / (g * (1.0 - gamma) * psi_t0) + 2.0 * (alpha + 1.0 / g) / (1.0 - gamma)
    } else {
        let floor = beta / (alpha * gamma.powi(i as i32 - 2));
        let jet_term = if de_norm == 0.0 {
            0.0
        } else {
            2.0 * gamma * de_norm / ((1.0 - gamma) * (e_norm + floor))
        };
        jet_term + 2.0 * (1.0 + alpha) / (1.0 - gamma)
    }
}

/// Gains chosen in ascending order together with their bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSelection {
    pub bounds: Vec<f64>,
    pub gains: GainVector,
}

/// Fix `k_1, k_2, …` in turn: each is the requested value when it meets its
/// bound, otherwise the bound rounded up to a multiple of `grid`.
pub fn select_gains(
    data: &InitialJetData,
    psi: &FunnelFunction,
    gamma: f64,
    requested: &[Option<f64>],
    grid: f64,
) -> Result<GainSelection> {
    if !(grid > 0.0) {
        return Err(invalid("gain grid must be positive"));
    }
    let r = data.r();
    let psi_t0 = psi.value(data.t0);
    let mut gains = Vec::with_capacity(r - 1);
    let mut bounds = Vec::with_capacity(r - 1);
    check_gamma(gamma)?;
    for i in 1..r {
        let bound = single_bound(data, psi.alpha(), psi.beta(), gamma, psi_t0, &gains, i);
        let auto = ((bound / grid) - 1e-9).ceil() * grid;
        let chosen = match requested.get(i - 1).copied().flatten() {
            Some(k) if k >= bound => k,
            Some(_) | None => auto.max(grid),
        };
        bounds.push(bound);
        gains.push(chosen);
    }
    Ok(GainSelection {
        bounds,
        gains: GainVector::new(gains)?,
    })
}

/// The funnels `ψ_1 = ψ, ψ_2, …, ψ_r = θ` with their sup norms.
#[derive(Debug, Clone)]
pub struct FunnelChain {
    gamma: f64,
    members: Vec<FunnelFunction>,
    sups: Vec<SupNorms>,
}

impl FunnelChain {
    pub fn r(&self) -> usize {
        self.members.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `ψ_i`, one-based.
    pub fn member(&self, i: usize) -> &FunnelFunction {
        &self.members[i - 1]
    }

    pub fn members(&self) -> &[FunnelFunction] {
        &self.members
    }

    /// `θ = ψ_r`, the barrier radius of the stage cost.
    pub fn theta(&self) -> &FunnelFunction {
        self.members.last().expect("chain has at least one member")
    }

    /// `(‖ψ_i‖∞, ‖ψ̇_i‖∞)`, one-based.
    pub fn sup(&self, i: usize) -> SupNorms {
        self.sups[i - 1]
    }
}

/// Construct `ψ_2, …, ψ_r` from the initial data and gains.
///
/// `sup_grid` is used to estimate the sup norms of `ψ_1`; the other members
/// are monotone and handled in closed form.
pub fn build_funnel_chain(
    psi: &FunnelFunction,
    data: &InitialJetData,
    gains: &GainVector,
    gamma: f64,
    sup_grid: &[f64],
) -> Result<FunnelChain> {
    check_gamma(gamma)?;
    let r = data.r();
    if gains.len() + 1 != r {
        return Err(invalid(format!(
            "relative degree {r} needs {} gains, got {}",
            r - 1,
            gains.len()
        )));
    }
    let psi_t0 = psi.value(data.t0);
    let e0 = norm(data.error_jet().block(0));
    if e0 > gamma.powi(r as i32) * psi_t0 {
        return Err(Error::PreconditionViolation(format!(
            "gamma = {gamma} is not admissible: ‖e(t0)‖ = {e0} > gamma^r psi(t0) = {}",
            gamma.powi(r as i32) * psi_t0
        )));
    }
    let bounds = gain_lower_bounds(data, psi.alpha(), psi.beta(), gamma, psi_t0, gains)?;
    for (i, (&k, &b)) in gains.iter().zip(&bounds).enumerate() {
        if k < b * (1.0 - 1e-12) {
            return Err(Error::InadmissibleGain {
                index: i + 1,
                gain: k,
                bound: b,
            });
        }
    }

    let alpha = psi.alpha();
    let floor_beta = psi.beta() / gamma.powi(r as i32 - 1);
    let floor = floor_beta / alpha;
    let mut members = vec![psi.clone()];
    let mut sups = vec![psi.analytic_sup().unwrap_or_else(|| psi.grid_sup(sup_grid))];
    for i in 1..r {
        let (e_norm, de_norm) = data.error_norms(gains, i);
        let coefficient = (de_norm + gains[i - 1] * e_norm) / gamma.powi((r - i) as i32);
        let member = FunnelFunction::exp_sum(
            data.t0,
            floor,
            vec![ExpTerm {
                coefficient,
                rate: alpha,
            }],
            alpha,
            floor_beta,
        )?;
        sups.push(member.analytic_sup().expect("monotone member"));
        members.push(member);
    }
    Ok(FunnelChain {
        gamma,
        members,
        sups,
    })
}

/// `ξ ∈ D_t^r`: `‖e_i(ξ)‖ < ψ_i(t)` for every `i`.
pub fn funnel_membership(
    t: f64,
    xi: &JetVector,
    chain: &FunnelChain,
    gains: &[f64],
) -> Result<bool> {
    if xi.r() != chain.r() {
        return Err(invalid(format!(
            "jet of order {} does not match chain of length {}",
            xi.r(),
            chain.r()
        )));
    }
    if gains.len() + 1 != chain.r() {
        return Err(invalid("gain count does not match the chain"));
    }
    let mut table = ErrorTable::new(xi.r(), xi.m());
    table.fill(xi.as_slice(), gains);
    Ok((1..=chain.r()).all(|i| norm(table.error(i)) < chain.member(i).value(t)))
}

/// `μ_i^j` with `μ_i^0 = ‖ψ_i‖∞` and `μ_i^{j+1} = μ_{i+1}^j + k_i μ_i^j`.
pub fn derivative_bounds(gains: &[f64], chain: &FunnelChain) -> Vec<Vec<f64>> {
    derivative_bounds_from_sups(gains, &chain.sups)
}

/// [`derivative_bounds`] for explicit sup norms `‖ψ_1‖∞, …, ‖ψ_r‖∞`.
pub fn derivative_bounds_from_sups(gains: &[f64], sups: &[SupNorms]) -> Vec<Vec<f64>> {
    let r = sups.len();
    // mu[i-1][j], j = 0..=r-i
    let mut mu: Vec<Vec<f64>> = (1..=r).map(|i| vec![0.0; r - i + 1]).collect();
    for i in 1..=r {
        mu[i - 1][0] = sups[i - 1].value;
    }
    for j in 1..r {
        for i in 1..=r - j {
            mu[i - 1][j] = mu[i][j - 1] + gains[i - 1] * mu[i - 1][j - 1];
        }
    }
    mu
}

/// The input level `M` that bounds the explicit funnel feedback.
pub fn saturation_bound(
    f_max: f64,
    g_max: f64,
    gains: &[f64],
    chain: &FunnelChain,
    yref_r_sup: f64,
) -> Result<f64> {
    saturation_bound_from_sups(f_max, g_max, gains, &chain.sups, yref_r_sup)
}

/// `M = g_max (f_max + ‖y_rf^{(r)}‖∞ + Σ_j k_j μ_j^{r-j} + ‖ψ̇_r‖∞)`.
pub fn saturation_bound_from_sups(
    f_max: f64,
    g_max: f64,
    gains: &[f64],
    sups: &[SupNorms],
    yref_r_sup: f64,
) -> Result<f64> {
    if !(f_max > 0.0) || !(g_max > 0.0) {
        return Err(invalid("f_max and g_max must be positive"));
    }
    if !(yref_r_sup >= 0.0) {
        return Err(invalid("reference derivative bound must be nonnegative"));
    }
    let r = sups.len();
    if r == 0 || gains.len() + 1 != r {
        return Err(invalid("gain count does not match the chain"));
    }
    let mu = derivative_bounds_from_sups(gains, sups);
    let gain_sum: f64 = (1..r).map(|j| gains[j - 1] * mu[j - 1][r - j]).sum();
    Ok(g_max * (f_max + yref_r_sup + gain_sum + sups[r - 1].derivative))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mass_on_car_psi() -> FunnelFunction {
        FunnelFunction::exp_sum(
            0.0,
            0.1,
            vec![
                ExpTerm {
                    coefficient: 11.0,
                    rate: 1.35,
                },
                ExpTerm {
                    coefficient: -7.0,
                    rate: 1.5,
                },
            ],
            1.5,
            0.15,
        )
        .unwrap()
    }

    fn mass_on_car_data() -> InitialJetData {
        InitialJetData::new(
            0.0,
            JetVector::scalar(&[0.0, 0.0]).unwrap(),
            JetVector::scalar(&[1.0, 0.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn class_g_examples() {
        let grid = uniform_grid(0.0, 10.0, 1e-3).unwrap();
        assert!(class_g_check(&mass_on_car_psi(), &grid, 1e-9).unwrap().pass);

        let c = FunnelFunction::constant(2.0, 1.0, 1.0).unwrap();
        assert!(class_g_check(&c, &grid, 0.0).unwrap().pass);

        let bad = FunnelFunction::exp_sum(
            0.0,
            0.01,
            vec![ExpTerm {
                coefficient: 1.0,
                rate: 1.0,
            }],
            0.5,
            0.1,
        )
        .unwrap();
        let report = class_g_check(&bad, &grid, 1e-9).unwrap();
        assert!(!report.pass);
        assert_eq!(report.first_violation, Some(0.0));

        assert!(class_g_check(&c, &[], 1e-9).is_err());
        assert!(class_g_check(&c, &[1.0, 0.5], 1e-9).is_err());
    }

    #[test]
    fn gamma_examples() {
        let g = gamma_margin(&mass_on_car_data(), &mass_on_car_psi()).unwrap();
        assert!((g - (1.0f64 / 4.1).sqrt()).abs() < 1e-15);
        assert_eq!(default_gamma(g), 0.5);

        let zero = InitialJetData::new(
            0.0,
            JetVector::scalar(&[1.0, 0.0]).unwrap(),
            JetVector::scalar(&[1.0, 0.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(gamma_margin(&zero, &mass_on_car_psi()).unwrap(), 0.0);

        let boundary = InitialJetData::new(
            0.0,
            JetVector::scalar(&[4.1, 0.0]).unwrap(),
            JetVector::scalar(&[0.0, 0.0]).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            gamma_margin(&boundary, &mass_on_car_psi()),
            Err(Error::InitialErrorOutsideFunnel { .. })
        ));
        // default stays admissible when gamma_min exceeds one half
        assert!(default_gamma(0.9) > 0.9 && default_gamma(0.9) < 1.0);
    }

    #[test]
    fn gain_bound_examples() {
        let b = gain_lower_bounds(&mass_on_car_data(), 1.5, 0.15, 0.5, 4.1, &[]).unwrap();
        assert_eq!(b, vec![14.0]);
        let b = gain_lower_bounds(&mass_on_car_data(), 1e-300, 0.15, 0.5, 4.1, &[]).unwrap();
        assert!((b[0] - 8.0).abs() < 1e-12);

        let r1 = InitialJetData::new(
            0.0,
            JetVector::scalar(&[0.0]).unwrap(),
            JetVector::scalar(&[1.0]).unwrap(),
        )
        .unwrap();
        assert!(gain_lower_bounds(&r1, 1.5, 0.15, 0.5, 4.1, &[])
            .unwrap()
            .is_empty());
        assert!(gain_lower_bounds(&mass_on_car_data(), 1.5, 0.15, 1.0, 4.1, &[]).is_err());
    }

    #[test]
    fn mass_on_car_theta() {
        let data = mass_on_car_data();
        let psi = mass_on_car_psi();
        let sel = select_gains(&data, &psi, 0.5, &[], 1.0).unwrap();
        assert_eq!(sel.gains.as_slice(), &[14.0]);
        let grid = uniform_grid(0.0, 10.0, 1e-2).unwrap();
        let chain = build_funnel_chain(&psi, &data, &sel.gains, 0.5, &grid).unwrap();
        assert_eq!(chain.theta().value(0.0), 28.2);
        for &t in &grid {
            let expected = 28.0 * (-1.5 * t).exp() + 0.2;
            assert!((chain.theta().value(t) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn chain_rejects_small_gain() {
        let g = GainVector::new(vec![13.0]).unwrap();
        let err = build_funnel_chain(&mass_on_car_psi(), &mass_on_car_data(), &g, 0.5, &[0.0])
            .unwrap_err();
        assert!(matches!(err, Error::InadmissibleGain { index: 1, .. }));
    }

    #[test]
    fn relative_degree_one_chain_is_psi() {
        let data = InitialJetData::new(
            0.0,
            JetVector::scalar(&[0.0]).unwrap(),
            JetVector::scalar(&[1.0]).unwrap(),
        )
        .unwrap();
        let chain = build_funnel_chain(
            &mass_on_car_psi(),
            &data,
            &GainVector::empty(),
            0.5,
            &[0.0, 1.0],
        )
        .unwrap();
        assert_eq!(chain.r(), 1);
        assert_eq!(chain.theta().value(0.3), mass_on_car_psi().value(0.3));
    }

    #[test]
    fn zero_jet_third_order_chain() {
        let data =
            InitialJetData::new(0.0, JetVector::zeros(3, 1), JetVector::zeros(3, 1)).unwrap();
        let psi = mass_on_car_psi();
        let sel = select_gains(&data, &psi, 0.5, &[], 1.0).unwrap();
        let chain = build_funnel_chain(&psi, &data, &sel.gains, 0.5, &[0.0]).unwrap();
        let floor = 0.15 / (1.5 * 0.25);
        for t in [0.0, 0.7, 5.0] {
            assert!((chain.member(2).value(t) - floor).abs() < 1e-15);
            assert!((chain.member(3).value(t) - floor).abs() < 1e-15);
        }
    }

    #[test]
    fn membership_examples() {
        let data = mass_on_car_data();
        let psi = mass_on_car_psi();
        let gains = GainVector::new(vec![14.0]).unwrap();
        let chain = build_funnel_chain(&psi, &data, &gains, 0.5, &[0.0]).unwrap();
        assert!(funnel_membership(0.0, &JetVector::zeros(2, 1), &chain, &gains).unwrap());
        assert!(funnel_membership(0.0, &data.error_jet(), &chain, &gains).unwrap());
        // ‖e_2‖ exactly θ(0): ξ = (0, 28.2)
        let edge = JetVector::scalar(&[0.0, 28.2]).unwrap();
        assert!(!funnel_membership(0.0, &edge, &chain, &gains).unwrap());
        assert!(funnel_membership(0.0, &JetVector::zeros(3, 1), &chain, &gains).is_err());
    }

    #[test]
    fn saturation_bound_unrolled() {
        let data = mass_on_car_data();
        let gains = GainVector::new(vec![14.0]).unwrap();
        let grid = uniform_grid(0.0, 10.0, 1e-3).unwrap();
        let chain = build_funnel_chain(&mass_on_car_psi(), &data, &gains, 0.5, &grid).unwrap();
        let mu11 = chain.sup(2).value + 14.0 * chain.sup(1).value;
        let expected = 9.0 * (2.0 + 1.0 + 14.0 * mu11 + chain.sup(2).derivative);
        let m = saturation_bound(2.0, 9.0, &gains, &chain, 1.0).unwrap();
        assert!((m - expected).abs() < 1e-9 * expected);
        assert!(saturation_bound(0.0, 9.0, &gains, &chain, 1.0).is_err());
    }

    #[test]
    fn saturation_bound_relative_degree_one() {
        let data = InitialJetData::new(
            0.0,
            JetVector::scalar(&[0.0]).unwrap(),
            JetVector::scalar(&[1.0]).unwrap(),
        )
        .unwrap();
        let chain = build_funnel_chain(
            &mass_on_car_psi(),
            &data,
            &GainVector::empty(),
            0.5,
            &[0.0, 0.5, 1.0],
        )
        .unwrap();
        let m = saturation_bound(3.0, 2.0, &[], &chain, 1.0).unwrap();
        assert_eq!(m, 2.0 * (3.0 + 1.0 + chain.sup(1).derivative));
    }

    #[test]
    fn invalid_certificates_rejected() {
        assert!(FunnelFunction::constant(1.0, 0.0, 1.0).is_err());
        assert!(FunnelFunction::constant(-1.0, 1.0, 1.0).is_err());
    }
}
