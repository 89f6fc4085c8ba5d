//! Assembly of a complete tracking problem: funnel, gains, funnel chain,
//! feedback law, stage cost and loop configuration.

use std::sync::Arc;

use crate::errchain::JetVector;
use crate::error::Result;
use crate::funnel::{
    build_funnel_chain, default_gamma, gamma_margin, select_gains, uniform_grid, ExpTerm,
    FunnelChain, FunnelFunction, GainSelection, InitialJetData,
};
use crate::mpc::MpcConfig;
use crate::ocp::{OcpSpec, StageCost};
use crate::sim::{FeedbackLaw, Reference, SinusoidalReference, DEFAULT_INTEGRATOR_STEP};
use crate::systems::{
    mass_on_car_normal_form, mass_on_car_state_space, MassOnCarParams, NormalFormPlant,
    StateSpacePlant,
};

/// Spacing of the grid on which sup norms of custom funnels are estimated.
pub const SUP_GRID_SPACING: f64 = 1e-3;

/// `ψ(t) = 0.1 + 11 e^{-1.35 t} - 7 e^{-1.5 t}` certified with `(α, β) = (1.5, 0.15)`.
pub fn default_funnel() -> FunnelFunction {
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
    .expect("valid funnel")
}

#[derive(Clone)]
pub struct TrackingSetup {
    pub psi: FunnelFunction,
    pub data: InitialJetData,
    pub gamma_min: f64,
    pub gamma: f64,
    pub selection: GainSelection,
    pub chain: FunnelChain,
    pub reference: Arc<dyn Reference>,
    pub lambda_u: f64,
}

impl std::fmt::Debug for TrackingSetup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrackingSetup")
            .field("psi", &self.psi.describe())
            .field("gamma", &self.gamma)
            .field("gains", &self.selection.gains)
            .field("theta", &self.chain.theta().describe())
            .finish()
    }
}

impl TrackingSetup {
    /// `gamma = None` picks [`default_gamma`]; unset gains are rounded up
    /// from their lower bounds to multiples of `gain_grid`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        psi: FunnelFunction,
        y0_jet: JetVector,
        reference: Arc<dyn Reference>,
        gamma: Option<f64>,
        requested_gains: &[Option<f64>],
        gain_grid: f64,
        lambda_u: f64,
        sup_horizon: f64,
    ) -> Result<Self> {
        let (r, m) = (y0_jet.r(), y0_jet.m());
        let t0 = psi.t0();
        let mut yref = vec![0.0; r * m];
        reference.jet(t0, r - 1, &mut yref);
        let data = InitialJetData::new(t0, y0_jet, JetVector::new(r, m, yref)?)?;
        let gamma_min = gamma_margin(&data, &psi)?;
        let gamma = gamma.unwrap_or_else(|| default_gamma(gamma_min));
        let selection = select_gains(&data, &psi, gamma, requested_gains, gain_grid)?;
        let grid = uniform_grid(t0, t0 + sup_horizon, SUP_GRID_SPACING)?;
        let chain = build_funnel_chain(&psi, &data, &selection.gains, gamma, &grid)?;
        Ok(Self {
            psi,
            data,
            gamma_min,
            gamma,
            selection,
            chain,
            reference,
            lambda_u,
        })
    }

    pub fn gains(&self) -> &[f64] {
        &self.selection.gains
    }

    pub fn feedback_law(&self) -> Result<FeedbackLaw> {
        FeedbackLaw::new(self.chain.clone(), self.gains(), self.reference.clone())
    }

    pub fn stage_cost(&self) -> Result<StageCost> {
        StageCost::new(
            self.chain.theta().clone(),
            self.lambda_u,
            self.selection.gains.clone(),
        )
    }

    pub fn mpc_config(&self, t_end: f64, delta: f64, spec: OcpSpec) -> Result<MpcConfig> {
        MpcConfig::new(
            self.psi.t0(),
            t_end,
            delta,
            spec,
            self.chain.clone(),
            self.stage_cost()?,
        )
    }
}

/// Car and ramp-mass at rest tracking `cos t`: `γ = 0.5`, `k_1 = 14`,
/// `λ_u = 0.01`.
pub fn mass_on_car_setup() -> Result<TrackingSetup> {
    TrackingSetup::new(
        default_funnel(),
        JetVector::scalar(&[0.0, 0.0])?,
        Arc::new(SinusoidalReference::cosine()),
        Some(0.5),
        &[Some(14.0)],
        1.0,
        0.01,
        10.0,
    )
}

/// The loop parameters used with [`mass_on_car_setup`]: `T = 0.6`,
/// `δ = 0.04`, hold interval `0.04`, `M = 20` on `[0, 10]`.
pub fn mass_on_car_mpc_config(setup: &TrackingSetup) -> Result<MpcConfig> {
    let spec = OcpSpec::new(0.6, 0.04, 20.0, DEFAULT_INTEGRATOR_STEP)?;
    setup.mpc_config(10.0, 0.04, spec)
}

pub fn mass_on_car_plants() -> Result<(NormalFormPlant, StateSpacePlant)> {
    let p = MassOnCarParams::default();
    Ok((
        mass_on_car_normal_form(p, 0.0, &[0.0; 4])?,
        mass_on_car_state_space(p, 0.0, vec![0.0; 4])?,
    ))
}
