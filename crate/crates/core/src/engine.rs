//! Closed-loop rollouts and cost evaluation.
//!
//! The physical loop iterates
//!
//! ```text
//! u(t)   = controller(ṽ(t), φ(t), ã(t))
//! q(t+1) = q(t) − u(t)
//! ṽ(t+1) = R p(t+1) + X q(t+1)
//! ```
//!
//! with `ṽ = v − 1`. [`PIndex::Lagged`] uses `p(t)` in the voltage update
//! instead. [`rollout_decomposed`] runs the same loop through the lumped
//! disturbance form `ṽ(t+1) = ṽ(t) − X(u(t) − φ̂(t)ᵀa) + δᵛ(t)` and serves
//! as an independent check of the derivation.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify;
use crate::control::{
    adapt_step, clamp_action, unclamped_action, AdaptiveState, ControllerKind, ControllerParams,
};
use crate::error::{ensure_len, Error, Result};
use crate::grid::FeederModel;
use crate::scenario::{basis_at, decompose, BlockBasis, LoadScenario, ScenarioConfig};
use crate::seeds;

/// Rollouts abort once `‖ṽ‖_∞` exceeds this many p.u.
pub const DIVERGENCE_LIMIT: f64 = 10.0;

/// Which injection enters the voltage update at step `t+1`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PIndex {
    /// `ṽ(t+1) = R p(t+1) + X q(t+1)`.
    #[default]
    Simultaneous,
    /// `ṽ(t+1) = R p(t) + X q(t+1)`.
    Lagged,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    /// Apply the parameters' action bounds, if any.
    pub clamp: bool,
    pub p_index: PIndex,
    pub divergence_limit: f64,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            clamp: true,
            p_index: PIndex::Simultaneous,
            divergence_limit: DIVERGENCE_LIMIT,
        }
    }
}

/// States `0..=T` and actions `0..T` of one closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub kind: ControllerKind,
    pub v_tilde: Vec<DVector<f64>>,
    pub q: Vec<DVector<f64>>,
    pub p: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub a_tilde: Vec<AdaptiveState>,
    pub saturated: Vec<Vec<bool>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.u.len()
    }

    pub fn n(&self) -> usize {
        self.v_tilde[0].len()
    }

    pub fn saturation_count(&self) -> usize {
        self.saturated.iter().flatten().filter(|&&s| s).count()
    }

    pub fn max_abs_deviation(&self) -> f64 {
        self.v_tilde.iter().map(DVector::amax).fold(0.0, f64::max)
    }

    /// Long-format CSV `t,bus,v,q,u,p,sat`, one row per bus and control step.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Config(format!("writing trajectory: {e}"));
        w.write_record(["t", "bus", "v", "q", "u", "p", "sat"]).map_err(io)?;
        for t in 0..self.horizon() {
            for bus in 0..self.n() {
                w.write_record([
                    t.to_string(),
                    bus.to_string(),
                    fmt_f64(self.v_tilde[t][bus] + 1.0),
                    fmt_f64(self.q[t][bus]),
                    fmt_f64(self.u[t][bus]),
                    fmt_f64(self.p[t][bus]),
                    u8::from(self.saturated[t][bus]).to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush().map_err(|e| Error::Config(format!("writing trajectory: {e}")))
    }

    /// Wide CSV `t,bus_0,…` of `ṽ(t)` for `t ∈ 0..=T`.
    pub fn write_voltage_plot<W: Write>(&self, out: W) -> Result<()> {
        write_wide(out, &self.v_tilde)
    }

    /// Wide CSV `t,bus_0,…` of `q(t)` for `t ∈ 0..=T`.
    pub fn write_reactive_plot<W: Write>(&self, out: W) -> Result<()> {
        write_wide(out, &self.q)
    }
}

pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.17e}")
}

fn write_wide<W: Write>(out: W, series: &[DVector<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Config(format!("writing plot data: {e}"));
    let n = series.first().map_or(0, DVector::len);
    let header = std::iter::once("t".to_string()).chain((0..n).map(|i| format!("bus_{i}")));
    w.write_record(header).map_err(io)?;
    for (t, x) in series.iter().enumerate() {
        let row = std::iter::once(t.to_string()).chain(x.iter().map(|&v| fmt_f64(v)));
        w.write_record(row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Config(format!("writing plot data: {e}")))
}

fn check_rollout_inputs(
    model: &FeederModel,
    sc: &LoadScenario,
    params: &ControllerParams,
    horizon: usize,
    q0: &DVector<f64>,
) -> Result<()> {
    let n = model.n();
    ensure_len("scenario buses", sc.n(), n)?;
    ensure_len("controller gains", params.n(), n)?;
    ensure_len("q(0)", q0.len(), n)?;
    if params.dims() != sc.basis().dims() {
        return Err(Error::dim(format!(
            "adaptation dimensions {:?} do not match basis dimensions {:?}",
            params.dims(),
            sc.basis().dims()
        )));
    }
    if horizon > sc.horizon() {
        return Err(Error::Range(format!(
            "rollout horizon {horizon} exceeds scenario horizon {}",
            sc.horizon()
        )));
    }
    Ok(())
}

fn guard(v: &DVector<f64>, limit: f64, step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) && v.amax() <= limit {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            scenario: None,
        })
    }
}

/// One controller step shared by both rollout paths.
struct Step {
    u: DVector<f64>,
    saturated: Vec<bool>,
    next_state: AdaptiveState,
}

fn control_step(
    kind: ControllerKind,
    v: &DVector<f64>,
    phi: &BlockBasis,
    state: &AdaptiveState,
    params: &ControllerParams,
    clamp: bool,
) -> Result<Step> {
    let mut u = unclamped_action(kind, v, phi, state, params)?;
    let saturated = match (&params.u_max, clamp) {
        (Some(bound), true) => clamp_action(&mut u, bound),
        _ => vec![false; u.len()],
    };
    let next_state = match kind {
        ControllerKind::Adaptive => adapt_step(state, v, phi, params)?,
        ControllerKind::Linear => state.clone(),
    };
    Ok(Step {
        u,
        saturated,
        next_state,
    })
}

/// Runs the physical loop for `horizon` steps from `q(0) = q0`, `ã(0) = 0`.
pub fn rollout(
    model: &FeederModel,
    sc: &LoadScenario,
    kind: ControllerKind,
    params: &ControllerParams,
    horizon: usize,
    q0: &DVector<f64>,
    opts: &RolloutOptions,
) -> Result<Trajectory> {
    check_rollout_inputs(model, sc, params, horizon, q0)?;
    let v0 = model.r() * sc.p(0) + model.x() * q0;
    guard(&v0, opts.divergence_limit, 0)?;

    let mut traj = Trajectory::start(kind, v0, q0.clone(), sc.p(0).clone(), params, horizon);
    for t in 0..horizon {
        let phi = basis_at(sc, t)?;
        let step = control_step(kind, &traj.v_tilde[t], &phi, &traj.a_tilde[t], params, opts.clamp)?;
        let q_next = &traj.q[t] - &step.u;
        let p_used = match opts.p_index {
            PIndex::Simultaneous => sc.p(t + 1),
            PIndex::Lagged => sc.p(t),
        };
        let v_next = model.r() * p_used + model.x() * &q_next;
        guard(&v_next, opts.divergence_limit, t + 1)?;
        traj.push(step, v_next, q_next, sc.p(t + 1).clone());
    }
    Ok(traj)
}

/// Same loop through the lumped-disturbance recursion; only the
/// [`PIndex::Simultaneous`] convention has this form.
pub fn rollout_decomposed(
    model: &FeederModel,
    sc: &LoadScenario,
    kind: ControllerKind,
    params: &ControllerParams,
    horizon: usize,
    q0: &DVector<f64>,
    opts: &RolloutOptions,
) -> Result<Trajectory> {
    if opts.p_index != PIndex::Simultaneous {
        return Err(Error::Config(
            "the decomposed recursion is defined for the simultaneous injection convention".into(),
        ));
    }
    check_rollout_inputs(model, sc, params, horizon, q0)?;
    let dec = decompose(model, sc)?;
    let v0 = model.r() * sc.p(0) + model.x() * q0;
    guard(&v0, opts.divergence_limit, 0)?;

    let mut traj = Trajectory::start(kind, v0, q0.clone(), sc.p(0).clone(), params, horizon);
    for t in 0..horizon {
        let phi = basis_at(sc, t)?;
        let step = control_step(kind, &traj.v_tilde[t], &phi, &traj.a_tilde[t], params, opts.clamp)?;
        let drift = phi.transpose_apply(&dec.a)?;
        let v_next = &traj.v_tilde[t] - model.x() * (&step.u - drift) + &dec.delta_v[t];
        guard(&v_next, opts.divergence_limit, t + 1)?;
        let q_next = &traj.q[t] - &step.u;
        traj.push(step, v_next, q_next, sc.p(t + 1).clone());
    }
    Ok(traj)
}

impl Trajectory {
    fn start(
        kind: ControllerKind,
        v0: DVector<f64>,
        q0: DVector<f64>,
        p0: DVector<f64>,
        params: &ControllerParams,
        horizon: usize,
    ) -> Self {
        let mut traj = Trajectory {
            kind,
            v_tilde: Vec::with_capacity(horizon + 1),
            q: Vec::with_capacity(horizon + 1),
            p: Vec::with_capacity(horizon + 1),
            u: Vec::with_capacity(horizon),
            a_tilde: Vec::with_capacity(horizon + 1),
            saturated: Vec::with_capacity(horizon),
        };
        traj.v_tilde.push(v0);
        traj.q.push(q0);
        traj.p.push(p0);
        traj.a_tilde.push(AdaptiveState::zeros(&params.dims()));
        traj
    }

    fn push(&mut self, step: Step, v: DVector<f64>, q: DVector<f64>, p: DVector<f64>) {
        self.u.push(step.u);
        self.saturated.push(step.saturated);
        self.a_tilde.push(step.next_state);
        self.v_tilde.push(v);
        self.q.push(q);
        self.p.push(p);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
    Linf,
}

impl Norm {
    pub fn eval(self, x: &DVector<f64>) -> f64 {
        match self {
            Norm::L1 => x.lp_norm(1),
            Norm::L2 => x.norm(),
            Norm::Linf => x.amax(),
        }
    }

    /// A subgradient; zero at the origin and at `L1` kinks.
    pub fn subgradient(self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Norm::L1 => x.map(sign),
            Norm::L2 => {
                let norm = x.norm();
                if norm == 0.0 {
                    DVector::zeros(x.len())
                } else {
                    x / norm
                }
            }
            Norm::Linf => {
                let mut g = DVector::zeros(x.len());
                if let Some((j, v)) = x
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                {
                    g[j] = sign(*v);
                }
                g
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Σ_{t=1}^{T} ‖ṽ(t)‖ + γ ‖u(t−1)‖`.
///
/// The action paired with `ṽ(t)` is the one that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSpec {
    pub gamma: f64,
    pub v_norm: Norm,
    pub u_norm: Norm,
}

impl Default for CostSpec {
    fn default() -> Self {
        CostSpec {
            gamma: 0.001,
            v_norm: Norm::L1,
            u_norm: Norm::L1,
        }
    }
}

impl CostSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be ≥ 0, got {}", self.gamma)));
        }
        if self.u_norm == Norm::Linf {
            return Err(Error::Config("u_norm must be l1 or l2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostBreakdown {
    pub total: f64,
    /// `(‖ṽ(t)‖, γ‖u(t−1)‖)` for `t ∈ 1..=T`.
    pub per_step: Vec<(f64, f64)>,
}

pub fn cost(traj: &Trajectory, spec: &CostSpec) -> Result<CostBreakdown> {
    spec.validate()?;
    let per_step: Vec<(f64, f64)> = (1..=traj.horizon())
        .map(|t| {
            (
                spec.v_norm.eval(&traj.v_tilde[t]),
                spec.gamma * spec.u_norm.eval(&traj.u[t - 1]),
            )
        })
        .collect();
    let total = per_step.iter().map(|(v, u)| v + u).fold(0.0, |acc, c| acc + c);
    Ok(CostBreakdown { total, per_step })
}

/// A scenario paired with its initial reactive injection.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub scenario: LoadScenario,
    pub q0: DVector<f64>,
}

impl Episode {
    pub fn horizon(&self) -> usize {
        self.scenario.horizon()
    }
}

/// `q(0)` uniform in `[q0_min, q0_max]` per bus.
pub fn draw_q0(n: usize, cfg: &ScenarioConfig, rng: &mut seeds::Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| {
        if cfg.q0_min == cfg.q0_max {
            cfg.q0_min
        } else {
            rng.random_range(cfg.q0_min..cfg.q0_max)
        }
    })
}

/// Sinusoidal episodes; episode `h` uses the scenario seed
/// `derive_seed(root, "scenario/h")` and draws `q(0)` from
/// `derive_seed(root, "q0/h")`.
pub fn sinusoidal_episodes(
    model: &FeederModel,
    cfg: &ScenarioConfig,
    horizon: usize,
    root: u64,
    count: usize,
) -> Result<Vec<Episode>> {
    (0..count)
        .map(|h| {
            let scenario = crate::scenario::gen_sinusoidal(
                model,
                horizon,
                seeds::derive_seed(root, &format!("scenario/{h}")),
                cfg,
            )?;
            let q0 = draw_q0(model.n(), cfg, &mut seeds::rng_for(root, &format!("q0/{h}")));
            Ok(Episode { scenario, q0 })
        })
        .collect()
}

/// Costs of `episodes` under one controller, evaluated in parallel and
/// returned in input order. Divergence errors carry the episode index.
pub fn batch_costs(
    model: &FeederModel,
    episodes: &[Episode],
    kind: ControllerKind,
    params: &ControllerParams,
    spec: &CostSpec,
    opts: &RolloutOptions,
) -> Result<Vec<f64>> {
    episodes
        .par_iter()
        .enumerate()
        .map(|(h, ep)| {
            let traj = rollout(model, &ep.scenario, kind, params, ep.horizon(), &ep.q0, opts)
                .map_err(|e| with_scenario(e, h))?;
            Ok(cost(&traj, spec)?.total)
        })
        .collect()
}

pub(crate) fn with_scenario(e: Error, index: usize) -> Error {
    match e {
        Error::Divergence { step, .. } => Error::Divergence {
            step,
            scenario: Some(index),
        },
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stats { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub ratio: f64,
    pub adaptive: Stats,
    pub linear: Stats,
    /// `(linear − adaptive) / linear` of the mean costs.
    pub relative_improvement: f64,
    /// `(adaptive, linear)` cost per episode.
    pub per_scenario: Vec<(f64, f64)>,
    /// Episodes where the adaptive controller is strictly cheaper.
    pub adaptive_wins: usize,
    pub certified_adaptive: bool,
    pub certified_linear: bool,
}

/// Certification used for reporting in [`compare`]: condition (a) for the
/// linear controller; for the adaptive controller the centralized
/// conditions with `‖φ_i‖² ≤ B_i` from the first episode's basis.
pub fn certification_flags(
    model: &FeederModel,
    adaptive: &ControllerParams,
    linear: &ControllerParams,
    episodes: &[Episode],
) -> Result<(bool, bool)> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::Config("empty scenario set".into()))?;
    let geom = certify::XGeometry::new(model)?;
    let bounds = first.scenario.basis().norm_sq_bounds();
    let phi0 = basis_at(&first.scenario, 0)?;
    let central = certify::centralized_conditions(&geom, adaptive, &[phi0], Some(&bounds))?;
    let adaptive_ok = central.a.passed
        && central.b.passed
        && central.c.passed
        && central.c_analytic.is_none_or(|c| c.passed);
    let linear_ok = certify::check_linear(model, linear)?.passed;
    Ok((adaptive_ok, linear_ok))
}

/// Mean ± std of both controllers over `episodes`, with per-episode costs.
pub fn compare(
    model: &FeederModel,
    episodes: &[Episode],
    adaptive: &ControllerParams,
    linear: &ControllerParams,
    spec: &CostSpec,
    opts: &RolloutOptions,
) -> Result<Comparison> {
    if episodes.is_empty() {
        return Err(Error::Config("comparison needs at least one scenario".into()));
    }
    spec.validate()?;
    let (certified_adaptive, certified_linear) =
        certification_flags(model, adaptive, linear, episodes)?;
    let ad = batch_costs(model, episodes, ControllerKind::Adaptive, adaptive, spec, opts)?;
    let lin = batch_costs(model, episodes, ControllerKind::Linear, linear, spec, opts)?;
    let adaptive_stats = Stats::of(&ad);
    let linear_stats = Stats::of(&lin);
    let relative_improvement = if linear_stats.mean == 0.0 {
        0.0
    } else {
        (linear_stats.mean - adaptive_stats.mean) / linear_stats.mean
    };
    Ok(Comparison {
        ratio: 1.0,
        adaptive: adaptive_stats,
        linear: linear_stats,
        relative_improvement,
        adaptive_wins: ad.iter().zip(&lin).filter(|(a, l)| a < l).count(),
        per_scenario: ad.into_iter().zip(lin).collect(),
        certified_adaptive,
        certified_linear,
    })
}

/// [`compare`] at each injection-magnitude ratio (time-varying part of the
/// load scaled, `p(0)` and `q(0)` kept).
pub fn compare_sweep(
    model: &FeederModel,
    episodes: &[Episode],
    adaptive: &ControllerParams,
    linear: &ControllerParams,
    spec: &CostSpec,
    opts: &RolloutOptions,
    ratios: &[f64],
) -> Result<Vec<Comparison>> {
    ratios
        .iter()
        .map(|&ratio| {
            let scaled = episodes
                .iter()
                .map(|ep| {
                    Ok(Episode {
                        scenario: ep.scenario.scaled_injections(ratio)?,
                        q0: ep.q0.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut cmp = compare(model, &scaled, adaptive, linear, spec, opts)?;
            cmp.ratio = ratio;
            Ok(cmp)
        })
        .collect()
}
