//! Stability certification of the adaptive closed loop.
//!
//! In the coordinates `x(t) = (ṽ(t) − ṽ*(t), φ̂(t)ᵀ(ã(t) − ã*(t)))` the closed
//! loop evolves as `x(t+1) = M(t) x(t) − ρ(t)` with
//!
//! ```text
//!        ⎡ I − X K̂        −X  ⎤
//! M(t) = ⎣ φ̂ᵀ Â φ̂         α I ⎦
//! ```
//!
//! where `φ̂(t)ᵀ Â φ̂(t) = diag(φ_iᵀ A_i φ_i)`. This module assembles `M(t)`,
//! checks the centralized and decentralized sufficient conditions on finite
//! samples of `φ`, computes the time-varying equilibrium and the disturbance
//! magnitude `ρ̄`, and evaluates the resulting ISS envelope.
//!
//! The envelope uses the geometric sum `Σ_{k<t} (1−ε)^{t−1−k} = (1 − (1−ε)^t)/ε`
//! as disturbance gain. The often-quoted closed form `(1 − ε^t)/(1 − ε)` does
//! not equal that sum; [`printed_disturbance_gain`] exposes it only so reports
//! can show the difference.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::control::{ControllerKind, ControllerParams};
use crate::engine::Trajectory;
use crate::error::{ensure_len, Error, Result};
use crate::grid::FeederModel;
use crate::linalg;
use crate::scenario::{basis_at, decompose, BlockBasis, DisturbanceDecomposition, LoadScenario};

pub use crate::linalg::spectral_radius;

/// Slack below which a condition is still reported as satisfied.
pub const CHECK_TOLERANCE: f64 = 1e-12;

/// Tolerance used when comparing spectral radii against `1 − ε`.
pub const SPECTRAL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub m: DMatrix<f64>,
    pub t: usize,
}

impl TransitionMatrix {
    pub fn n(&self) -> usize {
        self.m.nrows() / 2
    }

    pub fn lower_left(&self) -> DMatrix<f64> {
        let n = self.n();
        self.m.view((n, 0), (n, n)).into_owned()
    }

    pub fn spectral_radius(&self) -> Result<f64> {
        linalg::spectral_radius(&self.m)
    }
}

/// `diag(φ_iᵀ A_i φ_i)` as a vector.
pub fn adaptation_gram(params: &ControllerParams, phi_t: &BlockBasis) -> Result<DVector<f64>> {
    ensure_len("basis blocks", phi_t.n(), params.n())?;
    phi_t
        .blocks
        .iter()
        .zip(&params.a)
        .enumerate()
        .map(|(i, (phi, a))| {
            ensure_len(&format!("basis of bus {i}"), phi.len(), a.nrows())?;
            Ok((a * phi).dot(phi))
        })
        .collect::<Result<Vec<_>>>()
        .map(DVector::from_vec)
}

pub fn transition_matrix(
    model: &FeederModel,
    params: &ControllerParams,
    phi_t: &BlockBasis,
    t: usize,
) -> Result<TransitionMatrix> {
    let n = model.n();
    ensure_len("controller gains", params.n(), n)?;
    let gram = adaptation_gram(params, phi_t)?;
    let x = model.x();
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    let xk = x * DMatrix::from_diagonal(&params.k);
    m.view_mut((0, 0), (n, n))
        .copy_from(&(DMatrix::identity(n, n) - xk));
    m.view_mut((0, n), (n, n)).copy_from(&(-x));
    m.view_mut((n, 0), (n, n))
        .copy_from(&DMatrix::from_diagonal(&gram));
    m.view_mut((n, n), (n, n))
        .copy_from(&(DMatrix::identity(n, n) * params.alpha));
    Ok(TransitionMatrix { m, t })
}

/// Signed slack of one condition; non-negative (up to [`CHECK_TOLERANCE`])
/// means satisfied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Condition {
    pub passed: bool,
    pub margin: f64,
}

impl Condition {
    fn from_margin(margin: f64) -> Self {
        Condition {
            passed: margin >= -CHECK_TOLERANCE,
            margin,
        }
    }
}

/// Centralized conditions on `S = X^{1/2} K̂ X^{1/2}`:
/// (a) `eig(S) ⊂ [ε, 2−ε]`, (b) `0 < α ≤ 1−ε`,
/// (c) `λ_max(X^{1/2} φ̂ᵀÂφ̂ X^{1/2}) + α λ_max(I − S) ≤ 1−ε` on every sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CentralizedConditions {
    pub a: Condition,
    pub b: Condition,
    pub c: Condition,
    /// Condition (c) under the analytic bound `‖φ_i‖² ≤ B_i`, when bounds were given.
    pub c_analytic: Option<Condition>,
    pub s_eig_min: f64,
    pub s_eig_max: f64,
}

impl CentralizedConditions {
    pub fn all_pass(&self) -> bool {
        self.a.passed && self.b.passed && self.c.passed
    }
}

/// Per-bus conditions: (a) `ε λ_max(X⁻¹) ≤ k_i ≤ (2−ε) λ_min(X⁻¹)`,
/// (b) `0 < α ≤ 1−ε`, (c) `φ_iᵀ A_i φ_i ≤ (1−ε)(1−α)/λ_max(X)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecentralizedConditions {
    pub a: Condition,
    pub b: Condition,
    pub c: Condition,
    pub c_analytic: Option<Condition>,
    pub gain_interval: (f64, f64),
    pub adaptation_cap: f64,
    /// Whether the centralized conditions also hold; `None` when the
    /// decentralized ones fail (nothing to imply).
    pub implies_centralized: Option<bool>,
}

impl DecentralizedConditions {
    pub fn all_pass(&self) -> bool {
        self.a.passed && self.b.passed && self.c.passed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IssParameters {
    pub decay_rate: f64,
    /// `lim_{t→∞} (1 − (1−ε)^t)/ε = 1/ε`.
    pub asymptotic_disturbance_gain: f64,
    pub rho_bar: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub epsilon: f64,
    pub alpha: f64,
    pub centralized: Option<CentralizedConditions>,
    pub decentralized: Option<DecentralizedConditions>,
    pub spectral_radii: Vec<f64>,
    pub spectral_radius_max: f64,
    pub iss: IssParameters,
}

impl StabilityReport {
    /// True when every evaluated condition group passes.
    pub fn all_pass(&self) -> bool {
        self.centralized.as_ref().is_none_or(CentralizedConditions::all_pass)
            && self
                .decentralized
                .as_ref()
                .is_none_or(DecentralizedConditions::all_pass)
    }

    /// Names of failed conditions, e.g. `theorem2.b`, `corollary1.a`.
    pub fn failed_conditions(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(c) = &self.centralized {
            for (name, cond) in [("a", c.a), ("b", c.b), ("c", c.c)] {
                if !cond.passed {
                    out.push(format!("theorem2.{name}"));
                }
            }
        }
        if let Some(d) = &self.decentralized {
            for (name, cond) in [("a", d.a), ("b", d.b), ("c", d.c)] {
                if !cond.passed {
                    out.push(format!("corollary1.{name}"));
                }
            }
        }
        out
    }

    /// Whether the worst sampled spectral radius stays within `1 − ε`.
    pub fn contractive(&self) -> bool {
        self.spectral_radius_max <= 1.0 - self.epsilon + SPECTRAL_TOLERANCE
    }

    pub fn with_rho_bar(mut self, rho_bar: f64) -> Self {
        self.iss.rho_bar = Some(rho_bar);
        self
    }
}

/// Quantities of `X` shared by all checks on one model.
#[derive(Debug, Clone)]
pub struct XGeometry {
    pub x_half: DMatrix<f64>,
    pub x_eig_min: f64,
    pub x_eig_max: f64,
}

impl XGeometry {
    pub fn new(model: &FeederModel) -> Result<Self> {
        let (x_eig_min, x_eig_max) = linalg::sym_extremes(model.x())?;
        if !(x_eig_min > 0.0) {
            return Err(Error::Model(format!(
                "X is not positive definite (λ_min = {x_eig_min:e})"
            )));
        }
        Ok(XGeometry {
            x_half: linalg::sqrt_psd(model.x())?,
            x_eig_min,
            x_eig_max,
        })
    }

    /// `λ_max(X⁻¹) = 1/λ_min(X)`.
    pub fn x_inv_eig_max(&self) -> f64 {
        1.0 / self.x_eig_min
    }

    /// `λ_min(X⁻¹) = 1/λ_max(X)`.
    pub fn x_inv_eig_min(&self) -> f64 {
        1.0 / self.x_eig_max
    }

    fn scaled_diag_lambda_max(&self, d: &DVector<f64>) -> Result<f64> {
        let m = &self.x_half * DMatrix::from_diagonal(d) * &self.x_half;
        linalg::lambda_max(&m)
    }
}

fn condition_b(params: &ControllerParams) -> Condition {
    let eps = params.epsilon;
    Condition::from_margin(params.alpha.min(1.0 - eps - params.alpha))
}

fn check_samples(phi_samples: &[BlockBasis]) -> Result<()> {
    if phi_samples.is_empty() {
        Err(Error::Config("at least one basis sample is required".into()))
    } else {
        Ok(())
    }
}

/// Worst-case `φ_iᵀ A_i φ_i ≤ λ_max(A_i) · B_i` given `‖φ_i‖² ≤ B_i`.
pub fn analytic_gram_bound(params: &ControllerParams, norm_sq_bounds: &[f64]) -> Result<DVector<f64>> {
    ensure_len("basis norm bounds", norm_sq_bounds.len(), params.n())?;
    params
        .a
        .iter()
        .zip(norm_sq_bounds)
        .map(|(a, b)| Ok(linalg::lambda_max(a)? * b))
        .collect::<Result<Vec<_>>>()
        .map(DVector::from_vec)
}

pub fn centralized_conditions(
    geom: &XGeometry,
    params: &ControllerParams,
    phi_samples: &[BlockBasis],
    norm_sq_bounds: Option<&[f64]>,
) -> Result<CentralizedConditions> {
    check_samples(phi_samples)?;
    let eps = params.epsilon;
    let s = &geom.x_half * DMatrix::from_diagonal(&params.k) * &geom.x_half;
    let (s_min, s_max) = linalg::sym_extremes(&s)?;
    let a = Condition::from_margin((s_min - eps).min((2.0 - eps) - s_max));
    let b = condition_b(params);
    // λ_max(I − S) = 1 − λ_min(S)
    let base = params.alpha * (1.0 - s_min);
    let mut worst = f64::NEG_INFINITY;
    for phi in phi_samples {
        let gram = adaptation_gram(params, phi)?;
        worst = worst.max(geom.scaled_diag_lambda_max(&gram)?);
    }
    let c = Condition::from_margin((1.0 - eps) - (worst + base));
    let c_analytic = norm_sq_bounds
        .map(|bounds| {
            let gram = analytic_gram_bound(params, bounds)?;
            let lm = geom.scaled_diag_lambda_max(&gram)?;
            Ok::<_, Error>(Condition::from_margin((1.0 - eps) - (lm + base)))
        })
        .transpose()?;
    Ok(CentralizedConditions {
        a,
        b,
        c,
        c_analytic,
        s_eig_min: s_min,
        s_eig_max: s_max,
    })
}

/// Decentralized gain interval and adaptation cap.
pub fn decentralized_limits(geom: &XGeometry, epsilon: f64, alpha: f64) -> ((f64, f64), f64) {
    let lo = epsilon * geom.x_inv_eig_max();
    let hi = (2.0 - epsilon) * geom.x_inv_eig_min();
    let cap = (1.0 - epsilon) * (1.0 - alpha) / geom.x_eig_max;
    ((lo, hi), cap)
}

pub fn decentralized_conditions(
    geom: &XGeometry,
    params: &ControllerParams,
    phi_samples: &[BlockBasis],
    norm_sq_bounds: Option<&[f64]>,
) -> Result<DecentralizedConditions> {
    check_samples(phi_samples)?;
    let ((lo, hi), cap) = decentralized_limits(geom, params.epsilon, params.alpha);
    let a_margin = params
        .k
        .iter()
        .map(|&k| (k - lo).min(hi - k))
        .fold(f64::INFINITY, f64::min);
    let mut worst = f64::NEG_INFINITY;
    for phi in phi_samples {
        worst = worst.max(adaptation_gram(params, phi)?.max());
    }
    let c_analytic = norm_sq_bounds
        .map(|bounds| Ok::<_, Error>(Condition::from_margin(cap - analytic_gram_bound(params, bounds)?.max())))
        .transpose()?;
    Ok(DecentralizedConditions {
        a: Condition::from_margin(a_margin),
        b: condition_b(params),
        c: Condition::from_margin(cap - worst),
        c_analytic,
        gain_interval: (lo, hi),
        adaptation_cap: cap,
        implies_centralized: None,
    })
}

fn spectral_radii(
    model: &FeederModel,
    params: &ControllerParams,
    phi_samples: &[BlockBasis],
) -> Result<Vec<f64>> {
    phi_samples
        .iter()
        .enumerate()
        .map(|(t, phi)| transition_matrix(model, params, phi, t)?.spectral_radius())
        .collect()
}

fn iss_parameters(epsilon: f64) -> IssParameters {
    IssParameters {
        decay_rate: 1.0 - epsilon,
        asymptotic_disturbance_gain: 1.0 / epsilon,
        rho_bar: None,
    }
}

fn report(
    params: &ControllerParams,
    centralized: Option<CentralizedConditions>,
    decentralized: Option<DecentralizedConditions>,
    radii: Vec<f64>,
) -> StabilityReport {
    let spectral_radius_max = radii.iter().copied().fold(0.0, f64::max);
    StabilityReport {
        epsilon: params.epsilon,
        alpha: params.alpha,
        centralized,
        decentralized,
        spectral_radii: radii,
        spectral_radius_max,
        iss: iss_parameters(params.epsilon),
    }
}

/// Centralized conditions on the given `φ` samples, with spectral radii of
/// `M` at every sample.
pub fn check_theorem2(
    model: &FeederModel,
    params: &ControllerParams,
    phi_samples: &[BlockBasis],
) -> Result<StabilityReport> {
    check_theorem2_bounded(model, params, phi_samples, None)
}

pub fn check_theorem2_bounded(
    model: &FeederModel,
    params: &ControllerParams,
    phi_samples: &[BlockBasis],
    norm_sq_bounds: Option<&[f64]>,
) -> Result<StabilityReport> {
    let geom = XGeometry::new(model)?;
    let central = centralized_conditions(&geom, params, phi_samples, norm_sq_bounds)?;
    let radii = spectral_radii(model, params, phi_samples)?;
    Ok(report(params, Some(central), None, radii))
}

/// Decentralized conditions; also evaluates the centralized ones to record
/// whether the implication holds on these inputs.
pub fn check_corollary1(
    model: &FeederModel,
    params: &ControllerParams,
    phi_samples: &[BlockBasis],
) -> Result<StabilityReport> {
    check_corollary1_bounded(model, params, phi_samples, None)
}

pub fn check_corollary1_bounded(
    model: &FeederModel,
    params: &ControllerParams,
    phi_samples: &[BlockBasis],
    norm_sq_bounds: Option<&[f64]>,
) -> Result<StabilityReport> {
    let geom = XGeometry::new(model)?;
    let mut decentral = decentralized_conditions(&geom, params, phi_samples, norm_sq_bounds)?;
    let central = centralized_conditions(&geom, params, phi_samples, norm_sq_bounds)?;
    if decentral.all_pass() {
        decentral.implies_centralized = Some(central.all_pass());
    }
    let radii = spectral_radii(model, params, phi_samples)?;
    Ok(report(params, Some(central), Some(decentral), radii))
}

/// Stability requirement for the linear controller alone: condition (a),
/// i.e. `I − X K̂` contracts at rate `1 − ε` in the `X^{-1/2}`-weighted norm.
pub fn check_linear(model: &FeederModel, params: &ControllerParams) -> Result<Condition> {
    let geom = XGeometry::new(model)?;
    let s = &geom.x_half * DMatrix::from_diagonal(&params.k) * &geom.x_half;
    let (s_min, s_max) = linalg::sym_extremes(&s)?;
    let eps = params.epsilon;
    Ok(Condition::from_margin((s_min - eps).min((2.0 - eps) - s_max)))
}

/// Whether `params` are certified for `kind` on the samples: condition (a)
/// for the linear controller, all centralized conditions for the adaptive one.
pub fn is_certified(
    model: &FeederModel,
    params: &ControllerParams,
    kind: ControllerKind,
    phi_samples: &[BlockBasis],
) -> Result<bool> {
    match kind {
        ControllerKind::Linear => Ok(check_linear(model, params)?.passed),
        ControllerKind::Adaptive => {
            let geom = XGeometry::new(model)?;
            Ok(centralized_conditions(&geom, params, phi_samples, None)?.all_pass())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainBounds {
    pub epsilon: f64,
    /// Per-bus interval `[ε λ_max(X⁻¹), (2−ε) λ_min(X⁻¹)]`.
    pub k_min: f64,
    pub k_max: f64,
    pub x_inv_eig_min: f64,
    pub x_inv_eig_max: f64,
}

impl GainBounds {
    /// Checks `ε X⁻¹ ⪯ K̂ ⪯ (2−ε) X⁻¹` for a diagonal gain vector.
    pub fn matrix_condition_holds(&self, model: &FeederModel, k: &DVector<f64>) -> Result<bool> {
        ensure_len("gains", k.len(), model.n())?;
        let kd = DMatrix::from_diagonal(k);
        let lower = &kd - model.x_inv() * self.epsilon;
        let upper = model.x_inv() * (2.0 - self.epsilon) - &kd;
        let scale = self.x_inv_eig_max;
        Ok(linalg::sym_extremes(&lower)?.0 >= -CHECK_TOLERANCE * scale
            && linalg::sym_extremes(&upper)?.0 >= -CHECK_TOLERANCE * scale)
    }

    pub fn clamp(&self, k: f64) -> f64 {
        k.clamp(self.k_min, self.k_max)
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.k_min + self.k_max)
    }
}

pub fn gain_bounds(model: &FeederModel, epsilon: f64) -> Result<GainBounds> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Config(format!("epsilon must lie in (0, 1], got {epsilon}")));
    }
    let geom = XGeometry::new(model)?;
    let bounds = GainBounds {
        epsilon,
        k_min: epsilon * geom.x_inv_eig_max(),
        k_max: (2.0 - epsilon) * geom.x_inv_eig_min(),
        x_inv_eig_min: geom.x_inv_eig_min(),
        x_inv_eig_max: geom.x_inv_eig_max(),
    };
    if bounds.k_min > bounds.k_max {
        return Err(Error::Infeasible(format!(
            "decentralized gain interval [{:e}, {:e}] is empty for ε = {epsilon} \
             (cond(X) = {:.1}; needs ε ≤ {:.3e})",
            bounds.k_min,
            bounds.k_max,
            geom.x_eig_max / geom.x_eig_min,
            2.0 / (geom.x_eig_max / geom.x_eig_min + 1.0)
        )));
    }
    Ok(bounds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumPoint {
    pub v_star: DVector<f64>,
    pub a_star: Vec<DVector<f64>>,
    pub t: usize,
    /// Max-norm residual of the frozen closed loop at `(ṽ*, ã*)`.
    pub residual: f64,
}

/// Fixed point of the closed loop with `φ(t)` and `δᵛ(t)` frozen:
///
/// ```text
/// ṽ* = (K̂ + φ̂ᵀÂφ̂/(1−α))⁻¹ (φ̂ᵀa + X⁻¹δᵛ),   ã* = Âφ̂ṽ*/(1−α)
/// ```
pub fn equilibrium(
    model: &FeederModel,
    params: &ControllerParams,
    phi_t: &BlockBasis,
    a: &[DVector<f64>],
    delta_v_t: &DVector<f64>,
    t: usize,
) -> Result<EquilibriumPoint> {
    let n = model.n();
    ensure_len("controller gains", params.n(), n)?;
    ensure_len("δᵛ", delta_v_t.len(), n)?;
    if !(params.alpha < 1.0) {
        return Err(Error::Config(format!(
            "equilibrium requires α < 1, got {}",
            params.alpha
        )));
    }
    let inv_gap = 1.0 / (1.0 - params.alpha);
    let gram = adaptation_gram(params, phi_t)?;
    let x_inv_delta = model.x_inv() * delta_v_t;
    let rhs = phi_t.transpose_apply(a)? + &x_inv_delta;
    let diag = &params.k + &gram * inv_gap;
    let scale = diag.amax().max(f64::MIN_POSITIVE);
    if let Some(i) = diag.iter().position(|d| d.abs() <= 1e-14 * scale || !d.is_finite()) {
        return Err(Error::Numerical(format!(
            "equilibrium system singular at step {t} (bus {i})"
        )));
    }
    let v_star = rhs.component_div(&diag);
    let a_star: Vec<DVector<f64>> = params
        .a
        .iter()
        .zip(&phi_t.blocks)
        .enumerate()
        .map(|(i, (am, phi))| am * phi * (v_star[i] * inv_gap))
        .collect();

    let v_next = &v_star
        - model.x()
            * (params.k.component_mul(&v_star) - phi_t.transpose_apply(a)?
                + phi_t.transpose_apply(&a_star)?)
        + delta_v_t;
    let mut residual = (&v_next - &v_star).amax();
    for (i, (am, phi)) in params.a.iter().zip(&phi_t.blocks).enumerate() {
        let a_next = &a_star[i] * params.alpha + am * phi * v_star[i];
        residual = residual.max((a_next - &a_star[i]).amax());
    }
    Ok(EquilibriumPoint {
        v_star,
        a_star,
        t,
        residual,
    })
}

/// Equilibria for `t ∈ 0..T` (where `δᵛ(t)` is defined).
pub fn equilibrium_path(
    model: &FeederModel,
    params: &ControllerParams,
    sc: &LoadScenario,
    dec: &DisturbanceDecomposition,
) -> Result<Vec<EquilibriumPoint>> {
    (0..sc.horizon())
        .map(|t| equilibrium(model, params, &basis_at(sc, t)?, &dec.a, &dec.delta_v[t], t))
        .collect()
}

/// Closed-form envelope `(1−ε)^t ‖x(0)‖ + (1 − (1−ε)^t)/ε · ρ̄`.
pub fn iss_envelope(x0_norm: f64, epsilon: f64, rho_bar: f64, t: usize) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Config(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if !(rho_bar >= 0.0 && rho_bar.is_finite()) || !(x0_norm >= 0.0 && x0_norm.is_finite()) {
        return Err(Error::Config(format!(
            "envelope needs finite non-negative inputs, got ‖x0‖={x0_norm}, ρ̄={rho_bar}"
        )));
    }
    let decay = (1.0 - epsilon).powi(t as i32);
    Ok(decay * x0_norm + (1.0 - decay) / epsilon * rho_bar)
}

/// `(1 − ε^t)/(1 − ε)`, for reporting only; see the module docs.
pub fn printed_disturbance_gain(epsilon: f64, t: usize) -> f64 {
    (1.0 - epsilon.powi(t as i32)) / (1.0 - epsilon)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhoBar {
    pub value: f64,
    pub argmax: usize,
    /// `√(‖ρᵛ(t)‖² + ‖ρᵃ(t)‖²)` for `t ∈ 0..T−1`.
    pub per_step: Vec<f64>,
}

/// ISS coordinates along a rollout, for `t ∈ 0..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct IssTrace {
    pub equilibria: Vec<EquilibriumPoint>,
    /// `(ṽ(t) − ṽ*(t), φ̂(t)ᵀ(ã(t) − ã*(t)))` stacked.
    pub deviation: Vec<DVector<f64>>,
    pub rho: RhoBar,
}

/// Computes `ρ̄ = max_t √(‖ρᵛ(t)‖² + ‖ρᵃ(t)‖²)` along an adaptive rollout,
/// with
///
/// ```text
/// ρᵛ(t) = ṽ*(t+1) − ṽ*(t)
/// ρᵃ(t) = φ̂(t)ᵀ(ã(t+1) − ã*(t)) − φ̂(t+1)ᵀ(ã(t+1) − ã*(t+1))
/// ```
///
/// `ρᵃ` uses the rollout's own `ã(t+1)`, so `ρ̄` is a property of the
/// trajectory and not of the scenario alone.
pub fn rho_bar(
    model: &FeederModel,
    params: &ControllerParams,
    sc: &LoadScenario,
    traj: &Trajectory,
) -> Result<RhoBar> {
    Ok(iss_trace(model, params, sc, traj)?.rho)
}

pub fn iss_trace(
    model: &FeederModel,
    params: &ControllerParams,
    sc: &LoadScenario,
    traj: &Trajectory,
) -> Result<IssTrace> {
    let horizon = sc.horizon();
    if horizon < 2 {
        return Err(Error::Config("ρ̄ needs a scenario horizon ≥ 2".into()));
    }
    if traj.horizon() < horizon - 1 {
        return Err(Error::Range(format!(
            "trajectory covers {} steps, ρ̄ needs {}",
            traj.horizon(),
            horizon - 1
        )));
    }
    let dec = decompose(model, sc)?;
    let equilibria = equilibrium_path(model, params, sc, &dec).map_err(|e| match e {
        Error::Numerical(msg) => Error::Numerical(format!("ρ̄: {msg}")),
        other => other,
    })?;
    let phis = (0..horizon)
        .map(|t| basis_at(sc, t))
        .collect::<Result<Vec<_>>>()?;

    let adaptive_error = |phi: &BlockBasis, a_tilde: &[DVector<f64>], a_star: &[DVector<f64>]| {
        let diff: Vec<DVector<f64>> = a_tilde.iter().zip(a_star).map(|(a, s)| a - s).collect();
        phi.transpose_apply(&diff)
    };

    let mut deviation = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let dv = &traj.v_tilde[t] - &equilibria[t].v_star;
        let da = adaptive_error(&phis[t], &traj.a_tilde[t].a_tilde, &equilibria[t].a_star)?;
        deviation.push(stack(&dv, &da));
    }

    let mut per_step = Vec::with_capacity(horizon - 1);
    for t in 0..horizon - 1 {
        let rho_v = &equilibria[t + 1].v_star - &equilibria[t].v_star;
        let a_next = &traj.a_tilde[t + 1].a_tilde;
        let rho_a = adaptive_error(&phis[t], a_next, &equilibria[t].a_star)?
            - adaptive_error(&phis[t + 1], a_next, &equilibria[t + 1].a_star)?;
        per_step.push((rho_v.norm_squared() + rho_a.norm_squared()).sqrt());
    }
    let (argmax, value) = per_step
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |acc, (t, v)| if v > acc.1 { (t, v) } else { acc });
    Ok(IssTrace {
        equilibria,
        deviation,
        rho: RhoBar {
            value,
            argmax,
            per_step,
        },
    })
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ControllerParams;

    fn scalar_model(x: f64) -> FeederModel {
        FeederModel::from_matrices(
            DMatrix::from_element(1, 1, 0.5 * x),
            DMatrix::from_element(1, 1, x),
        )
        .unwrap()
    }

    fn scalar_params(k: f64, a: f64, alpha: f64, eps: f64) -> ControllerParams {
        ControllerParams::new(
            DVector::from_element(1, k),
            vec![DMatrix::from_element(1, 1, a)],
            alpha,
            eps,
            None,
        )
        .unwrap()
    }

    fn phi1(x: f64) -> BlockBasis {
        BlockBasis::new(vec![DVector::from_element(1, x)])
    }

    #[test]
    fn scalar_transition_matrix() {
        let tm = transition_matrix(&scalar_model(1.0), &scalar_params(1.0, 0.25, 0.5, 0.01), &phi1(1.0), 3)
            .unwrap();
        assert_eq!(tm.m, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 0.25, 0.5]));
        assert_eq!(tm.t, 3);
        // |λ|² = det = 0.25
        assert!((tm.spectral_radius().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_basis_decouples_blocks() {
        let model = FeederModel::from_matrices(
            DMatrix::from_row_slice(2, 2, &[0.1, 0.1, 0.1, 0.2]),
            DMatrix::from_row_slice(2, 2, &[0.2, 0.2, 0.2, 0.3]),
        )
        .unwrap();
        let params = ControllerParams::uniform(DVector::from_vec(vec![2.0, 3.0]), &[1, 1], 1.0, 0.7, 0.01).unwrap();
        let tm = transition_matrix(&model, &params, &BlockBasis::zeros(&[1, 1]), 0).unwrap();
        assert_eq!(tm.lower_left(), DMatrix::zeros(2, 2));
        let top = DMatrix::identity(2, 2) - model.x() * DMatrix::from_diagonal(&params.k);
        let expected = linalg::spectral_radius(&top).unwrap().max(0.7);
        assert!((tm.spectral_radius().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn theorem2_scalar_reduction() {
        // X = 1, k = 1 ⇒ S = 1, λ_max(I − S) = 0, so (c) reads Aφ² ≤ 1 − ε.
        let model = scalar_model(1.0);
        let params = scalar_params(1.0, 0.9, 0.99, 0.01);
        let samples = [phi1(1.0), phi1(-0.5), phi1(0.0)];
        let r = check_theorem2(&model, &params, &samples).unwrap();
        let c = r.centralized.as_ref().unwrap();
        assert!(r.all_pass());
        assert!((c.a.margin - 0.99).abs() < 1e-12);
        assert!(c.b.margin.abs() < 1e-12);
        assert!((c.c.margin - (0.99 - 0.9)).abs() < 1e-12);
        assert!(r.contractive());
    }

    #[test]
    fn theorem2_failures() {
        let model = scalar_model(1.0);
        let samples = [phi1(1.0)];
        let r = check_theorem2(&model, &scalar_params(0.0, 0.1, 0.5, 0.01), &samples).unwrap();
        assert!(!r.centralized.as_ref().unwrap().a.passed);
        assert_eq!(r.failed_conditions(), vec!["theorem2.a".to_string()]);

        let r = check_theorem2(&model, &scalar_params(1.0, 0.1, 1.0, 0.01), &samples).unwrap();
        assert!(!r.centralized.as_ref().unwrap().b.passed);
        assert!(r.failed_conditions().contains(&"theorem2.b".to_string()));

        assert!(check_theorem2(&model, &scalar_params(1.0, 0.1, 0.5, 0.01), &[]).is_err());
    }

    /// The sufficient conditions only bound complex eigenvalues by √(1−ε):
    /// in the scalar case |λ|² = det M = α(1 − xk) + xAφ².
    #[test]
    fn theorem2_complex_branch_counterexample() {
        let eps = 0.01;
        let model = scalar_model(1.0);
        let params = scalar_params(0.5, 0.745, 0.49, eps);
        let r = check_theorem2(&model, &params, &[phi1(1.0)]).unwrap();
        assert!(r.all_pass());
        let expected = (0.49f64 * 0.5 + 0.745).sqrt();
        assert!((r.spectral_radius_max - expected).abs() < 1e-12);
        assert!(r.spectral_radius_max > 1.0 - eps);
        assert!(r.spectral_radius_max <= (1.0 - eps).sqrt() + SPECTRAL_TOLERANCE);
    }

    #[test]
    fn corollary1_single_bus_and_implication() {
        let model = scalar_model(1.0);
        let eps = 0.01;
        let alpha = 0.9;
        // cap = (1−ε)(1−α)/λ_max(X) = 0.099
        let params = scalar_params(1.0, 0.09, alpha, eps);
        let r = check_corollary1(&model, &params, &[phi1(1.0), phi1(0.3)]).unwrap();
        let d = r.decentralized.as_ref().unwrap();
        assert!(d.all_pass());
        assert_eq!(d.implies_centralized, Some(true));
        assert!((d.gain_interval.0 - 0.01).abs() < 1e-12);
        assert!((d.gain_interval.1 - 1.99).abs() < 1e-12);
        assert!((d.c.margin - (0.099 - 0.09)).abs() < 1e-12);
    }

    #[test]
    fn corollary1_conservative_on_two_bus() {
        let model = FeederModel::from_matrices(
            DMatrix::from_row_slice(2, 2, &[0.1, 0.1, 0.1, 0.2]),
            DMatrix::from_row_slice(2, 2, &[0.2, 0.2, 0.2, 0.3]),
        )
        .unwrap();
        let eps = 0.01;
        let bounds = gain_bounds(&model, eps).unwrap();
        // eig(K̂X) ≈ {0.19, 1.91} for K̂ = diag(6, 3): centralized (a) holds
        // although k_1 exceeds the decentralized upper bound ≈ 4.36.
        let k = DVector::from_vec(vec![6.0, 3.0]);
        assert!(k[0] > bounds.k_max);
        let params = ControllerParams::uniform(k, &[1, 1], 1e-3, 0.5, eps).unwrap();
        let samples = [BlockBasis::new(vec![DVector::from_element(1, 0.5); 2])];
        let r = check_corollary1(&model, &params, &samples).unwrap();
        assert!(!r.decentralized.as_ref().unwrap().a.passed);
        assert!(r.centralized.as_ref().unwrap().a.passed);
    }

    #[test]
    fn gain_bounds_examples() {
        let identity = FeederModel::from_matrices(DMatrix::identity(3, 3) * 0.5, DMatrix::identity(3, 3)).unwrap();
        let b = gain_bounds(&identity, 0.01).unwrap();
        assert!((b.k_min - 0.01).abs() < 1e-12 && (b.k_max - 1.99).abs() < 1e-12);
        assert!(b.matrix_condition_holds(&identity, &DVector::from_element(3, 1.0)).unwrap());
        assert!(!b.matrix_condition_holds(&identity, &DVector::from_element(3, 2.5)).unwrap());

        let two_bus = FeederModel::from_matrices(
            DMatrix::from_row_slice(2, 2, &[0.1, 0.1, 0.1, 0.2]),
            DMatrix::from_row_slice(2, 2, &[0.2, 0.2, 0.2, 0.3]),
        )
        .unwrap();
        assert!(matches!(gain_bounds(&two_bus, 1.0), Err(Error::Infeasible(_))));
        // ε = 1 collapses to [λ_max, λ_min], non-empty only for X ∝ I.
        assert!(gain_bounds(&identity, 1.0).is_ok());
        assert!(matches!(gain_bounds(&identity, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn equilibrium_examples() {
        let model = scalar_model(1.0);
        let params = scalar_params(1.0, 0.5, 0.5, 0.01);
        let zero = equilibrium(&model, &params, &phi1(1.0), &[DVector::zeros(1)], &DVector::zeros(1), 0).unwrap();
        assert_eq!(zero.v_star[0], 0.0);
        assert_eq!(zero.a_star[0][0], 0.0);

        let eq = equilibrium(
            &model,
            &params,
            &phi1(1.0),
            &[DVector::from_element(1, 1.0)],
            &DVector::zeros(1),
            0,
        )
        .unwrap();
        assert!((eq.v_star[0] - 0.5).abs() < 1e-15);
        assert!((eq.a_star[0][0] - 0.5).abs() < 1e-15);
        assert!(eq.residual < 1e-12);

        // Oracle: iterate the frozen closed loop to its fixed point.
        let (mut v, mut a) = (0.0f64, 0.0f64);
        for _ in 0..500 {
            let v_next = v - (1.0 * v - (1.0 - a));
            let a_next = 0.5 * a + 0.5 * v;
            v = v_next;
            a = a_next;
        }
        assert!((v - eq.v_star[0]).abs() < 1e-12 && (a - eq.a_star[0][0]).abs() < 1e-12);

        let unity = scalar_params(1.0, 0.5, 1.0, 0.01);
        assert!(equilibrium(&model, &unity, &phi1(1.0), &[DVector::zeros(1)], &DVector::zeros(1), 0).is_err());
        let singular = scalar_params(0.0, 0.5, 0.5, 0.01);
        assert!(matches!(
            equilibrium(&model, &singular, &phi1(0.0), &[DVector::zeros(1)], &DVector::zeros(1), 4),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn equilibrium_alpha_limit() {
        let model = FeederModel::from_matrices(
            DMatrix::from_row_slice(2, 2, &[0.1, 0.1, 0.1, 0.2]),
            DMatrix::from_row_slice(2, 2, &[0.2, 0.2, 0.2, 0.3]),
        )
        .unwrap();
        let phi = BlockBasis::new(vec![DVector::from_element(1, 0.8), DVector::from_element(1, -0.6)]);
        let a = vec![DVector::from_element(1, 0.3), DVector::from_element(1, 0.2)];
        let delta = DVector::from_vec(vec![0.01, -0.02]);
        let mut prev_norm = f64::INFINITY;
        let mut prev_gap = f64::INFINITY;
        for alpha in [0.9, 0.99, 0.999] {
            let params = ControllerParams::uniform(DVector::from_vec(vec![2.0, 3.0]), &[1, 1], 0.5, alpha, 0.0005).unwrap();
            let eq = equilibrium(&model, &params, &phi, &a, &delta, 0).unwrap();
            assert!(eq.residual < 1e-10);
            let target = phi.transpose_apply(&a).unwrap() + model.x_inv() * &delta;
            let gap = (phi.transpose_apply(&eq.a_star).unwrap() - target).norm();
            assert!(eq.v_star.norm() < prev_norm);
            assert!(gap < prev_gap);
            prev_norm = eq.v_star.norm();
            prev_gap = gap;
        }
    }

    #[test]
    fn envelope_examples() {
        assert!((iss_envelope(2.0, 0.1, 0.0, 3).unwrap() - 2.0 * 0.9f64.powi(3)).abs() < 1e-15);
        assert!((iss_envelope(1.0, 0.5, 0.5, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!((iss_envelope(1.0, 0.1, 0.3, 10_000).unwrap() - 3.0).abs() < 1e-12);
        // Geometric-sum oracle.
        for t in 0..40 {
            let sum: f64 = (0..t).map(|k| 0.8f64.powi((t - 1 - k) as i32)).sum();
            let env = iss_envelope(0.0, 0.2, 1.0, t).unwrap();
            assert!((env - sum).abs() < 1e-12);
        }
        assert!(iss_envelope(1.0, 0.0, 0.1, 1).is_err());
        assert!(iss_envelope(1.0, 0.5, -0.1, 1).is_err());
        assert!((printed_disturbance_gain(0.5, 1) - 1.0).abs() < 1e-15);
        assert!((printed_disturbance_gain(0.5, 2) - 1.5).abs() < 1e-15);
    }
}
