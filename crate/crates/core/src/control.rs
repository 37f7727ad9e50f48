//! Local voltage controllers.
//!
//! Each bus updates its reactive injection from its own voltage deviation:
//!
//! ```text
//! linear:    u_i(t) = k_i ṽ_i(t)
//! adaptive:  u_i(t) = k_i ṽ_i(t) + φ_i(t)ᵀ ã_i(t)
//!            ã_i(t+1) = α ã_i(t) + ṽ_i(t) · A_i φ_i(t)
//! ```
//!
//! When action bounds are present the summed action is clamped to
//! `[−ū_i, ū_i]`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::linalg;
use crate::scenario::BlockBasis;

/// Diagonal shift added to `L Lᵀ` when adaptation matrices are given by factors.
pub const FACTOR_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Linear,
    Adaptive,
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ControllerKind::Linear => "linear",
            ControllerKind::Adaptive => "adaptive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerParams {
    /// Linear gains `k_i`.
    pub k: DVector<f64>,
    /// Adaptation matrices `A_i` (`m_i × m_i`).
    pub a: Vec<DMatrix<f64>>,
    pub alpha: f64,
    pub epsilon: f64,
    /// Per-bus action bounds `ū_i`.
    pub u_max: Option<DVector<f64>>,
}

impl ControllerParams {
    /// Structural validation only: dimensions, finiteness and symmetry of
    /// `A_i`. Stability-related ranges are reported by [`Self::violations`]
    /// and the certification checks.
    pub fn new(
        k: DVector<f64>,
        a: Vec<DMatrix<f64>>,
        alpha: f64,
        epsilon: f64,
        u_max: Option<DVector<f64>>,
    ) -> Result<Self> {
        let params = ControllerParams {
            k,
            a,
            alpha,
            epsilon,
            u_max,
        };
        params.validate_structure()?;
        Ok(params)
    }

    /// Gains `k`, adaptation matrices `A_i = scale · I_{m_i}`.
    pub fn uniform(k: DVector<f64>, dims: &[usize], a_scale: f64, alpha: f64, epsilon: f64) -> Result<Self> {
        let a = dims.iter().map(|&m| DMatrix::identity(m, m) * a_scale).collect();
        Self::new(k, a, alpha, epsilon, None)
    }

    pub fn n(&self) -> usize {
        self.k.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.a.iter().map(|a| a.nrows()).collect()
    }

    fn validate_structure(&self) -> Result<()> {
        let n = self.k.len();
        ensure_len("adaptation matrices", self.a.len(), n)?;
        if let Some(u) = &self.u_max {
            ensure_len("action bounds", u.len(), n)?;
            if u.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config("action bounds must be ≥ 0".into()));
            }
        }
        if self.k.iter().any(|v| !v.is_finite()) || !self.alpha.is_finite() || !self.epsilon.is_finite() {
            return Err(Error::Config("non-finite controller parameter".into()));
        }
        for (i, a) in self.a.iter().enumerate() {
            if !a.is_square() || a.nrows() == 0 {
                return Err(Error::dim(format!("A_{i} must be square and non-empty")));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("A_{i} has non-finite entries")));
            }
            let asym = linalg::max_abs_diff(a, &a.transpose());
            if asym > 1e-12 * a.amax().max(1.0) {
                return Err(Error::Config(format!("A_{i} is not symmetric")));
            }
        }
        Ok(())
    }

    /// Human-readable list of violated parameter invariants
    /// (`k_i > 0`, `A_i ≻ 0`, `0 < α ≤ 1 − ε`, `ε ∈ (0, 1)`).
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            out.push(format!("epsilon = {} outside (0, 1)", self.epsilon));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0 - self.epsilon) {
            out.push(format!(
                "alpha = {} outside (0, 1 − ε] = (0, {}]",
                self.alpha,
                1.0 - self.epsilon
            ));
        }
        for (i, k) in self.k.iter().enumerate() {
            if !(*k > 0.0) {
                out.push(format!("k_{i} = {k} is not positive"));
            }
        }
        for (i, a) in self.a.iter().enumerate() {
            match linalg::sym_extremes(a) {
                Ok((min, _)) if min > 0.0 => {}
                Ok((min, _)) => out.push(format!("A_{i} not positive definite (λ_min = {min:e})")),
                Err(e) => out.push(format!("A_{i}: {e}")),
            }
        }
        out
    }

    fn check_dims(&self, v: &DVector<f64>, phi: Option<&BlockBasis>) -> Result<()> {
        ensure_len("voltage deviation", v.len(), self.n())?;
        if let Some(phi) = phi {
            ensure_len("basis blocks", phi.n(), self.n())?;
            for (i, (b, a)) in phi.blocks.iter().zip(&self.a).enumerate() {
                ensure_len(&format!("basis of bus {i}"), b.len(), a.nrows())?;
            }
        }
        Ok(())
    }

    pub fn to_file(&self) -> ParamsFile {
        ParamsFile {
            k: self.k.iter().copied().collect(),
            a: Some(self.a.iter().map(matrix_rows).collect()),
            a_chol: None,
            alpha: self.alpha,
            epsilon: self.epsilon,
            u_max: self.u_max.as_ref().map(|u| u.iter().copied().collect()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.to_file()).map_err(|e| Error::Config(format!("serializing params: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ParamsFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("params file: {e}")))?;
        file.into_params()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::dim(format!("{what}: ragged matrix")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// On-disk parameter document. Exactly one of `A` and `A_chol` must be set;
/// factors expand to `L Lᵀ + 1e-8·I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub k: Vec<f64>,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(rename = "A_chol", default, skip_serializing_if = "Option::is_none")]
    pub a_chol: Option<Vec<Vec<Vec<f64>>>>,
    pub alpha: f64,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_max: Option<Vec<f64>>,
}

impl ParamsFile {
    pub fn into_params(self) -> Result<ControllerParams> {
        let a = match (&self.a, &self.a_chol) {
            (Some(a), None) => a
                .iter()
                .enumerate()
                .map(|(i, m)| matrix_from_rows(m, &format!("A[{i}]")))
                .collect::<Result<Vec<_>>>()?,
            (None, Some(l)) => l
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let l = matrix_from_rows(m, &format!("A_chol[{i}]"))?;
                    if !l.is_square() {
                        return Err(Error::dim(format!("A_chol[{i}] must be square")));
                    }
                    let dim = l.nrows();
                    Ok(&l * l.transpose() + DMatrix::identity(dim, dim) * FACTOR_JITTER)
                })
                .collect::<Result<Vec<_>>>()?,
            _ => {
                return Err(Error::Config(
                    "params file needs exactly one of `A` or `A_chol`".into(),
                ))
            }
        };
        ControllerParams::new(
            DVector::from_vec(self.k),
            a,
            self.alpha,
            self.epsilon,
            self.u_max.map(DVector::from_vec),
        )
    }
}

/// Adaptation coefficients `ã_i(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveState {
    pub a_tilde: Vec<DVector<f64>>,
}

impl AdaptiveState {
    pub fn zeros(dims: &[usize]) -> Self {
        AdaptiveState {
            a_tilde: dims.iter().map(|&m| DVector::zeros(m)).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.a_tilde.iter().map(|a| a.norm_squared()).sum::<f64>().sqrt()
    }
}

/// Clamps `u` to `[−ū, ū]` and reports which buses saturated.
pub fn clamp_action(u: &mut DVector<f64>, u_max: &DVector<f64>) -> Vec<bool> {
    u.iter_mut()
        .zip(u_max.iter())
        .map(|(ui, &bound)| {
            if ui.abs() > bound {
                *ui = ui.signum() * bound;
                true
            } else {
                false
            }
        })
        .collect()
}

pub fn linear_control(v_tilde: &DVector<f64>, params: &ControllerParams) -> Result<DVector<f64>> {
    params.check_dims(v_tilde, None)?;
    let mut u = params.k.component_mul(v_tilde);
    if let Some(bound) = &params.u_max {
        clamp_action(&mut u, bound);
    }
    Ok(u)
}

pub fn adaptive_control(
    v_tilde: &DVector<f64>,
    phi_t: &BlockBasis,
    state: &AdaptiveState,
    params: &ControllerParams,
) -> Result<DVector<f64>> {
    let mut u = unclamped_action(ControllerKind::Adaptive, v_tilde, phi_t, state, params)?;
    if let Some(bound) = &params.u_max {
        clamp_action(&mut u, bound);
    }
    Ok(u)
}

/// `k ∘ ṽ` plus, for the adaptive controller, `φ̂ᵀ ã`; no clamping.
pub fn unclamped_action(
    kind: ControllerKind,
    v_tilde: &DVector<f64>,
    phi_t: &BlockBasis,
    state: &AdaptiveState,
    params: &ControllerParams,
) -> Result<DVector<f64>> {
    params.check_dims(v_tilde, Some(phi_t))?;
    let base = params.k.component_mul(v_tilde);
    Ok(match kind {
        ControllerKind::Linear => base,
        ControllerKind::Adaptive => {
            ensure_len("adaptive state blocks", state.a_tilde.len(), params.n())?;
            base + phi_t.transpose_apply(&state.a_tilde)?
        }
    })
}

/// `ã_i(t+1) = α ã_i(t) + ṽ_i(t) · A_i φ_i(t)`.
pub fn adapt_step(
    state: &AdaptiveState,
    v_tilde: &DVector<f64>,
    phi_t: &BlockBasis,
    params: &ControllerParams,
) -> Result<AdaptiveState> {
    params.check_dims(v_tilde, Some(phi_t))?;
    ensure_len("adaptive state blocks", state.a_tilde.len(), params.n())?;
    let a_tilde = state
        .a_tilde
        .iter()
        .zip(&params.a)
        .zip(&phi_t.blocks)
        .enumerate()
        .map(|(i, ((a_i, big_a), phi))| {
            ensure_len(&format!("adaptive state of bus {i}"), a_i.len(), phi.len())?;
            Ok(a_i * params.alpha + (big_a * phi) * v_tilde[i])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdaptiveState { a_tilde })
}
