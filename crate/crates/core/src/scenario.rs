//! Time-varying net-load scenarios.
//!
//! Active injections evolve as
//!
//! ```text
//! p_i(t+1) = p_i(t) + c_iᵀ φ_i(t) + Δp_i(t)
//! ```
//!
//! with per-bus basis functions `φ_i(t)`, coefficients `c_i` and prediction
//! error `Δp_i(t)`. Cross-bus feature correlation is described by matrices
//! `Θ_ij` with `φ_j(t) = Θ_ij φ_i(t) + ξ_ij(t)`. The residual `ξ_ij` is not
//! stored; it is defined as `φ_j(t) − Θ_ij φ_i(t)` so the decomposition is
//! exact for any choice of `Θ`.

use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::grid::FeederModel;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    Sinusoidal,
    TraceDerived,
    Custom,
}

/// Basis functions of one bus.
#[derive(Debug, Clone, PartialEq)]
pub enum BusBasis {
    /// `φ_i(t) = (sin(η_1 t), …, sin(η_m t))`, frequencies in rad/step.
    Sinusoidal { frequencies: Vec<f64> },
    /// Values tabulated per step.
    Tabulated {
        kind: BasisKind,
        values: Vec<DVector<f64>>,
    },
}

impl BusBasis {
    pub fn dim(&self) -> usize {
        match self {
            BusBasis::Sinusoidal { frequencies } => frequencies.len(),
            BusBasis::Tabulated { values, .. } => values.first().map_or(0, |v| v.len()),
        }
    }

    pub fn kind(&self) -> BasisKind {
        match self {
            BusBasis::Sinusoidal { .. } => BasisKind::Sinusoidal,
            BusBasis::Tabulated { kind, .. } => *kind,
        }
    }

    fn eval(&self, t: usize) -> Option<DVector<f64>> {
        match self {
            BusBasis::Sinusoidal { frequencies } => Some(DVector::from_iterator(
                frequencies.len(),
                frequencies.iter().map(|eta| (eta * t as f64).sin()),
            )),
            BusBasis::Tabulated { values, .. } => values.get(t).cloned(),
        }
    }

    /// Upper bound on `‖φ_i(t)‖²` over all `t`: `m_i` for sinusoids, the
    /// tabulated maximum otherwise.
    pub fn norm_sq_bound(&self) -> f64 {
        match self {
            BusBasis::Sinusoidal { frequencies } => frequencies.len() as f64,
            BusBasis::Tabulated { values, .. } => values
                .iter()
                .map(|v| v.norm_squared())
                .fold(0.0, f64::max),
        }
    }

    fn steps_available(&self) -> Option<usize> {
        match self {
            BusBasis::Sinusoidal { .. } => None,
            BusBasis::Tabulated { values, .. } => Some(values.len()),
        }
    }
}

/// Per-bus basis functions.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    buses: Vec<BusBasis>,
}

impl BasisSpec {
    pub fn new(buses: Vec<BusBasis>) -> Result<Self> {
        for (i, b) in buses.iter().enumerate() {
            if b.dim() == 0 {
                return Err(Error::Config(format!("bus {i}: basis dimension must be ≥ 1")));
            }
            match b {
                BusBasis::Sinusoidal { frequencies } => {
                    if let Some(eta) = frequencies.iter().find(|&&e| !(e > 0.0 && e < PI)) {
                        return Err(Error::Config(format!(
                            "bus {i}: sinusoidal frequency {eta} outside (0, π)"
                        )));
                    }
                }
                BusBasis::Tabulated { values, .. } => {
                    let m = values[0].len();
                    if values.iter().any(|v| v.len() != m) {
                        return Err(Error::dim(format!("bus {i}: ragged tabulated basis")));
                    }
                    if values.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
                        return Err(Error::Config(format!("bus {i}: non-finite basis value")));
                    }
                }
            }
        }
        Ok(BasisSpec { buses })
    }

    /// One sinusoid per bus.
    pub fn sinusoidal(frequencies: &[f64]) -> Result<Self> {
        Self::new(
            frequencies
                .iter()
                .map(|&eta| BusBasis::Sinusoidal {
                    frequencies: vec![eta],
                })
                .collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.buses.len()
    }

    pub fn bus(&self, i: usize) -> &BusBasis {
        &self.buses[i]
    }

    pub fn dims(&self) -> Vec<usize> {
        self.buses.iter().map(BusBasis::dim).collect()
    }

    pub fn total_dim(&self) -> usize {
        self.buses.iter().map(BusBasis::dim).sum()
    }

    /// Evaluates every bus at step `t`.
    pub fn eval(&self, t: usize) -> Result<BlockBasis> {
        let blocks = self
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| {
                b.eval(t)
                    .ok_or_else(|| Error::Range(format!("bus {i}: basis undefined at step {t}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockBasis { blocks })
    }

    pub fn norm_sq_bounds(&self) -> Vec<f64> {
        self.buses.iter().map(BusBasis::norm_sq_bound).collect()
    }

    fn check_covers(&self, steps: usize) -> Result<()> {
        for (i, b) in self.buses.iter().enumerate() {
            if let Some(avail) = b.steps_available() {
                if avail < steps {
                    return Err(Error::Range(format!(
                        "bus {i}: tabulated basis has {avail} steps, scenario needs {steps}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Block-diagonal basis evaluation `φ̂(t) = diag(φ_1(t), …, φ_n(t))`.
///
/// Only the blocks are stored; [`BlockBasis::to_matrix`] materializes the
/// `(Σ m_i) × n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockBasis {
    pub blocks: Vec<DVector<f64>>,
}

impl BlockBasis {
    pub fn new(blocks: Vec<DVector<f64>>) -> Self {
        BlockBasis { blocks }
    }

    /// Zero basis with the given block dimensions.
    pub fn zeros(dims: &[usize]) -> Self {
        BlockBasis {
            blocks: dims.iter().map(|&m| DVector::zeros(m)).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.blocks.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.len()).collect()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let rows: usize = self.blocks.iter().map(|b| b.len()).sum();
        let mut m = DMatrix::zeros(rows, self.n());
        let mut offset = 0;
        for (j, b) in self.blocks.iter().enumerate() {
            m.view_mut((offset, j), (b.len(), 1)).copy_from(b);
            offset += b.len();
        }
        m
    }

    /// `φ̂ᵀ a` for a per-bus stacked vector `a`.
    pub fn transpose_apply(&self, a: &[DVector<f64>]) -> Result<DVector<f64>> {
        ensure_len("stacked coefficient blocks", a.len(), self.n())?;
        self.blocks
            .iter()
            .zip(a)
            .enumerate()
            .map(|(i, (phi, ai))| {
                ensure_len(&format!("coefficient block {i}"), ai.len(), phi.len())?;
                Ok(phi.dot(ai))
            })
            .collect::<Result<Vec<_>>>()
            .map(DVector::from_vec)
    }
}

/// Cross-bus feature correlation matrices `Θ_ij` (`m_j × m_i`).
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Correlation {
    /// `Θ ≡ 0`: features are treated as independent.
    #[default]
    Independent,
    /// `Θ_ij = I` for every pair (requires equal basis dimensions).
    Identical,
    /// Explicit matrices; `None` entries are zero.
    Custom(Vec<Vec<Option<DMatrix<f64>>>>),
}

impl Correlation {
    pub fn theta(&self, i: usize, j: usize, dims: &[usize]) -> DMatrix<f64> {
        let (mi, mj) = (dims[i], dims[j]);
        match self {
            Correlation::Independent => DMatrix::zeros(mj, mi),
            Correlation::Identical => DMatrix::identity(mj, mi),
            Correlation::Custom(m) => m[i][j].clone().unwrap_or_else(|| DMatrix::zeros(mj, mi)),
        }
    }

    fn validate(&self, dims: &[usize]) -> Result<()> {
        let n = dims.len();
        match self {
            Correlation::Independent => Ok(()),
            Correlation::Identical => {
                if dims.windows(2).all(|w| w[0] == w[1]) {
                    Ok(())
                } else {
                    Err(Error::Config(
                        "identical correlation needs equal basis dimensions on every bus".into(),
                    ))
                }
            }
            Correlation::Custom(m) => {
                ensure_len("correlation rows", m.len(), n)?;
                for (i, row) in m.iter().enumerate() {
                    ensure_len("correlation columns", row.len(), n)?;
                    for (j, theta) in row.iter().enumerate() {
                        if let Some(t) = theta {
                            if t.shape() != (dims[j], dims[i]) {
                                return Err(Error::dim(format!(
                                    "Θ[{i}][{j}] is {:?}, expected ({}, {})",
                                    t.shape(),
                                    dims[j],
                                    dims[i]
                                )));
                            }
                        }
                    }
                }
                Ok(())
            }
        }
    }
}

/// A net-load scenario over `horizon` steps.
///
/// Holds `p(0..=T)`, `Δp(0..T)`, and the basis which must be defined on
/// `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadScenario {
    horizon: usize,
    p: Vec<DVector<f64>>,
    coefficients: Vec<DVector<f64>>,
    basis: BasisSpec,
    correlation: Correlation,
    delta_p: Vec<DVector<f64>>,
    seed: Option<u64>,
}

impl LoadScenario {
    /// Generates `p(t)` from `p(0)` by the injection recursion.
    pub fn generate(
        p0: DVector<f64>,
        coefficients: Vec<DVector<f64>>,
        basis: BasisSpec,
        correlation: Correlation,
        delta_p: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let n = p0.len();
        let horizon = delta_p.len();
        ensure_len("basis buses", basis.n(), n)?;
        ensure_len("coefficient blocks", coefficients.len(), n)?;
        let dims = basis.dims();
        for (i, c) in coefficients.iter().enumerate() {
            ensure_len(&format!("coefficients of bus {i}"), c.len(), dims[i])?;
        }
        for (t, d) in delta_p.iter().enumerate() {
            ensure_len(&format!("Δp at step {t}"), d.len(), n)?;
        }
        correlation.validate(&dims)?;
        basis.check_covers(horizon + 1)?;

        let mut p = Vec::with_capacity(horizon + 1);
        p.push(p0);
        for (t, dp) in delta_p.iter().enumerate() {
            let phi = basis.eval(t)?;
            let drift = phi.transpose_apply(&coefficients)?;
            let next = &p[t] + drift + dp;
            p.push(next);
        }
        Ok(LoadScenario {
            horizon,
            p,
            coefficients,
            basis,
            correlation,
            delta_p,
            seed: None,
        })
    }

    pub fn n(&self) -> usize {
        self.p[0].len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `p(t)` for `t ∈ 0..=T`.
    pub fn p(&self, t: usize) -> &DVector<f64> {
        &self.p[t]
    }

    pub fn p_series(&self) -> &[DVector<f64>] {
        &self.p
    }

    pub fn coefficients(&self) -> &[DVector<f64>] {
        &self.coefficients
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn correlation(&self) -> &Correlation {
        &self.correlation
    }

    /// `Δp(t)` for `t ∈ 0..T`.
    pub fn delta_p(&self, t: usize) -> &DVector<f64> {
        &self.delta_p[t]
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn with_correlation(mut self, correlation: Correlation) -> Result<Self> {
        correlation.validate(&self.basis.dims())?;
        self.correlation = correlation;
        Ok(self)
    }

    /// Residual basis process `ξ_ij(t) = φ_j(t) − Θ_ij φ_i(t)`.
    pub fn xi(&self, i: usize, j: usize, t: usize) -> Result<DVector<f64>> {
        let phi = self.basis.eval(t)?;
        let theta = self.correlation.theta(i, j, &self.basis.dims());
        Ok(&phi.blocks[j] - theta * &phi.blocks[i])
    }

    /// Same scenario with the time-varying part (`c` and `Δp`) multiplied by
    /// `ratio`; `p(0)` is kept.
    pub fn scaled_injections(&self, ratio: f64) -> Result<Self> {
        let mut out = LoadScenario::generate(
            self.p[0].clone(),
            self.coefficients.iter().map(|c| c * ratio).collect(),
            self.basis.clone(),
            self.correlation.clone(),
            self.delta_p.iter().map(|d| d * ratio).collect(),
        )?;
        out.seed = self.seed;
        Ok(out)
    }

    /// Shortened copy covering `0..=horizon`.
    pub fn truncated(&self, horizon: usize) -> Result<Self> {
        if horizon > self.horizon {
            return Err(Error::Range(format!(
                "cannot extend a horizon-{} scenario to {horizon}",
                self.horizon
            )));
        }
        let mut out = self.clone();
        out.horizon = horizon;
        out.p.truncate(horizon + 1);
        out.delta_p.truncate(horizon);
        Ok(out)
    }
}

/// Block-diagonal basis at step `t ∈ 0..=T`.
pub fn basis_at(sc: &LoadScenario, t: usize) -> Result<BlockBasis> {
    if t > sc.horizon {
        return Err(Error::Range(format!(
            "step {t} outside scenario horizon 0..={}",
            sc.horizon
        )));
    }
    sc.basis.eval(t)
}

/// Ranges for the sinusoidal study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub eta_min: f64,
    pub eta_max: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub p0_min: f64,
    pub p0_max: f64,
    /// Half-width of the zero-mean uniform prediction error `Δp`.
    pub noise_amp: f64,
    pub horizon: i64,
    pub seed: u64,
    /// Initial reactive injections, used by the rollout harness.
    pub q0_min: f64,
    pub q0_max: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            eta_min: 0.003 * PI,
            eta_max: 0.008 * PI,
            c_min: 0.05,
            c_max: 0.25,
            p0_min: 0.3,
            p0_max: 1.7,
            noise_amp: 0.0,
            horizon: 200,
            seed: 0,
            q0_min: 0.3,
            q0_max: 1.7,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<usize> {
        let range = |name: &str, lo: f64, hi: f64| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(Error::Config(format!("empty or invalid range {name}: [{lo}, {hi}]")))
            }
        };
        range("eta", self.eta_min, self.eta_max)?;
        range("c", self.c_min, self.c_max)?;
        range("p0", self.p0_min, self.p0_max)?;
        range("q0", self.q0_min, self.q0_max)?;
        if !(self.eta_min > 0.0 && self.eta_max < PI) {
            return Err(Error::Config(format!(
                "sinusoidal frequencies must lie in (0, π), got [{}, {}]",
                self.eta_min, self.eta_max
            )));
        }
        if !(self.noise_amp >= 0.0 && self.noise_amp.is_finite()) {
            return Err(Error::Config(format!("noise_amp must be ≥ 0, got {}", self.noise_amp)));
        }
        if self.horizon < 1 {
            return Err(Error::Config(format!("horizon must be ≥ 1, got {}", self.horizon)));
        }
        Ok(self.horizon as usize)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("scenario config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn uniform(rng: &mut seeds::Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Sinusoidal scenario with one basis function per bus.
///
/// Draw order from `ChaCha8Rng::seed_from_u64(seed)`: for each bus in order
/// `η_i`, `c_i`, `p_i(0)`; then, only when `noise_amp > 0`, `Δp(t)` step by
/// step and bus by bus.
pub fn gen_sinusoidal(
    model: &FeederModel,
    horizon: usize,
    seed: u64,
    cfg: &ScenarioConfig,
) -> Result<LoadScenario> {
    if horizon < 1 {
        return Err(Error::Config("horizon must be ≥ 1".into()));
    }
    let check = ScenarioConfig {
        horizon: horizon as i64,
        ..cfg.clone()
    };
    check.validate()?;
    let n = model.n();
    let mut rng = seeds::rng_from_seed(seed);
    let mut etas = Vec::with_capacity(n);
    let mut coefficients = Vec::with_capacity(n);
    let mut p0 = DVector::zeros(n);
    for i in 0..n {
        etas.push(uniform(&mut rng, cfg.eta_min, cfg.eta_max));
        coefficients.push(DVector::from_element(1, uniform(&mut rng, cfg.c_min, cfg.c_max)));
        p0[i] = uniform(&mut rng, cfg.p0_min, cfg.p0_max);
    }
    let delta_p = (0..horizon)
        .map(|_| {
            if cfg.noise_amp > 0.0 {
                DVector::from_fn(n, |_, _| uniform(&mut rng, -cfg.noise_amp, cfg.noise_amp))
            } else {
                DVector::zeros(n)
            }
        })
        .collect();
    let mut sc = LoadScenario::generate(
        p0,
        coefficients,
        BasisSpec::sinusoidal(&etas)?,
        Correlation::Independent,
        delta_p,
    )?;
    sc.seed = Some(seed);
    Ok(sc)
}

/// Reads a trace CSV: header `bus_1,…,bus_n`, one row of p.u. injections per
/// step. Lines starting with `#` are comments.
pub fn parse_trace<R: Read>(reader: R) -> Result<Vec<DVector<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::format(1, format!("trace header: {e}")))?
        .clone();
    let n = headers.len();
    if n == 0 || headers.iter().all(str::is_empty) {
        return Err(Error::format(1, "trace has no columns"));
    }
    let mut rows = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(idx + 2, |p| p.line() as usize);
            Error::format(line, e.to_string())
        })?;
        let lineno = rec.position().map_or(idx + 2, |p| p.line() as usize);
        if rec.len() != n {
            return Err(Error::format(
                lineno,
                format!("row has {} fields, header has {n}", rec.len()),
            ));
        }
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::format(lineno, format!("invalid number `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(DVector::from_vec(row));
    }
    if rows.len() < 2 {
        return Err(Error::format(
            rows.len() + 1,
            "trace needs at least two rows of injections",
        ));
    }
    Ok(rows)
}

/// How a trace is decomposed against its basis.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceBasisConfig {
    pub basis: BasisSpec,
    /// Fit `c_i` on the trailing `window` differences only; `None` fits the
    /// whole trace.
    pub window: Option<usize>,
}

/// Builds a scenario from measured injections: `c_i` by per-bus least squares
/// of `p_i(t+1) − p_i(t)` on `φ_i(t)`, `Δp` the residual.
pub fn scenario_from_trace(
    model: &FeederModel,
    rows: Vec<DVector<f64>>,
    cfg: &TraceBasisConfig,
) -> Result<LoadScenario> {
    let n = model.n();
    if rows.len() < 2 {
        return Err(Error::format(rows.len() + 1, "trace needs at least two rows"));
    }
    for (t, r) in rows.iter().enumerate() {
        if r.len() != n {
            return Err(Error::format(
                t + 2,
                format!("row has {} buses, feeder has {n}", r.len()),
            ));
        }
    }
    ensure_len("trace basis buses", cfg.basis.n(), n)?;
    let horizon = rows.len() - 1;
    cfg.basis.check_covers(horizon + 1)?;
    let window = cfg.window.unwrap_or(horizon).clamp(1, horizon);
    let start = horizon - window;

    let phis = (0..horizon)
        .map(|t| cfg.basis.eval(t))
        .collect::<Result<Vec<_>>>()?;
    let diffs: Vec<DVector<f64>> = rows.windows(2).map(|w| &w[1] - &w[0]).collect();

    let mut coefficients = Vec::with_capacity(n);
    #[allow(clippy::needless_range_loop)]
    for i in 0..n {
        let m = cfg.basis.bus(i).dim();
        let design = DMatrix::from_fn(window, m, |r, k| phis[start + r].blocks[i][k]);
        let target = DVector::from_fn(window, |r, _| diffs[start + r][i]);
        let c = if design.iter().all(|v| *v == 0.0) {
            DVector::zeros(m)
        } else {
            design
                .svd(true, true)
                .solve(&target, 1e-12)
                .map_err(|e| Error::Numerical(format!("least squares for bus {i}: {e}")))?
        };
        coefficients.push(c);
    }

    let delta_p = (0..horizon)
        .map(|t| {
            let fit = phis[t].transpose_apply(&coefficients)?;
            Ok(&diffs[t] - fit)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(LoadScenario {
        horizon,
        p: rows,
        coefficients,
        basis: cfg.basis.clone(),
        correlation: Correlation::Independent,
        delta_p,
        seed: None,
    })
}

pub fn ingest_trace(
    path: impl AsRef<Path>,
    model: &FeederModel,
    cfg: &TraceBasisConfig,
) -> Result<LoadScenario> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let rows = parse_trace(file)?;
    scenario_from_trace(model, rows, cfg)
}

/// Writes `p(0..=T)` in the trace format.
pub fn write_trace<W: std::io::Write>(sc: &LoadScenario, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = (1..=sc.n()).map(|i| format!("bus_{i}")).collect();
    let io = |e: csv::Error| Error::Config(format!("writing trace: {e}"));
    w.write_record(&header).map_err(io)?;
    for p in &sc.p {
        w.write_record(p.iter().map(|v| format!("{v:.17e}"))).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

/// Lumped disturbance terms of the equivalent voltage dynamics
///
/// ```text
/// ṽ(t+1) = ṽ(t) − X (u(t) − φ̂(t)ᵀ a) + δᵛ(t)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceDecomposition {
    /// `a_i = D_e[i,i]·c_i + θ_cor_i`.
    pub a: Vec<DVector<f64>>,
    /// `θ_cor_i = Σ_{j≠i} D_o[i,j] · Θ_ijᵀ c_j`, stored as an `m_i` vector.
    pub theta_cor: Vec<DVector<f64>>,
    /// `Δᵠ(t)` for `t ∈ 0..T`.
    pub delta_phi: Vec<DVector<f64>>,
    /// `δᵛ(t) = X Δᵠ(t) + R Δp(t)` for `t ∈ 0..T`.
    pub delta_v: Vec<DVector<f64>>,
}

pub fn decompose(model: &FeederModel, sc: &LoadScenario) -> Result<DisturbanceDecomposition> {
    let n = model.n();
    ensure_len("scenario buses", sc.n(), n)?;
    let dims = sc.basis.dims();
    let d_e = model.d_e();
    let d_o = model.d_o();

    let thetas: Vec<Vec<DMatrix<f64>>> = (0..n)
        .map(|i| (0..n).map(|j| sc.correlation.theta(i, j, &dims)).collect())
        .collect();

    let theta_cor: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            let mut acc = DVector::zeros(dims[i]);
            for j in (0..n).filter(|&j| j != i) {
                acc += thetas[i][j].transpose() * &sc.coefficients[j] * d_o[(i, j)];
            }
            acc
        })
        .collect();
    let a = (0..n)
        .map(|i| &sc.coefficients[i] * d_e[(i, i)] + &theta_cor[i])
        .collect();

    let mut delta_phi = Vec::with_capacity(sc.horizon);
    let mut delta_v = Vec::with_capacity(sc.horizon);
    for t in 0..sc.horizon {
        let phi = sc.basis.eval(t)?;
        let dphi = DVector::from_fn(n, |i, _| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let xi = &phi.blocks[j] - &thetas[i][j] * &phi.blocks[i];
                    d_o[(i, j)] * sc.coefficients[j].dot(&xi)
                })
                .sum()
        });
        delta_v.push(model.x() * &dphi + model.r() * &sc.delta_p[t]);
        delta_phi.push(dphi);
    }
    Ok(DisturbanceDecomposition {
        a,
        theta_cor,
        delta_phi,
        delta_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_feeder, FeederTopology, Line};

    fn two_bus() -> FeederModel {
        let topo = FeederTopology::new(
            2,
            vec![
                Line { from: 0, to: 1, r: 0.1, x: 0.2 },
                Line { from: 1, to: 2, r: 0.1, x: 0.1 },
            ],
            100.0,
            12.66,
        )
        .unwrap();
        build_feeder(topo, 1.0).unwrap()
    }

    fn one_bus() -> FeederModel {
        FeederModel::from_matrices(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn paper_default_ranges() {
        let cfg = ScenarioConfig::default();
        assert_eq!(cfg.eta_min, 0.003 * PI);
        assert_eq!(cfg.eta_max, 0.008 * PI);
        assert_eq!((cfg.c_min, cfg.c_max), (0.05, 0.25));
        assert_eq!((cfg.p0_min, cfg.p0_max), (0.3, 1.7));
    }

    #[test]
    fn recursion_by_hand() {
        let sc = LoadScenario::generate(
            DVector::from_element(1, 0.0),
            vec![DVector::from_element(1, 1.0)],
            BasisSpec::sinusoidal(&[PI / 2.0]).unwrap(),
            Correlation::Independent,
            vec![DVector::zeros(1); 3],
        )
        .unwrap();
        assert_eq!(sc.p(1)[0], 0.0);
        assert!((sc.p(2)[0] - 1.0).abs() < 1e-15);
        assert!((sc.p(3)[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_load_when_c_zero() {
        let model = two_bus();
        let cfg = ScenarioConfig {
            c_min: 0.0,
            c_max: 0.0,
            ..Default::default()
        };
        let sc = gen_sinusoidal(&model, 50, 3, &cfg).unwrap();
        for t in 0..=50 {
            assert_eq!(sc.p(t), sc.p(0));
        }
    }

    #[test]
    fn generation_is_reproducible_and_satisfies_recursion() {
        let model = two_bus();
        let cfg = ScenarioConfig {
            noise_amp: 0.01,
            ..Default::default()
        };
        let a = gen_sinusoidal(&model, 100, 11, &cfg).unwrap();
        let b = gen_sinusoidal(&model, 100, 11, &cfg).unwrap();
        assert_eq!(a, b);
        for t in 0..100 {
            let phi = basis_at(&a, t).unwrap();
            let drift = phi.transpose_apply(a.coefficients()).unwrap();
            assert_eq!(a.p(t + 1), &(a.p(t) + drift + a.delta_p(t)));
        }
        let c = gen_sinusoidal(&model, 100, 12, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn config_errors() {
        let model = two_bus();
        let bad = ScenarioConfig {
            c_min: 1.0,
            c_max: 0.5,
            ..Default::default()
        };
        assert!(matches!(gen_sinusoidal(&model, 10, 0, &bad), Err(Error::Config(_))));
        assert!(matches!(
            gen_sinusoidal(&model, 0, 0, &ScenarioConfig::default()),
            Err(Error::Config(_))
        ));
        let neg = ScenarioConfig {
            horizon: -3,
            ..Default::default()
        };
        assert!(matches!(neg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_parses_from_toml() {
        let cfg = ScenarioConfig::from_toml("horizon = 50\nseed = 4\nnoise_amp = 0.1\n").unwrap();
        assert_eq!(cfg.horizon, 50);
        assert_eq!(cfg.c_max, 0.25);
        assert!(ScenarioConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn basis_block_structure() {
        let bb = BlockBasis::new(vec![
            DVector::from_element(1, 0.5),
            DVector::from_element(1, -0.5),
        ]);
        assert_eq!(bb.to_matrix(), DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -0.5]));

        let zero = BlockBasis::zeros(&[2, 1]);
        assert_eq!(zero.to_matrix(), DMatrix::zeros(3, 2));

        let col = BlockBasis::new(vec![DVector::from_vec(vec![1.0, 2.0])]);
        assert_eq!(col.to_matrix(), DMatrix::from_column_slice(2, 1, &[1.0, 2.0]));
    }

    #[test]
    fn basis_at_range_checked() {
        let sc = gen_sinusoidal(&two_bus(), 5, 0, &ScenarioConfig::default()).unwrap();
        assert!(basis_at(&sc, 5).is_ok());
        assert!(matches!(basis_at(&sc, 6), Err(Error::Range(_))));
    }

    #[test]
    fn single_bus_decomposition() {
        let model = one_bus();
        let sc = gen_sinusoidal(&model, 20, 1, &ScenarioConfig::default()).unwrap();
        let dec = decompose(&model, &sc).unwrap();
        assert_eq!(dec.theta_cor[0][0], 0.0);
        assert!(dec.delta_phi.iter().all(|d| d[0] == 0.0));
        assert_eq!(dec.a[0][0], model.d_e()[(0, 0)] * sc.coefficients()[0][0]);
    }

    #[test]
    fn identical_features_move_everything_into_a() {
        let model = two_bus();
        let eta = 0.02;
        let c = [0.1, 0.2];
        let sc = LoadScenario::generate(
            DVector::from_vec(vec![1.0, 1.0]),
            c.iter().map(|&v| DVector::from_element(1, v)).collect(),
            BasisSpec::sinusoidal(&[eta, eta]).unwrap(),
            Correlation::Identical,
            vec![DVector::zeros(2); 30],
        )
        .unwrap();
        let dec = decompose(&model, &sc).unwrap();
        assert!(dec.delta_phi.iter().all(|d| d.amax() == 0.0));
        for i in 0..2 {
            let j = 1 - i;
            let expected = model.d_e()[(i, i)] * c[i] + model.d_o()[(i, j)] * c[j];
            assert!((dec.a[i][0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_features_match_brute_force_voltage_increment() {
        let model = two_bus();
        let cfg = ScenarioConfig {
            noise_amp: 0.05,
            ..Default::default()
        };
        let sc = gen_sinusoidal(&model, 60, 9, &cfg).unwrap();
        let dec = decompose(&model, &sc).unwrap();
        for t in 0..60 {
            // Open-loop voltage increment minus the local (a) part.
            let phi = basis_at(&sc, t).unwrap();
            let brute = model.r() * (sc.p(t + 1) - sc.p(t))
                - model.x() * phi.transpose_apply(&dec.a).unwrap();
            assert!((brute - &dec.delta_v[t]).amax() < 1e-12);

            let local = model.d_o() * DVector::from_fn(2, |i, _| {
                sc.coefficients()[i].dot(&phi.blocks[i])
            });
            assert!((local - &dec.delta_phi[t]).amax() < 1e-14);
        }
    }

    #[test]
    fn theta_cor_identity_with_custom_correlation() {
        let model = two_bus();
        let theta = DMatrix::from_element(1, 1, 0.7);
        let sc = gen_sinusoidal(&model, 10, 2, &ScenarioConfig::default())
            .unwrap()
            .with_correlation(Correlation::Custom(vec![
                vec![None, Some(theta.clone())],
                vec![Some(theta), None],
            ]))
            .unwrap();
        let dec = decompose(&model, &sc).unwrap();
        for i in 0..2 {
            let j = 1 - i;
            let expected = model.d_o()[(i, j)] * sc.coefficients()[j][0] * 0.7;
            assert!((dec.theta_cor[i][0] - expected).abs() < 1e-14);
        }
        // Local plus residual parts reassemble the non-local term exactly.
        for t in 0..10 {
            let phi = basis_at(&sc, t).unwrap();
            let nonlocal = model.d_o() * DVector::from_fn(2, |i, _| {
                sc.coefficients()[i].dot(&phi.blocks[i])
            });
            let split = DVector::from_fn(2, |i, _| {
                dec.theta_cor[i].dot(&phi.blocks[i]) + dec.delta_phi[t][i]
            });
            assert!((nonlocal - split).amax() < 1e-14);
            let xi = sc.xi(0, 1, t).unwrap();
            assert!((&xi - (&phi.blocks[1] - &phi.blocks[0] * 0.7)).amax() < 1e-15);
        }
    }

    #[test]
    fn decompose_is_linear_in_c() {
        let model = two_bus();
        let sc = gen_sinusoidal(&model, 30, 5, &ScenarioConfig::default()).unwrap();
        let doubled = sc.scaled_injections(2.0).unwrap();
        let d1 = decompose(&model, &sc).unwrap();
        let d2 = decompose(&model, &doubled).unwrap();
        for i in 0..2 {
            assert!((&d1.a[i] * 2.0 - &d2.a[i]).amax() < 1e-14);
        }
        for t in 0..30 {
            assert!((&d1.delta_phi[t] * 2.0 - &d2.delta_phi[t]).amax() < 1e-14);
        }
    }

    #[test]
    fn trace_of_constant_columns() {
        let model = two_bus();
        let rows = vec![DVector::from_vec(vec![0.4, 0.9]); 12];
        let basis = BasisSpec::sinusoidal(&[0.02, 0.03]).unwrap();
        let sc = scenario_from_trace(&model, rows, &TraceBasisConfig { basis, window: None }).unwrap();
        assert!(sc.coefficients().iter().all(|c| c.amax() == 0.0));
        assert!((0..11).all(|t| sc.delta_p(t).amax() == 0.0));
    }

    #[test]
    fn trace_round_trip_recovers_generated_scenario() {
        let model = two_bus();
        let sc = gen_sinusoidal(&model, 200, 21, &ScenarioConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_trace(&sc, &mut buf).unwrap();
        let rows = parse_trace(buf.as_slice()).unwrap();
        let back = scenario_from_trace(
            &model,
            rows,
            &TraceBasisConfig {
                basis: sc.basis().clone(),
                window: None,
            },
        )
        .unwrap();
        for t in 0..200 {
            assert!(back.delta_p(t).amax() < 1e-8);
        }
        for i in 0..2 {
            assert!((&back.coefficients()[i] - &sc.coefficients()[i]).amax() < 1e-8);
        }
    }

    #[test]
    fn ragged_or_short_trace_rejected() {
        let ragged = "bus_1,bus_2\n1.0,2.0\n1.0\n";
        assert!(matches!(parse_trace(ragged.as_bytes()), Err(Error::Format { line: 3, .. })));
        let short = "bus_1,bus_2\n1.0,2.0\n";
        assert!(matches!(parse_trace(short.as_bytes()), Err(Error::Format { .. })));
        let width = "bus_1\n1.0\n2.0\n";
        let rows = parse_trace(width.as_bytes()).unwrap();
        let basis = BasisSpec::sinusoidal(&[0.02, 0.03]).unwrap();
        assert!(matches!(
            scenario_from_trace(&two_bus(), rows, &TraceBasisConfig { basis, window: None }),
            Err(Error::Format { .. })
        ));
    }
}
