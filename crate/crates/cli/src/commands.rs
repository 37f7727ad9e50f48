//! Subcommand implementations. Each returns a [`Status`]; errors map to exit
//! codes in `main`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use voltadapt::certify::{
    self, CentralizedConditions, Condition, DecentralizedConditions, StabilityReport, XGeometry,
};
use voltadapt::control::{ControllerKind, ControllerParams};
use voltadapt::engine::{self, Comparison, PIndex, RolloutOptions, Stats};
use voltadapt::grid::FeederModel;
use voltadapt::scenario::{
    self, basis_at, BasisSpec, BlockBasis, BusBasis, LoadScenario, ScenarioConfig, TraceBasisConfig,
};
use voltadapt::seeds;
use voltadapt::train::{self, SinusoidalSampler};
use voltadapt::{Error, Result};

use crate::config::ExperimentConfig;
use crate::provenance::{file_hash, Provenance};
use crate::{CertifyArgs, CheckKind, EvaluateArgs, GenScenarioArgs, SimulateArgs, TrainArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    ConditionFailed,
}

/// Top-level flags, applied over the config file.
#[derive(Debug, Default)]
pub struct Globals {
    pub feeder: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub allow_uncertified: bool,
}

struct Context {
    cfg: ExperimentConfig,
    model: FeederModel,
    out_dir: PathBuf,
    /// Hash of the feeder file, when one was given.
    feeder_hash: Option<String>,
}

impl Context {
    fn load(globals: &Globals, scenario_config: Option<&Path>) -> Result<Self> {
        let mut cfg = match &globals.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(feeder) = &globals.feeder {
            cfg.feeder = Some(feeder.clone());
        }
        if let Some(out) = &globals.out {
            cfg.out = Some(out.clone());
        }
        if let Some(seed) = globals.seed {
            cfg.seed = seed;
        }
        if let Some(path) = scenario_config {
            let text = read(path)?;
            cfg.scenario = ScenarioConfig::from_toml(&text)?;
        }
        cfg.validate()?;
        let model = cfg.model()?;
        let feeder_hash = cfg.feeder.as_deref().map(file_hash).transpose()?;
        let out_dir = cfg.out_dir();
        std::fs::create_dir_all(&out_dir).map_err(|source| Error::Io {
            path: out_dir.clone(),
            source,
        })?;
        Ok(Context {
            cfg,
            model,
            out_dir,
            feeder_hash,
        })
    }

    fn root(&self) -> u64 {
        self.cfg.seed
    }

    fn provenance(&self, command: &str, mut extra: Vec<String>) -> Provenance {
        if let Some(h) = &self.feeder_hash {
            extra.push(format!("feeder={h}"));
        }
        Provenance::new(command, &self.cfg.canonical(), self.root(), &extra)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Sinusoidal scenario from the root seed, or a measured trace decomposed
    /// against the `[trace]` basis. The scenario covers at least one step so
    /// that `horizon = 0` still has `p(0)`.
    fn scenario(&self, trace: Option<&Path>, horizon: Option<usize>) -> Result<(LoadScenario, usize)> {
        match trace {
            Some(path) => {
                let basis = BasisSpec::new(vec![
                    BusBasis::Sinusoidal {
                        frequencies: self.cfg.trace.frequencies.clone(),
                    };
                    self.model.n()
                ])?;
                let cfg = TraceBasisConfig {
                    basis,
                    window: self.cfg.trace.window,
                };
                let sc = scenario::ingest_trace(path, &self.model, &cfg)?;
                let horizon = horizon.unwrap_or(sc.horizon());
                if horizon > sc.horizon() {
                    return Err(Error::Range(format!(
                        "horizon {horizon} exceeds the {} steps of {}",
                        sc.horizon(),
                        path.display()
                    )));
                }
                let sc = sc.truncated(horizon.max(1))?;
                Ok((sc, horizon))
            }
            None => {
                let horizon = horizon.unwrap_or(self.cfg.scenario.horizon.max(0) as usize);
                let sc = scenario::gen_sinusoidal(
                    &self.model,
                    horizon.max(1),
                    seeds::derive_seed(self.root(), "scenario"),
                    &self.cfg.scenario,
                )?;
                Ok((sc, horizon))
            }
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_params(flag: Option<&PathBuf>, config: Option<&PathBuf>, what: &str) -> Result<(ControllerParams, String)> {
    let path = flag
        .or(config)
        .ok_or_else(|| Error::Config(format!("no {what} parameter file given")))?;
    let params = ControllerParams::load(path)?;
    let hash = train::params_hash(&params);
    Ok((params, hash))
}

fn samples(sc: &LoadScenario, horizon: usize) -> Result<Vec<BlockBasis>> {
    (0..=horizon.min(sc.horizon())).map(|t| basis_at(sc, t)).collect()
}

/// Adaptive: centralized conditions on the sampled `φ(t)` and under the
/// analytic bound. Linear: gain condition (a).
fn certified(
    model: &FeederModel,
    params: &ControllerParams,
    kind: ControllerKind,
    sc: &LoadScenario,
    horizon: usize,
) -> Result<bool> {
    match kind {
        ControllerKind::Linear => Ok(certify::check_linear(model, params)?.passed),
        ControllerKind::Adaptive => {
            let geom = XGeometry::new(model)?;
            let bounds = sc.basis().norm_sq_bounds();
            let central =
                certify::centralized_conditions(&geom, params, &samples(sc, horizon)?, Some(&bounds))?;
            Ok(central.all_pass() && central.c_analytic.is_none_or(|c| c.passed))
        }
    }
}

// ---------------------------------------------------------------------------
// certify

#[derive(Debug, Serialize)]
struct IssDocument {
    decay_rate: f64,
    asymptotic_disturbance_gain: f64,
    /// `(1 − (1−ε)^T)/ε` at the sampled horizon.
    disturbance_gain_at_horizon: f64,
    /// `(1 − ε^T)/(1 − ε)`, the alternative closed form; not used for bounds.
    alternative_disturbance_gain_at_horizon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    rho_bar: Option<f64>,
}

#[derive(Debug, Serialize)]
struct CertifyDocument<'a> {
    config_hash: &'a str,
    seed: u64,
    params_hash: &'a str,
    check: &'a str,
    passed: bool,
    failed: Vec<String>,
    epsilon: f64,
    alpha: f64,
    samples: usize,
    spectral_radius_max: f64,
    contractive: bool,
    iss: IssDocument,
    #[serde(skip_serializing_if = "Option::is_none")]
    centralized: Option<&'a CentralizedConditions>,
    #[serde(skip_serializing_if = "Option::is_none")]
    decentralized: Option<&'a DecentralizedConditions>,
}

/// Failed condition names for the requested group(s), including the
/// analytic-bound variant of (c).
fn failures(report: &StabilityReport, check: CheckKind) -> Vec<String> {
    let mut out = Vec::new();
    let mut push = |group: &str, name: &str, cond: Option<Condition>| {
        if cond.is_some_and(|c| !c.passed) {
            out.push(format!("{group}.{name}"));
        }
    };
    if check != CheckKind::Decentralized {
        if let Some(c) = &report.centralized {
            push("theorem2", "a", Some(c.a));
            push("theorem2", "b", Some(c.b));
            push("theorem2", "c", Some(c.c));
            push("theorem2", "c_analytic", c.c_analytic);
        }
    }
    if check != CheckKind::Centralized {
        if let Some(d) = &report.decentralized {
            push("corollary1", "a", Some(d.a));
            push("corollary1", "b", Some(d.b));
            push("corollary1", "c", Some(d.c));
            push("corollary1", "c_analytic", d.c_analytic);
        }
    }
    out
}

fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let bins = bins.max(1);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return Vec::new();
    }
    if hi <= lo {
        return vec![(lo, hi, values.len())];
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (lo + b as f64 * width, lo + (b + 1) as f64 * width, c))
        .collect()
}

fn fmt_condition(out: &mut String, label: &str, cond: &Condition) {
    let _ = writeln!(
        out,
        "  ({label}) {:<4} margin {:+.6e}",
        if cond.passed { "PASS" } else { "FAIL" },
        cond.margin
    );
}

fn certify_text(doc: &CertifyDocument, report: &StabilityReport, horizon: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "stability certificate");
    let _ = writeln!(s, "config_hash: {}", doc.config_hash);
    let _ = writeln!(s, "seed:        {}", doc.seed);
    let _ = writeln!(s, "params_hash: {}", doc.params_hash);
    let _ = writeln!(s, "epsilon {}  alpha {}  samples {} (t = 0..={horizon})", doc.epsilon, doc.alpha, doc.samples);
    let _ = writeln!(s);
    if let Some(c) = &report.centralized {
        let _ = writeln!(s, "centralized conditions (eig(X^1/2 K X^1/2) in [{:.6e}, {:.6e}])", c.s_eig_min, c.s_eig_max);
        fmt_condition(&mut s, "a", &c.a);
        fmt_condition(&mut s, "b", &c.b);
        fmt_condition(&mut s, "c", &c.c);
        if let Some(ca) = &c.c_analytic {
            fmt_condition(&mut s, "c, analytic bound", ca);
        }
    }
    if let Some(d) = &report.decentralized {
        let _ = writeln!(
            s,
            "per-bus conditions (gain interval [{:.6e}, {:.6e}], adaptation cap {:.6e})",
            d.gain_interval.0, d.gain_interval.1, d.adaptation_cap
        );
        fmt_condition(&mut s, "a", &d.a);
        fmt_condition(&mut s, "b", &d.b);
        fmt_condition(&mut s, "c", &d.c);
        if let Some(ca) = &d.c_analytic {
            fmt_condition(&mut s, "c, analytic bound", ca);
        }
        if let Some(implied) = d.implies_centralized {
            let _ = writeln!(s, "  per-bus ⇒ centralized on these samples: {implied}");
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "spectral radius max {:.12}  (1 − ε = {:.12}, contractive: {})",
        doc.spectral_radius_max,
        1.0 - doc.epsilon,
        doc.contractive
    );
    let _ = writeln!(s, "ISS decay rate {:.6}  asymptotic disturbance gain {:.6e}", doc.iss.decay_rate, doc.iss.asymptotic_disturbance_gain);
    let _ = writeln!(
        s,
        "disturbance gain at T={horizon}: (1 − (1−ε)^T)/ε = {:.6e}; the form (1 − ε^T)/(1 − ε) = {:.6e} does not bound the geometric sum and is not used",
        doc.iss.disturbance_gain_at_horizon, doc.iss.alternative_disturbance_gain_at_horizon
    );
    if let Some(rho) = doc.iss.rho_bar {
        let _ = writeln!(s, "rho_bar along the nominal rollout: {rho:.6e}");
    }
    let _ = writeln!(s);
    if doc.passed {
        let _ = writeln!(s, "result: PASS");
    } else {
        let _ = writeln!(s, "result: FAIL ({})", doc.failed.join(", "));
    }
    s
}

pub fn certify(globals: &Globals, args: &CertifyArgs) -> Result<Status> {
    let ctx = Context::load(globals, args.scenario_config.as_deref())?;
    let (params, params_hash) = load_params(args.params.as_ref(), ctx.cfg.params.as_ref(), "controller")?;
    let (sc, horizon) = ctx.scenario(args.trace.as_deref(), args.horizon)?;
    let phis = samples(&sc, horizon)?;
    let bounds = sc.basis().norm_sq_bounds();
    let report = match args.check {
        CheckKind::Centralized => certify::check_theorem2_bounded(&ctx.model, &params, &phis, Some(&bounds))?,
        _ => certify::check_corollary1_bounded(&ctx.model, &params, &phis, Some(&bounds))?,
    };
    let failed = failures(&report, args.check);
    let passed = failed.is_empty();

    // ρ̄ only makes sense along a bounded trajectory of a certified controller.
    let rho_bar = if passed && horizon >= 2 && params.alpha < 1.0 {
        let q0 = engine::draw_q0(ctx.model.n(), &ctx.cfg.scenario, &mut seeds::rng_for(ctx.root(), "q0"));
        let traj = engine::rollout(
            &ctx.model,
            &sc,
            ControllerKind::Adaptive,
            &params,
            horizon - 1,
            &q0,
            &RolloutOptions::default(),
        )?;
        Some(certify::rho_bar(&ctx.model, &params, &sc, &traj)?.value)
    } else {
        None
    };

    let check = match args.check {
        CheckKind::Centralized => "centralized",
        CheckKind::Decentralized => "decentralized",
        CheckKind::Both => "both",
    };
    let prov = ctx.provenance(
        "certify",
        vec![
            format!("params={params_hash}"),
            format!("check={check}"),
            format!("horizon={horizon}"),
            format!("trace={:?}", args.trace.as_deref().map(file_hash).transpose()?),
        ],
    );
    let eps = report.epsilon;
    let doc = CertifyDocument {
        config_hash: &prov.config_hash,
        seed: prov.seed,
        params_hash: &params_hash,
        check,
        passed,
        failed,
        epsilon: eps,
        alpha: report.alpha,
        samples: phis.len(),
        spectral_radius_max: report.spectral_radius_max,
        contractive: report.contractive(),
        iss: IssDocument {
            decay_rate: report.iss.decay_rate,
            asymptotic_disturbance_gain: report.iss.asymptotic_disturbance_gain,
            disturbance_gain_at_horizon: if eps > 0.0 && eps < 1.0 {
                (1.0 - (1.0 - eps).powi(horizon as i32)) / eps
            } else {
                f64::NAN
            },
            alternative_disturbance_gain_at_horizon: certify::printed_disturbance_gain(eps, horizon),
            rho_bar,
        },
        centralized: report.centralized.as_ref(),
        decentralized: report.decentralized.as_ref(),
    };

    let text = certify_text(&doc, &report, horizon);
    prov.write(&ctx.path("certify_report.txt"), &text)?;
    let toml_text =
        toml::to_string(&doc).map_err(|e| Error::Config(format!("serializing report: {e}")))?;
    prov.write(&ctx.path("certify_report.toml"), &toml_text)?;

    let mut radii = String::from("t,spectral_radius\n");
    for (t, r) in report.spectral_radii.iter().enumerate() {
        let _ = writeln!(radii, "{t},{r:.17e}");
    }
    prov.write(&ctx.path("spectral_radii.csv"), &radii)?;
    let mut hist = String::from("bin_lo,bin_hi,count\n");
    for (lo, hi, c) in histogram(&report.spectral_radii, args.bins) {
        let _ = writeln!(hist, "{lo:.17e},{hi:.17e},{c}");
    }
    prov.write(&ctx.path("spectral_histogram.csv"), &hist)?;

    print!("{text}");
    Ok(if passed {
        Status::Success
    } else {
        Status::ConditionFailed
    })
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Debug, Serialize)]
struct SimulateSummary<'a> {
    config_hash: &'a str,
    seed: u64,
    params_hash: &'a str,
    controller: String,
    horizon: usize,
    buses: usize,
    certified: bool,
    clamp: bool,
    p_index: PIndex,
    total_cost: f64,
    voltage_cost: f64,
    action_cost: f64,
    saturation_count: usize,
    saturated_steps: usize,
    max_abs_deviation: f64,
}

pub fn simulate(globals: &Globals, args: &SimulateArgs) -> Result<Status> {
    let ctx = Context::load(globals, args.scenario_config.as_deref())?;
    let (params, params_hash) = load_params(args.params.as_ref(), ctx.cfg.params.as_ref(), "controller")?;
    let kind: ControllerKind = args.controller.map_or(ctx.cfg.simulate.controller, Into::into);
    let (sc, horizon) = ctx.scenario(args.trace.as_deref(), args.horizon)?;

    let is_certified = certified(&ctx.model, &params, kind, &sc, horizon)?;
    if !is_certified && !globals.allow_uncertified {
        eprintln!(
            "refusing to simulate: {kind} parameters are not certified (run `certify` for margins, or pass --allow-uncertified)"
        );
        return Ok(Status::ConditionFailed);
    }

    let opts = RolloutOptions {
        clamp: ctx.cfg.simulate.clamp && !args.no_clamp,
        p_index: if args.lagged {
            PIndex::Lagged
        } else {
            ctx.cfg.simulate.p_index
        },
        ..RolloutOptions::default()
    };
    let q0 = engine::draw_q0(ctx.model.n(), &ctx.cfg.scenario, &mut seeds::rng_for(ctx.root(), "q0"));
    let traj = engine::rollout(&ctx.model, &sc, kind, &params, horizon, &q0, &opts)?;
    let cost = engine::cost(&traj, &ctx.cfg.cost)?;

    let prov = ctx.provenance(
        "simulate",
        vec![
            format!("params={params_hash}"),
            format!("controller={kind}"),
            format!("horizon={horizon}"),
            format!("clamp={} p_index={:?}", opts.clamp, opts.p_index),
            format!("trace={:?}", args.trace.as_deref().map(file_hash).transpose()?),
        ],
    );

    let path = ctx.path("trajectory.csv");
    let mut w = prov.create(&path)?;
    traj.write_csv(&mut w)?;
    w.flush().map_err(io_err(&path))?;

    if args.emit_plot_data || ctx.cfg.simulate.emit_plot_data {
        let path = ctx.path("plot_voltage_deviation.csv");
        let mut w = prov.create(&path)?;
        traj.write_voltage_plot(&mut w)?;
        w.flush().map_err(io_err(&path))?;
        let path = ctx.path("plot_reactive_power.csv");
        let mut w = prov.create(&path)?;
        traj.write_reactive_plot(&mut w)?;
        w.flush().map_err(io_err(&path))?;
    }

    let summary = SimulateSummary {
        config_hash: &prov.config_hash,
        seed: prov.seed,
        params_hash: &params_hash,
        controller: kind.to_string(),
        horizon,
        buses: ctx.model.n(),
        certified: is_certified,
        clamp: opts.clamp,
        p_index: opts.p_index,
        total_cost: cost.total,
        voltage_cost: cost.per_step.iter().fold(0.0, |acc, (v, _)| acc + v),
        action_cost: cost.per_step.iter().fold(0.0, |acc, (_, u)| acc + u),
        saturation_count: traj.saturation_count(),
        saturated_steps: traj.saturated.iter().filter(|s| s.iter().any(|&b| b)).count(),
        max_abs_deviation: traj.max_abs_deviation(),
    };
    let text = toml::to_string(&summary).map_err(|e| Error::Config(format!("serializing summary: {e}")))?;
    prov.write(&ctx.path("summary.toml"), &text)?;
    println!(
        "{kind} controller, T={horizon}: total cost {:.6}, {} saturated actions, max |ṽ| {:.6e}",
        cost.total,
        summary.saturation_count,
        summary.max_abs_deviation
    );
    Ok(Status::Success)
}

// ---------------------------------------------------------------------------
// train

pub fn train(globals: &Globals, args: &TrainArgs) -> Result<Status> {
    let ctx = Context::load(globals, args.scenario_config.as_deref())?;
    let mut config = ctx.cfg.train.clone();
    if let Some(c) = args.controller {
        config.kind = c.into();
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(b) = args.batch {
        config.batch_size = b;
    }
    if let Some(h) = args.horizon {
        config.horizon = h;
    }
    if let Some(lr) = args.lr {
        config.learning_rate = lr;
    }
    if let Some(eps) = args.epsilon {
        config.epsilon = eps;
    }
    if args.alpha.is_some() {
        config.alpha = args.alpha;
    }
    config.seed = ctx.root();
    config.cost = ctx.cfg.cost;
    config.validate()?;

    let mut sampler = SinusoidalSampler {
        model: &ctx.model,
        config: ctx.cfg.scenario.clone(),
        horizon: config.horizon,
        seed: seeds::derive_seed(ctx.root(), "training"),
    };
    let fit = train::fit(&ctx.model, &config, &mut sampler)?;

    let train_toml =
        toml::to_string(&config).map_err(|e| Error::Config(format!("serializing train config: {e}")))?;
    let prov = ctx.provenance("train", vec![train_toml]);

    let params_path = args.out.clone().unwrap_or_else(|| ctx.path("params.toml"));
    prov.write(&params_path, &fit.params.to_toml()?)?;
    let log_path = args.log.clone().unwrap_or_else(|| ctx.path("train_log.csv"));
    let mut w = prov.create(&log_path)?;
    fit.log.write_csv(&mut w)?;
    w.flush().map_err(io_err(&log_path))?;

    match (fit.log.records.first(), fit.best_epoch) {
        (Some(first), Some(best)) => println!(
            "{} controller: {} epochs, loss {:.6} → {:.6} (best epoch {best}); params {}",
            config.kind,
            config.epochs,
            first.loss,
            fit.log.records[best].loss,
            params_path.display()
        ),
        _ => println!(
            "{} controller: no epochs run, wrote the initialization to {}",
            config.kind,
            params_path.display()
        ),
    }
    Ok(Status::Success)
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Serialize)]
struct RatioRow {
    ratio: f64,
    adaptive: Stats,
    linear: Stats,
    relative_improvement: f64,
    adaptive_wins: usize,
}

#[derive(Debug, Serialize)]
struct EvaluateDocument<'a> {
    config_hash: &'a str,
    seed: u64,
    adaptive_params_hash: &'a str,
    linear_params_hash: &'a str,
    scenarios: usize,
    horizon: usize,
    certified_adaptive: bool,
    certified_linear: bool,
    rows: Vec<RatioRow>,
}

pub fn evaluate(globals: &Globals, args: &EvaluateArgs) -> Result<Status> {
    let ctx = Context::load(globals, args.scenario_config.as_deref())?;
    let (adaptive, adaptive_hash) =
        load_params(args.adaptive.as_ref(), ctx.cfg.adaptive_params.as_ref(), "adaptive")?;
    let (linear, linear_hash) = load_params(args.linear.as_ref(), ctx.cfg.linear_params.as_ref(), "linear")?;
    let count = args.scenarios.unwrap_or(ctx.cfg.evaluate.scenarios);
    let horizon = args.horizon.unwrap_or(ctx.cfg.scenario.horizon.max(1) as usize);
    let ratios = args.ratios.clone().unwrap_or_else(|| ctx.cfg.evaluate.ratios.clone());
    if ratios.is_empty() {
        return Err(Error::Config("no injection ratios given".into()));
    }

    let episodes = engine::sinusoidal_episodes(
        &ctx.model,
        &ctx.cfg.scenario,
        horizon,
        seeds::derive_seed(ctx.root(), "test"),
        count,
    )?;
    if episodes.is_empty() {
        return Err(Error::Config("evaluation needs at least one scenario".into()));
    }
    let (cert_adaptive, cert_linear) = engine::certification_flags(&ctx.model, &adaptive, &linear, &episodes)?;
    if !(cert_adaptive && cert_linear) && !globals.allow_uncertified {
        eprintln!(
            "refusing to evaluate: certified adaptive={cert_adaptive}, linear={cert_linear} (pass --allow-uncertified to run anyway)"
        );
        return Ok(Status::ConditionFailed);
    }

    let opts = RolloutOptions::default();
    let sweep: Vec<Comparison> =
        engine::compare_sweep(&ctx.model, &episodes, &adaptive, &linear, &ctx.cfg.cost, &opts, &ratios)?;

    let prov = ctx.provenance(
        "evaluate",
        vec![
            format!("adaptive={adaptive_hash}"),
            format!("linear={linear_hash}"),
            format!("scenarios={count} horizon={horizon} ratios={ratios:?}"),
        ],
    );

    let mut csv = String::from("ratio,scenario,adaptive,linear\n");
    for cmp in &sweep {
        for (h, (a, l)) in cmp.per_scenario.iter().enumerate() {
            let _ = writeln!(csv, "{},{h},{a:.17e},{l:.17e}", cmp.ratio);
        }
    }
    prov.write(&ctx.path("evaluation.csv"), &csv)?;

    let doc = EvaluateDocument {
        config_hash: &prov.config_hash,
        seed: prov.seed,
        adaptive_params_hash: &adaptive_hash,
        linear_params_hash: &linear_hash,
        scenarios: count,
        horizon,
        certified_adaptive: cert_adaptive,
        certified_linear: cert_linear,
        rows: sweep
            .iter()
            .map(|c| RatioRow {
                ratio: c.ratio,
                adaptive: c.adaptive,
                linear: c.linear,
                relative_improvement: c.relative_improvement,
                adaptive_wins: c.adaptive_wins,
            })
            .collect(),
    };
    let text = toml::to_string(&doc).map_err(|e| Error::Config(format!("serializing evaluation: {e}")))?;
    prov.write(&ctx.path("evaluation.toml"), &text)?;

    println!("{count} scenarios, T={horizon}");
    println!("{:>6}  {:>24}  {:>24}  {:>11}", "ratio", "adaptive (mean ± std)", "linear (mean ± std)", "improvement");
    for row in &doc.rows {
        println!(
            "{:>6.2}  {:>11.4} ± {:<10.4}  {:>11.4} ± {:<10.4}  {:>10.2}%",
            row.ratio,
            row.adaptive.mean,
            row.adaptive.std,
            row.linear.mean,
            row.linear.std,
            100.0 * row.relative_improvement
        );
    }
    Ok(Status::Success)
}

// ---------------------------------------------------------------------------
// gen-scenario

pub fn gen_scenario(globals: &Globals, args: &GenScenarioArgs) -> Result<Status> {
    let ctx = Context::load(globals, args.scenario_config.as_deref())?;
    let horizon = args.horizon.unwrap_or(ctx.cfg.scenario.horizon.max(1) as usize);
    if horizon < 1 {
        return Err(Error::Config("a trace needs horizon ≥ 1".into()));
    }
    let (sc, _) = ctx.scenario(None, Some(horizon))?;
    let prov = ctx.provenance("gen-scenario", vec![format!("horizon={horizon}")]);
    let path = args.out.clone().unwrap_or_else(|| ctx.path("scenario.csv"));
    let mut w = prov.create(&path)?;
    scenario::write_trace(&sc, &mut w)?;
    w.flush().map_err(io_err(&path))?;
    println!("wrote {} steps for {} buses to {}", horizon + 1, sc.n(), path.display());
    Ok(Status::Success)
}
