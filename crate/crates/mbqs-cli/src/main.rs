use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use mbqs::complex::CellComplex;
use mbqs::fermion::{kitaev_report, KitaevPlan};
use mbqs::gauss::{corrected_run, finalize, ErrorConfig, ErrorRates};
use mbqs::imagtime::{ground_state_fidelity, run_imaginary, success_statistics};
use mbqs::oracle::{overlap_identity_check, ModelSpec, SpinModel};
use mbqs::protocol::{run, trial_seed, GaussMethod, InitialState, Outcomes, SimPlan};
use mbqs::qstate::fidelity;

const VERIFY_SEED: u64 = 20;
const DEFAULT_CAP: usize = 20;

#[derive(Parser)]
#[command(name = "mbqs", version, about = "Measurement-based simulation of lattice models on cluster states")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON run config; defaults are used for any subcommand without one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the JSON result here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    trials: Option<u64>,
    /// Largest qudit count accepted for dense work.
    #[arg(long, global = true)]
    cap: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Seeded real-time trajectories compared with the Trotter oracle.
    Simulate,
    /// Z2 gauge theory with sampled resource errors, decoded and corrected.
    GaussDemo,
    /// Post-selected imaginary-time run on an Ising ring.
    ImagTime,
    /// Partition function by enumeration and by cluster-state overlap.
    Partition,
    /// Kitaev chain trajectories compared with the Jordan-Wigner oracle.
    Kitaev,
    /// Acceptance checks; exit code 2 if any fails.
    Verify {
        #[arg(long)]
        all: bool,
        #[arg(long)]
        spt: bool,
        /// Criterion number, repeatable.
        #[arg(long = "criterion", value_parser = clap::value_parser!(u8).range(1..=10))]
        criteria: Vec<u8>,
    },
}

enum Failure {
    Invalid(String),
    Acceptance(String),
}

impl From<mbqs::Error> for Failure {
    fn from(e: mbqs::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn invalid<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Invalid(msg.into()))
}

#[derive(Deserialize, Serialize, Clone, Copy, Default, PartialEq)]
#[serde(rename_all = "kebab-case")]
enum GaussChoice {
    #[default]
    None,
    EnergyCost,
    Syndrome,
}

#[derive(Deserialize, Serialize, Clone, Copy, Default)]
#[serde(rename_all = "kebab-case")]
enum InitChoice {
    Zero,
    #[default]
    Plus,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChargeSpec {
    coords: Vec<usize>,
    q: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SimulateConfig {
    extents: Vec<usize>,
    #[serde(rename = "N")]
    modulus: u32,
    degree: usize,
    lambda: f64,
    dt: f64,
    steps: usize,
    gauss: GaussChoice,
    cost: Option<f64>,
    charges: Vec<ChargeSpec>,
    init: InitChoice,
    seed: Option<u64>,
    trials: u64,
    cap: Option<usize>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            extents: vec![3],
            modulus: 2,
            degree: 1,
            lambda: 1.0,
            dt: 0.1,
            steps: 3,
            gauss: GaussChoice::None,
            cost: None,
            charges: Vec::new(),
            init: InitChoice::Zero,
            seed: None,
            trials: 100,
            cap: None,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GaussDemoConfig {
    extents: Vec<usize>,
    lambda: f64,
    dt: f64,
    steps: usize,
    rates: RateConfig,
    seed: Option<u64>,
    trials: u64,
    cap: Option<usize>,
}

#[derive(Deserialize, Serialize, Clone, Copy)]
#[serde(deny_unknown_fields, default)]
struct RateConfig {
    z1: f64,
    z2: f64,
    x1: f64,
    x2: f64,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig { z1: 0.03, z2: 0.0, x1: 0.0, x2: 0.0 }
    }
}

impl Default for GaussDemoConfig {
    fn default() -> Self {
        GaussDemoConfig {
            extents: vec![2, 2],
            lambda: 0.7,
            dt: 0.1,
            steps: 3,
            rates: RateConfig::default(),
            seed: None,
            trials: 20,
            cap: None,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ImagTimeConfig {
    length: usize,
    lambda: f64,
    /// Imaginary-time step, which is also the per-measurement α.
    dt: f64,
    steps: usize,
    seed: Option<u64>,
    trials: u64,
    cap: Option<usize>,
}

impl Default for ImagTimeConfig {
    fn default() -> Self {
        ImagTimeConfig { length: 3, lambda: 1.0, dt: 0.05, steps: 40, seed: None, trials: 10_000, cap: None }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PartitionConfig {
    extents: Vec<usize>,
    #[serde(rename = "N")]
    modulus: u32,
    degree: usize,
    beta: f64,
    #[serde(rename = "J")]
    coupling: f64,
    cap: Option<usize>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig { extents: vec![2, 2], modulus: 2, degree: 1, beta: 0.3, coupling: 1.0, cap: None }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct KitaevConfig {
    #[serde(rename = "L")]
    length: usize,
    w: f64,
    mu: f64,
    dt: f64,
    steps: usize,
    periodic: bool,
    seed: Option<u64>,
    trials: u64,
}

impl Default for KitaevConfig {
    fn default() -> Self {
        KitaevConfig { length: 3, w: 1.0, mu: 0.7, dt: 0.1, steps: 2, periodic: true, seed: None, trials: 100 }
    }
}

fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Outcome<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).or_else(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).or_else(|e| invalid(format!("config {}: {e}", path.display())))
}

fn require_seed(flag: Option<u64>, config: Option<u64>) -> Outcome<u64> {
    flag.or(config).map_or_else(|| invalid("field `seed` is required for sampled runs (config or --seed)"), Ok)
}

fn check_cap(what: &str, count: usize, cap: usize) -> Outcome<()> {
    if count > cap {
        return invalid(format!("{what}: {count} qudits exceed the cap of {cap} (raise --cap)"));
    }
    Ok(())
}

fn torus(field: &str, extents: &[usize], modulus: u32) -> Outcome<CellComplex> {
    if extents.is_empty() || extents.contains(&0) {
        return invalid(format!("field `{field}` must list positive extents"));
    }
    Ok(CellComplex::torus(extents.to_vec(), modulus)?)
}

#[derive(Serialize)]
struct SimulateResult {
    extents: Vec<usize>,
    #[serde(rename = "N")]
    modulus: u32,
    degree: usize,
    lambda: f64,
    dt: f64,
    steps: usize,
    gauss: GaussChoice,
    seed: u64,
    trials: u64,
    measurements_per_trial: usize,
    worst_fidelity: f64,
    mean_fidelity: f64,
    fidelities: Vec<f64>,
}

fn simulate(common: &Common) -> Outcome<serde_json::Value> {
    let cfg: SimulateConfig = load(common.config.as_deref())?;
    let seed = require_seed(common.seed, cfg.seed)?;
    let trials = common.trials.unwrap_or(cfg.trials);
    let space = torus("extents", &cfg.extents, cfg.modulus)?;
    if cfg.degree == 0 || cfg.degree > cfg.extents.len() {
        return invalid(format!("field `degree` must lie in 1..={}", cfg.extents.len()));
    }
    let mut model = ModelSpec::new(space.clone(), cfg.degree, cfg.lambda, cfg.dt)?;
    let gauss = match cfg.gauss {
        GaussChoice::None => GaussMethod::None,
        GaussChoice::Syndrome => GaussMethod::Syndrome,
        GaussChoice::EnergyCost => {
            let cost = cfg.cost.map_or_else(|| invalid("field `cost` is required with gauss = energy-cost"), Ok)?;
            model = model.with_cost(cost);
            GaussMethod::EnergyCost
        }
    };
    for (i, c) in cfg.charges.iter().enumerate() {
        if cfg.degree < 2 {
            return invalid("field `charges` needs degree >= 2");
        }
        let cell = space
            .cells(cfg.degree - 2)
            .into_iter()
            .find(|&c2| space.coords(c2) == c.coords)
            .map_or_else(|| invalid(format!("field `charges[{i}].coords` names no ({})-cell", cfg.degree - 2)), Ok)?;
        model = model.with_charge(cell, c.q);
    }
    let cap = common.cap.or(cfg.cap).unwrap_or(DEFAULT_CAP);
    check_cap("model", model.sites().len(), cap)?;
    let init = match cfg.init {
        InitChoice::Zero => InitialState::Zero,
        InitChoice::Plus => InitialState::Plus,
    };
    let plan = SimPlan::new(model, cfg.steps).with_gauss(gauss).with_init(init);
    let want = plan.oracle_state()?;
    let fidelities: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| run(&plan, trial_seed(seed, t)).and_then(|r| fidelity(&r.state, &want)))
        .collect::<mbqs::Result<_>>()?;
    let worst = fidelities.iter().copied().fold(1.0, f64::min);
    let mean = if fidelities.is_empty() { 1.0 } else { fidelities.iter().sum::<f64>() / fidelities.len() as f64 };
    to_json(&SimulateResult {
        extents: cfg.extents,
        modulus: cfg.modulus,
        degree: cfg.degree,
        lambda: cfg.lambda,
        dt: cfg.dt,
        steps: cfg.steps,
        gauss: cfg.gauss,
        seed,
        trials,
        measurements_per_trial: plan.measurement_count(),
        worst_fidelity: worst,
        mean_fidelity: mean,
        fidelities,
    })
}

#[derive(Serialize)]
struct GaussTrial {
    trial: u64,
    errors: usize,
    defects: usize,
    fidelity: f64,
    gauss_residual: f64,
}

#[derive(Serialize)]
struct GaussDemoResult {
    extents: Vec<usize>,
    lambda: f64,
    dt: f64,
    steps: usize,
    rates: RateConfig,
    seed: u64,
    trials: Vec<GaussTrial>,
    worst_fidelity: f64,
    worst_gauss_residual: f64,
}

fn gauss_demo(common: &Common) -> Outcome<serde_json::Value> {
    let cfg: GaussDemoConfig = load(common.config.as_deref())?;
    let seed = require_seed(common.seed, cfg.seed)?;
    let trials = common.trials.unwrap_or(cfg.trials);
    if cfg.extents.len() != 2 {
        return invalid("field `extents` must have two entries (spatial torus of the Z2 gauge theory)");
    }
    for (name, p) in [("rates.z1", cfg.rates.z1), ("rates.z2", cfg.rates.z2), ("rates.x1", cfg.rates.x1), ("rates.x2", cfg.rates.x2)] {
        if !(0.0..=1.0).contains(&p) {
            return invalid(format!("field `{name}` must lie in [0, 1]"));
        }
    }
    let space = torus("extents", &cfg.extents, 2)?;
    let cap = common.cap.or(cfg.cap).unwrap_or(DEFAULT_CAP);
    check_cap("model", space.count(1), cap)?;
    let plan = SimPlan::new(ModelSpec::new(space, 2, cfg.lambda, cfg.dt)?, cfg.steps).with_gauss(GaussMethod::Syndrome);
    let rates = ErrorRates { z1: cfg.rates.z1, z2: cfg.rates.z2, x1: cfg.rates.x1, x2: cfg.rates.x2 };
    let stacks = [cfg.steps];
    let results: Vec<GaussTrial> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, t));
            let errors = ErrorConfig::sample(&plan, &rates, &mut rng)?;
            let run = corrected_run(&plan, &errors, &stacks, Outcomes::seeded(rng.gen()))?;
            let rep = finalize(&plan, &errors, &run)?;
            let count = errors.z1.len() + errors.z2.len() + errors.x1.len() + errors.x2.len();
            Ok(GaussTrial {
                trial: t,
                errors: count,
                defects: run.syndromes.defects().len(),
                fidelity: rep.fidelity,
                gauss_residual: rep.gauss_residual,
            })
        })
        .collect::<mbqs::Result<_>>()?;
    let worst_fidelity = results.iter().map(|r| r.fidelity).fold(1.0, f64::min);
    let worst_gauss_residual = results.iter().map(|r| r.gauss_residual).fold(0.0, f64::max);
    to_json(&GaussDemoResult {
        extents: cfg.extents,
        lambda: cfg.lambda,
        dt: cfg.dt,
        steps: cfg.steps,
        rates: cfg.rates,
        seed,
        trials: results,
        worst_fidelity,
        worst_gauss_residual,
    })
}

#[derive(Serialize)]
struct ImagTimeResult {
    alpha: f64,
    steps: usize,
    acceptance_rate: f64,
    fidelity_to_ground_state: f64,
}

fn imag_time(common: &Common) -> Outcome<serde_json::Value> {
    let cfg: ImagTimeConfig = load(common.config.as_deref())?;
    let seed = require_seed(common.seed, cfg.seed)?;
    let trials = common.trials.unwrap_or(cfg.trials);
    if cfg.length < 2 {
        return invalid("field `length` must be at least 2");
    }
    let cap = common.cap.or(cfg.cap).unwrap_or(DEFAULT_CAP);
    check_cap("ring", cfg.length, cap)?;
    let model = ModelSpec::new(torus("length", &[cfg.length], 2)?, 1, cfg.lambda, cfg.dt)?;
    let plan = SimPlan::new(model.clone(), cfg.steps);
    let run = run_imaginary(&plan, seed)?;
    let stats = success_statistics(&plan, trials, seed)?;
    to_json(&ImagTimeResult {
        alpha: cfg.dt,
        steps: cfg.steps,
        acceptance_rate: stats.rate,
        fidelity_to_ground_state: ground_state_fidelity(&model, &run.state)?,
    })
}

#[derive(Serialize)]
struct PartitionResult {
    extents: Vec<usize>,
    #[serde(rename = "N")]
    modulus: u32,
    degree: usize,
    beta: f64,
    #[serde(rename = "J")]
    coupling: f64,
    partition_function: f64,
    overlap: f64,
    rel_err: f64,
}

fn partition(common: &Common) -> Outcome<serde_json::Value> {
    let cfg: PartitionConfig = load(common.config.as_deref())?;
    let complex = torus("extents", &cfg.extents, cfg.modulus)?;
    if cfg.degree == 0 || cfg.degree > cfg.extents.len() {
        return invalid(format!("field `degree` must lie in 1..={}", cfg.extents.len()));
    }
    let cap = common.cap.or(cfg.cap).unwrap_or(DEFAULT_CAP);
    check_cap("spins on (degree-1)-cells", complex.count(cfg.degree - 1), cap)?;
    let model = SpinModel::new(complex, cfg.degree, cfg.beta, cfg.coupling)?;
    let rep = overlap_identity_check(&model)?;
    to_json(&PartitionResult {
        extents: cfg.extents,
        modulus: cfg.modulus,
        degree: cfg.degree,
        beta: cfg.beta,
        coupling: cfg.coupling,
        partition_function: rep.partition,
        overlap: rep.overlap,
        rel_err: rep.rel_err,
    })
}

#[derive(Serialize)]
struct KitaevResult {
    #[serde(rename = "L")]
    length: usize,
    w: f64,
    mu: f64,
    dt: f64,
    steps: usize,
    fidelity: f64,
    parity_drift: f64,
}

fn kitaev(common: &Common) -> Outcome<serde_json::Value> {
    let cfg: KitaevConfig = load(common.config.as_deref())?;
    let seed = require_seed(common.seed, cfg.seed)?;
    let trials = common.trials.unwrap_or(cfg.trials);
    if cfg.length < 2 {
        return invalid("field `L` must be at least 2");
    }
    let mut plan = KitaevPlan::new(cfg.length, cfg.w, cfg.mu, cfg.dt, cfg.steps);
    if !cfg.periodic {
        plan = plan.open();
    }
    let rep = kitaev_report(&plan, trials, seed)?;
    to_json(&KitaevResult {
        length: rep.length,
        w: rep.w,
        mu: rep.mu,
        dt: rep.dt,
        steps: rep.steps,
        fidelity: rep.fidelity,
        parity_drift: rep.parity_drift,
    })
}

fn verify(common: &Common, all: bool, spt: bool, criteria: &[u8]) -> Outcome<(serde_json::Value, bool)> {
    let seed = common.seed.unwrap_or(VERIFY_SEED);
    let mut ids: Vec<u8> = if all { (1..=10).collect() } else { criteria.to_vec() };
    if spt && !all {
        let checks = mbqs::spt::run_suite(seed)?;
        for c in &checks {
            eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        let ok = checks.iter().all(|c| c.passed);
        let rows: Vec<serde_json::Value> = checks
            .iter()
            .map(|c| serde_json::json!({ "name": c.name, "passed": c.passed, "detail": c.detail }))
            .collect();
        if ids.is_empty() {
            return Ok((serde_json::Value::Array(rows), ok));
        }
    }
    if ids.is_empty() {
        return invalid("verify needs --all, --spt or --criterion <k>");
    }
    ids.sort_unstable();
    ids.dedup();
    let results: Vec<mbqs::verify::Criterion> = ids.iter().map(|&id| mbqs::verify::criterion(id, seed)).collect();
    for c in &results {
        eprintln!("{}", c.line());
    }
    let ok = results.iter().all(|c| c.passed);
    Ok((serde_json::to_value(&results).expect("criteria serialize"), ok))
}

fn to_json<T: Serialize>(value: &T) -> Outcome<serde_json::Value> {
    serde_json::to_value(value).or_else(|e| invalid(format!("result does not serialize: {e}")))
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> Outcome<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text).or_else(|e| invalid(format!("cannot write {}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn configure_threads() -> Outcome<()> {
    let Ok(raw) = std::env::var("MBQS_THREADS") else {
        return Ok(());
    };
    let n: usize = match raw.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => return invalid(format!("MBQS_THREADS must be a positive integer, got {raw:?}")),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .or_else(|e| invalid(format!("cannot size the worker pool: {e}")))
}

fn dispatch(cli: &Cli) -> Outcome<()> {
    configure_threads()?;
    let common = &cli.common;
    let (value, ok) = match &cli.command {
        Command::Simulate => (simulate(common)?, true),
        Command::GaussDemo => (gauss_demo(common)?, true),
        Command::ImagTime => (imag_time(common)?, true),
        Command::Partition => (partition(common)?, true),
        Command::Kitaev => (kitaev(common)?, true),
        Command::Verify { all, spt, criteria } => verify(common, *all, *spt, criteria)?,
    };
    emit(&value, common.out.as_deref())?;
    if ok {
        Ok(())
    } else {
        Err(Failure::Acceptance("one or more checks failed".into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Acceptance(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
    }
}
