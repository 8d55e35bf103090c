//! Command-line front end.
//!
//! Every command reads one JSON [`RunConfig`], writes its artifacts into the
//! output directory and reports failures on standard error with a fixed exit
//! code: 0 success, 2 configuration error, 3 solver non-convergence,
//! 4 validation failure. Floating-point values in artifacts carry nine
//! significant digits so identical inputs give byte-identical files.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

use crate::ctmc;
use crate::error::Error;
use crate::fluid::{self, FluidSolution};
use crate::format::{round_sig, sig};
use crate::model::{CellModel, ClassProfile, Validation};
use crate::pricing::{self, NotificationMode, PriceSources, PriceTable, RightsBudget};
use crate::reneging::{self, ExactAnalysis, ExactOptions};
use crate::sim::{self, SimConfig, TaggedMode};
use crate::statespace::StateVector;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CONVERGENCE: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "RENEGING_LAB_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "reneging-lab",
    version,
    about = "Multiclass PS cells with impatient users"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Truncated-chain analysis: stationary law, reneging fields, perturbations.
    SolveExact(CommonArgs),
    /// Fluid fixed point and the metrics derived from it.
    SolveFluid(CommonArgs),
    /// Seeded simulation replications.
    Simulate(CommonArgs),
    /// Fluid metrics over the configured arrival-rate grid.
    Sweep(CommonArgs),
    /// Tariff, example bills and price notifications.
    Price(CommonArgs),
    /// Cross-checks exact, fluid and simulated results.
    Validate(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory receiving the artifacts (created if missing).
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides `sim.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Suppresses the summary on standard output.
    #[arg(long)]
    pub quiet: bool,
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::SolveExact(a)
            | Command::SolveFluid(a)
            | Command::Simulate(a)
            | Command::Sweep(a)
            | Command::Price(a)
            | Command::Validate(a) => a,
        }
    }
}

/// Cell description. Volumes and throughputs may be in any consistent
/// units (Mbit and Mbit/s by convention); only their ratio matters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub classes: Vec<ClassProfile>,
    pub mean_flow_size: f64,
    pub arrival_rate: f64,
    pub impatience_rate: f64,
    /// Admits equal throughputs and `impatience_rate = 0` for stable cells.
    #[serde(default)]
    pub relaxed: bool,
}

impl ModelBlock {
    pub fn build(&self) -> crate::Result<CellModel> {
        let validation = if self.relaxed {
            Validation::relaxed()
        } else {
            Validation::default()
        };
        CellModel::with_validation(
            &self.classes,
            self.mean_flow_size,
            self.arrival_rate,
            self.impatience_rate,
            validation,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverBlock {
    pub tail_mass_bound: f64,
    pub field_tolerance: f64,
    pub stationary_tolerance: f64,
    pub max_sweeps: usize,
    pub guard_levels: usize,
    pub escalation_step: usize,
    pub max_escalations: usize,
}

impl Default for SolverBlock {
    fn default() -> Self {
        let o = ExactOptions::default();
        Self {
            tail_mass_bound: o.tail_mass_bound,
            field_tolerance: o.field_tolerance,
            stationary_tolerance: o.stationary_tolerance,
            max_sweeps: o.max_sweeps,
            guard_levels: o.guard_levels,
            escalation_step: o.escalation_step,
            max_escalations: o.max_escalations,
        }
    }
}

impl SolverBlock {
    pub fn options(&self) -> ExactOptions {
        ExactOptions {
            tail_mass_bound: self.tail_mass_bound,
            field_tolerance: self.field_tolerance,
            stationary_tolerance: self.stationary_tolerance,
            max_sweeps: self.max_sweeps,
            guard_levels: self.guard_levels,
            escalation_step: self.escalation_step,
            max_escalations: self.max_escalations,
        }
    }
}

/// Tagged-customer experiment; `class` is numbered from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaggedBlock {
    pub class: usize,
    pub initial_state: Vec<u32>,
    pub trials: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimBlock {
    pub seed: u64,
    /// Defaults to ten relaxation times of the cell.
    pub warmup: Option<f64>,
    pub duration: f64,
    pub replications: usize,
    pub tagged: Option<TaggedBlock>,
}

impl Default for SimBlock {
    fn default() -> Self {
        Self {
            seed: 1,
            warmup: None,
            duration: 2000.0,
            replications: 20,
            tagged: None,
        }
    }
}

impl SimBlock {
    pub fn config(&self, model: &CellModel) -> crate::Result<SimConfig> {
        let warmup = self
            .warmup
            .unwrap_or_else(|| SimConfig::default_warmup(model));
        let mut cfg = SimConfig::new(self.seed, warmup, self.duration, self.replications);
        if let Some(t) = &self.tagged {
            let class = external_class(t.class, model.num_classes())?;
            let initial_state = StateVector::new(t.initial_state.clone());
            model.check_state(&initial_state)?;
            cfg.tagged = Some(TaggedMode {
                class,
                initial_state,
                trials: t.trials,
            });
        }
        Ok(cfg)
    }
}

/// One example session billed by `price`; `class` is numbered from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionBlock {
    pub class: usize,
    pub volume_mbyte: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PricingBlock {
    pub flat: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Initial congestion-rights budget for the rights example.
    pub rights_budget: f64,
    /// Defaults to one 100 Mbyte session per class.
    pub sessions: Option<Vec<SessionBlock>>,
    /// Also emits a state-dependent notification at this state.
    pub notification_state: Option<Vec<u32>>,
}

impl Default for PricingBlock {
    fn default() -> Self {
        Self {
            flat: 0.0,
            alpha: 1.0,
            beta: 1.0,
            rights_budget: 100.0,
            sessions: None,
            notification_state: None,
        }
    }
}

/// Arrival-rate grid, given directly or as loads `rho`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepBlock {
    pub arrival_rates: Vec<f64>,
    pub loads: Vec<f64>,
}

impl SweepBlock {
    pub fn grid(&self, model: &CellModel) -> crate::Result<Vec<f64>> {
        if !self.arrival_rates.is_empty() && !self.loads.is_empty() {
            return Err(Error::Config(
                "sweep: give either arrival_rates or loads, not both".into(),
            ));
        }
        if !self.arrival_rates.is_empty() {
            return Ok(self.arrival_rates.clone());
        }
        // rho = lambda * sum_k p_k / mu_k
        let per_unit: f64 = model
            .weights()
            .zip(model.service_rates())
            .map(|(p, mu)| p / mu)
            .sum();
        Ok(self.loads.iter().map(|rho| rho / per_unit).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub sim: SimBlock,
    #[serde(default)]
    pub pricing: PricingBlock,
    #[serde(default)]
    pub sweep: SweepBlock,
}

impl RunConfig {
    pub fn from_json(text: &str) -> crate::Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> crate::Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

fn external_class(index: usize, classes: usize) -> crate::Result<usize> {
    if index >= 1 && index <= classes {
        Ok(index - 1)
    } else {
        Err(Error::UnknownClass { index, classes })
    }
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Convergence(String),
    Validation(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Convergence(_) => EXIT_CONVERGENCE,
            Failure::Validation(_) => EXIT_VALIDATION,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Convergence(m) | Failure::Validation(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Convergence { .. } | Error::GapTooLarge { .. } => {
                Failure::Convergence(e.to_string())
            }
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `args` (program name first) and runs the command.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::Config(format!(
            "{THREADS_ENV} must be a positive integer, got {raw:?}"
        ))
    })?;
    // A second initialization in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn execute(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    let args = cli.command.args();
    let mut config = RunConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        config.sim.seed = seed;
    }
    let model = config.model.build()?;
    fs::create_dir_all(&args.out)?;
    let ctx = Context {
        config: &config,
        model: &model,
        out: &args.out,
        quiet: args.quiet,
    };
    match &cli.command {
        Command::SolveExact(_) => solve_exact(&ctx),
        Command::SolveFluid(_) => solve_fluid(&ctx),
        Command::Simulate(_) => simulate(&ctx),
        Command::Sweep(_) => sweep(&ctx),
        Command::Price(_) => price(&ctx),
        Command::Validate(_) => validate(&ctx),
    }
}

struct Context<'a> {
    config: &'a RunConfig,
    model: &'a CellModel,
    out: &'a Path,
    quiet: bool,
}

impl Context<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }
}

/// Rounds every non-integer number to nine significant digits.
pub fn round_json(value: Value) -> Value {
    match value {
        Value::Number(n) if n.is_f64() => n
            .as_f64()
            .and_then(|x| Number::from_f64(round_sig(x)))
            .map_or(Value::Null, Value::Number),
        Value::Array(items) => Value::Array(items.into_iter().map(round_json).collect()),
        Value::Object(map) => {
            Value::Object(map.into_iter().map(|(k, v)| (k, round_json(v))).collect())
        }
        other => other,
    }
}

fn to_value<T: Serialize>(value: &T) -> CliResult<Value> {
    serde_json::to_value(value).map_err(|e| Failure::Config(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let rounded = round_json(to_value(value)?);
    let mut text =
        serde_json::to_string_pretty(&rounded).map_err(|e| Failure::Config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

#[derive(Serialize)]
struct ExactClassRow {
    class_index: usize,
    reneging_probability: f64,
    reneging_lower: f64,
    reneging_upper: f64,
    pi_dot_source: f64,
    mean_population: f64,
    gamma_mean: f64,
    gamma_lower: f64,
    gamma_upper: f64,
    gamma_excluded_mass: f64,
    field_gap: f64,
}

#[derive(Serialize)]
struct RateBalanceRow {
    reneging_flow: f64,
    first_event_flow: f64,
    impatience_flow: f64,
    bracket_width: f64,
    reneging_error: f64,
    first_event_error: f64,
}

#[derive(Serialize)]
struct ExactSummary<'a> {
    config: &'a RunConfig,
    certified_level: usize,
    max_level: usize,
    states: usize,
    stationary_residual: f64,
    stationary_sweeps: usize,
    mean_total_population: f64,
    classes: Vec<ExactClassRow>,
    rate_balance: RateBalanceRow,
}

fn exact_summary<'a>(config: &'a RunConfig, exact: &ExactAnalysis) -> CliResult<ExactSummary<'a>> {
    let means = exact.mean_population();
    let mut classes = Vec::with_capacity(means.len());
    for (k, p) in exact.reneging_probabilities().iter().enumerate() {
        let g = exact.perturbation_mean(k)?;
        classes.push(ExactClassRow {
            class_index: k + 1,
            reneging_probability: p.value,
            reneging_lower: p.lower,
            reneging_upper: p.upper,
            pi_dot_source: p.pi_dot_source,
            mean_population: means[k],
            gamma_mean: g.value,
            gamma_lower: g.lower,
            gamma_upper: g.upper,
            gamma_excluded_mass: g.excluded_mass,
            field_gap: exact.fields()[k].gap(),
        });
    }
    let b = exact.rate_balance();
    Ok(ExactSummary {
        config,
        certified_level: exact.certified_level(),
        max_level: exact.space().max_level(),
        states: exact.space().len(),
        stationary_residual: exact.stationary().residual(),
        stationary_sweeps: exact.stationary().sweeps(),
        mean_total_population: means.iter().sum(),
        classes,
        rate_balance: RateBalanceRow {
            reneging_flow: b.reneging_flow,
            first_event_flow: b.first_event_flow,
            impatience_flow: b.impatience_flow,
            bracket_width: b.bracket_width,
            reneging_error: b.reneging_error(),
            first_event_error: b.first_event_error(),
        },
    })
}

fn solve_exact(ctx: &Context) -> CliResult<()> {
    let exact = ExactAnalysis::run(ctx.model, &ctx.config.solver.options())?;
    let mut pi = create(&ctx.path("pi.csv"))?;
    ctmc::write_stationary_csv(&mut pi, exact.space(), exact.stationary())?;
    pi.flush()?;
    let mut fields = create(&ctx.path("fields.csv"))?;
    reneging::write_fields_csv(&mut fields, exact.space(), exact.fields())?;
    fields.flush()?;
    let summary = exact_summary(ctx.config, &exact)?;
    write_json(&ctx.path("exact_summary.json"), &summary)?;
    ctx.say(format!(
        "states {} (certified level {}, max level {})",
        summary.states, summary.certified_level, summary.max_level
    ));
    for row in &summary.classes {
        ctx.say(format!(
            "class {}: P = {} [{}, {}], Gamma = {}",
            row.class_index,
            sig(row.reneging_probability),
            sig(row.reneging_lower),
            sig(row.reneging_upper),
            sig(row.gamma_mean)
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct FluidClassRow {
    class_index: usize,
    throughput: f64,
    p_tilde: f64,
    gamma_tilde: f64,
}

#[derive(Serialize)]
struct FluidReport<'a> {
    config: &'a RunConfig,
    load: f64,
    s: f64,
    /// IEEE-754 bits of `s`, for lossless re-reading.
    s_bits: String,
    residual: f64,
    global_rate: f64,
    classes: Vec<FluidClassRow>,
}

fn fluid_report<'a>(
    config: &'a RunConfig,
    model: &CellModel,
    f: &FluidSolution,
) -> FluidReport<'a> {
    FluidReport {
        config,
        load: model.load(),
        s: f.s,
        s_bits: format!("{:#018x}", f.s.to_bits()),
        residual: f.residual,
        global_rate: f.global_rate,
        classes: model
            .classes()
            .iter()
            .enumerate()
            .map(|(k, c)| FluidClassRow {
                class_index: k + 1,
                throughput: c.throughput,
                p_tilde: f.reneging_probabilities[k],
                gamma_tilde: f.perturbations[k],
            })
            .collect(),
    }
}

fn solve_fluid(ctx: &Context) -> CliResult<()> {
    let f = FluidSolution::solve(ctx.model)?;
    let report = fluid_report(ctx.config, ctx.model, &f);
    write_json(&ctx.path("fluid.json"), &report)?;
    ctx.say(format!("S = {}", sig(f.s)));
    for row in &report.classes {
        ctx.say(format!(
            "class {}: P~ = {}, Gamma~ = {}",
            row.class_index,
            sig(row.p_tilde),
            sig(row.gamma_tilde)
        ));
    }
    Ok(())
}

fn estimates_value(estimates: &sim::SimEstimates) -> CliResult<Value> {
    let mut v = to_value(estimates)?;
    if let Some(tagged) = v.get_mut("tagged").and_then(Value::as_object_mut) {
        if let Some(class) = tagged.remove("class").and_then(|c| c.as_u64()) {
            tagged.insert("class_index".into(), Value::from(class + 1));
        }
    }
    Ok(v)
}

#[derive(Serialize)]
struct SimulationReport<'a> {
    config: &'a RunConfig,
    warmup: f64,
    estimates: Value,
    pasta_chi_square: f64,
}

fn run_simulation(ctx: &Context) -> CliResult<(SimConfig, sim::SimEstimates)> {
    let cfg = ctx.config.sim.config(ctx.model)?;
    let estimates = sim::replicate(ctx.model, &cfg)?;
    Ok((cfg, estimates))
}

fn simulate(ctx: &Context) -> CliResult<()> {
    let (cfg, estimates) = run_simulation(ctx)?;
    let report = SimulationReport {
        config: ctx.config,
        warmup: cfg.warmup,
        estimates: estimates_value(&estimates)?,
        pasta_chi_square: estimates.pasta_chi_square(),
    };
    write_json(&ctx.path("simulation.json"), &report)?;
    ctx.say(format!(
        "E|n| = {} (SE {})",
        sig(estimates.mean_total_population.mean),
        estimates
            .mean_total_population
            .standard_error
            .map_or("-".into(), sig)
    ));
    for (k, e) in estimates.reneging.iter().enumerate() {
        ctx.say(format!(
            "class {}: reneging fraction {} (SE {})",
            k + 1,
            sig(e.mean),
            e.standard_error.map_or("-".into(), sig)
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    config: &'a RunConfig,
    points: usize,
    skipped: Vec<SkippedPoint>,
    diagnostics: &'a fluid::SweepDiagnostics,
}

#[derive(Serialize)]
struct SkippedPoint {
    arrival_rate: f64,
    load: f64,
}

fn sweep(ctx: &Context) -> CliResult<()> {
    let grid = ctx.config.sweep.grid(ctx.model)?;
    let table = fluid::load_sweep(ctx.model, &grid)?;
    let mut csv = create(&ctx.path("sweep.csv"))?;
    fluid::write_sweep_csv(&mut csv, &table, ctx.model.num_classes())?;
    csv.flush()?;
    let mut plot = create(&ctx.path("sweep_plotdata.csv"))?;
    fluid::emit_sweep_plotdata(&mut plot, &table)?;
    plot.flush()?;
    let summary = SweepSummary {
        config: ctx.config,
        points: table.rows.len(),
        skipped: table
            .skipped
            .iter()
            .map(|&(arrival_rate, load)| SkippedPoint { arrival_rate, load })
            .collect(),
        diagnostics: &table.diagnostics,
    };
    write_json(&ctx.path("sweep_summary.json"), &summary)?;
    ctx.say(format!(
        "{} overloaded points, {} skipped; ordering preserved: {}",
        summary.points,
        summary.skipped.len(),
        table.diagnostics.ordering_preserved
    ));
    Ok(())
}

#[derive(Serialize)]
struct TariffClassRow {
    class_index: usize,
    throughput: f64,
    gamma_tilde: f64,
    price_per_mbyte: f64,
}

#[derive(Serialize)]
struct BillRow {
    class_index: usize,
    volume_mbyte: f64,
    charge: f64,
}

#[derive(Serialize)]
struct RightsStep {
    class_index: usize,
    volume_mbyte: f64,
    remaining: f64,
    throttled: bool,
}

#[derive(Serialize)]
struct TariffReport<'a> {
    config: &'a RunConfig,
    s: f64,
    flat_rate: f64,
    alpha: f64,
    classes: Vec<TariffClassRow>,
    bills: Vec<BillRow>,
    rights_beta: f64,
    rights_initial: f64,
    rights: Vec<RightsStep>,
    notifications: Vec<PriceTable>,
}

fn price(ctx: &Context) -> CliResult<()> {
    let p = &ctx.config.pricing;
    let model = ctx.model;
    let f = FluidSolution::solve(model)?;
    let tariff = pricing::build_tariff(model, &f, p.flat, p.alpha)?;
    let sessions: Vec<SessionBlock> = p.sessions.clone().unwrap_or_else(|| {
        (1..=model.num_classes())
            .map(|class| SessionBlock {
                class,
                volume_mbyte: 100.0,
            })
            .collect()
    });

    let mut bills = Vec::with_capacity(sessions.len());
    let mut rights = Vec::with_capacity(sessions.len());
    let mut budget = RightsBudget::new(p.rights_budget, p.beta)?;
    for s in &sessions {
        let k = external_class(s.class, model.num_classes())?;
        bills.push(BillRow {
            class_index: s.class,
            volume_mbyte: s.volume_mbyte,
            charge: pricing::bill_session(&tariff, k, s.volume_mbyte)?,
        });
        let (next, throttled) = pricing::consume_rights(&budget, &f, k, s.volume_mbyte)?;
        budget = next;
        rights.push(RightsStep {
            class_index: s.class,
            volume_mbyte: s.volume_mbyte,
            remaining: budget.remaining,
            throttled,
        });
    }

    let zeros = StateVector::zeros(model.num_classes());
    let mut notifications = vec![pricing::price_table_notification(
        model,
        p.alpha,
        NotificationMode::Fluid,
        &zeros,
        PriceSources {
            fluid: Some(&f),
            exact: None,
        },
    )?];
    if let Some(counts) = &p.notification_state {
        let state = StateVector::new(counts.clone());
        model.check_state(&state)?;
        let exact = ExactAnalysis::run(model, &ctx.config.solver.options())?;
        notifications.push(pricing::price_table_notification(
            model,
            p.alpha,
            NotificationMode::StateDependent,
            &state,
            PriceSources {
                fluid: Some(&f),
                exact: Some(&exact),
            },
        )?);
    }

    let report = TariffReport {
        config: ctx.config,
        s: f.s,
        flat_rate: tariff.flat_rate,
        alpha: tariff.alpha,
        classes: (0..model.num_classes())
            .map(|k| TariffClassRow {
                class_index: k + 1,
                throughput: tariff.throughputs[k],
                gamma_tilde: f.perturbations[k],
                price_per_mbyte: tariff.prices_per_mbyte[k],
            })
            .collect(),
        bills,
        rights_beta: p.beta,
        rights_initial: p.rights_budget,
        rights,
        notifications,
    };
    write_json(&ctx.path("tariff.json"), &report)?;
    for row in &report.classes {
        ctx.say(format!(
            "class {}: {} per Mbyte",
            row.class_index,
            sig(row.price_per_mbyte)
        ));
    }
    Ok(())
}

/// One line of the validation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: String,
    /// `None` for informational rows.
    pub passed: Option<bool>,
    pub detail: String,
}

impl CheckRow {
    fn check(name: impl Into<String>, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: Some(passed),
            detail,
        }
    }

    fn info(name: impl Into<String>, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: None,
            detail,
        }
    }

    fn label(&self) -> &'static str {
        match self.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "INFO",
        }
    }
}

#[derive(Serialize)]
struct ValidationReport<'a> {
    config: &'a RunConfig,
    passed: bool,
    checks: &'a [CheckRow],
}

fn verdict(holds: bool) -> &'static str {
    if holds {
        "conserves flow"
    } else {
        "violates flow conservation"
    }
}

/// Standard errors allowed between simulated and exact values.
const SIM_Z: f64 = 3.0;

fn validate(ctx: &Context) -> CliResult<()> {
    let model = ctx.model;
    let solver = &ctx.config.solver;
    let exact = ExactAnalysis::run(model, &solver.options())?;
    let mut rows = Vec::new();

    let residual = exact.stationary().residual();
    rows.push(CheckRow::check(
        "stationary_residual",
        residual <= solver.stationary_tolerance,
        format!(
            "|pi Q|_inf = {} (tolerance {})",
            sig(residual),
            sig(solver.stationary_tolerance)
        ),
    ));
    for field in exact.fields() {
        rows.push(CheckRow::check(
            format!("field_bracket_class_{}", field.class() + 1),
            field.gap() <= solver.field_tolerance,
            format!(
                "gap {} over levels 0..={} (tolerance {})",
                sig(field.gap()),
                field.certified_level(),
                sig(solver.field_tolerance)
            ),
        ));
    }

    let b = exact.rate_balance();
    let allowance = b.bracket_width + 1e-6 * b.impatience_flow.max(1.0);
    rows.push(CheckRow::check(
        "rate_balance_pi_dot_p",
        b.reneging_error() <= allowance,
        format!(
            "sum lambda_k pi.P_k = {} vs mu_0 E|n| = {} (error {}, allowance {}): {}",
            sig(b.reneging_flow),
            sig(b.impatience_flow),
            sig(b.reneging_error()),
            sig(allowance),
            verdict(b.reneging_error() <= allowance)
        ),
    ));
    rows.push(CheckRow::info(
        "rate_balance_pi_dot_u",
        format!(
            "sum lambda_k pi.u_k = {} vs mu_0 E|n| = {} (error {}): {}",
            sig(b.first_event_flow),
            sig(b.impatience_flow),
            sig(b.first_event_error()),
            verdict(b.first_event_error() <= allowance)
        ),
    ));
    for p in exact.reneging_probabilities() {
        rows.push(CheckRow::info(
            format!("reneging_class_{}", p.class + 1),
            format!(
                "pi.P = {} [{}, {}], pi.u = {}",
                sig(p.value),
                sig(p.lower),
                sig(p.upper),
                sig(p.pi_dot_source)
            ),
        ));
    }

    let (_, est) = run_simulation(ctx)?;
    let exact_total: f64 = exact.mean_population().iter().sum();
    let sim_total = est.mean_total_population;
    rows.push(CheckRow::check(
        "sim_mean_population",
        sim_total.covers(exact_total, SIM_Z),
        format!(
            "exact {} vs sim {} (SE {})",
            sig(exact_total),
            sig(sim_total.mean),
            sim_total.standard_error.map_or("-".into(), sig)
        ),
    ));
    for (p, e) in exact.reneging_probabilities().iter().zip(&est.reneging) {
        let nearest = e.mean.clamp(p.lower, p.upper);
        rows.push(CheckRow::check(
            format!("sim_reneging_class_{}", p.class + 1),
            e.covers(nearest, SIM_Z),
            format!(
                "exact [{}, {}] vs sim {} (SE {})",
                sig(p.lower),
                sig(p.upper),
                sig(e.mean),
                e.standard_error.map_or("-".into(), sig)
            ),
        ));
    }
    rows.push(CheckRow::check(
        "sim_flow_conservation",
        est.flow_conserved,
        "arrivals = completions + renegings + in system".into(),
    ));
    rows.push(CheckRow::info(
        "sim_pasta_chi_square",
        sig(est.pasta_chi_square()),
    ));

    match FluidSolution::solve(model) {
        Ok(f) => {
            for (p, pt) in exact
                .reneging_probabilities()
                .iter()
                .zip(&f.reneging_probabilities)
            {
                rows.push(CheckRow::info(
                    format!("fluid_vs_exact_class_{}", p.class + 1),
                    format!(
                        "fluid {} vs exact {} (relative difference {})",
                        sig(*pt),
                        sig(p.value),
                        sig((pt - p.value).abs() / p.value.abs().max(f64::MIN_POSITIVE))
                    ),
                ));
            }
        }
        Err(e) => rows.push(CheckRow::info("fluid_vs_exact", e.to_string())),
    }

    let passed = rows.iter().all(|r| r.passed != Some(false));
    write_json(
        &ctx.path("validation.json"),
        &ValidationReport {
            config: ctx.config,
            passed,
            checks: &rows,
        },
    )?;
    for r in &rows {
        ctx.say(format!("{} {}: {}", r.label(), r.name, r.detail));
    }
    if passed {
        Ok(())
    } else {
        let failed: Vec<&str> = rows
            .iter()
            .filter(|r| r.passed == Some(false))
            .map(|r| r.name.as_str())
            .collect();
        Err(Failure::Validation(format!(
            "failed checks: {}",
            failed.join(", ")
        )))
    }
}
