//! Experiment orchestration: scenario files, optimal and learned runs,
//! sweeps, verification suites and CSV/plot output.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::dql::{self, agent_rng, DqlConfig, EpisodeObjective, RewardLogRow, TrainOutcome};
use crate::env::{EnvConfig, RewardNormalization};
use crate::error::{invalid, Error, Result};
use crate::mobility::{mec_layout, HighwayConfig, LayoutConfig};
use crate::model::{
    dbm_to_watts, Assignment, Fading, Instance, MecServer, ObjectiveBreakdown, ObjectiveWeights, PathLossModel,
    RadioConfig, Trajectory,
};
use crate::neural::{gradient_check, QNetwork};
use crate::solver::{
    brute_force, default_big_m, dp_solve, validate_linearization, ConstraintFamily, LinearizedProgram, DP_STATE_LIMIT,
};

/// Random stream reserved for evaluation seeds.
const EVAL_STREAM: u64 = u64::MAX;

/// Every knob of a run. Missing fields take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub servers: usize,
    pub vehicles: usize,
    pub transmit_power_dbm: f64,
    /// Split equally among the servers.
    pub total_bandwidth_hz: f64,
    pub noise_psd_dbm_hz: f64,
    pub fading: Fading,
    pub core_count: u32,
    pub core_clock_hz: f64,
    pub request_size_kbits: (f64, f64),
    /// Range used to scale request sizes in agent observations.
    pub observed_request_kbits: (f64, f64),
    pub cycles_per_bit: f64,
    pub migration_cost_range: (f64, f64),
    pub weights: ObjectiveWeights,
    pub highway: HighwayConfig,
    pub layout: LayoutConfig,
    /// Slots per training episode.
    pub train_horizon: usize,
    /// Slots per evaluation instance.
    pub eval_horizon: usize,
    pub eval_episodes: usize,
    pub normalization: RewardNormalization,
    pub reward_divisor: Option<f64>,
    pub dql: DqlConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            servers: 3,
            vehicles: 4,
            transmit_power_dbm: 30.0,
            total_bandwidth_hz: 10e6,
            noise_psd_dbm_hz: -174.0,
            fading: Fading::Rayleigh,
            core_count: 4,
            core_clock_hz: 2.5e9,
            request_size_kbits: (50.0, 300.0),
            observed_request_kbits: (50.0, 300.0),
            cycles_per_bit: 500.0,
            migration_cost_range: (0.2, 0.3),
            weights: ObjectiveWeights::default(),
            highway: HighwayConfig::default(),
            layout: LayoutConfig::default(),
            train_horizon: 100,
            eval_horizon: 20,
            eval_episodes: 20,
            normalization: RewardNormalization::Shared,
            reward_divisor: None,
            dql: DqlConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_episodes == 0 {
            return Err(invalid("eval_episodes must be positive"));
        }
        self.env_config(self.eval_horizon)?.validate()?;
        self.env_config(self.train_horizon)?.validate()?;
        self.training_config().validate()
    }

    pub fn radio(&self) -> RadioConfig {
        RadioConfig {
            noise_psd_dbm_hz: self.noise_psd_dbm_hz,
            pathloss: PathLossModel::LogDistance,
            fading: self.fading,
        }
    }

    pub fn mec_servers(&self) -> Result<Vec<MecServer>> {
        if self.servers == 0 {
            return Err(invalid("scenario needs at least one server"));
        }
        let bandwidth = self.total_bandwidth_hz / self.servers as f64;
        mec_layout(&self.highway, &self.layout, self.servers)?
            .into_iter()
            .enumerate()
            .map(|(id, position)| {
                let s = MecServer {
                    id,
                    position,
                    transmit_power_w: dbm_to_watts(self.transmit_power_dbm),
                    bandwidth_hz: bandwidth,
                    core_count: self.core_count,
                    core_clock_hz: self.core_clock_hz,
                };
                s.validate().map(|_| s)
            })
            .collect()
    }

    pub fn env_config(&self, horizon: usize) -> Result<EnvConfig> {
        let kbit = |(lo, hi): (f64, f64)| (lo * 1e3, hi * 1e3);
        Ok(EnvConfig {
            servers: self.mec_servers()?,
            highway: self.highway.clone(),
            radio: self.radio(),
            weights: self.weights,
            vehicles: self.vehicles,
            horizon,
            request_size_bits: kbit(self.request_size_kbits),
            observed_size_bits: kbit(self.observed_request_kbits),
            cycles_per_bit: self.cycles_per_bit,
            migration_cost_range: self.migration_cost_range,
            normalization: self.normalization,
            reward_divisor: self.reward_divisor,
        })
    }

    pub fn training_config(&self) -> DqlConfig {
        DqlConfig {
            seed: self.seed,
            ..self.dql.clone()
        }
    }

    /// The realized evaluation instance for one seed.
    pub fn instance(&self, seed: u64) -> Result<Instance> {
        Ok(self.env_config(self.eval_horizon)?.realize(seed)?.instance)
    }
}

/// Seeds of the evaluation instances derived from a master seed.
pub fn evaluation_seeds(master: u64, count: usize) -> Vec<u64> {
    let mut rng = agent_rng(master, EVAL_STREAM);
    (0..count).map(|_| rng.next_u64()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveRecord {
    pub method: String,
    pub episode: usize,
    pub seed: u64,
    pub computing: f64,
    pub communication: f64,
    pub migration: f64,
    pub total: f64,
}

impl ObjectiveRecord {
    fn new(method: &str, episode: usize, seed: u64, o: &ObjectiveBreakdown) -> Self {
        Self {
            method: method.into(),
            episode,
            seed,
            computing: o.computing,
            communication: o.communication,
            migration: o.migration,
            total: o.total,
        }
    }

    fn from_episode(episode: usize, e: &EpisodeObjective) -> Self {
        Self {
            method: "dql".into(),
            episode,
            seed: e.seed,
            computing: e.computing,
            communication: e.communication,
            migration: e.migration,
            total: e.total,
        }
    }
}

/// Solves one realized instance exactly.
pub fn solve_optimal(inst: &Instance) -> Result<crate::solver::Solution> {
    let states = (inst.num_servers() as f64).powi(inst.num_vehicles() as i32);
    if states > DP_STATE_LIMIT {
        return Err(invalid(format!(
            "{states} joint assignments per slot exceed the exact solver limit of {DP_STATE_LIMIT}; \
             use export-lp and an external MILP solver instead"
        )));
    }
    dp_solve(inst)
}

pub fn run_optimal(cfg: &ScenarioConfig, seeds: &[u64]) -> Result<Vec<ObjectiveRecord>> {
    seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let sol = solve_optimal(&cfg.instance(seed)?)?;
            Ok(ObjectiveRecord::new("optimal", i, seed, &sol.objective))
        })
        .collect()
}

pub fn run_training(cfg: &ScenarioConfig, progress: impl FnMut(usize, &[RewardLogRow])) -> Result<TrainOutcome> {
    dql::train(&cfg.training_config(), &cfg.env_config(cfg.train_horizon)?, progress)
}

pub fn run_inference(cfg: &ScenarioConfig, nets: &[QNetwork], seeds: &[u64]) -> Result<Vec<ObjectiveRecord>> {
    let report = dql::infer(nets, &cfg.env_config(cfg.eval_horizon)?, seeds)?;
    Ok(report
        .episodes
        .iter()
        .enumerate()
        .map(|(i, e)| ObjectiveRecord::from_episode(i, e))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    Cores,
    RequestSize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SweepLevel {
    Cores(u32),
    RequestBand(f64, f64),
}

impl SweepLevel {
    pub fn label(&self) -> String {
        match self {
            Self::Cores(c) => c.to_string(),
            Self::RequestBand(lo, hi) => format!("{lo}-{hi}"),
        }
    }

    pub fn apply(&self, cfg: &ScenarioConfig) -> ScenarioConfig {
        let mut out = cfg.clone();
        match *self {
            Self::Cores(c) => out.core_count = c,
            Self::RequestBand(lo, hi) => out.request_size_kbits = (lo, hi),
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub levels: Vec<SweepLevel>,
    pub replications: usize,
}

impl SweepSpec {
    /// Core counts 4..64 at the scenario clock, or five 50-kbit request bands.
    pub fn standard(axis: SweepAxis, replications: usize) -> Self {
        let levels = match axis {
            SweepAxis::Cores => [4, 8, 16, 32, 64].map(SweepLevel::Cores).to_vec(),
            SweepAxis::RequestSize => (0..5)
                .map(|i| SweepLevel::RequestBand(50.0 + 50.0 * i as f64, 100.0 + 50.0 * i as f64))
                .collect(),
        };
        Self {
            axis,
            levels,
            replications,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.replications == 0 {
            return Err(invalid("sweep needs levels and at least one replication"));
        }
        let axis_ok = self.levels.iter().all(|l| {
            matches!(
                (self.axis, l),
                (SweepAxis::Cores, SweepLevel::Cores(_)) | (SweepAxis::RequestSize, SweepLevel::RequestBand(..))
            )
        });
        if !axis_ok {
            return Err(invalid("sweep level does not belong to the sweep axis"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub axis: String,
    pub level: String,
    pub replication: usize,
    pub seed: u64,
    pub method: String,
    pub computing: f64,
    pub communication: f64,
    pub migration: f64,
    pub total: f64,
}

/// Every cell solves the same realized instances (one per replication), and
/// the learned policy, when given, runs on exactly those instances too.
pub fn run_sweep(cfg: &ScenarioConfig, spec: &SweepSpec, nets: Option<&[QNetwork]>) -> Result<Vec<SweepRecord>> {
    spec.validate()?;
    let seeds = evaluation_seeds(cfg.seed, spec.replications);
    let axis = match spec.axis {
        SweepAxis::Cores => "cores",
        SweepAxis::RequestSize => "request_size",
    };
    let mut rows = Vec::new();
    for level in &spec.levels {
        let cell = level.apply(cfg);
        let mut methods = vec![run_optimal(&cell, &seeds)?];
        if let Some(nets) = nets {
            methods.push(run_inference(&cell, nets, &seeds)?);
        }
        for rec in methods.into_iter().flatten() {
            rows.push(SweepRecord {
                axis: axis.into(),
                level: level.label(),
                replication: rec.episode,
                seed: rec.seed,
                method: rec.method,
                computing: rec.computing,
                communication: rec.communication,
                migration: rec.migration,
                total: rec.total,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub level: String,
    pub method: String,
    pub mean_computing: f64,
    pub mean_communication: f64,
    pub mean_migration: f64,
    pub mean_total: f64,
}

/// Per-level, per-method means in first-appearance order.
pub fn summarize_sweep(rows: &[SweepRecord]) -> Vec<SweepSummary> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.level.clone(), r.method.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(level, method)| {
            let cell: Vec<&SweepRecord> = rows.iter().filter(|r| r.level == level && r.method == method).collect();
            let mean = |f: fn(&SweepRecord) -> f64| cell.iter().map(|r| f(r)).sum::<f64>() / cell.len() as f64;
            SweepSummary {
                mean_computing: mean(|r| r.computing),
                mean_communication: mean(|r| r.communication),
                mean_migration: mean(|r| r.migration),
                mean_total: mean(|r| r.total),
                level,
                method,
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(out: impl Write, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidState(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_csv(fs::File::create(path)?, rows)
}

/// gnuplot script drawing one reward curve per agent from `reward_log.csv`.
pub fn reward_plot_script(agents: usize) -> String {
    let mut s = String::from(
        "set datafile separator ','\nset key autotitle columnhead\nset xlabel 'episode'\nset ylabel 'mean reward'\n\
         set terminal pngcairo size 900,500\nset output 'reward_log.png'\nplot ",
    );
    let curves: Vec<String> = (0..agents)
        .map(|a| format!("'reward_log.csv' using 1:($2=={a} ? $3 : 1/0) with lines title 'agent {a}'"))
        .collect();
    s.push_str(&curves.join(", \\\n     "));
    s.push('\n');
    s
}

/// gnuplot script drawing mean total objective per level and method from
/// `sweep_summary.csv`.
pub fn sweep_plot_script(axis: SweepAxis) -> String {
    let xlabel = match axis {
        SweepAxis::Cores => "cores per server",
        SweepAxis::RequestSize => "request size band (kbit)",
    };
    format!(
        "set datafile separator ','\nset xlabel '{xlabel}'\nset ylabel 'mean objective'\nset style data linespoints\n\
         set terminal pngcairo size 900,500\nset output 'sweep.png'\n\
         plot 'sweep_summary.csv' using 0:($2 eq 'optimal' ? $6 : 1/0):xtic(1) title 'optimal', \\\n     \
         'sweep_summary.csv' using 0:($2 eq 'dql' ? $6 : 1/0):xtic(1) title 'dql'\n"
    )
}

/// Sizes used by the exact-solver and linearization suites.
pub const VERIFY_SIZES: [(usize, usize, usize); 3] = [(2, 2, 3), (3, 2, 2), (2, 3, 2)];

/// Small realized instance with the given number of servers, vehicles and slots.
pub fn small_instance(base: &ScenarioConfig, (n, k, t): (usize, usize, usize), seed: u64) -> Result<Instance> {
    let cfg = ScenarioConfig {
        servers: n,
        vehicles: k,
        eval_horizon: t,
        ..base.clone()
    };
    cfg.instance(seed)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolverCheck {
    pub instances: usize,
    pub max_relative_gap: f64,
    pub failures: usize,
}

/// Compares the dynamic program against exhaustive enumeration.
pub fn verify_solvers(base: &ScenarioConfig, per_size: usize, tolerance: f64) -> Result<SolverCheck> {
    let mut out = SolverCheck::default();
    for (i, size) in VERIFY_SIZES.iter().enumerate() {
        for r in 0..per_size {
            let inst = small_instance(base, *size, base.seed.wrapping_add((i * per_size + r) as u64))?;
            let bf = brute_force(&inst)?.value();
            let dp = dp_solve(&inst)?.value();
            let gap = (dp - bf).abs() / bf.abs().max(f64::MIN_POSITIVE);
            out.instances += 1;
            out.max_relative_gap = out.max_relative_gap.max(gap);
            out.failures += usize::from(gap > tolerance);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinearizationCheck {
    pub pairs: usize,
    pub inconsistent: usize,
    pub count_mismatches: usize,
}

/// Closed-form row counts of the linearized program.
pub fn expected_constraint_count(family: ConstraintFamily, n: usize, k: usize, t: usize) -> usize {
    match family {
        ConstraintFamily::OneServer => k * t,
        ConstraintFamily::ZBelowPrevious | ConstraintFamily::ZAboveBoth => k * n * n * (t - 1),
        ConstraintFamily::ZBelowCurrent => k * n * n * t,
        ConstraintFamily::InitialLink => k * n * n,
        ConstraintFamily::BigMLower | ConstraintFamily::BigMUpper => k * n * t,
        ConstraintFamily::Unreachable => 0,
    }
}

/// Checks the linearized program against the nonlinear objective on random
/// feasible trajectories, and its row counts against the closed forms.
pub fn verify_linearization(base: &ScenarioConfig, pairs: usize) -> Result<LinearizationCheck> {
    let mut out = LinearizationCheck::default();
    let mut rng = agent_rng(base.seed, 7);
    for p in 0..pairs {
        let size = VERIFY_SIZES[p % VERIFY_SIZES.len()];
        let (n, k, t) = size;
        let inst = small_instance(base, size, base.seed.wrapping_add(10_000 + p as u64))?;
        let traj = Trajectory::new(
            (0..t)
                .map(|_| Assignment::new((0..k).map(|_| rng.random_range(0..n)).collect(), n))
                .collect::<Result<_>>()?,
        );
        out.pairs += 1;
        out.inconsistent += usize::from(!validate_linearization(&inst, &traj)?.is_consistent());
        let prog = LinearizedProgram::build(&inst, default_big_m(&inst))?;
        for family in [
            ConstraintFamily::OneServer,
            ConstraintFamily::ZBelowPrevious,
            ConstraintFamily::ZBelowCurrent,
            ConstraintFamily::ZAboveBoth,
            ConstraintFamily::InitialLink,
            ConstraintFamily::BigMLower,
            ConstraintFamily::BigMUpper,
        ] {
            out.count_mismatches += usize::from(prog.count(family) != expected_constraint_count(family, n, k, t));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientCheck {
    pub networks: usize,
    pub max_relative_error: f64,
    pub checked: usize,
}

/// Finite-difference checks on freshly initialized agent networks.
pub fn verify_gradients(base: &ScenarioConfig, networks: usize, per_layer: usize) -> Result<GradientCheck> {
    let env = base.env_config(base.eval_horizon)?;
    let sizes = base.dql.layer_sizes(&env);
    let mut rng = agent_rng(base.seed, 8);
    let mut out = GradientCheck::default();
    for _ in 0..networks {
        let net = QNetwork::new(&sizes, &mut rng)?;
        let batch = 4;
        let inputs = Array2::from_shape_fn((batch, sizes[0]), |_| rng.random_range(-1.0..1.0));
        let targets = Array2::from_shape_fn((batch, *sizes.last().expect("sizes")), |_| rng.random_range(-1.0..0.0));
        let report = gradient_check(&net, &inputs, &targets, 1e-5, per_layer, &mut rng)?;
        out.networks += 1;
        out.checked += report.checked;
        out.max_relative_error = out.max_relative_error.max(report.max_relative_error);
    }
    Ok(out)
}
