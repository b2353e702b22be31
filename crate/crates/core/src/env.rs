//! Multi-agent environment: one agent per edge server, a central controller
//! that checks joint feasibility and hands out per-agent rewards, and the
//! episode dynamics driven by the mobility model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mobility::{self, HighwayConfig};
use crate::model::{
    Assignment, Instance, MecServer, MigrationCostMatrix, ObjectiveWeights, RadioConfig, ServiceRequest,
    Vehicle,
};

/// Features per vehicle in an agent observation.
pub const FEATURES_PER_VEHICLE: usize = 9;

/// Reward given to every agent when the joint action is infeasible.
pub const INFEASIBLE_REWARD: f64 = -1.0;

/// Largest magnitude of a feasible reward.
pub const FEASIBLE_REWARD_CAP: f64 = 0.999;

/// Channel gain range mapped onto `[-1, 1]`, in dB.
const GAIN_DB_RANGE: (f64, f64) = (-170.0, -60.0);

/// How per-agent costs are scaled into rewards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardNormalization {
    /// One divisor for the whole weighted cost, preserving the objective's
    /// trade-off between delay and migration.
    Shared,
    /// A separate divisor per cost term.
    PerTerm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub servers: Vec<MecServer>,
    pub highway: HighwayConfig,
    pub radio: RadioConfig,
    pub weights: ObjectiveWeights,
    pub vehicles: usize,
    pub horizon: usize,
    /// Request sizes are drawn uniformly from this range (bits).
    pub request_size_bits: (f64, f64),
    /// Range used to normalize request sizes in observations (bits).
    pub observed_size_bits: (f64, f64),
    pub cycles_per_bit: f64,
    pub migration_cost_range: (f64, f64),
    pub normalization: RewardNormalization,
    /// Replaces the derived shared divisor when set.
    #[serde(default)]
    pub reward_divisor: Option<f64>,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.servers.is_empty() || self.vehicles == 0 || self.horizon == 0 {
            return Err(invalid("environment needs servers, vehicles and a positive horizon"));
        }
        if self.vehicles > 16 {
            return Err(invalid("at most 16 vehicles fit in an agent action"));
        }
        for s in &self.servers {
            s.validate()?;
        }
        self.highway.validate()?;
        self.weights.validate()?;
        let (lo, hi) = self.request_size_bits;
        if !(lo > 0.0 && hi >= lo) {
            return Err(invalid("request size range must be positive and nonempty"));
        }
        let (olo, ohi) = self.observed_size_bits;
        if !(olo >= 0.0 && ohi > olo) {
            return Err(invalid("observed request size range must be nonempty"));
        }
        if !(self.cycles_per_bit > 0.0) {
            return Err(invalid("cycles per bit must be positive"));
        }
        let (mlo, mhi) = self.migration_cost_range;
        if !(mlo >= 0.0 && mhi >= mlo) {
            return Err(invalid("migration cost range must be non-negative and nonempty"));
        }
        if self.reward_divisor.is_some_and(|z| !(z > 0.0 && z.is_finite())) {
            return Err(invalid("reward divisor must be positive and finite"));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        FEATURES_PER_VEHICLE * self.vehicles
    }

    pub fn action_count(&self) -> usize {
        1 << self.vehicles
    }

    /// Longest distance between any server and any point of the road.
    pub fn max_distance(&self) -> f64 {
        let corners = [
            (0.0, 0.0),
            (self.highway.length_m, 0.0),
            (0.0, self.highway.width_m),
            (self.highway.length_m, self.highway.width_m),
        ];
        self.servers
            .iter()
            .flat_map(|s| corners.iter().map(move |&(x, y)| s.position.distance(&crate::model::Point::new(x, y))))
            .fold(0.0, f64::max)
    }

    /// Normalization constants derived from the configured ranges.
    pub fn reward_scale(&self) -> RewardScale {
        let k = self.vehicles as f64;
        let max_cycles = self.request_size_bits.1 * self.cycles_per_bit;
        let min_capacity = self
            .servers
            .iter()
            .map(MecServer::compute_capacity)
            .fold(f64::INFINITY, f64::min);
        let floor_rate = self
            .servers
            .iter()
            .map(|s| {
                let gain = mobility::mean_gain(self.max_distance(), &self.radio);
                let snr = s.transmit_power_w * gain / self.radio.noise_power_w(s.bandwidth_hz);
                s.bandwidth_hz * (1.0 + snr).log2()
            })
            .fold(f64::INFINITY, f64::min);
        let computing = k * k * max_cycles / min_capacity;
        let communication = k * self.request_size_bits.1 / floor_rate;
        let migration = (k * self.migration_cost_range.1).max(f64::MIN_POSITIVE);
        let w = self.weights;
        let shared = self
            .reward_divisor
            .unwrap_or(w.computing * computing + w.communication * communication + w.migration * migration);
        RewardScale {
            normalization: self.normalization,
            computing,
            communication,
            migration,
            shared,
        }
    }

    /// Materializes one episode: fleet, requests, migration costs and the
    /// channel trace, all drawn from a generator seeded with `seed`.
    pub fn realize(&self, seed: u64) -> Result<Realization> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fleet = mobility::init_vehicles(&self.highway, self.vehicles, &mut rng)?;
        let (lo, hi) = self.request_size_bits;
        let requests = (0..self.vehicles)
            .map(|k| {
                let size = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                ServiceRequest::from_size(k, size, self.cycles_per_bit)
            })
            .collect::<Result<Vec<_>>>()?;
        let n = self.servers.len();
        let (mlo, mhi) = self.migration_cost_range;
        let mut pair_costs = vec![0.0; n * n * self.vehicles];
        for from in 0..n {
            for to in (0..n).filter(|&to| to != from) {
                for k in 0..self.vehicles {
                    pair_costs[(from * n + to) * self.vehicles + k] =
                        if mhi > mlo { rng.random_range(mlo..=mhi) } else { mlo };
                }
            }
        }
        let migration = MigrationCostMatrix::from_fn(n, self.vehicles, self.horizon, |from, to, k, _| {
            pair_costs[(from * n + to) * self.vehicles + k]
        })?;
        let trace = mobility::realize_trace(&fleet, &self.servers, &self.highway, &self.radio, self.horizon, &mut rng)?;
        let initial = Assignment::new(
            fleet.iter().map(|v| mobility::nearest_server(v, &self.servers)).collect(),
            n,
        )?;
        let instance = Instance::new(
            self.servers.clone(),
            requests,
            trace.channels,
            migration,
            self.weights,
            self.radio,
            initial,
        )?;
        Ok(Realization {
            seed,
            fleets: trace.fleets,
            instance,
        })
    }
}

/// Divisors turning per-agent costs into rewards; published so raw costs
/// can be reconstructed from rewards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardScale {
    pub normalization: RewardNormalization,
    pub computing: f64,
    pub communication: f64,
    pub migration: f64,
    pub shared: f64,
}

impl RewardScale {
    /// Reward for a feasible placement with the given per-agent costs.
    pub fn reward(&self, cost: &AgentCost, w: &ObjectiveWeights) -> f64 {
        let magnitude = match self.normalization {
            RewardNormalization::Shared => cost.weighted(w) / self.shared,
            RewardNormalization::PerTerm => {
                w.computing * (cost.computing / self.computing).min(1.0)
                    + w.communication * (cost.communication / self.communication).min(1.0)
                    + w.migration * (cost.migration / self.migration).min(1.0)
            }
        };
        -magnitude.min(FEASIBLE_REWARD_CAP)
    }
}

/// One materialized episode.
#[derive(Clone, Debug)]
pub struct Realization {
    pub seed: u64,
    pub fleets: Vec<Vec<Vehicle>>,
    pub instance: Instance,
}

/// Placement bits of one agent: bit `k` set means the agent hosts vehicle `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgentAction(pub u32);

impl AgentAction {
    pub fn hosts(self, k: usize) -> bool {
        self.0 >> k & 1 == 1
    }

    pub fn with(self, k: usize) -> Self {
        Self(self.0 | 1 << k)
    }

    pub fn without(self, k: usize) -> Self {
        Self(self.0 & !(1 << k))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn bits(self, vehicles: usize) -> Vec<bool> {
        (0..vehicles).map(|k| self.hosts(k)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointAction(pub Vec<AgentAction>);

impl JointAction {
    /// The joint action that realizes an assignment.
    pub fn from_assignment(a: &Assignment, servers: usize) -> Self {
        let mut actions = vec![AgentAction(0); servers];
        for (k, &n) in a.as_slice().iter().enumerate() {
            actions[n] = actions[n].with(k);
        }
        Self(actions)
    }

    /// The assignment encoded by a feasible joint action.
    pub fn to_assignment(&self, vehicles: usize) -> Option<Assignment> {
        if !feasible(self, vehicles) {
            return None;
        }
        let server_of = (0..vehicles)
            .map(|k| self.0.iter().position(|a| a.hosts(k)).expect("feasible"))
            .collect();
        Assignment::new(server_of, self.0.len()).ok()
    }
}

/// True iff every vehicle is claimed by exactly one agent.
pub fn feasible(ja: &JointAction, vehicles: usize) -> bool {
    let mut seen = 0u32;
    for a in &ja.0 {
        if a.0 & seen != 0 || a.0 >> vehicles != 0 {
            return false;
        }
        seen |= a.0;
    }
    seen == (1u32 << vehicles) - 1
}

/// Observation of one agent: `FEATURES_PER_VEHICLE` values per vehicle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState(pub Vec<f64>);

impl AgentState {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Costs attributable to one agent in one slot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentCost {
    pub computing: f64,
    pub communication: f64,
    pub migration: f64,
}

impl AgentCost {
    pub fn weighted(&self, w: &ObjectiveWeights) -> f64 {
        w.computing * self.computing + w.communication * self.communication + w.migration * self.migration
    }
}

/// What the controller needs to score a joint action.
#[derive(Clone, Copy, Debug)]
pub struct Snapshot<'a> {
    pub instance: &'a Instance,
    pub t: usize,
    pub previous: &'a Assignment,
    pub scale: &'a RewardScale,
}

/// Per-agent costs of a feasible placement during slot `t`.
pub fn agent_cost(agent: usize, placement: &Assignment, snap: &Snapshot<'_>) -> AgentCost {
    let inst = snap.instance;
    let load = crate::model::count_services(placement, agent);
    let capacity = inst.servers[agent].compute_capacity();
    let mut cost = AgentCost::default();
    for k in (0..placement.vehicles()).filter(|&k| placement.server_of(k) == agent) {
        cost.computing += inst.requests[k].cycles * load as f64 / capacity;
        cost.communication += inst.comm_delay(snap.t, k, agent);
        let from = snap.previous.server_of(k);
        if from != agent {
            cost.migration += inst.migration.get(from, agent, k, snap.t);
        }
    }
    cost
}

pub fn reward(agent: usize, ja: &JointAction, snap: &Snapshot<'_>) -> f64 {
    match ja.to_assignment(snap.instance.num_vehicles()) {
        None => INFEASIBLE_REWARD,
        Some(a) => snap.scale.reward(&agent_cost(agent, &a, snap), &snap.instance.weights),
    }
}

/// Makes a joint action feasible. Every vehicle claimed by zero or several
/// agents goes to the candidate (the claimants, or every agent if nobody
/// claimed it) whose Q-value for its current action with that vehicle added
/// is highest; ties go to the lowest server index. Vehicles are processed in
/// index order and later decisions see earlier ones.
pub fn repair(ja: &JointAction, q_rows: &[Vec<f64>], vehicles: usize) -> Result<JointAction> {
    if q_rows.len() != ja.0.len() {
        return Err(Error::DimensionMismatch {
            context: "repair Q rows",
            expected: ja.0.len(),
            actual: q_rows.len(),
        });
    }
    let mut actions: Vec<AgentAction> = ja.0.iter().map(|a| AgentAction(a.0 & ((1u32 << vehicles) - 1))).collect();
    for k in 0..vehicles {
        let claimants: Vec<usize> = (0..actions.len()).filter(|&n| actions[n].hosts(k)).collect();
        if claimants.len() == 1 {
            continue;
        }
        let candidates = if claimants.is_empty() { (0..actions.len()).collect() } else { claimants };
        let mut best = candidates[0];
        let mut best_q = f64::NEG_INFINITY;
        for &n in &candidates {
            let q = q_rows[n].get(actions[n].with(k).index()).copied().ok_or(Error::DimensionMismatch {
                context: "repair Q row",
                expected: 1 << vehicles,
                actual: q_rows[n].len(),
            })?;
            if q > best_q {
                best = n;
                best_q = q;
            }
        }
        for (n, a) in actions.iter_mut().enumerate() {
            *a = if n == best { a.with(k) } else { a.without(k) };
        }
    }
    Ok(JointAction(actions))
}

/// Controller's log line for one slot. Costs are the slot totals of the
/// executed placement; they are zero when the joint action was rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub t: usize,
    pub feasible: bool,
    pub rewards: Vec<f64>,
    pub computing: f64,
    pub communication: f64,
    pub migration: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub rewards: Vec<f64>,
    pub next_states: Vec<AgentState>,
    pub record: SlotRecord,
    pub done: bool,
}

#[derive(Debug)]
struct Episode {
    realization: Realization,
    t: usize,
    placement: Assignment,
    executed: Vec<Assignment>,
}

/// Episode runner shared by all agents; `step` is the lock-step barrier.
#[derive(Debug)]
pub struct Environment {
    cfg: EnvConfig,
    scale: RewardScale,
    episode: Option<Episode>,
}

impl Environment {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let scale = cfg.reward_scale();
        Ok(Self {
            cfg,
            scale,
            episode: None,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn reward_scale(&self) -> &RewardScale {
        &self.scale
    }

    pub fn reset(&mut self, seed: u64) -> Result<Vec<AgentState>> {
        let realization = self.cfg.realize(seed)?;
        self.start(realization)
    }

    /// Starts an episode on an already materialized realization.
    pub fn start(&mut self, realization: Realization) -> Result<Vec<AgentState>> {
        let inst = &realization.instance;
        if inst.num_vehicles() != self.cfg.vehicles || inst.num_servers() != self.cfg.servers.len() {
            return Err(invalid("realization does not match the environment configuration"));
        }
        self.episode = Some(Episode {
            placement: inst.initial.clone(),
            realization,
            t: 0,
            executed: Vec::new(),
        });
        Ok(self.observe())
    }

    fn active(&self) -> Result<&Episode> {
        self.episode.as_ref().ok_or_else(|| Error::InvalidState("no active episode; call reset first".into()))
    }

    pub fn realization(&self) -> Result<&Realization> {
        Ok(&self.active()?.realization)
    }

    pub fn slot(&self) -> usize {
        self.episode.as_ref().map_or(0, |e| e.t)
    }

    pub fn is_done(&self) -> bool {
        self.episode.as_ref().is_some_and(|e| e.t >= e.realization.instance.horizon())
    }

    /// Placements executed so far in this episode.
    pub fn executed(&self) -> &[Assignment] {
        self.episode.as_ref().map_or(&[], |e| &e.executed)
    }

    /// Observations of every agent for the current slot. Once the episode is
    /// over, the last slot's world is shown with the final placement.
    pub fn observe(&self) -> Vec<AgentState> {
        let Some(ep) = &self.episode else {
            return Vec::new();
        };
        let t = ep.t.min(ep.realization.instance.horizon() - 1);
        (0..self.cfg.servers.len())
            .map(|n| self.encode(n, &ep.realization, t, &ep.placement))
            .collect()
    }

    fn encode(&self, agent: usize, real: &Realization, t: usize, placement: &Assignment) -> AgentState {
        let cfg = &self.cfg;
        let hw = &cfg.highway;
        let server = &cfg.servers[agent];
        let d_max = cfg.max_distance();
        let (vmin, vmax) = hw.speed_range_mps();
        let (slo, shi) = cfg.observed_size_bits;
        let unit = |v: f64, lo: f64, hi: f64| {
            if hi > lo {
                (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        };
        let mut features = Vec::with_capacity(cfg.state_dim());
        for (k, v) in real.fleets[t].iter().enumerate() {
            let req = &real.instance.requests[k];
            let gain = real.instance.channels.gain(t, k, agent);
            let gain_db = if gain > 0.0 { 10.0 * gain.log10() } else { f64::NEG_INFINITY };
            features.extend_from_slice(&[
                unit(v.position.x, 0.0, hw.length_m),
                unit(v.position.y, 0.0, hw.width_m),
                unit(v.speed, vmin, vmax),
                v.direction.sign(),
                unit(v.position.distance(&server.position), 0.0, d_max),
                unit(gain_db, GAIN_DB_RANGE.0, GAIN_DB_RANGE.1),
                unit(req.size_bits, slo, shi),
                unit(req.cycles, slo * cfg.cycles_per_bit, shi * cfg.cycles_per_bit),
                if placement.server_of(k) == agent { 1.0 } else { 0.0 },
            ]);
        }
        AgentState(features)
    }

    /// Controller step: feasibility check, rewards, and the move to the next
    /// slot. A rejected joint action leaves the placement unchanged.
    pub fn step(&mut self, ja: &JointAction) -> Result<StepOutcome> {
        let n_servers = self.cfg.servers.len();
        let k = self.cfg.vehicles;
        let ep = self
            .episode
            .as_mut()
            .ok_or_else(|| Error::InvalidState("no active episode; call reset first".into()))?;
        let inst = &ep.realization.instance;
        if ep.t >= inst.horizon() {
            return Err(Error::InvalidState(format!("episode already finished after {} slots", ep.t)));
        }
        if ja.0.len() != n_servers {
            return Err(Error::DimensionMismatch {
                context: "joint action",
                expected: n_servers,
                actual: ja.0.len(),
            });
        }
        let t = ep.t;
        let snap = Snapshot {
            instance: inst,
            t,
            previous: &ep.placement,
            scale: &self.scale,
        };
        let record = match ja.to_assignment(k) {
            None => SlotRecord {
                t,
                feasible: false,
                rewards: vec![INFEASIBLE_REWARD; n_servers],
                computing: 0.0,
                communication: 0.0,
                migration: 0.0,
            },
            Some(a) => {
                let rewards = (0..n_servers)
                    .map(|n| self.scale.reward(&agent_cost(n, &a, &snap), &inst.weights))
                    .collect();
                let record = SlotRecord {
                    t,
                    feasible: true,
                    rewards,
                    computing: inst.slot_computing(&a),
                    communication: inst.slot_communication(t, &a),
                    migration: inst.slot_migration(t, &ep.placement, &a),
                };
                ep.placement = a;
                record
            }
        };
        ep.executed.push(ep.placement.clone());
        ep.t += 1;
        let done = ep.t >= inst.horizon();
        Ok(StepOutcome {
            rewards: record.rewards.clone(),
            next_states: self.observe(),
            record,
            done,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::mobility::{mec_layout, LayoutConfig};
    use crate::model::{evaluate_objective, ChannelState, Fading, Trajectory};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    pub fn default_config(horizon: usize) -> EnvConfig {
        let highway = HighwayConfig::default();
        let servers = mec_layout(&highway, &LayoutConfig::default(), 3)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(id, position)| MecServer {
                id,
                position,
                transmit_power_w: 1.0,
                bandwidth_hz: 1e7 / 3.0,
                core_count: 4,
                core_clock_hz: 2.5e9,
            })
            .collect();
        EnvConfig {
            servers,
            highway,
            radio: RadioConfig::default(),
            weights: ObjectiveWeights::default(),
            vehicles: 4,
            horizon,
            request_size_bits: (50e3, 300e3),
            observed_size_bits: (50e3, 300e3),
            cycles_per_bit: 500.0,
            migration_cost_range: (0.2, 0.3),
            normalization: RewardNormalization::Shared,
            reward_divisor: None,
        }
    }

    fn ja(bits: &[u32]) -> JointAction {
        JointAction(bits.iter().map(|&b| AgentAction(b)).collect())
    }

    #[test]
    fn reset_is_deterministic_and_normalized() {
        let mut env = Environment::new(default_config(10)).unwrap();
        let a = env.reset(7).unwrap();
        let b = env.reset(7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        for s in &a {
            assert_eq!(s.0.len(), 36);
            assert!(s.0.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert_ne!(env.reset(8).unwrap(), a);
    }

    #[test]
    fn initial_placement_is_nearest_server() {
        let env = Environment::new(default_config(5)).unwrap();
        let real = env.config().realize(3).unwrap();
        for (k, v) in real.fleets[0].iter().enumerate() {
            let expected = if v.position.x < 1500.0 {
                0
            } else if v.position.x < 3500.0 {
                1
            } else {
                2
            };
            assert_eq!(real.instance.initial.server_of(k), expected);
        }
    }

    #[test]
    fn feasibility_examples() {
        assert!(feasible(&ja(&[0b0011, 0b0100, 0b1000]), 4));
        assert!(!feasible(&ja(&[0b0011, 0b0110, 0b1000]), 4));
        assert!(!feasible(&ja(&[0b0011, 0b0100, 0b0000]), 4));
        assert!(!feasible(&ja(&[0b10011, 0b0100, 0b1000]), 4));
    }

    #[test]
    fn rewards_follow_the_controller_rules() {
        let cfg = default_config(4);
        let scale = cfg.reward_scale();
        let real = cfg.realize(11).unwrap();
        let prev = real.instance.initial.clone();
        let snap = Snapshot {
            instance: &real.instance,
            t: 0,
            previous: &prev,
            scale: &scale,
        };
        assert_eq!(reward(0, &ja(&[0b0011, 0b0110, 0b1000]), &snap), -1.0);

        // Agent 2 hosts nothing and previously hosted nothing.
        let all_on_0 = Assignment::uniform(4, 0);
        let stay = Snapshot {
            previous: &all_on_0,
            ..snap
        };
        let action = JointAction::from_assignment(&all_on_0, 3);
        assert_eq!(reward(2, &action, &stay), 0.0);
        assert!(reward(0, &action, &stay) < 0.0);
    }

    #[test]
    fn single_vehicle_reward_matches_model_objective() {
        let mut cfg = default_config(1);
        cfg.vehicles = 1;
        let scale = cfg.reward_scale();
        for seed in 0..20 {
            let real = cfg.realize(seed).unwrap();
            for n in 0..3 {
                let a = Assignment::uniform(1, n);
                let snap = Snapshot {
                    instance: &real.instance,
                    t: 0,
                    previous: &real.instance.initial,
                    scale: &scale,
                };
                let r = reward(n, &JointAction::from_assignment(&a, 3), &snap);
                let obj = evaluate_objective(&Trajectory::new(vec![a]), &real.instance).unwrap();
                let expected = -(obj.total / scale.shared).min(FEASIBLE_REWARD_CAP);
                assert!((r - expected).abs() < 1e-12, "{r} vs {expected}");
            }
        }
    }

    #[test]
    fn episode_accepts_exactly_horizon_steps() {
        let mut env = Environment::new(default_config(5)).unwrap();
        env.reset(1).unwrap();
        let stay = JointAction::from_assignment(&env.realization().unwrap().instance.initial, 3);
        for t in 0..5 {
            let out = env.step(&stay).unwrap();
            assert_eq!(out.done, t == 4);
            assert_eq!(out.next_states.len(), 3);
        }
        assert!(matches!(env.step(&stay), Err(Error::InvalidState(_))));
        let mut fresh = Environment::new(default_config(5)).unwrap();
        assert!(matches!(fresh.step(&stay), Err(Error::InvalidState(_))));
    }

    #[test]
    fn feasible_slot_record_matches_model_cost() {
        let mut env = Environment::new(default_config(3)).unwrap();
        env.reset(21).unwrap();
        let target = Assignment::new(vec![2, 0, 1, 1], 3).unwrap();
        let out = env.step(&JointAction::from_assignment(&target, 3)).unwrap();
        let inst = &env.realization().unwrap().instance;
        let one_slot = Instance::new(
            inst.servers.clone(),
            inst.requests.clone(),
            ChannelState::new(
                1,
                4,
                3,
                (0..4).flat_map(|k| (0..3).map(move |n| (k, n))).map(|(k, n)| inst.channels.gain(0, k, n)).collect(),
            )
            .unwrap(),
            MigrationCostMatrix::from_fn(3, 4, 1, |f, to, k, _| inst.migration.get(f, to, k, 0)).unwrap(),
            inst.weights,
            inst.radio,
            inst.initial.clone(),
        )
        .unwrap();
        let obj = evaluate_objective(&Trajectory::new(vec![target]), &one_slot).unwrap();
        let rec = &out.record;
        assert!((rec.computing - obj.computing).abs() < 1e-12);
        assert!((rec.communication - obj.communication).abs() < 1e-12);
        assert!((rec.migration - obj.migration).abs() < 1e-12);
        // Per-agent rewards reconstruct the slot's weighted cost.
        let scale = env.reward_scale().shared;
        let reconstructed: f64 = rec.rewards.iter().map(|r| -r * scale).sum();
        assert!((reconstructed - obj.total).abs() < 1e-9 * obj.total.max(1.0));
    }

    #[test]
    fn infeasible_step_penalizes_everyone_and_freezes_placement() {
        let mut env = Environment::new(default_config(3)).unwrap();
        let before = env.reset(5).unwrap();
        let out = env.step(&ja(&[0b1111, 0b1111, 0])).unwrap();
        assert_eq!(out.rewards, vec![-1.0; 3]);
        assert!(!out.record.feasible);
        let initial = env.realization().unwrap().instance.initial.clone();
        assert_eq!(env.executed()[0], initial);
        for (b, a) in before.iter().zip(&out.next_states) {
            for k in 0..4 {
                assert_eq!(b.0[k * 9 + 8], a.0[k * 9 + 8]);
            }
        }
    }

    #[test]
    fn repair_examples() {
        let q = vec![vec![0.0; 16]; 3];
        let good = ja(&[0b0011, 0b0100, 0b1000]);
        assert_eq!(repair(&good, &q, 4).unwrap(), good);

        // Vehicle 0 claimed by agents 0 and 2 with equal Q: agent 0 wins.
        let conflict = ja(&[0b0011, 0b0100, 0b1001]);
        let fixed = repair(&conflict, &q, 4).unwrap();
        assert_eq!(fixed, ja(&[0b0011, 0b0100, 0b1000]));

        // Orphan vehicle 3 goes to the agent with the best Q for adding it.
        let orphan = ja(&[0b0011, 0b0100, 0b0000]);
        let mut q2 = q.clone();
        q2[1][0b1100] = 5.0;
        let fixed = repair(&orphan, &q2, 4).unwrap();
        assert!(feasible(&fixed, 4));
        assert_eq!(fixed, ja(&[0b0011, 0b1100, 0b0000]));
    }

    proptest! {
        #[test]
        fn repair_is_feasible_and_idempotent(bits in proptest::collection::vec(0u32..16, 3), seed in 0u64..1000) {
            use rand::SeedableRng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q: Vec<Vec<f64>> = (0..3).map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let once = repair(&ja(&bits), &q, 4).unwrap();
            prop_assert!(feasible(&once, 4));
            prop_assert_eq!(repair(&once, &q, 4).unwrap(), once);
        }

        #[test]
        fn rewards_are_bounded(seed in 0u64..500, bits in proptest::collection::vec(0u32..16, 3)) {
            let mut cfg = default_config(2);
            cfg.radio.fading = Fading::Rayleigh;
            let mut env = Environment::new(cfg).unwrap();
            env.reset(seed).unwrap();
            let joint = ja(&bits);
            let out = env.step(&joint).unwrap();
            for r in &out.rewards {
                prop_assert!((-1.0..=0.0).contains(r));
                prop_assert_eq!(*r == -1.0, !feasible(&joint, 4));
            }
        }
    }
}
