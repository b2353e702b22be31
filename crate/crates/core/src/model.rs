//! Domain types and the closed-form latency and cost model.
//!
//! Every quantity here is a pure function of immutable inputs. Delays are in
//! seconds, migration costs are dimensionless, and the weighted total mixes
//! the two without any normalization.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Converts a power level in dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// An edge server co-located with a base station.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MecServer {
    pub id: usize,
    pub position: Point,
    pub transmit_power_w: f64,
    pub bandwidth_hz: f64,
    pub core_count: u32,
    pub core_clock_hz: f64,
}

impl MecServer {
    /// Total processing capacity in CPU cycles per second.
    pub fn compute_capacity(&self) -> f64 {
        f64::from(self.core_count) * self.core_clock_hz
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.transmit_power_w > 0.0) {
            return Err(invalid(format!("server {}: transmit power must be positive", self.id)));
        }
        if !(self.bandwidth_hz > 0.0) {
            return Err(invalid(format!("server {}: bandwidth must be positive", self.id)));
        }
        if !(self.compute_capacity() > 0.0) {
            return Err(invalid(format!("server {}: compute capacity must be positive", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: usize,
    pub position: Point,
    /// Meters per second, constant for the whole episode.
    pub speed: f64,
    pub direction: Direction,
    pub lane: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub vehicle_id: usize,
    pub size_bits: f64,
    /// CPU cycles needed per slot.
    pub cycles: f64,
}

impl ServiceRequest {
    /// Builds a request whose compute load is proportional to its size.
    pub fn from_size(vehicle_id: usize, size_bits: f64, cycles_per_bit: f64) -> Result<Self> {
        let req = Self {
            vehicle_id,
            size_bits,
            cycles: size_bits * cycles_per_bit,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.size_bits > 0.0) || !(self.cycles > 0.0) {
            return Err(invalid(format!(
                "vehicle {}: request size and cycles must be positive",
                self.vehicle_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathLossModel {
    /// `128.1 + 37.6 log10(d_km)` dB.
    LogDistance,
}

impl PathLossModel {
    pub fn loss_db(self, distance_m: f64) -> f64 {
        match self {
            PathLossModel::LogDistance => 128.1 + 37.6 * (distance_m / 1000.0).log10(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fading {
    None,
    Rayleigh,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadioConfig {
    pub noise_psd_dbm_hz: f64,
    pub pathloss: PathLossModel,
    pub fading: Fading,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            noise_psd_dbm_hz: -174.0,
            pathloss: PathLossModel::LogDistance,
            fading: Fading::Rayleigh,
        }
    }
}

impl RadioConfig {
    /// Noise power in watts over the given bandwidth.
    pub fn noise_power_w(&self, bandwidth_hz: f64) -> f64 {
        dbm_to_watts(self.noise_psd_dbm_hz) * bandwidth_hz
    }
}

/// Linear power gains indexed by slot, vehicle and server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    slots: usize,
    vehicles: usize,
    servers: usize,
    gains: Vec<f64>,
}

impl ChannelState {
    pub fn new(slots: usize, vehicles: usize, servers: usize, gains: Vec<f64>) -> Result<Self> {
        if gains.len() != slots * vehicles * servers {
            return Err(Error::DimensionMismatch {
                context: "channel gains",
                expected: slots * vehicles * servers,
                actual: gains.len(),
            });
        }
        if gains.iter().any(|g| !(*g >= 0.0)) {
            return Err(invalid("channel gains must be non-negative"));
        }
        Ok(Self {
            slots,
            vehicles,
            servers,
            gains,
        })
    }

    pub fn constant(slots: usize, vehicles: usize, servers: usize, gain: f64) -> Result<Self> {
        Self::new(slots, vehicles, servers, vec![gain; slots * vehicles * servers])
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn vehicles(&self) -> usize {
        self.vehicles
    }

    pub fn servers(&self) -> usize {
        self.servers
    }

    pub fn gain(&self, t: usize, k: usize, n: usize) -> f64 {
        self.gains[(t * self.vehicles + k) * self.servers + n]
    }
}

/// `m[from][to][k][t]`, zero on the diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MigrationCostMatrix {
    servers: usize,
    vehicles: usize,
    slots: usize,
    costs: Vec<f64>,
}

impl MigrationCostMatrix {
    /// Builds the matrix from a generator; the diagonal is forced to zero.
    pub fn from_fn(
        servers: usize,
        vehicles: usize,
        slots: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut costs = Vec::with_capacity(servers * servers * vehicles * slots);
        for from in 0..servers {
            for to in 0..servers {
                for k in 0..vehicles {
                    for t in 0..slots {
                        let c = if from == to { 0.0 } else { f(from, to, k, t) };
                        if !(c >= 0.0) || !c.is_finite() {
                            return Err(invalid("migration costs must be finite and non-negative"));
                        }
                        costs.push(c);
                    }
                }
            }
        }
        Ok(Self {
            servers,
            vehicles,
            slots,
            costs,
        })
    }

    pub fn zeros(servers: usize, vehicles: usize, slots: usize) -> Self {
        Self {
            servers,
            vehicles,
            slots,
            costs: vec![0.0; servers * servers * vehicles * slots],
        }
    }

    pub fn get(&self, from: usize, to: usize, k: usize, t: usize) -> f64 {
        self.costs[((from * self.servers + to) * self.vehicles + k) * self.slots + t]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            costs: self.costs.iter().map(|c| c * factor).collect(),
            ..self.clone()
        }
    }

    pub fn max(&self) -> f64 {
        self.costs.iter().copied().fold(0.0, f64::max)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.servers, self.vehicles, self.slots)
    }
}

/// Weights of the computing delay, communication delay and migration cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub computing: f64,
    pub communication: f64,
    pub migration: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            computing: 1.0 / 3.0,
            communication: 1.0 / 3.0,
            migration: 1.0 / 3.0,
        }
    }
}

impl ObjectiveWeights {
    pub fn new(computing: f64, communication: f64, migration: f64) -> Result<Self> {
        let w = Self {
            computing,
            communication,
            migration,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.computing, self.communication, self.migration];
        if all.iter().any(|w| !(*w >= 0.0)) || !(self.sum() > 0.0) {
            return Err(invalid("objective weights must be non-negative with a positive sum"));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.computing + self.communication + self.migration
    }
}

/// Server index for every vehicle during one slot.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Assignment(Vec<usize>);

impl Assignment {
    pub fn new(server_of: Vec<usize>, servers: usize) -> Result<Self> {
        if let Some(&bad) = server_of.iter().find(|&&n| n >= servers) {
            return Err(invalid(format!("server index {bad} out of range 0..{servers}")));
        }
        Ok(Self(server_of))
    }

    pub fn uniform(vehicles: usize, server: usize) -> Self {
        Self(vec![server; vehicles])
    }

    /// Decodes a base-`servers` state index; vehicle 0 is the most
    /// significant digit so index order matches lexicographic order.
    pub fn from_index(mut index: usize, vehicles: usize, servers: usize) -> Self {
        let mut server_of = vec![0; vehicles];
        for slot in server_of.iter_mut().rev() {
            *slot = index % servers;
            index /= servers;
        }
        Self(server_of)
    }

    pub fn to_index(&self, servers: usize) -> usize {
        self.0.iter().fold(0, |acc, &n| acc * servers + n)
    }

    pub fn server_of(&self, k: usize) -> usize {
        self.0[k]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn vehicles(&self) -> usize {
        self.0.len()
    }
}

/// The full placement schedule over the horizon.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Trajectory {
    pub slots: Vec<Assignment>,
}

impl Trajectory {
    pub fn new(slots: Vec<Assignment>) -> Self {
        Self { slots }
    }

    pub fn horizon(&self) -> usize {
        self.slots.len()
    }
}

/// Received signal-to-noise ratio.
pub fn snr(transmit_power_w: f64, gain: f64, noise_w: f64) -> Result<f64> {
    if !(transmit_power_w > 0.0) || !(noise_w > 0.0) {
        return Err(invalid("transmit power and noise power must be positive"));
    }
    if !(gain >= 0.0) {
        return Err(invalid("channel gain must be non-negative"));
    }
    Ok(transmit_power_w * gain / noise_w)
}

/// Shannon rate in bits per second.
pub fn data_rate(bandwidth_hz: f64, snr: f64) -> Result<f64> {
    if !(bandwidth_hz > 0.0) || !(snr >= 0.0) {
        return Err(invalid("bandwidth must be positive and SNR non-negative"));
    }
    Ok(bandwidth_hz * (1.0 + snr).log2())
}

/// Transmission delay; a zero rate yields `f64::INFINITY` rather than an error.
pub fn comm_delay(size_bits: f64, rate: f64) -> f64 {
    if rate <= 0.0 {
        f64::INFINITY
    } else {
        size_bits / rate
    }
}

pub fn comp_delay(cycles: f64, n_services: usize, capacity: f64) -> Result<f64> {
    if !(capacity > 0.0) {
        return Err(invalid("compute capacity must be positive"));
    }
    Ok(cycles * n_services as f64 / capacity)
}

pub fn count_services(a: &Assignment, server: usize) -> usize {
    a.0.iter().filter(|&&n| n == server).count()
}

pub fn slot_migration_cost(
    prev: &Assignment,
    cur: &Assignment,
    m: &MigrationCostMatrix,
    t: usize,
) -> f64 {
    prev.0
        .iter()
        .zip(&cur.0)
        .enumerate()
        .map(|(k, (&from, &to))| m.get(from, to, k, t))
        .sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub computing: f64,
    pub communication: f64,
    pub migration: f64,
    pub total: f64,
}

impl ObjectiveBreakdown {
    pub fn weighted(computing: f64, communication: f64, migration: f64, w: &ObjectiveWeights) -> Self {
        Self {
            computing,
            communication,
            migration,
            total: w.computing * computing + w.communication * communication + w.migration * migration,
        }
    }
}

/// One fully realized problem instance: servers, requests, per-slot channels,
/// migration costs, weights and the placement in force before the first slot.
#[derive(Clone, Debug, Serialize)]
pub struct Instance {
    pub servers: Vec<MecServer>,
    pub requests: Vec<ServiceRequest>,
    pub channels: ChannelState,
    pub migration: MigrationCostMatrix,
    pub weights: ObjectiveWeights,
    pub radio: RadioConfig,
    pub initial: Assignment,
    #[serde(skip)]
    delays: Vec<f64>,
}

impl Instance {
    pub fn new(
        servers: Vec<MecServer>,
        requests: Vec<ServiceRequest>,
        channels: ChannelState,
        migration: MigrationCostMatrix,
        weights: ObjectiveWeights,
        radio: RadioConfig,
        initial: Assignment,
    ) -> Result<Self> {
        let (n, k, t) = (servers.len(), requests.len(), channels.slots());
        if n == 0 || k == 0 || t == 0 {
            return Err(invalid("instance needs at least one server, vehicle and slot"));
        }
        for s in &servers {
            s.validate()?;
        }
        for r in &requests {
            r.validate()?;
        }
        weights.validate()?;
        if channels.vehicles() != k || channels.servers() != n {
            return Err(invalid("channel state dimensions do not match servers/vehicles"));
        }
        if migration.dims() != (n, k, t) {
            return Err(invalid("migration cost matrix dimensions do not match instance"));
        }
        if initial.vehicles() != k || initial.as_slice().iter().any(|&s| s >= n) {
            return Err(invalid("initial assignment does not match instance"));
        }

        let mut delays = Vec::with_capacity(t * k * n);
        for slot in 0..t {
            for (vk, req) in requests.iter().enumerate() {
                for (sn, server) in servers.iter().enumerate() {
                    let noise = radio.noise_power_w(server.bandwidth_hz);
                    let gamma = snr(server.transmit_power_w, channels.gain(slot, vk, sn), noise)?;
                    let rate = data_rate(server.bandwidth_hz, gamma)?;
                    delays.push(comm_delay(req.size_bits, rate));
                }
            }
        }

        Ok(Self {
            servers,
            requests,
            channels,
            migration,
            weights,
            radio,
            initial,
            delays,
        })
    }

    pub fn num_servers(&self) -> usize {
        self.servers.len()
    }

    pub fn num_vehicles(&self) -> usize {
        self.requests.len()
    }

    pub fn horizon(&self) -> usize {
        self.channels.slots()
    }

    /// Communication delay of vehicle `k` served by `n` during slot `t`.
    pub fn comm_delay(&self, t: usize, k: usize, n: usize) -> f64 {
        self.delays[(t * self.num_vehicles() + k) * self.num_servers() + n]
    }

    /// Total computing delay of one slot.
    pub fn slot_computing(&self, a: &Assignment) -> f64 {
        let mut load = vec![0usize; self.num_servers()];
        for &n in a.as_slice() {
            load[n] += 1;
        }
        a.as_slice()
            .iter()
            .zip(&self.requests)
            .map(|(&n, req)| req.cycles * load[n] as f64 / self.servers[n].compute_capacity())
            .sum()
    }

    pub fn slot_communication(&self, t: usize, a: &Assignment) -> f64 {
        a.as_slice()
            .iter()
            .enumerate()
            .map(|(k, &n)| self.comm_delay(t, k, n))
            .sum()
    }

    pub fn slot_migration(&self, t: usize, prev: &Assignment, cur: &Assignment) -> f64 {
        slot_migration_cost(prev, cur, &self.migration, t)
    }

    /// Largest compute delay any single vehicle can incur in one slot.
    pub fn max_compute_delay(&self) -> f64 {
        let max_cycles = self.requests.iter().map(|r| r.cycles).fold(0.0, f64::max);
        let min_capacity = self
            .servers
            .iter()
            .map(MecServer::compute_capacity)
            .fold(f64::INFINITY, f64::min);
        self.num_vehicles() as f64 * max_cycles / min_capacity
    }

    pub fn with_weights(&self, weights: ObjectiveWeights) -> Self {
        Self {
            weights,
            ..self.clone()
        }
    }

    pub fn with_migration(&self, migration: MigrationCostMatrix) -> Self {
        Self {
            migration,
            ..self.clone()
        }
    }
}

/// Evaluates the weighted objective of a full trajectory.
pub fn evaluate_objective(traj: &Trajectory, inst: &Instance) -> Result<ObjectiveBreakdown> {
    if traj.horizon() != inst.horizon() {
        return Err(invalid(format!(
            "trajectory has {} slots but the instance horizon is {}",
            traj.horizon(),
            inst.horizon()
        )));
    }
    let (n_servers, n_vehicles) = (inst.num_servers(), inst.num_vehicles());
    let mut computing = 0.0;
    let mut communication = 0.0;
    let mut migration = 0.0;
    let mut prev = &inst.initial;
    for (t, a) in traj.slots.iter().enumerate() {
        if a.vehicles() != n_vehicles || a.as_slice().iter().any(|&n| n >= n_servers) {
            return Err(invalid(format!("slot {t}: assignment does not match instance")));
        }
        for n in 0..n_servers {
            let load = count_services(a, n);
            let capacity = inst.servers[n].compute_capacity();
            for k in (0..n_vehicles).filter(|&k| a.server_of(k) == n) {
                computing += comp_delay(inst.requests[k].cycles, load, capacity)?;
                communication += inst.comm_delay(t, k, n);
            }
        }
        migration += slot_migration_cost(prev, a, &inst.migration, t);
        prev = a;
    }
    Ok(ObjectiveBreakdown::weighted(computing, communication, migration, &inst.weights))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn server(id: usize, x: f64, cores: u32) -> MecServer {
        MecServer {
            id,
            position: Point::new(x, -30.0),
            transmit_power_w: 1.0,
            bandwidth_hz: 1e7 / 3.0,
            core_count: cores,
            core_clock_hz: 2.5e9,
        }
    }

    /// Small random instance with Table-1-like magnitudes.
    pub fn random_instance(seed: u64, n: usize, k: usize, t: usize) -> Instance {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let servers = (0..n).map(|i| server(i, 500.0 + 2000.0 * i as f64, 4)).collect();
        let requests = (0..k)
            .map(|v| ServiceRequest::from_size(v, rng.random_range(50e3..300e3), 500.0).unwrap())
            .collect();
        let gains = (0..t * k * n).map(|_| 10f64.powf(-rng.random_range(11.0..14.0))).collect();
        let channels = ChannelState::new(t, k, n, gains).unwrap();
        let migration = MigrationCostMatrix::from_fn(n, k, t, |_, _, _, _| rng.random_range(0.2..0.3)).unwrap();
        let initial = Assignment::new((0..k).map(|_| rng.random_range(0..n)).collect(), n).unwrap();
        Instance::new(
            servers,
            requests,
            channels,
            migration,
            ObjectiveWeights::default(),
            RadioConfig::default(),
            initial,
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn snr_examples() {
        assert_eq!(snr(2.0, 0.5, 0.25).unwrap(), 4.0);
        assert_eq!(snr(1.0, 0.0, 1e-13).unwrap(), 0.0);
        // -174 dBm/Hz over 10/3 MHz, 30 dBm transmit power, gain 1e-12.
        let noise = RadioConfig::default().noise_power_w(1e7 / 3.0);
        let gamma = snr(dbm_to_watts(30.0), 1e-12, noise).unwrap();
        assert!((gamma - 75.356_592_945_287_16).abs() < 1e-9);
        assert!(snr(0.0, 1.0, 1.0).is_err());
        assert!(snr(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn rate_and_delay_examples() {
        assert_eq!(data_rate(10.0, 1.0).unwrap(), 10.0);
        assert_eq!(data_rate(5.0, 3.0).unwrap(), 10.0);
        assert_eq!(data_rate(3e6, 0.0).unwrap(), 0.0);
        assert_eq!(comm_delay(100.0, 50.0), 2.0);
        assert_eq!(comm_delay(100.0, 0.0), f64::INFINITY);
    }

    #[test]
    fn comp_delay_examples() {
        assert!((comp_delay(1e9, 3, 1e10).unwrap() - 0.3).abs() < 1e-15);
        let s = server(0, 0.0, 4);
        assert_eq!(comp_delay(2.5e9, 1, s.compute_capacity()).unwrap(), 0.25);
        assert_eq!(comp_delay(1e9, 0, 1e10).unwrap(), 0.0);
        assert!(comp_delay(1e9, 1, 0.0).is_err());
    }

    #[test]
    fn count_services_examples() {
        let all = Assignment::uniform(4, 0);
        assert_eq!(count_services(&all, 0), 4);
        assert_eq!(count_services(&all, 1), 0);
        let spread = Assignment::new(vec![0, 1, 0], 2).unwrap();
        assert_eq!(count_services(&spread, 0), 2);
    }

    #[test]
    fn migration_cost_examples() {
        let m = MigrationCostMatrix::from_fn(2, 2, 1, |from, to, k, _| 0.1 * (from + 2 * to + 3 * k + 1) as f64)
            .unwrap();
        let a = Assignment::new(vec![0, 1], 2).unwrap();
        assert_eq!(slot_migration_cost(&a, &a, &m, 0), 0.0);

        let single = MigrationCostMatrix::from_fn(2, 1, 1, |_, _, _, _| 0.25).unwrap();
        let prev = Assignment::new(vec![0], 2).unwrap();
        let cur = Assignment::new(vec![1], 2).unwrap();
        assert_eq!(slot_migration_cost(&prev, &cur, &single, 0), 0.25);

        // Both vehicles move: enumerate the matrix directly.
        let b = Assignment::new(vec![1, 0], 2).unwrap();
        let mut expected = 0.0;
        for from in 0..2 {
            for to in 0..2 {
                for k in 0..2 {
                    if a.server_of(k) == from && b.server_of(k) == to {
                        expected += m.get(from, to, k, 0);
                    }
                }
            }
        }
        assert_eq!(slot_migration_cost(&a, &b, &m, 0), expected);
        assert!(expected > 0.0);
    }

    #[test]
    fn assignment_index_round_trip_is_lexicographic() {
        let mut prev: Option<Assignment> = None;
        for idx in 0..27 {
            let a = Assignment::from_index(idx, 3, 3);
            assert_eq!(a.to_index(3), idx);
            if let Some(p) = prev {
                assert!(p < a);
            }
            prev = Some(a);
        }
    }

    #[test]
    fn objective_single_vehicle_hand_computed() {
        // K=1, N=1, T=2 with deterministic gains.
        let servers = vec![server(0, 0.0, 4)];
        let requests = vec![ServiceRequest::from_size(0, 100e3, 500.0).unwrap()];
        let channels = ChannelState::new(2, 1, 1, vec![1e-12, 2e-12]).unwrap();
        let inst = Instance::new(
            servers,
            requests,
            channels,
            MigrationCostMatrix::zeros(1, 1, 2),
            ObjectiveWeights::default(),
            RadioConfig::default(),
            Assignment::uniform(1, 0),
        )
        .unwrap();
        let traj = Trajectory::new(vec![Assignment::uniform(1, 0); 2]);
        let obj = evaluate_objective(&traj, &inst).unwrap();

        let noise = 10f64.powf(-20.4) * 1e7 / 3.0;
        let w = 1e7 / 3.0;
        let d1 = 100e3 / (w * (1.0 + 1e-12 / noise).log2());
        let d2 = 100e3 / (w * (1.0 + 2e-12 / noise).log2());
        let c = 2.0 * 5e7 / 1e10;
        assert!((obj.communication - (d1 + d2)).abs() < 1e-12);
        assert!((obj.computing - c).abs() < 1e-15);
        assert_eq!(obj.migration, 0.0);
        assert!((obj.total - (c + d1 + d2) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pure_migration_weight_without_moves_is_zero() {
        let inst = random_instance(3, 2, 2, 3).with_weights(ObjectiveWeights::new(0.0, 0.0, 1.0).unwrap());
        let traj = Trajectory::new(vec![inst.initial.clone(); 3]);
        assert_eq!(evaluate_objective(&traj, &inst).unwrap().total, 0.0);
    }

    #[test]
    fn horizon_mismatch_is_rejected() {
        let inst = random_instance(1, 2, 2, 3);
        let traj = Trajectory::new(vec![inst.initial.clone(); 2]);
        assert!(matches!(evaluate_objective(&traj, &inst), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn zero_rate_propagates_infinite_delay() {
        let servers = vec![server(0, 0.0, 4)];
        let requests = vec![ServiceRequest::from_size(0, 100e3, 500.0).unwrap()];
        let inst = Instance::new(
            servers,
            requests,
            ChannelState::constant(1, 1, 1, 0.0).unwrap(),
            MigrationCostMatrix::zeros(1, 1, 1),
            ObjectiveWeights::default(),
            RadioConfig::default(),
            Assignment::uniform(1, 0),
        )
        .unwrap();
        let obj = evaluate_objective(&Trajectory::new(vec![Assignment::uniform(1, 0)]), &inst).unwrap();
        assert_eq!(obj.total, f64::INFINITY);
    }

    /// Re-derives the objective from raw per-slot operations on the model
    /// primitives, bypassing the instance's cached delay table.
    fn independent_objective(traj: &Trajectory, inst: &Instance) -> (f64, f64, f64) {
        let (mut c, mut d, mut m) = (0.0, 0.0, 0.0);
        for (t, a) in traj.slots.iter().enumerate() {
            for (k, &n) in a.as_slice().iter().enumerate() {
                let s = &inst.servers[n];
                let gamma = snr(s.transmit_power_w, inst.channels.gain(t, k, n), inst.radio.noise_power_w(s.bandwidth_hz))
                    .unwrap();
                d += comm_delay(inst.requests[k].size_bits, data_rate(s.bandwidth_hz, gamma).unwrap());
                let load = a.as_slice().iter().filter(|&&x| x == n).count();
                c += inst.requests[k].cycles * load as f64 / s.compute_capacity();
                let prev = if t == 0 { &inst.initial } else { &traj.slots[t - 1] };
                m += inst.migration.get(prev.server_of(k), n, k, t);
            }
        }
        (c, d, m)
    }

    fn random_trajectory(seed: u64, inst: &Instance) -> Trajectory {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (n, k) = (inst.num_servers(), inst.num_vehicles());
        Trajectory::new(
            (0..inst.horizon())
                .map(|_| Assignment::new((0..k).map(|_| rng.random_range(0..n)).collect(), n).unwrap())
                .collect(),
        )
    }

    proptest! {
        #[test]
        fn objective_matches_independent_summation(seed in 0u64..10_000, n in 1usize..4, k in 1usize..4, t in 1usize..4) {
            let inst = random_instance(seed, n, k, t);
            let traj = random_trajectory(seed ^ 0x5555, &inst);
            let obj = evaluate_objective(&traj, &inst).unwrap();
            let (c, d, m) = independent_objective(&traj, &inst);
            prop_assert!((obj.computing - c).abs() <= 1e-12 * c.max(1.0));
            prop_assert!((obj.communication - d).abs() <= 1e-12 * d.max(1.0));
            prop_assert!((obj.migration - m).abs() <= 1e-12 * m.max(1.0));
        }

        #[test]
        fn service_counts_partition_the_fleet(seed in 0u64..10_000, n in 1usize..5, k in 1usize..6) {
            let inst = random_instance(seed, n, k, 1);
            let a = &random_trajectory(seed, &inst).slots[0];
            let counts: Vec<usize> = (0..n).map(|s| count_services(a, s)).collect();
            prop_assert!(counts.iter().all(|&c| c <= k));
            prop_assert_eq!(counts.iter().sum::<usize>(), k);
        }

        #[test]
        fn total_is_linear_in_migration_weight(seed in 0u64..10_000) {
            let inst = random_instance(seed, 2, 2, 3);
            let traj = random_trajectory(seed + 1, &inst);
            let base = evaluate_objective(&traj, &inst).unwrap();
            let w = inst.weights;
            let doubled = inst.with_weights(ObjectiveWeights { migration: 2.0 * w.migration, ..w });
            let obj2 = evaluate_objective(&traj, &doubled).unwrap();
            let delta = obj2.total - base.total;
            prop_assert!((delta - w.migration * base.migration).abs() < 1e-12);
        }

        #[test]
        fn objective_invariant_under_server_relabeling(seed in 0u64..10_000) {
            let inst = random_instance(seed, 3, 2, 2);
            let traj = random_trajectory(seed + 7, &inst);
            let perm = [2usize, 0, 1];
            let relabel = |a: &Assignment| Assignment::new(a.as_slice().iter().map(|&n| perm[n]).collect(), 3).unwrap();
            let mut servers = inst.servers.clone();
            for (old, s) in inst.servers.iter().enumerate() {
                servers[perm[old]] = MecServer { id: perm[old], ..s.clone() };
            }
            let (t_len, k_len) = (inst.horizon(), inst.num_vehicles());
            let mut gains = vec![0.0; t_len * k_len * 3];
            for t in 0..t_len { for k in 0..k_len { for n in 0..3 {
                gains[(t * k_len + k) * 3 + perm[n]] = inst.channels.gain(t, k, n);
            }}}
            let inv = |p: usize| perm.iter().position(|&q| q == p).unwrap();
            let migration = MigrationCostMatrix::from_fn(3, k_len, t_len, |f, to, k, t| inst.migration.get(inv(f), inv(to), k, t)).unwrap();
            let permuted = Instance::new(
                servers, inst.requests.clone(), ChannelState::new(t_len, k_len, 3, gains).unwrap(),
                migration, inst.weights, inst.radio, relabel(&inst.initial),
            ).unwrap();
            let traj2 = Trajectory::new(traj.slots.iter().map(relabel).collect());
            let a = evaluate_objective(&traj, &inst).unwrap().total;
            let b = evaluate_objective(&traj2, &permuted).unwrap().total;
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn delays_strictly_decrease_in_resources(rate in 1.0f64..1e9, bump in 1.0f64..1e6, cap in 1e6f64..1e11) {
            prop_assert!(comm_delay(1e5, rate + bump) < comm_delay(1e5, rate));
            prop_assert!(comp_delay(1e8, 2, cap * 1.5).unwrap() < comp_delay(1e8, 2, cap).unwrap());
        }
    }

    #[test]
    fn single_slot_without_migration_is_plain_sum() {
        let inst = random_instance(11, 3, 3, 1).with_migration(MigrationCostMatrix::zeros(3, 3, 1));
        let a = Assignment::new(vec![2, 0, 2], 3).unwrap();
        let obj = evaluate_objective(&Trajectory::new(vec![a.clone()]), &inst).unwrap();
        let w = inst.weights;
        let mut expected = 0.0;
        for k in 0..3 {
            let n = a.server_of(k);
            let comp = comp_delay(inst.requests[k].cycles, count_services(&a, n), inst.servers[n].compute_capacity()).unwrap();
            expected += w.computing * comp + w.communication * inst.comm_delay(0, k, n);
        }
        assert!((obj.total - expected).abs() < 1e-15);
    }
}
