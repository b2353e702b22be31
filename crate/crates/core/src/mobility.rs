//! Highway mobility and per-slot channel realizations.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{ChannelState, Direction, Fading, MecServer, Point, RadioConfig, Vehicle};

/// Closest admissible transmitter-receiver separation in meters.
pub const MIN_DISTANCE_M: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HighwayConfig {
    pub length_m: f64,
    pub width_m: f64,
    pub forward_lanes: usize,
    pub backward_lanes: usize,
    pub speed_range_kmh: (f64, f64),
    pub slot_duration_s: f64,
}

impl Default for HighwayConfig {
    fn default() -> Self {
        Self {
            length_m: 5000.0,
            width_m: 18.0,
            forward_lanes: 2,
            backward_lanes: 2,
            speed_range_kmh: (60.0, 110.0),
            slot_duration_s: 1.0,
        }
    }
}

impl HighwayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.length_m > 0.0) || !(self.width_m > 0.0) || !(self.slot_duration_s > 0.0) {
            return Err(invalid("highway length, width and slot duration must be positive"));
        }
        let (lo, hi) = self.speed_range_kmh;
        if !(lo > 0.0) || !(hi >= lo) {
            return Err(invalid("speed range must be positive and nonempty"));
        }
        if self.lanes() == 0 {
            return Err(invalid("highway needs at least one lane"));
        }
        Ok(())
    }

    pub fn lanes(&self) -> usize {
        self.forward_lanes + self.backward_lanes
    }

    /// Speed bounds in m/s.
    pub fn speed_range_mps(&self) -> (f64, f64) {
        (self.speed_range_kmh.0 / 3.6, self.speed_range_kmh.1 / 3.6)
    }

    /// Lateral coordinate of a lane center. Forward lanes come first.
    pub fn lane_center(&self, lane: usize) -> f64 {
        let lane_width = self.width_m / self.lanes() as f64;
        (lane as f64 + 0.5) * lane_width
    }

    pub fn lane_direction(&self, lane: usize) -> Direction {
        if lane < self.forward_lanes {
            Direction::Forward
        } else {
            Direction::Backward
        }
    }
}

/// Placement of the roadside servers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutConfig {
    /// Gap between neighbouring servers along the road.
    pub spacing_m: f64,
    /// Distance of every server from the road edge (servers sit at `y = -offset`).
    pub lateral_offset_m: f64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            spacing_m: 2000.0,
            lateral_offset_m: 30.0,
        }
    }
}

/// Server positions: `n` collinear sites centered on the highway, `spacing_m`
/// apart, falling back to an even `length / n` grid when they would not fit.
pub fn mec_layout(highway: &HighwayConfig, layout: &LayoutConfig, n: usize) -> Result<Vec<Point>> {
    if n == 0 {
        return Err(invalid("layout needs at least one server"));
    }
    let spacing = if (n - 1) as f64 * layout.spacing_m <= highway.length_m {
        layout.spacing_m
    } else {
        highway.length_m / n as f64
    };
    let center = highway.length_m / 2.0;
    let mid = (n as f64 - 1.0) / 2.0;
    Ok((0..n)
        .map(|i| Point::new(center + (i as f64 - mid) * spacing, -layout.lateral_offset_m))
        .collect())
}

pub fn init_vehicles<R: Rng + ?Sized>(cfg: &HighwayConfig, count: usize, rng: &mut R) -> Result<Vec<Vehicle>> {
    if count == 0 {
        return Err(invalid("fleet needs at least one vehicle"));
    }
    cfg.validate()?;
    let (vmin, vmax) = cfg.speed_range_mps();
    Ok((0..count)
        .map(|id| {
            let x = rng.random_range(0.0..cfg.length_m);
            let lane = rng.random_range(0..cfg.lanes());
            let speed = if vmax > vmin { rng.random_range(vmin..=vmax) } else { vmin };
            Vehicle {
                id,
                position: Point::new(x, cfg.lane_center(lane)),
                speed,
                direction: cfg.lane_direction(lane),
                lane,
            }
        })
        .collect())
}

/// Advances every vehicle by `dt` seconds, wrapping around the highway ends.
pub fn step_vehicles(fleet: &[Vehicle], cfg: &HighwayConfig, dt: f64) -> Vec<Vehicle> {
    fleet
        .iter()
        .map(|v| {
            let mut x = (v.position.x + v.direction.sign() * v.speed * dt).rem_euclid(cfg.length_m);
            // rem_euclid of a tiny negative value rounds up to the modulus
            if x >= cfg.length_m {
                x = 0.0;
            }
            Vehicle {
                position: Point::new(x, v.position.y),
                ..v.clone()
            }
        })
        .collect()
}

/// Large-scale gain without fading.
pub fn mean_gain(distance_m: f64, radio: &RadioConfig) -> f64 {
    let d = distance_m.max(MIN_DISTANCE_M);
    10f64.powf(-radio.pathloss.loss_db(d) / 10.0)
}

pub fn channel_gain<R: Rng + ?Sized>(vehicle: &Vehicle, server: &MecServer, radio: &RadioConfig, rng: &mut R) -> f64 {
    let base = mean_gain(vehicle.position.distance(&server.position), radio);
    match radio.fading {
        Fading::None => base,
        Fading::Rayleigh => {
            let f: f64 = Exp1.sample(rng);
            base * f
        }
    }
}

/// Vehicle positions for every slot plus the matching channel draws.
#[derive(Clone, Debug)]
pub struct MobilityTrace {
    pub fleets: Vec<Vec<Vehicle>>,
    pub channels: ChannelState,
}

/// Rolls the fleet forward `slots` times; slot 0 uses the initial positions.
/// Gains are drawn slot by slot, vehicle by vehicle, server by server.
pub fn realize_trace<R: Rng + ?Sized>(
    initial: &[Vehicle],
    servers: &[MecServer],
    cfg: &HighwayConfig,
    radio: &RadioConfig,
    slots: usize,
    rng: &mut R,
) -> Result<MobilityTrace> {
    let mut fleets = Vec::with_capacity(slots);
    let mut gains = Vec::with_capacity(slots * initial.len() * servers.len());
    let mut fleet = initial.to_vec();
    for t in 0..slots {
        if t > 0 {
            fleet = step_vehicles(&fleet, cfg, cfg.slot_duration_s);
        }
        for v in &fleet {
            for s in servers {
                gains.push(channel_gain(v, s, radio, rng));
            }
        }
        fleets.push(fleet.clone());
    }
    let channels = ChannelState::new(slots, initial.len(), servers.len(), gains)?;
    Ok(MobilityTrace { fleets, channels })
}

/// Index of the server closest to the vehicle; ties go to the lower index.
pub fn nearest_server(vehicle: &Vehicle, servers: &[MecServer]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, s) in servers.iter().enumerate() {
        let d = vehicle.position.distance(&s.position);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vehicle(x: f64, speed: f64, direction: Direction) -> Vehicle {
        Vehicle {
            id: 0,
            position: Point::new(x, 2.25),
            speed,
            direction,
            lane: 0,
        }
    }

    fn server_at(p: Point) -> MecServer {
        MecServer {
            id: 0,
            position: p,
            transmit_power_w: 1.0,
            bandwidth_hz: 1e7 / 3.0,
            core_count: 4,
            core_clock_hz: 2.5e9,
        }
    }

    #[test]
    fn fleet_is_deterministic_and_in_range() {
        let cfg = HighwayConfig::default();
        let a = init_vehicles(&cfg, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = init_vehicles(&cfg, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let big = init_vehicles(&cfg, 2000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for v in &big {
            assert!(v.speed >= 16.666 && v.speed <= 30.556, "speed {}", v.speed);
            assert!((0.0..5000.0).contains(&v.position.x));
            assert_eq!(v.direction, cfg.lane_direction(v.lane));
        }
        assert!(init_vehicles(&cfg, 0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn step_wraps_around() {
        let cfg = HighwayConfig::default();
        let v = step_vehicles(&[vehicle(4990.0, 20.0, Direction::Forward)], &cfg, 1.0);
        assert!((v[0].position.x - 10.0).abs() < 1e-9);
        let v = step_vehicles(&[vehicle(5.0, 10.0, Direction::Backward)], &cfg, 1.0);
        assert!((v[0].position.x - 4995.0).abs() < 1e-9);
        let fleet = vec![vehicle(123.0, 25.0, Direction::Forward)];
        assert_eq!(step_vehicles(&fleet, &cfg, 0.0), fleet);
    }

    #[test]
    fn layout_matches_inter_server_distances() {
        let hw = HighwayConfig::default();
        let pts = mec_layout(&hw, &LayoutConfig::default(), 3).unwrap();
        let xs: Vec<f64> = pts.iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![500.0, 2500.0, 4500.0]);
        assert_eq!(pts[0].distance(&pts[1]), 2000.0);
        assert_eq!(pts[1].distance(&pts[2]), 2000.0);
        assert_eq!(pts[0].distance(&pts[2]), 4000.0);
        assert!(pts.iter().all(|p| p.y == -30.0));
        let one = mec_layout(&hw, &LayoutConfig::default(), 1).unwrap();
        assert_eq!(one[0].x, 2500.0);
        let many = mec_layout(&hw, &LayoutConfig::default(), 5).unwrap();
        assert!(many.iter().all(|p| p.x > 0.0 && p.x < 5000.0));
    }

    #[test]
    fn gain_without_fading() {
        let radio = RadioConfig {
            fading: Fading::None,
            ..RadioConfig::default()
        };
        let s = server_at(Point::new(0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = channel_gain(&vehicle(1000.0, 20.0, Direction::Forward), &server_at(Point::new(1000.0, 2.25 - 1000.0)), &radio, &mut rng);
        assert!((g / 10f64.powf(-12.81) - 1.0).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for x in [1.0, 10.0, 100.0, 1000.0, 4000.0] {
            let g = channel_gain(&vehicle(x, 20.0, Direction::Forward), &s, &radio, &mut rng);
            assert!(g < last);
            last = g;
        }
        // Zero distance is clamped to one meter.
        let here = server_at(Point::new(50.0, 2.25));
        assert_eq!(channel_gain(&vehicle(50.0, 1.0, Direction::Forward), &here, &radio, &mut rng), mean_gain(1.0, &radio));
    }

    #[test]
    fn rayleigh_fading_has_unit_mean() {
        let radio = RadioConfig::default();
        let s = server_at(Point::new(0.0, -30.0));
        let v = vehicle(800.0, 20.0, Direction::Forward);
        let base = mean_gain(v.position.distance(&s.position), &radio);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mean = (0..n).map(|_| channel_gain(&v, &s, &radio, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean / base - 1.0).abs() < 0.02, "ratio {}", mean / base);
    }

    #[test]
    fn traces_are_reproducible() {
        let hw = HighwayConfig::default();
        let radio = RadioConfig::default();
        let servers: Vec<MecServer> = mec_layout(&hw, &LayoutConfig::default(), 3)
            .unwrap()
            .into_iter()
            .map(server_at)
            .collect();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fleet = init_vehicles(&hw, 4, &mut rng).unwrap();
            realize_trace(&fleet, &servers, &hw, &radio, 10, &mut rng).unwrap()
        };
        let (a, b) = (run(5), run(5));
        assert_eq!(a.fleets, b.fleets);
        assert_eq!(a.channels, b.channels);
        for fleet in &a.fleets {
            for (v, v0) in fleet.iter().zip(&a.fleets[0]) {
                assert_eq!(v.speed, v0.speed);
            }
        }
    }

    proptest! {
        #[test]
        fn positions_stay_on_highway(seed in 0u64..1000, steps in 1usize..500, dt in 0.0f64..10.0) {
            let cfg = HighwayConfig::default();
            let mut fleet = init_vehicles(&cfg, 6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for _ in 0..steps {
                fleet = step_vehicles(&fleet, &cfg, dt);
            }
            for v in &fleet {
                prop_assert!(v.position.x >= 0.0 && v.position.x < cfg.length_m);
                prop_assert!(v.position.y >= 0.0 && v.position.y <= cfg.width_m);
            }
        }
    }
}
