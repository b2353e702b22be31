//! Exact optimization of the placement/migration problem.
//!
//! Two exact methods share the model's objective: exhaustive enumeration
//! (the reference oracle) and dynamic programming over the time-expanded
//! assignment graph, which works because migration only couples consecutive
//! slots. The linearized integer program is exported in LP format for
//! optional cross-checks with an external MILP solver.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

pub use crate::model::Instance;
use crate::error::{invalid, Error, Result};
use crate::model::{evaluate_objective, Assignment, ObjectiveBreakdown, Trajectory};

/// Largest number of trajectories [`brute_force`] will enumerate.
pub const BRUTE_FORCE_LIMIT: f64 = 1e7;
/// Largest number of joint assignments per slot [`dp_solve`] will expand.
pub const DP_STATE_LIMIT: f64 = 1e5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Solution {
    pub trajectory: Trajectory,
    pub objective: ObjectiveBreakdown,
}

impl Solution {
    pub fn value(&self) -> f64 {
        self.objective.total
    }
}

/// Enumerates every trajectory and keeps the lexicographically smallest
/// minimizer of the objective.
pub fn brute_force(inst: &Instance) -> Result<Solution> {
    let (n, k, t) = (inst.num_servers(), inst.num_vehicles(), inst.horizon());
    let size = (n as f64).powi((k * t) as i32);
    if size > BRUTE_FORCE_LIMIT {
        return Err(Error::SizeGuard {
            method: "brute_force",
            size,
            limit: BRUTE_FORCE_LIMIT,
        });
    }

    // Odometer over slot-major, vehicle-minor digits: the first digit is the
    // most significant, so enumeration order is lexicographic.
    let mut digits = vec![0usize; k * t];
    let mut best: Option<Solution> = None;
    loop {
        let traj = Trajectory::new(
            digits
                .chunks(k)
                .map(|c| Assignment::new(c.to_vec(), n))
                .collect::<Result<_>>()?,
        );
        let objective = evaluate_objective(&traj, inst)?;
        if best.as_ref().is_none_or(|b| objective.total < b.objective.total) {
            best = Some(Solution {
                trajectory: traj,
                objective,
            });
        }

        let mut pos = digits.len();
        loop {
            if pos == 0 {
                return Ok(best.expect("at least one trajectory enumerated"));
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < n {
                break;
            }
            digits[pos] = 0;
        }
    }
}

/// Dynamic program over slots whose state is the full joint assignment.
///
/// Stage cost is the weighted compute plus communication delay of a slot,
/// transition cost the weighted migration cost between consecutive slots.
/// Ties resolve to the smallest state index at every slot. The returned
/// objective is re-evaluated on the model so it is directly comparable with
/// [`brute_force`].
pub fn dp_solve(inst: &Instance) -> Result<Solution> {
    let (n, k, horizon) = (inst.num_servers(), inst.num_vehicles(), inst.horizon());
    let size = (n as f64).powi(k as i32);
    if size > DP_STATE_LIMIT {
        return Err(Error::SizeGuard {
            method: "dp_solve",
            size,
            limit: DP_STATE_LIMIT,
        });
    }
    let states = size as usize;
    let w = inst.weights;
    let decoded: Vec<Assignment> = (0..states).map(|s| Assignment::from_index(s, k, n)).collect();
    let computing: Vec<f64> = decoded.iter().map(|a| inst.slot_computing(a)).collect();

    let stage = |t: usize, s: usize| {
        w.computing * computing[s] + w.communication * inst.slot_communication(t, &decoded[s])
    };
    let transition = |t: usize, from: &Assignment, to: usize| w.migration * inst.slot_migration(t, from, &decoded[to]);

    // value[t][s]: optimal cost of slots t.. given state s at slot t.
    let mut value = vec![vec![0.0; states]; horizon];
    for s in 0..states {
        value[horizon - 1][s] = stage(horizon - 1, s);
    }
    for t in (0..horizon - 1).rev() {
        for s in 0..states {
            let best = best_successor(&value[t + 1], |next| transition(t + 1, &decoded[s], next)).1;
            value[t][s] = stage(t, s) + best;
        }
    }

    let mut slots = Vec::with_capacity(horizon);
    let mut prev = inst.initial.clone();
    for t in 0..horizon {
        let (s, _) = best_successor(&value[t], |next| transition(t, &prev, next));
        prev = decoded[s].clone();
        slots.push(prev.clone());
    }
    let trajectory = Trajectory::new(slots);
    let objective = evaluate_objective(&trajectory, inst)?;
    Ok(Solution { trajectory, objective })
}

/// Smallest index minimizing `cost(s) + value[s]`.
fn best_successor(value: &[f64], cost: impl Fn(usize) -> f64) -> (usize, f64) {
    let mut best = (0, cost(0) + value[0]);
    for (s, v) in value.iter().enumerate().skip(1) {
        let c = cost(s) + v;
        if c < best.1 {
            best = (s, c);
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum VarKind {
    Binary,
    Continuous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Var {
    /// Vehicle `k` placed on server `n` in slot `t`.
    X { k: usize, n: usize, t: usize },
    /// Vehicle `k` on `from` in slot `t-1` and on `to` in slot `t`.
    Z { k: usize, from: usize, to: usize, t: usize },
    /// Computing delay of vehicle `k` in slot `t`.
    Y { k: usize, t: usize },
}

impl Var {
    pub fn kind(self) -> VarKind {
        match self {
            Var::Y { .. } => VarKind::Continuous,
            _ => VarKind::Binary,
        }
    }

    /// LP-format identifier, 1-based like the model notation.
    pub fn name(self) -> String {
        match self {
            Var::X { k, n, t } => format!("x_k{}_n{}_t{}", k + 1, n + 1, t + 1),
            Var::Z { k, from, to, t } => format!("z_k{}_f{}_n{}_t{}", k + 1, from + 1, to + 1, t + 1),
            Var::Y { k, t } => format!("y_k{}_t{}", k + 1, t + 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ConstraintFamily {
    /// Each vehicle sits on exactly one server.
    OneServer,
    /// `z <= x` of the previous slot, for `t > 1`.
    ZBelowPrevious,
    /// `z <= x` of the current slot.
    ZBelowCurrent,
    /// `z >= x_prev + x_cur - 1`, for `t > 1`.
    ZAboveBoth,
    /// First-slot `z` tied to the fixed initial placement.
    InitialLink,
    /// Big-M lower half of `x = 1 => y = N c / F`.
    BigMLower,
    /// Big-M upper half of `x = 1 => y = N c / F`.
    BigMUpper,
    /// Forbids a link whose rate is zero.
    Unreachable,
}

impl ConstraintFamily {
    fn prefix(self) -> &'static str {
        match self {
            ConstraintFamily::OneServer => "one",
            ConstraintFamily::ZBelowPrevious => "zprev",
            ConstraintFamily::ZBelowCurrent => "zcur",
            ConstraintFamily::ZAboveBoth => "zboth",
            ConstraintFamily::InitialLink => "init",
            ConstraintFamily::BigMLower => "bigm_lo",
            ConstraintFamily::BigMUpper => "bigm_hi",
            ConstraintFamily::Unreachable => "unreach",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

impl Sense {
    fn symbol(self) -> &'static str {
        match self {
            Sense::Le => "<=",
            Sense::Ge => ">=",
            Sense::Eq => "=",
        }
    }

    fn holds(self, lhs: f64, rhs: f64, tol: f64) -> bool {
        match self {
            Sense::Le => lhs <= rhs + tol,
            Sense::Ge => lhs >= rhs - tol,
            Sense::Eq => (lhs - rhs).abs() <= tol,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Constraint {
    pub name: String,
    pub family: ConstraintFamily,
    pub terms: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

/// The linearized program: binary `x`/`z`, continuous `y >= 0`, the
/// product linearization for migration and the big-M encoding of the
/// per-vehicle computing delay.
#[derive(Clone, Debug, Serialize)]
pub struct LinearizedProgram {
    pub servers: usize,
    pub vehicles: usize,
    pub slots: usize,
    pub big_m: f64,
    pub variables: Vec<Var>,
    pub constraints: Vec<Constraint>,
    pub objective: Vec<(usize, f64)>,
    #[serde(skip)]
    index: HashMap<Var, usize>,
}

/// Big-M used when none is given: the largest achievable `y`.
pub fn default_big_m(inst: &Instance) -> f64 {
    inst.max_compute_delay()
}

impl LinearizedProgram {
    pub fn build(inst: &Instance, big_m: f64) -> Result<Self> {
        let bound = default_big_m(inst);
        if !(big_m.is_finite() && big_m >= bound * (1.0 - 1e-12)) {
            return Err(invalid(format!(
                "big-M {big_m} is below the largest possible computing delay {bound}; the relaxation would be unsound"
            )));
        }
        let (n_srv, n_veh, n_slot) = (inst.num_servers(), inst.num_vehicles(), inst.horizon());
        let mut p = Self {
            servers: n_srv,
            vehicles: n_veh,
            slots: n_slot,
            big_m,
            variables: Vec::new(),
            constraints: Vec::new(),
            objective: Vec::new(),
            index: HashMap::new(),
        };

        for t in 0..n_slot {
            for k in 0..n_veh {
                for n in 0..n_srv {
                    p.var(Var::X { k, n, t });
                }
            }
        }
        for t in 0..n_slot {
            for k in 0..n_veh {
                for from in 0..n_srv {
                    for to in 0..n_srv {
                        p.var(Var::Z { k, from, to, t });
                    }
                }
            }
        }
        for t in 0..n_slot {
            for k in 0..n_veh {
                p.var(Var::Y { k, t });
            }
        }

        let w = inst.weights;
        for t in 0..n_slot {
            for k in 0..n_veh {
                for n in 0..n_srv {
                    let d = inst.comm_delay(t, k, n);
                    let x = p.idx(Var::X { k, n, t });
                    if d.is_finite() {
                        if w.communication * d != 0.0 {
                            p.objective.push((x, w.communication * d));
                        }
                    } else {
                        p.push(ConstraintFamily::Unreachable, &[k, n, t], vec![(x, 1.0)], Sense::Eq, 0.0);
                    }
                }
                if w.computing != 0.0 {
                    p.objective.push((p.idx(Var::Y { k, t }), w.computing));
                }
                for from in 0..n_srv {
                    for to in 0..n_srv {
                        let m = inst.migration.get(from, to, k, t);
                        if w.migration * m != 0.0 {
                            p.objective.push((p.idx(Var::Z { k, from, to, t }), w.migration * m));
                        }
                    }
                }
            }
        }

        for t in 0..n_slot {
            for k in 0..n_veh {
                let terms = (0..n_srv).map(|n| (p.idx(Var::X { k, n, t }), 1.0)).collect();
                p.push(ConstraintFamily::OneServer, &[k, t], terms, Sense::Eq, 1.0);
            }
        }

        for t in 0..n_slot {
            for k in 0..n_veh {
                for from in 0..n_srv {
                    for to in 0..n_srv {
                        let z = p.idx(Var::Z { k, from, to, t });
                        let x_cur = p.idx(Var::X { k, n: to, t });
                        let tag = [k, from, to, t];
                        p.push(ConstraintFamily::ZBelowCurrent, &tag, vec![(z, 1.0), (x_cur, -1.0)], Sense::Le, 0.0);
                        if t > 0 {
                            let x_prev = p.idx(Var::X { k, n: from, t: t - 1 });
                            p.push(ConstraintFamily::ZBelowPrevious, &tag, vec![(z, 1.0), (x_prev, -1.0)], Sense::Le, 0.0);
                            p.push(
                                ConstraintFamily::ZAboveBoth,
                                &tag,
                                vec![(z, 1.0), (x_prev, -1.0), (x_cur, -1.0)],
                                Sense::Ge,
                                -1.0,
                            );
                        } else if inst.initial.server_of(k) == from {
                            p.push(ConstraintFamily::InitialLink, &tag, vec![(z, 1.0), (x_cur, -1.0)], Sense::Ge, 0.0);
                        } else {
                            p.push(ConstraintFamily::InitialLink, &tag, vec![(z, 1.0)], Sense::Le, 0.0);
                        }
                    }
                }
            }
        }

        // x_kn = 1  =>  y_k = (c_k / F_n) * sum_j x_jn
        for t in 0..n_slot {
            for k in 0..n_veh {
                let y = p.idx(Var::Y { k, t });
                for n in 0..n_srv {
                    let ratio = inst.requests[k].cycles / inst.servers[n].compute_capacity();
                    let mut lower = vec![(y, 1.0)];
                    let mut upper = vec![(y, 1.0)];
                    for j in 0..n_veh {
                        let xj = p.idx(Var::X { k: j, n, t });
                        let extra = if j == k { big_m } else { 0.0 };
                        lower.push((xj, -ratio - extra));
                        upper.push((xj, -ratio + extra));
                    }
                    p.push(ConstraintFamily::BigMLower, &[k, n, t], lower, Sense::Ge, -big_m);
                    p.push(ConstraintFamily::BigMUpper, &[k, n, t], upper, Sense::Le, big_m);
                }
            }
        }
        Ok(p)
    }

    fn var(&mut self, v: Var) {
        self.index.insert(v, self.variables.len());
        self.variables.push(v);
    }

    fn idx(&self, v: Var) -> usize {
        self.index[&v]
    }

    pub fn index_of(&self, v: Var) -> Option<usize> {
        self.index.get(&v).copied()
    }

    fn push(&mut self, family: ConstraintFamily, tag: &[usize], terms: Vec<(usize, f64)>, sense: Sense, rhs: f64) {
        let mut name = family.prefix().to_string();
        for i in tag {
            let _ = write!(name, "_{}", i + 1);
        }
        self.constraints.push(Constraint {
            name,
            family,
            terms,
            sense,
            rhs,
        });
    }

    pub fn count(&self, family: ConstraintFamily) -> usize {
        self.constraints.iter().filter(|c| c.family == family).count()
    }

    pub fn count_vars(&self, pred: impl Fn(&Var) -> bool) -> usize {
        self.variables.iter().filter(|v| pred(v)).count()
    }

    /// Variable values `(x, z, y)` induced by a trajectory: `z` is the
    /// product of consecutive placements and `y` the per-vehicle computing
    /// delay.
    pub fn point_from(&self, inst: &Instance, traj: &Trajectory) -> Result<Vec<f64>> {
        if traj.horizon() != self.slots {
            return Err(invalid("trajectory horizon does not match the program"));
        }
        let mut values = vec![0.0; self.variables.len()];
        for (t, a) in traj.slots.iter().enumerate() {
            let prev = if t == 0 { &inst.initial } else { &traj.slots[t - 1] };
            let mut load = vec![0usize; self.servers];
            for &n in a.as_slice() {
                load[n] += 1;
            }
            for k in 0..self.vehicles {
                let n = a.server_of(k);
                values[self.idx(Var::X { k, n, t })] = 1.0;
                values[self.idx(Var::Z { k, from: prev.server_of(k), to: n, t })] = 1.0;
                values[self.idx(Var::Y { k, t })] =
                    load[n] as f64 * inst.requests[k].cycles / inst.servers[n].compute_capacity();
            }
        }
        Ok(values)
    }

    pub fn objective_value(&self, point: &[f64]) -> f64 {
        self.objective.iter().map(|&(i, c)| c * point[i]).sum()
    }

    pub fn lhs(&self, c: &Constraint, point: &[f64]) -> f64 {
        c.terms.iter().map(|&(i, a)| a * point[i]).sum()
    }

    /// Constraints violated at `point` beyond an absolute tolerance.
    pub fn violations(&self, point: &[f64], tol: f64) -> Vec<&Constraint> {
        self.constraints
            .iter()
            .filter(|c| !c.sense.holds(self.lhs(c, point), c.rhs, tol))
            .collect()
    }

    /// Renders the program in CPLEX LP format.
    pub fn to_lp(&self) -> String {
        let mut out = String::from("Minimize\n");
        let _ = writeln!(out, "\\ Service placement and migration, linearized");
        let _ = writeln!(
            out,
            "\\ servers={} vehicles={} slots={} big_M={:e}",
            self.servers, self.vehicles, self.slots, self.big_m
        );
        let _ = writeln!(
            out,
            "\\ computing delay rows use big-M; equivalent indicator form: x_kn_t = 1 -> y_k_t - (c_k/F_n) sum_j x_jn_t = 0"
        );
        let _ = write!(out, " obj:");
        if self.objective.is_empty() {
            let _ = write!(out, " 0 {}", self.variables[0].name());
        }
        self.write_terms(&mut out, &self.objective);
        let _ = writeln!(out);
        let _ = writeln!(out, "Subject To");
        for c in &self.constraints {
            let _ = write!(out, " {}:", c.name);
            self.write_terms(&mut out, &c.terms);
            let _ = writeln!(out, " {} {}", c.sense.symbol(), fmt_num(c.rhs));
        }
        let _ = writeln!(out, "Bounds");
        for v in self.variables.iter().filter(|v| v.kind() == VarKind::Continuous) {
            let _ = writeln!(out, " {} >= 0", v.name());
        }
        let _ = writeln!(out, "Binary");
        for v in self.variables.iter().filter(|v| v.kind() == VarKind::Binary) {
            let _ = writeln!(out, " {}", v.name());
        }
        let _ = writeln!(out, "End");
        out
    }

    fn write_terms(&self, out: &mut String, terms: &[(usize, f64)]) {
        for (j, &(i, c)) in terms.iter().enumerate() {
            let name = self.variables[i].name();
            if c < 0.0 {
                let _ = write!(out, " - {} {}", fmt_num(-c), name);
            } else if j == 0 {
                let _ = write!(out, " {} {}", fmt_num(c), name);
            } else {
                let _ = write!(out, " + {} {}", fmt_num(c), name);
            }
            if j % 8 == 7 && j + 1 < terms.len() {
                out.push_str("\n   ");
            }
        }
    }
}

fn fmt_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:e}")
    }
}

/// Exports the linearized program for `inst` in LP format.
pub fn export_lp(inst: &Instance, big_m: f64) -> Result<String> {
    Ok(LinearizedProgram::build(inst, big_m)?.to_lp())
}

#[derive(Clone, Debug, Serialize)]
pub struct LinearizationReport {
    pub migration_x: f64,
    pub migration_z: f64,
    pub computing_x: f64,
    pub computing_y: f64,
    pub objective_x: f64,
    pub objective_linear: f64,
    pub constraints_checked: usize,
    pub mismatches: Vec<String>,
}

impl LinearizationReport {
    pub fn is_consistent(&self) -> bool {
        self.mismatches.is_empty()
    }
}

pub const LINEARIZATION_TOLERANCE: f64 = 1e-9;

fn close(a: f64, b: f64) -> bool {
    if a.is_infinite() || b.is_infinite() {
        return a == b;
    }
    (a - b).abs() <= LINEARIZATION_TOLERANCE * a.abs().max(b.abs()).max(1.0)
}

/// Checks, at the point induced by `traj`, that the linearized migration
/// and computing terms reproduce the nonlinear ones and that every
/// constraint of the program holds.
pub fn validate_linearization(inst: &Instance, traj: &Trajectory) -> Result<LinearizationReport> {
    let program = LinearizedProgram::build(inst, default_big_m(inst))?;
    let point = program.point_from(inst, traj)?;
    let direct = evaluate_objective(traj, inst)?;

    let mut migration_z = 0.0;
    let mut computing_y = 0.0;
    for (i, v) in program.variables.iter().enumerate() {
        match *v {
            Var::Z { k, from, to, t } => migration_z += point[i] * inst.migration.get(from, to, k, t),
            Var::Y { .. } => computing_y += point[i],
            Var::X { .. } => {}
        }
    }

    let mut mismatches = Vec::new();
    if !close(migration_z, direct.migration) {
        mismatches.push(format!("migration: M(z) = {migration_z} but M(x) = {}", direct.migration));
    }
    if !close(computing_y, direct.computing) {
        mismatches.push(format!("computing: C(y) = {computing_y} but C(x) = {}", direct.computing));
    }
    let objective_linear = program.objective_value(&point);
    if direct.total.is_finite() && !close(objective_linear, direct.total) {
        mismatches.push(format!("objective: linear {objective_linear} but direct {}", direct.total));
    }
    let tol = LINEARIZATION_TOLERANCE * program.big_m.max(1.0);
    for c in program.violations(&point, tol) {
        mismatches.push(format!(
            "constraint {} violated: lhs {} {} {}",
            c.name,
            program.lhs(c, &point),
            c.sense.symbol(),
            c.rhs
        ));
    }

    Ok(LinearizationReport {
        migration_x: direct.migration,
        migration_z,
        computing_x: direct.computing,
        computing_y,
        objective_x: direct.total,
        objective_linear,
        constraints_checked: program.constraints.len(),
        mismatches,
    })
}
