//! Quasi-static simulator of a small radial active distribution feeder.
//!
//! The feeder carries three controls: the regulator tap (33 discrete
//! positions spanning 0.90–1.10), a switchable capacitor bank, and the PV
//! inverter phase angle. A forward-backward sweep solves the power flow on
//! the radial tree; each solved operating point yields the monitored state
//! (per-unit bus voltages, substation head power, PV output), the network
//! losses, and the delivered-load efficiency.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::util::derive_seed;

pub const TAP_MIN: f64 = 0.90;
pub const TAP_MAX: f64 = 1.10;
pub const TAP_POSITIONS: usize = 33;

#[derive(Debug, Error)]
pub enum FeederError {
    #[error("power flow diverged after {iterations} iterations, mismatch {mismatch:.3e} pu")]
    Diverged { iterations: usize, mismatch: f64 },
    #[error("voltage collapse at bus {bus}: |V| = {v:.4} pu")]
    VoltageCollapse { bus: usize, v: f64 },
    #[error("invalid feeder spec: {0}")]
    InvalidSpec(String),
    #[error("invalid control: {0}")]
    InvalidControl(String),
    #[error("trajectory aborted at step {step}: {source}")]
    TrajectoryStep {
        step: usize,
        #[source]
        source: Box<FeederError>,
    },
    #[error("zero delivered load; efficiency undefined")]
    UndefinedEfficiency,
    #[error("feeder config line {line}: {detail}")]
    Config { line: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, FeederError>;

// ── Complex arithmetic ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const ZERO: Complex = Complex { re: 0.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Complex {
        Complex { re, im }
    }

    pub fn conj(self) -> Complex {
        Complex::new(self.re, -self.im)
    }

    pub fn abs(self) -> f64 {
        self.re.hypot(self.im)
    }

    pub fn scale(self, s: f64) -> Complex {
        Complex::new(self.re * s, self.im * s)
    }
}

impl std::ops::Add for Complex {
    type Output = Complex;
    fn add(self, o: Complex) -> Complex {
        Complex::new(self.re + o.re, self.im + o.im)
    }
}

impl std::ops::Sub for Complex {
    type Output = Complex;
    fn sub(self, o: Complex) -> Complex {
        Complex::new(self.re - o.re, self.im - o.im)
    }
}

impl std::ops::Mul for Complex {
    type Output = Complex;
    fn mul(self, o: Complex) -> Complex {
        Complex::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }
}

impl std::ops::Div for Complex {
    type Output = Complex;
    fn div(self, o: Complex) -> Complex {
        let d = o.re * o.re + o.im * o.im;
        Complex::new(
            (self.re * o.re + self.im * o.im) / d,
            (self.im * o.re - self.re * o.im) / d,
        )
    }
}

// ── Feeder description ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BusSpec {
    pub id: usize,
    pub load_mw: f64,
    pub load_mvar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BranchKind {
    Line { r_pu: f64, x_pu: f64 },
    /// Ideal ratio transformer; secondary voltage = tap × primary voltage.
    Regulator,
}

#[derive(Debug, Clone)]
pub struct BranchSpec {
    pub from: usize,
    pub to: usize,
    pub kind: BranchKind,
}

#[derive(Debug, Clone)]
pub struct CapacitorSpec {
    pub bus: usize,
    pub mvar: f64,
}

#[derive(Debug, Clone)]
pub struct PvSpec {
    pub bus: usize,
    /// Internal source voltage magnitude, per unit.
    pub source_pu: f64,
    /// Coupling reactance between source and bus, per unit.
    pub x_pu: f64,
    /// Upper bound on the phase-angle control, radians.
    pub delta_max: f64,
}

#[derive(Debug, Clone)]
pub struct FeederSpec {
    pub base_mva: f64,
    pub base_kv: f64,
    pub slack_bus: usize,
    pub buses: Vec<BusSpec>,
    pub branches: Vec<BranchSpec>,
    pub capacitor: Option<CapacitorSpec>,
    pub pv: Option<PvSpec>,
}

impl FeederSpec {
    /// Six-bus radial feeder calibrated to a total load of 5.734 MW /
    /// 2.650 MVAr, a 1.6 MVAr capacitor bank and a PV farm producing
    /// 1.5 MW at the nominal 10° phase angle. Regulator sits between the
    /// substation (bus 1) and bus 2; capacitor at bus 4; PV at bus 6.
    pub fn default_feeder() -> FeederSpec {
        let load = |id: usize, w: f64| BusSpec {
            id,
            load_mw: 5.734 * w,
            load_mvar: 2.650 * w,
        };
        FeederSpec {
            base_mva: 10.0,
            base_kv: 12.47,
            slack_bus: 1,
            buses: vec![
                BusSpec {
                    id: 1,
                    load_mw: 0.0,
                    load_mvar: 0.0,
                },
                load(2, 0.22),
                load(3, 0.22),
                load(4, 0.22),
                load(5, 0.18),
                load(6, 0.16),
            ],
            branches: vec![
                BranchSpec {
                    from: 1,
                    to: 2,
                    kind: BranchKind::Regulator,
                },
                BranchSpec {
                    from: 2,
                    to: 3,
                    kind: BranchKind::Line {
                        r_pu: 0.150,
                        x_pu: 0.125,
                    },
                },
                BranchSpec {
                    from: 3,
                    to: 4,
                    kind: BranchKind::Line {
                        r_pu: 0.150,
                        x_pu: 0.125,
                    },
                },
                BranchSpec {
                    from: 4,
                    to: 5,
                    kind: BranchKind::Line {
                        r_pu: 0.126,
                        x_pu: 0.105,
                    },
                },
                BranchSpec {
                    from: 5,
                    to: 6,
                    kind: BranchKind::Line {
                        r_pu: 0.126,
                        x_pu: 0.105,
                    },
                },
            ],
            capacitor: Some(CapacitorSpec { bus: 4, mvar: 1.6 }),
            pv: Some(PvSpec {
                bus: 6,
                source_pu: 1.03,
                x_pu: 1.10,
                delta_max: 30f64.to_radians(),
            }),
        }
    }

    pub fn delta_max(&self) -> f64 {
        self.pv
            .as_ref()
            .map(|p| p.delta_max)
            .unwrap_or(30f64.to_radians())
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    fn bus_index(&self, id: usize) -> Result<usize> {
        self.buses
            .iter()
            .position(|b| b.id == id)
            .ok_or_else(|| FeederError::InvalidSpec(format!("unknown bus id {id}")))
    }

    /// Validate topology: connected radial tree rooted at the slack bus,
    /// at most one regulator, non-negative impedances.
    pub fn validate(&self) -> Result<Topology> {
        if self.buses.is_empty() {
            return Err(FeederError::InvalidSpec("no buses".into()));
        }
        let n = self.buses.len();
        let mut ids = std::collections::HashSet::new();
        for b in &self.buses {
            if !ids.insert(b.id) {
                return Err(FeederError::InvalidSpec(format!("duplicate bus id {}", b.id)));
            }
        }
        if self.branches.len() != n - 1 {
            return Err(FeederError::InvalidSpec(format!(
                "{} branches for {} buses; a radial tree needs {}",
                self.branches.len(),
                n,
                n - 1
            )));
        }
        let mut n_reg = 0;
        for br in &self.branches {
            if let BranchKind::Line { r_pu, x_pu } = br.kind {
                if r_pu < 0.0 || x_pu < 0.0 {
                    return Err(FeederError::InvalidSpec(format!(
                        "negative impedance on branch {}-{}",
                        br.from, br.to
                    )));
                }
            } else {
                n_reg += 1;
            }
        }
        if n_reg > 1 {
            return Err(FeederError::InvalidSpec(
                "more than one regulator branch".into(),
            ));
        }
        if let Some(c) = &self.capacitor {
            self.bus_index(c.bus)?;
        }
        if let Some(p) = &self.pv {
            self.bus_index(p.bus)?;
        }

        // BFS from the slack bus; assigns parents and an evaluation order.
        let slack = self.bus_index(self.slack_bus)?;
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n]; // (neighbor, branch)
        for (bi, br) in self.branches.iter().enumerate() {
            let f = self.bus_index(br.from)?;
            let t = self.bus_index(br.to)?;
            adj[f].push((t, bi));
            adj[t].push((f, bi));
        }
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n]; // (parent bus, branch)
        let mut order = vec![slack];
        let mut seen = vec![false; n];
        seen[slack] = true;
        let mut q = std::collections::VecDeque::from([slack]);
        while let Some(b) = q.pop_front() {
            for &(nb, br) in &adj[b] {
                if !seen[nb] {
                    seen[nb] = true;
                    parent[nb] = Some((b, br));
                    order.push(nb);
                    q.push_back(nb);
                }
            }
        }
        if order.len() != n {
            return Err(FeederError::InvalidSpec(
                "feeder graph is not connected".into(),
            ));
        }
        Ok(Topology {
            slack,
            order,
            parent,
        })
    }
}

/// BFS orientation of the radial tree, reused across solves.
pub struct Topology {
    slack: usize,
    /// Buses in root-to-leaf (BFS) order.
    order: Vec<usize>,
    /// For each non-slack bus: (parent bus index, incoming branch index).
    parent: Vec<Option<(usize, usize)>>,
}

// ── Controls and states ────────────────────────────────────────────────

/// Physical control triple. `tap` is the regulator ratio, `delta` the PV
/// phase angle in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlVector {
    pub tap: f64,
    pub cap_on: bool,
    pub delta: f64,
}

/// Nearest discrete tap position for a (clamped) tap value.
pub fn tap_position(tap: f64) -> usize {
    let clamped = tap.clamp(TAP_MIN, TAP_MAX);
    let frac = (clamped - TAP_MIN) / (TAP_MAX - TAP_MIN);
    (frac * (TAP_POSITIONS - 1) as f64).round() as usize
}

/// Tap value of a discrete position (0 ↦ 0.90, 32 ↦ 1.10).
pub fn tap_value(position: usize) -> f64 {
    let p = position.min(TAP_POSITIONS - 1);
    TAP_MIN + (TAP_MAX - TAP_MIN) * (p as f64) / (TAP_POSITIONS - 1) as f64
}

impl ControlVector {
    pub fn new(tap: f64, cap_on: bool, delta: f64) -> ControlVector {
        ControlVector { tap, cap_on, delta }
    }

    /// Snap onto the feasible set: discrete tap, delta in [0, delta_max].
    pub fn snapped(&self, delta_max: f64) -> ControlVector {
        ControlVector {
            tap: tap_value(tap_position(self.tap)),
            cap_on: self.cap_on,
            delta: self.delta.clamp(0.0, delta_max),
        }
    }

    pub fn is_feasible(&self, delta_max: f64) -> bool {
        self.tap >= TAP_MIN - 1e-12
            && self.tap <= TAP_MAX + 1e-12
            && self.delta >= -1e-12
            && self.delta <= delta_max + 1e-12
    }

    /// Non-negative encoding used as the model target space:
    /// tap ↦ (tap − 0.90)/0.20, capacitor ↦ {0,1}, delta ↦ delta/delta_max.
    pub fn encode(&self, delta_max: f64) -> [f64; 3] {
        [
            (self.tap - TAP_MIN) / (TAP_MAX - TAP_MIN),
            if self.cap_on { 1.0 } else { 0.0 },
            self.delta / delta_max,
        ]
    }

    /// Inverse of [`encode`]; output is not clamped or snapped.
    pub fn decode(enc: [f64; 3], delta_max: f64) -> (f64, f64, f64) {
        (
            TAP_MIN + enc[0] * (TAP_MAX - TAP_MIN),
            enc[1],
            enc[2] * delta_max,
        )
    }
}

/// Monitored quantities: per-unit voltage magnitude at every bus, head
/// real/reactive power, and PV real output.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub bus_voltages: Vec<f64>,
    pub head_p: f64,
    pub head_q: f64,
    pub pv_p: f64,
}

impl StateVector {
    pub fn dim(n_buses: usize) -> usize {
        n_buses + 3
    }

    pub fn features(&self) -> Vec<f64> {
        let mut out = self.bus_voltages.clone();
        out.push(self.head_p);
        out.push(self.head_q);
        out.push(self.pv_p);
        out
    }

    pub fn from_features(feat: &[f64]) -> StateVector {
        let n = feat.len() - 3;
        StateVector {
            bus_voltages: feat[..n].to_vec(),
            head_p: feat[n],
            head_q: feat[n + 1],
            pv_p: feat[n + 2],
        }
    }
}

/// Load and irradiance multipliers for one operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditions {
    pub load_scale: f64,
    pub irradiance: f64,
}

impl Conditions {
    pub const NOMINAL: Conditions = Conditions {
        load_scale: 1.0,
        irradiance: 1.0,
    };
}

/// One converged operating point. Powers are per unit on the spec base.
#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    pub voltages: Vec<Complex>,
    pub branch_currents: Vec<Complex>,
    pub head_power: Complex,
    pub pv_power: Complex,
    pub total_load: Complex,
    pub losses: f64,
    pub generation: f64,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
}

impl PowerFlowSolution {
    pub fn state_vector(&self) -> StateVector {
        StateVector {
            bus_voltages: self.voltages.iter().map(|v| v.abs()).collect(),
            head_p: self.head_power.re,
            head_q: self.head_power.im,
            pv_p: self.pv_power.re,
        }
    }

    /// generation − load − losses, per unit; ≤ 1e-8 for any accepted solve.
    pub fn power_balance_error(&self) -> f64 {
        (self.generation - self.total_load.re - self.losses).abs()
    }
}

/// Delivered load over delivered load plus losses.
pub fn compute_efficiency(sol: &PowerFlowSolution) -> Result<f64> {
    if !sol.converged {
        return Err(FeederError::Diverged {
            iterations: sol.iterations,
            mismatch: sol.max_mismatch,
        });
    }
    if sol.total_load.re <= 0.0 {
        return Err(FeederError::UndefinedEfficiency);
    }
    Ok(sol.total_load.re / (sol.total_load.re + sol.losses))
}

// ── Power flow ─────────────────────────────────────────────────────────

const MAX_ITER: usize = 100;
const MISMATCH_TOL: f64 = 1e-11;
const V_COLLAPSE: f64 = 0.5;
const V_CEILING: f64 = 1.5;

/// PV injection at the given bus voltage magnitude, per unit. The
/// irradiance multiplier scales the whole injection so a dark inverter
/// exchanges nothing.
fn pv_injection(pv: &PvSpec, v: f64, delta: f64, irradiance: f64) -> Complex {
    let p = pv.source_pu * v * delta.sin() / pv.x_pu;
    let q = (pv.source_pu * v * delta.cos() - v * v) / pv.x_pu;
    Complex::new(p, q).scale(irradiance)
}

/// Forward-backward sweep on the radial tree.
pub fn solve_power_flow(
    spec: &FeederSpec,
    u: &ControlVector,
    conditions: Conditions,
) -> Result<PowerFlowSolution> {
    let topo = spec.validate()?;
    solve_with_topology(spec, &topo, u, conditions)
}

/// Same as [`solve_power_flow`] with a pre-validated topology, for callers
/// that solve the same feeder many times.
pub fn solve_with_topology(
    spec: &FeederSpec,
    topo: &Topology,
    u: &ControlVector,
    conditions: Conditions,
) -> Result<PowerFlowSolution> {
    if !u.is_feasible(spec.delta_max()) {
        return Err(FeederError::InvalidControl(format!(
            "tap {} / delta {} outside feasible ranges",
            u.tap, u.delta
        )));
    }
    let n = spec.buses.len();
    let base = spec.base_mva;
    let loads: Vec<Complex> = spec
        .buses
        .iter()
        .map(|b| Complex::new(b.load_mw / base, b.load_mvar / base).scale(conditions.load_scale))
        .collect();
    let cap_b = match (&spec.capacitor, u.cap_on) {
        (Some(c), true) => {
            let mut b = vec![0.0; n];
            b[spec.bus_index(c.bus)?] = c.mvar / base;
            b
        }
        _ => vec![0.0; n],
    };
    let pv_at = match &spec.pv {
        Some(p) => Some((spec.bus_index(p.bus)?, p)),
        None => None,
    };

    let mut v = vec![Complex::new(1.0, 0.0); n];
    let mut branch_current = vec![Complex::ZERO; spec.branches.len()];
    let mut iterations = 0;
    let mut max_mismatch = f64::INFINITY;
    let mut prev_mismatch = f64::INFINITY;
    let mut relaxation = 1.0;
    let mut converged = false;

    // Device current drawn from the bus at the present voltage estimate.
    let device_current = |bus: usize, vb: Complex| -> Complex {
        let mut s_draw = loads[bus];
        if let Some((pb, p)) = pv_at {
            if pb == bus {
                s_draw = s_draw - pv_injection(p, vb.abs(), u.delta, conditions.irradiance);
            }
        }
        let mut i = if s_draw == Complex::ZERO {
            Complex::ZERO
        } else {
            (s_draw / vb).conj()
        };
        // Shunt capacitor: admittance jB, current drawn = jB·V.
        if cap_b[bus] != 0.0 {
            i = i + Complex::new(-vb.im, vb.re).scale(cap_b[bus]);
        }
        i
    };

    while iterations < MAX_ITER {
        iterations += 1;

        // Backward: accumulate branch currents from the leaves toward the
        // root; an ideal regulator multiplies the child-side current by
        // the tap when it is reflected to the parent side.
        let mut into_subtree = vec![Complex::ZERO; n];
        for &bus in topo.order.iter().rev() {
            let mut i = device_current(bus, v[bus]) + into_subtree[bus];
            if let Some((pbus, br)) = topo.parent[bus] {
                branch_current[br] = i;
                if matches!(spec.branches[br].kind, BranchKind::Regulator) {
                    i = i.scale(u.tap);
                }
                into_subtree[pbus] = into_subtree[pbus] + i;
            }
        }

        // Forward: update voltages from the root, under-relaxed when the
        // iteration is struggling near the loadability limit.
        for &bus in &topo.order {
            if let Some((pbus, br)) = topo.parent[bus] {
                let fresh = match spec.branches[br].kind {
                    BranchKind::Line { r_pu, x_pu } => {
                        v[pbus] - Complex::new(r_pu, x_pu) * branch_current[br]
                    }
                    BranchKind::Regulator => v[pbus].scale(u.tap),
                };
                v[bus] = fresh.scale(relaxation) + v[bus].scale(1.0 - relaxation);
            }
        }

        // Per-bus power mismatch with device currents re-evaluated at the
        // updated voltages.
        max_mismatch = 0.0;
        for &bus in &topo.order {
            if bus == topo.slack {
                continue;
            }
            let (_, br) = topo.parent[bus].expect("non-slack bus has a parent");
            let mut net_in = branch_current[br];
            for p in topo.parent.iter().flatten() {
                {
                    let (pbus, cbr) = p;
                    if *pbus == bus {
                        let mut out = branch_current[*cbr];
                        if matches!(spec.branches[*cbr].kind, BranchKind::Regulator) {
                            out = out.scale(u.tap);
                        }
                        net_in = net_in - out;
                    }
                }
            }
            let err_s = v[bus] * (net_in - device_current(bus, v[bus])).conj();
            max_mismatch = max_mismatch.max(err_s.abs());
        }
        if max_mismatch <= MISMATCH_TOL {
            converged = true;
            break;
        }
        if max_mismatch > prev_mismatch {
            relaxation = (relaxation * 0.5).max(0.25);
        } else if relaxation < 1.0 {
            relaxation = (relaxation * 1.1).min(1.0);
        }
        prev_mismatch = max_mismatch;
    }

    if !converged {
        return Err(FeederError::Diverged {
            iterations,
            mismatch: max_mismatch,
        });
    }
    for (i, vb) in v.iter().enumerate() {
        let mag = vb.abs();
        if !(V_COLLAPSE..=V_CEILING).contains(&mag) || !mag.is_finite() {
            return Err(FeederError::VoltageCollapse {
                bus: spec.buses[i].id,
                v: mag,
            });
        }
    }

    // Head power: slack voltage times conjugate of the current leaving the
    // slack bus into the tree (parent-side current on each child branch).
    let mut head_i = Complex::ZERO;
    for (bus, p) in topo.parent.iter().enumerate() {
        if let Some((pbus, br)) = p {
            if *pbus == topo.slack {
                let mut i = branch_current[*br];
                if matches!(spec.branches[*br].kind, BranchKind::Regulator) {
                    i = i.scale(u.tap);
                }
                head_i = head_i + i;
                let _ = bus;
            }
        }
    }
    let head_power = v[topo.slack] * head_i.conj();

    let losses: f64 = spec
        .branches
        .iter()
        .zip(branch_current.iter())
        .map(|(br, i)| match br.kind {
            BranchKind::Line { r_pu, .. } => {
                let m = i.abs();
                m * m * r_pu
            }
            BranchKind::Regulator => 0.0,
        })
        .sum();

    let pv_power = match pv_at {
        Some((pb, p)) => pv_injection(p, v[pb].abs(), u.delta, conditions.irradiance),
        None => Complex::ZERO,
    };
    let total_load = loads.iter().fold(Complex::ZERO, |acc, s| acc + *s);

    Ok(PowerFlowSolution {
        voltages: v,
        branch_currents: branch_current,
        head_power,
        pv_power,
        total_load,
        losses,
        generation: head_power.re + pv_power.re,
        converged,
        iterations,
        max_mismatch,
    })
}

// ── Trajectories and scenario generation ───────────────────────────────

#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub control: ControlVector,
    pub conditions: Conditions,
    pub state: StateVector,
    pub efficiency: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub delta_max: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn mean_efficiency(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.efficiency).sum::<f64>() / self.steps.len() as f64
    }
}

/// Solve the feeder once per (control, conditions) pair; quasi-static, no
/// inter-step dynamics. Any step failure aborts with its index.
pub fn simulate_trajectory(
    spec: &FeederSpec,
    controls: &[ControlVector],
    profile: &[Conditions],
) -> Result<Trajectory> {
    if controls.len() != profile.len() || controls.is_empty() {
        return Err(FeederError::InvalidSpec(format!(
            "schedule length {} and profile length {} must match and be ≥ 1",
            controls.len(),
            profile.len()
        )));
    }
    let topo = spec.validate()?;
    let mut steps = Vec::with_capacity(controls.len());
    for (i, (u, cond)) in controls.iter().zip(profile.iter()).enumerate() {
        let sol = solve_with_topology(spec, &topo, u, *cond).map_err(|e| {
            FeederError::TrajectoryStep {
                step: i,
                source: Box::new(e),
            }
        })?;
        let efficiency = compute_efficiency(&sol).map_err(|e| FeederError::TrajectoryStep {
            step: i,
            source: Box::new(e),
        })?;
        steps.push(TrajectoryStep {
            control: *u,
            conditions: *cond,
            state: sol.state_vector(),
            efficiency,
        });
    }
    Ok(Trajectory {
        steps,
        delta_max: spec.delta_max(),
    })
}

/// Diurnal load/irradiance profile with uniform noise plus occasional
/// cloud transients that knock irradiance down for a step. `noise = 0`
/// gives the smooth shape used by the closed-loop experiments.
pub fn diurnal_profile(steps: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<Conditions> {
    (0..steps)
        .map(|i| {
            let tau = i as f64 / steps.max(1) as f64;
            let load_shape = 0.8 - 0.2 * (std::f64::consts::TAU * tau).cos();
            let irr_shape = if (0.2..=0.8).contains(&tau) {
                (std::f64::consts::PI * (tau - 0.2) / 0.6).sin()
            } else {
                0.0
            };
            let mut load = load_shape;
            let mut irr = irr_shape;
            if noise > 0.0 {
                load += rng.random_range(-noise..noise);
                irr *= 1.0 + rng.random_range(-noise..noise);
                // passing cloud: a sharp one-step irradiance dip
                if rng.random_range(0.0..1.0) < 0.08 {
                    irr *= rng.random_range(0.2..0.6);
                }
            }
            Conditions {
                load_scale: load.clamp(0.45, 1.02),
                irradiance: irr.clamp(0.0, 1.2),
            }
        })
        .collect()
}

/// Random but feasible control schedule: tap random walk over discrete
/// positions, capacitor toggles with dwell, smooth delta ramps toward
/// resampled setpoints.
pub fn random_control_schedule(
    steps: usize,
    delta_max: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<ControlVector> {
    let mut tap_pos = rng.random_range(8..=24) as i64;
    let mut cap_on = rng.random_range(0.0..1.0) < 0.5;
    let mut delta = rng.random_range(0.0..delta_max);
    let mut delta_target = rng.random_range(0.0..delta_max);
    let ramp = delta_max / 12.0;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let r: f64 = rng.random_range(0.0..1.0);
        if r < 0.18 {
            tap_pos = (tap_pos + 1).min(TAP_POSITIONS as i64 - 1);
        } else if r < 0.36 {
            tap_pos = (tap_pos - 1).max(0);
        }
        if rng.random_range(0.0..1.0) < 0.05 {
            cap_on = !cap_on;
        }
        if (delta - delta_target).abs() <= ramp {
            delta = delta_target;
            delta_target = rng.random_range(0.0..delta_max);
        } else if delta < delta_target {
            delta += ramp;
        } else {
            delta -= ramp;
        }
        out.push(ControlVector {
            tap: tap_value(tap_pos as usize),
            cap_on,
            delta,
        });
    }
    out
}

/// Deterministic set of scenario trajectories; scenario seeds derive from
/// the master seed.
pub fn generate_scenarios(
    spec: &FeederSpec,
    n_scenarios: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n_scenarios == 0 || steps < 2 {
        return Err(FeederError::InvalidSpec(
            "need at least one scenario of at least two steps".into(),
        ));
    }
    let delta_max = spec.delta_max();
    (0..n_scenarios)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s as u64 + 1));
            let controls = random_control_schedule(steps, delta_max, &mut rng);
            let profile = diurnal_profile(steps, 0.03, &mut rng);
            simulate_trajectory(spec, &controls, &profile)
        })
        .collect()
}

// ── Plain-text feeder config ───────────────────────────────────────────

impl FeederSpec {
    /// Parse the line-oriented feeder description. Unknown directives and
    /// malformed fields are rejected with their line number.
    pub fn parse(text: &str) -> Result<FeederSpec> {
        let mut base_mva = None;
        let mut base_kv = None;
        let mut slack_bus = None;
        let mut buses = Vec::new();
        let mut branches = Vec::new();
        let mut capacitor = None;
        let mut pv = None;

        let err = |line: usize, detail: &str| FeederError::Config {
            line,
            detail: detail.to_string(),
        };
        let parse_f64 = |line: usize, s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| err(line, &format!("bad number `{s}`")))
        };
        let parse_usize = |line: usize, s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| err(line, &format!("bad integer `{s}`")))
        };
        let kv = |line: usize, tok: &str, key: &str| -> Result<String> {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| err(line, &format!("expected key=value, got `{tok}`")))?;
            if k != key {
                return Err(err(line, &format!("expected `{key}=`, got `{k}=`")));
            }
            Ok(v.to_string())
        };

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks[0] {
                "base_mva" => base_mva = Some(parse_f64(lineno, toks.get(2).ok_or_else(|| err(lineno, "base_mva = <value>"))?)?),
                "base_kv" => base_kv = Some(parse_f64(lineno, toks.get(2).ok_or_else(|| err(lineno, "base_kv = <value>"))?)?),
                "slack_bus" => slack_bus = Some(parse_usize(lineno, toks.get(2).ok_or_else(|| err(lineno, "slack_bus = <id>"))?)?),
                "bus" => {
                    if toks.len() != 4 {
                        return Err(err(lineno, "bus <id> load_mw=<v> load_mvar=<v>"));
                    }
                    buses.push(BusSpec {
                        id: parse_usize(lineno, toks[1])?,
                        load_mw: parse_f64(lineno, &kv(lineno, toks[2], "load_mw")?)?,
                        load_mvar: parse_f64(lineno, &kv(lineno, toks[3], "load_mvar")?)?,
                    });
                }
                "line" => {
                    if toks.len() != 5 {
                        return Err(err(lineno, "line <from> <to> r=<v> x=<v>"));
                    }
                    branches.push(BranchSpec {
                        from: parse_usize(lineno, toks[1])?,
                        to: parse_usize(lineno, toks[2])?,
                        kind: BranchKind::Line {
                            r_pu: parse_f64(lineno, &kv(lineno, toks[3], "r")?)?,
                            x_pu: parse_f64(lineno, &kv(lineno, toks[4], "x")?)?,
                        },
                    });
                }
                "regulator" => {
                    if toks.len() != 3 {
                        return Err(err(lineno, "regulator <from> <to>"));
                    }
                    branches.push(BranchSpec {
                        from: parse_usize(lineno, toks[1])?,
                        to: parse_usize(lineno, toks[2])?,
                        kind: BranchKind::Regulator,
                    });
                }
                "capacitor" => {
                    if toks.len() != 3 {
                        return Err(err(lineno, "capacitor bus=<id> mvar=<v>"));
                    }
                    capacitor = Some(CapacitorSpec {
                        bus: parse_usize(lineno, &kv(lineno, toks[1], "bus")?)?,
                        mvar: parse_f64(lineno, &kv(lineno, toks[2], "mvar")?)?,
                    });
                }
                "pv" => {
                    if toks.len() != 5 {
                        return Err(err(
                            lineno,
                            "pv bus=<id> source_pu=<v> x_pu=<v> delta_max_deg=<v>",
                        ));
                    }
                    pv = Some(PvSpec {
                        bus: parse_usize(lineno, &kv(lineno, toks[1], "bus")?)?,
                        source_pu: parse_f64(lineno, &kv(lineno, toks[2], "source_pu")?)?,
                        x_pu: parse_f64(lineno, &kv(lineno, toks[3], "x_pu")?)?,
                        delta_max: parse_f64(lineno, &kv(lineno, toks[4], "delta_max_deg")?)?
                            .to_radians(),
                    });
                }
                other => return Err(err(lineno, &format!("unknown directive `{other}`"))),
            }
        }

        let spec = FeederSpec {
            base_mva: base_mva.ok_or_else(|| err(0, "missing base_mva"))?,
            base_kv: base_kv.unwrap_or(12.47),
            slack_bus: slack_bus.ok_or_else(|| err(0, "missing slack_bus"))?,
            buses,
            branches,
            capacitor,
            pv,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("base_mva = {}\n", self.base_mva));
        s.push_str(&format!("base_kv = {}\n", self.base_kv));
        s.push_str(&format!("slack_bus = {}\n", self.slack_bus));
        for b in &self.buses {
            s.push_str(&format!(
                "bus {} load_mw={} load_mvar={}\n",
                b.id, b.load_mw, b.load_mvar
            ));
        }
        for br in &self.branches {
            match br.kind {
                BranchKind::Line { r_pu, x_pu } => {
                    s.push_str(&format!("line {} {} r={} x={}\n", br.from, br.to, r_pu, x_pu))
                }
                BranchKind::Regulator => {
                    s.push_str(&format!("regulator {} {}\n", br.from, br.to))
                }
            }
        }
        if let Some(c) = &self.capacitor {
            s.push_str(&format!("capacitor bus={} mvar={}\n", c.bus, c.mvar));
        }
        if let Some(p) = &self.pv {
            s.push_str(&format!(
                "pv bus={} source_pu={} x_pu={} delta_max_deg={}\n",
                p.bus,
                p.source_pu,
                p.x_pu,
                p.delta_max.to_degrees()
            ));
        }
        s
    }
}

/// Control that yields the Fig-6-style operating point: mid tap, capacitor
/// in service, PV at its 1.5 MW phase angle.
pub fn nominal_controls() -> ControlVector {
    ControlVector {
        tap: 1.0,
        cap_on: true,
        delta: 10f64.to_radians(),
    }
}
