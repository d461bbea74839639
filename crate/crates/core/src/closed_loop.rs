//! Closed-loop efficiency experiment: a trained model acts as the MPC on
//! three base control models, every prediction is rounded to the feasible
//! control set, the simulator advances, and the achieved efficiencies are
//! compared against the unoptimized baselines. Also renders the
//! leaderboard and efficiency tables.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::{
    compute_efficiency, solve_with_topology, tap_position, tap_value, Conditions, ControlVector,
    FeederError, FeederSpec, StateVector, Trajectory, TAP_MAX, TAP_MIN,
};
use crate::model::{Model, ModelError};

#[derive(Debug, Error)]
pub enum ClosedLoopError {
    #[error("non-finite control component `{0}` from the controller")]
    NonFinite(&'static str),
    #[error("closed loop failed at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: FeederError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error("reference policy has no logged states")]
    EmptyPolicy,
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report serialization: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, ClosedLoopError>;

// ── Feasibility clamp ──────────────────────────────────────────────────

/// Round a raw physical control triple onto the feasible set: tap snapped
/// to the nearest of the 33 positions after clamping to [0.90, 1.10],
/// capacitor to the nearer of off/on, delta clamped to [0, delta_max].
pub fn clamp_controls(raw: [f64; 3], delta_max: f64) -> Result<ControlVector> {
    let names = ["tap", "capacitor", "pv_phase_angle"];
    for (v, name) in raw.iter().zip(names) {
        if !v.is_finite() {
            return Err(ClosedLoopError::NonFinite(name));
        }
    }
    Ok(ControlVector {
        tap: tap_value(tap_position(raw[0].clamp(TAP_MIN, TAP_MAX))),
        cap_on: raw[1] >= 0.5,
        delta: raw[2].clamp(0.0, delta_max),
    })
}

// ── Controllers ────────────────────────────────────────────────────────

/// Anything that proposes the next physical control triple given the
/// previous control, the measured state, and the desired next state.
pub trait Controller {
    fn next_control(
        &self,
        step: usize,
        u_prev: &ControlVector,
        x_prev: &StateVector,
        x_desired: &StateVector,
    ) -> Result<[f64; 3]>;
}

impl Controller for Model {
    fn next_control(
        &self,
        _step: usize,
        u_prev: &ControlVector,
        x_prev: &StateVector,
        x_desired: &StateVector,
    ) -> Result<[f64; 3]> {
        let enc = self.predict_encoded(u_prev, &[x_prev.clone(), x_desired.clone()])?;
        let (tap, cap, delta) = ControlVector::decode(enc, self.spec.delta_max);
        Ok([tap, cap, delta])
    }
}

/// Replays a logged control schedule; the oracle controller for the
/// replay-identity check.
pub struct ReplayController(pub Vec<ControlVector>);

impl Controller for ReplayController {
    fn next_control(
        &self,
        step: usize,
        _u_prev: &ControlVector,
        _x_prev: &StateVector,
        _x_desired: &StateVector,
    ) -> Result<[f64; 3]> {
        let u = self.0[step % self.0.len()];
        Ok([u.tap, if u.cap_on { 1.0 } else { 0.0 }, u.delta])
    }
}

/// Holds one control fixed; the unoptimized baseline.
pub struct ConstantController(pub ControlVector);

impl Controller for ConstantController {
    fn next_control(
        &self,
        _step: usize,
        _u_prev: &ControlVector,
        _x_prev: &StateVector,
        _x_desired: &StateVector,
    ) -> Result<[f64; 3]> {
        Ok([
            self.0.tap,
            if self.0.cap_on { 1.0 } else { 0.0 },
            self.0.delta,
        ])
    }
}

// ── Reference policy ───────────────────────────────────────────────────

/// Supplies the desired next state x_i handed to the MPC at each step.
pub trait ReferencePolicy {
    fn desired_state(&self, step: usize, horizon: usize) -> &StateVector;
}

/// Default policy: at each logged time index, the state from whichever
/// trajectory achieved the highest efficiency there. Run steps map onto
/// the logged timeline by fraction when the horizons differ.
pub struct BestLoggedPolicy {
    per_step: Vec<StateVector>,
}

impl BestLoggedPolicy {
    pub fn from_trajectories(trajs: &[Trajectory]) -> Result<BestLoggedPolicy> {
        let t_len = trajs.iter().map(|t| t.len()).min().unwrap_or(0);
        if t_len == 0 {
            return Err(ClosedLoopError::EmptyPolicy);
        }
        let mut per_step = Vec::with_capacity(t_len);
        for i in 0..t_len {
            let best = trajs
                .iter()
                .max_by(|a, b| {
                    a.steps[i]
                        .efficiency
                        .partial_cmp(&b.steps[i].efficiency)
                        .expect("finite efficiency")
                })
                .expect("non-empty trajectory set");
            per_step.push(best.steps[i].state.clone());
        }
        Ok(BestLoggedPolicy { per_step })
    }
}

impl ReferencePolicy for BestLoggedPolicy {
    fn desired_state(&self, step: usize, horizon: usize) -> &StateVector {
        let last = self.per_step.len() - 1;
        let j = if horizon <= 1 {
            0
        } else {
            (step * last + (horizon - 1) / 2) / (horizon - 1)
        };
        &self.per_step[j.min(last)]
    }
}

// ── Closed-loop execution ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseControlModel {
    pub index: usize,
    pub initial: ControlVector,
}

/// The three base control models share one PV phase angle and differ in
/// tap and capacitor settings.
pub fn default_base_models() -> [BaseControlModel; 3] {
    let delta = 10f64.to_radians();
    [
        BaseControlModel {
            index: 0,
            initial: ControlVector::new(1.00, false, delta),
        },
        BaseControlModel {
            index: 1,
            initial: ControlVector::new(0.95, true, delta),
        },
        BaseControlModel {
            index: 2,
            initial: ControlVector::new(1.05, false, delta),
        },
    ]
}

#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub base_index: usize,
    pub efficiencies: Vec<f64>,
    pub mean_efficiency: f64,
    pub controls: Vec<ControlVector>,
    pub states: Vec<StateVector>,
}

/// Drive the feeder for `profile.len()` steps. Every applied control comes
/// from the controller (clamped to feasibility); the base model seeds the
/// previous-control input and the initial measured state.
pub fn run_closed_loop(
    controller: &dyn Controller,
    base: &BaseControlModel,
    spec: &FeederSpec,
    policy: &dyn ReferencePolicy,
    profile: &[Conditions],
) -> Result<ClosedLoopRun> {
    if profile.is_empty() {
        return Err(ClosedLoopError::EmptyHorizon);
    }
    let horizon = profile.len();
    let delta_max = spec.delta_max();
    let topo = spec.validate()?;

    let mut u_prev = base.initial.snapped(delta_max);
    let init = solve_with_topology(spec, &topo, &u_prev, profile[0])
        .map_err(|source| ClosedLoopError::Step { step: 0, source })?;
    let mut x_prev = init.state_vector();

    let mut efficiencies = Vec::with_capacity(horizon);
    let mut controls = Vec::with_capacity(horizon);
    let mut states = Vec::with_capacity(horizon);
    for (i, cond) in profile.iter().enumerate() {
        let desired = policy.desired_state(i, horizon);
        let raw = controller.next_control(i, &u_prev, &x_prev, desired)?;
        let u = clamp_controls(raw, delta_max)?;
        let sol = solve_with_topology(spec, &topo, &u, *cond)
            .map_err(|source| ClosedLoopError::Step { step: i, source })?;
        let eff = compute_efficiency(&sol)
            .map_err(|source| ClosedLoopError::Step { step: i, source })?;
        efficiencies.push(eff);
        controls.push(u);
        states.push(sol.state_vector());
        u_prev = u;
        x_prev = states.last().expect("just pushed").clone();
    }
    let mean = efficiencies.iter().sum::<f64>() / horizon as f64;
    Ok(ClosedLoopRun {
        base_index: base.index,
        efficiencies,
        mean_efficiency: mean,
        controls,
        states,
    })
}

// ── Reports ────────────────────────────────────────────────────────────

/// One leaderboard row: metrics averaged over the repeated runs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchResult {
    pub name: String,
    pub loss: f64,
    pub accuracy: f64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// Loss reduction of an attention model against its no-attention
/// counterpart, as a percentage of the counterpart's loss.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReductionEntry {
    pub name: String,
    pub versus: String,
    pub percent: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MpcOutcome {
    pub model: String,
    pub mean_efficiency: Option<f64>,
    pub failed_at_step: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BaseModelEfficiency {
    pub base_index: usize,
    pub baseline_mean: f64,
    pub mpc: Vec<MpcOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EfficiencyReport {
    pub leaderboard: Vec<ArchResult>,
    pub reductions_vs_b: Vec<ReductionEntry>,
    pub bases: Vec<BaseModelEfficiency>,
    pub seed: u64,
}

fn cell_of(name: &str) -> Option<&str> {
    name.split_once('-').map(|(_, cell)| cell)
}

fn category_of(name: &str) -> Option<&str> {
    name.split_once('-').map(|(cat, _)| cat)
}

/// Assemble the sorted leaderboard, the attention-vs-B loss reductions,
/// and the per-base-model efficiency table.
pub fn efficiency_report(
    mut arch_results: Vec<ArchResult>,
    bases: Vec<BaseModelEfficiency>,
    seed: u64,
) -> EfficiencyReport {
    arch_results.sort_by(|a, b| {
        a.loss
            .partial_cmp(&b.loss)
            .expect("finite losses")
            .then_with(|| a.name.cmp(&b.name))
    });
    let mut reductions = Vec::new();
    for r in &arch_results {
        let (cat, cell) = match (category_of(&r.name), cell_of(&r.name)) {
            (Some(c), Some(k)) => (c, k),
            _ => continue,
        };
        if !(cat == "A" || cat.starts_with("AM")) {
            continue;
        }
        // AM-LSTM2 and AM_simple-LSTM compare against B-LSTM.
        let base_cell = cell.trim_end_matches(|c: char| c.is_ascii_digit());
        let b_name = format!("B-{base_cell}");
        if let Some(b) = arch_results.iter().find(|a| a.name == b_name) {
            if b.loss > 0.0 {
                reductions.push(ReductionEntry {
                    name: r.name.clone(),
                    versus: b_name,
                    percent: 100.0 * (b.loss - r.loss) / b.loss,
                });
            }
        }
    }
    EfficiencyReport {
        leaderboard: arch_results,
        reductions_vs_b: reductions,
        bases,
        seed,
    }
}

impl EfficiencyReport {
    /// Aligned plain-text rendering of the leaderboard and efficiency
    /// tables.
    pub fn render_text(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        writeln!(s, "Leaderboard (sorted by averaged test loss, seed {})", self.seed).unwrap();
        writeln!(
            s,
            "{:<18} {:>12} {:>8} {:>12} {:>12}",
            "Model", "Loss", "Acc", "TrainTime", "EvalTime"
        )
        .unwrap();
        for r in &self.leaderboard {
            writeln!(
                s,
                "{:<18} {:>12.6} {:>7.1}% {:>11.2}s {:>11.3}s",
                r.name,
                r.loss,
                100.0 * r.accuracy,
                r.train_seconds,
                r.eval_seconds
            )
            .unwrap();
        }
        if !self.reductions_vs_b.is_empty() {
            writeln!(s).unwrap();
            writeln!(s, "Test-loss reduction from the attention layer:").unwrap();
            for r in &self.reductions_vs_b {
                writeln!(s, "  {} vs {}: {:.1}%", r.name, r.versus, r.percent).unwrap();
            }
        }
        if !self.bases.is_empty() {
            writeln!(s).unwrap();
            writeln!(s, "Closed-loop efficiencies (baseline vs MPC):").unwrap();
            for b in &self.bases {
                write!(s, "  base model {}: baseline {:.4}", b.base_index, b.baseline_mean)
                    .unwrap();
                for m in &b.mpc {
                    match (m.mean_efficiency, m.failed_at_step) {
                        (Some(e), _) => write!(s, "  {} {:.4}", m.model, e).unwrap(),
                        (None, Some(step)) => {
                            write!(s, "  {} FAILED@{}", m.model, step).unwrap()
                        }
                        (None, None) => write!(s, "  {} n/a", m.model).unwrap(),
                    }
                }
                writeln!(s).unwrap();
            }
        }
        s
    }

    /// Machine-readable form; `from_json` inverts it losslessly.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| ClosedLoopError::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<EfficiencyReport> {
        serde_json::from_str(text).map_err(|e| ClosedLoopError::Serde(e.to_string()))
    }

    /// Leaderboard as CSV with full-precision numeric fields.
    pub fn leaderboard_csv(&self) -> String {
        use crate::util::fmt_f64;
        let mut s = String::from("model,loss,accuracy,train_seconds,eval_seconds\n");
        for r in &self.leaderboard {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.name,
                fmt_f64(r.loss),
                fmt_f64(r.accuracy),
                fmt_f64(r.train_seconds),
                fmt_f64(r.eval_seconds)
            ));
        }
        s
    }

    /// Efficiency table as CSV: one row per (base model, controller).
    pub fn efficiency_csv(&self) -> String {
        use crate::util::fmt_f64;
        let mut s = String::from("base_index,controller,mean_efficiency,failed_at_step\n");
        for b in &self.bases {
            s.push_str(&format!(
                "{},baseline,{},\n",
                b.base_index,
                fmt_f64(b.baseline_mean)
            ));
            for m in &b.mpc {
                s.push_str(&format!(
                    "{},{},{},{}\n",
                    b.base_index,
                    m.model,
                    m.mean_efficiency.map(fmt_f64).unwrap_or_default(),
                    m.failed_at_step.map(|v| v.to_string()).unwrap_or_default()
                ));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{
        diurnal_profile, generate_scenarios, nominal_controls, simulate_trajectory,
        random_control_schedule,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clamp_snaps_tap_and_rounds_capacitor() {
        let dm = 30f64.to_radians();
        let u = clamp_controls([1.15, 0.7, 0.1], dm).unwrap();
        assert!((u.tap - 1.10).abs() < 1e-12);
        assert!(u.cap_on);
        assert!((u.delta - 0.1).abs() < 1e-15);

        // already feasible and on a tap position: unchanged
        let grid = tap_value(20);
        let v = clamp_controls([grid, 0.0, 0.2], dm).unwrap();
        assert_eq!(v.tap.to_bits(), tap_value(20).to_bits());
        assert!(!v.cap_on);

        let w = clamp_controls([0.5, 0.2, -3.0], dm).unwrap();
        assert!((w.tap - TAP_MIN).abs() < 1e-12);
        assert_eq!(w.delta, 0.0);
    }

    #[test]
    fn clamp_rejects_non_finite_components_by_name() {
        let dm = 0.5;
        match clamp_controls([f64::NAN, 0.0, 0.0], dm) {
            Err(ClosedLoopError::NonFinite(name)) => assert_eq!(name, "tap"),
            other => panic!("{other:?}"),
        }
        match clamp_controls([1.0, 0.0, f64::INFINITY], dm) {
            Err(ClosedLoopError::NonFinite(name)) => assert_eq!(name, "pv_phase_angle"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn replay_controller_reproduces_logged_efficiency_exactly() {
        let spec = FeederSpec::default_feeder();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let controls = random_control_schedule(12, spec.delta_max(), &mut rng);
        let profile = diurnal_profile(12, 0.02, &mut rng);
        let logged = simulate_trajectory(&spec, &controls, &profile).unwrap();

        let policy = BestLoggedPolicy::from_trajectories(std::slice::from_ref(&logged)).unwrap();
        let base = BaseControlModel {
            index: 0,
            initial: controls[0],
        };
        let replay = ReplayController(controls.clone());
        let run = run_closed_loop(&replay, &base, &spec, &policy, &profile).unwrap();
        assert!((run.mean_efficiency - logged.mean_efficiency()).abs() <= 1e-12);
        for (a, b) in run.efficiencies.iter().zip(logged.steps.iter()) {
            assert!((a - b.efficiency).abs() <= 1e-12);
        }
    }

    #[test]
    fn constant_controls_on_flat_profile_give_constant_trace() {
        let spec = FeederSpec::default_feeder();
        let base = default_base_models()[0];
        let profile = vec![Conditions::NOMINAL; 6];
        let traj = simulate_trajectory(&spec, &[nominal_controls(); 6], &profile).unwrap();
        let policy = BestLoggedPolicy::from_trajectories(std::slice::from_ref(&traj)).unwrap();
        let run = run_closed_loop(
            &ConstantController(base.initial),
            &base,
            &spec,
            &policy,
            &profile,
        )
        .unwrap();
        for e in &run.efficiencies {
            assert_eq!(e.to_bits(), run.efficiencies[0].to_bits());
        }
        for u in &run.controls {
            assert!(u.is_feasible(spec.delta_max()));
        }
    }

    #[test]
    fn best_logged_policy_picks_the_highest_efficiency_state() {
        let spec = FeederSpec::default_feeder();
        // two trajectories: capacitor on is strictly more efficient here
        let profile = vec![Conditions::NOMINAL; 3];
        let worse = simulate_trajectory(
            &spec,
            &[ControlVector::new(1.0, false, 0.1); 3],
            &profile,
        )
        .unwrap();
        let better = simulate_trajectory(
            &spec,
            &[ControlVector::new(1.05, true, 0.2); 3],
            &profile,
        )
        .unwrap();
        let policy =
            BestLoggedPolicy::from_trajectories(&[worse.clone(), better.clone()]).unwrap();
        for i in 0..3 {
            assert_eq!(policy.desired_state(i, 3), &better.steps[i].state);
        }
    }

    #[test]
    fn failures_carry_the_step_index() {
        // A controller that emits an infeasibly huge-but-finite tap is
        // clamped fine; drive failure instead with absurd conditions.
        struct Nan;
        impl Controller for Nan {
            fn next_control(
                &self,
                step: usize,
                _u: &ControlVector,
                _x: &StateVector,
                _d: &StateVector,
            ) -> Result<[f64; 3]> {
                if step == 2 {
                    Ok([f64::NAN, 0.0, 0.0])
                } else {
                    Ok([1.0, 1.0, 0.1])
                }
            }
        }
        let spec = FeederSpec::default_feeder();
        let profile = vec![Conditions::NOMINAL; 5];
        let traj = simulate_trajectory(&spec, &[nominal_controls(); 5], &profile).unwrap();
        let policy = BestLoggedPolicy::from_trajectories(std::slice::from_ref(&traj)).unwrap();
        let base = default_base_models()[0];
        match run_closed_loop(&Nan, &base, &spec, &policy, &profile) {
            Err(ClosedLoopError::NonFinite("tap")) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn report_sorts_by_loss_and_computes_reductions() {
        let arch = vec![
            ArchResult {
                name: "B-LSTM".into(),
                loss: 0.2,
                accuracy: 0.9,
                train_seconds: 2.0,
                eval_seconds: 0.1,
            },
            ArchResult {
                name: "A-LSTM".into(),
                loss: 0.1,
                accuracy: 0.95,
                train_seconds: 3.0,
                eval_seconds: 0.2,
            },
        ];
        let report = efficiency_report(arch, Vec::new(), 7);
        assert_eq!(report.leaderboard[0].name, "A-LSTM");
        assert_eq!(report.leaderboard[1].name, "B-LSTM");
        for w in report.leaderboard.windows(2) {
            assert!(w[0].loss <= w[1].loss);
        }
        assert_eq!(report.reductions_vs_b.len(), 1);
        let red = &report.reductions_vs_b[0];
        assert_eq!(red.name, "A-LSTM");
        assert_eq!(red.versus, "B-LSTM");
        assert!((red.percent - 50.0).abs() < 1e-12);
    }

    #[test]
    fn single_model_report_is_a_single_row() {
        let arch = vec![ArchResult {
            name: "C-Dense".into(),
            loss: 0.5,
            accuracy: 0.5,
            train_seconds: 1.0,
            eval_seconds: 0.1,
        }];
        let report = efficiency_report(arch, Vec::new(), 1);
        assert_eq!(report.leaderboard.len(), 1);
        assert!(report.reductions_vs_b.is_empty());
        assert!(report.render_text().contains("C-Dense"));
    }

    #[test]
    fn report_json_round_trips_losslessly() {
        let arch = vec![ArchResult {
            name: "AM_simple-LSTM".into(),
            loss: 0.0016,
            accuracy: 0.98,
            train_seconds: 352.6,
            eval_seconds: 1.61,
        }];
        let bases = vec![BaseModelEfficiency {
            base_index: 0,
            baseline_mean: 0.9571,
            mpc: vec![MpcOutcome {
                model: "AM_simple-LSTM".into(),
                mean_efficiency: Some(0.9702),
                failed_at_step: None,
            }],
        }];
        let report = efficiency_report(arch, bases, 42);
        let json = report.to_json().unwrap();
        let back = EfficiencyReport::from_json(&json).unwrap();
        assert_eq!(back, report);
        assert!(report.leaderboard_csv().contains("AM_simple-LSTM"));
        assert!(report.efficiency_csv().contains("baseline"));
    }

    #[test]
    fn scenario_set_supports_policy_construction() {
        let spec = FeederSpec::default_feeder();
        let trajs = generate_scenarios(&spec, 3, 10, 77).unwrap();
        let policy = BestLoggedPolicy::from_trajectories(&trajs).unwrap();
        // fraction mapping reaches both ends of the logged timeline
        let first = policy.desired_state(0, 5);
        let last = policy.desired_state(4, 5);
        assert_eq!(first, policy.per_step.first().unwrap());
        assert_eq!(last, policy.per_step.last().unwrap());
    }
}
