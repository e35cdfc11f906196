//! Admission rules for new deployments.
//!
//! - zeroth moment: admit while the active core count stays below `t`;
//! - first moment: admit while the summed expected future size stays below
//!   `t` at every look-ahead step;
//! - second moment: admit while Cantelli's bound on the probability of
//!   exceeding capacity stays at or below `ρ` at every look-ahead step.
//!
//! Every rule also refuses a deployment that does not fit right now.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::belief::BeliefState;
use crate::error::{ensure, Error, Result};
use crate::moments::{moment_profile_into, LookaheadGrid, MomentProfile, ProfileWorkspace};
use crate::population::PopulationModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Zeroth,
    First,
    Second,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Zeroth, PolicyKind::First, PolicyKind::Second];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Zeroth => "zeroth",
            PolicyKind::First => "first",
            PolicyKind::Second => "second",
        }
    }

    pub fn uses_moments(self) -> bool {
        self != PolicyKind::Zeroth
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeroth" => Ok(PolicyKind::Zeroth),
            "first" => Ok(PolicyKind::First),
            "second" => Ok(PolicyKind::Second),
            other => Err(Error::InvalidParameter(format!("unknown policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Core threshold `t` of the zeroth and first moment rules.
    #[serde(default)]
    pub threshold_t: f64,
    /// Tail-probability threshold `ρ` of the second moment rule.
    #[serde(default)]
    pub threshold_rho: f64,
    #[serde(default)]
    pub grid: LookaheadGrid,
}

impl PolicyConfig {
    pub fn zeroth(t: f64) -> Self {
        Self { kind: PolicyKind::Zeroth, threshold_t: t, threshold_rho: 0.0, grid: LookaheadGrid::default() }
    }

    pub fn first(t: f64) -> Self {
        Self { kind: PolicyKind::First, threshold_t: t, threshold_rho: 0.0, grid: LookaheadGrid::default() }
    }

    pub fn second(rho: f64) -> Self {
        Self { kind: PolicyKind::Second, threshold_t: 0.0, threshold_rho: rho, grid: LookaheadGrid::default() }
    }

    /// The threshold that is meaningful for this policy kind.
    pub fn threshold(&self) -> f64 {
        match self.kind {
            PolicyKind::Second => self.threshold_rho,
            _ => self.threshold_t,
        }
    }

    pub fn with_threshold(&self, value: f64) -> Self {
        let mut cfg = self.clone();
        match cfg.kind {
            PolicyKind::Second => cfg.threshold_rho = value,
            _ => cfg.threshold_t = value,
        }
        cfg
    }

    pub fn validate(&self, capacity: u64) -> Result<()> {
        self.grid.validate()?;
        match self.kind {
            PolicyKind::Zeroth => ensure(self.threshold_t >= 1.0 && self.threshold_t <= capacity as f64 + 1.0, || {
                format!("zeroth threshold must lie in [1, capacity + 1], got {}", self.threshold_t)
            }),
            PolicyKind::First => ensure(self.threshold_t > 0.0 && self.threshold_t.is_finite(), || {
                format!("first moment threshold must be positive, got {}", self.threshold_t)
            }),
            PolicyKind::Second => ensure(self.threshold_rho > 0.0 && self.threshold_rho < 1.0, || {
                format!("rho must lie in (0, 1), got {}", self.threshold_rho)
            }),
        }
    }
}

/// Outcome of one admission query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub accepted: bool,
    /// Flat grid index of the first violated look-ahead step, if any.
    pub binding_step: Option<usize>,
}

impl Decision {
    pub const ACCEPT: Decision = Decision { accepted: true, binding_step: None };

    pub fn reject_at(step: usize) -> Self {
        Decision { accepted: false, binding_step: Some(step) }
    }
}

/// Zeroth moment rule: accept iff `active + new_size < t`.
pub fn admit_zeroth(active_cores: u64, new_size: u64, t: f64) -> bool {
    ((active_cores + new_size) as f64) < t
}

/// Summed moment profiles of the admitted deployments.
#[derive(Debug, Clone, Default)]
pub struct ClusterMomentState {
    pub sum_e_l: Vec<f64>,
    pub sum_v_l: Vec<f64>,
    pub profiles: HashMap<u64, MomentProfile>,
    workspace: ProfileWorkspace,
}

impl ClusterMomentState {
    pub fn new(grid: &LookaheadGrid) -> Self {
        Self {
            sum_e_l: vec![0.0; grid.len()],
            sum_v_l: vec![0.0; grid.len()],
            profiles: HashMap::new(),
            workspace: ProfileWorkspace::default(),
        }
    }

    /// Recomputes every profile from current beliefs and sizes, dropping
    /// profiles of deployments that are no longer listed.
    pub fn recompute<'a, I>(&mut self, deployments: I, model: &PopulationModel, grid: &LookaheadGrid) -> Result<()>
    where
        I: IntoIterator<Item = DeploymentView<'a>>,
    {
        reset(&mut self.sum_e_l, grid.len());
        reset(&mut self.sum_v_l, grid.len());
        let mut stale: HashMap<u64, MomentProfile> = std::mem::take(&mut self.profiles);
        for d in deployments {
            let mut profile = stale.remove(&d.id).unwrap_or_else(|| MomentProfile::zeros(grid));
            moment_profile_into(d.belief, d.cores, model, grid, &mut self.workspace, &mut profile)?;
            add_into(&mut self.sum_e_l, &profile.e_l);
            add_into(&mut self.sum_v_l, &profile.v_l);
            self.profiles.insert(d.id, profile);
        }
        debug_assert!(self.sums_consistent());
        Ok(())
    }

    /// Profile of a deployment that is not part of the state.
    pub fn candidate_profile(
        &mut self,
        belief: &BeliefState,
        cores: u64,
        model: &PopulationModel,
        grid: &LookaheadGrid,
    ) -> Result<MomentProfile> {
        let mut profile = MomentProfile::zeros(grid);
        moment_profile_into(belief, cores, model, grid, &mut self.workspace, &mut profile)?;
        Ok(profile)
    }

    fn sums_consistent(&self) -> bool {
        let mut e = vec![0.0; self.sum_e_l.len()];
        let mut v = vec![0.0; self.sum_v_l.len()];
        for p in self.profiles.values() {
            add_into(&mut e, &p.e_l);
            add_into(&mut v, &p.v_l);
        }
        let close = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0))
        };
        close(&e, &self.sum_e_l) && close(&v, &self.sum_v_l)
    }
}

fn reset(v: &mut Vec<f64>, len: usize) {
    v.clear();
    v.resize(len, 0.0);
}

fn add_into(acc: &mut [f64], xs: &[f64]) {
    for (a, x) in acc.iter_mut().zip(xs) {
        *a += x;
    }
}

fn check_grid(state: &ClusterMomentState, new_profile: &MomentProfile) -> Result<()> {
    if state.sum_e_l.len() != new_profile.len() || state.sum_v_l.len() != new_profile.len() {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// First moment rule: accept iff `ΣE[L_n] + E[L_n^new] < t` at every step.
pub fn admit_first(state: &ClusterMomentState, new_profile: &MomentProfile, t: f64) -> Result<Decision> {
    check_grid(state, new_profile)?;
    let violated = state
        .sum_e_l
        .iter()
        .zip(&new_profile.e_l)
        .position(|(s, e)| s + e >= t);
    Ok(violated.map_or(Decision::ACCEPT, Decision::reject_at))
}

/// Cantelli bound `V / (V + (c - E)^2)` on `P(L ≥ c)`; `1` once `E ≥ c`.
pub fn cantelli_bound(e: f64, v: f64, capacity: f64) -> f64 {
    let slack = capacity - e;
    if slack <= 0.0 {
        return 1.0;
    }
    if v <= 0.0 {
        return 0.0;
    }
    v / (v + slack * slack)
}

/// Second moment rule: accept iff at every step `E < c` and
/// `V / (V + (c - E)^2) ≤ ρ`.
pub fn admit_second(
    state: &ClusterMomentState,
    new_profile: &MomentProfile,
    rho: f64,
    capacity: f64,
) -> Result<Decision> {
    check_grid(state, new_profile)?;
    for i in 0..new_profile.len() {
        let e = state.sum_e_l[i] + new_profile.e_l[i];
        let v = state.sum_v_l[i] + new_profile.v_l[i];
        if e >= capacity || cantelli_bound(e, v, capacity) > rho {
            return Ok(Decision::reject_at(i));
        }
    }
    Ok(Decision::ACCEPT)
}

/// Read-only view of an admitted deployment.
#[derive(Debug, Clone, Copy)]
pub struct DeploymentView<'a> {
    pub id: u64,
    pub belief: &'a BeliefState,
    pub cores: u64,
}

/// Cluster-level inputs to an admission query.
#[derive(Debug, Clone, Copy)]
pub struct ClusterView {
    pub capacity: u64,
    pub active_cores: u64,
}

/// Decides on a new deployment. Moment policies first refresh every
/// admitted deployment's profile (the look-ahead origin is now), then test
/// the candidate profile against the refreshed sums. The zeroth moment rule
/// never touches the moment state.
pub fn on_arrival<'a, I>(
    cfg: &PolicyConfig,
    model: &PopulationModel,
    cluster: ClusterView,
    state: &mut ClusterMomentState,
    deployments: I,
    candidate_belief: &BeliefState,
    candidate_cores: u64,
) -> Result<Decision>
where
    I: IntoIterator<Item = DeploymentView<'a>>,
{
    if cluster.active_cores + candidate_cores > cluster.capacity {
        return Ok(Decision::reject_at(0));
    }
    match cfg.kind {
        PolicyKind::Zeroth => Ok(if admit_zeroth(cluster.active_cores, candidate_cores, cfg.threshold_t) {
            Decision::ACCEPT
        } else {
            Decision::reject_at(0)
        }),
        PolicyKind::First | PolicyKind::Second => {
            state.recompute(deployments, model, &cfg.grid)?;
            let profile = state.candidate_profile(candidate_belief, candidate_cores, model, &cfg.grid)?;
            if cfg.kind == PolicyKind::First {
                admit_first(state, &profile, cfg.threshold_t)
            } else {
                admit_second(state, &profile, cfg.threshold_rho, cluster.capacity as f64)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state_with(e: Vec<f64>, v: Vec<f64>) -> ClusterMomentState {
        ClusterMomentState { sum_e_l: e, sum_v_l: v, ..Default::default() }
    }

    fn profile(e: Vec<f64>, v: Vec<f64>) -> MomentProfile {
        MomentProfile { truncated_at: vec![None], e_l: e, v_l: v }
    }

    #[test]
    fn zeroth_examples() {
        assert!(admit_zeroth(7, 2, 10.0));
        assert!(!admit_zeroth(8, 2, 10.0));
    }

    #[test]
    fn first_examples() {
        let empty = state_with(vec![0.0; 3], vec![0.0; 3]);
        let p = profile(vec![5.0, 4.0, 1.0], vec![0.0; 3]);
        assert_eq!(admit_first(&empty, &p, 6.0).unwrap(), Decision::ACCEPT);
        let busy = state_with(vec![0.0, 0.0, 5.5], vec![0.0; 3]);
        assert_eq!(admit_first(&busy, &p, 6.0).unwrap(), Decision::reject_at(2));
        let short = profile(vec![1.0], vec![0.0]);
        assert!(matches!(admit_first(&empty, &short, 6.0), Err(Error::GridMismatch)));
    }

    #[test]
    fn second_examples() {
        let empty = state_with(vec![0.0; 2], vec![0.0; 2]);
        let certain = profile(vec![90.0, 99.0], vec![0.0, 0.0]);
        assert!(admit_second(&empty, &certain, 1e-9, 100.0).unwrap().accepted);
        // V = (c - E)^2 gives a bound of exactly one half.
        let half = profile(vec![90.0, 50.0], vec![0.0, 2500.0]);
        assert_eq!(admit_second(&empty, &half, 0.49, 100.0).unwrap(), Decision::reject_at(1));
        assert!(admit_second(&empty, &half, 0.5, 100.0).unwrap().accepted);
        let over = profile(vec![100.0, 0.0], vec![0.0, 0.0]);
        assert!(!admit_second(&empty, &over, 0.99, 100.0).unwrap().accepted);
    }

    #[test]
    fn on_arrival_with_empty_cluster_depends_only_on_candidate() {
        let model = PopulationModel::default();
        let mut cfg = PolicyConfig::first(6.0);
        cfg.grid = LookaheadGrid::new(vec![24.0], 50, 1e-5).unwrap();
        let prior = BeliefState::from_prior(&model);
        let cluster = ClusterView { capacity: 100, active_cores: 0 };
        let mut state = ClusterMomentState::new(&cfg.grid);
        let small = on_arrival(&cfg, &model, cluster, &mut state, [], &prior, 2).unwrap();
        let large = on_arrival(&cfg, &model, cluster, &mut state, [], &prior, 6).unwrap();
        assert!(small.accepted);
        assert_eq!(large, Decision::reject_at(0));
    }

    #[test]
    fn on_arrival_is_pure() {
        let model = PopulationModel::default();
        let mut cfg = PolicyConfig::second(0.1);
        cfg.grid = LookaheadGrid::new(vec![24.0, 168.0], 60, 1e-5).unwrap();
        let beliefs: Vec<BeliefState> = (0..20)
            .map(|i| BeliefState::from_prior(&model).update_on_exposure(i as f64, 2).unwrap())
            .collect();
        let views = || beliefs.iter().enumerate().map(|(i, b)| DeploymentView { id: i as u64, belief: b, cores: 2 + i as u64 });
        let cluster = ClusterView { capacity: 400, active_cores: 230 };
        let prior = BeliefState::from_prior(&model);
        let mut s1 = ClusterMomentState::new(&cfg.grid);
        let mut s2 = ClusterMomentState::new(&cfg.grid);
        let d1 = on_arrival(&cfg, &model, cluster, &mut s1, views(), &prior, 3).unwrap();
        let d2 = on_arrival(&cfg, &model, cluster, &mut s2, views(), &prior, 3).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(s1.sum_e_l, s2.sum_e_l);
        assert_eq!(s1.sum_v_l, s2.sum_v_l);
        assert!(s1.sums_consistent());
    }

    #[test]
    fn capacity_is_enforced_for_every_policy() {
        let model = PopulationModel::default();
        let prior = BeliefState::from_prior(&model);
        let cluster = ClusterView { capacity: 10, active_cores: 9 };
        for cfg in [PolicyConfig::zeroth(1e9), PolicyConfig::first(1e9), PolicyConfig::second(0.99)] {
            let mut state = ClusterMomentState::new(&cfg.grid);
            let d = on_arrival(&cfg, &model, cluster, &mut state, [], &prior, 2).unwrap();
            assert!(!d.accepted, "{:?}", cfg.kind);
        }
    }

    #[test]
    fn config_validation() {
        assert!(PolicyConfig::zeroth(10.0).validate(100).is_ok());
        assert!(PolicyConfig::zeroth(1000.0).validate(100).is_err());
        assert!(PolicyConfig::first(1000.0).validate(100).is_ok());
        assert!(PolicyConfig::second(1.0).validate(100).is_err());
        assert!(PolicyConfig::second(0.1063).validate(100).is_ok());
        let text = toml::to_string(&PolicyConfig::second(0.1)).unwrap();
        let back: PolicyConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, PolicyConfig::second(0.1));
    }

    fn arrays(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (prop::collection::vec(0.0..50.0f64, n), prop::collection::vec(0.0..500.0f64, n))
    }

    proptest! {
        #[test]
        fn larger_profiles_stay_rejected(
            (se, sv) in arrays(8), (ne, nv) in arrays(8),
            (de, dv) in arrays(8), t in 1.0..120.0f64, rho in 0.01..0.99f64,
        ) {
            let state = state_with(se, sv);
            let small = profile(ne.clone(), nv.clone());
            let big = profile(
                ne.iter().zip(&de).map(|(a, b)| a + b).collect(),
                nv.iter().zip(&dv).map(|(a, b)| a + b).collect(),
            );
            if !admit_first(&state, &small, t).unwrap().accepted {
                prop_assert!(!admit_first(&state, &big, t).unwrap().accepted);
            }
            if !admit_second(&state, &small, rho, 100.0).unwrap().accepted {
                prop_assert!(!admit_second(&state, &big, rho, 100.0).unwrap().accepted);
            }
        }

        #[test]
        fn zeroth_ignores_beliefs(exposure in 0.0..1000.0f64, deaths in 0u32..10, active in 0u64..200, size in 1u64..20) {
            let model = PopulationModel::default();
            let cfg = PolicyConfig::zeroth(150.0);
            let cluster = ClusterView { capacity: 1000, active_cores: active };
            let prior = BeliefState::from_prior(&model);
            let mut other = prior.update_on_exposure(exposure, 3).unwrap();
            for _ in 0..deaths {
                other = other.update_on_core_death(0.5).unwrap();
            }
            let mut state = ClusterMomentState::default();
            let a = on_arrival(&cfg, &model, cluster, &mut state, [], &prior, size).unwrap();
            let b = on_arrival(&cfg, &model, cluster, &mut state, [DeploymentView { id: 1, belief: &other, cores: 4 }], &other, size).unwrap();
            prop_assert_eq!(a, b);
            prop_assert_eq!(a.accepted, admit_zeroth(active, size, 150.0));
        }
    }
}
