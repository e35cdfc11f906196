//! Continuous-time simulation of one cluster under an admission policy.
//!
//! Deployments arrive as a Poisson process. Each draws hidden parameters,
//! an initial size and a belief from its own random stream, then asks the
//! policy for admission. Admitted deployments issue scale-outs (granted in
//! full when they fit, otherwise denied and logged as one SLA failure), lose
//! cores one at a time and may be shut down outright. A deployment with no
//! cores left is dead for good.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::path::Path;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{init_belief, BeliefState, InfoLevel};
use crate::error::{ensure, Error, Result};
use crate::policies::{on_arrival, ClusterMomentState, ClusterView, DeploymentView, PolicyConfig, PolicyKind};
use crate::population::{
    sample_deployment_params, sample_exponential, sample_initial_size, sample_scaleout_size,
    DeploymentParams, PopulationModel, ProcessKind,
};
use crate::rng::{self, SimRng, ARRIVAL_STREAM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub capacity_c: u64,
    /// New deployments per hour.
    pub arrival_rate: f64,
    /// Simulated time in hours.
    pub horizon: f64,
    /// Maximum admissible mean fraction of denied scale-outs.
    pub sla_tau: f64,
    #[serde(default)]
    pub population: PopulationModel,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub info_level: InfoLevel,
    pub replications: u32,
    pub seed: u64,
    /// Sampling interval of the active-core trajectory, in hours.
    #[serde(default = "default_trajectory_interval")]
    pub trajectory_interval: f64,
}

fn default_trajectory_interval() -> f64 {
    24.0
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.capacity_c >= 1, || "capacity_c must be at least 1".into())?;
        ensure(self.arrival_rate >= 0.0 && self.arrival_rate.is_finite(), || {
            format!("arrival_rate must be non-negative, got {}", self.arrival_rate)
        })?;
        ensure(self.horizon > 0.0 && self.horizon.is_finite(), || {
            format!("horizon must be positive, got {}", self.horizon)
        })?;
        ensure((0.0..1.0).contains(&self.sla_tau), || format!("sla_tau must lie in [0, 1), got {}", self.sla_tau))?;
        ensure(self.replications >= 1, || "replications must be at least 1".into())?;
        ensure(self.trajectory_interval > 0.0, || "trajectory_interval must be positive".into())?;
        self.population.validate()?;
        self.policy.validate(self.capacity_c)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Seed of replication `r`.
    pub fn replication_seed(&self, r: u32) -> u64 {
        rng::mix(self.seed, r as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    CoreDeath,
    Shutdown,
    ScaleOut,
    Arrival,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::CoreDeath => "core_death",
            EventKind::Shutdown => "shutdown",
            EventKind::ScaleOut => "scaleout",
            EventKind::Arrival => "arrival",
        }
    }
}

/// A scheduled event. Core-death events carry the generation of the
/// deployment's death clock and are ignored once it has been resampled.
#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    kind: EventKind,
    id: u64,
    generation: u32,
}

impl Ord for Event {
    /// Reversed so that `BinaryHeap` pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.kind.cmp(&self.kind))
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub time: f64,
    pub deployment_id: u64,
    pub requested_cores: u64,
}

/// One line of the optional event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub kind: String,
    pub deployment_id: u64,
    pub cores: u64,
    pub active_total: u64,
    pub binding_step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub seed: u64,
    /// Time-averaged active cores over `capacity_c`.
    pub utilization: f64,
    /// Denied scale-outs over all scale-out requests.
    pub denial_rate: f64,
    pub scaleout_requests: u64,
    pub scaleout_denials: u64,
    pub deployments_accepted: u64,
    pub deployments_rejected: u64,
    pub failure_events: Vec<FailureEvent>,
    /// Active cores sampled every `trajectory_interval` hours from time 0.
    pub trajectory: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub policy: PolicyKind,
    pub threshold: f64,
    pub info_level: u32,
    pub utilization: f64,
    /// Standard error of the mean utilization, in percentage points.
    pub utilization_stderr_pp: f64,
    pub denial_rate: f64,
    pub denial_rate_stderr: f64,
    pub deployments_accepted: u64,
    pub deployments_rejected: u64,
    pub replications: Vec<ReplicationResult>,
}

struct Deployment {
    params: DeploymentParams,
    belief: BeliefState,
    cores: u64,
    alive: bool,
    rng: SimRng,
    death_generation: u32,
    /// Time up to which exposure has been folded into the belief.
    observed_until: f64,
    /// Position in the alive list.
    slot: usize,
}

struct Cluster<'a> {
    cfg: &'a SimConfig,
    now: f64,
    active: u64,
    area: f64,
    heap: BinaryHeap<Event>,
    deployments: Vec<Deployment>,
    alive: Vec<usize>,
    moments: ClusterMomentState,
    result: ReplicationResult,
    next_sample: f64,
    log: Option<&'a mut dyn FnMut(EventRecord)>,
}

impl<'a> Cluster<'a> {
    fn advance(&mut self, t: f64) {
        while self.next_sample <= t && self.next_sample <= self.cfg.horizon {
            self.result.trajectory.push(self.active);
            self.next_sample = self.result.trajectory.len() as f64 * self.cfg.trajectory_interval;
        }
        self.area += self.active as f64 * (t - self.now);
        self.now = t;
    }

    fn record(&mut self, kind: &str, id: u64, cores: u64, binding_step: Option<usize>) {
        if let Some(log) = self.log.as_mut() {
            log(EventRecord {
                time: self.now,
                kind: kind.to_string(),
                deployment_id: id,
                cores,
                active_total: self.active,
                binding_step,
            });
        }
    }

    fn push(&mut self, delay: f64, kind: EventKind, id: u64, generation: u32) {
        let time = self.now + delay;
        if time <= self.cfg.horizon {
            self.heap.push(Event { time, kind, id, generation });
        }
    }

    /// Folds censored core exposure and scale-out waiting time since the
    /// last observation into the belief.
    fn observe(&mut self, id: usize) -> Result<()> {
        let nu = self.cfg.population.nu;
        let d = &mut self.deployments[id];
        let elapsed = self.now - d.observed_until;
        if elapsed > 0.0 {
            d.belief = d.belief.update_on_exposure(elapsed, d.cores)?;
            d.belief = d.belief.update_on_scaleout_wait(elapsed, nu)?;
            d.observed_until = self.now;
        }
        Ok(())
    }

    fn schedule_core_death(&mut self, id: usize) {
        let d = &mut self.deployments[id];
        d.death_generation = d.death_generation.wrapping_add(1);
        let delay = sample_exponential(d.cores as f64 * d.params.mu, &mut d.rng);
        let generation = d.death_generation;
        self.push(delay, EventKind::CoreDeath, id as u64, generation);
    }

    fn schedule_scaleout(&mut self, id: usize) {
        let model = &self.cfg.population;
        let d = &mut self.deployments[id];
        let delay = sample_exponential(model.rate(&d.params, ProcessKind::ScaleOut), &mut d.rng);
        self.push(delay, EventKind::ScaleOut, id as u64, 0);
    }

    fn activate(&mut self, cores: u64) {
        self.active += cores;
        assert!(self.active <= self.cfg.capacity_c, "active cores exceed capacity");
    }

    fn kill(&mut self, id: usize) {
        let d = &mut self.deployments[id];
        d.alive = false;
        self.active -= d.cores;
        d.cores = 0;
        let slot = d.slot;
        self.alive.swap_remove(slot);
        if let Some(&moved) = self.alive.get(slot) {
            self.deployments[moved].slot = slot;
        }
    }

    fn arrival(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let id = self.deployments.len();
        let mut drng = rng::stream(self.result.seed, id as u64);
        let params = sample_deployment_params(&cfg.population, &mut drng);
        let size = sample_initial_size(&cfg.population, &params, &mut drng);
        let belief = init_belief(&cfg.population, cfg.info_level, &params, &mut drng);

        if cfg.policy.kind.uses_moments() {
            for i in 0..self.alive.len() {
                let a = self.alive[i];
                self.observe(a)?;
            }
        }
        let deployments = &self.deployments;
        let views = self.alive.iter().map(|&i| DeploymentView {
            id: i as u64,
            belief: &deployments[i].belief,
            cores: deployments[i].cores,
        });
        let cluster = ClusterView { capacity: cfg.capacity_c, active_cores: self.active };
        let decision =
            on_arrival(&cfg.policy, &cfg.population, cluster, &mut self.moments, views, &belief, size)?;

        self.deployments.push(Deployment {
            params,
            belief,
            cores: 0,
            alive: false,
            rng: drng,
            death_generation: 0,
            observed_until: self.now,
            slot: usize::MAX,
        });
        if !decision.accepted {
            self.result.deployments_rejected += 1;
            self.record("reject", id as u64, size, decision.binding_step);
            return Ok(());
        }
        self.result.deployments_accepted += 1;
        self.activate(size);
        {
            let d = &mut self.deployments[id];
            d.cores = size;
            d.alive = true;
            d.slot = self.alive.len();
        }
        self.alive.push(id);
        self.record("accept", id as u64, size, None);

        let d = &mut self.deployments[id];
        let shutdown = sample_exponential(cfg.population.rate(&d.params, ProcessKind::Shutdown), &mut d.rng);
        self.push(shutdown, EventKind::Shutdown, id as u64, 0);
        self.schedule_core_death(id);
        self.schedule_scaleout(id);
        Ok(())
    }

    fn scaleout(&mut self, id: usize) -> Result<()> {
        self.observe(id)?;
        let nu = self.cfg.population.nu;
        let d = &mut self.deployments[id];
        let size = sample_scaleout_size(&d.params, &mut d.rng);
        d.belief = d.belief.update_on_scaleout(size, 0.0, nu)?;
        self.result.scaleout_requests += 1;
        if self.active + size <= self.cfg.capacity_c {
            self.activate(size);
            self.deployments[id].cores += size;
            self.record("scaleout", id as u64, size, None);
            self.schedule_core_death(id);
        } else {
            self.result.scaleout_denials += 1;
            self.result.failure_events.push(FailureEvent {
                time: self.now,
                deployment_id: id as u64,
                requested_cores: size,
            });
            self.record("denied", id as u64, size, None);
        }
        self.schedule_scaleout(id);
        Ok(())
    }

    fn core_death(&mut self, id: usize) -> Result<()> {
        self.observe(id)?;
        let d = &mut self.deployments[id];
        d.belief = d.belief.update_on_core_death(0.0)?;
        d.cores -= 1;
        self.active -= 1;
        self.record("core_death", id as u64, 1, None);
        if self.deployments[id].cores == 0 {
            self.kill(id);
            self.record("died", id as u64, 0, None);
        } else {
            self.schedule_core_death(id);
        }
        Ok(())
    }

    fn run(mut self) -> Result<ReplicationResult> {
        let cfg = self.cfg;
        let mut arrivals = rng::stream(self.result.seed, ARRIVAL_STREAM);
        let first = sample_exponential(cfg.arrival_rate, &mut arrivals);
        self.push(first, EventKind::Arrival, u64::MAX, 0);
        while let Some(ev) = self.heap.pop() {
            let id = ev.id as usize;
            if ev.kind != EventKind::Arrival {
                let d = &self.deployments[id];
                if !d.alive || (ev.kind == EventKind::CoreDeath && ev.generation != d.death_generation) {
                    continue;
                }
            }
            self.advance(ev.time);
            match ev.kind {
                EventKind::Arrival => {
                    self.arrival()?;
                    let next = sample_exponential(cfg.arrival_rate, &mut arrivals);
                    self.push(next, EventKind::Arrival, u64::MAX, 0);
                }
                EventKind::ScaleOut => self.scaleout(id)?,
                EventKind::CoreDeath => self.core_death(id)?,
                EventKind::Shutdown => {
                    let cores = self.deployments[id].cores;
                    self.kill(id);
                    self.record("shutdown", id as u64, cores, None);
                }
            }
        }
        self.advance(cfg.horizon);
        let mut result = self.result;
        result.utilization = self.area / (cfg.capacity_c as f64 * cfg.horizon);
        result.denial_rate = if result.scaleout_requests == 0 {
            0.0
        } else {
            result.scaleout_denials as f64 / result.scaleout_requests as f64
        };
        Ok(result)
    }
}

fn replication<'a>(cfg: &'a SimConfig, seed: u64, log: Option<&'a mut dyn FnMut(EventRecord)>) -> Result<ReplicationResult> {
    cfg.validate()?;
    let cluster = Cluster {
        cfg,
        now: 0.0,
        active: 0,
        area: 0.0,
        heap: BinaryHeap::new(),
        deployments: Vec::new(),
        alive: Vec::new(),
        moments: ClusterMomentState::new(&cfg.policy.grid),
        result: ReplicationResult {
            seed,
            utilization: 0.0,
            denial_rate: 0.0,
            scaleout_requests: 0,
            scaleout_denials: 0,
            deployments_accepted: 0,
            deployments_rejected: 0,
            failure_events: Vec::new(),
            trajectory: Vec::new(),
        },
        next_sample: 0.0,
        log,
    };
    cluster.run()
}

/// Runs one replication with the given seed.
pub fn run_replication(cfg: &SimConfig, seed: u64) -> Result<ReplicationResult> {
    replication(cfg, seed, None)
}

/// As [`run_replication`], also streaming every event to `log`.
pub fn run_replication_logged(
    cfg: &SimConfig,
    seed: u64,
    log: &mut dyn FnMut(EventRecord),
) -> Result<ReplicationResult> {
    replication(cfg, seed, Some(log))
}

/// Writes an event log as CSV.
pub fn write_event_log<W: Write>(records: &[EventRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "kind", "deployment_id", "cores", "active_total", "binding_step"])?;
    for r in records {
        w.write_record([
            r.time.to_string(),
            r.kind.clone(),
            r.deployment_id.to_string(),
            r.cores.to_string(),
            r.active_total.to_string(),
            r.binding_step.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn mean_and_stderr(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Aggregates replication results.
pub fn aggregate(cfg: &SimConfig, replications: Vec<ReplicationResult>) -> SimResult {
    let (utilization, u_se) = mean_and_stderr(replications.iter().map(|r| r.utilization));
    let (denial_rate, d_se) = mean_and_stderr(replications.iter().map(|r| r.denial_rate));
    SimResult {
        policy: cfg.policy.kind,
        threshold: cfg.policy.threshold(),
        info_level: cfg.info_level.pseudo_observations,
        utilization,
        utilization_stderr_pp: 100.0 * u_se,
        denial_rate,
        denial_rate_stderr: d_se,
        deployments_accepted: replications.iter().map(|r| r.deployments_accepted).sum(),
        deployments_rejected: replications.iter().map(|r| r.deployments_rejected).sum(),
        replications,
    }
}

/// Runs `cfg.replications` replications on up to `threads` worker threads.
/// The result does not depend on the thread count.
pub fn run_experiment(cfg: &SimConfig, threads: usize) -> Result<SimResult> {
    cfg.validate()?;
    let run = || -> Result<Vec<ReplicationResult>> {
        (0..cfg.replications)
            .into_par_iter()
            .map(|r| run_replication(cfg, cfg.replication_seed(r)))
            .collect()
    };
    let reps = if threads <= 1 {
        (0..cfg.replications)
            .map(|r| run_replication(cfg, cfg.replication_seed(r)))
            .collect::<Result<Vec<_>>>()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run)?
    };
    Ok(aggregate(cfg, reps))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub threshold: f64,
    pub denial_rate: f64,
    pub utilization: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub policy: PolicyKind,
    pub sla_tau: f64,
    pub bounds: (f64, f64),
    pub tolerance: f64,
    pub threshold: f64,
    pub probes: Vec<Probe>,
}

/// Default search bracket and tolerance for calibrating `kind` on a cluster
/// of `capacity` cores.
pub fn default_search(kind: PolicyKind, capacity: u64) -> ((f64, f64), f64) {
    let c = capacity as f64;
    match kind {
        PolicyKind::Zeroth => ((1.0, c + 1.0), (c / 500.0).max(1.0)),
        PolicyKind::First => ((1.0, 2.0 * c), (c / 250.0).max(1.0)),
        PolicyKind::Second => ((5e-4, 0.5), 2e-3),
    }
}

/// Binary search for the largest threshold whose mean denial rate stays at
/// or below `cfg.sla_tau`. Every probe reuses the same replication seeds.
pub fn calibrate_threshold(cfg: &SimConfig, bounds: (f64, f64), tolerance: f64, threads: usize) -> Result<CalibrationReport> {
    calibrate_and_run(cfg, bounds, tolerance, threads).map(|(report, _)| report)
}

/// As [`calibrate_threshold`], also returning the experiment at the chosen
/// threshold.
pub fn calibrate_and_run(
    cfg: &SimConfig,
    bounds: (f64, f64),
    tolerance: f64,
    threads: usize,
) -> Result<(CalibrationReport, SimResult)> {
    let (mut lo, mut hi) = bounds;
    ensure(lo < hi, || format!("calibration bounds must satisfy lo < hi, got ({lo}, {hi})"))?;
    ensure(tolerance > 0.0, || "calibration tolerance must be positive".into())?;
    let mut probes = Vec::new();
    let mut best: Option<SimResult> = None;
    let mut probe = |t: f64| -> Result<bool> {
        let result = run_experiment(&SimConfig { policy: cfg.policy.with_threshold(t), ..cfg.clone() }, threads)?;
        let feasible = result.denial_rate <= cfg.sla_tau;
        debug!("probe {t}: denial {} utilization {}", result.denial_rate, result.utilization);
        probes.push(Probe { threshold: t, denial_rate: result.denial_rate, utilization: result.utilization, feasible });
        if feasible && best.as_ref().is_none_or(|b| b.threshold < t) {
            best = Some(result);
        }
        Ok(feasible)
    };
    if !probe(lo)? {
        return Err(Error::InfeasibleBracket(format!(
            "lower bound {lo} already violates the SLA {}",
            cfg.sla_tau
        )));
    }
    let threshold = if probe(hi)? {
        hi
    } else {
        while hi - lo > tolerance {
            let mid = 0.5 * (lo + hi);
            if probe(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    let report = CalibrationReport { policy: cfg.policy.kind, sla_tau: cfg.sla_tau, bounds, tolerance, threshold, probes };
    Ok((report, best.expect("the lower bound was feasible")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::LookaheadGrid;

    fn small(policy: PolicyConfig) -> SimConfig {
        SimConfig {
            capacity_c: 200,
            arrival_rate: 0.2,
            horizon: 500.0,
            sla_tau: 0.01,
            population: PopulationModel::default(),
            policy: PolicyConfig { grid: LookaheadGrid::new(vec![24.0, 168.0], 40, 1e-5).unwrap(), ..policy },
            info_level: InfoLevel::NONE,
            replications: 3,
            seed: 7,
            trajectory_interval: 0.05,
        }
    }

    #[test]
    fn no_arrivals_means_idle_cluster() {
        let cfg = SimConfig { arrival_rate: 0.0, ..small(PolicyConfig::zeroth(100.0)) };
        let r = run_replication(&cfg, 1).unwrap();
        assert_eq!(r.utilization, 0.0);
        assert_eq!(r.denial_rate, 0.0);
    }

    #[test]
    fn rejecting_everything_leaves_cluster_idle() {
        let cfg = small(PolicyConfig::zeroth(1.0));
        let r = run_replication(&cfg, 1).unwrap();
        assert_eq!(r.utilization, 0.0);
        assert_eq!(r.deployments_accepted, 0);
        assert!(r.deployments_rejected > 0);
    }

    #[test]
    fn identical_seeds_are_bitwise_identical() {
        for policy in [PolicyConfig::zeroth(150.0), PolicyConfig::first(150.0), PolicyConfig::second(0.1)] {
            let cfg = small(policy);
            let a = run_experiment(&cfg, 1).unwrap();
            let b = run_experiment(&cfg, 2).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = small(PolicyConfig::zeroth(150.0));
        let a = run_replication(&cfg, 1).unwrap();
        let b = run_replication(&cfg, 2).unwrap();
        assert_ne!(a.trajectory, b.trajectory);
    }

    #[test]
    fn single_replication_aggregate_matches() {
        let cfg = SimConfig { replications: 1, ..small(PolicyConfig::zeroth(150.0)) };
        let agg = run_experiment(&cfg, 1).unwrap();
        let rep = &agg.replications[0];
        assert_eq!(agg.utilization, rep.utilization);
        assert_eq!(agg.denial_rate, rep.denial_rate);
        assert_eq!(agg.utilization_stderr_pp, 0.0);
    }

    #[test]
    fn utilization_matches_riemann_sum() {
        let cfg = SimConfig { capacity_c: 400, arrival_rate: 0.5, ..small(PolicyConfig::zeroth(400.0)) };
        let r = run_replication(&cfg, 3).unwrap();
        let riemann = r.trajectory.iter().map(|&a| a as f64).sum::<f64>() * cfg.trajectory_interval
            / (cfg.capacity_c as f64 * cfg.horizon);
        assert!(r.utilization > 0.0);
        assert!((riemann / r.utilization - 1.0).abs() < 1e-3, "{riemann} vs {}", r.utilization);
    }

    #[test]
    fn event_log_respects_conservation_and_permanent_death() {
        let cfg = SimConfig { capacity_c: 60, ..small(PolicyConfig::first(80.0)) };
        let mut records = Vec::new();
        let r = run_replication_logged(&cfg, 5, &mut |e| records.push(e)).unwrap();
        let mut dead = std::collections::HashSet::new();
        let mut last = 0.0;
        for e in &records {
            assert!(e.time >= last);
            last = e.time;
            assert!(e.active_total <= cfg.capacity_c);
            assert!(!dead.contains(&e.deployment_id), "event after death: {e:?}");
            if e.kind == "died" || e.kind == "shutdown" {
                dead.insert(e.deployment_id);
            }
        }
        let denied = records.iter().filter(|e| e.kind == "denied").count() as u64;
        assert_eq!(denied, r.scaleout_denials);
        assert_eq!(r.failure_events.len() as u64, denied);
        let mut buf = Vec::new();
        write_event_log(&records, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), records.len() + 1);
    }

    #[test]
    fn event_order_breaks_ties_by_kind_then_id() {
        let mut heap = BinaryHeap::new();
        for (kind, id) in [(EventKind::Arrival, 0), (EventKind::ScaleOut, 2), (EventKind::CoreDeath, 5), (EventKind::Shutdown, 1), (EventKind::CoreDeath, 3)] {
            heap.push(Event { time: 1.0, kind, id, generation: 0 });
        }
        heap.push(Event { time: 0.5, kind: EventKind::Arrival, id: 9, generation: 0 });
        let order: Vec<(EventKind, u64)> = std::iter::from_fn(|| heap.pop()).map(|e| (e.kind, e.id)).collect();
        assert_eq!(
            order,
            vec![
                (EventKind::Arrival, 9),
                (EventKind::CoreDeath, 3),
                (EventKind::CoreDeath, 5),
                (EventKind::Shutdown, 1),
                (EventKind::ScaleOut, 2),
                (EventKind::Arrival, 0),
            ]
        );
    }

    #[test]
    fn calibration_without_binding_sla_returns_upper_bound() {
        let cfg = SimConfig { sla_tau: 0.999_999, replications: 1, ..small(PolicyConfig::zeroth(10.0)) };
        let (report, result) = calibrate_and_run(&cfg, (1.0, 200.0), 1.0, 1).unwrap();
        assert_eq!(report.threshold, 200.0);
        assert_eq!(result.threshold, 200.0);
    }

    #[test]
    fn calibration_stays_within_capacity_for_zeroth() {
        let cfg = SimConfig { capacity_c: 50, arrival_rate: 0.5, sla_tau: 0.0, replications: 2, ..small(PolicyConfig::zeroth(10.0)) };
        let report = calibrate_threshold(&cfg, (1.0, 50.0), 1.0, 1).unwrap();
        assert!(report.threshold <= 50.0);
        let chosen = report.probes.iter().find(|p| p.threshold == report.threshold).unwrap();
        assert!(chosen.feasible);
        assert!(report.probes.iter().filter(|p| !p.feasible).all(|p| p.threshold > report.threshold));
    }

    #[test]
    fn infeasible_bracket_is_reported() {
        let cfg = SimConfig { capacity_c: 30, arrival_rate: 2.0, sla_tau: 0.0, replications: 2, ..small(PolicyConfig::zeroth(10.0)) };
        let err = calibrate_threshold(&cfg, (30.0, 31.0), 1.0, 1).unwrap_err();
        assert!(matches!(err, Error::InfeasibleBracket(_)));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = small(PolicyConfig::second(0.1063));
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(SimConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(SimConfig::from_toml_str("capacity_c = 0").is_err());
    }
}
