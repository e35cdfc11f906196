//! Fitting a [`PopulationModel`] to a workload trace.
//!
//! The pipeline first fits every deployment on its own (censored exponential
//! core lifetimes, Poisson scale-out counts and sizes), then fits Gamma
//! priors across deployments, the exponent `ν` and the shutdown factor `Δ`.
//! Deployments that never scaled out, or never asked for an extra core, get
//! rates imputed from the probabilities `P1` and `P2`, which are themselves
//! chosen by matching the peak-size distribution of a regenerated trace.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{ensure, Error, Result};
use crate::population::{
    sample_deployment_params, sample_exponential, sample_initial_size, sample_scaleout_size, GammaParams,
    PopulationModel, ProcessKind,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEventKind {
    Deploy,
    Scaleout,
    CoreStop,
    EndOfTrace,
}

/// One row of a trace CSV. `cores` is the size for `deploy` and `scaleout`
/// and the number of cores stopping together for `core_stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub deployment_id: u64,
    pub event: TraceEventKind,
    pub time_hours: f64,
    pub cores: u64,
}

/// Reads a trace with header `deployment_id,event,time_hours,cores`.
pub fn read_trace<R: Read>(input: R) -> Result<Vec<TraceEvent>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut events = Vec::new();
    for row in reader.deserialize::<TraceEvent>() {
        let ev = row.map_err(|e| Error::TraceFormat {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        events.push(ev);
    }
    Ok(events)
}

pub fn write_trace<W: Write>(events: &[TraceEvent], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for ev in events {
        w.serialize(ev)?;
    }
    w.flush()?;
    Ok(())
}

/// How population priors are estimated from per-deployment observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// Gamma MLE over per-deployment point estimates, with `P1`/`P2`
    /// imputation, the mean-absolute-distance `ν` objective and Δ over
    /// normalised lifetimes.
    TwoStage,
    /// Gamma MLE of the marginal (Gamma–Poisson) likelihood of the
    /// per-deployment counts and exposures, `ν` by profile likelihood and Δ
    /// over the time a shutdown would have been detectable.
    #[default]
    Marginal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub p1: f64,
    pub p2: f64,
    pub trace_length: f64,
    #[serde(default)]
    pub method: FitMethod,
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.p1 > 0.0 && self.p1 < 1.0, || format!("P1 must lie in (0, 1), got {}", self.p1))?;
        ensure(self.p2 > 0.0 && self.p2 < 1.0, || format!("P2 must lie in (0, 1), got {}", self.p2))?;
        ensure(self.trace_length > 0.0, || format!("trace_length must be positive, got {}", self.trace_length))
    }
}

/// All events of one deployment, in time order, deploy first.
#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentRecord {
    pub deployment_id: u64,
    pub events: Vec<TraceEvent>,
}

impl DeploymentRecord {
    pub fn deploy_time(&self) -> f64 {
        self.events[0].time_hours
    }

    /// Maximum number of simultaneously active cores.
    pub fn peak_size(&self) -> u64 {
        let mut cores = 0u64;
        let mut peak = 0;
        for ev in &self.events {
            match ev.event {
                TraceEventKind::Deploy | TraceEventKind::Scaleout => cores += ev.cores,
                TraceEventKind::CoreStop => cores = cores.saturating_sub(ev.cores),
                TraceEventKind::EndOfTrace => {}
            }
            peak = peak.max(cores);
        }
        peak
    }
}

/// Groups a trace by deployment and returns it with the trace length, taken
/// as the latest `end_of_trace` row or `default_length` if there is none.
/// Deployments without a `deploy` row were already running when the trace
/// started and are dropped.
pub fn group_trace(events: &[TraceEvent], default_length: f64) -> Result<(Vec<DeploymentRecord>, f64)> {
    ensure_nonempty(events.len(), "trace has no events")?;
    let length = events
        .iter()
        .filter(|e| e.event == TraceEventKind::EndOfTrace)
        .map(|e| e.time_hours)
        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))))
        .unwrap_or(default_length);
    let mut by_id: BTreeMap<u64, Vec<TraceEvent>> = BTreeMap::new();
    for (row, ev) in events.iter().enumerate() {
        if !(0.0..=length).contains(&ev.time_hours) {
            return Err(Error::TraceFormat {
                line: row + 2,
                message: format!("time {} outside [0, {length}]", ev.time_hours),
            });
        }
        if ev.event != TraceEventKind::EndOfTrace {
            by_id.entry(ev.deployment_id).or_default().push(*ev);
        }
    }
    let mut records = Vec::with_capacity(by_id.len());
    let mut pre_existing = 0;
    for (_, mut evs) in by_id {
        evs.sort_by(|a, b| {
            a.time_hours
                .total_cmp(&b.time_hours)
                .then_with(|| (b.event == TraceEventKind::Deploy).cmp(&(a.event == TraceEventKind::Deploy)))
        });
        if evs[0].event != TraceEventKind::Deploy {
            pre_existing += 1;
            continue;
        }
        records.push(DeploymentRecord { deployment_id: evs[0].deployment_id, events: evs });
    }
    if pre_existing > 0 {
        warn!("dropped {pre_existing} deployments that started before the trace");
    }
    ensure_nonempty(records.len(), "trace has no deployment with a deploy event")?;
    Ok((records, length))
}

fn ensure_nonempty(len: usize, what: &str) -> Result<()> {
    if len == 0 {
        Err(Error::EmptyInput(what.into()))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeploymentFit {
    pub deployment_id: u64,
    pub scaleout_rate: f64,
    pub mean_extra_size: f64,
    pub core_death_rate: f64,
    /// Hours from deploy until death or the end of the trace.
    pub observed_hours: f64,
    pub died: bool,
    pub shutdown: bool,
    pub scaleout_imputed: bool,
    pub size_imputed: bool,
    /// No core stopped on its own, so the death rate is imputed from `P1`.
    pub death_imputed: bool,
    pub deaths: u64,
    /// Core-hours observed, censored lifetimes included.
    pub exposure: f64,
    pub scaleouts: u64,
    /// Deploy plus scale-out requests seen.
    pub size_observations: u64,
    pub extra_cores: u64,
    /// Hours spent with at least three cores, when a shutdown is detectable.
    pub detectable_hours: f64,
}

/// Fits one deployment. A `core_stop` of at least three cores that empties
/// the deployment is read as a shutdown; its cores count as censored.
pub fn fit_deployment(events: &[TraceEvent], cfg: &FitConfig) -> Result<DeploymentFit> {
    ensure_nonempty(events.len(), "deployment has no events")?;
    let first = &events[0];
    if first.event != TraceEventKind::Deploy {
        return Err(Error::TraceFormat { line: 0, message: format!("deployment {} lacks a deploy event", first.deployment_id) });
    }
    let id = first.deployment_id;
    let start = first.time_hours;
    let mut cores = 0u64;
    let mut last = start;
    let mut exposure = 0.0;
    let mut deaths = 0u64;
    let mut scaleouts = 0u64;
    let mut sizes = 0u64;
    let mut extra = 0u64;
    let mut end = None;
    let mut shutdown = false;
    let mut detectable = 0.0;
    for (i, ev) in events.iter().enumerate() {
        if ev.event == TraceEventKind::EndOfTrace {
            continue;
        }
        if end.is_some() {
            return Err(Error::TraceFormat { line: 0, message: format!("deployment {id} has events after dying") });
        }
        if i > 0 && ev.event == TraceEventKind::Deploy {
            return Err(Error::TraceFormat { line: 0, message: format!("deployment {id} is deployed twice") });
        }
        if ev.time_hours < last {
            return Err(Error::NegativeDuration(ev.time_hours - last));
        }
        exposure += cores as f64 * (ev.time_hours - last);
        if cores >= 3 {
            detectable += ev.time_hours - last;
        }
        last = ev.time_hours;
        match ev.event {
            TraceEventKind::Deploy | TraceEventKind::Scaleout => {
                if ev.cores == 0 {
                    return Err(Error::EmptyScaleOut(id));
                }
                cores += ev.cores;
                sizes += 1;
                extra += ev.cores - 1;
                if ev.event == TraceEventKind::Scaleout {
                    scaleouts += 1;
                }
            }
            TraceEventKind::CoreStop => {
                if ev.cores > cores {
                    return Err(Error::TraceFormat {
                        line: 0,
                        message: format!("deployment {id} stops {} of {cores} cores", ev.cores),
                    });
                }
                if ev.cores == cores && cores >= 3 {
                    shutdown = true;
                } else {
                    deaths += ev.cores;
                }
                cores -= ev.cores;
                if cores == 0 {
                    end = Some(ev.time_hours);
                }
            }
            TraceEventKind::EndOfTrace => unreachable!(),
        }
    }
    let end_time = end.unwrap_or(cfg.trace_length.max(last));
    exposure += cores as f64 * (end_time - last);
    if cores >= 3 {
        detectable += end_time - last;
    }
    let observed = end_time - start;
    if observed <= 0.0 || exposure <= 0.0 {
        return Err(Error::DegenerateSample(format!("deployment {id} has no observed time")));
    }
    let zero_rate = |p: f64, time: f64| -p.ln() / time;
    let (scaleout_rate, scaleout_imputed) = if scaleouts > 0 {
        (scaleouts as f64 / observed, false)
    } else {
        (zero_rate(cfg.p1, observed), true)
    };
    let (mean_extra_size, size_imputed) = if extra > 0 {
        (extra as f64 / sizes as f64, false)
    } else {
        (zero_rate(cfg.p2, sizes as f64), true)
    };
    let (core_death_rate, death_imputed) = if deaths > 0 {
        (deaths as f64 / exposure, false)
    } else {
        (zero_rate(cfg.p1, exposure), true)
    };
    Ok(DeploymentFit {
        deployment_id: id,
        scaleout_rate,
        mean_extra_size,
        core_death_rate,
        observed_hours: observed,
        died: end.is_some(),
        shutdown,
        scaleout_imputed,
        size_imputed,
        death_imputed,
        deaths,
        exposure,
        scaleouts,
        size_observations: sizes,
        extra_cores: extra,
        detectable_hours: detectable,
    })
}

/// `ψ'(x)` by upward recurrence and the asymptotic series.
fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv + 0.5 * inv2 + inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 / 30.0)))
}

/// Maximum-likelihood Gamma fit: Newton iteration on
/// `ln k − ψ(k) = ln x̄ − mean(ln x)` started from the method of moments.
pub fn fit_gamma(samples: &[f64]) -> Result<GammaParams> {
    ensure(samples.len() >= 2, || format!("need at least two samples, got {}", samples.len()))?;
    ensure(samples.iter().all(|&x| x > 0.0 && x.is_finite()), || "Gamma samples must be positive".into())?;
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let s = mean.ln() - samples.iter().map(|x| x.ln()).sum::<f64>() / n;
    if var <= 0.0 || s <= 1e-14 {
        return Err(Error::DegenerateSample(format!("all {} samples are equal", samples.len())));
    }
    let mut k = mean * mean / var;
    for _ in 0..200 {
        let f = k.ln() - digamma(k) - s;
        let step = f / (1.0 / k - trigamma(k));
        let mut next = k - step;
        while next <= 0.0 {
            next = 0.5 * (k + next.max(0.0));
        }
        let done = (next - k).abs() <= 1e-10 * k;
        k = next;
        if done {
            break;
        }
    }
    GammaParams::new(k, k / mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationPriors {
    pub lambda_prior: GammaParams,
    pub sigma_prior: GammaParams,
    pub mu_prior: GammaParams,
}

/// Gamma priors across deployments. Lifetime and normalised scale-out
/// priors use only deployments with at least one observed core death.
pub fn fit_population(fits: &[DeploymentFit], nu: f64) -> Result<PopulationPriors> {
    ensure(fits.len() >= 2, || format!("need at least two deployment fits, got {}", fits.len()))?;
    let observed: Vec<&DeploymentFit> = fits.iter().filter(|f| !f.death_imputed).collect();
    let mus: Vec<f64> = observed.iter().map(|f| f.core_death_rate).collect();
    let lambdas: Vec<f64> = observed.iter().map(|f| f.scaleout_rate * f.core_death_rate.powf(-nu)).collect();
    let sigmas: Vec<f64> = fits.iter().map(|f| f.mean_extra_size).collect();
    Ok(PopulationPriors {
        lambda_prior: fit_gamma(&lambdas)?,
        sigma_prior: fit_gamma(&sigmas)?,
        mu_prior: fit_gamma(&mus)?,
    })
}

fn golden_section(lo: f64, hi: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Mean absolute distance between each normalised scale-out rate
/// `rate·μ^{−ν}` and their average.
pub fn nu_objective(fits: &[DeploymentFit], nu: f64) -> f64 {
    let norm: Vec<f64> = fits.iter().map(|f| f.scaleout_rate * f.core_death_rate.powf(-nu)).collect();
    let n = norm.len() as f64;
    let mean = norm.iter().sum::<f64>() / n;
    norm.iter().map(|x| (x - mean).abs()).sum::<f64>() / n
}

/// Minimises [`nu_objective`] over `[lo, hi]` using deployments whose rates
/// were all observed rather than imputed.
pub fn fit_nu(fits: &[DeploymentFit], bounds: (f64, f64)) -> f64 {
    let usable: Vec<DeploymentFit> =
        fits.iter().copied().filter(|f| !f.scaleout_imputed && !f.death_imputed).collect();
    if usable.len() < 2 {
        warn!("fewer than two deployments with observed rates; returning the interval midpoint for nu");
        return 0.5 * (bounds.0 + bounds.1);
    }
    golden_section(bounds.0, bounds.1, 1e-6, |nu| nu_objective(&usable, nu))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaFit {
    pub delta: f64,
    pub shutdowns: usize,
    /// No shutdown was observed, so zero is only a lower bound.
    pub lower_bound_only: bool,
}

/// Censored exponential MLE over deployment lifetimes measured in mean core
/// lifetimes; deployments not shut down are censored.
pub fn fit_delta(normalized_lifetimes: &[f64], shutdown: &[bool]) -> Result<DeltaFit> {
    if normalized_lifetimes.len() != shutdown.len() {
        return Err(Error::InvalidParameter("lifetimes and shutdown flags differ in length".into()));
    }
    ensure_nonempty(normalized_lifetimes.len(), "no deployment lifetimes")?;
    let shutdowns = shutdown.iter().filter(|&&s| s).count();
    let exposure: f64 = normalized_lifetimes.iter().sum();
    if shutdowns == 0 {
        warn!("no shutdowns observed; delta reported as zero");
        return Ok(DeltaFit { delta: 0.0, shutdowns, lower_bound_only: true });
    }
    Ok(DeltaFit { delta: shutdowns as f64 / exposure, shutdowns, lower_bound_only: false })
}

/// Discrete Cramér–von Mises distance `Σ_x (F(x) − G(x))² h(x)` between the
/// empirical CDFs of two samples, with `h` the pooled empirical mass.
pub fn cvm_distance(a: &[u64], b: &[u64]) -> Result<f64> {
    ensure_nonempty(a.len().min(b.len()), "Cramér–von Mises needs two non-empty samples")?;
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let total = na + nb;
    let (mut i, mut j) = (0, 0);
    let mut dist = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        let start = i + j;
        while a.get(i) == Some(&x) {
            i += 1;
        }
        while b.get(j) == Some(&x) {
            j += 1;
        }
        let mass = (i + j - start) as f64 / total;
        dist += (i as f64 / na - j as f64 / nb).powi(2) * mass;
    }
    Ok(dist)
}

/// Simulates one deployment in isolation from `arrival` until it dies or
/// the trace ends, appending its events.
fn simulate_deployment<R: Rng>(
    model: &PopulationModel,
    id: u64,
    arrival: f64,
    trace_length: f64,
    rng: &mut R,
    out: &mut Vec<TraceEvent>,
) {
    let params = sample_deployment_params(model, rng);
    let mut cores = sample_initial_size(model, &params, rng);
    out.push(TraceEvent { deployment_id: id, event: TraceEventKind::Deploy, time_hours: arrival, cores });
    let shutdown_at = arrival + sample_exponential(model.rate(&params, ProcessKind::Shutdown), rng);
    let scaleout_rate = model.rate(&params, ProcessKind::ScaleOut);
    let mut t = arrival;
    loop {
        let death = t + sample_exponential(cores as f64 * params.mu, rng);
        let scaleout = t + sample_exponential(scaleout_rate, rng);
        let next = death.min(scaleout).min(shutdown_at);
        if next >= trace_length {
            return;
        }
        t = next;
        if next == shutdown_at {
            out.push(TraceEvent { deployment_id: id, event: TraceEventKind::CoreStop, time_hours: t, cores });
            return;
        }
        if next == death {
            cores -= 1;
            out.push(TraceEvent { deployment_id: id, event: TraceEventKind::CoreStop, time_hours: t, cores: 1 });
            if cores == 0 {
                return;
            }
        } else {
            let size = sample_scaleout_size(&params, rng);
            cores += size;
            out.push(TraceEvent { deployment_id: id, event: TraceEventKind::Scaleout, time_hours: t, cores: size });
        }
    }
}

/// Synthetic trace with deployments arriving at the given times, each
/// observed until death or `trace_length`. Rows are in time order and end
/// with an `end_of_trace` marker.
pub fn generate_trace_with_arrivals(
    model: &PopulationModel,
    arrivals: &[f64],
    trace_length: f64,
    seed: u64,
) -> Vec<TraceEvent> {
    let mut events = Vec::new();
    for (id, &arrival) in arrivals.iter().enumerate() {
        let mut r = rng::stream(seed, id as u64);
        simulate_deployment(model, id as u64, arrival, trace_length, &mut r, &mut events);
    }
    events.sort_by(|a, b| a.time_hours.total_cmp(&b.time_hours));
    events.push(TraceEvent {
        deployment_id: 0,
        event: TraceEventKind::EndOfTrace,
        time_hours: trace_length,
        cores: 0,
    });
    events
}

/// Synthetic trace of `deployments` uniform arrivals over `[0, trace_length)`.
pub fn generate_trace(model: &PopulationModel, deployments: usize, trace_length: f64, seed: u64) -> Vec<TraceEvent> {
    let mut r = rng::stream(seed, rng::ARRIVAL_STREAM);
    let mut arrivals: Vec<f64> = (0..deployments).map(|_| r.random::<f64>() * trace_length).collect();
    arrivals.sort_by(f64::total_cmp);
    generate_trace_with_arrivals(model, &arrivals, trace_length, seed)
}


/// Marginal log-likelihood `Σ ln Γ(a+x) − ln Γ(a) + x ln E + a ln b − (a+x) ln(b+E)`
/// of counts `x` over exposures `E` under a `Gamma(a, b)` rate prior, up to `−Σ ln x!`.
pub fn gamma_poisson_loglik(a: f64, b: f64, data: &[(f64, f64)]) -> f64 {
    let lg_a = ln_gamma(a);
    data.iter()
        .map(|&(x, e)| {
            let lg = if x == 0.0 { 0.0 } else { ln_gamma(a + x) - lg_a + x * e.ln() };
            lg + a * b.ln() - (a + x) * (b + e).ln()
        })
        .sum()
}

/// Rate maximising the marginal likelihood for a fixed shape: the unique
/// root of `n·a/b = Σ (a+x)/(b+E)`.
fn profile_rate(a: f64, data: &[(f64, f64)]) -> f64 {
    let n = data.len() as f64;
    let excess = |b: f64| n * a - data.iter().map(|&(x, e)| (a + x) * b / (b + e)).sum::<f64>();
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if excess(mid.exp()) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Maximum marginal-likelihood Gamma prior for Poisson counts `x` observed
/// over exposures `E`, returned with the attained log-likelihood.
pub fn fit_gamma_poisson(data: &[(f64, f64)]) -> Result<(GammaParams, f64)> {
    ensure(data.len() >= 2, || format!("need at least two observations, got {}", data.len()))?;
    ensure(data.iter().all(|&(x, e)| x >= 0.0 && e > 0.0), || "counts must be non-negative and exposures positive".into())?;
    if data.iter().all(|&(x, _)| x == 0.0) {
        return Err(Error::DegenerateSample("no events observed".into()));
    }
    let objective = |ln_a: f64| {
        let a = ln_a.exp();
        -gamma_poisson_loglik(a, profile_rate(a, data), data)
    };
    let a = golden_section(-9.0, 9.0, 1e-7, objective).exp();
    let b = profile_rate(a, data);
    Ok((GammaParams::new(a, b)?, gamma_poisson_loglik(a, b, data)))
}

/// `E[μ^p]` under a `Gamma(a, b)` posterior.
fn posterior_power_mean(a: f64, b: f64, p: f64) -> f64 {
    (ln_gamma(a + p) - ln_gamma(a) - p * b.ln()).exp()
}

fn marginal_priors(fits: &[DeploymentFit], nu_bounds: (f64, f64)) -> Result<(PopulationPriors, f64, DeltaFit)> {
    ensure(fits.len() >= 2, || format!("need at least two deployment fits, got {}", fits.len()))?;
    let deaths: Vec<(f64, f64)> = fits.iter().map(|f| (f.deaths as f64, f.exposure)).collect();
    let (mu_prior, _) = fit_gamma_poisson(&deaths)?;
    let sizes: Vec<(f64, f64)> = fits.iter().map(|f| (f.extra_cores as f64, f.size_observations as f64)).collect();
    let (sigma_prior, _) = fit_gamma_poisson(&sizes)?;
    let posterior = |f: &DeploymentFit| (mu_prior.shape + f.deaths as f64, mu_prior.rate + f.exposure);
    let lambda_data = |nu: f64| -> Vec<(f64, f64)> {
        fits.iter()
            .map(|f| {
                let (a, b) = posterior(f);
                (f.scaleouts as f64, f.observed_hours * posterior_power_mean(a, b, nu))
            })
            .collect()
    };
    let lo = nu_bounds.0.max(1e-3 - mu_prior.shape);
    let nu = golden_section(lo, nu_bounds.1, 1e-4, |nu| {
        fit_gamma_poisson(&lambda_data(nu)).map_or(f64::INFINITY, |(_, ll)| -ll)
    });
    let (lambda_prior, _) = fit_gamma_poisson(&lambda_data(nu))?;
    let shutdowns = fits.iter().filter(|f| f.shutdown).count();
    let exposure: f64 = fits
        .iter()
        .map(|f| {
            let (a, b) = posterior(f);
            f.detectable_hours * a / b
        })
        .sum();
    let delta = if shutdowns == 0 || exposure <= 0.0 {
        warn!("no detectable shutdowns; delta reported as zero");
        DeltaFit { delta: 0.0, shutdowns, lower_bound_only: true }
    } else {
        DeltaFit { delta: shutdowns as f64 / exposure, shutdowns, lower_bound_only: false }
    };
    Ok((PopulationPriors { lambda_prior, sigma_prior, mu_prior }, nu, delta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: PopulationModel,
    pub method: FitMethod,
    pub p1: f64,
    pub p2: f64,
    pub trace_length: f64,
    pub deployments: usize,
    pub skipped: usize,
    pub deaths_observed: usize,
    pub scaleout_imputed: usize,
    pub size_imputed: usize,
    pub shutdowns: usize,
    pub delta_lower_bound_only: bool,
    /// Peak-size distance between the trace and a regeneration from the fit.
    pub cvm_distance: Option<f64>,
}

/// Fits every deployment, then `ν`, the priors and `Δ`.
pub fn fit_records(records: &[DeploymentRecord], cfg: &FitConfig) -> Result<FitReport> {
    cfg.validate()?;
    let mut fits = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for rec in records {
        match fit_deployment(&rec.events, cfg) {
            Ok(fit) => fits.push(fit),
            Err(Error::DegenerateSample(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let observed: Vec<&DeploymentFit> = fits.iter().filter(|f| !f.death_imputed).collect();
    let (priors, nu, delta) = match cfg.method {
        FitMethod::TwoStage => {
            let nu = fit_nu(&fits, (-2.0, 2.0));
            let priors = fit_population(&fits, nu)?;
            let lifetimes: Vec<f64> = observed.iter().map(|f| f.observed_hours * f.core_death_rate).collect();
            let flags: Vec<bool> = observed.iter().map(|f| f.shutdown).collect();
            (priors, nu, fit_delta(&lifetimes, &flags)?)
        }
        FitMethod::Marginal => marginal_priors(&fits, (-2.0, 2.0))?,
    };
    let model = PopulationModel {
        lambda_prior: priors.lambda_prior,
        sigma_prior: priors.sigma_prior,
        mu_prior: priors.mu_prior,
        delta: delta.delta,
        nu,
        initial_size: Default::default(),
    };
    Ok(FitReport {
        model,
        method: cfg.method,
        p1: cfg.p1,
        p2: cfg.p2,
        trace_length: cfg.trace_length,
        deployments: fits.len(),
        skipped,
        deaths_observed: observed.len(),
        scaleout_imputed: fits.iter().filter(|f| f.scaleout_imputed).count(),
        size_imputed: fits.iter().filter(|f| f.size_imputed).count(),
        shutdowns: delta.shutdowns,
        delta_lower_bound_only: delta.lower_bound_only,
        cvm_distance: None,
    })
}

/// Peak-size distance between `records` and a trace regenerated from
/// `model` with the same arrival times and trace length.
pub fn regenerated_distance(records: &[DeploymentRecord], trace_length: f64, model: &PopulationModel, seed: u64) -> Result<f64> {
    let arrivals: Vec<f64> = records.iter().map(DeploymentRecord::deploy_time).collect();
    let synthetic = generate_trace_with_arrivals(model, &arrivals, trace_length, seed);
    let (regen, _) = group_trace(&synthetic, trace_length)?;
    let empirical: Vec<u64> = records.iter().map(DeploymentRecord::peak_size).collect();
    let fitted: Vec<u64> = regen.iter().map(DeploymentRecord::peak_size).collect();
    cvm_distance(&empirical, &fitted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P1P2Candidate {
    pub p1: f64,
    pub p2: f64,
    pub distance: f64,
}

/// Grid search for the `(P1, P2)` pair whose fitted model regenerates the
/// closest peak-size distribution. Returns the best report and all candidates.
pub fn calibrate_p1_p2(
    records: &[DeploymentRecord],
    base: &FitConfig,
    grid: &[f64],
    seed: u64,
) -> Result<(FitReport, Vec<P1P2Candidate>)> {
    ensure_nonempty(grid.len(), "P1/P2 grid is empty")?;
    let mut best: Option<FitReport> = None;
    let mut candidates = Vec::new();
    for &p1 in grid {
        for &p2 in grid {
            let mut report = fit_records(records, &FitConfig { p1, p2, ..*base })?;
            let distance = regenerated_distance(records, base.trace_length, &report.model, seed)?;
            report.cvm_distance = Some(distance);
            candidates.push(P1P2Candidate { p1, p2, distance });
            if best.as_ref().and_then(|b| b.cvm_distance).is_none_or(|d| distance < d) {
                best = Some(report);
            }
        }
    }
    Ok((best.expect("non-empty grid"), candidates))
}
