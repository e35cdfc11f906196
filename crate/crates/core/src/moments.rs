//! Approximate first and second moments of a deployment's future size.
//!
//! The future size at look-ahead step `n` is `L_n = Ω_n · D_n · (Q_n + B_n)`:
//! `B_n` counts surviving cores that are active now, `Q_n` counts surviving
//! cores from future scale-outs, `D_n` indicates that the deployment has not
//! run out of cores and `Ω_n` that it has not been shut down. The factors are
//! treated as independent; their moments come from Gamma-prior closed forms
//! where the core lifetime rate `M ~ Gamma(𝔞, 𝔟)` turns exponential survival
//! into Lomax survival `(1 + t/𝔟)^(-𝔞)`.
//!
//! Step indices are converted to hours with the grid's step width before any
//! formula is applied. [`moment_profile`] evaluates each horizon in time
//! linear in the number of steps.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::belief::BeliefState;
use crate::error::{ensure, Error, Result};
use crate::fastmath;
use crate::population::{GammaParams, PopulationModel};

pub const HOURS_PER_DAY: f64 = 24.0;
pub const HOURS_PER_WEEK: f64 = 168.0;
pub const HOURS_PER_MONTH: f64 = 730.0;
pub const HOURS_PER_YEAR: f64 = 8760.0;

/// Look-ahead discretisation: several horizons, each split into the same
/// number of equal steps and evaluated independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LookaheadGrid {
    /// Horizon lengths in hours, strictly increasing.
    pub horizons: Vec<f64>,
    pub steps_per_horizon: usize,
    /// Values below this are treated as zero once both moments fall under it.
    pub marginality_epsilon: f64,
}

impl Default for LookaheadGrid {
    fn default() -> Self {
        Self {
            horizons: vec![
                HOURS_PER_DAY,
                HOURS_PER_WEEK,
                HOURS_PER_MONTH,
                HOURS_PER_YEAR,
                3.0 * HOURS_PER_YEAR,
            ],
            steps_per_horizon: 600,
            marginality_epsilon: 1e-5,
        }
    }
}

impl LookaheadGrid {
    pub fn new(horizons: Vec<f64>, steps_per_horizon: usize, marginality_epsilon: f64) -> Result<Self> {
        let grid = Self { horizons, steps_per_horizon, marginality_epsilon };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.horizons.is_empty(), || "grid needs at least one horizon".into())?;
        ensure(self.horizons.iter().all(|h| h.is_finite() && *h > 0.0), || {
            "grid horizons must be positive".into()
        })?;
        ensure(self.horizons.windows(2).all(|w| w[0] < w[1]), || {
            "grid horizons must be strictly increasing".into()
        })?;
        ensure(self.steps_per_horizon >= 1, || "steps_per_horizon must be at least 1".into())?;
        ensure(self.marginality_epsilon > 0.0, || "marginality_epsilon must be positive".into())
    }

    /// Entries per horizon block, step 0 included.
    pub fn block_len(&self) -> usize {
        self.steps_per_horizon + 1
    }

    /// Total number of profile entries across all horizons.
    pub fn len(&self) -> usize {
        self.horizons.len() * self.block_len()
    }

    pub fn is_empty(&self) -> bool {
        self.horizons.is_empty()
    }

    pub fn step_hours(&self, horizon: usize) -> f64 {
        self.horizons[horizon] / self.steps_per_horizon as f64
    }

    /// `(horizon index, step)` of a flat profile index.
    pub fn locate(&self, index: usize) -> (usize, usize) {
        (index / self.block_len(), index % self.block_len())
    }

    /// Hours ahead of now represented by a flat profile index.
    pub fn hours_at(&self, index: usize) -> f64 {
        let (h, n) = self.locate(index);
        n as f64 * self.step_hours(h)
    }
}

/// Moments of one deployment's future size over a look-ahead grid, laid out
/// as consecutive horizon blocks of `steps_per_horizon + 1` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentProfile {
    pub e_l: Vec<f64>,
    pub v_l: Vec<f64>,
    /// Per horizon, the first step at which both moments dropped below the
    /// marginality threshold; that step and all later ones are stored as zero.
    pub truncated_at: Vec<Option<usize>>,
}

impl MomentProfile {
    pub fn zeros(grid: &LookaheadGrid) -> Self {
        Self {
            e_l: vec![0.0; grid.len()],
            v_l: vec![0.0; grid.len()],
            truncated_at: vec![None; grid.horizons.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.e_l.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e_l.is_empty()
    }

    /// Writes `horizon_hours,step,hours,e_L,v_L` rows.
    pub fn write_csv<W: Write>(&self, grid: &LookaheadGrid, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["horizon_hours", "step", "hours", "e_L", "v_L"])?;
        for (i, (e, v)) in self.e_l.iter().zip(&self.v_l).enumerate() {
            let (h, n) = grid.locate(i);
            w.write_record([
                grid.horizons[h].to_string(),
                n.to_string(),
                grid.hours_at(i).to_string(),
                e.to_string(),
                v.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_order(n: usize, i: usize) -> Result<()> {
    if n < i {
        Err(Error::StepOrder { n, i })
    } else {
        Ok(())
    }
}

/// Lomax survival `(1 + t/𝔟)^(-𝔞)`: probability that a core with
/// `M ~ mu` is still alive after `t` hours.
pub fn lomax_survival(mu: &GammaParams, t: f64) -> f64 {
    (-mu.shape * (t / mu.rate).ln_1p()).exp()
}

/// `E[Z_{n,i,1}]`: a core activated at step `i` is alive at step `n`.
pub fn e_z(mu: &GammaParams, n: usize, i: usize, step_hours: f64) -> Result<f64> {
    check_order(n, i)?;
    Ok(lomax_survival(mu, (n - i) as f64 * step_hours))
}

/// `V[Z_{n,i,1}] = E[Z](1 - E[Z])`.
pub fn v_z(mu: &GammaParams, n: usize, i: usize, step_hours: f64) -> Result<f64> {
    let e = e_z(mu, n, i, step_hours)?;
    Ok(e * (1.0 - e))
}

/// `E[Ω_n]`: the deployment has not been shut down by step `n`.
pub fn e_omega(mu: &GammaParams, delta: f64, n: usize, step_hours: f64) -> f64 {
    lomax_survival(mu, delta * n as f64 * step_hours)
}

pub fn v_omega(mu: &GammaParams, delta: f64, n: usize, step_hours: f64) -> f64 {
    let e = e_omega(mu, delta, n, step_hours);
    e * (1.0 - e)
}

/// `E[M^p]` relative to `𝔟^{-p}`: `Γ(𝔞+p)/Γ(𝔞)`.
fn gamma_ratio(shape: f64, power: f64) -> Result<f64> {
    if shape + power <= 0.0 {
        return Err(Error::DivergentMoment(format!(
            "E[M^{power}] diverges for posterior shape {shape}"
        )));
    }
    Ok((ln_gamma(shape + power) - ln_gamma(shape)).exp())
}

/// `E[M^p · exp(-t·M)] = Γ(𝔞+p)/Γ(𝔞) · 𝔟^𝔞 / (𝔟+t)^(𝔞+p)`.
pub fn e_mu_pow_exp(mu: &GammaParams, power: f64, t: f64) -> Result<f64> {
    let ratio = gamma_ratio(mu.shape, power)?;
    let log = -power * mu.rate.ln() - (mu.shape + power) * (t / mu.rate).ln_1p();
    Ok(ratio * log.exp())
}

/// Posterior moments that do not depend on the step.
#[derive(Debug, Clone, Copy)]
struct Coefficients {
    e_lambda: f64,
    /// `E[σ + 1]`, mean scale-out size.
    e_size: f64,
    /// `E[(σ + 1)^2]`.
    e_size_sq: f64,
    e_sigma: f64,
    /// `V[λ(σ + 1)]`.
    v_lambda_size: f64,
    /// `E[M^ν]` and `E[M^{2ν}]`.
    k1: f64,
    k2: f64,
}

impl Coefficients {
    fn new(b: &BeliefState, nu: f64) -> Result<Self> {
        let (a, bb) = (b.lambda_post.shape, b.lambda_post.rate);
        let (al, be) = (b.sigma_post.shape, b.sigma_post.rate);
        let mu = &b.mu_post;
        let e_lambda = a / bb;
        let v_lambda = a / (bb * bb);
        let e_sigma = al / be;
        let v_sigma = al / (be * be);
        let e_size = (al + be) / be;
        let v_lambda_size =
            e_lambda * e_lambda * v_sigma + v_lambda * e_size * e_size + v_lambda * v_sigma;
        Ok(Self {
            e_lambda,
            e_size,
            e_size_sq: v_sigma + e_size * e_size,
            e_sigma,
            v_lambda_size,
            k1: gamma_ratio(mu.shape, nu)? * (-nu * mu.rate.ln()).exp(),
            k2: gamma_ratio(mu.shape, 2.0 * nu)? * (-2.0 * nu * mu.rate.ln()).exp(),
        })
    }

    /// `E[Y_1]E[S_{1,1}]` per step, the expected number of new cores used
    /// as exponent in the survival recursion.
    fn new_cores_exponent(&self, step_hours: f64) -> f64 {
        step_hours * self.e_lambda * self.k1 * self.e_sigma
    }

    fn e_q(&self, h: f64, s1: f64) -> f64 {
        h * self.e_lambda * self.e_size * s1
    }

    /// `s1 = Σ_k E[M^ν e^{-khM}]`, `s1d = Σ_k E[M^ν e^{-2khM}]`,
    /// `d = Σ_{k,m} E[M^{2ν} e^{-(k+m)hM}]`.
    fn v_q(&self, h: f64, s1: f64, s1d: f64, d: f64) -> f64 {
        let within = h * self.e_lambda * (self.e_size * s1 + (self.e_size_sq - 1.0) * s1d);
        let var_w = (d - s1 * s1).max(0.0);
        let e_x = self.e_lambda * self.e_size;
        let e_x2 = e_x * e_x + self.v_lambda_size;
        let between = h * h * (e_x2 * var_w + self.v_lambda_size * s1 * s1);
        within + between
    }
}

/// `E[Q_n]`, expected surviving cores from scale-outs in steps `1..n`.
pub fn e_q(b: &BeliefState, nu: f64, n: usize, step_hours: f64) -> Result<f64> {
    let c = Coefficients::new(b, nu)?;
    let mut s1 = 0.0;
    for k in 1..n {
        s1 += e_mu_pow_exp(&b.mu_post, nu, k as f64 * step_hours)?;
    }
    Ok(c.e_q(step_hours, s1))
}

/// `V[Q_n]` by the law of total variance over `(λ, σ, M)`. The double sum is
/// evaluated directly, so this costs `O(n^2)`.
pub fn v_q(b: &BeliefState, nu: f64, n: usize, step_hours: f64) -> Result<f64> {
    let c = Coefficients::new(b, nu)?;
    let mu = &b.mu_post;
    let (mut s1, mut s1d, mut d) = (0.0, 0.0, 0.0);
    for k in 1..n {
        let t = k as f64 * step_hours;
        s1 += e_mu_pow_exp(mu, nu, t)?;
        s1d += e_mu_pow_exp(mu, nu, 2.0 * t)?;
        for m in 1..n {
            d += e_mu_pow_exp(mu, 2.0 * nu, (k + m) as f64 * step_hours)?;
        }
    }
    Ok(c.v_q(step_hours, s1, s1d, d))
}

/// `E[B_n] = C·E[Z_{n,0,1}]`.
pub fn e_b(b: &BeliefState, cores: u64, n: usize, step_hours: f64) -> f64 {
    cores as f64 * lomax_survival(&b.mu_post, n as f64 * step_hours)
}

/// `V[B_n] = C·V[Z_{n,0,1}]`.
pub fn v_b(b: &BeliefState, cores: u64, n: usize, step_hours: f64) -> f64 {
    let z = lomax_survival(&b.mu_post, n as f64 * step_hours);
    cores as f64 * z * (1.0 - z)
}

/// `ln(1 - (1 + t/𝔟)^(-𝔞))` without cancellation near `t = 0`.
fn ln_death_prob(mu: &GammaParams, t: f64) -> f64 {
    (-(-mu.shape * (t / mu.rate).ln_1p()).exp_m1()).ln()
}

/// `E[D_n]` from the forward survival recursion
/// `E[D_i] = E[D_{i-1}] (1 - (1 - E[Z_{i,0}])^C Π_{j<i} (1 - E[Z_{i,j}])^m)`.
pub fn e_d(b: &BeliefState, cores: u64, nu: f64, n: usize, step_hours: f64) -> Result<f64> {
    if cores == 0 {
        return Err(Error::DeadOnArrival);
    }
    let m = Coefficients::new(b, nu)?.new_cores_exponent(step_hours);
    let mu = &b.mu_post;
    let mut e_d = 1.0;
    let mut log_sum = 0.0;
    for i in 1..=n {
        let all_dead = cores as f64 * ln_death_prob(mu, i as f64 * step_hours) + m * log_sum;
        e_d *= 1.0 - all_dead.exp();
        log_sum += ln_death_prob(mu, i as f64 * step_hours);
    }
    Ok(e_d)
}

/// Combines component moments into `(E[L_n], V[L_n])` treating `Ω`, `D`,
/// `Q` and `B` as independent, with `V[D] = E[D](1 - E[D])`.
pub fn combine(
    e_omega: f64,
    e_d: f64,
    e_q: f64,
    v_q: f64,
    e_b: f64,
    v_b: f64,
) -> (f64, f64) {
    let v_omega = e_omega * (1.0 - e_omega);
    let v_d = e_d * (1.0 - e_d);
    let e_w = e_q + e_b;
    let v_w = v_q + v_b;
    let e_dw = e_d * e_w;
    let v_dw = e_d * e_d * v_w + v_d * e_w * e_w + v_d * v_w;
    let e_l = e_omega * e_dw;
    let v_l = e_omega * e_omega * v_dw + v_omega * e_dw * e_dw + v_omega * v_dw;
    (e_l, v_l)
}

/// Reusable scratch buffers for [`moment_profile`].
#[derive(Debug, Default, Clone)]
pub struct ProfileWorkspace {
    /// `E[M^ν e^{-shM}]` for lags `s = 0..=2N`.
    g1: Vec<f64>,
    /// `E[M^{2ν} e^{-shM}]`.
    g2: Vec<f64>,
    /// Per step `n = 0..=N`: Lomax survival of lag `n`.
    z: Vec<f64>,
    /// `ln(1 - z_n)`, later overwritten with `P(all cores dead at n)`.
    dead: Vec<f64>,
    omega: Vec<f64>,
    /// Prefix sums over lags `1..n`: `Σ g1(k)`, `Σ g1(2k)`, `Σ_{k,m} g2(k+m)`.
    s1: Vec<f64>,
    s1d: Vec<f64>,
    d: Vec<f64>,
    /// `Σ_{k<n} ln(1 - z_k)`, later overwritten with `E[D_n]`.
    e_d: Vec<f64>,
}

struct HorizonInput {
    coef: Coefficients,
    shape: f64,
    nu: f64,
    /// Step width over `𝔟`.
    scale: f64,
    omega_scale: f64,
    step_hours: f64,
    cores: f64,
}

impl ProfileWorkspace {
    fn resize(&mut self, steps: usize) {
        let lags = 2 * steps + 1;
        resize(&mut self.g1, lags);
        resize(&mut self.g2, lags);
        for v in [
            &mut self.z,
            &mut self.dead,
            &mut self.omega,
            &mut self.s1,
            &mut self.s1d,
            &mut self.d,
            &mut self.e_d,
        ] {
            resize(v, steps + 1);
        }
    }

    /// Fills `e_l[0..=N]`, `v_l[0..=N]` for one horizon.
    fn evaluate(&mut self, input: &HorizonInput, e_l: &mut [f64], v_l: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU feature was detected at runtime.
            unsafe { evaluate_avx2(self, input, e_l, v_l) };
            return;
        }
        evaluate_horizon(self, input, e_l, v_l);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn evaluate_avx2(ws: &mut ProfileWorkspace, input: &HorizonInput, e_l: &mut [f64], v_l: &mut [f64]) {
    evaluate_horizon(ws, input, e_l, v_l)
}

/// Split into passes so that every transcendental call sits in a loop
/// without cross-iteration dependencies.
#[inline(always)]
fn evaluate_horizon(ws: &mut ProfileWorkspace, p: &HorizonInput, e_l: &mut [f64], v_l: &mut [f64]) {
    let n_len = ws.z.len();
    let lags = ws.g1.len();
    let c = &p.coef;

    // Lag tables.
    {
        let (g1, g2) = (&mut ws.g1[..lags], &mut ws.g2[..lags]);
        let (z, dead, omega) = (&mut ws.z[..n_len], &mut ws.dead[..n_len], &mut ws.omega[..n_len]);
        for s in 0..n_len {
            z[s] = lag_entry(s, p, g1, g2);
        }
        for s in n_len..lags {
            lag_entry(s, p, g1, g2);
        }
        for s in 0..n_len {
            dead[s] = fastmath::ln(1.0 - z[s]).max(-745.0);
            omega[s] = fastmath::exp(-p.shape * fastmath::ln_1p(s as i32 as f64 * p.omega_scale));
        }
    }

    // Prefix sums over lags 1..n-1.
    {
        let (s1, s1d, d, log_sum) = (&mut ws.s1, &mut ws.s1d, &mut ws.d, &mut ws.e_d);
        let (g1, g2, dead) = (&ws.g1, &ws.g2, &ws.dead);
        // p2 holds Σ_{s=1}^{2k-1} g2(s); half holds Σ_{s=1}^{k} g2(s).
        let (mut a, mut b, mut dd, mut p2, mut half, mut ls) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for n in 1..n_len {
            if n >= 2 {
                let k = n - 1;
                a += g1[k];
                b += g1[2 * k];
                p2 += if k >= 2 { g2[2 * k - 2] + g2[2 * k - 1] } else { g2[1] };
                half += g2[k];
                dd += 2.0 * (p2 - half) + g2[2 * k];
                ls += dead[k];
            }
            s1[n] = a;
            s1d[n] = b;
            d[n] = dd;
            log_sum[n] = ls;
        }
    }

    // Probability that every core is gone at step n.
    let m = c.new_cores_exponent(p.step_hours);
    {
        let (dead, log_sum) = (&mut ws.dead[..n_len], &ws.e_d[..n_len]);
        for n in 0..n_len {
            dead[n] = fastmath::exp(p.cores * dead[n] + m * log_sum[n]);
        }
    }
    {
        let (e_d, dead) = (&mut ws.e_d, &ws.dead);
        let mut acc = 1.0;
        e_d[0] = 1.0;
        for n in 1..n_len {
            acc *= 1.0 - dead[n];
            e_d[n] = acc;
        }
    }

    let h = p.step_hours;
    let (e_l, v_l) = (&mut e_l[..n_len], &mut v_l[..n_len]);
    let (omega, e_d, z) = (&ws.omega[..n_len], &ws.e_d[..n_len], &ws.z[..n_len]);
    let (s1, s1d, d) = (&ws.s1[..n_len], &ws.s1d[..n_len], &ws.d[..n_len]);
    for n in 0..n_len {
        let (e, v) = combine(
            omega[n],
            e_d[n],
            c.e_q(h, s1[n]),
            c.v_q(h, s1[n], s1d[n], d[n]),
            p.cores * z[n],
            p.cores * z[n] * (1.0 - z[n]),
        );
        e_l[n] = e;
        v_l[n] = v;
    }
}

/// Writes `g1[s]`, `g2[s]` and returns the Lomax survival of lag `s`.
#[inline(always)]
fn lag_entry(s: usize, p: &HorizonInput, g1: &mut [f64], g2: &mut [f64]) -> f64 {
    let x = fastmath::ln_1p(s as i32 as f64 * p.scale);
    let z = fastmath::exp(-p.shape * x);
    let w = fastmath::exp(-p.nu * x);
    g1[s] = p.coef.k1 * z * w;
    g2[s] = p.coef.k2 * z * w * w;
    z
}

fn resize(v: &mut Vec<f64>, len: usize) {
    v.clear();
    v.resize(len, 0.0);
}

/// Moment profile of a deployment with belief `b` currently holding `cores`
/// cores.
pub fn moment_profile(
    b: &BeliefState,
    cores: u64,
    model: &PopulationModel,
    grid: &LookaheadGrid,
) -> Result<MomentProfile> {
    let mut out = MomentProfile::zeros(grid);
    moment_profile_into(b, cores, model, grid, &mut ProfileWorkspace::default(), &mut out)?;
    Ok(out)
}

/// As [`moment_profile`], reusing `ws` and overwriting `out`.
pub fn moment_profile_into(
    b: &BeliefState,
    cores: u64,
    model: &PopulationModel,
    grid: &LookaheadGrid,
    ws: &mut ProfileWorkspace,
    out: &mut MomentProfile,
) -> Result<()> {
    resize(&mut out.e_l, grid.len());
    resize(&mut out.v_l, grid.len());
    out.truncated_at.clear();
    if cores == 0 {
        out.truncated_at.resize(grid.horizons.len(), Some(0));
        return Ok(());
    }
    let coef = Coefficients::new(b, model.nu)?;
    let eps = grid.marginality_epsilon;
    ws.resize(grid.steps_per_horizon);
    let mu = &b.mu_post;
    for hz in 0..grid.horizons.len() {
        let h = grid.step_hours(hz);
        let input = HorizonInput {
            coef,
            shape: mu.shape,
            nu: model.nu,
            scale: h / mu.rate,
            omega_scale: model.delta * h / mu.rate,
            step_hours: h,
            cores: cores as f64,
        };
        let block = hz * grid.block_len()..(hz + 1) * grid.block_len();
        let e_l = &mut out.e_l[block.clone()];
        let v_l = &mut out.v_l[block];
        ws.evaluate(&input, e_l, v_l);
        let cut = (1..e_l.len()).find(|&n| e_l[n] < eps && v_l[n] < eps);
        if let Some(n) = cut {
            e_l[n..].fill(0.0);
            v_l[n..].fill(0.0);
        }
        out.truncated_at.push(cut);
    }
    Ok(())
}
