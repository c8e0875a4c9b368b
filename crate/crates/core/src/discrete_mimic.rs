//! Discrete-time engine: quantile–quantile composition over a grid, the
//! discretized shift `D^(n)` as a mixture quotient, and convergence studies.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::mimic_ode::{gronwall_gap_bound_with_constant, Trajectory};
use crate::numeric::{gl_rule, norm_cdf, norm_pdf, norm_quantile};
use crate::paths::{DiscretizationGrid, DiscretizedPath, SamplePath};
use crate::shift_models::{gronwall_constant, OutcomeKind, RegularityBudget};

/// A family `t ↦ F_t` of conditional laws of `Y^(t)` given a stratum.
///
/// `h_derivative(y, t)` is the right derivative `∂/∂h F_{t+h}(y)` at `h = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConditionalLaw {
    /// Location-scale normal: mean `mu0 + mu1·t + ramp_slope·(t − ramp_onset)⁺`,
    /// standard deviation `sigma0·e^{kappa·t}`.
    Gaussian {
        mu0: f64,
        mu1: f64,
        #[serde(default)]
        ramp_onset: f64,
        #[serde(default)]
        ramp_slope: f64,
        sigma0: f64,
        #[serde(default)]
        kappa: f64,
    },
    /// Survival law on `[origin, ∞)` with hazard `rate·g(s)` for `s < t` and
    /// `rate·after` for `s ≥ t`; `g` is piecewise constant, `given[i] = (start, multiplier)`.
    ExponentialHazard {
        origin: f64,
        rate: f64,
        given: Vec<(f64, f64)>,
        after: f64,
    },
    /// Uniform on `[lo0 + lo1·t, hi0 + hi1·t]`.
    Uniform { lo0: f64, lo1: f64, hi0: f64, hi1: f64 },
    Mixture { components: Vec<(f64, ConditionalLaw)> },
    /// `U + theta·(t − S)⁺` with `U ~ N(mu, sigma²)` and `S − origin ~ Exp(lambda)`:
    /// an untreated stratum whose treatment may start after `origin`.
    OnsetMixture {
        mu: f64,
        sigma: f64,
        theta: f64,
        lambda: f64,
        origin: f64,
    },
}

const QUANTILE_TOL: f64 = 1e-12;

impl ConditionalLaw {
    pub fn gaussian(mu: f64, sigma: f64) -> Self {
        ConditionalLaw::Gaussian {
            mu0: mu,
            mu1: 0.0,
            ramp_onset: 0.0,
            ramp_slope: 0.0,
            sigma0: sigma,
            kappa: 0.0,
        }
    }

    /// Normal with mean `mu + slope·(t − onset)⁺`.
    pub fn gaussian_ramp(mu: f64, sigma: f64, onset: f64, slope: f64) -> Self {
        ConditionalLaw::Gaussian {
            mu0: mu,
            mu1: 0.0,
            ramp_onset: onset,
            ramp_slope: slope,
            sigma0: sigma,
            kappa: 0.0,
        }
    }

    fn gauss_params(mu0: f64, mu1: f64, onset: f64, slope: f64, sigma0: f64, kappa: f64, t: f64) -> (f64, f64, f64, f64) {
        let m = mu0 + mu1 * t + slope * (t - onset).max(0.0);
        let dm = mu1 + if t >= onset { slope } else { 0.0 };
        let s = sigma0 * (kappa * t).exp();
        (m, dm, s, kappa * s)
    }

    fn multiplier(given: &[(f64, f64)], s: f64) -> f64 {
        let i = given.partition_point(|&(start, _)| start <= s);
        if i == 0 {
            1.0
        } else {
            given[i - 1].1
        }
    }

    /// Cumulative hazard `Λ_t(y)` divided by `rate`.
    fn cum_hazard(origin: f64, given: &[(f64, f64)], after: f64, y: f64, t: f64) -> f64 {
        if y <= origin {
            return 0.0;
        }
        let switch = t.max(origin);
        let upto = y.min(switch);
        let mut acc = 0.0;
        let mut lo = origin;
        let mut knots: Vec<f64> = given.iter().map(|g| g.0).filter(|&s| s > origin && s < upto).collect();
        knots.push(upto);
        for k in knots {
            acc += Self::multiplier(given, lo) * (k - lo);
            lo = k;
        }
        acc + after * (y - switch).max(0.0)
    }

    pub fn cdf(&self, y: f64, t: f64) -> f64 {
        match self {
            &ConditionalLaw::Gaussian {
                mu0,
                mu1,
                ramp_onset,
                ramp_slope,
                sigma0,
                kappa,
            } => {
                let (m, _, s, _) = Self::gauss_params(mu0, mu1, ramp_onset, ramp_slope, sigma0, kappa, t);
                norm_cdf((y - m) / s)
            }
            ConditionalLaw::ExponentialHazard {
                origin,
                rate,
                given,
                after,
            } => {
                if y < *origin {
                    0.0
                } else {
                    -(-rate * Self::cum_hazard(*origin, given, *after, y, t)).exp_m1()
                }
            }
            &ConditionalLaw::Uniform { lo0, lo1, hi0, hi1 } => {
                let (lo, hi) = (lo0 + lo1 * t, hi0 + hi1 * t);
                ((y - lo) / (hi - lo)).clamp(0.0, 1.0)
            }
            ConditionalLaw::Mixture { components } => components.iter().map(|(w, c)| w * c.cdf(y, t)).sum(),
            &ConditionalLaw::OnsetMixture {
                mu,
                sigma,
                theta,
                lambda,
                origin,
            } => {
                let stay = (-lambda * (t - origin).max(0.0)).exp();
                let mut acc = stay * norm_cdf((y - mu) / sigma);
                for (s, w) in onset_nodes(sigma, theta, origin, t) {
                    let dens = lambda * (-lambda * (s - origin)).exp();
                    acc += w * dens * norm_cdf((y - mu - theta * (t - s)) / sigma);
                }
                acc
            }
        }
    }

    pub fn density(&self, y: f64, t: f64) -> f64 {
        match self {
            &ConditionalLaw::Gaussian {
                mu0,
                mu1,
                ramp_onset,
                ramp_slope,
                sigma0,
                kappa,
            } => {
                let (m, _, s, _) = Self::gauss_params(mu0, mu1, ramp_onset, ramp_slope, sigma0, kappa, t);
                norm_pdf((y - m) / s) / s
            }
            ConditionalLaw::ExponentialHazard {
                origin,
                rate,
                given,
                after,
            } => {
                if y < *origin {
                    return 0.0;
                }
                let m = if y < t.max(*origin) {
                    Self::multiplier(given, y)
                } else {
                    *after
                };
                rate * m * (-rate * Self::cum_hazard(*origin, given, *after, y, t)).exp()
            }
            &ConditionalLaw::Uniform { lo0, lo1, hi0, hi1 } => {
                let (lo, hi) = (lo0 + lo1 * t, hi0 + hi1 * t);
                if (lo..=hi).contains(&y) {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            ConditionalLaw::Mixture { components } => components.iter().map(|(w, c)| w * c.density(y, t)).sum(),
            &ConditionalLaw::OnsetMixture {
                mu,
                sigma,
                theta,
                lambda,
                origin,
            } => {
                let stay = (-lambda * (t - origin).max(0.0)).exp();
                let mut acc = stay * norm_pdf((y - mu) / sigma) / sigma;
                for (s, w) in onset_nodes(sigma, theta, origin, t) {
                    let dens = lambda * (-lambda * (s - origin)).exp();
                    acc += w * dens * norm_pdf((y - mu - theta * (t - s)) / sigma) / sigma;
                }
                acc
            }
        }
    }

    pub fn h_derivative(&self, y: f64, t: f64) -> f64 {
        match self {
            &ConditionalLaw::Gaussian {
                mu0,
                mu1,
                ramp_onset,
                ramp_slope,
                sigma0,
                kappa,
            } => {
                let (m, dm, s, ds) = Self::gauss_params(mu0, mu1, ramp_onset, ramp_slope, sigma0, kappa, t);
                let z = (y - m) / s;
                -norm_pdf(z) * (dm + z * ds) / s
            }
            ConditionalLaw::ExponentialHazard {
                origin,
                rate,
                given,
                after,
            } => {
                if y <= t || t < *origin {
                    return 0.0;
                }
                let surv = (-rate * Self::cum_hazard(*origin, given, *after, y, t)).exp();
                surv * rate * (Self::multiplier(given, t) - after)
            }
            &ConditionalLaw::Uniform { lo0, lo1, hi0, hi1 } => {
                let (lo, hi) = (lo0 + lo1 * t, hi0 + hi1 * t);
                if !(lo..=hi).contains(&y) {
                    return 0.0;
                }
                let w = hi - lo;
                (-lo1 * w - (y - lo) * (hi1 - lo1)) / (w * w)
            }
            ConditionalLaw::Mixture { components } => {
                components.iter().map(|(w, c)| w * c.h_derivative(y, t)).sum()
            }
            &ConditionalLaw::OnsetMixture {
                mu,
                sigma,
                theta,
                lambda,
                origin,
            } => {
                let mut acc = 0.0;
                for (s, w) in onset_nodes(sigma, theta, origin, t) {
                    let dens = lambda * (-lambda * (s - origin)).exp();
                    acc += w * dens * norm_pdf((y - mu - theta * (t - s)) / sigma);
                }
                -theta / sigma * acc
            }
        }
    }

    /// Closed interval outside of which the law has no mass (may be infinite).
    pub fn support(&self, t: f64) -> (f64, f64) {
        match self {
            ConditionalLaw::Gaussian { .. } | ConditionalLaw::OnsetMixture { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            ConditionalLaw::ExponentialHazard { origin, .. } => (*origin, f64::INFINITY),
            &ConditionalLaw::Uniform { lo0, lo1, hi0, hi1 } => (lo0 + lo1 * t, hi0 + hi1 * t),
            ConditionalLaw::Mixture { components } => components.iter().fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), (_, c)| {
                    let (a, b) = c.support(t);
                    (lo.min(a), hi.max(b))
                },
            ),
        }
    }

    /// Generalized inverse `inf{x : F_t(x) ≥ p}`.
    pub fn quantile(&self, p: f64, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) || p.is_nan() {
            return Err(domain(format!("probability {p} outside [0, 1]")));
        }
        let (lo, hi) = self.support(t);
        if p == 0.0 && lo.is_finite() {
            return Ok(lo);
        }
        if p == 1.0 && hi.is_finite() {
            return Ok(hi);
        }
        if p == 0.0 || p == 1.0 {
            return Err(Error::Model(format!("CDF not invertible at p = {p} on unbounded support")));
        }
        match self {
            &ConditionalLaw::Gaussian {
                mu0,
                mu1,
                ramp_onset,
                ramp_slope,
                sigma0,
                kappa,
            } => {
                let (m, _, s, _) = Self::gauss_params(mu0, mu1, ramp_onset, ramp_slope, sigma0, kappa, t);
                Ok(m + s * norm_quantile(p))
            }
            ConditionalLaw::ExponentialHazard {
                origin,
                rate,
                given,
                after,
            } => {
                let mut target = -(-p).ln_1p() / rate;
                let switch = t.max(*origin);
                let mut lo = *origin;
                let mut knots: Vec<f64> = given.iter().map(|g| g.0).filter(|&s| s > *origin && s < switch).collect();
                knots.push(switch);
                for k in knots {
                    let m = Self::multiplier(given, lo);
                    let piece = m * (k - lo);
                    if piece >= target && m > 0.0 {
                        return Ok(lo + target / m);
                    }
                    target -= piece;
                    lo = k;
                }
                if *after <= 0.0 {
                    return Err(Error::Model("zero terminal hazard: CDF not invertible".into()));
                }
                Ok(switch + target / after)
            }
            &ConditionalLaw::Uniform { lo0, lo1, hi0, hi1 } => {
                let (lo, hi) = (lo0 + lo1 * t, hi0 + hi1 * t);
                Ok(lo + p * (hi - lo))
            }
            _ => self.numeric_quantile(p, t),
        }
    }

    fn centre_guess(&self, t: f64) -> (f64, f64) {
        match self {
            &ConditionalLaw::OnsetMixture {
                mu, sigma, theta, origin, ..
            } => (mu + 0.5 * theta * (t - origin).max(0.0), sigma + theta * (t - origin).max(0.0)),
            ConditionalLaw::Mixture { components } => {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for (_, c) in components {
                    let (m, s) = c.centre_guess(t);
                    lo = lo.min(m - s);
                    hi = hi.max(m + s);
                }
                (0.5 * (lo + hi), 0.5 * (hi - lo).max(1e-6))
            }
            &ConditionalLaw::Gaussian {
                mu0,
                mu1,
                ramp_onset,
                ramp_slope,
                sigma0,
                kappa,
            } => {
                let (m, _, s, _) = Self::gauss_params(mu0, mu1, ramp_onset, ramp_slope, sigma0, kappa, t);
                (m, s)
            }
            _ => {
                let (a, b) = self.support(t);
                let a = if a.is_finite() { a } else { -1.0 };
                let b = if b.is_finite() { b } else { a + 2.0 };
                (0.5 * (a + b), 0.5 * (b - a))
            }
        }
    }

    fn numeric_quantile(&self, p: f64, t: f64) -> Result<f64> {
        let (slo, shi) = self.support(t);
        let (m, s) = self.centre_guess(t);
        let mut lo = if slo.is_finite() { slo } else { m - s };
        let mut hi = if shi.is_finite() { shi } else { m + s };
        let mut width = s.max(1e-3);
        for _ in 0..200 {
            if self.cdf(lo, t) < p || lo <= slo {
                break;
            }
            lo -= width;
            width *= 2.0;
        }
        width = s.max(1e-3);
        for _ in 0..200 {
            if self.cdf(hi, t) >= p || hi >= shi {
                break;
            }
            hi += width;
            width *= 2.0;
        }
        if self.cdf(hi, t) < p {
            return Err(Error::Model(format!("could not bracket quantile p = {p}")));
        }
        // Safeguarded Newton on [lo, hi] with F(lo) < p <= F(hi).
        let mut x = 0.5 * (lo + hi);
        for _ in 0..200 {
            let fx = self.cdf(x, t) - p;
            if fx < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            if hi - lo <= QUANTILE_TOL * (1.0 + x.abs()) || fx.abs() <= 4.0 * f64::EPSILON * p {
                return Ok(x);
            }
            let d = self.density(x, t);
            let newton = if d > 0.0 { x - fx / d } else { f64::NAN };
            x = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        Ok(x)
    }

    /// The law as a list of weighted components (a non-mixture is its own single component).
    pub fn components(&self) -> Vec<(f64, &ConditionalLaw)> {
        match self {
            ConditionalLaw::Mixture { components } => components.iter().map(|(w, c)| (*w, c)).collect(),
            other => vec![(1.0, other)],
        }
    }

    /// Equal-weight mixture of the members of an empirical stratum.
    pub fn empirical_mixture(members: Vec<ConditionalLaw>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyStratum("no members to mix".into()));
        }
        let w = 1.0 / members.len() as f64;
        Ok(ConditionalLaw::Mixture {
            components: members.into_iter().map(|m| (w, m)).collect(),
        })
    }
}

/// Quadrature nodes for onset times in `(origin, t)`.
fn onset_nodes(sigma: f64, theta: f64, origin: f64, t: f64) -> Vec<(f64, f64)> {
    if t <= origin {
        return Vec::new();
    }
    let panels = (1.0 + ((t - origin) * theta.abs() / sigma).ceil()).min(16.0) as usize;
    gl_rule(origin, t, 16, panels)
}

/// Conditional laws indexed by grid interval and discretized-past prefix.
pub trait ConditionalModel: Sync {
    /// `t ↦ F_{Y^(t) | Z̄^(n)_{τ_k} = prefix}` for `t ∈ [τ_k, τ_{k+1}]`.
    fn law(&self, k: usize, prefix: &[i64]) -> Result<ConditionalLaw>;
}

impl<F> ConditionalModel for F
where
    F: Fn(usize, &[i64]) -> Result<ConditionalLaw> + Sync,
{
    fn law(&self, k: usize, prefix: &[i64]) -> Result<ConditionalLaw> {
        self(k, prefix)
    }
}

/// Explicit table of laws keyed by `(k, prefix)`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TabulatedModel {
    pub laws: BTreeMap<(usize, Vec<i64>), ConditionalLaw>,
}

impl ConditionalModel for TabulatedModel {
    fn law(&self, k: usize, prefix: &[i64]) -> Result<ConditionalLaw> {
        self.laws
            .get(&(k, prefix.to_vec()))
            .cloned()
            .ok_or_else(|| Error::Model(format!("no conditional law for interval {k}, stratum {prefix:?}")))
    }
}

/// The composition evaluated once on the grid, reusable for many `t`.
#[derive(Debug, Clone)]
pub struct ComposedPath {
    grid_times: Vec<f64>,
    laws: Vec<Option<ConditionalLaw>>,
    /// `probs[k] = F_{τ_{k+1}|k}(X(τ_{k+1}))`.
    probs: Vec<f64>,
    grid_values: Vec<f64>,
    /// Grid index from which `X ≡ Y`.
    start: usize,
    y: f64,
    kind: OutcomeKind,
}

impl ComposedPath {
    pub fn new(model: &dyn ConditionalModel, dpath: &DiscretizedPath, y_final: f64, kind: OutcomeKind) -> Result<Self> {
        let times = dpath.grid.times.clone();
        let kk = times.len() - 1;
        if !y_final.is_finite() {
            return Err(domain("outcome must be finite"));
        }
        let start = match kind {
            OutcomeKind::Continuous => kk,
            OutcomeKind::Survival => {
                if y_final <= 0.0 {
                    return Err(domain(format!("survival outcome must be positive, got {y_final}")));
                }
                let last_before = times.partition_point(|&s| s < y_final) - 1;
                last_before.min(kk - 1) + 1
            }
        };
        let mut laws = vec![None; kk];
        let mut probs = vec![f64::NAN; kk];
        let mut grid_values = vec![y_final; kk + 1];
        for k in (0..start).rev() {
            let law = model.law(k, &dpath.prefix(k))?;
            if k + 1 == start {
                let (lo, hi) = law.support(times[start]);
                if !(lo..=hi).contains(&y_final) {
                    return Err(domain(format!("outcome {y_final} outside terminal support [{lo}, {hi}]")));
                }
            }
            let p = law.cdf(grid_values[k + 1], times[k + 1]);
            grid_values[k] = law
                .quantile(p, times[k])
                .map_err(|e| Error::Model(format!("interval {k}, stratum {:?}: {e}", dpath.prefix(k))))?;
            probs[k] = p;
            laws[k] = Some(law);
        }
        Ok(Self {
            grid_times: times,
            laws,
            probs,
            grid_values,
            start,
            y: y_final,
            kind,
        })
    }

    pub fn value_at(&self, t: f64) -> Result<f64> {
        let tau = *self.grid_times.last().unwrap();
        if !(0.0..=tau).contains(&t) {
            return Err(domain(format!("t = {t} outside [0, {tau}]")));
        }
        if self.kind == OutcomeKind::Survival && t >= self.y {
            return Ok(self.y);
        }
        if t >= self.grid_times[self.start] {
            return Ok(self.y);
        }
        let k = self.grid_times.partition_point(|&s| s <= t) - 1;
        if t == self.grid_times[k] {
            return Ok(self.grid_values[k]);
        }
        self.laws[k].as_ref().unwrap().quantile(self.probs[k], t)
    }

    pub fn grid_values(&self) -> &[f64] {
        &self.grid_values
    }

    /// Interval index whose law governs time `t`, or `None` where `X ≡ Y`.
    pub fn law_at(&self, t: f64) -> Option<&ConditionalLaw> {
        let k = self.grid_times.partition_point(|&s| s <= t).checked_sub(1)?;
        self.laws.get(k).and_then(Option::as_ref)
    }
}

/// `X^(n)(t)` by alternating quantile maps from `Y` back to `t`.
pub fn compose_quantile_maps(
    model: &dyn ConditionalModel,
    dpath: &DiscretizedPath,
    y_final: f64,
    t: f64,
    kind: OutcomeKind,
) -> Result<f64> {
    ComposedPath::new(model, dpath, y_final, kind)?.value_at(t)
}

#[derive(Debug, Clone, Copy)]
pub struct WeightedStratum<'a> {
    pub weight: f64,
    pub law: &'a ConditionalLaw,
    /// Survival only: strata dead at `t` carry no weight.
    pub alive: bool,
}

/// `D^(n)(y, t) = −Σ w ∂_h F / Σ w ∂_y F` over the alive strata.
pub fn dn_shift(strata: &[WeightedStratum], y: f64, t: f64, eps: f64) -> Result<f64> {
    if strata.iter().any(|s| !(s.weight > 0.0) || !s.weight.is_finite()) {
        return Err(domain("stratum weights must be positive and finite"));
    }
    let (mut num, mut den, mut any) = (0.0, 0.0, false);
    for s in strata.iter().filter(|s| s.alive) {
        num += s.weight * s.law.h_derivative(y, t);
        den += s.weight * s.law.density(y, t);
        any = true;
    }
    if !any {
        return Ok(0.0);
    }
    if den < eps {
        return Err(Error::Regularity(format!(
            "mixture density {den} below eps = {eps} at y = {y}, t = {t}"
        )));
    }
    if num == 0.0 {
        return Ok(0.0);
    }
    Ok(-num / den)
}

/// `D^(n)(y, t)` for the stratum of `dpath` at `t`, with survival guards.
pub fn discrete_shift(
    model: &dyn ConditionalModel,
    dpath: &DiscretizedPath,
    y: f64,
    t: f64,
    kind: OutcomeKind,
    alive_coord: Option<usize>,
    eps: f64,
) -> Result<f64> {
    let k = dpath.grid.interval_of(t);
    if kind == OutcomeKind::Survival {
        let dead = alive_coord.is_some_and(|c| dpath.bins[k][c] <= 0);
        if dead || y < t {
            return Ok(0.0);
        }
    }
    let law = model.law(k, &dpath.prefix(k))?;
    let strata: Vec<WeightedStratum> = law
        .components()
        .into_iter()
        .map(|(weight, law)| WeightedStratum {
            weight,
            law,
            alive: true,
        })
        .collect();
    dn_shift(&strata, y, t, eps)
}

/// Gaussian scenario used for convergence studies: `Y^(t) = U + θ·(t − S)⁺`
/// with `U ~ N(mu, sigma²)` and treatment onset `S ~ Exp(lambda)`. The path
/// has one coordinate, the treatment indicator `1{t ≥ S}`, and the true shift
/// is `D = θ·1{treated at t}`, so `X(t) = Y − θ·(τ − max(t, S))⁺`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnsetScenario {
    pub mu: f64,
    pub sigma: f64,
    pub theta: f64,
    pub lambda: f64,
    pub horizon: f64,
}

impl Default for OnsetScenario {
    fn default() -> Self {
        Self {
            mu: 0.0,
            sigma: 1.0,
            theta: 1.0,
            lambda: 1.0,
            horizon: 1.0,
        }
    }
}

/// How treated strata average over the onset times compatible with their prefix.
#[derive(Debug, Clone)]
pub enum OnsetWeights {
    /// Truncated-exponential law of `S`, by Gauss–Legendre quadrature.
    Analytic,
    /// Empirical frequencies: equal weight on each observed onset in the interval.
    Empirical(Vec<f64>),
}

impl OnsetScenario {
    pub fn path(&self, onset: f64) -> SamplePath {
        if onset <= 0.0 {
            SamplePath::constant(self.horizon, vec![1.0]).unwrap()
        } else if onset <= self.horizon {
            SamplePath::new(self.horizon, vec![0.0], vec![(onset, vec![1.0])]).unwrap()
        } else {
            SamplePath::constant(self.horizon, vec![0.0]).unwrap()
        }
    }

    pub fn counterfactual(&self, u: f64, onset: f64, t: f64) -> f64 {
        u + self.theta * (t - onset).max(0.0)
    }

    pub fn outcome(&self, u: f64, onset: f64) -> f64 {
        self.counterfactual(u, onset, self.horizon)
    }

    pub fn analytic_x(&self, y: f64, onset: f64, t: f64) -> f64 {
        y - self.theta * (self.horizon - t.max(onset)).max(0.0)
    }

    pub fn true_shift(&self, onset: f64, t: f64) -> f64 {
        if t >= onset {
            self.theta
        } else {
            0.0
        }
    }

    pub fn model<'a>(&'a self, grid: &'a DiscretizationGrid, weights: &'a OnsetWeights) -> impl ConditionalModel + 'a {
        move |k: usize, prefix: &[i64]| -> Result<ConditionalLaw> {
            let times = &grid.times;
            match prefix.iter().position(|&b| b > 0) {
                None => Ok(ConditionalLaw::OnsetMixture {
                    mu: self.mu,
                    sigma: self.sigma,
                    theta: self.theta,
                    lambda: self.lambda,
                    origin: times[k],
                }),
                Some(0) => Ok(ConditionalLaw::gaussian_ramp(self.mu, self.sigma, 0.0, self.theta)),
                Some(j) => {
                    let (a, b) = (times[j - 1], times[j]);
                    let components: Vec<(f64, ConditionalLaw)> = match weights {
                        OnsetWeights::Analytic => {
                            let nodes = gl_rule(a, b, 16, 1);
                            let raw: Vec<f64> = nodes
                                .iter()
                                .map(|(s, w)| w * (-self.lambda * (s - a)).exp())
                                .collect();
                            let total: f64 = raw.iter().sum();
                            nodes
                                .iter()
                                .zip(raw)
                                .map(|((s, _), r)| (r / total, ConditionalLaw::gaussian_ramp(self.mu, self.sigma, *s, self.theta)))
                                .collect()
                        }
                        OnsetWeights::Empirical(onsets) => {
                            let members: Vec<f64> = onsets.iter().copied().filter(|&s| s > a && s <= b).collect();
                            if members.is_empty() {
                                return Err(Error::EmptyStratum(format!("no observed onsets in ({a}, {b}]")));
                            }
                            let w = 1.0 / members.len() as f64;
                            members
                                .into_iter()
                                .map(|s| (w, ConditionalLaw::gaussian_ramp(self.mu, self.sigma, s, self.theta)))
                                .collect()
                        }
                    };
                    Ok(ConditionalLaw::Mixture { components })
                }
            }
        }
    }

    /// Owning variant of [`OnsetScenario::model`], for study builders.
    pub fn boxed_model(&self, grid: &DiscretizationGrid, weights: &OnsetWeights) -> Box<dyn ConditionalModel> {
        let (sc, grid, weights) = (*self, grid.clone(), weights.clone());
        Box::new(move |k: usize, p: &[i64]| sc.model(&grid, &weights).law(k, p))
    }

    /// Analytic regularity constants of the Gaussian components over
    /// `[y1, y2]`: the density floor uses the farthest any component mean
    /// can sit from the band.
    pub fn budget(&self, y1: f64, y2: f64) -> RegularityBudget {
        let s = self.sigma;
        let far = (y2 - self.mu).max(self.mu + self.theta * self.horizon - y1).max(0.0) / s;
        let phi_max = norm_pdf(0.0);
        let dphi_max = norm_pdf(1.0); // max |φ'(z)| = φ(1)
        RegularityBudget {
            eps: norm_pdf(far) / s,
            c1: phi_max / s,
            c2: self.theta * phi_max / s,
            l1: dphi_max / (s * s),
            l2: self.theta * dphi_max / (s * s),
            y1: Some(y1),
            y2,
        }
    }
}

/// How the reference `X` is obtained in a convergence study.
pub enum Reference<'a> {
    Analytic(&'a (dyn Fn(f64) -> f64 + Sync)),
    /// Composition at level `max(levels) + 4`.
    Refined,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergencePoint {
    pub level: u32,
    pub sup_gap: f64,
    /// `∫ e^{C s}|D − D^(n)|(X^(n)(s), s) ds`, when a true shift was supplied.
    pub gronwall_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub points: Vec<ConvergencePoint>,
    /// Each gap is at most 1.05 times its predecessor. `None` for a single level.
    pub nonincreasing: Option<bool>,
}

impl ConvergenceReport {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["level", "sup_gap"])?;
        for p in &self.points {
            w.write_record([p.level.to_string(), p.sup_gap.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl ConvergenceReport {
    /// Level-wise maximum of gaps and bounds over studies sharing `levels`.
    pub fn combine(reports: &[ConvergenceReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| domain("no reports to combine"))?;
        let mut points = first.points.clone();
        for r in &reports[1..] {
            if r.points.len() != points.len() || r.points.iter().zip(&points).any(|(a, b)| a.level != b.level) {
                return Err(domain("reports cover different levels"));
            }
            for (p, q) in points.iter_mut().zip(&r.points) {
                p.sup_gap = p.sup_gap.max(q.sup_gap);
                p.gronwall_bound = match (p.gronwall_bound, q.gronwall_bound) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    _ => None,
                };
            }
        }
        let nonincreasing = (points.len() > 1).then(|| points.windows(2).all(|w| w[1].sup_gap <= 1.05 * w[0].sup_gap));
        Ok(Self { points, nonincreasing })
    }
}

/// Panel study on the onset scenario: `n_subjects` draws of `(U, S)`, each
/// studied against its analytic `X`, combined level-wise by the maximum.
/// The sup-norm gap of the scenario is thus taken over subjects and time.
/// With `bound`, each subject also gets the Grönwall bound from the analytic
/// budget on the band `[Y − θτ − 1, Y + 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PanelStudy {
    pub combined: ConvergenceReport,
    pub subjects: Vec<(f64, f64, ConvergenceReport)>,
}

pub fn onset_panel_study(
    sc: &OnsetScenario,
    n_subjects: usize,
    seed: u64,
    levels: &[u32],
    lipschitz: Option<f64>,
    bound: bool,
) -> Result<PanelStudy> {
    use rand::{RngExt, SeedableRng};
    if n_subjects == 0 {
        return Err(domain("panel needs at least one subject"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(f64, f64)> = (0..n_subjects)
        .map(|_| {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            let e = -(1.0 - rng.random::<f64>()).ln() / sc.lambda;
            (sc.mu + sc.sigma * z, e)
        })
        .collect();
    let weights = OnsetWeights::Analytic;
    let subjects = draws
        .into_par_iter()
        .map(|(u, s)| -> Result<(f64, f64, ConvergenceReport)> {
            let path = sc.path(s);
            let y = sc.outcome(u, s);
            let build = |g: &DiscretizationGrid| sc.boxed_model(g, &weights);
            let reference = |t: f64| sc.analytic_x(y, s, t);
            let true_shift = |_: f64, t: f64| sc.true_shift(s, t);
            let c = lipschitz.unwrap_or_else(|| gronwall_constant(&sc.budget(y - sc.theta * sc.horizon - 1.0, y + 1.0)));
            let spec = BoundSpec {
                true_shift: &true_shift,
                lipschitz: c,
                eps: 1e-12,
            };
            let r = convergence_study(
                &build,
                &path,
                y,
                OutcomeKind::Continuous,
                levels,
                Reference::Analytic(&reference),
                bound.then_some(&spec),
            )?;
            Ok((u, s, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<ConvergenceReport> = subjects.iter().map(|(_, _, r)| r.clone()).collect();
    Ok(PanelStudy {
        combined: ConvergenceReport::combine(&reports)?,
        subjects,
    })
}

/// Optional Grönwall bound: the true shift along the path and a Lipschitz constant.
pub struct BoundSpec<'a> {
    pub true_shift: &'a (dyn Fn(f64, f64) -> f64 + Sync),
    pub lipschitz: f64,
    pub eps: f64,
}

/// Sup-norm gaps `|X^(n) − X_ref|` for each level on a common mesh.
pub fn convergence_study<'m>(
    build: &(dyn Fn(&DiscretizationGrid) -> Box<dyn ConditionalModel + 'm> + Sync),
    path: &SamplePath,
    y_final: f64,
    kind: OutcomeKind,
    levels: &[u32],
    reference: Reference,
    bound: Option<&BoundSpec>,
) -> Result<ConvergenceReport> {
    if levels.is_empty() || levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(domain("levels must be nonempty and strictly increasing"));
    }
    let tau = path.horizon();
    let top = *levels.last().unwrap();
    let mut mesh: Vec<f64> = (0..=1024).map(|i| tau * i as f64 / 1024.0).collect();
    mesh.extend(path.jump_times());
    mesh.extend(DiscretizationGrid::dyadic(top, tau)?.times);
    mesh.sort_by(f64::total_cmp);
    mesh.dedup();

    let evaluate = |level: u32| -> Result<(Vec<f64>, ComposedPath, DiscretizedPath, Box<dyn ConditionalModel + 'm>)> {
        let grid = DiscretizationGrid::dyadic(level, tau)?;
        let dpath = grid.discretize(path)?;
        let model = build(&grid);
        let composed = ComposedPath::new(model.as_ref(), &dpath, y_final, kind)?;
        let xs = mesh.iter().map(|&t| composed.value_at(t)).collect::<Result<Vec<_>>>()?;
        Ok((xs, composed, dpath, model))
    };
    let x_ref: Vec<f64> = match reference {
        Reference::Analytic(f) => mesh.iter().map(|&t| f(t)).collect(),
        Reference::Refined => evaluate(top + 4)?.0,
    };
    let points = levels
        .par_iter()
        .map(|&level| -> Result<ConvergencePoint> {
            let (xs, composed, dpath, model) = evaluate(level)?;
            let sup_gap = xs.iter().zip(&x_ref).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let gronwall_bound = match bound {
                None => None,
                Some(spec) => {
                    let traj = Trajectory::from_samples(mesh.clone(), xs.clone(), y_final)?;
                    let gap = |x: f64, s: f64| -> f64 {
                        let dn = if composed.law_at(s).is_some() {
                            discrete_shift(model.as_ref(), &dpath, x, s, kind, None, spec.eps).unwrap_or(f64::NAN)
                        } else {
                            0.0
                        };
                        (spec.true_shift)(x, s) - dn
                    };
                    Some(gronwall_gap_bound_with_constant(&traj, gap, spec.lipschitz)?)
                }
            };
            Ok(ConvergencePoint {
                level,
                sup_gap,
                gronwall_bound,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let nonincreasing = (points.len() > 1).then(|| points.windows(2).all(|w| w[1].sup_gap <= 1.05 * w[0].sup_gap));
    Ok(ConvergenceReport { points, nonincreasing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::SamplePath;
    use proptest::prelude::*;

    fn fd_h(law: &ConditionalLaw, y: f64, t: f64) -> f64 {
        let h = 1e-6;
        (law.cdf(y, t + h) - law.cdf(y, t - h)) / (2.0 * h)
    }

    fn fd_y(law: &ConditionalLaw, y: f64, t: f64) -> f64 {
        let h = 1e-6;
        (law.cdf(y + h, t) - law.cdf(y - h, t)) / (2.0 * h)
    }

    fn laws() -> Vec<ConditionalLaw> {
        vec![
            ConditionalLaw::Gaussian {
                mu0: 0.3,
                mu1: 0.7,
                ramp_onset: 0.0,
                ramp_slope: 0.0,
                sigma0: 0.8,
                kappa: 0.4,
            },
            ConditionalLaw::ExponentialHazard {
                origin: 0.0,
                rate: 1.2,
                given: vec![(0.0, 1.0), (0.35, 0.5)],
                after: 1.6,
            },
            ConditionalLaw::Uniform {
                lo0: -1.0,
                lo1: 0.3,
                hi0: 2.0,
                hi1: 0.8,
            },
            ConditionalLaw::OnsetMixture {
                mu: 0.0,
                sigma: 1.0,
                theta: 1.0,
                lambda: 1.3,
                origin: 0.1,
            },
            ConditionalLaw::Mixture {
                components: vec![
                    (0.4, ConditionalLaw::gaussian_ramp(0.0, 1.0, 0.2, 1.0)),
                    (0.6, ConditionalLaw::gaussian_ramp(0.5, 0.7, 0.25, 1.0)),
                ],
            },
        ]
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        for law in laws() {
            for &t in &[0.5, 0.7] {
                for &y in &[0.45, 0.9, 1.4] {
                    let hd = law.h_derivative(y, t);
                    let dd = law.density(y, t);
                    assert!((hd - fd_h(&law, y, t)).abs() < 1e-6, "{law:?} y={y} t={t}: {hd} vs {}", fd_h(&law, y, t));
                    assert!((dd - fd_y(&law, y, t)).abs() < 1e-6, "{law:?} y={y} t={t}");
                }
            }
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for law in laws() {
            for &t in &[0.4, 0.9] {
                for &p in &[0.01, 0.2, 0.5, 0.83, 0.99] {
                    let x = law.quantile(p, t).unwrap();
                    assert!((law.cdf(x, t) - p).abs() < 1e-10, "{law:?} p={p} x={x} err={}", law.cdf(x, t) - p);
                }
            }
        }
    }

    #[test]
    fn exponential_consistency_below_switch() {
        // F_{Y^(t)}(y) = F_Y(y) for y <= t
        let law = &laws()[1];
        for &y in &[0.1, 0.3, 0.6] {
            assert!((law.cdf(y, 0.6) - law.cdf(y, 1.0)).abs() < 1e-15);
        }
    }

    fn level1_gaussian(a: [f64; 2], b: [f64; 2], sigma: f64) -> impl ConditionalModel {
        move |k: usize, _: &[i64]| -> Result<ConditionalLaw> {
            Ok(ConditionalLaw::Gaussian {
                mu0: a[k],
                mu1: b[k],
                ramp_onset: 0.0,
                ramp_slope: 0.0,
                sigma0: sigma,
                kappa: 0.0,
            })
        }
    }

    #[test]
    fn gaussian_location_composition_matches_algebra() {
        let (a, b, sigma) = ([0.2, -0.4], [1.5, 0.6], 0.9);
        let mu = |k: usize, t: f64| a[k] + b[k] * t;
        let model = level1_gaussian(a, b, sigma);
        let path = SamplePath::constant(1.0, vec![0.0]).unwrap();
        let dpath = path.discretize(1).unwrap();
        let y = 1.3;
        for &t in &[0.0, 0.1, 0.37, 0.49] {
            let x = compose_quantile_maps(&model, &dpath, y, t, OutcomeKind::Continuous).unwrap();
            let expected = y - mu(1, 1.0) + mu(1, 0.5) - mu(0, 0.5) + mu(0, t);
            assert!((x - expected).abs() < 1e-10, "t={t}: {x} vs {expected}");
        }
    }

    #[test]
    fn identical_laws_give_identity() {
        let model = |_: usize, _: &[i64]| Ok(ConditionalLaw::gaussian(0.0, 1.0));
        let path = SamplePath::constant(1.0, vec![0.0]).unwrap();
        let dpath = path.discretize(3).unwrap();
        for &t in &[0.0, 0.3, 0.99] {
            let x = compose_quantile_maps(&model, &dpath, 0.77, t, OutcomeKind::Continuous).unwrap();
            assert!((x - 0.77).abs() < 1e-12);
        }
    }

    fn survival_model() -> impl ConditionalModel {
        |k: usize, _: &[i64]| -> Result<ConditionalLaw> {
            let _ = k;
            Ok(ConditionalLaw::ExponentialHazard {
                origin: 0.0,
                rate: 1.0,
                given: vec![(0.0, 0.5)],
                after: 1.0,
            })
        }
    }

    #[test]
    fn survival_death_before_first_grid_point() {
        let path = SamplePath::new(1.0, vec![1.0], vec![(0.3, vec![0.0])]).unwrap();
        let dpath = path.discretize(1).unwrap();
        let m = survival_model();
        let y = 0.3;
        for &t in &[0.3, 0.4, 0.5, 0.8, 1.0] {
            assert_eq!(compose_quantile_maps(&m, &dpath, y, t, OutcomeKind::Survival).unwrap(), y);
        }
        for &t in &[0.0, 0.1, 0.29] {
            let x = compose_quantile_maps(&m, &dpath, y, t, OutcomeKind::Survival).unwrap();
            assert!(x > t, "X({t}) = {x}");
        }
    }

    #[test]
    fn outcome_outside_support_is_domain_error() {
        let m = |_: usize, _: &[i64]| {
            Ok(ConditionalLaw::Uniform {
                lo0: 0.0,
                lo1: 0.0,
                hi0: 1.0,
                hi1: 0.0,
            })
        };
        let dpath = SamplePath::constant(1.0, vec![0.0]).unwrap().discretize(1).unwrap();
        assert!(matches!(
            compose_quantile_maps(&m, &dpath, 1.5, 0.2, OutcomeKind::Continuous),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn missing_stratum_is_model_error() {
        let table = TabulatedModel::default();
        let dpath = SamplePath::constant(1.0, vec![0.0]).unwrap().discretize(1).unwrap();
        assert!(matches!(
            compose_quantile_maps(&table, &dpath, 0.5, 0.2, OutcomeKind::Continuous),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn dn_shift_single_stratum_is_continuous_quotient() {
        let law = ConditionalLaw::gaussian_ramp(0.0, 1.0, 0.0, 0.8);
        let s = [WeightedStratum {
            weight: 1.0,
            law: &law,
            alive: true,
        }];
        // pure shift with slope 0.8: D = 0.8 everywhere
        for &y in &[-1.0, 0.2, 1.7] {
            assert!((dn_shift(&s, y, 0.5, 1e-9).unwrap() - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn dn_shift_quotient_of_averages() {
        let a = ConditionalLaw::gaussian_ramp(0.0, 1.0, 0.0, 0.3);
        let b = ConditionalLaw::gaussian_ramp(0.0, 1.0, 0.0, 1.1);
        let strata = [
            WeightedStratum {
                weight: 0.5,
                law: &a,
                alive: true,
            },
            WeightedStratum {
                weight: 0.5,
                law: &b,
                alive: true,
            },
        ];
        let (y, t) = (0.9, 0.4);
        let num = 0.5 * a.h_derivative(y, t) + 0.5 * b.h_derivative(y, t);
        let den = 0.5 * a.density(y, t) + 0.5 * b.density(y, t);
        assert!((dn_shift(&strata, y, t, 1e-9).unwrap() + num / den).abs() < 1e-14);
    }

    #[test]
    fn dn_shift_zero_numerator_and_low_density() {
        let flat = ConditionalLaw::gaussian(0.0, 1.0);
        let s = [WeightedStratum {
            weight: 1.0,
            law: &flat,
            alive: true,
        }];
        assert_eq!(dn_shift(&s, 0.3, 0.2, 1e-9).unwrap(), 0.0);
        assert!(matches!(dn_shift(&s, 40.0, 0.2, 1e-3), Err(Error::Regularity(_))));
    }

    #[test]
    fn continuity_across_grid_points() {
        let sc = OnsetScenario::default();
        let grid = DiscretizationGrid::dyadic(3, 1.0).unwrap();
        let w = OnsetWeights::Analytic;
        let model = sc.model(&grid, &w);
        let path = sc.path(0.41);
        let dpath = grid.discretize(&path).unwrap();
        let c = ComposedPath::new(&model, &dpath, sc.outcome(0.2, 0.41), OutcomeKind::Continuous).unwrap();
        for k in 1..grid.times.len() - 1 {
            let tk = grid.times[k];
            let jump = (c.value_at(tk - 1e-11).unwrap() - c.value_at(tk).unwrap()).abs();
            assert!(jump < 1e-8, "jump {jump} at {tk}");
        }
    }

    #[test]
    fn onset_composition_is_exact_after_onset_interval() {
        let sc = OnsetScenario::default();
        let grid = DiscretizationGrid::dyadic(2, 1.0).unwrap();
        let w = OnsetWeights::Analytic;
        let model = sc.model(&grid, &w);
        let (u, s) = (0.3, 0.3);
        let y = sc.outcome(u, s);
        let dpath = grid.discretize(&sc.path(s)).unwrap();
        let c = ComposedPath::new(&model, &dpath, y, OutcomeKind::Continuous).unwrap();
        for &t in &[0.5, 0.6, 0.9] {
            assert!((c.value_at(t).unwrap() - sc.analytic_x(y, s, t)).abs() < 1e-9);
        }
    }

    #[test]
    fn empirical_weights_close_to_analytic() {
        use rand::{RngExt, SeedableRng};
        let sc = OnsetScenario::default();
        let grid = DiscretizationGrid::dyadic(3, 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let onsets: Vec<f64> = (0..4000).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let emp = OnsetWeights::Empirical(onsets);
        let ana = OnsetWeights::Analytic;
        let (me, ma) = (sc.model(&grid, &emp), sc.model(&grid, &ana));
        let dpath = grid.discretize(&sc.path(0.2)).unwrap();
        let y = sc.outcome(0.1, 0.2);
        let a = compose_quantile_maps(&me, &dpath, y, 0.0, OutcomeKind::Continuous).unwrap();
        let b = compose_quantile_maps(&ma, &dpath, y, 0.0, OutcomeKind::Continuous).unwrap();
        assert!((a - b).abs() < 5e-3, "{a} vs {b}");
    }

    #[test]
    fn zero_effect_study_has_zero_gap() {
        let sc = OnsetScenario {
            theta: 0.0,
            ..Default::default()
        };
        let path = sc.path(0.3);
        let y = sc.outcome(0.5, 0.3);
        let reference = |_: f64| y;
        let build = |g: &DiscretizationGrid| -> Box<dyn ConditionalModel> {
            let g = g.clone();
            Box::new(move |k: usize, p: &[i64]| sc.model(&g, &OnsetWeights::Analytic).law(k, p))
        };
        let r = convergence_study(&build, &path, y, OutcomeKind::Continuous, &[2, 3], Reference::Analytic(&reference), None)
            .unwrap();
        assert!(r.points.iter().all(|p| p.sup_gap < 1e-9));
        let single = convergence_study(&build, &path, y, OutcomeKind::Continuous, &[2], Reference::Analytic(&reference), None)
            .unwrap();
        assert_eq!(single.nonincreasing, None);
    }

    proptest! {
        #[test]
        fn survival_composition_stays_above_diagonal(y in 0.02f64..3.0, t in 0.0f64..1.0) {
            let path = SamplePath::constant(1.0, vec![1.0]).unwrap();
            let dpath = path.discretize(2).unwrap();
            let m = survival_model();
            let x = compose_quantile_maps(&m, &dpath, y, t, OutcomeKind::Survival).unwrap();
            if y > t {
                prop_assert!(x > t);
            } else {
                prop_assert_eq!(x, y);
            }
        }

        #[test]
        fn constant_law_interval_collapses(y in -2.0f64..2.0, t in 0.0f64..0.5) {
            // interval 0 law independent of t, so X is constant on [0, 0.5)
            let m = |k: usize, _: &[i64]| -> Result<ConditionalLaw> {
                Ok(if k == 0 { ConditionalLaw::gaussian(0.1, 1.0) } else { ConditionalLaw::gaussian_ramp(0.1, 1.0, 0.5, 2.0) })
            };
            let dpath = SamplePath::constant(1.0, vec![0.0]).unwrap().discretize(1).unwrap();
            let a = compose_quantile_maps(&m, &dpath, y, t, OutcomeKind::Continuous).unwrap();
            let b = compose_quantile_maps(&m, &dpath, y, 0.0, OutcomeKind::Continuous).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
