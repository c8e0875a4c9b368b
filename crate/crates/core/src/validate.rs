//! Verification harness: stratified two-sample KS for mimicry, PIT
//! uniformity, the quantile-derivative identity and regularity audits.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::discrete_mimic::ConditionalLaw;
use crate::error::{domain, Error, Result};
use crate::mimic_ode::{mimic_at_times, SolverOptions};
use crate::shift_models::{RegularityBudget, ShiftModel};
use crate::simulate::{simulate_counterfactual, Dataset};

/// Asymptotic KS coefficient `c(α) = sqrt(−ln(α/2)/2)`.
pub fn ks_coefficient(alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt()
}

/// `sup_x |F_a(x) − F_b(x)|` for two empirical distributions (ties handled).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Kolmogorov tail `P(K > λ) = 2 Σ (−1)^{k−1} e^{−2k²λ²}`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut acc = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        acc += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * acc).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumTestReport {
    pub stratum_id: String,
    pub n_a: usize,
    pub n_b: usize,
    pub ks_stat: f64,
    pub critical_value: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KsSuite {
    pub alpha: f64,
    pub reports: Vec<StratumTestReport>,
    /// Strata left out, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl KsSuite {
    pub fn pass_rate(&self) -> f64 {
        if self.reports.is_empty() {
            return f64::NAN;
        }
        self.reports.iter().filter(|r| r.pass).count() as f64 / self.reports.len() as f64
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n_strata": self.reports.len(),
            "pass_rate": self.pass_rate(),
            "alpha": self.alpha,
            "skipped": self.skipped.len(),
        })
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["stratum_id", "n_a", "n_b", "ks_stat", "critical_value", "pass"])?;
        for r in &self.reports {
            w.write_record([
                r.stratum_id.clone(),
                r.n_a.to_string(),
                r.n_b.to_string(),
                r.ks_stat.to_string(),
                r.critical_value.to_string(),
                r.pass.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-stratum two-sample KS. Strata missing from either side or with fewer
/// than `min_size` (at least 2) observations in a sample are skipped.
pub fn conditional_ks(
    a: &BTreeMap<String, Vec<f64>>,
    b: &BTreeMap<String, Vec<f64>>,
    alpha: f64,
    min_size: usize,
) -> Result<KsSuite> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(domain(format!("alpha = {alpha} outside (0, 1)")));
    }
    let min_size = min_size.max(2);
    let c = ks_coefficient(alpha);
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for key in keys {
        let (sa, sb) = (a.get(key).map_or(&[][..], Vec::as_slice), b.get(key).map_or(&[][..], Vec::as_slice));
        if sa.len() < min_size || sb.len() < min_size {
            skipped.push((key.clone(), format!("sizes {} and {} below {min_size}", sa.len(), sb.len())));
            continue;
        }
        let (na, nb) = (sa.len() as f64, sb.len() as f64);
        let stat = ks_two_sample(sa, sb);
        let crit = c * ((na + nb) / (na * nb)).sqrt();
        reports.push(StratumTestReport {
            stratum_id: key.clone(),
            n_a: sa.len(),
            n_b: sb.len(),
            ks_stat: stat,
            critical_value: crit,
            pass: stat < crit,
        });
    }
    Ok(KsSuite {
        alpha,
        reports,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PitReport {
    pub n: usize,
    pub ks_stat: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub pass: bool,
}

/// One-sample KS of `values` against Uniform[0, 1].
pub fn pit_uniformity(values: &[f64], alpha: f64) -> Result<PitReport> {
    if values.is_empty() {
        return Err(domain("no PIT values"));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(domain(format!("PIT value {v} outside [0, 1]")));
    }
    let mut u = values.to_vec();
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    let d = u
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max);
    let crit = ks_coefficient(alpha) / n.sqrt();
    let sn = n.sqrt();
    Ok(PitReport {
        n: u.len(),
        ks_stat: d,
        critical_value: crit,
        p_value: kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d),
        pass: d < crit,
    })
}

/// Max over `points = (y, h)` of `|∂_h F_h(y) + F_h'(y)·∂_h F_h^{-1}(F_h(y))|`,
/// every derivative by central differences with the given step.
pub fn quantile_identity_check(family: &ConditionalLaw, points: &[(f64, f64)], step: f64, eps: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for &(y, h) in points {
        let dh_f = (family.cdf(y, h + step) - family.cdf(y, h - step)) / (2.0 * step);
        let dy_f = (family.cdf(y + step, h) - family.cdf(y - step, h)) / (2.0 * step);
        if dy_f < eps {
            return Err(Error::Regularity(format!(
                "density {dy_f} below eps = {eps} at y = {y}, h = {h}"
            )));
        }
        let p = family.cdf(y, h);
        let dh_q = (family.quantile(p, h + step)? - family.quantile(p, h - step)?) / (2.0 * step);
        worst = worst.max((dh_f + dy_f * dh_q).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    DensityFloor,
    DensityBound,
    HDerivativeBound,
    DensityLipschitz,
    HDerivativeLipschitz,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub y: f64,
    pub t: f64,
    pub h: f64,
    pub value: f64,
    pub bound: f64,
}

/// Checks the budget on a `(y, t, h)` mesh, with the law evaluated at `t + h`.
/// Lipschitz quotients compare neighbouring `y` values sharing `(t, h)`.
pub fn regularity_audit(family: &ConditionalLaw, budget: &RegularityBudget, mesh: &[(f64, f64, f64)]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut groups: BTreeMap<(u64, u64), Vec<f64>> = BTreeMap::new();
    for &(y, t, h) in mesh {
        groups.entry((t.to_bits(), h.to_bits())).or_default().push(y);
    }
    for ((tb, hb), mut ys) in groups {
        let (t, h) = (f64::from_bits(tb), f64::from_bits(hb));
        let s = t + h;
        ys.sort_by(f64::total_cmp);
        ys.dedup();
        let dens: Vec<f64> = ys.iter().map(|&y| family.density(y, s)).collect();
        let dh: Vec<f64> = ys.iter().map(|&y| family.h_derivative(y, s)).collect();
        let mut flag = |kind, y, value: f64, bound: f64| out.push(Violation { kind, y, t, h, value, bound });
        for (i, &y) in ys.iter().enumerate() {
            if dens[i] < budget.eps {
                flag(ViolationKind::DensityFloor, y, dens[i], budget.eps);
            }
            if dens[i] > budget.c1 {
                flag(ViolationKind::DensityBound, y, dens[i], budget.c1);
            }
            if dh[i].abs() > budget.c2 {
                flag(ViolationKind::HDerivativeBound, y, dh[i].abs(), budget.c2);
            }
            if i > 0 {
                let dy = y - ys[i - 1];
                let q1 = (dens[i] - dens[i - 1]).abs() / dy;
                if q1 > budget.l1 {
                    flag(ViolationKind::DensityLipschitz, y, q1, budget.l1);
                }
                let q2 = (dh[i] - dh[i - 1]).abs() / dy;
                if q2 > budget.l2 {
                    flag(ViolationKind::HDerivativeLipschitz, y, q2, budget.l2);
                }
            }
        }
    }
    out
}

/// Stratum key: `t` index, the coordinate's value at `t`, and the level-`n`
/// discretized past through `t`.
fn stratum_key(ti: usize, status: f64, prefix: &[i64]) -> String {
    let bins: Vec<String> = prefix.iter().map(i64::to_string).collect();
    format!("t{ti}|s{}|{}", status as i64, bins.join(","))
}

/// Mimicry check: within each stratum, `X_ψ(t)` over the dataset's subjects
/// against the simulated `Y^(t)` of the same subjects. With `alive_coord`
/// set, subjects dead at `t` are left out since there `X(t) = Y^(t) = Y`
/// for every ψ.
#[allow(clippy::too_many_arguments)]
pub fn mimicry_suite(
    dataset: &Dataset,
    model: &ShiftModel,
    times: &[f64],
    status_coord: usize,
    alive_coord: Option<usize>,
    level: u32,
    alpha: f64,
    min_size: usize,
) -> Result<KsSuite> {
    let opts = SolverOptions::default();
    let rows: Vec<Vec<(String, f64, f64)>> = dataset
        .subjects
        .par_iter()
        .map(|s| {
            let xs = mimic_at_times(model, &s.path, s.y, times, &opts)?;
            let dp = s.path.discretize(level)?;
            times
                .iter()
                .enumerate()
                .filter_map(|(ti, &t)| {
                    if let Some(c) = alive_coord {
                        match s.path.coordinate_at(t, c) {
                            Ok(0.0) => return None,
                            Err(e) => return Some(Err(e)),
                            _ => {}
                        }
                    }
                    Some((|| {
                        let key = stratum_key(ti, s.path.coordinate_at(t, status_coord)?, &dp.prefix_through(t));
                        Ok((key, xs[ti], simulate_counterfactual(&dataset.scenario, s, t)?))
                    })())
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut a: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut b: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (key, x, y) in rows.into_iter().flatten() {
        a.entry(key.clone()).or_default().push(x);
        b.entry(key).or_default().push(y);
    }
    conditional_ks(&a, &b, alpha, min_size)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub level: u32,
    pub n_strata: usize,
    pub pass_rate: f64,
}

#[allow(clippy::too_many_arguments)]
/// Sensitivity of the mimicry suite to the coarseness of the strata.
pub fn strata_sweep(
    dataset: &Dataset,
    model: &ShiftModel,
    times: &[f64],
    status_coord: usize,
    alive_coord: Option<usize>,
    levels: &[u32],
    alpha: f64,
    min_size: usize,
) -> Result<Vec<SweepRow>> {
    levels
        .iter()
        .map(|&level| {
            let s = mimicry_suite(dataset, model, times, status_coord, alive_coord, level, alpha, min_size)?;
            Ok(SweepRow {
                level,
                n_strata: s.reports.len(),
                pass_rate: s.pass_rate(),
            })
        })
        .collect()
}
