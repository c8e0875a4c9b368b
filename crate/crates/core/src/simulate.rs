//! Generative scenarios with a per-subject counterfactual oracle `Y^(t)`.
//!
//! Outcomes are produced by a rank-preserving construction: each subject
//! carries a latent untreated outcome, and the observed outcome and every
//! counterfactual are deterministic functions of that draw and the realized
//! treatment path.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{config, domain, Error, Result};
use crate::paths::{read_paths_csv, write_paths_csv, PathBuilder, SamplePath};
use crate::shift_models::{OutcomeKind, ShiftFamily, ShiftModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Survival outcome; coordinates `[alive, exposure, covariate]`.
    GvhdSurvival,
    /// Continuous outcome; coordinates `[treated, pcp_history, arm]`.
    PcpContinuous,
    /// The two-decision tree; coordinates `[a0, l1, a1, alive]`.
    DiscreteTree,
    /// `GvhdSurvival` with no effect.
    NullEffect,
}

/// Law of the latent untreated outcome `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BaselineLaw {
    /// Exponential(rate) conditioned on `[0, upper]`.
    TruncatedExponential { rate: f64, upper: f64 },
    /// With probability `weight` uniform on `[lo, hi]`, else `lo + (hi − lo)·Beta(2, 2)`.
    UniformBetaMixture { lo: f64, hi: f64, weight: f64 },
}

impl BaselineLaw {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            BaselineLaw::TruncatedExponential { rate, upper } => {
                let v: f64 = rng.random();
                -(-v * (-(-rate * upper).exp_m1())).ln_1p() / rate
            }
            BaselineLaw::UniformBetaMixture { lo, hi, weight } => {
                let pick: f64 = rng.random();
                let v: f64 = if pick < weight {
                    rng.random()
                } else {
                    Beta::new(2.0, 2.0).unwrap().sample(rng)
                };
                lo + (hi - lo) * v
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            BaselineLaw::TruncatedExponential { rate, upper } => rate > 0.0 && upper > 0.0,
            BaselineLaw::UniformBetaMixture { lo, hi, weight } => lo < hi && (0.0..=1.0).contains(&weight),
        };
        if ok {
            Ok(())
        } else {
            Err(config(format!("invalid baseline law {self:?}")))
        }
    }
}

/// `P(start treatment at a decision time) = expit(intercept + covariate·L + arm·(R − 1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreatmentPolicy {
    pub intercept: f64,
    pub covariate: f64,
    #[serde(default)]
    pub arm: f64,
}

/// `P(covariate switches on at a decision time) =
/// expit(intercept + treatment·A + residual·R)` where `R` is the latent
/// remaining untreated outcome (a prognosis marker the analyst never sees).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateProcess {
    pub intercept: f64,
    pub treatment: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub true_psi: Vec<f64>,
    pub horizon: f64,
    /// Decision times are `j·horizon/n_decisions` for `j < n_decisions`.
    pub n_decisions: usize,
    pub baseline: BaselineLaw,
    pub policy: TreatmentPolicy,
    pub covariate: CovariateProcess,
    /// Experimental non-rank-preserving variant: at treatment onset the
    /// latent residual is replaced by its antithetic quantile under the
    /// untruncated baseline law.
    #[serde(default)]
    pub quantile_shuffle: bool,
}

pub fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Scenario {
    pub fn builtin(kind: ScenarioKind) -> Self {
        match kind {
            ScenarioKind::GvhdSurvival | ScenarioKind::NullEffect => Scenario {
                kind,
                true_psi: vec![if kind == ScenarioKind::NullEffect { 0.0 } else { std::f64::consts::LN_2 }],
                horizon: 5.0,
                n_decisions: 20,
                baseline: BaselineLaw::TruncatedExponential { rate: 0.5, upper: 10.0 },
                policy: TreatmentPolicy {
                    intercept: -2.0,
                    covariate: 1.5,
                    arm: 0.0,
                },
                covariate: CovariateProcess {
                    intercept: -2.0,
                    treatment: 0.7,
                    residual: -0.6,
                },
                quantile_shuffle: false,
            },
            ScenarioKind::PcpContinuous => Scenario {
                kind,
                true_psi: vec![-0.5, 0.3, 0.1],
                horizon: 1.0,
                n_decisions: 10,
                baseline: BaselineLaw::UniformBetaMixture {
                    lo: 0.0,
                    hi: 4.0,
                    weight: 0.5,
                },
                policy: TreatmentPolicy {
                    intercept: -1.5,
                    covariate: 2.0,
                    arm: 0.3,
                },
                covariate: CovariateProcess {
                    intercept: -1.0,
                    treatment: 0.0,
                    residual: -0.8,
                },
                quantile_shuffle: false,
            },
            ScenarioKind::DiscreteTree => build_figure_tree(),
        }
    }

    /// Parses a JSON spec, filling unspecified fields from the built-in
    /// defaults for its `kind`.
    pub fn from_json(s: &str) -> Result<Self> {
        let overlay: Value = serde_json::from_str(s)?;
        Self::from_value(overlay)
    }

    pub fn from_value(overlay: Value) -> Result<Self> {
        let kind: ScenarioKind = serde_json::from_value(
            overlay
                .get("kind")
                .cloned()
                .ok_or_else(|| config("scenario spec needs a `kind`"))?,
        )?;
        let mut base = serde_json::to_value(Self::builtin(kind))?;
        merge_json(&mut base, overlay);
        let sc: Scenario = serde_json::from_value(base)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(config("horizon must be positive"));
        }
        if self.n_decisions == 0 {
            return Err(config("need at least one decision time"));
        }
        let want = match self.kind {
            ScenarioKind::PcpContinuous => 3,
            ScenarioKind::DiscreteTree => 0,
            _ => 1,
        };
        if self.true_psi.len() != want {
            return Err(config(format!("{:?} takes {want} psi components", self.kind)));
        }
        if self.kind == ScenarioKind::NullEffect && self.true_psi[0] != 0.0 {
            return Err(config("null-effect scenario must have psi = 0"));
        }
        if self.quantile_shuffle {
            self.shuffle_rate()?;
        }
        self.baseline.validate()
    }

    fn shuffle_rate(&self) -> Result<f64> {
        match (self.kind, &self.baseline) {
            (ScenarioKind::GvhdSurvival | ScenarioKind::NullEffect, BaselineLaw::TruncatedExponential { rate, .. }) => {
                Ok(*rate)
            }
            _ => Err(config("quantile shuffle needs a survival scenario with an exponential baseline")),
        }
    }

    pub fn decision_times(&self) -> Vec<f64> {
        (0..self.n_decisions)
            .map(|j| self.horizon * j as f64 / self.n_decisions as f64)
            .collect()
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        match self.kind {
            ScenarioKind::PcpContinuous => OutcomeKind::Continuous,
            _ => OutcomeKind::Survival,
        }
    }

    pub fn coordinate_names(&self) -> Vec<String> {
        let names: &[&str] = match self.kind {
            ScenarioKind::GvhdSurvival | ScenarioKind::NullEffect => &["alive", "exposure", "covariate"],
            ScenarioKind::PcpContinuous => &["treated", "pcp_history", "arm"],
            ScenarioKind::DiscreteTree => &["a0", "l1", "a1", "alive"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// Coordinate holding the (absorbing) treatment indicator.
    pub fn treatment_coord(&self) -> usize {
        match self.kind {
            ScenarioKind::GvhdSurvival | ScenarioKind::NullEffect => 1,
            ScenarioKind::PcpContinuous => 0,
            ScenarioKind::DiscreteTree => 2,
        }
    }

    pub fn alive_coord(&self) -> Option<usize> {
        match self.kind {
            ScenarioKind::GvhdSurvival | ScenarioKind::NullEffect => Some(0),
            ScenarioKind::DiscreteTree => Some(3),
            ScenarioKind::PcpContinuous => None,
        }
    }

    /// Confounder coordinates seen by the treatment policy.
    pub fn confounder_coords(&self) -> Vec<usize> {
        match self.kind {
            ScenarioKind::GvhdSurvival | ScenarioKind::NullEffect => vec![2],
            ScenarioKind::PcpContinuous => vec![1, 2],
            ScenarioKind::DiscreteTree => vec![0, 1],
        }
    }

    /// The shift model matching the data-generating process, at `psi`.
    pub fn shift_model(&self, psi: Vec<f64>) -> Result<ShiftModel> {
        match self.kind {
            ScenarioKind::GvhdSurvival | ScenarioKind::NullEffect => Ok(ShiftModel::new(
                ShiftFamily::GvhdMultiplicative { exposure_coord: 1 },
                psi,
                OutcomeKind::Survival,
            )
            .with_alive_coord(0)),
            ScenarioKind::PcpContinuous => Ok(ShiftModel::new(
                ShiftFamily::PcpProphylaxis {
                    treated_coord: 0,
                    pcp_coord: 1,
                    arm_coord: 2,
                },
                psi,
                OutcomeKind::Continuous,
            )),
            ScenarioKind::DiscreteTree => Err(config("the discrete tree has no continuous-time shift model")),
        }
    }

    /// Stable 64-bit FNV-1a hash of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("scenario serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Recursively overlays `top` onto `base` (objects merge, everything else replaces).
pub fn merge_json(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge_json(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t,
    }
}

/// Built-in figure tree: 32,000 patients in units of 100 with the survival
/// fractions of groups a–d.
pub fn build_figure_tree() -> Scenario {
    Scenario {
        kind: ScenarioKind::DiscreteTree,
        true_psi: vec![],
        horizon: 2.0,
        n_decisions: 2,
        baseline: BaselineLaw::UniformBetaMixture {
            lo: 0.0,
            hi: 1.0,
            weight: 1.0,
        },
        policy: TreatmentPolicy {
            intercept: 0.0,
            covariate: 0.0,
            arm: 0.0,
        },
        covariate: CovariateProcess {
            intercept: 0.0,
            treatment: 0.0,
            residual: 0.0,
        },
        quantile_shuffle: false,
    }
}

/// Leaf survival probability of the figure tree, or `None` where no patient
/// followed that branch.
pub fn figure_tree_survival(a0: bool, l1: bool, a1: bool) -> Option<f64> {
    match (a0, l1, a1) {
        (false, true, true) => Some(100.0 / 160.0),
        (true, true, true) => Some(0.5),
        (true, false, true) => Some(0.75),
        (true, false, false) => Some(0.25),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: u64,
    pub path: SamplePath,
    pub y: f64,
    pub died: bool,
    /// Latent draw behind the outcome (`NaN` when loaded from disk).
    pub latent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenario: Scenario,
    pub seed: u64,
    pub subjects: Vec<Subject>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    scenario: Scenario,
    seed: u64,
    n: usize,
    fingerprint: String,
    coordinates: Vec<String>,
    horizon: f64,
    outcome_kind: OutcomeKind,
}

fn subject_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `n` independent subjects; subject `i` draws from its own stream of `seed`.
pub fn simulate_observed(scenario: &Scenario, n: usize, seed: u64) -> Result<Dataset> {
    scenario.validate()?;
    if n == 0 {
        return Err(config("subject count must be at least 1"));
    }
    let subjects = (0..n as u64)
        .into_par_iter()
        .map(|i| simulate_subject(scenario, i, &mut subject_rng(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        scenario: scenario.clone(),
        seed,
        subjects,
    })
}

fn simulate_subject<R: Rng>(sc: &Scenario, id: u64, rng: &mut R) -> Result<Subject> {
    match sc.kind {
        ScenarioKind::GvhdSurvival | ScenarioKind::NullEffect => simulate_gvhd(sc, id, rng),
        ScenarioKind::PcpContinuous => simulate_pcp(sc, id, rng),
        ScenarioKind::DiscreteTree => simulate_tree(sc, id, rng),
    }
}

fn bernoulli<R: Rng>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

fn simulate_gvhd<R: Rng>(sc: &Scenario, id: u64, rng: &mut R) -> Result<Subject> {
    let tau = sc.horizon;
    let psi = sc.true_psi[0];
    let u = sc.baseline.sample(rng);
    let times = sc.decision_times();
    let mut b = PathBuilder::new(tau, vec![1.0, 0.0, 0.0]);
    // `clock` is the untreated time used up so far; death when it reaches `resid0`.
    let (mut clock, mut resid_total) = (0.0, u);
    let mut exposed = false;
    let mut covariate = false;
    let mut t = 0.0;
    let mut y = None;
    for (j, &tj) in times.iter().enumerate() {
        // Covariate update precedes the exposure decision at a decision time.
        let residual = resid_total - clock;
        if !covariate {
            let eta = sc.covariate.intercept + sc.covariate.treatment * exposed as u8 as f64 + sc.covariate.residual * residual;
            if bernoulli(rng, expit(eta)) {
                covariate = true;
                b.set(tj, 2, 1.0)?;
            }
        }
        if !exposed {
            let eta = sc.policy.intercept + sc.policy.covariate * covariate as u8 as f64;
            if bernoulli(rng, expit(eta)) {
                exposed = true;
                b.set(tj, 1, 1.0)?;
                if sc.quantile_shuffle {
                    let rate = sc.shuffle_rate()?;
                    // antithetic quantile of Exp(rate): F^{-1}(1 − F(r))
                    let p = -(-rate * residual).exp_m1();
                    let flipped = -(p.max(f64::MIN_POSITIVE)).ln() / rate;
                    resid_total = clock + flipped;
                }
            }
        }
        let next = times.get(j + 1).copied().unwrap_or(tau);
        let speed = if exposed { psi.exp() } else { 1.0 };
        let left = resid_total - clock;
        if left <= speed * (next - tj) {
            y = Some(tj + left / speed);
            break;
        }
        clock += speed * (next - tj);
        t = next;
    }
    let y = y.unwrap_or(t + (resid_total - clock));
    if y <= tau {
        b.set(y, 0, 0.0)?;
    }
    Ok(Subject {
        id,
        path: b.finish(),
        y,
        died: y <= tau,
        latent: u,
    })
}

fn simulate_pcp<R: Rng>(sc: &Scenario, id: u64, rng: &mut R) -> Result<Subject> {
    let tau = sc.horizon;
    let u = sc.baseline.sample(rng);
    let arm = if bernoulli(rng, 0.5) { 2.0 } else { 1.0 };
    let mid = match sc.baseline {
        BaselineLaw::UniformBetaMixture { lo, hi, .. } => 0.5 * (lo + hi),
        BaselineLaw::TruncatedExponential { rate, .. } => 1.0 / rate,
    };
    let mut b = PathBuilder::new(tau, vec![0.0, 0.0, arm]);
    let (mut treated, mut pcp) = (false, false);
    for &tj in &sc.decision_times() {
        if !treated && !pcp {
            let eta = sc.covariate.intercept + sc.covariate.residual * (u - mid);
            if bernoulli(rng, expit(eta)) {
                pcp = true;
                b.set(tj, 1, 1.0)?;
            }
        }
        if !treated {
            let eta = sc.policy.intercept + sc.policy.covariate * pcp as u8 as f64 + sc.policy.arm * (arm - 1.0);
            if bernoulli(rng, expit(eta)) {
                treated = true;
                b.set(tj, 0, 1.0)?;
            }
        }
    }
    let path = b.finish();
    let model = sc.shift_model(sc.true_psi.clone())?;
    // Y = U + ∫_0^τ D, so that X(t) = Y − ∫_t^τ D reproduces Y^(t).
    let y = u + integrate_shift(&model, &path, 0.0, tau)?;
    Ok(Subject {
        id,
        path,
        y,
        died: false,
        latent: u,
    })
}

fn simulate_tree<R: Rng>(sc: &Scenario, id: u64, rng: &mut R) -> Result<Subject> {
    let a0 = bernoulli(rng, 0.5);
    let l1 = !a0 || bernoulli(rng, 0.5);
    let a1 = l1 || bernoulli(rng, 0.5);
    let v: f64 = rng.random();
    let survived = v < figure_tree_survival(a0, l1, a1).expect("observed branch");
    let a0f = a0 as u8 as f64;
    let mut b = PathBuilder::new(sc.horizon, vec![a0f, 0.0, 0.0, 1.0]);
    b.set(1.0, 1, l1 as u8 as f64)?;
    b.set(1.0, 2, a1 as u8 as f64)?;
    if !survived {
        b.set(2.0, 3, 0.0)?;
    }
    Ok(Subject {
        id,
        path: b.finish(),
        y: survived as u8 as f64,
        died: !survived,
        latent: v,
    })
}

/// `∫_a^b D(s) ds` for a `y`-independent model along `path`.
fn integrate_shift(model: &ShiftModel, path: &SamplePath, a: f64, b: f64) -> Result<f64> {
    let mut knots = vec![a];
    knots.extend(path.jump_times().iter().copied().filter(|&s| s > a && s < b));
    knots.push(b);
    let mut acc = 0.0;
    for w in knots.windows(2) {
        acc += model.shift_with_state(0.0, w[0], path.value_at(w[0])?) * (w[1] - w[0]);
    }
    Ok(acc)
}

/// `Y^(t)`: the outcome had the realized treatment been followed up to `t`
/// and baseline treatment used afterwards, on the subject's latent draw.
pub fn simulate_counterfactual(scenario: &Scenario, subject: &Subject, t: f64) -> Result<f64> {
    let tau = scenario.horizon;
    if !(0.0..=tau).contains(&t) {
        return Err(domain(format!("t = {t} outside [0, {tau}]")));
    }
    let y = subject.y;
    match scenario.kind {
        ScenarioKind::GvhdSurvival | ScenarioKind::NullEffect => {
            if t >= y.min(tau) {
                return Ok(y);
            }
            if scenario.quantile_shuffle {
                return shuffled_counterfactual(scenario, subject, t);
            }
            let psi = scenario.true_psi[0];
            // t + ∫_t^Y e^{ψΓ(s)} ds, exposure acting only before τ
            let stop = y.min(tau);
            let mut knots = vec![t];
            knots.extend(subject.path.jump_times().iter().copied().filter(|&s| s > t && s < stop));
            knots.push(stop);
            let mut acc = t;
            for w in knots.windows(2) {
                let on = subject.path.coordinate_at(w[0], 1)? > 0.5;
                acc += if on { psi.exp() } else { 1.0 } * (w[1] - w[0]);
            }
            Ok(acc + (y - stop))
        }
        ScenarioKind::PcpContinuous => {
            if t == tau {
                return Ok(y);
            }
            let model = scenario.shift_model(scenario.true_psi.clone())?;
            Ok(y - integrate_shift(&model, &subject.path, t, tau)?)
        }
        ScenarioKind::DiscreteTree => {
            if t >= 1.0 {
                return Ok(y);
            }
            let p = &subject.path;
            let a0 = p.coordinate_at(0.0, 0)? > 0.5;
            let l1 = p.coordinate_at(1.0, 1)? > 0.5;
            let prob = figure_tree_survival(a0, l1, false)
                .ok_or_else(|| Error::Model("counterfactual survival not identified on this branch".into()))?;
            if subject.latent.is_nan() {
                return Err(Error::Model("latent draw unavailable".into()));
            }
            Ok((subject.latent < prob) as u8 as f64)
        }
    }
}

/// Counterfactual in the shuffled variant: the untreated world never flips,
/// so `Y^(t) = t + U − c(t)` with `c` the pre-flip clock.
fn shuffled_counterfactual(scenario: &Scenario, subject: &Subject, t: f64) -> Result<f64> {
    if subject.latent.is_nan() {
        return Err(Error::Model("latent draw unavailable".into()));
    }
    let psi = scenario.true_psi[0];
    let onset = subject.path.first_time_where(1, |v| v > 0.5);
    let exposed_before = onset.map_or(0.0, |s| (t - s).max(0.0));
    let clock = t + (psi.exp() - 1.0) * exposed_before;
    Ok(t + subject.latent - clock)
}

impl Dataset {
    pub fn outcome_kind(&self) -> OutcomeKind {
        self.scenario.outcome_kind()
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Writes `paths.csv`, `outcomes.csv` and `dataset.json` into `dir`.
    pub fn write_dir(&self, dir: &Path, overwrite: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        let names = self.scenario.coordinate_names();
        let paths: Vec<(u64, &SamplePath)> = self.subjects.iter().map(|s| (s.id, &s.path)).collect();
        write_paths_csv(create(&dir.join("paths.csv"), overwrite)?, &names, &paths)?;
        let mut w = csv::Writer::from_writer(create(&dir.join("outcomes.csv"), overwrite)?);
        w.write_record(["subject_id", "y", "died"])?;
        for s in &self.subjects {
            w.write_record([s.id.to_string(), s.y.to_string(), (s.died as u8).to_string()])?;
        }
        w.flush()?;
        let meta = DatasetMeta {
            scenario: self.scenario.clone(),
            seed: self.seed,
            n: self.subjects.len(),
            fingerprint: self.scenario.fingerprint(),
            coordinates: names,
            horizon: self.scenario.horizon,
            outcome_kind: self.outcome_kind(),
        };
        let mut f = create(&dir.join("dataset.json"), overwrite)?;
        serde_json::to_writer_pretty(&mut f, &meta)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_reader(fs::File::open(dir.join("dataset.json"))?)?;
        let (_, paths) = read_paths_csv(fs::File::open(dir.join("paths.csv"))?, meta.horizon)?;
        let mut r = csv::Reader::from_reader(fs::File::open(dir.join("outcomes.csv"))?);
        let mut outcomes = std::collections::HashMap::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<&str> { rec.get(i).ok_or_else(|| domain("short outcomes row")) };
            let id: u64 = parse(0)?.parse().map_err(|_| domain("bad subject id"))?;
            let y: f64 = parse(1)?.parse().map_err(|_| domain("bad outcome"))?;
            let died = parse(2)? == "1";
            outcomes.insert(id, (y, died));
        }
        let subjects = paths
            .into_iter()
            .map(|(id, path)| {
                let (y, died) = outcomes
                    .get(&id)
                    .copied()
                    .ok_or_else(|| domain(format!("subject {id} has no outcome")))?;
                Ok(Subject {
                    id,
                    path,
                    y,
                    died,
                    latent: f64::NAN,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if subjects.len() != meta.n {
            return Err(domain(format!("expected {} subjects, found {}", meta.n, subjects.len())));
        }
        Ok(Dataset {
            scenario: meta.scenario,
            seed: meta.seed,
            subjects,
        })
    }

    /// `(subject_id, t, y_cf)` rows for every subject at each of `times`.
    pub fn write_counterfactuals<W: Write>(&self, writer: W, times: &[f64]) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["subject_id", "t", "y_cf"])?;
        for s in &self.subjects {
            for &t in times {
                // Left empty where the counterfactual is not identified.
                let v = match simulate_counterfactual(&self.scenario, s, t) {
                    Ok(v) => v.to_string(),
                    Err(Error::Model(_)) => String::new(),
                    Err(e) => return Err(e),
                };
                w.write_record([s.id.to_string(), t.to_string(), v])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn create(path: &Path, overwrite: bool) -> Result<fs::File> {
    if path.exists() && !overwrite {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("{} exists; pass --overwrite to replace it", path.display()),
        )));
    }
    Ok(fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mimic_ode::{solve_backward, SolverOptions};
    use proptest::prelude::*;

    #[test]
    fn counterfactual_closed_form_example() {
        // Y = 2, exposure from t = 1, ψ = ln 2: Y^(0) = 1 + 2·1 = 3
        let sc = Scenario::builtin(ScenarioKind::GvhdSurvival);
        let path = SamplePath::new(5.0, vec![1.0, 0.0, 0.0], vec![(1.0, vec![1.0, 1.0, 0.0]), (2.0, vec![0.0, 1.0, 0.0])]).unwrap();
        let s = Subject {
            id: 0,
            path,
            y: 2.0,
            died: true,
            latent: f64::NAN,
        };
        assert!((simulate_counterfactual(&sc, &s, 0.0).unwrap() - 3.0).abs() < 1e-15);
        assert_eq!(simulate_counterfactual(&sc, &s, 2.5).unwrap(), 2.0);
    }

    #[test]
    fn same_seed_same_dataset() {
        for kind in [ScenarioKind::GvhdSurvival, ScenarioKind::PcpContinuous, ScenarioKind::DiscreteTree] {
            let sc = Scenario::builtin(kind);
            let a = simulate_observed(&sc, 50, 7).unwrap();
            let b = simulate_observed(&sc, 50, 7).unwrap();
            assert_eq!(a, b);
            let one = simulate_observed(&sc, 1, 7).unwrap();
            assert_eq!(one.subjects[0], a.subjects[0]);
        }
    }

    #[test]
    fn consistency_at_horizon_is_exact() {
        for kind in [ScenarioKind::GvhdSurvival, ScenarioKind::PcpContinuous, ScenarioKind::DiscreteTree] {
            let sc = Scenario::builtin(kind);
            let d = simulate_observed(&sc, 300, 3).unwrap();
            for s in &d.subjects {
                assert_eq!(simulate_counterfactual(&sc, s, sc.horizon).unwrap(), s.y);
            }
        }
    }

    #[test]
    fn null_effect_counterfactuals_equal_outcome() {
        let sc = Scenario::builtin(ScenarioKind::NullEffect);
        let d = simulate_observed(&sc, 200, 1).unwrap();
        for s in &d.subjects {
            for &t in &[0.0, 1.3, 4.9] {
                let v = simulate_counterfactual(&sc, s, t).unwrap();
                assert!((v - s.y).abs() <= 1e-12 * s.y.max(1.0));
            }
        }
    }

    #[test]
    fn latent_counterfactual_matches_generator_clock() {
        // Y^(0) is the latent untreated outcome U
        let sc = Scenario::builtin(ScenarioKind::GvhdSurvival);
        let d = simulate_observed(&sc, 500, 11).unwrap();
        for s in &d.subjects {
            let y0 = simulate_counterfactual(&sc, s, 0.0).unwrap();
            assert!((y0 - s.latent).abs() < 1e-10 * s.latent.max(1.0), "{y0} vs {}", s.latent);
        }
    }

    #[test]
    fn ode_solution_reproduces_counterfactuals() {
        let sc = Scenario::builtin(ScenarioKind::GvhdSurvival);
        let d = simulate_observed(&sc, 40, 5).unwrap();
        let model = sc.shift_model(sc.true_psi.clone()).unwrap();
        let opts = SolverOptions {
            extra_mesh: vec![0.0, 1.0, 2.5, 4.0],
            ..Default::default()
        };
        for s in &d.subjects {
            let traj = solve_backward(&model, &s.path, s.y, &opts).unwrap();
            for &t in &[0.0, 1.0, 2.5, 4.0] {
                let x = traj.value_at(t).unwrap();
                let cf = simulate_counterfactual(&sc, s, t).unwrap();
                assert!((x - cf).abs() < 1e-8 * cf.max(1.0), "t={t}: {x} vs {cf}");
            }
        }
    }

    #[test]
    fn pcp_counterfactual_at_zero_is_latent() {
        let sc = Scenario::builtin(ScenarioKind::PcpContinuous);
        let d = simulate_observed(&sc, 300, 2).unwrap();
        for s in &d.subjects {
            let v = simulate_counterfactual(&sc, s, 0.0).unwrap();
            assert!((v - s.latent).abs() < 1e-12);
            assert!((0.0..=4.0).contains(&s.latent));
        }
        assert!(d.subjects.iter().any(|s| s.path.coordinate_at(1.0, 0).unwrap() > 0.5));
    }

    #[test]
    fn figure_tree_constants() {
        assert_eq!(figure_tree_survival(true, false, false), Some(0.25)); // d: 10 (30)
        assert_eq!(figure_tree_survival(true, false, true), Some(0.75)); // c: 30 (10)
        assert_eq!(figure_tree_survival(false, true, false), None);
    }

    #[test]
    fn tree_group_counts_within_multinomial_band() {
        let d = simulate_observed(&build_figure_tree(), 32_000, 2024).unwrap();
        let mut counts = [0usize; 4]; // d, c, b, a
        for s in &d.subjects {
            let p = &s.path;
            let a0 = p.coordinate_at(0.0, 0).unwrap() > 0.5;
            let l1 = p.coordinate_at(1.0, 1).unwrap() > 0.5;
            let a1 = p.coordinate_at(1.0, 2).unwrap() > 0.5;
            let g = match (a0, l1, a1) {
                (true, false, false) => 0,
                (true, false, true) => 1,
                (true, true, true) => 2,
                (false, true, true) => 3,
                _ => unreachable!(),
            };
            counts[g] += 1;
        }
        let expected: [f64; 4] = [4000.0, 4000.0, 8000.0, 16000.0];
        for (c, e) in counts.iter().zip(expected) {
            let sd = (e * (1.0 - e / 32000.0)).sqrt();
            assert!((*c as f64 - e).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn scenario_json_merges_over_defaults() {
        let sc = Scenario::from_json(r#"{"kind": "gvhd_survival", "policy": {"intercept": -1.0, "covariate": 0.5}}"#).unwrap();
        assert_eq!(sc.policy.intercept, -1.0);
        assert_eq!(sc.horizon, 5.0);
        assert!(Scenario::from_json(r#"{"kind": "null_effect", "true_psi": [0.3]}"#).is_err());
        assert!(Scenario::from_json(r#"{"horizon": 2}"#).is_err());
        assert!(simulate_observed(&sc, 0, 1).is_err());
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = std::env::temp_dir().join(format!("ctsnm-sim-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let d = simulate_observed(&Scenario::builtin(ScenarioKind::GvhdSurvival), 25, 9).unwrap();
        d.write_dir(&dir, false).unwrap();
        assert!(d.write_dir(&dir, false).is_err());
        let back = Dataset::read_dir(&dir).unwrap();
        assert_eq!(back.len(), 25);
        for (a, b) in d.subjects.iter().zip(&back.subjects) {
            assert_eq!(a.path, b.path);
            assert_eq!(a.y, b.y);
            assert_eq!(a.died, b.died);
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    proptest! {
        #[test]
        fn no_effect_after_death(seed in 0u64..500, t in 0.0f64..5.0) {
            let sc = Scenario::builtin(ScenarioKind::GvhdSurvival);
            let d = simulate_observed(&sc, 3, seed).unwrap();
            for s in &d.subjects {
                let v = simulate_counterfactual(&sc, s, t).unwrap();
                if s.y <= t {
                    prop_assert_eq!(v, s.y);
                } else {
                    prop_assert!(v > t);
                }
            }
        }
    }
}
