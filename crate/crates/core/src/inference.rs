//! g-estimation of ψ and the model-free null test.
//!
//! Score: `S(ψ) = Σ_{i,j} (ΔA_ij − p̂_ij)·h(X_ψ,i(t_j))` over the risk set
//! (alive and not yet treated) at each decision time, with `p̂` from a pooled
//! logistic model on the observed past. The variance is a subject-level
//! sandwich that accounts for estimating the nuisance coefficients.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::mimic_ode::{mimic_at_times, SolverOptions};
use crate::numeric::{brent, norm_cdf};
use crate::shift_models::ShiftModel;
use crate::simulate::{expit, Dataset, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    Identity,
    /// `X − mean(X)` over the risk set at each decision time.
    Centered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSpec {
    pub decision_times: Vec<f64>,
    pub treatment_coord: usize,
    pub alive_coord: Option<usize>,
    /// Path coordinates (read at the decision time) used as nuisance features.
    pub feature_coords: Vec<usize>,
    /// Adds the decision time itself as a feature.
    #[serde(default)]
    pub include_time: bool,
    pub test_function: TestFunction,
    #[serde(default)]
    pub solver: SolverOptions,
}

impl ScoreSpec {
    pub fn for_scenario(sc: &Scenario) -> Self {
        ScoreSpec {
            decision_times: sc.decision_times(),
            treatment_coord: sc.treatment_coord(),
            alive_coord: sc.alive_coord(),
            feature_coords: sc.confounder_coords(),
            include_time: true,
            test_function: TestFunction::Centered,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeBreakdown {
    pub t: f64,
    pub at_risk: usize,
    pub score: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreResult {
    pub score: f64,
    pub variance: f64,
    pub z: f64,
    pub per_time: Vec<TimeBreakdown>,
}

#[derive(Debug, Clone)]
struct Row {
    subject: usize,
    time: usize,
    resid: f64,
    weight: f64,
    features: Vec<f64>,
}

/// The ψ-free part of the score: risk set, nuisance fit and its information.
#[derive(Debug, Clone)]
pub struct ScoreProblem<'a> {
    dataset: &'a Dataset,
    spec: ScoreSpec,
    rows: Vec<Row>,
    /// Decision-time indices each subject is at risk at, in `rows` order.
    subject_times: Vec<Vec<usize>>,
    info_inv: DMatrix<f64>,
    pub coefficients: Vec<f64>,
}

fn fit_logistic(x: &DMatrix<f64>, y: &[f64]) -> Result<DVector<f64>> {
    let p = x.ncols();
    let mut beta = DVector::zeros(p);
    for _ in 0..100 {
        let eta = x * &beta;
        let mut grad = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for i in 0..x.nrows() {
            let pi = expit(eta[i]);
            let row = x.row(i).transpose();
            grad += &row * (y[i] - pi);
            info += &row * row.transpose() * (pi * (1.0 - pi));
        }
        let step = info
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Fit("singular information matrix in the treatment model".into()))?
            .solve(&grad);
        beta += &step;
        if beta.iter().any(|b| !b.is_finite() || b.abs() > 50.0) {
            return Err(Error::Fit("treatment model diverged (separation?)".into()));
        }
        if step.amax() < 1e-10 {
            return Ok(beta);
        }
    }
    Err(Error::Fit("treatment model did not converge in 100 Newton steps".into()))
}

impl<'a> ScoreProblem<'a> {
    pub fn new(dataset: &'a Dataset, spec: &ScoreSpec) -> Result<Self> {
        let tau = dataset.scenario.horizon;
        if spec.decision_times.iter().any(|t| !(0.0..=tau).contains(t)) {
            return Err(config("decision times must lie in [0, τ]"));
        }
        let mut rows = Vec::new();
        let mut subject_times = vec![Vec::new(); dataset.len()];
        for (i, s) in dataset.subjects.iter().enumerate() {
            for (j, &t) in spec.decision_times.iter().enumerate() {
                let now = s.path.value_at(t)?;
                let before = s.path.value_before(t)?;
                let alive = spec.alive_coord.is_none_or(|c| now[c] > 0.5) && (s.y > t || !s.died);
                // Nobody is treated before time 0, so a start at 0 is a change.
                let untreated = t == 0.0 || before[spec.treatment_coord] <= 0.5;
                if !alive || !untreated {
                    continue;
                }
                let mut features = vec![1.0];
                features.extend(spec.feature_coords.iter().map(|&c| now[c]));
                if spec.include_time {
                    features.push(t);
                }
                rows.push(Row {
                    subject: i,
                    time: j,
                    resid: (now[spec.treatment_coord] > 0.5) as u8 as f64,
                    weight: 0.0,
                    features,
                });
                subject_times[i].push(j);
            }
        }
        let starts = rows.iter().filter(|r| r.resid > 0.5).count();
        if starts == 0 || starts == rows.len() {
            return Err(Error::Identification(
                "no variation in treatment changes at the decision times".into(),
            ));
        }
        let p = rows[0].features.len();
        let x = DMatrix::from_fn(rows.len(), p, |i, k| rows[i].features[k]);
        let y: Vec<f64> = rows.iter().map(|r| r.resid).collect();
        let beta = fit_logistic(&x, &y)?;
        let mut info = DMatrix::zeros(p, p);
        for (i, r) in rows.iter_mut().enumerate() {
            let pi = expit((x.row(i) * &beta)[0]);
            r.resid -= pi;
            r.weight = pi * (1.0 - pi);
            let row = x.row(i).transpose();
            info += &row * row.transpose() * r.weight;
        }
        let info_inv = info
            .try_inverse()
            .ok_or_else(|| Error::Fit("singular information matrix".into()))?;
        Ok(ScoreProblem {
            dataset,
            spec: spec.clone(),
            rows,
            subject_times,
            info_inv,
            coefficients: beta.iter().copied().collect(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Score from raw test-function inputs, one per risk-set row.
    pub fn evaluate(&self, values: &[f64]) -> Result<ScoreResult> {
        let n_sub = self.dataset.len();
        if n_sub < 2 {
            return Err(Error::VarianceDegenerate(format!("{n_sub} subject(s); need at least 2")));
        }
        let nt = self.spec.decision_times.len();
        let mut h = values.to_vec();
        if self.spec.test_function == TestFunction::Centered {
            let mut sum = vec![0.0; nt];
            let mut cnt = vec![0usize; nt];
            for (r, v) in self.rows.iter().zip(values) {
                sum[r.time] += v;
                cnt[r.time] += 1;
            }
            for (r, v) in self.rows.iter().zip(h.iter_mut()) {
                *v -= sum[r.time] / cnt[r.time] as f64;
            }
        }
        let p = self.info_inv.nrows();
        let mut cross = DVector::zeros(p);
        for (r, v) in self.rows.iter().zip(&h) {
            cross += DVector::from_column_slice(&r.features) * (r.weight * v);
        }
        let gamma = &self.info_inv * cross;
        let mut per_subject = vec![0.0; n_sub];
        let mut per_time_s = vec![0.0; nt];
        let mut per_time_var = vec![0.0; nt];
        let mut at_risk = vec![0usize; nt];
        let mut score = 0.0;
        for (r, v) in self.rows.iter().zip(&h) {
            let fitted: f64 = r.features.iter().zip(gamma.iter()).map(|(a, b)| a * b).sum();
            let u = r.resid * (v - fitted);
            per_subject[r.subject] += u;
            per_time_s[r.time] += r.resid * v;
            per_time_var[r.time] += u * u;
            at_risk[r.time] += 1;
            score += r.resid * v;
        }
        let variance: f64 = per_subject.iter().map(|u| u * u).sum();
        if !(variance > 0.0) {
            return Err(Error::VarianceDegenerate("score variance is zero".into()));
        }
        let per_time = (0..nt)
            .map(|j| TimeBreakdown {
                t: self.spec.decision_times[j],
                at_risk: at_risk[j],
                score: per_time_s[j],
                variance: per_time_var[j],
            })
            .collect();
        Ok(ScoreResult {
            score,
            variance,
            z: score / variance.sqrt(),
            per_time,
        })
    }

    /// Score at the model's ψ, with `X_ψ` from the mimicking equation.
    pub fn at_model(&self, model: &ShiftModel) -> Result<ScoreResult> {
        let times = &self.spec.decision_times;
        let per_subject: Vec<Vec<f64>> = self
            .dataset
            .subjects
            .par_iter()
            .zip(self.subject_times.par_iter())
            .map(|(s, idx)| {
                if idx.is_empty() {
                    return Ok(Vec::new());
                }
                let ts: Vec<f64> = idx.iter().map(|&j| times[j]).collect();
                mimic_at_times(model, &s.path, s.y, &ts, &self.spec.solver)
            })
            .collect::<Result<_>>()?;
        let mut cursor = vec![0usize; per_subject.len()];
        let values: Vec<f64> = self
            .rows
            .iter()
            .map(|r| {
                let v = per_subject[r.subject][cursor[r.subject]];
                cursor[r.subject] += 1;
                v
            })
            .collect();
        self.evaluate(&values)
    }

    /// Score with `X ≡ Y`, which needs no shift model.
    pub fn at_outcome(&self) -> Result<ScoreResult> {
        let values: Vec<f64> = self.rows.iter().map(|r| self.dataset.subjects[r.subject].y).collect();
        self.evaluate(&values)
    }
}

pub fn score_statistic(dataset: &Dataset, model: &ShiftModel, spec: &ScoreSpec) -> Result<ScoreResult> {
    ScoreProblem::new(dataset, spec)?.at_model(model)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NullTest {
    pub z: f64,
    pub p_value: f64,
    pub score: ScoreResult,
}

/// Two-sided test of `D ≡ 0` (so `X ≡ Y`): does `Y` predict treatment starts
/// given the observed past?
pub fn test_no_effect(dataset: &Dataset, spec: &ScoreSpec) -> Result<NullTest> {
    let score = ScoreProblem::new(dataset, spec)?.at_outcome()?;
    Ok(NullTest {
        z: score.z,
        p_value: 2.0 * norm_cdf(-score.z.abs()),
        score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub lo: f64,
    pub hi: f64,
    pub grid_points: usize,
    pub tol: f64,
    /// Component of ψ searched over; the others stay at `base`.
    #[serde(default)]
    pub index: usize,
    #[serde(default)]
    pub base: Vec<f64>,
    #[serde(default = "default_level")]
    pub z_crit: f64,
}

fn default_level() -> f64 {
    1.959_963_984_540_054
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            lo: -2.0,
            hi: 3.0,
            grid_points: 41,
            tol: 1e-6,
            index: 0,
            base: Vec::new(),
            z_crit: default_level(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimationResult {
    pub psi_hat: Vec<f64>,
    /// Test-inversion interval for the searched component; `None` means the
    /// interval reaches the search bound.
    pub ci: (Option<f64>, Option<f64>),
    pub score_curve: Vec<(f64, f64)>,
    /// `true` when ψ̂ is a root of the standardized score; `false` when it is
    /// an interior minimum of `|z|` without a sign change.
    pub root_found: bool,
}

impl EstimationResult {
    pub fn write_curve_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["psi", "z"])?;
        for (p, z) in &self.score_curve {
            w.write_record([p.to_string(), z.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Grid scan of the standardized score, Brent refinement of the root nearest
/// the smallest `|z|`, and a confidence set `{ψ : |z(ψ)| < z_crit}`.
pub fn estimate_psi(
    dataset: &Dataset,
    template: &ShiftModel,
    spec: &ScoreSpec,
    search: &SearchOptions,
) -> Result<EstimationResult> {
    if !(search.lo < search.hi) || search.grid_points < 3 {
        return Err(config("search needs lo < hi and at least 3 grid points"));
    }
    let dim = template.family.psi_dim();
    let base = if search.base.is_empty() {
        vec![0.0; dim]
    } else {
        search.base.clone()
    };
    if base.len() != dim || search.index >= dim {
        return Err(config(format!("psi has {dim} components; index {} invalid", search.index)));
    }
    let problem = ScoreProblem::new(dataset, spec)?;
    let z_at = |v: f64| -> Result<f64> {
        let mut psi = base.clone();
        psi[search.index] = v;
        Ok(problem.at_model(&template.with_psi(psi))?.z)
    };
    let grid: Vec<f64> = (0..search.grid_points)
        .map(|i| search.lo + (search.hi - search.lo) * i as f64 / (search.grid_points - 1) as f64)
        .collect();
    let zs = grid.iter().map(|&v| z_at(v)).collect::<Result<Vec<f64>>>()?;
    let best = (0..zs.len()).min_by(|&a, &b| zs[a].abs().total_cmp(&zs[b].abs())).unwrap();
    let brackets: Vec<usize> = (0..zs.len() - 1).filter(|&i| zs[i] * zs[i + 1] <= 0.0).collect();
    let mut root_found = true;
    let psi_hat = match brackets.iter().min_by_key(|&&i| i.abs_diff(best).min((i + 1).abs_diff(best))) {
        Some(&i) => {
            let f = |v: f64| z_at(v).unwrap_or(f64::NAN);
            brent(f, grid[i], grid[i + 1], search.tol, 200).ok_or_else(|| Error::NonIdentification("root refinement failed".into()))?
        }
        None => {
            if zs[best].abs() >= search.z_crit {
                return Err(Error::NonIdentification(format!(
                    "standardized score never changes sign on [{}, {}] and min |z| = {:.3}",
                    search.lo, search.hi, zs[best].abs()
                )));
            }
            root_found = false;
            grid[best]
        }
    };
    let inside = |v: f64| -> Result<f64> { Ok(z_at(v)?.abs() - search.z_crit) };
    let edge = |dir: isize| -> Result<Option<f64>> {
        let start = grid.partition_point(|&g| g < psi_hat);
        let mut inner = psi_hat;
        let mut k = if dir < 0 { start as isize - 1 } else { start as isize };
        while k >= 0 && (k as usize) < grid.len() {
            let g = grid[k as usize];
            if (g - psi_hat) * dir as f64 > 0.0 && zs[k as usize].abs() >= search.z_crit {
                let f = |v: f64| inside(v).unwrap_or(f64::NAN);
                return Ok(brent(f, inner, g, search.tol, 200));
            }
            if (g - psi_hat) * dir as f64 > 0.0 {
                inner = g;
            }
            k += dir;
        }
        Ok(None)
    };
    let ci = (edge(-1)?, edge(1)?);
    let mut psi = base;
    psi[search.index] = psi_hat;
    Ok(EstimationResult {
        psi_hat: psi,
        ci,
        score_curve: grid.into_iter().zip(zs).collect(),
        root_found,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{simulate_observed, ScenarioKind, Subject};
    use crate::paths::SamplePath;

    fn gvhd(n: usize, seed: u64) -> Dataset {
        simulate_observed(&Scenario::builtin(ScenarioKind::GvhdSurvival), n, seed).unwrap()
    }

    #[test]
    fn score_is_permutation_invariant() {
        let d = gvhd(400, 3);
        let spec = ScoreSpec::for_scenario(&d.scenario);
        let model = d.scenario.shift_model(vec![0.4]).unwrap();
        let a = score_statistic(&d, &model, &spec).unwrap();
        let mut shuffled = d.clone();
        shuffled.subjects.reverse();
        for (k, s) in shuffled.subjects.iter_mut().enumerate() {
            s.id = 10_000 + k as u64;
        }
        let b = score_statistic(&shuffled, &model, &spec).unwrap();
        assert!((a.z - b.z).abs() < 1e-9 * a.z.abs().max(1.0));
    }

    #[test]
    fn null_test_uses_outcome_only() {
        // with psi = 0 the model-based score coincides with the null test
        let d = gvhd(300, 5);
        let spec = ScoreSpec::for_scenario(&d.scenario);
        let zero = d.scenario.shift_model(vec![0.0]).unwrap();
        let a = score_statistic(&d, &zero, &spec).unwrap();
        let b = test_no_effect(&d, &spec).unwrap();
        assert!((a.z - b.z).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&b.p_value));
    }

    #[test]
    fn identical_treatment_paths_are_not_identified() {
        let mut d = gvhd(50, 1);
        for s in &mut d.subjects {
            s.path = SamplePath::constant(5.0, vec![1.0, 0.0, 0.0]).unwrap();
            s.died = false;
            s.y = 6.0;
        }
        let spec = ScoreSpec::for_scenario(&d.scenario);
        assert!(matches!(test_no_effect(&d, &spec), Err(Error::Identification(_))));
        let model = d.scenario.shift_model(vec![0.0]).unwrap();
        assert!(matches!(
            estimate_psi(&d, &model, &spec, &SearchOptions::default()),
            Err(Error::Identification(_))
        ));
    }

    #[test]
    fn single_subject_is_variance_degenerate() {
        let sc = Scenario::builtin(ScenarioKind::GvhdSurvival);
        let d = Dataset {
            scenario: sc.clone(),
            seed: 0,
            subjects: vec![Subject {
                id: 0,
                path: SamplePath::new(5.0, vec![1.0, 0.0, 0.0], vec![(1.0, vec![1.0, 1.0, 0.0])]).unwrap(),
                y: 8.0,
                died: false,
                latent: f64::NAN,
            }],
        };
        let spec = ScoreSpec {
            include_time: false,
            feature_coords: vec![],
            ..ScoreSpec::for_scenario(&sc)
        };
        assert!(matches!(test_no_effect(&d, &spec), Err(Error::VarianceDegenerate(_))));
    }

    #[test]
    fn estimate_brackets_truth_and_ci_contains_estimate() {
        let d = gvhd(2000, 17);
        let spec = ScoreSpec::for_scenario(&d.scenario);
        let model = d.scenario.shift_model(vec![0.0]).unwrap();
        let r = estimate_psi(&d, &model, &spec, &SearchOptions::default()).unwrap();
        let psi = r.psi_hat[0];
        assert!(r.root_found);
        assert!((psi - std::f64::consts::LN_2).abs() < 0.4, "{psi}");
        let (lo, hi) = (r.ci.0.unwrap(), r.ci.1.unwrap());
        assert!(lo <= psi && psi <= hi);
    }

    #[test]
    fn coin_flip_treatment_gives_mean_zero_score() {
        // Treatment starts are fair-ish coins that nothing else responds to
        // (no effect, covariate ignores treatment), and the shift model reads
        // the covariate coordinate, so X_psi is independent of the coin.
        let mut sc = Scenario::builtin(ScenarioKind::NullEffect);
        sc.policy.covariate = 0.0;
        sc.covariate.treatment = 0.0;
        let spec = ScoreSpec::for_scenario(&sc);
        let mut big = 0;
        for seed in 0..100 {
            let d = simulate_observed(&sc, 300, 100 + seed).unwrap();
            for psi in [-1.0, 0.5, 1.5] {
                let model = ShiftModel::new(
                    crate::shift_models::ShiftFamily::GvhdMultiplicative { exposure_coord: 2 },
                    vec![psi],
                    crate::shift_models::OutcomeKind::Survival,
                )
                .with_alive_coord(0);
                if score_statistic(&d, &model, &spec).unwrap().z.abs() > 3.0 {
                    big += 1;
                }
            }
        }
        assert!(big <= 3, "{big} of 300 statistics had |z| > 3");
    }
}
