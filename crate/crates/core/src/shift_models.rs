//! Parametric families for the infinitesimal shift function `D_ψ(y, t; Z̄_t)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::paths::SamplePath;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Continuous,
    Survival,
}

fn default_window() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ShiftFamily {
    /// `(1 − e^ψ)·1{exposure active at t}`.
    GvhdMultiplicative { exposure_coord: usize },
    /// `(1 − e^{ψ1 + ψ2·P(t) + ψ3·R})·1{treated at t}`.
    PcpProphylaxis {
        treated_coord: usize,
        pcp_coord: usize,
        arm_coord: usize,
    },
    /// Zero when `y − t > window`, otherwise `(1 − e^ψ)·1{treated at t}`.
    DelayedEffect {
        treated_coord: usize,
        #[serde(default = "default_window")]
        window: f64,
    },
    /// Bilinear interpolation over `(y, t)` knots, one table per covariate bin
    /// (`floor` of the covariate value). Values outside the knots are clamped.
    UserTabulated {
        y_knots: Vec<f64>,
        t_knots: Vec<f64>,
        covariate_coord: Option<usize>,
        /// `tables[bin][i][j]` is `D(y_knots[i], t_knots[j])`.
        tables: BTreeMap<i64, Vec<Vec<f64>>>,
    },
}

impl ShiftFamily {
    pub fn psi_dim(&self) -> usize {
        match self {
            ShiftFamily::GvhdMultiplicative { .. } | ShiftFamily::DelayedEffect { .. } => 1,
            ShiftFamily::PcpProphylaxis { .. } => 3,
            ShiftFamily::UserTabulated { .. } => 0,
        }
    }

    fn coords(&self) -> Vec<usize> {
        match self {
            ShiftFamily::GvhdMultiplicative { exposure_coord } => vec![*exposure_coord],
            ShiftFamily::PcpProphylaxis {
                treated_coord,
                pcp_coord,
                arm_coord,
            } => vec![*treated_coord, *pcp_coord, *arm_coord],
            ShiftFamily::DelayedEffect { treated_coord, .. } => vec![*treated_coord],
            ShiftFamily::UserTabulated { covariate_coord, .. } => covariate_coord.iter().copied().collect(),
        }
    }

    /// Times where `D` has a kink or jump in `t` regardless of the path.
    // TODO: y-knot kinks of tabulated tables are not located; add them as
    // switching surfaces `x = y_k` in the solver's event handling.
    pub fn time_breaks(&self) -> Vec<f64> {
        match self {
            ShiftFamily::UserTabulated { t_knots, .. } => t_knots.clone(),
            _ => Vec::new(),
        }
    }

    /// True when `D` does not depend on `y` (ignoring the survival guard).
    pub fn is_y_independent(&self) -> bool {
        matches!(
            self,
            ShiftFamily::GvhdMultiplicative { .. } | ShiftFamily::PcpProphylaxis { .. }
        )
    }
}

/// Bounds on the conditional laws used for error bounds and audits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularityBudget {
    pub eps: f64,
    pub c1: f64,
    pub c2: f64,
    pub l1: f64,
    pub l2: f64,
    #[serde(default)]
    pub y1: Option<f64>,
    pub y2: f64,
}

impl RegularityBudget {
    pub fn validate(&self, kind: OutcomeKind, horizon: f64) -> Result<()> {
        let nonneg = [self.c1, self.c2, self.l1, self.l2];
        if !(self.eps > 0.0) || nonneg.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(config("budget requires eps > 0 and finite non-negative c1, c2, l1, l2"));
        }
        match kind {
            OutcomeKind::Continuous => match self.y1 {
                Some(y1) if y1 < self.y2 => Ok(()),
                _ => Err(config("continuous budget requires y1 < y2")),
            },
            OutcomeKind::Survival if self.y2 >= horizon => Ok(()),
            OutcomeKind::Survival => Err(config(format!("survival budget requires y2 >= horizon {horizon}"))),
        }
    }
}

/// `C = L2/ε + C2·L1/ε²`.
pub fn gronwall_constant(budget: &RegularityBudget) -> f64 {
    budget.l2 / budget.eps + budget.c2 * budget.l1 / (budget.eps * budget.eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftModel {
    pub family: ShiftFamily,
    pub psi: Vec<f64>,
    pub outcome_kind: OutcomeKind,
    #[serde(default)]
    pub budget: Option<RegularityBudget>,
    /// Alive indicator coordinate (survival kind only).
    #[serde(default)]
    pub alive_coord: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagonalLimit {
    pub value: f64,
    /// Set when the limit exceeds 1, which no valid survival model allows.
    pub exceeds_one: bool,
}

impl ShiftModel {
    pub fn new(family: ShiftFamily, psi: Vec<f64>, outcome_kind: OutcomeKind) -> Self {
        Self {
            family,
            psi,
            outcome_kind,
            budget: None,
            alive_coord: None,
        }
    }

    pub fn with_alive_coord(mut self, coord: usize) -> Self {
        self.alive_coord = Some(coord);
        self
    }

    pub fn with_psi(&self, psi: Vec<f64>) -> Self {
        Self { psi, ..self.clone() }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: ShiftModel = serde_json::from_str(s).map_err(|e| config(format!("model spec: {e}")))?;
        if m.psi.len() != m.family.psi_dim() {
            return Err(config(format!(
                "family expects {} psi components, got {}",
                m.family.psi_dim(),
                m.psi.len()
            )));
        }
        Ok(m)
    }

    /// Checks coordinate indices and parameter dimension against a path of
    /// dimension `dim`.
    pub fn check_compatible(&self, dim: usize) -> Result<()> {
        if self.psi.len() != self.family.psi_dim() {
            return Err(config(format!(
                "family expects {} psi components, got {}",
                self.family.psi_dim(),
                self.psi.len()
            )));
        }
        let mut coords = self.family.coords();
        if let Some(a) = self.alive_coord {
            coords.push(a);
        }
        if let Some(&bad) = coords.iter().find(|&&c| c >= dim) {
            return Err(config(format!("model uses coordinate {bad} but path has dimension {dim}")));
        }
        if let ShiftFamily::UserTabulated {
            y_knots,
            t_knots,
            tables,
            ..
        } = &self.family
        {
            let sorted = |k: &[f64]| k.len() >= 2 && k.windows(2).all(|w| w[0] < w[1]);
            if !sorted(y_knots) || !sorted(t_knots) {
                return Err(config("tabulated knots must be strictly increasing with >= 2 entries"));
            }
            let shape_ok = tables
                .values()
                .all(|tab| tab.len() == y_knots.len() && tab.iter().all(|r| r.len() == t_knots.len()));
            if tables.is_empty() || !shape_ok {
                return Err(config("tabulated shift tables must be y_knots × t_knots"));
            }
        }
        Ok(())
    }

    fn alive(&self, state: &[f64]) -> bool {
        match (self.outcome_kind, self.alive_coord) {
            (OutcomeKind::Survival, Some(c)) => state[c] > 0.5,
            _ => true,
        }
    }

    /// `D` before any survival guard.
    fn family_value(&self, y: f64, t: f64, state: &[f64]) -> f64 {
        let on = |c: usize| state[c] > 0.5;
        match &self.family {
            ShiftFamily::GvhdMultiplicative { exposure_coord } => {
                if on(*exposure_coord) {
                    1.0 - self.psi[0].exp()
                } else {
                    0.0
                }
            }
            ShiftFamily::PcpProphylaxis {
                treated_coord,
                pcp_coord,
                arm_coord,
            } => {
                if on(*treated_coord) {
                    let eta = self.psi[0] + self.psi[1] * state[*pcp_coord] + self.psi[2] * state[*arm_coord];
                    1.0 - eta.exp()
                } else {
                    0.0
                }
            }
            ShiftFamily::DelayedEffect { treated_coord, window } => {
                if y - t > *window || !on(*treated_coord) {
                    0.0
                } else {
                    1.0 - self.psi[0].exp()
                }
            }
            ShiftFamily::UserTabulated {
                y_knots,
                t_knots,
                covariate_coord,
                tables,
            } => {
                let key = covariate_coord.map_or(0, |c| state[c].floor() as i64);
                match tables.get(&key) {
                    Some(tab) => bilinear(y_knots, t_knots, tab, y, t),
                    None => 0.0,
                }
            }
        }
    }

    /// Offset `w` of a switching surface `y − t = w` across which `D` jumps.
    pub fn switch_offset(&self) -> Option<f64> {
        match &self.family {
            ShiftFamily::DelayedEffect { window, .. } => Some(*window),
            _ => None,
        }
    }

    /// `D(y, t)` given the path state that applies at `t`. Callers integrating
    /// over `[t1, t2]` pass the state at `t1` throughout.
    pub fn shift_with_state(&self, y: f64, t: f64, state: &[f64]) -> f64 {
        if self.outcome_kind == OutcomeKind::Survival {
            if !self.alive(state) || y < t {
                return 0.0;
            }
            if y == t {
                return self.diagonal_limit_with_state(t, state).value;
            }
        }
        self.family_value(y, t, state)
    }

    pub fn shift(&self, y: f64, t: f64, path: &SamplePath) -> Result<f64> {
        self.check_compatible(path.dim())?;
        Ok(self.shift_with_state(y, t, path.value_at(t)?))
    }

    pub(crate) fn diagonal_limit_with_state(&self, t: f64, state: &[f64]) -> DiagonalLimit {
        let value = match &self.family {
            ShiftFamily::GvhdMultiplicative { .. }
            | ShiftFamily::PcpProphylaxis { .. }
            | ShiftFamily::DelayedEffect { .. } => self.family_value(t, t, state),
            ShiftFamily::UserTabulated { .. } => {
                let seq: Vec<f64> = (10..=20)
                    .map(|j| self.family_value(t + 2f64.powi(-j), t, state))
                    .collect();
                richardson_to_zero(&seq)
            }
        };
        let exceeds_one = value > 1.0;
        if exceeds_one {
            log::warn!("diagonal limit {value} exceeds 1 at t = {t}: survival model is misspecified");
        }
        DiagonalLimit { value, exceeds_one }
    }

    /// `lim_{y↓t} D(y, t; Z̄_t)` for a subject alive at `t`.
    pub fn survival_limit_at_diagonal(&self, t: f64, path: &SamplePath) -> Result<DiagonalLimit> {
        if self.outcome_kind != OutcomeKind::Survival {
            return Err(domain("diagonal limit is only defined for survival models"));
        }
        self.check_compatible(path.dim())?;
        let state = path.value_at(t)?;
        if !self.alive(state) {
            return Err(domain(format!("subject is not alive at t = {t}")));
        }
        Ok(self.diagonal_limit_with_state(t, state))
    }

    /// Closed-form `X(t)` for families whose `D` does not depend on `y`:
    /// `X(t) = Y − ∫_t^{min(Y, τ)} D(s) ds` (survival) or `Y − ∫_t^τ D(s) ds`.
    pub fn analytic_x(&self, path: &SamplePath, y: f64, t: f64) -> Result<Option<f64>> {
        if !self.family.is_y_independent() {
            return Ok(None);
        }
        self.check_compatible(path.dim())?;
        let tau = path.horizon();
        let upper = match self.outcome_kind {
            OutcomeKind::Survival => y.min(tau),
            OutcomeKind::Continuous => tau,
        };
        if t >= upper {
            return Ok(Some(y));
        }
        let mut knots = vec![t];
        knots.extend(path.jump_times().iter().copied().filter(|&s| s > t && s < upper));
        knots.push(upper);
        let mut integral = 0.0;
        for w in knots.windows(2) {
            let state = path.value_at(w[0])?;
            // D is y-independent, so any y > s avoids the guards.
            let d = if self.alive(state) {
                self.family_value(f64::INFINITY, w[0], state)
            } else {
                0.0
            };
            integral += d * (w[1] - w[0]);
        }
        Ok(Some(y - integral))
    }
}

fn bracket(knots: &[f64], x: f64) -> (usize, f64) {
    let x = x.clamp(knots[0], knots[knots.len() - 1]);
    let i = knots.partition_point(|&k| k <= x).clamp(1, knots.len() - 1) - 1;
    (i, (x - knots[i]) / (knots[i + 1] - knots[i]))
}

fn bilinear(yk: &[f64], tk: &[f64], tab: &[Vec<f64>], y: f64, t: f64) -> f64 {
    let (i, a) = bracket(yk, y);
    let (j, b) = bracket(tk, t);
    let lo = tab[i][j] * (1.0 - b) + tab[i][j + 1] * b;
    let hi = tab[i + 1][j] * (1.0 - b) + tab[i + 1][j + 1] * b;
    lo * (1.0 - a) + hi * a
}

/// Two rounds of Richardson extrapolation on values at offsets that halve at
/// each step, returning the estimate of the limit at offset zero.
fn richardson_to_zero(seq: &[f64]) -> f64 {
    let n = seq.len();
    if n < 3 {
        return *seq.last().unwrap_or(&0.0);
    }
    let r1: Vec<f64> = seq.windows(2).map(|w| 2.0 * w[1] - w[0]).collect();
    let r2: Vec<f64> = r1.windows(2).map(|w| (4.0 * w[1] - w[0]) / 3.0).collect();
    *r2.last().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gvhd(psi: f64, kind: OutcomeKind) -> ShiftModel {
        ShiftModel::new(ShiftFamily::GvhdMultiplicative { exposure_coord: 1 }, vec![psi], kind).with_alive_coord(0)
    }

    fn exposed_path() -> SamplePath {
        SamplePath::new(2.0, vec![1.0, 0.0], vec![(0.5, vec![1.0, 1.0]), (1.5, vec![0.0, 1.0])]).unwrap()
    }

    #[test]
    fn gvhd_ln2_active_is_minus_one() {
        let m = gvhd(2f64.ln(), OutcomeKind::Survival);
        let d = m.shift(1.8, 1.0, &exposed_path()).unwrap();
        assert!((d + 1.0).abs() < 1e-15);
        assert_eq!(m.shift(1.8, 0.2, &exposed_path()).unwrap(), 0.0);
    }

    #[test]
    fn zero_psi_means_zero_shift() {
        let p = exposed_path();
        let fams = [
            ShiftFamily::GvhdMultiplicative { exposure_coord: 1 },
            ShiftFamily::DelayedEffect {
                treated_coord: 1,
                window: 5.0,
            },
        ];
        for f in fams {
            let m = ShiftModel::new(f, vec![0.0], OutcomeKind::Continuous);
            for t in [0.0, 0.7, 1.2] {
                assert_eq!(m.shift(3.0, t, &p).unwrap(), 0.0);
            }
        }
        let pcp = ShiftModel::new(
            ShiftFamily::PcpProphylaxis {
                treated_coord: 1,
                pcp_coord: 0,
                arm_coord: 0,
            },
            vec![0.0; 3],
            OutcomeKind::Continuous,
        );
        assert_eq!(pcp.shift(3.0, 1.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn delayed_effect_vanishes_far_from_outcome() {
        let p = SamplePath::constant(10.0, vec![1.0]).unwrap();
        let m = ShiftModel::new(
            ShiftFamily::DelayedEffect {
                treated_coord: 0,
                window: 5.0,
            },
            vec![0.5],
            OutcomeKind::Continuous,
        );
        assert_eq!(m.shift(10.0, 2.0, &p).unwrap(), 0.0);
        assert!((m.shift(6.0, 2.0, &p).unwrap() - (1.0 - 0.5f64.exp())).abs() < 1e-15);
    }

    #[test]
    fn pcp_family_value() {
        // treated, P = 1, R = 2
        let p = SamplePath::constant(1.0, vec![1.0, 1.0, 2.0]).unwrap();
        let m = ShiftModel::new(
            ShiftFamily::PcpProphylaxis {
                treated_coord: 0,
                pcp_coord: 1,
                arm_coord: 2,
            },
            vec![0.1, -0.2, 0.3],
            OutcomeKind::Continuous,
        );
        let expected = 1.0 - (0.1f64 - 0.2 + 0.6).exp();
        assert!((m.shift(0.0, 0.5, &p).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn coordinate_mismatch_is_config_error() {
        let m = gvhd(0.3, OutcomeKind::Survival);
        let p = SamplePath::constant(1.0, vec![1.0]).unwrap();
        assert!(matches!(m.shift(1.0, 0.5, &p), Err(crate::Error::Config(_))));
    }

    #[test]
    fn diagonal_limit_closed_form() {
        let m = gvhd(-0.7, OutcomeKind::Survival);
        let lim = m.survival_limit_at_diagonal(1.0, &exposed_path()).unwrap();
        assert!((lim.value - (1.0 - (-0.7f64).exp())).abs() < 1e-15);
        assert!(lim.value >= 0.0 && lim.value < 1.0 && !lim.exceeds_one);
        let zero = gvhd(0.0, OutcomeKind::Survival);
        assert_eq!(zero.survival_limit_at_diagonal(1.0, &exposed_path()).unwrap().value, 0.0);
    }

    #[test]
    fn diagonal_limit_rejects_continuous_kind() {
        let m = gvhd(0.2, OutcomeKind::Continuous);
        assert!(matches!(
            m.survival_limit_at_diagonal(1.0, &exposed_path()),
            Err(crate::Error::Domain(_))
        ));
    }

    fn tabulated(f: impl Fn(f64, f64) -> f64) -> ShiftModel {
        let yk: Vec<f64> = (0..=40).map(|i| i as f64 * 0.05).collect();
        let tk: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
        let tab = yk.iter().map(|&y| tk.iter().map(|&t| f(y, t)).collect()).collect();
        let mut tables = BTreeMap::new();
        tables.insert(0, tab);
        ShiftModel::new(
            ShiftFamily::UserTabulated {
                y_knots: yk,
                t_knots: tk,
                covariate_coord: None,
                tables,
            },
            vec![],
            OutcomeKind::Survival,
        )
        .with_alive_coord(0)
    }

    #[test]
    fn tabulated_diagonal_limit_by_extrapolation() {
        // Linear in (y, t), so bilinear interpolation is exact and the
        // extrapolated limit is D(t, t).
        let m = tabulated(|y, t| 0.3 + 0.2 * y - 0.1 * t);
        let p = SamplePath::constant(2.0, vec![1.0]).unwrap();
        let lim = m.survival_limit_at_diagonal(0.55, &p).unwrap();
        assert!((lim.value - (0.3 + 0.2 * 0.55 - 0.1 * 0.55)).abs() < 1e-9);
    }

    #[test]
    fn tabulated_limit_above_one_is_flagged_not_error() {
        let m = tabulated(|_, _| 1.5);
        let p = SamplePath::constant(2.0, vec![1.0]).unwrap();
        let lim = m.survival_limit_at_diagonal(0.5, &p).unwrap();
        assert!(lim.exceeds_one);
    }

    #[test]
    fn gronwall_constant_values() {
        let b = |eps, l1, l2, c2| RegularityBudget {
            eps,
            c1: 1.0,
            c2,
            l1,
            l2,
            y1: Some(0.0),
            y2: 1.0,
        };
        assert!((gronwall_constant(&b(0.1, 1.0, 1.0, 1.0)) - 110.0).abs() < 1e-9);
        assert_eq!(gronwall_constant(&b(1.0, 0.0, 0.0, 123.0)), 0.0);
        assert!((gronwall_constant(&b(0.5, 2.0, 3.0, 1.0)) - 14.0).abs() < 1e-12);
    }

    #[test]
    fn budget_validation() {
        let mut b = RegularityBudget {
            eps: 0.1,
            c1: 1.0,
            c2: 1.0,
            l1: 1.0,
            l2: 1.0,
            y1: None,
            y2: 0.5,
        };
        assert!(b.validate(OutcomeKind::Survival, 1.0).is_err());
        b.y2 = 2.0;
        assert!(b.validate(OutcomeKind::Survival, 1.0).is_ok());
        assert!(b.validate(OutcomeKind::Continuous, 1.0).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let m = gvhd(0.5, OutcomeKind::Survival);
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(ShiftModel::from_json(&s).unwrap(), m);
        let bad = s.replace("[0.5]", "[0.5,1.0]");
        assert!(ShiftModel::from_json(&bad).is_err());
    }

    #[test]
    fn analytic_x_matches_example() {
        // Exposed throughout [0, 1], psi = ln 2, Y = 1 gives X(0) = 2.
        let p = SamplePath::constant(1.0, vec![1.0, 1.0]).unwrap();
        let m = gvhd(2f64.ln(), OutcomeKind::Survival);
        assert!((m.analytic_x(&p, 1.0, 0.0).unwrap().unwrap() - 2.0).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn survival_guard(psi in -1.5f64..1.5, t in 0.0f64..2.0, dy in 0.0f64..2.0, exposed in any::<bool>()) {
            let m = gvhd(psi, OutcomeKind::Survival);
            let e = if exposed { 1.0 } else { 0.0 };
            prop_assert_eq!(m.shift_with_state(t - dy - 1e-9, t, &[1.0, e]), 0.0);
            prop_assert_eq!(m.shift_with_state(t + dy, t, &[0.0, e]), 0.0);
        }

        #[test]
        fn y_independent_on_branch(psi in -1.5f64..1.5, t in 0.0f64..1.0, y in 1.0f64..3.0, z in 1.0f64..3.0) {
            let m = gvhd(psi, OutcomeKind::Survival);
            prop_assert_eq!(m.shift_with_state(y, t, &[1.0, 1.0]), m.shift_with_state(z, t, &[1.0, 1.0]));
            let d = ShiftModel::new(ShiftFamily::DelayedEffect { treated_coord: 0, window: 5.0 }, vec![psi], OutcomeKind::Continuous);
            // same branch (y - t <= 5)
            prop_assert_eq!(d.shift_with_state(y, t, &[1.0]), d.shift_with_state(z, t, &[1.0]));
            prop_assert_eq!(d.shift_with_state(y + 6.0, t, &[1.0]), d.shift_with_state(z + 6.0, t, &[1.0]));
        }

        #[test]
        fn continuous_in_psi(psi in -1.5f64..1.5) {
            let m = gvhd(psi, OutcomeKind::Survival);
            let h = 1e-7;
            let a = m.with_psi(vec![psi - h]).shift_with_state(2.0, 1.0, &[1.0, 1.0]);
            let b = m.with_psi(vec![psi + h]).shift_with_state(2.0, 1.0, &[1.0, 1.0]);
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}
