//! Exact G-computation on two-decision treatment trees `A0 → L1 → A1 → outcome`.

use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::simulate::Dataset;

pub type Rational = Ratio<i128>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leaf {
    pub a1: u8,
    pub survivors: u64,
    pub deaths: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateNode {
    pub l1: u8,
    pub arms: Vec<Leaf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreatmentNode {
    pub a0: u8,
    pub strata: Vec<CovariateNode>,
}

/// Counts per history; inner totals are sums of their leaves by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreatmentTree {
    pub branches: Vec<TreatmentNode>,
}

impl Leaf {
    fn total(&self) -> u64 {
        self.survivors + self.deaths
    }
}

impl CovariateNode {
    fn total(&self) -> u64 {
        self.arms.iter().map(Leaf::total).sum()
    }
    fn survivors(&self) -> u64 {
        self.arms.iter().map(|l| l.survivors).sum()
    }
}

impl TreatmentNode {
    fn total(&self) -> u64 {
        self.strata.iter().map(CovariateNode::total).sum()
    }
}

fn r(n: u64, d: u64) -> Rational {
    Rational::new(n as i128, d as i128)
}

impl TreatmentTree {
    /// The 32,000-patient tree: groups d, c, b (AZT) and a (no AZT).
    pub fn figure1() -> Self {
        let leaf = |a1, s, d| Leaf {
            a1,
            survivors: s,
            deaths: d,
        };
        TreatmentTree {
            branches: vec![
                TreatmentNode {
                    a0: 0,
                    strata: vec![CovariateNode {
                        l1: 1,
                        arms: vec![leaf(1, 10_000, 6_000)],
                    }],
                },
                TreatmentNode {
                    a0: 1,
                    strata: vec![
                        CovariateNode {
                            l1: 0,
                            arms: vec![leaf(0, 1_000, 3_000), leaf(1, 3_000, 1_000)],
                        },
                        CovariateNode {
                            l1: 1,
                            arms: vec![leaf(1, 4_000, 4_000)],
                        },
                    ],
                },
            ],
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: TreatmentTree = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let binary = |v: u8| v <= 1;
        let mut seen = std::collections::BTreeSet::new();
        for b in &self.branches {
            for s in &b.strata {
                for l in &s.arms {
                    if !binary(b.a0) || !binary(s.l1) || !binary(l.a1) {
                        return Err(config("tree labels must be 0 or 1"));
                    }
                    if !seen.insert((b.a0, s.l1, l.a1)) {
                        return Err(config(format!("duplicate leaf ({}, {}, {})", b.a0, s.l1, l.a1)));
                    }
                }
            }
        }
        if self.total() == 0 {
            return Err(config("tree has no patients"));
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.branches.iter().map(TreatmentNode::total).sum()
    }

    /// Multiplies every leaf count by `k`.
    pub fn scaled(&self, k: u64) -> Self {
        let mut t = self.clone();
        for l in t.branches.iter_mut().flat_map(|b| &mut b.strata).flat_map(|s| &mut s.arms) {
            l.survivors *= k;
            l.deaths *= k;
        }
        t
    }

    /// Builds counts from a dataset with coordinates `[a0, l1, a1, alive]`.
    pub fn from_dataset(d: &Dataset) -> Result<Self> {
        let mut cells = std::collections::BTreeMap::<(u8, u8, u8), (u64, u64)>::new();
        for s in &d.subjects {
            if s.path.dim() != 4 {
                return Err(config("tree datasets need coordinates [a0, l1, a1, alive]"));
            }
            let bit = |t: f64, c: usize| -> Result<u8> { Ok((s.path.coordinate_at(t, c)? > 0.5) as u8) };
            let key = (bit(0.0, 0)?, bit(1.0, 1)?, bit(1.0, 2)?);
            let e = cells.entry(key).or_default();
            if s.died {
                e.1 += 1;
            } else {
                e.0 += 1;
            }
        }
        let mut branches: Vec<TreatmentNode> = Vec::new();
        for ((a0, l1, a1), (sv, dd)) in cells {
            if branches.last().is_none_or(|b| b.a0 != a0) {
                branches.push(TreatmentNode { a0, strata: vec![] });
            }
            let b = branches.last_mut().unwrap();
            if b.strata.last().is_none_or(|s| s.l1 != l1) {
                b.strata.push(CovariateNode { l1, arms: vec![] });
            }
            b.strata.last_mut().unwrap().arms.push(Leaf {
                a1,
                survivors: sv,
                deaths: dd,
            });
        }
        let t = TreatmentTree { branches };
        t.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Fixed(u8),
    AsObserved,
}

/// Treatment rules for the two decisions `(A0, A1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regime {
    pub a0: Rule,
    pub a1: Rule,
}

impl Regime {
    pub fn fixed(a0: u8, a1: u8) -> Self {
        Regime {
            a0: Rule::Fixed(a0),
            a1: Rule::Fixed(a1),
        }
    }

    pub fn as_observed() -> Self {
        Regime {
            a0: Rule::AsObserved,
            a1: Rule::AsObserved,
        }
    }

    /// Parses `azt=1,proph=1` (aliases `a0`, `a1`); values are `0`, `1` or `obs`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut reg = Regime::as_observed();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| config(format!("regime entry `{part}` is not key=value")))?;
            let rule = match v.trim() {
                "0" => Rule::Fixed(0),
                "1" => Rule::Fixed(1),
                "obs" | "observed" => Rule::AsObserved,
                other => return Err(config(format!("regime value `{other}` must be 0, 1 or obs"))),
            };
            match k.trim() {
                "azt" | "a0" => reg.a0 = rule,
                "proph" | "a1" => reg.a1 = rule,
                other => return Err(config(format!("unknown regime key `{other}`"))),
            }
        }
        Ok(reg)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |r: Rule| match r {
            Rule::Fixed(v) => v.to_string(),
            Rule::AsObserved => "obs".into(),
        };
        write!(f, "azt={},proph={}", show(self.a0), show(self.a1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GResult {
    pub regime: Regime,
    pub survival: Rational,
    /// Patients whose observed first decision agrees with the regime.
    pub population: u64,
    pub expected_survivors: Rational,
}

impl GResult {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "regime": self.regime.to_string(),
            "survival": self.survival.to_string(),
            "survival_float": ratio_f64(self.survival),
            "population": self.population,
            "expected_survivors": self.expected_survivors.to_string(),
            "expected_survivors_float": ratio_f64(self.expected_survivors),
        })
    }
}

pub fn ratio_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Survival probability under `regime` by backward G-computation.
pub fn g_compute(tree: &TreatmentTree, regime: Regime) -> Result<GResult> {
    tree.validate()?;
    let total = tree.total();
    let chosen: Vec<(&TreatmentNode, Rational)> = match regime.a0 {
        Rule::AsObserved => tree.branches.iter().map(|b| (b, r(b.total(), total))).collect(),
        Rule::Fixed(a) => {
            let b = tree
                .branches
                .iter()
                .find(|b| b.a0 == a && b.total() > 0)
                .ok_or(Error::Positivity {
                    stratum: "root".into(),
                    action: a,
                })?;
            vec![(b, Rational::from_integer(1))]
        }
    };
    let mut survival = Rational::from_integer(0);
    for (branch, w0) in &chosen {
        let n0 = branch.total();
        for stratum in &branch.strata {
            let n1 = stratum.total();
            if n1 == 0 {
                continue;
            }
            let p_surv = match regime.a1 {
                Rule::AsObserved => r(stratum.survivors(), n1),
                Rule::Fixed(a) => {
                    let leaf = stratum
                        .arms
                        .iter()
                        .find(|l| l.a1 == a && l.total() > 0)
                        .ok_or_else(|| Error::Positivity {
                            stratum: format!("a0={}, l1={}", branch.a0, stratum.l1),
                            action: a,
                        })?;
                    r(leaf.survivors, leaf.total())
                }
            };
            survival += *w0 * r(n1, n0) * p_surv;
        }
    }
    let population = match regime.a0 {
        Rule::AsObserved => total,
        Rule::Fixed(_) => chosen[0].0.total(),
    };
    Ok(GResult {
        regime,
        survival,
        population,
        expected_survivors: survival * Rational::from_integer(population as i128),
    })
}

/// Restriction applied before a crude comparison of the `A0` arms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumSpec {
    pub l1: Option<u8>,
    pub a1: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ArmSurvival {
    pub a0: u8,
    pub survivors: u64,
    pub total: u64,
}

/// Crude survival per `A0` arm within the restriction.
pub fn naive_compare(tree: &TreatmentTree, spec: StratumSpec) -> Result<Vec<ArmSurvival>> {
    let mut out = Vec::new();
    for b in &tree.branches {
        let (mut s, mut n) = (0, 0);
        for st in b.strata.iter().filter(|st| spec.l1.is_none_or(|v| v == st.l1)) {
            for leaf in st.arms.iter().filter(|l| spec.a1.is_none_or(|v| v == l.a1)) {
                s += leaf.survivors;
                n += leaf.total();
            }
        }
        if n == 0 {
            return Err(Error::EmptyStratum(format!("a0={} under {spec:?}", b.a0)));
        }
        out.push(ArmSurvival {
            a0: b.a0,
            survivors: s,
            total: n,
        });
    }
    out.sort_by_key(|a| std::cmp::Reverse(a.a0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn survivors(reg: Regime) -> Rational {
        g_compute(&TreatmentTree::figure1(), reg).unwrap().expected_survivors
    }

    #[test]
    fn figure_regimes_are_integer_exact() {
        assert_eq!(survivors(Regime::fixed(1, 1)), Rational::from_integer(10_000));
        assert_eq!(survivors(Regime::fixed(0, 1)), Rational::from_integer(10_000));
        let obs = g_compute(&TreatmentTree::figure1(), Regime::as_observed()).unwrap();
        assert_eq!(obs.survival, Rational::new(18_000, 32_000));
        let a = g_compute(&TreatmentTree::figure1(), Regime::fixed(1, 1)).unwrap();
        assert_eq!(a.survival, Rational::new(5, 8));
        assert_eq!(a.population, 16_000);
    }

    #[test]
    fn positivity_failure_names_stratum() {
        match g_compute(&TreatmentTree::figure1(), Regime::fixed(0, 0)) {
            Err(Error::Positivity { stratum, action }) => {
                assert_eq!(stratum, "a0=0, l1=1");
                assert_eq!(action, 0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn naive_comparisons() {
        let t = TreatmentTree::figure1();
        let pick = |spec| {
            naive_compare(&t, spec)
                .unwrap()
                .iter()
                .map(|a| (a.survivors, a.total))
                .collect::<Vec<_>>()
        };
        assert_eq!(pick(StratumSpec::default()), vec![(8_000, 16_000), (10_000, 16_000)]);
        assert_eq!(pick(StratumSpec { l1: None, a1: Some(1) }), vec![(7_000, 12_000), (10_000, 16_000)]);
        assert_eq!(pick(StratumSpec { l1: Some(1), a1: None }), vec![(4_000, 8_000), (10_000, 16_000)]);
        assert!(matches!(
            naive_compare(&t, StratumSpec { l1: Some(0), a1: None }),
            Err(Error::EmptyStratum(_))
        ));
    }

    #[test]
    fn regime_parsing() {
        assert_eq!(Regime::parse("azt=1,proph=1").unwrap(), Regime::fixed(1, 1));
        assert_eq!(Regime::parse("a0=0").unwrap().a1, Rule::AsObserved);
        assert!(Regime::parse("azt=2").is_err());
        assert!(Regime::parse("x=1").is_err());
        assert_eq!(Regime::parse(&Regime::fixed(0, 1).to_string()).unwrap(), Regime::fixed(0, 1));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let t = TreatmentTree::figure1();
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(TreatmentTree::from_json(&s).unwrap(), t);
        assert!(TreatmentTree::from_json(r#"{"branches":[{"a0":2,"strata":[{"l1":0,"arms":[{"a1":0,"survivors":1,"deaths":0}]}]}]}"#).is_err());
    }

    #[test]
    fn tree_from_simulated_dataset() {
        use crate::simulate::{build_figure_tree, simulate_observed};
        let d = simulate_observed(&build_figure_tree(), 3_200, 4).unwrap();
        let t = TreatmentTree::from_dataset(&d).unwrap();
        assert_eq!(t.total(), 3_200);
        assert_eq!(t.branches.len(), 2);
    }

    fn arb_tree() -> impl Strategy<Value = TreatmentTree> {
        proptest::collection::vec((0u64..50, 0u64..50), 8).prop_map(|c| {
            let mut branches = Vec::new();
            for a0 in 0..2u8 {
                let mut strata = Vec::new();
                for l1 in 0..2u8 {
                    let arms = (0..2u8)
                        .map(|a1| {
                            let (s, d) = c[(a0 * 4 + l1 * 2 + a1) as usize];
                            Leaf {
                                a1,
                                survivors: s + 1,
                                deaths: d,
                            }
                        })
                        .collect();
                    strata.push(CovariateNode { l1, arms });
                }
                branches.push(TreatmentNode { a0, strata });
            }
            TreatmentTree { branches }
        })
    }

    proptest! {
        #[test]
        fn as_observed_is_empirical_marginal(t in arb_tree()) {
            let g = g_compute(&t, Regime::as_observed()).unwrap();
            let surv: u64 = t.branches.iter().flat_map(|b| &b.strata).map(|s| s.survivors()).sum();
            prop_assert_eq!(g.survival, r(surv, t.total()));
        }

        #[test]
        fn scaling_counts_leaves_probabilities(t in arb_tree(), k in 1u64..20, a0 in 0u8..2, a1 in 0u8..2) {
            let reg = Regime::fixed(a0, a1);
            prop_assert_eq!(g_compute(&t, reg).unwrap().survival, g_compute(&t.scaled(k), reg).unwrap().survival);
        }
    }
}
