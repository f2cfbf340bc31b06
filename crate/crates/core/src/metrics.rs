//! Accuracy split into Many / Medium / Few class groups.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::LabError;
use crate::loss::ClassCounts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl Group {
    fn slot(self) -> usize {
        match self {
            Group::Many => 0,
            Group::Medium => 1,
            Group::Few => 2,
        }
    }
}

/// How classes are assigned to groups from their training counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupRule {
    /// Top, middle and bottom third of classes ranked by count. With `K`
    /// classes the outer groups hold `(K + 1) / 3` classes each.
    #[default]
    Tertile,
    /// `count > many_above` is Many, `count < few_below` is Few.
    Absolute { many_above: usize, few_below: usize },
}

impl GroupRule {
    /// Group of every class.
    pub fn assign(&self, counts: &ClassCounts) -> Vec<Group> {
        let k = counts.num_classes();
        match *self {
            GroupRule::Tertile => {
                let outer = (k + 1) / 3;
                let mut groups = vec![Group::Medium; k];
                for (rank, class) in counts.by_frequency().into_iter().enumerate() {
                    if rank < outer {
                        groups[class] = Group::Many;
                    } else if rank >= k - outer {
                        groups[class] = Group::Few;
                    }
                }
                groups
            }
            GroupRule::Absolute {
                many_above,
                few_below,
            } => counts
                .as_slice()
                .iter()
                .map(|&c| {
                    if c > many_above {
                        Group::Many
                    } else if c < few_below {
                        Group::Few
                    } else {
                        Group::Medium
                    }
                })
                .collect(),
        }
    }
}

impl fmt::Display for GroupRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupRule::Tertile => write!(f, "tertile"),
            GroupRule::Absolute {
                many_above,
                few_below,
            } => write!(f, "absolute:{many_above}:{few_below}"),
        }
    }
}

impl FromStr for GroupRule {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "tertile" {
            return Ok(GroupRule::Tertile);
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["absolute", hi, lo] => {
                let parse = |v: &str| {
                    v.parse::<usize>()
                        .map_err(|_| LabError::config(format!("bad group threshold {v:?}")))
                };
                Ok(GroupRule::Absolute {
                    many_above: parse(hi)?,
                    few_below: parse(lo)?,
                })
            }
            _ => Err(LabError::config(format!(
                "unknown group rule {s:?} (expected tertile or absolute:<many>:<few>)"
            ))),
        }
    }
}

impl Serialize for GroupRule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GroupRule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Group accuracies. Serializes to the flat object
/// `{all, many, medium, few, n_eval, group_rule}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub all: f64,
    pub many: f64,
    pub medium: f64,
    pub few: f64,
    pub n_eval: usize,
    pub group_rule: GroupRule,
    /// Classes per group (many, medium, few).
    #[serde(skip)]
    pub group_sizes: [usize; 3],
    /// Evaluated instances per group (many, medium, few).
    #[serde(skip)]
    pub group_instances: [usize; 3],
}

impl Metrics {
    pub fn group(&self, g: Group) -> f64 {
        match g {
            Group::Many => self.many,
            Group::Medium => self.medium,
            Group::Few => self.few,
        }
    }
}

/// Accuracy overall and per group. A group without evaluated instances
/// reports 0.
pub fn split_accuracy(
    preds: &[usize],
    labels: &[usize],
    counts: &ClassCounts,
    rule: GroupRule,
) -> Result<Metrics, LabError> {
    if preds.len() != labels.len() {
        return Err(LabError::contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let groups = rule.assign(counts);
    let mut group_sizes = [0; 3];
    for g in &groups {
        group_sizes[g.slot()] += 1;
    }
    let mut correct = [0usize; 3];
    let mut total = [0usize; 3];
    for (&p, &y) in preds.iter().zip(labels) {
        let slot = groups
            .get(y)
            .ok_or_else(|| {
                LabError::contract(format!("label {y} outside {} classes", groups.len()))
            })?
            .slot();
        total[slot] += 1;
        if p == y {
            correct[slot] += 1;
        }
    }
    let acc = |c: usize, t: usize| if t == 0 { 0.0 } else { c as f64 / t as f64 };
    let n = labels.len();
    Ok(Metrics {
        all: acc(correct.iter().sum(), n),
        many: acc(correct[0], total[0]),
        medium: acc(correct[1], total[1]),
        few: acc(correct[2], total[2]),
        n_eval: n,
        group_rule: rule,
        group_sizes,
        group_instances: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn all_correct() {
        let counts = ClassCounts::new(vec![50, 20, 10, 5, 2, 1]).unwrap();
        let labels: Vec<usize> = (0..60).map(|i| i % 6).collect();
        let m = split_accuracy(&labels, &labels, &counts, GroupRule::Tertile).unwrap();
        assert_eq!((m.all, m.many, m.medium, m.few), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(m.group_sizes, [2, 2, 2]);
    }

    #[test]
    fn singleton_tertiles_pass_class_accuracy_through() {
        let counts = ClassCounts::new(vec![100, 10, 1]).unwrap();
        let labels = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
        let preds = [0, 0, 0, 1, 1, 1, 0, 0, 2, 0, 0, 0];
        let m = split_accuracy(&preds, &labels, &counts, GroupRule::Tertile).unwrap();
        assert_eq!(m.group_sizes, [1, 1, 1]);
        assert_eq!(m.many, 0.75);
        assert_eq!(m.medium, 0.5);
        assert_eq!(m.few, 0.25);
        assert_eq!(m.all, 0.5);
    }

    #[test]
    fn tertile_sizes_for_ten_classes() {
        let counts = ClassCounts::new((1..=10).rev().collect()).unwrap();
        let g = GroupRule::Tertile.assign(&counts);
        assert_eq!(g.iter().filter(|&&x| x == Group::Many).count(), 3);
        assert_eq!(g.iter().filter(|&&x| x == Group::Medium).count(), 4);
        assert_eq!(g.iter().filter(|&&x| x == Group::Few).count(), 3);
        assert_eq!(g[0], Group::Many);
        assert_eq!(g[9], Group::Few);
    }

    #[test]
    fn absolute_rule() {
        let counts = ClassCounts::new(vec![500, 100, 50, 20, 19, 3]).unwrap();
        let rule: GroupRule = "absolute:100:20".parse().unwrap();
        assert_eq!(
            rule.assign(&counts),
            vec![
                Group::Many,
                Group::Medium,
                Group::Medium,
                Group::Medium,
                Group::Few,
                Group::Few
            ]
        );
        assert_eq!(rule.to_string(), "absolute:100:20");
        assert!("thirds".parse::<GroupRule>().is_err());
    }

    #[test]
    fn random_predictions_near_chance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let counts = ClassCounts::new((1..=10).rev().map(|c| c * 10).collect()).unwrap();
        let labels: Vec<usize> = (0..10_000).map(|i| i % 10).collect();
        let preds: Vec<usize> = labels.iter().map(|_| rng.random_range(0..10)).collect();
        let m = split_accuracy(&preds, &labels, &counts, GroupRule::Tertile).unwrap();
        for acc in [m.all, m.many, m.medium, m.few] {
            assert!((acc - 0.1).abs() <= 0.03, "{acc}");
        }
    }

    #[test]
    fn serializes_flat() {
        let counts = ClassCounts::new(vec![3, 2, 1]).unwrap();
        let m = split_accuracy(&[0, 1, 2], &[0, 1, 1], &counts, GroupRule::Tertile).unwrap();
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 6);
        for k in ["all", "many", "medium", "few", "n_eval", "group_rule"] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
        assert_eq!(v["group_rule"], "tertile");
    }

    proptest! {
        #[test]
        fn recombination_reproduces_all(
            counts in proptest::collection::vec(1usize..200, 2..12),
            pairs in proptest::collection::vec((0usize..1000, 0usize..1000), 1..300),
        ) {
            let k = counts.len();
            let counts = ClassCounts::new(counts).unwrap();
            let preds: Vec<usize> = pairs.iter().map(|p| p.0 % k).collect();
            let labels: Vec<usize> = pairs.iter().map(|p| p.1 % k).collect();
            let m = split_accuracy(&preds, &labels, &counts, GroupRule::Tertile).unwrap();
            let accs = [m.many, m.medium, m.few];
            for a in accs {
                prop_assert!((0.0..=1.0).contains(&a));
            }
            let recombined: f64 = accs
                .iter()
                .zip(m.group_instances)
                .map(|(a, n)| a * n as f64)
                .sum::<f64>()
                / m.n_eval as f64;
            prop_assert!((recombined - m.all).abs() <= 1e-12);
        }
    }
}
