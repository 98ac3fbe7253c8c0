use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;

use super::format::EmbeddingDataset;
use crate::error::{param_err, Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Base-to-new: train on half of the classes, evaluate on both halves.
    B2n,
    /// Cross-dataset: train on one domain's label set, evaluate on other
    /// domains with a disjoint label set.
    Cd,
    /// Domain generalisation: one source domain, every other domain as a
    /// target, same classes everywhere.
    Dg,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::B2n => "b2n",
            Task::Cd => "cd",
            Task::Dg => "dg",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "b2n" => Ok(Task::B2n),
            "cd" => Ok(Task::Cd),
            "dg" => Ok(Task::Dg),
            other => Err(Error::Config(format!("unknown task {other:?} (expected b2n, cd or dg)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub task: Task,
    pub seen_classes: BTreeSet<usize>,
    pub unseen_classes: BTreeSet<usize>,
    pub source_domains: BTreeSet<usize>,
    pub target_domains: BTreeSet<usize>,
    pub shots: usize,
}

/// Records evaluated together against one class set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalSet {
    pub name: String,
    pub records: Vec<usize>,
    /// Dataset class indices the posterior ranges over, ascending.
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub spec: SplitSpec,
    /// Training record ids, `shots` per seen class, ascending.
    pub train: Vec<usize>,
    /// Classes the training posterior ranges over, ascending.
    pub train_classes: Vec<usize>,
    pub eval_sets: Vec<EvalSet>,
}

fn classes_by_name(ds: &EmbeddingDataset) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..ds.n_classes()).collect();
    ids.sort_by(|&a, &b| ds.class_names[a].cmp(&ds.class_names[b]).then(a.cmp(&b)));
    ids
}

fn records_where(ds: &EmbeddingDataset, keep: impl Fn(usize, usize) -> bool) -> Vec<usize> {
    ds.records
        .iter()
        .enumerate()
        .filter(|(_, r)| keep(r.class, r.domain))
        .map(|(i, _)| i)
        .collect()
}

/// Builds the training stream and evaluation sets of `task`.
///
/// Classes are ordered by name; the first half is seen. For CD and DG the
/// first domain is the source. Training draws `shots` records per seen class
/// without replacement from the records of all source domains pooled.
pub fn make_split(ds: &EmbeddingDataset, task: Task, seed: u64, shots: usize) -> Result<Split> {
    if shots == 0 {
        return Err(param_err!("shots must be positive"));
    }
    let sorted = classes_by_name(ds);
    let half = sorted.len() / 2;
    let all_domains: BTreeSet<usize> = (0..ds.n_domains()).collect();
    let first = BTreeSet::from([0]);
    let others: BTreeSet<usize> = (1..ds.n_domains()).collect();
    let (seen, unseen, source, target): (BTreeSet<usize>, BTreeSet<usize>, _, _) = match task {
        Task::B2n => {
            if ds.n_classes() < 2 {
                return Err(param_err!("base-to-new needs at least two classes"));
            }
            (sorted[..half].iter().copied().collect(), sorted[half..].iter().copied().collect(), all_domains.clone(), all_domains)
        }
        Task::Cd => {
            if ds.n_classes() < 2 || ds.n_domains() < 2 {
                return Err(param_err!("cross-dataset needs at least two classes and two domains"));
            }
            (sorted[..half].iter().copied().collect(), sorted[half..].iter().copied().collect(), first, others)
        }
        Task::Dg => {
            if ds.n_domains() < 2 {
                return Err(param_err!("domain generalisation needs at least two domains"));
            }
            let all: BTreeSet<usize> = sorted.iter().copied().collect();
            (all.clone(), all, first, others)
        }
    };

    let mut train = Vec::with_capacity(seen.len() * shots);
    for &c in &seen {
        let pool = records_where(ds, |rc, rd| rc == c && source.contains(&rd));
        if pool.len() < shots {
            return Err(Error::InsufficientData {
                class: ds.class_names[c].clone(),
                available: pool.len(),
                requested: shots,
            });
        }
        let mut rng = seed::rng(seed::derive(seed, c as u64), "shots");
        train.extend(index::sample(&mut rng, pool.len(), shots).into_iter().map(|i| pool[i]));
    }
    train.sort_unstable();

    let seen_vec: Vec<usize> = seen.iter().copied().collect();
    let unseen_vec: Vec<usize> = unseen.iter().copied().collect();
    let eval_sets = match task {
        Task::B2n => {
            let chosen: BTreeSet<usize> = train.iter().copied().collect();
            vec![
                EvalSet {
                    name: "base".into(),
                    records: records_where(ds, |c, _| seen.contains(&c))
                        .into_iter()
                        .filter(|i| !chosen.contains(i))
                        .collect(),
                    classes: seen_vec.clone(),
                },
                EvalSet {
                    name: "new".into(),
                    records: records_where(ds, |c, _| unseen.contains(&c)),
                    classes: unseen_vec,
                },
            ]
        }
        Task::Cd | Task::Dg => target
            .iter()
            .map(|&d| EvalSet {
                name: ds.domains[d].clone(),
                records: records_where(ds, |c, rd| rd == d && unseen.contains(&c)),
                classes: unseen_vec.clone(),
            })
            .collect(),
    };

    Ok(Split {
        spec: SplitSpec {
            task,
            seen_classes: seen,
            unseen_classes: unseen,
            source_domains: source,
            target_domains: target,
            shots,
        },
        train,
        train_classes: seen_vec,
        eval_sets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::format::Record;
    use proptest::prelude::*;

    fn toy(n_classes: usize, n_domains: usize, per: usize) -> EmbeddingDataset {
        let mut records = Vec::new();
        for d in 0..n_domains {
            for c in 0..n_classes {
                for _ in 0..per {
                    records.push(Record {
                        class: c,
                        domain: d,
                        features: vec![1.0, 0.0],
                    });
                }
            }
        }
        // Names deliberately out of index order.
        let class_names = (0..n_classes).map(|c| format!("class_{:02}", (c * 7) % n_classes)).collect();
        EmbeddingDataset {
            dim: 2,
            class_names,
            domains: (0..n_domains).map(|d| format!("dom_{d}")).collect(),
            records,
            text_bank: None,
        }
    }

    #[test]
    fn b2n_halves_by_name() {
        let ds = toy(16, 1, 20);
        let s = make_split(&ds, Task::B2n, 1, 16).unwrap();
        assert_eq!(s.spec.seen_classes.len(), 8);
        assert_eq!(s.spec.unseen_classes.len(), 8);
        for &c in &s.spec.seen_classes {
            assert!(ds.class_names[c].as_str() < "class_08");
        }
        assert_eq!(s.train.len(), 8 * 16);
        assert_eq!(s.eval_sets[0].records.len(), 8 * 4);
        assert_eq!(s.eval_sets[1].records.len(), 8 * 20);
    }

    #[test]
    fn exact_shots_take_everything() {
        let ds = toy(2, 1, 16);
        let s = make_split(&ds, Task::B2n, 9, 16).unwrap();
        let c = *s.spec.seen_classes.iter().next().unwrap();
        let expected: Vec<usize> = (0..ds.records.len()).filter(|&i| ds.records[i].class == c).collect();
        assert_eq!(s.train, expected);
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let ds = toy(4, 2, 30);
        let a = make_split(&ds, Task::Dg, 5, 8).unwrap();
        assert_eq!(a, make_split(&ds, Task::Dg, 5, 8).unwrap());
        assert_ne!(a.train, make_split(&ds, Task::Dg, 6, 8).unwrap().train);
    }

    #[test]
    fn insufficient_data_names_the_class() {
        let ds = toy(4, 1, 5);
        match make_split(&ds, Task::B2n, 0, 6) {
            Err(Error::InsufficientData { class, available: 5, requested: 6 }) => assert!(class.starts_with("class_")),
            other => panic!("{other:?}"),
        }
        assert!(make_split(&toy(1, 1, 5), Task::B2n, 0, 1).is_err());
        assert!(make_split(&toy(4, 1, 5), Task::Dg, 0, 1).is_err());
        assert!(make_split(&toy(4, 1, 5), Task::Cd, 0, 1).is_err());
    }

    #[test]
    fn task_names() {
        for t in [Task::B2n, Task::Cd, Task::Dg] {
            assert_eq!(t.to_string().parse::<Task>().unwrap(), t);
        }
        assert!("xyz".parse::<Task>().is_err());
    }

    fn check_no_leakage(ds: &EmbeddingDataset, s: &Split) {
        for &i in &s.train {
            let r = &ds.records[i];
            assert!(s.spec.seen_classes.contains(&r.class));
            assert!(s.spec.source_domains.contains(&r.domain));
            if s.spec.task != Task::Dg {
                assert!(!s.spec.unseen_classes.contains(&r.class));
            }
            if s.spec.task != Task::B2n {
                assert!(!s.spec.target_domains.contains(&r.domain));
            }
        }
        let train: BTreeSet<usize> = s.train.iter().copied().collect();
        for set in &s.eval_sets {
            assert!(set.records.iter().all(|i| !train.contains(i)));
            assert!(set.records.iter().all(|&i| set.classes.contains(&ds.records[i].class)));
        }
        match s.spec.task {
            Task::B2n => assert!(s.spec.seen_classes.is_disjoint(&s.spec.unseen_classes)),
            Task::Cd => {
                assert!(s.spec.seen_classes.is_disjoint(&s.spec.unseen_classes));
                assert!(s.spec.source_domains.is_disjoint(&s.spec.target_domains));
            }
            Task::Dg => {
                assert_eq!(s.spec.seen_classes, s.spec.unseen_classes);
                assert!(s.spec.source_domains.is_disjoint(&s.spec.target_domains));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn splits_never_leak(seed in any::<u64>()) {
            let ds = toy(6, 3, 12);
            for task in [Task::B2n, Task::Cd, Task::Dg] {
                let s = make_split(&ds, task, seed, 4).unwrap();
                check_no_leakage(&ds, &s);
                prop_assert_eq!(s.train.len(), s.spec.seen_classes.len() * 4);
            }
        }
    }
}
