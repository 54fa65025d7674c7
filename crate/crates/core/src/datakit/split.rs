use std::collections::BTreeMap;

use chrono::Datelike;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatakitError;
use crate::types::ImageRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitStrategy {
    Random,
    Location,
    Time,
    Season,
}

impl std::str::FromStr for SplitStrategy {
    type Err = DatakitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Self::Random),
            "location" => Ok(Self::Location),
            "time" => Ok(Self::Time),
            "season" => Ok(Self::Season),
            other => Err(DatakitError::InvalidSplit(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Month (January first) to season name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeasonTable(pub [String; 12]);

impl Default for SeasonTable {
    fn default() -> Self {
        let name = |m: usize| match m {
            12 | 1 | 2 => "DJF",
            3..=5 => "MAM",
            6..=8 => "JJA",
            _ => "SON",
        };
        Self(std::array::from_fn(|i| name(i + 1).to_string()))
    }
}

impl SeasonTable {
    pub fn season(&self, month: u32) -> &str {
        &self.0[(month as usize).clamp(1, 12) - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub strategy: SplitStrategy,
    /// `(train, val)` or `(train, val, test)`.
    pub fractions: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub seasons: SeasonTable,
}

impl SplitSpec {
    pub fn new(strategy: SplitStrategy, fractions: &[f64], seed: u64) -> Self {
        Self { strategy, fractions: fractions.to_vec(), seed, seasons: SeasonTable::default() }
    }

    pub fn validate(&self) -> Result<(), DatakitError> {
        let f = &self.fractions;
        if !(2..=3).contains(&f.len()) {
            return Err(DatakitError::InvalidSplit(format!("need 2 or 3 fractions, got {}", f.len())));
        }
        if let Some(bad) = f.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
            return Err(DatakitError::InvalidSplit(format!("fraction {bad} is outside (0, 1)")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatakitError::InvalidSplit(format!("fractions sum to {sum}")));
        }
        Ok(())
    }

    pub fn split_names(&self) -> &'static [&'static str] {
        &["train", "val", "test"][..self.fractions.len()]
    }
}

/// `assignment[i]` is the split index of record `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub names: Vec<String>,
    pub assignment: Vec<usize>,
}

impl SplitAssignment {
    pub fn members(&self, split: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignment.iter().enumerate().filter(move |(_, &s)| s == split).map(|(i, _)| i)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.names.len()];
        for &s in &self.assignment {
            sizes[s] += 1;
        }
        sizes
    }

    pub fn name_of(&self, record: usize) -> &str {
        &self.names[self.assignment[record]]
    }
}

pub fn split_dataset(records: &[ImageRef], spec: &SplitSpec) -> Result<SplitAssignment, DatakitError> {
    spec.validate()?;
    let names = spec.split_names().iter().map(|s| s.to_string()).collect();
    let assignment = match spec.strategy {
        SplitStrategy::Random => {
            let mut order: Vec<usize> = (0..records.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
            cut(&order, &spec.fractions)
        }
        SplitStrategy::Time => {
            let missing: Vec<_> = records.iter().filter(|r| r.capture_time.is_none()).map(|r| r.path.clone()).collect();
            if !missing.is_empty() {
                return Err(DatakitError::MissingField { field: "capture_time", records: missing });
            }
            let mut order: Vec<usize> = (0..records.len()).collect();
            order.sort_by_key(|&i| records[i].capture_time);
            cut(&order, &spec.fractions)
        }
        SplitStrategy::Location => {
            let missing: Vec<_> = records.iter().filter(|r| r.location_id.is_none()).map(|r| r.path.clone()).collect();
            if !missing.is_empty() {
                return Err(DatakitError::MissingField { field: "location_id", records: missing });
            }
            let keys: Vec<String> = records.iter().map(|r| r.location_id.clone().expect("checked")).collect();
            group_split(&keys, &spec.fractions, spec.seed)?
        }
        SplitStrategy::Season => {
            let missing: Vec<_> = records.iter().filter(|r| r.capture_time.is_none()).map(|r| r.path.clone()).collect();
            if !missing.is_empty() {
                return Err(DatakitError::MissingField { field: "capture_time", records: missing });
            }
            let keys: Vec<String> = records
                .iter()
                .map(|r| spec.seasons.season(r.capture_time.expect("checked").month()).to_string())
                .collect();
            group_split(&keys, &spec.fractions, spec.seed)?
        }
    };
    Ok(SplitAssignment { names, assignment })
}

/// Assigns `order` to splits by cutting at rounded cumulative fractions.
fn cut(order: &[usize], fractions: &[f64]) -> Vec<usize> {
    let n = order.len();
    let mut bounds = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    for (k, f) in fractions.iter().enumerate() {
        cum += f;
        bounds.push(if k + 1 == fractions.len() { n } else { ((cum * n as f64).round() as usize).min(n) });
    }
    let mut out = vec![0; n];
    let mut split = 0;
    for (pos, &i) in order.iter().enumerate() {
        while pos >= bounds[split] {
            split += 1;
        }
        out[i] = split;
    }
    out
}

/// Greedy group-exclusive assignment: groups in descending size (ties in a
/// seed-shuffled order) each go to the split furthest below its target.
fn group_split(keys: &[String], fractions: &[f64], seed: u64) -> Result<Vec<usize>, DatakitError> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        groups.entry(k.as_str()).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(DatakitError::SingleGroup { groups: groups.len() });
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    groups.sort_by(|a, b| b.len().cmp(&a.len()));

    let group_count = groups.len();
    let n = keys.len() as f64;
    let mut filled = vec![0usize; fractions.len()];
    let mut out = vec![0; keys.len()];
    for g in groups {
        let deficit = |s: usize| fractions[s] * n - filled[s] as f64;
        let target = (0..fractions.len())
            .reduce(|best, s| if deficit(s) > deficit(best) { s } else { best })
            .expect("at least two splits");
        filled[target] += g.len();
        for i in g {
            out[i] = target;
        }
    }
    if filled.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(DatakitError::SingleGroup { groups: group_count });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn located(sizes: &[(&str, usize)]) -> Vec<ImageRef> {
        sizes
            .iter()
            .flat_map(|(loc, n)| (0..*n).map(move |i| ImageRef::new(format!("{loc}/{i}.jpg")).with_location(*loc)))
            .collect()
    }

    #[test]
    fn location_example() {
        let records = located(&[("a", 5), ("b", 3), ("c", 2)]);
        for seed in 0..20 {
            let s = split_dataset(&records, &SplitSpec::new(SplitStrategy::Location, &[0.7, 0.3], seed)).unwrap();
            assert_eq!(s.sizes(), vec![7, 3]);
            assert!(s.members(1).all(|i| records[i].location_id.as_deref() == Some("b")));
        }
    }

    #[test]
    fn single_group_and_missing_fields() {
        let records = located(&[("a", 4)]);
        let err = split_dataset(&records, &SplitSpec::new(SplitStrategy::Location, &[0.5, 0.5], 0));
        assert!(matches!(err, Err(DatakitError::SingleGroup { groups: 1 })));
        let mut records = located(&[("a", 2), ("b", 2)]);
        records.push(ImageRef::new("nowhere.jpg"));
        match split_dataset(&records, &SplitSpec::new(SplitStrategy::Location, &[0.5, 0.5], 0)) {
            Err(DatakitError::MissingField { records, .. }) => assert_eq!(records, vec![std::path::PathBuf::from("nowhere.jpg")]),
            other => panic!("{other:?}"),
        }
        assert!(split_dataset(&records, &SplitSpec::new(SplitStrategy::Time, &[0.5, 0.5], 0)).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(SplitSpec::new(SplitStrategy::Random, &[0.5, 0.4], 0).validate().is_err());
        assert!(SplitSpec::new(SplitStrategy::Random, &[1.0, 0.0], 0).validate().is_err());
        assert!(SplitSpec::new(SplitStrategy::Random, &[1.0], 0).validate().is_err());
        assert!(SplitSpec::new(SplitStrategy::Random, &[0.8, 0.1, 0.1], 0).validate().is_ok());
    }

    #[test]
    fn time_split_orders_by_capture() {
        let day = |d| NaiveDate::from_ymd_opt(2023, 1, d).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let records: Vec<_> = [5, 1, 4, 2, 3].iter().map(|&d| ImageRef::new(format!("{d}.jpg")).with_capture_time(day(d))).collect();
        let s = split_dataset(&records, &SplitSpec::new(SplitStrategy::Time, &[0.6, 0.4], 0)).unwrap();
        let train: Vec<_> = s.members(0).map(|i| records[i].path.clone()).collect();
        assert_eq!(train.len(), 3);
        assert!(train.iter().all(|p| ["1.jpg", "2.jpg", "3.jpg"].contains(&p.to_str().unwrap())));
    }

    #[test]
    fn season_table_default() {
        let t = SeasonTable::default();
        assert_eq!([t.season(1), t.season(3), t.season(7), t.season(11), t.season(12)], ["DJF", "MAM", "JJA", "SON", "DJF"]);
    }

    proptest! {
        #[test]
        fn random_split_partitions_and_is_deterministic(n in 0usize..60, seed in any::<u64>()) {
            let records: Vec<_> = (0..n).map(|i| ImageRef::new(format!("{i}.jpg"))).collect();
            let spec = SplitSpec::new(SplitStrategy::Random, &[0.7, 0.2, 0.1], seed);
            let a = split_dataset(&records, &spec).unwrap();
            prop_assert_eq!(&a, &split_dataset(&records, &spec).unwrap());
            prop_assert_eq!(a.assignment.len(), n);
            prop_assert_eq!(a.sizes().iter().sum::<usize>(), n);
        }

        #[test]
        fn location_split_is_group_exclusive(groups in proptest::collection::vec(1usize..8, 2..9), seed in any::<u64>()) {
            let named: Vec<(String, usize)> = groups.iter().enumerate().map(|(i, &n)| (format!("loc{i}"), n)).collect();
            let refs: Vec<(&str, usize)> = named.iter().map(|(s, n)| (s.as_str(), *n)).collect();
            let records = located(&refs);
            let s = split_dataset(&records, &SplitSpec::new(SplitStrategy::Location, &[0.6, 0.4], seed)).unwrap();
            let mut home = std::collections::HashMap::new();
            for (i, r) in records.iter().enumerate() {
                let prev = home.insert(r.location_id.clone().unwrap(), s.assignment[i]);
                prop_assert!(prev.is_none_or(|p| p == s.assignment[i]));
            }
        }
    }
}
