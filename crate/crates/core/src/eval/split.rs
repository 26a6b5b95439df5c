use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Train/validation/test fractions. Stratified splits keep each class's
/// proportions within two slides of the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            fractions: [0.65, 0.15, 0.20],
            seed: 0,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split fractions sum to {sum}, not 1")));
        }
        if self.fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::invalid("split fractions must be non-negative"));
        }
        if self.stratified && self.fractions.iter().any(|&f| f == 0.0) {
            return Err(Error::invalid(
                "stratified splits need every fraction positive; use stratified = false for degenerate splits",
            ));
        }
        Ok(())
    }
}

/// Slide ids per partition, each list sorted.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn parts(&self) -> [&[String]; 3] {
        [&self.train, &self.val, &self.test]
    }
}

const EPS: f64 = 1e-9;

fn floor_counts(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    fractions.map(|f| (n as f64 * f + EPS).floor() as usize)
}

/// Seeded shuffled partition. Split sizes are `floor(N·f)` with leftover
/// slides handed out train first; in stratified mode each class is floored
/// on its own and class leftovers fill the remaining per-split quota in
/// train → val → test order.
pub fn split(items: &[(String, u8)], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if items.is_empty() {
        return Err(Error::invalid("nothing to split"));
    }
    let ids: BTreeSet<&str> = items.iter().map(|(id, _)| id.as_str()).collect();
    if ids.len() != items.len() {
        return Err(Error::invalid("duplicate slide ids"));
    }

    let mut classes: Vec<Vec<String>> = if spec.stratified {
        let mut by_label = vec![Vec::new(), Vec::new()];
        for (id, label) in items {
            let slot = by_label
                .get_mut(*label as usize)
                .ok_or_else(|| Error::invalid(format!("label {label} is not binary")))?;
            slot.push(id.clone());
        }
        if by_label.iter().any(Vec::is_empty) {
            return Err(Error::invalid("stratified split needs at least one slide per class"));
        }
        by_label
    } else {
        vec![items.iter().map(|(id, _)| id.clone()).collect()]
    };

    let n = items.len();
    let mut totals = floor_counts(n, &spec.fractions);
    let active: Vec<usize> = (0..3).filter(|&s| spec.fractions[s] > 0.0).collect();
    let mut remainder = n - totals.iter().sum::<usize>();
    for &s in active.iter().cycle() {
        if remainder == 0 {
            break;
        }
        totals[s] += 1;
        remainder -= 1;
    }

    let mut per_class: Vec<[usize; 3]> = classes
        .iter()
        .map(|c| floor_counts(c.len(), &spec.fractions))
        .collect();
    let mut deficit = totals.map(|t| t as i64);
    for counts in &per_class {
        for s in 0..3 {
            deficit[s] -= counts[s] as i64;
        }
    }
    for (c, counts) in per_class.iter_mut().enumerate() {
        let mut left = classes[c].len() - counts.iter().sum::<usize>();
        while left > 0 {
            // leftovers and deficits have equal sums, so a slot always exists
            let s = (0..3).find(|&s| deficit[s] > 0).unwrap_or(0);
            counts[s] += 1;
            deficit[s] -= 1;
            left -= 1;
        }
    }

    let mut rng = seed::rng(seed::derive(spec.seed, "split"));
    let mut out = Split::default();
    for (members, counts) in classes.iter_mut().zip(&per_class) {
        members.sort();
        members.shuffle(&mut rng);
        let (train, rest) = members.split_at(counts[0]);
        let (val, test) = rest.split_at(counts[1]);
        out.train.extend_from_slice(train);
        out.val.extend_from_slice(val);
        out.test.extend_from_slice(test);
    }
    out.train.sort();
    out.val.sort();
    out.test.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slides(pos: usize, neg: usize) -> Vec<(String, u8)> {
        (0..pos + neg)
            .map(|i| (format!("s{i:03}"), u8::from(i < pos)))
            .collect()
    }

    #[test]
    fn twenty_balanced_slides() {
        let items = slides(10, 10);
        let s = split(&items, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (13, 3, 4));
        let label = |id: &String| items.iter().find(|(i, _)| i == id).unwrap().1;
        for part in s.parts() {
            let pos = part.iter().filter(|id| label(id) == 1).count();
            let neg = part.len() - pos;
            assert!(pos.abs_diff(neg) <= 1, "{pos} vs {neg}");
        }
    }

    #[test]
    fn degenerate_fractions_need_unstratified() {
        let items = slides(3, 4);
        let strat = SplitSpec { fractions: [1.0, 0.0, 0.0], ..SplitSpec::default() };
        assert!(split(&items, &strat).is_err());
        let plain = SplitSpec { stratified: false, ..strat };
        let s = split(&items, &plain).unwrap();
        assert_eq!(s.train.len(), 7);
        assert!(s.val.is_empty() && s.test.is_empty());
    }

    #[test]
    fn same_seed_same_partition() {
        let items = slides(17, 23);
        let spec = SplitSpec { seed: 42, ..SplitSpec::default() };
        assert_eq!(split(&items, &spec).unwrap(), split(&items, &spec).unwrap());
        let other = SplitSpec { seed: 43, ..spec };
        assert_ne!(split(&items, &spec).unwrap(), split(&items, &other).unwrap());
    }

    #[test]
    fn input_order_does_not_matter() {
        let items = slides(8, 9);
        let mut reversed = items.clone();
        reversed.reverse();
        let spec = SplitSpec::default();
        assert_eq!(split(&items, &spec).unwrap(), split(&reversed, &spec).unwrap());
    }

    #[test]
    fn errors() {
        assert!(split(&[], &SplitSpec::default()).is_err());
        assert!(split(&slides(0, 5), &SplitSpec::default()).is_err());
        let bad = SplitSpec { fractions: [0.5, 0.2, 0.2], ..SplitSpec::default() };
        assert!(split(&slides(3, 3), &bad).is_err());
        let mut dup = slides(2, 2);
        dup[1].0 = dup[0].0.clone();
        assert!(split(&dup, &SplitSpec::default()).is_err());
    }
}
