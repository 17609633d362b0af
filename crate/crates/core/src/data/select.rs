//! Train/val/test assignment and training-set holdout regimes.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};

pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// Training items matching `classes × scale_range` are removed, or, when
/// `max_count` is set, capped at that many per class. An empty class set
/// matches every class.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HoldoutSpec {
    pub classes: Vec<usize>,
    pub scale_range: Option<(f64, f64)>,
    pub max_count: Option<usize>,
}

impl HoldoutSpec {
    pub fn is_trivial(&self) -> bool {
        self.classes.is_empty() && self.scale_range.is_none() && self.max_count.is_none()
    }

    fn matches(&self, class: Option<usize>, scale: Option<f64>) -> bool {
        let class_ok = self.classes.is_empty() || class.is_some_and(|c| self.classes.contains(&c));
        let scale_ok = match self.scale_range {
            None => true,
            Some((lo, hi)) => scale.is_some_and(|s| s >= lo && s <= hi),
        };
        class_ok && scale_ok
    }
}

/// Parses `classes=3,4,5;scale=0.9:1.1` or `class=5;max=5`.
impl FromStr for HoldoutSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = HoldoutSpec::default();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("holdout clause {part:?} lacks '='")))?;
            let bad = |what: &str| Error::invalid(format!("holdout {key}: bad {what} {value:?}"));
            match key.trim() {
                "class" | "classes" => {
                    spec.classes = value
                        .split(',')
                        .map(|c| c.trim().parse::<usize>().map_err(|_| bad("class list")))
                        .collect::<Result<_>>()?;
                }
                "scale" => {
                    let (lo, hi) = value.split_once(':').ok_or_else(|| bad("interval"))?;
                    let lo: f64 = lo.trim().parse().map_err(|_| bad("interval"))?;
                    let hi: f64 = hi.trim().parse().map_err(|_| bad("interval"))?;
                    if !(lo <= hi) {
                        return Err(bad("interval"));
                    }
                    spec.scale_range = Some((lo, hi));
                }
                "max" => spec.max_count = Some(value.trim().parse().map_err(|_| bad("count"))?),
                other => return Err(Error::invalid(format!("unknown holdout key {other:?}"))),
            }
        }
        Ok(spec)
    }
}

/// Drops matching training items; val and test items are kept untouched.
pub fn holdout_filter(dataset: &Dataset, spec: &HoldoutSpec) -> Result<Dataset> {
    if spec.is_trivial() {
        return Ok(dataset.clone());
    }
    let mut kept_per_class: BTreeMap<Option<usize>, usize> = BTreeMap::new();
    let keep: Vec<usize> = (0..dataset.len())
        .filter(|&i| {
            let m = &dataset.meta()[i];
            if dataset.splits()[i] != Split::Train || !spec.matches(m.class, m.scale) {
                return true;
            }
            match spec.max_count {
                None => false,
                Some(cap) => {
                    let k = kept_per_class.entry(m.class).or_default();
                    *k += 1;
                    *k <= cap
                }
            }
        })
        .collect();
    let out = dataset.subset(&keep);
    if out.indices(Split::Train).is_empty() {
        return Err(Error::invalid("holdout leaves an empty training set"));
    }
    Ok(out)
}

/// Stratified, seeded assignment of split tags. Within each class the
/// shuffled items take `round(f_train·n)` train, `round(f_val·n)` val slots,
/// and the rest go to test.
pub fn split(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Dataset> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions must be in [0,1] and sum to 1, got ({ft}, {fv}, {fs})"
        )));
    }
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, m) in dataset.meta().iter().enumerate() {
        groups.entry(m.class).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags = vec![Split::Test; dataset.len()];
    for idx in groups.values_mut() {
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = (ft * n).round() as usize;
        let n_val = ((fv * n).round() as usize).min(idx.len() - n_train);
        for (j, &i) in idx.iter().enumerate() {
            tags[i] = if j < n_train {
                Split::Train
            } else if j < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    let mut out = dataset.clone();
    out.set_splits(tags)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_forms() {
        let a: HoldoutSpec = "classes=3,4,5;scale=0.9:1.1".parse().unwrap();
        assert_eq!(a.classes, vec![3, 4, 5]);
        assert_eq!(a.scale_range, Some((0.9, 1.1)));
        let b: HoldoutSpec = "class=5;max=5".parse().unwrap();
        assert_eq!((b.classes, b.max_count), (vec![5], Some(5)));
        assert!("scale=1.1:0.9".parse::<HoldoutSpec>().is_err());
        assert!("colour=red".parse::<HoldoutSpec>().is_err());
        assert!("".parse::<HoldoutSpec>().unwrap().is_trivial());
    }
}
