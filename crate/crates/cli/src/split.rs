//! Train/validation/test splits and k-fold assignment, both stratified by
//! the number of initial failures.

use std::collections::BTreeMap;

use icube_core::cascade::CascadeRecord;
use icube_core::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Record indices of each part, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Record indices grouped by `|D|`, each group shuffled.
fn strata(records: &[CascadeRecord], seed: u64) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.initial_failed.len()).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(size, mut idx)| {
            idx.shuffle(&mut rng::rng(rng::case_stream(seed, size as u64)));
            idx
        })
        .collect()
}

/// Stratified split. Part sizes are rounded on cumulative counts, so the
/// totals match `fraction · len` rounded, however the strata divide.
pub fn split(records: &[CascadeRecord], fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CliError::Validation(format!("split fractions {fractions:?} must lie in [0, 1] and sum to 1")));
    }
    let mut out = Split { train: vec![], val: vec![], test: vec![] };
    let cut = |seen: usize, f: f64| (seen as f64 * f).round() as usize;
    let mut seen = 0;
    for group in strata(records, seed) {
        let before = seen;
        seen += group.len();
        let n_train = cut(seen, fractions[0]) - cut(before, fractions[0]);
        let n_val = cut(seen, fractions[0] + fractions[1]) - cut(before, fractions[0] + fractions[1]) - n_train;
        out.train.extend_from_slice(&group[..n_train]);
        out.val.extend_from_slice(&group[n_train..n_train + n_val]);
        out.test.extend_from_slice(&group[n_train + n_val..]);
    }
    for part in [&mut out.train, &mut out.val, &mut out.test] {
        part.sort_unstable();
    }
    Ok(out)
}

/// Fold index of every record. Strata are dealt round-robin with a running
/// offset, so fold sizes differ by at most one.
pub fn kfold(records: &[CascadeRecord], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(CliError::Validation("k-fold needs k >= 2".into()));
    }
    if records.len() < k {
        return Err(CliError::Validation(format!("{} records cannot fill {k} folds", records.len())));
    }
    let mut fold = vec![0; records.len()];
    let mut next = 0;
    for group in strata(records, seed) {
        for i in group {
            fold[i] = next % k;
            next += 1;
        }
    }
    Ok(fold)
}
