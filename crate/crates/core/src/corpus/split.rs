//! Deterministic stratified train/validation/test splitting.

use std::collections::BTreeMap;

use crate::numerics::Rng;

use super::CorpusError;

/// Train/validation/test fractions; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

/// The published 80/15/5 split.
pub const PAPER_SPLIT: SplitRatios = SplitRatios {
    train: 0.80,
    val: 0.15,
    test: 0.05,
};

#[derive(Debug, Clone)]
pub struct SplitOutcome<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
    pub warnings: Vec<String>,
}

impl<T> Default for SplitOutcome<T> {
    fn default() -> Self {
        SplitOutcome {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

fn fnv64(text: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for byte in text.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Split records per stratum: shuffle deterministically under `seed`, cut
/// at `floor(train * n)` and `floor((train + val) * n)`, test takes the
/// remainder. Strata with fewer than 3 records go wholly to train with a
/// warning.
pub fn stratified_split<T: Clone>(
    records: &[T],
    ratios: SplitRatios,
    key: impl Fn(&T) -> String,
    seed: u64,
) -> Result<SplitOutcome<T>, CorpusError> {
    let sum = ratios.train + ratios.val + ratios.test;
    if (sum - 1.0).abs() > 1e-9 || ratios.train < 0.0 || ratios.val < 0.0 || ratios.test < 0.0 {
        return Err(CorpusError::BadRatios(vec![
            ratios.train,
            ratios.val,
            ratios.test,
        ]));
    }

    // Group indices per stratum; sorted stratum order keeps the outcome
    // independent of record order across strata.
    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, record) in records.iter().enumerate() {
        strata.entry(key(record)).or_default().push(i);
    }

    let mut outcome = SplitOutcome::default();
    for (stratum, mut indices) in strata {
        let n = indices.len();
        if n < 3 {
            outcome.warnings.push(format!(
                "stratum {stratum:?} has only {n} record(s); assigning all to train"
            ));
            outcome
                .train
                .extend(indices.iter().map(|&i| records[i].clone()));
            continue;
        }
        let mut rng = Rng::with_stream(seed, fnv64(&stratum));
        rng.shuffle(&mut indices);
        let train_cut = (ratios.train * n as f64).floor() as usize;
        let val_cut = ((ratios.train + ratios.val) * n as f64).floor() as usize;
        for (pos, &i) in indices.iter().enumerate() {
            if pos < train_cut {
                outcome.train.push(records[i].clone());
            } else if pos < val_cut {
                outcome.val.push(records[i].clone());
            } else {
                outcome.test.push(records[i].clone());
            }
        }
    }
    Ok(outcome)
}
