//! Deterministic, serializable iteration schemes: sequential/shuffled
//! minibatches, cross-validation folds, bootstrap resampling.
//!
//! A scheme is an endless generator of index batches separated by epoch-end
//! markers. Saving its [`SchemeState`] at any request boundary and
//! restoring replays exactly the remaining requests, including all later
//! epochs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Rng, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LastBatchPolicy {
    /// Emit the final short batch of an epoch.
    Keep,
    /// Drop indices that do not fill a whole batch.
    Drop,
}

/// One step of a scheme.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SchemeStep {
    Batch(Vec<usize>),
    EpochEnd,
}

#[derive(Clone, Debug)]
enum Order {
    /// Identity order over `0..n`.
    Range,
    /// Explicit index list (cross-validation folds).
    Explicit(Vec<usize>),
    /// Reshuffled (or redrawn) at each epoch start; `None` between epochs.
    PerEpoch(Option<Vec<usize>>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Sequential,
    Shuffled,
    Bootstrap,
}

/// Deterministic index-batch generator over one dataset split.
#[derive(Clone, Debug)]
pub struct Scheme {
    kind: Kind,
    num_examples: usize,
    batch_size: usize,
    policy: LastBatchPolicy,
    order: Order,
    cursor: usize,
    rng: Option<Rng>,
}

fn check_sizes(n: usize, batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if n > u32::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "{n} examples exceed the 32-bit index space"
        )));
    }
    Ok(())
}

impl Scheme {
    /// Batches `[0..b), [b..2b), ...` each epoch.
    pub fn sequential(n: usize, batch_size: usize, policy: LastBatchPolicy) -> Result<Scheme> {
        check_sizes(n, batch_size)?;
        Ok(Scheme {
            kind: Kind::Sequential,
            num_examples: n,
            batch_size,
            policy,
            order: Order::Range,
            cursor: 0,
            rng: None,
        })
    }

    /// Sequential batches over an explicit index list.
    pub fn sequential_indices(
        indices: Vec<usize>,
        batch_size: usize,
        policy: LastBatchPolicy,
    ) -> Result<Scheme> {
        check_sizes(indices.len(), batch_size)?;
        Ok(Scheme {
            kind: Kind::Sequential,
            num_examples: indices.len(),
            batch_size,
            policy,
            order: Order::Explicit(indices),
            cursor: 0,
            rng: None,
        })
    }

    /// Fisher-Yates reshuffle of `0..n` at each epoch start; the generator
    /// persists across epochs, so every epoch gets a fresh permutation.
    pub fn shuffled(
        n: usize,
        batch_size: usize,
        seed: u64,
        policy: LastBatchPolicy,
    ) -> Result<Scheme> {
        check_sizes(n, batch_size)?;
        Ok(Scheme {
            kind: Kind::Shuffled,
            num_examples: n,
            batch_size,
            policy,
            order: Order::PerEpoch(None),
            cursor: 0,
            rng: Some(Rng::seed(seed)),
        })
    }

    /// Each epoch draws `n` indices with replacement, then batches them
    /// sequentially.
    pub fn bootstrap(
        n: usize,
        batch_size: usize,
        seed: u64,
        policy: LastBatchPolicy,
    ) -> Result<Scheme> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "bootstrap needs at least one example".into(),
            ));
        }
        check_sizes(n, batch_size)?;
        Ok(Scheme {
            kind: Kind::Bootstrap,
            num_examples: n,
            batch_size,
            policy,
            order: Order::PerEpoch(None),
            cursor: 0,
            rng: Some(Rng::seed(seed)),
        })
    }

    pub fn num_examples(&self) -> usize {
        self.num_examples
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Checks every index the scheme can emit against a dataset size.
    pub fn validate_for(&self, dataset_examples: usize) -> Result<()> {
        match &self.order {
            Order::Explicit(indices) => {
                for &i in indices {
                    if i >= dataset_examples {
                        return Err(Error::SizeMismatch(format!(
                            "scheme index {i} outside dataset of {dataset_examples} examples"
                        )));
                    }
                }
                Ok(())
            }
            _ if self.num_examples == dataset_examples => Ok(()),
            _ => Err(Error::SizeMismatch(format!(
                "scheme over {} examples, dataset has {dataset_examples}",
                self.num_examples
            ))),
        }
    }

    fn epoch_len(&self) -> usize {
        match self.policy {
            LastBatchPolicy::Keep => self.num_examples,
            LastBatchPolicy::Drop => self.num_examples - self.num_examples % self.batch_size,
        }
    }

    fn materialize_epoch(&mut self) {
        if let Order::PerEpoch(slot @ None) = &mut self.order {
            let rng = self.rng.as_mut().expect("stochastic scheme owns an rng");
            let order = match self.kind {
                Kind::Shuffled => {
                    let mut order: Vec<usize> = (0..self.num_examples).collect();
                    rng.shuffle(&mut order);
                    order
                }
                Kind::Bootstrap => (0..self.num_examples)
                    .map(|_| {
                        rng.bounded(self.num_examples as u32).expect("n >= 1") as usize
                    })
                    .collect(),
                Kind::Sequential => unreachable!("sequential order is never per-epoch"),
            };
            *slot = Some(order);
        }
    }

    /// Next batch of indices, or the epoch-end marker. Endless; the stream
    /// layer decides when a pipeline is exhausted.
    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> SchemeStep {
        self.materialize_epoch();
        let end = self.epoch_len();
        if self.cursor >= end {
            self.cursor = 0;
            if let Order::PerEpoch(slot) = &mut self.order {
                *slot = None;
            }
            return SchemeStep::EpochEnd;
        }
        let stop = (self.cursor + self.batch_size).min(end);
        let batch: Vec<usize> = match &self.order {
            Order::Range => (self.cursor..stop).collect(),
            Order::Explicit(indices) => indices[self.cursor..stop].to_vec(),
            Order::PerEpoch(slot) => {
                slot.as_ref().expect("materialized above")[self.cursor..stop].to_vec()
            }
        };
        self.cursor = stop;
        SchemeStep::Batch(batch)
    }

    pub fn save_state(&self) -> SchemeState {
        let kind = match self.kind {
            Kind::Sequential => "sequential",
            Kind::Shuffled => "shuffled",
            Kind::Bootstrap => "bootstrap",
        };
        let (indices, epoch_order) = match &self.order {
            Order::Range => (None, None),
            Order::Explicit(list) => (
                Some(list.iter().map(|&v| v as u64).collect::<Vec<u64>>()),
                None,
            ),
            Order::PerEpoch(slot) => (
                None,
                slot.as_ref()
                    .map(|o| o.iter().map(|&v| v as u64).collect::<Vec<u64>>()),
            ),
        };
        SchemeState {
            kind: kind.into(),
            num_examples: self.num_examples as u64,
            batch_size: self.batch_size as u64,
            policy: self.policy,
            cursor: self.cursor as u64,
            indices,
            epoch_order,
            rng: self.rng.as_ref().map(RngState::capture),
        }
    }

    pub fn restore(state: &SchemeState) -> Result<Scheme> {
        let n = state.num_examples as usize;
        let batch_size = state.batch_size as usize;
        let to_usize = |v: &Vec<u64>| v.iter().map(|&x| x as usize).collect::<Vec<usize>>();
        let mut scheme = match state.kind.as_str() {
            "sequential" => match &state.indices {
                Some(list) => Scheme::sequential_indices(to_usize(list), batch_size, state.policy)?,
                None => Scheme::sequential(n, batch_size, state.policy)?,
            },
            "shuffled" | "bootstrap" => {
                let rng = state
                    .rng
                    .as_ref()
                    .ok_or_else(|| Error::StateMismatch("stochastic scheme without rng".into()))?
                    .restore()?;
                let mut scheme = if state.kind == "shuffled" {
                    Scheme::shuffled(n, batch_size, 0, state.policy)?
                } else {
                    Scheme::bootstrap(n, batch_size, 0, state.policy)?
                };
                scheme.rng = Some(rng);
                if let Some(order) = &state.epoch_order {
                    let order = to_usize(order);
                    if order.len() != n {
                        return Err(Error::StateMismatch(format!(
                            "epoch order of {} entries for {n} examples",
                            order.len()
                        )));
                    }
                    scheme.order = Order::PerEpoch(Some(order));
                }
                scheme
            }
            other => {
                return Err(Error::StateMismatch(format!(
                    "unknown scheme kind {other:?}"
                )))
            }
        };
        let limit = match &scheme.order {
            Order::PerEpoch(None) => 0,
            _ => scheme.epoch_len(),
        };
        if state.cursor as usize > limit {
            return Err(Error::StateMismatch(format!(
                "cursor {} beyond epoch of {limit}",
                state.cursor
            )));
        }
        scheme.cursor = state.cursor as usize;
        Ok(scheme)
    }
}

/// Serializable cursor of a [`Scheme`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeState {
    pub kind: String,
    pub num_examples: u64,
    pub batch_size: u64,
    pub policy: LastBatchPolicy,
    /// Next position within the current epoch's order.
    pub cursor: u64,
    /// Explicit index list (sequential-over-indices schemes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<u64>>,
    /// Materialized order of the current epoch (shuffled/bootstrap,
    /// mid-epoch only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch_order: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng: Option<RngState>,
}

/// Contiguous-block k-fold split: fold f's validation indices are one block,
/// the first `n mod k` folds one element larger; train is the ascending
/// complement. Both come back as sequential example-level schemes.
pub fn cross_validation(n: usize, k: usize) -> Result<Vec<(Scheme, Scheme)>> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} examples into {k} folds"
        )));
    }
    let base = n / k;
    let remainder = n % k;
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let start = f * base + f.min(remainder);
        let stop = start + base + usize::from(f < remainder);
        let valid: Vec<usize> = (start..stop).collect();
        let train: Vec<usize> = (0..n).filter(|i| *i < start || *i >= stop).collect();
        folds.push((
            Scheme::sequential_indices(train, 1, LastBatchPolicy::Keep)?,
            Scheme::sequential_indices(valid, 1, LastBatchPolicy::Keep)?,
        ));
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn collect_steps(scheme: &mut Scheme, count: usize) -> Vec<SchemeStep> {
        (0..count).map(|_| scheme.next()).collect()
    }

    fn batches_of_one_epoch(scheme: &mut Scheme) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        loop {
            match scheme.next() {
                SchemeStep::Batch(b) => out.push(b),
                SchemeStep::EpochEnd => return out,
            }
        }
    }

    #[test]
    fn sequential_keep_and_drop() {
        let mut keep = Scheme::sequential(5, 2, LastBatchPolicy::Keep).unwrap();
        assert_eq!(
            batches_of_one_epoch(&mut keep),
            vec![vec![0, 1], vec![2, 3], vec![4]]
        );
        let mut drop = Scheme::sequential(5, 2, LastBatchPolicy::Drop).unwrap();
        assert_eq!(batches_of_one_epoch(&mut drop), vec![vec![0, 1], vec![2, 3]]);

        let mut empty = Scheme::sequential(0, 2, LastBatchPolicy::Keep).unwrap();
        assert_eq!(empty.next(), SchemeStep::EpochEnd);
        assert_eq!(empty.next(), SchemeStep::EpochEnd);

        assert!(Scheme::sequential(5, 0, LastBatchPolicy::Keep).is_err());
    }

    #[test]
    fn shuffled_golden_permutation() {
        // permutation for n=4, seed=42 precomputed with the standalone
        // PCG32/Fisher-Yates oracle: [2, 1, 0, 3]
        let mut scheme = Scheme::shuffled(4, 2, 42, LastBatchPolicy::Keep).unwrap();
        assert_eq!(
            batches_of_one_epoch(&mut scheme),
            vec![vec![2, 1], vec![0, 3]]
        );
        // rng persists: second epoch uses the next permutation [0, 3, 1, 2]
        assert_eq!(
            batches_of_one_epoch(&mut scheme),
            vec![vec![0, 3], vec![1, 2]]
        );
    }

    #[test]
    fn single_example_shuffle_is_identity() {
        for seed in [0, 1, 99] {
            let mut scheme = Scheme::shuffled(1, 4, seed, LastBatchPolicy::Keep).unwrap();
            assert_eq!(scheme.next(), SchemeStep::Batch(vec![0]));
            assert_eq!(scheme.next(), SchemeStep::EpochEnd);
        }
    }

    #[test]
    fn same_seed_same_epochs() {
        let mut a = Scheme::shuffled(16, 5, 7, LastBatchPolicy::Keep).unwrap();
        let mut b = Scheme::shuffled(16, 5, 7, LastBatchPolicy::Keep).unwrap();
        for _ in 0..40 {
            assert_eq!(a.next(), b.next());
        }
    }

    #[test]
    fn shuffled_epoch_is_permutation() {
        let mut scheme = Scheme::shuffled(33, 4, 3, LastBatchPolicy::Keep).unwrap();
        let mut seen: Vec<usize> = batches_of_one_epoch(&mut scheme).concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..33).collect::<Vec<_>>());
    }

    #[test]
    fn bootstrap_golden_and_stats() {
        // n=5, seed=11 -> first epoch order [0, 1, 0, 3, 4] per the oracle
        let mut scheme = Scheme::bootstrap(5, 5, 11, LastBatchPolicy::Keep).unwrap();
        assert_eq!(
            batches_of_one_epoch(&mut scheme),
            vec![vec![0, 1, 0, 3, 4]]
        );

        let mut one = Scheme::bootstrap(1, 1, 123, LastBatchPolicy::Keep).unwrap();
        assert_eq!(one.next(), SchemeStep::Batch(vec![0]));

        assert!(Scheme::bootstrap(0, 1, 0, LastBatchPolicy::Keep).is_err());

        // expected distinct fraction over an epoch: 1 - (1 - 1/n)^n
        let n = 100;
        let mut scheme = Scheme::bootstrap(n, n, 5, LastBatchPolicy::Keep).unwrap();
        let epochs = 400;
        let mut distinct_total = 0usize;
        for _ in 0..epochs {
            let epoch = batches_of_one_epoch(&mut scheme).concat();
            let mut seen = vec![false; n];
            for i in epoch {
                seen[i] = true;
            }
            distinct_total += seen.iter().filter(|s| **s).count();
        }
        let fraction = distinct_total as f64 / (epochs * n) as f64;
        assert!((fraction - 0.634).abs() < 0.02, "fraction = {fraction}");
    }

    #[test]
    fn cross_validation_blocks() {
        let folds = cross_validation(6, 3).unwrap();
        let valids: Vec<Vec<usize>> = folds
            .iter()
            .map(|(_, v)| {
                let mut v = v.clone();
                batches_of_one_epoch(&mut v).concat()
            })
            .collect();
        assert_eq!(valids, vec![vec![0, 1], vec![2, 3], vec![4, 5]]);

        let folds = cross_validation(7, 3).unwrap();
        let sizes: Vec<usize> = folds
            .iter()
            .map(|(_, v)| {
                let mut v = v.clone();
                batches_of_one_epoch(&mut v).concat().len()
            })
            .collect();
        assert_eq!(sizes, vec![3, 2, 2]);

        // union of validation folds partitions 0..n
        let mut union: Vec<usize> = folds
            .iter()
            .flat_map(|(_, v)| {
                let mut v = v.clone();
                batches_of_one_epoch(&mut v).concat()
            })
            .collect();
        union.sort_unstable();
        assert_eq!(union, (0..7).collect::<Vec<_>>());

        // train is the ascending complement
        let (train0, _) = &folds[0];
        let mut t = train0.clone();
        assert_eq!(batches_of_one_epoch(&mut t).concat(), (3..7).collect::<Vec<_>>());

        assert!(cross_validation(3, 0).is_err());
        assert!(cross_validation(3, 4).is_err());
    }

    #[test]
    fn save_before_anything_replays_fresh() {
        let fresh = Scheme::shuffled(9, 2, 21, LastBatchPolicy::Keep).unwrap();
        let state = fresh.save_state();
        let mut a = fresh.clone();
        let mut b = Scheme::restore(&state).unwrap();
        for _ in 0..30 {
            assert_eq!(a.next(), b.next());
        }
    }

    #[test]
    fn state_json_round_trip() {
        let mut scheme = Scheme::bootstrap(6, 4, 9, LastBatchPolicy::Drop).unwrap();
        for _ in 0..3 {
            scheme.next();
        }
        let state = scheme.save_state();
        let json = serde_json::to_string(&state).unwrap();
        let parsed: SchemeState = serde_json::from_str(&json).unwrap();
        let mut restored = Scheme::restore(&parsed).unwrap();
        for _ in 0..20 {
            assert_eq!(scheme.next(), restored.next());
        }
    }

    #[test]
    fn malformed_state_rejected() {
        let scheme = Scheme::shuffled(4, 2, 1, LastBatchPolicy::Keep).unwrap();
        let mut state = scheme.save_state();
        state.kind = "mystery".into();
        assert!(Scheme::restore(&state).is_err());

        let mut state = scheme.save_state();
        state.rng = None;
        assert!(Scheme::restore(&state).is_err());

        let mut state = scheme.save_state();
        state.cursor = 99;
        assert!(Scheme::restore(&state).is_err());
    }

    proptest! {
        // resume equivalence at every prefix length, all kinds
        #[test]
        fn resume_matches_uninterrupted(
            kind in 0usize..3,
            n in 1usize..12,
            batch in 1usize..5,
            seed in 0u64..500,
            prefix in 0usize..30,
            keep in proptest::bool::ANY,
        ) {
            let policy = if keep { LastBatchPolicy::Keep } else { LastBatchPolicy::Drop };
            let mut scheme = match kind {
                0 => Scheme::sequential(n, batch, policy).unwrap(),
                1 => Scheme::shuffled(n, batch, seed, policy).unwrap(),
                _ => Scheme::bootstrap(n, batch, seed, policy).unwrap(),
            };
            let _ = collect_steps(&mut scheme, prefix);
            let state = scheme.save_state();
            let json = serde_json::to_string(&state).unwrap();
            let mut restored = Scheme::restore(&serde_json::from_str(&json).unwrap()).unwrap();
            prop_assert_eq!(collect_steps(&mut scheme, 40), collect_steps(&mut restored, 40));
        }

        // every emitted index is in range; KEEP epochs of sequential and
        // shuffled schemes emit each index exactly once
        #[test]
        fn epochs_emit_each_index_once(
            n in 1usize..20,
            batch in 1usize..6,
            seed in 0u64..100,
            shuffledness in proptest::bool::ANY,
        ) {
            let mut scheme = if shuffledness {
                Scheme::shuffled(n, batch, seed, LastBatchPolicy::Keep).unwrap()
            } else {
                Scheme::sequential(n, batch, LastBatchPolicy::Keep).unwrap()
            };
            let mut seen: Vec<usize> = batches_of_one_epoch(&mut scheme).concat();
            prop_assert!(seen.iter().all(|&i| i < n));
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }
}
