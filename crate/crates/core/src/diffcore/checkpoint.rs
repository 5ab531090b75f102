use super::param::ParamVector;
use super::{DiffError, Result};

/// Sparse snapshots of an inner-loop parameter trajectory.
///
/// States at block boundaries (`k % block == 0`) and the latest state are
/// retained; anything in between is recomputed on demand by replaying the
/// deterministic step function from the nearest earlier snapshot. For a
/// trajectory of K steps at block size B this retains at most ceil(K/B) + 1
/// snapshots.
pub struct CheckpointStore {
    block: usize,
    snaps: Vec<(usize, ParamVector)>,
    /// Most recent non-boundary state; superseded by later records.
    tail: Option<(usize, ParamVector)>,
    final_step: usize,
    replay_steps: std::cell::Cell<usize>,
}

impl CheckpointStore {
    pub fn new(initial: ParamVector, block: usize) -> Self {
        assert!(block >= 1, "block size must be at least 1");
        CheckpointStore {
            block,
            snaps: vec![(0, initial)],
            tail: None,
            final_step: 0,
            replay_steps: std::cell::Cell::new(0),
        }
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    pub fn final_step(&self) -> usize {
        self.final_step
    }

    /// Record the state after step `k` (i.e. theta_k). Must be called with
    /// strictly increasing `k`.
    pub fn record(&mut self, k: usize, state: &ParamVector) {
        assert!(k > self.final_step, "records must arrive in order");
        self.final_step = k;
        if k % self.block == 0 {
            self.snaps.push((k, state.clone()));
            self.tail = None;
        } else {
            self.tail = Some((k, state.clone()));
        }
    }

    /// Number of parameter states currently held.
    pub fn retained_count(&self) -> usize {
        self.snaps.len() + usize::from(self.tail.is_some())
    }

    /// Steps replayed by `replay` calls so far (instrumentation).
    pub fn replayed_steps(&self) -> usize {
        self.replay_steps.get()
    }

    fn stored(&self, k: usize) -> Option<&ParamVector> {
        if let Some((tk, v)) = &self.tail {
            if *tk == k {
                return Some(v);
            }
        }
        self.snaps.iter().find(|(sk, _)| *sk == k).map(|(_, v)| v)
    }

    /// State after step `k`, either directly from a snapshot or by replaying
    /// `stepper` from the nearest earlier snapshot. `stepper(j, theta_j)` must
    /// deterministically produce theta_{j+1}.
    pub fn replay(
        &self,
        k: usize,
        stepper: &mut dyn FnMut(usize, &ParamVector) -> Result<ParamVector>,
    ) -> Result<ParamVector> {
        if k > self.final_step {
            return Err(DiffError::StepOutOfRange { index: k, max: self.final_step });
        }
        if let Some(v) = self.stored(k) {
            return Ok(v.clone());
        }
        let mut best: Option<(usize, &ParamVector)> = None;
        for (sk, v) in &self.snaps {
            if *sk <= k && best.map_or(true, |(bk, _)| *sk > bk) {
                best = Some((*sk, v));
            }
        }
        if let Some((tk, v)) = &self.tail {
            if *tk <= k && best.map_or(true, |(bk, _)| *tk > bk) {
                best = Some((*tk, v));
            }
        }
        let (start, state) = best.expect("step 0 is always stored");
        let mut cur = state.clone();
        for j in start..k {
            cur = stepper(j, &cur)?;
            self.replay_steps.set(self.replay_steps.get() + 1);
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{ParamLayout, SegmentSpec};

    fn state(v: f64) -> ParamVector {
        let layout = ParamLayout::new(vec![SegmentSpec::new("w", 1, 1)]);
        ParamVector::from_flat(layout, vec![v]).unwrap()
    }

    /// Deterministic nonlinear step so replay mistakes are visible.
    fn step(_k: usize, x: &ParamVector) -> Result<ParamVector> {
        let v = x.data()[0];
        Ok(state(v * 1.5 + 0.25))
    }

    fn run(k_steps: usize, block: usize) -> (CheckpointStore, Vec<ParamVector>) {
        let mut all = vec![state(1.0)];
        let mut store = CheckpointStore::new(state(1.0), block);
        for k in 0..k_steps {
            let next = step(k, &all[k]).unwrap();
            store.record(k + 1, &next);
            all.push(next);
        }
        (store, all)
    }

    #[test]
    fn snapshot_hit_avoids_recomputation() {
        let (store, all) = run(4, 1);
        // Block 1 stores everything, so no stepper calls happen.
        let got = store.replay(3, &mut |_, _| panic!("should not recompute")).unwrap();
        assert_eq!(got, all[3]);
        assert_eq!(store.replayed_steps(), 0);
    }

    #[test]
    fn step_zero_returns_initial_parameters() {
        let (store, all) = run(4, 2);
        let got = store.replay(0, &mut step).unwrap();
        assert_eq!(got, all[0]);
    }

    #[test]
    fn replay_between_snapshots_is_bit_exact() {
        // Reference run retains every state; block 3 must reproduce each one
        // bit for bit by replaying from the nearest earlier snapshot.
        let (store, all) = run(7, 3);
        for k in 0..=7 {
            let got = store.replay(k, &mut step).unwrap();
            assert_eq!(got, all[k], "state {k} differs");
        }
    }

    #[test]
    fn retained_count_matches_block_formula() {
        for (k, b) in [(2usize, 1usize), (2, 2), (3, 2), (4, 2), (8, 3), (5, 5)] {
            let (store, _) = run(k, b);
            let expected = k.div_ceil(b) + 1;
            assert_eq!(store.retained_count(), expected, "K={k} B={b}");
        }
    }

    #[test]
    fn out_of_range_step_is_rejected() {
        let (store, _) = run(2, 1);
        assert!(matches!(
            store.replay(3, &mut step),
            Err(DiffError::StepOutOfRange { index: 3, max: 2 })
        ));
    }
}
