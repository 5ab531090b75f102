//! Inner-loop adaptation: K steps of plain gradient descent on the weighted
//! supervised loss, touching adapter parameters only. The trajectory is
//! recorded through a checkpoint store so meta-differentiation can replay any
//! intermediate state bit-exactly.

use std::sync::Arc;

use crate::diffcore::{
    read_param_grads, CheckpointStore, DiffError, NodeId, ParamLayout, ParamNodes, ParamVector,
    Result, Scalar, Tape,
};
use crate::seqmodel::{build_nll, LoraApply, LoraConfig, LoraDelta, ModelParams};
use crate::taskgen::TrainSeq;

/// Inner-loop settings: step count K, learning rate, and whether scores
/// weight the loss (unweighted runs fix every weight at 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerConfig {
    pub steps: usize,
    pub lr: f64,
    pub weighted: bool,
}

impl InnerConfig {
    pub fn new(steps: usize, lr: f64) -> Self {
        InnerConfig { steps, lr, weighted: true }
    }
}

/// Anything the inner loop can descend on: a set of per-example losses over
/// one adapter-shaped parameter vector.
pub trait InnerProblem: Sync {
    fn delta_layout(&self) -> Arc<ParamLayout>;
    fn num_examples(&self) -> usize;
    /// Per-example loss nodes, in example order, on the caller's tape.
    fn build_example_losses<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        delta: &ParamNodes,
    ) -> Result<Vec<NodeId>>;
}

/// Score-weighted sum of losses with scores as plain constants. A sum, not a
/// mean; the weights are the normalization.
pub fn weighted_loss_consts<S: Scalar>(
    tape: &mut Tape<S>,
    losses: &[NodeId],
    scores: &[f64],
) -> NodeId {
    debug_assert_eq!(losses.len(), scores.len());
    let mut acc = tape.constant_scalar(0.0);
    for (&l, &s) in losses.iter().zip(scores) {
        let w = tape.scale(l, s);
        acc = tape.add(acc, w);
    }
    acc
}

/// Score-weighted sum with scores as tape nodes (differentiable weights).
pub fn weighted_loss_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    losses: &[NodeId],
    scores: &[NodeId],
) -> NodeId {
    debug_assert_eq!(losses.len(), scores.len());
    let mut acc = tape.constant_scalar(0.0);
    for (&l, &s) in losses.iter().zip(scores) {
        let w = tape.mul(s, l);
        acc = tape.add(acc, w);
    }
    acc
}

/// One gradient-descent step on the weighted loss: delta - lr * grad.
/// This is the single code path used by forward adaptation, checkpoint
/// replay and the adjoint backend, so replays are bit-exact.
pub fn inner_step_value<P: InnerProblem + ?Sized>(
    problem: &P,
    delta: &ParamVector,
    scores: &[f64],
    lr: f64,
) -> Result<ParamVector> {
    if problem.num_examples() == 0 {
        return Ok(delta.clone());
    }
    let mut tape: Tape<f64> = Tape::new();
    let leaves = tape.param_leaves(delta, None, true)?;
    let losses = problem.build_example_losses(&mut tape, &leaves)?;
    if losses.len() != scores.len() {
        return Err(DiffError::Contract(format!(
            "{} losses but {} scores",
            losses.len(),
            scores.len()
        )));
    }
    let loss = weighted_loss_consts(&mut tape, &losses, scores);
    let adj = tape.backward(loss)?;
    let g = read_param_grads(&tape, &adj, &leaves)?;
    let mut next = delta.clone();
    next.add_scaled(&g, -lr)?;
    if let Some(seg) = next.first_nonfinite_segment() {
        return Err(DiffError::NumericFault {
            segment: seg.to_string(),
            context: "inner step".into(),
        });
    }
    Ok(next)
}

/// Recorded inner-loop run: initial state, checkpointed trajectory, the
/// scores used, and the final adapter state.
pub struct AdaptTrajectory {
    pub delta0: ParamVector,
    pub store: CheckpointStore,
    pub scores: Vec<f64>,
    pub cfg: InnerConfig,
    pub final_delta: ParamVector,
}

/// Run K inner steps over any [`InnerProblem`], recording the trajectory.
/// A non-finite loss or gradient aborts and discards the trajectory.
pub fn run_inner<P: InnerProblem + ?Sized>(
    problem: &P,
    delta0: &ParamVector,
    scores: &[f64],
    cfg: &InnerConfig,
    block: usize,
) -> Result<AdaptTrajectory> {
    if problem.num_examples() != scores.len() {
        return Err(DiffError::Contract(format!(
            "{} examples but {} scores",
            problem.num_examples(),
            scores.len()
        )));
    }
    let mut store = CheckpointStore::new(delta0.clone(), block);
    let mut cur = delta0.clone();
    for k in 0..cfg.steps {
        cur = inner_step_value(problem, &cur, scores, cfg.lr)?;
        store.record(k + 1, &cur);
    }
    Ok(AdaptTrajectory {
        delta0: delta0.clone(),
        store,
        scores: scores.to_vec(),
        cfg: *cfg,
        final_delta: cur,
    })
}

/// The model-backed inner problem: weighted cross-entropy on parsed auxiliary
/// training sequences, trainable through the adapter only.
pub struct ModelInnerProblem<'a> {
    pub params: &'a ModelParams,
    pub lora_cfg: LoraConfig,
    pub seqs: &'a [TrainSeq],
}

impl InnerProblem for ModelInnerProblem<'_> {
    fn delta_layout(&self) -> Arc<ParamLayout> {
        crate::seqmodel::lora_layout(&self.params.dims, self.lora_cfg.rank)
    }

    fn num_examples(&self) -> usize {
        self.seqs.len()
    }

    fn build_example_losses<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        delta: &ParamNodes,
    ) -> Result<Vec<NodeId>> {
        let base = tape.param_leaves(&self.params.vector, None, false)?;
        let apply = LoraApply { nodes: delta, scale: self.lora_cfg.scale };
        self.seqs
            .iter()
            .map(|seq| {
                build_nll(tape, &self.params.dims, &base, Some(&apply), &seq.tokens, &seq.mask)
            })
            .collect()
    }
}

/// Weighted inner loss value: sum of score-weighted per-example mean
/// cross-entropies.
pub fn inner_loss(
    params: &ModelParams,
    delta: &LoraDelta,
    examples: &[TrainSeq],
    scores: &[f64],
) -> Result<f64> {
    if examples.len() != scores.len() {
        return Err(DiffError::Contract(format!(
            "{} examples but {} scores",
            examples.len(),
            scores.len()
        )));
    }
    let problem = ModelInnerProblem { params, lora_cfg: delta.cfg, seqs: examples };
    let mut tape: Tape<f64> = Tape::new();
    let leaves = tape.param_leaves(&delta.vector, None, false)?;
    let losses = problem.build_example_losses(&mut tape, &leaves)?;
    let total = weighted_loss_consts(&mut tape, &losses, scores);
    tape.scalar_value(total)
}

/// Score-weighted adaptation of the adapter on parsed examples.
pub fn adapt(
    params: &ModelParams,
    delta0: &LoraDelta,
    examples: &[TrainSeq],
    scores: &[f64],
    cfg: &InnerConfig,
    block: usize,
) -> Result<AdaptTrajectory> {
    let problem = ModelInnerProblem { params, lora_cfg: delta0.cfg, seqs: examples };
    run_inner(&problem, &delta0.vector, scores, cfg, block)
}

/// Adaptation with every weight fixed at 1 (the test-time update).
pub fn adapt_unweighted(
    params: &ModelParams,
    delta0: &LoraDelta,
    examples: &[TrainSeq],
    cfg: &InnerConfig,
    block: usize,
) -> Result<AdaptTrajectory> {
    let ones = vec![1.0; examples.len()];
    let unweighted = InnerConfig { weighted: false, ..*cfg };
    adapt(params, delta0, examples, &ones, &unweighted, block)
}

impl AdaptTrajectory {
    pub fn final_lora(&self, cfg: LoraConfig) -> LoraDelta {
        LoraDelta::from_vector(cfg, self.final_delta.clone())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::diffcore::SegmentSpec;
    use crate::seqmodel::{nll_value, TransformerDims};
    use crate::taskgen::{DifficultyConfig, TaskSampler};

    /// Single scalar example with loss (w - 1)^2 / 2.
    pub(crate) struct ScalarQuadratic;

    impl InnerProblem for ScalarQuadratic {
        fn delta_layout(&self) -> Arc<ParamLayout> {
            ParamLayout::new(vec![SegmentSpec::new("w", 1, 1)])
        }
        fn num_examples(&self) -> usize {
            1
        }
        fn build_example_losses<S: Scalar>(
            &self,
            tape: &mut Tape<S>,
            delta: &ParamNodes,
        ) -> Result<Vec<NodeId>> {
            let w = delta.id("w");
            let centered = tape.affine(w, 1.0, -1.0);
            let sq = tape.mul(centered, centered);
            Ok(vec![tape.scale(sq, 0.5)])
        }
    }

    fn model_fixture() -> (ModelParams, Vec<TrainSeq>) {
        let dims = TransformerDims { vocab: 40, dim: 8, blocks: 2, heads: 2, context: 64 };
        let params = ModelParams::init(dims, 31);
        let sampler = TaskSampler::new(DifficultyConfig::default(), None);
        let seqs: Vec<TrainSeq> = (0..3).map(|s| sampler.sample(s).gold_sequence()).collect();
        (params, seqs)
    }

    #[test]
    fn quadratic_single_step_closed_form() {
        // w0 = 0, score 1, lr 0.1: gradient is (w - 1) = -1, so w1 = 0.1.
        let p = ScalarQuadratic;
        let delta0 = ParamVector::zeros(p.delta_layout());
        let traj = run_inner(&p, &delta0, &[1.0], &InnerConfig::new(1, 0.1), 1).unwrap();
        assert!((traj.final_delta.data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let (params, seqs) = model_fixture();
        let delta0 = LoraDelta::init(&params.dims, LoraConfig::default(), 1);
        let traj =
            adapt(&params, &delta0, &seqs, &[0.5, 0.5, 0.5], &InnerConfig::new(0, 0.1), 1).unwrap();
        assert_eq!(traj.final_delta, delta0.vector);
    }

    #[test]
    fn all_zero_scores_freeze_the_adapter() {
        let (params, seqs) = model_fixture();
        let delta0 = LoraDelta::init(&params.dims, LoraConfig::default(), 2);
        let traj = adapt(&params, &delta0, &seqs, &[0.0; 3], &InnerConfig::new(3, 0.1), 1).unwrap();
        assert_eq!(traj.final_delta, delta0.vector);
    }

    #[test]
    fn inner_loss_weighted_sum_cases() {
        let (params, seqs) = model_fixture();
        let delta = LoraDelta::init(&params.dims, LoraConfig::default(), 3);

        // All scores zero.
        assert_eq!(inner_loss(&params, &delta, &seqs, &[0.0; 3]).unwrap(), 0.0);

        // One example with weight 1 equals its nll.
        let single = &seqs[..1];
        let l = inner_loss(&params, &delta, single, &[1.0]).unwrap();
        let n = nll_value(&params, Some(&delta), &seqs[0].tokens, &seqs[0].mask).unwrap();
        assert!((l - n).abs() < 1e-15);

        // Two identical examples at half weight each: exactly one nll,
        // a weighted sum rather than a mean.
        let pair = vec![seqs[0].clone(), seqs[0].clone()];
        let l2 = inner_loss(&params, &delta, &pair, &[0.5, 0.5]).unwrap();
        assert_eq!(l2, n);

        // Misaligned lengths.
        assert!(inner_loss(&params, &delta, &seqs, &[1.0]).is_err());
    }

    #[test]
    fn unweighted_equals_unit_scores_bitwise() {
        let (params, seqs) = model_fixture();
        let delta0 = LoraDelta::init(&params.dims, LoraConfig::default(), 4);
        let cfg = InnerConfig::new(2, 0.1);
        let a = adapt(&params, &delta0, &seqs, &[1.0; 3], &cfg, 1).unwrap();
        let b = adapt_unweighted(&params, &delta0, &seqs, &cfg, 1).unwrap();
        assert_eq!(a.final_delta, b.final_delta);
    }

    #[test]
    fn empty_example_list_is_identity() {
        let (params, _) = model_fixture();
        let delta0 = LoraDelta::init(&params.dims, LoraConfig::default(), 5);
        let traj = adapt_unweighted(&params, &delta0, &[], &InnerConfig::new(2, 0.1), 1).unwrap();
        assert_eq!(traj.final_delta, delta0.vector);
    }

    #[test]
    fn one_step_reduces_training_loss() {
        let (params, seqs) = model_fixture();
        let delta0 = LoraDelta::init(&params.dims, LoraConfig::default(), 6);
        let before = inner_loss(&params, &delta0, &seqs, &[1.0; 3]).unwrap();
        let traj = adapt_unweighted(&params, &delta0, &seqs, &InnerConfig::new(1, 0.1), 1).unwrap();
        let after_delta = traj.final_lora(delta0.cfg);
        let after = inner_loss(&params, &after_delta, &seqs, &[1.0; 3]).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn base_parameters_never_move() {
        let (params, seqs) = model_fixture();
        let hash_before = params.vector.content_hash();
        let delta0 = LoraDelta::init(&params.dims, LoraConfig::default(), 7);
        let _ = adapt_unweighted(&params, &delta0, &seqs, &InnerConfig::new(2, 0.1), 1).unwrap();
        assert_eq!(params.vector.content_hash(), hash_before);
    }

    #[test]
    fn replaying_the_trajectory_is_bit_exact() {
        let (params, seqs) = model_fixture();
        let delta0 = LoraDelta::init(&params.dims, LoraConfig::default(), 8);
        let cfg = InnerConfig::new(4, 0.05);
        let problem = ModelInnerProblem { params: &params, lora_cfg: delta0.cfg, seqs: &seqs };
        let scores = [0.9, 0.4, 0.7];
        let traj = run_inner(&problem, &delta0.vector, &scores, &cfg, 2).unwrap();
        let mut stepper =
            |_k: usize, d: &ParamVector| inner_step_value(&problem, d, &scores, cfg.lr);
        let replayed = traj.store.replay(4, &mut stepper).unwrap();
        assert_eq!(replayed, traj.final_delta);
        let mid = traj.store.replay(3, &mut stepper).unwrap();
        let again = inner_step_value(&problem, &mid, &scores, cfg.lr).unwrap();
        assert_eq!(again, traj.final_delta);
    }

    #[test]
    fn doubling_scores_and_halving_lr_is_exact() {
        let (params, seqs) = model_fixture();
        let delta0 = LoraDelta::init(&params.dims, LoraConfig::default(), 9);
        let scores = [0.25, 0.5, 0.75];
        let doubled: Vec<f64> = scores.iter().map(|s| s * 2.0).collect();
        let a = adapt(&params, &delta0, &seqs, &scores, &InnerConfig::new(1, 0.1), 1).unwrap();
        let b = adapt(&params, &delta0, &seqs, &doubled, &InnerConfig::new(1, 0.05), 1).unwrap();
        assert_eq!(a.final_delta, b.final_delta);
    }
}
