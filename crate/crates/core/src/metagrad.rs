//! Outer objectives and meta-gradients: how the outer loss moves when the
//! scorer parameters or the per-example weights move, differentiated through
//! the unrolled inner updates.
//!
//! Two backends compute the same quantities:
//!
//! * `meta_grad_unroll` keeps the whole inner loop as one differentiable
//!   graph (gradient steps included) and backpropagates the outer loss
//!   through it. Reference quality, memory grows with the step count.
//! * `meta_grad_adjoint` runs the inner loop forward with sparse
//!   checkpoints, then sweeps an adjoint state backward. Each step needs one
//!   dual-number pass, which yields the Hessian-vector product (adjoint
//!   recursion), the mixed partial (scorer gradient) and every per-example
//!   sensitivity simultaneously; the loss tangent of example i under a
//!   delta-tangent seed of lambda is exactly <lambda, grad l_i>.

use std::sync::Arc;

use crate::adapt::{
    inner_step_value, run_inner, weighted_loss_nodes, InnerConfig, InnerProblem,
};
use crate::diffcore::{
    read_param_grads, read_param_tangents, DiffError, Dual, NodeId, ParamLayout, ParamNodes,
    ParamVector, Result, Scalar, Tape,
};
use crate::seqmodel::{build_nll, LoraApply, LoraConfig, ModelParams, Token};
use crate::seqmodel::END;
use crate::taskgen::{Attempt, Task, TrainSeq};

pub use crate::taskgen::Attempt as OuterAttempt;

/// Which outer objective a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OuterVariant {
    /// Cross-entropy on the gold answer (gold solutions available).
    Gold,
    /// Mean cross-entropy on verified sampled attempts (verifier only).
    Verified,
}

/// Outer-loss specification: the variant plus the attempt budget used by the
/// verified form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuterLossSpec {
    pub variant: OuterVariant,
    pub attempts: usize,
}

/// Concrete supervised target(s) for the outer loss, fixed before
/// meta-differentiation. Attempts are sampled beforehand and held constant;
/// no gradient flows through the sampling process.
#[derive(Clone, Debug)]
pub enum OuterTarget {
    Gold(TrainSeq),
    /// Mean over the verified attempts' target sequences; always nonempty.
    VerifiedMean(Vec<TrainSeq>),
}

impl OuterTarget {
    pub fn gold(task: &Task) -> OuterTarget {
        OuterTarget::Gold(task.gold_sequence())
    }

    /// Targets from verified attempts: the answer digits plus the end marker
    /// when present, appended to the task prompt. `None` when nothing
    /// verified (the caller skips this task's meta-update).
    pub fn verified(task: &Task, attempts: &[Attempt]) -> Option<OuterTarget> {
        let seqs: Vec<TrainSeq> = attempts
            .iter()
            .filter(|a| a.verified)
            .filter_map(|a| attempt_target_seq(task, &a.tokens))
            .collect();
        if seqs.is_empty() {
            None
        } else {
            Some(OuterTarget::VerifiedMean(seqs))
        }
    }
}

/// Supervised sequence for one verified attempt: prompt plus the attempt's
/// own answer span (digit prefix and, when present, the end marker).
pub fn attempt_target_seq(task: &Task, continuation: &[Token]) -> Option<TrainSeq> {
    let mut span = 0;
    while continuation.get(span).is_some_and(|&t| crate::seqmodel::Vocab::is_digit(t)) {
        span += 1;
    }
    if span == 0 {
        return None;
    }
    if continuation.get(span) == Some(&END) {
        span += 1;
    }
    let mut tokens = task.render();
    let prefix = tokens.len();
    tokens.extend_from_slice(&continuation[..span]);
    let mut mask = vec![0u8; tokens.len()];
    for m in mask.iter_mut().skip(prefix) {
        *m = 1;
    }
    Some(TrainSeq { tokens, mask })
}

/// Inner problem extended with the scorer and the outer objective.
pub trait BilevelProblem: InnerProblem {
    fn eta_layout(&self) -> Arc<ParamLayout>;
    /// Score nodes aligned with the example losses, differentiable in eta.
    fn build_scores<S: Scalar>(&self, tape: &mut Tape<S>, eta: &ParamNodes) -> Result<Vec<NodeId>>;
    /// Outer loss as a function of the (adapted) delta leaves.
    fn build_outer<S: Scalar>(&self, tape: &mut Tape<S>, delta: &ParamNodes) -> Result<NodeId>;
}

/// Instrumentation counters for the backend comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemCounters {
    /// Parameter-layout state vectors pinned for the whole computation:
    /// the unroll backend holds every per-step delta and gradient on its
    /// graph; the adjoint backend holds only the checkpoint snapshots.
    pub retained_param_states: usize,
    /// Peak node count over the tapes involved.
    pub peak_tape_nodes: usize,
}

/// Scorer meta-gradient, per-example sensitivities and the outer loss value.
#[derive(Clone, Debug)]
pub struct MetaGrads {
    pub g_eta: ParamVector,
    pub sensitivities: Vec<f64>,
    pub outer_loss: f64,
    pub mem: MemCounters,
}

/// Reference backend: build the full differentiable graph of K inner steps
/// and backpropagate the outer loss to the scorer parameters and to every
/// example weight.
pub fn meta_grad_unroll<P: BilevelProblem + ?Sized>(
    problem: &P,
    delta0: &ParamVector,
    eta: &ParamVector,
    inner: &InnerConfig,
) -> Result<MetaGrads> {
    let mut tape: Tape<f64> = Tape::new();
    let eta_leaves = tape.param_leaves(eta, None, true)?;
    let score_nodes = problem.build_scores(&mut tape, &eta_leaves)?;
    if score_nodes.len() != problem.num_examples() {
        return Err(DiffError::Contract("scores misaligned with examples".into()));
    }
    let delta_leaves = tape.param_leaves(delta0, None, true)?;
    let layout = delta0.layout().clone();

    let mut cur = delta_leaves.ids.clone();
    let mut pinned_states = 1; // delta_0
    for _ in 0..inner.steps {
        let cur_nodes = ParamNodes { layout: layout.clone(), ids: cur.clone() };
        let losses = problem.build_example_losses(&mut tape, &cur_nodes)?;
        let l_inner = weighted_loss_nodes(&mut tape, &losses, &score_nodes);
        let adj = tape.backward(l_inner)?;
        let mut next = Vec::with_capacity(cur.len());
        for &id in &cur {
            next.push(match adj.of(id) {
                Some(g) => {
                    let step = tape.scale(g, inner.lr);
                    tape.sub(id, step)
                }
                None => id,
            });
        }
        cur = next;
        pinned_states += 2; // per-step gradient set + new delta set
    }

    let final_nodes = ParamNodes { layout, ids: cur };
    let outer = problem.build_outer(&mut tape, &final_nodes)?;
    let outer_loss = tape.scalar_value(outer)?;
    let adj = tape.backward(outer)?;
    let g_eta = read_param_grads(&tape, &adj, &eta_leaves)?;
    let sensitivities: Vec<f64> = score_nodes
        .iter()
        .map(|&s| adj.of(s).map(|g| tape.value(g).data[0]).unwrap_or(0.0))
        .collect();
    Ok(MetaGrads {
        g_eta,
        sensitivities,
        outer_loss,
        mem: MemCounters {
            retained_param_states: pinned_states,
            peak_tape_nodes: tape.num_nodes(),
        },
    })
}

/// Memory-efficient backend: checkpointed forward, then an adjoint sweep.
///
/// With lambda_K the outer gradient at the final state, each step k walks
/// back as
///
/// ```text
/// g_eta        += -lr * d2 L_inner / (d eta d delta) . lambda_{k+1}
/// sensitivity_i += -lr * <lambda_{k+1}, grad l_i(theta_k)>
/// lambda_k      = lambda_{k+1} - lr * H_inner(theta_k) . lambda_{k+1}
/// ```
///
/// with theta_k recovered from the checkpoint store. All three lines come out
/// of one forward-over-reverse pass seeded with lambda_{k+1}.
pub fn meta_grad_adjoint<P: BilevelProblem + ?Sized>(
    problem: &P,
    delta0: &ParamVector,
    eta: &ParamVector,
    inner: &InnerConfig,
    block: usize,
) -> Result<MetaGrads> {
    // Score values, computed once; they do not depend on delta.
    let scores = score_values(problem, eta)?;

    // Checkpointed forward.
    let traj = run_inner(problem, delta0, &scores, inner, block)?;

    // Outer gradient and value at the final state.
    let mut peak_nodes;
    let (mut lambda, outer_loss) = {
        let mut tape: Tape<f64> = Tape::new();
        let leaves = tape.param_leaves(&traj.final_delta, None, true)?;
        let outer = problem.build_outer(&mut tape, &leaves)?;
        let value = tape.scalar_value(outer)?;
        let adj = tape.backward(outer)?;
        peak_nodes = tape.num_nodes();
        (read_param_grads(&tape, &adj, &leaves)?, value)
    };

    let mut g_eta = ParamVector::zeros(problem.eta_layout());
    let mut sensitivities = vec![0.0; problem.num_examples()];

    let mut stepper =
        |_k: usize, d: &ParamVector| inner_step_value(problem, d, &scores, inner.lr);
    for k in (0..inner.steps).rev() {
        let theta_k = traj.store.replay(k, &mut stepper)?;

        // One dual pass: delta leaves carry tangent lambda_{k+1}, eta leaves
        // carry zero tangent.
        let mut tape: Tape<Dual> = Tape::new();
        let d_leaves = tape.param_leaves(&theta_k, Some(&lambda), true)?;
        let e_leaves = tape.param_leaves(eta, None, true)?;
        let score_nodes = problem.build_scores(&mut tape, &e_leaves)?;
        let losses = problem.build_example_losses(&mut tape, &d_leaves)?;
        let l_inner = weighted_loss_nodes(&mut tape, &losses, &score_nodes);
        let adj = tape.backward(l_inner)?;

        for (i, &l) in losses.iter().enumerate() {
            sensitivities[i] += -inner.lr * tape.scalar_value(l)?.tangent();
        }
        let mixed = read_param_tangents(&tape, &adj, &e_leaves)?;
        g_eta.add_scaled(&mixed, -inner.lr)?;
        let hvp_dir = read_param_tangents(&tape, &adj, &d_leaves)?;
        lambda.add_scaled(&hvp_dir, -inner.lr)?;
        peak_nodes = peak_nodes.max(tape.num_nodes());
    }

    Ok(MetaGrads {
        g_eta,
        sensitivities,
        outer_loss,
        mem: MemCounters {
            retained_param_states: traj.store.retained_count(),
            peak_tape_nodes: peak_nodes,
        },
    })
}

/// Score values under the current scorer parameters.
pub fn score_values<P: BilevelProblem + ?Sized>(problem: &P, eta: &ParamVector) -> Result<Vec<f64>> {
    let mut tape: Tape<f64> = Tape::new();
    let leaves = tape.param_leaves(eta, None, false)?;
    let nodes = problem.build_scores(&mut tape, &leaves)?;
    nodes.iter().map(|&n| tape.scalar_value(n)).collect()
}

/// Independent K=1 oracle: with a single inner step the sensitivity of
/// example i is -lr * <outer gradient at theta', grad l_i(theta_0)>.
pub fn sensitivity_closed_form_k1(
    g_outer: &ParamVector,
    example_grads: &[ParamVector],
    lr: f64,
) -> Result<Vec<f64>> {
    example_grads.iter().map(|g| Ok(-lr * g_outer.dot(g)?)).collect()
}

/// Per-example loss gradients at a fixed delta (for the closed-form oracle).
pub fn example_value_grads<P: InnerProblem + ?Sized>(
    problem: &P,
    delta: &ParamVector,
) -> Result<Vec<ParamVector>> {
    let mut tape: Tape<f64> = Tape::new();
    let leaves = tape.param_leaves(delta, None, true)?;
    let losses = problem.build_example_losses(&mut tape, &leaves)?;
    losses
        .iter()
        .map(|&l| {
            let adj = tape.backward(l)?;
            read_param_grads(&tape, &adj, &leaves)
        })
        .collect()
}

// ── Model-backed bilevel problem ─────────────────────────────────────

/// The task-level instantiation: adapter inner loss over parsed auxiliary
/// sequences, scorer over (task, example) text, outer loss on the target
/// task under the adapted model.
pub struct TaskProblem<'a> {
    pub params: &'a ModelParams,
    pub lora_cfg: LoraConfig,
    pub train_seqs: Vec<TrainSeq>,
    pub scorer_dims: crate::seqmodel::TransformerDims,
    pub scorer_inputs: Vec<Vec<Token>>,
    pub outer: OuterTarget,
}

impl InnerProblem for TaskProblem<'_> {
    fn delta_layout(&self) -> Arc<ParamLayout> {
        crate::seqmodel::lora_layout(&self.params.dims, self.lora_cfg.rank)
    }

    fn num_examples(&self) -> usize {
        self.train_seqs.len()
    }

    fn build_example_losses<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        delta: &ParamNodes,
    ) -> Result<Vec<NodeId>> {
        let base = tape.param_leaves(&self.params.vector, None, false)?;
        let apply = LoraApply { nodes: delta, scale: self.lora_cfg.scale };
        self.train_seqs
            .iter()
            .map(|seq| {
                build_nll(tape, &self.params.dims, &base, Some(&apply), &seq.tokens, &seq.mask)
            })
            .collect()
    }
}

impl BilevelProblem for TaskProblem<'_> {
    fn eta_layout(&self) -> Arc<ParamLayout> {
        crate::seqmodel::transformer_layout(&self.scorer_dims, crate::seqmodel::HeadKind::ScoreHead)
    }

    fn build_scores<S: Scalar>(&self, tape: &mut Tape<S>, eta: &ParamNodes) -> Result<Vec<NodeId>> {
        self.scorer_inputs
            .iter()
            .map(|tokens| crate::scorer::build_score(tape, &self.scorer_dims, eta, tokens))
            .collect()
    }

    fn build_outer<S: Scalar>(&self, tape: &mut Tape<S>, delta: &ParamNodes) -> Result<NodeId> {
        let base = tape.param_leaves(&self.params.vector, None, false)?;
        let apply = LoraApply { nodes: delta, scale: self.lora_cfg.scale };
        match &self.outer {
            OuterTarget::Gold(seq) => {
                build_nll(tape, &self.params.dims, &base, Some(&apply), &seq.tokens, &seq.mask)
            }
            OuterTarget::VerifiedMean(seqs) => {
                debug_assert!(!seqs.is_empty());
                let mut acc = tape.constant_scalar(0.0);
                for seq in seqs {
                    let l = build_nll(
                        tape,
                        &self.params.dims,
                        &base,
                        Some(&apply),
                        &seq.tokens,
                        &seq.mask,
                    )?;
                    acc = tape.add(acc, l);
                }
                Ok(tape.scale(acc, 1.0 / seqs.len() as f64))
            }
        }
    }
}
