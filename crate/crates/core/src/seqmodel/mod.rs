//! Tiny autoregressive transformer used as both generator and solver, with
//! low-rank adapters as the only inner-loop-trainable parameters.

mod lora;
mod sample;
mod transformer;
mod vocab;

pub use lora::{lora_layout, lora_merge, random_effective_delta, LoraConfig, LoraDelta};
pub use sample::{next_token_logits, sample, stream_seed, Sampled, SamplerConfig};
pub use transformer::{build_hidden, build_logits, transformer_layout, HeadKind, LoraApply, TransformerDims};
pub use vocab::{
    Token, Vocab, VocabError, ANSWER_START, DEMO_SEP, END, EXAMPLE_START, QUERY, SOLUTION_SEP,
    TASK_START,
};

use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{DiffError, NodeId, ParamNodes, ParamVector, Result, Scalar, Tape};

/// Generator/solver parameters: a [`TransformerDims`] shape plus the flat
/// parameter vector holding every segment.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub dims: TransformerDims,
    pub vector: ParamVector,
}

impl ModelParams {
    /// Desk-scale default: 40-symbol vocabulary, width 32, 2 blocks, 2 heads.
    pub fn default_dims() -> TransformerDims {
        TransformerDims { vocab: Vocab::standard().len(), dim: 32, blocks: 2, heads: 2, context: 128 }
    }

    pub fn init(dims: TransformerDims, seed: u64) -> Self {
        let layout = transformer_layout(&dims, HeadKind::LmHead);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vector = init_vector(layout, &mut rng);
        ModelParams { dims, vector }
    }

    /// Leaves for every segment plus the adapter hookup, gradient-free.
    /// Used for sampling and other value-only passes.
    pub fn build_logits_leaves<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        delta: Option<&LoraDelta>,
        tokens: &[Token],
    ) -> Result<NodeId> {
        let pn = tape.param_leaves(&self.vector, None, false)?;
        match delta {
            Some(d) => {
                let ln = tape.param_leaves(&d.vector, None, false)?;
                let apply = LoraApply { nodes: &ln, scale: d.cfg.scale };
                build_logits(tape, &self.dims, &pn, Some(&apply), tokens)
            }
            None => build_logits(tape, &self.dims, &pn, None, tokens),
        }
    }
}

pub(crate) fn init_vector(
    layout: Arc<crate::diffcore::ParamLayout>,
    rng: &mut ChaCha8Rng,
) -> ParamVector {
    let normal = Normal::new(0.0, 0.02).unwrap();
    let mut v = ParamVector::zeros(layout.clone());
    for i in 0..layout.num_segments() {
        let seg = layout.segment(i);
        let name = seg.name.clone();
        let slice = v.segment_mut(&name);
        if name.ends_with(".g") {
            slice.fill(1.0);
        } else if name.ends_with(".b") && seg.rows == 1 {
            // Bias rows start at zero.
        } else {
            for x in slice.iter_mut() {
                *x = normal.sample(rng);
            }
        }
    }
    v
}

fn check_mask(tokens: &[Token], mask: &[u8]) -> Result<usize> {
    if tokens.len() < 2 {
        return Err(DiffError::Contract("need at least two tokens for a prediction".into()));
    }
    if mask.len() != tokens.len() {
        return Err(DiffError::Contract("loss mask length must match token length".into()));
    }
    if mask[0] != 0 {
        return Err(DiffError::Contract("position 0 has no prediction; mask[0] must be 0".into()));
    }
    let count = mask.iter().skip(1).filter(|&&m| m != 0).count();
    if count == 0 {
        return Err(DiffError::Contract("loss mask selects no positions".into()));
    }
    Ok(count)
}

/// Sum of log-probabilities over masked positions, as a tape node.
/// `mask[t] == 1` counts token `t` (predicted from everything before it).
pub fn build_logprob<S: Scalar>(
    tape: &mut Tape<S>,
    dims: &TransformerDims,
    params: &ParamNodes,
    lora: Option<&LoraApply<'_>>,
    tokens: &[Token],
    mask: &[u8],
) -> Result<NodeId> {
    check_mask(tokens, mask)?;
    let t_len = tokens.len();
    let logits = build_logits(tape, dims, params, lora, tokens)?;
    let lsm = tape.log_softmax_rows(logits);
    // Row r predicts token r+1; the final row predicts nothing and is masked.
    let idx: Arc<Vec<usize>> = Arc::new(
        (0..t_len).map(|r| if r + 1 < t_len { tokens[r + 1] as usize } else { 0 }).collect(),
    );
    let picked = tape.gather_col(lsm, idx);
    let maskf: Vec<f64> = (0..t_len)
        .map(|r| if r + 1 < t_len { f64::from(mask[r + 1]) } else { 0.0 })
        .collect();
    let mnode = tape.constant(t_len, 1, &maskf);
    let masked = tape.mul(picked, mnode);
    Ok(tape.sum_all(masked))
}

/// Per-token cross-entropy averaged over masked positions, as a tape node.
pub fn build_nll<S: Scalar>(
    tape: &mut Tape<S>,
    dims: &TransformerDims,
    params: &ParamNodes,
    lora: Option<&LoraApply<'_>>,
    tokens: &[Token],
    mask: &[u8],
) -> Result<NodeId> {
    let count = check_mask(tokens, mask)?;
    let lp = build_logprob(tape, dims, params, lora, tokens, mask)?;
    Ok(tape.scale(lp, -1.0 / count as f64))
}

fn with_value_leaves<R>(
    params: &ModelParams,
    delta: Option<&LoraDelta>,
    f: impl FnOnce(&mut Tape<f64>, &ParamNodes, Option<&LoraApply<'_>>) -> Result<R>,
) -> Result<R> {
    let mut tape: Tape<f64> = Tape::new();
    let pn = tape.param_leaves(&params.vector, None, false)?;
    match delta {
        Some(d) => {
            let ln = tape.param_leaves(&d.vector, None, false)?;
            let apply = LoraApply { nodes: &ln, scale: d.cfg.scale };
            f(&mut tape, &pn, Some(&apply))
        }
        None => f(&mut tape, &pn, None),
    }
}

/// Mean masked cross-entropy as a plain value.
pub fn nll_value(
    params: &ModelParams,
    delta: Option<&LoraDelta>,
    tokens: &[Token],
    mask: &[u8],
) -> Result<f64> {
    with_value_leaves(params, delta, |tape, pn, lora| {
        let n = build_nll(tape, &params.dims, pn, lora, tokens, mask)?;
        tape.scalar_value(n)
    })
}

/// Sum of masked log-probabilities as a plain value.
pub fn logprob_value(
    params: &ModelParams,
    delta: Option<&LoraDelta>,
    tokens: &[Token],
    mask: &[u8],
) -> Result<f64> {
    with_value_leaves(params, delta, |tape, pn, lora| {
        let n = build_logprob(tape, &params.dims, pn, lora, tokens, mask)?;
        tape.scalar_value(n)
    })
}

#[cfg(test)]
mod tests;
