//! Relevance scorer: a lightweight transformer encoder over the concatenated
//! task prompt and candidate example, mean-pooled into a single sigmoid unit.
//! Output is a weight in (0, 1) per example, differentiable in the scorer
//! parameters.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{DiffError, NodeId, ParamNodes, ParamVector, Result, Scalar, Tape};
use crate::seqmodel::{
    build_hidden, transformer_layout, HeadKind, Token, TransformerDims, Vocab, EXAMPLE_START,
    SOLUTION_SEP,
};
use crate::taskgen::{AuxExample, Task};

/// Scorer parameters: one encoder block plus the scoring head.
#[derive(Clone, Debug)]
pub struct ScorerParams {
    pub dims: TransformerDims,
    pub vector: ParamVector,
}

impl ScorerParams {
    /// Default encoder: width 16, single block, sharing the generator's
    /// vocabulary and context length.
    pub fn default_dims() -> TransformerDims {
        TransformerDims { vocab: Vocab::standard().len(), dim: 16, blocks: 1, heads: 2, context: 128 }
    }

    pub fn init(dims: TransformerDims, seed: u64) -> Self {
        let layout = transformer_layout(&dims, HeadKind::ScoreHead);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vector = crate::seqmodel::init_vector(layout, &mut rng);
        ScorerParams { dims, vector }
    }
}

/// Scorer input: task prompt, then the example's problem and answer behind
/// the usual separators.
pub fn scorer_input(task: &Task, example: &AuxExample) -> Result<Vec<Token>> {
    let parsed = example
        .parsed
        .as_ref()
        .ok_or_else(|| DiffError::Contract("cannot score an unparsed example".into()))?;
    let v = Vocab::standard();
    let mut tokens = task.generation_prompt();
    tokens.push(EXAMPLE_START);
    tokens.extend(v.encode(&parsed.problem).map_err(|e| DiffError::Contract(e.to_string()))?);
    tokens.push(SOLUTION_SEP);
    tokens.extend(v.encode(&parsed.answer).map_err(|e| DiffError::Contract(e.to_string()))?);
    Ok(tokens)
}

/// Score node in (0, 1) for one tokenized example, built on the caller's
/// tape so the result stays differentiable in the scorer leaves.
pub fn build_score<S: Scalar>(
    tape: &mut Tape<S>,
    dims: &TransformerDims,
    eta: &ParamNodes,
    tokens: &[Token],
) -> Result<NodeId> {
    let hidden = build_hidden(tape, dims, eta, None, tokens)?;
    let pooled_sum = tape.col_sum(hidden);
    let pooled = tape.scale(pooled_sum, 1.0 / tokens.len() as f64);
    let logit = tape.matmul(pooled, eta.id("score.w"));
    let shifted = tape.add(logit, eta.id("score.b"));
    Ok(tape.sigmoid(shifted))
}

/// Relevance weight for one parsed example, as a plain value.
pub fn score(eta: &ScorerParams, task: &Task, example: &AuxExample) -> Result<f64> {
    let tokens = scorer_input(task, example)?;
    let mut tape: Tape<f64> = Tape::new();
    let leaves = tape.param_leaves(&eta.vector, None, false)?;
    let s = build_score(&mut tape, &eta.dims, &leaves, &tokens)?;
    tape.scalar_value(s)
}

/// Scores for a batch of parsed examples, order preserved. An empty batch
/// yields an empty vector.
pub fn score_all(eta: &ScorerParams, task: &Task, examples: &[AuxExample]) -> Result<Vec<f64>> {
    examples.iter().map(|ex| score(eta, task, ex)).collect()
}
