use std::sync::Arc;

use crate::diffcore::{
    DiffError, NodeId, ParamLayout, ParamNodes, Result, Scalar, SegmentSpec, Tape,
};

use super::vocab::Token;

/// Shape of a small pre-norm transformer stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformerDims {
    pub vocab: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub context: usize,
}

impl TransformerDims {
    pub fn head_dim(&self) -> usize {
        debug_assert_eq!(self.dim % self.heads, 0);
        self.dim / self.heads
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.dim
    }
}

/// What sits on top of the final hidden states.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadKind {
    /// Next-token logits over the vocabulary.
    LmHead,
    /// Mean-pool then a single sigmoid unit (built by the caller).
    ScoreHead,
}

pub fn transformer_layout(d: &TransformerDims, head: HeadKind) -> Arc<ParamLayout> {
    let mut segs = vec![
        SegmentSpec::new("embed", d.vocab, d.dim),
        SegmentSpec::new("pos", d.context, d.dim),
    ];
    for b in 0..d.blocks {
        segs.push(SegmentSpec::new(format!("blk{b}.ln1.g"), 1, d.dim));
        segs.push(SegmentSpec::new(format!("blk{b}.ln1.b"), 1, d.dim));
        for w in ["wq", "wk", "wv", "wo"] {
            segs.push(SegmentSpec::new(format!("blk{b}.{w}"), d.dim, d.dim));
        }
        segs.push(SegmentSpec::new(format!("blk{b}.ln2.g"), 1, d.dim));
        segs.push(SegmentSpec::new(format!("blk{b}.ln2.b"), 1, d.dim));
        segs.push(SegmentSpec::new(format!("blk{b}.w1"), d.dim, d.ff_dim()));
        segs.push(SegmentSpec::new(format!("blk{b}.b1"), 1, d.ff_dim()));
        segs.push(SegmentSpec::new(format!("blk{b}.w2"), d.ff_dim(), d.dim));
        segs.push(SegmentSpec::new(format!("blk{b}.b2"), 1, d.dim));
    }
    segs.push(SegmentSpec::new("lnf.g", 1, d.dim));
    segs.push(SegmentSpec::new("lnf.b", 1, d.dim));
    match head {
        HeadKind::LmHead => segs.push(SegmentSpec::new("head", d.dim, d.vocab)),
        HeadKind::ScoreHead => {
            segs.push(SegmentSpec::new("score.w", d.dim, 1));
            segs.push(SegmentSpec::new("score.b", 1, 1));
        }
    }
    ParamLayout::new(segs)
}

/// Low-rank adapter hookup for one forward pass: adapter leaf nodes plus the
/// rank scale. Segment names mirror the adapted matrices (`blk0.wq.a`, ...).
pub struct LoraApply<'a> {
    pub nodes: &'a ParamNodes,
    pub scale: f64,
}

fn adapted_matmul<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    w: NodeId,
    name: &str,
    lora: Option<&LoraApply<'_>>,
) -> NodeId {
    let base = tape.matmul(x, w);
    if let Some(ap) = lora {
        if let Some(a) = ap.nodes.get(&format!("{name}.a")) {
            let b = ap.nodes.id(&format!("{name}.b"));
            let xa = tape.matmul(x, a);
            let xab = tape.matmul(xa, b);
            let scaled = tape.scale(xab, ap.scale);
            return tape.add(base, scaled);
        }
    }
    base
}

fn layer_norm<S: Scalar>(tape: &mut Tape<S>, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
    let n = tape.cols(x);
    let rows = tape.rows(x);
    let s = tape.row_sum(x);
    let mu = tape.scale(s, 1.0 / n as f64);
    let mub = tape.broadcast_col(mu, n);
    let xc = tape.sub(x, mub);
    let sq = tape.mul(xc, xc);
    let vs = tape.row_sum(sq);
    let var = tape.scale(vs, 1.0 / n as f64);
    let veps = tape.affine(var, 1.0, 1e-5);
    let std = tape.sqrt(veps);
    let inv = tape.recip(std);
    let invb = tape.broadcast_col(inv, n);
    let xn = tape.mul(xc, invb);
    let gb = tape.broadcast_row(gain, rows);
    let scaled = tape.mul(xn, gb);
    tape.add_row(scaled, bias)
}

/// Final-layer hidden states `[T, dim]` for a token sequence, causally masked.
pub fn build_hidden<S: Scalar>(
    tape: &mut Tape<S>,
    dims: &TransformerDims,
    params: &ParamNodes,
    lora: Option<&LoraApply<'_>>,
    tokens: &[Token],
) -> Result<NodeId> {
    let t_len = tokens.len();
    if t_len == 0 {
        return Err(DiffError::Contract("empty token sequence".into()));
    }
    if t_len > dims.context {
        return Err(DiffError::Contract(format!(
            "sequence length {t_len} exceeds context {}",
            dims.context
        )));
    }
    for &t in tokens {
        if (t as usize) >= dims.vocab {
            return Err(DiffError::Contract(format!("token id {t} outside vocabulary")));
        }
    }

    let tok_idx: Arc<Vec<usize>> = Arc::new(tokens.iter().map(|&t| t as usize).collect());
    let pos_idx: Arc<Vec<usize>> = Arc::new((0..t_len).collect());
    let emb = tape.gather_rows(params.id("embed"), tok_idx);
    let pos = tape.gather_rows(params.id("pos"), pos_idx);
    let mut x = tape.add(emb, pos);

    // 0 below/on the diagonal, large negative above: exp() underflows to zero
    // so future positions contribute nothing.
    let mut mask = vec![0.0f64; t_len * t_len];
    for i in 0..t_len {
        for j in (i + 1)..t_len {
            mask[i * t_len + j] = -1e9;
        }
    }
    let causal = tape.constant(t_len, t_len, &mask);

    let hd = dims.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    for b in 0..dims.blocks {
        let p = |n: &str| format!("blk{b}.{n}");
        let ln1 = layer_norm(tape, x, params.id(&p("ln1.g")), params.id(&p("ln1.b")));
        let q = adapted_matmul(tape, ln1, params.id(&p("wq")), &p("wq"), lora);
        let k = adapted_matmul(tape, ln1, params.id(&p("wk")), &p("wk"), lora);
        let v = adapted_matmul(tape, ln1, params.id(&p("wv")), &p("wv"), lora);
        let mut merged: Option<NodeId> = None;
        for h in 0..dims.heads {
            let qh = tape.slice_cols(q, h * hd, hd);
            let kh = tape.slice_cols(k, h * hd, hd);
            let vh = tape.slice_cols(v, h * hd, hd);
            let kt = tape.transpose(kh);
            let scores_raw = tape.matmul(qh, kt);
            let scores = tape.scale(scores_raw, scale);
            let masked = tape.add(scores, causal);
            let attn = tape.softmax_rows(masked);
            let oh = tape.matmul(attn, vh);
            let padded = tape.pad_cols(oh, h * hd, dims.dim);
            merged = Some(match merged {
                Some(m) => tape.add(m, padded),
                None => padded,
            });
        }
        let concat = merged.expect("at least one head");
        let attn_out = adapted_matmul(tape, concat, params.id(&p("wo")), &p("wo"), lora);
        x = tape.add(x, attn_out);

        let ln2 = layer_norm(tape, x, params.id(&p("ln2.g")), params.id(&p("ln2.b")));
        let h1 = adapted_matmul(tape, ln2, params.id(&p("w1")), &p("w1"), lora);
        let h1b = tape.add_row(h1, params.id(&p("b1")));
        let act = tape.tanh(h1b);
        let h2 = adapted_matmul(tape, act, params.id(&p("w2")), &p("w2"), lora);
        let h2b = tape.add_row(h2, params.id(&p("b2")));
        x = tape.add(x, h2b);
    }
    Ok(layer_norm(tape, x, params.id("lnf.g"), params.id("lnf.b")))
}

/// Next-token logits `[T, vocab]`.
pub fn build_logits<S: Scalar>(
    tape: &mut Tape<S>,
    dims: &TransformerDims,
    params: &ParamNodes,
    lora: Option<&LoraApply<'_>>,
    tokens: &[Token],
) -> Result<NodeId> {
    let hidden = build_hidden(tape, dims, params, lora, tokens)?;
    Ok(tape.matmul(hidden, params.id("head")))
}
