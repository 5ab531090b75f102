use super::*;
use crate::diffcore::{grad, DiffFn1, NodeId, ParamNodes, Scalar, Tape};

fn tiny_dims() -> TransformerDims {
    TransformerDims { vocab: 12, dim: 8, blocks: 2, heads: 2, context: 16 }
}

/// Mean masked cross-entropy as a function of the full parameter vector.
struct NllOverParams {
    dims: TransformerDims,
    tokens: Vec<Token>,
    mask: Vec<u8>,
}

impl DiffFn1 for NllOverParams {
    fn build<S: Scalar>(&self, t: &mut Tape<S>, x: &ParamNodes) -> crate::diffcore::Result<NodeId> {
        build_nll(t, &self.dims, x, None, &self.tokens, &self.mask)
    }
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / (got.abs() + want.abs() + 1e-6)
}

#[test]
fn uniform_logits_give_ln_v_per_masked_token() {
    // Zero head makes every logit row identical (all zeros): maximum entropy.
    let dims = tiny_dims();
    let mut params = ModelParams::init(dims, 3);
    params.vector.segment_mut("head").fill(0.0);
    let tokens = vec![1, 2, 3, 4];
    let mask = vec![0, 1, 1, 1];
    let nll = nll_value(&params, None, &tokens, &mask).unwrap();
    assert!((nll - (dims.vocab as f64).ln()).abs() < 1e-12);
}

#[test]
fn two_class_softmax_matches_hand_computation() {
    // Rig a vocab-2 model to emit logits (z, 0) everywhere: zero all block
    // weights, set the final layer-norm bias to e1 and head row 0 to (z, 0).
    // For target 0 the loss is -ln(sigmoid(z)); z = 0 gives ln 2.
    for &z in &[0.0, 1.3, -2.0] {
        let dims = TransformerDims { vocab: 2, dim: 4, blocks: 1, heads: 1, context: 8 };
        let mut params = ModelParams::init(dims, 0);
        params.vector.data_mut().fill(0.0);
        params.vector.segment_mut("lnf.b")[0] = 1.0;
        let head = params.vector.segment_mut("head");
        head[0] = z; // row 0 of [dim, vocab]
        let tokens = vec![1, 0];
        let mask = vec![0, 1];
        let nll = nll_value(&params, None, &tokens, &mask).unwrap();
        let sigma = 1.0 / (1.0 + (-z as f64).exp());
        assert!((nll + sigma.ln()).abs() < 1e-12, "z={z}: {nll} vs {}", -sigma.ln());
    }
}

#[test]
fn zero_up_projection_adapter_changes_nothing() {
    let dims = tiny_dims();
    let params = ModelParams::init(dims, 5);
    let delta = LoraDelta::init(&dims, LoraConfig::default(), 11);
    assert!(delta.is_zero_effect());
    let tokens = vec![0, 5, 9, 2, 7];
    let mask = vec![0, 1, 0, 1, 1];
    let plain = nll_value(&params, None, &tokens, &mask).unwrap();
    let with = nll_value(&params, Some(&delta), &tokens, &mask).unwrap();
    assert_eq!(plain, with);
    let g0 = sample(&params, None, &tokens, &SamplerConfig { temperature: 0.0, max_new_tokens: 5, seed: 1 }).unwrap();
    let g1 = sample(&params, Some(&delta), &tokens, &SamplerConfig { temperature: 0.0, max_new_tokens: 5, seed: 1 }).unwrap();
    assert_eq!(g0, g1);
}

#[test]
fn rank_one_merge_outer_product_by_hand() {
    // A = [1, 2] down, B = [3, 4] up, scale 1, zero base weight: the delta on
    // W (stored input x output) is the outer product [[3,4],[6,8]].
    let dims = TransformerDims { vocab: 4, dim: 2, blocks: 1, heads: 1, context: 4 };
    let mut params = ModelParams::init(dims, 0);
    params.vector.segment_mut("blk0.wq").fill(0.0);
    let cfg = LoraConfig { rank: 1, scale: 1.0 };
    let mut delta = LoraDelta::zeros(&dims, cfg);
    delta.vector.segment_mut("blk0.wq.a").copy_from_slice(&[1.0, 2.0]);
    delta.vector.segment_mut("blk0.wq.b").copy_from_slice(&[3.0, 4.0]);
    let merged = lora_merge(&params, &delta).unwrap();
    assert_eq!(merged.vector.segment("blk0.wq"), &[3.0, 4.0, 6.0, 8.0]);
}

#[test]
fn merged_and_unmerged_forwards_agree() {
    let dims = tiny_dims();
    let params = ModelParams::init(dims, 7);
    let delta = random_effective_delta(&dims, LoraConfig::default(), 13);
    assert!(!delta.is_zero_effect());
    let merged = lora_merge(&params, &delta).unwrap();
    let tokens = vec![3, 1, 4, 1, 5, 9, 2, 6];
    let a = next_token_logits(&params, Some(&delta), &tokens).unwrap();
    let b = next_token_logits(&merged, None, &tokens).unwrap();
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() < 1e-10, "{x} vs {y}");
    }
}

#[test]
fn merge_rejects_mismatched_shapes() {
    let dims = tiny_dims();
    let params = ModelParams::init(dims, 7);
    let other = TransformerDims { dim: 4, ..dims };
    let delta = LoraDelta::zeros(&other, LoraConfig::default());
    assert!(lora_merge(&params, &delta).is_err());
}

#[test]
fn nll_gradient_matches_finite_differences() {
    let dims = tiny_dims();
    let params = ModelParams::init(dims, 42);
    let f = NllOverParams { dims, tokens: vec![1, 7, 3, 0, 11, 5], mask: vec![0, 1, 1, 0, 1, 1] };
    let g = grad(&f, &params.vector).unwrap();

    // Probe a deterministic spread of coordinates with central differences.
    let n = params.vector.len();
    let step = 1e-5;
    let mut worst = 0.0f64;
    for probe in 0..40 {
        let i = (probe * 997) % n;
        let mut plus = params.vector.clone();
        plus.data_mut()[i] += step;
        let mut minus = params.vector.clone();
        minus.data_mut()[i] -= step;
        let fp = crate::diffcore::grad_with_value(&f, &plus).unwrap().1;
        let fm = crate::diffcore::grad_with_value(&f, &minus).unwrap().1;
        let fd = (fp - fm) / (2.0 * step);
        worst = worst.max(rel_err(g.data()[i], fd));
    }
    assert!(worst <= 1e-5, "max rel err {worst}");
}

#[test]
fn nll_is_nonnegative_and_rejects_bad_inputs() {
    let dims = tiny_dims();
    let params = ModelParams::init(dims, 9);
    let nll = nll_value(&params, None, &[1, 2, 3], &[0, 1, 1]).unwrap();
    assert!(nll >= 0.0);
    // All-zero mask.
    assert!(nll_value(&params, None, &[1, 2, 3], &[0, 0, 0]).is_err());
    // Token outside the vocabulary.
    assert!(nll_value(&params, None, &[1, 99], &[0, 1]).is_err());
    // Too-short sequence.
    assert!(nll_value(&params, None, &[1], &[1]).is_err());
}

#[test]
fn logprob_is_additive_over_disjoint_masks() {
    let dims = tiny_dims();
    let params = ModelParams::init(dims, 21);
    let tokens = vec![2, 4, 6, 8, 10, 1, 3];
    let m1 = vec![0, 1, 0, 1, 0, 0, 0];
    let m2 = vec![0, 0, 1, 0, 0, 1, 1];
    let union: Vec<u8> = m1.iter().zip(&m2).map(|(a, b)| a | b).collect();
    let lp1 = logprob_value(&params, None, &tokens, &m1).unwrap();
    let lp2 = logprob_value(&params, None, &tokens, &m2).unwrap();
    let lpu = logprob_value(&params, None, &tokens, &union).unwrap();
    assert!((lp1 + lp2 - lpu).abs() < 1e-10);
}

#[test]
fn logprob_consistent_with_nll() {
    let dims = tiny_dims();
    let params = ModelParams::init(dims, 77);
    let tokens = vec![0, 1, 2, 3, 4, 5];
    let mask = vec![0, 1, 1, 1, 0, 1];
    let count = 4.0;
    let lp = logprob_value(&params, None, &tokens, &mask).unwrap();
    let nll = nll_value(&params, None, &tokens, &mask).unwrap();
    assert!((lp + nll * count).abs() < 1e-10);
}

#[test]
fn single_masked_uniform_position_gives_minus_ln_v() {
    let dims = tiny_dims();
    let mut params = ModelParams::init(dims, 3);
    params.vector.segment_mut("head").fill(0.0);
    let lp = logprob_value(&params, None, &[1, 2], &[0, 1]).unwrap();
    assert!((lp + (dims.vocab as f64).ln()).abs() < 1e-12);
}

#[test]
fn greedy_sampling_is_pure_and_seeds_replay() {
    let dims = tiny_dims();
    let params = ModelParams::init(dims, 15);
    let prompt = vec![1, 2, 3];
    let cfg = SamplerConfig { temperature: 0.0, max_new_tokens: 6, seed: 0 };
    let a = sample(&params, None, &prompt, &cfg).unwrap();
    let b = sample(&params, None, &prompt, &cfg).unwrap();
    assert_eq!(a, b);

    let warm = SamplerConfig { temperature: 0.9, max_new_tokens: 6, seed: 1234 };
    let c = sample(&params, None, &prompt, &warm).unwrap();
    let d = sample(&params, None, &prompt, &warm).unwrap();
    assert_eq!(c, d);

    let zero = SamplerConfig { temperature: 0.8, max_new_tokens: 0, seed: 1 };
    let e = sample(&params, None, &prompt, &zero).unwrap();
    assert!(e.tokens.is_empty() && !e.ended);
}
