use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{DiffError, ParamLayout, ParamVector, Result, SegmentSpec};

use super::transformer::TransformerDims;
use super::ModelParams;

/// Low-rank adapter shape: rank and the scale applied to the delta.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        // Rank 4, scale 2/rank.
        LoraConfig { rank: 4, scale: 0.5 }
    }
}

/// Adapters attach to the attention projections only. For each adapted
/// matrix `W` (stored input x output) the effective weight is
/// `W + scale * A @ B` with `A: [in, rank]` the down-projection and
/// `B: [rank, out]` the zero-initialized up-projection, so a fresh delta is
/// exactly zero.
#[derive(Clone, Debug)]
pub struct LoraDelta {
    pub cfg: LoraConfig,
    pub vector: ParamVector,
}

pub fn lora_layout(dims: &TransformerDims, rank: usize) -> Arc<ParamLayout> {
    let mut segs = Vec::new();
    for b in 0..dims.blocks {
        for w in ["wq", "wk", "wv", "wo"] {
            segs.push(SegmentSpec::new(format!("blk{b}.{w}.a"), dims.dim, rank));
            segs.push(SegmentSpec::new(format!("blk{b}.{w}.b"), rank, dims.dim));
        }
    }
    ParamLayout::new(segs)
}

impl LoraDelta {
    /// Standard adapter init: small random down-projection, zero
    /// up-projection. The zero `B` keeps the initial delta exactly zero while
    /// the random `A` lets gradients reach both factors.
    pub fn init(dims: &TransformerDims, cfg: LoraConfig, seed: u64) -> Self {
        let layout = lora_layout(dims, cfg.rank);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.05).unwrap();
        let mut v = ParamVector::zeros(layout.clone());
        for i in 0..layout.num_segments() {
            let seg = layout.segment(i);
            if seg.name.ends_with(".a") {
                let name = seg.name.clone();
                for x in v.segment_mut(&name) {
                    *x = normal.sample(&mut rng);
                }
            }
        }
        LoraDelta { cfg, vector: v }
    }

    pub fn zeros(dims: &TransformerDims, cfg: LoraConfig) -> Self {
        LoraDelta { cfg, vector: ParamVector::zeros(lora_layout(dims, cfg.rank)) }
    }

    pub fn from_vector(cfg: LoraConfig, vector: ParamVector) -> Self {
        LoraDelta { cfg, vector }
    }

    /// True when every up-projection is zero, i.e. the delta is a no-op.
    pub fn is_zero_effect(&self) -> bool {
        let layout = self.vector.layout().clone();
        for i in 0..layout.num_segments() {
            let seg = layout.segment(i);
            if seg.name.ends_with(".b") && self.vector.segment(&seg.name).iter().any(|&v| v != 0.0)
            {
                return false;
            }
        }
        true
    }
}

/// Materialize the adapter into the base weights: every adapted `W` becomes
/// `W + scale * A @ B`. Base parameters are copied, not mutated.
pub fn lora_merge(params: &ModelParams, delta: &LoraDelta) -> Result<ModelParams> {
    let dims = params.dims;
    let expected = lora_layout(&dims, delta.cfg.rank);
    if !delta.vector.layout().same_as(&expected) {
        return Err(DiffError::LayoutMismatch(
            "adapter layout does not match the model's adapted matrices".into(),
        ));
    }
    let mut merged = params.clone();
    let d = dims.dim;
    let r = delta.cfg.rank;
    for b in 0..dims.blocks {
        for w in ["wq", "wk", "wv", "wo"] {
            let a = delta.vector.segment(&format!("blk{b}.{w}.a"));
            let bm = delta.vector.segment(&format!("blk{b}.{w}.b"));
            let name = format!("blk{b}.{w}");
            let wseg = merged.vector.segment_mut(&name);
            for i in 0..d {
                for j in 0..d {
                    let mut acc = 0.0;
                    for k in 0..r {
                        acc += a[i * r + k] * bm[k * d + j];
                    }
                    wseg[i * d + j] += delta.cfg.scale * acc;
                }
            }
        }
    }
    Ok(merged)
}

/// Uniform random adapter with nonzero `B`, for tests that need an effective
/// delta.
pub fn random_effective_delta(dims: &TransformerDims, cfg: LoraConfig, seed: u64) -> LoraDelta {
    let mut delta = LoraDelta::init(dims, cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let layout = delta.vector.layout().clone();
    for i in 0..layout.num_segments() {
        let seg = layout.segment(i);
        if seg.name.ends_with(".b") {
            let name = seg.name.clone();
            for x in delta.vector.segment_mut(&name) {
                *x = rng.gen_range(-0.1..0.1);
            }
        }
    }
    delta
}
