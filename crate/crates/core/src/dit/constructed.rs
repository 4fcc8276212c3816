//! Hand-built weights with a known massive-activation mechanism, used as
//! ground truth for the analysis and intervention pipelines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dit::{DitConfig, DitWeights, ModSlot};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// How the planted residual gate at the spike dimension depends on its inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpikeShape {
    /// `alpha = strength` regardless of `t` and `c`.
    Constant,
    /// `alpha` falls monotonically as `t` grows, from `strength` at `t = 0`.
    DecreasingInT,
    /// `alpha` grows with the class id; the timestep has no effect on it.
    ConditionDependent,
}

/// Where and how strongly to plant the spike.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpikeSpec {
    /// 1-based block index.
    pub depth: usize,
    pub dim: usize,
    pub strength: f64,
    pub shape: SpikeShape,
}

impl SpikeSpec {
    pub fn new(depth: usize, dim: usize, strength: f64) -> Self {
        SpikeSpec {
            depth,
            dim,
            strength,
            shape: SpikeShape::Constant,
        }
    }

    pub fn with_shape(mut self, shape: SpikeShape) -> Self {
        self.shape = shape;
        self
    }
}

/// Scale of the random modulation output weights, chosen so every gate
/// outside the planted one stays well below 1 in magnitude.
const BACKGROUND_MOD_SCALE: f64 = 0.02;

/// Random weights whose feedforward residual at block `depth` writes
/// `alpha * 1` into dimension `dim` of every token.
///
/// The feedforward output at `dim` is pinned to exactly 1 (its weight column
/// is zeroed and its bias set to 1), and the gate there is produced by the
/// modulation network according to `spec.shape`. All other gates are small
/// random values. Except for [`SpikeShape::ConditionDependent`], no block's
/// modulation reads the class embedding.
pub fn planted_spike(cfg: DitConfig, spec: SpikeSpec, seed: u64) -> Result<DitWeights> {
    cfg.validate()?;
    if spec.depth == 0 || spec.depth > cfg.num_blocks {
        return Err(Error::InvalidParameter(format!(
            "spike depth {} outside 1..={}",
            spec.depth, cfg.num_blocks
        )));
    }
    if spec.dim >= cfg.hidden_size {
        return Err(Error::DimensionOutOfRange {
            dim: spec.dim,
            extent: cfg.hidden_size,
        });
    }
    if !(spec.strength.is_finite() && spec.strength > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "spike strength {}",
            spec.strength
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = DitWeights::init(cfg.clone(), &mut rng)?;
    let (c, e, d) = (cfg.hidden_size, cfg.t_embed_dim, spec.dim);
    let six = cfg.modulation_width();

    // Keep the spike dimension at exactly zero until the spike block writes it.
    zero_column(&mut w.params.embed_w, d);
    w.params
        .pos
        .data_mut()
        .chunks_exact_mut(c)
        .for_each(|r| r[d] = 0.0);

    for (k, b) in w.params.blocks.iter_mut().enumerate() {
        b.mod_w2 = Tensor::uniform(&[c, six], BACKGROUND_MOD_SCALE, &mut rng);
        if spec.shape != SpikeShape::ConditionDependent {
            for row in e..2 * e {
                b.mod_w1.data_mut()[row * c..(row + 1) * c].fill(0.0);
            }
        }
        if k + 1 != spec.depth {
            // Earlier and later blocks leave the spike dimension untouched.
            zero_column(&mut b.mod_w2, ModSlot::AlphaAttn.index(c, d));
            zero_column(&mut b.mod_w2, ModSlot::AlphaFf.index(c, d));
        }
    }

    let b = w.block_mut(spec.depth);
    let gate = ModSlot::AlphaFf.index(c, d);
    zero_column(&mut b.mod_w2, gate);
    zero_column(&mut b.mod_w2, ModSlot::AlphaAttn.index(c, d));
    zero_column(&mut b.ff_w2, d);
    b.ff_b2.data_mut()[d] = 1.0;

    // Hidden unit 0 of the modulation network carries the gate for the
    // shaped variants.
    let unit = 0;
    let isolate_unit = |b: &mut crate::dit::BlockParams<Tensor>| {
        zero_column(&mut b.mod_w1, unit);
        b.mod_w2.data_mut()[unit * six..(unit + 1) * six].fill(0.0);
    };
    match spec.shape {
        SpikeShape::Constant => {
            b.mod_b2.data_mut()[gate] = spec.strength;
        }
        SpikeShape::DecreasingInT => {
            // The slowest sinusoid of the timestep embedding is a near-linear,
            // increasing function of t over the whole schedule.
            isolate_unit(b);
            let slow_sin = e - 2;
            b.mod_w1.data_mut()[slow_sin * c + unit] = -40.0;
            b.mod_b1.data_mut()[unit] = 10.0;
            // silu(10) is 10 to within 5e-4, so t = 0 gives close to `strength`.
            b.mod_w2.data_mut()[unit * six + gate] = spec.strength / 10.0;
        }
        SpikeShape::ConditionDependent => {
            isolate_unit(b);
            // Class embedding feature 0 encodes the id linearly in [0, 1].
            let classes = cfg.num_classes;
            for (id, row) in w
                .params
                .class_table
                .data_mut()
                .chunks_exact_mut(e)
                .enumerate()
            {
                row[0] = id as f64 / (classes - 1) as f64;
            }
            let b = w.block_mut(spec.depth);
            b.mod_w1.data_mut()[e * c + unit] = 10.0;
            b.mod_b1.data_mut()[unit] = 1.0;
            b.mod_w2.data_mut()[unit * six + gate] = spec.strength / 11.0;
        }
    }
    Ok(w)
}

fn zero_column(m: &mut Tensor, col: usize) {
    let n = m.last_dim();
    m.data_mut().chunks_exact_mut(n).for_each(|r| r[col] = 0.0);
}
