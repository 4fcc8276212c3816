use rand::Rng;

use crate::dit::DitConfig;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Offsets of the six vectors inside a block's modulation output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModSlot {
    GammaAttn = 0,
    BetaAttn = 1,
    AlphaAttn = 2,
    GammaFf = 3,
    BetaFf = 4,
    AlphaFf = 5,
}

impl ModSlot {
    /// Index into the `6C` modulation output of dimension `dim`.
    pub fn index(self, hidden: usize, dim: usize) -> usize {
        self as usize * hidden + dim
    }
}

/// Per-block parameters. Generic so the same layout can hold tensors on
/// disk and graph handles during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    /// Modulation network: `[2E, C]`, `[C]`, `[C, 6C]`, `[6C]`.
    pub mod_w1: T,
    pub mod_b1: T,
    pub mod_w2: T,
    pub mod_b2: T,
    pub q_w: T,
    pub q_b: T,
    pub k_w: T,
    pub k_b: T,
    pub v_w: T,
    pub v_b: T,
    pub o_w: T,
    pub o_b: T,
    /// Feedforward: `[C, 4C]`, `[4C]`, `[4C, C]`, `[C]`.
    pub ff_w1: T,
    pub ff_b1: T,
    pub ff_w2: T,
    pub ff_b2: T,
}

const BLOCK_FIELDS: [&str; 16] = [
    "mod_w1", "mod_b1", "mod_w2", "mod_b2", "q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "o_w", "o_b",
    "ff_w1", "ff_b1", "ff_w2", "ff_b2",
];

impl<T> BlockParams<T> {
    fn refs(&self) -> [&T; 16] {
        [
            &self.mod_w1,
            &self.mod_b1,
            &self.mod_w2,
            &self.mod_b2,
            &self.q_w,
            &self.q_b,
            &self.k_w,
            &self.k_b,
            &self.v_w,
            &self.v_b,
            &self.o_w,
            &self.o_b,
            &self.ff_w1,
            &self.ff_b1,
            &self.ff_w2,
            &self.ff_b2,
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.mod_w1,
            &mut self.mod_b1,
            &mut self.mod_w2,
            &mut self.mod_b2,
            &mut self.q_w,
            &mut self.q_b,
            &mut self.k_w,
            &mut self.k_b,
            &mut self.v_w,
            &mut self.v_b,
            &mut self.o_w,
            &mut self.o_b,
            &mut self.ff_w1,
            &mut self.ff_b1,
            &mut self.ff_w2,
            &mut self.ff_b2,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Option<Self> {
        Some(BlockParams {
            mod_w1: it.next()?,
            mod_b1: it.next()?,
            mod_w2: it.next()?,
            mod_b2: it.next()?,
            q_w: it.next()?,
            q_b: it.next()?,
            k_w: it.next()?,
            k_b: it.next()?,
            v_w: it.next()?,
            v_b: it.next()?,
            o_w: it.next()?,
            o_b: it.next()?,
            ff_w1: it.next()?,
            ff_b1: it.next()?,
            ff_w2: it.next()?,
            ff_b2: it.next()?,
        })
    }
}

/// Whole-model parameters, in a fixed canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct DitParams<T> {
    pub embed_w: T,
    pub embed_b: T,
    /// Learned per-token positional table `[tokens, C]`.
    pub pos: T,
    /// Class embedding table `[num_classes, E]`; the last row is the null id.
    pub class_table: T,
    pub blocks: Vec<BlockParams<T>>,
    pub decode_w: T,
    pub decode_b: T,
}

impl<T> DitParams<T> {
    /// `(name, value)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("embed_w".to_string(), &self.embed_w),
            ("embed_b".to_string(), &self.embed_b),
            ("pos".to_string(), &self.pos),
            ("class_table".to_string(), &self.class_table),
        ];
        for (k, b) in self.blocks.iter().enumerate() {
            for (name, v) in BLOCK_FIELDS.iter().zip(b.refs()) {
                out.push((format!("blocks.{k}.{name}"), v));
            }
        }
        out.push(("decode_w".to_string(), &self.decode_w));
        out.push(("decode_b".to_string(), &self.decode_b));
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![
            &mut self.embed_w,
            &mut self.embed_b,
            &mut self.pos,
            &mut self.class_table,
        ];
        for b in &mut self.blocks {
            out.extend(b.refs_mut());
        }
        out.push(&mut self.decode_w);
        out.push(&mut self.decode_b);
        out
    }

    pub fn count(&self) -> usize {
        6 + 16 * self.blocks.len()
    }

    /// Rebuilds the structure from values in canonical order.
    pub fn from_ordered(num_blocks: usize, values: Vec<T>) -> Option<Self> {
        let expected = 6 + 16 * num_blocks;
        if values.len() != expected {
            return None;
        }
        let mut it = values.into_iter();
        let embed_w = it.next()?;
        let embed_b = it.next()?;
        let pos = it.next()?;
        let class_table = it.next()?;
        let blocks = (0..num_blocks)
            .map(|_| BlockParams::from_iter(&mut it))
            .collect::<Option<Vec<_>>>()?;
        Some(DitParams {
            embed_w,
            embed_b,
            pos,
            class_table,
            blocks,
            decode_w: it.next()?,
            decode_b: it.next()?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> DitParams<U> {
        let vals: Vec<U> = self.named().into_iter().map(|(_, v)| f(v)).collect();
        DitParams::from_ordered(self.blocks.len(), vals).expect("same layout")
    }
}

/// A configured model with concrete parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct DitWeights {
    pub config: DitConfig,
    pub params: DitParams<Tensor>,
}

/// Expected shape of every parameter, in canonical order.
pub fn param_shapes(cfg: &DitConfig) -> DitParams<Vec<usize>> {
    let (c, e, d) = (cfg.hidden_size, cfg.t_embed_dim, cfg.data_dim);
    let block = BlockParams {
        mod_w1: vec![2 * e, c],
        mod_b1: vec![c],
        mod_w2: vec![c, 6 * c],
        mod_b2: vec![6 * c],
        q_w: vec![c, c],
        q_b: vec![c],
        k_w: vec![c, c],
        k_b: vec![c],
        v_w: vec![c, c],
        v_b: vec![c],
        o_w: vec![c, c],
        o_b: vec![c],
        ff_w1: vec![c, 4 * c],
        ff_b1: vec![4 * c],
        ff_w2: vec![4 * c, c],
        ff_b2: vec![c],
    };
    DitParams {
        embed_w: vec![d, c],
        embed_b: vec![c],
        pos: vec![cfg.tokens(), c],
        class_table: vec![cfg.num_classes, e],
        blocks: vec![block; cfg.num_blocks],
        decode_w: vec![c, d],
        decode_b: vec![d],
    }
}

impl DitWeights {
    /// Fresh initialization: matrices uniform in `±1/sqrt(fan_in)`, biases
    /// zero, embedding tables treated as one-hot affine maps, and the
    /// modulation network's output layer zeroed so every block starts as the
    /// identity.
    pub fn init<R: Rng + ?Sized>(config: DitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        let named = shapes.named();
        let mut values = Vec::with_capacity(named.len());
        for (name, shape) in named {
            let zero_init = name.ends_with("mod_w2") || shape.len() == 1;
            let t = if zero_init {
                Tensor::zeros(shape)
            } else {
                let fan_in = match name.as_str() {
                    "class_table" | "pos" => 1,
                    _ => shape[0],
                };
                Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
            };
            values.push(t);
        }
        let params = DitParams::from_ordered(config.num_blocks, values).expect("layout");
        Ok(DitWeights { config, params })
    }

    /// Validates parameter shapes against the config.
    pub fn new(config: DitConfig, params: DitParams<Tensor>) -> Result<Self> {
        config.validate()?;
        if params.blocks.len() != config.num_blocks {
            return Err(Error::InvalidParameter(format!(
                "{} blocks in params, config says {}",
                params.blocks.len(),
                config.num_blocks
            )));
        }
        let shapes = param_shapes(&config);
        for ((name, t), (_, s)) in params.named().iter().zip(shapes.named()) {
            if t.shape() != s.as_slice() {
                return Err(Error::InvalidParameter(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    s
                )));
            }
        }
        Ok(DitWeights { config, params })
    }

    pub fn block(&self, depth: usize) -> &BlockParams<Tensor> {
        &self.params.blocks[depth - 1]
    }

    pub fn block_mut(&mut self, depth: usize) -> &mut BlockParams<Tensor> {
        &mut self.params.blocks[depth - 1]
    }

    /// Places every parameter on `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DitParams<Var> {
        self.params.map(|t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn init_matches_declared_shapes_and_zeroes_modulation_output() {
        let cfg = DitConfig::default();
        let w = DitWeights::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let again = DitWeights::new(cfg.clone(), w.params.clone()).unwrap();
        assert_eq!(again, w);
        for b in &w.params.blocks {
            assert!(b.mod_w2.data().iter().all(|&v| v == 0.0));
            assert!(b.mod_b2.data().iter().all(|&v| v == 0.0));
        }
        let bound = 1.0 / (cfg.hidden_size as f64).sqrt();
        assert!(w.params.blocks[0]
            .q_w
            .data()
            .iter()
            .all(|v| v.abs() <= bound));
        assert_eq!(w.params.count(), w.params.named().len());
    }

    #[test]
    fn named_order_round_trips() {
        let cfg = DitConfig {
            num_blocks: 2,
            ..DitConfig::default()
        };
        let shapes = param_shapes(&cfg);
        let names: Vec<String> = shapes.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[4], "blocks.0.mod_w1");
        assert_eq!(names.last().unwrap(), "decode_b");
        let rebuilt = DitParams::from_ordered(
            2,
            shapes.named().into_iter().map(|(_, s)| s.clone()).collect(),
        );
        assert_eq!(rebuilt.unwrap(), shapes);
    }
}
