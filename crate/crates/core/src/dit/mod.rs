//! Toy diffusion transformer: AdaLN-modulated attention/feedforward blocks
//! with per-dimension residual gates, plus a traced forward pass.

mod config;
mod constructed;
mod embed;
mod forward;
mod weights;

pub use config::DitConfig;
pub use constructed::{planted_spike, SpikeShape, SpikeSpec};
pub use embed::{timestep_embedding, TIME_SCALE};
pub use forward::{
    adaln_apply, block_forward, forward_graph, input_scale, regress_modulation, BlockTrace,
    ForwardOutput, HiddenTrace, MaskHook, ModulationParams, LN_EPS,
};
pub use weights::{param_shapes, BlockParams, DitParams, DitWeights, ModSlot};

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::error::Error;
    use crate::numerics::Tensor;

    fn small() -> DitConfig {
        DitConfig {
            num_blocks: 3,
            hidden_size: 16,
            num_heads: 2,
            grid_h: 2,
            grid_w: 3,
            t_embed_dim: 8,
            num_classes: 4,
            ..DitConfig::default()
        }
    }

    fn randomized(cfg: DitConfig, seed: u64) -> DitWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = DitWeights::init(cfg, &mut rng).unwrap();
        for b in &mut w.params.blocks {
            b.mod_w2 = Tensor::uniform(b.mod_w2.shape(), 0.1, &mut rng);
            b.mod_b2 = Tensor::uniform(b.mod_b2.shape(), 0.5, &mut rng);
        }
        w
    }

    fn embeddings(w: &DitWeights, t: f64, c: usize) -> (Tensor, Tensor) {
        let cfg = &w.config;
        (
            timestep_embedding(t, cfg.t_embed_dim, cfg.sigma_max).unwrap(),
            w.class_embedding(c).unwrap(),
        )
    }

    #[test]
    fn zero_output_layer_gives_zero_modulation() {
        let w = DitWeights::init(small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (te, ce) = embeddings(&w, 0.7, 1);
        let (a, f) = regress_modulation(&te, &ce, w.block(1)).unwrap();
        for v in [&a.gamma, &a.beta, &a.alpha, &f.gamma, &f.beta, &f.alpha] {
            assert!(v.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn modulation_is_deterministic_and_planted_bias_shows_up() {
        let mut w = randomized(small(), 2);
        let (te, ce) = embeddings(&w, 1.1, 2);
        let first = regress_modulation(&te, &ce, w.block(2)).unwrap();
        let second = regress_modulation(&te, &ce, w.block(2)).unwrap();
        assert!(first.1.alpha.bit_eq(&second.1.alpha));

        let c = w.config.hidden_size;
        let d_star = 5;
        let b = w.block_mut(2);
        b.mod_w2 = Tensor::zeros(b.mod_w2.shape());
        b.mod_b2 = Tensor::zeros(b.mod_b2.shape());
        b.mod_b2.data_mut()[ModSlot::AlphaFf.index(c, d_star)] = 100.0;
        let (_, ff) = regress_modulation(&te, &ce, w.block(2)).unwrap();
        assert_eq!(ff.alpha.data()[d_star], 100.0);
        assert_eq!(ff.alpha.data().iter().filter(|&&v| v == 0.0).count(), c - 1);
    }

    #[test]
    fn regress_modulation_rejects_mismatched_embeddings() {
        let w = DitWeights::init(small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let te = Tensor::zeros(&[4]);
        let ce = w.class_embedding(0).unwrap();
        assert!(matches!(
            regress_modulation(&te, &ce, w.block(1)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn adaln_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::randn(&[4, 8], &mut rng);
        let zero = Tensor::zeros(&[8]);
        let plain = adaln_apply(&z, &zero, &zero).unwrap();
        assert!(plain.bit_eq(&z.layer_norm(LN_EPS).unwrap()));

        let beta = Tensor::randn(&[8], &mut rng);
        let ann = adaln_apply(&z, &Tensor::full(&[8], -1.0), &beta).unwrap();
        for r in 0..4 {
            assert_eq!(ann.row(r), beta.data());
        }

        let constant = Tensor::from_fn(&[4, 8], |i| (i / 8) as f64 * 3.0 - 2.0).unwrap();
        let out = adaln_apply(
            &constant,
            &Tensor::full(&[8], 0.5),
            &Tensor::full(&[8], 1.0),
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));

        assert!(adaln_apply(&z, &Tensor::zeros(&[7]), &zero).is_err());
    }

    #[test]
    fn dead_residual_block_is_identity() {
        let w = DitWeights::init(small(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::randn(&[6, 16], &mut rng);
        let (te, ce) = embeddings(&w, 0.3, 0);
        let out = block_forward(&w.config, &z, &te, &ce, w.block(1), None).unwrap();
        assert!(out.bit_eq(&z));
    }

    #[test]
    fn attention_gate_spike_dominates_block_delta() {
        let mut w = DitWeights::init(small(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let c = w.config.hidden_size;
        let d_star = 3;
        let b = w.block_mut(1);
        for d in 0..c {
            b.mod_b2.data_mut()[ModSlot::AlphaAttn.index(c, d)] = 1.0;
        }
        b.mod_b2.data_mut()[ModSlot::AlphaAttn.index(c, d_star)] = 100.0;
        b.o_b.data_mut()[d_star] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = Tensor::randn(&[6, 16], &mut rng);
        let (te, ce) = embeddings(&w, 1.0, 1);
        let out = block_forward(&w.config, &z, &te, &ce, w.block(1), None).unwrap();
        let delta = out.sub(&z).unwrap();
        let mut per_dim: Vec<f64> = (0..c)
            .map(|d| (0..6).map(|r| delta.row(r)[d].abs()).sum::<f64>() / 6.0)
            .collect();
        per_dim.sort_by(f64::total_cmp);
        let median = (per_dim[c / 2 - 1] + per_dim[c / 2]) / 2.0;
        for r in 0..6 {
            assert!(delta.row(r)[d_star].abs() >= 10.0 * median);
        }
    }

    #[test]
    fn block_mask_zeroes_dims() {
        let w = randomized(small(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Tensor::randn(&[6, 16], &mut rng);
        let (te, ce) = embeddings(&w, 2.0, 3);
        let dims = BTreeSet::from([0, 7]);
        let out = block_forward(&w.config, &z, &te, &ce, w.block(1), Some(&dims)).unwrap();
        for r in 0..6 {
            assert_eq!(out.row(r)[0], 0.0);
            assert_eq!(out.row(r)[7], 0.0);
        }
    }

    #[test]
    fn model_forward_is_deterministic_and_traced() {
        let w = randomized(small(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = Tensor::randn(&[6, 2], &mut rng);
        let (a, trace) = w.model_forward(&z, 1.5, 2, true, None).unwrap();
        let (b, _) = w.model_forward(&z, 1.5, 2, false, None).unwrap();
        assert!(a.bit_eq(&b));
        let trace = trace.unwrap();
        assert_eq!(trace.blocks.len(), 3);
        assert!(trace.blocks.iter().all(|bt| bt.hidden.shape() == [6, 16]));

        let noop = MaskHook::new(2, BTreeSet::new());
        let (c, _) = w.model_forward(&z, 1.5, 2, false, Some(&noop)).unwrap();
        assert!(a.bit_eq(&c));
    }

    #[test]
    fn model_forward_validates_inputs() {
        let w = randomized(small(), 12);
        let z = Tensor::zeros(&[6, 2]);
        assert!(matches!(
            w.model_forward(&z, 1.0, 4, false, None),
            Err(Error::InvalidCondition { .. })
        ));
        assert!(matches!(
            w.model_forward(&z, 3.5, 0, false, None),
            Err(Error::InvalidTimestep { .. })
        ));
        assert!(w.model_forward(&z, -0.1, 0, false, None).is_err());
        let bad_hook = MaskHook::new(4, BTreeSet::new());
        assert!(w.model_forward(&z, 1.0, 0, false, Some(&bad_hook)).is_err());
    }

    #[test]
    fn zero_modulation_reduces_to_embed_then_decode() {
        let mut w = randomized(small(), 13);
        for b in &mut w.params.blocks {
            b.mod_w2 = Tensor::zeros(b.mod_w2.shape());
            b.mod_b2 = Tensor::zeros(b.mod_b2.shape());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z = Tensor::randn(&[6, 2], &mut rng);
        let t = 0.8;
        let (pred, _) = w.model_forward(&z, t, 1, false, None).unwrap();

        let p = &w.params;
        let x = z.scale(input_scale(t)).unwrap();
        let h = x.matmul(&p.embed_w).unwrap();
        let h = Tensor::from_fn(&[6, 16], |i| {
            h.data()[i] + p.embed_b.data()[i % 16] + p.pos.data()[i]
        })
        .unwrap();
        let y = h.layer_norm(LN_EPS).unwrap().matmul(&p.decode_w).unwrap();
        let y = Tensor::from_fn(&[6, 2], |i| y.data()[i] + p.decode_b.data()[i % 2]).unwrap();
        assert!(pred.bit_eq(&y));
    }

    #[test]
    fn null_condition_ignores_real_class_embeddings() {
        let w = randomized(small(), 15);
        let mut other = w.clone();
        let null = w.config.null_class();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for c in w.config.real_classes() {
            let row = Tensor::randn(&[8], &mut rng);
            other.params.class_table.data_mut()[c * 8..(c + 1) * 8].copy_from_slice(row.data());
        }
        let z = Tensor::randn(&[6, 2], &mut rng);
        let (a, _) = w.model_forward(&z, 0.4, null, false, None).unwrap();
        let (b, _) = other.model_forward(&z, 0.4, null, false, None).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn batched_rows_match_single_sample_calls() {
        let w = randomized(small(), 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let z = Tensor::randn(&[3, 6, 2], &mut rng);
        let out = w
            .forward_batch(&z, &[0.1, 1.0, 2.9], &[0, 1, 3], None, false)
            .unwrap();
        for (i, (&t, &c)) in [0.1, 1.0, 2.9].iter().zip(&[0, 1, 3]).enumerate() {
            let zi = Tensor::new(vec![6, 2], z.data()[i * 12..(i + 1) * 12].to_vec()).unwrap();
            let (p, _) = w.model_forward(&zi, t, c, false, None).unwrap();
            let row = &out.prediction.data()[i * 12..(i + 1) * 12];
            for (a, b) in p.data().iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
