//! Degraded denoisers built by zeroing hidden-state dimensions at one block,
//! plus the random non-massive control arm.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activations::{median, MaProfile};
use crate::diffusion::Denoiser;
use crate::dit::{DitWeights, MaskHook};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use crate::numerics::mask_columns as mask_dimensions;

/// Which dimensions to zero.
#[derive(Clone, Debug, PartialEq)]
pub enum InterventionMode {
    /// The profile's detected set at the chosen depth.
    MaDetected,
    ExplicitDims(BTreeSet<usize>),
    /// `count` dimensions drawn from outside the detected set.
    RandomControl {
        count: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterventionSpec {
    /// 1-based block whose output is masked.
    pub depth: usize,
    pub mode: InterventionMode,
}

impl InterventionSpec {
    pub fn ma_detected(depth: usize) -> Self {
        InterventionSpec {
            depth,
            mode: InterventionMode::MaDetected,
        }
    }

    pub fn explicit(depth: usize, dims: BTreeSet<usize>) -> Self {
        InterventionSpec {
            depth,
            mode: InterventionMode::ExplicitDims(dims),
        }
    }

    pub fn random_control(depth: usize, count: usize, seed: u64) -> Self {
        InterventionSpec {
            depth,
            mode: InterventionMode::RandomControl { count, seed },
        }
    }

    /// The concrete dimension set, validated against the model width.
    pub fn resolve(&self, weights: &DitWeights, profile: &MaProfile) -> Result<BTreeSet<usize>> {
        let cfg = &weights.config;
        let c = cfg.hidden_size;
        if self.depth == 0 || self.depth > cfg.num_blocks {
            return Err(Error::InvalidParameter(format!(
                "intervention depth {} outside 1..={}",
                self.depth, cfg.num_blocks
            )));
        }
        let dims = match &self.mode {
            InterventionMode::MaDetected => {
                let m = profile.at(self.depth)?;
                if m.is_empty() {
                    return Err(Error::Empty(
                        "massive-activation set at the intervention depth",
                    ));
                }
                m.clone()
            }
            InterventionMode::ExplicitDims(d) => d.clone(),
            InterventionMode::RandomControl { count, seed } => {
                let m = profile.at(self.depth)?;
                let pool: Vec<usize> = (0..c).filter(|d| !m.contains(d)).collect();
                if *count > pool.len() {
                    return Err(Error::InvalidParameter(format!(
                        "{count} control dimensions requested, only {} outside the detected set",
                        pool.len()
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                index::sample(&mut rng, pool.len(), *count)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect()
            }
        };
        if let Some(&d) = dims.iter().find(|&&d| d >= c) {
            return Err(Error::DimensionOutOfRange { dim: d, extent: c });
        }
        Ok(dims)
    }
}

/// `D_{theta,m}`: the base model with a mask at one block's output.
#[derive(Clone, Debug)]
pub struct DegradedDenoiser<'a> {
    pub weights: &'a DitWeights,
    pub hook: MaskHook,
}

impl Denoiser for DegradedDenoiser<'_> {
    fn predict_noise(&self, z: &Tensor, t: f64, c: usize) -> Result<Tensor> {
        let b = z.shape().first().copied().unwrap_or(0);
        let out =
            self.weights
                .forward_batch(z, &vec![t; b], &vec![c; b], Some(&self.hook), false)?;
        Ok(out.prediction)
    }
}

pub fn make_degraded<'a>(
    weights: &'a DitWeights,
    spec: &InterventionSpec,
    profile: &MaProfile,
) -> Result<DegradedDenoiser<'a>> {
    let dims = spec.resolve(weights, profile)?;
    Ok(DegradedDenoiser {
        weights,
        hook: MaskHook::new(spec.depth, dims),
    })
}

/// One probe point for the intervention report.
#[derive(Clone, Debug)]
pub struct InterventionInput {
    /// `[tokens, data_dim]`
    pub z: Tensor,
    pub t: f64,
    pub c: usize,
}

/// Output deltas of one arm against the unmodified model.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmReport {
    pub arm: String,
    pub dims: BTreeSet<usize>,
    /// `||D - D_arm||_2` per input, in input order.
    pub l2: Vec<f64>,
    pub mean_l2: f64,
    pub median_l2: f64,
    /// Mean absolute delta per output channel, averaged over inputs and tokens.
    pub per_channel: Vec<f64>,
}

/// Three-arm comparison: the original model, the massive-dimension mask, and
/// a random control mask of equal size at the same depth. An empty detected
/// set yields all-zero deltas for both masked arms instead of an error.
pub fn intervention_report(
    weights: &DitWeights,
    depth: usize,
    profile: &MaProfile,
    control_seed: u64,
    inputs: &[InterventionInput],
) -> Result<Vec<ArmReport>> {
    if inputs.is_empty() {
        return Err(Error::Empty("intervention inputs"));
    }
    let detected = profile.at(depth)?.clone();
    let arms = [
        ("original", BTreeSet::new()),
        (
            "ma_disrupted",
            InterventionSpec::explicit(depth, detected.clone()).resolve(weights, profile)?,
        ),
        (
            "non_ma_disrupted",
            InterventionSpec::random_control(depth, detected.len(), control_seed)
                .resolve(weights, profile)?,
        ),
    ];
    let base: Vec<Tensor> = inputs
        .iter()
        .map(|i| {
            weights
                .model_forward(&i.z, i.t, i.c, false, None)
                .map(|o| o.0)
        })
        .collect::<Result<_>>()?;
    let channels = weights.config.data_dim;
    arms.into_iter()
        .map(|(name, dims)| {
            let hook = MaskHook::new(depth, dims.clone());
            let mut l2 = Vec::with_capacity(inputs.len());
            let mut per_channel = vec![0.0; channels];
            for (inp, b) in inputs.iter().zip(&base) {
                let delta = if dims.is_empty() {
                    Tensor::zeros(b.shape())
                } else {
                    let (out, _) =
                        weights.model_forward(&inp.z, inp.t, inp.c, false, Some(&hook))?;
                    b.sub(&out)?
                };
                l2.push(delta.l2_norm());
                let rows = delta.rows() as f64;
                for row in delta.data().chunks_exact(channels) {
                    for (acc, v) in per_channel.iter_mut().zip(row) {
                        *acc += v.abs() / rows;
                    }
                }
            }
            per_channel
                .iter_mut()
                .for_each(|v| *v /= inputs.len() as f64);
            Ok(ArmReport {
                arm: name.to_string(),
                dims,
                mean_l2: l2.iter().sum::<f64>() / l2.len() as f64,
                median_l2: median(&l2),
                l2,
                per_channel,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::dit::{planted_spike, DitConfig, SpikeSpec};

    fn inputs(n: usize, seed: u64) -> Vec<InterventionInput> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| InterventionInput {
                z: Tensor::randn(&[16, 2], &mut rng),
                t: 0.3 + 0.1 * i as f64,
                c: i % 9,
            })
            .collect()
    }

    fn spiked() -> (DitWeights, MaProfile) {
        let w = planted_spike(DitConfig::default(), SpikeSpec::new(3, 12, 100.0), 8).unwrap();
        let p = MaProfile::uniform(6, BTreeSet::from([12]));
        (w, p)
    }

    #[test]
    fn mask_examples() {
        let ones = Tensor::full(&[4, 4], 1.0);
        assert!(mask_dimensions(&ones, &BTreeSet::new())
            .unwrap()
            .bit_eq(&ones));
        let all: BTreeSet<usize> = (0..4).collect();
        assert!(mask_dimensions(&ones, &all)
            .unwrap()
            .bit_eq(&Tensor::zeros(&[4, 4])));
        let m = mask_dimensions(&ones, &BTreeSet::from([2])).unwrap();
        assert_eq!(m.sum(), 12.0);
        assert!(m.data().chunks(4).all(|r| r[2] == 0.0));
        assert!(mask_dimensions(&ones, &BTreeSet::from([4])).is_err());
    }

    #[test]
    fn empty_explicit_mask_is_a_no_op() {
        let (w, p) = spiked();
        let d = make_degraded(&w, &InterventionSpec::explicit(3, BTreeSet::new()), &p).unwrap();
        for inp in inputs(10, 1) {
            let z = inp.z.reshape(&[1, 16, 2]).unwrap();
            let base = w.predict_noise(&z, inp.t, inp.c).unwrap();
            assert!(d.predict_noise(&z, inp.t, inp.c).unwrap().bit_eq(&base));
        }
    }

    #[test]
    fn control_dims_are_deterministic_and_disjoint() {
        let (w, p) = spiked();
        let spec = InterventionSpec::random_control(3, 5, 77);
        let a = spec.resolve(&w, &p).unwrap();
        assert_eq!(a, spec.resolve(&w, &p).unwrap());
        assert_eq!(a.len(), 5);
        assert!(!a.contains(&12));
        assert!(InterventionSpec::random_control(3, 64, 0)
            .resolve(&w, &p)
            .is_err());
    }

    #[test]
    fn invalid_specs() {
        let (w, p) = spiked();
        assert!(InterventionSpec::ma_detected(7).resolve(&w, &p).is_err());
        assert!(InterventionSpec::ma_detected(0).resolve(&w, &p).is_err());
        let empty = MaProfile::uniform(6, BTreeSet::new());
        assert!(matches!(
            InterventionSpec::ma_detected(2).resolve(&w, &empty),
            Err(Error::Empty(_))
        ));
        assert!(InterventionSpec::explicit(2, BTreeSet::from([64]))
            .resolve(&w, &p)
            .is_err());
        // The last block is a valid depth: the mask lands right before decoding.
        assert!(InterventionSpec::ma_detected(6).resolve(&w, &p).is_ok());
    }

    #[test]
    fn report_arms() {
        let (w, p) = spiked();
        let inp = inputs(20, 2);
        let r = intervention_report(&w, 3, &p, 0, &inp).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r[0].l2.iter().all(|&v| v == 0.0));
        assert!(r[1].median_l2 >= 5.0 * r[2].median_l2, "{r:?}");

        let mut rev = inp.clone();
        rev.reverse();
        let back = intervention_report(&w, 3, &p, 0, &rev).unwrap();
        for (a, b) in r.iter().zip(&back) {
            assert_eq!(a.median_l2, b.median_l2);
            assert!((a.mean_l2 - b.mean_l2).abs() <= 1e-12 * a.mean_l2.max(1.0));
        }

        let empty = MaProfile::uniform(6, BTreeSet::new());
        let z = intervention_report(&w, 3, &empty, 0, &inp).unwrap();
        assert!(z[1].l2.iter().all(|&v| v == 0.0) && z[1].per_channel.iter().all(|&v| v == 0.0));
    }
}
