//! Guidance combinators and guided denoisers for the sampler.
//!
//! Every combinator is a single fused elementwise pass in index order, written
//! so the degenerate scales reproduce their operand bit for bit.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use crate::activations::MaProfile;
use crate::diffusion::Denoiser;
use crate::dit::{DitWeights, MaskHook};
use crate::error::{Error, Result};
use crate::intervention::InterventionSpec;
use crate::numerics::Tensor;

fn fused(op: &'static str, parts: &[&Tensor], f: impl Fn(&[f64]) -> f64) -> Result<Tensor> {
    let first = parts[0];
    if let Some(bad) = parts.iter().find(|p| p.shape() != first.shape()) {
        return Err(Error::shape(op, first.shape(), bad.shape()));
    }
    let mut buf = vec![0.0; parts.len()];
    let data = (0..first.len())
        .map(|i| {
            for (b, p) in buf.iter_mut().zip(parts) {
                *b = p.data()[i];
            }
            f(&buf)
        })
        .collect();
    Tensor::checked(op, first.shape().to_vec(), data)
}

/// Classifier-free guidance, `uncond + lambda * (cond - uncond)`, evaluated as
/// the affine blend `(1 - lambda) * uncond + lambda * cond`.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, lambda: f64) -> Result<Tensor> {
    fused("cfg_combine", &[cond, uncond], |v| {
        (1.0 - lambda) * v[1] + lambda * v[0]
    })
}

/// Conditional-anchored CFG term, `cond + lambda * (cond - uncond)`.
pub fn cfg_anchored(cond: &Tensor, uncond: &Tensor, lambda: f64) -> Result<Tensor> {
    fused("cfg_anchored", &[cond, uncond], |v| {
        v[0] + lambda * (v[0] - v[1])
    })
}

/// Detail guidance, `base + w * (base - degraded)`.
pub fn dg_combine(base: &Tensor, degraded: &Tensor, w: f64) -> Result<Tensor> {
    fused("dg_combine", &[base, degraded], |v| {
        v[0] + w * (v[0] - v[1])
    })
}

/// Combined rule, `cond + lambda * (cond - uncond) + w * (cond - degraded)`,
/// summed left to right.
pub fn cfg_dg_combine(
    cond: &Tensor,
    uncond: &Tensor,
    degraded: &Tensor,
    lambda: f64,
    w: f64,
) -> Result<Tensor> {
    fused("cfg_dg_combine", &[cond, uncond, degraded], |v| {
        (v[0] + lambda * (v[0] - v[1])) + w * (v[0] - v[2])
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceMode {
    Cond,
    Cfg,
    Dg,
    CfgDg,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 4] = [
        GuidanceMode::Cond,
        GuidanceMode::Cfg,
        GuidanceMode::Dg,
        GuidanceMode::CfgDg,
    ];

    /// Forward passes per denoiser call.
    pub fn passes(self) -> usize {
        match self {
            GuidanceMode::Cond => 1,
            GuidanceMode::Cfg | GuidanceMode::Dg => 2,
            GuidanceMode::CfgDg => 3,
        }
    }

    pub fn uses_cfg(self) -> bool {
        matches!(self, GuidanceMode::Cfg | GuidanceMode::CfgDg)
    }

    pub fn uses_dg(self) -> bool {
        matches!(self, GuidanceMode::Dg | GuidanceMode::CfgDg)
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceMode::Cond => "cond",
            GuidanceMode::Cfg => "cfg",
            GuidanceMode::Dg => "dg",
            GuidanceMode::CfgDg => "cfg+dg",
        })
    }
}

impl FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cond" => Ok(GuidanceMode::Cond),
            "cfg" => Ok(GuidanceMode::Cfg),
            "dg" => Ok(GuidanceMode::Dg),
            "cfg+dg" => Ok(GuidanceMode::CfgDg),
            other => Err(Error::InvalidParameter(format!(
                "unknown guidance mode {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceSpec {
    pub mode: GuidanceMode,
    pub lambda: f64,
    pub w: f64,
    /// Required by the detail-guidance modes.
    pub intervention: Option<InterventionSpec>,
}

impl GuidanceSpec {
    pub const DEFAULT_LAMBDA: f64 = 3.0;
    pub const DEFAULT_W: f64 = 1.0;

    pub fn cond() -> Self {
        GuidanceSpec {
            mode: GuidanceMode::Cond,
            lambda: Self::DEFAULT_LAMBDA,
            w: Self::DEFAULT_W,
            intervention: None,
        }
    }

    pub fn new(
        mode: GuidanceMode,
        lambda: f64,
        w: f64,
        intervention: Option<InterventionSpec>,
    ) -> Self {
        GuidanceSpec {
            mode,
            lambda,
            w,
            intervention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("w", self.w)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "guidance scale {name} = {v} must be >= 0"
                )));
            }
        }
        if self.mode.uses_dg() && self.intervention.is_none() {
            return Err(Error::InvalidParameter(format!(
                "mode {} needs an intervention spec",
                self.mode
            )));
        }
        Ok(())
    }
}

/// A model wrapped with a guidance rule. Counts forward passes.
#[derive(Debug)]
pub struct GuidedDenoiser<'a> {
    weights: &'a DitWeights,
    spec: GuidanceSpec,
    hook: Option<MaskHook>,
    passes: Cell<usize>,
}

impl<'a> GuidedDenoiser<'a> {
    pub fn spec(&self) -> &GuidanceSpec {
        &self.spec
    }

    /// Total model forward passes made so far.
    pub fn passes(&self) -> usize {
        self.passes.get()
    }

    pub fn reset_passes(&self) {
        self.passes.set(0);
    }

    fn forward(&self, z: &Tensor, t: f64, c: usize, hook: Option<&MaskHook>) -> Result<Tensor> {
        self.passes.set(self.passes.get() + 1);
        let b = z.shape().first().copied().unwrap_or(0);
        Ok(self
            .weights
            .forward_batch(z, &vec![t; b], &vec![c; b], hook, false)?
            .prediction)
    }
}

pub fn build_guided_denoiser<'a>(
    weights: &'a DitWeights,
    spec: &GuidanceSpec,
    profile: &MaProfile,
) -> Result<GuidedDenoiser<'a>> {
    spec.validate()?;
    let hook = match (&spec.intervention, spec.mode.uses_dg()) {
        (Some(iv), true) => Some(MaskHook::new(iv.depth, iv.resolve(weights, profile)?)),
        _ => None,
    };
    Ok(GuidedDenoiser {
        weights,
        spec: spec.clone(),
        hook,
        passes: Cell::new(0),
    })
}

impl Denoiser for GuidedDenoiser<'_> {
    fn predict_noise(&self, z: &Tensor, t: f64, c: usize) -> Result<Tensor> {
        let null = self.weights.config.null_class();
        let mode = self.spec.mode;
        if mode.uses_cfg() && c == null {
            return Err(Error::InvalidCondition {
                id: c,
                num_classes: null,
            });
        }
        let cond = self.forward(z, t, c, None)?;
        // Fixed operand order: cond, then uncond, then degraded.
        let uncond = if mode.uses_cfg() {
            Some(self.forward(z, t, null, None)?)
        } else {
            None
        };
        let degraded = if mode.uses_dg() {
            Some(self.forward(z, t, c, self.hook.as_ref())?)
        } else {
            None
        };
        let (lambda, w) = (self.spec.lambda, self.spec.w);
        match (uncond, degraded) {
            (None, None) => Ok(cond),
            (Some(u), None) => cfg_combine(&cond, &u, lambda),
            (None, Some(d)) => dg_combine(&cond, &d, w),
            (Some(u), Some(d)) => cfg_dg_combine(&cond, &u, &d, lambda, w),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffusion::{euler_sample, NoiseSchedule};
    use crate::dit::{planted_spike, DitConfig, SpikeSpec};

    fn field(v: f64) -> Tensor {
        Tensor::full(&[3, 2], v)
    }

    #[test]
    fn scalar_field_examples() {
        assert_eq!(
            cfg_combine(&field(1.0), &field(0.0), 4.0).unwrap().data()[0],
            4.0
        );
        assert_eq!(
            dg_combine(&field(1.0), &field(0.0), 1.0).unwrap().data()[0],
            2.0
        );
        let v = cfg_dg_combine(&field(1.0), &field(0.0), &field(0.5), 3.0, 1.0).unwrap();
        assert_eq!(v.data()[0], 4.5);
        assert!(cfg_combine(&field(1.0), &Tensor::zeros(&[2, 3]), 1.0).is_err());
        assert!(cfg_dg_combine(&field(1.0), &field(1.0), &Tensor::zeros(&[6]), 1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn collapse_lattice(seed in any::<u64>(), lambda in 0.0f64..8.0, w in 0.0f64..8.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = Tensor::randn(&[4, 3], &mut rng);
            let u = Tensor::randn(&[4, 3], &mut rng);
            let d = Tensor::randn(&[4, 3], &mut rng);
            prop_assert!(cfg_combine(&c, &u, 1.0).unwrap().bit_eq(&c));
            prop_assert!(cfg_combine(&c, &u, 0.0).unwrap().bit_eq(&u));
            prop_assert!(dg_combine(&c, &d, 0.0).unwrap().bit_eq(&c));
            prop_assert!(dg_combine(&c, &c, w).unwrap().bit_eq(&c));
            prop_assert!(cfg_dg_combine(&c, &u, &d, lambda, 0.0).unwrap().bit_eq(&cfg_anchored(&c, &u, lambda).unwrap()));
            prop_assert!(cfg_dg_combine(&c, &u, &d, 0.0, w).unwrap().bit_eq(&dg_combine(&c, &d, w).unwrap()));
        }

        #[test]
        fn translation_equivariance(seed in any::<u64>(), lambda in 0.0f64..8.0, w in 0.0f64..8.0, k in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = Tensor::randn(&[4, 3], &mut rng);
            let u = Tensor::randn(&[4, 3], &mut rng);
            let d = Tensor::randn(&[4, 3], &mut rng);
            let shift = |x: &Tensor| x.add(&Tensor::full(&[4, 3], k)).unwrap();
            let base = cfg_dg_combine(&c, &u, &d, lambda, w).unwrap();
            let moved = cfg_dg_combine(&shift(&c), &shift(&u), &shift(&d), lambda, w).unwrap();
            let expect = shift(&base);
            prop_assert!(moved.max_abs_diff(&expect) <= 1e-12 * (1.0 + lambda + w) * 8.0);
        }
    }

    fn model() -> (DitWeights, MaProfile) {
        let w = planted_spike(DitConfig::default(), SpikeSpec::new(3, 12, 100.0), 3).unwrap();
        (w, MaProfile::uniform(6, BTreeSet::from([12])))
    }

    #[test]
    fn modes_and_pass_counts() {
        let (w, p) = model();
        let z = Tensor::randn(&[2, 16, 2], &mut ChaCha8Rng::seed_from_u64(0));
        let raw = w.predict_noise(&z, 1.0, 4).unwrap();
        let iv = Some(InterventionSpec::ma_detected(3));
        for mode in GuidanceMode::ALL {
            let g = build_guided_denoiser(&w, &GuidanceSpec::new(mode, 3.0, 1.0, iv.clone()), &p)
                .unwrap();
            let out = g.predict_noise(&z, 1.0, 4).unwrap();
            assert_eq!(g.passes(), mode.passes());
            if mode == GuidanceMode::Cond {
                assert!(out.bit_eq(&raw));
            }
        }
        let empty = Some(InterventionSpec::explicit(3, BTreeSet::new()));
        let dg = build_guided_denoiser(
            &w,
            &GuidanceSpec::new(GuidanceMode::Dg, 3.0, 2.0, empty),
            &p,
        )
        .unwrap();
        assert!(dg.predict_noise(&z, 1.0, 4).unwrap().bit_eq(&raw));
    }

    #[test]
    fn cfg_rejects_null_condition_and_dg_needs_intervention() {
        let (w, p) = model();
        let z = Tensor::zeros(&[1, 16, 2]);
        let g = build_guided_denoiser(
            &w,
            &GuidanceSpec::new(GuidanceMode::Cfg, 3.0, 1.0, None),
            &p,
        )
        .unwrap();
        assert!(matches!(
            g.predict_noise(&z, 1.0, 8),
            Err(Error::InvalidCondition { .. })
        ));
        assert!(build_guided_denoiser(
            &w,
            &GuidanceSpec::new(GuidanceMode::Dg, 3.0, 1.0, None),
            &p
        )
        .is_err());
        assert!(GuidanceSpec::new(GuidanceMode::Cfg, -1.0, 1.0, None)
            .validate()
            .is_err());
    }

    #[test]
    fn sampler_run_with_three_passes_per_step() {
        let (w, p) = model();
        let spec = GuidanceSpec::new(
            GuidanceMode::CfgDg,
            3.0,
            1.0,
            Some(InterventionSpec::ma_detected(3)),
        );
        let g = build_guided_denoiser(&w, &spec, &p).unwrap();
        let sched = NoiseSchedule::new(3.0, 5).unwrap();
        euler_sample(&g, &sched, [16, 2], 0, 1, 4).unwrap();
        assert_eq!(g.passes(), 3 * 5);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in GuidanceMode::ALL {
            assert_eq!(m.to_string().parse::<GuidanceMode>().unwrap(), m);
        }
        assert!("cfgdg".parse::<GuidanceMode>().is_err());
    }
}
