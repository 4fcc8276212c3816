use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{GmmSpec, NoiseSchedule};
use crate::dit::DitWeights;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Anything that predicts the injected noise for a batch `z: [B, tokens, dim]`
/// at a shared timestep and condition.
pub trait Denoiser {
    fn predict_noise(&self, z: &Tensor, t: f64, c: usize) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, f64, usize) -> Result<Tensor>,
{
    fn predict_noise(&self, z: &Tensor, t: f64, c: usize) -> Result<Tensor> {
        self(z, t, c)
    }
}

impl Denoiser for DitWeights {
    fn predict_noise(&self, z: &Tensor, t: f64, c: usize) -> Result<Tensor> {
        let b = z.shape().first().copied().unwrap_or(0);
        Ok(self
            .forward_batch(z, &vec![t; b], &vec![c; b], None, false)?
            .prediction)
    }
}

/// Closed-form noise prediction for data drawn from a Gaussian mixture,
/// applied independently to every token.
///
/// With `conditional` set, ids below the component count select that
/// component alone; any other id uses the full mixture.
#[derive(Clone, Debug)]
pub struct GmmOracle {
    gmm: GmmSpec,
    components: Vec<GmmSpec>,
    conditional: bool,
}

impl GmmOracle {
    pub fn unconditional(gmm: GmmSpec) -> Self {
        GmmOracle {
            gmm,
            components: Vec::new(),
            conditional: false,
        }
    }

    pub fn conditional(gmm: GmmSpec) -> Self {
        let components = (0..gmm.num_components())
            .map(|i| gmm.component(i).expect("index in range"))
            .collect();
        GmmOracle {
            gmm,
            components,
            conditional: true,
        }
    }

    fn spec_for(&self, c: usize) -> &GmmSpec {
        if self.conditional {
            self.components.get(c).unwrap_or(&self.gmm)
        } else {
            &self.gmm
        }
    }
}

impl Denoiser for GmmOracle {
    fn predict_noise(&self, z: &Tensor, t: f64, c: usize) -> Result<Tensor> {
        if t.is_nan() || t <= 0.0 {
            return Err(Error::InvalidTimestep {
                t,
                max: f64::INFINITY,
            });
        }
        let spec = self.spec_for(c);
        let d = spec.dim();
        if z.last_dim() != d {
            return Err(Error::shape("gmm_oracle", z.shape(), &[d]));
        }
        let mut out = Vec::with_capacity(z.len());
        for point in z.data().chunks_exact(d) {
            out.extend(spec.noise_prediction_sigma(point, t));
        }
        Tensor::checked("gmm_oracle", z.shape().to_vec(), out)
    }
}

/// Samples evaluated per denoiser call.
const SAMPLE_CHUNK: usize = 256;

/// Deterministic first-order probability-flow sampler.
///
/// Starts from `z ~ N(0, sigma_max^2)` and for each step forms
/// `x = z - sigma(t_i) * eps`, then `z <- x + sigma(t_{i+1}) * (z - x) / sigma(t_i)`.
/// Returns `[count, tokens, dim]`.
pub fn euler_sample(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    sample_shape: [usize; 2],
    c: usize,
    seed: u64,
    count: usize,
) -> Result<Tensor> {
    if schedule.steps == 0 {
        return Err(Error::InvalidParameter(
            "sampler needs at least one step".into(),
        ));
    }
    if count == 0 {
        return Err(Error::Empty("sample count"));
    }
    let [tokens, dim] = sample_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Tensor::randn(&[count, tokens, dim], &mut rng).scale(schedule.sigma_max)?;
    let per = tokens * dim;
    let mut out = Vec::with_capacity(count * per);
    for chunk in init.data().chunks(SAMPLE_CHUNK * per) {
        let n = chunk.len() / per;
        let z = Tensor::from_parts(vec![n, tokens, dim], chunk.to_vec());
        out.extend(integrate(denoiser, schedule, z, c)?.into_data());
    }
    Tensor::checked("euler_sample", vec![count, tokens, dim], out)
}

fn integrate(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    mut z: Tensor,
    c: usize,
) -> Result<Tensor> {
    for i in 0..schedule.steps {
        let t = schedule.timestep(i);
        let t_next = schedule.timestep(i + 1);
        let eps = denoiser.predict_noise(&z, t, c)?;
        if eps.shape() != z.shape() {
            return Err(Error::shape("euler_sample", eps.shape(), z.shape()));
        }
        let (s, s_next) = (schedule.sigma(t), schedule.sigma(t_next));
        let data = z
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&zv, &e)| {
                let x = zv - s * e;
                x + s_next * (zv - x) / s
            })
            .collect();
        z = Tensor::checked("euler_sample", z.shape().to_vec(), data)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_denoiser_returns_initial_draw() {
        let zero = |z: &Tensor, _t: f64, _c: usize| Ok(Tensor::zeros(z.shape()));
        let sched = NoiseSchedule::new(3.0, 7).unwrap();
        let out = euler_sample(&zero, &sched, [3, 2], 0, 42, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let init = Tensor::randn(&[5, 3, 2], &mut rng).scale(3.0).unwrap();
        assert!(out.bit_eq(&init));
    }

    #[test]
    fn same_seed_same_batch() {
        let oracle = GmmOracle::unconditional(GmmSpec::default_ring());
        let sched = NoiseSchedule::new(3.0, 20).unwrap();
        let a = euler_sample(&oracle, &sched, [1, 2], 0, 9, 300).unwrap();
        let b = euler_sample(&oracle, &sched, [1, 2], 0, 9, 300).unwrap();
        assert!(a.bit_eq(&b));
        let c = euler_sample(&oracle, &sched, [1, 2], 0, 10, 300).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn wrong_shape_from_denoiser_is_an_error() {
        let bad = |_z: &Tensor, _t: f64, _c: usize| Ok(Tensor::zeros(&[1]));
        let sched = NoiseSchedule::new(3.0, 2).unwrap();
        assert!(matches!(
            euler_sample(&bad, &sched, [2, 2], 0, 0, 2),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn single_component_oracle_lands_on_the_mean() {
        let g = GmmSpec::new(vec![vec![0.4, -0.3]], 1e-6, vec![1.0]).unwrap();
        let sched = NoiseSchedule::new(3.0, 200).unwrap();
        let out = euler_sample(&GmmOracle::unconditional(g), &sched, [1, 2], 0, 1, 64).unwrap();
        for p in out.data().chunks(2) {
            assert!(
                (p[0] - 0.4).abs() < 1e-3 && (p[1] + 0.3).abs() < 1e-3,
                "{p:?}"
            );
        }
    }

    #[test]
    fn conditional_oracle_uses_the_selected_component() {
        let g = GmmSpec::default_ring();
        let oracle = GmmOracle::conditional(g.clone());
        let sched = NoiseSchedule::new(3.0, 100).unwrap();
        let out = euler_sample(&oracle, &sched, [4, 2], 2, 3, 16).unwrap();
        let m = &g.means()[2];
        for p in out.data().chunks(2) {
            assert!(((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sqrt() < 0.3);
        }
    }
}
