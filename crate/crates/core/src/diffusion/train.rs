use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{GmmSpec, NoiseSchedule};
use crate::dit::{forward_graph, DitConfig, DitWeights};
use crate::error::{Error, Result};
use crate::numerics::{Adam, Graph, Tensor};

/// Optimization settings for denoiser training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing a sample's condition with the null id.
    pub p_drop: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch: 128,
            lr: 3e-4,
            p_drop: 0.1,
            seed: 0,
        }
    }
}

/// One clean training example: a `[tokens, data_dim]` field and its class id.
pub type Example = (Tensor, usize);

/// Class-conditional examples: every token of a sample is drawn from the
/// component matching its class.
pub fn draw_examples<R: Rng + ?Sized>(
    gmm: &GmmSpec,
    cfg: &DitConfig,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Example>> {
    if gmm.dim() != cfg.data_dim {
        return Err(Error::shape("draw_examples", &[gmm.dim()], &[cfg.data_dim]));
    }
    if gmm.num_components() != cfg.num_classes - 1 {
        return Err(Error::InvalidParameter(format!(
            "{} mixture components but {} real classes",
            gmm.num_components(),
            cfg.num_classes - 1
        )));
    }
    let tokens = cfg.tokens();
    (0..count)
        .map(|_| {
            let c = gmm.sample_component_index(rng);
            let data = (0..tokens).flat_map(|_| gmm.sample_from(c, rng)).collect();
            Ok((Tensor::new(vec![tokens, cfg.data_dim], data)?, c))
        })
        .collect()
}

/// Noised inputs and targets for one optimization step.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    /// `[B, tokens, data_dim]`
    pub z_t: Tensor,
    pub ts: Vec<f64>,
    pub conditions: Vec<usize>,
    /// The injected noise, which is the regression target.
    pub noise: Tensor,
}

impl TrainingBatch {
    /// Draws `t ~ U(0, sigma_max]`, `eps ~ N(0, I)` and condition dropout for each example.
    pub fn draw<R: Rng + ?Sized>(
        examples: &[Example],
        schedule: &NoiseSchedule,
        p_drop: f64,
        null_id: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let first = examples.first().ok_or(Error::Empty("training batch"))?;
        let shape = first.0.shape().to_vec();
        let per = first.0.len();
        let mut z = Vec::with_capacity(examples.len() * per);
        let mut noise = Vec::with_capacity(examples.len() * per);
        let mut ts = Vec::with_capacity(examples.len());
        let mut conditions = Vec::with_capacity(examples.len());
        for (x, c) in examples {
            if x.shape() != shape.as_slice() {
                return Err(Error::shape("training batch", x.shape(), &shape));
            }
            let u: f64 = rng.random();
            let t = schedule.sigma_max * (1.0 - u);
            let eps = Tensor::from_parts(
                shape.clone(),
                (0..per)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            let drop = rng.random::<f64>() < p_drop;
            z.extend(schedule.forward_noise(x, t, &eps)?.into_data());
            noise.extend(eps.into_data());
            ts.push(t);
            conditions.push(if drop { null_id } else { *c });
        }
        let mut bshape = vec![examples.len()];
        bshape.extend(shape);
        Ok(TrainingBatch {
            z_t: Tensor::from_parts(bshape.clone(), z),
            ts,
            conditions,
            noise: Tensor::from_parts(bshape, noise),
        })
    }
}

/// Mean squared error between predicted and injected noise.
pub fn noise_prediction_loss(prediction: &Tensor, noise: &Tensor) -> Result<f64> {
    let diff = prediction.sub(noise)?;
    Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64)
}

/// Single-writer training loop state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub weights: DitWeights,
    pub schedule: NoiseSchedule,
    pub p_drop: f64,
    optimizer: Adam,
}

impl Trainer {
    pub fn new(weights: DitWeights, schedule: NoiseSchedule, cfg: &TrainConfig) -> Self {
        Trainer {
            weights,
            schedule,
            p_drop: cfg.p_drop,
            optimizer: Adam::new(cfg.lr),
        }
    }

    /// Loss and parameter gradients (canonical order) on a prepared batch.
    pub fn loss_and_grads(&self, batch: &TrainingBatch) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let p = self.weights.bind(&mut g, true);
        let (pred, _) = forward_graph(
            &mut g,
            &p,
            &self.weights.config,
            &batch.z_t,
            &batch.ts,
            &batch.conditions,
            None,
            false,
        )?;
        let target = g.constant(batch.noise.clone());
        let loss = g.mse(pred, target)?;
        let vars: Vec<_> = p.named().into_iter().map(|(_, v)| *v).collect();
        let mut grads = g.grad_of(loss, &vars)?;
        let grads = vars
            .iter()
            .map(|&v| grads.take(v).expect("requested"))
            .collect();
        Ok((g.value(loss).item(), grads))
    }

    /// One optimization step on `examples`; returns the pre-update loss.
    pub fn training_step<R: Rng + ?Sized>(
        &mut self,
        examples: &[Example],
        rng: &mut R,
    ) -> Result<f64> {
        let null = self.weights.config.null_class();
        let batch = TrainingBatch::draw(examples, &self.schedule, self.p_drop, null, rng)?;
        let (loss, grads) = self.loss_and_grads(&batch)?;
        let mut params = self.weights.params.values_mut();
        self.optimizer.update(&mut params, &grads)?;
        Ok(loss)
    }
}

/// Trains on the class-conditional mixture task; returns the final weights
/// and the per-step loss curve. `progress` is called after every step.
/// Calls [`retain_freed_memory`](crate::numerics::retain_freed_memory).
pub fn train<R: Rng + ?Sized>(
    weights: DitWeights,
    schedule: NoiseSchedule,
    gmm: &GmmSpec,
    cfg: &TrainConfig,
    rng: &mut R,
    mut progress: impl FnMut(usize, f64),
) -> Result<(DitWeights, Vec<f64>)> {
    if cfg.batch == 0 {
        return Err(Error::Empty("training batch"));
    }
    crate::numerics::retain_freed_memory();
    let mut trainer = Trainer::new(weights, schedule, cfg);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let examples = draw_examples(gmm, &trainer.weights.config, cfg.batch, rng)?;
        let loss = trainer.training_step(&examples, rng)?;
        losses.push(loss);
        progress(step, loss);
    }
    Ok((trainer.weights, losses))
}
