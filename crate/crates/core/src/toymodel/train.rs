//! Adam and generative pretraining.

use super::{generative_loss_for, Inputs, ToyModel};
use crate::datagen::{sample_batch, World, TEXT};
use crate::error::{invalid, shape, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state over a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(params: &[&Matrix], cfg: AdamConfig) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[&Matrix], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape("Adam parameter list changed between steps"));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(shape("Adam gradient shape mismatch"));
            }
            let (p, g) = (p.as_mut_slice(), g.as_slice());
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Modalities whose inputs predict the page-0 tokens. `text` means the
    /// input is a random page of the same class.
    pub sources: Vec<String>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 3000, lr: 1e-3, batch: 64, sources: vec!["image".into(), "audio".into(), TEXT.into()] }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: ToyModel,
    /// Mean generative loss (nats/token) over sources, one entry per step.
    pub trace: Vec<f64>,
}

/// Adam on the generative loss averaged over `cfg.sources`.
pub fn pretrain(model: &ToyModel, world: &World, cfg: &PretrainConfig, rng: &mut Rng) -> Result<PretrainOutcome> {
    Ok(pretrain_with_snapshots(model, world, cfg, rng, &[])?.0)
}

/// [`pretrain`] that also returns copies of the model after each step
/// count in `at` (in the order given; 0 is the initial model).
pub fn pretrain_with_snapshots(
    model: &ToyModel,
    world: &World,
    cfg: &PretrainConfig,
    rng: &mut Rng,
    at: &[usize],
) -> Result<(PretrainOutcome, Vec<ToyModel>)> {
    if let Some(&s) = at.iter().find(|&&s| s > cfg.steps) {
        return Err(invalid(format!("snapshot at step {s} is beyond the {} pretraining steps", cfg.steps)));
    }
    let mut snaps: Vec<Option<ToyModel>> = vec![None; at.len()];
    let take = |step: usize, m: &ToyModel, snaps: &mut Vec<Option<ToyModel>>| {
        for (slot, &s) in snaps.iter_mut().zip(at) {
            if s == step {
                *slot = Some(m.clone());
            }
        }
    };
    if cfg.sources.is_empty() {
        return Err(invalid("pretraining needs at least one source modality"));
    }
    if cfg.batch == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    for s in &cfg.sources {
        if s != TEXT {
            model.spec().obs_dim(s)?;
            world.spec().modality(s)?;
        }
    }
    let mut model = model.clone();
    let mut adam = Adam::new(&model.tensors(), AdamConfig::default());
    let mut trace = Vec::with_capacity(cfg.steps);
    let inv_sources = 1.0 / cfg.sources.len() as f64;
    take(0, &model, &mut snaps);
    for step in 1..=cfg.steps {
        let batch = sample_batch(world, cfg.batch, rng)?;
        let targets: Vec<Vec<u32>> = batch.iter().map(|s| s.tokens.clone()).collect();
        let mut grads = model.zeros_like();
        let mut loss = 0.0;
        for (k, source) in cfg.sources.iter().enumerate() {
            let mut g = model.zeros_like();
            let l = if source == TEXT {
                let inputs: Vec<Vec<u32>> = batch
                    .iter()
                    .map(|s| world.tokens(s.class_id, rng.below(world.spec().pages)).to_vec())
                    .collect();
                generative_loss_for(&model, TEXT, Inputs::Tokens(&inputs), &targets, Some(&mut g))?
            } else {
                let rows: Vec<Vec<f64>> = batch.iter().map(|s| s.observations[source].clone()).collect();
                let x = Matrix::from_rows(&rows)?;
                generative_loss_for(&model, source, Inputs::Obs(&x), &targets, Some(&mut g))?
            };
            loss += (l - loss) / (k + 1) as f64;
            for (acc, gi) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                acc.add_scaled(gi, inv_sources)?;
            }
        }
        trace.push(loss);
        let grad_refs = grads.tensors();
        adam.step(model.tensors_mut(), &grad_refs, cfg.lr)?;
        take(step, &model, &mut snaps);
    }
    let snaps = snaps.into_iter().map(|s| s.expect("every snapshot step is reached")).collect();
    Ok((PretrainOutcome { model, trace }, snaps))
}
