//! Denoising training loop: minimize ||eps - eps_hat||^2 over the dataset.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::dataset::ShapeScene;
use crate::diffusion::schedule::ScheduleSpec;
use crate::diffusion::unet::{forward_on_graph, masked_source, Checkpoint, ForwardInputs, UNetSpec};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Adam over an ordered parameter list. Parameters that received no gradient
/// in a step (unused prompt rows) are skipped entirely that step.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: vec![0; sizes.len()],
        }
    }

    pub fn step(&mut self, idx: usize, param: &mut [f32], grad: &[f32]) {
        self.t[idx] += 1;
        let t = self.t[idx] as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        let lr = self.lr * bias2.sqrt() / bias1;
        let m = &mut self.m[idx];
        let v = &mut self.v[idx];
        for i in 0..param.len() {
            let g = grad[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            param[i] -= (lr * mi / (vi.sqrt() + self.eps)) as f32;
        }
    }
}

/// Per-sample loss and parameter gradients for one denoising step.
fn sample_grad(
    ckpt: &Checkpoint,
    scene: &ShapeScene,
    seed: u64,
    step: usize,
    slot: usize,
) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
    let mut r = rng::rng_for(seed, step as u64, slot as u64);
    let t = r.gen_range(1..=ckpt.schedule.t_train());
    let eps = rng::normal_tensor(&mut r, &[3, ckpt.spec.image_side, ckpt.spec.image_side]);
    let x_t = ckpt.schedule.q_sample(&scene.image, t, &eps)?;
    let masked_src = masked_source(&scene.image, &scene.mask);

    let mut g = Graph::new();
    let inputs = ForwardInputs {
        x_t: g.constant(x_t),
        mask: g.constant(scene.mask.clone()),
        masked_src: g.constant(masked_src),
    };
    let fwd = forward_on_graph(&mut g, ckpt, inputs, t, scene.prompt_id, true)?;
    let target = g.constant(eps);
    let diff = g.sub(fwd.eps_hat, target)?;
    let sq = g.mul(diff, diff)?;
    let loss = g.mean_all(sq);
    let loss_val = g.value(loss).item() as f64;
    g.backward(loss)?;
    let grads = fwd.param_ids.iter().map(|&id| g.grad(id)).collect();
    Ok((loss_val, grads))
}

/// Train a fresh model on the dataset. Deterministic in `cfg.seed`: the same
/// seed reproduces the loss curve bit-for-bit regardless of thread count.
pub fn train(
    dataset: &[ShapeScene],
    spec: &UNetSpec,
    schedule: ScheduleSpec,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Contract("train: empty dataset".into()));
    }
    let mut ckpt = Checkpoint::init(spec.clone(), schedule, cfg.seed)?;
    let sizes: Vec<usize> = ckpt.params.entries().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = Adam::new(cfg.lr, &sizes);
    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut losses = Vec::with_capacity(total_steps);

    for step in 0..total_steps {
        let batch = pick_batch(dataset.len(), cfg.batch_size, cfg.seed, step);
        let results: Vec<Result<(f64, Vec<Option<Tensor<f32>>>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| sample_grad(&ckpt, &dataset[idx], cfg.seed, step, slot))
            .collect();

        let mut loss_sum = 0.0;
        let mut grad_acc: Vec<Option<Vec<f32>>> = vec![None; sizes.len()];
        for res in results {
            let (loss, grads) = res?;
            loss_sum += loss;
            for (i, gopt) in grads.into_iter().enumerate() {
                if let Some(gt) = gopt {
                    match &mut grad_acc[i] {
                        Some(acc) => {
                            for (a, &b) in acc.iter_mut().zip(gt.data()) {
                                *a += b;
                            }
                        }
                        None => grad_acc[i] = Some(gt.into_data()),
                    }
                }
            }
        }
        let mean_loss = loss_sum / batch.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "loss became non-finite at step {step} (seed {})",
                cfg.seed
            )));
        }
        losses.push(mean_loss);

        let inv_batch = 1.0 / batch.len() as f32;
        for (i, acc) in grad_acc.into_iter().enumerate() {
            if let Some(mut grad) = acc {
                for v in &mut grad {
                    *v *= inv_batch;
                }
                let (_, param) = &mut ckpt.params.entries_mut()[i];
                opt.step(i, param.data_mut(), &grad);
            }
        }
    }
    Ok((ckpt, losses))
}

/// Deterministic batch selection. A batch that covers the whole dataset uses
/// every index in order, so fixed-batch overfitting runs are exact.
fn pick_batch(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    let mut r = rng::rng_for(seed, 0xba7c, step as u64);
    let mut pool: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(batch);
    for k in 0..batch {
        let pick = r.gen_range(k..n);
        pool.swap(k, pick);
        out.push(pool[k]);
    }
    out
}
