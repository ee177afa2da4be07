//! Small convolutional classifier over (shape x background) whose 64-dim
//! penultimate features feed the Fréchet metric.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::dataset::ShapeScene;
use crate::diffusion::train::Adam;
use crate::diffusion::unet::Params;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, NodeId, Pad, Tensor};

pub const FEATURE_DIM: usize = 64;
pub const CLASS_COUNT: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatNetSpec {
    pub image_side: usize,
    pub channels: [usize; 3],
}

impl Default for FeatNetSpec {
    fn default() -> Self {
        FeatNetSpec {
            image_side: 32,
            channels: [16, 32, FEATURE_DIM],
        }
    }
}

/// Feature extractor plus classification head.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    pub spec: FeatNetSpec,
    pub params: Params,
    pub train_seed: u64,
    pub held_out_accuracy: f64,
}

fn init_params(spec: &FeatNetSpec, seed: u64) -> Result<Params> {
    let mut r = rng::rng_for(seed, 0xfea7, 0);
    let mut normal = |shape: &[usize], std: f32| {
        let base = rng::normal_tensor(&mut r, shape);
        base.map(|v| v * std)
    };
    let mut p = Params::new();
    let [c1, c2, c3] = spec.channels;
    for (name, co, ci) in [
        ("conv1", c1, 3),
        ("conv2", c2, c1),
        ("conv3", c3, c2),
        ("conv4", c3, c3),
    ] {
        let std = (2.0 / (ci * 9) as f64).sqrt() as f32;
        p.push(&format!("{name}.w"), normal(&[co, ci, 3, 3], std))?;
        p.push(&format!("{name}.b"), Tensor::zeros(&[co]))?;
    }
    let std = (1.0 / c3 as f64).sqrt() as f32;
    p.push("head.w", normal(&[c3, CLASS_COUNT], std))?;
    p.push("head.b", Tensor::zeros(&[CLASS_COUNT]))?;
    Ok(p)
}

/// Build the forward pass; returns (feature node, logits node, param ids).
fn forward_on_graph(
    g: &mut Graph<f32>,
    net: &FeatureNet,
    image: NodeId,
    trainable: bool,
) -> Result<(NodeId, NodeId, Vec<NodeId>)> {
    let ids: Vec<NodeId> = net
        .params
        .entries()
        .iter()
        .map(|(_, t)| g.leaf(t.clone(), trainable))
        .collect();
    let p = |name: &str| ids[net.params.position(name).expect("param exists")];

    let mut h = image;
    for name in ["conv1", "conv2", "conv3"] {
        let y = g.conv2d(h, p(&format!("{name}.w")), 1, Pad::Same)?;
        let y = g.add_chan(y, p(&format!("{name}.b")))?;
        let y = g.silu(y);
        h = g.max_pool2(y)?;
    }
    let y = g.conv2d(h, p("conv4.w"), 1, Pad::Same)?;
    let y = g.add_chan(y, p("conv4.b"))?;
    let h = g.silu(y);
    let feat = g.mean_spatial(h)?; // [64]
    let fr = g.reshape(feat, &[1, FEATURE_DIM])?;
    let logits = g.matmul(fr, p("head.w"))?;
    let hb = p("head.b");
    let hbr = g.reshape(hb, &[1, CLASS_COUNT])?;
    let logits = g.add(logits, hbr)?;
    Ok((feat, logits, ids))
}

impl FeatureNet {
    /// 64-dim feature embedding of an RGB image in [0,1].
    pub fn features(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let x = g.constant(center(image));
        let (feat, _, _) = forward_on_graph(&mut g, self, x, false)?;
        Ok(g.value(feat).clone())
    }

    pub fn classify(&self, image: &Tensor<f32>) -> Result<usize> {
        let mut g = Graph::new();
        let x = g.constant(center(image));
        let (_, logits, _) = forward_on_graph(&mut g, self, x, false)?;
        let data = g.value(logits).data().to_vec();
        Ok(argmax(&data))
    }
}

/// Map [0,1] pixels to [-1,1] so the un-normalized conv stack sees centered
/// inputs.
fn center(image: &Tensor<f32>) -> Tensor<f32> {
    image.map(|v| 2.0 * v - 1.0)
}

/// Circular shift by (dy, dx); cheap translation augmentation.
fn roll(image: &Tensor<f32>, (dy, dx): (i32, i32)) -> Tensor<f32> {
    if dy == 0 && dx == 0 {
        return image.clone();
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = Tensor::zeros(image.shape());
    for ch in 0..c {
        for y in 0..h {
            let sy = (y as i32 - dy).rem_euclid(h as i32) as usize;
            for x in 0..w {
                let sx = (x as i32 - dx).rem_euclid(w as i32) as usize;
                out.set3(ch, y, x, image.at3(ch, sy, sx));
            }
        }
    }
    out
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_grad(
    net: &FeatureNet,
    scene: &ShapeScene,
    shift: (i32, i32),
) -> Result<(f64, bool, Vec<Option<Tensor<f32>>>)> {
    let mut g = Graph::new();
    let x = g.constant(center(&roll(&scene.image, shift)));
    let (_, logits, ids) = forward_on_graph(&mut g, net, x, true)?;
    let label = scene.label();
    let logp = g.log_softmax(logits, 1)?;
    let onehot = g.constant(Tensor::from_fn(&[1, CLASS_COUNT], |i| {
        if i == label {
            1.0
        } else {
            0.0
        }
    }));
    let picked = g.mul(logp, onehot)?;
    let nll = g.sum_all(picked);
    let loss = g.scale(nll, -1.0);
    let loss_val = g.value(loss).item() as f64;
    let correct = argmax(g.value(logits).data()) == label;
    g.backward(loss)?;
    let grads = ids.iter().map(|&id| g.grad(id)).collect();
    Ok((loss_val, correct, grads))
}

/// Train the classifier; fails if held-out accuracy ends below 0.8.
pub fn train_feature_net(dataset: &[ShapeScene], seed: u64) -> Result<FeatureNet> {
    if dataset.len() < 10 {
        return Err(Error::Contract(
            "train_feature_net: need at least 10 scenes".into(),
        ));
    }
    let spec = FeatNetSpec {
        image_side: dataset[0].image.shape()[1],
        ..FeatNetSpec::default()
    };
    let mut net = FeatureNet {
        params: init_params(&spec, seed)?,
        spec,
        train_seed: seed,
        held_out_accuracy: 0.0,
    };

    // Deterministic shuffled 80/20 split. A strided split would alias the
    // dataset's round-robin class cycle and starve whole classes.
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut r = rng::rng_for(seed, 0x59717, 0);
    for k in 0..order.len() {
        let j = r.gen_range(k..order.len());
        order.swap(k, j);
    }
    let cut = dataset.len() / 5;
    let held_out: Vec<&ShapeScene> = order[..cut].iter().map(|&i| &dataset[i]).collect();
    let train_set: Vec<&ShapeScene> = order[cut..].iter().map(|&i| &dataset[i]).collect();

    let sizes: Vec<usize> = net.params.entries().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = Adam::new(8e-3, &sizes);
    let epochs = 40;
    let batch = 16;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut r = rng::rng_for(seed, 0x0e9, epoch as u64);
        for k in 0..order.len() {
            let j = r.gen_range(k..order.len());
            order.swap(k, j);
        }
        for chunk in order.chunks(batch) {
            let results: Vec<Result<_>> = chunk
                .par_iter()
                .map(|&i| {
                    let mut rr = rng::rng_for(seed, 0x5f1f7 ^ epoch as u64, i as u64);
                    let shift = (rr.gen_range(-3..=3), rr.gen_range(-3..=3));
                    sample_grad(&net, train_set[i], shift)
                })
                .collect();
            let mut grad_acc: Vec<Option<Vec<f32>>> = vec![None; sizes.len()];
            let mut loss_sum = 0.0;
            for res in results {
                let (loss, _, grads) = res?;
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
            if std::env::var("SDALAB_DEBUG_FEAT").is_ok() {
                eprintln!("  batch loss {:.4}", loss_sum / chunk.len() as f64);
            }
            if !loss_sum.is_finite() {
                return Err(Error::Diverged(format!(
                    "feature net loss non-finite in epoch {epoch}"
                )));
            }
            let inv = 1.0 / chunk.len() as f32;
            for (i, acc) in grad_acc.into_iter().enumerate() {
                if let Some(mut grad) = acc {
                    for v in &mut grad {
                        *v *= inv;
                    }
                    let (_, param) = &mut net.params.entries_mut()[i];
                    opt.step(i, param.data_mut(), &grad);
                }
            }
        }
        if std::env::var("SDALAB_DEBUG_FEAT").is_ok() {
            let acc = accuracy(&net, &held_out)?;
            let tacc = accuracy(&net, &train_set[..32.min(train_set.len())].to_vec())?;
            eprintln!("epoch {epoch}: held-out acc {acc:.3} train acc {tacc:.3}");
        }
        // Early exit once the held-out accuracy is comfortably high.
        if epoch >= 7 {
            let acc = accuracy(&net, &held_out)?;
            if acc >= 0.97 {
                net.held_out_accuracy = acc;
                return Ok(net);
            }
        }
    }
    let acc = accuracy(&net, &held_out)?;
    net.held_out_accuracy = acc;
    if acc < 0.8 {
        return Err(Error::TrainingFailed(format!(
            "feature net held-out accuracy {acc:.3} < 0.8"
        )));
    }
    Ok(net)
}

fn accuracy(net: &FeatureNet, scenes: &[&ShapeScene]) -> Result<f64> {
    let correct: Vec<bool> = scenes
        .par_iter()
        .map(|s| Ok(net.classify(&s.image)? == s.label()))
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / scenes.len() as f64)
}
