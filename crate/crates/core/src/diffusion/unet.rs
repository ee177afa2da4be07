//! Mask-conditioned pixel-space U-Net with self- and cross-attention.
//!
//! Input is the 7-channel stack (noisy image, edit mask, masked source); the
//! network predicts the noise. Self/cross attention sit at the lowest
//! resolution in three places (encoder bottom, middle, decoder bottom), so
//! every forward exposes L = 3 query tensors of each kind.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::schedule::{NoiseSchedule, ScheduleSpec};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, NodeId, Pad, Tensor};

/// Number of attention sites (self and cross each); fixed by the topology.
pub const ATTN_LAYERS: usize = 3;

/// Architecture descriptor; serialized into checkpoint headers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub image_side: usize,
    pub base_ch: usize,
    pub ch_mult: Vec<usize>,
    pub norm_groups: usize,
    pub heads: usize,
    /// Learned prompt table size; index 0 is the null prompt.
    pub prompt_count: usize,
    pub prompt_seq: usize,
    pub prompt_dim: usize,
}

impl Default for UNetSpec {
    fn default() -> Self {
        UNetSpec {
            image_side: 32,
            base_ch: 32,
            ch_mult: vec![1, 2, 4],
            norm_groups: 8,
            heads: 1,
            prompt_count: 5,
            prompt_seq: 4,
            prompt_dim: 16,
        }
    }
}

impl UNetSpec {
    pub fn levels(&self) -> usize {
        self.ch_mult.len()
    }

    /// Side length at the attention resolution.
    pub fn attn_side(&self) -> usize {
        self.image_side >> (self.levels() - 1)
    }

    /// Channel count (= head dim, single head) at the attention resolution.
    pub fn attn_ch(&self) -> usize {
        self.base_ch * self.ch_mult.last().copied().unwrap_or(1)
    }

    pub fn attn_layers(&self) -> usize {
        ATTN_LAYERS
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_ch
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels() < 2 {
            return Err(Error::Contract("unet: need at least 2 levels".into()));
        }
        if self.heads != 1 {
            return Err(Error::Contract("unet: single-head attention only".into()));
        }
        let down_factor = 1usize << (self.levels() - 1);
        if self.image_side % down_factor != 0 || self.attn_side() < 2 {
            return Err(Error::Contract(format!(
                "unet: image side {} incompatible with {} levels",
                self.image_side,
                self.levels()
            )));
        }
        if self.norm_groups == 0 || self.base_ch % self.norm_groups != 0 {
            return Err(Error::Contract(format!(
                "unet: norm groups {} must divide base channels {}",
                self.norm_groups, self.base_ch
            )));
        }
        if self.base_ch % 2 != 0 {
            return Err(Error::Contract("unet: base channels must be even".into()));
        }
        if self.prompt_count < 1 || self.prompt_seq < 1 || self.prompt_dim < 1 {
            return Err(Error::Contract("unet: empty prompt table".into()));
        }
        Ok(())
    }
}

/// Ordered, named parameter store. Entry order is construction order and
/// defines the checkpoint payload layout.
#[derive(Clone, Debug, Default)]
pub struct Params {
    entries: Vec<(String, Tensor<f32>)>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, t: Tensor<f32>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor<f32> {
        let i = self.index[name];
        &self.entries[i].1
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Vec<(String, Tensor<f32>)> {
        &mut self.entries
    }

    /// Total scalar count across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast64(&self) -> Vec<(String, Tensor<f64>)> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), t.cast()))
            .collect()
    }
}

/// Complete parameter set plus the descriptors needed to rebuild the model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub spec: UNetSpec,
    pub schedule: NoiseSchedule,
    pub params: Params,
    pub train_seed: u64,
}

impl Checkpoint {
    /// Freshly initialized (untrained) model.
    pub fn init(spec: UNetSpec, schedule_spec: ScheduleSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let schedule = NoiseSchedule::from_spec(schedule_spec)?;
        let params = init_params(&spec, seed)?;
        Ok(Checkpoint {
            spec,
            schedule,
            params,
            train_seed: seed,
        })
    }
}

// ── parameter initialization ───────────────────────────────────────────

fn normal(r: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| {
        let v: f32 = r.sample(StandardNormal);
        v * std as f32
    })
}

struct ParamBuilder<'a> {
    params: Params,
    rng: &'a mut ChaCha8Rng,
}

impl ParamBuilder<'_> {
    fn conv(&mut self, name: &str, co: usize, ci: usize, k: usize) -> Result<()> {
        let fan_in = (ci * k * k) as f64;
        let w = normal(self.rng, &[co, ci, k, k], (2.0 / fan_in).sqrt());
        self.params.push(&format!("{name}.w"), w)?;
        self.params.push(&format!("{name}.b"), Tensor::zeros(&[co]))
    }

    /// Damped init for output-side convolutions: small enough to keep the
    /// initial prediction near zero, nonzero so gradients reach every layer
    /// from the first step.
    fn conv_small(&mut self, name: &str, co: usize, ci: usize, k: usize) -> Result<()> {
        let fan_in = (ci * k * k) as f64;
        let w = normal(self.rng, &[co, ci, k, k], 0.1 * (2.0 / fan_in).sqrt());
        self.params.push(&format!("{name}.w"), w)?;
        self.params.push(&format!("{name}.b"), Tensor::zeros(&[co]))
    }

    fn linear(&mut self, name: &str, n_in: usize, n_out: usize) -> Result<()> {
        let w = normal(self.rng, &[n_in, n_out], (1.0 / n_in as f64).sqrt());
        self.params.push(&format!("{name}.w"), w)?;
        self.params.push(&format!("{name}.b"), Tensor::zeros(&[n_out]))
    }

    fn proj(&mut self, name: &str, n_in: usize, n_out: usize) -> Result<()> {
        let w = normal(self.rng, &[n_in, n_out], (1.0 / n_in as f64).sqrt());
        self.params.push(&format!("{name}.w"), w)
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.params.push(&format!("{name}.g"), Tensor::full(&[c], 1.0))?;
        self.params.push(&format!("{name}.b"), Tensor::zeros(&[c]))
    }

    fn res_block(&mut self, prefix: &str, cin: usize, cout: usize, temb: usize) -> Result<()> {
        self.norm(&format!("{prefix}.gn1"), cin)?;
        self.conv(&format!("{prefix}.conv1"), cout, cin, 3)?;
        self.linear(&format!("{prefix}.temb"), temb, cout)?;
        self.norm(&format!("{prefix}.gn2"), cout)?;
        self.conv(&format!("{prefix}.conv2"), cout, cout, 3)?;
        if cin != cout {
            self.conv(&format!("{prefix}.skip"), cout, cin, 1)?;
        }
        Ok(())
    }

    fn attn_pair(&mut self, prefix: &str, c: usize, cross_dim: usize) -> Result<()> {
        for (kind, kv_dim) in [("self", c), ("cross", cross_dim)] {
            let p = format!("{prefix}.{kind}");
            self.norm(&format!("{p}.gn"), c)?;
            self.proj(&format!("{p}.q"), c, c)?;
            self.proj(&format!("{p}.k"), kv_dim, c)?;
            self.proj(&format!("{p}.v"), kv_dim, c)?;
            let ow = normal(self.rng, &[c, c], 0.1 / (c as f64).sqrt());
            self.params.push(&format!("{p}.o.w"), ow)?;
            self.params.push(&format!("{p}.o.b"), Tensor::zeros(&[c]))?;
        }
        Ok(())
    }
}

fn init_params(spec: &UNetSpec, seed: u64) -> Result<Params> {
    let mut r = rng::rng_for(seed, 0x1417, 0);
    let mut b = ParamBuilder {
        params: Params::new(),
        rng: &mut r,
    };
    let c0 = spec.base_ch;
    let temb = spec.time_dim();
    let levels = spec.levels();
    let ch: Vec<usize> = spec.ch_mult.iter().map(|m| m * c0).collect();
    let att_c = spec.attn_ch();

    b.linear("time.lin1", c0, temb)?;
    b.linear("time.lin2", temb, temb)?;
    b.conv("in_conv", c0, 7, 3)?;

    let mut cur = c0;
    for (lvl, &cout) in ch.iter().enumerate() {
        b.res_block(&format!("down{lvl}.res"), cur, cout, temb)?;
        cur = cout;
    }
    b.attn_pair("attn0", att_c, spec.prompt_dim)?;
    b.res_block("mid.res1", cur, cur, temb)?;
    b.attn_pair("attn1", att_c, spec.prompt_dim)?;
    b.res_block("mid.res2", cur, cur, temb)?;

    for lvl in (0..levels).rev() {
        let cout = ch[lvl];
        b.res_block(&format!("up{lvl}.res"), cur + ch[lvl], cout, temb)?;
        if lvl == levels - 1 {
            b.attn_pair("attn2", att_c, spec.prompt_dim)?;
        }
        cur = cout;
    }

    b.norm("out.gn", cur)?;
    b.conv_small("out_conv", 3, cur, 3)?;

    for p in 0..spec.prompt_count {
        let emb = normal(b.rng, &[spec.prompt_seq, spec.prompt_dim], 1.0);
        b.params.push(&format!("prompt{p}.emb"), emb)?;
    }
    Ok(b.params)
}

// ── forward pass ───────────────────────────────────────────────────────

/// Node ids of the conditioning inputs, already registered on the graph.
#[derive(Clone, Copy)]
pub struct ForwardInputs {
    pub x_t: NodeId,
    pub mask: NodeId,
    pub masked_src: NodeId,
}

/// Result of one forward: noise prediction plus the attention internals
/// (query and softmax-weight node ids per layer, self and cross).
pub struct UNetForward {
    pub eps_hat: NodeId,
    pub self_q: Vec<NodeId>,
    pub self_w: Vec<NodeId>,
    pub cross_q: Vec<NodeId>,
    pub cross_w: Vec<NodeId>,
    /// Graph leaf per parameter, aligned with `Params::entries`.
    pub param_ids: Vec<NodeId>,
}

struct Net<'a> {
    g: &'a mut Graph<f32>,
    ids: Vec<NodeId>,
    params: &'a Params,
    groups: usize,
    prompt: NodeId,
    attn_site: usize,
    self_q: Vec<NodeId>,
    self_w: Vec<NodeId>,
    cross_q: Vec<NodeId>,
    cross_w: Vec<NodeId>,
}

impl Net<'_> {
    fn p(&self, name: &str) -> NodeId {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.ids[i]
    }

    fn linear(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let n = self.g.shape(x)[0];
        let m = self.g.shape(w)[1];
        let xr = self.g.reshape(x, &[1, n])?;
        let y = self.g.matmul(xr, w)?;
        let br = self.g.reshape(b, &[1, m])?;
        let y = self.g.add(y, br)?;
        self.g.reshape(y, &[m])
    }

    fn conv(&mut self, prefix: &str, x: NodeId, pad: Pad) -> Result<NodeId> {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let y = self.g.conv2d(x, w, 1, pad)?;
        self.g.add_chan(y, b)
    }

    fn norm(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let gn = self.p(&format!("{prefix}.g"));
        let bn = self.p(&format!("{prefix}.b"));
        self.g.group_norm(x, gn, bn, self.groups)
    }

    fn res_block(&mut self, prefix: &str, x: NodeId, temb: NodeId) -> Result<NodeId> {
        let cin = self.g.shape(x)[0];
        let h = self.norm(&format!("{prefix}.gn1"), x)?;
        let h = self.g.silu(h);
        let h = self.conv(&format!("{prefix}.conv1"), h, Pad::Same)?;
        let te = self.g.silu(temb);
        let te = self.linear(&format!("{prefix}.temb"), te)?;
        let h = self.g.add_chan(h, te)?;
        let h = self.norm(&format!("{prefix}.gn2"), h)?;
        let h = self.g.silu(h);
        let h = self.conv(&format!("{prefix}.conv2"), h, Pad::Same)?;
        let cout = self.g.shape(h)[0];
        let skip = if cin != cout {
            self.conv(&format!("{prefix}.skip"), x, Pad::Explicit(0))?
        } else {
            x
        };
        self.g.add(h, skip)
    }

    /// Attention block; returns (output, query, weights).
    fn attn(
        &mut self,
        prefix: &str,
        x: NodeId,
        kv: Option<NodeId>,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let shape = self.g.shape(x).to_vec();
        let (c, side) = (shape[0], shape[1]);
        let n = side * side;
        let h = self.norm(&format!("{prefix}.gn"), x)?;
        let flat = self.g.reshape(h, &[c, n])?;
        let tokens = self.g.transpose2(flat)?; // [n, c]
        let q = {
            let w = self.p(&format!("{prefix}.q.w"));
            self.g.matmul(tokens, w)?
        };
        let src = kv.unwrap_or(tokens);
        let k = {
            let w = self.p(&format!("{prefix}.k.w"));
            self.g.matmul(src, w)?
        };
        let v = {
            let w = self.p(&format!("{prefix}.v.w"));
            self.g.matmul(src, w)?
        };
        let kt = self.g.transpose2(k)?;
        let scores = self.g.matmul(q, kt)?;
        let scores = self.g.scale(scores, 1.0 / (c as f64).sqrt());
        let weights = self.g.softmax(scores, 1)?;
        let mixed = self.g.matmul(weights, v)?; // [n, c]
        let out = {
            let w = self.p(&format!("{prefix}.o.w"));
            self.g.matmul(mixed, w)?
        };
        let out = self.g.transpose2(out)?;
        let out = self.g.reshape(out, &[c, side, side])?;
        let ob = self.p(&format!("{prefix}.o.b"));
        let out = self.g.add_chan(out, ob)?;
        let out = self.g.add(out, x)?;
        Ok((out, q, weights))
    }

    /// Self- then cross-attention at the current attention site.
    fn attn_site(&mut self, h: NodeId) -> Result<NodeId> {
        let prefix = format!("attn{}", self.attn_site);
        let (h, q, w) = self.attn(&format!("{prefix}.self"), h, None)?;
        self.self_q.push(q);
        self.self_w.push(w);
        let prompt = self.prompt;
        let (h, q, w) = self.attn(&format!("{prefix}.cross"), h, Some(prompt))?;
        self.cross_q.push(q);
        self.cross_w.push(w);
        self.attn_site += 1;
        Ok(h)
    }
}

/// Sinusoidal embedding of an integer timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor<f32> {
    let half = dim / 2;
    let mut data = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let ang = t as f64 * freq;
        data[i] = ang.sin() as f32;
        data[half + i] = ang.cos() as f32;
    }
    Tensor::new(vec![dim], data).expect("shape/data agree")
}

/// Build the U-Net forward pass on an existing graph so callers control which
/// leaves carry gradients. `trainable` registers parameters with
/// requires_grad (training); conditioning inputs keep whatever flag they were
/// registered with by the caller.
pub fn forward_on_graph(
    g: &mut Graph<f32>,
    ckpt: &Checkpoint,
    inputs: ForwardInputs,
    t: usize,
    prompt_id: usize,
    trainable: bool,
) -> Result<UNetForward> {
    let spec = &ckpt.spec;
    let side = spec.image_side;
    if g.shape(inputs.x_t) != [3, side, side]
        || g.shape(inputs.mask) != [1, side, side]
        || g.shape(inputs.masked_src) != [3, side, side]
    {
        return Err(Error::Shape(format!(
            "unet: conditioning shapes {:?}/{:?}/{:?} vs side {side}",
            g.shape(inputs.x_t),
            g.shape(inputs.mask),
            g.shape(inputs.masked_src)
        )));
    }
    if prompt_id >= spec.prompt_count {
        return Err(Error::Contract(format!(
            "prompt id {prompt_id} out of range (P = {})",
            spec.prompt_count
        )));
    }
    if t == 0 || t > ckpt.schedule.t_train() {
        return Err(Error::Contract(format!(
            "timestep {t} outside [1, {}]",
            ckpt.schedule.t_train()
        )));
    }

    let ids: Vec<NodeId> = ckpt
        .params
        .entries()
        .iter()
        .map(|(_, tensor)| g.leaf(tensor.clone(), trainable))
        .collect();
    let param_ids = ids.clone();
    let prompt_idx = ckpt
        .params
        .position(&format!("prompt{prompt_id}.emb"))
        .expect("prompt table entry exists");
    let mut net = Net {
        g,
        ids,
        params: &ckpt.params,
        groups: spec.norm_groups,
        prompt: param_ids[prompt_idx],
        attn_site: 0,
        self_q: Vec::new(),
        self_w: Vec::new(),
        cross_q: Vec::new(),
        cross_w: Vec::new(),
    };

    let temb0 = net.g.constant(timestep_embedding(t, spec.base_ch));
    let temb = net.linear("time.lin1", temb0)?;
    let temb = net.g.silu(temb);
    let temb = net.linear("time.lin2", temb)?;

    let xin = net.g.concat0(&[inputs.x_t, inputs.mask, inputs.masked_src])?;
    let mut h = net.conv("in_conv", xin, Pad::Same)?;

    let levels = spec.levels();
    let mut skips = Vec::with_capacity(levels);
    for lvl in 0..levels {
        h = net.res_block(&format!("down{lvl}.res"), h, temb)?;
        if lvl == levels - 1 {
            h = net.attn_site(h)?;
        }
        skips.push(h);
        if lvl < levels - 1 {
            h = net.g.avg_pool2(h)?;
        }
    }

    h = net.res_block("mid.res1", h, temb)?;
    h = net.attn_site(h)?;
    h = net.res_block("mid.res2", h, temb)?;

    for lvl in (0..levels).rev() {
        h = net.g.concat0(&[h, skips[lvl]])?;
        h = net.res_block(&format!("up{lvl}.res"), h, temb)?;
        if lvl == levels - 1 {
            h = net.attn_site(h)?;
        }
        if lvl > 0 {
            h = net.g.upsample2(h)?;
        }
    }

    h = net.norm("out.gn", h)?;
    h = net.g.silu(h);
    let eps_hat = net.conv("out_conv", h, Pad::Same)?;

    Ok(UNetForward {
        eps_hat,
        self_q: net.self_q,
        self_w: net.self_w,
        cross_q: net.cross_q,
        cross_w: net.cross_w,
        param_ids,
    })
}

// ── plain-tensor convenience entry point ───────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttnKind {
    SelfAttn,
    CrossAttn,
}

/// Attention internals captured at one forward.
#[derive(Clone, Debug)]
pub struct StepAttn {
    pub kind: AttnKind,
    pub layer: usize,
    pub weights: Tensor<f32>,
    pub query: Tensor<f32>,
}

/// Run the model on plain tensors; optionally capture attention internals.
pub fn unet_forward(
    ckpt: &Checkpoint,
    x_t: &Tensor<f32>,
    mask: &Tensor<f32>,
    masked_src: &Tensor<f32>,
    t: usize,
    prompt_id: usize,
    want_attn: bool,
) -> Result<(Tensor<f32>, Vec<StepAttn>)> {
    let mut g = Graph::new();
    let inputs = ForwardInputs {
        x_t: g.constant(x_t.clone()),
        mask: g.constant(mask.clone()),
        masked_src: g.constant(masked_src.clone()),
    };
    let fwd = forward_on_graph(&mut g, ckpt, inputs, t, prompt_id, false)?;
    let eps = g.value(fwd.eps_hat).clone();
    let mut attn = Vec::new();
    if want_attn {
        for (layer, (&q, &w)) in fwd.self_q.iter().zip(&fwd.self_w).enumerate() {
            attn.push(StepAttn {
                kind: AttnKind::SelfAttn,
                layer,
                weights: g.value(w).clone(),
                query: g.value(q).clone(),
            });
        }
        for (layer, (&q, &w)) in fwd.cross_q.iter().zip(&fwd.cross_w).enumerate() {
            attn.push(StepAttn {
                kind: AttnKind::CrossAttn,
                layer,
                weights: g.value(w).clone(),
                query: g.value(q).clone(),
            });
        }
    }
    Ok((eps, attn))
}

/// Masked source conditioning: source with the editable region zeroed.
pub fn masked_source(image: &Tensor<f32>, mask: &Tensor<f32>) -> Tensor<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                if mask.at3(0, y, x) != 0.0 {
                    out.set3(c, y, x, 0.0);
                }
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::diffusion::schedule::ScheduleSpec;

    pub(crate) fn tiny_spec() -> UNetSpec {
        UNetSpec {
            image_side: 8,
            base_ch: 4,
            ch_mult: vec![1, 2],
            norm_groups: 2,
            heads: 1,
            prompt_count: 5,
            prompt_seq: 4,
            prompt_dim: 6,
        }
    }

    fn tiny_ckpt(seed: u64) -> Checkpoint {
        Checkpoint::init(tiny_spec(), ScheduleSpec::default(), seed).unwrap()
    }

    fn tiny_inputs(seed: u64, side: usize) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
        let mut r = rng::rng_for(seed, 1, 1);
        let x_t = rng::normal_tensor(&mut r, &[3, side, side]);
        let mask = Tensor::from_fn(&[1, side, side], |i| if i % 3 == 0 { 0.0 } else { 1.0 });
        let src = rng::uniform_tensor(&mut r, &[3, side, side], 0.0, 1.0);
        let ms = masked_source(&src, &mask);
        (x_t, mask, ms)
    }

    #[test]
    fn forward_shape_and_trace_contract() {
        let ckpt = tiny_ckpt(3);
        let (x_t, mask, ms) = tiny_inputs(9, 8);
        let (eps, attn) = unet_forward(&ckpt, &x_t, &mask, &ms, 10, 1, true).unwrap();
        assert_eq!(eps.shape(), &[3, 8, 8]);
        assert!(eps.all_finite());
        // L self + L cross entries per forward.
        assert_eq!(attn.len(), 2 * ATTN_LAYERS);
        let n = ckpt.spec.attn_side() * ckpt.spec.attn_side();
        for e in &attn {
            match e.kind {
                AttnKind::SelfAttn => assert_eq!(e.weights.shape(), &[n, n]),
                AttnKind::CrossAttn => assert_eq!(e.weights.shape(), &[n, ckpt.spec.prompt_seq]),
            }
            assert_eq!(e.query.shape(), &[n, ckpt.spec.attn_ch()]);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let ckpt = tiny_ckpt(4);
        let (x_t, mask, ms) = tiny_inputs(10, 8);
        let (a, _) = unet_forward(&ckpt, &x_t, &mask, &ms, 7, 2, false).unwrap();
        let (b, _) = unet_forward(&ckpt, &x_t, &mask, &ms, 7, 2, false).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn forward_rejects_bad_resolution_and_prompt() {
        let ckpt = tiny_ckpt(5);
        let (x_t, mask, ms) = tiny_inputs(11, 8);
        let bad = Tensor::zeros(&[3, 16, 16]);
        assert!(unet_forward(&ckpt, &bad, &mask, &ms, 7, 0, false).is_err());
        assert!(unet_forward(&ckpt, &x_t, &mask, &ms, 7, 99, false).is_err());
        assert!(unet_forward(&ckpt, &x_t, &mask, &ms, 0, 0, false).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let ckpt = tiny_ckpt(6);
        let (x_t, mask, ms) = tiny_inputs(12, 8);
        let (_, attn) = unet_forward(&ckpt, &x_t, &mask, &ms, 3, 1, true).unwrap();
        for e in &attn {
            let m = e.weights.shape()[1];
            for row in e.weights.data().chunks(m) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn default_spec_attention_sits_at_8x8() {
        let spec = UNetSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.attn_side(), 8);
        assert_eq!(spec.attn_ch(), 128);
        assert_eq!(spec.attn_layers(), 3);
    }

    #[test]
    fn attention_block_zero_query_and_single_key() {
        // With Q = 0 each softmax row is uniform, so every output row is the
        // column mean of V; with a single key the output equals that V row.
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(&[3, 2]));
        let k = g.constant(Tensor::from_fn(&[4, 2], |i| i as f64 * 0.3 - 0.5));
        let v = g.constant(Tensor::from_fn(&[4, 2], |i| (i as f64).sin()));
        let kt = g.transpose2(k).unwrap();
        let scores = g.matmul(q, kt).unwrap();
        let scores = g.scale(scores, 1.0 / (2f64).sqrt());
        let w = g.softmax(scores, 1).unwrap();
        let out = g.matmul(w, v).unwrap();
        let vv = g.value(v).clone();
        for row in 0..3 {
            for col in 0..2 {
                let mean: f64 = (0..4).map(|i| vv.data()[i * 2 + col]).sum::<f64>() / 4.0;
                assert!((g.value(out).data()[row * 2 + col] - mean).abs() < 1e-12);
            }
        }

        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64));
        let k1 = g.constant(Tensor::from_fn(&[1, 2], |i| i as f64 + 1.0));
        let v1 = g.constant(Tensor::new(vec![1, 2], vec![0.25, -0.75]).unwrap());
        let kt = g.transpose2(k1).unwrap();
        let scores = g.matmul(q, kt).unwrap();
        let w = g.softmax(scores, 1).unwrap();
        let out = g.matmul(w, v1).unwrap();
        for row in 0..3 {
            assert!((g.value(out).data()[row * 2] - 0.25).abs() < 1e-12);
            assert!((g.value(out).data()[row * 2 + 1] + 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_block_matches_direct_formula() {
        // Random 3x4 case against a direct evaluation of
        // softmax(Q K^T / sqrt(d)) V with plain loops.
        let mut r = rng::rng_for(77, 0, 0);
        let d = 4;
        let q: Tensor<f64> = rng::normal_tensor(&mut r, &[3, d]).cast();
        let k: Tensor<f64> = rng::normal_tensor(&mut r, &[5, d]).cast();
        let v: Tensor<f64> = rng::normal_tensor(&mut r, &[5, 2]).cast();

        let mut want = vec![0.0f64; 3 * 2];
        for i in 0..3 {
            let mut logits = [0.0f64; 5];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for t in 0..d {
                    dot += q.data()[i * d + t] * k.data()[j * d + t];
                }
                *l = dot / (d as f64).sqrt();
            }
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for col in 0..2 {
                want[i * 2 + col] = (0..5)
                    .map(|j| exps[j] / z * v.data()[j * 2 + col])
                    .sum();
            }
        }

        let mut g = Graph::<f64>::new();
        let (qi, ki, vi) = (g.constant(q), g.constant(k), g.constant(v));
        let kt = g.transpose2(ki).unwrap();
        let scores = g.matmul(qi, kt).unwrap();
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let w = g.softmax(scores, 1).unwrap();
        let out = g.matmul(w, vi).unwrap();
        for (a, b) in g.value(out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
