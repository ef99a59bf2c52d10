use crate::tensor::{Graph, Real, Tensor, Var};
use crate::volume::Volume;

use super::params::{Bound, Init, ParamId, ParamLayout, ParamStore};
use super::{patchify, positional_encoding_3d, MaskPlan, ModelConfig, ModelError};

const LN_EPS: f64 = 1e-6;
/// Voxel intensities are divided by this before entering the network.
pub const INTENSITY_SCALE: f64 = 255.0;

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(layout: &mut ParamLayout, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: layout.add(format!("{name}.w"), &[fan_in, fan_out], Init::Xavier { fan_in, fan_out }),
            b: layout.add(format!("{name}.b"), &[fan_out], Init::Zeros),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, ModelError> {
        let y = g.matmul(x, p.var(self.w))?;
        Ok(g.add(y, p.var(self.b))?)
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(layout: &mut ParamLayout, name: &str, dim: usize) -> Self {
        Self {
            gamma: layout.add(format!("{name}.gamma"), &[dim], Init::Ones),
            beta: layout.add(format!("{name}.beta"), &[dim], Init::Zeros),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, ModelError> {
        Ok(g.layer_norm(x, p.var(self.gamma), p.var(self.beta), T::from_f64c(LN_EPS))?)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
    dim: usize,
    heads: usize,
}

impl Block {
    fn new(layout: &mut ParamLayout, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            ln1: Norm::new(layout, &format!("{name}.ln1"), dim),
            qkv: Linear::new(layout, &format!("{name}.attn.qkv"), dim, 3 * dim),
            proj: Linear::new(layout, &format!("{name}.attn.proj"), dim, dim),
            ln2: Norm::new(layout, &format!("{name}.ln2"), dim),
            fc1: Linear::new(layout, &format!("{name}.mlp.fc1"), dim, mlp_ratio * dim),
            fc2: Linear::new(layout, &format!("{name}.mlp.fc2"), mlp_ratio * dim, dim),
            dim,
            heads,
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, ModelError> {
        let n = g.shape(x)[0];
        let (h, dh) = (self.heads, self.dim / self.heads);

        let y = self.ln1.forward(g, p, x)?;
        let qkv = self.qkv.forward(g, p, y)?;
        let qkv = g.reshape(qkv, &[n, 3, h, dh])?;
        let qkv = g.transpose(qkv, &[1, 2, 0, 3])?;
        let mut part = |i: usize| -> Result<Var, ModelError> {
            let s = g.slice(qkv, 0, i, i + 1)?;
            Ok(g.reshape(s, &[h, n, dh])?)
        };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let q = g.scale(q, T::from_f64c(1.0 / (dh as f64).sqrt()));
        let kt = g.transpose(k, &[0, 2, 1])?;
        let scores = g.matmul(q, kt)?;
        let attn = g.softmax(scores, 2)?;
        let o = g.matmul(attn, v)?;
        let o = g.transpose(o, &[1, 0, 2])?;
        let o = g.reshape(o, &[n, self.dim])?;
        let o = self.proj.forward(g, p, o)?;
        let x = g.add(x, o)?;

        let y = self.ln2.forward(g, p, x)?;
        let y = self.fc1.forward(g, p, y)?;
        let y = g.gelu(y);
        let y = self.fc2.forward(g, p, y)?;
        Ok(g.add(x, y)?)
    }
}

/// Encoder states for one masked view.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[1, enc_dim]`
    pub cls: Var,
    /// `[|visible|, enc_dim]`, row `i` belonging to patch `order[i]`.
    pub tokens: Var,
    /// `[1 + |visible|, enc_dim]`: CLS row followed by `tokens`.
    pub all: Var,
    pub order: Vec<usize>,
}

/// Parameter ids and fixed tables of the 3D masked autoencoder.
#[derive(Clone, Debug)]
pub struct MaskedVit3d {
    pub cfg: ModelConfig,
    pub layout: ParamLayout,
    patch_embed: Linear,
    cls_token: ParamId,
    enc_blocks: Vec<Block>,
    enc_norm: Norm,
    dec_embed: Linear,
    mask_token: ParamId,
    dec_blocks: Vec<Block>,
    dec_norm: Norm,
    pixel_head: Linear,
    pred_fc1: Linear,
    pred_fc2: Linear,
    enc_pos: Tensor<f64>,
    dec_pos: Tensor<f64>,
}

impl MaskedVit3d {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut l = ParamLayout::default();
        let (e, d, pv) = (cfg.enc_dim, cfg.dec_dim, cfg.patch_voxels());
        let patch_embed = Linear::new(&mut l, "patch_embed", pv, e);
        let cls_token = l.add("cls_token", &[1, e], Init::Normal(0.02));
        let enc_blocks = (0..cfg.enc_blocks)
            .map(|i| Block::new(&mut l, &format!("enc.{i}"), e, cfg.enc_heads, cfg.mlp_ratio))
            .collect();
        let enc_norm = Norm::new(&mut l, "enc.norm", e);
        let dec_embed = Linear::new(&mut l, "dec_embed", e, d);
        let mask_token = l.add("mask_token", &[1, d], Init::Normal(0.02));
        let dec_blocks = (0..cfg.dec_blocks)
            .map(|i| Block::new(&mut l, &format!("dec.{i}"), d, cfg.dec_heads, cfg.mlp_ratio))
            .collect();
        let dec_norm = Norm::new(&mut l, "dec.norm", d);
        let pixel_head = Linear::new(&mut l, "pixel_head", d, pv);
        let pred_fc1 = Linear::new(&mut l, "predictor.fc1", e, cfg.predictor_hidden);
        let pred_fc2 = Linear::new(&mut l, "predictor.fc2", cfg.predictor_hidden, e);
        let grid = [cfg.grid_side(); 3];
        Ok(Self {
            enc_pos: positional_encoding_3d(grid, e)?,
            dec_pos: positional_encoding_3d(grid, d)?,
            cfg,
            layout: l,
            patch_embed,
            cls_token,
            enc_blocks,
            enc_norm,
            dec_embed,
            mask_token,
            dec_blocks,
            dec_norm,
            pixel_head,
            pred_fc1,
            pred_fc2,
        })
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        self.layout.init(seed)
    }

    pub fn mask_token_id(&self) -> ParamId {
        self.mask_token
    }

    pub fn cls_token_id(&self) -> ParamId {
        self.cls_token
    }

    /// Ids of the predictor's second layer (weight, bias).
    pub fn predictor_out_ids(&self) -> (ParamId, ParamId) {
        (self.pred_fc2.w, self.pred_fc2.b)
    }

    /// Normalized `[k, patch_voxels]` tokens of a volume of the configured shape.
    pub fn model_input<T: Real>(&self, v: &Volume<T>) -> Result<Tensor<T>, ModelError> {
        if v.channels != self.cfg.channels || v.dims != [self.cfg.input_side; 3] {
            return Err(ModelError::Config(format!(
                "volume {}×{:?} does not match model input {}×{}³",
                v.channels, v.dims, self.cfg.channels, self.cfg.input_side
            )));
        }
        let mut t = patchify(v, self.cfg.patch_side)?;
        let s = T::from_f64c(1.0 / INTENSITY_SCALE);
        t.data_mut().iter_mut().for_each(|x| *x = *x * s);
        Ok(t)
    }

    /// Encodes the visible patches of `plan`.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        input: &Tensor<T>,
        plan: &MaskPlan,
    ) -> Result<EncoderOutput, ModelError> {
        plan.check(self.cfg.num_patches())?;
        self.encode_tokens(g, p, input, &plan.visible)
    }

    /// Encodes the patches listed in `order`, fed in that order.
    pub fn encode_tokens<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        input: &Tensor<T>,
        order: &[usize],
    ) -> Result<EncoderOutput, ModelError> {
        let k = self.cfg.num_patches();
        if input.shape() != [k, self.cfg.patch_voxels()] {
            return Err(ModelError::Config(format!("input tokens {:?} do not match the model", input.shape())));
        }
        if order.is_empty() || order.iter().any(|&i| i >= k) {
            return Err(ModelError::Plan(format!("visible indices must be non-empty and below {k}")));
        }
        let e = self.cfg.enc_dim;
        let x = g.constant(gather(input, order, 0));
        let x = self.patch_embed.forward(g, p, x)?;
        let pos = g.constant(gather(&self.enc_pos, order, 1).cast());
        let x = g.add(x, pos)?;
        let mut x = g.concat(&[p.var(self.cls_token), x], 0)?;
        for b in &self.enc_blocks {
            x = b.forward(g, p, x)?;
        }
        let all = self.enc_norm.forward(g, p, x)?;
        let cls = g.slice(all, 0, 0, 1)?;
        let tokens = g.slice(all, 0, 1, 1 + order.len())?;
        debug_assert_eq!(g.shape(cls), [1, e]);
        Ok(EncoderOutput {
            cls,
            tokens,
            all,
            order: order.to_vec(),
        })
    }

    /// Reconstructs all `k` patches as `[k, patch_voxels]` tokens in
    /// normalized units.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        enc: &EncoderOutput,
        plan: &MaskPlan,
    ) -> Result<Var, ModelError> {
        let k = self.cfg.num_patches();
        plan.check(k)?;
        let mut order = enc.order.clone();
        order.sort_unstable();
        if order != plan.visible {
            return Err(ModelError::Plan("encoder output does not belong to this plan".into()));
        }
        let y = self.dec_embed.forward(g, p, enc.all)?;
        let cls = g.slice(y, 0, 0, 1)?;
        let vis = g.slice(y, 0, 1, 1 + enc.order.len())?;
        let mut full = g.scatter_rows(vis, &enc.order, k)?;
        if !plan.hidden.is_empty() {
            let masks = g.gather_rows(p.var(self.mask_token), &vec![0; plan.hidden.len()])?;
            let masks = g.scatter_rows(masks, &plan.hidden, k)?;
            full = g.add(full, masks)?;
        }
        let x = g.concat(&[cls, full], 0)?;
        let pos = g.constant(self.dec_pos.cast());
        let mut x = g.add(x, pos)?;
        for b in &self.dec_blocks {
            x = b.forward(g, p, x)?;
        }
        let x = self.dec_norm.forward(g, p, x)?;
        let x = g.slice(x, 0, 1, 1 + k)?;
        self.pixel_head.forward(g, p, x)
    }

    /// Two-layer MLP with GELU: `enc_dim → predictor_hidden → enc_dim`.
    pub fn predictor_head<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Result<Var, ModelError> {
        let h = self.pred_fc1.forward(g, p, f)?;
        let h = g.gelu(h);
        self.pred_fc2.forward(g, p, h)
    }

    /// CLS feature of the unmasked volume.
    pub fn extract_features<T: Real>(&self, params: &ParamStore<T>, v: &Volume<T>) -> Result<Vec<T>, ModelError> {
        let input = self.model_input(v)?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let enc = self.encode(&mut g, &p, &input, &MaskPlan::all_visible(self.cfg.num_patches()))?;
        Ok(g.value(enc.cls).data().to_vec())
    }
}

/// Rows `idx[i] + offset` of a matrix.
fn gather<T: Real>(t: &Tensor<T>, idx: &[usize], offset: usize) -> Tensor<T> {
    let cols = t.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        let r = i + offset;
        out.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::new(vec![idx.len(), cols], out).expect("sized above")
}

/// Multiply-accumulate count of the attention sublayers (QKV and output
/// projections plus the two `n × n` products) for `tokens` inputs.
pub fn attention_macs(tokens: usize, dim: usize, blocks: usize) -> u64 {
    let (n, d) = (tokens as u64, dim as u64);
    blocks as u64 * (4 * n * d * d + 2 * n * n * d)
}

/// Encoder attention cost for a plan with `visible` patches plus CLS.
pub fn encoder_attention_macs(cfg: &ModelConfig, visible: usize) -> u64 {
    attention_macs(visible + 1, cfg.enc_dim, cfg.enc_blocks)
}
