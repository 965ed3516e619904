//! A configurable toy Vision Transformer with pluggable normalization slots.
//!
//! Every encoder block carries two normalization slots (pre-attention and
//! pre-MLP) and one final slot sits before the classifier head — `2L + 1`
//! slots total. Each slot is either a frozen standard LayerNorm affine pair
//! or a [`MoeLayerNorm`]. The forward pass processes samples one at a time on
//! a shared tape; MoE slots accumulate per-sample routing records so the
//! auxiliary losses can be collected after the batch.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::moe_ln::{self, LayerRouting, MoeLayerNorm, MoeLeafVars, PinnedSample};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    /// Image side length S in pixels.
    pub image_side: usize,
    /// Input channels C.
    pub channels: usize,
    /// Patch side length P; must divide S.
    pub patch_side: usize,
    /// Embedding dimension D; must be divisible by `heads`.
    pub embed_dim: usize,
    /// Encoder depth L.
    pub depth: usize,
    /// Attention heads H.
    pub heads: usize,
    /// MLP hidden width multiplier r (hidden = r * D).
    pub mlp_ratio: usize,
    /// Output classes K.
    pub classes: usize,
    /// Epsilon inside the normalization denominator.
    pub layer_norm_eps: f64,
    /// Classifier head: one affine map, or affine-GELU-affine.
    pub two_layer_head: bool,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = self.image_side >= 1
            && self.channels >= 1
            && self.patch_side >= 1
            && self.embed_dim >= 1
            && self.depth >= 1
            && self.heads >= 1
            && self.mlp_ratio >= 1
            && self.classes >= 1;
        if !all_positive {
            return Err(Error::Config("all ViT dimensions must be >= 1".into()));
        }
        if self.image_side % self.patch_side != 0 {
            return Err(Error::Config(format!(
                "patch side {} must divide image side {}",
                self.patch_side, self.image_side
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide embed dim {}",
                self.heads, self.embed_dim
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Patch token count N = (S/P)^2.
    pub fn tokens(&self) -> usize {
        let g = self.image_side / self.patch_side;
        g * g
    }

    /// Sequence length N + 1 (class token included).
    pub fn seq_len(&self) -> usize {
        self.tokens() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }

    /// Normalization slots: two per block plus one final.
    pub fn norm_slots(&self) -> usize {
        2 * self.depth + 1
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormAffine {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub enum NormSlot {
    Plain(LayerNormAffine),
    Moe(MoeLayerNorm),
}

impl NormSlot {
    pub fn is_moe(&self) -> bool {
        matches!(self, NormSlot::Moe(_))
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct ViTParams {
    /// Patch projection, `[D, P^2 C]`.
    pub patch_proj: Tensor,
    /// Position encoding, `[N+1, D]`.
    pub pos_embed: Tensor,
    /// Class embedding, `[D]`.
    pub cls_token: Tensor,
    pub blocks: Vec<BlockParams>,
    /// Optional hidden affine of a two-layer head, `([D, D], [D])`.
    pub head_hidden: Option<(Tensor, Tensor)>,
    /// Classifier affine, `[K, D]` and `[K]`.
    pub head_w: Tensor,
    pub head_b: Tensor,
    /// `2L + 1` normalization slots.
    pub norm_slots: Vec<NormSlot>,
}

/// Per-slot replace/keep flags over the `2L + 1` normalization slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplacementPlan {
    pub replace: Vec<bool>,
}

impl ReplacementPlan {
    /// Default strategy: every slot except the first becomes MoE.
    pub fn all_but_first(slots: usize) -> Self {
        let mut replace = vec![true; slots];
        if let Some(first) = replace.first_mut() {
            *first = false;
        }
        ReplacementPlan { replace }
    }

    pub fn all(slots: usize) -> Self {
        ReplacementPlan {
            replace: vec![true; slots],
        }
    }

    pub fn none(slots: usize) -> Self {
        ReplacementPlan {
            replace: vec![false; slots],
        }
    }

    pub fn from_indices(slots: usize, indices: &[usize]) -> Result<Self> {
        let mut replace = vec![false; slots];
        for &i in indices {
            if i >= slots {
                return Err(Error::Config(format!(
                    "replacement slot {i} out of range (model has {slots} slots)"
                )));
            }
            replace[i] = true;
        }
        Ok(ReplacementPlan { replace })
    }

    /// M: the number of MoE-LayerNorm instances the plan produces.
    pub fn replaced_count(&self) -> usize {
        self.replace.iter().filter(|r| **r).count()
    }
}

/// Which parameters receive gradients in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Inference only.
    Frozen,
    /// Everything (pretraining).
    All,
    /// Affine pairs of plain normalization slots (Tent).
    NormAffine,
    /// Routers and expert deltas of MoE slots.
    MoeAdapters,
}

pub fn path_is_trainable(path: &str, scope: TrainScope) -> bool {
    match scope {
        TrainScope::Frozen => false,
        TrainScope::All => true,
        TrainScope::NormAffine => path.starts_with("vit/norm") && !path.contains("/moe/"),
        TrainScope::MoeAdapters => {
            path.contains("/moe/")
                && (path.ends_with("expert_weight")
                    || path.ends_with("expert_bias")
                    || path.ends_with("router_weight")
                    || path.ends_with("router_bias"))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ViTConfig,
    pub params: ViTParams,
}

/// Fresh model with plain LayerNorm slots: Glorot-uniform projections, zero
/// biases, N(0, 0.02) class/position embeddings, unit LayerNorm affine.
pub fn init_model(config: &ViTConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let d = config.embed_dim;
    let mut r = rng::rng(seed, &[]);
    let small = Normal::new(0.0f64, 0.02).expect("valid sigma");
    let xavier = |out: usize, inp: usize, r: &mut rand_chacha::ChaCha8Rng| {
        let bound = math::sqrt(6.0 / (out + inp) as f64);
        Tensor::new(
            vec![out, inp],
            (0..out * inp)
                .map(|_| r.gen_range(-bound..=bound))
                .collect(),
        )
        .expect("sized")
    };

    let patch_proj = xavier(d, config.patch_dim(), &mut r);
    let pos_embed = Tensor::new(
        vec![config.seq_len(), d],
        (0..config.seq_len() * d)
            .map(|_| small.sample(&mut r))
            .collect(),
    )
    .expect("sized");
    let cls_token =
        Tensor::new(vec![d], (0..d).map(|_| small.sample(&mut r)).collect()).expect("sized");

    let hidden = config.mlp_ratio * d;
    let blocks = (0..config.depth)
        .map(|_| BlockParams {
            wq: xavier(d, d, &mut r),
            bq: Tensor::zeros(&[d]),
            wk: xavier(d, d, &mut r),
            bk: Tensor::zeros(&[d]),
            wv: xavier(d, d, &mut r),
            bv: Tensor::zeros(&[d]),
            wo: xavier(d, d, &mut r),
            bo: Tensor::zeros(&[d]),
            w1: xavier(hidden, d, &mut r),
            b1: Tensor::zeros(&[hidden]),
            w2: xavier(d, hidden, &mut r),
            b2: Tensor::zeros(&[d]),
        })
        .collect();

    let head_hidden = config
        .two_layer_head
        .then(|| (xavier(d, d, &mut r), Tensor::zeros(&[d])));
    let head_w = xavier(config.classes, d, &mut r);
    let head_b = Tensor::zeros(&[config.classes]);

    let norm_slots = (0..config.norm_slots())
        .map(|_| {
            NormSlot::Plain(LayerNormAffine {
                weight: Tensor::full(&[d], 1.0),
                bias: Tensor::zeros(&[d]),
            })
        })
        .collect();

    Ok(Model {
        config: config.clone(),
        params: ViTParams {
            patch_proj,
            pos_embed,
            cls_token,
            blocks,
            head_hidden,
            head_w,
            head_b,
            norm_slots,
        },
    })
}

/// Replace plan-selected slots of a frozen model with MoE-LayerNorms: the
/// slot's affine pair becomes the frozen shared expert, expert deltas start
/// at zero, routers are seeded per slot.
pub fn moefy(
    model: &Model,
    plan: &ReplacementPlan,
    experts: usize,
    k: usize,
    seed: u64,
) -> Result<Model> {
    if plan.replace.len() != model.config.norm_slots() {
        return Err(Error::Config(format!(
            "replacement plan covers {} slots, model has {}",
            plan.replace.len(),
            model.config.norm_slots()
        )));
    }
    if experts < 1 || k < 1 || k > experts {
        return Err(Error::Config(format!(
            "need 1 <= k <= experts, got k={k}, experts={experts}"
        )));
    }
    let mut out = model.clone();
    for (slot, replace) in plan.replace.iter().enumerate() {
        if !replace {
            continue;
        }
        let NormSlot::Plain(affine) = &model.params.norm_slots[slot] else {
            return Err(Error::Config(format!("slot {slot} is already a MoE layer")));
        };
        let layer = moe_ln::init_moe_layer(
            model.config.embed_dim,
            experts,
            (&affine.weight, &affine.bias),
            rng::derive(seed, &[slot as u64]),
        )
        .with_activated(k);
        out.params.norm_slots[slot] = NormSlot::Moe(layer);
    }
    Ok(out)
}

// ── parameter visiting ───────────────────────────────────────────────

impl Model {
    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Tensor)) {
        let p = &self.params;
        f("vit/patch_proj", &p.patch_proj);
        f("vit/pos_embed", &p.pos_embed);
        f("vit/cls_token", &p.cls_token);
        for (i, b) in p.blocks.iter().enumerate() {
            f(&format!("vit/block{i}/msa/wq"), &b.wq);
            f(&format!("vit/block{i}/msa/bq"), &b.bq);
            f(&format!("vit/block{i}/msa/wk"), &b.wk);
            f(&format!("vit/block{i}/msa/bk"), &b.bk);
            f(&format!("vit/block{i}/msa/wv"), &b.wv);
            f(&format!("vit/block{i}/msa/bv"), &b.bv);
            f(&format!("vit/block{i}/msa/wo"), &b.wo);
            f(&format!("vit/block{i}/msa/bo"), &b.bo);
            f(&format!("vit/block{i}/mlp/w1"), &b.w1);
            f(&format!("vit/block{i}/mlp/b1"), &b.b1);
            f(&format!("vit/block{i}/mlp/w2"), &b.w2);
            f(&format!("vit/block{i}/mlp/b2"), &b.b2);
        }
        if let Some((hw, hb)) = &p.head_hidden {
            f("vit/head/hidden_w", hw);
            f("vit/head/hidden_b", hb);
        }
        f("vit/head/w", &p.head_w);
        f("vit/head/b", &p.head_b);
        for (j, slot) in p.norm_slots.iter().enumerate() {
            match slot {
                NormSlot::Plain(a) => {
                    f(&format!("vit/norm{j}/weight"), &a.weight);
                    f(&format!("vit/norm{j}/bias"), &a.bias);
                }
                NormSlot::Moe(m) => {
                    f(&format!("vit/norm{j}/moe/shared_weight"), &m.shared_weight);
                    f(&format!("vit/norm{j}/moe/shared_bias"), &m.shared_bias);
                    f(&format!("vit/norm{j}/moe/expert_weight"), &m.expert_weight);
                    f(&format!("vit/norm{j}/moe/expert_bias"), &m.expert_bias);
                    f(&format!("vit/norm{j}/moe/router_weight"), &m.router_weight);
                    f(&format!("vit/norm{j}/moe/router_bias"), &m.router_bias);
                }
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        let p = &mut self.params;
        f("vit/patch_proj", &mut p.patch_proj);
        f("vit/pos_embed", &mut p.pos_embed);
        f("vit/cls_token", &mut p.cls_token);
        for (i, b) in p.blocks.iter_mut().enumerate() {
            f(&format!("vit/block{i}/msa/wq"), &mut b.wq);
            f(&format!("vit/block{i}/msa/bq"), &mut b.bq);
            f(&format!("vit/block{i}/msa/wk"), &mut b.wk);
            f(&format!("vit/block{i}/msa/bk"), &mut b.bk);
            f(&format!("vit/block{i}/msa/wv"), &mut b.wv);
            f(&format!("vit/block{i}/msa/bv"), &mut b.bv);
            f(&format!("vit/block{i}/msa/wo"), &mut b.wo);
            f(&format!("vit/block{i}/msa/bo"), &mut b.bo);
            f(&format!("vit/block{i}/mlp/w1"), &mut b.w1);
            f(&format!("vit/block{i}/mlp/b1"), &mut b.b1);
            f(&format!("vit/block{i}/mlp/w2"), &mut b.w2);
            f(&format!("vit/block{i}/mlp/b2"), &mut b.b2);
        }
        if let Some((hw, hb)) = &mut p.head_hidden {
            f("vit/head/hidden_w", hw);
            f("vit/head/hidden_b", hb);
        }
        f("vit/head/w", &mut p.head_w);
        f("vit/head/b", &mut p.head_b);
        for (j, slot) in p.norm_slots.iter_mut().enumerate() {
            match slot {
                NormSlot::Plain(a) => {
                    f(&format!("vit/norm{j}/weight"), &mut a.weight);
                    f(&format!("vit/norm{j}/bias"), &mut a.bias);
                }
                NormSlot::Moe(m) => {
                    f(
                        &format!("vit/norm{j}/moe/shared_weight"),
                        &mut m.shared_weight,
                    );
                    f(&format!("vit/norm{j}/moe/shared_bias"), &mut m.shared_bias);
                    f(
                        &format!("vit/norm{j}/moe/expert_weight"),
                        &mut m.expert_weight,
                    );
                    f(&format!("vit/norm{j}/moe/expert_bias"), &mut m.expert_bias);
                    f(
                        &format!("vit/norm{j}/moe/router_weight"),
                        &mut m.router_weight,
                    );
                    f(&format!("vit/norm{j}/moe/router_bias"), &mut m.router_bias);
                }
            }
        }
    }

    pub fn param_map(&self) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        self.visit_params(&mut |name, t| {
            map.insert(String::from(name), t.clone());
        });
        map
    }

    /// Overwrite parameters from a path map (shapes must match).
    pub fn set_params(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut missing: Vec<String> = Vec::new();
        let mut mismatch: Vec<String> = Vec::new();
        self.visit_params_mut(&mut |name, t| match map.get(name) {
            Some(src) if src.shape() == t.shape() => *t = src.clone(),
            Some(_) => mismatch.push(String::from(name)),
            None => missing.push(String::from(name)),
        });
        if let Some(name) = mismatch.first() {
            return Err(Error::Config(format!(
                "checkpoint shape mismatch at {name}"
            )));
        }
        if let Some(name) = missing.first() {
            return Err(Error::Config(format!("checkpoint missing parameter {name}")));
        }
        Ok(())
    }

    pub fn trainable_paths(&self, scope: TrainScope) -> Vec<String> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, _| {
            if path_is_trainable(name, scope) {
                out.push(String::from(name));
            }
        });
        out
    }

    /// FNV-1a digest over the named parameters (sorted path order), used to
    /// verify that frozen parameters stay bit-identical.
    pub fn digest_params(&self, filter: impl Fn(&str) -> bool) -> u64 {
        let mut named: Vec<(String, u64)> = Vec::new();
        self.visit_params(&mut |name, t| {
            if filter(name) {
                let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                for v in t.data() {
                    for byte in v.to_bits().to_le_bytes() {
                        h ^= byte as u64;
                        h = h.wrapping_mul(0x0000_0100_0000_01b3);
                    }
                }
                named.push((String::from(name), h));
            }
        });
        named.sort();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, sub) in named {
            for byte in name.bytes().chain(sub.to_le_bytes()) {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Flattened displacement `theta - theta_ref` over the given paths
    /// (sorted path order).
    pub fn displacement(&self, reference: &Model, paths: &[String]) -> Vec<f64> {
        let cur = self.param_map();
        let base = reference.param_map();
        let mut sorted = paths.to_vec();
        sorted.sort();
        let mut out = Vec::new();
        for p in &sorted {
            let a = cur.get(p).expect("path in model");
            let b = base.get(p).expect("path in reference");
            out.extend(a.data().iter().zip(b.data()).map(|(x, y)| x - y));
        }
        out
    }
}

// ── tape-level forward ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub scope: TrainScope,
    /// Apply the gradient-preserving `p / detach(p)` scaling (on by default;
    /// disabling it is an ablation that cuts the router's task gradient).
    pub detach_scale: bool,
    /// Capture the final class-token embedding (before the last norm slot).
    pub capture_embeddings: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions {
            scope: TrainScope::Frozen,
            detach_scale: true,
            capture_embeddings: false,
        }
    }

    pub fn train(scope: TrainScope) -> Self {
        ForwardOptions {
            scope,
            detach_scale: true,
            capture_embeddings: false,
        }
    }
}

/// Routing decisions of a whole batch pinned from a base run (one entry per
/// MoE slot ordinal, then per sample). See [`moe_ln::PinnedSample`].
#[derive(Debug, Clone, Default)]
pub struct PinnedRouting {
    pub per_slot: Vec<Vec<PinnedSample>>,
}

#[derive(Clone, Copy)]
enum SlotVars {
    Plain { weight: Var, bias: Var },
    Moe(MoeLeafVars),
}

struct BlockVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

pub struct BatchForward {
    pub tape: Tape,
    /// Leaf Var per parameter path.
    pub leaves: BTreeMap<String, Var>,
    /// Per-sample logits, each `[1, K]`.
    pub sample_logits: Vec<Var>,
    /// Per-sample posteriors, each `[1, K]`.
    pub sample_posteriors: Vec<Var>,
    /// Stacked logits / posteriors, `[B, K]`.
    pub logits: Tensor,
    pub posteriors: Tensor,
    /// Argmax class per sample (ties broken by lowest index).
    pub predictions: Vec<usize>,
    /// Routing accumulation, one entry per MoE slot in slot order.
    pub routing: Vec<LayerRouting>,
    /// Final class-token embeddings `[B, D]` when requested.
    pub embeddings: Option<Tensor>,
}

impl BatchForward {
    /// Pin the routing decisions of this run for finite-difference oracles.
    pub fn pinned_routing(&self) -> PinnedRouting {
        PinnedRouting {
            per_slot: self
                .routing
                .iter()
                .map(|layer| {
                    layer
                        .selections
                        .iter()
                        .zip(&layer.selected_probs)
                        .map(|(sel, probs)| PinnedSample {
                            selection: sel.clone(),
                            denominators: probs.clone(),
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

/// Extract the `[N, P^2 C]` patch matrix of sample `b`; patches in raster
/// order over the patch grid, each flattened as (py, px, channel).
pub fn extract_patches(images: &Tensor, b: usize, config: &ViTConfig) -> Tensor {
    let (s, c, p) = (config.image_side, config.channels, config.patch_side);
    let grid = s / p;
    let mut out = vec![0.0; config.tokens() * config.patch_dim()];
    let img = images.data();
    let img_base = b * s * s * c;
    let mut cursor = 0;
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..p {
                for px in 0..p {
                    let y = gy * p + py;
                    let x = gx * p + px;
                    for ch in 0..c {
                        out[cursor] = img[img_base + (y * s + x) * c + ch];
                        cursor += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![config.tokens(), config.patch_dim()], out).expect("sized")
}

/// z0 = concat(class token, patch projections) + position encoding.
pub fn patch_embed(
    tape: &mut Tape,
    patches: Var,
    patch_proj: Var,
    cls_token: Var,
    pos_embed: Var,
    embed_dim: usize,
) -> Result<Var> {
    let projected = tape.linear(patches, patch_proj, None)?;
    let cls_row = tape.reshape(cls_token, vec![1, embed_dim])?;
    let tokens = tape.concat_rows(&[cls_row, projected])?;
    tape.add(tokens, pos_embed)
}

fn msa(tape: &mut Tape, x: Var, b: &BlockVars, heads: usize) -> Result<Var> {
    let d = tape.shape(x)[1];
    let dh = d / heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    let q = tape.linear(x, b.wq, Some(b.bq))?;
    let k = tape.linear(x, b.wk, Some(b.bk))?;
    let v = tape.linear(x, b.wv, Some(b.bv))?;
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax(scaled)?;
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&head_outs)?;
    tape.linear(merged, b.wo, Some(b.bo))
}

fn mlp(tape: &mut Tape, x: Var, b: &BlockVars) -> Result<Var> {
    let h = tape.linear(x, b.w1, Some(b.b1))?;
    let a = tape.gelu(h);
    tape.linear(a, b.w2, Some(b.b2))
}

struct ForwardState<'m> {
    model: &'m Model,
    slot_vars: Vec<SlotVars>,
    block_vars: Vec<BlockVars>,
    embed: (Var, Var, Var), // patch_proj, cls, pos
    head_hidden: Option<(Var, Var)>,
    head: (Var, Var),
    /// slot index -> MoE ordinal
    ordinals: Vec<Option<usize>>,
    detach_scale: bool,
}

impl ForwardState<'_> {
    fn apply_norm(
        &self,
        tape: &mut Tape,
        z: Var,
        slot: usize,
        routing: &mut [LayerRouting],
        pinned: Option<&PinnedRouting>,
        sample: usize,
    ) -> Result<Var> {
        match (&self.model.params.norm_slots[slot], &self.slot_vars[slot]) {
            (NormSlot::Plain(_), SlotVars::Plain { weight, bias }) => {
                let n = tape.normalize(z, self.model.config.layer_norm_eps)?;
                let s = tape.mul_rowvec(n, *weight)?;
                tape.add_rowvec(s, *bias)
            }
            (NormSlot::Moe(layer), SlotVars::Moe(leaves)) => {
                let ordinal = self.ordinals[slot].expect("moe slot has ordinal");
                let pinned_sample = pinned.map(|p| &p.per_slot[ordinal][sample]);
                let (out, record) = moe_ln::forward_sample(
                    tape,
                    z,
                    layer,
                    leaves,
                    self.model.config.layer_norm_eps,
                    self.detach_scale,
                    pinned_sample,
                )?;
                routing[ordinal].record(record);
                Ok(out)
            }
            _ => unreachable!("slot vars mirror norm slots"),
        }
    }
}

impl Model {
    fn leaf_all(&self, tape: &mut Tape, scope: TrainScope) -> BTreeMap<String, Var> {
        let mut map = BTreeMap::new();
        self.visit_params(&mut |name, t| {
            let var = tape.leaf(t, path_is_trainable(name, scope));
            map.insert(String::from(name), var);
        });
        map
    }

    fn forward_state<'m>(
        &'m self,
        leaves: &BTreeMap<String, Var>,
        detach_scale: bool,
    ) -> ForwardState<'m> {
        let lv = |name: &str| *leaves.get(name).expect("leaf exists");
        let mut ordinals = vec![None; self.config.norm_slots()];
        let mut next = 0;
        let slot_vars = self
            .params
            .norm_slots
            .iter()
            .enumerate()
            .map(|(j, slot)| match slot {
                NormSlot::Plain(_) => SlotVars::Plain {
                    weight: lv(&format!("vit/norm{j}/weight")),
                    bias: lv(&format!("vit/norm{j}/bias")),
                },
                NormSlot::Moe(_) => {
                    ordinals[j] = Some(next);
                    next += 1;
                    SlotVars::Moe(MoeLeafVars {
                        shared_weight: lv(&format!("vit/norm{j}/moe/shared_weight")),
                        shared_bias: lv(&format!("vit/norm{j}/moe/shared_bias")),
                        expert_weight: lv(&format!("vit/norm{j}/moe/expert_weight")),
                        expert_bias: lv(&format!("vit/norm{j}/moe/expert_bias")),
                        router_weight: lv(&format!("vit/norm{j}/moe/router_weight")),
                        router_bias: lv(&format!("vit/norm{j}/moe/router_bias")),
                    })
                }
            })
            .collect();
        let block_vars = (0..self.config.depth)
            .map(|i| BlockVars {
                wq: lv(&format!("vit/block{i}/msa/wq")),
                bq: lv(&format!("vit/block{i}/msa/bq")),
                wk: lv(&format!("vit/block{i}/msa/wk")),
                bk: lv(&format!("vit/block{i}/msa/bk")),
                wv: lv(&format!("vit/block{i}/msa/wv")),
                bv: lv(&format!("vit/block{i}/msa/bv")),
                wo: lv(&format!("vit/block{i}/msa/wo")),
                bo: lv(&format!("vit/block{i}/msa/bo")),
                w1: lv(&format!("vit/block{i}/mlp/w1")),
                b1: lv(&format!("vit/block{i}/mlp/b1")),
                w2: lv(&format!("vit/block{i}/mlp/w2")),
                b2: lv(&format!("vit/block{i}/mlp/b2")),
            })
            .collect();
        ForwardState {
            model: self,
            slot_vars,
            block_vars,
            embed: (
                lv("vit/patch_proj"),
                lv("vit/cls_token"),
                lv("vit/pos_embed"),
            ),
            head_hidden: self
                .params
                .head_hidden
                .as_ref()
                .map(|_| (lv("vit/head/hidden_w"), lv("vit/head/hidden_b"))),
            head: (lv("vit/head/w"), lv("vit/head/b")),
            ordinals,
            detach_scale,
        }
    }

    /// Forward a batch `[B, S, S, C]`, recording the computation on a fresh
    /// tape. Predictions and posteriors are produced for every sample; MoE
    /// routing is accumulated per slot for later loss collection.
    pub fn forward_batch(&self, images: &Tensor, opts: &ForwardOptions) -> Result<BatchForward> {
        self.forward_batch_pinned(images, opts, None)
    }

    /// As [`Model::forward_batch`], but with routing decisions pinned from a
    /// base run (finite-difference surrogate).
    pub fn forward_batch_pinned(
        &self,
        images: &Tensor,
        opts: &ForwardOptions,
        pinned: Option<&PinnedRouting>,
    ) -> Result<BatchForward> {
        self.config.validate()?;
        let cfg = &self.config;
        let shape = images.shape();
        let expected = vec![cfg.image_side, cfg.image_side, cfg.channels];
        if shape.len() != 4 || shape[1..] != expected[..] {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: shape.to_vec(),
                rhs: expected,
            });
        }
        let batch = shape[0];
        if batch == 0 {
            return Err(Error::Contract("forward on an empty batch".into()));
        }

        let mut tape = Tape::new();
        let leaves = self.leaf_all(&mut tape, opts.scope);
        let state = self.forward_state(&leaves, opts.detach_scale);

        let mut routing: Vec<LayerRouting> = self
            .params
            .norm_slots
            .iter()
            .enumerate()
            .filter_map(|(j, slot)| match slot {
                NormSlot::Moe(layer) => Some(LayerRouting::new(j, layer)),
                NormSlot::Plain(_) => None,
            })
            .collect();

        let k = cfg.classes;
        let mut sample_logits = Vec::with_capacity(batch);
        let mut sample_posteriors = Vec::with_capacity(batch);
        let mut logits_data = Vec::with_capacity(batch * k);
        let mut posterior_data = Vec::with_capacity(batch * k);
        let mut predictions = Vec::with_capacity(batch);
        let mut embeddings = opts
            .capture_embeddings
            .then(|| Vec::with_capacity(batch * cfg.embed_dim));

        for b in 0..batch {
            let patches = extract_patches(images, b, cfg);
            let patches_var = tape.constant(&patches);
            let mut z = patch_embed(
                &mut tape,
                patches_var,
                state.embed.0,
                state.embed.1,
                state.embed.2,
                cfg.embed_dim,
            )?;
            for l in 0..cfg.depth {
                let n1 = state.apply_norm(&mut tape, z, 2 * l, &mut routing, pinned, b)?;
                let attn = msa(&mut tape, n1, &state.block_vars[l], cfg.heads)?;
                let z_mid = tape.add(attn, z)?;
                let n2 = state.apply_norm(&mut tape, z_mid, 2 * l + 1, &mut routing, pinned, b)?;
                let fed = mlp(&mut tape, n2, &state.block_vars[l])?;
                z = tape.add(fed, z_mid)?;
                if !tape.value(z).iter().all(|v| v.is_finite()) {
                    return Err(Error::Numeric {
                        op: "forward",
                        detail: format!("non-finite activations in block {l} (sample {b})"),
                    });
                }
            }
            if let Some(buf) = embeddings.as_mut() {
                buf.extend_from_slice(&tape.value(z)[..cfg.embed_dim]);
            }
            let final_slot = 2 * cfg.depth;
            let zn = state.apply_norm(&mut tape, z, final_slot, &mut routing, pinned, b)?;
            let cls_row = tape.slice_rows(zn, 0, 1)?;
            let logits = match state.head_hidden {
                Some((hw, hb)) => {
                    let h = tape.linear(cls_row, hw, Some(hb))?;
                    let a = tape.gelu(h);
                    tape.linear(a, state.head.0, Some(state.head.1))?
                }
                None => tape.linear(cls_row, state.head.0, Some(state.head.1))?,
            };
            if !tape.value(logits).iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric {
                    op: "forward",
                    detail: format!("non-finite logits at the classifier head (sample {b})"),
                });
            }
            let posterior = tape.softmax(logits)?;

            let lrow = tape.value(logits);
            let prow = tape.value(posterior);
            logits_data.extend_from_slice(lrow);
            posterior_data.extend_from_slice(prow);
            predictions.push(argmax(prow));
            sample_logits.push(logits);
            sample_posteriors.push(posterior);
        }

        Ok(BatchForward {
            tape,
            leaves,
            sample_logits,
            sample_posteriors,
            logits: Tensor::new(vec![batch, k], logits_data).expect("sized"),
            posteriors: Tensor::new(vec![batch, k], posterior_data).expect("sized"),
            predictions,
            routing,
            embeddings: embeddings
                .map(|buf| Tensor::new(vec![batch, cfg.embed_dim], buf).expect("sized")),
        })
    }

    /// Inference-only forward: (logits, posteriors), both `[B, K]`.
    pub fn forward_eval(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let fwd = self.forward_batch(images, &ForwardOptions::eval())?;
        Ok((fwd.logits, fwd.posteriors))
    }
}

/// Index of the row maximum, ties broken by lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
