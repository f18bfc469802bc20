//! The verification network.
//!
//! Per proposal, three token sets are embedded with one FC+LN+ReLU block
//! each: geometric tokens (the 29-dim vector spread over `g` latent
//! groups), nine projection-point tokens, and a single RoI token. A
//! cross-attention (points querying geometry) followed by self-attention
//! over the nine points builds a geometry-aware point encoding; the RoI
//! token then queries it with one more cross-attention, leaving one d-dim
//! latent per proposal. A final self-attention across proposals resolves
//! the crowding between grid neighbors, and three small MLP heads emit
//! class logits and position/dimension residuals.
//!
//! Every attention module is multi-head scaled dot-product attention with
//! a residual connection and a GELU MLP (two linear layers) with a second
//! residual. The inter-proposal attention uses order-invariant reductions
//! so the whole pipeline is bit-exactly permutation-equivariant over
//! proposals.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::tnsr::StoredTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Network shape and head toggles.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width d; must be divisible by `heads`.
    pub hidden_dim: usize,
    /// Number of geometric latent groups g.
    pub geo_groups: usize,
    pub heads: usize,
    /// Feature-map channels C.
    pub channels: usize,
    /// Class count L.
    pub num_classes: usize,
    /// Hidden width of the three head branches; defaults to `hidden_dim`.
    pub head_hidden: Option<usize>,
    /// Head toggles for ablations: rescoring, position residual,
    /// dimension residual.
    pub rescore: bool,
    pub res_loc: bool,
    pub res_dim: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            geo_groups: 4,
            heads: 8,
            channels: 64,
            num_classes: 3,
            head_hidden: None,
            rescore: true,
            res_loc: true,
            res_dim: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.geo_groups == 0 || self.channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn roi_input_dim(&self) -> usize {
        crate::featurize::ROI_GRID * crate::featurize::ROI_GRID * self.channels
    }

    pub fn head_width(&self) -> usize {
        self.head_hidden.unwrap_or(self.hidden_dim)
    }
}

// Parameter containers are generic over the payload so the same structure
// describes concrete tensors and their tape handles.

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

#[derive(Clone, Debug)]
pub struct LnPair<T> {
    pub gamma: T,
    pub beta: T,
}

/// FC + LN + ReLU.
#[derive(Clone, Debug)]
pub struct MlpBlock<T> {
    pub fc: Linear<T>,
    pub ln: LnPair<T>,
}

/// Multi-head attention with its post-attention MLP.
#[derive(Clone, Debug)]
pub struct AttnBlock<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub m1: Linear<T>,
    pub m2: Linear<T>,
}

/// Two stacked MLP blocks and a final linear projection.
#[derive(Clone, Debug)]
pub struct Head<T> {
    pub b1: MlpBlock<T>,
    pub b2: MlpBlock<T>,
    pub out: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct Params<T> {
    pub geo_embed: MlpBlock<T>,
    pub pt_embed: MlpBlock<T>,
    pub roi_embed: MlpBlock<T>,
    pub enc_cross: AttnBlock<T>,
    pub enc_self: AttnBlock<T>,
    pub dec_cross: AttnBlock<T>,
    pub inter_self: AttnBlock<T>,
    pub head_cls: Head<T>,
    pub head_loc: Head<T>,
    pub head_dim: Head<T>,
}

pub type ModelParams = Params<Tensor>;
pub type ParamVars = Params<Var>;

// ── enumeration ──

impl<T> Linear<T> {
    fn visit<'a>(&'a self, p: String, out: &mut Vec<(String, &'a T, bool)>) {
        out.push((format!("{p}.w"), &self.w, false));
        out.push((format!("{p}.b"), &self.b, true));
    }

    fn visit_mut<'a>(&'a mut self, p: String, out: &mut Vec<(String, &'a mut T, bool)>) {
        out.push((format!("{p}.w"), &mut self.w, false));
        out.push((format!("{p}.b"), &mut self.b, true));
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            w: f(&self.w),
            b: f(&self.b),
        }
    }
}

impl<T> LnPair<T> {
    fn visit<'a>(&'a self, p: String, out: &mut Vec<(String, &'a T, bool)>) {
        out.push((format!("{p}.gamma"), &self.gamma, true));
        out.push((format!("{p}.beta"), &self.beta, true));
    }

    fn visit_mut<'a>(&'a mut self, p: String, out: &mut Vec<(String, &'a mut T, bool)>) {
        out.push((format!("{p}.gamma"), &mut self.gamma, true));
        out.push((format!("{p}.beta"), &mut self.beta, true));
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LnPair<U> {
        LnPair {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }
}

impl<T> MlpBlock<T> {
    fn visit<'a>(&'a self, p: String, out: &mut Vec<(String, &'a T, bool)>) {
        self.fc.visit(format!("{p}.fc"), out);
        self.ln.visit(format!("{p}.ln"), out);
    }

    fn visit_mut<'a>(&'a mut self, p: String, out: &mut Vec<(String, &'a mut T, bool)>) {
        self.fc.visit_mut(format!("{p}.fc"), out);
        self.ln.visit_mut(format!("{p}.ln"), out);
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MlpBlock<U> {
        MlpBlock {
            fc: self.fc.map(f),
            ln: self.ln.map(f),
        }
    }
}

impl<T> AttnBlock<T> {
    fn visit<'a>(&'a self, p: String, out: &mut Vec<(String, &'a T, bool)>) {
        self.q.visit(format!("{p}.q"), out);
        self.k.visit(format!("{p}.k"), out);
        self.v.visit(format!("{p}.v"), out);
        self.o.visit(format!("{p}.o"), out);
        self.m1.visit(format!("{p}.m1"), out);
        self.m2.visit(format!("{p}.m2"), out);
    }

    fn visit_mut<'a>(&'a mut self, p: String, out: &mut Vec<(String, &'a mut T, bool)>) {
        self.q.visit_mut(format!("{p}.q"), out);
        self.k.visit_mut(format!("{p}.k"), out);
        self.v.visit_mut(format!("{p}.v"), out);
        self.o.visit_mut(format!("{p}.o"), out);
        self.m1.visit_mut(format!("{p}.m1"), out);
        self.m2.visit_mut(format!("{p}.m2"), out);
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttnBlock<U> {
        AttnBlock {
            q: self.q.map(f),
            k: self.k.map(f),
            v: self.v.map(f),
            o: self.o.map(f),
            m1: self.m1.map(f),
            m2: self.m2.map(f),
        }
    }
}

impl<T> Head<T> {
    fn visit<'a>(&'a self, p: String, out: &mut Vec<(String, &'a T, bool)>) {
        self.b1.visit(format!("{p}.b1"), out);
        self.b2.visit(format!("{p}.b2"), out);
        self.out.visit(format!("{p}.out"), out);
    }

    fn visit_mut<'a>(&'a mut self, p: String, out: &mut Vec<(String, &'a mut T, bool)>) {
        self.b1.visit_mut(format!("{p}.b1"), out);
        self.b2.visit_mut(format!("{p}.b2"), out);
        self.out.visit_mut(format!("{p}.out"), out);
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Head<U> {
        Head {
            b1: self.b1.map(f),
            b2: self.b2.map(f),
            out: self.out.map(f),
        }
    }
}

impl<T> Params<T> {
    /// Every parameter as (name, tensor, no_decay), in a fixed order shared
    /// by the optimizer, checkpoints, and gradient checks.
    pub fn fields(&self) -> Vec<(String, &T, bool)> {
        let mut out = Vec::with_capacity(96);
        self.geo_embed.visit("geo_embed".into(), &mut out);
        self.pt_embed.visit("pt_embed".into(), &mut out);
        self.roi_embed.visit("roi_embed".into(), &mut out);
        self.enc_cross.visit("enc_cross".into(), &mut out);
        self.enc_self.visit("enc_self".into(), &mut out);
        self.dec_cross.visit("dec_cross".into(), &mut out);
        self.inter_self.visit("inter_self".into(), &mut out);
        self.head_cls.visit("head_cls".into(), &mut out);
        self.head_loc.visit("head_loc".into(), &mut out);
        self.head_dim.visit("head_dim".into(), &mut out);
        out
    }

    pub fn fields_mut(&mut self) -> Vec<(String, &mut T, bool)> {
        let mut out = Vec::with_capacity(96);
        self.geo_embed.visit_mut("geo_embed".into(), &mut out);
        self.pt_embed.visit_mut("pt_embed".into(), &mut out);
        self.roi_embed.visit_mut("roi_embed".into(), &mut out);
        self.enc_cross.visit_mut("enc_cross".into(), &mut out);
        self.enc_self.visit_mut("enc_self".into(), &mut out);
        self.dec_cross.visit_mut("dec_cross".into(), &mut out);
        self.inter_self.visit_mut("inter_self".into(), &mut out);
        self.head_cls.visit_mut("head_cls".into(), &mut out);
        self.head_loc.visit_mut("head_loc".into(), &mut out);
        self.head_dim.visit_mut("head_dim".into(), &mut out);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Params<U> {
        Params {
            geo_embed: self.geo_embed.map(&mut f),
            pt_embed: self.pt_embed.map(&mut f),
            roi_embed: self.roi_embed.map(&mut f),
            enc_cross: self.enc_cross.map(&mut f),
            enc_self: self.enc_self.map(&mut f),
            dec_cross: self.dec_cross.map(&mut f),
            inter_self: self.inter_self.map(&mut f),
            head_cls: self.head_cls.map(&mut f),
            head_loc: self.head_loc.map(&mut f),
            head_dim: self.head_dim.map(&mut f),
        }
    }
}

impl ModelParams {
    /// Deterministic initialization: Xavier-uniform weights, zero biases,
    /// unit/zero layer norms, zero final head projections (so residuals
    /// start at zero and scores at 0.5).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.hidden_dim;
        let gd = cfg.geo_groups * d;

        fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Linear<Tensor> {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            Linear {
                w: Tensor::from_vec(&[fan_in, fan_out], data),
                b: Tensor::zeros(&[fan_out]),
            }
        }
        fn mlp(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> MlpBlock<Tensor> {
            MlpBlock {
                fc: xavier(rng, fan_in, fan_out),
                ln: LnPair {
                    gamma: Tensor::from_vec(&[fan_out], vec![1.0; fan_out]),
                    beta: Tensor::zeros(&[fan_out]),
                },
            }
        }
        fn attn(rng: &mut ChaCha8Rng, d: usize) -> AttnBlock<Tensor> {
            AttnBlock {
                q: xavier(rng, d, d),
                k: xavier(rng, d, d),
                v: xavier(rng, d, d),
                o: xavier(rng, d, d),
                m1: xavier(rng, d, d),
                m2: xavier(rng, d, d),
            }
        }
        fn head(rng: &mut ChaCha8Rng, d: usize, hidden: usize, fan_out: usize) -> Head<Tensor> {
            Head {
                b1: mlp(rng, d, hidden),
                b2: mlp(rng, hidden, hidden),
                // zero final projection: residuals start at zero, scores
                // at 0.5
                out: Linear {
                    w: Tensor::zeros(&[hidden, fan_out]),
                    b: Tensor::zeros(&[fan_out]),
                },
            }
        }
        let geo_embed = mlp(&mut rng, crate::featurize::GEO_DIM, gd);
        let pt_embed = mlp(&mut rng, cfg.channels, d);
        let roi_embed = mlp(&mut rng, cfg.roi_input_dim(), d);
        let enc_cross = attn(&mut rng, d);
        let enc_self = attn(&mut rng, d);
        let dec_cross = attn(&mut rng, d);
        let inter_self = attn(&mut rng, d);
        let hh = cfg.head_width();
        let head_cls = head(&mut rng, d, hh, cfg.num_classes);
        let head_loc = head(&mut rng, d, hh, 3);
        let head_dim = head(&mut rng, d, hh, 3);
        Ok(Params {
            geo_embed,
            pt_embed,
            roi_embed,
            enc_cross,
            enc_self,
            dec_cross,
            inter_self,
            head_cls,
            head_loc,
            head_dim,
        })
    }

    /// Register every tensor as a tape input, preserving structure.
    pub fn tape(&self, tape: &mut Tape) -> ParamVars {
        self.map(|t| tape.input(t.clone()))
    }

    pub fn to_entries(&self) -> Vec<(String, StoredTensor)> {
        self.fields()
            .into_iter()
            .map(|(name, t, _)| {
                (
                    name,
                    StoredTensor {
                        dims: t.shape.iter().map(|&d| d as u64).collect(),
                        data: t.data.clone(),
                    },
                )
            })
            .collect()
    }

    /// Rebuild parameters from checkpoint entries; shapes must match the
    /// configuration exactly.
    pub fn from_entries(cfg: &ModelConfig, entries: &[(String, StoredTensor)]) -> Result<Self> {
        let mut params = Self::init(cfg, 0)?;
        let mut fields = params.fields_mut();
        for (name, stored) in entries {
            let Some((_, tensor, _)) = fields.iter_mut().find(|(n, _, _)| n == name) else {
                return Err(Error::BadTensorFile(format!("unknown parameter '{name}'")));
            };
            let dims: Vec<usize> = stored.dims.iter().map(|&d| d as usize).collect();
            if dims != tensor.shape {
                return Err(Error::BadTensorFile(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    dims, tensor.shape
                )));
            }
            tensor.data = stored.data.clone();
        }
        Ok(params)
    }

    pub fn num_scalars(&self) -> usize {
        self.fields().iter().map(|(_, t, _)| t.numel()).sum()
    }
}

// ── forward ──

/// Raw per-scene inputs.
#[derive(Clone, Debug)]
pub struct SceneInputs {
    /// [N, 29]
    pub geo: Tensor,
    /// [N, 9, C]
    pub pt: Tensor,
    /// [N, 196 * C]
    pub roi: Tensor,
}

impl SceneInputs {
    pub fn n_proposals(&self) -> usize {
        self.geo.shape[0]
    }
}

/// Tape handles for the three outputs.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// [N, L] class logits.
    pub logits: Var,
    /// [N, 3] position residual in normalized coordinates.
    pub delta_p: Var,
    /// [N, 3] dimension residual in meters.
    pub delta_d: Var,
}

/// One FC + LN + ReLU block over the last axis of a 2D input.
pub fn mlp_block(tape: &mut Tape, block: &MlpBlock<Var>, x: Var) -> Result<Var> {
    let xs = tape.value(x).shape.clone();
    let ws = tape.value(block.fc.w).shape.clone();
    if xs.len() != 2 || xs[1] != ws[0] {
        return Err(Error::contract(format!(
            "mlp_block: input {xs:?} incompatible with weight {ws:?}"
        )));
    }
    let y = tape.matmul(x, block.fc.w);
    let y = tape.add_bias(y, block.fc.b);
    let y = tape.layer_norm(y, block.ln.gamma, block.ln.beta, 1e-5);
    Ok(tape.relu(y))
}

/// Multi-head attention block over token batches.
///
/// `q`: [B, Tq, d], `kv`: [B, Tkv, d]. Scaled dot-product attention per
/// head across the token axis, output projection, residual, then a
/// two-layer GELU MLP with residual. `canonical` makes the token-axis
/// reductions order-invariant.
pub fn mha(
    tape: &mut Tape,
    block: &AttnBlock<Var>,
    q: Var,
    kv: Var,
    heads: usize,
    canonical: bool,
) -> Result<Var> {
    let qs = tape.value(q).shape.clone();
    let ks = tape.value(kv).shape.clone();
    if qs.len() != 3 || ks.len() != 3 {
        return Err(Error::contract("mha expects [B, T, d] inputs"));
    }
    let (b, tq, d) = (qs[0], qs[1], qs[2]);
    let (b2, tkv, d2) = (ks[0], ks[1], ks[2]);
    if b != b2 || d != d2 {
        return Err(Error::contract(format!(
            "mha: query {qs:?} incompatible with key/value {ks:?}"
        )));
    }
    if d % heads != 0 {
        return Err(Error::contract(format!(
            "mha: width {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;

    let project = |tape: &mut Tape, x: Var, t: usize, lin: &Linear<Var>| -> Var {
        let flat = tape.reshape(x, &[b * t, d]);
        let y = tape.matmul(flat, lin.w);
        let y = tape.add_bias(y, lin.b);
        let y = tape.reshape(y, &[b, t, heads, dh]);
        let y = tape.permute(y, &[0, 2, 1, 3]); // [B, H, T, dh]
        tape.reshape(y, &[b * heads, t, dh])
    };
    let qh = project(tape, q, tq, &block.q);
    let kh = project(tape, kv, tkv, &block.k);
    let vh = project(tape, kv, tkv, &block.v);

    let kt = tape.permute(kh, &[0, 2, 1]); // [B*H, dh, Tkv]
    let scores = tape.bmm(qh, kt, false);
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax_last(scores, canonical);
    let ctx = tape.bmm(attn, vh, canonical); // [B*H, Tq, dh]

    let ctx = tape.reshape(ctx, &[b, heads, tq, dh]);
    let ctx = tape.permute(ctx, &[0, 2, 1, 3]); // [B, Tq, H, dh]
    let ctx = tape.reshape(ctx, &[b * tq, d]);
    let out = tape.matmul(ctx, block.o.w);
    let out = tape.add_bias(out, block.o.b);
    let out = tape.reshape(out, &[b, tq, d]);

    let x1 = tape.add(q, out);

    let flat = tape.reshape(x1, &[b * tq, d]);
    let m = tape.matmul(flat, block.m1.w);
    let m = tape.add_bias(m, block.m1.b);
    let m = tape.gelu(m);
    let m = tape.matmul(m, block.m2.w);
    let m = tape.add_bias(m, block.m2.b);
    let m = tape.reshape(m, &[b, tq, d]);
    Ok(tape.add(x1, m))
}

/// [N, 29] -> [N, g, d] geometric tokens.
pub fn embed_geo(tape: &mut Tape, pv: &ParamVars, cfg: &ModelConfig, geo: Var) -> Result<Var> {
    let n = tape.value(geo).shape[0];
    let z = mlp_block(tape, &pv.geo_embed, geo)?;
    Ok(tape.reshape(z, &[n, cfg.geo_groups, cfg.hidden_dim]))
}

/// [N, 9, C] -> [N, 9, d] point tokens (shared projection per point).
pub fn embed_pt(tape: &mut Tape, pv: &ParamVars, cfg: &ModelConfig, pt: Var) -> Result<Var> {
    let shape = tape.value(pt).shape.clone();
    if shape.len() != 3 || shape[1] != 9 || shape[2] != cfg.channels {
        return Err(Error::contract(format!(
            "embed_pt expects [N, 9, {}], got {shape:?}",
            cfg.channels
        )));
    }
    let n = shape[0];
    let flat = tape.reshape(pt, &[n * 9, cfg.channels]);
    let z = mlp_block(tape, &pv.pt_embed, flat)?;
    Ok(tape.reshape(z, &[n, 9, cfg.hidden_dim]))
}

/// [N, 196*C] -> [N, 1, d] RoI token.
pub fn embed_roi(tape: &mut Tape, pv: &ParamVars, cfg: &ModelConfig, roi: Var) -> Result<Var> {
    let shape = tape.value(roi).shape.clone();
    if shape.len() != 2 || shape[1] != cfg.roi_input_dim() {
        return Err(Error::contract(format!(
            "embed_roi expects [N, {}], got {shape:?}",
            cfg.roi_input_dim()
        )));
    }
    let n = shape[0];
    let z = mlp_block(tape, &pv.roi_embed, roi)?;
    Ok(tape.reshape(z, &[n, 1, cfg.hidden_dim]))
}

/// Point tokens query geometric tokens, then self-attend: geometry-aware
/// point encoding, [N, 9, d].
pub fn perceiver_encode(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    pt_tokens: Var,
    geo_tokens: Var,
) -> Result<Var> {
    let x = mha(tape, &pv.enc_cross, pt_tokens, geo_tokens, cfg.heads, false)?;
    mha(tape, &pv.enc_self, x, x, cfg.heads, false)
}

/// The RoI token queries the encoded points: fused latent, [N, 1, d].
pub fn perceiver_decode(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    roi_token: Var,
    encoded: Var,
) -> Result<Var> {
    mha(tape, &pv.dec_cross, roi_token, encoded, cfg.heads, false)
}

/// Self-attention across the N proposals of one scene, [N, d] -> [N, d].
/// No positional encoding; reductions over the proposal axis are
/// order-invariant, so the op is permutation-equivariant bit for bit.
pub fn inter_attn(tape: &mut Tape, pv: &ParamVars, cfg: &ModelConfig, f: Var) -> Result<Var> {
    let n = tape.value(f).shape[0];
    let x = tape.reshape(f, &[1, n, cfg.hidden_dim]);
    let y = mha(tape, &pv.inter_self, x, x, cfg.heads, true)?;
    Ok(tape.reshape(y, &[n, cfg.hidden_dim]))
}

fn run_head(tape: &mut Tape, head: &Head<Var>, f: Var) -> Result<Var> {
    let x = mlp_block(tape, &head.b1, f)?;
    let x = mlp_block(tape, &head.b2, x)?;
    let y = tape.matmul(x, head.out.w);
    Ok(tape.add_bias(y, head.out.b))
}

/// Three independent branches over the per-proposal latent. Disabled
/// branches output constant zeros of the right shape.
pub fn verify_head(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    f: Var,
) -> Result<ForwardVars> {
    let n = tape.value(f).shape[0];
    let logits = if cfg.rescore {
        run_head(tape, &pv.head_cls, f)?
    } else {
        tape.input(Tensor::zeros(&[n, cfg.num_classes]))
    };
    let delta_p = if cfg.res_loc {
        run_head(tape, &pv.head_loc, f)?
    } else {
        tape.input(Tensor::zeros(&[n, 3]))
    };
    let delta_d = if cfg.res_dim {
        run_head(tape, &pv.head_dim, f)?
    } else {
        tape.input(Tensor::zeros(&[n, 3]))
    };
    Ok(ForwardVars {
        logits,
        delta_p,
        delta_d,
    })
}

/// Full pipeline over one scene's proposals.
pub fn forward(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    inputs: &SceneInputs,
) -> Result<ForwardVars> {
    let n = inputs.n_proposals();
    if n == 0 {
        return Err(Error::contract("forward on an empty proposal set"));
    }
    if inputs.geo.shape != vec![n, crate::featurize::GEO_DIM] {
        return Err(Error::contract(format!(
            "geo inputs must be [N, {}], got {:?}",
            crate::featurize::GEO_DIM,
            inputs.geo.shape
        )));
    }
    let geo = tape.input(inputs.geo.clone());
    let pt = tape.input(inputs.pt.clone());
    let roi = tape.input(inputs.roi.clone());

    let geo_tokens = embed_geo(tape, pv, cfg, geo)?;
    let pt_tokens = embed_pt(tape, pv, cfg, pt)?;
    let roi_token = embed_roi(tape, pv, cfg, roi)?;

    let encoded = perceiver_encode(tape, pv, cfg, pt_tokens, geo_tokens)?;
    let fused = perceiver_decode(tape, pv, cfg, roi_token, encoded)?;
    let fused = tape.reshape(fused, &[n, cfg.hidden_dim]);
    let mixed = inter_attn(tape, pv, cfg, fused)?;
    verify_head(tape, pv, cfg, mixed)
}

/// Convenience wrapper: run the forward pass and return concrete output
/// tensors (logits, delta_p, delta_d).
pub fn forward_values(
    params: &ModelParams,
    cfg: &ModelConfig,
    inputs: &SceneInputs,
) -> Result<(Tensor, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let pv = params.tape(&mut tape);
    let out = forward(&mut tape, &pv, cfg, inputs)?;
    Ok((
        tape.value(out.logits).clone(),
        tape.value(out.delta_p).clone(),
        tape.value(out.delta_d).clone(),
    ))
}

/// Row-wise softmax of a [N, L] logits tensor (plain value computation,
/// used by the matcher).
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let l = logits.shape[1];
    logits
        .data
        .chunks(l)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}
